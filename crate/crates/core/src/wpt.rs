//! Multi-level 2-D wavelet packet transform.
//!
//! Every subband is split again at the next level (full packet tree), so level
//! `k` of a C-channel image carries `4^k·C` channels at `H/2^k × W/2^k`.
//! Channel order is depth-first by parent channel, then `(LL, LH, HL, HH)`.
//! Boundaries wrap periodically, which keeps orthonormal filter banks exactly
//! invertible and energy preserving.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Subband order within one split.
pub const SUBBAND_ORDER: [&str; 4] = ["LL", "LH", "HL", "HH"];

/// Analysis filter pair `(h_low, h_high)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterPair {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
    pub name: String,
}

impl FilterPair {
    /// Orthonormal Haar: `(1/√2, 1/√2)` and `(1/√2, -1/√2)`.
    pub fn haar() -> Self {
        let a = std::f64::consts::FRAC_1_SQRT_2;
        FilterPair {
            low: vec![a, a],
            high: vec![a, -a],
            name: "haar".into(),
        }
    }

    /// Orthonormal Daubechies with two vanishing moments (4 taps).
    pub fn db2() -> Self {
        let r3 = 3f64.sqrt();
        let d = 4.0 * std::f64::consts::SQRT_2;
        let low = vec![(1.0 + r3) / d, (3.0 + r3) / d, (3.0 - r3) / d, (1.0 - r3) / d];
        Self::from_low("db2", low)
    }

    /// Builds the quadrature-mirror high-pass `h[k] = (-1)^k · l[L-1-k]`.
    pub fn from_low(name: &str, low: Vec<f64>) -> Self {
        let n = low.len();
        let high = (0..n)
            .map(|k| if k % 2 == 0 { low[n - 1 - k] } else { -low[n - 1 - k] })
            .collect();
        FilterPair {
            low,
            high,
            name: name.into(),
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "haar" | "db1" => Ok(Self::haar()),
            "db2" => Ok(Self::db2()),
            other => Err(Error::Argument(format!(
                "unknown wavelet filter `{other}` (expected haar or db2)"
            ))),
        }
    }

    pub fn len(&self) -> usize {
        self.low.len()
    }

    pub fn is_empty(&self) -> bool {
        self.low.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.low.len() != self.high.len() || self.low.is_empty() || self.low.len() % 2 != 0 {
            return Err(Error::Configuration(format!(
                "filter `{}` needs equal, even, non-zero lengths (got {} and {})",
                self.name,
                self.low.len(),
                self.high.len()
            )));
        }
        Ok(())
    }

    /// `(Σ l², Σ l·h)`; `(1, 0)` for an orthonormal pair.
    pub fn orthonormality(&self) -> (f64, f64) {
        let norm = self.low.iter().map(|v| v * v).sum();
        let cross = self.low.iter().zip(&self.high).map(|(a, b)| a * b).sum();
        (norm, cross)
    }

    /// 2-D kernels `row ⊗ col` for `(LL, LH, HL, HH)`; LH is low along
    /// height and high along width (horizontal detail).
    pub fn kernels(&self) -> [Array2<f64>; 4] {
        let outer = |r: &[f64], c: &[f64]| Array2::from_shape_fn((r.len(), c.len()), |(m, n)| r[m] * c[n]);
        [
            outer(&self.low, &self.low),
            outer(&self.low, &self.high),
            outer(&self.high, &self.low),
            outer(&self.high, &self.high),
        ]
    }
}

/// One split of a 2-D signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Subbands {
    pub ll: Array2<f64>,
    pub lh: Array2<f64>,
    pub hl: Array2<f64>,
    pub hh: Array2<f64>,
}

impl Subbands {
    pub fn into_array(self) -> [Array2<f64>; 4] {
        [self.ll, self.lh, self.hl, self.hh]
    }
}

/// Filters each row of `x` (periodic) and keeps every second output.
fn analyze_rows(x: ArrayView2<'_, f64>, f: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    Array2::from_shape_fn((h, w / 2), |(i, j)| {
        f.iter().enumerate().map(|(n, c)| x[[i, (2 * j + n) % w]] * c).sum()
    })
}

/// Adjoint of [`analyze_rows`].
fn synthesize_rows(c: ArrayView2<'_, f64>, f: &[f64], out: &mut Array2<f64>) {
    let (h, half) = c.dim();
    let w = 2 * half;
    for i in 0..h {
        for j in 0..half {
            let v = c[[i, j]];
            for (n, t) in f.iter().enumerate() {
                out[[i, (2 * j + n) % w]] += v * t;
            }
        }
    }
}

fn check_even(h: usize, w: usize) -> Result<()> {
    if h % 2 != 0 {
        return Err(Error::Dimension(format!("wavelet step needs even height, got {h}")));
    }
    if w % 2 != 0 {
        return Err(Error::Dimension(format!("wavelet step needs even width, got {w}")));
    }
    Ok(())
}

/// One separable analysis step: returns `(LL, LH, HL, HH)` at half size.
pub fn wpt_step(x: ArrayView2<'_, f64>, filters: &FilterPair) -> Result<Subbands> {
    filters.validate()?;
    let (h, w) = x.dim();
    check_even(h, w)?;
    let col_low = analyze_rows(x, &filters.low);
    let col_high = analyze_rows(x, &filters.high);
    let along_height = |m: &Array2<f64>, f: &[f64]| analyze_rows(m.t(), f).reversed_axes();
    Ok(Subbands {
        ll: along_height(&col_low, &filters.low),
        lh: along_height(&col_high, &filters.low),
        hl: along_height(&col_low, &filters.high),
        hh: along_height(&col_high, &filters.high),
    })
}

/// Inverse of [`wpt_step`] for orthonormal filters.
pub fn wpt_step_inverse(bands: &Subbands, filters: &FilterPair) -> Result<Array2<f64>> {
    filters.validate()?;
    let (hh, hw) = bands.ll.dim();
    for b in [&bands.lh, &bands.hl, &bands.hh] {
        if b.dim() != (hh, hw) {
            return Err(Error::Dimension(format!(
                "subband shapes differ: {:?} vs {:?}",
                bands.ll.dim(),
                b.dim()
            )));
        }
    }
    // Undo the height split, giving column-filtered (low, high) halves.
    let undo_height = |lo: &Array2<f64>, hi: &Array2<f64>| {
        let mut acc = Array2::zeros((hw, 2 * hh));
        synthesize_rows(lo.t(), &filters.low, &mut acc);
        synthesize_rows(hi.t(), &filters.high, &mut acc);
        acc.reversed_axes()
    };
    let col_low = undo_height(&bands.ll, &bands.hl);
    let col_high = undo_height(&bands.lh, &bands.hh);
    let mut out = Array2::zeros((2 * hh, 2 * hw));
    synthesize_rows(col_low.view(), &filters.low, &mut out);
    synthesize_rows(col_high.view(), &filters.high, &mut out);
    Ok(out)
}

/// Packet coefficients for levels `0..=L` of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct WptPyramid {
    pub levels: Vec<Array3<f64>>,
    pub source_shape: (usize, usize, usize),
    pub filter_name: String,
}

impl WptPyramid {
    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn deepest(&self) -> &Array3<f64> {
        self.levels.last().expect("pyramid always holds level 0")
    }

    /// Σ coefficient² per level.
    pub fn energy_per_level(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.iter().map(|v| v * v).sum()).collect()
    }
}

/// Expected `(H/2^k, W/2^k, 4^k·C)` for level `k`.
pub fn level_shape(source: (usize, usize, usize), k: usize) -> (usize, usize, usize) {
    let (h, w, c) = source;
    (h >> k, w >> k, c << (2 * k))
}

fn split_level(level: &Array3<f64>, filters: &FilterPair) -> Result<Array3<f64>> {
    let (h, w, c) = level.dim();
    let mut next = Array3::zeros((h / 2, w / 2, 4 * c));
    for ch in 0..c {
        let bands = wpt_step(level.index_axis(Axis(2), ch), filters)?;
        for (s, band) in bands.into_array().into_iter().enumerate() {
            next.slice_mut(s![.., .., 4 * ch + s]).assign(&band);
        }
    }
    Ok(next)
}

/// Full packet decomposition of an H×W×C array to depth `levels`.
pub fn wpt_decompose(image: &Array3<f64>, levels: usize, filters: &FilterPair) -> Result<WptPyramid> {
    filters.validate()?;
    let (h, w, c) = image.dim();
    let block = 1usize
        .checked_shl(levels as u32)
        .filter(|_| levels < usize::BITS as usize)
        .ok_or_else(|| Error::Argument(format!("wavelet depth {levels} is too large")))?;
    if h % block != 0 || w % block != 0 {
        return Err(Error::Dimension(format!(
            "image {h}x{w} is not divisible by 2^{levels} = {block}"
        )));
    }
    let mut out = vec![image.clone()];
    for _ in 0..levels {
        let next = split_level(out.last().expect("non-empty"), filters)?;
        out.push(next);
    }
    Ok(WptPyramid {
        levels: out,
        source_shape: (h, w, c),
        filter_name: filters.name.clone(),
    })
}

/// Rebuilds the source image from the deepest level only.
pub fn wpt_reconstruct(pyramid: &WptPyramid, filters: &FilterPair) -> Result<Array3<f64>> {
    if pyramid.filter_name != filters.name {
        return Err(Error::Configuration(format!(
            "pyramid was built with filter `{}`, reconstruction asked for `{}`",
            pyramid.filter_name, filters.name
        )));
    }
    let mut cur = pyramid.deepest().clone();
    for _ in 0..pyramid.depth() {
        let (h, w, c4) = cur.dim();
        let c = c4 / 4;
        let mut up = Array3::zeros((2 * h, 2 * w, c));
        for ch in 0..c {
            let band = |s: usize| cur.slice(s![.., .., 4 * ch + s]).to_owned();
            let bands = Subbands {
                ll: band(0),
                lh: band(1),
                hl: band(2),
                hh: band(3),
            };
            up.slice_mut(s![.., .., ch]).assign(&wpt_step_inverse(&bands, filters)?);
        }
        cur = up;
    }
    Ok(cur)
}

/// Differentiable packet decomposition of an NCHW tensor; returns levels
/// `0..=levels` in NCHW with the same channel order as [`wpt_decompose`].
pub fn wpt_tensor_levels<E: Element>(x: &Tensor<E>, levels: usize, filters: &FilterPair) -> Result<Vec<Tensor<E>>> {
    filters.validate()?;
    let &[_, _, h, w] = x.shape() else {
        return Err(Error::Dimension(format!("expected NCHW tensor, got {:?}", x.shape())));
    };
    let block = 1usize << levels;
    if h % block != 0 || w % block != 0 {
        return Err(Error::Dimension(format!(
            "image {h}x{w} is not divisible by 2^{levels} = {block}"
        )));
    }
    let taps = filters.len();
    let kernel_data: Vec<f64> = filters.kernels().iter().flat_map(|k| k.iter().copied()).collect();
    let kernel = Tensor::<E>::from_f64(&kernel_data, &[4, 1, taps, taps])?;
    let mut out = vec![x.clone()];
    for _ in 0..levels {
        let cur = out.last().expect("non-empty");
        let (n, c, h, w) = (cur.dim(0), cur.dim(1), cur.dim(2), cur.dim(3));
        let planes = cur
            .reshape(&[n * c, 1, h, w])?
            .circular_pad(taps - 2, taps - 2)?
            .conv2d(&kernel, 2, 0)?;
        out.push(planes.reshape(&[n, 4 * c, h / 2, w / 2])?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::image::{batch_to_tensor, tensor_to_batch};

    fn random(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct double loop: Σ x[(2i+m) mod H][(2j+n) mod W]·f_r[m]·f_c[n].
    fn oracle_step(x: ArrayView2<'_, f64>, fr: &[f64], fc: &[f64]) -> Array2<f64> {
        let (h, w) = x.dim();
        let mut out = Array2::zeros((h / 2, w / 2));
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                let mut acc = 0.0;
                for (m, a) in fr.iter().enumerate() {
                    for (n, b) in fc.iter().enumerate() {
                        acc += x[[(2 * i + m) % h, (2 * j + n) % w]] * a * b;
                    }
                }
                out[[i, j]] = acc;
            }
        }
        out
    }

    fn oracle_split(x: ArrayView2<'_, f64>, f: &FilterPair) -> [Array2<f64>; 4] {
        [
            oracle_step(x, &f.low, &f.low),
            oracle_step(x, &f.low, &f.high),
            oracle_step(x, &f.high, &f.low),
            oracle_step(x, &f.high, &f.high),
        ]
    }

    fn max_abs(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        (a - b).mapv(f64::abs).fold(0.0, |m, &v| m.max(v))
    }

    #[test]
    fn filters_are_orthonormal() {
        for f in [FilterPair::haar(), FilterPair::db2()] {
            let (norm, cross) = f.orthonormality();
            assert!((norm - 1.0).abs() < 1e-12 && cross.abs() < 1e-12, "{}", f.name);
            f.validate().unwrap();
        }
        assert!(FilterPair::by_name("sym9").is_err());
    }

    #[test]
    fn haar_constant_block() {
        let x = Array2::ones((2, 2));
        let b = wpt_step(x.view(), &FilterPair::haar()).unwrap();
        assert!((b.ll[[0, 0]] - 2.0).abs() < 1e-12);
        for band in [&b.lh, &b.hl, &b.hh] {
            assert!(band[[0, 0]].abs() < 1e-12);
        }
    }

    #[test]
    fn haar_horizontal_oscillation_lands_in_lh() {
        let x = array![[1.0, -1.0], [1.0, -1.0]];
        let b = wpt_step(x.view(), &FilterPair::haar()).unwrap();
        assert!((b.lh[[0, 0]] - 2.0).abs() < 1e-12);
        for band in [&b.ll, &b.hl, &b.hh] {
            assert!(band[[0, 0]].abs() < 1e-12);
        }
    }

    #[test]
    fn step_matches_direct_oracle() {
        for f in [FilterPair::haar(), FilterPair::db2()] {
            let x = random((4, 4, 1), 11).index_axis(Axis(2), 0).to_owned();
            let got = wpt_step(x.view(), &f).unwrap().into_array();
            let want = oracle_split(x.view(), &f);
            for (g, w) in got.iter().zip(&want) {
                assert!(max_abs(g, w) <= 1e-10);
            }
        }
    }

    #[test]
    fn odd_dimension_names_axis() {
        let err = wpt_step(Array2::zeros((3, 4)).view(), &FilterPair::haar()).unwrap_err();
        assert!(err.to_string().contains("height"), "{err}");
        let err = wpt_step(Array2::zeros((4, 5)).view(), &FilterPair::haar()).unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
    }

    #[test]
    fn two_levels_match_recursive_oracle() {
        let f = FilterPair::haar();
        let x = random((8, 8, 1), 12);
        let p = wpt_decompose(&x, 2, &f).unwrap();
        let lvl1 = oracle_split(x.index_axis(Axis(2), 0), &f);
        for (parent, band) in lvl1.iter().enumerate() {
            for (s, child) in oracle_split(band.view(), &f).iter().enumerate() {
                let got = p.levels[2].index_axis(Axis(2), 4 * parent + s).to_owned();
                assert!(max_abs(&got, child) <= 1e-10);
            }
        }
    }

    #[test]
    fn paper_sized_level_shapes() {
        let x = Array3::zeros((256, 256, 3));
        let p = wpt_decompose(&x, 2, &FilterPair::haar()).unwrap();
        let shapes: Vec<_> = p.levels.iter().map(|l| l.dim()).collect();
        assert_eq!(shapes, vec![(256, 256, 3), (128, 128, 12), (64, 64, 48)]);
    }

    #[test]
    fn depth_zero_is_identity() {
        let x = random((6, 10, 3), 3);
        let p = wpt_decompose(&x, 0, &FilterPair::haar()).unwrap();
        assert_eq!(p.levels, vec![x.clone()]);
        assert_eq!(wpt_reconstruct(&p, &FilterPair::haar()).unwrap(), x);
    }

    #[test]
    fn non_divisible_dimensions_rejected() {
        let x = Array3::zeros((12, 12, 1));
        assert!(matches!(
            wpt_decompose(&x, 3, &FilterPair::haar()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn reconstruction_examples() {
        let f = FilterPair::haar();
        let x = random((16, 16, 3), 5);
        let r = wpt_reconstruct(&wpt_decompose(&x, 1, &f).unwrap(), &f).unwrap();
        assert!((&r - &x).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v)) <= 1e-5);
        let x = random((64, 64, 3), 6);
        let r = wpt_reconstruct(&wpt_decompose(&x, 3, &f).unwrap(), &f).unwrap();
        assert!((&r - &x).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v)) <= 1e-5);
        let z = Array3::zeros((8, 8, 2));
        assert_eq!(wpt_reconstruct(&wpt_decompose(&z, 2, &f).unwrap(), &f).unwrap(), z);
    }

    #[test]
    fn filter_mismatch_is_configuration_error() {
        let p = wpt_decompose(&Array3::zeros((4, 4, 1)), 1, &FilterPair::haar()).unwrap();
        assert!(matches!(
            wpt_reconstruct(&p, &FilterPair::db2()),
            Err(Error::Configuration(_))
        ));
    }

    #[test]
    fn db2_round_trip_deep_tree() {
        let f = FilterPair::db2();
        let x = random((16, 16, 2), 8);
        let p = wpt_decompose(&x, 3, &f).unwrap();
        let r = wpt_reconstruct(&p, &f).unwrap();
        assert!((&r - &x).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v)) <= 1e-10);
        let e = p.energy_per_level();
        assert!((e[3] - e[0]).abs() <= 1e-9 * e[0]);
    }

    #[test]
    fn tensor_levels_match_array_transform() {
        for f in [FilterPair::haar(), FilterPair::db2()] {
            let a = random((8, 8, 3), 21);
            let b = random((8, 8, 3), 22);
            let t = batch_to_tensor::<f64>(&[a.clone(), b.clone()]).unwrap();
            let levels = wpt_tensor_levels(&t, 2, &f).unwrap();
            for (img_idx, img) in [a, b].iter().enumerate() {
                let p = wpt_decompose(img, 2, &f).unwrap();
                for k in 0..=2 {
                    let got = &tensor_to_batch(&levels[k]).unwrap()[img_idx];
                    let err = (got - &p.levels[k]).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
                    assert!(err <= 1e-12, "{} level {k}: {err}", f.name);
                }
            }
        }
    }
}
