//! Procedural faces whose identity, attributes and age are all recoverable by
//! closed-form oracles.
//!
//! * identity: a smooth grayscale pattern (a few low-frequency cosines);
//! * attribute 0: hue bias, red up and blue down (or the reverse);
//! * attributes 1..: a corner block per bit with ±0.8 polarity;
//! * age: dark one-pixel horizontal lines on alternate rows of fixed texture
//!   regions, each present with the group's density.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AgeGroup, Dataset, FaceSample};
use crate::error::{Error, Result};
use crate::generator::AttributeVector;

/// Hue plus one corner per remaining bit.
pub const MAX_SYNTH_ATTRS: usize = 5;

const HUE: f64 = 0.15;
const CORNER: f64 = 0.8;
const LINE: f64 = -0.5;
const WAVE_AMPLITUDE: f64 = 0.2;
const WAVES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_identities: usize,
    pub samples_per_identity_per_group: usize,
    pub image_size: usize,
    pub attr_dim: usize,
    pub texture_density_per_group: [f64; 4],
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 7,
            n_identities: 50,
            samples_per_identity_per_group: 2,
            image_size: 64,
            attr_dim: 2,
            texture_density_per_group: [0.1, 0.3, 0.55, 0.85],
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let d = &self.texture_density_per_group;
        if d.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Validation(format!(
                "texture densities must be strictly increasing with age group, got {d:?}"
            )));
        }
        if d.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation(format!("texture densities must lie in [0, 1], got {d:?}")));
        }
        if self.image_size < 16 || !self.image_size.is_power_of_two() {
            return Err(Error::Validation(format!(
                "synthetic image_size {} must be a power of two >= 16",
                self.image_size
            )));
        }
        if self.attr_dim > MAX_SYNTH_ATTRS {
            return Err(Error::Validation(format!(
                "synthetic data supports at most {MAX_SYNTH_ATTRS} attributes, got {}",
                self.attr_dim
            )));
        }
        Ok(())
    }
}

/// Geometry needed to decode a synthetic image.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOracle {
    pub image_size: usize,
    pub attr_dim: usize,
    /// True where age texture may be drawn.
    pub texture_mask: Array2<bool>,
}

type Rect = (usize, usize, usize, usize);

impl SynthOracle {
    pub fn new(image_size: usize, attr_dim: usize) -> Self {
        let mut texture_mask = Array2::from_elem((image_size, image_size), false);
        for (r0, r1, c0, c1) in texture_regions(image_size) {
            texture_mask.slice_mut(ndarray::s![r0..r1, c0..c1]).fill(true);
        }
        SynthOracle {
            image_size,
            attr_dim,
            texture_mask,
        }
    }

    /// Side of each attribute corner block.
    pub fn corner_size(&self) -> usize {
        self.image_size / 8
    }

    /// (row, col) origin of the block carrying attribute `bit` (bits ≥ 1).
    pub fn corner_origin(&self, bit: usize) -> (usize, usize) {
        let far = self.image_size - self.corner_size();
        [(0, 0), (0, far), (far, 0), (far, far)][bit - 1]
    }

    /// True inside any attribute corner block.
    pub fn in_corner(&self, r: usize, c: usize) -> bool {
        let k = self.corner_size();
        (1..self.attr_dim).any(|b| {
            let (r0, c0) = self.corner_origin(b);
            (r0..r0 + k).contains(&r) && (c0..c0 + k).contains(&c)
        })
    }
}

/// Forehead band and two cheek patches, as (row0, row1, col0, col1).
fn texture_regions(s: usize) -> [Rect; 3] {
    [
        (s / 4, s / 4 + s / 8, s / 4, 3 * s / 4),
        (9 * s / 16, 3 * s / 4, s / 8, 5 * s / 16),
        (9 * s / 16, 3 * s / 4, 11 * s / 16, 7 * s / 8),
    ]
}

fn stream(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (a << 20) ^ b);
    rng
}

struct Identity {
    base: Array2<f64>,
    tint: [f64; 3],
    attributes: AttributeVector,
}

fn make_identity(spec: &SynthSpec, id: u64) -> Identity {
    let s = spec.image_size;
    let mut rng = stream(spec.seed, 1, id, 0);
    let waves: Vec<(f64, f64, f64)> = (0..WAVES)
        .map(|_| {
            let (fx, fy) = loop {
                let f = (rng.random_range(0..4) as f64, rng.random_range(-3..4) as f64);
                if f != (0.0, 0.0) {
                    break f;
                }
            };
            (fx, fy, rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let base = Array2::from_shape_fn((s, s), |(i, j)| {
        let (y, x) = (i as f64 / s as f64, j as f64 / s as f64);
        waves
            .iter()
            .map(|&(fx, fy, ph)| WAVE_AMPLITUDE * (std::f64::consts::TAU * (fx * x + fy * y) + ph).cos())
            .sum()
    });
    let tone = rng.random_range(-0.1..0.1);
    let bits: Vec<bool> = (0..spec.attr_dim).map(|_| rng.random_bool(0.5)).collect();
    Identity {
        base,
        tint: [tone; 3],
        attributes: AttributeVector::from_bits(&bits),
    }
}

fn render(spec: &SynthSpec, oracle: &SynthOracle, ident: &Identity, group: AgeGroup, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let s = spec.image_size;
    let mut img = Array3::from_shape_fn((s, s, 3), |(i, j, c)| ident.base[[i, j]] + ident.tint[c]);
    if spec.attr_dim >= 1 {
        let sign = if ident.attributes.bit(0) { 1.0 } else { -1.0 };
        for v in img.slice_mut(ndarray::s![.., .., 0]).iter_mut() {
            *v += HUE * sign;
        }
        for v in img.slice_mut(ndarray::s![.., .., 2]).iter_mut() {
            *v -= HUE * sign;
        }
    }
    let k = oracle.corner_size();
    for b in 1..spec.attr_dim {
        let (r0, c0) = oracle.corner_origin(b);
        let v = if ident.attributes.bit(b) { CORNER } else { -CORNER };
        img.slice_mut(ndarray::s![r0..r0 + k, c0..c0 + k, ..]).fill(v);
    }
    let density = spec.texture_density_per_group[group.index()];
    for (r0, r1, c0, c1) in texture_regions(s) {
        for r in (r0..r1).step_by(2) {
            if rng.random_bool(density) {
                img.slice_mut(ndarray::s![r, c0..c1, ..]).mapv_inplace(|v| v + LINE);
            }
        }
    }
    img.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    img
}

/// Deterministic dataset: every identity appears in every age group.
pub fn synth_generate(spec: &SynthSpec) -> Result<(Dataset, SynthOracle)> {
    spec.validate()?;
    let oracle = SynthOracle::new(spec.image_size, spec.attr_dim);
    let mut samples =
        Vec::with_capacity(spec.n_identities * spec.samples_per_identity_per_group * AgeGroup::ALL.len());
    for id in 0..spec.n_identities as u64 {
        let ident = make_identity(spec, id);
        for group in AgeGroup::ALL {
            let mut rng = stream(spec.seed, 2, id, group.index() as u64);
            for _ in 0..spec.samples_per_identity_per_group {
                samples.push(FaceSample {
                    image: render(spec, &oracle, &ident, group, &mut rng),
                    age_group: group,
                    attributes: ident.attributes.clone(),
                    identity: id,
                });
            }
        }
    }
    Ok((Dataset::new(samples, spec.attr_dim, spec.image_size)?, oracle))
}
