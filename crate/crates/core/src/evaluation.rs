//! Aging accuracy, identity preservation and attribute consistency protocols,
//! the closed-form oracles for synthetic data, and PNG emitters.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{AgeGroup, Dataset, FaceSample, SynthOracle};
use crate::error::{Error, Result};
use crate::generator::{AttributeVector, Generator};
use crate::image::{to_rgb8, FaceImage};
use crate::tensor::Element;
use crate::wpt::{wpt_decompose, FilterPair};

/// Verification threshold for the correlation scorer.
pub const VERIFY_THRESHOLD: f64 = 0.5;
const HUE_MIN: f64 = 0.1;
const CORNER_MIN: f64 = 0.3;

pub trait AgeEstimator {
    fn estimate(&self, image: &FaceImage) -> Result<f64>;
}

pub trait AttributeClassifier {
    fn classify(&self, image: &FaceImage) -> Result<AttributeVector>;
}

pub trait IdentityScorer {
    fn score(&self, a: &FaceImage, b: &FaceImage) -> Result<f64>;
}

impl<F: Fn(&FaceImage) -> Result<f64>> AgeEstimator for F {
    fn estimate(&self, image: &FaceImage) -> Result<f64> {
        self(image)
    }
}

impl<F: Fn(&FaceImage, &FaceImage) -> Result<f64>> IdentityScorer for F {
    fn score(&self, a: &FaceImage, b: &FaceImage) -> Result<f64> {
        self(a, b)
    }
}

/// Mean squared detail energy of the two finest packet levels; the all-LL
/// path is excluded, so constants and brightness shifts score nothing.
pub fn oracle_age_score(image: &FaceImage) -> Result<f64> {
    let pyr = wpt_decompose(image, 2, &FilterPair::haar())?;
    let mean_sq = |level: &Array3<f64>, skip: &dyn Fn(usize) -> bool| {
        let (mut sum, mut n) = (0.0, 0usize);
        for (ch, plane) in level.axis_iter(Axis(2)).enumerate() {
            if !skip(ch) {
                sum += plane.iter().map(|v| v * v).sum::<f64>();
                n += plane.len();
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    };
    let l1 = mean_sq(&pyr.levels[1], &|ch| ch % 4 == 0);
    let l2 = mean_sq(&pyr.levels[2], &|ch| ch % 16 == 0);
    Ok(0.5 * (l1 + l2))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeReading {
    pub attributes: AttributeVector,
    /// Some marker was too weak to read; its bit defaulted to 0.
    pub low_confidence: bool,
}

/// Decodes the hue-bias sign and corner-block polarities.
pub fn oracle_attribute_classify(oracle: &SynthOracle, image: &FaceImage) -> Result<AttributeReading> {
    let s = oracle.image_size;
    if image.dim() != (s, s, 3) {
        return Err(Error::Dimension(format!(
            "attribute oracle expects {s}×{s}×3, got {:?}",
            image.dim()
        )));
    }
    let mut bits = vec![false; oracle.attr_dim];
    let mut low = false;
    if oracle.attr_dim >= 1 {
        let (mut sum, mut n) = (0.0, 0usize);
        for i in 0..s {
            for j in 0..s {
                if !oracle.in_corner(i, j) {
                    sum += image[[i, j, 0]] - image[[i, j, 2]];
                    n += 1;
                }
            }
        }
        let hue = sum / n as f64;
        if hue.abs() < HUE_MIN {
            low = true;
        } else {
            bits[0] = hue > 0.0;
        }
    }
    let k = oracle.corner_size();
    for (b, bit) in bits.iter_mut().enumerate().skip(1) {
        let (r0, c0) = oracle.corner_origin(b);
        let block = image.slice(ndarray::s![r0..r0 + k, c0..c0 + k, ..]);
        let m = block.mean().unwrap_or(0.0);
        if m.abs() < CORNER_MIN {
            low = true;
        } else {
            *bit = m > 0.0;
        }
    }
    Ok(AttributeReading {
        attributes: AttributeVector::from_bits(&bits),
        low_confidence: low,
    })
}

fn luminance_ll2(image: &FaceImage) -> Result<Array2<f64>> {
    let lum = image.mean_axis(Axis(2)).ok_or_else(|| Error::Dimension("image has no channels".into()))?;
    let (h, w) = lum.dim();
    let pyr = wpt_decompose(&lum.into_shape_with_order((h, w, 1)).expect("same size"), 2, &FilterPair::haar())?;
    Ok(pyr.levels[2].index_axis(Axis(2), 0).to_owned())
}

/// Pearson correlation of the level-2 approximation of the luminance.
pub fn oracle_identity_score(a: &FaceImage, b: &FaceImage) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!("cannot compare {:?} with {:?}", a.dim(), b.dim())));
    }
    let (x, y) = (luminance_ll2(a)?, luminance_ll2(b)?);
    let (mx, my) = (x.mean().unwrap_or(0.0), y.mean().unwrap_or(0.0));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (u, v) in x.iter().zip(y.iter()) {
        let (du, dv) = (u - mx, v - my);
        sxy += du * dv;
        sxx += du * du;
        syy += dv * dv;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub struct OracleAge;

impl AgeEstimator for OracleAge {
    fn estimate(&self, image: &FaceImage) -> Result<f64> {
        oracle_age_score(image)
    }
}

impl AttributeClassifier for SynthOracle {
    fn classify(&self, image: &FaceImage) -> Result<AttributeVector> {
        Ok(oracle_attribute_classify(self, image)?.attributes)
    }
}

pub struct OracleIdentity;

impl IdentityScorer for OracleIdentity {
    fn score(&self, a: &FaceImage, b: &FaceImage) -> Result<f64> {
        oracle_identity_score(a, b)
    }
}

/// Mean absolute change outside the texture regions.
pub fn region_leakage(oracle: &SynthOracle, input: &FaceImage, output: &FaceImage) -> Result<f64> {
    if input.dim() != output.dim() || input.dim().0 != oracle.image_size {
        return Err(Error::Dimension("leakage needs equally sized images matching the oracle".into()));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for ((i, j, c), v) in input.indexed_iter() {
        if !oracle.texture_mask[[i, j]] {
            sum += (output[[i, j, c]] - v).abs();
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Population mean and standard deviation; zeros for an empty slice.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeStats {
    pub output_mean: f64,
    pub output_std: f64,
    pub reference_mean: f64,
    pub reference_std: f64,
    /// output_mean − reference_mean.
    pub difference: f64,
    /// Score of the untouched inputs, when supplied.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub input_mean: Option<f64>,
    pub n_outputs: usize,
    pub n_references: usize,
}

impl AgeStats {
    /// (output − input) / (reference − input): the share of the input-to-target
    /// gap closed by the outputs.
    pub fn gain_fraction(&self) -> Option<f64> {
        let input = self.input_mean?;
        let gap = self.reference_mean - input;
        (gap != 0.0).then(|| (self.output_mean - input) / gap)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeStats {
    /// Percentage per attribute index.
    pub preservation: Vec<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationStats {
    pub mean: f64,
    pub std: f64,
    /// Percentage of scores strictly above the threshold.
    pub rate: f64,
    pub threshold: f64,
    pub n: usize,
}

pub fn eval_age<A: AgeEstimator + ?Sized>(
    outputs: &[FaceImage],
    references: &[FaceImage],
    inputs: Option<&[FaceImage]>,
    estimator: &A,
) -> Result<AgeStats> {
    let score = |set: &[FaceImage]| set.iter().map(|i| estimator.estimate(i)).collect::<Result<Vec<_>>>();
    let (om, os) = mean_std(&score(outputs)?);
    let (rm, rs) = mean_std(&score(references)?);
    let input_mean = inputs.map(|i| score(i).map(|v| mean_std(&v).0)).transpose()?;
    Ok(AgeStats {
        output_mean: om,
        output_std: os,
        reference_mean: rm,
        reference_std: rs,
        difference: om - rm,
        input_mean,
        n_outputs: outputs.len(),
        n_references: references.len(),
    })
}

pub fn eval_attributes<C: AttributeClassifier + ?Sized>(
    inputs: &[FaceImage],
    outputs: &[FaceImage],
    classifier: &C,
) -> Result<AttributeStats> {
    if inputs.len() != outputs.len() {
        return Err(Error::Argument(format!("{} inputs but {} outputs", inputs.len(), outputs.len())));
    }
    let mut same: Vec<usize> = Vec::new();
    for (a, b) in inputs.iter().zip(outputs) {
        let (ca, cb) = (classifier.classify(a)?, classifier.classify(b)?);
        if ca.len() != cb.len() {
            return Err(Error::Argument("classifier returned vectors of different lengths".into()));
        }
        if same.is_empty() {
            same = vec![0; ca.len()];
        }
        for (k, s) in same.iter_mut().enumerate() {
            *s += usize::from(ca.bit(k) == cb.bit(k));
        }
    }
    let n = inputs.len();
    Ok(AttributeStats {
        preservation: same.iter().map(|&c| 100.0 * c as f64 / n as f64).collect(),
        n,
    })
}

pub fn eval_identity<S: IdentityScorer + ?Sized>(
    inputs: &[FaceImage],
    outputs: &[FaceImage],
    scorer: &S,
    threshold: f64,
) -> Result<VerificationStats> {
    if inputs.len() != outputs.len() {
        return Err(Error::Argument(format!("{} inputs but {} outputs", inputs.len(), outputs.len())));
    }
    let scores = inputs
        .iter()
        .zip(outputs)
        .map(|(a, b)| scorer.score(a, b))
        .collect::<Result<Vec<_>>>()?;
    Ok(verification_from_scores(&scores, threshold))
}

pub fn verification_from_scores(scores: &[f64], threshold: f64) -> VerificationStats {
    let (mean, std) = mean_std(scores);
    let above = scores.iter().filter(|&&s| s > threshold).count();
    VerificationStats {
        mean,
        std,
        rate: if scores.is_empty() { 0.0 } else { 100.0 * above as f64 / scores.len() as f64 },
        threshold,
        n: scores.len(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub age: Option<AgeStats>,
    pub attributes: Option<AttributeStats>,
    pub verification: Option<VerificationStats>,
    /// Mean |I_o − I_y| outside the oracle texture regions.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub leakage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub groups: BTreeMap<AgeGroup, GroupReport>,
}

impl Default for EvalReport {
    fn default() -> Self {
        EvalReport {
            groups: AgeGroup::TARGETS.iter().map(|&g| (g, GroupReport::default())).collect(),
        }
    }
}

impl EvalReport {
    pub fn group_mut(&mut self, g: AgeGroup) -> Result<&mut GroupReport> {
        self.groups
            .get_mut(&g)
            .ok_or_else(|| Error::Argument(format!("{g} is not a target age group")))
    }

    /// Plain-text tables: age estimation, verification, attribute preservation.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let na = "-".to_string();
        let _ = writeln!(s, "Age estimation (oracle score)");
        let _ = writeln!(s, "{:<8} {:>22} {:>22} {:>12}", "group", "generated", "generic", "difference");
        for (g, r) in &self.groups {
            match &r.age {
                Some(a) => {
                    let _ = writeln!(
                        s,
                        "{:<8} {:>22} {:>22} {:>12.5}",
                        g.label(),
                        format!("{:.5} ± {:.5}", a.output_mean, a.output_std),
                        format!("{:.5} ± {:.5}", a.reference_mean, a.reference_std),
                        a.difference
                    );
                }
                None => {
                    let _ = writeln!(s, "{:<8} {:>22} {:>22} {:>12}", g.label(), na, na, na);
                }
            }
        }
        let _ = writeln!(s, "\nFace verification (correlation scorer)");
        let _ = writeln!(s, "{:<8} {:>22} {:>14}", "group", "confidence", "rate (%)");
        for (g, r) in &self.groups {
            match &r.verification {
                Some(v) => {
                    let _ = writeln!(
                        s,
                        "{:<8} {:>22} {:>14.2}",
                        g.label(),
                        format!("{:.4} ± {:.4}", v.mean, v.std),
                        v.rate
                    );
                }
                None => {
                    let _ = writeln!(s, "{:<8} {:>22} {:>14}", g.label(), na, na);
                }
            }
        }
        let _ = writeln!(s, "\nAttribute preservation (%)");
        for (g, r) in &self.groups {
            let cells = match &r.attributes {
                Some(a) => a
                    .preservation
                    .iter()
                    .enumerate()
                    .map(|(k, p)| format!("attr_{k} {p:.2}"))
                    .collect::<Vec<_>>()
                    .join("  "),
                None => na.clone(),
            };
            let _ = writeln!(s, "{:<8} {cells}", g.label());
        }
        s
    }
}

/// All three protocols plus region leakage for one target group on synthetic
/// data: every young face (or the first `max_samples`) is aged with its own
/// attributes and compared with the real faces of `target`.
pub fn evaluate_synthetic<E: Element>(
    generator: &Generator<E>,
    data: &Dataset,
    oracle: &SynthOracle,
    target: AgeGroup,
    threshold: f64,
    max_samples: usize,
) -> Result<GroupReport> {
    let young: Vec<&FaceSample> = data.group(AgeGroup::Under31).collect();
    let n = if max_samples == 0 { young.len() } else { young.len().min(max_samples) };
    if n == 0 {
        return Err(Error::Data("no young faces to evaluate".into()));
    }
    let inputs: Vec<FaceImage> = young[..n].iter().map(|s| s.image.clone()).collect();
    let alphas: Vec<AttributeVector> = young[..n].iter().map(|s| s.attributes.clone()).collect();
    let outputs: Vec<FaceImage> = generator
        .generate_batch(&inputs, &alphas, EVAL_CHUNK)?
        .into_iter()
        .map(|o| o.output)
        .collect();
    let references: Vec<FaceImage> = data.group(target).map(|s| s.image.clone()).collect();
    let leak = inputs
        .iter()
        .zip(&outputs)
        .map(|(a, b)| region_leakage(oracle, a, b))
        .collect::<Result<Vec<_>>>()?;
    Ok(GroupReport {
        age: Some(eval_age(&outputs, &references, Some(&inputs), &OracleAge)?),
        attributes: Some(eval_attributes(&inputs, &outputs, oracle)?),
        verification: Some(eval_identity(&inputs, &outputs, &OracleIdentity, threshold)?),
        leakage: Some(mean_std(&leak).0),
    })
}

const EVAL_CHUNK: usize = 16;

fn paste(canvas: &mut image::RgbImage, tile: &image::RgbImage, x: u32, y: u32) {
    for (i, j, p) in tile.enumerate_pixels() {
        canvas.put_pixel(x + i, y + j, *p);
    }
}

/// Margin in pixels around and between tiles.
pub const GRID_MARGIN: u32 = 2;

fn tile_grid(rows: &[Vec<image::RgbImage>]) -> Result<image::RgbImage> {
    let first = rows
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| Error::Argument("nothing to render".into()))?;
    let (tw, th) = first.dimensions();
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols || r.iter().any(|t| t.dimensions() != (tw, th))) {
        return Err(Error::Dimension("grid rows must hold equally many equally sized tiles".into()));
    }
    let m = GRID_MARGIN;
    let width = cols as u32 * (tw + m) + m;
    let height = rows.len() as u32 * (th + m) + m;
    let mut canvas = image::RgbImage::from_pixel(width, height, image::Rgb([255, 255, 255]));
    for (r, row) in rows.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            paste(&mut canvas, tile, m + c as u32 * (tw + m), m + r as u32 * (th + m));
        }
    }
    Ok(canvas)
}

fn save(canvas: &image::RgbImage, path: &Path) -> Result<()> {
    canvas.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// One row per subject: the input, then its outputs, left to right.
pub fn render_grid(rows: &[(FaceImage, Vec<FaceImage>)]) -> Result<image::RgbImage> {
    let tiles: Vec<Vec<_>> = rows
        .iter()
        .map(|(input, outs)| std::iter::once(input).chain(outs).map(to_rgb8).collect())
        .collect();
    tile_grid(&tiles)
}

pub fn emit_grid(rows: &[(FaceImage, Vec<FaceImage>)], path: &Path) -> Result<()> {
    save(&render_grid(rows)?, path)
}

/// Mask in [0, 1] rendered as gray level `255·M_A`.
pub fn mask_to_rgb8(mask: &Array3<f64>) -> image::RgbImage {
    let (h, w, _) = mask.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = (mask[[y as usize, x as usize, 0]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([v, v, v])
    })
}

/// Rows of (input, mask, output) triplets.
pub fn render_attention(inputs: &[FaceImage], masks: &[Array3<f64>], outputs: &[FaceImage]) -> Result<image::RgbImage> {
    if inputs.len() != masks.len() || inputs.len() != outputs.len() {
        return Err(Error::Argument("inputs, masks and outputs must have equal counts".into()));
    }
    let tiles: Vec<Vec<_>> = inputs
        .iter()
        .zip(masks)
        .zip(outputs)
        .map(|((i, m), o)| vec![to_rgb8(i), mask_to_rgb8(m), to_rgb8(o)])
        .collect();
    tile_grid(&tiles)
}

pub fn emit_attention(inputs: &[FaceImage], masks: &[Array3<f64>], outputs: &[FaceImage], path: &Path) -> Result<()> {
    save(&render_attention(inputs, masks, outputs)?, path)
}
