//! Labelled face collections, unpaired young/old batch sampling, and
//! mismatched-attribute draws.

mod manifest;
mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use manifest::{export_dataset, load_manifest, NUM_WORKERS_ENV};
pub use synth::{synth_generate, SynthOracle, SynthSpec, MAX_SYNTH_ATTRS};

use crate::error::{Error, Result};
use crate::generator::{attributes_to_tensor, AttributeVector};
use crate::image::{batch_to_tensor, FaceImage};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AgeGroup {
    Under31,
    G31_40,
    G41_50,
    G51Plus,
}

impl AgeGroup {
    pub const ALL: [AgeGroup; 4] = [AgeGroup::Under31, AgeGroup::G31_40, AgeGroup::G41_50, AgeGroup::G51Plus];
    pub const TARGETS: [AgeGroup; 3] = [AgeGroup::G31_40, AgeGroup::G41_50, AgeGroup::G51Plus];

    /// Bins an age in years: ≤30, 31–40, 41–50, ≥51.
    pub fn from_age(age: i64) -> Result<Self> {
        match age {
            a if a < 0 => Err(Error::Validation(format!("negative age {a}"))),
            0..=30 => Ok(AgeGroup::Under31),
            31..=40 => Ok(AgeGroup::G31_40),
            41..=50 => Ok(AgeGroup::G41_50),
            _ => Ok(AgeGroup::G51Plus),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Age written into exported manifests for this group.
    pub fn representative_age(self) -> i64 {
        [25, 35, 45, 60][self.index()]
    }

    /// Short label as used on the command line.
    pub fn label(self) -> &'static str {
        ["30-", "31-40", "41-50", "51plus"][self.index()]
    }
}

impl fmt::Display for AgeGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for AgeGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "30-" | "under31" => Ok(AgeGroup::Under31),
            "31-40" | "g31_40" => Ok(AgeGroup::G31_40),
            "41-50" | "g41_50" => Ok(AgeGroup::G41_50),
            "51plus" | "51+" | "g51plus" => Ok(AgeGroup::G51Plus),
            _ => Err(Error::Argument(format!(
                "unknown age group `{s}` (expected 31-40, 41-50 or 51plus)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaceSample {
    pub image: FaceImage,
    pub age_group: AgeGroup,
    pub attributes: AttributeVector,
    pub identity: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<FaceSample>,
    pub attr_dim: usize,
    pub image_size: usize,
}

impl Dataset {
    pub fn new(samples: Vec<FaceSample>, attr_dim: usize, image_size: usize) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if s.attributes.len() != attr_dim {
                return Err(Error::Validation(format!(
                    "sample {i} has {} attributes, dataset has {attr_dim}",
                    s.attributes.len()
                )));
            }
            if s.image.dim() != (image_size, image_size, 3) {
                return Err(Error::Validation(format!(
                    "sample {i} has shape {:?}, dataset is {image_size}×{image_size}×3",
                    s.image.dim()
                )));
            }
        }
        Ok(Dataset {
            samples,
            attr_dim,
            image_size,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn group_indices(&self, group: AgeGroup) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].age_group == group)
            .collect()
    }

    pub fn group(&self, group: AgeGroup) -> impl Iterator<Item = &FaceSample> {
        self.samples.iter().filter(move |s| s.age_group == group)
    }
}

/// Young and old rows drawn for one step, as indices into the dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchIndices {
    pub young: Vec<usize>,
    pub old: Vec<usize>,
    /// Rows whose old sample shares the young sample's attributes.
    pub matched: usize,
}

impl BatchIndices {
    pub fn young_images<E: Element>(&self, data: &Dataset) -> Result<Tensor<E>> {
        images(data, &self.young)
    }

    pub fn old_images<E: Element>(&self, data: &Dataset) -> Result<Tensor<E>> {
        images(data, &self.old)
    }

    pub fn young_attributes(&self, data: &Dataset) -> Vec<AttributeVector> {
        self.young.iter().map(|&i| data.samples[i].attributes.clone()).collect()
    }

    pub fn old_attributes(&self, data: &Dataset) -> Vec<AttributeVector> {
        self.old.iter().map(|&i| data.samples[i].attributes.clone()).collect()
    }
}

fn images<E: Element>(data: &Dataset, idx: &[usize]) -> Result<Tensor<E>> {
    let imgs: Vec<FaceImage> = idx.iter().map(|&i| data.samples[i].image.clone()).collect();
    batch_to_tensor(&imgs)
}

pub fn attributes_tensor<E: Element>(attrs: &[AttributeVector], attr_dim: usize) -> Result<Tensor<E>> {
    attributes_to_tensor(attrs, attr_dim)
}

/// Precomputed group membership so per-step sampling is cheap.
#[derive(Debug, Clone)]
pub struct PairSampler {
    young: Vec<usize>,
    old: Vec<usize>,
    old_by_attr: BTreeMap<usize, Vec<usize>>,
    match_attributes: bool,
}

impl PairSampler {
    pub fn new(data: &Dataset, target: AgeGroup, match_attributes: bool) -> Result<Self> {
        let young = data.group_indices(AgeGroup::Under31);
        let old = data.group_indices(target);
        if young.is_empty() {
            return Err(Error::Data("no samples in age group 30-".into()));
        }
        if old.is_empty() {
            return Err(Error::Data(format!("no samples in target age group {target}")));
        }
        let mut old_by_attr: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &i in &old {
            old_by_attr.entry(data.samples[i].attributes.to_index()).or_default().push(i);
        }
        Ok(PairSampler {
            young,
            old,
            old_by_attr,
            match_attributes,
        })
    }

    pub fn young_count(&self) -> usize {
        self.young.len()
    }

    /// Draws `batch` young rows with replacement and one old row per young row.
    pub fn sample<R: Rng>(&self, data: &Dataset, batch: usize, rng: &mut R) -> Result<BatchIndices> {
        if batch == 0 {
            return Err(Error::Argument("batch size must be >= 1".into()));
        }
        let mut out = BatchIndices {
            young: Vec::with_capacity(batch),
            old: Vec::with_capacity(batch),
            matched: 0,
        };
        let mut fallbacks = 0;
        for _ in 0..batch {
            let y = self.young[rng.random_range(0..self.young.len())];
            let key = data.samples[y].attributes.to_index();
            let pool = match self.old_by_attr.get(&key) {
                Some(p) if self.match_attributes => p,
                _ => {
                    if self.match_attributes {
                        fallbacks += 1;
                    }
                    &self.old
                }
            };
            let o = pool[rng.random_range(0..pool.len())];
            out.matched += usize::from(data.samples[o].attributes == data.samples[y].attributes);
            out.young.push(y);
            out.old.push(o);
        }
        if fallbacks > 0 {
            log::warn!("{fallbacks} of {batch} rows had no attribute-matched old sample; drew unconditionally");
        }
        Ok(out)
    }
}

/// One-shot form of [`PairSampler::sample`].
pub fn sample_batch<R: Rng>(
    data: &Dataset,
    target: AgeGroup,
    batch: usize,
    match_attributes: bool,
    rng: &mut R,
) -> Result<BatchIndices> {
    PairSampler::new(data, target, match_attributes)?.sample(data, batch, rng)
}

/// Uniform draw among the 2^N − 1 binary vectors different from `alpha`.
pub fn sample_mismatched<R: Rng>(alpha: &AttributeVector, rng: &mut R) -> Result<AttributeVector> {
    let n = alpha.len();
    if n == 0 {
        return Err(Error::Argument("no mismatched attribute vector exists for N = 0".into()));
    }
    if n >= usize::BITS as usize {
        return Err(Error::Argument(format!("attribute dimension {n} too large")));
    }
    let own = alpha.to_index();
    let mut pick = rng.random_range(0..(1usize << n) - 1);
    if pick >= own {
        pick += 1;
    }
    Ok(AttributeVector::from_index(pick, n))
}
