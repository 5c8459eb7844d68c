//! The resolved run configuration written beside every run's outputs.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{AgeGroup, SynthSpec};
use crate::discriminator::DiscriminatorConfig;
use crate::embedder::{EmbedderConfig, EmbedderSource};
use crate::error::{Error, Result};
use crate::evaluation::VERIFY_THRESHOLD;
use crate::generator::{GeneratorConfig, Profile};
use crate::training::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Architecture presets of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    /// No attribute embedding, single level-0 critic pathway, no attention.
    Baseline,
    /// Attributes bypassed in both networks.
    NoFae,
    /// Single level-0 critic pathway.
    NoWmd,
    /// No mask head; the image map is the output.
    NoAm,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::Baseline, Variant::NoFae, Variant::NoWmd, Variant::NoAm];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Baseline => "baseline",
            Variant::NoFae => "no-fae",
            Variant::NoWmd => "no-wmd",
            Variant::NoAm => "no-am",
        }
    }

    pub fn apply(self, g: &mut GeneratorConfig, d: &mut DiscriminatorConfig) {
        let (fae, wmd, am) = match self {
            Variant::Full => (true, true, true),
            Variant::Baseline => (false, false, false),
            Variant::NoFae => (false, true, true),
            Variant::NoWmd => (true, false, true),
            Variant::NoAm => (true, true, false),
        };
        g.attribute_embedding = fae;
        d.attribute_conditioning = fae;
        if !wmd {
            d.pathways = 1;
        }
        g.attention = am;
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown variant `{s}` (full, baseline, no-fae, no-wmd, no-am)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub threshold: f64,
    /// Young test faces per evaluation; 0 means all of them.
    pub max_samples: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            threshold: VERIFY_THRESHOLD,
            max_samples: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub schema_version: u32,
    pub variant: Variant,
    pub synth: SynthSpec,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: TrainConfig,
    pub embedder: EmbedderSource,
    #[serde(default)]
    pub embedder_config: EmbedderConfig,
    #[serde(default)]
    pub eval: EvalOptions,
    /// Single-threaded, bit-reproducible execution.
    #[serde(default)]
    pub deterministic: bool,
}

impl RunConfig {
    pub fn for_profile(profile: Profile, attr_dim: usize) -> Self {
        let (image_size, batch_size) = match profile {
            Profile::Paper256 => (256, 16),
            Profile::Desk64 => (64, DESK_BATCH),
        };
        RunConfig {
            schema_version: SCHEMA_VERSION,
            variant: Variant::Full,
            synth: SynthSpec {
                image_size,
                attr_dim,
                ..SynthSpec::default()
            },
            generator: GeneratorConfig::for_profile(profile, attr_dim),
            discriminator: DiscriminatorConfig::for_profile(profile, attr_dim),
            train: TrainConfig {
                profile,
                batch_size,
                ..TrainConfig::default()
            },
            embedder: EmbedderSource::Fixed(0),
            embedder_config: EmbedderConfig::default(),
            eval: EvalOptions::default(),
            deterministic: false,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        variant.apply(&mut self.generator, &mut self.discriminator);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.synth.seed = seed;
        self
    }

    pub fn with_target(mut self, target: AgeGroup) -> Self {
        self.train.target_group = target;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Validation(format!(
                "config schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.synth.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.train.validate()?;
        let (g, d) = (&self.generator, &self.discriminator);
        if g.image_size != d.image_size || g.attr_dim != d.attr_dim {
            return Err(Error::Validation(
                "generator and discriminator disagree on image size or attribute count".into(),
            ));
        }
        if !(-1.0..=1.0).contains(&self.eval.threshold) {
            return Err(Error::Validation(format!("threshold {} outside [-1, 1]", self.eval.threshold)));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Batch size of the desk profile.
pub const DESK_BATCH: usize = 4;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_json() {
        for v in Variant::ALL {
            let cfg = RunConfig::for_profile(Profile::Desk64, 2).with_variant(v).with_seed(3);
            let text = serde_json::to_string(&cfg).unwrap();
            let back: RunConfig = serde_json::from_str(&text).unwrap();
            assert_eq!(back, cfg);
            back.validate().unwrap();
        }
    }

    #[test]
    fn variants_toggle_the_right_parts() {
        let get = |v: Variant| RunConfig::for_profile(Profile::Desk64, 2).with_variant(v);
        let am = get(Variant::NoAm);
        assert!(!am.generator.attention && am.generator.attribute_embedding && am.discriminator.pathways == 3);
        let fae = get(Variant::NoFae);
        assert!(!fae.generator.attribute_embedding && !fae.discriminator.attribute_conditioning);
        assert_eq!(get(Variant::NoWmd).discriminator.pathways, 1);
        let base = get(Variant::Baseline);
        assert!(!base.generator.attention && !base.generator.attribute_embedding && base.discriminator.pathways == 1);
        assert_eq!("no-am".parse::<Variant>().unwrap(), Variant::NoAm);
        assert!("w/o-am".parse::<Variant>().is_err());
    }

    #[test]
    fn wrong_schema_version_rejected() {
        let mut cfg = RunConfig::for_profile(Profile::Desk64, 2);
        cfg.schema_version = 99;
        assert!(matches!(cfg.validate(), Err(Error::Validation(_))));
    }
}
