//! Alternating critic / generator optimisation with checkpointing and
//! deterministic resume.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, StoredTensor};
use crate::data::{sample_mismatched, AgeGroup, BatchIndices, Dataset, PairSampler};
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::embedder::{EmbedderConfig, FixedEmbedder};
use crate::error::{Error, Result};
use crate::generator::{attributes_to_tensor, AttributeVector, Generator, GeneratorConfig, Profile};
use crate::losses::{
    gradient_penalty_at, lambda_att_schedule, loss_d_total, loss_g_total, loss_id, loss_pix, wasserstein_gap,
    Critic, LossWeights,
};
use crate::tensor::{no_grad, Adam, AdamConfig, AdamSlot, Element, Gradients, ParamStore, Tensor};
use crate::wpt::SUBBAND_ORDER;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: u64,
    /// Overrides `epochs` when set: total generator iterations.
    #[serde(default)]
    pub iterations: Option<u64>,
    pub pixel_loss_period: u64,
    pub identity_loss_period: u64,
    pub weights: LossWeights,
    pub d_steps_per_g: usize,
    pub seed: u64,
    pub target_group: AgeGroup,
    pub profile: Profile,
    /// Draw old faces sharing the young face's attributes when possible.
    #[serde(default = "default_true")]
    pub match_attributes: bool,
    /// Share of the run over which λ_att ramps up to its maximum.
    #[serde(default = "default_ramp")]
    pub ramp_fraction: f64,
    /// Write `ckpt/step-<n>.ckpt` every this many iterations (0 = final only).
    #[serde(default)]
    pub checkpoint_every: u64,
}

fn default_true() -> bool {
    true
}

fn default_ramp() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 16,
            epochs: 30,
            iterations: None,
            pixel_loss_period: 5,
            identity_loss_period: 1,
            weights: LossWeights::default(),
            d_steps_per_g: 1,
            seed: 0,
            target_group: AgeGroup::G51Plus,
            profile: Profile::Desk64,
            match_attributes: true,
            ramp_fraction: 1.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Configuration(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.pixel_loss_period == 0 || self.identity_loss_period == 0 {
            return bad("loss periods must be >= 1".into());
        }
        if self.batch_size == 0 || self.d_steps_per_g == 0 {
            return bad("batch_size and d_steps_per_g must be >= 1".into());
        }
        if !(self.ramp_fraction > 0.0 && self.ramp_fraction <= 1.0) {
            return bad(format!("ramp_fraction must lie in (0, 1], got {}", self.ramp_fraction));
        }
        if self.target_group == AgeGroup::Under31 {
            return bad("target group must be older than 30-".into());
        }
        self.weights.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    /// Generator iterations for a dataset with `young` samples in 30-.
    pub fn total_iterations(&self, young: usize) -> u64 {
        self.iterations
            .unwrap_or_else(|| self.epochs * (young as u64).div_ceil(self.batch_size as u64))
    }

    /// Horizon of the λ_att ramp so that the last iteration sees the maximum.
    pub fn ramp_horizon(&self, total: u64) -> u64 {
        let span = total.saturating_sub(1) as f64 * self.ramp_fraction;
        (span.ceil() as u64).max(1)
    }
}

/// Loss components of one generator iteration, as written to the CSV log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    #[serde(rename = "L_adv_att")]
    pub adv_att: f64,
    #[serde(rename = "L_adv_auth")]
    pub adv_auth: f64,
    pub gp: f64,
    #[serde(rename = "L_adv_G")]
    pub adv_g: f64,
    #[serde(rename = "L_id")]
    pub id: f64,
    /// Pixel loss entering the objective; 0 on iterations without it.
    #[serde(rename = "L_pix")]
    pub pix: f64,
    pub lambda_att: f64,
}

impl LossRecord {
    pub fn check_finite(&self) -> Result<()> {
        let vals = [self.adv_att, self.adv_auth, self.gp, self.adv_g, self.id, self.pix, self.lambda_att];
        if vals.iter().all(|v| v.is_finite()) {
            return Ok(());
        }
        Err(Error::NonFinite {
            step: self.step,
            detail: format!(
                "L_adv_att={} L_adv_auth={} gp={} L_adv_G={} L_id={} L_pix={} lambda_att={}",
                self.adv_att, self.adv_auth, self.gp, self.adv_g, self.id, self.pix, self.lambda_att
            ),
        })
    }
}

/// Critic-step components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DRecord {
    pub adv_att: f64,
    pub adv_auth: f64,
    pub gp: f64,
    pub total: f64,
}

/// Generator-step components; `pix` is 0 when the pixel term is inactive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GRecord {
    pub adv_g: f64,
    pub id: f64,
    pub pix: f64,
    pub total: f64,
}

/// Tensors of one critic update.
pub struct DBatch<E: Element> {
    pub young: Tensor<E>,
    pub young_attrs: Tensor<E>,
    pub old: Tensor<E>,
    pub old_attrs: Tensor<E>,
    pub mismatched: Tensor<E>,
    /// Gradient-penalty interpolation coefficients, one per row.
    pub eps: Vec<f64>,
}

/// Critic objective terms (att, auth, gp) for a fixed batch of generated faces.
pub fn d_objective<E: Element>(
    critic: &Discriminator<E>,
    batch: &DBatch<E>,
    fake: &Tensor<E>,
    weights: &LossWeights,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let real = critic.score(&batch.old, &batch.old_attrs)?;
    let att = if critic.config.attribute_conditioning {
        wasserstein_gap(&real, &critic.score(&batch.old, &batch.mismatched)?)?
    } else {
        Tensor::scalar(E::zero())
    };
    let auth = wasserstein_gap(&real, &critic.score(fake, &batch.young_attrs)?)?;
    let gp = gradient_penalty_at(critic, &batch.old, fake, &batch.old_attrs, weights.lambda_gp, &batch.eps)?;
    Ok((att, auth, gp))
}

/// Generator objective terms (adv, id, pix) given the generator output `out`.
pub fn g_objective<E: Element>(
    out: &Tensor<E>,
    critic: &Discriminator<E>,
    embedder: &FixedEmbedder<E>,
    young: &Tensor<E>,
    attrs: &Tensor<E>,
    with_id: bool,
    with_pix: bool,
) -> Result<(Tensor<E>, Option<Tensor<E>>, Option<Tensor<E>>)> {
    let adv = crate::losses::loss_adv_g(critic, out, attrs)?;
    let id = with_id.then(|| loss_id(embedder, young, out)).transpose()?;
    let pix = with_pix.then(|| loss_pix(young, out)).transpose()?;
    Ok((adv, id, pix))
}

fn item<E: Element>(t: &Tensor<E>) -> Result<f64> {
    t.item_f64()
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainState<E: Element> {
    pub generator: Generator<E>,
    pub discriminator: Discriminator<E>,
    pub embedder: FixedEmbedder<E>,
    pub opt_g: Adam<E>,
    pub opt_d: Adam<E>,
    pub rng: ChaCha8Rng,
    /// Completed generator iterations.
    pub step: u64,
}

impl<E: Element> TrainState<E> {
    pub fn new(
        config: &TrainConfig,
        generator: GeneratorConfig,
        discriminator: DiscriminatorConfig,
        embedder: FixedEmbedder<E>,
    ) -> Result<Self> {
        config.validate()?;
        if generator.attr_dim != discriminator.attr_dim || generator.image_size != discriminator.image_size {
            return Err(Error::Configuration(
                "generator and discriminator disagree on image size or attribute count".into(),
            ));
        }
        let mut seeds = ChaCha8Rng::seed_from_u64(config.seed);
        let g = Generator::new(generator, seeds.random())?;
        let d = Discriminator::new(discriminator, seeds.random())?;
        Ok(TrainState {
            generator: g,
            discriminator: d,
            embedder,
            opt_g: Adam::new(config.adam()),
            opt_d: Adam::new(config.adam()),
            rng: ChaCha8Rng::seed_from_u64(seeds.random()),
            step: 0,
        })
    }

    /// One critic update on `batch`; `fake` defaults to a fresh generator pass.
    pub fn train_step_d(
        &mut self,
        batch: &DBatch<E>,
        fake: Option<&Tensor<E>>,
        lambda_att: f64,
        weights: &LossWeights,
    ) -> Result<DRecord> {
        let critic = Discriminator::from_params(self.discriminator.config.clone(), self.discriminator.params.trainable())?;
        let fresh;
        let fake = match fake {
            Some(f) => f,
            None => {
                fresh = no_grad(|| self.generator.forward(&batch.young, &batch.young_attrs))?.output;
                &fresh
            }
        };
        let (att, auth, gp) = d_objective(&critic, batch, fake, weights)?;
        let total = loss_d_total(&att, &auth, &gp, lambda_att)?;
        let rec = DRecord {
            adv_att: item(&att)?,
            adv_auth: item(&auth)?,
            gp: item(&gp)?,
            total: item(&total)?,
        };
        let grads = total.backward()?;
        self.discriminator.params = critic.params;
        self.opt_d.step(&mut self.discriminator.params, &grads)?;
        Ok(rec)
    }

    /// Trainable copy of the generator for a forward pass feeding [`Self::train_step_g`].
    pub fn trainable_generator(&self) -> Result<Generator<E>> {
        Generator::from_params(self.generator.config.clone(), self.generator.params.trainable())
    }

    /// One generator update; `g_iter` is 1-based and `out` must come from `gen`.
    pub fn train_step_g(
        &mut self,
        gen: Generator<E>,
        out: &Tensor<E>,
        young: &Tensor<E>,
        attrs: &Tensor<E>,
        g_iter: u64,
        config: &TrainConfig,
    ) -> Result<GRecord> {
        let critic = self.discriminator.frozen();
        let with_id = g_iter % config.identity_loss_period == 0;
        let with_pix = g_iter % config.pixel_loss_period == 0;
        let (adv, id, pix) = g_objective(out, &critic, &self.embedder, young, attrs, with_id, with_pix)?;
        let zero = Tensor::scalar(E::zero());
        let total = loss_g_total(&adv, id.as_ref().unwrap_or(&zero), pix.as_ref(), &config.weights)?;
        let rec = GRecord {
            adv_g: item(&adv)?,
            id: id.as_ref().map(item).transpose()?.unwrap_or(0.0),
            pix: pix.as_ref().map(item).transpose()?.unwrap_or(0.0),
            total: item(&total)?,
        };
        let grads: Gradients<E> = total.backward()?;
        self.generator.params = gen.params;
        self.opt_g.step(&mut self.generator.params, &grads)?;
        Ok(rec)
    }
}

/// Draws the tensors for one critic step from the master stream.
pub fn draw_batch<E: Element, R: Rng>(
    data: &Dataset,
    sampler: &PairSampler,
    batch_size: usize,
    rng: &mut R,
) -> Result<(BatchIndices, DBatch<E>)> {
    let idx = sampler.sample(data, batch_size, rng)?;
    let n = data.attr_dim;
    let old_attrs = idx.old_attributes(data);
    let mismatched: Vec<AttributeVector> = if n == 0 {
        old_attrs.clone()
    } else {
        old_attrs.iter().map(|a| sample_mismatched(a, rng)).collect::<Result<_>>()?
    };
    let eps: Vec<f64> = (0..batch_size).map(|_| rng.random::<f64>()).collect();
    let batch = DBatch {
        young: idx.young_images(data)?,
        young_attrs: attributes_to_tensor(&idx.young_attributes(data), n)?,
        old: idx.old_images(data)?,
        old_attrs: attributes_to_tensor(&old_attrs, n)?,
        mismatched: attributes_to_tensor(&mismatched, n)?,
        eps,
    };
    Ok((idx, batch))
}

/// Drives [`TrainState`] over a dataset.
pub struct Trainer<E: Element> {
    pub config: TrainConfig,
    pub state: TrainState<E>,
    sampler: PairSampler,
    total: u64,
}

impl<E: Element> Trainer<E> {
    pub fn new(config: TrainConfig, state: TrainState<E>, data: &Dataset) -> Result<Self> {
        config.validate()?;
        if data.attr_dim != state.generator.config.attr_dim || data.image_size != state.generator.config.image_size {
            return Err(Error::Configuration(format!(
                "dataset ({}px, {} attributes) does not match the networks ({}px, {} attributes)",
                data.image_size, data.attr_dim, state.generator.config.image_size, state.generator.config.attr_dim
            )));
        }
        let sampler = PairSampler::new(data, config.target_group, config.match_attributes)?;
        let total = config.total_iterations(sampler.young_count());
        Ok(Trainer {
            config,
            state,
            sampler,
            total,
        })
    }

    pub fn total_iterations(&self) -> u64 {
        self.total
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.total
    }

    pub fn lambda_att(&self, step: u64) -> Result<f64> {
        lambda_att_schedule(step, self.config.ramp_horizon(self.total), self.config.weights.lambda_att_max)
    }

    /// One generator iteration preceded by `d_steps_per_g` critic steps.
    pub fn step(&mut self, data: &Dataset) -> Result<LossRecord> {
        let step = self.state.step;
        let lambda_att = self.lambda_att(step)?;
        let k = self.config.d_steps_per_g;
        for _ in 1..k {
            let (_, batch) = draw_batch::<E, _>(data, &self.sampler, self.config.batch_size, &mut self.state.rng)?;
            self.state.train_step_d(&batch, None, lambda_att, &self.config.weights)?;
        }
        // The generator is untouched by critic steps, so the last critic
        // batch's forward pass also drives the generator update.
        let (_, batch) = draw_batch::<E, _>(data, &self.sampler, self.config.batch_size, &mut self.state.rng)?;
        let gen = self.state.trainable_generator()?;
        let out = gen.forward(&batch.young, &batch.young_attrs)?.output;
        let d = self.state.train_step_d(&batch, Some(&out.detach()), lambda_att, &self.config.weights)?;
        let g = self
            .state
            .train_step_g(gen, &out, &batch.young, &batch.young_attrs, step + 1, &self.config)?;
        let rec = LossRecord {
            step,
            adv_att: d.adv_att,
            adv_auth: d.adv_auth,
            gp: d.gp,
            adv_g: g.adv_g,
            id: g.id,
            pix: g.pix,
            lambda_att,
        };
        rec.check_finite()?;
        self.state.step += 1;
        Ok(rec)
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let s = &self.state;
        let rng = &s.rng;
        let meta = serde_json::json!({
            "train": self.config,
            "generator": s.generator.config,
            "discriminator": s.discriminator.config,
            "embedder": s.embedder.config,
            "seed": self.config.seed,
            "step": s.step,
            "total_iterations": self.total,
            "profile": self.config.profile,
            "subband_order": SUBBAND_ORDER,
            "dtype": E::DTYPE,
            "rng": {
                "seed": rng.get_seed().iter().map(|b| format!("{b:02x}")).collect::<String>(),
                "stream": rng.get_stream().to_string(),
                "word_pos": rng.get_word_pos().to_string(),
            },
            "adam": {"generator_step": s.opt_g.step, "discriminator_step": s.opt_d.step},
            "run": extra,
        });
        let mut ck = Checkpoint::new(meta);
        ck.insert_params(&s.generator.params);
        ck.insert_params(&s.discriminator.params);
        ck.insert_params(s.embedder.params());
        for (net, opt) in [("generator", &s.opt_g), ("discriminator", &s.opt_d)] {
            for (name, slot) in &opt.slots {
                let shape = [slot.m.len()];
                ck.insert(format!("adam/{net}/m/{name}"), StoredTensor::from_slice(&shape, &slot.m));
                ck.insert(format!("adam/{net}/v/{name}"), StoredTensor::from_slice(&shape, &slot.v));
            }
        }
        ck
    }

    /// Restores a trainer saved by [`Trainer::to_checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint, data: &Dataset) -> Result<Self> {
        let m = &ck.metadata;
        let field = |k: &str| m.get(k).cloned().ok_or_else(|| Error::Configuration(format!("checkpoint metadata lacks `{k}`")));
        let config: TrainConfig = serde_json::from_value(field("train")?)?;
        let gcfg: GeneratorConfig = serde_json::from_value(field("generator")?)?;
        let dcfg: DiscriminatorConfig = serde_json::from_value(field("discriminator")?)?;
        let ecfg: EmbedderConfig = serde_json::from_value(field("embedder")?)?;
        let generator = Generator::from_params(gcfg, ck.params("generator/")?)?;
        let discriminator = Discriminator::from_params(dcfg, ck.params("discriminator/")?)?;
        let embedder = FixedEmbedder::from_params(ecfg, &ck.params("embedder/")?)?;
        let mut opt_g = Adam::new(config.adam());
        let mut opt_d = Adam::new(config.adam());
        let steps = field("adam")?;
        opt_g.step = steps["generator_step"].as_u64().unwrap_or(0);
        opt_d.step = steps["discriminator_step"].as_u64().unwrap_or(0);
        for (net, opt) in [("generator", &mut opt_g), ("discriminator", &mut opt_d)] {
            let prefix = format!("adam/{net}/m/");
            for (key, t) in ck.tensors.range(prefix.clone()..) {
                let Some(name) = key.strip_prefix(&prefix) else { break };
                let v = ck.get(&format!("adam/{net}/v/{name}"))?;
                opt.slots.insert(
                    name.to_string(),
                    AdamSlot {
                        m: t.to_vec(),
                        v: v.to_vec(),
                    },
                );
            }
        }
        let r = field("rng")?;
        let parse_err = || Error::Configuration("malformed rng state in checkpoint".into());
        let seed_hex = r["seed"].as_str().ok_or_else(parse_err)?;
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(seed_hex.get(2 * i..2 * i + 2).ok_or_else(parse_err)?, 16).map_err(|_| parse_err())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(r["stream"].as_str().and_then(|s| s.parse().ok()).ok_or_else(parse_err)?);
        rng.set_word_pos(r["word_pos"].as_str().and_then(|s| s.parse().ok()).ok_or_else(parse_err)?);
        let state = TrainState {
            generator,
            discriminator,
            embedder,
            opt_g,
            opt_d,
            rng,
            step: field("step")?.as_u64().ok_or_else(parse_err)?,
        };
        Trainer::new(config, state, data)
    }
}

/// Appends records to `logs/metrics.csv`.
pub struct MetricsLog {
    path: PathBuf,
    writer: csv::Writer<std::fs::File>,
}

impl MetricsLog {
    pub const HEADER: [&'static str; 8] = ["step", "L_adv_att", "L_adv_auth", "gp", "L_adv_G", "L_id", "L_pix", "lambda_att"];

    /// Creates (or, with `append`, extends) the CSV at `path`.
    pub fn open(path: &Path, append: bool) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let exists = append && path.exists();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if !exists {
            writer.write_record(Self::HEADER)?;
        }
        Ok(MetricsLog {
            path: path.to_path_buf(),
            writer,
        })
    }

    pub fn write(&mut self, r: &LossRecord) -> Result<()> {
        self.writer.serialize(r)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<LossRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<LossRecord>, _>>()?)
}

/// Runs to completion, logging every iteration; with `out`, writes
/// `logs/metrics.csv` and `ckpt/{step-<n>,final}.ckpt` under it.
pub fn train<E: Element>(
    trainer: &mut Trainer<E>,
    data: &Dataset,
    out: Option<&Path>,
    run_meta: &serde_json::Value,
) -> Result<Vec<LossRecord>> {
    let mut log = match out {
        Some(dir) => Some(MetricsLog::open(&dir.join("logs/metrics.csv"), trainer.state.step > 0)?),
        None => None,
    };
    let mut records = Vec::new();
    while !trainer.is_done() {
        let rec = match trainer.step(data) {
            Ok(r) => r,
            Err(e) => {
                if let Some(l) = log.as_mut() {
                    l.flush()?;
                }
                return Err(e);
            }
        };
        if let Some(l) = log.as_mut() {
            l.write(&rec)?;
        }
        records.push(rec);
        let every = trainer.config.checkpoint_every;
        if let Some(dir) = out {
            if every > 0 && trainer.state.step % every == 0 && !trainer.is_done() {
                if let Some(l) = log.as_mut() {
                    l.flush()?;
                }
                let path = dir.join(format!("ckpt/step-{}.ckpt", trainer.state.step));
                trainer.to_checkpoint(run_meta.clone()).save(&path)?;
            }
        }
        if trainer.state.step % 100 == 0 {
            log::info!(
                "step {}/{}: L_adv_auth {:.4} gp {:.4} L_adv_G {:.4} L_id {:.4}",
                trainer.state.step,
                trainer.total_iterations(),
                rec.adv_auth,
                rec.gp,
                rec.adv_g,
                rec.id
            );
        }
    }
    if let Some(l) = log.as_mut() {
        l.flush()?;
    }
    if let Some(dir) = out {
        trainer.to_checkpoint(run_meta.clone()).save(&dir.join("ckpt/final.ckpt"))?;
    }
    Ok(records)
}

/// Parameters bundled for inference.
pub fn generator_from_checkpoint<E: Element>(ck: &Checkpoint) -> Result<Generator<E>> {
    let cfg: GeneratorConfig = serde_json::from_value(
        ck.metadata
            .get("generator")
            .cloned()
            .ok_or_else(|| Error::Configuration("checkpoint metadata lacks `generator`".into()))?,
    )?;
    Generator::from_params(cfg, ck.params::<E>("generator/")?)
}

/// All `embedder/` tensors of a checkpoint as a frozen embedder.
pub fn embedder_from_checkpoint<E: Element>(ck: &Checkpoint) -> Result<FixedEmbedder<E>> {
    let cfg: EmbedderConfig = match ck.metadata.get("embedder") {
        Some(v) => serde_json::from_value(v.clone())?,
        None => EmbedderConfig::default(),
    };
    let params: ParamStore<E> = ck.params("embedder/")?;
    FixedEmbedder::from_params(cfg, &params)
}
