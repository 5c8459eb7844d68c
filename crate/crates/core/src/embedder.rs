//! Frozen identity feature extractor.
//!
//! [`FixedEmbedder`] is a structural stand-in: three stride-2 conv blocks give
//! the pooled map and a global-average linear head gives the vector. Its
//! weights are random (seeded) unless loaded from a checkpoint, so it carries
//! no guarantee of separating identities.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ConvLayer;
use crate::tensor::{Element, ParamStore, Tensor};

pub const PREFIX: &str = "embedder/";

/// Feature extractor exposing pooled and fully connected outputs.
pub trait FeatureEmbedder<E: Element> {
    /// (pool map NCHW, fc vectors N×D).
    fn embed(&self, images: &Tensor<E>) -> Result<(Tensor<E>, Tensor<E>)>;

    fn embed_pool(&self, images: &Tensor<E>) -> Result<Tensor<E>> {
        Ok(self.embed(images)?.0)
    }

    fn embed_fc(&self, images: &Tensor<E>) -> Result<Tensor<E>> {
        Ok(self.embed(images)?.1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub in_channels: usize,
    pub widths: [usize; 3],
    pub fc_dim: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            in_channels: 3,
            widths: [16, 32, 64],
            fc_dim: 128,
        }
    }
}

impl EmbedderConfig {
    fn convs(&self) -> Vec<ConvLayer> {
        let mut ch = self.in_channels;
        self.widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let l = ConvLayer::new(format!("{PREFIX}block{}", i + 1), ch, w, 4, 2, 1);
                ch = w;
                l
            })
            .collect()
    }
}

/// Where the embedder weights come from, as given on the command line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum EmbedderSource {
    Fixed(u64),
    File(std::path::PathBuf),
}

impl std::str::FromStr for EmbedderSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(seed) = s.strip_prefix("fixed:") {
            let seed = seed
                .parse()
                .map_err(|_| Error::Argument(format!("bad embedder seed in `{s}`")))?;
            Ok(EmbedderSource::Fixed(seed))
        } else if let Some(path) = s.strip_prefix("file:") {
            Ok(EmbedderSource::File(path.into()))
        } else {
            Err(Error::Argument(format!(
                "embedder must be `fixed:<seed>` or `file:<path>`, got `{s}`"
            )))
        }
    }
}

impl std::fmt::Display for EmbedderSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EmbedderSource::Fixed(seed) => write!(f, "fixed:{seed}"),
            EmbedderSource::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FixedEmbedder<E: Element> {
    pub config: EmbedderConfig,
    params: ParamStore<E>,
}

pub fn make_fixed_embedder<E: Element>(seed: u64, config: EmbedderConfig) -> FixedEmbedder<E> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    for l in config.convs() {
        let fan_in = (l.in_channels * l.kernel * l.kernel) as f64;
        l.init(&mut params, (2.0 / fan_in).sqrt(), &mut rng);
    }
    let last = config.widths[2];
    params.insert_normal(
        format!("{PREFIX}fc/weight"),
        &[last, config.fc_dim],
        (1.0 / last as f64).sqrt(),
        &mut rng,
    );
    params.insert_zeros(format!("{PREFIX}fc/bias"), &[config.fc_dim]);
    FixedEmbedder {
        config,
        params: params.frozen(),
    }
}

impl<E: Element> FixedEmbedder<E> {
    /// Wraps externally supplied weights (keys under `embedder/`).
    pub fn from_params(config: EmbedderConfig, params: &ParamStore<E>) -> Result<Self> {
        let params = params.with_prefix(PREFIX).frozen();
        for l in config.convs() {
            let w = params.get(&l.weight_key())?;
            params.get(&l.bias_key())?;
            if w.shape() != l.weight_shape() {
                return Err(Error::Configuration(format!(
                    "`{}` has shape {:?}, expected {:?}",
                    l.weight_key(),
                    w.shape(),
                    l.weight_shape()
                )));
            }
        }
        let fc = params.get(&format!("{PREFIX}fc/weight"))?;
        if fc.shape() != [config.widths[2], config.fc_dim] {
            return Err(Error::Configuration(format!("{PREFIX}fc/weight has shape {:?}", fc.shape())));
        }
        params.get(&format!("{PREFIX}fc/bias"))?;
        Ok(FixedEmbedder { config, params })
    }

    pub fn params(&self) -> &ParamStore<E> {
        &self.params
    }
}

impl<E: Element> FeatureEmbedder<E> for FixedEmbedder<E> {
    fn embed(&self, images: &Tensor<E>) -> Result<(Tensor<E>, Tensor<E>)> {
        let &[n, c, h, w] = images.shape() else {
            return Err(Error::Dimension(format!("expected NCHW images, got {:?}", images.shape())));
        };
        if c != self.config.in_channels || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Configuration(format!(
                "embedder takes {}-channel images with sides divisible by 8, got {h}×{w}×{c}",
                self.config.in_channels
            )));
        }
        let mut t = images.clone();
        for l in self.config.convs() {
            t = l.forward(&self.params, &t)?.leaky_relu(0.2)?;
        }
        let d = self.config.widths[2];
        let (ph, pw) = (h / 8, w / 8);
        let gap = t.sum_to(&[n, d, 1, 1])?.scale(1.0 / (ph * pw) as f64)?.reshape(&[n, d])?;
        let fc = gap
            .matmul(self.params.get(&format!("{PREFIX}fc/weight"))?)?
            .add(self.params.get(&format!("{PREFIX}fc/bias"))?)?;
        Ok((t, fc))
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;

    fn image(seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec((0..3 * 64 * 64).map(|_| rng.random_range(-1.0..1.0)).collect(), &[1, 3, 64, 64]).unwrap()
    }

    #[test]
    fn shape_contract_and_determinism() {
        let e = make_fixed_embedder::<f64>(3, EmbedderConfig::default());
        let x = image(0);
        let (pool, fc) = e.embed(&x).unwrap();
        assert_eq!(pool.shape(), &[1, 64, 8, 8]);
        assert_eq!(fc.shape(), &[1, 128]);
        let again = make_fixed_embedder::<f64>(3, EmbedderConfig::default()).embed(&x).unwrap();
        assert_eq!(again.0.data(), pool.data());
        assert_eq!(again.1.data(), fc.data());
        let other = make_fixed_embedder::<f64>(4, EmbedderConfig::default()).embed_fc(&x).unwrap();
        let gap = fc.data().iter().zip(other.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap > 0.0);
    }

    #[test]
    fn shapes_stable_across_batch_sizes() {
        let e = make_fixed_embedder::<f64>(1, EmbedderConfig::default());
        let x = image(1);
        let two = Tensor::concat(&[x.clone(), x.clone()], 0).unwrap();
        let (p1, f1) = e.embed(&x).unwrap();
        let (p2, f2) = e.embed(&two).unwrap();
        assert_eq!(p2.shape()[1..], p1.shape()[1..]);
        assert_eq!(f2.shape()[1..], f1.shape()[1..]);
        for (a, b) in f1.data().iter().zip(&f2.data()[..128]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn parameters_are_constants() {
        let e = make_fixed_embedder::<f64>(1, EmbedderConfig::default());
        assert!(e.params().iter().all(|(_, t)| !t.requires_grad()));
    }

    #[test]
    fn source_parsing() {
        assert_eq!("fixed:12".parse::<EmbedderSource>().unwrap(), EmbedderSource::Fixed(12));
        assert_eq!(
            "file:/a/b.ckpt".parse::<EmbedderSource>().unwrap(),
            EmbedderSource::File("/a/b.ckpt".into())
        );
        assert!("lightcnn".parse::<EmbedderSource>().is_err());
        assert_eq!(EmbedderSource::Fixed(5).to_string(), "fixed:5");
    }
}
