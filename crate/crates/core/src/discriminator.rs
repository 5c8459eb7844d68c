//! Multi-pathway wavelet-packet critic.
//!
//! Pathway `k` reads packet level `k`, halves resolution with 4/2/1 convs,
//! takes α as extra constant channels mid-way, and ends in a one-channel patch
//! map. The maps are concatenated and a linear head reduces them to a score.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{attributes_to_tensor, embed_attributes, AttributeVector, Profile};
use crate::image::{batch_to_tensor, check_range, FaceImage, RANGE_EPS};
use crate::nn::{trace, ConvLayer, ShapeTrace, INIT_STD};
use crate::tensor::{Element, ParamStore, Tensor};
use crate::wpt::{wpt_tensor_levels, FilterPair};

const LEAK: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    pub attr_dim: usize,
    /// Number of pathways, reading packet levels `0..pathways`.
    pub pathways: usize,
    /// 8·base-wide convs between the attribute concat and the final conv.
    pub post_concat_blocks: usize,
    pub filter: String,
    pub profile: Profile,
    #[serde(default = "default_true")]
    pub attribute_conditioning: bool,
}

fn default_true() -> bool {
    true
}

impl DiscriminatorConfig {
    pub fn paper(attr_dim: usize) -> Self {
        DiscriminatorConfig {
            image_size: 256,
            in_channels: 3,
            base_channels: 64,
            attr_dim,
            pathways: 3,
            post_concat_blocks: 2,
            filter: "haar".into(),
            profile: Profile::Paper256,
            attribute_conditioning: true,
        }
    }

    pub fn desk(attr_dim: usize) -> Self {
        DiscriminatorConfig {
            image_size: 64,
            in_channels: 3,
            base_channels: 8,
            attr_dim,
            pathways: 3,
            post_concat_blocks: 0,
            filter: "haar".into(),
            profile: Profile::Desk64,
            attribute_conditioning: true,
        }
    }

    pub fn for_profile(profile: Profile, attr_dim: usize) -> Self {
        match profile {
            Profile::Paper256 => Self::paper(attr_dim),
            Profile::Desk64 => Self::desk(attr_dim),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Configuration(m));
        if !(1..=3).contains(&self.pathways) {
            return bad(format!("discriminator needs 1 to 3 pathways, got {}", self.pathways));
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return bad("discriminator channel counts must be positive".into());
        }
        let halvings = 4 + self.post_concat_blocks;
        if !self.image_size.is_power_of_two() || self.image_size >> halvings == 0 {
            return bad(format!(
                "image_size {} cannot be halved {halvings} times",
                self.image_size
            ));
        }
        FilterPair::by_name(&self.filter)?.validate()
    }

    fn conditioned_dim(&self) -> usize {
        if self.attribute_conditioning {
            self.attr_dim
        } else {
            0
        }
    }

    /// Side length of every pathway's output map.
    pub fn patch_size(&self) -> usize {
        self.image_size >> (4 + self.post_concat_blocks)
    }

    /// (H, W, C) consumed by pathway `k` (0-based).
    pub fn pathway_input(&self, k: usize) -> (usize, usize, usize) {
        let s = self.image_size >> k;
        (s, s, self.in_channels << (2 * k))
    }

    pub fn fc_inputs(&self) -> usize {
        self.pathways * self.patch_size() * self.patch_size()
    }

    fn pathway_layers(&self, k: usize) -> (Vec<ConvLayer>, Vec<ConvLayer>) {
        let b = self.base_channels;
        let name = |s: String| format!("discriminator/pathway{}/{s}", k + 1);
        let mut pre = Vec::new();
        let mut ch = self.pathway_input(k).2;
        for j in k..3 {
            let out = b << j;
            pre.push(ConvLayer::new(name(format!("conv{}", pre.len() + 1)), ch, out, 4, 2, 1));
            ch = out;
        }
        ch += self.conditioned_dim();
        let mut post = Vec::new();
        for i in 0..self.post_concat_blocks {
            post.push(ConvLayer::new(name(format!("post{}", i + 1)), ch, 8 * b, 4, 2, 1));
            ch = 8 * b;
        }
        post.push(ConvLayer::new(name("out".into()), ch, 1, 4, 2, 1));
        (pre, post)
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator<E: Element> {
    pub config: DiscriminatorConfig,
    pub params: ParamStore<E>,
    filters: FilterPair,
}

impl<E: Element> Discriminator<E> {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for k in 0..config.pathways {
            let (pre, post) = config.pathway_layers(k);
            for l in pre.iter().chain(&post) {
                l.init(&mut params, INIT_STD, &mut rng);
            }
        }
        params.insert_normal("discriminator/fc/weight", &[config.fc_inputs(), 1], INIT_STD, &mut rng);
        params.insert_zeros("discriminator/fc/bias", &[1]);
        let filters = FilterPair::by_name(&config.filter)?;
        Ok(Discriminator { config, params, filters })
    }

    pub fn from_params(config: DiscriminatorConfig, params: ParamStore<E>) -> Result<Self> {
        config.validate()?;
        for k in 0..config.pathways {
            let (pre, post) = config.pathway_layers(k);
            for l in pre.iter().chain(&post) {
                let w = params.get(&l.weight_key())?;
                params.get(&l.bias_key())?;
                if w.shape() != l.weight_shape() {
                    return Err(Error::Configuration(format!(
                        "`{}` has shape {:?}, config expects {:?}",
                        l.weight_key(),
                        w.shape(),
                        l.weight_shape()
                    )));
                }
            }
        }
        if params.get("discriminator/fc/weight")?.shape() != [config.fc_inputs(), 1] {
            return Err(Error::Configuration("discriminator/fc/weight has the wrong shape".into()));
        }
        params.get("discriminator/fc/bias")?;
        let filters = FilterPair::by_name(&config.filter)?;
        Ok(Discriminator { config, params, filters })
    }

    pub fn frozen(&self) -> Self {
        Discriminator {
            config: self.config.clone(),
            params: self.params.frozen(),
            filters: self.filters.clone(),
        }
    }

    /// Patch map (N, 1, p, p) of pathway `k` (0-based) for a level-`k` stack.
    pub fn pathway_forward(&self, k: usize, coeffs: &Tensor<E>, attrs: &Tensor<E>) -> Result<Tensor<E>> {
        self.pathway_traced(k, coeffs, attrs, None)
    }

    fn pathway_traced(
        &self,
        k: usize,
        coeffs: &Tensor<E>,
        attrs: &Tensor<E>,
        mut tr: Option<&mut ShapeTrace>,
    ) -> Result<Tensor<E>> {
        let c = &self.config;
        if k >= c.pathways {
            return Err(Error::Argument(format!("pathway {k} out of range (have {})", c.pathways)));
        }
        let (h, w, ch) = c.pathway_input(k);
        let &[n, cc, hh, ww] = coeffs.shape() else {
            return Err(Error::Dimension(format!("expected NCHW coefficients, got {:?}", coeffs.shape())));
        };
        if (hh, ww, cc) != (h, w, ch) {
            return Err(Error::Dimension(format!(
                "pathway {} expects {h}×{w}×{ch}, got {hh}×{ww}×{cc}",
                k + 1
            )));
        }
        if attrs.shape() != [n, c.attr_dim] {
            return Err(Error::Argument(format!(
                "attributes have shape {:?}, expected [{n}, {}]",
                attrs.shape(),
                c.attr_dim
            )));
        }
        let (pre, post) = c.pathway_layers(k);
        let tag = |s: &str| format!("pathway{}/{s}", k + 1);
        let mut t = coeffs.clone();
        for l in &pre {
            t = l.forward(&self.params, &t)?.leaky_relu(LEAK)?;
            trace(&mut tr, &tag(l.name.rsplit('/').next().unwrap_or("")), &t);
        }
        if c.attribute_conditioning {
            t = embed_attributes(&t, attrs)?;
        }
        trace(&mut tr, &tag("concat"), &t);
        let (last, hidden) = post.split_last().expect("final conv present");
        for l in hidden {
            t = l.forward(&self.params, &t)?.leaky_relu(LEAK)?;
            trace(&mut tr, &tag(l.name.rsplit('/').next().unwrap_or("")), &t);
        }
        t = last.forward(&self.params, &t)?;
        trace(&mut tr, &tag("out"), &t);
        Ok(t)
    }

    /// Critic scores, shape `[N]`, for NCHW images.
    pub fn discriminate(&self, images: &Tensor<E>, attrs: &Tensor<E>) -> Result<Tensor<E>> {
        self.discriminate_traced(images, attrs, None)
    }

    pub fn discriminate_traced(
        &self,
        images: &Tensor<E>,
        attrs: &Tensor<E>,
        mut tr: Option<&mut ShapeTrace>,
    ) -> Result<Tensor<E>> {
        let c = &self.config;
        let &[n, ch, h, w] = images.shape() else {
            return Err(Error::Dimension(format!("expected NCHW images, got {:?}", images.shape())));
        };
        if (ch, h, w) != (c.in_channels, c.image_size, c.image_size) {
            return Err(Error::Dimension(format!(
                "discriminator expects {0}×{0}×{1} images, got {h}×{w}×{ch}",
                c.image_size, c.in_channels
            )));
        }
        let levels = wpt_tensor_levels(images, c.pathways - 1, &self.filters)?;
        let mut maps = Vec::with_capacity(c.pathways);
        for (k, coeffs) in levels.iter().enumerate() {
            trace(&mut tr, &format!("pathway{}/input", k + 1), coeffs);
            maps.push(self.pathway_traced(k, coeffs, attrs, tr.as_deref_mut())?);
        }
        let fused = Tensor::concat(&maps, 1)?;
        trace(&mut tr, "fused", &fused);
        let flat = fused.reshape(&[n, c.fc_inputs()])?;
        let score = flat
            .matmul(self.params.get("discriminator/fc/weight")?)?
            .add(self.params.get("discriminator/fc/bias")?)?;
        score.reshape(&[n])
    }

    /// Score of a single HWC image.
    pub fn score_image(&self, image: &FaceImage, alpha: &AttributeVector) -> Result<f64> {
        check_range(image.view(), RANGE_EPS)?;
        let x = batch_to_tensor::<E>(std::slice::from_ref(image))?;
        let a = attributes_to_tensor::<E>(std::slice::from_ref(alpha), self.config.attr_dim)?;
        crate::tensor::no_grad(|| self.discriminate(&x, &a))?.item_f64()
    }
}

#[cfg(test)]
mod tests {
    use ndarray::Array3;
    use rand::Rng;

    use super::*;
    use crate::tensor::grad;

    fn tiny(attr_dim: usize) -> DiscriminatorConfig {
        DiscriminatorConfig {
            image_size: 16,
            base_channels: 4,
            ..DiscriminatorConfig::desk(attr_dim)
        }
    }

    fn random_image(size: usize, rng: &mut ChaCha8Rng) -> FaceImage {
        Array3::from_shape_fn((size, size, 3), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn desk_patch_maps_are_four_by_four() {
        let cfg = DiscriminatorConfig::desk(2);
        assert_eq!(cfg.patch_size(), 4);
        assert_eq!(cfg.fc_inputs(), 48);
        for k in 0..3 {
            assert_eq!(cfg.pathway_input(k).2, 3 * 4usize.pow(k as u32));
        }
    }

    #[test]
    fn zero_parameters_give_the_final_bias() {
        let mut d = Discriminator::<f64>::new(tiny(2), 1).unwrap();
        let names: Vec<String> = d.params.names().cloned().collect();
        for name in names {
            let n = d.params.get(&name).unwrap().numel();
            d.params.set_data(&name, vec![0.0; n]).unwrap();
        }
        d.params.set_data("discriminator/pathway2/out/bias", vec![0.37]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = batch_to_tensor::<f64>(&[random_image(8, &mut rng)]).unwrap();
        let x = x.reshape(&[1, 3, 8, 8]).unwrap();
        let coeffs = Tensor::concat(&[x.clone(), x.clone(), x.clone(), x], 1).unwrap();
        let a = Tensor::from_vec(vec![1.0, 0.0], &[1, 2]).unwrap();
        let map = d.pathway_forward(1, &coeffs, &a).unwrap();
        assert_eq!(map.shape(), &[1, 1, 1, 1]);
        assert!(map.data().iter().all(|&v| v == 0.37));
    }

    #[test]
    fn scores_are_deterministic_and_attribute_sensitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut nonzero = 0;
        let a = AttributeVector::from_bits(&[true, false]);
        let b = AttributeVector::from_bits(&[false, true]);
        for seed in 0..100 {
            let d = Discriminator::<f64>::new(tiny(2), seed).unwrap();
            let img = random_image(16, &mut rng);
            let s1 = d.score_image(&img, &a).unwrap();
            assert_eq!(s1.to_bits(), d.score_image(&img, &a).unwrap().to_bits());
            nonzero += usize::from(s1 != d.score_image(&img, &b).unwrap());
        }
        assert!(nonzero >= 99, "{nonzero}");
    }

    #[test]
    fn input_gradient_is_nonzero() {
        let d = Discriminator::<f64>::new(tiny(2), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = batch_to_tensor::<f64>(&[random_image(16, &mut rng), random_image(16, &mut rng)])
            .unwrap()
            .into_leaf();
        let a = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let s = d.discriminate(&x, &a).unwrap().sum_all().unwrap();
        let g = grad(&s, &[&x], false).unwrap().remove(0);
        assert!(g.max_abs() > 0.0);
    }

    #[test]
    fn shape_errors() {
        let d = Discriminator::<f64>::new(tiny(2), 0).unwrap();
        let a = Tensor::zeros(&[1, 2]);
        assert!(matches!(d.discriminate(&Tensor::zeros(&[1, 3, 32, 32]), &a), Err(Error::Dimension(_))));
        assert!(matches!(d.pathway_forward(2, &Tensor::zeros(&[1, 12, 4, 4]), &a), Err(Error::Dimension(_))));
    }

    #[test]
    fn single_pathway_variant() {
        let cfg = DiscriminatorConfig { pathways: 1, ..tiny(2) };
        let d = Discriminator::<f64>::new(cfg, 0).unwrap();
        assert!(!d.params.contains("discriminator/pathway2/conv1/weight"));
        assert_eq!(d.params.get("discriminator/fc/weight").unwrap().shape(), &[1, 1]);
        let s = d.score_image(&Array3::zeros((16, 16, 3)), &AttributeVector::zeros(2)).unwrap();
        assert!(s.is_finite());
    }
}
