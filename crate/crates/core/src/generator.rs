//! Attentive hourglass generator: encoder, residual bottleneck, attribute
//! embedding, decoder with mask and image heads, fusion with the input.

use ndarray::{Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{batch_to_tensor, check_range, tensor_to_batch, FaceImage, RANGE_EPS};
use crate::nn::{trace, ConvLayer, ShapeTrace, INIT_STD};
use crate::tensor::{Element, ParamStore, Tensor};

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Profile {
    #[serde(rename = "paper-256")]
    Paper256,
    #[serde(rename = "desk-64")]
    Desk64,
}

impl std::fmt::Display for Profile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Profile::Paper256 => "paper-256",
            Profile::Desk64 => "desk-64",
        })
    }
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-256" => Ok(Profile::Paper256),
            "desk-64" => Ok(Profile::Desk64),
            other => Err(Error::Argument(format!(
                "unknown profile `{other}` (expected paper-256 or desk-64)"
            ))),
        }
    }
}

/// Binary (or soft, in [0, 1]) facial attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttributeVector {
    values: Vec<f64>,
}

impl AttributeVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("attribute value {v} outside [0, 1]")));
        }
        Ok(AttributeVector { values })
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        AttributeVector {
            values: bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Bit `i` of `index` becomes attribute `i`.
    pub fn from_index(index: usize, n: usize) -> Self {
        Self::from_bits(&(0..n).map(|i| index >> i & 1 == 1).collect::<Vec<_>>())
    }

    /// Inverse of [`AttributeVector::from_index`], thresholding at 0.5.
    pub fn to_index(&self) -> usize {
        self.values
            .iter()
            .enumerate()
            .map(|(i, &v)| usize::from(v >= 0.5) << i)
            .sum()
    }

    pub fn zeros(n: usize) -> Self {
        AttributeVector { values: vec![0.0; n] }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn bit(&self, i: usize) -> bool {
        self.values[i] >= 0.5
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Stacks attribute vectors into a (B, N) tensor.
pub fn attributes_to_tensor<E: Element>(attrs: &[AttributeVector], n: usize) -> Result<Tensor<E>> {
    let mut data = Vec::with_capacity(attrs.len() * n);
    for a in attrs {
        if a.len() != n {
            return Err(Error::Argument(format!(
                "attribute vector has length {}, expected {n}",
                a.len()
            )));
        }
        data.extend(a.values().iter().map(|&v| E::from_f64_lossy(v)));
    }
    Tensor::from_vec(data, &[attrs.len(), n])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    pub n_resblocks: usize,
    pub attr_dim: usize,
    pub profile: Profile,
    /// Concatenate α at the bottleneck. Off for the w/o-FAE ablation.
    #[serde(default = "default_true")]
    pub attribute_embedding: bool,
    /// Mask head plus fusion. Off for the w/o-AM ablation.
    #[serde(default = "default_true")]
    pub attention: bool,
}

fn default_true() -> bool {
    true
}

impl GeneratorConfig {
    pub fn paper(attr_dim: usize) -> Self {
        GeneratorConfig {
            image_size: 256,
            in_channels: 3,
            base_channels: 64,
            n_resblocks: 6,
            attr_dim,
            profile: Profile::Paper256,
            attribute_embedding: true,
            attention: true,
        }
    }

    pub fn desk(attr_dim: usize) -> Self {
        GeneratorConfig {
            image_size: 64,
            in_channels: 3,
            base_channels: 8,
            n_resblocks: 2,
            attr_dim,
            profile: Profile::Desk64,
            attribute_embedding: true,
            attention: true,
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
        if self.image_size < 16 || !self.image_size.is_power_of_two() {
            return bad(format!("generator image_size {} must be a power of two >= 16", self.image_size));
        }
        if self.n_resblocks == 0 {
            return bad("generator needs at least one residual block".into());
        }
        if self.in_channels == 0 || self.base_channels == 0 {
            return bad("generator channel counts must be positive".into());
        }
        Ok(())
    }

    /// Number of attribute planes actually concatenated at the bottleneck.
    pub fn embedded_attr_dim(&self) -> usize {
        if self.attribute_embedding {
            self.attr_dim
        } else {
            0
        }
    }

    fn layers(&self) -> Layers {
        let b = self.base_channels;
        let p = |s: &str| format!("generator/{s}");
        Layers {
            conv1: ConvLayer::new(p("conv1"), self.in_channels, b, 7, 1, 3),
            conv2: ConvLayer::new(p("conv2"), b, 2 * b, 4, 2, 1),
            conv3: ConvLayer::new(p("conv3"), 2 * b, 4 * b, 4, 2, 1),
            res: (1..=self.n_resblocks)
                .map(|i| {
                    (
                        ConvLayer::new(p(&format!("res{i}/conv_a")), 4 * b, 4 * b, 3, 1, 1),
                        ConvLayer::new(p(&format!("res{i}/conv_b")), 4 * b, 4 * b, 3, 1, 1),
                    )
                })
                .collect(),
            up1: ConvLayer::new(p("up1"), 4 * b + self.embedded_attr_dim(), 2 * b, 3, 1, 1),
            up2: ConvLayer::new(p("up2"), 2 * b, b, 3, 1, 1),
            mask_head: self.attention.then(|| ConvLayer::new(p("mask_head"), b, 1, 7, 1, 3)),
            image_head: ConvLayer::new(p("image_head"), b, self.in_channels, 7, 1, 3),
        }
    }
}

struct Layers {
    conv1: ConvLayer,
    conv2: ConvLayer,
    conv3: ConvLayer,
    res: Vec<(ConvLayer, ConvLayer)>,
    up1: ConvLayer,
    up2: ConvLayer,
    mask_head: Option<ConvLayer>,
    image_head: ConvLayer,
}

impl Layers {
    fn all(&self) -> Vec<&ConvLayer> {
        let mut v = vec![&self.conv1, &self.conv2, &self.conv3];
        for (a, b) in &self.res {
            v.push(a);
            v.push(b);
        }
        v.extend([&self.up1, &self.up2]);
        v.extend(self.mask_head.iter());
        v.push(&self.image_head);
        v
    }
}

/// Appends α as N spatially constant channels to NCHW `features`.
pub fn embed_attributes<E: Element>(features: &Tensor<E>, attrs: &Tensor<E>) -> Result<Tensor<E>> {
    let &[n, _, h, w] = features.shape() else {
        return Err(Error::Dimension(format!("expected NCHW features, got {:?}", features.shape())));
    };
    let &[na, k] = attrs.shape() else {
        return Err(Error::Argument(format!("expected (batch, N) attributes, got {:?}", attrs.shape())));
    };
    if na != n {
        return Err(Error::Argument(format!("{na} attribute rows for a batch of {n}")));
    }
    if k == 0 {
        return Ok(features.clone());
    }
    let planes = attrs.reshape(&[n, k, 1, 1])?.broadcast_to(&[n, k, h, w])?;
    Tensor::concat(&[features.clone(), planes], 1)
}

/// Single-image form of [`embed_attributes`] on an (h, w, c) array.
pub fn embed_attributes_hwc(features: &Array3<f64>, alpha: &AttributeVector, attr_dim: usize) -> Result<Array3<f64>> {
    if alpha.len() != attr_dim {
        return Err(Error::Argument(format!(
            "attribute vector has length {}, configured attr_dim is {attr_dim}",
            alpha.len()
        )));
    }
    let (h, w, c) = features.dim();
    let mut out = Array3::zeros((h, w, c + attr_dim));
    out.slice_mut(ndarray::s![.., .., ..c]).assign(features);
    for (i, &v) in alpha.values().iter().enumerate() {
        out.index_axis_mut(Axis(2), c + i).fill(v);
    }
    Ok(out)
}

/// I_o = M_A ⊙ I_y + (1 − M_A) ⊙ M_I with a single-channel mask replicated over channels.
pub fn fuse<E: Element>(input: &Tensor<E>, mask: &Tensor<E>, image_map: &Tensor<E>) -> Result<Tensor<E>> {
    if input.shape() != image_map.shape() {
        return Err(Error::Dimension(format!(
            "input {:?} and image map {:?} differ in shape",
            input.shape(),
            image_map.shape()
        )));
    }
    let s = input.shape();
    let ok = mask.rank() == 4
        && mask.dim(0) == s[0]
        && (mask.dim(1) == 1 || mask.dim(1) == s[1])
        && mask.shape()[2..] == s[2..];
    if !ok {
        return Err(Error::Dimension(format!(
            "mask {:?} incompatible with image {:?}",
            mask.shape(),
            s
        )));
    }
    let keep = mask.mul(input)?;
    let inv = mask.neg()?.add_scalar(1.0)?;
    keep.add(&inv.mul(image_map)?)
}

/// Batched forward result; `mask` is absent without attention.
#[derive(Debug, Clone)]
pub struct GeneratorTensors<E: Element> {
    pub output: Tensor<E>,
    pub mask: Option<Tensor<E>>,
    pub image_map: Tensor<E>,
}

/// Single-image forward result in HWC layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorOutput {
    pub output: FaceImage,
    pub mask: Option<Array3<f64>>,
    pub image_map: FaceImage,
}

#[derive(Debug, Clone)]
pub struct Generator<E: Element> {
    pub config: GeneratorConfig,
    pub params: ParamStore<E>,
}

impl<E: Element> Generator<E> {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for layer in config.layers().all() {
            layer.init(&mut params, INIT_STD, &mut rng);
        }
        Ok(Generator { config, params })
    }

    pub fn from_params(config: GeneratorConfig, params: ParamStore<E>) -> Result<Self> {
        config.validate()?;
        for layer in config.layers().all() {
            for key in [layer.weight_key(), layer.bias_key()] {
                params.get(&key)?;
            }
            let w = params.get(&layer.weight_key())?;
            if w.shape() != layer.weight_shape() {
                return Err(Error::Configuration(format!(
                    "`{}` has shape {:?}, config expects {:?}",
                    layer.weight_key(),
                    w.shape(),
                    layer.weight_shape()
                )));
            }
        }
        Ok(Generator { config, params })
    }

    /// Copy whose parameters are constants.
    pub fn frozen(&self) -> Self {
        Generator {
            config: self.config.clone(),
            params: self.params.frozen(),
        }
    }

    pub fn forward(&self, x: &Tensor<E>, attrs: &Tensor<E>) -> Result<GeneratorTensors<E>> {
        self.forward_traced(x, attrs, None)
    }

    pub fn forward_traced(
        &self,
        x: &Tensor<E>,
        attrs: &Tensor<E>,
        mut tr: Option<&mut ShapeTrace>,
    ) -> Result<GeneratorTensors<E>> {
        let c = &self.config;
        let s = c.image_size;
        let &[n, ch, h, w] = x.shape() else {
            return Err(Error::Dimension(format!("expected NCHW input, got {:?}", x.shape())));
        };
        if (ch, h, w) != (c.in_channels, s, s) {
            return Err(Error::Dimension(format!(
                "generator expects {s}×{s}×{} input, got {h}×{w}×{ch}",
                c.in_channels
            )));
        }
        if attrs.shape() != [n, c.attr_dim] {
            return Err(Error::Argument(format!(
                "attributes have shape {:?}, expected [{n}, {}]",
                attrs.shape(),
                c.attr_dim
            )));
        }
        let l = c.layers();
        let p = &self.params;
        let enc = |layer: &ConvLayer, t: &Tensor<E>| layer.forward(p, t)?.instance_norm(NORM_EPS)?.relu();

        let mut t = enc(&l.conv1, x)?;
        trace(&mut tr, "conv1", &t);
        t = enc(&l.conv2, &t)?;
        trace(&mut tr, "conv2", &t);
        t = enc(&l.conv3, &t)?;
        trace(&mut tr, "conv3", &t);
        for (i, (a, b)) in l.res.iter().enumerate() {
            let r = enc(a, &t)?;
            let r = b.forward(p, &r)?.instance_norm(NORM_EPS)?;
            t = t.add(&r)?;
            trace(&mut tr, &format!("res{}", i + 1), &t);
        }
        if c.attribute_embedding {
            t = embed_attributes(&t, attrs)?;
        }
        trace(&mut tr, "embed", &t);
        t = l.up1.forward(p, &t.upsample2()?)?.relu()?;
        trace(&mut tr, "up1", &t);
        t = l.up2.forward(p, &t.upsample2()?)?.relu()?;
        trace(&mut tr, "up2", &t);

        let image_map = l.image_head.forward(p, &t)?.tanh()?;
        trace(&mut tr, "image_map", &image_map);
        let (output, mask) = match &l.mask_head {
            Some(head) => {
                let mask = head.forward(p, &t)?.sigmoid()?;
                trace(&mut tr, "mask", &mask);
                (fuse(x, &mask, &image_map)?, Some(mask))
            }
            None => (image_map.clone(), None),
        };
        trace(&mut tr, "output", &output);
        Ok(GeneratorTensors { output, mask, image_map })
    }

    /// Runs one HWC image through the network.
    pub fn generate(&self, image: &FaceImage, alpha: &AttributeVector) -> Result<GeneratorOutput> {
        let c = &self.config;
        if image.dim() != (c.image_size, c.image_size, c.in_channels) {
            return Err(Error::Dimension(format!(
                "generator expects {0}×{0}×{1} input, got {2:?}",
                c.image_size,
                c.in_channels,
                image.dim()
            )));
        }
        check_range(image.view(), RANGE_EPS)?;
        let x = batch_to_tensor::<E>(std::slice::from_ref(image))?;
        let a = attributes_to_tensor::<E>(std::slice::from_ref(alpha), c.attr_dim)?;
        let out = crate::tensor::no_grad(|| self.forward(&x, &a))?;
        let first = |t: &Tensor<E>| -> Result<FaceImage> { Ok(tensor_to_batch(t)?.remove(0)) };
        Ok(GeneratorOutput {
            output: first(&out.output)?,
            mask: out.mask.as_ref().map(first).transpose()?,
            image_map: first(&out.image_map)?,
        })
    }

    /// Runs many HWC images through the network, `chunk` at a time.
    pub fn generate_batch(&self, images: &[FaceImage], alphas: &[AttributeVector], chunk: usize) -> Result<Vec<GeneratorOutput>> {
        if images.len() != alphas.len() {
            return Err(Error::Argument(format!("{} images but {} attribute vectors", images.len(), alphas.len())));
        }
        let mut out = Vec::with_capacity(images.len());
        for (imgs, als) in images.chunks(chunk.max(1)).zip(alphas.chunks(chunk.max(1))) {
            for img in imgs {
                check_range(img.view(), RANGE_EPS)?;
            }
            let x = batch_to_tensor::<E>(imgs)?;
            let a = attributes_to_tensor::<E>(als, self.config.attr_dim)?;
            let t = crate::tensor::no_grad(|| self.forward(&x, &a))?;
            let masks = t.mask.as_ref().map(tensor_to_batch).transpose()?;
            let maps = tensor_to_batch(&t.image_map)?;
            for (k, (o, m)) in tensor_to_batch(&t.output)?.into_iter().zip(maps).enumerate() {
                out.push(GeneratorOutput {
                    output: o,
                    mask: masks.as_ref().map(|v| v[k].clone()),
                    image_map: m,
                });
            }
        }
        Ok(out)
    }
}
