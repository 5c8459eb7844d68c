//! Layer descriptors shared by the networks.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Element, ParamStore, Tensor};

/// Std of the zero-mean Gaussian used for conv kernels.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvLayer {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        ConvLayer {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn weight_key(&self) -> String {
        format!("{}/weight", self.name)
    }

    pub fn bias_key(&self) -> String {
        format!("{}/bias", self.name)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn output_size(&self, input: usize) -> usize {
        (input + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn init<E: Element, R: Rng>(&self, params: &mut ParamStore<E>, std: f64, rng: &mut R) {
        params.insert_normal(self.weight_key(), &self.weight_shape(), std, rng);
        params.insert_zeros(self.bias_key(), &[self.out_channels]);
    }

    pub fn forward<E: Element>(&self, params: &ParamStore<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        let w = params.get(&self.weight_key())?;
        let b = params.get(&self.bias_key())?;
        x.conv2d(w, self.stride, self.pad)?
            .add(&b.reshape(&[1, self.out_channels, 1, 1])?)
    }
}

/// Records intermediate activation shapes during a forward pass.
#[derive(Debug, Default, Clone)]
pub struct ShapeTrace {
    pub entries: Vec<(String, Vec<usize>)>,
}

impl ShapeTrace {
    pub fn record(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.entries.push((name.into(), shape.to_vec()));
    }

    /// Shape recorded under `name`, as (H, W, C) for NCHW entries.
    pub fn hwc(&self, name: &str) -> Option<(usize, usize, usize)> {
        self.entries.iter().find(|(n, _)| n == name).and_then(|(_, s)| match s.as_slice() {
            [_, c, h, w] => Some((*h, *w, *c)),
            _ => None,
        })
    }
}

pub(crate) fn trace<E: Element>(t: &mut Option<&mut ShapeTrace>, name: &str, x: &Tensor<E>) {
    if let Some(t) = t.as_deref_mut() {
        t.record(name, x.shape());
    }
}
