//! Parameterized layers.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add_uniform(format!("{name}/weight"), &[inputs, outputs], inputs, rng);
        let bias = store.add_uniform(format!("{name}/bias"), &[outputs], inputs, rng);
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    /// `x: [N, in] -> [N, out]`.
    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Var<'g> {
        x.matmul(g.param(store, self.weight))
            .add_bias(g.param(store, self.bias))
    }

    pub fn numel(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }
}

/// Stack of [`Linear`] layers with ReLU between them, and optionally after
/// the last one.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub final_relu: bool,
}

impl Mlp {
    /// `widths` lists every layer boundary, input first.
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], final_relu: bool, rng: &mut impl Rng) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least one layer");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}/{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, final_relu }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, mut x: Var<'g>) -> Var<'g> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, store, x);
            if i < last || self.final_relu {
                x = x.relu();
            }
        }
        x
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn numel(&self) -> usize {
        self.layers.iter().map(Linear::numel).sum()
    }
}

/// 2-D convolution over `[B, C, H, W]` with square kernels and zero padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.add_uniform(format!("{name}/weight"), &[fan_in, out_channels], fan_in, rng);
        let bias = store.add_uniform(format!("{name}/bias"), &[out_channels], fan_in, rng);
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Var<'g> {
        let shape = x.shape();
        assert_eq!(shape.len(), 4, "conv expects [B, C, H, W]");
        assert_eq!(shape[1], self.in_channels, "conv input channels");
        let (b, h, w) = (shape[0], shape[2], shape[3]);
        let ho = (h + 2 * self.pad - self.kernel) / self.stride + 1;
        let wo = (w + 2 * self.pad - self.kernel) / self.stride + 1;
        let y = if self.kernel == 1 && self.stride == 1 && self.pad == 0 {
            x.permute(&[0, 2, 3, 1]).reshape(&[b * h * w, self.in_channels])
        } else {
            x.im2col(self.kernel, self.stride, self.pad)
        };
        y.matmul(g.param(store, self.weight))
            .add_bias(g.param(store, self.bias))
            .reshape(&[b, ho, wo, self.out_channels])
            .permute(&[0, 3, 1, 2])
    }

    pub fn numel(&self) -> usize {
        self.in_channels * self.kernel * self.kernel * self.out_channels + self.out_channels
    }
}
