//! Pixel-Set Encoder: a shared per-pixel MLP, (mean, std) pooling over a
//! random pixel set, and an output MLP. Geometric features are left out.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::nn::Mlp;
use crate::autograd::{Graph, ParamStore, Tensor, Var};
use crate::datamodel::ModalitySeries;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelSetConfig {
    pub sample_size: usize,
    pub in_channels: usize,
    /// Per-pixel MLP widths after the input channels.
    pub pixel_mlp: Vec<usize>,
    /// Output MLP widths after the pooled statistics.
    pub output_mlp: Vec<usize>,
}

impl PixelSetConfig {
    pub fn new(in_channels: usize) -> Self {
        Self {
            sample_size: 32,
            in_channels,
            pixel_mlp: vec![32, 64],
            output_mlp: vec![64],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_size == 0
            || self.in_channels == 0
            || self.pixel_mlp.is_empty()
            || self.output_mlp.is_empty()
            || self.pixel_mlp.contains(&0)
            || self.output_mlp.contains(&0)
        {
            return Err(Error::Config("pixel-set encoder widths must be positive".into()));
        }
        Ok(())
    }

    pub fn out_width(&self) -> usize {
        *self.output_mlp.last().expect("validated")
    }
}

#[derive(Clone, Debug)]
pub struct PixelSetEncoder {
    pub config: PixelSetConfig,
    pixel: Mlp,
    output: Mlp,
}

impl PixelSetEncoder {
    pub fn new(store: &mut ParamStore, name: &str, config: PixelSetConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut w1 = vec![config.in_channels];
        w1.extend(&config.pixel_mlp);
        let pixel = Mlp::new(store, &format!("{name}/pixel"), &w1, true, rng);
        let mut w2 = vec![2 * pixel.out_width()];
        w2.extend(&config.output_mlp);
        let output = Mlp::new(store, &format!("{name}/output"), &w2, true, rng);
        Ok(Self { config, pixel, output })
    }

    /// `sets: [N, S, C]` → `[N, F]`.
    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, sets: Var<'g>) -> Var<'g> {
        let shape = sets.shape();
        assert_eq!(shape.len(), 3, "pixel sets are [N, S, C]");
        let (n, s, c) = (shape[0], shape[1], shape[2]);
        let h = self
            .pixel
            .forward(g, store, sets.reshape(&[n * s, c]))
            .reshape(&[n, s, self.pixel.out_width()]);
        self.output.forward(g, store, h.mean_std_pool())
    }

    pub fn numel(&self) -> usize {
        self.pixel.numel() + self.output.numel()
    }
}

/// Draws `s` pixels with replacement from an instance.
pub fn sample_pixels(instance: &[usize], s: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if instance.is_empty() {
        return Err(Error::Invalid("cannot sample pixels from an empty instance".into()));
    }
    Ok((0..s).map(|_| instance[rng.gen_range(0..instance.len())]).collect())
}

/// Gathers `[T, S, C]` from a `[T, C, P]` frame stack.
pub fn gather_pixel_set(frames: &[f64], t: usize, c: usize, p: usize, pixels: &[usize]) -> Tensor {
    assert_eq!(frames.len(), t * c * p);
    let s = pixels.len();
    let mut out = Vec::with_capacity(t * s * c);
    for ti in 0..t {
        for &px in pixels {
            for ci in 0..c {
                out.push(frames[(ti * c + ci) * p + px]);
            }
        }
    }
    Tensor::new(vec![t, s, c], out)
}

/// Encodes every date of one parcel: `T_m × F_m`. `instance` lists the
/// parcel's flat pixel indices; the same pixel sample is used on all dates.
pub fn pse_forward(
    encoder: &PixelSetEncoder,
    store: &ParamStore,
    series: &ModalitySeries,
    instance: &[usize],
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let [t, c, h, w] = series.shape();
    if c != encoder.config.in_channels {
        return Err(Error::Invalid(format!(
            "series has {c} channels, encoder expects {}",
            encoder.config.in_channels
        )));
    }
    if let Some(&bad) = instance.iter().find(|&&px| px >= h * w) {
        return Err(Error::Invalid(format!("pixel {bad} outside a {h}x{w} raster")));
    }
    let pixels = sample_pixels(instance, encoder.config.sample_size, rng)?;
    let frames: Vec<f64> = series.data().iter().map(|&v| f64::from(v)).collect();
    let g = Graph::new();
    let sets = g.constant(gather_pixel_set(&frames, t, c, h * w, &pixels));
    Ok(encoder.forward(&g, store, sets).value().as_ref().clone())
}
