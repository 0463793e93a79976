//! Small U-TAE: a per-date strided conv encoder, pixelwise L-TAE attention
//! at the coarsest level, attention up-sampled to every level, grouped
//! temporal averaging merged by 1×1 convs, and a U-Net style decoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::AttentionMaps;
use super::ltae::{Ltae, LtaeConfig};
use crate::autograd::nn::Conv2d;
use crate::autograd::{concat, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtaeConfig {
    pub in_channels: usize,
    /// Channel width per level; the number of levels is `widths.len()`.
    pub widths: Vec<usize>,
    pub heads: usize,
    pub key_width: usize,
    pub period: f64,
}

impl UtaeConfig {
    pub fn new(in_channels: usize) -> Self {
        Self {
            in_channels,
            widths: vec![32, 64, 128],
            heads: 4,
            key_width: 8,
            period: 1000.0,
        }
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.widths.is_empty() || self.widths.contains(&0) || self.key_width == 0 {
            return Err(Error::Config("U-TAE widths must be positive".into()));
        }
        if self.heads == 0 || self.widths.iter().any(|w| w % self.heads != 0) {
            return Err(Error::Config(format!(
                "every U-TAE width must be divisible by {} heads",
                self.heads
            )));
        }
        Ok(())
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let f = 1 << self.levels();
        if height % f != 0 || width % f != 0 || height == 0 || width == 0 {
            return Err(Error::Invalid(format!(
                "U-TAE with {} levels needs sides divisible by {f}, got {height}x{width}",
                self.levels()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Utae {
    pub config: UtaeConfig,
    encoder: Vec<Conv2d>,
    ltae: Ltae,
    merge: Vec<Conv2d>,
    up: Vec<Conv2d>,
    decoder: Vec<Conv2d>,
    last: Conv2d,
}

/// All intermediate maps; vectors are indexed by level, finest first.
pub struct UtaeOutput<'g> {
    /// `e^l`: `[B*T, w_l, H_l, W_l]`.
    pub encoded: Vec<Var<'g>>,
    /// Attention-weighted temporal averages before the 1×1 merge, `[B, w_l, H_l, W_l]`.
    pub averaged: Vec<Var<'g>>,
    /// `f^l`.
    pub features: Vec<Var<'g>>,
    /// `d^l`; the coarsest entry is `f^L`.
    pub decoded: Vec<Var<'g>>,
    /// Full-resolution map `[B, w_1, H, W]`.
    pub output: Var<'g>,
    /// Attention `[B, G, T, H_l, W_l]` at every level.
    pub attention: Vec<Var<'g>>,
}

impl Utae {
    pub fn new(store: &mut ParamStore, name: &str, config: UtaeConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let w = &config.widths;
        let levels = w.len();
        let mut encoder = Vec::with_capacity(levels);
        let mut prev = config.in_channels;
        for (l, &wl) in w.iter().enumerate() {
            encoder.push(Conv2d::new(store, &format!("{name}/enc{}", l + 1), prev, wl, 3, 2, 1, rng));
            prev = wl;
        }
        let ltae = Ltae::new(
            store,
            &format!("{name}/ltae"),
            LtaeConfig {
                in_width: w[levels - 1],
                heads: config.heads,
                key_width: config.key_width,
                mlp: Vec::new(),
                period: config.period,
            },
            rng,
        )?;
        let merge = w
            .iter()
            .enumerate()
            .map(|(l, &wl)| Conv2d::new(store, &format!("{name}/merge{}", l + 1), wl, wl, 1, 1, 0, rng))
            .collect();
        let mut up = Vec::new();
        let mut decoder = Vec::new();
        for l in 0..levels - 1 {
            up.push(Conv2d::new(store, &format!("{name}/up{}", l + 1), w[l + 1], w[l], 3, 1, 1, rng));
            decoder.push(Conv2d::new(store, &format!("{name}/dec{}", l + 1), 2 * w[l], w[l], 3, 1, 1, rng));
        }
        let last = Conv2d::new(store, &format!("{name}/last"), w[0], w[0], 3, 1, 1, rng);
        Ok(Self {
            config,
            encoder,
            ltae,
            merge,
            up,
            decoder,
            last,
        })
    }

    pub fn out_width(&self) -> usize {
        self.config.widths[0]
    }

    /// `x: [B, T, C, H, W]`; `dates` and `mask` are `[B, T]` row-major.
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        x: Var<'g>,
        dates: &[i32],
        mask: &[bool],
    ) -> Result<UtaeOutput<'g>> {
        let s = x.shape();
        if s.len() != 5 || s[2] != self.config.in_channels {
            return Err(Error::Invalid(format!(
                "U-TAE expects [B, T, {}, H, W], got {s:?}",
                self.config.in_channels
            )));
        }
        let (b, t, c, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        self.config.check_input(h, w)?;
        if dates.len() != b * t || mask.len() != b * t {
            return Err(Error::Invalid("dates and mask must be [B, T]".into()));
        }
        if mask.chunks(t).any(|row| !row.iter().any(|&m| m)) {
            return Err(Error::Invalid("U-TAE received a fully masked sequence".into()));
        }
        let levels = self.config.levels();
        let heads = self.config.heads;

        let mut encoded = Vec::with_capacity(levels);
        let mut cur = x.reshape(&[b * t, c, h, w]);
        for conv in &self.encoder {
            cur = conv.forward(g, store, cur).relu();
            encoded.push(cur);
        }

        // pixelwise attention at the coarsest level
        let (hl, wl) = (h >> levels, w >> levels);
        let width = self.config.widths[levels - 1];
        let pixels = hl * wl;
        let seq = to_sequences(encoded[levels - 1], b, t);
        let mut pix_dates = Vec::with_capacity(b * pixels * t);
        let mut pix_mask = Vec::with_capacity(b * pixels * t);
        for bi in 0..b {
            for _ in 0..pixels {
                pix_dates.extend_from_slice(&dates[bi * t..(bi + 1) * t]);
                pix_mask.extend_from_slice(&mask[bi * t..(bi + 1) * t]);
            }
        }
        debug_assert_eq!(seq.shape(), vec![b * pixels, t, width]);
        let xp = self.ltae.encode_dates(g, seq, &pix_dates);
        let coarse = self
            .ltae
            .attention(g, store, xp, &pix_mask)
            .reshape(&[b, hl, wl, heads, t])
            .permute(&[0, 3, 4, 1, 2]);

        let mut attention = Vec::with_capacity(levels);
        let mut averaged = Vec::with_capacity(levels);
        let mut features = Vec::with_capacity(levels);
        for l in 0..levels {
            let (hh, ww) = (h >> (l + 1), w >> (l + 1));
            let a = if l + 1 == levels {
                coarse
            } else {
                coarse
                    .reshape(&[b, heads * t, hl, wl])
                    .upsample_bilinear(hh, ww)
                    .reshape(&[b, heads, t, hh, ww])
            };
            attention.push(a);
            let wl_ = self.config.widths[l];
            let weights = a.permute(&[0, 3, 4, 1, 2]).reshape(&[b * hh * ww, heads, t]);
            let avg = weights
                .grouped_attend(to_sequences(encoded[l], b, t))
                .reshape(&[b, hh, ww, wl_])
                .permute(&[0, 3, 1, 2]);
            averaged.push(avg);
            features.push(self.merge[l].forward(g, store, avg));
        }

        let mut decoded = vec![features[levels - 1]; levels];
        for l in (0..levels - 1).rev() {
            let (hh, ww) = (h >> (l + 1), w >> (l + 1));
            let up = self.up[l]
                .forward(g, store, decoded[l + 1].upsample_bilinear(hh, ww))
                .relu();
            decoded[l] = self.decoder[l]
                .forward(g, store, concat(&[up, features[l]], 1))
                .relu();
        }
        let output = self.last.forward(g, store, decoded[0].upsample_bilinear(h, w)).relu();
        Ok(UtaeOutput {
            encoded,
            averaged,
            features,
            decoded,
            output,
            attention,
        })
    }

    pub fn numel(&self) -> usize {
        let convs: usize = self
            .encoder
            .iter()
            .chain(&self.merge)
            .chain(&self.up)
            .chain(&self.decoder)
            .map(Conv2d::numel)
            .sum();
        convs + self.ltae.numel() + self.last.numel()
    }
}

/// `[B*T, C, H, W]` → `[B*H*W, T, C]`.
fn to_sequences(x: Var<'_>, b: usize, t: usize) -> Var<'_> {
    let s = x.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    x.reshape(&[b, t, c, h, w])
        .permute(&[0, 3, 4, 1, 2])
        .reshape(&[b * h * w, t, c])
}

/// Tensor-level wrapper returning `(f^l, d^l, d^0, attention per level)`.
pub fn utae_forward(
    utae: &Utae,
    store: &ParamStore,
    input: &Tensor,
    dates: &[i32],
    mask: &[bool],
) -> Result<(Vec<Tensor>, Vec<Tensor>, Tensor, Vec<AttentionMaps>)> {
    let g = Graph::new();
    let out = utae.forward(&g, store, g.constant(input.clone()), dates, mask)?;
    let val = |v: &Var<'_>| v.value().as_ref().clone();
    Ok((
        out.features.iter().map(val).collect(),
        out.decoded.iter().map(val).collect(),
        val(&out.output),
        out.attention
            .iter()
            .map(|a| AttentionMaps::new(val(a), mask.to_vec()))
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> (ParamStore, Utae) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = UtaeConfig {
            in_channels: 2,
            widths: vec![4, 8],
            heads: 2,
            key_width: 3,
            period: 1000.0,
        };
        let m = Utae::new(&mut store, "utae", cfg, &mut rng).unwrap();
        (store, m)
    }

    fn input(b: usize, t: usize) -> Tensor {
        Tensor::from_fn(&[b, t, 2, 8, 8], |i| ((i * 29 % 23) as f64 - 11.0) * 0.1)
    }

    #[test]
    fn output_shape_and_attention_normalized() {
        let (store, m) = model();
        let mask = [true, true, false, true, true, true];
        let (f, d, out, att) = utae_forward(&m, &store, &input(2, 3), &[5, 40, -1, 7, 50, 90], &mask).unwrap();
        assert_eq!(out.shape(), &[2, 4, 8, 8]);
        assert_eq!(f[0].shape(), &[2, 4, 4, 4]);
        assert_eq!(d[1].shape(), &[2, 8, 2, 2]);
        assert_eq!(att[0].weights.shape(), &[2, 2, 3, 4, 4]);
        for a in &att {
            assert!(a.max_normalization_error() < 1e-12);
            assert_eq!(a.max_masked_weight(), 0.0);
            assert!(a.min_weight() >= 0.0);
        }
    }

    #[test]
    fn constant_in_time_average_equals_frame() {
        let (store, m) = model();
        let frame = Tensor::from_fn(&[1, 1, 2, 8, 8], |i| (i as f64 * 0.3).cos());
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend_from_slice(frame.data());
        }
        let x = Tensor::new(vec![1, 4, 2, 8, 8], data);
        let g = Graph::new();
        let out = m.forward(&g, &store, g.constant(x), &[3, 60, 120, 250], &[true; 4]).unwrap();
        for l in 0..2 {
            let e = out.encoded[l].value();
            let per_frame = e.len() / 4;
            let avg = out.averaged[l].value();
            for (i, v) in avg.data().iter().enumerate() {
                assert!((v - e.data()[i]).abs() < 1e-12);
            }
            assert_eq!(avg.len(), per_frame);
        }
    }

    #[test]
    fn indivisible_size_is_error() {
        let (store, m) = model();
        let x = Tensor::zeros(&[1, 1, 2, 6, 8]);
        assert!(utae_forward(&m, &store, &x, &[1], &[true]).is_err());
    }
}
