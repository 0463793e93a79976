//! Lightweight temporal attention encoder.
//!
//! Each head owns a learned master query. Keys are a linear map of the
//! date-encoded inputs; head `g` averages its own group of input channels
//! with its attention weights, and the concatenated groups go through an
//! output MLP.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::AttentionMaps;
use super::pe::positional_encoding;
use crate::autograd::nn::{Linear, Mlp};
use crate::autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LtaeConfig {
    /// Input width `E`.
    pub in_width: usize,
    pub heads: usize,
    pub key_width: usize,
    /// Widths of the output MLP after the attended `E` features; empty
    /// means no output MLP.
    pub mlp: Vec<usize>,
    /// Base of the positional encoding frequencies.
    pub period: f64,
}

impl Default for LtaeConfig {
    fn default() -> Self {
        Self {
            in_width: 64,
            heads: 4,
            key_width: 8,
            mlp: vec![64],
            period: 1000.0,
        }
    }
}

impl LtaeConfig {
    pub fn with_width(in_width: usize) -> Self {
        Self {
            in_width,
            mlp: vec![in_width],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_width == 0 || self.heads == 0 || self.key_width == 0 || self.mlp.contains(&0) {
            return Err(Error::Config("L-TAE widths must be positive".into()));
        }
        if self.in_width % self.heads != 0 {
            return Err(Error::Config(format!(
                "L-TAE input width {} is not divisible by {} heads",
                self.in_width, self.heads
            )));
        }
        Ok(())
    }

    pub fn out_width(&self) -> usize {
        self.mlp.last().copied().unwrap_or(self.in_width)
    }
}

#[derive(Clone, Debug)]
pub struct Ltae {
    pub config: LtaeConfig,
    keys: Linear,
    query: ParamId,
    mlp: Option<Mlp>,
}

/// Result of a batched L-TAE pass.
pub struct LtaeOutput<'g> {
    /// `[N, out_width]`.
    pub embedding: Var<'g>,
    /// `[N, G, T]`.
    pub attention: Var<'g>,
}

impl Ltae {
    pub fn new(store: &mut ParamStore, name: &str, config: LtaeConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let keys = Linear::new(
            store,
            &format!("{name}/keys"),
            config.in_width,
            config.heads * config.key_width,
            rng,
        );
        let query = store.add_uniform(
            format!("{name}/query"),
            &[config.heads, config.key_width],
            config.key_width,
            rng,
        );
        let mlp = if config.mlp.is_empty() {
            None
        } else {
            let mut widths = vec![config.in_width];
            widths.extend(&config.mlp);
            Some(Mlp::new(store, &format!("{name}/mlp"), &widths, true, rng))
        };
        Ok(Self {
            config,
            keys,
            query,
            mlp,
        })
    }

    /// Adds the date encoding (width `E/G`, tiled over heads) to `x: [N, T, E]`.
    pub fn encode_dates<'g>(&self, g: &'g Graph, x: Var<'g>, dates: &[i32]) -> Var<'g> {
        let shape = x.shape();
        let (n, t, e) = (shape[0], shape[1], shape[2]);
        assert_eq!(dates.len(), n * t, "one date per sequence step");
        let d = e / self.config.heads;
        let pe = positional_encoding(dates, d, self.config.period);
        let mut tiled = Vec::with_capacity(n * t * e);
        for row in pe.data().chunks(d) {
            for _ in 0..self.config.heads {
                tiled.extend_from_slice(row);
            }
        }
        x.add(g.constant(Tensor::new(vec![n, t, e], tiled)))
    }

    /// Attention weights `[N, G, T]` of date-encoded inputs `xp: [N, T, E]`.
    pub fn attention<'g>(&self, g: &'g Graph, store: &ParamStore, xp: Var<'g>, mask: &[bool]) -> Var<'g> {
        let shape = xp.shape();
        let (n, t, e) = (shape[0], shape[1], shape[2]);
        let keys = self
            .keys
            .forward(g, store, xp.reshape(&[n * t, e]))
            .reshape(&[n, t, self.config.heads * self.config.key_width]);
        keys.head_scores(g.param(store, self.query)).masked_softmax(mask)
    }

    /// `x: [N, T, E]`, `dates` and `mask` of length `N*T`.
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        x: Var<'g>,
        dates: &[i32],
        mask: &[bool],
    ) -> Result<LtaeOutput<'g>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != self.config.in_width {
            return Err(Error::Invalid(format!(
                "L-TAE expects [N, T, {}], got {shape:?}",
                self.config.in_width
            )));
        }
        let t = shape[1];
        if t == 0 || mask.chunks(t).any(|row| !row.iter().any(|&m| m)) {
            return Err(Error::Invalid("L-TAE received a fully masked sequence".into()));
        }
        let xp = self.encode_dates(g, x, dates);
        let attention = self.attention(g, store, xp, mask);
        let pooled = attention.grouped_attend(xp);
        let embedding = match &self.mlp {
            Some(mlp) => mlp.forward(g, store, pooled),
            None => pooled,
        };
        Ok(LtaeOutput { embedding, attention })
    }

    pub fn numel(&self) -> usize {
        self.keys.numel() + self.config.heads * self.config.key_width + self.mlp.as_ref().map_or(0, Mlp::numel)
    }
}

/// Single-sequence convenience wrapper: `sequence: T × E`.
pub fn ltae_forward(
    ltae: &Ltae,
    store: &ParamStore,
    sequence: &Tensor,
    dates: &[i32],
    mask: &[bool],
) -> Result<(Tensor, AttentionMaps)> {
    if sequence.rank() != 2 {
        return Err(Error::Invalid("sequence must be T x E".into()));
    }
    let (t, e) = (sequence.shape()[0], sequence.shape()[1]);
    let g = Graph::new();
    let x = g.constant(sequence.clone().reshaped(&[1, t, e]));
    let out = ltae.forward(&g, store, x, dates, mask)?;
    let emb = out.embedding.value().as_ref().clone();
    let width = emb.len();
    let attn = AttentionMaps::new(out.attention.value().as_ref().clone(), mask.to_vec());
    Ok((emb.reshaped(&[width]), attn))
}
