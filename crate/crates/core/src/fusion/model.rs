//! Composition of encoders, fusion operators and heads into trainable models.

use std::collections::BTreeMap;

use rand::Rng;

use super::config::{EncoderConfig, FusionConfig, Scheme, Task};
use super::input::{early_fuse, ModelInput, SeqBatch};
use super::ops::{decision_fuse, late_fuse, mid_fuse};
use crate::autograd::nn::{Conv2d, Mlp};
use crate::autograd::{weighted_sum, Graph, ParamStore, Tensor, Var};
use crate::datamodel::modality_name;
use crate::encoders::{Ltae, LtaeConfig, PixelSetConfig, PixelSetEncoder, Utae, UtaeConfig};
use crate::error::{Error, Result};
use crate::rng::stream;

/// A decoder producing class scores: a 2-layer MLP for parcels, a 2-layer
/// 1×1 convolution for pixels.
#[derive(Clone, Debug)]
pub enum Head {
    Mlp(Mlp),
    Conv(Conv2d, Conv2d),
}

impl Head {
    pub fn classification(store: &mut ParamStore, name: &str, input: usize, hidden: usize, classes: usize, rng: &mut impl Rng) -> Self {
        Head::Mlp(Mlp::new(store, name, &[input, hidden, classes], false, rng))
    }

    pub fn segmentation(store: &mut ParamStore, name: &str, input: usize, hidden: usize, classes: usize, rng: &mut impl Rng) -> Self {
        Head::Conv(
            Conv2d::new(store, &format!("{name}/conv1"), input, hidden, 1, 1, 0, rng),
            Conv2d::new(store, &format!("{name}/conv2"), hidden, classes, 1, 1, 0, rng),
        )
    }

    /// `[N, F]` → `[N, K]`, or `[B, C, H, W]` → `[B·H·W, K+1]` (pixels row-major).
    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Var<'g> {
        match self {
            Head::Mlp(mlp) => mlp.forward(g, store, x),
            Head::Conv(a, b) => {
                let s = x.shape();
                let y = b.forward(g, store, a.forward(g, store, x).relu());
                y.permute(&[0, 2, 3, 1]).reshape(&[s[0] * s[2] * s[3], b.out_channels])
            }
        }
    }

    pub fn numel(&self) -> usize {
        match self {
            Head::Mlp(m) => m.numel(),
            Head::Conv(a, b) => a.numel() + b.numel(),
        }
    }
}

#[derive(Clone, Debug)]
enum Encoder {
    Parcel { pse: PixelSetEncoder, ltae: Option<Ltae> },
    Pixel(Utae),
}

#[derive(Clone, Debug)]
struct Branch {
    /// `None` for the early-fused input.
    modality: Option<usize>,
    encoder: Encoder,
    head: Option<Head>,
}

/// Model output. Rows are parcels or pixels.
pub struct Prediction<'g> {
    /// `[R, K]` scores (log-probabilities for decision fusion).
    pub logits: Var<'g>,
    /// Per-modality scores when auxiliary supervision is on.
    pub aux: Vec<Var<'g>>,
    pub aux_modalities: Vec<usize>,
}

pub struct LossBreakdown<'g> {
    pub objective: Var<'g>,
    pub aux: Vec<Var<'g>>,
    pub total: Var<'g>,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossValues {
    pub objective: f64,
    pub aux: Vec<f64>,
    pub total: f64,
}

impl LossBreakdown<'_> {
    pub fn values(&self) -> LossValues {
        LossValues {
            objective: self.objective.value().item(),
            aux: self.aux.iter().map(|a| a.value().item()).collect(),
            total: self.total.value().item(),
        }
    }
}

/// Cross-entropy objective plus `λ^m`-weighted auxiliary terms.
pub fn compute_losses<'g>(pred: &Prediction<'g>, targets: &[Option<usize>], fusion: &FusionConfig) -> LossBreakdown<'g> {
    let objective = pred.logits.cross_entropy(targets);
    let aux: Vec<Var<'g>> = pred.aux.iter().map(|a| a.cross_entropy(targets)).collect();
    let mut terms = vec![(1.0, objective)];
    for (&m, &a) in pred.aux_modalities.iter().zip(&aux) {
        terms.push((fusion.lambda.get(m).copied().unwrap_or(0.0), a));
    }
    LossBreakdown {
        objective,
        aux,
        total: weighted_sum(&terms),
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub task: Task,
    pub fusion: FusionConfig,
    pub encoders: EncoderConfig,
    branches: Vec<Branch>,
    shared_temporal: Option<Ltae>,
    aux_temporal: Vec<Ltae>,
    decoder: Option<Head>,
    aux_heads: Vec<Head>,
}

/// Module of a parameter for gradient-flow reporting: the name up to the first `/`.
pub fn module_of(param: &str) -> &str {
    param.split('/').next().unwrap_or(param)
}

/// Parameter count per module, in name order.
pub fn module_sizes(store: &ParamStore) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for (_, name, value) in store.iter() {
        *out.entry(module_of(name).to_string()).or_insert(0) += value.len();
    }
    out
}

fn suffix(modality: Option<usize>) -> String {
    modality.map_or_else(String::new, |m| format!("-{}", modality_name(m)))
}

/// Builds the model for `(scheme, task)` and initializes its parameters from `seed`.
pub fn build_model(task: Task, encoders: &EncoderConfig, fusion: &FusionConfig, seed: u64) -> Result<(Model, ParamStore)> {
    encoders.validate()?;
    let m = encoders.modalities();
    fusion.validate(task, m)?;
    let mut rng = stream(seed, "init", 0);
    let mut store = ParamStore::new();
    let k = match task {
        Task::Parcel => encoders.num_classes,
        Task::Semantic => encoders.num_classes + 1,
    };
    let ltae_cfg = || LtaeConfig {
        in_width: encoders.embed_width,
        heads: encoders.heads,
        key_width: encoders.key_width,
        mlp: encoders.temporal_mlp.clone(),
        period: encoders.period,
    };
    let new_head = |store: &mut ParamStore, name: &str, input: usize, rng: &mut rand_chacha::ChaCha8Rng| match task {
        Task::Parcel => Head::classification(store, name, input, encoders.decoder_hidden, k, rng),
        Task::Semantic => Head::segmentation(store, name, input, encoders.seg_hidden, k, rng),
    };
    let scheme = fusion.scheme;
    let sources: Vec<Option<usize>> = match scheme {
        Scheme::Single(s) => vec![Some(s)],
        Scheme::Early => vec![None],
        _ => (0..m).map(Some).collect(),
    };
    let mut branches = Vec::new();
    for &src in &sources {
        let channels = src.map_or_else(|| encoders.channels.iter().sum(), |s| encoders.channels[s]);
        let sfx = suffix(src);
        let encoder = match task {
            Task::Parcel => {
                let pse_cfg = PixelSetConfig {
                    sample_size: encoders.sample_size,
                    in_channels: channels,
                    pixel_mlp: encoders.pixel_mlp.clone(),
                    output_mlp: vec![encoders.embed_width],
                };
                let pse = PixelSetEncoder::new(&mut store, &format!("PSE{sfx}"), pse_cfg, &mut rng)?;
                let ltae = if scheme == Scheme::Mid {
                    None
                } else {
                    Some(Ltae::new(&mut store, &format!("LTAE{sfx}"), ltae_cfg(), &mut rng)?)
                };
                Encoder::Parcel { pse, ltae }
            }
            Task::Semantic => {
                let cfg = UtaeConfig {
                    in_channels: channels,
                    widths: encoders.utae_widths.clone(),
                    heads: encoders.heads,
                    key_width: encoders.key_width,
                    period: encoders.period,
                };
                Encoder::Pixel(Utae::new(&mut store, &format!("UTAE{sfx}"), cfg, &mut rng)?)
            }
        };
        let head = if scheme == Scheme::Decision {
            let width = branch_width(task, encoders);
            Some(new_head(&mut store, &format!("Decoder{sfx}"), width, &mut rng))
        } else {
            None
        };
        branches.push(Branch {
            modality: src,
            encoder,
            head,
        });
    }
    let shared_temporal = if scheme == Scheme::Mid {
        Some(Ltae::new(&mut store, "LTAE", ltae_cfg(), &mut rng)?)
    } else {
        None
    };
    let decoder = match scheme {
        Scheme::Decision => None,
        Scheme::Late => Some(new_head(&mut store, "Decoder", m * branch_width(task, encoders), &mut rng)),
        _ => Some(new_head(&mut store, "Decoder", branch_width(task, encoders), &mut rng)),
    };
    let mut aux_temporal = Vec::new();
    let mut aux_heads = Vec::new();
    if fusion.aux {
        for mi in 0..m {
            let sfx = suffix(Some(mi));
            match scheme {
                Scheme::Mid => {
                    aux_temporal.push(Ltae::new(&mut store, &format!("LTAE{sfx}"), ltae_cfg(), &mut rng)?);
                    aux_heads.push(new_head(&mut store, &format!("Decoder{sfx}"), encoders.temporal_width(), &mut rng));
                }
                Scheme::Late => {
                    aux_heads.push(new_head(&mut store, &format!("Decoder{sfx}"), branch_width(task, encoders), &mut rng));
                }
                _ => {}
            }
        }
    }
    Ok((
        Model {
            task,
            fusion: fusion.clone(),
            encoders: encoders.clone(),
            branches,
            shared_temporal,
            aux_temporal,
            decoder,
            aux_heads,
        },
        store,
    ))
}

fn branch_width(task: Task, encoders: &EncoderConfig) -> usize {
    match task {
        Task::Parcel => encoders.temporal_width(),
        Task::Semantic => encoders.utae_widths[0],
    }
}

/// Runs the pixel-set encoder on usable frames only; masked slots get zero rows.
fn pse_sequence<'g>(g: &'g Graph, store: &ParamStore, pse: &PixelSetEncoder, x: &SeqBatch) -> Var<'g> {
    let p = x.pixels();
    let mut rows = Vec::new();
    let mut index = Vec::with_capacity(x.n * x.t);
    for slot in 0..x.n * x.t {
        if x.mask[slot] {
            index.push(Some(rows.len()));
            rows.push(slot);
        } else {
            index.push(None);
        }
    }
    let mut sets = Vec::with_capacity(rows.len() * p * x.c);
    for &slot in &rows {
        let frame = &x.data[slot * x.frame_len()..(slot + 1) * x.frame_len()];
        for s in 0..p {
            for c in 0..x.c {
                sets.push(frame[c * p + s]);
            }
        }
    }
    let width = pse.config.out_width();
    let feats = pse.forward(g, store, g.constant(Tensor::new(vec![rows.len(), p, x.c], sets)));
    feats.gather_rows(&index).reshape(&[x.n, x.t, width])
}

impl Model {
    pub fn scheme(&self) -> Scheme {
        self.fusion.scheme
    }

    pub fn num_outputs(&self) -> usize {
        match self.task {
            Task::Parcel => self.encoders.num_classes,
            Task::Semantic => self.encoders.num_classes + 1,
        }
    }

    /// Modalities the model reads.
    pub fn modalities(&self) -> Vec<usize> {
        match self.scheme() {
            Scheme::Single(m) => vec![m],
            _ => (0..self.encoders.modalities()).collect(),
        }
    }

    fn encode<'g>(&self, g: &'g Graph, store: &ParamStore, branch: &Branch, x: &SeqBatch) -> Result<Var<'g>> {
        match &branch.encoder {
            Encoder::Parcel { pse, ltae } => {
                let seq = pse_sequence(g, store, pse, x);
                let ltae = ltae.as_ref().expect("parcel branch with a temporal encoder");
                Ok(ltae.forward(g, store, seq, &x.dates, &x.mask)?.embedding)
            }
            Encoder::Pixel(utae) => {
                let input = Tensor::new(vec![x.n, x.t, x.c, x.height, x.width], x.data.clone());
                Ok(utae.forward(g, store, g.constant(input), &x.dates, &x.mask)?.output)
            }
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, input: &ModelInput) -> Result<Prediction<'g>> {
        let mut aux = Vec::new();
        let mut aux_modalities = Vec::new();
        let logits = match self.scheme() {
            Scheme::Single(m) => {
                let emb = self.encode(g, store, &self.branches[0], input.modality(m)?)?;
                self.main_decoder().forward(g, store, emb)
            }
            Scheme::Early => {
                let fused = early_fuse(input, self.fusion.interp_target)?;
                let emb = self.encode(g, store, &self.branches[0], &fused)?;
                self.main_decoder().forward(g, store, emb)
            }
            Scheme::Late => {
                let mut embs = Vec::with_capacity(self.branches.len());
                for b in &self.branches {
                    let m = b.modality.expect("late fusion branches are per modality");
                    embs.push(self.encode(g, store, b, input.modality(m)?)?);
                }
                for (m, head) in self.aux_heads.iter().enumerate() {
                    aux.push(head.forward(g, store, embs[m]));
                    aux_modalities.push(m);
                }
                self.main_decoder().forward(g, store, late_fuse(&embs))
            }
            Scheme::Mid => {
                let mut seqs = Vec::with_capacity(self.branches.len());
                let mut xs = Vec::with_capacity(self.branches.len());
                for b in &self.branches {
                    let m = b.modality.expect("mid fusion branches are per modality");
                    let x = input.modality(m)?;
                    let Encoder::Parcel { pse, .. } = &b.encoder else {
                        return Err(Error::Invalid("mid fusion needs parcel encoders".into()));
                    };
                    seqs.push(pse_sequence(g, store, pse, x));
                    xs.push(x);
                }
                let dates: Vec<&[i32]> = xs.iter().map(|x| x.dates.as_slice()).collect();
                let masks: Vec<&[bool]> = xs.iter().map(|x| x.mask.as_slice()).collect();
                let merged = mid_fuse(&seqs, &dates, &masks)?;
                let shared = self.shared_temporal.as_ref().expect("mid fusion temporal encoder");
                let emb = shared.forward(g, store, merged.sequence, &merged.dates, &merged.mask)?.embedding;
                for (m, (ltae, head)) in self.aux_temporal.iter().zip(&self.aux_heads).enumerate() {
                    let e = ltae.forward(g, store, seqs[m], dates[m], masks[m])?.embedding;
                    aux.push(head.forward(g, store, e));
                    aux_modalities.push(m);
                }
                self.main_decoder().forward(g, store, emb)
            }
            Scheme::Decision => {
                let mut outs = Vec::with_capacity(self.branches.len());
                for b in &self.branches {
                    let m = b.modality.expect("decision branches are per modality");
                    let emb = self.encode(g, store, b, input.modality(m)?)?;
                    outs.push(b.head.as_ref().expect("decision branch head").forward(g, store, emb));
                }
                let fused = decision_fuse(&outs)?;
                if self.fusion.aux {
                    aux_modalities = (0..outs.len()).collect();
                    aux = outs;
                }
                fused
            }
        };
        Ok(Prediction {
            logits,
            aux,
            aux_modalities,
        })
    }

    fn main_decoder(&self) -> &Head {
        self.decoder.as_ref().expect("scheme has a shared decoder")
    }

    /// Parameter count of the auxiliary heads and temporal encoders.
    pub fn aux_numel(&self) -> usize {
        self.aux_heads.iter().map(Head::numel).sum::<usize>() + self.aux_temporal.iter().map(Ltae::numel).sum::<usize>()
    }
}
