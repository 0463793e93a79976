//! Training, evaluation and checkpoints.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::TaskData;
use crate::autograd::optim::{Adam, LrSchedule, Optimizer, Sgd};
use crate::autograd::{Graph, ParamStore, Tensor};
use crate::encoders::{load_params, save_params};
use crate::error::{create_dir_all, read_json, write_json, Error, Result};
use crate::fusion::{build_model, compute_losses, temporal_dropout, EncoderConfig, FusionConfig, Model, ModelInput, Phase, Task};
use crate::metrics::{ConfusionMatrix, MetricReport};
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub task: Task,
    pub epochs: usize,
    /// Defaults to 128 parcels or 4 patches.
    pub batch_size: Option<usize>,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub betas: [f64; 2],
    pub schedule: LrSchedule,
    pub seed: u64,
    pub train_folds: Vec<usize>,
    pub test_fold: usize,
    /// Evaluate on the test fold after every epoch and keep it in the history.
    pub eval_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::Parcel,
            epochs: 20,
            batch_size: None,
            optimizer: OptimizerKind::Adam,
            lr: 0.001,
            betas: [0.9, 0.999],
            schedule: LrSchedule::Constant,
            seed: 0,
            train_folds: vec![1, 2, 3, 4],
            test_fold: 5,
            eval_each_epoch: false,
        }
    }
}

impl TrainConfig {
    pub fn batch(&self) -> usize {
        self.batch_size.unwrap_or(match self.task {
            Task::Parcel => 128,
            Task::Semantic => 4,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch() == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::Config("learning rate must be >= 0 and betas in [0, 1)".into()));
        }
        if self.train_folds.is_empty() || self.train_folds.contains(&self.test_fold) {
            return Err(Error::Config("train folds must be non-empty and exclude the test fold".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub overall_accuracy: f64,
    pub miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub objective: f64,
    pub aux: Vec<f64>,
    pub eval: Option<EvalSummary>,
}

#[derive(Clone, Debug)]
pub enum OptimizerState {
    Sgd,
    Adam(Adam),
}

impl OptimizerState {
    fn new(cfg: &TrainConfig, store: &ParamStore) -> Self {
        match cfg.optimizer {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Adam => OptimizerState::Adam(Adam::new(store, cfg.betas[0], cfg.betas[1])),
        }
    }

    fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) {
        match self {
            OptimizerState::Sgd => Sgd.step(store, grads, lr),
            OptimizerState::Adam(a) => a.step(store, grads, lr),
        }
    }
}

/// Trained parameters with everything needed to rebuild, evaluate or resume.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub encoders: EncoderConfig,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub params: ParamStore,
    pub optimizer: OptimizerState,
    pub history: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    encoders: EncoderConfig,
    fusion: FusionConfig,
    train: TrainConfig,
    epoch: usize,
    adam_step: Option<u64>,
}

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const HISTORY_FILE: &str = "history.json";

fn moments(store: &ParamStore, values: &[Tensor], prefix: &str) -> ParamStore {
    let mut out = ParamStore::new();
    for ((_, name, _), v) in store.iter().zip(values) {
        out.add(format!("{prefix}/{name}"), v.clone());
    }
    out
}

impl Checkpoint {
    /// Fresh, untrained state.
    pub fn init(encoders: &EncoderConfig, fusion: &FusionConfig, train: &TrainConfig) -> Result<(Model, Self)> {
        train.validate()?;
        let (model, params) = build_model(train.task, encoders, fusion, train.seed)?;
        let optimizer = OptimizerState::new(train, &params);
        Ok((
            model,
            Self {
                encoders: encoders.clone(),
                fusion: fusion.clone(),
                train: train.clone(),
                epoch: 0,
                params,
                optimizer,
                history: Vec::new(),
            },
        ))
    }

    pub fn model(&self) -> Result<Model> {
        Ok(build_model(self.train.task, &self.encoders, &self.fusion, self.train.seed)?.0)
    }

    /// Writes `dir/checkpoint/` and `dir/history.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let ck = dir.join(CHECKPOINT_DIR);
        create_dir_all(&ck)?;
        save_params(&self.params, &ck.join("params"))?;
        let adam_step = match &self.optimizer {
            OptimizerState::Sgd => None,
            OptimizerState::Adam(a) => {
                save_params(&moments(&self.params, &a.m, "m"), &ck.join("adam_m"))?;
                save_params(&moments(&self.params, &a.v, "v"), &ck.join("adam_v"))?;
                Some(a.step)
            }
        };
        write_json(
            &ck.join("meta.json"),
            &Meta {
                encoders: self.encoders.clone(),
                fusion: self.fusion.clone(),
                train: self.train.clone(),
                epoch: self.epoch,
                adam_step,
            },
        )?;
        write_json(&dir.join(HISTORY_FILE), &self.history)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ck = dir.join(CHECKPOINT_DIR);
        let meta: Meta = read_json(&ck.join("meta.json"))?;
        let (_, mut params) = build_model(meta.train.task, &meta.encoders, &meta.fusion, meta.train.seed)?;
        load_params(&mut params, &ck.join("params"))?;
        let optimizer = match (meta.train.optimizer, meta.adam_step) {
            (OptimizerKind::Sgd, _) => OptimizerState::Sgd,
            (OptimizerKind::Adam, step) => {
                let mut a = Adam::new(&params, meta.train.betas[0], meta.train.betas[1]);
                if let Some(step) = step {
                    let mut m = moments(&params, &a.m, "m");
                    let mut v = moments(&params, &a.v, "v");
                    load_params(&mut m, &ck.join("adam_m"))?;
                    load_params(&mut v, &ck.join("adam_v"))?;
                    a.m = m.iter().map(|(_, _, t)| t.clone()).collect();
                    a.v = v.iter().map(|(_, _, t)| t.clone()).collect();
                    a.step = step;
                }
                OptimizerState::Adam(a)
            }
        };
        let history = read_json(&dir.join(HISTORY_FILE))?;
        Ok(Self {
            encoders: meta.encoders,
            fusion: meta.fusion,
            train: meta.train,
            epoch: meta.epoch,
            params,
            optimizer,
            history,
        })
    }
}

/// What a training hook sees before each parameter update.
pub struct StepContext<'a> {
    pub epoch: usize,
    pub batch: usize,
    pub step: usize,
    pub lr: f64,
    pub model: &'a Model,
    pub params: &'a ParamStore,
    /// Input after temporal dropout.
    pub input: &'a ModelInput,
    pub targets: &'a [Option<usize>],
}

enum Items {
    Parcels(Vec<super::data::ParcelRef>),
    Patches(Vec<usize>),
}

impl Items {
    fn new(data: &TaskData, task: Task, patches: &[usize]) -> Self {
        match task {
            Task::Parcel => Items::Parcels(data.parcels(patches)),
            Task::Semantic => Items::Patches(patches.to_vec()),
        }
    }

    fn len(&self) -> usize {
        match self {
            Items::Parcels(p) => p.len(),
            Items::Patches(p) => p.len(),
        }
    }

    fn batch(&self, data: &TaskData, order: &[usize], sample_size: usize, rng: &mut impl Rng) -> Result<(ModelInput, Vec<Option<usize>>)> {
        match self {
            Items::Parcels(p) => {
                let refs: Vec<_> = order.iter().map(|&i| &p[i]).collect();
                data.parcel_batch(&refs, sample_size, rng)
            }
            Items::Patches(p) => {
                let ids: Vec<usize> = order.iter().map(|&i| p[i]).collect();
                data.patch_batch(&ids)
            }
        }
    }
}

/// Trains from `state.epoch` up to `state.train.epochs`, calling `hook`
/// before every update.
pub fn train_with(
    model: &Model,
    mut state: Checkpoint,
    data: &TaskData,
    hook: &mut dyn FnMut(&StepContext<'_>) -> Result<()>,
) -> Result<Checkpoint> {
    let cfg = state.train.clone();
    cfg.validate()?;
    let patches = data.patches(&cfg.train_folds);
    let items = Items::new(data, cfg.task, &patches);
    if items.len() == 0 {
        return Err(Error::Invalid(format!("training folds {:?} contain no items", cfg.train_folds)));
    }
    let p = state.fusion.effective_dropout();
    let batch = cfg.batch();
    let mut step = state.history.len() * items.len().div_ceil(batch);
    for epoch in state.epoch..cfg.epochs {
        let lr = cfg.schedule.rate(cfg.lr, epoch);
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut stream(cfg.seed, "shuffle", epoch as u64));
        let mut pixel_rng = stream(cfg.seed, "pixels", epoch as u64);
        let mut drop_rng = stream(cfg.seed, "dropout", epoch as u64);
        let (mut sum_total, mut sum_obj) = (0.0, 0.0);
        let mut sum_aux: Vec<f64> = Vec::new();
        let mut seen = 0usize;
        for (b, chunk) in order.chunks(batch).enumerate() {
            let (input, targets) = items.batch(data, chunk, model.encoders.sample_size, &mut pixel_rng)?;
            let input = temporal_dropout(&input, &p, &mut drop_rng, Phase::Train);
            hook(&StepContext {
                epoch,
                batch: b,
                step,
                lr,
                model,
                params: &state.params,
                input: &input,
                targets: &targets,
            })?;
            let g = Graph::new();
            let pred = model.forward(&g, &state.params, &input)?;
            let losses = compute_losses(&pred, &targets, &state.fusion);
            let v = losses.values();
            if !v.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    msg: format!("loss is {} (objective {}, aux {:?})", v.total, v.objective, v.aux),
                });
            }
            let grads = g.backward(losses.total).for_params(&state.params);
            if let Some((i, _)) = grads.iter().enumerate().find(|(_, t)| !t.all_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    msg: format!("non-finite gradient for {}", state.params.name(crate::autograd::ParamId(i))),
                });
            }
            drop(g);
            state.optimizer.step(&mut state.params, &grads, lr);
            let w = chunk.len() as f64;
            sum_total += v.total * w;
            sum_obj += v.objective * w;
            sum_aux.resize(v.aux.len(), 0.0);
            for (s, a) in sum_aux.iter_mut().zip(&v.aux) {
                *s += a * w;
            }
            seen += chunk.len();
            step += 1;
        }
        let n = seen as f64;
        state.epoch = epoch + 1;
        let eval = if cfg.eval_each_epoch {
            let r = evaluate_model(model, &state.params, data, &data.patches(&[cfg.test_fold]), batch, &mut |x| Ok(x))?;
            Some(EvalSummary {
                overall_accuracy: r.overall_accuracy,
                miou: r.miou,
            })
        } else {
            None
        };
        state.history.push(EpochRecord {
            epoch: epoch + 1,
            lr,
            loss: sum_total / n,
            objective: sum_obj / n,
            aux: sum_aux.iter().map(|s| s / n).collect(),
            eval,
        });
    }
    Ok(state)
}

pub fn train(model: &Model, state: Checkpoint, data: &TaskData) -> Result<Checkpoint> {
    train_with(model, state, data, &mut |_| Ok(()))
}

/// Class names of the model outputs.
pub fn output_names(data: &TaskData, task: Task) -> Vec<String> {
    let mut names = data.manifest.class_names.clone();
    if task == Task::Semantic {
        names.push("background".into());
    }
    names
}

fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| (0..k).fold(0, |best, j| if row[j] > row[best] { j } else { best }))
        .collect()
}

/// Evaluates on `patches` with every acquisition available, after applying
/// `transform` to each batch (identity for a plain evaluation).
pub fn evaluate_model(
    model: &Model,
    params: &ParamStore,
    data: &TaskData,
    patches: &[usize],
    batch: usize,
    transform: &mut dyn FnMut(ModelInput) -> Result<ModelInput>,
) -> Result<MetricReport> {
    if patches.is_empty() {
        return Err(Error::Invalid("cannot evaluate on an empty fold".into()));
    }
    let items = Items::new(data, model.task, patches);
    if items.len() == 0 {
        return Err(Error::Invalid("evaluation fold has no parcels".into()));
    }
    let mut cm = ConfusionMatrix::new(model.num_outputs());
    let mut pixel_rng = stream(0, "eval/pixels", 0);
    let order: Vec<usize> = (0..items.len()).collect();
    for chunk in order.chunks(batch.max(1)) {
        let (input, targets) = items.batch(data, chunk, model.encoders.sample_size, &mut pixel_rng)?;
        let input = transform(input)?;
        let g = Graph::new();
        let pred = model.forward(&g, params, &input)?;
        cm.update(&argmax_rows(&pred.logits.value()), &targets);
    }
    MetricReport::from_confusion(cm, &output_names(data, model.task))
}

/// Evaluates a checkpoint on one fold.
pub fn evaluate(checkpoint: &Checkpoint, data: &TaskData, fold: usize) -> Result<MetricReport> {
    let model = checkpoint.model()?;
    evaluate_model(
        &model,
        &checkpoint.params,
        data,
        &data.patches(&[fold]),
        checkpoint.train.batch(),
        &mut |x| Ok(x),
    )
}
