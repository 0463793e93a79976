//! Per-module contributions to the first-order decrease of the objective
//! loss under one SGD step.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::optim::{Optimizer, Sgd};
use crate::autograd::{Graph, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::fusion::{compute_losses, module_of, Model, ModelInput};
use crate::tasks::{train_with, Checkpoint, OptimizerKind, TaskData};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleFlow {
    pub module: String,
    /// `Σ (∂L/∂θ)·(∂L_obj/∂θ)` over the module's parameters.
    pub value: f64,
    /// `value / total`; `None` when the total is zero.
    pub fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientFlowRecord {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    /// Modules in name order.
    pub modules: Vec<ModuleFlow>,
}

impl GradientFlowRecord {
    /// First-order prediction of the objective decrease, `η⟨∇L, ∇L_obj⟩`.
    pub fn predicted_decrease(&self) -> f64 {
        self.lr * self.total
    }

    pub fn fraction_sum(&self) -> Option<f64> {
        self.modules.iter().map(|m| m.fraction).sum()
    }
}

fn require_sgd(optimizer: OptimizerKind) -> Result<()> {
    if optimizer != OptimizerKind::Sgd {
        return Err(Error::Config(
            "gradient flow requires SGD: the first-order estimate does not hold for adaptive optimizers".into(),
        ));
    }
    Ok(())
}

/// Total and objective gradients on one batch, with the objective value.
pub fn loss_gradients(
    model: &Model,
    store: &ParamStore,
    input: &ModelInput,
    targets: &[Option<usize>],
) -> Result<(Vec<Tensor>, Vec<Tensor>, f64)> {
    let g = Graph::new();
    let pred = model.forward(&g, store, input)?;
    let losses = compute_losses(&pred, targets, &model.fusion);
    let total = g.backward(losses.total).for_params(store);
    let objective = g.backward(losses.objective).for_params(store);
    Ok((total, objective, losses.objective.value().item()))
}

/// Computes ∇L and ∇L_obj on a batch and reduces their inner product per
/// module. Parameters are left untouched.
pub fn gradient_flow_probe(
    model: &Model,
    store: &ParamStore,
    input: &ModelInput,
    targets: &[Option<usize>],
    optimizer: OptimizerKind,
    lr: f64,
    step: usize,
) -> Result<GradientFlowRecord> {
    require_sgd(optimizer)?;
    let (total_grad, obj_grad, _) = loss_gradients(model, store, input, targets)?;
    let mut per: BTreeMap<String, f64> = BTreeMap::new();
    for ((_, name, _), (a, b)) in store.iter().zip(total_grad.iter().zip(&obj_grad)) {
        let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
        *per.entry(module_of(name).to_string()).or_insert(0.0) += dot;
    }
    let total: f64 = per.values().sum();
    let modules = per
        .into_iter()
        .map(|(module, value)| ModuleFlow {
            module,
            value,
            fraction: (total != 0.0).then(|| value / total),
        })
        .collect();
    Ok(GradientFlowRecord {
        step,
        lr,
        total,
        modules,
    })
}

/// Objective decrease actually obtained by one SGD step of size `lr` on
/// the total loss.
pub fn measured_decrease(
    model: &Model,
    store: &ParamStore,
    input: &ModelInput,
    targets: &[Option<usize>],
    lr: f64,
) -> Result<f64> {
    let (total_grad, _, before) = loss_gradients(model, store, input, targets)?;
    let mut moved = store.clone();
    Sgd.step(&mut moved, &total_grad, lr);
    let g = Graph::new();
    let pred = model.forward(&g, &moved, input)?;
    let after = compute_losses(&pred, targets, &model.fusion).objective.value().item();
    Ok(before - after)
}

/// Trains a checkpoint with SGD and probes every `every`-th step before
/// its update.
pub fn train_with_flow(
    model: &Model,
    state: Checkpoint,
    data: &TaskData,
    every: usize,
) -> Result<(Checkpoint, Vec<GradientFlowRecord>)> {
    require_sgd(state.train.optimizer)?;
    let every = every.max(1);
    let mut records = Vec::new();
    let done = train_with(model, state, data, &mut |ctx| {
        if ctx.step % every == 0 {
            records.push(gradient_flow_probe(
                ctx.model,
                ctx.params,
                ctx.input,
                ctx.targets,
                OptimizerKind::Sgd,
                ctx.lr,
                ctx.step,
            )?);
        }
        Ok(())
    })?;
    Ok((done, records))
}
