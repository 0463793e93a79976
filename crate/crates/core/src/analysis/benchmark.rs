//! The model × enhancement matrix behind the parcel classification table.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ablation::parallel_map;
use crate::error::{Error, Result};
use crate::fusion::{check_combination, EncoderConfig, FusionConfig, Scheme, Task};
use crate::metrics::MetricReport;
use crate::tasks::{evaluate, train, Checkpoint, TaskData, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Base,
    Tdrop,
    Aux,
    AuxTdrop,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Base, Variant::Tdrop, Variant::Aux, Variant::AuxTdrop];

    pub fn aux(self) -> bool {
        matches!(self, Variant::Aux | Variant::AuxTdrop)
    }

    pub fn tdrop(self) -> bool {
        matches!(self, Variant::Tdrop | Variant::AuxTdrop)
    }

    /// `base` with this variant's enhancements switched on.
    pub fn apply(self, base: &FusionConfig, scheme: Scheme) -> FusionConfig {
        FusionConfig {
            scheme,
            aux: self.aux(),
            temporal_dropout: self.tdrop(),
            ..base.clone()
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Base => "base",
            Variant::Tdrop => "tdrop",
            Variant::Aux => "aux",
            Variant::AuxTdrop => "aux_tdrop",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}' (expected base, tdrop, aux or aux_tdrop)")))
    }
}

/// Table rows: the three unimodal models, then the fusion schemes.
pub fn benchmark_models(modalities: usize) -> Vec<Scheme> {
    let mut out: Vec<Scheme> = (0..modalities).map(Scheme::Single).collect();
    out.extend([Scheme::Early, Scheme::Mid, Scheme::Late, Scheme::Decision]);
    out
}

/// Every legal `(model, variant)` cell among `variants`.
pub fn benchmark_plan(task: Task, models: &[Scheme], variants: &[Variant]) -> Vec<(Scheme, Variant)> {
    let mut out = Vec::new();
    for &m in models {
        for &v in variants {
            if check_combination(m, task, v.aux()).is_ok() {
                out.push((m, v));
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkEntry {
    pub model: Scheme,
    pub variant: Variant,
    pub params: usize,
    pub overall_accuracy: f64,
    pub miou: f64,
}

/// Trains and evaluates each cell. Cells run on up to `jobs` threads;
/// each result depends only on its own configuration.
pub fn run_benchmark(
    data: &TaskData,
    encoders: &EncoderConfig,
    fusion: &FusionConfig,
    train_cfg: &TrainConfig,
    cells: &[(Scheme, Variant)],
    jobs: usize,
) -> Result<Vec<(BenchmarkEntry, Checkpoint, MetricReport)>> {
    parallel_map(cells, jobs, |&(model, variant)| {
        let f = variant.apply(fusion, model);
        let (m, state) = Checkpoint::init(encoders, &f, train_cfg)?;
        let done = train(&m, state, data)?;
        let report = evaluate(&done, data, train_cfg.test_fold)?;
        Ok((
            BenchmarkEntry {
                model,
                variant,
                params: done.params.numel(),
                overall_accuracy: report.overall_accuracy,
                miou: report.miou,
            },
            done,
            report,
        ))
    })
    .into_iter()
    .collect()
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

/// One row per model: OA and mIoU of the base variant, mIoU of the other
/// variants, and parameter counts without and with auxiliary heads. Cells
/// that were not run or do not apply hold `-`.
pub fn benchmark_csv(entries: &[BenchmarkEntry]) -> String {
    let mut out = String::from("model,base_oa,base_miou,tdrop_miou,aux_miou,aux_tdrop_miou,params,params_aux\n");
    let mut models: Vec<Scheme> = Vec::new();
    for e in entries {
        if !models.contains(&e.model) {
            models.push(e.model);
        }
    }
    for m in models {
        let cell = |v: Variant| entries.iter().find(|e| e.model == m && e.variant == v);
        let dash = || "-".to_string();
        let base = cell(Variant::Base);
        let with_aux = cell(Variant::Aux).or(cell(Variant::AuxTdrop));
        let row = [
            m.to_string(),
            base.map_or_else(dash, |e| pct(e.overall_accuracy)),
            base.map_or_else(dash, |e| pct(e.miou)),
            cell(Variant::Tdrop).map_or_else(dash, |e| pct(e.miou)),
            cell(Variant::Aux).map_or_else(dash, |e| pct(e.miou)),
            cell(Variant::AuxTdrop).map_or_else(dash, |e| pct(e.miou)),
            cell(Variant::Base)
                .or(cell(Variant::Tdrop))
                .map_or_else(dash, |e| e.params.to_string()),
            with_aux.map_or_else(dash, |e| e.params.to_string()),
        ];
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
