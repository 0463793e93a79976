//! Inference-time removal of optical acquisitions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::subsample_acquisitions;
use crate::metrics::MetricReport;
use crate::rng::stream;
use crate::tasks::{evaluate_model, Checkpoint, TaskData};

/// Modality whose acquisitions are removed.
pub const OPTICAL: usize = 0;

/// The default keep-ratio grid, `1.0, 0.9, …, 0.1`.
pub fn default_grid() -> Vec<f64> {
    (1..=10).rev().map(|i| i as f64 / 10.0).collect()
}

/// Evaluates `checkpoint` on `fold` keeping `⌈keep_ratio·T⌉` uniformly drawn
/// optical acquisitions per item; the radar series stay intact.
pub fn cloud_ablation(checkpoint: &Checkpoint, data: &TaskData, fold: usize, keep_ratio: f64, seed: u64) -> Result<MetricReport> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::Invalid(format!("keep ratio {keep_ratio} outside (0, 1]")));
    }
    let model = checkpoint.model()?;
    let mut rng = stream(seed, "ablation", keep_ratio.to_bits());
    evaluate_model(
        &model,
        &checkpoint.params,
        data,
        &data.patches(&[fold]),
        checkpoint.train.batch(),
        &mut |input| subsample_acquisitions(&input, OPTICAL, keep_ratio, &mut rng),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessPoint {
    pub ratio: f64,
    /// Subsampling seed of each repeat.
    pub seeds: Vec<u64>,
    pub miou: Vec<f64>,
    pub overall_accuracy: Vec<f64>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl RobustnessPoint {
    pub fn miou_stats(&self) -> (f64, f64) {
        mean_std(&self.miou)
    }

    pub fn oa_stats(&self) -> (f64, f64) {
        mean_std(&self.overall_accuracy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCurve {
    pub model: String,
    /// Descending keep ratios.
    pub points: Vec<RobustnessPoint>,
}

impl RobustnessCurve {
    pub fn at(&self, ratio: f64) -> Option<&RobustnessPoint> {
        self.points.iter().find(|p| (p.ratio - ratio).abs() < 1e-9)
    }
}

/// Seed of repeat `r`; the same seeds are used for every model so that all
/// curves see the same acquisitions removed.
pub fn repeat_seed(seed: u64, r: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(r as u64)
}

pub fn check_grid(grid: &[f64], repeats: usize) -> Result<()> {
    if grid.is_empty() || grid.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
        return Err(Error::Config("keep ratios must be non-empty and lie in (0, 1]".into()));
    }
    if grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config("keep ratios must be strictly descending".into()));
    }
    if repeats < 3 {
        return Err(Error::Config(format!("at least 3 repeats are needed, got {repeats}")));
    }
    Ok(())
}

/// Runs [`cloud_ablation`] for every model, ratio and repeat. Models are
/// evaluated on up to `jobs` threads.
pub fn robustness_curve(
    checkpoints: &[(String, Checkpoint)],
    data: &TaskData,
    fold: usize,
    grid: &[f64],
    repeats: usize,
    seed: u64,
    jobs: usize,
) -> Result<Vec<RobustnessCurve>> {
    check_grid(grid, repeats)?;
    let run = |ck: &Checkpoint| -> Result<Vec<RobustnessPoint>> {
        grid.iter()
            .map(|&ratio| {
                let mut p = RobustnessPoint {
                    ratio,
                    seeds: Vec::new(),
                    miou: Vec::new(),
                    overall_accuracy: Vec::new(),
                };
                for r in 0..repeats {
                    let s = repeat_seed(seed, r);
                    let report = cloud_ablation(ck, data, fold, ratio, s)?;
                    p.seeds.push(s);
                    p.miou.push(report.miou);
                    p.overall_accuracy.push(report.overall_accuracy);
                }
                Ok(p)
            })
            .collect()
    };
    let points = parallel_map(checkpoints, jobs, |(_, ck)| run(ck));
    checkpoints
        .iter()
        .zip(points)
        .map(|((name, _), p)| {
            Ok(RobustnessCurve {
                model: name.clone(),
                points: p?,
            })
        })
        .collect()
}

/// Maps `f` over `items` on at most `jobs` scoped threads, keeping order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut out: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let results = std::sync::Mutex::new(&mut out);
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                results.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    out.into_iter().map(|r| r.expect("every item is processed")).collect()
}
