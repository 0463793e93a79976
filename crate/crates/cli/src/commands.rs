use std::path::{Path, PathBuf};

use anyhow::Context;
use sha2::{Digest, Sha256};
use sits_fusion::analysis::{
    benchmark_csv, benchmark_models, benchmark_plan, check_grid, default_grid, report_emit, robustness_curve,
    robustness_summary_csv, run_benchmark, train_with_flow, Report, Variant, REPORT_JSON,
};
use sits_fusion::datamodel::MANIFEST_FILE;
use sits_fusion::fusion::Scheme;
use sits_fusion::synthgen::generate_dataset;
use sits_fusion::tasks::{self, evaluate, Checkpoint, OptimizerKind, CHECKPOINT_DIR};

use crate::config::{ExperimentConfig, CONFIG_FILE};
use crate::{ConfigArgs, Usage};

fn usage<T>(msg: impl Into<String>) -> anyhow::Result<T> {
    Err(Usage(msg.into()).into())
}

fn parse<T: std::str::FromStr<Err = sits_fusion::Error>>(s: &str) -> anyhow::Result<T> {
    s.parse().map_err(|e: sits_fusion::Error| Usage(e.to_string()).into())
}

/// Config file (or defaults) with flags applied on top, validated.
fn resolve(args: &ConfigArgs) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::read(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(d) = &args.dataset {
        cfg.dataset = Some(d.clone());
    }
    if let Some(o) = &args.out_root {
        cfg.out_dir = Some(o.clone());
    }
    if let Some(s) = args.seed {
        cfg.seed = Some(s);
    }
    if let Some(s) = &args.scheme {
        cfg.fusion.scheme = parse(s)?;
    }
    if let Some(t) = &args.task {
        cfg.train.task = parse(t)?;
    }
    cfg.fusion.aux |= args.aux;
    cfg.fusion.temporal_dropout |= args.tdrop;
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.train.lr = lr;
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = Some(b);
    }
    if let Some(o) = &args.optimizer {
        cfg.train.optimizer = match o.to_ascii_lowercase().as_str() {
            "adam" => OptimizerKind::Adam,
            "sgd" => OptimizerKind::Sgd,
            _ => return usage(format!("unknown optimizer '{o}' (expected adam or sgd)")),
        };
    }
    if let Some(n) = args.patches {
        cfg.synth.n_patches = n;
    }
    cfg.resolve()
}

fn is_nonempty_dir(path: &Path) -> bool {
    path.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Makes `dir` usable as a fresh output directory.
fn fresh_dir(dir: &Path, force: bool, hint: &str) -> anyhow::Result<()> {
    if is_nonempty_dir(dir) {
        if !force {
            return usage(format!("{} already exists; {hint}", dir.display()));
        }
        std::fs::remove_dir_all(dir).with_context(|| format!("removing {}", dir.display()))?;
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

pub fn synth(args: &ConfigArgs, out: Option<PathBuf>, force: bool) -> anyhow::Result<()> {
    let mut cfg = resolve(args)?;
    cfg.dataset = None;
    let cfg = cfg.resolve()?;
    let root = out.unwrap_or_else(|| cfg.out_root().join("dataset"));
    fresh_dir(&root, force, "pass --force to regenerate")?;
    let manifest = generate_dataset(&cfg.synth, &root)?;
    println!("wrote {} patches to {}", manifest.patch_ids.len(), root.display());
    println!("manifest sha256 {}", sha256_file(&root.join(MANIFEST_FILE))?);
    Ok(())
}

fn run_dir(cfg: &ExperimentConfig, run: Option<PathBuf>) -> PathBuf {
    run.unwrap_or_else(|| cfg.out_root().join(cfg.run_name()))
}

fn print_history(ck: &Checkpoint, from: usize) {
    for h in ck.history.iter().skip(from) {
        println!("epoch {:>3}  lr {:.2e}  loss {:.4}  objective {:.4}", h.epoch, h.lr, h.loss, h.objective);
    }
}

pub fn train(args: &ConfigArgs, run: Option<PathBuf>, resume: bool, force: bool) -> anyhow::Result<()> {
    let cfg = resolve(args)?;
    let dir = run_dir(&cfg, run);
    let existing = dir.join(CHECKPOINT_DIR).exists();
    let (model, state) = if resume {
        if !existing {
            return usage(format!("nothing to resume in {}", dir.display()));
        }
        let mut state = Checkpoint::load(&dir)?;
        if state.encoders != cfg.encoders || state.fusion != cfg.fusion || state.train.task != cfg.train.task {
            return usage("the config differs from the run being resumed in its model definition");
        }
        state.train.epochs = cfg.train.epochs;
        (state.model()?, state)
    } else {
        fresh_dir(&dir, force, "pass --resume to continue it or --force to replace it")?;
        Checkpoint::init(&cfg.encoders, &cfg.fusion, &cfg.train)?
    };
    let data = cfg.load_data()?;
    let start = state.history.len();
    let done = tasks::train(&model, state, &data)?;
    done.save(&dir)?;
    cfg.write(&dir.join(CONFIG_FILE))?;
    print_history(&done, start);
    println!("saved {} ({} parameters, {} epochs)", dir.display(), done.params.numel(), done.epoch);
    Ok(())
}

fn run_config(dir: &Path) -> anyhow::Result<ExperimentConfig> {
    let path = dir.join(CONFIG_FILE);
    if !path.exists() {
        return usage(format!("{} is not a run directory (no {CONFIG_FILE})", dir.display()));
    }
    ExperimentConfig::read(&path)
}

pub fn eval(dir: &Path, dataset: Option<PathBuf>, fold: Option<usize>) -> anyhow::Result<()> {
    let mut cfg = run_config(dir)?;
    if dataset.is_some() {
        cfg.dataset = dataset;
    }
    let ck = Checkpoint::load(dir)?;
    let data = cfg.load_data()?;
    let fold = fold.unwrap_or(ck.train.test_fold);
    let report = evaluate(&ck, &data, fold)?;
    let stem = format!("eval_fold{fold}");
    report.write(dir, &stem)?;
    println!("OA {:.4}", report.overall_accuracy);
    println!("mIoU {:.4}", report.miou);
    println!("wrote {}", dir.join(format!("{stem}.json")).display());
    Ok(())
}

fn run_name(dir: &Path) -> String {
    dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

#[allow(clippy::too_many_arguments)]
pub fn ablate(
    runs: &[PathBuf],
    ratios: Option<Vec<f64>>,
    repeats: usize,
    seed: u64,
    dataset: Option<PathBuf>,
    fold: Option<usize>,
    out: Option<PathBuf>,
    jobs: usize,
) -> anyhow::Result<()> {
    let grid = ratios.unwrap_or_else(default_grid);
    check_grid(&grid, repeats).map_err(|e| Usage(e.to_string()))?;
    let mut cfg = run_config(&runs[0])?;
    if dataset.is_some() {
        cfg.dataset = dataset;
    }
    let mut models = Vec::new();
    for dir in runs {
        models.push((run_name(dir), Checkpoint::load(dir)?));
    }
    let data = cfg.load_data()?;
    let fold = fold.unwrap_or(models[0].1.train.test_fold);
    let curves = robustness_curve(&models, &data, fold, &grid, repeats, seed, jobs)?;
    let out = out.unwrap_or_else(|| cfg.out_root().join("ablation"));
    let report = Report {
        robustness: curves,
        ..Report::default()
    };
    report_emit(&report, &out)?;
    print!("{}", robustness_summary_csv(&report.robustness));
    Ok(())
}

pub fn gradflow(args: &ConfigArgs, run: Option<PathBuf>, every: usize, force: bool) -> anyhow::Result<()> {
    let cfg = resolve(args)?;
    if cfg.train.optimizer != OptimizerKind::Sgd {
        return usage("gradient flow requires SGD (set train.optimizer to \"sgd\" or pass --optimizer sgd)");
    }
    let dir = run.unwrap_or_else(|| cfg.out_root().join(format!("{}_gradflow", cfg.run_name())));
    fresh_dir(&dir, force, "pass --force to replace it")?;
    let data = cfg.load_data()?;
    let (model, state) = Checkpoint::init(&cfg.encoders, &cfg.fusion, &cfg.train)?;
    let (done, records) = train_with_flow(&model, state, &data, every)?;
    done.save(&dir)?;
    cfg.write(&dir.join(CONFIG_FILE))?;
    let report = Report {
        flow: records,
        ..Report::default()
    };
    report_emit(&report, &dir)?;
    if let Some(last) = report.flow.last() {
        for m in &last.modules {
            let share = m.fraction.map_or_else(|| "-".into(), |f| format!("{:.3}", f));
            println!("{:<12} {share}", m.module);
        }
    }
    println!("wrote {} flow records to {}", report.flow.len(), dir.display());
    Ok(())
}

pub fn report(inputs: &[PathBuf], out: &Path) -> anyhow::Result<()> {
    let mut merged = Report::default();
    for input in inputs {
        let path = if input.is_dir() { input.join(REPORT_JSON) } else { input.clone() };
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let r: Report = serde_json::from_str(&text).map_err(|e| Usage(format!("{}: {e}", path.display())))?;
        merged.flow.extend(r.flow);
        merged.robustness.extend(r.robustness);
        merged.benchmark.extend(r.benchmark);
    }
    for path in report_emit(&merged, out)? {
        println!("{}", path.display());
    }
    Ok(())
}

pub fn benchmark(
    args: &ConfigArgs,
    out: Option<PathBuf>,
    models: Option<Vec<String>>,
    variants: Option<Vec<String>>,
    jobs: usize,
    force: bool,
) -> anyhow::Result<()> {
    let cfg = resolve(args)?;
    let models: Vec<Scheme> = match models {
        Some(list) => list.iter().map(|s| parse(s)).collect::<anyhow::Result<_>>()?,
        None => benchmark_models(cfg.encoders.modalities()),
    };
    let variants: Vec<Variant> = match variants {
        Some(list) => list.iter().map(|s| parse(s)).collect::<anyhow::Result<_>>()?,
        None => Variant::ALL.to_vec(),
    };
    let cells = benchmark_plan(cfg.train.task, &models, &variants);
    if cells.is_empty() {
        return usage("no legal (model, variant) combination selected");
    }
    let out = out.unwrap_or_else(|| cfg.out_root().join("benchmark"));
    fresh_dir(&out, force, "pass --force to replace it")?;
    let data = cfg.load_data()?;
    let results = run_benchmark(&data, &cfg.encoders, &cfg.fusion, &cfg.train, &cells, jobs)?;
    let mut entries = Vec::new();
    for (entry, ck, report) in results {
        let dir = out.join("runs").join(format!("{}_{}", entry.model, entry.variant));
        ck.save(&dir)?;
        let mut run_cfg = cfg.clone();
        run_cfg.fusion = ck.fusion.clone();
        run_cfg.write(&dir.join(CONFIG_FILE))?;
        report.write(&dir, &format!("eval_fold{}", cfg.train.test_fold))?;
        entries.push(entry);
    }
    let report = Report {
        benchmark: entries,
        ..Report::default()
    };
    report_emit(&report, &out)?;
    print!("{}", benchmark_csv(&report.benchmark));
    Ok(())
}

pub fn folds(args: &ConfigArgs, list: bool) -> anyhow::Result<()> {
    let cfg = resolve(args)?;
    let data = cfg.load_data()?;
    let m = &data.manifest;
    if list {
        println!("patch,fold");
        for id in &m.patch_ids {
            println!("{id},{}", m.folds[id]);
        }
        return Ok(());
    }
    println!("fold,patches,parcels");
    let mut fold_ids: Vec<usize> = m.folds.values().copied().collect();
    fold_ids.sort_unstable();
    fold_ids.dedup();
    for f in fold_ids {
        let patches = data.patches(&[f]);
        println!("{f},{},{}", patches.len(), data.parcels(&patches).len());
    }
    Ok(())
}
