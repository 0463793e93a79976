//! Acceptance checks. Runs every criterion in order, prints one PASS/FAIL
//! line each and exits non-zero if any fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sits_fusion::analysis::{default_grid, gradient_flow_probe, measured_decrease, robustness_curve, RobustnessCurve};
use sits_fusion::autograd::gradcheck::check_gradients;
use sits_fusion::autograd::{Graph, ParamStore, Tensor, Var};
use sits_fusion::encoders::{utae_forward, AttentionMaps, Ltae, LtaeConfig, PixelSetConfig, PixelSetEncoder, Utae, UtaeConfig};
use sits_fusion::fusion::{
    build_model, check_combination, compute_losses, temporal_dropout, EncoderConfig,
    FusionConfig, ModelInput, Phase, Scheme, SeqBatch, Task,
};
use sits_fusion::metrics::{miou, overall_accuracy, panoptic_match, pq_sq_rq, ConfusionMatrix, InstanceMap};
use sits_fusion::synthgen::{generate_dataset, generate_in_memory, ComplementarityPlan, SynthConfig};
use sits_fusion::tasks::{
    classification_head, evaluate, segmentation_head, train, Checkpoint, OptimizerKind, TaskData, TrainConfig,
};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rand_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// Increasing dates for `n` sequences of length `t`, and a mask with at
/// least one usable step per sequence.
fn dates_and_mask(n: usize, t: usize, keep: f64, rng: &mut ChaCha8Rng) -> (Vec<i32>, Vec<bool>) {
    let mut dates = Vec::with_capacity(n * t);
    let mut mask = Vec::with_capacity(n * t);
    for _ in 0..n {
        let mut d = rng.gen_range(1..30);
        let anchor = rng.gen_range(0..t);
        for s in 0..t {
            dates.push(d);
            d += rng.gen_range(1..30);
            mask.push(s == anchor || rng.gen_bool(keep));
        }
    }
    (dates, mask)
}

// ---------------------------------------------------------------------------
// 1. attention normalization

fn attention_normalization() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_sum, mut worst_masked, mut min_w) = (0.0f64, 0.0f64, f64::INFINITY);
    let mut maps = 0;
    for i in 0..100 {
        let found: Vec<AttentionMaps> = if i % 2 == 0 {
            let heads = [1, 2, 4][rng.gen_range(0..3)];
            let e = heads * rng.gen_range(1..=4) * 2;
            let cfg = LtaeConfig {
                in_width: e,
                heads,
                key_width: rng.gen_range(1..=8),
                mlp: if rng.gen_bool(0.5) { vec![e] } else { Vec::new() },
                period: 1000.0,
            };
            let mut store = ParamStore::new();
            let l = Ltae::new(&mut store, "ltae", cfg, &mut rng).map_err(|e| e.to_string())?;
            let (n, t) = (rng.gen_range(1..=4), rng.gen_range(1..=12));
            let (dates, mask) = dates_and_mask(n, t, 0.6, &mut rng);
            let g = Graph::new();
            let x = g.constant(rand_tensor(&[n, t, e], 5.0, &mut rng));
            let out = l.forward(&g, &store, x, &dates, &mask).map_err(|e| e.to_string())?;
            vec![AttentionMaps::new(out.attention.value().as_ref().clone(), mask)]
        } else {
            let levels = rng.gen_range(1..=3);
            let heads = rng.gen_range(1..=2);
            let cfg = UtaeConfig {
                in_channels: rng.gen_range(1..=3),
                widths: (0..levels).map(|_| heads * rng.gen_range(1..=3)).collect(),
                heads,
                key_width: rng.gen_range(1..=4),
                period: 1000.0,
            };
            let c = cfg.in_channels;
            let mut store = ParamStore::new();
            let u = Utae::new(&mut store, "utae", cfg, &mut rng).map_err(|e| e.to_string())?;
            let side = 1 << levels;
            let (h, w) = (side * rng.gen_range(1..=2), side * rng.gen_range(1..=2));
            let (b, t) = (rng.gen_range(1..=2), rng.gen_range(1..=6));
            let (dates, mask) = dates_and_mask(b, t, 0.6, &mut rng);
            let x = rand_tensor(&[b, t, c, h, w], 3.0, &mut rng);
            utae_forward(&u, &store, &x, &dates, &mask).map_err(|e| e.to_string())?.3
        };
        for a in &found {
            worst_sum = worst_sum.max(a.max_normalization_error());
            worst_masked = worst_masked.max(a.max_masked_weight());
            min_w = min_w.min(a.min_weight());
            maps += 1;
        }
    }
    ensure(worst_sum <= 1e-5, || format!("row sum off by {worst_sum:e}"))?;
    ensure(worst_masked <= 1e-5, || format!("masked weight {worst_masked:e}"))?;
    ensure(min_w >= 0.0, || format!("negative weight {min_w}"))?;
    Ok(format!(
        "100 configurations, {maps} maps incl. upsampled U-TAE levels: max |sum-1| {worst_sum:.1e}, max masked weight {worst_masked:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// 2. gradient correctness

fn project<'g>(g: &'g Graph, v: Var<'g>) -> Var<'g> {
    let w = Tensor::from_fn(&v.shape(), |i| ((i * 7919 % 101) as f64 / 50.0) - 1.0);
    v.mul(g.constant(w)).sum()
}

fn gradcheck(
    what: &str,
    store: &ParamStore,
    eval: impl Fn(&ParamStore, bool) -> (f64, Vec<Tensor>),
    worst: &mut (f64, String),
) -> Result<(), String> {
    let (_, analytic) = eval(store, true);
    let report = check_gradients(store, &analytic, 1e-4, 1e-7, |s| eval(s, false).0);
    let e = report.worst().ok_or_else(|| format!("{what}: no parameters"))?;
    if e.rel_error > worst.0 {
        *worst = (e.rel_error, format!("{what} {}", e.name));
    }
    ensure(e.rel_error <= 1e-3, || format!("{what}: {} relative error {:e}", e.name, e.rel_error))
}

fn finish(g: &Graph, loss: Var<'_>, store: &ParamStore, want: bool) -> (f64, Vec<Tensor>) {
    let grads = if want { g.backward(loss).for_params(store) } else { Vec::new() };
    (loss.value().item(), grads)
}

fn tiny_encoders() -> EncoderConfig {
    EncoderConfig {
        num_classes: 3,
        channels: vec![2, 1, 1],
        sample_size: 3,
        pixel_mlp: vec![4],
        embed_width: 4,
        heads: 2,
        key_width: 2,
        temporal_mlp: vec![4],
        period: 1000.0,
        decoder_hidden: 4,
        utae_widths: vec![2, 4],
        seg_hidden: 3,
    }
}

/// Random batch for a model: parcels are `1 × S` pixel sets, patches `4 × 4`.
fn random_input(task: Task, n: usize, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> ModelInput {
    let (h, w) = match task {
        Task::Parcel => (1, cfg.sample_size),
        Task::Semantic => (4, 4),
    };
    let mods = cfg
        .channels
        .iter()
        .enumerate()
        .map(|(id, &c)| {
            let t = 2 + id;
            let (dates, mask) = dates_and_mask(n, t, 0.7, rng);
            SeqBatch {
                modality_id: id,
                n,
                t,
                c,
                height: h,
                width: w,
                data: (0..n * t * c * h * w).map(|_| rng.gen_range(-1.5..1.5)).collect(),
                dates,
                mask,
            }
        })
        .collect();
    ModelInput::new(mods).expect("consistent modalities")
}

fn gradient_correctness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = (0.0, String::new());
    let mut checked = Vec::new();

    let mut store = ParamStore::new();
    let pse_cfg = PixelSetConfig {
        sample_size: 5,
        in_channels: 3,
        pixel_mlp: vec![4, 6],
        output_mlp: vec![5],
    };
    let pse = PixelSetEncoder::new(&mut store, "pse", pse_cfg, &mut rng).map_err(|e| e.to_string())?;
    let x = rand_tensor(&[2, 5, 3], 1.5, &mut rng);
    gradcheck(
        "PSE",
        &store,
        |s, want| {
            let g = Graph::new();
            let loss = project(&g, pse.forward(&g, s, g.constant(x.clone())));
            finish(&g, loss, s, want)
        },
        &mut worst,
    )?;
    checked.push("PSE".to_string());

    let mut store = ParamStore::new();
    let ltae_cfg = LtaeConfig {
        in_width: 6,
        heads: 2,
        key_width: 3,
        mlp: vec![5],
        period: 1000.0,
    };
    let ltae = Ltae::new(&mut store, "ltae", ltae_cfg, &mut rng).map_err(|e| e.to_string())?;
    let x = rand_tensor(&[2, 4, 6], 1.5, &mut rng);
    let (dates, mask) = dates_and_mask(2, 4, 0.6, &mut rng);
    gradcheck(
        "L-TAE",
        &store,
        |s, want| {
            let g = Graph::new();
            let out = ltae.forward(&g, s, g.constant(x.clone()), &dates, &mask).expect("valid input");
            let loss = project(&g, out.embedding);
            finish(&g, loss, s, want)
        },
        &mut worst,
    )?;
    checked.push("L-TAE".to_string());

    let mut store = ParamStore::new();
    let utae_cfg = UtaeConfig {
        in_channels: 2,
        widths: vec![2, 4],
        heads: 2,
        key_width: 2,
        period: 1000.0,
    };
    let utae = Utae::new(&mut store, "utae", utae_cfg, &mut rng).map_err(|e| e.to_string())?;
    let x = rand_tensor(&[2, 3, 2, 4, 4], 1.5, &mut rng);
    let (dates, mask) = dates_and_mask(2, 3, 0.6, &mut rng);
    gradcheck(
        "U-TAE",
        &store,
        |s, want| {
            let g = Graph::new();
            let out = utae.forward(&g, s, g.constant(x.clone()), &dates, &mask).expect("valid input");
            let loss = project(&g, out.output);
            finish(&g, loss, s, want)
        },
        &mut worst,
    )?;
    checked.push("U-TAE".to_string());

    let mut store = ParamStore::new();
    let head = classification_head(&mut store, "Decoder", 5, 4, 3, &mut rng);
    let x = rand_tensor(&[4, 5], 1.5, &mut rng);
    let y = [Some(0), Some(2), None, Some(1)];
    gradcheck(
        "classification head",
        &store,
        |s, want| {
            let g = Graph::new();
            let loss = head.forward(&g, s, g.constant(x.clone())).cross_entropy(&y);
            finish(&g, loss, s, want)
        },
        &mut worst,
    )?;
    let mut store = ParamStore::new();
    let head = segmentation_head(&mut store, "Decoder", 3, 4, 4, &mut rng);
    let x = rand_tensor(&[2, 3, 2, 2], 1.5, &mut rng);
    let y: Vec<Option<usize>> = (0..8).map(|i| if i == 5 { None } else { Some(i % 4) }).collect();
    gradcheck(
        "segmentation head",
        &store,
        |s, want| {
            let g = Graph::new();
            let loss = head.forward(&g, s, g.constant(x.clone())).cross_entropy(&y);
            finish(&g, loss, s, want)
        },
        &mut worst,
    )?;
    checked.push("heads".to_string());

    let cfg = tiny_encoders();
    let schemes = [
        Scheme::Single(0),
        Scheme::Single(1),
        Scheme::Single(2),
        Scheme::Early,
        Scheme::Mid,
        Scheme::Late,
        Scheme::Decision,
    ];
    let mut composed = 0;
    for task in [Task::Parcel, Task::Semantic] {
        for scheme in schemes {
            for aux in [false, true] {
                if check_combination(scheme, task, aux).is_err() {
                    continue;
                }
                let mut f = FusionConfig::new(scheme);
                f.aux = aux;
                let (model, store) = build_model(task, &cfg, &f, 4).map_err(|e| e.to_string())?;
                let input = random_input(task, 2, &cfg, &mut rng);
                let rows = if task == Task::Parcel { 2 } else { 32 };
                let k = model.num_outputs();
                let y: Vec<Option<usize>> = (0..rows).map(|i| if i % 7 == 3 { None } else { Some(i * 5 % k) }).collect();
                gradcheck(
                    &format!("{task}/{scheme}/aux={aux}"),
                    &store,
                    |s, want| {
                        let g = Graph::new();
                        let pred = model.forward(&g, s, &input).expect("valid input");
                        let loss = compute_losses(&pred, &y, &f).total;
                        finish(&g, loss, s, want)
                    },
                    &mut worst,
                )?;
                composed += 1;
            }
        }
    }
    Ok(format!(
        "{} + {composed} composed models (every legal scheme/task/aux); worst relative error {:.1e} ({})",
        checked.join(", "),
        worst.0,
        worst.1
    ))
}

// ---------------------------------------------------------------------------
// 3. metric oracles

/// Nearest-seed instance raster with a few background pixels.
fn random_instances(n: usize, rng: &mut ChaCha8Rng) -> Vec<i32> {
    let k = rng.gen_range(3..=8);
    let seeds: Vec<(f64, f64)> = (0..k).map(|_| (rng.gen_range(0.0..n as f64), rng.gen_range(0.0..n as f64))).collect();
    (0..n * n)
        .map(|p| {
            if rng.gen_bool(0.08) {
                return 0;
            }
            let (y, x) = ((p / n) as f64, (p % n) as f64);
            let best = (0..k)
                .min_by(|&a, &b| {
                    let da = (seeds[a].0 - y).powi(2) + (seeds[a].1 - x).powi(2);
                    let db = (seeds[b].0 - y).powi(2) + (seeds[b].1 - x).powi(2);
                    da.total_cmp(&db)
                })
                .unwrap();
            best as i32 + 1
        })
        .collect()
}

/// A prediction derived from `gt`: rectangles overwritten with other ids,
/// so that some instances still match and others do not.
fn perturbed(gt: &[i32], n: usize, rng: &mut ChaCha8Rng) -> Vec<i32> {
    let mut p = gt.to_vec();
    for _ in 0..rng.gen_range(1..=5) {
        let (y0, x0) = (rng.gen_range(0..n), rng.gen_range(0..n));
        let (hh, ww) = (rng.gen_range(1..=n / 2), rng.gen_range(1..=n / 2));
        let id = rng.gen_range(0..=12);
        for y in y0..(y0 + hh).min(n) {
            for x in x0..(x0 + ww).min(n) {
                p[y * n + x] = id;
            }
        }
    }
    p
}

fn classes_of(ids: &[i32], k: usize, rng: &mut ChaCha8Rng) -> BTreeMap<i32, usize> {
    let mut out = BTreeMap::new();
    for &i in ids.iter().filter(|&&i| i != 0) {
        out.entry(i).or_insert_with(|| rng.gen_range(0..k));
    }
    out
}

fn semantic(ids: &[i32], classes: &BTreeMap<i32, usize>, k: usize) -> Vec<usize> {
    ids.iter().map(|&i| if i == 0 { k } else { classes[&i] }).collect()
}

/// Per-class `(tp, fp, fn, iou_sum)` from all-pairs matching.
fn brute_pq(
    gt: &[i32],
    pred: &[i32],
    cg: &BTreeMap<i32, usize>,
    cp: &BTreeMap<i32, usize>,
    void: &[bool],
) -> BTreeMap<usize, (u64, u64, u64, f64)> {
    let mut out: BTreeMap<usize, (u64, u64, u64, f64)> = BTreeMap::new();
    let area = |ids: &[i32], id: i32| ids.iter().zip(void).filter(|(&i, &v)| i == id && !v).count();
    let gts: Vec<i32> = cg.keys().copied().filter(|&g| area(gt, g) > 0).collect();
    let preds: Vec<i32> = cp.keys().copied().filter(|&p| area(pred, p) > 0).collect();
    let mut pred_used = vec![false; preds.len()];
    for &g in &gts {
        let mut hit = None;
        for (j, &p) in preds.iter().enumerate() {
            let inter = (0..gt.len()).filter(|&i| !void[i] && gt[i] == g && pred[i] == p).count();
            let union = (0..gt.len()).filter(|&i| !void[i] && (gt[i] == g || pred[i] == p)).count();
            let iou = inter as f64 / union as f64;
            if iou > 0.5 {
                hit = Some((j, iou));
            }
        }
        match hit {
            Some((j, iou)) => {
                pred_used[j] = true;
                if cg[&g] == cp[&preds[j]] {
                    let e = out.entry(cg[&g]).or_default();
                    e.0 += 1;
                    e.3 += iou;
                } else {
                    out.entry(cg[&g]).or_default().2 += 1;
                    out.entry(cp[&preds[j]]).or_default().1 += 1;
                }
            }
            None => out.entry(cg[&g]).or_default().2 += 1,
        }
    }
    for (j, &p) in preds.iter().enumerate() {
        if !pred_used[j] {
            out.entry(cp[&p]).or_default().1 += 1;
        }
    }
    out
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (n, k) = (32, 5);
    let (mut matched, mut tp_total) = (0, 0);
    for pair in 0..50 {
        let gt = random_instances(n, &mut rng);
        let pred = perturbed(&gt, n, &mut rng);
        let cg = classes_of(&gt, k, &mut rng);
        let mut cp = classes_of(&pred, k, &mut rng);
        // keep most surviving ids on their true class
        for (id, c) in cp.iter_mut() {
            if let Some(&t) = cg.get(id) {
                if rng.gen_bool(0.7) {
                    *c = t;
                }
            }
        }
        let void: Vec<bool> = (0..n * n).map(|_| rng.gen_bool(0.03)).collect();

        // semantic: K crop classes plus background
        let (sg, sp) = (semantic(&gt, &cg, k), semantic(&pred, &cp, k));
        let targets: Vec<Option<usize>> = sg.iter().zip(&void).map(|(&c, &v)| (!v).then_some(c)).collect();
        let mut cm = ConfusionMatrix::new(k + 1);
        cm.update(&sp, &targets);
        let (m, per) = miou(&cm).map_err(|e| e.to_string())?;
        let oa = overall_accuracy(&cm).map_err(|e| e.to_string())?;
        let mut ious = Vec::new();
        let (mut correct, mut valid) = (0u64, 0u64);
        for c in 0..=k {
            let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
            for i in 0..n * n {
                if void[i] {
                    continue;
                }
                match (sg[i] == c, sp[i] == c) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (true, false) => fn_ += 1,
                    _ => {}
                }
            }
            let iou = (tp + fp + fn_ > 0).then(|| tp as f64 / (tp + fp + fn_) as f64);
            ensure(per[c] == iou, || format!("pair {pair} class {c}: IoU {:?} vs {iou:?}", per[c]))?;
            ious.extend(iou);
        }
        for i in (0..n * n).filter(|&i| !void[i]) {
            valid += 1;
            correct += u64::from(sg[i] == sp[i]);
        }
        let brute_miou = ious.iter().sum::<f64>() / ious.len() as f64;
        let brute_oa = correct as f64 / valid as f64;
        ensure(m == brute_miou && oa == brute_oa, || {
            format!("pair {pair}: mIoU {m} vs {brute_miou}, OA {oa} vs {brute_oa}")
        })?;

        // panoptic
        let r = panoptic_match(&InstanceMap { ids: &gt, classes: &cg }, &InstanceMap { ids: &pred, classes: &cp }, &void)
            .map_err(|e| e.to_string())?;
        let oracle = brute_pq(&gt, &pred, &cg, &cp, &void);
        let got: BTreeMap<usize, (u64, u64, u64)> = r.tallies.iter().map(|(&c, t)| (c, (t.tp, t.fp, t.fn_))).collect();
        let want: BTreeMap<usize, (u64, u64, u64)> = oracle.iter().map(|(&c, t)| (c, (t.0, t.1, t.2))).collect();
        ensure(got == want, || format!("pair {pair}: tallies {got:?} vs {want:?}"))?;
        matched += r.pairs.len();
        tp_total += got.values().map(|t| t.0).sum::<u64>();
        let q = pq_sq_rq(&r).map_err(|e| e.to_string())?;
        let mut means = (0.0, 0.0, 0.0);
        for (c, &(tp, fp, fn_, iou_sum)) in &oracle {
            let sq = if tp == 0 { 0.0 } else { iou_sum / tp as f64 };
            let rq = 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
            let qc = &q.per_class[c];
            ensure(close(qc.sq, sq) && close(qc.rq, rq) && close(qc.pq, sq * rq), || {
                format!("pair {pair} class {c}: {qc:?} vs sq {sq} rq {rq}")
            })?;
            means = (means.0 + sq, means.1 + rq, means.2 + sq * rq);
        }
        let nc = oracle.len() as f64;
        ensure(
            close(q.mean.sq, means.0 / nc) && close(q.mean.rq, means.1 / nc) && close(q.mean.pq, means.2 / nc),
            || format!("pair {pair}: mean {:?}", q.mean),
        )?;
    }
    ensure(matched > 50 && tp_total > 0, || format!("degenerate fixtures: {matched} matches"))?;

    // two class-0 parcels, one prediction covering 3 of the first's 5 pixels
    let gt = [1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 2, 2];
    let pred = [3, 3, 3, 0, 0, 0, 0, 0, 0, 0, 0, 0];
    let cg = BTreeMap::from([(1, 0), (2, 0)]);
    let cp = BTreeMap::from([(3, 0)]);
    let r = panoptic_match(&InstanceMap { ids: &gt, classes: &cg }, &InstanceMap { ids: &pred, classes: &cp }, &[false; 12])
        .map_err(|e| e.to_string())?;
    let q = pq_sq_rq(&r).map_err(|e| e.to_string())?.mean;
    ensure(
        (q.sq - 0.6).abs() <= 1e-12 && (q.rq - 2.0 / 3.0).abs() <= 1e-12 && (q.pq - 0.4).abs() <= 1e-12,
        || format!("worked example gave {q:?}"),
    )?;
    Ok(format!(
        "50 random 32x32 pairs: confusion mIoU/OA bit-identical to per-pixel counts, PQ tallies identical to all-pairs matching ({matched} matches), qualities within 1e-12; worked example SQ 0.6 RQ 2/3 PQ 0.4"
    ))
}

// ---------------------------------------------------------------------------
// 4. gradient-flow consistency

fn flow_encoders() -> EncoderConfig {
    EncoderConfig {
        sample_size: 8,
        pixel_mlp: vec![16],
        embed_width: 16,
        temporal_mlp: vec![16],
        decoder_hidden: 16,
        ..EncoderConfig::default()
    }
}

fn parcel_sample(data: &TaskData, count: usize, sample_size: usize) -> Result<(ModelInput, Vec<Option<usize>>), String> {
    let parcels = data.parcels(&data.patches(&[1, 2, 3, 4]));
    let refs: Vec<_> = parcels.iter().take(count).collect();
    data.parcel_batch(&refs, sample_size, &mut ChaCha8Rng::seed_from_u64(4)).map_err(|e| e.to_string())
}

fn gradient_flow() -> Check {
    let synth = SynthConfig {
        n_patches: 12,
        height: 16,
        width: 16,
        seed: 40,
        ..SynthConfig::default()
    };
    let (m, s) = generate_in_memory(&synth).map_err(|e| e.to_string())?;
    let data = TaskData::new(m, s).map_err(|e| e.to_string())?;
    let enc = flow_encoders();
    let (input, targets) = parcel_sample(&data, 32, enc.sample_size)?;

    let mut f = FusionConfig::new(Scheme::Late);
    f.aux = true;
    let (model, store) = build_model(Task::Parcel, &enc, &f, 41).map_err(|e| e.to_string())?;
    let err = |lr: f64| -> Result<(f64, f64), String> {
        let p = gradient_flow_probe(&model, &store, &input, &targets, OptimizerKind::Sgd, lr, 0).map_err(|e| e.to_string())?;
        let measured = measured_decrease(&model, &store, &input, &targets, lr).map_err(|e| e.to_string())?;
        Ok(((measured - p.predicted_decrease()).abs(), p.predicted_decrease()))
    };
    let (lr, half) = (0.02, 0.01);
    let ((e1, pred1), (e2, _)) = (err(lr)?, err(half)?);
    let ratio = e1 / e2;
    ensure(ratio >= 3.0, || format!("error {e1:e} at lr {lr}, {e2:e} at lr {half}: ratio {ratio:.2}"))?;

    let (plain, store) = build_model(Task::Parcel, &enc, &FusionConfig::new(Scheme::Late), 42).map_err(|e| e.to_string())?;
    let r = gradient_flow_probe(&plain, &store, &input, &targets, OptimizerKind::Sgd, 0.01, 0).map_err(|e| e.to_string())?;
    let sum = r.fraction_sum().ok_or("zero total gradient flow")?;
    ensure((sum - 1.0).abs() <= 1e-6, || format!("fractions sum to {sum}"))?;
    ensure(r.total > 0.0, || "L = L_obj should give a positive squared norm".into())?;
    Ok(format!(
        "late+aux: predicted decrease {pred1:.3e}, first-order error {e1:.2e} -> {e2:.2e} when lr halves (ratio {ratio:.2}); L = L_obj fractions over {} modules sum to 1 - {:.1e}",
        r.modules.len(),
        (1.0 - sum).abs()
    ))
}

// ---------------------------------------------------------------------------
// 5. temporal dropout statistics

fn dropout_batch(n: usize, t: usize, rng: &mut ChaCha8Rng) -> ModelInput {
    let mods = (0..3)
        .map(|id| SeqBatch {
            modality_id: id,
            n,
            t,
            c: 1,
            height: 1,
            width: 1,
            data: (0..n * t).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            dates: (0..n * t).map(|i| (i % t) as i32 * 10 + 1).collect(),
            mask: vec![true; n * t],
        })
        .collect();
    ModelInput::new(mods).expect("consistent modalities")
}

fn dropout_statistics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let input = dropout_batch(600, 20, &mut rng);
    let real = input.modalities[0].total_real() as f64;
    ensure(real >= 1e4, || format!("only {real} acquisitions"))?;
    let mut rates = Vec::new();
    for p in [0.2, 0.4] {
        let out = temporal_dropout(&input, &[p, p, p], &mut rng, Phase::Train);
        for m in &out.modalities {
            let dropped = real - m.total_real() as f64;
            let rate = dropped / real;
            let sigma = (p * (1.0 - p) / real).sqrt();
            ensure((rate - p).abs() <= 3.0 * sigma, || format!("p {p}: empirical rate {rate:.4} (3 sigma {:.4})", 3.0 * sigma))?;
            rates.push(format!("{rate:.3}"));
        }
    }
    ensure(temporal_dropout(&input, &[0.0; 3], &mut rng, Phase::Train) == input, || "p = 0 changed the input".into())?;
    ensure(temporal_dropout(&input, &[0.4; 3], &mut rng, Phase::Eval) == input, || "eval phase changed the input".into())?;
    // short sequences exercise the keep-one rule
    for t in 1..=3 {
        let short = dropout_batch(2000, t, &mut rng);
        let out = temporal_dropout(&short, &[0.9, 0.9, 0.9], &mut rng, Phase::Train);
        for m in &out.modalities {
            ensure((0..m.n).all(|i| m.count_real(i) >= 1), || format!("empty sequence at T = {t}"))?;
        }
    }
    Ok(format!(
        "{real} acquisitions per modality: drop rates {} within 3 sigma; p = 0 and eval are identities; no empty sequence at p = 0.9",
        rates.join("/")
    ))
}

// ---------------------------------------------------------------------------
// 6-8. desk-scale training

fn desk_encoders() -> EncoderConfig {
    EncoderConfig {
        sample_size: 16,
        pixel_mlp: vec![16, 32],
        embed_width: 32,
        temporal_mlp: vec![32],
        decoder_hidden: 32,
        ..EncoderConfig::default()
    }
}

fn desk_train(seed: u64) -> TrainConfig {
    TrainConfig {
        task: Task::Parcel,
        epochs: 10,
        batch_size: Some(64),
        lr: 0.005,
        seed,
        ..TrainConfig::default()
    }
}

fn fit(data: &TaskData, fusion: &FusionConfig, seed: u64) -> Result<(Checkpoint, f64), String> {
    let (model, state) = Checkpoint::init(&desk_encoders(), fusion, &desk_train(seed)).map_err(|e| e.to_string())?;
    let done = train(&model, state, data).map_err(|e| e.to_string())?;
    let report = evaluate(&done, data, 5).map_err(|e| e.to_string())?;
    Ok((done, report.miou))
}

const MODELS: [Scheme; 7] = [
    Scheme::Single(0),
    Scheme::Single(1),
    Scheme::Single(2),
    Scheme::Early,
    Scheme::Mid,
    Scheme::Late,
    Scheme::Decision,
];

struct Trained {
    data: TaskData,
    models: Vec<(String, Checkpoint, f64)>,
}

fn multimodality_benefit(store: &mut Option<Trained>) -> Check {
    let synth = SynthConfig {
        n_patches: 300,
        seed: 2024,
        ..SynthConfig::default()
    };
    let (m, s) = generate_in_memory(&synth).map_err(|e| e.to_string())?;
    let data = TaskData::new(m, s).map_err(|e| e.to_string())?;
    let mut models = Vec::new();
    for scheme in MODELS {
        let (ck, miou) = fit(&data, &FusionConfig::new(scheme), 3)?;
        models.push((scheme.to_string(), ck, miou));
    }
    let score = |name: &str| models.iter().find(|m| m.0 == name).map(|m| m.2).unwrap();
    let table: Vec<String> = models.iter().map(|m| format!("{} {:.1}", m.0, 100.0 * m.2)).collect();
    let best_single = ["S2", "S1A", "S1D"].iter().map(|n| score(n)).fold(f64::MIN, f64::max);
    let late = score("late");
    let optical = score("S2");
    let scores: Vec<f64> = ["early", "mid", "late", "decision"].iter().map(|n| score(n)).collect();
    *store = Some(Trained { data, models });
    let summary = format!("300 patches, mIoU: {}", table.join(", "));
    ensure(late - best_single >= 0.05, || {
        format!("{summary}; late beats best single by {:.1} points", 100.0 * (late - best_single))
    })?;
    for (name, s) in ["early", "mid", "late", "decision"].iter().zip(scores) {
        ensure(s > optical, || format!("{summary}; {name} does not beat S2"))?;
    }
    Ok(format!("{summary}; late - best single = {:.1} points", 100.0 * (late - best_single)))
}

fn cloud_robustness(store: &Option<Trained>) -> Check {
    let trained = store.as_ref().ok_or("criterion 6 produced no checkpoints")?;
    let picked: Vec<(String, Checkpoint)> = trained
        .models
        .iter()
        .filter(|m| ["S2", "early", "mid", "late", "decision"].contains(&m.0.as_str()))
        .map(|m| (m.0.clone(), m.1.clone()))
        .collect();
    let curves = robustness_curve(&picked, &trained.data, 5, &default_grid(), 3, 77, 1).map_err(|e| e.to_string())?;
    let at = |c: &RobustnessCurve| c.at(0.1).expect("grid contains 0.1").miou_stats().0;
    let score = |name: &str| curves.iter().find(|c| c.model == name).map(at).unwrap();
    let table: Vec<String> = curves.iter().map(|c| format!("{} {:.1}", c.model, 100.0 * at(c))).collect();
    let summary = format!("mIoU at keep ratio 0.1 (mean of 3): {}", table.join(", "));
    ensure(score("decision") > score("early"), || format!("{summary}; decision does not beat early"))?;
    for name in ["early", "mid", "late", "decision"] {
        ensure(score(name) > score("S2"), || format!("{summary}; {name} does not beat S2"))?;
    }
    Ok(summary)
}

fn auxiliary_direction() -> Check {
    let synth = SynthConfig {
        n_patches: 150,
        plan: ComplementarityPlan::OpticalDominant,
        seed: 808,
        ..SynthConfig::default()
    };
    let (m, s) = generate_in_memory(&synth).map_err(|e| e.to_string())?;
    let data = TaskData::new(m, s).map_err(|e| e.to_string())?;
    let (mut with, mut without) = (Vec::new(), Vec::new());
    for seed in [1, 2, 3] {
        let mut f = FusionConfig::new(Scheme::Late);
        without.push(fit(&data, &f, seed)?.1);
        f.aux = true;
        f.lambda = vec![0.5; 3];
        with.push(fit(&data, &f, seed)?.1);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, b) = (mean(&with), mean(&without));
    let per = |v: &[f64]| v.iter().map(|x| format!("{:.1}", 100.0 * x)).collect::<Vec<_>>().join("/");
    let summary = format!(
        "optical-dominant data, 3 seeds: late+aux {:.2} ({}), late {:.2} ({})",
        100.0 * a,
        per(&with),
        100.0 * b,
        per(&without)
    );
    ensure(a >= b - 0.005, || format!("{summary}; aux trails by more than 0.5 points"))?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// 9. configuration rules through the CLI

fn sitsfuse(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_sitsfuse"))
        .args(args)
        .current_dir(dir)
        .env_remove("SITSFUSE_OUT")
        .output()
        .expect("run sitsfuse")
}

fn configuration_rules() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cases: [(&[&str], &str); 3] = [
        (&["train", "--scheme", "mid", "--task", "segmentation"], "mid fusion"),
        (&["train", "--scheme", "early", "--aux"], "early fusion"),
        (&["gradflow", "--scheme", "late", "--optimizer", "adam"], "requires SGD"),
    ];
    let mut seen = Vec::new();
    for (args, needle) in cases {
        let out = sitsfuse(dir.path(), args);
        let stderr = String::from_utf8_lossy(&out.stderr);
        ensure(out.status.code() == Some(2), || format!("{args:?} exited with {:?}: {stderr}", out.status.code()))?;
        ensure(stderr.contains(needle), || format!("{args:?} message lacks '{needle}': {stderr}"))?;
        seen.push(stderr.trim().lines().next().unwrap_or_default().chars().take(60).collect::<String>());
    }
    ensure(
        std::fs::read_dir(dir.path()).map_err(|e| e.to_string())?.next().is_none(),
        || "a rejected command wrote files".into(),
    )?;
    Ok(format!("exit 2 for mid+segmentation, early+aux, gradflow with Adam ({})", seen.join(" | ")))
}

// ---------------------------------------------------------------------------
// 10. reproducibility

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).expect("readable dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

const REPRO_CONFIG: &str = r#"{
  "synth": {"n_patches": 10, "height": 16, "width": 16},
  "encoders": {"sample_size": 8, "pixel_mlp": [8], "embed_width": 8, "temporal_mlp": [8], "decoder_hidden": 8},
  "train": {"epochs": 2, "batch_size": 16},
  "seed": 5
}
"#;

fn pipeline(root: &Path) -> Result<Vec<String>, String> {
    std::fs::write(root.join("experiment.json"), REPRO_CONFIG).map_err(|e| e.to_string())?;
    let steps: [&[&str]; 6] = [
        &["synth", "--config", "experiment.json", "--out", "dataset"],
        &["train", "--config", "experiment.json", "--dataset", "dataset", "--scheme", "late", "--aux", "--tdrop", "--run", "run"],
        &["eval", "--run", "run"],
        &["ablate", "--run", "run", "--ratios", "1.0,0.5,0.2", "--out", "ablation"],
        &["gradflow", "--config", "experiment.json", "--dataset", "dataset", "--optimizer", "sgd", "--lr", "0.05", "--run", "flow"],
        &["report", "--input", "ablation", "--input", "flow", "--out", "report"],
    ];
    let mut stdout = Vec::new();
    for args in steps {
        let out = sitsfuse(root, args);
        ensure(out.status.success(), || {
            format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr))
        })?;
        stdout.push(String::from_utf8_lossy(&out.stdout).into_owned());
    }
    Ok(stdout)
}

fn reproducibility() -> Check {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (out_a, out_b) = (pipeline(a.path())?, pipeline(b.path())?);
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    ensure(ta.keys().eq(tb.keys()), || "the two runs wrote different file sets".into())?;
    for (path, bytes) in &ta {
        ensure(&tb[path] == bytes, || format!("{} differs between runs", path.display()))?;
    }
    ensure(out_a == out_b, || "stdout differs between runs".into())?;
    let count = |prefix: &str| ta.keys().filter(|p| p.starts_with(prefix)).count();
    for dir in ["dataset", "run/checkpoint", "ablation", "flow", "report"] {
        ensure(count(dir) > 0, || format!("nothing written under {dir}"))?;
    }

    let c = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = SynthConfig {
        n_patches: 5,
        height: 8,
        width: 8,
        seed: 6,
        ..SynthConfig::default()
    };
    generate_dataset(&cfg, c.path()).map_err(|e| e.to_string())?;
    generate_dataset(&SynthConfig { seed: 7, ..cfg }, d.path()).map_err(|e| e.to_string())?;
    ensure(tree(c.path()) != tree(d.path()), || "different seeds gave the same dataset".into())?;
    Ok(format!(
        "two CLI pipelines (synth, train, eval, ablate, gradflow, report) wrote {} byte-identical files: {} dataset, {} checkpoint, {} report",
        ta.len(),
        count("dataset"),
        count("run/checkpoint"),
        count("ablation") + count("flow") + count("report")
    ))
}

// ---------------------------------------------------------------------------

fn main() {
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut trained: Option<Trained> = None;
    let mut failures = 0;
    let mut run = |n: usize, name: &str, budget: Duration, f: &mut dyn FnMut() -> Check| {
        if let Some(want) = &filter {
            if !name.contains(want.as_str()) && want != &n.to_string() {
                return;
            }
        }
        let start = Instant::now();
        let outcome = f();
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if took > budget => Err(format!("{detail}; took {took:.1?}, budget {budget:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("criterion {n:>2} {name}: PASS ({:.1}s) {detail}", took.as_secs_f64()),
            Err(why) => {
                failures += 1;
                println!("criterion {n:>2} {name}: FAIL ({:.1}s) {why}", took.as_secs_f64());
            }
        }
    };
    let min = |m: u64| Duration::from_secs(60 * m);
    run(1, "attention-normalization", Duration::from_secs(30), &mut attention_normalization);
    run(2, "gradient-correctness", min(3), &mut gradient_correctness);
    run(3, "metric-oracles", min(1), &mut metric_oracles);
    run(4, "gradient-flow", min(1), &mut gradient_flow);
    run(5, "temporal-dropout", Duration::from_secs(30), &mut dropout_statistics);
    run(6, "multimodality-benefit", min(10), &mut || multimodality_benefit(&mut trained));
    run(7, "cloud-robustness", min(5), &mut || cloud_robustness(&trained));
    run(8, "auxiliary-direction", min(10), &mut auxiliary_direction);
    run(9, "configuration-rules", min(1), &mut configuration_rules);
    run(10, "reproducibility", min(5), &mut reproducibility);
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
