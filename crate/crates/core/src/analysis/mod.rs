//! Gradient-flow probe, cloud-cover ablation and report emission.

mod ablation;
mod benchmark;
mod flow;
mod report;

pub use ablation::{
    check_grid, cloud_ablation, default_grid, parallel_map, repeat_seed, robustness_curve, RobustnessCurve, RobustnessPoint,
    OPTICAL,
};
pub use benchmark::{benchmark_csv, benchmark_models, benchmark_plan, run_benchmark, BenchmarkEntry, Variant};
pub use flow::{gradient_flow_probe, loss_gradients, measured_decrease, train_with_flow, GradientFlowRecord, ModuleFlow};
pub use report::{
    flow_csv, line_chart, report_emit, robustness_csv, robustness_summary_csv, Report, BENCHMARK_CSV, FLOW_CSV,
    REPORT_JSON, ROBUSTNESS_CSV, ROBUSTNESS_SUMMARY_CSV,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::tests::{random_input, tiny_encoders};
    use crate::fusion::{build_model, EncoderConfig, FusionConfig, Scheme, Task};
    use crate::synthgen::{generate_in_memory, SynthConfig};
    use crate::tasks::{evaluate, train, Checkpoint, OptimizerKind, TaskData, TrainConfig};

    fn encoders() -> EncoderConfig {
        EncoderConfig {
            pixel_mlp: vec![6],
            embed_width: 6,
            temporal_mlp: vec![6],
            decoder_hidden: 6,
            ..tiny_encoders()
        }
    }

    fn targets(n: usize) -> Vec<Option<usize>> {
        (0..n).map(|i| Some(i % 3)).collect()
    }

    #[test]
    fn without_aux_total_is_squared_norm() {
        let cfg = encoders();
        let (model, store) = build_model(Task::Parcel, &cfg, &FusionConfig::new(Scheme::Late), 1).unwrap();
        let input = random_input(Task::Parcel, 4, &cfg, 2);
        let y = targets(4);
        let r = gradient_flow_probe(&model, &store, &input, &y, OptimizerKind::Sgd, 0.1, 0).unwrap();
        let (_, obj, _) = loss_gradients(&model, &store, &input, &y).unwrap();
        let norm2: f64 = obj.iter().flat_map(|t| t.data()).map(|v| v * v).sum();
        assert!((r.total - norm2).abs() <= 1e-12 * norm2.max(1.0));
        assert!(r.total > 0.0);
        assert!((r.predicted_decrease() - 0.1 * norm2).abs() <= 1e-12 * norm2.max(1.0));
        assert!((r.fraction_sum().unwrap() - 1.0).abs() < 1e-9);
        assert!(r.modules.iter().all(|m| m.value >= 0.0));
    }

    #[test]
    fn first_order_error_shrinks_with_step() {
        let cfg = encoders();
        let mut f = FusionConfig::new(Scheme::Late);
        f.aux = true;
        let (model, store) = build_model(Task::Parcel, &cfg, &f, 3).unwrap();
        let input = random_input(Task::Parcel, 4, &cfg, 4);
        let y = targets(4);
        let err = |lr: f64| {
            let p = gradient_flow_probe(&model, &store, &input, &y, OptimizerKind::Sgd, lr, 0).unwrap();
            (measured_decrease(&model, &store, &input, &y, lr).unwrap() - p.predicted_decrease()).abs()
        };
        let (a, b) = (err(0.02), err(0.01));
        assert!(a / b >= 3.0, "errors {a} and {b}");
    }

    #[test]
    fn zero_gradient_has_no_fractions() {
        let cfg = encoders();
        let (model, store) = build_model(Task::Parcel, &cfg, &FusionConfig::new(Scheme::Mid), 1).unwrap();
        let input = random_input(Task::Parcel, 2, &cfg, 2);
        let r = gradient_flow_probe(&model, &store, &input, &[None, None], OptimizerKind::Sgd, 0.1, 5).unwrap();
        assert_eq!(r.total, 0.0);
        assert!(r.modules.iter().all(|m| m.fraction.is_none()));
        assert_eq!(r.fraction_sum(), None);
    }

    #[test]
    fn probe_requires_sgd() {
        let cfg = encoders();
        let (model, store) = build_model(Task::Parcel, &cfg, &FusionConfig::new(Scheme::Late), 1).unwrap();
        let input = random_input(Task::Parcel, 2, &cfg, 2);
        let err = gradient_flow_probe(&model, &store, &input, &targets(2), OptimizerKind::Adam, 0.1, 0).unwrap_err();
        assert!(err.to_string().contains("requires SGD"), "{err}");
    }

    fn small_run(scheme: Scheme, optimizer: OptimizerKind) -> (TaskData, Checkpoint) {
        let synth = SynthConfig {
            n_patches: 10,
            height: 8,
            width: 8,
            seed: 2,
            ..SynthConfig::default()
        };
        let (m, s) = generate_in_memory(&synth).unwrap();
        let data = TaskData::new(m, s).unwrap();
        let enc = EncoderConfig {
            sample_size: 4,
            pixel_mlp: vec![8],
            embed_width: 8,
            temporal_mlp: vec![8],
            decoder_hidden: 8,
            ..EncoderConfig::default()
        };
        let mut f = FusionConfig::new(scheme);
        f.aux = scheme == Scheme::Late;
        let tc = TrainConfig {
            epochs: 1,
            batch_size: Some(16),
            optimizer,
            lr: 0.05,
            ..TrainConfig::default()
        };
        let (model, ck) = Checkpoint::init(&enc, &f, &tc).unwrap();
        let ck = train(&model, ck, &data).unwrap();
        (data, ck)
    }

    #[test]
    fn flow_during_training_covers_every_module() {
        let (data, ck) = small_run(Scheme::Late, OptimizerKind::Sgd);
        let mut fresh = ck.clone();
        fresh.epoch = 0;
        fresh.history.clear();
        let model = ck.model().unwrap();
        let (_, records) = train_with_flow(&model, fresh, &data, 1).unwrap();
        assert!(!records.is_empty());
        let modules: Vec<&str> = records[0].modules.iter().map(|m| m.module.as_str()).collect();
        for name in ["Decoder", "Decoder-S2", "LTAE-S1A", "PSE-S1D"] {
            assert!(modules.contains(&name), "{modules:?}");
        }
        for r in &records {
            if let Some(s) = r.fraction_sum() {
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
        let (data, adam) = small_run(Scheme::Late, OptimizerKind::Adam);
        let model = adam.model().unwrap();
        assert!(train_with_flow(&model, adam, &data, 1).is_err());
    }

    #[test]
    fn full_ratio_ablation_equals_evaluate() {
        let (data, ck) = small_run(Scheme::Decision, OptimizerKind::Adam);
        let plain = evaluate(&ck, &data, 5).unwrap();
        let ablated = cloud_ablation(&ck, &data, 5, 1.0, 9).unwrap();
        assert_eq!(plain, ablated);
        assert!(cloud_ablation(&ck, &data, 5, 0.0, 9).is_err());
    }

    #[test]
    fn robustness_curve_records_repeats() {
        let (data, ck) = small_run(Scheme::Late, OptimizerKind::Adam);
        let (_, s2) = small_run(Scheme::Single(0), OptimizerKind::Adam);
        let models = vec![("late".to_string(), ck), ("S2".to_string(), s2)];
        let curves = robustness_curve(&models, &data, 5, &[1.0, 0.5], 3, 4, 2).unwrap();
        assert_eq!(curves.len(), 2);
        for c in &curves {
            let full = c.at(1.0).unwrap();
            assert_eq!(full.seeds.len(), 3);
            let mut seeds = full.seeds.clone();
            seeds.dedup();
            assert_eq!(seeds.len(), 3);
            let plain = evaluate(&models.iter().find(|m| m.0 == c.model).unwrap().1, &data, 5).unwrap();
            assert!(full.miou.iter().all(|&m| m == plain.miou));
        }
        assert!(robustness_curve(&models, &data, 5, &[0.5, 1.0], 3, 0, 1).is_err());
        assert!(robustness_curve(&models, &data, 5, &[1.0], 2, 0, 1).is_err());
        let serial = robustness_curve(&models, &data, 5, &[1.0, 0.5], 3, 4, 1).unwrap();
        assert_eq!(serial, curves);

        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("nested/report");
        let report = Report {
            robustness: curves,
            ..Report::default()
        };
        report_emit(&report, &out).unwrap();
        let first = std::fs::read(out.join(ROBUSTNESS_CSV)).unwrap();
        report_emit(&report, &out).unwrap();
        assert_eq!(first, std::fs::read(out.join(ROBUSTNESS_CSV)).unwrap());
        // header plus one row per (model, ratio, repeat)
        assert_eq!(String::from_utf8(first).unwrap().lines().count(), 1 + 2 * 2 * 3);
        assert!(out.join("robustness.svg").exists());
    }

    #[test]
    fn benchmark_table_shape() {
        let models = benchmark_models(3);
        let plan = benchmark_plan(Task::Parcel, &models, &Variant::ALL);
        assert!(!plan.contains(&(Scheme::Early, Variant::Aux)));
        assert!(!plan.contains(&(Scheme::Single(0), Variant::Aux)));
        assert!(plan.contains(&(Scheme::Decision, Variant::AuxTdrop)));
        let entries: Vec<BenchmarkEntry> = plan
            .iter()
            .map(|&(model, variant)| BenchmarkEntry {
                model,
                variant,
                params: 100 + variant.aux() as usize,
                overall_accuracy: 0.9,
                miou: 0.75,
            })
            .collect();
        let csv = benchmark_csv(&entries);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 7);
        assert_eq!(lines[1], "S2,90.00,75.00,75.00,-,-,100,-");
        assert_eq!(lines[4], "early,90.00,75.00,75.00,-,-,100,-");
        assert_eq!(lines[6], "late,90.00,75.00,75.00,75.00,75.00,100,101");
        let seg = benchmark_plan(Task::Semantic, &models, &[Variant::Base]);
        assert!(!seg.iter().any(|c| c.0 == Scheme::Mid));
    }

    #[test]
    fn flow_csv_schema() {
        let r = GradientFlowRecord {
            step: 3,
            lr: 0.1,
            total: 2.0,
            modules: vec![
                ModuleFlow {
                    module: "Decoder".into(),
                    value: 1.5,
                    fraction: Some(0.75),
                },
                ModuleFlow {
                    module: "PSE-S2".into(),
                    value: 0.5,
                    fraction: Some(0.25),
                },
            ],
        };
        let csv = flow_csv(&[r]);
        assert_eq!(
            csv,
            "step,module,value,fraction\n3,Decoder,1.500000000,0.750000000\n3,PSE-S2,0.500000000,0.250000000\n"
        );
    }
}
