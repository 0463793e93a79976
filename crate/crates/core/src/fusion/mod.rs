//! Early, mid, late and decision fusion, temporal dropout and auxiliary
//! supervision.

mod config;
mod input;
mod model;
mod ops;

pub use config::{check_combination, EncoderConfig, FusionConfig, Scheme, Task};
pub use input::{
    early_fuse, early_fuse_sample, interpolate_rows, interpolate_to_dates, kept_count, scrub_masked_dates,
    subsample_acquisitions, temporal_dropout, ModelInput, Phase, SeqBatch,
};
pub use model::{build_model, compute_losses, module_of, module_sizes, Head, LossBreakdown, LossValues, Model, Prediction};
pub use ops::{decision_fuse, late_fuse, mid_fuse, Merged};

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::autograd::gradcheck::check_gradients;
    use crate::autograd::{Graph, ParamStore, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_encoders() -> EncoderConfig {
        EncoderConfig {
            num_classes: 3,
            channels: vec![2, 1, 1],
            sample_size: 3,
            pixel_mlp: vec![3],
            embed_width: 4,
            heads: 2,
            key_width: 2,
            temporal_mlp: vec![4],
            period: 1000.0,
            decoder_hidden: 3,
            utae_widths: vec![2, 4],
            seg_hidden: 3,
        }
    }

    /// Random input with a few masked slots; parcels use `1 × 3` frames,
    /// patches `4 × 4`.
    pub(crate) fn random_input(task: Task, n: usize, cfg: &EncoderConfig, seed: u64) -> ModelInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
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
                let mut dates = Vec::new();
                let mut mask = Vec::new();
                for _ in 0..n {
                    let mut d = rng.gen_range(1..40);
                    for s in 0..t {
                        dates.push(d);
                        d += rng.gen_range(5..60);
                        mask.push(s == 0 || rng.gen_bool(0.7));
                    }
                }
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
        ModelInput::new(mods).unwrap()
    }

    fn targets(task: Task, n: usize, cfg: &EncoderConfig) -> Vec<Option<usize>> {
        let (rows, k) = match task {
            Task::Parcel => (n, cfg.num_classes),
            Task::Semantic => (n * 16, cfg.num_classes + 1),
        };
        (0..rows).map(|i| if i % 7 == 3 { None } else { Some(i * 5 % k) }).collect()
    }

    fn legal() -> Vec<(Task, Scheme, bool)> {
        let mut out = Vec::new();
        for task in [Task::Parcel, Task::Semantic] {
            for scheme in [Scheme::Single(0), Scheme::Single(2), Scheme::Early, Scheme::Mid, Scheme::Late, Scheme::Decision] {
                for aux in [false, true] {
                    if check_combination(scheme, task, aux).is_ok() {
                        out.push((task, scheme, aux));
                    }
                }
            }
        }
        out
    }

    #[test]
    fn composed_gradients() {
        let cfg = tiny_encoders();
        for (task, scheme, aux) in legal() {
            let mut fusion = FusionConfig::new(scheme);
            fusion.aux = aux;
            let (model, store) = build_model(task, &cfg, &fusion, 4).unwrap();
            let input = random_input(task, 2, &cfg, 17);
            let y = targets(task, 2, &cfg);
            let eval = |s: &ParamStore| {
                let g = Graph::new();
                let pred = model.forward(&g, s, &input).unwrap();
                compute_losses(&pred, &y, &fusion).total.value().item()
            };
            let g = Graph::new();
            let pred = model.forward(&g, &store, &input).unwrap();
            let loss = compute_losses(&pred, &y, &fusion).total;
            let analytic = g.backward(loss).for_params(&store);
            let report = check_gradients(&store, &analytic, 1e-4, 1e-7, eval);
            let worst = report.worst().unwrap();
            assert!(
                report.max_rel_error() <= 1e-3,
                "{task} {scheme} aux={aux}: {} rel error {}",
                worst.name,
                worst.rel_error
            );
        }
    }

    #[test]
    fn shape_contracts() {
        let cfg = tiny_encoders();
        let input = random_input(Task::Parcel, 3, &cfg, 1);
        let fused = early_fuse(&input, 0).unwrap();
        assert_eq!(fused.c, cfg.channels.iter().sum::<usize>());
        for (task, scheme, aux) in legal() {
            let mut fusion = FusionConfig::new(scheme);
            fusion.aux = aux;
            let (model, store) = build_model(task, &cfg, &fusion, 0).unwrap();
            let input = random_input(task, 3, &cfg, 2);
            let g = Graph::new();
            let pred = model.forward(&g, &store, &input).unwrap();
            let rows = if task == Task::Parcel { 3 } else { 48 };
            assert_eq!(pred.logits.shape(), vec![rows, model.num_outputs()]);
            let expect_aux = if aux { 3 } else { 0 };
            assert_eq!(pred.aux.len(), expect_aux, "{task} {scheme}");
        }
    }

    #[test]
    fn aux_heads_add_exactly_m_decoders() {
        let cfg = EncoderConfig::default();
        let plain = build_model(Task::Parcel, &cfg, &FusionConfig::new(Scheme::Late), 0).unwrap().1;
        let mut f = FusionConfig::new(Scheme::Late);
        f.aux = true;
        let with_aux = build_model(Task::Parcel, &cfg, &f, 0).unwrap().1;
        // one decoder: F → hidden → K with biases
        let (fw, h, k) = (cfg.temporal_width(), cfg.decoder_hidden, cfg.num_classes);
        let decoder = fw * h + h + h * k + k;
        assert_eq!(with_aux.numel() - plain.numel(), 3 * decoder);
    }

    #[test]
    fn illegal_builds() {
        let cfg = EncoderConfig::default();
        assert!(build_model(Task::Semantic, &cfg, &FusionConfig::new(Scheme::Mid), 0).is_err());
        let mut f = FusionConfig::new(Scheme::Early);
        f.aux = true;
        let err = build_model(Task::Parcel, &cfg, &f, 0).unwrap_err().to_string();
        assert!(err.contains("early fusion"), "{err}");
    }

    #[test]
    fn loss_composition() {
        let cfg = tiny_encoders();
        let input = random_input(Task::Parcel, 4, &cfg, 3);
        let y = targets(Task::Parcel, 4, &cfg);
        let (model, store) = build_model(Task::Parcel, &cfg, &FusionConfig::new(Scheme::Late), 0).unwrap();
        let g = Graph::new();
        let l = compute_losses(&model.forward(&g, &store, &input).unwrap(), &y, &model.fusion).values();
        assert_eq!(l.total, l.objective);
        assert!(l.aux.is_empty());

        let mut f = FusionConfig::new(Scheme::Late);
        f.aux = true;
        f.lambda = vec![0.0; 3];
        let (model, store) = build_model(Task::Parcel, &cfg, &f, 0).unwrap();
        let g = Graph::new();
        let pred = model.forward(&g, &store, &input).unwrap();
        let losses = compute_losses(&pred, &y, &f);
        let v = losses.values();
        assert_eq!(v.total, v.objective);
        assert!(v.aux.iter().all(|&a| a > 0.0));
        let grads = g.backward(losses.total).for_params(&store);
        for (id, name, _) in store.iter() {
            if name.starts_with("Decoder-") {
                assert!(grads[id.0].data().iter().all(|&x| x == 0.0), "{name}");
            }
        }

        f.lambda = vec![0.5, 0.25, 2.0];
        let g = Graph::new();
        let v = compute_losses(&model.forward(&g, &store, &input).unwrap(), &y, &f).values();
        let expect = v.objective + 0.5 * v.aux[0] + 0.25 * v.aux[1] + 2.0 * v.aux[2];
        assert!((v.total - expect).abs() < 1e-12);
    }

    #[test]
    fn perfect_logits_give_zero_objective() {
        let g = Graph::new();
        let big = 1e3;
        let logits = g.constant(Tensor::new(vec![2, 3], vec![big, 0.0, 0.0, 0.0, 0.0, big]));
        let pred = Prediction {
            logits,
            aux: Vec::new(),
            aux_modalities: Vec::new(),
        };
        let l = compute_losses(&pred, &[Some(0), Some(2)], &FusionConfig::default()).values();
        assert!(l.objective < 1e-300);
    }

    #[test]
    fn aux_gradients_reach_every_encoder() {
        let cfg = EncoderConfig {
            pixel_mlp: vec![8, 8],
            embed_width: 8,
            temporal_mlp: vec![8],
            decoder_hidden: 8,
            ..tiny_encoders()
        };
        let input = random_input(Task::Parcel, 4, &cfg, 5);
        let y = targets(Task::Parcel, 4, &cfg);
        for scheme in [Scheme::Mid, Scheme::Late, Scheme::Decision] {
            let mut f = FusionConfig::new(scheme);
            f.aux = true;
            let (model, store) = build_model(Task::Parcel, &cfg, &f, 1).unwrap();
            let g = Graph::new();
            let pred = model.forward(&g, &store, &input).unwrap();
            let grads = g.backward(compute_losses(&pred, &y, &f).total).for_params(&store);
            for m in ["S2", "S1A", "S1D"] {
                let norm: f64 = store
                    .iter()
                    .filter(|(_, n, _)| n.starts_with(&format!("PSE-{m}/")))
                    .map(|(id, _, _)| grads[id.0].norm())
                    .sum();
                assert!(norm > 0.0, "{scheme}: PSE-{m}");
            }
        }
    }

    /// Zeroing the decoder weights that read block `m` of the late-fused
    /// embedding cuts every gradient path to encoder `m`, both analytically
    /// and by finite differences.
    #[test]
    fn late_fusion_block_isolation() {
        let cfg = EncoderConfig {
            pixel_mlp: vec![6],
            embed_width: 6,
            temporal_mlp: vec![6],
            decoder_hidden: 6,
            ..tiny_encoders()
        };
        let input = random_input(Task::Parcel, 3, &cfg, 8);
        let y = targets(Task::Parcel, 3, &cfg);
        let f = FusionConfig::new(Scheme::Late);
        let (model, mut store) = build_model(Task::Parcel, &cfg, &f, 2).unwrap();
        let block = cfg.temporal_width();
        let w = store.get("Decoder/0/weight").expect("first decoder layer");
        let hidden = store.value(w).shape()[1];
        for r in block..2 * block {
            store.value_mut(w).data_mut()[r * hidden..(r + 1) * hidden].fill(0.0);
        }
        let eval = |s: &ParamStore| {
            let g = Graph::new();
            compute_losses(&model.forward(&g, s, &input).unwrap(), &y, &f).total.value().item()
        };
        let g = Graph::new();
        let loss = compute_losses(&model.forward(&g, &store, &input).unwrap(), &y, &f).total;
        let grads = g.backward(loss).for_params(&store);
        let mut reached = 0.0;
        for (id, name, value) in store.iter() {
            let analytic = grads[id.0].norm();
            if name.starts_with("PSE-S1A/") || name.starts_with("LTAE-S1A/") {
                assert_eq!(analytic, 0.0, "{name}");
                let mut probe = store.clone();
                for i in 0..value.len() {
                    probe.value_mut(id).data_mut()[i] += 1e-3;
                    assert_eq!(eval(&probe), eval(&store), "{name}[{i}]");
                    probe.value_mut(id).data_mut()[i] -= 1e-3;
                }
            } else if name.starts_with("PSE-S2/") {
                reached += analytic;
            }
        }
        assert!(reached > 0.0);
    }

    #[test]
    fn mid_merged_length() {
        let cfg = tiny_encoders();
        let input = random_input(Task::Parcel, 2, &cfg, 9);
        let g = Graph::new();
        let seqs: Vec<_> = input
            .modalities
            .iter()
            .map(|m| g.constant(Tensor::zeros(&[2, m.t, 4])))
            .collect();
        let d: Vec<&[i32]> = input.modalities.iter().map(|m| m.dates.as_slice()).collect();
        let k: Vec<&[bool]> = input.modalities.iter().map(|m| m.mask.as_slice()).collect();
        let merged = mid_fuse(&seqs, &d, &k).unwrap();
        assert_eq!(merged.sequence.shape()[1], 2 + 3 + 4);
        for row in merged.dates.chunks(9) {
            let real: Vec<i32> = row.iter().copied().filter(|&x| x >= 0).collect();
            assert!(real.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
