//! Engine and metric checks against independent straight-line references.

mod common;

use common::*;
use mcl_forge::data::{self, generate, SeparabilityProfile, Split};
use mcl_forge::engine::{
    self, apply_plan, assign_teachers, criterion_losses, plan_objectives, plan_step, train,
    EvalSchedule, TrainConfig, Variant,
};
use mcl_forge::eval::{self, predict_subset, Subset};
use mcl_forge::math::Tensor;
use mcl_forge::net::{Ensemble, ModalityNetwork};
use mcl_forge::{rng, Batch, MultimodalDataset};

/// One-hidden-layer rectifier network in plain loops.
#[derive(Clone, Debug)]
struct RefNet {
    dims: (usize, usize, usize),
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    v: Vec<Vec<f64>>,
}

impl RefNet {
    fn from(net: &ModalityNetwork) -> Self {
        let l = net.layers();
        assert_eq!(l.len(), 2);
        Self {
            dims: (l[0].fan_in(), l[0].fan_out(), l[1].fan_out()),
            w1: l[0].weight.values().to_vec(),
            b1: l[0].bias.values().to_vec(),
            w2: l[1].weight.values().to_vec(),
            b2: l[1].bias.values().to_vec(),
            v: vec![
                vec![0.0; l[0].weight.len()],
                vec![0.0; l[0].bias.len()],
                vec![0.0; l[1].weight.len()],
                vec![0.0; l[1].bias.len()],
            ],
        }
    }

    fn flat(&self) -> Vec<f64> {
        [&self.w1, &self.b1, &self.w2, &self.b2]
            .iter()
            .flat_map(|v| v.iter().copied())
            .collect()
    }

    fn hidden(&self, x: &[f64]) -> Vec<f64> {
        let (d, h, _) = self.dims;
        (0..h)
            .map(|j| {
                let mut a = self.b1[j];
                for i in 0..d {
                    a += x[i] * self.w1[i * h + j];
                }
                a.max(0.0)
            })
            .collect()
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let (_, h, c) = self.dims;
        let hid = self.hidden(x);
        (0..c)
            .map(|k| {
                let mut z = self.b2[k];
                for j in 0..h {
                    z += hid[j] * self.w2[j * c + k];
                }
                z
            })
            .collect()
    }

    fn probs(&self, x: &[f64]) -> Vec<f64> {
        let z = self.logits(x);
        let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    fn ce(&self, x: &[f64], y: usize) -> f64 {
        -self.probs(x)[y].ln()
    }

    /// Momentum step on `Σ_i w_i · CE_i`.
    fn ce_step(&mut self, xs: &[&[f64]], ys: &[usize], ws: &[f64], lr: f64, mu: f64) {
        let (d, h, c) = self.dims;
        let mut g = [
            vec![0.0; d * h],
            vec![0.0; h],
            vec![0.0; h * c],
            vec![0.0; c],
        ];
        for ((x, &y), &w) in xs.iter().zip(ys).zip(ws) {
            if w == 0.0 {
                continue;
            }
            let hid = self.hidden(x);
            let mut dz = self.probs(x);
            dz[y] -= 1.0;
            dz.iter_mut().for_each(|v| *v *= w);
            for j in 0..h {
                for k in 0..c {
                    g[2][j * c + k] += hid[j] * dz[k];
                }
            }
            for k in 0..c {
                g[3][k] += dz[k];
            }
            for j in 0..h {
                if hid[j] <= 0.0 {
                    continue;
                }
                let dh: f64 = (0..c).map(|k| dz[k] * self.w2[j * c + k]).sum();
                g[1][j] += dh;
                for i in 0..d {
                    g[0][i * h + j] += x[i] * dh;
                }
            }
        }
        let params = [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2];
        for ((p, v), gr) in params.into_iter().zip(&mut self.v).zip(&g) {
            for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(gr) {
                *vi = mu * *vi + gi;
                *pi -= lr * *vi;
            }
        }
    }
}

fn rows(t: &Tensor) -> Vec<&[f64]> {
    (0..t.rows()).map(|i| t.row(i)).collect()
}

fn argmin_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x < xs[best] {
            best = i;
        }
    }
    best
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

fn random_batch(r: &mut rand_chacha::ChaCha8Rng, n: usize, dims: &[usize], c: usize) -> Batch {
    use rand::Rng as _;
    Batch {
        inputs: dims.iter().map(|&d| random_matrix(r, n, d, 1.5)).collect(),
        labels: (0..n).map(|_| r.random_range(0..c)).collect(),
    }
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    let a = random_matrix(&mut r, 3, 4, 2.0);
    let b = random_matrix(&mut r, 4, 2, 2.0);
    let got = a.matmul(&b).unwrap();
    assert_eq!(got.shape(), &[3, 2]);
    for i in 0..3 {
        for j in 0..2 {
            let mut s = 0.0;
            for k in 0..4 {
                s += a.values()[i * 4 + k] * b.values()[k * 2 + j];
            }
            assert!((got.at(i, j) - s).abs() < 1e-12);
        }
    }
}

#[test]
fn exp_log_round_trip() {
    let mut r = rng(2);
    let v: Vec<f64> = uniform_vec(&mut r, 50, 3.0).iter().map(|x| x.abs() + 1e-3).collect();
    let t = Tensor::vector(v.clone()).unwrap();
    let back = t.exp().log().unwrap();
    assert_close(back.values(), &v, 1e-12);
}

#[test]
fn init_weight_mean_is_zero_within_three_sigma() {
    let net = ModalityNetwork::init(0, &[100, 100], 9).unwrap();
    let w = net.layers()[0].weight.values();
    assert_eq!(w.len(), 10_000);
    let a = (6.0f64 / 200.0).sqrt();
    assert!(w.iter().all(|x| x.abs() <= a));
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let sigma = a / (3.0 * w.len() as f64).sqrt();
    assert!(mean.abs() < 3.0 * sigma, "mean {mean} vs 3σ {}", 3.0 * sigma);
    assert!(net.layers()[0].bias.values().iter().all(|&b| b == 0.0));
}

#[test]
fn forward_matches_reference() {
    let mut r = rng(3);
    let net = random_network(&mut r, 0, &[5, 7, 4]);
    let x = random_matrix(&mut r, 6, 5, 2.0);
    let logits = net.forward(&x).unwrap();
    let feats = net.penultimate_features(&x).unwrap();
    let reference = RefNet::from(&net);
    for i in 0..6 {
        assert_close(logits.row(i), &reference.logits(x.row(i)), 1e-12);
        assert_close(feats.row(i), &reference.hidden(x.row(i)), 1e-12);
    }
}

#[test]
fn cmcl_criterion_matches_scalar_formula() {
    let p0: [Vec<f64>; 2] = [vec![0.7, 0.2, 0.1], vec![0.3, 0.3, 0.4]];
    let p1: [Vec<f64>; 2] = [vec![0.5, 0.25, 0.25], vec![0.1, 0.8, 0.1]];
    let labels = [0, 1];
    let ens = identity_ensemble(2, 3);
    let batch = Batch {
        inputs: [&p0, &p1]
            .iter()
            .map(|p| Tensor::matrix(2, 3, p.iter().flatten().map(|v| v.ln()).collect()).unwrap())
            .collect(),
        labels: labels.to_vec(),
    };
    let beta = 0.75;
    let kl = |p: &[f64]| p.iter().map(|q| (1.0 / 3.0) * ((1.0 / 3.0) / q).ln()).sum::<f64>();
    let got = criterion_losses(&ens, &batch, Variant::Cmcl, beta).unwrap();
    for i in 0..2 {
        let expect0 = -p0[i][labels[i]].ln() + beta * kl(&p1[i]);
        let expect1 = -p1[i][labels[i]].ln() + beta * kl(&p0[i]);
        assert!((got.at(i, 0) - expect0).abs() < 1e-12);
        assert!((got.at(i, 1) - expect1).abs() < 1e-12);
    }
    let plain = criterion_losses(&ens, &batch, Variant::Smcl, beta).unwrap();
    let no_beta = criterion_losses(&ens, &batch, Variant::Cmcl, 0.0).unwrap();
    assert_eq!(plain, no_beta);
}

#[test]
fn random_teacher_frequencies_are_uniform() {
    let n = 10_000;
    let m = 3;
    let criterion = Tensor::matrix(n, m, vec![1.0; n * m]).unwrap();
    let mut stream = rng::stream(5, rng::TEACHER);
    let winners = assign_teachers(&criterion, Variant::DmclRandomTeacher, &mut stream).unwrap();
    let band = chance_band(1.0 / m as f64, n);
    for k in 0..m {
        let f = winners.iter().filter(|&&w| w == k).count() as f64 / n as f64;
        assert!((f - 1.0 / m as f64).abs() < band, "modality {k}: {f}");
    }
    let mut again = rng::stream(5, rng::TEACHER);
    assert_eq!(
        assign_teachers(&criterion, Variant::DmclRandomTeacher, &mut again).unwrap(),
        winners
    );
}

/// Steps a DMCL ensemble with `lambda = 0` and the reference networks with
/// the masked cross-entropy each network should see.
#[test]
fn dmcl_without_distillation_is_masked_cross_entropy() {
    let mut r = rng(6);
    let dims = [4, 3, 5];
    let c = 3;
    let nets: Vec<ModalityNetwork> = dims
        .iter()
        .enumerate()
        .map(|(m, &d)| random_network(&mut r, m, &[d, 6, c]))
        .collect();
    let mut ens = Ensemble::new(nets, c, Variant::Dmcl).unwrap();
    let mut refs: Vec<RefNet> = ens.networks.iter().map(RefNet::from).collect();
    let config = TrainConfig {
        variant: Variant::Dmcl,
        lambda: 0.0,
        lr: 0.05,
        ..Default::default()
    };
    let mut stream = rng::stream(0, rng::TEACHER);
    for step in 0..5 {
        let batch = random_batch(&mut r, 8, &dims, c);
        let xs: Vec<Vec<&[f64]>> = batch.inputs.iter().map(rows).collect();
        let winners: Vec<usize> = (0..8)
            .map(|i| {
                let ce: Vec<f64> = refs.iter().enumerate().map(|(m, n)| n.ce(xs[m][i], batch.labels[i])).collect();
                argmin_first(&ce)
            })
            .collect();
        for (m, net) in refs.iter_mut().enumerate() {
            let wins = winners.iter().filter(|&&w| w == m).count();
            let losses = 8 - wins;
            let ws: Vec<f64> = winners
                .iter()
                .map(|&w| if w == m { 1.0 / wins as f64 } else { 1.0 / losses as f64 })
                .collect();
            net.ce_step(&xs[m], &batch.labels, &ws, config.lr, config.momentum);
        }
        let outcome = engine::train_step(&mut ens, &batch, &config, &mut stream, step).unwrap();
        let counts: Vec<usize> = (0..3).map(|m| winners.iter().filter(|&&w| w == m).count()).collect();
        assert_eq!(outcome.winner_counts, counts);
        for (net, reference) in ens.networks.iter().zip(&refs) {
            assert_close(&flat_params(net), &reference.flat(), 1e-12);
        }
    }
}

/// Network 0 wins every sample, so for any `lambda` its DMCL update is the
/// plain cross-entropy update on the whole batch.
#[test]
fn teacher_update_is_plain_cross_entropy() {
    let mut r = rng(7);
    let c = 4;
    for lambda in [0.0, 0.3, 1.0] {
        let mut teacher = random_network(&mut r, 0, &[3, 5, c]);
        teacher.layers_mut()[1].weight.values_mut().iter_mut().for_each(|w| *w *= 8.0);
        let mut quiet = |m: usize| {
            let mut n = random_network(&mut r, m, &[3, 5, c]);
            n.layers_mut()[1].weight.values_mut().iter_mut().for_each(|w| *w *= 1e-3);
            n.layers_mut()[1].bias.values_mut().iter_mut().for_each(|w| *w = 0.0);
            n
        };
        let others = [quiet(1), quiet(2)];
        let mut batch = random_batch(&mut r, 6, &[3, 3, 3], c);
        let logits = teacher.forward(&batch.inputs[0]).unwrap();
        batch.labels = (0..6)
            .map(|i| {
                let row = logits.row(i);
                (0..c).fold(0, |b, k| if row[k] > row[b] { k } else { b })
            })
            .collect();
        let mut reference = RefNet::from(&teacher);
        let mut ens = Ensemble::new(
            vec![teacher, others[0].clone(), others[1].clone()],
            c,
            Variant::Dmcl,
        )
        .unwrap();
        let config = TrainConfig {
            variant: Variant::Dmcl,
            lambda,
            lr: 0.1,
            ..Default::default()
        };
        let mut stream = rng::stream(0, rng::TEACHER);
        let out = engine::train_step(&mut ens, &batch, &config, &mut stream, 1).unwrap();
        assert_eq!(out.winner_counts, vec![6, 0, 0], "rigging failed");
        let xs = rows(&batch.inputs[0]);
        reference.ce_step(&xs, &batch.labels, &[1.0 / 6.0; 6], config.lr, config.momentum);
        assert_close(&flat_params(&ens.networks[0]), &reference.flat(), 1e-12);
    }
}

#[test]
fn small_steps_descend_for_every_variant() {
    let mut r = rng(8);
    let dims = [4, 3, 5];
    let c = 3;
    for variant in Variant::ALL {
        for trial in 0..20u64 {
            let nets = dims
                .iter()
                .enumerate()
                .map(|(m, &d)| random_network(&mut r, m, &[d, 6, c]))
                .collect();
            let mut ens = Ensemble::new(nets, c, variant).unwrap();
            let batch = random_batch(&mut r, 10, &dims, c);
            let config = TrainConfig {
                variant,
                lr: 1e-5,
                ..Default::default()
            };
            let mut stream = rng::stream(trial, rng::TEACHER);
            let plan = plan_step(&ens, &batch, &config, &mut stream).unwrap();
            let before = plan_objectives(&ens, &batch, &plan, &config).unwrap();
            apply_plan(&mut ens, &batch, &plan, &config).unwrap();
            let after = plan_objectives(&ens, &batch, &plan, &config).unwrap();
            let total = |v: &[Option<f64>]| v.iter().flatten().sum::<f64>();
            assert!(
                total(&after) < total(&before),
                "{variant} trial {trial}: {before:?} -> {after:?}"
            );
            for (b, a) in before.iter().zip(&after) {
                if let (Some(b), Some(a)) = (b, a) {
                    assert!(a < b, "{variant} trial {trial}: {b} -> {a}");
                }
            }
        }
    }
}

#[test]
fn single_modality_dmcl_equals_independent() {
    let profile = SeparabilityProfile::uniform(1, 3, 1.0, 1.0, 3.0);
    let ds = generate(1, 3, &[6], 40, &profile, 4).unwrap();
    let run = |variant| {
        let mut ens = Ensemble::init(&[6], &[8], 3, variant, 4).unwrap();
        let config = TrainConfig {
            variant,
            steps: 50,
            seed: 4,
            ..Default::default()
        };
        train(&mut ens, &ds, &config, &EvalSchedule::default()).unwrap();
        ens.to_checkpoint_bytes().unwrap()
    };
    assert_eq!(run(Variant::Independent), run(Variant::Dmcl));
}

#[test]
fn independent_training_separates_separable_data() {
    let profile = SeparabilityProfile::uniform(1, 3, 1.0, 0.5, 6.0);
    let ds = generate(1, 3, &[8], 100, &profile, 1).unwrap();
    let mut ens = Ensemble::init(&[8], &[16], 3, Variant::Independent, 1).unwrap();
    let config = TrainConfig {
        variant: Variant::Independent,
        steps: 500,
        seed: 1,
        ..Default::default()
    };
    let run = train(&mut ens, &ds, &config, &EvalSchedule::default()).unwrap();
    let acc = run.final_report().per_modality_accuracy[0];
    assert!(acc > 0.95, "accuracy {acc}");
}

#[test]
fn knn_on_signal_free_data_is_chance() {
    let c = 4;
    let profile = SeparabilityProfile::uniform(2, c, 0.0, 1.0, 4.0);
    let ds = generate(2, c, &[8, 8], 100, &profile, 3).unwrap();
    let ens = Ensemble::init(&[8, 8], &[32], c, Variant::Dmcl, 3).unwrap();
    let table = eval::knn_probe(&ens, &ds, &[1, 5, 10]).unwrap();
    let band = chance_band(1.0 / c as f64, ds.indices(Split::Test).len());
    for row in &table.accuracy {
        for &a in row {
            assert!((a - 0.25).abs() < band, "accuracy {a} outside chance band {band}");
        }
    }
}

#[test]
fn knn_finds_the_only_informative_modality() {
    let c = 4;
    let mut profile = SeparabilityProfile::uniform(2, c, 0.0, 0.3, 4.0);
    profile.separation[0] = vec![1.0; c];
    let ds = generate(2, c, &[8, 8], 100, &profile, 5).unwrap();
    let ens = Ensemble::init(&[8, 8], &[32], c, Variant::Dmcl, 5).unwrap();
    let table = eval::knn_probe(&ens, &ds, &[1, 5, 10]).unwrap();
    let band = chance_band(0.25, ds.indices(Split::Test).len());
    for j in 0..3 {
        assert!(table.accuracy[0][j] > 0.95, "{:?}", table.accuracy);
        assert!((table.accuracy[1][j] - 0.25).abs() < band, "{:?}", table.accuracy);
    }
}

#[test]
fn knn_with_shuffled_labels_is_chance() {
    let ds = data::fast_modality_preset(2).unwrap().with_shuffled_labels(99);
    let ens = Ensemble::init(&[16; 3], &[64], 6, Variant::Dmcl, 2).unwrap();
    let table = eval::knn_probe(&ens, &ds, &[1, 5, 10]).unwrap();
    let band = chance_band(1.0 / 6.0, ds.indices(Split::Test).len());
    for row in &table.accuracy {
        for &a in row {
            assert!((a - 1.0 / 6.0).abs() < band, "{a}");
        }
    }
}

#[test]
fn knn_ignores_training_order() {
    let ds = data::fast_modality_preset(3).unwrap();
    let ens = Ensemble::init(&[16; 3], &[64], 6, Variant::Dmcl, 3).unwrap();
    let mut train_idx = ds.indices(Split::Train).to_vec();
    train_idx.reverse();
    let features = (0..3)
        .map(|m| (0..ds.len()).flat_map(|i| ds.features(m, i).to_vec()).collect())
        .collect();
    let reordered = MultimodalDataset::new(
        6,
        ds.dims().to_vec(),
        features,
        ds.labels().to_vec(),
        train_idx,
        ds.indices(Split::Test).to_vec(),
    )
    .unwrap();
    assert_eq!(
        eval::knn_probe(&ens, &ds, &[1, 5, 50]).unwrap(),
        eval::knn_probe(&ens, &reordered, &[1, 5, 50]).unwrap()
    );
}

#[test]
fn predict_subset_averages_members() {
    let probs: [Vec<f64>; 3] = [
        vec![0.2, 0.5, 0.3],
        vec![0.6, 0.1, 0.3],
        vec![0.1, 0.1, 0.8],
    ];
    let ens = identity_ensemble(3, 3);
    let logs: Vec<Vec<f64>> = probs.iter().map(|p| p.iter().map(|v| v.ln()).collect()).collect();
    let features: Vec<Option<&[f64]>> = logs.iter().map(|v| Some(v.as_slice())).collect();
    let got = predict_subset(&ens, &features, &Subset::full(3)).unwrap();
    let expect: Vec<f64> = (0..3).map(|k| (probs[0][k] + probs[1][k] + probs[2][k]) / 3.0).collect();
    assert_close(&got, &expect, 1e-12);

    let partial: Vec<Option<&[f64]>> = vec![Some(&logs[0]), None, Some(&logs[2])];
    let got = predict_subset(&ens, &partial, &"0,2".parse().unwrap()).unwrap();
    let expect: Vec<f64> = (0..3).map(|k| (probs[0][k] + probs[2][k]) / 2.0).collect();
    assert_close(&got, &expect, 1e-12);
    assert!(predict_subset(&ens, &partial, &Subset::full(3)).is_err());
}

#[test]
fn oracle_counts_any_correct_modality() {
    let a = vec![vec![0.8, 0.2], vec![0.9, 0.1]];
    let b = vec![vec![0.3, 0.7], vec![0.2, 0.8]];
    let ds = dataset_from_probs(&[a, b], &[0, 1]);
    let ens = identity_ensemble(2, 2);
    let report = eval::evaluate(&ens, &ds, &[], None).unwrap();
    assert_eq!(report.oracle_accuracy, 1.0);
    assert_eq!(report.per_modality_accuracy, vec![0.5, 0.5]);
}

#[test]
fn averaged_prediction_can_beat_the_oracle() {
    // neither member picks class 0, their mean does
    let a = vec![vec![0.4, 0.5, 0.1]];
    let b = vec![vec![0.4, 0.1, 0.5]];
    let ds = dataset_from_probs(&[a, b], &[0]);
    let ens = identity_ensemble(2, 3);
    let report = eval::evaluate(&ens, &ds, &[], None).unwrap();
    assert_eq!(report.per_modality_accuracy, vec![0.0, 0.0]);
    assert_eq!(report.oracle_accuracy, 0.0);
    assert_eq!(report.sum_accuracy, 1.0);
}

#[test]
fn untrained_ensemble_is_at_chance() {
    // labels carry no signal, so hits are independent draws
    let c = 6;
    let profile = SeparabilityProfile::uniform(3, c, 0.0, 1.0, 4.0);
    let ds = generate(3, c, &[16; 3], 250, &profile, 8).unwrap();
    let n = ds.indices(Split::Test).len();
    let band = chance_band(1.0 / c as f64, n);
    for seed in 0..3 {
        let ens = Ensemble::init(&[16; 3], &[64], c, Variant::Dmcl, seed).unwrap();
        let r = eval::evaluate(&ens, &ds, &[], None).unwrap();
        for a in r.per_modality_accuracy {
            assert!((a - 1.0 / c as f64).abs() < band, "seed {seed}: {a}");
        }
    }
}

#[test]
fn complementary_oracle_beats_every_single_modality() {
    let ds = data::complementary_preset(0).unwrap();
    let mut ens = Ensemble::init(&[16; 3], &[64], 6, Variant::Independent, 0).unwrap();
    let config = TrainConfig {
        variant: Variant::Independent,
        ..Default::default()
    };
    let run = train(&mut ens, &ds, &config, &EvalSchedule::default()).unwrap();
    let r = run.final_report();
    for &a in &r.per_modality_accuracy {
        assert!(a < r.oracle_accuracy, "{r:?}");
    }
}

#[test]
fn designated_modality_learns_fastest() {
    let ds = data::fast_modality_preset(0).unwrap();
    let mut ens = Ensemble::init(&[16; 3], &[64], 6, Variant::Independent, 0).unwrap();
    let config = TrainConfig {
        variant: Variant::Independent,
        steps: 200,
        ..Default::default()
    };
    let run = train(&mut ens, &ds, &config, &EvalSchedule::default()).unwrap();
    let mean: Vec<f64> = (0..3)
        .map(|m| run.outcomes.iter().map(|o| o.per_modality_mean_loss[m]).sum::<f64>() / 200.0)
        .collect();
    let best = argmin_first(&mean);
    assert_eq!(best, data::FAST_MODALITY, "{mean:?}");
}
