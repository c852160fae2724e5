#![allow(dead_code)]

use mcl_forge::data::MultimodalDataset;
use mcl_forge::engine::{network_objective, LossWeights, TrainConfig, Variant};
use mcl_forge::math::{Graph, Tensor};
use mcl_forge::net::{Ensemble, ModalityNetwork};
use rand::Rng as _;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor {
    Tensor::matrix(r, c, uniform_vec(rng, r * c, scale)).unwrap()
}

/// Rows of a probability simplex drawn from random logits.
pub fn random_probs(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Tensor {
    let mut v = Vec::with_capacity(n * c);
    for _ in 0..n {
        let l = uniform_vec(rng, c, 2.0);
        let z: f64 = l.iter().map(|x| x.exp()).sum();
        v.extend(l.iter().map(|x| x.exp() / z));
    }
    Tensor::matrix(n, c, v).unwrap()
}

/// Network with uniformly drawn weights and biases of the given sizes.
pub fn random_network(rng: &mut ChaCha8Rng, modality: usize, sizes: &[usize]) -> ModalityNetwork {
    let layers = sizes
        .windows(2)
        .map(|w| {
            (
                random_matrix(rng, w[0], w[1], 0.8),
                Tensor::vector(uniform_vec(rng, w[1], 0.3)).unwrap(),
            )
        })
        .collect();
    ModalityNetwork::from_layers(modality, layers).unwrap()
}

/// Every parameter value, layer by layer, weights before biases.
pub fn flat_params(net: &ModalityNetwork) -> Vec<f64> {
    net.layers()
        .iter()
        .flat_map(|l| l.weight.values().iter().chain(l.bias.values()).copied())
        .collect()
}

pub fn flat_velocities(net: &ModalityNetwork) -> Vec<f64> {
    net.layers()
        .iter()
        .flat_map(|l| l.weight_velocity().iter().chain(l.bias_velocity()).copied())
        .collect()
}

fn param_mut(net: &mut ModalityNetwork, mut idx: usize) -> &mut f64 {
    for l in net.layers_mut() {
        if idx < l.weight.len() {
            return &mut l.weight.values_mut()[idx];
        }
        idx -= l.weight.len();
        if idx < l.bias.len() {
            return &mut l.bias.values_mut()[idx];
        }
        idx -= l.bias.len();
    }
    panic!("parameter index out of range")
}

pub struct Objective<'a> {
    pub input: &'a Tensor,
    pub labels: &'a [usize],
    pub weights: &'a LossWeights,
    pub teacher: Option<&'a Tensor>,
    pub config: &'a TrainConfig,
}

impl Objective<'_> {
    pub fn value(&self, net: &ModalityNetwork) -> f64 {
        let mut g = Graph::new();
        let (loss, _) = network_objective(
            &mut g,
            net,
            self.input,
            self.labels,
            self.weights,
            self.teacher,
            self.config,
        )
        .unwrap();
        g.scalar_value(loss)
    }

    /// Gradient from the tape, flattened like [`flat_params`].
    pub fn analytic(&self, net: &ModalityNetwork) -> Vec<f64> {
        let mut net = net.clone();
        let mut g = Graph::new();
        let (loss, params) = network_objective(
            &mut g,
            &net,
            self.input,
            self.labels,
            self.weights,
            self.teacher,
            self.config,
        )
        .unwrap();
        g.backward(loss).unwrap();
        net.absorb_grads(&g, &params).unwrap();
        net.layers()
            .iter()
            .flat_map(|l| {
                l.weight
                    .grad()
                    .unwrap()
                    .iter()
                    .chain(l.bias.grad().unwrap())
                    .copied()
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// Central differences of [`Objective::value`] in every parameter.
    pub fn numeric(&self, net: &ModalityNetwork, eps: f64) -> Vec<f64> {
        let n = flat_params(net).len();
        let mut probe = net.clone();
        (0..n)
            .map(|i| {
                let orig = *param_mut(&mut probe, i);
                *param_mut(&mut probe, i) = orig + eps;
                let up = self.value(&probe);
                *param_mut(&mut probe, i) = orig - eps;
                let down = self.value(&probe);
                *param_mut(&mut probe, i) = orig;
                (up - down) / (2.0 * eps)
            })
            .collect()
    }
}

/// `max_i |a_i - n_i| / max(1, |a_i|)`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Ensemble of single-layer identity networks: the logits of modality `m`
/// on a sample are its raw features.
pub fn identity_ensemble(num_modalities: usize, num_classes: usize) -> Ensemble {
    let nets = (0..num_modalities)
        .map(|m| {
            let mut eye = vec![0.0; num_classes * num_classes];
            for c in 0..num_classes {
                eye[c * num_classes + c] = 1.0;
            }
            ModalityNetwork::from_layers(
                m,
                vec![(
                    Tensor::matrix(num_classes, num_classes, eye).unwrap(),
                    Tensor::vector(vec![0.0; num_classes]).unwrap(),
                )],
            )
            .unwrap()
        })
        .collect();
    Ensemble::new(nets, num_classes, Variant::Independent).unwrap()
}

/// Dataset whose every sample is in the test split and whose features are
/// log-probabilities, so that an [`identity_ensemble`] reproduces `probs`
/// (`probs[m][i]` is modality `m`'s distribution for sample `i`).
/// One extra training sample satisfies the nonempty-split invariant.
pub fn dataset_from_probs(probs: &[Vec<Vec<f64>>], labels: &[usize]) -> MultimodalDataset {
    let c = probs[0][0].len();
    let n = labels.len();
    let features = probs
        .iter()
        .map(|rows| {
            let mut f: Vec<f64> = rows.iter().flat_map(|p| p.iter().map(|v| v.ln())).collect();
            f.extend(std::iter::repeat_n(0.0, c));
            f
        })
        .collect();
    let mut all_labels = labels.to_vec();
    all_labels.push(0);
    MultimodalDataset::new(
        c,
        vec![c; probs.len()],
        features,
        all_labels,
        vec![n],
        (0..n).collect(),
    )
    .unwrap()
}

/// Binomial `3σ` band around chance for `n` trials.
pub fn chance_band(p: f64, n: usize) -> f64 {
    3.0 * (p * (1.0 - p) / n as f64).sqrt()
}
