//! Per-modality feed-forward classifiers and the ensemble that holds them.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand_distr::{Distribution, Uniform};

use crate::codec::{ByteReader, ByteWriter};
use crate::engine::Variant;
use crate::error::{config_err, contract_err, shape_err, Result};
use crate::math::{Graph, Tensor, Var};
use crate::rng;

/// Default hidden width of the per-modality classifier.
pub const DEFAULT_HIDDEN: usize = 64;

/// Affine layer `x·W + b` with momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
    weight_velocity: Vec<f64>,
    bias_velocity: Vec<f64>,
}

impl Layer {
    fn new(weight: Tensor, bias: Tensor) -> Self {
        let (wn, bn) = (weight.len(), bias.len());
        Self {
            weight: weight.with_requires_grad(true),
            bias: bias.with_requires_grad(true),
            weight_velocity: vec![0.0; wn],
            bias_velocity: vec![0.0; bn],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn weight_velocity(&self) -> &[f64] {
        &self.weight_velocity
    }

    pub fn bias_velocity(&self) -> &[f64] {
        &self.bias_velocity
    }
}

/// Classifier for a single modality: affine layers with rectifiers between
/// them and identity at the output.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityNetwork {
    modality_id: usize,
    layers: Vec<Layer>,
}

/// Parameter handles registered on a graph by [`ModalityNetwork::forward_graph`].
#[derive(Debug, Clone)]
pub struct ParamVars(Vec<(Var, Var)>);

impl ModalityNetwork {
    /// Uniform fan-based initialisation with zero biases, deterministic in
    /// `(modality_id, seed)`.
    pub fn init(modality_id: usize, layer_sizes: &[usize], seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return config_err(format!(
                "need at least input and output sizes, got {layer_sizes:?}"
            ));
        }
        if layer_sizes.contains(&0) {
            return config_err(format!("layer sizes must be positive, got {layer_sizes:?}"));
        }
        let mut rng = rng::stream(seed, rng::NET_INIT + modality_id as u64);
        let layers = layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                let values = (0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect();
                Layer::new(
                    Tensor::matrix(fan_in, fan_out, values).expect("positive sizes"),
                    Tensor::zeros(vec![fan_out]).expect("positive size"),
                )
            })
            .collect();
        Ok(Self {
            modality_id,
            layers,
        })
    }

    pub fn from_layers(modality_id: usize, layers: Vec<(Tensor, Tensor)>) -> Result<Self> {
        if layers.is_empty() {
            return config_err("network needs at least one layer");
        }
        let mut prev = None;
        for (w, b) in &layers {
            if w.shape().len() != 2 || b.len() != w.cols() {
                return shape_err(format!("layer {:?} with bias {:?}", w.shape(), b.shape()));
            }
            if prev.is_some_and(|p| p != w.rows()) {
                return shape_err("consecutive layer sizes do not chain");
            }
            prev = Some(w.cols());
        }
        Ok(Self {
            modality_id,
            layers: layers
                .into_iter()
                .map(|(w, b)| {
                    let n = b.len();
                    Layer::new(w, Tensor::new(vec![n], b.into_values()).expect("n >= 1"))
                })
                .collect(),
        })
    }

    pub fn modality_id(&self) -> usize {
        self.modality_id
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(Layer::fan_out));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().expect("nonempty").fan_out()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.input_dim() {
            return shape_err(format!(
                "network {} expects batch×{}, got {:?}",
                self.modality_id,
                self.input_dim(),
                x.shape()
            ));
        }
        Ok(())
    }

    /// Logits for a `batch×input_dim` input, without recording.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.matmul(&layer.weight)?.add_row(&layer.bias)?;
            if i < last {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// Rectified activations of the last hidden layer.
    pub fn penultimate_features(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        if self.layers.len() < 2 {
            return contract_err(format!(
                "network {} has no hidden layer",
                self.modality_id
            ));
        }
        let mut h = x.clone();
        for layer in &self.layers[..self.layers.len() - 1] {
            h = h.matmul(&layer.weight)?.add_row(&layer.bias)?.relu();
        }
        Ok(h)
    }

    /// Records the forward pass on `g`, registering every parameter.
    pub fn forward_graph(&self, g: &mut Graph, x: Var) -> Result<(Var, ParamVars)> {
        self.check_input(g.value(x))?;
        let mut params = Vec::with_capacity(self.layers.len());
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = g.leaf(&layer.weight);
            let b = g.leaf(&layer.bias);
            params.push((w, b));
            let z = g.matmul(h, w)?;
            h = g.add_row(z, b)?;
            if i < last {
                h = g.relu(h);
            }
        }
        Ok((h, ParamVars(params)))
    }

    /// Copies the gradients `g` holds for `params` into the parameter tensors.
    pub fn absorb_grads(&mut self, g: &Graph, params: &ParamVars) -> Result<()> {
        if params.0.len() != self.layers.len() {
            return contract_err("parameter handles do not match this network");
        }
        for (layer, &(w, b)) in self.layers.iter_mut().zip(&params.0) {
            let wg = g.grad(w).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; layer.weight.len()]);
            let bg = g.grad(b).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; layer.bias.len()]);
            layer.weight.set_grad(wg)?;
            layer.bias.set_grad(bg)?;
        }
        Ok(())
    }

    /// `v ← momentum·v + grad; θ ← θ − lr·v`, consuming the gradients.
    pub fn sgd_momentum_step(&mut self, lr: f64, momentum: f64) -> Result<()> {
        if self
            .layers
            .iter()
            .any(|l| l.weight.grad().is_none() || l.bias.grad().is_none())
        {
            return contract_err(format!(
                "network {} stepped without gradients",
                self.modality_id
            ));
        }
        for layer in &mut self.layers {
            let wg = layer.weight.take_grad().expect("checked");
            let bg = layer.bias.take_grad().expect("checked");
            momentum_update(layer.weight.values_mut(), &mut layer.weight_velocity, &wg, lr, momentum);
            momentum_update(layer.bias.values_mut(), &mut layer.bias_velocity, &bg, lr, momentum);
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.all_finite() && l.bias.all_finite())
    }

    /// Hash over the bit patterns of every parameter and velocity value.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.modality_id.hash(&mut h);
        for l in &self.layers {
            for v in l
                .weight
                .values()
                .iter()
                .chain(l.bias.values())
                .chain(&l.weight_velocity)
                .chain(&l.bias_velocity)
            {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

fn momentum_update(theta: &mut [f64], velocity: &mut [f64], grad: &[f64], lr: f64, momentum: f64) {
    for ((p, v), g) in theta.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// `M` modality networks sharing a class count and a training variant.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub networks: Vec<ModalityNetwork>,
    num_classes: usize,
    variant: Variant,
}

impl Ensemble {
    /// One freshly initialised network per entry of `input_dims`, each with
    /// the given hidden widths.
    pub fn init(
        input_dims: &[usize],
        hidden: &[usize],
        num_classes: usize,
        variant: Variant,
        seed: u64,
    ) -> Result<Self> {
        let networks = input_dims
            .iter()
            .enumerate()
            .map(|(m, &d)| {
                let mut sizes = vec![d];
                sizes.extend_from_slice(hidden);
                sizes.push(num_classes);
                ModalityNetwork::init(m, &sizes, seed)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(networks, num_classes, variant)
    }

    pub fn new(networks: Vec<ModalityNetwork>, num_classes: usize, variant: Variant) -> Result<Self> {
        if networks.is_empty() {
            return config_err("an ensemble needs at least one network");
        }
        if num_classes < 2 {
            return config_err(format!("need at least 2 classes, got {num_classes}"));
        }
        for (m, net) in networks.iter().enumerate() {
            if net.modality_id != m {
                return config_err(format!(
                    "network at position {m} has modality id {}",
                    net.modality_id
                ));
            }
            if net.num_classes() != num_classes {
                return shape_err(format!(
                    "network {m} outputs {} classes, ensemble has {num_classes}",
                    net.num_classes()
                ));
            }
        }
        Ok(Self {
            networks,
            num_classes,
            variant,
        })
    }

    pub fn num_modalities(&self) -> usize {
        self.networks.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn input_dims(&self) -> Vec<usize> {
        self.networks.iter().map(ModalityNetwork::input_dim).collect()
    }

    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION)?;
        w.u32(self.networks.len())?;
        w.u32(self.num_classes)?;
        for net in &self.networks {
            w.u32(net.modality_id)?;
            w.u32(net.layers.len())?;
            for l in &net.layers {
                w.u32(l.weight.rows())?;
                w.u32(l.weight.cols())?;
                w.f64s(l.weight.values());
                w.f64s(l.bias.values());
            }
        }
        Ok(w.finish())
    }

    /// Decodes a checkpoint; momentum buffers start at zero.
    pub fn from_checkpoint_bytes(bytes: &[u8], variant: Variant) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "checkpoint");
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let at = r.offset();
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return r.fail_at(at, format!("unsupported version {version}"));
        }
        let m = r.u32()?;
        let c = r.u32()?;
        let mut networks = Vec::with_capacity(m.min(1024));
        for _ in 0..m {
            let id = r.u32()?;
            let n_layers = r.u32()?;
            let mut layers = Vec::with_capacity(n_layers.min(1024));
            for _ in 0..n_layers {
                let at = r.offset();
                let rows = r.u32()?;
                let cols = r.u32()?;
                if rows == 0 || cols == 0 {
                    return r.fail_at(at, "zero-sized layer");
                }
                let wv = r.f64s(rows * cols)?;
                let bv = r.f64s(cols)?;
                layers.push((
                    Tensor::matrix(rows, cols, wv)?,
                    Tensor::vector(bv)?,
                ));
            }
            let at = r.offset();
            match ModalityNetwork::from_layers(id, layers) {
                Ok(net) => networks.push(net),
                Err(e) => return r.fail_at(at, e.to_string()),
            }
        }
        r.finish()?;
        Self::new(networks, c, variant)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>, variant: Variant) -> Result<Self> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?, variant)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"MCLF";
const CHECKPOINT_VERSION: usize = 1;
