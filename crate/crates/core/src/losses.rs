//! Training objectives.
//!
//! Each loss exists in two forms: a scalar function over plain slices, which
//! also serves as the test reference, and a batched
//! builder that records the same quantity on a [`Graph`] so it can be
//! differentiated. Every logarithm of a probability is floored at
//! [`PROB_FLOOR`].

use crate::error::{config_err, contract_err, shape_err, Error, Result};
use crate::math::{argmax_first, Graph, Tensor, Var};

pub const PROB_FLOOR: f64 = 1e-12;

/// Temperature-softened class distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTarget {
    probs: Vec<f64>,
    temperature: f64,
}

impl SoftTarget {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn argmax(&self) -> usize {
        argmax_first(&self.probs)
    }
}

/// Terms of the generalized distillation objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce_term: f64,
    pub distill_term: f64,
    pub lambda: f64,
}

/// Knobs of the distillation term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillOptions {
    /// Soften the student at the same temperature as the teacher. When
    /// off, the student distribution is taken at temperature 1.
    pub student_temperature: bool,
    /// Multiply the distillation term by `T²`.
    pub scale_by_t_squared: bool,
}

impl Default for DistillOptions {
    fn default() -> Self {
        Self {
            student_temperature: true,
            scale_by_t_squared: false,
        }
    }
}

impl DistillOptions {
    pub(crate) fn student_temperature(&self, t: f64) -> f64 {
        if self.student_temperature {
            t
        } else {
            1.0
        }
    }

    pub(crate) fn distill_scale(&self, t: f64) -> f64 {
        if self.scale_by_t_squared {
            t * t
        } else {
            1.0
        }
    }
}

pub(crate) fn softmax_unchecked(logits: &[f64], t: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|l| l / t).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn softmax_t(logits: &[f64], t: f64) -> Result<SoftTarget> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Domain(format!("temperature must be positive, got {t}")));
    }
    if logits.len() < 2 {
        return shape_err(format!("need at least 2 classes, got {}", logits.len()));
    }
    Ok(SoftTarget {
        probs: softmax_unchecked(logits, t),
        temperature: t,
    })
}

pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    match probs.get(label) {
        Some(&p) => Ok(-p.max(PROB_FLOOR).ln()),
        None => contract_err(format!(
            "label {label} out of range for {} classes",
            probs.len()
        )),
    }
}

pub fn soft_cross_entropy(target: &[f64], probs: &[f64]) -> Result<f64> {
    if target.len() != probs.len() {
        return shape_err(format!(
            "soft target of length {} against {} probabilities",
            target.len(),
            probs.len()
        ));
    }
    Ok(-target
        .iter()
        .zip(probs)
        .map(|(t, p)| t * p.max(PROB_FLOOR).ln())
        .sum::<f64>())
}

/// Generalized distillation loss with the student softened at `t`.
pub fn gd_loss(
    student_logits: &[f64],
    label: usize,
    teacher: &SoftTarget,
    t: f64,
    lambda: f64,
) -> Result<LossBreakdown> {
    gd_loss_with(
        student_logits,
        label,
        teacher,
        t,
        lambda,
        DistillOptions::default(),
    )
}

pub fn gd_loss_with(
    student_logits: &[f64],
    label: usize,
    teacher: &SoftTarget,
    t: f64,
    lambda: f64,
    opts: DistillOptions,
) -> Result<LossBreakdown> {
    check_lambda(lambda)?;
    if teacher.temperature != t {
        return contract_err(format!(
            "teacher softened at T={}, loss evaluated at T={t}",
            teacher.temperature
        ));
    }
    let ce_term = cross_entropy(&softmax_t(student_logits, 1.0)?.probs, label)?;
    let student = softmax_t(student_logits, opts.student_temperature(t))?;
    let distill_term = opts.distill_scale(t) * soft_cross_entropy(&teacher.probs, &student.probs)?;
    Ok(LossBreakdown {
        total: (1.0 - lambda) * ce_term + lambda * distill_term,
        ce_term,
        distill_term,
        lambda,
    })
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return config_err(format!("lambda must lie in [0, 1], got {lambda}"));
    }
    Ok(())
}

/// `KL(U ‖ probs)` for the uniform distribution `U` over the classes.
pub fn kl_to_uniform(probs: &[f64]) -> f64 {
    let c = probs.len() as f64;
    let log_u = -c.ln();
    probs
        .iter()
        .map(|p| (log_u - p.max(PROB_FLOOR).ln()) / c)
        .sum()
}

/// Sum over samples (rows) of the per-sample minimum over ensemble members.
pub fn ensemble_loss(per_sample: &Tensor) -> Result<f64> {
    if per_sample.shape().len() != 2 {
        return shape_err(format!(
            "ensemble loss expects an N×M matrix, got {:?}",
            per_sample.shape()
        ));
    }
    if !per_sample.all_finite() {
        return contract_err("ensemble loss over non-finite entries");
    }
    Ok((0..per_sample.rows())
        .map(|i| per_sample.row(i).iter().copied().fold(f64::INFINITY, f64::min))
        .sum())
}

/// Row-wise log-softmax of `logits / t`, floored at `ln(PROB_FLOOR)`.
pub fn log_softmax_rows(g: &mut Graph, logits: Var, t: f64) -> Result<Var> {
    let scaled = g.scale(logits, 1.0 / t);
    let shifted = g.sub_row_max(scaled);
    let e = g.exp(shifted);
    let z = g.row_sum(e);
    let log_z = g.log(z)?;
    let log_p = g.sub_col(shifted, log_z)?;
    Ok(g.clamp_min(log_p, PROB_FLOOR.ln()))
}

/// Per-row `-Σ_j target_ij log p_ij` as an `N×1` column. One-hot targets
/// give ordinary cross-entropy.
pub fn rows_cross_entropy(g: &mut Graph, log_probs: Var, targets: Tensor) -> Result<Var> {
    let targets = g.constant(targets);
    let weighted = g.mul(log_probs, targets)?;
    let s = g.row_sum(weighted);
    Ok(g.scale(s, -1.0))
}

/// Per-row `KL(U ‖ p)` as an `N×1` column.
pub fn rows_kl_to_uniform(g: &mut Graph, log_probs: Var) -> Var {
    let c = g.value(log_probs).cols() as f64;
    let s = g.row_sum(log_probs);
    let mean = g.scale(s, -1.0 / c);
    g.add_scalar(mean, -c.ln())
}

/// `Σ_i weights_i · column_i`.
pub fn weighted_sum(g: &mut Graph, column: Var, weights: &[f64]) -> Result<Var> {
    let w = g.constant(Tensor::matrix(weights.len(), 1, weights.to_vec())?);
    let prod = g.mul(column, w)?;
    Ok(g.sum(prod))
}

/// Dense `N×C` one-hot matrix.
pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Tensor> {
    let mut values = vec![0.0; labels.len() * num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return contract_err(format!("label {y} out of range for {num_classes} classes"));
        }
        values[i * num_classes + y] = 1.0;
    }
    Tensor::matrix(labels.len(), num_classes, values)
}
