//! Multiple-choice-learning training.
//!
//! Every step runs all modality networks on the batch without recording,
//! scores each (sample, network) pair with the variant's criterion, picks a
//! winner per sample and then gives every network one momentum step on the
//! mean of its assigned per-sample losses:
//!
//! | variant               | winner samples | loser samples                |
//! |-----------------------|----------------|------------------------------|
//! | `independent`         | CE             | CE                           |
//! | `smcl`                | CE             | none                         |
//! | `cmcl`                | CE             | `beta · KL(U ‖ p)`           |
//! | `dmcl`                | CE             | GD loss, winner as teacher   |
//! | `dmcl-random-teacher` | CE             | GD loss, random teacher      |
//!
//! A network with no assigned samples takes no step at all, so its
//! parameters and momentum stay bit-identical.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng as _;

use crate::data::{Batch, MultimodalDataset, Split};
use crate::error::{config_err, contract_err, Error, Result};
use crate::eval::{evaluate, EvalReport, Subset};
use crate::losses::{
    self, check_lambda, log_softmax_rows, one_hot, rows_cross_entropy, rows_kl_to_uniform,
    weighted_sum, DistillOptions,
};
use crate::math::{Graph, Tensor, Var};
use crate::net::{Ensemble, ModalityNetwork};
use crate::parallel;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Independent,
    Smcl,
    Cmcl,
    Dmcl,
    DmclRandomTeacher,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Independent,
        Variant::Smcl,
        Variant::Cmcl,
        Variant::Dmcl,
        Variant::DmclRandomTeacher,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Independent => "independent",
            Variant::Smcl => "smcl",
            Variant::Cmcl => "cmcl",
            Variant::Dmcl => "dmcl",
            Variant::DmclRandomTeacher => "dmcl-random-teacher",
        }
    }

    fn distills(self) -> bool {
        matches!(self, Variant::Dmcl | Variant::DmclRandomTeacher)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub temperature: f64,
    pub lambda: f64,
    /// Weight of the KL-to-uniform term under CMCL.
    pub beta: f64,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub student_temperature: bool,
    pub scale_distill_by_t2: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Dmcl,
            temperature: 2.0,
            lambda: 0.5,
            beta: 0.75,
            lr: 1e-3,
            momentum: 0.9,
            batch_size: 32,
            steps: 2000,
            seed: 0,
            student_temperature: true,
            scale_distill_by_t2: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return config_err(format!("temperature must be positive, got {}", self.temperature));
        }
        check_lambda(self.lambda)?;
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return config_err(format!("beta must be non-negative, got {}", self.beta));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return config_err(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return config_err(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            return config_err("batch size must be at least 1");
        }
        if self.steps == 0 {
            return config_err("steps must be at least 1");
        }
        Ok(())
    }

    pub fn distill_options(&self) -> DistillOptions {
        DistillOptions {
            student_temperature: self.student_temperature,
            scale_by_t_squared: self.scale_distill_by_t2,
        }
    }
}

/// Per-step training statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub step_index: usize,
    /// Mean cross-entropy of every network over the batch, before the update.
    pub per_modality_mean_loss: Vec<f64>,
    pub winner_counts: Vec<usize>,
}

/// Per-sample weights of each loss term for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub ce: Vec<f64>,
    pub distill: Vec<f64>,
    pub kl_uniform: Vec<f64>,
    /// Samples contributing to this network's loss.
    pub assigned: usize,
}

impl LossWeights {
    fn zeros(n: usize) -> Self {
        Self {
            ce: vec![0.0; n],
            distill: vec![0.0; n],
            kl_uniform: vec![0.0; n],
            assigned: 0,
        }
    }
}

/// Everything decided before any parameter moves.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    pub logits: Vec<Tensor>,
    /// `N×M` cross-entropy at temperature 1.
    pub cross_entropy: Tensor,
    pub criterion: Tensor,
    pub winners: Vec<usize>,
    /// `N×C` soft targets of each sample's teacher; distilling variants only.
    pub teacher_targets: Option<Tensor>,
    pub weights: Vec<LossWeights>,
}

impl StepPlan {
    pub fn winner_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.weights.len()];
        for &w in &self.winners {
            counts[w] += 1;
        }
        counts
    }
}

fn check_batch(ensemble: &Ensemble, batch: &Batch) -> Result<()> {
    if batch.is_empty() {
        return contract_err("empty batch");
    }
    if batch.num_modalities() != ensemble.num_modalities() {
        return Err(Error::Shape(format!(
            "batch has {} modalities, ensemble {}",
            batch.num_modalities(),
            ensemble.num_modalities()
        )));
    }
    if batch.inputs.iter().any(|x| x.rows() != batch.len()) {
        return Err(Error::Shape("modality inputs disagree on batch size".into()));
    }
    if let Some(y) = batch.labels.iter().find(|&&y| y >= ensemble.num_classes()) {
        return contract_err(format!("label {y} out of range"));
    }
    Ok(())
}

fn forward_all(ensemble: &Ensemble, batch: &Batch) -> Result<Vec<Tensor>> {
    parallel::map_range(ensemble.num_modalities(), |m| {
        ensemble.networks[m].forward(&batch.inputs[m])
    })
    .into_iter()
    .collect()
}

/// `N×M` cross-entropy and KL-to-uniform of every network on every sample.
fn per_sample_terms(logits: &[Tensor], labels: &[usize]) -> Result<(Tensor, Tensor)> {
    let (n, m) = (labels.len(), logits.len());
    let mut ce = vec![0.0; n * m];
    let mut kl = vec![0.0; n * m];
    for (k, l) in logits.iter().enumerate() {
        let probs = l.softmax_rows(1.0);
        for i in 0..n {
            ce[i * m + k] = losses::cross_entropy(probs.row(i), labels[i])?;
            kl[i * m + k] = losses::kl_to_uniform(probs.row(i));
        }
    }
    Ok((Tensor::matrix(n, m, ce)?, Tensor::matrix(n, m, kl)?))
}

fn criterion_from_terms(ce: &Tensor, kl: &Tensor, variant: Variant, beta: f64) -> Result<Tensor> {
    if variant != Variant::Cmcl {
        return Ok(ce.clone());
    }
    let (n, m) = ce.dims2();
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let kl_total: f64 = kl.row(i).iter().sum();
        for k in 0..m {
            out.push(ce.at(i, k) + beta * (kl_total - kl.at(i, k)));
        }
    }
    Tensor::matrix(n, m, out)
}

/// `N×M` selection criterion, computed without recording gradients.
///
/// Cross-entropy at temperature 1, plus for CMCL `beta` times the
/// KL-to-uniform of every other network on the same sample.
pub fn criterion_losses(
    ensemble: &Ensemble,
    batch: &Batch,
    variant: Variant,
    beta: f64,
) -> Result<Tensor> {
    check_batch(ensemble, batch)?;
    let logits = forward_all(ensemble, batch)?;
    let (ce, kl) = per_sample_terms(&logits, &batch.labels)?;
    criterion_from_terms(&ce, &kl, variant, beta)
}

/// Index of the smallest criterion; ties go to the lowest index.
pub fn select_winner(criterion_row: &[f64]) -> Result<usize> {
    if criterion_row.is_empty() {
        return contract_err("empty criterion row");
    }
    if criterion_row.iter().any(|v| v.is_nan()) {
        return contract_err("NaN in criterion row");
    }
    let mut best = 0;
    for (m, &v) in criterion_row.iter().enumerate().skip(1) {
        if v < criterion_row[best] {
            best = m;
        }
    }
    Ok(best)
}

/// Teacher of every sample: the argmin network, or a uniform draw from
/// `rng` for the random-teacher variant.
pub fn assign_teachers(criterion: &Tensor, variant: Variant, rng: &mut Rng) -> Result<Vec<usize>> {
    let (n, m) = criterion.dims2();
    match variant {
        Variant::Independent => contract_err("independent training has no teachers"),
        Variant::DmclRandomTeacher => Ok((0..n).map(|_| rng.random_range(0..m)).collect()),
        _ => (0..n).map(|i| select_winner(criterion.row(i))).collect(),
    }
}

fn loss_weights(
    variant: Variant,
    winners: &[usize],
    num_modalities: usize,
    config: &TrainConfig,
) -> Vec<LossWeights> {
    let n = winners.len();
    let inv = |count: usize| if count == 0 { 0.0 } else { 1.0 / count as f64 };
    (0..num_modalities)
        .map(|k| {
            let mut w = LossWeights::zeros(n);
            let wins = winners.iter().filter(|&&t| t == k).count();
            // Winner and loser terms are each averaged over their own samples.
            let (per_win, per_loss) = (inv(wins), inv(n - wins));
            match variant {
                Variant::Independent => {
                    w.ce.fill(inv(n));
                    w.assigned = n;
                }
                Variant::Smcl => {
                    for (i, &t) in winners.iter().enumerate() {
                        if t == k {
                            w.ce[i] = per_win;
                        }
                    }
                    w.assigned = wins;
                }
                Variant::Cmcl => {
                    for (i, &t) in winners.iter().enumerate() {
                        if t == k {
                            w.ce[i] = per_win;
                        } else {
                            w.kl_uniform[i] = config.beta * per_loss;
                        }
                    }
                    w.assigned = n;
                }
                Variant::Dmcl | Variant::DmclRandomTeacher => {
                    let opts = config.distill_options();
                    let distill = config.lambda * opts.distill_scale(config.temperature) * per_loss;
                    for (i, &t) in winners.iter().enumerate() {
                        if t == k {
                            w.ce[i] = per_win;
                        } else {
                            w.ce[i] = (1.0 - config.lambda) * per_loss;
                            w.distill[i] = distill;
                        }
                    }
                    w.assigned = n;
                }
            }
            w
        })
        .collect()
}

/// Winners and per-network loss weights for one batch, computed before any
/// update. Reads parameters only.
pub fn plan_step(
    ensemble: &Ensemble,
    batch: &Batch,
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<StepPlan> {
    config.validate()?;
    if ensemble.variant() != config.variant {
        return config_err(format!(
            "ensemble built for {} trained as {}",
            ensemble.variant(),
            config.variant
        ));
    }
    check_batch(ensemble, batch)?;
    let logits = forward_all(ensemble, batch)?;
    let (ce, kl) = per_sample_terms(&logits, &batch.labels)?;
    let criterion = criterion_from_terms(&ce, &kl, config.variant, config.beta)?;
    let winners = match config.variant {
        Variant::Independent => (0..batch.len())
            .map(|i| select_winner(criterion.row(i)))
            .collect::<Result<Vec<_>>>()?,
        v => assign_teachers(&criterion, v, rng)?,
    };
    let teacher_targets = if config.variant.distills() {
        let c = ensemble.num_classes();
        let mut t = Vec::with_capacity(batch.len() * c);
        for (i, &w) in winners.iter().enumerate() {
            t.extend(losses::softmax_unchecked(logits[w].row(i), config.temperature));
        }
        Some(Tensor::matrix(batch.len(), c, t)?)
    } else {
        None
    };
    let weights = loss_weights(config.variant, &winners, ensemble.num_modalities(), config);
    Ok(StepPlan {
        logits,
        cross_entropy: ce,
        criterion,
        winners,
        teacher_targets,
        weights,
    })
}

/// Records network `net`'s step objective on `g`.
pub fn network_objective(
    g: &mut Graph,
    net: &ModalityNetwork,
    input: &Tensor,
    labels: &[usize],
    weights: &LossWeights,
    teacher_targets: Option<&Tensor>,
    config: &TrainConfig,
) -> Result<(Var, crate::net::ParamVars)> {
    let x = g.constant(input.clone());
    let (logits, params) = net.forward_graph(g, x)?;
    let any = |w: &[f64]| w.iter().any(|&v| v != 0.0);
    let mut terms = Vec::new();

    let needs_plain = any(&weights.ce) || any(&weights.kl_uniform);
    let log_p = if needs_plain {
        Some(log_softmax_rows(g, logits, 1.0)?)
    } else {
        None
    };
    if any(&weights.ce) {
        let lp = log_p.expect("computed above");
        let ce = rows_cross_entropy(g, lp, one_hot(labels, net.num_classes())?)?;
        terms.push(weighted_sum(g, ce, &weights.ce)?);
    }
    if any(&weights.distill) {
        let Some(targets) = teacher_targets else {
            return contract_err("distillation weights without teacher targets");
        };
        let t = config.distill_options().student_temperature(config.temperature);
        let lp_t = log_softmax_rows(g, logits, t)?;
        let sce = rows_cross_entropy(g, lp_t, targets.clone())?;
        terms.push(weighted_sum(g, sce, &weights.distill)?);
    }
    if any(&weights.kl_uniform) {
        let lp = log_p.expect("computed above");
        let kl = rows_kl_to_uniform(g, lp);
        terms.push(weighted_sum(g, kl, &weights.kl_uniform)?);
    }
    let mut total = match terms.first() {
        Some(&t) => t,
        None => return contract_err("network objective with no active term"),
    };
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok((total, params))
}

/// Value of every network's step objective under `plan`; `None` for networks
/// with nothing assigned.
pub fn plan_objectives(
    ensemble: &Ensemble,
    batch: &Batch,
    plan: &StepPlan,
    config: &TrainConfig,
) -> Result<Vec<Option<f64>>> {
    parallel::map_range(ensemble.num_modalities(), |m| {
        let w = &plan.weights[m];
        if w.assigned == 0 {
            return Ok(None);
        }
        let mut g = Graph::new();
        let (loss, _) = network_objective(
            &mut g,
            &ensemble.networks[m],
            &batch.inputs[m],
            &batch.labels,
            w,
            plan.teacher_targets.as_ref(),
            config,
        )?;
        Ok(Some(g.scalar_value(loss)))
    })
    .into_iter()
    .collect()
}

/// One momentum step per network with a nonempty assignment.
pub fn apply_plan(
    ensemble: &mut Ensemble,
    batch: &Batch,
    plan: &StepPlan,
    config: &TrainConfig,
) -> Result<()> {
    let results = parallel::map_mut(&mut ensemble.networks, |m, net| -> Result<()> {
        let w = &plan.weights[m];
        if w.assigned == 0 {
            return Ok(());
        }
        let mut g = Graph::new();
        let (loss, params) = network_objective(
            &mut g,
            net,
            &batch.inputs[m],
            &batch.labels,
            w,
            plan.teacher_targets.as_ref(),
            config,
        )?;
        g.backward(loss)?;
        net.absorb_grads(&g, &params)?;
        net.sgd_momentum_step(config.lr, config.momentum)?;
        if !net.all_finite() {
            return Err(Error::Domain(format!(
                "network {m} diverged to non-finite parameters"
            )));
        }
        Ok(())
    });
    results.into_iter().collect()
}

/// One training step on `batch`.
pub fn train_step(
    ensemble: &mut Ensemble,
    batch: &Batch,
    config: &TrainConfig,
    rng: &mut Rng,
    step_index: usize,
) -> Result<StepOutcome> {
    let plan = plan_step(ensemble, batch, config, rng)?;
    apply_plan(ensemble, batch, &plan, config)?;
    let n = batch.len() as f64;
    let ce = &plan.cross_entropy;
    let per_modality_mean_loss = (0..ensemble.num_modalities())
        .map(|k| (0..batch.len()).map(|i| ce.at(i, k)).sum::<f64>() / n)
        .collect();
    Ok(StepOutcome {
        step_index,
        per_modality_mean_loss,
        winner_counts: plan.winner_counts(),
    })
}

/// Share of samples each modality won over the last `window` outcomes.
pub fn winner_fraction(outcomes: &[StepOutcome], window: usize) -> Option<Vec<f64>> {
    let tail = &outcomes[outcomes.len().saturating_sub(window.max(1))..];
    let first = tail.first()?;
    let mut counts = vec![0usize; first.winner_counts.len()];
    for o in tail {
        counts.iter_mut().zip(&o.winner_counts).for_each(|(c, w)| *c += w);
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return None;
    }
    Some(counts.into_iter().map(|c| c as f64 / total as f64).collect())
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub modality: usize,
    pub mean_loss: f64,
    pub winner_count: usize,
    pub variant: Variant,
    pub seed: u64,
}

pub const METRICS_HEADER: &str = "step,modality,mean_loss,winner_count,variant,seed";

/// Append-only per-step, per-modality log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn record(&mut self, outcome: &StepOutcome, variant: Variant, seed: u64) {
        for (m, (&loss, &wins)) in outcome
            .per_modality_mean_loss
            .iter()
            .zip(&outcome.winner_counts)
            .enumerate()
        {
            self.rows.push(MetricsRow {
                step: outcome.step_index,
                modality: m,
                mean_loss: loss,
                winner_count: wins,
                variant,
                seed,
            });
        }
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{METRICS_HEADER}")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.step, r.modality, r.mean_loss, r.winner_count, r.variant, r.seed
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii")
    }
}

/// When and what to evaluate during [`train`].
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSchedule {
    /// Evaluate every `every` steps; 0 evaluates only after the last step.
    pub every: usize,
    pub subsets: Vec<Subset>,
    /// Trailing steps over which winner fractions are measured.
    pub winner_window: usize,
}

impl Default for EvalSchedule {
    fn default() -> Self {
        Self {
            every: 0,
            subsets: Vec::new(),
            winner_window: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub outcomes: Vec<StepOutcome>,
    pub log: MetricsLog,
    /// `(step, report)` pairs in step order; the last one follows the final step.
    pub reports: Vec<(usize, EvalReport)>,
}

impl TrainRun {
    pub fn final_report(&self) -> &EvalReport {
        &self.reports.last().expect("train always evaluates at the end").1
    }
}

/// Runs `config.steps` minibatch steps over the training split.
///
/// Batches are consecutive slices of a seeded permutation of the training
/// indices, reshuffled at every epoch; a tail shorter than the batch size is
/// dropped. When the split is smaller than the batch size, every batch is
/// the whole split.
pub fn train(
    ensemble: &mut Ensemble,
    dataset: &MultimodalDataset,
    config: &TrainConfig,
    schedule: &EvalSchedule,
) -> Result<TrainRun> {
    config.validate()?;
    if dataset.num_modalities() != ensemble.num_modalities()
        || dataset.num_classes() != ensemble.num_classes()
        || dataset.dims() != ensemble.input_dims().as_slice()
    {
        return Err(Error::Shape(
            "dataset and ensemble disagree on modalities, classes or dims".into(),
        ));
    }
    let train_idx = dataset.indices(Split::Train);
    if train_idx.is_empty() {
        return contract_err("empty training split");
    }
    let batch_size = config.batch_size.min(train_idx.len());
    let mut order_rng = rng::stream(config.seed, rng::DATA_ORDER);
    let mut teacher_rng = rng::stream(config.seed, rng::TEACHER);

    let mut order: Vec<usize> = train_idx.to_vec();
    let mut cursor = order.len();
    let mut outcomes = Vec::with_capacity(config.steps);
    let mut log = MetricsLog::default();
    let mut reports = Vec::new();

    for step in 1..=config.steps {
        if cursor + batch_size > order.len() {
            use rand::seq::SliceRandom;
            order.copy_from_slice(train_idx);
            order.shuffle(&mut order_rng);
            cursor = 0;
        }
        let batch = dataset.batch(&order[cursor..cursor + batch_size])?;
        cursor += batch_size;

        let outcome = train_step(ensemble, &batch, config, &mut teacher_rng, step)?;
        log.record(&outcome, config.variant, config.seed);
        outcomes.push(outcome);

        let due = schedule.every > 0 && step % schedule.every == 0;
        if due || step == config.steps {
            let wf = winner_fraction(&outcomes, schedule.winner_window);
            reports.push((step, evaluate(ensemble, dataset, &schedule.subsets, wf)?));
        }
    }
    Ok(TrainRun {
        outcomes,
        log,
        reports,
    })
}
