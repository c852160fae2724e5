//! Evaluation of trained ensembles.
//!
//! Predictions for a set of available modalities are the mean of the
//! temperature-1 softmax outputs of those networks only. Argmax ties go to
//! the lowest class index throughout.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::data::{MultimodalDataset, Split};
use crate::engine::METRICS_HEADER;
use crate::error::{config_err, contract_err, Error, Result};
use crate::math::{argmax_first, Tensor};
use crate::net::Ensemble;
use crate::parallel;

/// Nonempty, sorted, duplicate-free set of modality indices.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Subset(Vec<usize>);

impl Subset {
    pub fn new(mut modalities: Vec<usize>) -> Result<Self> {
        modalities.sort_unstable();
        modalities.dedup();
        if modalities.is_empty() {
            return contract_err("modality subset must be nonempty");
        }
        Ok(Self(modalities))
    }

    pub fn singleton(m: usize) -> Self {
        Self(vec![m])
    }

    pub fn full(num_modalities: usize) -> Self {
        Self((0..num_modalities).collect())
    }

    pub fn modalities(&self) -> &[usize] {
        &self.0
    }

    pub fn contains(&self, m: usize) -> bool {
        self.0.binary_search(&m).is_ok()
    }

    fn check_within(&self, num_modalities: usize) -> Result<()> {
        match self.0.last() {
            Some(&m) if m >= num_modalities => {
                Err(Error::Config(format!("modality {m} not in a {num_modalities}-modality ensemble")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let ms = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad modality index {p:?} in subset {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Subset::new(ms)
    }
}

/// Parses `0;1;2;0,1,2` into four subsets.
pub fn parse_subsets(s: &str) -> Result<Vec<Subset>> {
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_modality_accuracy: Vec<f64>,
    /// Accuracy of the averaged prediction over all modalities.
    pub sum_accuracy: f64,
    /// Fraction of samples some single modality classifies correctly.
    pub oracle_accuracy: f64,
    pub subset_accuracies: BTreeMap<Subset, f64>,
    /// Training-time share of samples won by each modality, when known.
    pub winner_fraction: Option<Vec<f64>>,
    pub num_test_samples: usize,
}

impl EvalReport {
    pub fn check_invariants(&self) -> Result<()> {
        let m = self.per_modality_accuracy.len();
        let in_unit = |a: f64| (0.0..=1.0).contains(&a);
        if !self
            .per_modality_accuracy
            .iter()
            .chain([&self.sum_accuracy, &self.oracle_accuracy])
            .chain(self.subset_accuracies.values())
            .all(|&a| in_unit(a))
        {
            return contract_err("accuracy outside [0, 1]");
        }
        if let Some(worst) = self
            .per_modality_accuracy
            .iter()
            .position(|&a| a > self.oracle_accuracy)
        {
            return contract_err(format!(
                "oracle accuracy {} below modality {worst} accuracy {}",
                self.oracle_accuracy, self.per_modality_accuracy[worst]
            ));
        }
        if !self.subset_accuracies.contains_key(&Subset::full(m))
            || (0..m).any(|k| !self.subset_accuracies.contains_key(&Subset::singleton(k)))
        {
            return contract_err("report lacks the full set or a singleton");
        }
        if let Some(wf) = &self.winner_fraction {
            if wf.len() != m || (wf.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return contract_err("winner fractions must cover every modality and sum to 1");
            }
        }
        Ok(())
    }

    /// Flat `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("num_test_samples={}\n", self.num_test_samples));
        out.push_str(&format!("sum_accuracy={}\n", self.sum_accuracy));
        out.push_str(&format!("oracle_accuracy={}\n", self.oracle_accuracy));
        for (m, a) in self.per_modality_accuracy.iter().enumerate() {
            out.push_str(&format!("modality_accuracy.{m}={a}\n"));
        }
        for (s, a) in &self.subset_accuracies {
            out.push_str(&format!("subset_accuracy.{s}={a}\n"));
        }
        if let Some(wf) = &self.winner_fraction {
            for (m, f) in wf.iter().enumerate() {
                out.push_str(&format!("winner_fraction.{m}={f}\n"));
            }
        }
        out
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut num_test_samples = None;
        let mut sum_accuracy = None;
        let mut oracle_accuracy = None;
        let mut per_modality = BTreeMap::new();
        let mut subsets = BTreeMap::new();
        let mut winners = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i as u64 + 1;
            let err = |reason: String| Error::Parse {
                what: "report",
                line: line_no,
                reason,
            };
            if line.trim().is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("no '=' in {line:?}")))?;
            let num = || value.parse::<f64>().map_err(|_| err(format!("bad number {value:?}")));
            let idx = |s: &str| s.parse::<usize>().map_err(|_| err(format!("bad index {s:?}")));
            match key.split_once('.') {
                None => match key {
                    "num_test_samples" => num_test_samples = Some(idx(value)?),
                    "sum_accuracy" => sum_accuracy = Some(num()?),
                    "oracle_accuracy" => oracle_accuracy = Some(num()?),
                    _ => return Err(err(format!("unknown key {key:?}"))),
                },
                Some(("modality_accuracy", m)) => {
                    per_modality.insert(idx(m)?, num()?);
                }
                Some(("subset_accuracy", s)) => {
                    subsets.insert(s.parse::<Subset>().map_err(|e| err(e.to_string()))?, num()?);
                }
                Some(("winner_fraction", m)) => {
                    winners.insert(idx(m)?, num()?);
                }
                _ => return Err(err(format!("unknown key {key:?}"))),
            }
        }
        let missing = |k: &str| Error::Parse {
            what: "report",
            line: text.lines().count() as u64,
            reason: format!("missing {k}"),
        };
        let dense = |map: BTreeMap<usize, f64>, what: &str| -> Result<Vec<f64>> {
            if map.keys().copied().ne(0..map.len()) {
                return Err(missing(what));
            }
            Ok(map.into_values().collect())
        };
        let report = Self {
            num_test_samples: num_test_samples.ok_or_else(|| missing("num_test_samples"))?,
            sum_accuracy: sum_accuracy.ok_or_else(|| missing("sum_accuracy"))?,
            oracle_accuracy: oracle_accuracy.ok_or_else(|| missing("oracle_accuracy"))?,
            per_modality_accuracy: dense(per_modality, "modality_accuracy")?,
            subset_accuracies: subsets,
            winner_fraction: if winners.is_empty() {
                None
            } else {
                Some(dense(winners, "winner_fraction")?)
            },
        };
        Ok(report)
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec![
            "num_test_samples".to_string(),
            "sum_accuracy".into(),
            "oracle_accuracy".into(),
        ];
        cols.extend((0..self.per_modality_accuracy.len()).map(|m| format!("modality_accuracy_{m}")));
        cols.extend(
            self.subset_accuracies
                .keys()
                .map(|s| format!("subset_accuracy_{}", s.to_string().replace(',', "_"))),
        );
        if let Some(wf) = &self.winner_fraction {
            cols.extend((0..wf.len()).map(|m| format!("winner_fraction_{m}")));
        }
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            self.num_test_samples.to_string(),
            self.sum_accuracy.to_string(),
            self.oracle_accuracy.to_string(),
        ];
        cols.extend(self.per_modality_accuracy.iter().map(f64::to_string));
        cols.extend(self.subset_accuracies.values().map(f64::to_string));
        if let Some(wf) = &self.winner_fraction {
            cols.extend(wf.iter().map(f64::to_string));
        }
        cols.join(",")
    }
}

/// Mean softmax output of the networks in `available`.
///
/// `features[m]` must be present for every available modality; the others
/// are never read, and neither are their networks.
pub fn predict_subset(
    ensemble: &Ensemble,
    features: &[Option<&[f64]>],
    available: &Subset,
) -> Result<Vec<f64>> {
    available.check_within(ensemble.num_modalities())?;
    let mut mean = vec![0.0; ensemble.num_classes()];
    for &m in available.modalities() {
        let x = features
            .get(m)
            .copied()
            .flatten()
            .ok_or_else(|| Error::Contract(format!("sample lacks modality {m}")))?;
        let x = Tensor::matrix(1, x.len(), x.to_vec())?;
        let probs = ensemble.networks[m].forward(&x)?.softmax_rows(1.0);
        mean.iter_mut().zip(probs.values()).for_each(|(a, p)| *a += p);
    }
    let k = available.modalities().len() as f64;
    mean.iter_mut().for_each(|a| *a /= k);
    Ok(mean)
}

/// `N×C` class probabilities of every network on one split.
fn split_probs(
    ensemble: &Ensemble,
    dataset: &MultimodalDataset,
    split: Split,
    modalities: &[usize],
) -> Result<Vec<Option<Tensor>>> {
    let batch = dataset.split_batch(split)?;
    let computed = parallel::map(modalities, |&m| {
        ensemble.networks[m]
            .forward(&batch.inputs[m])
            .map(|l| (m, l.softmax_rows(1.0)))
    });
    let mut out = vec![None; ensemble.num_modalities()];
    for r in computed {
        let (m, p) = r?;
        out[m] = Some(p);
    }
    Ok(out)
}

fn subset_predictions(probs: &[Option<Tensor>], subset: &Subset, n: usize) -> Vec<usize> {
    let members: Vec<&Tensor> = subset
        .modalities()
        .iter()
        .map(|&m| probs[m].as_ref().expect("probabilities computed for subset members"))
        .collect();
    let k = members.len() as f64;
    (0..n)
        .map(|i| {
            let c = members[0].cols();
            let mut mean = vec![0.0; c];
            for p in &members {
                mean.iter_mut().zip(p.row(i)).for_each(|(a, v)| *a += v);
            }
            mean.iter_mut().for_each(|a| *a /= k);
            argmax_first(&mean)
        })
        .collect()
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

fn check_compatible(ensemble: &Ensemble, dataset: &MultimodalDataset) -> Result<()> {
    if dataset.num_modalities() != ensemble.num_modalities()
        || dataset.num_classes() != ensemble.num_classes()
        || dataset.dims() != ensemble.input_dims().as_slice()
    {
        return Err(Error::Shape(
            "dataset and ensemble disagree on modalities, classes or dims".into(),
        ));
    }
    Ok(())
}

/// Test-split accuracy when only `subset` is available. Networks outside
/// the subset are not evaluated.
pub fn subset_accuracy(
    ensemble: &Ensemble,
    dataset: &MultimodalDataset,
    subset: &Subset,
) -> Result<f64> {
    check_compatible(ensemble, dataset)?;
    subset.check_within(ensemble.num_modalities())?;
    let probs = split_probs(ensemble, dataset, Split::Test, subset.modalities())?;
    let labels: Vec<usize> = dataset
        .indices(Split::Test)
        .iter()
        .map(|&i| dataset.label(i))
        .collect();
    Ok(accuracy(&subset_predictions(&probs, subset, labels.len()), &labels))
}

/// Scores the ensemble on the test split.
///
/// The report always holds every singleton and the full set in addition to
/// the requested `subsets`.
pub fn evaluate(
    ensemble: &Ensemble,
    dataset: &MultimodalDataset,
    subsets: &[Subset],
    winner_fraction: Option<Vec<f64>>,
) -> Result<EvalReport> {
    check_compatible(ensemble, dataset)?;
    let m = ensemble.num_modalities();
    for s in subsets {
        s.check_within(m)?;
    }
    let all: Vec<usize> = (0..m).collect();
    let probs = split_probs(ensemble, dataset, Split::Test, &all)?;
    let labels: Vec<usize> = dataset
        .indices(Split::Test)
        .iter()
        .map(|&i| dataset.label(i))
        .collect();
    let n = labels.len();

    let singles: Vec<Vec<usize>> = (0..m)
        .map(|k| subset_predictions(&probs, &Subset::singleton(k), n))
        .collect();
    let per_modality_accuracy: Vec<f64> = singles.iter().map(|p| accuracy(p, &labels)).collect();
    let oracle_hits = (0..n)
        .filter(|&i| singles.iter().any(|p| p[i] == labels[i]))
        .count();

    let mut wanted: Vec<Subset> = subsets.to_vec();
    wanted.push(Subset::full(m));
    wanted.extend((0..m).map(Subset::singleton));
    let subset_accuracies: BTreeMap<Subset, f64> = wanted
        .into_iter()
        .map(|s| {
            let a = accuracy(&subset_predictions(&probs, &s, n), &labels);
            (s, a)
        })
        .collect();

    let report = EvalReport {
        sum_accuracy: subset_accuracies[&Subset::full(m)],
        per_modality_accuracy,
        oracle_accuracy: oracle_hits as f64 / n as f64,
        subset_accuracies,
        winner_fraction,
        num_test_samples: n,
    };
    report.check_invariants()?;
    Ok(report)
}

/// kNN accuracy per modality (rows) and per k (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct KnnTable {
    pub k_values: Vec<usize>,
    pub accuracy: Vec<Vec<f64>>,
}

impl KnnTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("modality");
        for k in &self.k_values {
            out.push_str(&format!(",k={k}"));
        }
        out.push('\n');
        for (m, row) in self.accuracy.iter().enumerate() {
            out.push_str(&m.to_string());
            for a in row {
                out.push_str(&format!(",{a}"));
            }
            out.push('\n');
        }
        out
    }

    /// Modality with the highest accuracy at column `k_idx`, if unique.
    pub fn strict_best(&self, k_idx: usize) -> Option<usize> {
        let col: Vec<f64> = self.accuracy.iter().map(|r| r[k_idx]).collect();
        let best = argmax_first(&col);
        let unique = col
            .iter()
            .enumerate()
            .all(|(m, &a)| m == best || a < col[best]);
        unique.then_some(best)
    }
}

/// Majority vote among the `k` nearest rows of `train` to `query`.
///
/// Squared Euclidean distance; distance ties prefer the smaller dataset
/// index, vote ties the smaller class.
pub fn knn_classify(
    train: &[&[f64]],
    train_labels: &[usize],
    train_ids: &[usize],
    query: &[f64],
    k_values: &[usize],
    num_classes: usize,
) -> Vec<usize> {
    let mut nearest: Vec<(f64, usize, usize)> = train
        .iter()
        .zip(train_labels)
        .zip(train_ids)
        .map(|((row, &y), &id)| {
            let d: f64 = row.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
            (d, id, y)
        })
        .collect();
    nearest.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    k_values
        .iter()
        .map(|&k| {
            let mut votes = vec![0usize; num_classes];
            for &(_, _, y) in &nearest[..k] {
                votes[y] += 1;
            }
            let mut best = 0;
            for (c, &v) in votes.iter().enumerate() {
                if v > votes[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// kNN accuracy on the penultimate features of (untrained) networks.
pub fn knn_probe(
    ensemble: &Ensemble,
    dataset: &MultimodalDataset,
    k_values: &[usize],
) -> Result<KnnTable> {
    check_compatible(ensemble, dataset)?;
    let train_ids = dataset.indices(Split::Train);
    let test_ids = dataset.indices(Split::Test);
    if k_values.is_empty() {
        return config_err("no k values given");
    }
    if let Some(&k) = k_values.iter().find(|&&k| k == 0 || k > train_ids.len()) {
        return config_err(format!(
            "k={k} outside 1..={} (training split size)",
            train_ids.len()
        ));
    }
    let train_batch = dataset.batch(train_ids)?;
    let test_batch = dataset.batch(test_ids)?;
    let train_labels = &train_batch.labels;
    let test_labels = &test_batch.labels;
    let c = dataset.num_classes();

    let mut accuracy = Vec::with_capacity(ensemble.num_modalities());
    for (m, net) in ensemble.networks.iter().enumerate() {
        let train_f = net.penultimate_features(&train_batch.inputs[m])?;
        let test_f = net.penultimate_features(&test_batch.inputs[m])?;
        let rows: Vec<&[f64]> = (0..train_f.rows()).map(|i| train_f.row(i)).collect();
        let preds = parallel::map_range(test_f.rows(), |i| {
            knn_classify(&rows, train_labels, train_ids, test_f.row(i), k_values, c)
        });
        let row = (0..k_values.len())
            .map(|j| {
                let hits = preds
                    .iter()
                    .zip(test_labels)
                    .filter(|(p, &y)| p[j] == y)
                    .count();
                hits as f64 / test_labels.len() as f64
            })
            .collect();
        accuracy.push(row);
    }
    Ok(KnnTable {
        k_values: k_values.to_vec(),
        accuracy,
    })
}

pub const CURVES_HEADER: &str = "step,modality,mean_loss,winner_fraction";

/// Converts a metrics log into per-modality loss and winner-fraction curves,
/// optionally smoothed by a trailing mean over `smoothing` steps.
pub fn curves_from_log(log_csv: &str, smoothing: Option<usize>) -> Result<String> {
    if smoothing == Some(0) {
        return config_err("smoothing window must be at least 1");
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(log_csv.as_bytes());
    let mut records = reader.records();
    match records.next() {
        None => {
            return Err(Error::Parse {
                what: "metrics log",
                line: 1,
                reason: "missing header".into(),
            })
        }
        Some(Err(e)) => return Err(csv_error(e, 1)),
        Some(Ok(h)) => {
            let got: Vec<&str> = h.iter().collect();
            if got.join(",") != METRICS_HEADER {
                return Err(Error::Parse {
                    what: "metrics log",
                    line: 1,
                    reason: format!("expected header {METRICS_HEADER:?}"),
                });
            }
        }
    }

    struct Row {
        step: usize,
        modality: usize,
        loss: f64,
        wins: usize,
    }
    let mut rows = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| csv_error(e, 0))?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |reason: String| Error::Parse {
            what: "metrics log",
            line,
            reason,
        };
        if rec.len() != 6 {
            return Err(bad(format!("expected 6 fields, got {}", rec.len())));
        }
        let field = |i: usize| rec.get(i).expect("length checked");
        let int = |i: usize| {
            field(i)
                .parse::<usize>()
                .map_err(|_| bad(format!("bad integer {:?}", field(i))))
        };
        let loss = field(2)
            .parse::<f64>()
            .map_err(|_| bad(format!("bad loss {:?}", field(2))))?;
        rows.push(Row {
            step: int(0)?,
            modality: int(1)?,
            loss,
            wins: int(3)?,
        });
    }

    let mut step_totals: BTreeMap<usize, usize> = BTreeMap::new();
    for r in &rows {
        *step_totals.entry(r.step).or_default() += r.wins;
    }
    let mut history: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    let mut out = format!("{CURVES_HEADER}\n");
    for r in &rows {
        let total = step_totals[&r.step];
        let frac = if total == 0 {
            0.0
        } else {
            r.wins as f64 / total as f64
        };
        let (loss, frac) = match smoothing {
            None => (r.loss, frac),
            Some(w) => {
                let h = history.entry(r.modality).or_default();
                h.push((r.loss, frac));
                let tail = &h[h.len().saturating_sub(w)..];
                let k = tail.len() as f64;
                (
                    tail.iter().map(|t| t.0).sum::<f64>() / k,
                    tail.iter().map(|t| t.1).sum::<f64>() / k,
                )
            }
        };
        out.push_str(&format!("{},{},{},{}\n", r.step, r.modality, loss, frac));
    }
    Ok(out)
}

fn csv_error(e: csv::Error, fallback_line: u64) -> Error {
    let line = e.position().map_or(fallback_line, |p| p.line());
    Error::Parse {
        what: "metrics log",
        line,
        reason: e.to_string(),
    }
}

pub fn export_curves(
    log_path: impl AsRef<Path>,
    out_path: impl AsRef<Path>,
    smoothing: Option<usize>,
) -> Result<()> {
    let text = std::fs::read_to_string(log_path)?;
    std::fs::write(out_path, curves_from_log(&text, smoothing)?)?;
    Ok(())
}
