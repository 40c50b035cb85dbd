//! Systematic-generalization accuracies and the o.o.d. partition tracker.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{random_input, PairDataset};
use crate::error::{Error, Result};
use crate::models::SplitModel;
use crate::tensor::Tensor;
use crate::Combo;

/// Anything that maps a batch of inputs to label tuples.
pub trait Classifier: Send + Sync {
    fn predict(&self, inputs: &Tensor) -> Result<Vec<Combo>>;
}

impl Classifier for SplitModel {
    fn predict(&self, inputs: &Tensor) -> Result<Vec<Combo>> {
        SplitModel::predict(self, inputs)
    }
}

impl<C: Classifier + ?Sized> Classifier for &C {
    fn predict(&self, inputs: &Tensor) -> Result<Vec<Combo>> {
        (**self).predict(inputs)
    }
}

/// Fraction of samples whose whole predicted tuple equals the ground truth.
pub fn test_sample_accuracy(clf: &dyn Classifier, inputs: &Tensor, truths: &[Combo]) -> Result<f64> {
    if truths.is_empty() || inputs.rows() != truths.len() {
        return Err(Error::Validation(format!(
            "need matching non-empty inputs and labels, got {} and {}",
            inputs.rows(),
            truths.len()
        )));
    }
    let preds = clf.predict(inputs)?;
    let hits = preds.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truths.len() as f64)
}

/// Fraction of inputs whose prediction is one of the test combinations.
pub fn test_set_accuracy(
    clf: &dyn Classifier,
    inputs: &Tensor,
    test_combos: &BTreeSet<Combo>,
) -> Result<f64> {
    if test_combos.is_empty() {
        return Err(Error::Validation("test combination set is empty".into()));
    }
    Ok(unseen_rate(&clf.predict(inputs)?, test_combos))
}

/// [`test_set_accuracy`] over `n` uniform `[-0.5, 0.5]` inputs.
pub fn random_set_accuracy<R: Rng + ?Sized>(
    clf: &dyn Classifier,
    input_shape: &[usize],
    test_combos: &BTreeSet<Combo>,
    n: usize,
    rng: &mut R,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::Validation("random-set accuracy needs n >= 1".into()));
    }
    let mut shape = vec![n];
    shape.extend_from_slice(input_shape);
    let inputs = random_input(&shape, rng)?;
    test_set_accuracy(clf, &inputs, test_combos)
}

fn unseen_rate(preds: &[Combo], test_combos: &BTreeSet<Combo>) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    preds.iter().filter(|p| test_combos.contains(*p)).count() as f64 / preds.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub partition_count: usize,
    pub sample_ratio: f64,
}

/// 50 of 10000, scaled: `ceil(0.005 n)`.
pub fn default_min_count(n: usize) -> usize {
    (n * 5).div_ceil(1000)
}

/// Counts predicted test combinations hit by at least `min_count` inputs.
pub fn ood_partition_report(
    clf: &dyn Classifier,
    inputs: &Tensor,
    test_combos: &BTreeSet<Combo>,
    min_count: usize,
) -> Result<OodReport> {
    Ok(ood_from_predictions(&clf.predict(inputs)?, test_combos, min_count))
}

pub fn ood_from_predictions(
    preds: &[Combo],
    test_combos: &BTreeSet<Combo>,
    min_count: usize,
) -> OodReport {
    let mut counts: BTreeMap<&Combo, usize> = BTreeMap::new();
    for p in preds.iter().filter(|p| test_combos.contains(*p)) {
        *counts.entry(p).or_default() += 1;
    }
    let big: Vec<usize> = counts.into_values().filter(|&c| c >= min_count.max(1)).collect();
    OodReport {
        partition_count: big.len(),
        sample_ratio: if preds.is_empty() {
            0.0
        } else {
            big.iter().sum::<usize>() as f64 / preds.len() as f64
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub test_sample_acc: f64,
    pub test_set_acc: f64,
    pub random_set_acc: f64,
    pub ood_partition_count: usize,
    pub ood_sample_ratio: f64,
    pub n_eval: usize,
}

impl MetricsRecord {
    pub const CSV_HEADER: &'static str =
        "test_sample_acc,test_set_acc,random_set_acc,ood_partitions,ood_ratio,n_eval";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.test_sample_acc,
            self.test_set_acc,
            self.random_set_acc,
            self.ood_partition_count,
            self.ood_sample_ratio,
            self.n_eval
        )
    }
}

/// Fixed evaluation inputs, drawn once so every snapshot of a run (and every
/// variant sharing a seed) is scored on the same samples.
#[derive(Clone, Debug)]
pub struct Evaluator {
    test_inputs: Tensor,
    test_labels: Vec<Combo>,
    random_inputs: Tensor,
    test_combos: BTreeSet<Combo>,
    min_count: usize,
}

impl Evaluator {
    pub fn new<R: Rng + ?Sized>(test: &PairDataset, n_eval: usize, rng: &mut R) -> Result<Self> {
        let test = test.truncated(n_eval);
        let test_inputs = test
            .inputs()
            .ok_or_else(|| Error::Validation("evaluation needs a non-empty test set".into()))?;
        let mut shape = vec![test.len()];
        shape.extend_from_slice(test.input_shape());
        Ok(Self {
            random_inputs: random_input(&shape, rng)?,
            test_labels: test.labels().to_vec(),
            test_combos: test.split.combos(test.role).clone(),
            min_count: default_min_count(test.len()),
            test_inputs,
        })
    }

    pub fn n_eval(&self) -> usize {
        self.test_labels.len()
    }

    pub fn test_combos(&self) -> &BTreeSet<Combo> {
        &self.test_combos
    }

    pub fn evaluate(&self, clf: &dyn Classifier) -> Result<MetricsRecord> {
        let preds = clf.predict(&self.test_inputs)?;
        let hits = preds.iter().zip(&self.test_labels).filter(|(p, t)| p == t).count();
        let test_sample_acc = hits as f64 / self.n_eval() as f64;
        let test_set_acc = unseen_rate(&preds, &self.test_combos);
        let ood = ood_from_predictions(&preds, &self.test_combos, self.min_count);
        let random = clf.predict(&self.random_inputs)?;
        let record = MetricsRecord {
            test_sample_acc,
            test_set_acc,
            random_set_acc: unseen_rate(&random, &self.test_combos),
            ood_partition_count: ood.partition_count,
            ood_sample_ratio: ood.sample_ratio,
            n_eval: self.n_eval(),
        };
        if record.test_sample_acc > record.test_set_acc {
            return Err(Error::Contract(format!(
                "test-sample accuracy {} exceeds test-set accuracy {}",
                record.test_sample_acc, record.test_set_acc
            )));
        }
        Ok(record)
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Ranks starting at 1, ties get their average rank.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson correlation of tie-averaged ranks).
/// `None` when either side is constant or lengths differ.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let (mx, _) = mean_std(&rx);
    let (my, _) = mean_std(&ry);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}
