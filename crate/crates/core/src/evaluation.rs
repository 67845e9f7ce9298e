//! Metrics for predicted difficulty orderings and their aggregation across seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::argmax_rows;
use crate::objectives::{bin_of, BinningScheme, Objective};
use crate::rng::SplitMix64;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

fn same_len(a: usize, b: usize) -> Result<(), EvalError> {
    if a != b {
        return Err(EvalError::Length(format!("{a} predictions, {b} targets")));
    }
    Ok(())
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // Ranks start+1 ..= end, averaged.
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(pred: &[f64], truth: &[f64]) -> Result<f64, EvalError> {
    same_len(pred.len(), truth.len())?;
    if pred.len() < 2 {
        return Err(EvalError::Degenerate(format!("{} samples", pred.len())));
    }
    if pred.iter().any(|v| v.is_nan()) || truth.iter().any(|v| v.is_nan()) {
        return Err(EvalError::Range("NaN in rank correlation input".into()));
    }
    let constant = |v: &[f64]| v.iter().all(|&x| x == v[0]);
    if constant(pred) {
        return Err(EvalError::Degenerate("predictions are constant".into()));
    }
    if constant(truth) {
        return Err(EvalError::Degenerate("ground truth is constant".into()));
    }
    Ok(pearson(&average_ranks(pred), &average_ranks(truth)))
}

/// Fixed-permutation evaluation of pairwise ordering accuracy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairEvalSpec {
    pub permutation_seed: u64,
    pub eval_batch: usize,
}

impl Default for PairEvalSpec {
    fn default() -> Self {
        Self { permutation_seed: 0, eval_batch: 512 }
    }
}

/// Correct and total pair counts from one block of aligned values.
fn block_pairs(pred: &[f64], truth: &[f64]) -> (u64, u64) {
    let (mut correct, mut total) = (0, 0);
    for i in 0..truth.len() {
        for j in i + 1..truth.len() {
            let t = truth[j] - truth[i];
            if t == 0.0 {
                continue;
            }
            total += 1;
            let p = pred[j] - pred[i];
            if p != 0.0 && (p > 0.0) == (t > 0.0) {
                correct += 1;
            }
        }
    }
    (correct, total)
}

/// Permutes both arrays with a SplitMix64 permutation seeded by
/// `spec.permutation_seed`, cuts the result into consecutive blocks of
/// `spec.eval_batch`, and scores every pair with unequal truth inside a block.
/// Predicted ties count as incorrect.
pub fn pairwise_accuracy(pred: &[f64], truth: &[f64], spec: &PairEvalSpec) -> Result<f64, EvalError> {
    same_len(pred.len(), truth.len())?;
    if spec.eval_batch < 2 {
        return Err(EvalError::Config(format!("eval_batch {} must be at least 2", spec.eval_batch)));
    }
    let perm = SplitMix64::new(spec.permutation_seed).permutation(pred.len());
    let p: Vec<f64> = perm.iter().map(|&i| pred[i]).collect();
    let t: Vec<f64> = perm.iter().map(|&i| truth[i]).collect();
    let (mut correct, mut total) = (0u64, 0u64);
    for (pb, tb) in p.chunks(spec.eval_batch).zip(t.chunks(spec.eval_batch)) {
        let (c, n) = block_pairs(pb, tb);
        correct += c;
        total += n;
    }
    if total == 0 {
        return Err(EvalError::Degenerate("no pairs with unequal ground truth".into()));
    }
    Ok(correct as f64 / total as f64)
}

/// Bin accuracy from `[n × k]` logits, and its margin over the `1/k` random baseline.
pub fn bin_accuracy_over_baseline(logits: &[f64], k: usize, true_bins: &[usize]) -> Result<(f64, f64), EvalError> {
    if k < 2 {
        return Err(EvalError::Range(format!("bin count {k}")));
    }
    if logits.len() != true_bins.len() * k {
        return Err(EvalError::Length(format!("{} logits for {} rows of {k}", logits.len(), true_bins.len())));
    }
    if true_bins.is_empty() {
        return Err(EvalError::Degenerate("no samples".into()));
    }
    if let Some(&bad) = true_bins.iter().find(|&&b| b >= k) {
        return Err(EvalError::Range(format!("true bin {bad} with {k} bins")));
    }
    let hits = argmax_rows(logits, k).iter().zip(true_bins).filter(|(a, b)| a == b).count();
    let acc = hits as f64 / true_bins.len() as f64;
    Ok((acc, acc - 1.0 / k as f64))
}

pub fn mse_eval(pred: &[f64], target: &[f64]) -> Result<f64, EvalError> {
    same_len(pred.len(), target.len())?;
    if pred.is_empty() {
        return Err(EvalError::Length("no samples".into()));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

/// Equal-width counts over `[0, 1]`; the last bin is closed on the right.
pub fn score_histogram(scores: &[f64], bins: usize) -> Result<Vec<usize>, EvalError> {
    if bins == 0 {
        return Err(EvalError::Config("histogram needs at least one bin".into()));
    }
    let mut counts = vec![0; bins];
    for &s in scores {
        if !(0.0..=1.0).contains(&s) {
            return Err(EvalError::Range(format!("score {s} outside [0, 1]")));
        }
        counts[((s * bins as f64).floor() as usize).min(bins - 1)] += 1;
    }
    Ok(counts)
}

/// Ground-truth vector for rank correlation: raw scores, or bin indices for bin models.
pub fn src_ground_truth(objective: &Objective, scores: &[f64]) -> Result<Vec<f64>, EvalError> {
    match objective {
        Objective::Bins { k } => {
            let scheme = BinningScheme::new(*k).map_err(|e| EvalError::Config(e.to_string()))?;
            scores
                .iter()
                .map(|&s| bin_of(s, scheme).map(|b| b as f64).map_err(|e| EvalError::Range(e.to_string())))
                .collect()
        }
        Objective::Regression | Objective::Bpr { .. } => Ok(scores.to_vec()),
    }
}

pub type MetricSet = BTreeMap<String, f64>;

/// Every metric that applies to `objective`, from raw model outputs `[n × head_width]`.
/// Metrics that are undefined for the inputs (e.g. rank correlation of constant
/// predictions) are left out.
pub fn compute_metrics(
    objective: &Objective,
    outputs: &[f64],
    scores: &[f64],
    pair_spec: &PairEvalSpec,
) -> Result<MetricSet, EvalError> {
    let mut m = MetricSet::new();
    let truth = src_ground_truth(objective, scores)?;
    match objective {
        Objective::Regression | Objective::Bpr { .. } => {
            same_len(outputs.len(), scores.len())?;
            if let Objective::Regression = objective {
                let mse = mse_eval(outputs, scores)?;
                m.insert("mse".into(), mse);
                m.insert("rmse".into(), mse.sqrt());
            }
            if let Ok(acc) = pairwise_accuracy(outputs, scores, pair_spec) {
                m.insert("pair_acc".into(), acc);
                m.insert("pair_acc_over_baseline".into(), acc - 0.5);
            }
            if let Ok(src) = spearman(outputs, &truth) {
                m.insert("src".into(), src);
            }
        }
        Objective::Bins { k } => {
            let bins: Vec<usize> = truth.iter().map(|&b| b as usize).collect();
            let (acc, over) = bin_accuracy_over_baseline(outputs, *k, &bins)?;
            m.insert("bin_acc".into(), acc);
            m.insert("bin_acc_over_baseline".into(), over);
            let predicted: Vec<f64> = argmax_rows(outputs, *k).into_iter().map(|b| b as f64).collect();
            if let Ok(src) = spearman(&predicted, &truth) {
                m.insert("src".into(), src);
            }
        }
    }
    Ok(m)
}

/// One metric for one method on one dataset, across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub method: String,
    pub metric: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n − 1); absent with fewer than two seeds.
    pub std: Option<f64>,
}

impl EvalReport {
    pub fn new(dataset: &str, method: &str, metric: &str, values: Vec<(u64, f64)>) -> Result<Self, EvalError> {
        if values.is_empty() {
            return Err(EvalError::Degenerate(format!("no values for {method}/{dataset}/{metric}")));
        }
        if let Some((seed, v)) = values.iter().find(|(_, v)| !v.is_finite()) {
            return Err(EvalError::Range(format!("seed {seed}: non-finite {metric} {v}")));
        }
        let (seeds, per_seed): (Vec<u64>, Vec<f64>) = values.into_iter().unzip();
        let n = per_seed.len() as f64;
        let mean = per_seed.iter().sum::<f64>() / n;
        let std = (per_seed.len() >= 2)
            .then(|| (per_seed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Ok(Self { dataset: dataset.into(), method: method.into(), metric: metric.into(), seeds, per_seed, mean, std })
    }
}

/// Display name of a method label in summary tables (`bins-5` → `BINS-5`).
pub fn method_display(label: &str) -> String {
    label.to_uppercase()
}

fn method_rank(label: &str) -> (usize, usize) {
    match label {
        "bpr" => (0, 0),
        "bpr-traditional" => (1, 0),
        "regression" => (2, 0),
        other => match other.strip_prefix("bins-").and_then(|k| k.parse().ok()) {
            Some(k) => (3, k),
            None => (4, 0),
        },
    }
}

/// Dataset × method table of one metric (mean and standard deviation over seeds).
/// `datasets` fixes the row-group order; reports for other datasets follow.
pub fn render_table(reports: &[EvalReport], metric: &str, datasets: &[&str], note: Option<&str>) -> String {
    let mut rows: Vec<&EvalReport> = reports.iter().filter(|r| r.metric == metric).collect();
    let ds_rank = |d: &str| datasets.iter().position(|x| *x == d).unwrap_or(datasets.len());
    rows.sort_by(|a, b| {
        (ds_rank(&a.dataset), &a.dataset, method_rank(&a.method), &a.method).cmp(&(
            ds_rank(&b.dataset),
            &b.dataset,
            method_rank(&b.method),
            &b.method,
        ))
    });
    let header = metric.to_uppercase();
    let mut out = String::new();
    if let Some(note) = note {
        writeln!(out, "# {note}").unwrap();
    }
    let w = rows.iter().map(|r| r.dataset.len()).max().unwrap_or(0).max("Dataset".len());
    writeln!(out, "{:<w$} {:<16} {:>10} {:>10} {:>6}", "Dataset", "Method", header, "Std. Dev", "Seeds").unwrap();
    let mut last = None;
    for r in rows {
        if last.is_some() && last != Some(&r.dataset) {
            writeln!(out, "{}", "-".repeat(w + 46)).unwrap();
        }
        last = Some(&r.dataset);
        let std = r.std.map_or_else(|| "-".to_string(), |s| format!("{s:.6}"));
        writeln!(
            out,
            "{:<w$} {:<16} {:>10.6} {:>10} {:>6}",
            r.dataset,
            method_display(&r.method),
            r.mean,
            std,
            r.per_seed.len()
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn spearman_examples() {
        let a = [0.1, 0.5, 0.3, 0.9];
        assert_eq!(spearman(&a, &a).unwrap(), 1.0);
        let rev: Vec<f64> = a.iter().map(|v| -v).collect();
        assert_eq!(spearman(&rev, &a).unwrap(), -1.0);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - (1.0 - 6.0 * 2.0 / (4.0 * 15.0))).abs() < 1e-12);
    }

    #[test]
    fn spearman_ties_and_errors() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!(matches!(spearman(&[1.0, 1.0], &[0.0, 1.0]), Err(EvalError::Degenerate(_))));
        assert!(matches!(spearman(&[0.0, 1.0], &[2.0, 2.0]), Err(EvalError::Degenerate(_))));
        assert!(matches!(spearman(&[0.0], &[1.0]), Err(EvalError::Degenerate(_))));
        assert!(matches!(spearman(&[0.0, 1.0], &[1.0]), Err(EvalError::Length(_))));
    }

    #[test]
    fn pairwise_examples() {
        let truth = [0.1, 0.4, 0.2, 0.9, 0.5];
        let spec = PairEvalSpec { permutation_seed: 1, eval_batch: 512 };
        assert_eq!(pairwise_accuracy(&truth, &truth, &spec).unwrap(), 1.0);
        assert_eq!(pairwise_accuracy(&[0.3; 5], &truth, &spec).unwrap(), 0.0);
        assert!(matches!(pairwise_accuracy(&[0.1, 0.2], &[0.5, 0.5], &spec), Err(EvalError::Degenerate(_))));
        let bad = PairEvalSpec { eval_batch: 1, ..spec };
        assert!(matches!(pairwise_accuracy(&truth, &truth, &bad), Err(EvalError::Config(_))));
    }

    #[test]
    fn pairwise_block_mode_matches_loop() {
        let mut rng = SplitMix64::new(44);
        let pred: Vec<f64> = (0..20).map(|_| rng.next_f64()).collect();
        let truth: Vec<f64> = (0..20).map(|_| (rng.next_f64() * 4.0).floor()).collect();
        let spec = PairEvalSpec { permutation_seed: 9, eval_batch: 5 };
        let perm = SplitMix64::new(9).permutation(20);
        let (mut correct, mut total) = (0u64, 0u64);
        for block in 0..4 {
            for a in 0..5 {
                for b in 0..5 {
                    let (i, j) = (perm[block * 5 + a], perm[block * 5 + b]);
                    if truth[i] < truth[j] {
                        total += 1;
                        if pred[i] < pred[j] {
                            correct += 1;
                        }
                    }
                }
            }
        }
        let expected = correct as f64 / total as f64;
        assert_eq!(pairwise_accuracy(&pred, &truth, &spec).unwrap(), expected);
    }

    #[test]
    fn bin_accuracy_examples() {
        let k = 5;
        let bins = [0usize, 3, 4, 1];
        let mut logits = vec![0.0; 4 * k];
        for (r, &b) in bins.iter().enumerate() {
            logits[r * k + b] = 1.0;
        }
        let (acc, over) = bin_accuracy_over_baseline(&logits, k, &bins).unwrap();
        assert_eq!(acc, 1.0);
        assert!((over - 0.8).abs() < 1e-15);

        // Constant prediction of the majority bin.
        let truth = [2usize, 2, 2, 0, 1];
        let mut constant = vec![0.0; 5 * 3];
        for r in 0..5 {
            constant[r * 3 + 2] = 1.0;
        }
        assert_eq!(bin_accuracy_over_baseline(&constant, 3, &truth).unwrap().0, 0.6);
        assert!(matches!(bin_accuracy_over_baseline(&constant, 3, &[0, 0, 0, 0, 3]), Err(EvalError::Range(_))));
    }

    #[test]
    fn random_guessing_has_no_margin() {
        let mut rng = SplitMix64::new(123);
        let (n, k) = (100_000, 10);
        let truth: Vec<usize> = (0..n).map(|_| rng.below(k as u64) as usize).collect();
        let logits: Vec<f64> = (0..n * k).map(|_| rng.next_f64()).collect();
        let (_, over) = bin_accuracy_over_baseline(&logits, k, &truth).unwrap();
        assert!(over.abs() < 0.01, "{over}");
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_eval(&[0.2, 0.4], &[0.2, 0.4]).unwrap(), 0.0);
        assert_eq!(mse_eval(&[0.5; 4], &[0.0, 1.0, 0.0, 1.0]).unwrap(), 0.25);
        assert!(matches!(mse_eval(&[0.5], &[0.0, 1.0]), Err(EvalError::Length(_))));
    }

    #[test]
    fn histogram_examples() {
        assert_eq!(score_histogram(&[0.0, 0.5, 1.0], 2).unwrap(), vec![1, 2]);
        let h = score_histogram(&[1.0; 7], 10).unwrap();
        assert_eq!(h[9], 7);
        assert!(matches!(score_histogram(&[0.5], 0), Err(EvalError::Config(_))));
    }

    #[test]
    fn ground_truth_vectors() {
        let truth = src_ground_truth(&Objective::Bins { k: 5 }, &[0.1, 0.9]).unwrap();
        assert_eq!(truth, vec![0.0, 4.0]);
        assert_eq!(src_ground_truth(&Objective::Regression, &[0.3, 0.7]).unwrap(), vec![0.3, 0.7]);
        assert_eq!(src_ground_truth(&Objective::Bins { k: 40 }, &[0.5]).unwrap(), vec![20.0]);
        assert!(matches!(src_ground_truth(&Objective::Bins { k: 1 }, &[0.5]), Err(EvalError::Config(_))));
    }

    #[test]
    fn report_statistics() {
        let r = EvalReport::new("cifar100", "bpr", "src", vec![(0, 0.4), (1, 0.5)]).unwrap();
        assert!((r.mean - 0.45).abs() < 1e-15);
        assert!((r.std.unwrap() - (0.005f64).sqrt()).abs() < 1e-12);
        assert!(EvalReport::new("d", "m", "src", vec![(0, 0.3)]).unwrap().std.is_none());
        assert!(EvalReport::new("d", "m", "src", vec![(0, f64::NAN)]).is_err());
        let json = serde_json::to_value(&r).unwrap();
        for key in ["dataset", "method", "metric", "per_seed", "mean", "std"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn table_layout() {
        let reports = vec![
            EvalReport::new("cifar10", "bins-5", "src", vec![(0, 0.1), (1, 0.12)]).unwrap(),
            EvalReport::new("cifar100", "regression", "src", vec![(0, 0.36), (1, 0.37)]).unwrap(),
            EvalReport::new("cifar100", "bpr", "src", vec![(0, 0.44), (1, 0.45)]).unwrap(),
        ];
        let table = render_table(&reports, "src", &["cifar100", "cifar10"], Some("desk profile"));
        let lines: Vec<&str> = table.lines().collect();
        assert!(lines[0].contains("desk profile"));
        assert!(lines[1].contains("SRC") && lines[1].contains("Std. Dev"));
        assert!(lines[2].contains("BPR"));
        assert!(lines[3].contains("REGRESSION"));
        assert!(lines[5].contains("BINS-5"));
    }

    proptest! {
        #[test]
        fn spearman_invariances(values in proptest::collection::vec((0u8..6, 0u8..6), 3..30)) {
            let a: Vec<f64> = values.iter().map(|v| v.0 as f64).collect();
            let b: Vec<f64> = values.iter().map(|v| v.1 as f64).collect();
            prop_assume!(a.iter().any(|&x| x != a[0]) && b.iter().any(|&x| x != b[0]));
            let base = spearman(&a, &b).unwrap();
            let cubed: Vec<f64> = a.iter().map(|x| x.powi(3) + 2.0).collect();
            prop_assert!((spearman(&cubed, &b).unwrap() - base).abs() < 1e-12);
            prop_assert!((spearman(&b, &a).unwrap() - base).abs() < 1e-12);
            prop_assert!((spearman(&a, &a).unwrap() - 1.0).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&base));
        }

        #[test]
        fn exact_mode_ignores_permutation_seed(
            pairs in proptest::collection::vec((0.0f64..1.0, 0u8..5), 2..40),
            s1 in any::<u64>(),
            s2 in any::<u64>(),
        ) {
            let pred: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let truth: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
            prop_assume!(truth.iter().any(|&t| t != truth[0]));
            let n = pred.len();
            let a = pairwise_accuracy(&pred, &truth, &PairEvalSpec { permutation_seed: s1, eval_batch: n }).unwrap();
            let b = pairwise_accuracy(&pred, &truth, &PairEvalSpec { permutation_seed: s2, eval_batch: n + 7 }).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn histogram_counts_sum(scores in proptest::collection::vec(0.0f64..=1.0, 0..200), bins in 1usize..50) {
            prop_assert_eq!(score_histogram(&scores, bins).unwrap().iter().sum::<usize>(), scores.len());
        }
    }
}
