//! Training objectives: MSE regression, equal-width bin classification with cross
//! entropy, and pairwise ranking with the BPR loss in its traditional
//! (`−log σ(hi − lo)`) and modified (`σ(lo − hi)`) forms.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Real, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BprVariant {
    Traditional,
    Modified,
}

impl std::fmt::Display for BprVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BprVariant::Traditional => "traditional",
            BprVariant::Modified => "modified",
        })
    }
}

impl std::str::FromStr for BprVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "traditional" => Ok(BprVariant::Traditional),
            "modified" => Ok(BprVariant::Modified),
            other => Err(format!("unknown BPR variant `{other}` (expected traditional|modified)")),
        }
    }
}

/// What a model is trained to predict.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "objective", rename_all = "snake_case")]
pub enum Objective {
    Regression,
    Bins { k: usize },
    Bpr { variant: BprVariant },
}

impl Objective {
    /// Output width of the model head.
    pub fn head_width(&self) -> usize {
        match self {
            Objective::Bins { k } => *k,
            _ => 1,
        }
    }

    pub fn scheme(&self) -> Option<BinningScheme> {
        match self {
            Objective::Bins { k } => BinningScheme::new(*k).ok(),
            _ => None,
        }
    }

    /// Stable label used for run directories and reports: `regression`, `bins-<k>`,
    /// `bpr` (modified) or `bpr-traditional`.
    pub fn label(&self) -> String {
        match self {
            Objective::Regression => "regression".into(),
            Objective::Bins { k } => format!("bins-{k}"),
            Objective::Bpr { variant: BprVariant::Modified } => "bpr".into(),
            Objective::Bpr { variant: BprVariant::Traditional } => "bpr-traditional".into(),
        }
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if let Objective::Bins { k } = self {
            BinningScheme::new(*k)?;
        }
        Ok(())
    }
}

impl std::str::FromStr for Objective {
    type Err = String;

    /// Parses a label as produced by [`Objective::label`].
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "regression" => Ok(Objective::Regression),
            "bpr" => Ok(Objective::Bpr { variant: BprVariant::Modified }),
            "bpr-traditional" => Ok(Objective::Bpr { variant: BprVariant::Traditional }),
            _ => s
                .strip_prefix("bins-")
                .and_then(|k| k.parse().ok())
                .filter(|&k: &usize| k >= 2)
                .map(|k| Objective::Bins { k })
                .ok_or_else(|| format!("unknown objective `{s}`")),
        }
    }
}

/// `k` equal-width bins over `[0, 1]`; the last bin is closed on the right.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinningScheme {
    k: usize,
}

impl BinningScheme {
    pub fn new(k: usize) -> Result<Self, ObjectiveError> {
        if k < 2 {
            return Err(ObjectiveError::Range(format!("bin count {k} must be at least 2")));
        }
        Ok(Self { k })
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

/// `floor(score · k)`, clamped to `k − 1`.
pub fn bin_of(score: f64, scheme: BinningScheme) -> Result<usize, ObjectiveError> {
    if !(0.0..=1.0).contains(&score) {
        return Err(ObjectiveError::Range(format!("score {score} outside [0, 1]")));
    }
    Ok(((score * scheme.k as f64).floor() as usize).min(scheme.k - 1))
}

pub fn bins_of(scores: &[f64], scheme: BinningScheme) -> Result<Vec<usize>, ObjectiveError> {
    scores.iter().map(|&s| bin_of(s, scheme)).collect()
}

/// Mean of squared differences between `pred [n]` (or `[n, 1]`) and `target`.
pub fn mse_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: &[f64]) -> Result<Var, ObjectiveError> {
    let n = tape.value(pred).numel();
    if n == 0 || n != target.len() {
        return Err(ObjectiveError::Length(format!("{n} predictions, {} targets", target.len())));
    }
    let flat = tape.reshape(pred, &[n])?;
    let t = tape.constant(Tensor::from_f64(&[n], target)?);
    let diff = tape.sub(flat, t)?;
    let sq = tape.square(diff);
    Ok(tape.mean(sq)?)
}

/// Mean negative log-softmax probability of each row's target bin. With `weights`,
/// each row is weighted by the weight of its target bin and the result is
/// normalized by the total weight.
pub fn cross_entropy_bins<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &[usize],
    weights: Option<&[f64]>,
) -> Result<Var, ObjectiveError> {
    let (n, k) = match tape.value(logits).shape() {
        [n, k] => (*n, *k),
        s => return Err(ObjectiveError::Length(format!("logits of shape {s:?}"))),
    };
    if n == 0 || targets.len() != n {
        return Err(ObjectiveError::Length(format!("{n} rows, {} targets", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(ObjectiveError::Range(format!("target bin {bad} with {k} bins")));
    }
    let cols: Vec<u32> = targets.iter().map(|&t| t as u32).collect();
    let logp = tape.log_softmax(logits)?;
    let picked = tape.pick_rows(logp, &cols)?;
    let nll = tape.neg(picked);
    match weights {
        None => Ok(tape.mean(nll)?),
        Some(w) => {
            if w.len() != k {
                return Err(ObjectiveError::Length(format!("{} weights for {k} bins", w.len())));
            }
            let row_w: Vec<f64> = targets.iter().map(|&t| w[t]).collect();
            let total: f64 = row_w.iter().sum();
            if total.is_nan() || total <= 0.0 {
                return Err(ObjectiveError::Range("bin weights sum to zero".into()));
            }
            let scaled: Vec<f64> = row_w.iter().map(|v| v / total).collect();
            let wv = tape.constant(Tensor::from_f64(&[n], &scaled)?);
            let weighted = tape.mul(nll, wv)?;
            Ok(tape.sum(weighted))
        }
    }
}

/// Inverse-frequency bin weights normalized to mean 1; empty bins get weight 0.
pub fn inverse_frequency_weights(bins: &[usize], k: usize) -> Vec<f64> {
    let mut counts = vec![0usize; k];
    for &b in bins {
        counts[b] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count().max(1);
    let raw: Vec<f64> = counts.iter().map(|&c| if c > 0 { 1.0 / c as f64 } else { 0.0 }).collect();
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|w| w * present as f64 / sum).collect()
}

/// Index pairs within one batch, oriented so `hi` has the strictly higher score.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct PairSet {
    pub lo: Vec<u32>,
    pub hi: Vec<u32>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lo.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.lo.iter().zip(&self.hi).map(|(&l, &h)| (l as usize, h as usize))
    }
}

/// Every unordered pair `i < j` with unequal scores, oriented by score. Tied pairs are
/// skipped because they have no correct order.
pub fn make_pairs(scores: &[f64]) -> Result<PairSet, ObjectiveError> {
    if scores.len() < 2 {
        return Err(ObjectiveError::DegenerateBatch(format!("{} samples cannot form a pair", scores.len())));
    }
    let mut pairs = PairSet::default();
    for i in 0..scores.len() {
        for j in i + 1..scores.len() {
            let (lo, hi) = if scores[i] < scores[j] {
                (i, j)
            } else if scores[j] < scores[i] {
                (j, i)
            } else {
                continue;
            };
            pairs.lo.push(lo as u32);
            pairs.hi.push(hi as u32);
        }
    }
    if pairs.is_empty() {
        return Err(ObjectiveError::DegenerateBatch("all scores in the batch are equal".into()));
    }
    Ok(pairs)
}

/// Mean BPR loss over pairs: traditional `−log σ(hi − lo)` or modified `σ(lo − hi)`.
///
/// The traditional form is evaluated literally (sigmoid, then log) so that saturation
/// surfaces as a non-finite loss instead of being absorbed by a stabilized softplus.
pub fn bpr_loss<T: Real>(
    tape: &mut Tape<T>,
    pred_lo: Var,
    pred_hi: Var,
    variant: BprVariant,
) -> Result<Var, ObjectiveError> {
    let (a, b) = (tape.value(pred_lo).numel(), tape.value(pred_hi).numel());
    if a == 0 || a != b {
        return Err(ObjectiveError::Length(format!("{a} low and {b} high predictions")));
    }
    let lo = tape.reshape(pred_lo, &[a])?;
    let hi = tape.reshape(pred_hi, &[a])?;
    let per_pair = match variant {
        BprVariant::Modified => {
            let d = tape.sub(lo, hi)?;
            tape.sigmoid(d)
        }
        BprVariant::Traditional => {
            let d = tape.sub(hi, lo)?;
            let s = tape.sigmoid(d);
            let l = tape.log(s);
            tape.neg(l)
        }
    };
    Ok(tape.mean(per_pair)?)
}

/// BPR loss over all pairs of a batch of model outputs `pred [n]` (or `[n, 1]`).
pub fn bpr_batch_loss<T: Real>(
    tape: &mut Tape<T>,
    pred: Var,
    pairs: &PairSet,
    variant: BprVariant,
) -> Result<Var, ObjectiveError> {
    let lo = tape.gather(pred, &pairs.lo)?;
    let hi = tape.gather(pred, &pairs.hi)?;
    bpr_loss(tape, lo, hi, variant)
}
