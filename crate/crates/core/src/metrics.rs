//! Accuracy, F1, MCC, AUC-ROC and balanced accuracy.
//!
//! Binary tables treat class index 1 as the positive class. Multiclass tables
//! use macro-averaged F1, the Gorodkin R_K generalization of MCC and
//! one-vs-rest macro AUC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `K x K` counts indexed `[truth][prediction]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![vec![0; num_classes]; num_classes],
        }
    }

    /// Binary table from the four cells.
    pub fn binary(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        ConfusionMatrix {
            num_classes: 2,
            counts: vec![vec![tn, fp], vec![fn_, tp]],
        }
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], num_classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Shape(format!(
                "{} labels vs {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut m = Self::new(num_classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= num_classes || p >= num_classes {
                return Err(Error::invalid(format!("class index outside 0..{num_classes}")));
            }
            m.counts[t][p] += 1;
        }
        Ok(m)
    }

    pub fn tp(&self) -> u64 {
        self.counts[1][1]
    }
    pub fn tn(&self) -> u64 {
        self.counts[0][0]
    }
    pub fn fp(&self) -> u64 {
        self.counts[0][1]
    }
    pub fn fn_(&self) -> u64 {
        self.counts[1][0]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes).map(|i| self.counts[i][i]).sum()
    }

    pub fn true_count(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn predicted_count(&self, class: usize) -> u64 {
        self.counts.iter().map(|r| r[class]).sum()
    }

    fn ensure_nonempty(&self) -> Result<()> {
        if self.total() == 0 {
            Err(Error::UndefinedMetric("empty confusion matrix"))
        } else {
            Ok(())
        }
    }
}

pub fn accuracy(c: &ConfusionMatrix) -> Result<f64> {
    c.ensure_nonempty()?;
    Ok(c.trace() as f64 / c.total() as f64)
}

fn f1_from_counts(tp: u64, fp: u64, fn_: u64) -> f64 {
    if tp + fp == 0 || tp + fn_ == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Positive-class F1 for binary tables, macro F1 over the classes that occur
/// in truth or predictions otherwise.
pub fn f1(c: &ConfusionMatrix) -> Result<f64> {
    c.ensure_nonempty()?;
    if c.num_classes == 2 {
        return Ok(f1_from_counts(c.tp(), c.fp(), c.fn_()));
    }
    let mut sum = 0.0;
    let mut n = 0;
    for k in 0..c.num_classes {
        let t = c.true_count(k);
        let p = c.predicted_count(k);
        if t == 0 && p == 0 {
            continue;
        }
        let tp = c.counts[k][k];
        sum += f1_from_counts(tp, p - tp, t - tp);
        n += 1;
    }
    Ok(sum / n as f64)
}

/// Matthews correlation; zero whenever the denominator vanishes.
pub fn mcc(c: &ConfusionMatrix) -> Result<f64> {
    c.ensure_nonempty()?;
    if c.num_classes == 2 {
        let (tp, tn, fp, fn_) = (c.tp() as u128, c.tn() as u128, c.fp() as u128, c.fn_() as u128);
        let num = (tp * tn) as i128 - (fp * fn_) as i128;
        let left = (tp + fp) * (tp + fn_);
        let right = (tn + fp) * (tn + fn_);
        if left == 0 || right == 0 {
            return Ok(0.0);
        }
        return Ok(num as f64 / ((left as f64).sqrt() * (right as f64).sqrt()));
    }
    let s = c.total() as i128;
    let correct = c.trace() as i128;
    let mut pt = 0i128;
    let mut pp = 0i128;
    let mut tt = 0i128;
    for k in 0..c.num_classes {
        let p = c.predicted_count(k) as i128;
        let t = c.true_count(k) as i128;
        pt += p * t;
        pp += p * p;
        tt += t * t;
    }
    let num = correct * s - pt;
    let a = s * s - pp;
    let b = s * s - tt;
    if a == 0 || b == 0 {
        return Ok(0.0);
    }
    Ok(num as f64 / ((a as f64).sqrt() * (b as f64).sqrt()))
}

/// Mean per-class recall over classes with at least one true example.
pub fn balanced_accuracy(c: &ConfusionMatrix) -> Result<f64> {
    c.ensure_nonempty()?;
    let mut sum = 0.0;
    let mut n = 0;
    for k in 0..c.num_classes {
        let t = c.true_count(k);
        if t == 0 {
            log::warn!("class {k} has no true examples; excluded from balanced accuracy");
            continue;
        }
        sum += c.counts[k][k] as f64 / t as f64;
        n += 1;
    }
    Ok(sum / n as f64)
}

/// Mann-Whitney AUC with midranks for ties.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let midrank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let p = pos as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// One-vs-rest macro AUC over classes present with both positives and
/// negatives.
pub fn auc_ovr_macro(probabilities: &[Vec<f64>], truth: &[usize]) -> Result<f64> {
    let k = probabilities.first().map_or(0, Vec::len);
    let mut sum = 0.0;
    let mut n = 0;
    for class in 0..k {
        let labels: Vec<bool> = truth.iter().map(|&t| t == class).collect();
        if labels.iter().all(|&l| l) || !labels.iter().any(|&l| l) {
            continue;
        }
        let scores: Vec<f64> = probabilities.iter().map(|p| p[class]).collect();
        sum += auc_roc(&scores, &labels)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes"));
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Protocol {
    Standard,
    ZeroShot,
    FewShot { shots: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub accuracy: f64,
    pub f1: f64,
    pub mcc: f64,
    /// `None` when only one class is present in the truth labels.
    pub auc_roc: Option<f64>,
    pub balanced_accuracy: f64,
}

impl MetricValues {
    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "accuracy" => Some(self.accuracy),
            "f1" => Some(self.f1),
            "mcc" => Some(self.mcc),
            "auc_roc" => self.auc_roc,
            "balanced_accuracy" => Some(self.balanced_accuracy),
            _ => None,
        }
    }
}

pub const METRIC_NAMES: [&str; 5] = ["accuracy", "f1", "mcc", "auc_roc", "balanced_accuracy"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Averaging {
    pub f1: String,
    pub mcc: String,
    pub auc_roc: String,
}

impl Averaging {
    pub fn for_classes(k: usize) -> Self {
        if k == 2 {
            Averaging {
                f1: "binary-positive-class".into(),
                mcc: "binary".into(),
                auc_roc: "binary".into(),
            }
        } else {
            Averaging {
                f1: "macro".into(),
                mcc: "gorodkin".into(),
                auc_roc: "one-vs-rest-macro".into(),
            }
        }
    }
}

pub const REPORT_SCHEMA: &str = "genolm.report.v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema: String,
    pub model: String,
    pub protocol: Protocol,
    pub labels: Vec<String>,
    pub metrics: MetricValues,
    pub averaging: Averaging,
    pub confusion: ConfusionMatrix,
    pub dataset_fingerprint: String,
    pub model_fingerprint: String,
    #[serde(default)]
    pub run_config: serde_json::Value,
    /// Protocol-specific details (cluster mapping, per-shot rows, traces).
    #[serde(default)]
    pub extra: serde_json::Value,
    /// Wall-clock time of the run; the only field allowed to differ between
    /// otherwise identical runs.
    #[serde(default)]
    pub timestamp: Option<String>,
}

/// Computes every metric from predictions and class probabilities.
pub fn compute_metrics(truth: &[usize], predicted: &[usize], probabilities: &[Vec<f64>], num_classes: usize) -> Result<(MetricValues, ConfusionMatrix)> {
    let confusion = ConfusionMatrix::from_predictions(truth, predicted, num_classes)?;
    let auc = if num_classes == 2 {
        let scores: Vec<f64> = probabilities.iter().map(|p| p[1]).collect();
        let labels: Vec<bool> = truth.iter().map(|&t| t == 1).collect();
        auc_roc(&scores, &labels).ok()
    } else {
        auc_ovr_macro(probabilities, truth).ok()
    };
    let values = MetricValues {
        accuracy: accuracy(&confusion)?,
        f1: f1(&confusion)?,
        mcc: mcc(&confusion)?,
        auc_roc: auc,
        balanced_accuracy: balanced_accuracy(&confusion)?,
    };
    Ok((values, confusion))
}

impl EvaluationReport {
    pub fn new(
        model: impl Into<String>,
        protocol: Protocol,
        labels: Vec<String>,
        truth: &[usize],
        predicted: &[usize],
        probabilities: &[Vec<f64>],
    ) -> Result<Self> {
        let k = labels.len().max(2);
        let (metrics, confusion) = compute_metrics(truth, predicted, probabilities, k)?;
        Ok(EvaluationReport {
            schema: REPORT_SCHEMA.into(),
            model: model.into(),
            protocol,
            labels,
            metrics,
            averaging: Averaging::for_classes(k),
            confusion,
            dataset_fingerprint: String::new(),
            model_fingerprint: String::new(),
            run_config: serde_json::Value::Null,
            extra: serde_json::Value::Null,
            timestamp: None,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: EvaluationReport = serde_json::from_str(text)?;
        if r.schema != REPORT_SCHEMA {
            return Err(Error::Format(format!("unsupported report schema `{}`", r.schema)));
        }
        Ok(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn accuracy_examples() {
        assert!((accuracy(&ConfusionMatrix::binary(50, 40, 10, 0)).unwrap() - 0.9).abs() < 1e-15);
        assert_eq!(accuracy(&ConfusionMatrix::binary(5, 5, 0, 0)).unwrap(), 1.0);
        assert_eq!(accuracy(&ConfusionMatrix::binary(0, 0, 3, 4)).unwrap(), 0.0);
        assert!(matches!(accuracy(&ConfusionMatrix::new(2)), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn f1_examples() {
        let v = f1(&ConfusionMatrix::binary(50, 0, 10, 0)).unwrap();
        assert!((v - 10.0 / 11.0).abs() < 1e-15);
        assert_eq!(f1(&ConfusionMatrix::binary(7, 3, 0, 0)).unwrap(), 1.0);
        assert_eq!(f1(&ConfusionMatrix::binary(0, 5, 4, 0)).unwrap(), 0.0);
    }

    #[test]
    fn mcc_examples() {
        assert_eq!(mcc(&ConfusionMatrix::binary(10, 10, 0, 0)).unwrap(), 1.0);
        assert_eq!(mcc(&ConfusionMatrix::binary(25, 25, 25, 25)).unwrap(), 0.0);
        // (45*35 - 15*5) / sqrt(60*50*50*40) = 1500 / sqrt(6e6)
        let v = mcc(&ConfusionMatrix::binary(45, 35, 15, 5)).unwrap();
        assert!((v - 1500.0 / 6_000_000f64.sqrt()).abs() < 1e-12);
        assert_eq!(mcc(&ConfusionMatrix::binary(10, 0, 5, 0)).unwrap(), 0.0);
    }

    #[test]
    fn gorodkin_reduces_to_binary() {
        // A 3-class matrix with an empty class equals the 2-class MCC.
        let mut m = ConfusionMatrix::new(3);
        m.counts[0][0] = 35;
        m.counts[0][1] = 15;
        m.counts[1][0] = 5;
        m.counts[1][1] = 45;
        let bin = mcc(&ConfusionMatrix::binary(45, 35, 15, 5)).unwrap();
        assert!((mcc(&m).unwrap() - bin).abs() < 1e-12);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_roc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc_roc(&[0.5; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert!(auc_roc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn balanced_accuracy_examples() {
        assert_eq!(balanced_accuracy(&ConfusionMatrix::binary(10, 10, 0, 0)).unwrap(), 1.0);
        // all-positive on 90 negatives / 10 positives
        assert_eq!(balanced_accuracy(&ConfusionMatrix::binary(10, 0, 90, 0)).unwrap(), 0.5);
    }

    #[test]
    fn seven_class_random_balanced_accuracy() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 7000;
        let truth: Vec<usize> = (0..n).map(|i| i % 7).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..7)).collect();
        let c = ConfusionMatrix::from_predictions(&truth, &pred, 7).unwrap();
        let ba = balanced_accuracy(&c).unwrap();
        // per-class recall sd = sqrt(p(1-p)/1000) ~ 0.011; mean of 7 ~ 0.0042
        assert!((ba - 1.0 / 7.0).abs() < 4.0 * 0.0042, "{ba}");
    }

    #[test]
    fn report_json_round_trip() {
        let truth = [0, 1, 1, 0, 1];
        let pred = [0, 1, 0, 0, 1];
        let probs: Vec<Vec<f64>> = [0.2, 0.9, 0.4, 0.1, 0.7].iter().map(|&p| vec![1.0 - p, p]).collect();
        let r = EvaluationReport::new("m", Protocol::FewShot { shots: 5 }, vec!["a".into(), "b".into()], &truth, &pred, &probs).unwrap();
        let back = EvaluationReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        assert_eq!(r.metrics.auc_roc, Some(1.0));
    }
}
