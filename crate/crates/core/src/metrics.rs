//! Classification metrics, confusion matrices and parameter counts.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::dataset::Example;
use crate::error::{Error, Result};
use crate::extractors::PREFIX;
use crate::model::Model;
use crate::nn::ParamStore;
use crate::tensor::Real;

pub const DEFAULT_TOP_K: usize = 5;

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_predictions(labels: &[usize], preds: &[usize], classes: usize) -> Result<Self> {
        check_pairs(preds, labels)?;
        let mut cm = Self::new(classes);
        for (&t, &p) in labels.iter().zip(preds) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.classes || pred >= self.classes {
            return Err(Error::invalid(format!(
                "class pair ({truth}, {pred}) out of range for {} classes",
                self.classes
            )));
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    /// Number of samples whose true class is `c`.
    pub fn support(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    pub fn predicted(&self, c: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, c)).sum()
    }

    /// Header row of class names, then one row of counts per true class.
    pub fn to_csv(&self, class_names: &[String]) -> Result<String> {
        if class_names.len() != self.classes {
            return Err(Error::invalid(format!(
                "{} class names for a {}-class matrix",
                class_names.len(),
                self.classes
            )));
        }
        let mut out = class_names.join(",");
        out.push('\n');
        for t in 0..self.classes {
            let row: Vec<String> = (0..self.classes).map(|p| self.get(t, p).to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        Ok(out)
    }
}

fn check_pairs<T>(preds: &[T], labels: &[usize]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::invalid("metrics need at least one sample"));
    }
    if preds.len() != labels.len() {
        return Err(Error::invalid(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_pairs(preds, labels)?;
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Index of the highest probability; ties go to the lower index.
pub fn argmax_row<F: Real>(row: &[F]) -> usize {
    crate::tensor::argmax(row)
}

/// The `k` highest-probability classes, ties broken by ascending index.
pub fn top_k_classes<F: Real>(row: &[F], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn topk_accuracy<F: Real, R: AsRef<[F]>>(prob_rows: &[R], labels: &[usize], k: usize) -> Result<f64> {
    check_pairs(prob_rows, labels)?;
    let classes = prob_rows[0].as_ref().len();
    if k == 0 || k > classes {
        return Err(Error::invalid(format!("top-k needs 1 <= k <= {classes}, got k={k}")));
    }
    let mut hits = 0usize;
    for (row, &label) in prob_rows.iter().zip(labels) {
        let row = row.as_ref();
        if row.len() != classes {
            return Err(Error::shape(format!("probability rows of length {} and {classes}", row.len())));
        }
        hits += usize::from(top_k_classes(row, k).contains(&label));
    }
    Ok(hits as f64 / prob_rows.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Averaging {
    Weighted,
    Macro,
}

impl FromStr for Averaging {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted" => Ok(Averaging::Weighted),
            "macro" => Ok(Averaging::Macro),
            other => Err(Error::Config(format!("averaging must be weighted or macro, got `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrfScores {
    pub per_class: Vec<ClassScores>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn class_scores(cm: &ConfusionMatrix) -> Vec<ClassScores> {
    (0..cm.classes())
        .map(|c| {
            let tp = cm.get(c, c);
            let precision = ratio(tp, cm.predicted(c));
            let recall = ratio(tp, cm.support(c));
            // 2PR/(P+R) == 2TP/(2TP+FP+FN)
            let f1 = ratio(2 * tp, cm.predicted(c) + cm.support(c));
            ClassScores { precision, recall, f1, support: cm.support(c) }
        })
        .collect()
}

/// Per-class scores plus their average. Classes with a zero denominator
/// score 0.
pub fn precision_recall_f1(cm: &ConfusionMatrix, averaging: Averaging) -> Result<PrfScores> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::invalid("confusion matrix is empty"));
    }
    let per_class = class_scores(cm);
    let (precision, recall, f1) = match averaging {
        Averaging::Macro => {
            let n = per_class.len() as f64;
            (
                per_class.iter().map(|s| s.precision).sum::<f64>() / n,
                per_class.iter().map(|s| s.recall).sum::<f64>() / n,
                per_class.iter().map(|s| s.f1).sum::<f64>() / n,
            )
        }
        Averaging::Weighted => {
            let weighted = |f: fn(&ClassScores) -> f64| {
                per_class.iter().map(|s| s.support as f64 * f(s)).sum::<f64>() / total as f64
            };
            // Σ (support/N)·(TP/support) reduces to Σ TP / N.
            (weighted(|s| s.precision), ratio(cm.correct(), total), weighted(|s| s.f1))
        }
    };
    Ok(PrfScores { per_class, precision, recall, f1 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub trainable: usize,
    pub non_trainable: usize,
}

pub fn count_store<F: Real>(store: &ParamStore<F>) -> ParamCount {
    let mut trainable = 0;
    let mut non_trainable = 0;
    for p in store.iter() {
        if p.trainable {
            trainable += p.value.len();
        } else {
            non_trainable += p.value.len();
        }
    }
    ParamCount { total: trainable + non_trainable, trainable, non_trainable }
}

pub fn count_params<F: Real>(model: &Model<F>) -> ParamCount {
    count_store(&model.params)
}

/// Element count of the extractor parameters alone.
pub fn extractor_params<F: Real>(store: &ParamStore<F>) -> usize {
    store.iter().filter(|p| p.name.starts_with(PREFIX)).map(|p| p.value.len()).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub samples: usize,
    pub accuracy: f64,
    pub top_k: usize,
    pub top_k_accuracy: f64,
    pub weighted: PrfScores,
    pub macro_avg: PrfScores,
}

impl MetricsReport {
    /// `metric,value` rows.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("metric,value\n");
        let mut row = |k: &str, v: String| {
            let _ = writeln!(out, "{k},{v}");
        };
        row("samples", self.samples.to_string());
        row("accuracy", self.accuracy.to_string());
        row(&format!("top_{}_accuracy", self.top_k), self.top_k_accuracy.to_string());
        for (tag, s) in [("weighted", &self.weighted), ("macro", &self.macro_avg)] {
            row(&format!("{tag}_precision"), s.precision.to_string());
            row(&format!("{tag}_recall"), s.recall.to_string());
            row(&format!("{tag}_f1"), s.f1.to_string());
        }
        for (c, s) in self.weighted.per_class.iter().enumerate() {
            let name = class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
            row(&format!("precision[{name}]"), s.precision.to_string());
            row(&format!("recall[{name}]"), s.recall.to_string());
            row(&format!("f1[{name}]"), s.f1.to_string());
            row(&format!("support[{name}]"), s.support.to_string());
        }
        out
    }
}

/// Assembles every metric from probability rows.
pub fn report_from_probs<F: Real, R: AsRef<[F]>>(
    prob_rows: &[R],
    labels: &[usize],
    classes: usize,
    k: usize,
) -> Result<(MetricsReport, ConfusionMatrix)> {
    check_pairs(prob_rows, labels)?;
    if let Some(r) = prob_rows.iter().find(|r| r.as_ref().len() != classes) {
        return Err(Error::shape(format!("probability row of length {} for {classes} classes", r.as_ref().len())));
    }
    let preds: Vec<usize> = prob_rows.iter().map(|r| argmax_row(r.as_ref())).collect();
    let cm = ConfusionMatrix::from_predictions(labels, &preds, classes)?;
    let report = MetricsReport {
        samples: labels.len(),
        accuracy: accuracy(&preds, labels)?,
        top_k: k,
        top_k_accuracy: topk_accuracy(prob_rows, labels, k)?,
        weighted: precision_recall_f1(&cm, Averaging::Weighted)?,
        macro_avg: precision_recall_f1(&cm, Averaging::Macro)?,
    };
    Ok((report, cm))
}

/// Forward pass over every sample in index order.
pub fn predict_all<F: Real>(model: &Model<F>, data: &[Example<F>]) -> Result<Vec<Vec<F>>> {
    data.iter().map(|ex| model.forward(&ex.input)).collect()
}

pub fn evaluate<F: Real>(model: &Model<F>, data: &[Example<F>], k: usize) -> Result<(MetricsReport, ConfusionMatrix)> {
    if data.is_empty() {
        return Err(Error::Dataset("evaluation split is empty".into()));
    }
    let probs = predict_all(model, data)?;
    let labels: Vec<usize> = data.iter().map(|e| e.label).collect();
    report_from_probs(&probs, &labels, model.config.num_classes, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1, 2, 3], &[0, 1, 2, 0]).unwrap(), 0.75);
        assert_eq!(accuracy(&[1], &[0]).unwrap(), 0.0);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn topk_examples() {
        let rows = [vec![0.1, 0.2, 0.3, 0.4]];
        assert_eq!(topk_accuracy(&rows, &[1], 2).unwrap(), 0.0);
        assert_eq!(topk_accuracy(&rows, &[1], 3).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&rows, &[0], 4).unwrap(), 1.0);
        assert!(topk_accuracy(&rows, &[0], 5).is_err());
        let ties = [vec![0.25f64; 4]];
        assert_eq!(top_k_classes(&ties[0], 2), vec![0, 1]);
    }

    #[test]
    fn prf_two_class_example() {
        let mut cm = ConfusionMatrix::new(2);
        for _ in 0..5 {
            cm.record(0, 0).unwrap();
            cm.record(0, 1).unwrap();
        }
        for _ in 0..10 {
            cm.record(1, 1).unwrap();
        }
        let s = precision_recall_f1(&cm, Averaging::Weighted).unwrap();
        let c0 = s.per_class[0];
        let c1 = s.per_class[1];
        assert_eq!((c0.precision, c0.recall), (1.0, 0.5));
        assert!((c0.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((c1.precision - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(c1.recall, 1.0);
        assert!((c1.f1 - 0.8).abs() < 1e-15);
        assert!((s.f1 - (0.5 * 2.0 / 3.0 + 0.5 * 0.8)).abs() < 1e-15);
        assert_eq!(s.recall, 0.75);
    }

    #[test]
    fn zero_denominators_score_zero() {
        let cm = ConfusionMatrix::from_predictions(&[0, 0], &[0, 0], 3).unwrap();
        let s = precision_recall_f1(&cm, Averaging::Macro).unwrap();
        assert_eq!(s.per_class[1], ClassScores { precision: 0.0, recall: 0.0, f1: 0.0, support: 0 });
        assert!((s.recall - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn confusion_csv_layout() {
        let cm = ConfusionMatrix::from_predictions(&[0, 1, 1], &[0, 0, 1], 2).unwrap();
        let names = vec!["up".to_string(), "down".to_string()];
        assert_eq!(cm.to_csv(&names).unwrap(), "up,down\n1,0\n1,1\n");
    }

    #[test]
    fn dense_count_example() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = crate::nn::seeded_rng(0);
        crate::nn::Dense::new(&mut store, "d", 3, 2, &mut rng).unwrap();
        assert_eq!(count_store(&store), ParamCount { total: 8, trainable: 8, non_trainable: 0 });
        store.set_trainable_prefix("d", false);
        assert_eq!(count_store(&store), ParamCount { total: 8, trainable: 0, non_trainable: 8 });
    }
}
