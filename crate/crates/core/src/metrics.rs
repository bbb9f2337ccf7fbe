//! Confusion-matrix metrics in exact rational arithmetic, and split evaluation
//! at segment and participant level.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use num_rational::Ratio;
use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::corpus::{aggregate_participant, segment, Corpus, Label, SegmentConfig, Split};
use crate::error::{Error, Result};
use crate::io::write_atomic_with;
use crate::model::MentalPerceiver;
use crate::numerics::ParamStore;

pub type Rational = Ratio<u128>;

/// Counts with disorder (label 1) as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn record(&mut self, truth: Label, predicted: Label) {
        match (truth, predicted) {
            (Label::Disorder, Label::Disorder) => self.tp += 1,
            (Label::Normal, Label::Disorder) => self.fp += 1,
            (Label::Disorder, Label::Normal) => self.fn_ += 1,
            (Label::Normal, Label::Normal) => self.tn += 1,
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (Label, Label)>) -> Self {
        let mut cm = Self::default();
        for (t, p) in pairs {
            cm.record(t, p);
        }
        cm
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Undefined {
    Precision,
    Recall,
}

/// A ratio whose denominator was zero is reported as 0 and flagged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricWarning {
    pub metric: Undefined,
    pub class: u8,
}

impl fmt::Display for MetricWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let what = match self.metric {
            Undefined::Precision => "precision",
            Undefined::Recall => "recall",
        };
        write!(f, "undefined {what} for class {} (0/0 reported as 0)", self.class)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Metrics {
    pub confusion: ConfusionMatrix,
    pub accuracy: Rational,
    pub sensitivity: Rational,
    pub specificity: Rational,
    pub uar: Rational,
    /// Indexed by class.
    pub precision: [Rational; 2],
    pub recall: [Rational; 2],
    pub f1: [Rational; 2],
    pub warnings: Vec<MetricWarning>,
}

fn ratio(num: u64, den: u64) -> Option<Rational> {
    (den != 0).then(|| Rational::new(num as u128, den as u128))
}

pub fn compute_metrics(cm: ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::data("confusion matrix is empty"));
    }
    let zero = Rational::from_integer(0);
    let mut warnings = Vec::new();
    let mut flag = |v: Option<Rational>, metric, class| {
        v.unwrap_or_else(|| {
            warnings.push(MetricWarning { metric, class });
            zero
        })
    };
    // (true positives, predicted positives, actual positives) per class
    let per_class = [(cm.tn, cm.tn + cm.fn_, cm.tn + cm.fp), (cm.tp, cm.tp + cm.fp, cm.tp + cm.fn_)];
    let mut precision = [zero; 2];
    let mut recall = [zero; 2];
    let mut f1 = [zero; 2];
    for (c, &(hit, predicted, actual)) in per_class.iter().enumerate() {
        precision[c] = flag(ratio(hit, predicted), Undefined::Precision, c as u8);
        recall[c] = flag(ratio(hit, actual), Undefined::Recall, c as u8);
        f1[c] = ratio(2 * hit, predicted + actual).unwrap_or(zero);
    }
    let sensitivity = recall[1];
    let specificity = recall[0];
    Ok(Metrics {
        confusion: cm,
        accuracy: Rational::new((cm.tp + cm.tn) as u128, total as u128),
        sensitivity,
        specificity,
        uar: (sensitivity + specificity) / 2,
        precision,
        recall,
        f1,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Segment,
    Participant,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Segment => "segment",
            Level::Participant => "participant",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "segment" => Ok(Level::Segment),
            "participant" => Ok(Level::Participant),
            other => Err(Error::config(format!("unknown level `{other}` (expected segment or participant)"))),
        }
    }
}

pub fn to_f64(r: &Rational) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

fn round4<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64((v * 1e4).round() / 1e4)
}

fn round4_pair<S: Serializer>(v: &[f64; 2], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(2))?;
    for x in v {
        seq.serialize_element(&((x * 1e4).round() / 1e4))?;
    }
    seq.end()
}

/// One line of the metric report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub split: Split,
    pub level: Level,
    pub n: u64,
    #[serde(flatten)]
    pub confusion: ConfusionMatrix,
    #[serde(serialize_with = "round4")]
    pub accuracy: f64,
    #[serde(serialize_with = "round4")]
    pub uar: f64,
    #[serde(serialize_with = "round4")]
    pub sensitivity: f64,
    #[serde(serialize_with = "round4")]
    pub specificity: f64,
    #[serde(serialize_with = "round4_pair")]
    pub precision: [f64; 2],
    #[serde(serialize_with = "round4_pair")]
    pub recall: [f64; 2],
    #[serde(serialize_with = "round4_pair")]
    pub f1: [f64; 2],
    pub warnings: Vec<String>,
}

impl MetricReport {
    pub fn new(split: Split, level: Level, m: &Metrics) -> Self {
        let pair = |v: &[Rational; 2]| [to_f64(&v[0]), to_f64(&v[1])];
        Self {
            split,
            level,
            n: m.confusion.total(),
            confusion: m.confusion,
            accuracy: to_f64(&m.accuracy),
            uar: to_f64(&m.uar),
            sensitivity: to_f64(&m.sensitivity),
            specificity: to_f64(&m.specificity),
            precision: pair(&m.precision),
            recall: pair(&m.recall),
            f1: pair(&m.f1),
            warnings: m.warnings.iter().map(ToString::to_string).collect(),
        }
    }
}

/// Plain-text table of several reports.
pub fn render_table(reports: &[MetricReport]) -> String {
    let mut out = format!(
        "{:<12} {:<12} {:>5} {:>6} {:>6} {:>6} {:>6} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}\n",
        "split", "level", "n", "Acc", "UAR", "Sens", "Spec", "P(0)", "R(0)", "F1(0)", "P(1)", "R(1)", "F1(1)"
    );
    for r in reports {
        out.push_str(&format!(
            "{:<12} {:<12} {:>5} {:>6.4} {:>6.4} {:>6.4} {:>6.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}\n",
            r.split.as_str(),
            r.level.as_str(),
            r.n,
            r.accuracy,
            r.uar,
            r.sensitivity,
            r.specificity,
            r.precision[0],
            r.recall[0],
            r.f1[0],
            r.precision[1],
            r.recall[1],
            r.f1[1]
        ));
        for w in &r.warnings {
            out.push_str(&format!("  warning: {w}\n"));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub participant_id: String,
    pub level: Level,
    pub p_disorder: f64,
    pub predicted: u8,
    pub label: u8,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub split: Split,
    /// Ordered by participant id; segment rows in time order within a participant.
    pub predictions: Vec<Prediction>,
    pub reports: Vec<MetricReport>,
}

/// Segment probabilities of every participant in a split, ordered by participant id.
pub fn predict_split(
    model: &MentalPerceiver,
    params: &ParamStore<f32>,
    corpus: &Corpus,
    split: Split,
    seg: &SegmentConfig,
) -> Result<Vec<(String, Label, Vec<[f64; 2]>)>> {
    let records = corpus.split(split);
    if records.is_empty() {
        return Err(Error::data(format!("split `{split}` has no participants")));
    }
    records
        .par_iter()
        .map(|rec| {
            let segs = segment(rec, seg)?;
            let inputs: Vec<_> = segs.iter().map(|s| &s.features).collect();
            let outs = model.predict_batch(params, &inputs)?;
            let probs = outs
                .iter()
                .map(|o| [o.probabilities[0] as f64, o.probabilities[1] as f64])
                .collect();
            Ok((rec.participant_id.clone(), rec.label, probs))
        })
        .collect()
}

/// Metric reports for the requested levels plus per-record predictions.
pub fn evaluate_probabilities(
    split: Split,
    per_participant: &[(String, Label, Vec<[f64; 2]>)],
    levels: &[Level],
) -> Result<Evaluation> {
    let mut predictions = Vec::new();
    let mut reports = Vec::new();
    for &level in levels {
        let mut cm = ConfusionMatrix::default();
        for (id, label, probs) in per_participant {
            let rows: Vec<(Label, [f64; 2])> = match level {
                Level::Segment => probs
                    .iter()
                    .map(|p| (crate::model::predict_from_probabilities(*p), *p))
                    .collect(),
                Level::Participant => vec![aggregate_participant(probs)?],
            };
            for (pred, p) in rows {
                cm.record(*label, pred);
                predictions.push(Prediction {
                    participant_id: id.clone(),
                    level,
                    p_disorder: p[1],
                    predicted: pred.as_u8(),
                    label: label.as_u8(),
                });
            }
        }
        reports.push(MetricReport::new(split, level, &compute_metrics(cm)?));
    }
    Ok(Evaluation {
        split,
        predictions,
        reports,
    })
}

pub fn evaluate(
    model: &MentalPerceiver,
    params: &ParamStore<f32>,
    corpus: &Corpus,
    split: Split,
    levels: &[Level],
    seg: &SegmentConfig,
) -> Result<Evaluation> {
    let probs = predict_split(model, params, corpus, split, seg)?;
    evaluate_probabilities(split, &probs, levels)
}

pub fn write_predictions_csv(path: &Path, predictions: &[Prediction]) -> Result<()> {
    write_atomic_with(path, |w| {
        let mut csv = csv::Writer::from_writer(w);
        for p in predictions {
            csv.serialize(p).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        }
        csv.flush().map_err(|e| Error::io(path, e))
    })
}

pub fn write_reports(jsonl: &Path, table: &Path, reports: &[MetricReport]) -> Result<()> {
    let mut lines = String::new();
    for r in reports {
        lines.push_str(&serde_json::to_string(r).map_err(|e| Error::Json {
            context: jsonl.display().to_string(),
            source: e,
        })?);
        lines.push('\n');
    }
    crate::io::write_atomic(jsonl, lines.as_bytes())?;
    crate::io::write_atomic(table, render_table(reports).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn r(n: u128, d: u128) -> Rational {
        Rational::new(n, d)
    }

    #[test]
    fn hand_counted_example() {
        let m = compute_metrics(ConfusionMatrix::new(3, 1, 1, 5)).unwrap();
        assert_eq!(m.accuracy, r(4, 5));
        assert_eq!(m.precision[1], r(3, 4));
        assert_eq!(m.recall[1], r(3, 4));
        assert_eq!(m.f1[1], r(3, 4));
        assert_eq!(m.specificity, r(5, 6));
        assert!(m.warnings.is_empty());
    }

    #[test]
    fn no_positive_predictions_flags_precision() {
        let m = compute_metrics(ConfusionMatrix::new(0, 0, 4, 6)).unwrap();
        assert_eq!(m.precision[1], r(0, 1));
        assert_eq!(
            m.warnings,
            vec![MetricWarning {
                metric: Undefined::Precision,
                class: 1
            }]
        );
        assert_eq!(m.uar, r(1, 2));
        assert_eq!(m.specificity, r(1, 1));
    }

    #[test]
    fn empty_matrix_is_a_data_error() {
        assert!(matches!(compute_metrics(ConfusionMatrix::default()), Err(Error::Data(_))));
    }

    #[test]
    fn perfect_predictions() {
        let cm = ConfusionMatrix::from_pairs([(Label::Disorder, Label::Disorder), (Label::Normal, Label::Normal)]);
        let m = compute_metrics(cm).unwrap();
        assert_eq!(m.accuracy, r(1, 1));
        assert_eq!(m.uar, r(1, 1));
    }

    #[test]
    fn participant_level_uses_mean_probability() {
        let data = vec![
            ("a".to_string(), Label::Disorder, vec![[0.1, 0.9], [0.2, 0.8], [0.8, 0.2]]),
            ("b".to_string(), Label::Normal, vec![[0.6, 0.4]]),
        ];
        let ev = evaluate_probabilities(Split::Test, &data, &[Level::Segment, Level::Participant]).unwrap();
        assert_eq!(ev.reports[0].n, 4);
        assert_eq!(ev.reports[1].n, 2);
        assert_eq!(ev.reports[1].uar, 1.0);
        let part: Vec<_> = ev.predictions.iter().filter(|p| p.level == Level::Participant).collect();
        assert!((part[0].p_disorder - 1.9 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn report_rounds_at_serialization() {
        let m = compute_metrics(ConfusionMatrix::new(1, 0, 2, 3)).unwrap();
        let rep = MetricReport::new(Split::Test, Level::Segment, &m);
        assert_eq!(rep.sensitivity, 1.0 / 3.0);
        let v: serde_json::Value = serde_json::to_value(&rep).unwrap();
        assert_eq!(v["sensitivity"], serde_json::json!(0.3333));
        assert_eq!(v["fn"], serde_json::json!(2));
        assert!(render_table(&[rep]).contains("0.3333"));
    }

    proptest! {
        #[test]
        fn uar_is_exact_mean_and_accuracy_in_range(tp in 0u64..500, fp in 0u64..500, fn_ in 0u64..500, tn in 0u64..500) {
            prop_assume!(tp + fp + fn_ + tn > 0);
            let m = compute_metrics(ConfusionMatrix::new(tp, fp, fn_, tn)).unwrap();
            prop_assert_eq!(m.uar * 2, m.sensitivity + m.specificity);
            prop_assert!(m.accuracy <= r(1, 1));
        }

        #[test]
        fn balanced_equal_recalls_make_accuracy_equal_uar(n in 1u64..200, hit in 0u64..200) {
            let hit = hit.min(n);
            let m = compute_metrics(ConfusionMatrix::new(hit, n - hit, n - hit, hit)).unwrap();
            prop_assert_eq!(m.accuracy, m.uar);
        }
    }
}
