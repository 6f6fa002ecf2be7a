//! Binary classification metrics with CGI as the positive class.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Confusion counts; `positive` means CGI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Derived {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

/// One evaluation. Serializes to flat JSON; the ROC points go to a separate
/// CSV via [`write_roc_csv`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when the evaluated labels contain only one class.
    pub auc: Option<f64>,
    #[serde(skip)]
    pub roc_points: Vec<RocPoint>,
}

pub fn confusion(labels: &[bool], predictions: &[bool]) -> Result<Confusion> {
    if labels.len() != predictions.len() {
        return Err(Error::Input(format!(
            "{} labels but {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    let mut c = Confusion::default();
    for (&y, &p) in labels.iter().zip(predictions) {
        match (y, p) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (true, false) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Accuracy, precision, recall and F1.
///
/// An empty precision denominator (no positive predictions) yields 1 when
/// nothing positive was missed and 0 otherwise; recall is symmetric with
/// false alarms. F1 is 0 when precision and recall are both 0.
pub fn derive(c: &Confusion) -> Result<Derived> {
    let total = c.total();
    if total == 0 {
        return Err(Error::Input("metrics of an empty evaluation".into()));
    }
    let ratio = |num: usize, den: usize, misses: usize| {
        if den > 0 {
            num as f64 / den as f64
        } else if misses == 0 {
            1.0
        } else {
            0.0
        }
    };
    let precision = ratio(c.tp, c.tp + c.fp, c.fn_);
    let recall = ratio(c.tp, c.tp + c.fn_, c.fp);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(Derived {
        accuracy: (c.tp + c.tn) as f64 / total as f64,
        precision,
        recall,
        f1,
    })
}

/// ROC points from (0,0) to (1,1), one per distinct score, thresholds
/// descending. Tied scores move both rates in a single step.
pub fn roc_curve(labels: &[bool], scores: &[f64]) -> Result<Vec<RocPoint>> {
    if labels.len() != scores.len() {
        return Err(Error::Input(format!("{} labels but {} scores", labels.len(), scores.len())));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Input(format!("score {i} is not finite")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Degenerate(format!(
            "ROC needs both classes ({pos} positive, {neg} negative)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(points)
}

/// Trapezoidal area under a ROC curve.
pub fn auc(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
        .sum()
}

impl MetricsReport {
    /// Builds the full report from labels, hard predictions and
    /// positive-class scores.
    pub fn from_predictions(labels: &[bool], predictions: &[bool], scores: &[f64]) -> Result<Self> {
        let c = confusion(labels, predictions)?;
        let d = derive(&c)?;
        let (roc_points, auc) = match roc_curve(labels, scores) {
            Ok(points) => {
                let a = auc(&points);
                (points, Some(a))
            }
            Err(Error::Degenerate(_)) => (Vec::new(), None),
            Err(e) => return Err(e),
        };
        Ok(Self {
            samples: c.total(),
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            tn: c.tn,
            accuracy: d.accuracy,
            precision: d.precision,
            recall: d.recall,
            f1: d.f1,
            auc,
            roc_points,
        })
    }

    pub fn confusion(&self) -> Confusion {
        Confusion {
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
            tn: self.tn,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }
}

pub fn write_roc_csv(points: &[RocPoint], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_roc_csv(path: impl AsRef<Path>) -> Result<Vec<RocPoint>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Writes the report as flat JSON plus a two-column ROC CSV next to it.
pub fn write_report(report: &MetricsReport, json: impl AsRef<Path>, roc: impl AsRef<Path>) -> Result<()> {
    report.save_json(json)?;
    write_roc_csv(&report.roc_points, roc)?;
    Ok(())
}

/// Plain-text table of reports keyed by a row name.
pub fn render_table<W: Write>(out: &mut W, rows: &[(String, &MetricsReport)]) -> Result<()> {
    writeln!(out, "{:<28} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}", "run", "n", "acc", "prec", "rec", "f1", "auc")?;
    for (name, r) in rows {
        let auc = r.auc.map_or("-".to_string(), |a| format!("{a:.4}"));
        writeln!(
            out,
            "{:<28} {:>6} {:>6.4} {:>6.4} {:>6.4} {:>6.4} {:>6}",
            name, r.samples, r.accuracy, r.precision, r.recall, r.f1, auc
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_have_no_errors() {
        let y = [true, false, true, true, false];
        let c = confusion(&y, &y).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        let d = derive(&c).unwrap();
        assert_eq!([d.accuracy, d.precision, d.recall, d.f1], [1.0; 4]);
    }

    #[test]
    fn all_positive_half_labels() {
        let y: Vec<bool> = (0..10).map(|i| i < 5).collect();
        let c = confusion(&y, &[true; 10]).unwrap();
        assert_eq!(c, Confusion { tp: 5, fp: 5, fn_: 0, tn: 0 });
    }

    #[test]
    fn hand_arithmetic() {
        let d = derive(&Confusion { tp: 3, fp: 1, fn_: 1, tn: 5 }).unwrap();
        assert_eq!(d.accuracy, 0.8);
        assert_eq!(d.precision, 0.75);
        assert_eq!(d.recall, 0.75);
        assert!((d.f1 - 0.75).abs() < 1e-15);
    }

    #[test]
    fn degenerate_conventions() {
        // no positives at all, none predicted
        let d = derive(&Confusion { tp: 0, fp: 0, fn_: 0, tn: 4 }).unwrap();
        assert_eq!((d.precision, d.recall), (1.0, 1.0));
        // nothing predicted positive but positives were missed
        let d = derive(&Confusion { tp: 0, fp: 0, fn_: 2, tn: 4 }).unwrap();
        assert_eq!((d.precision, d.recall, d.f1), (0.0, 0.0, 0.0));
        assert!(derive(&Confusion::default()).is_err());
    }

    #[test]
    fn length_mismatch_is_input_error() {
        assert!(matches!(confusion(&[true], &[]), Err(Error::Input(_))));
    }

    #[test]
    fn tied_scores_give_the_diagonal() {
        let pts = roc_curve(&[true, false, true, false], &[0.3; 4]).unwrap();
        assert_eq!(pts.len(), 2);
        assert_eq!(auc(&pts), 0.5);
    }

    #[test]
    fn separated_scores_reach_the_corner() {
        let pts = roc_curve(&[true, true, false, false], &[0.9, 0.8, 0.2, 0.1]).unwrap();
        assert!(pts.contains(&RocPoint { fpr: 0.0, tpr: 1.0 }));
        assert_eq!(auc(&pts), 1.0);
    }

    #[test]
    fn single_class_is_degenerate() {
        assert!(matches!(roc_curve(&[true, true], &[0.1, 0.2]), Err(Error::Degenerate(_))));
        let r = MetricsReport::from_predictions(&[true, true], &[true, false], &[0.9, 0.1]).unwrap();
        assert_eq!(r.auc, None);
    }

    #[test]
    fn json_is_flat() {
        let r = MetricsReport::from_predictions(&[true, false], &[true, false], &[0.9, 0.1]).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        let obj = v.as_object().unwrap();
        assert!(obj.values().all(|x| !x.is_object() && !x.is_array()));
        assert_eq!(obj["fn"], 0);
        assert_eq!(obj["auc"], 1.0);
    }
}
