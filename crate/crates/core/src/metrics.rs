//! Accuracy, macro F1 and one-vs-rest macro AUC-ROC, plus mean ± standard
//! deviation over trials.
//!
//! Conventions:
//! * precision, recall and F1 are 0 when their denominator is 0;
//! * macro F1 averages over classes that occur in the truth or the
//!   predictions, skipping classes absent from both;
//! * AUC is the Mann–Whitney pair count with half credit for ties, averaged
//!   over classes with at least one positive and one negative.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::splits::GrowthPattern;
use crate::svm::ScoreVector;

const K: usize = GrowthPattern::COUNT;

/// Rows are truth, columns are predictions.
pub type Confusion = [[u64; K]; K];

fn check_pair(truth: &[GrowthPattern], predicted: &[GrowthPattern]) -> Result<()> {
    if truth.len() != predicted.len() {
        return Err(Error::invalid(format!(
            "{} truth labels but {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::invalid("no samples to evaluate"));
    }
    Ok(())
}

pub fn accuracy(truth: &[GrowthPattern], predicted: &[GrowthPattern]) -> Result<f64> {
    check_pair(truth, predicted)?;
    let hits = truth.iter().zip(predicted).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

pub fn confusion(truth: &[GrowthPattern], predicted: &[GrowthPattern]) -> Result<Confusion> {
    check_pair(truth, predicted)?;
    let mut m = [[0u64; K]; K];
    for (t, p) in truth.iter().zip(predicted) {
        m[t.index()][p.index()] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassStats {
    pub class: GrowthPattern,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Whether the class occurs in the truth or the predictions.
    pub present: bool,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn class_stats(m: &Confusion) -> Vec<ClassStats> {
    GrowthPattern::ALL
        .iter()
        .map(|&g| {
            let c = g.index();
            let tp = m[c][c];
            let row: u64 = m[c].iter().sum();
            let col: u64 = m.iter().map(|r| r[c]).sum();
            let precision = ratio(tp, col);
            let recall = ratio(tp, row);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassStats {
                class: g,
                precision,
                recall,
                f1,
                present: row + col > 0,
            }
        })
        .collect()
}

pub fn f1_macro(truth: &[GrowthPattern], predicted: &[GrowthPattern]) -> Result<f64> {
    let stats = class_stats(&confusion(truth, predicted)?);
    let present: Vec<f64> = stats.iter().filter(|s| s.present).map(|s| s.f1).collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Binary AUC from positive and negative scores: the fraction of
/// (positive, negative) pairs ranked correctly, ties counting half.
pub fn auc_binary(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::invalid("AUC needs at least one positive and one negative"));
    }
    if positives.iter().chain(negatives).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite score"));
    }
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Twice the Mann-Whitney U, kept in integers until the final division.
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut p, mut n) = (0u128, 0u128);
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        twice_u += 2 * p * neg_below + p * n;
        neg_below += n;
        i = j;
    }
    let pairs = positives.len() as u128 * negatives.len() as u128;
    Ok(twice_u as f64 / (2 * pairs) as f64)
}

/// Per-class one-vs-rest AUC; `None` for classes without both a positive
/// and a negative sample.
pub fn auc_per_class(truth: &[GrowthPattern], scores: &[ScoreVector]) -> Result<Vec<Option<f64>>> {
    if truth.len() != scores.len() {
        return Err(Error::invalid(format!(
            "{} labels but {} score rows",
            truth.len(),
            scores.len()
        )));
    }
    GrowthPattern::ALL
        .iter()
        .map(|&g| {
            let c = g.index();
            let (mut pos, mut neg) = (Vec::new(), Vec::new());
            for (t, s) in truth.iter().zip(scores) {
                if *t == g {
                    pos.push(s.0[c]);
                } else {
                    neg.push(s.0[c]);
                }
            }
            if pos.is_empty() || neg.is_empty() {
                Ok(None)
            } else {
                auc_binary(&pos, &neg).map(Some)
            }
        })
        .collect()
}

pub fn auc_ovr_macro(truth: &[GrowthPattern], scores: &[ScoreVector]) -> Result<f64> {
    let eligible: Vec<f64> = auc_per_class(truth, scores)?.into_iter().flatten().collect();
    if eligible.is_empty() {
        return Err(Error::invalid("no class has both positive and negative samples"));
    }
    Ok(eligible.iter().sum::<f64>() / eligible.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub f1_macro: f64,
    pub aucroc_macro: f64,
    pub per_class: Vec<ClassStats>,
    pub confusion: Confusion,
    pub n_samples: usize,
}

/// All three metrics for one evaluation unit. Predictions are the argmax of
/// each score row.
pub fn evaluate(truth: &[GrowthPattern], scores: &[ScoreVector]) -> Result<EvalReport> {
    let predicted: Vec<GrowthPattern> = scores.iter().map(ScoreVector::argmax).collect();
    evaluate_with_predictions(truth, &predicted, scores)
}

pub fn evaluate_with_predictions(
    truth: &[GrowthPattern],
    predicted: &[GrowthPattern],
    scores: &[ScoreVector],
) -> Result<EvalReport> {
    let m = confusion(truth, predicted)?;
    Ok(EvalReport {
        accuracy: accuracy(truth, predicted)?,
        f1_macro: f1_macro(truth, predicted)?,
        aucroc_macro: auc_ovr_macro(truth, scores)?,
        per_class: class_stats(&m),
        confusion: m,
        n_samples: truth.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n − 1); 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("no values to aggregate"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() == 1 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Ok(MeanStd { mean, std })
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialSummary {
    pub aucroc: MeanStd,
    pub f1_macro: MeanStd,
    pub accuracy: MeanStd,
    pub n_trials: usize,
}

pub fn aggregate_trials(reports: &[EvalReport]) -> Result<TrialSummary> {
    let pick = |f: fn(&EvalReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(TrialSummary {
        aucroc: pick(|r| r.aucroc_macro)?,
        f1_macro: pick(|r| r.f1_macro)?,
        accuracy: pick(|r| r.accuracy)?,
        n_trials: reports.len(),
    })
}

/// Plain-text table of one report: headline metrics, per-class stats and
/// the confusion matrix.
pub fn format_report(title: &str, r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{title}  (n = {})", r.n_samples);
    let _ = writeln!(s, "  AUCROC    F1-macro  accuracy");
    let _ = writeln!(s, "  {:<9.4} {:<9.4} {:.4}", r.aucroc_macro, r.f1_macro, r.accuracy);
    let _ = writeln!(s, "  {:<16} {:>9} {:>9} {:>9}", "class", "precision", "recall", "f1");
    for c in &r.per_class {
        let _ = writeln!(
            s,
            "  {:<16} {:>9.4} {:>9.4} {:>9.4}",
            c.class.name(),
            c.precision,
            c.recall,
            c.f1
        );
    }
    let _ = writeln!(
        s,
        "  confusion (rows truth, cols predicted): {}",
        GrowthPattern::ALL.map(|g| g.name()).join(" ")
    );
    for (g, row) in GrowthPattern::ALL.iter().zip(&r.confusion) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:>5}")).collect();
        let _ = writeln!(s, "  {:<16}{}", g.name(), cells.join(""));
    }
    s
}

/// One row per evaluation unit:
/// `unit,n_samples,aucroc_macro,f1_macro,accuracy`.
pub fn write_eval_csv(units: &[(String, EvalReport)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["unit", "n_samples", "aucroc_macro", "f1_macro", "accuracy"])
        .map_err(|e| Error::csv(path, e))?;
    for (name, r) in units {
        w.write_record([
            name.clone(),
            r.n_samples.to_string(),
            format!("{:?}", r.aucroc_macro),
            format!("{:?}", r.f1_macro),
            format!("{:?}", r.accuracy),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Headline metrics read back from [`write_eval_csv`] output.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub unit: String,
    pub n_samples: usize,
    pub aucroc_macro: f64,
    pub f1_macro: f64,
    pub accuracy: f64,
}

pub fn read_eval_csv(path: &Path) -> Result<Vec<EvalRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        if rec.len() != 5 {
            return Err(Error::csv(path, format!("expected 5 columns, got {}", rec.len())));
        }
        let num = |i: usize| -> Result<f64> { rec[i].parse().map_err(|e| Error::csv(path, format!("{e}"))) };
        out.push(EvalRow {
            unit: rec[0].to_string(),
            n_samples: rec[1].parse().map_err(|e| Error::csv(path, format!("{e}")))?,
            aucroc_macro: num(2)?,
            f1_macro: num(3)?,
            accuracy: num(4)?,
        });
    }
    Ok(out)
}

/// `unit,truth,<predicted classes...>`, one row per truth class.
pub fn write_confusion_csv(units: &[(String, EvalReport)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut header = vec!["unit".to_string(), "truth".into()];
    header.extend(GrowthPattern::ALL.iter().map(|g| g.name().to_string()));
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    for (name, r) in units {
        for (g, row) in GrowthPattern::ALL.iter().zip(&r.confusion) {
            let mut rec = vec![name.clone(), g.name().to_string()];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec).map_err(|e| Error::csv(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One scored tile, as exchanged between classifiers and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub tile_id: String,
    pub scores: ScoreVector,
    pub predicted: GrowthPattern,
}

/// `tile_id,<six class columns>,predicted`.
pub fn score_csv_header() -> Vec<String> {
    let mut h = vec!["tile_id".to_string()];
    h.extend(GrowthPattern::ALL.iter().map(|g| g.name().to_string()));
    h.push("predicted".into());
    h
}

pub fn write_score_csv(rows: &[ScoreRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(score_csv_header()).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        let mut rec = vec![r.tile_id.clone()];
        rec.extend(r.scores.0.iter().map(|v| format!("{v:?}")));
        rec.push(r.predicted.name().to_string());
        w.write_record(&rec).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_score_csv(path: &Path) -> Result<Vec<ScoreRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| Error::csv(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != score_csv_header() {
        return Err(Error::csv(path, format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let mut s = [0.0f64; K];
        for (c, v) in s.iter_mut().enumerate() {
            *v = rec[1 + c].parse().map_err(|e| Error::csv(path, format!("{e}")))?;
            if !v.is_finite() {
                return Err(Error::csv(path, format!("non-finite score for {}", &rec[0])));
            }
        }
        out.push(ScoreRow {
            tile_id: rec[0].to_string(),
            scores: ScoreVector(s),
            predicted: rec[1 + K].parse()?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use GrowthPattern::{Acinar as B, Lepidic as A};

    #[test]
    fn accuracy_examples() {
        assert!((accuracy(&[A, B, B], &[A, A, B]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(accuracy(&[A, B], &[A, B]).unwrap(), 1.0);
        assert_eq!(accuracy(&[A, A], &[B, B]).unwrap(), 0.0);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[A], &[A, B]).is_err());
    }

    #[test]
    fn f1_examples() {
        // Hand confusion: A→A 1, A→B 1, B→A 1, B→B 1; P = R = 0.5 per class.
        assert_eq!(f1_macro(&[A, A, B, B], &[A, B, A, B]).unwrap(), 0.5);
        let all = GrowthPattern::ALL;
        assert_eq!(f1_macro(&all, &all).unwrap(), 1.0);
        assert_eq!(f1_macro(&[A, A, A], &[A, A, A]).unwrap(), 1.0);
    }

    #[test]
    fn f1_counts_prediction_only_classes() {
        // B appears only in predictions: its F1 is 0 and it is included.
        assert_eq!(f1_macro(&[A, A], &[A, B]).unwrap(), (2.0 / 3.0 + 0.0) / 2.0);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_binary(&[0.8, 0.6], &[0.7, 0.1]).unwrap(), 0.75);
        assert_eq!(auc_binary(&[3.0, 4.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(auc_binary(&[1.0, 1.0], &[1.0, 1.0, 1.0]).unwrap(), 0.5);
        assert!(auc_binary(&[], &[1.0]).is_err());
    }

    #[test]
    fn ovr_skips_ineligible_classes() {
        let sv = |a: f64, b: f64| ScoreVector([a, b, 0.0, 0.0, 0.0, 0.0]);
        let truth = [A, A, B, B];
        let scores = [sv(0.8, 0.1), sv(0.6, 0.9), sv(0.7, 0.5), sv(0.1, 0.4)];
        let per = auc_per_class(&truth, &scores).unwrap();
        assert_eq!(per[0], Some(0.75));
        assert_eq!(per[1], Some(0.5));
        assert!(per[2..].iter().all(Option::is_none));
        assert_eq!(auc_ovr_macro(&truth, &scores).unwrap(), 0.625);
        assert!(auc_ovr_macro(&[A, A], &[sv(0.0, 0.0), sv(1.0, 1.0)]).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let m = MeanStd::of(&[0.6; 5]).unwrap();
        assert!((m.mean - 0.6).abs() < 1e-15 && m.std < 1e-15);
        let m = MeanStd::of(&[0.0, 1.0]).unwrap();
        assert_eq!(m.mean, 0.5);
        assert!((m.std - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        let m = MeanStd::of(&[0.63]).unwrap();
        assert_eq!((m.mean, m.std), (0.63, 0.0));
        assert_eq!(m.to_string(), "0.63 ± 0.00");
        assert!(MeanStd::of(&[]).is_err());
        assert!(aggregate_trials(&[]).is_err());
    }

    #[test]
    fn report_invariants() {
        let truth = [A, B, B, GrowthPattern::Solid];
        let scores = [
            ScoreVector([1.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
            ScoreVector([0.0, 2.0, 0.0, 0.0, 0.0, 0.0]),
            ScoreVector([3.0, 2.0, 0.0, 0.0, 0.0, 0.0]),
            ScoreVector([0.0, 0.0, 0.0, 0.0, 5.0, 0.0]),
        ];
        let r = evaluate(&truth, &scores).unwrap();
        let total: u64 = r.confusion.iter().flatten().sum();
        assert_eq!(total as usize, r.n_samples);
        let trace: u64 = (0..K).map(|i| r.confusion[i][i]).sum();
        assert_eq!(r.accuracy, trace as f64 / r.n_samples as f64);
        assert!(format_report("t", &r).contains("AUCROC"));
    }

    #[test]
    fn csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![ScoreRow {
            tile_id: "s_r0_c1".into(),
            scores: ScoreVector([0.1, -2.5, 1e-17, 3.0, 0.0, -0.3333333333333333]),
            predicted: GrowthPattern::Micropapillary,
        }];
        let p = dir.path().join("scores.csv");
        write_score_csv(&rows, &p).unwrap();
        assert_eq!(read_score_csv(&p).unwrap(), rows);

        let r = evaluate(
            &[A, B],
            &[ScoreVector([1.0, 0.0, 0.0, 0.0, 0.0, 0.0]), ScoreVector([0.0; 6])],
        )
        .unwrap();
        let p = dir.path().join("eval.csv");
        write_eval_csv(&[("test".into(), r.clone())], &p).unwrap();
        let back = read_eval_csv(&p).unwrap();
        assert_eq!(back[0].accuracy, r.accuracy);
        assert_eq!(back[0].aucroc_macro, r.aucroc_macro);
    }
}
