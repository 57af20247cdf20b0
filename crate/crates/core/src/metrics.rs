//! Quadratic weighted kappa, confusion matrices, macro F1, accuracy, and
//! macro/binary sensitivity-specificity, including the DR/No-DR screening
//! collapse.

use std::fmt::Write as _;

use crate::data::Grade;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricsMode {
    FiveClass,
    BinaryScreening,
}

#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub mode: MetricsMode,
    pub qwk: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// (precision, recall) per class.
    pub per_class: Vec<(f64, f64)>,
}

fn check_inputs(truth: &[u8], pred: &[u8], k: usize) -> Result<()> {
    if truth.len() != pred.len() {
        return Err(Error::Metric(format!(
            "length mismatch: {} true vs {} predicted",
            truth.len(),
            pred.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Metric("empty rating lists".into()));
    }
    for &v in truth.iter().chain(pred) {
        if v as usize >= k {
            return Err(Error::Metric(format!("grade {v} out of range for k={k}")));
        }
    }
    Ok(())
}

/// k x k count matrix with rows = true, columns = predicted.
pub fn confusion(truth: &[u8], pred: &[u8], k: usize) -> Result<Vec<Vec<usize>>> {
    check_inputs(truth, pred, k)?;
    let mut o = vec![vec![0usize; k]; k];
    for (&t, &p) in truth.iter().zip(pred) {
        o[t as usize][p as usize] += 1;
    }
    Ok(o)
}

/// Quadratic weighted Cohen's kappa. The expected matrix is the outer
/// product of the marginals normalized to the same total N as the observed
/// matrix. Returns 1 when both raters are constant and equal.
pub fn qwk(truth: &[u8], pred: &[u8], k: usize) -> Result<f64> {
    let o = confusion(truth, pred, k)?;
    let n = truth.len() as f64;
    let mut row = vec![0.0; k];
    let mut col = vec![0.0; k];
    for i in 0..k {
        for j in 0..k {
            row[i] += o[i][j] as f64;
            col[j] += o[i][j] as f64;
        }
    }
    let denom_sq = ((k - 1) * (k - 1)) as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..k {
        for j in 0..k {
            let w = ((i as f64 - j as f64) * (i as f64 - j as f64)) / denom_sq;
            num += w * o[i][j] as f64;
            den += w * row[i] * col[j] / n;
        }
    }
    if den == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - num / den)
}

/// Unweighted mean over classes of 2PR/(P+R); a class with no positives on
/// either side contributes 0.
pub fn macro_f1(truth: &[u8], pred: &[u8], k: usize) -> Result<f64> {
    let o = confusion(truth, pred, k)?;
    let mut sum = 0.0;
    for c in 0..k {
        let tp = o[c][c] as f64;
        let fp: f64 = (0..k).filter(|&i| i != c).map(|i| o[i][c] as f64).sum();
        let fn_: f64 = (0..k).filter(|&j| j != c).map(|j| o[c][j] as f64).sum();
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        if p + r > 0.0 {
            sum += 2.0 * p * r / (p + r);
        }
    }
    Ok(sum / k as f64)
}

pub fn accuracy(truth: &[u8], pred: &[u8], k: usize) -> Result<f64> {
    check_inputs(truth, pred, k)?;
    let hits = truth.iter().zip(pred).filter(|(t, p)| t == p).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Collapse grades to the DR/No-DR screening view: 0 stays 0, 1..4 -> 1.
pub fn collapse_binary(grades: &[u8]) -> Vec<u8> {
    grades.iter().map(|&g| (g > 0) as u8).collect()
}

/// Five-class mode: macro one-vs-rest recall and true-negative rate,
/// excluding classes absent from the truth. Binary mode: collapse first,
/// then plain sensitivity/specificity with DR as positive.
pub fn sensitivity_specificity(
    truth: &[u8],
    pred: &[u8],
    k: usize,
    mode: MetricsMode,
) -> Result<(f64, f64)> {
    match mode {
        MetricsMode::BinaryScreening => {
            let t = collapse_binary(truth);
            let p = collapse_binary(pred);
            let o = confusion(&t, &p, 2)?;
            let (tn, fp, fn_, tp) = (o[0][0] as f64, o[0][1] as f64, o[1][0] as f64, o[1][1] as f64);
            let sens = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            let spec = if tn + fp > 0.0 { tn / (tn + fp) } else { 0.0 };
            Ok((sens, spec))
        }
        MetricsMode::FiveClass => {
            let o = confusion(truth, pred, k)?;
            let n = truth.len() as f64;
            let mut sens_sum = 0.0;
            let mut spec_sum = 0.0;
            let mut present = 0usize;
            for c in 0..k {
                let tp = o[c][c] as f64;
                let row: f64 = (0..k).map(|j| o[c][j] as f64).sum();
                if row == 0.0 {
                    continue;
                }
                present += 1;
                let col: f64 = (0..k).map(|i| o[i][c] as f64).sum();
                let fp = col - tp;
                let tn = n - row - fp;
                sens_sum += tp / row;
                spec_sum += if tn + fp > 0.0 { tn / (tn + fp) } else { 0.0 };
            }
            if present == 0 {
                return Err(Error::Metric("no class present in truth".into()));
            }
            Ok((sens_sum / present as f64, spec_sum / present as f64))
        }
    }
}

/// All metrics from one confusion pass. In binary mode every metric is
/// computed on the collapsed labels (k = 2).
pub fn report(truth: &[u8], pred: &[u8], mode: MetricsMode) -> Result<MetricsReport> {
    let (t, p, k) = match mode {
        MetricsMode::FiveClass => (truth.to_vec(), pred.to_vec(), 5),
        MetricsMode::BinaryScreening => (collapse_binary(truth), collapse_binary(pred), 2),
    };
    let o = confusion(&t, &p, k)?;
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let tp = o[c][c] as f64;
        let col: f64 = (0..k).map(|i| o[i][c] as f64).sum();
        let row: f64 = (0..k).map(|j| o[c][j] as f64).sum();
        let prec = if col > 0.0 { tp / col } else { 0.0 };
        let rec = if row > 0.0 { tp / row } else { 0.0 };
        per_class.push((prec, rec));
    }
    let (sensitivity, specificity) = sensitivity_specificity(truth, pred, 5, mode)?;
    Ok(MetricsReport {
        mode,
        qwk: qwk(&t, &p, k)?,
        macro_f1: macro_f1(&t, &p, k)?,
        accuracy: accuracy(&t, &p, k)?,
        sensitivity,
        specificity,
        per_class,
    })
}

pub fn report_from_grades(
    truth: &[Grade],
    pred: &[Grade],
    mode: MetricsMode,
) -> Result<MetricsReport> {
    let t: Vec<u8> = truth.iter().map(|g| g.value()).collect();
    let p: Vec<u8> = pred.iter().map(|g| g.value()).collect();
    report(&t, &p, mode)
}

impl MetricsReport {
    /// key=value text form used for run logs.
    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        let mode = match self.mode {
            MetricsMode::FiveClass => "five_class",
            MetricsMode::BinaryScreening => "binary_screening",
        };
        writeln!(out, "mode={mode}").unwrap();
        writeln!(out, "qwk={:.6}", self.qwk).unwrap();
        writeln!(out, "macro_f1={:.6}", self.macro_f1).unwrap();
        writeln!(out, "accuracy={:.6}", self.accuracy).unwrap();
        writeln!(out, "sensitivity={:.6}", self.sensitivity).unwrap();
        writeln!(out, "specificity={:.6}", self.specificity).unwrap();
        for (c, (p, r)) in self.per_class.iter().enumerate() {
            writeln!(out, "class_{c}_precision={p:.6}").unwrap();
            writeln!(out, "class_{c}_recall={r:.6}").unwrap();
        }
        out
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.qwk, self.macro_f1, self.accuracy, self.sensitivity, self.specificity
        )
    }
}
