//! Classification metrics and ordinal-pattern complexity.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rvq::{reconstruct, CodeGrid, Reconstruction, ResidualQuantizer};

pub const PE_ORDER: usize = 3;
pub const PE_DELAY: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub n: usize,
}

impl MetricReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("metric\tvalue\n");
        let _ = writeln!(out, "n\t{}", self.n);
        let _ = writeln!(out, "accuracy\t{}", self.accuracy);
        let _ = writeln!(out, "macro_f1\t{}", self.macro_f1);
        for (k, f) in self.per_class_f1.iter().enumerate() {
            let _ = writeln!(out, "f1_class_{k}\t{f}");
        }
        out
    }
}

/// Accuracy and macro-F1 over all `n_classes` classes; classes with no
/// support and no predictions contribute an F1 of 0.
pub fn accuracy_mf1(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<MetricReport> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} ground-truth labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InsufficientData("no labels to score".into()));
    }
    if let Some(&bad) = pred.iter().chain(truth).find(|&&l| l >= n_classes) {
        return Err(Error::LabelOutOfRange {
            id: "<metrics>".into(),
            label: bad,
            n_classes,
        });
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fneg = vec![0usize; n_classes];
    let mut correct = 0;
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            tp[p] += 1;
            correct += 1;
        } else {
            fp[p] += 1;
            fneg[t] += 1;
        }
    }
    let per_class_f1: Vec<f64> = (0..n_classes)
        .map(|k| {
            let precision = if tp[k] + fp[k] == 0 { 0.0 } else { tp[k] as f64 / (tp[k] + fp[k]) as f64 };
            let recall = if tp[k] + fneg[k] == 0 { 0.0 } else { tp[k] as f64 / (tp[k] + fneg[k]) as f64 };
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        })
        .collect();
    Ok(MetricReport {
        accuracy: correct as f64 / pred.len() as f64,
        macro_f1: per_class_f1.iter().sum::<f64>() / n_classes as f64,
        per_class_f1,
        n: pred.len(),
    })
}

/// Lehmer-code index of the ordinal pattern of `window`; equal values are
/// ordered by position.
fn pattern_index(window: &[f64]) -> usize {
    let mut order: Vec<usize> = (0..window.len()).collect();
    order.sort_by(|&a, &b| window[a].total_cmp(&window[b]).then(a.cmp(&b)));
    let mut idx = 0;
    for i in 0..order.len() {
        let smaller = order[i + 1..].iter().filter(|&&x| x < order[i]).count();
        idx = idx * (order.len() - i) + smaller;
    }
    idx
}

/// Normalized permutation entropy in `[0, 1]`.
pub fn permutation_entropy(series: &[f64], order: usize, delay: usize) -> Result<f64> {
    if order < 2 || delay < 1 {
        return Err(Error::InvalidArgument(format!("need order >= 2 and delay >= 1, got {order}, {delay}")));
    }
    if series.len() < order * delay + 1 {
        return Err(Error::InsufficientData(format!(
            "series of length {} is too short for order {order}, delay {delay}",
            series.len()
        )));
    }
    let n_patterns: usize = (1..=order).product();
    let mut counts = vec![0usize; n_patterns];
    let span = (order - 1) * delay;
    let mut window = vec![0.0; order];
    for start in 0..series.len() - span {
        for (k, w) in window.iter_mut().enumerate() {
            *w = series[start + k * delay];
        }
        counts[pattern_index(&window)] += 1;
    }
    let total: usize = counts.iter().sum();
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    Ok((h / (n_patterns as f64).ln()).clamp(0.0, 1.0))
}

/// Mean permutation entropy of the coarse-only and fine-only reconstructions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeReport {
    pub coarse: f64,
    pub fine: f64,
}

/// Rebuilds each channel as a concatenation of code vectors (coarse alone, then
/// fine alone) and averages the permutation entropy over all channel series.
pub fn pe_report(q: &ResidualQuantizer, codes: &[CodeGrid]) -> Result<PeReport> {
    if codes.is_empty() {
        return Err(Error::InsufficientData("no code grids".into()));
    }
    let mut sums = (0.0, 0.0);
    let mut count = 0usize;
    for g in codes {
        let coarse = reconstruct(q, g, Reconstruction::CoarseOnly)?;
        let fine = reconstruct(q, g, Reconstruction::FineOnly)?;
        for d in 0..g.n_channels() {
            let cs: Vec<f64> = coarse.latents.slice(ndarray::s![d, .., ..]).iter().copied().collect();
            let fs: Vec<f64> = fine.latents.slice(ndarray::s![d, .., ..]).iter().copied().collect();
            sums.0 += permutation_entropy(&cs, PE_ORDER, PE_DELAY)?;
            sums.1 += permutation_entropy(&fs, PE_ORDER, PE_DELAY)?;
            count += 1;
        }
    }
    Ok(PeReport {
        coarse: sums.0 / count as f64,
        fine: sums.1 / count as f64,
    })
}
