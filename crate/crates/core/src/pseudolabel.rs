//! Channel-weighted Bayesian pseudo-labels and confident-subset selection.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{DomainDataset, Role, TimeSeriesInstance};
use crate::error::{Error, Result};
use crate::markov::{log_likelihood, ClassChannelTm, LikelihoodNorm};
use crate::par;
use crate::record::{self, Header};
use crate::rvq::{encode_instance, ResidualQuantizer};
use crate::transport::ChannelWeights;

/// Prior probabilities below this are raised to it before taking logs.
pub const PRIOR_FLOOR: f64 = 1e-12;

pub const PSEUDO_LABEL_KIND: &str = "pseudo_labels";
pub const SELECTION_KIND: &str = "selection";

/// Class prior with a temperature; the log prior enters as `ln p(k) / tau`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelPrior {
    pub probs: Vec<f64>,
    pub tau: f64,
}

impl LabelPrior {
    /// Validates that `probs` sums to 1 within `1e-6`, floors tiny entries,
    /// and renormalizes.
    pub fn new(probs: Vec<f64>, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
        }
        if probs.is_empty() {
            return Err(Error::InvalidArgument("prior has no classes".into()));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::InvalidArgument("prior entries must be finite and non-negative".into()));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!("prior sums to {s}, expected 1")));
        }
        let floored: Vec<f64> = probs.iter().map(|p| p.max(PRIOR_FLOOR)).collect();
        let s: f64 = floored.iter().sum();
        Ok(LabelPrior {
            probs: floored.into_iter().map(|p| p / s).collect(),
            tau,
        })
    }

    pub fn uniform(n_classes: usize, tau: f64) -> Result<Self> {
        Self::new(vec![1.0 / n_classes as f64; n_classes], tau)
    }

    pub fn n_classes(&self) -> usize {
        self.probs.len()
    }
}

/// Posterior over classes for one channel, normalized with log-sum-exp.
pub fn channel_posterior(logliks: &[f64], prior: &LabelPrior) -> Result<Vec<f64>> {
    if logliks.len() != prior.n_classes() {
        return Err(Error::InvalidArgument(format!(
            "{} log-likelihoods for a {}-class prior",
            logliks.len(),
            prior.n_classes()
        )));
    }
    if logliks.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("log-likelihoods must be finite".into()));
    }
    let logits: Vec<f64> = logliks
        .iter()
        .zip(&prior.probs)
        .map(|(ll, p)| ll + p.ln() / prior.tau)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Weighted channel-posterior aggregate for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    /// `scores[k] = (1/D) * sum_d w_d * posterior[d][k]`; not renormalized.
    pub scores: Vec<f64>,
    pub label: usize,
    pub confidence: f64,
    /// `D x K`, each row a simplex.
    pub per_channel_posteriors: Vec<Vec<f64>>,
}

/// First index of the maximum.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn aggregate(posteriors: Vec<Vec<f64>>, weights: &ChannelWeights) -> Result<PseudoLabel> {
    let d = posteriors.len();
    if d == 0 || d != weights.w.len() {
        return Err(Error::InvalidArgument(format!(
            "{d} channel posteriors for {} channel weights",
            weights.w.len()
        )));
    }
    let k = posteriors[0].len();
    if posteriors.iter().any(|row| row.len() != k) || k == 0 {
        return Err(Error::InvalidArgument("posterior rows differ in class count".into()));
    }
    let mut scores = vec![0.0; k];
    for (row, w) in posteriors.iter().zip(&weights.w) {
        for (s, p) in scores.iter_mut().zip(row) {
            *s += w * p;
        }
    }
    for s in &mut scores {
        *s /= d as f64;
    }
    let label = argmax(&scores);
    Ok(PseudoLabel {
        confidence: scores[label],
        label,
        scores,
        per_channel_posteriors: posteriors,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelOptions {
    pub epsilon: f64,
    pub norm: LikelihoodNorm,
}

impl Default for LabelOptions {
    fn default() -> Self {
        LabelOptions {
            epsilon: crate::markov::DEFAULT_EPSILON,
            norm: LikelihoodNorm::Length,
        }
    }
}

/// A ready-to-use labeler: smoothed class model plus weights and prior.
pub struct Labeler<'a> {
    q: &'a ResidualQuantizer,
    model: ClassChannelTm,
    weights: &'a ChannelWeights,
    prior: &'a LabelPrior,
    norm: LikelihoodNorm,
}

impl<'a> Labeler<'a> {
    pub fn new(
        q: &'a ResidualQuantizer,
        model: &ClassChannelTm,
        weights: &'a ChannelWeights,
        prior: &'a LabelPrior,
        opts: &LabelOptions,
    ) -> Result<Self> {
        if model.n_codes() != q.n_coarse() {
            return Err(Error::Incompatible(format!(
                "model has {} codes, quantizer {}",
                model.n_codes(),
                q.n_coarse()
            )));
        }
        if weights.w.len() != model.n_channels {
            return Err(Error::Incompatible(format!(
                "{} channel weights for a {}-channel model",
                weights.w.len(),
                model.n_channels
            )));
        }
        if prior.n_classes() != model.n_classes {
            return Err(Error::Incompatible(format!(
                "{}-class prior for a {}-class model",
                prior.n_classes(),
                model.n_classes
            )));
        }
        Ok(Labeler {
            q,
            model: model.smoothed(opts.epsilon)?,
            weights,
            prior,
            norm: opts.norm,
        })
    }

    pub fn label(&self, instance: &TimeSeriesInstance) -> Result<PseudoLabel> {
        if instance.n_channels() != self.model.n_channels {
            return Err(Error::DimensionMismatch {
                id: instance.id.clone(),
                detail: format!(
                    "{} channels, model expects {}",
                    instance.n_channels(),
                    self.model.n_channels
                ),
            });
        }
        let (_, codes) = encode_instance(self.q, instance)?;
        let posteriors = (0..self.model.n_channels)
            .map(|d| {
                let seq = codes.coarse_sequence(d);
                let lls = (0..self.model.n_classes)
                    .map(|k| log_likelihood(&seq, &self.model.tms[k][d], self.norm))
                    .collect::<Result<Vec<f64>>>()?;
                channel_posterior(&lls, self.prior)
            })
            .collect::<Result<Vec<_>>>()?;
        aggregate(posteriors, self.weights)
    }
}

/// Labels every target instance, preserving order.
pub fn label_dataset(
    target: &DomainDataset,
    q: &ResidualQuantizer,
    model: &ClassChannelTm,
    weights: &ChannelWeights,
    prior: &LabelPrior,
    opts: &LabelOptions,
) -> Result<Vec<PseudoLabel>> {
    if target.role != Role::Target {
        return Err(Error::InvalidArgument("pseudo-labeling expects a target-role dataset".into()));
    }
    let labeler = Labeler::new(q, model, weights, prior, opts)?;
    par::try_map_slice(&target.instances, |inst| labeler.label(inst))
}

fn selection_count(r_top: f64, n: usize) -> Result<usize> {
    if !(r_top > 0.0 && r_top <= 1.0) {
        return Err(Error::InvalidArgument(format!("r_top must lie in (0, 1], got {r_top}")));
    }
    // Guard against products like 0.7 * 10 = 7.000000000000001.
    Ok(((r_top * n as f64) - 1e-9).ceil().max(1.0) as usize)
}

fn top_in(labels: &[PseudoLabel], range: std::ops::Range<usize>, r_top: f64) -> Result<Vec<usize>> {
    let take = selection_count(r_top, range.len())?;
    let mut idx: Vec<usize> = range.collect();
    idx.sort_by(|&a, &b| {
        labels[b]
            .confidence
            .total_cmp(&labels[a].confidence)
            .then(a.cmp(&b))
    });
    idx.truncate(take);
    idx.sort_unstable();
    Ok(idx)
}

/// Indices (ascending) of the `ceil(r_top * n)` most confident labels; ties
/// prefer the lower index.
pub fn top_r_select(labels: &[PseudoLabel], r_top: f64) -> Result<Vec<usize>> {
    if labels.is_empty() {
        return Err(Error::InsufficientData("no pseudo-labels to select from".into()));
    }
    top_in(labels, 0..labels.len(), r_top)
}

/// Applies [`top_r_select`] independently within consecutive batches.
pub fn top_r_select_batched(labels: &[PseudoLabel], r_top: f64, batch_size: usize) -> Result<Vec<usize>> {
    if labels.is_empty() {
        return Err(Error::InsufficientData("no pseudo-labels to select from".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut out = Vec::new();
    for start in (0..labels.len()).step_by(batch_size) {
        let end = (start + batch_size).min(labels.len());
        out.extend(top_in(labels, start..end, r_top)?);
    }
    Ok(out)
}

/// One line of the pseudo-label file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub id: String,
    pub label: usize,
    pub confidence: f64,
    pub scores: Vec<f64>,
    pub per_channel_posteriors: Vec<Vec<f64>>,
    pub channel_weights: Vec<f64>,
}

pub fn save_pseudo_labels(
    path: &Path,
    ids: &[String],
    labels: &[PseudoLabel],
    weights: &ChannelWeights,
    config: &Value,
) -> Result<()> {
    if ids.len() != labels.len() {
        return Err(Error::InvalidArgument(format!("{} ids for {} labels", ids.len(), labels.len())));
    }
    let records: Vec<PseudoLabelRecord> = ids
        .iter()
        .zip(labels)
        .map(|(id, pl)| PseudoLabelRecord {
            id: id.clone(),
            label: pl.label,
            confidence: pl.confidence,
            scores: pl.scores.clone(),
            per_channel_posteriors: pl.per_channel_posteriors.clone(),
            channel_weights: weights.w.clone(),
        })
        .collect();
    let header = Header::new(PSEUDO_LABEL_KIND, Value::Null, config.clone());
    record::write_envelope(path, &header, &records)
}

pub fn load_pseudo_labels(path: &Path) -> Result<Vec<PseudoLabelRecord>> {
    record::read_envelope(path, PSEUDO_LABEL_KIND)?.records()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub index: usize,
    pub id: String,
}

pub fn save_selection(path: &Path, ids: &[String], selected: &[usize], r_top: f64, config: &Value) -> Result<()> {
    let records: Vec<SelectionRecord> = selected
        .iter()
        .map(|&i| SelectionRecord { index: i, id: ids[i].clone() })
        .collect();
    let meta = serde_json::json!({ "r_top": r_top, "n_total": ids.len() });
    record::write_envelope(path, &Header::new(SELECTION_KIND, meta, config.clone()), &records)
}

pub fn load_selection(path: &Path) -> Result<Vec<SelectionRecord>> {
    record::read_envelope(path, SELECTION_KIND)?.records()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn weights(w: Vec<f64>) -> ChannelWeights {
        let n = w.len();
        ChannelWeights { w, sigma: 0.2, mean_costs: vec![0.0; n] }
    }

    #[test]
    fn equal_evidence_uniform_prior() {
        let prior = LabelPrior::uniform(4, 1.0).unwrap();
        let post = channel_posterior(&[-1.3; 4], &prior).unwrap();
        for p in post {
            assert_abs_diff_eq!(p, 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn bayes_hand_value() {
        let prior = LabelPrior::uniform(2, 1.0).unwrap();
        let post = channel_posterior(&[0.9f64.ln(), 0.1f64.ln()], &prior).unwrap();
        assert_abs_diff_eq!(post[0], 0.9, epsilon = 1e-12);
        assert_abs_diff_eq!(post[1], 0.1, epsilon = 1e-12);
    }

    #[test]
    fn cold_temperature_follows_prior() {
        let prior = LabelPrior::new(vec![0.1, 0.6, 0.3], 1e-3).unwrap();
        let post = channel_posterior(&[0.0, -5.0, -2.0], &prior).unwrap();
        assert_eq!(argmax(&post), 1);
    }

    #[test]
    fn uniform_prior_temperature_is_irrelevant() {
        let lls = [-0.4, -1.1, -0.7];
        let a = channel_posterior(&lls, &LabelPrior::uniform(3, 1.0).unwrap()).unwrap();
        let b = channel_posterior(&lls, &LabelPrior::uniform(3, 0.05).unwrap()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-15);
        }
    }

    #[test]
    fn prior_validation_and_flooring() {
        assert!(LabelPrior::new(vec![0.5, 0.6], 1.0).is_err());
        assert!(LabelPrior::new(vec![0.5, 0.5], 0.0).is_err());
        let p = LabelPrior::new(vec![1.0, 0.0], 1.0).unwrap();
        assert!(p.probs[1] > 0.0);
        assert_abs_diff_eq!(p.probs.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn single_channel_identity() {
        let pl = aggregate(vec![vec![0.3, 0.7]], &weights(vec![1.0])).unwrap();
        assert_eq!(pl.scores, vec![0.3, 0.7]);
        assert_eq!(pl.label, 1);
        assert_eq!(pl.confidence, 0.7);
    }

    #[test]
    fn two_channel_hand_values() {
        let rows = vec![vec![0.8, 0.2], vec![0.6, 0.4]];
        let pl = aggregate(rows.clone(), &weights(vec![1.0, 1.0])).unwrap();
        assert_abs_diff_eq!(pl.scores[0], 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(pl.scores[1], 0.3, epsilon = 1e-15);
        let pl = aggregate(rows, &weights(vec![1.0, 0.0])).unwrap();
        assert_abs_diff_eq!(pl.scores[0], 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(pl.scores[1], 0.1, epsilon = 1e-15);
        assert_eq!(pl.label, 0);
    }

    #[test]
    fn argmax_ties_take_lowest() {
        let pl = aggregate(vec![vec![0.5, 0.5]], &weights(vec![1.0])).unwrap();
        assert_eq!(pl.label, 0);
    }

    fn with_conf(c: &[f64]) -> Vec<PseudoLabel> {
        c.iter()
            .map(|&x| PseudoLabel { scores: vec![x], label: 0, confidence: x, per_channel_posteriors: vec![] })
            .collect()
    }

    #[test]
    fn top_r_picks_most_confident() {
        let labels = with_conf(&[0.1, 0.9, 0.3, 0.8, 0.2, 0.5, 0.4, 0.6, 0.7, 0.05]);
        assert_eq!(top_r_select(&labels, 0.2).unwrap(), vec![1, 3]);
        assert_eq!(top_r_select(&labels, 1.0).unwrap(), (0..10).collect::<Vec<_>>());
        assert_eq!(top_r_select(&labels, 0.7).unwrap().len(), 7);
        assert_eq!(top_r_select(&labels, 0.5).unwrap().len(), 5);
    }

    #[test]
    fn top_r_ties_prefer_lower_index() {
        let labels = with_conf(&[0.5, 0.5, 0.5, 0.5]);
        assert_eq!(top_r_select(&labels, 0.5).unwrap(), vec![0, 1]);
    }

    #[test]
    fn top_r_rejects_bad_fraction() {
        let labels = with_conf(&[0.5]);
        assert!(top_r_select(&labels, 0.0).is_err());
        assert!(top_r_select(&labels, 1.5).is_err());
        assert!(top_r_select(&[], 0.5).is_err());
    }

    #[test]
    fn batched_selection_is_per_batch() {
        let labels = with_conf(&[0.9, 0.8, 0.1, 0.2]);
        assert_eq!(top_r_select_batched(&labels, 0.5, 2).unwrap(), vec![0, 3]);
        assert_eq!(top_r_select(&labels, 0.5).unwrap(), vec![0, 1]);
    }
}
