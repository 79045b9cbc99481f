//! Synthetic source/target corpora with class-specific primitive regimes.
//!
//! Each channel of an instance is a chain of length-`m` primitive segments
//! (up-ramp, down-ramp, triangle bump, sine segments). The chain of primitives follows
//! a class- and channel-specific Markov regime, so the hidden primitive chain
//! is the ground truth the coarse codes should recover. The target domain can
//! be shifted per channel (affine amplitude change, additive noise) and its
//! regimes can be blended toward uniform.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng as _;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{DomainDataset, Role, TimeSeriesInstance};
use crate::error::{Error, Result};
use crate::record::{self, Header};
use crate::rng::{self, streams, Rng};

pub const TRUTH_KIND: &str = "truth";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelShift {
    pub scale: f64,
    pub offset: f64,
}

impl Default for ChannelShift {
    fn default() -> Self {
        ChannelShift { scale: 1.0, offset: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub n_channels: usize,
    pub length: usize,
    pub patch_length: usize,
    pub n_primitives: usize,
    /// Cycles per patch of the first sine primitive.
    pub sine_cycles: f64,
    /// Probability of the class's preferred successor in generated regimes.
    pub regime_dominance: f64,
    /// Probability of repeating the current primitive, shared by all classes.
    pub regime_persistence: f64,
    /// Explicit `K x D x P x P` regimes; generated from `regime_dominance` when absent.
    pub class_regimes: Option<Vec<Vec<Vec<Vec<f64>>>>>,
    /// Per-channel target shift; empty means identity on every channel.
    pub shift: Vec<ChannelShift>,
    /// Per-channel target noise standard deviation; empty means none.
    pub target_noise: Vec<f64>,
    /// Noise standard deviation added to every sample in both domains.
    pub base_noise: f64,
    /// Blend of the target regimes toward uniform, in `[0, 1]`.
    pub target_mixing: f64,
    /// Target class distribution; empty means uniform.
    pub target_class_probs: Vec<f64>,
    pub n_source: usize,
    pub n_target: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_classes: 4,
            n_channels: 3,
            length: 128,
            patch_length: 8,
            n_primitives: 5,
            sine_cycles: 1.0,
            regime_dominance: 0.5,
            regime_persistence: 0.4,
            class_regimes: None,
            shift: Vec::new(),
            target_noise: Vec::new(),
            base_noise: 0.05,
            target_mixing: 0.0,
            target_class_probs: Vec::new(),
            n_source: 200,
            n_target: 200,
            seed: 0,
        }
    }
}

/// Regimes where every class repeats the current primitive with probability
/// `persistence` and class `k`, channel `d` moves to the successor
/// `i + 1 + (k + d) mod (P - 1)` (mod `P`) with probability `dominance`; the
/// remaining mass is spread over the other primitives. For a fixed channel
/// the preferred successors of different classes never coincide while
/// `K < P`.
pub fn shifted_regimes(
    n_classes: usize,
    n_channels: usize,
    n_primitives: usize,
    dominance: f64,
    persistence: f64,
) -> Vec<Vec<Vec<Vec<f64>>>> {
    let p = n_primitives;
    let rest = if p > 2 { (1.0 - dominance - persistence) / (p - 2) as f64 } else { 0.0 };
    (0..n_classes)
        .map(|k| {
            (0..n_channels)
                .map(|d| {
                    (0..p)
                        .map(|i| {
                            let next = (i + 1 + (k + d) % (p - 1)) % p;
                            (0..p)
                                .map(|j| match j {
                                    _ if j == i => persistence,
                                    _ if j == next => dominance,
                                    _ => rest,
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

impl SynthConfig {
    pub fn regimes(&self) -> Vec<Vec<Vec<Vec<f64>>>> {
        self.class_regimes.clone().unwrap_or_else(|| {
            shifted_regimes(
                self.n_classes,
                self.n_channels,
                self.n_primitives,
                self.regime_dominance,
                self.regime_persistence,
            )
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_classes == 0 || self.n_channels == 0 {
            return bad("n_classes and n_channels must be positive".into());
        }
        if self.patch_length < 2 {
            return bad(format!("patch_length must be >= 2, got {}", self.patch_length));
        }
        if self.length % self.patch_length != 0 || self.length < 2 * self.patch_length {
            return bad(format!(
                "length {} must be a multiple of patch_length {} spanning at least two patches",
                self.length, self.patch_length
            ));
        }
        if self.n_primitives < 2 {
            return bad("need at least 2 primitives".into());
        }
        if self.n_source == 0 || self.n_target == 0 {
            return bad("n_source and n_target must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.target_mixing) {
            return bad("target_mixing must lie in [0, 1]".into());
        }
        if self.class_regimes.is_none() {
            let (dom, per) = (self.regime_dominance, self.regime_persistence);
            if !(dom >= 0.0 && per >= 0.0 && dom + per <= 1.0) {
                return bad("regime_dominance and regime_persistence must be non-negative with sum <= 1".into());
            }
            if self.n_primitives < 3 && dom + per < 1.0 {
                return bad("generated regimes need at least 3 primitives unless dominance + persistence = 1".into());
            }
        }
        if !(self.base_noise >= 0.0) || self.target_noise.iter().any(|n| !(*n >= 0.0)) {
            return bad("noise magnitudes must be non-negative".into());
        }
        for (name, len) in [("shift", self.shift.len()), ("target_noise", self.target_noise.len())] {
            if len != 0 && len != self.n_channels {
                return bad(format!("{name} has {len} entries for {} channels", self.n_channels));
            }
        }
        if self.shift.iter().any(|s| !(s.scale > 0.0 && s.offset.is_finite())) {
            return bad("shift scales must be positive".into());
        }
        if !self.target_class_probs.is_empty() {
            if self.target_class_probs.len() != self.n_classes {
                return bad("target_class_probs must have one entry per class".into());
            }
            let s: f64 = self.target_class_probs.iter().sum();
            if (s - 1.0).abs() > 1e-6 || self.target_class_probs.iter().any(|p| *p < 0.0) {
                return bad(format!("target_class_probs must be a distribution (sum {s})"));
            }
        }
        let regimes = self.regimes();
        let p = self.n_primitives;
        if regimes.len() != self.n_classes || regimes.iter().any(|r| r.len() != self.n_channels) {
            return bad("class_regimes must be shaped K x D x P x P".into());
        }
        for (k, per_ch) in regimes.iter().enumerate() {
            for (d, m) in per_ch.iter().enumerate() {
                if m.len() != p || m.iter().any(|row| row.len() != p) {
                    return bad(format!("regime [{k}][{d}] is not {p}x{p}"));
                }
                for row in m {
                    let s: f64 = row.iter().sum();
                    if row.iter().any(|v| !(*v >= 0.0)) || (s - 1.0).abs() > 1e-9 {
                        return bad(format!("regime [{k}][{d}] is not row-stochastic"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Samples of one primitive segment of length `m`.
fn primitive(kind: usize, m: usize, sine_cycles: f64, amplitude: f64, level: f64) -> Vec<f64> {
    (0..m)
        .map(|t| {
            let x = t as f64 / (m - 1) as f64;
            let shape = match kind {
                0 => 2.0 * x - 1.0,
                1 => 1.0 - 2.0 * x,
                2 => 1.0 - 2.0 * (2.0 * x - 1.0).abs(),
                j => (2.0 * PI * sine_cycles * (j - 2) as f64 * t as f64 / m as f64).sin(),
            };
            level + amplitude * shape
        })
        .collect()
}

struct Sampler {
    /// `[class][channel][from]` successor distributions.
    rows: Vec<Vec<Vec<WeightedIndex<f64>>>>,
}

impl Sampler {
    fn new(regimes: &[Vec<Vec<Vec<f64>>>], mixing: f64) -> Result<Self> {
        let rows = regimes
            .iter()
            .map(|per_ch| {
                per_ch
                    .iter()
                    .map(|m| {
                        m.iter()
                            .map(|row| {
                                let p = row.len() as f64;
                                let mixed: Vec<f64> = row.iter().map(|v| (1.0 - mixing) * v + mixing / p).collect();
                                WeightedIndex::new(mixed)
                                    .map_err(|e| Error::InvalidArgument(format!("bad regime row: {e}")))
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Sampler { rows })
    }
}

fn class_sampler(probs: &[f64], n_classes: usize) -> Result<WeightedIndex<f64>> {
    let w = if probs.is_empty() { vec![1.0; n_classes] } else { probs.to_vec() };
    WeightedIndex::new(w).map_err(|e| Error::InvalidArgument(format!("bad class distribution: {e}")))
}

fn draw_instance(
    cfg: &SynthConfig,
    sampler: &Sampler,
    label: usize,
    rng: &mut Rng,
    noise: &Normal<f64>,
) -> Array2<f64> {
    let (d, t, m) = (cfg.n_channels, cfg.length, cfg.patch_length);
    let n = t / m;
    let mut values = Array2::zeros((d, t));
    for c in 0..d {
        let mut state = rng.random_range(0..cfg.n_primitives);
        for p in 0..n {
            if p > 0 {
                state = sampler.rows[label][c][state].sample(rng);
            }
            let amplitude = rng.random_range(0.8..1.2);
            let level = rng.random_range(-0.25..0.25);
            let seg = primitive(state, m, cfg.sine_cycles, amplitude, level);
            for (k, v) in seg.into_iter().enumerate() {
                values[[c, p * m + k]] = v + noise.sample(rng);
            }
        }
    }
    values
}

/// Draws a labeled source dataset and a target dataset whose labels are kept
/// for evaluation only.
pub fn generate(cfg: &SynthConfig) -> Result<(DomainDataset, DomainDataset)> {
    cfg.validate()?;
    let regimes = cfg.regimes();
    let base = Normal::new(0.0, cfg.base_noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let src_sampler = Sampler::new(&regimes, 0.0)?;
    let src_classes = class_sampler(&[], cfg.n_classes)?;
    let mut rng = rng::stream(cfg.seed, streams::SYNTH_SOURCE);
    let mut source = Vec::with_capacity(cfg.n_source);
    for i in 0..cfg.n_source {
        let label = src_classes.sample(&mut rng);
        let values = draw_instance(cfg, &src_sampler, label, &mut rng, &base);
        source.push(TimeSeriesInstance::new(format!("src-{i:05}"), values, Some(label))?);
    }

    let trg_sampler = Sampler::new(&regimes, cfg.target_mixing)?;
    let trg_classes = class_sampler(&cfg.target_class_probs, cfg.n_classes)?;
    let mut rng = rng::stream(cfg.seed, streams::SYNTH_TARGET);
    let mut noise_rng = rng::stream(cfg.seed, streams::SYNTH_TARGET_NOISE);
    let mut target = Vec::with_capacity(cfg.n_target);
    for i in 0..cfg.n_target {
        let label = trg_classes.sample(&mut rng);
        let mut values = draw_instance(cfg, &trg_sampler, label, &mut rng, &base);
        for (c, mut row) in values.rows_mut().into_iter().enumerate() {
            let shift = cfg.shift.get(c).copied().unwrap_or_default();
            let sd = cfg.target_noise.get(c).copied().unwrap_or(0.0);
            let extra = Normal::new(0.0, sd).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            for v in row.iter_mut() {
                *v = shift.scale * *v + shift.offset;
                if sd > 0.0 {
                    *v += extra.sample(&mut noise_rng);
                }
            }
        }
        target.push(TimeSeriesInstance::new(format!("trg-{i:05}"), values, Some(label))?);
    }

    Ok((
        DomainDataset::new(Role::Source, cfg.n_classes, source)?,
        DomainDataset::new(Role::Target, cfg.n_classes, target)?,
    ))
}

/// Copy of `dataset` with zero-mean Gaussian noise of standard deviation
/// `magnitude` added to one channel.
pub fn inject_channel_noise(dataset: &DomainDataset, channel: usize, magnitude: f64, seed: u64) -> Result<DomainDataset> {
    if channel >= dataset.n_channels {
        return Err(Error::InvalidArgument(format!(
            "channel {channel} out of range for {} channels",
            dataset.n_channels
        )));
    }
    if !(magnitude >= 0.0 && magnitude.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise magnitude must be non-negative, got {magnitude}")));
    }
    let mut out = dataset.clone();
    if magnitude == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, magnitude).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = rng::stream(seed, streams::CHANNEL_NOISE);
    for inst in &mut out.instances {
        for v in inst.values.row_mut(channel).iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub id: String,
    pub label: usize,
}

/// Writes the sealed ground-truth labels of a dataset.
pub fn save_truth(path: &Path, dataset: &DomainDataset, config: &Value) -> Result<()> {
    let records = dataset
        .instances
        .iter()
        .map(|i| {
            i.label
                .map(|label| TruthRecord { id: i.id.clone(), label })
                .ok_or_else(|| Error::MissingLabel { id: i.id.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = serde_json::json!({ "n_classes": dataset.n_classes });
    record::write_envelope(path, &Header::new(TRUTH_KIND, meta, config.clone()), &records)
}

pub fn load_truth(path: &Path) -> Result<(usize, Vec<TruthRecord>)> {
    let env = record::read_envelope(path, TRUTH_KIND)?;
    let n_classes = env
        .header
        .meta
        .get("n_classes")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Parse { line: 1, msg: "truth header lacks n_classes".into() })? as usize;
    Ok((n_classes, env.records()?))
}
