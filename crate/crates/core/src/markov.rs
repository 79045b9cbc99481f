//! First-order transition matrices over coarse code sequences.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::par;
use crate::record::{self, Header};
use crate::rvq::CodeGrid;

pub const DEFAULT_EPSILON: f64 = 1e-8;
pub const MODEL_KIND: &str = "transition_model";

/// Row-stochastic `n_c x n_c` matrix; `probs[i][j] = p(next = j | current = i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub probs: Array2<f64>,
}

impl TransitionMatrix {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        let (r, c) = probs.dim();
        if r != c || r == 0 {
            return Err(Error::InvalidArgument(format!("transition matrix must be square and non-empty, got {r}x{c}")));
        }
        for (i, row) in probs.rows().into_iter().enumerate() {
            if row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::InvalidArgument(format!("row {i} has a negative or non-finite entry")));
            }
            let s = row.sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("row {i} sums to {s}")));
            }
        }
        Ok(TransitionMatrix { probs })
    }

    pub fn uniform(n_c: usize) -> Self {
        TransitionMatrix {
            probs: Array2::from_elem((n_c, n_c), 1.0 / n_c as f64),
        }
    }

    pub fn n_codes(&self) -> usize {
        self.probs.nrows()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.probs.row(i).to_vec()
    }
}

/// Raw transition counts, mergeable across sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionCounts {
    pub counts: Array2<u64>,
}

impl TransitionCounts {
    pub fn new(n_c: usize) -> Self {
        TransitionCounts {
            counts: Array2::zeros((n_c, n_c)),
        }
    }

    pub fn add_sequence(&mut self, seq: &[usize]) -> Result<()> {
        let n_c = self.counts.nrows();
        if seq.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a sequence needs at least 2 states, got {}",
                seq.len()
            )));
        }
        if let Some(&bad) = seq.iter().find(|&&s| s >= n_c) {
            return Err(Error::IndexOutOfRange { index: bad, n_codes: n_c });
        }
        for w in seq.windows(2) {
            self.counts[[w[0], w[1]]] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &TransitionCounts) {
        self.counts += &other.counts;
    }

    /// Normalizes rows; states never departed from get the uniform row.
    pub fn to_matrix(&self) -> TransitionMatrix {
        let n_c = self.counts.nrows();
        let mut probs = Array2::zeros((n_c, n_c));
        for (i, row) in self.counts.rows().into_iter().enumerate() {
            let total: u64 = row.sum();
            for j in 0..n_c {
                probs[[i, j]] = if total == 0 {
                    1.0 / n_c as f64
                } else {
                    row[j] as f64 / total as f64
                };
            }
        }
        TransitionMatrix { probs }
    }
}

/// Pooled maximum-likelihood transition matrix over several sequences.
pub fn estimate_tm<S: AsRef<[usize]>>(sequences: &[S], n_c: usize) -> Result<TransitionMatrix> {
    if sequences.is_empty() {
        return Err(Error::InsufficientData("no sequences to estimate from".into()));
    }
    if n_c == 0 {
        return Err(Error::InvalidArgument("n_c must be positive".into()));
    }
    let mut counts = TransitionCounts::new(n_c);
    for s in sequences {
        counts.add_sequence(s.as_ref())?;
    }
    Ok(counts.to_matrix())
}

/// Adds `epsilon` to every entry and re-normalizes rows.
pub fn smooth(tm: &TransitionMatrix, epsilon: f64) -> Result<TransitionMatrix> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut probs = tm.probs.mapv(|p| p + epsilon);
    for mut row in probs.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    Ok(TransitionMatrix { probs })
}

/// Normalizer applied to the summed log transition probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodNorm {
    /// Divide by the sequence length `N`.
    #[default]
    Length,
    /// Divide by the number of transitions `N - 1`.
    Transitions,
}

/// Length-normalized log-likelihood of a state sequence under `tm`.
pub fn log_likelihood(seq: &[usize], tm: &TransitionMatrix, norm: LikelihoodNorm) -> Result<f64> {
    let n = seq.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 states, got {n}")));
    }
    let n_c = tm.n_codes();
    let mut total = 0.0;
    for w in seq.windows(2) {
        let (from, to) = (w[0], w[1]);
        if from >= n_c || to >= n_c {
            return Err(Error::IndexOutOfRange { index: from.max(to), n_codes: n_c });
        }
        let p = tm.probs[[from, to]];
        if p <= 0.0 {
            return Err(Error::ZeroTransition { from, to });
        }
        total += p.ln();
    }
    let denom = match norm {
        LikelihoodNorm::Length => n,
        LikelihoodNorm::Transitions => n - 1,
    };
    Ok(total / denom as f64)
}

/// One matrix per `(class, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassChannelTm {
    /// Indexed `[class][channel]`.
    pub tms: Vec<Vec<TransitionMatrix>>,
    pub n_classes: usize,
    pub n_channels: usize,
}

impl ClassChannelTm {
    pub fn n_codes(&self) -> usize {
        self.tms[0][0].n_codes()
    }

    pub fn smoothed(&self, epsilon: f64) -> Result<ClassChannelTm> {
        let tms = self
            .tms
            .iter()
            .map(|per_ch| per_ch.iter().map(|tm| smooth(tm, epsilon)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Ok(ClassChannelTm { tms, ..*self })
    }
}

/// One matrix per channel, pooled over classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelTm {
    pub tms: Vec<TransitionMatrix>,
}

impl ChannelTm {
    pub fn n_channels(&self) -> usize {
        self.tms.len()
    }

    pub fn n_codes(&self) -> usize {
        self.tms[0].n_codes()
    }

    pub fn smoothed(&self, epsilon: f64) -> Result<ChannelTm> {
        Ok(ChannelTm {
            tms: self.tms.iter().map(|tm| smooth(tm, epsilon)).collect::<Result<_>>()?,
        })
    }
}

fn check_grids(codes: &[CodeGrid], n_channels: usize) -> Result<()> {
    if codes.is_empty() {
        return Err(Error::InsufficientData("no code grids".into()));
    }
    for (i, g) in codes.iter().enumerate() {
        if g.n_channels() != n_channels {
            return Err(Error::DimensionMismatch {
                id: format!("#{i}"),
                detail: format!("{} channels, expected {n_channels}", g.n_channels()),
            });
        }
    }
    Ok(())
}

fn channel_counts<'a>(
    grids: impl Iterator<Item = &'a CodeGrid>,
    channel: usize,
    n_c: usize,
) -> Result<TransitionCounts> {
    let mut counts = TransitionCounts::new(n_c);
    for g in grids {
        counts.add_sequence(g.coarse.row(channel).as_slice().expect("standard layout"))?;
    }
    Ok(counts)
}

/// Per-class, per-channel matrices from labeled grids.
pub fn build_class_tm(
    codes: &[CodeGrid],
    labels: &[usize],
    n_classes: usize,
    n_channels: usize,
    n_c: usize,
) -> Result<ClassChannelTm> {
    check_grids(codes, n_channels)?;
    if labels.len() != codes.len() {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {} grids",
            labels.len(),
            codes.len()
        )));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= n_classes) {
        return Err(Error::LabelOutOfRange {
            id: format!("#{i}"),
            label: l,
            n_classes,
        });
    }
    for k in 0..n_classes {
        if !labels.contains(&k) {
            log::warn!("class {k} has no source instances; its transition matrices are uniform");
        }
    }
    let flat = par::map_range(n_classes * n_channels, |idx| {
        let (k, d) = (idx / n_channels, idx % n_channels);
        let members = codes.iter().zip(labels).filter(|(_, &l)| l == k).map(|(g, _)| g);
        channel_counts(members, d, n_c).map(|c| c.to_matrix())
    });
    let mut flat = flat.into_iter().collect::<Result<Vec<_>>>()?.into_iter();
    let tms = (0..n_classes)
        .map(|_| flat.by_ref().take(n_channels).collect())
        .collect();
    Ok(ClassChannelTm {
        tms,
        n_classes,
        n_channels,
    })
}

/// Per-channel matrices pooled over all grids, ignoring labels.
pub fn build_channel_tm(codes: &[CodeGrid], n_channels: usize, n_c: usize) -> Result<ChannelTm> {
    check_grids(codes, n_channels)?;
    let tms = par::map_range(n_channels, |d| {
        channel_counts(codes.iter(), d, n_c).map(|c| c.to_matrix())
    });
    Ok(ChannelTm {
        tms: tms.into_iter().collect::<Result<_>>()?,
    })
}

/// Serialized transition-model bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionModel {
    pub class_tms: ClassChannelTm,
    pub channel_source: ChannelTm,
    pub channel_target: Option<ChannelTm>,
    pub epsilon: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelRecord {
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "D")]
    d: usize,
    n_c: usize,
    epsilon: f64,
    class_tms: Vec<Vec<Vec<Vec<f64>>>>,
    channel_tms_source: Vec<Vec<Vec<f64>>>,
    channel_tms_target: Option<Vec<Vec<Vec<f64>>>>,
}

fn to_rows(tm: &TransitionMatrix) -> Vec<Vec<f64>> {
    tm.probs.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn from_rows(rows: &[Vec<f64>], n_c: usize) -> Result<TransitionMatrix> {
    if rows.len() != n_c || rows.iter().any(|r| r.len() != n_c) {
        return Err(Error::Incompatible(format!("transition matrix is not {n_c}x{n_c}")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    TransitionMatrix::new(Array2::from_shape_vec((n_c, n_c), flat).expect("checked shape"))
        .map_err(|e| Error::Incompatible(e.to_string()))
}

fn channel_from_rows(mats: &[Vec<Vec<f64>>], d: usize, n_c: usize) -> Result<ChannelTm> {
    if mats.len() != d {
        return Err(Error::Incompatible(format!("expected {d} channel matrices, found {}", mats.len())));
    }
    Ok(ChannelTm {
        tms: mats.iter().map(|m| from_rows(m, n_c)).collect::<Result<_>>()?,
    })
}

pub fn save_model(path: &Path, model: &TransitionModel, config: &Value) -> Result<()> {
    let ct = &model.class_tms;
    let rec = ModelRecord {
        k: ct.n_classes,
        d: ct.n_channels,
        n_c: ct.n_codes(),
        epsilon: model.epsilon,
        class_tms: ct.tms.iter().map(|per| per.iter().map(to_rows).collect()).collect(),
        channel_tms_source: model.channel_source.tms.iter().map(to_rows).collect(),
        channel_tms_target: model
            .channel_target
            .as_ref()
            .map(|c| c.tms.iter().map(to_rows).collect()),
    };
    let header = Header::new(MODEL_KIND, Value::Null, config.clone());
    record::write_envelope(path, &header, &[rec])
}

pub fn load_model(path: &Path) -> Result<TransitionModel> {
    let env = record::read_envelope(path, MODEL_KIND)?;
    let mut recs: Vec<ModelRecord> = env.records()?;
    if recs.len() != 1 {
        return Err(Error::Incompatible(format!("expected one model record, found {}", recs.len())));
    }
    let rec = recs.remove(0);
    if rec.class_tms.len() != rec.k {
        return Err(Error::Incompatible(format!("expected {} classes, found {}", rec.k, rec.class_tms.len())));
    }
    let tms = rec
        .class_tms
        .iter()
        .map(|per| channel_from_rows(per, rec.d, rec.n_c).map(|c| c.tms))
        .collect::<Result<Vec<_>>>()?;
    Ok(TransitionModel {
        class_tms: ClassChannelTm {
            tms,
            n_classes: rec.k,
            n_channels: rec.d,
        },
        channel_source: channel_from_rows(&rec.channel_tms_source, rec.d, rec.n_c)?,
        channel_target: rec
            .channel_tms_target
            .as_deref()
            .map(|m| channel_from_rows(m, rec.d, rec.n_c))
            .transpose()?,
        epsilon: rec.epsilon,
    })
}
