//! Raw multivariate series, domain corpora, and patchification.

use std::path::Path;

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::record::{self, Header};

pub const CORPUS_KIND: &str = "corpus";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Source,
    Target,
}

/// One multivariate series, `values` shaped `(channels, steps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesInstance {
    pub id: String,
    pub values: Array2<f64>,
    pub label: Option<usize>,
}

impl TimeSeriesInstance {
    /// Builds an instance, rejecting non-finite values.
    pub fn new(id: impl Into<String>, values: Array2<f64>, label: Option<usize>) -> Result<Self> {
        let id = id.into();
        if let Some(((channel, step), _)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { id, channel, step });
        }
        Ok(TimeSeriesInstance { id, values, label })
    }

    /// Builds an instance from per-channel rows; every row must have the same length.
    pub fn from_channels(
        id: impl Into<String>,
        channels: &[Vec<f64>],
        label: Option<usize>,
    ) -> Result<Self> {
        let id = id.into();
        let d = channels.len();
        if d == 0 {
            return Err(Error::DimensionMismatch {
                id,
                detail: "no channels".into(),
            });
        }
        let t = channels[0].len();
        if let Some((ch, row)) = channels.iter().enumerate().find(|(_, r)| r.len() != t) {
            return Err(Error::DimensionMismatch {
                id,
                detail: format!("channel 0 has length {t} but channel {ch} has length {}", row.len()),
            });
        }
        let flat: Vec<f64> = channels.iter().flatten().copied().collect();
        let values = Array2::from_shape_vec((d, t), flat).expect("shape checked above");
        Self::new(id, values, label)
    }

    pub fn n_channels(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// A set of equally shaped instances from one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub instances: Vec<TimeSeriesInstance>,
    pub n_channels: usize,
    pub length: usize,
    pub n_classes: usize,
    pub role: Role,
}

impl DomainDataset {
    pub fn new(role: Role, n_classes: usize, instances: Vec<TimeSeriesInstance>) -> Result<Self> {
        let first = instances
            .first()
            .ok_or_else(|| Error::InsufficientData("dataset has no instances".into()))?;
        let (n_channels, length) = (first.n_channels(), first.len());
        for inst in &instances {
            if inst.n_channels() != n_channels || inst.len() != length {
                return Err(Error::DimensionMismatch {
                    id: inst.id.clone(),
                    detail: format!(
                        "shape {}x{} differs from dataset shape {n_channels}x{length}",
                        inst.n_channels(),
                        inst.len()
                    ),
                });
            }
            match inst.label {
                None if role == Role::Source => {
                    return Err(Error::MissingLabel {
                        id: inst.id.clone(),
                    })
                }
                Some(label) if label >= n_classes => {
                    return Err(Error::LabelOutOfRange {
                        id: inst.id.clone(),
                        label,
                        n_classes,
                    })
                }
                _ => {}
            }
        }
        Ok(DomainDataset {
            instances,
            n_channels,
            length,
            n_classes,
            role,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Copy with every label removed, as handed to a labeler.
    pub fn without_labels(&self) -> DomainDataset {
        let mut out = self.clone();
        for inst in &mut out.instances {
            inst.label = None;
        }
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusMeta {
    role: Role,
    #[serde(default)]
    n_classes: Option<usize>,
    #[serde(default)]
    n_channels: Option<usize>,
    #[serde(default)]
    length: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusRecord {
    id: String,
    label: Option<usize>,
    channels: Vec<Vec<f64>>,
}

/// Reads a corpus file. The role comes from the header; instance order is preserved.
pub fn load_corpus(path: &Path) -> Result<DomainDataset> {
    let env = record::read_envelope(path, CORPUS_KIND)?;
    let meta: CorpusMeta = env.header.meta_as()?;
    let mut instances = Vec::with_capacity(env.lines.len());
    let mut shape: Option<(usize, usize)> = meta.n_channels.zip(meta.length);
    for (line, text) in &env.lines {
        let rec: CorpusRecord = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: *line,
            msg: e.to_string(),
        })?;
        let inst = TimeSeriesInstance::from_channels(rec.id, &rec.channels, rec.label)?;
        let this = (inst.n_channels(), inst.len());
        match shape {
            Some(expected) if expected != this => {
                return Err(Error::DimensionMismatch {
                    id: inst.id,
                    detail: format!(
                        "shape {}x{} differs from corpus shape {}x{}",
                        this.0, this.1, expected.0, expected.1
                    ),
                })
            }
            None => shape = Some(this),
            _ => {}
        }
        instances.push(inst);
    }
    let n_classes = match meta.n_classes {
        Some(k) => k,
        None => instances
            .iter()
            .filter_map(|i| i.label)
            .max()
            .map_or(0, |m| m + 1),
    };
    DomainDataset::new(meta.role, n_classes, instances)
}

/// Writes a corpus file. `config` is echoed into the header for provenance.
pub fn save_corpus(path: &Path, dataset: &DomainDataset, config: &Value) -> Result<()> {
    let header = corpus_header(dataset, config);
    let records: Vec<CorpusRecord> = dataset
        .instances
        .iter()
        .map(|inst| CorpusRecord {
            id: inst.id.clone(),
            label: inst.label,
            channels: inst.values.rows().into_iter().map(|r| r.to_vec()).collect(),
        })
        .collect();
    record::write_envelope(path, &header, &records)
}

fn corpus_header(dataset: &DomainDataset, config: &Value) -> Header {
    let meta = CorpusMeta {
        role: dataset.role,
        n_classes: Some(dataset.n_classes),
        n_channels: Some(dataset.n_channels),
        length: Some(dataset.length),
    };
    Header::new(
        CORPUS_KIND,
        serde_json::to_value(meta).expect("corpus meta serializes"),
        config.clone(),
    )
}

/// Non-overlapping patches, shaped `(channels, n_patches, patch_length)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub patches: Array3<f64>,
    pub patch_length: usize,
}

impl PatchGrid {
    pub fn n_channels(&self) -> usize {
        self.patches.dim().0
    }

    pub fn n_patches(&self) -> usize {
        self.patches.dim().1
    }

    /// Concatenates the patches of each channel back into a `(channels, N*m)` matrix.
    pub fn unpatchify(&self) -> Array2<f64> {
        let (d, n, m) = self.patches.dim();
        self.patches
            .to_shape((d, n * m))
            .expect("contiguous patch tensor")
            .to_owned()
    }
}

/// Splits every channel into `floor(T / m)` contiguous patches of length `m`,
/// dropping the trailing `T mod m` steps.
pub fn patchify(instance: &TimeSeriesInstance, m: usize) -> Result<PatchGrid> {
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "patch length must be at least 2, got {m}"
        )));
    }
    let t = instance.len();
    if m > t {
        return Err(Error::EmptyGrid {
            patch_length: m,
            length: t,
        });
    }
    let n = t / m;
    let d = instance.n_channels();
    let kept = instance.values.slice(s![.., ..n * m]);
    let patches = kept
        .to_shape((d, n, m))
        .expect("row-major slice reshapes")
        .to_owned();
    Ok(PatchGrid {
        patches,
        patch_length: m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    const SRC_HEADER: &str = r#"{"format":"markovpl","version":1,"kind":"corpus","meta":{"role":"source"}}"#;

    #[test]
    fn loads_minimal_record() {
        let f = write_lines(&[SRC_HEADER, r#"{"id":"a","label":0,"channels":[[1.0,2.0,3.0,4.0]]}"#]);
        let ds = load_corpus(f.path()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!((ds.n_channels, ds.length, ds.n_classes), (1, 4, 1));
        assert_eq!(ds.role, Role::Source);
        assert_eq!(ds.instances[0].values, array![[1.0, 2.0, 3.0, 4.0]]);
    }

    #[test]
    fn ragged_channels_name_the_instance() {
        let long: Vec<String> = (0..128).map(|i| format!("{i}.0")).collect();
        let short: Vec<String> = (0..127).map(|i| format!("{i}.0")).collect();
        let rec = format!(
            r#"{{"id":"ragged","label":0,"channels":[[{}],[{}]]}}"#,
            long.join(","),
            short.join(",")
        );
        let f = write_lines(&[SRC_HEADER, &rec]);
        match load_corpus(f.path()) {
            Err(Error::DimensionMismatch { id, .. }) => assert_eq!(id, "ragged"),
            other => panic!("expected mismatch, got {other:?}"),
        }
    }

    #[test]
    fn inconsistent_records_are_rejected() {
        let f = write_lines(&[
            SRC_HEADER,
            r#"{"id":"a","label":0,"channels":[[1.0,2.0]]}"#,
            r#"{"id":"b","label":0,"channels":[[1.0,2.0,3.0]]}"#,
        ]);
        assert!(matches!(
            load_corpus(f.path()),
            Err(Error::DimensionMismatch { id, .. }) if id == "b"
        ));
    }

    #[test]
    fn source_requires_labels() {
        let f = write_lines(&[SRC_HEADER, r#"{"id":"u","label":null,"channels":[[1.0,2.0]]}"#]);
        assert!(matches!(load_corpus(f.path()), Err(Error::MissingLabel { id }) if id == "u"));
    }

    #[test]
    fn target_allows_missing_labels() {
        let f = write_lines(&[
            r#"{"format":"markovpl","version":1,"kind":"corpus","meta":{"role":"target","n_classes":3}}"#,
            r#"{"id":"u","label":null,"channels":[[1.0,2.0]]}"#,
        ]);
        let ds = load_corpus(f.path()).unwrap();
        assert_eq!(ds.role, Role::Target);
        assert_eq!(ds.n_classes, 3);
    }

    #[test]
    fn parse_errors_report_line() {
        let f = write_lines(&[SRC_HEADER, r#"{"id":"a","label":0,"channels":[[1.0]]}"#, "oops"]);
        assert!(matches!(load_corpus(f.path()), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let v = array![[1.0, f64::NAN]];
        assert!(matches!(
            TimeSeriesInstance::new("x", v, None),
            Err(Error::NonFinite { step: 1, .. })
        ));
    }

    #[test]
    fn patch_counts() {
        let mk = |t: usize| TimeSeriesInstance::new("x", Array2::zeros((2, t)), None).unwrap();
        assert_eq!(patchify(&mk(128), 8).unwrap().n_patches(), 16);
        assert_eq!(patchify(&mk(300), 15).unwrap().n_patches(), 20);
        let g = patchify(&mk(10), 8).unwrap();
        assert_eq!(g.n_patches(), 1);
        assert_eq!(g.unpatchify().ncols(), 8);
    }

    #[test]
    fn patch_length_bounds() {
        let inst = TimeSeriesInstance::new("x", Array2::zeros((1, 4)), None).unwrap();
        assert!(matches!(patchify(&inst, 5), Err(Error::EmptyGrid { .. })));
        assert!(matches!(patchify(&inst, 1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn corpus_round_trip_is_bit_exact() {
        let inst = TimeSeriesInstance::new(
            "r",
            array![[0.1 + 0.2, 1e-300, -std::f64::consts::PI], [f64::MAX, f64::MIN_POSITIVE, 1.0 / 3.0]],
            Some(1),
        )
        .unwrap();
        let ds = DomainDataset::new(Role::Source, 2, vec![inst]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        save_corpus(&p, &ds, &Value::Null).unwrap();
        let back = load_corpus(&p).unwrap();
        let p2 = dir.path().join("c2.jsonl");
        save_corpus(&p2, &back, &Value::Null).unwrap();
        assert_eq!(back, ds);
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    proptest! {
        #[test]
        fn patchify_is_lossless_up_to_truncation(
            d in 1usize..4,
            t in 2usize..60,
            m in 2usize..12,
            seed in any::<u64>(),
        ) {
            prop_assume!(m <= t);
            let values = Array2::from_shape_fn((d, t), |(i, j)| {
                ((seed.wrapping_mul(31).wrapping_add((i * 1000 + j) as u64)) % 997) as f64 / 7.0
            });
            let inst = TimeSeriesInstance::new("p", values.clone(), None).unwrap();
            let grid = patchify(&inst, m).unwrap();
            let n = t / m;
            prop_assert_eq!(grid.n_patches(), n);
            prop_assert_eq!(grid.unpatchify(), values.slice(s![.., ..n * m]).to_owned());
        }
    }
}
