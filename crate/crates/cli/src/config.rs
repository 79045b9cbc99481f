//! Run configuration: a TOML file whose keys mirror [`RunConfig`], with
//! command-line overrides applied on top.

use std::path::{Path, PathBuf};

use markovpl::markov::LikelihoodNorm;
use markovpl::pipeline::{PipelineConfig, PriorSpec};
use markovpl::rvq::EmbedMode;
use markovpl::synth::SynthConfig;
use markovpl::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub source: PathBuf,
    pub target: PathBuf,
    pub truth: PathBuf,
    /// Directory for bundles, pseudo-labels, and reports.
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            source: "data/source.jsonl".into(),
            target: "data/target.jsonl".into(),
            truth: "data/truth.jsonl".into(),
            out_dir: "out".into(),
        }
    }
}

impl Paths {
    pub fn quantizer(&self) -> PathBuf {
        self.out_dir.join("quantizer.jsonl")
    }
    pub fn model(&self) -> PathBuf {
        self.out_dir.join("model.jsonl")
    }
    pub fn pseudo_labels(&self) -> PathBuf {
        self.out_dir.join("pseudo_labels.jsonl")
    }
    pub fn selected(&self) -> PathBuf {
        self.out_dir.join("selected.jsonl")
    }
    pub fn alignment(&self) -> PathBuf {
        self.out_dir.join("alignment.tsv")
    }
    pub fn metrics(&self) -> PathBuf {
        self.out_dir.join("metrics.jsonl")
    }
}

/// Everything a run needs. Pipeline hyperparameters sit at the top level of
/// the file; `[paths]` and `[synth]` are tables.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub paths: Paths,
    pub synth: SynthConfig,
}

fn config_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::InvalidArgument(format!("{}: {e}", path.display()))
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| config_error(origin, e))?;
        let paths = match table.remove("paths") {
            Some(v) => v.try_into().map_err(|e| config_error(origin, format!("[paths]: {e}")))?,
            None => Paths::default(),
        };
        let synth = match table.remove("synth") {
            Some(v) => v.try_into().map_err(|e| config_error(origin, format!("[synth]: {e}")))?,
            None => SynthConfig::default(),
        };
        let pipeline = toml::Value::Table(table)
            .try_into()
            .map_err(|e| config_error(origin, e))?;
        Ok(RunConfig { pipeline, paths, synth })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_error(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.synth.validate()
    }

    /// The configuration echoed into every artifact header.
    pub fn echo(&self) -> Value {
        let mut v = serde_json::to_value(&self.pipeline).expect("config serializes");
        let obj = v.as_object_mut().expect("config is an object");
        obj.insert("paths".into(), serde_json::to_value(&self.paths).expect("paths serialize"));
        obj.insert("synth".into(), serde_json::to_value(&self.synth).expect("synth serializes"));
        v
    }

    pub fn to_toml(&self) -> String {
        let mut table = toml::Table::try_from(&self.pipeline).expect("config serializes");
        table.insert("paths".into(), toml::Value::try_from(&self.paths).expect("paths serialize"));
        let synth = toml::Value::try_from(&self.synth).expect("synth serializes");
        table.insert("synth".into(), synth);
        toml::to_string(&table).expect("toml serializes")
    }
}

/// Flag overrides; every field left unset keeps the file (or default) value.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    #[arg(long, global = true)]
    pub patch_length: Option<usize>,
    #[arg(long, global = true)]
    pub n_coarse: Option<usize>,
    #[arg(long, global = true)]
    pub n_fine: Option<usize>,
    /// Patch embedding: znorm, raw, or projected (with --d-dim).
    #[arg(long, global = true)]
    pub embed: Option<String>,
    /// Output dimension of the projected embedding.
    #[arg(long, global = true)]
    pub d_dim: Option<usize>,
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    #[arg(long, global = true)]
    pub sigma: Option<f64>,
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    #[arg(long, global = true)]
    pub r_top: Option<f64>,
    /// Channel alignment on or off.
    #[arg(long, global = true)]
    pub use_ca: Option<bool>,
    /// "uniform" or comma-separated class probabilities.
    #[arg(long, global = true)]
    pub prior: Option<String>,
    #[arg(long, global = true)]
    pub max_iters: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Log-likelihood normalizer: length or transitions.
    #[arg(long, global = true)]
    pub loglik_norm: Option<String>,
    /// Worker threads (0 = all cores). Does not change results.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub source: Option<PathBuf>,
    #[arg(long, global = true)]
    pub target: Option<PathBuf>,
    #[arg(long, global = true)]
    pub truth: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
}

fn parse_prior(s: &str) -> Result<PriorSpec> {
    if s == "uniform" {
        return Ok(PriorSpec::Uniform);
    }
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| Error::InvalidArgument(format!("--prior entry `{t}`: {e}")))
        })
        .collect::<Result<Vec<f64>>>()
        .map(PriorSpec::Probs)
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        let p = &mut cfg.pipeline;
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field.clone() {
                    p.$field = v;
                }
            )*};
        }
        set!(patch_length, n_coarse, n_fine, epsilon, sigma, tau, r_top, use_ca, max_iters, seed, threads);
        if let Some(seed) = self.seed {
            cfg.synth.seed = seed;
        }
        if let Some(prior) = &self.prior {
            p.prior = parse_prior(prior)?;
        }
        if let Some(norm) = &self.loglik_norm {
            p.loglik_norm = match norm.as_str() {
                "length" => LikelihoodNorm::Length,
                "transitions" => LikelihoodNorm::Transitions,
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "--loglik-norm must be length or transitions, got `{other}`"
                    )))
                }
            };
        }
        match (self.embed.as_deref(), self.d_dim) {
            (None, None) => {}
            (Some("znorm"), None) => p.embed = EmbedMode::Znorm,
            (Some("raw"), None) => p.embed = EmbedMode::Raw,
            (Some("projected") | None, Some(d_dim)) => {
                let seed = match p.embed {
                    EmbedMode::Projected { seed, .. } => seed,
                    _ => p.seed,
                };
                p.embed = EmbedMode::Projected { d_dim, seed };
            }
            (Some("projected"), None) => {
                return Err(Error::InvalidArgument("--embed projected needs --d-dim".into()))
            }
            (Some(other), _) => {
                return Err(Error::InvalidArgument(format!(
                    "--embed must be znorm, raw, or projected (with --d-dim), got `{other}`"
                )))
            }
        }
        let paths = &mut cfg.paths;
        for (flag, slot) in [
            (&self.source, &mut paths.source),
            (&self.target, &mut paths.target),
            (&self.truth, &mut paths.truth),
            (&self.out_dir, &mut paths.out_dir),
        ] {
            if let Some(v) = flag {
                *slot = v.clone();
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_keys_mirror_fields_and_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        for key in ["patch_length", "n_coarse", "n_fine", "epsilon", "sigma", "tau", "r_top", "use_ca", "prior", "max_iters", "seed"] {
            assert!(text.contains(&format!("{key} =")), "{key} missing from\n{text}");
        }
        assert_eq!(RunConfig::from_toml(&text, Path::new("x")).unwrap(), cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_toml(
            "tau = 2.0\nprior = [0.7, 0.1, 0.1, 0.1]\nembed = { mode = \"raw\" }\n[paths]\nout_dir = \"o\"\n[synth]\nn_source = 10\n",
            Path::new("x"),
        )
        .unwrap();
        assert_eq!(cfg.pipeline.tau, 2.0);
        assert_eq!(cfg.pipeline.prior, PriorSpec::Probs(vec![0.7, 0.1, 0.1, 0.1]));
        assert_eq!(cfg.pipeline.embed, EmbedMode::Raw);
        assert_eq!(cfg.pipeline.n_coarse, 8);
        assert_eq!(cfg.paths.out_dir, PathBuf::from("o"));
        assert_eq!(cfg.paths.source, PathBuf::from("data/source.jsonl"));
        assert_eq!(cfg.synth.n_source, 10);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("temperature = 1.0\n", Path::new("x")).is_err());
        assert!(RunConfig::from_toml("[paths]\nsrc = \"a\"\n", Path::new("x")).is_err());
    }

    #[test]
    fn flags_win_over_file() {
        let mut cfg = RunConfig::from_toml("tau = 2.0\nsigma = 0.1\n", Path::new("x")).unwrap();
        let o = Overrides {
            tau: Some(5.0),
            prior: Some("0.5,0.5".into()),
            embed: Some("projected".into()),
            d_dim: Some(4),
            use_ca: Some(false),
            ..Default::default()
        };
        o.apply(&mut cfg).unwrap();
        assert_eq!(cfg.pipeline.tau, 5.0);
        assert_eq!(cfg.pipeline.sigma, 0.1);
        assert!(!cfg.pipeline.use_ca);
        assert_eq!(cfg.pipeline.prior, PriorSpec::Probs(vec![0.5, 0.5]));
        assert_eq!(cfg.pipeline.embed, EmbedMode::Projected { d_dim: 4, seed: 0 });
    }

    #[test]
    fn bad_overrides() {
        let mut cfg = RunConfig::default();
        assert!(Overrides { prior: Some("a,b".into()), ..Default::default() }.apply(&mut cfg).is_err());
        assert!(Overrides { embed: Some("pca".into()), ..Default::default() }.apply(&mut cfg).is_err());
        assert!(Overrides { loglik_norm: Some("n".into()), ..Default::default() }.apply(&mut cfg).is_err());
    }

    #[test]
    fn echo_omits_threads() {
        let mut cfg = RunConfig::default();
        cfg.pipeline.threads = 4;
        let v = cfg.echo();
        assert!(v.get("threads").is_none());
        assert!(v.get("paths").is_some());
        assert!(v.get("tau").is_some());
    }
}
