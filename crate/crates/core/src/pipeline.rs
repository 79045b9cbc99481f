//! End-to-end fit and label stages shared by the command-line driver and tests.

use serde::{Deserialize, Serialize};

use crate::dataset::{DomainDataset, Role};
use crate::error::{Error, Result};
use crate::markov::{
    build_channel_tm, build_class_tm, ChannelTm, LikelihoodNorm, TransitionModel, DEFAULT_EPSILON,
};
use crate::pseudolabel::{label_dataset, top_r_select, LabelOptions, LabelPrior, PseudoLabel};
use crate::rvq::{
    code_stats, embed, encode_dataset, fit, CodeGrid, CodeUsage, EmbedMode, FitConfig, FitReport,
    ResidualQuantizer,
};
use crate::transport::{channel_weights, cosine_cost, ChannelWeights, DEFAULT_SIGMA};
use crate::{dataset::patchify, par};

/// Class prior: `"uniform"` or an explicit probability vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum PriorSpec {
    #[default]
    Uniform,
    Probs(Vec<f64>),
}

impl Serialize for PriorSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            PriorSpec::Uniform => s.serialize_str("uniform"),
            PriorSpec::Probs(p) => p.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for PriorSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Name(String),
            Probs(Vec<f64>),
        }
        match Raw::deserialize(d)? {
            Raw::Name(n) if n == "uniform" => Ok(PriorSpec::Uniform),
            Raw::Name(n) => Err(serde::de::Error::custom(format!(
                "prior must be \"uniform\" or a probability vector, got \"{n}\""
            ))),
            Raw::Probs(p) => Ok(PriorSpec::Probs(p)),
        }
    }
}

/// Hyperparameters of the whole pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub patch_length: usize,
    pub n_coarse: usize,
    pub n_fine: usize,
    pub embed: EmbedMode,
    pub epsilon: f64,
    pub sigma: f64,
    pub tau: f64,
    pub r_top: f64,
    pub use_ca: bool,
    pub prior: PriorSpec,
    pub max_iters: usize,
    pub seed: u64,
    pub loglik_norm: LikelihoodNorm,
    /// Worker threads; 0 uses the global pool. Never echoed into artifacts,
    /// since results do not depend on it.
    #[serde(skip_serializing)]
    pub threads: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            patch_length: 8,
            n_coarse: 8,
            n_fine: 64,
            embed: EmbedMode::Znorm,
            epsilon: DEFAULT_EPSILON,
            sigma: DEFAULT_SIGMA,
            tau: 1.0,
            r_top: 0.5,
            use_ca: true,
            prior: PriorSpec::Uniform,
            max_iters: 50,
            seed: 0,
            loglik_norm: LikelihoodNorm::Length,
            threads: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.patch_length < 2 {
            return bad(format!("patch_length must be >= 2, got {}", self.patch_length));
        }
        if self.n_coarse < 2 || self.n_fine < 2 {
            return bad("n_coarse and n_fine must be >= 2".into());
        }
        if self.max_iters == 0 {
            return bad("max_iters must be >= 1".into());
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.r_top > 0.0 && self.r_top <= 1.0) {
            return bad(format!("r_top must lie in (0, 1], got {}", self.r_top));
        }
        if let EmbedMode::Projected { d_dim: 0, .. } = self.embed {
            return bad("projected d_dim must be positive".into());
        }
        if let PriorSpec::Probs(p) = &self.prior {
            let s: f64 = p.iter().sum();
            if p.is_empty() || p.iter().any(|v| !(*v >= 0.0)) || (s - 1.0).abs() > 1e-6 {
                return bad(format!("prior must be a probability vector summing to 1 (sum {s})"));
            }
        }
        Ok(())
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            n_coarse: self.n_coarse,
            n_fine: self.n_fine,
            max_iters: self.max_iters,
            seed: self.seed,
        }
    }

    pub fn label_options(&self) -> LabelOptions {
        LabelOptions {
            epsilon: self.epsilon,
            norm: self.loglik_norm,
        }
    }

    pub fn label_prior(&self, n_classes: usize) -> Result<LabelPrior> {
        match &self.prior {
            PriorSpec::Uniform => LabelPrior::uniform(n_classes, self.tau),
            PriorSpec::Probs(p) if p.len() != n_classes => Err(Error::InvalidArgument(format!(
                "prior has {} entries for {n_classes} classes",
                p.len()
            ))),
            PriorSpec::Probs(p) => LabelPrior::new(p.clone(), self.tau),
        }
    }

    /// Runs `f` on a pool sized by `threads`.
    pub fn run<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        if self.threads == 0 {
            f()
        } else {
            par::with_threads(self.threads, f)
        }
    }
}

/// Output of the source fitting stage.
#[derive(Debug, Clone)]
pub struct Fitted {
    pub quantizer: ResidualQuantizer,
    pub model: TransitionModel,
    pub report: FitReport,
    pub usage: CodeUsage,
    pub codes: Vec<CodeGrid>,
}

/// Fits the quantizer on the source pool, encodes the source, and estimates
/// class-wise and channel-wise transition matrices.
pub fn fit_source(source: &DomainDataset, cfg: &PipelineConfig) -> Result<Fitted> {
    cfg.validate()?;
    if source.role != Role::Source {
        return Err(Error::InvalidArgument("fitting expects a source-role dataset".into()));
    }
    let labels = source
        .instances
        .iter()
        .map(|i| i.label.ok_or_else(|| Error::MissingLabel { id: i.id.clone() }))
        .collect::<Result<Vec<usize>>>()?;
    let latents = par::try_map_slice(&source.instances, |inst| {
        embed(&patchify(inst, cfg.patch_length)?, cfg.embed)
    })?;
    let (quantizer, report) = fit(&latents, &cfg.fit_config(), cfg.embed, cfg.patch_length)?;
    let (latents, codes) = encode_dataset(&quantizer, source)?;
    let usage = code_stats(&quantizer, &latents, &codes)?;
    let n_c = quantizer.n_coarse();
    let class_tms = build_class_tm(&codes, &labels, source.n_classes, source.n_channels, n_c)?;
    let channel_source = build_channel_tm(&codes, source.n_channels, n_c)?;
    Ok(Fitted {
        quantizer,
        model: TransitionModel {
            class_tms,
            channel_source,
            channel_target: None,
            epsilon: cfg.epsilon,
        },
        report,
        usage,
        codes,
    })
}

/// Output of the target labeling stage.
#[derive(Debug, Clone)]
pub struct Labeled {
    pub labels: Vec<PseudoLabel>,
    pub weights: ChannelWeights,
    /// Ascending indices of the top-r confident subset.
    pub selected: Vec<usize>,
    pub channel_target: ChannelTm,
}

/// Channel weights between the source and target channel models, or all
/// ones when channel alignment is disabled.
pub fn alignment_weights(
    q: &ResidualQuantizer,
    source: &ChannelTm,
    target: &ChannelTm,
    cfg: &PipelineConfig,
) -> Result<ChannelWeights> {
    if !cfg.use_ca {
        return Ok(ChannelWeights::uniform(source.n_channels(), cfg.sigma));
    }
    let m = cosine_cost(&q.coarse)?;
    channel_weights(&source.smoothed(cfg.epsilon)?, &target.smoothed(cfg.epsilon)?, &m, cfg.sigma)
}

/// Encodes the target, aligns channels against the source, pseudo-labels
/// every instance, and selects the confident subset.
pub fn label_target(
    target: &DomainDataset,
    q: &ResidualQuantizer,
    model: &TransitionModel,
    cfg: &PipelineConfig,
) -> Result<Labeled> {
    cfg.validate()?;
    let d = model.class_tms.n_channels;
    if target.n_channels != d {
        return Err(Error::DimensionMismatch {
            id: "<target corpus>".into(),
            detail: format!("{} channels, model expects {d}", target.n_channels),
        });
    }
    if target.n_classes > model.class_tms.n_classes {
        return Err(Error::DimensionMismatch {
            id: "<target corpus>".into(),
            detail: format!(
                "declares {} classes, model has {}",
                target.n_classes, model.class_tms.n_classes
            ),
        });
    }
    let (_, codes) = encode_dataset(q, target)?;
    let channel_target = build_channel_tm(&codes, d, q.n_coarse())?;
    let weights = alignment_weights(q, &model.channel_source, &channel_target, cfg)?;
    let prior = cfg.label_prior(model.class_tms.n_classes)?;
    let labels = label_dataset(target, q, &model.class_tms, &weights, &prior, &cfg.label_options())?;
    let selected = top_r_select(&labels, cfg.r_top)?;
    Ok(Labeled {
        labels,
        weights,
        selected,
        channel_target,
    })
}
