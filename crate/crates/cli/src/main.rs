use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use markovpl::dataset::{load_corpus, save_corpus};
use markovpl::diagnostics::{accuracy_mf1, MetricReport};
use markovpl::markov::{load_model, save_model, TransitionMatrix};
use markovpl::pipeline::{fit_source, label_target};
use markovpl::pseudolabel::{load_pseudo_labels, load_selection, save_pseudo_labels, save_selection};
use markovpl::record::{self, Header};
use markovpl::rvq::{load_quantizer, save_quantizer};
use markovpl::synth::{generate, inject_channel_noise, load_truth, save_truth};
use markovpl::{Error, ErrorKind, Result};
use serde::Serialize;

mod config;

use config::{Overrides, RunConfig};

const METRICS_KIND: &str = "metrics";

#[derive(Debug, Parser)]
#[command(name = "markovpl", version, about = "Code-transition pseudo-labeling for time-series domain adaptation")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic source, target, and sealed truth corpora.
    Synth {
        /// Channel to corrupt with Gaussian noise in extra target variants.
        #[arg(long, requires = "corrupt_magnitudes")]
        corrupt_channel: Option<usize>,
        /// Comma-separated noise standard deviations, one target variant each.
        #[arg(long, value_delimiter = ',', requires = "corrupt_channel")]
        corrupt_magnitudes: Vec<f64>,
    },
    /// Fit the quantizer and transition model on the labeled source corpus.
    Fit,
    /// Pseudo-label the target corpus with fitted bundles.
    Label,
    /// Score pseudo-labels against the sealed truth file.
    Eval {
        /// Pseudo-label file; defaults to the one in the output directory.
        #[arg(long)]
        pseudo_labels: Option<PathBuf>,
        /// Confident-subset file; defaults to the one in the output directory.
        #[arg(long)]
        selected: Option<PathBuf>,
    },
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn variant_path(target: &Path, channel: usize, idx: usize) -> PathBuf {
    let stem = target.file_stem().and_then(|s| s.to_str()).unwrap_or("target");
    target.with_file_name(format!("{stem}.ch{channel}.noise{idx}.jsonl"))
}

fn cmd_synth(cfg: &RunConfig, corrupt: Option<(usize, &[f64])>) -> Result<()> {
    cfg.validate()?;
    let echo = cfg.echo();
    let (source, target) = generate(&cfg.synth)?;
    let paths = &cfg.paths;
    for p in [&paths.source, &paths.target, &paths.truth] {
        ensure_parent(p)?;
    }
    save_corpus(&paths.source, &source, &echo)?;
    save_corpus(&paths.target, &target.without_labels(), &echo)?;
    save_truth(&paths.truth, &target, &echo)?;
    println!("source\t{}\t{} instances", paths.source.display(), source.len());
    println!("target\t{}\t{} instances", paths.target.display(), target.len());
    println!("truth\t{}", paths.truth.display());
    if let Some((channel, magnitudes)) = corrupt {
        let unlabeled = target.without_labels();
        for (i, &mag) in magnitudes.iter().enumerate() {
            let noisy = inject_channel_noise(&unlabeled, channel, mag, cfg.synth.seed)?;
            let path = variant_path(&paths.target, channel, i + 1);
            save_corpus(&path, &noisy, &echo)?;
            println!("variant\t{}\tchannel {channel}\tnoise {mag}", path.display());
        }
    }
    Ok(())
}

/// Mean row entropy (nats) of a transition matrix.
fn mean_row_entropy(tm: &TransitionMatrix) -> f64 {
    let n = tm.n_codes();
    let h: f64 = tm
        .probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    h / n as f64
}

fn cmd_fit(cfg: &RunConfig) -> Result<()> {
    let echo = cfg.echo();
    let source = load_corpus(&cfg.paths.source)?;
    let fitted = fit_source(&source, &cfg.pipeline)?;
    std::fs::create_dir_all(&cfg.paths.out_dir).map_err(|e| Error::Io {
        path: cfg.paths.out_dir.clone(),
        source: e,
    })?;
    save_quantizer(&cfg.paths.quantizer(), &fitted.quantizer, &echo)?;
    save_model(&cfg.paths.model(), &fitted.model, &echo)?;

    let u = &fitted.usage;
    println!("quantizer\t{}", cfg.paths.quantizer().display());
    println!("model\t{}", cfg.paths.model().display());
    println!("coarse_dead_pct\t{}", u.coarse_dead_pct);
    println!("fine_dead_pct\t{}", u.fine_dead_pct);
    println!("recon_mse\t{}", u.recon_mse);
    println!("coarse_only_mse\t{}", u.coarse_only_mse);
    if let Some(loss) = fitted.report.code_loss.last() {
        println!("code_loss\t{loss}");
    }
    println!("class\tchannel\tmean_row_entropy");
    for (k, per_channel) in fitted.model.class_tms.tms.iter().enumerate() {
        for (d, tm) in per_channel.iter().enumerate() {
            println!("{k}\t{d}\t{:.6}", mean_row_entropy(tm));
        }
    }
    Ok(())
}

fn cmd_label(cfg: &RunConfig) -> Result<()> {
    let echo = cfg.echo();
    let q = load_quantizer(&cfg.paths.quantizer())?;
    let model = load_model(&cfg.paths.model())?;
    let target = load_corpus(&cfg.paths.target)?;
    let out = label_target(&target, &q, &model, &cfg.pipeline)?;
    let ids: Vec<String> = target.instances.iter().map(|i| i.id.clone()).collect();
    save_pseudo_labels(&cfg.paths.pseudo_labels(), &ids, &out.labels, &out.weights, &echo)?;
    save_selection(&cfg.paths.selected(), &ids, &out.selected, cfg.pipeline.r_top, &echo)?;
    out.weights.write_report(&cfg.paths.alignment(), &echo)?;
    println!("pseudo_labels\t{}\t{} instances", cfg.paths.pseudo_labels().display(), ids.len());
    println!("selected\t{}\t{} instances", cfg.paths.selected().display(), out.selected.len());
    println!("alignment\t{}", cfg.paths.alignment().display());
    print!("{}", out.weights.report(&echo).lines().skip(1).collect::<Vec<_>>().join("\n"));
    println!();
    Ok(())
}

#[derive(Serialize)]
struct MetricRecord<'a> {
    subset: &'a str,
    #[serde(flatten)]
    report: &'a MetricReport,
}

fn cmd_eval(cfg: &RunConfig, pseudo: Option<PathBuf>, selected: Option<PathBuf>) -> Result<()> {
    let echo = cfg.echo();
    let labels = load_pseudo_labels(&pseudo.unwrap_or_else(|| cfg.paths.pseudo_labels()))?;
    let (n_classes, truth) = load_truth(&cfg.paths.truth)?;
    let truth: HashMap<&str, usize> = truth.iter().map(|r| (r.id.as_str(), r.label)).collect();
    if truth.len() != labels.len() {
        return Err(Error::IdMismatch(format!(
            "{} pseudo-labels but {} truth records",
            labels.len(),
            truth.len()
        )));
    }
    let mut pred = Vec::with_capacity(labels.len());
    let mut gold = Vec::with_capacity(labels.len());
    for rec in &labels {
        let t = truth
            .get(rec.id.as_str())
            .ok_or_else(|| Error::IdMismatch(format!("`{}` has no truth record", rec.id)))?;
        pred.push(rec.label);
        gold.push(*t);
    }
    let all = accuracy_mf1(&pred, &gold, n_classes)?;
    let mut reports = vec![("all", all)];

    let sel_path = selected.unwrap_or_else(|| cfg.paths.selected());
    if sel_path.exists() {
        let sel = load_selection(&sel_path)?;
        let mut sp = Vec::with_capacity(sel.len());
        let mut sg = Vec::with_capacity(sel.len());
        for s in &sel {
            match labels.get(s.index) {
                Some(rec) if rec.id == s.id => {
                    sp.push(pred[s.index]);
                    sg.push(gold[s.index]);
                }
                _ => {
                    return Err(Error::IdMismatch(format!(
                        "selection entry {} (`{}`) does not match the pseudo-label file",
                        s.index, s.id
                    )))
                }
            }
        }
        if !sp.is_empty() {
            reports.push(("top_r", accuracy_mf1(&sp, &sg, n_classes)?));
        }
    }

    println!("subset\tn\taccuracy\tmacro_f1");
    for (name, r) in &reports {
        println!("{name}\t{}\t{:.6}\t{:.6}", r.n, r.accuracy, r.macro_f1);
    }
    let records: Vec<MetricRecord> = reports
        .iter()
        .map(|(subset, report)| MetricRecord { subset, report })
        .collect();
    std::fs::create_dir_all(&cfg.paths.out_dir).map_err(|e| Error::Io {
        path: cfg.paths.out_dir.clone(),
        source: e,
    })?;
    let meta = serde_json::json!({ "n_classes": n_classes });
    record::write_envelope(&cfg.paths.metrics(), &Header::new(METRICS_KIND, meta, echo), &records)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cli.overrides.apply(&mut cfg)?;
    cfg.pipeline.validate()?;
    let threads = cfg.pipeline.clone();
    threads.run(|| match cli.command {
        Command::Synth {
            corrupt_channel,
            corrupt_magnitudes,
        } => cmd_synth(&cfg, corrupt_channel.map(|c| (c, corrupt_magnitudes.as_slice()))),
        Command::Fit => cmd_fit(&cfg),
        Command::Label => cmd_label(&cfg),
        Command::Eval { pseudo_labels, selected } => cmd_eval(&cfg, pseudo_labels, selected),
        Command::ShowConfig => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Internal => 3,
            })
        }
    }
}
