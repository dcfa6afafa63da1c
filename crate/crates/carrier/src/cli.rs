//! Argument parsing and command dispatch.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use carrier_core::corpus::{Family, Regime};
use carrier_core::downstream::AugmentMethod;
use carrier_core::probe::GenerationMethod;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::{self, overlay, CorpusConfig, DownstreamConfig, EmbedConfig, FitConfig, ProbeConfig, ReportConfig};
use crate::embed::ENDPOINT_ENV;
use crate::error::{AppError, Result};
use crate::io::EmbeddingFormat;
use crate::pipeline;

#[derive(Debug, Parser)]
#[command(name = "carrier", version, about = "Implicit polynomial carriers for embedding clouds")]
pub struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    pub threads: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Enumerate template corpora as JSON-lines.
    Corpus(CorpusArgs),
    /// Embed a corpus through an external encoder service.
    Embed(EmbedArgs),
    /// Fit carriers of several degrees and write model files.
    Fit(FitArgs),
    /// Generate synthetic batches and score their validity.
    Probe(ProbeArgs),
    /// Run the few-shot classification experiment.
    Downstream(DownstreamArgs),
    /// Render existing reports as Markdown.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    /// A, B, C or all (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub family: Option<Vec<String>>,
    /// C1..C5 or all (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub regime: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Per-request timeout in seconds.
    #[arg(long)]
    pub timeout: Option<f64>,
    #[arg(long)]
    pub max_retries: Option<u32>,
    /// Output file name under --out; `.csv` selects text.
    #[arg(long)]
    pub output: Option<String>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Embeddings file, one per class (repeatable).
    #[arg(long)]
    pub embeddings: Option<Vec<PathBuf>>,
    /// Corpus file paired with each embeddings file (repeatable).
    #[arg(long)]
    pub corpus: Option<Vec<PathBuf>>,
    #[arg(long, value_enum)]
    pub format: Option<EmbeddingFormat>,
    #[arg(long)]
    pub variance_threshold: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub degrees: Option<Vec<u32>>,
    #[arg(long)]
    pub model_degree: Option<u32>,
    #[arg(long)]
    pub holdout: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// algebraic or normalized_surface
    #[arg(long)]
    pub residual: Option<String>,
    #[arg(long)]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub embeddings: Option<Vec<PathBuf>>,
    /// Model file paired with each embeddings file (repeatable).
    #[arg(long)]
    pub model: Option<Vec<PathBuf>>,
    /// Fit the carrier from the embeddings instead of reading a model file.
    #[arg(long)]
    pub fit_inline: bool,
    #[arg(long, value_enum)]
    pub format: Option<EmbeddingFormat>,
    #[arg(long)]
    pub variance_threshold: Option<f64>,
    #[arg(long)]
    pub degree: Option<u32>,
    /// linear_interpolation, local_perturbation, surface_based or all.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub n_synth: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sigma_scale: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub max_attempts: Option<u32>,
    #[arg(long)]
    pub keep_nonconverged: bool,
    #[arg(long)]
    pub subclusters: Option<usize>,
    #[arg(long)]
    pub f_tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<u32>,
    #[arg(long)]
    pub max_step: Option<f64>,
    /// Neighbors for the neighborhood metrics.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub shape_samples: Option<usize>,
    #[arg(long)]
    pub no_batches: bool,
    #[arg(long)]
    pub ambient_batches: bool,
}

#[derive(Debug, Args)]
pub struct DownstreamArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<EmbeddingFormat>,
    /// Contexts per class in training (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    /// none, linear_interpolation, local_perturbation, surface_based or all.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub runs: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_test: Option<usize>,
    /// Zero-based slot holding the class label.
    #[arg(long)]
    pub target_slot: Option<usize>,
    #[arg(long)]
    pub variance_threshold: Option<f64>,
    #[arg(long)]
    pub degree: Option<u32>,
    /// Synthetic points per real training point.
    #[arg(long)]
    pub ratio: Option<usize>,
    #[arg(long)]
    pub sigma_scale: Option<f64>,
    #[arg(long)]
    pub ablate: bool,
    #[arg(long)]
    pub ablate_k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory holding the reports; defaults to --out.
    #[arg(long)]
    pub input: Option<PathBuf>,
}

fn v<T: Serialize>(x: Option<T>) -> Option<Value> {
    x.map(|x| serde_json::to_value(x).expect("plain values serialize"))
}

fn flag(on: bool) -> Option<Value> {
    on.then_some(Value::Bool(true))
}

fn expand<T: Copy>(raw: Option<Vec<String>>, all: &[T], parse: impl Fn(&str) -> Option<T>, what: &str) -> Result<Option<Vec<T>>> {
    let Some(raw) = raw else { return Ok(None) };
    let mut out = Vec::new();
    for s in raw {
        if s == "all" {
            out.extend_from_slice(all);
        } else {
            out.push(parse(&s).ok_or_else(|| AppError::Usage(format!("unknown {what} `{s}`")))?);
        }
    }
    Ok(Some(out))
}

impl CorpusArgs {
    fn overlay(self) -> Result<Value> {
        let families = expand(self.family, &Family::ALL, |s| s.parse().ok(), "family")?;
        let regimes = expand(self.regime, &Regime::ALL, |s| s.parse().ok(), "regime")?;
        Ok(overlay(vec![("families", v(families)), ("regimes", v(regimes))]))
    }
}

impl EmbedArgs {
    fn overlay(self) -> Value {
        let endpoint = self.endpoint.or_else(|| std::env::var(ENDPOINT_ENV).ok().filter(|s| !s.is_empty()));
        overlay(vec![
            ("corpus", v(self.corpus)),
            ("endpoint", v(endpoint)),
            ("batch_size", v(self.batch_size)),
            ("parallelism", v(self.parallelism)),
            ("timeout_secs", v(self.timeout)),
            ("max_retries", v(self.max_retries)),
            ("output", v(self.output)),
        ])
    }
}

impl FitArgs {
    fn overlay(self) -> Result<Value> {
        let residual = match self.residual.as_deref() {
            None => None,
            Some("algebraic") => Some("algebraic"),
            Some("normalized" | "normalized_surface") => Some("normalized_surface"),
            Some(other) => return Err(AppError::Usage(format!("unknown residual kind `{other}`"))),
        };
        Ok(overlay(vec![
            ("embeddings", v(self.embeddings)),
            ("corpus", v(self.corpus)),
            ("format", v(self.format)),
            ("variance_threshold", v(self.variance_threshold)),
            ("degrees", v(self.degrees)),
            ("model_degree", v(self.model_degree)),
            ("holdout", v(self.holdout)),
            ("seed", v(self.seed)),
            ("residual_kind", v(residual)),
            ("epsilon", v(self.epsilon)),
        ]))
    }
}

impl ProbeArgs {
    fn overlay(self) -> Result<Value> {
        let methods = expand(self.methods, &GenerationMethod::ALL, |s| s.parse().ok(), "method")?;
        Ok(overlay(vec![
            ("embeddings", v(self.embeddings)),
            ("models", v(self.model)),
            ("fit_inline", flag(self.fit_inline)),
            ("format", v(self.format)),
            ("variance_threshold", v(self.variance_threshold)),
            ("degree", v(self.degree)),
            ("methods", v(methods)),
            ("n_synth", v(self.n_synth)),
            ("seed", v(self.seed)),
            ("validity.seed", v(self.seed)),
            ("sigma_scale", v(self.sigma_scale)),
            ("surface.alpha", v(self.alpha)),
            ("surface.max_attempts", v(self.max_attempts)),
            ("surface.keep_nonconverged", flag(self.keep_nonconverged)),
            ("surface.subclusters", v(self.subclusters)),
            ("surface.settings.f_tol", v(self.f_tol)),
            ("surface.settings.max_iter", v(self.max_iter)),
            ("surface.settings.max_step", v(self.max_step)),
            ("validity.k", v(self.k)),
            ("validity.shape_samples", v(self.shape_samples)),
            ("save_batches", self.no_batches.then_some(Value::Bool(false))),
            ("ambient_batches", flag(self.ambient_batches)),
        ]))
    }
}

impl DownstreamArgs {
    fn overlay(self) -> Result<Value> {
        let methods = expand(self.methods, &AugmentMethod::ALL, |s| s.parse().ok(), "method")?;
        Ok(overlay(vec![
            ("corpus", v(self.corpus)),
            ("embeddings", v(self.embeddings)),
            ("format", v(self.format)),
            ("ablate", flag(self.ablate)),
            ("ablate_k", v(self.ablate_k)),
            ("experiment.k_shots", v(self.k)),
            ("experiment.methods", v(methods)),
            ("experiment.n_runs", v(self.runs)),
            ("experiment.seed", v(self.seed)),
            ("experiment.n_test_contexts", v(self.n_test)),
            ("experiment.target_slot", v(self.target_slot)),
            ("experiment.variance_threshold", v(self.variance_threshold)),
            ("experiment.degree", v(self.degree)),
            ("experiment.synthetic_ratio", v(self.ratio)),
            ("experiment.sigma_scale", v(self.sigma_scale)),
        ]))
    }
}

/// Runs one parsed invocation and returns the files it wrote.
pub fn execute(cli: Cli) -> Result<Value> {
    let file: Option<Map<String, Value>> = match &cli.config {
        Some(p) => Some(config::read_config_file(p)?),
        None => None,
    };
    let file = file.as_ref();
    let out = cli.out.clone();
    let run = move || -> Result<(&'static str, Vec<String>)> {
        let out: &Path = &out;
        std::fs::create_dir_all(out).map_err(|e| AppError::io(out, e))?;
        Ok(match cli.command {
            Command::Corpus(a) => {
                let c: CorpusConfig = config::resolve("corpus", file, &a.overlay()?)?;
                ("corpus", pipeline::run_corpus(&c, out)?)
            }
            Command::Embed(a) => {
                let c: EmbedConfig = config::resolve("embed", file, &a.overlay())?;
                ("embed", pipeline::run_embed(&c, out)?)
            }
            Command::Fit(a) => {
                let c: FitConfig = config::resolve("fit", file, &a.overlay()?)?;
                ("fit", pipeline::run_fit(&c, out)?)
            }
            Command::Probe(a) => {
                let c: ProbeConfig = config::resolve("probe", file, &a.overlay()?)?;
                ("probe", pipeline::run_probe(&c, out)?)
            }
            Command::Downstream(a) => {
                let c: DownstreamConfig = config::resolve("downstream", file, &a.overlay()?)?;
                ("downstream", pipeline::run_downstream(&c, out)?)
            }
            Command::Report(a) => {
                let c: ReportConfig = config::resolve("report", file, &overlay(vec![("input", v(a.input))]))?;
                ("report", pipeline::run_report(&c, out)?)
            }
        })
    };
    let (command, written) = match cli.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n as usize)
            .build()
            .map_err(|e| AppError::Config(e.to_string()))?
            .install(run)?,
        None => run()?,
    };
    pipeline::write_manifest(&cli.out)?;
    Ok(json!({ "command": command, "written": written, "manifest": pipeline::MANIFEST }))
}

/// Parses `args`, runs the command and returns the process exit code.
/// Failures print `{"error": {...}}` on stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let err = AppError::Usage(e.render().to_string().trim_end().to_string());
            eprintln!("{}", err.to_json());
            return err.exit_code();
        }
    };
    match execute(cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(err) => {
            eprintln!("{}", err.to_json());
            err.exit_code()
        }
    }
}
