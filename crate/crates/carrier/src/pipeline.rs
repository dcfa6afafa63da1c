//! The command pipelines. Each writes its outputs under `out` and returns
//! the relative paths it wrote; `manifest.json` is refreshed afterwards.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use carrier_core::cloud::{join_corpus_embeddings, EmbeddingCloud};
use carrier_core::corpus::{builtin_family, enumerate_regime, CorpusRecord};
use carrier_core::downstream::{ablation, run_one, summarize, AblationRow, RunResult, SummaryRow};
use carrier_core::probe::{
    generate_linear_interpolation, generate_local_perturbation, generate_surface_based, reconstruct_batch,
    GenerationMethod, PointDiagnostics, SyntheticBatch,
};
use carrier_core::reduce::ReducedSpace;
use carrier_core::rng::{derive_seed, substream};
use carrier_core::surface::{fit_implicit, residuals, FitOptions, ImplicitPolyModel};
use carrier_core::validity::{evaluate_batch, ValidityReport};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{CorpusConfig, DownstreamConfig, EmbedConfig, FitConfig, ProbeConfig, ReportConfig};
use crate::embed::EmbedClient;
use crate::error::{AppError, Result};
use crate::io::{self, EmbeddingFormat};
use crate::model_file::ModelFile;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputFingerprint {
    pub role: String,
    pub path: String,
    pub fingerprint: String,
}

impl InputFingerprint {
    fn of(role: &str, path: &Path) -> Result<Self> {
        Ok(InputFingerprint {
            role: role.into(),
            path: path.display().to_string(),
            fingerprint: io::fingerprint_file(path)?,
        })
    }
}

/// Common envelope of every JSON report. Reports carry no timestamps, so
/// reruns with the same inputs and config are byte-identical.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report<C, R> {
    pub schema_version: u32,
    pub command: String,
    pub inputs: Vec<InputFingerprint>,
    pub config: C,
    pub results: R,
}

fn report<C, R>(command: &str, mut inputs: Vec<InputFingerprint>, out: &Path, config: C, results: R) -> Report<C, R> {
    for i in &mut inputs {
        i.path = within(Path::new(&i.path), out).display().to_string();
    }
    Report { schema_version: REPORT_SCHEMA_VERSION, command: command.into(), inputs, config, results }
}

/// Paths under the output directory are recorded relative to it, so a
/// report does not depend on where the run was written.
fn within(path: &Path, out: &Path) -> PathBuf {
    path.strip_prefix(out).map(Path::to_path_buf).unwrap_or_else(|_| path.to_path_buf())
}

/// Collects written files as paths relative to the output directory.
struct Outputs<'a> {
    root: &'a Path,
    written: Vec<String>,
}

impl<'a> Outputs<'a> {
    fn new(root: &'a Path) -> Self {
        Outputs { root, written: Vec::new() }
    }

    fn path(&mut self, rel: &str) -> PathBuf {
        self.written.push(rel.to_string());
        self.root.join(rel)
    }

    fn json<T: Serialize + ?Sized>(&mut self, rel: &str, value: &T) -> Result<()> {
        let p = self.path(rel);
        io::write_json(&p, value)
    }

    fn text(&mut self, rel: &str, text: &str) -> Result<()> {
        let p = self.path(rel);
        io::write_bytes(&p, text.as_bytes())
    }

    fn csv<T: Serialize>(&mut self, rel: &str, rows: &[T]) -> Result<()> {
        let p = self.path(rel);
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r).map_err(|e| AppError::format(&p, e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| AppError::format(&p, e.to_string()))?;
        io::write_bytes(&p, &bytes)
    }

    fn finish(self) -> Vec<String> {
        self.written
    }
}

fn require_file(role: &str, path: &Path) -> Result<()> {
    if path.as_os_str().is_empty() {
        return Err(AppError::Config(format!("no {role} file given")));
    }
    if !path.is_file() {
        return Err(AppError::Config(format!("{role} file {} does not exist", path.display())));
    }
    Ok(())
}

fn load_cloud(path: &Path, format: Option<EmbeddingFormat>) -> Result<EmbeddingCloud> {
    io::load_embeddings(path, format.unwrap_or_else(|| EmbeddingFormat::from_path(path)))
}

fn unique_labels(raw: Vec<String>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    raw.into_iter()
        .enumerate()
        .map(|(i, l)| if seen.insert(l.clone()) { l } else { format!("{l}-{i}") })
        .collect()
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "cloud".into())
}

fn model_name(degree: u32) -> String {
    match degree {
        1 => "affine".into(),
        2 => "quadric".into(),
        3 => "cubic".into(),
        d => format!("degree{d}"),
    }
}

// ---------------------------------------------------------------- corpus

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusFileRow {
    pub family: String,
    pub regime: String,
    pub records: usize,
    pub file: String,
}

pub fn corpus_file_name(record_family: &str, regime: &str) -> String {
    format!("corpus_{record_family}_{regime}.jsonl")
}

pub fn run_corpus(cfg: &CorpusConfig, out: &Path) -> Result<Vec<String>> {
    if cfg.families.is_empty() || cfg.regimes.is_empty() {
        return Err(AppError::Config("families and regimes must not be empty".into()));
    }
    let mut o = Outputs::new(out);
    let mut rows = Vec::new();
    for &family in &cfg.families {
        let fam = builtin_family(family);
        for &regime in &cfg.regimes {
            let records = enumerate_regime(&fam, regime);
            let name = corpus_file_name(&family.to_string(), &regime.to_string());
            let path = o.path(&name);
            io::write_corpus_jsonl(&records, &path)?;
            rows.push(CorpusFileRow {
                family: family.to_string(),
                regime: regime.to_string(),
                records: records.len(),
                file: name,
            });
        }
    }
    o.json("corpus_report.json", &report("corpus", Vec::new(), out, cfg, &rows))?;
    Ok(o.finish())
}

// ----------------------------------------------------------------- embed

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedSummary {
    pub rows: usize,
    pub dim: usize,
    pub requests: usize,
    pub file: String,
}

pub fn run_embed(cfg: &EmbedConfig, out: &Path) -> Result<Vec<String>> {
    require_file("corpus", &cfg.corpus)?;
    let records = io::read_corpus_jsonl(&cfg.corpus)?;
    let client = EmbedClient {
        endpoint: cfg.endpoint.clone(),
        batch_size: cfg.batch_size,
        parallelism: cfg.parallelism,
        timeout_secs: cfg.timeout_secs,
        max_retries: cfg.max_retries,
        ..EmbedClient::new("")
    };
    let sentences: Vec<String> = records.iter().map(|r| r.sentence.clone()).collect();
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let cloud = client.embed(&sentences, ids, &cfg.endpoint)?;
    let mut o = Outputs::new(out);
    let path = o.path(&cfg.output);
    io::save_embeddings(&cloud, &path, EmbeddingFormat::from_path(&path))?;
    let summary = EmbedSummary {
        rows: cloud.len(),
        dim: cloud.dim(),
        requests: client.request_count(sentences.len()),
        file: cfg.output.clone(),
    };
    let inputs = vec![InputFingerprint::of("corpus", &cfg.corpus)?];
    o.json("embed_report.json", &report("embed", inputs, out, cfg, &summary))?;
    Ok(o.finish())
}

// ------------------------------------------------------------------- fit

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRow {
    pub class: String,
    pub regime: Option<String>,
    pub model: String,
    pub degree: u32,
    pub basis_size: usize,
    pub reduced_dim: usize,
    pub explained: f64,
    pub n_train: usize,
    pub n_holdout: usize,
    pub rmse: f64,
    pub mae: f64,
    pub holdout_rmse: Option<f64>,
    pub holdout_mae: Option<f64>,
    pub condition_gap: f64,
    pub degenerate: bool,
}

/// Seeded train/holdout row split; both sides ascending.
pub fn holdout_split(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(AppError::Config("holdout must lie in [0, 1)".into()));
    }
    let n_hold = (fraction * n as f64).round() as usize;
    if n_hold == 0 {
        return Ok(((0..n).collect(), Vec::new()));
    }
    if n - n_hold < 2 {
        return Err(AppError::Config(format!("holdout of {n_hold} leaves fewer than 2 of {n} rows to fit")));
    }
    let mut rng = substream(seed, 0);
    let mut hold = rand::seq::index::sample(&mut rng, n, n_hold).into_vec();
    hold.sort_unstable();
    let held: BTreeSet<usize> = hold.iter().copied().collect();
    let train = (0..n).filter(|i| !held.contains(i)).collect();
    Ok((train, hold))
}

struct ClassInput {
    label: String,
    regime: Option<String>,
    points: DMatrix<f64>,
}

fn load_fit_inputs(cfg: &FitConfig, inputs: &mut Vec<InputFingerprint>) -> Result<Vec<ClassInput>> {
    if cfg.embeddings.is_empty() {
        return Err(AppError::Config("no embeddings given".into()));
    }
    if !cfg.corpus.is_empty() && cfg.corpus.len() != cfg.embeddings.len() {
        return Err(AppError::Config("pass one corpus file per embeddings file, or none".into()));
    }
    let mut raw_labels = Vec::new();
    let mut classes = Vec::new();
    for (i, path) in cfg.embeddings.iter().enumerate() {
        require_file("embeddings", path)?;
        inputs.push(InputFingerprint::of("embeddings", path)?);
        let cloud = load_cloud(path, cfg.format)?;
        let (points, label, regime) = match cfg.corpus.get(i) {
            Some(cpath) => {
                require_file("corpus", cpath)?;
                inputs.push(InputFingerprint::of("corpus", cpath)?);
                let records = io::read_corpus_jsonl(cpath)?;
                let joined = join_corpus_embeddings(&records, &cloud)?;
                let first: &CorpusRecord = records.first().ok_or_else(|| AppError::format(cpath, "empty corpus"))?;
                (joined.points, format!("{}-{}", first.family, first.regime), Some(first.regime.to_string()))
            }
            None => (cloud.points().clone(), stem(path), None),
        };
        raw_labels.push(label);
        classes.push(ClassInput { label: String::new(), regime, points });
    }
    for (c, l) in classes.iter_mut().zip(unique_labels(raw_labels)) {
        c.label = l;
    }
    Ok(classes)
}

pub fn run_fit(cfg: &FitConfig, out: &Path) -> Result<Vec<String>> {
    if cfg.degrees.is_empty() {
        return Err(AppError::Config("degrees must not be empty".into()));
    }
    let mut inputs = Vec::new();
    let classes = load_fit_inputs(cfg, &mut inputs)?;
    let config_value = serde_json::to_value(cfg)?;
    let options = FitOptions { residual_kind: cfg.residual_kind, epsilon: cfg.epsilon };

    let fitted: Vec<(Vec<FitRow>, ModelFile)> = classes
        .par_iter()
        .enumerate()
        .map(|(ci, class)| -> Result<(Vec<FitRow>, ModelFile)> {
            let n = class.points.nrows();
            let (train, hold) = holdout_split(n, cfg.holdout, derive_seed(cfg.seed, &[ci as u64]))?;
            let train_x = class.points.select_rows(train.iter());
            let space = ReducedSpace::fit(&train_x, cfg.variance_threshold)?;
            let z_train = space.project(&train_x)?;
            let z_hold = if hold.is_empty() { None } else { Some(space.project(&class.points.select_rows(hold.iter()))?) };
            let mut rows = Vec::new();
            let mut keep: Option<(ImplicitPolyModel, _)> = None;
            let mut degrees = cfg.degrees.clone();
            if !degrees.contains(&cfg.model_degree) {
                degrees.push(cfg.model_degree);
            }
            for &degree in &degrees {
                let (model, diag) = fit_implicit(&z_train, degree, options)?;
                let held = match &z_hold {
                    Some(z) => Some(residuals(&model, z, cfg.residual_kind, cfg.epsilon)?.1),
                    None => None,
                };
                if cfg.degrees.contains(&degree) {
                    rows.push(FitRow {
                        class: class.label.clone(),
                        regime: class.regime.clone(),
                        model: model_name(degree),
                        degree,
                        basis_size: model.basis().len(),
                        reduced_dim: space.reduced_dim(),
                        explained: space.explained,
                        n_train: train.len(),
                        n_holdout: hold.len(),
                        rmse: diag.residuals.rmse,
                        mae: diag.residuals.mae,
                        holdout_rmse: held.map(|h| h.rmse),
                        holdout_mae: held.map(|h| h.mae),
                        condition_gap: diag.condition_gap,
                        degenerate: diag.degenerate,
                    });
                }
                if degree == cfg.model_degree {
                    keep = Some((model, diag));
                }
            }
            let (model, diag) = keep.expect("model degree is always fitted");
            let fingerprint = inputs
                .iter()
                .filter(|f| f.role == "embeddings")
                .nth(ci)
                .map(|f| f.fingerprint.clone())
                .unwrap_or_default();
            let file = ModelFile::new(class.label.clone(), &space, &model, fingerprint, train, config_value.clone(), diag);
            Ok((rows, file))
        })
        .collect::<Result<_>>()?;

    let mut o = Outputs::new(out);
    let mut all_rows = Vec::new();
    for (rows, file) in &fitted {
        o.json(&format!("models/{}.model.json", file.label), file)?;
        all_rows.extend(rows.iter().cloned());
    }
    o.csv("fit_report.csv", &all_rows)?;
    o.json("fit_report.json", &report("fit", inputs, out, cfg, &all_rows))?;
    Ok(o.finish())
}

// ----------------------------------------------------------------- probe

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub class: String,
    pub method: GenerationMethod,
    pub n_synth: usize,
    pub generated: usize,
    pub convergence_fraction: f64,
    pub mean_normalized_residual: Option<f64>,
    pub validity: ValidityReport,
}

/// Flat row in the six-metric column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeCsvRow {
    pub class: String,
    pub method: GenerationMethod,
    pub n_synth: usize,
    pub surface: f64,
    pub neighborhood: f64,
    pub neigh_dev: f64,
    pub distr_dev: f64,
    pub hess_shape: f64,
    pub coeff_cons: f64,
    pub generated: usize,
    pub convergence_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResults {
    pub rows: Vec<ProbeRow>,
    /// Per (method, n_synth) means over classes; empty for a single class.
    pub pooled: Vec<ProbeCsvRow>,
}

#[derive(Serialize)]
struct BatchSidecar<'a> {
    class: &'a str,
    method: GenerationMethod,
    seed: u64,
    requested: usize,
    generated: usize,
    diagnostics: &'a [PointDiagnostics],
}

struct ProbeClass {
    label: String,
    space: ReducedSpace,
    model: ImplicitPolyModel,
    z: DMatrix<f64>,
}

fn load_probe_inputs(cfg: &ProbeConfig, inputs: &mut Vec<InputFingerprint>) -> Result<Vec<ProbeClass>> {
    if cfg.embeddings.is_empty() {
        return Err(AppError::Config("no embeddings given".into()));
    }
    if cfg.models.is_empty() && !cfg.fit_inline {
        return Err(AppError::Usage("no model file given; pass --model or --fit-inline".into()));
    }
    if !cfg.models.is_empty() && cfg.models.len() != cfg.embeddings.len() {
        return Err(AppError::Config("pass one model file per embeddings file".into()));
    }
    let mut raw = Vec::new();
    let mut out = Vec::new();
    for (i, path) in cfg.embeddings.iter().enumerate() {
        require_file("embeddings", path)?;
        let fp = InputFingerprint::of("embeddings", path)?;
        let cloud = load_cloud(path, cfg.format)?;
        let (label, space, model, rows) = match cfg.models.get(i) {
            Some(mpath) => {
                require_file("model", mpath)?;
                let mf = ModelFile::load(mpath)?;
                if mf.cloud_fingerprint != fp.fingerprint {
                    return Err(AppError::Config(format!(
                        "model {} was fitted on a different cloud than {}",
                        mpath.display(),
                        path.display()
                    )));
                }
                if let Some(&bad) = mf.train_rows.iter().find(|&&r| r >= cloud.len()) {
                    return Err(AppError::format(mpath, format!("train row {bad} out of range")));
                }
                inputs.push(InputFingerprint::of("model", mpath)?);
                let rows = mf.train_rows.clone();
                (mf.label.clone(), mf.space()?, mf.model()?, rows)
            }
            None => {
                let space = ReducedSpace::fit(cloud.points(), cfg.variance_threshold)?;
                let z = space.project(cloud.points())?;
                let (model, _) = fit_implicit(&z, cfg.degree, FitOptions { epsilon: cfg.validity.epsilon, ..FitOptions::default() })?;
                (stem(path), space, model, (0..cloud.len()).collect())
            }
        };
        inputs.push(fp);
        let z = space.project(&cloud.points().select_rows(rows.iter()))?;
        raw.push(label);
        out.push(ProbeClass { label: String::new(), space, model, z });
    }
    for (c, l) in out.iter_mut().zip(unique_labels(raw)) {
        c.label = l;
    }
    Ok(out)
}

fn generate(cfg: &ProbeConfig, class: &ProbeClass, method: GenerationMethod, n: usize, seed: u64) -> Result<SyntheticBatch> {
    Ok(match method {
        GenerationMethod::LinearInterpolation => generate_linear_interpolation(&class.z, n, seed, None)?,
        GenerationMethod::LocalPerturbation => generate_local_perturbation(&class.z, n, cfg.sigma_scale, seed)?,
        GenerationMethod::SurfaceBased => generate_surface_based(&class.z, &class.model, n, &cfg.surface, seed)?,
    })
}

pub fn run_probe(cfg: &ProbeConfig, out: &Path) -> Result<Vec<String>> {
    if cfg.methods.is_empty() || cfg.n_synth.is_empty() || cfg.n_synth.contains(&0) {
        return Err(AppError::Config("methods and n_synth must be non-empty and positive".into()));
    }
    let mut inputs = Vec::new();
    let classes = load_probe_inputs(cfg, &mut inputs)?;
    let mut units = Vec::new();
    for ci in 0..classes.len() {
        for &method in &cfg.methods {
            for &n in &cfg.n_synth {
                units.push((ci, method, n));
            }
        }
    }
    let done: Vec<(ProbeRow, SyntheticBatch)> = units
        .par_iter()
        .map(|&(ci, method, n)| -> Result<(ProbeRow, SyntheticBatch)> {
            let class = &classes[ci];
            let seed = derive_seed(cfg.seed, &[ci as u64, method as u64, n as u64]);
            let batch = generate(cfg, class, method, n, seed)?;
            if batch.is_empty() {
                return Err(AppError::Config(format!(
                    "{}: every {} point failed to converge; consider keep_nonconverged",
                    class.label,
                    method.name()
                )));
            }
            let validity = evaluate_batch(&class.z, &class.model, &batch.points, &cfg.validity)?;
            let row = ProbeRow {
                class: class.label.clone(),
                method,
                n_synth: n,
                generated: batch.len(),
                convergence_fraction: batch.convergence_fraction(),
                mean_normalized_residual: batch.mean_normalized_residual(),
                validity,
            };
            Ok((row, batch))
        })
        .collect::<Result<_>>()?;

    let mut o = Outputs::new(out);
    if cfg.save_batches {
        for ((row, batch), &(ci, _, _)) in done.iter().zip(&units) {
            let base = format!("batches/{}/{}_{}", row.class, row.method.name(), row.n_synth);
            let reduced = EmbeddingCloud::new(
                batch.points.clone(),
                (0..batch.len()).map(|j| format!("synth-{j}")).collect(),
                "reduced",
            )?;
            let path = o.path(&format!("{base}.cpge"));
            io::save_embeddings(&reduced, &path, EmbeddingFormat::Binary)?;
            if cfg.ambient_batches {
                let ambient = reconstruct_batch(&classes[ci].space, batch)?;
                let path = o.path(&format!("{base}.ambient.cpge"));
                io::save_embeddings(&ambient, &path, EmbeddingFormat::Binary)?;
            }
            let sidecar = BatchSidecar {
                class: &row.class,
                method: batch.method,
                seed: batch.seed,
                requested: batch.requested,
                generated: batch.len(),
                diagnostics: &batch.diagnostics,
            };
            o.json(&format!("{base}.diagnostics.json"), &sidecar)?;
        }
    }
    let rows: Vec<ProbeRow> = done.into_iter().map(|(r, _)| r).collect();
    let pooled = if classes.len() > 1 { pool(&rows, cfg) } else { Vec::new() };
    let mut csv_rows: Vec<ProbeCsvRow> = rows.iter().map(flat).collect();
    csv_rows.extend(pooled.iter().cloned());
    o.csv("probe_report.csv", &csv_rows)?;
    let mut recorded = cfg.clone();
    recorded.models = cfg.models.iter().map(|m| within(m, out)).collect();
    o.json("probe_report.json", &report("probe", inputs, out, &recorded, &ProbeResults { rows, pooled }))?;
    Ok(o.finish())
}

fn flat(r: &ProbeRow) -> ProbeCsvRow {
    let v = &r.validity;
    ProbeCsvRow {
        class: r.class.clone(),
        method: r.method,
        n_synth: r.n_synth,
        surface: v.surface,
        neighborhood: v.neighborhood,
        neigh_dev: v.neigh_dev,
        distr_dev: v.distr_dev,
        hess_shape: v.hess_shape,
        coeff_cons: v.coeff_cons,
        generated: r.generated,
        convergence_fraction: r.convergence_fraction,
    }
}

fn pool(rows: &[ProbeRow], cfg: &ProbeConfig) -> Vec<ProbeCsvRow> {
    let mut out = Vec::new();
    for &method in &cfg.methods {
        for &n in &cfg.n_synth {
            let cell: Vec<ProbeCsvRow> = rows.iter().filter(|r| r.method == method && r.n_synth == n).map(flat).collect();
            let k = cell.len() as f64;
            let avg = |f: fn(&ProbeCsvRow) -> f64| cell.iter().map(f).sum::<f64>() / k;
            out.push(ProbeCsvRow {
                class: "pooled".into(),
                method,
                n_synth: n,
                surface: avg(|r| r.surface),
                neighborhood: avg(|r| r.neighborhood),
                neigh_dev: avg(|r| r.neigh_dev),
                distr_dev: avg(|r| r.distr_dev),
                hess_shape: avg(|r| r.hess_shape),
                coeff_cons: avg(|r| r.coeff_cons),
                generated: cell.iter().map(|r| r.generated).sum(),
                convergence_fraction: avg(|r| r.convergence_fraction),
            });
        }
    }
    out
}

// ------------------------------------------------------------ downstream

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub k_shot: usize,
    pub rows: Vec<AblationRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamResults {
    pub summary: Vec<SummaryRow>,
    pub ablation: Option<AblationTable>,
    pub runs: Vec<RunResult>,
}

#[derive(Serialize)]
struct RunCsvRow {
    k_shot: usize,
    run: usize,
    method: &'static str,
    accuracy: f64,
    macro_f1: f64,
    train_real: usize,
    train_synthetic: usize,
    test_size: usize,
    fallbacks: usize,
}

pub fn run_downstream(cfg: &DownstreamConfig, out: &Path) -> Result<Vec<String>> {
    let exp = &cfg.experiment;
    exp.validate().map_err(|e| AppError::Config(e.to_string()))?;
    let ablate_k = match cfg.ablate_k {
        Some(k) if !exp.k_shots.contains(&k) => {
            return Err(AppError::Config(format!("ablate_k {k} is not among the requested k values")));
        }
        Some(k) => k,
        None => *exp.k_shots.iter().max().expect("validated non-empty"),
    };
    require_file("corpus", &cfg.corpus)?;
    require_file("embeddings", &cfg.embeddings)?;
    let inputs = vec![
        InputFingerprint::of("corpus", &cfg.corpus)?,
        InputFingerprint::of("embeddings", &cfg.embeddings)?,
    ];
    let records = io::read_corpus_jsonl(&cfg.corpus)?;
    let cloud = load_cloud(&cfg.embeddings, cfg.format)?;
    let labeled = join_corpus_embeddings(&records, &cloud)?;

    let cells: Vec<(usize, usize)> =
        exp.k_shots.iter().flat_map(|&k| (0..exp.n_runs).map(move |run| (k, run))).collect();
    let per_cell: Vec<Vec<RunResult>> =
        cells.par_iter().map(|&(k, run)| run_one(&labeled, k, run, exp)).collect::<carrier_core::Result<_>>()?;
    let runs: Vec<RunResult> = per_cell.into_iter().flatten().collect();
    let summary = summarize(&runs);
    let ablation_table = if cfg.ablate {
        Some(AblationTable { k_shot: ablate_k, rows: ablation(&runs, ablate_k)? })
    } else {
        None
    };

    let mut o = Outputs::new(out);
    o.csv("downstream_summary.csv", &summary)?;
    let run_rows: Vec<RunCsvRow> = runs
        .iter()
        .map(|r| RunCsvRow {
            k_shot: r.k_shot,
            run: r.run,
            method: r.method.name(),
            accuracy: r.accuracy,
            macro_f1: r.macro_f1,
            train_real: r.train_real,
            train_synthetic: r.train_synthetic,
            test_size: r.test_size,
            fallbacks: r.fallbacks.len(),
        })
        .collect();
    o.csv("downstream_runs.csv", &run_rows)?;
    if let Some(t) = &ablation_table {
        o.csv("downstream_ablation.csv", &t.rows)?;
    }
    let results = DownstreamResults { summary, ablation: ablation_table, runs };
    o.json("downstream_report.json", &report("downstream", inputs, out, cfg, &results))?;
    Ok(o.finish())
}

// ---------------------------------------------------------------- report

pub fn run_report(cfg: &ReportConfig, out: &Path) -> Result<Vec<String>> {
    let dir = cfg.input.clone().unwrap_or_else(|| out.to_path_buf());
    let mut md = String::from("# Carrier report\n");
    let mut found = 0;
    let fit = dir.join("fit_report.json");
    if fit.is_file() {
        let r: Report<serde_json::Value, Vec<FitRow>> = io::read_json(&fit)?;
        md.push_str(&render_fit(&r.results));
        found += 1;
    }
    let probe = dir.join("probe_report.json");
    if probe.is_file() {
        let r: Report<serde_json::Value, ProbeResults> = io::read_json(&probe)?;
        md.push_str(&render_probe(&r.results));
        found += 1;
    }
    let down = dir.join("downstream_report.json");
    if down.is_file() {
        let r: Report<serde_json::Value, DownstreamResults> = io::read_json(&down)?;
        md.push_str(&render_downstream(&r.results));
        found += 1;
    }
    if found == 0 {
        return Err(AppError::Config(format!("no reports found in {}", dir.display())));
    }
    let mut o = Outputs::new(out);
    o.text("report.md", &md)?;
    Ok(o.finish())
}

fn render_fit(rows: &[FitRow]) -> String {
    let mut models: Vec<(u32, String)> = rows.iter().map(|r| (r.degree, r.model.clone())).collect();
    models.sort();
    models.dedup();
    let mut classes: Vec<&str> = Vec::new();
    for r in rows {
        if !classes.contains(&r.class.as_str()) {
            classes.push(&r.class);
        }
    }
    let mut s = String::from("\n## Local approximation quality\n\n| Class | r |");
    for (_, m) in &models {
        s.push_str(&format!(" {m} RMSE | {m} MAE |"));
    }
    s.push_str("\n|---|---|");
    s.push_str(&"---|---|".repeat(models.len()));
    s.push('\n');
    let holdout = rows.iter().any(|r| r.holdout_rmse.is_some());
    let mut hs = String::new();
    for c in &classes {
        let cell = |d: u32| rows.iter().find(|r| r.class == *c && r.degree == d);
        let r = cell(models[0].0).expect("present");
        s.push_str(&format!("| {c} | {} |", r.reduced_dim));
        hs.push_str(&format!("| {c} | {} |", r.n_holdout));
        for (d, _) in &models {
            match cell(*d) {
                Some(r) => {
                    s.push_str(&format!(" {:.6} | {:.6} |", r.rmse, r.mae));
                    hs.push_str(&format!(" {} |", r.holdout_rmse.map_or("-".into(), |v| format!("{v:.6}"))));
                }
                None => {
                    s.push_str(" - | - |");
                    hs.push_str(" - |");
                }
            }
        }
        s.push('\n');
        hs.push('\n');
    }
    if holdout {
        s.push_str("\n### Validation RMSE\n\n| Class | held out |");
        for (_, m) in &models {
            s.push_str(&format!(" {m} |"));
        }
        s.push_str("\n|---|---|");
        s.push_str(&"---|".repeat(models.len()));
        s.push('\n');
        s.push_str(&hs);
    }
    s
}

fn render_probe(results: &ProbeResults) -> String {
    let mut s = String::from(
        "\n## Geometric validity\n\n| Class | Method | n_synth | Surface | Neighborhood | Neigh. dev. | Distr. dev. | Hess. shape | Coeff. cons. |\n|---|---|---|---|---|---|---|---|---|\n",
    );
    let flat_rows: Vec<ProbeCsvRow> = results.rows.iter().map(flat).chain(results.pooled.iter().cloned()).collect();
    for r in flat_rows {
        s.push_str(&format!(
            "| {} | {} | {} | {:.6} | {:.6} | {:.6} | {:.6} | {:.6} | {:.6} |\n",
            r.class,
            r.method.name(),
            r.n_synth,
            r.surface,
            r.neighborhood,
            r.neigh_dev,
            r.distr_dev,
            r.hess_shape,
            r.coeff_cons
        ));
    }
    s
}

fn render_downstream(results: &DownstreamResults) -> String {
    let mut s = String::from("\n## Downstream few-shot classification\n\n| Train size | Method | Accuracy | Macro-F1 |\n|---|---|---|---|\n");
    for r in &results.summary {
        s.push_str(&format!(
            "| {} | {} | {:.3} ± {:.3} | {:.3} ± {:.3} |\n",
            r.train_size,
            r.method.name(),
            r.accuracy_mean,
            r.accuracy_std,
            r.f1_mean,
            r.f1_std
        ));
    }
    if let Some(t) = &results.ablation {
        s.push_str(&format!(
            "\n### Ablation at k = {}\n\n| Method | ΔAccuracy | ΔMacro-F1 | Best acc. | Best F1 |\n|---|---|---|---|---|\n",
            t.k_shot
        ));
        for r in &t.rows {
            s.push_str(&format!(
                "| {} | {:+.4} | {:+.4} | {}/{} | {}/{} |\n",
                r.method.name(),
                r.delta_accuracy,
                r.delta_macro_f1,
                r.best_accuracy_count,
                r.runs,
                r.best_f1_count,
                r.runs
            ));
        }
    }
    s
}

// -------------------------------------------------------------- manifest

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub files: Vec<ManifestEntry>,
}

fn walk(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| AppError::io(dir, e))? {
        let path = entry.map_err(|e| AppError::io(dir, e))?.path();
        if path.is_dir() {
            walk(&path, root, out)?;
        } else if path != root.join(MANIFEST) {
            out.push(path);
        }
    }
    Ok(())
}

/// Indexes every file under `out` except the manifest itself.
pub fn write_manifest(out: &Path) -> Result<Manifest> {
    let mut paths = Vec::new();
    walk(out, out, &mut paths)?;
    let mut files = paths
        .iter()
        .map(|p| {
            let rel = p.strip_prefix(out).expect("walked under root");
            let rel: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
            let bytes = std::fs::metadata(p).map_err(|e| AppError::io(p, e))?.len();
            let digest = io::fingerprint_file(p)?;
            Ok(ManifestEntry {
                path: rel.join("/"),
                bytes,
                sha256: digest.trim_start_matches("sha256:").to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    files.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = Manifest { schema_version: REPORT_SCHEMA_VERSION, files };
    io::write_json(&out.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use carrier_core::corpus::{Family, Regime};

    #[test]
    fn holdout_split_is_seeded_and_disjoint() {
        let (tr, ho) = holdout_split(50, 0.2, 7).unwrap();
        assert_eq!((tr.len(), ho.len()), (40, 10));
        assert!(ho.iter().all(|h| !tr.contains(h)));
        assert_eq!(holdout_split(50, 0.2, 7).unwrap(), (tr.clone(), ho.clone()));
        assert_ne!(holdout_split(50, 0.2, 8).unwrap().1, ho);
        assert_eq!(holdout_split(5, 0.0, 1).unwrap().1, Vec::<usize>::new());
        assert!(holdout_split(3, 0.9, 1).is_err());
        assert!(holdout_split(3, 1.0, 1).is_err());
    }

    #[test]
    fn labels_are_made_unique() {
        let l = unique_labels(vec!["a".into(), "b".into(), "a".into()]);
        assert_eq!(l, vec!["a", "b", "a-2"]);
    }

    #[test]
    fn corpus_pipeline_writes_files_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig { families: vec![Family::A, Family::B], regimes: vec![Regime::C1, Regime::C3] };
        let written = run_corpus(&cfg, dir.path()).unwrap();
        assert_eq!(written.len(), 5);
        let text = std::fs::read_to_string(dir.path().join("corpus_B_C3.jsonl")).unwrap();
        assert_eq!(text.lines().count(), 324);
        let m = write_manifest(dir.path()).unwrap();
        assert_eq!(m.files.len(), 5);
        assert!(m.files.windows(2).all(|w| w[0].path < w[1].path));
        let again = write_manifest(dir.path()).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn probe_without_model_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        std::fs::write(&path, "0,1\n1,0\n2,2\n").unwrap();
        let cfg = ProbeConfig { embeddings: vec![path], ..ProbeConfig::default() };
        assert!(matches!(run_probe(&cfg, dir.path()), Err(AppError::Usage(_))));
    }

    #[test]
    fn fit_refuses_an_oversized_basis() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wide.csv");
        // 300 pseudo-random columns keep r near 300 at threshold 1
        let mut text = String::new();
        for i in 0..302 {
            let row: Vec<String> = (0..300)
                .map(|j| format!("{}", ((i as f64 * 12.9898 + j as f64 * 78.233).sin() * 43758.5453).fract()))
                .collect();
            text.push_str(&row.join(","));
            text.push('\n');
        }
        std::fs::write(&path, text).unwrap();
        let cfg = FitConfig { embeddings: vec![path], degrees: vec![3], model_degree: 3, variance_threshold: 1.0, ..FitConfig::default() };
        let err = run_fit(&cfg, dir.path()).unwrap_err();
        assert!(matches!(err, AppError::Core(carrier_core::Error::BasisTooLarge { .. })), "{err}");
    }
}
