//! Context-held-out slot classification with optional synthetic
//! augmentation of the training set.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cloud::LabeledCloud;
use crate::corpus::SLOT_COUNT;
use crate::error::{invalid, Error, Result};
use crate::math::{check_finite, exp, ln, mean, sqrt, std_dev};
use crate::probe::{
    generate_linear_interpolation, generate_local_perturbation, generate_surface_based, ProjectionSettings,
    SurfaceGenerationConfig,
};
use crate::reduce::{ReducedSpace, DEFAULT_VARIANCE_THRESHOLD};
use crate::rng::{derive_seed, substream};
use crate::surface::{fit_implicit, FitOptions};

pub type Context = [usize; SLOT_COUNT - 1];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub target_slot: usize,
    pub train_contexts: Vec<Context>,
    pub test_contexts: Vec<Context>,
    pub k_shot: usize,
    pub n_test_contexts: usize,
    pub seed: u64,
    /// Class labels (slot variant indices), ascending.
    pub classes: Vec<usize>,
    /// Row indices into the labeled cloud, context-major then by label.
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
}

fn context_of(slots: &[usize; SLOT_COUNT], target: usize) -> Context {
    let mut ctx = [0; SLOT_COUNT - 1];
    let mut k = 0;
    for (s, v) in slots.iter().enumerate() {
        if s != target {
            ctx[k] = *v;
            k += 1;
        }
    }
    ctx
}

/// Splits a full-factorial labeled cloud by context: after a seeded shuffle
/// of the distinct contexts, the first `k_shot` are train and the next
/// `n_test_contexts` are test.
pub fn make_split(
    cloud: &LabeledCloud,
    target_slot: usize,
    k_shot: usize,
    n_test_contexts: usize,
    seed: u64,
) -> Result<SplitPlan> {
    if target_slot >= SLOT_COUNT {
        return Err(invalid("target_slot", "must be 0..4"));
    }
    if k_shot == 0 || n_test_contexts == 0 {
        return Err(invalid("k_shot", "k_shot and n_test_contexts must be positive"));
    }
    if cloud.slots.len() != cloud.len() {
        return Err(Error::DimensionMismatch { expected: cloud.len(), found: cloud.slots.len() });
    }
    let mut cells: BTreeMap<Context, BTreeMap<usize, usize>> = BTreeMap::new();
    let mut classes = BTreeSet::new();
    for (row, slots) in cloud.slots.iter().enumerate() {
        let label = slots[target_slot];
        classes.insert(label);
        if cells.entry(context_of(slots, target_slot)).or_default().insert(label, row).is_some() {
            return Err(invalid("cloud", format!("duplicate (label, context) cell at row {row}")));
        }
    }
    let classes: Vec<usize> = classes.into_iter().collect();
    for (ctx, labels) in &cells {
        if let Some(&missing) = classes.iter().find(|c| !labels.contains_key(c)) {
            return Err(Error::MissingCell { label: missing, context: *ctx });
        }
    }
    let needed = k_shot + n_test_contexts;
    if needed > cells.len() {
        return Err(Error::InsufficientContexts { needed, available: cells.len() });
    }
    let mut contexts: Vec<Context> = cells.keys().copied().collect();
    contexts.shuffle(&mut substream(seed, 0));
    let train_contexts = contexts[..k_shot].to_vec();
    let test_contexts = contexts[k_shot..needed].to_vec();
    let rows = |ctxs: &[Context]| -> Vec<usize> { ctxs.iter().flat_map(|c| cells[c].values().copied()).collect() };
    Ok(SplitPlan {
        target_slot,
        train_rows: rows(&train_contexts),
        test_rows: rows(&test_contexts),
        train_contexts,
        test_contexts,
        k_shot,
        n_test_contexts,
        seed,
        classes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRegConfig {
    /// L2 strength on the weights; `None` means `1 / N`.
    pub l2: Option<f64>,
    pub max_iter: u32,
    pub tolerance: f64,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        LogRegConfig { l2: None, max_iter: 500, tolerance: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    /// classes × features
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub classes: Vec<usize>,
    pub l2: f64,
    pub config: LogRegConfig,
    pub iterations: u32,
    pub gradient_norm: f64,
}

fn log_softmax_row(scores: &mut [f64]) {
    let top = scores.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
    let total: f64 = scores.iter().map(|s| exp(s - top)).sum();
    let lse = top + ln(total);
    scores.iter_mut().for_each(|s| *s -= lse);
}

/// Mean cross-entropy plus `l2 / 2 * ||W||_F^2` (bias unpenalized), with
/// its gradient with respect to `W` and `b`. `targets` are class positions.
pub fn loss_and_gradient(
    weights: &DMatrix<f64>,
    bias: &DVector<f64>,
    features: &DMatrix<f64>,
    targets: &[usize],
    l2: f64,
) -> (f64, DMatrix<f64>, DVector<f64>) {
    let n = features.nrows();
    let c = weights.nrows();
    let mut scores = features * weights.transpose();
    let mut loss = 0.0;
    let mut row = vec![0.0; c];
    for i in 0..n {
        for (k, v) in row.iter_mut().enumerate() {
            *v = scores[(i, k)] + bias[k];
        }
        log_softmax_row(&mut row);
        loss -= row[targets[i]];
        for (k, v) in row.iter().enumerate() {
            scores[(i, k)] = exp(*v);
        }
        scores[(i, targets[i])] -= 1.0;
    }
    let inv = 1.0 / n as f64;
    // scores now holds p - onehot
    let grad_w = scores.tr_mul(features) * inv + weights * l2;
    let grad_b = DVector::from_iterator(c, scores.column_iter().map(|col| col.sum() * inv));
    let loss = loss * inv + 0.5 * l2 * weights.norm_squared();
    (loss, grad_w, grad_b)
}

/// Multinomial logistic regression by full-batch gradient descent with
/// Armijo backtracking, from zero initialization.
pub fn train_logreg(features: &DMatrix<f64>, labels: &[usize], config: &LogRegConfig) -> Result<ClassifierModel> {
    let (n, d) = features.shape();
    if labels.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: labels.len() });
    }
    if n == 0 {
        return Err(Error::Empty("training set"));
    }
    check_finite(features)?;
    let classes: Vec<usize> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if classes.len() < 2 {
        return Err(Error::SingleClass);
    }
    if n < classes.len() {
        return Err(Error::TooFewPoints { needed: classes.len(), found: n });
    }
    if config.max_iter < 1 || !(config.tolerance > 0.0) {
        return Err(invalid("logreg", "max_iter must be ≥ 1 and tolerance positive"));
    }
    let l2 = match config.l2 {
        Some(v) if v >= 0.0 && v.is_finite() => v,
        Some(_) => return Err(invalid("l2", "must be non-negative")),
        None => 1.0 / n as f64,
    };
    let targets: Vec<usize> = labels.iter().map(|l| classes.binary_search(l).expect("present")).collect();
    let c = classes.len();
    let mut w = DMatrix::zeros(c, d);
    let mut b = DVector::zeros(c);
    let (mut loss, mut gw, mut gb) = loss_and_gradient(&w, &b, features, &targets, l2);
    let mut step = 1.0;
    let mut iterations = 0;
    let mut gnorm2 = gw.norm_squared() + gb.norm_squared();
    while iterations < config.max_iter && sqrt(gnorm2) >= config.tolerance {
        let mut accepted = false;
        while step > 1e-20 {
            let w_new = &w - &gw * step;
            let b_new = &b - &gb * step;
            let (l_new, gw_new, gb_new) = loss_and_gradient(&w_new, &b_new, features, &targets, l2);
            if l_new <= loss - 1e-4 * step * gnorm2 {
                w = w_new;
                b = b_new;
                loss = l_new;
                gw = gw_new;
                gb = gb_new;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        iterations += 1;
        step *= 2.0;
        gnorm2 = gw.norm_squared() + gb.norm_squared();
    }
    Ok(ClassifierModel {
        weights: w,
        bias: b,
        classes,
        l2,
        config: *config,
        iterations,
        gradient_norm: sqrt(gnorm2),
    })
}

impl ClassifierModel {
    /// Predicted labels; score ties go to the lower class.
    pub fn predict(&self, features: &DMatrix<f64>) -> Result<Vec<usize>> {
        if features.ncols() != self.weights.ncols() {
            return Err(Error::DimensionMismatch { expected: self.weights.ncols(), found: features.ncols() });
        }
        let scores = features * self.weights.transpose();
        Ok((0..features.nrows())
            .map(|i| {
                let mut best = 0;
                for k in 1..self.classes.len() {
                    if scores[(i, k)] + self.bias[k] > scores[(i, best)] + self.bias[best] {
                        best = k;
                    }
                }
                self.classes[best]
            })
            .collect())
    }
}

/// Accuracy and macro-F1 over the model's classes. A class with no true
/// and no predicted members scores F1 = 0.
pub fn evaluate(model: &ClassifierModel, features: &DMatrix<f64>, labels: &[usize]) -> Result<(f64, f64)> {
    if labels.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if labels.len() != features.nrows() {
        return Err(Error::DimensionMismatch { expected: features.nrows(), found: labels.len() });
    }
    if let Some(l) = labels.iter().find(|l| model.classes.binary_search(l).is_err()) {
        return Err(invalid("labels", format!("label {l} was not seen in training")));
    }
    let pred = model.predict(features)?;
    Ok(scores(&model.classes, &pred, labels))
}

/// `(accuracy, macro_f1)` for predictions against truth over `classes`.
pub fn scores(classes: &[usize], predicted: &[usize], truth: &[usize]) -> (f64, f64) {
    let correct = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    let mut f1_total = 0.0;
    for c in classes {
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for (p, t) in predicted.iter().zip(truth) {
            match (p == c, t == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        let denom = 2 * tp + fp + fneg;
        if denom > 0 {
            f1_total += 2.0 * tp as f64 / denom as f64;
        }
    }
    (correct as f64 / truth.len() as f64, f1_total / classes.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMethod {
    None,
    LinearInterpolation,
    LocalPerturbation,
    SurfaceBased,
}

impl AugmentMethod {
    pub const ALL: [AugmentMethod; 4] = [
        AugmentMethod::None,
        AugmentMethod::LinearInterpolation,
        AugmentMethod::LocalPerturbation,
        AugmentMethod::SurfaceBased,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugmentMethod::None => "none",
            AugmentMethod::LinearInterpolation => "linear_interpolation",
            AugmentMethod::LocalPerturbation => "local_perturbation",
            AugmentMethod::SurfaceBased => "surface_based",
        }
    }
}

impl core::str::FromStr for AugmentMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AugmentMethod::None),
            "linear_interpolation" | "linear" | "interpolation" => Ok(AugmentMethod::LinearInterpolation),
            "local_perturbation" | "perturbation" => Ok(AugmentMethod::LocalPerturbation),
            "surface_based" | "surface" => Ok(AugmentMethod::SurfaceBased),
            _ => Err(invalid("method", format!("unknown method `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub k_shots: Vec<usize>,
    pub methods: Vec<AugmentMethod>,
    pub n_runs: usize,
    pub seed: u64,
    pub n_test_contexts: usize,
    pub target_slot: usize,
    pub variance_threshold: f64,
    pub degree: u32,
    /// Synthetic points per real training point.
    pub synthetic_ratio: usize,
    pub sigma_scale: f64,
    pub surface: SurfaceGenerationConfig,
    pub logreg: LogRegConfig,
    /// Test hook: slip the first test row into the training side.
    #[serde(default, skip_serializing_if = "core::ops::Not::not")]
    pub inject_canary: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            k_shots: vec![1, 2, 3, 5, 10],
            methods: AugmentMethod::ALL.to_vec(),
            n_runs: 10,
            seed: 0,
            n_test_contexts: 300,
            target_slot: SLOT_COUNT - 1,
            variance_threshold: DEFAULT_VARIANCE_THRESHOLD,
            degree: 2,
            synthetic_ratio: 1,
            sigma_scale: 0.5,
            surface: SurfaceGenerationConfig {
                alpha: 1.0,
                settings: ProjectionSettings::default(),
                max_attempts: 10,
                keep_nonconverged: true,
                subclusters: None,
            },
            logreg: LogRegConfig::default(),
            inject_canary: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_shots.is_empty() || self.k_shots.contains(&0) {
            return Err(invalid("k_shots", "must be a non-empty list of positive values"));
        }
        if self.methods.is_empty() {
            return Err(invalid("methods", "must not be empty"));
        }
        if self.n_runs == 0 {
            return Err(invalid("n_runs", "must be at least 1"));
        }
        if self.synthetic_ratio == 0 {
            return Err(invalid("synthetic_ratio", "must be at least 1"));
        }
        Ok(())
    }
}

/// Rejects any training-side id that belongs to the test split.
#[derive(Debug, Clone)]
pub struct LeakageGuard {
    test_ids: BTreeSet<String>,
}

impl LeakageGuard {
    pub fn new<'a>(test_ids: impl IntoIterator<Item = &'a str>) -> Self {
        LeakageGuard { test_ids: test_ids.into_iter().map(String::from).collect() }
    }

    pub fn check<'a>(&self, stage: &str, ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for id in ids {
            if self.test_ids.contains(id) {
                return Err(Error::Leakage(format!("test id `{id}` reached {stage}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackReason {
    /// A single training point: every generator returns copies of it.
    SinglePoint,
    /// Fewer than `r + 2` points for a surface fit.
    TooFewForSurface,
    /// The surface fit or projection failed.
    SurfaceFailed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassFallback {
    pub class: usize,
    pub reason: FallbackReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub k_shot: usize,
    pub run: usize,
    pub method: AugmentMethod,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub train_real: usize,
    pub train_synthetic: usize,
    pub test_size: usize,
    pub fallbacks: Vec<ClassFallback>,
}

/// Synthetic ambient points for one class from its training rows only.
fn generate_class(
    rows: &DMatrix<f64>,
    method: AugmentMethod,
    count: usize,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<(DMatrix<f64>, Option<FallbackReason>)> {
    let n = rows.nrows();
    if n == 1 {
        let copies = DMatrix::from_fn(count, rows.ncols(), |_, j| rows[(0, j)]);
        return Ok((copies, Some(FallbackReason::SinglePoint)));
    }
    let space = ReducedSpace::fit(rows, config.variance_threshold)?;
    let reduced = space.project(rows)?;
    let r = space.reduced_dim();
    let interpolate = || generate_linear_interpolation(&reduced, count, seed, None);
    let (batch, reason) = match method {
        AugmentMethod::None => return Ok((DMatrix::zeros(0, rows.ncols()), None)),
        AugmentMethod::LinearInterpolation => (interpolate()?, None),
        AugmentMethod::LocalPerturbation => (generate_local_perturbation(&reduced, count, config.sigma_scale, seed)?, None),
        AugmentMethod::SurfaceBased if n < r + 2 => (interpolate()?, Some(FallbackReason::TooFewForSurface)),
        AugmentMethod::SurfaceBased => {
            let attempt = fit_implicit(&reduced, config.degree, FitOptions::default())
                .and_then(|(model, _)| generate_surface_based(&reduced, &model, count, &config.surface, seed));
            match attempt {
                Ok(b) if b.len() == count => (b, None),
                _ => (interpolate()?, Some(FallbackReason::SurfaceFailed)),
            }
        }
    };
    Ok((space.reconstruct(&batch.points)?, reason))
}

fn stack(blocks: &[&DMatrix<f64>], cols: usize) -> DMatrix<f64> {
    let total = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(total, cols);
    let mut at = 0;
    for b in blocks {
        out.rows_mut(at, b.nrows()).copy_from(b);
        at += b.nrows();
    }
    out
}

/// Seed of the split for one `(k, run)` cell.
pub fn split_seed(master: u64, k_shot: usize, run: usize) -> u64 {
    derive_seed(master, &[k_shot as u64, run as u64])
}

/// All configured methods on one shared split. Per-class generation seeds
/// depend on the run and class only, so a surface fallback reproduces the
/// interpolation baseline exactly.
pub fn run_one(cloud: &LabeledCloud, k_shot: usize, run: usize, config: &ExperimentConfig) -> Result<Vec<RunResult>> {
    config.validate()?;
    let seed = split_seed(config.seed, k_shot, run);
    let plan = make_split(cloud, config.target_slot, k_shot, config.n_test_contexts, seed)?;
    let mut train_rows = plan.train_rows.clone();
    if config.inject_canary {
        train_rows.push(plan.test_rows[0]);
    }
    let guard = LeakageGuard::new(plan.test_rows.iter().map(|&i| cloud.ids[i].as_str()));
    guard.check("training set", train_rows.iter().map(|&i| cloud.ids[i].as_str()))?;

    let d = cloud.points.ncols();
    let label = |i: usize| cloud.slots[i][plan.target_slot];
    let real_x = cloud.points.select_rows(train_rows.iter());
    let real_y: Vec<usize> = train_rows.iter().map(|&i| label(i)).collect();
    let test_x = cloud.points.select_rows(plan.test_rows.iter());
    let test_y: Vec<usize> = plan.test_rows.iter().map(|&i| label(i)).collect();

    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in &train_rows {
        by_class.entry(label(i)).or_default().push(i);
    }

    let mut results = Vec::with_capacity(config.methods.len());
    for &method in &config.methods {
        let mut synth_blocks: Vec<DMatrix<f64>> = Vec::new();
        let mut synth_y: Vec<usize> = Vec::new();
        let mut fallbacks = Vec::new();
        if method != AugmentMethod::None {
            for (&class, rows) in &by_class {
                guard.check("class generation", rows.iter().map(|&i| cloud.ids[i].as_str()))?;
                let class_x = cloud.points.select_rows(rows.iter());
                let count = rows.len() * config.synthetic_ratio;
                let class_seed = derive_seed(seed, &[class as u64]);
                let (points, reason) = generate_class(&class_x, method, count, config, class_seed)?;
                if let Some(reason) = reason {
                    fallbacks.push(ClassFallback { class, reason });
                }
                synth_y.extend(core::iter::repeat_n(class, points.nrows()));
                synth_blocks.push(points);
            }
        }
        let mut blocks: Vec<&DMatrix<f64>> = vec![&real_x];
        blocks.extend(synth_blocks.iter());
        let train_x = stack(&blocks, d);
        let mut train_y = real_y.clone();
        train_y.extend_from_slice(&synth_y);
        let model = train_logreg(&train_x, &train_y, &config.logreg)?;
        let (accuracy, macro_f1) = evaluate(&model, &test_x, &test_y)?;
        results.push(RunResult {
            k_shot,
            run,
            method,
            accuracy,
            macro_f1,
            train_real: real_y.len(),
            train_synthetic: synth_y.len(),
            test_size: test_y.len(),
            fallbacks,
        });
    }
    Ok(results)
}

/// Every `(k, run)` cell in order: k-shots as listed, runs ascending.
pub fn run_experiment(cloud: &LabeledCloud, config: &ExperimentConfig) -> Result<Vec<RunResult>> {
    config.validate()?;
    let mut out = Vec::new();
    for &k in &config.k_shots {
        for run in 0..config.n_runs {
            out.extend(run_one(cloud, k, run, config)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub train_size: usize,
    pub k_shot: usize,
    pub method: AugmentMethod,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub runs: usize,
}

/// Mean and population standard deviation per `(k, method)`, in the order
/// the cells first appear.
pub fn summarize(results: &[RunResult]) -> Vec<SummaryRow> {
    let mut keys: Vec<(usize, AugmentMethod)> = Vec::new();
    for r in results {
        if !keys.contains(&(r.k_shot, r.method)) {
            keys.push((r.k_shot, r.method));
        }
    }
    keys.into_iter()
        .map(|(k, method)| {
            let cell: Vec<&RunResult> = results.iter().filter(|r| r.k_shot == k && r.method == method).collect();
            let acc: Vec<f64> = cell.iter().map(|r| r.accuracy).collect();
            let f1: Vec<f64> = cell.iter().map(|r| r.macro_f1).collect();
            SummaryRow {
                train_size: cell[0].train_real,
                k_shot: k,
                method,
                accuracy_mean: mean(&acc),
                accuracy_std: std_dev(&acc),
                f1_mean: mean(&f1),
                f1_std: std_dev(&f1),
                runs: cell.len(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: AugmentMethod,
    pub delta_accuracy: f64,
    pub delta_macro_f1: f64,
    pub best_accuracy_count: usize,
    pub best_f1_count: usize,
    pub runs: usize,
}

/// Differences against the no-synthetic baseline at one k, plus how often
/// each method was best in a run (ties go to the earlier method).
pub fn ablation(results: &[RunResult], k_shot: usize) -> Result<Vec<AblationRow>> {
    let cell: Vec<&RunResult> = results.iter().filter(|r| r.k_shot == k_shot).collect();
    let mut methods: Vec<AugmentMethod> = cell.iter().map(|r| r.method).collect::<BTreeSet<_>>().into_iter().collect();
    methods.sort();
    if !methods.contains(&AugmentMethod::None) {
        return Err(invalid("methods", "ablation needs the `none` baseline"));
    }
    let runs: Vec<usize> = cell.iter().map(|r| r.run).collect::<BTreeSet<_>>().into_iter().collect();
    let get = |m: AugmentMethod, run: usize| cell.iter().find(|r| r.method == m && r.run == run).copied();
    let mut best_acc: BTreeMap<AugmentMethod, usize> = BTreeMap::new();
    let mut best_f1: BTreeMap<AugmentMethod, usize> = BTreeMap::new();
    for &run in &runs {
        let (mut ba, mut bf): (Option<&RunResult>, Option<&RunResult>) = (None, None);
        for &m in &methods {
            let r = get(m, run).ok_or_else(|| invalid("results", format!("missing {} for run {run}", m.name())))?;
            if ba.is_none_or(|b| r.accuracy > b.accuracy) {
                ba = Some(r);
            }
            if bf.is_none_or(|b| r.macro_f1 > b.macro_f1) {
                bf = Some(r);
            }
        }
        *best_acc.entry(ba.expect("methods nonempty").method).or_default() += 1;
        *best_f1.entry(bf.expect("methods nonempty").method).or_default() += 1;
    }
    Ok(methods
        .iter()
        .map(|&m| {
            let diffs = |f: fn(&RunResult) -> f64| -> f64 {
                let d: Vec<f64> = runs
                    .iter()
                    .map(|&run| f(get(m, run).expect("checked")) - f(get(AugmentMethod::None, run).expect("checked")))
                    .collect();
                mean(&d)
            };
            AblationRow {
                method: m,
                delta_accuracy: diffs(|r| r.accuracy),
                delta_macro_f1: diffs(|r| r.macro_f1),
                best_accuracy_count: best_acc.get(&m).copied().unwrap_or(0),
                best_f1_count: best_f1.get(&m).copied().unwrap_or(0),
                runs: runs.len(),
            }
        })
        .collect())
}

/// A small full-factorial labeled cloud: `classes` labels on the last slot,
/// `contexts` contexts on the first slot, class means on a curved arc plus
/// context offsets and noise. Used by tests and demos.
pub fn synthetic_factorial(classes: usize, contexts: usize, dim: usize, noise: f64, seed: u64) -> LabeledCloud {
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = substream(seed, 0);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            let t = c as f64 / classes as f64 * core::f64::consts::TAU;
            (0..dim)
                .map(|j| match j {
                    0 => 2.0 * libm::cos(t),
                    1 => 2.0 * libm::sin(t),
                    _ => rng.random_range(-0.5..0.5),
                })
                .collect()
        })
        .collect();
    let offsets: Vec<Vec<f64>> = (0..contexts)
        .map(|_| (0..dim).map(|_| 0.3 * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect::<Vec<f64>>())
        .collect();
    let n = classes * contexts;
    let mut points = DMatrix::zeros(n, dim);
    let mut ids = Vec::with_capacity(n);
    let mut slots = Vec::with_capacity(n);
    let mut row = 0;
    for ctx in 0..contexts {
        for class in 0..classes {
            for j in 0..dim {
                let e: f64 = StandardNormal.sample(&mut rng);
                points[(row, j)] = centers[class][j] + offsets[ctx][j] + noise * e;
            }
            ids.push(format!("X-C5-{ctx}-0-0-{class}"));
            slots.push([ctx, 0, 0, class]);
            row += 1;
        }
    }
    LabeledCloud { points, ids, slots }
}
