//! Synthetic latent points: Dirichlet barycentric starts, stabilized Newton
//! projection onto a fitted carrier, and the two baseline generators.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cloud::EmbeddingCloud;
use crate::error::{invalid, Error, Result};
use crate::knn::mean_nearest_neighbor_distance;
use crate::math::{check_finite, rms_radius, sqrt};
use crate::reduce::ReducedSpace;
use crate::rng::{substream, StreamRng};
use crate::surface::ImplicitPolyModel;

/// Cap on query rows used for the nearest-neighbor length scale.
pub const SCALE_QUERY_CAP: usize = 5000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSettings {
    pub f_tol: f64,
    pub grad_tol: f64,
    pub max_iter: u32,
    pub epsilon: f64,
    /// Per-iteration step cap; `None` leaves steps uncapped in
    /// [`project_to_surface`] and means "half the cloud RMS radius" in
    /// [`generate_surface_based`].
    pub max_step: Option<f64>,
}

impl Default for ProjectionSettings {
    fn default() -> Self {
        ProjectionSettings {
            f_tol: 1e-6,
            grad_tol: 1e-8,
            max_iter: 50,
            epsilon: 1e-12,
            max_step: None,
        }
    }
}

impl ProjectionSettings {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("f_tol", self.f_tol), ("grad_tol", self.grad_tol), ("epsilon", self.epsilon)] {
            if !(v > 0.0) {
                return Err(invalid(name, "must be positive"));
            }
        }
        if self.max_iter < 1 {
            return Err(invalid("max_iter", "must be at least 1"));
        }
        if let Some(s) = self.max_step {
            if !(s > 0.0) {
                return Err(invalid("max_step", "must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Residual,
    VanishingGradient,
    MaxIterations,
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionDiagnostics {
    pub iterations: u32,
    pub stop: StopReason,
    /// True iff the residual criterion fired.
    pub converged: bool,
    pub abs_value: f64,
    pub normalized_residual: f64,
    /// Longest step taken, after capping.
    pub longest_step: f64,
}

/// Iterates `z <- z - f(z) grad f(z) / (||grad f(z)||^2 + eps)` with the step
/// length capped at `settings.max_step`, until `|f| < f_tol`,
/// `||grad f|| < grad_tol`, or `max_iter` steps.
pub fn project_to_surface(
    model: &ImplicitPolyModel,
    z0: &[f64],
    settings: &ProjectionSettings,
) -> Result<(DVector<f64>, ProjectionDiagnostics)> {
    settings.validate()?;
    if z0.len() != model.vars() {
        return Err(Error::DimensionMismatch {
            expected: model.vars(),
            found: z0.len(),
        });
    }
    if let Some(col) = z0.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { row: 0, col });
    }
    let cap = settings.max_step.unwrap_or(f64::INFINITY);
    let mut z = DVector::from_column_slice(z0);
    let mut longest_step: f64 = 0.0;
    let mut k = 0u32;
    loop {
        let f = model.evaluate(z.as_slice())?;
        let g = model.gradient(z.as_slice())?;
        let gn2 = g.norm_squared();
        let gnorm = sqrt(gn2);
        let finish = |stop: StopReason| ProjectionDiagnostics {
            iterations: k,
            stop,
            converged: stop == StopReason::Residual,
            abs_value: f.abs(),
            normalized_residual: f.abs() / (gnorm + settings.epsilon),
            longest_step,
        };
        if !f.is_finite() || !gn2.is_finite() {
            return Ok((z, finish(StopReason::NonFinite)));
        }
        if f.abs() < settings.f_tol {
            return Ok((z, finish(StopReason::Residual)));
        }
        if gnorm < settings.grad_tol {
            return Ok((z, finish(StopReason::VanishingGradient)));
        }
        if k >= settings.max_iter {
            return Ok((z, finish(StopReason::MaxIterations)));
        }
        let mut step = g * (-f / (gn2 + settings.epsilon));
        let len = sqrt(step.norm_squared());
        if len > cap {
            step *= cap / len;
        }
        let next = &z + &step;
        if next.iter().any(|v| !v.is_finite()) {
            return Ok((z, finish(StopReason::NonFinite)));
        }
        longest_step = longest_step.max(len.min(cap));
        z = next;
        k += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationMethod {
    LinearInterpolation,
    LocalPerturbation,
    SurfaceBased,
}

impl GenerationMethod {
    pub const ALL: [GenerationMethod; 3] = [
        GenerationMethod::LinearInterpolation,
        GenerationMethod::LocalPerturbation,
        GenerationMethod::SurfaceBased,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GenerationMethod::LinearInterpolation => "linear_interpolation",
            GenerationMethod::LocalPerturbation => "local_perturbation",
            GenerationMethod::SurfaceBased => "surface_based",
        }
    }
}

impl core::str::FromStr for GenerationMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear_interpolation" | "linear" | "interpolation" => Ok(GenerationMethod::LinearInterpolation),
            "local_perturbation" | "perturbation" => Ok(GenerationMethod::LocalPerturbation),
            "surface_based" | "surface" => Ok(GenerationMethod::SurfaceBased),
            _ => Err(invalid("method", format!("unknown generation method `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointDiagnostics {
    /// Final normalized residual; surface-based points only.
    pub normalized_residual: Option<f64>,
    pub iterations: u32,
    pub converged: bool,
    /// Set when the point was kept despite failing every attempt.
    pub fallback: bool,
    pub attempts: u32,
}

impl PointDiagnostics {
    fn direct() -> Self {
        PointDiagnostics {
            normalized_residual: None,
            iterations: 0,
            converged: true,
            fallback: false,
            attempts: 1,
        }
    }
}

/// Generated points in reduced coordinates with per-point diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBatch {
    pub points: DMatrix<f64>,
    pub method: GenerationMethod,
    pub diagnostics: Vec<PointDiagnostics>,
    pub seed: u64,
    /// Points requested; may exceed `len()` when failures were dropped.
    pub requested: usize,
}

impl SyntheticBatch {
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn convergence_fraction(&self) -> f64 {
        if self.diagnostics.is_empty() {
            return 0.0;
        }
        self.diagnostics.iter().filter(|d| d.converged).count() as f64 / self.diagnostics.len() as f64
    }

    pub fn mean_normalized_residual(&self) -> Option<f64> {
        let vals: Vec<f64> = self.diagnostics.iter().filter_map(|d| d.normalized_residual).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

fn require_count(count: usize) -> Result<()> {
    if count == 0 {
        return Err(invalid("count", "must be at least 1"));
    }
    Ok(())
}

fn dirichlet_weights(n: usize, gamma: &Gamma<f64>, rng: &mut StreamRng, out: &mut [f64]) {
    let mut total = 0.0;
    for w in out.iter_mut().take(n) {
        *w = gamma.sample(rng);
        total += *w;
    }
    if total > 0.0 && total.is_finite() {
        for w in out.iter_mut().take(n) {
            *w /= total;
        }
    } else {
        // All draws underflowed (tiny alpha): fall back to the simplex vertex limit.
        out.iter_mut().for_each(|w| *w = 0.0);
        out[rng.random_range(0..n)] = 1.0;
    }
}

fn combine(points: &DMatrix<f64>, members: Option<&[usize]>, weights: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let mut add = |row: usize, w: f64| {
        for (j, o) in out.iter_mut().enumerate() {
            *o += w * points[(row, j)];
        }
    };
    match members {
        Some(rows) => rows.iter().zip(weights).for_each(|(&r, &w)| add(r, w)),
        None => weights.iter().enumerate().for_each(|(r, &w)| add(r, w)),
    }
}

fn check_alpha(alpha: f64) -> Result<Gamma<f64>> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(invalid("alpha", "must be positive"));
    }
    Gamma::new(alpha, 1.0).map_err(|_| invalid("alpha", "must be positive"))
}

/// Convex combinations `sum_i lambda_i z_i` with `lambda ~ Dir(alpha, .., alpha)`.
pub fn sample_barycentric(points: &DMatrix<f64>, alpha: f64, count: usize, seed: u64) -> Result<DMatrix<f64>> {
    let gamma = check_alpha(alpha)?;
    require_count(count)?;
    let (n, r) = points.shape();
    if n == 0 {
        return Err(Error::TooFewPoints { needed: 1, found: 0 });
    }
    check_finite(points)?;
    let mut out = DMatrix::zeros(count, r);
    let mut w = vec![0.0; n];
    let mut z = vec![0.0; r];
    for j in 0..count {
        let mut rng = substream(seed, j as u64);
        dirichlet_weights(n, &gamma, &mut rng, &mut w);
        combine(points, None, &w, &mut z);
        for (c, v) in z.iter().enumerate() {
            out[(j, c)] = *v;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceGenerationConfig {
    pub alpha: f64,
    pub settings: ProjectionSettings,
    pub max_attempts: u32,
    /// Keep points that failed every attempt (flagged) instead of dropping them.
    pub keep_nonconverged: bool,
    /// Restrict each barycentric combination to one k-means cluster.
    pub subclusters: Option<usize>,
}

impl Default for SurfaceGenerationConfig {
    fn default() -> Self {
        SurfaceGenerationConfig {
            alpha: 1.0,
            settings: ProjectionSettings::default(),
            max_attempts: 10,
            keep_nonconverged: false,
            subclusters: None,
        }
    }
}

/// Barycentric start followed by Newton projection, for each of `count`
/// points. A projection is accepted when the residual criterion fired and
/// the normalized residual is at most `10 * f_tol`; otherwise the point is
/// redrawn up to `max_attempts` times.
pub fn generate_surface_based(
    points: &DMatrix<f64>,
    model: &ImplicitPolyModel,
    count: usize,
    config: &SurfaceGenerationConfig,
    seed: u64,
) -> Result<SyntheticBatch> {
    let gamma = check_alpha(config.alpha)?;
    require_count(count)?;
    let (n, r) = points.shape();
    if n == 0 {
        return Err(Error::TooFewPoints { needed: 1, found: 0 });
    }
    if r != model.vars() {
        return Err(Error::DimensionMismatch { expected: model.vars(), found: r });
    }
    check_finite(points)?;
    if config.max_attempts < 1 {
        return Err(invalid("max_attempts", "must be at least 1"));
    }
    let mut settings = config.settings;
    if settings.max_step.is_none() {
        let radius = rms_radius(points);
        settings.max_step = Some(if radius > 0.0 { 0.5 * radius } else { 1.0 });
    }
    settings.validate()?;

    let clusters = match config.subclusters {
        Some(k) if k > 1 => Some(kmeans_groups(points, k, seed)?),
        _ => None,
    };
    let accept_bound = 10.0 * settings.f_tol;
    let mut kept: Vec<(Vec<f64>, PointDiagnostics)> = Vec::with_capacity(count);
    let mut w = vec![0.0; n];
    let mut z = vec![0.0; r];
    for j in 0..count {
        let mut rng = substream(seed, j as u64);
        let mut last = None;
        for attempt in 1..=config.max_attempts {
            match &clusters {
                Some((labels, groups)) => {
                    let members = &groups[labels[rng.random_range(0..n)]];
                    dirichlet_weights(members.len(), &gamma, &mut rng, &mut w);
                    combine(points, Some(members), &w[..members.len()], &mut z);
                }
                None => {
                    dirichlet_weights(n, &gamma, &mut rng, &mut w);
                    combine(points, None, &w, &mut z);
                }
            }
            let (zstar, diag) = project_to_surface(model, &z, &settings)?;
            let ok = diag.converged && diag.normalized_residual <= accept_bound;
            let pd = PointDiagnostics {
                normalized_residual: Some(diag.normalized_residual),
                iterations: diag.iterations,
                converged: ok,
                fallback: !ok,
                attempts: attempt,
            };
            last = Some((zstar.as_slice().to_vec(), pd));
            if ok {
                break;
            }
        }
        let (p, pd) = last.expect("at least one attempt");
        if pd.converged || config.keep_nonconverged {
            kept.push((p, pd));
        }
    }
    if kept.is_empty() {
        return Err(invalid("model", "no projection converged"));
    }
    let mut out = DMatrix::zeros(kept.len(), r);
    for (i, (p, _)) in kept.iter().enumerate() {
        for (c, v) in p.iter().enumerate() {
            out[(i, c)] = *v;
        }
    }
    Ok(SyntheticBatch {
        points: out,
        method: GenerationMethod::SurfaceBased,
        diagnostics: kept.into_iter().map(|(_, d)| d).collect(),
        seed,
        requested: count,
    })
}

/// `(1 - t) z_a + t z_b` for uniformly drawn distinct `a != b` and
/// `t ~ U(0, 1)`, or the fixed `t` when given.
pub fn generate_linear_interpolation(
    points: &DMatrix<f64>,
    count: usize,
    seed: u64,
    fixed_t: Option<f64>,
) -> Result<SyntheticBatch> {
    require_count(count)?;
    let (n, r) = points.shape();
    if n < 2 {
        return Err(Error::TooFewPoints { needed: 2, found: n });
    }
    check_finite(points)?;
    let mut out = DMatrix::zeros(count, r);
    for j in 0..count {
        let mut rng = substream(seed, j as u64);
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        let t = match fixed_t {
            Some(t) => t,
            None => rng.random::<f64>(),
        };
        for c in 0..r {
            out[(j, c)] = (1.0 - t) * points[(a, c)] + t * points[(b, c)];
        }
    }
    Ok(SyntheticBatch {
        points: out,
        method: GenerationMethod::LinearInterpolation,
        diagnostics: vec![PointDiagnostics::direct(); count],
        seed,
        requested: count,
    })
}

/// `z_i + eta` with a uniformly drawn base point and isotropic Gaussian
/// `eta` of standard deviation `sigma_scale` times the mean nearest-neighbor
/// distance of the cloud.
pub fn generate_local_perturbation(
    points: &DMatrix<f64>,
    count: usize,
    sigma_scale: f64,
    seed: u64,
) -> Result<SyntheticBatch> {
    require_count(count)?;
    if !(sigma_scale >= 0.0) || !sigma_scale.is_finite() {
        return Err(invalid("sigma_scale", "must be non-negative"));
    }
    let (n, r) = points.shape();
    if n < 2 {
        return Err(Error::TooFewPoints { needed: 2, found: n });
    }
    check_finite(points)?;
    let scale = mean_nearest_neighbor_distance(points, SCALE_QUERY_CAP);
    if !(scale > 0.0) {
        return Err(invalid("points", "nearest-neighbor scale is zero"));
    }
    let sigma = sigma_scale * scale;
    let mut out = DMatrix::zeros(count, r);
    for j in 0..count {
        let mut rng = substream(seed, j as u64);
        let base = rng.random_range(0..n);
        for c in 0..r {
            let eta: f64 = StandardNormal.sample(&mut rng);
            out[(j, c)] = points[(base, c)] + sigma * eta;
        }
    }
    Ok(SyntheticBatch {
        points: out,
        method: GenerationMethod::LocalPerturbation,
        diagnostics: vec![PointDiagnostics::direct(); count],
        seed,
        requested: count,
    })
}

/// Maps a batch back to ambient space; ids are `synth-{j}`.
pub fn reconstruct_batch(space: &ReducedSpace, batch: &SyntheticBatch) -> Result<EmbeddingCloud> {
    let ambient = space.reconstruct(&batch.points)?;
    let ids = (0..batch.len()).map(|j| format!("synth-{j}")).collect();
    let source: String = format!("synthetic:{}:seed={}", batch.method.name(), batch.seed);
    EmbeddingCloud::new(ambient, ids, source)
}

/// Lloyd's k-means with k-means++ seeding. Returns per-row labels and the
/// member lists of each non-empty cluster (relabelled densely).
pub fn kmeans_groups(points: &DMatrix<f64>, k: usize, seed: u64) -> Result<(Vec<usize>, Vec<Vec<usize>>)> {
    let (n, r) = points.shape();
    if k == 0 {
        return Err(invalid("clusters", "must be at least 1"));
    }
    let k = k.min(n);
    let row = |i: usize| crate::math::row(points, i);
    let mut rng = substream(seed, u64::MAX);
    let mut centers: Vec<Vec<f64>> = vec![row(rng.random_range(0..n))];
    let mut d2 = vec![0.0; n];
    while centers.len() < k {
        let mut total = 0.0;
        for (i, d) in d2.iter_mut().enumerate() {
            let ri = row(i);
            *d = centers.iter().map(|c| crate::math::dist2(c, &ri)).fold(f64::INFINITY, f64::min);
            total += *d;
        }
        if !(total > 0.0) {
            break;
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, d) in d2.iter().enumerate() {
            target -= d;
            if target <= 0.0 {
                pick = i;
                break;
            }
        }
        centers.push(row(pick));
    }
    let mut labels = vec![0usize; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, label) in labels.iter_mut().enumerate() {
            let ri = row(i);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = crate::math::dist2(center, &ri);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if *label != best {
                *label = best;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; r]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for c in 0..r {
                sums[l][c] += points[(i, c)];
            }
        }
        for (c, center) in centers.iter_mut().enumerate() {
            if counts[c] > 0 {
                for (v, s) in center.iter_mut().zip(&sums[c]) {
                    *v = s / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut remap = vec![usize::MAX; centers.len()];
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, l) in labels.iter_mut().enumerate() {
        if remap[*l] == usize::MAX {
            remap[*l] = groups.len();
            groups.push(Vec::new());
        }
        *l = remap[*l];
        groups[*l].push(i);
    }
    Ok((labels, groups))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surface::{fit_implicit, FitOptions, MonomialBasis};
    use core::f64::consts::PI;

    fn circle(n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, 2, |i, j| {
            let a = 2.0 * PI * i as f64 / n as f64;
            if j == 0 {
                libm::cos(a)
            } else {
                libm::sin(a)
            }
        })
    }

    fn unit_circle_model() -> ImplicitPolyModel {
        let b = MonomialBasis::new(2, 2).unwrap();
        ImplicitPolyModel::new(b, DVector::from_vec(vec![-1.0, 0.0, 0.0, 1.0, 0.0, 1.0])).unwrap()
    }

    #[test]
    fn single_point_simplex() {
        let p = DMatrix::from_row_slice(1, 3, &[1.0, -2.0, 0.5]);
        let s = sample_barycentric(&p, 1.0, 20, 3).unwrap();
        for i in 0..20 {
            assert_eq!(s.row(i), p.row(0));
        }
    }

    #[test]
    fn two_point_dirichlet_mean_is_midpoint() {
        let p = DMatrix::from_row_slice(2, 1, &[0.0, 4.0]);
        let s = sample_barycentric(&p, 1.0, 100_000, 17).unwrap();
        let mean = s.column(0).sum() / 100_000.0;
        assert!((mean - 2.0).abs() < 0.01 * 4.0, "mean {mean}");
    }

    #[test]
    fn samples_stay_in_triangle() {
        let tri = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 2.0, 0.0, 0.0, 1.0]);
        let s = sample_barycentric(&tri, 0.7, 2000, 5).unwrap();
        for i in 0..s.nrows() {
            let (x, y) = (s[(i, 0)], s[(i, 1)]);
            // barycentric coordinates of (x, y)
            let l1 = x / 2.0;
            let l2 = y;
            let l0 = 1.0 - l1 - l2;
            assert!(l0 >= -1e-12 && l1 >= -1e-12 && l2 >= -1e-12);
        }
    }

    #[test]
    fn barycentric_errors_and_determinism() {
        let p = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        assert!(sample_barycentric(&p, 0.0, 1, 0).is_err());
        assert!(sample_barycentric(&p, 1.0, 0, 0).is_err());
        assert_eq!(sample_barycentric(&p, 1.0, 9, 4).unwrap(), sample_barycentric(&p, 1.0, 9, 4).unwrap());
    }

    #[test]
    fn projection_from_outside_lands_on_circle() {
        let model = unit_circle_model();
        let (z, d) = project_to_surface(&model, &[2.0, 0.0], &ProjectionSettings::default()).unwrap();
        assert!(d.converged);
        assert_eq!(d.stop, StopReason::Residual);
        assert!((z[0] - 1.0).abs() < 1e-6 && z[1].abs() < 1e-12);
    }

    #[test]
    fn projection_edge_cases() {
        let model = unit_circle_model();
        let (z, d) = project_to_surface(&model, &[0.0, 1.0], &ProjectionSettings::default()).unwrap();
        assert_eq!(d.iterations, 0);
        assert!(d.converged);
        assert_eq!(z.as_slice(), &[0.0, 1.0]);
        let (_, d) = project_to_surface(&model, &[0.0, 0.0], &ProjectionSettings::default()).unwrap();
        assert_eq!(d.stop, StopReason::VanishingGradient);
        assert!(!d.converged);
        assert!(project_to_surface(&model, &[f64::NAN, 0.0], &ProjectionSettings::default()).is_err());
        assert!(project_to_surface(&model, &[1.0], &ProjectionSettings::default()).is_err());
    }

    #[test]
    fn step_cap_is_respected() {
        let model = unit_circle_model();
        let settings = ProjectionSettings { max_step: Some(0.05), ..Default::default() };
        let (z, d) = project_to_surface(&model, &[3.0, 0.5], &settings).unwrap();
        assert!(d.longest_step <= 0.05 + 1e-15);
        assert!(d.converged, "{d:?}");
        assert!((z.norm() - 1.0).abs() < 1e-6);
        let few = ProjectionSettings { max_step: Some(0.01), max_iter: 3, ..Default::default() };
        let (_, d) = project_to_surface(&model, &[3.0, 0.0], &few).unwrap();
        assert_eq!(d.stop, StopReason::MaxIterations);
        assert_eq!(d.iterations, 3);
    }

    #[test]
    fn surface_batch_on_circle() {
        let pts = circle(100);
        let (model, _) = fit_implicit(&pts, 2, FitOptions::default()).unwrap();
        let cfg = SurfaceGenerationConfig::default();
        let batch = generate_surface_based(&pts, &model, 500, &cfg, 42).unwrap();
        assert_eq!(batch.len(), 500);
        assert_eq!(batch.convergence_fraction(), 1.0);
        assert!(batch.mean_normalized_residual().unwrap() < 1e-7);
        for d in &batch.diagnostics {
            assert!(d.normalized_residual.unwrap() <= 10.0 * cfg.settings.f_tol);
        }
        let again = generate_surface_based(&pts, &model, 500, &cfg, 42).unwrap();
        assert_eq!(batch, again);
        assert!(generate_surface_based(&pts, &model, 0, &cfg, 42).is_err());
    }

    #[test]
    fn subcluster_variant_converges() {
        let pts = circle(120);
        let (model, _) = fit_implicit(&pts, 2, FitOptions::default()).unwrap();
        let cfg = SurfaceGenerationConfig { subclusters: Some(6), ..Default::default() };
        let batch = generate_surface_based(&pts, &model, 200, &cfg, 1).unwrap();
        assert_eq!(batch.convergence_fraction(), 1.0);
        let (labels, groups) = kmeans_groups(&pts, 6, 1).unwrap();
        assert_eq!(labels.len(), 120);
        assert_eq!(groups.iter().map(|g| g.len()).sum::<usize>(), 120);
    }

    #[test]
    fn linear_interpolation_on_segments() {
        let pts = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 2.0, 4.0]);
        let mid = generate_linear_interpolation(&pts, 5, 0, Some(0.5)).unwrap();
        for i in 0..5 {
            assert_eq!(mid.points.row(i).iter().copied().collect::<Vec<_>>(), vec![1.0, 2.0]);
        }
        let tri = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let b = generate_linear_interpolation(&tri, 300, 9, None).unwrap();
        for i in 0..300 {
            let (x, y) = (b.points[(i, 0)], b.points[(i, 1)]);
            let on_edge = y.abs() < 1e-15 || x.abs() < 1e-15 || (x + y - 1.0).abs() < 1e-12;
            assert!(on_edge);
        }
        assert_eq!(b, generate_linear_interpolation(&tri, 300, 9, None).unwrap());
        assert!(generate_linear_interpolation(&tri.rows(0, 1).into_owned(), 3, 0, None).is_err());
    }

    #[test]
    fn perturbation_zero_sigma_resamples() {
        let tri = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let b = generate_local_perturbation(&tri, 50, 0.0, 3).unwrap();
        for i in 0..50 {
            assert!((0..3).any(|k| b.points.row(i) == tri.row(k)));
        }
        let same = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(generate_local_perturbation(&same, 5, 0.5, 0).is_err());
        assert_eq!(b, generate_local_perturbation(&tri, 50, 0.0, 3).unwrap());
    }

    #[test]
    fn perturbation_displacement_matches_chi_mean() {
        // Two points at distance 1 in r = 3: the NN scale is 1, sigma = 0.1.
        let pts = DMatrix::from_row_slice(2, 3, &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let m = 100_000;
        let b = generate_local_perturbation(&pts, m, 0.1, 11).unwrap();
        let mut total = 0.0;
        for i in 0..m {
            let row: Vec<f64> = b.points.row(i).iter().copied().collect();
            let d0 = crate::math::norm(&row);
            let d1 = sqrt(crate::math::dist2(&row, &[1.0, 0.0, 0.0]));
            total += d0.min(d1);
        }
        let observed = total / m as f64;
        let r = 3.0;
        let chi_mean = sqrt(2.0) * libm::exp(libm::lgamma((r + 1.0) / 2.0) - libm::lgamma(r / 2.0));
        // the nearer base point is almost always the true one at this sigma
        assert!((observed - 0.1 * chi_mean).abs() < 0.001 * chi_mean, "{observed}");
    }

    #[test]
    fn reconstruct_batch_maps_to_ambient() {
        let pts = DMatrix::from_fn(30, 4, |i, j| libm::sin((i * 4 + j) as f64));
        let space = ReducedSpace::fit(&pts, 0.9).unwrap();
        let r = space.reduced_dim();
        let batch = SyntheticBatch {
            points: DMatrix::zeros(3, r),
            method: GenerationMethod::SurfaceBased,
            diagnostics: vec![PointDiagnostics::direct(); 3],
            seed: 0,
            requested: 3,
        };
        let cloud = reconstruct_batch(&space, &batch).unwrap();
        assert_eq!(cloud.len(), 3);
        assert_eq!(cloud.dim(), 4);
        for i in 0..3 {
            assert!((cloud.points().row(i).transpose() - &space.mean).amax() < 1e-15);
        }
        let back = space.project(cloud.points()).unwrap();
        assert!(back.amax() < 1e-12);
    }
}
