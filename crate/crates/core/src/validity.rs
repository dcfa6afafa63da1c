//! Geometric validity metrics for a synthetic batch against the original
//! reduced cloud, and the angular-stability checker for barycentric starts.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::knn::{mean_nearest_neighbor_distance, KdTree};
use crate::math::{angle, asin, check_finite, column_means, dist2, norm, row, sqrt};
use crate::probe::SCALE_QUERY_CAP;
use crate::rng::substream;
use crate::surface::{fit_implicit, FitOptions, ImplicitPolyModel};

/// Text stored in every report describing the neighborhood deviation.
pub const NEIGHBORHOOD_DEVIATION_DEFINITION: &str =
    "mean over synthetic points of |avg kNN distance(z*) - avg kNN distance(anchor)| / (avg kNN distance(anchor) + 1e-12), anchor excluded from both neighbor sets";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidityConfig {
    pub k: usize,
    pub epsilon: f64,
    pub shape_samples: usize,
    pub grad_floor: f64,
    pub reg_scale: f64,
    pub seed: u64,
}

impl Default for ValidityConfig {
    fn default() -> Self {
        ValidityConfig {
            k: 5,
            epsilon: 1e-12,
            shape_samples: 256,
            grad_floor: 1e-8,
            reg_scale: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeConsistency {
    pub d_f: f64,
    pub d_2: f64,
    pub shape_cons: f64,
    pub retained: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub surface: f64,
    pub neighborhood: f64,
    pub neigh_dev: f64,
    pub distr_dev: f64,
    pub hess_shape: f64,
    pub coeff_cons: f64,
    pub shape: ShapeConsistency,
    pub scale: f64,
    pub n_orig: usize,
    pub n_synth: usize,
    pub config: ValidityConfig,
    pub neigh_dev_definition: String,
}

fn require_rows(points: &DMatrix<f64>, what: &'static str) -> Result<()> {
    if points.nrows() == 0 {
        return Err(Error::Empty(what));
    }
    check_finite(points)
}

fn same_dim(expected: usize, points: &DMatrix<f64>) -> Result<()> {
    if points.ncols() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            found: points.ncols(),
        });
    }
    Ok(())
}

/// Mean normalized residual of the synthetic points divided by `scale`.
pub fn surface_consistency(model: &ImplicitPolyModel, synth: &DMatrix<f64>, scale: f64, epsilon: f64) -> Result<f64> {
    require_rows(synth, "synthetic batch")?;
    same_dim(model.vars(), synth)?;
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(invalid("scale", "must be positive"));
    }
    if !(epsilon > 0.0) {
        return Err(invalid("epsilon", "must be positive"));
    }
    let mut total = 0.0;
    for j in 0..synth.nrows() {
        total += model.normalized_residual(&row(synth, j), epsilon)?;
    }
    Ok(total / synth.nrows() as f64 / scale)
}

/// Mean shared-neighbor fraction between each synthetic point and its nearest
/// original anchor, plus the mean relative change in average k-NN distance.
/// The anchor is removed from both neighbor sets.
pub fn neighborhood_consistency(orig: &DMatrix<f64>, synth: &DMatrix<f64>, k: usize) -> Result<(f64, f64)> {
    require_rows(orig, "original cloud")?;
    require_rows(synth, "synthetic batch")?;
    same_dim(orig.ncols(), synth)?;
    if k == 0 {
        return Err(invalid("k", "must be at least 1"));
    }
    if k >= orig.nrows() {
        return Err(invalid("k", "must be smaller than the number of original points"));
    }
    let tree = KdTree::new(orig);
    let avg = |nb: &[crate::knn::Neighbor]| nb.iter().map(|n| n.distance()).sum::<f64>() / nb.len() as f64;
    let (mut overlap, mut deviation) = (0.0, 0.0);
    for j in 0..synth.nrows() {
        let z = row(synth, j);
        let anchor = tree.nearest(&z, 1, &[])[0].index;
        let around_synth = tree.nearest(&z, k, &[anchor]);
        let around_anchor = tree.nearest(tree.point(anchor), k, &[anchor]);
        let shared = around_synth
            .iter()
            .filter(|a| around_anchor.iter().any(|b| b.index == a.index))
            .count();
        overlap += shared as f64 / k as f64;
        let (ds, da) = (avg(&around_synth), avg(&around_anchor));
        deviation += (ds - da).abs() / (da + 1e-12);
    }
    let m = synth.nrows() as f64;
    Ok((overlap / m, deviation / m))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalDistribution {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub regularization: f64,
    factor: Option<DMatrix<f64>>,
}

impl LocalDistribution {
    /// Lower Cholesky factor of `covariance + regularization * I`.
    pub fn factor(&self) -> &DMatrix<f64> {
        self.factor.as_ref().expect("factor computed at construction")
    }

    pub fn mahalanobis(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mean.len(),
                found: z.len(),
            });
        }
        let diff = DVector::from_column_slice(z) - &self.mean;
        let l = self.factor();
        let y = l
            .solve_lower_triangular(&diff)
            .ok_or(Error::NotPositiveDefinite)?;
        Ok(sqrt(y.norm_squared()))
    }
}

/// Cholesky with pivots required to exceed `1e-14` of the largest diagonal entry.
fn strict_cholesky(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let top = m.diagonal().iter().fold(0.0f64, |a, b| a.max(*b));
    if !(top > 0.0) {
        return None;
    }
    let l = Cholesky::new(m.clone())?.unpack();
    let ok = l.diagonal().iter().all(|d| d * d > 1e-14 * top);
    ok.then_some(l)
}

/// Empirical mean and covariance (unbiased), with a ridge of
/// `reg_scale * trace / r` added when the covariance is not positive
/// definite, escalated tenfold until the factorization succeeds.
pub fn fit_local_distribution(orig: &DMatrix<f64>, reg_scale: f64) -> Result<LocalDistribution> {
    let (n, r) = orig.shape();
    if n < 2 {
        return Err(Error::TooFewPoints { needed: 2, found: n });
    }
    check_finite(orig)?;
    if !(reg_scale > 0.0) {
        return Err(invalid("reg_scale", "must be positive"));
    }
    let mean = column_means(orig);
    let mut centered = orig.clone();
    for (j, mut col) in centered.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    let mut covariance = centered.tr_mul(&centered) / (n - 1) as f64;
    covariance = (&covariance + covariance.transpose()) * 0.5;
    if let Some(l) = strict_cholesky(&covariance) {
        return Ok(LocalDistribution { mean, covariance, regularization: 0.0, factor: Some(l) });
    }
    let trace = covariance.trace();
    let base = if trace > 0.0 { trace / r as f64 } else { 1.0 };
    let mut reg = reg_scale * base;
    for _ in 0..40 {
        let shifted = &covariance + DMatrix::identity(r, r) * reg;
        if let Some(l) = strict_cholesky(&shifted) {
            return Ok(LocalDistribution { mean, covariance, regularization: reg, factor: Some(l) });
        }
        reg *= 10.0;
    }
    Err(Error::NotPositiveDefinite)
}

/// Mean Mahalanobis distance of the synthetic points.
pub fn distribution_consistency(dist: &LocalDistribution, synth: &DMatrix<f64>) -> Result<f64> {
    require_rows(synth, "synthetic batch")?;
    same_dim(dist.mean.len(), synth)?;
    let mut total = 0.0;
    for j in 0..synth.nrows() {
        total += dist.mahalanobis(&row(synth, j))?;
    }
    Ok(total / synth.nrows() as f64)
}

fn descriptors(model: &ImplicitPolyModel, p: &[f64], epsilon: f64) -> Result<(f64, f64, f64)> {
    let g = sqrt(model.gradient(p)?.norm_squared());
    let h = model.hessian(p)?;
    let frob = sqrt(h.norm_squared());
    let spectral = if h.nrows() == 1 {
        h[(0, 0)].abs()
    } else {
        SymmetricEigen::new(h).eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    };
    Ok((g, frob / (g + epsilon), spectral / (g + epsilon)))
}

/// Relative drift of the Frobenius and spectral Hessian descriptors between
/// two models at the given sample points. Points where either gradient
/// norm is below `grad_floor` are skipped.
pub fn shape_consistency(
    orig: &ImplicitPolyModel,
    ext: &ImplicitPolyModel,
    samples: &DMatrix<f64>,
    epsilon: f64,
    grad_floor: f64,
) -> Result<ShapeConsistency> {
    if orig.basis() != ext.basis() {
        return Err(Error::BasisMismatch);
    }
    require_rows(samples, "shape sample points")?;
    same_dim(orig.vars(), samples)?;
    let (mut df, mut d2, mut kept) = (0.0, 0.0, 0usize);
    for l in 0..samples.nrows() {
        let p = row(samples, l);
        let (go, fo, so) = descriptors(orig, &p, epsilon)?;
        let (ge, fe, se) = descriptors(ext, &p, epsilon)?;
        if go < grad_floor || ge < grad_floor {
            continue;
        }
        df += (fo - fe).abs() / (fo.abs() + epsilon);
        d2 += (so - se).abs() / (so.abs() + epsilon);
        kept += 1;
    }
    if kept == 0 {
        return Err(Error::AllExcluded);
    }
    let (df, d2) = (df / kept as f64, d2 / kept as f64);
    Ok(ShapeConsistency {
        d_f: df,
        d_2: d2,
        shape_cons: 0.5 * (df + d2),
        retained: kept,
    })
}

/// `min(||a - b||, ||a + b||)` on the unit-normalized coefficient vectors.
pub fn coefficient_consistency(theta_orig: &[f64], theta_ext: &[f64]) -> Result<f64> {
    if theta_orig.len() != theta_ext.len() {
        return Err(Error::BasisMismatch);
    }
    let (na, nb) = (norm(theta_orig), norm(theta_ext));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroCoefficients);
    }
    let (mut minus, mut plus) = (0.0, 0.0);
    for (a, b) in theta_orig.iter().zip(theta_ext) {
        let (x, y) = (a / na, b / nb);
        minus += (x - y) * (x - y);
        plus += (x + y) * (x + y);
    }
    Ok(sqrt(minus.min(plus)))
}

/// Row indices of `min(L, N)` shape sample points drawn without replacement.
pub fn shape_sample_indices(n: usize, l: usize, seed: u64) -> Vec<usize> {
    let mut rng = substream(seed, u64::MAX - 1);
    let mut idx = sample(&mut rng, n, l.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

/// All six metrics for one batch. The extended model is refitted on the
/// original rows followed by the synthetic rows.
pub fn evaluate_batch(
    orig: &DMatrix<f64>,
    model: &ImplicitPolyModel,
    synth: &DMatrix<f64>,
    config: &ValidityConfig,
) -> Result<ValidityReport> {
    require_rows(orig, "original cloud")?;
    require_rows(synth, "synthetic batch")?;
    same_dim(model.vars(), orig)?;
    same_dim(model.vars(), synth)?;
    let scale = mean_nearest_neighbor_distance(orig, SCALE_QUERY_CAP);
    let surface = surface_consistency(model, synth, scale, config.epsilon)?;
    let (neighborhood, neigh_dev) = neighborhood_consistency(orig, synth, config.k)?;
    let dist = fit_local_distribution(orig, config.reg_scale)?;
    let distr_dev = distribution_consistency(&dist, synth)?;

    let (n, m, r) = (orig.nrows(), synth.nrows(), orig.ncols());
    let mut extended = DMatrix::zeros(n + m, r);
    extended.rows_mut(0, n).copy_from(orig);
    extended.rows_mut(n, m).copy_from(synth);
    let options = FitOptions { epsilon: config.epsilon, ..FitOptions::default() };
    let (ext, _) = fit_implicit(&extended, model.degree(), options)?;
    let picks = shape_sample_indices(n, config.shape_samples, config.seed);
    let samples = orig.select_rows(picks.iter());
    let shape = shape_consistency(model, &ext, &samples, config.epsilon, config.grad_floor)?;
    let coeff_cons = coefficient_consistency(model.theta().as_slice(), ext.theta().as_slice())?;

    Ok(ValidityReport {
        surface,
        neighborhood,
        neigh_dev,
        distr_dev,
        hess_shape: shape.shape_cons,
        coeff_cons,
        shape,
        scale,
        n_orig: n,
        n_synth: m,
        config: *config,
        neigh_dev_definition: String::from(NEIGHBORHOOD_DEVIATION_DEFINITION),
    })
}

/// Euclidean distance from `a` to the convex hull of the rows of `cloud`,
/// by Wolfe's minimum-norm-point algorithm on the translated rows.
/// Returns the distance and the barycentric weights of the nearest point.
pub fn hull_distance(cloud: &DMatrix<f64>, a: &[f64]) -> Result<(f64, Vec<f64>)> {
    require_rows(cloud, "cloud")?;
    same_dim(a.len(), cloud)?;
    let n = cloud.nrows();
    let pts: Vec<Vec<f64>> = (0..n)
        .map(|i| row(cloud, i).iter().zip(a).map(|(z, c)| z - c).collect())
        .collect();
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).sum::<f64>();
    let scale2 = pts.iter().map(|p| dot(p, p)).fold(0.0f64, f64::max);
    if scale2 == 0.0 {
        return Ok((0.0, {
            let mut w = vec![0.0; n];
            w[0] = 1.0;
            w
        }));
    }
    let tol = 1e-12 * scale2;

    let start = (0..n)
        .min_by(|&i, &j| dot(&pts[i], &pts[i]).total_cmp(&dot(&pts[j], &pts[j])).then(i.cmp(&j)))
        .expect("nonempty");
    let mut active: Vec<usize> = vec![start];
    let mut lambda: Vec<f64> = vec![1.0];
    let combine = |active: &[usize], lambda: &[f64]| -> Vec<f64> {
        let mut x = vec![0.0; a.len()];
        for (&i, &l) in active.iter().zip(lambda) {
            for (xv, pv) in x.iter_mut().zip(&pts[i]) {
                *xv += l * pv;
            }
        }
        x
    };
    let mut x = pts[start].clone();
    for _ in 0..(10 * n + 100) {
        let xx = dot(&x, &x);
        let (j, xj) = (0..n)
            .map(|i| (i, dot(&x, &pts[i])))
            .min_by(|p, q| p.1.total_cmp(&q.1).then(p.0.cmp(&q.0)))
            .expect("nonempty");
        if xx - xj <= tol || active.contains(&j) {
            break;
        }
        active.push(j);
        lambda.push(0.0);
        loop {
            let alpha = match affine_min_norm(&pts, &active) {
                Some(al) => al,
                None => {
                    active.pop();
                    lambda.pop();
                    break;
                }
            };
            if alpha.iter().all(|&v| v > 1e-15) {
                lambda = alpha;
                break;
            }
            let mut theta = 1.0f64;
            for (l, al) in lambda.iter().zip(&alpha) {
                if *al <= 1e-15 && l - al > 0.0 {
                    theta = theta.min(l / (l - al));
                }
            }
            for (l, al) in lambda.iter_mut().zip(&alpha) {
                *l += theta * (al - *l);
            }
            let mut keep_active = Vec::with_capacity(active.len());
            let mut keep_lambda = Vec::with_capacity(active.len());
            for (&i, &l) in active.iter().zip(&lambda) {
                if l > 1e-15 {
                    keep_active.push(i);
                    keep_lambda.push(l);
                }
            }
            if keep_active.is_empty() {
                keep_active.push(active[0]);
                keep_lambda.push(1.0);
            }
            let total: f64 = keep_lambda.iter().sum();
            keep_lambda.iter_mut().for_each(|l| *l /= total);
            active = keep_active;
            lambda = keep_lambda;
        }
        x = combine(&active, &lambda);
    }
    let mut weights = vec![0.0; n];
    for (&i, &l) in active.iter().zip(&lambda) {
        weights[i] = l;
    }
    Ok((sqrt(dot(&x, &x)), weights))
}

/// Minimum-norm point of the affine hull of the selected rows, as affine weights.
fn affine_min_norm(pts: &[Vec<f64>], active: &[usize]) -> Option<Vec<f64>> {
    let s = active.len();
    let mut m = DMatrix::zeros(s + 1, s + 1);
    for (a, &i) in active.iter().enumerate() {
        for (b, &j) in active.iter().enumerate() {
            m[(a, b)] = pts[i].iter().zip(&pts[j]).map(|(x, y)| x * y).sum::<f64>();
        }
        m[(a, s)] = 1.0;
        m[(s, a)] = 1.0;
    }
    let mut rhs = DVector::zeros(s + 1);
    rhs[s] = 1.0;
    let sol = m.lu().solve(&rhs)?;
    let alpha: Vec<f64> = sol.iter().take(s).copied().collect();
    if alpha.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(alpha)
}

/// Largest pairwise distance between rows.
pub fn diameter(cloud: &DMatrix<f64>) -> f64 {
    let n = cloud.nrows();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| row(cloud, i)).collect();
    let mut best = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            best = best.max(dist2(&rows[i], &rows[j]));
        }
    }
    sqrt(best)
}

/// Tolerance added to the bound when checking it.
pub const ANGULAR_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngularStability {
    pub diameter: f64,
    pub hull_distance: f64,
    /// `2 asin(D / (2 d))`, present when the bound applies.
    pub bound: Option<f64>,
    pub max_angle: f64,
    pub applicable: bool,
    /// `None` when the bound does not apply.
    pub satisfied: Option<bool>,
}

/// Checks the angular bound for direction `v - a` against every `z_j - a`.
pub fn angular_stability_check(cloud: &DMatrix<f64>, a: &[f64], v: &[f64]) -> Result<AngularStability> {
    require_rows(cloud, "cloud")?;
    same_dim(a.len(), cloud)?;
    if v.len() != a.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), found: v.len() });
    }
    let dir: Vec<f64> = v.iter().zip(a).map(|(x, y)| x - y).collect();
    if norm(&dir) == 0.0 {
        return Err(invalid("v", "must differ from the reference point"));
    }
    let diam = diameter(cloud);
    let (d, _) = hull_distance(cloud, a)?;
    let mut max_angle = 0.0f64;
    for j in 0..cloud.nrows() {
        let w: Vec<f64> = row(cloud, j).iter().zip(a).map(|(x, y)| x - y).collect();
        if norm(&w) > 0.0 {
            max_angle = max_angle.max(angle(&dir, &w));
        }
    }
    let applicable = d > 0.0 && diam <= 2.0 * d;
    let bound = applicable.then(|| 2.0 * asin((diam / (2.0 * d)).min(1.0)));
    Ok(AngularStability {
        diameter: diam,
        hull_distance: d,
        bound,
        max_angle,
        applicable,
        satisfied: bound.map(|b| max_angle <= b + ANGULAR_TOLERANCE),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::sample_barycentric;
    use crate::surface::MonomialBasis;
    use libm::{atan, cos, sin};
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn circle(n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, 2, |i, j| {
            let t = 2.0 * core::f64::consts::PI * i as f64 / n as f64;
            if j == 0 {
                cos(t)
            } else {
                sin(t)
            }
        })
    }

    fn sphere_model(r: usize, radius: f64) -> ImplicitPolyModel {
        let b = MonomialBasis::new(r, 2).unwrap();
        let mut theta = vec![0.0; b.len()];
        for (k, e) in b.exponents().iter().enumerate() {
            if e.iter().all(|&x| x == 0) {
                theta[k] = -radius * radius;
            } else if e.iter().any(|&x| x == 2) {
                theta[k] = 1.0;
            }
        }
        ImplicitPolyModel::new(b, DVector::from_vec(theta)).unwrap()
    }

    fn gaussian(n: usize, r: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = substream(seed, 0);
        DMatrix::from_fn(n, r, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn surface_consistency_basics() {
        let m = sphere_model(2, 1.0);
        let on = circle(40);
        assert!(surface_consistency(&m, &on, 1.0, 1e-12).unwrap() < 1e-7);
        let off = on.map(|v| 1.3 * v);
        let a = surface_consistency(&m, &off, 1.0, 1e-12).unwrap();
        let b = surface_consistency(&m, &off, 2.0, 1e-12).unwrap();
        assert!((a - 2.0 * b).abs() < 1e-15);
        assert!(surface_consistency(&m, &DMatrix::zeros(0, 2), 1.0, 1e-12).is_err());
        assert!(surface_consistency(&m, &on, 0.0, 1e-12).is_err());
    }

    #[test]
    fn duplicates_have_full_neighborhood_overlap() {
        let orig = gaussian(60, 3, 1);
        let (nc, dev) = neighborhood_consistency(&orig, &orig, 5).unwrap();
        assert_eq!(nc, 1.0);
        assert_eq!(dev, 0.0);
        assert!(neighborhood_consistency(&orig, &orig, 60).is_err());
    }

    #[test]
    fn distant_point_has_large_deviation() {
        let orig = gaussian(50, 2, 3);
        let far = DMatrix::from_row_slice(1, 2, &[1e3, 0.0]);
        let (nc, dev) = neighborhood_consistency(&orig, &far, 5).unwrap();
        assert!((0.0..=1.0).contains(&nc));
        assert!(dev > 1.0);
        // brute-force recomputation
        let z = [1e3, 0.0];
        let mut order: Vec<usize> = (0..50).collect();
        order.sort_by(|&i, &j| dist2(&row(&orig, i), &z).total_cmp(&dist2(&row(&orig, j), &z)).then(i.cmp(&j)));
        let anchor = order[0];
        let syn: Vec<usize> = order[1..6].to_vec();
        let pa = row(&orig, anchor);
        let mut around: Vec<usize> = (0..50).filter(|&i| i != anchor).collect();
        around.sort_by(|&i, &j| dist2(&row(&orig, i), &pa).total_cmp(&dist2(&row(&orig, j), &pa)).then(i.cmp(&j)));
        let anc: Vec<usize> = around[..5].to_vec();
        let shared = syn.iter().filter(|i| anc.contains(i)).count();
        assert_eq!(nc, shared as f64 / 5.0);
        let ds: f64 = syn.iter().map(|&i| sqrt(dist2(&row(&orig, i), &z))).sum::<f64>() / 5.0;
        let da: f64 = anc.iter().map(|&i| sqrt(dist2(&row(&orig, i), &pa))).sum::<f64>() / 5.0;
        assert!((dev - (ds - da).abs() / (da + 1e-12)).abs() < 1e-9 * dev);
    }

    #[test]
    fn neighborhood_is_rigid_invariant() {
        let orig = gaussian(40, 2, 5);
        let synth = gaussian(15, 2, 6);
        let (c, s) = (cos(0.7), sin(0.7));
        let rot = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        let shift = |m: &DMatrix<f64>| {
            let mut out = m * &rot;
            out.column_mut(0).add_scalar_mut(3.0);
            out.column_mut(1).add_scalar_mut(-1.5);
            out
        };
        let (a, b) = neighborhood_consistency(&orig, &synth, 5).unwrap();
        let (a2, b2) = neighborhood_consistency(&shift(&orig), &shift(&synth), 5).unwrap();
        assert_eq!(a, a2);
        assert!((b - b2).abs() < 1e-9);
    }

    #[test]
    fn local_distribution_cases() {
        let two = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 1.0]);
        let d = fit_local_distribution(&two, 1e-8).unwrap();
        assert!(d.regularization > 0.0);
        let pts = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 5.0, -1.0, 0.5]);
        let d = fit_local_distribution(&pts, 1e-8).unwrap();
        assert_eq!(d.mean[0], 1.0);
        assert_eq!(d.mean[1], 2.5);
        assert_eq!(d.mahalanobis(d.mean.as_slice()).unwrap(), 0.0);
        assert!(fit_local_distribution(&pts.rows(0, 1).into_owned(), 1e-8).is_err());
        let g = gaussian(100_000, 3, 7);
        let d = fit_local_distribution(&g, 1e-8).unwrap();
        let diff = &d.covariance - DMatrix::<f64>::identity(3, 3);
        let spectral = SymmetricEigen::new(diff).eigenvalues.amax();
        assert!(spectral < 0.05);
    }

    #[test]
    fn identity_covariance_unit_offset() {
        let d = LocalDistribution {
            mean: DVector::zeros(2),
            covariance: DMatrix::identity(2, 2),
            regularization: 0.0,
            factor: Some(DMatrix::identity(2, 2)),
        };
        assert_eq!(d.mahalanobis(&[1.0, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn gaussian_matched_dc_is_chi_mean() {
        let r = 10;
        let orig = gaussian(2000, r, 8) * 2.0;
        let dist = fit_local_distribution(&orig, 1e-8).unwrap();
        let l = dist.factor().clone();
        let std = gaussian(100_000, r, 9);
        let mut synth = std * l.transpose();
        for mut rw in synth.row_iter_mut() {
            rw += dist.mean.transpose();
        }
        let dc = distribution_consistency(&dist, &synth).unwrap();
        let chi = sqrt(2.0) * libm::exp(libm::lgamma((r as f64 + 1.0) / 2.0) - libm::lgamma(r as f64 / 2.0));
        assert!((chi - 3.084).abs() < 1e-3);
        assert!((dc - chi).abs() < 0.02 * chi, "{dc} vs {chi}");
    }

    #[test]
    fn shape_consistency_cases() {
        let m = sphere_model(3, 1.0);
        let pts = gaussian(30, 3, 2);
        let s = shape_consistency(&m, &m, &pts, 1e-12, 1e-8).unwrap();
        assert_eq!((s.d_f, s.d_2, s.shape_cons), (0.0, 0.0, 0.0));
        let raw = m.theta() * 2.0;
        let m2 = ImplicitPolyModel::new(m.basis().clone(), raw).unwrap();
        let s = shape_consistency(&m, &m2, &pts, 1e-12, 1e-8).unwrap();
        assert!(s.shape_cons < 1e-12);
        // only the origin: zero gradient everywhere sampled
        let origin = DMatrix::zeros(1, 3);
        assert_eq!(shape_consistency(&m, &m, &origin, 1e-12, 1e-8).unwrap_err(), Error::AllExcluded);
        let other = ImplicitPolyModel::new(MonomialBasis::new(3, 1).unwrap(), DVector::from_vec(vec![1.0, 1.0, 0.0, 0.0])).unwrap();
        assert_eq!(shape_consistency(&m, &other, &pts, 1e-12, 1e-8).unwrap_err(), Error::BasisMismatch);
    }

    #[test]
    fn sphere_radii_drift_matches_analytic() {
        let (a, b) = (sphere_model(3, 1.0), sphere_model(3, 2.0));
        let eps = 1e-3;
        let mut rng = substream(3, 3);
        let mut shell = DMatrix::zeros(20, 3);
        for i in 0..20 {
            let v: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
            let nv = norm(&v);
            for j in 0..3 {
                shell[(i, j)] = v[j] / nv;
            }
        }
        let s = shape_consistency(&a, &b, &shell, eps, 1e-8).unwrap();
        // f = c (|z|^2 - R^2) with c = 1/sqrt(R^4 + 3): H = 2cI, grad = 2cz, |z| = 1
        let desc = |radius: f64| {
            let c = 1.0 / sqrt(radius.powi(4) + 3.0);
            let g = 2.0 * c;
            (2.0 * c * sqrt(3.0) / (g + eps), 2.0 * c / (g + eps))
        };
        let ((fa, sa), (fb, sb)) = (desc(1.0), desc(2.0));
        let expect_f = (fa - fb).abs() / (fa + eps);
        let expect_2 = (sa - sb).abs() / (sa + eps);
        assert!((s.d_f - expect_f).abs() < 1e-6);
        assert!((s.d_2 - expect_2).abs() < 1e-6);
        assert!(s.d_f > 0.0);
    }

    #[test]
    fn coefficient_consistency_cases() {
        let t = [0.3, -0.4, 1.2];
        let neg: Vec<f64> = t.iter().map(|v| -v).collect();
        assert_eq!(coefficient_consistency(&t, &t).unwrap(), 0.0);
        assert_eq!(coefficient_consistency(&t, &neg).unwrap(), 0.0);
        let c = coefficient_consistency(&[1.0, 0.0], &[0.0, 3.0]).unwrap();
        assert!((c - sqrt(2.0)).abs() < 1e-15);
        let u = [0.1, 0.9, -0.2];
        assert_eq!(coefficient_consistency(&t, &u).unwrap(), coefficient_consistency(&u, &t).unwrap());
        assert!(coefficient_consistency(&t, &[0.0; 3]).is_err());
        assert!(coefficient_consistency(&t, &[1.0]).is_err());
    }

    #[test]
    fn batch_report_on_circle() {
        let orig = circle(200);
        let (model, _) = fit_implicit(&orig, 2, FitOptions::default()).unwrap();
        let cfg = crate::probe::SurfaceGenerationConfig::default();
        let batch = crate::probe::generate_surface_based(&orig, &model, 300, &cfg, 4).unwrap();
        let rep = evaluate_batch(&orig, &model, &batch.points, &ValidityConfig::default()).unwrap();
        // mean normalized residual stays below f_tol
        assert!(rep.surface * rep.scale < 1e-6, "{rep:?}");
        assert!(rep.coeff_cons < 1e-3);
        assert!((0.0..=1.0).contains(&rep.neighborhood));
        assert!(rep.coeff_cons <= 2.0 && rep.distr_dev >= 0.0 && rep.hess_shape >= 0.0);
        assert_eq!(rep.n_synth, 300);
        assert_eq!(rep.shape.retained, 200);
    }

    #[test]
    fn worked_angular_example() {
        let z = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 3.0, -1.0]);
        let rep = angular_stability_check(&z, &[0.0, 0.0], &[3.0, 0.0]).unwrap();
        assert!((rep.diameter - 2.0).abs() < 1e-15);
        assert!((rep.hull_distance - 3.0).abs() < 1e-12);
        assert!((rep.bound.unwrap() - 2.0 * asin(1.0 / 3.0)).abs() < 1e-12);
        assert!((rep.bound.unwrap() - 0.6797).abs() < 1e-4);
        assert!((rep.max_angle - atan(1.0 / 3.0)).abs() < 1e-12);
        assert_eq!(rep.satisfied, Some(true));
    }

    #[test]
    fn single_point_cloud() {
        let z = DMatrix::from_row_slice(1, 2, &[2.0, 1.0]);
        let rep = angular_stability_check(&z, &[0.0, 0.0], &[2.0, 1.0]).unwrap();
        assert_eq!(rep.diameter, 0.0);
        assert_eq!(rep.bound, Some(0.0));
        assert_eq!(rep.max_angle, 0.0);
        assert_eq!(rep.satisfied, Some(true));
        assert!(angular_stability_check(&z, &[0.0, 0.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn centroid_is_inside_hull() {
        let z = gaussian(20, 3, 11);
        let mu = column_means(&z);
        let rep = angular_stability_check(&z, mu.as_slice(), &[9.0, 9.0, 9.0]).unwrap();
        assert!(!rep.applicable);
        assert!(rep.hull_distance < 1e-9);
        assert_eq!(rep.satisfied, None);
    }

    /// Projected gradient on the simplex, as an independent check of the
    /// active-set solver.
    fn hull_distance_oracle(cloud: &DMatrix<f64>, a: &[f64]) -> f64 {
        let n = cloud.nrows();
        let p: Vec<Vec<f64>> = (0..n).map(|i| row(cloud, i).iter().zip(a).map(|(x, y)| x - y).collect()).collect();
        let gram = DMatrix::from_fn(n, n, |i, j| p[i].iter().zip(&p[j]).map(|(x, y)| x * y).sum::<f64>());
        let lip = SymmetricEigen::new(gram.clone()).eigenvalues.amax().max(1e-300);
        let mut w = DVector::from_element(n, 1.0 / n as f64);
        for _ in 0..20_000 {
            let g = &gram * &w;
            let mut y = &w - g / lip;
            // Euclidean projection onto the simplex (sort-based)
            let mut s: Vec<f64> = y.iter().copied().collect();
            s.sort_by(|x, y| y.total_cmp(x));
            let (mut acc, mut tau) = (0.0, 0.0);
            for (k, v) in s.iter().enumerate() {
                acc += v;
                let t = (acc - 1.0) / (k + 1) as f64;
                if v - t > 0.0 {
                    tau = t;
                }
            }
            y.apply(|v| *v = (*v - tau).max(0.0));
            w = y;
        }
        sqrt((w.transpose() * &gram * &w)[(0, 0)].max(0.0))
    }

    #[test]
    fn hull_distance_matches_projected_gradient() {
        let mut rng = substream(21, 0);
        for case in 0..40 {
            let r = 2 + case % 3;
            let n = 3 + case % 7;
            let z = gaussian(n, r, 100 + case as u64);
            let a: Vec<f64> = (0..r).map(|_| rng.random_range(-2.5..2.5)).collect();
            let (d, w) = hull_distance(&z, &a).unwrap();
            let oracle = hull_distance_oracle(&z, &a);
            assert!((d - oracle).abs() < 1e-6, "case {case}: {d} vs {oracle}");
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(w.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn angular_bound_holds_for_barycentric_points() {
        let mut rng = substream(77, 0);
        let mut checked = 0;
        while checked < 200 {
            let r = rng.random_range(2..5);
            let n = rng.random_range(2..8);
            let centre: Vec<f64> = (0..r).map(|_| rng.random_range(-1.0..1.0)).collect();
            let z = DMatrix::from_fn(n, r, |_, j| centre[j] + 0.3 * rng.random_range(-1.0..1.0));
            let dir: Vec<f64> = (0..r).map(|_| StandardNormal.sample(&mut rng)).collect();
            let nd = norm(&dir);
            let dist = rng.random_range(0.5..4.0);
            let a: Vec<f64> = centre.iter().zip(&dir).map(|(c, d)| c + dist * d / nd).collect();
            let v = sample_barycentric(&z, 1.0, 1, checked as u64).unwrap();
            let rep = angular_stability_check(&z, &a, &row(&v, 0)).unwrap();
            if !rep.applicable {
                continue;
            }
            assert_eq!(rep.satisfied, Some(true), "{rep:?}");
            checked += 1;
        }
    }
}
