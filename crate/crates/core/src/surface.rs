//! Implicit polynomial carriers `f(z) = sum_j theta_j m_j(z)` of degree 1-3.
//!
//! Coefficients are fitted as the right singular vector of the (column
//! scaled) design matrix belonging to its smallest singular value, which
//! minimizes the algebraic residual under `||theta|| = 1`.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{check_finite, sqrt};

/// Largest basis the fitter will allocate.
pub const MAX_BASIS_SIZE: u128 = 1_000_000;

/// Coefficients smaller than this are treated as zero when fixing the sign.
const SIGN_TOLERANCE: f64 = 1e-12;

/// Number of monomials of total degree at most `degree` in `vars` variables,
/// `C(vars + degree, degree)`.
pub fn basis_size(vars: usize, degree: u32) -> u128 {
    let mut acc: u128 = 1;
    for i in 1..=degree as u128 {
        acc = acc * (vars as u128 + i) / i;
    }
    acc
}

/// One monomial as a sorted multiset of variable indices (at most three).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Monomial {
    vars: [u32; 3],
    len: u8,
}

impl Monomial {
    fn indices(&self) -> &[u32] {
        &self.vars[..self.len as usize]
    }
}

/// Monomials in graded lexicographic order: the constant, then
/// `z_1..z_r`, then `z_1^2, z_1 z_2, .., z_r^2`, then the cubic terms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonomialBasis {
    vars: usize,
    degree: u32,
    terms: Vec<Monomial>,
}

impl MonomialBasis {
    pub fn new(vars: usize, degree: u32) -> Result<Self> {
        if !(1..=3).contains(&degree) {
            return Err(Error::UnsupportedDegree(degree));
        }
        if vars == 0 {
            return Err(crate::error::invalid("r", "need at least one variable"));
        }
        let p = basis_size(vars, degree);
        if p > MAX_BASIS_SIZE {
            return Err(Error::BasisTooLarge { p, cap: MAX_BASIS_SIZE });
        }
        let mut terms = Vec::with_capacity(p as usize);
        terms.push(Monomial { vars: [0; 3], len: 0 });
        let r = vars as u32;
        for i in 0..r {
            terms.push(Monomial { vars: [i, 0, 0], len: 1 });
        }
        if degree >= 2 {
            for i in 0..r {
                for j in i..r {
                    terms.push(Monomial { vars: [i, j, 0], len: 2 });
                }
            }
        }
        if degree >= 3 {
            for i in 0..r {
                for j in i..r {
                    for k in j..r {
                        terms.push(Monomial { vars: [i, j, k], len: 3 });
                    }
                }
            }
        }
        debug_assert_eq!(terms.len() as u128, p);
        Ok(MonomialBasis { vars, degree, terms })
    }

    pub fn vars(&self) -> usize {
        self.vars
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Exponent multi-indices in basis order.
    pub fn exponents(&self) -> Vec<Vec<u32>> {
        self.terms
            .iter()
            .map(|m| {
                let mut e = vec![0; self.vars];
                for &i in m.indices() {
                    e[i as usize] += 1;
                }
                e
            })
            .collect()
    }

    /// Writes the monomial values at `z` into `out`.
    pub fn eval_into(&self, z: &[f64], out: &mut [f64]) {
        for (o, m) in out.iter_mut().zip(&self.terms) {
            *o = m.indices().iter().map(|&i| z[i as usize]).product();
        }
    }

    fn check_len(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.vars {
            return Err(Error::DimensionMismatch {
                expected: self.vars,
                found: z.len(),
            });
        }
        Ok(())
    }

    fn check_coeffs(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                found: theta.len(),
            });
        }
        Ok(())
    }

    /// `f(z)` for arbitrary (not necessarily unit) coefficients.
    pub fn value(&self, theta: &[f64], z: &[f64]) -> Result<f64> {
        self.check_coeffs(theta)?;
        self.check_len(z)?;
        Ok(self.value_unchecked(theta, z))
    }

    fn value_unchecked(&self, theta: &[f64], z: &[f64]) -> f64 {
        self.terms
            .iter()
            .zip(theta)
            .map(|(m, t)| t * m.indices().iter().map(|&i| z[i as usize]).product::<f64>())
            .sum()
    }

    pub fn gradient(&self, theta: &[f64], z: &[f64]) -> Result<DVector<f64>> {
        self.check_coeffs(theta)?;
        self.check_len(z)?;
        Ok(self.gradient_unchecked(theta, z))
    }

    fn gradient_unchecked(&self, theta: &[f64], z: &[f64]) -> DVector<f64> {
        let mut g = DVector::zeros(self.vars);
        for (m, &t) in self.terms.iter().zip(theta) {
            let idx = m.indices();
            // Differentiating each factor in turn counts repeated variables correctly.
            for skip in 0..idx.len() {
                let mut prod = t;
                for (pos, &i) in idx.iter().enumerate() {
                    if pos != skip {
                        prod *= z[i as usize];
                    }
                }
                g[idx[skip] as usize] += prod;
            }
        }
        g
    }

    pub fn hessian(&self, theta: &[f64], z: &[f64]) -> Result<DMatrix<f64>> {
        self.check_coeffs(theta)?;
        self.check_len(z)?;
        Ok(self.hessian_unchecked(theta, z))
    }

    fn hessian_unchecked(&self, theta: &[f64], z: &[f64]) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.vars, self.vars);
        for (m, &t) in self.terms.iter().zip(theta) {
            let idx = m.indices();
            if idx.len() < 2 {
                continue;
            }
            for a in 0..idx.len() {
                for b in 0..idx.len() {
                    if a == b {
                        continue;
                    }
                    let mut prod = t;
                    for (pos, &i) in idx.iter().enumerate() {
                        if pos != a && pos != b {
                            prod *= z[i as usize];
                        }
                    }
                    h[(idx[a] as usize, idx[b] as usize)] += prod;
                }
            }
        }
        h
    }
}

/// Convenience wrapper matching the operation name used across the crate.
pub fn build_basis(r: usize, degree: u32) -> Result<MonomialBasis> {
    MonomialBasis::new(r, degree)
}

/// An implicit polynomial with unit-norm, sign-canonical coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitPolyModel {
    basis: MonomialBasis,
    theta: DVector<f64>,
}

impl ImplicitPolyModel {
    /// Normalizes `theta` to unit length and flips it so that its first
    /// non-negligible entry is positive.
    pub fn new(basis: MonomialBasis, theta: DVector<f64>) -> Result<Self> {
        basis.check_coeffs(theta.as_slice())?;
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite { row: 0, col: 0 });
        }
        let nrm = sqrt(theta.norm_squared());
        if nrm == 0.0 {
            return Err(Error::ZeroCoefficients);
        }
        let mut theta = theta / nrm;
        if let Some(first) = theta.iter().find(|t| t.abs() > SIGN_TOLERANCE) {
            if *first < 0.0 {
                theta.neg_mut();
            }
        }
        Ok(ImplicitPolyModel { basis, theta })
    }

    /// Rebuilds a model from coefficients that are already unit-norm and
    /// sign-canonical, keeping them bit-for-bit.
    pub fn from_canonical(basis: MonomialBasis, theta: DVector<f64>) -> Result<Self> {
        basis.check_coeffs(theta.as_slice())?;
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite { row: 0, col: 0 });
        }
        if (sqrt(theta.norm_squared()) - 1.0).abs() > 1e-12 {
            return Err(crate::error::invalid("theta", "must have unit norm"));
        }
        match theta.iter().find(|t| t.abs() > SIGN_TOLERANCE) {
            Some(first) if *first > 0.0 => Ok(ImplicitPolyModel { basis, theta }),
            _ => Err(crate::error::invalid("theta", "first significant entry must be positive")),
        }
    }

    pub fn basis(&self) -> &MonomialBasis {
        &self.basis
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn degree(&self) -> u32 {
        self.basis.degree
    }

    pub fn vars(&self) -> usize {
        self.basis.vars
    }

    pub fn evaluate(&self, z: &[f64]) -> Result<f64> {
        self.basis.check_len(z)?;
        Ok(self.basis.value_unchecked(self.theta.as_slice(), z))
    }

    pub fn gradient(&self, z: &[f64]) -> Result<DVector<f64>> {
        self.basis.check_len(z)?;
        Ok(self.basis.gradient_unchecked(self.theta.as_slice(), z))
    }

    pub fn hessian(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        self.basis.check_len(z)?;
        Ok(self.basis.hessian_unchecked(self.theta.as_slice(), z))
    }

    /// `|f(z)| / (||grad f(z)|| + epsilon)`.
    pub fn normalized_residual(&self, z: &[f64], epsilon: f64) -> Result<f64> {
        let f = self.evaluate(z)?;
        let g = self.basis.gradient_unchecked(self.theta.as_slice(), z);
        Ok(f.abs() / (sqrt(g.norm_squared()) + epsilon))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualKind {
    /// `|f(z)|`
    Algebraic,
    /// `|f(z)| / (||grad f(z)|| + epsilon)`
    NormalizedSurface,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub kind: ResidualKind,
    pub rmse: f64,
    pub mae: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub residuals: ResidualSummary,
    /// Mean `|f(z_i)|` regardless of the reported residual kind.
    pub mean_algebraic: f64,
    pub smallest_singular_value: f64,
    pub second_singular_value: f64,
    /// `sigma_min / sigma_second`; 1.0 means the minimum is not separated.
    pub condition_gap: f64,
    /// Frobenius norm of the column-scaled design matrix.
    pub design_norm: f64,
    /// Set when the two smallest singular values tie to 1e-10 relative.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub residual_kind: ResidualKind,
    pub epsilon: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            residual_kind: ResidualKind::NormalizedSurface,
            epsilon: 1e-12,
        }
    }
}

/// Residuals of every row of `points` against `model`.
pub fn residuals(
    model: &ImplicitPolyModel,
    points: &DMatrix<f64>,
    kind: ResidualKind,
    epsilon: f64,
) -> Result<(Vec<f64>, ResidualSummary)> {
    if points.ncols() != model.vars() {
        return Err(Error::DimensionMismatch {
            expected: model.vars(),
            found: points.ncols(),
        });
    }
    if kind == ResidualKind::NormalizedSurface && !(epsilon > 0.0) {
        return Err(crate::error::invalid("epsilon", "must be positive"));
    }
    check_finite(points)?;
    let mut z = vec![0.0; points.ncols()];
    let mut out = Vec::with_capacity(points.nrows());
    for i in 0..points.nrows() {
        for (j, v) in z.iter_mut().enumerate() {
            *v = points[(i, j)];
        }
        let res = match kind {
            ResidualKind::Algebraic => model.evaluate(&z)?.abs(),
            ResidualKind::NormalizedSurface => model.normalized_residual(&z, epsilon)?,
        };
        out.push(res);
    }
    let summary = summarize(&out, kind);
    Ok((out, summary))
}

fn summarize(res: &[f64], kind: ResidualKind) -> ResidualSummary {
    let n = res.len();
    let (mut sq, mut abs) = (0.0, 0.0);
    for r in res {
        sq += r * r;
        abs += r.abs();
    }
    let denom = n.max(1) as f64;
    ResidualSummary {
        kind,
        rmse: sqrt(sq / denom),
        mae: abs / denom,
        n,
    }
}

/// Fits a degree-`degree` implicit polynomial to the rows of `points`.
pub fn fit_implicit(
    points: &DMatrix<f64>,
    degree: u32,
    options: FitOptions,
) -> Result<(ImplicitPolyModel, FitDiagnostics)> {
    let (n, r) = points.shape();
    if n < 2 {
        return Err(Error::TooFewPoints { needed: 2, found: n });
    }
    check_finite(points)?;
    let distinct = (1..n).any(|i| points.row(i) != points.row(0));
    if !distinct {
        return Err(Error::ZeroVariance);
    }
    let basis = MonomialBasis::new(r, degree)?;
    let p = basis.len();

    let mut z = vec![0.0; r];
    let mut mono = vec![0.0; p];
    let load = |i: usize, z: &mut [f64]| {
        for (j, v) in z.iter_mut().enumerate() {
            *v = points[(i, j)];
        }
    };

    // Column RMS scaling; the constant column always has RMS 1.
    let mut ss = vec![0.0; p];
    for i in 0..n {
        load(i, &mut z);
        basis.eval_into(&z, &mut mono);
        for (s, m) in ss.iter_mut().zip(&mono) {
            *s += m * m;
        }
    }
    let scale: Vec<f64> = ss
        .iter()
        .map(|s| {
            let rms = sqrt(s / n as f64);
            if rms > 0.0 && rms.is_finite() {
                rms
            } else {
                1.0
            }
        })
        .collect();

    // Tall-skinny QR over row blocks keeps memory at O(p^2 + block * p).
    let block = (2 * p).max(512);
    let mut r_acc: Option<DMatrix<f64>> = None;
    let mut start = 0;
    while start < n {
        let end = (start + block).min(n);
        let prev_rows = r_acc.as_ref().map_or(0, |m| m.nrows());
        let mut stack = DMatrix::zeros(prev_rows + end - start, p);
        if let Some(prev) = &r_acc {
            stack.rows_mut(0, prev_rows).copy_from(prev);
        }
        for i in start..end {
            load(i, &mut z);
            basis.eval_into(&z, &mut mono);
            let row = prev_rows + i - start;
            for j in 0..p {
                stack[(row, j)] = mono[j] / scale[j];
            }
        }
        r_acc = Some(stack.qr().r());
        start = end;
    }
    let r_small = r_acc.expect("n >= 2 gives at least one block");
    let mut square = DMatrix::zeros(p, p);
    let rows = r_small.nrows().min(p);
    square.rows_mut(0, rows).copy_from(&r_small.rows(0, rows));
    let design_norm = sqrt(square.norm_squared());

    let svd = square.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[a].partial_cmp(&sv[b]).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b)));
    let smallest = sv[order[0]];
    let second = if order.len() > 1 { sv[order[1]] } else { smallest };
    let phi = v_t.row(order[0]);
    let theta = DVector::from_iterator(p, phi.iter().zip(&scale).map(|(v, s)| v / s));
    let model = ImplicitPolyModel::new(basis, theta)?;

    let (_, summary) = residuals(&model, points, options.residual_kind, options.epsilon)?;
    let (_, alg) = residuals(&model, points, ResidualKind::Algebraic, options.epsilon)?;
    let degenerate = second <= 0.0 || (second - smallest) <= 1e-10 * second;
    let condition_gap = if second > 0.0 { smallest / second } else { 1.0 };
    Ok((
        model,
        FitDiagnostics {
            residuals: summary,
            mean_algebraic: alg.mae,
            smallest_singular_value: smallest,
            second_singular_value: second,
            condition_gap,
            design_norm,
            degenerate,
        },
    ))
}
