//! Adaptive PCA reduction of a local cloud and affine reconstruction.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{invalid, Error, Result};
use crate::math::{check_finite, column_means, sqrt};

pub const DEFAULT_VARIANCE_THRESHOLD: f64 = 0.90;

/// Eigenvalues below this fraction of the leading one are never selected.
const DEGENERATE_RATIO: f64 = 1e-12;

/// A fitted PCA coordinate frame: `z = U_r^T (x - mean)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedSpace {
    pub mean: DVector<f64>,
    /// d x r matrix with orthonormal columns, ordered by decreasing variance.
    pub components: DMatrix<f64>,
    /// Cumulative explained-variance fraction of the selected components.
    pub explained: f64,
    /// Per-component variance fractions, in decreasing order.
    pub spectrum: Vec<f64>,
    pub threshold: f64,
}

impl ReducedSpace {
    /// Fits PCA on the rows of `points` and keeps the smallest number of
    /// components whose cumulative variance reaches `threshold`.
    pub fn fit(points: &DMatrix<f64>, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err(invalid("variance_threshold", "must lie in (0, 1]"));
        }
        let (n, d) = points.shape();
        if n < 2 {
            return Err(Error::TooFewPoints { needed: 2, found: n });
        }
        check_finite(points)?;
        let mean = column_means(points);
        let mut centered = points.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let scale = 1.0 / (n as f64 - 1.0);

        // Work in whichever of the d x d covariance or the N x N Gram matrix is smaller.
        let use_gram = n < d;
        let sym = if use_gram {
            (&centered * centered.transpose()) * scale
        } else {
            centered.tr_mul(&centered) * scale
        };
        let eig = SymmetricEigen::new(sym);
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .partial_cmp(&eig.eigenvalues[a])
                .unwrap_or(core::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        let total: f64 = values.iter().sum();
        let top = values.first().copied().unwrap_or(0.0);
        if !(total > 0.0) || !(top > 0.0) {
            return Err(Error::ZeroVariance);
        }
        let spectrum: Vec<f64> = values.iter().map(|v| v / total).collect();
        let selectable = values
            .iter()
            .take_while(|&&v| v >= DEGENERATE_RATIO * top)
            .count()
            .min(n - 1)
            .min(d)
            .max(1);

        let mut r = selectable;
        let mut cum = 0.0;
        for (i, frac) in spectrum.iter().take(selectable).enumerate() {
            cum += frac;
            if cum >= threshold - 1e-12 {
                r = i + 1;
                break;
            }
        }
        let explained: f64 = spectrum[..r].iter().sum();

        let mut components = DMatrix::zeros(d, r);
        for (col, &src) in order.iter().take(r).enumerate() {
            let v = eig.eigenvectors.column(src);
            if use_gram {
                let u = centered.tr_mul(&v);
                components.set_column(col, &u);
            } else {
                components.set_column(col, &v);
            }
        }
        orthonormalize(&mut components);
        for mut c in components.column_iter_mut() {
            let mut best = 0;
            for i in 1..c.len() {
                if c[i].abs() > c[best].abs() {
                    best = i;
                }
            }
            if c[best] < 0.0 {
                c.neg_mut();
            }
        }
        Ok(ReducedSpace {
            mean,
            components,
            explained,
            spectrum,
            threshold,
        })
    }

    /// Reassembles a fitted space, checking shapes and orthonormality.
    pub fn from_parts(
        mean: DVector<f64>,
        components: DMatrix<f64>,
        explained: f64,
        spectrum: Vec<f64>,
        threshold: f64,
    ) -> Result<Self> {
        let (d, r) = components.shape();
        if mean.len() != d {
            return Err(Error::DimensionMismatch { expected: d, found: mean.len() });
        }
        if r == 0 || r > d {
            return Err(invalid("components", "need between 1 and d columns"));
        }
        if mean.iter().chain(components.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: 0, col: 0 });
        }
        let gram = components.tr_mul(&components) - DMatrix::<f64>::identity(r, r);
        if gram.amax() > 1e-9 {
            return Err(invalid("components", "columns are not orthonormal"));
        }
        Ok(ReducedSpace {
            mean,
            components,
            explained,
            spectrum,
            threshold,
        })
    }

    pub fn ambient_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn reduced_dim(&self) -> usize {
        self.components.ncols()
    }

    /// Maps ambient rows to reduced coordinates.
    pub fn project(&self, points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if points.ncols() != self.ambient_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.ambient_dim(),
                found: points.ncols(),
            });
        }
        let mut centered = points.clone();
        for mut row in centered.row_iter_mut() {
            row -= self.mean.transpose();
        }
        Ok(centered * &self.components)
    }

    /// Maps reduced rows back to the affine subspace `mean + U_r z`.
    pub fn reconstruct(&self, reduced: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if reduced.ncols() != self.reduced_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.reduced_dim(),
                found: reduced.ncols(),
            });
        }
        let mut out = reduced * self.components.transpose();
        for mut row in out.row_iter_mut() {
            row += self.mean.transpose();
        }
        Ok(out)
    }
}

pub fn fit_pca(cloud: &crate::cloud::EmbeddingCloud, threshold: f64) -> Result<ReducedSpace> {
    ReducedSpace::fit(cloud.points(), threshold)
}

/// Two passes of modified Gram-Schmidt over the columns.
fn orthonormalize(m: &mut DMatrix<f64>) {
    for _ in 0..2 {
        for j in 0..m.ncols() {
            for k in 0..j {
                let dot = m.column(j).dot(&m.column(k));
                let prev = m.column(k).clone_owned();
                m.column_mut(j).axpy(-dot, &prev, 1.0);
            }
            let nrm = sqrt(m.column(j).norm_squared());
            if nrm > 0.0 {
                m.column_mut(j).scale_mut(1.0 / nrm);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0))
    }

    fn plane_cloud() -> (DMatrix<f64>, DMatrix<f64>) {
        // two fixed directions in R^5 plus an offset
        let basis = DMatrix::from_row_slice(2, 5, &[1.0, 2.0, 0.0, -1.0, 0.5, 0.0, 1.0, 1.0, 1.0, -2.0]);
        let coeffs = random_matrix(100, 2, 3);
        let mut pts = &coeffs * &basis;
        for mut row in pts.row_iter_mut() {
            row[0] += 3.0;
            row[4] -= 1.0;
        }
        (pts, basis)
    }

    fn assert_orthonormal(u: &DMatrix<f64>) {
        let g = u.tr_mul(u);
        let eye = DMatrix::<f64>::identity(u.ncols(), u.ncols());
        assert!((g - eye).amax() < 1e-10);
    }

    #[test]
    fn plane_in_r5_selects_two_components() {
        let (pts, _) = plane_cloud();
        let space = ReducedSpace::fit(&pts, 0.9).unwrap();
        assert_eq!(space.reduced_dim(), 2);
        assert!(space.explained >= 0.999);
        assert_orthonormal(&space.components);
        // exact-rank round trip
        let back = space.reconstruct(&space.project(&pts).unwrap()).unwrap();
        assert!((back - &pts).amax() < 1e-10);
    }

    #[test]
    fn full_threshold_reaches_rank() {
        let pts = random_matrix(40, 6, 11);
        let space = ReducedSpace::fit(&pts, 1.0).unwrap();
        assert_eq!(space.reduced_dim(), 6);
        let (pts, _) = plane_cloud();
        assert_eq!(ReducedSpace::fit(&pts, 1.0).unwrap().reduced_dim(), 2);
    }

    #[test]
    fn gram_route_matches_covariance_route() {
        // N < d goes through the Gram matrix; compare against explicit covariance eigen.
        let pts = random_matrix(8, 20, 5);
        let space = ReducedSpace::fit(&pts, 1.0).unwrap();
        assert_eq!(space.reduced_dim(), 7);
        assert_orthonormal(&space.components);
        let mean = column_means(&pts);
        let mut c = pts.clone();
        for mut row in c.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = c.tr_mul(&c) / 7.0;
        let mut ev: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let total: f64 = ev.iter().sum();
        for i in 0..7 {
            assert!((space.spectrum[i] - ev[i] / total).abs() < 1e-10);
        }
    }

    #[test]
    fn project_mean_and_first_component() {
        let pts = random_matrix(30, 4, 2);
        let space = ReducedSpace::fit(&pts, 0.95).unwrap();
        let r = space.reduced_dim();
        let mu = DMatrix::from_row_slice(1, 4, space.mean.as_slice());
        let z = space.project(&mu).unwrap();
        assert!(z.amax() < 1e-12);
        let x = &mu + DMatrix::from_row_slice(1, 4, space.components.column(0).as_slice());
        let z = space.project(&x).unwrap();
        assert!((z[(0, 0)] - 1.0).abs() < 1e-12);
        for j in 1..r {
            assert!(z[(0, j)].abs() < 1e-12);
        }
        let zero = DMatrix::<f64>::zeros(1, r);
        assert!((space.reconstruct(&zero).unwrap() - mu).amax() < 1e-15);
    }

    #[test]
    fn project_after_reconstruct_is_identity() {
        let pts = random_matrix(50, 7, 9);
        let space = ReducedSpace::fit(&pts, 0.8).unwrap();
        let z = random_matrix(10, space.reduced_dim(), 1);
        let zz = space.project(&space.reconstruct(&z).unwrap()).unwrap();
        assert!((zz - z).amax() < 1e-10);
    }

    #[test]
    fn residual_equals_discarded_part() {
        let pts = random_matrix(60, 5, 21);
        let space = ReducedSpace::fit(&pts, 0.7).unwrap();
        let full = ReducedSpace::fit(&pts, 1.0).unwrap();
        let r = space.reduced_dim();
        assert!(r < 5);
        let back = space.reconstruct(&space.project(&pts).unwrap()).unwrap();
        let zfull = full.project(&pts).unwrap();
        for i in 0..pts.nrows() {
            let res = (pts.row(i) - back.row(i)).norm();
            let discarded: f64 = (r..5).map(|j| zfull[(i, j)] * zfull[(i, j)]).sum::<f64>().sqrt();
            assert!((res - discarded).abs() < 1e-10);
        }
    }

    #[test]
    fn reconstruction_error_non_increasing_in_r() {
        let pts = random_matrix(40, 6, 4);
        let mut last = f64::INFINITY;
        for t in [0.3, 0.5, 0.7, 0.9, 1.0] {
            let space = ReducedSpace::fit(&pts, t).unwrap();
            let back = space.reconstruct(&space.project(&pts).unwrap()).unwrap();
            let err = (back - &pts).norm();
            assert!(err <= last + 1e-12);
            last = err;
        }
    }

    #[test]
    fn sign_convention_is_deterministic() {
        let pts = random_matrix(25, 5, 8);
        let a = ReducedSpace::fit(&pts, 0.9).unwrap();
        let neg = -pts.clone();
        let b = ReducedSpace::fit(&neg, 0.9).unwrap();
        // same components regardless of the reflection of the data
        assert!((a.components - b.components).amax() < 1e-10);
    }

    #[test]
    fn errors() {
        let same = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert_eq!(ReducedSpace::fit(&same, 0.9).unwrap_err(), Error::ZeroVariance);
        let one = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        assert!(matches!(ReducedSpace::fit(&one, 0.9), Err(Error::TooFewPoints { .. })));
        let pts = random_matrix(5, 3, 1);
        assert!(ReducedSpace::fit(&pts, 0.0).is_err());
        let space = ReducedSpace::fit(&pts, 0.9).unwrap();
        assert!(matches!(
            space.project(&DMatrix::zeros(1, 2)),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(space.reconstruct(&DMatrix::zeros(1, 9)).is_err());
    }
}
