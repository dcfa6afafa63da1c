//! Scalar helpers routed through `libm` so the crate builds without `std`.

use nalgebra::{DMatrix, DVector};

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn asin(x: f64) -> f64 {
    libm::asin(x)
}

#[inline]
pub fn atan2(y: f64, x: f64) -> f64 {
    libm::atan2(y, x)
}

#[inline]
pub fn lgamma(x: f64) -> f64 {
    libm::lgamma(x)
}

pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    sqrt(a.iter().map(|x| x * x).sum())
}

/// Angle between two nonzero vectors, computed from the chord between their
/// unit directions so it stays accurate near 0 and pi.
pub fn angle(u: &[f64], w: &[f64]) -> f64 {
    let nu = norm(u);
    let nw = norm(w);
    let mut diff = 0.0;
    let mut sum = 0.0;
    for (a, b) in u.iter().zip(w) {
        let (x, y) = (a / nu, b / nw);
        diff += (x - y) * (x - y);
        sum += (x + y) * (x + y);
    }
    2.0 * atan2(sqrt(diff), sqrt(sum))
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation (divides by n).
pub fn std_dev(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let m = mean(values);
    sqrt(values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64)
}

pub(crate) fn row(m: &DMatrix<f64>, i: usize) -> alloc::vec::Vec<f64> {
    m.row(i).iter().copied().collect()
}

pub(crate) fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows() as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

pub(crate) fn check_finite(m: &DMatrix<f64>) -> crate::Result<()> {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if !m[(i, j)].is_finite() {
                return Err(crate::Error::NonFinite { row: i, col: j });
            }
        }
    }
    Ok(())
}

/// Root-mean-square distance of the rows from their centroid.
pub fn rms_radius(points: &DMatrix<f64>) -> f64 {
    if points.nrows() == 0 {
        return 0.0;
    }
    let mu = column_means(points);
    let mut acc = 0.0;
    for i in 0..points.nrows() {
        for j in 0..points.ncols() {
            let d = points[(i, j)] - mu[j];
            acc += d * d;
        }
    }
    sqrt(acc / points.nrows() as f64)
}
