//! Least-squares regression on Hermite polynomials of a standardised state.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::par::Execution;

/// Polynomials `He_0, ..., He_degree` of the standardised state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegressionBasis {
    pub degree: usize,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        RegressionBasis { degree: 3 }
    }
}

impl RegressionBasis {
    pub fn len(&self) -> usize {
        self.degree + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Writes `He_0(x), ..., He_degree(x)` into `out`.
    pub fn eval(&self, x: f64, out: &mut [f64]) {
        out[0] = 1.0;
        if self.degree >= 1 {
            out[1] = x;
        }
        for k in 2..=self.degree {
            out[k] = x * out[k - 1] - (k - 1) as f64 * out[k - 2];
        }
    }
}

/// Affine map to a standardised state; `None` scale for a degenerate slice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Standardizer {
    mean: f64,
    inv_scale: Option<f64>,
}

impl Standardizer {
    pub(crate) fn fit(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count().max(1) as f64;
        let mean = values.clone().sum::<f64>() / n;
        let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_scale = if var > 1e-24 * (1.0 + mean * mean) {
            Some(1.0 / var.sqrt())
        } else {
            None
        };
        Standardizer { mean, inv_scale }
    }

    /// Number of basis functions usable on this slice.
    pub(crate) fn width(&self, basis: &RegressionBasis) -> usize {
        if self.inv_scale.is_some() {
            basis.len()
        } else {
            1
        }
    }

    pub(crate) fn features(&self, basis: &RegressionBasis, x: f64, out: &mut [f64]) {
        match self.inv_scale {
            Some(s) => basis.eval((x - self.mean) * s, out),
            None => out[0] = 1.0,
        }
    }
}

/// Outcome of a least-squares fit.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Fit {
    pub coefficients: Vec<f64>,
    pub ridge: bool,
}

/// Least squares over rows `0..n`: `row(k, features)` fills the feature
/// vector and returns the target. Normal equations are accumulated in
/// fixed chunks and summed in order.
pub(crate) fn least_squares<F>(n: usize, dim: usize, exec: Execution, row: F) -> Fit
where
    F: Fn(usize, &mut [f64]) -> f64 + Send + Sync,
{
    let partials = exec.map_chunks(n, |range| {
        let mut ata = vec![0.0; dim * dim];
        let mut atb = vec![0.0; dim];
        let mut feat = vec![0.0; dim];
        for k in range {
            let y = row(k, &mut feat);
            for a in 0..dim {
                let fa = feat[a];
                atb[a] += fa * y;
                for b in a..dim {
                    ata[a * dim + b] += fa * feat[b];
                }
            }
        }
        (ata, atb)
    });
    let mut ata = vec![0.0; dim * dim];
    let mut atb = vec![0.0; dim];
    for (pa, pb) in partials {
        ata.iter_mut().zip(&pa).for_each(|(s, v)| *s += v);
        atb.iter_mut().zip(&pb).for_each(|(s, v)| *s += v);
    }
    let scale = 1.0 / n.max(1) as f64;
    let a = DMatrix::from_fn(dim, dim, |r, c| {
        let (lo, hi) = if r <= c { (r, c) } else { (c, r) };
        ata[lo * dim + hi] * scale
    });
    let b = DVector::from_iterator(dim, atb.iter().map(|v| v * scale));
    solve_normal(a, b)
}

fn solve_normal(a: DMatrix<f64>, b: DVector<f64>) -> Fit {
    let dim = a.nrows();
    let diag_max = (0..dim).map(|k| a[(k, k)]).fold(0.0f64, f64::max);
    if let Some(ch) = a.clone().cholesky() {
        let l = ch.l_dirty();
        let min_pivot = (0..dim).map(|k| l[(k, k)] * l[(k, k)]).fold(f64::INFINITY, f64::min);
        if min_pivot > 1e-12 * diag_max.max(f64::MIN_POSITIVE) {
            return Fit {
                coefficients: ch.solve(&b).iter().copied().collect(),
                ridge: false,
            };
        }
    }
    let ridged = a + DMatrix::identity(dim, dim) * 1e-8;
    let coefficients = match ridged.clone().cholesky() {
        Some(ch) => ch.solve(&b).iter().copied().collect(),
        None => ridged
            .svd(true, true)
            .solve(&b, 1e-14)
            .map(|x| x.iter().copied().collect())
            .unwrap_or_else(|_| vec![0.0; dim]),
    };
    Fit { coefficients, ridge: true }
}
