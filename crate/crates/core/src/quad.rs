//! Numerical integration: adaptive Gauss–Kronrod on intervals (with a map
//! for half-lines) and Gauss–Hermite rules for standard normal expectations.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];
// Gauss weights for XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

fn gk15<F: Fn(f64) -> f64 + ?Sized>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let dx = h * XGK[j];
        let s = f(c - dx) + f(c + dx);
        kron += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    (kron * h, ((kron - gauss) * h).abs())
}

/// Globally adaptive Gauss–Kronrod 7/15 integrator.
#[derive(Debug, Clone, Copy)]
pub struct Integrator {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_intervals: usize,
}

impl Default for Integrator {
    fn default() -> Self {
        Integrator {
            rel_tol: 1e-10,
            abs_tol: 1e-14,
            max_intervals: 2000,
        }
    }
}

impl Integrator {
    pub fn with_rel_tol(rel_tol: f64) -> Self {
        Integrator {
            rel_tol,
            ..Default::default()
        }
    }

    /// Integrates `f` over `[a, b]`; either bound may be infinite.
    ///
    /// Fails with a configuration error when the integrand produces
    /// non-finite values or the error estimate cannot be driven below the
    /// tolerance, which is how divergent integrals show up.
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F, a: f64, b: f64) -> Result<f64> {
        self.integrate_dyn(&f, a, b)
    }

    fn integrate_dyn(&self, f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> Result<f64> {
        if a.is_nan() || b.is_nan() {
            return Err(Error::config("integration bound is NaN"));
        }
        if a == b {
            return Ok(0.0);
        }
        if a > b {
            return self.integrate_dyn(f, b, a).map(|v| -v);
        }
        match (a.is_finite(), b.is_finite()) {
            (true, true) => self.adapt(&f, a, b),
            // x = a + t / (1 - t), t in [0, 1)
            (true, false) => self.adapt(
                &|t: f64| {
                    let s = 1.0 - t;
                    f(a + t / s) / (s * s)
                },
                0.0,
                1.0,
            ),
            (false, true) => self.adapt(
                &|t: f64| {
                    let s = 1.0 - t;
                    f(b - t / s) / (s * s)
                },
                0.0,
                1.0,
            ),
            (false, false) => Ok(self.integrate_dyn(f, f64::NEG_INFINITY, 0.0)?
                + self.integrate_dyn(f, 0.0, f64::INFINITY)?),
        }
    }

    fn adapt<F: Fn(f64) -> f64 + ?Sized>(&self, f: &F, a: f64, b: f64) -> Result<f64> {
        let (v, e) = gk15(f, a, b);
        let mut parts = vec![(a, b, v, e)];
        loop {
            let total: f64 = parts.iter().map(|p| p.2).sum();
            let err: f64 = parts.iter().map(|p| p.3).sum();
            if !total.is_finite() || !err.is_finite() {
                return Err(Error::config(format!(
                    "integrand not finite on [{a}, {b}] (non-integrable?)"
                )));
            }
            if err <= self.abs_tol.max(self.rel_tol * total.abs()) {
                return Ok(total);
            }
            if parts.len() >= self.max_intervals {
                return Err(Error::config(format!(
                    "quadrature did not converge on [{a}, {b}]: estimate {total:e}, error {err:e} (divergent integral?)"
                )));
            }
            let (worst, _) = parts
                .iter()
                .enumerate()
                .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
                .expect("non-empty");
            let (lo, hi, _, _) = parts.swap_remove(worst);
            let mid = 0.5 * (lo + hi);
            if !(mid > lo && mid < hi) {
                return Err(Error::config(format!(
                    "quadrature interval collapsed near {mid} (singular integrand?)"
                )));
            }
            let (v1, e1) = gk15(f, lo, mid);
            let (v2, e2) = gk15(f, mid, hi);
            parts.push((lo, mid, v1, e1));
            parts.push((mid, hi, v2, e2));
        }
    }
}

/// Gauss–Hermite rule for `E[h(Z)]`, `Z ~ N(0, 1)`; weights sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl NormalRule {
    /// Golub–Welsch on the Jacobi matrix of the probabilists' Hermite
    /// polynomials (off-diagonal `sqrt(k)`).
    pub fn new(order: usize) -> Self {
        assert!(order >= 1, "Gauss-Hermite order must be positive");
        let mut jacobi = DMatrix::<f64>::zeros(order, order);
        for k in 1..order {
            let off = (k as f64).sqrt();
            jacobi[(k - 1, k)] = off;
            jacobi[(k, k - 1)] = off;
        }
        let eig = SymmetricEigen::new(jacobi);
        let mut pairs: Vec<(f64, f64)> = (0..order)
            .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
            .collect();
        pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
        // symmetrise to remove eigensolver round-off
        let n = pairs.len();
        for i in 0..n / 2 {
            let x = 0.5 * (pairs[n - 1 - i].0 - pairs[i].0);
            let w = 0.5 * (pairs[n - 1 - i].1 + pairs[i].1);
            pairs[i] = (-x, w);
            pairs[n - 1 - i] = (x, w);
        }
        if n % 2 == 1 {
            pairs[n / 2].0 = 0.0;
        }
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        NormalRule {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1 / total).collect(),
        }
    }

    pub fn expect<F: Fn(f64) -> f64>(&self, h: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&z, &w)| w * h(z))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn integrates_polynomials_and_exponentials() {
        let q = Integrator::default();
        assert_relative_eq!(q.integrate(|x| x * x, 0.0, 3.0).unwrap(), 9.0, max_relative = 1e-13);
        assert_relative_eq!(
            q.integrate(f64::exp, 0.0, 1.0).unwrap(),
            std::f64::consts::E - 1.0,
            max_relative = 1e-13
        );
        assert_relative_eq!(q.integrate(|x| x * x, 3.0, 0.0).unwrap(), -9.0, max_relative = 1e-13);
    }

    #[test]
    fn half_line_and_divergence() {
        let q = Integrator::default();
        assert_relative_eq!(
            q.integrate(|x| x.powi(-2), 1.0, f64::INFINITY).unwrap(),
            1.0,
            max_relative = 1e-9
        );
        assert_relative_eq!(
            q.integrate(|x| (-x * x).exp(), f64::NEG_INFINITY, f64::INFINITY).unwrap(),
            std::f64::consts::PI.sqrt(),
            max_relative = 1e-9
        );
        assert!(q.integrate(|x| 1.0 / x, 1.0, f64::INFINITY).is_err());
        assert!(q.integrate(|x| x.powi(-2), 0.0, 1.0).is_err());
    }

    #[test]
    fn kink_is_resolved() {
        let q = Integrator::default();
        assert_relative_eq!(q.integrate(|x| x.abs(), -1.0, 2.0).unwrap(), 2.5, max_relative = 1e-10);
    }

    #[test]
    fn hermite_rule_moments() {
        let rule = NormalRule::new(16);
        assert_relative_eq!(rule.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-14);
        assert!(rule.expect(|z| z).abs() < 1e-13);
        assert_relative_eq!(rule.expect(|z| z * z), 1.0, epsilon = 1e-12);
        assert_relative_eq!(rule.expect(|z| z.powi(4)), 3.0, epsilon = 1e-11);
        assert_relative_eq!(rule.expect(|z| z.powi(30)), 6190283353629375.0, max_relative = 1e-9);
        // E cos Z = exp(-1/2)
        assert_relative_eq!(rule.expect(f64::cos), (-0.5f64).exp(), epsilon = 1e-13);
    }
}
