//! Finite differences and monotone cubic interpolation on a strictly
//! increasing (possibly nonuniform) grid.

/// Three-point first derivative at node `i`; one-sided at the ends.
/// Exact for quadratics. Needs at least three nodes.
pub fn first_difference(xs: &[f64], ys: &[f64], i: usize) -> f64 {
    let n = xs.len();
    debug_assert!(n >= 3 && ys.len() == n);
    if i == 0 {
        let (h0, h1) = (xs[1] - xs[0], xs[2] - xs[1]);
        -(2.0 * h0 + h1) / (h0 * (h0 + h1)) * ys[0] + (h0 + h1) / (h0 * h1) * ys[1]
            - h0 / (h1 * (h0 + h1)) * ys[2]
    } else if i == n - 1 {
        let (h0, h1) = (xs[n - 2] - xs[n - 3], xs[n - 1] - xs[n - 2]);
        h1 / (h0 * (h0 + h1)) * ys[n - 3] - (h0 + h1) / (h0 * h1) * ys[n - 2]
            + (2.0 * h1 + h0) / (h1 * (h0 + h1)) * ys[n - 1]
    } else {
        let (h0, h1) = (xs[i] - xs[i - 1], xs[i + 1] - xs[i]);
        -h1 / (h0 * (h0 + h1)) * ys[i - 1] + (h1 - h0) / (h0 * h1) * ys[i]
            + h0 / (h1 * (h0 + h1)) * ys[i + 1]
    }
}

/// Coefficients `(c_prev, c_mid, c_next)` of the three-point second
/// difference centred at interior node `i`.
pub fn second_difference_weights(xs: &[f64], i: usize) -> (f64, f64, f64) {
    let (h0, h1) = (xs[i] - xs[i - 1], xs[i + 1] - xs[i]);
    (
        2.0 / (h0 * (h0 + h1)),
        -2.0 / (h0 * h1),
        2.0 / (h1 * (h0 + h1)),
    )
}

/// Three-point second derivative at node `i`; the boundary nodes reuse the
/// stencil of their interior neighbour. Exact for quadratics.
pub fn second_difference(xs: &[f64], ys: &[f64], i: usize) -> f64 {
    let n = xs.len();
    let c = i.clamp(1, n - 2);
    let (a, b, d) = second_difference_weights(xs, c);
    a * ys[c - 1] + b * ys[c] + d * ys[c + 1]
}

/// Fritsch–Carlson monotone cubic Hermite interpolant. Evaluation outside
/// the grid is clipped to the end values.
#[derive(Debug, Clone)]
pub struct MonotoneCubic<'a> {
    xs: &'a [f64],
    ys: &'a [f64],
    slopes: Vec<f64>,
}

impl<'a> MonotoneCubic<'a> {
    pub fn new(xs: &'a [f64], ys: &'a [f64]) -> Self {
        let n = xs.len();
        assert!(n >= 2 && ys.len() == n, "interpolation needs >= 2 matching nodes");
        let delta: Vec<f64> = (0..n - 1)
            .map(|k| (ys[k + 1] - ys[k]) / (xs[k + 1] - xs[k]))
            .collect();
        let mut m = vec![0.0; n];
        if n == 2 {
            m[0] = delta[0];
            m[1] = delta[0];
        } else {
            for (i, mi) in m.iter_mut().enumerate() {
                let d = first_difference(xs, ys, i);
                let ok = if i == 0 {
                    d * delta[0] > 0.0
                } else if i == n - 1 {
                    d * delta[n - 2] > 0.0
                } else {
                    delta[i - 1] * delta[i] > 0.0 && d * delta[i] > 0.0
                };
                *mi = if ok { d } else { 0.0 };
            }
            for k in 0..n - 1 {
                if delta[k] == 0.0 {
                    m[k] = 0.0;
                    m[k + 1] = 0.0;
                    continue;
                }
                let a = m[k] / delta[k];
                let b = m[k + 1] / delta[k];
                let s = a * a + b * b;
                if s > 9.0 {
                    let tau = 3.0 / s.sqrt();
                    m[k] = tau * a * delta[k];
                    m[k + 1] = tau * b * delta[k];
                }
            }
        }
        MonotoneCubic { xs, ys, slopes: m }
    }

    pub fn lower(&self) -> f64 {
        self.xs[0]
    }

    pub fn upper(&self) -> f64 {
        self.xs[self.xs.len() - 1]
    }

    /// Value at `x`; `x` outside the grid is clipped to the nearest end.
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x <= self.xs[0] {
            return self.ys[0];
        }
        if x >= self.xs[n - 1] {
            return self.ys[n - 1];
        }
        let k = self.xs.partition_point(|&xk| xk <= x) - 1;
        let h = self.xs[k + 1] - self.xs[k];
        let t = (x - self.xs[k]) / h;
        let t2 = t * t;
        let t3 = t2 * t;
        (2.0 * t3 - 3.0 * t2 + 1.0) * self.ys[k]
            + (t3 - 2.0 * t2 + t) * h * self.slopes[k]
            + (-2.0 * t3 + 3.0 * t2) * self.ys[k + 1]
            + (t3 - t2) * h * self.slopes[k + 1]
    }

    /// True when `x` lies outside the grid span.
    pub fn clips(&self, x: f64) -> bool {
        x < self.lower() || x > self.upper()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn grid(n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn differences_exact_on_quadratics_nonuniform() {
        let xs = vec![-1.0, -0.7, -0.1, 0.3, 1.2, 2.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x * x - x + 2.0).collect();
        for i in 0..xs.len() {
            assert_abs_diff_eq!(first_difference(&xs, &ys, i), 6.0 * xs[i] - 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(second_difference(&xs, &ys, i), 6.0, epsilon = 1e-11);
        }
    }

    #[test]
    fn interpolation_reproduces_linear_and_square() {
        let xs = grid(41, -4.0, 4.0);
        let lin: Vec<f64> = xs.iter().map(|x| 2.0 * x - 1.0).collect();
        let sq: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let il = MonotoneCubic::new(&xs, &lin);
        let iq = MonotoneCubic::new(&xs, &sq);
        for k in 0..200 {
            let x = -3.9 + 7.8 * k as f64 / 199.0;
            assert_abs_diff_eq!(il.eval(x), 2.0 * x - 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(iq.eval(x), x * x, epsilon = 1e-12);
        }
        assert_eq!(il.eval(10.0), 7.0);
        assert!(il.clips(10.0) && !il.clips(0.0));
    }

    proptest! {
        #[test]
        fn monotone_data_gives_monotone_interpolant(
            steps in proptest::collection::vec(0.0f64..2.0, 3..20),
            probes in proptest::collection::vec(0.0f64..1.0, 2..30),
        ) {
            let xs: Vec<f64> = (0..=steps.len()).map(|i| i as f64).collect();
            let mut ys = vec![0.0];
            for s in &steps { ys.push(ys.last().unwrap() + s); }
            let ip = MonotoneCubic::new(&xs, &ys);
            let mut p: Vec<f64> = probes.iter().map(|u| u * steps.len() as f64).collect();
            p.sort_by(f64::total_cmp);
            for w in p.windows(2) {
                prop_assert!(ip.eval(w[1]) >= ip.eval(w[0]) - 1e-12);
            }
        }
    }
}
