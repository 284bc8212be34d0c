//! Closed-form envelope `A e^{int_t^T a} + int_t^T k(s) e^{int_t^s a} ds`.

use crate::error::{Error, Result};
use crate::levy::TimeGrid;
use crate::quad::Integrator;

/// `terminal * exp(int_t^T a) + int_t^T source(s) exp(int_t^s a) ds` by
/// nested adaptive quadrature.
pub fn propagate<A, K>(a: &A, terminal: f64, source: K, t: f64, horizon: f64, rel_tol: f64) -> Result<f64>
where
    A: Fn(f64) -> f64 + ?Sized,
    K: Fn(f64) -> f64,
{
    if t > horizon {
        return Err(Error::domain(format!("time {t} beyond horizon {horizon}")));
    }
    if t == horizon {
        return Ok(terminal);
    }
    let quad = Integrator::with_rel_tol(rel_tol);
    let growth = |s: f64| -> Result<f64> { Ok(quad.integrate(|r| a(r), t, s)?.exp()) };
    let head = if terminal == 0.0 { 0.0 } else { terminal * growth(horizon)? };
    let inner_err = std::cell::RefCell::new(None);
    let tail = quad.integrate(
        |s| {
            let k = source(s);
            if k == 0.0 {
                return 0.0;
            }
            match growth(s) {
                Ok(g) => k * g,
                Err(e) => {
                    inner_err.borrow_mut().get_or_insert(e);
                    f64::NAN
                }
            }
        },
        t,
        horizon,
    );
    if let Some(e) = inner_err.into_inner() {
        return Err(e);
    }
    let v = head + tail?;
    if !v.is_finite() {
        return Err(Error::config("envelope integral is not finite"));
    }
    Ok(v)
}

/// `Y(t_i) = A_xi exp(int_{t_i}^T a) + int_{t_i}^T k_f(s) exp(int_{t_i}^s a) ds`
/// at every node, relative tolerance `1e-10`.
pub fn closed_form_linear<A, K>(a_xi: f64, a: A, k_f: K, grid: &TimeGrid) -> Result<Vec<f64>>
where
    A: Fn(f64) -> f64,
    K: Fn(f64) -> f64,
{
    let t_end = grid.horizon();
    grid.nodes()
        .iter()
        .map(|&t| propagate(&a, a_xi, &k_f, t, t_end, 1e-10))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn examples() {
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let y = closed_form_linear(2.5, |_| 0.0, |_| 0.0, &grid).unwrap();
        assert!(y.iter().all(|&v| v == 2.5));
        let y = closed_form_linear(2.0, |_| 0.0, |_| 1.0, &grid).unwrap();
        assert_relative_eq!(y[0], 3.0, max_relative = 1e-12);
        let y = closed_form_linear(1.0, |_| 1.0, |_| 0.0, &grid).unwrap();
        assert_relative_eq!(y[0], std::f64::consts::E, max_relative = 1e-12);
        assert_eq!(y[4], 1.0);
    }

    #[test]
    fn time_varying_coefficients() {
        // a(s) = s, k = 0: exp((T^2 - t^2) / 2)
        let grid = TimeGrid::uniform(2.0, 2).unwrap();
        let y = closed_form_linear(1.0, |s| s, |_| 0.0, &grid).unwrap();
        assert_relative_eq!(y[0], 2.0f64.exp(), max_relative = 1e-10);
        assert_relative_eq!(y[1], 1.5f64.exp(), max_relative = 1e-10);
        // a = 1, k = 1, A = 0: e^{T-t} - 1
        let y = closed_form_linear(0.0, |_| 1.0, |_| 1.0, &grid).unwrap();
        assert_relative_eq!(y[0], 2.0f64.exp() - 1.0, max_relative = 1e-10);
    }

    #[test]
    fn divergence_is_a_config_error() {
        let grid = TimeGrid::uniform(1.0, 2).unwrap();
        let r = closed_form_linear(1.0, |_| 0.0, |s: f64| 1.0 / (1.0 - s), &grid);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
