//! Checks of solver output against the a-priori bounds, the comparison
//! ordering and the sandwich envelopes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{BoundCertificate, GeneratorSpec, TerminalSpec};
use crate::levy::TimeGrid;
use crate::solver::{closed_form_linear, DiscreteSolution, Representation};

/// Where a check attained its worst value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub node: usize,
    pub t: f64,
    /// State or path index.
    pub index: usize,
    pub atom: Option<usize>,
}

/// One named check. `worst` is the largest excursion beyond the allowed
/// bound (`<= 0` when the check passes) or, for comparisons, the smallest gap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check: String,
    pub ok: bool,
    pub worst: f64,
    pub location: Option<Location>,
}

/// Result of [`check_bounds`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub y_ok: bool,
    pub z_ok: bool,
    pub u_ok: bool,
    pub checks: Vec<CheckReport>,
}

impl BoundsReport {
    pub fn ok(&self) -> bool {
        self.y_ok && self.z_ok && self.u_ok
    }
}

/// `c (max dt + lattice spacing)`.
pub fn default_slack(sol: &DiscreteSolution, c: f64) -> f64 {
    let spacing = match &sol.representation {
        Representation::Lattice { states } => states.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max),
        Representation::Paths { .. } => 0.0,
    };
    c * (sol.grid.max_dt() + spacing)
}

struct Worst {
    value: f64,
    location: Option<Location>,
}

impl Worst {
    fn new() -> Self {
        Worst {
            value: f64::NEG_INFINITY,
            location: None,
        }
    }

    fn offer(&mut self, value: f64, location: Location) {
        if value > self.value || self.location.is_none() {
            self.value = value;
            self.location = Some(location);
        }
    }

    fn report(self, check: &str) -> CheckReport {
        let worst = if self.location.is_none() { 0.0 } else { self.value };
        CheckReport {
            check: check.into(),
            ok: worst <= 0.0,
            worst,
            location: self.location,
        }
    }
}

fn check_horizon(sol: &DiscreteSolution, horizon: f64) -> Result<()> {
    if (sol.grid.horizon() - horizon).abs() > 1e-12 * horizon.max(1.0) {
        return Err(Error::config(format!(
            "solution horizon {} does not match certificate horizon {horizon}",
            sol.grid.horizon()
        )));
    }
    Ok(())
}

/// Checks `|Y| <= y_env + slack`, `|Z| <= z_env + slack` and
/// `|U(., x_j)| <= min(u_env(., x_j), 2R - 2) + slack` at every stored point.
pub fn check_bounds(sol: &DiscreteSolution, cert: &BoundCertificate, slack: f64) -> Result<BoundsReport> {
    check_horizon(sol, cert.horizon)?;
    sol.validate()?;
    let w = sol.width();
    let nodes = sol.grid.nodes();
    let mut wy = Worst::new();
    let mut wz = Worst::new();
    let mut wu = Worst::new();
    for (i, &t) in nodes.iter().enumerate() {
        let ye = cert.y_envelope(t)? + slack;
        for k in 0..w {
            wy.offer(sol.y_at(i, k).abs() - ye, loc(i, t, k, None));
        }
        if i >= sol.zu_nodes {
            continue;
        }
        let ze = cert.z_envelope(t)? + slack;
        for k in 0..w {
            wz.offer(sol.z_at(i, k).abs() - ze, loc(i, t, k, None));
        }
        for (j, atom) in sol.atoms.iter().enumerate() {
            let ue = cert.u_bound(t, atom.mark)? + slack;
            for k in 0..w {
                wu.offer(sol.u_at(i, k, j).abs() - ue, loc(i, t, k, Some(j)));
            }
        }
    }
    let checks = vec![wy.report("y_bound"), wz.report("z_bound"), wu.report("u_bound")];
    Ok(BoundsReport {
        y_ok: checks[0].ok,
        z_ok: checks[1].ok,
        u_ok: checks[2].ok,
        checks,
    })
}

fn loc(node: usize, t: f64, index: usize, atom: Option<usize>) -> Location {
    Location { node, t, index, atom }
}

/// Checks `Y <= Y' + tol` at every stored point. `worst` is the smallest
/// gap `Y' - Y`.
pub fn check_comparison(sol: &DiscreteSolution, sol_prime: &DiscreteSolution, tol: f64) -> Result<CheckReport> {
    if !sol.same_discretization(sol_prime) {
        return Err(Error::config("comparison needs identical grids and lattices or path bundles"));
    }
    let w = sol.width();
    let nodes = sol.grid.nodes();
    let mut worst = f64::INFINITY;
    let mut at = None;
    for (i, &t) in nodes.iter().enumerate() {
        for k in 0..w {
            let gap = sol_prime.y_at(i, k) - sol.y_at(i, k);
            if gap < worst {
                worst = gap;
                at = Some(loc(i, t, k, None));
            }
        }
    }
    Ok(CheckReport {
        check: "comparison".into(),
        ok: worst >= -tol,
        worst,
        location: at,
    })
}

/// `k` standard errors of the path-wise difference `Y' - Y`, maximised
/// over nodes; zero for lattice solutions.
pub fn monte_carlo_tolerance(sol: &DiscreteSolution, sol_prime: &DiscreteSolution, k: f64) -> f64 {
    if matches!(sol.representation, Representation::Lattice { .. }) {
        return 0.0;
    }
    let w = sol.width() as f64;
    (0..sol.grid.len())
        .map(|i| {
            let d: Vec<f64> = sol_prime.y_slice(i).iter().zip(sol.y_slice(i)).map(|(a, b)| a - b).collect();
            let mean = d.iter().sum::<f64>() / w;
            let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (w - 1.0).max(1.0);
            k * (var / w).sqrt()
        })
        .fold(0.0, f64::max)
}

/// `(upper, lower)` with `upper(t) = A_xi e^{int_t^T a} + int_t^T k_f(s) e^{int_t^s a} ds`
/// and `lower = -upper`.
pub fn sandwich_envelopes(
    spec: &GeneratorSpec,
    terminal: &TerminalSpec,
    cert: &BoundCertificate,
    grid: &TimeGrid,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if (grid.horizon() - cert.horizon).abs() > 1e-12 * cert.horizon.max(1.0) {
        return Err(Error::config("grid horizon does not match the certificate"));
    }
    let upper = closed_form_linear(terminal.a_xi, |s| (spec.a)(s), |s| (spec.k_f)(s), grid)?;
    let lower = upper.iter().map(|v| -v).collect();
    Ok((upper, lower))
}

/// Checks `lower(t_i) - tol <= Y(t_i, .) <= upper(t_i) + tol`.
pub fn check_sandwich(sol: &DiscreteSolution, upper: &[f64], lower: &[f64], tol: f64) -> Result<CheckReport> {
    if upper.len() != sol.grid.len() || lower.len() != sol.grid.len() {
        return Err(Error::config("envelope length does not match the solution grid"));
    }
    let mut worst = Worst::new();
    for (i, &t) in sol.grid.nodes().iter().enumerate() {
        for k in 0..sol.width() {
            let y = sol.y_at(i, k);
            worst.offer((y - upper[i]).max(lower[i] - y) - tol, loc(i, t, k, None));
        }
    }
    Ok(worst.report("sandwich"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{compute_bounds, families};
    use crate::levy::Atom;
    use crate::solver::{solve_markov_dp, DpSettings, ForwardSpec};
    use approx::assert_abs_diff_eq;

    fn lattice() -> Vec<f64> {
        (0..41).map(|k| -2.0 + 0.1 * k as f64).collect()
    }

    fn solve(spec: &GeneratorSpec, xi: f64, steps: usize) -> DiscreteSolution {
        let grid = TimeGrid::uniform(1.0, steps).unwrap();
        solve_markov_dp(&ForwardSpec::brownian(1.0), spec, |_| xi, &[], &lattice(), &grid, &DpSettings::default()).unwrap()
    }

    #[test]
    fn envelope_problem_is_within_bounds() {
        let spec = families::envelope(1.0, 0.0);
        let term = TerminalSpec::constant(1.0);
        let cert = compute_bounds(&spec, &term, &[], 1.0).unwrap();
        let sol = solve(&spec, 1.0, 200);
        let r = check_bounds(&sol, &cert, default_slack(&sol, 10.0)).unwrap();
        assert!(r.ok(), "{r:?}");
        // the envelope is attained up to the time step
        assert_abs_diff_eq!(sol.y_at(0, 20), cert.y_envelope(0.0).unwrap(), epsilon = 10.0 * 0.005);
    }

    #[test]
    fn zero_problem_and_corruption() {
        let spec = families::constant(0.0);
        let term = TerminalSpec::constant(0.0);
        let cert = compute_bounds(&spec, &term, &[Atom::new(1.0, 1.0)], 1.0).unwrap();
        let sol = solve(&spec, 0.0, 10);
        assert!(check_bounds(&sol, &cert, 0.0).unwrap().ok());

        let spec = families::envelope(1.0, 0.0);
        let term = TerminalSpec::constant(1.0);
        let cert = compute_bounds(&spec, &term, &[], 1.0).unwrap();
        let mut bad = solve(&spec, 1.0, 50);
        bad.y.iter_mut().for_each(|y| *y *= 10.0);
        let r = check_bounds(&bad, &cert, default_slack(&bad, 10.0)).unwrap();
        assert!(!r.y_ok);
        let at = r.checks[0].location.unwrap();
        assert_eq!(at.node, 0);
    }

    #[test]
    fn horizon_mismatch_is_rejected() {
        let spec = families::constant(0.0);
        let cert = compute_bounds(&spec, &TerminalSpec::constant(0.0), &[], 2.0).unwrap();
        let sol = solve(&spec, 0.0, 4);
        assert!(matches!(check_bounds(&sol, &cert, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn comparison_examples() {
        let zero = families::constant(0.0);
        let a = solve(&zero, 0.0, 10);
        let b = solve(&zero, 1.0, 10);
        let r = check_comparison(&a, &b, 0.0).unwrap();
        assert!(r.ok);
        assert_abs_diff_eq!(r.worst, 1.0, epsilon = 1e-12);
        let back = check_comparison(&b, &a, 0.0).unwrap();
        assert!(!back.ok);

        let lin = families::linear(0.5, 0.0, 0.0, 0.0);
        let a = solve(&lin, 0.0, 400);
        let b = solve(&lin, 1.0, 400);
        let r = check_comparison(&a, &b, 1e-8).unwrap();
        assert!(r.ok);
        assert_abs_diff_eq!(b.y_at(0, 20) - a.y_at(0, 20), 0.5f64.exp(), epsilon = 1e-2);

        let same = check_comparison(&a, &a, 0.0).unwrap();
        assert!(same.ok && same.worst == 0.0);

        let other = solve(&zero, 0.0, 11);
        assert!(check_comparison(&a, &other, 0.0).is_err());
    }

    #[test]
    fn sandwich_examples() {
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let spec = families::constant(0.0);
        let term = TerminalSpec::constant(0.0);
        let cert = compute_bounds(&spec, &term, &[], 1.0).unwrap();
        let (up, lo) = sandwich_envelopes(&spec, &term, &cert, &grid).unwrap();
        assert!(up.iter().chain(&lo).all(|&v| v == 0.0));

        let spec = families::linear(0.5, 0.2, 0.0, 0.3);
        let term = TerminalSpec::of_terminal_state(
            "tanh",
            std::sync::Arc::new(f64::tanh),
            std::sync::Arc::new(|x: f64| 1.0 - x.tanh().powi(2)),
            1.0,
            1.0,
            1.0,
        );
        let cert = compute_bounds(&spec, &term, &[], 1.0).unwrap();
        let (up, lo) = sandwich_envelopes(&spec, &term, &cert, &grid).unwrap();
        for (u, l) in up.iter().zip(&lo) {
            assert_eq!(*u, -*l);
        }
        let sol = solve_markov_dp(
            &ForwardSpec::brownian(1.0),
            &spec,
            f64::tanh,
            &[],
            &lattice(),
            &grid,
            &DpSettings::default(),
        )
        .unwrap();
        assert!(check_sandwich(&sol, &up, &lo, default_slack(&sol, 10.0)).unwrap().ok);
    }
}
