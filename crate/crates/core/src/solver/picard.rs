//! Picard iteration with least-squares regression on a path bundle.

use crate::error::{Error, Result};
use crate::generator::{BoundCertificate, GeneratorSpec, TerminalSpec};
use crate::levy::{LevyTriplet, PathBundle};
use crate::par::{pairwise_sum, Execution};
use crate::solver::regression::{least_squares, RegressionBasis, Standardizer};
use crate::solver::{DiscreteSolution, Representation};

/// Settings of [`solve_picard_regression`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardSettings {
    pub basis: RegressionBasis,
    /// Stop when successive `Y` iterates differ by less than this in the
    /// empirical `L_2(paths x time)` norm.
    pub tol: f64,
    pub max_iter: usize,
    pub exec: Execution,
}

impl Default for PicardSettings {
    fn default() -> Self {
        PicardSettings {
            basis: RegressionBasis::default(),
            tol: 1e-6,
            max_iter: 50,
            exec: Execution::default(),
        }
    }
}

/// Solves the BSDE by Picard iteration on `bundle`.
///
/// Each sweep evaluates the driver on the previous iterate, regresses
/// `xi + sum_{k >= i} f_k dt_k` on the basis at `X_{t_i}` for `Y`, then
/// regresses `Y_{i+1}` jointly on `phi(X_i)`, `phi(X_i) dW_i` and
/// `phi(X_i) dN~_{ij}` whose coefficients give `Z_i` and `U_i(x_j)`.
/// Reaching `max_iter` returns the last iterate with `converged = false`.
pub fn solve_picard_regression(
    model: &LevyTriplet,
    spec: &GeneratorSpec,
    terminal: &TerminalSpec,
    bundle: &PathBundle,
    settings: &PicardSettings,
) -> Result<DiscreteSolution> {
    if bundle.model() != model {
        return Err(Error::config("path bundle was sampled from a different model"));
    }
    check_settings(settings)?;
    let grid = bundle.grid();
    let atoms = model.atoms();
    let xi: Vec<f64> = settings.exec.map(bundle.n_paths(), |p| (terminal.xi)(bundle.path(p)));
    let nodes = grid.nodes();
    picard_core(bundle, &xi, 0, settings, None, |p, i, y, z, u| {
        spec.driver(&bundle.path(p)[..=i], nodes[i], y, z, u, atoms)
    })
}

/// Per-node caps on the regression estimates of `Y`, `Z` and `U`.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateCaps {
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    /// Node-major, one entry per atom.
    pub u: Vec<f64>,
}

impl EstimateCaps {
    /// Caps at the envelopes of `cert` on the nodes of `bundle`.
    pub fn from_certificate(cert: &BoundCertificate, bundle: &PathBundle) -> Result<Self> {
        let nodes = bundle.grid().nodes();
        let atoms = bundle.model().atoms();
        let y = nodes.iter().map(|&t| cert.y_envelope(t)).collect::<Result<Vec<_>>>()?;
        let z = nodes.iter().map(|&t| cert.z_envelope(t)).collect::<Result<Vec<_>>>()?;
        let mut u = Vec::with_capacity(nodes.len() * atoms.len());
        for &t in nodes {
            for a in atoms {
                u.push(cert.u_bound(t, a.mark)?);
            }
        }
        Ok(EstimateCaps { y, z, u })
    }
}

/// [`solve_picard_regression`] with every regression estimate clipped to
/// the envelopes of `cert`. A polynomial fit can overshoot known bounds on
/// paths far in the tails; clipping removes that without moving estimates
/// that already respect the bounds.
pub fn solve_picard_truncated(
    model: &LevyTriplet,
    spec: &GeneratorSpec,
    terminal: &TerminalSpec,
    bundle: &PathBundle,
    settings: &PicardSettings,
    cert: &BoundCertificate,
) -> Result<DiscreteSolution> {
    if bundle.model() != model {
        return Err(Error::config("path bundle was sampled from a different model"));
    }
    check_settings(settings)?;
    let caps = EstimateCaps::from_certificate(cert, bundle)?;
    let atoms = model.atoms();
    let xi: Vec<f64> = settings.exec.map(bundle.n_paths(), |p| (terminal.xi)(bundle.path(p)));
    let nodes = bundle.grid().nodes();
    picard_core(bundle, &xi, 0, settings, Some(&caps), |p, i, y, z, u| {
        spec.driver(&bundle.path(p)[..=i], nodes[i], y, z, u, atoms)
    })
}

pub(crate) fn check_settings(settings: &PicardSettings) -> Result<()> {
    if !(settings.tol > 0.0) {
        return Err(Error::config("Picard tolerance must be positive"));
    }
    if settings.max_iter == 0 {
        return Err(Error::config("max_iter must be at least 1"));
    }
    if settings.basis.degree > 8 {
        return Err(Error::config("regression degree above 8 is not supported"));
    }
    Ok(())
}

/// Generic Picard loop for a driver `(path, node, y, z, u) -> f` with
/// terminal values `terminal[p]`, solved on nodes `start..=N`; earlier nodes
/// stay zero.
pub(crate) fn picard_core<D>(
    bundle: &PathBundle,
    terminal: &[f64],
    start: usize,
    settings: &PicardSettings,
    caps: Option<&EstimateCaps>,
    driver: D,
) -> Result<DiscreteSolution>
where
    D: Fn(usize, usize, f64, f64, &[f64]) -> f64 + Send + Sync,
{
    let grid = bundle.grid().clone();
    let np = bundle.n_paths();
    let steps = grid.steps();
    let n_atoms = bundle.n_atoms();
    let exec = settings.exec;
    let basis = settings.basis;
    let brownian = bundle.model().sigma() > 0.0;
    let mut sol = DiscreteSolution::zeros(
        grid.clone(),
        Representation::Paths {
            n_paths: np,
            seed: bundle.seed(),
        },
        bundle.model().atoms().to_vec(),
    );
    sol.y[steps * np..].copy_from_slice(terminal);
    let scalers: Vec<Standardizer> = (0..steps)
        .map(|i| Standardizer::fit((0..np).map(move |p| bundle.value(p, i))))
        .collect();

    let mut fvals = vec![0.0; steps * np];
    let mut running = vec![0.0; np];
    let active_nodes = (steps + 1 - start) as f64;
    for iter in 1..=settings.max_iter {
        {
            let (y, z, u) = (&sol.y, &sol.z, &sol.u);
            exec.fill(&mut fvals[start * np..], |idx| {
                let (i, p) = (start + idx / np, idx % np);
                let at = i * np + p;
                driver(p, i, y[at], z[at], &u[at * n_atoms..(at + 1) * n_atoms])
            });
        }
        if let Some(bad) = fvals.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                location: format!("node {}, path {}", bad / np, bad % np),
                message: "driver returned a non-finite value".into(),
            });
        }
        running.copy_from_slice(terminal);
        let mut diff_partials = Vec::with_capacity(steps);
        let mut ridge = false;
        for i in (start..steps).rev() {
            let dt = grid.dt(i);
            for (s, f) in running.iter_mut().zip(&fvals[i * np..(i + 1) * np]) {
                *s += f * dt;
            }
            let st = scalers[i];
            let w = st.width(&basis);
            let fit = least_squares(np, w, exec, |p, feat| {
                st.features(&basis, bundle.value(p, i), feat);
                running[p]
            });
            ridge |= fit.ridge;
            let cap = caps.map_or(f64::INFINITY, |c| c.y[i]);
            let pred = exec.map(np, |p| {
                let mut feat = [0.0; 9];
                st.features(&basis, bundle.value(p, i), &mut feat);
                dot(&feat[..w], &fit.coefficients).clamp(-cap, cap)
            });
            let slot = &mut sol.y[i * np..(i + 1) * np];
            let d2: Vec<f64> = slot.iter().zip(&pred).map(|(a, b)| (a - b) * (a - b)).collect();
            diff_partials.push(pairwise_sum(&d2));
            slot.copy_from_slice(&pred);
        }
        ridge |= martingale_step(bundle, &scalers, &basis, start, brownian, exec, caps, &mut sol);
        sol.diagnostics.ridge_fallback |= ridge;
        let residual = (diff_partials.iter().sum::<f64>() / (np as f64 * active_nodes)).sqrt();
        sol.diagnostics.residuals.push(residual);
        sol.diagnostics.iterations = iter;
        if residual < settings.tol {
            sol.diagnostics.converged = true;
            break;
        }
    }
    if sol.diagnostics.ridge_fallback {
        sol.diagnostics
            .warnings
            .push("rank-deficient regression; ridge-regularised solve used".into());
    }
    if !sol.diagnostics.converged {
        sol.diagnostics.warnings.push(format!(
            "Picard iteration stopped after {} sweeps without reaching tolerance {}",
            settings.max_iter, settings.tol
        ));
    }
    sol.validate()?;
    Ok(sol)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Joint regression of `Y_{i+1}` giving `Z_i` and `U_i`. Returns the ridge flag.
fn martingale_step(
    bundle: &PathBundle,
    scalers: &[Standardizer],
    basis: &RegressionBasis,
    start: usize,
    brownian: bool,
    exec: Execution,
    caps: Option<&EstimateCaps>,
    sol: &mut DiscreteSolution,
) -> bool {
    let np = bundle.n_paths();
    let n_atoms = bundle.n_atoms();
    let steps = bundle.grid().steps();
    let mut ridge = false;
    if !brownian && n_atoms == 0 {
        return false;
    }
    for i in start..steps {
        let st = scalers[i];
        let w = st.width(basis);
        let blocks = 1 + usize::from(brownian) + n_atoms;
        let dim = w * blocks;
        let next = &sol.y[(i + 1) * np..(i + 2) * np];
        let fill = |p: usize, feat: &mut [f64]| {
            st.features(basis, bundle.value(p, i), &mut feat[..w]);
            let (head, rest) = feat.split_at_mut(w);
            let mut off = 0;
            if brownian {
                let dw = bundle.brownian_increment(p, i);
                for d in 0..w {
                    rest[d] = head[d] * dw;
                }
                off = w;
            }
            for j in 0..n_atoms {
                let dn = bundle.compensated_count(p, i, j);
                for d in 0..w {
                    rest[off + j * w + d] = head[d] * dn;
                }
            }
        };
        let fit = least_squares(np, dim, exec, |p, feat| {
            fill(p, feat);
            next[p]
        });
        ridge |= fit.ridge;
        let c = &fit.coefficients;
        let mut zrow = vec![0.0; np];
        let mut urow = vec![0.0; np * n_atoms];
        exec.fill(&mut zrow, |p| {
            if !brownian {
                return 0.0;
            }
            let mut feat = [0.0; 9];
            st.features(basis, bundle.value(p, i), &mut feat);
            let cap = caps.map_or(f64::INFINITY, |c| c.z[i]);
            dot(&feat[..w], &c[w..2 * w]).clamp(-cap, cap)
        });
        let off = if brownian { 2 * w } else { w };
        exec.fill(&mut urow, |idx| {
            let (p, j) = (idx / n_atoms, idx % n_atoms);
            let mut feat = [0.0; 9];
            st.features(basis, bundle.value(p, i), &mut feat);
            let cap = caps.map_or(f64::INFINITY, |c| c.u[i * n_atoms + j]);
            dot(&feat[..w], &c[off + j * w..off + (j + 1) * w]).clamp(-cap, cap)
        });
        sol.z[i * np..(i + 1) * np].copy_from_slice(&zrow);
        sol.u[i * np * n_atoms..(i + 1) * np * n_atoms].copy_from_slice(&urow);
    }
    ridge
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::families;
    use crate::levy::{sample_paths, Atom, TimeGrid};
    use approx::assert_abs_diff_eq;

    fn rms_from(v: &[f64], target: f64) -> f64 {
        (v.iter().map(|x| (x - target).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
    }

    fn brownian_bundle(n: usize) -> (LevyTriplet, PathBundle) {
        let model = LevyTriplet::brownian(1.0).unwrap();
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let b = sample_paths(&model, &grid, n, 7).unwrap();
        (model, b)
    }

    #[test]
    fn constant_terminal_after_one_sweep() {
        let (model, bundle) = brownian_bundle(2000);
        let spec = families::constant(0.0);
        let settings = PicardSettings {
            max_iter: 1,
            ..Default::default()
        };
        let sol = solve_picard_regression(&model, &spec, &TerminalSpec::constant(1.5), &bundle, &settings).unwrap();
        assert!(sol.y.iter().all(|&y| (y - 1.5).abs() < 1e-12));
        assert!(sol.z.iter().all(|&z| z.abs() < 1e-12));
        let sol = solve_picard_regression(&model, &spec, &TerminalSpec::constant(1.5), &bundle, &PicardSettings::default()).unwrap();
        assert!(sol.diagnostics.converged);
        assert_eq!(sol.diagnostics.iterations, 2);
    }

    #[test]
    fn martingale_terminal_value() {
        let (model, bundle) = brownian_bundle(5000);
        let sol = solve_picard_regression(
            &model,
            &families::constant(0.0),
            &TerminalSpec::terminal_value(1.0),
            &bundle,
            &PicardSettings::default(),
        )
        .unwrap();
        for i in 0..bundle.grid().len() {
            let rms = (0..5000).map(|p| (sol.y_at(i, p) - bundle.value(p, i)).powi(2)).sum::<f64>() / 5000.0;
            assert!(rms.sqrt() < 0.05, "node {i}: {}", rms.sqrt());
        }
        assert_abs_diff_eq!(rms_from(&sol.z, 1.0), 0.0, epsilon = 0.05);
    }

    #[test]
    fn pure_jump_u_component() {
        let model = LevyTriplet::new(0.0, 0.0, vec![Atom::new(1.0, 2.0)]).unwrap();
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let bundle = sample_paths(&model, &grid, 4000, 3).unwrap();
        let sol = solve_picard_regression(
            &model,
            &families::constant(0.0),
            &TerminalSpec::terminal_value(0.0),
            &bundle,
            &PicardSettings::default(),
        )
        .unwrap();
        assert_abs_diff_eq!(rms_from(&sol.u, 1.0), 0.0, epsilon = 0.05);
        assert!(sol.z.iter().all(|&z| z == 0.0));
    }

    #[test]
    fn contraction_residuals_decrease() {
        let (model, bundle) = brownian_bundle(2000);
        let spec = families::linear(0.8, 0.3, 0.0, 0.1);
        let term = TerminalSpec::of_terminal_state(
            "tanh",
            std::sync::Arc::new(f64::tanh),
            std::sync::Arc::new(|x: f64| 1.0 - x.tanh().powi(2)),
            1.0,
            1.0,
            1.0,
        );
        let sol = solve_picard_regression(&model, &spec, &term, &bundle, &PicardSettings::default()).unwrap();
        assert!(sol.diagnostics.converged);
        let r = &sol.diagnostics.residuals;
        for w in r.windows(2).skip(1) {
            assert!(w[1] < w[0], "{r:?}");
        }
    }

    #[test]
    fn serial_matches_parallel() {
        let (model, bundle) = brownian_bundle(3000);
        let spec = families::subquadratic(0.5, 0.0, 0.0);
        let term = TerminalSpec::of_terminal_state("sin", std::sync::Arc::new(f64::sin), std::sync::Arc::new(f64::cos), 1.0, 1.0, 1.0);
        let run = |exec| {
            solve_picard_regression(&model, &spec, &term, &bundle, &PicardSettings { exec, ..Default::default() }).unwrap()
        };
        assert_eq!(run(Execution::Serial), run(Execution::Parallel));
    }

    #[test]
    fn truncated_estimates_respect_caps() {
        let model = LevyTriplet::new(0.0, 0.5, vec![Atom::new(0.5, 1.0)]).unwrap();
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let bundle = sample_paths(&model, &grid, 3000, 5).unwrap();
        let spec = families::linear(0.5, 0.1, 0.2, 0.0);
        let term = TerminalSpec::of_terminal_state(
            "tanh(3x)",
            std::sync::Arc::new(|x: f64| (3.0 * x).tanh()),
            std::sync::Arc::new(|x: f64| 3.0 * (1.0 - (3.0 * x).tanh().powi(2))),
            1.0,
            3.0,
            0.5,
        );
        let cert = crate::generator::compute_bounds(&spec, &term, model.atoms(), 1.0).unwrap();
        let caps = EstimateCaps::from_certificate(&cert, &bundle).unwrap();
        let s = PicardSettings::default();
        let sol = solve_picard_truncated(&model, &spec, &term, &bundle, &s, &cert).unwrap();
        let np = bundle.n_paths();
        for i in 0..grid.steps() {
            for p in 0..np {
                assert!(sol.y_at(i, p).abs() <= caps.y[i]);
                assert!(sol.z_at(i, p).abs() <= caps.z[i]);
                assert!(sol.u_at(i, p, 0).abs() <= caps.u[i]);
            }
        }
        let loose = BoundCertificate::explicit(1e6, 1e6, 1e6, 1.0, &spec.rho, model.atoms()).unwrap();
        let plain = solve_picard_regression(&model, &spec, &term, &bundle, &s).unwrap();
        assert_eq!(solve_picard_truncated(&model, &spec, &term, &bundle, &s, &loose).unwrap(), plain);
    }
}
