//! Backward dynamic programming on a spatial lattice for Markov problems.

use statrs::distribution::{Discrete, Poisson};

use crate::error::{Error, Result};
use crate::generator::GeneratorSpec;
use crate::interp::{first_difference, MonotoneCubic};
use crate::levy::{Atom, TimeGrid};
use crate::par::Execution;
use crate::quad::NormalRule;
use crate::solver::{DiscreteSolution, ForwardSpec, Representation};

/// Settings of [`solve_markov_dp`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpSettings {
    pub gh_order: usize,
    /// Largest number of jumps per atom and step kept in the branching.
    pub max_jumps: u32,
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    /// Escape mass above which a warning is recorded.
    pub escape_threshold: f64,
    pub exec: Execution,
}

impl Default for DpSettings {
    fn default() -> Self {
        DpSettings {
            gh_order: 16,
            max_jumps: 2,
            inner_tol: 1e-10,
            inner_max_iter: 50,
            escape_threshold: 1e-3,
            exec: Execution::default(),
        }
    }
}

/// Jump configurations of one step with their renormalised weights.
struct Branching {
    counts: Vec<Vec<u32>>,
    weights: Vec<f64>,
    dropped: f64,
}

const BRANCH_PRUNE: f64 = 1e-14;

fn branching(atoms: &[Atom], dt: f64, max_jumps: u32) -> Branching {
    let mut counts = vec![Vec::new()];
    let mut weights = vec![1.0];
    let mut kept = 1.0;
    for a in atoms {
        let law = Poisson::new(a.intensity * dt).ok();
        let pmf: Vec<f64> = (0..=max_jumps as u64)
            .map(|n| law.as_ref().map_or(if n == 0 { 1.0 } else { 0.0 }, |l| l.pmf(n)))
            .collect();
        let total: f64 = pmf.iter().sum();
        kept *= total;
        let mut next_c = Vec::new();
        let mut next_w = Vec::new();
        for (c, w) in counts.iter().zip(&weights) {
            for (n, p) in pmf.iter().enumerate() {
                let wn = w * p / total;
                if wn > BRANCH_PRUNE {
                    let mut cn = c.clone();
                    cn.push(n as u32);
                    next_c.push(cn);
                    next_w.push(wn);
                }
            }
        }
        counts = next_c;
        weights = next_w;
    }
    let s: f64 = weights.iter().sum();
    let pruned = 1.0 - s;
    weights.iter_mut().for_each(|w| *w /= s);
    Branching {
        counts,
        weights,
        dropped: (1.0 - kept) + pruned,
    }
}

fn validate_lattice(lattice: &[f64]) -> Result<()> {
    if lattice.len() < 3 {
        return Err(Error::config("state lattice needs at least 3 nodes"));
    }
    if lattice.windows(2).any(|w| !(w[1] > w[0])) || lattice.iter().any(|v| !v.is_finite()) {
        return Err(Error::config("state lattice must be finite and strictly increasing"));
    }
    Ok(())
}

/// Solves `Y(t_i, v) = E[Y(t_{i+1}, Psi_{t_{i+1}}) | Psi_{t_i} = v] + dt f(v, t_i, Y, Z, G(U))`
/// backward on `lattice`, implicitly in `Y`.
///
/// The one-step expectation combines a Gauss–Hermite rule for the Brownian
/// part with Poisson branching over the atoms (at most `max_jumps` per atom,
/// renormalised). `Z` and `U` entering the driver are
/// `sigma(v) d/dv` and `c(v + beta) - c(v)` of the continuation values `c`;
/// the stored `Z`, `U` are the same operators applied to `Y(t_i, .)`.
/// Off-lattice points use monotone cubic interpolation clipped to the end
/// values.
pub fn solve_markov_dp<G>(
    forward: &ForwardSpec,
    spec: &GeneratorSpec,
    terminal_fn: G,
    atoms: &[Atom],
    lattice: &[f64],
    grid: &TimeGrid,
    settings: &DpSettings,
) -> Result<DiscreteSolution>
where
    G: Fn(f64) -> f64,
{
    validate_lattice(lattice)?;
    let rule = NormalRule::new(settings.gh_order);
    let exec = settings.exec;
    let m = lattice.len();
    let n_atoms = atoms.len();
    let steps = grid.steps();
    let mut sol = DiscreteSolution::zeros(
        grid.clone(),
        Representation::Lattice {
            states: lattice.to_vec(),
        },
        atoms.to_vec(),
    );
    let terminal: Vec<f64> = lattice.iter().map(|&v| terminal_fn(v)).collect();
    if terminal.iter().any(|v| !v.is_finite()) {
        return Err(Error::config("terminal function is not finite on the lattice"));
    }
    sol.y[steps * m..].copy_from_slice(&terminal);
    let sigmas: Vec<f64> = lattice.iter().map(|&v| (forward.sigma_coef)(v)).collect();
    let betas: Vec<f64> = lattice
        .iter()
        .flat_map(|&v| atoms.iter().map(move |a| (forward.beta)(v, a.mark)))
        .collect();
    let store_zu = |sol: &mut DiscreteSolution, i: usize| {
        let (z, u) = sensitivities(lattice, &sigmas, &betas, n_atoms, &sol.y[i * m..(i + 1) * m]);
        sol.z[i * m..(i + 1) * m].copy_from_slice(&z);
        sol.u[i * m * n_atoms..(i + 1) * m * n_atoms].copy_from_slice(&u);
    };
    store_zu(&mut sol, steps);

    let inner_lo = m / 4;
    let inner_hi = m - m / 4;
    let mut max_inner = 0;
    for i in (0..steps).rev() {
        let dt = grid.dt(i);
        let t = grid.nodes()[i];
        let br = branching(atoms, dt, settings.max_jumps);
        sol.diagnostics.jump_truncation_mass = sol.diagnostics.jump_truncation_mass.max(br.dropped);
        let next = &sol.y[(i + 1) * m..(i + 2) * m];
        let interp = MonotoneCubic::new(lattice, next);
        let sq = dt.sqrt();
        let cont_escape = exec.map(m, |k| {
            let v = lattice[k];
            let beta = &betas[k * n_atoms..(k + 1) * n_atoms];
            let comp: f64 = beta.iter().zip(atoms).map(|(b, a)| b * a.intensity).sum();
            let base = v + ((forward.b_coef)(v) - comp) * dt;
            let s = sigmas[k] * sq;
            let mut acc = 0.0;
            let mut escape = 0.0;
            for (counts, &wb) in br.counts.iter().zip(&br.weights) {
                let jump: f64 = counts.iter().zip(beta).map(|(&n, b)| n as f64 * b).sum();
                for (&zg, &wg) in rule.nodes.iter().zip(&rule.weights) {
                    let x = base + jump + s * zg;
                    if interp.clips(x) {
                        escape += wb * wg;
                    }
                    acc += wb * wg * interp.eval(x);
                }
            }
            (acc, escape)
        });
        let cont: Vec<f64> = cont_escape.iter().map(|c| c.0).collect();
        let esc = cont_escape[inner_lo..inner_hi].iter().map(|c| c.1).fold(0.0, f64::max);
        sol.diagnostics.lattice_escape_mass = sol.diagnostics.lattice_escape_mass.max(esc);
        let (zc, uc) = sensitivities(lattice, &sigmas, &betas, n_atoms, &cont);
        let solved = exec.map(m, |k| {
            let path = [lattice[k]];
            let u = &uc[k * n_atoms..(k + 1) * n_atoms];
            let map = |y: f64| cont[k] + dt * spec.driver(&path, t, y, zc[k], u, atoms);
            fixed_point(map, cont[k], settings).map_err(|iters| Error::Numerical {
                location: format!("time node {i} (t = {t}), state {k} (v = {})", lattice[k]),
                message: format!("implicit step did not converge in {iters} iterations"),
            })
        });
        let mut row = Vec::with_capacity(m);
        let mut worst = 0.0f64;
        for r in solved {
            let (y, iters, damped, res) = r?;
            row.push(y);
            max_inner = max_inner.max(iters);
            sol.diagnostics.damping_used |= damped;
            worst = worst.max(res);
        }
        sol.diagnostics.residuals.push(worst);
        sol.y[i * m..(i + 1) * m].copy_from_slice(&row);
        store_zu(&mut sol, i);
    }
    sol.diagnostics.residuals.reverse();
    sol.diagnostics.iterations = max_inner;
    sol.diagnostics.converged = true;
    if sol.diagnostics.lattice_escape_mass > settings.escape_threshold {
        sol.diagnostics.warnings.push(format!(
            "transition mass {:.3e} left the lattice from its inner half; widen the lattice",
            sol.diagnostics.lattice_escape_mass
        ));
    }
    if sol.diagnostics.jump_truncation_mass > 1e-6 {
        sol.diagnostics.warnings.push(format!(
            "jump branching dropped Poisson mass {:.3e} per step",
            sol.diagnostics.jump_truncation_mass
        ));
    }
    sol.validate()?;
    Ok(sol)
}

/// `(sigma(v) d/dv phi, phi(v + beta(v, x_j)) - phi(v))` on the lattice.
fn sensitivities(lattice: &[f64], sigmas: &[f64], betas: &[f64], n_atoms: usize, phi: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let z = (0..lattice.len())
        .map(|k| sigmas[k] * first_difference(lattice, phi, k))
        .collect();
    let mut u = vec![0.0; lattice.len() * n_atoms];
    if n_atoms > 0 {
        let interp = MonotoneCubic::new(lattice, phi);
        for (k, &v) in lattice.iter().enumerate() {
            for j in 0..n_atoms {
                u[k * n_atoms + j] = interp.eval(v + betas[k * n_atoms + j]) - phi[k];
            }
        }
    }
    (z, u)
}

/// Solves `y = map(y)`; damping 0.5 once the step size stops shrinking.
/// Returns `(y, iterations, damped, last step)` or the iteration count on
/// failure.
fn fixed_point<F: Fn(f64) -> f64>(map: F, start: f64, settings: &DpSettings) -> std::result::Result<(f64, usize, bool, f64), usize> {
    let mut y = start;
    let mut damped = false;
    let mut last_step = f64::INFINITY;
    for it in 1..=settings.inner_max_iter {
        let target = map(y);
        if !target.is_finite() {
            return Err(it);
        }
        let raw = target - y;
        if raw.abs() >= last_step && it > 1 {
            damped = true;
        }
        let next = if damped { y + 0.5 * raw } else { target };
        y = next;
        if raw.abs() <= settings.inner_tol * (1.0 + y.abs()) {
            return Ok((y, it, damped, raw.abs()));
        }
        last_step = raw.abs();
    }
    Err(settings.inner_max_iter)
}
