//! Finite differences for the semilinear partial differential-integral
//! equation `-u_t - (A + K) u - f(v, t, u, sigma u_v, B u) = 0`,
//! `u(T, .) = g`, and comparison with the lattice FBSDE solver.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::GeneratorSpec;
use crate::interp::{first_difference, second_difference, MonotoneCubic};
use crate::levy::{kappa, Atom, TimeGrid};
use crate::par::Execution;
use crate::solver::{DiscreteSolution, ForwardSpec, Representation};

/// Solution values `u(t_i, v_k)` stored at `values[i * M + k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdieGrid {
    pub space_nodes: Vec<f64>,
    pub grid: TimeGrid,
    pub values: Vec<f64>,
    pub diagnostics: PdieDiagnostics,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PdieDiagnostics {
    /// Jump targets `v + beta(v, x_j)` outside the space grid.
    pub clipped_targets: usize,
    /// Largest `sum_j lambda_j + rate` met by the stability guard.
    pub max_explicit_rate: f64,
    pub warnings: Vec<String>,
}

impl PdieGrid {
    pub fn width(&self) -> usize {
        self.space_nodes.len()
    }

    pub fn value(&self, i: usize, k: usize) -> f64 {
        self.values[i * self.width() + k]
    }

    pub fn slice(&self, i: usize) -> &[f64] {
        let m = self.width();
        &self.values[i * m..(i + 1) * m]
    }
}

fn validate_space(space: &[f64]) -> Result<()> {
    if space.len() < 3 {
        return Err(Error::config("space grid needs at least 3 nodes"));
    }
    if space.windows(2).any(|w| !(w[1] > w[0])) || space.iter().any(|v| !v.is_finite()) {
        return Err(Error::config("space grid must be finite and strictly increasing"));
    }
    Ok(())
}

/// `sigma^2/2 phi'' + b phi'`, one-sided at the ends.
pub fn apply_a(phi: &[f64], space: &[f64], forward: &ForwardSpec) -> Vec<f64> {
    (0..space.len())
        .map(|k| {
            let v = space[k];
            let s = (forward.sigma_coef)(v);
            0.5 * s * s * second_difference(space, phi, k) + (forward.b_coef)(v) * first_difference(space, phi, k)
        })
        .collect()
}

/// `sum_j [phi(v + beta) - phi(v) - beta phi'(v)] lambda_j`.
pub fn apply_k(phi: &[f64], space: &[f64], forward: &ForwardSpec, atoms: &[Atom]) -> Vec<f64> {
    let ip = MonotoneCubic::new(space, phi);
    (0..space.len())
        .map(|k| {
            let v = space[k];
            let d = first_difference(space, phi, k);
            atoms
                .iter()
                .map(|a| {
                    let b = (forward.beta)(v, a.mark);
                    (ip.eval(v + b) - phi[k] - b * d) * a.intensity
                })
                .sum()
        })
        .collect()
}

/// `sum_j [phi(v + beta) - phi(v)] kappa(x_j) lambda_j`.
pub fn apply_b(phi: &[f64], space: &[f64], forward: &ForwardSpec, atoms: &[Atom]) -> Vec<f64> {
    let ip = MonotoneCubic::new(space, phi);
    space
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            atoms
                .iter()
                .map(|a| (ip.eval(v + (forward.beta)(v, a.mark)) - phi[k]) * kappa(a.mark) * a.intensity)
                .sum()
        })
        .collect()
}

/// Number of `(node, atom)` jump targets falling outside the grid.
pub fn clipped_targets(space: &[f64], forward: &ForwardSpec, atoms: &[Atom]) -> usize {
    let (lo, hi) = (space[0], space[space.len() - 1]);
    space
        .iter()
        .flat_map(|&v| atoms.iter().map(move |a| v + (forward.beta)(v, a.mark)))
        .filter(|&x| x < lo || x > hi)
        .count()
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PdieSettings {
    pub exec: Execution,
}

/// Rows of `I - dt A` as `(first column, three coefficients)`.
fn implicit_rows(space: &[f64], forward: &ForwardSpec, dt: f64) -> Vec<(usize, [f64; 3])> {
    let m = space.len();
    (0..m)
        .map(|k| {
            let c = k.clamp(1, m - 2);
            let (h0, h1) = (space[c] - space[c - 1], space[c + 1] - space[c]);
            let second = [2.0 / (h0 * (h0 + h1)), -2.0 / (h0 * h1), 2.0 / (h1 * (h0 + h1))];
            let first = if k == 0 {
                [-(2.0 * h0 + h1) / (h0 * (h0 + h1)), (h0 + h1) / (h0 * h1), -h0 / (h1 * (h0 + h1))]
            } else if k == m - 1 {
                [h1 / (h0 * (h0 + h1)), -(h0 + h1) / (h0 * h1), (2.0 * h1 + h0) / (h1 * (h0 + h1))]
            } else {
                [-h1 / (h0 * (h0 + h1)), (h1 - h0) / (h0 * h1), h0 / (h1 * (h0 + h1))]
            };
            let v = space[k];
            let s = (forward.sigma_coef)(v);
            let (d, b) = (0.5 * s * s, (forward.b_coef)(v));
            let mut row = [0.0; 3];
            for q in 0..3 {
                row[q] = -dt * (d * second[q] + b * first[q]);
            }
            row[k - (c - 1)] += 1.0;
            (c - 1, row)
        })
        .collect()
}

/// Solves `(I - dt A) x = rhs`. The boundary rows reach two nodes inward;
/// they are reduced with their neighbour row before the Thomas sweep.
fn solve_implicit(rows: &[(usize, [f64; 3])], rhs: &[f64]) -> Result<Vec<f64>> {
    let m = rows.len();
    let mut lower = vec![0.0; m];
    let mut diag = vec![0.0; m];
    let mut upper = vec![0.0; m];
    let mut r = rhs.to_vec();
    for k in 1..m - 1 {
        let (_, c) = rows[k];
        lower[k] = c[0];
        diag[k] = c[1];
        upper[k] = c[2];
    }
    let reduce = |edge: [f64; 3], nb: [f64; 3], far: usize, rb: f64, re: f64| -> Result<([f64; 3], f64)> {
        if edge[far] == 0.0 {
            return Ok((edge, re));
        }
        if nb[far] == 0.0 {
            return Err(Error::Numerical {
                location: "space boundary".into(),
                message: "boundary stencil cannot be reduced to tridiagonal form".into(),
            });
        }
        let s = edge[far] / nb[far];
        Ok(([edge[0] - s * nb[0], edge[1] - s * nb[1], edge[2] - s * nb[2]], re - s * rb))
    };
    let (e0, r0) = reduce(rows[0].1, rows[1].1, 2, r[1], r[0])?;
    diag[0] = e0[0];
    upper[0] = e0[1];
    r[0] = r0;
    let (em, rm) = reduce(rows[m - 1].1, rows[m - 2].1, 0, r[m - 2], r[m - 1])?;
    lower[m - 1] = em[1];
    diag[m - 1] = em[2];
    r[m - 1] = rm;
    for k in 1..m {
        let w = lower[k] / diag[k - 1];
        diag[k] -= w * upper[k - 1];
        r[k] -= w * r[k - 1];
    }
    let mut x = vec![0.0; m];
    x[m - 1] = r[m - 1] / diag[m - 1];
    for k in (0..m - 1).rev() {
        x[k] = (r[k] - upper[k] * x[k + 1]) / diag[k];
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            location: "implicit diffusion solve".into(),
            message: "tridiagonal system is singular".into(),
        });
    }
    Ok(x)
}

/// Backward IMEX stepping: `A` implicit, `K` and the nonlinearity explicit
/// on the previous slice.
///
/// The driver is evaluated as `spec.driver(&[v], t, u, sigma(v) u_v, U)`
/// with `U_j = u(v + beta(v, x_j)) - u(v)`; for `g(t, u) = u` its jump
/// aggregate is `B u`. The boundary nodes carry the same equation with
/// one-sided stencils.
pub fn solve_pdie<G>(
    forward: &ForwardSpec,
    spec: &GeneratorSpec,
    g_terminal: G,
    atoms: &[Atom],
    space: &[f64],
    grid: &TimeGrid,
    settings: &PdieSettings,
) -> Result<PdieGrid>
where
    G: Fn(f64) -> f64,
{
    validate_space(space)?;
    let m = space.len();
    let steps = grid.steps();
    let exec = settings.exec;
    let mut values = vec![0.0; grid.len() * m];
    let terminal: Vec<f64> = space.iter().map(|&v| g_terminal(v)).collect();
    if terminal.iter().any(|v| !v.is_finite()) {
        return Err(Error::config("terminal function is not finite on the space grid"));
    }
    values[steps * m..].copy_from_slice(&terminal);
    let total_intensity: f64 = atoms.iter().map(|a| a.intensity).sum();
    let kappa_mass: f64 = atoms.iter().map(|a| kappa(a.mark) * a.intensity).sum();
    let sigmas: Vec<f64> = space.iter().map(|&v| (forward.sigma_coef)(v)).collect();
    let mut diag = PdieDiagnostics {
        clipped_targets: clipped_targets(space, forward, atoms),
        ..Default::default()
    };
    let mut rows = None;
    let mut rows_dt = f64::NAN;
    for i in (0..steps).rev() {
        let dt = grid.dt(i);
        let t = grid.nodes()[i];
        let prev = values[(i + 1) * m..(i + 2) * m].to_vec();
        let ip = MonotoneCubic::new(space, &prev);
        let k_term = apply_k(&prev, space, forward, atoms);
        let explicit = exec.map(m, |k| {
            let v = space[k];
            let z = sigmas[k] * first_difference(space, &prev, k);
            let u: Vec<f64> = atoms.iter().map(|a| ip.eval(v + (forward.beta)(v, a.mark)) - prev[k]).collect();
            let path = [v];
            let w = spec.aggregate(t, &u, atoms);
            let rate = spec.partial_y(&path, t, prev[k], z, w).abs() + spec.partial_u(&path, t, prev[k], z, w).abs() * kappa_mass;
            (spec.driver(&path, t, prev[k], z, &u, atoms), rate)
        });
        let rate = explicit.iter().map(|e| e.1).fold(0.0, f64::max) + total_intensity;
        diag.max_explicit_rate = diag.max_explicit_rate.max(rate);
        if dt * rate > 1.0 {
            return Err(Error::config(format!(
                "time step {dt} at t = {t} violates the explicit stability bound; need dt <= {:.6e}",
                1.0 / rate
            )));
        }
        let rhs: Vec<f64> = (0..m).map(|k| prev[k] + dt * (k_term[k] + explicit[k].0)).collect();
        if rows.is_none() || dt != rows_dt {
            rows = Some(implicit_rows(space, forward, dt));
            rows_dt = dt;
        }
        let next = solve_implicit(rows.as_ref().expect("rows built"), &rhs).map_err(|e| match e {
            Error::Numerical { location, message } => Error::Numerical {
                location: format!("time node {i} (t = {t}), {location}"),
                message,
            },
            other => other,
        })?;
        values[i * m..(i + 1) * m].copy_from_slice(&next);
    }
    if diag.clipped_targets > 0 {
        diag.warnings.push(format!(
            "{} jump targets fall outside the space grid and were clipped",
            diag.clipped_targets
        ));
    }
    Ok(PdieGrid {
        space_nodes: space.to_vec(),
        grid: grid.clone(),
        values,
        diagnostics: diag,
    })
}

/// Discrepancies between the finite-difference and lattice FBSDE values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub max_error: f64,
    pub l2_error: f64,
    /// `(t, sup error, L2 error)` per shared time node.
    pub profile: Vec<(f64, f64, f64)>,
    pub compared_nodes: usize,
}

fn shared_indices(a: &[f64], b: &[f64]) -> Vec<(usize, usize)> {
    let tol = |x: f64| 1e-12 * (1.0 + x.abs());
    let mut out = Vec::new();
    let mut j = 0;
    for (i, &x) in a.iter().enumerate() {
        while j < b.len() && b[j] < x - tol(x) {
            j += 1;
        }
        if j < b.len() && (b[j] - x).abs() <= tol(x) {
            out.push((i, j));
        }
    }
    out
}

/// Compares `u(t_i, v_k)` with the lattice `Y(t_i, v_k)` at shared time and
/// space nodes, optionally restricted to `v` in `within`.
pub fn cross_validate(pgrid: &PdieGrid, fbsde: &DiscreteSolution, within: Option<(f64, f64)>) -> Result<CrossValidation> {
    let states = match &fbsde.representation {
        Representation::Lattice { states } => states,
        Representation::Paths { .. } => {
            return Err(Error::config("cross-validation needs a lattice solution"));
        }
    };
    if (pgrid.grid.horizon() - fbsde.grid.horizon()).abs() > 1e-12 {
        return Err(Error::config("time grids have different horizons"));
    }
    let times = shared_indices(pgrid.grid.nodes(), fbsde.grid.nodes());
    let (lo, hi) = within.unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
    let nodes: Vec<(usize, usize)> = shared_indices(&pgrid.space_nodes, states)
        .into_iter()
        .filter(|&(k, _)| pgrid.space_nodes[k] >= lo && pgrid.space_nodes[k] <= hi)
        .collect();
    if times.is_empty() || nodes.is_empty() {
        return Err(Error::config("grids share no (time, space) nodes"));
    }
    let mut profile = Vec::with_capacity(times.len());
    let (mut sup, mut sq) = (0.0f64, 0.0);
    for &(ip, is) in &times {
        let (mut s, mut q) = (0.0f64, 0.0);
        for &(kp, ks) in &nodes {
            let e = (pgrid.value(ip, kp) - fbsde.y_at(is, ks)).abs();
            s = s.max(e);
            q += e * e;
        }
        sup = sup.max(s);
        sq += q;
        profile.push((pgrid.grid.nodes()[ip], s, (q / nodes.len() as f64).sqrt()));
    }
    let count = times.len() * nodes.len();
    Ok(CrossValidation {
        max_error: sup,
        l2_error: (sq / count as f64).sqrt(),
        profile,
        compared_nodes: count,
    })
}

/// Sample region for [`check_forward_conditions`], with the constants
/// `c, c', c~, c~'` of the sufficient conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardConditionBox {
    pub psi: (f64, f64),
    pub atoms: Vec<Atom>,
    pub samples: usize,
    pub c: f64,
    pub c_prime: f64,
    pub c_tilde: f64,
    pub c_tilde_prime: f64,
}

impl ForwardConditionBox {
    pub fn new(psi: (f64, f64), atoms: Vec<Atom>) -> Self {
        ForwardConditionBox {
            psi,
            atoms,
            samples: 201,
            c: 10.0,
            c_prime: 10.0,
            c_tilde: 10.0,
            c_tilde_prime: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionCheck {
    pub name: String,
    pub ok: bool,
    /// Worst sampled value of the checked quantity.
    pub worst: f64,
    /// `(psi, mark)` of the worst sample; mark is `None` for conditions not
    /// involving jumps.
    pub witness: Option<(f64, Option<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardConditionsReport {
    pub checks: Vec<ConditionCheck>,
}

impl ForwardConditionsReport {
    pub fn ok(&self) -> bool {
        self.checks.iter().all(|c| c.ok)
    }

    pub fn get(&self, name: &str) -> Option<&ConditionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn derivative(h: impl Fn(f64) -> f64, x: f64) -> f64 {
    let e = 1e-5 * (1.0 + x.abs());
    (h(x + e) - h(x - e)) / (2.0 * e)
}

fn second_derivative(h: impl Fn(f64) -> f64, x: f64) -> f64 {
    let e = 1e-4 * (1.0 + x.abs());
    (h(x + e) - 2.0 * h(x) + h(x - e)) / (e * e)
}

/// Tracks the worst sample of one condition; `bad(q)` says how far `q` is
/// from satisfying it (positive means violated).
struct Tracker {
    name: &'static str,
    worst: f64,
    badness: f64,
    witness: Option<(f64, Option<f64>)>,
}

impl Tracker {
    fn new(name: &'static str) -> Self {
        Tracker {
            name,
            worst: f64::NAN,
            badness: f64::NEG_INFINITY,
            witness: None,
        }
    }

    fn observe(&mut self, value: f64, badness: f64, psi: f64, mark: Option<f64>) {
        let badness = if badness.is_nan() { f64::INFINITY } else { badness };
        if badness > self.badness {
            self.badness = badness;
            self.worst = value;
            self.witness = Some((psi, mark));
        }
    }

    fn finish(self) -> ConditionCheck {
        ConditionCheck {
            name: self.name.into(),
            ok: self.badness <= 0.0,
            worst: self.worst,
            witness: self.witness,
        }
    }
}

/// Samples sufficient conditions for a bounded Brownian Malliavin
/// derivative of the forward process on `region`.
pub fn check_forward_conditions(forward: &ForwardSpec, region: &ForwardConditionBox) -> ForwardConditionsReport {
    let n = region.samples.max(2);
    let (lo, hi) = region.psi;
    let sigma = |x: f64| (forward.sigma_coef)(x);
    let b = |x: f64| (forward.b_coef)(x);
    let mut sig = Tracker::new("sigma_bounds");
    let mut drift = Tracker::new("drift_diffusion");
    let mut beta_pos = Tracker::new("beta_nonnegative");
    let mut growth = Tracker::new("drift_growth");
    let mut dbeta = Tracker::new("beta_slope");
    let mut dbeta_int = Tracker::new("beta_slope_integral");
    for q in 0..n {
        let psi = lo + (hi - lo) * q as f64 / (n - 1) as f64;
        let s = sigma(psi);
        sig.observe(s, (1.0 / region.c - s.abs()).max(s.abs() - region.c), psi, None);
        let ds = derivative(sigma, psi);
        let d2s = second_derivative(sigma, psi);
        let jump_part: f64 = region
            .atoms
            .iter()
            .map(|a| ds / s * (forward.beta)(psi, a.mark) * a.intensity)
            .sum();
        let dd = 0.5 * ds * ds - ds * b(psi) / s - 0.5 * s * d2s + jump_part;
        drift.observe(dd, dd - region.c_prime, psi, None);
        let g = derivative(b, psi) - 0.5 * ds * ds;
        growth.observe(g, g - region.c_tilde, psi, None);
        let mut integral = 0.0;
        for a in &region.atoms {
            let be = (forward.beta)(psi, a.mark);
            beta_pos.observe(be, -be, psi, Some(a.mark));
            let slope = derivative(|x| (forward.beta)(x, a.mark), psi);
            let bad = if slope <= -1.0 { 1.0 + (-1.0 - slope) } else { slope };
            dbeta.observe(slope, bad, psi, Some(a.mark));
            integral -= slope * a.intensity;
        }
        dbeta_int.observe(integral, integral - region.c_tilde_prime, psi, None);
    }
    ForwardConditionsReport {
        checks: vec![
            sig.finish(),
            drift.finish(),
            beta_pos.finish(),
            growth.finish(),
            dbeta.finish(),
            dbeta_int.finish(),
        ],
    }
}
