//! Difference-operator Malliavin derivatives, the derivative BSDE and the
//! diagonal identification of `Z` and `U`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{GeneratorSpec, MalliavinArgs, TerminalSpec};
use crate::levy::{kappa, kappa_n, shift_values, Atom, PathBundle, TimeGrid};
use crate::par::Execution;
use crate::solver::picard::{check_settings, picard_core};
use crate::solver::regression::{least_squares, Standardizer};
use crate::solver::{solve_picard_regression, DiscreteSolution, PicardSettings, Representation};
use crate::verify::{CheckReport, Location};

/// `xi(X + v 1_{[r, T]}) - xi(X)`.
pub fn difference_derivative<F>(xi: F, path: &[f64], grid: &TimeGrid, r: f64, v: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if v == 0.0 {
        return Err(Error::domain("the Brownian direction v = 0 is not a difference operator"));
    }
    if path.len() != grid.len() {
        return Err(Error::config("path length does not match the grid"));
    }
    let shifted = shift_values(grid, path, r, v)?;
    Ok(xi(&shifted) - xi(path))
}

/// A direction `(r, v)` of the Malliavin derivative; `v = 0` is Brownian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    pub r: f64,
    pub v: f64,
}

fn check_base(base: &DiscreteSolution, bundle: &PathBundle) -> Result<()> {
    match base.representation {
        Representation::Paths { n_paths, seed } if n_paths == bundle.n_paths() && seed == bundle.seed() => {}
        Representation::Paths { .. } => {
            return Err(Error::config("base solution was computed on a different path bundle"))
        }
        Representation::Lattice { .. } => {
            return Err(Error::config("derivative solves run on path bundles; lattice solutions are not supported"))
        }
    }
    if &base.grid != bundle.grid() {
        return Err(Error::config("base solution grid differs from the bundle grid"));
    }
    Ok(())
}

/// Gradient of the full driver in `(y, z, U)` at a point.
struct Linearization<'a> {
    spec: &'a GeneratorSpec,
    atoms: &'a [Atom],
}

impl Linearization<'_> {
    fn new<'a>(spec: &'a GeneratorSpec, atoms: &'a [Atom]) -> Result<Linearization<'a>> {
        for (name, present) in [
            ("df_y", spec.df_y.is_some()),
            ("df_z", spec.df_z.is_some()),
            ("df_u", spec.df_u.is_some()),
        ] {
            if !present {
                return Err(Error::config(format!(
                    "Brownian-direction derivative needs the partial derivative `{name}` of the generator"
                )));
            }
        }
        Ok(Linearization { spec, atoms })
    }

    /// `(D_{r,0} f) + f_y dy + f_z dz + sum_j f_{U_j} du_j` at `(y, z, u)`.
    #[allow(clippy::too_many_arguments)]
    fn apply(&self, r: f64, path: &[f64], t: f64, y: f64, z: f64, u: &[f64], dy: f64, dz: f64, du: &[f64]) -> f64 {
        let s = self.spec;
        let w = s.aggregate(t, u, self.atoms);
        let fy = s.df_y.as_ref().expect("checked")(path, t, y, z, w);
        let fz = s.df_z.as_ref().expect("checked")(path, t, y, z, w);
        let fu = s.df_u.as_ref().expect("checked")(path, t, y, z, w);
        let dmf = s.d_malliavin_f.as_ref().map_or(0.0, |d| {
            d(&MalliavinArgs {
                r,
                v: 0.0,
                t,
                y,
                z,
                w,
                path,
            })
        });
        let mut inner = dmf + fy * dy + fz * dz;
        for ((a, &uj), &duj) in self.atoms.iter().zip(u).zip(du) {
            inner += fu * (s.dg)(t, uj) * kappa(a.mark) * a.intensity * duj;
        }
        match &s.composition {
            None => inner,
            Some(c) => {
                let v = (s.f)(path, t, y, z, w);
                let h = c.aggregate(u, self.atoms);
                let mut out = (c.dphi_v)(v, h) * inner;
                let pw = (c.dphi_w)(v, h);
                for ((a, &uj), &duj) in self.atoms.iter().zip(u).zip(du) {
                    let wt = c.cutoff.map_or(1.0, |n| kappa_n(a.mark, n));
                    out += pw * (c.dh)(uj) * wt * a.intensity * duj;
                }
                out
            }
        }
    }
}

/// Solves the derivative BSDE in direction `(r, v)` on the bundle of
/// `base_sol`.
///
/// For `v != 0` the terminal value is `xi(X^v) - xi(X)` with
/// `X^v = X + v 1_{[r, T]}` and the driver is
/// `(D_{r,v} f) + f(X^v, Theta + (dy, dz, dU)) - f(X^v, Theta)`; without a
/// supplied `d_malliavin_f`, `D_{r,v} f` is the path difference
/// `f(X^v, Theta) - f(X, Theta)`. For `v = 0` the terminal value is the
/// supplied `D_{r,0} xi` and the driver is the linearisation of `f` at
/// `Theta`. The result vanishes on nodes before the first node `>= r`.
pub fn solve_derivative_bsde(
    spec: &GeneratorSpec,
    base_sol: &DiscreteSolution,
    terminal: &TerminalSpec,
    direction: Direction,
    bundle: &PathBundle,
    settings: &PicardSettings,
) -> Result<DiscreteSolution> {
    check_base(base_sol, bundle)?;
    check_settings(settings)?;
    let grid = bundle.grid();
    let Direction { r, v } = direction;
    let start = grid.first_at_or_after(r)?;
    let atoms = bundle.model().atoms();
    let nodes = grid.nodes();
    let np = bundle.n_paths();
    let n_atoms = atoms.len();
    let base = |p: usize, i: usize| -> (f64, f64, &[f64]) {
        let at = i * np + p;
        (base_sol.y[at], base_sol.z[at], &base_sol.u[at * n_atoms..(at + 1) * n_atoms])
    };
    if v == 0.0 {
        let d_xi = terminal.d_xi_brownian.as_ref().ok_or_else(|| {
            Error::config("Brownian-direction derivative needs `d_xi_brownian` (D_{r,0} xi) in the terminal condition")
        })?;
        let lin = Linearization::new(spec, atoms)?;
        let term = settings.exec.map(np, |p| d_xi(bundle.path(p), start));
        return picard_core(bundle, &term, start, settings, None, |p, i, dy, dz, du| {
            let (y, z, u) = base(p, i);
            lin.apply(r, &bundle.path(p)[..=i], nodes[i], y, z, u, dy, dz, du)
        });
    }
    let shifted = bundle.shifted(r, v)?;
    let term = settings
        .exec
        .map(np, |p| (terminal.xi)(shifted.path(p)) - (terminal.xi)(bundle.path(p)));
    picard_core(bundle, &term, start, settings, None, |p, i, dy, dz, du| {
        let (y, z, u) = base(p, i);
        let t = nodes[i];
        let xs = &shifted.path(p)[..=i];
        let mut moved = [0.0; 16];
        let mut heap;
        let u2: &mut [f64] = if n_atoms <= 16 {
            &mut moved[..n_atoms]
        } else {
            heap = vec![0.0; n_atoms];
            &mut heap
        };
        for ((o, a), b) in u2.iter_mut().zip(u).zip(du) {
            *o = a + b;
        }
        let change = spec.driver(xs, t, y + dy, z + dz, u2, atoms) - spec.driver(xs, t, y, z, u, atoms);
        match &spec.d_malliavin_f {
            None => change,
            Some(d) => {
                let x = &bundle.path(p)[..=i];
                let w = spec.aggregate(t, u, atoms);
                let dmf = d(&MalliavinArgs {
                    r,
                    v,
                    t,
                    y,
                    z,
                    w,
                    path: x,
                });
                dmf + change
            }
        }
    })
}

/// Independent oracle for `v != 0`: the solution on the shifted bundle
/// minus `base_sol`, node by node.
pub fn shifted_difference(
    spec: &GeneratorSpec,
    base_sol: &DiscreteSolution,
    terminal: &TerminalSpec,
    direction: Direction,
    bundle: &PathBundle,
    settings: &PicardSettings,
) -> Result<DiscreteSolution> {
    check_base(base_sol, bundle)?;
    let shifted = bundle.shifted(direction.r, direction.v)?;
    let mut sol = solve_picard_regression(bundle.model(), spec, terminal, &shifted, settings)?;
    for (a, b) in sol.y.iter_mut().zip(&base_sol.y) {
        *a -= b;
    }
    for (a, b) in sol.z.iter_mut().zip(&base_sol.z) {
        *a -= b;
    }
    for (a, b) in sol.u.iter_mut().zip(&base_sol.u) {
        *a -= b;
    }
    Ok(sol)
}

/// Diagonal value `D_{r,v} Y` at the first node `>= r`, per path.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalSample {
    pub direction: Direction,
    pub node: usize,
    pub values: Vec<f64>,
}

impl DiagonalSample {
    pub fn from_solution(sol: &DiscreteSolution, direction: Direction) -> Result<Self> {
        let node = sol.grid.first_at_or_after(direction.r)?;
        Ok(DiagonalSample {
            direction,
            node,
            values: sol.y_slice(node).to_vec(),
        })
    }
}

/// Directions `(t_i, 0)` (when `brownian`) and `(t_i, x_j)` for each node.
pub fn diagonal_directions(grid: &TimeGrid, atoms: &[Atom], nodes: &[usize], brownian: bool) -> Vec<Direction> {
    let mut out = Vec::new();
    for &i in nodes {
        let r = grid.nodes()[i];
        if brownian {
            out.push(Direction { r, v: 0.0 });
        }
        out.extend(atoms.iter().map(|a| Direction { r, v: a.mark }));
    }
    out
}

/// Solves the derivative BSDE along `directions` and keeps the diagonals.
pub fn solve_diagonals(
    spec: &GeneratorSpec,
    base_sol: &DiscreteSolution,
    terminal: &TerminalSpec,
    directions: &[Direction],
    bundle: &PathBundle,
    settings: &PicardSettings,
) -> Result<Vec<DiagonalSample>> {
    directions
        .iter()
        .map(|&d| {
            let sol = solve_derivative_bsde(spec, base_sol, terminal, d, bundle, settings)?;
            DiagonalSample::from_solution(&sol, d)
        })
        .collect()
}

/// Result of [`identify_zu`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentificationReport {
    /// RMS of `E[D_{r,0} Y_r | X_{i-1}] - Z_{i-1}` over Brownian directions.
    pub z_error: Option<f64>,
    /// Per atom, RMS of `E[D_{r,x_j} Y_r | X_{i-1}] - U_{i-1}(x_j)`.
    pub u_errors: Vec<Option<f64>>,
    pub samples: usize,
}

/// Compares diagonal derivatives with `Z` and `U` of `base_sol`.
///
/// A direction with first node `i >= r` is matched with `Z`, `U` on the
/// interval `(t_{i-1}, t_i]`, i.e. at node `i - 1`, after regressing the
/// diagonal on the basis at `X_{t_{i-1}}` (node `0` uses node `0` and a
/// plain mean).
pub fn identify_zu(
    base_sol: &DiscreteSolution,
    bundle: &PathBundle,
    diagonals: &[DiagonalSample],
    settings: &PicardSettings,
) -> Result<IdentificationReport> {
    check_base(base_sol, bundle)?;
    let np = bundle.n_paths();
    let atoms = bundle.model().atoms();
    let mut z_acc = (0.0, 0usize);
    let mut u_acc = vec![(0.0, 0usize); atoms.len()];
    for d in diagonals {
        if d.values.len() != np {
            return Err(Error::config("diagonal sample size differs from the bundle"));
        }
        let slot = if d.direction.v == 0.0 {
            None
        } else {
            Some(
                atoms
                    .iter()
                    .position(|a| (a.mark - d.direction.v).abs() <= 1e-12 * a.mark.abs().max(1.0))
                    .ok_or_else(|| Error::config(format!("direction v = {} is not an atom mark", d.direction.v)))?,
            )
        };
        let cond_node = d.node.saturating_sub(1);
        if cond_node >= base_sol.zu_nodes {
            return Err(Error::config("diagonal node has no stored Z/U"));
        }
        let projected = project(bundle, cond_node, d.node == 0, &d.values, settings);
        let mut sum = 0.0;
        for (p, val) in projected.iter().enumerate() {
            let target = match slot {
                None => base_sol.z_at(cond_node, p),
                Some(j) => base_sol.u_at(cond_node, p, j),
            };
            sum += (val - target) * (val - target);
        }
        match slot {
            None => {
                z_acc.0 += sum;
                z_acc.1 += np;
            }
            Some(j) => {
                u_acc[j].0 += sum;
                u_acc[j].1 += np;
            }
        }
    }
    let rms = |(s, n): (f64, usize)| if n == 0 { None } else { Some((s / n as f64).sqrt()) };
    Ok(IdentificationReport {
        z_error: rms(z_acc),
        u_errors: u_acc.into_iter().map(rms).collect(),
        samples: diagonals.len(),
    })
}

fn project(bundle: &PathBundle, node: usize, mean_only: bool, values: &[f64], settings: &PicardSettings) -> Vec<f64> {
    let np = bundle.n_paths();
    let basis = settings.basis;
    let st = Standardizer::fit((0..np).map(|p| bundle.value(p, node)));
    let w = if mean_only { 1 } else { st.width(&basis) };
    let fit = least_squares(np, w, settings.exec, |p, f| {
        if mean_only {
            f[0] = 1.0;
        } else {
            st.features(&basis, bundle.value(p, node), f);
        }
        values[p]
    });
    settings.exec.map(np, |p| {
        let mut f = [0.0; 9];
        if mean_only {
            f[0] = 1.0;
        } else {
            st.features(&basis, bundle.value(p, node), &mut f);
        }
        f[..w].iter().zip(&fit.coefficients).map(|(a, b)| a * b).sum()
    })
}

/// Checks `|U(t_i, ., x_j)| <= 2 sup |Y| + slack`.
pub fn check_u_crude_bound(sol: &DiscreteSolution, slack: f64) -> CheckReport {
    let sup = sol.y.iter().fold(0.0f64, |m, y| m.max(y.abs()));
    let mut worst = f64::NEG_INFINITY;
    let mut at = None;
    let w = sol.width();
    for i in 0..sol.zu_nodes {
        for k in 0..w {
            for j in 0..sol.n_atoms() {
                let e = sol.u_at(i, k, j).abs() - 2.0 * sup - slack;
                if e > worst {
                    worst = e;
                    at = Some(Location {
                        node: i,
                        t: sol.grid.nodes()[i],
                        index: k,
                        atom: Some(j),
                    });
                }
            }
        }
    }
    let worst = if at.is_none() { 0.0 } else { worst };
    CheckReport {
        check: "u_crude_bound".into(),
        ok: worst <= 0.0,
        worst,
        location: at,
    }
}

/// Maximum absolute difference of `a` and `b` on nodes `>= from`.
pub fn max_difference_from(a: &DiscreteSolution, b: &DiscreteSolution, from: usize) -> f64 {
    let w = a.width();
    let y = a.y[from * w..].iter().zip(&b.y[from * w..]);
    let z = a.z.iter().zip(&b.z).skip(from * w);
    let u = a.u.iter().zip(&b.u).skip(from * w * a.n_atoms());
    y.chain(z).chain(u).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Runs [`solve_derivative_bsde`] for many directions with `exec`.
pub fn solve_many(
    spec: &GeneratorSpec,
    base_sol: &DiscreteSolution,
    terminal: &TerminalSpec,
    directions: &[Direction],
    bundle: &PathBundle,
    settings: &PicardSettings,
    exec: Execution,
) -> Result<Vec<DiscreteSolution>> {
    exec.map(directions.len(), |k| {
        solve_derivative_bsde(spec, base_sol, terminal, directions[k], bundle, settings)
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::families;
    use crate::levy::{sample_paths, LevyTriplet};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn grid() -> TimeGrid {
        TimeGrid::uniform(1.0, 4).unwrap()
    }

    #[test]
    fn difference_examples() {
        let g = grid();
        let path = [0.0, 0.3, -0.2, 0.5, 1.5];
        let last = |p: &[f64]| p[p.len() - 1];
        assert_abs_diff_eq!(difference_derivative(last, &path, &g, 0.5, 0.7).unwrap(), 0.7, epsilon = 1e-15);
        assert_eq!(difference_derivative(|_| 3.0, &path, &g, 0.5, 0.7).unwrap(), 0.0);
        let sq = |p: &[f64]| p[p.len() - 1].powi(2);
        let (a, v) = (1.5, 0.7);
        assert_abs_diff_eq!(difference_derivative(sq, &path, &g, 0.5, v).unwrap(), 2.0 * a * v + v * v, epsilon = 1e-14);
        assert!(matches!(difference_derivative(last, &path, &g, 0.5, 0.0), Err(Error::Domain(_))));
    }

    fn setup(model: LevyTriplet, n: usize) -> PathBundle {
        sample_paths(&model, &TimeGrid::uniform(1.0, 8).unwrap(), n, 11).unwrap()
    }

    #[test]
    fn terminal_value_derivative_is_constant() {
        let model = LevyTriplet::brownian(1.0).unwrap();
        let bundle = setup(model.clone(), 2000);
        let spec = families::constant(0.0);
        let term = TerminalSpec::terminal_value(1.0);
        let s = PicardSettings::default();
        let base = solve_picard_regression(&model, &spec, &term, &bundle, &s).unwrap();
        let d = solve_derivative_bsde(&spec, &base, &term, Direction { r: 0.5, v: 1.0 }, &bundle, &s).unwrap();
        for i in 0..bundle.grid().len() {
            let expect = if i >= 4 { 1.0 } else { 0.0 };
            assert!(d.y_slice(i).iter().all(|&y| (y - expect).abs() < 1e-10));
        }
        assert!(d.z.iter().chain(&d.u).all(|&v| v.abs() < 1e-10));
        let c = TerminalSpec::constant(2.0);
        let base_c = solve_picard_regression(&model, &spec, &c, &bundle, &s).unwrap();
        let dc = solve_derivative_bsde(&spec, &base_c, &c, Direction { r: 0.25, v: 0.0 }, &bundle, &s).unwrap();
        assert!(dc.y.iter().all(|&y| y == 0.0));
    }

    #[test]
    fn linear_driver_derivative() {
        let model = LevyTriplet::brownian(1.0).unwrap();
        let bundle = setup(model.clone(), 1000);
        let a0 = 0.6;
        let spec = families::linear(a0, 0.0, 0.0, 0.0);
        let term = TerminalSpec::terminal_value(1.0);
        let s = PicardSettings {
            tol: 1e-12,
            max_iter: 200,
            ..Default::default()
        };
        let base = solve_picard_regression(&model, &spec, &term, &bundle, &s).unwrap();
        let d = solve_derivative_bsde(&spec, &base, &term, Direction { r: 0.5, v: 1.0 }, &bundle, &s).unwrap();
        // explicit-sum Euler: D_i = 1 + a0 dt sum_{k >= i} D_k
        let dt = 1.0 / 8.0;
        for i in 4..=8 {
            let exact = (1.0 - a0 * dt).powi(-(8 - i as i32));
            assert_abs_diff_eq!(d.y_at(i, 0), exact, epsilon = 1e-9);
            assert_abs_diff_eq!(exact, (a0 * (1.0 - i as f64 * dt)).exp(), epsilon = 0.05);
        }
    }

    #[test]
    fn brownian_direction_needs_derivatives() {
        let model = LevyTriplet::brownian(1.0).unwrap();
        let bundle = setup(model.clone(), 200);
        let spec = families::constant(0.0);
        let s = PicardSettings::default();
        let term = TerminalSpec::new("x", Arc::new(|p: &[f64]| p[p.len() - 1]), 1.0, Arc::new(|_| 1.0)).unwrap();
        let base = solve_picard_regression(&model, &spec, &term, &bundle, &s).unwrap();
        let err = solve_derivative_bsde(&spec, &base, &term, Direction { r: 0.5, v: 0.0 }, &bundle, &s).unwrap_err();
        assert!(err.to_string().contains("d_xi_brownian"));
        let bare = GeneratorSpec::new("bare", Arc::new(|_, _, _, _, _| 0.0));
        let term = TerminalSpec::terminal_value(1.0);
        let err = solve_derivative_bsde(&bare, &base, &term, Direction { r: 0.5, v: 0.0 }, &bundle, &s).unwrap_err();
        assert!(err.to_string().contains("df_y"));
    }

    #[test]
    fn shift_oracle_matches_nonlinear_driver() {
        let model = LevyTriplet::new(0.0, 0.5, vec![Atom::new(0.5, 1.0)]).unwrap();
        let bundle = setup(model.clone(), 3000);
        let spec = families::subquadratic(0.5, 0.3, 0.2);
        let term = TerminalSpec::of_terminal_state("tanh", Arc::new(f64::tanh), Arc::new(|x: f64| 1.0 - x.tanh().powi(2)), 1.0, 1.0, 0.5);
        let s = PicardSettings {
            tol: 1e-11,
            max_iter: 200,
            ..Default::default()
        };
        let base = solve_picard_regression(&model, &spec, &term, &bundle, &s).unwrap();
        let dir = Direction { r: 0.5, v: 0.5 };
        let d = solve_derivative_bsde(&spec, &base, &term, dir, &bundle, &s).unwrap();
        let o = shifted_difference(&spec, &base, &term, dir, &bundle, &s).unwrap();
        assert!(d.diagnostics.converged && o.diagnostics.converged);
        assert!(max_difference_from(&d, &o, 4) < 1e-8, "{}", max_difference_from(&d, &o, 4));
    }

    #[test]
    fn identification_on_constant_terminal() {
        let model = LevyTriplet::new(0.1, 1.0, vec![Atom::new(1.0, 1.0)]).unwrap();
        let bundle = setup(model.clone(), 500);
        let spec = families::constant(0.0);
        let term = TerminalSpec::constant(1.0);
        let s = PicardSettings::default();
        let base = solve_picard_regression(&model, &spec, &term, &bundle, &s).unwrap();
        let dirs = diagonal_directions(bundle.grid(), model.atoms(), &[2, 5], true);
        let diags = solve_diagonals(&spec, &base, &term, &dirs, &bundle, &s).unwrap();
        let rep = identify_zu(&base, &bundle, &diags, &s).unwrap();
        assert!(rep.z_error.unwrap() < 1e-12);
        assert!(rep.u_errors[0].unwrap() < 1e-12);
        assert!(check_u_crude_bound(&base, 0.0).ok);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn product_rule(vals in proptest::collection::vec(-3.0f64..3.0, 5), r in 0.0f64..1.0, v in prop_oneof![-2.0f64..-0.01, 0.01f64..2.0]) {
            let g = grid();
            let xi = |p: &[f64]| p[4] * p[2] + p[3].sin();
            let eta = |p: &[f64]| p[4].powi(2) - p[1];
            let prod = |p: &[f64]| xi(p) * eta(p);
            let dxi = difference_derivative(xi, &vals, &g, r, v).unwrap();
            let deta = difference_derivative(eta, &vals, &g, r, v).unwrap();
            let dprod = difference_derivative(prod, &vals, &g, r, v).unwrap();
            let rhs = xi(&vals) * deta + eta(&vals) * dxi + dxi * deta;
            prop_assert!((dprod - rhs).abs() <= 1e-12 * (1.0 + dprod.abs()));
            let sum = difference_derivative(|p: &[f64]| xi(p) + eta(p), &vals, &g, r, v).unwrap();
            prop_assert!((sum - dxi - deta).abs() <= 1e-12 * (1.0 + sum.abs()));
        }
    }
}
