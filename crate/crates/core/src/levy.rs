//! Lévy triplets with atomic jump measures, path simulation and the path
//! shift behind the jump-direction Malliavin derivative.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::par::Execution;
use crate::quad::Integrator;

/// A point mass of the Lévy measure: jumps of size `mark` arrive at rate
/// `intensity` per unit time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub mark: f64,
    pub intensity: f64,
}

impl Atom {
    pub fn new(mark: f64, intensity: f64) -> Self {
        Atom { mark, intensity }
    }
}

/// Checks atom invariants and returns the atoms sorted by mark.
pub fn validate_atoms(atoms: &[Atom]) -> Result<Vec<Atom>> {
    let mut out = atoms.to_vec();
    for (j, a) in out.iter().enumerate() {
        if !(a.mark.is_finite() && a.mark != 0.0) {
            return Err(Error::config(format!("atoms[{j}].mark must be finite and nonzero, got {}", a.mark)));
        }
        if !(a.intensity.is_finite() && a.intensity > 0.0) {
            return Err(Error::config(format!(
                "atoms[{j}].intensity must be finite and positive, got {}",
                a.intensity
            )));
        }
    }
    out.sort_by(|a, b| a.mark.total_cmp(&b.mark));
    if out.windows(2).any(|w| w[0].mark == w[1].mark) {
        return Err(Error::config("atoms contain a repeated mark"));
    }
    Ok(out)
}

/// `X_t = gamma t + sigma W_t + sum_j x_j (N_j(t) - lambda_j t)`.
///
/// Every atom is compensated, so `gamma` is the mean drift of `X`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevyTriplet {
    gamma: f64,
    sigma: f64,
    atoms: Vec<Atom>,
}

impl LevyTriplet {
    pub fn new(gamma: f64, sigma: f64, atoms: Vec<Atom>) -> Result<Self> {
        if !gamma.is_finite() {
            return Err(Error::config("gamma must be finite"));
        }
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::config(format!("sigma must be finite and >= 0, got {sigma}")));
        }
        Ok(LevyTriplet {
            gamma,
            sigma,
            atoms: validate_atoms(&atoms)?,
        })
    }

    pub fn brownian(sigma: f64) -> Result<Self> {
        Self::new(0.0, sigma, Vec::new())
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn total_intensity(&self) -> f64 {
        self.atoms.iter().map(|a| a.intensity).sum()
    }

    pub fn mean(&self, t: f64) -> f64 {
        self.gamma * t
    }

    pub fn variance(&self, t: f64) -> f64 {
        t * (self.sigma * self.sigma
            + self.atoms.iter().map(|a| a.intensity * a.mark * a.mark).sum::<f64>())
    }
}

/// Discretisation `0 = t_0 < t_1 < ... < t_N = T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    nodes: Vec<f64>,
}

impl TimeGrid {
    pub fn new(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::config("time grid needs at least 2 nodes"));
        }
        if nodes[0] != 0.0 {
            return Err(Error::config("time grid must start at 0"));
        }
        if nodes.iter().any(|t| !t.is_finite()) || nodes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("time grid must be finite and strictly increasing"));
        }
        Ok(TimeGrid { nodes })
    }

    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) || steps == 0 {
            return Err(Error::config("uniform grid needs horizon > 0 and steps >= 1"));
        }
        let mut nodes: Vec<f64> = (0..=steps).map(|i| horizon * i as f64 / steps as f64).collect();
        nodes[steps] = horizon;
        Self::new(nodes)
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }

    pub fn dt(&self, i: usize) -> f64 {
        self.nodes[i + 1] - self.nodes[i]
    }

    pub fn max_dt(&self) -> f64 {
        (0..self.steps()).map(|i| self.dt(i)).fold(0.0, f64::max)
    }

    /// Index of the first node `>= r`.
    pub fn first_at_or_after(&self, r: f64) -> Result<usize> {
        if !(0.0..=self.horizon()).contains(&r) {
            return Err(Error::domain(format!("time {r} outside [0, {}]", self.horizon())));
        }
        Ok(self.nodes.partition_point(|&t| t < r))
    }
}

/// Simulated paths of a [`LevyTriplet`] on a [`TimeGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    grid: TimeGrid,
    model: LevyTriplet,
    n_paths: usize,
    brownian: Vec<f64>,
    jumps: Vec<u32>,
    values: Vec<f64>,
    seed: u64,
}

impl PathBundle {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn model(&self) -> &LevyTriplet {
        &self.model
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_atoms(&self) -> usize {
        self.model.atoms.len()
    }

    /// Values `X_{t_0}, ..., X_{t_N}` of path `p`.
    pub fn path(&self, p: usize) -> &[f64] {
        let n = self.grid.len();
        &self.values[p * n..(p + 1) * n]
    }

    pub fn value(&self, p: usize, i: usize) -> f64 {
        self.values[p * self.grid.len() + i]
    }

    /// Brownian increment `W_{t_{i+1}} - W_{t_i}` of path `p`.
    pub fn brownian_increment(&self, p: usize, i: usize) -> f64 {
        self.brownian[p * self.grid.steps() + i]
    }

    /// Number of jumps of atom `j` in `(t_i, t_{i+1}]` on path `p`.
    pub fn jump_count(&self, p: usize, i: usize, j: usize) -> u32 {
        self.jumps[(p * self.grid.steps() + i) * self.n_atoms() + j]
    }

    /// `N_j(t_{i+1}) - N_j(t_i) - lambda_j dt_i`.
    pub fn compensated_count(&self, p: usize, i: usize, j: usize) -> f64 {
        self.jump_count(p, i, j) as f64 - self.model.atoms[j].intensity * self.grid.dt(i)
    }

    /// Returns the bundle with the path values replaced by
    /// `X + v 1_{[r, T]}` on every path; increments are kept.
    pub fn shifted(&self, r: f64, v: f64) -> Result<PathBundle> {
        let start = self.grid.first_at_or_after(r)?;
        let n = self.grid.len();
        let mut out = self.clone();
        for p in 0..self.n_paths {
            for x in &mut out.values[p * n + start..(p + 1) * n] {
                *x += v;
            }
        }
        Ok(out)
    }
}

fn open_uniform(rng: &mut ChaCha8Rng) -> f64 {
    ((rng.random::<u64>() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

fn poisson_inverse(mean: f64, u: f64) -> u32 {
    let mut k = 0u32;
    let mut p = (-mean).exp();
    let mut cdf = p;
    while u > cdf && p > 0.0 {
        k += 1;
        p *= mean / k as f64;
        cdf += p;
    }
    k
}

/// Samples `n_paths` paths with the default execution mode.
pub fn sample_paths(model: &LevyTriplet, grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<PathBundle> {
    sample_paths_with(model, grid, n_paths, seed, Execution::default())
}

/// Path `p` is drawn from the ChaCha8 stream `p` of `seed`, so it does not
/// depend on `n_paths` nor on the execution mode.
pub fn sample_paths_with(
    model: &LevyTriplet,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    exec: Execution,
) -> Result<PathBundle> {
    if n_paths == 0 {
        return Err(Error::config("n_paths must be at least 1"));
    }
    let steps = grid.steps();
    let n_atoms = model.atoms.len();
    let normal = Normal::standard();
    let per_path = exec.map(n_paths, |p| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(p as u64);
        let mut dw = Vec::with_capacity(steps);
        let mut counts = Vec::with_capacity(steps * n_atoms);
        let mut x = Vec::with_capacity(steps + 1);
        x.push(0.0);
        for i in 0..steps {
            let dt = grid.dt(i);
            let w = normal.inverse_cdf(open_uniform(&mut rng)) * dt.sqrt();
            let mut next = x[i] + model.gamma * dt + model.sigma * w;
            for a in &model.atoms {
                let k = poisson_inverse(a.intensity * dt, open_uniform(&mut rng));
                next += a.mark * (k as f64 - a.intensity * dt);
                counts.push(k);
            }
            dw.push(w);
            x.push(next);
        }
        (dw, counts, x)
    });
    let mut brownian = Vec::with_capacity(n_paths * steps);
    let mut jumps = Vec::with_capacity(n_paths * steps * n_atoms);
    let mut values = Vec::with_capacity(n_paths * (steps + 1));
    for (dw, counts, x) in per_path {
        brownian.extend(dw);
        jumps.extend(counts);
        values.extend(x);
    }
    Ok(PathBundle {
        grid: grid.clone(),
        model: model.clone(),
        n_paths,
        brownian,
        jumps,
        values,
        seed,
    })
}

/// Adds `v` to every node at time `>= r`.
pub fn shift_values(grid: &TimeGrid, values: &[f64], r: f64, v: f64) -> Result<Vec<f64>> {
    if v == 0.0 || !v.is_finite() {
        return Err(Error::domain("shift size must be finite and nonzero"));
    }
    let start = grid.first_at_or_after(r)?;
    let mut out = values.to_vec();
    for x in &mut out[start..] {
        *x += v;
    }
    Ok(out)
}

/// Path `path_index` of `bundle` shifted by `v` on `[r, T]`.
pub fn shift_path(bundle: &PathBundle, path_index: usize, r: f64, v: f64) -> Result<Vec<f64>> {
    if path_index >= bundle.n_paths {
        return Err(Error::domain(format!("path index {path_index} out of range")));
    }
    shift_values(&bundle.grid, bundle.path(path_index), r, v)
}

/// `1 ∧ |x|`.
pub fn kappa(x: f64) -> f64 {
    x.abs().min(1.0)
}

/// `1 ∧ |n x|`.
pub fn kappa_n(x: f64, n: u32) -> f64 {
    (n as f64 * x.abs()).min(1.0)
}

/// Atoms obtained from a Lévy density, with the mass that was cut away.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretizedMeasure {
    pub atoms: Vec<Atom>,
    /// `int_{|x| < cutoff} x^2 nu(dx)` over the part of the support that was dropped.
    pub truncated_second_moment: f64,
}

/// Replaces `density` on `support` by atoms.
///
/// Each side of zero that survives the cutoff is cut into `n_atoms` cells;
/// every cell becomes one atom at its midpoint carrying the integrated
/// density of the cell. An unbounded side ends with a half-infinite cell
/// whose atom sits at the cell's centre of mass.
pub fn discretize_density<F>(
    density: F,
    support: (f64, f64),
    n_atoms: usize,
    small_jump_cutoff: f64,
) -> Result<DiscretizedMeasure>
where
    F: Fn(f64) -> f64,
{
    let (lo, hi) = support;
    if lo.is_nan() || hi.is_nan() || lo >= hi {
        return Err(Error::config("density support must be an interval lo < hi"));
    }
    if n_atoms == 0 {
        return Err(Error::config("n_atoms must be at least 1"));
    }
    if !(small_jump_cutoff.is_finite() && small_jump_cutoff > 0.0) {
        return Err(Error::config("small_jump_cutoff must be positive"));
    }
    let quad = Integrator {
        rel_tol: 1e-10,
        abs_tol: 1e-13,
        max_intervals: 4000,
    };
    let checked = |x: f64| {
        let d = density(x);
        if d < 0.0 {
            f64::NAN
        } else {
            d
        }
    };
    let mut atoms = Vec::new();
    let mut truncated = 0.0;
    // (piece lo, piece hi) on each side of zero
    let c = small_jump_cutoff;
    let neg = (lo, hi.min(0.0));
    let pos = (lo.max(0.0), hi);
    for (a, b) in [neg, pos] {
        if a >= b {
            continue;
        }
        // dropped small jumps
        let (sa, sb) = (a.max(-c), b.min(c));
        if sa < sb {
            truncated += quad
                .integrate(|x| x * x * checked(x), sa, sb)
                .map_err(|e| Error::config(format!("small-jump second moment: {e}")))?;
        }
        let (ka, kb) = if b <= 0.0 { (a, b.min(-c)) } else { (a.max(c), b) };
        if ka >= kb {
            continue;
        }
        atoms.extend(cells(&checked, ka, kb, n_atoms, &quad)?);
    }
    if !truncated.is_finite() {
        return Err(Error::config("density has negative or non-finite values"));
    }
    Ok(DiscretizedMeasure {
        atoms: validate_atoms(&atoms)?,
        truncated_second_moment: truncated,
    })
}

fn cells<F: Fn(f64) -> f64>(density: &F, a: f64, b: f64, n: usize, quad: &Integrator) -> Result<Vec<Atom>> {
    let tail_err = |e: Error| Error::config(format!("density not integrable on [{a}, {b}]: {e}"));
    let mut out = Vec::with_capacity(n);
    let push = |out: &mut Vec<Atom>, mark: f64, mass: f64| -> Result<()> {
        if !mass.is_finite() {
            return Err(Error::config("density has negative or non-finite values"));
        }
        if mass > 0.0 {
            out.push(Atom::new(mark, mass));
        }
        Ok(())
    };
    match (a.is_finite(), b.is_finite()) {
        (true, true) => {
            let h = (b - a) / n as f64;
            for k in 0..n {
                let (l, r) = (a + k as f64 * h, if k + 1 == n { b } else { a + (k + 1) as f64 * h });
                let mass = quad.integrate(density, l, r).map_err(tail_err)?;
                push(&mut out, 0.5 * (l + r), mass)?;
            }
        }
        _ => {
            // finite end `e`, direction `s` (+1 towards +inf)
            let (e, s) = if a.is_finite() { (a, 1.0) } else { (b, -1.0) };
            let scale = e.abs().max(1.0);
            let at = |t: f64| e + s * scale * t / (1.0 - t);
            let ts: Vec<f64> = (0..n).map(|k| k as f64 / n as f64).collect();
            for k in 0..n.saturating_sub(1) {
                let (l, r) = (at(ts[k]), at(ts[k + 1]));
                let (l, r) = if l < r { (l, r) } else { (r, l) };
                let mass = quad.integrate(density, l, r).map_err(tail_err)?;
                push(&mut out, 0.5 * (l + r), mass)?;
            }
            let start = at(ts[n - 1]);
            let (l, r) = if s > 0.0 { (start, f64::INFINITY) } else { (f64::NEG_INFINITY, start) };
            let mass = quad.integrate(density, l, r).map_err(tail_err)?;
            if mass > 0.0 {
                let first = quad.integrate(|x| x * density(x), l, r).map_err(tail_err)?;
                push(&mut out, first / mass, mass)?;
            }
        }
    }
    Ok(out)
}
