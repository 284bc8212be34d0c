//! Backward solvers and the discrete solution container.

pub mod closed_form;
pub mod dp;
pub mod picard;
pub mod regression;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{BiFn, ScalarFn};
use crate::levy::{kappa, Atom, LevyTriplet, TimeGrid};

pub use closed_form::closed_form_linear;
pub use dp::{solve_markov_dp, DpSettings};
pub use picard::{solve_picard_regression, solve_picard_truncated, EstimateCaps, PicardSettings};
pub use regression::RegressionBasis;

/// Coefficients of the forward SDE
/// `dPsi = b(Psi) ds + sigma(Psi) dW + int beta(Psi, x) N~(ds, dx)`.
#[derive(Clone)]
pub struct ForwardSpec {
    pub b_coef: ScalarFn,
    pub sigma_coef: ScalarFn,
    pub beta: BiFn,
    /// Declared constant with `|beta(psi, x)| <= c_beta kappa(x)`.
    pub c_beta: f64,
}

impl fmt::Debug for ForwardSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ForwardSpec").field("c_beta", &self.c_beta).finish_non_exhaustive()
    }
}

impl ForwardSpec {
    pub fn new(b_coef: ScalarFn, sigma_coef: ScalarFn, beta: BiFn, c_beta: f64) -> Self {
        ForwardSpec {
            b_coef,
            sigma_coef,
            beta,
            c_beta,
        }
    }

    /// `dPsi = sigma dW`.
    pub fn brownian(sigma: f64) -> Self {
        ForwardSpec::new(Arc::new(|_| 0.0), Arc::new(move |_| sigma), Arc::new(|_, _| 0.0), 0.0)
    }

    /// The Lévy process itself: `b = gamma`, constant `sigma`, `beta(psi, x) = x`.
    pub fn levy(model: &LevyTriplet) -> Self {
        let (g, s) = (model.gamma(), model.sigma());
        let c_beta = model.atoms().iter().fold(1.0f64, |m, a| m.max(a.mark.abs()));
        ForwardSpec::new(Arc::new(move |_| g), Arc::new(move |_| s), Arc::new(|_, x| x), c_beta)
    }

    /// Samples `|beta| <= c_beta kappa` and finite-difference Lipschitz
    /// bounds of the coefficients on `[lo, hi]`; returns the violations.
    pub fn audit(&self, lo: f64, hi: f64, atoms: &[Atom], lipschitz: f64) -> Vec<String> {
        let mut out = Vec::new();
        const N: usize = 101;
        let at = |k: usize| lo + (hi - lo) * k as f64 / (N - 1) as f64;
        for k in 0..N {
            let v = at(k);
            for a in atoms {
                let beta = (self.beta)(v, a.mark);
                if beta.abs() > self.c_beta * kappa(a.mark) * (1.0 + 1e-12) {
                    out.push(format!("|beta({v}, {})| = {} exceeds c_beta kappa", a.mark, beta.abs()));
                }
            }
            if k + 1 < N {
                let w = at(k + 1);
                let h = w - v;
                let check = |name: &str, d: f64, out: &mut Vec<String>| {
                    if d.abs() > lipschitz * h * (1.0 + 1e-9) {
                        out.push(format!("{name} slope {} exceeds {lipschitz} on [{v}, {w}]", d / h));
                    }
                };
                check("b", (self.b_coef)(w) - (self.b_coef)(v), &mut out);
                check("sigma", (self.sigma_coef)(w) - (self.sigma_coef)(v), &mut out);
                for a in atoms {
                    check("beta", (self.beta)(w, a.mark) - (self.beta)(v, a.mark), &mut out);
                }
            }
        }
        out
    }
}

/// Where a [`DiscreteSolution`] lives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Representation {
    /// Values per state of a spatial lattice.
    Lattice { states: Vec<f64> },
    /// Values per path of a bundle identified by its seed.
    Paths { n_paths: usize, seed: u64 },
}

/// Solver diagnostics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub iterations: usize,
    /// Successive-iterate differences (Picard) or inner fixed-point
    /// iteration maxima (lattice).
    pub residuals: Vec<f64>,
    pub converged: bool,
    pub ridge_fallback: bool,
    /// Largest transition probability mass that left the lattice.
    pub lattice_escape_mass: f64,
    /// Largest Poisson mass dropped by the jump branching.
    pub jump_truncation_mass: f64,
    pub damping_used: bool,
    pub warnings: Vec<String>,
}

/// `Y`, `Z`, `U` on a time grid, per lattice state or per path.
///
/// `Z` and `U` are stored on the first `zu_nodes` nodes: every node for a
/// lattice, every node but the last for paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteSolution {
    pub grid: TimeGrid,
    pub representation: Representation,
    pub atoms: Vec<Atom>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub u: Vec<f64>,
    pub zu_nodes: usize,
    pub diagnostics: Diagnostics,
}

impl DiscreteSolution {
    /// Allocates a zero solution.
    pub fn zeros(grid: TimeGrid, representation: Representation, atoms: Vec<Atom>) -> Self {
        let width = match &representation {
            Representation::Lattice { states } => states.len(),
            Representation::Paths { n_paths, .. } => *n_paths,
        };
        let n = grid.len();
        let zu_nodes = match representation {
            Representation::Lattice { .. } => n,
            Representation::Paths { .. } => n - 1,
        };
        let j = atoms.len();
        DiscreteSolution {
            grid,
            representation,
            atoms,
            y: vec![0.0; n * width],
            z: vec![0.0; zu_nodes * width],
            u: vec![0.0; zu_nodes * width * j],
            zu_nodes,
            diagnostics: Diagnostics::default(),
        }
    }

    /// Number of states or paths.
    pub fn width(&self) -> usize {
        self.y.len() / self.grid.len()
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn y_at(&self, i: usize, k: usize) -> f64 {
        self.y[i * self.width() + k]
    }

    pub fn z_at(&self, i: usize, k: usize) -> f64 {
        self.z[i * self.width() + k]
    }

    pub fn u_at(&self, i: usize, k: usize, j: usize) -> f64 {
        self.u[(i * self.width() + k) * self.n_atoms() + j]
    }

    /// `Y(t_i, .)`.
    pub fn y_slice(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.y[i * w..(i + 1) * w]
    }

    pub fn z_slice(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.z[i * w..(i + 1) * w]
    }

    /// `U(t_i, ., .)`, atoms fastest.
    pub fn u_slice(&self, i: usize) -> &[f64] {
        let w = self.width() * self.n_atoms();
        &self.u[i * w..(i + 1) * w]
    }

    /// Lattice states, if any.
    pub fn states(&self) -> Option<&[f64]> {
        match &self.representation {
            Representation::Lattice { states } => Some(states),
            Representation::Paths { .. } => None,
        }
    }

    /// Mean of `Y(t_i, .)` over the stored states or paths.
    pub fn mean_y(&self, i: usize) -> f64 {
        crate::par::pairwise_sum(self.y_slice(i)) / self.width() as f64
    }

    /// Checks shape consistency and finiteness.
    pub fn validate(&self) -> Result<()> {
        let w = self.width();
        if self.y.len() != w * self.grid.len()
            || self.z.len() != w * self.zu_nodes
            || self.u.len() != w * self.zu_nodes * self.n_atoms()
        {
            return Err(Error::config("solution arrays do not match the grid"));
        }
        if let Representation::Lattice { states } = &self.representation {
            if states.len() != w {
                return Err(Error::config("lattice size does not match the solution width"));
            }
        }
        for (name, v) in [("Y", &self.y), ("Z", &self.z), ("U", &self.u)] {
            if let Some(pos) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::Numerical {
                    location: format!("{name}[{pos}]"),
                    message: "non-finite value".into(),
                });
            }
        }
        Ok(())
    }

    /// True when both solutions live on the same grid and the same lattice
    /// or path bundle.
    pub fn same_discretization(&self, other: &DiscreteSolution) -> bool {
        self.grid == other.grid
            && self.representation == other.representation
            && self.atoms == other.atoms
            && self.zu_nodes == other.zu_nodes
    }
}
