//! Generators `phi(f(t, y, z, G(t, U)), sum_j H(U_j) lambda_j)` and their
//! solution as the limit of the cutoff sequence
//! `H^n(u, x) = H(u) min(1, n |x|)`.

use std::fmt;
use std::sync::Arc;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{
    compute_bounds, smooth_clamp, smooth_clamp_derivative, truncate_generator, AuditBox, BiFn, BoundCertificate, GeneratorSpec, JumpComposition, ScalarFn,
    TerminalSpec,
};
use crate::levy::{validate_atoms, Atom, LevyTriplet, PathBundle, TimeGrid};
use crate::solver::{
    solve_markov_dp, solve_picard_regression, solve_picard_truncated, DiscreteSolution, DpSettings, ForwardSpec, PicardSettings, Representation,
};

/// `(e^{alpha u} - alpha u - 1) / alpha` for `alpha > 0`, by its series
/// when `|alpha u| < 1e-4`.
pub fn h_alpha(u: f64, alpha: f64) -> f64 {
    let x = alpha * u;
    if x.abs() < 1e-4 {
        0.5 * u * u * alpha * (1.0 + x / 3.0 + x * x / 12.0 + x * x * x / 60.0)
    } else {
        (x.exp_m1() - x) / alpha
    }
}

/// `e^{alpha u} - 1`.
pub fn dh_alpha(u: f64, alpha: f64) -> f64 {
    (alpha * u).exp_m1()
}

/// The ingredients `(f, H, phi)` and the constant map `R' -> c_{R'}` with
/// `|H'(u)| <= c_{R'} |u|` on `|u| <= R'`.
#[derive(Clone)]
pub struct HGeneratorSpec {
    pub base: GeneratorSpec,
    pub h: ScalarFn,
    pub dh: ScalarFn,
    pub phi: BiFn,
    pub dphi_v: BiFn,
    pub dphi_w: BiFn,
    pub c_of: ScalarFn,
}

impl fmt::Debug for HGeneratorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HGeneratorSpec").field("base", &self.base).finish_non_exhaustive()
    }
}

impl HGeneratorSpec {
    /// `phi(v, w) = v + w` with `H = H_alpha`, so `c_{R'} = alpha e^{alpha R'}`.
    pub fn exponential_utility(base: GeneratorSpec, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be positive, got {alpha}")));
        }
        Ok(HGeneratorSpec {
            base,
            h: Arc::new(move |u| h_alpha(u, alpha)),
            dh: Arc::new(move |u| dh_alpha(u, alpha)),
            phi: Arc::new(|v, w| v + w),
            dphi_v: Arc::new(|_, _| 1.0),
            dphi_w: Arc::new(|_, _| 1.0),
            c_of: Arc::new(move |r| alpha * (alpha * r).exp()),
        })
    }

    /// Same `phi` with `H` replaced by zero.
    pub fn without_h(base: GeneratorSpec) -> Self {
        HGeneratorSpec {
            base,
            h: Arc::new(|_| 0.0),
            dh: Arc::new(|_| 0.0),
            phi: Arc::new(|v, w| v + w),
            dphi_v: Arc::new(|_, _| 1.0),
            dphi_w: Arc::new(|_, _| 1.0),
            c_of: Arc::new(|_| 0.0),
        }
    }

    /// Samples the structural conditions on `H` and `phi`; returns the
    /// violations found.
    pub fn audit(&self, sample: &AuditBox, radii: &[f64], seed: u64) -> Vec<String> {
        let mut out = Vec::new();
        let h0 = (self.h)(0.0);
        if h0 != 0.0 {
            out.push(format!("H(0) = {h0} != 0"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |r: (f64, f64)| r.0 + (r.1 - r.0) * rng.random::<f64>();
        let wide = (-1e3, 1e3);
        for _ in 0..sample.samples {
            let (v, w) = (draw(wide), draw(sample.u));
            let dv = (self.dphi_v)(v, w);
            if dv.abs() > 1.0 + 1e-12 {
                out.push(format!("|dphi/dv({v}, {w})| = {} > 1", dv.abs()));
            }
            let dw = (self.dphi_w)(v, w);
            if !dw.is_finite() || dw.abs() > 1e12 {
                out.push(format!("dphi/dw({v}, {w}) = {dw} is not bounded"));
            }
            let (t, y, z, u, up, x) = (
                draw(sample.t),
                draw(sample.y),
                draw(sample.z),
                draw(sample.u),
                draw(sample.u_prime),
                draw(sample.state),
            );
            let path = [x];
            let fv = (self.base.f)(&path, t, y, z, u);
            let pv = (self.dphi_v)(fv, w);
            let first = pv * self.base.partial_u(&path, t, y, z, u) * (self.base.dg)(t, up);
            let second = first + (self.dphi_w)(fv, w) * (self.dh)(up);
            if first < -1.0 - 1e-9 || second < -1.0 - 1e-9 {
                out.push(format!(
                    "comparison products ({first}, {second}) below -1 at t={t}, y={y}, z={z}, u={u}, u'={up}, w={w}"
                ));
            }
        }
        for &r in radii {
            let c = (self.c_of)(r);
            for k in 0..=200 {
                let u = -r + 2.0 * r * k as f64 / 200.0;
                let d = (self.dh)(u).abs();
                if d > c * u.abs() * (1.0 + 1e-12) + 1e-12 {
                    out.push(format!("|H'({u})| = {d} > c_R' |u| with R' = {r}"));
                }
            }
        }
        out
    }

    /// `H` evaluated at `b_M(u)`, which leaves it unchanged on `|u| <= M - 1`.
    fn clamped(&self, m: f64) -> Result<Self> {
        smooth_clamp(0.0, m)?;
        let (h, dh) = (self.h.clone(), self.dh.clone());
        let c = self.c_of.clone();
        Ok(HGeneratorSpec {
            h: Arc::new(move |u| h(smooth_clamp(u, m).unwrap_or(u))),
            dh: Arc::new(move |u| {
                let b = smooth_clamp(u, m).unwrap_or(u);
                dh(b) * smooth_clamp_derivative(u, m).unwrap_or(1.0)
            }),
            c_of: Arc::new(move |r| c(r.min(m))),
            ..self.clone()
        })
    }

    fn composed(&self, base: GeneratorSpec, cutoff: Option<u32>) -> GeneratorSpec {
        let name = match cutoff {
            Some(n) => format!("H-cutoff[{n}]({})", base.name),
            None => format!("H({})", base.name),
        };
        GeneratorSpec {
            name,
            composition: Some(JumpComposition {
                h: self.h.clone(),
                dh: self.dh.clone(),
                phi: self.phi.clone(),
                dphi_v: self.dphi_v.clone(),
                dphi_w: self.dphi_w.clone(),
                cutoff,
            }),
            ..base
        }
    }
}

/// `f^n(s, y, z, U) = phi(f(s, y, z, G(s, U)), sum_j H(U_j) kappa_n(x_j) lambda_j)`.
///
/// The returned spec keeps the coefficient functions of the base, so its
/// bound certificate does not depend on `n`.
pub fn build_cutoff_generator(hspec: &HGeneratorSpec, n: u32, atoms: &[Atom]) -> Result<GeneratorSpec> {
    if n == 0 {
        return Err(Error::config("cutoff index n must be at least 1"));
    }
    validate_atoms(atoms)?;
    Ok(hspec.composed(hspec.base.clone(), Some(n)))
}

/// The uncut generator `phi(f(.., G), sum_j H(U_j) lambda_j)`.
pub fn build_limit_generator(hspec: &HGeneratorSpec) -> GeneratorSpec {
    hspec.composed(hspec.base.clone(), None)
}

/// Default schedule `1, 2, 4, ..., 1024`.
pub fn default_schedule() -> Vec<u32> {
    (0..=10).map(|k| 1u32 << k).collect()
}

/// Where the cutoff problems are solved; every `n` shares the same bundle
/// or lattice.
pub enum HSolver<'a> {
    Paths {
        bundle: &'a PathBundle,
        settings: PicardSettings,
    },
    Lattice {
        forward: &'a ForwardSpec,
        terminal_fn: &'a (dyn Fn(f64) -> f64 + Sync),
        lattice: &'a [f64],
        grid: &'a TimeGrid,
        settings: DpSettings,
    },
}

/// One row of the convergence table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormRow {
    pub n: u32,
    pub m: u32,
    /// Empirical `S_2` distance: `sqrt(mean sup_t |Y^n - Y^m|^2)`.
    pub dy: f64,
    /// `sqrt(mean sum_i dt_i |Z^n - Z^m|^2)`.
    pub dz: f64,
    /// `sqrt(mean sum_i dt_i sum_j lambda_j |U^n - U^m|^2)`.
    pub du: f64,
}

impl NormRow {
    pub fn total(&self) -> f64 {
        self.dy + self.dz + self.du
    }
}

/// Result of [`solve_h_limit`].
#[derive(Debug, Clone)]
pub struct HLimitResult {
    pub solution: DiscreteSolution,
    pub table: Vec<NormRow>,
    pub converged: bool,
    /// Certificate of the base generator, shared by every `n`.
    pub certificate: BoundCertificate,
    pub last_n: u32,
}

/// Settings of [`solve_h_limit`].
#[derive(Debug, Clone, PartialEq)]
pub struct HLimitSettings {
    pub schedule: Vec<u32>,
    pub cauchy_tol: f64,
    /// Solve with the truncated base generator.
    pub truncate: bool,
}

impl Default for HLimitSettings {
    fn default() -> Self {
        HLimitSettings {
            schedule: default_schedule(),
            cauchy_tol: 1e-4,
            truncate: true,
        }
    }
}

/// Solves the cutoff problems along the schedule until the consecutive
/// distance `dY + dZ + dU` drops below `cauchy_tol`.
pub fn solve_h_limit(
    hspec: &HGeneratorSpec,
    terminal: &TerminalSpec,
    model: &LevyTriplet,
    solver: &HSolver<'_>,
    settings: &HLimitSettings,
) -> Result<HLimitResult> {
    let sched = &settings.schedule;
    if sched.is_empty() || sched.windows(2).any(|w| w[1] <= w[0]) || sched[0] == 0 {
        return Err(Error::config("n_schedule must be a nonempty increasing list of positive integers"));
    }
    if !(settings.cauchy_tol > 0.0) {
        return Err(Error::config("cauchy_tol must be positive"));
    }
    let atoms = model.atoms();
    let grid = match solver {
        HSolver::Paths { bundle, .. } => bundle.grid(),
        HSolver::Lattice { grid, .. } => grid,
    };
    let certificate = compute_bounds(&hspec.base, terminal, atoms, grid.horizon())?;
    let (base, hs) = if settings.truncate {
        (truncate_generator(&hspec.base, &certificate, atoms), hspec.clamped(2.0 * certificate.r)?)
    } else {
        (hspec.base.clone(), hspec.clone())
    };
    let solve = |n: u32| -> Result<DiscreteSolution> {
        let spec = hs.composed(base.clone(), Some(n));
        match solver {
            HSolver::Paths { bundle, settings: ps } if settings.truncate => {
                solve_picard_truncated(model, &spec, terminal, bundle, ps, &certificate)
            }
            HSolver::Paths { bundle, settings: ps } => solve_picard_regression(model, &spec, terminal, bundle, ps),
            HSolver::Lattice {
                forward,
                terminal_fn,
                lattice,
                grid,
                settings,
            } => solve_markov_dp(forward, &spec, terminal_fn, atoms, lattice, grid, settings),
        }
    };
    let mut prev = solve(sched[0])?;
    let mut table = Vec::new();
    let mut converged = false;
    let mut last_n = sched[0];
    for &m in &sched[1..] {
        let next = solve(m)?;
        let row = distance(&prev, &next, last_n, m);
        table.push(row);
        prev = next;
        last_n = m;
        if row.total() < settings.cauchy_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        prev.diagnostics.warnings.push(format!(
            "cutoff schedule exhausted at n = {last_n} before reaching tolerance {}",
            settings.cauchy_tol
        ));
    }
    Ok(HLimitResult {
        solution: prev,
        table,
        converged,
        certificate,
        last_n,
    })
}

/// Discrete distances between two solutions on the same discretization.
pub fn distance(a: &DiscreteSolution, b: &DiscreteSolution, n: u32, m: u32) -> NormRow {
    let w = a.width();
    let nodes = a.grid.len();
    let atoms = &a.atoms;
    let mut sup2 = 0.0;
    for k in 0..w {
        let mut s = 0.0f64;
        for i in 0..nodes {
            s = s.max((a.y_at(i, k) - b.y_at(i, k)).abs());
        }
        sup2 += s * s;
    }
    let mut z2 = 0.0;
    let mut u2 = 0.0;
    for i in 0..a.zu_nodes.min(a.grid.steps()) {
        let dt = a.grid.dt(i);
        for k in 0..w {
            z2 += dt * (a.z_at(i, k) - b.z_at(i, k)).powi(2);
            for (j, at) in atoms.iter().enumerate() {
                u2 += dt * at.intensity * (a.u_at(i, k, j) - b.u_at(i, k, j)).powi(2);
            }
        }
    }
    let wf = w as f64;
    NormRow {
        n,
        m,
        dy: (sup2 / wf).sqrt(),
        dz: (z2 / wf).sqrt(),
        du: (u2 / wf).sqrt(),
    }
}

/// True when the representation of both solutions is shared.
pub fn shares_randomness(a: &DiscreteSolution, b: &DiscreteSolution) -> bool {
    a.same_discretization(b)
        && matches!(
            (&a.representation, &b.representation),
            (Representation::Paths { .. }, Representation::Paths { .. })
                | (Representation::Lattice { .. }, Representation::Lattice { .. })
        )
}
