//! Structured generators `f(path, t, y, z, G(t, U))`, the jump aggregation
//! `G`, the bound certificate `(R, Q, P)`, smooth truncation and the
//! comparison-condition audit.

use std::fmt;
use std::sync::Arc;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::levy::{kappa, kappa_n, Atom};
use crate::solver::closed_form::propagate;

/// Function of time.
pub type TimeFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
/// Function of `(t, u)` or `(t, mark)`.
pub type TimeMarkFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
/// `f(path, t, y, z, w)` where `path` holds the values up to and including
/// the current node (its last entry is the current state) and `w` is the
/// aggregated jump argument `G(t, U)`.
pub type DriverFn = Arc<dyn Fn(&[f64], f64, f64, f64, f64) -> f64 + Send + Sync>;
/// `(D_{r,v} f)(path, t, y, z, w)`.
pub type MalliavinDriverFn = Arc<dyn Fn(&MalliavinArgs<'_>) -> f64 + Send + Sync>;
/// Function of two reals.
pub type BiFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
/// Function of one real.
pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Arguments passed to a user-supplied Malliavin derivative of `f`.
#[derive(Debug, Clone, Copy)]
pub struct MalliavinArgs<'a> {
    pub r: f64,
    pub v: f64,
    pub t: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub path: &'a [f64],
}

/// Outer composition `phi(f(..), sum_j H(U_j) kappa_n(x_j) lambda_j)` used by
/// the generators of the `hgen` module. `cutoff = None` drops the `kappa_n`
/// weight.
#[derive(Clone)]
pub struct JumpComposition {
    pub h: ScalarFn,
    pub dh: ScalarFn,
    pub phi: BiFn,
    pub dphi_v: BiFn,
    pub dphi_w: BiFn,
    pub cutoff: Option<u32>,
}

impl JumpComposition {
    /// `sum_j H(U_j) kappa_n(x_j) lambda_j`.
    pub fn aggregate(&self, u: &[f64], atoms: &[Atom]) -> f64 {
        atoms
            .iter()
            .zip(u)
            .map(|(a, &uj)| {
                let wt = self.cutoff.map_or(1.0, |n| kappa_n(a.mark, n));
                (self.h)(uj) * wt * a.intensity
            })
            .sum()
    }
}

/// A generator together with the coefficient functions of its growth and
/// Lipschitz assumptions.
#[derive(Clone)]
pub struct GeneratorSpec {
    pub name: String,
    pub f: DriverFn,
    /// Jump aggregation integrand with `g(t, 0) = 0`.
    pub g: TimeMarkFn,
    pub dg: TimeMarkFn,
    /// Lipschitz coefficient in `y`.
    pub a: TimeFn,
    /// Lipschitz coefficient in `(z, u)`, multiplied by `rho`.
    pub b: TimeFn,
    /// `|f(., t, 0, 0, 0)| <= k_f(t)`.
    pub k_f: TimeFn,
    pub rho: ScalarFn,
    /// Bound on the Malliavin derivative of `f`; mark `0` is the Brownian direction.
    pub p: TimeMarkFn,
    pub df_y: Option<DriverFn>,
    pub df_z: Option<DriverFn>,
    pub df_u: Option<DriverFn>,
    pub d_malliavin_f: Option<MalliavinDriverFn>,
    pub composition: Option<JumpComposition>,
}

impl fmt::Debug for GeneratorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GeneratorSpec")
            .field("name", &self.name)
            .field("df_y", &self.df_y.is_some())
            .field("df_z", &self.df_z.is_some())
            .field("df_u", &self.df_u.is_some())
            .field("d_malliavin_f", &self.d_malliavin_f.is_some())
            .field("composition", &self.composition.is_some())
            .finish()
    }
}

fn zero_t() -> TimeFn {
    Arc::new(|_| 0.0)
}

fn constant_t(c: f64) -> TimeFn {
    Arc::new(move |_| c)
}

impl GeneratorSpec {
    /// Generator with `g(t, u) = u`, `rho = 1` and all coefficients zero.
    pub fn new(name: impl Into<String>, f: DriverFn) -> Self {
        GeneratorSpec {
            name: name.into(),
            f,
            g: Arc::new(|_, u| u),
            dg: Arc::new(|_, _| 1.0),
            a: zero_t(),
            b: zero_t(),
            k_f: zero_t(),
            rho: Arc::new(|_| 1.0),
            p: Arc::new(|_, _| 0.0),
            df_y: None,
            df_z: None,
            df_u: None,
            d_malliavin_f: None,
            composition: None,
        }
    }

    pub fn with_g(mut self, g: TimeMarkFn, dg: TimeMarkFn) -> Self {
        self.g = g;
        self.dg = dg;
        self
    }

    pub fn with_coefficients(mut self, a: TimeFn, b: TimeFn, k_f: TimeFn) -> Self {
        self.a = a;
        self.b = b;
        self.k_f = k_f;
        self
    }

    pub fn with_rho(mut self, rho: ScalarFn) -> Self {
        self.rho = rho;
        self
    }

    pub fn with_p(mut self, p: TimeMarkFn) -> Self {
        self.p = p;
        self
    }

    pub fn with_partials(mut self, df_y: DriverFn, df_z: DriverFn, df_u: DriverFn) -> Self {
        self.df_y = Some(df_y);
        self.df_z = Some(df_z);
        self.df_u = Some(df_u);
        self
    }

    pub fn with_malliavin(mut self, d: MalliavinDriverFn) -> Self {
        self.d_malliavin_f = Some(d);
        self
    }

    /// `G(t, U) = sum_j g(t, U_j) kappa(x_j) lambda_j`, `u[j]` being `U(x_j)`.
    pub fn aggregate(&self, t: f64, u: &[f64], atoms: &[Atom]) -> f64 {
        atoms
            .iter()
            .zip(u)
            .map(|(a, &uj)| (self.g)(t, uj) * kappa(a.mark) * a.intensity)
            .sum()
    }

    /// Full driver value at `(path, t, y, z, U)`.
    pub fn driver(&self, path: &[f64], t: f64, y: f64, z: f64, u: &[f64], atoms: &[Atom]) -> f64 {
        let w = self.aggregate(t, u, atoms);
        let v = (self.f)(path, t, y, z, w);
        match &self.composition {
            None => v,
            Some(c) => (c.phi)(v, c.aggregate(u, atoms)),
        }
    }

    /// `df/dy`, supplied or by central differences.
    pub fn partial_y(&self, path: &[f64], t: f64, y: f64, z: f64, w: f64) -> f64 {
        match &self.df_y {
            Some(d) => d(path, t, y, z, w),
            None => central(|s| (self.f)(path, t, s, z, w), y),
        }
    }

    pub fn partial_z(&self, path: &[f64], t: f64, y: f64, z: f64, w: f64) -> f64 {
        match &self.df_z {
            Some(d) => d(path, t, y, z, w),
            None => central(|s| (self.f)(path, t, y, s, w), z),
        }
    }

    pub fn partial_u(&self, path: &[f64], t: f64, y: f64, z: f64, w: f64) -> f64 {
        match &self.df_u {
            Some(d) => d(path, t, y, z, w),
            None => central(|s| (self.f)(path, t, y, z, s), w),
        }
    }

    /// Samples the structural assumptions on `f` and `g` and returns the
    /// violations found (empty when the audit passes).
    pub fn audit(&self, sample: &AuditBox, seed: u64) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        let draw = |r: (f64, f64), rng: &mut ChaCha8Rng| r.0 + (r.1 - r.0) * rng.random::<f64>();
        for _ in 0..sample.samples {
            let t = draw(sample.t, &mut rng);
            let x = draw(sample.state, &mut rng);
            let path = [x];
            let (y, y2) = (draw(sample.y, &mut rng), draw(sample.y, &mut rng));
            let (z, z2) = (draw(sample.z, &mut rng), draw(sample.z, &mut rng));
            let (u, u2) = (draw(sample.u, &mut rng), draw(sample.u, &mut rng));
            let tol = 1e-9;
            let g0 = (self.g)(t, 0.0);
            if g0.abs() > tol {
                out.push(format!("g({t}, 0) = {g0} != 0"));
            }
            let lhs = ((self.g)(t, u) - (self.g)(t, u2)).abs();
            let rhs = (self.rho)(u.abs().max(u2.abs())) * (u - u2).abs();
            if lhs > rhs * (1.0 + tol) + tol {
                out.push(format!("|g(t,u)-g(t,u')| > rho(|u|v|u'|)|u-u'| at t={t}, u={u}, u'={u2}"));
            }
            let f0 = (self.f)(&path, t, 0.0, 0.0, 0.0).abs();
            if f0 > (self.k_f)(t) * (1.0 + tol) + tol {
                out.push(format!("|f(x, t, 0, 0, 0)| = {f0} > k_f(t) at t={t}, x={x}"));
            }
            let lhs = ((self.f)(&path, t, y, z, u) - (self.f)(&path, t, y2, z2, u2)).abs();
            let m = z.abs().max(z2.abs()).max(u.abs()).max(u2.abs());
            let rhs = (self.a)(t) * (y - y2).abs() + (self.rho)(m) * (self.b)(t) * ((z - z2).abs() + (u - u2).abs());
            if lhs > rhs * (1.0 + tol) + tol {
                out.push(format!(
                    "local Lipschitz bound fails at t={t}, x={x}, (y,z,u)=({y},{z},{u}), (y',z',u')=({y2},{z2},{u2})"
                ));
            }
        }
        out
    }
}

/// Central difference with step `1e-6 (1 + |x|)`.
pub fn central<F: Fn(f64) -> f64>(h: F, x: f64) -> f64 {
    let step = 1e-6 * (1.0 + x.abs());
    (h(x + step) - h(x - step)) / (2.0 * step)
}

/// Ranges sampled by [`GeneratorSpec::audit`] and
/// [`check_comparison_condition`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditBox {
    pub t: (f64, f64),
    pub y: (f64, f64),
    pub z: (f64, f64),
    pub u: (f64, f64),
    pub u_prime: (f64, f64),
    /// Range of the current state handed to `f` as a one-node path.
    pub state: (f64, f64),
    pub samples: usize,
}

impl AuditBox {
    pub fn symmetric(horizon: f64, radius: f64) -> Self {
        AuditBox {
            t: (0.0, horizon),
            y: (-radius, radius),
            z: (-radius, radius),
            u: (-radius, radius),
            u_prime: (-radius, radius),
            state: (0.0, 0.0),
            samples: 1000,
        }
    }
}

/// Terminal condition `xi = xi(path)` with its bounds.
#[derive(Clone)]
pub struct TerminalSpec {
    pub name: String,
    pub xi: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    /// `||xi||_inf`.
    pub a_xi: f64,
    /// `A_{D xi}(x)`; `x = 0` is the Brownian direction.
    pub a_dxi: ScalarFn,
    /// `D_{r,0} xi` given the full path and the index of the first node `>= r`.
    pub d_xi_brownian: Option<Arc<dyn Fn(&[f64], usize) -> f64 + Send + Sync>>,
}

impl fmt::Debug for TerminalSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TerminalSpec")
            .field("name", &self.name)
            .field("a_xi", &self.a_xi)
            .finish()
    }
}

impl TerminalSpec {
    pub fn new(name: impl Into<String>, xi: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>, a_xi: f64, a_dxi: ScalarFn) -> Result<Self> {
        if a_xi.is_nan() || a_xi < 0.0 {
            return Err(Error::config("A_xi must be nonnegative"));
        }
        Ok(TerminalSpec {
            name: name.into(),
            xi,
            a_xi,
            a_dxi,
            d_xi_brownian: None,
        })
    }

    pub fn with_brownian_derivative(mut self, d: Arc<dyn Fn(&[f64], usize) -> f64 + Send + Sync>) -> Self {
        self.d_xi_brownian = Some(d);
        self
    }

    /// `xi = c`.
    pub fn constant(c: f64) -> Self {
        TerminalSpec {
            name: format!("constant({c})"),
            xi: Arc::new(move |_| c),
            a_xi: c.abs(),
            a_dxi: Arc::new(|_| 0.0),
            d_xi_brownian: Some(Arc::new(|_, _| 0.0)),
        }
    }

    /// `xi = h(X_T)` for a bounded Lipschitz `h` with derivative `dh`.
    /// `sigma` is the diffusion coefficient of `X`, used for `A_{D xi}(0)`.
    pub fn of_terminal_state(
        name: impl Into<String>,
        h: ScalarFn,
        dh: ScalarFn,
        sup: f64,
        lipschitz: f64,
        sigma: f64,
    ) -> Self {
        let hh = h.clone();
        TerminalSpec {
            name: name.into(),
            xi: Arc::new(move |p: &[f64]| hh(p[p.len() - 1])),
            a_xi: sup,
            a_dxi: Arc::new(move |x| if x == 0.0 { lipschitz * sigma } else { (lipschitz * x.abs()).min(2.0 * sup) }),
            d_xi_brownian: Some(Arc::new(move |p: &[f64], _| sigma * dh(p[p.len() - 1]))),
        }
    }

    /// `xi = X_T` (unbounded; used by the Malliavin identification checks).
    pub fn terminal_value(sigma: f64) -> Self {
        TerminalSpec {
            name: "terminal_value".into(),
            xi: Arc::new(|p: &[f64]| p[p.len() - 1]),
            a_xi: f64::INFINITY,
            a_dxi: Arc::new(move |x| if x == 0.0 { sigma } else { x.abs() }),
            d_xi_brownian: Some(Arc::new(move |_, _| sigma)),
        }
    }
}

/// `b_M`: identity on `[-(M-1), M-1]`, `±M` beyond `±(M+1)`, cubic Hermite
/// blend with end slopes 1 and 0 in between.
pub fn smooth_clamp(x: f64, m: f64) -> Result<f64> {
    if !(m >= 1.0) {
        return Err(Error::domain(format!("smooth_clamp needs M >= 1, got {m}")));
    }
    Ok(clamp_unchecked(x, m))
}

/// Derivative of [`smooth_clamp`] in `x`.
pub fn smooth_clamp_derivative(x: f64, m: f64) -> Result<f64> {
    if !(m >= 1.0) {
        return Err(Error::domain(format!("smooth_clamp needs M >= 1, got {m}")));
    }
    Ok(clamp_slope_unchecked(x, m))
}

fn clamp_unchecked(x: f64, m: f64) -> f64 {
    if m.is_infinite() {
        return x;
    }
    let ax = x.abs();
    let v = if ax <= m - 1.0 {
        ax
    } else if ax >= m + 1.0 {
        m
    } else {
        // s in [0, 1] across the band; b = M - 1 + 2s - s^2
        let s = 0.5 * (ax - (m - 1.0));
        m - 1.0 + 2.0 * s - s * s
    };
    v.copysign(x)
}

fn clamp_slope_unchecked(x: f64, m: f64) -> f64 {
    if m.is_infinite() {
        return 1.0;
    }
    let ax = x.abs();
    if ax <= m - 1.0 {
        1.0
    } else if ax >= m + 1.0 {
        0.0
    } else {
        1.0 - 0.5 * (ax - (m - 1.0))
    }
}

/// `sqrt(sum_j h(x_j)^2 lambda_j)`.
pub fn l2_norm<F: Fn(f64) -> f64>(atoms: &[Atom], h: F) -> f64 {
    atoms
        .iter()
        .map(|a| {
            let v = h(a.mark);
            v * v * a.intensity
        })
        .sum::<f64>()
        .sqrt()
}

/// `||kappa||` in `L_2(nu)`.
pub fn kappa_norm(atoms: &[Atom]) -> f64 {
    l2_norm(atoms, kappa)
}

#[derive(Clone)]
enum Envelopes {
    Computed {
        a: TimeFn,
        k_f: TimeFn,
        p: TimeMarkFn,
        a_xi: f64,
        a_dxi: ScalarFn,
    },
    Constant,
}

/// The constants `R, Q, P` and the time-dependent bounds on `Y`, `Z`, `U`.
#[derive(Clone)]
pub struct BoundCertificate {
    pub r: f64,
    pub q: f64,
    pub p: f64,
    pub horizon: f64,
    /// `rho(2R) ||kappa||`, the Lipschitz constant of the truncated aggregate.
    pub aggregate_lipschitz: f64,
    envelopes: Envelopes,
}

impl fmt::Debug for BoundCertificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BoundCertificate")
            .field("r", &self.r)
            .field("q", &self.q)
            .field("p", &self.p)
            .field("horizon", &self.horizon)
            .finish()
    }
}

/// Serializable summary of a certificate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertificateSummary {
    pub r: f64,
    pub q: f64,
    pub p: f64,
    pub horizon: f64,
}

const BOUNDS_TOL: f64 = 1e-8;

impl BoundCertificate {
    /// Certificate from user-supplied constants; the envelopes are then the
    /// constants `R - 1`, `Q - 1` and `2R - 2`.
    pub fn explicit(r: f64, q: f64, p: f64, horizon: f64, rho: &ScalarFn, atoms: &[Atom]) -> Result<Self> {
        for (name, v) in [("R", r), ("Q", q), ("P", p)] {
            if !(v.is_finite() && v >= 1.0) {
                return Err(Error::config(format!("explicit bound {name} must be finite and >= 1, got {v}")));
            }
        }
        Ok(BoundCertificate {
            r,
            q,
            p,
            horizon,
            aggregate_lipschitz: rho(2.0 * r) * kappa_norm(atoms),
            envelopes: Envelopes::Constant,
        })
    }

    pub fn summary(&self) -> CertificateSummary {
        CertificateSummary {
            r: self.r,
            q: self.q,
            p: self.p,
            horizon: self.horizon,
        }
    }

    /// Right side of the `Y` bound at time `t`.
    pub fn y_envelope(&self, t: f64) -> Result<f64> {
        match &self.envelopes {
            Envelopes::Computed { a, k_f, a_xi, .. } => {
                propagate(a.as_ref(), *a_xi, |s| k_f(s), t, self.horizon, BOUNDS_TOL)
            }
            Envelopes::Constant => Ok(self.r - 1.0),
        }
    }

    /// Right side of the `Z` bound at time `t`.
    pub fn z_envelope(&self, t: f64) -> Result<f64> {
        match &self.envelopes {
            Envelopes::Computed { a, p, a_dxi, .. } => {
                propagate(a.as_ref(), a_dxi(0.0), |s| p(s, 0.0), t, self.horizon, BOUNDS_TOL)
            }
            Envelopes::Constant => Ok(self.q - 1.0),
        }
    }

    /// Right side of the `U` bound at `(t, x)`, before the cap `2R - 2`.
    pub fn u_envelope(&self, t: f64, x: f64) -> Result<f64> {
        match &self.envelopes {
            Envelopes::Computed { a, p, a_dxi, .. } => {
                propagate(a.as_ref(), a_dxi(x), |s| p(s, x), t, self.horizon, BOUNDS_TOL)
            }
            Envelopes::Constant => Ok(2.0 * self.r - 2.0),
        }
    }

    /// `min(u_envelope(t, x), 2R - 2)`.
    pub fn u_bound(&self, t: f64, x: f64) -> Result<f64> {
        Ok(self.u_envelope(t, x)?.min(2.0 * self.r - 2.0))
    }
}

/// Computes `R, Q, P` by adaptive quadrature (relative tolerance `1e-8`).
pub fn compute_bounds(spec: &GeneratorSpec, terminal: &TerminalSpec, atoms: &[Atom], horizon: f64) -> Result<BoundCertificate> {
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::config("horizon must be positive"));
    }
    if !terminal.a_xi.is_finite() {
        return Err(Error::config("A_xi must be finite to compute bounds"));
    }
    let a = spec.a.as_ref();
    let growth = |s: f64| (spec.k_f)(s);
    let r = propagate(a, terminal.a_xi, growth, 0.0, horizon, BOUNDS_TOL)? + 1.0;
    let q = propagate(a, (terminal.a_dxi)(0.0), |s| (spec.p)(s, 0.0), 0.0, horizon, BOUNDS_TOL)? + 1.0;
    let kn = kappa_norm(atoms);
    let adxi_norm = l2_norm(atoms, |x| (terminal.a_dxi)(x));
    let p_norm = |s: f64| l2_norm(atoms, |x| (spec.p)(s, x));
    let inner = propagate(a, adxi_norm, p_norm, 0.0, horizon, BOUNDS_TOL)?;
    let rho2r = (spec.rho)(2.0 * r);
    let p = rho2r * kn * inner + 1.0;
    for (name, v) in [("R", r), ("Q", q), ("P", p)] {
        if !v.is_finite() {
            return Err(Error::config(format!("bound {name} is not finite")));
        }
    }
    Ok(BoundCertificate {
        r,
        q,
        p,
        horizon,
        aggregate_lipschitz: rho2r * kn,
        envelopes: Envelopes::Computed {
            a: spec.a.clone(),
            k_f: spec.k_f.clone(),
            p: spec.p.clone(),
            a_xi: terminal.a_xi,
            a_dxi: terminal.a_dxi.clone(),
        },
    })
}

/// `G(t, U)` for `U` given per atom.
pub fn eval_g(spec: &GeneratorSpec, t: f64, u: &[f64], atoms: &[Atom]) -> f64 {
    spec.aggregate(t, u, atoms)
}

/// Globally Lipschitz truncation `f(b_R(y), b_Q(z), b_P(G(t, b_{2R}(U))))`.
///
/// The result keeps `a`, `k_f` and `p`; its `b` becomes
/// `rho(Q v P)(1 + rho(2R)||kappa||) b(t)` and its `rho` becomes
/// `max(1, rho(min(r, 2R)))`, so the local Lipschitz form of the audit
/// covers the global constant.
pub fn truncate_generator(spec: &GeneratorSpec, cert: &BoundCertificate, atoms: &[Atom]) -> GeneratorSpec {
    let (r, q, p) = (cert.r, cert.q, cert.p);
    let r2 = 2.0 * r;
    let kn = kappa_norm(atoms);
    let scale = (spec.rho)(q.max(p)) * (1.0 + (spec.rho)(r2) * kn);
    let f = spec.f.clone();
    let g = spec.g.clone();
    let dg = spec.dg.clone();
    let b = spec.b.clone();
    let rho = spec.rho.clone();
    let wrap = |d: Option<DriverFn>, slot: usize| -> Option<DriverFn> {
        d.map(|d| -> DriverFn {
            Arc::new(move |path: &[f64], t, y, z, w| {
                let v = d(path, t, clamp_unchecked(y, r), clamp_unchecked(z, q), clamp_unchecked(w, p));
                let slope = match slot {
                    0 => clamp_slope_unchecked(y, r),
                    1 => clamp_slope_unchecked(z, q),
                    _ => clamp_slope_unchecked(w, p),
                };
                v * slope
            })
        })
    };
    GeneratorSpec {
        name: format!("truncated({})", spec.name),
        f: Arc::new(move |path: &[f64], t, y, z, w| {
            f(path, t, clamp_unchecked(y, r), clamp_unchecked(z, q), clamp_unchecked(w, p))
        }),
        g: {
            let g = g.clone();
            Arc::new(move |t, u| g(t, clamp_unchecked(u, r2)))
        },
        dg: Arc::new(move |t, u| dg(t, clamp_unchecked(u, r2)) * clamp_slope_unchecked(u, r2)),
        a: spec.a.clone(),
        b: Arc::new(move |t| scale * b(t)),
        k_f: spec.k_f.clone(),
        rho: Arc::new(move |x| rho(x.min(r2)).max(1.0)),
        p: spec.p.clone(),
        df_y: wrap(spec.df_y.clone(), 0),
        df_z: wrap(spec.df_z.clone(), 1),
        df_u: wrap(spec.df_u.clone(), 2),
        d_malliavin_f: spec.d_malliavin_f.clone().map(|d| -> MalliavinDriverFn {
            Arc::new(move |m: &MalliavinArgs<'_>| {
                d(&MalliavinArgs {
                    y: clamp_unchecked(m.y, r),
                    z: clamp_unchecked(m.z, q),
                    w: clamp_unchecked(m.w, p),
                    ..*m
                })
            })
        }),
        composition: spec.composition.clone(),
    }
}

/// Result of [`check_comparison_condition`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonConditionReport {
    pub ok: bool,
    /// `min (df/du * dg/du + 1)` over the samples.
    pub worst_violation: f64,
    /// `(t, y, z, u, u')` attaining the minimum.
    pub witness: (f64, f64, f64, f64, f64),
    pub samples: usize,
}

/// Checks `-1 <= df/du(t, y, z, u) * dg/du(t, u')` on a lattice over
/// `sample_box` plus `sample_box.samples` random points.
pub fn check_comparison_condition(spec: &GeneratorSpec, sample_box: &AuditBox) -> ComparisonConditionReport {
    const LATTICE: usize = 5;
    let lin = |r: (f64, f64), k: usize| {
        if LATTICE == 1 {
            r.0
        } else {
            r.0 + (r.1 - r.0) * k as f64 / (LATTICE - 1) as f64
        }
    };
    let state = 0.5 * (sample_box.state.0 + sample_box.state.1);
    let path = [state];
    let mut worst = f64::INFINITY;
    let mut witness = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut count = 0;
    let mut visit = |t: f64, y: f64, z: f64, u: f64, up: f64| {
        let v = spec.partial_u(&path, t, y, z, u) * (spec.dg)(t, up) + 1.0;
        count += 1;
        if v < worst {
            worst = v;
            witness = (t, y, z, u, up);
        }
    };
    for i in 0..LATTICE.pow(5) {
        let mut k = i;
        let mut c = [0usize; 5];
        for slot in &mut c {
            *slot = k % LATTICE;
            k /= LATTICE;
        }
        visit(
            lin(sample_box.t, c[0]),
            lin(sample_box.y, c[1]),
            lin(sample_box.z, c[2]),
            lin(sample_box.u, c[3]),
            lin(sample_box.u_prime, c[4]),
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut draw = |r: (f64, f64)| r.0 + (r.1 - r.0) * rng.random::<f64>();
    for _ in 0..sample_box.samples {
        let (t, y, z, u, up) = (
            draw(sample_box.t),
            draw(sample_box.y),
            draw(sample_box.z),
            draw(sample_box.u),
            draw(sample_box.u_prime),
        );
        visit(t, y, z, u, up);
    }
    ComparisonConditionReport {
        ok: worst >= -1e-9,
        worst_violation: worst,
        witness,
        samples: count,
    }
}

/// Built-in generator families.
pub mod families {
    use super::*;

    /// `f = alpha y + beta z + gamma w + delta`, `g(t, u) = u`.
    pub fn linear(alpha: f64, beta: f64, gamma: f64, delta: f64) -> GeneratorSpec {
        GeneratorSpec::new(
            format!("linear({alpha}, {beta}, {gamma}, {delta})"),
            Arc::new(move |_, _, y, z, w| alpha * y + beta * z + gamma * w + delta),
        )
        .with_coefficients(constant_t(alpha.abs()), constant_t(beta.abs().max(gamma.abs())), constant_t(delta.abs()))
        .with_partials(
            Arc::new(move |_, _, _, _, _| alpha),
            Arc::new(move |_, _, _, _, _| beta),
            Arc::new(move |_, _, _, _, _| gamma),
        )
    }

    /// `f = k + a |y|`: the envelope driver whose solution with `xi = A_xi`
    /// is the closed-form `Y` bound.
    pub fn envelope(a: f64, k: f64) -> GeneratorSpec {
        GeneratorSpec::new(format!("envelope({a}, {k})"), Arc::new(move |_, _, y, _, _| k + a * y.abs()))
            .with_coefficients(constant_t(a.abs()), zero_t(), constant_t(k.abs()))
            .with_partials(
                Arc::new(move |_, _, y, _, _| a * y.signum()),
                Arc::new(|_, _, _, _, _| 0.0),
                Arc::new(|_, _, _, _, _| 0.0),
            )
    }

    /// `f = c z tanh(z) + k w` with `g(t, u) = u + eta u |u| / 2`.
    ///
    /// `rho(r) = m (1 + r)` with `m = max(2c, |k|, 1, eta)`, which is
    /// `2c (1 + r)` whenever `2c` dominates.
    pub fn subquadratic(c: f64, k: f64, eta: f64) -> GeneratorSpec {
        let m = (2.0 * c.abs()).max(k.abs()).max(1.0).max(eta.abs());
        GeneratorSpec::new(
            format!("subquadratic({c}, {k}, {eta})"),
            Arc::new(move |_, _, _, z, w| c * z * z.tanh() + k * w),
        )
        .with_g(
            Arc::new(move |_, u| u + 0.5 * eta * u * u.abs()),
            Arc::new(move |_, u| 1.0 + eta * u.abs()),
        )
        .with_coefficients(zero_t(), constant_t(1.0), zero_t())
        .with_rho(Arc::new(move |r| m * (1.0 + r)))
        .with_partials(
            Arc::new(|_, _, _, _, _| 0.0),
            Arc::new(move |_, _, _, z, _| {
                let th = z.tanh();
                c * (th + z * (1.0 - th * th))
            }),
            Arc::new(move |_, _, _, _, _| k),
        )
    }

    /// `f = c`.
    pub fn constant(c: f64) -> GeneratorSpec {
        linear(0.0, 0.0, 0.0, c)
    }
}

#[cfg(test)]
mod tests {
    use super::families::*;
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn aggregate_examples() {
        let atoms = [Atom::new(1.0, 2.0)];
        let lin = linear(0.0, 0.0, 1.0, 0.0);
        assert_eq!(eval_g(&lin, 0.3, &[0.0], &atoms), 0.0);
        assert_abs_diff_eq!(eval_g(&lin, 0.3, &[3.0], &atoms), 6.0, epsilon = 1e-15);
        let sq = GeneratorSpec::new("sq", Arc::new(|_, _, _, _, w| w)).with_g(Arc::new(|_, u| u * u), Arc::new(|_, u| 2.0 * u));
        assert_abs_diff_eq!(eval_g(&sq, 0.0, &[2.0], &[Atom::new(0.5, 1.0)]), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn clamp_examples() {
        assert_eq!(smooth_clamp(2.0, 5.0).unwrap(), 2.0);
        assert_eq!(smooth_clamp(7.0, 5.0).unwrap(), 5.0);
        assert_eq!(smooth_clamp(-7.0, 5.0).unwrap(), -5.0);
        let mid = smooth_clamp(5.0, 5.0).unwrap();
        assert!(mid > 4.0 && mid < 5.0);
        assert_abs_diff_eq!(mid, 4.75, epsilon = 1e-15);
        let h = 1e-6;
        let slope = (smooth_clamp(5.0 + h, 5.0).unwrap() - smooth_clamp(5.0 - h, 5.0).unwrap()) / (2.0 * h);
        assert!((0.0..=1.0).contains(&slope));
        assert!(smooth_clamp(1.0, 0.5).is_err());
        assert!(smooth_clamp_derivative(1.0, 0.9).is_err());
        // C^1 joins
        for x in [4.0, 6.0] {
            let l = smooth_clamp_derivative(x - 1e-12, 5.0).unwrap();
            let r = smooth_clamp_derivative(x + 1e-12, 5.0).unwrap();
            assert_abs_diff_eq!(l, r, epsilon = 1e-9);
        }
    }

    #[test]
    fn bounds_examples() {
        let zero_p = GeneratorSpec::new("zero", Arc::new(|_, _, _, _, _| 0.0));
        let term = TerminalSpec::new("c", Arc::new(|_| 1.0), 1.0, Arc::new(|_| 0.0)).unwrap();
        let cert = compute_bounds(&zero_p, &term, &[Atom::new(0.5, 1.0)], 1.0).unwrap();
        assert_abs_diff_eq!(cert.r, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cert.q, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cert.p, 1.0, epsilon = 1e-12);

        let grow = zero_p.clone().with_coefficients(constant_t(1.0), zero_t(), zero_t());
        let cert = compute_bounds(&grow, &term, &[], 1.0).unwrap();
        assert_abs_diff_eq!(cert.r, std::f64::consts::E + 1.0, epsilon = 1e-8);

        let src = zero_p.with_coefficients(zero_t(), zero_t(), constant_t(1.0));
        let term0 = TerminalSpec::new("0", Arc::new(|_| 0.0), 0.0, Arc::new(|_| 0.0)).unwrap();
        let cert = compute_bounds(&src, &term0, &[], 2.0).unwrap();
        assert_abs_diff_eq!(cert.r, 3.0, epsilon = 1e-10);
        assert_abs_diff_eq!(cert.y_envelope(2.0).unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cert.y_envelope(1.0).unwrap(), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn bounds_reject_divergent_coefficients() {
        let bad = GeneratorSpec::new("bad", Arc::new(|_, _, _, _, _| 0.0))
            .with_coefficients(Arc::new(|t: f64| 1.0 / (1.0 - t).powi(2)), zero_t(), zero_t());
        let term = TerminalSpec::constant(1.0);
        assert!(matches!(compute_bounds(&bad, &term, &[], 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn p_uses_atomic_norms() {
        let spec = subquadratic(1.0, 0.5, 0.0);
        let term = TerminalSpec::of_terminal_state("tanh", Arc::new(f64::tanh), Arc::new(|x: f64| 1.0 - x.tanh().powi(2)), 1.0, 1.0, 1.0);
        let atoms = [Atom::new(0.5, 1.0)];
        let cert = compute_bounds(&spec, &term, &atoms, 1.0).unwrap();
        assert_abs_diff_eq!(cert.r, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cert.q, 2.0, epsilon = 1e-12);
        // rho(4) = 2 * 5, ||kappa|| = 0.5, ||A_Dxi|| = 0.5
        assert_abs_diff_eq!(cert.p, 10.0 * 0.5 * 0.5 + 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cert.u_bound(0.3, 0.5).unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn truncation_identity_and_saturation() {
        let spec = subquadratic(1.0, 0.5, 1.0);
        let atoms = [Atom::new(0.5, 1.0)];
        let cert = BoundCertificate::explicit(3.0, 4.0, 5.0, 1.0, &spec.rho, &atoms).unwrap();
        let tr = truncate_generator(&spec, &cert, &atoms);
        let path = [0.0];
        let (y, z, u) = (1.5, -2.5, [3.0]);
        let g = spec.aggregate(0.2, &u, &atoms);
        assert!(g.abs() <= cert.p - 1.0);
        assert_eq!(tr.driver(&path, 0.2, y, z, &u, &atoms), spec.driver(&path, 0.2, y, z, &u, &atoms));
        let at = |y: f64| tr.driver(&path, 0.2, y, 10.0, &[20.0], &atoms);
        assert_eq!(at(cert.r + 2.0), at(cert.r + 3.0));
    }

    #[test]
    fn comparison_condition_examples() {
        let bx = AuditBox::symmetric(1.0, 3.0);
        let indep = linear(1.0, 0.5, 0.0, 0.0);
        let r = check_comparison_condition(&indep, &bx);
        assert!(r.ok);
        assert_abs_diff_eq!(r.worst_violation, 1.0, epsilon = 1e-12);
        assert!(check_comparison_condition(&linear(0.0, 0.0, 1.0, 0.0), &bx).ok);
        let neg = linear(0.0, 0.0, -2.0, 0.0);
        let r = check_comparison_condition(&neg, &bx);
        assert!(!r.ok);
        assert_abs_diff_eq!(r.worst_violation, -1.0, epsilon = 1e-12);
        // finite-difference fallback
        let fd = GeneratorSpec::new("fd", Arc::new(|_, _, _, _, w: f64| -2.0 * w));
        let r = check_comparison_condition(&fd, &bx);
        assert_abs_diff_eq!(r.worst_violation, -1.0, epsilon = 1e-6);
    }

    #[test]
    fn families_pass_their_audit() {
        let bx = AuditBox {
            state: (-2.0, 2.0),
            ..AuditBox::symmetric(1.0, 4.0)
        };
        for spec in [linear(0.7, -0.3, 0.4, 0.2), envelope(1.0, 0.5), subquadratic(1.0, 0.5, 0.8)] {
            let v = spec.audit(&bx, 1);
            assert!(v.is_empty(), "{}: {:?}", spec.name, v);
        }
        let liar = linear(2.0, 0.0, 0.0, 0.0).with_coefficients(constant_t(1.0), zero_t(), zero_t());
        assert!(!liar.audit(&bx, 1).is_empty());
    }

    #[test]
    fn truncated_family_passes_audit() {
        let spec = subquadratic(1.0, 0.5, 0.8);
        let atoms = [Atom::new(0.5, 1.0), Atom::new(-1.5, 0.3)];
        let cert = BoundCertificate::explicit(2.0, 2.0, 3.0, 1.0, &spec.rho, &atoms).unwrap();
        let tr = truncate_generator(&spec, &cert, &atoms);
        let v = tr.audit(&AuditBox::symmetric(1.0, 20.0), 3);
        assert!(v.is_empty(), "{v:?}");
    }

    proptest! {
        #[test]
        fn clamp_properties(x in -20.0f64..20.0, m in 1.0f64..8.0) {
            let b = smooth_clamp(x, m).unwrap();
            prop_assert_eq!(smooth_clamp(-x, m).unwrap(), -b);
            prop_assert!(b.abs() <= x.abs().min(m) + 1e-15);
            let h = 1e-6;
            let d = (smooth_clamp(x + h, m).unwrap() - smooth_clamp(x - h, m).unwrap()) / (2.0 * h);
            prop_assert!((-1e-6..=1.0 + 1e-6).contains(&d));
            if x.abs() <= m - 1.0 {
                prop_assert_eq!(smooth_clamp(b, m).unwrap(), b);
            }
        }

        #[test]
        fn bounds_are_monotone(
            a0 in 0.0f64..2.0, da in 0.0f64..1.0,
            k0 in 0.0f64..2.0, dk in 0.0f64..1.0,
            x0 in 0.0f64..2.0, dx in 0.0f64..1.0,
        ) {
            let atoms = [Atom::new(0.5, 1.0), Atom::new(2.0, 0.5)];
            let mk = |a: f64, k: f64| GeneratorSpec::new("m", Arc::new(|_, _, _, _, _| 0.0))
                .with_coefficients(constant_t(a), zero_t(), constant_t(k))
                .with_p(Arc::new(move |_, x: f64| k * kappa(x)));
            let term = |ax: f64| TerminalSpec::new("t", Arc::new(|_| 0.0), ax, Arc::new(move |x: f64| ax * kappa(x).max(0.1))).unwrap();
            let lo = compute_bounds(&mk(a0, k0), &term(x0), &atoms, 1.0).unwrap();
            let hi = compute_bounds(&mk(a0 + da, k0 + dk), &term(x0 + dx), &atoms, 1.0).unwrap();
            prop_assert!(hi.r >= lo.r - 1e-12 && hi.q >= lo.q - 1e-12 && hi.p >= lo.p - 1e-12);
        }
    }
}
