//! One-step methods over arbitrary vector fields.
//!
//! Implicit relations are solved by plain fixed-point iteration on the
//! defining map; every experiment here runs with `h·Lip(f)` well below one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phase::{self, CanonicalField, Hamiltonian, PhaseState, Trajectory, VectorField};

/// Finite-difference step for [`jacobian_symplecticity_defect`].
pub const SYMPLECTICITY_FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ExplicitEuler,
    /// `p̄ = p - h ∂H/∂q(p̄, q)`, `q̄ = q + h ∂H/∂p(p̄, q)`.
    SymplecticEuler,
    ImplicitMidpoint,
    ImplicitTrapezoidal,
    /// Classical fourth-order Runge–Kutta.
    Rk4Oracle,
}

impl Method {
    /// The four methods compared throughout the experiments.
    pub const COMPARED: [Method; 4] = [
        Method::ExplicitEuler,
        Method::SymplecticEuler,
        Method::ImplicitMidpoint,
        Method::ImplicitTrapezoidal,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Method::ExplicitEuler => "explicit_euler",
            Method::SymplecticEuler => "symplectic_euler",
            Method::ImplicitMidpoint => "implicit_midpoint",
            Method::ImplicitTrapezoidal => "implicit_trapezoidal",
            Method::Rk4Oracle => "rk4_oracle",
        }
    }

    pub fn order(self) -> u32 {
        match self {
            Method::ExplicitEuler | Method::SymplecticEuler => 1,
            Method::ImplicitMidpoint | Method::ImplicitTrapezoidal => 2,
            Method::Rk4Oracle => 4,
        }
    }

    pub fn is_symplectic(self) -> bool {
        matches!(self, Method::SymplecticEuler | Method::ImplicitMidpoint)
    }

    pub fn is_implicit(self) -> bool {
        matches!(
            self,
            Method::SymplecticEuler | Method::ImplicitMidpoint | Method::ImplicitTrapezoidal
        )
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Method::ExplicitEuler,
            Method::SymplecticEuler,
            Method::ImplicitMidpoint,
            Method::ImplicitTrapezoidal,
            Method::Rk4Oracle,
        ]
        .into_iter()
        .find(|m| m.id() == s)
        .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Sup-norm bound on the change between successive iterates.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-14,
            max_iterations: 100,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) || self.max_iterations == 0 {
            return Err(Error::Config(format!(
                "solver needs tolerance > 0 and max_iterations >= 1, got {} / {}",
                self.tolerance, self.max_iterations
            )));
        }
        Ok(())
    }
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Iterates `x ← map(x)` until successive iterates agree to the tolerance.
fn fixed_point<M>(mut x: Vec<f64>, cfg: &SolverConfig, map: M) -> Result<Vec<f64>>
where
    M: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let mut change = f64::INFINITY;
    for _ in 0..cfg.max_iterations {
        let next = map(&x)?;
        change = sup_diff(&next, &x);
        x = next;
        if !change.is_finite() {
            break;
        }
        if change <= cfg.tolerance {
            return Ok(x);
        }
    }
    Err(Error::Divergence {
        iterations: cfg.max_iterations,
        residual: change,
    })
}

/// One step of `method` on raw flattened coordinates.
pub fn step_raw<F: VectorField + ?Sized>(
    method: Method,
    field: &F,
    y: &[f64],
    h: f64,
    cfg: &SolverConfig,
) -> Result<Vec<f64>> {
    match method {
        Method::ExplicitEuler => Ok(phase::axpy(y, h, &field.eval(y)?)),
        Method::Rk4Oracle => phase::rk4_step(field, y, h),
        Method::ImplicitMidpoint => {
            let guess = phase::axpy(y, h, &field.eval(y)?);
            fixed_point(guess, cfg, |x| {
                let mid: Vec<f64> = y.iter().zip(x).map(|(a, b)| 0.5 * (a + b)).collect();
                Ok(phase::axpy(y, h, &field.eval(&mid)?))
            })
        }
        Method::ImplicitTrapezoidal => {
            let f0 = field.eval(y)?;
            let guess = phase::axpy(y, h, &f0);
            fixed_point(guess, cfg, |x| {
                let f1 = field.eval(x)?;
                Ok(y.iter()
                    .enumerate()
                    .map(|(i, yi)| yi + 0.5 * h * (f0[i] + f1[i]))
                    .collect())
            })
        }
        Method::SymplecticEuler => {
            let d = y.len() / 2;
            let (p, q) = y.split_at(d);
            let mut probe = y.to_vec();
            let p_bar = fixed_point(p.to_vec(), cfg, |pb| {
                let mut probe = y.to_vec();
                probe[..d].copy_from_slice(pb);
                let f = field.eval(&probe)?;
                Ok(phase::axpy(p, h, &f[..d]))
            })?;
            probe[..d].copy_from_slice(&p_bar);
            let f = field.eval(&probe)?;
            let mut out = p_bar;
            out.extend(q.iter().zip(&f[d..]).map(|(qi, fi)| qi + h * fi));
            Ok(out)
        }
    }
}

/// One step of `method` with step size `h`.
pub fn step<F: VectorField + ?Sized>(
    method: Method,
    field: &F,
    y: &PhaseState,
    h: f64,
    cfg: &SolverConfig,
) -> Result<PhaseState> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("step size must be positive, got {h}")));
    }
    cfg.validate()?;
    if y.dim() != field.dim() {
        return Err(Error::Shape(format!(
            "state has {} degrees of freedom, field expects {}",
            y.dim(),
            field.dim()
        )));
    }
    let next = step_raw(method, field, y.as_slice(), h, cfg)?;
    PhaseState::from_flat(next).map_err(|_| Error::Divergence {
        iterations: 0,
        residual: f64::INFINITY,
    })
}

/// `n` steps from `y0`; the trajectory holds `n + 1` states.
pub fn rollout<F: VectorField + ?Sized>(
    method: Method,
    field: &F,
    y0: &PhaseState,
    h: f64,
    n: usize,
    cfg: &SolverConfig,
) -> Result<Trajectory> {
    match rollout_until_failure(method, field, y0, h, n, cfg)? {
        (traj, None) => Ok(traj),
        (_, Some(err)) => Err(err),
    }
}

/// Like [`rollout`], but keeps the states computed before the first failing
/// step and returns the failure alongside them.
pub fn rollout_until_failure<F: VectorField + ?Sized>(
    method: Method,
    field: &F,
    y0: &PhaseState,
    h: f64,
    n: usize,
    cfg: &SolverConfig,
) -> Result<(Trajectory, Option<Error>)> {
    if n == 0 {
        return Err(Error::Config("rollout needs at least one step".into()));
    }
    let mut states = Vec::with_capacity(n + 1);
    states.push(y0.clone());
    let mut failure = None;
    for i in 0..n {
        match step(method, field, states.last().unwrap(), h, cfg) {
            Ok(next) => states.push(next),
            Err(e) => {
                failure = Some(Error::at_step(i, e));
                break;
            }
        }
    }
    Ok((Trajectory::new(states, h, 0.0)?, failure))
}

/// `‖DᵀJD - J‖_∞` for the finite-difference Jacobian `D` of one step of
/// `method` applied to the canonical field of `system`.
pub fn jacobian_symplecticity_defect<H: Hamiltonian + ?Sized>(
    method: Method,
    system: &H,
    y: &PhaseState,
    h: f64,
    cfg: &SolverConfig,
) -> Result<f64> {
    let field = CanonicalField(system);
    let jac = phase::central_jacobian(
        |x| step_raw(method, &field, x, h, cfg),
        y.as_slice(),
        SYMPLECTICITY_FD_STEP,
    )?;
    phase::symplectic_defect(&jac)
}
