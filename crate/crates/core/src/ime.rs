//! Inverse modified equations.
//!
//! For an integrator `Φ_h` and a system `ẏ = f(y)`, the inverse modified
//! field `f_h = f_1 + h f_2 + h² f_3 + …` is the one whose numerical flow
//! reproduces the exact flow of `f`: `Φ_h(f_h, y) = φ_h(f, y)`. Expanding both
//! sides in `h` and matching powers gives the `f_j` recursively. For a method
//! of order `p` the first correction is `f_{p+1} = -δ_{p+1}`, the leading
//! local-error coefficient; for symplectic methods each `f_j` is itself
//! Hamiltonian, `f_j = J^{-1} ∇H_j`, so the series defines a Hamiltonian
//! `H_h` that a network trained with that method converges to.
//!
//! For the implicit midpoint rule the matching gives `f_1 = f`, `f_2 = 0` and
//! `f_3 = -f'f'f/12 + f''(f, f)/24`.
//!
//! Closed-form truncations are provided for the pendulum under symplectic
//! Euler. [`verify_target_order`] measures the order of any candidate
//! numerically, and [`gradient_symmetry_defect`] probes whether a target
//! exists at all for the explicit-Euler loss.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::integrators::{step_raw, Method, SolverConfig};
use crate::phase::{self, AnalyticSystem, CanonicalField, Hamiltonian, PhaseState, Trajectory};
use crate::stats;

/// Finite-difference step for [`gradient_symmetry_defect`].
pub const SYMMETRY_FD_STEP: f64 = 1e-5;

/// Defects below this at the coarsest step cannot support an order estimate.
pub const DEFECT_FLOOR: f64 = 1e-13;

/// Largest internal RK4 step used when the probes integrate the exact flow.
pub const ORACLE_MAX_SUBSTEP: f64 = 1e-4;

/// `MH_k` for the pendulum under symplectic Euler:
///
/// * `MH_0 = p²/2 - cos q`
/// * `MH_1 = MH_0 + (h/2) p sin q`
/// * `MH_2 = MH_1 + (h²/6)(p² cos q + sin² q)`
pub fn pendulum_mh(k: usize, p: f64, q: f64, h: f64) -> Result<f64> {
    if !(1..=2).contains(&k) {
        return Err(Error::Config(format!(
            "pendulum truncations exist for orders 1 and 2, got {k}"
        )));
    }
    Ok(pendulum_value(k, p, q, h))
}

fn pendulum_value(k: usize, p: f64, q: f64, h: f64) -> f64 {
    let (s, c) = q.sin_cos();
    let mut v = 0.5 * p * p - c;
    if k >= 1 {
        v += 0.5 * h * p * s;
    }
    if k >= 2 {
        v += h * h / 6.0 * (p * p * c + s * s);
    }
    v
}

fn pendulum_gradient(k: usize, p: f64, q: f64, h: f64) -> [f64; 2] {
    let (s, c) = q.sin_cos();
    let mut g = [p, s];
    if k >= 1 {
        g[0] += 0.5 * h * s;
        g[1] += 0.5 * h * p * c;
    }
    if k >= 2 {
        let w = h * h / 6.0;
        g[0] += w * 2.0 * p * c;
        g[1] += w * (2.0 * s * c - p * p * s);
    }
    g
}

/// A closed-form truncation of the inverse-modified Hamiltonian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedModifiedHamiltonian {
    base: AnalyticSystem,
    method: Method,
    order: usize,
    h: f64,
}

impl TruncatedModifiedHamiltonian {
    /// Order 0 is the base Hamiltonian itself.
    pub fn new(base: AnalyticSystem, method: Method, order: usize, h: f64) -> Result<Self> {
        if base != AnalyticSystem::Pendulum || method != Method::SymplecticEuler {
            return Err(Error::Config(format!(
                "no closed-form truncation is available for {base} under {method}"
            )));
        }
        if order > 2 {
            return Err(Error::Config(format!("truncation order {order} is not available")));
        }
        if !(h >= 0.0) {
            return Err(Error::Config(format!("step size must be non-negative, got {h}")));
        }
        Ok(Self { base, method, order, h })
    }

    pub fn pendulum(order: usize, h: f64) -> Result<Self> {
        Self::new(AnalyticSystem::Pendulum, Method::SymplecticEuler, order, h)
    }

    pub fn base(&self) -> AnalyticSystem {
        self.base
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// The same truncation at another step size.
    pub fn at_step(&self, h: f64) -> Result<Self> {
        Self::new(self.base, self.method, self.order, h)
    }

    pub fn label(&self) -> String {
        match self.order {
            0 => "H".to_string(),
            k => format!("MH{k}"),
        }
    }
}

impl Hamiltonian for TruncatedModifiedHamiltonian {
    fn dim(&self) -> usize {
        1
    }

    fn value(&self, y: &[f64]) -> Result<f64> {
        check_pendulum_state(y)?;
        Ok(pendulum_value(self.order, y[0], y[1], self.h))
    }

    fn gradient(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_pendulum_state(y)?;
        Ok(pendulum_gradient(self.order, y[0], y[1], self.h).to_vec())
    }
}

fn check_pendulum_state(y: &[f64]) -> Result<()> {
    if y.len() != 2 {
        return Err(Error::Shape(format!("pendulum state has length 2, got {}", y.len())));
    }
    Ok(())
}

/// Sub-steps that keep the oracle's internal step at or below
/// [`ORACLE_MAX_SUBSTEP`].
pub fn oracle_substeps(h: f64) -> usize {
    ((h / ORACLE_MAX_SUBSTEP).ceil() as usize).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderEstimate {
    pub slope: f64,
    pub h_grid: Vec<f64>,
    /// Max-over-sample one-step defect at each grid step.
    pub defects: Vec<f64>,
}

/// Fits the order at which stepping `method` on the truncation's field
/// reproduces the exact flow of `system`.
///
/// The defect at each `h` is `max_y ‖Φ_h(f_trunc(h), y) - φ_h(y)‖`; the
/// returned slope is the log-log regression slope of defect against `h`.
pub fn verify_target_order<S, T, F>(
    system: &S,
    method: Method,
    truncation_at: F,
    states: &[PhaseState],
    h_grid: &[f64],
    cfg: &SolverConfig,
) -> Result<OrderEstimate>
where
    S: Hamiltonian + ?Sized,
    T: Hamiltonian,
    F: Fn(f64) -> Result<T>,
{
    if h_grid.len() < 4 {
        return Err(Error::Config(format!(
            "order fit needs at least four step sizes, got {}",
            h_grid.len()
        )));
    }
    if h_grid.windows(2).any(|w| !(w[1] < w[0])) || !(h_grid[h_grid.len() - 1] > 0.0) {
        return Err(Error::Config("step grid must be positive and strictly decreasing".into()));
    }
    if states.is_empty() {
        return Err(Error::Config("order fit needs at least one state".into()));
    }
    let exact = CanonicalField(system);
    let mut defects = Vec::with_capacity(h_grid.len());
    for &h in h_grid {
        let trunc = truncation_at(h)?;
        let field = CanonicalField(&trunc);
        let mut worst = 0.0_f64;
        for y in states {
            let stepped = step_raw(method, &field, y.as_slice(), h, cfg)?;
            let flowed = phase::reference_flow(&exact, y, h, oracle_substeps(h))?;
            let err = stepped
                .iter()
                .zip(flowed.as_slice())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            worst = worst.max(err);
        }
        defects.push(worst);
    }
    if defects[0] < DEFECT_FLOOR {
        return Err(Error::Precision(format!(
            "defect {:e} at h = {} is below the {DEFECT_FLOOR:e} floor; use a coarser grid",
            defects[0], h_grid[0]
        )));
    }
    let slope = stats::log_log_slope(h_grid, &defects)?;
    Ok(OrderEstimate {
        slope,
        h_grid: h_grid.to_vec(),
        defects,
    })
}

/// `‖DG - DGᵀ‖_∞` for `G(y) = J (φ_h(y) - y) / h`.
///
/// A network target for the explicit-Euler loss must satisfy `∇NT = G`, which
/// requires `DG` to be symmetric. Non-zero values at finite `h` witness that
/// no such target exists.
pub fn gradient_symmetry_defect<H: Hamiltonian + ?Sized>(system: &H, y: &PhaseState, h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("step size must be positive, got {h}")));
    }
    let field = CanonicalField(system);
    let substeps = oracle_substeps(h);
    let d = y.dim();
    let g = |x: &[f64]| -> Result<Vec<f64>> {
        let state = PhaseState::from_flat(x.to_vec())?;
        let delta = phase::flow_increment(&field, &state, h, substeps)?;
        // J v = (v_q, -v_p)
        let mut out = Vec::with_capacity(2 * d);
        out.extend(delta[d..].iter().map(|v| v / h));
        out.extend(delta[..d].iter().map(|v| -v / h));
        Ok(out)
    };
    let dg: Array2<f64> = phase::central_jacobian(g, y.as_slice(), SYMMETRY_FD_STEP)?;
    Ok(phase::sup_norm_diff(&dg, &dg.t().to_owned()))
}

/// `cand(y_t) - cand(y_0)` along a trajectory.
pub fn conservation_series<H: Hamiltonian + ?Sized>(cand: &H, traj: &Trajectory) -> Result<Vec<f64>> {
    let first = cand.value(traj.states[0].as_slice())?;
    traj.states
        .iter()
        .map(|s| Ok(cand.value(s.as_slice())? - first))
        .collect()
}
