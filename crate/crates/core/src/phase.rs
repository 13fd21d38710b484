//! Canonical phase space: states, benchmark Hamiltonians, the canonical
//! vector field `J^{-1} ∇H` and a high-accuracy reference flow.
//!
//! States are flattened as `(p_1..p_d, q_1..q_d)` everywhere in the crate.
//! With `J = [[0, I], [-I, 0]]` this makes `J^{-1} ∇H = (-∇_q H, ∇_p H)`,
//! so the pendulum reads `ṗ = -sin q, q̇ = p`.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Positions closer than this to the Kepler singularity are rejected.
pub const KEPLER_MIN_RADIUS: f64 = 1e-8;

/// A point `y = (p, q)` of a canonical system with `d` degrees of freedom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PhaseState {
    coords: Vec<f64>,
}

impl PhaseState {
    pub fn new(p: &[f64], q: &[f64]) -> Result<Self> {
        if p.len() != q.len() {
            return Err(Error::Shape(format!(
                "momentum has {} entries but position has {}",
                p.len(),
                q.len()
            )));
        }
        let mut coords = Vec::with_capacity(2 * p.len());
        coords.extend_from_slice(p);
        coords.extend_from_slice(q);
        Self::from_flat(coords)
    }

    /// Builds a state from the flattened `(p, q)` vector.
    pub fn from_flat(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() || !coords.len().is_multiple_of(2) {
            return Err(Error::Shape(format!(
                "flattened state must have even positive length, got {}",
                coords.len()
            )));
        }
        if let Some(i) = coords.iter().position(|x| !x.is_finite()) {
            return Err(Error::Shape(format!("state entry {i} is not finite")));
        }
        Ok(Self { coords })
    }

    /// Degrees of freedom `d`.
    pub fn dim(&self) -> usize {
        self.coords.len() / 2
    }

    pub fn p(&self) -> &[f64] {
        &self.coords[..self.dim()]
    }

    pub fn q(&self) -> &[f64] {
        &self.coords[self.dim()..]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.coords
    }

    /// Euclidean distance to another state of the same dimension.
    pub fn distance(&self, other: &PhaseState) -> f64 {
        self.coords
            .iter()
            .zip(&other.coords)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

impl TryFrom<Vec<f64>> for PhaseState {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::from_flat(v)
    }
}

impl From<PhaseState> for Vec<f64> {
    fn from(s: PhaseState) -> Self {
        s.coords
    }
}

/// A scalar Hamiltonian on `R^{2d}` with an exact gradient.
pub trait Hamiltonian {
    /// Degrees of freedom `d`.
    fn dim(&self) -> usize;

    fn value(&self, y: &[f64]) -> Result<f64>;

    /// `∇H(y)` in the flattened `(∂H/∂p, ∂H/∂q)` ordering.
    fn gradient(&self, y: &[f64]) -> Result<Vec<f64>>;

    /// `J^{-1} ∇H(y) = (-∇_q H, ∇_p H)`.
    fn vector_field(&self, y: &[f64]) -> Result<Vec<f64>> {
        Ok(canonical_field(&self.gradient(y)?))
    }

    /// Values at every row of `points`.
    fn values(&self, points: ArrayView2<f64>) -> Result<Vec<f64>> {
        points
            .rows()
            .into_iter()
            .map(|row| self.value(&row.to_vec()))
            .collect()
    }

    /// Gradients at every row of `points`, one row each.
    fn gradients(&self, points: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros(points.raw_dim());
        for (i, row) in points.rows().into_iter().enumerate() {
            let g = self.gradient(&row.to_vec())?;
            if g.len() != out.ncols() {
                return Err(Error::Shape(format!(
                    "gradient has length {}, expected {}",
                    g.len(),
                    out.ncols()
                )));
            }
            out.row_mut(i).assign(&ArrayView1::from(&g));
        }
        Ok(out)
    }
}

/// Maps a gradient `(∇_p H, ∇_q H)` to `(-∇_q H, ∇_p H)`.
pub fn canonical_field(grad: &[f64]) -> Vec<f64> {
    let d = grad.len() / 2;
    let mut out = Vec::with_capacity(grad.len());
    out.extend(grad[d..].iter().map(|g| -g));
    out.extend_from_slice(&grad[..d]);
    out
}

/// An autonomous vector field `ẏ = f(y)` on `R^{2d}`.
pub trait VectorField {
    fn dim(&self) -> usize;

    fn eval(&self, y: &[f64]) -> Result<Vec<f64>>;
}

/// The canonical vector field of a Hamiltonian.
#[derive(Debug, Clone, Copy)]
pub struct CanonicalField<'a, H: ?Sized>(pub &'a H);

impl<H: Hamiltonian + ?Sized> VectorField for CanonicalField<'_, H> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn eval(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.0.vector_field(y)
    }
}

/// Benchmark systems with closed-form Hamiltonians.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalyticSystem {
    /// `H = p²/2 - cos q` (unit mass, length and gravity).
    Pendulum,
    /// `H = |p|²/2 - 1/|q|` in the plane.
    Kepler,
    /// `H = (p² + q²)/2`.
    HarmonicOscillator,
}

impl AnalyticSystem {
    pub fn name(&self) -> &'static str {
        match self {
            AnalyticSystem::Pendulum => "pendulum",
            AnalyticSystem::Kepler => "kepler",
            AnalyticSystem::HarmonicOscillator => "harmonic_oscillator",
        }
    }

    fn check(&self, y: &[f64]) -> Result<()> {
        let expected = 2 * self.dim();
        if y.len() != expected {
            return Err(Error::Shape(format!(
                "{} expects a state of length {expected}, got {}",
                self.name(),
                y.len()
            )));
        }
        Ok(())
    }

    fn kepler_radius(y: &[f64]) -> Result<f64> {
        let r = y[2].hypot(y[3]);
        if r < KEPLER_MIN_RADIUS {
            return Err(Error::Singularity(format!(
                "Kepler potential is singular at |q| = {r:e}"
            )));
        }
        Ok(r)
    }
}

impl std::fmt::Display for AnalyticSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl Hamiltonian for AnalyticSystem {
    fn dim(&self) -> usize {
        match self {
            AnalyticSystem::Kepler => 2,
            _ => 1,
        }
    }

    fn value(&self, y: &[f64]) -> Result<f64> {
        self.check(y)?;
        Ok(match self {
            AnalyticSystem::Pendulum => 0.5 * y[0] * y[0] - y[1].cos(),
            AnalyticSystem::HarmonicOscillator => 0.5 * (y[0] * y[0] + y[1] * y[1]),
            AnalyticSystem::Kepler => {
                let r = Self::kepler_radius(y)?;
                0.5 * (y[0] * y[0] + y[1] * y[1]) - 1.0 / r
            }
        })
    }

    fn gradient(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check(y)?;
        Ok(match self {
            AnalyticSystem::Pendulum => vec![y[0], y[1].sin()],
            AnalyticSystem::HarmonicOscillator => vec![y[0], y[1]],
            AnalyticSystem::Kepler => {
                let r = Self::kepler_radius(y)?;
                let r3 = r * r * r;
                vec![y[0], y[1], y[2] / r3, y[3] / r3]
            }
        })
    }
}

/// The canonical vector field of an analytic system at `y`.
pub fn hamiltonian_vector_field(system: AnalyticSystem, y: &PhaseState) -> Result<Vec<f64>> {
    system.vector_field(y.as_slice())
}

/// The canonical structure matrix `J = [[0, I_d], [-I_d, 0]]`.
pub fn canonical_matrix(d: usize) -> Array2<f64> {
    let mut j = Array2::zeros((2 * d, 2 * d));
    for i in 0..d {
        j[[i, d + i]] = 1.0;
        j[[d + i, i]] = -1.0;
    }
    j
}

/// `AᵀJA`; a map is symplectic when this equals `J` for its Jacobian.
pub fn symplectic_pairing(a: &Array2<f64>) -> Result<Array2<f64>> {
    let (rows, cols) = a.dim();
    if rows != cols || rows == 0 || rows % 2 != 0 {
        return Err(Error::Shape(format!(
            "symplectic pairing needs a square matrix of even size, got {rows}x{cols}"
        )));
    }
    let j = canonical_matrix(rows / 2);
    Ok(a.t().dot(&j).dot(a))
}

/// `‖AᵀJA - J‖_∞` over matrix entries.
pub fn symplectic_defect(a: &Array2<f64>) -> Result<f64> {
    let pairing = symplectic_pairing(a)?;
    let j = canonical_matrix(a.nrows() / 2);
    Ok(sup_norm_diff(&pairing, &j))
}

pub(crate) fn sup_norm_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Central-difference Jacobian of `map` at `y` with step `eps`.
pub fn central_jacobian<F>(map: F, y: &[f64], eps: f64) -> Result<Array2<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let n = y.len();
    let mut jac: Option<Array2<f64>> = None;
    let mut probe = y.to_vec();
    for k in 0..n {
        probe[k] = y[k] + eps;
        let plus = map(&probe)?;
        probe[k] = y[k] - eps;
        let minus = map(&probe)?;
        probe[k] = y[k];
        let jac = jac.get_or_insert_with(|| Array2::zeros((plus.len(), n)));
        for (i, (a, b)) in plus.iter().zip(&minus).enumerate() {
            jac[[i, k]] = (a - b) / (2.0 * eps);
        }
    }
    jac.ok_or_else(|| Error::Shape("empty state".into()))
}

/// A sequence of states sampled every `h` time units from `t0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<PhaseState>,
    pub h: f64,
    pub t0: f64,
}

impl Trajectory {
    pub fn new(states: Vec<PhaseState>, h: f64, t0: f64) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::Config("trajectory must hold at least one state".into()));
        }
        if !(h > 0.0) {
            return Err(Error::Config(format!("step size must be positive, got {h}")));
        }
        Ok(Self { states, h, t0 })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.h
    }

    pub fn last(&self) -> &PhaseState {
        self.states.last().expect("trajectory is nonempty")
    }
}

pub(crate) fn axpy(y: &[f64], a: f64, x: &[f64]) -> Vec<f64> {
    y.iter().zip(x).map(|(yi, xi)| yi + a * xi).collect()
}

/// One classical fourth-order Runge–Kutta step.
pub(crate) fn rk4_step<F: VectorField + ?Sized>(field: &F, y: &[f64], h: f64) -> Result<Vec<f64>> {
    let inc = rk4_increment(field, y, h)?;
    Ok(y.iter().zip(&inc).map(|(a, b)| a + b).collect())
}

fn rk4_increment<F: VectorField + ?Sized>(field: &F, y: &[f64], h: f64) -> Result<Vec<f64>> {
    let k1 = field.eval(y)?;
    let k2 = field.eval(&axpy(y, 0.5 * h, &k1))?;
    let k3 = field.eval(&axpy(y, 0.5 * h, &k2))?;
    let k4 = field.eval(&axpy(y, h, &k3))?;
    Ok((0..y.len())
        .map(|i| h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

/// Approximates the exact time-`h` flow by `substeps` classical RK4 steps of
/// size `h / substeps`.
pub fn reference_flow<F: VectorField + ?Sized>(
    field: &F,
    y0: &PhaseState,
    h: f64,
    substeps: usize,
) -> Result<PhaseState> {
    let delta = flow_increment(field, y0, h, substeps)?;
    PhaseState::from_flat(y0.as_slice().iter().zip(&delta).map(|(a, b)| a + b).collect())
}

/// `φ_h(y0) - y0` from the same RK4 sub-stepping as [`reference_flow`],
/// accumulated directly so it keeps full relative precision for small `h`.
pub fn flow_increment<F: VectorField + ?Sized>(
    field: &F,
    y0: &PhaseState,
    h: f64,
    substeps: usize,
) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("flow time must be positive, got {h}")));
    }
    if substeps == 0 {
        return Err(Error::Config("reference flow needs at least one sub-step".into()));
    }
    if y0.dim() != field.dim() {
        return Err(Error::Shape(format!(
            "state has {} degrees of freedom, field expects {}",
            y0.dim(),
            field.dim()
        )));
    }
    let dt = h / substeps as f64;
    let y0 = y0.as_slice();
    let mut delta = vec![0.0; y0.len()];
    let mut y = y0.to_vec();
    for substep in 0..substeps {
        let step = rk4_increment(field, &y, dt).map_err(|e| Error::FlowSingularity {
            substep,
            message: e.to_string(),
        })?;
        for (i, s) in step.iter().enumerate() {
            delta[i] += s;
            y[i] = y0[i] + delta[i];
        }
    }
    Ok(delta)
}

/// `n` consecutive reference-flow steps of length `h`, returned as an
/// `n + 1` point trajectory.
pub fn reference_trajectory<F: VectorField + ?Sized>(
    field: &F,
    y0: &PhaseState,
    h: f64,
    n: usize,
    substeps: usize,
) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(n + 1);
    states.push(y0.clone());
    for step in 0..n {
        let next = reference_flow(field, states.last().unwrap(), h, substeps)
            .map_err(|e| Error::at_step(step, e))?;
        states.push(next);
    }
    Trajectory::new(states, h, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::f64::consts::FRAC_PI_2;

    fn st(v: &[f64]) -> PhaseState {
        PhaseState::from_flat(v.to_vec()).unwrap()
    }

    #[test]
    fn state_validation() {
        assert!(PhaseState::from_flat(vec![]).is_err());
        assert!(PhaseState::from_flat(vec![1.0, 2.0, 3.0]).is_err());
        assert!(PhaseState::from_flat(vec![1.0, f64::NAN]).is_err());
        assert!(PhaseState::new(&[1.0], &[1.0, 2.0]).is_err());
        let s = PhaseState::new(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(s.as_slice(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.q(), &[3.0, 4.0]);
    }

    #[test]
    fn pendulum_field_examples() {
        let f = hamiltonian_vector_field(AnalyticSystem::Pendulum, &st(&[1.0, 0.0])).unwrap();
        assert_eq!(f, vec![0.0, 1.0]);
        let f = hamiltonian_vector_field(AnalyticSystem::Pendulum, &st(&[0.0, FRAC_PI_2])).unwrap();
        assert!((f[0] + 1.0).abs() < 1e-15 && f[1] == 0.0);
    }

    #[test]
    fn kepler_field_example() {
        let f = hamiltonian_vector_field(AnalyticSystem::Kepler, &st(&[0.0, 1.0, 1.0, 0.2])).unwrap();
        // |q|^2 = 1.04, q / |q|^3 by hand
        let r3 = 1.04_f64.powf(1.5);
        let expected = [-1.0 / r3, -0.2 / r3, 0.0, 1.0];
        for (a, b) in f.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kepler_origin_is_an_error() {
        let err = AnalyticSystem::Kepler.gradient(&[0.0, 1.0, 0.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::Singularity(_)));
        assert!(AnalyticSystem::Kepler.value(&[0.0, 1.0, 1e-9, 0.0]).is_err());
    }

    #[test]
    fn pairing_examples() {
        let j = canonical_matrix(1);
        assert_eq!(symplectic_pairing(&Array2::eye(2)).unwrap(), j);
        let th: f64 = 0.7;
        let rot = array![[th.cos(), -th.sin()], [th.sin(), th.cos()]];
        assert!(sup_norm_diff(&symplectic_pairing(&rot).unwrap(), &j) < 1e-15);
        let a = array![[2.0, 0.0], [0.0, 1.0]];
        assert_eq!(symplectic_pairing(&a).unwrap(), &j * 2.0);
    }

    #[test]
    fn pairing_rejects_bad_shapes() {
        assert!(symplectic_pairing(&Array2::zeros((3, 3))).is_err());
        assert!(symplectic_pairing(&Array2::zeros((2, 4))).is_err());
    }

    #[test]
    fn oscillator_quarter_turn() {
        let y = reference_flow(
            &CanonicalField(&AnalyticSystem::HarmonicOscillator),
            &st(&[1.0, 0.0]),
            FRAC_PI_2,
            1000,
        )
        .unwrap();
        assert!(y.p()[0].abs() < 1e-10 && (y.q()[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn pendulum_self_convergence() {
        let field = CanonicalField(&AnalyticSystem::Pendulum);
        for y0 in [[0.3, -1.1], [-1.4, 0.9], [0.0, 1.0]] {
            let a = reference_flow(&field, &st(&y0), 0.1, 1000).unwrap();
            let b = reference_flow(&field, &st(&y0), 0.1, 2000).unwrap();
            assert!(a.distance(&b) < 1e-12);
        }
    }

    #[test]
    fn kepler_flow_conserves_energy() {
        let sys = AnalyticSystem::Kepler;
        let y0 = st(&[0.0, 1.0, 1.0, 0.2]);
        let y1 = reference_flow(&CanonicalField(&sys), &y0, 0.1, 1000).unwrap();
        let e0 = sys.value(y0.as_slice()).unwrap();
        let e1 = sys.value(y1.as_slice()).unwrap();
        assert!((e0 - e1).abs() < 1e-10);
    }

    #[test]
    fn flow_composition() {
        let field = CanonicalField(&AnalyticSystem::Pendulum);
        let y0 = st(&[0.5, 1.2]);
        let two = reference_flow(&field, &y0, 0.2, 2000).unwrap();
        let half = reference_flow(&field, &y0, 0.1, 1000).unwrap();
        let composed = reference_flow(&field, &half, 0.1, 1000).unwrap();
        assert!(two.distance(&composed) < 1e-10);
    }

    #[test]
    fn flow_reports_singular_substep() {
        let field = CanonicalField(&AnalyticSystem::Kepler);
        let err = reference_flow(&field, &st(&[0.0, 0.0, 1e-9, 0.0]), 0.1, 1000).unwrap_err();
        assert!(matches!(err, Error::FlowSingularity { substep: 0, .. }), "{err}");
    }

    #[test]
    fn flow_rejects_bad_arguments() {
        let field = CanonicalField(&AnalyticSystem::Pendulum);
        assert!(reference_flow(&field, &st(&[0.0, 1.0]), 0.0, 10).is_err());
        assert!(reference_flow(&field, &st(&[0.0, 1.0]), 0.1, 0).is_err());
        assert!(reference_flow(&field, &st(&[0.0, 1.0, 0.0, 1.0]), 0.1, 1).is_err());
    }

    #[test]
    fn exact_flow_is_symplectic() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let field = CanonicalField(&AnalyticSystem::Pendulum);
        for _ in 0..100 {
            let y = [rng.gen_range(-FRAC_PI_2..FRAC_PI_2), rng.gen_range(-2f64.sqrt()..2f64.sqrt())];
            let jac = central_jacobian(
                |x| Ok(reference_flow(&field, &st(x), 0.1, 1000)?.into_vec()),
                &y,
                1e-5,
            )
            .unwrap();
            assert!(symplectic_defect(&jac).unwrap() <= 1e-6);
        }
    }

    #[test]
    fn analytic_gradients_match_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for sys in [
            AnalyticSystem::Pendulum,
            AnalyticSystem::Kepler,
            AnalyticSystem::HarmonicOscillator,
        ] {
            for _ in 0..20 {
                let y: Vec<f64> = (0..2 * sys.dim()).map(|_| rng.gen_range(0.3..1.5)).collect();
                let g = sys.gradient(&y).unwrap();
                let fd = central_jacobian(|x| Ok(vec![sys.value(x)?]), &y, 1e-5).unwrap();
                for k in 0..y.len() {
                    let scale = g[k].abs().max(1.0);
                    assert!((g[k] - fd[[0, k]]).abs() / scale < 1e-6, "{sys} {k}");
                }
            }
        }
    }
}
