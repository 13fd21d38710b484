//! Integrator residuals over flow data, the empirical loss, and training.
//!
//! Every residual is the defining relation of its one-step method with both
//! endpoints taken from data, so implicit methods need no solve inside the
//! loss. A residual has the form `(y_next - y)/h - Σ_k w_k J^{-1}∇H(x_k)`
//! where the probe points `x_k` and weights `w_k` depend on the method.
//!
//! The loss is the mean of the squared residual components over all pairs
//! and all `2d` components.

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrators::Method;
use crate::net::{self, LossAdjoint, NetArchitecture, NetParameters, ScalarNet};
use crate::optim::{Adam, AdamConfig};
use crate::phase::{canonical_field, Hamiltonian, PhaseState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowPair {
    pub y: PhaseState,
    pub y_next: PhaseState,
}

/// How a dataset's initial states were chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Sampling {
    /// I.i.d. uniform states in a box; `bounds[k] = (lo, hi)` for flattened coordinate `k`.
    Region { bounds: Vec<(f64, f64)> },
    /// Consecutive states of one trajectory.
    Trajectory { start: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub system: String,
    pub sampling: Sampling,
    pub oracle_substeps: usize,
    pub seed: Option<u64>,
}

/// Pairs `(y, φ_h(y))` sharing a single step size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowDataset {
    pub pairs: Vec<FlowPair>,
    pub h: f64,
    pub provenance: Provenance,
}

impl FlowDataset {
    pub fn new(pairs: Vec<FlowPair>, h: f64, provenance: Provenance) -> Result<Self> {
        let data = Self { pairs, h, provenance };
        data.validate()?;
        Ok(data)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::Config("dataset has no pairs".into()));
        }
        if !(self.h > 0.0) {
            return Err(Error::Config(format!("step size must be positive, got {}", self.h)));
        }
        let d = self.dim();
        if let Some(i) = self
            .pairs
            .iter()
            .position(|p| p.y.dim() != d || p.y_next.dim() != d)
        {
            return Err(Error::Shape(format!("pair {i} does not have dimension {d}")));
        }
        if matches!(self.provenance.sampling, Sampling::Trajectory { .. }) {
            if let Some(i) = self.pairs.windows(2).position(|w| w[0].y_next != w[1].y) {
                return Err(Error::Config(format!(
                    "trajectory pairs {i} and {} do not chain",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// Degrees of freedom `d`.
    pub fn dim(&self) -> usize {
        self.pairs[0].y.dim()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn subset(&self, idx: &[usize]) -> FlowDataset {
        FlowDataset {
            pairs: idx.iter().map(|&i| self.pairs[i].clone()).collect(),
            h: self.h,
            provenance: self.provenance.clone(),
        }
    }
}

/// Probe points `x_k` and weights `w_k` of `method` for one pair.
fn probes(method: Method, y: &[f64], y_next: &[f64]) -> Result<Vec<(Vec<f64>, f64)>> {
    let d = y.len() / 2;
    Ok(match method {
        Method::ExplicitEuler => vec![(y.to_vec(), 1.0)],
        Method::SymplecticEuler => {
            let mut x = y_next[..d].to_vec();
            x.extend_from_slice(&y[d..]);
            vec![(x, 1.0)]
        }
        Method::ImplicitMidpoint => {
            let mid = y.iter().zip(y_next).map(|(a, b)| 0.5 * (a + b)).collect();
            vec![(mid, 1.0)]
        }
        Method::ImplicitTrapezoidal => vec![(y.to_vec(), 0.5), (y_next.to_vec(), 0.5)],
        Method::Rk4Oracle => {
            return Err(Error::Config(
                "rk4_oracle has no data-explicit residual and cannot define a loss".into(),
            ))
        }
    })
}

/// The residual of `method` for a single pair under candidate `cand`.
pub fn residual<H: Hamiltonian + ?Sized>(
    method: Method,
    cand: &H,
    pair: &FlowPair,
    h: f64,
) -> Result<Vec<f64>> {
    let (y, y_next) = (pair.y.as_slice(), pair.y_next.as_slice());
    if y.len() != y_next.len() || pair.y.dim() != cand.dim() {
        return Err(Error::Shape("pair dimension does not match the candidate".into()));
    }
    let mut r: Vec<f64> = y.iter().zip(y_next).map(|(a, b)| (b - a) / h).collect();
    for (x, w) in probes(method, y, y_next)? {
        let f = canonical_field(&cand.gradient(&x)?);
        r.iter_mut().zip(&f).for_each(|(ri, fi)| *ri -= w * fi);
    }
    Ok(r)
}

/// A dataset laid out for batched residual evaluation under one method.
#[derive(Debug, Clone)]
pub struct ProbeBatch {
    points: Array2<f64>,
    pair_of_row: Vec<usize>,
    weights: Vec<f64>,
    /// `(y_next - y)/h`, one row per pair.
    slopes: Array2<f64>,
}

impl ProbeBatch {
    pub fn new(method: Method, data: &FlowDataset) -> Result<Self> {
        data.validate()?;
        let n = 2 * data.dim();
        let mut rows = Vec::new();
        let mut pair_of_row = Vec::new();
        let mut weights = Vec::new();
        let mut slopes = Array2::zeros((data.len(), n));
        for (i, pair) in data.pairs.iter().enumerate() {
            let (y, y_next) = (pair.y.as_slice(), pair.y_next.as_slice());
            for (k, (a, b)) in y.iter().zip(y_next).enumerate() {
                slopes[[i, k]] = (b - a) / data.h;
            }
            for (x, w) in probes(method, y, y_next)? {
                rows.extend(x);
                pair_of_row.push(i);
                weights.push(w);
            }
        }
        let points = Array2::from_shape_vec((pair_of_row.len(), n), rows).expect("rows have width 2d");
        Ok(Self {
            points,
            pair_of_row,
            weights,
            slopes,
        })
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn num_pairs(&self) -> usize {
        self.slopes.nrows()
    }

    /// Residuals (one row per pair) from gradients at the probe points.
    pub fn residuals(&self, grads: &Array2<f64>) -> Result<Array2<f64>> {
        if grads.dim() != self.points.dim() {
            return Err(Error::Shape("gradient batch does not match probe points".into()));
        }
        let d = self.slopes.ncols() / 2;
        let mut r = self.slopes.clone();
        for (row, (&pair, &w)) in self.pair_of_row.iter().zip(&self.weights).enumerate() {
            for k in 0..d {
                r[[pair, k]] += w * grads[[row, d + k]];
                r[[pair, d + k]] -= w * grads[[row, k]];
            }
        }
        if let Some(pair) = r.rows().into_iter().position(|row| row.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteLoss { pair });
        }
        Ok(r)
    }

    fn mean_square(&self, r: &Array2<f64>) -> f64 {
        r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64
    }

    /// Loss and its adjoint with respect to the probe gradients.
    fn loss_adjoint(&self, grads: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
        let r = self.residuals(grads)?;
        let loss = self.mean_square(&r);
        let scale = 2.0 / r.len() as f64;
        let d = self.slopes.ncols() / 2;
        let mut adj = Array2::zeros(grads.raw_dim());
        for (row, (&pair, &w)) in self.pair_of_row.iter().zip(&self.weights).enumerate() {
            // r_p += w g_q and r_q -= w g_p
            for k in 0..d {
                adj[[row, d + k]] = scale * w * r[[pair, k]];
                adj[[row, k]] = -scale * w * r[[pair, d + k]];
            }
        }
        Ok((loss, adj))
    }

    /// Empirical loss of any candidate.
    pub fn loss<H: Hamiltonian + ?Sized>(&self, cand: &H) -> Result<f64> {
        let grads = cand.gradients(self.points.view())?;
        Ok(self.mean_square(&self.residuals(&grads)?))
    }

    /// Loss of a network together with its exact parameter gradient.
    pub fn loss_and_gradient(&self, arch: &NetArchitecture, params: &NetParameters) -> Result<(f64, Vec<f64>)> {
        net::loss_parameter_gradient(arch, params, self.points.view(), |_, grads| {
            let (loss, adj) = self.loss_adjoint(grads)?;
            Ok(LossAdjoint {
                loss,
                d_values: None,
                d_gradients: Some(adj),
            })
        })
    }
}

/// Mean squared residual component of `method` over the dataset.
pub fn empirical_loss<H: Hamiltonian + ?Sized>(method: Method, cand: &H, data: &FlowDataset) -> Result<f64> {
    ProbeBatch::new(method, data)?.loss(cand)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub optimizer: AdamConfig,
    pub iterations: usize,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    /// The learning rate is multiplied by this factor at each boundary in
    /// `decay_at` (iteration counts). An empty list keeps it constant.
    #[serde(default)]
    pub decay_at: Vec<usize>,
    #[serde(default = "default_decay")]
    pub decay_factor: f64,
    /// Test loss is recorded every this many iterations when test data is given.
    #[serde(default = "default_test_every")]
    pub test_every: usize,
    pub seed: u64,
}

fn default_decay() -> f64 {
    0.1
}

fn default_test_every() -> usize {
    100
}

impl TrainConfig {
    pub fn new(method: Method, iterations: usize, seed: u64) -> Self {
        Self {
            method,
            optimizer: AdamConfig::default(),
            iterations,
            batch_size: None,
            decay_at: Vec::new(),
            decay_factor: default_decay(),
            test_every: default_test_every(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == Some(0) || self.test_every == 0 {
            return Err(Error::Config("batch size and test interval must be positive".into()));
        }
        if !(self.decay_factor > 0.0) {
            return Err(Error::Config("decay factor must be positive".into()));
        }
        Ok(())
    }

    fn learning_rate(&self, iteration: usize) -> f64 {
        let passed = self.decay_at.iter().filter(|&&at| iteration >= at).count();
        self.optimizer.learning_rate * self.decay_factor.powi(passed as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: ScalarNet,
    /// Row `i < iterations` holds the loss before update `i`; the final row
    /// holds the loss of the returned parameters.
    pub history: Vec<HistoryRow>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.history.last().map(|r| r.train_loss).unwrap_or(f64::NAN)
    }
}

/// Trains a network on `data` with the residual of `cfg.method`.
///
/// Initialization uses `cfg.seed`; mini-batch order (when enabled) uses a
/// stream derived from it. Given the same inputs the trace is bit-identical.
pub fn train(
    arch: &NetArchitecture,
    data: &FlowDataset,
    test: Option<&FlowDataset>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    arch.validate()?;
    cfg.validate()?;
    if arch.input_dim != 2 * data.dim() {
        return Err(Error::Shape(format!(
            "network input {} does not match data dimension {}",
            arch.input_dim,
            2 * data.dim()
        )));
    }
    let full = ProbeBatch::new(cfg.method, data)?;
    let test = test.map(|t| ProbeBatch::new(cfg.method, t)).transpose()?;
    let batches = match cfg.batch_size {
        Some(b) if b < data.len() => Some(b),
        _ => None,
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c_u64);
    let mut cursor = data.len();

    let mut params = NetParameters::init(arch, cfg.seed);
    let mut last_finite = params.clone();
    let mut last_finite_loss = f64::NAN;
    let mut adam = Adam::new(cfg.optimizer, params.len());
    let mut history = Vec::with_capacity(cfg.iterations + 1);

    let diverged = |iteration: usize, loss: f64, checkpoint: &NetParameters| Error::TrainingDiverged {
        iteration,
        last_finite_loss: loss,
        checkpoint: checkpoint.as_slice().to_vec(),
    };

    for it in 0..cfg.iterations {
        let (loss, grad) = match batches {
            None => full.loss_and_gradient(arch, &params),
            Some(b) => {
                if cursor + b > order.len() {
                    order.shuffle(&mut shuffle_rng);
                    cursor = 0;
                }
                let batch = ProbeBatch::new(cfg.method, &data.subset(&order[cursor..cursor + b]))?;
                cursor += b;
                batch.loss_and_gradient(arch, &params)
            }
        }
        .map_err(|e| match e {
            Error::NonFiniteLoss { .. } => diverged(it, last_finite_loss, &last_finite),
            other => other,
        })?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(diverged(it, last_finite_loss, &last_finite));
        }
        let test_loss = match &test {
            Some(t) if it % cfg.test_every == 0 => Some(eval_net(t, arch, &params)?),
            _ => None,
        };
        history.push(HistoryRow {
            iteration: it,
            train_loss: loss,
            test_loss,
        });
        last_finite.as_mut_slice().copy_from_slice(params.as_slice());
        last_finite_loss = loss;
        adam.step(params.as_mut_slice(), &grad, cfg.learning_rate(it));
    }

    let final_loss = eval_net(&full, arch, &params).map_err(|e| match e {
        Error::NonFiniteLoss { .. } => diverged(cfg.iterations, last_finite_loss, &last_finite),
        other => other,
    })?;
    let test_loss = test.as_ref().map(|t| eval_net(t, arch, &params)).transpose()?;
    history.push(HistoryRow {
        iteration: cfg.iterations,
        train_loss: final_loss,
        test_loss,
    });
    Ok(TrainOutcome {
        net: ScalarNet::new(arch.clone(), params)?,
        history,
    })
}

fn eval_net(batch: &ProbeBatch, arch: &NetArchitecture, params: &NetParameters) -> Result<f64> {
    let tape = net::forward(arch, params, batch.points())?;
    let grads = net::input_gradients(arch, params, &tape)?;
    Ok(batch.mean_square(&batch.residuals(&grads)?))
}

/// RMS over `sample` of `A(y) - B(y) - c`, where `c` is the sample mean of
/// `A - B`; the comparison ignores additive constants.
pub fn target_gap<A, B>(a: &A, b: &B, sample: &[PhaseState]) -> Result<f64>
where
    A: Hamiltonian + ?Sized,
    B: Hamiltonian + ?Sized,
{
    if sample.is_empty() {
        return Err(Error::Config("target gap needs a nonempty sample".into()));
    }
    let diffs = sample
        .iter()
        .map(|y| Ok(a.value(y.as_slice())? - b.value(y.as_slice())?))
        .collect::<Result<Vec<f64>>>()?;
    let diffs = Array1::from(diffs);
    let mean = diffs.mean().unwrap_or(0.0);
    Ok((diffs.mapv(|v| (v - mean).powi(2)).mean().unwrap_or(0.0)).sqrt())
}

/// A Hamiltonian shifted by a constant.
#[derive(Debug, Clone, Copy)]
pub struct Shifted<'a, H: ?Sized> {
    pub inner: &'a H,
    pub offset: f64,
}

impl<'a, H: Hamiltonian + ?Sized> Shifted<'a, H> {
    /// Shifts `inner` so that it agrees with `reference` at `anchor`.
    pub fn anchored<R: Hamiltonian + ?Sized>(inner: &'a H, reference: &R, anchor: &[f64]) -> Result<Self> {
        Ok(Self {
            inner,
            offset: reference.value(anchor)? - inner.value(anchor)?,
        })
    }
}

impl<H: Hamiltonian + ?Sized> Hamiltonian for Shifted<'_, H> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn value(&self, y: &[f64]) -> Result<f64> {
        Ok(self.inner.value(y)? + self.offset)
    }

    fn gradient(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.inner.gradient(y)
    }

    fn gradients(&self, points: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.inner.gradients(points)
    }
}
