//! A fully connected scalar network `net(y)` with exact input gradients and
//! exact parameter gradients of losses that contain `∇_y net`.
//!
//! Parameter gradients use analytic layer recursions: a forward sweep carries
//! the primal activations together with a forward-mode tangent along the
//! loss direction `U = ∂L/∂(∇_y net)`, and a reverse sweep propagates the
//! adjoints of both. Primal and tangent rows are stacked into one `2B`-row
//! batch so every layer costs three matrix products.
//!
//! Flat parameter layout, for hidden layers `l = 1..L` in order:
//! `W_l` (row-major, `width_l × width_{l-1}`), then `b_l`; finally the output
//! weights `w_out` (`width_L`) and the scalar output bias.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phase::Hamiltonian;

/// Hidden-layer activation. All variants are smooth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
    /// `z ↦ z²`; a one-hidden-layer net with this activation is a quadratic form.
    Square,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
            Activation::Square => z * z,
        }
    }

    /// First derivative given the pre-activation `z` and activation `a`.
    fn d1(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
            Activation::Square => 2.0 * z,
        }
    }

    fn d2(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => -2.0 * a * (1.0 - a * a),
            Activation::Identity => 0.0,
            Activation::Square => 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetArchitecture {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
}

impl NetArchitecture {
    pub fn new(input_dim: usize, hidden_widths: Vec<usize>, activation: Activation) -> Result<Self> {
        let arch = Self {
            input_dim,
            hidden_widths,
            activation,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// `2d → 128 → 128 → 1` with tanh.
    pub fn default_for(d: usize) -> Self {
        Self {
            input_dim: 2 * d,
            hidden_widths: vec![128, 128],
            activation: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || !self.input_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "network input dimension must be even and positive, got {}",
                self.input_dim
            )));
        }
        if self.hidden_widths.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Width of layer `l`, where layer 0 is the input.
    fn width(&self, l: usize) -> usize {
        if l == 0 {
            self.input_dim
        } else {
            self.hidden_widths[l - 1]
        }
    }

    fn depth(&self) -> usize {
        self.hidden_widths.len()
    }

    /// Total number of scalar parameters `P`.
    pub fn num_params(&self) -> usize {
        let hidden: usize = (1..=self.depth())
            .map(|l| self.width(l) * (self.width(l - 1) + 1))
            .sum();
        hidden + self.width(self.depth()) + 1
    }

    /// Offsets of `(W_l, b_l)` for each hidden layer and of `(w_out, b_out)`.
    fn offsets(&self) -> (Vec<(usize, usize)>, usize, usize) {
        let mut at = 0;
        let mut layers = Vec::with_capacity(self.depth());
        for l in 1..=self.depth() {
            let w = at;
            at += self.width(l) * self.width(l - 1);
            layers.push((w, at));
            at += self.width(l);
        }
        let w_out = at;
        let b_out = at + self.width(self.depth());
        (layers, w_out, b_out)
    }
}

/// Flattened weights and biases of a [`NetArchitecture`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetParameters {
    values: Vec<f64>,
}

impl NetParameters {
    pub fn zeros(arch: &NetArchitecture) -> Self {
        Self {
            values: vec![0.0; arch.num_params()],
        }
    }

    /// Uniform `±1/√fan_in` initialization, deterministic in `seed`.
    pub fn init(arch: &NetArchitecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(arch.num_params());
        for l in 1..=arch.depth() {
            let bound = 1.0 / (arch.width(l - 1) as f64).sqrt();
            let count = arch.width(l) * (arch.width(l - 1) + 1);
            values.extend((0..count).map(|_| rng.gen_range(-bound..bound)));
        }
        let bound = 1.0 / (arch.width(arch.depth()) as f64).sqrt();
        values.extend((0..=arch.width(arch.depth())).map(|_| rng.gen_range(-bound..bound)));
        Self { values }
    }

    pub fn from_flat(arch: &NetArchitecture, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.num_params() {
            return Err(Error::Shape(format!(
                "architecture needs {} parameters, got {}",
                arch.num_params(),
                values.len()
            )));
        }
        Ok(Self { values })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

struct Layer<'a> {
    w: ArrayView2<'a, f64>,
    b: ArrayView1<'a, f64>,
}

struct Views<'a> {
    hidden: Vec<Layer<'a>>,
    w_out: ArrayView1<'a, f64>,
    b_out: f64,
}

fn views<'a>(arch: &NetArchitecture, params: &'a NetParameters) -> Result<Views<'a>> {
    if params.len() != arch.num_params() {
        return Err(Error::Shape(format!(
            "architecture needs {} parameters, got {}",
            arch.num_params(),
            params.len()
        )));
    }
    let v = params.as_slice();
    let (offsets, w_out, b_out) = arch.offsets();
    let hidden = offsets
        .iter()
        .enumerate()
        .map(|(i, &(w, b))| {
            let (rows, cols) = (arch.width(i + 1), arch.width(i));
            Layer {
                w: ArrayView2::from_shape((rows, cols), &v[w..b]).expect("offsets match shapes"),
                b: ArrayView1::from(&v[b..b + rows]),
            }
        })
        .collect();
    Ok(Views {
        hidden,
        w_out: ArrayView1::from(&v[w_out..b_out]),
        b_out: v[b_out],
    })
}

/// Activations recorded by a forward sweep over a batch.
pub struct Tape {
    /// `A_0 = X, A_1, .., A_L`.
    acts: Vec<Array2<f64>>,
    /// `σ'(Z_l)` for `l = 1..L`.
    slopes: Vec<Array2<f64>>,
    values: Array1<f64>,
}

impl Tape {
    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }

    pub fn batch_size(&self) -> usize {
        self.values.len()
    }
}

fn check_batch(arch: &NetArchitecture, x: &ArrayView2<f64>) -> Result<()> {
    if x.ncols() != arch.input_dim {
        return Err(Error::Shape(format!(
            "network expects inputs of length {}, got {}",
            arch.input_dim,
            x.ncols()
        )));
    }
    Ok(())
}

/// Forward sweep over the rows of `x`.
pub fn forward(arch: &NetArchitecture, params: &NetParameters, x: ArrayView2<f64>) -> Result<Tape> {
    check_batch(arch, &x)?;
    let v = views(arch, params)?;
    let act = arch.activation;
    let mut acts = Vec::with_capacity(arch.depth() + 1);
    let mut slopes = Vec::with_capacity(arch.depth());
    acts.push(x.to_owned());
    for layer in &v.hidden {
        let mut z = acts.last().unwrap().dot(&layer.w.t());
        z += &layer.b;
        let a = z.mapv(|zi| act.apply(zi));
        z.zip_mut_with(&a, |zi, &ai| *zi = act.d1(*zi, ai));
        let slope = z;
        acts.push(a);
        slopes.push(slope);
    }
    let values = acts.last().unwrap().dot(&v.w_out) + v.b_out;
    Ok(Tape {
        acts,
        slopes,
        values,
    })
}

/// `∇_y net` for every row of the taped batch.
pub fn input_gradients(arch: &NetArchitecture, params: &NetParameters, tape: &Tape) -> Result<Array2<f64>> {
    let v = views(arch, params)?;
    let b = tape.batch_size();
    let mut adj = Array2::from_shape_fn((b, v.w_out.len()), |(_, j)| v.w_out[j]);
    for (l, layer) in v.hidden.iter().enumerate().rev() {
        adj *= &tape.slopes[l];
        adj = adj.dot(&layer.w);
    }
    Ok(adj)
}

pub fn net_value(arch: &NetArchitecture, params: &NetParameters, y: &[f64]) -> Result<f64> {
    let x = ArrayView2::from_shape((1, y.len()), y).expect("row view");
    Ok(forward(arch, params, x)?.values[0])
}

pub fn net_input_gradient(arch: &NetArchitecture, params: &NetParameters, y: &[f64]) -> Result<Vec<f64>> {
    let x = ArrayView2::from_shape((1, y.len()), y).expect("row view");
    let tape = forward(arch, params, x)?;
    Ok(input_gradients(arch, params, &tape)?.row(0).to_vec())
}

/// What a loss reports back about itself: its value and its sensitivities to
/// the network values and input gradients at the probe points.
pub struct LossAdjoint {
    pub loss: f64,
    /// `∂L/∂net(x_b)`, one entry per probe point.
    pub d_values: Option<Array1<f64>>,
    /// `∂L/∂(∇_y net(x_b))`, one row per probe point.
    pub d_gradients: Option<Array2<f64>>,
}

/// Exact `∂L/∂θ` for a loss that depends on the network only through its
/// values and input gradients at the rows of `points`.
///
/// `loss` receives `(values, gradients)` at the probe points and returns the
/// loss together with its adjoints. The returned vector follows the flat
/// parameter layout.
pub fn loss_parameter_gradient<F>(
    arch: &NetArchitecture,
    params: &NetParameters,
    points: ArrayView2<f64>,
    loss: F,
) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&Array1<f64>, &Array2<f64>) -> Result<LossAdjoint>,
{
    let tape = forward(arch, params, points)?;
    let grads = input_gradients(arch, params, &tape)?;
    let adjoint = loss(&tape.values, &grads)?;
    if !adjoint.loss.is_finite() {
        let pair = first_non_finite_row(&tape.values, &grads).unwrap_or(0);
        return Err(Error::NonFiniteLoss { pair });
    }
    let b = tape.batch_size();
    let d_values = adjoint.d_values.unwrap_or_else(|| Array1::zeros(b));
    let d_grads = adjoint
        .d_gradients
        .unwrap_or_else(|| Array2::zeros((b, arch.input_dim)));
    if d_values.len() != b || d_grads.dim() != (b, arch.input_dim) {
        return Err(Error::Shape("loss adjoints do not match the probe batch".into()));
    }
    let grad = parameter_gradient(arch, params, &tape, &d_values, &d_grads)?;
    Ok((adjoint.loss, grad))
}

fn first_non_finite_row(values: &Array1<f64>, grads: &Array2<f64>) -> Option<usize> {
    (0..values.len()).find(|&i| !values[i].is_finite() || grads.row(i).iter().any(|g| !g.is_finite()))
}

/// Reverse sweep for `S = Σ_b v̄_b net(x_b) + Σ_b U_b · ∇_y net(x_b)`.
fn parameter_gradient(
    arch: &NetArchitecture,
    params: &NetParameters,
    tape: &Tape,
    d_values: &Array1<f64>,
    d_grads: &Array2<f64>,
) -> Result<Vec<f64>> {
    let v = views(arch, params)?;
    let act = arch.activation;
    let depth = arch.depth();
    let b = tape.batch_size();
    let (offsets, w_out_at, b_out_at) = arch.offsets();
    let mut out = vec![0.0; arch.num_params()];

    // Stacked batch: rows [0, b) carry primal activations A_l, rows [b, 2b)
    // carry tangents Ȧ_l along U. Z-tangents are kept for σ'' terms.
    let mut stacked = Vec::with_capacity(depth + 1);
    let mut first = Array2::zeros((2 * b, arch.input_dim));
    first.slice_mut(s![..b, ..]).assign(&tape.acts[0]);
    first.slice_mut(s![b.., ..]).assign(d_grads);
    stacked.push(first);
    let mut z_tangents = Vec::with_capacity(depth);
    for (l, layer) in v.hidden.iter().enumerate() {
        let prev_tangent = stacked[l].slice(s![b.., ..]);
        let z_dot = prev_tangent.dot(&layer.w.t());
        let mut next = Array2::zeros((2 * b, layer.w.nrows()));
        next.slice_mut(s![..b, ..]).assign(&tape.acts[l + 1]);
        let mut a_dot = next.slice_mut(s![b.., ..]);
        a_dot.assign(&z_dot);
        a_dot *= &tape.slopes[l];
        stacked.push(next);
        z_tangents.push(z_dot);
    }

    let top = &stacked[depth];
    let w_out_grad = d_values.dot(&top.slice(s![..b, ..])) + top.slice(s![b.., ..]).sum_axis(Axis(0));
    out[w_out_at..b_out_at]
        .iter_mut()
        .zip(w_out_grad.iter())
        .for_each(|(o, g)| *o = *g);
    out[b_out_at] = d_values.sum();

    // Stacked adjoints: rows [0, b) hold Ā_l, rows [b, 2b) hold the adjoint of Ȧ_l.
    let width = v.w_out.len();
    let mut adj = Array2::from_shape_fn((2 * b, width), |(i, j)| {
        if i < b {
            d_values[i] * v.w_out[j]
        } else {
            v.w_out[j]
        }
    });
    for l in (0..depth).rev() {
        let layer = &v.hidden[l];
        let slope = &tape.slopes[l];
        let acts = &tape.acts[l + 1];
        let (a_bar, a_dot_bar) = adj.view().split_at(Axis(0), b);
        // adjoint of Z: Ā ⊙ σ' + (adjoint of Ȧ) ⊙ Ż ⊙ σ''
        let mut z_bar = &a_bar * slope;
        ndarray::Zip::from(&mut z_bar)
            .and(&a_dot_bar)
            .and(&z_tangents[l])
            .and(acts)
            .for_each(|zb, &adb, &zd, &a| *zb += adb * zd * act.d2(a));
        let z_dot_bar = &a_dot_bar * slope;
        let mut stacked_bar = Array2::zeros((2 * b, layer.w.nrows()));
        stacked_bar.slice_mut(s![..b, ..]).assign(&z_bar);
        stacked_bar.slice_mut(s![b.., ..]).assign(&z_dot_bar);

        let w_grad = stacked_bar.t().dot(&stacked[l]);
        let (w_at, b_at) = offsets[l];
        out[w_at..b_at]
            .iter_mut()
            .zip(w_grad.iter())
            .for_each(|(o, g)| *o = *g);
        let b_grad = z_bar.sum_axis(Axis(0));
        out[b_at..b_at + b_grad.len()]
            .iter_mut()
            .zip(b_grad.iter())
            .for_each(|(o, g)| *o = *g);
        if l > 0 {
            adj = stacked_bar.dot(&layer.w);
        }
    }
    Ok(out)
}

/// An architecture bundled with parameters, usable as a Hamiltonian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarNet {
    pub arch: NetArchitecture,
    pub params: NetParameters,
}

impl ScalarNet {
    pub fn new(arch: NetArchitecture, params: NetParameters) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.num_params() {
            return Err(Error::Shape(format!(
                "architecture needs {} parameters, got {}",
                arch.num_params(),
                params.len()
            )));
        }
        Ok(Self { arch, params })
    }

}

impl Hamiltonian for ScalarNet {
    fn dim(&self) -> usize {
        self.arch.input_dim / 2
    }

    fn value(&self, y: &[f64]) -> Result<f64> {
        net_value(&self.arch, &self.params, y)
    }

    fn gradient(&self, y: &[f64]) -> Result<Vec<f64>> {
        net_input_gradient(&self.arch, &self.params, y)
    }

    fn values(&self, points: ArrayView2<f64>) -> Result<Vec<f64>> {
        Ok(forward(&self.arch, &self.params, points)?.values.to_vec())
    }

    fn gradients(&self, points: ArrayView2<f64>) -> Result<Array2<f64>> {
        let tape = forward(&self.arch, &self.params, points)?;
        input_gradients(&self.arch, &self.params, &tape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn parameter_count_and_layout() {
        let arch = NetArchitecture::new(2, vec![3, 4], Activation::Tanh).unwrap();
        assert_eq!(arch.num_params(), 3 * 3 + 4 * 4 + 4 + 1);
        let (layers, w_out, b_out) = arch.offsets();
        assert_eq!(layers, vec![(0, 6), (9, 21)]);
        assert_eq!((w_out, b_out), (25, 29));
    }

    #[test]
    fn rejects_bad_architectures() {
        assert!(NetArchitecture::new(3, vec![4], Activation::Tanh).is_err());
        assert!(NetArchitecture::new(2, vec![4, 0], Activation::Tanh).is_err());
        let arch = NetArchitecture::default_for(1);
        assert!(NetParameters::from_flat(&arch, vec![0.0; 3]).is_err());
    }

    #[test]
    fn zero_parameters_give_zero() {
        let arch = NetArchitecture::default_for(1);
        let params = NetParameters::zeros(&arch);
        assert_eq!(net_value(&arch, &params, &[0.3, -0.7]).unwrap(), 0.0);
        assert_eq!(net_input_gradient(&arch, &params, &[0.3, -0.7]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn linear_layer_is_affine() {
        let arch = NetArchitecture::new(2, vec![], Activation::Identity).unwrap();
        let params = NetParameters::from_flat(&arch, vec![1.5, -2.0, 0.25]).unwrap();
        let y = [0.4, 0.1];
        assert!((net_value(&arch, &params, &y).unwrap() - (0.6 - 0.2 + 0.25)).abs() < 1e-15);
        assert_eq!(net_input_gradient(&arch, &params, &y).unwrap(), vec![1.5, -2.0]);
    }

    #[test]
    fn dimension_mismatch() {
        let arch = NetArchitecture::default_for(1);
        let params = NetParameters::init(&arch, 0);
        assert!(net_value(&arch, &params, &[0.0, 1.0, 2.0, 3.0]).is_err());
        let wrong = NetParameters::zeros(&NetArchitecture::default_for(2));
        assert!(net_value(&arch, &wrong, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let arch = NetArchitecture::default_for(1);
        let a = NetParameters::init(&arch, 7);
        assert_eq!(a, NetParameters::init(&arch, 7));
        assert_ne!(a, NetParameters::init(&arch, 8));
        assert!(a.as_slice()[..256].iter().all(|w| w.abs() <= 1.0 / 2f64.sqrt()));
    }

    #[test]
    fn batch_matches_single_points() {
        let arch = NetArchitecture::default_for(2);
        let params = NetParameters::init(&arch, 1);
        let x = array![[0.1, 0.2, 0.3, 0.4], [-1.0, 0.5, 0.0, 2.0]];
        let tape = forward(&arch, &params, x.view()).unwrap();
        let grads = input_gradients(&arch, &params, &tape).unwrap();
        for r in 0..2 {
            let y = x.row(r).to_vec();
            assert_eq!(tape.values()[r], net_value(&arch, &params, &y).unwrap());
            let g = net_input_gradient(&arch, &params, &y).unwrap();
            for k in 0..4 {
                assert!((grads[[r, k]] - g[k]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let arch = NetArchitecture::new(2, vec![3], Activation::Tanh).unwrap();
        let params = NetParameters::init(&arch, 2);
        let x = array![[0.0, 1.0], [1.0, 0.0]];
        let err = loss_parameter_gradient(&arch, &params, x.view(), |_, _| {
            Ok(LossAdjoint {
                loss: f64::NAN,
                d_values: None,
                d_gradients: None,
            })
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. }));
    }
}
