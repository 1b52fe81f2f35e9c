//! Dense multi-layer perceptrons with hand-written backpropagation, an Adam
//! optimizer and Polyak target updates.
//!
//! Every learned model in the crate (policies, critics, the preference reward
//! model, the distance model and the RND pair) is an [`Mlp`]. Parameters live
//! in one flat vector; layer `l` stores its weight matrix `W_l` row-major with
//! shape `(n_in, n_out)` followed by its bias `b_l`, so the parameter count is
//! `Σ (n_in + 1) · n_out`.
//!
//! Binary layout written by [`Mlp::to_bytes`] (all integers and floats
//! little-endian):
//!
//! ```text
//! b"MLP1" | u32 n_sizes | u32 × n_sizes | u8 hidden | u8 output | u64 n_params | f64 × n_params
//! ```

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pointwise nonlinearity applied after a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
            Activation::Sigmoid => 3,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => Activation::Identity,
            1 => Activation::Relu,
            2 => Activation::Tanh,
            3 => Activation::Sigmoid,
            other => return Err(Error::Corrupt(format!("unknown activation code {other}"))),
        })
    }

    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A fully connected network `R^{sizes[0]} -> R^{sizes[last]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    hidden: Activation,
    output: Activation,
    params: Vec<f64>,
}

/// Post-activation values of every layer from one batched forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    activations: Vec<Array2<f64>>,
}

impl Trace {
    /// Network output, one row per sample.
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("trace always holds the input")
    }
}

/// Result of backpropagating an output gradient.
#[derive(Clone, Debug)]
pub struct Gradients {
    /// Same layout as [`Mlp::parameters`].
    pub params: Vec<f64>,
    /// Gradient with respect to the network input, one row per sample.
    pub input: Array2<f64>,
}

pub fn parameter_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "an approximator needs at least an input and an output size, got {sizes:?}"
        )));
    }
    if sizes.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "layer sizes must be positive, got {sizes:?}"
        )));
    }
    Ok(())
}

impl Mlp {
    /// Uniform fan-in initialization: every weight and bias of a layer with
    /// `n_in` inputs is drawn from `U(-1/√n_in, 1/√n_in)`.
    pub fn init(sizes: &[usize], hidden: Activation, output: Activation, seed: u64) -> Result<Self> {
        validate_sizes(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(parameter_count(sizes));
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..(w[0] + 1) * w[1] {
                params.push(rng.random_range(-bound..=bound));
            }
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            hidden,
            output,
            params,
        })
    }

    pub fn from_parameters(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        params: Vec<f64>,
    ) -> Result<Self> {
        validate_sizes(sizes)?;
        let expected = parameter_count(sizes);
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: params.len(),
            });
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            hidden,
            output,
            params,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.len()
    }

    /// Multiplies the last layer's weights and biases by `scale`.
    pub fn scale_output_layer(&mut self, scale: f64) {
        let n = self.sizes.len();
        let last = (self.sizes[n - 2] + 1) * self.sizes[n - 1];
        let start = self.params.len() - last;
        for p in &mut self.params[start..] {
            *p *= scale;
        }
    }

    fn same_architecture(&self, other: &Mlp) -> bool {
        self.sizes == other.sizes && self.hidden == other.hidden && self.output == other.output
    }

    fn layer_count(&self) -> usize {
        self.sizes.len() - 1
    }

    fn layer_offset(&self, layer: usize) -> usize {
        self.sizes[..=layer]
            .windows(2)
            .take(layer)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }

    fn layer(&self, layer: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let n_in = self.sizes[layer];
        let n_out = self.sizes[layer + 1];
        let off = self.layer_offset(layer);
        let w = ArrayView2::from_shape((n_in, n_out), &self.params[off..off + n_in * n_out])
            .expect("layer shape matches parameter layout");
        let b = ArrayView1::from(&self.params[off + n_in * n_out..off + (n_in + 1) * n_out]);
        (w, b)
    }

    fn activation_for(&self, layer: usize) -> Activation {
        if layer + 1 == self.layer_count() {
            self.output
        } else {
            self.hidden
        }
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: cols,
            });
        }
        Ok(())
    }

    /// Evaluates the network on a single input.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x.len())?;
        let mut a = Array1::from(x.to_vec());
        for l in 0..self.layer_count() {
            let (w, b) = self.layer(l);
            let act = self.activation_for(l);
            let mut z = a.dot(&w) + b;
            z.mapv_inplace(|v| act.apply(v));
            a = z;
        }
        Ok(a.to_vec())
    }

    /// Evaluates the network on a batch, one sample per row.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        let mut a = x.to_owned();
        for l in 0..self.layer_count() {
            a = self.layer_forward(l, a.view());
        }
        Ok(a)
    }

    fn layer_forward(&self, l: usize, a: ArrayView2<'_, f64>) -> Array2<f64> {
        let (w, b) = self.layer(l);
        let act = self.activation_for(l);
        let mut z = a.dot(&w);
        z += &b;
        z.mapv_inplace(|v| act.apply(v));
        z
    }

    /// Batched forward pass that keeps what [`Mlp::backward`] needs.
    pub fn forward_trace(&self, x: ArrayView2<'_, f64>) -> Result<Trace> {
        self.check_input(x.ncols())?;
        let mut activations = Vec::with_capacity(self.sizes.len());
        activations.push(x.to_owned());
        for l in 0..self.layer_count() {
            let next = self.layer_forward(l, activations[l].view());
            activations.push(next);
        }
        Ok(Trace { activations })
    }

    /// Backpropagates `grad_out = ∂L/∂output` (one row per sample) through the
    /// traced pass, returning parameter and input gradients.
    pub fn backward(&self, trace: &Trace, grad_out: ArrayView2<'_, f64>) -> Gradients {
        let layers = self.layer_count();
        let mut grads = vec![0.0; self.params.len()];
        let out = trace.output();
        assert_eq!(grad_out.dim(), out.dim(), "output gradient shape");
        let out_act = self.output;
        let mut delta = Array2::from_shape_fn(out.dim(), |(i, j)| {
            grad_out[[i, j]] * out_act.derivative_from_output(out[[i, j]])
        });
        for l in (0..layers).rev() {
            let a_in = &trace.activations[l];
            let n_in = self.sizes[l];
            let n_out = self.sizes[l + 1];
            let off = self.layer_offset(l);
            let gw = a_in.t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            grads[off..off + n_in * n_out]
                .iter_mut()
                .zip(gw.iter())
                .for_each(|(g, v)| *g = *v);
            grads[off + n_in * n_out..off + (n_in + 1) * n_out]
                .iter_mut()
                .zip(gb.iter())
                .for_each(|(g, v)| *g = *v);
            let (w, _) = self.layer(l);
            let mut grad_in = delta.dot(&w.t());
            if l > 0 {
                let act = self.hidden;
                grad_in.zip_mut_with(a_in, |g, &y| *g *= act.derivative_from_output(y));
            }
            delta = grad_in;
        }
        Gradients {
            params: grads,
            input: delta,
        }
    }

    /// Applies a precomputed gradient through `opt`.
    pub fn apply_gradient(&mut self, opt: &mut Adam, grad: &[f64]) -> Result<()> {
        opt.apply(&mut self.params, grad)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 + 4 * self.sizes.len() + 10 + 8 * self.params.len());
        out.extend_from_slice(b"MLP1");
        out.extend_from_slice(&(self.sizes.len() as u32).to_le_bytes());
        for &s in &self.sizes {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        out.push(self.hidden.code());
        out.push(self.output.code());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = ByteCursor { bytes, pos: 0 };
        if cur.take(4)? != b"MLP1" {
            return Err(Error::Corrupt("bad approximator magic".into()));
        }
        let n = cur.u32()? as usize;
        if n > 1024 {
            return Err(Error::Corrupt(format!("implausible layer count {n}")));
        }
        let mut sizes = Vec::with_capacity(n);
        for _ in 0..n {
            sizes.push(cur.u32()? as usize);
        }
        let hidden = Activation::from_code(cur.take(1)?[0])?;
        let output = Activation::from_code(cur.take(1)?[0])?;
        let count = cur.u64()? as usize;
        validate_sizes(&sizes).map_err(|e| Error::Corrupt(e.to_string()))?;
        if count != parameter_count(&sizes) {
            return Err(Error::Corrupt("parameter count does not match layer sizes".into()));
        }
        let raw = cur.take(count * 8)?;
        let params = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if cur.pos != bytes.len() {
            return Err(Error::Corrupt("trailing bytes after approximator".into()));
        }
        Ok(Self {
            sizes,
            hidden,
            output,
            params,
        })
    }
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corrupt("unexpected end of approximator data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Adam optimizer state for one parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step_count: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(learning_rate: f64, num_params: usize) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn for_net(learning_rate: f64, net: &Mlp) -> Self {
        Self::new(learning_rate, net.num_parameters())
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn apply(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                expected: self.m.len(),
                got: grad.len().min(params.len()),
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let step = self.learning_rate / bc1;
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let denom = (self.v[i] / bc2).sqrt() + self.epsilon;
            params[i] -= step * self.m[i] / denom;
        }
        Ok(())
    }
}

/// One gradient step on `net` for a loss defined on the batched output.
///
/// `loss_fn` receives the network output and returns the loss together with
/// `∂loss/∂output`. The returned value is the loss before the step.
pub fn grad_step<F>(net: &mut Mlp, opt: &mut Adam, inputs: ArrayView2<'_, f64>, loss_fn: F) -> Result<f64>
where
    F: FnOnce(&Array2<f64>) -> (f64, Array2<f64>),
{
    let trace = net.forward_trace(inputs)?;
    let (loss, grad_out) = loss_fn(trace.output());
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let grads = net.backward(&trace, grad_out.view());
    net.apply_gradient(opt, &grads.params)?;
    Ok(loss)
}

/// Polyak update `θ_target ← (1 − τ)·θ_target + τ·θ_online`.
pub fn soft_update(target: &mut Mlp, online: &Mlp, tau: f64) -> Result<()> {
    if !target.same_architecture(online) {
        return Err(Error::ArchitectureMismatch);
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("tau must lie in [0, 1], got {tau}")));
    }
    for (t, o) in target.params.iter_mut().zip(&online.params) {
        *t = (1.0 - tau) * *t + tau * *o;
    }
    Ok(())
}

/// Stacks equally sized rows into a batch matrix.
pub fn stack_rows<R: AsRef<[f64]>>(rows: &[R]) -> Array2<f64> {
    let cols = rows.first().map_or(0, |r| r.as_ref().len());
    let mut out = Array2::zeros((rows.len(), cols));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i)
            .iter_mut()
            .zip(r.as_ref())
            .for_each(|(o, v)| *o = *v);
    }
    out
}

/// Concatenates per-sample feature slices into one batch row per sample.
pub fn concat_rows(parts: &[&[Vec<f64>]]) -> Array2<f64> {
    let n = parts.first().map_or(0, |p| p.len());
    let cols: usize = parts.iter().map(|p| p.first().map_or(0, Vec::len)).sum();
    let mut out = Array2::zeros((n, cols));
    for i in 0..n {
        let mut c = 0;
        for p in parts {
            for &v in &p[i] {
                out[[i, c]] = v;
                c += 1;
            }
        }
    }
    out
}
