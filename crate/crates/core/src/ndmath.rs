//! Dense double-precision arrays, leaky-rectifier MLPs and Adam.
//!
//! Arrays are row-major `Vec<f64>` buffers; networks are a few layers of
//! width 8-400.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;

/// Negative slope of the leaky rectifier used by every hidden layer.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Row-major array of `f64` with an explicit shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl RealArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::arg(format!(
                "shape {:?} needs {} entries, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Stacks equal-length rows into a `[rows, cols]` array.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::arg("ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading extent (batch size for rank-2 arrays).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Trailing extent of a rank-2 array.
    pub fn cols(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[1]
        } else {
            self.data.len()
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols().max(1))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn expect_batch(&self, width: usize, what: &str) -> Result<()> {
        if self.shape.len() != 2 || self.shape[1] != width {
            return Err(Error::arg(format!(
                "{what}: expected [batch, {width}], got {:?}",
                self.shape
            )));
        }
        Ok(())
    }
}

/// `log Σ exp(v)` evaluated with a max shift so large entries do not overflow.
pub fn logsumexp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::arg("logsumexp of an empty vector"));
    }
    Ok(logsumexp_unchecked(v))
}

pub(crate) fn logsumexp_unchecked(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = v.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Softmax of `v`, consistent with [`logsumexp`].
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let lse = logsumexp_unchecked(v);
    v.iter().map(|x| (x - lse).exp()).collect()
}

#[inline]
pub fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

#[inline]
fn leaky_grad(pre: f64) -> f64 {
    if pre > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// Affine + leaky-rectifier network; the last layer is affine only.
///
/// Layer `k` maps `layer_dims[k]` inputs to `layer_dims[k + 1]` outputs and
/// stores its weights as a `[out, in]` row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub layer_dims: Vec<usize>,
    pub weights: Vec<RealArray>,
    pub biases: Vec<RealArray>,
}

/// Parameter gradients with the same layout as [`MlpParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<RealArray>,
    pub biases: Vec<RealArray>,
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct MlpTrace {
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer.
    pre: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.pre.last().expect("trace of an empty network")
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::arg(format!(
            "an MLP needs at least 2 layer widths, got {dims:?}"
        )));
    }
    if dims.contains(&0) {
        return Err(Error::arg(format!("layer widths must be positive: {dims:?}")));
    }
    Ok(())
}

/// Fan-in scaled Gaussian initialisation (He gain for the leaky rectifier),
/// zero biases. Deterministic in `seed`.
pub fn mlp_init(layer_dims: &[usize], seed: u64) -> Result<MlpParams> {
    check_dims(layer_dims)?;
    let mut rng = Stream::new(seed);
    let mut weights = Vec::with_capacity(layer_dims.len() - 1);
    let mut biases = Vec::with_capacity(layer_dims.len() - 1);
    for pair in layer_dims.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let std = (2.0 / (fan_in as f64 * (1.0 + LEAKY_SLOPE * LEAKY_SLOPE))).sqrt();
        let data = (0..fan_in * fan_out).map(|_| std * rng.normal()).collect();
        weights.push(RealArray::new(vec![fan_out, fan_in], data)?);
        biases.push(RealArray::zeros(vec![fan_out]));
    }
    Ok(MlpParams {
        layer_dims: layer_dims.to_vec(),
        weights,
        biases,
    })
}

impl MlpParams {
    /// All-zero network with the given widths.
    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        check_dims(layer_dims)?;
        let weights = layer_dims
            .windows(2)
            .map(|p| RealArray::zeros(vec![p[1], p[0]]))
            .collect();
        let biases = layer_dims[1..]
            .iter()
            .map(|&d| RealArray::zeros(vec![d]))
            .collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
        })
    }

    /// Checks that stored arrays agree with `layer_dims`.
    pub fn validate(&self) -> Result<()> {
        check_dims(&self.layer_dims)?;
        let layers = self.layer_dims.len() - 1;
        if self.weights.len() != layers || self.biases.len() != layers {
            return Err(Error::arg("layer count does not match layer_dims"));
        }
        for (k, pair) in self.layer_dims.windows(2).enumerate() {
            if self.weights[k].shape() != [pair[1], pair[0]] {
                return Err(Error::arg(format!(
                    "layer {k}: weight shape {:?}, expected [{}, {}]",
                    self.weights[k].shape(),
                    pair[1],
                    pair[0]
                )));
            }
            if self.biases[k].shape() != [pair[1]] {
                return Err(Error::arg(format!("layer {k}: bias shape mismatch")));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(RealArray::len).sum::<usize>()
            + self.biases.iter().map(RealArray::len).sum::<usize>()
    }

    /// Parameter buffers in the order `w0, b0, w1, b1, ...`.
    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.data_mut());
            out.push(b.data_mut());
        }
        out
    }

    pub fn buffers(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.data());
            out.push(b.data());
        }
        out
    }

    fn affine(&self, k: usize, x: &[f64], out: &mut Vec<f64>) {
        let w = self.weights[k].data();
        let b = self.biases[k].data();
        let fan_in = self.layer_dims[k];
        out.clear();
        out.extend(
            b.iter()
                .enumerate()
                .map(|(o, &bo)| bo + dot(&w[o * fan_in..(o + 1) * fan_in], x)),
        );
    }

    /// Forward pass for a single input vector.
    pub fn forward_one(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.input_dim());
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let last = self.num_layers() - 1;
        for k in 0..self.num_layers() {
            self.affine(k, &cur, &mut next);
            if k != last {
                next.iter_mut().for_each(|v| *v = leaky(*v));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    /// Forward pass recording what the backward pass needs.
    pub fn trace(&self, x: &[f64]) -> MlpTrace {
        debug_assert_eq!(x.len(), self.input_dim());
        let layers = self.num_layers();
        let mut inputs = Vec::with_capacity(layers);
        let mut pre = Vec::with_capacity(layers);
        inputs.push(x.to_vec());
        for k in 0..layers {
            let mut z = Vec::new();
            self.affine(k, &inputs[k], &mut z);
            if k + 1 < layers {
                inputs.push(z.iter().map(|&v| leaky(v)).collect());
            }
            pre.push(z);
        }
        MlpTrace { inputs, pre }
    }

    /// Reverse pass for one sample: returns `Jᵀ cotangent` w.r.t. the input and,
    /// when `grads` is given, accumulates parameter gradients into it.
    pub fn backward(
        &self,
        trace: &MlpTrace,
        cotangent: &[f64],
        mut grads: Option<&mut MlpGrads>,
    ) -> Vec<f64> {
        debug_assert_eq!(cotangent.len(), self.output_dim());
        let mut delta = cotangent.to_vec();
        for k in (0..self.num_layers()).rev() {
            if k + 1 < self.num_layers() {
                for (d, &p) in delta.iter_mut().zip(&trace.pre[k]) {
                    *d *= leaky_grad(p);
                }
            }
            let fan_in = self.layer_dims[k];
            let input = &trace.inputs[k];
            if let Some(g) = grads.as_deref_mut() {
                let gw = g.weights[k].data_mut();
                let gb = g.biases[k].data_mut();
                for (o, &d) in delta.iter().enumerate() {
                    gb[o] += d;
                    if d != 0.0 {
                        let row = &mut gw[o * fan_in..(o + 1) * fan_in];
                        for (gwi, &xi) in row.iter_mut().zip(input) {
                            *gwi += d * xi;
                        }
                    }
                }
            }
            let w = self.weights[k].data();
            let mut back = vec![0.0; fan_in];
            for (o, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    for (bi, &wi) in back.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                        *bi += d * wi;
                    }
                }
            }
            delta = back;
        }
        delta
    }

    /// Vector-Jacobian product w.r.t. the input only.
    pub fn input_vjp(&self, x: &[f64], cotangent: &[f64]) -> Vec<f64> {
        let trace = self.trace(x);
        self.backward(&trace, cotangent, None)
    }
}

impl MlpGrads {
    pub fn zeros_like(p: &MlpParams) -> Self {
        Self {
            weights: p
                .weights
                .iter()
                .map(|w| RealArray::zeros(w.shape().to_vec()))
                .collect(),
            biases: p
                .biases
                .iter()
                .map(|b| RealArray::zeros(b.shape().to_vec()))
                .collect(),
        }
    }

    pub fn buffers(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.data());
            out.push(b.data());
        }
        out
    }

    pub fn scale(&mut self, factor: f64) {
        for a in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            a.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn fill_zero(&mut self) {
        for a in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            a.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Batched forward pass: `x` is `[batch, input_dim]`.
pub fn mlp_forward(p: &MlpParams, x: &RealArray) -> Result<RealArray> {
    x.expect_batch(p.input_dim(), "mlp_forward input")?;
    let out_dim = p.output_dim();
    let mut data = Vec::with_capacity(x.rows() * out_dim);
    for row in x.row_iter() {
        data.extend(p.forward_one(row));
    }
    RealArray::new(vec![x.rows(), out_dim], data)
}

/// Reverse-mode gradients of `⟨cotangent, mlp_forward(p, x)⟩`.
///
/// Parameter gradients are summed over the batch; the input gradient keeps
/// the batch layout of `x`.
pub fn mlp_vjp(
    p: &MlpParams,
    x: &RealArray,
    cotangent: &RealArray,
) -> Result<(MlpGrads, RealArray)> {
    x.expect_batch(p.input_dim(), "mlp_vjp input")?;
    cotangent.expect_batch(p.output_dim(), "mlp_vjp cotangent")?;
    if x.rows() != cotangent.rows() {
        return Err(Error::arg("mlp_vjp: batch sizes differ"));
    }
    let mut grads = MlpGrads::zeros_like(p);
    let mut grad_input = Vec::with_capacity(x.len());
    for (xi, ci) in x.row_iter().zip(cotangent.row_iter()) {
        let trace = p.trace(xi);
        grad_input.extend(p.backward(&trace, ci, Some(&mut grads)));
    }
    Ok((grads, RealArray::new(x.shape().to_vec(), grad_input)?))
}

/// Bias-corrected Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Fresh state for parameter buffers of the given lengths.
    pub fn new(buffer_lens: &[usize], learning_rate: f64) -> Self {
        Self {
            first_moment: buffer_lens.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: buffer_lens.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn for_mlp(p: &MlpParams, learning_rate: f64) -> Self {
        let lens: Vec<usize> = p.buffers().iter().map(|b| b.len()).collect();
        Self::new(&lens, learning_rate)
    }

    fn check(&self, params: &[&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if !(self.learning_rate > 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0)
        {
            return Err(Error::arg("Adam hyperparameters out of range"));
        }
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::arg("Adam: buffer count mismatch"));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first_moment) {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(Error::arg("Adam: buffer length mismatch"));
            }
        }
        Ok(())
    }

    /// One update of every buffer in `params` using `grads`.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        self.check(params, grads)?;
        if grads.iter().any(|g| g.iter().any(|v| v.is_nan())) {
            return Err(Error::Numeric("NaN in Adam gradient".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (b, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first_moment[b];
            let v = &mut self.second_moment[b];
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Adam update applied to every parameter of an MLP.
pub fn adam_step(state: &mut AdamState, params: &mut MlpParams, grads: &MlpGrads) -> Result<()> {
    let g = grads.buffers();
    let mut p = params.buffers_mut();
    state.step(&mut p, &g)
}

/// Eigenvalues of a symmetric `n × n` matrix (row-major) by cyclic Jacobi
/// rotations, sorted ascending.
pub fn symmetric_eigenvalues(matrix: &[f64], n: usize) -> Result<Vec<f64>> {
    if matrix.len() != n * n {
        return Err(Error::arg("symmetric_eigenvalues: not square"));
    }
    let mut a = matrix.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        let scale: f64 = a.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    eig.sort_by(f64::total_cmp);
    Ok(eig)
}

/// Ratio of largest to smallest singular value of a `[rows, cols]` matrix
/// with `rows >= cols`.
pub fn condition_number(m: &RealArray) -> Result<f64> {
    if m.shape().len() != 2 {
        return Err(Error::arg("condition_number needs a matrix"));
    }
    let (r, c) = (m.shape()[0], m.shape()[1]);
    if r < c {
        return Err(Error::arg("condition_number needs rows >= cols"));
    }
    let d = m.data();
    let mut gram = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            gram[i * c + j] = (0..r).map(|k| d[k * c + i] * d[k * c + j]).sum();
        }
    }
    let eig = symmetric_eigenvalues(&gram, c)?;
    let lo = eig[0].max(0.0).sqrt();
    let hi = eig[c - 1].max(0.0).sqrt();
    Ok(if lo == 0.0 { f64::INFINITY } else { hi / lo })
}
