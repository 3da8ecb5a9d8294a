//! Fully connected networks with hand-derived reverse passes.
//!
//! Every layer but the last applies the configured activation; the output layer is
//! linear. Weights are stored row-major as `[fan_in, fan_out]`. Batched calls treat
//! the input as `rows` consecutive vectors and compute each row with exactly the
//! same arithmetic as an unbatched call, so results do not depend on how a batch
//! is partitioned.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Gelu,
}

impl Activation {
    #[inline]
    fn apply<S: Scalar>(self, z: S) -> S {
        match self {
            Activation::Relu => z.max(S::zero()),
            Activation::Tanh => z.tanh(),
            Activation::Gelu => {
                let zf = z.as_f64();
                S::lit(0.5 * zf * (1.0 + libm::erf(zf * std::f64::consts::FRAC_1_SQRT_2)))
            }
        }
    }

    /// d act / dz, given the pre-activation `z` and its image `a`.
    #[inline]
    fn derivative<S: Scalar>(self, z: S, a: S) -> S {
        match self {
            Activation::Relu => {
                if z > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Activation::Tanh => S::one() - a * a,
            Activation::Gelu => {
                let zf = z.as_f64();
                let cdf = 0.5 * (1.0 + libm::erf(zf * std::f64::consts::FRAC_1_SQRT_2));
                let pdf = (-0.5 * zf * zf).exp() / (2.0 * std::f64::consts::PI).sqrt();
                S::lit(cdf + zf * pdf)
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Gelu => "gelu",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Gelu => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Gelu),
            _ => None,
        }
    }
}

/// Weights and biases of every layer. Also used for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<S> {
    pub weights: Vec<Vec<S>>,
    pub biases: Vec<Vec<S>>,
}

impl<S: Scalar> Params<S> {
    pub fn zeros_like(other: &Params<S>) -> Self {
        Params {
            weights: other.weights.iter().map(|w| vec![S::zero(); w.len()]).collect(),
            biases: other.biases.iter().map(|b| vec![S::zero(); b.len()]).collect(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>() + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    pub fn same_shape(&self, other: &Params<S>) -> bool {
        self.weights.len() == other.weights.len()
            && self.biases.len() == other.biases.len()
            && self.weights.iter().zip(&other.weights).all(|(a, b)| a.len() == b.len())
            && self.biases.iter().zip(&other.biases).all(|(a, b)| a.len() == b.len())
    }

    fn for_each_pair(&mut self, other: &Params<S>, mut f: impl FnMut(&mut S, S)) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, &y) in a.iter_mut().zip(b) {
                f(x, y);
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, &y) in a.iter_mut().zip(b) {
                f(x, y);
            }
        }
    }

    /// `self += k * other`
    pub fn axpy(&mut self, k: S, other: &Params<S>) {
        self.for_each_pair(other, |x, y| *x += k * y);
    }

    pub fn scale(&mut self, k: S) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            v.iter_mut().for_each(|x| *x *= k);
        }
    }

    /// `self <- (1 - tau) * self + tau * other`
    pub fn lerp_toward(&mut self, other: &Params<S>, tau: S) {
        let keep = S::one() - tau;
        self.for_each_pair(other, |x, y| *x = keep * *x + tau * y);
    }

    /// Index of the first layer holding a NaN or infinity.
    pub fn first_non_finite_layer(&self) -> Option<usize> {
        (0..self.weights.len()).find(|&l| {
            self.weights[l].iter().chain(&self.biases[l]).any(|x| !x.is_finite())
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = &S> {
        self.weights.iter().flatten().chain(self.biases.iter().flatten())
    }

    pub fn max_abs_diff(&self, other: &Params<S>) -> S {
        self.iter()
            .zip(other.iter())
            .fold(S::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}

/// A multilayer perceptron.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<S> {
    dims: Vec<usize>,
    activation: Activation,
    params: Params<S>,
}

/// Activations cached by a forward pass, consumed by the reverse pass.
#[derive(Debug, Clone)]
pub struct Trace<S> {
    rows: usize,
    /// Input to each layer; `layer_inputs[l + 1]` is the activation of layer `l`.
    layer_inputs: Vec<Vec<S>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Vec<S>>,
    output: Vec<S>,
}

impl<S> Trace<S> {
    pub fn output(&self) -> &[S] {
        &self.output
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
}

fn affine<S: Scalar>(x: &[S], rows: usize, w: &[S], b: &[S], n_in: usize, n_out: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(rows * n_out);
    for r in 0..rows {
        out.extend_from_slice(b);
        let o = &mut out[r * n_out..(r + 1) * n_out];
        for (i, &xi) in x[r * n_in..(r + 1) * n_in].iter().enumerate() {
            // exact: skipping a zero product never changes a finite sum
            if xi == S::zero() {
                continue;
            }
            for (oj, &wij) in o.iter_mut().zip(&w[i * n_out..(i + 1) * n_out]) {
                *oj += xi * wij;
            }
        }
    }
    out
}

impl<S: Scalar> Mlp<S> {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], activation: Activation, rng: &mut R) -> Self {
        assert!(dims.len() >= 2 && dims.iter().all(|&d| d > 0), "invalid layer dims {dims:?}");
        let mut weights = Vec::with_capacity(dims.len() - 1);
        let mut biases = Vec::with_capacity(dims.len() - 1);
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(
                (0..fan_in * fan_out)
                    .map(|_| S::lit(rng.random_range(-limit..limit)))
                    .collect(),
            );
            biases.push(vec![S::zero(); fan_out]);
        }
        Mlp { dims: dims.to_vec(), activation, params: Params { weights, biases } }
    }

    pub fn zeros(dims: &[usize], activation: Activation) -> Self {
        assert!(dims.len() >= 2 && dims.iter().all(|&d| d > 0), "invalid layer dims {dims:?}");
        let weights = dims.windows(2).map(|p| vec![S::zero(); p[0] * p[1]]).collect();
        let biases = dims[1..].iter().map(|&d| vec![S::zero(); d]).collect();
        Mlp { dims: dims.to_vec(), activation, params: Params { weights, biases } }
    }

    pub fn from_params(dims: &[usize], activation: Activation, params: Params<S>) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("invalid layer dims {dims:?}")));
        }
        let layers = dims.len() - 1;
        if params.weights.len() != layers || params.biases.len() != layers {
            return Err(Error::Dimension(format!(
                "{layers} layers expected, got {} weight and {} bias blocks",
                params.weights.len(),
                params.biases.len()
            )));
        }
        for l in 0..layers {
            if params.weights[l].len() != dims[l] * dims[l + 1] || params.biases[l].len() != dims[l + 1] {
                return Err(Error::Dimension(format!("layer {l} does not compose with dims {dims:?}")));
            }
        }
        if let Some(layer) = params.first_non_finite_layer() {
            return Err(Error::NonFinite { layer });
        }
        Ok(Mlp { dims: dims.to_vec(), activation, params })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &Params<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<S> {
        &mut self.params
    }

    fn check_rows(&self, input: &[S], rows: usize) -> Result<()> {
        if input.len() != rows * self.input_dim() {
            return Err(Error::Dimension(format!(
                "expected {rows} rows of width {}, got {} values",
                self.input_dim(),
                input.len()
            )));
        }
        Ok(())
    }

    /// Forward pass over `rows` stacked input vectors, without caching.
    pub fn forward_rows(&self, input: &[S], rows: usize) -> Result<Vec<S>> {
        self.check_rows(input, rows)?;
        let p = &self.params;
        let mut cur = affine(input, rows, &p.weights[0], &p.biases[0], self.dims[0], self.dims[1]);
        for l in 1..self.num_layers() {
            let act = self.activation;
            cur.iter_mut().for_each(|z| *z = act.apply(*z));
            cur = affine(&cur, rows, &p.weights[l], &p.biases[l], self.dims[l], self.dims[l + 1]);
        }
        Ok(cur)
    }

    /// Forward pass that keeps the activations needed by [`Mlp::backward_trace`].
    pub fn trace(&self, input: &[S], rows: usize) -> Result<Trace<S>> {
        self.check_rows(input, rows)?;
        let last = self.num_layers() - 1;
        let mut layer_inputs = Vec::with_capacity(self.num_layers());
        let mut pre = Vec::with_capacity(last);
        layer_inputs.push(input.to_vec());
        for l in 0..=last {
            let z = affine(
                &layer_inputs[l],
                rows,
                &self.params.weights[l],
                &self.params.biases[l],
                self.dims[l],
                self.dims[l + 1],
            );
            if l == last {
                return Ok(Trace { rows, layer_inputs, pre, output: z });
            }
            let act = self.activation;
            layer_inputs.push(z.iter().map(|&v| act.apply(v)).collect());
            pre.push(z);
        }
        unreachable!()
    }

    /// Reverse pass. Parameter gradients are summed over rows.
    pub fn backward_trace(&self, trace: &Trace<S>, output_grad: &[S]) -> Result<(Params<S>, Vec<S>)> {
        self.reverse(trace, output_grad, true)
            .map(|(g, dx)| (g.expect("parameter gradients requested"), dx))
    }

    /// Reverse pass computing only the gradient w.r.t. the input rows.
    pub fn input_grad_trace(&self, trace: &Trace<S>, output_grad: &[S]) -> Result<Vec<S>> {
        self.reverse(trace, output_grad, false).map(|(_, dx)| dx)
    }

    fn reverse(&self, trace: &Trace<S>, output_grad: &[S], want_params: bool) -> Result<(Option<Params<S>>, Vec<S>)> {
        let rows = trace.rows;
        if output_grad.len() != rows * self.output_dim() {
            return Err(Error::Dimension(format!(
                "output gradient has {} values, expected {}",
                output_grad.len(),
                rows * self.output_dim()
            )));
        }
        let layers = self.num_layers();
        let mut grads = want_params.then(|| Params::zeros_like(&self.params));
        let mut delta = output_grad.to_vec();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let x = &trace.layer_inputs[l];
            if let Some(g) = grads.as_mut() {
                let dw = &mut g.weights[l];
                let db = &mut g.biases[l];
                for r in 0..rows {
                    let dr = &delta[r * n_out..(r + 1) * n_out];
                    for (b, &d) in db.iter_mut().zip(dr) {
                        *b += d;
                    }
                    for (i, &xi) in x[r * n_in..(r + 1) * n_in].iter().enumerate() {
                        if xi == S::zero() {
                            continue;
                        }
                        for (w, &d) in dw[i * n_out..(i + 1) * n_out].iter_mut().zip(dr) {
                            *w += xi * d;
                        }
                    }
                }
            }
            let w = &self.params.weights[l];
            let mut wt = vec![S::zero(); n_in * n_out];
            for i in 0..n_in {
                for j in 0..n_out {
                    wt[j * n_in + i] = w[i * n_out + j];
                }
            }
            let mut prev = vec![S::zero(); rows * n_in];
            for r in 0..rows {
                let pr = &mut prev[r * n_in..(r + 1) * n_in];
                for (j, &d) in delta[r * n_out..(r + 1) * n_out].iter().enumerate() {
                    if d == S::zero() {
                        continue;
                    }
                    for (p, &wv) in pr.iter_mut().zip(&wt[j * n_in..(j + 1) * n_in]) {
                        *p += wv * d;
                    }
                }
            }
            if l > 0 {
                let z = &trace.pre[l - 1];
                let a = &trace.layer_inputs[l];
                let act = self.activation;
                for ((p, &zv), &av) in prev.iter_mut().zip(z).zip(a) {
                    *p *= act.derivative(zv, av);
                }
            }
            delta = prev;
        }
        Ok((grads, delta))
    }

    /// Forward pass on a tensor whose last dimension is the input width.
    pub fn forward(&self, input: &Tensor<S>) -> Result<Tensor<S>> {
        if input.last_dim() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "input last dimension {} != network input {}",
                input.last_dim(),
                self.input_dim()
            )));
        }
        let out = self.forward_rows(input.data(), input.rows())?;
        Ok(input.with_last_dim(out, self.output_dim()))
    }

    /// Gradients of `<output_grad, f(input)>` w.r.t. parameters (summed over rows) and input.
    pub fn backward(&self, input: &Tensor<S>, output_grad: &Tensor<S>) -> Result<(Params<S>, Tensor<S>)> {
        if input.last_dim() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "input last dimension {} != network input {}",
                input.last_dim(),
                self.input_dim()
            )));
        }
        if output_grad.last_dim() != self.output_dim() || output_grad.rows() != input.rows() {
            return Err(Error::Dimension(format!(
                "output gradient shape {:?} inconsistent with input {:?}",
                output_grad.shape(),
                input.shape()
            )));
        }
        let trace = self.trace(input.data(), input.rows())?;
        let (g, dx) = self.backward_trace(&trace, output_grad.data())?;
        Ok((g, Tensor::new(input.shape().to_vec(), dx)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_linear(w: Vec<f64>, n_in: usize, n_out: usize) -> Mlp<f64> {
        Mlp::from_params(
            &[n_in, n_out],
            Activation::Relu,
            Params { weights: vec![w], biases: vec![vec![0.0; n_out]] },
        )
        .unwrap()
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::<f64>::zeros(&[3, 5, 2], Activation::Tanh);
        let x = Tensor::matrix(2, vec![1.0, -2.0, 3.0, 0.5, 0.1, 9.0]).unwrap();
        let y = net.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer() {
        let net = single_linear(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let y = net.forward(&Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn hand_evaluated_relu_net() {
        // W1 = [[1, -1], [2, 1]] (rows = inputs), b1 = [0.5, 0]; W2 = [[1], [-2]], b2 = [0.25]
        let params = Params {
            weights: vec![vec![1.0, -1.0, 2.0, 1.0], vec![1.0, -2.0]],
            biases: vec![vec![0.5, 0.0], vec![0.25]],
        };
        let net = Mlp::from_params(&[2, 2, 1], Activation::Relu, params).unwrap();
        // x = [1, -1]: z1 = [1*1 + (-1)*2 + 0.5, 1*(-1) + (-1)*1 + 0] = [-0.5, -2] -> relu [0, 0]
        // y = 0.25
        let y = net.forward(&Tensor::vector(vec![1.0, -1.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[0.25]);
        // x = [2, -0.5]: z1 = [2 - 1 + 0.5, -2 - 0.5] = [1.5, -2.5] -> [1.5, 0]; y = 1.5 + 0.25
        let y = net.forward(&Tensor::vector(vec![2.0, -0.5]).unwrap()).unwrap();
        assert_eq!(y.data(), &[1.75]);
    }

    #[test]
    fn dimension_errors() {
        let net = Mlp::<f64>::zeros(&[3, 2], Activation::Relu);
        assert!(matches!(net.forward(&Tensor::vector(vec![1.0, 2.0]).unwrap()), Err(Error::Dimension(_))));
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap();
        let g = Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap();
        assert!(net.backward(&x, &g).is_err());
        assert!(Mlp::from_params(&[2, 2], Activation::Relu, Params { weights: vec![vec![0.0; 3]], biases: vec![vec![0.0; 2]] }).is_err());
    }

    #[test]
    fn linear_adjoint() {
        // y = W x with W^T stored row-major as [in, out]
        let w = vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]; // in=3, out=2
        let net = single_linear(w.clone(), 3, 2);
        let x = Tensor::vector(vec![0.3, -0.7, 1.1]).unwrap();
        let g = Tensor::vector(vec![2.0, -1.0]).unwrap();
        let (_, dx) = net.backward(&x, &g).unwrap();
        let expected: Vec<f64> = (0..3).map(|i| w[i * 2] * 2.0 + w[i * 2 + 1] * -1.0).collect();
        assert_eq!(dx.data(), expected.as_slice());
    }

    #[test]
    fn zero_output_grad_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::<f64>::new(&[4, 8, 8, 3], Activation::Gelu, &mut rng);
        let x = Tensor::matrix(2, (0..8).map(|i| i as f64 * 0.1).collect()).unwrap();
        let g = Tensor::zeros(vec![2, 3]).unwrap();
        let (pg, dx) = net.backward(&x, &g).unwrap();
        assert!(pg.iter().all(|&v| v == 0.0));
        assert!(dx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_rows_match_single_rows_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = Mlp::<f64>::new(&[3, 16, 16, 2], Activation::Relu, &mut rng);
        let xs: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let batched = net.forward_rows(&xs, 5).unwrap();
        for r in 0..5 {
            let single = net.forward_rows(&xs[r * 3..(r + 1) * 3], 1).unwrap();
            assert_eq!(&batched[r * 2..(r + 1) * 2], single.as_slice());
        }
    }

    #[test]
    fn f32_network_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::<f32>::new(&[2, 4, 1], Activation::Tanh, &mut rng);
        let y = net.forward(&Tensor::vector(vec![0.5f32, -0.5]).unwrap()).unwrap();
        assert!(y.data()[0].is_finite());
    }
}
