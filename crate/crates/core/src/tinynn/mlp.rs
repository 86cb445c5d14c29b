use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{gemm, Tensor};
use crate::error::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Relu => 1,
            Activation::Identity => 0,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

/// Layer-by-layer architecture description.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layers: Vec<LayerSpec>,
}

impl MlpSpec {
    /// Starts an empty chain fed by `input` channels.
    pub fn chain(input: usize) -> MlpBuilder {
        MlpBuilder { width: input, layers: Vec::new() }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.layers.is_empty() {
            return Err(NnError::shape("at least one layer", 0));
        }
        for (i, w) in self.layers.windows(2).enumerate() {
            if w[0].output != w[1].input {
                return Err(NnError::BrokenChain { layer: i + 1, out_prev: w[0].output, in_next: w[1].input });
            }
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.output * (l.input + 1)).sum()
    }
}

pub struct MlpBuilder {
    width: usize,
    layers: Vec<LayerSpec>,
}

impl MlpBuilder {
    pub fn layer(mut self, output: usize, activation: Activation) -> Self {
        self.layers.push(LayerSpec { input: self.width, output, activation });
        self.width = output;
        self
    }

    pub fn repeat(mut self, count: usize, output: usize, activation: Activation) -> Self {
        for _ in 0..count {
            self = self.layer(output, activation);
        }
        self
    }

    pub fn build(self) -> MlpSpec {
        MlpSpec { layers: self.layers }
    }
}

/// Fully connected layer `y = act(x Wᵀ + b)`; `weight` is `output x input`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub spec: LayerSpec,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(spec: LayerSpec) -> Self {
        Self { spec, weight: vec![0.0; spec.input * spec.output], bias: vec![0.0; spec.output] }
    }

    /// Uniform fan-in initialization in `±sqrt(1 / input)`.
    pub fn init(spec: LayerSpec, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / spec.input as f64).sqrt();
        let mut layer = Self::zeros(spec);
        for w in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
            *w = rng.random_range(-bound..bound);
        }
        layer
    }
}

/// Multilayer perceptron parameters. The same type doubles as a gradient
/// accumulator (see [`Mlp::zeros_like`]).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Values saved by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Tensor>,
    pre_activations: Vec<Tensor>,
}

impl Mlp {
    pub fn init(spec: &MlpSpec, rng: &mut impl Rng) -> Result<Self, NnError> {
        spec.validate()?;
        Ok(Self { layers: spec.layers.iter().map(|l| Linear::init(*l, rng)).collect() })
    }

    pub fn zeros(spec: &MlpSpec) -> Result<Self, NnError> {
        spec.validate()?;
        Ok(Self { layers: spec.layers.iter().map(|l| Linear::zeros(*l)).collect() })
    }

    pub fn zeros_like(&self) -> Self {
        Self { layers: self.layers.iter().map(|l| Linear::zeros(l.spec)).collect() }
    }

    pub fn spec(&self) -> MlpSpec {
        MlpSpec { layers: self.layers.iter().map(|l| l.spec).collect() }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.input
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().spec.output
    }

    fn check_input(&self, x: &Tensor) -> Result<(), NnError> {
        if x.cols() != self.input_dim() {
            return Err(NnError::shape(format!("{} input channels", self.input_dim()), format!("{:?}", x.shape())));
        }
        Ok(())
    }

    /// Forward pass over a batch of rows, keeping what backward needs.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, MlpCache), NnError> {
        self.check_input(x)?;
        let mut cache = MlpCache { inputs: Vec::with_capacity(self.layers.len()), pre_activations: Vec::with_capacity(self.layers.len()) };
        let mut h = x.clone();
        for layer in &self.layers {
            let pre = affine(layer, &h);
            let out = activate(layer.spec.activation, &pre);
            cache.inputs.push(std::mem::replace(&mut h, out));
            cache.pre_activations.push(pre);
        }
        Ok((h, cache))
    }

    /// Forward pass without a cache.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor, NnError> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            let mut pre = affine(layer, &h);
            if layer.spec.activation == Activation::Relu {
                pre.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = pre;
        }
        Ok(h)
    }

    /// Reverse pass. Parameter gradients are *added* to `grads`; the
    /// gradient with respect to the input batch is returned.
    pub fn backward(&self, cache: &MlpCache, grad_out: &Tensor, grads: &mut Mlp) -> Result<Tensor, NnError> {
        let last = cache.pre_activations.last().ok_or_else(|| NnError::shape("forward cache", "empty cache"))?;
        if grad_out.shape() != last.shape() {
            return Err(NnError::shape(format!("{:?}", last.shape()), format!("{:?}", grad_out.shape())));
        }
        if grads.layers.len() != self.layers.len() {
            return Err(NnError::shape(self.layers.len(), grads.layers.len()));
        }
        let mut g = grad_out.clone();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let pre = &cache.pre_activations[idx];
            if layer.spec.activation == Activation::Relu {
                for (gv, p) in g.data_mut().iter_mut().zip(pre.data()) {
                    if *p <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            let input = &cache.inputs[idx];
            let (rows, n_in, n_out) = (input.rows(), layer.spec.input, layer.spec.output);
            let grad_layer = &mut grads.layers[idx];
            // dW += dYᵀ X
            gemm(n_out, rows, n_in, g.data(), true, input.data(), false, 1.0, &mut grad_layer.weight);
            for r in 0..rows {
                for (b, gv) in grad_layer.bias.iter_mut().zip(g.row_slice(r)) {
                    *b += gv;
                }
            }
            // dX = dY W
            let mut gin = Tensor::zeros(vec![rows, n_in]);
            gemm(rows, n_out, n_in, g.data(), false, &layer.weight, false, 0.0, gin.data_mut());
            g = gin;
        }
        Ok(g)
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()]).collect()
    }

    pub fn fill(&mut self, value: f64) {
        for p in self.params_mut() {
            p.fill(value);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for p in self.params_mut() {
            p.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn add_assign(&mut self, other: &Mlp) {
        for (a, b) in self.params_mut().into_iter().zip(other.params()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }
}

fn affine(layer: &Linear, x: &Tensor) -> Tensor {
    let rows = x.rows();
    let mut y = layer.bias.iter().copied().cycle().take(rows * layer.spec.output).collect::<Vec<_>>();
    gemm(rows, layer.spec.input, layer.spec.output, x.data(), false, &layer.weight, true, 1.0, &mut y);
    Tensor::matrix(rows, layer.spec.output, y).expect("affine output shape")
}

fn activate(act: Activation, pre: &Tensor) -> Tensor {
    match act {
        Activation::Identity => pre.clone(),
        Activation::Relu => {
            let mut out = pre.clone();
            out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinynn::loss::sum_squared_error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    /// Straightforward triple-loop evaluation, independent of gemm.
    fn naive_forward(mlp: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for l in &mlp.layers {
            let mut out = vec![0.0; l.spec.output];
            for (o, out_v) in out.iter_mut().enumerate() {
                let mut s = l.bias[o];
                for (i, hv) in h.iter().enumerate() {
                    s += l.weight[o * l.spec.input + i] * hv;
                }
                *out_v = if l.spec.activation == Activation::Relu { s.max(0.0) } else { s };
            }
            h = out;
        }
        h
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let spec = MlpSpec::chain(3).layer(5, Activation::Relu).layer(2, Activation::Identity).build();
        let mlp = Mlp::zeros(&spec).unwrap();
        let out = mlp.predict(&Tensor::row(vec![1.0, -2.0, 3.0])).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input() {
        let spec = MlpSpec::chain(2).layer(2, Activation::Identity).build();
        let mut mlp = Mlp::zeros(&spec).unwrap();
        mlp.layers[0].weight = vec![1.0, 0.0, 0.0, 1.0];
        let x = Tensor::row(vec![0.25, -7.0]);
        assert_eq!(mlp.predict(&x).unwrap(), x);
    }

    #[test]
    fn broken_chain_is_rejected() {
        let mut spec = MlpSpec::chain(2).layer(4, Activation::Relu).layer(3, Activation::Identity).build();
        spec.layers[1].input = 5;
        assert!(matches!(Mlp::zeros(&spec), Err(NnError::BrokenChain { layer: 1, .. })));
        let mlp = Mlp::zeros(&MlpSpec::chain(2).layer(2, Activation::Relu).build()).unwrap();
        assert!(mlp.forward(&Tensor::row(vec![1.0, 2.0, 3.0])).is_err());
    }

    #[test]
    fn wide_stack_matches_naive_evaluation() {
        let spec = MlpSpec::chain(8)
            .layer(1024, Activation::Relu)
            .repeat(2, 1024, Activation::Relu)
            .layer(1024, Activation::Identity)
            .build();
        let mut r = rng();
        let mlp = Mlp::init(&spec, &mut r).unwrap();
        let rows: Vec<Vec<f64>> = (0..3).map(|_| (0..8).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let (out, _) = mlp.forward(&x).unwrap();
        for (i, row) in rows.iter().enumerate() {
            let expect = naive_forward(&mlp, row);
            for (a, b) in out.row_slice(i).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
        assert_eq!(out, mlp.predict(&x).unwrap());
        // bit-identical reruns
        assert_eq!(out, mlp.forward(&x).unwrap().0);
    }

    fn mse_loss(mlp: &Mlp, x: &Tensor, target: &[f64]) -> f64 {
        sum_squared_error(mlp.predict(x).unwrap().data(), target).0
    }

    fn max_rel_error_of_check(mlp: &Mlp, x: &Tensor, target: &[f64]) -> f64 {
        let (out, cache) = mlp.forward(x).unwrap();
        let (_, g) = sum_squared_error(out.data(), target);
        let mut grads = mlp.zeros_like();
        let gin = mlp.backward(&cache, &Tensor::new(out.shape().to_vec(), g).unwrap(), &mut grads).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut probe = mlp.clone();
        let analytic: Vec<Vec<f64>> = grads.params().iter().map(|p| p.to_vec()).collect();
        for (pi, a) in analytic.iter().enumerate() {
            for k in 0..a.len() {
                let orig = probe.params()[pi][k];
                probe.params_mut()[pi][k] = orig + h;
                let fp = mse_loss(&probe, x, target);
                probe.params_mut()[pi][k] = orig - h;
                let fm = mse_loss(&probe, x, target);
                probe.params_mut()[pi][k] = orig;
                let fd = (fp - fm) / (2.0 * h);
                worst = worst.max((fd - a[k]).abs() / fd.abs().max(a[k].abs()).max(1e-6));
            }
        }
        // input gradient
        for k in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[k] += h;
            let mut xm = x.clone();
            xm.data_mut()[k] -= h;
            let fd = (mse_loss(mlp, &xp, target) - mse_loss(mlp, &xm, target)) / (2.0 * h);
            let a = gin.data()[k];
            worst = worst.max((fd - a).abs() / fd.abs().max(a.abs()).max(1e-6));
        }
        worst
    }

    #[test]
    fn linear_layer_gradient_matches_finite_differences() {
        let mut r = rng();
        let spec = MlpSpec::chain(4).layer(3, Activation::Identity).build();
        let mlp = Mlp::init(&spec, &mut r).unwrap();
        let x = Tensor::matrix(2, 4, (0..8).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let target: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
        assert!(max_rel_error_of_check(&mlp, &x, &target) < 1e-6);
    }

    #[test]
    fn three_layer_gradient_matches_finite_differences() {
        let mut r = rng();
        let spec = MlpSpec::chain(5).layer(7, Activation::Relu).layer(6, Activation::Relu).layer(2, Activation::Identity).build();
        for _ in 0..5 {
            let mlp = Mlp::init(&spec, &mut r).unwrap();
            let x = Tensor::matrix(3, 5, (0..15).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
            let target: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
            assert!(max_rel_error_of_check(&mlp, &x, &target) < 1e-4);
        }
    }

    #[test]
    fn relu_with_positive_preactivation_passes_gradient() {
        let spec = MlpSpec::chain(2).layer(2, Activation::Relu).build();
        let mut mlp = Mlp::zeros(&spec).unwrap();
        mlp.layers[0].weight = vec![1.0, 0.0, 0.0, 1.0];
        let (_, cache) = mlp.forward(&Tensor::row(vec![0.5, 2.0])).unwrap();
        let mut grads = mlp.zeros_like();
        let gin = mlp.backward(&cache, &Tensor::row(vec![0.3, -1.2]), &mut grads).unwrap();
        assert_eq!(gin.data(), &[0.3, -1.2]);
    }
}
