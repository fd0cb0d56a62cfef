//! Parameter plumbing and the dense layers shared by encoders and heads.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;

/// Anything holding trainable tensors in a fixed order.
pub trait Parameters {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.data().len()).sum()
    }
}

/// Copies parameters onto the tape as trainable leaves.
pub fn bind(tape: &mut Tape, module: &impl Parameters) -> Vec<Var> {
    module.params().into_iter().map(|p| tape.leaf(p.clone())).collect()
}

/// Copies parameters onto the tape as constants (inference).
pub fn bind_frozen(tape: &mut Tape, module: &impl Parameters) -> Vec<Var> {
    module.params().into_iter().map(|p| tape.constant(p.clone())).collect()
}

/// Gradients of bound parameters, in parameter order.
pub fn grads<'a>(tape: &'a Tape, vars: &[Var]) -> Vec<Option<&'a Tensor>> {
    vars.iter().map(|&v| tape.grad(v)).collect()
}

/// Uniform Glorot initialization over `[-a, a]`, `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-a..=a))
        .collect();
    Tensor::from_vec(fan_in, fan_out, data).expect("sized buffer")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            weight: glorot(d_in, d_out, rng),
            bias: Tensor::zeros(1, d_out),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }

    /// `vars` must be `[weight, bias]` as bound from this layer.
    pub fn forward(tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let z = tape.matmul(x, vars[0])?;
        tape.add_bias(z, vars[1])
    }

    /// Tape-free forward for inference.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut z = x.matmul(&self.weight)?;
        let b = self.bias.data();
        for i in 0..z.rows() {
            for (o, bv) in z.row_mut(i).iter_mut().zip(b) {
                *o += bv;
            }
        }
        Ok(z)
    }
}

impl Parameters for Linear {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Stack of linear layers with relu and dropout between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub dropout_p: f32,
}

impl Mlp {
    /// `dims = [d_in, hidden..., d_out]`.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], dropout_p: f32, rng: &mut R) -> Self {
        let layers = dims.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect();
        Self { layers, dropout_p }
    }

    pub fn d_in(&self) -> usize {
        self.layers.first().map_or(0, Linear::d_in)
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().map_or(0, Linear::d_out)
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        mut x: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, pair) in vars.chunks(2).enumerate() {
            x = Linear::forward(tape, pair, x)?;
            if i < last {
                x = tape.relu(x);
                x = tape.dropout(x, self.dropout_p, training, rng)?;
            }
        }
        Ok(x)
    }

    /// Tape-free inference forward.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let last = self.layers.len() - 1;
        let mut h = self.layers[0].apply(x)?;
        for (i, layer) in self.layers.iter().enumerate().skip(1) {
            relu_inplace(&mut h);
            h = layer.apply(&h)?;
            debug_assert!(i <= last);
        }
        Ok(h)
    }
}

impl Parameters for Mlp {
    fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Linear::params).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Linear::params_mut).collect()
    }
}

pub(crate) fn relu_inplace(t: &mut Tensor) {
    for v in t.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}
