//! Small building blocks shared by the networks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::Result;
use crate::params::ParamSet;
use crate::tensor::{Activation, Tape, Tensor, Var};

/// Uniform Glorot bound `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn glorot_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let s = glorot_bound(fan_in, fan_out);
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-s..=s)).collect();
    Tensor::from_raw(vec![fan_in, fan_out], data)
}

/// Builds a parameter set layer by layer from one seeded stream.
pub struct ParamBuilder {
    rng: ChaCha8Rng,
    params: ParamSet,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), params: ParamSet::new() }
    }

    pub fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> &mut Self {
        let w = glorot_uniform(&mut self.rng, fan_in, fan_out);
        self.params.push(name, w);
        self
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> &mut Self {
        self.params.push(name, Tensor::zeros(shape));
        self
    }

    /// Weight `fan_in x fan_out` followed by a zero bias `1 x fan_out`.
    pub fn dense(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> &mut Self {
        self.weight(&format!("{prefix}.w"), fan_in, fan_out);
        self.zeros(&format!("{prefix}.b"), &[1, fan_out])
    }

    pub fn finish(&mut self) -> ParamSet {
        std::mem::take(&mut self.params)
    }
}

/// `act(x W + b)`.
pub fn dense(tape: &mut Tape, x: Var, w: Var, b: Var, act: Activation) -> Result<Var> {
    let z = tape.matmul(x, w)?;
    let z = tape.add_bias(z, b)?;
    tape.activation(z, act)
}

/// Draws a standard normal tensor of the given shape.
pub fn standard_normal(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
    Tensor::from_raw(shape.to_vec(), data)
}
