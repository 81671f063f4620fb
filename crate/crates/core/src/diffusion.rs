//! Denoising diffusion over node features with a GCN noise predictor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Result};
use crate::nn::{standard_normal, ParamBuilder};
use crate::params::ParamSet;
use crate::tensor::{Activation, Tape, Tensor, Var};

/// Per-step noise strengths `alpha_l` and cumulative `prod (1 - alpha_j)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return contract_err("schedule needs at least one step");
        }
        if alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return contract_err("noise strengths must lie strictly inside (0, 1)");
        }
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= 1.0 - a;
                Some(*acc)
            })
            .collect();
        Ok(Self { alphas, alpha_bars })
    }

    /// Strengths interpolated linearly from `alpha_min` to `alpha_max`.
    pub fn linear(alpha_min: f64, alpha_max: f64, steps: usize) -> Result<Self> {
        if !(alpha_min > 0.0 && alpha_min <= alpha_max && alpha_max < 1.0) {
            return contract_err(format!(
                "need 0 < alpha_min <= alpha_max < 1, got {alpha_min}, {alpha_max}"
            ));
        }
        if steps == 0 {
            return contract_err("schedule needs at least one step");
        }
        let alphas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    alpha_min
                } else {
                    alpha_min + (alpha_max - alpha_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_alphas(alphas)
    }

    pub fn steps(&self) -> usize {
        self.alphas.len()
    }

    /// Strength of step `l`, 1-based.
    pub fn alpha(&self, l: usize) -> f64 {
        self.alphas[l - 1]
    }

    pub fn alpha_bar(&self, l: usize) -> f64 {
        self.alpha_bars[l - 1]
    }

    fn check_step(&self, l: usize) -> Result<()> {
        if l == 0 || l > self.steps() {
            return contract_err(format!("diffusion step {l} outside 1..={}", self.steps()));
        }
        Ok(())
    }
}

/// Closed-form draw of `x_l` given `x_0`.
pub fn forward_diffuse(x0: &Tensor, l: usize, sched: &NoiseSchedule, rng: &mut impl Rng) -> Result<Tensor> {
    sched.check_step(l)?;
    let ab = sched.alpha_bar(l);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let noise = standard_normal(rng, x0.shape());
    let data = x0.data().iter().zip(noise.data()).map(|(x, e)| a * x + b * e).collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// One transition `x_{l-1} -> x_l` of the forward chain.
pub fn forward_step(x: &Tensor, l: usize, sched: &NoiseSchedule, rng: &mut impl Rng) -> Result<Tensor> {
    sched.check_step(l)?;
    let al = sched.alpha(l);
    let (a, b) = ((1.0 - al).sqrt(), al.sqrt());
    let noise = standard_normal(rng, x.shape());
    let data = x.data().iter().zip(noise.data()).map(|(x, e)| a * x + b * e).collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Sinusoidal embedding: `sin(l / 10000^(2i/d))` at `2i`, `cos` at `2i+1`.
pub fn step_embedding(l: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return contract_err(format!("embedding width must be even and positive, got {dim}"));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let angle = l as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        out.push(angle.sin());
        out.push(angle.cos());
    }
    Ok(out)
}

fn embedding_rows(steps: &[usize], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(steps.len() * dim);
    for &l in steps {
        data.extend(step_embedding(l, dim)?);
    }
    Tensor::new(vec![steps.len(), dim], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserSpec {
    /// Flattened per-node feature width `tau * F`.
    pub feat_dim: usize,
    pub emb_dim: usize,
    pub hidden: usize,
}

impl DenoiserSpec {
    pub fn new(feat_dim: usize) -> Self {
        Self { feat_dim, emb_dim: 16, hidden: 32 }
    }
}

pub fn init_denoiser(spec: &DenoiserSpec, seed: u64) -> Result<ParamSet> {
    if spec.feat_dim == 0 || spec.hidden == 0 || !spec.emb_dim.is_multiple_of(2) {
        return contract_err("invalid denoiser widths");
    }
    let mut b = ParamBuilder::new(seed);
    b.dense("gcn1", spec.feat_dim + spec.emb_dim, spec.hidden).dense("gcn2", spec.hidden, spec.feat_dim);
    Ok(b.finish())
}

/// Reverse-process mean used by the sampler.
pub trait ReverseMean {
    fn mean(&self, tape: &mut Tape, x_l: Var, l: usize, a_hat: Var, sched: &NoiseSchedule) -> Result<Var>;
}

/// Two-layer GCN predicting the injected noise from `[x_l, embed(l)]`.
pub struct Denoiser<'a> {
    pub spec: &'a DenoiserSpec,
    pub vars: &'a [Var],
}

impl Denoiser<'_> {
    /// Noise estimate with one embedding row per input row.
    pub fn noise(&self, tape: &mut Tape, x_l: Var, emb: Var, a_hat: Var) -> Result<Var> {
        if tape.shape(x_l).get(1) != Some(&self.spec.feat_dim) {
            return dim_err(format!(
                "denoiser expects width {}, got {:?}",
                self.spec.feat_dim,
                tape.shape(x_l)
            ));
        }
        let h = tape.concat_cols(x_l, emb)?;
        let h = tape.matmul(h, self.vars[0])?;
        let h = tape.propagate(a_hat, h)?;
        let h = tape.add_bias(h, self.vars[1])?;
        let h = tape.activation(h, Activation::Relu)?;
        let h = tape.matmul(h, self.vars[2])?;
        let h = tape.propagate(a_hat, h)?;
        tape.add_bias(h, self.vars[3])
    }
}

/// `(x_l - alpha_l / sqrt(1 - abar_l) * eps) / sqrt(1 - alpha_l)`.
fn mean_from_noise(tape: &mut Tape, x_l: Var, eps: Var, l: usize, sched: &NoiseSchedule) -> Result<Var> {
    let al = sched.alpha(l);
    let coef = al / (1.0 - sched.alpha_bar(l)).sqrt();
    let scaled = tape.scale(eps, coef)?;
    let diff = tape.sub(x_l, scaled)?;
    tape.scale(diff, 1.0 / (1.0 - al).sqrt())
}

impl ReverseMean for Denoiser<'_> {
    fn mean(&self, tape: &mut Tape, x_l: Var, l: usize, a_hat: Var, sched: &NoiseSchedule) -> Result<Var> {
        let rows = tape.shape(x_l)[0];
        let emb = tape.constant(embedding_rows(&vec![l; rows], self.spec.emb_dim)?);
        let eps = self.noise(tape, x_l, emb, a_hat)?;
        mean_from_noise(tape, x_l, eps, l, sched)
    }
}

/// Returns its input as the mean.
pub struct IdentityMean;

impl ReverseMean for IdentityMean {
    fn mean(&self, _: &mut Tape, x_l: Var, _: usize, _: Var, _: &NoiseSchedule) -> Result<Var> {
        Ok(x_l)
    }
}

/// Mean implied by a noise predictor that always outputs zero.
pub struct ZeroNoise;

impl ReverseMean for ZeroNoise {
    fn mean(&self, tape: &mut Tape, x_l: Var, l: usize, _: Var, sched: &NoiseSchedule) -> Result<Var> {
        tape.scale(x_l, 1.0 / (1.0 - sched.alpha(l)).sqrt())
    }
}

/// One reverse step with fixed variance `alpha_l`; the last step adds no noise.
pub fn denoise_step(
    tape: &mut Tape,
    model: &impl ReverseMean,
    x_l: Var,
    l: usize,
    a_hat: Var,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Var> {
    sched.check_step(l)?;
    let mu = model.mean(tape, x_l, l, a_hat, sched)?;
    if tape.shape(mu) != tape.shape(x_l) {
        return dim_err("reverse mean changed the feature shape");
    }
    if l == 1 {
        return Ok(mu);
    }
    let z = standard_normal(rng, tape.shape(mu)).scaled(sched.alpha(l).sqrt());
    let z = tape.constant(z);
    tape.add(mu, z)
}

/// Partially noises `x` to depth `depth`, then runs the reverse chain back to 0.
/// Gradients reach the model through every reverse mean.
pub fn sample_environment(
    tape: &mut Tape,
    model: &impl ReverseMean,
    x: &Tensor,
    a_hat: Var,
    sched: &NoiseSchedule,
    depth: usize,
    rng: &mut impl Rng,
) -> Result<Var> {
    sched.check_step(depth)?;
    let start = forward_diffuse(x, depth, sched, rng)?;
    let mut cur = tape.constant(start);
    for l in (1..=depth).rev() {
        cur = denoise_step(tape, model, cur, l, a_hat, sched, rng)?;
    }
    Ok(cur)
}

/// Noise-prediction MSE. One step is drawn per block of `n_nodes` rows
/// (one graph snapshot).
pub fn denoising_loss(
    tape: &mut Tape,
    model: &Denoiser<'_>,
    x0: &Tensor,
    n_nodes: usize,
    a_hat: Var,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Var> {
    let (rows, d) = (x0.rows(), x0.cols());
    if rows == 0 || rows % n_nodes != 0 {
        return dim_err(format!("{rows} rows do not split into graphs of {n_nodes} nodes"));
    }
    let mut steps = Vec::with_capacity(rows);
    for _ in 0..rows / n_nodes {
        let l = rng.random_range(1..=sched.steps());
        steps.extend(std::iter::repeat_n(l, n_nodes));
    }
    let eps = standard_normal(rng, &[rows, d]);
    let mut noisy = Vec::with_capacity(rows * d);
    for r in 0..rows {
        let ab = sched.alpha_bar(steps[r]);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        for c in 0..d {
            noisy.push(a * x0.data()[r * d + c] + b * eps.data()[r * d + c]);
        }
    }
    let x_l = tape.constant(Tensor::new(vec![rows, d], noisy)?);
    let emb = tape.constant(embedding_rows(&steps, model.spec.emb_dim)?);
    let pred = model.noise(tape, x_l, emb, a_hat)?;
    let target = tape.constant(eps);
    tape.mse(pred, target)
}

/// `K` environment draws of the same input.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentBatch {
    pub samples: Vec<Tensor>,
    pub depth: usize,
}

/// Gradient-free environment sampling.
pub fn augment(
    spec: &DenoiserSpec,
    params: &ParamSet,
    x: &Tensor,
    a_hat: &Tensor,
    sched: &NoiseSchedule,
    depth: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<AugmentBatch> {
    if k == 0 {
        return contract_err("need at least one environment");
    }
    let mut samples = Vec::with_capacity(k);
    for _ in 0..k {
        let mut tape = Tape::new();
        let vars = params.load_frozen(&mut tape);
        let av = tape.constant(a_hat.clone());
        let model = Denoiser { spec, vars: &vars };
        let out = sample_environment(&mut tape, &model, x, av, sched, depth, rng)?;
        samples.push(tape.value(out).clone());
    }
    Ok(AugmentBatch { samples, depth })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_params;
    use crate::graph::{normalize_adjacency, Graph};
    use crate::optim::{AdamConfig, AdamState};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn moments(v: &[f64]) -> (f64, f64) {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
        (m, var)
    }

    #[test]
    fn schedule_products() {
        let s = NoiseSchedule::linear(0.5, 0.5, 1).unwrap();
        assert_eq!(s.alpha_bar(1), 0.5);
        let s = NoiseSchedule::from_alphas(vec![0.1, 0.2]).unwrap();
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
        let s = NoiseSchedule::linear(1e-4, 0.05, 100).unwrap();
        assert!(s.alpha_bar(100) < 0.1);
        assert!(NoiseSchedule::linear(0.2, 0.1, 10).is_err());
        assert!(NoiseSchedule::linear(0.0, 0.1, 10).is_err());
        assert!(NoiseSchedule::linear(0.1, 1.0, 10).is_err());
    }

    #[test]
    fn default_schedule_reaches_noise() {
        let s = NoiseSchedule::linear(1e-4, 0.1, 100).unwrap();
        assert!(s.alpha_bar(100) < 0.01);
        for l in 2..=100 {
            assert!(s.alpha_bar(l) < s.alpha_bar(l - 1));
        }
    }

    #[test]
    fn tiny_noise_leaves_input() {
        let s = NoiseSchedule::from_alphas(vec![1e-14]).unwrap();
        let x = Tensor::vector(vec![1.0, -2.0, 3.0]).unwrap();
        let y = forward_diffuse(&x, 1, &s, &mut rng(0)).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn marginal_variance_from_zero() {
        let s = NoiseSchedule::linear(1e-4, 0.1, 100).unwrap();
        let x = Tensor::zeros(&[10_000]);
        let y = forward_diffuse(&x, 10, &s, &mut rng(1)).unwrap();
        let (_, var) = moments(y.data());
        assert!((var / (1.0 - s.alpha_bar(10)) - 1.0).abs() < 0.05);
        assert!(forward_diffuse(&x, 0, &s, &mut rng(1)).is_err());
        assert!(forward_diffuse(&x, 101, &s, &mut rng(1)).is_err());
    }

    #[test]
    fn embedding_values() {
        let e = step_embedding(0, 6).unwrap();
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let e = step_embedding(1, 2).unwrap();
        assert!((e[0] - 0.8415).abs() < 1e-4 && (e[1] - 0.5403).abs() < 1e-4);
        assert!(step_embedding(3, 5).is_err());
        assert!(step_embedding(57, 16).unwrap().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn identity_mean_last_step_is_exact() {
        let s = NoiseSchedule::linear(1e-4, 0.1, 10).unwrap();
        let mut tape = Tape::new();
        let x = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let xv = tape.constant(x.clone());
        let a = tape.constant(Tensor::eye(2));
        let out = denoise_step(&mut tape, &IdentityMean, xv, 1, a, &s, &mut rng(0)).unwrap();
        assert_eq!(tape.value(out), &x);
    }

    fn sample_with(seed: u64, depth: usize, params: &ParamSet, spec: &DenoiserSpec, x: &Tensor) -> Tensor {
        let s = NoiseSchedule::linear(1e-4, 0.1, 100).unwrap();
        let a = Tensor::eye(x.rows());
        augment(spec, params, x, &a, &s, depth, 1, &mut rng(seed)).unwrap().samples.remove(0)
    }

    #[test]
    fn sampling_is_seeded() {
        let spec = DenoiserSpec::new(3);
        let p = init_denoiser(&spec, 0).unwrap();
        let x = Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, -0.1, 0.5, 1.0]).unwrap();
        let a = sample_with(4, 10, &p, &spec, &x);
        assert_eq!(a, sample_with(4, 10, &p, &spec, &x));
        assert_ne!(a, sample_with(5, 10, &p, &spec, &x));
        assert_eq!(a.shape(), x.shape());
    }

    #[test]
    fn deviation_grows_with_depth() {
        let s = NoiseSchedule::linear(1e-4, 0.1, 100).unwrap();
        let x = standard_normal(&mut rng(7), &[4, 3]);
        let mut r = rng(8);
        let mean_dev = |depth: usize, r: &mut ChaCha8Rng| {
            let mut total = 0.0;
            for _ in 0..100 {
                let mut tape = Tape::new();
                let a = tape.constant(Tensor::eye(4));
                let out = sample_environment(&mut tape, &ZeroNoise, &x, a, &s, depth, r).unwrap();
                let d = tape.value(out).data().iter().zip(x.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
                total += d.sqrt();
            }
            total / 100.0
        };
        let d5 = mean_dev(5, &mut r);
        let d25 = mean_dev(25, &mut r);
        let d50 = mean_dev(50, &mut r);
        assert!(d5 < d25 && d25 < d50, "{d5} {d25} {d50}");
    }

    #[test]
    fn reverse_mean_gradients() {
        let s = NoiseSchedule::linear(1e-4, 0.1, 20).unwrap();
        let spec = DenoiserSpec { feat_dim: 3, emb_dim: 4, hidden: 5 };
        let params = init_denoiser(&spec, 2).unwrap();
        let x = standard_normal(&mut rng(3), &[3, 3]);
        let a = normalize_adjacency(&Graph::path(3).unwrap());
        let err = grad_check_params(
            |tape, vars| {
                let model = Denoiser { spec: &spec, vars };
                let av = tape.constant(a.clone());
                let xv = tape.constant(x.clone());
                let mu = model.mean(tape, xv, 7, av, &s)?;
                let sq = tape.square(mu)?;
                tape.mean(sq)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn identity_adjacency_keeps_nodes_apart() {
        let spec = DenoiserSpec::new(2);
        let p = init_denoiser(&spec, 1).unwrap();
        let x = standard_normal(&mut rng(2), &[3, 2]);
        let mut bumped = x.clone();
        bumped.data_mut()[0] += 1.0;
        let a = sample_with(3, 8, &p, &spec, &x);
        let b = sample_with(3, 8, &p, &spec, &bumped);
        assert_eq!(&a.data()[2..], &b.data()[2..]);
        assert_ne!(a.data()[0], b.data()[0]);
    }

    #[test]
    fn denoising_training_reduces_loss() {
        let s = NoiseSchedule::linear(1e-4, 0.1, 100).unwrap();
        let spec = DenoiserSpec { feat_dim: 2, emb_dim: 16, hidden: 32 };
        let mut params = init_denoiser(&spec, 0).unwrap();
        let mut r = rng(11);
        // strongly correlated pairs are easy to denoise
        let base = standard_normal(&mut r, &[64, 1]);
        let data: Vec<f64> = base.data().iter().flat_map(|&v| [v, v]).collect();
        let x0 = Tensor::matrix(64, 2, data).unwrap();
        let mut adam = AdamState::new(AdamConfig::with_lr(1e-2), &params);
        let eval = |p: &ParamSet| {
            let mut r = rng(99);
            let mut tot = 0.0;
            for _ in 0..20 {
                let mut tape = Tape::new();
                let vars = p.load_frozen(&mut tape);
                let a = tape.constant(Tensor::eye(1));
                let m = Denoiser { spec: &spec, vars: &vars };
                let l = denoising_loss(&mut tape, &m, &x0, 1, a, &s, &mut r).unwrap();
                tot += tape.item(l);
            }
            tot / 20.0
        };
        let before = eval(&params);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let vars = params.load(&mut tape);
            let a = tape.constant(Tensor::eye(1));
            let m = Denoiser { spec: &spec, vars: &vars };
            let l = denoising_loss(&mut tape, &m, &x0, 1, a, &s, &mut r).unwrap();
            let g = params.grads_from(&vars, &tape.backward(l).unwrap()).unwrap();
            adam.step(&mut params, &g).unwrap();
        }
        let after = eval(&params);
        assert!(after < before / 2.0, "{before} -> {after}");
    }
}
