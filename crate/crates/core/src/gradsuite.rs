//! Seeded finite-difference sweep over every differentiable op and backbone.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{denoising_loss, init_denoiser, sample_environment, Denoiser, DenoiserSpec, NoiseSchedule};
use crate::error::Result;
use crate::gradcheck::grad_check_params;
use crate::graph::{adaptive_adjacency, gcn_layer, normalize_adjacency, AdaptiveParams, Graph};
use crate::mask::{generate_mask, init_mask, ratio_regularizer, MaskSpec};
use crate::nn::{dense, standard_normal};
use crate::params::ParamSet;
use crate::predictor::{forward, init_params, Backbone, PredictorSpec};
use crate::tensor::{Activation, Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradRow {
    pub name: String,
    pub instances: usize,
    pub max_error: f64,
}

impl GradRow {
    pub fn passed(&self) -> bool {
        self.max_error < TOLERANCE
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    standard_normal(rng, shape)
}

fn set(tensors: Vec<Tensor>) -> ParamSet {
    let mut p = ParamSet::new();
    for (i, t) in tensors.into_iter().enumerate() {
        p.push(format!("p{i}"), t);
    }
    p
}

/// Reduces any output to a scalar with a fixed random projection so that
/// every output entry contributes a distinct weight.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = tape.constant(randn(&mut rng, tape.shape(y)));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn check(params: &ParamSet, seed: u64, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<f64> {
    grad_check_params(
        |tape, v| {
            let y = f(tape, v)?;
            project(tape, y, seed)
        },
        params,
        STEP,
    )
}

type Case = fn(u64) -> Result<f64>;

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5))
}

fn unary(seed: u64, op: fn(&mut Tape, Var) -> Result<Var>) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, c, _) = dims(&mut rng);
    check(&set(vec![randn(&mut rng, &[r, c])]), seed, |t, v| op(t, v[0]))
}

fn binary(seed: u64, op: fn(&mut Tape, Var, Var) -> Result<Var>) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, c, _) = dims(&mut rng);
    let p = set(vec![randn(&mut rng, &[r, c]), randn(&mut rng, &[r, c])]);
    check(&p, seed, |t, v| op(t, v[0], v[1]))
}

fn ring_adj(n: usize) -> Result<Tensor> {
    Ok(normalize_adjacency(&Graph::ring(n)?))
}

const CASES: &[(&str, Case)] = &[
    ("matmul", |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (a, b, c) = dims(&mut rng);
        let p = set(vec![randn(&mut rng, &[a, b]), randn(&mut rng, &[b, c])]);
        check(&p, s, |t, v| t.matmul(v[0], v[1]))
    }),
    ("add", |s| binary(s, Tape::add)),
    ("sub", |s| binary(s, Tape::sub)),
    ("mul", |s| binary(s, Tape::mul)),
    ("scalar_broadcast", |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (r, c, _) = dims(&mut rng);
        let p = set(vec![randn(&mut rng, &[r, c]), randn(&mut rng, &[1, 1])]);
        check(&p, s, |t, v| {
            let a = t.mul(v[0], v[1])?;
            t.add(v[1], a)
        })
    }),
    ("scale", |s| unary(s, |t, x| t.scale(x, -1.7))),
    ("offset", |s| unary(s, |t, x| t.offset(x, 0.3))),
    ("add_bias", |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (r, c, _) = dims(&mut rng);
        let p = set(vec![randn(&mut rng, &[r, c]), randn(&mut rng, &[1, c])]);
        check(&p, s, |t, v| t.add_bias(v[0], v[1]))
    }),
    ("relu", |s| unary(s, Tape::relu)),
    ("sigmoid", |s| unary(s, Tape::sigmoid)),
    ("tanh", |s| unary(s, Tape::tanh)),
    ("square", |s| unary(s, Tape::square)),
    ("sum", |s| unary(s, Tape::sum)),
    ("mean", |s| unary(s, Tape::mean)),
    ("transpose", |s| unary(s, Tape::transpose)),
    ("reshape", |s| {
        unary(s, |t, x| {
            let n: usize = t.shape(x).iter().product();
            t.reshape(x, vec![n, 1])
        })
    }),
    ("mse", |s| binary(s, Tape::mse)),
    ("concat_cols", |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (r, a, b) = dims(&mut rng);
        let p = set(vec![randn(&mut rng, &[r, a]), randn(&mut rng, &[r, b])]);
        check(&p, s, |t, v| t.concat_cols(v[0], v[1]))
    }),
    ("gather", |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (r, c, _) = dims(&mut rng);
        let n = r * c;
        let index: Rc<[Option<usize>]> =
            (0..n + 3).map(|_| (rng.random::<f64>() < 0.8).then(|| rng.random_range(0..n))).collect();
        let p = set(vec![randn(&mut rng, &[r, c])]);
        check(&p, s, |t, v| t.gather(v[0], vec![n + 3, 1], index.clone()))
    }),
    ("propagate", |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (n, b, c) = dims(&mut rng);
        let p = set(vec![randn(&mut rng, &[n, n]), randn(&mut rng, &[n * b, c])]);
        check(&p, s, |t, v| t.propagate(v[0], v[1]))
    }),
    ("blend", |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (r, c, _) = dims(&mut rng);
        let m = Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random::<f64>()).collect())?;
        let p = set(vec![randn(&mut rng, &[r, c]), randn(&mut rng, &[r, c]), m]);
        check(&p, s, |t, v| t.blend(v[0], v[1], v[2]))
    }),
    ("dense", |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (r, a, b) = dims(&mut rng);
        let p = set(vec![randn(&mut rng, &[r, a]), randn(&mut rng, &[a, b]), randn(&mut rng, &[1, b])]);
        check(&p, s, |t, v| dense(t, v[0], v[1], v[2], Activation::Tanh))
    }),
    ("gcn_layer", |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (n, a, b) = dims(&mut rng);
        let adj = ring_adj(n)?;
        let p = set(vec![randn(&mut rng, &[2 * n, a]), randn(&mut rng, &[a, b])]);
        check(&p, s, |t, v| {
            let adj = t.constant(adj.clone());
            gcn_layer(t, v[0], adj, v[1], Activation::Sigmoid)
        })
    }),
    ("adaptive_adjacency", |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (n, f, d) = dims(&mut rng);
        let p = set(vec![
            randn(&mut rng, &[n, f]),
            randn(&mut rng, &[n, n]),
            randn(&mut rng, &[f, d]),
            randn(&mut rng, &[d, d]),
            randn(&mut rng, &[f, d]),
            randn(&mut rng, &[n, n]),
        ]);
        check(&p, s, |t, v| {
            let ap = AdaptiveParams { w1: v[1], w2: v[2], w3: v[3], w4: v[4], b: v[5] };
            adaptive_adjacency(t, v[0], &ap)
        })
    }),
    ("mask", |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (r, f, _) = dims(&mut rng);
        let spec = MaskSpec { feat_dim: f, hidden: 6 };
        let mut p = init_mask(&spec, s)?;
        p.push("x", randn(&mut rng, &[r, f]));
        check(&p, s, |t, v| generate_mask(&spec, t, &v[..4], v[4]))
    }),
    ("mask_regularizer", |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (r, c, _) = dims(&mut rng);
        let m = Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random::<f64>()).collect())?;
        check(&set(vec![m]), s, |t, v| ratio_regularizer(t, v[0], 0.5))
    }),
    ("denoiser", |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (n, f, _) = dims(&mut rng);
        let spec = DenoiserSpec { feat_dim: f, emb_dim: 4, hidden: 5 };
        let adj = ring_adj(n)?;
        let mut p = init_denoiser(&spec, s)?;
        p.push("x", randn(&mut rng, &[2 * n, f]));
        let k = p.len() - 1;
        check(&p, s, |t, v| {
            let adj = t.constant(adj.clone());
            let emb = t.constant(Tensor::full(&[2 * n, 4], 0.3));
            Denoiser { spec: &spec, vars: &v[..k] }.noise(t, v[k], emb, adj)
        })
    }),
    ("denoising_loss", |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (n, f, _) = dims(&mut rng);
        let spec = DenoiserSpec { feat_dim: f, emb_dim: 4, hidden: 5 };
        let adj = ring_adj(n)?;
        let sched = NoiseSchedule::linear(1e-4, 0.1, 10)?;
        let x0 = randn(&mut rng, &[2 * n, f]);
        let p = init_denoiser(&spec, s)?;
        check(&p, s, |t, v| {
            let adj = t.constant(adj.clone());
            let mut r = ChaCha8Rng::seed_from_u64(s);
            denoising_loss(t, &Denoiser { spec: &spec, vars: v }, &x0, n, adj, &sched, &mut r)
        })
    }),
    ("reverse_chain", |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (n, f, _) = dims(&mut rng);
        let spec = DenoiserSpec { feat_dim: f, emb_dim: 4, hidden: 5 };
        let adj = ring_adj(n)?;
        let sched = NoiseSchedule::linear(1e-4, 0.1, 12)?;
        let x0 = randn(&mut rng, &[n, f]);
        let p = init_denoiser(&spec, s)?;
        check(&p, s, |t, v| {
            let adj = t.constant(adj.clone());
            let mut r = ChaCha8Rng::seed_from_u64(s);
            sample_environment(t, &Denoiser { spec: &spec, vars: v }, &x0, adj, &sched, 3, &mut r)
        })
    }),
    ("backbone_linear", |s| backbone(s, Backbone::Linear, false)),
    ("backbone_mlp", |s| backbone(s, Backbone::Mlp, false)),
    ("backbone_stgcn_lite", |s| backbone(s, Backbone::StgcnLite, false)),
    ("backbone_stgcn_lite_adaptive", |s| backbone(s, Backbone::StgcnLite, true)),
];

fn backbone(seed: u64, kind: Backbone, adaptive: bool) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..5);
    let tau = rng.random_range(1..5);
    let f = rng.random_range(1..4);
    let hz = rng.random_range(1..4);
    let mut spec = PredictorSpec::new(kind, n, tau, f, hz);
    spec.hidden = 6;
    spec.gcn_hidden = 4;
    spec.adaptive = adaptive;
    spec.adaptive_dim = 3;
    let adj = ring_adj(n)?;
    let mut p = init_params(&spec, seed)?;
    p.push("x", randn(&mut rng, &[2 * n, tau * f]));
    let k = p.len() - 1;
    check(&p, seed, |t, v| {
        let adj = t.constant(adj.clone());
        forward(&spec, t, &v[..k], v[k], adj)
    })
}

pub fn case_names() -> Vec<&'static str> {
    CASES.iter().map(|c| c.0).collect()
}

/// Runs every case on `instances` seeds, starting at `seed`.
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<GradRow>> {
    CASES
        .iter()
        .map(|(name, case)| {
            let mut worst = 0.0f64;
            for i in 0..instances {
                worst = worst.max(case(seed.wrapping_add(i as u64))?);
            }
            Ok(GradRow { name: name.to_string(), instances, max_error: worst })
        })
        .collect()
}
