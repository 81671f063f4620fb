//! Forecasting backbones mapping node histories to future targets.
//!
//! Inputs are stacked windows: `[B*N, tau*F]` with rows ordered by
//! `(window, node)` and columns by `(lag, feature)`. Outputs are `[B*N, horizon]`.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Result};
use crate::graph::{adaptive_adjacency, AdaptiveParams};
use crate::nn::{dense, ParamBuilder};
use crate::params::ParamSet;
use crate::tensor::{Activation, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Linear,
    Mlp,
    StgcnLite,
}

impl std::str::FromStr for Backbone {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Backbone::Linear),
            "mlp" => Ok(Backbone::Mlp),
            "stgcn_lite" => Ok(Backbone::StgcnLite),
            other => Err(crate::Error::Config(format!("unknown backbone `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorSpec {
    pub backbone: Backbone,
    pub n_nodes: usize,
    pub tau: usize,
    pub n_features: usize,
    pub horizon: usize,
    /// Hidden width of the MLP backbone.
    pub hidden: usize,
    pub activation: Activation,
    /// Spatial width of the STGCN-lite backbone.
    pub gcn_hidden: usize,
    pub kernel: usize,
    /// Adds a learned adaptive adjacency to the normalized one (STGCN-lite only).
    pub adaptive: bool,
    pub adaptive_dim: usize,
}

impl PredictorSpec {
    pub fn new(backbone: Backbone, n_nodes: usize, tau: usize, n_features: usize, horizon: usize) -> Self {
        Self {
            backbone,
            n_nodes,
            tau,
            n_features,
            horizon,
            hidden: 32,
            activation: Activation::Relu,
            gcn_hidden: 16,
            kernel: 3,
            adaptive: false,
            adaptive_dim: 8,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.tau * self.n_features
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_nodes == 0 || self.tau == 0 || self.n_features == 0 || self.horizon == 0 {
            return contract_err("predictor extents must be positive");
        }
        if self.backbone == Backbone::Mlp && self.hidden == 0 {
            return contract_err("mlp hidden width must be positive");
        }
        if self.backbone == Backbone::StgcnLite && (self.gcn_hidden == 0 || self.kernel == 0) {
            return contract_err("stgcn_lite widths must be positive");
        }
        if self.adaptive && self.backbone != Backbone::StgcnLite {
            return contract_err("adaptive adjacency needs the stgcn_lite backbone");
        }
        Ok(())
    }
}

/// Seeded Glorot-uniform weights and zero biases.
pub fn init_params(spec: &PredictorSpec, seed: u64) -> Result<ParamSet> {
    spec.validate()?;
    let mut b = ParamBuilder::new(seed);
    let d = spec.input_dim();
    match spec.backbone {
        Backbone::Linear => {
            b.dense("head", d, spec.horizon);
        }
        Backbone::Mlp => {
            b.dense("hidden", d, spec.hidden).dense("head", spec.hidden, spec.horizon);
        }
        Backbone::StgcnLite => {
            let h = spec.gcn_hidden;
            b.dense("gcn", spec.n_features, h)
                .dense("gate_p", spec.kernel * h, h)
                .dense("gate_q", spec.kernel * h, h)
                .dense("head", spec.tau * h, spec.horizon);
            if spec.adaptive {
                let (n, e) = (spec.n_nodes, spec.adaptive_dim);
                b.weight("adaptive.embed", n, e)
                    .weight("adaptive.w1", n, n)
                    .weight("adaptive.w2", e, e)
                    .weight("adaptive.w3", e, e)
                    .weight("adaptive.w4", e, e)
                    .zeros("adaptive.b", &[n, n]);
            }
        }
    }
    Ok(b.finish())
}

/// Records the forward pass. `vars` follow the order of [`init_params`].
pub fn forward(spec: &PredictorSpec, tape: &mut Tape, vars: &[Var], x: Var, a_hat: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != spec.input_dim() || !shape[0].is_multiple_of(spec.n_nodes) {
        return dim_err(format!(
            "predictor expects [B*{}, {}] input, got {shape:?}",
            spec.n_nodes,
            spec.input_dim()
        ));
    }
    match spec.backbone {
        Backbone::Linear => dense(tape, x, vars[0], vars[1], Activation::Identity),
        Backbone::Mlp => {
            let h = dense(tape, x, vars[0], vars[1], spec.activation)?;
            dense(tape, h, vars[2], vars[3], Activation::Identity)
        }
        Backbone::StgcnLite => stgcn_forward(spec, tape, vars, x, a_hat, shape[0] / spec.n_nodes),
    }
}

fn stgcn_forward(
    spec: &PredictorSpec,
    tape: &mut Tape,
    vars: &[Var],
    x: Var,
    a_hat: Var,
    batch: usize,
) -> Result<Var> {
    let (n, tau, f, h, k) = (spec.n_nodes, spec.tau, spec.n_features, spec.gcn_hidden, spec.kernel);
    let rows = batch * tau * n;

    let adj = if spec.adaptive {
        let p = AdaptiveParams { w1: vars[9], w2: vars[10], w3: vars[11], w4: vars[12], b: vars[13] };
        let learned = adaptive_adjacency(tape, vars[8], &p)?;
        let learned = tape.scale(learned, 1.0 / n as f64)?;
        tape.add(a_hat, learned)?
    } else {
        a_hat
    };

    // (window, node) x (lag, feature)  ->  (window, lag, node) x feature
    let idx: Rc<[Option<usize>]> = (0..rows * f)
        .map(|o| {
            let (r, c) = (o / f, o % f);
            let (bt, node) = (r / n, r % n);
            let (b, t) = (bt / tau, bt % tau);
            Some((b * n + node) * tau * f + t * f + c)
        })
        .collect();
    let per_step = tape.gather(x, vec![rows, f], idx)?;

    let z = tape.matmul(per_step, vars[0])?;
    let z = tape.propagate(adj, z)?;
    let z = tape.add_bias(z, vars[1])?;
    let spatial = tape.relu(z)?;

    // causal receptive field: column block j holds the state j steps back
    let idx: Rc<[Option<usize>]> = (0..rows * k * h)
        .map(|o| {
            let (r, c) = (o / (k * h), o % (k * h));
            let (j, ch) = (c / h, c % h);
            let (bt, node) = (r / n, r % n);
            let (b, t) = (bt / tau, bt % tau);
            (t >= j).then(|| ((b * tau + t - j) * n + node) * h + ch)
        })
        .collect();
    let window = tape.gather(spatial, vec![rows, k * h], idx)?;
    let p = dense(tape, window, vars[2], vars[3], Activation::Identity)?;
    let q = dense(tape, window, vars[4], vars[5], Activation::Sigmoid)?;
    let gated = tape.mul(p, q)?;

    // back to (window, node) x (lag, channel)
    let idx: Rc<[Option<usize>]> = (0..batch * n * tau * h)
        .map(|o| {
            let (r, c) = (o / (tau * h), o % (tau * h));
            let (b, node) = (r / n, r % n);
            let (t, ch) = (c / h, c % h);
            Some(((b * tau + t) * n + node) * h + ch)
        })
        .collect();
    let flat = tape.gather(gated, vec![batch * n, tau * h], idx)?;
    dense(tape, flat, vars[6], vars[7], Activation::Identity)
}

/// Gradient-free prediction.
pub fn predict(spec: &PredictorSpec, params: &ParamSet, x: &Tensor, a_hat: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.load_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let av = tape.constant(a_hat.clone());
    let out = forward(spec, &mut tape, &vars, xv, av)?;
    Ok(tape.value(out).clone())
}
