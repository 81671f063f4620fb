//! The alternating training loop, evaluation and checkpoints.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{dispatch, ActiveLosses, Augmentor, Baseline, MaskMode, PenaltyMode, TrainConfig};
use crate::data::{temporal_split, SplitSpec, StDataset, Standardizer, WindowSet};
use crate::diffusion::{denoising_loss, init_denoiser, sample_environment, Denoiser, DenoiserSpec, NoiseSchedule};
use crate::error::{contract_err, dim_err, Error, Result};
use crate::graph::normalize_adjacency;
use crate::mask::{combine, generate_mask, init_mask, ratio_regularizer, MaskReport, MaskSpec};
use crate::nn::{dense, standard_normal, ParamBuilder};
use crate::objectives::{
    mean_risk, metrics, penalty_exact, penalty_firstorder, penalty_irm, rex_objective, total_loss,
    EnvPredictorBank, LossReport, Metrics,
};
use crate::optim::{AdamConfig, AdamState};
use crate::params::ParamSet;
use crate::predictor::{forward, init_params, predict, PredictorSpec};
use crate::tensor::{Activation, Tape, Tensor, Var};

/// Standardized training material plus what is needed to undo it.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: WindowSet,
    pub val: Option<WindowSet>,
    pub a_hat: Tensor,
    /// Environment index of each training window (used by the baselines).
    pub env_labels: Vec<usize>,
    pub n_envs: usize,
    pub feature_names: Vec<String>,
    pub standardizer: Standardizer,
    /// Dataset channels fed to the predictor, in order.
    pub channels: Vec<usize>,
}

impl TrainData {
    /// Unstandardized data with a single environment.
    pub fn new(train: WindowSet, val: Option<WindowSet>, a_hat: Tensor, feature_names: Vec<String>) -> Self {
        let n = train.len();
        let f = train.n_features;
        Self {
            train,
            val,
            a_hat,
            env_labels: vec![0; n],
            n_envs: 1,
            feature_names,
            standardizer: Standardizer::identity(f),
            channels: (0..f).collect(),
        }
    }

    /// Splits the training windows into `n` contiguous, near-equal segments.
    pub fn with_segments(mut self, n: usize) -> Result<Self> {
        let len = self.train.len();
        if n == 0 || n > len {
            return contract_err(format!("cannot cut {len} windows into {n} segments"));
        }
        self.env_labels = (0..len).map(|i| i * n / len).collect();
        self.n_envs = n;
        Ok(self)
    }

    pub fn with_env_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.train.len() {
            return dim_err(format!("{} labels for {} windows", labels.len(), self.train.len()));
        }
        self.n_envs = labels.iter().max().map_or(0, |m| m + 1);
        self.env_labels = labels;
        Ok(self)
    }
}

/// Data ready for training plus the held-out test windows.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub data: TrainData,
    pub test: WindowSet,
}

/// Splits, selects channels and standardizes with training statistics.
pub fn prepare(ds: &StDataset, split: &SplitSpec, cfg: &TrainConfig) -> Result<Prepared> {
    if ds.tau != cfg.tau || ds.horizon != cfg.horizon {
        return Err(Error::Config(format!(
            "dataset windows {}/{} differ from configured tau/horizon {}/{}",
            ds.tau, ds.horizon, cfg.tau, cfg.horizon
        )));
    }
    let splits = temporal_split(ds, split)?;
    let channels: Vec<usize> = if dispatch(cfg).target_only {
        vec![ds.target_channel]
    } else {
        (0..ds.n_features()).collect()
    };
    let pick = |w: &WindowSet| w.select_channels(&channels);
    let (train, val, test) = (pick(&splits.train)?, pick(&splits.val)?, pick(&splits.test)?);
    let standardizer = if cfg.standardize { Standardizer::fit(&train) } else { Standardizer::identity(channels.len()) };
    let names = channels.iter().map(|&c| ds.feature_names[c].clone()).collect();
    let data = TrainData {
        train: standardizer.apply(&train),
        val: Some(standardizer.apply(&val)),
        a_hat: normalize_adjacency(&ds.graph),
        env_labels: Vec::new(),
        n_envs: 0,
        feature_names: names,
        standardizer: standardizer.clone(),
        channels,
    };
    let data = data.with_segments(cfg.baseline_envs.max(1))?;
    Ok(Prepared { data, test: standardizer.apply(&test) })
}

/// Uniform sampling without replacement within each pass over the windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sampler {
    pub perm: Vec<usize>,
    pub cursor: usize,
}

impl Sampler {
    pub fn next(&mut self, n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let size = size.min(n);
        if self.perm.len() != n || self.cursor + size > n {
            self.perm = (0..n).collect();
            self.perm.shuffle(rng);
            self.cursor = 0;
        }
        let out = self.perm[self.cursor..self.cursor + size].to_vec();
        self.cursor += size;
        out
    }
}

/// Evaluation summary attached to history entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub report: LossReport,
    pub val: Option<Metrics>,
    /// Whether the augmentor step raised the augmentation loss at fixed
    /// predictor and mask (same random draws before and after).
    pub ascent: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub iteration: usize,
    pub val_mae: f64,
    pub theta: ParamSet,
    pub phi: Option<ParamSet>,
}

/// Complete training state; reloading it continues the run bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub config_hash: String,
    pub iteration: usize,
    pub predictor: PredictorSpec,
    pub theta: ParamSet,
    pub phi: Option<ParamSet>,
    pub psi: Option<ParamSet>,
    pub eta: Option<ParamSet>,
    pub opt_theta: AdamState,
    pub opt_phi: Option<AdamState>,
    pub opt_psi: Option<AdamState>,
    pub opt_eta: Option<AdamState>,
    pub bank: Option<EnvPredictorBank>,
    pub batch_rng: ChaCha8Rng,
    pub aug_rng: ChaCha8Rng,
    pub sampler: Sampler,
    pub standardizer: Standardizer,
    pub channels: Vec<usize>,
    pub feature_names: Vec<String>,
    pub best: Option<Snapshot>,
    pub history: Vec<HistoryEntry>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if ck.config.hash() != ck.config_hash {
            return Err(Error::Config(format!("{} has a config hash mismatch", path.display())));
        }
        Ok(ck)
    }

    /// The same state with the best-validation parameters swapped in.
    pub fn best_params(&self) -> Checkpoint {
        let mut out = self.clone();
        if let Some(b) = &self.best {
            out.theta = b.theta.clone();
            if b.phi.is_some() {
                out.phi = b.phi.clone();
            }
        }
        out
    }

    pub fn mask_spec(&self) -> MaskSpec {
        MaskSpec { feat_dim: self.predictor.input_dim(), hidden: self.config.mask_hidden }
    }

    pub fn denoiser_spec(&self) -> DenoiserSpec {
        DenoiserSpec {
            feat_dim: self.predictor.input_dim(),
            emb_dim: self.config.emb_dim,
            hidden: self.config.denoiser_hidden,
        }
    }
}

pub fn predictor_spec(cfg: &TrainConfig, n_nodes: usize, tau: usize, n_features: usize, horizon: usize) -> PredictorSpec {
    let mut spec = PredictorSpec::new(cfg.backbone, n_nodes, tau, n_features, horizon);
    spec.hidden = cfg.mlp_hidden;
    spec.gcn_hidden = cfg.gcn_hidden;
    spec.adaptive = cfg.adaptive_adjacency;
    spec
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Mean-squared risk of a predictor on fixed inputs, with its gradient.
pub fn env_risk<'a>(
    spec: &'a PredictorSpec,
    a_hat: &'a Tensor,
    x: &'a Tensor,
    y: &'a Tensor,
) -> impl Fn(&ParamSet) -> Result<(f64, ParamSet)> + 'a {
    move |theta: &ParamSet| {
        let mut tape = Tape::new();
        let vars = theta.load(&mut tape);
        let xv = tape.constant(x.clone());
        let av = tape.constant(a_hat.clone());
        let yv = tape.constant(y.clone());
        let pred = forward(spec, &mut tape, &vars, xv, av)?;
        let loss = tape.mse(pred, yv)?;
        let g = theta.grads_from(&vars, &tape.backward(loss)?)?;
        Ok((tape.item(loss), g))
    }
}

fn init_perturbation(feat_dim: usize, hidden: usize, seed: u64) -> ParamSet {
    let mut b = ParamBuilder::new(seed);
    b.dense("perturb.hidden", 2 * feat_dim, hidden).dense("perturb.out", hidden, feat_dim);
    b.finish()
}

/// `x + tanh(MLP([x, z]))` with fresh standard normal `z`.
fn perturb(tape: &mut Tape, vars: &[Var], x: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let z = tape.constant(standard_normal(rng, tape.shape(x)));
    let h = tape.concat_cols(x, z)?;
    let h = dense(tape, h, vars[0], vars[1], Activation::Relu)?;
    let d = dense(tape, h, vars[2], vars[3], Activation::Tanh)?;
    tape.add(x, d)
}

fn clip(g: &mut ParamSet, max_norm: f64) {
    if max_norm > 0.0 {
        g.clip_global_norm(max_norm);
    }
}

fn as_divergence(iteration: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Divergence { iteration, report: format!("non-finite value in `{op}`") },
        other => other,
    }
}

/// Per-horizon, average and final-step metrics in original units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub per_horizon: Vec<Metrics>,
    pub average: Metrics,
    #[serde(rename = "final")]
    pub final_step: Metrics,
}

fn mean_metrics(ms: &[Metrics]) -> Metrics {
    let n = ms.len() as f64;
    let mapes: Vec<f64> = ms.iter().filter_map(|m| m.mape).collect();
    Metrics {
        mae: ms.iter().map(|m| m.mae).sum::<f64>() / n,
        rmse: ms.iter().map(|m| m.rmse).sum::<f64>() / n,
        mape: (!mapes.is_empty()).then(|| mapes.iter().sum::<f64>() / mapes.len() as f64),
    }
}

/// Predictions for every window, in batches, de-standardized.
pub fn predict_windows(
    spec: &PredictorSpec,
    theta: &ParamSet,
    windows: &WindowSet,
    a_hat: &Tensor,
    st: &Standardizer,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if windows.is_empty() {
        return contract_err("cannot evaluate an empty split");
    }
    let mut preds = Vec::with_capacity(windows.len() * windows.y_len());
    let mut targets = Vec::with_capacity(preds.capacity());
    let all: Vec<usize> = (0..windows.len()).collect();
    for chunk in all.chunks(256) {
        let (x, y) = windows.batch(chunk);
        let p = predict(spec, theta, &x, a_hat)?;
        preds.extend(p.data().iter().map(|&v| st.restore_y(v)));
        targets.extend(y.data().iter().map(|&v| st.restore_y(v)));
    }
    Ok((preds, targets))
}

pub fn evaluate(
    spec: &PredictorSpec,
    theta: &ParamSet,
    windows: &WindowSet,
    a_hat: &Tensor,
    st: &Standardizer,
) -> Result<EvalTable> {
    let (preds, targets) = predict_windows(spec, theta, windows, a_hat, st)?;
    let hz = windows.horizon;
    let per_horizon = (0..hz)
        .map(|h| {
            let p: Vec<f64> = preds.iter().skip(h).step_by(hz).copied().collect();
            let t: Vec<f64> = targets.iter().skip(h).step_by(hz).copied().collect();
            metrics(&p, &t)
        })
        .collect::<Result<Vec<_>>>()?;
    let average = mean_metrics(&per_horizon);
    let final_step = *per_horizon.last().expect("horizon is positive");
    Ok(EvalTable { per_horizon, average, final_step })
}

/// Drives the loop over a borrowed dataset.
pub struct Trainer<'a> {
    data: &'a TrainData,
    active: ActiveLosses,
    schedule: NoiseSchedule,
    pub state: Checkpoint,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: &'a TrainData) -> Result<Self> {
        cfg.validate()?;
        let w = &data.train;
        if w.is_empty() {
            return contract_err("no training windows");
        }
        if w.tau != cfg.tau || w.horizon != cfg.horizon {
            return Err(Error::Config(format!(
                "windows use tau/horizon {}/{}, config says {}/{}",
                w.tau, w.horizon, cfg.tau, cfg.horizon
            )));
        }
        if data.a_hat.shape() != [w.n_nodes, w.n_nodes] {
            return dim_err("adjacency does not match the node count");
        }
        let active = dispatch(&cfg);
        if matches!(active.baseline, Some(Baseline::Irmv1 | Baseline::Rex | Baseline::Invrat)) && data.n_envs < 2 {
            return contract_err(format!("{} needs at least two environments", cfg.method));
        }
        let spec = predictor_spec(&cfg, w.n_nodes, w.tau, w.n_features, w.horizon);
        let theta = init_params(&spec, cfg.seed)?;
        let d = spec.input_dim();
        let phi = (active.mask == MaskMode::Learned && active.augmentor != Augmentor::None)
            .then(|| init_mask(&MaskSpec { feat_dim: d, hidden: cfg.mask_hidden }, cfg.seed.wrapping_add(1)))
            .transpose()?;
        let psi = match active.augmentor {
            Augmentor::None => None,
            Augmentor::Diffusion => Some(init_denoiser(
                &DenoiserSpec { feat_dim: d, emb_dim: cfg.emb_dim, hidden: cfg.denoiser_hidden },
                cfg.seed.wrapping_add(2),
            )?),
            Augmentor::Perturbation => Some(init_perturbation(d, cfg.perturb_hidden, cfg.seed.wrapping_add(2))),
        };
        let eta = (active.baseline == Some(Baseline::Invrat)).then(|| {
            let mut p = ParamSet::new();
            p.push("invrat.scale", Tensor::ones(&[data.n_envs]));
            p.push("invrat.shift", Tensor::zeros(&[data.n_envs]));
            p
        });
        let adam = |lr: f64, p: &ParamSet| AdamState::new(AdamConfig::with_lr(lr), p);
        let bank = (active.augmentor != Augmentor::None && active.lambda > 0.0 && cfg.penalty == PenaltyMode::Exact)
            .then(|| EnvPredictorBank::new(&theta, cfg.k_envs, AdamConfig::with_lr(cfg.lr_theta)));
        let schedule = NoiseSchedule::linear(cfg.alpha_min, cfg.alpha_max, cfg.diffusion_steps)?;
        let state = Checkpoint {
            config_hash: cfg.hash(),
            iteration: 0,
            predictor: spec,
            opt_theta: adam(cfg.lr_theta, &theta),
            opt_phi: phi.as_ref().map(|p| adam(cfg.lr_phi, p)),
            opt_psi: psi.as_ref().map(|p| adam(cfg.lr_psi, p)),
            opt_eta: eta.as_ref().map(|p| adam(cfg.lr_theta, p)),
            theta,
            phi,
            psi,
            eta,
            bank,
            batch_rng: stream(cfg.seed, 1),
            aug_rng: stream(cfg.seed, 2),
            sampler: Sampler { perm: Vec::new(), cursor: 0 },
            standardizer: data.standardizer.clone(),
            channels: data.channels.clone(),
            feature_names: data.feature_names.clone(),
            best: None,
            history: Vec::new(),
            config: cfg,
        };
        Ok(Self { data, active, schedule, state })
    }

    pub fn resume(state: Checkpoint, data: &'a TrainData) -> Result<Self> {
        if state.config.hash() != state.config_hash {
            return Err(Error::Config("checkpoint config hash mismatch".into()));
        }
        let active = dispatch(&state.config);
        let c = &state.config;
        let schedule = NoiseSchedule::linear(c.alpha_min, c.alpha_max, c.diffusion_steps)?;
        Ok(Self { data, active, schedule, state })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.state.config
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.state.config.iterations)
    }

    pub fn run_until(&mut self, iteration: usize) -> Result<()> {
        while self.state.iteration < iteration.min(self.state.config.iterations) {
            self.step()?;
        }
        Ok(())
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.state
    }

    fn lambda_now(&self) -> f64 {
        if self.active.lambda == 0.0 {
            0.0
        } else {
            self.state.config.lambda_at(self.state.iteration)
        }
    }

    fn is_log_step(&self) -> bool {
        let it = self.state.iteration;
        let c = &self.state.config;
        it.is_multiple_of(c.eval_every) || it + 1 == c.iterations
    }

    /// One outer iteration: sample a batch, compute every group's gradient
    /// from the same parameters, then commit all updates together.
    pub fn step(&mut self) -> Result<()> {
        let it = self.state.iteration;
        let n = self.data.train.len();
        let m = self.state.config.batch_size;
        let idx = self.state.sampler.next(n, m, &mut self.state.batch_rng);
        let (report, ascent) = match self.active.baseline {
            Some(b) => (self.baseline_step(b, &idx).map_err(|e| as_divergence(it, e))?, None),
            None => self.augmented_step(&idx).map_err(|e| as_divergence(it, e))?,
        };
        let thr = self.state.config.divergence_threshold;
        if !report.total.is_finite() || report.total > thr {
            return Err(Error::Divergence {
                iteration: it,
                report: serde_json::to_string(&report).unwrap_or_default(),
            });
        }
        if self.is_log_step() {
            let val = match &self.data.val {
                Some(v) if !v.is_empty() => Some(
                    evaluate(&self.state.predictor, &self.state.theta, v, &self.data.a_hat, &self.data.standardizer)?
                        .average,
                ),
                _ => None,
            };
            if let Some(vm) = val {
                if self.state.best.as_ref().is_none_or(|b| vm.mae < b.val_mae) {
                    self.state.best = Some(Snapshot {
                        iteration: it + 1,
                        val_mae: vm.mae,
                        theta: self.state.theta.clone(),
                        phi: self.state.phi.clone(),
                    });
                }
            }
            self.state.history.push(HistoryEntry { iteration: it, report, val, ascent });
        }
        self.state.iteration += 1;
        Ok(())
    }

    fn baseline_step(&mut self, method: Baseline, idx: &[usize]) -> Result<LossReport> {
        let spec = &self.state.predictor;
        let a_hat = &self.data.a_hat;
        let lambda = self.lambda_now();
        let clip_norm = self.state.config.clip_norm;
        let theta = &self.state.theta;

        let (x, y) = self.data.train.batch(idx);
        let mut env_batches = Vec::new();
        if method != Baseline::Erm {
            for e in 0..self.data.n_envs {
                let sub: Vec<usize> = idx.iter().copied().filter(|&i| self.data.env_labels[i] == e).collect();
                if !sub.is_empty() {
                    let (xe, ye) = self.data.train.batch(&sub);
                    env_batches.push((e, xe, ye));
                }
            }
        }

        let mut tape = Tape::new();
        let tv = theta.load(&mut tape);
        let av = tape.constant(a_hat.clone());
        let eta_vars = self.state.eta.as_ref().map(|p| p.load_frozen(&mut tape));
        let mut risks = Vec::new();
        let mut aware = Vec::new();
        let objective;
        let mut penalty = 0.0;
        if method == Baseline::Erm {
            let xv = tape.constant(x);
            let yv = tape.constant(y);
            let pred = forward(spec, &mut tape, &tv, xv, av)?;
            objective = tape.mse(pred, yv)?;
            risks.push(objective);
        } else {
            for (e, xe, ye) in &env_batches {
                let xv = tape.constant(xe.clone());
                let yv = tape.constant(ye.clone());
                let pred = forward(spec, &mut tape, &tv, xv, av)?;
                risks.push(tape.mse(pred, yv)?);
                if let Some(ev) = &eta_vars {
                    let scale = tape.gather(ev[0], vec![1], vec![Some(*e)].into())?;
                    let shift = tape.gather(ev[1], vec![1], vec![Some(*e)].into())?;
                    let p = tape.mul(pred, scale)?;
                    let p = tape.add(p, shift)?;
                    aware.push(tape.mse(p, yv)?);
                }
            }
            objective = match method {
                Baseline::Rex if risks.len() >= 2 => {
                    let (obj, pen) = rex_objective(&mut tape, &risks, lambda, self.state.config.rex_form)?;
                    penalty = tape.item(pen);
                    obj
                }
                Baseline::Invrat => {
                    let shared = mean_risk(&mut tape, &risks)?;
                    let informed = mean_risk(&mut tape, &aware)?;
                    let gap = tape.sub(shared, informed)?;
                    penalty = tape.item(gap);
                    let weighted = tape.scale(gap, lambda)?;
                    tape.add(shared, weighted)?
                }
                _ => mean_risk(&mut tape, &risks)?,
            };
        }
        let risk_values: Vec<f64> = risks.iter().map(|r| tape.item(*r)).collect();
        let base_value = tape.item(objective);
        let mut g_theta = theta.grads_from(&tv, &tape.backward(objective)?)?;
        let mut total = base_value;

        if method == Baseline::Irmv1 && env_batches.len() >= 2 {
            let fns: Vec<_> = env_batches.iter().map(|(_, xe, ye)| env_risk(spec, a_hat, xe, ye)).collect();
            let p = penalty_irm(&fns, theta)?;
            penalty = p.value;
            g_theta.axpy(lambda, &p.grad)?;
            total += lambda * p.value;
        }

        let mut g_eta = None;
        if let (Some(eta), true) = (&self.state.eta, method == Baseline::Invrat) {
            let mut tape = Tape::new();
            let tv = theta.load_frozen(&mut tape);
            let ev = eta.load(&mut tape);
            let av = tape.constant(a_hat.clone());
            let mut aware = Vec::new();
            for (e, xe, ye) in &env_batches {
                let xv = tape.constant(xe.clone());
                let yv = tape.constant(ye.clone());
                let pred = forward(spec, &mut tape, &tv, xv, av)?;
                let scale = tape.gather(ev[0], vec![1], vec![Some(*e)].into())?;
                let shift = tape.gather(ev[1], vec![1], vec![Some(*e)].into())?;
                let p = tape.mul(pred, scale)?;
                let p = tape.add(p, shift)?;
                aware.push(tape.mse(p, yv)?);
            }
            let obj = mean_risk(&mut tape, &aware)?;
            let mut g = eta.grads_from(&ev, &tape.backward(obj)?)?;
            clip(&mut g, clip_norm);
            g_eta = Some(g);
        }

        let report = LossReport {
            augmentation: if method == Baseline::Erm { base_value } else { risk_values.iter().sum::<f64>() / risk_values.len() as f64 },
            penalty,
            lambda,
            total,
            env_risks: risk_values,
            ..Default::default()
        };
        if !report.total.is_finite() || report.total > self.state.config.divergence_threshold {
            return Ok(report);
        }
        clip(&mut g_theta, clip_norm);
        self.state.opt_theta.step(&mut self.state.theta, &g_theta)?;
        if let (Some(g), Some(eta), Some(opt)) = (g_eta, self.state.eta.as_mut(), self.state.opt_eta.as_mut()) {
            opt.step(eta, &g)?;
        }
        Ok(report)
    }

    /// Augmentation loss on one tape. Returns the tape, the loss node, the
    /// mask-regularized objective, the augmented inputs and the per-draw risks.
    #[allow(clippy::type_complexity)]
    fn augmentation_graph(
        &self,
        x: &Tensor,
        y: &Tensor,
        psi: &ParamSet,
        rng: &mut ChaCha8Rng,
        frozen: bool,
    ) -> Result<(Tape, AugVars)> {
        let cfg = &self.state.config;
        let spec = &self.state.predictor;
        let mut tape = Tape::new();
        let load = |p: &ParamSet, tape: &mut Tape| if frozen { p.load_frozen(tape) } else { p.load(tape) };
        let tv = load(&self.state.theta, &mut tape);
        let pv = self.state.phi.as_ref().map(|p| load(p, &mut tape));
        let sv = load(psi, &mut tape);
        let av = tape.constant(self.data.a_hat.clone());
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let mask = match (&pv, self.active.mask) {
            (Some(pv), MaskMode::Learned) => {
                generate_mask(&MaskSpec { feat_dim: spec.input_dim(), hidden: cfg.mask_hidden }, &mut tape, pv, xv)?
            }
            (_, MaskMode::Zeros) => tape.constant(Tensor::zeros(x.shape())),
            _ => tape.constant(Tensor::ones(x.shape())),
        };
        let dspec = DenoiserSpec { feat_dim: spec.input_dim(), emb_dim: cfg.emb_dim, hidden: cfg.denoiser_hidden };
        let mut tildes = Vec::with_capacity(cfg.k_envs);
        let mut risks = Vec::with_capacity(cfg.k_envs);
        for _ in 0..cfg.k_envs {
            let x_hat = match self.active.augmentor {
                Augmentor::Diffusion => {
                    let model = Denoiser { spec: &dspec, vars: &sv };
                    sample_environment(&mut tape, &model, x, av, &self.schedule, cfg.depth(), rng)?
                }
                _ => perturb(&mut tape, &sv, xv, rng)?,
            };
            let x_tilde = combine(&mut tape, xv, x_hat, mask)?;
            let pred = forward(spec, &mut tape, &tv, x_tilde, av)?;
            risks.push(tape.mse(pred, yv)?);
            tildes.push(x_tilde);
        }
        let loss = mean_risk(&mut tape, &risks)?;
        let (objective, reg) = if pv.is_some() && self.active.mask == MaskMode::Learned {
            let r = ratio_regularizer(&mut tape, mask, cfg.mask_target)?;
            let w = tape.scale(r, cfg.mask_reg_weight)?;
            (tape.add(loss, w)?, Some(r))
        } else {
            (loss, None)
        };
        Ok((tape, AugVars { theta: tv, phi: pv, psi: sv, loss, objective, reg, tildes, risks }))
    }

    fn augmented_step(&mut self, idx: &[usize]) -> Result<(LossReport, Option<bool>)> {
        let (x, y) = self.data.train.batch(idx);
        let cfg = self.state.config.clone();
        let spec = self.state.predictor.clone();
        let lambda = self.lambda_now();
        let log_step = self.is_log_step();
        let psi = self.state.psi.clone().expect("augmenting methods carry augmentor parameters");

        let rng_before = self.state.aug_rng.clone();
        let mut rng = self.state.aug_rng.clone();
        let (mut tape, v) = self.augmentation_graph(&x, &y, &psi, &mut rng, false)?;
        let aug_value = tape.item(v.loss);
        let reg_value = v.reg.map_or(0.0, |r| tape.item(r));
        let risk_values: Vec<f64> = v.risks.iter().map(|r| tape.item(*r)).collect();
        let tildes: Vec<Tensor> = v.tildes.iter().map(|t| tape.value(*t).clone()).collect();
        let grads = tape.backward(v.objective)?;
        let mut g_theta = self.state.theta.grads_from(&v.theta, &grads)?;
        let mut g_phi = match (&self.state.phi, &v.phi) {
            (Some(p), Some(pv)) => Some(p.grads_from(pv, &grads)?),
            _ => None,
        };
        let mut g_psi = psi.grads_from(&v.psi, &grads)?;
        g_psi.scale(-cfg.eta_adv);

        if self.active.augmentor == Augmentor::Diffusion && cfg.denoise_weight > 0.0 {
            let dspec = DenoiserSpec { feat_dim: spec.input_dim(), emb_dim: cfg.emb_dim, hidden: cfg.denoiser_hidden };
            let mut tape = Tape::new();
            let sv = psi.load(&mut tape);
            let av = tape.constant(self.data.a_hat.clone());
            let model = Denoiser { spec: &dspec, vars: &sv };
            let l = denoising_loss(&mut tape, &model, &x, spec.n_nodes, av, &self.schedule, &mut rng)?;
            let g = psi.grads_from(&sv, &tape.backward(l)?)?;
            g_psi.axpy(cfg.denoise_weight, &g)?;
        }
        self.state.aug_rng = rng;

        let mut penalty = 0.0;
        let mut stale = false;
        if self.active.lambda > 0.0 {
            let fns: Vec<_> = tildes.iter().map(|xt| env_risk(&spec, &self.data.a_hat, xt, &y)).collect();
            match cfg.penalty {
                PenaltyMode::Firstorder => {
                    let p = penalty_firstorder(&fns, &self.state.theta)?;
                    penalty = p.value;
                    g_theta.axpy(lambda, &p.grad)?;
                }
                PenaltyMode::Exact => {
                    let bank = self.state.bank.as_mut().expect("exact penalty keeps a bank");
                    if self.state.iteration.is_multiple_of(cfg.bank_refresh) {
                        *bank = EnvPredictorBank::new(&self.state.theta, cfg.k_envs, AdamConfig::with_lr(cfg.lr_theta));
                        bank.refresh(&fns, cfg.bank_steps)?;
                    }
                    let bank_risks = bank
                        .thetas
                        .iter()
                        .zip(&fns)
                        .map(|(t, f)| f(t).map(|(v, _)| v))
                        .collect::<Result<Vec<_>>>()?;
                    penalty = penalty_exact(&risk_values, &bank_risks)?;
                    stale = bank.is_stale(cfg.bank_refresh);
                    bank.age += 1;
                    // the bank is frozen, so the penalty's gradient is that of the mean risk
                    let g_mean = grads_of_mean(&self.state.theta, &fns)?;
                    g_theta.axpy(lambda, &g_mean)?;
                }
            }
        }

        let mut report = total_loss(aug_value, penalty, lambda, risk_values)?.with_regularizer(reg_value, cfg.mask_reg_weight);
        report.stale_bank = stale;
        if !report.total.is_finite() || report.total > cfg.divergence_threshold {
            return Ok((report, None));
        }

        clip(&mut g_theta, cfg.clip_norm);
        clip(&mut g_psi, cfg.clip_norm);
        if let Some(g) = g_phi.as_mut() {
            clip(g, cfg.clip_norm);
        }

        let mut new_psi = psi.clone();
        self.state.opt_psi.as_mut().expect("augmentor optimizer").step(&mut new_psi, &g_psi)?;
        let ascent = if log_step && cfg.eta_adv > 0.0 {
            let before = self.frozen_aug_loss(&x, &y, &psi, &rng_before)?;
            let after = self.frozen_aug_loss(&x, &y, &new_psi, &rng_before)?;
            Some(after >= before)
        } else {
            None
        };

        self.state.opt_theta.step(&mut self.state.theta, &g_theta)?;
        if let (Some(g), Some(phi), Some(opt)) = (g_phi, self.state.phi.as_mut(), self.state.opt_phi.as_mut()) {
            opt.step(phi, &g)?;
        }
        self.state.psi = Some(new_psi);
        Ok((report, ascent))
    }

    fn frozen_aug_loss(&self, x: &Tensor, y: &Tensor, psi: &ParamSet, rng: &ChaCha8Rng) -> Result<f64> {
        let mut rng = rng.clone();
        let (tape, v) = self.augmentation_graph(x, y, psi, &mut rng, true)?;
        Ok(tape.item(v.loss))
    }
}

struct AugVars {
    theta: Vec<Var>,
    phi: Option<Vec<Var>>,
    psi: Vec<Var>,
    loss: Var,
    objective: Var,
    reg: Option<Var>,
    tildes: Vec<Var>,
    risks: Vec<Var>,
}

fn grads_of_mean<F>(theta: &ParamSet, fns: &[F]) -> Result<ParamSet>
where
    F: Fn(&ParamSet) -> Result<(f64, ParamSet)>,
{
    let mut g = theta.zeros_like();
    for f in fns {
        g.axpy(1.0 / fns.len() as f64, &f(theta)?.1)?;
    }
    Ok(g)
}

/// Trains from scratch to completion.
pub fn train(cfg: TrainConfig, data: &TrainData) -> Result<Checkpoint> {
    let mut t = Trainer::new(cfg, data)?;
    t.run()?;
    Ok(t.into_checkpoint())
}

/// Feature-by-lag mean of the learned mask over the given windows.
pub fn mask_report(ck: &Checkpoint, windows: &WindowSet) -> Result<MaskReport> {
    let phi = ck
        .phi
        .as_ref()
        .ok_or_else(|| Error::Contract(format!("method {} has no learned mask", ck.config.method)))?;
    let spec = ck.mask_spec();
    let all: Vec<usize> = (0..windows.len()).collect();
    let mut samples = Vec::new();
    for chunk in all.chunks(256) {
        let (x, _) = windows.batch(chunk);
        let mut tape = Tape::new();
        let vars = phi.load_frozen(&mut tape);
        let xv = tape.constant(x);
        let m = generate_mask(&spec, &mut tape, &vars, xv)?;
        samples.push(tape.value(m).clone());
    }
    MaskReport::from_samples(&samples, &ck.feature_names, windows.tau)
}
