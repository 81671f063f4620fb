//! Training objectives, invariance penalties and evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::params::ParamSet;
use crate::tensor::{Tape, Var};

/// Components of one objective evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub augmentation: f64,
    pub penalty: f64,
    pub lambda: f64,
    pub regularizer: f64,
    pub reg_weight: f64,
    pub total: f64,
    pub env_risks: Vec<f64>,
    #[serde(default)]
    pub stale_bank: bool,
}

/// `augmentation + lambda * penalty`, with the mask regularizer reported
/// separately (it only drives the mask network).
pub fn total_loss(augmentation: f64, penalty: f64, lambda: f64, env_risks: Vec<f64>) -> Result<LossReport> {
    if lambda < 0.0 {
        return contract_err(format!("penalty weight must be non-negative, got {lambda}"));
    }
    let total = augmentation + lambda * penalty;
    if !total.is_finite() {
        return Err(crate::Error::NonFinite { op: "total_loss" });
    }
    Ok(LossReport { augmentation, penalty, lambda, total, env_risks, ..Default::default() })
}

impl LossReport {
    pub fn with_regularizer(mut self, value: f64, weight: f64) -> Self {
        self.regularizer = value;
        self.reg_weight = weight;
        self
    }

    /// Objective seen by the mask network.
    pub fn mask_objective(&self) -> f64 {
        self.augmentation + self.reg_weight * self.regularizer
    }
}

/// Mean of per-environment risks recorded on the tape.
pub fn mean_risk(tape: &mut Tape, risks: &[Var]) -> Result<Var> {
    if risks.is_empty() {
        return contract_err("no environment risks");
    }
    let mut acc = risks[0];
    for &r in &risks[1..] {
        acc = tape.add(acc, r)?;
    }
    tape.scale(acc, 1.0 / risks.len() as f64)
}

/// Population variance of per-environment risks.
pub fn risk_variance(tape: &mut Tape, risks: &[Var]) -> Result<Var> {
    let m = mean_risk(tape, risks)?;
    let mut devs = Vec::with_capacity(risks.len());
    for &r in risks {
        let d = tape.sub(r, m)?;
        devs.push(tape.square(d)?);
    }
    mean_risk(tape, &devs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RexForm {
    /// Mean risk plus the variance of the risks.
    Variance,
    /// Smallest environment risk plus the squared mean risk.
    MinPlusSquaredMean,
}

/// Risk extrapolation objective. Returns `(objective, penalty)`.
pub fn rex_objective(tape: &mut Tape, risks: &[Var], lambda: f64, form: RexForm) -> Result<(Var, Var)> {
    if risks.len() < 2 {
        return contract_err("risk extrapolation needs at least two environments");
    }
    match form {
        RexForm::Variance => {
            let m = mean_risk(tape, risks)?;
            let pen = risk_variance(tape, risks)?;
            let scaled = tape.scale(pen, lambda)?;
            Ok((tape.add(m, scaled)?, pen))
        }
        RexForm::MinPlusSquaredMean => {
            let lowest = *risks
                .iter()
                .min_by(|a, b| tape.item(**a).total_cmp(&tape.item(**b)))
                .expect("non-empty");
            let m = mean_risk(tape, risks)?;
            let pen = tape.square(m)?;
            let scaled = tape.scale(pen, lambda)?;
            Ok((tape.add(lowest, scaled)?, pen))
        }
    }
}

/// Risk and its gradient with respect to the predictor parameters.
pub trait EnvRisk {
    fn risk_and_grad(&self, theta: &ParamSet) -> Result<(f64, ParamSet)>;
}

impl<F> EnvRisk for F
where
    F: Fn(&ParamSet) -> Result<(f64, ParamSet)>,
{
    fn risk_and_grad(&self, theta: &ParamSet) -> Result<(f64, ParamSet)> {
        self(theta)
    }
}

/// Value and parameter gradient of a sum of squared gradient norms.
#[derive(Clone, Debug, PartialEq)]
pub struct GradPenalty {
    pub value: f64,
    pub grad: ParamSet,
    pub risks: Vec<f64>,
    /// Gradient of the mean risk, a by-product of the evaluation.
    pub risk_grad: ParamSet,
}

/// `sum_k w * ||grad_theta risk_k||^2`. The gradient `2 w H_k g_k` is formed
/// from a central difference of gradients along `g_k`.
fn grad_norm_penalty<R: EnvRisk>(risks: &[R], theta: &ParamSet, weight: f64) -> Result<GradPenalty> {
    if risks.is_empty() {
        return contract_err("no environment risks");
    }
    let mut value = 0.0;
    let mut grad = theta.zeros_like();
    let mut risk_grad = theta.zeros_like();
    let mut values = Vec::with_capacity(risks.len());
    for r in risks {
        let (v, g) = r.risk_and_grad(theta)?;
        values.push(v);
        risk_grad.axpy(1.0 / risks.len() as f64, &g)?;
        let n2 = g.sq_norm();
        value += weight * n2;
        if n2 == 0.0 {
            continue;
        }
        let norm = n2.sqrt();
        let step = 1e-4_f64.min(norm) / norm;
        let mut up = theta.clone();
        up.axpy(step, &g)?;
        let mut down = theta.clone();
        down.axpy(-step, &g)?;
        let (_, g_up) = r.risk_and_grad(&up)?;
        let (_, g_down) = r.risk_and_grad(&down)?;
        grad.axpy(weight / step, &g_up)?;
        grad.axpy(-weight / step, &g_down)?;
    }
    Ok(GradPenalty { value, grad, risks: values, risk_grad })
}

/// Mean over environments of `||grad_theta risk_k||^2`.
pub fn penalty_firstorder<R: EnvRisk>(risks: &[R], theta: &ParamSet) -> Result<GradPenalty> {
    grad_norm_penalty(risks, theta, 1.0 / risks.len().max(1) as f64)
}

/// Sum over environments of `||grad_theta risk_e||^2`.
pub fn penalty_irm<R: EnvRisk>(risks: &[R], theta: &ParamSet) -> Result<GradPenalty> {
    if risks.len() < 2 {
        return contract_err("the gradient-norm invariance penalty needs at least two environments");
    }
    grad_norm_penalty(risks, theta, 1.0)
}

/// Mean excess risk of the shared predictor over per-environment predictors.
pub fn penalty_exact(shared_risks: &[f64], bank_risks: &[f64]) -> Result<f64> {
    if shared_risks.len() != bank_risks.len() || shared_risks.is_empty() {
        return dim_err(format!(
            "{} shared risks against {} bank risks",
            shared_risks.len(),
            bank_risks.len()
        ));
    }
    let gap: f64 = shared_risks.iter().zip(bank_risks).map(|(a, b)| a - b).sum();
    Ok(gap / shared_risks.len() as f64)
}

/// Per-environment predictors for the exact penalty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvPredictorBank {
    pub thetas: Vec<ParamSet>,
    pub optimizers: Vec<AdamState>,
    /// Outer iterations since the last refresh.
    pub age: usize,
}

impl EnvPredictorBank {
    pub fn new(theta: &ParamSet, k: usize, adam: AdamConfig) -> Self {
        Self {
            thetas: vec![theta.clone(); k],
            optimizers: (0..k).map(|_| AdamState::new(adam, theta)).collect(),
            age: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }

    pub fn is_stale(&self, budget: usize) -> bool {
        self.age > budget
    }

    /// `steps` Adam steps for each member on its own environment risk.
    pub fn refresh<R: EnvRisk>(&mut self, risks: &[R], steps: usize) -> Result<()> {
        if risks.len() != self.len() {
            return dim_err(format!("{} risks for a bank of {}", risks.len(), self.len()));
        }
        for ((theta, opt), r) in self.thetas.iter_mut().zip(&mut self.optimizers).zip(risks) {
            for _ in 0..steps {
                let (_, g) = r.risk_and_grad(theta)?;
                opt.step(theta, &g)?;
            }
        }
        self.age = 0;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// Percent; `None` when every target is numerically zero.
    pub mape: Option<f64>,
}

pub fn metrics(pred: &[f64], target: &[f64]) -> Result<Metrics> {
    if pred.len() != target.len() {
        return dim_err(format!("{} predictions for {} targets", pred.len(), target.len()));
    }
    if pred.is_empty() {
        return contract_err("metrics need at least one entry");
    }
    let n = pred.len() as f64;
    let (mut abs, mut sq, mut pct, mut counted) = (0.0, 0.0, 0.0, 0usize);
    for (p, y) in pred.iter().zip(target) {
        let e = p - y;
        abs += e.abs();
        sq += e * e;
        if y.abs() >= 1e-8 {
            pct += e.abs() / y.abs();
            counted += 1;
        }
    }
    Ok(Metrics {
        mae: abs / n,
        rmse: (sq / n).sqrt(),
        mape: (counted > 0).then(|| 100.0 * pct / counted as f64),
    })
}
