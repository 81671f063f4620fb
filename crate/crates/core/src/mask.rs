//! Soft causal masks and their aggregation into feature-by-lag reports.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Result};
use crate::nn::{dense, ParamBuilder};
use crate::params::ParamSet;
use crate::tensor::{Activation, Tape, Tensor, Var};

/// Node-shared two-layer perceptron with sigmoid output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    /// Flattened per-node width `tau * F`.
    pub feat_dim: usize,
    pub hidden: usize,
}

impl MaskSpec {
    pub fn new(feat_dim: usize) -> Self {
        Self { feat_dim, hidden: 32 }
    }
}

pub fn init_mask(spec: &MaskSpec, seed: u64) -> Result<ParamSet> {
    if spec.feat_dim == 0 || spec.hidden == 0 {
        return contract_err("mask widths must be positive");
    }
    let mut b = ParamBuilder::new(seed);
    b.dense("mask.hidden", spec.feat_dim, spec.hidden).dense("mask.out", spec.hidden, spec.feat_dim);
    Ok(b.finish())
}

/// Mask values in `(0, 1)` with the shape of `x`.
pub fn generate_mask(spec: &MaskSpec, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
    if tape.shape(x).get(1) != Some(&spec.feat_dim) {
        return dim_err(format!("mask expects width {}, got {:?}", spec.feat_dim, tape.shape(x)));
    }
    let h = dense(tape, x, vars[0], vars[1], Activation::Relu)?;
    dense(tape, h, vars[2], vars[3], Activation::Sigmoid)
}

/// `mask * x + (1 - mask) * x_hat`; the mask must lie in `[0, 1]`.
pub fn combine(tape: &mut Tape, x: Var, x_hat: Var, mask: Var) -> Result<Var> {
    if tape.value(mask).data().iter().any(|m| !(0.0..=1.0).contains(m)) {
        return contract_err("mask entries must lie in [0, 1]");
    }
    tape.blend(x, x_hat, mask)
}

/// `(mean(mask) - target)^2`.
pub fn ratio_regularizer(tape: &mut Tape, mask: Var, target: f64) -> Result<Var> {
    if !(target > 0.0 && target < 1.0) {
        return contract_err(format!("target ratio {target} outside (0, 1)"));
    }
    let m = tape.mean(mask)?;
    let d = tape.offset(m, -target)?;
    tape.square(d)
}

/// Mean mask value per (feature, lag).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskReport {
    pub features: Vec<String>,
    pub tau: usize,
    /// `values[f][t]`
    pub values: Vec<Vec<f64>>,
}

impl MaskReport {
    /// Averages over every row of every sample. Samples are `[rows, tau*F]`
    /// with `(lag, feature)` columns.
    pub fn from_samples(samples: &[Tensor], features: &[String], tau: usize) -> Result<Self> {
        let f = features.len();
        if samples.is_empty() {
            return contract_err("mask report needs at least one sample");
        }
        let mut sums = vec![vec![0.0; tau]; f];
        let mut rows = 0usize;
        for s in samples {
            if s.cols() != tau * f {
                return dim_err(format!("mask width {} is not {tau}x{f}", s.cols()));
            }
            for row in s.data().chunks(tau * f) {
                for t in 0..tau {
                    for (c, acc) in sums.iter_mut().enumerate() {
                        acc[t] += row[t * f + c];
                    }
                }
                rows += 1;
            }
        }
        let values = sums.into_iter().map(|r| r.into_iter().map(|v| v / rows as f64).collect()).collect();
        Ok(Self { features: features.to_vec(), tau, values })
    }

    /// Mean over lags of the given feature rows.
    pub fn mean_of(&self, features: &[usize]) -> f64 {
        let total: f64 = features.iter().map(|&f| self.values[f].iter().sum::<f64>()).sum();
        total / (features.len() * self.tau) as f64
    }

    /// Header of lag indices, then one row per feature.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["feature".to_string()];
        header.extend((0..self.tau).map(|t| t.to_string()));
        w.write_record(&header)?;
        for (name, row) in self.features.iter().zip(&self.values) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|v| format!("{v:.6}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}
