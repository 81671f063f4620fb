//! Synthetic structural causal models with known ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::{Method, TrainConfig};
use crate::data::{SplitSpec, StDataset, WindowSet};
use crate::diffusion::{sample_environment, Denoiser, NoiseSchedule};
use crate::error::{contract_err, Error, Result};
use crate::graph::{normalize_adjacency, Graph};
use crate::mask::{combine, generate_mask};
use crate::predictor::Backbone;
use crate::tensor::{Tape, Tensor};
use crate::trainer::{evaluate, mask_report, prepare, train, Checkpoint, TrainData};

/// Environments of the two-feature model
/// `x1 ~ N(0, s2)`, `y = x1 + N(0, s2)`, `x2 = y + N(0, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScmSpec {
    pub variances: Vec<f64>,
    pub n_per_env: usize,
    pub seed: u64,
}

impl ScmSpec {
    pub fn train(n_per_env: usize, seed: u64) -> Self {
        Self { variances: vec![4.0, 7.0], n_per_env, seed }
    }

    pub fn test(n_per_env: usize, seed: u64) -> Self {
        Self { variances: vec![8.0, 9.0], n_per_env, seed }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScmData {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub y: Vec<f64>,
    /// Index into the generating spec's variance list.
    pub env: Vec<usize>,
    pub variances: Vec<f64>,
}

impl ScmData {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// One node, one lag, two features, one-step target.
    pub fn windows(&self) -> Result<WindowSet> {
        let x = self.x1.iter().zip(&self.x2).flat_map(|(a, b)| [*a, *b]).collect();
        WindowSet::new(1, 1, 2, 1, x, self.y.clone(), (0..self.len()).collect())
    }
}

pub fn generate_scm(spec: &ScmSpec) -> Result<ScmData> {
    if spec.variances.iter().any(|v| !(*v > 0.0)) {
        return contract_err("environment variances must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cap = spec.variances.len() * spec.n_per_env;
    let mut d = ScmData {
        x1: Vec::with_capacity(cap),
        x2: Vec::with_capacity(cap),
        y: Vec::with_capacity(cap),
        env: Vec::with_capacity(cap),
        variances: spec.variances.clone(),
    };
    for (e, &var) in spec.variances.iter().enumerate() {
        let s = var.sqrt();
        for _ in 0..spec.n_per_env {
            let x1 = s * rng.sample::<f64, _>(StandardNormal);
            let y = x1 + s * rng.sample::<f64, _>(StandardNormal);
            let x2 = y + rng.sample::<f64, _>(StandardNormal);
            d.x1.push(x1);
            d.x2.push(x2);
            d.y.push(y);
            d.env.push(e);
        }
    }
    Ok(d)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn cov(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / a.len() as f64
}

/// Least squares of `y` on `(x1, x2)` through the pooled sample covariances.
pub fn least_squares_2(x1: &[f64], x2: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if y.is_empty() {
        return contract_err("least squares needs data");
    }
    let (a, b, c) = (cov(x1, x1), cov(x1, x2), cov(x2, x2));
    let (r1, r2) = (cov(x1, y), cov(x2, y));
    let det = a * c - b * b;
    if det.abs() < 1e-12 * (a * c).abs().max(1e-300) {
        return contract_err("feature covariance is singular");
    }
    Ok(((c * r1 - b * r2) / det, (a * r2 - b * r1) / det))
}

pub fn closed_form_erm(d: &ScmData) -> Result<(f64, f64)> {
    least_squares_2(&d.x1, &d.x2, &d.y)
}

/// Regression of `y` on `x1` alone.
pub fn ominous_solution(d: &ScmData) -> Result<f64> {
    let v = cov(&d.x1, &d.x1);
    if v <= 0.0 {
        return contract_err("x1 has no variance");
    }
    Ok(cov(&d.x1, &d.y) / v)
}

/// Least squares after adding `N(0, scale^2)` noise to both features.
pub fn random_augmentation_baseline(d: &ScmData, scale: f64, seed: u64) -> Result<(f64, f64)> {
    if !(scale >= 0.0) {
        return contract_err("perturbation scale must be non-negative");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noisy = |v: &[f64]| -> Vec<f64> {
        v.iter().map(|x| x + scale * rng.sample::<f64, _>(StandardNormal)).collect()
    };
    let (a, b) = (noisy(&d.x1), noisy(&d.x2));
    least_squares_2(&a, &b, &d.y)
}

/// Mean squared error of `y ~ t1 x1 + t2 x2 + bias`.
pub fn linear_mse(d: &ScmData, t1: f64, t2: f64, bias: f64) -> f64 {
    let n = d.len() as f64;
    (0..d.len()).map(|i| (d.y[i] - t1 * d.x1[i] - t2 * d.x2[i] - bias).powi(2)).sum::<f64>() / n
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotivatingConfig {
    pub n_per_env: usize,
    pub seed: u64,
    pub aug_scale: f64,
    pub train: TrainConfig,
}

impl MotivatingConfig {
    pub fn new(seed: u64) -> Self {
        Self { n_per_env: 200_000, seed, aug_scale: 2.0, train: scm_train_config(seed) }
    }
}

/// Training setup for the two-feature model: a linear predictor on raw units.
pub fn scm_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        method: Method::Diffirm,
        backbone: Backbone::Linear,
        tau: 1,
        horizon: 1,
        iterations: 3000,
        batch_size: 256,
        lr_theta: 1e-2,
        lr_phi: 1e-2,
        lr_psi: 1e-3,
        lambda: 1.0,
        seed,
        standardize: false,
        eval_every: 100,
        ..TrainConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub method: String,
    pub theta1: f64,
    pub theta2: f64,
    pub train_mse: f64,
    pub test_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table1 {
    pub rows: Vec<Table1Row>,
    pub analytic_erm: (f64, f64),
}

impl Table1 {
    pub fn write_csv(&self, out: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["method", "theta1", "theta2", "train_mse", "test_mse"])?;
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                format!("{:.6}", r.theta1),
                format!("{:.6}", r.theta2),
                format!("{:.6}", r.train_mse),
                format!("{:.6}", r.test_mse),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn row(&self, method: &str) -> Option<&Table1Row> {
        self.rows.iter().find(|r| r.method == method)
    }
}

pub fn scm_train_data(d: &ScmData) -> Result<TrainData> {
    TrainData::new(d.windows()?, None, Tensor::eye(1), vec!["x1".into(), "x2".into()]).with_env_labels(d.env.clone())
}

/// Reads `(theta1, theta2, bias)` off a trained linear predictor.
pub fn linear_coefficients(ck: &Checkpoint) -> Result<(f64, f64, f64)> {
    let w = ck.theta.get(0);
    let b = ck.theta.get(1);
    if w.shape() != [2, 1] {
        return Err(Error::Contract(format!("expected a 2x1 linear head, got {:?}", w.shape())));
    }
    Ok((w.data()[0], w.data()[1], b.data()[0]))
}

/// Trains a method on the two-feature model and returns the checkpoint.
pub fn train_scm(d: &ScmData, cfg: TrainConfig) -> Result<Checkpoint> {
    train(cfg, &scm_train_data(d)?)
}

/// The ominous, least-squares, random-augmentation and diffIRM rows.
pub fn run_motivating_experiment(cfg: &MotivatingConfig) -> Result<(Table1, Checkpoint, ScmData)> {
    let data = generate_scm(&ScmSpec::train(cfg.n_per_env, cfg.seed))?;
    let test = generate_scm(&ScmSpec::test(cfg.n_per_env, cfg.seed.wrapping_add(1000)))?;
    let row = |method: &str, t1: f64, t2: f64, b: f64| Table1Row {
        method: method.into(),
        theta1: t1,
        theta2: t2,
        train_mse: linear_mse(&data, t1, t2, b),
        test_mse: linear_mse(&test, t1, t2, b),
    };
    let om = ominous_solution(&data)?;
    let (e1, e2) = closed_form_erm(&data)?;
    let (r1, r2) = random_augmentation_baseline(&data, cfg.aug_scale, cfg.seed.wrapping_add(2000))?;
    let mut tc = cfg.train.clone();
    tc.method = Method::Diffirm;
    let ck = train_scm(&data, tc)?;
    let (d1, d2, db) = linear_coefficients(&ck)?;
    let table = Table1 {
        rows: vec![
            row("ominous", om, 0.0, 0.0),
            row("erm", e1, e2, 0.0),
            row("random_augmentation", r1, r2, 0.0),
            row("diffirm", d1, d2, db),
        ],
        analytic_erm: (2.0 / 13.0, 11.0 / 13.0),
    };
    Ok((table, ck, data))
}

/// Bin means of `y` against `x` on a fixed grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinnedCurve {
    pub label: String,
    pub centers: Vec<f64>,
    pub means: Vec<Option<f64>>,
    pub counts: Vec<usize>,
    /// Standard error of each bin mean.
    pub std_errs: Vec<Option<f64>>,
    /// Mean of the conditioning variable within each bin.
    pub x_means: Vec<Option<f64>>,
}

pub const BIN_WIDTH: f64 = 0.5;
pub const BIN_RANGE: f64 = 10.0;

pub fn binned_curve(label: &str, x: &[f64], y: &[f64], keep: impl Fn(usize) -> bool) -> BinnedCurve {
    let n_bins = (2.0 * BIN_RANGE / BIN_WIDTH) as usize;
    let mut sum = vec![0.0; n_bins];
    let mut sq = vec![0.0; n_bins];
    let mut xs = vec![0.0; n_bins];
    let mut counts = vec![0usize; n_bins];
    for i in 0..x.len() {
        if !keep(i) || x[i] < -BIN_RANGE || x[i] >= BIN_RANGE {
            continue;
        }
        let b = ((x[i] + BIN_RANGE) / BIN_WIDTH) as usize;
        sum[b] += y[i];
        sq[b] += y[i] * y[i];
        xs[b] += x[i];
        counts[b] += 1;
    }
    let centers = (0..n_bins).map(|b| -BIN_RANGE + (b as f64 + 0.5) * BIN_WIDTH).collect();
    let means = (0..n_bins).map(|b| (counts[b] > 0).then(|| sum[b] / counts[b] as f64)).collect();
    let std_errs = (0..n_bins)
        .map(|b| {
            (counts[b] > 1).then(|| {
                let c = counts[b] as f64;
                let m = sum[b] / c;
                ((sq[b] / c - m * m).max(0.0) * c / (c - 1.0) / c).sqrt()
            })
        })
        .collect();
    let x_means = (0..n_bins).map(|b| (counts[b] > 0).then(|| xs[b] / counts[b] as f64)).collect();
    BinnedCurve { label: label.into(), centers, means, counts, std_errs, x_means }
}

/// Minimum bin occupancy for a bin to enter a comparison.
pub const MIN_BIN_COUNT: usize = 50;

/// Occupancy-weighted mean absolute gap between two curves, over bins where
/// both have at least [`MIN_BIN_COUNT`] samples. Weights are the occupancies
/// of `conditioned`. Returns `(gap, bins used, bins skipped)`.
pub fn weighted_gap(conditioned: &BinnedCurve, marginal: &BinnedCurve) -> (f64, usize, usize) {
    let (mut num, mut den, mut used, mut skipped) = (0.0, 0.0, 0, 0);
    for b in 0..conditioned.centers.len() {
        if conditioned.counts[b] == 0 {
            continue;
        }
        match (conditioned.means[b], marginal.means[b]) {
            (Some(c), Some(m)) if conditioned.counts[b] >= MIN_BIN_COUNT && marginal.counts[b] >= MIN_BIN_COUNT => {
                let w = conditioned.counts[b] as f64;
                num += w * (c - m).abs();
                den += w;
                used += 1;
            }
            _ => skipped += 1,
        }
    }
    (if den > 0.0 { num / den } else { f64::NAN }, used, skipped)
}

/// Bound on [`max_identity_z`]: a two-sided 95% band after Bonferroni
/// correction over the roughly 160 bins compared across four variances.
pub const IDENTITY_Z_LIMIT: f64 = 3.5;

/// Largest standardized deviation of a curve from the identity
/// `E[Y | X in bin] = E[X | X in bin]`.
pub fn max_identity_z(curve: &BinnedCurve) -> f64 {
    let mut worst = 0.0f64;
    for b in 0..curve.centers.len() {
        if let (Some(m), Some(se), Some(xm)) = (curve.means[b], curve.std_errs[b], curve.x_means[b]) {
            if curve.counts[b] >= MIN_BIN_COUNT && se > 0.0 {
                worst = worst.max((m - xm).abs() / se);
            }
        }
    }
    worst
}

/// Slope and intercept of bin means regressed on bin centers.
pub fn bin_regression(curve: &BinnedCurve) -> (f64, f64) {
    let pts: Vec<(f64, f64)> = (0..curve.centers.len())
        .filter(|&b| curve.counts[b] >= MIN_BIN_COUNT)
        .filter_map(|b| Some((curve.x_means[b]?, curve.means[b]?)))
        .collect();
    let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let slope = cov(&xs, &ys) / cov(&xs, &xs);
    (slope, mean(&ys) - slope * mean(&xs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalReport {
    /// `E[Y | aug x1]` and `E[Y | aug x1, aug x2 = c]` for each slice `c`.
    pub augmented: Vec<BinnedCurve>,
    /// `E[Y | x1]` per environment variance on raw data.
    pub per_variance: Vec<BinnedCurve>,
    /// `(slice, gap, bins used, bins skipped)`.
    pub gaps: Vec<(f64, f64, usize, usize)>,
    pub max_gap: f64,
    /// Worst standardized deviation of the per-variance curves from `E[Y|x1] = x1`.
    pub max_identity_z: f64,
}

pub const SLICES: [f64; 3] = [-5.0, 0.0, 5.0];

/// Draws one augmented copy of every sample with the trained augmentor and mask.
pub fn augmented_features(ck: &Checkpoint, d: &ScmData, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let psi = ck.psi.as_ref().ok_or_else(|| Error::Contract("checkpoint has no augmentor".into()))?;
    let w = d.windows()?;
    let c = &ck.config;
    let sched = NoiseSchedule::linear(c.alpha_min, c.alpha_max, c.diffusion_steps)?;
    let dspec = ck.denoiser_spec();
    let mspec = ck.mask_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut a, mut b) = (Vec::with_capacity(d.len()), Vec::with_capacity(d.len()));
    let idx: Vec<usize> = (0..w.len()).collect();
    for chunk in idx.chunks(4096) {
        let (x, _) = w.batch(chunk);
        let mut tape = Tape::new();
        let sv = psi.load_frozen(&mut tape);
        let av = tape.constant(Tensor::eye(1));
        let xv = tape.constant(x.clone());
        let model = Denoiser { spec: &dspec, vars: &sv };
        let xh = sample_environment(&mut tape, &model, &x, av, &sched, c.depth(), &mut rng)?;
        let mask = match &ck.phi {
            Some(phi) => {
                let pv = phi.load_frozen(&mut tape);
                generate_mask(&mspec, &mut tape, &pv, xv)?
            }
            None => tape.constant(Tensor::zeros(x.shape())),
        };
        let xt = combine(&mut tape, xv, xh, mask)?;
        for row in tape.value(xt).data().chunks(2) {
            a.push(row[0]);
            b.push(row[1]);
        }
    }
    Ok((a, b))
}

/// Conditional-expectation checks on augmented and raw features.
pub fn conditional_checks(x1_aug: &[f64], x2_aug: &[f64], y: &[f64], raw: &[ScmData]) -> ConditionalReport {
    let marginal = binned_curve("aug_marginal", x1_aug, y, |_| true);
    let mut augmented = vec![marginal.clone()];
    let mut gaps = Vec::new();
    for c in SLICES {
        let curve = binned_curve(&format!("aug_x2={c}"), x1_aug, y, |i| (x2_aug[i] - c).abs() <= 0.5);
        let (g, used, skipped) = weighted_gap(&curve, &marginal);
        gaps.push((c, g, used, skipped));
        augmented.push(curve);
    }
    let max_gap = gaps.iter().map(|g| g.1).filter(|g| g.is_finite()).fold(0.0, f64::max);
    let mut per_variance = Vec::new();
    for d in raw {
        for (e, var) in d.variances.iter().enumerate() {
            per_variance.push(binned_curve(&format!("sigma2={var}"), &d.x1, &d.y, |i| d.env[i] == e));
        }
    }
    let max_identity_z = per_variance.iter().map(max_identity_z).fold(0.0, f64::max);
    ConditionalReport { augmented, per_variance, gaps, max_gap, max_identity_z }
}

impl ConditionalReport {
    /// Long-format rows: `curve,bin_center,mean,count`.
    pub fn write_csv(&self, out: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["curve", "bin_center", "mean_y", "count"])?;
        for c in self.augmented.iter().chain(&self.per_variance) {
            for b in 0..c.centers.len() {
                if let Some(m) = c.means[b] {
                    w.write_record([
                        c.label.clone(),
                        format!("{:.2}", c.centers[b]),
                        format!("{m:.6}"),
                        c.counts[b].to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Spatiotemporal fixture with planted causal and spurious channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphScmSpec {
    pub n_nodes: usize,
    pub steps: usize,
    pub tau: usize,
    pub horizon: usize,
    pub n_causal: usize,
    pub n_spurious: usize,
    /// Persistence of the target.
    pub rho: f64,
    /// Persistence of the causal drivers.
    pub driver_ar: f64,
    pub target_noise: f64,
    /// Spurious noise scale in each contiguous training segment.
    pub train_noise: Vec<f64>,
    pub test_noise: f64,
    pub train_frac: f64,
    pub val_frac: f64,
    pub seed: u64,
}

impl Default for GraphScmSpec {
    fn default() -> Self {
        Self {
            n_nodes: 8,
            steps: 400,
            tau: 4,
            horizon: 1,
            n_causal: 2,
            n_spurious: 1,
            rho: 0.3,
            driver_ar: 0.5,
            target_noise: 0.5,
            train_noise: vec![0.1, 0.3],
            test_noise: 3.0,
            train_frac: 0.6,
            val_frac: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GraphScm {
    pub dataset: StDataset,
    pub split: SplitSpec,
    /// Channels that drive the target (including the target's own lags).
    pub causal: Vec<usize>,
    pub spurious: Vec<usize>,
}

/// Target: `y[t+1] = rho y[t] + sum_j w_j (A c_j)[t] + noise`. Spurious
/// channel `s[t] = y[t+1] + env noise`, a noisy preview of the next target.
pub fn generate_graph_scm(spec: &GraphScmSpec) -> Result<GraphScm> {
    if spec.n_causal == 0 {
        return contract_err("need at least one causal channel");
    }
    if spec.train_noise.is_empty() {
        return contract_err("need at least one training noise scale");
    }
    let (n, t_len) = (spec.n_nodes, spec.steps);
    let graph = Graph::ring(n)?;
    let a = normalize_adjacency(&graph);
    let f = 1 + spec.n_causal + spec.n_spurious;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut gauss = move || rng.sample::<f64, _>(StandardNormal);

    let weights: Vec<f64> = (0..spec.n_causal).map(|j| if j % 2 == 0 { 1.0 } else { -0.8 }).collect();
    let mut drivers = vec![vec![vec![0.0; n]; spec.n_causal]; t_len];
    let mut y = vec![vec![0.0; n]; t_len + 1];
    for t in 0..t_len {
        for j in 0..spec.n_causal {
            for i in 0..n {
                let prev = if t > 0 { drivers[t - 1][j][i] } else { 0.0 };
                drivers[t][j][i] = spec.driver_ar * prev + gauss();
            }
        }
        for i in 0..n {
            let mut v = spec.rho * y[t][i] + spec.target_noise * gauss();
            for (j, w) in weights.iter().enumerate() {
                let agg: f64 = (0..n).map(|k| a.at(i, k) * drivers[t][j][k]).sum();
                v += w * agg;
            }
            y[t + 1][i] = v;
        }
    }

    let train_end = (spec.train_frac * t_len as f64) as usize;
    let val_end = ((spec.train_frac + spec.val_frac) * t_len as f64) as usize;
    let segs = spec.train_noise.len();
    let noise_at = |t: usize| {
        if t < train_end {
            spec.train_noise[(t * segs / train_end.max(1)).min(segs - 1)]
        } else if t < val_end {
            *spec.train_noise.last().expect("non-empty")
        } else {
            spec.test_noise
        }
    };

    let mut series = Vec::with_capacity(t_len * n * f);
    for t in 0..t_len {
        let scale = noise_at(t);
        for i in 0..n {
            series.push(y[t][i]);
            for j in 0..spec.n_causal {
                series.push(drivers[t][j][i]);
            }
            for _ in 0..spec.n_spurious {
                series.push(y[t + 1][i] + scale * gauss());
            }
        }
    }
    let mut names = vec!["target".to_string()];
    names.extend((0..spec.n_causal).map(|j| format!("cause_{j}")));
    names.extend((0..spec.n_spurious).map(|j| format!("spurious_{j}")));
    let stamps = (0..t_len).map(|t| t.to_string()).collect();
    let dataset = StDataset::new(graph, series, names, stamps, spec.tau, spec.horizon)?;
    let test_frac = 1.0 - spec.train_frac - spec.val_frac;
    Ok(GraphScm {
        dataset,
        split: SplitSpec::Fractions { train: spec.train_frac, val: spec.val_frac, test: test_frac },
        causal: (0..=spec.n_causal).collect(),
        spurious: (spec.n_causal + 1..f).collect(),
    })
}

fn corr(a: &[f64], b: &[f64]) -> f64 {
    cov(a, b) / (cov(a, a) * cov(b, b)).sqrt()
}

/// Absolute correlation of each channel's last observed lag with the first
/// target step, over training windows.
pub fn channel_correlations(scm: &GraphScm) -> Result<Vec<f64>> {
    let cfg = TrainConfig {
        tau: scm.dataset.tau,
        horizon: scm.dataset.horizon,
        standardize: false,
        method: Method::Erm,
        ..TrainConfig::default()
    };
    let prep = prepare(&scm.dataset, &scm.split, &cfg)?;
    let w = &prep.data.train;
    let f = w.n_features;
    let last = (w.tau - 1) * f;
    let mut cols = vec![Vec::new(); f];
    let mut target = Vec::new();
    for i in 0..w.len() {
        for node in 0..w.n_nodes {
            let row = &w.window_x(i)[node * w.feat_dim()..(node + 1) * w.feat_dim()];
            for (c, col) in cols.iter_mut().enumerate() {
                col.push(row[last + c]);
            }
            target.push(w.window_y(i)[node * w.horizon]);
        }
    }
    Ok(cols.iter().map(|c| corr(c, &target).abs()).collect())
}

/// Passes when the spurious channels are more correlated with the target
/// than every causal channel on training data.
pub fn audit_fixture(scm: &GraphScm) -> Result<(bool, Vec<f64>)> {
    let c = channel_correlations(scm)?;
    let best_causal = scm.causal.iter().map(|&i| c[i]).fold(0.0, f64::max);
    let worst_spurious = scm.spurious.iter().map(|&i| c[i]).fold(f64::INFINITY, f64::min);
    Ok((worst_spurious > best_causal, c))
}

/// Training setup used for the graph benchmark.
pub fn graph_train_config(spec: &GraphScmSpec, method: Method, seed: u64) -> TrainConfig {
    TrainConfig {
        method,
        backbone: Backbone::StgcnLite,
        tau: spec.tau,
        horizon: spec.horizon,
        iterations: 1500,
        batch_size: 16,
        lr_theta: 3e-3,
        lr_phi: 3e-3,
        lr_psi: 1e-3,
        lambda: 1.0,
        seed,
        eval_every: 100,
        ..TrainConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphRun {
    pub method: Method,
    pub seed: u64,
    pub test_mae: f64,
    pub test_rmse: f64,
    /// Causal minus spurious mean mask value, for methods with a learned mask.
    pub mask_gap: Option<f64>,
}

/// Trains one method on the fixture and scores it on the test split.
pub fn run_graph_method(scm: &GraphScm, cfg: TrainConfig) -> Result<(GraphRun, Checkpoint)> {
    let prep = prepare(&scm.dataset, &scm.split, &cfg)?;
    let (method, seed) = (cfg.method, cfg.seed);
    let ck = train(cfg, &prep.data)?;
    let used = ck.best_params();
    let table = evaluate(&used.predictor, &used.theta, &prep.test, &prep.data.a_hat, &used.standardizer)?;
    let mask_gap = match &used.phi {
        Some(_) => {
            let rep = mask_report(&used, &prep.data.train)?;
            Some(rep.mean_of(&scm.causal) - rep.mean_of(&scm.spurious))
        }
        None => None,
    };
    Ok((
        GraphRun { method, seed, test_mae: table.average.mae, test_rmse: table.average.rmse, mask_gap },
        ck,
    ))
}

pub fn write_runs_csv(runs: &[GraphRun], out: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "seed", "test_mae", "test_rmse", "mask_gap"])?;
    for r in runs {
        w.write_record([
            r.method.to_string(),
            r.seed.to_string(),
            format!("{:.6}", r.test_mae),
            format!("{:.6}", r.test_rmse),
            r.mask_gap.map_or(String::new(), |g| format!("{g:.6}")),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
