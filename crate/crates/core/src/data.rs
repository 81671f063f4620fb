//! Spatiotemporal datasets, sliding windows and temporal splits.

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

/// Node-feature time series over a fixed graph.
#[derive(Clone, Debug, PartialEq)]
pub struct StDataset {
    pub graph: Graph,
    /// `T x N x F`, row-major.
    series: Vec<f64>,
    pub feature_names: Vec<String>,
    pub timestamps: Vec<String>,
    pub tau: usize,
    pub horizon: usize,
    pub target_channel: usize,
    /// External node identifiers, index-aligned with the graph.
    pub node_ids: Vec<String>,
}

impl StDataset {
    pub fn new(
        graph: Graph,
        series: Vec<f64>,
        feature_names: Vec<String>,
        timestamps: Vec<String>,
        tau: usize,
        horizon: usize,
    ) -> Result<Self> {
        let (t, n, f) = (timestamps.len(), graph.n_nodes(), feature_names.len());
        if f == 0 {
            return contract_err("dataset needs at least one feature");
        }
        if series.len() != t * n * f {
            return dim_err(format!("series has {} values, expected {t}x{n}x{f}", series.len()));
        }
        if series.iter().any(|v| !v.is_finite()) {
            return contract_err("series contains non-finite values");
        }
        if tau == 0 || horizon == 0 {
            return contract_err("history and horizon lengths must be positive");
        }
        let node_ids = (0..n).map(|i| i.to_string()).collect();
        Ok(Self { graph, series, feature_names, timestamps, tau, horizon, target_channel: 0, node_ids })
    }

    pub fn with_node_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.n_nodes() {
            return dim_err(format!("{} node ids for {} nodes", ids.len(), self.n_nodes()));
        }
        self.node_ids = ids;
        Ok(self)
    }

    pub fn with_target_channel(mut self, c: usize) -> Result<Self> {
        if c >= self.n_features() {
            return contract_err(format!("target channel {c} out of {} features", self.n_features()));
        }
        self.target_channel = c;
        Ok(self)
    }

    pub fn n_steps(&self) -> usize {
        self.timestamps.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.graph.n_nodes()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn series(&self) -> &[f64] {
        &self.series
    }

    pub fn value(&self, t: usize, node: usize, feat: usize) -> f64 {
        let (n, f) = (self.n_nodes(), self.n_features());
        self.series[(t * n + node) * f + feat]
    }

    /// Series shape as `[T, N, F]`.
    pub fn shape(&self) -> [usize; 3] {
        [self.n_steps(), self.n_nodes(), self.n_features()]
    }
}

/// Stacked `(X, Y)` pairs: `X` is `N x tau x F`, `Y` is `N x horizon`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSet {
    pub n_nodes: usize,
    pub tau: usize,
    pub n_features: usize,
    pub horizon: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    /// Time index of each window's first history step.
    pub start: Vec<usize>,
}

impl WindowSet {
    pub fn new(
        n_nodes: usize,
        tau: usize,
        n_features: usize,
        horizon: usize,
        x: Vec<f64>,
        y: Vec<f64>,
        start: Vec<usize>,
    ) -> Result<Self> {
        let w = start.len();
        if x.len() != w * n_nodes * tau * n_features || y.len() != w * n_nodes * horizon {
            return dim_err("window buffers do not match the declared layout");
        }
        Ok(Self { n_nodes, tau, n_features, horizon, x, y, start })
    }

    pub fn len(&self) -> usize {
        self.start.len()
    }

    pub fn is_empty(&self) -> bool {
        self.start.is_empty()
    }

    /// Row length of one node's flattened history.
    pub fn feat_dim(&self) -> usize {
        self.tau * self.n_features
    }

    pub fn x_len(&self) -> usize {
        self.n_nodes * self.feat_dim()
    }

    pub fn y_len(&self) -> usize {
        self.n_nodes * self.horizon
    }

    pub fn window_x(&self, i: usize) -> &[f64] {
        let s = self.x_len();
        &self.x[i * s..(i + 1) * s]
    }

    pub fn window_y(&self, i: usize) -> &[f64] {
        let s = self.y_len();
        &self.y[i * s..(i + 1) * s]
    }

    pub fn x_all(&self) -> &[f64] {
        &self.x
    }

    pub fn y_all(&self) -> &[f64] {
        &self.y
    }

    /// Last time index touched by window `i` (its final target step).
    pub fn end(&self, i: usize) -> usize {
        self.start[i] + self.tau + self.horizon - 1
    }

    /// Stacks the selected windows as `[B*N, tau*F]` and `[B*N, horizon]` matrices.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Tensor) {
        let (sx, sy) = (self.x_len(), self.y_len());
        let mut x = Vec::with_capacity(idx.len() * sx);
        let mut y = Vec::with_capacity(idx.len() * sy);
        for &i in idx {
            x.extend_from_slice(self.window_x(i));
            y.extend_from_slice(self.window_y(i));
        }
        let rows = idx.len() * self.n_nodes;
        (
            Tensor::from_raw(vec![rows, self.feat_dim()], x),
            Tensor::from_raw(vec![rows, self.horizon], y),
        )
    }

    pub fn all(&self) -> (Tensor, Tensor) {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> WindowSet {
        let (sx, sy) = (self.x_len(), self.y_len());
        WindowSet {
            n_nodes: self.n_nodes,
            tau: self.tau,
            n_features: self.n_features,
            horizon: self.horizon,
            x: self.x[range.start * sx..range.end * sx].to_vec(),
            y: self.y[range.start * sy..range.end * sy].to_vec(),
            start: self.start[range].to_vec(),
        }
    }

    /// Keeps only the listed feature channels, in the given order.
    pub fn select_channels(&self, channels: &[usize]) -> Result<WindowSet> {
        if channels.is_empty() || channels.iter().any(|&c| c >= self.n_features) {
            return contract_err(format!("invalid channel selection {channels:?}"));
        }
        let f = self.n_features;
        let x = self
            .x
            .chunks(f)
            .flat_map(|step| channels.iter().map(move |&c| step[c]))
            .collect();
        Ok(WindowSet { n_features: channels.len(), x, ..self.clone() })
    }

    pub fn map_x(&mut self, f: impl Fn(usize, f64) -> f64) {
        let nf = self.n_features;
        for (i, v) in self.x.iter_mut().enumerate() {
            *v = f(i % nf, *v);
        }
    }

    pub fn map_y(&mut self, f: impl Fn(f64) -> f64) {
        for v in &mut self.y {
            *v = f(*v);
        }
    }

    /// Concatenates window sets that share a layout.
    pub fn concat(parts: &[&WindowSet]) -> Result<WindowSet> {
        let first = parts.first().ok_or_else(|| crate::Error::Contract("nothing to concatenate".into()))?;
        let mut out = (*first).clone();
        for p in &parts[1..] {
            if (p.n_nodes, p.tau, p.n_features, p.horizon)
                != (out.n_nodes, out.tau, out.n_features, out.horizon)
            {
                return dim_err("window layouts differ");
            }
            out.x.extend_from_slice(&p.x);
            out.y.extend_from_slice(&p.y);
            out.start.extend_from_slice(&p.start);
        }
        Ok(out)
    }
}

/// Slides a `tau + horizon` window over the series in temporal order.
pub fn make_windows(ds: &StDataset) -> Result<WindowSet> {
    windows_in_range(ds, 0, ds.n_steps())
}

/// Windows that lie entirely inside time steps `[from, to)`.
pub fn windows_in_range(ds: &StDataset, from: usize, to: usize) -> Result<WindowSet> {
    let (tau, hz) = (ds.tau, ds.horizon);
    let span = to.saturating_sub(from);
    if span < tau + hz {
        return contract_err(format!(
            "{span} time steps cannot hold a window of history {tau} and horizon {hz}"
        ));
    }
    let (n, f) = (ds.n_nodes(), ds.n_features());
    let count = span - tau - hz + 1;
    let mut x = Vec::with_capacity(count * n * tau * f);
    let mut y = Vec::with_capacity(count * n * hz);
    let mut start = Vec::with_capacity(count);
    for s in from..from + count {
        for node in 0..n {
            for t in s..s + tau {
                for c in 0..f {
                    x.push(ds.value(t, node, c));
                }
            }
        }
        for node in 0..n {
            for t in s + tau..s + tau + hz {
                y.push(ds.value(t, node, ds.target_channel));
            }
        }
        start.push(s);
    }
    WindowSet::new(n, tau, f, hz, x, y, start)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitSpec {
    /// Fractions of the window count; flooring remainders go to train.
    Fractions { train: f64, val: f64, test: f64 },
    /// Absolute time-step counts: the first `train` steps, the `val` steps
    /// before the final `test` steps, and the final `test` steps.
    Steps { train: usize, val: usize, test: usize },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Fractions { train: 0.6, val: 0.2, test: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
}

/// Window counts for a fractional split.
pub fn split_counts(n: usize, train: f64, val: f64, test: f64) -> Result<(usize, usize, usize)> {
    if [train, val, test].iter().any(|f| !(0.0..=1.0).contains(f)) {
        return contract_err("split fractions must lie in [0, 1]");
    }
    if (train + val + test - 1.0).abs() > 1e-9 {
        return contract_err(format!("split fractions sum to {}, not 1", train + val + test));
    }
    let floor = |f: f64| (f * n as f64 + 1e-9).floor() as usize;
    let (v, t) = (floor(val), floor(test));
    let tr = n - v - t;
    if tr == 0 || v == 0 || t == 0 {
        return contract_err(format!("split of {n} windows leaves an empty partition ({tr}/{v}/{t})"));
    }
    Ok((tr, v, t))
}

/// Contiguous temporal partition of the windows into train/val/test.
pub fn temporal_split(ds: &StDataset, spec: &SplitSpec) -> Result<Splits> {
    let splits = match *spec {
        SplitSpec::Fractions { train, val, test } => {
            let all = make_windows(ds)?;
            let (tr, v, _) = split_counts(all.len(), train, val, test)?;
            Splits {
                train: all.slice(0..tr),
                val: all.slice(tr..tr + v),
                test: all.slice(tr + v..all.len()),
            }
        }
        SplitSpec::Steps { train, val, test } => {
            let t = ds.n_steps();
            if train + val + test > t {
                return contract_err(format!("{train}+{val}+{test} steps exceed series length {t}"));
            }
            Splits {
                train: windows_in_range(ds, 0, train)?,
                val: windows_in_range(ds, t - test - val, t - test)?,
                test: windows_in_range(ds, t - test, t)?,
            }
        }
    };
    let train_end = splits.train.end(splits.train.len() - 1);
    if train_end >= splits.test.start[0] {
        return contract_err(format!(
            "train windows reach step {train_end} but test starts at {}; validation span too short",
            splits.test.start[0]
        ));
    }
    Ok(splits)
}

/// Per-channel standardization fitted on training windows only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (mut n, mut s) = (0usize, 0.0);
    for v in values.clone() {
        n += 1;
        s += v;
    }
    let m = s / n.max(1) as f64;
    let var = values.map(|v| (v - m) * (v - m)).sum::<f64>() / n.max(1) as f64;
    let sd = var.sqrt();
    (m, if sd > 1e-12 { sd } else { 1.0 })
}

impl Standardizer {
    pub fn fit(train: &WindowSet) -> Self {
        let f = train.n_features;
        let (x_mean, x_std) = (0..f)
            .map(|c| mean_std(train.x.iter().skip(c).step_by(f).copied()))
            .unzip();
        let (y_mean, y_std) = mean_std(train.y.iter().copied());
        Self { x_mean, x_std, y_mean, y_std }
    }

    pub fn identity(n_features: usize) -> Self {
        Self { x_mean: vec![0.0; n_features], x_std: vec![1.0; n_features], y_mean: 0.0, y_std: 1.0 }
    }

    pub fn apply(&self, w: &WindowSet) -> WindowSet {
        let mut out = w.clone();
        out.map_x(|c, v| (v - self.x_mean[c]) / self.x_std[c]);
        out.map_y(|v| (v - self.y_mean) / self.y_std);
        out
    }

    pub fn restore_y(&self, v: f64) -> f64 {
        v * self.y_std + self.y_mean
    }
}
