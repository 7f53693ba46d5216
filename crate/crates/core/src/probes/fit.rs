//! Linear and two-layer MLP probes on frozen activations.
//!
//! Inputs are standardized with statistics from the training set and both
//! probe kinds carry output biases. Training uses AdamW on minibatches with
//! early stopping on a validation split, keeping the best parameters.

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ProbeError;
use crate::model::{gemm, AdamW, Mat, MatMut, OptimState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Linear,
    Mlp,
}

impl ProbeKind {
    pub fn name(self) -> &'static str {
        match self {
            ProbeKind::Linear => "linear",
            ProbeKind::Mlp => "mlp",
        }
    }
}

/// Row-major feature matrix with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Vec<f64>,
    pub features: usize,
    pub targets: Targets,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Class { labels: Vec<usize>, classes: usize },
    Value(Vec<f64>),
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.len().checked_div(self.features).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn outputs(&self) -> usize {
        match &self.targets {
            Targets::Class { classes, .. } => *classes,
            Targets::Value(_) => 1,
        }
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        let f = self.features;
        let x = idx.iter().flat_map(|&i| self.x[i * f..(i + 1) * f].iter().copied()).collect();
        let targets = match &self.targets {
            Targets::Class { labels, classes } => {
                Targets::Class { labels: idx.iter().map(|&i| labels[i]).collect(), classes: *classes }
            }
            Targets::Value(v) => Targets::Value(idx.iter().map(|&i| v[i]).collect()),
        };
        Dataset { x, features: f, targets }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeHyper {
    pub hidden: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for ProbeHyper {
    fn default() -> Self {
        ProbeHyper { hidden: 256, lr: 1e-3, weight_decay: 0.0, batch: 128, max_epochs: 200, patience: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    fn fit(x: &[f64], f: usize) -> Standardizer {
        let n = (x.len() / f).max(1) as f64;
        let mut mean = vec![0.0; f];
        for row in x.chunks_exact(f) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; f];
        for row in x.chunks_exact(f) {
            for j in 0..f {
                var[j] += (row[j] - mean[j]).powi(2) / n;
            }
        }
        let scale = var.iter().map(|&v| if v > 1e-12 { 1.0 / v.sqrt() } else { 1.0 }).collect();
        Standardizer { mean, scale }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let f = self.mean.len();
        let mut out = x.to_vec();
        for row in out.chunks_exact_mut(f) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) * s;
            }
        }
        out
    }
}

/// A fitted probe. Parameters are stored flat: `[w, b]` for linear probes
/// (`w` is `C x F`), `[w2, b2, w1, b1]` for MLPs (`w2` is `H x F`, `w1`
/// is `C x H`), so a prediction is `argmax(w1 relu(w2 x + b2) + b1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub kind: ProbeKind,
    pub features: usize,
    pub hidden: usize,
    pub outputs: usize,
    pub classify: bool,
    pub standardizer: Standardizer,
    pub params: Vec<f64>,
}

struct Shapes {
    f: usize,
    h: usize,
    c: usize,
}

impl Shapes {
    fn total(&self, kind: ProbeKind) -> usize {
        match kind {
            ProbeKind::Linear => self.c * self.f + self.c,
            ProbeKind::Mlp => self.h * self.f + self.h + self.c * self.h + self.c,
        }
    }
}

fn add_rows(m: &mut [f64], bias: &[f64]) {
    for row in m.chunks_exact_mut(bias.len()) {
        for (x, &b) in row.iter_mut().zip(bias) {
            *x += b;
        }
    }
}

fn col_sums(m: &[f64], cols: usize, out: &mut [f64]) {
    for row in m.chunks_exact(cols) {
        for (o, &x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
}

impl Probe {
    fn shapes(&self) -> Shapes {
        Shapes { f: self.features, h: self.hidden, c: self.outputs }
    }

    /// Raw outputs for standardized inputs; also returns the hidden
    /// pre-activations of an MLP.
    fn forward_std(&self, xs: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let Shapes { f, h, c } = self.shapes();
        let n = xs.len() / f;
        let p = &self.params;
        let mut z = vec![0.0; n * c];
        match self.kind {
            ProbeKind::Linear => {
                let (w, b) = p.split_at(c * f);
                gemm(1.0, Mat::new(xs, n, f), Mat::new(w, c, f).t(), 0.0, MatMut::new(&mut z, n, c));
                add_rows(&mut z, b);
                (z, Vec::new())
            }
            ProbeKind::Mlp => {
                let (w2, rest) = p.split_at(h * f);
                let (b2, rest) = rest.split_at(h);
                let (w1, b1) = rest.split_at(c * h);
                let mut a = vec![0.0; n * h];
                gemm(1.0, Mat::new(xs, n, f), Mat::new(w2, h, f).t(), 0.0, MatMut::new(&mut a, n, h));
                add_rows(&mut a, b2);
                let r: Vec<f64> = a.iter().map(|&v| v.max(0.0)).collect();
                gemm(1.0, Mat::new(&r, n, h), Mat::new(w1, c, h).t(), 0.0, MatMut::new(&mut z, n, c));
                add_rows(&mut z, b1);
                (z, a)
            }
        }
    }

    /// Raw outputs (`N x C`) for unstandardized rows.
    pub fn outputs(&self, x: &[f64]) -> Vec<f64> {
        self.forward_std(&self.standardizer.apply(x)).0
    }

    pub fn predict_classes(&self, x: &[f64]) -> Vec<usize> {
        let c = self.outputs;
        self.outputs(x)
            .chunks_exact(c)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    pub fn predict_values(&self, x: &[f64]) -> Vec<f64> {
        self.outputs(x)
    }

    /// Mean loss on standardized rows and, when asked, its gradient.
    fn loss_grad(&self, xs: &[f64], targets: &Targets, idx: &[usize], want_grad: bool) -> (f64, Vec<f64>) {
        let Shapes { f, h, c } = self.shapes();
        let n = idx.len();
        let xb: Vec<f64> = idx.iter().flat_map(|&i| xs[i * f..(i + 1) * f].iter().copied()).collect();
        let (z, a) = self.forward_std(&xb);
        let mut dz = vec![0.0; n * c];
        let mut loss = 0.0;
        let inv = 1.0 / n as f64;
        match targets {
            Targets::Class { labels, .. } => {
                for (k, &i) in idx.iter().enumerate() {
                    let row = &z[k * c..(k + 1) * c];
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                    let y = labels[i];
                    loss += (sum.ln() + max - row[y]) * inv;
                    for j in 0..c {
                        dz[k * c + j] = ((row[j] - max).exp() / sum - if j == y { 1.0 } else { 0.0 }) * inv;
                    }
                }
            }
            Targets::Value(v) => {
                for (k, &i) in idx.iter().enumerate() {
                    let e = z[k] - v[i];
                    loss += e * e * inv;
                    dz[k] = 2.0 * e * inv;
                }
            }
        }
        if !want_grad {
            return (loss, Vec::new());
        }
        let mut g = vec![0.0; self.params.len()];
        match self.kind {
            ProbeKind::Linear => {
                let (gw, gb) = g.split_at_mut(c * f);
                gemm(1.0, Mat::new(&dz, n, c).t(), Mat::new(&xb, n, f), 0.0, MatMut::new(gw, c, f));
                col_sums(&dz, c, gb);
            }
            ProbeKind::Mlp => {
                let w1 = &self.params[h * f + h..h * f + h + c * h];
                let r: Vec<f64> = a.iter().map(|&v| v.max(0.0)).collect();
                let (gw2, rest) = g.split_at_mut(h * f);
                let (gb2, rest) = rest.split_at_mut(h);
                let (gw1, gb1) = rest.split_at_mut(c * h);
                gemm(1.0, Mat::new(&dz, n, c).t(), Mat::new(&r, n, h), 0.0, MatMut::new(gw1, c, h));
                col_sums(&dz, c, gb1);
                let mut da = vec![0.0; n * h];
                gemm(1.0, Mat::new(&dz, n, c), Mat::new(w1, c, h), 0.0, MatMut::new(&mut da, n, h));
                for (d, &pre) in da.iter_mut().zip(&a) {
                    if pre <= 0.0 {
                        *d = 0.0;
                    }
                }
                gemm(1.0, Mat::new(&da, n, h).t(), Mat::new(&xb, n, f), 0.0, MatMut::new(gw2, h, f));
                col_sums(&da, h, gb2);
            }
        }
        (loss, g)
    }
}

/// Fits a probe on `train`, early-stopping on `val`. Deterministic per seed.
pub fn train_probe(
    kind: ProbeKind,
    train: &Dataset,
    val: &Dataset,
    seed: u64,
    hyper: &ProbeHyper,
) -> Result<Probe, ProbeError> {
    if train.is_empty() {
        return Err(ProbeError::Degenerate("empty training set".into()));
    }
    if let Targets::Class { labels, .. } = &train.targets {
        if labels.iter().all(|&l| l == labels[0]) {
            return Err(ProbeError::Degenerate("training set has a single class".into()));
        }
    }
    let f = train.features;
    let shapes = Shapes { f, h: hyper.hidden, c: train.outputs() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = vec![0.0; shapes.total(kind)];
    let mut init = |slot: &mut [f64], fan_in: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for x in slot {
            *x = rng.random_range(-bound..bound);
        }
    };
    match kind {
        ProbeKind::Linear => init(&mut params[..shapes.c * f], f),
        ProbeKind::Mlp => {
            let h = shapes.h;
            init(&mut params[..h * f], f);
            init(&mut params[h * f + h..h * f + h + shapes.c * h], h);
        }
    }
    if let Targets::Value(v) = &train.targets {
        let last = params.len() - 1;
        params[last] = v.iter().sum::<f64>() / v.len() as f64;
    }
    let standardizer = Standardizer::fit(&train.x, f);
    let xs_train = standardizer.apply(&train.x);
    let xs_val = standardizer.apply(&val.x);
    let mut probe = Probe {
        kind,
        features: f,
        hidden: if kind == ProbeKind::Mlp { hyper.hidden } else { 0 },
        outputs: shapes.c,
        classify: matches!(train.targets, Targets::Class { .. }),
        standardizer,
        params,
    };
    let val_idx: Vec<usize> = (0..val.len()).collect();
    let val_loss = |p: &Probe| if val.is_empty() { 0.0 } else { p.loss_grad(&xs_val, &val.targets, &val_idx, false).0 };
    let groups = vec![(0..probe.params.len(), true)];
    let mut optim = OptimState::new(
        probe.params.len(),
        AdamW { lr: hyper.lr, weight_decay: hyper.weight_decay, ..AdamW::default() },
    );
    let mut best = (val_loss(&probe), probe.params.clone());
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..hyper.max_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(hyper.batch.max(1)) {
            let (_, g) = probe.loss_grad(&xs_train, &train.targets, batch, true);
            optim.update(&mut probe.params, &g, &groups);
        }
        let v = val_loss(&probe);
        if !v.is_finite() {
            return Err(ProbeError::Degenerate("non-finite validation loss".into()));
        }
        if v < best.0 {
            best = (v, probe.params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= hyper.patience || val.is_empty() {
                break;
            }
        }
    }
    if !val.is_empty() {
        probe.params = best.1;
    }
    Ok(probe)
}

/// Splits row indices into (train, val) with a seeded shuffle.
pub fn split_rows(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let (val, train) = idx.split_at(n_val.min(n));
    let (mut train, mut val) = (train.to_vec(), val.to_vec());
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

pub(super) fn subset(d: &Dataset, idx: &[usize]) -> Dataset {
    d.subset(idx)
}
