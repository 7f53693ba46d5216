//! Pre-norm GPT: token and position embeddings, `layers` blocks of
//! (LN, causal multi-head attention, residual, LN, GELU MLP, residual), a
//! final LN and an untied unembedding without bias. Gradients are derived by
//! hand.
//!
//! Several sequences can be run together; their tokens are stacked as rows
//! and attention is applied per sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::linalg::{add_bias, add_col_sums, add_into, gemm, Mat, MatMut, Real, Tensor};
use super::ModelError;
use crate::tokenizer::{TokenId, TokenizedExample};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub mlp_dim: usize,
    pub context_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// 4 layers, 4 heads, width 128, MLP 512, context 256.
    pub fn toy(vocab_size: usize) -> ModelConfig {
        ModelConfig { layers: 4, heads: 4, model_dim: 128, mlp_dim: 512, context_len: 256, vocab_size, seed: 0 }
    }

    /// GPT-2 base shape: 12 layers, 12 heads, width 768.
    pub fn gpt2_base(vocab_size: usize) -> ModelConfig {
        ModelConfig { layers: 12, heads: 12, model_dim: 768, mlp_dim: 3072, context_len: 1024, vocab_size, seed: 0 }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let c = self;
        if c.layers == 0
            || c.heads == 0
            || c.model_dim == 0
            || c.mlp_dim == 0
            || c.context_len == 0
            || c.vocab_size == 0
        {
            return Err(ModelError::Config("all dimensions must be positive".into()));
        }
        if !c.model_dim.is_multiple_of(c.heads) {
            return Err(ModelError::Config(format!("model_dim {} not divisible by heads {}", c.model_dim, c.heads)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockParams {
    ln1_g: usize,
    ln1_b: usize,
    w_qkv: usize,
    b_qkv: usize,
    w_o: usize,
    b_o: usize,
    ln2_g: usize,
    ln2_b: usize,
    w_fc: usize,
    b_fc: usize,
    w_proj: usize,
    b_proj: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    params: Vec<ParamInfo>,
    wte: usize,
    wpe: usize,
    blocks: Vec<BlockParams>,
    lnf_g: usize,
    lnf_b: usize,
    w_out: usize,
    total: usize,
}

impl Layout {
    fn new(c: &ModelConfig) -> Layout {
        let mut params: Vec<ParamInfo> = Vec::new();
        let mut total = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let offset = total;
            total += shape.iter().product::<usize>();
            params.push(ParamInfo { name, shape, offset });
            offset
        };
        let (d, m) = (c.model_dim, c.mlp_dim);
        let wte = push("wte".into(), vec![c.vocab_size, d]);
        let wpe = push("wpe".into(), vec![c.context_len, d]);
        let blocks = (0..c.layers)
            .map(|l| {
                let mut p = |n: &str, shape: Vec<usize>| push(format!("h{l}.{n}"), shape);
                BlockParams {
                    ln1_g: p("ln1.g", vec![d]),
                    ln1_b: p("ln1.b", vec![d]),
                    w_qkv: p("attn.w_qkv", vec![d, 3 * d]),
                    b_qkv: p("attn.b_qkv", vec![3 * d]),
                    w_o: p("attn.w_o", vec![d, d]),
                    b_o: p("attn.b_o", vec![d]),
                    ln2_g: p("ln2.g", vec![d]),
                    ln2_b: p("ln2.b", vec![d]),
                    w_fc: p("mlp.w_fc", vec![d, m]),
                    b_fc: p("mlp.b_fc", vec![m]),
                    w_proj: p("mlp.w_proj", vec![m, d]),
                    b_proj: p("mlp.b_proj", vec![d]),
                }
            })
            .collect();
        let lnf_g = push("lnf.g".into(), vec![d]);
        let lnf_b = push("lnf.b".into(), vec![d]);
        let w_out = push("w_out".into(), vec![d, c.vocab_size]);
        Layout { params, wte, wpe, blocks, lnf_g, lnf_b, w_out, total }
    }
}

/// Model parameters, stored as one flat vector in [`Gpt::param_info`] order.
#[derive(Debug, Clone)]
pub struct Gpt<T> {
    cfg: ModelConfig,
    layout: Layout,
    pub params: Vec<T>,
}

/// Sequence starts, lengths, concatenated ids and embedded rows of a packed batch.
type Embedded<T> = (Vec<usize>, Vec<usize>, Vec<TokenId>, Vec<T>);

struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
    out: Vec<T>,
}

struct BlockCache<T> {
    ln1: LnCache<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    att: Vec<T>,
    ln2: LnCache<T>,
    h_pre: Vec<T>,
    h_tanh: Vec<T>,
    h_act: Vec<T>,
}

/// Forward intermediates needed by [`Gpt::backward`].
pub struct Trace<T> {
    starts: Vec<usize>,
    lens: Vec<usize>,
    ids: Vec<TokenId>,
    /// Residual stream: embeddings, then the output of every block.
    xs: Vec<Vec<T>>,
    blocks: Vec<BlockCache<T>>,
    rows: Vec<usize>,
    lnf: LnCache<T>,
}

impl<T> Trace<T> {
    /// Output of block `layer` (row-major, one row per token).
    pub fn block_output(&self, layer: usize) -> &[T] {
        &self.xs[layer + 1]
    }

    /// First row of each sequence.
    pub fn starts(&self) -> &[usize] {
        &self.starts
    }
}

fn layer_norm<T: Real>(x: &[T], g: &[T], b: &[T], d: usize) -> LnCache<T> {
    let n = x.len() / d;
    let (mut xhat, mut rstd, mut out) = (vec![T::zero(); x.len()], vec![T::zero(); n], vec![T::zero(); x.len()]);
    let inv_d = T::lit(1.0 / d as f64);
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + T::lit(LN_EPS)).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = h * g[j] + b[j];
        }
    }
    LnCache { xhat, rstd, out }
}

/// Accumulates the LN input gradient into `dx` and parameter grads into
/// `dg`, `db`.
fn layer_norm_backward<T: Real>(dout: &[T], c: &LnCache<T>, g: &[T], dx: &mut [T], dg: &mut [T], db: &mut [T]) {
    let d = g.len();
    let inv_d = T::lit(1.0 / d as f64);
    for r in 0..c.rstd.len() {
        let dy = &dout[r * d..(r + 1) * d];
        let xh = &c.xhat[r * d..(r + 1) * d];
        let (mut m1, mut m2) = (T::zero(), T::zero());
        for j in 0..d {
            let gd = dy[j] * g[j];
            m1 = m1 + gd;
            m2 = m2 + gd * xh[j];
            dg[j] = dg[j] + dy[j] * xh[j];
            db[j] = db[j] + dy[j];
        }
        m1 = m1 * inv_d;
        m2 = m2 * inv_d;
        let rs = c.rstd[r];
        for j in 0..d {
            let v = &mut dx[r * d + j];
            *v = *v + rs * (dy[j] * g[j] - m1 - xh[j] * m2);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044715;

/// `tanh(u)` computed as `1 - 2 / (exp(2u) + 1)`.
fn fast_tanh<T: Real>(u: T) -> T {
    T::one() - T::lit(2.0) / ((u + u).exp() + T::one())
}

/// Tanh-approximated GELU. Returns the activation and the inner tanh,
/// which the backward pass reuses.
fn gelu<T: Real>(x: T) -> (T, T) {
    let t = fast_tanh(T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x));
    (T::lit(0.5) * x * (T::one() + t), t)
}

fn gelu_grad<T: Real>(x: T, t: T) -> T {
    let half = T::lit(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x)
}

/// Row-wise softmax cross-entropy. Returns the summed loss and
/// `scale * d(sum)/d(logits)`.
fn cross_entropy<T: Real>(logits: &[T], targets: &[TokenId], v: usize, scale: T) -> (f64, Vec<T>) {
    let mut grad = vec![T::zero(); logits.len()];
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = &logits[r * v..(r + 1) * v];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let g = &mut grad[r * v..(r + 1) * v];
        let mut sum = T::zero();
        for (gj, &x) in g.iter_mut().zip(row) {
            *gj = (x - max).exp();
            sum = sum + *gj;
        }
        total += (sum.ln() + max - row[t as usize]).to_f64().unwrap_or(f64::NAN);
        for gj in g.iter_mut() {
            *gj = *gj / sum * scale;
        }
        g[t as usize] = g[t as usize] - scale;
    }
    (total, grad)
}

/// Rows predicted under the shifted convention: the logits at `i - 1`
/// predict the token at `i` wherever `loss_mask[i]` holds.
fn masked_rows(target_ids: &[TokenId], loss_mask: &[bool]) -> (Vec<usize>, Vec<TokenId>) {
    assert_eq!(target_ids.len(), loss_mask.len(), "targets and mask differ in length");
    assert!(!loss_mask.first().copied().unwrap_or(false), "position 0 has no preceding context");
    (0..loss_mask.len()).filter(|&i| loss_mask[i]).map(|i| (i - 1, target_ids[i])).unzip()
}

/// Mean cross-entropy over the masked positions and its gradient with
/// respect to `logits` (`[seq, vocab]`). With no masked position the loss
/// is 0 and the gradient is zero.
pub fn masked_loss_and_grad<T: Real>(
    logits: &Tensor<T>,
    target_ids: &[TokenId],
    loss_mask: &[bool],
) -> (T, Tensor<T>, usize) {
    let v = logits.shape[1];
    let (rows, targets) = masked_rows(target_ids, loss_mask);
    let mut dlogits = Tensor::zeros(logits.shape.clone());
    if rows.is_empty() {
        return (T::zero(), dlogits, 0);
    }
    let gathered: Vec<T> = rows.iter().flat_map(|&r| logits.row(r).iter().copied()).collect();
    let scale = T::lit(1.0 / rows.len() as f64);
    let (sum, g) = cross_entropy(&gathered, &targets, v, scale);
    for (k, &r) in rows.iter().enumerate() {
        dlogits.data[r * v..(r + 1) * v].copy_from_slice(&g[k * v..(k + 1) * v]);
    }
    (T::lit(sum / rows.len() as f64), dlogits, rows.len())
}

pub fn masked_loss<T: Real>(logits: &Tensor<T>, target_ids: &[TokenId], loss_mask: &[bool]) -> T {
    masked_loss_and_grad(logits, target_ids, loss_mask).0
}

impl<T: Real> Gpt<T> {
    /// Weights drawn from N(0, 0.02) with `cfg.seed`; LN gains 1, biases 0.
    pub fn new(cfg: ModelConfig) -> Result<Gpt<T>, ModelError> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let mut params = vec![T::zero(); layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for p in &layout.params {
            let slot = &mut params[p.range()];
            if p.name.ends_with(".g") {
                slot.fill(T::one());
            } else if p.shape.len() == 2 {
                for x in slot {
                    *x = T::lit(normal.sample(&mut rng));
                }
            }
        }
        Ok(Gpt { cfg, layout, params })
    }

    /// All parameters zero.
    pub fn zeros(cfg: ModelConfig) -> Result<Gpt<T>, ModelError> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        Ok(Gpt { cfg, params: vec![T::zero(); layout.total], layout })
    }

    /// Rebuilds a model from a flat parameter vector.
    pub fn from_params(cfg: ModelConfig, params: Vec<T>) -> Result<Gpt<T>, ModelError> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        if params.len() != layout.total {
            return Err(ModelError::Config(format!("{} parameters, expected {}", params.len(), layout.total)));
        }
        Ok(Gpt { cfg, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn param_info(&self) -> &[ParamInfo] {
        &self.layout.params
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    pub fn param(&self, name: &str) -> Option<&[T]> {
        let p = self.layout.params.iter().find(|p| p.name == name)?;
        Some(&self.params[p.range()])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let p = self.layout.params.iter().find(|p| p.name == name)?.range();
        Some(&mut self.params[p])
    }

    fn w(&self, offset: usize, len: usize) -> &[T] {
        &self.params[offset..offset + len]
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<(), ModelError> {
        if ids.is_empty() {
            return Err(ModelError::Input("empty sequence".into()));
        }
        if ids.len() > self.cfg.context_len {
            return Err(ModelError::ContextOverflow { len: ids.len(), context: self.cfg.context_len });
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(ModelError::Input(format!("token id {bad} outside vocabulary of {}", self.cfg.vocab_size)));
        }
        Ok(())
    }

    fn embed(&self, seqs: &[&[TokenId]]) -> Result<Embedded<T>, ModelError> {
        let d = self.cfg.model_dim;
        let (mut starts, mut lens, mut ids) = (Vec::new(), Vec::new(), Vec::new());
        for s in seqs {
            self.check_ids(s)?;
            starts.push(ids.len());
            lens.push(s.len());
            ids.extend_from_slice(s);
        }
        let mut x = vec![T::zero(); ids.len() * d];
        for (s, &start) in starts.iter().enumerate() {
            for p in 0..lens[s] {
                let r = start + p;
                let row = &mut x[r * d..(r + 1) * d];
                row.copy_from_slice(self.w(self.layout.wte + ids[r] as usize * d, d));
                add_into(row, self.w(self.layout.wpe + p * d, d));
            }
        }
        Ok((starts, lens, ids, x))
    }

    fn block_forward(&self, l: usize, x: &[T], starts: &[usize], lens: &[usize]) -> (Vec<T>, BlockCache<T>) {
        let (d, m, h, hd) = (self.cfg.model_dim, self.cfg.mlp_dim, self.cfg.heads, self.cfg.head_dim());
        let n = x.len() / d;
        let bp = self.layout.blocks[l];
        let ln1 = layer_norm(x, self.w(bp.ln1_g, d), self.w(bp.ln1_b, d), d);
        let mut qkv = vec![T::zero(); n * 3 * d];
        gemm(
            T::one(),
            Mat::new(&ln1.out, n, d),
            Mat::new(self.w(bp.w_qkv, d * 3 * d), d, 3 * d),
            T::zero(),
            MatMut::new(&mut qkv, n, 3 * d),
        );
        add_bias(&mut qkv, self.w(bp.b_qkv, 3 * d));

        let scale = T::lit(1.0 / (hd as f64).sqrt());
        let mut probs = vec![T::zero(); h * lens.iter().map(|t| t * t).sum::<usize>()];
        let mut att = vec![T::zero(); n * d];
        let mut poff = 0;
        for (&r0, &t) in starts.iter().zip(lens) {
            for head in 0..h {
                let p = &mut probs[poff..poff + t * t];
                poff += t * t;
                let q = Mat::strided(&qkv[r0 * 3 * d + head * hd..], t, hd, 3 * d, 1);
                let k = Mat::strided(&qkv[r0 * 3 * d + d + head * hd..], t, hd, 3 * d, 1);
                let v = Mat::strided(&qkv[r0 * 3 * d + 2 * d + head * hd..], t, hd, 3 * d, 1);
                gemm(scale, q, k.t(), T::zero(), MatMut::new(p, t, t));
                for i in 0..t {
                    let row = &mut p[i * t..(i + 1) * t];
                    let max = row[..=i].iter().copied().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for x in &mut row[..=i] {
                        *x = (*x - max).exp();
                        sum = sum + *x;
                    }
                    for x in &mut row[..=i] {
                        *x = *x / sum;
                    }
                    row[i + 1..].fill(T::zero());
                }
                let out = MatMut::strided(&mut att[r0 * d + head * hd..], t, hd, d, 1);
                gemm(T::one(), Mat::new(p, t, t), v, T::zero(), out);
            }
        }

        let mut x_mid = x.to_vec();
        gemm(
            T::one(),
            Mat::new(&att, n, d),
            Mat::new(self.w(bp.w_o, d * d), d, d),
            T::one(),
            MatMut::new(&mut x_mid, n, d),
        );
        add_bias(&mut x_mid, self.w(bp.b_o, d));

        let ln2 = layer_norm(&x_mid, self.w(bp.ln2_g, d), self.w(bp.ln2_b, d), d);
        let mut h_pre = vec![T::zero(); n * m];
        gemm(
            T::one(),
            Mat::new(&ln2.out, n, d),
            Mat::new(self.w(bp.w_fc, d * m), d, m),
            T::zero(),
            MatMut::new(&mut h_pre, n, m),
        );
        add_bias(&mut h_pre, self.w(bp.b_fc, m));
        let (h_act, h_tanh): (Vec<T>, Vec<T>) = h_pre.iter().map(|&v| gelu(v)).unzip();
        let mut out = x_mid;
        gemm(
            T::one(),
            Mat::new(&h_act, n, m),
            Mat::new(self.w(bp.w_proj, m * d), m, d),
            T::one(),
            MatMut::new(&mut out, n, d),
        );
        add_bias(&mut out, self.w(bp.b_proj, d));
        (out, BlockCache { ln1, qkv, probs, att, ln2, h_pre, h_tanh, h_act })
    }

    fn head(&self, x: &[T], rows: &[usize]) -> (LnCache<T>, Vec<T>) {
        let (d, v) = (self.cfg.model_dim, self.cfg.vocab_size);
        let gathered: Vec<T> = rows.iter().flat_map(|&r| x[r * d..(r + 1) * d].iter().copied()).collect();
        let lnf = layer_norm(&gathered, self.w(self.layout.lnf_g, d), self.w(self.layout.lnf_b, d), d);
        let mut logits = vec![T::zero(); rows.len() * v];
        gemm(
            T::one(),
            Mat::new(&lnf.out, rows.len(), d),
            Mat::new(self.w(self.layout.w_out, d * v), d, v),
            T::zero(),
            MatMut::new(&mut logits, rows.len(), v),
        );
        (lnf, logits)
    }

    /// Runs the sequences and returns logits (`[rows.len(), vocab]`) at the
    /// given stacked rows, with the trace for [`Gpt::backward`].
    pub fn trace(&self, seqs: &[&[TokenId]], rows: &[usize]) -> Result<(Tensor<T>, Trace<T>), ModelError> {
        let (starts, lens, ids, x0) = self.embed(seqs)?;
        if let Some(&r) = rows.iter().find(|&&r| r >= ids.len()) {
            return Err(ModelError::Input(format!("row {r} out of range for {} tokens", ids.len())));
        }
        let mut xs = vec![x0];
        let mut blocks = Vec::with_capacity(self.cfg.layers);
        for l in 0..self.cfg.layers {
            let (out, cache) = self.block_forward(l, &xs[l], &starts, &lens);
            xs.push(out);
            blocks.push(cache);
        }
        let (lnf, logits) = self.head(&xs[self.cfg.layers], rows);
        let logits = Tensor::new(vec![rows.len(), self.cfg.vocab_size], logits);
        Ok((logits, Trace { starts, lens, ids, xs, blocks, rows: rows.to_vec(), lnf }))
    }

    /// Logits for every position, `[seq, vocab]`.
    pub fn forward(&self, ids: &[TokenId]) -> Result<Tensor<T>, ModelError> {
        let rows: Vec<usize> = (0..ids.len()).collect();
        Ok(self.trace(&[ids], &rows)?.0)
    }

    /// Logits plus the post-block residual stream of every layer
    /// (`[seq, model_dim]` each).
    pub fn forward_with_activations(&self, ids: &[TokenId]) -> Result<(Tensor<T>, Vec<Tensor<T>>), ModelError> {
        let rows: Vec<usize> = (0..ids.len()).collect();
        let (logits, trace) = self.trace(&[ids], &rows)?;
        let d = self.cfg.model_dim;
        let acts = trace.xs[1..].iter().map(|x| Tensor::new(vec![ids.len(), d], x.clone())).collect();
        Ok((logits, acts))
    }

    /// Continues a forward pass from the output of block `layer`
    /// (`[seq, model_dim]`) and returns the logits at every position.
    pub fn forward_from_layer(&self, layer: usize, acts: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        if layer >= self.cfg.layers {
            return Err(ModelError::LayerOutOfRange { layer, layers: self.cfg.layers });
        }
        let d = self.cfg.model_dim;
        if acts.shape.len() != 2 || acts.shape[1] != d {
            return Err(ModelError::Input(format!("activation shape {:?}, expected [seq, {d}]", acts.shape)));
        }
        let t = acts.shape[0];
        if t == 0 || t > self.cfg.context_len {
            return Err(ModelError::ContextOverflow { len: t, context: self.cfg.context_len });
        }
        let mut x = acts.data.clone();
        for l in layer + 1..self.cfg.layers {
            x = self.block_forward(l, &x, &[0], &[t]).0;
        }
        let rows: Vec<usize> = (0..t).collect();
        Ok(Tensor::new(vec![t, self.cfg.vocab_size], self.head(&x, &rows).1))
    }

    /// Accumulates `d(loss)/d(params)` into `grad` given `d(loss)/d(logits)`
    /// for the traced rows.
    pub fn backward(&self, trace: &Trace<T>, dlogits: &[T], grad: &mut [T]) {
        let (d, v) = (self.cfg.model_dim, self.cfg.vocab_size);
        assert_eq!(grad.len(), self.layout.total, "gradient buffer size");
        assert_eq!(dlogits.len(), trace.rows.len() * v, "logit gradient size");
        let lay = &self.layout;
        let r = trace.rows.len();
        let n = trace.ids.len();

        gemm(
            T::one(),
            Mat::new(&trace.lnf.out, r, d).t(),
            Mat::new(dlogits, r, v),
            T::one(),
            MatMut::new(&mut grad[lay.w_out..lay.w_out + d * v], d, v),
        );
        let mut dln = vec![T::zero(); r * d];
        gemm(
            T::one(),
            Mat::new(dlogits, r, v),
            Mat::new(self.w(lay.w_out, d * v), d, v).t(),
            T::zero(),
            MatMut::new(&mut dln, r, d),
        );
        let mut dgathered = vec![T::zero(); r * d];
        let (dg, db) = grad_pair(grad, lay.lnf_g, lay.lnf_b, d);
        layer_norm_backward(&dln, &trace.lnf, self.w(lay.lnf_g, d), &mut dgathered, dg, db);
        let mut dx = vec![T::zero(); n * d];
        for (k, &row) in trace.rows.iter().enumerate() {
            add_into(&mut dx[row * d..(row + 1) * d], &dgathered[k * d..(k + 1) * d]);
        }

        for l in (0..self.cfg.layers).rev() {
            dx = self.block_backward(l, trace, &dx, grad);
        }

        for (s, &start) in trace.starts.iter().enumerate() {
            for p in 0..trace.lens[s] {
                let row = start + p;
                let g = &dx[row * d..(row + 1) * d];
                let tok = trace.ids[row] as usize;
                add_into(&mut grad[lay.wte + tok * d..lay.wte + (tok + 1) * d], g);
                add_into(&mut grad[lay.wpe + p * d..lay.wpe + (p + 1) * d], g);
            }
        }
    }

    fn block_backward(&self, l: usize, trace: &Trace<T>, dout: &[T], grad: &mut [T]) -> Vec<T> {
        let (d, m, h, hd) = (self.cfg.model_dim, self.cfg.mlp_dim, self.cfg.heads, self.cfg.head_dim());
        let n = trace.ids.len();
        let bp = self.layout.blocks[l];
        let c = &trace.blocks[l];

        let mut dh = vec![T::zero(); n * m];
        gemm(
            T::one(),
            Mat::new(dout, n, d),
            Mat::new(self.w(bp.w_proj, m * d), m, d).t(),
            T::zero(),
            MatMut::new(&mut dh, n, m),
        );
        gemm(
            T::one(),
            Mat::new(&c.h_act, n, m).t(),
            Mat::new(dout, n, d),
            T::one(),
            MatMut::new(&mut grad[bp.w_proj..bp.w_proj + m * d], m, d),
        );
        add_col_sums(&mut grad[bp.b_proj..bp.b_proj + d], dout, d);
        for ((g, &x), &t) in dh.iter_mut().zip(&c.h_pre).zip(&c.h_tanh) {
            *g = *g * gelu_grad(x, t);
        }
        let mut dln2 = vec![T::zero(); n * d];
        gemm(
            T::one(),
            Mat::new(&dh, n, m),
            Mat::new(self.w(bp.w_fc, d * m), d, m).t(),
            T::zero(),
            MatMut::new(&mut dln2, n, d),
        );
        gemm(
            T::one(),
            Mat::new(&c.ln2.out, n, d).t(),
            Mat::new(&dh, n, m),
            T::one(),
            MatMut::new(&mut grad[bp.w_fc..bp.w_fc + d * m], d, m),
        );
        add_col_sums(&mut grad[bp.b_fc..bp.b_fc + m], &dh, m);
        let mut dmid = dout.to_vec();
        let (dg, db) = grad_pair(grad, bp.ln2_g, bp.ln2_b, d);
        layer_norm_backward(&dln2, &c.ln2, self.w(bp.ln2_g, d), &mut dmid, dg, db);

        let mut datt = vec![T::zero(); n * d];
        gemm(
            T::one(),
            Mat::new(&dmid, n, d),
            Mat::new(self.w(bp.w_o, d * d), d, d).t(),
            T::zero(),
            MatMut::new(&mut datt, n, d),
        );
        gemm(
            T::one(),
            Mat::new(&c.att, n, d).t(),
            Mat::new(&dmid, n, d),
            T::one(),
            MatMut::new(&mut grad[bp.w_o..bp.w_o + d * d], d, d),
        );
        add_col_sums(&mut grad[bp.b_o..bp.b_o + d], &dmid, d);

        let scale = T::lit(1.0 / (hd as f64).sqrt());
        let mut dqkv = vec![T::zero(); n * 3 * d];
        let mut dp = Vec::new();
        let mut poff = 0;
        for (&r0, &t) in trace.starts.iter().zip(&trace.lens) {
            for head in 0..h {
                let p = &c.probs[poff..poff + t * t];
                poff += t * t;
                let q = Mat::strided(&c.qkv[r0 * 3 * d + head * hd..], t, hd, 3 * d, 1);
                let k = Mat::strided(&c.qkv[r0 * 3 * d + d + head * hd..], t, hd, 3 * d, 1);
                let v = Mat::strided(&c.qkv[r0 * 3 * d + 2 * d + head * hd..], t, hd, 3 * d, 1);
                let dy = Mat::strided(&datt[r0 * d + head * hd..], t, hd, d, 1);
                dp.clear();
                dp.resize(t * t, T::zero());
                gemm(T::one(), dy, v.t(), T::zero(), MatMut::new(&mut dp, t, t));
                let base = r0 * 3 * d + head * hd;
                gemm(
                    T::one(),
                    Mat::new(p, t, t).t(),
                    dy,
                    T::zero(),
                    MatMut::strided(&mut dqkv[base + 2 * d..], t, hd, 3 * d, 1),
                );
                for i in 0..t {
                    let prow = &p[i * t..(i + 1) * t];
                    let drow = &mut dp[i * t..(i + 1) * t];
                    let dot: T = prow[..=i].iter().zip(&drow[..=i]).map(|(&a, &b)| a * b).sum();
                    for j in 0..=i {
                        drow[j] = prow[j] * (drow[j] - dot);
                    }
                    drow[i + 1..].fill(T::zero());
                }
                gemm(scale, Mat::new(&dp, t, t), k, T::zero(), MatMut::strided(&mut dqkv[base..], t, hd, 3 * d, 1));
                gemm(
                    scale,
                    Mat::new(&dp, t, t).t(),
                    q,
                    T::zero(),
                    MatMut::strided(&mut dqkv[base + d..], t, hd, 3 * d, 1),
                );
            }
        }

        let mut dln1 = vec![T::zero(); n * d];
        gemm(
            T::one(),
            Mat::new(&dqkv, n, 3 * d),
            Mat::new(self.w(bp.w_qkv, d * 3 * d), d, 3 * d).t(),
            T::zero(),
            MatMut::new(&mut dln1, n, d),
        );
        gemm(
            T::one(),
            Mat::new(&c.ln1.out, n, d).t(),
            Mat::new(&dqkv, n, 3 * d),
            T::one(),
            MatMut::new(&mut grad[bp.w_qkv..bp.w_qkv + d * 3 * d], d, 3 * d),
        );
        add_col_sums(&mut grad[bp.b_qkv..bp.b_qkv + 3 * d], &dqkv, 3 * d);
        let mut dx = dmid;
        let (dg, db) = grad_pair(grad, bp.ln1_g, bp.ln1_b, d);
        layer_norm_backward(&dln1, &c.ln1, self.w(bp.ln1_g, d), &mut dx, dg, db);
        dx
    }

    /// Masked-answer loss of a group of examples. Returns the summed
    /// cross-entropy and the number of predicted tokens, and adds
    /// `grad_scale * d(sum)/d(params)` into `grad` when given.
    pub fn examples_loss(
        &self,
        examples: &[&TokenizedExample],
        grad: Option<(&mut [T], T)>,
    ) -> Result<(f64, usize), ModelError> {
        let seqs: Vec<&[TokenId]> = examples.iter().map(|e| e.input_ids.as_slice()).collect();
        let (mut rows, mut targets) = (Vec::new(), Vec::new());
        let mut start = 0;
        for e in examples {
            let (r, t) = masked_rows(&e.target_ids, &e.loss_mask);
            rows.extend(r.into_iter().map(|r| r + start));
            targets.extend(t);
            start += e.input_ids.len();
        }
        if rows.is_empty() {
            return Ok((0.0, 0));
        }
        let (logits, trace) = self.trace(&seqs, &rows)?;
        let scale = grad.as_ref().map_or(T::one(), |g| g.1);
        let (sum, dlogits) = cross_entropy(&logits.data, &targets, self.cfg.vocab_size, scale);
        if let Some((g, _)) = grad {
            self.backward(&trace, &dlogits, g);
        }
        Ok((sum, rows.len()))
    }

    /// Post-block activations of `layers` at one position per sequence.
    /// Returns `[layer][sequence] -> vector`.
    pub fn capture_rows(
        &self,
        seqs: &[&[TokenId]],
        positions: &[usize],
        layers: &[usize],
    ) -> Result<Vec<Vec<Vec<T>>>, ModelError> {
        assert_eq!(seqs.len(), positions.len(), "one position per sequence");
        for &l in layers {
            if l >= self.cfg.layers {
                return Err(ModelError::LayerOutOfRange { layer: l, layers: self.cfg.layers });
            }
        }
        for (s, &p) in seqs.iter().zip(positions) {
            if p >= s.len() {
                return Err(ModelError::PositionOutOfRange { position: p, len: s.len() });
            }
        }
        let (starts, lens, _, mut x) = self.embed(seqs)?;
        let d = self.cfg.model_dim;
        let top = layers.iter().copied().max().map_or(0, |l| l + 1);
        let mut out = vec![Vec::new(); layers.len()];
        for l in 0..top {
            x = self.block_forward(l, &x, &starts, &lens).0;
            for (k, _) in layers.iter().enumerate().filter(|(_, &want)| want == l) {
                out[k] =
                    starts.iter().zip(positions).map(|(&s, &p)| x[(s + p) * d..(s + p + 1) * d].to_vec()).collect();
            }
        }
        Ok(out)
    }
}

fn grad_pair<T>(grad: &mut [T], g: usize, b: usize, d: usize) -> (&mut [T], &mut [T]) {
    assert_eq!(b, g + d, "gain and bias are adjacent");
    let (dg, db) = grad[g..g + 2 * d].split_at_mut(d);
    (dg, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::mask_positions;

    fn tiny() -> ModelConfig {
        ModelConfig { layers: 2, heads: 2, model_dim: 8, mlp_dim: 12, context_len: 16, vocab_size: 11, seed: 5 }
    }

    fn example() -> TokenizedExample {
        mask_positions(&[1, 7, 9, 5, 6, 10, 2], &[2, 4, 5])
    }

    fn loss(model: &Gpt<f64>, ex: &TokenizedExample) -> f64 {
        let (sum, count) = model.examples_loss(&[ex], None).unwrap();
        sum / count as f64
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut model = Gpt::<f64>::new(tiny()).unwrap();
        // Non-trivial LN parameters and biases exercise every term.
        for (i, p) in model.params.iter_mut().enumerate() {
            *p += 0.05 * ((i as f64) * 0.37).sin();
        }
        let ex = example();
        let count = ex.loss_mask.iter().filter(|&&m| m).count();
        let mut grad = vec![0.0; model.num_params()];
        model.examples_loss(&[&ex], Some((&mut grad, 1.0 / count as f64))).unwrap();
        let h = 1e-5;
        for info in model.param_info().to_vec() {
            let mut num = Vec::new();
            for i in info.range() {
                let orig = model.params[i];
                model.params[i] = orig + h;
                let up = loss(&model, &ex);
                model.params[i] = orig - h;
                let down = loss(&model, &ex);
                model.params[i] = orig;
                num.push((up - down) / (2.0 * h));
            }
            let ana = &grad[info.range()];
            let diff: f64 = ana.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale: f64 =
                ana.iter().map(|a| a * a).sum::<f64>().sqrt() + num.iter().map(|a| a * a).sum::<f64>().sqrt();
            let rel = if scale == 0.0 { 0.0 } else { diff / scale };
            assert!(rel < 1e-4, "{}: relative error {rel}", info.name);
        }
    }

    #[test]
    fn fast_tanh_matches_library_tanh() {
        for i in -4000..=4000 {
            let u = i as f64 / 200.0;
            assert!((fast_tanh(u) - u.tanh()).abs() < 1e-15, "{u}");
        }
        assert_eq!(fast_tanh(1e4f64), 1.0);
        assert_eq!(fast_tanh(-1e4f32), -1.0);
    }

    #[test]
    fn logits_are_causal() {
        let model = Gpt::<f64>::new(tiny()).unwrap();
        let a = model.forward(&[1, 3, 4, 5, 6]).unwrap();
        let b = model.forward(&[1, 3, 4, 9, 6]).unwrap();
        assert_eq!(a.data[..3 * 11], b.data[..3 * 11]);
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn zero_unembedding_gives_uniform_loss() {
        let mut model = Gpt::<f64>::new(tiny()).unwrap();
        model.param_mut("w_out").unwrap().fill(0.0);
        let ex = example();
        assert!((loss(&model, &ex) - 11f64.ln()).abs() < 1e-12);
        let logits = model.forward(&[1, 2]).unwrap();
        assert_eq!(logits.shape, vec![2, 11]);
    }

    #[test]
    fn masked_loss_edge_cases() {
        let logits = Tensor::<f64>::zeros(vec![3, 4]);
        assert_eq!(masked_loss(&logits, &[0, 1, 2], &[false, false, false]), 0.0);
        let (l, d, n) = masked_loss_and_grad(&logits, &[0, 1, 2], &[false, false, true]);
        assert!((l - 4f64.ln()).abs() < 1e-15);
        assert_eq!(n, 1);
        assert!(d.row(0).iter().chain(d.row(2)).all(|&g| g == 0.0));
    }

    #[test]
    fn rejects_overlong_input() {
        let model = Gpt::<f64>::new(tiny()).unwrap();
        assert!(matches!(model.forward(&[1; 17]), Err(ModelError::ContextOverflow { len: 17, context: 16 })));
    }

    #[test]
    fn batched_rows_match_single_runs() {
        let model = Gpt::<f64>::new(tiny()).unwrap();
        let (s1, s2): (&[TokenId], &[TokenId]) = (&[1, 4, 5], &[1, 6, 7, 8]);
        let (logits, _) = model.trace(&[s1, s2], &[2, 6]).unwrap();
        let a = model.forward(s1).unwrap();
        let b = model.forward(s2).unwrap();
        for (x, y) in logits.row(0).iter().zip(a.row(2)) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in logits.row(1).iter().zip(b.row(3)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
