//! Neural building blocks: multi-head attention, MLPs, patch/token
//! embeddings, and factorized temporal attention. Parameters are plain
//! tensor trees; [`ParamBlock`] walks them by name for binding to a tape,
//! optimizer updates, and checkpointing.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const LN_EPS: f64 = 1e-5;
const MASKED_SCORE: f64 = -1e30;

/// Uniform traversal over named parameter tensors. Traversal order is fixed
/// by construction, which keeps checkpoints and optimizer state deterministic.
pub trait ParamBlock {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_vec(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
}

#[derive(Clone)]
pub struct LinearParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearParams {
    pub fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        LinearParams { w: xavier(rng, fan_in, fan_out), b: Tensor::zeros(vec![fan_out]) }
    }

    /// Weights and bias at zero; the block outputs its bias until trained.
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        LinearParams { w: Tensor::zeros(vec![fan_in, fan_out]), b: Tensor::zeros(vec![fan_out]) }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        x.matmul(&self.w).add(&self.b)
    }
}

impl ParamBlock for LinearParams {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "w"), &self.w);
        f(&join(prefix, "b"), &self.b);
    }
    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
    }
}

#[derive(Clone)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    pub fn init(width: usize) -> Self {
        LayerNormParams { gamma: Tensor::full(vec![width], 1.0), beta: Tensor::zeros(vec![width]) }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        x.layernorm(&self.gamma, &self.beta, LN_EPS)
    }
}

impl ParamBlock for LayerNormParams {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }
    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// Per-head projection weights; head h maps width C -> C/h, and its output
/// projection maps back so the heads sum into the residual stream.
#[derive(Clone)]
pub struct AttentionParams {
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    pub wo: Vec<Tensor>,
}

impl AttentionParams {
    pub fn init(rng: &mut ChaCha8Rng, width: usize, heads: usize) -> Self {
        assert!(
            heads > 0 && width % heads == 0,
            "width {width} not divisible by {heads} heads"
        );
        let d = width / heads;
        let mut p = AttentionParams { wq: vec![], wk: vec![], wv: vec![], wo: vec![] };
        for _ in 0..heads {
            p.wq.push(xavier(rng, width, d));
            p.wk.push(xavier(rng, width, d));
            p.wv.push(xavier(rng, width, d));
            p.wo.push(xavier(rng, d, width));
        }
        p
    }

    pub fn heads(&self) -> usize {
        self.wq.len()
    }

    pub fn head_dim(&self) -> usize {
        self.wq[0].shape()[1]
    }
}

impl ParamBlock for AttentionParams {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (h, t) in self.wq.iter().enumerate() {
            f(&join(prefix, &format!("wq.{h}")), t);
        }
        for (h, t) in self.wk.iter().enumerate() {
            f(&join(prefix, &format!("wk.{h}")), t);
        }
        for (h, t) in self.wv.iter().enumerate() {
            f(&join(prefix, &format!("wv.{h}")), t);
        }
        for (h, t) in self.wo.iter().enumerate() {
            f(&join(prefix, &format!("wo.{h}")), t);
        }
    }
    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (h, t) in self.wq.iter_mut().enumerate() {
            f(&join(prefix, &format!("wq.{h}")), t);
        }
        for (h, t) in self.wk.iter_mut().enumerate() {
            f(&join(prefix, &format!("wk.{h}")), t);
        }
        for (h, t) in self.wv.iter_mut().enumerate() {
            f(&join(prefix, &format!("wv.{h}")), t);
        }
        for (h, t) in self.wo.iter_mut().enumerate() {
            f(&join(prefix, &format!("wo.{h}")), t);
        }
    }
}

fn attend(queries: &Tensor, context: &Tensor, p: &AttentionParams, mask: Option<&[bool]>) -> Tensor {
    let m = context.shape()[0];
    assert!(m >= 1, "attention needs at least one context token");
    if let Some(mask) = mask {
        assert_eq!(mask.len(), m, "mask length must match context length");
        assert!(mask.iter().any(|&v| v), "attention mask excludes every position");
    }
    let scale = 1.0 / (p.head_dim() as f64).sqrt();
    let bias = mask.map(|mask| {
        Tensor::from_vec(
            vec![m],
            mask.iter().map(|&ok| if ok { 0.0 } else { MASKED_SCORE }).collect(),
        )
    });
    let mut out: Option<Tensor> = None;
    for h in 0..p.heads() {
        let q = queries.matmul(&p.wq[h]);
        let k = context.matmul(&p.wk[h]);
        let v = context.matmul(&p.wv[h]);
        let mut scores = q.matmul(&k.transpose2()).scale(scale);
        if let Some(bias) = &bias {
            scores = scores.add(bias);
        }
        let o = scores.softmax(1).matmul(&v).matmul(&p.wo[h]);
        out = Some(match out {
            Some(acc) => acc.add(&o),
            None => o,
        });
    }
    out.expect("attention with zero heads")
}

/// Scaled dot-product self-attention; masked positions get zero weight.
/// Residual connection and layer norm are the caller's business.
pub fn mhsa(x: &Tensor, p: &AttentionParams, mask: Option<&[bool]>) -> Tensor {
    attend(x, x, p, mask)
}

/// Cross attention: `queries` attend over `context`.
pub fn mhca(queries: &Tensor, context: &Tensor, p: &AttentionParams) -> Tensor {
    attend(queries, context, p, None)
}

/// Per-head softmax weight matrices, for tests and debugging.
pub fn attention_weight_matrices(
    queries: &Tensor,
    context: &Tensor,
    p: &AttentionParams,
    mask: Option<&[bool]>,
) -> Vec<Tensor> {
    let scale = 1.0 / (p.head_dim() as f64).sqrt();
    let m = context.shape()[0];
    let bias = mask.map(|mask| {
        Tensor::from_vec(
            vec![m],
            mask.iter().map(|&ok| if ok { 0.0 } else { MASKED_SCORE }).collect(),
        )
    });
    (0..p.heads())
        .map(|h| {
            let q = queries.matmul(&p.wq[h]);
            let k = context.matmul(&p.wk[h]);
            let mut scores = q.matmul(&k.transpose2()).scale(scale);
            if let Some(bias) = &bias {
                scores = scores.add(bias);
            }
            scores.softmax(1)
        })
        .collect()
}

/// Affine layers with relu between them (none after the last).
#[derive(Clone)]
pub struct MlpParams {
    pub layers: Vec<LinearParams>,
}

impl MlpParams {
    pub fn init(rng: &mut ChaCha8Rng, widths: &[usize]) -> Self {
        assert!(widths.len() >= 2, "mlp needs an input and at least one output width");
        let layers = widths
            .windows(2)
            .map(|w| LinearParams::init(rng, w[0], w[1]))
            .collect();
        MlpParams { layers }
    }

    /// Zero-initialized final layer; earlier layers random. Keeps heads at a
    /// neutral output (sigmoid 0.5) at the start of training.
    pub fn init_zero_last(rng: &mut ChaCha8Rng, widths: &[usize]) -> Self {
        let mut p = Self::init(rng, widths);
        let last = p.layers.last_mut().unwrap();
        *last = LinearParams::zeros(last.w.shape()[0], last.w.shape()[1]);
        p
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer.apply(&cur);
            if i + 1 < self.layers.len() {
                cur = cur.relu();
            }
        }
        cur
    }
}

impl ParamBlock for MlpParams {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.for_each(&join(prefix, &i.to_string()), f);
        }
    }
    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.for_each_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Mlp application to a stack of row vectors, shared by encoder/decoder
/// feed-forward sublayers.
pub fn mlp(x: &Tensor, p: &MlpParams) -> Tensor {
    p.apply(x)
}

/// Geometry of the toy backbones that replace pretrained visual/text encoders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    /// Patch side length in pixels.
    pub patch: usize,
    /// Frame side length in pixels (square frames), divisible by `patch`.
    pub frame_side: usize,
    pub vocab_size: usize,
    pub width: usize,
    pub max_tokens: usize,
    pub max_frames: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.frame_side % self.patch != 0 {
            return Err(Error::Config(format!(
                "frame side {} not divisible by patch size {}",
                self.frame_side, self.patch
            )));
        }
        if self.width % 2 != 0 {
            return Err(Error::Config(format!(
                "model width {} must be even for the 2-d positional encoding",
                self.width
            )));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.frame_side / self.patch
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }
}

/// Standard sinusoidal table: position p, channel pair i uses frequency
/// 10000^(-2i/dim).
pub fn sinusoid_1d(len: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * dim];
    for p in 0..len {
        for i in 0..dim / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            out[p * dim + 2 * i] = (p as f64 * freq).sin();
            out[p * dim + 2 * i + 1] = (p as f64 * freq).cos();
        }
        if dim % 2 == 1 {
            out[p * dim + dim - 1] = 0.0;
        }
    }
    out
}

/// 2-d positional encoding over a grid: first half of the channels encode the
/// row index, second half the column index.
pub fn pos_2d(grid_h: usize, grid_w: usize, dim: usize) -> Tensor {
    assert!(dim % 2 == 0, "pos_2d needs an even width");
    let half = dim / 2;
    let rows = sinusoid_1d(grid_h, half);
    let cols = sinusoid_1d(grid_w, half);
    let mut out = vec![0.0; grid_h * grid_w * dim];
    for y in 0..grid_h {
        for x in 0..grid_w {
            let base = (y * grid_w + x) * dim;
            out[base..base + half].copy_from_slice(&rows[y * half..(y + 1) * half]);
            out[base + half..base + dim].copy_from_slice(&cols[x * half..(x + 1) * half]);
        }
    }
    Tensor::from_vec(vec![grid_h * grid_w, dim], out)
}

pub fn pos_1d(len: usize, dim: usize) -> Tensor {
    Tensor::from_vec(vec![len, dim], sinusoid_1d(len, dim))
}

/// Flat element indices of each non-overlapping patch of a [3, side, side]
/// frame, patch-major then (channel, dy, dx).
pub fn patch_indices(cfg: &BackboneConfig) -> Vec<usize> {
    let side = cfg.frame_side;
    let p = cfg.patch;
    let g = cfg.grid_side();
    let mut idx = Vec::with_capacity(g * g * cfg.patch_dim());
    for py in 0..g {
        for px in 0..g {
            for c in 0..3 {
                for dy in 0..p {
                    for dx in 0..p {
                        idx.push(c * side * side + (py * p + dy) * side + (px * p + dx));
                    }
                }
            }
        }
    }
    idx
}

/// Patchify and project a [3, side, side] frame without positional terms.
pub fn patch_embed_raw(frame: &Tensor, proj: &LinearParams, cfg: &BackboneConfig) -> Tensor {
    assert_eq!(
        frame.numel(),
        3 * cfg.frame_side * cfg.frame_side,
        "frame does not match configured geometry"
    );
    let flat = frame.reshape(vec![frame.numel()]);
    flat.gather_rows(&patch_indices(cfg))
        .reshape(vec![cfg.tokens_per_frame(), cfg.patch_dim()])
        .matmul(&proj.w)
        .add(&proj.b)
}

/// Patch embedding with the 2-d sinusoidal positional encoding added.
pub fn patch_embed(frame: &Tensor, proj: &LinearParams, cfg: &BackboneConfig) -> Tensor {
    let g = cfg.grid_side();
    patch_embed_raw(frame, proj, cfg).add(&pos_2d(g, g, cfg.width))
}

/// Embedding lookup plus 1-d sinusoidal positional encoding.
pub fn token_embed(ids: &[u32], table: &Tensor, cfg: &BackboneConfig) -> Result<Tensor> {
    if ids.is_empty() {
        return Err(Error::Config("empty token sequence".into()));
    }
    if ids.len() > cfg.max_tokens {
        return Err(Error::Config(format!(
            "{} tokens exceed the configured maximum {}",
            ids.len(),
            cfg.max_tokens
        )));
    }
    for &id in ids {
        if id as usize >= cfg.vocab_size {
            return Err(Error::Config(format!(
                "token id {id} outside vocabulary of size {}",
                cfg.vocab_size
            )));
        }
    }
    let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    Ok(table.gather_rows(&rows).add(&pos_1d(ids.len(), cfg.width)))
}

/// Pre-norm residual temporal attention block.
#[derive(Clone)]
pub struct TemporalBlockParams {
    pub ln: LayerNormParams,
    pub attn: AttentionParams,
}

impl TemporalBlockParams {
    pub fn init(rng: &mut ChaCha8Rng, width: usize, heads: usize) -> Self {
        TemporalBlockParams {
            ln: LayerNormParams::init(width),
            attn: AttentionParams::init(rng, width, heads),
        }
    }
}

impl ParamBlock for TemporalBlockParams {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.ln.for_each(&join(prefix, "ln"), f);
        self.attn.for_each(&join(prefix, "attn"), f);
    }
    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.ln.for_each_mut(&join(prefix, "ln"), f);
        self.attn.for_each_mut(&join(prefix, "attn"), f);
    }
}

/// Factorized temporal attention: for each spatial index of a [t*s, c] token
/// stack, the t frame tokens at that index attend to each other through a
/// pre-norm residual block. No positional terms are added here, so the block
/// is equivariant to frame permutation.
pub fn temporal_attention(x: &Tensor, t: usize, s: usize, p: &TemporalBlockParams) -> Tensor {
    assert!(t >= 1, "temporal attention needs at least one frame");
    assert_eq!(x.shape()[0], t * s, "token stack does not factor into {t} frames of {s}");
    let mut columns = Vec::with_capacity(s);
    for sp in 0..s {
        let rows: Vec<usize> = (0..t).map(|f| f * s + sp).collect();
        let col = x.gather_rows(&rows);
        columns.push(col.add(&mhsa(&col.layernorm(&p.ln.gamma, &p.ln.beta, LN_EPS), &p.attn, None)));
    }
    let refs: Vec<&Tensor> = columns.iter().collect();
    let stacked = Tensor::concat_rows(&refs);
    // stacked is spatial-major; restore frame-major order
    let perm: Vec<usize> = (0..t * s).map(|i| (i % s) * t + i / s).collect();
    stacked.gather_rows(&perm)
}

#[cfg(test)]
#[cfg(test)]
mod tests;
