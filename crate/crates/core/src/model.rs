//! The frozen transformer stack: per-layer Q/K/V projection, softmax
//! attention with optional prefix augmentation, KV-cache construction, and
//! greedy autoregressive decoding.
//!
//! Two forward paths exist on purpose. The plain path works directly on
//! matrices and backs evaluation, decoding, and the equivalence checks; the
//! tape path (`tape_attention_stack`) builds the identical computation on a
//! differentiation tape and backs training. Both issue the same matrix
//! operations in the same order, so their outputs agree bit for bit — a test
//! pins that.

use crate::linalg::Matrix;
use crate::tape::{Tape, TapeError, VarId};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Logit offset used to mask out future positions. Finite so that matrices
/// stay NaN/Inf-free, but large enough that masked weights underflow to
/// exactly zero after max subtraction.
const MASK_NEG: f64 = -1e30;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input width {got} does not match model width {expect}")]
    WidthMismatch { expect: usize, got: usize },
    #[error("prefix has {got} layers, model has {expect}")]
    LayerMismatch { expect: usize, got: usize },
    #[error("prefix rows disagree across layers: {0:?}")]
    RaggedPrefix(Vec<usize>),
    #[error("model has no vocabulary head (vocab = 0)")]
    NoVocab,
    #[error("tape error: {0}")]
    Tape(#[from] TapeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskKind {
    None,
    Causal,
}

/// Architecture description. `vocab = 0` means the model consumes raw
/// embedding rows and has no unembedding head; `d_ff = 0` disables the
/// feed-forward block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub residual: bool,
    pub use_wo: bool,
    pub positions: bool,
}

impl StackConfig {
    /// Attention-only stack: single head, no output projection, no FFN, no
    /// residual path, no positions. The setting of the expressivity analysis.
    pub fn attention_only(d: usize, layers: usize) -> Self {
        Self { d, layers, heads: 1, d_ff: 0, vocab: 0, residual: false, use_wo: false, positions: false }
    }

    /// Full harness stack with embedding and unembedding.
    pub fn harness(d: usize, layers: usize, d_ff: usize, vocab: usize) -> Self {
        Self { d, layers, heads: 1, d_ff, vocab, residual: true, use_wo: true, positions: false }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    fn validate(&self) {
        assert!(self.d > 0 && self.layers > 0 && self.heads > 0);
        assert_eq!(self.d % self.heads, 0, "width must split across heads");
    }
}

/// Frozen projection matrices for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ffn: Option<(Matrix, Matrix)>,
}

/// Per-layer trainable prefix slots `(P_K, P_V)`, each `m x d`. Value rows
/// are free vectors; they never pass through `W_V`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixBlock {
    pub layers: Vec<(Matrix, Matrix)>,
}

impl PrefixBlock {
    pub fn zeros(layers: usize, m: usize, d: usize) -> Self {
        Self { layers: (0..layers).map(|_| (Matrix::zeros(m, d), Matrix::zeros(m, d))).collect() }
    }

    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |(pk, _)| pk.rows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    fn check(&self, config: &StackConfig) -> Result<(), ModelError> {
        if self.layers.len() != config.layers {
            return Err(ModelError::LayerMismatch { expect: config.layers, got: self.layers.len() });
        }
        let rows: Vec<usize> = self.layers.iter().map(|(pk, _)| pk.rows()).collect();
        if rows.windows(2).any(|w| w[0] != w[1]) {
            return Err(ModelError::RaggedPrefix(rows));
        }
        for (pk, pv) in &self.layers {
            if pk.cols() != config.d || pv.cols() != config.d {
                return Err(ModelError::WidthMismatch { expect: config.d, got: pk.cols() });
            }
        }
        Ok(())
    }
}

/// Per-layer cached keys and values from a forward pass.
#[derive(Debug, Clone)]
pub struct KVCache {
    pub layers: Vec<(Matrix, Matrix)>,
}

impl KVCache {
    pub fn rows(&self) -> usize {
        self.layers.first().map_or(0, |(k, _)| k.rows())
    }

    /// Reinterpret cached keys/values as a prefix block (the in-context
    /// learning equivalence).
    pub fn into_prefix(self) -> PrefixBlock {
        PrefixBlock { layers: self.layers }
    }
}

/// Per-layer intermediate values recorded by a forward pass. `attn` holds
/// one `n x (m+n)` weight matrix per head; `y` is the attention mix before
/// the output projection.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub attn: Vec<Matrix>,
    pub y: Matrix,
    pub hidden_out: Matrix,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
    pub final_hidden: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: StackConfig,
    pub embed: Option<Matrix>,
    pub unembed: Option<Matrix>,
    pub layers: Vec<LayerParams>,
}

impl Model {
    /// Sample a model with i.i.d. normal(0, std^2) weights. Pass
    /// `1.0 / (d as f64).sqrt()` for the conventional width-scaled init.
    pub fn random<R: Rng + ?Sized>(config: StackConfig, std: f64, rng: &mut R) -> Self {
        config.validate();
        let d = config.d;
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                w_q: Matrix::gaussian(d, d, std, rng),
                w_k: Matrix::gaussian(d, d, std, rng),
                w_v: Matrix::gaussian(d, d, std, rng),
                w_o: if config.use_wo { Matrix::gaussian(d, d, std, rng) } else { Matrix::identity(d) },
                ffn: (config.d_ff > 0).then(|| {
                    (Matrix::gaussian(d, config.d_ff, std, rng), Matrix::gaussian(config.d_ff, d, std, rng))
                }),
            })
            .collect();
        let embed = (config.vocab > 0).then(|| Matrix::gaussian(config.vocab, d, std, rng));
        let unembed = (config.vocab > 0).then(|| Matrix::gaussian(d, config.vocab, std, rng));
        Self { config, embed, unembed, layers }
    }

    /// FNV-1a over the bit patterns of every weight, in a fixed traversal
    /// order. Used to assert the backbone stayed frozen.
    pub fn weights_fingerprint(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        let mut eat = |m: &Matrix| {
            for &x in m.data() {
                for b in x.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        };
        if let Some(e) = &self.embed {
            eat(e);
        }
        if let Some(u) = &self.unembed {
            eat(u);
        }
        for l in &self.layers {
            eat(&l.w_q);
            eat(&l.w_k);
            eat(&l.w_v);
            eat(&l.w_o);
            if let Some((w1, w2)) = &l.ffn {
                eat(w1);
                eat(w2);
            }
        }
        h
    }

    /// Token ids to input rows; sinusoidal positions (absolute index
    /// `pos_offset + i`) are added only when the config enables them.
    pub fn embed_tokens(&self, ids: &[usize], pos_offset: usize) -> Result<Matrix, ModelError> {
        let table = self.embed.as_ref().ok_or(ModelError::NoVocab)?;
        let mut h = table.select_rows(ids);
        if self.config.positions {
            h = h.add(&sinusoidal_positions(ids.len(), self.config.d, pos_offset));
        }
        Ok(h)
    }

    pub fn logits(&self, hidden: &Matrix) -> Result<Matrix, ModelError> {
        let u = self.unembed.as_ref().ok_or(ModelError::NoVocab)?;
        Ok(hidden.matmul(u))
    }

    /// Forward pass over `h0` with an optional prefix. Records Q/K/V, the
    /// attention weights over `m + n` slots, and the per-layer outputs.
    ///
    /// With `MaskKind::Causal`, token `i` attends to every prefix slot and to
    /// tokens `j <= i`; prefix slots are never queried.
    pub fn forward(
        &self,
        h0: &Matrix,
        prefix: Option<&PrefixBlock>,
        mask: MaskKind,
    ) -> Result<ForwardTrace, ModelError> {
        if h0.cols() != self.config.d {
            return Err(ModelError::WidthMismatch { expect: self.config.d, got: h0.cols() });
        }
        if let Some(p) = prefix {
            p.check(&self.config)?;
        }
        let n = h0.rows();
        let m = prefix.map_or(0, PrefixBlock::len);
        let mask_mat = (mask == MaskKind::Causal).then(|| causal_mask(n, m));

        let mut h = h0.clone();
        let mut traces = Vec::with_capacity(self.config.layers);
        for (li, layer) in self.layers.iter().enumerate() {
            let q = h.matmul(&layer.w_q);
            let k = h.matmul(&layer.w_k);
            let v = h.matmul(&layer.w_v);
            let (k_aug, v_aug) = match prefix {
                Some(p) => {
                    let (pk, pv) = &p.layers[li];
                    (pk.concat_rows(&k), pv.concat_rows(&v))
                }
                None => (k.clone(), v.clone()),
            };

            let dh = self.config.head_dim();
            let scale = 1.0 / (dh as f64).sqrt();
            let mut attn = Vec::with_capacity(self.config.heads);
            let mut y: Option<Matrix> = None;
            for head in 0..self.config.heads {
                let qh = q.col_block(head * dh, dh);
                let kh = k_aug.col_block(head * dh, dh);
                let vh = v_aug.col_block(head * dh, dh);
                let mut scores = qh.matmul(&kh.transpose()).scale(scale);
                if let Some(mm) = &mask_mat {
                    scores = scores.add(mm);
                }
                let a = row_softmax(&scores);
                let yh = a.matmul(&vh);
                attn.push(a);
                y = Some(match y {
                    Some(acc) => acc.concat_cols(&yh),
                    None => yh,
                });
            }
            let y = y.expect("at least one head");

            let attn_out = if self.config.use_wo { y.matmul(&layer.w_o) } else { y.clone() };
            let mut out = if self.config.residual { h.add(&attn_out) } else { attn_out };
            if let Some((w1, w2)) = &layer.ffn {
                let f = out.matmul(w1).map(f64::tanh).matmul(w2);
                out = if self.config.residual { out.add(&f) } else { f };
            }
            traces.push(LayerTrace { q, k, v, attn, y, hidden_out: out.clone() });
            h = out;
        }
        Ok(ForwardTrace { layers: traces, final_hidden: h })
    }

    /// Run the demos through a standard causal forward and keep each layer's
    /// keys and values.
    pub fn build_demo_cache(&self, demo_h0: &Matrix) -> Result<KVCache, ModelError> {
        let trace = self.forward(demo_h0, None, MaskKind::Causal)?;
        Ok(KVCache { layers: trace.layers.into_iter().map(|l| (l.k, l.v)).collect() })
    }

    /// Greedy decoding with incremental KV-cache reuse.
    pub fn generate(
        &self,
        prompt: &[usize],
        prefix: Option<&PrefixBlock>,
        max_tokens: usize,
        stop: Option<usize>,
    ) -> Result<GenerateResult, ModelError> {
        assert!(!prompt.is_empty(), "prompt must be nonempty");
        if let Some(p) = prefix {
            p.check(&self.config)?;
        }
        let m = prefix.map_or(0, PrefixBlock::len);

        // Prefill: standard forward, then seed the runtime cache with
        // [prefix; prompt] keys and values per layer.
        let h0 = self.embed_tokens(prompt, 0)?;
        let trace = self.forward(&h0, prefix, MaskKind::Causal)?;
        let mut cache: Vec<(Matrix, Matrix)> = trace
            .layers
            .iter()
            .enumerate()
            .map(|(li, l)| match prefix {
                Some(p) => {
                    let (pk, pv) = &p.layers[li];
                    (pk.concat_rows(&l.k), pv.concat_rows(&l.v))
                }
                None => (l.k.clone(), l.v.clone()),
            })
            .collect();

        let mut last_hidden = trace.final_hidden.select_rows(&[prompt.len() - 1]);
        let mut tokens = Vec::new();
        let mut cache_widths = Vec::new();
        let mut truncated = true;

        for t in 0..max_tokens {
            let logits = self.logits(&last_hidden)?;
            let next = argmax(logits.row(0));
            tokens.push(next);
            cache_widths.push(m + prompt.len() + t);
            if stop == Some(next) {
                truncated = false;
                break;
            }
            if t + 1 == max_tokens {
                break;
            }
            last_hidden = self.decode_step(next, prompt.len() + t, &mut cache)?;
        }
        Ok(GenerateResult { tokens, truncated, cache_widths })
    }

    /// Process one generated token against the running cache, appending its
    /// keys/values at every layer, and return its final hidden row.
    fn decode_step(
        &self,
        token: usize,
        abs_pos: usize,
        cache: &mut [(Matrix, Matrix)],
    ) -> Result<Matrix, ModelError> {
        let mut h = self.embed_tokens(&[token], abs_pos)?;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        for (li, layer) in self.layers.iter().enumerate() {
            let q = h.matmul(&layer.w_q);
            let k = h.matmul(&layer.w_k);
            let v = h.matmul(&layer.w_v);
            let (ck, cv) = &mut cache[li];
            *ck = ck.concat_rows(&k);
            *cv = cv.concat_rows(&v);

            let mut y: Option<Matrix> = None;
            for head in 0..self.config.heads {
                let qh = q.col_block(head * dh, dh);
                let kh = ck.col_block(head * dh, dh);
                let vh = cv.col_block(head * dh, dh);
                let scores = qh.matmul(&kh.transpose()).scale(scale);
                let a = row_softmax(&scores);
                let yh = a.matmul(&vh);
                y = Some(match y {
                    Some(acc) => acc.concat_cols(&yh),
                    None => yh,
                });
            }
            let y = y.expect("at least one head");
            let attn_out = if self.config.use_wo { y.matmul(&layer.w_o) } else { y };
            let mut out = if self.config.residual { h.add(&attn_out) } else { attn_out };
            if let Some((w1, w2)) = &layer.ffn {
                let f = out.matmul(w1).map(f64::tanh).matmul(w2);
                out = if self.config.residual { out.add(&f) } else { f };
            }
            h = out;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateResult {
    pub tokens: Vec<usize>,
    pub truncated: bool,
    /// Attention width `m + prompt_len + t` at each emission step.
    pub cache_widths: Vec<usize>,
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Stabilized row softmax shared by the plain forward paths.
pub fn row_softmax(v: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(v.rows(), v.cols());
    for r in 0..v.rows() {
        let row = v.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let or = out.row_mut(r);
        for (o, e) in or.iter_mut().zip(exps) {
            *o = e / sum;
        }
    }
    out
}

/// Additive causal mask for `n` query rows over `m` prefix slots plus `n`
/// token slots: prefix columns are always visible, token column `j` is
/// visible to query `i` iff `j <= i`.
pub fn causal_mask(n: usize, m: usize) -> Matrix {
    Matrix::from_fn(n, m + n, |i, j| if j >= m && j - m > i { MASK_NEG } else { 0.0 })
}

/// Sinusoidal position rows for absolute positions `offset..offset + n`.
pub fn sinusoidal_positions(n: usize, d: usize, offset: usize) -> Matrix {
    Matrix::from_fn(n, d, |i, j| {
        let pos = (offset + i) as f64;
        let pair = (j / 2) as f64;
        let freq = 1.0 / 10_000f64.powf(2.0 * pair / d as f64);
        if j % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    })
}

/// Max elementwise difference between (a) a causal forward over
/// `[demo; query]` restricted to the query rows and (b) a causal forward
/// over `query` with the demo KV-cache injected as a prefix.
pub fn icl_equivalence_check(model: &Model, demo: &Matrix, query: &Matrix) -> Result<f64, ModelError> {
    let combined = demo.concat_rows(query);
    let full = model.forward(&combined, None, MaskKind::Causal)?;
    let query_rows: Vec<usize> = (demo.rows()..combined.rows()).collect();
    let full_out = full.final_hidden.select_rows(&query_rows);

    let prefix = model.build_demo_cache(demo)?.into_prefix();
    let prefixed = if prefix.is_empty() {
        model.forward(query, None, MaskKind::Causal)?
    } else {
        model.forward(query, Some(&prefix), MaskKind::Causal)?
    };
    Ok(full_out.max_abs_diff(&prefixed.final_hidden))
}

/// Max difference between a causal forward over `[e; x]` restricted to the
/// `x` rows and a prefixed forward of `x` where the prefix is the per-layer
/// K/V the frozen model produces on `e` alone. Demonstrates that learned
/// input embeddings are a constrained special case of learned KV slots.
pub fn prompt_subsumption_check(model: &Model, e: &Matrix, x: &Matrix) -> Result<f64, ModelError> {
    icl_equivalence_check(model, e, x)
}

/// Per-layer weight nodes for the tape forward. Adapters decide which nodes
/// are trainable leaves, frozen leaves, or composed expressions (LoRA).
pub struct TapeLayerWeights {
    pub w_q: VarId,
    pub w_k: VarId,
    pub w_v: VarId,
    pub w_o: Option<VarId>,
    pub ffn: Option<(VarId, VarId)>,
}

pub struct TapeWeights {
    pub layers: Vec<TapeLayerWeights>,
}

impl TapeWeights {
    /// Leaf every frozen weight of `model` onto `tape`.
    pub fn frozen(tape: &mut Tape, model: &Model) -> Self {
        let layers = model
            .layers
            .iter()
            .map(|l| TapeLayerWeights {
                w_q: tape.leaf(l.w_q.clone()),
                w_k: tape.leaf(l.w_k.clone()),
                w_v: tape.leaf(l.w_v.clone()),
                w_o: model.config.use_wo.then(|| tape.leaf(l.w_o.clone())),
                ffn: l.ffn.as_ref().map(|(w1, w2)| (tape.leaf(w1.clone()), tape.leaf(w2.clone()))),
            })
            .collect();
        Self { layers }
    }
}

/// Options for the tape forward.
pub struct TapeForwardOpts {
    pub mask: MaskKind,
    /// When set, hidden states are re-leafed (detached) before each layer's
    /// K/V projections, cutting the cross-layer gradient path that flows
    /// through deeper keys and values. Used to demonstrate that prefixes
    /// influence the model at two scales.
    pub detach_kv_inputs: bool,
}

impl Default for TapeForwardOpts {
    fn default() -> Self {
        Self { mask: MaskKind::None, detach_kv_inputs: false }
    }
}

/// Tape twin of `Model::forward`: same operations, same order, same values.
/// Returns the final hidden node.
pub fn tape_attention_stack(
    tape: &mut Tape,
    config: &StackConfig,
    weights: &TapeWeights,
    h0: VarId,
    prefix: Option<&[(VarId, VarId)]>,
    opts: &TapeForwardOpts,
) -> Result<VarId, TapeError> {
    let n = tape.value(h0).rows();
    let m = prefix.map_or(0, |p| {
        let (pk, _) = p[0];
        tape.value(pk).rows()
    });
    let mask_mat = (opts.mask == MaskKind::Causal).then(|| causal_mask(n, m));

    let mut h = h0;
    for (li, lw) in weights.layers.iter().enumerate() {
        let kv_in = if opts.detach_kv_inputs {
            let detached = tape.value(h).clone();
            tape.leaf(detached)
        } else {
            h
        };
        let q = tape.matmul(h, lw.w_q)?;
        let k = tape.matmul(kv_in, lw.w_k)?;
        let v = tape.matmul(kv_in, lw.w_v)?;
        let (k_aug, v_aug) = match prefix {
            Some(p) => {
                let (pk, pv) = p[li];
                (tape.concat_rows(pk, k)?, tape.concat_rows(pv, v)?)
            }
            None => (k, v),
        };

        let dh = config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut y: Option<VarId> = None;
        for head in 0..config.heads {
            let qh = tape_col_block(tape, q, head * dh, dh)?;
            let kh = tape_col_block(tape, k_aug, head * dh, dh)?;
            let vh = tape_col_block(tape, v_aug, head * dh, dh)?;
            let kt = tape.transpose(kh);
            let mut scores = tape.matmul(qh, kt)?;
            scores = tape.scale(scores, scale);
            if let Some(mm) = &mask_mat {
                let mask_leaf = tape.leaf(mm.clone());
                scores = tape.add(scores, mask_leaf)?;
            }
            let a = tape.row_softmax(scores);
            let yh = tape.matmul(a, vh)?;
            y = Some(match y {
                Some(acc) => tape_concat_cols(tape, acc, yh)?,
                None => yh,
            });
        }
        let y = y.expect("at least one head");

        let attn_out = match lw.w_o {
            Some(wo) => tape.matmul(y, wo)?,
            None => y,
        };
        let mut out = if config.residual { tape.add(h, attn_out)? } else { attn_out };
        if let Some((w1, w2)) = lw.ffn {
            let f1 = tape.matmul(out, w1)?;
            let f1 = tape.tanh(f1);
            let f2 = tape.matmul(f1, w2)?;
            out = if config.residual { tape.add(out, f2)? } else { f2 };
        }
        h = out;
    }
    Ok(h)
}

/// Column block via transpose + select_rows + transpose, staying inside the
/// primitive set. A no-op passthrough when the block is the whole matrix.
fn tape_col_block(tape: &mut Tape, a: VarId, start: usize, len: usize) -> Result<VarId, TapeError> {
    if start == 0 && tape.value(a).cols() == len {
        return Ok(a);
    }
    let at = tape.transpose(a);
    let rows: Vec<usize> = (start..start + len).collect();
    let sel = tape.select_rows(at, &rows)?;
    Ok(tape.transpose(sel))
}

fn tape_concat_cols(tape: &mut Tape, a: VarId, b: VarId) -> Result<VarId, TapeError> {
    let at = tape.transpose(a);
    let bt = tape.transpose(b);
    let cat = tape.concat_rows(at, bt)?;
    Ok(tape.transpose(cat))
}
