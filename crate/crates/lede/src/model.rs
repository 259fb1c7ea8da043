//! Transformer encoder-decoder with a theme-classification head.
//!
//! One embedding table serves three roles: input embeddings for both sides,
//! and the output projection (logits = states · Vᵀ), so vocabulary rows
//! receive gradient from every path. Positions are fixed sinusoids scaled
//! down by `positional_scale` before addition; blocks are post-norm with
//! ReLU feed-forwards.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, TensorRef};
use crate::error::{Error, Result};
use crate::tokenizer::{CLS, PAD};

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
pub const MASK_VALUE: f64 = -1e30;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_size: usize,
    pub ff_inner_size: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub positional_scale: f64,
}

impl ModelConfig {
    /// 4 layers, 4 heads, width 512: the smaller published configuration.
    pub fn small_4l4h(vocab_size: usize, max_positions: usize) -> Self {
        ModelConfig {
            num_layers: 4,
            num_heads: 4,
            hidden_size: 512,
            ff_inner_size: 2048,
            max_positions,
            vocab_size,
            dropout: 0.3,
            positional_scale: 0.01,
        }
    }

    /// 10 layers, 8 heads, width 720: the larger published configuration.
    pub fn large_10l8h(vocab_size: usize, max_positions: usize) -> Self {
        ModelConfig {
            num_layers: 10,
            num_heads: 8,
            hidden_size: 720,
            ff_inner_size: 2880,
            max_positions,
            vocab_size,
            dropout: 0.3,
            positional_scale: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.hidden_size == 0 {
            return Err(Error::Config("layers, heads and width must be positive".into()));
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.hidden_size, self.num_heads
            )));
        }
        if self.ff_inner_size == 0 || self.max_positions == 0 || self.vocab_size == 0 {
            return Err(Error::Config("inner size, positions and vocab must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if self.positional_scale <= 0.0 {
            return Err(Error::Config("positional scale must be positive".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count:
    ///   vocab·N + N²·(28L + 1) + N·(32L + 5) + 2
    /// from V (vocab·N), segments (2N), L encoder layers (12N² + 13N), L
    /// decoder layers (16N² + 19N) and the theme head (N² + 3N + 2), with
    /// ff_inner = 4N. For other inner sizes the per-layer feed-forward term
    /// generalizes to 2·N·ff + ff + N.
    pub fn param_count(&self) -> usize {
        let n = self.hidden_size;
        let l = self.num_layers;
        let ff = self.ff_inner_size;
        let ff_block = 2 * n * ff + ff + n;
        let enc = 4 * n * n + 4 * n + 4 * n + ff_block;
        let dec = 8 * n * n + 8 * n + 6 * n + ff_block;
        self.vocab_size * n + 2 * n + l * (enc + dec) + n * n + 3 * n + 2
    }
}

enum Init {
    Gaussian,
    Zero,
    One,
}

/// Every parameter: (stable name, shape, initialization). The order here is
/// the draw order during initialization.
fn parameter_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let n = cfg.hidden_size;
    let ff = cfg.ff_inner_size;
    let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
    out.push(("embed.token".into(), vec![cfg.vocab_size, n], Init::Gaussian));
    out.push(("embed.segment".into(), vec![2, n], Init::Gaussian));
    let attn = |out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str| {
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((format!("{prefix}.{w}"), vec![n, n], Init::Gaussian));
        }
        for b in ["bq", "bk", "bv", "bo"] {
            out.push((format!("{prefix}.{b}"), vec![n], Init::Zero));
        }
    };
    let norm = |out: &mut Vec<(String, Vec<usize>, Init)>, name: String| {
        out.push((format!("{name}.gain"), vec![n], Init::One));
        out.push((format!("{name}.bias"), vec![n], Init::Zero));
    };
    let ffw = |out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str| {
        out.push((format!("{prefix}.w1"), vec![n, ff], Init::Gaussian));
        out.push((format!("{prefix}.b1"), vec![ff], Init::Zero));
        out.push((format!("{prefix}.w2"), vec![ff, n], Init::Gaussian));
        out.push((format!("{prefix}.b2"), vec![n], Init::Zero));
    };
    for i in 0..cfg.num_layers {
        let p = format!("enc.{i:02}");
        attn(&mut out, &format!("{p}.attn"));
        norm(&mut out, format!("{p}.norm1"));
        ffw(&mut out, &format!("{p}.ff"));
        norm(&mut out, format!("{p}.norm2"));
    }
    for i in 0..cfg.num_layers {
        let p = format!("dec.{i:02}");
        attn(&mut out, &format!("{p}.self"));
        norm(&mut out, format!("{p}.norm1"));
        attn(&mut out, &format!("{p}.cross"));
        norm(&mut out, format!("{p}.norm2"));
        ffw(&mut out, &format!("{p}.ff"));
        norm(&mut out, format!("{p}.norm3"));
    }
    out.push(("theme.w1".into(), vec![n, n], Init::Gaussian));
    out.push(("theme.b1".into(), vec![n], Init::Zero));
    out.push(("theme.w2".into(), vec![n, 2], Init::Gaussian));
    out.push(("theme.b2".into(), vec![2], Init::Zero));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Gaussian weights (std 0.02), zero biases, unit norm gains;
    /// deterministic per seed.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut tensors = BTreeMap::new();
        for (name, shape, init) in parameter_layout(cfg) {
            let numel: usize = shape.iter().product();
            let data = match init {
                Init::Gaussian => (0..numel).map(|_| normal.sample(&mut rng)).collect(),
                Init::Zero => vec![0.0; numel],
                Init::One => vec![1.0; numel],
            };
            tensors.insert(name, Tensor::new(data, shape)?.with_grad());
        }
        Ok(ModelParams { tensors })
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }
}

/// Whether a forward pass applies dropout, and with which noise source.
pub enum DropoutMode<'r> {
    Eval,
    Train { p: f64, rng: &'r mut ChaCha8Rng },
}

impl DropoutMode<'_> {
    fn apply(&mut self, tape: &mut Tape, x: TensorRef) -> Result<TensorRef> {
        match self {
            DropoutMode::Eval => Ok(x),
            DropoutMode::Train { p, rng } => {
                if *p == 0.0 {
                    Ok(x)
                } else {
                    tape.dropout(x, *p, rng)
                }
            }
        }
    }
}

/// Fixed sinusoidal position signal, row-major [len, width].
pub fn sinusoidal_positions(len: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * width];
    for pos in 0..len {
        for i in 0..width {
            let exponent = (2 * (i / 2)) as f64 / width as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            out[pos * width + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

pub fn pad_mask(ids: &[u32]) -> Vec<bool> {
    ids.iter().map(|&id| id == PAD).collect()
}

/// Model parameters bound onto a tape for one forward/backward pass.
pub struct Model<'c> {
    pub cfg: &'c ModelConfig,
    refs: BTreeMap<String, TensorRef>,
}

impl<'c> Model<'c> {
    pub fn bind(tape: &mut Tape, cfg: &'c ModelConfig, params: &ModelParams) -> Result<Model<'c>> {
        cfg.validate()?;
        let layout = parameter_layout(cfg);
        if layout.len() != params.tensors.len() {
            return Err(Error::Config(format!(
                "parameter set has {} tensors, architecture needs {}",
                params.tensors.len(),
                layout.len()
            )));
        }
        let mut refs = BTreeMap::new();
        for (name, shape, _) in layout {
            let t = params.tensors.get(&name).ok_or_else(|| {
                Error::Config(format!("missing parameter {name}"))
            })?;
            if t.shape != shape {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, architecture needs {:?}",
                    t.shape, shape
                )));
            }
            refs.insert(name, tape.leaf(t.clone()));
        }
        Ok(Model { cfg, refs })
    }

    fn p(&self, name: &str) -> TensorRef {
        self.refs[name]
    }

    /// Tape handles of every bound parameter, for gradient collection.
    pub fn param_refs(&self) -> &BTreeMap<String, TensorRef> {
        &self.refs
    }

    /// The shared vocabulary embedding/projection table.
    pub fn token_table(&self) -> TensorRef {
        self.p("embed.token")
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len == 0 {
            return Err(Error::arg("model", "empty sequence"));
        }
        if len > self.cfg.max_positions {
            return Err(Error::arg(
                "model",
                format!("sequence length {len} exceeds {} positions", self.cfg.max_positions),
            ));
        }
        Ok(())
    }

    /// Add the scaled position signal (and segment embeddings, if given) to
    /// a [len, N] matrix of token rows.
    pub fn add_positions(
        &self,
        tape: &mut Tape,
        rows: TensorRef,
        segments: Option<&[u32]>,
    ) -> Result<TensorRef> {
        let len = tape.shape(rows)[0];
        self.check_len(len)?;
        let pos = sinusoidal_positions(len, self.cfg.hidden_size);
        let pos = tape.constant(pos, vec![len, self.cfg.hidden_size])?;
        let pos = tape.mul_scalar(pos, self.cfg.positional_scale);
        let mut x = tape.add(rows, pos)?;
        if let Some(segs) = segments {
            if segs.len() != len {
                return Err(Error::shape(
                    "segments",
                    format!("{} segment ids for {len} tokens", segs.len()),
                ));
            }
            if segs.iter().any(|&s| s > 1) {
                return Err(Error::arg("segments", "segment ids must be 0 or 1"));
            }
            let seg = tape.embedding_lookup(self.p("embed.segment"), segs)?;
            x = tape.add(x, seg)?;
        }
        Ok(x)
    }

    pub fn embed_sequence(
        &self,
        tape: &mut Tape,
        ids: &[u32],
        segments: Option<&[u32]>,
    ) -> Result<TensorRef> {
        self.check_len(ids.len())?;
        let rows = tape.embedding_lookup(self.p("embed.token"), ids)?;
        self.add_positions(tape, rows, segments)
    }

    fn affine(
        &self,
        tape: &mut Tape,
        x: TensorRef,
        w: &str,
        b: &str,
    ) -> Result<TensorRef> {
        let y = tape.matmul(x, self.p(w))?;
        tape.add_bias(y, self.p(b))
    }

    /// Multi-head scaled dot-product attention. `key_pad[j]` removes key j
    /// from every query's distribution; `causal` removes keys right of the
    /// query. Per-head attention matrices go into `trace` when provided.
    fn attention(
        &self,
        tape: &mut Tape,
        prefix: &str,
        queries: TensorRef,
        keys_values: TensorRef,
        key_pad: &[bool],
        causal: bool,
        trace: &mut Option<&mut Vec<TensorRef>>,
    ) -> Result<TensorRef> {
        let m = tape.shape(queries)[0];
        let n_keys = tape.shape(keys_values)[0];
        let dh = self.cfg.hidden_size / self.cfg.num_heads;
        let q = self.affine(tape, queries, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
        let k = self.affine(tape, keys_values, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
        let v = self.affine(tape, keys_values, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;

        let mut mask = vec![false; m * n_keys];
        for i in 0..m {
            for j in 0..n_keys {
                mask[i * n_keys + j] = key_pad[j] || (causal && j > i);
            }
        }

        let mut heads = Vec::with_capacity(self.cfg.num_heads);
        for h in 0..self.cfg.num_heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.mul_scalar(scores, 1.0 / (dh as f64).sqrt());
            let scores = tape.masked_fill(scores, &mask, MASK_VALUE)?;
            let attn = tape.softmax(scores, 1)?;
            if let Some(t) = trace.as_deref_mut() {
                t.push(attn);
            }
            heads.push(tape.matmul(attn, vh)?);
        }
        let merged = tape.concat_cols(&heads)?;
        self.affine(tape, merged, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
    }

    fn feed_forward(&self, tape: &mut Tape, prefix: &str, x: TensorRef) -> Result<TensorRef> {
        let h = self.affine(tape, x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let h = tape.relu(h);
        self.affine(tape, h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    /// Post-norm residual connection: LN(x + dropout(sub)).
    fn residual(
        &self,
        tape: &mut Tape,
        norm: &str,
        x: TensorRef,
        sub: TensorRef,
        drop: &mut DropoutMode,
    ) -> Result<TensorRef> {
        let sub = drop.apply(tape, sub)?;
        let sum = tape.add(x, sub)?;
        tape.layer_norm(sum, self.p(&format!("{norm}.gain")), self.p(&format!("{norm}.bias")), LN_EPS)
    }

    /// Encoder over pre-positioned embedding rows.
    pub fn encode_rows(
        &self,
        tape: &mut Tape,
        rows: TensorRef,
        key_pad: &[bool],
        drop: &mut DropoutMode,
        mut trace: Option<&mut Vec<TensorRef>>,
    ) -> Result<TensorRef> {
        if key_pad.len() != tape.shape(rows)[0] {
            return Err(Error::shape("encode", "pad mask length mismatch"));
        }
        let mut x = drop.apply(tape, rows)?;
        for i in 0..self.cfg.num_layers {
            let p = format!("enc.{i:02}");
            let a = self.attention(tape, &format!("{p}.attn"), x, x, key_pad, false, &mut trace)?;
            x = self.residual(tape, &format!("{p}.norm1"), x, a, drop)?;
            let f = self.feed_forward(tape, &format!("{p}.ff"), x)?;
            x = self.residual(tape, &format!("{p}.norm2"), x, f, drop)?;
        }
        Ok(x)
    }

    pub fn encode(
        &self,
        tape: &mut Tape,
        ids: &[u32],
        segments: Option<&[u32]>,
        drop: &mut DropoutMode,
    ) -> Result<TensorRef> {
        let rows = self.embed_sequence(tape, ids, segments)?;
        self.encode_rows(tape, rows, &pad_mask(ids), drop, None)
    }

    /// Like `encode`, returning every layer/head attention matrix.
    pub fn encode_traced(
        &self,
        tape: &mut Tape,
        ids: &[u32],
        segments: Option<&[u32]>,
        drop: &mut DropoutMode,
    ) -> Result<(TensorRef, Vec<TensorRef>)> {
        let rows = self.embed_sequence(tape, ids, segments)?;
        let mut trace = Vec::new();
        let states = self.encode_rows(tape, rows, &pad_mask(ids), drop, Some(&mut trace))?;
        Ok((states, trace))
    }

    /// Decoder states over a teacher-forced prefix: causal self-attention,
    /// then cross-attention over the encoder states.
    pub fn decode_states(
        &self,
        tape: &mut Tape,
        encoder_states: TensorRef,
        encoder_pad: &[bool],
        prefix: &[u32],
        drop: &mut DropoutMode,
    ) -> Result<TensorRef> {
        if prefix.is_empty() {
            return Err(Error::arg("decode", "empty prefix"));
        }
        if encoder_pad.len() != tape.shape(encoder_states)[0] {
            return Err(Error::shape("decode", "encoder pad mask length mismatch"));
        }
        let rows = self.embed_sequence(tape, prefix, None)?;
        let mut x = drop.apply(tape, rows)?;
        let self_pad = pad_mask(prefix);
        for i in 0..self.cfg.num_layers {
            let p = format!("dec.{i:02}");
            let a =
                self.attention(tape, &format!("{p}.self"), x, x, &self_pad, true, &mut None)?;
            x = self.residual(tape, &format!("{p}.norm1"), x, a, drop)?;
            let c = self.attention(
                tape,
                &format!("{p}.cross"),
                x,
                encoder_states,
                encoder_pad,
                false,
                &mut None,
            )?;
            x = self.residual(tape, &format!("{p}.norm2"), x, c, drop)?;
            let f = self.feed_forward(tape, &format!("{p}.ff"), x)?;
            x = self.residual(tape, &format!("{p}.norm3"), x, f, drop)?;
        }
        Ok(x)
    }

    /// Tied projection: logits = states · Vᵀ, one row per position.
    pub fn logits(&self, tape: &mut Tape, states: TensorRef) -> Result<TensorRef> {
        let vt = tape.transpose(self.p("embed.token"))?;
        tape.matmul(states, vt)
    }

    pub fn decode_logits(
        &self,
        tape: &mut Tape,
        encoder_states: TensorRef,
        encoder_pad: &[bool],
        prefix: &[u32],
        drop: &mut DropoutMode,
    ) -> Result<TensorRef> {
        let states = self.decode_states(tape, encoder_states, encoder_pad, prefix, drop)?;
        self.logits(tape, states)
    }

    /// Two-layer head over the first encoder state: affine, ReLU, affine.
    pub fn theme_logits(&self, tape: &mut Tape, encoder_states: TensorRef) -> Result<TensorRef> {
        let first = tape.slice_rows(encoder_states, 0, 1)?;
        let h = self.affine(tape, first, "theme.w1", "theme.b1")?;
        let h = tape.relu(h);
        self.affine(tape, h, "theme.w2", "theme.b2")
    }

    /// (similar, distinct) probabilities for a packed pair.
    pub fn theme_classify(
        &self,
        tape: &mut Tape,
        packed: &[u32],
        segments: &[u32],
        drop: &mut DropoutMode,
    ) -> Result<TensorRef> {
        if packed.first() != Some(&CLS) {
            return Err(Error::arg("theme_classify", "packed pair must start with [CLS]"));
        }
        let states = self.encode(tape, packed, Some(segments), drop)?;
        let logits = self.theme_logits(tape, states)?;
        tape.softmax(logits, 1)
    }
}
