//! Training objectives.
//!
//! Pretraining: reconstruct an article's lead from its body. Finetuning:
//! no references exist, so two self-supervised losses stand in. The theme
//! loss asks a classifier to find the generated summary thematically close
//! to its article, with gradients reaching the generator through a
//! straight-through Gumbel-Softmax relaxation of token choice; the denoise
//! loss reconstructs an article from a corrupted version of itself.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, TensorRef};
use crate::error::{Error, Result};
use crate::model::{pad_mask, DropoutMode, Model, MASK_VALUE};
use crate::tokenizer::{CLS, EOS, PAD, SEP, START};

/// One differentiable generation pass.
pub struct GumbelSample {
    /// Sampled tokens, as emitted on the forward pass.
    pub hard_ids: Vec<u32>,
    /// Per-step relaxed distributions over the vocabulary, [1, V] each;
    /// gradient reaches the model through these.
    pub soft_dists: Vec<TensorRef>,
    /// Per-step embedding rows [1, N]: the hard token's embedding forward,
    /// the relaxed mixture on the backward pass.
    pub st_rows: Vec<TensorRef>,
    pub temperature: f64,
}

/// Draw one token. The perturbed logits `log softmax(row) + g` with
/// standard Gumbel noise g make argmax an exact sample from
/// softmax(row); the returned soft distribution is the τ-tempered softmax
/// of the same perturbed values, carrying the gradient.
pub fn gumbel_softmax(
    tape: &mut Tape,
    logits_row: TensorRef,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(u32, TensorRef)> {
    if temperature <= 0.0 {
        return Err(Error::arg("gumbel_softmax", "temperature must be positive"));
    }
    let shape = tape.shape(logits_row).to_vec();
    if shape.len() != 2 || shape[0] != 1 {
        return Err(Error::shape("gumbel_softmax", format!("expected [1, V], got {shape:?}")));
    }
    let v = shape[1];
    let noise: Vec<f64> = (0..v)
        .map(|_| {
            let u: f64 = rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12);
            -(-u.ln()).ln()
        })
        .collect();
    let log_probs = tape.log_softmax(logits_row, 1)?;
    let g = tape.constant(noise, vec![1, v])?;
    let perturbed = tape.add(log_probs, g)?;
    let hard = {
        let d = tape.data(perturbed);
        let mut best = 0;
        for i in 1..v {
            if d[i] > d[best] {
                best = i;
            }
        }
        best as u32
    };
    let scaled = tape.mul_scalar(perturbed, 1.0 / temperature);
    let soft = tape.softmax(scaled, 1)?;
    Ok((hard, soft))
}

/// Embedding row whose forward value is the hard token's row of the
/// vocabulary table and whose backward pass treats the token choice as the
/// relaxed distribution: (onehot - soft + soft) · V.
fn straight_through_row(
    tape: &mut Tape,
    model: &Model,
    hard: u32,
    soft: TensorRef,
) -> Result<TensorRef> {
    let v = tape.shape(soft)[1];
    let soft_val = tape.data(soft).to_vec();
    let correction: Vec<f64> = (0..v)
        .map(|i| if i as u32 == hard { 1.0 - soft_val[i] } else { -soft_val[i] })
        .collect();
    let c = tape.constant(correction, vec![1, v])?;
    let st_dist = tape.add(c, soft)?;
    tape.matmul(st_dist, model.token_table())
}

/// Autoregressive sampling that stays on the tape. The prefix grows by hard
/// token ids; each step's relaxed distribution and straight-through
/// embedding row are kept for downstream losses. Special tokens never
/// appear: structural ids are masked at every step and the end piece is
/// additionally masked at the first step, so at least one token is always
/// produced. Generation stops at the end piece or `max_len`.
pub fn generate_differentiable(
    tape: &mut Tape,
    model: &Model,
    article: &[u32],
    max_len: usize,
    temperature: f64,
    rng: &mut ChaCha8Rng,
    drop: &mut DropoutMode,
) -> Result<GumbelSample> {
    if max_len == 0 {
        return Err(Error::arg("generate", "max_len must be at least 1"));
    }
    let enc = model.encode(tape, article, None, drop)?;
    let enc_pad = pad_mask(article);
    let vocab = model.cfg.vocab_size;
    let mut sample = GumbelSample {
        hard_ids: Vec::new(),
        soft_dists: Vec::new(),
        st_rows: Vec::new(),
        temperature,
    };
    let mut prefix = vec![START];
    for step in 0..max_len {
        let states = model.decode_states(tape, enc, &enc_pad, &prefix, drop)?;
        let last = tape.slice_rows(states, prefix.len() - 1, 1)?;
        let row = model.logits(tape, last)?;
        let mut mask = vec![false; vocab];
        for special in [PAD, START, SEP, CLS] {
            mask[special as usize] = true;
        }
        if step == 0 {
            mask[EOS as usize] = true;
        }
        let masked = tape.masked_fill(row, &mask, MASK_VALUE)?;
        let (hard, soft) = gumbel_softmax(tape, masked, temperature, rng)?;
        if hard == EOS {
            break;
        }
        let st = straight_through_row(tape, model, hard, soft)?;
        sample.hard_ids.push(hard);
        sample.soft_dists.push(soft);
        sample.st_rows.push(st);
        prefix.push(hard);
    }
    Ok(sample)
}

/// Cross-entropy of the theme classifier on one packed pair.
pub fn theme_pair_loss(
    tape: &mut Tape,
    model: &Model,
    a: &[u32],
    b: &[u32],
    label: u32,
    drop: &mut DropoutMode,
) -> Result<TensorRef> {
    let (packed, segments) = crate::corpus::pack_pair(a, b);
    let states = model.encode(tape, &packed, Some(&segments), drop)?;
    let logits = model.theme_logits(tape, states)?;
    tape.cross_entropy(logits, &[label], None)
}

/// Label convention for the theme classifier: index 1 = same theme.
pub const THEME_SIMILAR: u32 = 1;
pub const THEME_DISTINCT: u32 = 0;

/// Three binary cross-entropy terms: adjacent windows from one article are
/// similar, the generated summary is similar to its article, and windows
/// from different articles are distinct. The summary enters as
/// straight-through embedding rows so this loss trains the generator too;
/// the article side is truncated to fit the encoder.
pub fn theme_loss(
    tape: &mut Tape,
    model: &Model,
    a1: &[u32],
    a2: &[u32],
    b1: &[u32],
    summary: &GumbelSample,
    article: &[u32],
    drop: &mut DropoutMode,
) -> Result<TensorRef> {
    let same = theme_pair_loss(tape, model, a1, a2, THEME_SIMILAR, drop)?;
    let distinct = theme_pair_loss(tape, model, a1, b1, THEME_DISTINCT, drop)?;

    // packed layout [CLS] article [SEP] summary, summary rows straight-through
    let s_len = summary.st_rows.len();
    let budget = model.cfg.max_positions.saturating_sub(s_len + 2);
    let d_trunc = &article[..article.len().min(budget)];
    let mut head = vec![CLS];
    head.extend_from_slice(d_trunc);
    head.push(SEP);
    let head_rows = tape.embedding_lookup(model.token_table(), &head)?;
    let mut parts = vec![head_rows];
    parts.extend_from_slice(&summary.st_rows);
    let rows = tape.concat_rows(&parts)?;
    let mut segments = vec![0u32; head.len()];
    segments.extend(std::iter::repeat(1).take(s_len));
    let rows = model.add_positions(tape, rows, Some(&segments))?;
    let key_pad = vec![false; head.len() + s_len];
    let states = model.encode_rows(tape, rows, &key_pad, drop, None)?;
    let logits = model.theme_logits(tape, states)?;
    let summary_term = tape.cross_entropy(logits, &[THEME_SIMILAR], None)?;

    let partial = tape.add(same, summary_term)?;
    tape.add(partial, distinct)
}

/// Reconstruction from a corrupted input: encode x', teacher-force the
/// decoder on [START] + x[..-1], score against x. The clean sequence is
/// never encoded.
pub fn denoise_loss(
    tape: &mut Tape,
    model: &Model,
    clean: &[u32],
    corrupted: &[u32],
    drop: &mut DropoutMode,
) -> Result<TensorRef> {
    if clean.is_empty() || corrupted.is_empty() {
        return Err(Error::arg("denoise_loss", "empty sequence"));
    }
    let enc = model.encode(tape, corrupted, None, drop)?;
    let mut prefix = vec![START];
    prefix.extend_from_slice(&clean[..clean.len() - 1]);
    let logits = model.decode_logits(tape, enc, &pad_mask(corrupted), &prefix, drop)?;
    tape.cross_entropy(logits, clean, Some(PAD))
}

/// Lead reconstruction: encode the body (the lead never enters the
/// encoder), teacher-force the lead and score it with the end piece
/// appended, so generation learns where summaries stop.
pub fn pretrain_loss(
    tape: &mut Tape,
    model: &Model,
    body: &[u32],
    lead: &[u32],
    drop: &mut DropoutMode,
) -> Result<TensorRef> {
    if body.is_empty() || lead.is_empty() {
        return Err(Error::arg("pretrain_loss", "empty body or lead"));
    }
    let enc = model.encode(tape, body, None, drop)?;
    let mut prefix = vec![START];
    prefix.extend_from_slice(lead);
    let mut targets = lead.to_vec();
    targets.push(EOS);
    let logits = model.decode_logits(tape, enc, &pad_mask(body), &prefix, drop)?;
    tape.cross_entropy(logits, &targets, Some(PAD))
}

/// Equal-weight mean of the two finetuning terms.
pub fn combined_loss(tape: &mut Tape, theme: TensorRef, denoise: TensorRef) -> Result<TensorRef> {
    let sum = tape.add(theme, denoise)?;
    Ok(tape.mul_scalar(sum, 0.5))
}
