//! Test-time generation: greedy and beam search with a length cap.

use crate::autodiff::{Tape, TensorRef};
use crate::error::{Error, Result};
use crate::model::{pad_mask, DropoutMode, Model, ModelConfig, ModelParams, MASK_VALUE};
use crate::tokenizer::{CLS, EOS, NUM_SPECIALS, PAD, SEP, START};

/// Per-step scoring interface, so search is testable against hand-built
/// transition tables as well as the transformer.
pub trait NextToken {
    /// Raw (unnormalized) logits over the vocabulary for the token after
    /// `prefix`. The prefix always starts with the start piece.
    fn next_logits(&mut self, prefix: &[u32]) -> Result<Vec<f64>>;
    fn vocab_size(&self) -> usize;
}

/// Scores continuations under a bound transformer. The article is encoded
/// once; each call runs one decoder pass on the same tape in eval mode.
pub struct TransformerScorer<'c> {
    tape: Tape,
    model: Model<'c>,
    enc: TensorRef,
    enc_pad: Vec<bool>,
}

impl<'c> TransformerScorer<'c> {
    pub fn new(cfg: &'c ModelConfig, params: &ModelParams, article: &[u32]) -> Result<Self> {
        let mut tape = Tape::new();
        let model = Model::bind(&mut tape, cfg, params)?;
        let enc = model.encode(&mut tape, article, None, &mut DropoutMode::Eval)?;
        let enc_pad = pad_mask(article);
        Ok(Self { tape, model, enc, enc_pad })
    }
}

impl NextToken for TransformerScorer<'_> {
    fn next_logits(&mut self, prefix: &[u32]) -> Result<Vec<f64>> {
        let states = self.model.decode_states(
            &mut self.tape,
            self.enc,
            &self.enc_pad,
            prefix,
            &mut DropoutMode::Eval,
        )?;
        let last = self.tape.slice_rows(states, prefix.len() - 1, 1)?;
        let row = self.model.logits(&mut self.tape, last)?;
        Ok(self.tape.data(row).to_vec())
    }

    fn vocab_size(&self) -> usize {
        self.model.cfg.vocab_size
    }
}

#[derive(Debug, Clone)]
pub struct BeamHypothesis {
    /// Generated tokens; never contains a special id.
    pub tokens: Vec<u32>,
    /// Sum of per-step log-probabilities, including the end piece's when
    /// the hypothesis ended on it.
    pub score: f64,
    pub finished: bool,
    /// Number of log-probability terms in `score`.
    scored_steps: usize,
}

impl BeamHypothesis {
    fn normalized(&self) -> f64 {
        self.score / self.scored_steps.max(1) as f64
    }
}

fn log_softmax_vec(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|l| l - lse).collect()
}

/// Structural pieces never come out of generation; the end piece is
/// additionally barred at the first step so output is never empty.
fn mask_specials(logits: &mut [f64], first_step: bool) {
    for id in [PAD, START, SEP, CLS] {
        logits[id as usize] = MASK_VALUE;
    }
    if first_step {
        logits[EOS as usize] = MASK_VALUE;
    }
}

fn check_args(scorer: &dyn NextToken, max_len: usize) -> Result<()> {
    if max_len == 0 {
        return Err(Error::arg("decode", "max_len must be at least 1"));
    }
    if scorer.vocab_size() <= NUM_SPECIALS as usize {
        return Err(Error::arg("decode", "vocabulary holds no generatable piece"));
    }
    Ok(())
}

/// Argmax token per step until the end piece or the cap.
pub fn greedy_decode(scorer: &mut dyn NextToken, max_len: usize) -> Result<Vec<u32>> {
    check_args(scorer, max_len)?;
    let mut prefix = vec![START];
    let mut out = Vec::new();
    for step in 0..max_len {
        let mut logits = scorer.next_logits(&prefix)?;
        mask_specials(&mut logits, step == 0);
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
            debug_assert!(l.is_finite(), "non-finite logit at {i}");
        }
        if best as u32 == EOS {
            break;
        }
        out.push(best as u32);
        prefix.push(best as u32);
    }
    Ok(out)
}

/// Length-capped beam search from the start piece. Hypotheses compete on
/// cumulative log-probability while open; a hypothesis finishes by choosing
/// the end piece or by reaching the cap, and the finished hypothesis with
/// the best per-step average wins. Width 1 reproduces greedy search: the
/// single survivor at each step is the argmax extension.
pub fn beam_search(
    scorer: &mut dyn NextToken,
    beam_width: usize,
    max_len: usize,
) -> Result<Vec<u32>> {
    if beam_width == 0 {
        return Err(Error::arg("beam_search", "beam_width must be at least 1"));
    }
    check_args(scorer, max_len)?;
    let mut beams = vec![BeamHypothesis {
        tokens: Vec::new(),
        score: 0.0,
        finished: false,
        scored_steps: 0,
    }];
    for step in 0..max_len {
        if beams.iter().all(|b| b.finished) {
            break;
        }
        let mut candidates: Vec<BeamHypothesis> = Vec::new();
        for hyp in &beams {
            if hyp.finished {
                candidates.push(hyp.clone());
                continue;
            }
            let mut prefix = vec![START];
            prefix.extend_from_slice(&hyp.tokens);
            let mut logits = scorer.next_logits(&prefix)?;
            mask_specials(&mut logits, step == 0);
            let logprobs = log_softmax_vec(&logits);
            for (tok, &lp) in logprobs.iter().enumerate() {
                if lp <= MASK_VALUE / 2.0 {
                    continue;
                }
                debug_assert!(lp <= 1e-12, "log-probability above zero: {lp}");
                let mut next = hyp.clone();
                next.score += lp;
                next.scored_steps += 1;
                if tok as u32 == EOS {
                    next.finished = true;
                } else {
                    next.tokens.push(tok as u32);
                    next.finished = next.tokens.len() == max_len;
                }
                candidates.push(next);
            }
        }
        // cumulative score, ties broken by token sequence for determinism
        candidates.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        candidates.truncate(beam_width);
        beams = candidates;
    }
    beams
        .into_iter()
        .filter(|b| b.finished || !b.tokens.is_empty())
        .max_by(|a, b| {
            a.normalized()
                .partial_cmp(&b.normalized())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| b.tokens.cmp(&a.tokens))
        })
        .map(|b| b.tokens)
        .ok_or_else(|| Error::Invariant("beam search retained no hypothesis".into()))
}
