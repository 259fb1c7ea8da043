//! Optimization loops, optimizer state, checkpoints, and the metrics log.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, TensorRef};
use crate::corpus::{corrupt, sample_theme_pairs, CorruptionSpec};
use crate::decode::{greedy_decode, TransformerScorer};
use crate::error::{Error, Result};
use crate::metrics::rouge_l;
use crate::model::{DropoutMode, Model, ModelConfig, ModelParams};
use crate::objectives::{denoise_loss, generate_differentiable, pretrain_loss, theme_loss};
use crate::write_atomic;

/// Global gradient-norm ceiling applied before every optimizer step.
pub const GRAD_CLIP_NORM: f64 = 1.0;

// ---- optimizer ----------------------------------------------------------------

/// Adam-family state. With `rectify` the variance term is switched off
/// during early steps and re-enabled with a rectification factor once its
/// estimate is tractable; without it this is plain Adam with bias
/// correction.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub rectify: bool,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(lr: f64, rectify: bool) -> Self {
        OptimizerState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            rectify,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One in-place update. Parameters without an entry in `grads` are left
    /// untouched; any non-finite gradient aborts the step.
    pub fn apply(
        &mut self,
        params: &mut ModelParams,
        grads: &BTreeMap<String, Vec<f64>>,
    ) -> Result<()> {
        for (name, g) in grads {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Invariant(format!("non-finite gradient in {name}")));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let b1t = self.beta1.powf(t);
        let b2t = self.beta2.powf(t);
        let rho_inf = 2.0 / (1.0 - self.beta2) - 1.0;
        let rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t);
        let rect = if rho_t > 4.0 {
            Some(
                (((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
                    / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                    .sqrt(),
            )
        } else {
            None
        };
        for (name, tensor) in params.tensors.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.len() != tensor.data.len() {
                return Err(Error::shape(
                    "optimizer",
                    format!("{name}: gradient len {} vs param {}", g.len(), tensor.data.len()),
                ));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / (1.0 - b1t);
                let delta = if !self.rectify {
                    let v_hat = (v[i] / (1.0 - b2t)).sqrt();
                    self.lr * m_hat / (v_hat + self.eps)
                } else if let Some(r) = rect {
                    let v_hat = (v[i] / (1.0 - b2t)).sqrt();
                    self.lr * r * m_hat / (v_hat + self.eps)
                } else {
                    // variance estimate still intractable: momentum only
                    self.lr * m_hat
                };
                tensor.data[i] -= delta;
            }
        }
        Ok(())
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_gradients(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

// ---- run configuration ---------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub seed: u64,
    pub max_gen_len: usize,
    pub temperature: f64,
    pub rectify: bool,
    /// Window length for theme-pair sampling during finetuning.
    pub theme_window: usize,
}

impl TrainConfig {
    pub fn pretrain(seed: u64) -> Self {
        TrainConfig {
            phase: Phase::Pretrain,
            lr: 1e-4,
            batch_size: 16,
            epochs: 10,
            dropout: 0.3,
            seed,
            max_gen_len: 48,
            temperature: 0.1,
            rectify: true,
            theme_window: 32,
        }
    }

    pub fn finetune(seed: u64) -> Self {
        TrainConfig { phase: Phase::Finetune, lr: 2e-4, epochs: 1, ..TrainConfig::pretrain(seed) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if self.max_gen_len == 0 {
            return Err(Error::Config("max_gen_len must be at least 1".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.theme_window == 0 {
            return Err(Error::Config("theme_window must be at least 1".into()));
        }
        Ok(())
    }
}

// ---- metrics log ---------------------------------------------------------------

/// One line of the training log, serialized as JSON per line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub phase: String,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_theme: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_denoise: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_rouge_l: Option<f64>,
}

fn emit(log: &mut Option<&mut dyn Write>, record: &MetricsRecord) -> Result<()> {
    if let Some(w) = log {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Data(format!("metrics record: {e}")))?;
        writeln!(w, "{line}").map_err(|e| Error::Data(format!("metrics log write: {e}")))?;
    }
    Ok(())
}

// ---- checkpoints ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub optimizer: Option<OptimizerState>,
    pub step: u64,
    /// Validation score recorded when this checkpoint was selected.
    pub val_rouge_l: Option<f64>,
}

const MAGIC: &[u8; 8] = b"LEDECKPT";
const VERSION: u8 = 1;

fn put_u32(buf: &mut Vec<u8>, x: u32) {
    buf.extend_from_slice(&x.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, x: u64) {
    buf.extend_from_slice(&x.to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, x: f64) {
    buf.extend_from_slice(&x.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, xs: &[f64]) {
    put_u64(buf, xs.len() as u64);
    for &x in xs {
        put_f64(buf, x);
    }
}

fn put_moments(buf: &mut Vec<u8>, map: &BTreeMap<String, Vec<f64>>) {
    put_u32(buf, map.len() as u32);
    for (name, xs) in map {
        put_str(buf, name);
        put_f64s(buf, xs);
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid utf-8 in name".into()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| {
            Error::Checkpoint("array length overflow".into())
        })?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn moments(&mut self) -> Result<BTreeMap<String, Vec<f64>>> {
        let n = self.u32()?;
        let mut map = BTreeMap::new();
        for _ in 0..n {
            let name = self.str()?;
            let xs = self.f64s()?;
            map.insert(name, xs);
        }
        Ok(map)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.push(VERSION);
        let cfg = serde_json::to_string(&self.config)
            .map_err(|e| Error::Checkpoint(format!("config encode: {e}")))?;
        put_str(&mut buf, &cfg);
        put_u64(&mut buf, self.step);
        match self.val_rouge_l {
            Some(v) => {
                buf.push(1);
                put_f64(&mut buf, v);
            }
            None => buf.push(0),
        }
        put_u32(&mut buf, self.params.tensors.len() as u32);
        for (name, t) in &self.params.tensors {
            put_str(&mut buf, name);
            put_u32(&mut buf, t.shape.len() as u32);
            for &d in &t.shape {
                put_u64(&mut buf, d as u64);
            }
            put_f64s(&mut buf, &t.data);
        }
        match &self.optimizer {
            Some(o) => {
                buf.push(1);
                put_f64(&mut buf, o.lr);
                put_f64(&mut buf, o.beta1);
                put_f64(&mut buf, o.beta2);
                put_f64(&mut buf, o.eps);
                buf.push(o.rectify as u8);
                put_u64(&mut buf, o.step);
                put_moments(&mut buf, &o.m);
                put_moments(&mut buf, &o.v);
            }
            None => buf.push(0),
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut c = Cursor { buf: bytes, pos: 0 };
        if c.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let version = c.u8()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let cfg_json = c.str()?;
        let config: ModelConfig = serde_json::from_str(&cfg_json)
            .map_err(|e| Error::Checkpoint(format!("config decode: {e}")))?;
        let step = c.u64()?;
        let val_rouge_l = if c.u8()? == 1 { Some(c.f64()?) } else { None };
        let count = c.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = c.str()?;
            let rank = c.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(c.u64()? as usize);
            }
            let data = c.f64s()?;
            tensors.insert(name, Tensor::new(data, shape)?.with_grad());
        }
        let optimizer = if c.u8()? == 1 {
            let lr = c.f64()?;
            let beta1 = c.f64()?;
            let beta2 = c.f64()?;
            let eps = c.f64()?;
            let rectify = c.u8()? == 1;
            let ostep = c.u64()?;
            let m = c.moments()?;
            let v = c.moments()?;
            Some(OptimizerState { lr, beta1, beta2, eps, rectify, step: ostep, m, v })
        } else {
            None
        };
        if c.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after checkpoint payload",
                bytes.len() - c.pos
            )));
        }
        Ok(Checkpoint { config, params: ModelParams { tensors }, optimizer, step, val_rouge_l })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

// ---- training loops ------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainExample {
    pub body: Vec<u32>,
    pub lead: Vec<u32>,
}

fn collect_grads(tape: &Tape, model: &Model) -> BTreeMap<String, Vec<f64>> {
    model
        .param_refs()
        .iter()
        .map(|(name, &r)| {
            let g = tape
                .grad(r)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.data(r).len()]);
            (name.clone(), g)
        })
        .collect()
}

fn batch_mean(tape: &mut Tape, losses: &[TensorRef]) -> Result<TensorRef> {
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    Ok(tape.mul_scalar(total, 1.0 / losses.len() as f64))
}

fn finite_scalar(tape: &Tape, loss: TensorRef, what: &str) -> Result<f64> {
    let v = tape.data(loss)[0];
    if !v.is_finite() {
        return Err(Error::Invariant(format!("{what} became non-finite: {v}")));
    }
    Ok(v)
}

/// Mean greedy-decode ROUGE-L F1 of the model against the held-out leads.
pub fn validation_rouge_l(
    cfg: &ModelConfig,
    params: &ModelParams,
    val: &[PretrainExample],
    max_gen_len: usize,
    detok: &dyn Fn(&[u32]) -> String,
) -> Result<f64> {
    let mut total = 0.0;
    for ex in val {
        let body = &ex.body[..ex.body.len().min(cfg.max_positions)];
        let mut scorer = TransformerScorer::new(cfg, params, body)?;
        let ids = greedy_decode(&mut scorer, max_gen_len)?;
        total += rouge_l(&detok(&ids), &detok(&ex.lead)).f1;
    }
    Ok(total / val.len() as f64)
}

/// Epochs of lead-reconstruction steps; after each epoch the model greedy
/// decodes the validation bodies and the best-scoring parameters are kept.
/// The encoder only ever sees bodies, never leads.
pub fn pretrain(
    train: &[PretrainExample],
    val: &[PretrainExample],
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    detok: &dyn Fn(&[u32]) -> String,
    mut log: Option<&mut dyn Write>,
) -> Result<Checkpoint> {
    cfg.validate()?;
    tcfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("pretraining needs a non-empty training set".into()));
    }
    if val.is_empty() {
        return Err(Error::Data("pretraining needs a non-empty validation set".into()));
    }
    for ex in train.iter().chain(val) {
        if ex.body.is_empty() || ex.lead.is_empty() {
            return Err(Error::Data("empty body or lead in pretraining data".into()));
        }
    }
    if tcfg.max_gen_len + 1 > cfg.max_positions {
        return Err(Error::Config("max_gen_len must be below max_positions".into()));
    }

    let mut params = ModelParams::init(cfg, tcfg.seed)?;
    let mut opt = OptimizerState::new(tcfg.lr, tcfg.rectify);
    let mut data_rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_add(0x9e37_79b9));
    let lead_cap = cfg.max_positions - 1;

    if tcfg.epochs == 0 {
        return Ok(Checkpoint {
            config: cfg.clone(),
            params,
            optimizer: None,
            step: 0,
            val_rouge_l: None,
        });
    }

    let mut best: Option<(f64, ModelParams, u64)> = None;
    let mut global_step = 0u64;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _epoch in 0..tcfg.epochs {
        order.shuffle(&mut data_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0u64;
        for chunk in order.chunks(tcfg.batch_size) {
            let mut tape = Tape::new();
            let model = Model::bind(&mut tape, cfg, &params)?;
            let mut drop = if tcfg.dropout > 0.0 {
                DropoutMode::Train { p: tcfg.dropout, rng: &mut drop_rng }
            } else {
                DropoutMode::Eval
            };
            let mut losses = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let ex = &train[i];
                debug_assert!(
                    ex.body == ex.lead || !ex.body.starts_with(&ex.lead),
                    "encoder input appears to begin with the lead"
                );
                let body = &ex.body[..ex.body.len().min(cfg.max_positions)];
                let lead = &ex.lead[..ex.lead.len().min(lead_cap)];
                losses.push(pretrain_loss(&mut tape, &model, body, lead, &mut drop)?);
            }
            let loss = batch_mean(&mut tape, &losses)?;
            let loss_val = finite_scalar(&tape, loss, "pretraining loss")?;
            tape.backward(loss)?;
            let mut grads = collect_grads(&tape, &model);
            clip_gradients(&mut grads, GRAD_CLIP_NORM);
            opt.apply(&mut params, &grads)?;
            global_step += 1;
            epoch_loss += loss_val;
            batches += 1;
            emit(
                &mut log,
                &MetricsRecord {
                    step: global_step,
                    phase: "pretrain".into(),
                    loss: loss_val,
                    loss_theme: None,
                    loss_denoise: None,
                    val_rouge_l: None,
                },
            )?;
        }
        let score = validation_rouge_l(cfg, &params, val, tcfg.max_gen_len, detok)?;
        emit(
            &mut log,
            &MetricsRecord {
                step: global_step,
                phase: "pretrain".into(),
                loss: epoch_loss / batches as f64,
                loss_theme: None,
                loss_denoise: None,
                val_rouge_l: Some(score),
            },
        )?;
        if best.as_ref().map_or(true, |(b, _, _)| score > *b) {
            best = Some((score, params.clone(), global_step));
        }
    }
    let (score, best_params, step) = best.expect("at least one epoch ran");
    Ok(Checkpoint {
        config: cfg.clone(),
        params: best_params,
        optimizer: None,
        step,
        val_rouge_l: Some(score),
    })
}

/// Self-supervised finetuning: per batch member, sample a theme pair,
/// generate a summary differentiably, corrupt the article with tokens from
/// the other articles, and take one step on the mean of the theme and
/// denoising losses. No reference summaries exist anywhere in the inputs.
pub fn finetune(
    articles: &[Vec<u32>],
    ckpt: &Checkpoint,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    corruption: &CorruptionSpec,
    mut log: Option<&mut dyn Write>,
) -> Result<Checkpoint> {
    cfg.validate()?;
    tcfg.validate()?;
    corruption.validate()?;
    if ckpt.config != *cfg {
        return Err(Error::Checkpoint(format!(
            "checkpoint config {:?} does not match trainer config {:?}",
            ckpt.config, cfg
        )));
    }
    if articles.len() < 2 {
        return Err(Error::Data("finetuning needs at least two articles".into()));
    }
    if tcfg.max_gen_len + 1 > cfg.max_positions {
        return Err(Error::Config("max_gen_len must be below max_positions".into()));
    }
    // cap article length so the corrupted version (up to 1.5x longer)
    // still fits the encoder
    let cap = (cfg.max_positions * 2) / 3;
    if cap == 0 {
        return Err(Error::Config("max_positions too small for corruption growth".into()));
    }
    let docs: Vec<Vec<u32>> = articles
        .iter()
        .map(|a| a[..a.len().min(cap)].to_vec())
        .collect();
    if docs.iter().any(|d| d.is_empty()) {
        return Err(Error::Data("empty article in finetuning data".into()));
    }

    let mut params = ckpt.params.clone();
    let mut opt = OptimizerState::new(tcfg.lr, tcfg.rectify);
    let mut data_rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_add(0x9e37_79b9));
    let mut global_step = ckpt.step;
    let mut order: Vec<usize> = (0..docs.len()).collect();
    for _epoch in 0..tcfg.epochs {
        order.shuffle(&mut data_rng);
        for chunk in order.chunks(tcfg.batch_size) {
            let mut tape = Tape::new();
            let model = Model::bind(&mut tape, cfg, &params)?;
            let mut theme_losses = Vec::with_capacity(chunk.len());
            let mut denoise_losses = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let doc = &docs[i];
                let pair = sample_theme_pairs(&docs, tcfg.theme_window, &mut data_rng)?;
                let pool: Vec<u32> = docs
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .flat_map(|(_, d)| d.iter().copied())
                    .collect();
                let corrupted = corrupt(doc, &pool, corruption, &mut data_rng)?;
                let mut drop = if tcfg.dropout > 0.0 {
                    DropoutMode::Train { p: tcfg.dropout, rng: &mut drop_rng }
                } else {
                    DropoutMode::Eval
                };
                let sample = generate_differentiable(
                    &mut tape,
                    &model,
                    doc,
                    tcfg.max_gen_len,
                    tcfg.temperature,
                    &mut data_rng,
                    &mut drop,
                )?;
                theme_losses.push(theme_loss(
                    &mut tape, &model, &pair.a1, &pair.a2, &pair.b1, &sample, doc, &mut drop,
                )?);
                denoise_losses.push(denoise_loss(&mut tape, &model, doc, &corrupted, &mut drop)?);
            }
            let theme_mean = batch_mean(&mut tape, &theme_losses)?;
            let denoise_mean = batch_mean(&mut tape, &denoise_losses)?;
            let loss = crate::objectives::combined_loss(&mut tape, theme_mean, denoise_mean)?;
            let loss_val = finite_scalar(&tape, loss, "finetuning loss")?;
            let theme_val = tape.data(theme_mean)[0];
            let denoise_val = tape.data(denoise_mean)[0];
            tape.backward(loss)?;
            let mut grads = collect_grads(&tape, &model);
            clip_gradients(&mut grads, GRAD_CLIP_NORM);
            opt.apply(&mut params, &grads)?;
            global_step += 1;
            emit(
                &mut log,
                &MetricsRecord {
                    step: global_step,
                    phase: "finetune".into(),
                    loss: loss_val,
                    loss_theme: Some(theme_val),
                    loss_denoise: Some(denoise_val),
                    val_rouge_l: None,
                },
            )?;
        }
    }
    Ok(Checkpoint {
        config: cfg.clone(),
        params,
        optimizer: Some(opt),
        step: global_step,
        val_rouge_l: None,
    })
}
