//! Command-line pipeline: prep -> train-tokenizer -> pretrain -> finetune ->
//! generate -> evaluate. A TOML config file supplies defaults; flags
//! override file values; the effective config is echoed next to every
//! artifact for provenance.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::corpus::{
    prep_corpus, prep_stats, read_articles, AcceptedArticle, CorruptionSpec, FilterConfig,
    RawArticle, RejectedArticle, Verdict,
};
use crate::decode::{beam_search, TransformerScorer};
use crate::error::{Error, Result};
use crate::metrics::{novel_ngram_proportion, rouge_l, rouge_n, RougeScore};
use crate::model::ModelConfig;
use crate::tokenizer::Tokenizer;
use crate::train::{
    finetune, pretrain, Checkpoint, PretrainExample, TrainConfig,
};
use crate::write_atomic;

// ---- configuration -------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PathsConfig {
    /// Raw input corpus for `prep`, one {"id","text"} JSON object per line.
    pub corpus: PathBuf,
    pub prep_dir: PathBuf,
    pub tokenizer: PathBuf,
    pub pretrain_checkpoint: PathBuf,
    pub finetune_checkpoint: PathBuf,
    /// Articles to summarize with `generate` and to diff against in
    /// `evaluate`'s novel-n-gram columns.
    pub articles: PathBuf,
    pub generated: PathBuf,
    /// Reference summaries, read by `evaluate` only.
    pub references: PathBuf,
    pub report: PathBuf,
    pub metrics_log: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            corpus: "data/corpus.jsonl".into(),
            prep_dir: "out/prep".into(),
            tokenizer: "out/tokenizer.model".into(),
            pretrain_checkpoint: "out/pretrain.ckpt".into(),
            finetune_checkpoint: "out/finetune.ckpt".into(),
            articles: "data/articles.jsonl".into(),
            generated: "out/generated.jsonl".into(),
            references: "data/references.jsonl".into(),
            report: "out/report.jsonl".into(),
            metrics_log: "out/metrics.jsonl".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TokenizerConfig {
    pub vocab_size: u32,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig { vocab_size: 1024 }
    }
}

/// Sparse overrides applied on top of a named preset; the vocabulary size
/// always comes from the trained tokenizer.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelSection {
    /// "small" (4 layers, 4 heads, width 512) or "large" (10 layers, 8
    /// heads, width 720).
    pub preset: Option<String>,
    pub num_layers: Option<usize>,
    pub num_heads: Option<usize>,
    pub hidden_size: Option<usize>,
    pub ff_inner_size: Option<usize>,
    pub max_positions: Option<usize>,
    pub dropout: Option<f64>,
    pub positional_scale: Option<f64>,
}

impl ModelSection {
    pub fn build(&self, vocab_size: usize) -> Result<ModelConfig> {
        let max_pos = self.max_positions.unwrap_or(512);
        let mut cfg = match self.preset.as_deref() {
            None | Some("small") => ModelConfig::small_4l4h(vocab_size, max_pos),
            Some("large") => ModelConfig::large_10l8h(vocab_size, max_pos),
            Some(other) => {
                return Err(Error::Config(format!(
                    "unknown model preset {other:?}; expected \"small\" or \"large\""
                )))
            }
        };
        if let Some(v) = self.num_layers {
            cfg.num_layers = v;
        }
        if let Some(v) = self.num_heads {
            cfg.num_heads = v;
        }
        if let Some(v) = self.hidden_size {
            cfg.hidden_size = v;
            cfg.ff_inner_size = 4 * v;
        }
        if let Some(v) = self.ff_inner_size {
            cfg.ff_inner_size = v;
        }
        if let Some(v) = self.dropout {
            cfg.dropout = v;
        }
        if let Some(v) = self.positional_scale {
            cfg.positional_scale = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Sparse overrides over the per-phase training defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PhaseSection {
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub dropout: Option<f64>,
    pub max_gen_len: Option<usize>,
    pub temperature: Option<f64>,
    pub rectify: Option<bool>,
    pub theme_window: Option<usize>,
    /// Fraction of accepted articles held out for validation decoding
    /// (pretraining only).
    pub val_fraction: Option<f64>,
}

impl PhaseSection {
    fn apply(&self, mut base: TrainConfig) -> TrainConfig {
        if let Some(v) = self.lr {
            base.lr = v;
        }
        if let Some(v) = self.batch_size {
            base.batch_size = v;
        }
        if let Some(v) = self.epochs {
            base.epochs = v;
        }
        if let Some(v) = self.dropout {
            base.dropout = v;
        }
        if let Some(v) = self.max_gen_len {
            base.max_gen_len = v;
        }
        if let Some(v) = self.temperature {
            base.temperature = v;
        }
        if let Some(v) = self.rectify {
            base.rectify = v;
        }
        if let Some(v) = self.theme_window {
            base.theme_window = v;
        }
        base
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct GenerateConfig {
    pub beam_width: usize,
    pub max_len: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig { beam_width: 4, max_len: 48 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EvaluateConfig {
    /// Also write `<report>.novel_hist.json` with the mean novel-n-gram
    /// fractions for plotting.
    pub histogram: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub filter: FilterConfig,
    pub corruption: CorruptionSpec,
    pub tokenizer: TokenizerConfig,
    pub model: ModelSection,
    pub pretrain: PhaseSection,
    pub finetune: PhaseSection,
    pub generate: GenerateConfig,
    pub evaluate: EvaluateConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn pretrain_train_config(&self) -> TrainConfig {
        self.pretrain.apply(TrainConfig::pretrain(self.seed))
    }

    fn finetune_train_config(&self) -> TrainConfig {
        self.finetune.apply(TrainConfig::finetune(self.seed))
    }
}

// ---- command-line surface --------------------------------------------------------

#[derive(Debug, Parser)]
#[command(
    name = "lede",
    about = "Unsupervised abstractive summarization pipeline",
    version
)]
pub struct Cli {
    /// TOML run configuration; flags override file values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Clean, split, filter, and stat a raw article corpus.
    Prep(PrepArgs),
    /// Learn a subword vocabulary from the accepted articles.
    TrainTokenizer(TrainTokenizerArgs),
    /// Lead-reconstruction pretraining with best-validation selection.
    Pretrain(PretrainArgs),
    /// Self-supervised finetuning from a pretrained checkpoint.
    Finetune(FinetuneArgs),
    /// Beam-search summaries for a file of articles.
    Generate(GenerateArgs),
    /// Score generated summaries against references.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct PrepArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainTokenizerArgs {
    /// Accepted-article file; defaults to the prep output.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub vocab_size: Option<u32>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Target articles, {"id","text"} per line; must not carry summaries.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub beam_width: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub generated: Option<PathBuf>,
    #[arg(long)]
    pub references: Option<PathBuf>,
    #[arg(long)]
    pub articles: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

// ---- shared plumbing --------------------------------------------------------------

fn load_config(cli_config: &Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match cli_config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    Ok(())
}

/// Provenance: the post-merge config is written next to the artifact.
fn echo_config(cfg: &RunConfig, artifact: &Path) -> Result<()> {
    let dir = artifact.parent().unwrap_or_else(|| Path::new("."));
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| Error::Config(format!("config echo: {e}")))?;
    write_atomic(&dir.join("effective-config.toml"), text.as_bytes())
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        let line =
            serde_json::to_string(r).map_err(|e| Error::Data(format!("serialize: {e}")))?;
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    ensure_parent(path)?;
    write_atomic(path, &out)
}

fn report_skipped(path: &Path, skipped: &[(usize, String)]) {
    for (line, err) in skipped {
        eprintln!("{}:{line}: skipping malformed record: {err}", path.display());
    }
}

fn load_tokenizer(path: &Path) -> Result<Tokenizer> {
    Tokenizer::load(path).map_err(|e| match e {
        Error::Io { .. } => Error::Data(format!(
            "cannot read tokenizer model {}: run `lede train-tokenizer` first",
            path.display()
        )),
        other => other,
    })
}

fn load_checkpoint_for(stage: &str, path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| match e {
        Error::Io { .. } => Error::Data(format!(
            "cannot read checkpoint {}: run `lede {stage}` first",
            path.display()
        )),
        other => other,
    })
}

fn read_accepted(path: &Path) -> Result<Vec<AcceptedArticle>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<AcceptedArticle>(line) {
            Ok(a) => out.push(a),
            Err(e) => eprintln!("{}:{}: skipping malformed record: {e}", path.display(), idx + 1),
        }
    }
    Ok(out)
}

/// Articles for unsupervised stages. Any record carrying a reference
/// summary is rejected outright: these stages must never see one.
fn read_unsupervised_articles(path: &Path) -> Result<Vec<RawArticle>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(e) => {
                eprintln!("{}:{}: skipping malformed record: {e}", path.display(), idx + 1);
                continue;
            }
        };
        for banned in ["summary", "reference", "highlights"] {
            if value.get(banned).is_some() {
                return Err(Error::Data(format!(
                    "{}:{}: field {banned:?} found; unsupervised stages must not read reference summaries",
                    path.display(),
                    idx + 1
                )));
            }
        }
        match serde_json::from_value::<RawArticle>(value) {
            Ok(a) => out.push(a),
            Err(e) => eprintln!("{}:{}: skipping malformed record: {e}", path.display(), idx + 1),
        }
    }
    Ok(out)
}

// ---- commands ---------------------------------------------------------------------

pub fn cmd_prep(cfg: &RunConfig, args: &PrepArgs) -> Result<()> {
    let input = args.input.as_ref().unwrap_or(&cfg.paths.corpus);
    let dir = args.output_dir.as_ref().unwrap_or(&cfg.paths.prep_dir).clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let outcome = read_articles(input)?;
    report_skipped(input, &outcome.skipped);
    let records = prep_corpus(&outcome.articles, &cfg.filter)?;
    let stats = prep_stats(&records);

    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    for rec in &records {
        match &rec.verdict {
            Verdict::Accepted => accepted.push(AcceptedArticle {
                id: rec.id.clone(),
                text: rec.cleaned.clone(),
                lead: rec.lead.clone(),
                body: rec.body.clone(),
            }),
            Verdict::Rejected(reason) => {
                rejected.push(RejectedArticle { id: rec.id.clone(), reason: *reason })
            }
        }
    }
    write_jsonl(&dir.join("accepted.jsonl"), &accepted)?;
    write_jsonl(&dir.join("rejected.jsonl"), &rejected)?;
    let stats_json = serde_json::to_string_pretty(&stats)
        .map_err(|e| Error::Data(format!("stats: {e}")))?;
    write_atomic(&dir.join("stats.json"), stats_json.as_bytes())?;
    echo_config(cfg, &dir.join("stats.json"))?;

    println!("articles: {}", stats.total);
    println!("accepted: {}", stats.accepted);
    for (reason, count) in &stats.rejected {
        println!("rejected/{reason}: {count}");
    }
    Ok(())
}

pub fn cmd_train_tokenizer(cfg: &RunConfig, args: &TrainTokenizerArgs) -> Result<()> {
    let default_input = cfg.paths.prep_dir.join("accepted.jsonl");
    let input = args.input.as_ref().unwrap_or(&default_input);
    let output = args.output.as_ref().unwrap_or(&cfg.paths.tokenizer);
    let vocab = args.vocab_size.unwrap_or(cfg.tokenizer.vocab_size);

    let accepted = read_accepted(input)?;
    if accepted.is_empty() {
        return Err(Error::Data(format!("no accepted articles in {}", input.display())));
    }
    let tok = Tokenizer::train(accepted.iter().map(|a| a.text.as_str()), vocab)?;
    if tok.undersized {
        eprintln!(
            "warning: corpus only supports {} pieces of the requested {vocab}",
            tok.vocab_size()
        );
    }
    ensure_parent(output)?;
    tok.save(output)?;
    echo_config(cfg, output)?;
    println!("vocab: {}", tok.vocab_size());
    Ok(())
}

fn split_train_val(
    mut examples: Vec<PretrainExample>,
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<PretrainExample>, Vec<PretrainExample>)> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
    }
    if examples.len() < 2 {
        return Err(Error::Data("pretraining needs at least two usable articles".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    examples.shuffle(&mut rng);
    let n_val = ((examples.len() as f64 * val_fraction) as usize)
        .max(1)
        .min(examples.len() - 1);
    let train = examples.split_off(n_val);
    Ok((train, examples))
}

pub fn cmd_pretrain(cfg: &RunConfig, args: &PretrainArgs) -> Result<()> {
    let default_input = cfg.paths.prep_dir.join("accepted.jsonl");
    let input = args.input.as_ref().unwrap_or(&default_input);
    let output = args.output.as_ref().unwrap_or(&cfg.paths.pretrain_checkpoint);
    let mut tcfg = cfg.pretrain_train_config();
    if let Some(e) = args.epochs {
        tcfg.epochs = e;
    }
    if let Some(lr) = args.lr {
        tcfg.lr = lr;
    }

    let tok = load_tokenizer(&cfg.paths.tokenizer)?;
    let accepted = read_accepted(input)?;
    let mut examples = Vec::new();
    for a in &accepted {
        let body = tok.encode(&a.body);
        let lead = tok.encode(&a.lead);
        if body.is_empty() || lead.is_empty() {
            eprintln!("skipping {}: empty tokenization", a.id);
            continue;
        }
        examples.push(PretrainExample { body, lead });
    }
    let val_fraction = cfg.pretrain.val_fraction.unwrap_or(0.1);
    let (train, val) = split_train_val(examples, val_fraction, cfg.seed)?;

    let model_cfg = cfg.model.build(tok.vocab_size() as usize)?;
    ensure_parent(&cfg.paths.metrics_log)?;
    let mut log_file = std::fs::File::create(&cfg.paths.metrics_log)
        .map_err(|e| Error::io(&cfg.paths.metrics_log, e))?;
    let detok = |ids: &[u32]| tok.decode(ids).unwrap_or_default();
    let ckpt = pretrain(
        &train,
        &val,
        &model_cfg,
        &tcfg,
        &detok,
        Some(&mut log_file),
    )?;
    ensure_parent(output)?;
    ckpt.save(output)?;
    echo_config(cfg, output)?;
    println!(
        "pretrained: {} params, best validation rouge-l {:.4} at step {}",
        ckpt.params.numel(),
        ckpt.val_rouge_l.unwrap_or(0.0),
        ckpt.step
    );
    Ok(())
}

pub fn cmd_finetune(cfg: &RunConfig, args: &FinetuneArgs) -> Result<()> {
    let input = args.input.as_ref().unwrap_or(&cfg.paths.articles);
    let base_path = args.checkpoint.as_ref().unwrap_or(&cfg.paths.pretrain_checkpoint);
    let output = args.output.as_ref().unwrap_or(&cfg.paths.finetune_checkpoint);
    let mut tcfg = cfg.finetune_train_config();
    if let Some(e) = args.epochs {
        tcfg.epochs = e;
    }
    if let Some(lr) = args.lr {
        tcfg.lr = lr;
    }

    let tok = load_tokenizer(&cfg.paths.tokenizer)?;
    let base = load_checkpoint_for("pretrain", base_path)?;
    let raw = read_unsupervised_articles(input)?;
    let mut articles = Vec::new();
    for a in &raw {
        let ids = tok.encode(&a.text);
        if ids.is_empty() {
            eprintln!("skipping {}: empty tokenization", a.id);
            continue;
        }
        articles.push(ids);
    }

    let model_cfg = base.config.clone();
    ensure_parent(&cfg.paths.metrics_log)?;
    let mut log_file = std::fs::File::create(&cfg.paths.metrics_log)
        .map_err(|e| Error::io(&cfg.paths.metrics_log, e))?;
    let ckpt = finetune(
        &articles,
        &base,
        &model_cfg,
        &tcfg,
        &cfg.corruption,
        Some(&mut log_file),
    )?;
    ensure_parent(output)?;
    ckpt.save(output)?;
    echo_config(cfg, output)?;
    println!("finetuned: {} steps total", ckpt.step);
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GeneratedRecord {
    pub id: String,
    pub summary: String,
    /// Length of the generated token sequence before detokenization. Absent
    /// on reference files, which share this record shape.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<usize>,
}

pub fn cmd_generate(cfg: &RunConfig, args: &GenerateArgs) -> Result<()> {
    let input = args.input.as_ref().unwrap_or(&cfg.paths.articles);
    let ckpt_path = args.checkpoint.as_ref().unwrap_or(&cfg.paths.finetune_checkpoint);
    let output = args.output.as_ref().unwrap_or(&cfg.paths.generated);
    let beam_width = args.beam_width.unwrap_or(cfg.generate.beam_width);
    let max_len = args.max_len.unwrap_or(cfg.generate.max_len);

    let tok = load_tokenizer(&cfg.paths.tokenizer)?;
    let ckpt = load_checkpoint_for("finetune", ckpt_path)?;
    let raw = read_unsupervised_articles(input)?;
    let mut records = Vec::with_capacity(raw.len());
    for a in &raw {
        let ids = tok.encode(&a.text);
        let ids = &ids[..ids.len().min(ckpt.config.max_positions)];
        if ids.is_empty() {
            eprintln!("skipping {}: empty tokenization", a.id);
            continue;
        }
        let mut scorer = TransformerScorer::new(&ckpt.config, &ckpt.params, ids)?;
        let out = beam_search(&mut scorer, beam_width, max_len)?;
        records.push(GeneratedRecord {
            id: a.id.clone(),
            summary: tok.decode(&out)?,
            tokens: Some(out.len()),
        });
    }
    write_jsonl(output, &records)?;
    echo_config(cfg, output)?;
    println!("generated: {} summaries", records.len());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RougeColumns {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl From<RougeScore> for RougeColumns {
    fn from(s: RougeScore) -> Self {
        RougeColumns { precision: s.precision, recall: s.recall, f1: s.f1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRecord {
    pub id: String,
    pub rouge1: RougeColumns,
    pub rouge2: RougeColumns,
    pub rouge_l: RougeColumns,
    /// Novel n-gram fractions for n = 1..4; null where the summary is
    /// shorter than n words.
    pub novel: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportSummary {
    pub examples: u64,
    pub mean_rouge1_f1: f64,
    pub mean_rouge2_f1: f64,
    pub mean_rouge_l_f1: f64,
    /// Mean over examples where the fraction was defined.
    pub mean_novel: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ReportLine {
    Example(ReportRecord),
    Summary { summary: ReportSummary },
}

pub fn cmd_evaluate(cfg: &RunConfig, args: &EvaluateArgs) -> Result<()> {
    let generated_path = args.generated.as_ref().unwrap_or(&cfg.paths.generated);
    let references_path = args.references.as_ref().unwrap_or(&cfg.paths.references);
    let articles_path = args.articles.as_ref().unwrap_or(&cfg.paths.articles);
    let output = args.output.as_ref().unwrap_or(&cfg.paths.report);

    let read_summaries = |path: &Path| -> Result<BTreeMap<String, String>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut map = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<GeneratedRecord>(line) {
                Ok(r) => {
                    map.insert(r.id, r.summary);
                }
                Err(e) => {
                    eprintln!("{}:{}: skipping malformed record: {e}", path.display(), idx + 1)
                }
            }
        }
        Ok(map)
    };

    let generated = read_summaries(generated_path)?;
    let references = read_summaries(references_path)?;
    let articles_outcome = read_articles(articles_path)?;
    report_skipped(articles_path, &articles_outcome.skipped);
    let articles: BTreeMap<&str, &str> = articles_outcome
        .articles
        .iter()
        .map(|a| (a.id.as_str(), a.text.as_str()))
        .collect();

    let mut lines = Vec::new();
    let mut sums = [0.0f64; 3];
    let mut novel_sums = [0.0f64; 4];
    let mut novel_counts = [0u64; 4];
    let mut evaluated = 0u64;
    for (id, summary) in &generated {
        let Some(reference) = references.get(id) else {
            eprintln!("{id}: no reference summary; skipping");
            continue;
        };
        let r1 = rouge_n(summary, reference, 1);
        let r2 = rouge_n(summary, reference, 2);
        let rl = rouge_l(summary, reference);
        let novel: Vec<Option<f64>> = (1..=4)
            .map(|n| {
                articles
                    .get(id.as_str())
                    .and_then(|text| novel_ngram_proportion(summary, text, n))
            })
            .collect();
        sums[0] += r1.f1;
        sums[1] += r2.f1;
        sums[2] += rl.f1;
        for (n, frac) in novel.iter().enumerate() {
            if let Some(f) = frac {
                novel_sums[n] += f;
                novel_counts[n] += 1;
            }
        }
        evaluated += 1;
        lines.push(ReportLine::Example(ReportRecord {
            id: id.clone(),
            rouge1: r1.into(),
            rouge2: r2.into(),
            rouge_l: rl.into(),
            novel,
        }));
    }
    let denom = evaluated.max(1) as f64;
    let summary = ReportSummary {
        examples: evaluated,
        mean_rouge1_f1: sums[0] / denom,
        mean_rouge2_f1: sums[1] / denom,
        mean_rouge_l_f1: sums[2] / denom,
        mean_novel: (0..4)
            .map(|n| (novel_counts[n] > 0).then(|| novel_sums[n] / novel_counts[n] as f64))
            .collect(),
    };
    if cfg.evaluate.histogram {
        let hist = serde_json::to_string_pretty(&summary.mean_novel)
            .map_err(|e| Error::Data(format!("histogram: {e}")))?;
        let mut hist_path = output.as_os_str().to_os_string();
        hist_path.push(".novel_hist.json");
        ensure_parent(Path::new(&hist_path))?;
        write_atomic(Path::new(&hist_path), hist.as_bytes())?;
    }
    lines.push(ReportLine::Summary { summary });
    write_jsonl(output, &lines)?;
    echo_config(cfg, output)?;
    println!("evaluated: {evaluated} examples");
    Ok(())
}

/// Parse and dispatch; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // help/version are successful exits, usage mistakes are not
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = load_config(&cli.config, cli.seed).and_then(|cfg| match &cli.command {
        Command::Prep(args) => cmd_prep(&cfg, args),
        Command::TrainTokenizer(args) => cmd_train_tokenizer(&cfg, args),
        Command::Pretrain(args) => cmd_pretrain(&cfg, args),
        Command::Finetune(args) => cmd_finetune(&cfg, args),
        Command::Generate(args) => cmd_generate(&cfg, args),
        Command::Evaluate(args) => cmd_evaluate(&cfg, args),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::Phase;

    #[test]
    fn sparse_toml_sections_merge_onto_defaults() {
        let cfg: RunConfig = toml::from_str(
            r#"
            seed = 7
            [filter]
            overlap_threshold = 0.5
            [pretrain]
            epochs = 2
            [model]
            preset = "small"
            num_layers = 2
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.filter.overlap_threshold, 0.5);
        assert_eq!(cfg.filter.lead_sentence_count, 3, "untouched fields keep defaults");
        assert_eq!(cfg.pretrain.epochs, Some(2));
        let tcfg = cfg.pretrain_train_config();
        assert_eq!(tcfg.epochs, 2);
        assert_eq!(tcfg.lr, 1e-4);
        assert_eq!(tcfg.batch_size, 16);
        let model = cfg.model.build(300).unwrap();
        assert_eq!(model.num_layers, 2);
        assert_eq!(model.hidden_size, 512);
        assert_eq!(model.vocab_size, 300);
    }

    #[test]
    fn defaults_mirror_published_values() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.filter.overlap_threshold, 0.65);
        assert_eq!(cfg.corruption.insertion_low, 0.40);
        assert_eq!(cfg.corruption.insertion_high, 0.50);
        assert_eq!(cfg.corruption.shuffle_fraction, 0.20);
        let pre = cfg.pretrain_train_config();
        assert_eq!(pre.lr, 1e-4);
        assert_eq!(pre.dropout, 0.3);
        assert_eq!(pre.batch_size, 16);
        assert_eq!(pre.epochs, 10);
        assert_eq!(pre.temperature, 0.1);
        let fine = cfg.finetune_train_config();
        assert_eq!(fine.lr, 2e-4);
        assert_eq!(fine.phase, Phase::Finetune);
        assert_eq!(cfg.generate.beam_width, 4);
    }

    #[test]
    fn model_section_rejects_unknown_preset() {
        let section =
            ModelSection { preset: Some("huge".into()), ..ModelSection::default() };
        assert!(section.build(300).is_err());
    }

    #[test]
    fn hidden_size_override_scales_feed_forward() {
        let section = ModelSection {
            hidden_size: Some(64),
            max_positions: Some(64),
            ..ModelSection::default()
        };
        let cfg = section.build(300).unwrap();
        assert_eq!(cfg.ff_inner_size, 256);
        let explicit = ModelSection {
            hidden_size: Some(64),
            ff_inner_size: Some(100),
            max_positions: Some(64),
            ..ModelSection::default()
        };
        assert_eq!(explicit.build(300).unwrap().ff_inner_size, 100);
    }

    #[test]
    fn unsupervised_reader_rejects_summary_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("articles.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"a\",\"text\":\"ok\"}\n{\"id\":\"b\",\"text\":\"x\",\"summary\":\"leak\"}\n",
        )
        .unwrap();
        let err = read_unsupervised_articles(&path).unwrap_err();
        assert!(format!("{err}").contains("summary"));

        let clean = dir.path().join("clean.jsonl");
        std::fs::write(&clean, "{\"id\":\"a\",\"text\":\"ok\",\"extra\":1}\n").unwrap();
        let arts = read_unsupervised_articles(&clean).unwrap();
        assert_eq!(arts.len(), 1);
    }

    #[test]
    fn train_val_split_is_deterministic_and_nonempty() {
        let make = || {
            (0..10)
                .map(|i| PretrainExample { body: vec![6, 7, i], lead: vec![8] })
                .collect::<Vec<_>>()
        };
        let (t1, v1) = split_train_val(make(), 0.2, 3).unwrap();
        let (t2, v2) = split_train_val(make(), 0.2, 3).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(v1, v2);
        assert_eq!(v1.len(), 2);
        assert_eq!(t1.len(), 8);
        // tiny sets still yield one validation example
        let (t, v) = split_train_val(make().into_iter().take(2).collect(), 0.0, 0).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(t.len(), 1);
        assert!(split_train_val(make().into_iter().take(1).collect(), 0.1, 0).is_err());
    }

    #[test]
    fn config_echo_round_trips() {
        let cfg = RunConfig { seed: 42, ..RunConfig::default() };
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
