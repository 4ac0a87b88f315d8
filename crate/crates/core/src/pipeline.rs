//! Glue between the modules: model loading, task inference, training runs,
//! the evaluation suite and run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::decoder::{punctuate, DecodeError};
use crate::human_eval::{HumanEvalError, RatingMatrix, Scale};
use crate::metrics::{allusion_scores, bleu, chrf, seg_punct_corpus, AllusionGold, AllusionPred, MetricError};
use crate::model::checkpoint::{self, CheckpointError};
use crate::model::{generate, ModelConfig, ModelError, Parameters};
use crate::sense::{Gloss, Hit};
use crate::sft::{
    instruction_for, prompt_ids, serialize_for_training, validate_task_lines, TaskKind, ValidationReport,
    ALLUSION_INSTRUCTION, PUNCTUATION_INSTRUCTION, TRANSLATION_INSTRUCTION,
};
use crate::tokenizer::{build_vocab, TokenId, TokenizerError, Vocabulary, EOS};
use crate::trainer::{pack_documents, sft_examples, train, StepLog, TrainConfig, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("bad checkpoint {path}: {reason}")]
    BadCheckpoint { path: PathBuf, reason: String },
    #[error("word {word:?} does not occur in the input")]
    WordNotInText { word: String },
    #[error("word explanation needs a word")]
    MissingWord,
    #[error("{path}: {reason}")]
    Schema { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    HumanEval(#[from] HumanEvalError),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

pub fn io_error(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn schema(path: &Path, reason: impl Into<String>) -> PipelineError {
    PipelineError::Schema {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_error(path))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_error(path))
}

/// Lines of a UTF-8 file, without a trailing empty line.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(read_text(path)?.lines().map(str::to_string).collect())
}

/// Loads a checkpoint and vocabulary and checks that they belong together.
pub fn load_model(ckpt: &Path, vocab: &Path) -> Result<(Parameters<f32>, Vocabulary)> {
    let params = checkpoint::load(ckpt).map_err(|e| match e {
        CheckpointError::Io(source) => PipelineError::Io {
            path: ckpt.to_path_buf(),
            source,
        },
        CheckpointError::Malformed(reason) => PipelineError::BadCheckpoint {
            path: ckpt.to_path_buf(),
            reason,
        },
    })?;
    let vocab = Vocabulary::load(vocab)?;
    if vocab.len() != params.config.vocab_size {
        return Err(PipelineError::BadCheckpoint {
            path: ckpt.to_path_buf(),
            reason: format!(
                "model expects {} tokens, vocabulary has {}",
                params.config.vocab_size,
                vocab.len()
            ),
        });
    }
    Ok((params, vocab))
}

/// Runs one task on `input`. Punctuation goes through the constrained
/// decoder; the other tasks decode greedily until EOS or the context is full.
pub fn infer_task(
    params: &Parameters<f32>,
    vocab: &Vocabulary,
    task: TaskKind,
    input: &str,
    word: Option<&str>,
) -> Result<String> {
    let instruction = match task {
        TaskKind::Punctuation => return Ok(punctuate(params, vocab, input)?),
        TaskKind::WordExplanation => {
            let word = word.filter(|w| !w.is_empty()).ok_or(PipelineError::MissingWord)?;
            if !input.contains(word) {
                return Err(PipelineError::WordNotInText { word: word.to_string() });
            }
            instruction_for(task, word)
        }
        TaskKind::Allusion => ALLUSION_INSTRUCTION.to_string(),
        TaskKind::Translation => TRANSLATION_INSTRUCTION.to_string(),
    };
    let prompt = prompt_ids(vocab, input, &instruction);
    let room = params.config.max_seq_len.saturating_sub(prompt.len());
    if room == 0 {
        return Err(ModelError::SequenceTooLong {
            len: prompt.len() + 1,
            max: params.config.max_seq_len,
        }
        .into());
    }
    let mut out = generate(params, &prompt, room, None)?;
    if out.last() == Some(&EOS) {
        out.pop();
    }
    Ok(vocab.decode(&out)?)
}

/// Explains `keyword` in every concordance snippet.
pub fn gloss_hits(params: &Parameters<f32>, vocab: &Vocabulary, hits: &[Hit], keyword: &str) -> Result<Vec<Gloss>> {
    hits.par_iter()
        .map(|h| {
            let gloss = infer_task(params, vocab, TaskKind::WordExplanation, &h.snippet, Some(keyword))?;
            Ok(Gloss {
                period: h.period,
                snippet: h.snippet.clone(),
                gloss,
            })
        })
        .collect()
}

/// `.txt` files under `dir`, recursively, in path order.
pub fn text_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(io_error(&d))? {
            let path = entry.map_err(io_error(&d))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|x| x == "txt") {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Pretrain,
    Sft,
}

/// Training corpus after loading: a text directory for pretraining, a task
/// JSONL file for fine-tuning.
pub enum Corpus {
    Texts(Vec<String>),
    Tasks(ValidationReport),
}

impl Corpus {
    pub fn load(mode: TrainMode, path: &Path) -> Result<Self> {
        match mode {
            TrainMode::Pretrain => {
                let files = if path.is_dir() {
                    text_files(path)?
                } else {
                    vec![path.to_path_buf()]
                };
                let texts = files.iter().map(|f| read_text(f)).collect::<Result<Vec<_>>>()?;
                Ok(Corpus::Texts(texts))
            }
            TrainMode::Sft => Ok(Corpus::Tasks(validate_task_lines(&read_text(path)?))),
        }
    }

    /// Every character the model will see, plus the fixed instructions.
    pub fn chars(&self) -> Vec<char> {
        let mut out: Vec<char> = match self {
            Corpus::Texts(texts) => texts.iter().flat_map(|t| t.chars()).collect(),
            Corpus::Tasks(report) => report
                .accepted
                .iter()
                .flat_map(|e| e.input.chars().chain(e.instruction.chars()).chain(e.output.chars()))
                .collect(),
        };
        for s in [PUNCTUATION_INSTRUCTION, ALLUSION_INSTRUCTION, TRANSLATION_INSTRUCTION] {
            out.extend(s.chars());
        }
        out.extend(instruction_for(TaskKind::WordExplanation, "").chars());
        out.push('\n');
        out
    }
}

/// Vocabulary over the corpus files (`.txt` as text, `.jsonl` as task records).
pub fn vocab_from_paths(paths: &[PathBuf], min_count: u64) -> Result<Vocabulary> {
    let mut chars = Vec::new();
    for p in paths {
        let mode = if p.extension().is_some_and(|x| x == "jsonl") {
            TrainMode::Sft
        } else {
            TrainMode::Pretrain
        };
        chars.extend(Corpus::load(mode, p)?.chars());
    }
    Ok(build_vocab(chars, min_count)?)
}

/// Model shape in a run config; the vocabulary size comes from the vocabulary
/// file. Defaults to the desk preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: Option<usize>,
    pub max_seq_len: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let d = ModelConfig::desk(1);
        Self {
            n_layers: d.n_layers,
            d_model: d.d_model,
            n_heads: d.n_heads,
            d_ff: None,
            max_seq_len: d.max_seq_len,
        }
    }
}

impl ModelShape {
    pub fn config(&self, vocab_size: usize) -> ModelConfig {
        let mut c = ModelConfig::new(self.n_layers, self.d_model, self.n_heads, vocab_size, self.max_seq_len);
        if let Some(f) = self.d_ff {
            c.d_ff = f;
        }
        c
    }
}

/// The file given to `train --config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelShape,
    /// Keys of [`TrainConfig`]; anything left out takes the mode's default.
    pub train: serde_json::Map<String, Value>,
    /// Checkpoint to start from instead of a fresh initialization.
    pub init: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(path: &Path) -> Result<Self> {
        serde_json::from_str(&read_text(path)?).map_err(|e| schema(path, e.to_string()))
    }

    /// Mode defaults overlaid with the config's `train` keys and the seed.
    /// Without an explicit `warmup_steps`, warmup is 1% of `total_steps`.
    pub fn train_config(&self, mode: TrainMode, seed: u64) -> Result<TrainConfig, String> {
        let base = match mode {
            TrainMode::Pretrain => TrainConfig::pretrain(1000),
            TrainMode::Sft => TrainConfig::sft(1000),
        };
        let mut v = serde_json::to_value(&base).expect("config serializes");
        let map = v.as_object_mut().expect("object");
        for (k, x) in &self.train {
            if !map.contains_key(k) {
                return Err(format!("unknown train key {k:?}"));
            }
            map.insert(k.clone(), x.clone());
        }
        if !self.train.contains_key("warmup_steps") {
            let total = map["total_steps"].as_u64().unwrap_or(0);
            map.insert("warmup_steps".into(), Value::from(total / 100));
        }
        map.insert("seed".into(), Value::from(seed));
        serde_json::from_value(v).map_err(|e| e.to_string())
    }
}

pub struct TrainOutcome {
    pub params: Parameters<f32>,
    pub log: Vec<StepLog>,
    pub config: TrainConfig,
    /// Rows dropped for not fitting `seq_len`.
    pub skipped: usize,
}

/// Builds the training rows for `corpus` and trains. The fresh
/// initialization draws from `seed`. Without `total_steps` in the config the
/// run makes `repeat_factor` passes over the rows.
pub fn run_training(
    corpus: &Corpus,
    vocab: &Vocabulary,
    run: &RunConfig,
    mode: TrainMode,
    seed: u64,
    on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    let mut config = run.train_config(mode, seed).map_err(TrainError::InvalidConfig)?;
    let mut params = match &run.init {
        Some(path) => {
            let p = checkpoint::load(path).map_err(|e| PipelineError::BadCheckpoint {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            if p.config.vocab_size != vocab.len() {
                return Err(PipelineError::BadCheckpoint {
                    path: path.clone(),
                    reason: format!("vocabulary size {} != {}", p.config.vocab_size, vocab.len()),
                });
            }
            p
        }
        None => Parameters::init(run.model.config(vocab.len()), &mut ChaCha8Rng::seed_from_u64(seed))?,
    };
    let (rows, skipped) = match corpus {
        Corpus::Texts(texts) => {
            let docs: Vec<Vec<TokenId>> = texts.iter().map(|t| vocab.encode(t)).collect();
            (pack_documents(&docs, config.seq_len), 0)
        }
        Corpus::Tasks(report) => {
            let seqs: Vec<_> = report
                .accepted
                .iter()
                .map(|e| serialize_for_training(e, vocab))
                .collect();
            sft_examples(&seqs, config.seq_len)
        }
    };
    if !run.train.contains_key("total_steps") {
        config.total_steps = config.steps_for(rows.len()).max(1);
        if !run.train.contains_key("warmup_steps") {
            config.warmup_steps = config.total_steps / 100;
        }
    }
    let log = train(&mut params, &rows, &config, on_step)?;
    Ok(TrainOutcome {
        params,
        log,
        config,
        skipped,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(io_error(path))?))
}

/// Written next to every command output. Holds no timestamps, so identical
/// runs write identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub config: Value,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, PathBuf>,
    pub checkpoint_sha256: Option<String>,
}

impl RunManifest {
    pub fn new(command: impl Into<String>, seed: u64) -> Self {
        Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config: Value::Null,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            checkpoint_sha256: None,
        }
    }

    pub fn input(mut self, name: &str, path: &Path) -> Self {
        self.inputs.insert(name.into(), path.to_path_buf());
        self
    }

    pub fn output(mut self, name: &str, path: &Path) -> Self {
        self.outputs.insert(name.into(), path.to_path_buf());
        self
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        write_text(path, &s)
    }
}

/// `<path>.<suffix>`, keeping the full original file name.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegPunctRow {
    pub system: String,
    pub text_error_rate: f64,
    pub seg_p: f64,
    pub seg_r: f64,
    pub seg_f1: f64,
    pub punct_p: f64,
    pub punct_r: f64,
    pub punct_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AllusionRow {
    pub system: String,
    pub detection_acc: f64,
    pub ident_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExplanationRow {
    pub system: String,
    /// Mean score on the 0 / 0.5 / 1 scale.
    pub accuracy: f64,
    /// Share of ratings with the full point.
    pub strict_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TranslateRow {
    pub system: String,
    pub bleu: f64,
    pub chrf: f64,
}

pub fn seg_punct_row(system: &str, gold: &[String], pred: &[String]) -> Result<SegPunctRow> {
    let r = seg_punct_corpus(gold, pred)?;
    let (s, p) = (r.micro.segmentation, r.micro.punctuation);
    Ok(SegPunctRow {
        system: system.into(),
        text_error_rate: r.text_error_rate,
        seg_p: s.precision,
        seg_r: s.recall,
        seg_f1: s.f1,
        punct_p: p.precision,
        punct_r: p.recall,
        punct_f1: p.f1,
    })
}

pub fn allusion_row(system: &str, gold: &[AllusionGold], pred: &[AllusionPred]) -> Result<AllusionRow> {
    let s = allusion_scores(gold, pred)?;
    Ok(AllusionRow {
        system: system.into(),
        detection_acc: s.detection_accuracy,
        ident_f1: s.identification.f1,
    })
}

pub fn translate_row(system: &str, refs: &[String], hyps: &[String]) -> Result<TranslateRow> {
    Ok(TranslateRow {
        system: system.into(),
        bleu: bleu(refs, hyps)?,
        chrf: chrf(refs, hyps)?,
    })
}

pub fn explanation_rows(m: &RatingMatrix) -> Vec<ExplanationRow> {
    let per = (m.items.len() * m.evaluators.len()) as f64;
    (0..m.systems.len())
        .map(|s| {
            let (mut sum, mut full) = (0.0, 0usize);
            for i in 0..m.items.len() {
                for e in 0..m.evaluators.len() {
                    let x = m.score(i, s, e);
                    sum += x;
                    full += (x == 1.0) as usize;
                }
            }
            ExplanationRow {
                system: m.systems[s].clone(),
                accuracy: if per > 0.0 { sum / per } else { 0.0 },
                strict_accuracy: if per > 0.0 { full as f64 / per } else { 0.0 },
            }
        })
        .collect()
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| schema(path, format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn to_csv<R: Serialize>(rows: &[R]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("rows serialize");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8")
}

/// Gold file plus one prediction file per system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteTask {
    pub gold: PathBuf,
    pub systems: BTreeMap<String, PathBuf>,
}

/// The file given to `eval suite`. Paths are relative to the file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub seg_punct: Option<SuiteTask>,
    pub allusion: Option<SuiteTask>,
    /// Word-explanation ratings CSV on the 0 / 0.5 / 1 scale.
    pub explanation: Option<PathBuf>,
    pub translate: Option<SuiteTask>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SuiteReport {
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub seg_punct: Vec<SegPunctRow>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub allusion: Vec<AllusionRow>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub explanation: Vec<ExplanationRow>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub translate: Vec<TranslateRow>,
}

fn check_lengths(path: &Path, gold: usize, pred: usize) -> Result<()> {
    if gold != pred {
        return Err(schema(path, format!("{pred} records, gold has {gold}")));
    }
    Ok(())
}

/// Scores every task in the suite file. All inputs are read and checked
/// before anything is written; on error `out_dir` is left untouched.
pub fn run_eval_suite(config: &Path, out_dir: &Path) -> Result<SuiteReport> {
    let cfg: SuiteConfig = serde_json::from_str(&read_text(config)?).map_err(|e| schema(config, e.to_string()))?;
    let base = config.parent().unwrap_or(Path::new("."));
    let at = |p: &PathBuf| base.join(p);
    let mut report = SuiteReport::default();
    if let Some(t) = &cfg.seg_punct {
        let gold = read_lines(&at(&t.gold))?;
        for (name, p) in &t.systems {
            let pred = read_lines(&at(p))?;
            check_lengths(&at(p), gold.len(), pred.len())?;
            report
                .seg_punct
                .push(seg_punct_row(name, &gold, &pred).map_err(|e| schema(&at(p), e.to_string()))?);
        }
    }
    if let Some(t) = &cfg.allusion {
        let gold: Vec<AllusionGold> = read_jsonl(&at(&t.gold))?;
        for (name, p) in &t.systems {
            let pred: Vec<AllusionPred> = read_jsonl(&at(p))?;
            check_lengths(&at(p), gold.len(), pred.len())?;
            report
                .allusion
                .push(allusion_row(name, &gold, &pred).map_err(|e| schema(&at(&t.gold), e.to_string()))?);
        }
    }
    if let Some(p) = &cfg.explanation {
        let m = RatingMatrix::from_csv(&read_text(&at(p))?, Scale::Explanation)
            .map_err(|e| schema(&at(p), e.to_string()))?;
        report.explanation = explanation_rows(&m);
    }
    if let Some(t) = &cfg.translate {
        let refs = read_lines(&at(&t.gold))?;
        for (name, p) in &t.systems {
            let hyps = read_lines(&at(p))?;
            check_lengths(&at(p), refs.len(), hyps.len())?;
            report.translate.push(translate_row(name, &refs, &hyps)?);
        }
    }
    fs::create_dir_all(out_dir).map_err(io_error(out_dir))?;
    let mut files: Vec<(&str, String)> = Vec::new();
    if !report.seg_punct.is_empty() {
        files.push(("seg_punct.csv", to_csv(&report.seg_punct)));
    }
    if !report.allusion.is_empty() {
        files.push(("allusion.csv", to_csv(&report.allusion)));
    }
    if !report.explanation.is_empty() {
        files.push(("explanation.csv", to_csv(&report.explanation)));
    }
    if !report.translate.is_empty() {
        files.push(("translate.csv", to_csv(&report.translate)));
    }
    files.push((
        "summary.json",
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
    ));
    for (name, body) in files {
        write_text(&out_dir.join(name), &body)?;
    }
    Ok(report)
}
