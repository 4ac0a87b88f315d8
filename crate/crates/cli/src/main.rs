use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use taiyan::decoder::{post_edit_flags, punctuate_many, DecodeError};
use taiyan::human_eval::{
    inter_rater_consistency, key_to_csv, make_bundles, mean_scores, win_rate, AnswerSet, HumanEvalError, RatingMatrix,
    Scale,
};
use taiyan::metrics::{AllusionGold, AllusionPred, MetricError};
use taiyan::model::checkpoint;
use taiyan::pipeline::{
    self, allusion_row, gloss_hits, infer_task, load_model, read_jsonl, read_lines, read_text, run_eval_suite,
    run_training, seg_punct_row, sha256_file, sibling, to_csv, translate_row, vocab_from_paths, write_text, Corpus,
    PipelineError, RunConfig, RunManifest, TrainMode,
};
use taiyan::sense::{
    cluster_glosses, concordance, emit_chart, read_glosses, sense_trajectory, Gloss, Hit, Period, PeriodCorpus,
    SenseError, DEFAULT_THETA,
};
use taiyan::sft::TaskKind;
use taiyan::tokenizer::TokenizerError;
use taiyan::trainer::{loss_log_csv, TrainError};

#[derive(Parser)]
#[command(name = "taiyan", version, about = "Classical Chinese language-model toolkit")]
struct Cli {
    /// Worker threads; `1` makes every command bit-reproducible.
    #[arg(long, global = true, env = "TAIYAN_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a character vocabulary from text or task files.
    Vocab {
        /// `.txt` files, `.jsonl` task files, or directories of `.txt`.
        #[arg(long, required = true, num_args = 1..)]
        corpus: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        min_count: u64,
    },
    /// Pretrain or fine-tune a model.
    Train {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// JSON run config with `model`, `train` and optional `init`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Restore punctuation, one document per input line.
    Punctuate {
        #[command(flatten)]
        model: ModelArgs,
        /// Input file; standard input when absent.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Reviewed texts, line for line; disagreements go to `--flags-out`.
        #[arg(long)]
        flags: Option<PathBuf>,
        /// Where the flag CSV goes; standard error when absent.
        #[arg(long, requires = "flags")]
        flags_out: Option<PathBuf>,
    },
    /// Run one instruction task.
    Infer {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long)]
        text: String,
        #[arg(long)]
        word: Option<String>,
    },
    /// Score predictions.
    Eval {
        #[command(subcommand)]
        which: EvalCommand,
    },
    /// Blind answer bundles and rating aggregation.
    HumanEval {
        #[command(subcommand)]
        which: HumanEvalCommand,
    },
    /// Per-period sense frequencies of a keyword.
    SenseDrift(SenseArgs),
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Pretrain,
    Sft,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Punctuation,
    Allusion,
    WordExplanation,
    Translation,
}

impl From<Task> for TaskKind {
    fn from(t: Task) -> Self {
        match t {
            Task::Punctuation => TaskKind::Punctuation,
            Task::Allusion => TaskKind::Allusion,
            Task::WordExplanation => TaskKind::WordExplanation,
            Task::Translation => TaskKind::Translation,
        }
    }
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Segmentation and punctuation F1 plus the text-error rate.
    SegPunct {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Allusion detection accuracy and identification F1.
    Allusion {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Character BLEU and chrF.
    Translate {
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        hyps: PathBuf,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Every task listed in a suite file, written to a report directory.
    Suite {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ReportArgs {
    /// Row label in the report.
    #[arg(long, default_value = "system")]
    system: String,
    /// Also write the report as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Subcommand)]
enum HumanEvalCommand {
    /// Shuffle answers into anonymous bundles plus a sealed key.
    Bundle {
        /// JSONL of `{"item": ..., "answers": {system: answer}}`.
        #[arg(long)]
        answers: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for `bundles.jsonl` and `key.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean scores, win rates and rater agreement.
    Aggregate {
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long, value_enum, default_value = "any")]
        scale: ScaleArg,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Explanation,
    FivePoint,
    Any,
}

#[derive(Args)]
struct SenseArgs {
    /// One directory per period holding `.txt` files.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    keyword: String,
    #[arg(long, default_value_t = DEFAULT_THETA)]
    theta: f64,
    #[arg(long, default_value_t = 2)]
    top_k: usize,
    /// Output prefix for `.csv`, `.svg` and `.manifest.json`.
    #[arg(long)]
    out: PathBuf,
    /// Precomputed `period,snippet,gloss` CSV instead of model glosses.
    #[arg(long)]
    glosses: Option<PathBuf>,
    #[arg(long, requires = "vocab", required_unless_present = "glosses")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Context characters kept on each side of the keyword.
    #[arg(long, default_value_t = 10)]
    window: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for bad input, 3 for I/O failures, 4 for numeric failures.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<io::Error>() {
            return 3;
        }
        if let Some(p) = cause.downcast_ref::<PipelineError>() {
            return match p {
                PipelineError::Io { .. } => 3,
                PipelineError::Train(TrainError::NonFiniteLoss { .. }) => 4,
                PipelineError::Train(TrainError::InvalidConfig(_)) => 2,
                PipelineError::Tokenizer(TokenizerError::Io(_)) => 3,
                PipelineError::Model(_) | PipelineError::Train(_) => 1,
                _ => 2,
            };
        }
        if let Some(t) = cause.downcast_ref::<TrainError>() {
            return match t {
                TrainError::NonFiniteLoss { .. } => 4,
                TrainError::InvalidConfig(_) => 2,
                _ => 1,
            };
        }
        if let Some(s) = cause.downcast_ref::<SenseError>() {
            return if matches!(s, SenseError::Io { .. }) { 3 } else { 2 };
        }
        if let Some(t) = cause.downcast_ref::<TokenizerError>() {
            return if matches!(t, TokenizerError::Io(_)) { 3 } else { 2 };
        }
        if cause.is::<HumanEvalError>() || cause.is::<MetricError>() || cause.is::<DecodeError>() {
            return 2;
        }
        if cause.is::<serde_json::Error>() {
            return 2;
        }
    }
    1
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Vocab { corpus, out, min_count } => {
            let v = vocab_from_paths(&corpus, min_count)?;
            v.save(&out).with_context(|| format!("writing {}", out.display()))?;
            let mut m = RunManifest::new("vocab", 0).output("vocab", &out);
            for (i, c) in corpus.iter().enumerate() {
                m = m.input(&format!("corpus{i}"), c);
            }
            m.config = serde_json::json!({ "min_count": min_count });
            m.write(&sibling(&out, "manifest.json"))?;
            eprintln!("{} tokens", v.len());
        }
        Command::Train {
            mode,
            corpus,
            vocab,
            config,
            out,
            seed,
        } => train(mode, &corpus, &vocab, config.as_deref(), &out, seed)?,
        Command::Punctuate {
            model,
            input,
            out,
            flags,
            flags_out,
        } => punctuate(
            &model,
            input.as_deref(),
            out.as_deref(),
            flags.as_deref(),
            flags_out.as_deref(),
        )?,
        Command::Infer {
            model,
            task,
            text,
            word,
        } => {
            let (params, vocab) = load_model(&model.ckpt, &model.vocab)?;
            println!("{}", infer_task(&params, &vocab, task.into(), &text, word.as_deref())?);
        }
        Command::Eval { which } => eval(which)?,
        Command::HumanEval { which } => human_eval(which)?,
        Command::SenseDrift(args) => sense_drift(&args)?,
    }
    Ok(())
}

fn train(mode: Mode, corpus: &Path, vocab: &Path, config: Option<&Path>, out: &Path, seed: u64) -> Result<()> {
    let mode = match mode {
        Mode::Pretrain => TrainMode::Pretrain,
        Mode::Sft => TrainMode::Sft,
    };
    let run = match config {
        Some(p) => RunConfig::parse(p)?,
        None => RunConfig::default(),
    };
    let vocab_table = taiyan::tokenizer::Vocabulary::load(vocab)?;
    let data = Corpus::load(mode, corpus)?;
    if let Corpus::Tasks(report) = &data {
        if !report.rejected.is_empty() {
            let path = sibling(out, "rejections.csv");
            write_text(&path, &report.rejection_csv())?;
            eprintln!("{} records rejected, see {}", report.rejected.len(), path.display());
        }
        if report.accepted.is_empty() {
            return Err(PipelineError::Schema {
                path: corpus.to_path_buf(),
                reason: "no valid task records".into(),
            }
            .into());
        }
    }
    let outcome = run_training(&data, &vocab_table, &run, mode, seed, |s| {
        if s.step % 50 == 0 {
            eprintln!("step {} lr {:e} loss {:.4}", s.step, s.lr, s.loss);
        }
    })?;
    if outcome.skipped > 0 {
        eprintln!("{} records longer than seq_len were skipped", outcome.skipped);
    }
    checkpoint::save(&outcome.params, out).with_context(|| format!("writing {}", out.display()))?;
    let log_path = sibling(out, "loss.csv");
    write_text(&log_path, &loss_log_csv(&outcome.log))?;
    let mut m = RunManifest::new(
        match mode {
            TrainMode::Pretrain => "train --mode pretrain",
            TrainMode::Sft => "train --mode sft",
        },
        seed,
    )
    .input("corpus", corpus)
    .input("vocab", vocab)
    .output("checkpoint", out)
    .output("loss_log", &log_path);
    if let Some(c) = config {
        m = m.input("config", c);
    }
    m.config = serde_json::json!({
        "model": outcome.params.config,
        "train": outcome.config,
        "init": run.init,
    });
    m.checkpoint_sha256 = Some(sha256_file(out)?);
    m.write(&sibling(out, "manifest.json"))?;
    Ok(())
}

fn punctuate(
    model: &ModelArgs,
    input: Option<&Path>,
    out: Option<&Path>,
    flags: Option<&Path>,
    flags_out: Option<&Path>,
) -> Result<()> {
    let (params, vocab) = load_model(&model.ckpt, &model.vocab)?;
    let text = match input {
        Some(p) => read_text(p)?,
        None => {
            let mut s = String::new();
            io::stdin().read_to_string(&mut s)?;
            s
        }
    };
    let docs: Vec<&str> = text.lines().collect();
    let gold = flags.map(read_lines).transpose()?;
    if let (Some(g), Some(p)) = (&gold, flags) {
        if g.len() != docs.len() {
            bail!(PipelineError::Schema {
                path: p.to_path_buf(),
                reason: format!("{} lines, input has {}", g.len(), docs.len()),
            });
        }
    }
    let nonempty: Vec<&str> = docs.iter().copied().filter(|d| !d.is_empty()).collect();
    let mut results = punctuate_many(&params, &vocab, &nonempty).into_iter();
    let mut lines = Vec::with_capacity(docs.len());
    for (i, d) in docs.iter().enumerate() {
        if d.is_empty() {
            lines.push(String::new());
        } else {
            let r = results.next().expect("one result per document");
            lines.push(r.with_context(|| format!("document {}", i + 1))?);
        }
    }
    let mut body = lines.join("\n");
    if !lines.is_empty() {
        body.push('\n');
    }
    match out {
        Some(p) => write_text(p, &body)?,
        None => io::stdout().write_all(body.as_bytes())?,
    }
    if let Some(gold) = gold {
        let mut w = String::from("document,boundary,kind,left,right\n");
        for (i, (g, m)) in gold.iter().zip(&lines).enumerate() {
            if g.is_empty() && m.is_empty() {
                continue;
            }
            let fl = post_edit_flags(g, m).with_context(|| format!("flags for document {}", i + 1))?;
            for f in fl {
                w.push_str(&format!("{},{},{},{},{}\n", i + 1, f.boundary, f.kind, f.left, f.right));
            }
        }
        match flags_out {
            Some(p) => write_text(p, &w)?,
            None => io::stderr().write_all(w.as_bytes())?,
        }
    }
    Ok(())
}

fn report<R: serde::Serialize>(row: R, args: &ReportArgs) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(&row)?);
    if let Some(p) = &args.csv {
        write_text(p, &to_csv(&[row]))?;
    }
    Ok(())
}

fn same_count(path: &Path, gold: usize, pred: usize) -> Result<()> {
    if gold != pred {
        bail!(PipelineError::Schema {
            path: path.to_path_buf(),
            reason: format!("{pred} records, gold has {gold}"),
        });
    }
    Ok(())
}

fn eval(which: EvalCommand) -> Result<()> {
    match which {
        EvalCommand::SegPunct { gold, pred, report: r } => {
            let (g, p) = (read_lines(&gold)?, read_lines(&pred)?);
            same_count(&pred, g.len(), p.len())?;
            report(seg_punct_row(&r.system, &g, &p)?, &r)?;
        }
        EvalCommand::Allusion { gold, pred, report: r } => {
            let g: Vec<AllusionGold> = read_jsonl(&gold)?;
            let p: Vec<AllusionPred> = read_jsonl(&pred)?;
            same_count(&pred, g.len(), p.len())?;
            report(allusion_row(&r.system, &g, &p)?, &r)?;
        }
        EvalCommand::Translate { refs, hyps, report: r } => {
            let (g, h) = (read_lines(&refs)?, read_lines(&hyps)?);
            same_count(&hyps, g.len(), h.len())?;
            report(translate_row(&r.system, &g, &h)?, &r)?;
        }
        EvalCommand::Suite { config, out } => {
            let summary = run_eval_suite(&config, &out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            let m = RunManifest::new("eval suite", 0)
                .input("config", &config)
                .output("report", &out);
            m.write(&out.join("manifest.json"))?;
        }
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct SystemSummary {
    system: String,
    mean_score: f64,
    win_rate: f64,
}

fn human_eval(which: HumanEvalCommand) -> Result<()> {
    match which {
        HumanEvalCommand::Bundle { answers, seed, out } => {
            let sets: Vec<AnswerSet> = read_jsonl(&answers)?;
            let (bundles, key) = make_bundles(&sets, seed)?;
            fs::create_dir_all(&out).map_err(pipeline::io_error(&out))?;
            let mut body = String::new();
            for b in &bundles {
                body.push_str(&serde_json::to_string(b)?);
                body.push('\n');
            }
            let (bp, kp) = (out.join("bundles.jsonl"), out.join("key.csv"));
            write_text(&bp, &body)?;
            write_text(&kp, &key_to_csv(&key)?)?;
            RunManifest::new("human-eval bundle", seed)
                .input("answers", &answers)
                .output("bundles", &bp)
                .output("key", &kp)
                .write(&out.join("manifest.json"))?;
        }
        HumanEvalCommand::Aggregate { ratings, scale, csv } => {
            let scale = match scale {
                ScaleArg::Explanation => Scale::Explanation,
                ScaleArg::FivePoint => Scale::FivePoint,
                ScaleArg::Any => Scale::Any,
            };
            let m = RatingMatrix::from_csv(&read_text(&ratings)?, scale)?;
            let wins: BTreeMap<String, f64> = win_rate(&m).into_iter().collect();
            let rows: Vec<SystemSummary> = mean_scores(&m)
                .into_iter()
                .map(|(system, mean_score)| SystemSummary {
                    win_rate: wins[&system],
                    system,
                    mean_score,
                })
                .collect();
            let agreement = match inter_rater_consistency(&m) {
                Ok(c) => serde_json::json!({
                    "mean_spearman": c.mean,
                    "pairs": c.pairs.iter().map(|p| serde_json::json!({
                        "first": p.first, "second": p.second, "rho": p.rho,
                    })).collect::<Vec<_>>(),
                    "skipped": c.skipped().map(|p| format!("{}/{}", p.first, p.second)).collect::<Vec<_>>(),
                }),
                Err(e) => serde_json::json!({ "mean_spearman": null, "reason": e.to_string() }),
            };
            let out = serde_json::json!({ "systems": rows, "inter_rater": agreement });
            println!("{}", serde_json::to_string_pretty(&out)?);
            if let Some(p) = csv {
                write_text(&p, &to_csv(&rows))?;
            }
        }
    }
    Ok(())
}

/// Glosses must cover the concordance exactly, occurrence for occurrence.
fn check_glosses(path: &Path, hits: &[Hit], glosses: &[Gloss]) -> Result<()> {
    let mut want: BTreeMap<(Period, &str), isize> = BTreeMap::new();
    for h in hits {
        *want.entry((h.period, h.snippet.as_str())).or_default() += 1;
    }
    for g in glosses {
        *want.entry((g.period, g.snippet.as_str())).or_default() -= 1;
    }
    if let Some(((period, snippet), n)) = want.into_iter().find(|(_, n)| *n != 0) {
        let reason = if n > 0 {
            format!("{period} occurrence {snippet:?} has no gloss")
        } else {
            format!("{period} snippet {snippet:?} is not in the corpus concordance")
        };
        bail!(PipelineError::Schema {
            path: path.to_path_buf(),
            reason,
        });
    }
    Ok(())
}

fn sense_drift(a: &SenseArgs) -> Result<()> {
    let corpus = PeriodCorpus::load(&a.corpus)?;
    let hits = concordance(&corpus, &a.keyword, a.window)?;
    let glosses = match &a.glosses {
        Some(p) => {
            let glosses = read_glosses(&read_text(p)?)?;
            check_glosses(p, &hits, &glosses)?;
            glosses
        }
        None => {
            let (ckpt, vocab) = (
                a.ckpt.as_ref().expect("clap requires"),
                a.vocab.as_ref().expect("clap requires"),
            );
            let (params, vocab) = load_model(ckpt, vocab)?;
            gloss_hits(&params, &vocab, &hits, &a.keyword)?
        }
    };
    let clusters = cluster_glosses(&glosses, a.theta)?;
    let traj = sense_trajectory(&clusters, a.top_k)?;
    let (csv_path, svg_path) = emit_chart(&traj, &a.keyword, &a.out)?;
    let mut m = RunManifest::new("sense-drift", 0)
        .input("corpus", &a.corpus)
        .output("csv", &csv_path)
        .output("svg", &svg_path);
    if let Some(g) = &a.glosses {
        m = m.input("glosses", g);
    }
    if let (Some(c), Some(v)) = (&a.ckpt, &a.vocab) {
        m = m.input("checkpoint", c).input("vocab", v);
        m.checkpoint_sha256 = Some(sha256_file(c)?);
    }
    m.config = serde_json::json!({
        "keyword": a.keyword, "theta": a.theta, "top_k": a.top_k, "window": a.window,
    });
    m.write(&a.out.with_extension("manifest.json"))?;
    eprintln!("{} glosses in {} clusters", glosses.len(), clusters.len());
    for s in &traj.series {
        eprintln!("{}", s.representative);
    }
    Ok(())
}
