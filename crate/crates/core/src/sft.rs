//! Instruction-tuning data: the four task formats, synthetic punctuation
//! pairs, JSONL validation and prompt serialization.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::text::{align, is_mark, strip_marks};
use crate::tokenizer::{TokenId, Vocabulary, BOS, EOS, SEP};
use crate::trainer::SftSequence;

pub const PUNCTUATION_INSTRUCTION: &str = "給上述文本添加標點。";
pub const ALLUSION_INSTRUCTION: &str = "識別文本中的典故。";
pub const TRANSLATION_INSTRUCTION: &str = "將上文翻譯成白話文。";
const EXPLANATION_PREFIX: &str = "文本中的「";
const EXPLANATION_SUFFIX: &str = "」是什麼意思？";

pub const DEFAULT_MAX_CHARS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[serde(alias = "Punctuation")]
    Punctuation,
    #[serde(alias = "Allusion")]
    Allusion,
    #[serde(alias = "WordExplanation")]
    WordExplanation,
    #[serde(alias = "Translation")]
    Translation,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::Punctuation,
        TaskKind::Allusion,
        TaskKind::WordExplanation,
        TaskKind::Translation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Punctuation => "punctuation",
            TaskKind::Allusion => "allusion",
            TaskKind::WordExplanation => "word_explanation",
            TaskKind::Translation => "translation",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Instruction text for `task`; `word` fills the word-explanation slot.
pub fn instruction_for(task: TaskKind, word: &str) -> String {
    match task {
        TaskKind::Punctuation => PUNCTUATION_INSTRUCTION.to_string(),
        TaskKind::Allusion => ALLUSION_INSTRUCTION.to_string(),
        TaskKind::WordExplanation => format!("{EXPLANATION_PREFIX}{word}{EXPLANATION_SUFFIX}"),
        TaskKind::Translation => TRANSLATION_INSTRUCTION.to_string(),
    }
}

/// Text between the first `「」` (or `“”`) pair of an instruction.
pub fn query_word(instruction: &str) -> Option<&str> {
    for (open, close) in [('「', '」'), ('“', '”')] {
        if let Some(start) = instruction.find(open) {
            let rest = &instruction[start + open.len_utf8()..];
            if let Some(end) = rest.find(close) {
                return Some(&rest[..end]);
            }
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskExample {
    pub task: TaskKind,
    pub input: String,
    pub instruction: String,
    pub output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word: Option<String>,
}

impl TaskExample {
    pub fn punctuation(input: impl Into<String>, output: impl Into<String>) -> Self {
        Self {
            task: TaskKind::Punctuation,
            input: input.into(),
            instruction: PUNCTUATION_INSTRUCTION.to_string(),
            output: output.into(),
            word: None,
        }
    }

    /// The queried word of a word-explanation record.
    pub fn query(&self) -> Option<&str> {
        self.word.as_deref().or_else(|| query_word(&self.instruction))
    }

    /// Checks the record invariants, returning the rejection reason.
    pub fn check(&self) -> Result<(), String> {
        for (name, v) in [
            ("input", &self.input),
            ("instruction", &self.instruction),
            ("output", &self.output),
        ] {
            if v.trim().is_empty() {
                return Err(format!("empty {name}"));
            }
        }
        match self.task {
            TaskKind::Punctuation => {
                if strip_marks(&self.output) != self.input {
                    return Err("output does not reduce to input".into());
                }
                align(&self.output).map_err(|e| format!("malformed output: {e}"))?;
            }
            TaskKind::WordExplanation => match self.query() {
                None => return Err("missing query word".into()),
                Some("") => return Err("empty query word".into()),
                Some(w) if !self.input.contains(w) => return Err("query not in text".into()),
                Some(_) => {}
            },
            TaskKind::Allusion | TaskKind::Translation => {}
        }
        Ok(())
    }
}

/// Splits punctuated documents into mark-aligned windows of at most
/// `max_chars` codepoints (marks included) and pairs each with its
/// unpunctuated form. Whitespace is dropped first. Returns the pairs and the
/// number of windows skipped (unalignable, mark-free or over-long).
pub fn make_punctuation_pairs<S: AsRef<str>>(
    docs: impl IntoIterator<Item = S>,
    max_chars: usize,
) -> (Vec<TaskExample>, usize) {
    let mut out = Vec::new();
    let mut skipped = 0;
    for doc in docs {
        let chars: Vec<char> = doc.as_ref().chars().filter(|c| !c.is_whitespace()).collect();
        if chars.is_empty() {
            continue;
        }
        let mut units: Vec<&[char]> = Vec::new();
        let mut start = 0;
        let mut i = 0;
        while i < chars.len() {
            if is_mark(chars[i]) {
                while i < chars.len() && is_mark(chars[i]) {
                    i += 1;
                }
                units.push(&chars[start..i]);
                start = i;
            } else {
                i += 1;
            }
        }
        if start < chars.len() {
            units.push(&chars[start..]);
        }
        let mut window: Vec<char> = Vec::new();
        for unit in units {
            if unit.len() > max_chars {
                skipped += flush_window(&mut window, &mut out);
                skipped += 1;
                continue;
            }
            if window.len() + unit.len() > max_chars {
                skipped += flush_window(&mut window, &mut out);
            }
            window.extend_from_slice(unit);
        }
        skipped += flush_window(&mut window, &mut out);
    }
    (out, skipped)
}

/// Emits the pending window; returns 1 when it had to be skipped.
fn flush_window(window: &mut Vec<char>, out: &mut Vec<TaskExample>) -> usize {
    if window.is_empty() {
        return 0;
    }
    let output: String = window.drain(..).collect();
    match align(&output) {
        Ok(a) if !a.marks().is_empty() => {
            out.push(TaskExample::punctuation(a.source(), output));
            0
        }
        _ => 1,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    /// 1-based line number.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub accepted: Vec<TaskExample>,
    pub rejected: Vec<Rejection>,
}

impl ValidationReport {
    /// `line,reason` CSV with a header row.
    pub fn rejection_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["line", "reason"]).expect("in-memory write");
        for r in &self.rejected {
            w.write_record([r.line.to_string(), r.reason.clone()])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
    }
}

fn normalize_quotes(s: &str) -> String {
    s.replace('“', "「").replace('”', "」")
}

/// Validates JSONL task records. Every line ends up either accepted or in the
/// rejection list.
pub fn validate_task_lines(src: &str) -> ValidationReport {
    let mut report = ValidationReport::default();
    for (i, line) in src.lines().enumerate() {
        let line_no = i + 1;
        let reject = |reason: String| Rejection { line: line_no, reason };
        if line.trim().is_empty() {
            report.rejected.push(reject("blank line".into()));
            continue;
        }
        let mut ex: TaskExample = match serde_json::from_str(line) {
            Ok(ex) => ex,
            Err(e) => {
                report.rejected.push(reject(format!("invalid record: {e}")));
                continue;
            }
        };
        if ex.task == TaskKind::WordExplanation {
            ex.instruction = normalize_quotes(&ex.instruction);
        }
        match ex.check() {
            Ok(()) => report.accepted.push(ex),
            Err(reason) => report.rejected.push(reject(reason)),
        }
    }
    report
}

pub fn validate_task_jsonl(path: impl AsRef<Path>) -> Result<ValidationReport, io::Error> {
    Ok(validate_task_lines(&fs::read_to_string(path)?))
}

/// `BOS input \n instruction SEP` as the prompt and `output EOS` as the target.
pub fn serialize_for_training(e: &TaskExample, vocab: &Vocabulary) -> SftSequence {
    SftSequence {
        prompt: prompt_ids(vocab, &e.input, &e.instruction),
        target: target_ids(vocab, &e.output),
    }
}

pub fn prompt_ids(vocab: &Vocabulary, input: &str, instruction: &str) -> Vec<TokenId> {
    let mut p = Vec::with_capacity(input.chars().count() + instruction.chars().count() + 3);
    p.push(BOS);
    p.extend(vocab.encode(input));
    p.push(vocab.id_of('\n'));
    p.extend(vocab.encode(instruction));
    p.push(SEP);
    p
}

pub fn target_ids(vocab: &Vocabulary, output: &str) -> Vec<TokenId> {
    let mut t = vocab.encode(output);
    t.push(EOS);
    t
}
