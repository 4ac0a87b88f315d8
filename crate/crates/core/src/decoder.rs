//! Punctuation restoration by masked greedy decoding.
//!
//! At every step the model may only emit the next source character or one of
//! the marks, so the source text always comes back unchanged.

use std::fmt;

use rayon::prelude::*;

use crate::kernels::Real;
use crate::model::{push_many_selected, token_logit, ModelError, Parameters, Session};
use crate::sft::{prompt_ids, PUNCTUATION_INSTRUCTION};
use crate::text::{align, is_mark, strip_marks, MARKS};
use crate::tokenizer::{TokenId, Vocabulary, EOS};

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error("input text is empty")]
    EmptyInput,
    #[error("input already contains mark {mark} at character {position}")]
    ContainsMark { position: usize, mark: char },
    #[error("vocabulary has {vocab} entries but the model expects {model}")]
    VocabMismatch { vocab: usize, model: usize },
    #[error("context of {max_seq_len} tokens is too short for constrained decoding")]
    ContextTooSmall { max_seq_len: usize },
    #[error("texts differ once marks are removed")]
    AlignmentMismatch,
    #[error(transparent)]
    Text(#[from] crate::text::TextError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Position of the decoder within one source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeState {
    pub source: Vec<char>,
    pub cursor: usize,
    pub last_was_mark: bool,
    pub finished: bool,
}

/// What a chosen token did to the state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Emitted {
    Char(char),
    Mark(char),
    End,
}

impl DecodeState {
    pub fn new(source: impl IntoIterator<Item = char>) -> Self {
        Self {
            source: source.into_iter().collect(),
            cursor: 0,
            last_was_mark: false,
            finished: false,
        }
    }

    /// Applies `token`, which must be one of [`allowed_tokens`].
    pub fn advance(&mut self, token: TokenId, vocab: &Vocabulary) -> Emitted {
        debug_assert!(!self.finished);
        if token == EOS {
            self.finished = true;
            return Emitted::End;
        }
        if let Some(i) = vocab.mark_ids().iter().position(|&m| m == token) {
            self.last_was_mark = true;
            return Emitted::Mark(MARKS[i]);
        }
        let c = self.source[self.cursor];
        self.cursor += 1;
        self.last_was_mark = false;
        Emitted::Char(c)
    }
}

/// Token ids permitted in state `s`. Never empty for an unfinished state.
pub fn allowed_tokens(s: &DecodeState, vocab: &Vocabulary) -> Vec<TokenId> {
    let marks = vocab.mark_ids();
    if s.cursor == s.source.len() {
        return if s.last_was_mark { vec![EOS] } else { marks.to_vec() };
    }
    let next = vocab.id_of(s.source[s.cursor]);
    if s.cursor == 0 || s.last_was_mark {
        vec![next]
    } else {
        let mut v = Vec::with_capacity(8);
        v.push(next);
        v.extend_from_slice(&marks);
        v
    }
}

/// Longest source chunk that fits the context: the prompt holds the text plus
/// 13 fixed tokens and at most two tokens per character are fed back.
pub fn max_chunk_chars(max_seq_len: usize) -> usize {
    let fixed = 3 + PUNCTUATION_INSTRUCTION.chars().count();
    max_seq_len.saturating_sub(fixed) / 3
}

/// Sequences decoded side by side so each weight row is read once per step.
pub const LANES: usize = 8;

/// Chunks handed to one rayon task by [`punctuate_many`].
const BLOCK: usize = 64;

/// Highest-scoring allowed token, ties to the lowest id; only the allowed
/// logits are computed.
fn best_allowed<T: Real>(params: &Parameters<T>, hidden: &[T], allowed: Vec<TokenId>) -> TokenId {
    let mut best: Option<(TokenId, T)> = None;
    for id in allowed {
        let v = token_logit(params, hidden, id);
        best = match best {
            None => Some((id, v)),
            Some((bid, bv)) if v > bv || (v == bv && id < bid) => Some((id, v)),
            keep => keep,
        };
    }
    best.expect("mask is never empty").0
}

struct Lane<'p, T> {
    job: usize,
    session: Session<'p, T>,
    prompt: Vec<TokenId>,
    fed: usize,
    state: DecodeState,
    out: String,
    next: TokenId,
}

/// Punctuates every chunk, keeping up to [`LANES`] decodes in flight.
fn decode_chunks<T: Real>(
    params: &Parameters<T>,
    vocab: &Vocabulary,
    chunks: &[&[char]],
) -> Result<Vec<String>, ModelError> {
    let mut results = vec![String::new(); chunks.len()];
    let mut queue = 0..chunks.len();
    let mut lanes: Vec<Lane<'_, T>> = Vec::with_capacity(LANES);
    loop {
        while lanes.len() < LANES {
            let Some(job) = queue.next() else { break };
            let text: String = chunks[job].iter().collect();
            let prompt = prompt_ids(vocab, &text, PUNCTUATION_INSTRUCTION);
            lanes.push(Lane {
                job,
                session: Session::new(params),
                next: prompt[0],
                prompt,
                fed: 0,
                state: DecodeState::new(chunks[job].iter().copied()),
                out: String::with_capacity(chunks[job].len() * 6),
            });
        }
        if lanes.is_empty() {
            return Ok(results);
        }
        let tokens: Vec<TokenId> = lanes.iter().map(|l| l.next).collect();
        let want: Vec<bool> = lanes.iter().map(|l| l.fed + 1 >= l.prompt.len()).collect();
        let hidden = {
            let mut sessions: Vec<&mut Session<'_, T>> = lanes.iter_mut().map(|l| &mut l.session).collect();
            push_many_selected(&mut sessions, &tokens, &want)?
        };
        let mut rows = hidden.chunks_exact(params.config.d_model);
        for lane in lanes.iter_mut() {
            lane.fed += 1;
            if lane.fed < lane.prompt.len() {
                lane.next = lane.prompt[lane.fed];
                continue;
            }
            let row = rows.next().expect("one row per wanted lane");
            let next = best_allowed(params, row, allowed_tokens(&lane.state, vocab));
            match lane.state.advance(next, vocab) {
                Emitted::End => {}
                Emitted::Char(c) | Emitted::Mark(c) => {
                    lane.out.push(c);
                    lane.next = next;
                }
            }
        }
        let mut k = 0;
        while k < lanes.len() {
            if lanes[k].state.finished {
                let done = lanes.swap_remove(k);
                results[done.job] = done.out;
            } else {
                k += 1;
            }
        }
    }
}

fn check_input(text: &str) -> Result<Vec<char>, DecodeError> {
    let chars: Vec<char> = text.chars().collect();
    if chars.is_empty() {
        return Err(DecodeError::EmptyInput);
    }
    if let Some((position, &mark)) = chars.iter().enumerate().find(|(_, c)| is_mark(**c)) {
        return Err(DecodeError::ContainsMark { position, mark });
    }
    Ok(chars)
}

fn chunk_len<T: Real>(params: &Parameters<T>, vocab: &Vocabulary) -> Result<usize, DecodeError> {
    if vocab.len() != params.config.vocab_size {
        return Err(DecodeError::VocabMismatch {
            vocab: vocab.len(),
            model: params.config.vocab_size,
        });
    }
    match max_chunk_chars(params.config.max_seq_len) {
        0 => Err(DecodeError::ContextTooSmall {
            max_seq_len: params.config.max_seq_len,
        }),
        n => Ok(n),
    }
}

/// Restores punctuation in `text`. Texts longer than the context allows are
/// cut into consecutive chunks, each of which ends with a mark.
pub fn punctuate<T: Real>(params: &Parameters<T>, vocab: &Vocabulary, text: &str) -> Result<String, DecodeError> {
    let chars = check_input(text)?;
    let chunk = chunk_len(params, vocab)?;
    let pieces: Vec<&[char]> = chars.chunks(chunk).collect();
    Ok(decode_chunks(params, vocab, &pieces)?.concat())
}

/// [`punctuate`] over many texts; results keep input order and are identical
/// to punctuating each text alone.
pub fn punctuate_many<T: Real, S: AsRef<str> + Sync>(
    params: &Parameters<T>,
    vocab: &Vocabulary,
    texts: &[S],
) -> Vec<Result<String, DecodeError>> {
    let chunk = match chunk_len(params, vocab) {
        Ok(n) => n,
        Err(_) => {
            return texts
                .iter()
                .map(|_| Err(chunk_len(params, vocab).unwrap_err()))
                .collect()
        }
    };
    let inputs: Vec<Result<Vec<char>, DecodeError>> = texts.iter().map(|t| check_input(t.as_ref())).collect();
    let mut jobs: Vec<(usize, &[char])> = Vec::new();
    for (i, chars) in inputs.iter().enumerate() {
        if let Ok(chars) = chars {
            jobs.extend(chars.chunks(chunk).map(|c| (i, c)));
        }
    }
    let decoded: Vec<Result<Vec<String>, ModelError>> = jobs
        .par_chunks(BLOCK)
        .map(|block| {
            let pieces: Vec<&[char]> = block.iter().map(|&(_, c)| c).collect();
            decode_chunks(params, vocab, &pieces)
        })
        .collect();
    let owners: Vec<usize> = jobs.into_iter().map(|(i, _)| i).collect();
    let mut out: Vec<Result<String, DecodeError>> = inputs.into_iter().map(|r| r.map(|_| String::new())).collect();
    for (block, result) in owners.chunks(BLOCK).zip(decoded) {
        match result {
            Ok(strings) => {
                for (&i, s) in block.iter().zip(strings) {
                    if let Ok(acc) = &mut out[i] {
                        acc.push_str(&s);
                    }
                }
            }
            Err(e) => {
                for &i in block {
                    out[i] = Err(DecodeError::Model(e.clone()));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlagKind {
    /// Both place a mark, of different types: (gold, model).
    TypeMismatch(char, char),
    /// Only the model places a mark.
    Insertion(char),
    /// Only the gold text places a mark.
    Deletion(char),
}

impl fmt::Display for FlagKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FlagKind::TypeMismatch(g, m) => write!(f, "type mismatch {g}/{m}"),
            FlagKind::Insertion(m) => write!(f, "insertion {m}"),
            FlagKind::Deletion(g) => write!(f, "deletion {g}"),
        }
    }
}

/// A boundary where the reviewer's text and the model disagree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PostEditFlag {
    pub boundary: usize,
    pub kind: FlagKind,
    /// Up to five source characters before the boundary.
    pub left: String,
    /// Up to five source characters after it.
    pub right: String,
}

pub const FLAG_CONTEXT: usize = 5;

pub fn post_edit_flags(original: &str, model: &str) -> Result<Vec<PostEditFlag>, DecodeError> {
    if strip_marks(original) != strip_marks(model) {
        return Err(DecodeError::AlignmentMismatch);
    }
    let gold = align(original)?;
    let pred = align(model)?;
    let chars = gold.chars();
    let mut flags = Vec::new();
    for b in 1..=chars.len() {
        let kind = match (gold.mark_at(b), pred.mark_at(b)) {
            (Some(g), Some(m)) if g != m => FlagKind::TypeMismatch(g, m),
            (None, Some(m)) => FlagKind::Insertion(m),
            (Some(g), None) => FlagKind::Deletion(g),
            _ => continue,
        };
        flags.push(PostEditFlag {
            boundary: b,
            kind,
            left: chars[b.saturating_sub(FLAG_CONTEXT)..b].iter().collect(),
            right: chars[b..(b + FLAG_CONTEXT).min(chars.len())].iter().collect(),
        });
    }
    Ok(flags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tokenizer::build_vocab;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const YU: &str = "州城西南隅有黃鶴樓者";

    fn vocab() -> Vocabulary {
        build_vocab(format!("{YU}\n{PUNCTUATION_INSTRUCTION}").chars(), 1).unwrap()
    }

    fn model(v: &Vocabulary, max_seq_len: usize, seed: u64) -> Parameters<f32> {
        let cfg = ModelConfig::new(1, 16, 2, v.len(), max_seq_len);
        let mut p = Parameters::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for (_, data) in p.named_mut() {
            data.iter_mut().for_each(|x| *x *= 30.0);
        }
        p
    }

    fn grammar_ok(out: &str) -> bool {
        let chars: Vec<char> = out.chars().collect();
        !is_mark(chars[0])
            && chars.windows(2).all(|w| !(is_mark(w[0]) && is_mark(w[1])))
            && is_mark(*chars.last().unwrap())
    }

    #[test]
    fn mask_at_start_mid_and_end() {
        let v = vocab();
        let mut s = DecodeState::new(YU.chars());
        assert_eq!(allowed_tokens(&s, &v), vec![v.id_of('州')]);
        for c in "州城西南隅".chars() {
            s.advance(v.id_of(c), &v);
        }
        let mid = allowed_tokens(&s, &v);
        assert_eq!(mid.len(), 8);
        assert_eq!(mid[0], v.id_of('有'));
        assert_eq!(s.advance(v.id_of('，'), &v), Emitted::Mark('，'));
        assert_eq!(allowed_tokens(&s, &v), vec![v.id_of('有')]);
        for c in "有黃鶴樓者".chars() {
            s.advance(v.id_of(c), &v);
        }
        assert_eq!(allowed_tokens(&s, &v), v.mark_ids().to_vec());
        s.advance(v.id_of('。'), &v);
        assert_eq!(allowed_tokens(&s, &v), vec![EOS]);
        assert_eq!(s.advance(EOS, &v), Emitted::End);
        assert!(s.finished);
    }

    #[test]
    fn random_model_reconstructs() {
        let v = vocab();
        for seed in 0..4 {
            let p = model(&v, 128, seed);
            let out = punctuate(&p, &v, YU).unwrap();
            assert_eq!(strip_marks(&out), YU);
            assert!(grammar_ok(&out), "{out}");
        }
    }

    #[test]
    fn unknown_characters_pass_through() {
        let v = vocab();
        let p = model(&v, 128, 1);
        let text = "州𠀀城☃";
        let out = punctuate(&p, &v, text).unwrap();
        assert_eq!(strip_marks(&out), text);
    }

    #[test]
    fn long_text_is_chunked() {
        let v = vocab();
        let p = model(&v, 40, 2);
        assert_eq!(max_chunk_chars(40), 9);
        let text = YU.repeat(5);
        let out = punctuate(&p, &v, &text).unwrap();
        assert_eq!(strip_marks(&out), text);
        assert!(grammar_ok(&out));
        assert!(matches!(
            punctuate(&model(&v, 15, 2), &v, YU),
            Err(DecodeError::ContextTooSmall { .. })
        ));
    }

    #[test]
    fn invalid_inputs() {
        let v = vocab();
        let p = model(&v, 64, 0);
        assert!(matches!(punctuate(&p, &v, ""), Err(DecodeError::EmptyInput)));
        assert!(matches!(
            punctuate(&p, &v, "州，城"),
            Err(DecodeError::ContainsMark {
                position: 1,
                mark: '，'
            })
        ));
        let other = build_vocab("甲".chars(), 1).unwrap();
        assert!(matches!(
            punctuate(&p, &other, "甲"),
            Err(DecodeError::VocabMismatch { .. })
        ));
    }

    #[test]
    fn many_matches_single() {
        let v = vocab();
        let p = model(&v, 40, 3);
        let mut texts: Vec<String> = (1..40)
            .map(|n| YU.chars().cycle().skip(n % 7).take(n).collect())
            .collect();
        texts.push(String::new());
        texts.push("州，".into());
        let many = punctuate_many(&p, &v, &texts);
        assert_eq!(many.len(), texts.len());
        for (t, r) in texts.iter().zip(many) {
            match (r, punctuate(&p, &v, t)) {
                (Ok(a), Ok(b)) => assert_eq!(a, b),
                (Err(a), Err(b)) => assert_eq!(a.to_string(), b.to_string()),
                (a, b) => panic!("{t}: {a:?} vs {b:?}"),
            }
        }
    }

    #[test]
    fn flag_examples() {
        assert!(post_edit_flags("甲，乙。", "甲，乙。").unwrap().is_empty());
        let f = post_edit_flags("甲，乙。", "甲。乙。").unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].boundary, 1);
        assert_eq!(f[0].kind.to_string(), "type mismatch ，/。");
        let f = post_edit_flags("甲乙。", "甲，乙。").unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].kind.to_string(), "insertion ，");
        let f = post_edit_flags("甲，乙。", "甲乙。").unwrap();
        assert_eq!(f[0].kind.to_string(), "deletion ，");
        assert!(matches!(
            post_edit_flags("甲。", "乙。"),
            Err(DecodeError::AlignmentMismatch)
        ));
    }

    #[test]
    fn flag_context_window() {
        let f = post_edit_flags("一二三四五六七，八九十甲乙丙丁。", "一二三四五六七八九十甲乙丙丁。").unwrap();
        assert_eq!(f[0].left, "三四五六七");
        assert_eq!(f[0].right, "八九十甲乙");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn reconstruction_and_grammar(text in "[州城西南隅有黃鶴樓者甲乙𠀀]{1,40}", seed in 0u64..1000) {
            let v = vocab();
            let p = model(&v, 64, seed);
            let out = punctuate(&p, &v, &text).unwrap();
            prop_assert_eq!(strip_marks(&out), text);
            prop_assert!(grammar_ok(&out));
        }

        #[test]
        fn mask_never_empty(text in "[州城西]{1,10}", picks in proptest::collection::vec(0usize..8, 0..30)) {
            let v = vocab();
            let mut s = DecodeState::new(text.chars());
            for k in picks {
                if s.finished {
                    break;
                }
                let allowed = allowed_tokens(&s, &v);
                prop_assert!(!allowed.is_empty());
                s.advance(allowed[k % allowed.len()], &v);
            }
        }
    }
}
