//! Character-level vocabulary.
//!
//! Ids 0..5 are reserved for the special symbols; every codepoint that
//! survives the frequency threshold gets its own id, as does every mark.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::Path;

use crate::text::MARKS;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const SEP: TokenId = 4;

const SPECIAL_LITERALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<sep>"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Special(TokenId),
    Char(char),
}

#[derive(Debug, thiserror::Error)]
pub enum TokenizerError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("token id {id} out of range for vocabulary of size {size}")]
    UnknownId { id: TokenId, size: usize },
    #[error("vocabulary file line {line}: {reason}")]
    BadVocabFile { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<Token>,
    ids: HashMap<char, TokenId>,
}

impl Vocabulary {
    fn from_chars(chars: impl IntoIterator<Item = char>) -> Self {
        let mut tokens: Vec<Token> = (0..SPECIAL_LITERALS.len() as TokenId).map(Token::Special).collect();
        let mut ids = HashMap::new();
        for c in chars {
            if ids.contains_key(&c) {
                continue;
            }
            ids.insert(c, tokens.len() as TokenId);
            tokens.push(Token::Char(c));
        }
        Self { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: TokenId) -> Option<Token> {
        self.tokens.get(id as usize).copied()
    }

    /// Id of `c`, or `None` when it is out of vocabulary.
    pub fn get(&self, c: char) -> Option<TokenId> {
        self.ids.get(&c).copied()
    }

    pub fn id_of(&self, c: char) -> TokenId {
        self.get(c).unwrap_or(UNK)
    }

    pub fn contains(&self, c: char) -> bool {
        self.ids.contains_key(&c)
    }

    /// Ids of the seven marks, in [`MARKS`] order.
    pub fn mark_ids(&self) -> [TokenId; 7] {
        MARKS.map(|m| self.id_of(m))
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.chars().map(|c| self.id_of(c)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String, TokenizerError> {
        let mut out = String::with_capacity(ids.len() * 3);
        for &id in ids {
            match self.token(id) {
                Some(Token::Char(c)) => out.push(c),
                Some(Token::Special(_)) => {}
                None => return Err(TokenizerError::UnknownId { id, size: self.len() }),
            }
        }
        Ok(out)
    }

    /// One token per line; line number is the id.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for token in &self.tokens {
            match token {
                Token::Special(id) => out.push_str(SPECIAL_LITERALS[*id as usize]),
                // Line terminators cannot sit on a line of their own.
                Token::Char('\n') => out.push_str("\\n"),
                Token::Char('\r') => out.push_str("\\r"),
                Token::Char(c) => out.push(*c),
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(s: &str) -> Result<Self, TokenizerError> {
        let body = s.strip_suffix('\n').unwrap_or(s);
        let mut chars = Vec::new();
        for (line_no, line) in body.split('\n').enumerate() {
            if line_no < SPECIAL_LITERALS.len() {
                if line != SPECIAL_LITERALS[line_no] {
                    return Err(TokenizerError::BadVocabFile {
                        line: line_no + 1,
                        reason: format!("expected {}", SPECIAL_LITERALS[line_no]),
                    });
                }
                continue;
            }
            let c = match line {
                "\\n" => '\n',
                "\\r" => '\r',
                _ => {
                    let mut it = line.chars();
                    match (it.next(), it.next()) {
                        (Some(c), None) => c,
                        _ => {
                            return Err(TokenizerError::BadVocabFile {
                                line: line_no + 1,
                                reason: format!("expected a single codepoint, found {line:?}"),
                            })
                        }
                    }
                }
            };
            if chars.contains(&c) {
                return Err(TokenizerError::BadVocabFile {
                    line: line_no + 1,
                    reason: format!("duplicate token {c:?}"),
                });
            }
            chars.push(c);
        }
        let lines = body.split('\n').count();
        if body.is_empty() || lines < SPECIAL_LITERALS.len() {
            return Err(TokenizerError::BadVocabFile {
                line: lines + 1,
                reason: "missing special tokens".into(),
            });
        }
        if let Some(m) = MARKS.iter().find(|m| !chars.contains(m)) {
            return Err(TokenizerError::BadVocabFile {
                line: lines + 1,
                reason: format!("mark {m} missing"),
            });
        }
        Ok(Self::from_chars(chars))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TokenizerError> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

/// Builds a vocabulary from a character stream.
///
/// Kept codepoints (and all marks) are ordered by descending frequency, ties
/// by ascending codepoint.
pub fn build_vocab(corpus: impl IntoIterator<Item = char>, min_count: u64) -> Result<Vocabulary, TokenizerError> {
    let mut counts: HashMap<char, u64> = HashMap::new();
    let mut seen_any = false;
    for c in corpus {
        seen_any = true;
        *counts.entry(c).or_insert(0) += 1;
    }
    if !seen_any {
        return Err(TokenizerError::EmptyCorpus);
    }
    let mut kept: Vec<(char, u64)> = counts.into_iter().filter(|&(_, n)| n >= min_count).collect();
    for m in MARKS {
        if !kept.iter().any(|&(c, _)| c == m) {
            kept.push((m, 0));
        }
    }
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(Vocabulary::from_chars(kept.into_iter().map(|(c, _)| c)))
}
