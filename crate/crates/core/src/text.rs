//! Codepoint-level text primitives.
//!
//! Only the seven marks in [`MARKS`] take part in alignment and scoring.
//! Quotes, brackets and every other codepoint are ordinary text.

use std::collections::BTreeMap;
use std::fmt;

/// The scored punctuation inventory, in canonical order.
pub const MARKS: [char; 7] = ['，', '。', '！', '？', '；', '：', '、'];

#[inline]
pub fn is_mark(c: char) -> bool {
    MARKS.contains(&c)
}

/// Position of `c` in [`MARKS`], if it is a mark.
pub fn mark_index(c: char) -> Option<usize> {
    MARKS.iter().position(|&m| m == c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MalformedKind {
    /// The text begins with a mark.
    LeadingMark,
    /// Two or more marks occur back to back.
    MarkRun,
    /// An alignment refers to a boundary outside `1..=len(chars)`.
    BoundaryOutOfRange,
    /// An alignment carries a non-mark at a boundary, or a mark among its chars.
    NotAMark,
}

impl fmt::Display for MalformedKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MalformedKind::LeadingMark => "leading mark",
            MalformedKind::MarkRun => "mark run",
            MalformedKind::BoundaryOutOfRange => "boundary out of range",
            MalformedKind::NotAMark => "invalid mark",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TextError {
    #[error("malformed punctuation at codepoint {position}: {kind}")]
    MalformedPunctuation { position: usize, kind: MalformedKind },
}

/// Removes every mark in [`MARKS`]; everything else passes through in order.
pub fn strip_marks(text: &str) -> String {
    text.chars().filter(|&c| !is_mark(c)).collect()
}

/// A source character sequence plus at most one mark per boundary.
///
/// Boundary `i` is the position after the `i`-th character, so a mark
/// following the first character sits at boundary 1. Boundary 0 (before the
/// first character) exists in the index space but can never hold a mark.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PunctuationAlignment {
    chars: Vec<char>,
    marks: BTreeMap<usize, char>,
}

impl PunctuationAlignment {
    pub fn new(chars: Vec<char>, marks: BTreeMap<usize, char>) -> Result<Self, TextError> {
        if let Some(position) = chars.iter().position(|&c| is_mark(c)) {
            return Err(TextError::MalformedPunctuation {
                position,
                kind: MalformedKind::NotAMark,
            });
        }
        for (&boundary, &mark) in &marks {
            if boundary == 0 {
                return Err(TextError::MalformedPunctuation {
                    position: 0,
                    kind: MalformedKind::LeadingMark,
                });
            }
            if boundary > chars.len() {
                return Err(TextError::MalformedPunctuation {
                    position: boundary,
                    kind: MalformedKind::BoundaryOutOfRange,
                });
            }
            if !is_mark(mark) {
                return Err(TextError::MalformedPunctuation {
                    position: boundary,
                    kind: MalformedKind::NotAMark,
                });
            }
        }
        Ok(Self { chars, marks })
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn marks(&self) -> &BTreeMap<usize, char> {
        &self.marks
    }

    pub fn mark_at(&self, boundary: usize) -> Option<char> {
        self.marks.get(&boundary).copied()
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    /// The unpunctuated text.
    pub fn source(&self) -> String {
        self.chars.iter().collect()
    }

    /// Interleaves chars and marks back into a punctuated string.
    pub fn render(&self) -> String {
        let mut out = String::with_capacity((self.chars.len() + self.marks.len()) * 3);
        for (i, &c) in self.chars.iter().enumerate() {
            out.push(c);
            if let Some(&m) = self.marks.get(&(i + 1)) {
                out.push(m);
            }
        }
        out
    }
}

/// Splits punctuated text into its characters and boundary marks.
pub fn align(punctuated: &str) -> Result<PunctuationAlignment, TextError> {
    let mut chars = Vec::new();
    let mut marks = BTreeMap::new();
    let mut prev_mark = false;
    for (position, c) in punctuated.chars().enumerate() {
        if is_mark(c) {
            if chars.is_empty() {
                return Err(TextError::MalformedPunctuation {
                    position,
                    kind: MalformedKind::LeadingMark,
                });
            }
            if prev_mark {
                return Err(TextError::MalformedPunctuation {
                    position,
                    kind: MalformedKind::MarkRun,
                });
            }
            marks.insert(chars.len(), c);
            prev_mark = true;
        } else {
            chars.push(c);
            prev_mark = false;
        }
    }
    Ok(PunctuationAlignment { chars, marks })
}

/// Shorthand for `a.render()`.
pub fn render(a: &PunctuationAlignment) -> String {
    a.render()
}
