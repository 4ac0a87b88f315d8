//! Evaluation metrics for punctuation, allusion, translation and gloss
//! similarity.

mod allusion;
mod punct;
mod similarity;
mod translation;

pub use allusion::{allusion_scores, AllusionGold, AllusionPred, AllusionScores};
pub use punct::{seg_punct_corpus, seg_punct_f1, text_error, text_error_rate, SegPunct, SegPunctReport};
pub use similarity::{jaro, jaro_winkler, WINKLER_MAX_PREFIX, WINKLER_SCALE};
pub use translation::{bleu, bleu_with, chrf, BleuSmoothing, CHRF_BETA, CHRF_MAX_ORDER};

use std::ops::{Add, AddAssign};

use crate::text::TextError;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("texts differ once marks are removed")]
    TextMismatch,
    #[error("{left} references but {right} predictions")]
    LengthMismatch { left: usize, right: usize },
    #[error("gold sample {index}: has_allusion disagrees with its label set")]
    InconsistentGold { index: usize },
    #[error(transparent)]
    Malformed(#[from] TextError),
}

pub(crate) fn same_len(left: usize, right: usize) -> Result<(), MetricError> {
    if left == right {
        Ok(())
    } else {
        Err(MetricError::LengthMismatch { left, right })
    }
}

/// Precision, recall and F1 with the counts they came from. A ratio whose
/// denominator is zero is 0.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Prf {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
        }
    }

    /// True when precision or recall had an empty denominator.
    pub fn is_degenerate(&self) -> bool {
        self.tp + self.fp == 0 || self.tp + self.fn_ == 0
    }
}

impl Add for Prf {
    type Output = Prf;

    fn add(self, o: Prf) -> Prf {
        Prf::from_counts(self.tp + o.tp, self.fp + o.fp, self.fn_ + o.fn_)
    }
}

impl AddAssign for Prf {
    fn add_assign(&mut self, o: Prf) {
        *self = *self + o;
    }
}

impl std::iter::Sum for Prf {
    fn sum<I: Iterator<Item = Prf>>(iter: I) -> Prf {
        iter.fold(Prf::default(), Add::add)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prf_conventions() {
        let p = Prf::from_counts(1, 1, 1);
        assert_eq!((p.precision, p.recall, p.f1), (0.5, 0.5, 0.5));
        let z = Prf::from_counts(0, 0, 0);
        assert_eq!((z.precision, z.recall, z.f1), (0.0, 0.0, 0.0));
        assert!(z.is_degenerate());
        let q = Prf::from_counts(2, 0, 2);
        assert_eq!(q.precision, 1.0);
        assert_eq!(q.recall, 0.5);
        assert!((q.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(p + q, Prf::from_counts(3, 1, 3));
    }
}
