use crate::text::{align, strip_marks};

use super::{same_len, MetricError, Prf};

/// True when the two texts differ once marks are removed.
pub fn text_error(original: &str, predicted: &str) -> bool {
    strip_marks(original) != strip_marks(predicted)
}

/// Fraction of `(original, predicted)` pairs with a text error; 0 for none.
pub fn text_error_rate<A: AsRef<str>, B: AsRef<str>>(pairs: &[(A, B)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let bad = pairs.iter().filter(|(a, b)| text_error(a.as_ref(), b.as_ref())).count();
    bad as f64 / pairs.len() as f64
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SegPunct {
    /// Boundaries matched regardless of mark type.
    pub segmentation: Prf,
    /// Boundaries matched with the same mark.
    pub punctuation: Prf,
}

/// Boundary-level scores of one predicted text against its gold version.
pub fn seg_punct_f1(gold: &str, pred: &str) -> Result<SegPunct, MetricError> {
    if text_error(gold, pred) {
        return Err(MetricError::TextMismatch);
    }
    let g = align(gold)?;
    let p = align(pred)?;
    let (mut seg, mut punct) = ([0u64; 3], [0u64; 3]);
    for b in 1..=g.len() {
        match (g.mark_at(b), p.mark_at(b)) {
            (Some(x), Some(y)) => {
                seg[0] += 1;
                if x == y {
                    punct[0] += 1;
                } else {
                    punct[1] += 1;
                    punct[2] += 1;
                }
            }
            (None, Some(_)) => {
                seg[1] += 1;
                punct[1] += 1;
            }
            (Some(_), None) => {
                seg[2] += 1;
                punct[2] += 1;
            }
            (None, None) => {}
        }
    }
    Ok(SegPunct {
        segmentation: Prf::from_counts(seg[0], seg[1], seg[2]),
        punctuation: Prf::from_counts(punct[0], punct[1], punct[2]),
    })
}

/// Corpus scores. Samples whose text does not survive are counted in
/// `text_error_rate` and left out of the F1 figures.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SegPunctReport {
    pub samples: usize,
    pub text_errors: usize,
    pub text_error_rate: f64,
    /// Micro-averaged over the scored samples.
    pub micro: SegPunct,
    /// Mean of per-sample F1 over the scored samples.
    pub macro_seg_f1: f64,
    pub macro_punct_f1: f64,
}

pub fn seg_punct_corpus<A: AsRef<str>, B: AsRef<str>>(golds: &[A], preds: &[B]) -> Result<SegPunctReport, MetricError> {
    same_len(golds.len(), preds.len())?;
    let mut report = SegPunctReport {
        samples: golds.len(),
        ..Default::default()
    };
    let mut scored = 0usize;
    for (g, p) in golds.iter().zip(preds) {
        match seg_punct_f1(g.as_ref(), p.as_ref()) {
            Ok(s) => {
                scored += 1;
                report.micro.segmentation += s.segmentation;
                report.micro.punctuation += s.punctuation;
                report.macro_seg_f1 += s.segmentation.f1;
                report.macro_punct_f1 += s.punctuation.f1;
            }
            Err(MetricError::TextMismatch) => report.text_errors += 1,
            Err(e) => return Err(e),
        }
    }
    if scored > 0 {
        report.macro_seg_f1 /= scored as f64;
        report.macro_punct_f1 /= scored as f64;
    }
    if report.samples > 0 {
        report.text_error_rate = report.text_errors as f64 / report.samples as f64;
    }
    Ok(report)
}
