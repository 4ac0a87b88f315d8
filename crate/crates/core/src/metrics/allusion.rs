use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{same_len, MetricError, Prf};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllusionGold {
    pub text: String,
    pub has_allusion: bool,
    #[serde(default)]
    pub allusion_ids: BTreeSet<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllusionPred {
    pub has_allusion: bool,
    #[serde(default)]
    pub allusion_ids: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AllusionScores {
    pub detection_accuracy: f64,
    /// Micro counts over (sample, label) pairs.
    pub identification: Prf,
}

pub fn allusion_scores(golds: &[AllusionGold], preds: &[AllusionPred]) -> Result<AllusionScores, MetricError> {
    same_len(golds.len(), preds.len())?;
    if let Some(index) = golds.iter().position(|g| g.has_allusion == g.allusion_ids.is_empty()) {
        return Err(MetricError::InconsistentGold { index });
    }
    let correct = golds
        .iter()
        .zip(preds)
        .filter(|(g, p)| g.has_allusion == p.has_allusion)
        .count();
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (g, p) in golds.iter().zip(preds) {
        tp += g.allusion_ids.intersection(&p.allusion_ids).count() as u64;
        fp += p.allusion_ids.difference(&g.allusion_ids).count() as u64;
        fn_ += g.allusion_ids.difference(&p.allusion_ids).count() as u64;
    }
    Ok(AllusionScores {
        detection_accuracy: if golds.is_empty() {
            0.0
        } else {
            correct as f64 / golds.len() as f64
        },
        identification: Prf::from_counts(tp, fp, fn_),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(xs: &[&str]) -> BTreeSet<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn gold(ids: &[&str]) -> AllusionGold {
        AllusionGold {
            text: "樓".into(),
            has_allusion: !ids.is_empty(),
            allusion_ids: set(ids),
        }
    }

    fn pred(ids: &[&str]) -> AllusionPred {
        AllusionPred {
            has_allusion: !ids.is_empty(),
            allusion_ids: set(ids),
        }
    }

    #[test]
    fn pair_counting() {
        let s = allusion_scores(&[gold(&["A", "B"])], &[pred(&["A", "C"])]).unwrap();
        assert_eq!(s.detection_accuracy, 1.0);
        assert_eq!(
            (s.identification.tp, s.identification.fp, s.identification.fn_),
            (1, 1, 1)
        );
        assert_eq!(s.identification.f1, 0.5);
    }

    #[test]
    fn detection_accuracy() {
        let golds = [gold(&["A"]), gold(&[]), gold(&["B"]), gold(&[])];
        let preds = [pred(&["A"]), pred(&["X"]), pred(&[]), pred(&[])];
        let s = allusion_scores(&golds, &preds).unwrap();
        assert_eq!(s.detection_accuracy, 0.5);
    }

    #[test]
    fn no_positives_is_flagged() {
        let golds = vec![gold(&[]); 3];
        let preds = vec![pred(&[]); 3];
        let s = allusion_scores(&golds, &preds).unwrap();
        assert_eq!(s.detection_accuracy, 1.0);
        assert_eq!(s.identification.f1, 0.0);
        assert!(s.identification.is_degenerate());
    }

    #[test]
    fn errors() {
        assert!(matches!(
            allusion_scores(&[gold(&[])], &[]),
            Err(MetricError::LengthMismatch { left: 1, right: 0 })
        ));
        let mut bad = gold(&["A"]);
        bad.has_allusion = false;
        assert!(matches!(
            allusion_scores(&[bad], &[pred(&[])]),
            Err(MetricError::InconsistentGold { index: 0 })
        ));
    }
}
