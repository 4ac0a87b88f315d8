//! Rating experiments: blind answer bundles, mean scores, win rates and
//! rater agreement.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum HumanEvalError {
    #[error("item {item}: no answer from system {system}")]
    MissingAnswer { item: String, system: String },
    #[error("ratings line {line}: {reason}")]
    BadRating { line: usize, reason: String },
    #[error("no rating for item {item}, system {system}, evaluator {evaluator}")]
    Incomplete {
        item: String,
        system: String,
        evaluator: String,
    },
    #[error("key does not match bundles: {0}")]
    BadKey(String),
    #[error("correlation undefined: {0}")]
    DegenerateInput(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Allowed score values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scale {
    /// 0, 0.5 or 1.
    Explanation,
    /// Integers 1 to 5.
    FivePoint,
    /// Any finite number.
    #[default]
    Any,
}

impl Scale {
    pub fn admits(self, x: f64) -> bool {
        match self {
            Scale::Explanation => x == 0.0 || x == 0.5 || x == 1.0,
            Scale::FivePoint => x.fract() == 0.0 && (1.0..=5.0).contains(&x),
            Scale::Any => x.is_finite(),
        }
    }
}

/// Dense item × system × evaluator scores. Ids keep first-appearance order.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingMatrix {
    pub items: Vec<String>,
    pub systems: Vec<String>,
    pub evaluators: Vec<String>,
    scores: Vec<f64>,
}

#[derive(Debug, Deserialize)]
struct RatingRow {
    item: String,
    system: String,
    evaluator: String,
    score: f64,
}

fn intern(ids: &mut Vec<String>, index: &mut HashMap<String, usize>, id: &str) -> usize {
    if let Some(&i) = index.get(id) {
        return i;
    }
    ids.push(id.to_string());
    index.insert(id.to_string(), ids.len() - 1);
    ids.len() - 1
}

impl RatingMatrix {
    pub fn score(&self, item: usize, system: usize, evaluator: usize) -> f64 {
        self.scores[(item * self.systems.len() + system) * self.evaluators.len() + evaluator]
    }

    /// Reads `item,system,evaluator,score` CSV with a header row. Every
    /// combination must be rated exactly once.
    pub fn from_csv(src: &str, scale: Scale) -> Result<Self, HumanEvalError> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(src.as_bytes());
        let (mut items, mut systems, mut evaluators) = (Vec::new(), Vec::new(), Vec::new());
        let (mut ii, mut si, mut ei) = (HashMap::new(), HashMap::new(), HashMap::new());
        let mut seen: HashMap<(usize, usize, usize), f64> = HashMap::new();
        for (n, row) in rdr.deserialize::<RatingRow>().enumerate() {
            let line = n + 2;
            let row = row.map_err(|e| HumanEvalError::BadRating {
                line,
                reason: e.to_string(),
            })?;
            if !scale.admits(row.score) {
                return Err(HumanEvalError::BadRating {
                    line,
                    reason: format!("score {} outside the scale", row.score),
                });
            }
            let key = (
                intern(&mut items, &mut ii, &row.item),
                intern(&mut systems, &mut si, &row.system),
                intern(&mut evaluators, &mut ei, &row.evaluator),
            );
            if seen.insert(key, row.score).is_some() {
                return Err(HumanEvalError::BadRating {
                    line,
                    reason: "duplicate rating".into(),
                });
            }
        }
        let mut scores = Vec::with_capacity(items.len() * systems.len() * evaluators.len());
        for (i, item) in items.iter().enumerate() {
            for (s, system) in systems.iter().enumerate() {
                for (e, evaluator) in evaluators.iter().enumerate() {
                    match seen.get(&(i, s, e)) {
                        Some(&x) => scores.push(x),
                        None => {
                            return Err(HumanEvalError::Incomplete {
                                item: item.clone(),
                                system: system.clone(),
                                evaluator: evaluator.clone(),
                            })
                        }
                    }
                }
            }
        }
        Ok(Self {
            items,
            systems,
            evaluators,
            scores,
        })
    }
}

/// Mean over items and evaluators, per system in matrix order.
pub fn mean_scores(m: &RatingMatrix) -> Vec<(String, f64)> {
    let n = (m.items.len() * m.evaluators.len()) as f64;
    m.systems
        .iter()
        .enumerate()
        .map(|(s, name)| {
            let mut total = 0.0;
            for i in 0..m.items.len() {
                for e in 0..m.evaluators.len() {
                    total += m.score(i, s, e);
                }
            }
            (name.clone(), if n == 0.0 { 0.0 } else { total / n })
        })
        .collect()
}

/// Share of (item, evaluator) pairs in which each system has the top score;
/// every system tied at the top counts as first.
pub fn win_rate(m: &RatingMatrix) -> Vec<(String, f64)> {
    let mut wins = vec![0usize; m.systems.len()];
    for i in 0..m.items.len() {
        for e in 0..m.evaluators.len() {
            let best = (0..m.systems.len())
                .map(|s| m.score(i, s, e))
                .fold(f64::NEG_INFINITY, f64::max);
            for (s, w) in wins.iter_mut().enumerate() {
                if m.score(i, s, e) == best {
                    *w += 1;
                }
            }
        }
    }
    let n = (m.items.len() * m.evaluators.len()) as f64;
    m.systems
        .iter()
        .zip(wins)
        .map(|(name, w)| (name.clone(), if n == 0.0 { 0.0 } else { w as f64 / n }))
        .collect()
}

/// 1-based ranks with ties sharing their mean rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average-tie ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, HumanEvalError> {
    if x.len() != y.len() {
        return Err(HumanEvalError::DegenerateInput(format!(
            "lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(HumanEvalError::DegenerateInput("fewer than two observations".into()));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let mean = (x.len() as f64 + 1.0) / 2.0;
    let (mut cov, mut vx, mut vy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mean) * (b - mean);
        vx += (a - mean) * (a - mean);
        vy += (b - mean) * (b - mean);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(HumanEvalError::DegenerateInput("constant input".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairAgreement {
    pub first: String,
    pub second: String,
    /// `None` when one side is constant.
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Consistency {
    /// Mean Spearman over the evaluator pairs that have one.
    pub mean: f64,
    pub pairs: Vec<PairAgreement>,
}

impl Consistency {
    pub fn skipped(&self) -> impl Iterator<Item = &PairAgreement> {
        self.pairs.iter().filter(|p| p.rho.is_none())
    }
}

/// Mean pairwise Spearman between evaluators over the flattened
/// item × system scores.
pub fn inter_rater_consistency(m: &RatingMatrix) -> Result<Consistency, HumanEvalError> {
    let ne = m.evaluators.len();
    if ne < 2 {
        return Err(HumanEvalError::DegenerateInput("fewer than two evaluators".into()));
    }
    let flat: Vec<Vec<f64>> = (0..ne)
        .map(|e| {
            (0..m.items.len())
                .flat_map(|i| (0..m.systems.len()).map(move |s| (i, s)))
                .map(|(i, s)| m.score(i, s, e))
                .collect()
        })
        .collect();
    let mut pairs = Vec::new();
    for a in 0..ne {
        for b in a + 1..ne {
            pairs.push(PairAgreement {
                first: m.evaluators[a].clone(),
                second: m.evaluators[b].clone(),
                rho: spearman(&flat[a], &flat[b]).ok(),
            });
        }
    }
    let rhos: Vec<f64> = pairs.iter().filter_map(|p| p.rho).collect();
    if rhos.is_empty() {
        return Err(HumanEvalError::DegenerateInput(
            "every evaluator pair is constant".into(),
        ));
    }
    Ok(Consistency {
        mean: rhos.iter().sum::<f64>() / rhos.len() as f64,
        pairs,
    })
}

/// One item with the answer of every system.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSet {
    pub item: String,
    pub answers: BTreeMap<String, String>,
}

/// Answers of one item in shuffled order, without their systems.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bundle {
    pub item: String,
    pub answers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyEntry {
    pub item: String,
    pub slot: usize,
    pub system: String,
}

/// Shuffles each item's answers with a generator seeded by `seed`. Every item
/// must answer for every system that appears anywhere.
pub fn make_bundles(sets: &[AnswerSet], seed: u64) -> Result<(Vec<Bundle>, Vec<KeyEntry>), HumanEvalError> {
    let systems: std::collections::BTreeSet<&String> = sets.iter().flat_map(|s| s.answers.keys()).collect();
    for set in sets {
        if let Some(missing) = systems.iter().find(|s| !set.answers.contains_key(**s)) {
            return Err(HumanEvalError::MissingAnswer {
                item: set.item.clone(),
                system: (*missing).clone(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bundles = Vec::with_capacity(sets.len());
    let mut key = Vec::new();
    for set in sets {
        let mut order: Vec<(&String, &String)> = set.answers.iter().collect();
        order.shuffle(&mut rng);
        for (slot, (system, _)) in order.iter().enumerate() {
            key.push(KeyEntry {
                item: set.item.clone(),
                slot,
                system: (*system).clone(),
            });
        }
        bundles.push(Bundle {
            item: set.item.clone(),
            answers: order.into_iter().map(|(_, a)| a.clone()).collect(),
        });
    }
    Ok((bundles, key))
}

/// Restores system names to bundled answers.
pub fn unshuffle(bundles: &[Bundle], key: &[KeyEntry]) -> Result<Vec<AnswerSet>, HumanEvalError> {
    let mut lookup: HashMap<(&str, usize), &str> = HashMap::new();
    for k in key {
        if lookup.insert((&k.item, k.slot), &k.system).is_some() {
            return Err(HumanEvalError::BadKey(format!(
                "duplicate slot {} of item {}",
                k.slot, k.item
            )));
        }
    }
    let mut used = 0;
    let mut out = Vec::with_capacity(bundles.len());
    for b in bundles {
        let mut answers = BTreeMap::new();
        for (slot, a) in b.answers.iter().enumerate() {
            let system = lookup
                .get(&(b.item.as_str(), slot))
                .ok_or_else(|| HumanEvalError::BadKey(format!("no entry for slot {slot} of item {}", b.item)))?;
            answers.insert(system.to_string(), a.clone());
            used += 1;
        }
        out.push(AnswerSet {
            item: b.item.clone(),
            answers,
        });
    }
    if used != key.len() {
        return Err(HumanEvalError::BadKey(format!("{} entries unused", key.len() - used)));
    }
    Ok(out)
}

/// Key file as `item,slot,system` CSV.
pub fn key_to_csv(key: &[KeyEntry]) -> Result<String, HumanEvalError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for k in key {
        w.serialize(k)?;
    }
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

pub fn key_from_csv(src: &str) -> Result<Vec<KeyEntry>, HumanEvalError> {
    let mut rdr = csv::Reader::from_reader(src.as_bytes());
    Ok(rdr.deserialize().collect::<Result<Vec<KeyEntry>, _>>()?)
}
