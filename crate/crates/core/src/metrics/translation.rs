//! Character-level BLEU and chrF. Whitespace is ignored on both sides.

use std::collections::HashMap;

use super::{same_len, MetricError};

pub const BLEU_MAX_ORDER: usize = 4;
pub const CHRF_MAX_ORDER: usize = 6;
pub const CHRF_BETA: f64 = 2.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum BleuSmoothing {
    #[default]
    None,
    /// Adds one to the matches and totals of orders 2 and up.
    AddOne,
}

fn chars(s: &str) -> Vec<char> {
    s.chars().filter(|c| !c.is_whitespace()).collect()
}

fn ngrams(cs: &[char], n: usize) -> HashMap<&[char], u64> {
    let mut m = HashMap::new();
    if cs.len() >= n {
        for w in cs.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped matches, hypothesis total and reference total for one order.
fn order_counts(r: &[char], h: &[char], n: usize) -> (u64, u64, u64) {
    let rg = ngrams(r, n);
    let hg = ngrams(h, n);
    let matched = hg.iter().map(|(g, &c)| c.min(rg.get(g).copied().unwrap_or(0))).sum();
    (matched, hg.values().sum(), rg.values().sum())
}

/// Corpus BLEU over characters, 0 to 100, without smoothing.
pub fn bleu<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H]) -> Result<f64, MetricError> {
    bleu_with(refs, hyps, BleuSmoothing::None)
}

pub fn bleu_with<R: AsRef<str>, H: AsRef<str>>(
    refs: &[R],
    hyps: &[H],
    smoothing: BleuSmoothing,
) -> Result<f64, MetricError> {
    same_len(refs.len(), hyps.len())?;
    let mut matched = [0u64; BLEU_MAX_ORDER];
    let mut total = [0u64; BLEU_MAX_ORDER];
    let (mut ref_len, mut hyp_len) = (0u64, 0u64);
    for (r, h) in refs.iter().zip(hyps) {
        let (r, h) = (chars(r.as_ref()), chars(h.as_ref()));
        ref_len += r.len() as u64;
        hyp_len += h.len() as u64;
        for n in 1..=BLEU_MAX_ORDER {
            let (m, t, _) = order_counts(&r, &h, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..BLEU_MAX_ORDER {
        let (m, t) = match smoothing {
            BleuSmoothing::AddOne if n > 0 => (matched[n] + 1, total[n] + 1),
            _ => (matched[n], total[n]),
        };
        if m == 0 {
            return Ok(0.0);
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * bp * (log_sum / BLEU_MAX_ORDER as f64).exp())
}

/// Corpus chrF (orders 1 to 6, recall-weighted by beta 2), 0 to 100. Orders
/// with no n-grams on either side are left out of the averages.
pub fn chrf<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H]) -> Result<f64, MetricError> {
    same_len(refs.len(), hyps.len())?;
    let mut counts = [(0u64, 0u64, 0u64); CHRF_MAX_ORDER];
    for (r, h) in refs.iter().zip(hyps) {
        let (r, h) = (chars(r.as_ref()), chars(h.as_ref()));
        for (n, acc) in counts.iter_mut().enumerate() {
            let (m, ht, rt) = order_counts(&r, &h, n + 1);
            acc.0 += m;
            acc.1 += ht;
            acc.2 += rt;
        }
    }
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (mut p, mut r, mut orders) = (0.0, 0.0, 0usize);
    for &(m, ht, rt) in &counts {
        if ht == 0 && rt == 0 {
            continue;
        }
        p += ratio(m, ht);
        r += ratio(m, rt);
        orders += 1;
    }
    if orders == 0 {
        return Ok(0.0);
    }
    let (p, r) = (p / orders as f64, r / orders as f64);
    let b2 = CHRF_BETA * CHRF_BETA;
    let denom = b2 * p + r;
    Ok(if denom == 0.0 {
        0.0
    } else {
        100.0 * (1.0 + b2) * p * r / denom
    })
}
