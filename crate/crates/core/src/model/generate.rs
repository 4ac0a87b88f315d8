//! Incremental decoding with a key/value cache, and greedy generation.

use super::alibi::AlibiSlopes;
use super::{ModelError, Parameters};
use crate::kernels::{dot, dot_rows, rms_norm, rows_mat, softmax_in_place, swish, weighted_rows_acc, Real};
use crate::tokenizer::{TokenId, EOS};

/// Decoding state for one sequence. The caches hold one buffer per (layer,
/// head) with row `i` for position `i`; logits match [`super::forward`]
/// bit-for-bit.
pub struct Session<'a, T> {
    params: &'a Parameters<T>,
    slopes: AlibiSlopes,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
}

impl<'a, T: Real> Session<'a, T> {
    pub fn new(params: &'a Parameters<T>) -> Self {
        let cfg = &params.config;
        Self {
            params,
            slopes: AlibiSlopes::new(cfg.n_heads),
            keys: vec![Vec::new(); cfg.n_layers * cfg.n_heads],
            values: vec![Vec::new(); cfg.n_layers * cfg.n_heads],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_full(&self) -> bool {
        self.len >= self.params.config.max_seq_len
    }

    /// Appends `token` and returns the next-token logits.
    pub fn push(&mut self, token: TokenId) -> Result<Vec<T>, ModelError> {
        Ok(push_many(&mut [self], &[token])?.pop().expect("one row"))
    }

    /// Pushes every token, returning the logits after the last one.
    pub fn extend(&mut self, tokens: &[TokenId]) -> Result<Vec<T>, ModelError> {
        let mut last = Vec::new();
        for &t in tokens {
            last = self.push(t)?;
        }
        Ok(last)
    }
}

/// Appends `tokens[i]` to `sessions[i]` for every `i` in one pass over the
/// weights and returns each session's next-token logits. Every row equals what
/// [`Session::push`] alone would give, bit for bit.
pub fn push_many<T: Real>(sessions: &mut [&mut Session<'_, T>], tokens: &[TokenId]) -> Result<Vec<Vec<T>>, ModelError> {
    if sessions.is_empty() {
        assert!(tokens.is_empty(), "one token per session");
        return Ok(Vec::new());
    }
    let p = sessions[0].params;
    let hidden = push_many_hidden(sessions, tokens)?;
    Ok(hidden
        .chunks_exact(p.config.d_model)
        .map(|h| {
            (0..p.config.vocab_size as TokenId)
                .map(|v| token_logit(p, h, v))
                .collect()
        })
        .collect())
}

/// Logit of `token` given one row of [`push_many_hidden`] output; equal to the
/// matching entry of the full logit vector.
pub fn token_logit<T: Real>(params: &Parameters<T>, hidden: &[T], token: TokenId) -> T {
    let d = params.config.d_model;
    let e = token as usize * d;
    dot(hidden, &params.embedding[e..e + d])
}

/// Like [`push_many`] but stops at the final normalized hidden states
/// (`sessions.len() × d_model`), leaving the vocabulary projection to the
/// caller.
pub fn push_many_hidden<T: Real>(
    sessions: &mut [&mut Session<'_, T>],
    tokens: &[TokenId],
) -> Result<Vec<T>, ModelError> {
    let want = vec![true; sessions.len()];
    push_many_selected(sessions, tokens, &want)
}

/// [`push_many_hidden`] that returns hidden rows only for sessions with
/// `want[i]` set, in order. The others still advance and fill their caches,
/// but skip the work that only feeds their output.
pub fn push_many_selected<T: Real>(
    sessions: &mut [&mut Session<'_, T>],
    tokens: &[TokenId],
    want: &[bool],
) -> Result<Vec<T>, ModelError> {
    assert_eq!(sessions.len(), tokens.len(), "one token per session");
    assert_eq!(sessions.len(), want.len(), "one flag per session");
    let b = sessions.len();
    if b == 0 {
        return Ok(Vec::new());
    }
    let p = sessions[0].params;
    assert!(
        sessions.iter().all(|s| std::ptr::eq(s.params, p)),
        "sessions must share parameters"
    );
    let cfg = &p.config;
    for (s, &token) in sessions.iter().zip(tokens) {
        if token as usize >= cfg.vocab_size {
            return Err(ModelError::TokenOutOfRange {
                id: token,
                vocab_size: cfg.vocab_size,
            });
        }
        if s.is_full() {
            return Err(ModelError::SequenceTooLong {
                len: s.len + 1,
                max: cfg.max_seq_len,
            });
        }
    }
    let (d, f, nh) = (cfg.d_model, cfg.d_ff, cfg.n_heads);
    let hd = d / nh;
    let scale = T::one() / T::of(hd as f64).sqrt();
    let mut x = Vec::with_capacity(b * d);
    for &token in tokens {
        let e = token as usize * d;
        x.extend_from_slice(&p.embedding[e..e + d]);
    }
    let mut normed = vec![T::zero(); b * d];
    let mut kv = vec![T::zero(); b * d];
    let mut scores = Vec::new();
    let norm_rows = |x: &[T], gain: &[T], out: &mut [T]| {
        for (xr, or) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            rms_norm(xr, gain, or);
        }
    };
    let mut active: Vec<usize> = (0..b).collect();
    for (l, lp) in p.layers.iter().enumerate() {
        norm_rows(&x, &lp.attn_norm, &mut normed);
        rows_mat(&normed, &lp.wk, d, d, &mut kv);
        for (&i, row) in active.iter().zip(kv.chunks_exact(d)) {
            for (h, part) in row.chunks_exact(hd).enumerate() {
                sessions[i].keys[l * nh + h].extend_from_slice(part);
            }
        }
        rows_mat(&normed, &lp.wv, d, d, &mut kv);
        for (&i, row) in active.iter().zip(kv.chunks_exact(d)) {
            for (h, part) in row.chunks_exact(hd).enumerate() {
                sessions[i].values[l * nh + h].extend_from_slice(part);
            }
        }
        if l + 1 == p.layers.len() && active.iter().any(|&i| !want[i]) {
            let keep: Vec<usize> = (0..active.len()).filter(|&r| want[active[r]]).collect();
            let gather = |v: &[T]| -> Vec<T> {
                keep.iter()
                    .flat_map(|&r| v[r * d..(r + 1) * d].iter().copied())
                    .collect()
            };
            x = gather(&x);
            normed = gather(&normed);
            active = keep.iter().map(|&r| active[r]).collect();
            if active.is_empty() {
                break;
            }
        }
        let n = active.len();
        let mut q = vec![T::zero(); n * d];
        let mut att = vec![T::zero(); n * d];
        let mut proj = vec![T::zero(); n * d];
        rows_mat(&normed[..n * d], &lp.wq, d, d, &mut q);
        for ((&i, qr), ar) in active.iter().zip(q.chunks_exact(d)).zip(att.chunks_exact_mut(d)) {
            let s = &sessions[i];
            let pos = s.len;
            scores.resize(pos + 1, T::zero());
            for h in 0..nh {
                let off = h * hd;
                let qh = &qr[off..off + hd];
                let slope = T::of(s.slopes.get(h));
                let (keys, values) = (&s.keys[l * nh + h], &s.values[l * nh + h]);
                dot_rows(qh, keys, &mut scores);
                for (j, sc) in scores.iter_mut().enumerate() {
                    *sc = *sc * scale - slope * T::of((pos - j) as f64);
                }
                softmax_in_place(&mut scores);
                weighted_rows_acc(&scores, values, &mut ar[off..off + hd]);
            }
        }
        rows_mat(&att, &lp.wo, d, d, &mut proj);
        x.iter_mut().zip(&proj).for_each(|(a, &b)| *a += b);
        let normed = &mut normed[..n * d];
        norm_rows(&x, &lp.ffn_norm, normed);
        let mut gate = vec![T::zero(); n * f];
        let mut up = vec![T::zero(); n * f];
        rows_mat(normed, &lp.w_gate, d, f, &mut gate);
        rows_mat(normed, &lp.w_up, d, f, &mut up);
        gate.iter_mut().zip(&up).for_each(|(g, &u)| *g = swish(*g) * u);
        rows_mat(&gate, &lp.w_down, f, d, &mut proj);
        x.iter_mut().zip(&proj).for_each(|(a, &b)| *a += b);
    }
    let mut out = vec![T::zero(); x.len()];
    norm_rows(&x, &p.final_norm, &mut out);
    for s in sessions.iter_mut() {
        s.len += 1;
    }
    Ok(out)
}

/// Highest-scoring candidate; ties go to the lowest id.
pub fn argmax_among<T: Real>(logits: &[T], candidates: impl IntoIterator<Item = TokenId>) -> Option<TokenId> {
    let mut best: Option<(TokenId, T)> = None;
    for id in candidates {
        let v = logits[id as usize];
        best = match best {
            None => Some((id, v)),
            Some((bid, bv)) if v > bv || (v == bv && id < bid) => Some((id, v)),
            keep => keep,
        };
    }
    best.map(|(id, _)| id)
}

/// Step-wise allowed-token hook: receives the tokens generated so far and
/// returns the ids permitted next.
pub type MaskFn<'m> = &'m mut dyn FnMut(&[TokenId]) -> Vec<TokenId>;

/// Greedy decoding from `prompt`. Returns the generated ids, including the
/// terminating EOS when one is produced. Stops early if the context fills up.
pub fn generate<T: Real>(
    params: &Parameters<T>,
    prompt: &[TokenId],
    max_new: usize,
    mut mask: Option<MaskFn<'_>>,
) -> Result<Vec<TokenId>, ModelError> {
    if prompt.is_empty() {
        return Err(ModelError::EmptyPrompt);
    }
    let vocab = params.config.vocab_size as TokenId;
    let mut session = Session::new(params);
    let mut logits = session.extend(prompt)?;
    let mut out = Vec::new();
    while out.len() < max_new {
        let next = match mask.as_mut() {
            Some(f) => {
                let allowed = f(&out);
                if allowed.is_empty() {
                    return Err(ModelError::EmptyMask { step: out.len() });
                }
                if let Some(&id) = allowed.iter().find(|&&id| id >= vocab) {
                    return Err(ModelError::TokenOutOfRange {
                        id,
                        vocab_size: vocab as usize,
                    });
                }
                argmax_among(&logits, allowed)
            }
            None => argmax_among(&logits, 0..vocab),
        }
        .expect("non-empty candidate set");
        out.push(next);
        if next == EOS || session.is_full() {
            break;
        }
        logits = session.push(next)?;
    }
    Ok(out)
}
