use crate::kernels::Real;
use crate::tokenizer::TokenId;

use super::TrainError;

/// Mean over masked positions of `-log softmax(logits)[target]`, together
/// with its gradient with respect to the logits.
pub fn cross_entropy_with_grad<T: Real>(
    logits: &[T],
    targets: &[TokenId],
    mask: &[bool],
) -> Result<(T, Vec<T>), TrainError> {
    assert_eq!(targets.len(), mask.len(), "targets/mask length");
    let rows = targets.len();
    assert!(rows > 0 && logits.len().is_multiple_of(rows), "logits shape");
    let vocab = logits.len() / rows;
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(TrainError::AllMasked);
    }
    let inv = T::one() / T::of(count as f64);
    let mut total = T::zero();
    let mut grad = vec![T::zero(); logits.len()];
    for (r, (&target, &on)) in targets.iter().zip(mask).enumerate() {
        if !on {
            continue;
        }
        let row = &logits[r * vocab..(r + 1) * vocab];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[target as usize];
        let g = &mut grad[r * vocab..(r + 1) * vocab];
        for (gi, &x) in g.iter_mut().zip(row) {
            *gi = (x - lse).exp() * inv;
        }
        g[target as usize] -= inv;
    }
    Ok((total * inv, grad))
}

pub fn cross_entropy_loss<T: Real>(logits: &[T], targets: &[TokenId], mask: &[bool]) -> Result<T, TrainError> {
    cross_entropy_with_grad(logits, targets, mask).map(|(l, _)| l)
}
