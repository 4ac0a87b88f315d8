//! Linear attention biases.
//!
//! Head `h` (1-based) penalises a key `d` positions behind the query by
//! `slope_h · d` with `slope_h = 2^(-8h / n_heads)`.

/// Per-head slopes, strictly decreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct AlibiSlopes(Vec<f64>);

impl AlibiSlopes {
    pub fn new(n_heads: usize) -> Self {
        let n = n_heads as f64;
        Self((1..=n_heads).map(|h| (-8.0 * h as f64 / n).exp2()).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, head: usize) -> f64 {
        self.0[head]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Dense bias tensor `[n_heads × seq_len × seq_len]`; future keys hold `-inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlibiBias {
    pub n_heads: usize,
    pub seq_len: usize,
    pub data: Vec<f64>,
}

impl AlibiBias {
    pub fn get(&self, head: usize, query: usize, key: usize) -> f64 {
        self.data[(head * self.seq_len + query) * self.seq_len + key]
    }
}

pub fn alibi_bias(n_heads: usize, seq_len: usize) -> AlibiBias {
    let slopes = AlibiSlopes::new(n_heads);
    let mut data = Vec::with_capacity(n_heads * seq_len * seq_len);
    for h in 0..n_heads {
        for i in 0..seq_len {
            for j in 0..seq_len {
                data.push(if j <= i {
                    -slopes.get(h) * (i - j) as f64
                } else {
                    f64::NEG_INFINITY
                });
            }
        }
    }
    AlibiBias { n_heads, seq_len, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_head_slopes_are_powers_of_two() {
        let s = AlibiSlopes::new(8);
        let expect: Vec<f64> = (1..=8).map(|h| 1.0 / (1u32 << h) as f64).collect();
        assert_eq!(s.as_slice(), expect.as_slice());
        assert_eq!(s.get(7), 0.00390625);
    }

    #[test]
    fn slopes_strictly_decrease() {
        for n in 1..=16 {
            let s = AlibiSlopes::new(n);
            assert!(s.as_slice().windows(2).all(|w| w[0] > w[1]));
            assert!(s.as_slice().iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn bias_entries() {
        let b = alibi_bias(1, 4);
        assert_eq!(b.get(0, 3, 1), -0.0078125);
        for i in 0..4 {
            assert_eq!(b.get(0, i, i), 0.0);
        }
        assert_eq!(b.get(0, 1, 2), f64::NEG_INFINITY);
        let b = alibi_bias(3, 5);
        for h in 0..3 {
            for i in 0..5 {
                assert_eq!(b.get(h, i, i), 0.0);
            }
        }
    }
}
