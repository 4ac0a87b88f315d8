//! Dense row-major kernels shared by the forward and backward passes.
//!
//! Every output element is produced by exactly one task and reduced in a fixed
//! order, so results are bit-identical regardless of the rayon pool size.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use rayon::prelude::*;

/// Floating-point scalar the model can run in.
pub trait Real:
    Float + FromPrimitive + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + DivAssign + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }
}

impl Real for f32 {}
impl Real for f64 {}

// Below this many multiply-adds a kernel stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let x = &a[c * 8..c * 8 + 8];
        let y = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Real>(y: &mut [T], alpha: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[j] = dot(q, rows[j])` over consecutive rows of `q.len()`, each
/// bit-identical to [`dot`].
pub fn dot_rows<T: Real>(q: &[T], rows: &[T], out: &mut [T]) {
    let k = q.len();
    debug_assert_eq!(rows.len(), out.len() * k);
    let chunks = k / 8;
    let mut groups = out.chunks_exact_mut(4);
    let mut block = rows.chunks_exact(4 * k);
    for (o, r) in (&mut groups).zip(&mut block) {
        let mut acc = [[T::zero(); 8]; 4];
        for c in 0..chunks {
            let x = &q[c * 8..c * 8 + 8];
            for (g, a) in acc.iter_mut().enumerate() {
                let y = &r[g * k + c * 8..g * k + c * 8 + 8];
                for l in 0..8 {
                    a[l] += x[l] * y[l];
                }
            }
        }
        for (g, (a, og)) in acc.iter().zip(o.iter_mut()).enumerate() {
            let mut tail = T::zero();
            for i in chunks * 8..k {
                tail += q[i] * r[g * k + i];
            }
            *og = ((a[0] + a[4]) + (a[1] + a[5])) + ((a[2] + a[6]) + (a[3] + a[7])) + tail;
        }
    }
    for (o, r) in groups
        .into_remainder()
        .iter_mut()
        .zip(block.remainder().chunks_exact(k))
    {
        *o = dot(q, r);
    }
}

/// `out += Σ_j weights[j] · rows[j]`, bit-identical to one [`axpy`] per row
/// in order.
pub fn weighted_rows_acc<T: Real>(weights: &[T], rows: &[T], out: &mut [T]) {
    let k = out.len();
    debug_assert_eq!(rows.len(), weights.len() * k);
    let full = k / 8 * 8;
    for c in (0..full).step_by(8) {
        let mut acc = [T::zero(); 8];
        acc.copy_from_slice(&out[c..c + 8]);
        for (&w, r) in weights.iter().zip(rows.chunks_exact(k)) {
            let y = &r[c..c + 8];
            for l in 0..8 {
                acc[l] += w * y[l];
            }
        }
        out[c..c + 8].copy_from_slice(&acc);
    }
    for i in full..k {
        let mut acc = out[i];
        for (&w, r) in weights.iter().zip(rows.chunks_exact(k)) {
            acc += w * r[i];
        }
        out[i] = acc;
    }
}

/// `x · W` for a single row vector `x[k]` and `W[k × n]`.
pub fn vec_mat<T: Real>(x: &[T], w: &[T], n: usize, out: &mut [T]) {
    debug_assert_eq!(w.len(), x.len() * n);
    out.iter_mut().for_each(|o| *o = T::zero());
    for (p, &xp) in x.iter().enumerate() {
        if xp != T::zero() {
            axpy(out, xp, &w[p * n..(p + 1) * n]);
        }
    }
}

/// `X[b × k] · W[k × n]`, each row bit-identical to [`vec_mat`].
pub fn rows_mat<T: Real>(x: &[T], w: &[T], k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(w.len(), k * n);
    debug_assert_eq!(x.len() / k * n, out.len());
    const BLOCK: usize = 8;
    out.iter_mut().for_each(|o| *o = T::zero());
    for (xb, ob) in x.chunks(k * BLOCK).zip(out.chunks_mut(n * BLOCK)) {
        for (p, wr) in w.chunks_exact(n).enumerate() {
            for (xr, or) in xb.chunks_exact(k).zip(ob.chunks_exact_mut(n)) {
                if xr[p] != T::zero() {
                    axpy(or, xr[p], wr);
                }
            }
        }
    }
}

/// `A[m × k] · B[k × n]`
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::zero(); m * n];
    if n == 0 {
        return out;
    }
    let row = |(i, o): (usize, &mut [T])| vec_mat(&a[i * k..(i + 1) * k], b, n, o);
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// `A[m × k] · B[n × k]ᵀ`
pub fn matmul_bt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![T::zero(); m * n];
    if n == 0 {
        return out;
    }
    let row = |(i, o): (usize, &mut [T])| {
        let x = &a[i * k..(i + 1) * k];
        for (j, oj) in o.iter_mut().enumerate() {
            *oj = dot(x, &b[j * k..(j + 1) * k]);
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// `out[k × n] += A[m × k]ᵀ · G[m × n]`
pub fn matmul_at_acc<T: Real>(a: &[T], g: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    if n == 0 {
        return;
    }
    let row = |(p, o): (usize, &mut [T])| {
        for i in 0..m {
            let s = a[i * k + p];
            if s != T::zero() {
                axpy(o, s, &g[i * n..(i + 1) * n]);
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

#[inline]
pub fn sigmoid<T: Real>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

/// `z · sigmoid(z)`
#[inline]
pub fn swish<T: Real>(z: T) -> T {
    z * sigmoid(z)
}

/// Derivative of [`swish`].
#[inline]
pub fn swish_grad<T: Real>(z: T) -> T {
    let s = sigmoid(z);
    s * (T::one() + z * (T::one() - s))
}

pub const RMS_EPS: f64 = 1e-5;

/// Writes `gain ⊙ x / rms(x)` into `out`; returns the reciprocal rms.
pub fn rms_norm<T: Real>(x: &[T], gain: &[T], out: &mut [T]) -> T {
    let d = T::of(x.len() as f64);
    let ms = x.iter().map(|&v| v * v).sum::<T>() / d;
    let r = T::one() / (ms + T::of(RMS_EPS)).sqrt();
    for ((o, &xi), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = g * xi * r;
    }
    r
}

/// Backward of [`rms_norm`]: accumulates into `dx` and `dgain`.
pub fn rms_norm_backward<T: Real>(dy: &[T], x: &[T], gain: &[T], r: T, dx: &mut [T], dgain: &mut [T]) {
    let d = T::of(x.len() as f64);
    let mut proj = T::zero();
    for i in 0..x.len() {
        dgain[i] += dy[i] * x[i] * r;
        proj += dy[i] * gain[i] * x[i];
    }
    let c = r * r * r * proj / d;
    for i in 0..x.len() {
        dx[i] += r * dy[i] * gain[i] - c * x[i];
    }
}

/// Entries this far below the row maximum get probability exactly 0.
pub const SOFTMAX_FLOOR: f64 = 64.0;

/// In-place softmax over a slice; `-inf` entries and entries more than
/// [`SOFTMAX_FLOOR`] below the maximum get probability 0.
pub fn softmax_in_place<T: Real>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let floor = -T::of(SOFTMAX_FLOOR);
    let mut sum = T::zero();
    for x in v.iter_mut() {
        let z = *x - max;
        *x = if z < floor { T::zero() } else { z.exp() };
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}
