//! Dense row-major matrices and the small set of numeric kernels the rest of
//! the crate builds on.
//!
//! Every kernel here has a fixed accumulation order that does not depend on
//! the rayon thread count: parallelism is only ever over output rows, and the
//! reduction inside each output element is a fixed interleave of the k loop.
//! Repeated calls with identical inputs are bit-identical.

use num_traits::Float;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Norm below which a vector is treated as zero by [`l2_normalize`].
/// An all-dark patch carries no shape information and must not blow up.
pub const NORM_FLOOR: f64 = 1e-8;

/// Probability floor used by [`cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-12;

/// Floating-point element type. Training and inference run on `f32`;
/// the `f64` instantiation exists for finite-difference gradient checks.
pub trait Scalar:
    Float + Send + Sync + std::fmt::Debug + std::fmt::Display + std::iter::Sum + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::config(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix by evaluating `f(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline(always)]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline(always)]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline(always)]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline(always)]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    /// Largest absolute entry. Deterministic (max is order-independent on
    /// finite floats).
    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Converts element type; used to lift f32 models into f64 for
    /// gradient-check mode.
    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }
}

const LANES: usize = 8;

/// Dot product with a fixed 8-lane interleaved accumulation order.
/// The order is independent of the caller's thread count, so results are
/// reproducible; lanes keep the loop out of the FP-add latency chain.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let ac = a.chunks_exact(LANES);
    let bc = b.chunks_exact(LANES);
    let ra = ac.remainder();
    let rb = bc.remainder();
    for (xa, xb) in ac.zip(bc) {
        for l in 0..LANES {
            acc[l] = acc[l] + xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb.iter()) {
        tail = tail + *x * *y;
    }
    let mut s = T::zero();
    for v in acc {
        s = s + v;
    }
    s + tail
}

/// Dot product accumulated in f64 regardless of `T`, rounded once at the end.
/// Used where cancellation of rounding error matters (patch normalization and
/// the cosine features behind the scale-invariance guarantee).
#[inline]
pub fn dot_stable<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; LANES];
    let ac = a.chunks_exact(LANES);
    let bc = b.chunks_exact(LANES);
    let ra = ac.remainder();
    let rb = bc.remainder();
    for (xa, xb) in ac.zip(bc) {
        for l in 0..LANES {
            acc[l] += xa[l].to_f64() * xb[l].to_f64();
        }
    }
    let mut tail = 0.0f64;
    for (&x, &y) in ra.iter().zip(rb.iter()) {
        tail += x.to_f64() * y.to_f64();
    }
    acc.iter().sum::<f64>() + tail
}

/// `out[j] += s * x[j]`. Elementwise, so vectorizable and order-free.
#[inline]
pub fn axpy<T: Scalar>(out: &mut [T], s: T, x: &[T]) {
    debug_assert_eq!(out.len(), x.len());
    for (o, v) in out.iter_mut().zip(x.iter()) {
        *o = *o + s * *v;
    }
}

/// Work threshold below which gemm stays on the calling thread.
const PAR_FLOP_THRESHOLD: usize = 1 << 16;

/// General matrix product `op(a) * op(b)` where `op` is optional transposition.
///
/// Accumulation over the inner dimension runs in a fixed order per output
/// element; parallelism is over output rows only, so the result is
/// bit-identical for any thread count.
pub fn gemm<T: Scalar>(a: &Matrix<T>, ta: bool, b: &Matrix<T>, tb: bool) -> Result<Matrix<T>> {
    let (m, ka) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    if ka != kb {
        return Err(Error::config(format!(
            "gemm dimension mismatch: ({}x{}, ta={}) * ({}x{}, tb={})",
            a.rows, a.cols, ta, b.rows, b.cols, tb
        )));
    }
    let k = ka;
    let mut out = Matrix::zeros(m, n);
    let work = m * n * k;

    let row_job = |i: usize, out_row: &mut [T]| match (ta, tb) {
        (false, false) => {
            for kk in 0..k {
                axpy(out_row, a.get(i, kk), b.row(kk));
            }
        }
        (false, true) => {
            for (j, o) in out_row.iter_mut().enumerate() {
                *o = dot(a.row(i), b.row(j));
            }
        }
        (true, false) => {
            for kk in 0..k {
                axpy(out_row, a.get(kk, i), b.row(kk));
            }
        }
        (true, true) => {
            for (j, o) in out_row.iter_mut().enumerate() {
                let mut acc = T::zero();
                for kk in 0..k {
                    acc = acc + a.get(kk, i) * b.get(j, kk);
                }
                *o = acc;
            }
        }
    };

    if work < PAR_FLOP_THRESHOLD {
        for (i, out_row) in out.data.chunks_exact_mut(n.max(1)).enumerate() {
            row_job(i, out_row);
        }
    } else {
        out.data
            .par_chunks_exact_mut(n.max(1))
            .enumerate()
            .for_each(|(i, out_row)| row_job(i, out_row));
    }
    Ok(out)
}

/// Rectified power activation: `ReLU(x)^n`.
///
/// Total on all of R; maps `[0,1]` into `[0,1]` for any `n >= 1`.
#[inline(always)]
pub fn rectified_power<T: Scalar>(x: T, n: u32) -> T {
    debug_assert!(n >= 1);
    if x <= T::zero() {
        T::zero()
    } else {
        x.powi(n as i32)
    }
}

/// Normalizes `v` to unit L2 norm in place. Vectors with norm below
/// [`NORM_FLOOR`] become exactly zero.
///
/// The norm is accumulated in f64 so that normalizing `c*v` and `v` agree to
/// within one rounding of each component, which the NNL scale-invariance
/// guarantee leans on.
pub fn l2_normalize<T: Scalar>(v: &mut [T]) {
    let norm = dot_stable(v, v).sqrt();
    if norm < NORM_FLOOR {
        for x in v.iter_mut() {
            *x = T::zero();
        }
    } else {
        for x in v.iter_mut() {
            *x = T::from_f64(x.to_f64() / norm);
        }
    }
}

/// Numerically stable softmax (max subtraction before exponentiation).
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    if logits.is_empty() {
        return Vec::new();
    }
    let max = logits.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut out: Vec<T> = logits.iter().map(|&x| (x - max).exp()).collect();
    let mut sum = T::zero();
    for &e in out.iter() {
        sum = sum + e;
    }
    for e in out.iter_mut() {
        *e = *e / sum;
    }
    out
}

/// Cross-entropy `-ln(probs[label])` with the probability floored at
/// [`PROB_FLOOR`]. `probs` is expected to come from [`softmax`].
pub fn cross_entropy<T: Scalar>(probs: &[T], label: usize) -> Result<T> {
    if label >= probs.len() {
        return Err(Error::config(format!(
            "label {} out of range for {} classes",
            label,
            probs.len()
        )));
    }
    let p = probs[label].to_f64().max(PROB_FLOOR);
    Ok(T::from_f64(-p.ln()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mat(rows: usize, cols: usize, v: &[f32]) -> Matrix<f32> {
        Matrix::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    /// Plain three-loop product, the independent oracle for gemm.
    fn gemm_oracle(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    fn seeded_matrix(rows: usize, cols: usize, seed: u64) -> Matrix<f32> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0f32..1.0))
    }

    #[test]
    fn gemm_identity() {
        let a = mat(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b = mat(2, 1, &[3.0, 4.0]);
        let c = gemm(&a, false, &b, false).unwrap();
        assert_eq!(c.data(), &[3.0, 4.0]);
    }

    #[test]
    fn gemm_hand_product() {
        let a = mat(1, 2, &[1.0, 2.0]);
        let b = mat(2, 1, &[3.0, 4.0]);
        let c = gemm(&a, false, &b, false).unwrap();
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn gemm_matches_triple_loop_oracle() {
        let a = seeded_matrix(7, 5, 11);
        let b = seeded_matrix(5, 3, 12);
        let c = gemm(&a, false, &b, false).unwrap();
        let expect = gemm_oracle(&a.cast::<f64>(), &b.cast::<f64>());
        for i in 0..7 {
            for j in 0..3 {
                let e = expect.get(i, j);
                let g = c.get(i, j) as f64;
                assert!(
                    (g - e).abs() <= 1e-6 * e.abs().max(1.0),
                    "mismatch at ({i},{j}): {g} vs {e}"
                );
            }
        }
    }

    #[test]
    fn gemm_transpose_flags_agree_with_explicit_transpose() {
        let a = seeded_matrix(6, 4, 21);
        let b = seeded_matrix(6, 5, 22);
        // a^T * b

        let at = Matrix::from_fn(4, 6, |r, c| a.get(c, r));
        let want = gemm(&at, false, &b, false).unwrap();
        let got = gemm(&a, true, &b, false).unwrap();
        for (x, y) in got.data().iter().zip(want.data()) {
            assert!((x - y).abs() <= 1e-6);
        }

        // a * b^T with compatible shapes
        let c = seeded_matrix(5, 4, 23);
        let ct = Matrix::from_fn(4, 5, |r, c2| c.get(c2, r));
        let want = gemm(&a, false, &ct, false).unwrap();
        let got = gemm(&a, false, &c, true).unwrap();
        for (x, y) in got.data().iter().zip(want.data()) {
            assert!((x - y).abs() <= 1e-6);
        }

        // a^T * d^T: (4x6) * (6x5)
        let d = seeded_matrix(5, 6, 24);
        let dt = Matrix::from_fn(6, 5, |r, c2| d.get(c2, r));
        let want = gemm(&at, false, &dt, false).unwrap();
        let got = gemm(&a, true, &d, true).unwrap();
        for (x, y) in got.data().iter().zip(want.data()) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn gemm_dimension_mismatch_is_config_error() {
        let a = mat(2, 3, &[0.0; 6]);
        let b = mat(2, 2, &[0.0; 4]);
        assert!(matches!(
            gemm(&a, false, &b, false),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn gemm_bitwise_identical_across_thread_counts() {
        let a = seeded_matrix(48, 40, 31);
        let b = seeded_matrix(40, 37, 32);
        let pool1 = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let pool8 = rayon::ThreadPoolBuilder::new()
            .num_threads(8)
            .build()
            .unwrap();
        let r1 = pool1.install(|| gemm(&a, false, &b, false).unwrap());
        let r8 = pool8.install(|| gemm(&a, false, &b, false).unwrap());
        assert!(r1
            .data()
            .iter()
            .zip(r8.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn rectified_power_cases() {
        assert_eq!(rectified_power(-0.3f32, 40), 0.0);
        assert_eq!(rectified_power(1.0f32, 40), 1.0);
        assert!((rectified_power(0.9f32, 2) - 0.81).abs() < 1e-7);
    }

    #[test]
    fn l2_normalize_cases() {
        let mut v = [3.0f32, 4.0];
        l2_normalize(&mut v);
        assert!((v[0] - 0.6).abs() < 1e-7 && (v[1] - 0.8).abs() < 1e-7);

        let mut z = [0.0f32, 0.0, 0.0];
        l2_normalize(&mut z);
        assert_eq!(z, [0.0, 0.0, 0.0]);

        // scale invariance for any c above the norm floor
        for c in [1e-6f32, 0.3, 7.0] {
            let mut w = [3.0f32 * c, 4.0 * c];
            l2_normalize(&mut w);
            assert!((w[0] - 0.6).abs() < 1e-6 && (w[1] - 0.8).abs() < 1e-6, "c={c}");
        }
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let p = softmax(&[0.0f32, 0.0, 0.0, 0.0]);
        for &x in &p {
            assert!((x - 0.25).abs() < 1e-7);
        }
        let p = softmax(&[1000.0f32, 0.0]);
        assert!(p[0] > 0.999 && p[1] < 1e-6);
        assert!(p.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn cross_entropy_cases() {
        let mut onehot = vec![0.0f32; 10];
        onehot[3] = 1.0;
        assert_eq!(cross_entropy(&onehot, 3).unwrap(), 0.0);

        let uniform = vec![0.1f32; 10];
        let loss = cross_entropy(&uniform, 7).unwrap();
        assert!((loss - 10f32.ln()).abs() < 1e-6);

        assert!(matches!(
            cross_entropy(&uniform, 10),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        // d/dz_i of -ln softmax(z)[label] should be probs - onehot, f64 mode.
        let logits = vec![0.3f64, -1.2, 0.8, 0.1];
        let label = 2usize;
        let probs = softmax(&logits);
        let h = 1e-6;
        for i in 0..logits.len() {
            let mut zp = logits.clone();
            let mut zm = logits.clone();
            zp[i] += h;
            zm[i] -= h;
            let lp = cross_entropy(&softmax(&zp), label).unwrap();
            let lm = cross_entropy(&softmax(&zm), label).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let analytic = probs[i] - if i == label { 1.0 } else { 0.0 };
            assert!(
                (fd - analytic).abs() <= 1e-8 + 1e-6 * analytic.abs(),
                "i={i}: fd={fd} analytic={analytic}"
            );
        }
    }

    proptest! {
        #[test]
        fn gemm_random_vs_oracle(rs in 1usize..24, ks in 1usize..24, cs in 1usize..24, seed in 0u64..1000) {
            let a = seeded_matrix(rs, ks, seed);
            let b = seeded_matrix(ks, cs, seed.wrapping_add(7));
            let c = gemm(&a, false, &b, false).unwrap();
            let e = gemm_oracle(&a.cast::<f64>(), &b.cast::<f64>());
            for i in 0..rs {
                for j in 0..cs {
                    let got = c.get(i, j) as f64;
                    let want = e.get(i, j);
                    prop_assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0));
                }
            }
        }

        #[test]
        fn rectified_power_monotone_and_bounded(a in -2.0f32..2.0, b in -2.0f32..2.0, n in 1u32..60) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(rectified_power(lo, n) <= rectified_power(hi, n));
            let x: f32 = (a.abs() / 2.0).min(1.0);
            let y = rectified_power(x, n);
            prop_assert!((0.0..=1.0).contains(&y));
        }

        #[test]
        fn l2_normalize_unit_or_zero(v in proptest::collection::vec(-10.0f32..10.0, 1..64)) {
            let mut w = v.clone();
            l2_normalize(&mut w);
            let n = dot_stable(&w, &w).sqrt();
            prop_assert!(n == 0.0 || (n - 1.0).abs() <= 1e-6);
        }

        #[test]
        fn softmax_sums_to_one_and_shift_invariant(
            v in proptest::collection::vec(-30.0f32..30.0, 1..32),
            c in -10.0f32..10.0,
        ) {
            let p = softmax(&v);
            let sum: f32 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);

            let shifted: Vec<f32> = v.iter().map(|x| x + c).collect();
            let q = softmax(&shifted);
            let argmax = |s: &[f32]| {
                s.iter()
                    .enumerate()
                    .fold((0usize, f32::NEG_INFINITY), |(bi, bv), (i, &x)| {
                        if x > bv { (i, x) } else { (bi, bv) }
                    })
                    .0
            };
            prop_assert_eq!(argmax(&p), argmax(&q));
            for (a, b) in p.iter().zip(q.iter()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }
    }
}
