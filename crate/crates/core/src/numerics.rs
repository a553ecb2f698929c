//! Dense f64 vector and matrix primitives shared by every other module.

use crate::error::{Error, Result};

/// Vectors whose L2 norm is at or below this are rejected by [`l2_normalize`].
pub const EPS_NORM: f64 = 1e-12;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. An empty slice yields a 0x0 matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on zero; a 0-column matrix has no meaningful rows anyway
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `selfᵀ · v` for a column vector `v` of length `rows`.
    pub fn t_matvec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            if vr == 0.0 {
                continue;
            }
            axpy(vr, self.row(r), &mut out);
        }
        out
    }

    /// `self · v` for a column vector `v` of length `cols`.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.cols);
        self.iter_rows().map(|r| dot(r, v)).collect()
    }

    /// `self += scale · a ⊗ b` where `a` has `rows` entries and `b` has `cols`.
    pub fn add_outer(&mut self, scale: f64, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, &ar) in a.iter().enumerate() {
            let s = scale * ar;
            if s == 0.0 {
                continue;
            }
            axpy(s, b, self.row_mut(r));
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha · x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > EPS_NORM) {
        return Err(Error::ZeroNorm(n));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

pub fn sq_euclidean(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(sq_dist(a, b))
}

/// Unchecked squared distance; callers guarantee equal lengths.
#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

/// `ln Σ exp(zᵢ)` with max subtraction.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// All squared distances between rows of `a` (n×d) and rows of `b` (m×d).
pub fn pairwise_sq_dist(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::DimMismatch {
            expected: a.cols(),
            got: b.cols(),
        });
    }
    let b_norms: Vec<f64> = b.iter_rows().map(|r| dot(r, r)).collect();
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for (i, ar) in a.iter_rows().enumerate() {
        let an = dot(ar, ar);
        let orow = out.row_mut(i);
        for (j, br) in b.iter_rows().enumerate() {
            // expanded form can go slightly negative through cancellation
            orow[j] = (an + b_norms[j] - 2.0 * dot(ar, br)).max(0.0);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn normalize_examples() {
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!(close(v[0], 0.6, 1e-15) && close(v[1], 0.8, 1e-15));
        assert_eq!(l2_normalize(&[1.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(Error::ZeroNorm(_))));
        assert!(matches!(l2_normalize(&[1e-13, 0.0]), Err(Error::ZeroNorm(_))));
    }

    #[test]
    fn sq_euclidean_examples() {
        assert_eq!(sq_euclidean(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 2.0);
        assert_eq!(sq_euclidean(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        // 0.4² + 0.8²
        assert!(close(sq_euclidean(&[0.6, 0.8], &[1.0, 0.0]).unwrap(), 0.8, 1e-15));
        assert!(matches!(
            sq_euclidean(&[1.0], &[1.0, 2.0]),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let s = softmax(&[2f64.ln(), 0.0]);
        assert!(close(s[0], 2.0 / 3.0, 1e-15) && close(s[1], 1.0 / 3.0, 1e-15));
        let s = softmax(&[1000.0, 0.0]);
        assert!(close(s[0], 1.0, 1e-15) && s[1] >= 0.0 && s[1] < 1e-300);
        assert!(close(s.iter().sum::<f64>(), 1.0, 1e-12));
    }

    #[test]
    fn log_sum_exp_is_stable() {
        assert!(close(log_sum_exp(&[1000.0, 1000.0]), 1000.0 + 2f64.ln(), 1e-12));
        assert!(close(log_sum_exp(&[0.0; 4]), 4f64.ln(), 1e-15));
    }

    #[test]
    fn pairwise_examples() {
        let a = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let d = pairwise_sq_dist(&a, &b).unwrap();
        assert_eq!(d.as_slice(), &[0.0, 2.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|_| l2_normalize(&[rng.random(), rng.random(), rng.random()]).unwrap())
            .collect();
        let m = Matrix::from_rows(&rows).unwrap();
        let d = pairwise_sq_dist(&m, &m).unwrap();
        for i in 0..5 {
            assert!(d[(i, i)].abs() <= 1e-9);
        }

        let c = Matrix::zeros(1, 3);
        assert!(pairwise_sq_dist(&a, &c).is_err());
    }

    #[test]
    fn pairwise_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut rand_mat = |n: usize| {
            let v: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-2.0..2.0)).collect();
            Matrix::from_vec(n, 3, v).unwrap()
        };
        let a = rand_mat(8);
        let b = rand_mat(6);
        let d = pairwise_sq_dist(&a, &b).unwrap();
        for i in 0..8 {
            for j in 0..6 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += (a[(i, k)] - b[(j, k)]).powi(2);
                }
                assert!(close(d[(i, j)], s, 1e-9));
            }
        }
    }

    #[test]
    fn matvec_helpers() {
        let m = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(m.t_matvec(&[1.0, 1.0]), vec![5.0, 7.0, 9.0]);
        assert_eq!(m.matvec(&[1.0, 0.0, 1.0]), vec![4.0, 10.0]);
        let mut z = Matrix::zeros(2, 3);
        z.add_outer(2.0, &[1.0, 0.5], &[1.0, 2.0, 3.0]);
        assert_eq!(z.as_slice(), &[2.0, 4.0, 6.0, 1.0, 2.0, 3.0]);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(z in prop::collection::vec(-500.0f64..500.0, 1..40)) {
            let s = softmax(&z);
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn softmax_shift_invariant(z in prop::collection::vec(-50.0f64..50.0, 1..20), c in -100.0f64..100.0) {
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            for (a, b) in softmax(&z).iter().zip(softmax(&shifted)) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn normalize_idempotent(v in prop::collection::vec(-10.0f64..10.0, 1..16)) {
            prop_assume!(norm(&v) > 1e-6);
            let u = l2_normalize(&v).unwrap();
            prop_assert!((norm(&u) - 1.0).abs() <= 1e-12);
            let uu = l2_normalize(&u).unwrap();
            for (a, b) in u.iter().zip(&uu) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn unit_distance_identity(a in prop::collection::vec(-1.0f64..1.0, 2..12), seed in any::<u64>()) {
            prop_assume!(norm(&a) > 1e-3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b: Vec<f64> = (0..a.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            prop_assume!(norm(&b) > 1e-3);
            let (a, b) = (l2_normalize(&a).unwrap(), l2_normalize(&b).unwrap());
            let d = sq_euclidean(&a, &b).unwrap();
            prop_assert!((d - (2.0 - 2.0 * dot(&a, &b))).abs() <= 1e-9);
            prop_assert!((d - sq_euclidean(&b, &a).unwrap()).abs() == 0.0);
        }
    }
}
