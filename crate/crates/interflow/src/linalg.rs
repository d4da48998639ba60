//! Small dense square matrices and slice vector helpers.
//!
//! Everything here targets spatial dimensions in the single digits; matrices
//! are row-major `Vec<f64>` and hot-path routines write into caller-provided
//! storage so the integrator loop stays allocation-free.

/// Row-major square matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    n: usize,
    a: Vec<f64>,
}

impl Mat {
    pub fn zeros(n: usize) -> Mat {
        Mat { n, a: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> Mat {
        let mut m = Mat::zeros(n);
        for i in 0..n {
            m.a[i * n + i] = 1.0;
        }
        m
    }

    /// Build from nested rows; panics if the rows are not square.
    pub fn from_rows(rows: &[Vec<f64>]) -> Mat {
        let n = rows.len();
        assert!(rows.iter().all(|r| r.len() == n), "rows must form a square matrix");
        let mut a = Vec::with_capacity(n * n);
        for r in rows {
            a.extend_from_slice(r);
        }
        Mat { n, a }
    }

    pub fn from_row_major(n: usize, a: Vec<f64>) -> Mat {
        assert_eq!(a.len(), n * n);
        Mat { n, a }
    }

    pub fn scalar(v: f64) -> Mat {
        Mat { n: 1, a: vec![v] }
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.a[i * self.n + j] = v;
    }

    #[inline]
    pub fn add_at(&mut self, i: usize, j: usize, v: f64) {
        self.a[i * self.n + j] += v;
    }

    pub fn data(&self) -> &[f64] {
        &self.a
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.a[i * self.n..(i + 1) * self.n]
    }

    pub fn fill_zero(&mut self) {
        self.a.fill(0.0);
    }

    pub fn fill_identity(&mut self) {
        self.a.fill(0.0);
        for i in 0..self.n {
            self.a[i * self.n + i] = 1.0;
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.at(i, i)).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.a.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.a.iter().all(|x| x.is_finite())
    }

    /// self += s * other
    pub fn add_assign_scaled(&mut self, other: &Mat, s: f64) {
        debug_assert_eq!(self.n, other.n);
        for (x, y) in self.a.iter_mut().zip(&other.a) {
            *x += s * y;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for x in &mut self.a {
            *x *= s;
        }
    }

    /// out = self * rhs
    pub fn mul_into(&self, rhs: &Mat, out: &mut Mat) {
        let n = self.n;
        debug_assert_eq!(rhs.n, n);
        debug_assert_eq!(out.n, n);
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += self.a[i * n + k] * rhs.a[k * n + j];
                }
                out.a[i * n + j] = s;
            }
        }
    }

    pub fn mul(&self, rhs: &Mat) -> Mat {
        let mut out = Mat::zeros(self.n);
        self.mul_into(rhs, &mut out);
        out
    }

    /// out = self * x
    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        let n = self.n;
        debug_assert_eq!(x.len(), n);
        debug_assert_eq!(out.len(), n);
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                s += self.a[i * n + j] * x[j];
            }
            out[i] = s;
        }
    }

    /// tr(self * rhs)
    pub fn trace_mul(&self, rhs: &Mat) -> f64 {
        let n = self.n;
        debug_assert_eq!(rhs.n, n);
        let mut s = 0.0;
        for i in 0..n {
            for k in 0..n {
                s += self.a[i * n + k] * rhs.a[k * n + i];
            }
        }
        s
    }

    /// Submatrix with row `i` and column `j` removed.
    pub fn minor_matrix(&self, i: usize, j: usize) -> Mat {
        let n = self.n;
        let mut a = Vec::with_capacity((n - 1) * (n - 1));
        for r in 0..n {
            if r == i {
                continue;
            }
            for c in 0..n {
                if c == j {
                    continue;
                }
                a.push(self.at(r, c));
            }
        }
        Mat { n: n - 1, a }
    }

    /// Determinant: closed forms for n <= 3, LU with partial pivoting above.
    pub fn det(&self) -> f64 {
        let n = self.n;
        match n {
            0 => 1.0,
            1 => self.a[0],
            2 => self.a[0] * self.a[3] - self.a[1] * self.a[2],
            3 => {
                let a = &self.a;
                a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6])
                    + a[2] * (a[3] * a[7] - a[4] * a[6])
            }
            _ => {
                let mut lu = self.a.clone();
                let mut sign = 1.0;
                for col in 0..n {
                    let mut pivot = col;
                    let mut best = lu[col * n + col].abs();
                    for r in col + 1..n {
                        let v = lu[r * n + col].abs();
                        if v > best {
                            best = v;
                            pivot = r;
                        }
                    }
                    if best == 0.0 {
                        return 0.0;
                    }
                    if pivot != col {
                        for c in 0..n {
                            lu.swap(col * n + c, pivot * n + c);
                        }
                        sign = -sign;
                    }
                    let d = lu[col * n + col];
                    for r in col + 1..n {
                        let f = lu[r * n + col] / d;
                        lu[r * n + col] = 0.0;
                        for c in col + 1..n {
                            lu[r * n + c] -= f * lu[col * n + c];
                        }
                    }
                }
                let mut det = sign;
                for i in 0..n {
                    det *= lu[i * n + i];
                }
                det
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// y += s * x
#[inline]
pub fn axpy(y: &mut [f64], s: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn det_small_sizes() {
        assert_eq!(Mat::identity(1).det(), 1.0);
        assert_eq!(Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).det(), -2.0);
        let m3 = Mat::from_rows(&[vec![2.0, 0.0, 1.0], vec![0.0, 3.0, 0.0], vec![1.0, 0.0, 2.0]]);
        assert!((m3.det() - 9.0).abs() < 1e-12);
    }

    #[test]
    fn det_lu_matches_cofactor_expansion() {
        // 4x4 with known determinant: block diagonal of two 2x2 blocks.
        let m = Mat::from_rows(&[
            vec![1.0, 2.0, 0.0, 0.0],
            vec![3.0, 4.0, 0.0, 0.0],
            vec![0.0, 0.0, 5.0, 6.0],
            vec![0.0, 0.0, 7.0, 8.0],
        ]);
        assert!((m.det() - (-2.0) * (-2.0)).abs() < 1e-12);
    }

    #[test]
    fn det_needs_pivoting() {
        let m = Mat::from_rows(&[
            vec![0.0, 1.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 2.0],
            vec![0.0, 0.0, 2.0, 0.0],
        ]);
        assert!((m.det() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn mul_and_trace() {
        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Mat::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let ab = a.mul(&b);
        assert_eq!(ab, Mat::from_rows(&[vec![2.0, 1.0], vec![4.0, 3.0]]));
        assert_eq!(a.trace(), 5.0);
        assert!((a.trace_mul(&b) - ab_trace(&a, &b)).abs() < 1e-15);
    }

    fn ab_trace(a: &Mat, b: &Mat) -> f64 {
        a.mul(b).trace()
    }
}
