use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::exec::Exec;

/// Dense row-major matrix of `f64`.
///
/// Complex matrices use the column layout `[Re | Im]`: an `r x c` complex
/// matrix is stored as an `r x 2c` real one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

// below this many multiply-adds the thread pool costs more than it saves
const PAR_WORK: usize = 1 << 15;

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec length");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn scalar(x: f64) -> Self {
        Self::from_vec(1, 1, vec![x])
    }

    pub fn row_vector(v: &[f64]) -> Self {
        Self::from_vec(1, v.len(), v.to_vec())
    }

    pub fn col_vector(v: &[f64]) -> Self {
        Self::from_vec(v.len(), 1, v.to_vec())
    }

    /// Gaussian entries with standard deviation `std`.
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        Self { rows, cols, data }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self.at(j, i))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        debug_assert_eq!(self.shape(), other.shape());
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f64) -> Mat {
        self.map(|x| s * x)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    /// `self * other`, rows of the result computed in parallel for large products.
    pub fn matmul(&self, other: &Mat, exec: Exec) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = Mat::zeros(n, m);
        if m == 0 {
            return out;
        }
        let exec = if n * k * m < PAR_WORK { Exec::Sequential } else { exec };
        exec.for_each_chunk_mut(&mut out.data, m, |i, row| {
            let a = &self.data[i * k..(i + 1) * k];
            for (p, &aip) in a.iter().enumerate() {
                if aip == 0.0 {
                    continue;
                }
                let b = &other.data[p * m..(p + 1) * m];
                for (o, &bpj) in row.iter_mut().zip(b) {
                    *o += aip * bpj;
                }
            }
        });
        out
    }

    /// `self^T * other` without materializing the transpose of `self`.
    pub fn matmul_tn(&self, other: &Mat, exec: Exec) -> Mat {
        assert_eq!(self.rows, other.rows, "matmul_tn inner dimension");
        let (k, n, m) = (self.rows, self.cols, other.cols);
        let mut out = Mat::zeros(n, m);
        if m == 0 {
            return out;
        }
        let exec = if n * k * m < PAR_WORK { Exec::Sequential } else { exec };
        exec.for_each_chunk_mut(&mut out.data, m, |i, row| {
            for p in 0..k {
                let api = self.data[p * n + i];
                if api == 0.0 {
                    continue;
                }
                let b = &other.data[p * m..(p + 1) * m];
                for (o, &bpj) in row.iter_mut().zip(b) {
                    *o += api * bpj;
                }
            }
        });
        out
    }

    /// `self * other^T`.
    pub fn matmul_nt(&self, other: &Mat, exec: Exec) -> Mat {
        assert_eq!(self.cols, other.cols, "matmul_nt inner dimension");
        let (n, k, m) = (self.rows, self.cols, other.rows);
        let mut out = Mat::zeros(n, m);
        if m == 0 {
            return out;
        }
        let exec = if n * k * m < PAR_WORK { Exec::Sequential } else { exec };
        exec.for_each_chunk_mut(&mut out.data, m, |i, row| {
            let a = &self.data[i * k..(i + 1) * k];
            for (j, o) in row.iter_mut().enumerate() {
                let b = &other.data[j * k..(j + 1) * k];
                *o = a.iter().zip(b).map(|(x, y)| x * y).sum();
            }
        });
        out
    }

    pub fn select_cols(&self, idx: &[usize]) -> Mat {
        Mat::from_fn(self.rows, idx.len(), |i, j| self.at(i, idx[j]))
    }

    pub fn select_rows(&self, idx: &[usize]) -> Mat {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Mat::from_vec(idx.len(), self.cols, data)
    }

    pub fn hcat(parts: &[&Mat]) -> Mat {
        let rows = parts.first().map_or(0, |p| p.rows);
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Mat::from_vec(rows, cols, data)
    }

    pub fn vcat(parts: &[&Mat]) -> Mat {
        let cols = parts.first().map_or(0, |p| p.cols);
        let rows = parts.iter().map(|p| p.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Mat::from_vec(rows, cols, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &Mat, b: &Mat) -> Mat {
        Mat::from_fn(a.rows, b.cols, |i, j| (0..a.cols).map(|p| a.at(i, p) * b.at(p, j)).sum())
    }

    #[test]
    fn products_match_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Mat::randn(70, 40, 1.0, &mut rng);
        let b = Mat::randn(40, 30, 1.0, &mut rng);
        let c = Mat::randn(70, 30, 1.0, &mut rng);
        let want = naive(&a, &b);
        for exec in [Exec::Sequential, Exec::Parallel] {
            let got = a.matmul(&b, exec);
            assert!(got.zip_map(&want, |x, y| x - y).max_abs() < 1e-12);
            let tn = a.matmul_tn(&c, exec);
            assert!(tn.zip_map(&naive(&a.transpose(), &c), |x, y| x - y).max_abs() < 1e-12);
            let nt = c.matmul_nt(&b, exec);
            assert!(nt.zip_map(&naive(&c, &b.transpose()), |x, y| x - y).max_abs() < 1e-12);
        }
        assert_eq!(a.matmul(&b, Exec::Sequential), a.matmul(&b, Exec::Parallel));
    }

    #[test]
    fn concatenation() {
        let a = Mat::from_vec(2, 1, vec![1.0, 2.0]);
        let b = Mat::from_vec(2, 2, vec![3.0, 4.0, 5.0, 6.0]);
        assert_eq!(Mat::hcat(&[&a, &b]).data, vec![1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        assert_eq!(Mat::vcat(&[&b, &b]).rows, 4);
        assert_eq!(b.select_cols(&[1]).data, vec![4.0, 6.0]);
    }
}
