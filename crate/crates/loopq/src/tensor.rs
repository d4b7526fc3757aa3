//! Dense row-major 2-D tensors with the small amount of linear algebra the
//! rest of the crate needs: matmul, transpose, Gauss-Jordan inverse,
//! Householder-QR orthogonal sampling and a power-iteration condition
//! estimate.
//!
//! All values are `f64`. Any operation that would produce a NaN/Inf reports
//! a numeric error instead of propagating it.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Dense 2-D matrix of `f64`, row-major.
#[derive(Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dim(format!(
                "data length {} does not match shape {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn full(rows: usize, cols: usize, v: f64) -> Self {
        Self { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn scalar(v: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|v| v.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Dim("ragged row lengths".into()));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(r, c, data)
    }

    /// Gaussian init with the given std, deterministic in the RNG state.
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::Dim(format!(
                "zip_map shape mismatch {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|x| x * k)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    /// `self += k * other`, shapes must match.
    pub fn axpy(&mut self, k: f64, other: &Tensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dim("axpy shape mismatch".into()));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self (m x k) * other (k x n)`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::Dim(format!(
                "matmul inner dims {} vs {}",
                self.cols, other.rows
            )));
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let crow = &mut out[i * n..(i + 1) * n];
            for (p, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (c, &b) in crow.iter_mut().zip(brow) {
                    *c += a * b;
                }
            }
        }
        Ok(Tensor { rows: m, cols: n, data: out })
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    /// Mean squared difference over all entries.
    pub fn msd(&self, other: &Tensor) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::Dim("msd shape mismatch".into()));
        }
        let n = self.numel().max(1) as f64;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            / n)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn check_finite(&self, ctx: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite value in {ctx}")))
        }
    }

    /// Exact bitwise equality, including distinguishing -0.0 from 0.0.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Per-column max of |x| as a 1 x cols tensor.
    pub fn col_max_abs(&self) -> Tensor {
        let mut out = vec![0.0f64; self.cols];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j] = out[j].max(self.data[i * self.cols + j].abs());
            }
        }
        Tensor { rows: 1, cols: self.cols, data: out }
    }

    /// Nearest-rank percentile of |x| over all entries, q in (0, 100].
    pub fn abs_percentile(&self, q: f64) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let mut v: Vec<f64> = self.data.iter().map(|x| x.abs()).collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = v.len();
        let rank = ((q / 100.0) * n as f64).ceil() as usize;
        v[rank.clamp(1, n) - 1]
    }
}

/// Gauss-Jordan inverse with partial pivoting. Errors on (near-)singular input.
pub fn invert(a: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::Dim("invert requires a square matrix".into()));
    }
    let mut m = a.data().to_vec();
    let mut inv = Tensor::eye(n).data().to_vec();
    for col in 0..n {
        let mut piv = col;
        let mut best = m[col * n + col].abs();
        for r in (col + 1)..n {
            let v = m[r * n + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best < 1e-300 {
            return Err(Error::Numeric("singular matrix in invert".into()));
        }
        if piv != col {
            for j in 0..n {
                m.swap(col * n + j, piv * n + j);
                inv.swap(col * n + j, piv * n + j);
            }
        }
        let d = m[col * n + col];
        for j in 0..n {
            m[col * n + j] /= d;
            inv[col * n + j] /= d;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[r * n + col];
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                m[r * n + j] -= f * m[col * n + j];
                inv[r * n + j] -= f * inv[col * n + j];
            }
        }
    }
    let out = Tensor::new(n, n, inv)?;
    out.check_finite("invert")?;
    Ok(out)
}

/// Largest singular value via power iteration on A^T A.
pub fn sigma_max(a: &Tensor) -> f64 {
    let n = a.cols();
    if n == 0 || a.rows() == 0 {
        return 0.0;
    }
    let mut v = Tensor::full(n, 1, 1.0 / (n as f64).sqrt());
    let at = a.transpose();
    let mut s = 0.0;
    for _ in 0..60 {
        let av = a.matmul(&v).unwrap();
        let atav = at.matmul(&av).unwrap();
        let norm = atav.frob_norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = atav.scale(1.0 / norm);
        s = norm.sqrt();
    }
    s
}

/// Condition number estimate sigma_max(A) * sigma_max(A^-1).
pub fn condition_number(a: &Tensor) -> Result<f64> {
    let inv = invert(a)?;
    Ok(sigma_max(a) * sigma_max(&inv))
}

/// Random orthogonal matrix via Householder QR of a Gaussian sample, with the
/// sign convention diag(R) > 0 so the result is unique and deterministic in
/// the seed.
pub fn random_orthogonal(d: usize, seed: u64) -> Result<Tensor> {
    if d == 0 {
        return Err(Error::Param("random_orthogonal requires d >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Tensor::randn(d, d, 1.0, &mut rng);
    let (q, r) = qr(&a)?;
    // Flip columns of Q where diag(R) is negative.
    let mut q = q;
    for j in 0..d {
        if r.get(j, j) < 0.0 {
            for i in 0..d {
                let v = q.get(i, j);
                q.set(i, j, -v);
            }
        }
    }
    Ok(q)
}

/// Householder QR decomposition, A = Q R with Q orthogonal.
pub fn qr(a: &Tensor) -> Result<(Tensor, Tensor)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::Dim("qr requires a square matrix".into()));
    }
    let mut r = a.clone();
    let mut q = Tensor::eye(n);
    for k in 0..n {
        // Householder vector for column k below the diagonal.
        let mut norm = 0.0;
        for i in k..n {
            norm += r.get(i, k) * r.get(i, k);
        }
        let norm = norm.sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if r.get(k, k) >= 0.0 { -norm } else { norm };
        let mut v = vec![0.0; n];
        for i in k..n {
            v[i] = r.get(i, k);
        }
        v[k] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        // Apply H = I - 2 v v^T / |v|^2 to R (left) and accumulate into Q.
        for j in 0..n {
            let dot: f64 = (k..n).map(|i| v[i] * r.get(i, j)).sum();
            let f = 2.0 * dot / vnorm2;
            for i in k..n {
                let val = r.get(i, j) - f * v[i];
                r.set(i, j, val);
            }
        }
        for j in 0..n {
            let dot: f64 = (k..n).map(|i| v[i] * q.get(j, i)).sum();
            let f = 2.0 * dot / vnorm2;
            for i in k..n {
                let val = q.get(j, i) - f * v[i];
                q.set(j, i, val);
            }
        }
    }
    Ok((q, r))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let i = Tensor::eye(2);
        assert_eq!(i.matmul(&m).unwrap(), m);
    }

    #[test]
    fn matmul_hand() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), [1, 1]);
        assert_eq!(c.get(0, 0), 11.0);
    }

    #[test]
    fn matmul_shape_error() {
        let a = Tensor::zeros(2, 3);
        let b = Tensor::zeros(2, 3);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn inverse_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::eye(5)
            .add(&Tensor::randn(5, 5, 0.2, &mut rng))
            .unwrap();
        let inv = invert(&a).unwrap();
        let p = a.matmul(&inv).unwrap();
        let err = p.sub(&Tensor::eye(5)).unwrap().max_abs();
        assert!(err < 1e-12, "A * A^-1 deviates from I by {err}");
    }

    #[test]
    fn orthogonal_d1_is_sign() {
        let q = random_orthogonal(1, 0).unwrap();
        assert!((q.get(0, 0).abs() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn orthogonal_d4_seed7() {
        let q = random_orthogonal(4, 7).unwrap();
        let qtq = q.transpose().matmul(&q).unwrap();
        let err = qtq.sub(&Tensor::eye(4)).unwrap().max_abs();
        assert!(err < 1e-10, "Q^T Q deviates from I by {err}");
    }

    #[test]
    fn orthogonal_deterministic() {
        let a = random_orthogonal(6, 42).unwrap();
        let b = random_orthogonal(6, 42).unwrap();
        assert!(a.bits_eq(&b));
    }

    #[test]
    fn condition_of_identity() {
        let c = condition_number(&Tensor::eye(4)).unwrap();
        assert!((c - 1.0).abs() < 1e-9);
    }

    #[test]
    fn percentile_nearest_rank() {
        let t = Tensor::new(1, 4, vec![1.0, -2.0, 3.0, -4.0]).unwrap();
        assert_eq!(t.abs_percentile(100.0), 4.0);
        assert_eq!(t.abs_percentile(50.0), 2.0);
    }

    #[test]
    fn invert_singular() {
        let t = Tensor::zeros(3, 3);
        assert!(invert(&t).is_err());
    }
}
