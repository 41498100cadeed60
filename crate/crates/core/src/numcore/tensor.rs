use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
///
/// The leading axis is the batch axis everywhere in this crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    /// Standard-normal entries.
    pub fn randn<R: Rng + ?Sized>(shape: Vec<usize>, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Tensor { shape, data }
    }

    /// Build a `[rows.len(), cols]` matrix from rows of equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Ok(Tensor {
            shape: vec![rows.len(), cols],
            data: rows.concat(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the leading (batch) axis.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Per-sample shape (everything after the batch axis).
    pub fn sample_shape(&self) -> &[usize] {
        self.shape.get(1..).unwrap_or(&[])
    }

    /// Number of values per sample.
    pub fn row_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.row_len();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        let w = self.row_len().max(1);
        self.data.chunks(w)
    }

    /// Gather the given batch rows into a new tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let w = self.row_len();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Tensor { shape, data }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.expect_shape(other.shape())?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn expect_shape(&self, expected: &[usize]) -> Result<()> {
        if self.shape != expected {
            return Err(Error::ShapeMismatch {
                expected: expected.to_vec(),
                actual: self.shape.clone(),
            });
        }
        Ok(())
    }

    /// Row-wise argmax for a `[batch, classes]` tensor.
    pub fn argmax_rows(&self) -> Vec<usize> {
        self.rows().map(argmax).collect()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax of `logits / temperature`, written into `out`.
pub fn softmax_into(logits: &[f64], temperature: f64, out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = ((l - max) / temperature).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Row-wise softmax at the given temperature.
pub fn softmax(logits: &Tensor, temperature: f64) -> Tensor {
    let mut out = Tensor::zeros(logits.shape().to_vec());
    let w = logits.row_len();
    if w > 0 {
        for (src, dst) in logits.data().chunks(w).zip(out.data_mut().chunks_mut(w)) {
            softmax_into(src, temperature, dst);
        }
    }
    out
}

/// Row-wise log-softmax at the given temperature.
pub fn log_softmax(logits: &Tensor, temperature: f64) -> Tensor {
    let mut out = Tensor::zeros(logits.shape().to_vec());
    let w = logits.row_len();
    if w > 0 {
        for (src, dst) in logits.data().chunks(w).zip(out.data_mut().chunks_mut(w)) {
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = src.iter().map(|&l| ((l - max) / temperature).exp()).sum::<f64>().ln();
            for (d, &l) in dst.iter_mut().zip(src) {
                *d = (l - max) / temperature - lse;
            }
        }
    }
    out
}

/// Shannon entropy (nats) of a probability row.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::zeros(vec![0, 4]).numel(), 0);
    }

    #[test]
    fn select_rows_gathers() {
        let t = Tensor::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let s = t.select_rows(&[2, 0, 2]);
        assert_eq!(s.shape(), &[3, 2]);
        assert_eq!(s.data(), &[5., 6., 1., 2., 5., 6.]);
    }

    #[test]
    fn softmax_is_stable_and_normalized() {
        let t = Tensor::new(vec![1, 3], vec![1000.0, -1000.0, 999.0]).unwrap();
        let p = softmax(&t, 1.0);
        assert!(p.is_finite());
        assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let lp = log_softmax(&t, 1.0);
        assert!((lp.data()[0] - (-(1.0 + (-1.0f64).exp()).ln())).abs() < 1e-12);
    }

    #[test]
    fn entropy_of_uniform() {
        assert!((entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&[1.0, 0.0]), 0.0);
    }
}
