//! Dense row-major matrix of `f64` used for every fingerprint.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Grid {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidGrid(format!(
                "{} values cannot fill a {rows}x{cols} grid",
                data.len()
            )));
        }
        Ok(Grid { rows, cols, data })
    }

    /// Builds a grid from `f(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Grid { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    #[inline]
    pub fn add(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] += value;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Scales entries so they sum to one and returns the previous total.
    /// A zero grid is left untouched.
    pub fn normalize(&mut self) -> f64 {
        let total = self.sum();
        if total > 0.0 {
            for v in &mut self.data {
                *v /= total;
            }
        }
        total
    }

    /// Position of the largest entry; the first one in row-major order wins ties.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        (best / self.cols.max(1), best % self.cols.max(1))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn check_same_shape(&self, other: &Grid) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(self.shape(), other.shape()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_and_argmax() {
        let mut g = Grid::from_vec(2, 2, vec![1.0, 3.0, 0.0, 4.0]).unwrap();
        assert_eq!(g.normalize(), 8.0);
        assert!((g.sum() - 1.0).abs() < 1e-15);
        assert_eq!(g.argmax(), (1, 1));
    }

    #[test]
    fn zero_grid_stays_zero() {
        let mut g = Grid::zeros(3, 3);
        assert_eq!(g.normalize(), 0.0);
        assert_eq!(g.sum(), 0.0);
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Grid::from_vec(2, 3, vec![0.0; 5]).is_err());
    }
}
