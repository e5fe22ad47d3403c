use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LinearSolver {
    #[default]
    Banded,
    Dense,
}

/// Symmetric banded matrix storing the lower band row-major:
/// entry `(i, j)` with `i − bw ≤ j ≤ i` lives at `i·(bw+1) + (i − j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandedMatrix {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandedMatrix {
    pub fn zeros(n: usize, bw: usize) -> Self {
        let bw = bw.min(n.saturating_sub(1));
        Self { n, bw, data: vec![0.0; n * (bw + 1)] }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        i * (self.bw + 1) + (i - j)
    }

    /// Reads `(i, j)` of the symmetric matrix; zero outside the band.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.bw {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    /// Adds to the lower-triangle entry `(i, j)`, `i ≥ j`.
    #[inline]
    pub fn add_lower(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i >= j && i - j <= self.bw, "({i},{j}) outside band {}", self.bw);
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    pub fn diagonal(&self) -> DVector<f64> {
        DVector::from_iterator(self.n, (0..self.n).map(|i| self.data[self.idx(i, i)]))
    }

    pub fn add_diagonal(&mut self, d: &DVector<f64>) {
        for i in 0..self.n {
            let k = self.idx(i, i);
            self.data[k] += d[i];
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    /// In-place banded Cholesky; `None` if the matrix is not positive definite.
    pub fn cholesky(mut self) -> Option<BandedCholesky> {
        let (n, bw) = (self.n, self.bw);
        let w = bw + 1;
        let data = &mut self.data;
        for j in 0..n {
            let span = j.min(bw);
            // Row j holds L[j, j−m] at offset m, so m = 1..=span covers k < j.
            let rj = j * w;
            let s = data[rj] - data[rj + 1..=rj + span].iter().map(|l| l * l).sum::<f64>();
            if !(s > 0.0) || !s.is_finite() {
                return None;
            }
            let d = s.sqrt();
            data[rj] = d;
            for i in (j + 1)..(j + w).min(n) {
                let ri = i * w;
                let off = i - j;
                // Shared k range: max(i, j)−bw ≤ k < j.
                let m = span.min(bw - off);
                let (head, tail) = data.split_at_mut(ri);
                let row_j = &head[rj + 1..=rj + m];
                let row_i = &tail[off + 1..=off + m];
                let dot: f64 = row_i.iter().zip(row_j).map(|(a, b)| a * b).sum();
                tail[off] = (tail[off] - dot) / d;
            }
        }
        Some(BandedCholesky { l: self })
    }
}

pub struct BandedCholesky {
    l: BandedMatrix,
}

impl BandedCholesky {
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let l = &self.l;
        let (n, bw) = (l.n, l.bw);
        let mut y = b.clone();
        for i in 0..n {
            let mut s = y[i];
            for k in i.saturating_sub(bw)..i {
                s -= l.data[l.idx(i, k)] * y[k];
            }
            y[i] = s / l.data[l.idx(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..(i + bw + 1).min(n) {
                s -= l.data[l.idx(k, i)] * y[k];
            }
            y[i] = s / l.data[l.idx(i, i)];
        }
        y
    }
}
