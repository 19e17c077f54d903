//! Square band matrices and an LU factorization with partial pivoting.
//!
//! Storage is row-major by diagonal offset: entry `(i, j)` with
//! `-kl <= j - i <= ku` lives at `data[i * width + (j + kl - i)]`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        Self {
            n,
            kl,
            ku,
            data: vec![0.0; n * (kl + ku + 1)],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, 0, 0);
        m.data.iter_mut().for_each(|d| *d = 1.0);
        m
    }

    /// Builds a band matrix from a Toeplitz stencil `(offset, coefficient)`,
    /// truncated at the matrix edges.
    pub fn from_stencil(n: usize, stencil: &[(isize, f64)]) -> Self {
        let kl = stencil
            .iter()
            .map(|&(o, _)| (-o).max(0) as usize)
            .max()
            .unwrap_or(0);
        let ku = stencil
            .iter()
            .map(|&(o, _)| o.max(0) as usize)
            .max()
            .unwrap_or(0);
        let mut m = Self::zeros(n, kl, ku);
        for i in 0..n {
            for &(o, c) in stencil {
                let j = i as isize + o;
                if j >= 0 && (j as usize) < n {
                    m.add(i, j as usize, c);
                }
            }
        }
        m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn lower(&self) -> usize {
        self.kl
    }

    pub fn upper(&self) -> usize {
        self.ku
    }

    #[inline]
    fn width(&self) -> usize {
        self.kl + self.ku + 1
    }

    #[inline]
    fn in_band(&self, i: usize, j: usize) -> bool {
        j + self.kl >= i && j <= i + self.ku
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i >= self.n || j >= self.n || !self.in_band(i, j) {
            return 0.0;
        }
        self.data[i * self.width() + (j + self.kl - i)]
    }

    /// Adds `value` to entry `(i, j)`. Panics if the entry is outside the band.
    pub fn add(&mut self, i: usize, j: usize, value: f64) {
        assert!(self.in_band(i, j), "entry ({i}, {j}) outside band");
        let w = self.width();
        self.data[i * w + (j + self.kl - i)] += value;
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let mut m = self.clone();
        m.data.iter_mut().for_each(|d| *d *= alpha);
        m
    }

    /// Returns `self + alpha * other`, widening the band as needed.
    pub fn axpy(&self, alpha: f64, other: &BandMatrix) -> Self {
        assert_eq!(self.n, other.n);
        let kl = self.kl.max(other.kl);
        let ku = self.ku.max(other.ku);
        let mut m = Self::zeros(self.n, kl, ku);
        for src in [(1.0, self), (alpha, other)] {
            let (s, a) = src;
            for i in 0..a.n {
                let lo = i.saturating_sub(a.kl);
                let hi = (i + a.ku).min(a.n - 1);
                for j in lo..=hi {
                    m.add(i, j, s * a.get(i, j));
                }
            }
        }
        m
    }

    pub fn transpose(&self) -> Self {
        let mut m = Self::zeros(self.n, self.ku, self.kl);
        for i in 0..self.n {
            let lo = i.saturating_sub(self.kl);
            let hi = (i + self.ku).min(self.n - 1);
            for j in lo..=hi {
                m.add(j, i, self.get(i, j));
            }
        }
        m
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.apply_into(x, &mut y);
        y
    }

    pub fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        let w = self.width();
        for (i, yi) in y.iter_mut().enumerate() {
            let lo = i.saturating_sub(self.kl);
            let hi = (i + self.ku).min(self.n - 1);
            let row = &self.data[i * w..(i + 1) * w];
            let mut acc = 0.0;
            for j in lo..=hi {
                acc += row[j + self.kl - i] * x[j];
            }
            *yi = acc;
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    /// Largest absolute entry of `self - selfᵀ`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n {
            for j in 0..self.n {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn lu(&self) -> Result<BandLu> {
        BandLu::factor(self)
    }
}

/// LU factors of a band matrix, row pivoting confined to the lower band.
#[derive(Debug, Clone)]
pub struct BandLu {
    n: usize,
    kl: usize,
    // upper bandwidth of U after fill-in: ku + kl
    ku: usize,
    data: Vec<f64>,
    piv: Vec<usize>,
}

impl BandLu {
    pub fn factor(a: &BandMatrix) -> Result<Self> {
        let n = a.n;
        let kl = a.kl;
        let ku = a.ku + a.kl;
        let w = kl + ku + 1;
        let mut data = vec![0.0; n * w];
        let idx = |i: usize, j: usize| i * w + (j + kl - i);
        for i in 0..n {
            let lo = i.saturating_sub(a.kl);
            let hi = (i + a.ku).min(n.saturating_sub(1));
            for j in lo..=hi {
                data[idx(i, j)] = a.get(i, j);
            }
        }
        let scale = data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut piv = vec![0; n];
        for k in 0..n {
            let last_row = (k + kl).min(n - 1);
            let last_col = (k + ku).min(n - 1);
            let mut p = k;
            let mut best = data[idx(k, k)].abs();
            for i in k + 1..=last_row {
                let v = data[idx(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if !(best > scale * f64::EPSILON * 1e-3) || !best.is_finite() {
                return Err(Error::Singular);
            }
            piv[k] = p;
            if p != k {
                for j in k..=last_col {
                    data.swap(idx(k, j), idx(p, j));
                }
            }
            let d = data[idx(k, k)];
            for i in k + 1..=last_row {
                let l = data[idx(i, k)] / d;
                data[idx(i, k)] = l;
                if l != 0.0 {
                    for j in k + 1..=last_col {
                        data[idx(i, j)] -= l * data[idx(k, j)];
                    }
                }
            }
        }
        Ok(Self {
            n,
            kl,
            ku,
            data,
            piv,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        assert_eq!(b.len(), self.n);
        let n = self.n;
        let w = self.kl + self.ku + 1;
        let kl = self.kl;
        let idx = |i: usize, j: usize| i * w + (j + kl - i);
        for k in 0..n {
            let p = self.piv[k];
            if p != k {
                b.swap(k, p);
            }
            let bk = b[k];
            if bk != 0.0 {
                for i in k + 1..=(k + kl).min(n - 1) {
                    b[i] -= self.data[idx(i, k)] * bk;
                }
            }
        }
        for k in (0..n).rev() {
            let mut acc = b[k];
            for j in k + 1..=(k + self.ku).min(n - 1) {
                acc -= self.data[idx(k, j)] * b[j];
            }
            b[k] = acc / self.data[idx(k, k)];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}
