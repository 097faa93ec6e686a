//! Exact linear algebra over the rationals for rank, kernel and solve.
//!
//! Ring matrices are lifted to their two's-complement integers scaled by
//! `2^-f`, i.e. exactly the real values they encode. Elimination is
//! fraction-free Gauss-Jordan (Bareiss) over big integers, which keeps every
//! division exact and avoids gcd normalisation in the inner loop.

use num::bigint::BigInt;
use num::rational::BigRational;
use num::{One, Signed, ToPrimitive, Zero};

use crate::ring::RingMatrix;

/// Dense matrix of exact rationals.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QMatrix {
    rows: usize,
    cols: usize,
    data: Vec<BigRational>,
}

impl QMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        QMatrix { rows, cols, data: vec![BigRational::zero(); rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> BigRational) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        QMatrix { rows, cols, data }
    }

    pub fn from_i64(rows: usize, cols: usize, values: &[i64]) -> Self {
        assert_eq!(values.len(), rows * cols);
        Self::from_fn(rows, cols, |r, c| BigRational::from_integer(values[r * cols + c].into()))
    }

    /// The real values a ring matrix encodes at its own fraction scale.
    pub fn from_ring(m: &RingMatrix) -> Self {
        Self::from_ring_at_scale(m, u32::from(m.params().f()))
    }

    /// Real values of a ring matrix whose elements sit at scale `2^frac_bits`.
    pub fn from_ring_at_scale(m: &RingMatrix, frac_bits: u32) -> Self {
        let p = m.params();
        let den = BigInt::one() << frac_bits;
        Self::from_fn(m.rows(), m.cols(), |r, c| {
            BigRational::new(BigInt::from(p.to_signed(m.get(r, c))), den.clone())
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> &BigRational {
        &self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: BigRational) {
        self.data[r * self.cols + c] = v;
    }

    pub fn column(&self, c: usize) -> Vec<BigRational> {
        (0..self.rows).map(|r| self.get(r, c).clone()).collect()
    }

    pub fn matmul(&self, other: &QMatrix) -> QMatrix {
        assert_eq!(self.cols, other.rows, "inner dimensions differ");
        QMatrix::from_fn(self.rows, other.cols, |r, c| {
            (0..self.cols).fold(BigRational::zero(), |acc, t| acc + self.get(r, t) * other.get(t, c))
        })
    }

    pub fn sub(&self, other: &QMatrix) -> QMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        QMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn add(&self, other: &QMatrix) -> QMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        QMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn vstack(&self, other: &QMatrix) -> QMatrix {
        assert_eq!(self.cols, other.cols);
        let mut data = self.data.clone();
        data.extend(other.data.iter().cloned());
        QMatrix { rows: self.rows + other.rows, cols: self.cols, data }
    }

    /// Largest absolute entry, rounded to `f64`.
    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.abs().to_f64().unwrap_or(f64::INFINITY))
            .fold(0.0, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(Zero::is_zero)
    }

    pub fn to_f64(&self) -> Vec<Vec<f64>> {
        (0..self.rows)
            .map(|r| (0..self.cols).map(|c| self.get(r, c).to_f64().unwrap_or(f64::NAN)).collect())
            .collect()
    }

    /// Scale every row to a common denominator and return the integer matrix.
    fn clear_denominators(&self) -> Vec<Vec<BigInt>> {
        (0..self.rows)
            .map(|r| {
                let row = &self.data[r * self.cols..(r + 1) * self.cols];
                let lcm = row.iter().fold(BigInt::one(), |acc, v| num::integer::lcm(acc, v.denom().clone()));
                row.iter().map(|v| v.numer() * (&lcm / v.denom())).collect()
            })
            .collect()
    }

    /// Reduced row echelon data: `scale * rref` as integers plus pivot columns.
    pub fn echelon(&self) -> Echelon {
        Echelon::compute(self.clear_denominators(), self.cols)
    }

    pub fn rank(&self) -> usize {
        self.echelon().pivots.len()
    }

    /// Basis of `{x : self * x = 0}`, one vector per free column.
    pub fn kernel_basis(&self) -> Vec<Vec<BigRational>> {
        let ech = self.echelon();
        let free: Vec<usize> = (0..self.cols).filter(|c| !ech.pivots.contains(c)).collect();
        free.iter()
            .map(|&j| {
                let mut v = vec![BigRational::zero(); self.cols];
                v[j] = BigRational::one();
                for (i, &p) in ech.pivots.iter().enumerate() {
                    v[p] = -BigRational::new(ech.rows[i][j].clone(), ech.scale.clone());
                }
                v
            })
            .collect()
    }

    /// One solution `X` of `self * X = rhs` with free variables set to zero,
    /// or `None` when the system is inconsistent.
    pub fn solve(&self, rhs: &QMatrix) -> Option<QMatrix> {
        assert_eq!(self.rows, rhs.rows);
        let aug = QMatrix::from_fn(self.rows, self.cols + rhs.cols, |r, c| {
            if c < self.cols {
                self.get(r, c).clone()
            } else {
                rhs.get(r, c - self.cols).clone()
            }
        });
        let ech = aug.echelon();
        if ech.pivots.iter().any(|&p| p >= self.cols) {
            return None;
        }
        let mut x = QMatrix::zeros(self.cols, rhs.cols);
        for (i, &p) in ech.pivots.iter().enumerate() {
            for c in 0..rhs.cols {
                x.set(p, c, BigRational::new(ech.rows[i][self.cols + c].clone(), ech.scale.clone()));
            }
        }
        Some(x)
    }
}

/// Fraction-free reduced echelon form. Row `i` of the reduced form equals
/// `rows[i] / scale`, with pivot `i` in column `pivots[i]`.
#[derive(Debug, Clone)]
pub struct Echelon {
    pub rows: Vec<Vec<BigInt>>,
    pub pivots: Vec<usize>,
    pub scale: BigInt,
}

impl Echelon {
    fn compute(mut a: Vec<Vec<BigInt>>, cols: usize) -> Echelon {
        let nrows = a.len();
        let mut prev = BigInt::one();
        let mut pivots = Vec::new();
        let mut r = 0;
        for c in 0..cols {
            if r == nrows {
                break;
            }
            let Some(p) = (r..nrows).find(|&i| !a[i][c].is_zero()) else {
                continue;
            };
            a.swap(r, p);
            let piv = a[r][c].clone();
            let pivot_row = a[r].clone();
            for (i, row) in a.iter_mut().enumerate() {
                if i == r {
                    continue;
                }
                let factor = row[c].clone();
                for j in 0..cols {
                    if j == c {
                        continue;
                    }
                    let v = (&piv * &row[j] - &factor * &pivot_row[j]) / &prev;
                    row[j] = v;
                }
                row[c] = BigInt::zero();
            }
            prev = piv;
            pivots.push(c);
            r += 1;
        }
        a.truncate(r);
        // Every reduced row now carries the same scale: the last pivot value.
        let scale = if r == 0 { BigInt::one() } else { prev };
        let mut rows = a;
        if scale.is_negative() {
            for row in rows.iter_mut() {
                for v in row.iter_mut() {
                    *v = -&*v;
                }
            }
            return Echelon { rows, pivots, scale: -scale };
        }
        Echelon { rows, pivots, scale }
    }
}

/// Rank of the signed integer lift of `m` modulo the prime `2^61 - 1`.
///
/// A full rank here implies full rank over the rationals.
pub fn rank_mod_p(m: &RingMatrix) -> usize {
    const P: u128 = (1u128 << 61) - 1;
    let p = m.params();
    let mut a: Vec<Vec<u128>> = (0..m.rows())
        .map(|r| {
            m.row(r)
                .iter()
                .map(|&v| (i128::from(p.to_signed(v))).rem_euclid(P as i128) as u128)
                .collect()
        })
        .collect();
    let pow = |mut b: u128, mut e: u128| {
        let mut acc = 1u128;
        while e > 0 {
            if e & 1 == 1 {
                acc = acc * b % P;
            }
            b = b * b % P;
            e >>= 1;
        }
        acc
    };
    let (rows, cols) = m.shape();
    let mut r = 0;
    for c in 0..cols {
        if r == rows {
            break;
        }
        let Some(piv) = (r..rows).find(|&i| a[i][c] != 0) else {
            continue;
        };
        a.swap(r, piv);
        let inv = pow(a[r][c], P - 2);
        for i in r + 1..rows {
            let factor = a[i][c] * inv % P;
            if factor == 0 {
                continue;
            }
            for j in c..cols {
                a[i][j] = (a[i][j] + P - factor * a[r][j] % P) % P;
            }
        }
        r += 1;
    }
    r
}
