//! Fixed-point matrices over the ring of integers modulo `2^k`.
//!
//! A real value `x` is encoded as `round_half_even(x * 2^f) mod 2^k` and read
//! back through its two's-complement interpretation. Addition, subtraction and
//! products are exact in the ring, so an additive mask distributes over a
//! matrix product with no error at all:
//!
//! ```
//! use remo::ring::{QuantParams, RingMatrix};
//!
//! let p = QuantParams::integer(16).unwrap();
//! let e = RingMatrix::new(1, 2, vec![3, 5], p).unwrap();
//! let m = RingMatrix::new(1, 2, vec![60000, 7], p).unwrap();
//! let w = RingMatrix::new(2, 1, vec![2, 9], p).unwrap();
//! let masked = e.add(&m).unwrap().matmul(&w).unwrap();
//! let restored = masked.sub(&m.matmul(&w).unwrap()).unwrap();
//! assert_eq!(restored, e.matmul(&w).unwrap());
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MATRIX_MAGIC: &[u8; 4] = b"RMX1";

/// Ring width `k` and fraction bits `f` of the fixed-point encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantParams {
    k: u8,
    f: u8,
}

impl Default for QuantParams {
    fn default() -> Self {
        QuantParams { k: 64, f: 16 }
    }
}

impl QuantParams {
    pub fn new(k: u8, f: u8) -> Result<Self> {
        if f < 1 || f >= k || k > 64 {
            return Err(Error::BadParams { k, f });
        }
        Ok(QuantParams { k, f })
    }

    /// Integer-only parameters (`f = 0`). Products need no rescale at this
    /// scale, which makes hand-checkable examples possible.
    pub fn integer(k: u8) -> Result<Self> {
        if k == 0 || k > 64 {
            return Err(Error::BadParams { k, f: 0 });
        }
        Ok(QuantParams { k, f: 0 })
    }

    pub fn k(&self) -> u8 {
        self.k
    }

    pub fn f(&self) -> u8 {
        self.f
    }

    /// Bit mask selecting the low `k` bits.
    #[inline]
    pub fn mask(&self) -> u64 {
        if self.k == 64 {
            u64::MAX
        } else {
            (1u64 << self.k) - 1
        }
    }

    #[inline]
    pub fn reduce(&self, v: u64) -> u64 {
        v & self.mask()
    }

    /// Two's-complement reading of a ring element.
    #[inline]
    pub fn to_signed(&self, v: u64) -> i64 {
        let shift = 64 - u32::from(self.k);
        ((v << shift) as i64) >> shift
    }

    #[inline]
    pub fn from_signed(&self, s: i64) -> u64 {
        self.reduce(s as u64)
    }

    pub fn scale(&self) -> f64 {
        (1u64 << self.f) as f64
    }

    /// Encode one real value.
    pub fn encode(&self, x: f64) -> Result<u64> {
        let scaled = (x * self.scale()).round_ties_even();
        let half = 2f64.powi(i32::from(self.k) - 1);
        if !scaled.is_finite() || scaled < -half || scaled >= half {
            return Err(Error::RangeOverflow { value: x, k: self.k, f: self.f });
        }
        Ok(self.from_signed(scaled as i64))
    }

    /// Decode one ring element to the real value it represents.
    pub fn decode(&self, v: u64) -> f64 {
        self.to_signed(v) as f64 / self.scale()
    }

    /// Round-half-even division by `2^f` on the signed reading.
    pub fn rescale_elem(&self, v: u64) -> u64 {
        if self.f == 0 {
            return v;
        }
        let s = self.to_signed(v);
        let f = u32::from(self.f);
        let mut q = s >> f;
        let rem = s - (q << f);
        let half = 1i64 << (f - 1);
        if rem > half || (rem == half && q & 1 == 1) {
            q += 1;
        }
        self.from_signed(q)
    }
}

/// Row-major matrix of ring elements.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RingMatrix {
    rows: usize,
    cols: usize,
    data: Vec<u64>,
    params: QuantParams,
}

impl RingMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<u64>, params: QuantParams) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape(format!("empty matrix {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} elements for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|&&v| v != params.reduce(v)) {
            return Err(Error::Decode(format!("element {bad} outside Z_2^{}", params.k)));
        }
        Ok(RingMatrix { rows, cols, data, params })
    }

    pub fn zeros(rows: usize, cols: usize, params: QuantParams) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        RingMatrix { rows, cols, data: vec![0; rows * cols], params }
    }

    /// Raw identity (ones on the diagonal, i.e. the real value `2^-f`).
    pub fn identity(n: usize, params: QuantParams) -> Self {
        let mut m = Self::zeros(n, n, params);
        for i in 0..n {
            m.data[i * n + i] = 1;
        }
        m
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        params: QuantParams,
        mut f: impl FnMut(usize, usize) -> u64,
    ) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(params.reduce(f(r, c)));
            }
        }
        RingMatrix { rows, cols, data, params }
    }

    /// Quantize a real matrix given as rows.
    pub fn quantize(x: &[Vec<f64>], params: QuantParams) -> Result<Self> {
        let rows = x.len();
        let cols = x.first().map_or(0, Vec::len);
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyInput);
        }
        let mut data = Vec::with_capacity(rows * cols);
        for row in x {
            if row.len() != cols {
                return Err(Error::shape("ragged rows in real matrix"));
            }
            for &v in row {
                data.push(params.encode(v)?);
            }
        }
        Ok(RingMatrix { rows, cols, data, params })
    }

    pub fn dequantize(&self) -> Vec<Vec<f64>> {
        (0..self.rows)
            .map(|r| self.row(r).iter().map(|&v| self.params.decode(v)).collect())
            .collect()
    }

    pub fn dequantize_row(&self, r: usize) -> Vec<f64> {
        self.row(r).iter().map(|&v| self.params.decode(v)).collect()
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

    pub fn params(&self) -> QuantParams {
        self.params
    }

    pub fn data(&self) -> &[u64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> u64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[u64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copy of rows `start..end`.
    pub fn row_slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.rows {
            return Err(Error::shape(format!("row range {start}..{end} of {}", self.rows)));
        }
        Ok(RingMatrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
            params: self.params,
        })
    }

    /// Copy of columns `start..end`.
    pub fn col_slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.cols {
            return Err(Error::shape(format!("column range {start}..{end} of {}", self.cols)));
        }
        Ok(RingMatrix::from_fn(self.rows, end - start, self.params, |r, c| {
            self.get(r, start + c)
        }))
    }

    /// Stack `self` on top of `other`.
    pub fn vstack(&self, other: &RingMatrix) -> Result<Self> {
        self.check_params(other)?;
        if self.cols != other.cols {
            return Err(Error::shape(format!("vstack {}x{} onto {}x{}", other.rows, other.cols, self.rows, self.cols)));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(RingMatrix { rows: self.rows + other.rows, cols: self.cols, data, params: self.params })
    }

    pub fn transpose(&self) -> Self {
        RingMatrix::from_fn(self.cols, self.rows, self.params, |r, c| self.get(c, r))
    }

    fn check_params(&self, other: &RingMatrix) -> Result<()> {
        if self.params != other.params {
            return Err(Error::ParamsMismatch);
        }
        Ok(())
    }

    fn check_same_shape(&self, other: &RingMatrix, op: &str) -> Result<()> {
        self.check_params(other)?;
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "{op} of {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &RingMatrix) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        let p = self.params;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| p.reduce(a.wrapping_add(*b)))
            .collect();
        Ok(RingMatrix { rows: self.rows, cols: self.cols, data, params: self.params })
    }

    pub fn sub(&self, other: &RingMatrix) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        let p = self.params;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| p.reduce(a.wrapping_sub(*b)))
            .collect();
        Ok(RingMatrix { rows: self.rows, cols: self.cols, data, params: self.params })
    }

    /// Exact product modulo `2^k`. The result sits at fraction scale `2f`.
    pub fn matmul(&self, other: &RingMatrix) -> Result<Self> {
        self.check_params(other)?;
        if self.cols != other.rows {
            return Err(Error::shape(format!(
                "matmul of {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (n, inner, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0u64; n * m];
        for i in 0..n {
            let acc = &mut out[i * m..(i + 1) * m];
            for t in 0..inner {
                let a = self.data[i * inner + t];
                if a == 0 {
                    continue;
                }
                let brow = &other.data[t * m..(t + 1) * m];
                for (o, &b) in acc.iter_mut().zip(brow) {
                    *o = o.wrapping_add(a.wrapping_mul(b));
                }
            }
        }
        let p = self.params;
        out.iter_mut().for_each(|v| *v = p.reduce(*v));
        Ok(RingMatrix { rows: n, cols: m, data: out, params: p })
    }

    /// Bring a product at scale `2f` back to scale `f`.
    pub fn rescale(&self) -> Self {
        let p = self.params;
        let data = self.data.iter().map(|&v| p.rescale_elem(v)).collect();
        RingMatrix { rows: self.rows, cols: self.cols, data, params: p }
    }

    pub fn encoded_len(&self) -> usize {
        4 + 4 + 4 + 2 + 8 * self.data.len()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MATRIX_MAGIC)?;
        w.write_all(&(self.rows as u32).to_le_bytes())?;
        w.write_all(&(self.cols as u32).to_le_bytes())?;
        w.write_all(&[self.params.k, self.params.f])?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut head = [0u8; 14];
        r.read_exact(&mut head)?;
        if &head[..4] != MATRIX_MAGIC {
            return Err(Error::Decode("bad matrix magic".into()));
        }
        let rows = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
        let params = QuantParams::decode_header(head[12], head[13])?;
        let len = rows
            .checked_mul(cols)
            .filter(|&n| n <= 1 << 28)
            .ok_or_else(|| Error::Decode(format!("matrix {rows}x{cols} too large")))?;
        let mut buf = vec![0u8; len * 8];
        r.read_exact(&mut buf)?;
        let data = buf.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
        RingMatrix::new(rows, cols, data, params)
    }

    /// Decode from a byte slice, returning the matrix and the bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < 14 {
            return Err(Error::LengthMismatch { expected: 14, found: bytes.len() });
        }
        let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let need = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .and_then(|n| n.checked_add(14))
            .ok_or_else(|| Error::Decode("matrix size overflow".into()))?;
        if bytes.len() < need {
            return Err(Error::LengthMismatch { expected: need, found: bytes.len() });
        }
        let mut cursor = &bytes[..need];
        let m = Self::read_from(&mut cursor)?;
        Ok((m, need))
    }
}

impl QuantParams {
    fn decode_header(k: u8, f: u8) -> Result<Self> {
        if f == 0 {
            QuantParams::integer(k)
        } else {
            QuantParams::new(k, f)
        }
        .map_err(|_| Error::Decode(format!("bad ring params k={k} f={f}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(k: u8, f: u8) -> QuantParams {
        QuantParams::new(k, f).unwrap()
    }

    fn int(k: u8) -> QuantParams {
        QuantParams::integer(k).unwrap()
    }

    fn m(rows: usize, cols: usize, v: &[u64], params: QuantParams) -> RingMatrix {
        RingMatrix::new(rows, cols, v.to_vec(), params).unwrap()
    }

    #[test]
    fn params_are_validated() {
        assert!(QuantParams::new(64, 0).is_err());
        assert!(QuantParams::new(16, 16).is_err());
        assert!(QuantParams::new(65, 16).is_err());
        assert!(QuantParams::new(2, 1).is_ok());
    }

    #[test]
    fn quantize_examples() {
        let d = QuantParams::default();
        assert_eq!(RingMatrix::quantize(&[vec![0.0]], d).unwrap().data(), &[0]);
        assert_eq!(RingMatrix::quantize(&[vec![1.0]], d).unwrap().data(), &[65536]);
        // round(0.5 * 4) = 2, round(-0.5 * 4) = -2 = 254 mod 256
        assert_eq!(RingMatrix::quantize(&[vec![0.5, -0.5]], p(8, 2)).unwrap().data(), &[2, 254]);
        // ties go to even
        assert_eq!(RingMatrix::quantize(&[vec![0.125, 0.375]], p(8, 2)).unwrap().data(), &[0, 2]);
    }

    #[test]
    fn quantize_rejects_out_of_range() {
        let q = p(8, 2);
        // representable: [-32, 32) in steps of 1/4
        assert!(RingMatrix::quantize(&[vec![31.75]], q).is_ok());
        assert!(RingMatrix::quantize(&[vec![-32.0]], q).is_ok());
        assert!(matches!(RingMatrix::quantize(&[vec![32.0]], q), Err(Error::RangeOverflow { .. })));
        assert!(matches!(RingMatrix::quantize(&[vec![f64::NAN]], q), Err(Error::RangeOverflow { .. })));
        assert!(RingMatrix::quantize(&[vec![1e300]], QuantParams::default()).is_err());
    }

    #[test]
    fn add_and_sub_wrap() {
        let q = int(16);
        let a = m(1, 2, &[3, 5], q);
        assert_eq!(a.add(&RingMatrix::zeros(1, 2, q)).unwrap(), a);
        assert_eq!(a.add(&m(1, 2, &[10, 20], q)).unwrap().data(), &[13, 25]);
        assert_eq!(m(1, 1, &[65535], q).add(&m(1, 1, &[1], q)).unwrap().data(), &[0]);
        assert_eq!(m(1, 1, &[0], q).sub(&m(1, 1, &[1], q)).unwrap().data(), &[65535]);
        assert_eq!(a.sub(&a).unwrap(), RingMatrix::zeros(1, 2, q));
        let d = QuantParams::default();
        assert_eq!(m(1, 1, &[u64::MAX], d).add(&m(1, 1, &[1], d)).unwrap().data(), &[0]);
    }

    #[test]
    fn shape_and_params_mismatch() {
        let a = RingMatrix::zeros(2, 2, int(16));
        assert!(matches!(a.add(&RingMatrix::zeros(2, 3, int(16))), Err(Error::ShapeMismatch(_))));
        assert!(matches!(a.add(&RingMatrix::zeros(2, 2, int(32))), Err(Error::ParamsMismatch)));
        assert!(matches!(a.matmul(&RingMatrix::zeros(3, 2, int(16))), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn matmul_examples() {
        let q = int(16);
        let a = m(2, 2, &[7, 9, 65535, 4], q);
        assert_eq!(a.matmul(&RingMatrix::identity(2, q)).unwrap(), a);
        let b = m(1, 2, &[1, 2], q).matmul(&m(2, 1, &[3, 4], q)).unwrap();
        assert_eq!(b.data(), &[11]);
    }

    #[test]
    fn rescale_examples() {
        let q = p(8, 2);
        assert_eq!(m(1, 1, &[0], q).rescale().data(), &[0]);
        assert_eq!(m(1, 1, &[16], q).rescale().data(), &[4]);
        // 6/4 = 1.5 -> 2, 10/4 = 2.5 -> 2, 14/4 = 3.5 -> 4
        assert_eq!(m(1, 3, &[6, 10, 14], q).rescale().data(), &[2, 2, 4]);
        // -6/4 = -1.5 -> -2 = 254, -7/4 = -1.75 -> -2
        assert_eq!(m(1, 2, &[250, 249], q).rescale().data(), &[254, 254]);
    }

    #[test]
    fn fixed_point_product_rescales_to_real_product() {
        let d = QuantParams::default();
        let a = RingMatrix::quantize(&[vec![1.5, -2.25]], d).unwrap();
        let b = RingMatrix::quantize(&[vec![4.0], vec![0.5]], d).unwrap();
        assert_eq!(a.matmul(&b).unwrap().rescale().dequantize(), vec![vec![4.875]]);
    }

    #[test]
    fn dequantize_examples() {
        let d = QuantParams::default();
        assert_eq!(m(1, 1, &[0], d).dequantize(), vec![vec![0.0]]);
        assert_eq!(m(1, 1, &[65536], d).dequantize(), vec![vec![1.0]]);
        assert_eq!(m(1, 1, &[0u64.wrapping_sub(65536)], d).dequantize(), vec![vec![-1.0]]);
        let q = p(8, 2);
        assert_eq!(m(1, 1, &[256 - 4], q).dequantize(), vec![vec![-1.0]]);
    }

    #[test]
    fn encoding_layout() {
        let q = p(8, 2);
        let a = m(1, 2, &[1, 255], q);
        let bytes = a.to_bytes();
        assert_eq!(&bytes[..4], b"RMX1");
        assert_eq!(&bytes[4..14], &[1, 0, 0, 0, 2, 0, 0, 0, 8, 2]);
        assert_eq!(&bytes[14..22], &1u64.to_le_bytes());
        assert_eq!(bytes.len(), a.encoded_len());
        let (back, used) = RingMatrix::from_bytes(&bytes).unwrap();
        assert_eq!((back, used), (a, bytes.len()));
    }

    #[test]
    fn decoding_rejects_bad_input() {
        let a = m(1, 2, &[1, 2], p(8, 2)).to_bytes();
        assert!(matches!(RingMatrix::from_bytes(&a[..20]), Err(Error::LengthMismatch { .. })));
        let mut bad = a.clone();
        bad[0] = b'X';
        assert!(RingMatrix::from_bytes(&bad).is_err());
        let mut bad = a.clone();
        bad[14] = 0xff; // exceeds 2^8 - 1 with the next byte
        bad[15] = 0x01;
        assert!(RingMatrix::from_bytes(&bad).is_err());
        let mut bad = a;
        bad[13] = 9; // f >= k
        bad[12] = 8;
        assert!(RingMatrix::from_bytes(&bad).is_err());
    }

    fn arb_matrix(rows: usize, cols: usize, params: QuantParams) -> impl Strategy<Value = RingMatrix> {
        proptest::collection::vec(any::<u64>(), rows * cols)
            .prop_map(move |v| RingMatrix::from_fn(rows, cols, params, |r, c| v[r * cols + c]))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn sub_undoes_add(k in 2u8..=64, seed in any::<u64>()) {
            let q = QuantParams::integer(k).unwrap();
            let mut s = seed;
            let mut next = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); s };
            let e = RingMatrix::from_fn(3, 4, q, |_, _| next());
            let mm = RingMatrix::from_fn(3, 4, q, |_, _| next());
            prop_assert_eq!(e.add(&mm).unwrap().sub(&mm).unwrap(), e);
        }

        #[test]
        fn matmul_distributes_over_add(
            e in arb_matrix(4, 4, QuantParams::default()),
            mm in arb_matrix(4, 4, QuantParams::default()),
            w in arb_matrix(4, 4, QuantParams::default()),
        ) {
            let lhs = e.add(&mm).unwrap().matmul(&w).unwrap();
            let rhs = e.matmul(&w).unwrap().add(&mm.matmul(&w).unwrap()).unwrap();
            prop_assert_eq!(&lhs, &rhs);
            prop_assert_eq!(lhs.sub(&mm.matmul(&w).unwrap()).unwrap(), e.matmul(&w).unwrap());
        }

        #[test]
        fn outputs_stay_in_ring(k in 2u8..64, a in any::<u64>(), b in any::<u64>()) {
            let q = QuantParams::new(k, 1).unwrap();
            let x = RingMatrix::from_fn(2, 2, q, |r, c| a.rotate_left((r * 2 + c) as u32));
            let y = RingMatrix::from_fn(2, 2, q, |r, c| b.rotate_left((r * 2 + c) as u32));
            for out in [x.add(&y).unwrap(), x.sub(&y).unwrap(), x.matmul(&y).unwrap(), x.matmul(&y).unwrap().rescale()] {
                prop_assert!(out.data().iter().all(|&v| v <= q.mask()));
            }
        }

        #[test]
        fn quantize_dequantize_round_trip(k in 2u8..=64, raw in any::<u64>()) {
            let f = (k / 2).max(1);
            let q = QuantParams::new(k, f).unwrap();
            // f64 carries 53 bits; restrict to elements whose signed value fits.
            let v = if k > 53 { q.from_signed(q.to_signed(q.reduce(raw)) >> (k - 53)) } else { q.reduce(raw) };
            let x = RingMatrix::new(1, 1, vec![v], q).unwrap();
            prop_assert_eq!(RingMatrix::quantize(&x.dequantize(), q).unwrap(), x);
        }

        #[test]
        fn encoding_round_trips(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
            let q = QuantParams::default();
            let a = RingMatrix::from_fn(rows, cols, q, |r, c| seed.wrapping_mul((r * 7 + c + 1) as u64));
            let (b, _) = RingMatrix::from_bytes(&a.to_bytes()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
