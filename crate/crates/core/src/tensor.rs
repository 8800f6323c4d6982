//! Key tensors and the KVT1 interchange format.
//!
//! A [`KeyTensor`] holds key (or value, or query) vectors laid out row-major
//! in `(batch, head, seq, dim)` order. Every consumer treats each
//! `(batch, head)` pair as an independent `seq x dim` matrix, exposed as a
//! borrowed [`MatrixView`].
//!
//! ## KVT1 layout
//!
//! ```text
//! offset  size  field
//! 0       4     magic "KVT1"
//! 4       4     batch     (u32 LE)
//! 8       4     heads     (u32 LE)
//! 12      4     seq_len   (u32 LE)
//! 16      4     head_dim  (u32 LE)
//! 20      4*n   payload, f32 LE, n = batch*heads*seq_len*head_dim
//! ```
//!
//! No padding, no footer.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const KVT_MAGIC: &[u8; 4] = b"KVT1";
pub const KVT_HEADER_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub batch: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub head_dim: usize,
}

impl Shape {
    pub fn new(batch: usize, heads: usize, seq_len: usize, head_dim: usize) -> Self {
        Self { batch, heads, seq_len, head_dim }
    }

    /// Single `(batch, head)` pair holding an `n x d` matrix.
    pub fn matrix(seq_len: usize, head_dim: usize) -> Self {
        Self::new(1, 1, seq_len, head_dim)
    }

    pub fn numel(&self) -> usize {
        self.batch * self.heads * self.seq_len * self.head_dim
    }

    /// Number of `(batch, head)` pairs.
    pub fn pairs(&self) -> usize {
        self.batch * self.heads
    }

    fn validate(&self) -> Result<()> {
        let dims = [
            ("batch", self.batch),
            ("heads", self.heads),
            ("seq_len", self.seq_len),
            ("head_dim", self.head_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Validation(format!("{name} must be >= 1")));
            }
            if v > u32::MAX as usize {
                return Err(Error::Validation(format!("{name} = {v} does not fit in u32")));
            }
        }
        Ok(())
    }
}

/// Borrowed `rows x cols` row-major matrix of f32 values.
#[derive(Debug, Clone, Copy)]
pub struct MatrixView<'a> {
    data: &'a [f32],
    rows: usize,
    cols: usize,
}

impl<'a> MatrixView<'a> {
    pub fn new(data: &'a [f32], cols: usize) -> Result<Self> {
        if cols == 0 {
            return Err(Error::Shape("matrix needs at least one column".into()));
        }
        if !data.len().is_multiple_of(cols) {
            return Err(Error::Shape(format!(
                "{} values do not form rows of width {cols}",
                data.len()
            )));
        }
        Ok(Self { data, rows: data.len() / cols, cols })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn row(&self, i: usize) -> &'a [f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> std::slice::ChunksExact<'a, f32> {
        self.data.chunks_exact(self.cols)
    }

    pub fn as_slice(&self) -> &'a [f32] {
        self.data
    }

    /// Contiguous sub-range of rows `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> MatrixView<'a> {
        MatrixView { data: &self.data[start * self.cols..end * self.cols], rows: end - start, cols: self.cols }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyTensor {
    shape: Shape,
    data: Vec<f32>,
}

impl KeyTensor {
    /// Builds a tensor, enforcing positive dims, exact payload length and
    /// finite entries.
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.numel() {
            return Err(Error::Validation(format!(
                "payload has {} values, shape {:?} needs {}",
                data.len(),
                shape,
                shape.numel()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value at flat index {pos}")));
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64(shape: Shape, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| v as f32).collect())
    }

    /// Single-pair tensor from row vectors.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let d = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            let r = r.as_ref();
            if r.len() != d {
                return Err(Error::Shape("ragged rows".into()));
            }
            data.extend(r.iter().map(|&v| v as f32));
        }
        Self::new(Shape::matrix(rows.len(), d), data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape.batch
    }

    pub fn heads(&self) -> usize {
        self.shape.heads
    }

    pub fn seq_len(&self) -> usize {
        self.shape.seq_len
    }

    pub fn head_dim(&self) -> usize {
        self.shape.head_dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    fn pair_len(&self) -> usize {
        self.shape.seq_len * self.shape.head_dim
    }

    /// The `seq_len x head_dim` matrix for one `(batch, head)` pair.
    pub fn head(&self, b: usize, h: usize) -> MatrixView<'_> {
        assert!(b < self.shape.batch && h < self.shape.heads, "pair ({b}, {h}) out of range");
        let start = (b * self.shape.heads + h) * self.pair_len();
        MatrixView { data: &self.data[start..start + self.pair_len()], rows: self.shape.seq_len, cols: self.shape.head_dim }
    }

    /// Pairs in `(batch, head)` order, flattened.
    pub fn pair(&self, p: usize) -> MatrixView<'_> {
        self.head(p / self.shape.heads, p % self.shape.heads)
    }

    pub fn row(&self, b: usize, h: usize, i: usize) -> &[f32] {
        self.head(b, h).row(i)
    }

    /// Copies tokens `[start, end)` of every pair into a new tensor.
    pub fn slice_seq(&self, start: usize, end: usize) -> Result<KeyTensor> {
        if start >= end || end > self.shape.seq_len {
            return Err(Error::Bounds(format!(
                "slice [{start}, {end}) invalid for seq_len {}",
                self.shape.seq_len
            )));
        }
        let d = self.shape.head_dim;
        let mut data = Vec::with_capacity(self.shape.pairs() * (end - start) * d);
        for p in 0..self.shape.pairs() {
            data.extend_from_slice(self.pair(p).slice_rows(start, end).as_slice());
        }
        Ok(KeyTensor { shape: Shape { seq_len: end - start, ..self.shape }, data })
    }

    pub fn write_kvt<W: Write>(&self, mut w: W) -> Result<()> {
        // Constructed tensors are always valid; re-check so a hand-built payload
        // can never reach disk with NaN/Inf.
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite value at flat index {pos}")));
        }
        self.shape.validate()?;
        w.write_all(KVT_MAGIC)?;
        for v in [self.shape.batch, self.shape.heads, self.shape.seq_len, self.shape.head_dim] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_kvt<R: Read>(mut r: R) -> Result<KeyTensor> {
        let mut header = [0u8; KVT_HEADER_LEN];
        let mut got = 0;
        while got < KVT_HEADER_LEN {
            let n = r.read(&mut header[got..])?;
            if n == 0 {
                break;
            }
            got += n;
        }
        if got < 4 || &header[..4] != KVT_MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected \"KVT1\"",
                String::from_utf8_lossy(&header[..got.min(4)])
            )));
        }
        if got < KVT_HEADER_LEN {
            return Err(Error::Format(format!("truncated header: {got} of {KVT_HEADER_LEN} bytes")));
        }
        let dim = |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let shape = Shape::new(dim(0), dim(1), dim(2), dim(3));
        shape.validate()?;
        let expected = shape
            .batch
            .checked_mul(shape.heads)
            .and_then(|v| v.checked_mul(shape.seq_len))
            .and_then(|v| v.checked_mul(shape.head_dim))
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::Validation(format!("shape {shape:?} overflows")))?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() != expected {
            return Err(Error::Length { expected, found: payload.len() });
        }
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        KeyTensor::new(shape, data)
    }

    pub fn save_kvt(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_kvt(BufWriter::new(File::create(path)?))
    }

    pub fn load_kvt(path: impl AsRef<Path>) -> Result<KeyTensor> {
        Self::read_kvt(BufReader::new(File::open(path)?))
    }
}

pub fn load_kvt(path: impl AsRef<Path>) -> Result<KeyTensor> {
    KeyTensor::load_kvt(path)
}

pub fn save_kvt(t: &KeyTensor, path: impl AsRef<Path>) -> Result<()> {
    t.save_kvt(path)
}

/// Per-token scores aligned with the `(batch, head, seq)` axes of a key tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTensor {
    batch: usize,
    heads: usize,
    seq_len: usize,
    data: Vec<f64>,
}

impl ScoreTensor {
    pub fn new(batch: usize, heads: usize, seq_len: usize, data: Vec<f64>) -> Result<Self> {
        if batch == 0 || heads == 0 || seq_len == 0 {
            return Err(Error::Validation("score tensor dims must be >= 1".into()));
        }
        if data.len() != batch * heads * seq_len {
            return Err(Error::Validation(format!(
                "score payload has {} values, expected {}",
                data.len(),
                batch * heads * seq_len
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite score at flat index {pos}")));
        }
        Ok(Self { batch, heads, seq_len, data })
    }

    /// Scores every `(batch, head)` pair of `shape` with `f`, in parallel.
    /// Each pair is computed independently, so the result does not depend on
    /// the number of worker threads.
    pub fn from_pairs<F>(shape: Shape, f: F) -> Result<Self>
    where
        F: Fn(usize, usize) -> Result<Vec<f64>> + Sync,
    {
        let per_pair: Vec<Vec<f64>> = (0..shape.pairs())
            .into_par_iter()
            .map(|p| f(p / shape.heads, p % shape.heads))
            .collect::<Result<_>>()?;
        let mut data = Vec::with_capacity(shape.pairs() * shape.seq_len);
        for s in per_pair {
            if s.len() != shape.seq_len {
                return Err(Error::Shape(format!("scorer returned {} scores for {} tokens", s.len(), shape.seq_len)));
            }
            data.extend(s);
        }
        Self::new(shape.batch, shape.heads, shape.seq_len, data)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn head(&self, b: usize, h: usize) -> &[f64] {
        let start = (b * self.heads + h) * self.seq_len;
        &self.data[start..start + self.seq_len]
    }

    pub fn pair(&self, p: usize) -> &[f64] {
        &self.data[p * self.seq_len..(p + 1) * self.seq_len]
    }

    /// KVT1-compatible tensor with `head_dim = 1` (scores narrowed to f32).
    pub fn to_key_tensor(&self) -> Result<KeyTensor> {
        KeyTensor::from_f64(Shape::new(self.batch, self.heads, self.seq_len, 1), &self.data)
    }

    /// CSV with columns `batch,head,token,score`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "batch,head,token,score")?;
        for b in 0..self.batch {
            for h in 0..self.heads {
                for (i, s) in self.head(b, h).iter().enumerate() {
                    writeln!(w, "{b},{h},{i},{s}")?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(shape: Shape) -> KeyTensor {
        let data = (0..shape.numel()).map(|i| (i as f32) * 0.5 - 3.0).collect();
        KeyTensor::new(shape, data).unwrap()
    }

    fn bytes(t: &KeyTensor) -> Vec<u8> {
        let mut buf = Vec::new();
        t.write_kvt(&mut buf).unwrap();
        buf
    }

    #[test]
    fn header_layout_is_exact() {
        let t = sample(Shape::new(1, 2, 3, 4));
        let b = bytes(&t);
        assert_eq!(&b[..4], b"KVT1");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..16], &3u32.to_le_bytes());
        assert_eq!(&b[16..20], &4u32.to_le_bytes());
        assert_eq!(b.len(), 20 + 24 * 4);
        assert_eq!(&b[20..24], &(-3.0f32).to_le_bytes());
    }

    #[test]
    fn save_is_deterministic_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let t = sample(Shape::new(2, 3, 5, 4));
        let (p1, p2) = (dir.path().join("a.kvt"), dir.path().join("b.kvt"));
        save_kvt(&t, &p1).unwrap();
        save_kvt(&t, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(load_kvt(&p1).unwrap(), t);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut b = bytes(&sample(Shape::new(1, 1, 2, 2)));
        b[..4].copy_from_slice(b"XXXX");
        assert!(matches!(KeyTensor::read_kvt(&b[..]), Err(Error::Format(_))));
    }

    #[test]
    fn short_payload_is_length_error() {
        let b = bytes(&sample(Shape::new(1, 1, 2, 2)));
        let cut = &b[..20 + 3 * 4];
        match KeyTensor::read_kvt(cut) {
            Err(Error::Length { expected, found }) => assert_eq!((expected, found), (16, 12)),
            other => panic!("expected length error, got {other:?}"),
        }
    }

    #[test]
    fn zero_dim_is_validation_error() {
        let mut b = bytes(&sample(Shape::new(1, 1, 2, 2)));
        b[12..16].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(KeyTensor::read_kvt(&b[..]), Err(Error::Validation(_))));
    }

    #[test]
    fn nan_payload_is_data_error() {
        let mut b = bytes(&sample(Shape::new(1, 1, 2, 2)));
        b[24..28].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(KeyTensor::read_kvt(&b[..]), Err(Error::Data(_))));
        b[24..28].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(KeyTensor::read_kvt(&b[..]), Err(Error::Data(_))));
    }

    #[test]
    fn nan_tensor_never_reaches_disk() {
        let t = KeyTensor { shape: Shape::matrix(1, 2), data: vec![1.0, f32::NAN] };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.kvt");
        assert!(matches!(t.save_kvt(&p), Err(Error::Validation(_))));
        assert!(KeyTensor::new(Shape::matrix(1, 2), vec![1.0, f32::NAN]).is_err());
    }

    #[test]
    fn slice_full_range_is_identity() {
        let t = sample(Shape::new(2, 2, 6, 3));
        assert_eq!(t.slice_seq(0, 6).unwrap(), t);
    }

    #[test]
    fn single_row_slice() {
        let t = sample(Shape::new(2, 2, 6, 3));
        for i in 0..6 {
            let s = t.slice_seq(i, i + 1).unwrap();
            assert_eq!(s.seq_len(), 1);
            for b in 0..2 {
                for h in 0..2 {
                    assert_eq!(s.row(b, h, 0), t.row(b, h, i));
                }
            }
        }
    }

    #[test]
    fn chained_slices_match_index_arithmetic() {
        let shape = Shape::new(2, 3, 7, 2);
        let t = sample(shape);
        let chained = t.slice_seq(0, 4).unwrap().slice_seq(2, 4).unwrap();
        // oracle: flat index of (b, h, i, j) in the source is ((b*H + h)*N + i)*D + j
        let mut expect = Vec::new();
        for b in 0..2 {
            for h in 0..3 {
                for i in 2..4 {
                    for j in 0..2 {
                        expect.push(t.data()[((b * 3 + h) * 7 + i) * 2 + j]);
                    }
                }
            }
        }
        assert_eq!(chained.data(), &expect[..]);
        assert_eq!(chained, t.slice_seq(2, 4).unwrap());
        assert_eq!(chained.shape(), Shape::new(2, 3, 2, 2));
    }

    #[test]
    fn slice_bounds() {
        let t = sample(Shape::new(1, 1, 4, 2));
        assert!(matches!(t.slice_seq(2, 2), Err(Error::Bounds(_))));
        assert!(matches!(t.slice_seq(3, 2), Err(Error::Bounds(_))));
        assert!(matches!(t.slice_seq(0, 5), Err(Error::Bounds(_))));
    }

    #[test]
    fn score_tensor_csv() {
        let s = ScoreTensor::new(1, 2, 2, vec![0.5, 1.0, 2.0, 3.25]).unwrap();
        let mut out = Vec::new();
        s.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "batch,head,token,score\n0,0,0,0.5\n0,0,1,1\n0,1,0,2\n0,1,1,3.25\n");
        let kt = s.to_key_tensor().unwrap();
        assert_eq!(kt.shape(), Shape::new(1, 2, 2, 1));
    }
}
