//! Dense row-major `f32` tensors, the attention primitive, and the `ZTT1`
//! raw tensor dump format.
//!
//! Attention scores are exposed to callers *before* the softmax through the
//! [`ScoreTap`] hook, which is the only place filtering is allowed to act.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Magic bytes of the raw tensor dump format.
pub const ZTT_MAGIC: &[u8; 4] = b"ZTT1";

/// Dense row-major `f32` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "shape must be non-empty with positive dims, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f32) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; n])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            Some(i) => Err(Error::Numeric(format!(
                "{what}: non-finite value {} at flat index {i}",
                self.data[i]
            ))),
            None => Ok(()),
        }
    }

    pub fn ensure_shape(&self, expected: &[usize], what: &str) -> Result<()> {
        if self.shape != expected {
            return Err(Error::Dimension(format!(
                "{what}: expected shape {expected:?}, got {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        other.ensure_shape(&self.shape, "elementwise operand")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `a * x + b * y`, elementwise.
    pub fn axpby(a: f32, x: &Tensor, b: f32, y: &Tensor) -> Result<Tensor> {
        x.zip_map(y, |xv, yv| a * xv + b * yv)
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.map(|x| x * s)
    }

    /// Sum of squared differences accumulated in `f64`.
    pub fn squared_distance(&self, other: &Tensor) -> Result<f64> {
        other.ensure_shape(&self.shape, "distance operand")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = f64::from(a) - f64::from(b);
                d * d
            })
            .sum())
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || rhs.rank() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(Error::Dimension(format!(
                "matmul of {:?} by {:?}",
                self.shape, rhs.shape
            )));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let row = &self.data[i * k..(i + 1) * k];
            let dst = &mut out[i * n..(i + 1) * n];
            for (p, &a) in row.iter().enumerate() {
                let src = &rhs.data[p * n..(p + 1) * n];
                for (d, &b) in dst.iter_mut().zip(src) {
                    *d += a * b;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn write_ztt<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(ZTT_MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_ztt_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(8 + 4 * self.rank() + 4 * self.len());
        self.write_ztt(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_ztt_bytes(bytes: &[u8]) -> Result<Tensor> {
        let mut cur = ByteCursor::new(bytes);
        let magic = cur.take(4)?;
        if magic != ZTT_MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}, expected ZTT1")));
        }
        let rank = cur.u32()? as usize;
        if rank == 0 {
            return Err(Error::format(4, "rank must be positive"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let data = cur.f32s(n)?;
        if !cur.is_at_end() {
            return Err(Error::format(cur.offset(), "trailing bytes after payload"));
        }
        Tensor::new(shape, data)
    }

    pub fn save_ztt(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_ztt(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load_ztt(path: &Path) -> Result<Tensor> {
        let mut bytes = Vec::new();
        File::open(path)
            .map(BufReader::new)
            .and_then(|mut r| r.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Tensor::from_ztt_bytes(&bytes)
    }
}

/// Little-endian reader over a byte slice that reports offsets on failure.
pub(crate) struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn is_at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::format(
                self.pos,
                format!(
                    "truncated: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            )),
        }
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| {
            Error::format(self.pos, "payload size overflows")
        })?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

/// A pre-softmax attention score tensor `(heads, n_q, n_k)` and where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub scores: Tensor,
    pub layer_id: usize,
    pub timestep: usize,
    /// 1-based resampling iteration.
    pub resample_index: usize,
}

impl AttentionMap {
    pub fn new(scores: Tensor, layer_id: usize, timestep: usize, resample_index: usize) -> Result<Self> {
        if scores.rank() != 3 {
            return Err(Error::Dimension(format!(
                "attention map must be (heads, n_q, n_k), got {:?}",
                scores.shape()
            )));
        }
        if resample_index == 0 {
            return Err(Error::Contract("resample_index is 1-based".into()));
        }
        Ok(Self {
            scores,
            layer_id,
            timestep,
            resample_index,
        })
    }

    /// File name used for per-step map dumps.
    pub fn dump_name(&self) -> String {
        format!(
            "layer{}_t{}_r{}.ztt",
            self.layer_id, self.timestep, self.resample_index
        )
    }
}

/// Hook that sees the raw score tensor `S = q kᵀ / √d` and returns the
/// scores to be used in its place.
pub trait ScoreTap {
    fn tap(&mut self, scores: Tensor) -> Result<Tensor>;
}

impl<F> ScoreTap for F
where
    F: FnMut(Tensor) -> Result<Tensor>,
{
    fn tap(&mut self, scores: Tensor) -> Result<Tensor> {
        self(scores)
    }
}

/// Numerically stable softmax over the last axis. Accumulates in `f64`.
pub fn softmax_rows(s: &Tensor) -> Result<Tensor> {
    s.ensure_finite("softmax input")?;
    let n = s.last_dim();
    let mut out = vec![0.0f32; s.len()];
    let mut exps = vec![0.0f64; n];
    for (row, dst) in s.data().chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for (e, &x) in exps.iter_mut().zip(row) {
            *e = (f64::from(x) - f64::from(max)).exp();
            sum += *e;
        }
        for (d, &e) in dst.iter_mut().zip(&exps) {
            *d = (e / sum) as f32;
        }
    }
    Tensor::new(s.shape().to_vec(), out)
}

/// Raw scaled dot-product scores `q kᵀ / √d` for `(h, n_q, d)` by `(h, n_k, d)`.
pub fn attention_scores(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    if q.rank() != 3 || k.rank() != 3 {
        return Err(Error::Dimension(format!(
            "q and k must be rank 3, got {:?} and {:?}",
            q.shape(),
            k.shape()
        )));
    }
    let (h, nq, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let nk = k.shape()[1];
    if k.shape()[0] != h || k.shape()[2] != d {
        return Err(Error::Dimension(format!(
            "k shape {:?} incompatible with q shape {:?}",
            k.shape(),
            q.shape()
        )));
    }
    let scale = 1.0 / (d as f32).sqrt();
    let mut out = vec![0.0f32; h * nq * nk];
    for head in 0..h {
        let qh = &q.data()[head * nq * d..(head + 1) * nq * d];
        let kh = &k.data()[head * nk * d..(head + 1) * nk * d];
        let oh = &mut out[head * nq * nk..(head + 1) * nq * nk];
        for (qi, orow) in qh.chunks_exact(d).zip(oh.chunks_exact_mut(nk)) {
            for (kj, o) in kh.chunks_exact(d).zip(orow.iter_mut()) {
                let dot: f32 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                *o = dot * scale;
            }
        }
    }
    Tensor::new(vec![h, nq, nk], out)
}

/// Scaled dot-product attention with an optional score tap and map override.
///
/// The tap receives the computed scores first; when an override is present
/// its scores replace whatever the tap returned.
pub fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    override_map: Option<&AttentionMap>,
    tap: Option<&mut dyn ScoreTap>,
) -> Result<Tensor> {
    q.ensure_finite("query")?;
    k.ensure_finite("key")?;
    v.ensure_finite("value")?;
    if q.shape().get(2).copied().unwrap_or(0) == 0 {
        return Err(Error::Dimension("head dimension must be positive".into()));
    }
    if v.rank() != 3 || v.shape()[0] != k.shape()[0] || v.shape()[1] != k.shape()[1] {
        return Err(Error::Dimension(format!(
            "v shape {:?} incompatible with k shape {:?}",
            v.shape(),
            k.shape()
        )));
    }
    let mut scores = attention_scores(q, k)?;
    let expected = scores.shape().to_vec();
    if let Some(tap) = tap {
        scores = tap.tap(scores)?;
        scores.ensure_shape(&expected, "tapped scores")?;
    }
    let probs = match override_map {
        Some(m) => {
            m.scores.ensure_shape(&expected, "override map")?;
            softmax_rows(&m.scores)?
        }
        None => softmax_rows(&scores)?,
    };
    weighted_values(&probs, v)
}

/// `probs (h, n_q, n_k) · v (h, n_k, d_v) -> (h, n_q, d_v)`.
pub fn weighted_values(probs: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (h, nq, nk) = (probs.shape()[0], probs.shape()[1], probs.shape()[2]);
    let dv = v.shape()[2];
    if v.shape()[0] != h || v.shape()[1] != nk {
        return Err(Error::Dimension(format!(
            "values {:?} incompatible with weights {:?}",
            v.shape(),
            probs.shape()
        )));
    }
    let mut out = vec![0.0f32; h * nq * dv];
    for head in 0..h {
        let ph = &probs.data()[head * nq * nk..(head + 1) * nq * nk];
        let vh = &v.data()[head * nk * dv..(head + 1) * nk * dv];
        let oh = &mut out[head * nq * dv..(head + 1) * nq * dv];
        for (prow, orow) in ph.chunks_exact(nk).zip(oh.chunks_exact_mut(dv)) {
            for (&p, vrow) in prow.iter().zip(vh.chunks_exact(dv)) {
                for (o, &x) in orow.iter_mut().zip(vrow) {
                    *o += p * x;
                }
            }
        }
    }
    Tensor::new(vec![h, nq, dv], out)
}
