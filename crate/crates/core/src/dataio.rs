//! Binary feature and label files, CSV import, and the synthetic
//! Gaussian-mixture generator.
//!
//! All multi-byte values are little-endian.
//!
//! Features (`CDCF`): magic, `u32` version, `u64` rows, `u64` columns, then
//! `rows × columns` `f32` values row-major.
//!
//! Labels (`CDCL`): magic, `u64` count, then `count` `u32` labels.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{standard_normal, Matrix, RngState};
use crate::protoinit::orthogonalize_rows;

pub const FEATURE_MAGIC: &[u8; 4] = b"CDCF";
pub const LABEL_MAGIC: &[u8; 4] = b"CDCL";
pub const FEATURE_VERSION: u32 = 1;

/// Little-endian append-only encoder.
#[derive(Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.f64(x);
        }
    }

    pub fn matrix(&mut self, m: &Matrix) {
        self.u64(m.rows() as u64);
        self.u64(m.cols() as u64);
        for &x in m.data() {
            self.f64(x);
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Little-endian decoder that reports the byte offset of any failure.
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(
                self.offset(),
                format!("truncated {what}: expected {n} bytes, found {}", self.remaining()),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != want {
            return Err(Error::format(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(want)
                ),
            ));
        }
        Ok(())
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    /// Reads a `u64` length that must fit in the remaining payload at
    /// `elem_size` bytes per element.
    pub fn len(&mut self, elem_size: usize, what: &str) -> Result<usize> {
        let at = self.offset();
        let n = self.u64(what)?;
        let max = (self.remaining() / elem_size.max(1)) as u64;
        if n > max {
            return Err(Error::format(
                at,
                format!("{what} claims {n} elements but only {max} fit in the remaining bytes"),
            ));
        }
        Ok(n as usize)
    }

    pub fn f64s(&mut self, what: &str) -> Result<Vec<f64>> {
        let n = self.len(8, what)?;
        (0..n).map(|_| self.f64(what)).collect()
    }

    pub fn matrix(&mut self, what: &str) -> Result<Matrix> {
        let at = self.offset();
        let rows = self.u64(what)?;
        let cols = self.u64(what)?;
        let count = rows
            .checked_mul(cols)
            .filter(|&c| c <= (self.remaining() / 8) as u64)
            .ok_or_else(|| Error::format(at, format!("{what}: {rows}x{cols} exceeds the remaining payload")))?;
        let data = (0..count).map(|_| self.f64(what)).collect::<Result<Vec<_>>>()?;
        Matrix::new(rows as usize, cols as usize, data)
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::format(
                self.offset(),
                format!("{} trailing bytes", self.remaining()),
            ));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_features(m: &Matrix) -> Result<Vec<u8>> {
    m.require_finite("features")?;
    let mut w = ByteWriter::new();
    w.bytes(FEATURE_MAGIC);
    w.u32(FEATURE_VERSION);
    w.u64(m.rows() as u64);
    w.u64(m.cols() as u64);
    for &v in m.data() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::invalid(format!("feature value {v} overflows f32")));
        }
        w.f32(f);
    }
    Ok(w.finish())
}

pub fn decode_features(bytes: &[u8]) -> Result<Matrix> {
    let mut r = ByteReader::new(bytes);
    r.magic(FEATURE_MAGIC)?;
    let at = r.offset();
    let version = r.u32("version")?;
    if version != FEATURE_VERSION {
        return Err(Error::format(at, format!("unsupported feature file version {version}")));
    }
    let rows = r.u64("row count")?;
    let cols = r.u64("column count")?;
    let payload_at = r.offset();
    let expected = rows
        .checked_mul(cols)
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| Error::format(payload_at, "feature dimensions overflow"))?;
    if expected != r.remaining() as u64 {
        return Err(Error::format(
            payload_at,
            format!(
                "payload length mismatch: expected {expected} bytes for {rows}x{cols}, found {}",
                r.remaining()
            ),
        ));
    }
    let raw = r.take(expected as usize, "payload")?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Matrix::new(rows as usize, cols as usize, data)
}

pub fn write_features(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    write_file(path.as_ref(), &encode_features(m)?)
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Matrix> {
    decode_features(&read_file(path.as_ref())?)
}

pub fn encode_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut w = ByteWriter::new();
    w.bytes(LABEL_MAGIC);
    w.u64(labels.len() as u64);
    for &l in labels {
        let v = u32::try_from(l).map_err(|_| Error::invalid(format!("label {l} exceeds u32")))?;
        w.u32(v);
    }
    Ok(w.finish())
}

pub fn decode_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = ByteReader::new(bytes);
    r.magic(LABEL_MAGIC)?;
    let n = r.u64("label count")?;
    let payload_at = r.offset();
    let expected = n
        .checked_mul(4)
        .ok_or_else(|| Error::format(payload_at, "label count overflows"))?;
    if expected != r.remaining() as u64 {
        return Err(Error::format(
            payload_at,
            format!(
                "payload length mismatch: expected {expected} bytes for {n} labels, found {}",
                r.remaining()
            ),
        ));
    }
    Ok(r.take(expected as usize, "labels")?
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect())
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    write_file(path.as_ref(), &encode_labels(labels)?)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    decode_labels(&read_file(path.as_ref())?)
}

/// Checks that a label file belongs to a feature file.
pub fn check_companion(features: &Matrix, labels: &[usize]) -> Result<()> {
    if features.rows() != labels.len() {
        return Err(Error::Validation(format!(
            "{} labels for {} feature rows",
            labels.len(),
            features.rows()
        )));
    }
    Ok(())
}

/// Reads a CSV with header `d0,…,d{D-1}` and an optional trailing `label`
/// column.
pub fn read_csv(path: impl AsRef<Path>) -> Result<(Matrix, Option<Vec<usize>>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<(Matrix, Option<Vec<usize>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::invalid(format!("csv header: {e}")))?
        .clone();
    let has_label = headers.iter().next_back() == Some("label");
    let d = headers.len() - has_label as usize;
    for (j, h) in headers.iter().take(d).enumerate() {
        if h != format!("d{j}") {
            return Err(Error::invalid(format!("csv column {j} is {h:?}, expected \"d{j}\"")));
        }
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::invalid(format!("csv row {}: {e}", line + 1)))?;
        let parse_err =
            |j: usize, v: &str| Error::invalid(format!("csv row {}, column {j}: cannot parse {v:?}", line + 1));
        for (j, v) in record.iter().take(d).enumerate() {
            let x: f64 = v.parse().map_err(|_| parse_err(j, v))?;
            if !x.is_finite() {
                return Err(parse_err(j, v));
            }
            data.push(x);
        }
        if has_label {
            let v = &record[d];
            labels.push(v.parse().map_err(|_| parse_err(d, v))?);
        }
    }
    let rows = data.len() / d.max(1);
    Ok((Matrix::new(rows, d, data)?, has_label.then_some(labels)))
}

/// Parameters of an isotropic Gaussian mixture with equidistant centers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub n: usize,
    pub d: usize,
    pub c: usize,
    /// Distance between centers in units of the within-component standard
    /// deviation (which is 1).
    pub separation: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    pub features: Matrix,
    pub labels: Vec<usize>,
    /// `c × d` component means.
    pub centers: Matrix,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.c < 2 || self.n < self.c {
            return Err(Error::invalid(format!(
                "mixture needs n >= c >= 2 (n = {}, c = {})",
                self.n, self.c
            )));
        }
        if self.d == 0 {
            return Err(Error::invalid("mixture dimension must be positive"));
        }
        if !(self.separation >= 0.0) || !self.separation.is_finite() {
            return Err(Error::invalid("separation must be finite and non-negative"));
        }
        Ok(())
    }

    /// Component means: scaled orthonormal directions when `c ≤ d`, giving
    /// every pair of centers exactly `separation` apart; random unit
    /// directions otherwise.
    pub fn centers(&self) -> Result<Matrix> {
        self.validate()?;
        let mut rng = RngState::new(self.seed).fork(1);
        let mut dirs = loop {
            let raw = Matrix::new(
                self.c,
                self.d,
                (0..self.c * self.d).map(|_| standard_normal(&mut rng)).collect(),
            )?;
            if self.c > self.d {
                break raw;
            }
            let ortho = orthogonalize_rows(&raw);
            if !ortho.skipped {
                break ortho.matrix;
            }
        };
        let radius = self.separation / std::f64::consts::SQRT_2;
        for i in 0..self.c {
            let row = dirs.row_mut(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in row.iter_mut() {
                *v *= radius / norm;
            }
        }
        Ok(dirs)
    }
}

/// Samples a balanced mixture; identical specs give identical output.
pub fn gen_mixture(spec: &MixtureSpec) -> Result<Mixture> {
    let centers = spec.centers()?;
    let base = RngState::new(spec.seed);
    let mut labels: Vec<usize> = (0..spec.n).map(|i| i % spec.c).collect();
    labels.shuffle(&mut base.fork(2));
    let mut noise = base.fork(3);
    let mut data = Vec::with_capacity(spec.n * spec.d);
    for &l in &labels {
        for &m in centers.row(l) {
            data.push(m + standard_normal(&mut noise));
        }
    }
    Ok(Mixture {
        features: Matrix::new(spec.n, spec.d, data)?,
        labels,
        centers,
    })
}
