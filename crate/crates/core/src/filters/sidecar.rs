//! Binary model sidecar.
//!
//! Layout (little-endian; integers `u32`, model reals `f32`, the two
//! method parameters `f64`):
//!
//! ```text
//! magic "OODF" | version | method tag (u8) | k | percentile | shrinkage | pooled (u8) | dim
//! centroid_l2: dim reals
//! knn:         rows, rows*dim reals
//! mds:         classes, classes * (class_id, dim reals), dim*dim reals (precision)
//! scale:       rows, rows*dim reals (weight), rows reals (bias)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{FilterMethod, FilterModel, FilterSpec, FilterState};
use crate::error::{Error, Result};
use crate::Scalar;

const MAGIC: &[u8; 4] = b"OODF";
pub const SIDECAR_VERSION: u32 = 1;

struct Writer<'a, W: Write>(&'a mut W);

impl<W: Write> Writer<'_, W> {
    fn u8(&mut self, v: u8) -> Result<()> {
        Ok(self.0.write_all(&[v])?)
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Sidecar(format!("{v} does not fit in u32")))?;
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn real<T: Scalar>(&mut self, v: T) -> Result<()> {
        let f = v.to_f32().unwrap_or(f32::NAN);
        Ok(self.0.write_all(&f.to_le_bytes())?)
    }
    fn reals<T: Scalar>(&mut self, v: &[T]) -> Result<()> {
        v.iter().try_for_each(|&x| self.real(x))
    }
}

pub fn write_model<T: Scalar, W: Write>(model: &FilterModel<T>, mut out: W) -> Result<()> {
    let mut w = Writer(&mut out);
    w.0.write_all(MAGIC)?;
    w.u32(SIDECAR_VERSION as usize)?;
    let spec = model.spec();
    w.u8(spec.method.tag())?;
    w.u32(spec.k)?;
    w.0.write_all(&spec.percentile.to_le_bytes())?;
    w.0.write_all(&spec.shrinkage.to_le_bytes())?;
    w.u8(spec.pooled as u8)?;
    w.u32(model.dim())?;
    match model.state() {
        FilterState::Logits => {}
        FilterState::Centroid(c) => w.reals(c)?,
        FilterState::Knn { bank, rows } => {
            w.u32(*rows)?;
            w.reals(bank)?;
        }
        FilterState::Mds { means, precision } => {
            w.u32(means.len())?;
            for (class, mu) in means {
                w.u32(*class)?;
                w.reals(mu)?;
            }
            w.reals(precision)?;
        }
        FilterState::Scale { weight, bias } => {
            w.u32(bias.len())?;
            w.reals(weight)?;
            w.reals(bias)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn encode_model<T: Scalar>(model: &FilterModel<T>) -> Vec<u8> {
    let mut buf = Vec::new();
    write_model(model, &mut buf).expect("in-memory write");
    buf
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.0.len() < n {
            return Err(Error::Sidecar("truncated".into()));
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        b.copy_from_slice(self.take(8)?);
        Ok(f64::from_le_bytes(b))
    }
    fn reals<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Sidecar("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| T::of_f32(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect())
    }
}

pub fn decode_model<T: Scalar>(bytes: &[u8]) -> Result<FilterModel<T>> {
    let mut r = Reader(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::Sidecar("bad magic".into()));
    }
    let version = r.u32()?;
    if version != SIDECAR_VERSION as usize {
        return Err(Error::Sidecar(format!("unsupported version {version}")));
    }
    let method = FilterMethod::from_tag(r.u8()?).ok_or_else(|| Error::Sidecar("unknown method tag".into()))?;
    let spec = FilterSpec {
        method,
        k: r.u32()?,
        percentile: r.f64()?,
        shrinkage: r.f64()?,
        pooled: r.u8()? != 0,
    };
    let dim = r.u32()?;
    let state = match method {
        FilterMethod::Msp | FilterMethod::Mls | FilterMethod::Ebo => FilterState::Logits,
        FilterMethod::CentroidL2 => FilterState::Centroid(r.reals(dim)?),
        FilterMethod::Knn => {
            let rows = r.u32()?;
            FilterState::Knn { bank: r.reals(rows * dim)?, rows }
        }
        FilterMethod::Mds => {
            let classes = r.u32()?;
            let mut means = Vec::with_capacity(classes.min(1 << 16));
            for _ in 0..classes {
                let class = r.u32()?;
                means.push((class, r.reals(dim)?));
            }
            FilterState::Mds { means, precision: r.reals(dim * dim)? }
        }
        FilterMethod::Scale => {
            let rows = r.u32()?;
            FilterState::Scale { weight: r.reals(rows * dim)?, bias: r.reals(rows)? }
        }
    };
    if !r.0.is_empty() {
        return Err(Error::Sidecar(format!("{} trailing bytes", r.0.len())));
    }
    FilterModel::from_parts(spec, dim, state)
}

pub fn read_model<T: Scalar, R: Read>(mut input: R) -> Result<FilterModel<T>> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    decode_model(&buf)
}

pub fn save_model<T: Scalar>(path: impl AsRef<Path>, model: &FilterModel<T>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_model(model)).map_err(Error::file(path))
}

pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<FilterModel<T>> {
    let path = path.as_ref();
    decode_model(&std::fs::read(path).map_err(Error::file(path))?)
}

/// Rounds a model through the sidecar encoding, so in-process scores
/// match those of a model reloaded from disk.
pub fn quantize<T: Scalar>(model: &FilterModel<T>) -> Result<FilterModel<T>> {
    decode_model(&encode_model(model))
}
