//! Named-tensor binary format.
//!
//! ```text
//! magic "CLTB" | version u32 | count u32
//! per tensor: name_len u32 | name (UTF-8) | dtype u8 | ndim u8 | dims u32 × ndim | values
//! ```
//!
//! All integers and values are little-endian. `dtype` is 0 for `f32` and 1
//! for `f64`. Checkpoints store `f32`.

use clare_core::Tensor;

pub const MAGIC: &[u8; 4] = b"CLTB";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BlobError {
    #[error("not a tensor blob (bad magic)")]
    BadMagic,
    #[error("unsupported blob version {0}")]
    Version(u32),
    #[error("blob truncated at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes after last tensor")]
    Trailing(usize),
    #[error("tensor name is not UTF-8")]
    Name,
    #[error("unknown dtype tag {0}")]
    Dtype(u8),
    #[error("duplicate tensor name {0}")]
    Duplicate(String),
}

pub fn encode<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>, dtype: Dtype) -> Vec<u8> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dtype.tag());
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match dtype {
            Dtype::F32 => out.extend(t.to_f32_le_bytes()),
            Dtype::F64 => out.extend(t.to_f64_le_bytes()),
        }
    }
    out
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], BlobError> {
        let end = self.pos.checked_add(n).ok_or(BlobError::Truncated(self.pos))?;
        if end > self.buf.len() {
            return Err(BlobError::Truncated(self.buf.len()));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, BlobError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32, BlobError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, BlobError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64, BlobError> {
        Ok(f64::from_bits(self.u64()?))
    }
}

/// Decodes every tensor, in file order, as `f64`.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, BlobError> {
    let mut r = Reader::new(bytes);
    if r.take(4).map_err(|_| BlobError::BadMagic)? != MAGIC {
        return Err(BlobError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(BlobError::Version(version));
    }
    let count = r.u32()? as usize;
    let mut out: Vec<(String, Tensor)> = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| BlobError::Name)?.to_string();
        let dtype = match r.u8()? {
            0 => Dtype::F32,
            1 => Dtype::F64,
            t => return Err(BlobError::Dtype(t)),
        };
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(dtype.width()).ok_or(BlobError::Truncated(r.pos))?)?;
        let data: Vec<f64> = match dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        if out.iter().any(|(n, _)| *n == name) {
            return Err(BlobError::Duplicate(name));
        }
        let t = Tensor::new(shape, data).map_err(|_| BlobError::Truncated(r.pos))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(BlobError::Trailing(bytes.len() - r.pos));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            ("a".into(), Tensor::matrix(2, 2, vec![1.0, -2.5, 3.25, 0.0]).unwrap()),
            ("b.c".into(), Tensor::vector(vec![0.1, 0.2, 0.3])),
        ]
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let s = sample();
        let bytes = encode(s.iter().map(|(n, t)| (n.as_str(), t)), Dtype::F64);
        assert_eq!(decode(&bytes).unwrap(), s);
    }

    #[test]
    fn f32_round_trip_is_idempotent() {
        let s = sample();
        let once = encode(s.iter().map(|(n, t)| (n.as_str(), t)), Dtype::F32);
        let back = decode(&once).unwrap();
        let twice = encode(back.iter().map(|(n, t)| (n.as_str(), t)), Dtype::F32);
        assert_eq!(once, twice);
        assert_eq!(back[0].1.data()[1], -2.5);
    }

    #[test]
    fn truncation_and_garbage_are_reported() {
        let s = sample();
        let bytes = encode(s.iter().map(|(n, t)| (n.as_str(), t)), Dtype::F32);
        for cut in [3, 10, bytes.len() - 1] {
            assert!(decode(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert_eq!(decode(&extra), Err(BlobError::Trailing(1)));
        let mut bad = bytes;
        bad[0] = b'X';
        assert_eq!(decode(&bad), Err(BlobError::BadMagic));
    }
}
