//! Binary tensor record: `b"CVT1"`, rank as u64 LE, each dim as u64 LE,
//! then `numel` little-endian f64 values.

use std::io::{self, Write};

use super::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"CVT1";

#[derive(Debug, thiserror::Error)]
#[error("malformed data at byte offset {offset}: {what}")]
pub struct FormatError {
    pub offset: usize,
    pub what: String,
}

/// Cursor over an in-memory buffer that reports the offset of every failure.
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn fail(&self, what: impl Into<String>) -> FormatError {
        FormatError { offset: self.pos, what: what.into() }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FormatError> {
        if self.remaining() < n {
            return Err(self.fail(format!("truncated {what}: need {n} bytes, {} left", self.remaining())));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u32(&mut self, what: &str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn write_tensor<W: Write>(out: &mut W, t: &Tensor) -> io::Result<()> {
    out.write_all(TENSOR_MAGIC)?;
    out.write_all(&(t.rank() as u64).to_le_bytes())?;
    for &d in t.shape() {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(r: &mut ByteReader<'_>) -> Result<Tensor, FormatError> {
    let start = r.offset();
    if r.take(4, "tensor magic")? != TENSOR_MAGIC {
        return Err(FormatError { offset: start, what: "bad tensor magic, expected CVT1".into() });
    }
    let rank = r.u64("tensor rank")?;
    if rank > 16 {
        return Err(r.fail(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut count: usize = 1;
    for _ in 0..rank {
        let d = r.u64("tensor dim")? as usize;
        if d == 0 {
            return Err(r.fail("zero tensor dimension"));
        }
        count = count
            .checked_mul(d)
            .filter(|c| c.checked_mul(8).is_some())
            .ok_or_else(|| r.fail("tensor element count overflows"))?;
        shape.push(d);
    }
    let bytes = r.take(count * 8, "tensor payload")?;
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Tensor::new(shape, data).expect("validated dims"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new([2], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"CVT1");
        assert_eq!(u64::from_le_bytes(buf[4..12].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(buf[12..20].try_into().unwrap()), 2);
        assert_eq!(buf.len(), 20 + 16);
    }

    #[test]
    fn truncation_reports_offset() {
        let t = Tensor::zeros([3, 3]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let err = read_tensor(&mut ByteReader::new(&buf[..40])).unwrap_err();
        assert_eq!(err.offset, 28);
        assert!(err.to_string().contains("offset 28"));
    }

    proptest! {
        #[test]
        fn roundtrip(shape in prop::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
            let t = Tensor::from_fn(shape, |i| (seed.wrapping_mul(i as u64 + 1) as f64).sin());
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            let mut r = ByteReader::new(&buf);
            prop_assert_eq!(read_tensor(&mut r).unwrap(), t);
            prop_assert_eq!(r.remaining(), 0);
        }
    }
}
