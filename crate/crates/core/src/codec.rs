//! Little-endian binary encoding of matrices, vectors and scalars.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::partition::RegionId;

#[derive(Default, Debug, Clone)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn region(&mut self, id: RegionId) -> &mut Self {
        self.u32(id.level).u32(id.index)
    }

    /// Row count, column count, then column-major entries.
    pub fn matrix(&mut self, m: &DMatrix<f64>) -> &mut Self {
        self.u64(m.nrows() as u64).u64(m.ncols() as u64);
        for v in m.as_slice() {
            self.f64(*v);
        }
        self
    }

    pub fn vector(&mut self, v: &DVector<f64>) -> &mut Self {
        self.u64(v.len() as u64);
        for x in v.iter() {
            self.f64(*x);
        }
        self
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Decoder { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::invalid(format!(
                "truncated payload: need {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn region(&mut self) -> Result<RegionId> {
        Ok(RegionId::new(self.u32()?, self.u32()?))
    }

    fn len_field(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > 1u64 << 40 {
            return Err(Error::invalid(format!("implausible length {n}")));
        }
        Ok(n as usize)
    }

    pub fn matrix(&mut self) -> Result<DMatrix<f64>> {
        let r = self.len_field()?;
        let c = self.len_field()?;
        let n = r
            .checked_mul(c)
            .ok_or_else(|| Error::invalid("matrix size overflow"))?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::invalid("matrix size overflow"))?)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        Ok(DMatrix::from_vec(r, c, data))
    }

    pub fn vector(&mut self) -> Result<DVector<f64>> {
        let n = self.len_field()?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::invalid("vector size overflow"))?)?;
        Ok(DVector::from_iterator(
            n,
            raw.chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))),
        ))
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len_field()?;
        self.take(n)
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn expect_done(&self) -> Result<()> {
        if self.is_done() {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "{} trailing bytes in payload",
                self.buf.len() - self.pos
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let m = DMatrix::from_fn(3, 2, |i, j| i as f64 - 0.5 * j as f64 + 1e-300);
        let v = DVector::from_vec(vec![f64::MIN_POSITIVE, -0.0, 7.25]);
        let mut e = Encoder::new();
        e.u8(9).u32(7).region(RegionId::new(3, 11)).matrix(&m).vector(&v).f64(f64::NAN).bytes(b"ok");
        let buf = e.finish();
        let mut d = Decoder::new(&buf);
        assert_eq!(d.u8().unwrap(), 9);
        assert_eq!(d.u32().unwrap(), 7);
        assert_eq!(d.region().unwrap(), RegionId::new(3, 11));
        assert_eq!(d.matrix().unwrap(), m);
        let back = d.vector().unwrap();
        assert_eq!(back[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back, v);
        assert!(d.f64().unwrap().is_nan());
        assert_eq!(d.bytes().unwrap(), b"ok");
        d.expect_done().unwrap();
    }

    #[test]
    fn truncation_detected() {
        let mut e = Encoder::new();
        e.matrix(&DMatrix::from_element(4, 4, 1.0));
        let buf = e.finish();
        assert!(Decoder::new(&buf[..buf.len() - 3]).matrix().is_err());
        let empty = DMatrix::<f64>::zeros(0, 5);
        let mut e = Encoder::new();
        e.matrix(&empty);
        assert_eq!(Decoder::new(&e.finish()).matrix().unwrap().shape(), (0, 5));
    }
}
