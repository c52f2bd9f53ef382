//! Named-tensor bundle with an optional threshold.
//!
//! Layout, little-endian: `SPGN`, u32 version, u32 entry count, then per entry
//! u16 name length, UTF-8 name, u8 dtype (0 = f32), u8 ndims, u64 dims and the
//! f32 payload; finally a u8 presence flag and an f64 threshold.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SPGN";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor<f32>)>,
    pub phi: Option<f64>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::arg(format!("entry name of {} bytes", name.len())));
        }
        if self.get(&name).is_some() {
            return Err(Error::arg(format!("duplicate checkpoint entry {name}")));
        }
        self.entries.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name)
            .ok_or_else(|| Error::Data(format!("checkpoint has no entry {name}")))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.push(self.phi.is_some() as u8);
        out.extend_from_slice(&self.phi.unwrap_or(0.0).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format(0, "bad magic, expected SPGN"));
        }
        let at = r.pos;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(at, format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let at = r.pos;
            let len = u16::from_le_bytes(r.array()?) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(at, "entry name is not UTF-8"))?
                .to_string();
            let at = r.pos;
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::format(at, format!("unknown dtype tag {dtype}")));
            }
            let ndims = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndims);
            for _ in 0..ndims {
                let d = u64::from_le_bytes(r.array()?);
                shape.push(usize::try_from(d).map_err(|_| Error::format(r.pos, "dimension too large"))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::format(r.pos, format!("payload of {name} is truncated")))?;
            let data = r
                .take(numel * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::format(at, e.to_string()))?;
            ck.insert(name, t).map_err(|e| Error::format(at, e.to_string()))?;
        }
        let flag = r.take(1)?[0];
        let phi = f64::from_le_bytes(r.array()?);
        ck.phi = match flag {
            0 => None,
            1 => Some(phi),
            f => return Err(Error::format(r.pos - 9, format!("bad threshold flag {f}"))),
        };
        if r.remaining() != 0 {
            return Err(Error::format(r.pos, "trailing bytes"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(self.pos, format!("expected {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
}

/// A `u64` as four exact 16-bit chunks, low first.
pub fn u64_tensor(v: u64) -> Tensor<f32> {
    let parts = (0..4).map(|i| ((v >> (16 * i)) & 0xffff) as f32).collect();
    Tensor::new(&[4], parts).expect("four parts")
}

pub fn tensor_u64(t: &Tensor<f32>) -> Result<u64> {
    if t.shape() != [4] || t.data().iter().any(|&p| p.fract() != 0.0 || !(0.0..65536.0).contains(&p)) {
        return Err(Error::Data(format!("not a packed u64: {:?}", t.data())));
    }
    Ok(t.data()
        .iter()
        .enumerate()
        .fold(0u64, |acc, (i, &p)| acc | ((p as u64) << (16 * i))))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert("a/w", Tensor::new(&[2, 3], vec![1.0, -2.0, 0.5, f32::MIN_POSITIVE, 3e9, -0.0]).unwrap())
            .unwrap();
        ck.insert("b", Tensor::from_f64(&[1], &[0.25]).unwrap()).unwrap();
        ck.phi = Some(0.123456789);
        ck
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let bytes = sample().to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.to_bytes(), bytes);
        let mut none = sample();
        none.phi = None;
        assert_eq!(Checkpoint::from_bytes(&none.to_bytes()).unwrap().phi, None);
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"SPGN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()), 3);
        assert_eq!(&bytes[14..17], b"a/w");
        assert_eq!(&bytes[17..19], &[0, 2]);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        let mut dup = Checkpoint::new();
        dup.insert("x", Tensor::zeros(&[1])).unwrap();
        assert!(dup.insert("x", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn packed_u64() {
        for v in [0, 1, 7, u64::MAX, 0xdead_beef_0123_4567] {
            assert_eq!(tensor_u64(&u64_tensor(v)).unwrap(), v);
        }
    }
}
