//! RNTB tensor blob format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "RNTB"
//! version  u32      1
//! dtype    u8       0 = f32, 1 = f64, 2 = u8
//! ndim     u32
//! dims     ndim x u32
//! payload  product(dims) elements, raw little-endian
//! ```
//!
//! Round trips are bit-exact: the payload stores raw IEEE-754 bit patterns.

use crate::error::{Error, Result};
use crate::tensor::{MaskTensor, Shape, Tensor};
use std::io::{Read, Write};

const MAGIC: [u8; 4] = *b"RNTB";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum BlobData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl BlobData {
    pub fn len(&self) -> usize {
        match self {
            BlobData::F32(v) => v.len(),
            BlobData::F64(v) => v.len(),
            BlobData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype_tag(&self) -> u8 {
        match self {
            BlobData::F32(_) => 0,
            BlobData::F64(_) => 1,
            BlobData::U8(_) => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub dims: Vec<u32>,
    pub data: BlobData,
}

impl Blob {
    pub fn new(dims: Vec<u32>, data: BlobData) -> Result<Self> {
        let numel: u64 = dims.iter().map(|&d| d as u64).product();
        if numel != data.len() as u64 {
            return Err(Error::Format(format!(
                "blob dims {:?} imply {} elements, payload has {}",
                dims,
                numel,
                data.len()
            )));
        }
        Ok(Blob { dims, data })
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        Blob {
            dims: vec![s.n as u32, s.c as u32, s.h as u32, s.w as u32],
            data: BlobData::F64(t.data().to_vec()),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        if self.dims.len() != 4 {
            return Err(Error::Format(format!(
                "expected 4-dim tensor blob, got {} dims",
                self.dims.len()
            )));
        }
        let shape = Shape::new(
            self.dims[0] as usize,
            self.dims[1] as usize,
            self.dims[2] as usize,
            self.dims[3] as usize,
        );
        match &self.data {
            BlobData::F64(v) => Tensor::from_vec(shape, v.clone()),
            other => Err(Error::Format(format!(
                "expected f64 payload for tensor blob, got dtype {}",
                other.dtype_tag()
            ))),
        }
    }

    pub fn from_mask(m: &MaskTensor) -> Self {
        Blob {
            dims: vec![m.n as u32, m.h as u32, m.w as u32],
            data: BlobData::U8(m.data().to_vec()),
        }
    }

    /// Encode a u64 (e.g. an iteration counter or RNG state) as a u8[8] blob.
    pub fn from_u64(v: u64) -> Self {
        Blob {
            dims: vec![8],
            data: BlobData::U8(v.to_le_bytes().to_vec()),
        }
    }

    pub fn to_u64(&self) -> Result<u64> {
        match &self.data {
            BlobData::U8(b) if b.len() == 8 => {
                Ok(u64::from_le_bytes(b.as_slice().try_into().unwrap()))
            }
            _ => Err(Error::Format("expected u8[8] blob".into())),
        }
    }

    pub fn from_text(s: &str) -> Self {
        Blob {
            dims: vec![s.len() as u32],
            data: BlobData::U8(s.as_bytes().to_vec()),
        }
    }

    pub fn to_text(&self) -> Result<String> {
        match &self.data {
            BlobData::U8(b) => String::from_utf8(b.clone())
                .map_err(|_| Error::Format("blob payload is not valid utf-8".into())),
            _ => Err(Error::Format("expected u8 blob for text".into())),
        }
    }

    /// Serialized size in bytes.
    pub fn byte_len(&self) -> u64 {
        let elem = match self.data {
            BlobData::F32(_) => 4,
            BlobData::F64(_) => 8,
            BlobData::U8(_) => 1,
        };
        4 + 4 + 1 + 4 + 4 * self.dims.len() as u64 + elem * self.data.len() as u64
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&[self.data.dtype_tag()])?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for &d in &self.dims {
            w.write_all(&d.to_le_bytes())?;
        }
        match &self.data {
            BlobData::F32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            BlobData::F64(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            BlobData::U8(v) => w.write_all(v)?,
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(Error::Format(format!(
                "bad blob magic {:?}, expected \"RNTB\"",
                magic
            )));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported blob version {version}")));
        }
        let mut dtype = [0u8; 1];
        r.read_exact(&mut dtype)?;
        let ndim = read_u32(r)? as usize;
        if ndim > 8 {
            return Err(Error::Format(format!("implausible blob ndim {ndim}")));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u32(r)?);
        }
        let numel: u64 = dims.iter().map(|&d| d as u64).product();
        let numel = numel as usize;
        let data = match dtype[0] {
            0 => {
                let mut v = Vec::with_capacity(numel);
                let mut buf = [0u8; 4];
                for _ in 0..numel {
                    r.read_exact(&mut buf)?;
                    v.push(f32::from_le_bytes(buf));
                }
                BlobData::F32(v)
            }
            1 => {
                let mut v = Vec::with_capacity(numel);
                let mut buf = [0u8; 8];
                for _ in 0..numel {
                    r.read_exact(&mut buf)?;
                    v.push(f64::from_le_bytes(buf));
                }
                BlobData::F64(v)
            }
            2 => {
                let mut v = vec![0u8; numel];
                r.read_exact(&mut v)?;
                BlobData::U8(v)
            }
            t => return Err(Error::Format(format!("unknown blob dtype {t}"))),
        };
        Ok(Blob { dims, data })
    }

    pub fn write_file(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn read_file(path: &std::path::Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn round_trip(blob: &Blob) -> Blob {
        let mut bytes = Vec::new();
        blob.write_to(&mut bytes).unwrap();
        assert_eq!(bytes.len() as u64, blob.byte_len());
        let back = Blob::read_from(&mut bytes.as_slice()).unwrap();
        let mut bytes2 = Vec::new();
        back.write_to(&mut bytes2).unwrap();
        assert_eq!(bytes, bytes2, "re-serialization must be bit-exact");
        back
    }

    #[test]
    fn f64_round_trip_bit_exact() {
        let t = Tensor::from_vec(
            Shape::new(1, 2, 1, 3),
            vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -3.25, 7.0],
        )
        .unwrap();
        let blob = Blob::from_tensor(&t);
        let back = round_trip(&blob);
        assert_eq!(blob, back);
        let t2 = back.to_tensor().unwrap();
        for (a, b) in t.data().iter().zip(t2.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn f32_and_u8_round_trip() {
        let b = Blob::new(vec![2, 2], BlobData::F32(vec![1.5, -2.0, 0.0, 3.25])).unwrap();
        assert_eq!(round_trip(&b), b);
        let b = Blob::new(vec![5], BlobData::U8(vec![0, 1, 254, 255, 7])).unwrap();
        assert_eq!(round_trip(&b), b);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = Vec::new();
        Blob::from_u64(3).write_to(&mut bytes).unwrap();
        bytes[0] = b'X';
        assert!(Blob::read_from(&mut bytes.as_slice()).is_err());
    }

    #[test]
    fn rejects_dim_payload_mismatch() {
        assert!(Blob::new(vec![3], BlobData::U8(vec![1, 2])).is_err());
    }

    #[test]
    fn u64_round_trip() {
        let b = Blob::from_u64(u64::MAX - 12345);
        assert_eq!(round_trip(&b).to_u64().unwrap(), u64::MAX - 12345);
    }
}
