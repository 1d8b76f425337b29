use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};

const MAGIC: &[u8; 8] = b"NDTENSOR";
const FORMAT_VERSION: u16 = 1;
const DTYPE_F64: u8 = 1;
const MAX_RANK: u32 = 8;

/// Dense row-major array of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} needs {len} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Samples every entry from a zero-mean Gaussian with standard deviation `std`.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        let normal = Normal::new(0.0, std).expect("standard deviation must be finite and >= 0");
        let data = (0..len).map(|_| normal.sample(rng)).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        assert_eq!(self.rank(), 2, "row() needs a matrix");
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        assert_eq!(self.rank(), 2, "row_mut() needs a matrix");
        let cols = self.shape[1];
        &mut self.data[i * cols..(i + 1) * cols]
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            flat = flat * d + i;
        }
        self.data[flat]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Writes the versioned little-endian encoding: magic, version, dtype
    /// tag, rank, dims, then raw values.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u16::<LittleEndian>(FORMAT_VERSION)?;
        w.write_u8(DTYPE_F64)?;
        w.write_u8(0)?;
        w.write_u32::<LittleEndian>(self.shape.len() as u32)?;
        for &d in &self.shape {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in &self.data {
            w.write_f64::<LittleEndian>(v)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.read_u16::<LittleEndian>().map_err(truncated)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let dtype = r.read_u8().map_err(truncated)?;
        if dtype != DTYPE_F64 {
            return Err(Error::Format(format!("unsupported dtype tag {dtype}")));
        }
        let _reserved = r.read_u8().map_err(truncated)?;
        let rank = r.read_u32::<LittleEndian>().map_err(truncated)?;
        if rank > MAX_RANK {
            return Err(Error::Format(format!("rank {rank} exceeds {MAX_RANK}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut len: usize = 1;
        for _ in 0..rank {
            let d = r.read_u64::<LittleEndian>().map_err(truncated)?;
            let d = usize::try_from(d).map_err(|_| Error::Format("dimension overflow".into()))?;
            len = len
                .checked_mul(d)
                .ok_or_else(|| Error::Format("element count overflow".into()))?;
            shape.push(d);
        }
        // Read in bounded chunks so a corrupt header cannot force a huge allocation.
        let mut data = Vec::with_capacity(len.min(1 << 20));
        let mut buf = [0f64; 4096];
        let mut remaining = len;
        while remaining > 0 {
            let n = remaining.min(buf.len());
            r.read_f64_into::<LittleEndian>(&mut buf[..n]).map_err(truncated)?;
            data.extend_from_slice(&buf[..n]);
            remaining -= n;
        }
        Ok(Self { shape, data })
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(truncated)
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated tensor data".into())
    } else {
        Error::Io(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::new([2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new([2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn binary_round_trip() {
        let t = Tensor::new([2, 3], vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE, 0.0, 1e300]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 2 + 1 + 1 + 4 + 2 * 8 + 6 * 8);
        let back = Tensor::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn header_layout_is_little_endian() {
        let mut buf = Vec::new();
        Tensor::scalar(1.0).write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"NDTENSOR");
        assert_eq!(&buf[8..10], &[1, 0]);
        assert_eq!(buf[10], 1);
        assert_eq!(&buf[12..16], &[1, 0, 0, 0]);
        assert_eq!(&buf[16..24], &1u64.to_le_bytes());
        assert_eq!(&buf[24..32], &1.0f64.to_le_bytes());
    }

    #[test]
    fn truncated_and_corrupt_inputs_are_rejected() {
        let mut buf = Vec::new();
        Tensor::ones([4, 4]).write_to(&mut buf).unwrap();
        let cut = &buf[..buf.len() - 3];
        assert!(matches!(Tensor::read_from(&mut &cut[..]), Err(Error::Format(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Tensor::read_from(&mut bad.as_slice()), Err(Error::Format(_))));
        let mut future = buf.clone();
        future[8] = 9;
        assert!(matches!(
            Tensor::read_from(&mut future.as_slice()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn get_uses_row_major_order() {
        let t = Tensor::new([2, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        assert_eq!(t.get(&[1, 0, 1]), 5.0);
    }
}
