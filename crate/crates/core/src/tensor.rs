//! Rank-4 NCHW float tensor, the universal value type of the crate.
//!
//! Data is stored row-major as `[n][c][h][w]`. The binary on-disk format
//! (`MSBT`) is little-endian: magic bytes, u32 version, u32 rank,
//! rank x u64 dims, then the float32 payload.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const MSBT_MAGIC: &[u8; 4] = b"MSBT";
pub const MSBT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Tensor {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn full(shape: [usize; 4], value: f32) -> Tensor {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Tensor> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::shape(format!(
                "tensor data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                len
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Scalar wrapped as a 1x1x1x1 tensor.
    pub fn scalar(value: f32) -> Tensor {
        Tensor {
            shape: [1, 1, 1, 1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
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

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f32) {
        let i = self.index(n, c, h, w);
        self.data[i] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp(&self, lo: f32, hi: f32) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn check_same_shape(&self, other: &Tensor, ctx: &str) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::shape(format!(
                "{}: {:?} vs {:?}",
                ctx, self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape,
            data,
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape,
            data,
        })
    }

    pub fn scale(&self, k: f32) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Mean over all elements, accumulated in f64.
    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// L2 norm, accumulated in f64.
    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// Inner product, accumulated in f64.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum())
    }

    pub fn write_msbt<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(MSBT_MAGIC)?;
        out.write_all(&MSBT_VERSION.to_le_bytes())?;
        out.write_all(&4u32.to_le_bytes())?;
        for d in self.shape {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_msbt<R: Read>(input: &mut R) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MSBT_MAGIC {
            return Err(Error::data(format!(
                "bad tensor magic {:?}, expected {:?}",
                magic, MSBT_MAGIC
            )));
        }
        let version = read_u32(input)?;
        if version != MSBT_VERSION {
            return Err(Error::data(format!("unsupported tensor version {version}")));
        }
        let rank = read_u32(input)? as usize;
        if rank == 0 || rank > 4 {
            return Err(Error::data(format!("unsupported tensor rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut buf = [0u8; 8];
            input.read_exact(&mut buf)?;
            dims.push(u64::from_le_bytes(buf) as usize);
        }
        // Ranks below 4 are left-padded with singleton dims.
        let mut shape = [1usize; 4];
        shape[4 - rank..].copy_from_slice(&dims);
        let len: usize = shape.iter().product();
        let mut data = vec![0f32; len];
        let mut buf = [0u8; 4];
        for v in data.iter_mut() {
            input.read_exact(&mut buf)?;
            *v = f32::from_le_bytes(buf);
        }
        Ok(Tensor { shape, data })
    }
}

pub(crate) fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        let err = Tensor::from_vec([1, 1, 2, 2], vec![0.0; 3]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }

    #[test]
    fn msbt_round_trip() {
        let t = Tensor::from_vec([2, 1, 2, 3], (0..12).map(|i| i as f32 * 0.5).collect()).unwrap();
        let mut buf = Vec::new();
        t.write_msbt(&mut buf).unwrap();
        let back = Tensor::read_msbt(&mut buf.as_slice()).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn msbt_rejects_bad_magic() {
        let mut buf = Vec::new();
        Tensor::scalar(1.0).write_msbt(&mut buf).unwrap();
        buf[0] = b'X';
        assert!(Tensor::read_msbt(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::from_vec([1, 2, 2, 2], (0..8).map(|i| i as f32).collect()).unwrap();
        assert_eq!(t.at(0, 1, 0, 1), 5.0);
        assert_eq!(t.at(0, 0, 1, 0), 2.0);
    }
}
