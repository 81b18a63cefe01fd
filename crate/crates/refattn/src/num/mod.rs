//! Dense N-d float arrays, the reverse-mode tape that records operations on
//! them, and the finite-difference harness used to verify every backward rule.
//!
//! Everything runs in 64-bit floats. Values are immutable once constructed;
//! ops produce fresh arrays. Out-of-bounds access in the spatial kernels
//! (convolution, unfolding, bilinear sampling) reads zeros.

pub mod gradcheck;
pub mod kernels;
pub mod ops;
pub mod tape;

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Dense row-major array of `f64` with an arbitrary number of dimensions.
///
/// Cloning is cheap (the buffer is shared). Gradient participation happens by
/// lifting an `NdArray` onto a [`tape::Tape`], not on the array itself.
#[derive(Clone, Debug, PartialEq)]
pub struct NdArray {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl NdArray {
    /// Builds an array, rejecting shape/length mismatches and non-finite values.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "NdArray::from_vec",
                format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            ));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("NdArray::from_vec (value {bad})"),
            });
        }
        Ok(Self::new_unchecked(shape, data))
    }

    /// Internal constructor for kernel outputs. Finiteness is asserted in
    /// debug builds; release builds trust the kernels.
    pub(crate) fn new_unchecked(shape: &[usize], data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced by a kernel"
        );
        NdArray {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new_unchecked(shape, vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(value.is_finite());
        Self::new_unchecked(shape, vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Self {
        Self::new_unchecked(&[], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Identity of the shared buffer; clones of one array report the same id.
    pub fn buffer_id(&self) -> usize {
        Arc::as_ptr(&self.data) as usize
    }

    /// The single value of a one-element array.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on a non-scalar array");
        self.data[0]
    }

    /// Same buffer, new shape. Element count must match.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        Ok(NdArray {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::new_unchecked(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Writes the binary dump: magic `NDAR`, u32 rank, u32 dims, then the
    /// payload as little-endian `f32` in row-major order.
    pub fn write_ndar<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"NDAR")?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(self.numel() * 4);
        for &v in self.data.iter() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&payload)?;
        Ok(())
    }

    pub fn read_ndar<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"NDAR" {
            return Err(Error::Argument(format!(
                "bad tensor dump magic {:?}, expected \"NDAR\"",
                magic
            )));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let rank = u32::from_le_bytes(u32buf) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut u32buf)?;
            shape.push(u32::from_le_bytes(u32buf) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * 4];
        r.read_exact(&mut payload)?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        NdArray::from_vec(&shape, data)
    }

    pub fn save_ndar(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_ndar(std::io::BufWriter::new(file))
    }

    pub fn load_ndar(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_ndar(std::io::BufReader::new(file))
    }
}
