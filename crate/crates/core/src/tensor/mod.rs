//! Dense row-major tensors.
//!
//! A [`Tensor`] is the value carrier between every stage of the pipeline:
//! float activations at the framework boundary, `u8` chip inputs, `i8`
//! weights and digitized outputs, and `i32` host-side partial sums.

mod io;

pub use io::{decode, encode, read_csv, read_tensor, write_csv, write_tensor};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    F32,
    I32,
    U8,
    I8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::I32 => 1,
            DType::U8 => 2,
            DType::I8 => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => DType::F32,
            1 => DType::I32,
            2 => DType::U8,
            3 => DType::I8,
            other => return Err(Error::UnsupportedDType(other)),
        })
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::U8 | DType::I8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I32(Vec<i32>),
    U8(Vec<u8>),
    I8(Vec<i8>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::I32(_) => DType::I32,
            TensorData::U8(_) => DType::U8,
            TensorData::I8(_) => DType::I8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::I8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Builds a new buffer by picking `indices` out of this one. `None`
    /// entries produce a zero element.
    pub fn gather(&self, indices: &[Option<usize>]) -> TensorData {
        fn pick<T: Copy + Default>(src: &[T], idx: &[Option<usize>]) -> Vec<T> {
            idx.iter().map(|i| i.map_or_else(T::default, |i| src[i])).collect()
        }
        match self {
            TensorData::F32(v) => TensorData::F32(pick(v, indices)),
            TensorData::I32(v) => TensorData::I32(pick(v, indices)),
            TensorData::U8(v) => TensorData::U8(pick(v, indices)),
            TensorData::I8(v) => TensorData::I8(pick(v, indices)),
        }
    }
}

/// Row-major dense tensor of rank at most [`MAX_RANK`].
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

fn element_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        if shape.len() > MAX_RANK {
            return Err(Error::RankTooLarge(shape.len()));
        }
        let expected = element_count(&shape);
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {expected} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn from_i32(shape: Vec<usize>, data: Vec<i32>) -> Result<Self> {
        Self::new(shape, TensorData::I32(data))
    }

    pub fn from_u8(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::new(shape, TensorData::U8(data))
    }

    pub fn from_i8(shape: Vec<usize>, data: Vec<i8>) -> Result<Self> {
        Self::new(shape, TensorData::I8(data))
    }

    pub fn zeros(dtype: DType, shape: Vec<usize>) -> Result<Self> {
        let n = element_count(&shape);
        let data = match dtype {
            DType::F32 => TensorData::F32(vec![0.0; n]),
            DType::I32 => TensorData::I32(vec![0; n]),
            DType::U8 => TensorData::U8(vec![0; n]),
            DType::I8 => TensorData::I8(vec![0; n]),
        };
        Self::new(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    /// Returns a tensor with the same flat buffer and a new shape.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        self.clone().into_reshaped(new_shape)
    }

    pub fn into_reshaped(self, new_shape: &[usize]) -> Result<Tensor> {
        if element_count(new_shape) != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} ({} elements) into {new_shape:?}",
                self.shape,
                self.len()
            )));
        }
        Tensor::new(new_shape.to_vec(), self.data)
    }

    /// Bitwise equality, so that NaN payloads compare equal to themselves.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.data, &other.data) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.iter().map(|x| x.to_bits()).eq(b.iter().map(|x| x.to_bits()))
            }
            (a, b) => a == b,
        }
    }

    /// Extent of dimension `i`; used with rank-2 tensors as `(rows, cols)`.
    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(mismatch(DType::F32, other.dtype())),
        }
    }

    pub fn as_i32(&self) -> Result<&[i32]> {
        match &self.data {
            TensorData::I32(v) => Ok(v),
            other => Err(mismatch(DType::I32, other.dtype())),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Ok(v),
            other => Err(mismatch(DType::U8, other.dtype())),
        }
    }

    pub fn as_i8(&self) -> Result<&[i8]> {
        match &self.data {
            TensorData::I8(v) => Ok(v),
            other => Err(mismatch(DType::I8, other.dtype())),
        }
    }

    /// Element-wise widening to `f64`, whatever the dtype.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::I32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::U8(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::I8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    /// Requires a rank-2 tensor and returns `(rows, cols)`.
    pub fn matrix_dims(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::ShapeMismatch(format!("expected a matrix, got shape {other:?}"))),
        }
    }
}

fn mismatch(expected: DType, found: DType) -> Error {
    Error::DTypeMismatch { expected, found }
}
