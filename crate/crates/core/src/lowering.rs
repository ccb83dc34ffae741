//! Convolutions as matmuls.
//!
//! The kernel is unrolled into a `(C_in * prod(k)) x C_out` matrix whose row
//! `t * C_in + c` holds tap `t` of input channel `c`. Each output position
//! contributes one input vector gathered from its receptive field in the
//! same order. Small 1-d kernels can additionally be packed several times
//! along the diagonal of one array (expansion), each copy shifted by one
//! stride, so a single run yields several output positions.

use serde::{Deserialize, Serialize};

use crate::chip::{HwParams, ARRAY_COLS};
use crate::error::{Error, Result};
use crate::matmul::MatmulEngine;
use crate::tensor::{Tensor, TensorData};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Kernel extent per spatial dimension (1 or 2 entries).
    pub kernel: Vec<usize>,
    pub stride: Vec<usize>,
    /// Input extent per spatial dimension.
    pub input: Vec<usize>,
}

impl ConvSpec {
    pub fn conv1d(in_channels: usize, out_channels: usize, k: usize, stride: usize, length: usize) -> Result<Self> {
        Self::new(in_channels, out_channels, vec![k], vec![stride], vec![length])
    }

    pub fn conv2d(
        in_channels: usize,
        out_channels: usize,
        k: (usize, usize),
        stride: (usize, usize),
        input: (usize, usize),
    ) -> Result<Self> {
        Self::new(in_channels, out_channels, vec![k.0, k.1], vec![stride.0, stride.1], vec![input.0, input.1])
    }

    pub fn new(in_channels: usize, out_channels: usize, kernel: Vec<usize>, stride: Vec<usize>, input: Vec<usize>) -> Result<Self> {
        let dims = kernel.len();
        if !(1..=2).contains(&dims) || stride.len() != dims || input.len() != dims {
            return Err(Error::ShapeMismatch(format!(
                "kernel {kernel:?}, stride {stride:?} and input {input:?} must share 1 or 2 dimensions"
            )));
        }
        if in_channels == 0 || out_channels == 0 || kernel.contains(&0) || stride.contains(&0) {
            return Err(Error::ShapeMismatch("channels, kernel extents and strides must be >= 1".into()));
        }
        if kernel.iter().zip(&input).any(|(k, l)| k > l) {
            return Err(Error::EmptyOutput);
        }
        Ok(ConvSpec { in_channels, out_channels, kernel, stride, input })
    }

    pub fn dims(&self) -> usize {
        self.kernel.len()
    }

    pub fn output(&self) -> Vec<usize> {
        (0..self.dims()).map(|d| (self.input[d] - self.kernel[d]) / self.stride[d] + 1).collect()
    }

    pub fn positions(&self) -> usize {
        self.output().iter().product()
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Rows of the unrolled weight matrix.
    pub fn rows(&self) -> usize {
        self.in_channels * self.taps()
    }

    fn input_len(&self) -> usize {
        self.in_channels * self.input.iter().product::<usize>()
    }

    pub fn kernel_shape(&self) -> Vec<usize> {
        let mut s = vec![self.out_channels, self.in_channels];
        s.extend(&self.kernel);
        s
    }

    /// Flat kernel index of matrix entry `(row, o)`.
    fn kernel_index(&self, row: usize, o: usize) -> usize {
        let (t, c) = (row / self.in_channels, row % self.in_channels);
        (o * self.in_channels + c) * self.taps() + t
    }

    /// Per position, flat indices into one `[C_in, L...]` sample.
    pub fn gather_indices(&self) -> Vec<usize> {
        let out = self.output();
        let spatial: usize = self.input.iter().product();
        let mut idx = Vec::with_capacity(self.positions() * self.rows());
        for p in 0..self.positions() {
            let pos = unravel(p, &out);
            for row in 0..self.rows() {
                let (t, c) = (row / self.in_channels, row % self.in_channels);
                let tap = unravel(t, &self.kernel);
                let mut flat = 0;
                for d in 0..self.dims() {
                    flat = flat * self.input[d] + pos[d] * self.stride[d] + tap[d];
                }
                idx.push(c * spatial + flat);
            }
        }
        idx
    }
}

fn unravel(mut i: usize, extents: &[usize]) -> Vec<usize> {
    let mut out = vec![0; extents.len()];
    for d in (0..extents.len()).rev() {
        out[d] = i % extents[d];
        i /= extents[d];
    }
    out
}

/// Maps matmul output rows `b * positions + p` back to `[B, C_out, out...]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputDescriptor {
    pub batch: usize,
    pub out_channels: usize,
    pub spatial: Vec<usize>,
}

impl OutputDescriptor {
    pub fn positions(&self) -> usize {
        self.spatial.iter().product()
    }

    pub fn shape(&self) -> Vec<usize> {
        let mut s = vec![self.batch, self.out_channels];
        s.extend(&self.spatial);
        s
    }

    /// `[B * P, C_out]` -> `[B, C_out, out...]`.
    pub fn fold(&self, y: &Tensor) -> Result<Tensor> {
        let p = self.positions();
        if y.shape() != [self.batch * p, self.out_channels] {
            return Err(Error::ShapeMismatch(format!("expected [{}, {}], got {:?}", self.batch * p, self.out_channels, y.shape())));
        }
        let idx: Vec<Option<usize>> = (0..self.batch * self.out_channels * p)
            .map(|i| {
                let (b, rem) = (i / (self.out_channels * p), i % (self.out_channels * p));
                let (o, pos) = (rem / p, rem % p);
                Some((b * p + pos) * self.out_channels + o)
            })
            .collect();
        Tensor::new(self.shape(), y.data().gather(&idx))
    }

    /// Inverse of [`fold`](Self::fold).
    pub fn unfold(&self, y: &Tensor) -> Result<Tensor> {
        if y.shape() != self.shape().as_slice() {
            return Err(Error::ShapeMismatch(format!("expected {:?}, got {:?}", self.shape(), y.shape())));
        }
        let p = self.positions();
        let idx: Vec<Option<usize>> = (0..self.batch * p * self.out_channels)
            .map(|i| {
                let (row, o) = (i / self.out_channels, i % self.out_channels);
                let (b, pos) = (row / p, row % p);
                Some((b * self.out_channels + o) * p + pos)
            })
            .collect();
        Tensor::new(vec![self.batch * p, self.out_channels], y.data().gather(&idx))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lowered {
    /// `[C_in * prod(k), C_out]`.
    pub weights: Tensor,
    /// `[B * positions, C_in * prod(k)]`.
    pub inputs: Tensor,
    pub descriptor: OutputDescriptor,
}

/// Unrolled weight matrix of a `[C_out, C_in, k...]` kernel.
pub fn kernel_matrix(spec: &ConvSpec, kernel: &Tensor) -> Result<Tensor> {
    if kernel.shape() != spec.kernel_shape().as_slice() {
        return Err(Error::ShapeMismatch(format!("kernel {:?}, spec expects {:?}", kernel.shape(), spec.kernel_shape())));
    }
    let idx: Vec<Option<usize>> = (0..spec.rows() * spec.out_channels)
        .map(|i| Some(spec.kernel_index(i / spec.out_channels, i % spec.out_channels)))
        .collect();
    Tensor::new(vec![spec.rows(), spec.out_channels], kernel.data().gather(&idx))
}

/// Inverse of [`kernel_matrix`].
pub fn kernel_from_matrix(spec: &ConvSpec, matrix: &Tensor) -> Result<Tensor> {
    if matrix.shape() != [spec.rows(), spec.out_channels] {
        return Err(Error::ShapeMismatch(format!("matrix {:?} for a {}x{} unrolled kernel", matrix.shape(), spec.rows(), spec.out_channels)));
    }
    let mut idx = vec![None; spec.rows() * spec.out_channels];
    for row in 0..spec.rows() {
        for o in 0..spec.out_channels {
            idx[spec.kernel_index(row, o)] = Some(row * spec.out_channels + o);
        }
    }
    Tensor::new(spec.kernel_shape(), matrix.data().gather(&idx))
}

fn batch_of(spec: &ConvSpec, input: &Tensor) -> Result<usize> {
    let want: Vec<usize> = std::iter::once(spec.in_channels).chain(spec.input.iter().copied()).collect();
    if input.rank() != want.len() + 1 || input.shape()[1..] != want[..] {
        return Err(Error::ShapeMismatch(format!("input {:?}, spec expects [B, {:?}]", input.shape(), want)));
    }
    Ok(input.dim(0))
}

/// Receptive-field vectors of every position, `[B * positions, rows]`.
pub fn unroll_inputs(spec: &ConvSpec, input: &Tensor) -> Result<Tensor> {
    let batch = batch_of(spec, input)?;
    let per = spec.gather_indices();
    let len = spec.input_len();
    let idx: Vec<Option<usize>> = (0..batch).flat_map(|b| per.iter().map(move |&i| Some(b * len + i))).collect();
    Tensor::new(vec![batch * spec.positions(), spec.rows()], input.data().gather(&idx))
}

/// Adjoint of [`unroll_inputs`]: sums receptive-field gradients back onto
/// the input layout.
pub fn fold_input_grad(spec: &ConvSpec, batch: usize, grad: &[f32]) -> Result<Tensor> {
    let per = spec.gather_indices();
    if grad.len() != batch * per.len() {
        return Err(Error::ShapeMismatch(format!("{} gradient values for {} unrolled entries", grad.len(), batch * per.len())));
    }
    let len = spec.input_len();
    let mut out = vec![0f64; batch * len];
    for b in 0..batch {
        for (k, &i) in per.iter().enumerate() {
            out[b * len + i] += grad[b * per.len() + k] as f64;
        }
    }
    let mut shape = vec![batch, spec.in_channels];
    shape.extend(&spec.input);
    Tensor::from_f32(shape, out.into_iter().map(|v| v as f32).collect())
}

pub fn lower_conv(spec: &ConvSpec, kernel: &Tensor, input: &Tensor) -> Result<Lowered> {
    let weights = kernel_matrix(spec, kernel)?;
    let inputs = unroll_inputs(spec, input)?;
    let descriptor = OutputDescriptor { batch: input.dim(0), out_channels: spec.out_channels, spatial: spec.output() };
    Ok(Lowered { weights, inputs, descriptor })
}

/// Placement of `copies` shifted kernel copies on one array.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionPlan {
    pub copies: usize,
    pub row_offset: usize,
    pub col_offset: usize,
    /// Rows of one unrolled kernel.
    pub kernel_rows: usize,
    pub rows: usize,
    pub cols: usize,
    /// Input taps covered by one run.
    pub window: usize,
}

impl ExpansionPlan {
    /// Runs needed for `positions` outputs.
    pub fn runs(&self, positions: usize) -> usize {
        positions.div_ceil(self.copies)
    }
}

pub fn plan_expansion(spec: &ConvSpec, cap_rows: usize, cap_cols: usize) -> Result<ExpansionPlan> {
    if spec.dims() != 1 {
        return Err(Error::ShapeMismatch("expansion packs 1-d convolutions only".into()));
    }
    let (c, k, s) = (spec.in_channels, spec.kernel[0], spec.stride[0]);
    let kernel_rows = k * c;
    if kernel_rows > cap_rows || spec.out_channels > cap_cols {
        return Err(Error::KernelTooLarge { rows: kernel_rows, cols: spec.out_channels, cap_rows });
    }
    let copies = ((cap_rows - kernel_rows) / (s * c) + 1).min(cap_cols / spec.out_channels);
    Ok(ExpansionPlan {
        copies,
        row_offset: s * c,
        col_offset: spec.out_channels,
        kernel_rows,
        rows: (copies - 1) * s * c + kernel_rows,
        cols: copies * spec.out_channels,
        window: (copies - 1) * s + k,
    })
}

/// Block-diagonal placement of per-copy unrolled kernels (`[kernel_rows,
/// C_out]` each); untouched entries are zero.
pub fn expanded_matrix(plan: &ExpansionPlan, copies: &[Tensor]) -> Result<Tensor> {
    if copies.len() != plan.copies {
        return Err(Error::ShapeMismatch(format!("{} kernel copies for a plan of {}", copies.len(), plan.copies)));
    }
    let dtype = copies[0].dtype();
    let mut parts = Vec::with_capacity(copies.len());
    for m in copies {
        if m.shape() != [plan.kernel_rows, plan.col_offset] || m.dtype() != dtype {
            return Err(Error::ShapeMismatch(format!("copy of shape {:?}", m.shape())));
        }
        parts.push(m.data());
    }
    // gather from the concatenation of all copies
    let block = plan.kernel_rows * plan.col_offset;
    let joined = concat_data(&parts);
    let mut idx = vec![None; plan.rows * plan.cols];
    for j in 0..plan.copies {
        for r in 0..plan.kernel_rows {
            for o in 0..plan.col_offset {
                idx[(j * plan.row_offset + r) * plan.cols + j * plan.col_offset + o] = Some(j * block + r * plan.col_offset + o);
            }
        }
    }
    Tensor::new(vec![plan.rows, plan.cols], joined.gather(&idx))
}

fn concat_data(parts: &[&TensorData]) -> TensorData {
    match parts[0] {
        TensorData::F32(_) => TensorData::F32(parts.iter().flat_map(|p| match p {
            TensorData::F32(v) => v.clone(),
            _ => unreachable!(),
        }).collect()),
        TensorData::I32(_) => TensorData::I32(parts.iter().flat_map(|p| match p {
            TensorData::I32(v) => v.clone(),
            _ => unreachable!(),
        }).collect()),
        TensorData::U8(_) => TensorData::U8(parts.iter().flat_map(|p| match p {
            TensorData::U8(v) => v.clone(),
            _ => unreachable!(),
        }).collect()),
        TensorData::I8(_) => TensorData::I8(parts.iter().flat_map(|p| match p {
            TensorData::I8(v) => v.clone(),
            _ => unreachable!(),
        }).collect()),
    }
}

/// Input windows for expanded runs, `[B * runs, rows]`. Windows running
/// past the end of the input are zero-padded.
pub fn expanded_inputs(spec: &ConvSpec, plan: &ExpansionPlan, input: &Tensor) -> Result<Tensor> {
    let batch = batch_of(spec, input)?;
    let (c, s, l) = (spec.in_channels, spec.stride[0], spec.input[0]);
    let runs = plan.runs(spec.positions());
    let mut idx = Vec::with_capacity(batch * runs * plan.rows);
    for b in 0..batch {
        for g in 0..runs {
            let start = g * plan.copies * s;
            for row in 0..plan.rows {
                let (t, ch) = (row / c, row % c);
                idx.push((start + t < l).then(|| b * c * l + ch * l + start + t));
            }
        }
    }
    Tensor::new(vec![batch * runs, plan.rows], input.data().gather(&idx))
}

/// `[B * runs, copies * C_out]` -> `[B, C_out, positions]`, dropping the
/// padded positions of the last run.
pub fn fold_expanded(spec: &ConvSpec, plan: &ExpansionPlan, batch: usize, y: &Tensor) -> Result<Tensor> {
    let runs = plan.runs(spec.positions());
    if y.shape() != [batch * runs, plan.cols] {
        return Err(Error::ShapeMismatch(format!("expected [{}, {}], got {:?}", batch * runs, plan.cols, y.shape())));
    }
    let (co, p) = (spec.out_channels, spec.positions());
    let idx: Vec<Option<usize>> = (0..batch * co * p)
        .map(|i| {
            let (b, rem) = (i / (co * p), i % (co * p));
            let (o, pos) = (rem / p, rem % p);
            let (g, j) = (pos / plan.copies, pos % plan.copies);
            Some((b * runs + g) * plan.cols + j * co + o)
        })
        .collect();
    Tensor::new(vec![batch, co, p], y.data().gather(&idx))
}

/// Expanded convolution through `engine`: `copies` are quantized
/// `[kernel_rows, C_out]` matrices, `input` a `[B, C_in, L]` u8 tensor.
/// Returns `[B, C_out, positions]` i32 and the number of runs per sample.
pub fn execute_expanded(
    engine: &mut dyn MatmulEngine,
    spec: &ConvSpec,
    plan: &ExpansionPlan,
    copies: &[Tensor],
    input: &Tensor,
    signed: bool,
    hw: HwParams,
) -> Result<(Tensor, usize)> {
    let w = expanded_matrix(plan, copies)?;
    let x = expanded_inputs(spec, plan, input)?;
    let y = engine.matmul_q(&x, &w, signed, hw)?;
    Ok((fold_expanded(spec, plan, input.dim(0), &y)?, plan.runs(spec.positions())))
}

pub fn default_cap_cols() -> usize {
    ARRAY_COLS
}
