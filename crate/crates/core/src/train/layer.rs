//! Trainable layers.
//!
//! Every layer is a matmul between a gathered input matrix and a weight
//! matrix, followed by a fold of the product into the output layout. The
//! gather and fold maps come straight from the lowering functions, applied
//! to tensors of flat indices.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::chip::{HwParams, SIGNED_ROWS, ARRAY_COLS};
use crate::error::{Error, Result};
use crate::lowering::{
    expanded_inputs, expanded_matrix, fold_expanded, plan_expansion, unroll_inputs, ConvSpec, ExpansionPlan,
    OutputDescriptor,
};
use crate::matmul::MatmulEngine;
use crate::matmul::matmul_float;
use crate::quantize::{scale_for_max, QuantSpec, WEIGHT_MAX};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// `spec` covers the kept positions only; incoming samples of
    /// `input_len` steps are cut to `spec.input[0]`.
    Conv1d {
        spec: ConvSpec,
        input_len: usize,
        expansion: Option<ExpansionPlan>,
    },
}

/// Forward state kept for the backward pass.
#[derive(Clone, Debug)]
pub struct SavedState {
    pub x: Tensor,
    pub y: Tensor,
}

/// Quantized forward of `x . w` through `engine`. With `noise`, Gaussian
/// noise of the given std in output LSB is added to the result.
pub fn matmul_forward(
    engine: &mut dyn MatmulEngine,
    x: &Tensor,
    w: &Tensor,
    spec: &QuantSpec,
    hw: HwParams,
    noise: Option<(f32, &mut StreamRng)>,
) -> Result<(Tensor, SavedState)> {
    let mut y = matmul_float(engine, x, w, spec, hw)?;
    if let Some((sigma, rng)) = noise {
        if sigma > 0.0 {
            let dist = Normal::new(0.0f32, sigma * spec.output_scale).map_err(|e| Error::InvalidConfig(e.to_string()))?;
            let mut v = y.as_f32()?.to_vec();
            v.iter_mut().for_each(|e| *e += dist.sample(rng));
            y = Tensor::from_f32(y.shape().to_vec(), v)?;
        }
    }
    Ok((y.clone(), SavedState { x: x.clone(), y }))
}

/// Straight-through gradients of the float product:
/// `grad_x = grad_y . w^T`, `grad_w = x^T . grad_y`.
pub fn matmul_backward(grad_y: &Tensor, saved: Option<&SavedState>, w: &Tensor) -> Result<(Tensor, Tensor)> {
    let saved = saved.ok_or(Error::MissingState)?;
    let (b, n) = saved.x.matrix_dims()?;
    let (n2, m) = w.matrix_dims()?;
    if n != n2 || grad_y.shape() != [b, m] {
        return Err(Error::ShapeMismatch(format!(
            "grad_y {:?} for x {b}x{n} and w {n2}x{m}",
            grad_y.shape()
        )));
    }
    let (x, g, wv) = (saved.x.as_f32()?, grad_y.as_f32()?, w.as_f32()?);
    let mut gx = vec![0f32; b * n];
    let mut gw = vec![0f64; n * m];
    for i in 0..b {
        let gi = &g[i * m..(i + 1) * m];
        if gi.iter().all(|&v| v == 0.0) {
            continue;
        }
        for k in 0..n {
            let wk = &wv[k * m..(k + 1) * m];
            gx[i * n + k] = gi.iter().zip(wk).map(|(&a, &c)| a as f64 * c as f64).sum::<f64>() as f32;
            let xk = x[i * n + k] as f64;
            if xk != 0.0 {
                for (acc, &gj) in gw[k * m..(k + 1) * m].iter_mut().zip(gi) {
                    *acc += xk * gj as f64;
                }
            }
        }
    }
    Ok((
        Tensor::from_f32(vec![b, n], gx)?,
        Tensor::from_f32(vec![n, m], gw.into_iter().map(|v| v as f32).collect())?,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    /// Float master weights: `[inputs, outputs]` for dense layers,
    /// `[copies * kernel_rows, C_out]` (one unrolled kernel per copy) for
    /// convolutions.
    pub weights: Tensor,
    pub hw: HwParams,
}

fn he_uniform(rng: &mut StreamRng, fan_in: usize, len: usize) -> Vec<f32> {
    let a = (6.0 / fan_in as f32).sqrt();
    (0..len).map(|_| rng.random_range(-a..a)).collect()
}

impl Layer {
    pub fn dense(inputs: usize, outputs: usize, rng: &mut StreamRng) -> Result<Self> {
        let weights = Tensor::from_f32(vec![inputs, outputs], he_uniform(rng, inputs, inputs * outputs))?;
        Ok(Layer { kind: LayerKind::Dense { inputs, outputs }, weights, hw: HwParams::default() })
    }

    /// Conv layer over inputs of `spec.input[0]` steps, keeping the first
    /// `keep` output positions. With `expand`, the kernel is packed as many
    /// times as fit a signed array; all copies start identical.
    pub fn conv1d(spec: &ConvSpec, keep: Option<usize>, expand: bool, rng: &mut StreamRng) -> Result<Self> {
        if spec.dims() != 1 {
            return Err(Error::ShapeMismatch("only 1-d convolutions are trainable".into()));
        }
        let full = spec.output()[0];
        let keep = keep.unwrap_or(full);
        if keep == 0 || keep > full {
            return Err(Error::ShapeMismatch(format!("cannot keep {keep} of {full} positions")));
        }
        let (k, s) = (spec.kernel[0], spec.stride[0]);
        let kept = ConvSpec::conv1d(spec.in_channels, spec.out_channels, k, s, (keep - 1) * s + k)?;
        let expansion = if expand { Some(plan_expansion(&kept, SIGNED_ROWS, ARRAY_COLS)?) } else { None };
        let copies = expansion.map_or(1, |p| p.copies);
        let one = he_uniform(rng, kept.rows(), kept.rows() * kept.out_channels);
        let weights = Tensor::from_f32(vec![copies * kept.rows(), kept.out_channels], one.repeat(copies))?;
        Ok(Layer {
            kind: LayerKind::Conv1d { spec: kept, input_len: spec.input[0], expansion },
            weights,
            hw: HwParams::default(),
        })
    }

    pub fn input_len(&self) -> usize {
        match &self.kind {
            LayerKind::Dense { inputs, .. } => *inputs,
            LayerKind::Conv1d { spec, input_len, .. } => spec.in_channels * input_len,
        }
    }

    pub fn output_len(&self) -> usize {
        match &self.kind {
            LayerKind::Dense { outputs, .. } => *outputs,
            LayerKind::Conv1d { spec, .. } => spec.out_channels * spec.positions(),
        }
    }

    /// Shape of the master weights.
    pub fn weight_shape(&self) -> Vec<usize> {
        match &self.kind {
            LayerKind::Dense { inputs, outputs } => vec![*inputs, *outputs],
            LayerKind::Conv1d { spec, expansion, .. } => {
                vec![expansion.map_or(1, |p| p.copies) * spec.rows(), spec.out_channels]
            }
        }
    }

    pub fn output_shape(&self, batch: usize) -> Vec<usize> {
        match &self.kind {
            LayerKind::Dense { outputs, .. } => vec![batch, *outputs],
            LayerKind::Conv1d { spec, .. } => vec![batch, spec.out_channels, spec.positions()],
        }
    }

    /// Weight matrix the chip sees.
    pub fn weight_matrix(&self) -> Result<Tensor> {
        match &self.kind {
            LayerKind::Conv1d { expansion: Some(plan), .. } => expanded_matrix(plan, &self.copies()?),
            _ => Ok(self.weights.clone()),
        }
    }

    /// Per-copy unrolled kernels (a single entry without expansion).
    pub fn copies(&self) -> Result<Vec<Tensor>> {
        let LayerKind::Conv1d { spec, expansion, .. } = &self.kind else {
            return Ok(vec![self.weights.clone()]);
        };
        let (rows, cols) = (spec.rows(), spec.out_channels);
        let w = self.weights.as_f32()?;
        (0..expansion.map_or(1, |p| p.copies))
            .map(|j| Tensor::from_f32(vec![rows, cols], w[j * rows * cols..(j + 1) * rows * cols].to_vec()))
            .collect()
    }

    /// Mean Euclidean distance of each copy from copy 0.
    pub fn copy_distance(&self) -> Result<f32> {
        let copies = self.copies()?;
        if copies.len() < 2 {
            return Ok(0.0);
        }
        let base = copies[0].as_f32()?;
        let mut total = 0.0;
        for c in &copies[1..] {
            total += c.as_f32()?.iter().zip(base).map(|(a, b)| (a - b) * (a - b)).sum::<f32>().sqrt();
        }
        Ok(total / (copies.len() - 1) as f32)
    }

    /// For every entry of the input matrix, its flat index into the
    /// `[batch, input_len]` layer input, or `None` for zero padding.
    pub fn input_map(&self, batch: usize) -> Result<(Vec<usize>, Vec<Option<usize>>)> {
        match &self.kind {
            LayerKind::Dense { inputs, .. } => Ok((vec![batch, *inputs], (0..batch * inputs).map(Some).collect())),
            LayerKind::Conv1d { spec, input_len, expansion } => {
                let (c, l) = (spec.in_channels, spec.input[0]);
                let mut idx = Vec::with_capacity(batch * c * l);
                for b in 0..batch {
                    for ch in 0..c {
                        for t in 0..l {
                            idx.push(((b * c + ch) * input_len + t + 1) as i32);
                        }
                    }
                }
                let t = Tensor::from_i32(vec![batch, c, l], idx)?;
                let mapped = match expansion {
                    Some(plan) => expanded_inputs(spec, plan, &t)?,
                    None => unroll_inputs(spec, &t)?,
                };
                let map = mapped.as_i32()?.iter().map(|&v| (v > 0).then(|| v as usize - 1)).collect();
                Ok((mapped.shape().to_vec(), map))
            }
        }
    }

    /// For every output element, its flat index into the product matrix
    /// of shape `rows x cols`.
    pub fn output_map(&self, batch: usize, rows: usize, cols: usize) -> Result<Vec<usize>> {
        let idx = Tensor::from_i32(vec![rows, cols], (0..(rows * cols) as i32).collect())?;
        let folded = match &self.kind {
            LayerKind::Dense { .. } => idx,
            LayerKind::Conv1d { spec, expansion: Some(plan), .. } => fold_expanded(spec, plan, batch, &idx)?,
            LayerKind::Conv1d { spec, expansion: None, .. } => {
                OutputDescriptor { batch, out_channels: spec.out_channels, spatial: spec.output() }.fold(&idx)?
            }
        };
        Ok(folded.as_i32()?.iter().map(|&v| v as usize).collect())
    }

    /// Gradient of the master weights from the gradient of the weight
    /// matrix.
    pub fn weight_grad(&self, grad_matrix: &Tensor) -> Result<Tensor> {
        match &self.kind {
            LayerKind::Conv1d { spec, expansion: Some(plan), .. } => {
                let g = grad_matrix.as_f32()?;
                let (rows, co) = (spec.rows(), spec.out_channels);
                let mut out = Vec::with_capacity(plan.copies * rows * co);
                for j in 0..plan.copies {
                    for r in 0..rows {
                        let start = (j * plan.row_offset + r) * plan.cols + j * co;
                        out.extend_from_slice(&g[start..start + co]);
                    }
                }
                Tensor::from_f32(self.weights.shape().to_vec(), out)
            }
            _ => Ok(grad_matrix.clone()),
        }
    }

    /// Scales for one forward pass: weights use their full 6-bit range.
    pub fn quant_spec(&self, input_scale: f32, gain: f32) -> Result<QuantSpec> {
        let w_s = scale_for_max(self.weights.as_f32()?, WEIGHT_MAX as u8);
        QuantSpec::matched(input_scale, w_s, gain, true)
    }
}
