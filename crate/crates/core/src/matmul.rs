//! Quantized matmul backends.
//!
//! [`SoftwareModel`] is the noiseless digital twin of the chip path: it
//! digitizes every row block exactly where the partitioner cuts, then sums
//! blocks with the same saturating arithmetic. [`ChipBackend`] runs the full
//! partition, graph and executor stack.

use crate::chip::HwParams;
use crate::error::{Error, Result};
use crate::executor::{Executor, TimeMode};
use crate::partition::{build_graph, partition_matmul, ranges, row_capacity, GraphOptions};
use crate::quantize::{
    dequantize_outputs, quantize_inputs, quantize_weights, QuantSpec, INPUT_MAX, OUTPUT_MAX, OUTPUT_MIN, WEIGHT_MAX,
};
use crate::tensor::Tensor;

pub trait MatmulEngine {
    /// `x` is `[batch, n]` u8, `w` is `[n, m]` i8; returns `[batch, m]` i32.
    fn matmul_q(&mut self, x: &Tensor, w: &Tensor, signed: bool, hw: HwParams) -> Result<Tensor>;

    /// Transfer gain from summed products to output LSB.
    fn gain(&self) -> f32;

    /// Seed for the temporal noise of subsequent calls.
    fn set_run_seed(&mut self, _seed: u64) {}
}

fn check_operands(x: &Tensor, w: &Tensor, signed: bool) -> Result<(usize, usize, usize)> {
    let (b, n) = x.matrix_dims()?;
    let (n2, m) = w.matrix_dims()?;
    if n != n2 {
        return Err(Error::ShapeMismatch(format!("x is {b}x{n}, w is {n2}x{m}")));
    }
    let xs = x.as_u8()?;
    if let Some(i) = xs.iter().position(|&v| v > INPUT_MAX) {
        return Err(Error::InputOutOfRange { value: xs[i] as i32, index: i });
    }
    let ws = w.as_i8()?;
    let lo = if signed { -WEIGHT_MAX } else { 0 };
    if let Some(i) = ws.iter().position(|&v| v < lo || v > WEIGHT_MAX) {
        return Err(Error::WeightOutOfRange { value: ws[i] as i32, index: i });
    }
    Ok((b, n, m))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftwareModel {
    pub gain: f32,
    pub digital_range: (i32, i32),
}

impl SoftwareModel {
    pub fn new(gain: f32) -> Self {
        SoftwareModel { gain, digital_range: (OUTPUT_MIN, OUTPUT_MAX) }
    }
}

impl MatmulEngine for SoftwareModel {
    fn matmul_q(&mut self, x: &Tensor, w: &Tensor, signed: bool, _hw: HwParams) -> Result<Tensor> {
        let (b, n, m) = check_operands(x, w, signed)?;
        let (xs, ws) = (x.as_u8()?, w.as_i8()?);
        let g = self.gain as f64;
        let (lo, hi) = self.digital_range;
        let blocks = ranges(n, row_capacity(signed));
        let mut out = vec![0i32; b * m];
        let mut partial = vec![0i64; m];
        for r in 0..b {
            let row = &xs[r * n..(r + 1) * n];
            let mut acc = vec![0i32; m];
            for blk in &blocks {
                partial.fill(0);
                for i in blk.clone() {
                    let xi = row[i] as i64;
                    if xi == 0 {
                        continue;
                    }
                    for (p, &wv) in partial.iter_mut().zip(&ws[i * m..(i + 1) * m]) {
                        *p += xi * wv as i64;
                    }
                }
                for (a, &p) in acc.iter_mut().zip(&partial) {
                    let y = (g * p as f64).round().clamp(OUTPUT_MIN as f64, OUTPUT_MAX as f64) as i32;
                    *a = a.saturating_add(y);
                }
            }
            if blocks.len() > 1 {
                acc.iter_mut().for_each(|a| *a = (*a).clamp(lo, hi));
            }
            out[r * m..(r + 1) * m].copy_from_slice(&acc);
        }
        Tensor::from_i32(vec![b, m], out)
    }

    fn gain(&self) -> f32 {
        self.gain
    }
}

pub struct ChipBackend {
    pub executor: Executor,
    pub digital_range: (i32, i32),
}

impl ChipBackend {
    pub fn new(executor: Executor) -> Self {
        ChipBackend { executor, digital_range: (OUTPUT_MIN, OUTPUT_MAX) }
    }
}

impl MatmulEngine for ChipBackend {
    fn matmul_q(&mut self, x: &Tensor, w: &Tensor, signed: bool, hw: HwParams) -> Result<Tensor> {
        let (_, n, m) = check_operands(x, w, signed)?;
        let plan = partition_matmul(n, m, signed, &self.executor.arrays())?;
        let opts = GraphOptions { digital_range: self.digital_range, hw, ..GraphOptions::default() };
        let graph = build_graph(&plan, w, &opts)?;
        let (mut out, _) = self.executor.run(&graph, std::slice::from_ref(x), TimeMode::Simulated)?;
        Ok(out.swap_remove(0))
    }

    fn gain(&self) -> f32 {
        self.executor.config().gain
    }

    fn set_run_seed(&mut self, seed: u64) {
        self.executor.set_run_seed(seed);
    }
}

/// Float matmul through an engine: quantize, run, dequantize.
pub fn matmul_float(engine: &mut dyn MatmulEngine, x: &Tensor, w: &Tensor, spec: &QuantSpec, hw: HwParams) -> Result<Tensor> {
    let xq = quantize_inputs(x, spec)?;
    let wq = quantize_weights(w, spec)?;
    let y = engine.matmul_q(&xq, &wq, spec.signed_weights, hw)?;
    dequantize_outputs(&y, spec)
}

/// Exact float product, the model the backward pass differentiates.
pub fn matmul_f32(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (b, n) = x.matrix_dims()?;
    let (n2, m) = w.matrix_dims()?;
    if n != n2 {
        return Err(Error::ShapeMismatch(format!("x is {b}x{n}, w is {n2}x{m}")));
    }
    let (xs, ws) = (x.as_f32()?, w.as_f32()?);
    let mut out = vec![0f32; b * m];
    for r in 0..b {
        let mut acc = vec![0f64; m];
        for i in 0..n {
            let xi = xs[r * n + i] as f64;
            if xi == 0.0 {
                continue;
            }
            for (a, &wv) in acc.iter_mut().zip(&ws[i * m..(i + 1) * m]) {
                *a += xi * wv as f64;
            }
        }
        for (o, a) in out[r * m..(r + 1) * m].iter_mut().zip(acc) {
            *o = a as f32;
        }
    }
    Tensor::from_f32(vec![b, m], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chip::ChipConfig;
    use crate::executor::ExecOptions;
    use crate::perf::TimingModel;
    use crate::rng::keyed;
    use rand::Rng;

    fn chip(cfg: ChipConfig, chips: usize) -> ChipBackend {
        ChipBackend::new(Executor::standalone(chips, cfg, TimingModel::default(), ExecOptions::default()).unwrap())
    }

    fn operands(b: usize, n: usize, m: usize, signed: bool, seed: u64) -> (Tensor, Tensor) {
        let mut r = keyed(&[seed]);
        let x = (0..b * n).map(|_| r.random_range(0..=31)).collect();
        let w = (0..n * m).map(|_| if signed { r.random_range(-63..=63) } else { r.random_range(0..=63) }).collect();
        (Tensor::from_u8(vec![b, n], x).unwrap(), Tensor::from_i8(vec![n, m], w).unwrap())
    }

    #[test]
    fn unit_weight_identity() {
        let x = Tensor::from_u8(vec![3, 1], vec![0, 7, 31]).unwrap();
        let w = Tensor::from_i8(vec![1, 1], vec![1]).unwrap();
        let sw = SoftwareModel::new(1.0).matmul_q(&x, &w, true, HwParams::default()).unwrap();
        let hw = chip(ChipConfig::noiseless(1.0), 1).matmul_q(&x, &w, true, HwParams::default()).unwrap();
        assert_eq!(sw.as_i32().unwrap(), &[0, 7, 31]);
        assert!(sw.bit_eq(&hw));
    }

    #[test]
    fn chip_equals_software_300_signed() {
        let (x, w) = operands(4, 300, 300, true, 1);
        let g = 1.0 / 64.0;
        let sw = SoftwareModel::new(g).matmul_q(&x, &w, true, HwParams::default()).unwrap();
        let hw = chip(ChipConfig::noiseless(g), 1).matmul_q(&x, &w, true, HwParams::default()).unwrap();
        assert!(sw.bit_eq(&hw));
    }

    #[test]
    fn software_blocks_digitize_separately() {
        // two unsigned blocks of 256 rows each saturate to 127 before summing
        let x = Tensor::from_u8(vec![1, 512], vec![31; 512]).unwrap();
        let w = Tensor::from_i8(vec![512, 1], vec![63; 512]).unwrap();
        let mut sw = SoftwareModel { gain: 1.0, digital_range: (-1000, 1000) };
        assert_eq!(sw.matmul_q(&x, &w, false, HwParams::default()).unwrap().as_i32().unwrap(), &[254]);
    }

    #[test]
    fn noisy_mean_tracks_software() {
        // temporal noise is drawn per batch row, so one batch of identical
        // rows gives independent repeats
        let cfg = ChipConfig { sigma_fixed: 0.0, sigma_offset: 0.0, ..ChipConfig::default() };
        let (x1, w) = operands(1, 40, 3, true, 5);
        let reps = 10_000;
        let x = Tensor::from_u8(vec![reps, 40], x1.as_u8().unwrap().repeat(reps)).unwrap();
        let y = chip(cfg.clone(), 1).matmul_q(&x, &w, true, HwParams::default()).unwrap();
        let (xs, ws) = (x1.as_u8().unwrap(), w.as_i8().unwrap());
        for j in 0..3 {
            let exact = cfg.gain as f64 * (0..40).map(|i| xs[i] as f64 * ws[i * 3 + j] as f64).sum::<f64>();
            assert!(exact.abs() < 120.0);
            let mean = y.as_i32().unwrap().iter().skip(j).step_by(3).map(|&v| v as f64).sum::<f64>() / reps as f64;
            let tol = 3.0 * cfg.sigma_temporal as f64 / (reps as f64).sqrt();
            assert!((mean - exact).abs() < tol, "column {j}: mean {mean}, expected {exact}");
        }
    }

    #[test]
    fn rejects_bad_operands() {
        let x = Tensor::from_u8(vec![1, 2], vec![1, 40]).unwrap();
        let w = Tensor::from_i8(vec![2, 1], vec![1, 1]).unwrap();
        assert!(matches!(SoftwareModel::new(1.0).matmul_q(&x, &w, false, HwParams::default()), Err(Error::InputOutOfRange { .. })));
        let x = Tensor::from_u8(vec![1, 2], vec![1, 4]).unwrap();
        let w = Tensor::from_i8(vec![2, 1], vec![1, -1]).unwrap();
        assert!(matches!(SoftwareModel::new(1.0).matmul_q(&x, &w, false, HwParams::default()), Err(Error::WeightOutOfRange { .. })));
        let w = Tensor::from_i8(vec![3, 1], vec![1, 1, 1]).unwrap();
        assert!(matches!(SoftwareModel::new(1.0).matmul_q(&x, &w, true, HwParams::default()), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn float_path_round_trips_scales() {
        let spec = QuantSpec::matched(0.5, 0.25, 1.0, true).unwrap();
        let x = Tensor::from_f32(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::from_f32(vec![2, 1], vec![0.5, -0.25]).unwrap();
        let y = matmul_float(&mut SoftwareModel::new(1.0), &x, &w, &spec, HwParams::default()).unwrap();
        assert_eq!(y.as_f32().unwrap(), matmul_f32(&x, &w).unwrap().as_f32().unwrap());
    }
}
