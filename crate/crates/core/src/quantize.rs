//! Conversion between framework floats and the chip's fixed-point domains.
//!
//! Inputs are 5-bit unsigned (`0..=31`), weights 6-bit magnitude with an
//! optional sign (`-63..=63`), and digitized outputs 8-bit signed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorData};

pub const INPUT_MAX: u8 = 31;
pub const WEIGHT_MAX: i8 = 63;
pub const OUTPUT_MIN: i32 = -128;
pub const OUTPUT_MAX: i32 = 127;

/// Per-layer scales, in float units per least significant bit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub input_scale: f32,
    pub weight_scale: f32,
    pub output_scale: f32,
    pub signed_weights: bool,
}

fn check_scale(s: f32) -> Result<()> {
    if s.is_finite() && s > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidScale(s))
    }
}

impl QuantSpec {
    pub fn new(input_scale: f32, weight_scale: f32, output_scale: f32, signed_weights: bool) -> Result<Self> {
        check_scale(input_scale)?;
        check_scale(weight_scale)?;
        check_scale(output_scale)?;
        Ok(QuantSpec { input_scale, weight_scale, output_scale, signed_weights })
    }

    /// Scales whose output scale makes `dequantize(mac(x_q, w_q)) ~ x . w`
    /// for an analog transfer gain `gain`.
    pub fn matched(input_scale: f32, weight_scale: f32, gain: f32, signed_weights: bool) -> Result<Self> {
        check_scale(gain)?;
        Self::new(input_scale, weight_scale, input_scale * weight_scale / gain, signed_weights)
    }
}

/// Convenience calibration: the scale mapping `max |v|` onto `levels`.
/// Falls back to 1.0 for an all-zero or empty slice.
pub fn scale_for_max(values: &[f32], levels: u8) -> f32 {
    let m = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if m > 0.0 && m.is_finite() {
        m / levels as f32
    } else {
        1.0
    }
}

fn check_finite(v: &[f32]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::NonFiniteInput(i)),
        None => Ok(()),
    }
}

/// `clamp(round(v / scale), lo, hi)` with ties rounded away from zero.
fn quantize_value(v: f32, scale: f32, lo: f32, hi: f32) -> f32 {
    (v / scale).round().clamp(lo, hi)
}

pub fn quantize_inputs(x: &Tensor, spec: &QuantSpec) -> Result<Tensor> {
    let v = x.as_f32()?;
    check_finite(v)?;
    let q = v
        .iter()
        .map(|&x| quantize_value(x, spec.input_scale, 0.0, INPUT_MAX as f32) as u8)
        .collect();
    Tensor::from_u8(x.shape().to_vec(), q)
}

pub fn quantize_weights(w: &Tensor, spec: &QuantSpec) -> Result<Tensor> {
    let v = w.as_f32()?;
    check_finite(v)?;
    let lo = if spec.signed_weights { -(WEIGHT_MAX as f32) } else { 0.0 };
    let q = v
        .iter()
        .map(|&x| quantize_value(x, spec.weight_scale, lo, WEIGHT_MAX as f32) as i8)
        .collect();
    Tensor::from_i8(w.shape().to_vec(), q)
}

/// Accepts digitized `i8` outputs or `i32` host sums.
pub fn dequantize_outputs(y: &Tensor, spec: &QuantSpec) -> Result<Tensor> {
    let s = spec.output_scale;
    let out = match y.data() {
        TensorData::I8(v) => v.iter().map(|&q| q as f32 * s).collect(),
        TensorData::I32(v) => v.iter().map(|&q| q as f32 * s).collect(),
        other => {
            return Err(Error::DTypeMismatch { expected: crate::tensor::DType::I8, found: other.dtype() })
        }
    };
    Tensor::from_f32(y.shape().to_vec(), out)
}

pub fn dequantize_inputs(x: &Tensor, spec: &QuantSpec) -> Result<Tensor> {
    let out = x.as_u8()?.iter().map(|&q| q as f32 * spec.input_scale).collect();
    Tensor::from_f32(x.shape().to_vec(), out)
}

pub fn dequantize_weights(w: &Tensor, spec: &QuantSpec) -> Result<Tensor> {
    let out = w.as_i8()?.iter().map(|&q| q as f32 * spec.weight_scale).collect();
    Tensor::from_f32(w.shape().to_vec(), out)
}

/// Quantized operands ready for the chip, with their range invariants
/// checked at construction.
#[derive(Clone, Debug)]
pub struct QuantizedOperands {
    inputs: Tensor,
    weights: Tensor,
    spec: QuantSpec,
}

impl QuantizedOperands {
    pub fn new(inputs: Tensor, weights: Tensor, spec: QuantSpec) -> Result<Self> {
        if let Some((i, &v)) = inputs.as_u8()?.iter().enumerate().find(|(_, &v)| v > INPUT_MAX) {
            return Err(Error::InputOutOfRange { value: v as i32, index: i });
        }
        let lo = if spec.signed_weights { -WEIGHT_MAX } else { 0 };
        if let Some((i, &v)) = weights.as_i8()?.iter().enumerate().find(|(_, &v)| v < lo || v > WEIGHT_MAX) {
            return Err(Error::WeightOutOfRange { value: v as i32, index: i });
        }
        Ok(QuantizedOperands { inputs, weights, spec })
    }

    pub fn quantize(x: &Tensor, w: &Tensor, spec: QuantSpec) -> Result<Self> {
        Self::new(quantize_inputs(x, &spec)?, quantize_weights(w, &spec)?, spec)
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn spec(&self) -> &QuantSpec {
        &self.spec
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(input: f32, weight: f32, signed: bool) -> QuantSpec {
        QuantSpec::new(input, weight, 1.0, signed).unwrap()
    }

    fn q_in(x: f32, s: f32) -> u8 {
        let t = Tensor::from_f32(vec![1], vec![x]).unwrap();
        quantize_inputs(&t, &spec(s, 1.0, true)).unwrap().as_u8().unwrap()[0]
    }

    fn q_w(w: f32, s: f32, signed: bool) -> i8 {
        let t = Tensor::from_f32(vec![1], vec![w]).unwrap();
        quantize_weights(&t, &spec(1.0, s, signed)).unwrap().as_i8().unwrap()[0]
    }

    #[test]
    fn input_examples() {
        assert_eq!(q_in(0.0, 0.37), 0);
        assert_eq!(q_in(31.7, 1.0), 31);
        assert_eq!(q_in(7.24, 0.5), 14);
        assert_eq!(q_in(-3.0, 1.0), 0);
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(q_in(2.5, 1.0), 3);
        assert_eq!(q_w(-2.5, 1.0, true), -3);
        assert_eq!(q_w(2.5, 1.0, true), 3);
    }

    #[test]
    fn weight_examples() {
        assert_eq!(q_w(-1000.0, 1.0, true), -63);
        assert_eq!(q_w(-5.0, 1.0, false), 0);
        assert_eq!(q_w(12.5, 0.25, true), 50);
    }

    #[test]
    fn output_examples() {
        let s = QuantSpec::new(1.0, 1.0, 1.0, true).unwrap();
        let y = Tensor::from_i8(vec![2], vec![0, -128]).unwrap();
        assert_eq!(dequantize_outputs(&y, &s).unwrap().as_f32().unwrap(), &[0.0, -128.0]);
        let s = QuantSpec::new(1.0, 1.0, 0.02, true).unwrap();
        let y = Tensor::from_i8(vec![1], vec![100]).unwrap();
        let v = dequantize_outputs(&y, &s).unwrap().as_f32().unwrap()[0];
        assert!((v - 2.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_rejected() {
        let t = Tensor::from_f32(vec![2], vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(quantize_inputs(&t, &spec(1.0, 1.0, true)), Err(Error::NonFiniteInput(1))));
        let t = Tensor::from_f32(vec![1], vec![f32::INFINITY]).unwrap();
        assert!(matches!(quantize_weights(&t, &spec(1.0, 1.0, true)), Err(Error::NonFiniteInput(0))));
    }

    #[test]
    fn scales_must_be_positive() {
        assert!(QuantSpec::new(0.0, 1.0, 1.0, true).is_err());
        assert!(QuantSpec::new(1.0, -1.0, 1.0, true).is_err());
        assert!(QuantSpec::new(1.0, 1.0, f32::NAN, true).is_err());
    }

    #[test]
    fn operands_reject_out_of_range() {
        let s = spec(1.0, 1.0, false);
        let x = Tensor::from_u8(vec![1], vec![32]).unwrap();
        let w = Tensor::from_i8(vec![1], vec![1]).unwrap();
        assert!(matches!(QuantizedOperands::new(x, w.clone(), s), Err(Error::InputOutOfRange { .. })));
        let x = Tensor::from_u8(vec![1], vec![1]).unwrap();
        let w = Tensor::from_i8(vec![1], vec![-1]).unwrap();
        assert!(matches!(QuantizedOperands::new(x, w, s), Err(Error::WeightOutOfRange { .. })));
    }

    #[test]
    fn scale_helper() {
        assert_eq!(scale_for_max(&[-62.0, 31.0], 31), 2.0);
        assert_eq!(scale_for_max(&[0.0], 63), 1.0);
    }

    proptest! {
        #[test]
        fn inputs_monotone(a in -100.0f32..100.0, b in -100.0f32..100.0, s in 0.01f32..10.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(q_in(lo, s) <= q_in(hi, s));
        }

        #[test]
        fn outputs_respect_ranges(v in prop::collection::vec(-1e4f32..1e4, 1..64), s in 0.001f32..100.0, signed: bool) {
            let t = Tensor::from_f32(vec![v.len()], v).unwrap();
            let sp = spec(s, s, signed);
            let ops = QuantizedOperands::quantize(&t, &t, sp);
            prop_assert!(ops.is_ok());
        }

        #[test]
        fn representable_values_are_fixed_points(codes in prop::collection::vec(-63i8..=63, 1..32), s in 0.01f32..4.0) {
            let sp = spec(1.0, s, true);
            let w = Tensor::from_i8(vec![codes.len()], codes.clone()).unwrap();
            let back = quantize_weights(&dequantize_weights(&w, &sp).unwrap(), &sp).unwrap();
            prop_assert_eq!(back.as_i8().unwrap(), &codes[..]);
        }
    }
}
