//! Behavioral model of one analog chip.
//!
//! A chip carries two synapse arrays of 256 rows x 256 columns. Each input
//! row drives a 5-bit value across its synapses; the charge collected on a
//! column is the sum of `x_i * w_ij`, perturbed by static per-synapse gain
//! deviations, per-neuron offsets, and per-run temporal noise, then
//! digitized to 8 bits.

use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::quantize::{INPUT_MAX, OUTPUT_MAX, OUTPUT_MIN, WEIGHT_MAX};
use crate::rng::{self, TAG_FIXED_GAIN, TAG_OFFSET};

pub const ARRAY_ROWS: usize = 256;
pub const ARRAY_COLS: usize = 256;
pub const ARRAYS_PER_CHIP: usize = 2;
/// Logical rows available when each signed weight occupies a row pair.
pub const SIGNED_ROWS: usize = ARRAY_ROWS / 2;

pub const DEFAULT_CHIP_CFG: &str = include_str!("../configs/chip_default.cfg");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HwVersion {
    V1,
    V2,
}

impl std::str::FromStr for HwVersion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "v1" => Ok(HwVersion::V1),
            "v2" => Ok(HwVersion::V2),
            _ => Err(Error::InvalidConfig(format!("unknown hardware version {s:?}"))),
        }
    }
}

impl fmt::Display for HwVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HwVersion::V1 => "v1",
            HwVersion::V2 => "v2",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChipConfig {
    pub chip_seed: u64,
    /// Std of the multiplicative per-synapse gain around 1.0.
    pub sigma_fixed: f32,
    /// Std of the additive per-neuron offset, in output LSB.
    pub sigma_offset: f32,
    /// Std of per-run additive noise at `num_sends = 1`, in output LSB.
    pub sigma_temporal: f32,
    /// Analog transfer gain from summed charge to output LSB.
    pub gain: f32,
    pub hw_version: HwVersion,
}

impl Default for ChipConfig {
    fn default() -> Self {
        ChipConfig::from_cfg_str(DEFAULT_CHIP_CFG).expect("shipped chip config parses")
    }
}

impl ChipConfig {
    /// No fixed-pattern or temporal noise; outputs equal the clamped
    /// integer product scaled by `gain`.
    pub fn noiseless(gain: f32) -> Self {
        ChipConfig {
            chip_seed: 0,
            sigma_fixed: 0.0,
            sigma_offset: 0.0,
            sigma_temporal: 0.0,
            gain,
            hw_version: HwVersion::V2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma_fixed", self.sigma_fixed),
            ("sigma_offset", self.sigma_offset),
            ("sigma_temporal", self.sigma_temporal),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.gain.is_finite() && self.gain > 0.0) {
            return Err(Error::InvalidConfig(format!("gain must be positive, got {}", self.gain)));
        }
        Ok(())
    }

    pub fn from_cfg_str(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        kv.only(&["chip_seed", "sigma_fixed", "sigma_offset", "sigma_temporal", "gain", "hw_version"])?;
        let cfg = ChipConfig {
            chip_seed: kv.get("chip_seed")?.unwrap_or(0),
            sigma_fixed: kv.require("sigma_fixed")?,
            sigma_offset: kv.require("sigma_offset")?,
            sigma_temporal: kv.require("sigma_temporal")?,
            gain: kv.require("gain")?,
            hw_version: kv.get("hw_version")?.unwrap_or(HwVersion::V2),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_cfg_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_cfg_string(&self) -> String {
        format!(
            "chip_seed = {}\nsigma_fixed = {}\nsigma_offset = {}\nsigma_temporal = {}\ngain = {}\nhw_version = {}\n",
            self.chip_seed, self.sigma_fixed, self.sigma_offset, self.sigma_temporal, self.gain, self.hw_version
        )
    }
}

/// Hardware hyperparameters of one execution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HwParams {
    /// How often each input vector is sent; temporal noise averages as
    /// `1/sqrt(num_sends)`.
    pub num_sends: u32,
    /// Clock cycles between successive input events. Only affects timing.
    pub wait_between_events: u32,
}

impl Default for HwParams {
    fn default() -> Self {
        HwParams { num_sends: 1, wait_between_events: 2 }
    }
}

impl HwParams {
    pub fn new(num_sends: u32, wait_between_events: u32) -> Result<Self> {
        let p = HwParams { num_sends, wait_between_events };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_sends == 0 || self.wait_between_events == 0 {
            return Err(Error::InvalidConfig(format!(
                "num_sends and wait_between_events must be >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn temporal_sigma(&self, cfg: &ChipConfig) -> f64 {
        cfg.sigma_temporal as f64 / (self.num_sends as f64).sqrt()
    }
}

/// Physical weights for a signed block: each logical row `i` becomes an
/// excitatory row `2i` holding `max(w, 0)` and an inhibitory row `2i + 1`
/// holding `max(-w, 0)`, whose contribution enters the MAC negated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairedRows {
    pub rows: usize,
    pub cols: usize,
    pub magnitudes: Vec<i8>,
    /// `+1` for excitatory rows, `-1` for inhibitory ones.
    pub row_sign: Vec<i8>,
}

pub fn signed_row_pairs(weights: &[i8], rows: usize, cols: usize) -> Result<PairedRows> {
    if weights.len() != rows * cols {
        return Err(Error::ShapeMismatch(format!("{} weights for a {rows}x{cols} block", weights.len())));
    }
    if rows > SIGNED_ROWS || cols > ARRAY_COLS {
        return Err(Error::ShapeMismatch(format!("signed block {rows}x{cols} exceeds {SIGNED_ROWS}x{ARRAY_COLS}")));
    }
    check_weights(weights)?;
    let mut magnitudes = vec![0i8; 2 * rows * cols];
    let mut row_sign = Vec::with_capacity(2 * rows);
    for r in 0..rows {
        for c in 0..cols {
            let w = weights[r * cols + c];
            magnitudes[2 * r * cols + c] = w.max(0);
            magnitudes[(2 * r + 1) * cols + c] = (-w).max(0);
        }
        row_sign.extend_from_slice(&[1, -1]);
    }
    Ok(PairedRows { rows: 2 * rows, cols, magnitudes, row_sign })
}

/// Input vector matching [`signed_row_pairs`]: every value is sent to both
/// rows of its pair.
pub fn duplicate_inputs(x: &[u8]) -> Vec<u8> {
    x.iter().flat_map(|&v| [v, v]).collect()
}

fn check_weights(weights: &[i8]) -> Result<()> {
    match weights.iter().position(|w| w.unsigned_abs() > WEIGHT_MAX as u8) {
        Some(i) => Err(Error::WeightOutOfRange { value: weights[i] as i32, index: i }),
        None => Ok(()),
    }
}

fn check_inputs(x: &[u8]) -> Result<()> {
    match x.iter().position(|&v| v > INPUT_MAX) {
        Some(i) => Err(Error::InputOutOfRange { value: x[i] as i32, index: i }),
        None => Ok(()),
    }
}

/// One 256 x 256 synapse array with its fixed-pattern deviations.
#[derive(Clone)]
pub struct SynapseArray {
    index: u64,
    weights: Vec<i8>,
    row_sign: Vec<i8>,
    fixed_gain: Vec<f32>,
    neuron_offset: Vec<f32>,
    // sign * weight * fixed_gain, refreshed on every configure
    effective: Vec<f64>,
    gain: f32,
}

impl fmt::Debug for SynapseArray {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SynapseArray").field("index", &self.index).field("gain", &self.gain).finish_non_exhaustive()
    }
}

impl SynapseArray {
    /// Creates array `index` of the system seeded by `cfg.chip_seed`. The
    /// fixed-pattern terms depend only on `(chip_seed, index)` and the sigmas.
    pub fn new(index: u64, cfg: &ChipConfig) -> Self {
        let mut g = rng::keyed(&[cfg.chip_seed, index, TAG_FIXED_GAIN]);
        let fixed_gain = (0..ARRAY_ROWS * ARRAY_COLS)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut g);
                (1.0 + cfg.sigma_fixed as f64 * z).max(0.0) as f32
            })
            .collect();
        let mut o = rng::keyed(&[cfg.chip_seed, index, TAG_OFFSET]);
        let neuron_offset = (0..ARRAY_COLS)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut o);
                (cfg.sigma_offset as f64 * z) as f32
            })
            .collect();
        let mut a = SynapseArray {
            index,
            weights: vec![0; ARRAY_ROWS * ARRAY_COLS],
            row_sign: vec![1; ARRAY_ROWS],
            fixed_gain,
            neuron_offset,
            effective: vec![0.0; ARRAY_ROWS * ARRAY_COLS],
            gain: cfg.gain,
        };
        a.refresh();
        a
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    pub fn weights(&self) -> &[i8] {
        &self.weights
    }

    pub fn row_sign(&self) -> &[i8] {
        &self.row_sign
    }

    pub fn fixed_gain(&self) -> &[f32] {
        &self.fixed_gain
    }

    pub fn neuron_offset(&self) -> &[f32] {
        &self.neuron_offset
    }

    pub fn gain(&self) -> f32 {
        self.gain
    }

    pub fn set_gain(&mut self, gain: f32) {
        self.gain = gain;
    }

    fn refresh(&mut self) {
        for r in 0..ARRAY_ROWS {
            let s = self.row_sign[r] as f64;
            for c in 0..ARRAY_COLS {
                let i = r * ARRAY_COLS + c;
                self.effective[i] = s * self.weights[i] as f64 * self.fixed_gain[i] as f64;
            }
        }
    }

    /// Writes a full 256 x 256 weight matrix; all rows excitatory.
    pub fn configure(&mut self, weights: &[i8]) -> Result<()> {
        if weights.len() != ARRAY_ROWS * ARRAY_COLS {
            return Err(Error::ShapeMismatch(format!("{} weights for a full array", weights.len())));
        }
        check_weights(weights)?;
        self.weights.copy_from_slice(weights);
        self.row_sign.fill(1);
        self.refresh();
        Ok(())
    }

    /// Writes a `rows x cols` block into the top-left corner and zeroes the
    /// rest of the array.
    pub fn configure_block(&mut self, block: &[i8], rows: usize, cols: usize, row_sign: Option<&[i8]>) -> Result<()> {
        if block.len() != rows * cols || rows > ARRAY_ROWS || cols > ARRAY_COLS {
            return Err(Error::ShapeMismatch(format!("{} weights for a {rows}x{cols} block", block.len())));
        }
        check_weights(block)?;
        self.weights.fill(0);
        for r in 0..rows {
            self.weights[r * ARRAY_COLS..r * ARRAY_COLS + cols].copy_from_slice(&block[r * cols..(r + 1) * cols]);
        }
        self.row_sign.fill(1);
        if let Some(signs) = row_sign {
            if signs.len() != rows || signs.iter().any(|s| s.abs() != 1) {
                return Err(Error::ShapeMismatch("row signs must be +-1, one per row".into()));
            }
            self.row_sign[..rows].copy_from_slice(signs);
        }
        self.refresh();
        Ok(())
    }

    pub fn configure_paired(&mut self, paired: &PairedRows) -> Result<()> {
        self.configure_block(&paired.magnitudes, paired.rows, paired.cols, Some(&paired.row_sign))
    }

    /// Runs one MAC over the first `x.len()` rows and reads the first
    /// `out.len()` columns. Undriven rows see a zero input. Temporal noise
    /// is drawn from `rng` in column order, one sample per read column.
    pub fn mac_into<R: Rng + ?Sized>(
        &self,
        x: &[u8],
        out: &mut [i8],
        params: &HwParams,
        cfg: &ChipConfig,
        rng: &mut R,
    ) -> Result<()> {
        if x.len() > ARRAY_ROWS || out.len() > ARRAY_COLS {
            return Err(Error::ShapeMismatch(format!("{} inputs / {} outputs exceed the array", x.len(), out.len())));
        }
        check_inputs(x)?;
        params.validate()?;
        let cols = out.len();
        let mut acc = [0.0f64; ARRAY_COLS];
        for (r, &xi) in x.iter().enumerate() {
            if xi == 0 {
                continue;
            }
            let xv = xi as f64;
            let row = &self.effective[r * ARRAY_COLS..r * ARRAY_COLS + cols];
            for (a, &w) in acc[..cols].iter_mut().zip(row) {
                *a += xv * w;
            }
        }
        let sigma = params.temporal_sigma(cfg);
        let g = self.gain as f64;
        for (j, y) in out.iter_mut().enumerate() {
            let mut v = g * acc[j] + self.neuron_offset[j] as f64;
            if sigma > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                v += sigma * z;
            }
            *y = v.round().clamp(OUTPUT_MIN as f64, OUTPUT_MAX as f64) as i8;
        }
        Ok(())
    }
}

/// Full-width MAC: 256 inputs in `0..=31`, 256 digitized outputs.
pub fn analog_mac<R: Rng + ?Sized>(
    array: &SynapseArray,
    x: &[u8],
    params: &HwParams,
    cfg: &ChipConfig,
    rng: &mut R,
) -> Result<Vec<i8>> {
    if x.len() != ARRAY_ROWS {
        return Err(Error::ShapeMismatch(format!("expected {ARRAY_ROWS} inputs, got {}", x.len())));
    }
    let mut out = vec![0i8; ARRAY_COLS];
    array.mac_into(x, &mut out, params, cfg, rng)?;
    Ok(out)
}
