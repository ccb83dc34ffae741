//! Browser demo: throughput curves, partition plans and output noise.

use anamac::chip::{ChipConfig, HwParams, SynapseArray};
use anamac::graph::ArrayBinding;
use anamac::partition::partition_matmul;
use anamac::perf::{asymptotic_rate, batch_sweep, Scenario};
use anamac::rng::keyed;
use rand::Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[derive(Serialize)]
struct RateCurve {
    scenario: String,
    batches: Vec<usize>,
    rates: Vec<f64>,
    asymptote: f64,
}

/// MAC rate of an `n x m` product versus batch size, log-spaced from 1 to
/// 10^5.
#[wasm_bindgen]
pub fn mac_rate_curve(scenario: &str, n: usize, m: usize) -> Result<String, JsError> {
    let s: Scenario = scenario.parse().map_err(js_err)?;
    if n == 0 || m == 0 || n > 256 || m > 256 {
        return Err(JsError::new("n and m must lie in 1..=256"));
    }
    let batches: Vec<usize> = (0..=50).map(|i| 10f64.powf(i as f64 / 10.0).round() as usize).collect();
    let points = batch_sweep(s, n, m, &batches);
    let curve = RateCurve {
        scenario: s.to_string(),
        batches,
        rates: points.iter().map(|p| p.rate).collect(),
        asymptote: asymptotic_rate(s, n, m),
    };
    serde_json::to_string(&curve).map_err(js_err)
}

#[derive(Serialize)]
struct Tile {
    rows: [usize; 2],
    cols: [usize; 2],
    chip: usize,
    array: usize,
    sequence: usize,
}

#[derive(Serialize)]
struct Plan {
    row_capacity: usize,
    full: usize,
    partial: usize,
    stripes: usize,
    tiles: Vec<Tile>,
}

/// Tiling of an `n x m` weight matrix over `chips` chips of two arrays.
#[wasm_bindgen]
pub fn partition_plan(n: usize, m: usize, signed: bool, chips: usize) -> Result<String, JsError> {
    if chips == 0 {
        return Err(JsError::new("need at least one chip"));
    }
    let arrays: Vec<ArrayBinding> = (0..chips).flat_map(|c| (0..2).map(move |a| ArrayBinding::new(c, a))).collect();
    let plan = partition_matmul(n, m, signed, &arrays).map_err(js_err)?;
    let (full, partial) = plan.allocation_counts();
    let tiles = plan
        .tiles
        .iter()
        .map(|t| Tile {
            rows: [t.rows.start, t.rows.end],
            cols: [t.cols.start, t.cols.end],
            chip: t.binding.chip,
            array: t.binding.array,
            sequence: t.sequence_index,
        })
        .collect();
    serde_json::to_string(&Plan { row_capacity: plan.row_capacity, full, partial, stripes: plan.n_stripes(), tiles }).map_err(js_err)
}

#[derive(Serialize)]
struct Histogram {
    lo: i32,
    counts: Vec<u32>,
    mean: f64,
    std: f64,
}

/// Repeats one MAC `reps` times on a fixed input and histograms the
/// deviation of every column from its mean.
#[wasm_bindgen]
pub fn noise_histogram(num_sends: u32, sigma_temporal: f32, reps: usize, seed: u32) -> Result<String, JsError> {
    let cfg = ChipConfig { sigma_temporal, chip_seed: seed as u64, ..ChipConfig::default() };
    cfg.validate().map_err(js_err)?;
    let hw = HwParams::new(num_sends, 2).map_err(js_err)?;
    let mut array = SynapseArray::new(0, &cfg);
    let mut r = keyed(&[seed as u64, 1]);
    let w: Vec<i8> = (0..array.weights().len()).map(|_| r.random_range(0..=4)).collect();
    array.configure(&w).map_err(js_err)?;
    let x: Vec<u8> = (0..64).map(|_| r.random_range(0..=31)).collect();

    let cols = 32;
    let reps = reps.clamp(2, 100_000);
    let mut samples = vec![0f64; reps * cols];
    let mut out = vec![0i8; cols];
    for rep in 0..reps {
        array.mac_into(&x, &mut out, &hw, &cfg, &mut r).map_err(js_err)?;
        for (j, &v) in out.iter().enumerate() {
            samples[rep * cols + j] = v as f64;
        }
    }
    let mut dev = Vec::with_capacity(samples.len());
    for j in 0..cols {
        let col: Vec<f64> = samples.iter().skip(j).step_by(cols).copied().collect();
        let mean = col.iter().sum::<f64>() / reps as f64;
        dev.extend(col.iter().map(|v| v - mean));
    }
    let mean = dev.iter().sum::<f64>() / dev.len() as f64;
    let std = (dev.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (dev.len() - 1) as f64).sqrt();
    let lo = -12;
    let mut counts = vec![0u32; 25];
    for d in dev {
        let bin = (d.round() as i32 - lo).clamp(0, 24) as usize;
        counts[bin] += 1;
    }
    serde_json::to_string(&Histogram { lo, counts, mean, std }).map_err(js_err)
}
