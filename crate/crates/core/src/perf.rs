//! Link-budget timing model and MAC-rate curves.
//!
//! A chip run costs a fixed overhead plus the larger of its wire time and
//! its on-chip event time. Host pre/post stages cost a fixed overhead plus a
//! copy at host memory speed.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::chip::{HwParams, HwVersion};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::executor::schedule::{exposure, schedule, ScheduleOptions, Task, TaskKind};
use crate::graph::ArrayBinding;
use crate::partition::partition_matmul;

pub const LINK_8G_CFG: &str = include_str!("../configs/link_8g.cfg");
pub const LINK_1G_CFG: &str = include_str!("../configs/link_1g.cfg");

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkBudget {
    pub bandwidth_bps: f64,
    pub protocol_efficiency: f64,
    pub per_run_overhead_s: f64,
    pub clock_period_s: f64,
    pub host_stage_overhead_s: f64,
    pub host_bytes_per_s: f64,
}

impl LinkBudget {
    pub fn link_8g() -> Self {
        Self::from_cfg_str(LINK_8G_CFG).expect("shipped link config parses")
    }

    pub fn link_1g() -> Self {
        Self::from_cfg_str(LINK_1G_CFG).expect("shipped link config parses")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("bandwidth_bps", self.bandwidth_bps),
            ("clock_period_s", self.clock_period_s),
            ("host_bytes_per_s", self.host_bytes_per_s),
        ];
        for (k, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!("{k} must be positive, got {v}")));
            }
        }
        if !(self.protocol_efficiency > 0.0 && self.protocol_efficiency <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "protocol_efficiency must lie in (0, 1], got {}",
                self.protocol_efficiency
            )));
        }
        for (k, v) in [("per_run_overhead_s", self.per_run_overhead_s), ("host_stage_overhead_s", self.host_stage_overhead_s)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{k} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn from_cfg_str(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        kv.only(&[
            "bandwidth_bps",
            "protocol_efficiency",
            "per_run_overhead_s",
            "clock_period_s",
            "host_stage_overhead_s",
            "host_bytes_per_s",
        ])?;
        let link = LinkBudget {
            bandwidth_bps: kv.require("bandwidth_bps")?,
            protocol_efficiency: kv.require("protocol_efficiency")?,
            per_run_overhead_s: kv.require("per_run_overhead_s")?,
            clock_period_s: kv.require("clock_period_s")?,
            host_stage_overhead_s: kv.require("host_stage_overhead_s")?,
            host_bytes_per_s: kv.require("host_bytes_per_s")?,
        };
        link.validate()?;
        Ok(link)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_cfg_str(&std::fs::read_to_string(path)?)
    }

    fn effective_bytes_per_s(&self) -> f64 {
        self.bandwidth_bps * self.protocol_efficiency / 8.0
    }
}

/// Active region of one chip run, in physical rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileShape {
    pub rows: usize,
    pub cols: usize,
}

/// Byte and event counts of one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub version: HwVersion,
}

impl CostModel {
    pub fn bytes_config(&self, rows: usize, cols: usize) -> u64 {
        (rows * cols) as u64
    }

    pub fn bytes_in(&self, rows: usize, batch: usize, num_sends: u32) -> u64 {
        (rows * batch) as u64 * num_sends as u64
    }

    pub fn bytes_out(&self, cols: usize, batch: usize) -> u64 {
        (cols * batch) as u64
    }

    /// Number of times the configuration is sent per run.
    pub fn config_repeats(&self, batch: usize) -> u64 {
        match self.version {
            HwVersion::V1 => batch as u64,
            HwVersion::V2 => 1,
        }
    }

    pub fn wire_bytes(&self, tile: TileShape, batch: usize, hw: &HwParams) -> u64 {
        self.bytes_config(tile.rows, tile.cols) * self.config_repeats(batch)
            + self.bytes_in(tile.rows, batch, hw.num_sends)
            + self.bytes_out(tile.cols, batch)
    }

    pub fn event_time(&self, rows: usize, batch: usize, hw: &HwParams, clock_period_s: f64) -> f64 {
        batch as f64 * hw.num_sends as f64 * rows as f64 * hw.wait_between_events as f64 * clock_period_s
    }
}

pub fn time_per_run(tile: TileShape, batch: usize, hw: &HwParams, link: &LinkBudget, cost: &CostModel) -> f64 {
    let wire = cost.wire_bytes(tile, batch, hw) as f64 / link.effective_bytes_per_s();
    let event = cost.event_time(tile.rows, batch, hw, link.clock_period_s);
    link.per_run_overhead_s + wire.max(event)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub pre: f64,
    pub exec: f64,
    pub post: f64,
}

/// Durations used by the executor's simulated clock.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingModel {
    pub link: LinkBudget,
    pub cost: CostModel,
}

impl Default for TimingModel {
    fn default() -> Self {
        Scenario::Sim8g.timing()
    }
}

impl TimingModel {
    pub fn host_time(&self, bytes: u64) -> f64 {
        self.link.host_stage_overhead_s + bytes as f64 / self.link.host_bytes_per_s
    }

    pub fn instance(&self, tile: TileShape, batch: usize, hw: &HwParams) -> StageTimes {
        StageTimes {
            pre: self.host_time(self.cost.bytes_in(tile.rows, batch, hw.num_sends)),
            exec: time_per_run(tile, batch, hw, &self.link, &self.cost),
            post: self.host_time(self.cost.bytes_out(tile.cols, batch)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    V1Gbe1,
    V2Gbe1,
    Sim8g,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::V1Gbe1, Scenario::V2Gbe1, Scenario::Sim8g];

    pub fn link(self) -> LinkBudget {
        match self {
            Scenario::Sim8g => LinkBudget::link_8g(),
            _ => LinkBudget::link_1g(),
        }
    }

    pub fn version(self) -> HwVersion {
        match self {
            Scenario::V1Gbe1 => HwVersion::V1,
            _ => HwVersion::V2,
        }
    }

    /// v1 needs repeated, widely spaced inputs for usable precision.
    pub fn hw_params(self) -> HwParams {
        match self {
            Scenario::V1Gbe1 => HwParams { num_sends: 6, wait_between_events: 25 },
            _ => HwParams::default(),
        }
    }

    pub fn timing(self) -> TimingModel {
        TimingModel { link: self.link(), cost: CostModel { version: self.version() } }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::V1Gbe1 => "v1_1gbe",
            Scenario::V2Gbe1 => "v2_1gbe",
            Scenario::Sim8g => "sim_8g",
        })
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "v1_1gbe" => Ok(Scenario::V1Gbe1),
            "v2_1gbe" => Ok(Scenario::V2Gbe1),
            "sim_8g" => Ok(Scenario::Sim8g),
            _ => Err(Error::InvalidConfig(format!("unknown scenario {s:?}; expected v1_1gbe, v2_1gbe or sim_8g"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub x: usize,
    pub rate: f64,
}

pub const SWEEP_BATCH: usize = 2000;

/// MAC rate of one `n x m` unsigned run versus batch size.
pub fn batch_sweep(scenario: Scenario, n: usize, m: usize, batches: &[usize]) -> Vec<RatePoint> {
    let timing = scenario.timing();
    let hw = scenario.hw_params();
    let tile = TileShape { rows: n, cols: m };
    batches
        .iter()
        .map(|&b| RatePoint { x: b, rate: (b * n * m) as f64 / time_per_run(tile, b, &hw, &timing.link, &timing.cost) })
        .collect()
}

/// Limit of the batch sweep as the batch grows without bound.
pub fn asymptotic_rate(scenario: Scenario, n: usize, m: usize) -> f64 {
    let t = scenario.timing();
    let hw = scenario.hw_params();
    let tile = TileShape { rows: n, cols: m };
    // per-entry cost; v1 also resends the configuration for every entry
    let per_entry_bytes = match t.cost.version {
        HwVersion::V1 => t.cost.bytes_config(n, m),
        HwVersion::V2 => 0,
    } + t.cost.bytes_in(tile.rows, 1, hw.num_sends)
        + t.cost.bytes_out(tile.cols, 1);
    let wire = per_entry_bytes as f64 / t.link.effective_bytes_per_s();
    let event = t.cost.event_time(tile.rows, 1, &hw, t.link.clock_period_s);
    (n * m) as f64 / wire.max(event)
}

/// Tasks for one square `size x size` matmul tiled onto one array.
pub fn matmul_tasks(scenario: Scenario, size: usize, batch: usize) -> Result<Vec<Task>> {
    let timing = scenario.timing();
    let hw = scenario.hw_params();
    let plan = partition_matmul(size, size, false, &[ArrayBinding::new(0, 0)])?;
    let mut tasks: Vec<Task> = plan
        .tiles
        .iter()
        .map(|t| {
            let s = timing.instance(TileShape { rows: t.n_rows(), cols: t.n_cols() }, batch, &hw);
            Task { kind: TaskKind::Instance { pre: s.pre, exec: s.exec, post: s.post, array: 0 }, deps: vec![] }
        })
        .collect();
    let mut stripes = Vec::new();
    for group in &plan.row_groups {
        if group.len() == 1 {
            stripes.push((group[0], plan.tiles[group[0]].n_cols()));
            continue;
        }
        let cols = plan.tiles[group[0]].n_cols();
        let bytes = (group.len() * cols * batch * 4) as u64;
        tasks.push(Task { kind: TaskKind::Digital { duration: timing.host_time(bytes) }, deps: group.clone() });
        stripes.push((tasks.len() - 1, cols));
    }
    if stripes.len() > 1 {
        let bytes = (stripes.iter().map(|s| s.1).sum::<usize>() * batch * 4) as u64;
        tasks.push(Task {
            kind: TaskKind::Digital { duration: timing.host_time(bytes) },
            deps: stripes.iter().map(|s| s.0).collect(),
        });
    }
    Ok(tasks)
}

pub fn square_sizes() -> Vec<usize> {
    (0..=14).map(|e| 1usize << e).collect()
}

/// MAC rate of square matmuls including host stages and tiling.
pub fn size_sweep(scenario: Scenario, sizes: &[usize], batch: usize) -> Result<Vec<RatePoint>> {
    sizes
        .iter()
        .map(|&n| {
            let t = schedule(&matmul_tasks(scenario, n, batch)?, ScheduleOptions::default())?;
            Ok(RatePoint { x: n, rate: (batch * n * n) as f64 / t.makespan })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub size: usize,
    pub t_pre: f64,
    pub t_exec: f64,
    pub t_post: f64,
}

impl Breakdown {
    pub fn exec_fraction(&self) -> f64 {
        self.t_exec / (self.t_pre + self.t_exec + self.t_post)
    }
}

pub fn utilization_breakdown(scenario: Scenario, sizes: &[usize], batch: usize) -> Result<Vec<Breakdown>> {
    sizes
        .iter()
        .map(|&n| {
            let t = schedule(&matmul_tasks(scenario, n, batch)?, ScheduleOptions::default())?;
            let (t_pre, t_exec, t_post) = exposure(&t);
            Ok(Breakdown { size: n, t_pre, t_exec, t_post })
        })
        .collect()
}

pub fn rate_csv(rows: &[(Scenario, Vec<RatePoint>)]) -> String {
    let mut out = String::from("x,rate_mac_per_s,scenario\n");
    for (s, points) in rows {
        for p in points {
            out.push_str(&format!("{},{:.6e},{}\n", p.x, p.rate, s));
        }
    }
    out
}

pub fn breakdown_csv(rows: &[Breakdown]) -> String {
    let mut out = String::from("size,t_pre,t_exec,t_post\n");
    for b in rows {
        out.push_str(&format!("{},{:.9e},{:.9e},{:.9e}\n", b.size, b.t_pre, b.t_exec, b.t_post));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_overhead(link: LinkBudget) -> LinkBudget {
        LinkBudget { per_run_overhead_s: 0.0, ..link }
    }

    #[test]
    fn batch_zero_is_config_only() {
        let link = LinkBudget::link_1g();
        let cost = CostModel { version: HwVersion::V2 };
        let t = time_per_run(TileShape { rows: 256, cols: 256 }, 0, &HwParams::default(), &link, &cost);
        let config = 65536.0 * 8.0 / (link.bandwidth_bps * link.protocol_efficiency);
        assert!((t - (link.per_run_overhead_s + config)).abs() < 1e-15);
    }

    #[test]
    fn doubling_bandwidth_halves_wire_bound_time() {
        let link = zero_overhead(LinkBudget::link_1g());
        let fast = LinkBudget { bandwidth_bps: 2.0 * link.bandwidth_bps, ..link };
        let cost = CostModel { version: HwVersion::V2 };
        let tile = TileShape { rows: 256, cols: 256 };
        let a = time_per_run(tile, 100, &HwParams::default(), &link, &cost);
        let b = time_per_run(tile, 100, &HwParams::default(), &fast, &cost);
        assert!((a / b - 2.0).abs() < 1e-12);
    }

    #[test]
    fn v1_volume_factor() {
        let cost1 = CostModel { version: HwVersion::V1 };
        let cost2 = CostModel { version: HwVersion::V2 };
        let tile = TileShape { rows: 256, cols: 256 };
        let per_entry = |c: &CostModel, hw| c.wire_bytes(tile, 1001, &hw) - c.wire_bytes(tile, 1000, &hw);
        let v1 = per_entry(&cost1, Scenario::V1Gbe1.hw_params());
        let v2 = per_entry(&cost2, Scenario::V2Gbe1.hw_params());
        assert!(v1 >= 64 * v2, "{v1} vs {v2}");
    }

    #[test]
    fn half_rate_at_matching_volume() {
        // with a config volume c and per-entry volume v the rate is R b v / (c + b v)
        let link = zero_overhead(LinkBudget::link_1g());
        let cost = CostModel { version: HwVersion::V2 };
        let tile = TileShape { rows: 256, cols: 256 };
        let hw = HwParams::default();
        let c = cost.bytes_config(256, 256);
        let v = cost.bytes_in(256, 1, 1) + cost.bytes_out(256, 1);
        let b = (c / v) as usize;
        let rate = |b: usize| (b * 65536) as f64 / time_per_run(tile, b, &hw, &link, &cost);
        let r_max = 65536.0 / (v as f64 * 8.0 / (link.bandwidth_bps * link.protocol_efficiency));
        assert!((rate(b) / r_max - 0.5).abs() < 1e-9);
    }

    #[test]
    fn scenario_names_round_trip() {
        for s in Scenario::ALL {
            assert_eq!(s.to_string().parse::<Scenario>().unwrap(), s);
        }
        assert!("v3".parse::<Scenario>().is_err());
    }

    #[test]
    fn task_graph_for_large_sizes() {
        let tasks = matmul_tasks(Scenario::Sim8g, 1000, 10).unwrap();
        // 16 tiles, 4 stripe sums, 1 concat
        assert_eq!(tasks.len(), 21);
        assert_eq!(matmul_tasks(Scenario::Sim8g, 256, 10).unwrap().len(), 1);
    }

    #[test]
    fn config_files_validate() {
        assert!(LinkBudget::from_cfg_str("bandwidth_bps = 1").is_err());
        let bad = LINK_1G_CFG.replace("protocol_efficiency = 0.2", "protocol_efficiency = 1.5");
        assert!(LinkBudget::from_cfg_str(&bad).is_err());
    }

    #[test]
    fn csv_schema() {
        let csv = rate_csv(&[(Scenario::Sim8g, vec![RatePoint { x: 1, rate: 2.0 }])]);
        assert!(csv.starts_with("x,rate_mac_per_s,scenario\n1,"));
        assert!(csv.ends_with(",sim_8g\n"));
        let csv = breakdown_csv(&[Breakdown { size: 4, t_pre: 1.0, t_exec: 2.0, t_post: 3.0 }]);
        assert!(csv.starts_with("size,t_pre,t_exec,t_post\n4,"));
    }
}
