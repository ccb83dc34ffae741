//! Just-in-time execution of dependency graphs.
//!
//! Each execution instance passes through preprocess (gather and encode its
//! inputs), chip execution (configure the array, run one MAC per batch
//! entry) and postprocess (decode the digitized outputs). Host stages run
//! on a worker pool, chip execution on one thread per array, and a
//! coordinator releases instances as their inputs become available.
//!
//! Temporal noise is drawn from streams keyed by instance id and batch
//! index, so outputs do not depend on worker count or interleaving.

pub mod resources;
pub mod schedule;

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use crossbeam_channel::{unbounded, Sender};
use serde::{Deserialize, Serialize};

use crate::chip::{duplicate_inputs, signed_row_pairs, ChipConfig, SynapseArray};
use crate::error::{Error, Result};
use crate::graph::{ArrayBinding, DependencyGraph, InstanceId, Payload, SynapseBlock, Vertex, VertexId, VertexKind};
use crate::perf::{TileShape, TimingModel};
use crate::quantize::INPUT_MAX;
use crate::rng::{keyed, TAG_TEMPORAL};
use crate::tensor::Tensor;

pub use resources::{acquire_chips, hardware, hardware_init_count, init_hardware, ChipLease, ResourceManager};
pub use schedule::{schedule, ScheduleOptions, Stage, Timeline};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeMode {
    /// Timestamps come from the timing model.
    Simulated,
    /// Timestamps are wall-clock seconds since the start of the run.
    Measured,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExecOptions {
    /// Host threads; `None` sizes the pool to the machine, `Some(1)` runs
    /// everything on the calling thread. Simulated timestamps do not depend
    /// on it.
    pub workers: Option<usize>,
    /// Forbid any overlap between stages.
    pub serial: bool,
    pub run_seed: u64,
}

/// Per-task values and the measured stage intervals of one run.
type RunOutcome = (Vec<Option<Arc<Value>>>, Vec<schedule::Interval>);

/// Activations exchanged between tasks: `batch x width`, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Value {
    pub batch: usize,
    pub width: usize,
    pub data: Vec<i32>,
}

impl Value {
    pub fn into_tensor(self) -> Result<Tensor> {
        Tensor::from_i32(vec![self.batch, self.width], self.data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Instance id, or vertex id for digital tasks.
    pub id: u64,
    pub stage: Stage,
    pub t_start: f64,
    pub t_end: f64,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceBytes {
    pub id: InstanceId,
    pub bytes_config: u64,
    pub bytes_in: u64,
    pub bytes_out: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub records: Vec<TraceRecord>,
    pub instances: Vec<InstanceBytes>,
    pub makespan: f64,
}

impl RunTrace {
    pub fn total(&self, stage: Stage) -> f64 {
        self.records.iter().filter(|r| r.stage == stage).map(|r| r.t_end - r.t_start).sum()
    }

    pub fn utilization(&self) -> f64 {
        if self.makespan > 0.0 {
            self.total(Stage::Exec) / self.makespan
        } else {
            0.0
        }
    }

    pub fn record(&self, id: u64, stage: Stage) -> Option<&TraceRecord> {
        self.records.iter().find(|r| r.id == id && r.stage == stage)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("instance,stage,t_start,t_end,bytes\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{:.9e},{:.9e},{}", r.id, r.stage.name(), r.t_start, r.t_end, r.bytes);
        }
        out
    }
}

enum Work<'g> {
    Instance { id: InstanceId, load: &'g Vertex, block: &'g SynapseBlock, binding: ArrayBinding, last: VertexId },
    Digital { vertex: &'g Vertex },
}

struct Plan<'g> {
    work: Vec<Work<'g>>,
    deps: Vec<Vec<usize>>,
    /// Host-visible vertex -> producing task.
    producer: HashMap<VertexId, usize>,
    outputs: Vec<(usize, VertexId)>,
    widths: HashMap<VertexId, usize>,
}

impl<'g> Plan<'g> {
    fn new(graph: &'g DependencyGraph) -> Result<Self> {
        graph.validate().map_err(Error::InvalidGraph)?;
        let order = graph.vertex_order()?;
        let pos: HashMap<VertexId, usize> = order.iter().enumerate().map(|(i, v)| (*v, i)).collect();
        let index: HashMap<VertexId, &Vertex> = graph.vertices().iter().map(|v| (v.id, v)).collect();
        let owners = graph.owners();

        let mut keyed_work: Vec<(usize, Work)> = Vec::new();
        for inst in graph.instances() {
            let vs: Vec<&Vertex> = inst.vertices.iter().map(|v| index[v]).collect();
            let block = vs
                .iter()
                .find_map(|v| match &v.payload {
                    Payload::Synapse(b) => Some(b),
                    _ => None,
                })
                .ok_or_else(|| Error::KindMismatch(format!("instance {} has no synapse block", inst.id)))?;
            let first = inst.vertices.iter().map(|v| pos[v]).min().unwrap_or(0);
            keyed_work.push((
                first,
                Work::Instance { id: inst.id, load: vs[0], block, binding: inst.binding, last: *inst.vertices.last().unwrap() },
            ));
        }
        for v in graph.vertices() {
            if matches!(v.kind, VertexKind::Add | VertexKind::Concat) && !owners.contains_key(&v.id) {
                keyed_work.push((pos[&v.id], Work::Digital { vertex: v }));
            }
        }
        keyed_work.sort_by_key(|(p, _)| *p);
        let work: Vec<Work> = keyed_work.into_iter().map(|(_, w)| w).collect();

        let mut producer = HashMap::new();
        for (i, w) in work.iter().enumerate() {
            match w {
                Work::Instance { id, last, .. } => {
                    producer.insert(*last, i);
                    // the Store of an instance ending in ExternalStore holds the same value
                    let inst = graph.instance(*id).unwrap();
                    for v in &inst.vertices {
                        if index[v].kind == VertexKind::Store {
                            producer.insert(*v, i);
                        }
                    }
                }
                Work::Digital { vertex } => {
                    producer.insert(vertex.id, i);
                }
            }
        }
        let deps = work
            .iter()
            .map(|w| {
                let inputs: &[VertexId] = match w {
                    Work::Instance { load, .. } => &load.inputs,
                    Work::Digital { vertex } => &vertex.inputs,
                };
                let mut d: Vec<usize> = inputs.iter().filter_map(|v| producer.get(v).copied()).collect();
                d.sort_unstable();
                d.dedup();
                d
            })
            .collect();

        let mut outputs = Vec::new();
        for v in graph.vertices() {
            if let (VertexKind::ExternalStore, Payload::Output { slot }) = (v.kind, &v.payload) {
                let src = if owners.contains_key(&v.id) { v.id } else { v.inputs[0] };
                outputs.push((*slot, src));
            }
        }
        outputs.sort_unstable();
        for (k, (slot, _)) in outputs.iter().enumerate() {
            if *slot != k {
                return Err(Error::ShapeMismatch(format!("output slots must be 0..{}, found slot {slot}", outputs.len())));
            }
        }
        Ok(Plan { work, deps, producer, outputs, widths: graph.widths()? })
    }

    fn inputs_of(&self, task: usize) -> &'g [VertexId] {
        match &self.work[task] {
            Work::Instance { load, .. } => &load.inputs,
            Work::Digital { vertex } => &vertex.inputs,
        }
    }

    fn label(&self, task: usize) -> u64 {
        match &self.work[task] {
            Work::Instance { id, .. } => id.0,
            Work::Digital { vertex } => vertex.id.0,
        }
    }
}

fn batch_of(inputs: &[Tensor]) -> Result<usize> {
    let mut batch = None;
    for (k, t) in inputs.iter().enumerate() {
        if t.rank() != 2 {
            return Err(Error::ShapeMismatch(format!("input {k} must be [batch, features], got {:?}", t.shape())));
        }
        t.as_u8()?;
        match batch {
            None => batch = Some(t.dim(0)),
            Some(b) if b != t.dim(0) => {
                return Err(Error::ShapeMismatch(format!("input {k} has batch {}, expected {b}", t.dim(0))))
            }
            _ => {}
        }
    }
    match batch {
        Some(b) if b >= 1 => Ok(b),
        _ => Err(Error::ShapeMismatch("a run needs at least one input with batch >= 1".into())),
    }
}

/// Input rows for one instance, in physical row order.
struct Prepared {
    batch: usize,
    rows: usize,
    x: Vec<u8>,
}

fn to_inputs(data: &[i32]) -> Result<Vec<u8>> {
    data.iter()
        .enumerate()
        .map(|(i, &v)| {
            if (0..=INPUT_MAX as i32).contains(&v) {
                Ok(v as u8)
            } else {
                Err(Error::InputOutOfRange { value: v, index: i })
            }
        })
        .collect()
}

fn preprocess(load: &Vertex, block: &SynapseBlock, inputs: &[Tensor], upstream: Option<&Value>) -> Result<Prepared> {
    let (batch, logical) = match (&load.payload, upstream) {
        (Payload::InputSlice { input, start, end }, _) => {
            let t = inputs
                .get(*input)
                .ok_or_else(|| Error::ShapeMismatch(format!("graph reads input {input}, {} given", inputs.len())))?;
            let (b, n) = (t.dim(0), t.dim(1));
            if *end > n {
                return Err(Error::ShapeMismatch(format!("slice {start}..{end} of input {input} with {n} features")));
            }
            let data = t.as_u8()?;
            let mut x = Vec::with_capacity(b * (end - start));
            for r in 0..b {
                x.extend_from_slice(&data[r * n + start..r * n + end]);
            }
            if let Some(i) = x.iter().position(|&v| v > INPUT_MAX) {
                return Err(Error::InputOutOfRange { value: x[i] as i32, index: i });
            }
            (b, x)
        }
        (_, Some(v)) => (v.batch, to_inputs(&v.data)?),
        _ => return Err(Error::KindMismatch(format!("load {} has no data source", load.id))),
    };
    if logical.len() != batch * block.rows {
        return Err(Error::ShapeMismatch(format!("{} input values for {batch} x {} rows", logical.len(), block.rows)));
    }
    if !block.signed {
        return Ok(Prepared { batch, rows: block.rows, x: logical });
    }
    Ok(Prepared { batch, rows: 2 * block.rows, x: duplicate_inputs(&logical) })
}

struct ExecContext<'a> {
    cfg: &'a ChipConfig,
    run_seed: u64,
}

fn configure(array: &mut SynapseArray, block: &SynapseBlock) -> Result<()> {
    if block.signed {
        array.configure_paired(&signed_row_pairs(&block.weights, block.rows, block.cols)?)
    } else {
        array.configure_block(&block.weights, block.rows, block.cols, None)
    }
}

fn temporal_stream(ctx: &ExecContext, id: InstanceId, b: usize) -> crate::rng::StreamRng {
    keyed(&[ctx.cfg.chip_seed, ctx.run_seed, id.0, b as u64, TAG_TEMPORAL])
}

fn execute(array: &mut SynapseArray, id: InstanceId, block: &SynapseBlock, p: &Prepared, ctx: &ExecContext) -> Result<Vec<i8>> {
    configure(array, block)?;
    let mut out = vec![0i8; p.batch * block.cols];
    for b in 0..p.batch {
        let mut rng = temporal_stream(ctx, id, b);
        array.mac_into(
            &p.x[b * p.rows..(b + 1) * p.rows],
            &mut out[b * block.cols..(b + 1) * block.cols],
            &block.hw,
            ctx.cfg,
            &mut rng,
        )?;
    }
    Ok(out)
}

fn postprocess(raw: Vec<i8>, batch: usize, cols: usize) -> Value {
    Value { batch, width: cols, data: raw.into_iter().map(i32::from).collect() }
}

fn digital(vertex: &Vertex, args: &[&Value]) -> Result<Value> {
    match vertex.payload {
        Payload::Add { lo, hi } => {
            let first = args[0];
            let mut acc = vec![0i32; first.data.len()];
            for a in args {
                if (a.batch, a.width) != (first.batch, first.width) {
                    return Err(Error::ShapeMismatch(format!("add of {}x{} and {}x{}", first.batch, first.width, a.batch, a.width)));
                }
                for (s, &v) in acc.iter_mut().zip(&a.data) {
                    *s = s.saturating_add(v);
                }
            }
            acc.iter_mut().for_each(|v| *v = (*v).clamp(lo, hi));
            Ok(Value { batch: first.batch, width: first.width, data: acc })
        }
        Payload::Concat { axis: 1 } => {
            let batch = args[0].batch;
            if args.iter().any(|a| a.batch != batch) {
                return Err(Error::ShapeMismatch("column concat of differing batch sizes".into()));
            }
            let width = args.iter().map(|a| a.width).sum();
            let mut data = Vec::with_capacity(batch * width);
            for r in 0..batch {
                for a in args {
                    data.extend_from_slice(&a.data[r * a.width..(r + 1) * a.width]);
                }
            }
            Ok(Value { batch, width, data })
        }
        Payload::Concat { .. } => {
            let width = args[0].width;
            if args.iter().any(|a| a.width != width) {
                return Err(Error::ShapeMismatch("batch concat of differing widths".into()));
            }
            let data: Vec<i32> = args.iter().flat_map(|a| a.data.iter().copied()).collect();
            Ok(Value { batch: data.len() / width.max(1), width, data })
        }
        _ => Err(Error::KindMismatch(format!("{} is not a digital operation", vertex.id))),
    }
}

enum Msg {
    Pre(usize, Result<Prepared>, f64, f64),
    Exec(usize, Result<(Vec<i8>, usize)>, f64, f64),
    Done(usize, Result<Value>, Stage, f64, f64),
}

enum HostJob {
    Pre(usize, Option<Arc<Value>>),
    Post(usize, Vec<i8>, usize),
    Digital(usize, Vec<Arc<Value>>),
}

pub struct Executor {
    lease: ChipLease,
    timing: TimingModel,
    opts: ExecOptions,
}

impl Executor {
    pub fn new(lease: ChipLease, timing: TimingModel, opts: ExecOptions) -> Self {
        Executor { lease, timing, opts }
    }

    /// Executor over a private set of `n_chips` chips.
    pub fn standalone(n_chips: usize, cfg: ChipConfig, timing: TimingModel, opts: ExecOptions) -> Result<Self> {
        let lease = ResourceManager::new(n_chips, cfg)?.acquire(n_chips)?;
        Ok(Self::new(lease, timing, opts))
    }

    pub fn config(&self) -> &ChipConfig {
        self.lease.config()
    }

    pub fn arrays(&self) -> Vec<ArrayBinding> {
        self.lease.arrays()
    }

    pub fn lease(&self) -> &ChipLease {
        &self.lease
    }

    pub fn timing(&self) -> &TimingModel {
        &self.timing
    }

    pub fn options(&self) -> ExecOptions {
        self.opts
    }

    pub fn set_options(&mut self, opts: ExecOptions) {
        self.opts = opts;
    }

    pub fn set_run_seed(&mut self, seed: u64) {
        self.opts.run_seed = seed;
    }

    fn check_bindings(&self, plan: &Plan) -> Result<()> {
        for w in &plan.work {
            if let Work::Instance { binding, .. } = w {
                self.lease.array(*binding)?;
            }
        }
        Ok(())
    }

    fn tasks(&self, plan: &Plan, batch: usize) -> Result<(Vec<schedule::Task>, Vec<u64>)> {
        let mut array_slot: BTreeMap<ArrayBinding, usize> = BTreeMap::new();
        let mut tasks = Vec::with_capacity(plan.work.len());
        let mut bytes = Vec::with_capacity(plan.work.len());
        for (i, w) in plan.work.iter().enumerate() {
            let kind = match w {
                Work::Instance { block, binding, .. } => {
                    let next = array_slot.len();
                    let array = *array_slot.entry(*binding).or_insert(next);
                    let tile = TileShape { rows: block.physical_rows(), cols: block.cols };
                    let s = self.timing.instance(tile, batch, &block.hw);
                    bytes.push(self.timing.cost.bytes_config(tile.rows, tile.cols));
                    schedule::TaskKind::Instance { pre: s.pre, exec: s.exec, post: s.post, array }
                }
                Work::Digital { vertex } => {
                    let b: u64 = vertex.inputs.iter().map(|v| (plan.widths.get(v).copied().unwrap_or(0) * batch * 4) as u64).sum();
                    bytes.push(b);
                    schedule::TaskKind::Digital { duration: self.timing.host_time(b) }
                }
            };
            tasks.push(schedule::Task { kind, deps: plan.deps[i].clone() });
        }
        Ok((tasks, bytes))
    }

    /// Simulated timeline of `graph` at `batch`, without computing values.
    pub fn simulate(&self, graph: &DependencyGraph, batch: usize, opts: ScheduleOptions) -> Result<Timeline> {
        let plan = Plan::new(graph)?;
        self.check_bindings(&plan)?;
        schedule(&self.tasks(&plan, batch)?.0, opts)
    }

    pub fn run(&mut self, graph: &DependencyGraph, inputs: &[Tensor], mode: TimeMode) -> Result<(Vec<Tensor>, RunTrace)> {
        let plan = Plan::new(graph)?;
        self.check_bindings(&plan)?;
        let batch = batch_of(inputs)?;
        let inline = self.opts.serial || self.opts.workers == Some(1);
        let (values, measured) = if inline { self.run_inline(&plan, inputs)? } else { self.run_threaded(&plan, inputs)? };

        let (tasks, digital_bytes) = self.tasks(&plan, batch)?;
        let intervals = match mode {
            TimeMode::Simulated => {
                schedule(&tasks, ScheduleOptions { workers: None, serial: self.opts.serial })?.intervals
            }
            TimeMode::Measured => measured,
        };
        let mut trace = RunTrace::default();
        for w in &plan.work {
            if let Work::Instance { id, block, .. } = w {
                let rows = block.physical_rows();
                trace.instances.push(InstanceBytes {
                    id: *id,
                    bytes_config: self.timing.cost.bytes_config(rows, block.cols),
                    bytes_in: self.timing.cost.bytes_in(rows, batch, block.hw.num_sends),
                    bytes_out: self.timing.cost.bytes_out(block.cols, batch),
                });
            }
        }
        for iv in &intervals {
            let bytes = match (&plan.work[iv.task], iv.stage) {
                (Work::Instance { block, .. }, Stage::Pre) => {
                    self.timing.cost.bytes_in(block.physical_rows(), batch, block.hw.num_sends)
                }
                (Work::Instance { .. }, Stage::Exec) => digital_bytes[iv.task],
                (Work::Instance { block, .. }, _) => self.timing.cost.bytes_out(block.cols, batch),
                (Work::Digital { .. }, _) => digital_bytes[iv.task],
            };
            trace.records.push(TraceRecord { id: plan.label(iv.task), stage: iv.stage, t_start: iv.start, t_end: iv.end, bytes });
        }
        trace.makespan = intervals.iter().map(|i| i.end).fold(0.0, f64::max);

        let outputs = plan
            .outputs
            .iter()
            .map(|(_, src)| {
                let task = plan.producer.get(src).ok_or_else(|| Error::KindMismatch(format!("output {src} has no producer")))?;
                Value::clone(values[*task].as_ref().expect("all tasks completed")).into_tensor()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((outputs, trace))
    }

    fn upstream(&self, plan: &Plan, values: &[Option<Arc<Value>>], task: usize) -> Vec<Arc<Value>> {
        plan.inputs_of(task)
            .iter()
            .filter_map(|v| plan.producer.get(v).and_then(|&p| values[p].clone()))
            .collect()
    }

    fn run_inline(&self, plan: &Plan, inputs: &[Tensor]) -> Result<RunOutcome> {
        let ctx = ExecContext { cfg: self.config(), run_seed: self.opts.run_seed };
        let t0 = Instant::now();
        let now = || t0.elapsed().as_secs_f64();
        let mut values: Vec<Option<Arc<Value>>> = vec![None; plan.work.len()];
        let mut intervals = Vec::new();
        let order = schedule::task_order(&plan.deps.iter().map(|d| schedule::Task { kind: schedule::TaskKind::Digital { duration: 0.0 }, deps: d.clone() }).collect::<Vec<_>>())?;
        for task in order {
            let up = self.upstream(plan, &values, task);
            match &plan.work[task] {
                Work::Instance { id, load, block, binding, .. } => {
                    let s = now();
                    let p = preprocess(load, block, inputs, up.first().map(|v| v.as_ref()))?;
                    let e = now();
                    intervals.push(schedule::Interval { task, stage: Stage::Pre, start: s, end: e });
                    let raw = {
                        let mut array = self.lease.array(*binding)?.lock().unwrap_or_else(|e| e.into_inner());
                        execute(&mut array, *id, block, &p, &ctx)?
                    };
                    let x = now();
                    intervals.push(schedule::Interval { task, stage: Stage::Exec, start: e, end: x });
                    values[task] = Some(Arc::new(postprocess(raw, p.batch, block.cols)));
                    intervals.push(schedule::Interval { task, stage: Stage::Post, start: x, end: now() });
                }
                Work::Digital { vertex } => {
                    let s = now();
                    let args: Vec<&Value> = up.iter().map(|v| v.as_ref()).collect();
                    values[task] = Some(Arc::new(digital(vertex, &args)?));
                    intervals.push(schedule::Interval { task, stage: Stage::Digital, start: s, end: now() });
                }
            }
        }
        Ok((values, intervals))
    }

    fn run_threaded(&self, plan: &Plan, inputs: &[Tensor]) -> Result<RunOutcome> {
        let n = plan.work.len();
        let hosts = self
            .opts
            .workers
            .unwrap_or_else(|| std::thread::available_parallelism().map(|p| p.get()).unwrap_or(4))
            .clamp(1, n.max(1));
        let ctx = ExecContext { cfg: self.config(), run_seed: self.opts.run_seed };
        let t0 = Instant::now();
        let mut bindings: Vec<ArrayBinding> = plan
            .work
            .iter()
            .filter_map(|w| match w {
                Work::Instance { binding, .. } => Some(*binding),
                Work::Digital { .. } => None,
            })
            .collect();
        bindings.sort_unstable();
        bindings.dedup();

        std::thread::scope(|s| {
            let (msg_tx, msg_rx) = unbounded::<Msg>();
            let (host_tx, host_rx) = unbounded::<HostJob>();
            for _ in 0..hosts {
                let (rx, tx) = (host_rx.clone(), msg_tx.clone());
                s.spawn(move || {
                    for job in rx.iter() {
                        let start = t0.elapsed().as_secs_f64();
                        let msg = match job {
                            HostJob::Pre(task, up) => {
                                let Work::Instance { load, block, .. } = &plan.work[task] else { unreachable!() };
                                let r = preprocess(load, block, inputs, up.as_deref());
                                Msg::Pre(task, r, start, t0.elapsed().as_secs_f64())
                            }
                            HostJob::Post(task, raw, batch) => {
                                let Work::Instance { block, .. } = &plan.work[task] else { unreachable!() };
                                let v = postprocess(raw, batch, block.cols);
                                Msg::Done(task, Ok(v), Stage::Post, start, t0.elapsed().as_secs_f64())
                            }
                            HostJob::Digital(task, args) => {
                                let Work::Digital { vertex } = &plan.work[task] else { unreachable!() };
                                let refs: Vec<&Value> = args.iter().map(|a| a.as_ref()).collect();
                                Msg::Done(task, digital(vertex, &refs), Stage::Digital, start, t0.elapsed().as_secs_f64())
                            }
                        };
                        if tx.send(msg).is_err() {
                            break;
                        }
                    }
                });
            }
            let mut exec_tx: HashMap<ArrayBinding, Sender<(usize, Prepared)>> = HashMap::new();
            for &b in &bindings {
                let (tx, rx) = unbounded::<(usize, Prepared)>();
                exec_tx.insert(b, tx);
                let (out, ctx, array) = (msg_tx.clone(), &ctx, self.lease.array(b).expect("bindings checked"));
                s.spawn(move || {
                    for (task, p) in rx.iter() {
                        let Work::Instance { id, block, .. } = &plan.work[task] else { unreachable!() };
                        let start = t0.elapsed().as_secs_f64();
                        let r = {
                            let mut a = array.lock().unwrap_or_else(|e| e.into_inner());
                            execute(&mut a, *id, block, &p, ctx).map(|raw| (raw, p.batch))
                        };
                        let end = t0.elapsed().as_secs_f64();
                        if out.send(Msg::Exec(task, r, start, end)).is_err() {
                            break;
                        }
                    }
                });
            }
            drop(msg_tx);

            let coordinate = || -> Result<RunOutcome> {
                let mut values: Vec<Option<Arc<Value>>> = vec![None; n];
                let mut pending: Vec<usize> = plan.deps.iter().map(Vec::len).collect();
                let mut succ = vec![Vec::new(); n];
                for (i, d) in plan.deps.iter().enumerate() {
                    for &p in d {
                        succ[p].push(i);
                    }
                }
                let mut intervals = Vec::with_capacity(3 * n);
                let dispatch = |task: usize, values: &[Option<Arc<Value>>]| -> Result<()> {
                    let up = self.upstream(plan, values, task);
                    let job = match &plan.work[task] {
                        Work::Instance { .. } => HostJob::Pre(task, up.into_iter().next()),
                        Work::Digital { .. } => HostJob::Digital(task, up),
                    };
                    host_tx.send(job).map_err(|_| Error::DeadlockDetected("host workers exited".into()))
                };
                for (t, _) in pending.iter().enumerate().filter(|(_, &p)| p == 0) {
                    dispatch(t, &values)?;
                }
                let mut done = 0;
                while done < n {
                    let msg = msg_rx
                        .recv()
                        .map_err(|_| Error::DeadlockDetected(format!("{} of {n} tasks never completed", n - done)))?;
                    match msg {
                        Msg::Pre(task, r, a, b) => {
                            intervals.push(schedule::Interval { task, stage: Stage::Pre, start: a, end: b });
                            let Work::Instance { binding, .. } = &plan.work[task] else { unreachable!() };
                            exec_tx[binding]
                                .send((task, r?))
                                .map_err(|_| Error::DeadlockDetected("chip thread exited".into()))?;
                        }
                        Msg::Exec(task, r, a, b) => {
                            intervals.push(schedule::Interval { task, stage: Stage::Exec, start: a, end: b });
                            let (raw, batch) = r?;
                            host_tx
                                .send(HostJob::Post(task, raw, batch))
                                .map_err(|_| Error::DeadlockDetected("host workers exited".into()))?;
                        }
                        Msg::Done(task, r, stage, a, b) => {
                            intervals.push(schedule::Interval { task, stage, start: a, end: b });
                            values[task] = Some(Arc::new(r?));
                            done += 1;
                            for &s in &succ[task] {
                                pending[s] -= 1;
                                if pending[s] == 0 {
                                    dispatch(s, &values)?;
                                }
                            }
                        }
                    }
                }
                Ok((values, intervals))
            };
            let result = coordinate();
            drop(host_tx);
            drop(exec_tx);
            result
        })
    }

    /// Sequential interpretation of `graph`, vertex by vertex, on private
    /// copies of the leased arrays.
    pub fn run_reference(&self, graph: &DependencyGraph, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        graph.validate().map_err(Error::InvalidGraph)?;
        batch_of(inputs)?;
        let owners = graph.owners();
        let ctx = ExecContext { cfg: self.config(), run_seed: self.opts.run_seed };
        let mut arrays: HashMap<ArrayBinding, SynapseArray> = HashMap::new();
        let mut loads: HashMap<VertexId, (usize, Vec<u8>)> = HashMap::new();
        let mut analog: HashMap<VertexId, (usize, usize, Vec<i8>)> = HashMap::new();
        let mut host: HashMap<VertexId, Value> = HashMap::new();
        let mut outputs: BTreeMap<usize, Value> = BTreeMap::new();
        for id in graph.vertex_order()? {
            let v = graph.vertex(id).unwrap();
            match v.kind {
                VertexKind::ExternalLoad => {
                    let x = match &v.payload {
                        Payload::InputSlice { input, start, end } => {
                            let t = inputs.get(*input).ok_or_else(|| Error::ShapeMismatch(format!("missing input {input}")))?;
                            let (b, n) = (t.dim(0), t.dim(1));
                            if *end > n {
                                return Err(Error::ShapeMismatch(format!("slice {start}..{end} of {n} features")));
                            }
                            let d = t.as_u8()?;
                            (b, (0..b).flat_map(|r| d[r * n + start..r * n + end].iter().copied()).collect())
                        }
                        _ => {
                            let src = &host[&v.inputs[0]];
                            (src.batch, to_inputs(&src.data)?)
                        }
                    };
                    loads.insert(id, x);
                }
                VertexKind::SynapseMatrix => {
                    let Payload::Synapse(block) = &v.payload else { unreachable!() };
                    let (batch, x) = &loads[&v.inputs[0]];
                    if let Some(i) = x.iter().position(|&a| a > INPUT_MAX) {
                        return Err(Error::InputOutOfRange { value: x[i] as i32, index: i });
                    }
                    let inst = graph.instance(owners[&id]).unwrap();
                    let array = match arrays.entry(inst.binding) {
                        std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
                        std::collections::hash_map::Entry::Vacant(e) => {
                            let a = self.lease.array(inst.binding)?.lock().unwrap_or_else(|e| e.into_inner()).clone();
                            e.insert(a)
                        }
                    };
                    configure(array, block)?;
                    let mut out = vec![0i8; batch * block.cols];
                    for b in 0..*batch {
                        let row = &x[b * block.rows..(b + 1) * block.rows];
                        let phys: Vec<u8> = if block.signed { row.iter().flat_map(|&a| [a, a]).collect() } else { row.to_vec() };
                        let mut rng = temporal_stream(&ctx, inst.id, b);
                        array.mac_into(&phys, &mut out[b * block.cols..(b + 1) * block.cols], &block.hw, ctx.cfg, &mut rng)?;
                    }
                    analog.insert(id, (*batch, block.cols, out));
                }
                VertexKind::Neurons | VertexKind::Digitize => {
                    let a = analog[&v.inputs[0]].clone();
                    analog.insert(id, a);
                }
                VertexKind::Store => {
                    let (batch, width, raw) = &analog[&v.inputs[0]];
                    host.insert(id, Value { batch: *batch, width: *width, data: raw.iter().map(|&r| r as i32).collect() });
                }
                VertexKind::Add | VertexKind::Concat => {
                    let args: Vec<&Value> = v.inputs.iter().map(|i| &host[i]).collect();
                    let r = digital(v, &args)?;
                    host.insert(id, r);
                }
                VertexKind::ExternalStore => {
                    let Payload::Output { slot } = v.payload else { unreachable!() };
                    let src = host.get(&v.inputs[0]).cloned().ok_or_else(|| Error::KindMismatch(format!("{id} stores no host value")))?;
                    outputs.insert(slot, src);
                }
            }
        }
        outputs.into_values().map(Value::into_tensor).collect()
    }
}

#[cfg(test)]
mod tests;
