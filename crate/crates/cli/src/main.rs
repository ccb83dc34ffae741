use std::fs;
use std::path::{Path, PathBuf};

use anamac::chip::{ChipConfig, HwParams};
use anamac::executor::{ExecOptions, Executor, TimeMode};
use anamac::graph::ArrayBinding;
use anamac::lowering::{lower_conv, plan_expansion, ConvSpec};
use anamac::matmul::MatmulEngine;
use anamac::partition::{build_graph, partition_matmul, row_capacity, GraphOptions};
use anamac::perf::{batch_sweep, breakdown_csv, rate_csv, square_sizes, utilization_breakdown, Scenario, SWEEP_BATCH};
use anamac::tensor::{read_csv, read_tensor, write_csv, write_tensor};
use anamac::train::{
    self, load_checkpoint, load_har, save_checkpoint, Backend, HarConfig, MetricRow, TrainConfig,
};
use anamac::{DType, Tensor};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser)]
#[command(name = "anamac", version, about = "Analog multiply-accumulate array simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the activity-recognition model in software and/or on the chip.
    TrainHar(TrainHarArgs),
    /// Lower a convolution onto a matrix multiplication.
    LowerConv(LowerConvArgs),
    /// Split an N x M matrix across synapse arrays.
    Partition(PartitionArgs),
    /// Run one quantized matrix product on the simulated chip.
    Matmul(MatmulArgs),
    /// Write throughput sweeps and an execution trace as CSV.
    Bench(BenchArgs),
    /// Convert tensors between the binary container and CSV.
    Convert(ConvertArgs),
}

#[derive(Args)]
struct HardwareArgs {
    /// Chip configuration file (key = value).
    #[arg(long)]
    chip_config: Option<PathBuf>,
    /// Number of simulated chips.
    #[arg(long, default_value_t = 1)]
    chips: usize,
    /// Host worker threads (default: one per core).
    #[arg(long)]
    workers: Option<usize>,
}

impl HardwareArgs {
    fn chip(&self) -> Result<ChipConfig> {
        match &self.chip_config {
            Some(p) => ChipConfig::load(p).with_context(|| format!("reading {}", p.display())),
            None => Ok(ChipConfig::default()),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Software,
    Chip,
}

#[derive(Args)]
struct TrainHarArgs {
    /// Directory of the extracted UCI HAR dataset.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "software")]
    backend: BackendKind,
    /// Software epochs.
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    /// In-the-loop epochs on the chip backend.
    #[arg(long, default_value_t = 1)]
    hil_epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f32,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint to start from (directory or manifest.json).
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// Metrics CSV.
    #[arg(long, default_value = "metrics.csv")]
    out: PathBuf,
    /// Directory for the trained checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    hw: HardwareArgs,
}

#[derive(Args)]
struct LowerConvArgs {
    /// Convolution as JSON, inline or a file path, e.g.
    /// {"in_channels":9,"out_channels":16,"kernel":[32],"stride":[6],"input":[128]}
    #[arg(long)]
    spec: String,
    /// Dump the unrolled matrix layout as JSON.
    #[arg(long)]
    explain: bool,
    /// Kernel tensor [Co, Ci, k...] (i8); with --input runs the convolution.
    #[arg(long, requires = "input")]
    kernel: Option<PathBuf>,
    /// Input tensor [B, Ci, L...] (u8).
    #[arg(long, requires = "kernel")]
    input: Option<PathBuf>,
    /// Output tensor [B, Co, out...].
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    hw: HardwareArgs,
}

#[derive(Args)]
struct PartitionArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    m: usize,
    #[arg(long)]
    signed: bool,
    #[arg(long, default_value_t = 1)]
    chips: usize,
    /// Print the full plan as JSON.
    #[arg(long)]
    explain: bool,
    /// Write the dependency graph (zero weights) as JSON.
    #[arg(long)]
    graph: Option<PathBuf>,
}

#[derive(Args)]
struct MatmulArgs {
    /// Inputs [B, N] (u8, values 0..=31).
    #[arg(long)]
    x: PathBuf,
    /// Weights [N, M] (i8).
    #[arg(long)]
    w: PathBuf,
    #[arg(long)]
    signed: bool,
    #[arg(long, default_value_t = 1)]
    num_sends: u32,
    #[arg(long, default_value_t = 2)]
    wait_between_events: u32,
    #[arg(long, default_value_t = 0)]
    run_seed: u64,
    /// Output tensor (i32).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Execution trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    hw: HardwareArgs,
}

#[derive(Args)]
struct BenchArgs {
    /// Scenario for the breakdown and trace.
    #[arg(long, default_value = "sim_8g")]
    scenario: Scenario,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Batch sizes of the rate sweep.
    #[arg(long, value_delimiter = ',', default_values_t = [1, 10, 100, 200, 500, 1000, 2000, 5000, 10000, 100000])]
    batches: Vec<usize>,
    /// Size of the traced square matrix product.
    #[arg(long, default_value_t = 512)]
    trace_size: usize,
    #[arg(long, default_value_t = 100)]
    trace_batch: usize,
}

#[derive(Args)]
struct ConvertArgs {
    input: PathBuf,
    output: PathBuf,
    /// Element type when reading CSV.
    #[arg(long, value_enum, default_value = "f32")]
    dtype: DTypeArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum DTypeArg {
    F32,
    I32,
    U8,
    I8,
}

impl From<DTypeArg> for DType {
    fn from(d: DTypeArg) -> Self {
        match d {
            DTypeArg::F32 => DType::F32,
            DTypeArg::I32 => DType::I32,
            DTypeArg::U8 => DType::U8,
            DTypeArg::I8 => DType::I8,
        }
    }
}

fn is_csv(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn load(p: &Path, dtype: DType) -> Result<Tensor> {
    let t = if is_csv(p) {
        read_csv(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?, dtype)?
    } else {
        read_tensor(p)?
    };
    if t.dtype() != dtype {
        bail!("{}: expected {dtype:?}, found {:?}", p.display(), t.dtype());
    }
    Ok(t)
}

fn store(t: &Tensor, p: &Path) -> Result<()> {
    if is_csv(p) {
        fs::write(p, write_csv(t)?)?;
    } else {
        write_tensor(t, p)?;
    }
    Ok(())
}

fn executor(hw: &HardwareArgs, run_seed: u64) -> Result<Executor> {
    let opts = ExecOptions { workers: hw.workers, serial: false, run_seed };
    Ok(Executor::standalone(hw.chips, hw.chip()?, Default::default(), opts)?)
}

fn train_har(a: TrainHarArgs) -> Result<()> {
    let raw = load_har(&a.data)?;
    let cfg = HarConfig {
        software_epochs: a.epochs,
        hil_epochs: a.hil_epochs,
        lr: a.lr,
        hil_lr: a.lr,
        batch_size: a.batch_size,
        seed: a.seed,
        chip: a.hw.chip()?,
        n_chips: a.hw.chips,
        workers: a.hw.workers,
    };
    let mut rows: Vec<MetricRow> = Vec::new();
    let mut log = |r: MetricRow| {
        eprintln!("epoch {:>3} {:<10} {:.4}", r.epoch, r.split, r.accuracy);
        rows.push(r);
    };

    let model = match (&a.pretrained, a.backend) {
        (None, BackendKind::Chip) => {
            let report = train::run_har_experiment(&raw, &cfg, |r| log(r.clone()))?;
            report.retrained
        }
        (pretrained, backend) => {
            let mut model = match pretrained {
                Some(p) => load_checkpoint(p)?,
                None => train::har_model(a.seed)?,
            };
            let norm = match &model.normalizer {
                Some(n) => n.clone(),
                None => train::Normalizer::fit(&raw.train.x)?,
            };
            model.normalizer = Some(norm.clone());
            let data = raw.normalized_with(&norm)?;
            match backend {
                BackendKind::Software => {
                    let tc = TrainConfig { epochs: a.epochs, lr: a.lr, batch_size: a.batch_size, seed: a.seed, ..TrainConfig::default() };
                    let mut sw = Backend::software(&cfg.chip);
                    train::train_model(&mut model, &data.train, Some(&data.test), &mut sw, &tc, |m| m.rows().into_iter().for_each(&mut log))?;
                }
                BackendKind::Chip => {
                    train::run_chip_stage(&mut model, &data, &cfg, 0, &mut log)?;
                }
            }
            model
        }
    };
    fs::write(&a.out, train::metrics_csv(&rows))?;
    if let Some(dir) = &a.checkpoint {
        let manifest = save_checkpoint(&model, dir)?;
        eprintln!("checkpoint written to {}", manifest.display());
    }
    Ok(())
}

fn parse_spec(s: &str) -> Result<ConvSpec> {
    let text = if s.trim_start().starts_with('{') { s.to_string() } else { fs::read_to_string(s).with_context(|| format!("reading {s}"))? };
    let spec: ConvSpec = serde_json::from_str(&text).context("parsing the convolution spec")?;
    Ok(ConvSpec::new(spec.in_channels, spec.out_channels, spec.kernel, spec.stride, spec.input)?)
}

fn explain_conv(spec: &ConvSpec) -> serde_json::Value {
    let k1 = if spec.dims() == 2 { spec.kernel[1] } else { 1 };
    let layout: Vec<_> = (0..spec.rows())
        .map(|r| {
            let (t, c) = (r / spec.in_channels, r % spec.in_channels);
            let tap = if spec.dims() == 2 { vec![t / k1, t % k1] } else { vec![t] };
            json!({ "row": r, "channel": c, "tap": tap })
        })
        .collect();
    let expansion = if spec.dims() == 1 {
        match plan_expansion(spec, row_capacity(true), 256) {
            Ok(p) => json!({ "plan": p, "runs": p.runs(spec.positions()) }),
            Err(e) => json!({ "unavailable": e.to_string() }),
        }
    } else {
        json!({ "unavailable": "only 1-d convolutions are expanded" })
    };
    json!({
        "spec": spec,
        "output": spec.output(),
        "positions": spec.positions(),
        "matrix": { "rows": spec.rows(), "cols": spec.out_channels },
        "inputs_per_sample": { "rows": spec.positions(), "cols": spec.rows() },
        "row_layout": layout,
        "expansion": expansion,
    })
}

fn lower_conv_cmd(a: LowerConvArgs) -> Result<()> {
    let spec = parse_spec(&a.spec)?;
    if a.explain {
        println!("{}", serde_json::to_string_pretty(&explain_conv(&spec))?);
    } else {
        println!(
            "output {:?}, {} positions, kernel matrix {} x {}",
            spec.output(),
            spec.positions(),
            spec.rows(),
            spec.out_channels
        );
    }
    if let (Some(k), Some(x)) = (&a.kernel, &a.input) {
        let lowered = lower_conv(&spec, &load(k, DType::I8)?, &load(x, DType::U8)?)?;
        let mut chip = anamac::matmul::ChipBackend::new(executor(&a.hw, 0)?);
        let y = chip.matmul_q(&lowered.inputs, &lowered.weights, true, HwParams::default())?;
        let y = lowered.descriptor.fold(&y)?;
        match &a.out {
            Some(p) => store(&y, p)?,
            None => print!("{}", write_csv(&y.reshape(&[y.dim(0), y.len() / y.dim(0).max(1)])?)?),
        }
    }
    Ok(())
}

fn partition_cmd(a: PartitionArgs) -> Result<()> {
    let arrays: Vec<ArrayBinding> = (0..a.chips).flat_map(|c| (0..2).map(move |i| ArrayBinding::new(c, i))).collect();
    let plan = partition_matmul(a.n, a.m, a.signed, &arrays)?;
    if a.explain {
        println!("{}", plan.to_json()?);
    } else {
        let (full, partial) = plan.allocation_counts();
        println!("{} tiles ({full} full, {partial} partial) over {} arrays, {} column stripes", plan.tiles.len(), arrays.len(), plan.n_stripes());
    }
    if let Some(p) = &a.graph {
        let w = Tensor::zeros(DType::I8, vec![a.n, a.m])?;
        fs::write(p, build_graph(&plan, &w, &GraphOptions::default())?.to_json()?)?;
    }
    Ok(())
}

fn matmul_cmd(a: MatmulArgs) -> Result<()> {
    let x = load(&a.x, DType::U8)?;
    let w = load(&a.w, DType::I8)?;
    let (n, m) = w.matrix_dims()?;
    let hw = HwParams::new(a.num_sends, a.wait_between_events)?;
    let mut ex = executor(&a.hw, a.run_seed)?;
    let plan = partition_matmul(n, m, a.signed, &ex.arrays())?;
    let graph = build_graph(&plan, &w, &GraphOptions { hw, ..GraphOptions::default() })?;
    let (mut outs, trace) = ex.run(&graph, &[x], TimeMode::Simulated)?;
    let y = outs.remove(0);
    match &a.out {
        Some(p) => store(&y, p)?,
        None => print!("{}", write_csv(&y)?),
    }
    if let Some(p) = &a.trace {
        fs::write(p, trace.to_csv())?;
    }
    eprintln!("{} tiles, simulated makespan {:.6} s", plan.tiles.len(), trace.makespan);
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    fs::create_dir_all(&a.out_dir)?;
    let sweeps: Vec<_> = Scenario::ALL.iter().map(|&s| (s, batch_sweep(s, 256, 256, &a.batches))).collect();
    fs::write(a.out_dir.join("rates.csv"), rate_csv(&sweeps))?;
    let breakdown = utilization_breakdown(a.scenario, &square_sizes(), SWEEP_BATCH)?;
    fs::write(a.out_dir.join("breakdown.csv"), breakdown_csv(&breakdown))?;

    let n = a.trace_size;
    let opts = ExecOptions { workers: None, serial: false, run_seed: 0 };
    let mut ex = Executor::standalone(1, ChipConfig::default(), a.scenario.timing(), opts)?;
    let plan = partition_matmul(n, n, false, &ex.arrays())?;
    let w = Tensor::zeros(DType::I8, vec![n, n])?;
    let graph = build_graph(&plan, &w, &GraphOptions { hw: a.scenario.hw_params(), ..GraphOptions::default() })?;
    let x = Tensor::zeros(DType::U8, vec![a.trace_batch, n])?;
    let (_, trace) = ex.run(&graph, &[x], TimeMode::Simulated)?;
    fs::write(a.out_dir.join("trace.csv"), trace.to_csv())?;
    eprintln!("wrote rates.csv, breakdown.csv and trace.csv to {}", a.out_dir.display());
    Ok(())
}

fn convert(a: ConvertArgs) -> Result<()> {
    let t = if is_csv(&a.input) { load(&a.input, a.dtype.into())? } else { read_tensor(&a.input)? };
    store(&t, &a.output)
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::TrainHar(a) => train_har(a),
        Cmd::LowerConv(a) => lower_conv_cmd(a),
        Cmd::Partition(a) => partition_cmd(a),
        Cmd::Matmul(a) => matmul_cmd(a),
        Cmd::Bench(a) => bench(a),
        Cmd::Convert(a) => convert(a),
    }
}
