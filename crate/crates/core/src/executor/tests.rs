use super::*;
use crate::chip::{analog_mac, HwParams, ARRAY_ROWS};
use crate::graph::GraphBuilder;
use crate::rng::keyed;
use proptest::prelude::*;
use rand::Rng;

fn block(rows: usize, cols: usize, seed: u64) -> SynapseBlock {
    let mut r = keyed(&[seed, 99]);
    SynapseBlock { rows, cols, signed: false, weights: (0..rows * cols).map(|_| r.random_range(0..4)).collect(), hw: HwParams::default() }
}

fn input(batch: usize, n: usize, seed: u64) -> Tensor {
    let mut r = keyed(&[seed, 7]);
    Tensor::from_u8(vec![batch, n], (0..batch * n).map(|_| r.random_range(0..=31)).collect()).unwrap()
}

fn clamp_to_inputs() -> Payload {
    Payload::Add { lo: 0, hi: 31 }
}

/// Instances 1..4 with edges 1->2, 3->2 (through a sum) and 1->4.
fn four_instance_graph() -> DependencyGraph {
    let mut b = GraphBuilder::new();
    let bind = ArrayBinding::new(0, 0);
    let slice = Payload::InputSlice { input: 0, start: 0, end: 8 };
    let s1 = b.instance(InstanceId(1), bind, slice.clone(), &[], block(8, 8, 1)).unwrap();
    let s3 = b.instance(InstanceId(3), bind, slice, &[], block(8, 8, 3)).unwrap();
    let sum = b.add_vertex(VertexKind::Add, clamp_to_inputs(), &[s1, s3]).unwrap();
    let s2 = b.instance(InstanceId(2), bind, Payload::None, &[sum], block(8, 8, 2)).unwrap();
    let c1 = b.add_vertex(VertexKind::Add, clamp_to_inputs(), &[s1]).unwrap();
    let s4 = b.instance(InstanceId(4), bind, Payload::None, &[c1], block(8, 8, 4)).unwrap();
    b.add_vertex(VertexKind::ExternalStore, Payload::Output { slot: 0 }, &[s2]).unwrap();
    b.add_vertex(VertexKind::ExternalStore, Payload::Output { slot: 1 }, &[s4]).unwrap();
    b.finish().unwrap()
}

fn executor(cfg: ChipConfig, workers: Option<usize>, serial: bool) -> Executor {
    Executor::standalone(1, cfg, TimingModel::default(), ExecOptions { workers, serial, run_seed: 5 }).unwrap()
}

#[test]
fn single_instance_matches_chip_call() {
    let cfg = ChipConfig::default();
    let mut b = GraphBuilder::new();
    let blk = block(20, 10, 11);
    let st = b
        .instance(InstanceId(9), ArrayBinding::new(0, 1), Payload::InputSlice { input: 0, start: 0, end: 20 }, &[], blk.clone())
        .unwrap();
    b.add_vertex(VertexKind::ExternalStore, Payload::Output { slot: 0 }, &[st]).unwrap();
    let g = b.finish().unwrap();
    let x = input(3, 20, 1);
    let mut ex = executor(cfg.clone(), None, false);
    let (out, trace) = ex.run(&g, std::slice::from_ref(&x), TimeMode::Simulated).unwrap();

    let mut array = SynapseArray::new(1, &cfg);
    let mut full = vec![0i8; ARRAY_ROWS * 256];
    for r in 0..20 {
        full[r * 256..r * 256 + 10].copy_from_slice(&blk.weights[r * 10..(r + 1) * 10]);
    }
    array.configure(&full).unwrap();
    let xs = x.as_u8().unwrap();
    for bi in 0..3 {
        let mut xv = vec![0u8; ARRAY_ROWS];
        xv[..20].copy_from_slice(&xs[bi * 20..(bi + 1) * 20]);
        let mut rng = keyed(&[cfg.chip_seed, 5, 9, bi as u64, TAG_TEMPORAL]);
        let y = analog_mac(&array, &xv, &HwParams::default(), &cfg, &mut rng).unwrap();
        let got: Vec<i32> = out[0].as_i32().unwrap()[bi * 10..(bi + 1) * 10].to_vec();
        let want: Vec<i32> = y[..10].iter().map(|&v| v as i32).collect();
        assert_eq!(got, want);
    }
    assert_eq!(trace.instances.len(), 1);
    assert_eq!(trace.instances[0].bytes_config, 200);
    assert_eq!(trace.instances[0].bytes_in, 60);
    assert_eq!(trace.instances[0].bytes_out, 30);
}

#[test]
fn four_instance_pipeline() {
    let g = four_instance_graph();
    let x = input(16, 8, 2);
    let mut serial = executor(ChipConfig::default(), None, true);
    let (ref_out, serial_trace) = serial.run(&g, std::slice::from_ref(&x), TimeMode::Simulated).unwrap();
    let mut piped = executor(ChipConfig::default(), None, false);
    let (out, trace) = piped.run(&g, std::slice::from_ref(&x), TimeMode::Simulated).unwrap();
    assert!(trace.makespan < serial_trace.makespan);
    assert!(trace.utilization() > serial_trace.utilization());
    for (a, b) in out.iter().zip(&ref_out) {
        assert!(a.bit_eq(b));
    }
    let reference = piped.run_reference(&g, &[x]).unwrap();
    for (a, b) in out.iter().zip(&reference) {
        assert!(a.bit_eq(b));
    }

    let one = executor(ChipConfig::default(), Some(1), false);
    let t = one.simulate(&g, 16, ScheduleOptions { workers: Some(1), serial: false }).unwrap();
    // tasks are ordered 1, 3, sum, 2, clamp, 4
    let pre3 = t.of(1, Stage::Pre).unwrap();
    let exec1 = t.of(0, Stage::Exec).unwrap();
    assert!(pre3.start < exec1.end && exec1.start < pre3.end);
}

#[test]
fn worker_counts_agree() {
    let g = four_instance_graph();
    let x = input(5, 8, 3);
    let mut runs = Vec::new();
    for (w, serial) in [(None, false), (Some(1), false), (Some(2), false), (Some(3), false), (None, true)] {
        let mut ex = executor(ChipConfig::default(), w, serial);
        runs.push(ex.run(&g, std::slice::from_ref(&x), TimeMode::Measured).unwrap().0);
    }
    for r in &runs[1..] {
        for (a, b) in r.iter().zip(&runs[0]) {
            assert!(a.bit_eq(b));
        }
    }
}

#[test]
fn measured_trace_is_well_ordered() {
    let g = four_instance_graph();
    let mut ex = executor(ChipConfig::default(), None, false);
    let (_, trace) = ex.run(&g, &[input(4, 8, 4)], TimeMode::Measured).unwrap();
    for id in [1, 2, 3, 4] {
        let (p, e, q) = (
            trace.record(id, Stage::Pre).unwrap(),
            trace.record(id, Stage::Exec).unwrap(),
            trace.record(id, Stage::Post).unwrap(),
        );
        assert!(p.t_end <= e.t_start && e.t_end <= q.t_start);
    }
    let exec: Vec<_> = trace.records.iter().filter(|r| r.stage == Stage::Exec).collect();
    for a in &exec {
        for b in &exec {
            assert!(a.id == b.id || a.t_end <= b.t_start || b.t_end <= a.t_start);
        }
    }
    // producer 1 finishes before consumers 2 and 4 begin
    let done1 = trace.record(1, Stage::Post).unwrap().t_end;
    assert!(done1 <= trace.record(2, Stage::Pre).unwrap().t_start);
    assert!(done1 <= trace.record(4, Stage::Pre).unwrap().t_start);
    assert!(trace.to_csv().starts_with("instance,stage,t_start,t_end,bytes\n"));
}

#[test]
fn errors_surface() {
    let mut b = GraphBuilder::new();
    let st = b
        .instance(InstanceId(0), ArrayBinding::new(1, 0), Payload::InputSlice { input: 0, start: 0, end: 4 }, &[], block(4, 4, 0))
        .unwrap();
    b.add_vertex(VertexKind::ExternalStore, Payload::Output { slot: 0 }, &[st]).unwrap();
    let g = b.finish().unwrap();
    let mut ex = executor(ChipConfig::noiseless(1.0), None, false);
    assert!(matches!(ex.run(&g, &[input(1, 4, 0)], TimeMode::Simulated), Err(Error::UnboundArray { chip: 1, array: 0 })));

    let mut b = GraphBuilder::new();
    let st = b
        .instance(InstanceId(0), ArrayBinding::new(0, 0), Payload::InputSlice { input: 0, start: 0, end: 4 }, &[], block(4, 4, 0))
        .unwrap();
    b.add_vertex(VertexKind::ExternalStore, Payload::Output { slot: 0 }, &[st]).unwrap();
    let g = b.finish().unwrap();
    let bad = Tensor::from_u8(vec![1, 4], vec![0, 32, 0, 0]).unwrap();
    for w in [None, Some(1)] {
        let mut ex = executor(ChipConfig::noiseless(1.0), w, false);
        assert!(matches!(ex.run(&g, std::slice::from_ref(&bad), TimeMode::Simulated), Err(Error::InputOutOfRange { value: 32, .. })));
    }
    assert!(ex.run(&g, &[], TimeMode::Simulated).is_err());
}

#[test]
fn chain_utilization_grows_with_batch() {
    let mut b = GraphBuilder::new();
    let bind = ArrayBinding::new(0, 0);
    let mut prev = b
        .instance(InstanceId(0), bind, Payload::InputSlice { input: 0, start: 0, end: 256 }, &[], block(256, 256, 0))
        .unwrap();
    for i in 1..4 {
        let c = b.add_vertex(VertexKind::Add, clamp_to_inputs(), &[prev]).unwrap();
        prev = b.instance(InstanceId(i), bind, Payload::None, &[c], block(256, 256, i)).unwrap();
    }
    let g = b.finish().unwrap();
    let ex = executor(ChipConfig::noiseless(1.0), None, false);
    let util = |batch| {
        let t = ex.simulate(&g, batch, ScheduleOptions::default()).unwrap();
        t.total(Stage::Exec) / t.makespan
    };
    let u: Vec<f64> = [1, 100, 10_000, 1_000_000].into_iter().map(util).collect();
    assert!(u.windows(2).all(|w| w[1] > w[0]), "{u:?}");
    assert!(u[3] > 0.9);
}

fn random_graph() -> impl Strategy<Value = (DependencyGraph, Tensor)> {
    (any::<u64>(), 1usize..4).prop_map(|(seed, batch)| {
        let mut r = keyed(&[seed]);
        let mut b = GraphBuilder::new();
        let mut stores: Vec<VertexId> = Vec::new();
        for i in 0..6u64 {
            let bind = ArrayBinding::new(0, r.random_range(0..2));
            let rows = 6;
            let cols = 6;
            let signed = r.random_bool(0.5);
            let weights = (0..rows * cols).map(|_| if signed { r.random_range(-3..4) } else { r.random_range(0..4) }).collect();
            let blk = SynapseBlock { rows, cols, signed, weights, hw: HwParams { num_sends: r.random_range(1..3), wait_between_events: 2 } };
            let st = if stores.is_empty() || r.random_bool(0.4) {
                b.instance(InstanceId(i), bind, Payload::InputSlice { input: 0, start: 0, end: rows }, &[], blk).unwrap()
            } else {
                let k = r.random_range(1..=stores.len().min(3));
                let picks: Vec<VertexId> = (0..k).map(|_| stores[r.random_range(0..stores.len())]).collect();
                let mut picks = picks;
                picks.sort();
                picks.dedup();
                let c = b.add_vertex(VertexKind::Add, clamp_to_inputs(), &picks).unwrap();
                b.instance(InstanceId(i), bind, Payload::None, &[c], blk).unwrap()
            };
            stores.push(st);
        }
        let cat = b.add_vertex(VertexKind::Concat, Payload::Concat { axis: 1 }, &stores).unwrap();
        b.add_vertex(VertexKind::ExternalStore, Payload::Output { slot: 0 }, &[cat]).unwrap();
        (b.finish().unwrap(), input(batch, 6, seed))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn pipelined_equals_sequential((g, x) in random_graph(), workers in prop::option::of(1usize..4)) {
        let mut ex = executor(ChipConfig::default(), workers, false);
        let (out, trace) = ex.run(&g, std::slice::from_ref(&x), TimeMode::Simulated).unwrap();
        let reference = ex.run_reference(&g, &[x]).unwrap();
        prop_assert!(out[0].bit_eq(&reference[0]));
        let exec: Vec<_> = trace.records.iter().filter(|r| r.stage == Stage::Exec).collect();
        for a in &exec {
            for b in &exec {
                let arr = |id: u64| g.instance(InstanceId(id)).unwrap().binding;
                prop_assert!(a.id == b.id || arr(a.id) != arr(b.id) || a.t_end <= b.t_start || b.t_end <= a.t_start);
            }
        }
    }
}
