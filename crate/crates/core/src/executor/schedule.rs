//! Discrete-event model of the three-stage pipeline.
//!
//! Host stages (preprocess, postprocess, digital recombination) draw from a
//! shared pool of workers; chip execution is serialized per array in FIFO
//! order of preprocessing completion. Every decision is keyed by task index,
//! so the timeline is a pure function of the inputs.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeSet, BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Pre,
    Exec,
    Post,
    Digital,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pre => "pre",
            Stage::Exec => "exec",
            Stage::Post => "post",
            Stage::Digital => "digital",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TaskKind {
    Instance { pre: f64, exec: f64, post: f64, array: usize },
    Digital { duration: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub kind: TaskKind,
    /// Indices of tasks whose results this task consumes.
    pub deps: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub task: usize,
    pub stage: Stage,
    pub start: f64,
    pub end: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Timeline {
    pub intervals: Vec<Interval>,
    pub makespan: f64,
}

impl Timeline {
    pub fn of(&self, task: usize, stage: Stage) -> Option<&Interval> {
        self.intervals.iter().find(|i| i.task == task && i.stage == stage)
    }

    pub fn total(&self, stage: Stage) -> f64 {
        self.intervals.iter().filter(|i| i.stage == stage).map(|i| i.end - i.start).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ScheduleOptions {
    /// Concurrent host stages; `None` leaves the host unconstrained.
    pub workers: Option<usize>,
    /// Run every stage of every task back to back in dependency order.
    pub serial: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Event {
    time: f64,
    seq: u64,
    task: usize,
    stage: Stage,
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time.total_cmp(&other.time).then(self.seq.cmp(&other.seq))
    }
}

fn validate(tasks: &[Task]) -> Result<()> {
    for (i, t) in tasks.iter().enumerate() {
        if let Some(d) = t.deps.iter().find(|&&d| d >= tasks.len() || d == i) {
            return Err(Error::InvalidConfig(format!("task {i} depends on invalid task {d}")));
        }
        let durations: &[f64] = match &t.kind {
            TaskKind::Instance { pre, exec, post, .. } => &[*pre, *exec, *post],
            TaskKind::Digital { duration } => &[*duration],
        };
        if durations.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::InvalidConfig(format!("task {i} has a negative or non-finite duration")));
        }
    }
    Ok(())
}

/// Dependency order with the smallest ready index first.
pub fn task_order(tasks: &[Task]) -> Result<Vec<usize>> {
    let mut indeg: Vec<usize> = tasks.iter().map(|t| t.deps.len()).collect();
    let mut succ = vec![Vec::new(); tasks.len()];
    for (i, t) in tasks.iter().enumerate() {
        for &d in &t.deps {
            succ[d].push(i);
        }
    }
    let mut ready: BTreeSet<usize> = (0..tasks.len()).filter(|&i| indeg[i] == 0).collect();
    let mut order = Vec::with_capacity(tasks.len());
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &s in &succ[i] {
            indeg[s] -= 1;
            if indeg[s] == 0 {
                ready.insert(s);
            }
        }
    }
    if order.len() != tasks.len() {
        return Err(Error::CycleDetected);
    }
    Ok(order)
}

fn serial(tasks: &[Task]) -> Result<Timeline> {
    let mut t = 0.0;
    let mut intervals = Vec::new();
    for i in task_order(tasks)? {
        let stages: Vec<(Stage, f64)> = match tasks[i].kind {
            TaskKind::Instance { pre, exec, post, .. } => vec![(Stage::Pre, pre), (Stage::Exec, exec), (Stage::Post, post)],
            TaskKind::Digital { duration } => vec![(Stage::Digital, duration)],
        };
        for (stage, d) in stages {
            intervals.push(Interval { task: i, stage, start: t, end: t + d });
            t += d;
        }
    }
    Ok(Timeline { intervals, makespan: t })
}

pub fn schedule(tasks: &[Task], opts: ScheduleOptions) -> Result<Timeline> {
    validate(tasks)?;
    if opts.serial {
        return serial(tasks);
    }
    task_order(tasks)?;
    let cap = opts.workers.unwrap_or(usize::MAX).max(1);
    let n_arrays = tasks
        .iter()
        .filter_map(|t| match t.kind {
            TaskKind::Instance { array, .. } => Some(array + 1),
            TaskKind::Digital { .. } => None,
        })
        .max()
        .unwrap_or(0);

    let mut pending: Vec<usize> = tasks.iter().map(|t| t.deps.len()).collect();
    let mut succ = vec![Vec::new(); tasks.len()];
    for (i, t) in tasks.iter().enumerate() {
        for &d in &t.deps {
            succ[d].push(i);
        }
    }
    // host jobs ordered by (task, stage)
    let mut host_ready: BTreeSet<(usize, Stage)> = BTreeSet::new();
    for (i, t) in tasks.iter().enumerate() {
        if t.deps.is_empty() {
            host_ready.insert((i, first_stage(t)));
        }
    }
    let mut array_queue: Vec<VecDeque<usize>> = vec![VecDeque::new(); n_arrays];
    let mut array_busy = vec![false; n_arrays];
    let mut events = BinaryHeap::new();
    let mut seq = 0u64;
    let mut busy_workers = 0usize;
    let mut intervals = Vec::with_capacity(tasks.len() * 3);
    let mut done = 0usize;
    let mut now = 0.0f64;

    loop {
        while busy_workers < cap {
            let Some((task, stage)) = host_ready.pop_first() else { break };
            let d = duration(&tasks[task].kind, stage);
            intervals.push(Interval { task, stage, start: now, end: now + d });
            events.push(Reverse(Event { time: now + d, seq, task, stage }));
            seq += 1;
            busy_workers += 1;
        }
        for a in 0..n_arrays {
            if array_busy[a] {
                continue;
            }
            if let Some(task) = array_queue[a].pop_front() {
                let d = duration(&tasks[task].kind, Stage::Exec);
                intervals.push(Interval { task, stage: Stage::Exec, start: now, end: now + d });
                events.push(Reverse(Event { time: now + d, seq, task, stage: Stage::Exec }));
                seq += 1;
                array_busy[a] = true;
            }
        }
        let Some(Reverse(first)) = events.pop() else { break };
        now = first.time;
        let mut batch = vec![first];
        while let Some(Reverse(e)) = events.peek() {
            if e.time != now {
                break;
            }
            batch.push(events.pop().unwrap().0);
        }
        for e in batch {
            match e.stage {
                Stage::Pre => {
                    busy_workers -= 1;
                    if let TaskKind::Instance { array, .. } = tasks[e.task].kind {
                        array_queue[array].push_back(e.task);
                    }
                }
                Stage::Exec => {
                    if let TaskKind::Instance { array, .. } = tasks[e.task].kind {
                        array_busy[array] = false;
                    }
                    host_ready.insert((e.task, Stage::Post));
                }
                Stage::Post | Stage::Digital => {
                    busy_workers -= 1;
                    done += 1;
                    for &s in &succ[e.task] {
                        pending[s] -= 1;
                        if pending[s] == 0 {
                            host_ready.insert((s, first_stage(&tasks[s])));
                        }
                    }
                }
            }
        }
    }
    if done != tasks.len() {
        return Err(Error::DeadlockDetected(format!("{} of {} tasks never completed", tasks.len() - done, tasks.len())));
    }
    let makespan = intervals.iter().map(|i| i.end).fold(0.0, f64::max);
    Ok(Timeline { intervals, makespan })
}

fn first_stage(t: &Task) -> Stage {
    match t.kind {
        TaskKind::Instance { .. } => Stage::Pre,
        TaskKind::Digital { .. } => Stage::Digital,
    }
}

fn duration(kind: &TaskKind, stage: Stage) -> f64 {
    match (kind, stage) {
        (TaskKind::Instance { pre, .. }, Stage::Pre) => *pre,
        (TaskKind::Instance { exec, .. }, Stage::Exec) => *exec,
        (TaskKind::Instance { post, .. }, Stage::Post) => *post,
        (TaskKind::Digital { duration }, Stage::Digital) => *duration,
        _ => 0.0,
    }
}

/// Wall time attributed to each category: exec wins while any chip runs,
/// then preprocessing, and the remainder counts as postprocessing.
pub fn exposure(timeline: &Timeline) -> (f64, f64, f64) {
    // (time, delta, is_exec) boundary sweep
    let mut marks: Vec<(f64, i64, i64)> = Vec::with_capacity(timeline.intervals.len() * 2);
    for i in timeline.intervals.iter().filter(|i| i.end > i.start) {
        let (e, p) = match i.stage {
            Stage::Exec => (1, 0),
            Stage::Pre => (0, 1),
            _ => (0, 0),
        };
        marks.push((i.start, e, p));
        marks.push((i.end, -e, -p));
    }
    marks.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (mut pre, mut exec, mut post) = (0.0, 0.0, 0.0);
    let (mut n_exec, mut n_pre) = (0i64, 0i64);
    let mut last = 0.0;
    for (t, de, dp) in marks {
        let span = t - last;
        if span > 0.0 {
            if n_exec > 0 {
                exec += span;
            } else if n_pre > 0 {
                pre += span;
            } else {
                post += span;
            }
        }
        n_exec += de;
        n_pre += dp;
        last = t;
    }
    (pre, exec, post)
}
