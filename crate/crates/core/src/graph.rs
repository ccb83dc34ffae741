//! Hardware-centric dataflow graph.
//!
//! On-chip stages (load, synapse matrix, neurons, digitize, store) are
//! grouped into [`ExecutionInstance`]s, each one statically configured chip
//! run. Instances exchange data through host-side stores and loads, and
//! partial results are recombined by digital `Add`/`Concat` vertices that
//! execute on the host.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, HashSet};
use std::cmp::Reverse;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::chip::{HwParams, ARRAY_COLS, ARRAY_ROWS, SIGNED_ROWS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VertexId(pub u64);

impl fmt::Display for VertexId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InstanceId(pub u64);

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "i{}", self.0)
    }
}

/// A physical synapse array: `array` of chip `chip`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArrayBinding {
    pub chip: usize,
    pub array: usize,
}

impl ArrayBinding {
    pub fn new(chip: usize, array: usize) -> Self {
        ArrayBinding { chip, array }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VertexKind {
    ExternalLoad,
    SynapseMatrix,
    Neurons,
    Digitize,
    Store,
    ExternalStore,
    Add,
    Concat,
}

impl VertexKind {
    fn is_host_value(self) -> bool {
        matches!(self, VertexKind::Store | VertexKind::Add | VertexKind::Concat)
    }
}

/// Weight block configured by a `SynapseMatrix` vertex. `weights` is the
/// logical `rows x cols` block; signed blocks occupy two physical rows per
/// logical row on the array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynapseBlock {
    pub rows: usize,
    pub cols: usize,
    pub signed: bool,
    pub weights: Vec<i8>,
    pub hw: HwParams,
}

impl SynapseBlock {
    pub fn physical_rows(&self) -> usize {
        if self.signed {
            2 * self.rows
        } else {
            self.rows
        }
    }

    pub fn row_capacity(signed: bool) -> usize {
        if signed {
            SIGNED_ROWS
        } else {
            ARRAY_ROWS
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    None,
    /// Columns `start..end` of host input tensor `input`.
    InputSlice { input: usize, start: usize, end: usize },
    Synapse(SynapseBlock),
    /// Saturating sum re-clamped to `lo..=hi`.
    Add { lo: i32, hi: i32 },
    /// Axis 0 stacks batch entries, axis 1 joins feature columns.
    Concat { axis: usize },
    Output { slot: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vertex {
    pub id: VertexId,
    pub kind: VertexKind,
    pub payload: Payload,
    pub inputs: Vec<VertexId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecutionInstance {
    pub id: InstanceId,
    /// Load, SynapseMatrix, Neurons, Digitize, Store in data-flow order.
    pub vertices: Vec<VertexId>,
    pub binding: ArrayBinding,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GraphViolation {
    DuplicateVertex(VertexId),
    DuplicateInstance(InstanceId),
    DanglingInput { vertex: VertexId, input: VertexId },
    CycleDetected(Vec<VertexId>),
    KindMismatch { vertex: VertexId, msg: String },
    MalformedInstance { instance: InstanceId, msg: String },
    WidthMismatch { vertex: VertexId, msg: String },
    SharedVertex { vertex: VertexId },
}

fn expected_payload(kind: VertexKind, payload: &Payload, n_inputs: usize) -> std::result::Result<(), String> {
    use VertexKind::*;
    let ok = match (kind, payload) {
        (ExternalLoad, Payload::InputSlice { start, end, .. }) => n_inputs == 0 && start < end,
        (ExternalLoad, Payload::None) => n_inputs == 1,
        (SynapseMatrix, Payload::Synapse(_)) => n_inputs == 1,
        (Neurons | Digitize | Store, Payload::None) => n_inputs == 1,
        (ExternalStore, Payload::Output { .. }) => n_inputs == 1,
        (Add, Payload::Add { lo, hi }) => n_inputs >= 1 && lo <= hi,
        (Concat, Payload::Concat { axis }) => n_inputs >= 1 && *axis < 2,
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(format!("{kind:?} cannot take payload {} with {n_inputs} inputs", payload_name(payload)))
    }
}

fn payload_name(p: &Payload) -> &'static str {
    match p {
        Payload::None => "None",
        Payload::InputSlice { .. } => "InputSlice",
        Payload::Synapse(_) => "Synapse",
        Payload::Add { .. } => "Add",
        Payload::Concat { .. } => "Concat",
        Payload::Output { .. } => "Output",
    }
}

fn allowed_input(kind: VertexKind, input: VertexKind) -> bool {
    use VertexKind::*;
    match kind {
        ExternalLoad | ExternalStore | Add | Concat => input.is_host_value(),
        SynapseMatrix => input == ExternalLoad,
        Neurons => input == SynapseMatrix,
        Digitize => input == Neurons,
        Store => input == Digitize,
    }
}

/// Static-single-assignment builder: every vertex id is written exactly
/// once and may only reference vertices that already exist.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    next: u64,
    vertices: BTreeMap<VertexId, Vertex>,
    instances: Vec<ExecutionInstance>,
    instance_ids: HashSet<InstanceId>,
    owned: HashSet<VertexId>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_vertex(&mut self, kind: VertexKind, payload: Payload, inputs: &[VertexId]) -> Result<VertexId> {
        while self.vertices.contains_key(&VertexId(self.next)) {
            self.next += 1;
        }
        let id = VertexId(self.next);
        self.define(id, kind, payload, inputs)?;
        Ok(id)
    }

    /// Defines a vertex under a caller-chosen id.
    pub fn define(&mut self, id: VertexId, kind: VertexKind, payload: Payload, inputs: &[VertexId]) -> Result<()> {
        if self.vertices.contains_key(&id) {
            return Err(Error::DoubleAssignment(id.to_string()));
        }
        for &i in inputs {
            let Some(src) = self.vertices.get(&i) else {
                return Err(Error::UseBeforeDef(i));
            };
            if !allowed_input(kind, src.kind) {
                return Err(Error::KindMismatch(format!("{kind:?} cannot be fed by {:?} ({i})", src.kind)));
            }
        }
        expected_payload(kind, &payload, inputs.len()).map_err(Error::KindMismatch)?;
        self.vertices.insert(id, Vertex { id, kind, payload, inputs: inputs.to_vec() });
        Ok(())
    }

    /// Groups an existing Load -> SynapseMatrix -> Neurons -> Digitize ->
    /// Store chain into an execution instance.
    pub fn add_instance(&mut self, id: InstanceId, binding: ArrayBinding, chain: &[VertexId]) -> Result<()> {
        if !self.instance_ids.insert(id) {
            return Err(Error::DoubleAssignment(id.to_string()));
        }
        let inst = ExecutionInstance { id, vertices: chain.to_vec(), binding };
        let lookup: HashMap<VertexId, &Vertex> = self.vertices.iter().map(|(k, v)| (*k, v)).collect();
        if let Err(msg) = check_instance(&inst, &lookup) {
            self.instance_ids.remove(&id);
            return Err(Error::KindMismatch(msg));
        }
        for v in chain {
            if !self.owned.insert(*v) {
                self.instance_ids.remove(&id);
                return Err(Error::DoubleAssignment(format!("{v} already belongs to an instance")));
            }
        }
        self.instances.push(inst);
        Ok(())
    }

    /// Builds a complete instance chain fed by `load`; returns its Store.
    pub fn instance(
        &mut self,
        id: InstanceId,
        binding: ArrayBinding,
        load: Payload,
        load_inputs: &[VertexId],
        block: SynapseBlock,
    ) -> Result<VertexId> {
        let l = self.add_vertex(VertexKind::ExternalLoad, load, load_inputs)?;
        let s = self.add_vertex(VertexKind::SynapseMatrix, Payload::Synapse(block), &[l])?;
        let n = self.add_vertex(VertexKind::Neurons, Payload::None, &[s])?;
        let d = self.add_vertex(VertexKind::Digitize, Payload::None, &[n])?;
        let st = self.add_vertex(VertexKind::Store, Payload::None, &[d])?;
        self.add_instance(id, binding, &[l, s, n, d, st])?;
        Ok(st)
    }

    pub fn finish(self) -> Result<DependencyGraph> {
        let g = DependencyGraph::from_parts(self.vertices.into_values().collect(), self.instances);
        g.validate().map_err(Error::InvalidGraph)?;
        Ok(g)
    }
}

fn check_instance(inst: &ExecutionInstance, vertices: &HashMap<VertexId, &Vertex>) -> std::result::Result<(), String> {
    use VertexKind::*;
    let kinds: Vec<VertexKind> = inst
        .vertices
        .iter()
        .map(|v| vertices.get(v).map(|v| v.kind).ok_or_else(|| format!("unknown vertex {v}")))
        .collect::<std::result::Result<_, _>>()?;
    let count = |k| kinds.iter().filter(|&&x| x == k).count();
    if count(SynapseMatrix) != 1 {
        return Err(format!("expected exactly one SynapseMatrix, found {}", count(SynapseMatrix)));
    }
    if count(Digitize) != 1 {
        return Err(format!("expected exactly one Digitize, found {}", count(Digitize)));
    }
    if kinds.first() != Some(&ExternalLoad) {
        return Err("instance must start with an ExternalLoad".into());
    }
    if !matches!(kinds.last(), Some(Store | ExternalStore)) {
        return Err("instance must end in Store or ExternalStore".into());
    }
    // each vertex after the first must be fed by its predecessor in the chain
    for w in inst.vertices.windows(2) {
        if !vertices[&w[1]].inputs.contains(&w[0]) {
            return Err(format!("{} is not fed by {}", w[1], w[0]));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DependencyGraph {
    vertices: Vec<Vertex>,
    instances: Vec<ExecutionInstance>,
}

impl DependencyGraph {
    /// Assembles a graph without checking it; see [`DependencyGraph::validate`].
    pub fn from_parts(vertices: Vec<Vertex>, instances: Vec<ExecutionInstance>) -> Self {
        DependencyGraph { vertices, instances }
    }

    pub fn empty() -> Self {
        Self::from_parts(Vec::new(), Vec::new())
    }

    pub fn vertices(&self) -> &[Vertex] {
        &self.vertices
    }

    pub fn instances(&self) -> &[ExecutionInstance] {
        &self.instances
    }

    pub fn vertex(&self, id: VertexId) -> Option<&Vertex> {
        self.vertices.iter().find(|v| v.id == id)
    }

    pub fn instance(&self, id: InstanceId) -> Option<&ExecutionInstance> {
        self.instances.iter().find(|i| i.id == id)
    }

    pub fn count_kind(&self, kind: VertexKind) -> usize {
        self.vertices.iter().filter(|v| v.kind == kind).count()
    }

    fn index(&self) -> HashMap<VertexId, &Vertex> {
        self.vertices.iter().map(|v| (v.id, v)).collect()
    }

    /// Instance owning each vertex.
    pub fn owners(&self) -> HashMap<VertexId, InstanceId> {
        let mut m = HashMap::new();
        for inst in &self.instances {
            for v in &inst.vertices {
                m.insert(*v, inst.id);
            }
        }
        m
    }

    /// Returns every violation found, or `Ok` for a well-formed graph.
    pub fn validate(&self) -> std::result::Result<(), Vec<GraphViolation>> {
        let mut errs = Vec::new();
        let mut seen = HashSet::new();
        for v in &self.vertices {
            if !seen.insert(v.id) {
                errs.push(GraphViolation::DuplicateVertex(v.id));
            }
        }
        let idx = self.index();
        for v in &self.vertices {
            for i in &v.inputs {
                match idx.get(i) {
                    None => errs.push(GraphViolation::DanglingInput { vertex: v.id, input: *i }),
                    Some(src) if !allowed_input(v.kind, src.kind) => errs.push(GraphViolation::KindMismatch {
                        vertex: v.id,
                        msg: format!("{:?} fed by {:?}", v.kind, src.kind),
                    }),
                    _ => {}
                }
            }
            if let Err(msg) = expected_payload(v.kind, &v.payload, v.inputs.len()) {
                errs.push(GraphViolation::KindMismatch { vertex: v.id, msg });
            }
        }
        if let Err(cycle) = vertex_order(&self.vertices) {
            errs.push(GraphViolation::CycleDetected(cycle));
        }
        let mut inst_ids = HashSet::new();
        let mut owned = HashSet::new();
        for inst in &self.instances {
            if !inst_ids.insert(inst.id) {
                errs.push(GraphViolation::DuplicateInstance(inst.id));
            }
            if let Err(msg) = check_instance(inst, &idx) {
                errs.push(GraphViolation::MalformedInstance { instance: inst.id, msg });
            }
            for v in &inst.vertices {
                if !owned.insert(*v) {
                    errs.push(GraphViolation::SharedVertex { vertex: *v });
                }
            }
        }
        // SynapseMatrix vertices outside any instance cannot be executed
        for v in &self.vertices {
            if v.kind == VertexKind::SynapseMatrix && !owned.contains(&v.id) {
                errs.push(GraphViolation::KindMismatch { vertex: v.id, msg: "SynapseMatrix outside an instance".into() });
            }
        }
        if errs.is_empty() {
            errs.extend(self.width_violations());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }

    /// Output width (columns) of every vertex, following edges in order.
    /// External input widths are taken from the slices that read them.
    pub fn widths(&self) -> Result<HashMap<VertexId, usize>> {
        let order = vertex_order(&self.vertices).map_err(|_| Error::CycleDetected)?;
        let idx = self.index();
        let mut w = HashMap::new();
        for id in order {
            let v = idx[&id];
            let input_w: Vec<usize> = v.inputs.iter().map(|i| w[i]).collect();
            let width = match (&v.kind, &v.payload) {
                (VertexKind::ExternalLoad, Payload::InputSlice { start, end, .. }) => end - start,
                (VertexKind::SynapseMatrix, Payload::Synapse(b)) => b.cols,
                (VertexKind::Concat, Payload::Concat { axis: 1 }) => input_w.iter().sum(),
                _ => input_w.first().copied().unwrap_or(0),
            };
            w.insert(id, width);
        }
        Ok(w)
    }

    fn width_violations(&self) -> Vec<GraphViolation> {
        let Ok(w) = self.widths() else { return Vec::new() };
        let mut errs = Vec::new();
        for v in &self.vertices {
            let input_w: Vec<usize> = v.inputs.iter().map(|i| w[i]).collect();
            match (&v.kind, &v.payload) {
                (VertexKind::SynapseMatrix, Payload::Synapse(b)) => {
                    let cap = SynapseBlock::row_capacity(b.signed);
                    if b.rows == 0 || b.cols == 0 || b.rows > cap || b.cols > ARRAY_COLS {
                        errs.push(GraphViolation::WidthMismatch {
                            vertex: v.id,
                            msg: format!("block {}x{} does not fit {cap}x{ARRAY_COLS}", b.rows, b.cols),
                        });
                    }
                    if b.weights.len() != b.rows * b.cols {
                        errs.push(GraphViolation::WidthMismatch {
                            vertex: v.id,
                            msg: format!("{} weights for a {}x{} block", b.weights.len(), b.rows, b.cols),
                        });
                    }
                    if input_w[0] != b.rows {
                        errs.push(GraphViolation::WidthMismatch {
                            vertex: v.id,
                            msg: format!("load delivers {} values, block has {} rows", input_w[0], b.rows),
                        });
                    }
                }
                (VertexKind::Add, _) | (VertexKind::Concat, Payload::Concat { axis: 0 })
                    if input_w.windows(2).any(|p| p[0] != p[1]) =>
                {
                    errs.push(GraphViolation::WidthMismatch {
                        vertex: v.id,
                        msg: format!("inputs of differing widths {input_w:?}"),
                    });
                }
                _ => {}
            }
        }
        errs
    }

    /// Predecessor instances of every instance, looking through digital
    /// vertices and loads that sit between instances.
    pub fn instance_dependencies(&self) -> BTreeMap<InstanceId, BTreeSet<InstanceId>> {
        let idx = self.index();
        let owners = self.owners();
        let mut deps: BTreeMap<InstanceId, BTreeSet<InstanceId>> =
            self.instances.iter().map(|i| (i.id, BTreeSet::new())).collect();
        for inst in &self.instances {
            let mut stack: Vec<VertexId> = Vec::new();
            for v in &inst.vertices {
                if let Some(vx) = idx.get(v) {
                    stack.extend(vx.inputs.iter().filter(|i| owners.get(i) != Some(&inst.id)));
                }
            }
            let mut visited = HashSet::new();
            while let Some(v) = stack.pop() {
                if !visited.insert(v) {
                    continue;
                }
                match owners.get(&v) {
                    Some(&owner) => {
                        deps.get_mut(&inst.id).unwrap().insert(owner);
                    }
                    None => {
                        if let Some(vx) = idx.get(&v) {
                            stack.extend(vx.inputs.iter().copied());
                        }
                    }
                }
            }
        }
        deps
    }

    /// Topological order of instances; ties go to the smallest id.
    pub fn topo_schedule(&self) -> Result<Vec<InstanceId>> {
        let deps = self.instance_dependencies();
        kahn(&deps).ok_or(Error::CycleDetected)
    }

    /// Topological order of all vertices; ties go to the smallest id.
    pub fn vertex_order(&self) -> Result<Vec<VertexId>> {
        vertex_order(&self.vertices).map_err(|_| Error::CycleDetected)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn kahn<K: Ord + Copy>(deps: &BTreeMap<K, BTreeSet<K>>) -> Option<Vec<K>> {
    let mut indegree: BTreeMap<K, usize> = deps.iter().map(|(k, d)| (*k, d.len())).collect();
    let mut succ: BTreeMap<K, Vec<K>> = BTreeMap::new();
    for (k, d) in deps {
        for p in d {
            if !deps.contains_key(p) {
                continue;
            }
            succ.entry(*p).or_default().push(*k);
        }
        // predecessors missing from the map never fire; count them out
        let missing = d.iter().filter(|p| !deps.contains_key(p)).count();
        *indegree.get_mut(k).unwrap() -= missing;
    }
    let mut ready: BinaryHeap<Reverse<K>> = indegree.iter().filter(|(_, &n)| n == 0).map(|(k, _)| Reverse(*k)).collect();
    let mut order = Vec::with_capacity(deps.len());
    while let Some(Reverse(k)) = ready.pop() {
        order.push(k);
        for s in succ.get(&k).into_iter().flatten() {
            let d = indegree.get_mut(s).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.push(Reverse(*s));
            }
        }
    }
    (order.len() == deps.len()).then_some(order)
}

/// Kahn's algorithm over vertex input edges; on failure returns the
/// vertices left on a cycle.
fn vertex_order(vertices: &[Vertex]) -> std::result::Result<Vec<VertexId>, Vec<VertexId>> {
    let mut deps: BTreeMap<VertexId, BTreeSet<VertexId>> = BTreeMap::new();
    for v in vertices {
        deps.entry(v.id).or_default().extend(v.inputs.iter().copied());
    }
    match kahn(&deps) {
        Some(order) => Ok(order),
        None => {
            let mut done: HashSet<VertexId> = HashSet::new();
            // peel off everything that is orderable, the rest is cyclic
            loop {
                let before = done.len();
                for (k, d) in &deps {
                    if !done.contains(k) && d.iter().all(|p| done.contains(p) || !deps.contains_key(p)) {
                        done.insert(*k);
                    }
                }
                if done.len() == before {
                    break;
                }
            }
            Err(deps.keys().filter(|k| !done.contains(k)).copied().collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn block(rows: usize, cols: usize) -> SynapseBlock {
        SynapseBlock { rows, cols, signed: false, weights: vec![1; rows * cols], hw: HwParams::default() }
    }

    fn slice(start: usize, end: usize) -> Payload {
        Payload::InputSlice { input: 0, start, end }
    }

    #[test]
    fn source_vertex() {
        let mut b = GraphBuilder::new();
        let v = b.add_vertex(VertexKind::ExternalLoad, slice(0, 4), &[]).unwrap();
        assert_eq!(v, VertexId(0));
    }

    #[test]
    fn use_before_def() {
        let mut b = GraphBuilder::new();
        let err = b.add_vertex(VertexKind::Neurons, Payload::None, &[VertexId(17)]).unwrap_err();
        assert!(matches!(err, Error::UseBeforeDef(VertexId(17))));
    }

    #[test]
    fn double_assignment() {
        let mut b = GraphBuilder::new();
        b.define(VertexId(3), VertexKind::ExternalLoad, slice(0, 1), &[]).unwrap();
        let err = b.define(VertexId(3), VertexKind::ExternalLoad, slice(0, 1), &[]).unwrap_err();
        assert!(matches!(err, Error::DoubleAssignment(_)));
    }

    #[test]
    fn kind_mismatch() {
        let mut b = GraphBuilder::new();
        let st = b.instance(InstanceId(0), ArrayBinding::new(0, 0), slice(0, 2), &[], block(2, 2)).unwrap();
        let err = b.add_vertex(VertexKind::Neurons, Payload::None, &[st]).unwrap_err();
        assert!(matches!(err, Error::KindMismatch(_)));
        let err = b.add_vertex(VertexKind::Add, Payload::None, &[st]).unwrap_err();
        assert!(matches!(err, Error::KindMismatch(_)));
    }

    /// Two matmuls whose stored results are added and stored externally.
    #[test]
    fn two_matmuls_plus_add() {
        let mut b = GraphBuilder::new();
        let s0 = b.instance(InstanceId(0), ArrayBinding::new(0, 0), slice(0, 4), &[], block(4, 3)).unwrap();
        let s1 = b.instance(InstanceId(1), ArrayBinding::new(0, 1), slice(4, 8), &[], block(4, 3)).unwrap();
        let add = b.add_vertex(VertexKind::Add, Payload::Add { lo: -128, hi: 127 }, &[s0, s1]).unwrap();
        b.add_vertex(VertexKind::ExternalStore, Payload::Output { slot: 0 }, &[add]).unwrap();
        let g = b.finish().unwrap();
        assert_eq!(g.instances().len(), 2);
        assert_eq!(g.count_kind(VertexKind::Add), 1);
        assert_eq!(g.count_kind(VertexKind::ExternalStore), 1);
        let order = g.vertex_order().unwrap();
        let pos = |v: VertexId| order.iter().position(|&x| x == v).unwrap();
        assert!(pos(s0) < pos(add) && pos(s1) < pos(add));
        assert_eq!(g.topo_schedule().unwrap(), vec![InstanceId(0), InstanceId(1)]);
    }

    /// Edges 1->2, 1->4, 3->2 between four instances.
    pub(crate) fn four_instance_graph() -> DependencyGraph {
        let mut b = GraphBuilder::new();
        let bind = ArrayBinding::new(0, 0);
        let s1 = b.instance(InstanceId(1), bind, slice(0, 8), &[], block(8, 8)).unwrap();
        let s3 = b.instance(InstanceId(3), bind, slice(0, 8), &[], block(8, 8)).unwrap();
        let sum = b.add_vertex(VertexKind::Add, Payload::Add { lo: 0, hi: 31 }, &[s1, s3]).unwrap();
        let s2 = b.instance(InstanceId(2), bind, Payload::None, &[sum], block(8, 8)).unwrap();
        let s4 = b.instance(InstanceId(4), bind, Payload::None, &[s1], block(8, 8)).unwrap();
        b.add_vertex(VertexKind::ExternalStore, Payload::Output { slot: 0 }, &[s2]).unwrap();
        b.add_vertex(VertexKind::ExternalStore, Payload::Output { slot: 1 }, &[s4]).unwrap();
        b.finish().unwrap()
    }

    #[test]
    fn four_instance_order() {
        let g = four_instance_graph();
        let deps = g.instance_dependencies();
        assert_eq!(deps[&InstanceId(2)], BTreeSet::from([InstanceId(1), InstanceId(3)]));
        assert_eq!(deps[&InstanceId(4)], BTreeSet::from([InstanceId(1)]));
        let ids: Vec<u64> = g.topo_schedule().unwrap().into_iter().map(|i| i.0).collect();
        assert_eq!(ids, vec![1, 3, 2, 4]);
    }

    #[test]
    fn chain_and_disconnected_orders() {
        let mut b = GraphBuilder::new();
        let bind = ArrayBinding::new(0, 0);
        let a = b.instance(InstanceId(10), bind, slice(0, 2), &[], block(2, 2)).unwrap();
        let c = b.instance(InstanceId(11), bind, Payload::None, &[a], block(2, 2)).unwrap();
        b.instance(InstanceId(12), bind, Payload::None, &[c], block(2, 2)).unwrap();
        let g = b.finish().unwrap();
        assert_eq!(g.topo_schedule().unwrap(), vec![InstanceId(10), InstanceId(11), InstanceId(12)]);

        let mut b = GraphBuilder::new();
        b.instance(InstanceId(7), bind, slice(0, 2), &[], block(2, 2)).unwrap();
        b.instance(InstanceId(5), bind, slice(0, 2), &[], block(2, 2)).unwrap();
        let g = b.finish().unwrap();
        assert_eq!(g.topo_schedule().unwrap(), vec![InstanceId(5), InstanceId(7)]);
    }

    #[test]
    fn empty_graph_is_valid() {
        assert!(DependencyGraph::empty().validate().is_ok());
        assert!(DependencyGraph::empty().topo_schedule().unwrap().is_empty());
    }

    #[test]
    fn self_loop_is_a_cycle() {
        let v = Vertex { id: VertexId(0), kind: VertexKind::Add, payload: Payload::Add { lo: 0, hi: 1 }, inputs: vec![VertexId(0)] };
        let g = DependencyGraph::from_parts(vec![v], vec![]);
        let errs = g.validate().unwrap_err();
        assert!(errs.iter().any(|e| matches!(e, GraphViolation::CycleDetected(c) if c == &vec![VertexId(0)])));
        assert!(matches!(g.vertex_order(), Err(Error::CycleDetected)));
    }

    #[test]
    fn two_synapse_matrices_in_one_instance() {
        let mut b = GraphBuilder::new();
        let l = b.add_vertex(VertexKind::ExternalLoad, slice(0, 2), &[]).unwrap();
        let s = b.add_vertex(VertexKind::SynapseMatrix, Payload::Synapse(block(2, 2)), &[l]).unwrap();
        let n = b.add_vertex(VertexKind::Neurons, Payload::None, &[s]).unwrap();
        let d = b.add_vertex(VertexKind::Digitize, Payload::None, &[n]).unwrap();
        let st = b.add_vertex(VertexKind::Store, Payload::None, &[d]).unwrap();
        let l2 = b.add_vertex(VertexKind::ExternalLoad, Payload::None, &[st]).unwrap();
        let s2 = b.add_vertex(VertexKind::SynapseMatrix, Payload::Synapse(block(2, 2)), &[l2]).unwrap();
        let n2 = b.add_vertex(VertexKind::Neurons, Payload::None, &[s2]).unwrap();
        let d2 = b.add_vertex(VertexKind::Digitize, Payload::None, &[n2]).unwrap();
        let st2 = b.add_vertex(VertexKind::Store, Payload::None, &[d2]).unwrap();
        assert!(b.add_instance(InstanceId(0), ArrayBinding::new(0, 0), &[l, s, n, d, st, l2, s2, n2, d2, st2]).is_err());

        // the same instance assembled directly is reported by validate()
        let vertices: Vec<Vertex> = b.vertices.values().cloned().collect();
        let inst = ExecutionInstance {
            id: InstanceId(0),
            vertices: vec![l, s, n, d, st, l2, s2, n2, d2, st2],
            binding: ArrayBinding::new(0, 0),
        };
        let errs = DependencyGraph::from_parts(vertices, vec![inst]).validate().unwrap_err();
        assert!(errs.iter().any(|e| matches!(e, GraphViolation::MalformedInstance { .. })));
    }

    #[test]
    fn width_mismatch_reported() {
        let mut b = GraphBuilder::new();
        b.instance(InstanceId(0), ArrayBinding::new(0, 0), slice(0, 3), &[], block(4, 2)).unwrap();
        let err = b.finish().unwrap_err();
        let Error::InvalidGraph(v) = err else { panic!() };
        assert!(matches!(v[0], GraphViolation::WidthMismatch { .. }));
    }

    #[test]
    fn json_round_trip() {
        let g = four_instance_graph();
        let back = DependencyGraph::from_json(&g.to_json().unwrap()).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.topo_schedule().unwrap(), g.topo_schedule().unwrap());
    }

    proptest! {
        #[test]
        fn schedule_respects_random_dags(n in 1usize..12, edges in prop::collection::vec((0usize..12, 0usize..12), 0..30)) {
            // instance k may only load from instances with a smaller creation index
            let mut b = GraphBuilder::new();
            let bind = ArrayBinding::new(0, 0);
            let mut stores = Vec::new();
            let ids: Vec<u64> = (0..n as u64).map(|k| (k * 7919) % 101).collect();
            for k in 0..n {
                let preds: Vec<VertexId> = edges.iter().filter(|(a, c)| *c == k && *a < k).map(|(a, _)| stores[*a]).collect();
                let st = if preds.is_empty() {
                    b.instance(InstanceId(ids[k]), bind, slice(0, 2), &[], block(2, 2)).unwrap()
                } else {
                    let add = b.add_vertex(VertexKind::Add, Payload::Add { lo: 0, hi: 31 }, &preds).unwrap();
                    b.instance(InstanceId(ids[k]), bind, Payload::None, &[add], block(2, 2)).unwrap()
                };
                stores.push(st);
            }
            let g = b.finish().unwrap();
            let order = g.topo_schedule().unwrap();
            prop_assert_eq!(order.len(), n);
            let pos: HashMap<InstanceId, usize> = order.iter().enumerate().map(|(i, k)| (*k, i)).collect();
            for (k, preds) in g.instance_dependencies() {
                for p in preds {
                    prop_assert!(pos[&p] < pos[&k]);
                }
            }
        }
    }
}
