//! Tiling of oversized matmuls onto synapse arrays.
//!
//! The input dimension `N` is cut into row ranges that fit an array and the
//! output dimension `M` into 256-wide column stripes. Results of tiles in the
//! same stripe are summed digitally; stripes are concatenated. Tiles are bound
//! to the available arrays round-robin in row-major tile order.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::chip::{HwParams, ARRAY_COLS};
use crate::error::{Error, Result};
use crate::graph::{
    ArrayBinding, DependencyGraph, GraphBuilder, InstanceId, Payload, SynapseBlock, VertexId, VertexKind,
};
use crate::quantize::{OUTPUT_MAX, OUTPUT_MIN, WEIGHT_MAX};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileSpec {
    pub rows: Range<usize>,
    pub cols: Range<usize>,
    pub binding: ArrayBinding,
    /// Number of earlier tiles placed on the same array.
    pub sequence_index: usize,
}

impl TileSpec {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.cols.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub n: usize,
    pub m: usize,
    pub signed: bool,
    pub row_capacity: usize,
    pub tiles: Vec<TileSpec>,
    /// Per column stripe, indices of the tiles whose outputs are summed.
    pub row_groups: Vec<Vec<usize>>,
    /// Concatenation order of column stripes.
    pub col_order: Vec<usize>,
}

/// Splits `0..len` into ranges of at most `cap`, all full except the last.
pub fn ranges(len: usize, cap: usize) -> Vec<Range<usize>> {
    (0..len.div_ceil(cap)).map(|i| i * cap..((i + 1) * cap).min(len)).collect()
}

pub fn row_capacity(signed: bool) -> usize {
    SynapseBlock::row_capacity(signed)
}

pub fn partition_matmul(n: usize, m: usize, signed: bool, arrays: &[ArrayBinding]) -> Result<PartitionPlan> {
    if arrays.is_empty() {
        return Err(Error::NoArrays);
    }
    if n == 0 || m == 0 {
        return Err(Error::ShapeMismatch(format!("cannot partition a {n}x{m} matmul")));
    }
    let cap = row_capacity(signed);
    let row_ranges = ranges(n, cap);
    let col_ranges = ranges(m, ARRAY_COLS);
    let mut per_array = vec![0usize; arrays.len()];
    let mut tiles = Vec::with_capacity(row_ranges.len() * col_ranges.len());
    let mut row_groups = vec![Vec::new(); col_ranges.len()];
    for rows in &row_ranges {
        for (stripe, cols) in col_ranges.iter().enumerate() {
            let k = tiles.len() % arrays.len();
            row_groups[stripe].push(tiles.len());
            tiles.push(TileSpec {
                rows: rows.clone(),
                cols: cols.clone(),
                binding: arrays[k],
                sequence_index: per_array[k],
            });
            per_array[k] += 1;
        }
    }
    Ok(PartitionPlan { n, m, signed, row_capacity: cap, tiles, row_groups, col_order: (0..col_ranges.len()).collect() })
}

impl PartitionPlan {
    /// `(full, partial)`: tiles that exactly fill an array vs. those that do not.
    pub fn allocation_counts(&self) -> (usize, usize) {
        let full = self
            .tiles
            .iter()
            .filter(|t| t.n_rows() == self.row_capacity && t.n_cols() == ARRAY_COLS)
            .count();
        (full, self.tiles.len() - full)
    }

    pub fn n_stripes(&self) -> usize {
        self.row_groups.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn allocation_counts(plan: &PartitionPlan) -> (usize, usize) {
    plan.allocation_counts()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphOptions {
    /// Clamp applied after each digital sum.
    pub digital_range: (i32, i32),
    pub hw: HwParams,
    /// Host input tensor read by the tile loads.
    pub input_slot: usize,
    pub output_slot: usize,
}

impl Default for GraphOptions {
    fn default() -> Self {
        GraphOptions { digital_range: (OUTPUT_MIN, OUTPUT_MAX), hw: HwParams::default(), input_slot: 0, output_slot: 0 }
    }
}

/// Graph computing `y = x . W` for the planned tiling, with `weights` an
/// `N x M` `i8` matrix. Inputs are bound when the graph is run.
pub fn build_graph(plan: &PartitionPlan, weights: &Tensor, opts: &GraphOptions) -> Result<DependencyGraph> {
    let (n, m) = weights.matrix_dims()?;
    if (n, m) != (plan.n, plan.m) {
        return Err(Error::ShapeMismatch(format!("weights are {n}x{m}, plan is {}x{}", plan.n, plan.m)));
    }
    let w = weights.as_i8()?;
    let lo = if plan.signed { -WEIGHT_MAX } else { 0 };
    if let Some(i) = w.iter().position(|&v| v < lo || v > WEIGHT_MAX) {
        return Err(Error::WeightOutOfRange { value: w[i] as i32, index: i });
    }
    let mut b = GraphBuilder::new();
    let mut stores = Vec::with_capacity(plan.tiles.len());
    for (k, t) in plan.tiles.iter().enumerate() {
        let mut block = Vec::with_capacity(t.n_rows() * t.n_cols());
        for r in t.rows.clone() {
            block.extend_from_slice(&w[r * m + t.cols.start..r * m + t.cols.end]);
        }
        let load = Payload::InputSlice { input: opts.input_slot, start: t.rows.start, end: t.rows.end };
        let syn = SynapseBlock { rows: t.n_rows(), cols: t.n_cols(), signed: plan.signed, weights: block, hw: opts.hw };
        stores.push(b.instance(InstanceId(k as u64), t.binding, load, &[], syn)?);
    }
    let (lo, hi) = opts.digital_range;
    let mut stripes: Vec<VertexId> = Vec::with_capacity(plan.n_stripes());
    for group in &plan.row_groups {
        let parts: Vec<VertexId> = group.iter().map(|&k| stores[k]).collect();
        stripes.push(if parts.len() == 1 {
            parts[0]
        } else {
            b.add_vertex(VertexKind::Add, Payload::Add { lo, hi }, &parts)?
        });
    }
    let ordered: Vec<VertexId> = plan.col_order.iter().map(|&s| stripes[s]).collect();
    let out = if ordered.len() == 1 {
        ordered[0]
    } else {
        b.add_vertex(VertexKind::Concat, Payload::Concat { axis: 1 }, &ordered)?
    };
    b.add_vertex(VertexKind::ExternalStore, Payload::Output { slot: opts.output_slot }, &[out])?;
    b.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arrays(k: usize) -> Vec<ArrayBinding> {
        (0..k).map(|i| ArrayBinding::new(i / 2, i % 2)).collect()
    }

    // independent tiling arithmetic: sizes of the ceil-division ranges
    fn sizes(len: usize, cap: usize) -> Vec<usize> {
        let q = len.div_ceil(cap);
        (0..q).map(|i| if i + 1 < q { cap } else { len - cap * (q - 1) }).collect()
    }

    #[test]
    fn fits_on_one_array() {
        let p = partition_matmul(100, 100, false, &arrays(1)).unwrap();
        assert_eq!(p.tiles.len(), 1);
        let g = build_graph(&p, &Tensor::zeros(crate::DType::I8, vec![100, 100]).unwrap(), &GraphOptions::default()).unwrap();
        assert_eq!(g.instances().len(), 1);
        assert_eq!(g.count_kind(VertexKind::Add), 0);
        assert_eq!(g.count_kind(VertexKind::Concat), 0);
        assert_eq!(g.count_kind(VertexKind::ExternalStore), 1);
    }

    #[test]
    fn signed_300_by_300_on_two_arrays() {
        assert_eq!(sizes(300, 128), vec![128, 128, 44]);
        assert_eq!(sizes(300, 256), vec![256, 44]);
        let p = partition_matmul(300, 300, true, &arrays(2)).unwrap();
        assert_eq!(p.tiles.len(), 6);
        let rows: Vec<usize> = p.tiles.iter().map(|t| t.n_rows()).collect();
        let cols: Vec<usize> = p.tiles.iter().map(|t| t.n_cols()).collect();
        assert_eq!(rows, vec![128, 128, 128, 128, 44, 44]);
        assert_eq!(cols, vec![256, 44, 256, 44, 256, 44]);
        let arr: Vec<usize> = p.tiles.iter().map(|t| t.binding.array).collect();
        assert_eq!(arr, vec![0, 1, 0, 1, 0, 1]);
        let seq: Vec<usize> = p.tiles.iter().map(|t| t.sequence_index).collect();
        assert_eq!(seq, vec![0, 0, 1, 1, 2, 2]);
        assert_eq!(p.row_groups, vec![vec![0, 2, 4], vec![1, 3, 5]]);

        let g = build_graph(&p, &Tensor::zeros(crate::DType::I8, vec![300, 300]).unwrap(), &GraphOptions::default()).unwrap();
        assert_eq!(g.instances().len(), 6);
        let adds: Vec<usize> = g.vertices().iter().filter(|v| v.kind == VertexKind::Add).map(|v| v.inputs.len()).collect();
        assert_eq!(adds, vec![3, 3]);
        assert_eq!(g.count_kind(VertexKind::Concat), 1);
    }

    #[test]
    fn column_split_only() {
        let p = partition_matmul(256, 512, false, &arrays(1)).unwrap();
        assert_eq!(p.tiles.len(), 2);
        let g = build_graph(&p, &Tensor::zeros(crate::DType::I8, vec![256, 512]).unwrap(), &GraphOptions::default()).unwrap();
        assert_eq!(g.count_kind(VertexKind::Add), 0);
        assert_eq!(g.count_kind(VertexKind::Concat), 1);
    }

    #[test]
    fn allocation_examples() {
        assert_eq!(partition_matmul(256, 256, false, &arrays(1)).unwrap().allocation_counts(), (1, 0));
        assert_eq!(sizes(1000, 256), vec![256, 256, 256, 232]);
        assert_eq!(partition_matmul(1000, 1000, false, &arrays(3)).unwrap().allocation_counts(), (9, 7));
        for k in 1..6 {
            let p = partition_matmul(256 * k, 256 * k, false, &arrays(2)).unwrap();
            assert_eq!(p.allocation_counts().1, 0);
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(partition_matmul(4, 4, false, &[]), Err(Error::NoArrays)));
        let p = partition_matmul(4, 4, false, &arrays(1)).unwrap();
        let w = Tensor::zeros(crate::DType::I8, vec![4, 5]).unwrap();
        assert!(matches!(build_graph(&p, &w, &GraphOptions::default()), Err(Error::ShapeMismatch(_))));
        let w = Tensor::from_i8(vec![4, 4], vec![-1; 16]).unwrap();
        assert!(matches!(build_graph(&p, &w, &GraphOptions::default()), Err(Error::WeightOutOfRange { .. })));
    }

    proptest! {
        #[test]
        fn tiles_cover_grid_exactly(n in 1usize..10_000, m in 1usize..10_000, signed: bool, k in 1usize..7) {
            let p = partition_matmul(n, m, signed, &arrays(k)).unwrap();
            let cap = if signed { 128 } else { 256 };
            // coverage by area plus per-axis disjointness of the range lists
            let area: usize = p.tiles.iter().map(|t| t.n_rows() * t.n_cols()).sum();
            prop_assert_eq!(area, n * m);
            for group in &p.row_groups {
                let mut rows: Vec<_> = group.iter().map(|&t| p.tiles[t].rows.clone()).collect();
                rows.sort_by_key(|r| r.start);
                prop_assert_eq!(rows[0].start, 0);
                prop_assert_eq!(rows.last().unwrap().end, n);
                prop_assert!(rows.windows(2).all(|w| w[0].end == w[1].start));
                prop_assert!(rows.iter().all(|r| r.len() <= cap));
                let c = &p.tiles[group[0]].cols;
                prop_assert!(group.iter().all(|&t| &p.tiles[t].cols == c));
            }
            let stripes: Vec<_> = p.col_order.iter().map(|&s| p.tiles[p.row_groups[s][0]].cols.clone()).collect();
            prop_assert_eq!(stripes[0].start, 0);
            prop_assert_eq!(stripes.last().unwrap().end, m);
            prop_assert!(stripes.windows(2).all(|w| w[0].end == w[1].start));

            let (full, partial) = p.allocation_counts();
            let (r, c) = (sizes(n, cap).len(), sizes(m, 256).len());
            prop_assert_eq!(full + partial, r * c);
            prop_assert!(partial <= r + c);

            let mut counts = vec![0usize; k];
            for t in &p.tiles {
                counts[t.binding.chip * 2 + t.binding.array] += 1;
            }
            let used = &counts[..k.min(p.tiles.len()).max(1)];
            let spread = counts.iter().max().unwrap() - counts.iter().min().unwrap();
            prop_assert!(spread <= 1 || used.len() < k);
        }
    }
}
