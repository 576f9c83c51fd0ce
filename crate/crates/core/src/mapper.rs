//! Spatial mapping of weight matrices onto PE crossbars.
//!
//! Every matrix is cut into crossbar-sized tiles and placed in a rectangular
//! region of routers. Three factors are searched:
//!
//! * intra-matrix shape: the region's height × width (exact factor pairs of
//!   the tile count that fit the mesh; if none fits, the tightest
//!   `h × ⌈n/h⌉` shapes),
//! * inter-matrix shape: column-wise shelf packing in the fixed order Q, K,
//!   V, O, then the feed-forward matrices,
//! * row–column ordering: whether tile rows or tile columns of the weight
//!   matrix run along region rows.
//!
//! Intermediates stay next to their weights: a projection's output shards,
//! and for K and V the cached rows, live in scratchpads of the routers of
//! the projection's region.
//!
//! The objective is hop-weighted flit volume of one layer's dataflow (see
//! [`cost`]). Small instances are searched exhaustively; larger ones by
//! best-response sweeps over the same candidate space starting from the
//! full-width row-major baseline, which therefore never gets worse than
//! that baseline.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::collectives::{build_tree_within, KvLayout, SpanningTree, TreePhase};
use crate::config::{HardwareSpec, MatrixId, ModelSpec};
use crate::error::{Error, Result};
use crate::mesh::{Coord, MeshGeometry, Region};

/// Tile grid of a `d_out × d_in` matrix on `rram_rows × rram_cols` crossbars.
pub fn tile_matrix(d_out: u32, d_in: u32, rram_rows: u32, rram_cols: u32) -> (u32, u32) {
    (d_out.div_ceil(rram_rows), d_in.div_ceil(rram_cols))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TileOrder {
    /// Tile `(i, j)` takes linear slot `i·tc + j`.
    RowMajor,
    /// Tile `(i, j)` takes linear slot `j·tr + i`.
    ColMajor,
}

/// A matrix, or an output-row slice of one, mapped as a single region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Unit {
    pub matrix: MatrixId,
    pub piece: u32,
    pub pieces: u32,
    /// First output row of this slice within the full matrix.
    pub row_start: u32,
    pub d_out: u32,
    pub d_in: u32,
}

impl Unit {
    pub fn tiles(&self, hw: &HardwareSpec) -> (u32, u32) {
        tile_matrix(self.d_out, self.d_in, hw.rram_rows, hw.rram_cols)
    }

    pub fn tile_count(&self, hw: &HardwareSpec) -> u32 {
        let (r, c) = self.tiles(hw);
        r * c
    }

    pub fn label(&self) -> String {
        if self.pieces == 1 {
            self.matrix.name().to_string()
        } else {
            format!("{}.{}", self.matrix, self.piece)
        }
    }
}

/// Units of one layer in mapping order; matrices wider than a compute tile
/// are halved along the output dimension until each piece fits.
pub fn layer_units(model: &ModelSpec, hw: &HardwareSpec) -> Result<Vec<Unit>> {
    layer_units_within(model, hw, hw.pe_count)
}

/// Like [`layer_units`], halving until every unit has at most `max_tiles` tiles
/// (or a single tile row).
pub fn layer_units_within(model: &ModelSpec, hw: &HardwareSpec, max_tiles: u32) -> Result<Vec<Unit>> {
    let mut units = Vec::new();
    for shape in model.layer_matrices() {
        let (tr, tc) = tile_matrix(shape.d_out, shape.d_in, hw.rram_rows, hw.rram_cols);
        if tc > hw.pe_count {
            return Err(Error::Capacity(format!(
                "one tile row of `{}` needs {tc} PEs, a compute tile has {}",
                shape.id, hw.pe_count
            )));
        }
        let mut ranges = vec![0..tr];
        while ranges.iter().any(|r| r.end - r.start > 1 && (r.end - r.start) * tc > max_tiles) {
            ranges = ranges
                .into_iter()
                .flat_map(|r| {
                    let mid = r.start + (r.end - r.start).div_ceil(2);
                    [r.start..mid, mid..r.end]
                })
                .collect();
        }
        let pieces = ranges.len() as u32;
        for (k, r) in ranges.into_iter().enumerate() {
            let row_start = r.start * hw.rram_rows;
            let row_end = (r.end * hw.rram_rows).min(shape.d_out);
            units.push(Unit {
                matrix: shape.id,
                piece: k as u32,
                pieces,
                row_start,
                d_out: row_end - row_start,
                d_in: shape.d_in,
            });
        }
    }
    Ok(units)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub height: u32,
    pub width: u32,
}

/// Intra-matrix shape × ordering candidates for `unit`.
pub fn candidates(unit: &Unit, hw: &HardwareSpec) -> Vec<(Shape, TileOrder)> {
    let (tr, tc) = unit.tiles(hw);
    let n = tr * tc;
    let mut shapes: Vec<Shape> = (1..=hw.mesh_rows.min(n))
        .filter(|h| n % h == 0 && n / h <= hw.mesh_cols)
        .map(|h| Shape { height: h, width: n / h })
        .collect();
    if shapes.is_empty() {
        shapes = (1..=hw.mesh_rows)
            .map(|h| Shape { height: h, width: n.div_ceil(h) })
            .filter(|s| s.width <= hw.mesh_cols)
            .collect();
        shapes.dedup_by_key(|s| s.width);
    }
    let orders: &[TileOrder] = if tr == 1 || tc == 1 {
        &[TileOrder::RowMajor]
    } else {
        &[TileOrder::RowMajor, TileOrder::ColMajor]
    };
    shapes
        .into_iter()
        .flat_map(|s| orders.iter().map(move |&o| (s, o)))
        .collect()
}

/// The naive choice: full mesh width, row-major.
pub fn baseline_choice(unit: &Unit, hw: &HardwareSpec) -> (Shape, TileOrder) {
    let n = unit.tile_count(hw);
    let height = n.div_ceil(hw.mesh_cols);
    (Shape { height, width: n.div_ceil(height) }, TileOrder::RowMajor)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub unit: Unit,
    pub region: Region,
    pub order: TileOrder,
    pub tile_rows: u32,
    pub tile_cols: u32,
}

impl Placement {
    pub fn tile_count(&self) -> u32 {
        self.tile_rows * self.tile_cols
    }

    pub fn tile_coord(&self, i: u32, j: u32) -> Coord {
        let slot = match self.order {
            TileOrder::RowMajor => i * self.tile_cols + j,
            TileOrder::ColMajor => j * self.tile_rows + i,
        };
        let w = self.region.width();
        Coord::new(self.region.row_start + slot / w, self.region.col_start + slot % w)
    }

    /// `(i, j, router)` for every tile.
    pub fn tiles(&self) -> Vec<(u32, u32, Coord)> {
        let mut v = Vec::with_capacity(self.tile_count() as usize);
        for i in 0..self.tile_rows {
            for j in 0..self.tile_cols {
                v.push((i, j, self.tile_coord(i, j)));
            }
        }
        v
    }

    /// Output rows (local to the unit) produced by tile row `i`.
    pub fn shard_rows(&self, i: u32, hw: &HardwareSpec) -> Range<u32> {
        i * hw.rram_rows..((i + 1) * hw.rram_rows).min(self.unit.d_out)
    }

    /// Input columns consumed by tile column `j`.
    pub fn shard_cols(&self, j: u32, hw: &HardwareSpec) -> Range<u32> {
        j * hw.rram_cols..((j + 1) * hw.rram_cols).min(self.unit.d_in)
    }

    pub fn shard_members(&self, i: u32) -> Vec<Coord> {
        (0..self.tile_cols).map(|j| self.tile_coord(i, j)).collect()
    }

    /// Member with the smallest eccentricity; ties go to the smallest coordinate.
    pub fn shard_root(&self, i: u32) -> Coord {
        let members = self.shard_members(i);
        *members
            .iter()
            .min_by_key(|&&c| (members.iter().map(|&m| c.manhattan(m)).max().unwrap_or(0), c))
            .expect("shard has members")
    }

    /// Tile router closest to `from`; ties go to the smallest coordinate.
    pub fn entry_router(&self, from: Coord) -> Coord {
        self.tiles()
            .into_iter()
            .map(|(_, _, c)| c)
            .min_by_key(|&c| (c.manhattan(from), c))
            .expect("placement has tiles")
    }

    pub fn tile_routers(&self) -> BTreeSet<Coord> {
        self.tiles().into_iter().map(|(_, _, c)| c).collect()
    }

    pub fn region_routers(&self) -> BTreeSet<Coord> {
        self.region.routers().collect()
    }

    pub fn broadcast_tree(&self, from: Coord, geom: &MeshGeometry) -> SpanningTree {
        let root = self.entry_router(from);
        build_tree_within(&self.region_routers(), &self.tile_routers(), root, geom, TreePhase::Broadcast)
            .expect("region is connected")
    }

    pub fn reduction_tree(&self, i: u32, geom: &MeshGeometry) -> SpanningTree {
        let members: BTreeSet<Coord> = self.shard_members(i).into_iter().collect();
        build_tree_within(&self.region_routers(), &members, self.shard_root(i), geom, TreePhase::Reduction)
            .expect("region is connected")
    }
}

/// Adapter factors sharing a base matrix's region. Tile `(i, j)` keeps the
/// `A` columns of input block `j` and the `B` rows of output block `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoraPlacement {
    pub unit: Unit,
    pub region: Region,
    pub rank: u32,
    /// Largest SRAM cell demand on any PE of the region.
    pub max_pe_cells: u64,
    /// Bytes of both factors, `r·(d_in + d_out)·weight_bits/8`.
    pub factor_bytes: u64,
    pub region_sram_bytes: u64,
}

impl LoraPlacement {
    fn new(p: &Placement, rank: u32, hw: &HardwareSpec) -> Self {
        let mut max_pe_cells = 0;
        for i in 0..p.tile_rows {
            for j in 0..p.tile_cols {
                let rows = p.shard_rows(i, hw).len() as u64;
                let cols = p.shard_cols(j, hw).len() as u64;
                max_pe_cells = max_pe_cells.max(rank as u64 * (rows + cols));
            }
        }
        let cell_bytes = |cells: u64| (cells * hw.weight_bits as u64).div_ceil(8);
        Self {
            unit: p.unit,
            region: p.region,
            rank,
            max_pe_cells,
            factor_bytes: cell_bytes(rank as u64 * (p.unit.d_in + p.unit.d_out) as u64),
            region_sram_bytes: cell_bytes(
                p.tile_count() as u64 * hw.sram_rows as u64 * hw.sram_cols as u64,
            ),
        }
    }

    /// Bytes written into one PE's SRAM when the adapter is loaded.
    pub fn max_pe_bytes(&self, hw: &HardwareSpec) -> u64 {
        (self.max_pe_cells * hw.weight_bits as u64).div_ceil(8)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intermediate {
    Query,
    Key,
    Value,
    Output,
    KeyCache,
    ValueCache,
    FfnGate,
    FfnUp,
    FfnDown,
}

impl Intermediate {
    pub fn weight(self) -> MatrixId {
        match self {
            Intermediate::Query => MatrixId::Q,
            Intermediate::Key | Intermediate::KeyCache => MatrixId::K,
            Intermediate::Value | Intermediate::ValueCache => MatrixId::V,
            Intermediate::Output => MatrixId::O,
            Intermediate::FfnGate => MatrixId::FfnGate,
            Intermediate::FfnUp => MatrixId::FfnUp,
            Intermediate::FfnDown => MatrixId::FfnDown,
        }
    }
}

/// Traffic shape the cost model charges: `q_rows` query tokens at positions
/// `kv_len - q_rows .. kv_len` attending over `kv_len` cached keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataflowSummary {
    pub q_rows: u32,
    pub kv_len: u32,
}

impl DataflowSummary {
    pub fn prefill(tokens: u32) -> Self {
        Self { q_rows: tokens, kv_len: tokens }
    }

    /// One decode token at position `pos` (0-based).
    pub fn decode(pos: u32) -> Self {
        Self { q_rows: 1, kv_len: pos + 1 }
    }

    pub fn first_pos(&self) -> u32 {
        self.kv_len - self.q_rows
    }
}

impl Default for DataflowSummary {
    /// Decode step over a 64-token context.
    fn default() -> Self {
        Self::decode(63)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingPlan {
    pub layer: u32,
    /// Compute tile holding the plan's column 0.
    pub first_ct: u32,
    /// Mesh covering every tile the layer touches, in plan-local coordinates.
    pub geometry: MeshGeometry,
    /// Router where the layer's input rows arrive and its output rows leave.
    pub input_site: Coord,
    pub placements: Vec<Placement>,
    pub lora: Vec<LoraPlacement>,
    pub intermediates: BTreeMap<Intermediate, Vec<Coord>>,
    pub kv_keys: KvLayout,
    pub kv_values: KvLayout,
    pub cost: f64,
}

impl MappingPlan {
    pub fn placements_of(&self, m: MatrixId) -> impl Iterator<Item = &Placement> {
        self.placements.iter().filter(move |p| p.unit.matrix == m)
    }

    pub fn has(&self, m: MatrixId) -> bool {
        self.placements_of(m).next().is_some()
    }

    pub fn used_pes(&self) -> u32 {
        self.placements.iter().map(Placement::tile_count).sum()
    }

    /// PEs used on each compute tile the plan spans.
    pub fn tiles_per_ct(&self) -> Vec<u32> {
        let mut v = vec![0; self.geometry.cts as usize];
        for p in &self.placements {
            for (_, _, c) in p.tiles() {
                v[self.geometry.ct_of(c) as usize] += 1;
            }
        }
        v
    }

    /// Columns (plan-local) occupied by the layer.
    pub fn col_span(&self) -> Range<u32> {
        let lo = self.placements.iter().map(|p| p.region.col_start).min().unwrap_or(0);
        let hi = self.placements.iter().map(|p| p.region.col_end).max().unwrap_or(0);
        lo..hi
    }

    /// Checks disjointness, capacity and co-location.
    pub fn validate(&self, hw: &HardwareSpec) -> Result<()> {
        for (a, pa) in self.placements.iter().enumerate() {
            if !self.geometry.contains(Coord::new(pa.region.row_end - 1, pa.region.col_end - 1)) {
                return Err(Error::PlanMismatch(format!("{} leaves the mesh", pa.unit.label())));
            }
            if pa.region.cells() < pa.tile_count() {
                return Err(Error::PlanMismatch(format!("{} region too small", pa.unit.label())));
            }
            for pb in &self.placements[a + 1..] {
                if pa.region.overlaps(&pb.region) {
                    return Err(Error::PlanMismatch(format!(
                        "regions of {} and {} overlap",
                        pa.unit.label(),
                        pb.unit.label()
                    )));
                }
            }
            if self.geometry.ct_of(pa.region.origin())
                != self.geometry.ct_of(Coord::new(pa.region.row_start, pa.region.col_end - 1))
            {
                return Err(Error::PlanMismatch(format!("{} straddles tiles", pa.unit.label())));
            }
        }
        let sram_cells = hw.sram_rows as u64 * hw.sram_cols as u64;
        for l in &self.lora {
            if l.max_pe_cells > sram_cells {
                return Err(Error::Capacity(format!(
                    "adapter of {} needs {} SRAM cells on one PE, {} available",
                    l.unit.label(),
                    l.max_pe_cells,
                    sram_cells
                )));
            }
            if l.factor_bytes > l.region_sram_bytes {
                return Err(Error::Capacity(format!("adapter of {} exceeds region SRAM", l.unit.label())));
            }
        }
        for (inter, routers) in &self.intermediates {
            let want: BTreeSet<Coord> = self
                .placements_of(inter.weight())
                .flat_map(|p| p.region.routers())
                .collect();
            let got: BTreeSet<Coord> = routers.iter().copied().collect();
            if want != got {
                return Err(Error::PlanMismatch(format!("{inter:?} is not co-located with its weights")));
            }
        }
        Ok(())
    }

    /// Human-readable listing.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "layer {} first_ct {} mesh {}x{}x{} input {} cost {}",
            self.layer,
            self.first_ct,
            self.geometry.rows,
            self.geometry.cols_per_ct,
            self.geometry.cts,
            self.input_site,
            self.cost
        );
        for p in &self.placements {
            let _ = writeln!(
                s,
                "  {:<10} tiles {}x{} region rows {}..{} cols {}..{} {:?}",
                p.unit.label(),
                p.tile_rows,
                p.tile_cols,
                p.region.row_start,
                p.region.row_end,
                p.region.col_start,
                p.region.col_end,
                p.order
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }
}

/// First-fit shelf packing of `choices` starting at column `start_col`.
/// Each region goes into the first column shelf with enough free rows
/// (the newest shelf may widen); otherwise a new shelf opens to the right,
/// moving to the next compute tile rather than straddling a boundary.
/// Returns `None` when the packing needs more than `max_cts` tiles.
pub fn pack(
    units: &[Unit],
    choices: &[(Shape, TileOrder)],
    hw: &HardwareSpec,
    start_col: u32,
    max_cts: u32,
) -> Option<Vec<Placement>> {
    struct Shelf {
        x: u32,
        width: u32,
        used: u32,
    }
    let cols = hw.mesh_cols;
    let ct_end = |x: u32| (x / cols + 1) * cols;
    let mut shelves: Vec<Shelf> = Vec::new();
    let mut out = Vec::with_capacity(units.len());
    for (unit, &(shape, order)) in units.iter().zip(choices) {
        if shape.height > hw.mesh_rows || shape.width > cols {
            return None;
        }
        let last = shelves.len().saturating_sub(1);
        let slot = shelves.iter().position(|s| {
            s.used + shape.height <= hw.mesh_rows
                && (shape.width <= s.width || (!shelves.is_empty() && std::ptr::eq(s, &shelves[last]) && s.x + shape.width <= ct_end(s.x)))
        });
        let k = match slot {
            Some(k) => k,
            None => {
                let mut x = shelves.last().map_or(start_col, |s| s.x + s.width);
                if x + shape.width > ct_end(x) {
                    x = x.div_ceil(cols) * cols;
                }
                if x + shape.width > cols * max_cts {
                    return None;
                }
                shelves.push(Shelf { x, width: 0, used: 0 });
                shelves.len() - 1
            }
        };
        let s = &mut shelves[k];
        let (tile_rows, tile_cols) = unit.tiles(hw);
        out.push(Placement {
            unit: *unit,
            region: Region::new(Coord::new(s.used, s.x), shape.height, shape.width),
            order,
            tile_rows,
            tile_cols,
        });
        s.used += shape.height;
        s.width = s.width.max(shape.width);
    }
    Some(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct ReduceKey {
    h: u32,
    w: u32,
    order: TileOrder,
    tr: u32,
    tc: u32,
}

/// Memoised tree measurements; trees are translation invariant within a region.
#[derive(Debug, Default)]
pub struct TreeCache {
    reduce: HashMap<ReduceKey, Vec<u64>>,
    bcast: HashMap<(ReduceKey, u32, u32), u64>,
}

impl TreeCache {
    fn key(p: &Placement) -> ReduceKey {
        ReduceKey {
            h: p.region.height(),
            w: p.region.width(),
            order: p.order,
            tr: p.tile_rows,
            tc: p.tile_cols,
        }
    }

    fn normalised(p: &Placement) -> Placement {
        let mut q = p.clone();
        q.region = Region::new(Coord::new(0, 0), p.region.height(), p.region.width());
        q
    }

    /// Edge count of each shard's reduction tree.
    fn reduce_edges(&mut self, p: &Placement) -> &[u64] {
        self.reduce.entry(Self::key(p)).or_insert_with(|| {
            let q = Self::normalised(p);
            let geom = MeshGeometry::single(q.region.height(), q.region.width());
            (0..q.tile_rows).map(|i| q.reduction_tree(i, &geom).edge_count() as u64).collect()
        })
    }

    fn bcast_edges(&mut self, p: &Placement, root: Coord) -> u64 {
        let off = (root.row - p.region.row_start, root.col - p.region.col_start);
        *self.bcast.entry((Self::key(p), off.0, off.1)).or_insert_with(|| {
            let q = Self::normalised(p);
            let geom = MeshGeometry::single(q.region.height(), q.region.width());
            build_tree_within(
                &q.region_routers(),
                &q.tile_routers(),
                Coord::new(off.0, off.1),
                &geom,
                TreePhase::Broadcast,
            )
            .expect("region is connected")
            .edge_count() as u64
        })
    }
}

/// Flit and hop-weighted flit totals of a layer's dataflow, by pattern.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TrafficCost {
    pub broadcast: f64,
    pub reduction: f64,
    pub unicast: f64,
    /// Flits that enter the network (transfers between distinct routers).
    pub network_flits: u64,
}

impl TrafficCost {
    pub fn total(&self) -> f64 {
        self.broadcast + self.reduction + self.unicast
    }

    fn uni(&mut self, flits: u64, a: Coord, b: Coord) {
        let d = a.manhattan(b) as u64;
        if d > 0 {
            self.unicast += (flits * d) as f64;
            self.network_flits += flits;
        }
    }
}

/// Keys at site `s` of `sites` visible to queries at `first..first+n`
/// under a causal mask, summed over the queries.
pub fn causal_keys_at_site(site: u32, sites: u32, first: u32, n: u32) -> u64 {
    (first..first + n)
        .map(|p| if p >= site { ((p - site) / sites + 1) as u64 } else { 0 })
        .sum()
}

/// Positions in `lo..hi` stored at site `site` of `sites`.
pub fn tokens_at_site(site: u32, sites: u32, lo: u32, hi: u32) -> u64 {
    let below = |x: u32| if x > site { ((x - site - 1) / sites + 1) as u64 } else { 0 };
    below(hi) - below(lo)
}

/// Queries in `first..kv_len` with at least one causal key at site `site`.
pub fn queries_reaching_site(site: u32, first: u32, kv_len: u32) -> u64 {
    kv_len.saturating_sub(first.max(site)) as u64
}

/// Where each head's query vector is assembled: the root of the Q shard
/// holding the head's first column. Partial plans missing that shard use the
/// input site.
pub fn head_routers(plan: &MappingPlan, model: &ModelSpec, hw: &HardwareSpec) -> Vec<Coord> {
    (0..model.num_heads)
        .map(|h| {
            let col = h * model.head_dim;
            plan.placements_of(MatrixId::Q)
                .find(|p| (p.unit.row_start..p.unit.row_start + p.unit.d_out).contains(&col))
                .map_or(plan.input_site, |p| p.shard_root((col - p.unit.row_start) / hw.rram_rows))
        })
        .collect()
}

/// Placement and tile row holding global output row `row` of matrix `m`.
pub fn shard_of<'a>(plan: &'a MappingPlan, m: MatrixId, row: u32, hw: &HardwareSpec) -> (&'a Placement, u32) {
    let p = plan
        .placements_of(m)
        .find(|p| (p.unit.row_start..p.unit.row_start + p.unit.d_out).contains(&row))
        .expect("row inside matrix");
    (p, (row - p.unit.row_start) / hw.rram_rows)
}

/// Output shards of matrix `m`: `(placement, tile row, global row range, root)`.
pub fn output_shards<'a>(
    plan: &'a MappingPlan,
    m: MatrixId,
    hw: &HardwareSpec,
) -> Vec<(&'a Placement, u32, Range<u32>, Coord)> {
    let mut v = Vec::new();
    for p in plan.placements_of(m) {
        for i in 0..p.tile_rows {
            let r = p.shard_rows(i, hw);
            v.push((p, i, p.unit.row_start + r.start..p.unit.row_start + r.end, p.shard_root(i)));
        }
    }
    v
}

fn overlap(a: &Range<u32>, b: &Range<u32>) -> u32 {
    a.end.min(b.end).saturating_sub(a.start.max(b.start))
}

/// Hop-weighted flit volume of one layer's dataflow under `summary`.
///
/// Charged transfers, each as flits × Manhattan hops:
/// input to each Q/K/V region entry and down its broadcast tree; partial
/// sums up each shard's reduction tree; query segments to head routers;
/// new K/V rows to their cyclic sites; queries to key sites and scores
/// back; probabilities to value sites and partial contexts back; context
/// to the output projection; feed-forward gathers; and the layer output
/// back to the input site.
pub fn cost(plan: &MappingPlan, model: &ModelSpec, hw: &HardwareSpec, summary: DataflowSummary) -> f64 {
    traffic(plan, model, hw, summary, &mut TreeCache::default()).total()
}

pub fn traffic(
    plan: &MappingPlan,
    model: &ModelSpec,
    hw: &HardwareSpec,
    summary: DataflowSummary,
    cache: &mut TreeCache,
) -> TrafficCost {
    let n = summary.q_rows as u64;
    let f = |e: u64| hw.flits(e);
    let mut t = TrafficCost::default();
    let input = plan.input_site;

    // projection stages: gather sources → entry, broadcast, reduce
    let mut project = |t: &mut TrafficCost, m: MatrixId, sources: &[(Coord, Range<u32>)]| {
        for p in plan.placements_of(m) {
            let entry = p.entry_router(input);
            for (src, cols) in sources {
                t.uni(n * f(cols.len() as u64), *src, entry);
            }
            let edges = cache.bcast_edges(p, entry);
            let row_flits = n * f(p.unit.d_in as u64);
            t.broadcast += (row_flits * edges) as f64;
            t.network_flits += row_flits * edges;
            let red = cache.reduce_edges(p).to_vec();
            for (i, edges) in red.into_iter().enumerate() {
                let fl = n * f(p.shard_rows(i as u32, hw).len() as u64);
                t.reduction += (fl * edges) as f64;
                t.network_flits += fl * edges;
            }
        }
    };

    let d = model.hidden_dim;
    let x_src = [(input, 0..d)];
    for m in [MatrixId::Q, MatrixId::K, MatrixId::V] {
        project(&mut t, m, &x_src);
    }

    let heads = head_routers(plan, model, hw);
    let hd = model.head_dim;
    // query segments onto head routers
    let q_shards = output_shards(plan, MatrixId::Q, hw);
    for (h, &hr) in heads.iter().enumerate() {
        let cols = h as u32 * hd..(h as u32 + 1) * hd;
        for (_, _, rows, root) in &q_shards {
            let ov = overlap(rows, &cols);
            if ov > 0 {
                t.uni(n * f(ov as u64), *root, hr);
            }
        }
    }
    // new keys/values onto their cyclic sites, one packet per shard and site
    let first = summary.first_pos();
    for (m, layout) in [(MatrixId::K, &plan.kv_keys), (MatrixId::V, &plan.kv_values)] {
        let sites = layout.sites.len() as u32;
        for (_, _, rows, root) in output_shards(plan, m, hw) {
            for (s, &site) in layout.sites.iter().enumerate() {
                let count = tokens_at_site(s as u32, sites, first, summary.kv_len);
                if count > 0 {
                    t.uni(f(count * rows.len() as u64), root, site);
                }
            }
        }
    }
    // attention exchanges: every cached key is scored, the mask applies at softmax
    let sk = plan.kv_keys.sites.len() as u32;
    let sv = plan.kv_values.sites.len() as u32;
    for &hr in &heads {
        for (s, &site) in plan.kv_keys.sites.iter().enumerate() {
            let keys = tokens_at_site(s as u32, sk, 0, summary.kv_len);
            if keys > 0 {
                t.uni(f(n * hd as u64), hr, site);
                t.uni(f(n * keys), site, hr);
            }
        }
        for (s, &site) in plan.kv_values.sites.iter().enumerate() {
            let probs = causal_keys_at_site(s as u32, sv, first, summary.q_rows);
            if probs > 0 {
                let rows = queries_reaching_site(s as u32, first, summary.kv_len);
                t.uni(f(probs), hr, site);
                t.uni(f(rows * hd as u64), site, hr);
            }
        }
    }
    // context to the output projection
    let ctx_src: Vec<(Coord, Range<u32>)> = heads
        .iter()
        .enumerate()
        .map(|(h, &hr)| (hr, h as u32 * hd..(h as u32 + 1) * hd))
        .collect();
    project(&mut t, MatrixId::O, &ctx_src);

    let shard_src = |m: MatrixId| -> Vec<(Coord, Range<u32>)> {
        output_shards(plan, m, hw).into_iter().map(|(_, _, r, root)| (root, r)).collect()
    };
    let mut last = MatrixId::O;
    if plan.has(MatrixId::FfnUp) {
        let attn_out = shard_src(MatrixId::O);
        if plan.has(MatrixId::FfnGate) {
            project(&mut t, MatrixId::FfnGate, &attn_out);
        }
        project(&mut t, MatrixId::FfnUp, &attn_out);
        if plan.has(MatrixId::FfnGate) {
            let gates = output_shards(plan, MatrixId::FfnGate, hw);
            for ((_, _, r, groot), (_, _, _, uroot)) in gates.iter().zip(output_shards(plan, MatrixId::FfnUp, hw)) {
                t.uni(n * f(r.len() as u64), *groot, uroot);
            }
        }
        project(&mut t, MatrixId::FfnDown, &shard_src(MatrixId::FfnUp));
        last = MatrixId::FfnDown;
    }
    for (root, rows) in shard_src(last) {
        t.uni(n * f(rows.len() as u64), root, input);
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapperOptions {
    pub summary: DataflowSummary,
    /// Largest candidate product searched exhaustively.
    pub exhaustive_limit: u64,
}

impl Default for MapperOptions {
    fn default() -> Self {
        Self { summary: DataflowSummary::default(), exhaustive_limit: 4096 }
    }
}

fn tie_key(placements: &[Placement]) -> Vec<(Coord, u32, u32, TileOrder)> {
    placements
        .iter()
        .map(|p| (p.region.origin(), p.region.height(), p.region.width(), p.order))
        .collect()
}

/// Builds a complete plan from placements; `start_col` is the global
/// column where the layer's first region may begin.
pub fn assemble_plan(
    layer: u32,
    placements: Vec<Placement>,
    model: &ModelSpec,
    hw: &HardwareSpec,
) -> MappingPlan {
    let lo = placements.iter().map(|p| p.region.col_start).min().unwrap_or(0);
    let hi = placements.iter().map(|p| p.region.col_end).max().unwrap_or(1);
    let first_ct = lo / hw.mesh_cols;
    let last_ct = (hi - 1) / hw.mesh_cols;
    let shift = first_ct * hw.mesh_cols;
    let placements: Vec<Placement> = placements
        .into_iter()
        .map(|mut p| {
            p.region.col_start -= shift;
            p.region.col_end -= shift;
            p
        })
        .collect();
    let geometry = MeshGeometry { rows: hw.mesh_rows, cols_per_ct: hw.mesh_cols, cts: last_ct - first_ct + 1 };
    let input_site = placements.first().map(|p| p.region.origin()).unwrap_or(Coord::new(0, 0));
    let lora = placements
        .iter()
        .filter(|p| model.lora.targets(p.unit.matrix))
        .map(|p| LoraPlacement::new(p, model.lora.rank, hw))
        .collect();
    let mut intermediates = BTreeMap::new();
    let inters = [
        Intermediate::Query,
        Intermediate::Key,
        Intermediate::Value,
        Intermediate::Output,
        Intermediate::KeyCache,
        Intermediate::ValueCache,
        Intermediate::FfnGate,
        Intermediate::FfnUp,
        Intermediate::FfnDown,
    ];
    for inter in inters {
        let routers: Vec<Coord> = placements
            .iter()
            .filter(|p| p.unit.matrix == inter.weight())
            .flat_map(|p| p.region.routers())
            .collect();
        if !routers.is_empty() {
            intermediates.insert(inter, routers);
        }
    }
    let sites = |i: Intermediate| intermediates.get(&i).cloned().unwrap_or_else(|| vec![input_site]);
    let kv_keys = KvLayout::for_sites(sites(Intermediate::KeyCache), hw, model);
    let kv_values = KvLayout::for_sites(sites(Intermediate::ValueCache), hw, model);
    MappingPlan {
        layer,
        first_ct,
        geometry,
        input_site,
        placements,
        lora,
        intermediates,
        kv_keys,
        kv_values,
        cost: 0.0,
    }
}

/// Search over the candidate space of `units` placed from `start_col`.
pub fn optimize_units(
    layer: u32,
    units: &[Unit],
    model: &ModelSpec,
    hw: &HardwareSpec,
    start_col: u32,
    max_cts: u32,
    opts: &MapperOptions,
) -> Result<MappingPlan> {
    let cands: Vec<Vec<(Shape, TileOrder)>> = units.iter().map(|u| candidates(u, hw)).collect();
    let mut cache = TreeCache::default();
    let mut eval = |choices: &[(Shape, TileOrder)]| -> Option<(f64, Vec<Placement>)> {
        let placements = pack(units, choices, hw, start_col, max_cts)?;
        let plan = assemble_plan(layer, placements.clone(), model, hw);
        let c = traffic(&plan, model, hw, opts.summary, &mut cache).total();
        Some((c, placements))
    };
    // fewer compute tiles first, then traffic, then position
    let cts = |ps: &[Placement]| ps.iter().map(|p| (p.region.col_end - 1) / hw.mesh_cols).max().unwrap_or(0);
    let better = |a: &(f64, Vec<Placement>), b: &(f64, Vec<Placement>)| {
        (cts(&a.1), a.0) < (cts(&b.1), b.0)
            || (cts(&a.1) == cts(&b.1) && a.0 == b.0 && tie_key(&a.1) < tie_key(&b.1))
    };

    let product = cands.iter().try_fold(1u64, |acc, c| acc.checked_mul(c.len() as u64));
    let mut best: Option<(f64, Vec<Placement>)> = None;
    if product.is_some_and(|p| p <= opts.exhaustive_limit) {
        let mut idx = vec![0usize; units.len()];
        loop {
            let choice: Vec<_> = idx.iter().zip(&cands).map(|(&i, c)| c[i]).collect();
            if let Some(r) = eval(&choice) {
                if best.as_ref().is_none_or(|b| better(&r, b)) {
                    best = Some(r);
                }
            }
            let mut k = 0;
            loop {
                if k == idx.len() {
                    break;
                }
                idx[k] += 1;
                if idx[k] < cands[k].len() {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == idx.len() {
                break;
            }
        }
    } else {
        let mut current: Vec<(Shape, TileOrder)> = units.iter().map(|u| baseline_choice(u, hw)).collect();
        best = eval(&current);
        if best.is_none() {
            // baseline does not pack: fall back to the first feasible tightest shapes
            current = cands.iter().map(|c| c[c.len() / 2]).collect();
            best = eval(&current);
        }
        let mut improved = best.is_some();
        while improved {
            improved = false;
            for u in 0..units.len() {
                for &cand in &cands[u] {
                    if cand == current[u] {
                        continue;
                    }
                    let mut trial = current.clone();
                    trial[u] = cand;
                    if let Some(r) = eval(&trial) {
                        if better(&r, best.as_ref().expect("have incumbent")) {
                            best = Some(r);
                            current = trial;
                            improved = true;
                        }
                    }
                }
            }
        }
    }
    let (c, placements) = best.ok_or_else(|| {
        let tiles: u32 = units.iter().map(|u| u.tile_count(hw)).sum();
        Error::Capacity(format!(
            "layer {layer} ({tiles} tiles) does not pack into {max_cts} compute tile(s) of {} PEs",
            hw.pe_count
        ))
    })?;
    let mut plan = assemble_plan(layer, placements, model, hw);
    plan.cost = c;
    plan.validate(hw)?;
    Ok(plan)
}

/// Maps one layer onto a single compute tile.
pub fn map_layer(model: &ModelSpec, hw: &HardwareSpec) -> Result<MappingPlan> {
    map_layer_with(model, hw, &MapperOptions::default())
}

pub fn map_layer_with(model: &ModelSpec, hw: &HardwareSpec, opts: &MapperOptions) -> Result<MappingPlan> {
    let units = layer_units(model, hw)?;
    if units.iter().any(|u| u.pieces > 1) {
        let tiles: u32 = units.iter().map(|u| u.tile_count(hw)).sum();
        return Err(Error::Capacity(format!("layer needs {tiles} PEs, a compute tile has {}", hw.pe_count)));
    }
    optimize_units(0, &units, model, hw, 0, 1, opts)
}

/// Plan built from explicit choices, for inspection and search oracles.
pub fn plan_from_choices(
    model: &ModelSpec,
    hw: &HardwareSpec,
    choices: &[(Shape, TileOrder)],
    summary: DataflowSummary,
) -> Option<MappingPlan> {
    let units = layer_units(model, hw).ok()?;
    let placements = pack(&units, choices, hw, 0, 1)?;
    let mut plan = assemble_plan(0, placements, model, hw);
    plan.cost = cost(&plan, model, hw, summary);
    Some(plan)
}

/// Layer-to-tile assignment with one plan per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtAssignment {
    pub plans: Vec<MappingPlan>,
    pub ct_count: u32,
}

impl CtAssignment {
    /// Global tile indices spanned by `layer`.
    pub fn layer_cts(&self, layer: usize) -> Range<u32> {
        let p = &self.plans[layer];
        p.first_ct..p.first_ct + p.geometry.cts
    }

    /// PEs used per compute tile.
    pub fn tiles_per_ct(&self) -> Vec<u32> {
        let mut v = vec![0; self.ct_count as usize];
        for p in &self.plans {
            for (k, n) in p.tiles_per_ct().into_iter().enumerate() {
                v[p.first_ct as usize + k] += n;
            }
        }
        v
    }
}

/// Units for multi-tile layers: halving further (down to a quarter tile)
/// often packs into fewer compute tiles. Picks the granularity whose
/// first layer spans the fewest tiles, then the coarsest.
fn split_granularity(model: &ModelSpec, hw: &HardwareSpec, opts: &MapperOptions) -> Result<Vec<Unit>> {
    let base = layer_units(model, hw)?;
    let tiles: u32 = base.iter().map(|u| u.tile_count(hw)).sum();
    if tiles <= hw.pe_count {
        return Ok(base);
    }
    let mut best: Option<(u32, Vec<Unit>)> = None;
    for div in [1, 2, 4] {
        let units = layer_units_within(model, hw, hw.pe_count / div)?;
        if div > 1 && units.len() == best.as_ref().map_or(0, |b| b.1.len()) {
            continue;
        }
        let Ok(plan) = optimize_units(0, &units, model, hw, 0, hw.max_cts, opts) else { continue };
        let span = plan.first_ct * hw.mesh_cols + plan.col_span().end;
        if best.as_ref().is_none_or(|b| span < b.0) {
            best = Some((span, units));
        }
    }
    Ok(best.map_or(base, |b| b.1))
}

/// Packs layers in order onto adjacent compute tiles. Oversized matrices
/// are split along the output dimension; identical layers starting at the
/// same column offset reuse one search result.
pub fn split_across_cts(model: &ModelSpec, hw: &HardwareSpec) -> Result<CtAssignment> {
    split_across_cts_with(model, hw, &MapperOptions::default())
}

pub fn split_across_cts_with(model: &ModelSpec, hw: &HardwareSpec, opts: &MapperOptions) -> Result<CtAssignment> {
    let units = split_granularity(model, hw, opts)?;
    let mut plans = Vec::with_capacity(model.num_layers as usize);
    let mut memo: HashMap<u32, MappingPlan> = HashMap::new();
    let mut cursor = 0u32;
    for layer in 0..model.num_layers {
        let offset = cursor % hw.mesh_cols;
        let ct = cursor / hw.mesh_cols;
        let template = match memo.get(&offset) {
            Some(p) => p.clone(),
            None => {
                let p = optimize_units(0, &units, model, hw, offset, hw.max_cts, opts).map_err(|e| match e {
                    Error::Capacity(_) => Error::TooManyCts {
                        needed: (ct + 1) as usize + 1,
                        max: hw.max_cts as usize,
                    },
                    other => other,
                })?;
                memo.insert(offset, p.clone());
                p
            }
        };
        let mut plan = template;
        plan.layer = layer;
        plan.first_ct += ct;
        let end = plan.first_ct * hw.mesh_cols + plan.col_span().end;
        if end.div_ceil(hw.mesh_cols) > hw.max_cts {
            return Err(Error::TooManyCts { needed: end.div_ceil(hw.mesh_cols) as usize, max: hw.max_cts as usize });
        }
        cursor = end;
        plans.push(plan);
    }
    let ct_count = cursor.div_ceil(hw.mesh_cols);
    Ok(CtAssignment { plans, ct_count })
}
