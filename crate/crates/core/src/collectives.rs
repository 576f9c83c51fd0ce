//! Broadcast/reduction spanning trees, dimension-ordered unicast routes and
//! cyclic KV-cache placement.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::config::{HardwareSpec, ModelSpec};
use crate::error::{Error, Result};
use crate::mesh::{Coord, Dir, MeshGeometry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreePhase {
    Broadcast,
    Reduction,
}

/// A tree over mesh routers. Every edge joins neighbouring routers.
///
/// Broadcast payloads flow root → leaves; reduction payloads flow along the
/// same edges in reverse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanningTree {
    pub root: Coord,
    pub phase: TreePhase,
    parent: BTreeMap<Coord, Option<Coord>>,
    depth: BTreeMap<Coord, u32>,
}

impl SpanningTree {
    pub fn singleton(root: Coord, phase: TreePhase) -> Self {
        Self {
            root,
            phase,
            parent: BTreeMap::from([(root, None)]),
            depth: BTreeMap::from([(root, 0)]),
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = Coord> + '_ {
        self.parent.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn contains(&self, c: Coord) -> bool {
        self.parent.contains_key(&c)
    }

    pub fn parent(&self, c: Coord) -> Option<Coord> {
        self.parent.get(&c).copied().flatten()
    }

    pub fn node_depth(&self, c: Coord) -> Option<u32> {
        self.depth.get(&c).copied()
    }

    pub fn depth(&self) -> u32 {
        self.depth.values().copied().max().unwrap_or(0)
    }

    pub fn children(&self, c: Coord) -> Vec<Coord> {
        self.parent
            .iter()
            .filter(|(_, p)| **p == Some(c))
            .map(|(&n, _)| n)
            .collect()
    }

    /// `(parent, child)` pairs in node order.
    pub fn edges(&self) -> Vec<(Coord, Coord)> {
        self.parent
            .iter()
            .filter_map(|(&c, p)| p.map(|p| (p, c)))
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.parent.len() - 1
    }

    /// Edges grouped by child depth: element `i` holds edges whose child is
    /// at depth `i + 1`.
    pub fn levels(&self) -> Vec<Vec<(Coord, Coord)>> {
        let mut levels = vec![Vec::new(); self.depth() as usize];
        for (p, c) in self.edges() {
            levels[self.depth[&c] as usize - 1].push((p, c));
        }
        levels
    }

    pub fn max_fanout(&self) -> usize {
        self.nodes().map(|n| self.children(n).len()).max().unwrap_or(0)
    }
}

/// Breadth-first tree over `allowed` routers rooted at `root`, visiting
/// neighbours in the fixed order east, west, south, north. The result is
/// pruned to the union of root-to-`targets` paths, so routers in `allowed`
/// that are not targets survive only as relays.
pub fn build_tree_within(
    allowed: &BTreeSet<Coord>,
    targets: &BTreeSet<Coord>,
    root: Coord,
    geom: &MeshGeometry,
    phase: TreePhase,
) -> Result<SpanningTree> {
    let mut parent: BTreeMap<Coord, Option<Coord>> = BTreeMap::from([(root, None)]);
    let mut depth: BTreeMap<Coord, u32> = BTreeMap::from([(root, 0)]);
    let mut queue = VecDeque::from([root]);
    while let Some(n) = queue.pop_front() {
        for dir in Dir::ALL {
            let Some(m) = geom.neighbor(n, dir) else { continue };
            if allowed.contains(&m) && !parent.contains_key(&m) {
                parent.insert(m, Some(n));
                depth.insert(m, depth[&n] + 1);
                queue.push_back(m);
            }
        }
    }
    if targets.iter().any(|t| !parent.contains_key(t)) {
        return Err(Error::Disconnected { root });
    }
    let mut keep: BTreeSet<Coord> = BTreeSet::from([root]);
    for &t in targets {
        let mut n = t;
        while keep.insert(n) {
            match parent[&n] {
                Some(p) => n = p,
                None => break,
            }
        }
    }
    parent.retain(|c, _| keep.contains(c));
    depth.retain(|c, _| keep.contains(c));
    Ok(SpanningTree { root, phase, parent, depth })
}

/// Breadth-first spanning tree over exactly `members ∪ {root}`.
pub fn build_tree(
    members: &BTreeSet<Coord>,
    root: Coord,
    geom: &MeshGeometry,
    phase: TreePhase,
) -> Result<SpanningTree> {
    let mut allowed = members.clone();
    allowed.insert(root);
    build_tree_within(&allowed, &allowed, root, geom, phase)
}

/// Dimension-ordered route: column (X) moves first, then row (Y). Returns
/// the routers visited after `src`, ending at `dst`.
pub fn unicast_route(src: Coord, dst: Coord) -> Vec<Coord> {
    let mut hops = Vec::with_capacity(src.manhattan(dst) as usize);
    let mut c = src;
    while c.col != dst.col {
        c.col = if dst.col > c.col { c.col + 1 } else { c.col - 1 };
        hops.push(c);
    }
    while c.row != dst.row {
        c.row = if dst.row > c.row { c.row + 1 } else { c.row - 1 };
        hops.push(c);
    }
    hops
}

/// Cyclic placement of per-token KV entries over a fixed list of scratchpads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvLayout {
    pub sites: Vec<Coord>,
    /// Tokens each site can hold.
    pub site_capacity: u64,
    next: u64,
}

impl KvLayout {
    pub fn new(sites: Vec<Coord>, site_capacity: u64) -> Self {
        assert!(!sites.is_empty(), "KV layout needs at least one site");
        Self { sites, site_capacity, next: 0 }
    }

    /// Layout over `sites` sized from scratchpad space left after the
    /// intermediate reservation. One token stores every head's entry of
    /// `head_dim` words at a single site.
    pub fn for_sites(sites: Vec<Coord>, hw: &HardwareSpec, model: &ModelSpec) -> Self {
        let entry_bytes = (model.head_dim as u64 * hw.weight_bits as u64).div_ceil(8);
        let entries = hw.kv_bytes_per_router() / entry_bytes;
        Self::new(sites, entries / model.num_heads as u64)
    }

    pub fn capacity(&self) -> u64 {
        self.site_capacity * self.sites.len() as u64
    }

    pub fn site_index(&self, token: u64) -> usize {
        (token % self.sites.len() as u64) as usize
    }

    pub fn site_of(&self, token: u64) -> Coord {
        self.sites[self.site_index(token)]
    }

    pub fn appended(&self) -> u64 {
        self.next
    }

    /// Site for `token`'s entry; advances the append counter.
    pub fn append(&mut self, token: u64) -> Result<Coord> {
        if token >= self.capacity() {
            return Err(Error::KvCapacityExhausted { token, capacity: self.capacity() });
        }
        self.next = self.next.max(token + 1);
        Ok(self.site_of(token))
    }

    /// Tokens stored per site after `tokens` appends.
    pub fn loads(&self, tokens: u64) -> Vec<u64> {
        let s = self.sites.len() as u64;
        (0..s).map(|i| tokens / s + u64::from(i < tokens % s)).collect()
    }
}

/// Site for `token_index` under cyclic placement, advancing the layout.
pub fn kv_append_site(layout: &mut KvLayout, token_index: u64) -> Result<Coord> {
    layout.append(token_index)
}

/// Delivers one payload down the tree and counts receptions per router.
pub fn broadcast_deliveries(tree: &SpanningTree) -> BTreeMap<Coord, u32> {
    let mut got: BTreeMap<Coord, u32> = BTreeMap::from([(tree.root, 1)]);
    for level in tree.levels() {
        for (_, c) in level {
            *got.entry(c).or_default() += 1;
        }
    }
    got
}

/// Sums `contributions` toward the root level by level; routers without a
/// contribution relay zero.
pub fn reduce_along(tree: &SpanningTree, contributions: &BTreeMap<Coord, i64>) -> i64 {
    let mut acc: BTreeMap<Coord, i64> =
        tree.nodes().map(|n| (n, contributions.get(&n).copied().unwrap_or(0))).collect();
    for level in tree.levels().into_iter().rev() {
        for (p, c) in level {
            let v = acc.insert(c, 0).unwrap_or(0);
            *acc.get_mut(&p).expect("parent in tree") += v;
        }
    }
    acc[&tree.root]
}

/// Flits carried by each directed link when `flits` are broadcast down the tree.
pub fn link_loads(tree: &SpanningTree, flits: u64) -> BTreeMap<(Coord, Coord), u64> {
    let mut m = BTreeMap::new();
    for e in tree.edges() {
        *m.entry(e).or_insert(0) += flits;
    }
    m
}
