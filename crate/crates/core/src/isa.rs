//! Router instruction set and the layer compiler.
//!
//! An [`Instruction`] is issued by the controller to many routers at once:
//! it carries one [`MicroOp`] per participating router and a repeat count.
//! Iteration `k` of a repeated instruction handles token row `base + k`.
//! Instructions wait on the tags listed in `deps` (scoreboard style).
//!
//! Scratchpad data is addressed by [`Slot`]; every slot holds rows keyed by
//! a `u64`. Token-indexed slots use the token position; score and
//! probability slots use `(query << 32) | key`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::{HardwareSpec, MacroKind, MatrixId, ModelSpec};
use crate::error::{Error, Result};
use crate::mapper::{tokens_at_site, DataflowSummary, MappingPlan};
use crate::mesh::{Coord, MeshGeometry};

/// Programs above this many instructions are flagged in reports.
pub const PROGRAM_SIZE_WARNING: usize = 64 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Opcode {
    Send,
    BcastFwd,
    ReduceAdd,
    Dmac,
    Softmax,
    SpmRd,
    SpmWr,
    PeSmacRram,
    PeSmacSram,
    SramProg,
    Gate,
    Barrier,
}

impl Opcode {
    pub const ALL: [Opcode; 12] = [
        Opcode::Send,
        Opcode::BcastFwd,
        Opcode::ReduceAdd,
        Opcode::Dmac,
        Opcode::Softmax,
        Opcode::SpmRd,
        Opcode::SpmWr,
        Opcode::PeSmacRram,
        Opcode::PeSmacSram,
        Opcode::SramProg,
        Opcode::Gate,
        Opcode::Barrier,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            Opcode::Send => "SEND",
            Opcode::BcastFwd => "BCAST_FWD",
            Opcode::ReduceAdd => "REDUCE_ADD",
            Opcode::Dmac => "DMAC",
            Opcode::Softmax => "SOFTMAX",
            Opcode::SpmRd => "SPM_RD",
            Opcode::SpmWr => "SPM_WR",
            Opcode::PeSmacRram => "PE_SMAC_RRAM",
            Opcode::PeSmacSram => "PE_SMAC_SRAM",
            Opcode::SramProg => "SRAM_PROG",
            Opcode::Gate => "GATE",
            Opcode::Barrier => "BARRIER",
        }
    }

    /// Opcodes whose micro-ops cross the network.
    pub fn is_transfer(self) -> bool {
        matches!(self, Opcode::Send | Opcode::BcastFwd | Opcode::ReduceAdd)
    }

    /// Router resource a local micro-op occupies.
    pub fn resource(self) -> Option<Resource> {
        match self {
            Opcode::PeSmacRram => Some(Resource::Rram),
            Opcode::PeSmacSram | Opcode::SramProg => Some(Resource::Sram),
            Opcode::Dmac => Some(Resource::Dmac),
            Opcode::Softmax => Some(Resource::Softmax),
            Opcode::SpmRd | Opcode::SpmWr => Some(Resource::Spm),
            _ => None,
        }
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

/// Execution units inside one router–PE pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Resource {
    Rram,
    Sram,
    Dmac,
    Softmax,
    Spm,
}

impl Resource {
    pub const ALL: [Resource; 5] = [Resource::Rram, Resource::Sram, Resource::Dmac, Resource::Softmax, Resource::Spm];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Macro whose energy the unit draws.
    pub fn macro_kind(self) -> MacroKind {
        match self {
            Resource::Rram => MacroKind::RramAcim,
            Resource::Sram => MacroKind::SramDcim,
            Resource::Dmac | Resource::Softmax => MacroKind::Router,
            Resource::Spm => MacroKind::Scratchpad,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    Broadcast,
    Smac,
    Reduce,
    Attention,
    Output,
}

impl Phase {
    pub const ALL: [Phase; 5] = [Phase::Broadcast, Phase::Smac, Phase::Reduce, Phase::Attention, Phase::Output];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Broadcast => "broadcast",
            Phase::Smac => "smac",
            Phase::Reduce => "reduce",
            Phase::Attention => "attention",
            Phase::Output => "output",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Slot {
    LayerIn,
    /// Input rows of a unit (plan placement index).
    In(u16),
    /// Partial sums of a unit's output shard.
    Psum(u16, u16),
    /// Finalised output shard.
    Shard(u16, u16),
    Query(u16),
    QueryIn(u16),
    KCache,
    VCache,
    ScoreOut(u16),
    Score(u16),
    Prob(u16),
    ProbIn(u16),
    CtxPart(u16),
    CtxAcc(u16),
    Ctx(u16),
    GateIn(u16, u16),
    Act(u16, u16),
    LayerOut,
}

impl Slot {
    /// Slots holding unrounded accumulators.
    pub fn is_acc(self) -> bool {
        matches!(self, Slot::Psum(..) | Slot::CtxPart(_) | Slot::CtxAcc(_))
    }
}

pub fn compound_key(major: u32, minor: u32) -> u64 {
    ((major as u64) << 32) | minor as u64
}

pub fn split_key(key: u64) -> (u32, u32) {
    ((key >> 32) as u32, key as u32)
}

/// Row key of a token-indexed slot.
pub fn token_key(pos: u32) -> u64 {
    compound_key(pos, 0)
}

/// Which source rows a micro-op touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RowSel {
    /// Rows with major key `base + k` in iteration `k`.
    Iter { base: u32 },
    /// Rows with major key in `lo..hi` whose major (or minor) key is
    /// `residue` modulo `modulus`.
    Filter { lo: u32, hi: u32, modulus: u32, residue: u32, on_minor: bool },
}

impl RowSel {
    pub fn range(lo: u32, hi: u32) -> Self {
        RowSel::Filter { lo, hi, modulus: 1, residue: 0, on_minor: false }
    }

    pub fn matches(&self, key: u64, iteration: u32) -> bool {
        let (major, minor) = split_key(key);
        match *self {
            RowSel::Iter { base } => major == base + iteration,
            RowSel::Filter { lo, hi, modulus, residue, on_minor } => {
                (lo..hi).contains(&major) && (if on_minor { minor } else { major }) % modulus == residue
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Action {
    /// Copies (or accumulates) selected rows of `src`, columns `cols`, into
    /// `dst` starting at `dst_col`; missing destination rows are created
    /// with `dst_width` zeros.
    Move { src: Slot, dst: Slot, cols: Option<(u32, u32)>, dst_col: u32, dst_width: u32, accumulate: bool },
    /// Tile product of `matrix[rows, cols]` (frozen path, or low-rank path
    /// when `low_rank`) with the matching input columns, added into `out`.
    Smac { matrix: MatrixId, rows: (u32, u32), cols: (u32, u32), input: Slot, out: Slot, low_rank: bool },
    /// Rounds accumulators; `parts` is the contribution count each row must carry.
    Finalize { src: Slot, dst: Slot, parts: Option<u32>, weighted: bool },
    /// Scores of received queries against every cached key at this router.
    Score { head: u16 },
    /// Causal softmax of gathered scores.
    Softmax { head: u16 },
    /// Probability-weighted sum of cached values at this router.
    Weighted { head: u16 },
    /// `silu(gate) ⊙ up`, or `silu(up)` without a gate.
    Activate { gate: Option<Slot>, up: Slot, dst: Slot },
    ProgramSram { bytes: u64 },
    Gate { kinds: Vec<MacroKind>, on: bool },
}

impl Action {
    fn short(&self) -> String {
        match self {
            Action::Move { src, dst, cols, dst_col, dst_width, accumulate } => {
                let c = cols.map_or(String::from("*"), |(a, b)| format!("{a}..{b}"));
                let op = if *accumulate { "+=" } else { "=" };
                format!("{dst:?}[{dst_col};{dst_width}]{op}{src:?}[{c}]")
            }
            Action::Smac { matrix, rows, cols, input, out, low_rank } => format!(
                "{out:?}+={}{}[{}..{},{}..{}]*{input:?}",
                if *low_rank { "lora:" } else { "" },
                matrix,
                rows.0,
                rows.1,
                cols.0,
                cols.1
            ),
            Action::Finalize { src, dst, parts, weighted } => format!(
                "{dst:?}=round{}({src:?}){}",
                if *weighted { "_w" } else { "" },
                parts.map_or(String::new(), |p| format!("/{p}"))
            ),
            Action::Score { head } => format!("score h{head}"),
            Action::Softmax { head } => format!("softmax h{head}"),
            Action::Weighted { head } => format!("weighted h{head}"),
            Action::Activate { gate, up, dst } => format!("{dst:?}=act({gate:?},{up:?})"),
            Action::ProgramSram { bytes } => format!("prog {bytes}B"),
            Action::Gate { kinds, on } => {
                let k: Vec<&str> = kinds.iter().map(|k| k.name()).collect();
                format!("gate {} {}", if *on { "on" } else { "off" }, k.join("+"))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroOp {
    /// Issuing router; the source for transfers.
    pub at: Coord,
    /// Destination router for transfers.
    pub dst: Option<Coord>,
    /// Payload flits per iteration.
    pub flits: u64,
    /// Opcode-specific work per iteration: adapter flits for SMAC, element
    /// pairs for DMAC, elements for SOFTMAX, flits for scratchpad ops,
    /// bytes for SRAM_PROG.
    pub work: u64,
    pub rows: RowSel,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    pub tag: u32,
    pub opcode: Opcode,
    pub phase: Phase,
    pub repeat: u32,
    pub deps: Vec<u32>,
    pub ops: Vec<MicroOp>,
}

impl fmt::Display for Instruction {
    /// `tag OPCODE phase xREPEAT deps=a,b | op ; op ...` where each op is
    /// `(r,c)[->(r,c)] fN wN action`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let deps: Vec<String> = self.deps.iter().map(u32::to_string).collect();
        write!(f, "{} {} {} x{} deps={} |", self.tag, self.opcode, self.phase.name(), self.repeat, deps.join(","))?;
        for (k, op) in self.ops.iter().enumerate() {
            if k > 0 {
                f.write_str(" ;")?;
            }
            write!(f, " {}", op.at)?;
            if let Some(d) = op.dst {
                write!(f, "->{d}")?;
            }
            write!(f, " f{} w{} {}", op.flits, op.work, op.action.short())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Program {
    pub geometry: MeshGeometry,
    pub instructions: Vec<Instruction>,
}

impl Program {
    pub fn empty(geometry: MeshGeometry) -> Self {
        Self { geometry, instructions: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    /// Tags are unique, dependencies refer to earlier instructions, repeat
    /// counts are positive, and data-moving micro-ops carry payload.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for ins in &self.instructions {
            if ins.repeat == 0 {
                return Err(Error::PlanMismatch(format!("instruction {} has repeat 0", ins.tag)));
            }
            for d in &ins.deps {
                if !seen.contains(d) {
                    return Err(Error::Dependency(ins.tag));
                }
            }
            if !seen.insert(ins.tag) {
                return Err(Error::Dependency(ins.tag));
            }
            for op in &ins.ops {
                let moves = ins.opcode.is_transfer() || matches!(op.action, Action::Move { .. });
                if moves && op.flits == 0 {
                    return Err(Error::PlanMismatch(format!("instruction {} moves no flits", ins.tag)));
                }
                if ins.opcode.is_transfer() != op.dst.is_some() {
                    return Err(Error::PlanMismatch(format!("instruction {} mixes transfer kinds", ins.tag)));
                }
                if !self.geometry.contains(op.at) || op.dst.is_some_and(|d| !self.geometry.contains(d)) {
                    return Err(Error::PlanMismatch(format!("instruction {} leaves the mesh", ins.tag)));
                }
            }
        }
        Ok(())
    }

    /// One instruction per line.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for ins in &self.instructions {
            s.push_str(&ins.to_string());
            s.push('\n');
        }
        s
    }

    /// Equivalent program with every repeat unrolled into a chain of
    /// single-iteration copies; the last copy keeps the original tag.
    pub fn unfold_repeats(&self) -> Program {
        let mut next = self.instructions.iter().map(|i| i.tag).max().map_or(0, |t| t + 1);
        let mut out = Vec::new();
        for ins in &self.instructions {
            let mut prev: Option<u32> = None;
            for k in 0..ins.repeat {
                let tag = if k + 1 == ins.repeat {
                    ins.tag
                } else {
                    next += 1;
                    next - 1
                };
                let ops = ins
                    .ops
                    .iter()
                    .map(|op| {
                        let mut op = op.clone();
                        if let RowSel::Iter { base } = op.rows {
                            op.rows = RowSel::Iter { base: base + k };
                        }
                        op
                    })
                    .collect();
                out.push(Instruction {
                    tag,
                    opcode: ins.opcode,
                    phase: ins.phase,
                    repeat: 1,
                    deps: prev.map_or_else(|| ins.deps.clone(), |p| vec![p]),
                    ops,
                });
                prev = Some(tag);
            }
        }
        Program { geometry: self.geometry, instructions: out }
    }

    /// Checks that every slot a micro-op reads at a router is written there
    /// by an instruction it transitively depends on, or is part of `initial`.
    pub fn check_dataflow(&self, initial: &BTreeSet<(Coord, Slot)>) -> Result<()> {
        let index: BTreeMap<u32, usize> = self.instructions.iter().enumerate().map(|(i, ins)| (ins.tag, i)).collect();
        let mut ancestors: Vec<BTreeSet<usize>> = Vec::with_capacity(self.instructions.len());
        for ins in &self.instructions {
            let mut a = BTreeSet::new();
            for d in &ins.deps {
                let j = *index.get(d).ok_or(Error::Dependency(ins.tag))?;
                a.insert(j);
                a.extend(ancestors[j].iter().copied());
            }
            ancestors.push(a);
        }
        let writes: Vec<BTreeSet<(Coord, Slot)>> = self.instructions.iter().map(writes_of).collect();
        for (i, ins) in self.instructions.iter().enumerate() {
            for op in &ins.ops {
                for slot in reads_of(&op.action) {
                    let key = (op.at, slot);
                    if initial.contains(&key) {
                        continue;
                    }
                    if !ancestors[i].iter().any(|&j| writes[j].contains(&key)) {
                        return Err(Error::PlanMismatch(format!(
                            "instruction {} reads {slot:?} at {} before it is produced",
                            ins.tag, op.at
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

fn reads_of(a: &Action) -> Vec<Slot> {
    match a {
        Action::Move { src, .. } => vec![*src],
        Action::Smac { input, .. } => vec![*input],
        Action::Finalize { src, .. } => vec![*src],
        Action::Score { head } => vec![Slot::QueryIn(*head), Slot::KCache],
        Action::Softmax { head } => vec![Slot::Score(*head)],
        Action::Weighted { head } => vec![Slot::ProbIn(*head), Slot::VCache],
        Action::Activate { gate, up, .. } => gate.iter().copied().chain([*up]).collect(),
        Action::ProgramSram { .. } | Action::Gate { .. } => vec![],
    }
}

fn writes_of(ins: &Instruction) -> BTreeSet<(Coord, Slot)> {
    ins.ops
        .iter()
        .filter_map(|op| {
            let at = op.dst.unwrap_or(op.at);
            let slot = match &op.action {
                Action::Move { dst, .. } => *dst,
                Action::Smac { out, .. } => *out,
                Action::Finalize { dst, .. } => *dst,
                Action::Score { head } => Slot::ScoreOut(*head),
                Action::Softmax { head } => Slot::Prob(*head),
                Action::Weighted { head } => Slot::CtxPart(*head),
                Action::Activate { dst, .. } => *dst,
                Action::ProgramSram { .. } | Action::Gate { .. } => return None,
            };
            Some((at, slot))
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgramStats {
    pub instructions: BTreeMap<Opcode, u64>,
    pub micro_ops: u64,
    /// Flits crossing at least one link, repeats included.
    pub network_flits: u64,
    /// Flits moved between slots of one router.
    pub local_flits: u64,
    /// Longest dependency chain, counted in instructions.
    pub critical_path: u64,
}

pub fn program_stats(p: &Program) -> ProgramStats {
    let mut s = ProgramStats::default();
    let mut depth: BTreeMap<u32, u64> = BTreeMap::new();
    for ins in &p.instructions {
        *s.instructions.entry(ins.opcode).or_default() += 1;
        s.micro_ops += ins.ops.len() as u64;
        for op in &ins.ops {
            let total = op.flits * ins.repeat as u64;
            match op.dst {
                Some(d) if d != op.at => s.network_flits += total,
                _ if matches!(op.action, Action::Move { .. }) => s.local_flits += total,
                _ => {}
            }
        }
        let d = 1 + ins.deps.iter().filter_map(|t| depth.get(t)).max().copied().unwrap_or(0);
        depth.insert(ins.tag, d);
        s.critical_path = s.critical_path.max(d);
    }
    s
}

struct Builder {
    instrs: Vec<Instruction>,
    next_tag: u32,
}

impl Builder {
    fn push(&mut self, opcode: Opcode, phase: Phase, repeat: u32, deps: &[u32], ops: Vec<MicroOp>) -> Option<u32> {
        if ops.is_empty() && opcode != Opcode::Barrier {
            return None;
        }
        let tag = self.next_tag;
        self.next_tag += 1;
        let mut deps = deps.to_vec();
        deps.sort_unstable();
        deps.dedup();
        self.instrs.push(Instruction { tag, opcode, phase, repeat, deps, ops });
        Some(tag)
    }

    /// Splits moves into a SEND (remote) and an SPM_RD (local) instruction.
    fn moves(&mut self, phase: Phase, repeat: u32, deps: &[u32], ops: Vec<MicroOp>) -> Vec<u32> {
        let (remote, local): (Vec<_>, Vec<_>) = ops.into_iter().partition(|o| o.dst.is_some());
        let mut tags = Vec::new();
        tags.extend(self.push(Opcode::Send, phase, repeat, deps, remote));
        tags.extend(self.push(Opcode::SpmRd, phase, repeat, deps, local));
        tags
    }
}

#[allow(clippy::too_many_arguments)]
fn mv(
    hw: &HardwareSpec,
    from: Coord,
    to: Coord,
    src: Slot,
    cols: Option<(u32, u32)>,
    dst: Slot,
    dst_col: u32,
    dst_width: u32,
    accumulate: bool,
    rows: RowSel,
    elems: u64,
) -> MicroOp {
    let flits = hw.flits(elems);
    MicroOp {
        at: from,
        dst: (from != to).then_some(to),
        flits,
        work: flits,
        rows,
        action: Action::Move { src, dst, cols, dst_col, dst_width, accumulate },
    }
}

/// A source feeding a projection: router, slot, columns of the source row,
/// and where they land in the unit's input row.
struct Source {
    at: Coord,
    slot: Slot,
    cols: Option<(u32, u32)>,
    width: u32,
    dst_col: u32,
}

struct Ctx<'a> {
    plan: &'a MappingPlan,
    model: &'a ModelSpec,
    hw: &'a HardwareSpec,
    summary: DataflowSummary,
}

impl Ctx<'_> {
    fn n(&self) -> u32 {
        self.summary.q_rows
    }

    fn iter_rows(&self) -> RowSel {
        RowSel::Iter { base: self.summary.first_pos() }
    }

    /// Gather, broadcast, SMAC, reduce and finalise for every unit of `m`.
    /// Returns the finalise tags.
    fn project(&self, b: &mut Builder, m: MatrixId, sources: &[Source], deps: &[u32]) -> Vec<u32> {
        let hw = self.hw;
        let n = self.n();
        let rows = self.iter_rows();
        let geom = self.plan.geometry;
        let mut done = Vec::new();
        for (u, p) in self.plan.placements.iter().enumerate().filter(|(_, p)| p.unit.matrix == m) {
            let u = u as u16;
            let entry = p.entry_router(self.plan.input_site);
            let gather: Vec<MicroOp> = sources
                .iter()
                .map(|s| mv(hw, s.at, entry, s.slot, s.cols, Slot::In(u), s.dst_col, p.unit.d_in, false, rows, s.width as u64))
                .collect();
            let mut last = b.moves(Phase::Broadcast, n, deps, gather);
            let tree = p.broadcast_tree(self.plan.input_site, &geom);
            for level in tree.levels() {
                let ops = level
                    .iter()
                    .map(|&(parent, child)| {
                        mv(hw, parent, child, Slot::In(u), None, Slot::In(u), 0, p.unit.d_in, false, rows, p.unit.d_in as u64)
                    })
                    .collect();
                last = b.push(Opcode::BcastFwd, Phase::Broadcast, n, &last, ops).into_iter().collect();
            }
            let lora = self.model.lora.targets(m) && self.model.lora.rank > 0;
            let mut smac_tags = Vec::new();
            for (opcode, low_rank) in [(Opcode::PeSmacRram, false), (Opcode::PeSmacSram, true)] {
                if low_rank && !lora {
                    continue;
                }
                let ops = p
                    .tiles()
                    .into_iter()
                    .map(|(i, j, at)| {
                        let r = p.shard_rows(i, hw);
                        let c = p.shard_cols(j, hw);
                        MicroOp {
                            at,
                            dst: None,
                            flits: 0,
                            work: hw.flits(c.len() as u64) + hw.flits(r.len() as u64),
                            rows,
                            action: Action::Smac {
                                matrix: m,
                                rows: (p.unit.row_start + r.start, p.unit.row_start + r.end),
                                cols: (c.start, c.end),
                                input: Slot::In(u),
                                out: Slot::Psum(u, i as u16),
                                low_rank,
                            },
                        }
                    })
                    .collect();
                smac_tags.extend(b.push(opcode, Phase::Smac, n, &last, ops));
            }
            let trees: Vec<_> = (0..p.tile_rows).map(|i| p.reduction_tree(i, &geom)).collect();
            let depth = trees.iter().map(|t| t.depth()).max().unwrap_or(0);
            let mut prev = smac_tags.clone();
            for level in (1..=depth).rev() {
                let mut ops = Vec::new();
                for (i, t) in trees.iter().enumerate() {
                    let shard_len = p.shard_rows(i as u32, hw).len() as u32;
                    for (parent, child) in t.levels().get(level as usize - 1).cloned().unwrap_or_default() {
                        let slot = Slot::Psum(u, i as u16);
                        ops.push(mv(hw, child, parent, slot, None, slot, 0, shard_len, true, rows, shard_len as u64));
                    }
                }
                prev = b.push(Opcode::ReduceAdd, Phase::Reduce, n, &prev, ops).into_iter().collect();
            }
            let parts = p.tile_cols * if lora { 2 } else { 1 };
            let ops = (0..p.tile_rows)
                .map(|i| MicroOp {
                    at: p.shard_root(i),
                    dst: None,
                    flits: 0,
                    work: hw.flits(p.shard_rows(i, hw).len() as u64),
                    rows,
                    action: Action::Finalize {
                        src: Slot::Psum(u, i as u16),
                        dst: Slot::Shard(u, i as u16),
                        parts: Some(parts),
                        weighted: false,
                    },
                })
                .collect();
            done.extend(b.push(Opcode::SpmWr, Phase::Reduce, n, &prev, ops));
        }
        done
    }

    /// Finalised shards of `m` as projection sources.
    fn shard_sources(&self, m: MatrixId) -> Vec<Source> {
        let mut v = Vec::new();
        for (u, p) in self.plan.placements.iter().enumerate().filter(|(_, p)| p.unit.matrix == m) {
            for i in 0..p.tile_rows {
                let r = p.shard_rows(i, self.hw);
                v.push(Source {
                    at: p.shard_root(i),
                    slot: Slot::Shard(u as u16, i as u16),
                    cols: None,
                    width: r.len() as u32,
                    dst_col: p.unit.row_start + r.start,
                });
            }
        }
        v
    }
}

/// Compiles one layer's dataflow for `summary.q_rows` new tokens at
/// positions `summary.first_pos()..summary.kv_len`.
///
/// The scratchpads must already hold the layer input rows in
/// [`Slot::LayerIn`] at the plan's input site and, for decode, the cached
/// rows of earlier tokens in [`Slot::KCache`]/[`Slot::VCache`] at their
/// cyclic sites. The layer output lands in [`Slot::LayerOut`] at the input site.
pub fn compile_layer(
    plan: &MappingPlan,
    model: &ModelSpec,
    hw: &HardwareSpec,
    summary: DataflowSummary,
) -> Result<Program> {
    if summary.q_rows == 0 || summary.q_rows > summary.kv_len {
        return Err(Error::PlanMismatch(format!(
            "cannot compile {} query rows over {} cached rows",
            summary.q_rows, summary.kv_len
        )));
    }
    for m in [MatrixId::Q, MatrixId::K, MatrixId::V, MatrixId::O] {
        if !plan.has(m) {
            return Err(Error::PlanMismatch(format!("plan has no `{m}` placement")));
        }
    }
    if model.ffn_dim > 0 && !plan.has(MatrixId::FfnUp) {
        return Err(Error::PlanMismatch("plan lacks the feed-forward matrices".into()));
    }
    let cx = Ctx { plan, model, hw, summary };
    let mut b = Builder { instrs: Vec::new(), next_tag: 0 };
    let d = model.hidden_dim;
    let hd = model.head_dim;
    let n = summary.q_rows;
    let first = summary.first_pos();
    let kv_len = summary.kv_len;
    let rows = cx.iter_rows();
    let whole = RowSel::range(first, kv_len);
    let input = [Source { at: plan.input_site, slot: Slot::LayerIn, cols: None, width: d, dst_col: 0 }];

    let q_done = cx.project(&mut b, MatrixId::Q, &input, &[]);
    let k_done = cx.project(&mut b, MatrixId::K, &input, &[]);
    let v_done = cx.project(&mut b, MatrixId::V, &input, &[]);

    let heads = crate::mapper::head_routers(plan, model, hw);

    // query segments onto head routers
    let mut ops = Vec::new();
    for (h, &hr) in heads.iter().enumerate() {
        let cols = h as u32 * hd..(h as u32 + 1) * hd;
        for (u, p) in plan.placements.iter().enumerate().filter(|(_, p)| p.unit.matrix == MatrixId::Q) {
            for i in 0..p.tile_rows {
                let r = p.shard_rows(i, hw);
                let (g0, g1) = (p.unit.row_start + r.start, p.unit.row_start + r.end);
                let (lo, hi) = (g0.max(cols.start), g1.min(cols.end));
                if lo < hi {
                    ops.push(mv(
                        hw,
                        p.shard_root(i),
                        hr,
                        Slot::Shard(u as u16, i as u16),
                        Some((lo - g0, hi - g0)),
                        Slot::Query(h as u16),
                        lo - cols.start,
                        hd,
                        false,
                        rows,
                        (hi - lo) as u64,
                    ));
                }
            }
        }
    }
    let q_at_heads = b.moves(Phase::Attention, n, &q_done, ops);

    // new keys and values onto their cyclic sites
    let mut kv_tags = Vec::new();
    for (m, layout, done, cache) in [
        (MatrixId::K, &plan.kv_keys, &k_done, Slot::KCache),
        (MatrixId::V, &plan.kv_values, &v_done, Slot::VCache),
    ] {
        let sites = layout.sites.len() as u32;
        let mut ops = Vec::new();
        for (u, p) in plan.placements.iter().enumerate().filter(|(_, p)| p.unit.matrix == m) {
            for i in 0..p.tile_rows {
                let r = p.shard_rows(i, hw);
                for (s, &site) in layout.sites.iter().enumerate() {
                    let count = tokens_at_site(s as u32, sites, first, kv_len);
                    if count == 0 {
                        continue;
                    }
                    ops.push(mv(
                        hw,
                        p.shard_root(i),
                        site,
                        Slot::Shard(u as u16, i as u16),
                        None,
                        cache,
                        p.unit.row_start + r.start,
                        d,
                        false,
                        RowSel::Filter { lo: first, hi: kv_len, modulus: sites, residue: s as u32, on_minor: false },
                        count * r.len() as u64,
                    ));
                }
            }
        }
        kv_tags.push(b.moves(Phase::Attention, 1, done, ops));
    }
    let (k_stored, v_stored) = (kv_tags[0].clone(), kv_tags[1].clone());

    // queries to key sites, scores there, scores back
    let sk = plan.kv_keys.sites.len() as u32;
    let key_sites: Vec<(u32, Coord, u64)> = plan
        .kv_keys
        .sites
        .iter()
        .enumerate()
        .map(|(s, &c)| (s as u32, c, tokens_at_site(s as u32, sk, 0, kv_len)))
        .filter(|&(_, _, keys)| keys > 0)
        .collect();
    let mut ops = Vec::new();
    for (h, &hr) in heads.iter().enumerate() {
        for &(_, site, _) in &key_sites {
            ops.push(mv(hw, hr, site, Slot::Query(h as u16), None, Slot::QueryIn(h as u16), 0, hd, false, whole, (n * hd) as u64));
        }
    }
    let q_at_sites = b.moves(Phase::Attention, 1, &q_at_heads, ops);
    let mut deps = q_at_sites.clone();
    deps.extend(&k_stored);
    let ops = heads
        .iter()
        .enumerate()
        .flat_map(|(h, _)| {
            key_sites.iter().map(move |&(_, site, keys)| MicroOp {
                at: site,
                dst: None,
                flits: 0,
                work: n as u64 * keys * hd as u64,
                rows: whole,
                action: Action::Score { head: h as u16 },
            })
        })
        .collect();
    let scored: Vec<u32> = b.push(Opcode::Dmac, Phase::Attention, 1, &deps, ops).into_iter().collect();
    let mut ops = Vec::new();
    for (h, &hr) in heads.iter().enumerate() {
        for &(_, site, keys) in &key_sites {
            ops.push(mv(hw, site, hr, Slot::ScoreOut(h as u16), None, Slot::Score(h as u16), 0, 1, false, whole, n as u64 * keys));
        }
    }
    let scores_home = b.moves(Phase::Attention, 1, &scored, ops);

    let causal = (first as u64..kv_len as u64).map(|p| p + 1).sum::<u64>();
    let ops = heads
        .iter()
        .enumerate()
        .map(|(h, &hr)| MicroOp {
            at: hr,
            dst: None,
            flits: 0,
            work: causal,
            rows: whole,
            action: Action::Softmax { head: h as u16 },
        })
        .collect();
    let probs: Vec<u32> = b.push(Opcode::Softmax, Phase::Attention, 1, &scores_home, ops).into_iter().collect();

    // probabilities to value sites, weighted sums, partial contexts back
    let sv = plan.kv_values.sites.len() as u32;
    let value_sites: Vec<(u32, Coord, u64, u64)> = plan
        .kv_values
        .sites
        .iter()
        .enumerate()
        .map(|(s, &c)| {
            let s = s as u32;
            (
                s,
                c,
                crate::mapper::causal_keys_at_site(s, sv, first, n),
                crate::mapper::queries_reaching_site(s, first, kv_len),
            )
        })
        .filter(|&(_, _, probs, _)| probs > 0)
        .collect();
    let mut ops = Vec::new();
    for (h, &hr) in heads.iter().enumerate() {
        for &(s, site, count, _) in &value_sites {
            ops.push(mv(
                hw,
                hr,
                site,
                Slot::Prob(h as u16),
                None,
                Slot::ProbIn(h as u16),
                0,
                1,
                false,
                RowSel::Filter { lo: first, hi: kv_len, modulus: sv, residue: s, on_minor: true },
                count,
            ));
        }
    }
    let probs_out = b.moves(Phase::Attention, 1, &probs, ops);
    let mut deps = probs_out.clone();
    deps.extend(&v_stored);
    let ops = heads
        .iter()
        .enumerate()
        .flat_map(|(h, _)| {
            value_sites.iter().map(move |&(_, site, count, _)| MicroOp {
                at: site,
                dst: None,
                flits: 0,
                work: count * hd as u64,
                rows: whole,
                action: Action::Weighted { head: h as u16 },
            })
        })
        .collect();
    let weighted: Vec<u32> = b.push(Opcode::Dmac, Phase::Attention, 1, &deps, ops).into_iter().collect();
    let mut ops = Vec::new();
    for (h, &hr) in heads.iter().enumerate() {
        for &(_, site, _, q_rows) in &value_sites {
            let slot_from = Slot::CtxPart(h as u16);
            ops.push(mv(hw, site, hr, slot_from, None, Slot::CtxAcc(h as u16), 0, hd, true, whole, q_rows * hd as u64));
        }
    }
    let ctx_home = b.moves(Phase::Attention, 1, &weighted, ops);
    let ops = heads
        .iter()
        .enumerate()
        .map(|(h, &hr)| MicroOp {
            at: hr,
            dst: None,
            flits: 0,
            work: hw.flits(hd as u64),
            rows,
            action: Action::Finalize { src: Slot::CtxAcc(h as u16), dst: Slot::Ctx(h as u16), parts: None, weighted: true },
        })
        .collect();
    let ctx_done: Vec<u32> = b.push(Opcode::SpmWr, Phase::Attention, n, &ctx_home, ops).into_iter().collect();

    // output projection
    let ctx_sources: Vec<Source> = heads
        .iter()
        .enumerate()
        .map(|(h, &hr)| Source { at: hr, slot: Slot::Ctx(h as u16), cols: None, width: hd, dst_col: h as u32 * hd })
        .collect();
    let mut last_done = cx.project(&mut b, MatrixId::O, &ctx_sources, &ctx_done);
    let mut last_m = MatrixId::O;

    if plan.has(MatrixId::FfnUp) {
        let attn_out = cx.shard_sources(MatrixId::O);
        let gated = plan.has(MatrixId::FfnGate);
        let gate_done = if gated { cx.project(&mut b, MatrixId::FfnGate, &attn_out, &last_done) } else { Vec::new() };
        let up_done = cx.project(&mut b, MatrixId::FfnUp, &attn_out, &last_done);
        let up_units: Vec<(usize, &crate::mapper::Placement)> =
            plan.placements.iter().enumerate().filter(|(_, p)| p.unit.matrix == MatrixId::FfnUp).collect();
        let gate_units: Vec<(usize, &crate::mapper::Placement)> =
            plan.placements.iter().enumerate().filter(|(_, p)| p.unit.matrix == MatrixId::FfnGate).collect();
        let mut act_deps = up_done.clone();
        if gated {
            let mut ops = Vec::new();
            for ((gu, gp), (uu, up)) in gate_units.iter().zip(&up_units) {
                for i in 0..up.tile_rows {
                    let len = up.shard_rows(i, hw).len() as u32;
                    ops.push(mv(
                        hw,
                        gp.shard_root(i),
                        up.shard_root(i),
                        Slot::Shard(*gu as u16, i as u16),
                        None,
                        Slot::GateIn(*uu as u16, i as u16),
                        0,
                        len,
                        false,
                        rows,
                        len as u64,
                    ));
                }
            }
            act_deps.extend(b.moves(Phase::Output, n, &gate_done, ops));
        }
        let mut ops = Vec::new();
        for (uu, up) in &up_units {
            for i in 0..up.tile_rows {
                let (u, i16) = (*uu as u16, i as u16);
                ops.push(MicroOp {
                    at: up.shard_root(i),
                    dst: None,
                    flits: 0,
                    work: up.shard_rows(i, hw).len() as u64,
                    rows,
                    action: Action::Activate {
                        gate: gated.then_some(Slot::GateIn(u, i16)),
                        up: Slot::Shard(u, i16),
                        dst: Slot::Act(u, i16),
                    },
                });
            }
        }
        let act_done: Vec<u32> = b.push(Opcode::Softmax, Phase::Output, n, &act_deps, ops).into_iter().collect();
        let hidden: Vec<Source> = up_units
            .iter()
            .flat_map(|(uu, up)| {
                (0..up.tile_rows).map(move |i| {
                    let r = up.shard_rows(i, hw);
                    Source {
                        at: up.shard_root(i),
                        slot: Slot::Act(*uu as u16, i as u16),
                        cols: None,
                        width: r.len() as u32,
                        dst_col: up.unit.row_start + r.start,
                    }
                })
            })
            .collect();
        last_done = cx.project(&mut b, MatrixId::FfnDown, &hidden, &act_done);
        last_m = MatrixId::FfnDown;
    }

    let ops = cx
        .shard_sources(last_m)
        .into_iter()
        .map(|s| mv(hw, s.at, plan.input_site, s.slot, None, Slot::LayerOut, s.dst_col, d, false, rows, s.width as u64))
        .collect();
    let mut end = b.moves(Phase::Output, n, &last_done, ops);
    end.extend(k_stored);
    end.extend(v_stored);
    b.push(Opcode::Barrier, Phase::Output, 1, &end, Vec::new());

    let program = Program { geometry: plan.geometry, instructions: b.instrs };
    program.validate()?;
    Ok(program)
}

/// Adapter load for a plan: gate RRAM off, write every PE's SRAM share,
/// gate RRAM back on.
pub fn compile_reprogram(plan: &MappingPlan, hw: &HardwareSpec) -> Program {
    let mut b = Builder { instrs: Vec::new(), next_tag: 0 };
    let routers: Vec<Coord> = plan.placements.iter().flat_map(|p| p.tile_routers()).collect();
    let gate = |on: bool| -> Vec<MicroOp> {
        routers
            .iter()
            .map(|&at| MicroOp {
                at,
                dst: None,
                flits: 0,
                work: 1,
                rows: RowSel::range(0, 0),
                action: Action::Gate { kinds: vec![MacroKind::RramAcim], on },
            })
            .collect()
    };
    let off: Vec<u32> = b.push(Opcode::Gate, Phase::Output, 1, &[], gate(false)).into_iter().collect();
    let mut ops = Vec::new();
    for l in &plan.lora {
        let p = plan
            .placements
            .iter()
            .find(|p| p.unit == l.unit)
            .expect("adapter belongs to a placement");
        for (i, j, at) in p.tiles() {
            let cells = l.rank as u64 * (p.shard_rows(i, hw).len() + p.shard_cols(j, hw).len()) as u64;
            let bytes = (cells * hw.weight_bits as u64).div_ceil(8);
            ops.push(MicroOp {
                at,
                dst: None,
                flits: 0,
                work: bytes,
                rows: RowSel::range(0, 0),
                action: Action::ProgramSram { bytes },
            });
        }
    }
    let prog: Vec<u32> = b.push(Opcode::SramProg, Phase::Output, 1, &off, ops).into_iter().collect();
    let deps = if prog.is_empty() { off } else { prog };
    b.push(Opcode::Gate, Phase::Output, 1, &deps, gate(true));
    Program { geometry: plan.geometry, instructions: b.instrs }
}

/// Cycles to load every adapter of a plan, with all PEs writing in parallel.
pub fn reprogram_cycles(plan: &MappingPlan, hw: &HardwareSpec) -> u64 {
    let per_cycle = hw.macro_timing.sram_prog_bytes_per_cycle.max(1) as u64;
    plan.lora.iter().map(|l| l.max_pe_bytes(hw).div_ceil(per_cycle)).max().unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapper::map_layer;

    fn toy() -> (ModelSpec, HardwareSpec, MappingPlan) {
        let m = ModelSpec::preset("toy").unwrap();
        let hw = HardwareSpec::toy();
        let plan = map_layer(&m, &hw).unwrap();
        (m, hw, plan)
    }

    #[test]
    fn empty_program_stats() {
        let s = program_stats(&Program::empty(MeshGeometry::single(2, 2)));
        assert_eq!(s, ProgramStats::default());
    }

    #[test]
    fn independent_instructions_have_unit_critical_path() {
        let g = MeshGeometry::single(2, 2);
        let ins = |tag| Instruction { tag, opcode: Opcode::Barrier, phase: Phase::Output, repeat: 1, deps: vec![], ops: vec![] };
        let p = Program { geometry: g, instructions: vec![ins(0), ins(1), ins(2)] };
        assert_eq!(program_stats(&p).critical_path, 1);
    }

    #[test]
    fn dangling_dependency_rejected() {
        let g = MeshGeometry::single(2, 2);
        let p = Program {
            geometry: g,
            instructions: vec![Instruction { tag: 0, opcode: Opcode::Barrier, phase: Phase::Output, repeat: 1, deps: vec![7], ops: vec![] }],
        };
        assert!(matches!(p.validate(), Err(Error::Dependency(0))));
    }

    #[test]
    fn prefill_smac_repeats_per_token() {
        let (m, hw, plan) = toy();
        let p = compile_layer(&plan, &m, &hw, DataflowSummary::prefill(4)).unwrap();
        for ins in p.instructions.iter().filter(|i| matches!(i.opcode, Opcode::PeSmacRram | Opcode::PeSmacSram)) {
            assert_eq!(ins.repeat, 4);
        }
        let s = program_stats(&p);
        // Q, K, V, O frozen paths plus Q and V adapters
        assert_eq!(s.instructions[&Opcode::PeSmacRram], 4);
        assert_eq!(s.instructions[&Opcode::PeSmacSram], 2);
    }

    #[test]
    fn compiled_flits_match_cost_model() {
        let (m, hw, plan) = toy();
        for summary in [DataflowSummary::prefill(4), DataflowSummary::decode(6), DataflowSummary::prefill(1)] {
            let p = compile_layer(&plan, &m, &hw, summary).unwrap();
            let t = crate::mapper::traffic(&plan, &m, &hw, summary, &mut Default::default());
            assert_eq!(program_stats(&p).network_flits, t.network_flits, "{summary:?}");
        }
    }

    #[test]
    fn dataflow_is_produced_before_use() {
        let (m, hw, plan) = toy();
        let p = compile_layer(&plan, &m, &hw, DataflowSummary::prefill(4)).unwrap();
        let initial = BTreeSet::from([(plan.input_site, Slot::LayerIn)]);
        p.check_dataflow(&initial).unwrap();
    }

    #[test]
    fn compilation_is_deterministic() {
        let (m, hw, plan) = toy();
        let a = compile_layer(&plan, &m, &hw, DataflowSummary::prefill(3)).unwrap().dump();
        let b = compile_layer(&plan, &m, &hw, DataflowSummary::prefill(3)).unwrap().dump();
        assert_eq!(a, b);
    }

    #[test]
    fn unfolded_program_keeps_tags_and_order() {
        let (m, hw, plan) = toy();
        let p = compile_layer(&plan, &m, &hw, DataflowSummary::prefill(3)).unwrap();
        let u = p.unfold_repeats();
        u.validate().unwrap();
        assert!(u.instructions.iter().all(|i| i.repeat == 1));
        let total: u32 = p.instructions.iter().map(|i| i.repeat).sum();
        assert_eq!(u.len(), total as usize);
        assert_eq!(program_stats(&u).network_flits, program_stats(&p).network_flits);
    }

    #[test]
    fn reprogram_time_from_largest_share() {
        let (_, hw, plan) = toy();
        // 8 output rows + 8 input cols at rank 2, one byte each
        assert_eq!(reprogram_cycles(&plan, &hw), 32u64.div_ceil(8));
        let p = compile_reprogram(&plan, &hw);
        p.validate().unwrap();
        assert_eq!(p.len(), 3);
    }
}
