//! Cycle-level simulation of a compiled program on the router mesh.
//!
//! Network: XY dimension-ordered wormhole routing, one flit per output
//! port per cycle, a FIFO of `fifo_depth_flits` on each planar input,
//! credit-style backpressure (a flit leaves only when the downstream FIFO
//! has room for it and everything already in flight towards it), and
//! round-robin arbitration among inputs. The local injection queue and the
//! ejection sink are unbounded. A link costs `hop_cycles`, or
//! `inter_ct_hop_cycles` when it joins two compute tiles.
//!
//! Timing rule for an uncontended packet of `F` flits over `H` links of
//! latency 1 started at cycle `t`: the head ejects at `t + H`, the tail at
//! `t + H + F - 1`, and the payload is usable at `t + H + F`.
//!
//! Local work occupies one router resource for [`op_latency`] cycles; ops
//! queue per resource in issue order. Iterations of a repeated instruction
//! run back to back; an instruction starts once all its dependencies have
//! completed.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::arith::Arith;
use crate::config::{HardwareSpec, MacroKind, PerMacro};
use crate::error::{Error, Result};
use crate::golden::{KvCache, LayerWeights};
use crate::isa::{split_key, token_key, Action, Instruction, MicroOp, Opcode, Phase, Program, Resource, RowSel, Slot};
use crate::mapper::MappingPlan;
use crate::mesh::{Coord, Dir, MeshGeometry};
use crate::tensor::Tensor2D;

/// Cycles a local micro-op holds its resource for one iteration.
pub fn op_latency(opcode: Opcode, op: &MicroOp, hw: &HardwareSpec) -> u64 {
    let t = &hw.macro_timing;
    let lat = match opcode {
        Opcode::PeSmacRram => op.work + t.rram_smac_cycles as u64,
        Opcode::PeSmacSram => op.work + t.sram_smac_cycles as u64,
        Opcode::Dmac => op.work.div_ceil(hw.dmac_per_router.max(1) as u64) * t.dmac_cycles as u64,
        Opcode::Softmax => op.work * t.softmax_cycles_per_elem as u64,
        Opcode::SpmRd | Opcode::SpmWr => op.work,
        Opcode::SramProg => op.work.div_ceil(t.sram_prog_bytes_per_cycle.max(1) as u64),
        Opcode::Gate => 1,
        Opcode::Send | Opcode::BcastFwd | Opcode::ReduceAdd | Opcode::Barrier => 0,
    };
    lat.max(1)
}

/// Summed link latency of the XY route from `a` to `b`.
pub fn route_cycles(geom: &MeshGeometry, a: Coord, b: Coord, hw: &HardwareSpec) -> u64 {
    let crossings = geom.ct_crossings(a, b) as u64;
    let hops = a.manhattan(b) as u64;
    (hops - crossings) * hw.macro_timing.hop_cycles as u64 + crossings * hw.macro_timing.inter_ct_hop_cycles as u64
}

/// Uncontended cycles for a transfer of `flits` from `a` to `b`.
pub fn transfer_cycles(geom: &MeshGeometry, a: Coord, b: Coord, flits: u64, hw: &HardwareSpec) -> u64 {
    route_cycles(geom, a, b, hw) + flits.max(1)
}

pub enum Values<A: Arith> {
    Words(Vec<A::Word>),
    Accs(Vec<A::Acc>),
}

impl<A: Arith> Clone for Values<A> {
    fn clone(&self) -> Self {
        match self {
            Values::Words(v) => Values::Words(v.clone()),
            Values::Accs(v) => Values::Accs(v.clone()),
        }
    }
}

impl<A: Arith> std::fmt::Debug for Values<A> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Values::Words(v) => f.debug_tuple("Words").field(v).finish(),
            Values::Accs(v) => f.debug_tuple("Accs").field(v).finish(),
        }
    }
}

impl<A: Arith> PartialEq for Values<A> {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Values::Words(a), Values::Words(b)) => a == b,
            (Values::Accs(a), Values::Accs(b)) => a == b,
            _ => false,
        }
    }
}

impl<A: Arith> Values<A> {
    fn slice(&self, lo: usize, hi: usize) -> Values<A> {
        match self {
            Values::Words(v) => Values::Words(v[lo..hi].to_vec()),
            Values::Accs(v) => Values::Accs(v[lo..hi].to_vec()),
        }
    }
}

/// One scratchpad row; `parts` counts the tile contributions summed into it.
pub struct Row<A: Arith> {
    pub values: Values<A>,
    pub parts: u32,
}

impl<A: Arith> Clone for Row<A> {
    fn clone(&self) -> Self {
        Self { values: self.values.clone(), parts: self.parts }
    }
}

impl<A: Arith> std::fmt::Debug for Row<A> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Row").field("values", &self.values).field("parts", &self.parts).finish()
    }
}

impl<A: Arith> PartialEq for Row<A> {
    fn eq(&self, other: &Self) -> bool {
        self.values == other.values && self.parts == other.parts
    }
}

/// Contents of every scratchpad, keyed by router and slot.
pub struct Scratchpads<A: Arith> {
    slots: BTreeMap<(Coord, Slot), BTreeMap<u64, Row<A>>>,
}

impl<A: Arith> Default for Scratchpads<A> {
    fn default() -> Self {
        Self { slots: BTreeMap::new() }
    }
}

impl<A: Arith> Clone for Scratchpads<A> {
    fn clone(&self) -> Self {
        Self { slots: self.slots.clone() }
    }
}

impl<A: Arith> PartialEq for Scratchpads<A> {
    fn eq(&self, other: &Self) -> bool {
        self.slots == other.slots
    }
}

impl<A: Arith> std::fmt::Debug for Scratchpads<A> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map().entries(self.slots.iter()).finish()
    }
}

impl<A: Arith> Scratchpads<A> {
    pub fn put_words(&mut self, at: Coord, slot: Slot, key: u64, words: Vec<A::Word>) {
        self.slots.entry((at, slot)).or_default().insert(key, Row { values: Values::Words(words), parts: 0 });
    }

    pub fn rows(&self, at: Coord, slot: Slot) -> Option<&BTreeMap<u64, Row<A>>> {
        self.slots.get(&(at, slot))
    }

    pub fn words(&self, at: Coord, slot: Slot, key: u64) -> Option<&[A::Word]> {
        match &self.rows(at, slot)?.get(&key)?.values {
            Values::Words(w) => Some(w),
            Values::Accs(_) => None,
        }
    }

    /// `(router, slot)` pairs present.
    pub fn keys(&self) -> BTreeSet<(Coord, Slot)> {
        self.slots.keys().copied().collect()
    }

    fn select(&self, at: Coord, slot: Slot, sel: RowSel, iteration: u32, cols: Option<(u32, u32)>) -> Vec<(u64, Row<A>)> {
        let Some(rows) = self.rows(at, slot) else { return Vec::new() };
        let pick = |(k, r): (&u64, &Row<A>)| {
            let values = match cols {
                Some((lo, hi)) => r.values.slice(lo as usize, hi as usize),
                None => r.values.clone(),
            };
            (*k, Row { values, parts: r.parts })
        };
        match sel {
            RowSel::Iter { base } => {
                let lo = token_key(base + iteration);
                rows.range(lo..lo + (1 << 32)).map(pick).collect()
            }
            RowSel::Filter { .. } => rows.iter().filter(|(k, _)| sel.matches(**k, iteration)).map(pick).collect(),
        }
    }

    fn write(&mut self, arith: &A, at: Coord, slot: Slot, dst_col: u32, width: u32, accumulate: bool, payload: Vec<(u64, Row<A>)>) {
        let rows = self.slots.entry((at, slot)).or_default();
        for (key, src) in payload {
            let dst = rows.entry(key).or_insert_with(|| Row {
                values: match src.values {
                    Values::Words(_) => Values::Words(vec![A::Word::default(); width as usize]),
                    Values::Accs(_) => Values::Accs(vec![A::Acc::default(); width as usize]),
                },
                parts: 0,
            });
            let off = dst_col as usize;
            match (&mut dst.values, src.values) {
                (Values::Words(d), Values::Words(s)) => {
                    for (k, v) in s.into_iter().enumerate() {
                        d[off + k] = v;
                    }
                }
                (Values::Accs(d), Values::Accs(s)) => {
                    for (k, v) in s.into_iter().enumerate() {
                        d[off + k] = if accumulate { arith.acc_add(d[off + k], v) } else { v };
                    }
                }
                _ => panic!("word/accumulator mismatch in {slot:?} at {at}"),
            }
            dst.parts = if accumulate { dst.parts + src.parts } else { src.parts };
        }
    }

    fn add_acc(&mut self, arith: &A, at: Coord, slot: Slot, key: u64, acc: Vec<A::Acc>, parts: u32) {
        let row = self.slots.entry((at, slot)).or_default().entry(key).or_insert_with(|| Row {
            values: Values::Accs(vec![A::Acc::default(); acc.len()]),
            parts: 0,
        });
        if let Values::Accs(d) = &mut row.values {
            for (a, v) in d.iter_mut().zip(acc) {
                *a = arith.acc_add(*a, v);
            }
        }
        row.parts += parts;
    }
}

/// Scratchpad image for one layer run: `x` rows at the input site for
/// positions `first..first + x.rows()` and, for decode, `cache` rows of
/// earlier tokens at their cyclic sites.
pub fn layer_image<A: Arith>(plan: &MappingPlan, x: &Tensor2D<A::Word>, first: u32, cache: Option<&KvCache<A::Word>>) -> Scratchpads<A> {
    let mut s = Scratchpads::default();
    for r in 0..x.rows() {
        s.put_words(plan.input_site, Slot::LayerIn, token_key(first + r as u32), x.row(r).to_vec());
    }
    if let Some(c) = cache {
        for (p, (k, v)) in c.k.iter().zip(&c.v).enumerate() {
            s.put_words(plan.kv_keys.site_of(p as u64), Slot::KCache, token_key(p as u32), k.clone());
            s.put_words(plan.kv_values.site_of(p as u64), Slot::VCache, token_key(p as u32), v.clone());
        }
    }
    s
}

/// Layer output rows `first..first + n` gathered at the input site.
pub fn read_output<A: Arith>(plan: &MappingPlan, pads: &Scratchpads<A>, first: u32, n: u32, width: usize) -> Result<Tensor2D<A::Word>> {
    let mut rows = Vec::with_capacity(n as usize);
    for p in first..first + n {
        let w = pads
            .words(plan.input_site, Slot::LayerOut, token_key(p))
            .ok_or_else(|| Error::PlanMismatch(format!("no output row for token {p}")))?;
        rows.push(w.to_vec());
    }
    Tensor2D::from_rows(width, &rows)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacroCycles {
    pub active: u64,
    pub retention: u64,
    pub gated: u64,
}

impl MacroCycles {
    pub fn total(&self) -> u64 {
        self.active + self.retention + self.gated
    }
}

/// Macro-cycle accounting over all router–PE pairs of a run. A powered
/// macro is active while it works and in retention while idle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub cycles: u64,
    pub pairs: u64,
    pub rram_acim: MacroCycles,
    pub sram_dcim: MacroCycles,
    pub scratchpad: MacroCycles,
    pub router: MacroCycles,
}

impl EnergyLedger {
    pub fn empty(pairs: u64) -> Self {
        let z = MacroCycles::default();
        Self { cycles: 0, pairs, rram_acim: z, sram_dcim: z, scratchpad: z, router: z }
    }

    pub fn get(&self, k: MacroKind) -> &MacroCycles {
        match k {
            MacroKind::RramAcim => &self.rram_acim,
            MacroKind::SramDcim => &self.sram_dcim,
            MacroKind::Scratchpad => &self.scratchpad,
            MacroKind::Router => &self.router,
        }
    }

    fn get_mut(&mut self, k: MacroKind) -> &mut MacroCycles {
        match k {
            MacroKind::RramAcim => &mut self.rram_acim,
            MacroKind::SramDcim => &mut self.sram_dcim,
            MacroKind::Scratchpad => &mut self.scratchpad,
            MacroKind::Router => &mut self.router,
        }
    }

    /// Every macro's cycles partition the run.
    pub fn is_balanced(&self) -> bool {
        MacroKind::ALL.iter().all(|&k| self.get(k).total() == self.cycles * self.pairs)
    }

    /// Joules per macro kind.
    pub fn energy(&self, hw: &HardwareSpec) -> PerMacro {
        let dt = hw.cycle_seconds();
        let e = |k: MacroKind| {
            let c = self.get(k);
            (c.active as f64 * hw.macro_power.active(k) + c.retention as f64 * hw.macro_power.retention(k)) * dt
        };
        PerMacro {
            rram_acim: e(MacroKind::RramAcim),
            sram_dcim: e(MacroKind::SramDcim),
            scratchpad: e(MacroKind::Scratchpad),
            router: e(MacroKind::Router),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub packets: u64,
    pub flits_injected: u64,
    /// Flit-link traversals.
    pub flit_hops: u64,
    pub smac_ops: u64,
    /// Query–key dot products.
    pub dmac_score_ops: u64,
    /// Probability–value accumulations.
    pub dmac_value_ops: u64,
    pub softmax_elems: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    /// `(injected, consumed)` flits per phase.
    pub phase_flits: BTreeMap<Phase, (u64, u64)>,
    pub max_fifo_occupancy: u32,
    pub fifo_depth: u32,
    pub reductions_checked: u64,
    pub violations: Vec<String>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub cycle: u64,
    pub router: Coord,
    pub event: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimTrace {
    pub events: Vec<TraceEvent>,
    pub cycles: u64,
}

impl SimTrace {
    /// `cycle router event`, one per line.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for e in &self.events {
            let _ = writeln!(s, "{} {} {}", e.cycle, e.router, e.event);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub trace: bool,
    /// Cycles without any progress before reporting a deadlock.
    pub deadlock_cycles: u64,
    /// Fault injection: discard the payload of the n-th ejected flit (0-based).
    pub drop_flit: Option<u64>,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { trace: false, deadlock_cycles: 100_000, drop_flit: None }
    }
}

pub struct SimResult<A: Arith> {
    pub cycles: u64,
    pub ledger: EnergyLedger,
    pub scratchpads: Scratchpads<A>,
    pub counters: Counters,
    pub audit: AuditReport,
    pub trace: Option<SimTrace>,
}

/// Everything a run reads besides the program.
pub struct SimContext<'a, A: Arith> {
    pub hw: &'a HardwareSpec,
    pub arith: &'a A,
    pub weights: &'a LayerWeights<A::Word>,
}

#[derive(Debug, Clone, Copy)]
struct Flit {
    packet: u32,
    tail: bool,
    dst: Coord,
}

struct Packet<A: Arith> {
    ins: usize,
    op: usize,
    phase: Phase,
    payload: Vec<(u64, Row<A>)>,
    dropped: bool,
}

const LOCAL: usize = 4;
const EJECT: usize = 4;

#[derive(Default)]
struct RouterNet {
    inputs: [VecDeque<Flit>; 5],
    /// Flits in flight towards each planar input.
    reserved: [u32; 4],
    /// Input port currently owning each output.
    lock: [Option<usize>; 5],
    rr: [usize; 5],
}

/// Merged busy intervals.
#[derive(Default, Clone)]
struct Activity {
    spans: Vec<(u64, u64)>,
}

impl Activity {
    fn add(&mut self, start: u64, end: u64) {
        if let Some(last) = self.spans.last_mut() {
            if start <= last.1 && start >= last.0 {
                last.1 = last.1.max(end);
                return;
            }
        }
        self.spans.push((start, end));
    }

    fn busy(&self, horizon: u64) -> u64 {
        let mut v = self.spans.clone();
        v.sort_unstable();
        let mut total = 0;
        let mut cur: Option<(u64, u64)> = None;
        for (s, e) in v {
            let (s, e) = (s.min(horizon), e.min(horizon));
            match cur {
                Some((cs, ce)) if s <= ce => cur = Some((cs, ce.max(e))),
                Some((cs, ce)) => {
                    total += ce - cs;
                    cur = Some((s, e));
                }
                None => cur = Some((s, e)),
            }
        }
        if let Some((cs, ce)) = cur {
            total += ce - cs;
        }
        total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    /// Local micro-op `(instruction, op)` finished.
    Compute(usize, usize),
    /// Packet delivered.
    Deliver(u32),
}

struct InsState {
    waiting: usize,
    iteration: u32,
    outstanding: usize,
    done: bool,
}

struct Sim<'a, A: Arith> {
    cx: &'a SimContext<'a, A>,
    prog: &'a Program,
    opts: &'a SimOptions,
    geom: MeshGeometry,
    now: u64,
    pads: Scratchpads<A>,
    nets: Vec<RouterNet>,
    /// Routers holding at least one queued flit.
    active: BTreeSet<usize>,
    in_flight: BinaryHeap<Reverse<(u64, u64, usize, usize)>>,
    in_flight_flits: HashMap<u64, Flit>,
    flight_seq: u64,
    packets: Vec<Packet<A>>,
    events: BinaryHeap<Reverse<(u64, u64, EventKind)>>,
    event_seq: u64,
    ins: Vec<InsState>,
    dependents: Vec<Vec<usize>>,
    ready: BTreeSet<usize>,
    busy_until: HashMap<(Coord, Resource), u64>,
    queues: HashMap<(Coord, Resource), VecDeque<(usize, usize)>>,
    activity: BTreeMap<(Coord, MacroKind), Activity>,
    gated_since: BTreeMap<(Coord, MacroKind), u64>,
    gated_total: BTreeMap<MacroKind, u64>,
    counters: Counters,
    audit: AuditReport,
    ejected: u64,
    trace: Option<SimTrace>,
    remaining: usize,
    last_done: u64,
}

impl<'a, A: Arith> Sim<'a, A> {
    fn log(&mut self, router: Coord, event: impl FnOnce() -> String) {
        if let Some(t) = &mut self.trace {
            t.events.push(TraceEvent { cycle: self.now, router, event: event() });
        }
    }

    fn push_event(&mut self, at: u64, kind: EventKind) {
        self.event_seq += 1;
        self.events.push(Reverse((at, self.event_seq, kind)));
    }

    fn instruction(&self, i: usize) -> &'a Instruction {
        &self.prog.instructions[i]
    }

    fn start_iteration(&mut self, i: usize) {
        let ins = self.instruction(i);
        if ins.ops.is_empty() {
            self.finish_instruction(i);
            return;
        }
        self.ins[i].outstanding = ins.ops.len();
        let it = self.ins[i].iteration;
        for (k, op) in ins.ops.iter().enumerate() {
            match op.dst {
                Some(dst) => self.inject(i, k, op, dst, it),
                None => {
                    let res = ins.opcode.resource();
                    match res {
                        Some(r) => {
                            let key = (op.at, r);
                            let free = self.busy_until.get(&key).copied().unwrap_or(0) <= self.now
                                && self.queues.get(&key).is_none_or(|q| q.is_empty());
                            if free {
                                self.begin_compute(i, k, r);
                            } else {
                                self.queues.entry(key).or_default().push_back((i, k));
                            }
                        }
                        None => {
                            let lat = op_latency(ins.opcode, op, self.cx.hw);
                            self.push_event(self.now + lat, EventKind::Compute(i, k));
                        }
                    }
                }
            }
        }
    }

    fn begin_compute(&mut self, i: usize, k: usize, r: Resource) {
        let ins = self.instruction(i);
        let op = &ins.ops[k];
        let lat = op_latency(ins.opcode, op, self.cx.hw);
        self.busy_until.insert((op.at, r), self.now + lat);
        self.activity.entry((op.at, r.macro_kind())).or_default().add(self.now, self.now + lat);
        self.log(op.at, || format!("start {} tag{}", ins.opcode, ins.tag));
        self.push_event(self.now + lat, EventKind::Compute(i, k));
    }

    fn inject(&mut self, i: usize, k: usize, op: &MicroOp, dst: Coord, it: u32) {
        let Action::Move { src, cols, .. } = &op.action else {
            panic!("transfer micro-op without a move action");
        };
        let payload = if A::FUNCTIONAL { self.pads.select(op.at, *src, op.rows, it, *cols) } else { Vec::new() };
        let id = self.packets.len() as u32;
        let phase = self.instruction(i).phase;
        self.packets.push(Packet { ins: i, op: k, phase, payload, dropped: false });
        let flits = op.flits.max(1);
        let r = self.geom.index(op.at);
        for f in 0..flits {
            self.nets[r].inputs[LOCAL].push_back(Flit { packet: id, tail: f + 1 == flits, dst });
        }
        self.active.insert(r);
        self.counters.packets += 1;
        self.counters.flits_injected += flits;
        self.audit.phase_flits.entry(phase).or_default().0 += flits;
        self.log(op.at, || format!("inject p{id} {flits}f -> {dst}"));
    }

    fn complete_op(&mut self, i: usize) {
        self.ins[i].outstanding -= 1;
        if self.ins[i].outstanding == 0 {
            self.ins[i].iteration += 1;
            if self.ins[i].iteration < self.instruction(i).repeat {
                self.ready.insert(i);
            } else {
                self.finish_instruction(i);
            }
        }
    }

    fn finish_instruction(&mut self, i: usize) {
        self.ins[i].done = true;
        self.remaining -= 1;
        self.last_done = self.last_done.max(self.now);
        for d in std::mem::take(&mut self.dependents[i]) {
            self.ins[d].waiting -= 1;
            if self.ins[d].waiting == 0 {
                self.ready.insert(d);
            }
        }
    }

    fn apply_local(&mut self, i: usize, k: usize) -> Result<()> {
        let ins = self.instruction(i);
        let op = &ins.ops[k];
        let it = self.ins[i].iteration;
        let arith = self.cx.arith;
        let w = self.cx.weights;
        let at = op.at;
        match &op.action {
            Action::Move { src, dst, cols, dst_col, dst_width, accumulate } => {
                let payload = self.pads.select(at, *src, op.rows, it, *cols);
                self.pads.write(arith, at, *dst, *dst_col, *dst_width, *accumulate, payload);
            }
            Action::Smac { matrix, rows, cols, input, out, low_rank } => {
                let lin = w.matrix(*matrix)?;
                let (r0, r1) = (rows.0 as usize, rows.1 as usize);
                let (c0, c1) = (cols.0 as usize, cols.1 as usize);
                let inputs = self.pads.select(at, *input, op.rows, it, Some(*cols));
                for (key, row) in inputs {
                    let Values::Words(x) = row.values else { continue };
                    let acc = if *low_rank {
                        let ad = lin.adapter.as_ref().ok_or_else(|| {
                            Error::PlanMismatch(format!("`{matrix}` has no adapter"))
                        })?;
                        let rank = ad.a.rows();
                        arith.lora_smac(&ad.b.block(r0, r1, 0, rank), &ad.a.block(0, rank, c0, c1), w.lora_scale, &x)
                    } else {
                        arith.smac(&lin.w.block(r0, r1, c0, c1), &x)
                    };
                    self.pads.add_acc(arith, at, *out, key, acc, 1);
                    self.counters.smac_ops += 1;
                }
            }
            Action::Finalize { src, dst, parts, weighted } => {
                let rows = self.pads.select(at, *src, op.rows, it, None);
                for (key, row) in rows {
                    if let Some(p) = parts {
                        self.audit.reductions_checked += 1;
                        if row.parts != *p {
                            self.audit.violations.push(format!(
                                "reduction into {src:?} at {at} row {key:#x} summed {} of {p} operands",
                                row.parts
                            ));
                        }
                    }
                    let Values::Accs(a) = row.values else { continue };
                    let words = a
                        .into_iter()
                        .map(|v| if *weighted { arith.finalize_weighted(v) } else { arith.finalize(v) })
                        .collect();
                    self.pads.put_words(at, *dst, key, words);
                }
            }
            Action::Score { head } => {
                let hd = w.head_dim;
                let cols = *head as usize * hd..(*head as usize + 1) * hd;
                let scale = 1.0 / (hd as f64).sqrt();
                let queries = self.pads.select(at, Slot::QueryIn(*head), op.rows, it, None);
                let keys: Vec<(u64, Vec<A::Word>)> = self
                    .pads
                    .rows(at, Slot::KCache)
                    .map(|m| {
                        m.iter()
                            .filter_map(|(k, r)| match &r.values {
                                Values::Words(v) => Some((*k, v[cols.clone()].to_vec())),
                                Values::Accs(_) => None,
                            })
                            .collect()
                    })
                    .unwrap_or_default();
                for (qk, q) in queries {
                    let Values::Words(q) = q.values else { continue };
                    let (qp, _) = split_key(qk);
                    for (kk, k) in &keys {
                        let (kp, _) = split_key(*kk);
                        let s = arith.score(&q, k, scale);
                        self.pads.put_words(at, Slot::ScoreOut(*head), crate::isa::compound_key(qp, kp), vec![s]);
                        self.counters.dmac_score_ops += 1;
                    }
                }
            }
            Action::Softmax { head } => {
                let scores = self.pads.select(at, Slot::Score(*head), op.rows, it, None);
                let mut by_query: BTreeMap<u32, Vec<(u32, A::Word)>> = BTreeMap::new();
                for (key, row) in scores {
                    let (qp, kp) = split_key(key);
                    if kp <= qp {
                        if let Values::Words(v) = row.values {
                            by_query.entry(qp).or_default().push((kp, v[0]));
                        }
                    }
                }
                for (qp, list) in by_query {
                    let vals: Vec<A::Word> = list.iter().map(|&(_, s)| s).collect();
                    self.counters.softmax_elems += vals.len() as u64;
                    for ((kp, _), p) in list.iter().zip(arith.softmax(&vals)) {
                        self.pads.put_words(at, Slot::Prob(*head), crate::isa::compound_key(qp, *kp), vec![p]);
                    }
                }
            }
            Action::Weighted { head } => {
                let hd = w.head_dim;
                let cols = *head as usize * hd..(*head as usize + 1) * hd;
                let probs = self.pads.select(at, Slot::ProbIn(*head), op.rows, it, None);
                let mut acc: BTreeMap<u32, Vec<A::Acc>> = BTreeMap::new();
                for (key, row) in probs {
                    let (qp, kp) = split_key(key);
                    let Values::Words(p) = row.values else { continue };
                    let v = self.pads.words(at, Slot::VCache, token_key(kp)).ok_or_else(|| {
                        Error::PlanMismatch(format!("value row {kp} missing at {at}"))
                    })?;
                    let a = acc.entry(qp).or_insert_with(|| vec![A::Acc::default(); hd]);
                    arith.weighted_acc(a, p[0], &v[cols.clone()]);
                    self.counters.dmac_value_ops += 1;
                }
                for (qp, a) in acc {
                    self.pads.add_acc(arith, at, Slot::CtxPart(*head), token_key(qp), a, 1);
                }
            }
            Action::Activate { gate, up, dst } => {
                let ups = self.pads.select(at, *up, op.rows, it, None);
                for (key, row) in ups {
                    let Values::Words(u) = row.values else { continue };
                    let out: Vec<A::Word> = match gate {
                        Some(g) => {
                            let gv = self.pads.words(at, *g, key).ok_or_else(|| {
                                Error::PlanMismatch(format!("gate row missing at {at}"))
                            })?;
                            gv.iter().zip(&u).map(|(&g, &u)| arith.mul(arith.silu(g), u)).collect()
                        }
                        None => u.iter().map(|&u| arith.silu(u)).collect(),
                    };
                    self.pads.put_words(at, *dst, key, out);
                }
            }
            Action::ProgramSram { .. } => {}
            Action::Gate { kinds, on } => {
                for &k in kinds {
                    let key = (at, k);
                    if *on {
                        if let Some(since) = self.gated_since.remove(&key) {
                            *self.gated_total.entry(k).or_default() += self.now - since;
                        }
                    } else {
                        self.gated_since.entry(key).or_insert(self.now);
                    }
                }
            }
        }
        Ok(())
    }

    fn deliver(&mut self, id: u32) {
        let pk = &mut self.packets[id as usize];
        let (i, k, dropped) = (pk.ins, pk.op, pk.dropped);
        let payload = std::mem::take(&mut pk.payload);
        let op = &self.instruction(i).ops[k];
        let at = op.dst.expect("delivered packet has a destination");
        if !dropped {
            if let Action::Move { dst, dst_col, dst_width, accumulate, .. } = &op.action {
                self.pads.write(self.cx.arith, at, *dst, *dst_col, *dst_width, *accumulate, payload);
            }
        }
        self.log(at, || format!("deliver p{id}"));
        self.complete_op(i);
    }

    fn route(at: Coord, dst: Coord) -> usize {
        if dst.col > at.col {
            Dir::East.index()
        } else if dst.col < at.col {
            Dir::West.index()
        } else if dst.row > at.row {
            Dir::South.index()
        } else if dst.row < at.row {
            Dir::North.index()
        } else {
            EJECT
        }
    }

    fn dir_of(index: usize) -> Dir {
        match index {
            0 => Dir::North,
            1 => Dir::East,
            2 => Dir::South,
            _ => Dir::West,
        }
    }

    /// One network cycle; returns whether any flit moved.
    fn step_network(&mut self) -> bool {
        let depth = self.cx.hw.fifo_depth_flits();
        // arrivals
        while let Some(Reverse((t, seq, r, port))) = self.in_flight.peek().copied() {
            if t > self.now {
                break;
            }
            self.in_flight.pop();
            let f = self.in_flight_flits.remove(&seq).expect("flit in flight");
            self.nets[r].reserved[port] -= 1;
            self.nets[r].inputs[port].push_back(f);
            self.active.insert(r);
            let occ = self.nets[r].inputs[port].len() as u32;
            self.audit.max_fifo_occupancy = self.audit.max_fifo_occupancy.max(occ);
            if occ > depth {
                let c = self.geom.coord(r);
                self.audit.violations.push(format!("FIFO overflow at {c} port {port}: {occ} > {depth}"));
            }
        }
        let mut moved = false;
        let routers: Vec<usize> = self.active.iter().copied().collect();
        for r in routers {
            let here = self.geom.coord(r);
            let mut router_moved = false;
            for out in 0..5 {
                let chosen = match self.nets[r].lock[out] {
                    Some(inp) => (!self.nets[r].inputs[inp].is_empty()).then_some(inp),
                    None => {
                        let start = self.nets[r].rr[out];
                        (0..5).map(|k| (start + k) % 5).find(|&inp| {
                            self.nets[r].inputs[inp]
                                .front()
                                .is_some_and(|f| Self::route(here, f.dst) == out && !self.nets[r].lock.contains(&Some(inp)))
                        })
                    }
                };
                let Some(inp) = chosen else { continue };
                let flit = *self.nets[r].inputs[inp].front().expect("chosen input has a flit");
                if out == EJECT {
                    self.nets[r].inputs[inp].pop_front();
                    let pk = &mut self.packets[flit.packet as usize];
                    let phase = pk.phase;
                    let drop = self.opts.drop_flit == Some(self.ejected);
                    self.ejected += 1;
                    if drop {
                        pk.dropped = true;
                    } else {
                        self.audit.phase_flits.entry(phase).or_default().1 += 1;
                    }
                    if flit.tail {
                        let id = flit.packet;
                        self.push_event(self.now + 1, EventKind::Deliver(id));
                    }
                } else {
                    let dir = Self::dir_of(out);
                    let next = self.geom.neighbor(here, dir).expect("XY route stays inside the mesh");
                    let nr = self.geom.index(next);
                    let port = dir.opposite().index();
                    let occupied = self.nets[nr].inputs[port].len() as u32 + self.nets[nr].reserved[port];
                    if occupied >= depth {
                        continue;
                    }
                    self.nets[r].inputs[inp].pop_front();
                    self.nets[nr].reserved[port] += 1;
                    let lat = if self.geom.crosses_ct(here, next) {
                        self.cx.hw.macro_timing.inter_ct_hop_cycles
                    } else {
                        self.cx.hw.macro_timing.hop_cycles
                    } as u64;
                    self.flight_seq += 1;
                    self.in_flight_flits.insert(self.flight_seq, flit);
                    self.in_flight.push(Reverse((self.now + lat.max(1), self.flight_seq, nr, port)));
                    self.counters.flit_hops += 1;
                }
                self.nets[r].lock[out] = if flit.tail { None } else { Some(inp) };
                self.nets[r].rr[out] = (inp + 1) % 5;
                moved = true;
                router_moved = true;
            }
            if router_moved {
                self.activity.entry((here, MacroKind::Router)).or_default().add(self.now, self.now + 1);
            }
            if self.nets[r].inputs.iter().all(|q| q.is_empty()) {
                self.active.remove(&r);
            }
        }
        moved
    }

    fn network_busy(&self) -> bool {
        !self.in_flight.is_empty() || !self.active.is_empty()
    }

    fn blocked_report(&self) -> String {
        let mut s = String::new();
        for (r, n) in self.nets.iter().enumerate() {
            for (p, q) in n.inputs.iter().enumerate() {
                if let Some(f) = q.front() {
                    let _ = write!(s, "{} in{} head->{} ({} queued); ", self.geom.coord(r), p, f.dst, q.len());
                }
            }
        }
        s
    }

    fn run(&mut self) -> Result<()> {
        let mut idle = 0u64;
        loop {
            let mut progress = false;
            while let Some(Reverse((t, _, kind))) = self.events.peek().copied() {
                if t > self.now {
                    break;
                }
                self.events.pop();
                progress = true;
                match kind {
                    EventKind::Compute(i, k) => {
                        if A::FUNCTIONAL {
                            self.apply_local(i, k)?;
                        } else if let Action::Gate { .. } = self.instruction(i).ops[k].action {
                            self.apply_local(i, k)?;
                        }
                        let ins = self.instruction(i);
                        if let Some(r) = ins.opcode.resource() {
                            let key = (ins.ops[k].at, r);
                            if let Some((ni, nk)) = self.queues.get_mut(&key).and_then(|q| q.pop_front()) {
                                self.begin_compute(ni, nk, r);
                            }
                        }
                        self.complete_op(i);
                    }
                    EventKind::Deliver(id) => self.deliver(id),
                }
            }
            while let Some(i) = self.ready.pop_first() {
                progress = true;
                self.start_iteration(i);
            }
            if self.remaining == 0 && !self.network_busy() && self.events.is_empty() {
                return Ok(());
            }
            if self.network_busy() {
                if self.step_network() {
                    progress = true;
                }
                idle = if progress { 0 } else { idle + 1 };
                if idle > self.opts.deadlock_cycles {
                    return Err(Error::Deadlock { cycle: self.now, report: self.blocked_report() });
                }
                self.now += 1;
                if self.active.is_empty() && self.ready.is_empty() {
                    // nothing queued: skip to the next arrival or local completion
                    let next_flit = self.in_flight.peek().map(|Reverse((t, ..))| *t);
                    let next_event = self.events.peek().map(|Reverse((t, ..))| *t);
                    if let Some(t) = next_flit.into_iter().chain(next_event).min() {
                        self.now = self.now.max(t);
                    }
                }
            } else if let Some(Reverse((t, _, _))) = self.events.peek() {
                self.now = *t;
            } else {
                let stuck: Vec<u32> = self
                    .ins
                    .iter()
                    .zip(&self.prog.instructions)
                    .filter(|(s, _)| !s.done)
                    .map(|(_, i)| i.tag)
                    .collect();
                return Err(Error::Deadlock {
                    cycle: self.now,
                    report: format!("instructions {stuck:?} can never start"),
                });
            }
        }
    }
}

/// Runs `prog` from the scratchpad image `initial`.
pub fn run_program<A: Arith>(
    prog: &Program,
    cx: &SimContext<'_, A>,
    initial: Scratchpads<A>,
    opts: &SimOptions,
) -> Result<SimResult<A>> {
    prog.validate()?;
    let geom = prog.geometry;
    let tags: HashMap<u32, usize> = prog.instructions.iter().enumerate().map(|(i, ins)| (ins.tag, i)).collect();
    let mut dependents = vec![Vec::new(); prog.len()];
    let mut ins = Vec::with_capacity(prog.len());
    let mut ready = BTreeSet::new();
    for (i, x) in prog.instructions.iter().enumerate() {
        for d in &x.deps {
            dependents[tags[d]].push(i);
        }
        if x.deps.is_empty() {
            ready.insert(i);
        }
        ins.push(InsState { waiting: x.deps.len(), iteration: 0, outstanding: 0, done: false });
    }
    let mut sim = Sim {
        cx,
        prog,
        opts,
        geom,
        now: 0,
        pads: initial,
        nets: (0..geom.router_count()).map(|_| RouterNet::default()).collect(),
        active: BTreeSet::new(),
        in_flight: BinaryHeap::new(),
        in_flight_flits: HashMap::new(),
        flight_seq: 0,
        packets: Vec::new(),
        events: BinaryHeap::new(),
        event_seq: 0,
        ins,
        dependents,
        ready,
        busy_until: HashMap::new(),
        queues: HashMap::new(),
        activity: BTreeMap::new(),
        gated_since: BTreeMap::new(),
        gated_total: BTreeMap::new(),
        counters: Counters::default(),
        audit: AuditReport { fifo_depth: cx.hw.fifo_depth_flits(), ..Default::default() },
        ejected: 0,
        trace: opts.trace.then(SimTrace::default),
        remaining: prog.len(),
        last_done: 0,
    };
    sim.run()?;
    let cycles = sim.last_done;
    for ((_, k), since) in std::mem::take(&mut sim.gated_since) {
        *sim.gated_total.entry(k).or_default() += cycles.saturating_sub(since);
    }
    let pairs = geom.router_count() as u64;
    let mut ledger = EnergyLedger::empty(pairs);
    ledger.cycles = cycles;
    for k in MacroKind::ALL {
        let active: u64 = sim.activity.iter().filter(|((_, kk), _)| *kk == k).map(|(_, a)| a.busy(cycles)).sum();
        let gated = sim.gated_total.get(&k).copied().unwrap_or(0).min(cycles * pairs - active);
        let c = ledger.get_mut(k);
        c.active = active;
        c.gated = gated;
        c.retention = cycles * pairs - active - gated;
    }
    for (phase, (inj, cons)) in &sim.audit.phase_flits {
        if inj != cons {
            sim.audit.violations.push(format!("{} phase: {inj} flits injected, {cons} consumed", phase.name()));
        }
    }
    if let Some(t) = &mut sim.trace {
        t.cycles = cycles;
    }
    Ok(SimResult {
        cycles,
        ledger,
        scratchpads: sim.pads,
        counters: sim.counters,
        audit: sim.audit,
        trace: sim.trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arith::Fixed;
    use crate::config::ModelSpec;
    use crate::isa::Instruction;

    fn send_program(geom: MeshGeometry, from: Coord, to: Coord, flits: u64) -> Program {
        Program {
            geometry: geom,
            instructions: vec![Instruction {
                tag: 0,
                opcode: Opcode::Send,
                phase: Phase::Output,
                repeat: 1,
                deps: vec![],
                ops: vec![MicroOp {
                    at: from,
                    dst: Some(to),
                    flits,
                    work: flits,
                    rows: RowSel::Iter { base: 0 },
                    action: Action::Move { src: Slot::LayerIn, dst: Slot::LayerOut, cols: None, dst_col: 0, dst_width: 4, accumulate: false },
                }],
            }],
        }
    }

    fn run_fixed(p: &Program, hw: &HardwareSpec, pads: Scratchpads<Fixed>, opts: &SimOptions) -> SimResult<Fixed> {
        let m = ModelSpec::preset("toy").unwrap();
        let w = crate::golden::LayerWeights::random(&m, 1).encode(&Fixed::default());
        let cx = SimContext { hw, arith: &Fixed::default(), weights: &w };
        run_program(p, &cx, pads, opts).unwrap()
    }

    #[test]
    fn empty_program_takes_no_cycles() {
        let hw = HardwareSpec::toy();
        let r = run_fixed(&Program::empty(MeshGeometry::single(4, 4)), &hw, Scratchpads::default(), &SimOptions::default());
        assert_eq!(r.cycles, 0);
        assert_eq!(r.ledger.energy(&hw).sum(), 0.0);
        assert!(r.ledger.is_balanced());
    }

    #[test]
    fn send_timing_rule() {
        // 16 flits over 3 hops: tail ejects at 3 + 16 - 1, payload usable one cycle later
        let hw = HardwareSpec::toy();
        let p = send_program(MeshGeometry::single(4, 4), Coord::new(0, 0), Coord::new(1, 2), 16);
        let mut pads = Scratchpads::default();
        pads.put_words(Coord::new(0, 0), Slot::LayerIn, token_key(0), vec![1, 2, 3, 4]);
        let r = run_fixed(&p, &hw, pads, &SimOptions::default());
        assert_eq!(r.cycles, 3 + 16 - 1 + 1);
        assert_eq!(r.scratchpads.words(Coord::new(1, 2), Slot::LayerOut, token_key(0)), Some(&[1, 2, 3, 4][..]));
        assert!(r.audit.is_clean());
        assert_eq!(r.counters.flit_hops, 48);
    }

    #[test]
    fn inter_tile_links_are_slower() {
        let hw = HardwareSpec::toy();
        let geom = MeshGeometry { rows: 4, cols_per_ct: 4, cts: 2 };
        let p = send_program(geom, Coord::new(0, 3), Coord::new(0, 4), 1);
        let r = run_fixed(&p, &hw, Scratchpads::default(), &SimOptions::default());
        assert_eq!(r.cycles, hw.macro_timing.inter_ct_hop_cycles as u64 + 1);
        assert_eq!(r.cycles, transfer_cycles(&geom, Coord::new(0, 3), Coord::new(0, 4), 1, &hw));
    }

    #[test]
    fn dropped_flit_breaks_conservation() {
        let hw = HardwareSpec::toy();
        let p = send_program(MeshGeometry::single(4, 4), Coord::new(0, 0), Coord::new(3, 3), 4);
        let opts = SimOptions { drop_flit: Some(2), ..Default::default() };
        let r = run_fixed(&p, &hw, Scratchpads::default(), &opts);
        assert!(!r.audit.is_clean());
    }

    #[test]
    fn trace_lines_are_cycle_ordered() {
        let hw = HardwareSpec::toy();
        let p = send_program(MeshGeometry::single(4, 4), Coord::new(0, 0), Coord::new(0, 1), 2);
        let r = run_fixed(&p, &hw, Scratchpads::default(), &SimOptions { trace: true, ..Default::default() });
        let dump = r.trace.unwrap().dump();
        assert_eq!(dump, "0 (0,0) inject p0 2f -> (0,1)\n3 (0,1) deliver p0\n");
    }

    fn run_layer<A: Arith>(
        arith: &A,
        model: &ModelSpec,
        hw: &HardwareSpec,
        seed: u64,
        summary: crate::mapper::DataflowSummary,
        prog_fn: impl Fn(Program) -> Program,
    ) -> (SimResult<A>, Tensor2D<A::Word>, Tensor2D<A::Word>) {
        let plan = crate::mapper::map_layer(model, hw).unwrap();
        let w = crate::golden::LayerWeights::random(model, seed).encode(arith);
        let d = model.hidden_dim as usize;
        let x = crate::golden::random_input(summary.kv_len as usize, d, seed ^ 0x5eed).map(|v| arith.encode(v));
        let expected = crate::golden::layer_forward(arith, &w, &x).unwrap();
        let first = summary.first_pos();
        let (_, cache) = crate::golden::prefill(arith, &w, &x.block(0, first as usize, 0, d)).unwrap();
        let fresh = x.block(first as usize, x.rows(), 0, d);
        let image = layer_image::<A>(&plan, &fresh, first, (first > 0).then_some(&cache));
        let prog = prog_fn(crate::isa::compile_layer(&plan, model, hw, summary).unwrap());
        let cx = SimContext { hw, arith, weights: &w };
        let r = run_program(&prog, &cx, image, &SimOptions::default()).unwrap();
        let got = read_output(&plan, &r.scratchpads, first, summary.q_rows, d).unwrap();
        let want = expected.block(first as usize, expected.rows(), 0, d);
        (r, got, want)
    }

    #[test]
    fn toy_prefill_is_bit_exact() {
        let m = ModelSpec::preset("toy").unwrap();
        let hw = HardwareSpec::toy();
        for seed in 0..5 {
            let (r, got, want) =
                run_layer(&Fixed::default(), &m, &hw, seed, crate::mapper::DataflowSummary::prefill(4), |p| p);
            assert_eq!(got, want, "seed {seed}");
            assert!(r.audit.is_clean(), "{:?}", r.audit.violations);
            assert!(r.ledger.is_balanced());
            assert_eq!(r.counters.dmac_score_ops, 16 * 2);
            assert!(r.audit.max_fifo_occupancy <= r.audit.fifo_depth);
        }
    }

    #[test]
    fn toy_decode_is_bit_exact() {
        let m = ModelSpec::preset("toy").unwrap();
        let hw = HardwareSpec::toy();
        for pos in [0, 1, 5] {
            let (r, got, want) =
                run_layer(&Fixed::default(), &m, &hw, 7, crate::mapper::DataflowSummary::decode(pos), |p| p);
            assert_eq!(got, want, "position {pos}");
            assert_eq!(r.counters.dmac_score_ops, (pos as u64 + 1) * 2);
            assert!(r.audit.is_clean());
        }
    }

    #[test]
    fn float_datapath_within_tolerance() {
        let m = ModelSpec::preset("toy").unwrap();
        let hw = HardwareSpec::toy();
        let (_, got, want) = run_layer(&crate::arith::Float, &m, &hw, 3, crate::mapper::DataflowSummary::prefill(4), |p| p);
        for (a, b) in got.values().iter().zip(want.values()) {
            assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn feed_forward_layer_is_bit_exact() {
        let mut m = ModelSpec::preset("toy").unwrap();
        m.ffn_dim = 16;
        m.ffn_gated = true;
        m.lora.targets.push(crate::config::MatrixId::FfnUp);
        let hw = HardwareSpec { mesh_rows: 6, mesh_cols: 6, pe_count: 36, ..HardwareSpec::toy() };
        let (r, got, want) = run_layer(&Fixed::default(), &m, &hw, 11, crate::mapper::DataflowSummary::prefill(3), |p| p);
        assert_eq!(got, want);
        assert!(r.audit.is_clean(), "{:?}", r.audit.violations);
    }

    #[test]
    fn unfolded_repeats_compute_the_same_values() {
        let m = ModelSpec::preset("toy").unwrap();
        let hw = HardwareSpec::toy();
        let s = crate::mapper::DataflowSummary::prefill(4);
        let (a, got_a, _) = run_layer(&Fixed::default(), &m, &hw, 2, s, |p| p);
        let (b, got_b, _) = run_layer(&Fixed::default(), &m, &hw, 2, s, |p| p.unfold_repeats());
        assert_eq!(got_a, got_b);
        assert_eq!(a.cycles, b.cycles);
        assert_eq!(a.ledger, b.ledger);
        assert_eq!(a.counters, b.counters);
    }

    #[test]
    fn runs_are_deterministic() {
        let m = ModelSpec::preset("toy").unwrap();
        let hw = HardwareSpec::toy();
        let s = crate::mapper::DataflowSummary::prefill(4);
        let (a, _, _) = run_layer(&Fixed::default(), &m, &hw, 9, s, |p| p);
        let (b, _, _) = run_layer(&Fixed::default(), &m, &hw, 9, s, |p| p);
        assert_eq!(a.cycles, b.cycles);
        assert_eq!(a.ledger, b.ledger);
        assert_eq!(a.counters, b.counters);
        assert_eq!(a.scratchpads, b.scratchpads);
    }

    #[test]
    fn timing_only_datapath_keeps_cycles() {
        let m = ModelSpec::preset("toy").unwrap();
        let hw = HardwareSpec::toy();
        let plan = crate::mapper::map_layer(&m, &hw).unwrap();
        let s = crate::mapper::DataflowSummary::prefill(4);
        let (full, _, _) = run_layer(&Fixed::default(), &m, &hw, 1, s, |p| p);
        let prog = crate::isa::compile_layer(&plan, &m, &hw, s).unwrap();
        let w = crate::golden::LayerWeights::shapes(&m);
        let cx = SimContext { hw: &hw, arith: &crate::arith::Timing, weights: &w };
        let t = run_program(&prog, &cx, Scratchpads::default(), &SimOptions::default()).unwrap();
        assert_eq!(t.cycles, full.cycles);
        assert_eq!(t.ledger, full.ledger);
        assert!(t.audit.is_clean());
    }
}
