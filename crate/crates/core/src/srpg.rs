//! Layer-wise compute-tile pipeline with overlapped adapter reprogramming
//! and power gating.
//!
//! Layers run in order on the compute tiles that hold them. Tiles needed by
//! layer 0 reprogram at time zero; the not-yet-programmed tiles of layer
//! `i + 1` start reprogramming when layer `i` starts computing, all tiles of
//! one group in parallel. A layer computes once its predecessor's output
//! has arrived and its own tiles are programmed. Prefill runs once; each
//! decode token then sweeps all layers again. Reprogramming happens only
//! once, before the first use of a tile.
//!
//! A tile is COMPUTING while one of its layers runs (including the inbound
//! activation handoff), REPROGRAMMING while its SRAM is written, and
//! IDLE_GATED otherwise: router and RRAM gated, SRAM and scratchpad held
//! in retention.

use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::config::{HardwareSpec, MacroKind, PerMacro};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CtMode {
    Reprogramming,
    Computing,
    IdleGated,
}

impl CtMode {
    pub const ALL: [CtMode; 3] = [CtMode::Reprogramming, CtMode::Computing, CtMode::IdleGated];

    pub fn name(self) -> &'static str {
        match self {
            CtMode::Reprogramming => "REPROGRAMMING",
            CtMode::Computing => "COMPUTING",
            CtMode::IdleGated => "IDLE_GATED",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MacroStatus {
    Active,
    Retention,
    Gated,
}

/// Per-macro power status of a tile in `mode`.
pub fn macro_status(mode: CtMode, kind: MacroKind) -> MacroStatus {
    use MacroKind::*;
    match (mode, kind) {
        (CtMode::Computing, _) => MacroStatus::Active,
        (CtMode::Reprogramming, RramAcim) => MacroStatus::Gated,
        (CtMode::Reprogramming, _) => MacroStatus::Active,
        (CtMode::IdleGated, RramAcim | Router) => MacroStatus::Gated,
        (CtMode::IdleGated, SramDcim | Scratchpad) => MacroStatus::Retention,
    }
}

/// Power drawn by one whole tile in `mode`, per macro kind.
pub fn ct_power(hw: &HardwareSpec, mode: CtMode) -> PerMacro {
    let pairs = hw.pe_count as f64;
    let p = |k: MacroKind| {
        pairs
            * match macro_status(mode, k) {
                MacroStatus::Active => hw.macro_power.active(k),
                MacroStatus::Retention => hw.macro_power.retention(k),
                MacroStatus::Gated => 0.0,
            }
    };
    PerMacro {
        rram_acim: p(MacroKind::RramAcim),
        sram_dcim: p(MacroKind::SramDcim),
        scratchpad: p(MacroKind::Scratchpad),
        router: p(MacroKind::Router),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub start: u64,
    pub end: u64,
    pub mode: CtMode,
    pub layer: Option<u32>,
}

impl Interval {
    pub fn len(&self) -> u64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// One layer as the scheduler sees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWork {
    pub cts: Range<u32>,
    pub prefill: u64,
    /// Latency for each decode token, in generation order.
    pub decode: Vec<u64>,
    /// Inbound activation transfer before prefill / each decode token.
    pub handoff_prefill: u64,
    pub handoff_decode: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineInput {
    pub ct_count: u32,
    /// SRAM reprogramming cycles of each tile.
    pub reprogram: Vec<u64>,
    pub layers: Vec<LayerWork>,
}

impl PipelineInput {
    pub fn validate(&self) -> Result<()> {
        if self.reprogram.len() != self.ct_count as usize {
            return Err(invalid("reprogram", format!("{} entries for {} tiles", self.reprogram.len(), self.ct_count)));
        }
        if self.layers.is_empty() {
            return Err(invalid("layers", "at least one layer is required"));
        }
        let tokens = self.layers[0].decode.len();
        for (i, l) in self.layers.iter().enumerate() {
            if l.cts.is_empty() || l.cts.end > self.ct_count {
                return Err(invalid(format!("layers[{i}].cts"), format!("{:?} outside 0..{}", l.cts, self.ct_count)));
            }
            if l.prefill == 0 || l.decode.contains(&0) {
                return Err(invalid(format!("layers[{i}]"), "latencies must be positive"));
            }
            if l.decode.len() != tokens {
                return Err(invalid(format!("layers[{i}].decode"), "every layer needs the same token count"));
            }
        }
        Ok(())
    }

    pub fn decode_tokens(&self) -> usize {
        self.layers[0].decode.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    /// Per tile, sorted and gap-free from 0 to `makespan`.
    pub cts: Vec<Vec<Interval>>,
    pub first_token: u64,
    /// Completion time of every decode token.
    pub token_marks: Vec<u64>,
    pub makespan: u64,
}

impl Schedule {
    /// Each tile's intervals cover the run exactly and never overlap.
    pub fn check(&self) -> Result<()> {
        for (k, iv) in self.cts.iter().enumerate() {
            let mut t = 0;
            for i in iv {
                if i.start != t || i.end < i.start {
                    return Err(invalid(format!("schedule.ct{k}"), format!("interval {i:?} does not follow {t}")));
                }
                t = i.end;
            }
            if t != self.makespan {
                return Err(invalid(format!("schedule.ct{k}"), format!("ends at {t}, run ends at {}", self.makespan)));
            }
        }
        Ok(())
    }

    pub fn time_in(&self, ct: usize, mode: CtMode) -> u64 {
        self.cts[ct].iter().filter(|i| i.mode == mode).map(Interval::len).sum()
    }

    /// Row-per-interval CSV: `ct,mode,start,end,layer`.
    pub fn gantt_csv(&self) -> String {
        let mut s = String::from("ct,mode,start,end,layer\n");
        for (k, iv) in self.cts.iter().enumerate() {
            for i in iv.iter().filter(|i| !i.is_empty()) {
                let layer = i.layer.map(|l| l.to_string()).unwrap_or_default();
                let _ = writeln!(s, "{k},{},{},{},{layer}", i.mode.name(), i.start, i.end);
            }
        }
        s
    }

    /// One text row per tile, `width` characters wide: `R` reprogramming,
    /// `#` computing, `.` gated.
    pub fn gantt_text(&self, width: usize) -> String {
        let mut s = String::new();
        let span = self.makespan.max(1) as f64;
        for (k, iv) in self.cts.iter().enumerate() {
            let mut row = vec!['.'; width];
            for i in iv {
                let c = match i.mode {
                    CtMode::Reprogramming => 'R',
                    CtMode::Computing => '#',
                    CtMode::IdleGated => continue,
                };
                let a = (i.start as f64 / span * width as f64) as usize;
                let b = ((i.end as f64 / span * width as f64).ceil() as usize).clamp(a + 1, width);
                for ch in &mut row[a.min(width - 1)..b] {
                    *ch = c;
                }
            }
            let _ = writeln!(s, "CT{k:<4} {}", row.into_iter().collect::<String>());
        }
        s
    }
}

struct Builder {
    busy: Vec<Vec<Interval>>,
}

impl Builder {
    fn mark(&mut self, cts: Range<u32>, start: u64, end: u64, mode: CtMode, layer: Option<u32>) {
        for k in cts {
            let v = &mut self.busy[k as usize];
            if let Some(last) = v.last_mut() {
                if last.mode == mode && last.layer == layer && last.end == start {
                    last.end = end;
                    continue;
                }
            }
            v.push(Interval { start, end, mode, layer });
        }
    }

    fn finish(self, makespan: u64) -> Vec<Vec<Interval>> {
        self.busy
            .into_iter()
            .map(|mut v| {
                v.sort_by_key(|i| i.start);
                let mut out = Vec::with_capacity(v.len() * 2 + 1);
                let mut t = 0;
                for i in v {
                    if i.start > t {
                        out.push(Interval { start: t, end: i.start, mode: CtMode::IdleGated, layer: None });
                    }
                    t = i.end;
                    out.push(i);
                }
                if t < makespan {
                    out.push(Interval { start: t, end: makespan, mode: CtMode::IdleGated, layer: None });
                }
                out
            })
            .collect()
    }
}

pub fn build_schedule(input: &PipelineInput) -> Result<Schedule> {
    input.validate()?;
    let mut b = Builder { busy: vec![Vec::new(); input.ct_count as usize] };
    let mut programmed_at: Vec<Option<u64>> = vec![None; input.ct_count as usize];
    let mut program = |b: &mut Builder, cts: Range<u32>, from: u64| -> u64 {
        let mut ready = 0;
        for k in cts {
            let end = match programmed_at[k as usize] {
                Some(t) => t,
                None => {
                    let t = from + input.reprogram[k as usize];
                    b.mark(k..k + 1, from, t, CtMode::Reprogramming, None);
                    programmed_at[k as usize] = Some(t);
                    t
                }
            };
            ready = ready.max(end);
        }
        ready
    };

    let layers = &input.layers;
    let mut ready_next = program(&mut b, layers[0].cts.clone(), 0);
    let mut t = 0;
    for (i, l) in layers.iter().enumerate() {
        let start = t.max(ready_next);
        let compute_start = start + l.handoff_prefill;
        if let Some(next) = layers.get(i + 1) {
            ready_next = program(&mut b, next.cts.clone(), start);
        }
        t = compute_start + l.prefill;
        b.mark(l.cts.clone(), start, t, CtMode::Computing, Some(i as u32));
    }
    let first_token = t;
    let mut marks = Vec::with_capacity(input.decode_tokens());
    for j in 0..input.decode_tokens() {
        for (i, l) in layers.iter().enumerate() {
            let start = t;
            t = start + l.handoff_decode + l.decode[j];
            b.mark(l.cts.clone(), start, t, CtMode::Computing, Some(i as u32));
        }
        marks.push(t);
    }
    let makespan = t;
    let s = Schedule { cts: b.finish(makespan), first_token, token_marks: marks, makespan };
    s.check()?;
    Ok(s)
}

/// Makespan when every tile is reprogrammed one after another before any
/// computation starts.
pub fn serial_makespan(input: &PipelineInput) -> u64 {
    let reprogram: u64 = input.reprogram.iter().sum();
    let prefill: u64 = input.layers.iter().map(|l| l.handoff_prefill + l.prefill).sum();
    let decode: u64 = input.layers.iter().map(|l| l.decode.iter().map(|d| d + l.handoff_decode).sum::<u64>()).sum();
    reprogram + prefill + decode
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerProfile {
    pub seconds: f64,
    pub energy_j: f64,
    pub average_power_w: f64,
    pub energy_by_macro: PerMacro,
    /// Joules spent in each tile mode, `[reprogramming, computing, idle]`.
    pub energy_by_mode: [f64; 3],
    pub baseline_energy_j: f64,
    /// `1 − energy / baseline`, where the baseline keeps every tile fully
    /// active for the whole run.
    pub savings: f64,
}

pub fn power_profile(s: &Schedule, hw: &HardwareSpec) -> PowerProfile {
    let dt = hw.cycle_seconds();
    let powers: Vec<PerMacro> = CtMode::ALL.iter().map(|&m| ct_power(hw, m)).collect();
    let mut by_macro = [0.0; 4];
    let mut by_mode = [0.0; 3];
    for iv in &s.cts {
        for i in iv {
            let m = CtMode::ALL.iter().position(|&x| x == i.mode).expect("known mode");
            for k in MacroKind::ALL {
                let e = powers[m].get(k) * i.len() as f64 * dt;
                by_macro[k.index()] += e;
                by_mode[m] += e;
            }
        }
    }
    let seconds = s.makespan as f64 * dt;
    let energy: f64 = by_macro.iter().sum();
    let baseline = powers[1].sum() * s.cts.len() as f64 * seconds;
    PowerProfile {
        seconds,
        energy_j: energy,
        average_power_w: if seconds > 0.0 { energy / seconds } else { 0.0 },
        energy_by_macro: PerMacro {
            rram_acim: by_macro[MacroKind::RramAcim.index()],
            sram_dcim: by_macro[MacroKind::SramDcim.index()],
            scratchpad: by_macro[MacroKind::Scratchpad.index()],
            router: by_macro[MacroKind::Router.index()],
        },
        energy_by_mode: by_mode,
        baseline_energy_j: baseline,
        savings: if baseline > 0.0 { 1.0 - energy / baseline } else { 0.0 },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyMetrics {
    pub ttft_s: f64,
    pub itl_s: f64,
    pub throughput_tps: f64,
}

/// `(L_in + L_out) / (TTFT + L_out · ITL)`.
pub fn throughput(input_len: u32, output_len: u32, ttft_s: f64, itl_s: f64) -> f64 {
    (input_len + output_len) as f64 / (ttft_s + output_len as f64 * itl_s)
}

pub fn metrics_from_schedule(s: &Schedule, hw: &HardwareSpec, input_len: u32) -> LatencyMetrics {
    let dt = hw.cycle_seconds();
    let ttft = s.first_token as f64 * dt;
    let n = s.token_marks.len();
    let itl = match s.token_marks.last() {
        Some(&last) => (last - s.first_token) as f64 * dt / n as f64,
        None => 0.0,
    };
    LatencyMetrics { ttft_s: ttft, itl_s: itl, throughput_tps: throughput(input_len, n as u32, ttft, itl) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Time-stepped reference: advances one cycle at a time with explicit
    /// per-tile state machines and a single token cursor.
    fn oracle(input: &PipelineInput) -> (u64, u64, Vec<u64>) {
        #[derive(Clone, Copy, PartialEq)]
        enum St {
            Unprogrammed,
            Programming(u64),
            Ready,
        }
        let n = input.ct_count as usize;
        let mut st = vec![St::Unprogrammed; n];
        let steps: Vec<(usize, u64)> = {
            let mut v: Vec<(usize, u64)> =
                input.layers.iter().enumerate().map(|(i, l)| (i, l.handoff_prefill + l.prefill)).collect();
            for j in 0..input.decode_tokens() {
                for (i, l) in input.layers.iter().enumerate() {
                    v.push((i, l.handoff_decode + l.decode[j]));
                }
            }
            v
        };
        let start_programming = |st: &mut Vec<St>, layer: usize| {
            for k in input.layers[layer].cts.clone() {
                if st[k as usize] == St::Unprogrammed {
                    st[k as usize] = St::Programming(input.reprogram[k as usize]);
                }
            }
        };
        start_programming(&mut st, 0);
        let mut t = 0u64;
        let mut step = 0usize;
        let mut left: Option<u64> = None;
        let mut first = 0;
        let mut marks = Vec::new();
        loop {
            // settle zero-length reprogramming and finished steps at time t
            loop {
                let mut changed = false;
                for s in st.iter_mut() {
                    if *s == St::Programming(0) {
                        *s = St::Ready;
                        changed = true;
                    }
                }
                if left == Some(0) {
                    left = None;
                    let (layer, _) = steps[step];
                    if step + 1 == input.layers.len() {
                        first = t;
                    } else if step + 1 > input.layers.len() && layer + 1 == input.layers.len() {
                        marks.push(t);
                    }
                    step += 1;
                    changed = true;
                }
                if left.is_none() && step < steps.len() {
                    let (layer, dur) = steps[step];
                    if input.layers[layer].cts.clone().all(|k| st[k as usize] == St::Ready) {
                        left = Some(dur);
                        if step + 1 < input.layers.len() {
                            start_programming(&mut st, step + 1);
                        }
                        changed = true;
                    }
                }
                if !changed {
                    break;
                }
            }
            if step == steps.len() {
                return (t, first, marks);
            }
            t += 1;
            for s in st.iter_mut() {
                if let St::Programming(r) = s {
                    *r -= 1;
                }
            }
            if let Some(l) = &mut left {
                *l -= 1;
            }
        }
    }

    fn layer(cts: Range<u32>, prefill: u64, decode: Vec<u64>) -> LayerWork {
        LayerWork { cts, prefill, decode, handoff_prefill: 0, handoff_decode: 0 }
    }

    fn chain(reprogram: Vec<u64>, prefill: Vec<u64>, decode: Vec<u64>, tokens: usize) -> PipelineInput {
        PipelineInput {
            ct_count: reprogram.len() as u32,
            layers: prefill
                .iter()
                .zip(&decode)
                .enumerate()
                .map(|(k, (&p, &d))| layer(k as u32..k as u32 + 1, p, vec![d; tokens]))
                .collect(),
            reprogram,
        }
    }

    #[test]
    fn single_tile_ttft() {
        let input = chain(vec![50], vec![30], vec![4], 3);
        let s = build_schedule(&input).unwrap();
        assert_eq!(s.first_token, 50 + 30);
        assert_eq!(s.token_marks, vec![84, 88, 92]);
        let input = PipelineInput {
            ct_count: 1,
            reprogram: vec![50],
            layers: vec![layer(0..1, 30, vec![4]), layer(0..1, 20, vec![4])],
        };
        assert_eq!(build_schedule(&input).unwrap().first_token, 50 + 30 + 20);
    }

    #[test]
    fn three_tile_stall() {
        // reprogram 100 > compute 40: each later tile waits for its SRAM
        let input = chain(vec![10, 100, 100], vec![40, 40, 40], vec![5, 5, 5], 1);
        let s = build_schedule(&input).unwrap();
        // CT1 10..50; CT2 reprograms 10..110, computes 110..150; CT3 110..210, 210..250
        assert_eq!(s.first_token, 250);
        assert_eq!(s.time_in(1, CtMode::IdleGated), s.makespan - 100 - 40 - 5);
        assert_eq!(oracle(&input).1, 250);
    }

    #[test]
    fn always_computing_tile_saves_nothing() {
        let hw = HardwareSpec::default();
        let input = chain(vec![0], vec![100], vec![10], 4);
        let p = power_profile(&build_schedule(&input).unwrap(), &hw);
        assert!(p.savings.abs() < 1e-12);
    }

    #[test]
    fn savings_closed_form() {
        let hw = HardwareSpec::default();
        for n in 2..6u32 {
            let input = chain(vec![0; n as usize], vec![100; n as usize], vec![25; n as usize], 3);
            let p = power_profile(&build_schedule(&input).unwrap(), &hw);
            let full = ct_power(&hw, CtMode::Computing).sum();
            let kept = ct_power(&hw, CtMode::IdleGated).sum();
            let expect = (n - 1) as f64 / n as f64 * (1.0 - kept / full);
            assert!((p.savings - expect).abs() < 1e-12, "{n}: {} vs {expect}", p.savings);
        }
    }

    #[test]
    fn gated_tiles_draw_only_retention() {
        let hw = HardwareSpec::default();
        let p = ct_power(&hw, CtMode::IdleGated);
        assert_eq!(p.rram_acim, 0.0);
        assert_eq!(p.router, 0.0);
        assert!((p.sram_dcim - 1024.0 * hw.macro_power.retention(MacroKind::SramDcim)).abs() < 1e-12);
        assert!(p.scratchpad > 0.0);
    }

    #[test]
    fn reference_throughput_identity() {
        let t = throughput(2048, 2048, 2.533, 0.012518);
        assert!((t - 145.40).abs() < 0.01, "{t}");
        let t = throughput(1024, 1024, 0.370, 0.001708);
        assert!((t / 966.32 - 1.0).abs() < 1e-3, "{t}");
        assert!((throughput(100, 1, 0.5, 0.01) - 101.0 / 0.51).abs() < 1e-9);
    }

    #[test]
    fn gantt_export() {
        let s = build_schedule(&chain(vec![2, 3], vec![5, 5], vec![1, 1], 1)).unwrap();
        let csv = s.gantt_csv();
        assert!(csv.starts_with("ct,mode,start,end,layer\n0,REPROGRAMMING,0,2,\n0,COMPUTING,2,7,0\n"), "{csv}");
        assert_eq!(s.gantt_text(20).lines().count(), 2);
    }

    fn arb_input() -> impl Strategy<Value = PipelineInput> {
        (1usize..=4, 1usize..=3).prop_flat_map(|(cts, tokens)| {
            (
                prop::collection::vec(0u64..40, cts),
                prop::collection::vec(1u64..30, cts),
                prop::collection::vec(1u64..8, cts),
                Just(tokens),
                0u64..3,
                any::<bool>(),
            )
                .prop_map(|(r, p, d, tokens, h, share)| {
                    let mut input = chain(r, p, d, tokens);
                    for l in &mut input.layers {
                        l.handoff_prefill = h;
                        l.handoff_decode = h;
                    }
                    if share && input.ct_count > 1 {
                        // last two layers on one tile range
                        let n = input.layers.len();
                        input.layers[n - 2].cts = (n as u32 - 2)..(n as u32);
                    }
                    input
                })
        })
    }

    proptest! {
        #[test]
        fn matches_time_stepped_oracle(input in arb_input()) {
            let s = build_schedule(&input).unwrap();
            let (makespan, first, marks) = oracle(&input);
            prop_assert_eq!(s.makespan, makespan);
            prop_assert_eq!(s.first_token, first);
            prop_assert_eq!(s.token_marks, marks);
        }

        #[test]
        fn two_tiles_beat_serial(r2 in 1u64..1000, r1 in 0u64..100, c in prop::collection::vec(1u64..500, 2)) {
            let input = chain(vec![r1, r2], c.clone(), vec![3, 3], 2);
            prop_assert!(build_schedule(&input).unwrap().makespan < serial_makespan(&input));
        }

        #[test]
        fn ttft_ignores_hidden_reprogramming(input in arb_input(), scale in 0.0f64..=1.0) {
            // CTs 2..N reprogram within their predecessor's compute time
            prop_assume!(input.layers.iter().enumerate().all(|(i, l)| l.cts == (i as u32..i as u32 + 1)));
            let mut hidden = input.clone();
            for k in 1..hidden.ct_count as usize {
                let prev = &hidden.layers[k - 1];
                let bound = prev.handoff_prefill + prev.prefill;
                hidden.reprogram[k] = (bound as f64 * scale) as u64;
            }
            let mut zero = hidden.clone();
            for r in zero.reprogram.iter_mut().skip(1) {
                *r = 0;
            }
            let a = build_schedule(&hidden).unwrap();
            let b = build_schedule(&zero).unwrap();
            prop_assert_eq!(a.first_token, b.first_token);
            prop_assert_eq!(oracle(&hidden).1, b.first_token);
        }

        #[test]
        fn power_grows_with_tile_count(n in 1u32..6, extra in 1u32..4) {
            let hw = HardwareSpec::default();
            let mk = |cts: u32| {
                let mut input = chain(vec![0; 1], vec![100], vec![10], 2);
                input.ct_count = cts;
                input.reprogram = vec![0; cts as usize];
                power_profile(&build_schedule(&input).unwrap(), &hw).average_power_w
            };
            prop_assert!(mk(n + extra) >= mk(n));
        }
    }
}
