//! Whole-model runs: map, compile, time one representative layer per
//! distinct plan, schedule all layers over the compute tiles and report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::analytical::{interpolate, layer_latency, sample_positions};
use crate::arith::Timing;
use crate::config::{HardwareSpec, ModelSpec, WorkloadSpec};
use crate::error::{Error, Result};
use crate::golden::LayerWeights;
use crate::isa::{compile_layer, reprogram_cycles};
use crate::mapper::{split_across_cts, CtAssignment, DataflowSummary, MappingPlan};
use crate::metrics::SimReport;
use crate::netsim::{run_program, AuditReport, Scratchpads, SimContext, SimOptions};
use crate::srpg::{build_schedule, metrics_from_schedule, power_profile, LayerWork, PipelineInput, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Representative layers run through the cycle-level network simulator.
    Cycle,
    /// Contention-free longest path through each compiled layer.
    Analytical,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Cycle => "cycle",
            Mode::Analytical => "analytical",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cycle" => Ok(Mode::Cycle),
            "analytical" => Ok(Mode::Analytical),
            other => Err(Error::Invalid { field: "mode".into(), reason: format!("unknown mode `{other}`") }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub mode: Mode,
    /// Decode positions measured per distinct plan; the rest are interpolated.
    pub decode_samples: u32,
    pub sim: SimOptions,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { mode: Mode::Analytical, decode_samples: 32, sim: SimOptions::default() }
    }
}

pub struct RunResult {
    pub report: SimReport,
    pub schedule: Schedule,
    pub assignment: CtAssignment,
    /// Audits of every cycle-level layer run.
    pub audits: Vec<AuditReport>,
    /// Invariant violations found anywhere in the run.
    pub violations: Vec<String>,
}

struct LayerTimer<'a> {
    hw: &'a HardwareSpec,
    model: &'a ModelSpec,
    opts: &'a RunOptions,
    weights: LayerWeights<()>,
}

impl LayerTimer<'_> {
    fn cycles(&self, plan: &MappingPlan, summary: DataflowSummary) -> Result<(u64, Option<AuditReport>)> {
        match self.opts.mode {
            Mode::Analytical => Ok((layer_latency(plan, self.model, self.hw, summary)?, None)),
            Mode::Cycle => {
                let prog = compile_layer(plan, self.model, self.hw, summary)?;
                let cx = SimContext { hw: self.hw, arith: &Timing, weights: &self.weights };
                let r = run_program(&prog, &cx, Scratchpads::default(), &self.opts.sim)?;
                Ok((r.cycles, Some(r.audit)))
            }
        }
    }

    /// Prefill latency and one decode latency per generated token.
    fn layer(&self, plan: &MappingPlan, w: &WorkloadSpec, audits: &mut Vec<AuditReport>) -> Result<(u64, Vec<u64>)> {
        let (lo, hi) = (w.input_len, w.input_len + w.output_len - 1);
        let mut summaries = vec![DataflowSummary::prefill(w.input_len)];
        let positions = sample_positions(lo, hi, self.opts.decode_samples);
        summaries.extend(positions.iter().map(|&p| DataflowSummary::decode(p)));
        let mut cycles = Vec::with_capacity(summaries.len());
        for &s in &summaries {
            let (c, audit) = self.cycles(plan, s)?;
            cycles.push(c);
            audits.extend(audit);
        }
        let points: Vec<(u32, f64)> = positions.into_iter().zip(&cycles[1..]).map(|(p, &c)| (p, c as f64)).collect();
        let decode = (lo..=hi).map(|p| interpolate(&points, p).round().max(1.0) as u64).collect();
        Ok((cycles[0], decode))
    }
}

/// Tokens the smallest KV layout of `plan` can hold.
pub fn kv_capacity(plan: &MappingPlan) -> u64 {
    plan.kv_keys.capacity().min(plan.kv_values.capacity())
}

/// Cycles to move `rows` activation rows between layers on different tiles.
pub fn handoff_cycles(hw: &HardwareSpec, model: &ModelSpec, rows: u32) -> u64 {
    hw.macro_timing.inter_ct_hop_cycles as u64 * hw.flits(rows as u64 * model.hidden_dim as u64)
}

pub fn simulate(hw: &HardwareSpec, model: &ModelSpec, w: &WorkloadSpec, opts: &RunOptions) -> Result<RunResult> {
    hw.validate()?;
    model.validate()?;
    w.validate()?;
    let assignment = split_across_cts(model, hw)?;
    let mut warnings = Vec::new();
    let tokens = (w.input_len + w.output_len) as u64;
    let cap = assignment.plans.iter().map(kv_capacity).min().unwrap_or(0);
    if tokens > cap {
        match opts.mode {
            Mode::Cycle => return Err(Error::KvCapacityExhausted { token: cap, capacity: cap }),
            Mode::Analytical => warnings.push(format!(
                "KV buffers hold {cap} tokens per layer but the run needs {tokens}; latency assumes unbounded scratchpads"
            )),
        }
    }

    let weights = match opts.mode {
        Mode::Cycle => LayerWeights::shapes(model),
        Mode::Analytical => LayerWeights { num_heads: 0, head_dim: 0, lora_scale: 0.0, ffn_gated: false, matrices: BTreeMap::new() },
    };
    let timer = LayerTimer { hw, model, opts, weights };
    let mut audits = Vec::new();
    let mut by_offset: BTreeMap<u32, (u64, Vec<u64>)> = BTreeMap::new();
    for plan in &assignment.plans {
        if let std::collections::btree_map::Entry::Vacant(e) = by_offset.entry(plan.col_span().start) {
            e.insert(timer.layer(plan, w, &mut audits)?);
        }
    }

    let mut reprogram = vec![0u64; assignment.ct_count as usize];
    for plan in &assignment.plans {
        let r = reprogram_cycles(plan, hw);
        for k in assignment.layer_cts(plan.layer as usize) {
            reprogram[k as usize] = reprogram[k as usize].max(r);
        }
    }
    let site_ct = |p: &MappingPlan| p.first_ct + p.geometry.ct_of(p.input_site);
    let n = assignment.plans.len();
    let layers = assignment
        .plans
        .iter()
        .enumerate()
        .map(|(i, plan)| {
            let (prefill, decode) = by_offset[&plan.col_span().start].clone();
            let prev = &assignment.plans[(i + n - 1) % n];
            let crosses = site_ct(prev) != site_ct(plan);
            let (hp, hd) = if crosses {
                (handoff_cycles(hw, model, w.input_len), handoff_cycles(hw, model, 1))
            } else {
                (0, 0)
            };
            LayerWork {
                cts: assignment.layer_cts(i),
                prefill,
                decode,
                handoff_prefill: if i == 0 { 0 } else { hp },
                handoff_decode: hd,
            }
        })
        .collect();
    let input = PipelineInput { ct_count: assignment.ct_count, reprogram, layers };
    let schedule = build_schedule(&input)?;
    let lat = metrics_from_schedule(&schedule, hw, w.input_len);
    let power = power_profile(&schedule, hw);

    let mut report = SimReport::new(
        &model.name,
        &model.lora.target_label(),
        model.lora.rank,
        w.input_len,
        w.output_len,
        opts.mode.name(),
        assignment.ct_count,
        lat.ttft_s,
        lat.itl_s,
        power.average_power_w,
        &power.energy_by_macro,
        hw,
    )?;
    report.power_savings = power.savings;
    report.first_token_cycle = schedule.first_token;
    report.makespan_cycles = schedule.makespan;
    report.warnings = warnings;

    let mut violations = report.check();
    for a in &audits {
        violations.extend(a.violations.iter().cloned());
    }
    Ok(RunResult { report, schedule, assignment, audits, violations })
}
