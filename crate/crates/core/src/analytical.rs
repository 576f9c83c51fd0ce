//! Contention-free timing of compiled programs.
//!
//! Every micro-op takes its uncontended latency, an iteration takes as long
//! as its slowest micro-op, and an instruction starts when its last
//! dependency finishes. The program latency is the longest path through
//! this DAG, a lower bound on the cycle-level result.

use std::collections::HashMap;

use crate::config::{HardwareSpec, ModelSpec};
use crate::error::Result;
use crate::isa::{compile_layer, Instruction, Program};
use crate::mapper::{DataflowSummary, MappingPlan};
use crate::netsim::{op_latency, transfer_cycles};

/// Uncontended cycles of one iteration of `ins`.
pub fn iteration_cycles(ins: &Instruction, prog: &Program, hw: &HardwareSpec) -> u64 {
    ins.ops
        .iter()
        .map(|op| match op.dst {
            Some(dst) => transfer_cycles(&prog.geometry, op.at, dst, op.flits, hw),
            None => op_latency(ins.opcode, op, hw),
        })
        .max()
        .unwrap_or(0)
}

/// Finish time of every instruction under the contention-free model.
pub fn finish_times(prog: &Program, hw: &HardwareSpec) -> Vec<u64> {
    let mut at: HashMap<u32, u64> = HashMap::with_capacity(prog.len());
    let mut out = Vec::with_capacity(prog.len());
    for ins in &prog.instructions {
        let start = ins.deps.iter().map(|d| at[d]).max().unwrap_or(0);
        let end = start + ins.repeat as u64 * iteration_cycles(ins, prog, hw);
        at.insert(ins.tag, end);
        out.push(end);
    }
    out
}

pub fn program_latency(prog: &Program, hw: &HardwareSpec) -> u64 {
    finish_times(prog, hw).into_iter().max().unwrap_or(0)
}

pub fn layer_latency(plan: &MappingPlan, model: &ModelSpec, hw: &HardwareSpec, summary: DataflowSummary) -> Result<u64> {
    Ok(program_latency(&compile_layer(plan, model, hw, summary)?, hw))
}

/// Positions at which decode latency is measured: at most `samples` values
/// spread evenly over `lo..=hi`, always including both ends.
pub fn sample_positions(lo: u32, hi: u32, samples: u32) -> Vec<u32> {
    if hi <= lo {
        return vec![lo];
    }
    let span = (hi - lo) as u64;
    let n = (samples.max(2) as u64).min(span + 1);
    let mut v: Vec<u32> = (0..n).map(|k| lo + (k * span / (n - 1)) as u32).collect();
    v.dedup();
    v
}

/// Piecewise-linear interpolation through sorted `(position, value)` points.
pub fn interpolate(points: &[(u32, f64)], pos: u32) -> f64 {
    match points.iter().position(|&(p, _)| p >= pos) {
        Some(0) => points[0].1,
        Some(i) => {
            let (p0, v0) = points[i - 1];
            let (p1, v1) = points[i];
            v0 + (v1 - v0) * (pos - p0) as f64 / (p1 - p0) as f64
        }
        None => points.last().map_or(0.0, |p| p.1),
    }
}

/// Sum over decode positions `lo..=hi` of `f(pos)`, evaluating `f` only at
/// sampled positions and interpolating in between.
pub fn sampled_sum(lo: u32, hi: u32, samples: u32, mut f: impl FnMut(u32) -> Result<f64>) -> Result<f64> {
    let pts = sample_positions(lo, hi, samples)
        .into_iter()
        .map(|p| Ok((p, f(p)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok((lo..=hi).map(|p| interpolate(&pts, p)).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arith::{Arith, Fixed};
    use crate::golden::LayerWeights;
    use crate::mapper::map_layer;
    use crate::netsim::{layer_image, run_program, SimContext, SimOptions};

    #[test]
    fn samples_cover_both_ends() {
        assert_eq!(sample_positions(5, 5, 32), vec![5]);
        assert_eq!(sample_positions(0, 3, 32), vec![0, 1, 2, 3]);
        let s = sample_positions(1024, 2047, 32);
        assert_eq!(s.len(), 32);
        assert_eq!((s[0], *s.last().unwrap()), (1024, 2047));
    }

    #[test]
    fn interpolation_is_exact_on_lines() {
        let total = sampled_sum(10, 500, 4, |p| Ok(3.0 * p as f64 + 7.0)).unwrap();
        let exact: f64 = (10..=500).map(|p| 3.0 * p as f64 + 7.0).sum();
        assert!((total - exact).abs() < 1e-6 * exact);
    }

    #[test]
    fn lower_bound_of_cycle_simulation() {
        let m = ModelSpec::preset("toy").unwrap();
        let hw = HardwareSpec::toy();
        let plan = map_layer(&m, &hw).unwrap();
        let arith = Fixed::default();
        let w = LayerWeights::random(&m, 4).encode(&arith);
        for summary in [DataflowSummary::prefill(1), DataflowSummary::prefill(4), DataflowSummary::decode(3)] {
            let prog = compile_layer(&plan, &m, &hw, summary).unwrap();
            let x = crate::golden::random_input(summary.kv_len as usize, 16, 1).map(|v| arith.encode(v));
            let first = summary.first_pos();
            let (_, cache) = crate::golden::prefill(&arith, &w, &x.block(0, first as usize, 0, 16)).unwrap();
            let image = layer_image::<Fixed>(&plan, &x.block(first as usize, x.rows(), 0, 16), first, Some(&cache));
            let cx = SimContext { hw: &hw, arith: &arith, weights: &w };
            let cyc = run_program(&prog, &cx, image, &SimOptions::default()).unwrap().cycles;
            let ana = program_latency(&prog, &hw);
            assert!(ana <= cyc, "{summary:?}: analytical {ana} > cycle {cyc}");
            assert!(ana > 0);
        }
    }

    #[test]
    fn decode_latency_grows_with_context() {
        let m = ModelSpec::preset("toy").unwrap();
        let hw = HardwareSpec::toy();
        let plan = map_layer(&m, &hw).unwrap();
        let a = layer_latency(&plan, &m, &hw, DataflowSummary::decode(3)).unwrap();
        let b = layer_latency(&plan, &m, &hw, DataflowSummary::decode(200)).unwrap();
        assert!(b >= a);
    }
}
