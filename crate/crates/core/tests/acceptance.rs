//! End-to-end acceptance checks. Each test prints one PASS/FAIL line;
//! run with `--nocapture` to see them.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use primal_core::arith::{Arith, Fixed, Float, Timing};
use primal_core::collectives::{
    broadcast_deliveries, build_tree, reduce_along, unicast_route, KvLayout, TreePhase,
};
use primal_core::config::{HardwareSpec, LoraSpec, MatrixId, ModelSpec, WorkloadSpec};
use primal_core::golden::{self, LayerWeights};
use primal_core::isa::compile_layer;
use primal_core::mapper::{
    assemble_plan, baseline_choice, cost, layer_units, map_layer, optimize_units, pack, split_across_cts,
    DataflowSummary, MapperOptions, Shape, TileOrder,
};
use primal_core::mesh::{Coord, MeshGeometry};
use primal_core::metrics::{check_tables, efficiency, REFERENCE_ROWS};
use primal_core::netsim::{layer_image, read_output, route_cycles, run_program, Scratchpads, SimContext, SimOptions};
use primal_core::pipeline::{simulate, Mode, RunOptions};
use primal_core::srpg::{build_schedule, LayerWork, PipelineInput};
use primal_core::tensor::Tensor2D;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(id: u32, name: &str, ok: bool, detail: impl std::fmt::Display) {
    println!("criterion {id} {name}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {id} {name} failed: {detail}");
}

#[test]
fn c1_reference_efficiency() {
    let mut worst: f64 = 0.0;
    for r in &REFERENCE_ROWS {
        let eff = efficiency(r.throughput_tps, r.power_w).unwrap();
        let oracle = r.throughput_tps / r.power_w;
        assert!((eff - oracle).abs() <= 1e-12 * oracle);
        worst = worst.max((eff / r.efficiency_tpj - 1.0).abs());
    }
    let checks = check_tables().unwrap();
    let ok = checks.len() == 12 && checks.iter().all(|c| c.efficiency_ok()) && worst <= 0.005;
    verdict(1, "reference efficiency", ok, format!("12 rows, max rel err {:.4}%", worst * 100.0));
}

#[test]
fn c2_throughput_identity() {
    let mut worst: f64 = 0.0;
    for r in &REFERENCE_ROWS {
        let (lin, lout) = (r.input_len as f64, r.output_len as f64);
        let thr = (lin + lout) / (r.ttft_s + lout * r.itl_ms / 1000.0);
        worst = worst.max((thr / r.throughput_tps - 1.0).abs());
    }
    let ok = worst <= 0.01 && check_tables().unwrap().iter().all(|c| c.throughput_ok());
    verdict(2, "throughput identity", ok, format!("12 rows, max rel err {:.3}%", worst * 100.0));
}

#[test]
fn c3_golden_equivalence() {
    let t0 = Instant::now();
    let m = ModelSpec::preset("toy").unwrap();
    let hw = HardwareSpec::toy();
    assert_eq!((hw.mesh_rows, hw.mesh_cols, m.hidden_dim, m.num_heads), (4, 4, 16, 2));
    assert_eq!((m.lora.rank, m.lora.targets.clone()), (2, vec![MatrixId::Q, MatrixId::V]));
    let arith = Fixed::default();
    let plan = map_layer(&m, &hw).unwrap();
    let summary = DataflowSummary::prefill(4);
    let prog = compile_layer(&plan, &m, &hw, summary).unwrap();
    let seeds = 24;
    let mut mismatched = Vec::new();
    for seed in 0..seeds {
        let w = LayerWeights::random(&m, seed).encode(&arith);
        let x = golden::random_input(4, 16, seed.wrapping_mul(31) + 7).map(|v| arith.encode(v));
        let want = golden::layer_forward(&arith, &w, &x).unwrap();
        let cx = SimContext { hw: &hw, arith: &arith, weights: &w };
        let r = run_program(&prog, &cx, layer_image::<Fixed>(&plan, &x, 0, None), &SimOptions::default()).unwrap();
        let got = read_output(&plan, &r.scratchpads, 0, 4, 16).unwrap();
        if got != want || !r.audit.is_clean() {
            mismatched.push(seed);
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let ok = mismatched.is_empty() && secs < 30.0;
    verdict(3, "golden equivalence", ok, format!("{seeds} seeds bit-exact, mismatches {mismatched:?}, {secs:.2} s"));
}

#[test]
fn c4_lora_merge() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst: f64 = 0.0;
    let mut zero_rank = 0;
    for case in 0..100 {
        let d_out = rng.gen_range(1..=24);
        let d_in = rng.gen_range(1..=24);
        let r = if case % 10 == 0 { 0 } else { rng.gen_range(1..=8) };
        zero_rank += usize::from(r == 0);
        let s: f64 = rng.gen_range(-2.0..2.0);
        let mut mat = |rows: usize, cols: usize| Tensor2D::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0));
        let (w, b, a) = (mat(d_out, d_in), mat(d_out, r), mat(r, d_in));
        let x: Vec<f64> = (0..d_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = golden::lora_smac(&Float, &w, &b, &a, s, &x).unwrap();
        // dense merge W' = W + s·B·A, then W'·x
        let merged: Vec<f64> = (0..d_out)
            .map(|i| {
                (0..d_in)
                    .map(|j| {
                        let ba: f64 = (0..r).map(|k| b.get(i, k) * a.get(k, j)).sum();
                        (w.get(i, j) + s * ba) * x[j]
                    })
                    .sum()
            })
            .collect();
        let diff = got.iter().zip(&merged).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        let norm = merged.iter().map(|q| q * q).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        worst = worst.max(diff / norm);
    }
    verdict(4, "lora merge", worst <= 1e-9 && zero_rank > 0, format!("100 cases ({zero_rank} with r=0), max rel err {worst:.2e}"));
}

/// Per-layer figures for a one-layer-per-tile pipeline.
#[derive(Clone)]
struct Toy {
    reprogram: Vec<u64>,
    prefill: Vec<u64>,
    handoff: Vec<u64>,
    decode: Vec<Vec<u64>>,
    handoff_decode: Vec<u64>,
}

impl Toy {
    fn input(&self) -> PipelineInput {
        let n = self.reprogram.len();
        PipelineInput {
            ct_count: n as u32,
            reprogram: self.reprogram.clone(),
            layers: (0..n)
                .map(|i| LayerWork {
                    cts: i as u32..i as u32 + 1,
                    prefill: self.prefill[i],
                    decode: self.decode[i].clone(),
                    handoff_prefill: self.handoff[i],
                    handoff_decode: self.handoff_decode[i],
                })
                .collect(),
        }
    }

    /// First-token time when the reprogramming of tile `i` starts `delay[i]`
    /// cycles after layer `i - 1` starts.
    fn ttft_with(&self, delay: &[u64]) -> u64 {
        let mut ready = self.reprogram[0];
        let mut end = 0;
        for i in 0..self.reprogram.len() {
            let start = end.max(ready);
            end = start + self.handoff[i] + self.prefill[i];
            if i + 1 < self.reprogram.len() {
                ready = start + delay[i + 1] + self.reprogram[i + 1];
            }
        }
        end
    }

    fn decode_total(&self) -> u64 {
        (0..self.reprogram.len())
            .map(|i| self.decode[i].iter().map(|d| d + self.handoff_decode[i]).sum::<u64>())
            .sum()
    }

    /// Exhaustive minimum over every admissible reprogramming delay.
    fn brute_force(&self) -> (u64, u64) {
        let n = self.reprogram.len();
        let horizon: u64 = self.reprogram.iter().chain(&self.prefill).chain(&self.handoff).sum();
        let mut delay = vec![0u64; n];
        let mut best = u64::MAX;
        loop {
            best = best.min(self.ttft_with(&delay));
            let mut k = 1;
            while k < n {
                delay[k] += 1;
                if delay[k] <= horizon {
                    break;
                }
                delay[k] = 0;
                k += 1;
            }
            if k == n {
                break;
            }
        }
        (best, best + self.decode_total())
    }
}

fn random_toy(rng: &mut ChaCha8Rng, n: usize) -> Toy {
    let tokens = rng.gen_range(1..=3);
    Toy {
        reprogram: (0..n).map(|_| rng.gen_range(1..=6)).collect(),
        prefill: (0..n).map(|_| rng.gen_range(1..=6)).collect(),
        handoff: (0..n).map(|i| if i == 0 { 0 } else { rng.gen_range(0..=2) }).collect(),
        decode: (0..n).map(|_| (0..tokens).map(|_| rng.gen_range(1..=4)).collect()).collect(),
        handoff_decode: (0..n).map(|_| rng.gen_range(0..=1)).collect(),
    }
}

#[test]
fn c5_srpg_overlap() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut failures = Vec::new();

    // (a) two tiles always beat serial reprogramming
    let mut two_tile_cases = 0;
    for r0 in [1u64, 2, 7, 100, 1_000_000] {
        for r1 in [1u64, 3, 50, 1_000_000] {
            for p in [1u64, 5, 40] {
                let toy = Toy {
                    reprogram: vec![r0, r1],
                    prefill: vec![p, p + 1],
                    handoff: vec![0, 2],
                    decode: vec![vec![3, 4], vec![2, 5]],
                    handoff_decode: vec![1, 1],
                };
                let s = build_schedule(&toy.input()).unwrap();
                let serial = r0 + r1 + (p + (2 + p + 1)) + toy.decode_total();
                two_tile_cases += 1;
                if s.makespan >= serial || (s.first_token, s.makespan) != toy.brute_force() {
                    failures.push(format!("2-tile r=({r0},{r1}) p={p}: {} vs serial {serial}", s.makespan));
                }
            }
        }
    }

    // brute-force agreement on 2..=4 tiles
    let mut random_cases = 0;
    for _ in 0..60 {
        let n = rng.gen_range(2..=4);
        let toy = random_toy(&mut rng, n);
        let s = build_schedule(&toy.input()).unwrap();
        random_cases += 1;
        if (s.first_token, s.makespan) != toy.brute_force() {
            failures.push(format!("{n} tiles: schedule ({}, {}) vs oracle {:?}", s.first_token, s.makespan, toy.brute_force()));
        }
    }

    // (b) reprogramming of tiles 2..N hidden within the previous layer's run
    let mut hidden_cases = 0;
    for _ in 0..40 {
        let n = rng.gen_range(2..=4);
        let toy = random_toy(&mut rng, n);
        let reference: u64 = toy.reprogram[0] + (0..n).map(|i| toy.handoff[i] + toy.prefill[i]).sum::<u64>();
        let bounds: Vec<u64> = (1..n).map(|k| toy.handoff[k - 1] + toy.prefill[k - 1]).collect();
        // every combination of reprogram times within the bounds
        let mut r: Vec<u64> = vec![0; n - 1];
        loop {
            let mut t = toy.clone();
            t.reprogram[1..].copy_from_slice(&r);
            let s = build_schedule(&t.input()).unwrap();
            hidden_cases += 1;
            if s.first_token != reference || s.first_token != t.brute_force().0 {
                failures.push(format!("hidden reprogram {r:?} moved first token to {}", s.first_token));
            }
            let mut k = 0;
            while k < r.len() {
                r[k] += 1;
                if r[k] <= bounds[k] {
                    break;
                }
                r[k] = 0;
                k += 1;
            }
            if k == r.len() {
                break;
            }
        }
        // one cycle past the bound becomes visible
        let mut t = toy.clone();
        t.reprogram[1] = bounds[0] + 1;
        if build_schedule(&t.input()).unwrap().first_token <= reference {
            failures.push("bound is not tight".into());
        }
    }

    verdict(
        5,
        "srpg overlap",
        failures.is_empty(),
        format!(
            "{two_tile_cases} two-tile, {random_cases} random and {hidden_cases} hidden-reprogram cases vs brute force; failures {failures:?}"
        ),
    );
}

fn synthetic(name: &str, hidden: u32, layers: u32) -> ModelSpec {
    ModelSpec {
        name: name.into(),
        num_layers: layers,
        hidden_dim: hidden,
        num_heads: hidden / 128,
        head_dim: 128,
        ffn_dim: 4 * hidden,
        ffn_gated: false,
        lora: LoraSpec { rank: 8, targets: vec![MatrixId::Q, MatrixId::V], scale: 1.0 },
    }
}

#[test]
fn c6_sublinear_power() {
    let t0 = Instant::now();
    let hw = HardwareSpec::default();
    let w = WorkloadSpec::new(128, 128);
    let models = [synthetic("syn-1x", 1024, 8), synthetic("syn-8x", 2048, 16), synthetic("syn-13x", 2048, 26)];
    let base = models[0].weight_params() as f64;
    let mut pts = Vec::new();
    let mut detail = String::new();
    for m in &models {
        let r = simulate(&hw, m, &w, &RunOptions::default()).unwrap();
        assert!(r.violations.is_empty(), "{:?}", r.violations);
        let scale = m.weight_params() as f64 / base;
        detail += &format!("{} {:.1}x {} tiles {:.3} W; ", m.name, scale, r.report.ct_count, r.report.average_power_w);
        pts.push((scale.ln(), r.report.average_power_w.ln()));
    }
    let n = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    let secs = t0.elapsed().as_secs_f64();
    let ratios_ok = (models[1].weight_params() as f64 / base - 8.0).abs() < 0.5
        && (models[2].weight_params() as f64 / base - 13.0).abs() < 0.5;
    let ok = slope < 1.0 && secs < 120.0 && ratios_ok;
    verdict(6, "sub-linear power", ok, format!("{detail}log-log slope {slope:.3}, {secs:.1} s"));
}

#[test]
fn c7_collectives() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut problems = Vec::new();

    // broadcast and reduction over random member sets
    for _ in 0..200 {
        let geom = MeshGeometry::single(rng.gen_range(1..=8), rng.gen_range(1..=8));
        let all: Vec<Coord> = (0..geom.router_count()).map(|i| geom.coord(i)).collect();
        let root = all[rng.gen_range(0..all.len())];
        // grow a connected member set from the root
        let mut members = BTreeSet::from([root]);
        for _ in 0..rng.gen_range(0..all.len()) {
            let from: Vec<Coord> = members.iter().copied().collect();
            let c = from[rng.gen_range(0..from.len())];
            let d = primal_core::mesh::Dir::ALL[rng.gen_range(0..4)];
            if let Some(n) = geom.neighbor(c, d) {
                members.insert(n);
            }
        }
        let tree = build_tree(&members, root, &geom, TreePhase::Broadcast).unwrap();
        let got = broadcast_deliveries(&tree);
        if members.iter().any(|m| got.get(m) != Some(&1)) || got.len() != members.len() {
            problems.push(format!("broadcast deliveries {got:?}"));
        }
        for (p, c) in tree.edges() {
            if p.manhattan(c) != 1 {
                problems.push(format!("tree edge {p}->{c} is not a mesh link"));
            }
        }
        let contributions: BTreeMap<Coord, i64> =
            members.iter().map(|&c| (c, rng.gen_range(-(1i64 << 40)..(1i64 << 40)))).collect();
        let want: i128 = contributions.values().map(|&v| v as i128).sum();
        if reduce_along(&tree, &contributions) as i128 != want {
            problems.push("reduction not exact".into());
        }
    }

    // cyclic KV placement stays balanced at every length up to 10,000
    for sites in [1usize, 2, 3, 7, 16, 33, 64] {
        let coords: Vec<Coord> = (0..sites as u32).map(|i| Coord::new(i / 8, i % 8)).collect();
        let mut layout = KvLayout::new(coords.clone(), 10_000);
        let mut counts = vec![0u64; sites];
        for t in 0..10_000u64 {
            let c = layout.append(t).unwrap();
            counts[coords.iter().position(|&x| x == c).unwrap()] += 1;
            let spread = counts.iter().max().unwrap() - counts.iter().min().unwrap();
            if spread > 1 || counts != layout.loads(t + 1) {
                problems.push(format!("{sites} sites unbalanced after {} tokens", t + 1));
                break;
            }
        }
    }

    // hop counts against a Manhattan oracle
    let hw = HardwareSpec::default();
    let geom = MeshGeometry::single(32, 32);
    for _ in 0..100 {
        let a = Coord::new(rng.gen_range(0..32), rng.gen_range(0..32));
        let b = Coord::new(rng.gen_range(0..32), rng.gen_range(0..32));
        let manhattan = (a.row as i64 - b.row as i64).unsigned_abs() + (a.col as i64 - b.col as i64).unsigned_abs();
        let route = unicast_route(a, b);
        let steps_ok = std::iter::once(a).chain(route.iter().copied()).zip(&route).all(|(p, q)| p.manhattan(*q) == 1);
        let cycles = route_cycles(&geom, a, b, &hw);
        if route.len() as u64 != manhattan
            || route.last().is_some_and(|&l| l != b)
            || !steps_ok
            || cycles != manhattan * hw.macro_timing.hop_cycles as u64
        {
            problems.push(format!("route {a}->{b}: {} hops vs {manhattan}", route.len()));
        }
    }

    verdict(
        7,
        "collectives",
        problems.is_empty(),
        format!("200 trees, 7 KV site counts x 10,000 tokens, 100 routes; problems {problems:?}"),
    );
}

/// Every intra-matrix shape with an exact tile count that fits the mesh.
fn all_shapes(tiles: u32, hw: &HardwareSpec) -> Vec<Shape> {
    (1..=tiles)
        .filter(|h| tiles.is_multiple_of(*h) && *h <= hw.mesh_rows && tiles / h <= hw.mesh_cols)
        .map(|h| Shape { height: h, width: tiles / h })
        .collect()
}

#[test]
fn c8_mapper() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let opts = MapperOptions::default();
    let mut compared = 0;
    let mut mismatches = Vec::new();
    while compared < 40 {
        let (rows, cols) = (rng.gen_range(2..=4), rng.gen_range(2..=4));
        let xbar = [2u32, 4][rng.gen_range(0..2)];
        let hw = HardwareSpec {
            mesh_rows: rows,
            mesh_cols: cols,
            pe_count: rows * cols,
            rram_rows: xbar,
            rram_cols: xbar,
            sram_rows: xbar,
            sram_cols: xbar,
            ..HardwareSpec::toy()
        };
        let heads = rng.gen_range(1..=2);
        let hidden = heads * [2u32, 4][rng.gen_range(0..2)];
        let m = ModelSpec {
            name: "tiny".into(),
            num_layers: 1,
            hidden_dim: hidden,
            num_heads: heads,
            head_dim: hidden / heads,
            ffn_dim: 0,
            ffn_gated: false,
            lora: LoraSpec { rank: 1, targets: vec![MatrixId::Q], scale: 1.0 },
        };
        let Ok(all) = layer_units(&m, &hw) else { continue };
        let k = rng.gen_range(1..=3).min(all.len());
        let units = &all[..k];
        let shapes: Vec<Vec<(Shape, TileOrder)>> = units
            .iter()
            .map(|u| {
                let (tr, tc) = u.tiles(&hw);
                all_shapes(tr * tc, &hw)
                    .into_iter()
                    .flat_map(|s| [(s, TileOrder::RowMajor), (s, TileOrder::ColMajor)])
                    .filter(|&(_, o)| o == TileOrder::RowMajor || (tr > 1 && tc > 1))
                    .collect()
            })
            .collect();
        if shapes.iter().any(|s| s.is_empty()) {
            continue;
        }
        // exhaustive minimum
        let mut best: Option<f64> = None;
        let mut idx = vec![0usize; k];
        'outer: loop {
            let choice: Vec<_> = idx.iter().zip(&shapes).map(|(&i, s)| s[i]).collect();
            if let Some(p) = pack(units, &choice, &hw, 0, 1) {
                let c = cost(&assemble_plan(0, p, &m, &hw), &m, &hw, opts.summary);
                best = Some(best.map_or(c, |b: f64| b.min(c)));
            }
            for d in 0..k {
                idx[d] += 1;
                if idx[d] < shapes[d].len() {
                    continue 'outer;
                }
                idx[d] = 0;
            }
            break;
        }
        let chosen = optimize_units(0, units, &m, &hw, 0, 1, &opts);
        match (best, chosen) {
            (None, Err(_)) => continue,
            (Some(b), Ok(plan)) => {
                compared += 1;
                if plan.cost != b {
                    mismatches.push(format!("{rows}x{cols} mesh, {k} matrices: chose {} vs min {b}", plan.cost));
                }
            }
            (b, c) => mismatches.push(format!("feasibility differs: oracle {b:?}, mapper ok {}", c.is_ok())),
        }
    }

    // default shapes against the naive row-major layout
    let hw = HardwareSpec::default();
    let mut vs_baseline = Vec::new();
    for name in ["toy", "llama3.2-1b", "llama3-8b", "llama2-13b"] {
        let m = ModelSpec::preset(name).unwrap();
        let hw = if name == "toy" { HardwareSpec::toy() } else { hw.clone() };
        let a = split_across_cts(&m, &hw).unwrap();
        let plan = &a.plans[0];
        let units: Vec<_> = plan.placements.iter().map(|p| p.unit).collect();
        let naive: Vec<_> = units.iter().map(|u| baseline_choice(u, &hw)).collect();
        let recomputed = cost(plan, &m, &hw, opts.summary);
        let baseline = pack(&units, &naive, &hw, 0, hw.max_cts).map(|p| cost(&assemble_plan(0, p, &m, &hw), &m, &hw, opts.summary));
        let ok = recomputed == plan.cost && baseline.is_none_or(|b| plan.cost <= b);
        vs_baseline.push(format!("{name} {:.3e} vs {}", plan.cost, baseline.map_or("n/a".into(), |b| format!("{b:.3e}"))));
        if !ok {
            mismatches.push(format!("{name}: chosen {} above baseline {baseline:?}", plan.cost));
        }
    }

    verdict(
        8,
        "mapper",
        mismatches.is_empty(),
        format!("{compared} exhaustive comparisons; vs row-major: {}; problems {mismatches:?}", vs_baseline.join(", ")),
    );
}

#[test]
fn c9_determinism_and_conservation() {
    let mut problems = Vec::new();

    // functional toy layer, several seeds and both phases
    let m = ModelSpec::preset("toy").unwrap();
    let hw = HardwareSpec::toy();
    let plan = map_layer(&m, &hw).unwrap();
    let arith = Fixed::default();
    let mut runs = 0;
    for (seed, summary) in [(1, DataflowSummary::prefill(4)), (2, DataflowSummary::decode(3)), (3, DataflowSummary::prefill(2))] {
        let w = LayerWeights::random(&m, seed).encode(&arith);
        let x = golden::random_input(summary.kv_len as usize, 16, seed).map(|v| arith.encode(v));
        let first = summary.first_pos() as usize;
        let (_, cache) = golden::prefill(&arith, &w, &x.block(0, first, 0, 16)).unwrap();
        let image = || layer_image::<Fixed>(&plan, &x.block(first, x.rows(), 0, 16), first as u32, Some(&cache));
        let prog = compile_layer(&plan, &m, &hw, summary).unwrap();
        let cx = SimContext { hw: &hw, arith: &arith, weights: &w };
        let a = run_program(&prog, &cx, image(), &SimOptions::default()).unwrap();
        let b = run_program(&prog, &cx, image(), &SimOptions::default()).unwrap();
        runs += 2;
        if a.cycles != b.cycles || a.ledger != b.ledger || a.scratchpads != b.scratchpads || a.counters != b.counters {
            problems.push(format!("seed {seed}: runs differ"));
        }
        check_run(&a.audit, a.ledger.is_balanced(), &mut problems);
    }

    // a full-size layer on the timing-only datapath
    let big = ModelSpec::preset("llama3.2-1b").unwrap();
    let dhw = HardwareSpec::default();
    let bplan = &split_across_cts(&big, &dhw).unwrap().plans[0];
    let prog = compile_layer(bplan, &big, &dhw, DataflowSummary::decode(8)).unwrap();
    let shapes = LayerWeights::shapes(&big);
    let cx = SimContext { hw: &dhw, arith: &Timing, weights: &shapes };
    let a = run_program(&prog, &cx, Scratchpads::default(), &SimOptions::default()).unwrap();
    let b = run_program(&prog, &cx, Scratchpads::default(), &SimOptions::default()).unwrap();
    runs += 2;
    if a.cycles != b.cycles || a.ledger != b.ledger || a.counters != b.counters {
        problems.push("1B decode layer: runs differ".into());
    }
    check_run(&a.audit, a.ledger.is_balanced(), &mut problems);

    // whole pipeline in cycle mode
    let mut two = m.clone();
    two.num_layers = 2;
    let opts = RunOptions { mode: Mode::Cycle, ..Default::default() };
    let p = simulate(&hw, &two, &WorkloadSpec::new(4, 3), &opts).unwrap();
    let q = simulate(&hw, &two, &WorkloadSpec::new(4, 3), &opts).unwrap();
    runs += 2;
    if p.report != q.report || p.schedule != q.schedule || !p.violations.is_empty() {
        problems.push(format!("pipeline runs differ or report violations {:?}", p.violations));
    }
    for audit in &p.audits {
        check_run(audit, true, &mut problems);
    }

    verdict(
        9,
        "determinism and conservation",
        problems.is_empty(),
        format!("{runs} paired runs, 1B decode layer {} cycles / {} flit hops; problems {problems:?}", a.cycles, a.counters.flit_hops),
    );
}

fn check_run(audit: &primal_core::netsim::AuditReport, balanced: bool, problems: &mut Vec<String>) {
    for (phase, (injected, consumed)) in &audit.phase_flits {
        if injected != consumed {
            problems.push(format!("{phase:?}: {injected} flits injected, {consumed} consumed"));
        }
    }
    if audit.max_fifo_occupancy > audit.fifo_depth {
        problems.push(format!("FIFO occupancy {} above depth {}", audit.max_fifo_occupancy, audit.fifo_depth));
    }
    if !audit.is_clean() {
        problems.extend(audit.violations.iter().cloned());
    }
    if !balanced {
        problems.push("energy ledger does not balance".into());
    }
}
