//! End-to-end metrics, report serialization and the published benchmark
//! rows used as self-consistency fixtures.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{HardwareSpec, MacroKind, PerMacro};
use crate::error::{Error, Result};

/// Tokens per joule.
pub fn efficiency(throughput_tps: f64, power_w: f64) -> Result<f64> {
    if power_w.is_nan() || power_w <= 0.0 {
        return Err(Error::NonPositivePower(power_w));
    }
    Ok(throughput_tps / power_w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroShare {
    pub macro_kind: MacroKind,
    pub value: f64,
    pub percent: f64,
}

fn shares(v: &PerMacro) -> Vec<MacroShare> {
    let total = v.sum();
    MacroKind::ALL
        .iter()
        .map(|&k| MacroShare {
            macro_kind: k,
            value: v.get(k),
            percent: if total > 0.0 { 100.0 * v.get(k) / total } else { 0.0 },
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub model: String,
    pub lora_targets: String,
    pub rank: u32,
    pub input_len: u32,
    pub output_len: u32,
    pub mode: String,
    pub ct_count: u32,
    pub ttft_s: f64,
    pub itl_ms: f64,
    pub throughput_tps: f64,
    pub average_power_w: f64,
    pub efficiency_tpj: f64,
    /// Fraction of energy saved against keeping every tile fully powered.
    pub power_savings: f64,
    pub energy_j: f64,
    /// Joules per macro kind.
    pub energy_breakdown: Vec<MacroShare>,
    /// mm² per macro kind over all tiles.
    pub area_breakdown: Vec<MacroShare>,
    pub first_token_cycle: u64,
    pub makespan_cycles: u64,
    pub warnings: Vec<String>,
}

impl SimReport {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: &str,
        lora_targets: &str,
        rank: u32,
        input_len: u32,
        output_len: u32,
        mode: &str,
        ct_count: u32,
        ttft_s: f64,
        itl_s: f64,
        average_power_w: f64,
        energy: &PerMacro,
        hw: &HardwareSpec,
    ) -> Result<Self> {
        let throughput = crate::srpg::throughput(input_len, output_len, ttft_s, itl_s);
        let pairs = hw.pe_count as f64 * ct_count as f64;
        let area = PerMacro {
            rram_acim: hw.macro_area.rram_acim * pairs,
            sram_dcim: hw.macro_area.sram_dcim * pairs,
            scratchpad: hw.macro_area.scratchpad * pairs,
            router: hw.macro_area.router * pairs,
        };
        Ok(Self {
            model: model.to_string(),
            lora_targets: lora_targets.to_string(),
            rank,
            input_len,
            output_len,
            mode: mode.to_string(),
            ct_count,
            ttft_s,
            itl_ms: itl_s * 1e3,
            throughput_tps: throughput,
            average_power_w,
            efficiency_tpj: efficiency(throughput, average_power_w)?,
            power_savings: 0.0,
            energy_j: energy.sum(),
            energy_breakdown: shares(energy),
            area_breakdown: shares(&area),
            first_token_cycle: 0,
            makespan_cycles: 0,
            warnings: Vec::new(),
        })
    }

    pub fn context_label(&self) -> String {
        format!("{}/{}", self.input_len, self.output_len)
    }

    /// Invariant violations; empty for a well-formed report.
    pub fn check(&self) -> Vec<String> {
        let mut v = Vec::new();
        let expect = self.throughput_tps / self.average_power_w;
        if !((self.efficiency_tpj - expect).abs() <= 1e-9 * expect.abs()) {
            v.push(format!("efficiency {} != throughput/power {expect}", self.efficiency_tpj));
        }
        let values = [
            ("ttft_s", self.ttft_s),
            ("itl_ms", self.itl_ms),
            ("throughput_tps", self.throughput_tps),
            ("average_power_w", self.average_power_w),
            ("energy_j", self.energy_j),
        ];
        for (name, x) in values {
            if !(x >= 0.0 && x.is_finite()) {
                v.push(format!("{name} = {x} is not a nonnegative number"));
            }
        }
        for (name, b) in [("energy", &self.energy_breakdown), ("area", &self.area_breakdown)] {
            if b.iter().any(|s| s.value < 0.0) {
                v.push(format!("negative {name} share"));
            }
            let total: f64 = b.iter().map(|s| s.percent).sum();
            if b.iter().any(|s| s.value > 0.0) && (total - 100.0).abs() > 0.1 {
                v.push(format!("{name} breakdown sums to {total}%"));
            }
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Format {
    Json,
    Csv,
    Table,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            "table" => Ok(Format::Table),
            other => Err(Error::UnknownFormat(other.to_string())),
        }
    }
}

pub const CSV_HEADER: &str = "model,lora_targets,rank,input_len,output_len,mode,ct_count,ttft_s,itl_ms,\
throughput_tps,average_power_w,efficiency_tpj,power_savings,energy_j,\
energy_rram_acim_j,energy_sram_dcim_j,energy_scratchpad_j,energy_router_j";

fn csv_row(r: &SimReport) -> String {
    let mut s = format!(
        "{},\"{}\",{},{},{},{},{},{:.6},{:.6},{:.4},{:.6},{:.6},{:.6},{:.6e}",
        r.model,
        r.lora_targets,
        r.rank,
        r.input_len,
        r.output_len,
        r.mode,
        r.ct_count,
        r.ttft_s,
        r.itl_ms,
        r.throughput_tps,
        r.average_power_w,
        r.efficiency_tpj,
        r.power_savings,
        r.energy_j
    );
    for k in MacroKind::ALL {
        let e = r.energy_breakdown.iter().find(|m| m.macro_kind == k).map_or(0.0, |m| m.value);
        let _ = write!(s, ",{e:.6e}");
    }
    s
}

fn table(reports: &[SimReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<14} {:<10} {:>11} {:>11} {:>9} {:>11} {:>9} {:>9} {:>5}",
        "Model", "LoRA", "Context", "Thr(tok/s)", "Power(W)", "Eff(tok/J)", "TTFT(s)", "ITL(ms)", "CTs"
    );
    for r in reports {
        let lora = format!("{} r{}", r.lora_targets, r.rank);
        let _ = writeln!(
            s,
            "{:<14} {:<10} {:>11} {:>11.2} {:>9.2} {:>11.2} {:>9.3} {:>9.3} {:>5}",
            r.model,
            lora,
            r.context_label(),
            r.throughput_tps,
            r.average_power_w,
            r.efficiency_tpj,
            r.ttft_s,
            r.itl_ms,
            r.ct_count
        );
    }
    if let [r] = reports {
        let _ = writeln!(s, "\n{:<12} {:>12} {:>7} {:>12} {:>7}", "Macro", "Energy(J)", "%", "Area(mm2)", "%");
        for (e, a) in r.energy_breakdown.iter().zip(&r.area_breakdown) {
            let _ = writeln!(
                s,
                "{:<12} {:>12.4e} {:>6.1}% {:>12.2} {:>6.1}%",
                e.macro_kind.name(),
                e.value,
                e.percent,
                a.value,
                a.percent
            );
        }
        let _ = writeln!(s, "power savings vs ungated: {:.1}%", 100.0 * r.power_savings);
        for w in &r.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
    }
    s
}

pub fn emit_report(r: &SimReport, format: Format) -> Result<String> {
    emit_reports(std::slice::from_ref(r), format)
}

/// Serializes reports: a JSON object (one report) or array, CSV with
/// [`CSV_HEADER`], or an aligned text table.
pub fn emit_reports(reports: &[SimReport], format: Format) -> Result<String> {
    Ok(match format {
        Format::Json => {
            let text = match reports {
                [r] => serde_json::to_string_pretty(r),
                _ => serde_json::to_string_pretty(reports),
            };
            text.map_err(Error::Parse)? + "\n"
        }
        Format::Csv => {
            let mut s = String::from(CSV_HEADER);
            s.push('\n');
            for r in reports {
                s.push_str(&csv_row(r));
                s.push('\n');
            }
            s
        }
        Format::Table => table(reports),
    })
}

/// One published benchmark row (rank-8 adapters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub model: &'static str,
    pub lora: &'static str,
    pub input_len: u32,
    pub output_len: u32,
    pub throughput_tps: f64,
    pub power_w: f64,
    pub efficiency_tpj: f64,
    pub ttft_s: f64,
    pub itl_ms: f64,
}

const fn row(
    model: &'static str,
    lora: &'static str,
    len: u32,
    throughput_tps: f64,
    power_w: f64,
    efficiency_tpj: f64,
    ttft_s: f64,
    itl_ms: f64,
) -> ReferenceRow {
    ReferenceRow { model, lora, input_len: len, output_len: len, throughput_tps, power_w, efficiency_tpj, ttft_s, itl_ms }
}

pub const REFERENCE_ROWS: [ReferenceRow; 12] = [
    row("llama3.2-1b", "Q", 1024, 966.32, 2.23, 433.33, 0.370, 1.708),
    row("llama3.2-1b", "Q", 2048, 565.46, 2.23, 253.57, 1.192, 2.955),
    row("llama3.2-1b", "Q,V", 1024, 963.47, 2.23, 432.04, 0.373, 1.711),
    row("llama3.2-1b", "Q,V", 2048, 564.48, 2.23, 253.13, 1.199, 2.958),
    row("llama3-8b", "Q", 1024, 308.76, 9.58, 32.23, 0.710, 5.726),
    row("llama3-8b", "Q", 2048, 221.37, 9.58, 23.11, 2.012, 8.052),
    row("llama3-8b", "Q,V", 1024, 307.89, 9.58, 32.12, 0.782, 5.738),
    row("llama3-8b", "Q,V", 2048, 220.77, 9.58, 23.04, 2.037, 8.065),
    row("llama2-13b", "Q", 1024, 191.68, 14.76, 12.99, 0.962, 9.494),
    row("llama2-13b", "Q", 2048, 145.81, 14.76, 9.88, 2.494, 12.499),
    row("llama2-13b", "Q,V", 1024, 190.98, 14.76, 12.94, 0.982, 9.513),
    row("llama2-13b", "Q,V", 2048, 145.40, 14.76, 9.85, 2.533, 12.518),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableCheck {
    pub label: String,
    pub efficiency: f64,
    pub efficiency_rel_err: f64,
    pub throughput: f64,
    pub throughput_rel_err: f64,
}

impl TableCheck {
    pub fn efficiency_ok(&self) -> bool {
        self.efficiency_rel_err <= 0.005
    }

    pub fn throughput_ok(&self) -> bool {
        self.throughput_rel_err <= 0.01
    }
}

/// Recomputes efficiency and throughput of every reference row from its
/// other columns.
pub fn check_tables() -> Result<Vec<TableCheck>> {
    REFERENCE_ROWS
        .iter()
        .map(|r| {
            let eff = efficiency(r.throughput_tps, r.power_w)?;
            let thr = crate::srpg::throughput(r.input_len, r.output_len, r.ttft_s, r.itl_ms * 1e-3);
            Ok(TableCheck {
                label: format!("{} {} {}/{}", r.model, r.lora, r.input_len, r.output_len),
                efficiency: eff,
                efficiency_rel_err: (eff / r.efficiency_tpj - 1.0).abs(),
                throughput: thr,
                throughput_rel_err: (thr / r.throughput_tps - 1.0).abs(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SimReport {
        let hw = HardwareSpec::default();
        let e = PerMacro { rram_acim: 1.0, sram_dcim: 6.0, scratchpad: 0.5, router: 0.5 };
        SimReport::new("toy", "Q,V", 2, 4, 4, "cycle", 1, 0.001, 0.0002, 1.5, &e, &hw).unwrap()
    }

    #[test]
    fn efficiency_examples() {
        assert!((efficiency(145.40, 14.76).unwrap() - 9.85).abs() < 0.005);
        assert!((efficiency(966.32, 2.23).unwrap() - 433.33).abs() < 0.005);
        assert_eq!(efficiency(7.5, 1.0).unwrap(), 7.5);
        assert!(matches!(efficiency(1.0, 0.0), Err(Error::NonPositivePower(_))));
        assert!(efficiency(1.0, -2.0).is_err());
    }

    #[test]
    fn report_is_consistent() {
        let r = sample();
        assert!(r.check().is_empty(), "{:?}", r.check());
        assert!((r.throughput_tps - 8.0 / (0.001 + 4.0 * 0.0002)).abs() < 1e-9);
    }

    #[test]
    fn json_round_trip() {
        let r = sample();
        let text = emit_report(&r, Format::Json).unwrap();
        let back: SimReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn csv_header_is_fixed() {
        let text = emit_report(&sample(), Format::Csv).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "model,lora_targets,rank,input_len,output_len,mode,ct_count,ttft_s,itl_ms,throughput_tps,\
average_power_w,efficiency_tpj,power_savings,energy_j,energy_rram_acim_j,energy_sram_dcim_j,\
energy_scratchpad_j,energy_router_j"
        );
        assert!(lines.next().unwrap().starts_with("toy,\"Q,V\",2,4,4,cycle,1,"));
    }

    #[test]
    fn unknown_format_rejected() {
        assert!(matches!("xml".parse::<Format>(), Err(Error::UnknownFormat(_))));
        assert_eq!("table".parse::<Format>().unwrap(), Format::Table);
    }

    #[test]
    fn table_has_one_line_per_row() {
        let rows = vec![sample(); 12];
        let text = emit_reports(&rows, Format::Table).unwrap();
        assert_eq!(text.lines().count(), 13);
    }

    #[test]
    fn reference_rows_are_self_consistent() {
        for c in check_tables().unwrap() {
            assert!(c.efficiency_ok(), "{c:?}");
            assert!(c.throughput_ok(), "{c:?}");
        }
    }

    #[test]
    fn breakdown_matches_per_pair_table() {
        let hw = HardwareSpec::default();
        let shares = shares(&hw.macro_power.active);
        let pct: Vec<f64> = shares.iter().map(|s| (s.percent * 10.0).round() / 10.0).collect();
        assert_eq!(pct, vec![9.9, 78.2, 3.5, 8.5]);
    }
}
