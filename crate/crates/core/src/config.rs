//! Hardware, model and workload configuration.
//!
//! A run is described by one JSON document with three sections:
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "hardware": { "mesh_rows": 32, "mesh_cols": 32 },
//!   "model": { "preset": "llama2-13b", "lora": { "rank": 8, "targets": ["q", "v"] } },
//!   "workload": { "input_len": 2048, "output_len": 2048 }
//! }
//! ```
//!
//! Every hardware field is optional and falls back to the defaults of
//! [`HardwareSpec::default`]. The model section either names a preset and
//! overrides some of its fields, or lists all of them. The full schema is
//! documented in `docs/config-schema.md`.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MacroTiming {
    /// Cycles per analog matrix-vector operation on one RRAM array.
    pub rram_smac_cycles: u32,
    /// Cycles per digital low-rank matrix-vector operation on one SRAM array.
    pub sram_smac_cycles: u32,
    /// Cycles per batch of element pairs (one pair per DMAC lane).
    pub dmac_cycles: u32,
    pub softmax_cycles_per_elem: u32,
    pub sram_prog_bytes_per_cycle: u32,
    /// Cycles for one flit to cross one intra-tile link.
    pub hop_cycles: u32,
    /// Cycles for one flit to cross a link between adjacent compute tiles.
    pub inter_ct_hop_cycles: u32,
}

impl Default for MacroTiming {
    fn default() -> Self {
        Self {
            rram_smac_cycles: 32,
            sram_smac_cycles: 16,
            dmac_cycles: 1,
            softmax_cycles_per_elem: 4,
            sram_prog_bytes_per_cycle: 8,
            hop_cycles: 1,
            inter_ct_hop_cycles: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MacroKind {
    RramAcim,
    SramDcim,
    Scratchpad,
    Router,
}

impl MacroKind {
    pub const ALL: [MacroKind; 4] = [
        MacroKind::RramAcim,
        MacroKind::SramDcim,
        MacroKind::Scratchpad,
        MacroKind::Router,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            MacroKind::RramAcim => "rram_acim",
            MacroKind::SramDcim => "sram_dcim",
            MacroKind::Scratchpad => "scratchpad",
            MacroKind::Router => "router",
        }
    }
}

impl fmt::Display for MacroKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One value per macro kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerMacro {
    pub rram_acim: f64,
    pub sram_dcim: f64,
    pub scratchpad: f64,
    pub router: f64,
}

impl PerMacro {
    pub fn get(&self, kind: MacroKind) -> f64 {
        match kind {
            MacroKind::RramAcim => self.rram_acim,
            MacroKind::SramDcim => self.sram_dcim,
            MacroKind::Scratchpad => self.scratchpad,
            MacroKind::Router => self.router,
        }
    }

    pub fn sum(&self) -> f64 {
        MacroKind::ALL.iter().map(|&k| self.get(k)).sum()
    }
}

/// Per router–PE pair power figures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MacroPower {
    /// Average power of a powered macro, in watts.
    pub active: PerMacro,
    /// Fraction of active power drawn while a macro only retains state.
    pub retention_fraction: PerMacro,
}

impl Default for MacroPower {
    fn default() -> Self {
        Self {
            active: PerMacro {
                rram_acim: 120e-6,
                sram_dcim: 950e-6,
                scratchpad: 42e-6,
                router: 103e-6,
            },
            retention_fraction: PerMacro {
                rram_acim: 0.0,
                sram_dcim: 0.10,
                scratchpad: 0.25,
                router: 0.0,
            },
        }
    }
}

impl MacroPower {
    pub fn active(&self, kind: MacroKind) -> f64 {
        self.active.get(kind)
    }

    pub fn retention(&self, kind: MacroKind) -> f64 {
        self.active.get(kind) * self.retention_fraction.get(kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HardwareSpec {
    pub mesh_rows: u32,
    pub mesh_cols: u32,
    pub pe_count: u32,
    pub rram_rows: u32,
    pub rram_cols: u32,
    pub sram_rows: u32,
    pub sram_cols: u32,
    pub scratchpad_bytes: u32,
    pub fifo_bytes: u32,
    pub dmac_per_router: u32,
    pub io_pairs: u32,
    pub bus_bits: u32,
    pub freq_hz: f64,
    pub weight_bits: u32,
    /// Fraction of each scratchpad kept for intermediates; the rest holds KV entries.
    pub kv_reserve_fraction: f64,
    /// Upper bound on compute tiles a model may occupy.
    pub max_cts: u32,
    pub macro_timing: MacroTiming,
    pub macro_power: MacroPower,
    /// Area per router–PE pair in mm².
    pub macro_area: PerMacro,
}

impl Default for HardwareSpec {
    fn default() -> Self {
        Self {
            mesh_rows: 32,
            mesh_cols: 32,
            pe_count: 1024,
            rram_rows: 256,
            rram_cols: 256,
            sram_rows: 256,
            sram_cols: 64,
            scratchpad_bytes: 32 * 1024,
            fifo_bytes: 128,
            dmac_per_router: 16,
            io_pairs: 6,
            bus_bits: 64,
            freq_hz: 1e9,
            weight_bits: 8,
            kv_reserve_fraction: 0.5,
            max_cts: 4096,
            macro_timing: MacroTiming::default(),
            macro_power: MacroPower::default(),
            macro_area: PerMacro {
                rram_acim: 0.1442,
                sram_dcim: 0.035,
                scratchpad: 0.013,
                router: 0.029,
            },
        }
    }
}

impl HardwareSpec {
    /// A 4×4 mesh with 8×8 crossbars, small enough for cycle-level runs of
    /// a hidden-16 attention layer.
    pub fn toy() -> Self {
        Self {
            mesh_rows: 4,
            mesh_cols: 4,
            pe_count: 16,
            rram_rows: 8,
            rram_cols: 8,
            sram_rows: 8,
            sram_cols: 4,
            ..Self::default()
        }
    }

    pub fn fifo_depth_flits(&self) -> u32 {
        self.fifo_bytes * 8 / self.bus_bits
    }

    pub fn rram_cells(&self) -> u64 {
        self.rram_rows as u64 * self.rram_cols as u64
    }

    pub fn ct_cells(&self) -> u64 {
        self.pe_count as u64 * self.rram_cells()
    }

    /// Flits needed to move `elems` values of `weight_bits` each.
    pub fn flits(&self, elems: u64) -> u64 {
        (elems * self.weight_bits as u64).div_ceil(self.bus_bits as u64)
    }

    pub fn cycle_seconds(&self) -> f64 {
        1.0 / self.freq_hz
    }

    /// Bytes of one scratchpad available to KV entries.
    pub fn kv_bytes_per_router(&self) -> u64 {
        ((1.0 - self.kv_reserve_fraction) * self.scratchpad_bytes as f64).floor() as u64
    }

    pub fn pair_power(&self) -> f64 {
        self.macro_power.active.sum()
    }

    pub fn validate(&self) -> Result<()> {
        let h = "hardware";
        let counts = [
            ("mesh_rows", self.mesh_rows),
            ("mesh_cols", self.mesh_cols),
            ("pe_count", self.pe_count),
            ("rram_rows", self.rram_rows),
            ("rram_cols", self.rram_cols),
            ("sram_rows", self.sram_rows),
            ("sram_cols", self.sram_cols),
            ("scratchpad_bytes", self.scratchpad_bytes),
            ("fifo_bytes", self.fifo_bytes),
            ("dmac_per_router", self.dmac_per_router),
            ("io_pairs", self.io_pairs),
            ("bus_bits", self.bus_bits),
            ("weight_bits", self.weight_bits),
            ("max_cts", self.max_cts),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(invalid(format!("{h}.{name}"), "must be positive"));
            }
        }
        if !(self.freq_hz > 0.0 && self.freq_hz.is_finite()) {
            return Err(invalid(format!("{h}.freq_hz"), "must be positive"));
        }
        if self.pe_count != self.mesh_rows * self.mesh_cols {
            return Err(invalid(
                format!("{h}.pe_count"),
                format!(
                    "{} != mesh_rows × mesh_cols = {}",
                    self.pe_count,
                    self.mesh_rows * self.mesh_cols
                ),
            ));
        }
        if !self.bus_bits.is_multiple_of(8) {
            return Err(invalid(format!("{h}.bus_bits"), "must be a whole number of bytes"));
        }
        if !self.fifo_bytes.is_multiple_of(self.bus_bits / 8) {
            return Err(invalid(
                format!("{h}.fifo_bytes"),
                format!("must be a multiple of the flit size ({} B)", self.bus_bits / 8),
            ));
        }
        if self.io_pairs != 6 {
            return Err(invalid(
                format!("{h}.io_pairs"),
                "routers have four planar ports and two PE adapter pairs",
            ));
        }
        if !(0.0..1.0).contains(&self.kv_reserve_fraction) {
            return Err(invalid(format!("{h}.kv_reserve_fraction"), "must lie in [0, 1)"));
        }
        let t = &self.macro_timing;
        let timing = [
            ("rram_smac_cycles", t.rram_smac_cycles),
            ("sram_smac_cycles", t.sram_smac_cycles),
            ("dmac_cycles", t.dmac_cycles),
            ("softmax_cycles_per_elem", t.softmax_cycles_per_elem),
            ("sram_prog_bytes_per_cycle", t.sram_prog_bytes_per_cycle),
            ("hop_cycles", t.hop_cycles),
            ("inter_ct_hop_cycles", t.inter_ct_hop_cycles),
        ];
        for (name, v) in timing {
            if v == 0 {
                return Err(invalid(format!("{h}.macro_timing.{name}"), "must be positive"));
            }
        }
        for kind in MacroKind::ALL {
            let p = self.macro_power.active.get(kind);
            if !(p >= 0.0 && p.is_finite()) {
                return Err(invalid(
                    format!("{h}.macro_power.active.{kind}"),
                    "must be a nonnegative power",
                ));
            }
            let r = self.macro_power.retention_fraction.get(kind);
            if !(0.0..=1.0).contains(&r) {
                return Err(invalid(
                    format!("{h}.macro_power.retention_fraction.{kind}"),
                    "must lie in [0, 1]",
                ));
            }
            let a = self.macro_area.get(kind);
            if !(a >= 0.0 && a.is_finite()) {
                return Err(invalid(format!("{h}.macro_area.{kind}"), "must be nonnegative"));
            }
        }
        Ok(())
    }
}

/// Weight matrices of one transformer layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixId {
    Q,
    K,
    V,
    O,
    FfnGate,
    FfnUp,
    FfnDown,
}

impl MatrixId {
    pub const ATTENTION: [MatrixId; 4] = [MatrixId::Q, MatrixId::K, MatrixId::V, MatrixId::O];

    pub fn name(self) -> &'static str {
        match self {
            MatrixId::Q => "q",
            MatrixId::K => "k",
            MatrixId::V => "v",
            MatrixId::O => "o",
            MatrixId::FfnGate => "ffn_gate",
            MatrixId::FfnUp => "ffn_up",
            MatrixId::FfnDown => "ffn_down",
        }
    }

    pub fn is_attention(self) -> bool {
        matches!(self, MatrixId::Q | MatrixId::K | MatrixId::V | MatrixId::O)
    }

    pub fn parse(s: &str) -> Option<MatrixId> {
        match s.trim().to_ascii_lowercase().as_str() {
            "q" => Some(MatrixId::Q),
            "k" => Some(MatrixId::K),
            "v" => Some(MatrixId::V),
            "o" => Some(MatrixId::O),
            "ffn_gate" => Some(MatrixId::FfnGate),
            "ffn_up" => Some(MatrixId::FfnUp),
            "ffn_down" => Some(MatrixId::FfnDown),
            _ => None,
        }
    }
}

impl fmt::Display for MatrixId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraSpec {
    pub rank: u32,
    pub targets: Vec<MatrixId>,
    #[serde(default = "default_scale")]
    pub scale: f64,
}

fn default_scale() -> f64 {
    1.0
}

impl Default for LoraSpec {
    fn default() -> Self {
        Self {
            rank: 8,
            targets: vec![MatrixId::Q, MatrixId::V],
            scale: 1.0,
        }
    }
}

impl LoraSpec {
    pub fn none() -> Self {
        Self { rank: 0, targets: Vec::new(), scale: 1.0 }
    }

    pub fn targets(&self, m: MatrixId) -> bool {
        self.rank > 0 && self.targets.contains(&m)
    }

    pub fn target_label(&self) -> String {
        if self.rank == 0 {
            return "none".into();
        }
        let mut t = self.targets.clone();
        t.sort();
        t.iter()
            .map(|m| m.name().to_ascii_uppercase())
            .collect::<Vec<_>>()
            .join(",")
    }

    fn validate(&self) -> Result<()> {
        if self.rank > 0 && self.targets.is_empty() {
            return Err(invalid("model.lora.targets", "must be nonempty when rank > 0"));
        }
        if let Some(m) = self.targets.iter().find(|m| !m.is_attention()) {
            return Err(invalid(
                "model.lora.targets",
                format!("`{m}` is not an attention projection"),
            ));
        }
        let mut seen = self.targets.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.targets.len() {
            return Err(invalid("model.lora.targets", "duplicate target"));
        }
        if !self.scale.is_finite() {
            return Err(invalid("model.lora.scale", "must be finite"));
        }
        Ok(())
    }
}

/// Shape of one weight matrix, `d_out × d_in`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MatrixShape {
    pub id: MatrixId,
    pub d_out: u32,
    pub d_in: u32,
}

impl MatrixShape {
    pub fn elems(&self) -> u64 {
        self.d_out as u64 * self.d_in as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    pub num_layers: u32,
    pub hidden_dim: u32,
    pub num_heads: u32,
    pub head_dim: u32,
    /// Feed-forward width; 0 describes an attention-only layer.
    pub ffn_dim: u32,
    /// Gated feed-forward (gate, up and down projections) instead of up/down.
    pub ffn_gated: bool,
    pub lora: LoraSpec,
}

pub const PRESETS: [&str; 4] = ["llama3.2-1b", "llama3-8b", "llama2-13b", "toy"];

impl ModelSpec {
    pub fn preset(name: &str) -> Result<ModelSpec> {
        let (layers, hidden, heads, ffn, gated) = match name {
            "llama3.2-1b" => (16, 2048, 32, 8192, true),
            "llama3-8b" => (32, 4096, 32, 14336, true),
            "llama2-13b" => (40, 5120, 40, 13824, true),
            "toy" => {
                return Ok(ModelSpec {
                    name: "toy".into(),
                    num_layers: 1,
                    hidden_dim: 16,
                    num_heads: 2,
                    head_dim: 8,
                    ffn_dim: 0,
                    ffn_gated: false,
                    lora: LoraSpec {
                        rank: 2,
                        targets: vec![MatrixId::Q, MatrixId::V],
                        scale: 1.0,
                    },
                })
            }
            other => return Err(Error::UnknownPreset(other.to_string())),
        };
        Ok(ModelSpec {
            name: name.to_string(),
            num_layers: layers,
            hidden_dim: hidden,
            num_heads: heads,
            head_dim: hidden / heads,
            ffn_dim: ffn,
            ffn_gated: gated,
            lora: LoraSpec::default(),
        })
    }

    /// Weight matrices of one layer in mapping order: Q, K, V, O, then FFN.
    pub fn layer_matrices(&self) -> Vec<MatrixShape> {
        let d = self.hidden_dim;
        let mut v: Vec<MatrixShape> = MatrixId::ATTENTION
            .iter()
            .map(|&id| MatrixShape { id, d_out: d, d_in: d })
            .collect();
        if self.ffn_dim > 0 {
            if self.ffn_gated {
                v.push(MatrixShape { id: MatrixId::FfnGate, d_out: self.ffn_dim, d_in: d });
            }
            v.push(MatrixShape { id: MatrixId::FfnUp, d_out: self.ffn_dim, d_in: d });
            v.push(MatrixShape { id: MatrixId::FfnDown, d_out: d, d_in: self.ffn_dim });
        }
        v
    }

    pub fn layer_params(&self) -> u64 {
        self.layer_matrices().iter().map(MatrixShape::elems).sum()
    }

    /// Frozen weight parameters held in RRAM (adapters excluded).
    pub fn weight_params(&self) -> u64 {
        self.layer_params() * self.num_layers as u64
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("head_dim", self.head_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(invalid(format!("model.{name}"), "must be positive"));
            }
        }
        if self.head_dim * self.num_heads != self.hidden_dim {
            return Err(invalid(
                "model.head_dim",
                format!(
                    "head_dim × num_heads = {} but hidden_dim = {}",
                    self.head_dim * self.num_heads,
                    self.hidden_dim
                ),
            ));
        }
        self.lora.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub input_len: u32,
    pub output_len: u32,
    pub batch: u32,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self { input_len: 1024, output_len: 1024, batch: 1 }
    }
}

impl WorkloadSpec {
    pub fn new(input_len: u32, output_len: u32) -> Self {
        Self { input_len, output_len, batch: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_len == 0 {
            return Err(invalid("workload.input_len", "must be at least 1"));
        }
        if self.output_len == 0 {
            return Err(invalid("workload.output_len", "must be at least 1"));
        }
        if self.batch != 1 {
            return Err(invalid("workload.batch", "only batch 1 is modelled"));
        }
        Ok(())
    }

    pub fn context_label(&self) -> String {
        format!("{}/{}", self.input_len, self.output_len)
    }
}

/// Model section as written in a config file: optional preset plus overrides.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_layers: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_heads: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_dim: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ffn_dim: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ffn_gated: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora: Option<LoraSpec>,
}

impl From<&ModelSpec> for ModelSection {
    fn from(m: &ModelSpec) -> Self {
        Self {
            preset: None,
            name: Some(m.name.clone()),
            num_layers: Some(m.num_layers),
            hidden_dim: Some(m.hidden_dim),
            num_heads: Some(m.num_heads),
            head_dim: Some(m.head_dim),
            ffn_dim: Some(m.ffn_dim),
            ffn_gated: Some(m.ffn_gated),
            lora: Some(m.lora.clone()),
        }
    }
}

impl ModelSection {
    pub fn resolve(&self) -> Result<ModelSpec> {
        let base = self.preset.as_deref().map(ModelSpec::preset).transpose()?;
        fn pick<T: Clone>(v: &Option<T>, base: Option<T>, field: &str) -> Result<T> {
            v.clone()
                .or(base)
                .ok_or_else(|| invalid(format!("model.{field}"), "missing and no preset given"))
        }
        let b = base.as_ref();
        let hidden_dim = pick(&self.hidden_dim, b.map(|m| m.hidden_dim), "hidden_dim")?;
        let num_heads = pick(&self.num_heads, b.map(|m| m.num_heads), "num_heads")?;
        // head_dim follows the width unless given or inherited unchanged
        let head_dim = match (self.head_dim, b) {
            (Some(h), _) => h,
            (None, Some(base)) if self.hidden_dim.is_none() && self.num_heads.is_none() => {
                base.head_dim
            }
            _ => hidden_dim / num_heads.max(1),
        };
        let spec = ModelSpec {
            name: pick(&self.name, b.map(|m| m.name.clone()), "name")?,
            num_layers: pick(&self.num_layers, b.map(|m| m.num_layers), "num_layers")?,
            hidden_dim,
            num_heads,
            head_dim,
            ffn_dim: pick(&self.ffn_dim, b.map(|m| m.ffn_dim), "ffn_dim")?,
            ffn_gated: self.ffn_gated.or(b.map(|m| m.ffn_gated)).unwrap_or(false),
            lora: pick(&self.lora, b.map(|m| m.lora.clone()), "lora")?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub schema_version: u32,
    #[serde(default)]
    pub hardware: HardwareSpec,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub workload: WorkloadSpec,
}

/// A validated run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub hardware: HardwareSpec,
    pub model: ModelSpec,
    pub workload: WorkloadSpec,
}

impl Config {
    pub fn to_file(&self) -> ConfigFile {
        ConfigFile {
            schema_version: SCHEMA_VERSION,
            hardware: self.hardware.clone(),
            model: ModelSection::from(&self.model),
            workload: self.workload.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("config serializes")
    }
}

impl ConfigFile {
    pub fn into_config(self) -> Result<Config> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        self.hardware.validate()?;
        let model = self.model.resolve()?;
        self.workload.validate()?;
        Ok(Config { hardware: self.hardware, model, workload: self.workload })
    }
}

pub fn parse_config(text: &str) -> Result<Config> {
    let file: ConfigFile = serde_json::from_str(text)?;
    file.into_config()
}

pub fn load_config(path: impl AsRef<Path>) -> Result<(HardwareSpec, ModelSpec, WorkloadSpec)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let c = parse_config(&text)?;
    Ok((c.hardware, c.model, c.workload))
}

/// Compute tiles needed to hold every frozen weight, one weight per RRAM cell.
pub fn ct_count(hw: &HardwareSpec, model: &ModelSpec) -> u64 {
    cts_for_params(hw, model.weight_params())
}

pub fn cts_for_params(hw: &HardwareSpec, params: u64) -> u64 {
    params.div_ceil(hw.ct_cells())
}
