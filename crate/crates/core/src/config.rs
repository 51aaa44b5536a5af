//! Hardware parameterization of the accelerator.
//!
//! The configuration is a plain value: construct it (or load it from a TOML
//! descriptor), call [`HwConfig::validate`], and pass it by reference to the
//! mapper, scheduler and simulators. The defaults describe the synthesized
//! 15 x 12 PE instance with 3 x 3 groups and a 32-bit, 250 MHz memory
//! interface.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Calibrated compute-pipeline depth shipped with the default config.
///
/// Fit by [`crate::calibrate::fit`] against the AlexNet and VGG-16 latency
/// totals and frozen here.
pub const CALIBRATED_PIPELINE_DEPTH: u32 = 1;

/// Calibrated fixed cost of a memory transaction, in interface cycles.
pub const CALIBRATED_TXN_OVERHEAD: u32 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// PEs per grid column (grid height).
    pub rows: u32,
    /// PEs per grid row (grid width).
    pub cols: u32,
    pub group_rows: u32,
    pub group_cols: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryConfig {
    /// Weight scratch-pad bytes per PE and per bank.
    pub pe_spm_bytes: u32,
    /// Bytes per input-buffer SRAM (one SRAM per PE row) and per bank.
    pub input_buffer_bytes: u32,
    /// Partial-sum store per PE group.
    pub accumulator_bytes: u32,
    pub double_buffer_inputs: bool,
    pub double_buffer_spm: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClockConfig {
    pub core_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterfaceConfig {
    pub width_bits: u32,
    /// Interface clock. `inf` models unlimited bandwidth.
    pub clock_hz: f64,
    /// Fixed interface cycles charged to every transfer.
    #[serde(default)]
    pub overhead_cycles: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrecisionConfig {
    pub input_bits: u32,
    pub weight_bits: u32,
    pub psum_bits: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Compute-pipeline stages drained at the end of every sweep.
    pub depth: u32,
}

/// Full hardware parameterization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HwConfig {
    pub grid: GridConfig,
    pub memory: MemoryConfig,
    pub clock: ClockConfig,
    pub interface: InterfaceConfig,
    pub precision: PrecisionConfig,
    pub pipeline: PipelineConfig,
}

impl Default for HwConfig {
    fn default() -> Self {
        Self {
            grid: GridConfig {
                rows: 15,
                cols: 12,
                group_rows: 3,
                group_cols: 3,
            },
            memory: MemoryConfig {
                pe_spm_bytes: 32,
                input_buffer_bytes: 256,
                accumulator_bytes: 2048,
                double_buffer_inputs: true,
                double_buffer_spm: true,
            },
            clock: ClockConfig { core_hz: 1e9 },
            interface: InterfaceConfig {
                width_bits: 32,
                clock_hz: 250e6,
                overhead_cycles: CALIBRATED_TXN_OVERHEAD,
            },
            precision: PrecisionConfig {
                input_bits: 8,
                weight_bits: 8,
                psum_bits: 16,
            },
            pipeline: PipelineConfig {
                depth: CALIBRATED_PIPELINE_DEPTH,
            },
        }
    }
}

fn word_bits_ok(bits: u32) -> bool {
    matches!(bits, 8 | 16 | 32)
}

impl HwConfig {
    /// Grid of `rows x cols` PEs tiled by `group_rows x group_cols` groups,
    /// everything else at the defaults.
    pub fn with_grid(rows: u32, cols: u32, group_rows: u32, group_cols: u32) -> Self {
        Self {
            grid: GridConfig {
                rows,
                cols,
                group_rows,
                group_cols,
            },
            ..Self::default()
        }
    }

    /// Returns the config if every invariant holds, otherwise the first
    /// violated one.
    pub fn validate(self) -> Result<Self> {
        self.check()?;
        Ok(self)
    }

    pub fn check(&self) -> Result<()> {
        let g = &self.grid;
        for (name, v) in [
            ("grid.rows", g.rows),
            ("grid.cols", g.cols),
            ("grid.group_rows", g.group_rows),
            ("grid.group_cols", g.group_cols),
            ("interface.width_bits", self.interface.width_bits),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !g.rows.is_multiple_of(g.group_rows) {
            return Err(Error::Config(format!(
                "grid_rows {} not divisible by {}",
                g.rows, g.group_rows
            )));
        }
        if !g.cols.is_multiple_of(g.group_cols) {
            return Err(Error::Config(format!(
                "grid_cols {} not divisible by {}",
                g.cols, g.group_cols
            )));
        }
        let m = &self.memory;
        for (name, v) in [
            ("memory.pe_spm_bytes", m.pe_spm_bytes),
            ("memory.input_buffer_bytes", m.input_buffer_bytes),
            ("memory.accumulator_bytes", m.accumulator_bytes),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("clock.core_hz", self.clock.core_hz),
            ("interface.clock_hz", self.interface.clock_hz),
        ] {
            if v.is_nan() || v <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.clock.core_hz.is_finite() {
            return Err(Error::Config("clock.core_hz must be finite".into()));
        }
        let p = &self.precision;
        for (name, v) in [
            ("precision.input_bits", p.input_bits),
            ("precision.weight_bits", p.weight_bits),
            ("precision.psum_bits", p.psum_bits),
        ] {
            if !word_bits_ok(v) {
                return Err(Error::Config(format!("{name} must be 8, 16 or 32, got {v}")));
            }
        }
        if p.psum_bits < p.input_bits || p.psum_bits < p.weight_bits {
            return Err(Error::Config(
                "precision.psum_bits must be at least the operand width".into(),
            ));
        }
        if self.pipeline.depth == 0 {
            return Err(Error::Config("pipeline.depth must be positive".into()));
        }
        Ok(())
    }

    pub fn num_pes(&self) -> u64 {
        self.grid.rows as u64 * self.grid.cols as u64
    }

    /// Group rows in the grid.
    pub fn group_grid_rows(&self) -> u32 {
        self.grid.rows / self.grid.group_rows
    }

    /// Group columns in the grid.
    pub fn group_grid_cols(&self) -> u32 {
        self.grid.cols / self.grid.group_cols
    }

    pub fn num_groups(&self) -> u32 {
        self.group_grid_rows() * self.group_grid_cols()
    }

    pub fn input_bytes(&self) -> u64 {
        self.precision.input_bits as u64 / 8
    }

    pub fn weight_bytes(&self) -> u64 {
        self.precision.weight_bits as u64 / 8
    }

    pub fn psum_bytes(&self) -> u64 {
        self.precision.psum_bits as u64 / 8
    }

    /// Weights one PE can hold at once, across all SPM banks.
    pub fn spm_weight_capacity(&self) -> u64 {
        let banks = if self.memory.double_buffer_spm { 2 } else { 1 };
        self.memory.pe_spm_bytes as u64 * banks / self.weight_bytes()
    }

    /// Weights one SPM bank holds.
    pub fn spm_bank_weights(&self) -> u64 {
        self.memory.pe_spm_bytes as u64 / self.weight_bytes()
    }

    /// Partial sums one group accumulator holds.
    pub fn accumulator_psums(&self) -> u64 {
        self.memory.accumulator_bytes as u64 / self.psum_bytes()
    }

    /// Input elements one input-buffer bank holds.
    pub fn input_buffer_elems(&self) -> u64 {
        self.memory.input_buffer_bytes as u64 / self.input_bytes()
    }

    /// Total on-chip memory in bytes: weight SPMs, input buffers and group
    /// accumulators, counting duplicated banks.
    pub fn total_on_chip_memory(&self) -> u64 {
        let m = &self.memory;
        let spm_banks = if m.double_buffer_spm { 2 } else { 1 };
        let in_banks = if m.double_buffer_inputs { 2 } else { 1 };
        self.num_pes() * m.pe_spm_bytes as u64 * spm_banks
            + self.grid.rows as u64 * m.input_buffer_bytes as u64 * in_banks
            + self.num_groups() as u64 * m.accumulator_bytes as u64
    }

    /// One multiply and one add per PE plus one add per group accumulator.
    pub fn peak_ops_per_cycle(&self) -> u64 {
        2 * self.num_pes() + self.num_groups() as u64
    }

    pub fn peak_gops(&self) -> f64 {
        self.peak_ops_per_cycle() as f64 * self.clock.core_hz / 1e9
    }

    /// Parse a TOML descriptor. Unknown keys are rejected.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: HwConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Apply `key=value` overrides (dotted keys such as `grid.rows=6`) and
    /// re-validate.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut value = toml::Value::try_from(self).map_err(|e| Error::Parse(e.to_string()))?;
        for ov in overrides {
            let (key, raw) = split_override(ov.as_ref())?;
            set_dotted(&mut value, key, parse_scalar(raw))?;
        }
        let cfg: HwConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        cfg.validate()
    }
}

pub(crate) fn split_override(s: &str) -> Result<(&str, &str)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Parse(format!("override `{s}` is not key=value")))?;
    Ok((k.trim(), v.trim()))
}

fn parse_scalar(raw: &str) -> toml::Value {
    // Reuse the TOML grammar for literals; fall back to a bare string.
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or(toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_dotted(root: &mut toml::Value, key: &str, v: toml::Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Parse(format!("unknown key `{key}`")))?;
        if i + 1 == parts.len() {
            match table.get(*part) {
                Some(old) if !old.is_table() => {
                    let v = coerce_like(old, v);
                    table.insert(part.to_string(), v);
                    return Ok(());
                }
                Some(_) => return Err(Error::Parse(format!("key `{key}` is a section"))),
                None => return Err(Error::Parse(format!("unknown key `{key}`"))),
            }
        }
        cur = table
            .get_mut(*part)
            .ok_or_else(|| Error::Parse(format!("unknown key `{key}`")))?;
    }
    Err(Error::Parse(format!("empty key `{key}`")))
}

/// Integers given for float fields (e.g. `clock.core_hz=500000000`) are
/// accepted.
fn coerce_like(old: &toml::Value, v: toml::Value) -> toml::Value {
    match (old, &v) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(*i as f64),
        _ => v,
    }
}
