//! Phase-level latency model.
//!
//! Three in-order resources advance over the schedule: the read stream
//! (weight fetches, input fetches and partial-sum restores), the write stream
//! (write-outs and spills) and the compute pipeline. Reads and writes share
//! one memory channel that moves data in a single direction at a time; when
//! both could start, the write goes first. Compute waits for its weights and
//! inputs, and for the accumulators to be drained of the previous tile.
//! Fetches wait for a free buffer bank: with double buffering the fetch for
//! step `k` may run during compute `k - 1`, otherwise only after it.

use std::fmt;
use std::io::Write;

use serde::Serialize;

use crate::config::HwConfig;
use crate::error::{Error, Result};
use crate::schedule::{Phase, Schedule};

/// External memory channel as seen from the core clock.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryInterfaceModel {
    pub width_bits: u32,
    pub clock_hz: f64,
    pub core_hz: f64,
    /// Fixed interface cycles added to every transfer.
    pub overhead_cycles: u32,
    /// Reads and writes never progress in the same cycle.
    pub single_channel: bool,
}

impl MemoryInterfaceModel {
    pub fn from_config(cfg: &HwConfig) -> Self {
        Self {
            width_bits: cfg.interface.width_bits,
            clock_hz: cfg.interface.clock_hz,
            core_hz: cfg.clock.core_hz,
            overhead_cycles: cfg.interface.overhead_cycles,
            single_channel: true,
        }
    }

    pub fn bandwidth_bytes_per_s(&self) -> f64 {
        self.width_bits as f64 / 8.0 * self.clock_hz
    }

    pub fn bytes_per_core_cycle(&self) -> f64 {
        self.bandwidth_bytes_per_s() / self.core_hz
    }

    /// Core cycles the channel is occupied by a transfer of `bytes`.
    pub fn transfer_cycles(&self, bytes: u64) -> u64 {
        if bytes == 0 || self.clock_hz.is_infinite() {
            return 0;
        }
        let beats = bytes.div_ceil((self.width_bits as u64).div_ceil(8)) + self.overhead_cycles as u64;
        (beats as f64 * self.core_hz / self.clock_hz).ceil() as u64
    }
}

/// Cycle breakdown of one layer, or of several layers summed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerTiming {
    pub layer: String,
    pub cycles_total: u64,
    pub cyc_fetch_w: u64,
    /// Input fetches, including partial-sum restores.
    pub cyc_fetch_i: u64,
    /// Write-outs, including partial-sum spills.
    pub cyc_write: u64,
    pub cyc_compute: u64,
    pub cyc_spill: u64,
    pub cyc_restore: u64,
    pub bytes_read: u64,
    pub bytes_written: u64,
    pub core_hz: f64,
}

impl LayerTiming {
    fn empty(name: &str, core_hz: f64) -> Self {
        Self {
            layer: name.to_string(),
            cycles_total: 0,
            cyc_fetch_w: 0,
            cyc_fetch_i: 0,
            cyc_write: 0,
            cyc_compute: 0,
            cyc_spill: 0,
            cyc_restore: 0,
            bytes_read: 0,
            bytes_written: 0,
            core_hz,
        }
    }

    pub fn ms(&self) -> f64 {
        self.cycles_total as f64 / self.core_hz * 1e3
    }

    pub fn mem_busy_cycles(&self) -> u64 {
        self.cyc_fetch_w + self.cyc_fetch_i + self.cyc_write
    }

    fn pct(&self, part: u64) -> f64 {
        if self.cycles_total == 0 {
            0.0
        } else {
            100.0 * part as f64 / self.cycles_total as f64
        }
    }

    pub fn pe_active_pct(&self) -> f64 {
        self.pct(self.cyc_compute)
    }

    pub fn mem_busy_pct(&self) -> f64 {
        self.pct(self.mem_busy_cycles())
    }

    fn add(&mut self, o: &LayerTiming) {
        self.cycles_total += o.cycles_total;
        self.cyc_fetch_w += o.cyc_fetch_w;
        self.cyc_fetch_i += o.cyc_fetch_i;
        self.cyc_write += o.cyc_write;
        self.cyc_compute += o.cyc_compute;
        self.cyc_spill += o.cyc_spill;
        self.cyc_restore += o.cyc_restore;
        self.bytes_read += o.bytes_read;
        self.bytes_written += o.bytes_written;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingReport {
    pub layers: Vec<LayerTiming>,
    pub total: LayerTiming,
}

impl TimingReport {
    pub fn total_ms(&self) -> f64 {
        self.total.ms()
    }

    /// CSV with one row per layer and a final `total` row.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Io(e.to_string());
        out.write_record(CSV_HEADER).map_err(io)?;
        for l in self.layers.iter().chain(std::iter::once(&self.total)) {
            out.write_record([
                l.layer.clone(),
                l.cycles_total.to_string(),
                format!("{:.6}", l.ms()),
                l.cyc_fetch_w.to_string(),
                l.cyc_fetch_i.to_string(),
                l.cyc_write.to_string(),
                l.cyc_compute.to_string(),
                format!("{:.2}", l.pe_active_pct()),
                format!("{:.2}", l.mem_busy_pct()),
            ])
            .map_err(io)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

pub const CSV_HEADER: [&str; 9] = [
    "layer",
    "cycles_total",
    "ms",
    "cyc_fetch_w",
    "cyc_fetch_i",
    "cyc_write",
    "cyc_compute",
    "pe_active_pct",
    "mem_busy_pct",
];

impl fmt::Display for TimingReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<12} {:>12} {:>10} {:>7} {:>7} {:>7} {:>7} {:>6} {:>6}",
            "layer", "cycles", "ms", "fetchW%", "fetchI%", "write%", "comp%", "PE%", "mem%"
        )?;
        for l in self.layers.iter().chain(std::iter::once(&self.total)) {
            writeln!(
                f,
                "{:<12} {:>12} {:>10.3} {:>7.1} {:>7.1} {:>7.1} {:>7.1} {:>6.1} {:>6.1}",
                l.layer,
                l.cycles_total,
                l.ms(),
                l.pct(l.cyc_fetch_w),
                l.pct(l.cyc_fetch_i),
                l.pct(l.cyc_write),
                l.pct(l.cyc_compute),
                l.pe_active_pct(),
                l.mem_busy_pct()
            )?;
        }
        Ok(())
    }
}

/// Direction and span of one transfer on the memory channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transfer {
    pub start: u64,
    pub end: u64,
    pub write: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ReadKind {
    Weights,
    Inputs,
    Restore,
}

struct ReadOp {
    kind: ReadKind,
    cycles: u64,
    /// Compute that must finish before the destination bank is free.
    after_compute: Option<usize>,
    /// Drain that must finish before the accumulators can be refilled.
    after_write: Option<usize>,
}

struct WriteOp {
    spill: bool,
    cycles: u64,
    after_compute: Option<usize>,
}

struct ComputeOp {
    cycles: u64,
    reads: Vec<usize>,
    after_write: Option<usize>,
}

struct Program {
    reads: Vec<ReadOp>,
    writes: Vec<WriteOp>,
    computes: Vec<ComputeOp>,
}

fn lower(schedule: &Schedule, mem: &MemoryInterfaceModel, cfg: &HwConfig) -> Program {
    let db_inputs = cfg.memory.double_buffer_inputs;
    let weights_fit_bank = (schedule.loops.items_per_pass as u64) <= cfg.spm_bank_weights();
    let db_weights = cfg.memory.double_buffer_spm && weights_fit_bank;
    let lag = |double: bool| if double { 2 } else { 1 };

    let mut p = Program {
        reads: Vec::new(),
        writes: Vec::new(),
        computes: Vec::new(),
    };
    // Last compute of every weight pass seen so far.
    let mut pass_last: Vec<Option<usize>> = Vec::new();
    let mut cur_weights = None;
    let mut cur_restore = None;
    let mut last_drain: Option<usize> = None;
    let mut drain_pending = false;
    let mut n_inputs = 0usize;
    let mut cur_input = None;

    for phase in &schedule.phases {
        match phase {
            Phase::FetchWeights { bytes, .. } => {
                pass_last.push(None);
                let q = pass_last.len() - 1;
                let wait = q.checked_sub(lag(db_weights)).and_then(|i| pass_last[i]);
                p.reads.push(ReadOp {
                    kind: ReadKind::Weights,
                    cycles: mem.transfer_cycles(*bytes),
                    after_compute: wait,
                    after_write: None,
                });
                cur_weights = Some(p.reads.len() - 1);
            }
            Phase::FetchInputs { bytes, .. } => {
                let k = n_inputs;
                n_inputs += 1;
                p.reads.push(ReadOp {
                    kind: ReadKind::Inputs,
                    cycles: mem.transfer_cycles(*bytes),
                    after_compute: k.checked_sub(lag(db_inputs)),
                    after_write: None,
                });
                cur_input = Some(p.reads.len() - 1);
            }
            Phase::RestorePsums { bytes, .. } => {
                p.reads.push(ReadOp {
                    kind: ReadKind::Restore,
                    cycles: mem.transfer_cycles(*bytes),
                    after_compute: None,
                    after_write: last_drain,
                });
                cur_restore = Some(p.reads.len() - 1);
                drain_pending = false;
            }
            Phase::Compute { cycles, .. } => {
                let mut reads = vec![cur_input.expect("inputs precede compute")];
                reads.extend(cur_weights);
                reads.extend(cur_restore.take());
                p.computes.push(ComputeOp {
                    cycles: *cycles,
                    reads,
                    after_write: if drain_pending { last_drain } else { None },
                });
                drain_pending = false;
                let c = p.computes.len() - 1;
                *pass_last.last_mut().expect("weights precede compute") = Some(c);
            }
            Phase::SpillPsums { bytes, .. } | Phase::WriteOut { bytes, .. } => {
                p.writes.push(WriteOp {
                    spill: matches!(phase, Phase::SpillPsums { .. }),
                    cycles: mem.transfer_cycles(*bytes),
                    after_compute: p.computes.len().checked_sub(1),
                });
                last_drain = Some(p.writes.len() - 1);
                drain_pending = true;
            }
        }
    }
    p
}

fn ready(deps: &[Option<Option<u64>>]) -> Option<u64> {
    let mut t = 0;
    for d in deps {
        match d {
            None => {}
            Some(None) => return None,
            Some(Some(end)) => t = t.max(*end),
        }
    }
    Some(t)
}

fn run(p: &Program, trace: Option<&mut Vec<Transfer>>) -> u64 {
    let mut read_end: Vec<Option<u64>> = vec![None; p.reads.len()];
    let mut write_end: Vec<Option<u64>> = vec![None; p.writes.len()];
    let mut comp_end: Vec<Option<u64>> = vec![None; p.computes.len()];
    let (mut ri, mut wi, mut ci) = (0, 0, 0);
    let (mut mem_free, mut comp_free) = (0u64, 0u64);
    let mut trace = trace;

    loop {
        while ci < p.computes.len() {
            let op = &p.computes[ci];
            let mut deps: Vec<Option<Option<u64>>> = op.reads.iter().map(|&r| Some(read_end[r])).collect();
            deps.push(op.after_write.map(|w| write_end[w]));
            let Some(t) = ready(&deps) else { break };
            let end = comp_free.max(t) + op.cycles;
            comp_end[ci] = Some(end);
            comp_free = end;
            ci += 1;
        }
        let r = (ri < p.reads.len()).then(|| {
            let op = &p.reads[ri];
            ready(&[
                op.after_compute.map(|c| comp_end[c]),
                op.after_write.map(|w| write_end[w]),
            ])
        });
        let w = (wi < p.writes.len()).then(|| ready(&[p.writes[wi].after_compute.map(|c| comp_end[c])]));
        let (rs, ws) = (
            r.flatten().map(|t| t.max(mem_free)),
            w.flatten().map(|t| t.max(mem_free)),
        );
        let take_write = match (rs, ws) {
            (None, None) => {
                assert!(
                    ri == p.reads.len() && wi == p.writes.len() && ci == p.computes.len(),
                    "timing model deadlock"
                );
                break;
            }
            (Some(_), None) => false,
            (None, Some(_)) => true,
            (Some(r), Some(w)) => w <= r,
        };
        let (start, cycles) = if take_write {
            (ws.unwrap(), p.writes[wi].cycles)
        } else {
            (rs.unwrap(), p.reads[ri].cycles)
        };
        let end = start + cycles;
        if let Some(tr) = trace.as_deref_mut() {
            if cycles > 0 {
                tr.push(Transfer {
                    start,
                    end,
                    write: take_write,
                });
            }
        }
        if take_write {
            write_end[wi] = Some(end);
            wi += 1;
        } else {
            read_end[ri] = Some(end);
            ri += 1;
        }
        mem_free = end;
    }
    let last = |v: &[Option<u64>]| v.iter().flatten().copied().max().unwrap_or(0);
    last(&read_end).max(last(&write_end)).max(last(&comp_end))
}

fn simulate(schedule: &Schedule, cfg: &HwConfig, trace: Option<&mut Vec<Transfer>>) -> TimingReport {
    let mem = MemoryInterfaceModel::from_config(cfg);
    let p = lower(schedule, &mem, cfg);
    let total = run(&p, trace);
    let mut t = LayerTiming::empty(&schedule.layer().name, cfg.clock.core_hz);
    t.cycles_total = total;
    for r in &p.reads {
        match r.kind {
            ReadKind::Weights => t.cyc_fetch_w += r.cycles,
            ReadKind::Inputs => t.cyc_fetch_i += r.cycles,
            ReadKind::Restore => {
                t.cyc_fetch_i += r.cycles;
                t.cyc_restore += r.cycles;
            }
        }
    }
    for w in &p.writes {
        t.cyc_write += w.cycles;
        if w.spill {
            t.cyc_spill += w.cycles;
        }
    }
    t.cyc_compute = p.computes.iter().map(|c| c.cycles).sum();
    t.bytes_read = schedule.phases.iter().filter(|p| p.is_read()).map(Phase::bytes).sum();
    t.bytes_written = schedule.phases.iter().filter(|p| p.is_write()).map(Phase::bytes).sum();
    let mut total = t.clone();
    total.layer = "total".into();
    TimingReport { layers: vec![t], total }
}

/// Latency of one scheduled layer.
pub fn simulate_timing(schedule: &Schedule, cfg: &HwConfig) -> TimingReport {
    simulate(schedule, cfg, None)
}

/// Like [`simulate_timing`], also returning every memory transfer.
pub fn simulate_timing_traced(schedule: &Schedule, cfg: &HwConfig) -> (TimingReport, Vec<Transfer>) {
    let mut trace = Vec::new();
    let r = simulate(schedule, cfg, Some(&mut trace));
    (r, trace)
}

/// Concatenate per-layer reports and sum their totals.
pub fn aggregate_network(reports: &[TimingReport]) -> Result<TimingReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Config("cannot aggregate an empty list of reports".into()))?;
    let mut total = LayerTiming::empty("total", first.total.core_hz);
    let mut layers = Vec::new();
    for r in reports {
        layers.extend(r.layers.iter().cloned());
        total.add(&r.total);
    }
    Ok(TimingReport { layers, total })
}

/// Map, schedule and time every layer of `layers`.
pub fn simulate_network(layers: &[crate::layer::LayerSpec], cfg: &HwConfig) -> Result<TimingReport> {
    let schedules = crate::schedule::schedule_network(layers, cfg)?;
    let reports: Vec<TimingReport> = schedules.iter().map(|s| simulate_timing(s, cfg)).collect();
    aggregate_network(&reports)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Utilization {
    pub layer: String,
    pub mem_busy_pct: f64,
    pub pe_active_pct: f64,
}

/// Share of each layer's cycles the memory channel and the PEs are busy.
pub fn utilization_profile(report: &TimingReport) -> Vec<Utilization> {
    report
        .layers
        .iter()
        .map(|l| Utilization {
            layer: l.layer.clone(),
            mem_busy_pct: l.mem_busy_pct(),
            pe_active_pct: l.pe_active_pct(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::LayerSpec;
    use crate::mapper::map_layer;
    use crate::schedule::build_schedule;

    fn sched(layer: &LayerSpec, cfg: &HwConfig) -> Schedule {
        build_schedule(&map_layer(layer, cfg).unwrap(), cfg).unwrap()
    }

    #[test]
    fn default_interface_is_one_byte_per_cycle() {
        let m = MemoryInterfaceModel::from_config(&HwConfig::default());
        assert_eq!(m.bandwidth_bytes_per_s(), 1e9);
        assert_eq!(m.bytes_per_core_cycle(), 1.0);
        assert_eq!(m.transfer_cycles(0), 0);
        assert_eq!(m.transfer_cycles(1), 4 * (1 + m.overhead_cycles as u64));
        assert_eq!(m.transfer_cycles(4000), 4 * (1000 + m.overhead_cycles as u64));
    }

    #[test]
    fn infinite_bandwidth_is_compute_bound() {
        let mut cfg = HwConfig::default();
        cfg.interface.clock_hz = f64::INFINITY;
        let s = sched(&LayerSpec::conv("c", 16, 20, 20, 30, (3, 3), 1, 1), &cfg);
        let r = simulate_timing(&s, &cfg);
        assert_eq!(r.total.cycles_total, s.compute_cycles());
        assert_eq!(r.total.mem_busy_cycles(), 0);
    }

    #[test]
    fn reads_and_writes_never_overlap() {
        let cfg = HwConfig::default();
        let s = sched(&LayerSpec::conv("c", 70, 40, 40, 25, (3, 3), 1, 1), &cfg);
        let (_, tr) = simulate_timing_traced(&s, &cfg);
        assert!(tr.windows(2).all(|w| w[0].end <= w[1].start));
        assert!(tr.iter().any(|t| t.write));
    }

    #[test]
    fn aggregate_rules() {
        let cfg = HwConfig::default();
        let r = simulate_timing(&sched(&LayerSpec::conv("c", 4, 9, 9, 8, (3, 3), 1, 0), &cfg), &cfg);
        assert_eq!(
            aggregate_network(std::slice::from_ref(&r)).unwrap().total.cycles_total,
            r.total.cycles_total
        );
        let two = aggregate_network(&[r.clone(), r.clone()]).unwrap();
        assert_eq!(two.total.cycles_total, 2 * r.total.cycles_total);
        assert_eq!(two.layers.len(), 2);
        assert!(aggregate_network(&[]).is_err());
    }

    #[test]
    fn zero_work_report_is_zero_percent() {
        let t = LayerTiming::empty("z", 1e9);
        assert_eq!(t.pe_active_pct(), 0.0);
        assert_eq!(t.mem_busy_pct(), 0.0);
    }

    #[test]
    fn csv_has_header_and_total() {
        let cfg = HwConfig::default();
        let r = simulate_timing(&sched(&LayerSpec::conv("c", 4, 9, 9, 8, (3, 3), 1, 0), &cfg), &cfg);
        let text = r.to_csv_string();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CSV_HEADER.join(","));
        assert!(lines[1].starts_with("c,"));
        assert!(lines[2].starts_with("total,"));
    }
}
