//! Expansion of a mapping plan into the ordered phase stream the fetch units
//! and the PE grid execute.
//!
//! Loop order, outermost first: filter rounds, weight passes, output tiles,
//! work items (input channels). Inputs are refetched in full for every round.
//! When a layer needs several weight passes *and* several output tiles, the
//! partial sums of a tile are spilled to external memory at the end of a pass
//! and restored at the start of the next one, so weights are fetched exactly
//! once.

use std::fmt;
use std::ops::Range;

use crate::config::HwConfig;
use crate::error::{Error, Result};
use crate::layer::LayerSpec;
use crate::mapper::{MappingPlan, Strategy};

/// Rectangle of output positions processed with one accumulator fill.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tile {
    pub rows: Range<u32>,
    pub cols: Range<u32>,
}

impl Tile {
    pub fn positions(&self) -> u64 {
        self.rows.len() as u64 * self.cols.len() as u64
    }
}

/// Input rows and columns (unpadded coordinates) a tile reads.
pub fn input_window(layer: &LayerSpec, tile: &Tile) -> (Range<u32>, Range<u32>) {
    let span = |out: &Range<u32>, kernel: u32, extent: u32| -> Range<u32> {
        if out.is_empty() {
            return 0..0;
        }
        let s = layer.stride as i64;
        let p = layer.padding as i64;
        let lo = out.start as i64 * s - p;
        let hi = (out.end as i64 - 1) * s - p + kernel as i64;
        let lo = lo.clamp(0, extent as i64) as u32;
        let hi = hi.clamp(0, extent as i64) as u32;
        lo..hi.max(lo)
    };
    (
        span(&tile.rows, layer.kernel_height, layer.in_height),
        span(&tile.cols, layer.kernel_width, layer.in_width),
    )
}

/// Split the output map into tiles of at most `tile` (rows, cols),
/// row-major.
pub fn tile_output(layer: &LayerSpec, tile: (u32, u32)) -> Vec<Tile> {
    let (ho, wo) = (layer.out_height(), layer.out_width());
    let mut tiles = Vec::new();
    let mut r = 0;
    while r < ho {
        let r1 = (r + tile.0).min(ho);
        let mut c = 0;
        while c < wo {
            let c1 = (c + tile.1).min(wo);
            tiles.push(Tile {
                rows: r..r1,
                cols: c..c1,
            });
            c = c1;
        }
        r = r1;
    }
    tiles
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Phase {
    /// Load the weights of one pass into the SPMs of the round's groups.
    FetchWeights {
        round: u32,
        pass: u32,
        filters: Range<u32>,
        items: Range<u32>,
        groups: Vec<(u32, u32)>,
        addr: u64,
        bytes: u64,
    },
    /// Load the input window of one tile for one work item.
    FetchInputs {
        round: u32,
        pass: u32,
        tile: u32,
        item: u32,
        channels: Range<u32>,
        rows: Range<u32>,
        cols: Range<u32>,
        addr: u64,
        bytes: u64,
    },
    /// Sweep the tile's output positions for one work item.
    Compute {
        round: u32,
        pass: u32,
        tile: u32,
        item: u32,
        cycles: u64,
        active_pes: u32,
    },
    /// Reload spilled partial sums into the accumulators.
    RestorePsums {
        round: u32,
        pass: u32,
        tile: u32,
        bytes: u64,
    },
    /// Park unfinished partial sums in external memory.
    SpillPsums {
        round: u32,
        pass: u32,
        tile: u32,
        bytes: u64,
    },
    /// Drain finished outputs of a tile.
    WriteOut {
        round: u32,
        tile: u32,
        filters: Range<u32>,
        groups: Vec<(u32, u32)>,
        bytes: u64,
    },
}

impl Phase {
    pub fn bytes(&self) -> u64 {
        match self {
            Phase::FetchWeights { bytes, .. }
            | Phase::FetchInputs { bytes, .. }
            | Phase::RestorePsums { bytes, .. }
            | Phase::SpillPsums { bytes, .. }
            | Phase::WriteOut { bytes, .. } => *bytes,
            Phase::Compute { .. } => 0,
        }
    }

    pub fn is_read(&self) -> bool {
        matches!(
            self,
            Phase::FetchWeights { .. } | Phase::FetchInputs { .. } | Phase::RestorePsums { .. }
        )
    }

    pub fn is_write(&self) -> bool {
        matches!(self, Phase::SpillPsums { .. } | Phase::WriteOut { .. })
    }
}

/// Trip counts of the schedule's loop nest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoopNest {
    pub rounds: u32,
    pub passes: u32,
    pub tiles_down: u32,
    pub tiles_across: u32,
    pub items: u32,
    pub items_per_pass: u32,
    pub tile: (u32, u32),
    pub spills: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub plan: MappingPlan,
    pub tiles: Vec<Tile>,
    pub loops: LoopNest,
    pub phases: Vec<Phase>,
    /// External-memory regions and word sizes.
    pub layout: MemoryLayout,
    pub hw: HwConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryLayout {
    pub input_base: u64,
    pub weight_base: u64,
    pub output_base: u64,
    pub spill_base: u64,
    pub input_word: u64,
    pub weight_word: u64,
    pub psum_word: u64,
}

impl MemoryLayout {
    fn for_layer(layer: &LayerSpec, cfg: &HwConfig) -> Self {
        let input = layer.input_elems() * cfg.input_bytes();
        let weights = layer.weight_elems() * cfg.weight_bytes();
        let outputs = layer.output_elems() * cfg.psum_bytes();
        Self {
            input_base: 0,
            weight_base: input,
            output_base: input + weights,
            spill_base: input + weights + outputs,
            input_word: cfg.input_bytes(),
            weight_word: cfg.weight_bytes(),
            psum_word: cfg.psum_bytes(),
        }
    }
}

impl Schedule {
    pub fn layer(&self) -> &LayerSpec {
        &self.plan.layer
    }

    pub fn fetch_weight_bytes(&self) -> u64 {
        self.sum_bytes(|p| matches!(p, Phase::FetchWeights { .. }))
    }

    pub fn fetch_input_bytes(&self) -> u64 {
        self.sum_bytes(|p| matches!(p, Phase::FetchInputs { .. }))
    }

    pub fn write_out_bytes(&self) -> u64 {
        self.sum_bytes(|p| matches!(p, Phase::WriteOut { .. }))
    }

    pub fn spill_bytes(&self) -> u64 {
        self.sum_bytes(|p| matches!(p, Phase::SpillPsums { .. } | Phase::RestorePsums { .. }))
    }

    pub fn total_bytes(&self) -> u64 {
        self.phases.iter().map(Phase::bytes).sum()
    }

    pub fn compute_cycles(&self) -> u64 {
        self.phases
            .iter()
            .map(|p| match p {
                Phase::Compute { cycles, .. } => *cycles,
                _ => 0,
            })
            .sum()
    }

    fn sum_bytes(&self, pred: impl Fn(&Phase) -> bool) -> u64 {
        self.phases.iter().filter(|p| pred(p)).map(Phase::bytes).sum()
    }

    /// Phases that move data from external memory into the fetch units'
    /// destinations (weights and inputs), in order.
    pub fn fetch_phases(&self) -> impl Iterator<Item = &Phase> {
        self.phases
            .iter()
            .filter(|p| matches!(p, Phase::FetchWeights { .. } | Phase::FetchInputs { .. }))
    }

    /// Every compute phase must find its pass's weights and its own inputs
    /// already delivered, and a tile's spilled partial sums restored.
    pub fn check_data_before_use(&self) -> Result<()> {
        let mut weights: Option<(u32, u32)> = None;
        let mut inputs: Option<(u32, u32, u32, u32)> = None;
        let mut restored: Option<(u32, u32, u32)> = None;
        for (i, phase) in self.phases.iter().enumerate() {
            match phase {
                Phase::FetchWeights { round, pass, .. } => weights = Some((*round, *pass)),
                Phase::FetchInputs {
                    round,
                    pass,
                    tile,
                    item,
                    ..
                } => inputs = Some((*round, *pass, *tile, *item)),
                Phase::RestorePsums { round, pass, tile, .. } => restored = Some((*round, *pass, *tile)),
                Phase::Compute {
                    round,
                    pass,
                    tile,
                    item,
                    ..
                } => {
                    if weights != Some((*round, *pass)) {
                        return Err(Error::Capacity(format!("phase {i}: compute before its weights")));
                    }
                    if inputs != Some((*round, *pass, *tile, *item)) {
                        return Err(Error::Capacity(format!("phase {i}: compute before its inputs")));
                    }
                    if self.loops.spills && *pass > 0 && restored != Some((*round, *pass, *tile)) {
                        return Err(Error::Capacity(format!(
                            "phase {i}: compute before its partial sums were restored"
                        )));
                    }
                }
                Phase::SpillPsums { .. } | Phase::WriteOut { .. } => {}
            }
        }
        Ok(())
    }
}

fn round_groups(plan: &MappingPlan, round: usize) -> Vec<(u32, u32)> {
    let mut groups: Vec<(u32, u32)> = plan.rounds[round].chunks.iter().map(|c| c.group).collect();
    groups.sort_unstable();
    groups.dedup();
    groups
}

/// Expand `plan` into its phase stream.
pub fn build_schedule(plan: &MappingPlan, cfg: &HwConfig) -> Result<Schedule> {
    let layer = &plan.layer;
    let buf = cfg.input_buffer_elems();
    if layer.kernel_width as u64 > buf {
        return Err(Error::Capacity(format!(
            "input buffer too small for layer `{}`: a kernel row of {} inputs exceeds {buf} entries",
            layer.label(),
            layer.kernel_width
        )));
    }
    let tiles = tile_output(layer, plan.output_tile);
    let tiles_across = layer.out_width().div_ceil(plan.output_tile.1);
    let tiles_down = layer.out_height().div_ceil(plan.output_tile.0);
    let passes = plan.num_passes();
    let spills = passes > 1 && tiles.len() > 1;
    let layout = MemoryLayout::for_layer(layer, cfg);
    let (ib, wb, pb) = (cfg.input_bytes(), cfg.weight_bytes(), cfg.psum_bytes());
    let plane = layer.in_height as u64 * layer.in_width as u64;
    let filter_stride = layer.in_channels as u64 * layer.kernel_height as u64 * layer.kernel_width as u64;
    let depth = cfg.pipeline.depth as u64;

    let mut phases = Vec::new();
    for (r, round) in plan.rounds.iter().enumerate() {
        let r32 = r as u32;
        let filters = round.filters[0]..round.filters[round.filters.len() - 1] + 1;
        let groups = round_groups(plan, r);
        // Active PEs per item, which only depends on the item's row pass
        // (group blocks) or channel count (columns).
        let active = |item: &crate::mapper::WorkItem| -> u32 {
            round
                .chunks
                .iter()
                .filter(|c| plan.chunk_item_weights(c, item) > 0)
                .map(|c| c.pes().count() as u32)
                .sum()
        };
        for p in 0..passes {
            let items = plan.pass_items(p);
            let weight_count: u64 = round
                .chunks
                .iter()
                .map(|c| {
                    plan.items[items.clone()]
                        .iter()
                        .map(|it| plan.chunk_item_weights(c, it))
                        .sum::<u64>()
                })
                .sum();
            phases.push(Phase::FetchWeights {
                round: r32,
                pass: p,
                filters: filters.clone(),
                items: items.start as u32..items.end as u32,
                groups: groups.clone(),
                addr: layout.weight_base + filters.start as u64 * filter_stride * wb,
                bytes: weight_count * wb,
            });
            for (t, tile) in tiles.iter().enumerate() {
                let t32 = t as u32;
                let psum_bytes = round.filters.len() as u64 * tile.positions() * pb;
                if spills && p > 0 {
                    phases.push(Phase::RestorePsums {
                        round: r32,
                        pass: p,
                        tile: t32,
                        bytes: psum_bytes,
                    });
                }
                let (in_rows, in_cols) = input_window(layer, tile);
                for i in items.clone() {
                    let item = &plan.items[i];
                    let ch = item.channels.clone();
                    let bytes = ch.len() as u64 * in_rows.len() as u64 * in_cols.len() as u64 * ib;
                    let addr = layout.input_base
                        + (ch.start as u64 * plane
                            + in_rows.start as u64 * layer.in_width as u64
                            + in_cols.start as u64)
                            * ib;
                    phases.push(Phase::FetchInputs {
                        round: r32,
                        pass: p,
                        tile: t32,
                        item: i as u32,
                        channels: ch,
                        rows: in_rows.clone(),
                        cols: in_cols.clone(),
                        addr,
                        bytes,
                    });
                    phases.push(Phase::Compute {
                        round: r32,
                        pass: p,
                        tile: t32,
                        item: i as u32,
                        cycles: sweep_cycles(layer, plan.strategy, tile, depth),
                        active_pes: active(item),
                    });
                }
                if p + 1 == passes {
                    phases.push(Phase::WriteOut {
                        round: r32,
                        tile: t32,
                        filters: filters.clone(),
                        groups: groups.clone(),
                        bytes: psum_bytes,
                    });
                } else if spills {
                    phases.push(Phase::SpillPsums {
                        round: r32,
                        pass: p,
                        tile: t32,
                        bytes: psum_bytes,
                    });
                }
            }
        }
    }

    Ok(Schedule {
        plan: plan.clone(),
        loops: LoopNest {
            rounds: plan.num_rounds(),
            passes,
            tiles_down,
            tiles_across,
            items: plan.items.len() as u32,
            items_per_pass: plan.items_per_pass,
            tile: plan.output_tile,
            spills,
        },
        tiles,
        phases,
        layout,
        hw: cfg.clone(),
    })
}

/// Cycles to sweep one tile for one work item. Inputs enter a PE row one
/// per cycle, so a row of `n` outputs at stride `s` takes `n * s` cycles;
/// the pipeline drains once per sweep.
pub fn sweep_cycles(layer: &LayerSpec, _strategy: Strategy, tile: &Tile, pipeline_depth: u64) -> u64 {
    tile.positions() * layer.stride as u64 + pipeline_depth
}

/// Map and schedule every layer of a network.
pub fn schedule_network(layers: &[LayerSpec], cfg: &HwConfig) -> Result<Vec<Schedule>> {
    layers
        .iter()
        .map(|l| {
            let plan = crate::mapper::map_layer(l, cfg)?;
            build_schedule(&plan, cfg)
        })
        .collect()
}

impl Schedule {
    /// Loop nest and byte totals, without the phase listing.
    pub fn summary(&self) -> String {
        let l = &self.loops;
        format!(
            "schedule {}\n  loops: rounds {} > passes {} > tiles {}x{} ({}x{} outputs) > items {}/{}{}\n  \
             bytes: weights {}  inputs {}  outputs {}  spill {}  compute cycles {}\n",
            self.layer().label(),
            l.rounds,
            l.passes,
            l.tiles_down,
            l.tiles_across,
            l.tile.0,
            l.tile.1,
            l.items_per_pass,
            l.items,
            if l.spills { "  [psum spill]" } else { "" },
            self.fetch_weight_bytes(),
            self.fetch_input_bytes(),
            self.write_out_bytes(),
            self.spill_bytes(),
            self.compute_cycles()
        )
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.summary())?;
        for p in &self.phases {
            match p {
                Phase::FetchWeights {
                    round,
                    pass,
                    filters,
                    bytes,
                    addr,
                    ..
                } => writeln!(
                    f,
                    "  r{round} p{pass} fetch-w  filters {filters:?} {bytes} B @{addr:#x}"
                )?,
                Phase::FetchInputs {
                    tile,
                    item,
                    rows,
                    cols,
                    bytes,
                    addr,
                    ..
                } => writeln!(
                    f,
                    "    t{tile} i{item} fetch-i rows {rows:?} cols {cols:?} {bytes} B @{addr:#x}"
                )?,
                Phase::Compute { cycles, active_pes, .. } => {
                    writeln!(f, "    compute {cycles} cyc on {active_pes} PEs")?
                }
                Phase::RestorePsums { tile, bytes, .. } => writeln!(f, "    t{tile} restore {bytes} B")?,
                Phase::SpillPsums { tile, bytes, .. } => writeln!(f, "    t{tile} spill {bytes} B")?,
                Phase::WriteOut { tile, bytes, .. } => writeln!(f, "    t{tile} write-out {bytes} B")?,
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::NetworkSpec;
    use crate::mapper::{map_conv_layer, map_layer};

    fn sched(layer: &LayerSpec, cfg: &HwConfig) -> Schedule {
        build_schedule(&map_layer(layer, cfg).unwrap(), cfg).unwrap()
    }

    #[test]
    fn fig2a_workload() {
        let cfg = HwConfig::with_grid(6, 6, 3, 3);
        let layer = LayerSpec::conv("fig2a", 1, 6, 6, 4, (3, 3), 1, 0);
        let s = build_schedule(&map_conv_layer(&layer, &cfg).unwrap(), &cfg).unwrap();
        assert_eq!(s.loops.rounds, 1);
        assert_eq!(s.loops.passes, 1);
        assert_eq!(s.tiles.len(), 1);
        assert_eq!(s.tiles[0].positions(), 16);
        let computes: Vec<_> = s
            .phases
            .iter()
            .filter_map(|p| match p {
                Phase::Compute { cycles, active_pes, .. } => Some((*cycles, *active_pes)),
                _ => None,
            })
            .collect();
        assert_eq!(computes, vec![(16 + cfg.pipeline.depth as u64, 36)]);
        s.check_data_before_use().unwrap();
    }

    #[test]
    fn vgg_first_layer_weight_bytes() {
        let layer = &NetworkSpec::vgg16_conv().layers[0];
        assert_eq!(sched(layer, &HwConfig::default()).fetch_weight_bytes(), 1728);
    }

    #[test]
    fn empty_network_gives_no_schedules() {
        assert!(schedule_network(&[], &HwConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn byte_totals_match_tensor_sizes() {
        let cfg = HwConfig::default();
        for net in [NetworkSpec::alexnet_conv(), NetworkSpec::vgg16_conv()] {
            for l in &net.layers {
                let s = sched(l, &cfg);
                assert_eq!(s.fetch_weight_bytes(), l.weight_elems(), "{}", l.name);
                assert_eq!(s.write_out_bytes(), l.output_elems() * 2, "{}", l.name);
                assert!(s.fetch_input_bytes() >= l.input_elems(), "{}", l.name);
                s.check_data_before_use().unwrap();
            }
        }
    }

    #[test]
    fn input_window_clips_padding() {
        let layer = LayerSpec::conv("p", 1, 5, 5, 1, (3, 3), 1, 1);
        let tile = Tile { rows: 0..2, cols: 3..5 };
        let (r, c) = input_window(&layer, &tile);
        assert_eq!(r, 0..3);
        assert_eq!(c, 2..5);
    }

    #[test]
    fn tiles_cover_output_once() {
        let layer = LayerSpec::conv("t", 1, 30, 30, 1, (3, 3), 1, 1);
        let tiles = tile_output(&layer, (7, 11));
        let covered: u64 = tiles.iter().map(Tile::positions).sum();
        assert_eq!(covered, 900);
    }

    #[test]
    fn spills_only_with_many_tiles_and_passes() {
        let cfg = HwConfig::default();
        let vgg = NetworkSpec::vgg16_conv();
        // conv2_2: 128 channels in two passes over 14 tiles of 112x112.
        let s = sched(&vgg.layers[3], &cfg);
        assert!(s.loops.spills);
        assert!(s.spill_bytes() > 0);
        // conv5_1: whole 14x14 map fits the accumulators.
        let s = sched(&vgg.layers[10], &cfg);
        assert!(!s.loops.spills);
        assert_eq!(s.spill_bytes(), 0);
    }

    #[test]
    fn tiny_input_buffer_is_an_error() {
        let mut cfg = HwConfig::default();
        cfg.memory.input_buffer_bytes = 2;
        let layer = LayerSpec::conv("x", 1, 8, 8, 1, (3, 3), 1, 0);
        let err = map_layer(&layer, &cfg).unwrap_err();
        assert!(err.to_string().contains("input buffer too small"), "{err}");
    }
}
