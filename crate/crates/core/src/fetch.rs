//! Fetch-unit programs: affine loop nests that regenerate a schedule's
//! external-memory reads.
//!
//! The weight unit walks (round, pass) and streams one slice of every filter
//! in the round per iteration. The input unit walks (round, pass, tile row,
//! tile column, item) and streams the clipped input window of a tile for one
//! channel block. Loop trip counts, strides and base addresses fully describe
//! both streams; [`FetchProgram::replay`] expands them back into phases.

use std::fmt;
use std::ops::Range;

use crate::layer::LayerSpec;
use crate::schedule::{input_window, Phase, Schedule, Tile};

/// One level of a fetch unit's loop nest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoopLevel {
    pub name: &'static str,
    pub bound: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightProgram {
    /// round, pass
    pub loops: Vec<LoopLevel>,
    pub base: u64,
    /// Bytes between consecutive filters in external memory.
    pub filter_stride: u64,
    pub filters_per_round: u32,
    pub out_channels: u32,
    pub items_per_pass: u32,
    pub items: u32,
    /// Weights of one filter that belong to each work item.
    pub item_weights: Vec<u64>,
    /// Groups written by each filter slot of a round.
    pub slot_groups: Vec<Vec<(u32, u32)>>,
    pub word_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputProgram {
    /// round, pass, tile row, tile column, item
    pub loops: Vec<LoopLevel>,
    pub base: u64,
    pub channel_stride: u64,
    pub row_stride: u64,
    pub items: u32,
    pub items_per_pass: u32,
    /// Items per kernel row pass, and channels per item.
    pub items_per_row_pass: u32,
    pub channels_per_item: u32,
    pub in_channels: u32,
    pub tile: (u32, u32),
    pub out_dims: (u32, u32),
    pub word_bytes: u64,
    layer: LayerSpec,
}

/// Programs of the weight and input fetch units for one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchProgram {
    pub weights: WeightProgram,
    pub inputs: InputProgram,
}

pub fn emit_fetch_program(schedule: &Schedule) -> FetchProgram {
    let plan = &schedule.plan;
    let layer = &plan.layer;
    let l = &schedule.loops;
    let (in_bytes, w_bytes) = (schedule.layout.input_word, schedule.layout.weight_word);

    let first = &plan.rounds[0];
    let f0 = first.filters[0];
    let item_weights = plan
        .items
        .iter()
        .map(|it| {
            first
                .chunks
                .iter()
                .filter(|c| c.filter == f0)
                .map(|c| plan.chunk_item_weights(c, it))
                .sum()
        })
        .collect();
    let mut slot_groups = vec![Vec::new(); plan.filters_per_round as usize];
    for c in &first.chunks {
        let slot = (c.filter - f0) as usize;
        if !slot_groups[slot].contains(&c.group) {
            slot_groups[slot].push(c.group);
        }
    }

    let items_per_row_pass = l.items / plan.row_passes;
    let channels_per_item = plan.items[0].channels.len() as u32;

    FetchProgram {
        weights: WeightProgram {
            loops: vec![
                LoopLevel {
                    name: "round",
                    bound: l.rounds,
                },
                LoopLevel {
                    name: "pass",
                    bound: l.passes,
                },
            ],
            base: schedule.layout.weight_base,
            filter_stride: layer.in_channels as u64 * layer.kernel_height as u64 * layer.kernel_width as u64 * w_bytes,
            filters_per_round: plan.filters_per_round,
            out_channels: layer.out_channels,
            items_per_pass: l.items_per_pass,
            items: l.items,
            item_weights,
            slot_groups,
            word_bytes: w_bytes,
        },
        inputs: InputProgram {
            loops: vec![
                LoopLevel {
                    name: "round",
                    bound: l.rounds,
                },
                LoopLevel {
                    name: "pass",
                    bound: l.passes,
                },
                LoopLevel {
                    name: "tile_row",
                    bound: l.tiles_down,
                },
                LoopLevel {
                    name: "tile_col",
                    bound: l.tiles_across,
                },
                LoopLevel {
                    name: "item",
                    bound: l.items_per_pass,
                },
            ],
            base: schedule.layout.input_base,
            channel_stride: layer.in_height as u64 * layer.in_width as u64 * in_bytes,
            row_stride: layer.in_width as u64 * in_bytes,
            items: l.items,
            items_per_pass: l.items_per_pass,
            items_per_row_pass,
            channels_per_item,
            in_channels: layer.in_channels,
            tile: l.tile,
            out_dims: (layer.out_height(), layer.out_width()),
            word_bytes: in_bytes,
            layer: layer.clone(),
        },
    }
}

impl WeightProgram {
    fn round_filters(&self, r: u32) -> Range<u32> {
        let start = r * self.filters_per_round;
        start..(start + self.filters_per_round).min(self.out_channels)
    }

    fn pass_items(&self, p: u32) -> Range<u32> {
        let start = p * self.items_per_pass;
        start..(start + self.items_per_pass).min(self.items)
    }

    fn phase(&self, r: u32, p: u32) -> Phase {
        let filters = self.round_filters(r);
        let items = self.pass_items(p);
        let per_filter: u64 = self.item_weights[items.start as usize..items.end as usize].iter().sum();
        let mut groups: Vec<(u32, u32)> = self.slot_groups[..filters.len()].concat();
        groups.sort_unstable();
        groups.dedup();
        Phase::FetchWeights {
            round: r,
            pass: p,
            addr: self.base + filters.start as u64 * self.filter_stride,
            bytes: filters.len() as u64 * per_filter * self.word_bytes,
            filters,
            items,
            groups,
        }
    }
}

impl InputProgram {
    fn phase(&self, r: u32, p: u32, tr: u32, tc: u32, i: u32) -> Option<Phase> {
        let item = p * self.items_per_pass + i;
        if item >= self.items {
            return None;
        }
        let c0 = (item % self.items_per_row_pass) * self.channels_per_item;
        let channels = c0..(c0 + self.channels_per_item).min(self.in_channels);
        let r0 = tr * self.tile.0;
        let q0 = tc * self.tile.1;
        let tile = Tile {
            rows: r0..(r0 + self.tile.0).min(self.out_dims.0),
            cols: q0..(q0 + self.tile.1).min(self.out_dims.1),
        };
        let (rows, cols) = input_window(&self.layer, &tile);
        let bytes = channels.len() as u64 * rows.len() as u64 * cols.len() as u64 * self.word_bytes;
        let addr = self.base
            + channels.start as u64 * self.channel_stride
            + rows.start as u64 * self.row_stride
            + cols.start as u64 * self.word_bytes;
        Some(Phase::FetchInputs {
            round: r,
            pass: p,
            tile: tr * self.loops[3].bound + tc,
            item,
            channels,
            rows,
            cols,
            addr,
            bytes,
        })
    }
}

impl FetchProgram {
    /// Execute both loop nests in lock step and collect the fetches.
    pub fn replay(&self) -> Vec<Phase> {
        let b = |i: usize| self.inputs.loops[i].bound;
        let mut out = Vec::new();
        for r in 0..b(0) {
            for p in 0..b(1) {
                out.push(self.weights.phase(r, p));
                for tr in 0..b(2) {
                    for tc in 0..b(3) {
                        for i in 0..b(4) {
                            out.extend(self.inputs.phase(r, p, tr, tc, i));
                        }
                    }
                }
            }
        }
        out
    }
}

impl fmt::Display for FetchProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nest = |loops: &[LoopLevel]| {
            loops
                .iter()
                .map(|l| format!("{}<{}", l.name, l.bound))
                .collect::<Vec<_>>()
                .join(" > ")
        };
        let w = &self.weights;
        writeln!(f, "weight unit: {}", nest(&w.loops))?;
        writeln!(
            f,
            "  base {:#x}  filter stride {}  filters/round {}  items/pass {}",
            w.base, w.filter_stride, w.filters_per_round, w.items_per_pass
        )?;
        let i = &self.inputs;
        writeln!(f, "input unit: {}", nest(&i.loops))?;
        writeln!(
            f,
            "  base {:#x}  channel stride {}  row stride {}  tile {}x{}  channels/item {}",
            i.base, i.channel_stride, i.row_stride, i.tile.0, i.tile.1, i.channels_per_item
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::HwConfig;
    use crate::mapper::map_layer;
    use crate::schedule::build_schedule;

    fn program(layer: &LayerSpec, cfg: &HwConfig) -> (Schedule, FetchProgram) {
        let s = build_schedule(&map_layer(layer, cfg).unwrap(), cfg).unwrap();
        let p = emit_fetch_program(&s);
        (s, p)
    }

    #[test]
    fn unit_conv_has_unit_bounds() {
        let (_, p) = program(&LayerSpec::conv("u", 1, 1, 1, 1, (1, 1), 1, 0), &HwConfig::default());
        assert!(p.weights.loops.iter().chain(&p.inputs.loops).all(|l| l.bound == 1));
    }

    #[test]
    fn replay_matches_schedule() {
        let cfg = HwConfig::default();
        for layer in [
            LayerSpec::conv("a", 5, 9, 7, 30, (3, 3), 2, 1),
            LayerSpec::conv("b", 70, 12, 12, 5, (5, 5), 1, 2),
            LayerSpec::conv("c", 3, 16, 16, 2, (11, 11), 4, 0),
            LayerSpec::fc("f", 30, 100),
        ] {
            let (s, p) = program(&layer, &cfg);
            let expected: Vec<Phase> = s.fetch_phases().cloned().collect();
            assert_eq!(p.replay(), expected, "{}", layer.name);
        }
    }

    #[test]
    fn round_loop_follows_mapper() {
        let cfg = HwConfig::default();
        let (s, p) = program(&LayerSpec::conv("x", 8, 10, 10, 45, (3, 3), 1, 1), &cfg);
        assert_eq!(p.weights.loops[0].bound, 3);
        assert_eq!(p.inputs.loops[0].bound, s.plan.num_rounds());
    }
}
