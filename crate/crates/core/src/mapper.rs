//! Placement of a layer's filters onto the PE grid.
//!
//! Two strategies exist:
//!
//! * **Group blocks** ([`map_conv_layer`]): each kernel is cut into chunks of
//!   at most `group_rows x group_cols` weights. Column chunks go to
//!   horizontally adjacent groups and row blocks to vertically adjacent
//!   groups, whose accumulators are merged. A 3x3 kernel on 3x3 groups is a
//!   single chunk, so every group hosts one filter.
//! * **Columns** ([`map_pointwise_or_fc`]): 1x1 kernels and FC rows occupy one
//!   full grid column each. Input channels are spread along the column and
//!   the accumulators forward partial sums upwards.
//!
//! Filters that do not fit in one round are placed in later rounds, in
//! ascending filter order, filling blocks row-major.

use std::fmt;
use std::ops::Range;

use crate::config::HwConfig;
use crate::error::{Error, Result};
use crate::layer::{LayerKind, LayerSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    GroupBlocks,
    Columns,
}

/// Channels `start, start + step, ...` (`count` of them).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelSet {
    pub start: u32,
    pub step: u32,
    pub count: u32,
}

impl ChannelSet {
    pub fn contiguous(range: Range<u32>) -> Self {
        Self {
            start: range.start,
            step: 1,
            count: range.end.saturating_sub(range.start),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.count).map(move |i| self.start + i * self.step)
    }

    pub fn contains(&self, c: u32) -> bool {
        c >= self.start && (c - self.start).is_multiple_of(self.step) && (c - self.start) / self.step < self.count
    }
}

/// Shape of one kernel chunk relative to its filter's block of groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkShape {
    pub kernel_rows: Range<u32>,
    pub kernel_cols: Range<u32>,
    /// Group offset inside the filter's block (row, col).
    pub group_offset: (u32, u32),
    /// Temporal pass over kernel row blocks, non-zero only when the kernel is
    /// taller than the grid.
    pub row_pass: u32,
}

impl ChunkShape {
    pub fn area(&self) -> u32 {
        self.kernel_rows.len() as u32 * self.kernel_cols.len() as u32
    }
}

/// One placed piece of a filter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelChunk {
    pub filter: u32,
    pub channels: ChannelSet,
    pub kernel_rows: Range<u32>,
    pub kernel_cols: Range<u32>,
    /// Absolute group coordinates (row, col).
    pub group: (u32, u32),
    /// Absolute PE coordinates of the chunk's top-left weight.
    pub pe_row: u32,
    pub pe_col: u32,
    pub row_pass: u32,
}

impl KernelChunk {
    /// PEs covered by this chunk, as absolute (row, col) pairs.
    pub fn pes(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let rows = self.kernel_rows.len() as u32;
        let cols = self.kernel_cols.len() as u32;
        (0..rows).flat_map(move |r| (0..cols).map(move |c| (self.pe_row + r, self.pe_col + c)))
    }

    pub fn weight_count(&self) -> u64 {
        self.kernel_rows.len() as u64 * self.kernel_cols.len() as u64 * self.channels.count as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardDirection {
    /// Partial sums move to the group above.
    Up,
    /// Partial sums move to the group on the left.
    Left,
}

/// Groups whose accumulators are chained. The first group is the head that
/// ends up holding the merged partial sums.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeChain {
    pub filter: u32,
    pub groups: Vec<(u32, u32)>,
    pub direction: ForwardDirection,
}

impl MergeChain {
    pub fn is_contiguous(&self) -> bool {
        self.groups.windows(2).all(|w| match self.direction {
            ForwardDirection::Up => w[1].1 == w[0].1 && w[1].0 == w[0].0 + 1,
            ForwardDirection::Left => w[1].0 == w[0].0 && w[1].1 == w[0].1 + 1,
        })
    }
}

/// Connection of one input buffer (one per PE row) to the grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MeshMode {
    Idle,
    /// The buffer drives only its own PE row.
    OneToOne,
    /// The buffer is broadcast to several PE rows.
    OneToMany {
        targets: Vec<u32>,
    },
}

/// Unit of work that consumes one SPM slot in every participating PE: a
/// single input channel (group blocks) or a set of up to `grid_rows`
/// channels spread down the columns (columns).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkItem {
    pub row_pass: u32,
    pub channels: Range<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Round {
    pub index: u32,
    pub filters: Vec<u32>,
    pub chunks: Vec<KernelChunk>,
    pub chains: Vec<MergeChain>,
}

/// Assignment of every weight of a layer to a PE, a round and an SPM slot.
#[derive(Debug, Clone, PartialEq)]
pub struct MappingPlan {
    pub layer: LayerSpec,
    pub strategy: Strategy,
    pub rounds: Vec<Round>,
    /// Chunk layout of one filter relative to its block.
    pub chunk_shapes: Vec<ChunkShape>,
    /// Block of groups one filter occupies (rows, cols).
    pub block_groups: (u32, u32),
    pub filters_per_round: u32,
    pub row_passes: u32,
    pub items: Vec<WorkItem>,
    /// SPM slots per PE used by one weight pass.
    pub items_per_pass: u32,
    /// Largest per-PE weight count over a whole round.
    pub max_pe_weights: u64,
    /// Partial sums one filter may keep on chip at once.
    pub psum_capacity: u64,
    /// Output tile (rows, cols) whose partial sums fit on chip.
    pub output_tile: (u32, u32),
    pub mesh: Vec<MeshMode>,
    /// Bytes per stored partial sum.
    pub psum_bytes: u64,
    /// Filters sharing one group (1 for group blocks, `group_cols` for
    /// columns).
    pub group_sharing: u32,
}

impl MappingPlan {
    pub fn num_rounds(&self) -> u32 {
        self.rounds.len() as u32
    }

    pub fn num_passes(&self) -> u32 {
        (self.items.len() as u32).div_ceil(self.items_per_pass)
    }

    /// Items of weight pass `p`.
    pub fn pass_items(&self, p: u32) -> Range<usize> {
        let start = (p * self.items_per_pass) as usize;
        start..(start + self.items_per_pass as usize).min(self.items.len())
    }

    /// Weights of chunk `chunk` that belong to `item`.
    pub fn chunk_item_weights(&self, chunk: &KernelChunk, item: &WorkItem) -> u64 {
        if chunk.row_pass != item.row_pass {
            return 0;
        }
        let chans = item.channels.clone().filter(|c| chunk.channels.contains(*c)).count() as u64;
        chans * chunk.kernel_rows.len() as u64 * chunk.kernel_cols.len() as u64
    }

    /// Sum of all placed weights.
    pub fn placed_weights(&self) -> u64 {
        self.rounds
            .iter()
            .flat_map(|r| &r.chunks)
            .map(KernelChunk::weight_count)
            .sum()
    }

    /// Filters sharing one group's accumulator in a round.
    pub fn filters_per_group(&self) -> u64 {
        self.group_sharing as u64
    }

    /// Check every structural and capacity invariant against `cfg`.
    pub fn check(&self, cfg: &HwConfig) -> Result<()> {
        let l = &self.layer;
        if self.placed_weights() != l.weight_elems() {
            return Err(Error::Capacity(format!(
                "placed {} weights, layer has {}",
                self.placed_weights(),
                l.weight_elems()
            )));
        }
        // Exact cover of every (filter, channel, kernel row, kernel col).
        let (kh, kw, ci) = (
            l.kernel_height as usize,
            l.kernel_width as usize,
            l.in_channels as usize,
        );
        let mut seen = vec![0u64; (l.weight_elems() as usize).div_ceil(64)];
        for round in &self.rounds {
            let mut slots = std::collections::HashSet::new();
            for ch in &round.chunks {
                for c in ch.channels.iter() {
                    for r in ch.kernel_rows.clone() {
                        for k in ch.kernel_cols.clone() {
                            let idx = ((ch.filter as usize * ci + c as usize) * kh + r as usize) * kw + k as usize;
                            if seen[idx / 64] & (1 << (idx % 64)) != 0 {
                                return Err(Error::Capacity(format!(
                                    "weight ({}, {c}, {r}, {k}) placed twice",
                                    ch.filter
                                )));
                            }
                            seen[idx / 64] |= 1 << (idx % 64);
                        }
                    }
                }
                if ch.pe_row + ch.kernel_rows.len() as u32 > cfg.grid.rows
                    || ch.pe_col + ch.kernel_cols.len() as u32 > cfg.grid.cols
                {
                    return Err(Error::Capacity(format!(
                        "chunk of filter {} leaves the grid",
                        ch.filter
                    )));
                }
                if ch.kernel_rows.len() as u32 > cfg.grid.group_rows
                    || ch.kernel_cols.len() as u32 > cfg.grid.group_cols
                {
                    return Err(Error::Capacity("chunk larger than a group".into()));
                }
                // A PE may hold several chunks only in different row passes
                // (different SPM slots).
                for pe in ch.pes() {
                    if !slots.insert((pe, ch.row_pass)) {
                        return Err(Error::Capacity(format!(
                            "PE {pe:?} assigned twice in round {} pass {}",
                            round.index, ch.row_pass
                        )));
                    }
                }
            }
            if round.chains.iter().any(|c| !c.is_contiguous()) {
                return Err(Error::Capacity("merge chain not contiguous".into()));
            }
        }
        if seen.iter().map(|w| w.count_ones() as u64).sum::<u64>() != l.weight_elems() {
            return Err(Error::Capacity("some weights were never placed".into()));
        }
        if self.items_per_pass as u64 > cfg.spm_weight_capacity() {
            return Err(Error::Capacity(format!(
                "{} weights per PE per pass exceed the SPM ({} weights)",
                self.items_per_pass,
                cfg.spm_weight_capacity()
            )));
        }
        let banks = cfg.spm_weight_capacity().div_ceil(cfg.spm_bank_weights());
        if (self.items_per_pass as u64).div_ceil(banks) > cfg.spm_bank_weights() {
            return Err(Error::Capacity("SPM bank overflow".into()));
        }
        let tile = self.output_tile.0 as u64 * self.output_tile.1 as u64;
        if self.psum_demand_per_group(tile) > cfg.memory.accumulator_bytes as u64 {
            return Err(Error::Capacity(format!(
                "tile of {tile} partial sums overflows the accumulators"
            )));
        }
        Ok(())
    }

    /// Worst-case accumulator bytes one group needs for a tile of
    /// `tile_positions` outputs per filter.
    pub fn psum_demand_per_group(&self, tile_positions: u64) -> u64 {
        let per_filter_groups = match self.strategy {
            Strategy::GroupBlocks => self.block_groups.0 as u64 * self.block_groups.1 as u64,
            Strategy::Columns => self.block_groups.0 as u64,
        };
        tile_positions.div_ceil(per_filter_groups) * self.filters_per_group() * self.psum_bytes
    }
}

/// Split an `h x w` kernel into group-sized chunks.
///
/// Column chunks of at most `group_cols` weights go to horizontally adjacent
/// groups; row blocks of at most `group_rows` go to vertically adjacent
/// groups. Row blocks beyond the grid height wrap into later row passes.
pub fn decompose_kernel(kernel_height: u32, kernel_width: u32, cfg: &HwConfig) -> Result<Vec<ChunkShape>> {
    let (gr, gc) = (cfg.grid.group_rows, cfg.grid.group_cols);
    let col_groups = kernel_width.div_ceil(gc);
    if kernel_width > cfg.grid.cols || col_groups > cfg.group_grid_cols() {
        return Err(Error::Unmappable {
            layer: String::new(),
            reason: format!(
                "kernel width {kernel_width} exceeds the grid width of {} PEs",
                cfg.grid.cols
            ),
        });
    }
    let row_blocks = kernel_height.div_ceil(gr);
    let grid_group_rows = cfg.group_grid_rows();
    let mut shapes = Vec::new();
    for rb in 0..row_blocks {
        let rows = rb * gr..((rb + 1) * gr).min(kernel_height);
        for cb in 0..col_groups {
            let cols = cb * gc..((cb + 1) * gc).min(kernel_width);
            shapes.push(ChunkShape {
                kernel_rows: rows.clone(),
                kernel_cols: cols,
                group_offset: (rb % grid_group_rows, cb),
                row_pass: rb / grid_group_rows,
            });
        }
    }
    Ok(shapes)
}

/// Largest output tile (rows, cols) whose partial sums fit in
/// `psum_capacity` entries and whose input rows fit one input buffer.
fn choose_output_tile(layer: &LayerSpec, psum_capacity: u64, cfg: &HwConfig) -> Result<(u32, u32)> {
    let (ho, wo) = (layer.out_height(), layer.out_width());
    let buf = cfg.input_buffer_elems();
    let kw = layer.kernel_width as u64;
    if kw > buf {
        return Err(Error::Capacity(format!(
            "input buffer too small: a kernel row of {kw} inputs does not fit {buf} entries"
        )));
    }
    // Input segment of `cols` outputs spans (cols - 1) * stride + kw inputs.
    let max_cols_buf = (buf - kw) / layer.stride as u64 + 1;
    let cols = (wo as u64).min(max_cols_buf).min(psum_capacity).max(1);
    let rows = (psum_capacity / cols).clamp(1, ho as u64);
    if psum_capacity == 0 {
        return Err(Error::Capacity("accumulators cannot hold a single partial sum".into()));
    }
    Ok((rows as u32, cols as u32))
}

fn weight_slots(cfg: &HwConfig, layer: &LayerSpec) -> Result<u32> {
    let slots = cfg.spm_weight_capacity();
    if slots == 0 {
        return Err(Error::Capacity(format!(
            "layer `{}`: SPM of {} bytes cannot hold one weight",
            layer.label(),
            cfg.memory.pe_spm_bytes
        )));
    }
    Ok(slots.min(u32::MAX as u64) as u32)
}

fn tag_layer(err: Error, layer: &LayerSpec) -> Error {
    match err {
        Error::Unmappable { reason, .. } => Error::Unmappable {
            layer: layer.label().to_string(),
            reason,
        },
        e => e,
    }
}

/// Map a convolution onto blocks of PE groups.
pub fn map_conv_layer(layer: &LayerSpec, cfg: &HwConfig) -> Result<MappingPlan> {
    layer.validate()?;
    cfg.check()?;
    let shapes = decompose_kernel(layer.kernel_height, layer.kernel_width, cfg).map_err(|e| tag_layer(e, layer))?;
    let (gr, gc) = (cfg.grid.group_rows, cfg.grid.group_cols);
    let block_rows = shapes.iter().map(|s| s.group_offset.0 + 1).max().unwrap_or(1);
    let block_cols = shapes.iter().map(|s| s.group_offset.1 + 1).max().unwrap_or(1);
    let row_passes = shapes.iter().map(|s| s.row_pass + 1).max().unwrap_or(1);
    let blocks_down = cfg.group_grid_rows() / block_rows;
    let blocks_across = cfg.group_grid_cols() / block_cols;
    let filters_per_round = blocks_down * blocks_across;
    debug_assert!(filters_per_round > 0);

    let ci = layer.in_channels;
    let mut rounds = Vec::new();
    let mut filter = 0;
    while filter < layer.out_channels {
        let index = rounds.len() as u32;
        let mut round = Round {
            index,
            filters: Vec::new(),
            chunks: Vec::new(),
            chains: Vec::new(),
        };
        for slot in 0..filters_per_round {
            if filter >= layer.out_channels {
                break;
            }
            let anchor = ((slot / blocks_across) * block_rows, (slot % blocks_across) * block_cols);
            round.filters.push(filter);
            for s in &shapes {
                let group = (anchor.0 + s.group_offset.0, anchor.1 + s.group_offset.1);
                round.chunks.push(KernelChunk {
                    filter,
                    channels: ChannelSet::contiguous(0..ci),
                    kernel_rows: s.kernel_rows.clone(),
                    kernel_cols: s.kernel_cols.clone(),
                    group,
                    pe_row: group.0 * gr,
                    pe_col: group.1 * gc,
                    row_pass: s.row_pass,
                });
            }
            if block_cols > 1 {
                for r in 0..block_rows {
                    round.chains.push(MergeChain {
                        filter,
                        groups: (0..block_cols).map(|c| (anchor.0 + r, anchor.1 + c)).collect(),
                        direction: ForwardDirection::Left,
                    });
                }
            }
            if block_rows > 1 {
                round.chains.push(MergeChain {
                    filter,
                    groups: (0..block_rows).map(|r| (anchor.0 + r, anchor.1)).collect(),
                    direction: ForwardDirection::Up,
                });
            }
            filter += 1;
        }
        rounds.push(round);
    }

    let items: Vec<WorkItem> = (0..row_passes)
        .flat_map(|rp| {
            (0..ci).map(move |c| WorkItem {
                row_pass: rp,
                channels: c..c + 1,
            })
        })
        .collect();
    let slots = weight_slots(cfg, layer)?;
    let items_per_pass = slots.min(items.len() as u32);
    let psum_capacity = cfg.accumulator_psums() * (block_rows * block_cols) as u64;
    let output_tile = choose_output_tile(layer, psum_capacity, cfg)?;

    // Each input buffer broadcasts to the PE rows at the same offset inside
    // every block row.
    let block_pe_rows = block_rows * gr;
    let active_rows = blocks_down * block_pe_rows;
    let used_kernel_rows = layer.kernel_height.min(block_pe_rows);
    let mesh = (0..cfg.grid.rows)
        .map(|r| {
            if r >= active_rows || r % block_pe_rows >= used_kernel_rows.max(1) {
                MeshMode::Idle
            } else {
                let targets = (0..cfg.grid.rows)
                    .filter(|t| *t < active_rows && t % block_pe_rows % gr == r % gr)
                    .collect();
                MeshMode::OneToMany { targets }
            }
        })
        .collect();

    Ok(MappingPlan {
        layer: layer.clone(),
        strategy: Strategy::GroupBlocks,
        rounds,
        chunk_shapes: shapes,
        block_groups: (block_rows, block_cols),
        filters_per_round,
        row_passes,
        max_pe_weights: row_passes as u64 * ci as u64,
        items,
        items_per_pass,
        psum_capacity,
        output_tile,
        mesh,
        psum_bytes: cfg.psum_bytes(),
        group_sharing: 1,
    })
}

/// Map a 1x1 convolution or an FC layer with one filter per grid column.
pub fn map_pointwise_or_fc(layer: &LayerSpec, cfg: &HwConfig) -> Result<MappingPlan> {
    layer.validate()?;
    cfg.check()?;
    if !layer.is_pointwise() {
        return Err(Error::Unsupported(format!(
            "layer `{}` has a {}x{} kernel; column mapping needs 1x1",
            layer.label(),
            layer.kernel_height,
            layer.kernel_width
        )));
    }
    let (gr, gc) = (cfg.grid.group_rows, cfg.grid.group_cols);
    let rows = cfg.grid.rows;
    let ci = layer.in_channels;
    let used_rows = rows.min(ci);
    let filters_per_round = cfg.grid.cols;
    let mut rounds = Vec::new();
    let mut filter = 0;
    while filter < layer.out_channels {
        let mut round = Round {
            index: rounds.len() as u32,
            filters: Vec::new(),
            chunks: Vec::new(),
            chains: Vec::new(),
        };
        for col in 0..filters_per_round {
            if filter >= layer.out_channels {
                break;
            }
            round.filters.push(filter);
            // Channel k sits k-th from the bottom of the column, wrapping
            // every `rows` channels.
            for k in 0..used_rows {
                let pe_row = rows - 1 - k;
                round.chunks.push(KernelChunk {
                    filter,
                    channels: ChannelSet {
                        start: k,
                        step: rows,
                        count: (ci - k).div_ceil(rows),
                    },
                    kernel_rows: 0..1,
                    kernel_cols: 0..1,
                    group: (pe_row / gr, col / gc),
                    pe_row,
                    pe_col: col,
                    row_pass: 0,
                });
            }
            let top_group = (rows - used_rows) / gr;
            round.chains.push(MergeChain {
                filter,
                groups: (top_group..cfg.group_grid_rows()).map(|g| (g, col / gc)).collect(),
                direction: ForwardDirection::Up,
            });
            filter += 1;
        }
        rounds.push(round);
    }
    let items: Vec<WorkItem> = (0..ci.div_ceil(rows))
        .map(|g| WorkItem {
            row_pass: 0,
            channels: g * rows..((g + 1) * rows).min(ci),
        })
        .collect();
    let slots = weight_slots(cfg, layer)?;
    let items_per_pass = slots.min(items.len() as u32);
    let column_groups = cfg.group_grid_rows();
    let psum_capacity = cfg.accumulator_psums() * column_groups as u64 / gc as u64;
    let output_tile = choose_output_tile(layer, psum_capacity, cfg)?;
    let mesh = (0..rows)
        .map(|r| {
            if r >= rows - used_rows {
                MeshMode::OneToOne
            } else {
                MeshMode::Idle
            }
        })
        .collect();

    Ok(MappingPlan {
        layer: layer.clone(),
        strategy: Strategy::Columns,
        rounds,
        chunk_shapes: vec![ChunkShape {
            kernel_rows: 0..1,
            kernel_cols: 0..1,
            group_offset: (0, 0),
            row_pass: 0,
        }],
        block_groups: (column_groups, 1),
        filters_per_round,
        row_passes: 1,
        max_pe_weights: ci.div_ceil(rows) as u64,
        items,
        items_per_pass,
        psum_capacity,
        output_tile,
        mesh,
        psum_bytes: cfg.psum_bytes(),
        group_sharing: gc,
    })
}

/// Pick the strategy the accelerator uses for `layer`: columns for 1x1 and
/// FC layers, group blocks for everything else.
pub fn map_layer(layer: &LayerSpec, cfg: &HwConfig) -> Result<MappingPlan> {
    if layer.kind == LayerKind::Fc || layer.is_pointwise() {
        map_pointwise_or_fc(layer, cfg)
    } else {
        map_conv_layer(layer, cfg)
    }
}

/// Reuse a plan achieves for its layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReuseMetrics {
    /// Times each input pixel is used while resident: kernel area times the
    /// filters sharing a round.
    pub input_reuse: u64,
    /// Times each filter is applied across one input channel.
    pub conv_reuse: u64,
    /// PEs adding into one output pixel in the same cycle.
    pub psum_share_degree: u64,
}

pub fn reuse_metrics(layer: &LayerSpec, plan: &MappingPlan) -> ReuseMetrics {
    let co_scheduled = plan.rounds.iter().map(|r| r.filters.len()).max().unwrap_or(0) as u64;
    let area = layer.kernel_height as u64 * layer.kernel_width as u64;
    let psum_share_degree = match plan.strategy {
        Strategy::GroupBlocks => {
            let rows_per_pass = plan.block_groups.0 as u64 * plan.chunk_shapes[0].kernel_rows.len() as u64;
            (layer.kernel_height as u64).min(rows_per_pass) * layer.kernel_width as u64
        }
        Strategy::Columns => plan.items.first().map(|i| i.channels.len() as u64).unwrap_or(0),
    };
    ReuseMetrics {
        input_reuse: area * co_scheduled,
        conv_reuse: layer.out_height() as u64 * layer.out_width() as u64,
        psum_share_degree,
    }
}

impl fmt::Display for MappingPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let l = &self.layer;
        writeln!(f, "layer {} ({:?})", l.label(), self.strategy)?;
        writeln!(
            f,
            "  rounds {}  filters/round {}  block {}x{} groups  row passes {}",
            self.rounds.len(),
            self.filters_per_round,
            self.block_groups.0,
            self.block_groups.1,
            self.row_passes
        )?;
        writeln!(
            f,
            "  weight passes {} x {} slots  psum capacity {}  output tile {}x{}",
            self.num_passes(),
            self.items_per_pass,
            self.psum_capacity,
            self.output_tile.0,
            self.output_tile.1
        )?;
        for (i, m) in self.mesh.iter().enumerate() {
            match m {
                MeshMode::Idle => {}
                MeshMode::OneToOne => writeln!(f, "  buffer {i:>2}: one-to-one")?,
                MeshMode::OneToMany { targets } => writeln!(f, "  buffer {i:>2}: one-to-many -> rows {targets:?}")?,
            }
        }
        for round in &self.rounds {
            writeln!(f, "round {}", round.index)?;
            for ch in &round.chunks {
                writeln!(
                    f,
                    "  group ({},{}) pe ({:>2},{:>2}) filter {:>4} rows {:?} cols {:?} ch {}+{}k x{} pass {}",
                    ch.group.0,
                    ch.group.1,
                    ch.pe_row,
                    ch.pe_col,
                    ch.filter,
                    ch.kernel_rows,
                    ch.kernel_cols,
                    ch.channels.start,
                    ch.channels.step,
                    ch.channels.count,
                    ch.row_pass
                )?;
            }
            for chain in &round.chains {
                writeln!(
                    f,
                    "  merge {:?} filter {} {:?}",
                    chain.direction, chain.filter, chain.groups
                )?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn six_by_six() -> HwConfig {
        HwConfig::with_grid(6, 6, 3, 3)
    }

    #[test]
    fn four_3x3_filters_on_6x6_grid() {
        let layer = LayerSpec::conv("fig2a", 1, 6, 6, 4, (3, 3), 1, 0);
        let plan = map_conv_layer(&layer, &six_by_six()).unwrap();
        assert_eq!(plan.rounds.len(), 1);
        let groups: Vec<_> = plan.rounds[0].chunks.iter().map(|c| (c.filter, c.group)).collect();
        assert_eq!(groups, vec![(0, (0, 0)), (1, (0, 1)), (2, (1, 0)), (3, (1, 1))]);
        // Every active buffer broadcasts to one PE row per group row.
        for m in &plan.mesh {
            assert!(matches!(m, MeshMode::OneToMany { targets } if targets.len() == 2));
        }
        plan.check(&six_by_six()).unwrap();
    }

    #[test]
    fn forty_filters_take_two_rounds() {
        let layer = LayerSpec::conv("c", 8, 16, 16, 40, (3, 3), 1, 1);
        let cfg = HwConfig::default();
        let plan = map_conv_layer(&layer, &cfg).unwrap();
        assert_eq!(plan.rounds.len(), 2);
        assert_eq!(plan.rounds[0].filters.len(), 20);
        assert_eq!(plan.rounds[1].filters, (20..40).collect::<Vec<_>>());
        plan.check(&cfg).unwrap();
    }

    #[test]
    fn single_1x1_filter_uses_one_pe() {
        let layer = LayerSpec::conv("p", 1, 4, 4, 1, (1, 1), 1, 0);
        let plan = map_conv_layer(&layer, &HwConfig::default()).unwrap();
        assert_eq!(plan.rounds.len(), 1);
        assert_eq!(plan.rounds[0].chunks.len(), 1);
        assert_eq!(plan.rounds[0].chunks[0].pes().count(), 1);
    }

    #[test]
    fn five_by_five_decomposes_into_four_chunks() {
        let shapes = decompose_kernel(5, 5, &HwConfig::default()).unwrap();
        let dims: Vec<_> = shapes
            .iter()
            .map(|s| (s.kernel_rows.len(), s.kernel_cols.len(), s.group_offset))
            .collect();
        assert_eq!(
            dims,
            vec![(3, 3, (0, 0)), (3, 2, (0, 1)), (2, 3, (1, 0)), (2, 2, (1, 1))]
        );
    }

    #[test]
    fn small_kernels_are_single_chunks() {
        let s = decompose_kernel(3, 3, &HwConfig::default()).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].area(), 9);
        let s = decompose_kernel(1, 1, &HwConfig::default()).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].area(), 1);
    }

    #[test]
    fn kernel_wider_than_grid_is_unmappable() {
        let cfg = HwConfig::with_grid(6, 6, 3, 3);
        assert!(matches!(decompose_kernel(3, 7, &cfg), Err(Error::Unmappable { .. })));
        let layer = LayerSpec::conv("wide", 1, 16, 16, 1, (3, 7), 1, 0);
        match map_conv_layer(&layer, &cfg) {
            Err(Error::Unmappable { layer, reason }) => {
                assert_eq!(layer, "wide");
                assert!(reason.contains("width"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tall_kernels_wrap_into_row_passes() {
        // 3 PE rows, so a 7-row kernel needs three row passes.
        let cfg = HwConfig::with_grid(3, 9, 3, 3);
        let layer = LayerSpec::conv("tall", 2, 10, 10, 3, (7, 3), 1, 0);
        let plan = map_conv_layer(&layer, &cfg).unwrap();
        assert_eq!(plan.row_passes, 3);
        assert_eq!(plan.rounds.len(), 1);
        plan.check(&cfg).unwrap();
    }

    #[test]
    fn eleven_by_eleven_takes_a_4x4_block() {
        let layer = &NetworkSpecFixture::alex_conv1();
        let plan = map_conv_layer(layer, &HwConfig::default()).unwrap();
        assert_eq!(plan.block_groups, (4, 4));
        assert_eq!(plan.filters_per_round, 1);
        assert_eq!(plan.rounds.len(), 96);
    }

    struct NetworkSpecFixture;
    impl NetworkSpecFixture {
        fn alex_conv1() -> LayerSpec {
            crate::layer::NetworkSpec::alexnet_conv().layers[0].clone()
        }
    }

    #[test]
    fn pointwise_columns_forward_upwards() {
        let layer = LayerSpec::conv("fig2b", 2, 6, 6, 6, (1, 1), 1, 0);
        let cfg = six_by_six();
        let plan = map_pointwise_or_fc(&layer, &cfg).unwrap();
        assert_eq!(plan.rounds.len(), 1);
        let chain = &plan.rounds[0].chains[0];
        assert_eq!(chain.direction, ForwardDirection::Up);
        // Two channels sit in the bottom two PE rows, inside the lower group.
        let rows: Vec<_> = plan.rounds[0]
            .chunks
            .iter()
            .filter(|c| c.filter == 0)
            .map(|c| c.pe_row)
            .collect();
        assert_eq!(rows, vec![5, 4]);
        plan.check(&cfg).unwrap();

        // Deep enough to span both groups of the column.
        let layer = LayerSpec::conv("deep", 12, 6, 6, 6, (1, 1), 1, 0);
        let plan = map_pointwise_or_fc(&layer, &cfg).unwrap();
        assert_eq!(plan.rounds[0].chains[0].groups, vec![(0, 0), (1, 0)]);
        assert_eq!(plan.items.len(), 2);
        plan.check(&cfg).unwrap();
    }

    #[test]
    fn fc_rows_are_filters() {
        let layer = LayerSpec::fc("fc", 30, 40);
        let cfg = HwConfig::default();
        let plan = map_pointwise_or_fc(&layer, &cfg).unwrap();
        assert_eq!(plan.rounds.len(), 3);
        assert_eq!(plan.placed_weights(), 1200);
        plan.check(&cfg).unwrap();

        let scalar = LayerSpec::fc("s", 1, 1);
        let plan = map_pointwise_or_fc(&scalar, &cfg).unwrap();
        assert_eq!(plan.rounds.len(), 1);
        assert_eq!(plan.rounds[0].chunks.len(), 1);
        assert_eq!(plan.num_passes(), 1);
    }

    #[test]
    fn reuse() {
        let layer = LayerSpec::conv("r", 3, 56, 56, 64, (3, 3), 1, 1);
        let mut cfg = HwConfig::with_grid(24, 24, 3, 3);
        cfg.memory.accumulator_bytes = 8192;
        let plan = map_conv_layer(&layer, &cfg).unwrap();
        let m = reuse_metrics(&layer, &plan);
        assert_eq!(m.input_reuse, 576);
        assert_eq!(m.conv_reuse, 3136);
        assert_eq!(m.psum_share_degree, 9);

        let layer = LayerSpec::conv("c1", 3, 227, 227, 96, (11, 11), 4, 0);
        let plan = map_conv_layer(&layer, &HwConfig::default()).unwrap();
        assert_eq!(reuse_metrics(&layer, &plan).conv_reuse, 3025);

        let layer = LayerSpec::conv("one", 1, 4, 4, 1, (1, 1), 1, 0);
        let plan = map_conv_layer(&layer, &HwConfig::default()).unwrap();
        assert_eq!(reuse_metrics(&layer, &plan).input_reuse, 1);
    }

    #[test]
    fn vgg_tiles_fit_accumulators() {
        let cfg = HwConfig::default();
        for l in crate::layer::NetworkSpec::vgg16_conv().layers {
            let plan = map_layer(&l, &cfg).unwrap();
            plan.check(&cfg).unwrap();
            let t = plan.output_tile;
            assert!((t.0 * t.1) as u64 <= cfg.accumulator_psums());
        }
    }
}
