//! Bit-exact execution of a schedule and the direct convolution it must
//! reproduce.
//!
//! Accumulators are modelled wide. A value is narrowed to `psum_bits` only
//! when it leaves the accumulator: at write-out (after the preloaded bias,
//! before ReLU) and when unfinished partial sums are spilled to external
//! memory. A shadow copy of every accumulator is never narrowed, so spills
//! that clip are counted.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::layer::LayerSpec;
use crate::mapper::{KernelChunk, MappingPlan};
use crate::schedule::{Phase, Schedule};
use crate::tensor::{saturate, Tensor};

fn squeeze(shape: &[usize]) -> Vec<usize> {
    shape.iter().copied().filter(|&d| d != 1).collect()
}

fn expect_shape(t: &Tensor, what: &str, dims: &[usize]) -> Result<()> {
    if squeeze(&t.shape) != squeeze(dims) {
        return Err(Error::Shape(format!(
            "{what} has shape {:?}, layer needs {dims:?}",
            t.shape
        )));
    }
    Ok(())
}

fn check_operands(layer: &LayerSpec, input: &Tensor, weights: &Tensor, bias: Option<&Tensor>) -> Result<()> {
    let (ci, co) = (layer.in_channels as usize, layer.out_channels as usize);
    expect_shape(input, "input", &[ci, layer.in_height as usize, layer.in_width as usize])?;
    expect_shape(
        weights,
        "weights",
        &[co, ci, layer.kernel_height as usize, layer.kernel_width as usize],
    )?;
    if let Some(b) = bias {
        expect_shape(b, "bias", &[co])?;
    }
    Ok(())
}

fn finish(acc: i64, layer: &LayerSpec, psum_bits: u32) -> i32 {
    let v = saturate(acc, psum_bits);
    if layer.apply_relu {
        v.max(0)
    } else {
        v
    }
}

fn bias_of(layer: &LayerSpec, bias: Option<&Tensor>, f: usize) -> i64 {
    match bias {
        Some(b) if layer.has_bias => b.data[f] as i64,
        _ => 0,
    }
}

/// Direct cross-correlation with stride and zero padding, accumulated wide,
/// plus bias, narrowed to `psum_bits`, then optional ReLU.
pub fn reference_conv(
    layer: &LayerSpec,
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
    psum_bits: u32,
) -> Result<Tensor> {
    layer.validate()?;
    check_operands(layer, input, weights, bias)?;
    let (ci, h, w) = (
        layer.in_channels as usize,
        layer.in_height as usize,
        layer.in_width as usize,
    );
    let (kh, kw) = (layer.kernel_height as usize, layer.kernel_width as usize);
    let (co, ho, wo) = (
        layer.out_channels as usize,
        layer.out_height() as usize,
        layer.out_width() as usize,
    );
    let (s, p) = (layer.stride as i64, layer.padding as i64);
    let mut out = Vec::with_capacity(co * ho * wo);
    for f in 0..co {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0i64;
                for c in 0..ci {
                    for u in 0..kh {
                        let iy = oy as i64 * s - p + u as i64;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        for v in 0..kw {
                            let ix = ox as i64 * s - p + v as i64;
                            if ix < 0 || ix >= w as i64 {
                                continue;
                            }
                            let x = input.data[(c * h + iy as usize) * w + ix as usize] as i64;
                            let k = weights.data[((f * ci + c) * kh + u) * kw + v] as i64;
                            acc += x * k;
                        }
                    }
                }
                out.push(finish(acc + bias_of(layer, bias, f), layer, psum_bits));
            }
        }
    }
    Tensor::from_vec(&[co, ho, wo], psum_bits, out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FunctionalStats {
    pub macs: u64,
    /// Spilled partial sums that did not fit `psum_bits`.
    pub spill_saturations: u64,
    /// Largest number of weights one PE held at once.
    pub max_spm_weights: u64,
    /// Largest accumulator footprint of one group, in bytes.
    pub max_accumulator_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionalResult {
    pub output: Tensor,
    pub stats: FunctionalStats,
}

/// Input window currently held in the input buffers for one channel.
struct Window {
    rows: std::ops::Range<u32>,
    cols: std::ops::Range<u32>,
    data: Vec<i32>,
}

/// Partial sums of one filter for the current tile.
struct Psums {
    wide: Vec<i64>,
    shadow: Vec<i64>,
}

struct Machine<'a> {
    plan: &'a MappingPlan,
    layer: &'a LayerSpec,
    input: &'a Tensor,
    weights: &'a Tensor,
    bias: Option<&'a Tensor>,
    psum_bits: u32,
    /// SPM contents per PE: work item -> weight.
    spm: HashMap<(u32, u32), HashMap<u32, i32>>,
    buffers: HashMap<u32, Window>,
    acc: HashMap<u32, Psums>,
    spilled: HashMap<(u32, u32), Psums>,
    output: Vec<i32>,
    stats: FunctionalStats,
}

impl Machine<'_> {
    fn weight(&self, f: u32, c: u32, u: u32, v: u32) -> i32 {
        let l = self.layer;
        let idx = ((f as usize * l.in_channels as usize + c as usize) * l.kernel_height as usize + u as usize)
            * l.kernel_width as usize
            + v as usize;
        self.weights.data[idx]
    }

    /// The single input channel `chunk` consumes for `item`.
    fn item_channel(chunk: &KernelChunk, item: &crate::mapper::WorkItem) -> Option<u32> {
        if chunk.row_pass != item.row_pass {
            return None;
        }
        item.channels.clone().find(|c| chunk.channels.contains(*c))
    }

    fn fetch_weights(&mut self, round: u32, items: std::ops::Range<u32>) -> Result<()> {
        self.spm.clear();
        let plan = self.plan;
        for chunk in &plan.rounds[round as usize].chunks {
            for i in items.clone() {
                let Some(c) = Self::item_channel(chunk, &plan.items[i as usize]) else {
                    continue;
                };
                for (pe, (u, v)) in chunk.pes().zip(chunk_offsets(chunk)) {
                    let w = self.weight(chunk.filter, c, u, v);
                    let slot = self.spm.entry(pe).or_default();
                    if slot.insert(i, w).is_some() {
                        return Err(Error::Capacity(format!("PE {pe:?} got two weights for item {i}")));
                    }
                }
            }
        }
        let most = self.spm.values().map(|s| s.len() as u64).max().unwrap_or(0);
        self.stats.max_spm_weights = self.stats.max_spm_weights.max(most);
        Ok(())
    }

    fn fetch_inputs(&mut self, channels: std::ops::Range<u32>, rows: std::ops::Range<u32>, cols: std::ops::Range<u32>) {
        let (h, w) = (self.layer.in_height as usize, self.layer.in_width as usize);
        self.buffers.clear();
        for c in channels {
            let mut data = Vec::with_capacity(rows.len() * cols.len());
            for y in rows.clone() {
                let base = (c as usize * h + y as usize) * w;
                data.extend_from_slice(&self.input.data[base + cols.start as usize..base + cols.end as usize]);
            }
            self.buffers.insert(
                c,
                Window {
                    rows: rows.clone(),
                    cols: cols.clone(),
                    data,
                },
            );
        }
    }

    /// Input at unpadded-plane coordinate (iy, ix); padding reads zero.
    fn input_at(&self, c: u32, iy: i64, ix: i64) -> Result<i64> {
        let l = self.layer;
        if iy < 0 || ix < 0 || iy >= l.in_height as i64 || ix >= l.in_width as i64 {
            return Ok(0);
        }
        let (iy, ix) = (iy as u32, ix as u32);
        match self.buffers.get(&c) {
            Some(win) if win.rows.contains(&iy) && win.cols.contains(&ix) => {
                Ok(win.data[((iy - win.rows.start) as usize) * win.cols.len() + (ix - win.cols.start) as usize] as i64)
            }
            _ => Err(Error::Capacity(format!(
                "input ({c}, {iy}, {ix}) used before it was fetched"
            ))),
        }
    }

    fn compute(&mut self, round: u32, pass: u32, tile: u32, item: u32, schedule: &Schedule) -> Result<()> {
        let plan = self.plan;
        let l = self.layer;
        let t = &schedule.tiles[tile as usize];
        let positions = t.positions() as usize;
        let demand = plan.psum_demand_per_group(t.positions());
        self.stats.max_accumulator_bytes = self.stats.max_accumulator_bytes.max(demand);
        if demand > schedule.hw.memory.accumulator_bytes as u64 {
            return Err(Error::Capacity(format!(
                "tile {tile} needs {demand} accumulator bytes per group"
            )));
        }
        let (s, p) = (l.stride as i64, l.padding as i64);
        let wi = &plan.items[item as usize];
        for chunk in &plan.rounds[round as usize].chunks {
            let Some(c) = Self::item_channel(chunk, wi) else {
                continue;
            };
            // Weights as the chunk's PEs hold them.
            let mut taps = Vec::with_capacity(chunk.pes().count());
            for (pe, (u, v)) in chunk.pes().zip(chunk_offsets(chunk)) {
                let w = self
                    .spm
                    .get(&pe)
                    .and_then(|s| s.get(&item))
                    .ok_or_else(|| Error::Capacity(format!("PE {pe:?} has no weight for item {item}")))?;
                taps.push((u as i64, v as i64, *w as i64));
            }
            if !self.acc.contains_key(&chunk.filter) {
                if pass > 0 && schedule.loops.spills {
                    return Err(Error::Capacity(format!(
                        "round {round} pass {pass}: partial sums of filter {} not restored",
                        chunk.filter
                    )));
                }
                let b = bias_of(l, self.bias, chunk.filter as usize);
                self.acc.insert(
                    chunk.filter,
                    Psums {
                        wide: vec![b; positions],
                        shadow: vec![b; positions],
                    },
                );
            }
            let mut sums = vec![0i64; positions];
            let mut k = 0;
            for oy in t.rows.clone() {
                for ox in t.cols.clone() {
                    let mut g = 0i64;
                    for &(u, v, w) in &taps {
                        let x = self.input_at(c, oy as i64 * s - p + u, ox as i64 * s - p + v)?;
                        g += x * w;
                    }
                    sums[k] = g;
                    k += 1;
                }
            }
            self.stats.macs += (positions * taps.len()) as u64;
            let ps = self.acc.get_mut(&chunk.filter).expect("inserted above");
            for (i, g) in sums.into_iter().enumerate() {
                ps.wide[i] += g;
                ps.shadow[i] += g;
            }
        }
        Ok(())
    }

    fn spill(&mut self, tile: u32) {
        for (f, ps) in self.acc.drain() {
            let narrowed: Vec<i64> = ps.wide.iter().map(|&v| saturate(v, self.psum_bits) as i64).collect();
            self.stats.spill_saturations += narrowed.iter().zip(&ps.shadow).filter(|(a, b)| a != b).count() as u64;
            self.spilled.insert(
                (f, tile),
                Psums {
                    wide: narrowed,
                    shadow: ps.shadow,
                },
            );
        }
    }

    fn restore(&mut self, round: u32, tile: u32) -> Result<()> {
        for &f in &self.plan.rounds[round as usize].filters {
            let ps = self
                .spilled
                .remove(&(f, tile))
                .ok_or_else(|| Error::Capacity(format!("no spilled partial sums for filter {f} tile {tile}")))?;
            self.acc.insert(f, ps);
        }
        Ok(())
    }

    fn write_out(&mut self, tile: u32, schedule: &Schedule) {
        let l = self.layer;
        let (ho, wo) = (l.out_height() as usize, l.out_width() as usize);
        let t = &schedule.tiles[tile as usize];
        for (f, ps) in self.acc.drain() {
            let mut k = 0;
            for oy in t.rows.clone() {
                for ox in t.cols.clone() {
                    self.output[(f as usize * ho + oy as usize) * wo + ox as usize] =
                        finish(ps.wide[k], l, self.psum_bits);
                    k += 1;
                }
            }
        }
    }
}

/// Kernel (row, col) held by each PE of `chunk`, in `pes()` order.
fn chunk_offsets(chunk: &KernelChunk) -> impl Iterator<Item = (u32, u32)> + '_ {
    chunk
        .kernel_rows
        .clone()
        .flat_map(move |u| chunk.kernel_cols.clone().map(move |v| (u, v)))
}

/// Run `schedule` phase by phase over the given operands.
pub fn simulate_functional(
    schedule: &Schedule,
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
) -> Result<FunctionalResult> {
    let layer = schedule.layer();
    check_operands(layer, input, weights, bias)?;
    let psum_bits = (schedule.layout.psum_word * 8) as u32;
    let mut m = Machine {
        plan: &schedule.plan,
        layer,
        input,
        weights,
        bias,
        psum_bits,
        spm: HashMap::new(),
        buffers: HashMap::new(),
        acc: HashMap::new(),
        spilled: HashMap::new(),
        output: vec![0; layer.output_elems() as usize],
        stats: FunctionalStats::default(),
    };
    for phase in &schedule.phases {
        match phase {
            Phase::FetchWeights { round, items, .. } => m.fetch_weights(*round, items.clone())?,
            Phase::FetchInputs {
                channels, rows, cols, ..
            } => m.fetch_inputs(channels.clone(), rows.clone(), cols.clone()),
            Phase::Compute {
                round,
                pass,
                tile,
                item,
                ..
            } => m.compute(*round, *pass, *tile, *item, schedule)?,
            Phase::RestorePsums { round, tile, .. } => m.restore(*round, *tile)?,
            Phase::SpillPsums { tile, .. } => m.spill(*tile),
            Phase::WriteOut { tile, .. } => m.write_out(*tile, schedule),
        }
    }
    let shape = [
        layer.out_channels as usize,
        layer.out_height() as usize,
        layer.out_width() as usize,
    ];
    Ok(FunctionalResult {
        output: Tensor::from_vec(&shape, psum_bits, m.output)?,
        stats: m.stats,
    })
}
