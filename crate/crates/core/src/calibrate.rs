//! One-off fit of the free timing parameters against two reference totals.
//!
//! The pipeline depth and the per-transfer interface overhead are searched
//! on a grid; the pair minimising the worst relative error over both
//! networks wins, ties going to the smaller depth and then the smaller
//! overhead. The result is frozen into the default config.

use crate::config::HwConfig;
use crate::error::Result;
use crate::layer::NetworkSpec;
use crate::timing::simulate_network;

/// Reference end-to-end latencies of the conv layers, in ms.
pub const ALEXNET_CONV_MS: f64 = 21.4;
pub const VGG16_CONV_MS: f64 = 183.6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fit {
    pub pipeline_depth: u32,
    pub overhead_cycles: u32,
    pub alexnet_ms: f64,
    pub vgg16_ms: f64,
}

impl Fit {
    pub fn max_rel_error(&self) -> f64 {
        rel_error(self.alexnet_ms, ALEXNET_CONV_MS).max(rel_error(self.vgg16_ms, VGG16_CONV_MS))
    }
}

pub fn rel_error(got: f64, want: f64) -> f64 {
    (got - want).abs() / want
}

/// Totals of both benchmark networks under `cfg`.
pub fn evaluate(cfg: &HwConfig) -> Result<(f64, f64)> {
    let a = simulate_network(&NetworkSpec::alexnet_conv().layers, cfg)?;
    let v = simulate_network(&NetworkSpec::vgg16_conv().layers, cfg)?;
    Ok((a.total_ms(), v.total_ms()))
}

/// Grid search over `depths x overheads`, starting from `base`.
pub fn fit(
    base: &HwConfig,
    depths: impl IntoIterator<Item = u32>,
    overheads: impl IntoIterator<Item = u32> + Clone,
) -> Result<Fit> {
    let mut fits = Vec::new();
    for d in depths {
        for o in overheads.clone() {
            let mut cfg = base.clone();
            cfg.pipeline.depth = d;
            cfg.interface.overhead_cycles = o;
            let (alexnet_ms, vgg16_ms) = evaluate(&cfg)?;
            fits.push(Fit {
                pipeline_depth: d,
                overhead_cycles: o,
                alexnet_ms,
                vgg16_ms,
            });
        }
    }
    Ok(best(&fits).expect("search grid is non-empty"))
}

/// Fit with the smallest worst-case error; earlier entries win ties.
pub fn best(fits: &[Fit]) -> Option<Fit> {
    let mut best: Option<Fit> = None;
    for f in fits {
        if best.is_none_or(|b| f.max_rel_error() < b.max_rel_error()) {
            best = Some(*f);
        }
    }
    best
}
