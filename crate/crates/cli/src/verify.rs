//! Invariant checks run by `--mode verify`.

use lupulus::fetch::emit_fetch_program;
use lupulus::functional::{reference_conv, simulate_functional};
use lupulus::schedule::Phase;
use lupulus::timing::{simulate_timing_traced, MemoryInterfaceModel};
use lupulus::{build_schedule, map_layer, HwConfig, LayerSpec, Schedule};

use crate::operands::{generate, layer_rng, random_small_layer};

pub struct Check {
    pub name: String,
    pub ok: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, ok: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ok,
            detail: detail.into(),
        }
    }
}

fn structural(layer: &LayerSpec, s: &Schedule, cfg: &HwConfig, out: &mut Vec<Check>) {
    let n = layer.label();
    let plan_ok = s.plan.check(cfg);
    out.push(Check::new(
        format!("{n}: mapping legal"),
        plan_ok.is_ok(),
        plan_ok.err().map(|e| e.to_string()).unwrap_or_default(),
    ));

    let w = layer.weight_elems() * cfg.weight_bytes();
    let o = layer.output_elems() * cfg.psum_bytes();
    let i = layer.input_elems() * cfg.input_bytes();
    out.push(Check::new(
        format!("{n}: byte conservation"),
        s.fetch_weight_bytes() == w && s.write_out_bytes() == o && s.fetch_input_bytes() >= i,
        format!(
            "weights {}/{w}  outputs {}/{o}  inputs {} >= {i}",
            s.fetch_weight_bytes(),
            s.write_out_bytes(),
            s.fetch_input_bytes()
        ),
    ));

    let dbu = s.check_data_before_use();
    out.push(Check::new(
        format!("{n}: data before use"),
        dbu.is_ok(),
        dbu.err().map(|e| e.to_string()).unwrap_or_default(),
    ));

    let replay = emit_fetch_program(s).replay();
    let expected: Vec<&Phase> = s.fetch_phases().collect();
    let same = replay.len() == expected.len() && replay.iter().zip(&expected).all(|(a, b)| a == *b);
    out.push(Check::new(
        format!("{n}: fetch-program replay"),
        same,
        format!("{} fetch phases", expected.len()),
    ));

    let (r, trace) = simulate_timing_traced(s, cfg);
    let total = r.total.cycles_total;
    let mem = MemoryInterfaceModel::from_config(cfg);
    let bw_bound = if mem.clock_hz.is_infinite() {
        0
    } else {
        (s.total_bytes() as f64 / mem.bytes_per_core_cycle()).ceil() as u64
    };
    out.push(Check::new(
        format!("{n}: latency lower bounds"),
        total >= bw_bound && total >= s.compute_cycles(),
        format!(
            "total {total}  bandwidth bound {bw_bound}  compute {}",
            s.compute_cycles()
        ),
    ));
    out.push(Check::new(
        format!("{n}: single-channel memory"),
        trace.windows(2).all(|w| w[0].end <= w[1].start),
        format!("{} transfers", trace.len()),
    ));
}

/// Structural and timing invariants for every layer, then a functional
/// cross-check on `samples` random small layers.
pub fn run(layers: &[LayerSpec], cfg: &HwConfig, samples: usize, seed: u64) -> anyhow::Result<Vec<Check>> {
    let mut out = Vec::new();
    for layer in layers {
        let s = build_schedule(&map_layer(layer, cfg)?, cfg)?;
        structural(layer, &s, cfg, &mut out);
    }
    let mut rng = layer_rng(seed, usize::MAX);
    let mut mismatches = Vec::new();
    let mut tried = 0;
    for k in 0..samples {
        let layer = random_small_layer(&mut rng, cfg, format!("rand{k}"));
        let Ok(plan) = map_layer(&layer, cfg) else { continue };
        let s = build_schedule(&plan, cfg)?;
        let ops = generate(&layer, cfg, &mut rng)?;
        let got = simulate_functional(&s, &ops.input, &ops.weights, ops.bias.as_ref())?;
        let want = reference_conv(
            &layer,
            &ops.input,
            &ops.weights,
            ops.bias.as_ref(),
            cfg.precision.psum_bits,
        )?;
        tried += 1;
        if got.output != want {
            mismatches.push(format!("{layer:?}"));
        }
    }
    out.push(Check::new(
        "functional model matches direct convolution",
        mismatches.is_empty(),
        format!(
            "{tried} random layers, {} mismatches {}",
            mismatches.len(),
            mismatches.join("; ")
        ),
    ));
    Ok(out)
}
