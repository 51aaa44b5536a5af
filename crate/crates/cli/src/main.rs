use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lupulus::calibrate::{self, Fit};
use lupulus::compare::compare_reports;
use lupulus::fetch::emit_fetch_program;
use lupulus::functional::{reference_conv, simulate_functional};
use lupulus::timing::{aggregate_network, simulate_timing};
use lupulus::{build_schedule, map_layer, HwConfig, NetworkSpec};
use rayon::prelude::*;

mod operands;
mod sweep;
mod verify;

/// Mapping, scheduling, functional and timing model of the Lupulus CNN
/// accelerator.
#[derive(Parser)]
#[command(name = "lupulus", version, args_conflicts_with_subcommands = true)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Subcommand)]
enum Command {
    /// Speedup of our timing CSV over a baseline CSV (baseline ms / our ms).
    Compare {
        #[arg(long)]
        ours: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
    },
    /// Grid-search pipeline depth and interface overhead against the
    /// reference AlexNet and VGG-16 totals.
    Calibrate {
        #[arg(long, default_value = "default")]
        hw: String,
        #[arg(long, default_value_t = 16)]
        max_depth: u32,
        #[arg(long, default_value_t = 8)]
        max_overhead: u32,
        #[arg(long)]
        workers: Option<usize>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Map,
    Functional,
    Timing,
    Verify,
    Sweep,
}

#[derive(Args)]
struct RunArgs {
    /// Hardware config: `default` or a TOML file.
    #[arg(long, default_value = "default")]
    hw: String,
    /// Network: a bundled name or a TOML file.
    #[arg(long)]
    net: Option<String>,
    /// Comma-separated set of modes.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "timing")]
    mode: Vec<Mode>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Config override `key=value`, e.g. `grid.rows=6`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads for sweeps (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Sweep axis `key=v1,v2,...`. Repeatable; points are the cross product.
    #[arg(long = "sweep", value_name = "KEY=V1,V2")]
    sweep: Vec<String>,
    /// Random layers in the functional part of `verify`.
    #[arg(long, default_value_t = 200)]
    verify_samples: usize,
}

/// A run that completed but whose results failed a check.
#[derive(Debug)]
struct VerificationFailed(String);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "verification failed: {}", self.0)
    }
}

impl std::error::Error for VerificationFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<VerificationFailed>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<lupulus::Error>() {
            return match e {
                lupulus::Error::Unmappable { .. } | lupulus::Error::Capacity(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Some(Command::Compare { ours, baseline }) => {
            let ours_text = read(&ours)?;
            let base_text = read(&baseline)?;
            let c = compare_reports(&ours_text, &base_text)?;
            println!("ours_ms,baseline_ms,speedup");
            println!("{},{},{:.2}", c.ours_ms, c.baseline_ms, c.speedup_2dp());
            Ok(())
        }
        Some(Command::Calibrate {
            hw,
            max_depth,
            max_overhead,
            workers,
        }) => {
            let cfg = load_hw(&hw, &[])?;
            run_calibrate(&cfg, max_depth, max_overhead, workers)
        }
        None => run(&cli.run),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn io_err(e: std::io::Error) -> lupulus::Error {
    lupulus::Error::Io(e.to_string())
}

fn load_hw(spec: &str, overrides: &[String]) -> Result<HwConfig> {
    let base = if spec == "default" {
        HwConfig::default()
    } else {
        let text = fs::read_to_string(spec)
            .map_err(io_err)
            .with_context(|| format!("reading {spec}"))?;
        HwConfig::from_toml_str(&text).with_context(|| format!("hardware config {spec}"))?
    };
    Ok(base.with_overrides(overrides)?)
}

fn load_net(spec: &str) -> Result<NetworkSpec> {
    if let Some(net) = NetworkSpec::bundled(spec) {
        return Ok(net);
    }
    let text = fs::read_to_string(spec).map_err(io_err).with_context(|| {
        let names: Vec<_> = NetworkSpec::bundled_names().collect();
        format!(
            "`{spec}` is neither a bundled network ({}) nor a readable file",
            names.join(", ")
        )
    })?;
    NetworkSpec::from_toml_str(&text).with_context(|| format!("network {spec}"))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn file_stem(name: &str, index: usize) -> String {
    let clean: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    if clean.is_empty() {
        format!("layer{index}")
    } else {
        clean
    }
}

fn run(args: &RunArgs) -> Result<()> {
    let Some(net_spec) = &args.net else {
        bail!(lupulus::Error::Config("--net is required".into()));
    };
    let cfg = load_hw(&args.hw, &args.set)?;
    let net = load_net(net_spec)?;
    let mut failures = Vec::new();

    for mode in dedup(&args.mode) {
        match mode {
            Mode::Map => run_map(&net, &cfg, &args.out)?,
            Mode::Timing => run_timing(&net, &cfg, &args.out)?,
            Mode::Functional => failures.extend(run_functional(&net, &cfg, &args.out, args.seed)?),
            Mode::Verify => failures.extend(run_verify(&net, &cfg, args)?),
            Mode::Sweep => sweep::run(&net, &cfg, args)?,
        }
    }
    if !failures.is_empty() {
        return Err(VerificationFailed(failures.join(", ")).into());
    }
    Ok(())
}

fn dedup(modes: &[Mode]) -> Vec<Mode> {
    let mut out = Vec::new();
    for m in modes {
        if !out.contains(m) {
            out.push(*m);
        }
    }
    out
}

fn run_map(net: &NetworkSpec, cfg: &HwConfig, out: &Path) -> Result<()> {
    for (i, layer) in net.layers.iter().enumerate() {
        let plan = map_layer(layer, cfg)?;
        let s = build_schedule(&plan, cfg)?;
        let text = format!("{plan}\n{}\n{}", s.summary(), emit_fetch_program(&s));
        let path = out.join("map").join(format!("{}.txt", file_stem(&layer.name, i)));
        write(&path, &text)?;
        println!(
            "{:<10} {:?}: {} rounds, {} passes, {} tiles -> {}",
            layer.label(),
            plan.strategy,
            plan.num_rounds(),
            plan.num_passes(),
            s.tiles.len(),
            path.display()
        );
    }
    Ok(())
}

fn run_timing(net: &NetworkSpec, cfg: &HwConfig, out: &Path) -> Result<()> {
    let reports = net
        .layers
        .iter()
        .map(|l| Ok(simulate_timing(&build_schedule(&map_layer(l, cfg)?, cfg)?, cfg)))
        .collect::<Result<Vec<_>>>()?;
    let report = aggregate_network(&reports)?;
    let path = out.join("timing.csv");
    write(&path, report.to_csv_string())?;
    print!("{report}");
    println!("{} total {:.3} ms -> {}", net.name, report.total_ms(), path.display());
    Ok(())
}

/// Returns the names of layers whose output differs from the reference.
fn run_functional(net: &NetworkSpec, cfg: &HwConfig, out: &Path, seed: u64) -> Result<Vec<String>> {
    let dir = out.join("functional");
    let mut summary = String::new();
    let mut failed = Vec::new();
    for (i, layer) in net.layers.iter().enumerate() {
        let s = build_schedule(&map_layer(layer, cfg)?, cfg)?;
        let ops = operands::generate(layer, cfg, &mut operands::layer_rng(seed, i))?;
        let got = simulate_functional(&s, &ops.input, &ops.weights, ops.bias.as_ref())?;
        let want = reference_conv(
            layer,
            &ops.input,
            &ops.weights,
            ops.bias.as_ref(),
            cfg.precision.psum_bits,
        )?;
        let stem = file_stem(&layer.name, i);
        let mut tensors = vec![
            ("input", &ops.input),
            ("weights", &ops.weights),
            ("output", &got.output),
        ];
        if let Some(b) = &ops.bias {
            tensors.push(("bias", b));
        }
        for (kind, t) in tensors {
            let mut buf = Vec::new();
            t.write_binary(&mut buf)?;
            write(&dir.join(format!("{stem}.{kind}.lpt")), buf)?;
        }
        let pass = got.output == want;
        if !pass {
            failed.push(layer.label().to_string());
        }
        let line = format!(
            "{} {} macs={} spill_saturations={}\n",
            layer.label(),
            if pass { "PASS" } else { "FAIL" },
            got.stats.macs,
            got.stats.spill_saturations
        );
        print!("{line}");
        summary.push_str(&line);
    }
    let verdict = if failed.is_empty() { "PASS" } else { "FAIL" };
    summary.push_str(&format!("verdict {verdict}\n"));
    write(&dir.join("verdict.txt"), &summary)?;
    println!("functional verdict: {verdict}");
    Ok(failed)
}

fn run_verify(net: &NetworkSpec, cfg: &HwConfig, args: &RunArgs) -> Result<Vec<String>> {
    let checks = verify::run(&net.layers, cfg, args.verify_samples, args.seed)?;
    let mut text = String::new();
    let mut failed = Vec::new();
    for c in &checks {
        let line = format!("{} {}  {}\n", if c.ok { "PASS" } else { "FAIL" }, c.name, c.detail);
        text.push_str(&line);
        if !c.ok {
            failed.push(c.name.clone());
        }
    }
    print!("{text}");
    write(&args.out.join("verify.txt"), &text)?;
    println!("{}/{} checks passed", checks.len() - failed.len(), checks.len());
    Ok(failed)
}

fn run_calibrate(base: &HwConfig, max_depth: u32, max_overhead: u32, workers: Option<usize>) -> Result<()> {
    let grid: Vec<(u32, u32)> = (1..=max_depth)
        .flat_map(|d| (0..=max_overhead).map(move |o| (d, o)))
        .collect();
    let pool = sweep::pool(workers)?;
    let fits = pool.install(|| {
        grid.par_iter()
            .map(|&(d, o)| {
                let mut cfg = base.clone();
                cfg.pipeline.depth = d;
                cfg.interface.overhead_cycles = o;
                let (alexnet_ms, vgg16_ms) = calibrate::evaluate(&cfg)?;
                Ok(Fit {
                    pipeline_depth: d,
                    overhead_cycles: o,
                    alexnet_ms,
                    vgg16_ms,
                })
            })
            .collect::<Result<Vec<Fit>>>()
    })?;
    let best = calibrate::best(&fits).context("empty search grid")?;
    println!("pipeline.depth,interface.overhead_cycles,alexnet_ms,vgg16_ms,max_rel_error");
    println!(
        "{},{},{:.3},{:.3},{:.4}",
        best.pipeline_depth,
        best.overhead_cycles,
        best.alexnet_ms,
        best.vgg16_ms,
        best.max_rel_error()
    );
    Ok(())
}
