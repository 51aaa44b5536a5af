//! `--mode sweep`: timing over the cross product of config overrides.

use anyhow::{Context, Result};
use lupulus::timing::simulate_network;
use lupulus::{HwConfig, NetworkSpec};
use rayon::prelude::*;

use crate::RunArgs;

pub fn pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        b = b.num_threads(n);
    }
    b.build().context("starting worker pool")
}

struct Axis {
    key: String,
    values: Vec<String>,
}

fn parse_axis(text: &str) -> Result<Axis> {
    let (key, values) = text
        .split_once('=')
        .ok_or_else(|| lupulus::Error::Config(format!("sweep axis `{text}` is not key=v1,v2,...")))?;
    let values: Vec<String> = values
        .split(',')
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    if values.is_empty() {
        return Err(lupulus::Error::Config(format!("sweep axis `{key}` has no values")).into());
    }
    Ok(Axis {
        key: key.trim().to_string(),
        values,
    })
}

/// Every combination of axis values, first axis slowest.
fn points(axes: &[Axis]) -> Vec<Vec<String>> {
    let mut pts = vec![Vec::new()];
    for axis in axes {
        pts = pts
            .into_iter()
            .flat_map(|p| {
                axis.values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(v.clone());
                    q
                })
            })
            .collect();
    }
    pts
}

fn evaluate(net: &NetworkSpec, base: &HwConfig, axes: &[Axis], point: &[String]) -> Vec<String> {
    let overrides: Vec<String> = axes.iter().zip(point).map(|(a, v)| format!("{}={v}", a.key)).collect();
    let result = base
        .with_overrides(&overrides)
        .and_then(|cfg| simulate_network(&net.layers, &cfg));
    let mut row = point.to_vec();
    match result {
        Ok(r) => {
            let t = &r.total;
            row.extend([
                "ok".to_string(),
                t.cycles_total.to_string(),
                format!("{:.6}", t.ms()),
                format!("{:.2}", t.pe_active_pct()),
                format!("{:.2}", t.mem_busy_pct()),
            ]);
        }
        Err(e) => {
            row.push(e.to_string());
            row.extend(std::iter::repeat_n(String::new(), 4));
        }
    }
    row
}

pub fn run(net: &NetworkSpec, base: &HwConfig, args: &RunArgs) -> Result<()> {
    if args.sweep.is_empty() {
        return Err(lupulus::Error::Config("sweep mode needs at least one --sweep key=v1,v2,... axis".into()).into());
    }
    let axes = args.sweep.iter().map(|s| parse_axis(s)).collect::<Result<Vec<_>>>()?;
    // Reject unknown keys up front; invalid value combinations are reported
    // per point instead.
    for a in &axes {
        if let Err(e @ lupulus::Error::Parse(_)) = base.with_overrides(&[format!("{}={}", a.key, a.values[0])]) {
            return Err(e.into());
        }
    }
    let pts = points(&axes);
    let rows: Vec<Vec<String>> =
        pool(args.workers)?.install(|| pts.par_iter().map(|p| evaluate(net, base, &axes, p)).collect());

    let path = args.out.join("sweep.csv");
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    let mut header: Vec<String> = axes.iter().map(|a| a.key.clone()).collect();
    header.extend(["status", "cycles_total", "ms", "pe_active_pct", "mem_busy_pct"].map(String::from));
    w.write_record(&header)?;
    for r in &rows {
        w.write_record(r)?;
    }
    w.flush()?;
    let ok = rows.iter().filter(|r| r[axes.len()] == "ok").count();
    println!("{} sweep points ({ok} ok) -> {}", rows.len(), path.display());
    Ok(())
}
