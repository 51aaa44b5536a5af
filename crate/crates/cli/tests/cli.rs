use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lupulus::Tensor;

fn lupulus(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lupulus"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn out_dir(dir: &tempfile::TempDir) -> &str {
    dir.path().to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn total_ms(csv_path: &Path) -> f64 {
    lupulus::compare::total_ms(&fs::read_to_string(csv_path).unwrap()).unwrap()
}

#[test]
fn alexnet_timing_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = lupulus(&[
        "--hw",
        "default",
        "--net",
        "alexnet-conv",
        "--mode",
        "timing",
        "--out",
        out_dir(&dir),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("timing.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 5 + 1);
    assert!(lines[0].starts_with("layer,cycles_total,ms,cyc_fetch_w,cyc_fetch_i,cyc_write,cyc_compute"));
    assert!(lines[6].starts_with("total,"));
    let ms = total_ms(&dir.path().join("timing.csv"));
    assert!((ms - 21.4).abs() / 21.4 <= 0.10, "{ms}");
}

#[test]
fn vgg_timing_csv_has_thirteen_layers() {
    let dir = tempfile::tempdir().unwrap();
    let o = lupulus(&["--net", "vgg16-conv", "--mode", "timing", "--out", out_dir(&dir)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("timing.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 13 + 1);
    let ms = total_ms(&dir.path().join("timing.csv"));
    assert!((ms - 183.6).abs() / 183.6 <= 0.10, "{ms}");
}

#[test]
fn identity_network_reproduces_its_input() {
    let dir = tempfile::tempdir().unwrap();
    let o = lupulus(&[
        "--net",
        "identity",
        "--mode",
        "functional",
        "--seed",
        "7",
        "--out",
        out_dir(&dir),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("functional verdict: PASS"));
    let f = dir.path().join("functional");
    let read = |name: &str| Tensor::read_binary(fs::File::open(f.join(name)).unwrap()).unwrap();
    let input = read("id.input.lpt");
    let output = read("id.output.lpt");
    assert_eq!(input.data, output.data);
    assert_eq!(output.shape, input.shape);
}

#[test]
fn identical_requests_write_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = lupulus(&[
            "--net",
            "identity",
            "--mode",
            "map,functional,timing",
            "--seed",
            "3",
            "--out",
            out_dir(d),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for rel in [
        "timing.csv",
        "map/id.txt",
        "functional/id.input.lpt",
        "functional/id.output.lpt",
    ] {
        assert_eq!(
            fs::read(a.path().join(rel)).unwrap(),
            fs::read(b.path().join(rel)).unwrap(),
            "{rel}"
        );
    }
}

#[test]
fn unknown_config_key_exits_1_and_names_it() {
    let o = lupulus(&["--net", "identity", "--set", "grid.bogus=3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("grid.bogus"), "{}", stderr(&o));

    let dir = tempfile::tempdir().unwrap();
    let hw = dir.path().join("hw.toml");
    let mut text = lupulus::HwConfig::default().to_toml_string();
    text.push_str("\n[extra]\nfoo = 1\n");
    fs::write(&hw, text).unwrap();
    let o = lupulus(&["--hw", hw.to_str().unwrap(), "--net", "identity"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("extra"), "{}", stderr(&o));
}

#[test]
fn unmappable_layer_exits_2_and_names_it() {
    let o = lupulus(&["--net", "alexnet-conv", "--set", "grid.cols=9"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("conv1") && err.contains("grid width"), "{err}");
}

#[test]
fn missing_network_is_a_config_error() {
    let o = lupulus(&["--net", "no-such-net"]);
    assert_eq!(o.status.code(), Some(1));
}

fn write_csv(dir: &Path, name: &str, ms: f64) -> String {
    let p = dir.join(name);
    fs::write(&p, format!("layer,cycles_total,ms\nconv1,1,{ms}\ntotal,1,{ms}\n")).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn compare_reports_speedups() {
    let dir = tempfile::tempdir().unwrap();
    for (ours, base, want) in [(773.0, 1436.5, "1.86"), (91.6, 28.8, "0.31"), (10.0, 10.0, "1.00")] {
        let o_path = write_csv(dir.path(), "ours.csv", ours);
        let b_path = write_csv(dir.path(), "base.csv", base);
        let o = lupulus(&["compare", "--ours", &o_path, "--baseline", &b_path]);
        assert!(o.status.success(), "{}", stderr(&o));
        let stdout = String::from_utf8_lossy(&o.stdout).into_owned();
        assert!(stdout.lines().nth(1).unwrap().ends_with(want), "{stdout}");
    }
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "layer,ms\nconv1,3\n").unwrap();
    let o = lupulus(&[
        "compare",
        "--ours",
        bad.to_str().unwrap(),
        "--baseline",
        bad.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("totals row"));
}

#[test]
fn sweep_writes_one_row_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let o = lupulus(&[
        "--net",
        "alexnet-conv",
        "--mode",
        "sweep",
        "--workers",
        "2",
        "--out",
        out_dir(&dir),
        "--sweep",
        "interface.clock_hz=125e6,250e6,500e6",
        "--sweep",
        "memory.double_buffer_inputs=false,true",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r[2] == "ok"));
    // Faster memory never hurts.
    let ms = |i: usize| rows[i][4].parse::<f64>().unwrap();
    assert!(ms(0) >= ms(2) && ms(2) >= ms(4));
    assert!(ms(1) >= ms(3) && ms(3) >= ms(5));

    let o = lupulus(&[
        "--net",
        "identity",
        "--mode",
        "sweep",
        "--sweep",
        "nope.x=1",
        "--out",
        out_dir(&dir),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn every_bundled_network_maps() {
    for name in lupulus::NetworkSpec::bundled_names() {
        let dir = tempfile::tempdir().unwrap();
        let o = lupulus(&["--net", name, "--mode", "map", "--out", out_dir(&dir)]);
        assert!(o.status.success(), "{name}: {}", stderr(&o));
    }
}

#[test]
fn verify_mode_passes_on_default_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = lupulus(&[
        "--net",
        "alexnet-conv",
        "--mode",
        "verify",
        "--verify-samples",
        "30",
        "--out",
        out_dir(&dir),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = fs::read_to_string(dir.path().join("verify.txt")).unwrap();
    assert!(!report.contains("FAIL"), "{report}");
}

#[test]
fn network_file_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let net = dir.path().join("net.toml");
    fs::write(
        &net,
        "name = \"tiny\"\n[[layers]]\nname = \"c\"\nkind = \"conv\"\nin_channels = 2\nin_height = 6\nin_width = 6\n\
         out_channels = 3\nkernel_height = 3\nkernel_width = 3\npadding = 1\nhas_bias = true\napply_relu = true\n",
    )
    .unwrap();
    let o = lupulus(&[
        "--net",
        net.to_str().unwrap(),
        "--mode",
        "functional,timing",
        "--out",
        out_dir(&dir),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("functional/c.bias.lpt").exists());
}
