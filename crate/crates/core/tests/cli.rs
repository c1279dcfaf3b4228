use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_alphaedge"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn small_config(dir: &Path, overrides: &[(&str, Value)]) -> PathBuf {
    let text = std::fs::read_to_string(configs().join("quickstart.json")).unwrap();
    let mut v: Value = serde_json::from_str(&text).unwrap();
    v["strategies"] = serde_json::json!(["noagg", "alphaedge"]);
    v["seeds"] = serde_json::json!([1]);
    v["data"]["batches_per_edge"] = 120.into();
    for (k, val) in overrides {
        v[*k] = val.clone();
    }
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_config_exits_one_and_names_the_path() {
    let out = run(&["run", "--config", "missing.json", "--quiet"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));
}

#[test]
fn invalid_config_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), &[("K", 8.into())]);
    let out = run(&["validate", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    let ok = small_config(tmp.path(), &[]);
    assert_eq!(
        run(&["validate", "--config", s(&ok), "--quiet"])
            .status
            .code(),
        Some(0)
    );
}

#[test]
fn bad_csv_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::copy(
        configs().join("csv_run.json"),
        tmp.path().join("csv_run.json"),
    )
    .unwrap();
    std::fs::write(
        tmp.path().join("streams.csv"),
        "edge,time,label,x0,x1,x2\n0,0,1.0,0.5,oops,0.1\n",
    )
    .unwrap();
    let cfg = tmp.path().join("csv_run.json");
    let out = run(&[
        "run",
        "--config",
        s(&cfg),
        "--out",
        s(&tmp.path().join("o")),
        "--quiet",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("x1"), "{err}");
}

#[test]
fn repeated_runs_write_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), &[("drop_fraction", 0.2.into())]);
    let mut outputs = Vec::new();
    for i in 0..2 {
        let dir = tmp.path().join(format!("out{i}"));
        let out = run(&[
            "run",
            "--config",
            s(&cfg),
            "--seed",
            "5",
            "--out",
            s(&dir),
            "--quiet",
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(&dir)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (
                    e.file_name().to_string_lossy().into_owned(),
                    std::fs::read(e.path()).unwrap(),
                )
            })
            .collect();
        files.sort();
        outputs.push(files);
    }
    assert_eq!(outputs[0], outputs[1]);
    let names: Vec<&str> = outputs[0].iter().map(|f| f.0.as_str()).collect();
    assert!(names.contains(&"metrics_alphaedge_seed5.csv"));
    assert!(names.contains(&"trace_alphaedge_seed5.json"));
    assert!(names.contains(&"summary.json"));
}

#[test]
fn summary_means_recompute_from_the_metrics_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), &[]);
    let dir = tmp.path().join("out");
    assert!(
        run(&["run", "--config", s(&cfg), "--out", s(&dir), "--quiet"])
            .status
            .success()
    );
    let summary: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    for entry in summary["strategies"].as_array().unwrap() {
        let name = entry["strategy"].as_str().unwrap();
        let want = entry["per_seed"][0]["mean"].as_f64().unwrap();
        let mut reader =
            csv::Reader::from_path(dir.join(format!("metrics_{name}_seed1.csv"))).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for row in reader.records() {
            let row = row.unwrap();
            if row[2].is_empty() {
                continue;
            }
            let size: f64 = row[4].parse().unwrap();
            num += row[2].parse::<f64>().unwrap() * size;
            den += size;
        }
        assert!(
            (num / den - want).abs() <= 1e-12,
            "{name}: {} vs {want}",
            num / den
        );
    }
}

#[test]
fn json_format_writes_metric_series() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), &[]);
    let dir = tmp.path().join("out");
    let out = run(&[
        "run",
        "--config",
        s(&cfg),
        "--out",
        s(&dir),
        "--format",
        "json",
        "--quiet",
    ]);
    assert!(out.status.success());
    let series: Value = serde_json::from_str(
        &std::fs::read_to_string(dir.join("metrics_noagg_seed1.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(series.as_array().unwrap().len(), 8);
    assert_eq!(series[0]["window"], 50);
}

#[test]
fn sweep_emits_one_row_per_axis_value() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(
        tmp.path(),
        &[("strategies", serde_json::json!(["alphaedge"]))],
    );
    let dir = tmp.path().join("sweep");
    let out = run(&[
        "sweep",
        "--config",
        s(&cfg),
        "--axis",
        "E=2,5,10,20",
        "--out",
        s(&dir),
        "--quiet",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = std::fs::read_to_string(dir.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for (row, e) in rows.iter().zip(["2", "5", "10", "20"]) {
        assert!(row.starts_with(&format!("E,{e},alphaedge,")), "{row}");
    }
}

#[test]
fn generated_csv_feeds_a_csv_run() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = run(&[
        "gen",
        "--config",
        s(&configs().join("synth_gen.json")),
        "--out",
        s(tmp.path()),
        "--quiet",
    ]);
    assert!(gen.status.success());
    std::fs::copy(
        configs().join("csv_run.json"),
        tmp.path().join("csv_run.json"),
    )
    .unwrap();
    let dir = tmp.path().join("out");
    let out = run(&[
        "run",
        "--config",
        s(&tmp.path().join("csv_run.json")),
        "--out",
        s(&dir),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let metrics = std::fs::read_to_string(dir.join("metrics_alphaedge_seed0.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 4 * 50);
    assert!(String::from_utf8_lossy(&out.stdout).contains("alphaedge"));
}
