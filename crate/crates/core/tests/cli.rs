mod common;

use std::path::Path;
use std::process::{Command, Output};

use perfdelta::injection::StudyReport;
use perfdelta::stats::TestOutcome;
use perfdelta::{MeasurementConfig, MeasurementSeries, VmRun, WorkloadKind, WorkloadSpec};

fn perfdelta(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_perfdelta"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write_means(path: &Path, means: &[u64]) {
    let series = MeasurementSeries {
        config: MeasurementConfig::equal_warmup(means.len() as u32, 1, 1),
        workload: WorkloadSpec::new(WorkloadKind::Add, 1),
        timestamp: chrono::DateTime::<chrono::Utc>::UNIX_EPOCH,
        environment: Default::default(),
        vm_runs: means
            .iter()
            .enumerate()
            .map(|(i, &m)| VmRun {
                vm_index: i as u32,
                warmup_ns: vec![m],
                measurement_ns: vec![m],
            })
            .collect(),
    };
    series.write_to(path).unwrap();
}

#[test]
fn measure_writes_valid_series() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("f.json");
    let o = perfdelta(&[
        "measure",
        "--workload",
        "add",
        "--size",
        "300",
        "--vms",
        "2",
        "--warmup",
        "2",
        "--iterations",
        "2",
        "--repetitions",
        "10",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let series = MeasurementSeries::read_from(&out).unwrap();
    assert_eq!(series.vm_runs.len(), 2);
    let summary: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(summary["relative_stddev"].is_number());
}

#[test]
fn measure_requires_out() {
    let o = perfdelta(&["measure", "--workload", "add", "--size", "300"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn measure_refuses_allocation_over_budget() {
    let dir = tempfile::tempdir().unwrap();
    let o = perfdelta(&[
        "measure",
        "--workload",
        "allocate",
        "--size",
        "10000000",
        "--repetitions",
        "1000",
        "--out",
        dir.path().join("x.json").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("budget"));
    assert!(!dir.path().join("x.json").exists());
}

#[test]
fn measure_executor_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = perfdelta(&[
        "measure",
        "--workload",
        "add",
        "--size",
        "3",
        "--vms",
        "2",
        "--warmup",
        "1",
        "--iterations",
        "1",
        "--repetitions",
        "1",
        "--fake-clock",
        "100:-1",
        "--out",
        dir.path().join("x.json").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn compare_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (old, new) = (dir.path().join("old.json"), dir.path().join("new.json"));
    write_means(&old, &[1, 2, 3]);
    write_means(&new, &[10, 11, 12]);
    let (old, new) = (old.to_str().unwrap(), new.to_str().unwrap());

    let o = perfdelta(&[
        "compare",
        old,
        old,
        "--test",
        "mann-whitney",
        "--alpha",
        "0.01",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let t: TestOutcome = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(t.p_value, Some(1.0));

    let o = perfdelta(&[
        "compare",
        old,
        new,
        "--test",
        "mann-whitney",
        "--alpha",
        "0.01",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let t: TestOutcome = serde_json::from_str(&stdout(&o)).unwrap();
    assert!((t.p_value.unwrap() - 0.1).abs() < 1e-15);

    let o = perfdelta(&[
        "compare",
        old,
        new,
        "--test",
        "mann-whitney",
        "--alpha",
        "0.2",
    ]);
    assert_eq!(o.status.code(), Some(10));
    let o = perfdelta(&["compare", old, new, "--test", "t", "--alpha", "0.01"]);
    assert_eq!(o.status.code(), Some(10));
    let o = perfdelta(&[
        "compare",
        old,
        new,
        "--test",
        "ci",
        "--alpha",
        "0.01",
        "--outlier-z",
        "3.29",
    ]);
    assert!(serde_json::from_str::<TestOutcome>(&stdout(&o)).is_ok());

    let o = perfdelta(&["compare", old, "/nonexistent.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(o.stdout.is_empty());
}

#[test]
fn compare_reports_field_path_of_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"format_version":"1","config":{"vms":"x"}}"#).unwrap();
    let o = perfdelta(&["compare", bad.to_str().unwrap(), bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("config.vms"));
}

#[test]
fn power_queries() {
    let o = perfdelta(&["power", "--gamma", "1", "--alpha", "0.01", "--vms", "30"]);
    let beta: f64 = stdout(&o).trim().parse().unwrap();
    assert!((beta - 0.0973).abs() <= 0.0005);
    let o = perfdelta(&[
        "power", "--gamma", "0.1", "--alpha", "0.01", "--beta", "0.01",
    ]);
    let v: u64 = stdout(&o).trim().parse().unwrap();
    assert!((4805..=4809).contains(&v));
    let o = perfdelta(&["power", "--gamma", "0", "--vms", "30", "--alpha", "0.01"]);
    let beta: f64 = stdout(&o).trim().parse().unwrap();
    assert!((beta - 0.995).abs() < 1e-12);
    let o = perfdelta(&[
        "power",
        "--gamma",
        "0.5",
        "--beta",
        "0.01",
        "--seconds-per-vm",
        "97",
        "--budget",
        "43200",
    ]);
    let f: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(f["required_vms"], 193);
    assert_eq!(f["feasible"], true);
    let o = perfdelta(&["power", "curve", "--gammas", "0.5,1", "--vms-max", "10"]);
    assert_eq!(stdout(&o).lines().count(), 1 + 2 * 9);
    let o = perfdelta(&["power", "--gamma", "0", "--beta", "0.01"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn tune_synthetic_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = perfdelta(&[
            "tune",
            "--synthetic",
            "gamma=3",
            "--vm-grid",
            "5,10,30",
            "--iteration-grid",
            "10,30",
            "--repetitions-grid",
            "1000",
            "--resamples",
            "2000",
            "--seed",
            "4",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
        out
    };
    let (a, b) = (run("a"), run("b"));
    let csv = std::fs::read_to_string(a.join("heatmap.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6);
    for file in [
        "heatmap.csv",
        "heatmap-add.csv",
        "report.json",
        "pool/add-r1000-base.json",
    ] {
        assert_eq!(
            std::fs::read(a.join(file)).unwrap(),
            std::fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.join("report.json")).unwrap()).unwrap();
    assert!(
        report["selection"]["selected"]["cell"]["f1"]
            .as_f64()
            .unwrap()
            >= 0.99
    );

    // Recorded pools reproduce the grid.
    let c = dir.path().join("c");
    let o = perfdelta(&[
        "tune",
        "--pools",
        a.join("pool").to_str().unwrap(),
        "--vm-grid",
        "5,10,30",
        "--iteration-grid",
        "10,30",
        "--repetitions-grid",
        "1000",
        "--resamples",
        "2000",
        "--seed",
        "4",
        "--out",
        c.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert_eq!(
        std::fs::read(a.join("heatmap.csv")).unwrap(),
        std::fs::read(c.join("heatmap.csv")).unwrap()
    );
}

#[test]
fn tune_records_pools_with_executors() {
    let dir = tempfile::tempdir().unwrap();
    let o = perfdelta(&[
        "tune",
        "--workload",
        "add,write",
        "--size",
        "30",
        "--vm-grid",
        "2,3",
        "--iteration-grid",
        "1,2",
        "--repetitions-grid",
        "5",
        "--resamples",
        "50",
        "--fake-clock",
        "0:10",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let base = MeasurementSeries::read_from(&dir.path().join("pool/add-r5-base.json")).unwrap();
    let changed =
        MeasurementSeries::read_from(&dir.path().join("pool/add-r5-changed.json")).unwrap();
    assert_eq!(base.config, changed.config);
    assert_eq!(base.vm_runs.len(), 6);
    assert_eq!(base.vm_runs[0].stream().count(), 4);
    assert_eq!(changed.workload.size, base.workload.size + 1);
    assert!(dir.path().join("heatmap-write.csv").exists());
}

#[test]
fn stddev_sweep_rows_match_series_files() {
    let dir = tempfile::tempdir().unwrap();
    let o = perfdelta(&[
        "stddev-sweep",
        "--workload",
        "add",
        "--sizes",
        "10,100,1000",
        "--vms",
        "3",
        "--warmup",
        "1",
        "--iterations",
        "3",
        "--repetitions",
        "20",
        "--series-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("kind,size,mean_ns,stddev_ns,relative_stddev")
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    for row in rows {
        let f: Vec<&str> = row.split(',').collect();
        let series =
            MeasurementSeries::read_from(&dir.path().join(format!("add-{}.json", f[1]))).unwrap();
        let (mean, sd, rel) = common::rational_summary(&series);
        let parse = |s: &str| s.parse::<f64>().unwrap();
        assert!(common::close(parse(f[2]), mean, 1e-12));
        assert!(common::close(parse(f[3]), sd, 1e-12));
        assert!(common::close(parse(f[4]), rel, 1e-12));
    }
}

#[test]
fn stddev_sweep_rejects_allocation_over_budget() {
    let o = Command::new(env!("CARGO_BIN_EXE_perfdelta"))
        .args([
            "stddev-sweep",
            "--workload",
            "allocate",
            "--sizes",
            "10,100000",
            "--repetitions",
            "1000",
        ])
        .env("PERFDELTA_MEM_BUDGET_BYTES", "1000000")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(o.stdout.is_empty());
}

#[test]
fn inject_reports_every_trial() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("study.json");
    let o = perfdelta(&[
        "inject",
        "--workload",
        "add",
        "--size",
        "10",
        "--trials",
        "3",
        "--vms",
        "2",
        "--warmup",
        "1",
        "--iterations",
        "1",
        "--repetitions",
        "2",
        "--fake-clock",
        "0:100",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let csv = stdout(&o);
    assert_eq!(
        csv.lines().next(),
        Some("delta_ns,trials,detections,rate,mean_gamma")
    );
    assert_eq!(csv.lines().count(), 5);
    let reports: Vec<StudyReport> = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(reports.len(), 4);
    for r in &reports {
        assert_eq!(r.outcomes.len(), 3);
        assert_eq!(r.erroneous, 0);
        for t in &r.outcomes {
            assert_eq!(t.base.with_delay_ns(r.plan.delta_ns), t.injected);
        }
    }
}

#[test]
fn inject_counts_erroneous_trials() {
    let o = perfdelta(&[
        "inject",
        "--workload",
        "add",
        "--size",
        "10",
        "--delta-ns",
        "5",
        "--trials",
        "2",
        "--vms",
        "2",
        "--warmup",
        "1",
        "--iterations",
        "1",
        "--repetitions",
        "2",
        "--fake-clock",
        "100:-1",
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).lines().nth(1), Some("5,2,0,0,0"));
}
