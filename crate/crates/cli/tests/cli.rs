use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fogalloc"));
    for (k, _) in std::env::vars() {
        if k.starts_with("FOGALLOC_") {
            c.env_remove(k);
        }
    }
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn fogalloc")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const EIGHT_NODES: &str = r#"{
  "nodes": [
    {"id": "end:1", "kind": "end_device", "address": "10.1.0.1"},
    {"id": "end:2", "kind": "end_device", "address": "10.1.0.2"},
    {"id": "openflow:1", "kind": "switch"},
    {"id": "openflow:2", "kind": "switch"},
    {"id": "openflow:3", "kind": "switch"},
    {"id": "fog:1", "kind": "fog_device", "total_processing": 2.0, "total_memory": 2147483648},
    {"id": "fog:2", "kind": "fog_device", "total_processing": 4.0, "total_memory": 1073741824},
    {"id": "controller", "kind": "controller"}
  ],
  "links": [
    {"src": "end:1", "dst": "openflow:1", "src_port": 1, "dst_port": 1, "total_bw": 1000000000},
    {"src": "end:2", "dst": "openflow:2", "src_port": 1, "dst_port": 1, "total_bw": 1000000000},
    {"src": "openflow:1", "dst": "openflow:2", "src_port": 2, "dst_port": 2, "total_bw": 300000000},
    {"src": "openflow:1", "dst": "openflow:3", "src_port": 3, "dst_port": 1, "total_bw": 1000000000},
    {"src": "openflow:2", "dst": "openflow:3", "src_port": 3, "dst_port": 2, "total_bw": 500000000},
    {"src": "openflow:3", "dst": "fog:1", "src_port": 3, "dst_port": 1, "total_bw": 1000000000},
    {"src": "openflow:2", "dst": "fog:2", "src_port": 4, "dst_port": 1, "total_bw": 400000000},
    {"src": "controller", "dst": "openflow:3", "src_port": 1, "dst_port": 4, "total_bw": 1000000000}
  ],
  "duplex": true
}"#;

fn sequential_scenario(devices: usize) -> String {
    let events: Vec<String> = (0..devices)
        .map(|i| {
            format!(
                r#"{{"at": {}, "node": "end:{}", "action": {{"type": "request", "bw": 20000000, "cpu": 0.5, "mem": 100000000, "image": "sleep", "hold": 2}}}}"#,
                i * 5,
                i + 1
            )
        })
        .collect();
    format!(r#"{{"events": [{}]}}"#, events.join(",\n"))
}

struct Work {
    dir: TempDir,
}

impl Work {
    fn new() -> Self {
        Work {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn file(&self, name: &str, content: &str) -> PathBuf {
        let path = self.dir.path().join(name);
        fs::write(&path, content).unwrap();
        path
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

#[test]
fn gen_writes_a_loadable_topology() {
    let w = Work::new();
    let out = w.path("t.json");
    let o = run(&["gen", "--gen", "b:25,12,6", "--fogs", "5", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let nodes = doc["nodes"].as_array().unwrap();
    let count = |k: &str| nodes.iter().filter(|n| n["kind"] == k).count();
    assert_eq!(count("switch"), 43);
    assert_eq!(count("fog_device"), 30);
    assert_eq!(count("end_device"), 25);
}

#[test]
fn sequential_run_succeeds_with_fulfillment_series() {
    let w = Work::new();
    let scenario = w.file("s.json", &sequential_scenario(8));
    let out = w.path("out");
    let o = run(&[
        "run",
        "--gen",
        "b:8,4,2",
        "--fogs",
        "2",
        "--scenario",
        p(&scenario),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("time,series,value\n"));
    assert_eq!(csv.lines().filter(|l| l.contains(",fulfillment,")).count(), 8);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["requests"], 8);
    assert_eq!(summary["successes"], 8);
    assert_eq!(summary["shutdowns"], 8);
    assert_eq!(summary["reconciled"], true);
}

#[test]
fn infeasible_request_is_data_not_an_error() {
    let w = Work::new();
    let scenario = w.file(
        "s.json",
        r#"{"events": [{"at": 0, "node": "end:1", "action": {"type": "request", "bw": 1000000, "cpu": 64, "mem": 1000}}]}"#,
    );
    let out = w.path("out");
    let o = run(&["run", "--gen", "a:3,3", "--scenario", p(&scenario), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["failures"]["no_servicer"], 1);
    assert_eq!(summary["successes"], 0);
}

#[test]
fn corrupted_topology_is_a_usage_error() {
    let w = Work::new();
    let topo = w.file(
        "t.json",
        r#"{"nodes": [{"id": "x", "kind": "switch"}], "links": [{"src": "x""#,
    );
    let scenario = w.file("s.json", r#"{"events": []}"#);
    let o = run(&[
        "run",
        "--topology",
        p(&topo),
        "--scenario",
        p(&scenario),
        "--out",
        p(&w.path("o")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
}

#[test]
fn topology_source_must_be_unique() {
    let w = Work::new();
    let topo = w.file("t.json", EIGHT_NODES);
    let both = run(&["check", "--topology", p(&topo), "--gen", "a:3,3"]);
    assert_eq!(code(&both), 2);
    let neither = run(&["check"]);
    assert_eq!(code(&neither), 2);
}

#[test]
fn unknown_scenario_node_is_a_usage_error() {
    let w = Work::new();
    let scenario = w.file(
        "s.json",
        r#"{"events": [{"at": 0, "node": "end:404", "action": {"type": "shutdown"}}]}"#,
    );
    let o = run(&[
        "run",
        "--gen",
        "a:3,3",
        "--scenario",
        p(&scenario),
        "--out",
        p(&w.path("o")),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn run_output_is_byte_stable() {
    let w = Work::new();
    let scenario = w.file(
        "s.json",
        r#"{"load": {"x": 200000000, "y": 50000000}, "events": [
            {"at": 0, "node": "end:1", "action": {"type": "request", "bw": 100000000, "cpu": 1, "mem": 1000, "label": "a"}},
            {"at": 1, "node": "end:1", "action": {"type": "stream", "rate": 150000000, "duration": 5, "label": "a"}},
            {"at": 2, "node": "end:2", "action": {"type": "request", "bw": 5000000, "cpu": 0.1, "mem": 1000, "hold": 1}}
        ]}"#,
    );
    let sim = w.file("sim.json", r#"{"jitter_bps": 1000000}"#);
    let mut outputs = Vec::new();
    for i in 0..2 {
        let out = w.path(&format!("o{i}"));
        let o = run(&[
            "run",
            "--gen",
            "b:4,2,2",
            "--scenario",
            p(&scenario),
            "--out",
            p(&out),
            "--seed",
            "9",
            "--sim-config",
            p(&sim),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push((
            fs::read(out.join("metrics.csv")).unwrap(),
            fs::read(out.join("summary.json")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn env_mirrors_flags() {
    let w = Work::new();
    let out = w.path("t.json");
    let o = bin()
        .args(["gen"])
        .env("FOGALLOC_GEN", "a:4,3")
        .env("FOGALLOC_OUT", &out)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(
        doc["nodes"]
            .as_array()
            .unwrap()
            .iter()
            .filter(|n| n["kind"] == "switch")
            .count(),
        7
    );
}

fn csv_rows(bytes: &[u8]) -> Vec<csv::StringRecord> {
    csv::Reader::from_reader(bytes).records().map(Result::unwrap).collect()
}

#[test]
fn one_point_sweep_gives_one_row() {
    let o = run(&[
        "sweep", "--sweep", "raa_time", "--gen", "b:4,2,2", "--grid", "fogs=2", "--reps", "1",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&o.stdout);
    assert_eq!(rows.len(), 1);
    assert_eq!(&rows[0][0], "b:4,2,2 fogs=2");
    assert_eq!(&rows[0][1], "raa_time_s");
    let (q1, med, q3): (f64, f64, f64) = (
        rows[0][3].parse().unwrap(),
        rows[0][2].parse().unwrap(),
        rows[0][4].parse().unwrap(),
    );
    assert!(q1 <= med && med <= q3);
}

#[test]
fn alloc_delay_sweep_groups_by_hops() {
    let w = Work::new();
    let out = w.path("sweep.csv");
    let args = [
        "sweep",
        "--sweep",
        "alloc_delay",
        "--gen",
        "b:8,4,2",
        "--grid",
        "x=0,400000000;y=50000000",
        "--out",
        p(&out),
    ];
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let first = fs::read(&out).unwrap();
    let rows = csv_rows(&first);
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r[1].starts_with("alloc_delay_s hops=")));
    let median = |x: &str| -> f64 {
        rows.iter().find(|r| r[0].contains(&format!("x={x} "))).unwrap()[2]
            .parse()
            .unwrap()
    };
    assert!(median("400000000") > median("0"));
    assert_eq!(code(&run(&args)), 0);
    assert_eq!(fs::read(&out).unwrap(), first);
}

#[test]
fn bad_grid_key_is_a_usage_error() {
    let o = run(&["sweep", "--sweep", "raa_time", "--grid", "hops=3"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn check_with_empty_budget_passes() {
    let o = run(&["check", "--gen", "a:3,3", "--ops", "0"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn seeded_fuzz_on_eight_nodes_passes_the_oracle() {
    let w = Work::new();
    let topo = w.file("t.json", EIGHT_NODES);
    let o = run(&["check", "--topology", p(&topo), "--ops", "600", "--seed", "42"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["oracle_checks"].as_u64().unwrap() > 200);
    assert!(report["allocations"].as_u64().unwrap() > 0);
    assert!(report["failures"].as_u64().unwrap() > 0);
}

#[test]
fn corrupted_ledger_fails_with_a_counterexample() {
    let w = Work::new();
    let topo = w.file("t.json", EIGHT_NODES);
    let dump = w.path("cx.json");
    let o = run(&["check", "--topology", p(&topo), "--corrupt-ledger", "--out", p(&dump)]);
    assert_eq!(code(&o), 1);
    let cx: serde_json::Value = serde_json::from_str(&fs::read_to_string(&dump).unwrap()).unwrap();
    assert!(cx["problem"].as_str().unwrap().contains("fog:1"));
    assert!(cx["topology"].is_object());
}
