use std::path::{Path, PathBuf};
use std::process::Command;

use biomoe_cli::checkpoint::{decode_stage1, decode_unified, encode_stage1, encode_unified, load_unified};
use biomoe_cli::route_map::{compute_route_map, parse_route_csv};
use biomoe_cli::{run, EXIT_CONFIG, EXIT_RUNTIME, EXIT_USAGE};
use biomoe_core::landmark::read_landmarks;
use biomoe_core::TaskId;
use serde_json::Value;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

const SMALL: &str = r#"
seed = 1
[suite]
n_tasks = 3
d_model = 6
grid = 3
samples_per_task = 4
num_landmarks = 2
[moe]
d_inner = 12
num_experts = 3
top_k = 2
width_factor = 4
tau = 0.5
[stage1]
steps = 20
lr = 0.05
[stage2]
steps = 20
lr = 0.05
[route_map]
width = 5
height = 4
"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("run.toml"), config).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> i32 {
        let cfg = self.path("run.toml");
        let out = self.path("out");
        let mut argv = vec!["biomoe", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
        argv.extend_from_slice(args);
        run(argv)
    }

    fn out(&self, name: &str) -> PathBuf {
        self.path("out").join(name)
    }

    fn json(&self, name: &str) -> Value {
        serde_json::from_str(&std::fs::read_to_string(self.out(name)).unwrap()).unwrap()
    }
}

fn pipeline(ws: &Workspace) {
    assert_eq!(ws.run(&["train-stage1"]), 0);
    assert_eq!(ws.run(&["init-stage2"]), 0);
    assert_eq!(ws.run(&["train-stage2"]), 0);
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_biomoe")).arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert!(out.stdout.is_empty());
    assert_eq!(run(["biomoe", "route-map", "--grid", "16by16"]), EXIT_USAGE);
}

#[test]
fn invalid_configuration_exits_with_3() {
    let ws = Workspace::new("seed = 1\n[moe]\nexperts = 4\n");
    assert_eq!(ws.run(&["train-stage1"]), EXIT_CONFIG);
    let ws = Workspace::new("[moe]\ntop_k = 50\n");
    assert_eq!(ws.run(&["train-stage1"]), EXIT_CONFIG);
    assert_eq!(run(["biomoe", "--config", "/nonexistent/run.toml", "train-stage1"]), EXIT_CONFIG);
}

#[test]
fn corrupt_or_missing_checkpoints_exit_with_3() {
    let ws = Workspace::new(SMALL);
    std::fs::write(ws.path("bad.bmoe"), b"BMOE1\x01garbage").unwrap();
    let bad = ws.path("bad.bmoe");
    let lm = data("face_a.csv");
    let args = ["route-map", "--checkpoint", bad.to_str().unwrap(), "--landmarks", lm.to_str().unwrap()];
    assert_eq!(ws.run(&args), EXIT_CONFIG);
    assert_eq!(ws.run(&["init-stage2", "--checkpoint", bad.to_str().unwrap()]), EXIT_CONFIG);
}

#[test]
fn full_pipeline_with_seed_override() {
    let ws = Workspace::new(SMALL);
    pipeline(&ws);
    assert_eq!(ws.json("stage1_report.json")["seed"], 1);
    let report = ws.json("train_report.json");
    assert_eq!(report["seed"], 1);
    assert_eq!(report["steps"], 20);

    assert_eq!(ws.run(&["--seed", "9", "grad-check", "--task", "task2"]), 0);
    let gc = ws.json("grad_check.json");
    assert_eq!(gc["seed"], 9);
    assert_eq!(gc["report"]["passed"], true);
    assert_eq!(gc["report"]["task"], "task2");

    assert_eq!(ws.run(&["rank-report"]), 0);
    let rr = ws.json("rank_report.json");
    assert_eq!(rr["tasks"].as_array().unwrap().len(), 3);

    assert_eq!(ws.run(&["grad-check", "--task", "nope"]), EXIT_CONFIG);
}

#[test]
fn written_checkpoints_roundtrip_byte_for_byte() {
    let ws = Workspace::new(SMALL);
    pipeline(&ws);
    let s1 = std::fs::read(ws.out("stage1.bmoe")).unwrap();
    assert_eq!(encode_stage1(&decode_stage1(&s1).unwrap()), s1);
    for name in ["stage2_init.bmoe", "stage2.bmoe"] {
        let bytes = std::fs::read(ws.out(name)).unwrap();
        assert_eq!(encode_unified(&decode_unified(&bytes).unwrap()), bytes, "{name}");
    }
    let mut truncated = s1.clone();
    truncated.truncate(s1.len() - 3);
    assert!(decode_stage1(&truncated).is_err());
}

#[test]
fn route_maps_are_deterministic_and_exact() {
    let ws = Workspace::new(SMALL);
    pipeline(&ws);
    let lm = data("face_a.csv");
    let args = ["route-map", "--task", "task1", "--landmarks", lm.to_str().unwrap(), "--layer", "0"];
    assert_eq!(ws.run(&args), 0);
    let names: Vec<String> = (0..3)
        .map(|e| format!("route_map_layer0_expert{e}.pgm"))
        .chain(["route_map_layer0.csv".to_string()])
        .collect();
    let first: Vec<Vec<u8>> = names.iter().map(|n| std::fs::read(ws.out(n)).unwrap()).collect();
    assert_eq!(ws.run(&args), 0);
    for (n, bytes) in names.iter().zip(&first) {
        assert_eq!(&std::fs::read(ws.out(n)).unwrap(), bytes, "{n}");
    }

    let pgm = String::from_utf8(first[0].clone()).unwrap();
    assert!(pgm.starts_with("P2\n5 4\n255\n"));
    assert_eq!(pgm.lines().count(), 3 + 4);

    let probs = parse_route_csv(&String::from_utf8(first[3].clone()).unwrap()).unwrap();
    assert_eq!(probs.len(), 20);
    for p in &probs {
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let model = load_unified(&ws.out("stage2.bmoe")).unwrap();
    let set = read_landmarks(std::fs::File::open(&lm).unwrap()).unwrap();
    let map = compute_route_map(&model, &TaskId::new("task1"), &set, 5, 4, 0, 1).unwrap();
    assert_eq!(map.probabilities, probs);

    assert_eq!(ws.run(&["route-map", "--landmarks", lm.to_str().unwrap(), "--layer", "3"]), EXIT_CONFIG);
    assert_eq!(ws.run(&["route-map", "--landmarks", lm.to_str().unwrap(), "--grid", "0x4"]), EXIT_CONFIG);
}

#[test]
fn canonical_filter_and_blend() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = data("canonical.toml");
    let cfg = cfg.to_str().unwrap();
    assert_eq!(run(["biomoe", "--config", cfg, "--out", out, "--seed", "4", "filter-pairs"]), 0);
    let kept = std::fs::read_to_string(dir.path().join("kept.txt")).unwrap();
    assert_eq!(kept, "p00\np04\n");
    let rejected = std::fs::read_to_string(dir.path().join("rejected.txt")).unwrap();
    assert_eq!(rejected.lines().count(), 8);
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("filter_report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 4);
    assert_eq!(report["outcome"]["yield_fraction"], 0.2);

    assert_eq!(run(["biomoe", "--config", cfg, "--out", out, "blend-landmarks"]), 0);
    let blended = read_landmarks(std::fs::File::open(dir.path().join("blended.csv")).unwrap()).unwrap();
    let b = read_landmarks(std::fs::File::open(data("face_b.csv")).unwrap()).unwrap();
    let (pb, po) = (b.proportions().unwrap(), blended.proportions().unwrap());
    assert!((pb.inter_pupil - po.inter_pupil).abs() < 1e-9);
    assert!((pb.nose_to_mouth - po.nose_to_mouth).abs() < 1e-9);
    assert!((pb.nose_to_eye - po.nose_to_eye).abs() < 1e-9);
    let flat = std::fs::read_to_string(dir.path().join("blended_2d.csv")).unwrap();
    assert_eq!(flat.lines().count(), blended.len() + 1);

    let missing = dir.path().join("missing.csv");
    let args = ["biomoe", "--out", out, "filter-pairs", "--table", missing.to_str().unwrap()];
    assert_eq!(run(args), EXIT_RUNTIME);
}

#[test]
fn interference_reports_three_regimes() {
    let ws = Workspace::new(SMALL);
    assert_eq!(ws.run(&["interference"]), 0);
    let r = ws.json("interference.json");
    for regime in ["task_specific", "naive_sharing", "biomoe"] {
        assert_eq!(r["report"][regime].as_array().unwrap().len(), 3, "{regime}");
    }
    assert_eq!(r["report"]["seed"], 1);
}
