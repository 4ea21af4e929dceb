//! End-to-end tests of the `csoe` binary: every subcommand, the documented
//! exit codes, and byte-level determinism of the artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use csoe::metrics::{match_points, precision_recall_f1};
use csoe::radon::PointSet;
use csoe_cli::config::ExperimentConfig;
use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_csoe"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Small geometry so every test is fast: 24×24 frame, 16 angles, well
/// separated heads, a few SGD steps.
fn tiny_config(dir: &Path) -> PathBuf {
    let text = "\
frame_h = 24
frame_w = 24
k_min = 1
k_max = 4
sigma_min = 0.8
sigma_max = 1.2
min_sep = 5.0
angles = 16
lambda = 0.01
t_steps = 8
c_b = 4
dilations = \"1,2\"
ratio = 2
head_channels = 4
steps = 4
batch_size = 2
learning_rate = 0.0005
optimizer = \"sgd\"
";
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

fn read_points_json(path: &Path) -> (Vec<(f64, f64)>, Value) {
    let v: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    let pts = v["points"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| {
            // Stored as [x, y]; flip back to (row, col).
            (p[1].as_f64().unwrap(), p[0].as_f64().unwrap())
        })
        .collect();
    (pts, v)
}

#[test]
fn print_config_round_trips_to_defaults() {
    let out = run(&["print-config"]);
    assert_ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    let parsed: ExperimentConfig = toml::from_str(&text).unwrap();
    assert_eq!(parsed, ExperimentConfig::default());
}

#[test]
fn gen_data_zero_count_writes_empty_manifest() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    let out = run(&[
        "--config", cfg.to_str().unwrap(),
        "gen-data", "--count", "0", "--out", data.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["count"], 0);
    assert_eq!(manifest["entries"].as_array().unwrap().len(), 0);
    assert!(manifest["provenance"]["config_sha256"].is_string());
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path());
    for name in ["a", "b"] {
        let out = run(&[
            "--config", cfg.to_str().unwrap(),
            "gen-data", "--count", "3", "--out", dir.path().join(name).to_str().unwrap(),
        ]);
        assert_ok(&out);
    }
    for entry in fs::read_dir(dir.path().join("a")).unwrap() {
        let name = entry.unwrap().file_name();
        let a = fs::read(dir.path().join("a").join(&name)).unwrap();
        let b = fs::read(dir.path().join("b").join(&name)).unwrap();
        assert_eq!(a, b, "{name:?} differs between identical runs");
    }
}

/// gen-data → encode → oracle decode recovers every head to within 2 px.
#[test]
fn pipeline_oracle_decode_recovers_all_heads() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    let enc = dir.path().join("enc");
    let count = 6;
    assert_ok(&run(&[
        "--config", cfg.to_str().unwrap(),
        "gen-data", "--count", &count.to_string(), "--out", data.to_str().unwrap(),
    ]));
    assert_ok(&run(&[
        "--config", cfg.to_str().unwrap(),
        "encode", "--data", data.to_str().unwrap(), "--out", enc.to_str().unwrap(),
    ]));
    for i in 0..count {
        let codes = enc.join(format!("scene_{i:04}.codes"));
        let points_path = dir.path().join(format!("points_{i}.json"));
        assert_ok(&run(&[
            "--config", cfg.to_str().unwrap(),
            "decode",
            "--codes", codes.to_str().unwrap(),
            "--sensing", enc.join("sensing.bin").to_str().unwrap(),
            "--out", points_path.to_str().unwrap(),
        ]));
        let (pred, payload) = read_points_json(&points_path);
        let truth = csoe::io::read_annotations(&data.join(format!("scene_{i:04}.csv")), (24, 24))
            .unwrap();
        let pred = PointSet::new(pred, (24, 24)).unwrap();
        let mr = match_points(&pred, &truth, 2.0).unwrap();
        let (_, _, f1) = precision_recall_f1(&mr);
        assert_eq!(f1, 1.0, "scene {i}: pred {:?} vs gt {:?}", pred.points, truth.points);
        assert!(payload["provenance"]["config_sha256"].is_string());
    }
}

#[test]
fn malformed_annotation_row_is_named() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    assert_ok(&run(&[
        "--config", cfg.to_str().unwrap(),
        "gen-data", "--count", "1", "--out", data.to_str().unwrap(),
    ]));
    fs::write(data.join("scene_0000.csv"), "3.5,2.0\nbogus,4\n").unwrap();
    let out = run(&[
        "--config", cfg.to_str().unwrap(),
        "encode", "--data", data.to_str().unwrap(),
        "--out", dir.path().join("enc").to_str().unwrap(),
    ]);
    assert_exit(&out, 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 2"), "stderr should name the row: {stderr}");
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let out = run(&["--config", cfg.to_str().unwrap(), "print-config"]);
    assert_exit(&out, 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}

#[test]
fn unknown_flag_is_a_usage_error_and_help_is_not() {
    assert_exit(&run(&["gen-data", "--nonsense"]), 1);
    assert_exit(&run(&["--help"]), 0);
}

/// train → eval writes every artifact with embedded provenance, and a rerun
/// is byte-identical. A resumed run matches the uninterrupted weights.
#[test]
fn train_eval_resume_and_determinism() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg6 = dir.path().join("config6.toml");
    let text = fs::read_to_string(&cfg).unwrap();
    fs::write(&cfg6, text.replace("steps = 4", "steps = 6") + "checkpoint_every = 3\n").unwrap();
    let data = dir.path().join("data");
    assert_ok(&run(&[
        "--config", cfg.to_str().unwrap(),
        "gen-data", "--count", "4", "--out", data.to_str().unwrap(),
    ]));

    // Uninterrupted 6-step run, twice: byte-identical artifacts.
    let train = |model: &Path, log: &Path| {
        assert_ok(&run(&[
            "--config", cfg6.to_str().unwrap(),
            "train",
            "--data", data.to_str().unwrap(),
            "--model-out", model.to_str().unwrap(),
            "--log", log.to_str().unwrap(),
        ]));
    };
    let (m_a, l_a) = (dir.path().join("a.model"), dir.path().join("a.csv"));
    let (m_b, l_b) = (dir.path().join("b.model"), dir.path().join("b.csv"));
    train(&m_a, &l_a);
    train(&m_b, &l_b);
    assert_eq!(fs::read(&m_a).unwrap(), fs::read(&m_b).unwrap());
    assert_eq!(fs::read(&l_a).unwrap(), fs::read(&l_b).unwrap());
    let log_text = fs::read_to_string(&l_a).unwrap();
    assert!(log_text.starts_with("# {"), "log lacks provenance comment");
    assert!(log_text.contains("config_sha256"));
    assert_eq!(log_text.lines().count(), 2 + 6, "comment + header + 6 rows");

    // Stop at 3 (checkpoint config with steps = 3), then resume to 6.
    let cfg3 = dir.path().join("config3.toml");
    fs::write(&cfg3, fs::read_to_string(&cfg6).unwrap().replace("steps = 6", "steps = 3"))
        .unwrap();
    let (m_r, l_r) = (dir.path().join("r.model"), dir.path().join("r.csv"));
    assert_ok(&run(&[
        "--config", cfg3.to_str().unwrap(),
        "train",
        "--data", data.to_str().unwrap(),
        "--model-out", m_r.to_str().unwrap(),
        "--log", l_r.to_str().unwrap(),
    ]));
    assert_ok(&run(&[
        "--config", cfg6.to_str().unwrap(),
        "train",
        "--data", data.to_str().unwrap(),
        "--model-out", m_r.to_str().unwrap(),
        "--log", l_r.to_str().unwrap(),
        "--resume", m_r.to_str().unwrap(),
    ]));
    // Weight sections match the uninterrupted run exactly; manifests differ
    // only through the differing config hash, so compare payload bytes
    // (everything after the header line).
    let payload = |p: &Path| {
        let raw = fs::read(p).unwrap();
        let cut = raw.iter().position(|&b| b == b'\n').unwrap() + 1;
        raw[cut..].to_vec()
    };
    assert_eq!(payload(&m_a), payload(&m_r), "resumed weights diverge");
    let resumed_log = fs::read_to_string(&l_r).unwrap();
    assert_eq!(resumed_log.lines().count(), 2 + 6, "resume should keep earlier rows");

    // Eval: CSV + JSON + density table, deterministic across reruns.
    let eval = |prefix: &Path| {
        assert_ok(&run(&[
            "--config", cfg6.to_str().unwrap(),
            "eval",
            "--model", m_a.to_str().unwrap(),
            "--data", data.to_str().unwrap(),
            "--out-prefix", prefix.to_str().unwrap(),
            "--density-groups", "2",
        ]));
    };
    let (e_a, e_b) = (dir.path().join("ev_a"), dir.path().join("ev_b"));
    eval(&e_a);
    eval(&e_b);
    for ext in ["csv", "json", "density.csv"] {
        let a = fs::read(e_a.with_extension(ext)).unwrap();
        let b = fs::read(e_b.with_extension(ext)).unwrap();
        assert_eq!(a, b, "eval artifact .{ext} differs between reruns");
    }
    let summary: Value =
        serde_json::from_str(&fs::read_to_string(e_a.with_extension("json")).unwrap()).unwrap();
    assert_eq!(summary["threshold"], 4.0);
    assert_eq!(summary["images"], 4);
    assert!(summary["provenance"]["config_sha256"].is_string());
    assert!(summary["mae"].as_f64().unwrap() <= summary["rmse"].as_f64().unwrap());

    // Model-driven decode accepts the binary image format.
    let points_path = dir.path().join("decoded.json");
    assert_ok(&run(&[
        "--config", cfg6.to_str().unwrap(),
        "decode",
        "--model", m_a.to_str().unwrap(),
        "--image", data.join("scene_0000.bin").to_str().unwrap(),
        "--out", points_path.to_str().unwrap(),
    ]));
    let (_, payload) = read_points_json(&points_path);
    assert!(payload["count"].as_u64().is_some());
}

#[test]
fn decode_imports_grayscale_png() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    assert_ok(&run(&[
        "--config", cfg.to_str().unwrap(),
        "gen-data", "--count", "1", "--out", data.to_str().unwrap(),
    ]));
    let model = dir.path().join("model.bin");
    assert_ok(&run(&[
        "--config", cfg.to_str().unwrap(),
        "train",
        "--data", data.to_str().unwrap(),
        "--model-out", model.to_str().unwrap(),
        "--log", dir.path().join("log.csv").to_str().unwrap(),
    ]));
    // All-black 24×24 PNG: the network output is whatever the biases give,
    // but the command must succeed and produce a well-formed point list.
    let png = dir.path().join("black.png");
    image::GrayImage::new(24, 24).save(&png).unwrap();
    let out_path = dir.path().join("png_points.json");
    assert_ok(&run(&[
        "--config", cfg.to_str().unwrap(),
        "decode",
        "--model", model.to_str().unwrap(),
        "--image", png.to_str().unwrap(),
        "--out", out_path.to_str().unwrap(),
    ]));
    let (pts, payload) = read_points_json(&out_path);
    assert_eq!(payload["count"].as_u64().unwrap() as usize, pts.len());
    // Wrong-size PNG is a data error.
    let small = dir.path().join("small.png");
    image::GrayImage::new(8, 8).save(&small).unwrap();
    let out = run(&[
        "--config", cfg.to_str().unwrap(),
        "decode",
        "--model", model.to_str().unwrap(),
        "--image", small.to_str().unwrap(),
    ]);
    assert_exit(&out, 2);
}

#[test]
fn gradcheck_quick_prints_one_pass_line_per_rule() {
    let out = run(&["gradcheck", "--quick"]);
    assert_ok(&out);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let pass_lines = stdout.lines().filter(|l| l.ends_with("PASS")).count();
    assert_eq!(pass_lines, 8, "{stdout}");
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn ablate_rejects_gate_without_trunk_and_writes_requested_rows() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path());
    let out_csv = dir.path().join("ablation.csv");
    let out = run(&[
        "--config", cfg.to_str().unwrap(),
        "ablate", "--train-count", "2", "--eval-count", "2",
        "--out", out_csv.to_str().unwrap(),
        "--toggles", "csoe,arfw",
    ]);
    assert_exit(&out, 1);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("mdcb"), "must cite the trunk dependency: {stderr}");

    let out = run(&[
        "--config", cfg.to_str().unwrap(),
        "ablate", "--train-count", "3", "--eval-count", "2",
        "--out", out_csv.to_str().unwrap(),
        "--toggles", "csoe,mdcb,arfw,cp", "--toggles", "none",
    ]);
    assert_ok(&out);
    let text = fs::read_to_string(&out_csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("# {"));
    assert!(lines[1].starts_with("label,"));
    assert_eq!(lines.len(), 4, "comment + header + 2 rows: {text}");
    assert!(lines[2].starts_with("csoe+mdcb+arfw+cp,"));
    assert!(lines[3].starts_with("direct,"));
}

#[test]
fn report_merges_csv_files_into_column_statistics() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.csv");
    fs::write(&a, "# {\"config_sha256\":\"x\"}\nname,score\nfirst,1.0\nsecond,3.0\n").unwrap();
    let out_json = dir.path().join("report.json");
    let out = run(&["report", "--inputs", a.to_str().unwrap(), "--out", out_json.to_str().unwrap()]);
    assert_ok(&out);
    let v: Value = serde_json::from_str(&fs::read_to_string(&out_json).unwrap()).unwrap();
    let score = &v["tables"]["a.csv"]["columns"]["score"];
    assert_eq!(score["mean"], 2.0);
    assert_eq!(score["min"], 1.0);
    assert_eq!(score["max"], 3.0);
    assert_eq!(v["tables"]["a.csv"]["rows"], 2);
    // The non-numeric name column is absent.
    assert!(v["tables"]["a.csv"]["columns"].get("name").is_none());
}
