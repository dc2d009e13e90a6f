use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;
use xnorram::memaudit::{self, PrecisionPolicy};
use xnorram::netspec;

fn xnorram(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xnorram"))
        .arg("--output")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(
        o.status.success(),
        "command failed: {}\n{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn accuracy_line(text: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix("accuracy "))
        .expect("accuracy line")
        .trim()
        .parse()
        .unwrap()
}

#[test]
fn shapes_table_ends_with_two_class_softmax() {
    let dir = TempDir::new().unwrap();
    let text = stdout(&xnorram(dir.path(), &["shapes", "--model", "eeg_dose"]));
    let last = text.lines().filter(|l| !l.trim().is_empty()).last().unwrap();
    assert!(last.contains("Softmax"), "{last}");
    assert!(last.trim_end().ends_with('2'), "{last}");
}

#[test]
fn unknown_model_exits_nonzero() {
    let dir = TempDir::new().unwrap();
    let o = xnorram(dir.path(), &["shapes", "--model", "no_such_net"]);
    assert!(!o.status.success());
    assert!(!o.stderr.is_empty());
}

#[test]
fn unknown_flag_is_rejected() {
    let dir = TempDir::new().unwrap();
    assert!(!xnorram(dir.path(), &["shapes", "--model", "eeg_dose", "--bogus"]).status.success());
}

#[test]
fn shapes_tsv_round_trips_against_inference() {
    let dir = TempDir::new().unwrap();
    for name in ["eeg_dose", "ecg_custom", "mobilenet_v1_224"] {
        let text = stdout(&xnorram(dir.path(), &["shapes", "--model", name, "--format", "tsv"]));
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap().split('\t').collect();
        let col = header.iter().position(|h| *h == "Output shape").expect("output column");
        let parsed: Vec<String> = lines.map(|l| l.split('\t').nth(col).unwrap().to_string()).collect();
        let spec = netspec::builtin(name).unwrap();
        let expected: Vec<String> = spec.infer_shapes().unwrap().iter().map(|s| s.to_string()).collect();
        assert_eq!(parsed, expected, "{name}");
    }
}

#[test]
fn mem_report_rows_match_individual_audits() {
    let dir = TempDir::new().unwrap();
    let text = stdout(&xnorram(
        dir.path(),
        &[
            "mem-report", "--model", "eeg_dose", "--model", "ecg_custom", "--model", "mobilenet_v1_binclf",
            "--policy", "binclf", "--format", "json",
        ],
    ));
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let reports = v["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 3);
    for r in reports {
        let name = r["model"].as_str().unwrap();
        let spec = netspec::builtin(name).unwrap();
        let direct = match netspec::builtin_baseline(name) {
            Some(b) => memaudit::audit_with_baseline(&spec, &PrecisionPolicy::binclf(), &netspec::builtin(b).unwrap()),
            None => memaudit::audit(&spec, &PrecisionPolicy::binclf()),
        }
        .unwrap();
        assert_eq!(r["bytes"].as_u64().unwrap(), direct.bytes, "{name}");
        assert_eq!(r["savings_vs_fp32"].as_f64().unwrap(), direct.savings_vs_fp32, "{name}");
        assert_eq!(r["savings_vs_int8"].as_f64().unwrap(), direct.savings_vs_int8, "{name}");
    }
}

#[test]
fn baseline_policy_reports_zero_savings() {
    let dir = TempDir::new().unwrap();
    let text = stdout(&xnorram(
        dir.path(),
        &["mem-report", "--model", "eeg_dose", "--policy", "fp32", "--format", "json"],
    ));
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let r = &v["reports"][0];
    assert_eq!(r["savings_vs_fp32"].as_f64().unwrap(), 0.0);
}

#[test]
fn manifest_is_written_beside_outputs() {
    let dir = TempDir::new().unwrap();
    stdout(&xnorram(dir.path(), &["--seed", "7", "shapes", "--model", "ecg_custom"]));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "shapes");
    assert_eq!(m["seed"], 7);
    assert!(m["version"].is_string());
    for f in m["outputs"].as_array().unwrap() {
        let f = f.as_str().unwrap();
        assert!(dir.path().join(f).exists() || Path::new(f).exists(), "{f}");
    }
}

fn train_separable(dir: &Path) {
    stdout(&xnorram(
        dir,
        &[
            "--seed", "1", "train", "--model", "desk_dense", "--synthetic", "separable", "--samples", "400",
            "--strategy", "real", "--epochs", "20", "--lr", "0.003",
        ],
    ));
}

#[test]
fn train_then_infer_on_separable_data() {
    let dir = TempDir::new().unwrap();
    train_separable(dir.path());
    let model = dir.path().join("model.xnr");
    let norm = dir.path().join("normalization.json");
    let run = |seed: &str| {
        let o = xnorram(
            dir.path(),
            &[
                "--seed", seed, "infer", "--model-file", model.to_str().unwrap(), "--synthetic", "separable",
                "--samples", "300", "--norm", norm.to_str().unwrap(),
            ],
        );
        stdout(&o)
    };
    let a = run("99");
    assert!(accuracy_line(&a) >= 0.95, "{}", accuracy_line(&a));
    assert_eq!(a, run("99"), "infer is deterministic");
}

#[test]
fn infer_on_zero_length_input_fails_with_shape_error() {
    let dir = TempDir::new().unwrap();
    train_separable(dir.path());
    let csv = dir.path().join("empty.csv");
    fs::write(&csv, "label\n1\n0\n").unwrap();
    let o = xnorram(
        dir.path(),
        &["infer", "--model-file", dir.path().join("model.xnr").to_str().unwrap(), "--data", csv.to_str().unwrap()],
    );
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr).to_lowercase();
    assert!(err.contains("shape") || err.contains("zero-length"), "{err}");
}

#[test]
fn missing_model_file_exits_nonzero() {
    let dir = TempDir::new().unwrap();
    let o = xnorram(
        dir.path(),
        &["fault-sweep", "--model-file", "/nonexistent/model.xnr", "--synthetic", "separable"],
    );
    assert!(!o.status.success());
}

#[test]
fn fault_sweep_is_deterministic_and_zero_rate_is_clean() {
    let dir = TempDir::new().unwrap();
    stdout(&xnorram(
        dir.path(),
        &[
            "--seed", "2", "train", "--model", "desk_dense", "--synthetic", "separable", "--samples", "200",
            "--strategy", "all_binary", "--epochs", "10", "--lr", "0.003",
        ],
    ));
    let model = dir.path().join("model.xnr");
    let norm = dir.path().join("normalization.json");
    let zero = dir.path().join("zero.txt");
    fs::write(&zero, "1 0\n10000000 0\n").unwrap();
    let sweep = |extra: &[&str]| {
        let mut args = vec![
            "--seed", "5", "fault-sweep", "--model-file", model.to_str().unwrap(), "--synthetic", "separable",
            "--samples", "120", "--norm", norm.to_str().unwrap(), "--repetitions", "4", "--cycles", "1,1000,10000000",
        ];
        args.extend_from_slice(extra);
        stdout(&xnorram(dir.path(), &args))
    };
    let a = sweep(&[]);
    assert_eq!(a, sweep(&[]));

    let z = sweep(&["--modes", "1t1r", "--ber-curve", &format!("1t1r={}", zero.display()), "--format", "json"]);
    let v: serde_json::Value = serde_json::from_str(&z).unwrap();
    let clean = v["clean_accuracy"].as_f64().unwrap();
    for row in v["rows"].as_array().unwrap() {
        assert_eq!(row["mean_accuracy"].as_f64().unwrap(), clean);
        assert_eq!(row["std_accuracy"].as_f64().unwrap(), 0.0);
    }
}

#[test]
fn selftest_passes() {
    let dir = TempDir::new().unwrap();
    let text = stdout(&xnorram(dir.path(), &["selftest"]));
    assert!(text.contains("[PASS]"));
    assert!(!text.contains("[FAIL]"));
}
