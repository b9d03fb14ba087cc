use std::path::{Path, PathBuf};
use std::process::Command;

use focusmatch_core::cli::run;
use focusmatch_core::image::Image;
use focusmatch_core::matcher::ModelWeights;
use focusmatch_core::transformer::TransformerConfig;

fn textured(h: usize, w: usize, shift: usize) -> Image {
    Image::from_fn(h, w, |x, y| {
        let (x, y) = ((x + shift) as f64, y as f64);
        0.5 + 0.2 * (0.31 * x + 0.4).sin() * (0.17 * y + 1.1).cos()
            + 0.15 * (0.07 * x + 0.23 * y + 2.0).sin()
            + 0.1 * (0.53 * x - 0.41 * y + 0.3).cos()
    })
    .unwrap()
}

fn pair(dir: &Path) -> (PathBuf, PathBuf) {
    let (a, b) = (dir.join("a.pgm"), dir.join("b.pgm"));
    textured(64, 64, 0).save(&a).unwrap();
    textured(64, 64, 8).save(&b).unwrap();
    (a, b)
}

fn cli(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let mut full = vec!["focusmatch"];
    full.extend_from_slice(args);
    let code = run(full, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

#[test]
fn match_runs_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = pair(dir.path());
    for variant in ["softmax", "linear", "focused"] {
        let (code, out, err) = cli(&["match", a.to_str().unwrap(), b.to_str().unwrap(), "--variant", variant]);
        assert_eq!(code, 0, "{variant}: {err}");
        assert!(out.starts_with("# xa\tya\txb\tyb\tconf\n"));
        assert!(err.contains(&format!("variant {variant}")));
    }
}

#[test]
fn match_output_file_and_formats() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _) = pair(dir.path());
    let out_path = dir.path().join("m.jsonl");
    let (code, out, err) = cli(&[
        "match",
        a.to_str().unwrap(),
        a.to_str().unwrap(),
        "--format",
        "jsonl",
        "--output",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.is_empty());
    let text = std::fs::read_to_string(&out_path).unwrap();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["xa", "ya", "xb", "yb", "conf"] {
            assert!(v[key].is_number(), "{line}");
        }
    }
}

#[test]
fn missing_image_is_io_error_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _) = pair(dir.path());
    let missing = dir.path().join("nowhere.pgm");
    let (code, _, err) = cli(&["match", a.to_str().unwrap(), missing.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains(missing.to_str().unwrap()), "{err}");
}

#[test]
fn invalid_image_is_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _) = pair(dir.path());
    let junk = dir.path().join("junk.pgm");
    std::fs::write(&junk, b"not an image").unwrap();
    let (code, _, err) = cli(&["match", a.to_str().unwrap(), junk.to_str().unwrap()]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn match_is_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = pair(dir.path());
    let args = |t: &'static str| ["match", a.to_str().unwrap(), b.to_str().unwrap(), "--seed", "7", "--threads", t];
    let (c1, one, _) = cli(&args("1"));
    let (c4, four, _) = cli(&args("4"));
    let (c1b, again, _) = cli(&args("1"));
    assert_eq!((c1, c4, c1b), (0, 0, 0));
    assert!(one.lines().count() > 10, "{one}");
    assert_eq!(one, four);
    assert_eq!(one, again);
}

#[test]
fn binary_runs_match_and_writes_atomically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = pair(dir.path());
    let out_path = dir.path().join("m.tsv");
    let status = Command::new(env!("CARGO_BIN_EXE_focusmatch"))
        .args(["match", a.to_str().unwrap(), b.to_str().unwrap(), "--output", out_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(0));
    assert!(std::fs::read_to_string(&out_path).unwrap().starts_with("# xa"));
    let leftovers: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| !["a.pgm", "b.pgm", "m.tsv"].contains(&n.as_str()))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(cli(&["eval", "--pairs", "0"]).0, 2);
    assert_eq!(cli(&["eval", "--pairs", "lots"]).0, 2);
    assert_eq!(cli(&["frobnicate"]).0, 2);
    assert_eq!(cli(&[]).0, 2);
    assert_eq!(cli(&["eval", "--no-such-flag", "1"]).0, 2);
    assert_eq!(cli(&["selftest", "--module", "nonsense"]).0, 2);
    let (code, out, _) = cli(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("gradcheck"));
}

#[test]
fn config_file_precedence_and_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    std::fs::write(&cfg, "# eval settings\npairs = 0\nransac_iters = 200\n").unwrap();
    let c = cfg.to_str().unwrap();
    // The file's pairs = 0 is a usage error unless a flag overrides it.
    assert_eq!(cli(&["eval", "--config", c]).0, 2);
    let (code, out, err) = cli(&["eval", "--config", c, "--pairs", "2"]);
    assert_eq!(code, 0, "{err}");
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(report["per_pair"].as_array().unwrap().len(), 2);

    std::fs::write(&cfg, "pairs = 2\nransac_itres = 200\n").unwrap();
    let (code, _, err) = cli(&["eval", "--config", c]);
    assert_eq!(code, 2);
    assert!(err.contains("ransac-itres"), "{err}");

    std::fs::write(&cfg, "pairs 2\n").unwrap();
    assert_eq!(cli(&["eval", "--config", c]).0, 2);
    assert_eq!(cli(&["eval", "--config", dir.path().join("absent").to_str().unwrap()]).0, 2);
}

#[test]
fn eval_report_schema() {
    let (code, out, err) = cli(&["eval", "--pairs", "3", "--seed", "4"]);
    assert_eq!(code, 0, "{err}");
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(v["config_digest"].as_str().unwrap().len() == 64);
    for t in ["5", "10", "20"] {
        assert_eq!(v["auc"][t].as_f64(), Some(1.0));
    }
    for rec in v["per_pair"].as_array().unwrap() {
        assert!(rec["pose_err_deg"].as_f64().unwrap() < 0.1);
    }
    assert!(err.contains("AUC@5 1.0000"));
}

#[test]
fn eval_texture_blank_reports_failures() {
    let (code, out, err) = cli(&["eval", "--mode", "texture", "--blank", "--pairs", "2", "--height", "64", "--width", "64"]);
    assert_eq!(code, 0, "{err}");
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    for rec in v["per_pair"].as_array().unwrap() {
        assert_eq!(rec["failed"], true);
        assert!(rec["pose_err_deg"].is_null());
    }
    assert_eq!(v["auc"]["5"].as_f64(), Some(0.0));
}

#[test]
fn gradcheck_default_passes_and_coarse_step_fails() {
    let (code, out, _) = cli(&["gradcheck"]);
    assert_eq!(code, 0, "{out}");
    for variant in ["softmax", "linear", "focused"] {
        assert!(out.lines().any(|l| l.starts_with(variant)));
    }
    let (code, out, _) = cli(&["gradcheck", "--seed", "11"]);
    assert_eq!(code, 0, "{out}");
    assert!(out.lines().any(|l| l.split_whitespace().nth(1) == Some("15")));
    let (code, out, _) = cli(&["gradcheck", "--h", "1e-2"]);
    assert_eq!(code, 1);
    assert!(out.contains("FAIL"));
}

#[test]
fn bench_emits_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("b.csv");
    let args = [
        "bench",
        "--variants",
        "focused,softmax",
        "--sizes",
        "64,128",
        "--dim",
        "8",
        "--reps",
        "3",
        "--output",
        out_path.to_str().unwrap(),
    ];
    assert_eq!(cli(&args).0, 0);
    let first = std::fs::read_to_string(&out_path).unwrap();
    assert!(first.starts_with("variant,N,d,median_seconds\nfocused,64,8,"));
    assert_eq!(cli(&args).0, 0);
    let second = std::fs::read_to_string(&out_path).unwrap();
    let numeric = |s: &str| s.lines().filter(|l| l.starts_with("# checksum")).map(String::from).collect::<Vec<_>>();
    assert_eq!(numeric(&first), numeric(&second));
    assert_eq!(cli(&["bench", "--reps", "2"]).0, 2);
    assert_eq!(cli(&["bench", "--sizes", "128,64"]).0, 2);
}

#[test]
fn selftest_filters_and_reports_corrupt_weights() {
    let (code, out, _) = cli(&["selftest", "--module", "matcher"]);
    assert_eq!(code, 0, "{out}");
    assert_eq!(out.lines().count(), 1);
    assert!(out.starts_with("matcher: "));

    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.bin");
    ModelWeights::init_seeded(0, &TransformerConfig::default()).save(&good).unwrap();
    assert_eq!(cli(&["selftest", "--module", "backbone", "--weights", good.to_str().unwrap()]).0, 0);

    let bad = dir.path().join("bad.bin");
    std::fs::write(&bad, b"garbage bytes").unwrap();
    let (code, out, _) = cli(&["selftest", "--weights", bad.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(out.contains("backbone: ") && out.contains("FAIL") && out.contains("offset"), "{out}");
    assert_eq!(out.lines().filter(|l| l.contains("checks passed")).count(), 6);
    assert_eq!(out.lines().filter(|l| l.contains("FAIL")).count(), 1);
}
