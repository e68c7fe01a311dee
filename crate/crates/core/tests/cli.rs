//! End-to-end runs of the `blurig` binary. Golden outputs live in
//! `tests/golden`; regenerate them with `BLURIG_UPDATE_GOLDEN=1`.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const FIXTURES: [&str; 4] = [
    "shapes16.model.json",
    "square16.png",
    "texture16.png",
    "noise16.csv",
];

fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

/// A temporary working directory holding copies of the fixtures.
fn workdir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for f in FIXTURES {
        std::fs::copy(manifest_dir().join("tests/fixtures").join(f), dir.path().join(f)).unwrap();
    }
    dir
}

fn blurig(cwd: &Path, args: &[&str], threads: Option<usize>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_blurig"));
    cmd.current_dir(cwd).args(args).env("RUST_LOG", "error");
    match threads {
        Some(n) => cmd.env("RAYON_NUM_THREADS", n.to_string()),
        None => cmd.env_remove("RAYON_NUM_THREADS"),
    };
    cmd.output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn check_golden(actual: &Path, golden: &str) {
    let golden = manifest_dir().join("tests/golden").join(golden);
    let bytes = std::fs::read(actual).unwrap();
    if std::env::var_os("BLURIG_UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(golden.parent().unwrap()).unwrap();
        std::fs::write(&golden, &bytes).unwrap();
        return;
    }
    let expected = std::fs::read(&golden).unwrap_or_else(|e| panic!("{}: {e}", golden.display()));
    assert!(bytes == expected, "{} differs from {}", actual.display(), golden.display());
}

const ATTRIBUTE_BLUR: &[&str] = &[
    "attribute", "--method", "blur-ig", "--model", "shapes16.model.json", "--input",
    "square16.png", "--class", "0", "--steps", "64", "--out", "out/blur",
];
const ATTRIBUTE_IG: &[&str] = &[
    "attribute", "--method", "ig", "--model", "shapes16.model.json", "--input", "noise16.csv",
    "--class", "1", "--steps", "50", "--baseline", "random:7", "--out", "out/ig",
];
const TREND: &[&str] = &[
    "trend", "--model", "shapes16.model.json", "--input", "texture16.png", "--classes", "2,0,1",
    "--steps", "32", "--out", "out/texture",
];

const GOLDEN_OUTPUTS: [(&str, &str); 7] = [
    ("out/blur.attr.csv", "attribute_blur.attr.csv"),
    ("out/blur.meta.json", "attribute_blur.meta.json"),
    ("out/blur.saliency.png", "attribute_blur.saliency.png"),
    ("out/ig.attr.csv", "attribute_ig.attr.csv"),
    ("out/ig.meta.json", "attribute_ig.meta.json"),
    ("out/texture.trend.csv", "trend_texture.trend.csv"),
    ("out/texture.trend.json", "trend_texture.trend.json"),
];

fn run_golden_commands(threads: Option<usize>) -> tempfile::TempDir {
    let dir = workdir();
    std::fs::create_dir(dir.path().join("out")).unwrap();
    for args in [ATTRIBUTE_BLUR, ATTRIBUTE_IG, TREND] {
        let out = blurig(dir.path(), args, threads);
        assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    dir
}

#[test]
fn golden_outputs_match() {
    let dir = run_golden_commands(None);
    for (actual, golden) in GOLDEN_OUTPUTS {
        check_golden(&dir.path().join(actual), golden);
    }
}

#[test]
fn golden_outputs_independent_of_thread_count() {
    for threads in [1, 3, 8] {
        let dir = run_golden_commands(Some(threads));
        for (actual, golden) in GOLDEN_OUTPUTS {
            check_golden(&dir.path().join(actual), golden);
        }
    }
}

#[test]
fn outputs_embed_version_and_flags() {
    let dir = run_golden_commands(None);
    let csv = std::fs::read_to_string(dir.path().join("out/blur.attr.csv")).unwrap();
    let first = csv.lines().next().unwrap();
    assert_eq!(first, format!("# blurig {} {}", env!("CARGO_PKG_VERSION"), ATTRIBUTE_BLUR.join(" ")));
    assert!(!csv.contains('\r'));
    assert_eq!(csv.lines().nth(1), Some("y,x,value"));

    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/blur.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["format_version"], 1);
    assert_eq!(meta["provenance"]["version"], env!("CARGO_PKG_VERSION"));
    let f_gap = meta["f_end"].as_f64().unwrap() - meta["f_start"].as_f64().unwrap();
    assert!(meta["residual"].as_f64().unwrap() <= 0.01 * f_gap.abs());

    let decoder = png::Decoder::new(std::io::BufReader::new(
        std::fs::File::open(dir.path().join("out/blur.saliency.png")).unwrap(),
    ));
    let reader = decoder.read_info().unwrap();
    let texts = &reader.info().uncompressed_latin1_text;
    assert!(texts.iter().any(|t| t.keyword == "Comment" && t.text == ATTRIBUTE_BLUR.join(" ")));
}

#[test]
fn trend_summary_matches_library_label_path() {
    use blurig::attribution::{second_last_label, PathSpec};
    use blurig::cli::io::read_field;
    use blurig::model::load_model;
    use blurig::scale_space::ScaleParameter;

    let dir = run_golden_commands(None);
    let summary: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("out/texture.trend.json")).unwrap(),
    )
    .unwrap();
    let model = load_model(dir.path().join("shapes16.model.json")).unwrap();
    let input = read_field(&dir.path().join("texture16.png")).unwrap();
    let path = PathSpec::blur(ScaleParameter::new(8.0).unwrap(), 32);
    let labels = second_last_label(&model, &input, 2, &path).unwrap();
    assert_eq!(summary["argmax_per_step"], serde_json::json!(labels.argmax_per_step));
    assert_eq!(summary["second_last_label"], serde_json::json!(labels.second_last_label));
}

#[test]
fn blur_attribution_of_constant_image_is_zero() {
    let dir = workdir();
    let row = vec!["0.375"; 16].join(",");
    std::fs::write(dir.path().join("flat.csv"), format!("{row}\n").repeat(16)).unwrap();
    let out = blurig(
        dir.path(),
        &[
            "attribute", "--method", "blur-ig", "--model", "shapes16.model.json", "--input",
            "flat.csv", "--class", "2", "--steps", "20", "--out", "flat",
        ],
        None,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("flat.attr.csv")).unwrap();
    for line in csv.lines().skip(2) {
        assert!(line.ends_with(",0.000000000000e0"), "{line}");
    }
}

#[test]
fn constant_input_gives_flat_trend() {
    let dir = workdir();
    let row = vec!["0.5"; 16].join(",");
    std::fs::write(dir.path().join("flat.csv"), format!("{row}\n").repeat(16)).unwrap();
    let out = blurig(
        dir.path(),
        &[
            "trend", "--model", "shapes16.model.json", "--input", "flat.csv", "--classes", "0,1",
            "--steps", "10", "--out", "flat",
        ],
        None,
    );
    assert_eq!(code(&out), 0);
    let csv = std::fs::read_to_string(dir.path().join("flat.trend.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(2)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 11);
    for r in &rows {
        assert!((r[2] - rows[0][2]).abs() < 1e-12 && (r[3] - rows[0][3]).abs() < 1e-12);
        assert!(r[4].abs() < 1e-12);
    }
}

#[test]
fn exit_codes() {
    let dir = workdir();
    let p = dir.path();
    let base = ["attribute", "--method", "ig", "--model", "shapes16.model.json", "--out", "x"];
    fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
        [base, extra].concat()
    }

    // Missing --class is a usage error with usage text.
    let out = blurig(p, &with(&base, &["--input", "square16.png"]), None);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let out = blurig(p, &with(&base, &["--input", "square16.png", "--class", "0", "--sigma-max", "2"]), None);
    assert_eq!(code(&out), 2);
    let out = blurig(p, &with(&base, &["--input", "square16.png", "--class", "9"]), None);
    assert_eq!(code(&out), 2);
    let out = blurig(p, &with(&base, &["--input", "square16.png", "--class", "0", "--baseline", "white"]), None);
    assert_eq!(code(&out), 2);

    let out = blurig(p, &with(&base, &["--input", "missing.png", "--class", "0"]), None);
    assert_eq!(code(&out), 3);
    std::fs::write(p.join("broken.json"), "{\"format_version\": 1").unwrap();
    let out = blurig(
        p,
        &["attribute", "--method", "ig", "--model", "broken.json", "--input", "square16.png", "--class", "0", "--out", "x"],
        None,
    );
    assert_eq!(code(&out), 3);

    std::fs::write(p.join("small.csv"), "0,1\n1,0\n").unwrap();
    let out = blurig(p, &with(&base, &["--input", "small.csv", "--class", "0"]), None);
    assert_eq!(code(&out), 4);

    let out = blurig(p, &["--version"], None);
    assert_eq!(code(&out), 0);
}

#[test]
fn axioms_command() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let out = blurig(p, &["axioms", "--suite", "causality", "--report", "causality.json"], None);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("causality.json")).unwrap()).unwrap();
    assert_eq!(report["format_version"], 1);
    assert_eq!(report["pass"], true);

    let out = blurig(p, &["axioms", "--suite", "dummy", "--negative-control", "--report", "neg.json"], None);
    assert_eq!(code(&out), 1);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("neg.json")).unwrap()).unwrap();
    assert_eq!(report["pass"], false);

    let out = blurig(p, &["axioms", "--suite", "dummy", "--report", "no/such/dir/r.json"], None);
    assert_eq!(code(&out), 3);
}

#[test]
fn dataset_fit_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let out = blurig(p, &["dataset", "--n", "6", "--size", "12x12", "--seed", "2", "--out", "shapes"], None);
    assert_eq!(code(&out), 0);
    let out = blurig(
        p,
        &["fit", "--dataset", "shapes", "--epochs", "3", "--out", "net.json"],
        None,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = blurig(
        p,
        &["eval", "--dataset", "shapes", "--model", "net.json", "--methods", "oracle,random:1,blur-ig", "--steps", "16", "--out", "ev"],
        None,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary = std::fs::read_to_string(p.join("ev.eval.csv")).unwrap();
    let oracle = summary.lines().find(|l| l.starts_with("oracle,")).unwrap();
    assert_eq!(oracle, "oracle,6,1.000000000000e0,1.000000000000e0,0.000000000000e0");
    let per_sample = std::fs::read_to_string(p.join("ev.samples.csv")).unwrap();
    assert_eq!(per_sample.lines().count(), 2 + 3 * 6);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("ev.eval.json")).unwrap()).unwrap();
    assert_eq!(json["samples"], 6);

    let out = blurig(
        p,
        &["eval", "--dataset", "generate:4:1", "--model", "net.json", "--methods", "gradcam", "--out", "ev2"],
        None,
    );
    assert_eq!(code(&out), 2);
}
