//! End-to-end command tests: flag precedence through the binary, analyze
//! outputs, ablation runs, generation determinism, and exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crossinit::diagnostics::parse_trajectory_csv;

const BIN: &str = env!("CARGO_BIN_EXE_crossinit");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn write_test_image(dir: &Path) -> PathBuf {
    let path = dir.join("face.png");
    let mut img = image::GrayImage::new(16, 16);
    for (i, p) in img.pixels_mut().enumerate() {
        p.0[0] = (127.0 + 120.0 * (0.3 * i as f64).sin()) as u8;
    }
    img.save(&path).unwrap();
    path
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn flag_precedence_through_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let img = write_test_image(tmp.path());
    let config_path = tmp.path().join("config.json");
    std::fs::write(
        &config_path,
        r#"{"steps": 40, "seed": 11, "lambda": 0.0002}"#,
    )
    .unwrap();
    let out_dir = tmp.path().join("out");
    let output = run(&[
        "train",
        "--backend",
        "toy",
        "--config",
        config_path.to_str().unwrap(),
        "--steps",
        "12",
        "--image",
        img.to_str().unwrap(),
        "--output-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{output:?}");
    let m = manifest(&out_dir);
    assert_eq!(m["config"]["steps"], 12, "CLI flag beats config file");
    assert_eq!(m["config"]["seed"], 11, "config file beats default");
    assert_eq!(m["config"]["lambda"], 0.0002);
    assert_eq!(m["config"]["learning_rate"], 0.005, "built-in default");
}

#[test]
fn analyze_identity_adapter_trace_is_flat_and_k_zero_single_row() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("an");
    let output = run(&[
        "analyze",
        "--backend",
        "adapter:identity",
        "--prompt",
        "a photo of a person",
        "--k",
        "0",
        "--output-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{output:?}");

    let find = |suffix: &str| -> PathBuf {
        std::fs::read_dir(&out_dir)
            .unwrap()
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .find(|p| p.to_string_lossy().ends_with(suffix))
            .unwrap()
    };
    let block = std::fs::read_to_string(find("_block_trace.csv")).unwrap();
    let lines: Vec<&str> = block.lines().collect();
    assert_eq!(lines.len(), 3, "identity trace: header + input + final");
    // flat: identical norms, cosines exactly 1
    let parse_row = |line: &str| -> (f64, f64) {
        let cells: Vec<&str> = line.split(',').collect();
        (cells[1].parse().unwrap(), cells[2].parse().unwrap())
    };
    let (n1, c1) = parse_row(lines[1]);
    let (n2, c2) = parse_row(lines[2]);
    assert_eq!(n1, n2);
    assert_eq!(c1, 1.0);
    assert_eq!(c2, 1.0);

    let repeated = std::fs::read_to_string(find("_repeated_encoding.csv")).unwrap();
    assert_eq!(repeated.lines().count(), 2, "k=0: header + single row");
}

#[test]
fn ablate_no_reg_trajectory_has_equal_total_and_diffusion() {
    let tmp = tempfile::tempdir().unwrap();
    let img = write_test_image(tmp.path());
    let out_dir = tmp.path().join("ab");
    let output = run(&[
        "ablate",
        "--mode",
        "no-reg",
        "--backend",
        "toy",
        "--seed",
        "7",
        "--steps",
        "10",
        "--image",
        img.to_str().unwrap(),
        "--output-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{output:?}");
    let csv_path = std::fs::read_dir(&out_dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .find(|p| p.to_string_lossy().ends_with("_trajectory.csv"))
        .unwrap();
    let rows = parse_trajectory_csv(&csv_path).unwrap();
    assert!(!rows.is_empty());
    for row in rows {
        assert_eq!(row.total_loss, row.diffusion_loss);
    }
}

#[test]
fn directional_geometry_visible_in_trajectory_csvs() {
    // short CLI analogue of the pinned geometry fixture: cross stays near
    // its init, super-category drifts
    let tmp = tempfile::tempdir().unwrap();
    let img = write_test_image(tmp.path());
    let train = |init: &str, out: &Path| {
        let output = run(&[
            "train",
            "--backend",
            "toy",
            "--seed",
            "7",
            "--steps",
            "50",
            "--init",
            init,
            "--image",
            img.to_str().unwrap(),
            "--output-dir",
            out.to_str().unwrap(),
        ]);
        assert!(output.status.success(), "{output:?}");
        let csv = std::fs::read_dir(out)
            .unwrap()
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .find(|p| p.to_string_lossy().ends_with("_trajectory.csv"))
            .unwrap();
        parse_trajectory_csv(&csv).unwrap()
    };
    let cross = train("cross", &tmp.path().join("cross"));
    let super_cat = train("super-category", &tmp.path().join("super"));
    let last_step = cross.iter().map(|r| r.step).max().unwrap();
    for slot in ["f", "l"] {
        let pick = |rows: &[crossinit::diagnostics::TrajectoryCsvRow]| {
            rows.iter()
                .find(|r| r.step == last_step && r.slot == slot)
                .unwrap()
                .clone()
        };
        let c = pick(&cross);
        let s = pick(&super_cat);
        assert!((c.norm_ratio - 1.0).abs() < (s.norm_ratio - 1.0).abs());
        assert!((1.0 - c.cos_init) < (1.0 - s.cos_init));
    }
}

#[test]
fn generate_is_seed_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let img = write_test_image(tmp.path());
    let train_out = tmp.path().join("t");
    let output = run(&[
        "train",
        "--backend",
        "toy",
        "--seed",
        "7",
        "--steps",
        "5",
        "--image",
        img.to_str().unwrap(),
        "--output-dir",
        train_out.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{output:?}");
    let concept = train_out.join("concept.json");

    let generate = |out: &Path| {
        let output = run(&[
            "generate",
            "--backend",
            "toy",
            "--seed",
            "3",
            "--n-per-prompt",
            "1",
            "--concept",
            concept.to_str().unwrap(),
            "--output-dir",
            out.to_str().unwrap(),
        ]);
        assert!(output.status.success(), "{output:?}");
    };
    let a = tmp.path().join("ga");
    let b = tmp.path().join("gb");
    generate(&a);
    generate(&b);
    let mut names: Vec<String> = std::fs::read_dir(&a)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.contains("_gen_"))
        .collect();
    names.sort();
    assert_eq!(names.len(), 20);
    for name in names {
        let fa = std::fs::read(a.join(&name)).unwrap();
        let fb = std::fs::read(b.join(&name)).unwrap();
        assert_eq!(fa, fb, "latent file {name} differs between reruns");
    }
}

#[test]
fn evaluate_on_two_prompt_set_matches_report_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let img = write_test_image(tmp.path());
    let train_out = tmp.path().join("t");
    assert!(run(&[
        "train",
        "--backend",
        "toy",
        "--seed",
        "7",
        "--steps",
        "5",
        "--image",
        img.to_str().unwrap(),
        "--output-dir",
        train_out.to_str().unwrap(),
    ])
    .status
    .success());

    let prompts = tmp.path().join("two.txt");
    std::fs::write(
        &prompts,
        "plain\ta photo of a {S*} person\nstyle\tcubism painting of a {S*} person\n",
    )
    .unwrap();
    let out_dir = tmp.path().join("ev");
    assert!(run(&[
        "evaluate",
        "--backend",
        "toy",
        "--seed",
        "7",
        "--concept",
        train_out.join("concept.json").to_str().unwrap(),
        "--image",
        img.to_str().unwrap(),
        "--prompts",
        prompts.to_str().unwrap(),
        "--output-dir",
        out_dir.to_str().unwrap(),
    ])
    .status
    .success());

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["version"], 1);
    assert_eq!(report["per_prompt"].as_array().unwrap().len(), 2);
    // style prompt excluded: identity mean equals the plain prompt's score
    let plain_identity = report["per_prompt"][0]["identity"].as_f64().unwrap();
    let identity_mean = report["identity_mean"].as_f64().unwrap();
    assert!((identity_mean - plain_identity).abs() <= 1e-12);
    assert_eq!(
        report["excluded_from_identity"].as_array().unwrap().len(),
        1
    );
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let img = write_test_image(tmp.path());

    // unknown field in config file
    let bad_config = tmp.path().join("bad.json");
    std::fs::write(&bad_config, r#"{"stepz": 5}"#).unwrap();
    let output = run(&[
        "train",
        "--backend",
        "toy",
        "--config",
        bad_config.to_str().unwrap(),
        "--image",
        img.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(2), "{output:?}");

    // missing input path
    let output = run(&[
        "train",
        "--backend",
        "toy",
        "--image",
        "/nonexistent/nope.png",
    ]);
    assert_eq!(output.status.code(), Some(2), "{output:?}");

    // unknown name token under the toy vocabulary
    let names = tmp.path().join("names.txt");
    std::fs::write(&names, "Zzyzx Qwertyuiop\n").unwrap();
    let out_dir = tmp.path().join("o");
    let output = run(&[
        "train",
        "--backend",
        "toy",
        "--steps",
        "2",
        "--names",
        names.to_str().unwrap(),
        "--image",
        img.to_str().unwrap(),
        "--output-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(2), "{output:?}");
}
