//! Black-box tests of the `mcga` binary: exit codes, artifact layout,
//! configuration precedence, determinism, and a small end-to-end pipeline.

use std::path::Path;
use std::process::{Command, Output};

use mcga_core::io::{read_cube, read_mixture, read_stage2};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_mcga")
}

/// Run the binary from `cwd` (an empty scratch directory in every test, so a
/// zero-entry check at the end proves commands never write outside `--out`).
fn run_in(cwd: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("the mcga binary should spawn")
}

fn run_ok(cwd: &Path, args: &[&str]) -> String {
    let out = run_in(cwd, args);
    assert!(
        out.status.success(),
        "mcga {:?} failed with {}: {}",
        args,
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("stdout should be UTF-8")
}

fn exit_code(cwd: &Path, args: &[&str]) -> i32 {
    run_in(cwd, args).status.code().expect("process should exit normally")
}

fn assert_scratch_clean(cwd: &Path) {
    let leftovers: Vec<_> = std::fs::read_dir(cwd)
        .expect("scratch dir should be listable")
        .map(|e| e.expect("dir entry").file_name())
        .collect();
    assert!(
        leftovers.is_empty(),
        "commands wrote outside --out: {leftovers:?}"
    );
}

fn gen_small(cwd: &Path, out: &Path, train: usize, val: usize) {
    run_ok(
        cwd,
        &[
            "gen-data",
            "--out",
            out.to_str().unwrap(),
            "--train",
            &train.to_string(),
            "--val",
            &val.to_string(),
            "--channels",
            "8",
            "--height",
            "16",
            "--width",
            "16",
            "--seed",
            "3",
        ],
    );
}

#[test]
fn usage_errors_exit_with_code_2() {
    let scratch = tempfile::tempdir().expect("tempdir");
    let cwd = scratch.path();

    assert_eq!(exit_code(cwd, &["frobnicate"]), 2, "unknown subcommand");
    assert_eq!(
        exit_code(cwd, &["gen-data", "--out", "x", "--bogus"]),
        2,
        "unknown flag"
    );
    assert_eq!(
        exit_code(cwd, &["ablate", "--axis", "nonsense", "--values", "1", "--out", "x"]),
        2,
        "unknown ablation axis"
    );
    assert_eq!(
        exit_code(cwd, &["ablate", "--axis", "scales", "--values", "abc", "--out", "x"]),
        2,
        "unparseable axis value"
    );
    assert_eq!(
        exit_code(cwd, &["perturb", "--input", "x.cube", "--gamma", "-1", "--out", "y"]),
        2,
        "non-positive gamma"
    );
    let threads0 = Command::new(bin())
        .args(["gen-data", "--out", "x"])
        .env("MCGA_THREADS", "0")
        .current_dir(cwd)
        .output()
        .expect("spawn");
    assert_eq!(threads0.status.code(), Some(2), "MCGA_THREADS=0 must be rejected");

    assert_eq!(exit_code(cwd, &["--help"]), 0, "--help is not an error");

    assert_scratch_clean(cwd);
}

#[test]
fn eval_reports_exact_zero_for_identical_directories() {
    let scratch = tempfile::tempdir().expect("tempdir");
    let cwd = scratch.path();
    let bench = cwd.join("../bench-eval");
    std::fs::create_dir_all(&bench).expect("bench dir");
    gen_small(cwd, &bench, 1, 1);

    let out = bench.join("report");
    let train = bench.join("train");
    let stdout = run_ok(
        cwd,
        &[
            "eval",
            "--pred",
            train.to_str().unwrap(),
            "--truth",
            train.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
    );

    let csv = std::fs::read_to_string(out.join("metrics.csv")).expect("metrics.csv");
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "id,rmse,mrae,psnr", "metrics header");
    // The directory holds synth-3.hsi.cube and synth-3.rgb.cube; both pair
    // with themselves, so every row is exactly zero error at infinite PSNR.
    assert_eq!(lines.len(), 3, "one row per evaluation id: {csv}");
    for row in &lines[1..] {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 4, "row arity: {row}");
        assert_eq!(&fields[1..], &["0.000000", "0.000000", "inf"], "row {row}");
    }
    for row in &lines[1..] {
        assert!(
            stdout.contains(row),
            "stdout should carry the CSV row {row:?}"
        );
    }

    assert_scratch_clean(cwd);
    std::fs::remove_dir_all(&bench).ok();
}

#[test]
fn resolved_config_precedence_is_flag_file_default() {
    let scratch = tempfile::tempdir().expect("tempdir");
    let cwd = scratch.path();
    let work = cwd.join("../precedence");
    std::fs::create_dir_all(&work).expect("work dir");
    let bench = work.join("bench");
    gen_small(cwd, &bench, 2, 1);

    let cfg_path = work.join("cfg.json");
    std::fs::write(
        &cfg_path,
        r#"{"stage1":{"scales":1,"entries":32,"epochs":3,"batch_size":2}}"#,
    )
    .expect("config file");

    let out = work.join("s1");
    run_ok(
        cwd,
        &[
            "train-stage1",
            "--config",
            cfg_path.to_str().unwrap(),
            "--data",
            bench.join("train").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--epochs",
            "2",
            "--seed",
            "5",
        ],
    );

    let emitted: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).expect("config"))
            .expect("emitted config parses");
    let s1 = &emitted["stage1"];
    assert_eq!(s1["epochs"], 2, "flag overrides the config file");
    assert_eq!(s1["seed"], 5, "flag overrides the default");
    assert_eq!(s1["entries"], 32, "config file overrides the default");
    assert_eq!(s1["scales"], 1, "config file value is kept");
    assert_eq!(s1["beta"], 0.25, "untouched fields keep their defaults");

    // 2 cubes at batch size 2 is one step per epoch; the resolved 2 epochs
    // must be what actually ran.
    let history = std::fs::read_to_string(out.join("history.csv")).expect("history");
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines[0], "step,total,rec,l1,l2,lr", "history header");
    assert_eq!(lines.len(), 3, "2 resolved epochs -> 2 steps: {history}");

    assert_scratch_clean(cwd);
    std::fs::remove_dir_all(&work).ok();
}

#[test]
fn train_stage1_runs_are_bit_reproducible() {
    let scratch = tempfile::tempdir().expect("tempdir");
    let cwd = scratch.path();
    let work = cwd.join("../determinism");
    std::fs::create_dir_all(&work).expect("work dir");
    let bench = work.join("bench");
    gen_small(cwd, &bench, 2, 1);

    let train = |out: &Path| {
        run_ok(
            cwd,
            &[
                "train-stage1",
                "--data",
                bench.join("train").to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
                "--scales",
                "1",
                "--entries",
                "64",
                "--epochs",
                "2",
                "--batch-size",
                "2",
                "--seed",
                "5",
            ],
        );
    };
    let (a, b) = (work.join("a"), work.join("b"));
    train(&a);
    train(&b);

    for artifact in ["stage1.mcs1", "codebooks.mccb", "history.csv"] {
        let left = std::fs::read(a.join(artifact)).expect(artifact);
        let right = std::fs::read(b.join(artifact)).expect(artifact);
        assert_eq!(left, right, "{artifact} differs between identical runs");
    }

    assert_scratch_clean(cwd);
    std::fs::remove_dir_all(&work).ok();
}

#[test]
fn pipeline_smoke_end_to_end() {
    let scratch = tempfile::tempdir().expect("tempdir");
    let cwd = scratch.path();
    let work = cwd.join("../pipeline");
    std::fs::create_dir_all(&work).expect("work dir");
    let bench = work.join("bench");
    gen_small(cwd, &bench, 2, 1);
    for (split, samples) in [("train", 2usize), ("val", 1usize)] {
        let n = std::fs::read_dir(bench.join(split)).expect("split dir").count();
        assert_eq!(n, 2 * samples, "{split} holds an rgb and an hsi cube per sample");
    }

    // Stage 1.
    let s1 = work.join("s1");
    run_ok(
        cwd,
        &[
            "train-stage1",
            "--data",
            bench.join("train").to_str().unwrap(),
            "--out",
            s1.to_str().unwrap(),
            "--scales",
            "1",
            "--entries",
            "64",
            "--epochs",
            "4",
            "--batch-size",
            "2",
            "--seed",
            "5",
        ],
    );

    // Codebook mixing doubles every scale's entry count.
    let mixed = work.join("mixed");
    run_ok(
        cwd,
        &[
            "mix-codebooks",
            "--books",
            s1.join("codebooks.mccb").to_str().unwrap(),
            s1.join("codebooks.mccb").to_str().unwrap(),
            "--out",
            mixed.to_str().unwrap(),
        ],
    );
    let mixture = read_mixture(mixed.join("mixture.mccb")).expect("mixture parses");
    assert_eq!(mixture.scales.len(), 1, "one scale was trained");
    assert_eq!(mixture.scales[0].n_entries(), 128, "2 x 64 entries after mixing");
    assert_eq!(mixture.scales[0].sources.len(), 2, "both sources recorded");

    // Stage 2.
    let s2 = work.join("s2");
    run_ok(
        cwd,
        &[
            "train-stage2",
            "--data",
            bench.join("train").to_str().unwrap(),
            "--stage1",
            s1.join("stage1.mcs1").to_str().unwrap(),
            "--out",
            s2.to_str().unwrap(),
            "--topk",
            "16",
            "--epochs",
            "3",
            "--batch-size",
            "2",
            "--seed",
            "5",
        ],
    );
    assert!(s2.join("stage2.mcs2").is_file(), "stage-2 checkpoint");
    let history = std::fs::read_to_string(s2.join("history.csv")).expect("history");
    assert_eq!(history.lines().count(), 4, "3 epochs x 1 step + header");

    // Inference over the validation split.
    let pred = work.join("pred");
    run_ok(
        cwd,
        &[
            "infer",
            "--model",
            s2.join("stage2.mcs2").to_str().unwrap(),
            "--data",
            bench.join("val").to_str().unwrap(),
            "--out",
            pred.to_str().unwrap(),
        ],
    );
    let cube = read_cube(pred.join("synth-5.pred.cube")).expect("prediction cube");
    assert_eq!((cube.c, cube.h, cube.w), (8, 16, 16), "prediction shape");
    assert!(cube.data.iter().all(|v| v.is_finite()), "prediction is finite");

    // Metric comparison against the ground truth.
    let report = work.join("report");
    run_ok(
        cwd,
        &[
            "eval",
            "--pred",
            pred.to_str().unwrap(),
            "--truth",
            bench.join("val").to_str().unwrap(),
            "--out",
            report.to_str().unwrap(),
        ],
    );
    let csv = std::fs::read_to_string(report.join("metrics.csv")).expect("metrics");
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "id,rmse,mrae,psnr");
    assert_eq!(lines.len(), 2, "exactly the one validation scene: {csv}");
    assert!(lines[1].starts_with("synth-5,"), "row id: {}", lines[1]);

    // Adaptation: trajectory length is steps + 1 and --persist round-trips.
    let tta = work.join("tta");
    run_ok(
        cwd,
        &[
            "tta-infer",
            "--model",
            s2.join("stage2.mcs2").to_str().unwrap(),
            "--input",
            bench.join("val").join("synth-5.rgb.cube").to_str().unwrap(),
            "--out",
            tta.to_str().unwrap(),
            "--tta-steps",
            "2",
            "--tta-lr",
            "0.001",
            "--persist",
        ],
    );
    let traj = std::fs::read_to_string(tta.join("trajectory.csv")).expect("trajectory");
    let tlines: Vec<&str> = traj.lines().collect();
    assert_eq!(tlines[0], "step,entropy", "trajectory header");
    assert_eq!(tlines.len(), 4, "2 steps -> 3 trajectory points: {traj}");
    assert!(tta.join("synth-5.pred.cube").is_file(), "adapted prediction");
    read_stage2(tta.join("adapted.mcs2")).expect("persisted adapted checkpoint parses");

    // Gamma perturbation: exact elementwise power, role suffix preserved.
    let pert = work.join("pert");
    run_ok(
        cwd,
        &[
            "perturb",
            "--input",
            bench.join("val").join("synth-5.rgb.cube").to_str().unwrap(),
            "--gamma",
            "0.9",
            "--out",
            pert.to_str().unwrap(),
        ],
    );
    let original = read_cube(bench.join("val").join("synth-5.rgb.cube")).expect("original");
    let shifted = read_cube(pert.join("synth-5.gamma-0.9.rgb.cube")).expect("perturbed");
    assert_eq!(shifted.data.len(), original.data.len());
    for (i, (&o, &s)) in original.data.iter().zip(&shifted.data).enumerate() {
        assert_eq!(s, o.powf(0.9), "perturbed value {i} is not the exact power");
    }

    assert_scratch_clean(cwd);
    std::fs::remove_dir_all(&work).ok();
}
