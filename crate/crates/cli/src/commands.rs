//! One function per subcommand, plus the ablation sweep driver.
//!
//! Commands only ever write beneath their `--out` directory. Each run first
//! resolves its configuration (flag > config file > default), serializes the
//! result to `<out>/config.json`, and then produces artifacts; training
//! progress is logged as line-oriented `key=value` pairs.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use mcga_core::codebook::MixtureOfCodebooks;
use mcga_core::data::{gamma_perturb, synth_dataset, HsiCube, Sample, SpectralResponse};
use mcga_core::ganet::{self, GanetModel, Stage2Config};
use mcga_core::io::{
    read_cube, read_mixture, read_stage1, read_stage2, write_cube, write_mixture, write_stage1,
    write_stage2, Stage1Checkpoint,
};
use mcga_core::metrics::{mrae, psnr, rmse};
use mcga_core::msvqvae::{train_stage1, Stage1Config, StepStats};
use mcga_core::tta::{adapt, TtaConfig};

use crate::config::{load_file_config, set, DataConfig, FileConfig, RunConfig};
use crate::files::{ensure_dir, eval_index, load_hsi_cubes, load_pairs};
use crate::{
    AblateArgs, Axis, CliError, EvalArgs, GenDataArgs, InferArgs, MixArgs, PerturbArgs,
    TrainStage1Args, TrainStage2Args, TtaInferArgs,
};

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

fn write_history(path: &Path, stats: &[StepStats]) -> Result<(), CliError> {
    let mut text = String::from("step,total,rec,l1,l2,lr\n");
    for s in stats {
        text.push_str(&format!(
            "{},{:.9},{:.9},{:.9},{:.9},{:.9}\n",
            s.step, s.total, s.rec, s.l1, s.l2, s.lr
        ));
    }
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write history: {e}")))
}

fn log_steps(stage: u8, stats: &[StepStats]) {
    for s in stats {
        println!(
            "event=step stage={stage} step={} total={:.6} rec={:.6} l1={:.6} l2={:.6} lr={:.6}",
            s.step, s.total, s.rec, s.l1, s.l2, s.lr
        );
    }
}

// ---------------------------------------------------------------------------
// gen-data

fn resolve_data(file: &FileConfig, args: &GenDataArgs) -> Result<DataConfig, CliError> {
    let mut cfg = file.data.clone().unwrap_or_default();
    set(&mut cfg.train, args.train);
    set(&mut cfg.val, args.val);
    set(&mut cfg.channels, args.channels);
    set(&mut cfg.height, args.height);
    set(&mut cfg.width, args.width);
    set(&mut cfg.seed, args.seed);
    cfg.validate()?;
    Ok(cfg)
}

fn generate_benchmark(cfg: &DataConfig) -> Result<(Vec<Sample>, Vec<Sample>), CliError> {
    let resp = SpectralResponse::gaussian(cfg.channels)?;
    let mut samples = synth_dataset(
        cfg.train + cfg.val,
        cfg.channels,
        cfg.height,
        cfg.width,
        cfg.seed,
        &resp,
    )?;
    let val = samples.split_off(cfg.train);
    Ok((samples, val))
}

pub fn gen_data(args: &GenDataArgs, config_path: Option<&Path>) -> Result<(), CliError> {
    let file = load_file_config(config_path)?;
    let cfg = resolve_data(&file, args)?;
    ensure_dir(&args.out)?;
    let mut run = RunConfig::new("gen-data", json!({ "out": args.out.display().to_string() }));
    run.data = Some(cfg.clone());
    run.write(&args.out)?;

    let (train, val) = generate_benchmark(&cfg)?;
    for (split, samples) in [("train", &train), ("val", &val)] {
        let dir = args.out.join(split);
        ensure_dir(&dir)?;
        for s in samples {
            write_cube(dir.join(format!("{}.rgb.cube", s.id)), &s.rgb)?;
            write_cube(dir.join(format!("{}.hsi.cube", s.id)), &s.hsi)?;
            println!("event=sample split={split} id={}", s.id);
        }
    }
    println!(
        "event=done command=gen-data train={} val={} out={}",
        train.len(),
        val.len(),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train-stage1

fn resolve_stage1(file: &FileConfig, args: &TrainStage1Args) -> Result<Stage1Config, CliError> {
    let mut cfg = file.stage1.clone().unwrap_or_default();
    set(&mut cfg.scales, args.scales);
    set(&mut cfg.entries, args.entries);
    set(&mut cfg.beta, args.beta);
    set(&mut cfg.learning_rate, args.learning_rate);
    set(&mut cfg.epochs, args.epochs);
    set(&mut cfg.batch_size, args.batch_size);
    set(&mut cfg.seed, args.seed);
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

pub fn train_stage1_cmd(args: &TrainStage1Args, config_path: Option<&Path>) -> Result<(), CliError> {
    let file = load_file_config(config_path)?;
    let cfg = resolve_stage1(&file, args)?;
    let tag = args.tag.clone().unwrap_or_else(|| {
        args.data
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    });
    ensure_dir(&args.out)?;
    let mut run = RunConfig::new(
        "train-stage1",
        json!({
            "data": args.data.display().to_string(),
            "out": args.out.display().to_string(),
            "tag": tag,
        }),
    );
    run.stage1 = Some(cfg.clone());
    run.write(&args.out)?;

    let cubes: Vec<HsiCube> = load_hsi_cubes(&args.data)?
        .into_iter()
        .map(|(_, cube)| cube)
        .collect();
    println!("event=train stage=1 cubes={} tag={tag}", cubes.len());
    let (model, history) = train_stage1(&cubes, &cfg, &tag)?;
    log_steps(1, &history);
    write_history(&args.out.join("history.csv"), &history)?;

    let ckpt = model.to_checkpoint()?;
    write_stage1(args.out.join("stage1.mcs1"), &ckpt)?;
    write_mixture(args.out.join("codebooks.mccb"), &ckpt.books)?;
    println!(
        "event=done command=train-stage1 steps={} out={}",
        history.len(),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// mix-codebooks

pub fn mix_codebooks_cmd(args: &MixArgs) -> Result<(), CliError> {
    let mixtures: Vec<MixtureOfCodebooks> = args
        .books
        .iter()
        .map(|p| read_mixture(p).map_err(CliError::from))
        .collect::<Result<_, _>>()?;
    let refs: Vec<&MixtureOfCodebooks> = mixtures.iter().collect();
    let mixed = MixtureOfCodebooks::concat(&refs)?;
    ensure_dir(&args.out)?;
    let run = RunConfig::new(
        "mix-codebooks",
        json!({
            "books": args.books.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            "out": args.out.display().to_string(),
        }),
    );
    run.write(&args.out)?;
    write_mixture(args.out.join("mixture.mccb"), &mixed)?;
    for s in &mixed.scales {
        println!(
            "event=mixed scale={} entries={} sources={}",
            s.scale_index,
            s.n_entries(),
            s.sources.len()
        );
    }
    println!("event=done command=mix-codebooks out={}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train-stage2

fn resolve_stage2(
    file: &FileConfig,
    topk: Option<usize>,
    ga_ratio: Option<f64>,
    learning_rate: Option<f64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    seed: Option<u64>,
) -> Result<Stage2Config, CliError> {
    let mut cfg = file.stage2.clone().unwrap_or_default();
    set(&mut cfg.topk, topk);
    set(&mut cfg.ga_ratio, ga_ratio);
    set(&mut cfg.learning_rate, learning_rate);
    set(&mut cfg.epochs, epochs);
    set(&mut cfg.batch_size, batch_size);
    set(&mut cfg.seed, seed);
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

pub fn train_stage2_cmd(args: &TrainStage2Args, config_path: Option<&Path>) -> Result<(), CliError> {
    let file = load_file_config(config_path)?;
    let cfg = resolve_stage2(
        &file,
        args.topk,
        args.ga_ratio,
        args.learning_rate,
        args.epochs,
        args.batch_size,
        args.seed,
    )?;
    let mut stage1 = read_stage1(&args.stage1)?;
    if let Some(books_path) = &args.books {
        stage1.books = read_mixture(books_path)?;
        println!(
            "event=books source={} scales={}",
            books_path.display(),
            stage1.books.scales.len()
        );
    }
    ensure_dir(&args.out)?;
    let mut run = RunConfig::new(
        "train-stage2",
        json!({
            "data": args.data.display().to_string(),
            "stage1": args.stage1.display().to_string(),
            "books": args.books.as_ref().map(|p| p.display().to_string()),
            "out": args.out.display().to_string(),
        }),
    );
    run.stage2 = Some(cfg.clone());
    run.write(&args.out)?;

    let pairs = load_pairs(&args.data)?;
    println!("event=train stage=2 pairs={}", pairs.len());
    let (model, history) = ganet::train_stage2(&pairs, &stage1, &cfg)?;
    log_steps(2, &history);
    write_history(&args.out.join("history.csv"), &history)?;
    write_stage2(args.out.join("stage2.mcs2"), &model.to_checkpoint())?;
    println!(
        "event=done command=train-stage2 steps={} out={}",
        history.len(),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// infer / tta-infer

/// Inference inputs: either one explicit cube file or every `*.rgb.cube` in a
/// directory. Ids drop the `.rgb` role tag.
fn gather_inputs(
    input: &Option<PathBuf>,
    data: &Option<PathBuf>,
) -> Result<Vec<(String, HsiCube)>, CliError> {
    match (input, data) {
        (Some(_), Some(_)) => Err(CliError::Usage(
            "--input and --data are mutually exclusive".into(),
        )),
        (None, None) => Err(CliError::Usage("one of --input or --data is required".into())),
        (Some(path), None) => {
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let stem = name.strip_suffix(".cube").unwrap_or(&name);
            let id = stem.strip_suffix(".rgb").unwrap_or(stem).to_string();
            Ok(vec![(id, read_cube(path)?)])
        }
        (None, Some(dir)) => {
            let mut inputs = Vec::new();
            for (stem, path) in crate::files::cube_files(dir)? {
                if let Some(id) = stem.strip_suffix(".rgb") {
                    inputs.push((id.to_string(), read_cube(&path)?));
                }
            }
            if inputs.is_empty() {
                return Err(CliError::Runtime(format!(
                    "no *.rgb.cube files found in {}",
                    dir.display()
                )));
            }
            Ok(inputs)
        }
    }
}

fn load_model(path: &Path, cfg: Stage2Config) -> Result<GanetModel, CliError> {
    let ckpt = read_stage2(path)?;
    Ok(GanetModel::from_checkpoint(&ckpt, cfg)?)
}

pub fn infer_cmd(args: &InferArgs, config_path: Option<&Path>) -> Result<(), CliError> {
    let file = load_file_config(config_path)?;
    let cfg = resolve_stage2(&file, args.topk, None, None, None, None, None)?;
    let model = load_model(&args.model, cfg.clone())?;
    let inputs = gather_inputs(&args.input, &args.data)?;
    ensure_dir(&args.out)?;
    let mut run = RunConfig::new(
        "infer",
        json!({
            "model": args.model.display().to_string(),
            "input": args.input.as_ref().map(|p| p.display().to_string()),
            "data": args.data.as_ref().map(|p| p.display().to_string()),
            "out": args.out.display().to_string(),
        }),
    );
    run.stage2 = Some(cfg);
    run.write(&args.out)?;

    for (id, rgb) in &inputs {
        let pred = ganet::infer(&model, rgb)?;
        let path = args.out.join(format!("{id}.pred.cube"));
        write_cube(&path, &pred)?;
        println!("event=infer id={id} out={}", path.display());
    }
    println!(
        "event=done command=infer inputs={} out={}",
        inputs.len(),
        args.out.display()
    );
    Ok(())
}

fn resolve_tta(file: &FileConfig, args: &TtaInferArgs) -> Result<TtaConfig, CliError> {
    let mut cfg = file.tta.clone().unwrap_or_default();
    set(&mut cfg.steps, args.tta_steps);
    set(&mut cfg.learning_rate, args.tta_lr);
    set(&mut cfg.temperature, args.tta_temp);
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

pub fn tta_infer_cmd(args: &TtaInferArgs, config_path: Option<&Path>) -> Result<(), CliError> {
    let file = load_file_config(config_path)?;
    let cfg = resolve_stage2(&file, args.topk, None, None, None, None, None)?;
    let tta = resolve_tta(&file, args)?;
    let mut model = load_model(&args.model, cfg.clone())?;
    let inputs = gather_inputs(&args.input, &args.data)?;
    ensure_dir(&args.out)?;
    let mut run = RunConfig::new(
        "tta-infer",
        json!({
            "model": args.model.display().to_string(),
            "input": args.input.as_ref().map(|p| p.display().to_string()),
            "data": args.data.as_ref().map(|p| p.display().to_string()),
            "out": args.out.display().to_string(),
            "persist": args.persist,
        }),
    );
    run.stage2 = Some(cfg);
    run.tta = Some(tta.clone());
    run.write(&args.out)?;

    let batch: Vec<&HsiCube> = inputs.iter().map(|(_, c)| c).collect();
    let trajectory = adapt(&mut model, &batch, &tta)?;
    let mut csv = String::from("step,entropy\n");
    for (step, value) in trajectory.iter().enumerate() {
        println!("event=tta step={step} entropy={value:.6}");
        csv.push_str(&format!("{step},{value:.9}\n"));
    }
    fs::write(args.out.join("trajectory.csv"), csv)
        .map_err(|e| CliError::Runtime(format!("cannot write trajectory: {e}")))?;

    for (id, rgb) in &inputs {
        let pred = ganet::infer(&model, rgb)?;
        let path = args.out.join(format!("{id}.pred.cube"));
        write_cube(&path, &pred)?;
        println!("event=infer id={id} out={}", path.display());
    }
    if args.persist {
        write_stage2(args.out.join("adapted.mcs2"), &model.to_checkpoint())?;
        println!("event=persisted out={}", args.out.join("adapted.mcs2").display());
    }
    println!(
        "event=done command=tta-infer inputs={} steps={} out={}",
        inputs.len(),
        tta.steps,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

struct MetricRow {
    id: String,
    rmse: f64,
    mrae: f64,
    psnr: f64,
}

fn metric_rows(pairs: &[(String, HsiCube, HsiCube)]) -> Result<Vec<MetricRow>, CliError> {
    pairs
        .iter()
        .map(|(id, pred, truth)| {
            Ok(MetricRow {
                id: id.clone(),
                rmse: rmse(pred, truth)?,
                mrae: mrae(pred, truth)?,
                psnr: psnr(pred, truth)?,
            })
        })
        .collect()
}

fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut text = String::from("id,rmse,mrae,psnr\n");
    for r in rows {
        text.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            r.id, r.rmse, r.mrae, r.psnr
        ));
    }
    text
}

pub fn eval_cmd(args: &EvalArgs) -> Result<(), CliError> {
    let pred_index = eval_index(&args.pred)?;
    let truth_index = eval_index(&args.truth)?;
    let mut pairs = Vec::with_capacity(pred_index.len());
    for (id, pred_path) in &pred_index {
        let Some(truth_path) = truth_index.get(id) else {
            return Err(CliError::Runtime(format!(
                "prediction '{id}' has no ground truth in {}",
                args.truth.display()
            )));
        };
        pairs.push((id.clone(), read_cube(pred_path)?, read_cube(truth_path)?));
    }
    let rows = metric_rows(&pairs)?;
    let csv = metrics_csv(&rows);
    print!("{csv}");
    if let Some(out) = &args.out {
        ensure_dir(out)?;
        let run = RunConfig::new(
            "eval",
            json!({
                "pred": args.pred.display().to_string(),
                "truth": args.truth.display().to_string(),
                "out": out.display().to_string(),
            }),
        );
        run.write(out)?;
        fs::write(out.join("metrics.csv"), &csv)
            .map_err(|e| CliError::Runtime(format!("cannot write metrics: {e}")))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// perturb

/// `x.rgb.cube` with gamma 0.9 becomes `x.gamma-0.9.rgb.cube`, so perturbed
/// inputs keep their role suffix and stay discoverable by `--data` scans.
fn perturbed_name(stem: &str, gamma: f64) -> String {
    for role in [".rgb", ".hsi", ".pred"] {
        if let Some(id) = stem.strip_suffix(role) {
            return format!("{id}.gamma-{gamma}{role}.cube");
        }
    }
    format!("{stem}.gamma-{gamma}.cube")
}

pub fn perturb_cmd(args: &PerturbArgs) -> Result<(), CliError> {
    if args.gamma <= 0.0 || !args.gamma.is_finite() {
        return Err(CliError::Usage(format!(
            "--gamma must be positive and finite, got {}",
            args.gamma
        )));
    }
    let mut inputs: Vec<(String, HsiCube)> = Vec::new();
    match (&args.input, &args.data) {
        (Some(_), Some(_)) => {
            return Err(CliError::Usage(
                "--input and --data are mutually exclusive".into(),
            ))
        }
        (None, None) => {
            return Err(CliError::Usage("one of --input or --data is required".into()))
        }
        (Some(path), None) => {
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let stem = name.strip_suffix(".cube").unwrap_or(&name).to_string();
            inputs.push((stem, read_cube(path)?));
        }
        (None, Some(dir)) => {
            for (stem, path) in crate::files::cube_files(dir)? {
                inputs.push((stem, read_cube(&path)?));
            }
            if inputs.is_empty() {
                return Err(CliError::Runtime(format!(
                    "no .cube files found in {}",
                    dir.display()
                )));
            }
        }
    }
    ensure_dir(&args.out)?;
    let run = RunConfig::new(
        "perturb",
        json!({
            "input": args.input.as_ref().map(|p| p.display().to_string()),
            "data": args.data.as_ref().map(|p| p.display().to_string()),
            "gamma": args.gamma,
            "out": args.out.display().to_string(),
        }),
    );
    run.write(&args.out)?;
    for (stem, cube) in &inputs {
        let perturbed = gamma_perturb(cube, args.gamma as f32)?;
        let name = perturbed_name(stem, args.gamma);
        write_cube(args.out.join(&name), &perturbed)?;
        println!("event=perturb gamma={} out={name}", args.gamma);
    }
    println!(
        "event=done command=perturb inputs={} out={}",
        inputs.len(),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate

#[derive(Debug, Clone, Copy, PartialEq)]
enum CodebookMode {
    Single,
    Mixture,
}

#[derive(Debug, Clone)]
enum AxisValue {
    Scales(usize),
    Topk(usize),
    GaRatio(f64),
    Mode(CodebookMode),
}

fn parse_axis_value(axis: Axis, raw: &str) -> Result<AxisValue, CliError> {
    let raw = raw.trim();
    match axis {
        Axis::Scales => raw
            .parse::<usize>()
            .ok()
            .filter(|&v| v >= 1)
            .map(AxisValue::Scales)
            .ok_or_else(|| CliError::Usage(format!("invalid scales value '{raw}'"))),
        Axis::Topk => raw
            .parse::<usize>()
            .ok()
            .filter(|&v| v >= 1)
            .map(AxisValue::Topk)
            .ok_or_else(|| CliError::Usage(format!("invalid topk value '{raw}'"))),
        Axis::GaRatio => raw
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite() && *v > 0.0 && *v < 1.0)
            .map(AxisValue::GaRatio)
            .ok_or_else(|| {
                CliError::Usage(format!("invalid ga-ratio value '{raw}' (need 0 < r < 1)"))
            }),
        Axis::CodebookMode => match raw {
            "single" => Ok(AxisValue::Mode(CodebookMode::Single)),
            "mixture" => Ok(AxisValue::Mode(CodebookMode::Mixture)),
            _ => Err(CliError::Usage(format!(
                "invalid codebook-mode value '{raw}' (expected 'single' or 'mixture')"
            ))),
        },
    }
}

struct AblatePoint {
    label: String,
    value: String,
    stage1: Stage1Config,
    stage2: Stage2Config,
    mode: CodebookMode,
}

struct AblateRow {
    label: String,
    value: String,
    mrae: f64,
    rmse: f64,
    psnr: f64,
}

/// Train a stage-1 checkpoint for one sweep point. Mixture mode splits the
/// training cubes in half, learns an independent codebook stack per half, and
/// concatenates the stacks into one mixture (the decoder weights come from
/// the first half's model; stage 2 retrains them anyway).
fn ablate_stage1(
    point: &AblatePoint,
    train_hsi: &[HsiCube],
) -> Result<Stage1Checkpoint, CliError> {
    match point.mode {
        CodebookMode::Single => {
            let (model, _) = train_stage1(train_hsi, &point.stage1, "bench")?;
            Ok(model.to_checkpoint()?)
        }
        CodebookMode::Mixture => {
            let half = train_hsi.len() / 2;
            if half == 0 || half == train_hsi.len() {
                return Err(CliError::Runtime(
                    "mixture mode needs at least two training cubes to split".into(),
                ));
            }
            let (model_a, _) = train_stage1(&train_hsi[..half], &point.stage1, "bench-a")?;
            let second = Stage1Config {
                seed: point.stage1.seed + 1,
                ..point.stage1.clone()
            };
            let (model_b, _) = train_stage1(&train_hsi[half..], &second, "bench-b")?;
            let mut ckpt = model_a.to_checkpoint()?;
            let books_b = model_b.books()?;
            ckpt.books = MixtureOfCodebooks::concat(&[&ckpt.books, &books_b])?;
            Ok(ckpt)
        }
    }
}

fn run_ablate_point(
    point: &AblatePoint,
    data: &DataConfig,
    out: &Path,
) -> Result<AblateRow, CliError> {
    let dir = out.join("runs").join(&point.label);
    ensure_dir(&dir)?;
    let mut run = RunConfig::new("ablate-point", json!({ "label": point.label }));
    run.data = Some(data.clone());
    run.stage1 = Some(point.stage1.clone());
    run.stage2 = Some(point.stage2.clone());
    run.write(&dir)?;

    let (train, val) = generate_benchmark(data)?;
    let train_hsi: Vec<HsiCube> = train.iter().map(|s| s.hsi.clone()).collect();
    let stage1 = ablate_stage1(point, &train_hsi)?;
    write_stage1(dir.join("stage1.mcs1"), &stage1)?;

    let (model, history) = ganet::train_stage2(&train, &stage1, &point.stage2)?;
    write_history(&dir.join("history.csv"), &history)?;
    write_stage2(dir.join("stage2.mcs2"), &model.to_checkpoint())?;

    let mut pairs = Vec::with_capacity(val.len());
    for s in &val {
        pairs.push((s.id.clone(), ganet::infer(&model, &s.rgb)?, s.hsi.clone()));
    }
    let rows = metric_rows(&pairs)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(&rows))
        .map_err(|e| CliError::Runtime(format!("cannot write metrics: {e}")))?;
    let n = rows.len().max(1) as f64;
    Ok(AblateRow {
        label: point.label.clone(),
        value: point.value.clone(),
        mrae: rows.iter().map(|r| r.mrae).sum::<f64>() / n,
        rmse: rows.iter().map(|r| r.rmse).sum::<f64>() / n,
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
    })
}

pub fn ablate_cmd(args: &AblateArgs, config_path: Option<&Path>) -> Result<(), CliError> {
    let file = load_file_config(config_path)?;
    let jobs = args.jobs.unwrap_or(1);
    if jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let mut data = file.data.clone().unwrap_or_default();
    set(&mut data.seed, args.seed);
    data.validate()?;
    if data.val == 0 {
        return Err(CliError::Usage(
            "ablation needs at least one validation pair (data.val >= 1)".into(),
        ));
    }
    // Desk-scale sweep defaults: long enough to separate the axis values,
    // short enough to keep a full sweep in CPU minutes. A config file section
    // or flag takes precedence as usual.
    let mut stage1 = file
        .stage1
        .clone()
        .unwrap_or_else(|| Stage1Config { epochs: 75, ..Stage1Config::default() });
    set(&mut stage1.epochs, args.stage1_epochs);
    set(&mut stage1.seed, args.seed);
    stage1.validate().map_err(usage)?;
    let mut stage2 = file
        .stage2
        .clone()
        .unwrap_or_else(|| Stage2Config { epochs: 100, ..Stage2Config::default() });
    set(&mut stage2.epochs, args.stage2_epochs);
    set(&mut stage2.seed, args.seed);
    stage2.validate().map_err(usage)?;

    let raw_values: Vec<&str> = args.values.split(',').filter(|v| !v.trim().is_empty()).collect();
    if raw_values.is_empty() {
        return Err(CliError::Usage("--values must list at least one value".into()));
    }
    let axis_name = match args.axis {
        Axis::Scales => "scales",
        Axis::Topk => "topk",
        Axis::GaRatio => "ga_ratio",
        Axis::CodebookMode => "codebook_mode",
    };
    let mut points = Vec::with_capacity(raw_values.len());
    for raw in &raw_values {
        let value = parse_axis_value(args.axis, raw)?;
        let mut s1 = stage1.clone();
        let mut s2 = stage2.clone();
        let mut mode = CodebookMode::Single;
        match value {
            AxisValue::Scales(v) => s1.scales = v,
            AxisValue::Topk(v) => s2.topk = v,
            AxisValue::GaRatio(v) => s2.ga_ratio = v,
            AxisValue::Mode(m) => mode = m,
        }
        s1.validate().map_err(usage)?;
        s2.validate().map_err(usage)?;
        points.push(AblatePoint {
            label: format!("{axis_name}-{}", raw.trim()),
            value: raw.trim().to_string(),
            stage1: s1,
            stage2: s2,
            mode,
        });
    }

    ensure_dir(&args.out)?;
    let mut run = RunConfig::new(
        "ablate",
        json!({
            "axis": axis_name,
            "values": raw_values.iter().map(|v| v.trim()).collect::<Vec<_>>(),
            "jobs": jobs,
            "out": args.out.display().to_string(),
        }),
    );
    run.data = Some(data.clone());
    run.stage1 = Some(stage1);
    run.stage2 = Some(stage2);
    run.write(&args.out)?;

    let mut rows: Vec<AblateRow> = Vec::with_capacity(points.len());
    if jobs == 1 {
        for point in &points {
            rows.push(run_ablate_point(point, &data, &args.out)?);
        }
    } else {
        for group in points.chunks(jobs) {
            let results: Vec<Result<AblateRow, CliError>> = std::thread::scope(|scope| {
                let handles: Vec<_> = group
                    .iter()
                    .map(|point| scope.spawn(|| run_ablate_point(point, &data, &args.out)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| {
                        h.join()
                            .unwrap_or_else(|_| Err(CliError::Runtime("sweep worker panicked".into())))
                    })
                    .collect()
            });
            for r in results {
                rows.push(r?);
            }
        }
    }

    let mut csv = String::from("axis,value,mrae,rmse,psnr\n");
    for r in &rows {
        println!(
            "event=ablate-point label={} mrae={:.6} rmse={:.6} psnr={:.6}",
            r.label, r.mrae, r.rmse, r.psnr
        );
        csv.push_str(&format!(
            "{axis_name},{},{:.6},{:.6},{:.6}\n",
            r.value, r.mrae, r.rmse, r.psnr
        ));
    }
    fs::write(args.out.join("ablate.csv"), csv)
        .map_err(|e| CliError::Runtime(format!("cannot write sweep report: {e}")))?;
    println!(
        "event=done command=ablate points={} out={}",
        rows.len(),
        args.out.display()
    );
    Ok(())
}
