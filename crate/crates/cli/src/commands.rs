use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use implicit_depth::eval::{
    evaluate_depth, evaluate_occlusion, evaluate_temporal, parse_plane_range, TemporalEvalConfig,
};
use implicit_depth::geometry::{
    render_plane_depth, CameraIntrinsics, DepthMap, PlaneSpec,
};
use implicit_depth::grid::{Grid, RgbImage};
use implicit_depth::inference::{
    binary_search_depth, blended_mask, composite, predict_mask, select_thresholds,
    BinarySearchConfig, BlendedRegression, DepthSpacing, FrameRef, MaskPredictor, StepOracle,
    ThresholdTable, WithoutPrevious,
};
use implicit_depth::io::{depth_visualization, write_depth, write_gray_png, write_rgb_png};
use implicit_depth::metrics::{depth_metrics, MetricReport, TemporalConfig};
use implicit_depth::nn::checkpoint::{self, Checkpoint};
use implicit_depth::nn::{ImplicitModel, RegressionModel};
use implicit_depth::scene::{
    generate_scene, generate_sequence, load_sequence, save_sequence, GenerationConfig, Sequence,
};
use implicit_depth::selftest;
use implicit_depth::training::{
    history_csv, train_implicit, train_implicit_from, train_regression, TrainConfig,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::{
    Cli, Command, CompositeArgs, EvalDepthArgs, EvalOcclusionArgs, EvalTemporalArgs,
    ExtractDepthArgs, SearchArgs, SelftestArgs, SynthArgs, TrainArgs,
};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(cli, a),
        Command::Train(a) => train(cli, a, false),
        Command::TrainBaseline(a) => train(cli, a, true),
        Command::EvalOcclusion(a) => eval_occlusion(cli, a),
        Command::EvalDepth(a) => eval_depth(cli, a),
        Command::EvalTemporal(a) => eval_temporal(cli, a),
        Command::Composite(a) => composite_frame(cli, a),
        Command::ExtractDepth(a) => extract_depth(cli, a),
        Command::Selftest(a) => run_selftest(cli, a),
    }
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Echoes the parsed command line plus everything resolved from files.
fn write_run_json(out: &Path, cli: &Cli, resolved: Value) -> Result<()> {
    write_json(
        &out.join("run.json"),
        &json!({
            "version": env!("CARGO_PKG_VERSION"),
            "command": cli.command,
            "resolved": resolved,
        }),
    )
}

/// Sequence directories under `paths`, in sorted order.
fn sequence_dirs(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for path in paths {
        if path.join("manifest.json").is_file() {
            dirs.push(path.clone());
            continue;
        }
        let mut found: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("reading {}", path.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("manifest.json").is_file())
            .collect();
        if found.is_empty() {
            bail!("no sequence found in {}", path.display());
        }
        found.sort();
        dirs.extend(found);
    }
    Ok(dirs)
}

fn load_sequences(paths: &[PathBuf]) -> Result<Vec<Sequence>> {
    sequence_dirs(paths)?
        .iter()
        .map(|d| load_sequence(d).map_err(Into::into))
        .collect()
}

fn mix(seed: u64, i: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ i.wrapping_mul(0xBF58_476D_1CE4_E5B9) ^ i
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    create_out(&a.out)?;
    let k = CameraIntrinsics::desk_scale(a.width, a.height);
    let gen = GenerationConfig::default();
    let mut scenes = Vec::new();
    for i in 0..a.scenes {
        let scene_seed = mix(a.seed, i as u64);
        let scene = generate_scene(scene_seed, &gen)?;
        let seq = generate_sequence(&scene, scene_seed, a.frames, &k)?;
        let dir = a.out.join(format!("scene_{i:03}"));
        save_sequence(&seq, &dir)?;
        write_json(&dir.join("scene.json"), &scene)?;
        scenes.push(json!({"dir": dir, "seed": scene_seed}));
        log::info!("wrote {} ({} frames)", dir.display(), seq.len());
    }
    write_run_json(&a.out, cli, json!({"intrinsics": k, "generation": gen, "scenes": scenes}))
}

fn train(cli: &Cli, a: &TrainArgs, baseline: bool) -> Result<()> {
    let mut config = match &a.config {
        Some(path) => TrainConfig::from_json_file(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    if let Some(steps) = a.steps {
        config.steps = steps;
    }
    if let Some(b) = a.batch_size {
        config.batch_size = b;
    }
    config.validate()?;
    let data = load_sequences(&a.data)?;
    create_out(&a.out)?;
    log::info!("training on {} sequences for {} steps", data.len(), config.steps);

    let (bytes, history, thresholds) = if baseline {
        let trained = train_regression(&data, &config)?;
        let meta = json!({"train_config": config});
        (checkpoint::encode_regression(&trained.model, &meta), trained.history, None)
    } else {
        let trained = match &a.warm_start {
            Some(path) => {
                let Checkpoint::Regression(reg, _) = checkpoint::load(path)? else {
                    bail!("{} is not a regression checkpoint", path.display());
                };
                let mut model = ImplicitModel::new(config.model.clone(), config.seed)?;
                model.warm_start_from(&reg)?;
                train_implicit_from(model, &data, &config)?
            }
            None => train_implicit(&data, &config)?,
        };
        let thresholds = if a.val.is_empty() {
            None
        } else {
            let val = load_sequences(&a.val)?;
            let planes = parse_plane_range(&a.planes)?;
            Some(select_thresholds(&trained.model, &val, &planes, 1)?)
        };
        let meta = json!({"train_config": config, "thresholds": thresholds});
        (checkpoint::encode_implicit(&trained.model, &meta), trained.history, thresholds)
    };
    checkpoint::save(&a.out.join("model.ckpt"), &bytes)?;
    fs::write(a.out.join("loss.csv"), history_csv(&history))?;
    if let Some(last) = history.last() {
        log::info!("final loss {:.4}", last.total);
    }
    write_run_json(
        &a.out,
        cli,
        json!({"train_config": config, "sequences": sequence_dirs(&a.data)?, "thresholds": thresholds}),
    )
}

fn stored_thresholds(meta: &Value) -> Option<ThresholdTable> {
    serde_json::from_value(meta.get("thresholds")?.clone()).ok()
}

fn thresholds_for<P: MaskPredictor>(
    predictor: &P,
    val: &[PathBuf],
    planes: &[f64],
    stored: Option<ThresholdTable>,
) -> Result<ThresholdTable> {
    if !val.is_empty() {
        return Ok(select_thresholds(predictor, &load_sequences(val)?, planes, 1)?);
    }
    Ok(stored.unwrap_or_default())
}

fn write_report(out: &Path, report: &MetricReport, details: Value) -> Result<()> {
    let table = MetricReport::table(std::slice::from_ref(report));
    print!("{table}");
    fs::write(out.join("report.txt"), &table)?;
    write_json(&out.join("report.json"), &json!({"report": report, "details": details}))
}

fn eval_occlusion(cli: &Cli, a: &EvalOcclusionArgs) -> Result<()> {
    let planes = parse_plane_range(&a.planes)?;
    let data = load_sequences(&a.data)?;
    create_out(&a.out)?;
    let (method, thresholds, evaluation) = match checkpoint::load(&a.model)? {
        Checkpoint::Implicit(model, meta) => {
            let t = thresholds_for(&model, &a.val, &planes, stored_thresholds(&meta))?;
            let e = evaluate_occlusion(&model, &data, &planes, &t, a.frame_step)?;
            ("implicit", t, e)
        }
        Checkpoint::Regression(model, _) => {
            let p = BlendedRegression { model: &model, band: a.band };
            let t = thresholds_for(&p, &a.val, &planes, None)?;
            let e = evaluate_occlusion(&p, &data, &planes, &t, a.frame_step)?;
            ("regression", t, e)
        }
    };
    let report = MetricReport {
        method: method.into(),
        iou_all: Some(evaluation.iou_all),
        iou_surface: evaluation.iou_surface,
        iou_boundary: evaluation.iou_boundary,
        ..MetricReport::default()
    };
    write_report(&a.out, &report, json!({"occlusion": evaluation}))?;
    write_run_json(&a.out, cli, json!({"planes": planes, "thresholds": thresholds}))
}

fn search_config(s: &SearchArgs) -> BinarySearchConfig {
    BinarySearchConfig {
        steps: s.search_steps,
        d_min: s.d_min,
        d_max: s.d_max,
        spacing: if s.inverse_depth {
            DepthSpacing::InverseDepth
        } else {
            DepthSpacing::Linear
        },
    }
}

fn search_thresholds(s: &SearchArgs, meta: &Value) -> ThresholdTable {
    match s.tau {
        Some(tau) => ThresholdTable::uniform(&[1.0], tau),
        None => stored_thresholds(meta).unwrap_or_default(),
    }
}

fn implicit_depth_map(
    model: &ImplicitModel<f32>,
    frame: FrameRef<'_>,
    config: &BinarySearchConfig,
    thresholds: &ThresholdTable,
) -> Result<DepthMap> {
    let fm = model.prepare(frame)?;
    let k = &frame.sequence.intrinsics;
    Ok(binary_search_depth(model, &fm, k.width, k.height, config, thresholds)?)
}

fn regression_depth_map(model: &RegressionModel<f32>, frame: FrameRef<'_>) -> Result<DepthMap> {
    Ok(model.predict_depth(&frame.encoder_input(&model.config)?))
}

fn eval_depth(cli: &Cli, a: &EvalDepthArgs) -> Result<()> {
    let data = load_sequences(&a.data)?;
    create_out(&a.out)?;
    let config = search_config(&a.search);
    config.validate()?;
    let (method, metrics) = match checkpoint::load(&a.model)? {
        Checkpoint::Implicit(model, meta) => {
            let t = search_thresholds(&a.search, &meta);
            let m = evaluate_depth(&data, a.frame_step, |f| {
                implicit_depth_map(&model, f, &config, &t).map_err(|e| {
                    implicit_depth::Error::Config(format!("{e:#}"))
                })
            })?;
            ("implicit (binary search)", m)
        }
        Checkpoint::Regression(model, _) => {
            let m = evaluate_depth(&data, a.frame_step, |f| {
                Ok(model.predict_depth(&f.encoder_input(&model.config)?))
            })?;
            ("regression", m)
        }
    };
    let report = MetricReport {
        method: method.into(),
        depth: Some(metrics),
        ..MetricReport::default()
    };
    write_report(&a.out, &report, json!({"depth": metrics}))?;
    write_run_json(&a.out, cli, json!({"binary_search": config}))
}

fn eval_temporal(cli: &Cli, a: &EvalTemporalArgs) -> Result<()> {
    let data = load_sequences(&a.data)?;
    create_out(&a.out)?;
    let config = TemporalEvalConfig {
        subsequence: a.subsequence,
        score: TemporalConfig {
            warmup: a.warmup,
            seed: a.seed,
            ..TemporalConfig::default()
        },
        temporal: !a.no_temporal,
        ..TemporalEvalConfig::default()
    };
    let (method, evaluation) = match checkpoint::load(&a.model)? {
        Checkpoint::Implicit(model, meta) => {
            let t = stored_thresholds(&meta).unwrap_or_default();
            let e = if a.no_temporal {
                evaluate_temporal(&WithoutPrevious(&model), &data, &t, &config)?
            } else {
                evaluate_temporal(&model, &data, &t, &config)?
            };
            ("implicit", e)
        }
        Checkpoint::Regression(model, _) => {
            let p = BlendedRegression { model: &model, band: a.band };
            let e = evaluate_temporal(&p, &data, &ThresholdTable::default(), &config)?;
            ("regression", e)
        }
    };
    let report = MetricReport {
        method: method.into(),
        iou_all: Some(evaluation.iou_all),
        temporal_score: Some(evaluation.score),
        ..MetricReport::default()
    };
    write_report(&a.out, &report, json!({"temporal": evaluation}))?;
    write_run_json(&a.out, cli, json!({"temporal": config}))
}

/// Orange checkerboard standing in for a rendered virtual object.
fn virtual_image(width: usize, height: usize) -> RgbImage {
    Grid::from_fn(width, height, |u, v| {
        if (u / 8 + v / 8) % 2 == 0 {
            [0.95, 0.55, 0.1]
        } else {
            [0.75, 0.3, 0.05]
        }
    })
}

fn load_frame(dir: &Path, index: usize) -> Result<Sequence> {
    let seq = load_sequence(dir)?;
    if index >= seq.len() {
        bail!("frame {index} out of range, sequence has {} frames", seq.len());
    }
    Ok(seq)
}

fn composite_frame(cli: &Cli, a: &CompositeArgs) -> Result<()> {
    let seq = load_frame(&a.data, a.frame)?;
    create_out(&a.out)?;
    let frame = FrameRef::new(&seq, a.frame);
    let spec = PlaneSpec::Frontoparallel { distance: a.plane_depth };
    spec.validate()?;
    let dv = render_plane_depth(&spec, &frame.frame().pose, &seq.intrinsics);
    let (source, mask) = match &a.model {
        None => {
            let gt = StepOracle.prepare(frame)?;
            ("ground truth", predict_mask(&StepOracle, &gt, frame, &dv, None)?)
        }
        Some(path) => match checkpoint::load(path)? {
            Checkpoint::Implicit(model, _) => {
                let fm = model.prepare(frame)?;
                ("implicit", predict_mask(&model, &fm, frame, &dv, None)?)
            }
            Checkpoint::Regression(model, _) => {
                let depth = regression_depth_map(&model, frame)?;
                ("regression", blended_mask(&depth, &dv, a.band)?)
            }
        },
    };
    let real = &frame.frame().rgb;
    let virt = virtual_image(real.width(), real.height());
    let out = composite(real, &virt, &mask)?;
    write_rgb_png(&a.out.join("composite.png"), &out)?;
    write_rgb_png(&a.out.join("real.png"), real)?;
    write_gray_png(&a.out.join("mask.png"), &mask.to_image())?;
    log::info!("composited frame {} with a {source} mask", a.frame);
    write_run_json(&a.out, cli, json!({"mask_source": source}))
}

fn extract_depth(cli: &Cli, a: &ExtractDepthArgs) -> Result<()> {
    let seq = load_frame(&a.data, a.frame)?;
    create_out(&a.out)?;
    let frame = FrameRef::new(&seq, a.frame);
    let config = search_config(&a.search);
    config.validate()?;
    let depth = match checkpoint::load(&a.model)? {
        Checkpoint::Implicit(model, meta) => {
            implicit_depth_map(&model, frame, &config, &search_thresholds(&a.search, &meta))?
        }
        Checkpoint::Regression(model, _) => regression_depth_map(&model, frame)?,
    };
    write_depth(&a.out.join("depth.bin"), &depth)?;
    let vis = depth_visualization(&depth, config.d_min as f32, config.d_max as f32);
    write_gray_png(&a.out.join("depth.png"), &vis)?;
    let metrics = depth_metrics(&depth, &frame.frame().depth_gt).ok();
    if let Some(m) = &metrics {
        println!("abs_rel {:.4}  rmse {:.4}  d<1.05 {:.2}", m.abs_rel, m.rmse, m.delta_105);
    }
    write_run_json(&a.out, cli, json!({"binary_search": config, "metrics": metrics}))
}

fn run_selftest(cli: &Cli, a: &SelftestArgs) -> Result<()> {
    let report = selftest::run(a.seed);
    println!(
        "gradient check implicit:   max rel error {:.3e} over {} coordinates",
        report.implicit.max_relative_error, report.implicit.coordinates
    );
    println!(
        "gradient check regression: max rel error {:.3e} over {} coordinates",
        report.regression.max_relative_error, report.regression.coordinates
    );
    println!(
        "metric cross-checks: {} instances, {} mismatches",
        report.metrics.instances,
        report.metrics.mismatches.len()
    );
    if let Some(out) = &a.out {
        create_out(out)?;
        write_json(&out.join("selftest.json"), &report)?;
        write_run_json(out, cli, json!({}))?;
    }
    if !report.passed() {
        for m in &report.metrics.mismatches {
            eprintln!("{m}");
        }
        bail!("selftest failed");
    }
    println!("selftest passed");
    Ok(())
}
