//! Acceptance run. Prints one line per criterion and exits non-zero if any
//! fails. The training criteria take several minutes on one core.

use implicit_depth::eval::{
    evaluate_occlusion, evaluate_temporal, parse_plane_range, OcclusionEvaluation,
    TemporalEvalConfig, TemporalEvaluation,
};
use implicit_depth::geometry::CameraIntrinsics;
use implicit_depth::grid::{Grid, RgbImage};
use implicit_depth::inference::{
    binary_search_depth, composite, select_thresholds, BinarySearchConfig, BlendedRegression,
    CompositingMask, FrameRef, MaskPredictor, StepOracle, ThresholdTable, WithoutPrevious,
};
use implicit_depth::nn::loss::edge_regularizer;
use implicit_depth::nn::ImplicitModel;
use implicit_depth::scene::{generate_scene, generate_sequence, GenerationConfig, Sequence};
use implicit_depth::selftest;
use implicit_depth::training::{
    sample_query, train_implicit, train_regression, SamplingFrame, TrainConfig,
};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

const WIDTH: usize = 96;
const HEIGHT: usize = 64;
const TRAIN_STEPS: usize = 1500;
const SEEDS: [u64; 3] = [0, 1, 2];
const FRAME_STEP: usize = 3;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn sequences(first_seed: u64, count: u64, frames: usize) -> Vec<Sequence> {
    let k = CameraIntrinsics::desk_scale(WIDTH, HEIGHT);
    (first_seed..first_seed + count)
        .map(|s| {
            let scene = generate_scene(s, &GenerationConfig::default()).expect("scene");
            generate_sequence(&scene, s, frames, &k).expect("sequence")
        })
        .collect()
}

struct Splits {
    train: Vec<Sequence>,
    val: Vec<Sequence>,
    test: Vec<Sequence>,
}

fn splits() -> Splits {
    Splits {
        train: sequences(1000, 16, 40),
        val: sequences(2000, 2, 30),
        test: sequences(3000, 8, 30),
    }
}

fn train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        steps: TRAIN_STEPS,
        seed,
        ..TrainConfig::default()
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let report = selftest::run(0);
    let elapsed = start.elapsed();
    let (i, r) = (&report.implicit, &report.regression);
    let passed = i.max_relative_error < 1e-3
        && r.max_relative_error < 1e-3
        && i.coordinates >= 50
        && r.coordinates >= 50
        && elapsed < Duration::from_secs(60);
    outcome(
        passed,
        format!(
            "implicit {:.2e} over {}, regression {:.2e} over {}, {:.1?}",
            i.max_relative_error, i.coordinates, r.max_relative_error, r.coordinates, elapsed
        ),
    )
}

fn binary_search_bound() -> Outcome {
    let seq = &sequences(7, 1, 2)[0];
    let frame = FrameRef::new(seq, 0);
    let config = BinarySearchConfig::default();
    let start = Instant::now();
    let gt = StepOracle.prepare(frame).expect("oracle");
    let depth = binary_search_depth(&StepOracle, &gt, WIDTH, HEIGHT, &config, &ThresholdTable::default())
        .expect("search");
    let elapsed = start.elapsed();
    let real = &seq.frames[0].depth_gt;
    let mut max_err = 0.0f64;
    let mut pixels = 0;
    for (u, v, d) in real.values.indexed() {
        if !*real.valid.get(u, v) {
            continue;
        }
        let target = (*d as f64).clamp(config.d_min, config.d_max);
        max_err = max_err.max((*depth.values.get(u, v) as f64 - target).abs());
        pixels += 1;
    }
    let bound = (config.d_max - config.d_min) / 4096.0;
    outcome(
        max_err <= bound && pixels == WIDTH * HEIGHT && elapsed < Duration::from_secs(10),
        format!("max error {:.3} mm (bound {:.3} mm) over {pixels} px, {elapsed:.1?}", max_err * 1e3, bound * 1e3),
    )
}

fn metric_oracles() -> Outcome {
    let check = selftest::check_metrics(100, 0);
    outcome(
        check.instances == 100 && check.mismatches.is_empty(),
        format!("{} instances, {} mismatches", check.instances, check.mismatches.len()),
    )
}

struct SeedResult {
    implicit: OcclusionEvaluation,
    regression: OcclusionEvaluation,
    implicit_model: ImplicitModel<f32>,
}

fn occlusion_run(data: &Splits, seed: u64) -> SeedResult {
    let planes = parse_plane_range("0.5:5.0:0.5").unwrap();
    let cfg = train_config(seed);
    let implicit = train_implicit(&data.train, &cfg).expect("implicit training").model;
    let regression = train_regression(&data.train, &cfg).expect("regression training").model;
    let blended = BlendedRegression {
        model: &regression,
        band: 0.2,
    };
    let ti = select_thresholds(&implicit, &data.val, &planes, FRAME_STEP).unwrap();
    let tr = select_thresholds(&blended, &data.val, &planes, FRAME_STEP).unwrap();
    SeedResult {
        implicit: evaluate_occlusion(&implicit, &data.test, &planes, &ti, FRAME_STEP).unwrap(),
        regression: evaluate_occlusion(&blended, &data.test, &planes, &tr, FRAME_STEP).unwrap(),
        implicit_model: implicit,
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn versus_regression(runs: &[SeedResult], elapsed: Duration) -> Outcome {
    let avg = |f: &dyn Fn(&SeedResult) -> f64| mean(runs.iter().map(f));
    let all = (avg(&|r| r.implicit.iou_all), avg(&|r| r.regression.iou_all));
    let surf = (
        avg(&|r| r.implicit.iou_surface.unwrap_or(f64::NAN)),
        avg(&|r| r.regression.iou_surface.unwrap_or(f64::NAN)),
    );
    let bnd = (
        avg(&|r| r.implicit.iou_boundary.unwrap_or(f64::NAN)),
        avg(&|r| r.regression.iou_boundary.unwrap_or(f64::NAN)),
    );
    let passed = surf.0 - surf.1 >= 0.0
        && bnd.0 - bnd.1 >= 0.0
        && all.0 - all.1 >= -0.5
        && elapsed < Duration::from_secs(45 * 60);
    outcome(
        passed,
        format!(
            "implicit/regression all {:.2}/{:.2} surface {:.2}/{:.2} boundary {:.2}/{:.2}, {:.0?}",
            all.0, all.1, surf.0, surf.1, bnd.0, bnd.1, elapsed
        ),
    )
}

fn temporal(data: &Splits, temporal_model: &ImplicitModel<f32>) -> Outcome {
    let plain = train_implicit(&data.train, &TrainConfig { p2: 1.0, ..train_config(0) })
        .expect("non-temporal training")
        .model;
    let cfg = TemporalEvalConfig::default();
    let table = ThresholdTable::default();
    let with: TemporalEvaluation = evaluate_temporal(temporal_model, &data.test, &table, &cfg).unwrap();
    let without = evaluate_temporal(
        &WithoutPrevious(&plain),
        &data.test,
        &table,
        &TemporalEvalConfig { temporal: false, ..cfg },
    )
    .unwrap();
    outcome(
        with.score <= 0.9 * without.score && with.iou_all >= without.iou_all - 1.0,
        format!(
            "score {:.2} vs {:.2} (ratio {:.3}), IoU All {:.2} vs {:.2}",
            with.score,
            without.score,
            with.score / without.score,
            with.iou_all,
            without.iou_all
        ),
    )
}

fn sampling_statistics() -> Outcome {
    let seq = &sequences(11, 1, 2)[0];
    let frame = SamplingFrame::new(0, &seq.frames[0].depth_gt).unwrap();
    let cfg = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 100_000;
    let (mut gaussian, mut sentinel, mut kept, mut flipped) = (0usize, 0usize, 0usize, 0usize);
    let mut offsets = Vec::new();
    for _ in 0..n {
        let s = sample_query(&frame, &cfg, &mut rng);
        if s.near_surface {
            gaussian += 1;
            let (u, v) = (s.p.u as usize, s.p.v as usize);
            offsets.push(s.d_virtual as f64 - *frame.depth.values.get(u, v) as f64);
        }
        if s.pseudo_prev == -1.0 {
            sentinel += 1;
        } else {
            kept += 1;
            if (s.pseudo_prev >= 0.5) != (s.label == 1.0) {
                flipped += 1;
            }
        }
    }
    let g = gaussian as f64 / n as f64;
    let m = mean(offsets.iter().copied());
    let std = mean(offsets.iter().map(|x| (x - m).powi(2))).sqrt();
    let target_std = cfg.gaussian_variance.sqrt();
    let sen = sentinel as f64 / n as f64;
    let flip = flipped as f64 / kept as f64;
    outcome(
        (g - 0.25).abs() <= 0.01
            && (std / target_std - 1.0).abs() <= 0.05
            && (sen - 0.25).abs() <= 0.01
            && (flip - 0.25).abs() <= 0.01,
        format!("gaussian {g:.4}, std {std:.4}, sentinel {sen:.4}, flip {flip:.4}"),
    )
}

fn regularizer_algebra() -> Outcome {
    let half = edge_regularizer(&[0.5; 8]);
    let ends = edge_regularizer(&[0.0, 1.0, 1.0, 0.0, 0.0]);
    let mixed = edge_regularizer(&[0.5, 0.0, 0.5, 1.0]);
    outcome(
        half == 1.0 && ends == 0.0 && mixed == 0.5,
        format!("{half} {ends} {mixed}"),
    )
}

fn compositing() -> Outcome {
    let real: RgbImage = Grid::from_fn(WIDTH, HEIGHT, |u, v| {
        [u as f32 / 95.0, v as f32 / 63.0, ((u * 7 + v * 3) % 11) as f32 / 10.0]
    });
    let virt: RgbImage = Grid::from_fn(WIDTH, HEIGHT, |u, v| [0.3, (u % 5) as f32 / 4.0, (v % 3) as f32 / 2.0]);
    let coverage = Grid::from_fn(WIDTH, HEIGHT, |u, _| u < 60);
    let mask = |c: f32| CompositingMask {
        values: Grid::new(WIDTH, HEIGHT, c),
        coverage: coverage.clone(),
    };
    let ones = composite(&real, &virt, &mask(1.0)).unwrap() == real;
    let zeros = composite(&real, &virt, &mask(0.0)).unwrap().indexed().all(|(u, v, px)| {
        px == if *coverage.get(u, v) { virt.get(u, v) } else { real.get(u, v) }
    });
    let mid = composite(&real, &virt, &mask(0.5)).unwrap().indexed().all(|(u, v, px)| {
        let (r, s) = (real.get(u, v), virt.get(u, v));
        !*coverage.get(u, v) || (0..3).all(|i| px[i] == (r[i] + s[i]) / 2.0)
    });
    outcome(ones && zeros && mid, format!("C=1 {ones}, C=0 {zeros}, C=0.5 {mid}"))
}

fn impd(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_impd"))
        .args(args)
        .env("IMPD_THREADS", "1")
        .status()
        .expect("run impd");
    assert!(status.success(), "impd {args:?} failed");
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let p = |name: &str| root.join(name).to_string_lossy().into_owned();
    impd(&["synth", "--seed", "5", "--scenes", "2", "--frames", "6", "--out", &p("data")]);
    for run in ["a", "b"] {
        impd(&["train", "--data", &p("data"), "--seed", "9", "--steps", "20", "--out", &p(run)]);
    }
    let same = |name: &str| {
        std::fs::read(Path::new(&p("a")).join(name)).unwrap() == std::fs::read(Path::new(&p("b")).join(name)).unwrap()
    };
    let (ckpt, csv) = (same("model.ckpt"), same("loss.csv"));
    outcome(ckpt && csv, format!("checkpoint identical {ckpt}, loss csv identical {csv}"))
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 gradient check", gradients()),
        ("2 binary search bound", binary_search_bound()),
        ("3 metric oracles", metric_oracles()),
    ];
    let data = splits();
    let start = Instant::now();
    let runs: Vec<SeedResult> = SEEDS.iter().map(|&s| occlusion_run(&data, s)).collect();
    results.push(("4 implicit vs regression", versus_regression(&runs, start.elapsed())));
    results.push(("5 temporal stability", temporal(&data, &runs[0].implicit_model)));
    results.push(("6 sampling statistics", sampling_statistics()));
    results.push(("7 regularizer algebra", regularizer_algebra()));
    results.push(("8 compositing identities", compositing()));
    results.push(("9 training determinism", determinism()));

    let mut failed = 0;
    for (name, o) in &results {
        println!("acceptance {name:<26} {}  {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.passed);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
