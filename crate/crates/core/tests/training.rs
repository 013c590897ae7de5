use implicit_depth::geometry::CameraIntrinsics;
use implicit_depth::nn::checkpoint::{self, Checkpoint};
use implicit_depth::nn::gradcheck::gradient_check;
use implicit_depth::nn::{ImplicitModel, ModelConfig, Trainable};
use implicit_depth::scene::{
    generate_scene, generate_sequence, load_sequence, save_sequence, GenerationConfig, Sequence,
};
use implicit_depth::selftest::{implicit_probe, GRADCHECK_EPS};
use implicit_depth::training::{history_csv, train_implicit, train_regression, TrainConfig};
use implicit_depth::Error;

fn small_sequence(seed: u64, frames: usize) -> Sequence {
    let k = CameraIntrinsics::desk_scale(32, 24);
    let scene = generate_scene(seed, &GenerationConfig::default()).unwrap();
    generate_sequence(&scene, seed, frames, &k).unwrap()
}

fn quick(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 2,
        samples_per_image: 256,
        model: ModelConfig { feature_channels: 16, ..ModelConfig::default() },
        ..TrainConfig::default()
    }
}

fn mean_tail(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    let v: Vec<f64> = values.collect();
    v[v.len() - n..].iter().sum::<f64>() / n as f64
}

#[test]
fn implicit_model_fits_a_single_scene() {
    let data = vec![small_sequence(1, 3)];
    let trained = train_implicit(&data, &quick(300)).unwrap();
    let first = mean_tail(trained.history[..20].iter().map(|h| h.bce), 20);
    let last = mean_tail(trained.history.iter().map(|h| h.bce), 20);
    assert!(last < 0.3 && last < 0.6 * first, "bce {first} -> {last}");
}

#[test]
fn regression_model_fits_a_single_scene() {
    let data = vec![small_sequence(1, 3)];
    let trained = train_regression(&data, &quick(300)).unwrap();
    let first = mean_tail(trained.history[..20].iter().map(|h| h.bce), 20);
    let last = mean_tail(trained.history.iter().map(|h| h.bce), 20);
    assert!(last < 0.2 && last < 0.5 * first, "log error {first} -> {last}");
}

#[test]
fn training_is_deterministic() {
    let data = vec![small_sequence(2, 3)];
    let a = train_implicit(&data, &quick(15)).unwrap();
    let b = train_implicit(&data, &quick(15)).unwrap();
    assert_eq!(history_csv(&a.history), history_csv(&b.history));
    let meta = serde_json::Value::Null;
    assert_eq!(checkpoint::encode_implicit(&a.model, &meta), checkpoint::encode_implicit(&b.model, &meta));
    let c = train_implicit(&data, &TrainConfig { seed: 1, ..quick(15) }).unwrap();
    assert_ne!(history_csv(&a.history), history_csv(&c.history));
}

#[test]
fn zero_lambda_leaves_total_equal_to_bce() {
    let data = vec![small_sequence(2, 3)];
    let trained = train_implicit(&data, &TrainConfig { lambda_reg: 0.0, ..quick(5) }).unwrap();
    for h in &trained.history {
        assert_eq!(h.total, h.bce);
        assert!(h.total >= 0.0 && h.reg >= 0.0);
    }
}

#[test]
fn corrupted_layer_gradient_is_detected() {
    let mut model = ImplicitModel::<f64>::new(ModelConfig::tiny(), 0).unwrap();
    let probe = implicit_probe(&model.config, 0);
    let report = gradient_check(
        &mut model,
        |m, grad| {
            if grad {
                let loss = m.loss_and_grad(&probe, 0.5).total;
                // a backward pass that forgets a factor in one layer
                let p = m.params_mut().into_iter().find(|p| p.name == "mlp.fc2.weight").unwrap();
                p.grad.iter_mut().for_each(|g| *g *= 0.5);
                loss
            } else {
                m.loss(&probe, 0.5).total
            }
        },
        60,
        GRADCHECK_EPS,
        0,
    );
    assert!(report.max_relative_error > 0.1, "{report:?}");
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = ImplicitModel::<f32>::new(ModelConfig::tiny(), 4).unwrap();
    let meta = serde_json::json!({"note": "probe"});
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&path, &checkpoint::encode_implicit(&model, &meta)).unwrap();
    match checkpoint::load(&path).unwrap() {
        Checkpoint::Implicit(loaded, m) => {
            assert_eq!(m, meta);
            let a: Vec<Vec<f32>> = model.params().iter().map(|p| p.value.clone()).collect();
            let b: Vec<Vec<f32>> = loaded.params().iter().map(|p| p.value.clone()).collect();
            assert_eq!(a, b);
        }
        Checkpoint::Regression(..) => panic!("wrong kind"),
    }
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    assert!(matches!(checkpoint::decode(&bytes, &path), Err(Error::Format { .. })));
}

#[test]
fn sequence_round_trip_keeps_depth_and_poses() {
    let dir = tempfile::tempdir().unwrap();
    let seq = small_sequence(3, 3);
    save_sequence(&seq, dir.path()).unwrap();
    let back = load_sequence(dir.path()).unwrap();
    for (a, b) in seq.frames.iter().zip(&back.frames) {
        assert_eq!(a.depth_gt, b.depth_gt);
        assert_eq!(a.pose, b.pose);
        for (x, y) in a.rgb.iter().zip(b.rgb.iter()) {
            assert!((0..3).all(|i| (x[i] - y[i]).abs() <= 0.5 / 255.0 + 1e-6));
        }
    }
}

#[test]
fn manifest_with_wrong_frame_count_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    save_sequence(&small_sequence(3, 2), dir.path()).unwrap();
    let path = dir.path().join("manifest.json");
    let mut manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    manifest["frame_count"] = serde_json::json!(5);
    std::fs::write(&path, manifest.to_string()).unwrap();
    let err = load_sequence(dir.path()).unwrap_err();
    assert!(err.to_string().contains("frame_count"), "{err}");
}

#[test]
fn nan_depth_in_dataset_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut seq = small_sequence(3, 2);
    seq.frames[1].depth_gt.values.set(3, 3, f32::NAN);
    save_sequence(&seq, dir.path()).unwrap();
    assert!(load_sequence(dir.path()).is_err());
}
