use roadseg::checkpoint::{AnyModel, Archivable, Checkpoint, ModelSpec, TrainState};
use roadseg::AppError;
use roadseg_core::nn::SingleConvBaseline;
use roadseg_core::optim::{AdamW, AdamWConfig};
use roadseg_core::{DualEncoderNet, ModelConfig, SegmentationModel, Tensor};

fn image(h: usize, w: usize) -> Tensor {
    Tensor::from_fn([1, h, w, 3], |i| ((i * 37) % 101) as f64 / 100.0)
}

fn randomized() -> DualEncoderNet {
    DualEncoderNet::new(ModelConfig {
        zero_init_residual: false,
        seed: 5,
        ..ModelConfig::tiny()
    })
    .unwrap()
}

#[test]
fn save_load_forward_is_bit_identical() {
    let net = randomized();
    let mut opt = AdamW::new(AdamWConfig::default(), net.params());
    opt.step = 3;
    opt.m[0][0] = 0.125;
    opt.v[1][0] = f64::MIN_POSITIVE;
    let state = TrainState {
        step: 3,
        best_iou: Some(0.5),
        best_step: Some(2),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sub/latest.ckpt");
    let ckpt = Checkpoint::capture(&net, Some(&opt), &state);
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes(), std::fs::read(&path).unwrap());

    let restored = DualEncoderNet::restore(&back).unwrap();
    let x = image(64, 64);
    let a = net.predict(&x).unwrap().logits;
    let b = restored.predict(&x).unwrap().logits;
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));

    let opt_back = back.optimizer(AdamWConfig::default()).unwrap();
    assert_eq!(opt_back, opt);
}

#[test]
fn saving_twice_gives_identical_bytes() {
    let net = randomized();
    let a = Checkpoint::capture(&net, None, &TrainState::default()).to_bytes();
    let b = Checkpoint::capture(&randomized(), None, &TrainState::default()).to_bytes();
    assert_eq!(a, b);
}

#[test]
fn shape_mismatch_names_each_parameter() {
    let net = randomized();
    let mut ckpt = Checkpoint::capture(&net, None, &TrainState::default());
    ckpt.model = ModelSpec::DualEncoder {
        config: ModelConfig::tiny().scaled_widths(2),
    };
    let err = DualEncoderNet::restore(&ckpt).unwrap_err().to_string();
    assert!(err.contains("stage1/sft0/cfia/q_proj/weight"), "{err}");
    assert!(err.contains("expected shape"), "{err}");
    assert!(err.contains("head"), "{err}");
}

#[test]
fn wrong_architecture_is_rejected() {
    let base = SingleConvBaseline::new(1);
    let ckpt = Checkpoint::capture(&base, None, &TrainState::default());
    assert!(matches!(DualEncoderNet::restore(&ckpt), Err(AppError::Config(_))));
    assert!(matches!(AnyModel::restore(&ckpt).unwrap(), AnyModel::SingleConv(_)));
}

#[test]
fn corrupt_files_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ckpt");
    std::fs::write(&path, b"RSEGCKPT\x01\0\0\0\xff\xff\xff\xff\0\0\0\0").unwrap();
    let err = Checkpoint::load(&path).unwrap_err();
    assert!(matches!(err, AppError::Checkpoint { .. }), "{err}");
    assert!(matches!(Checkpoint::load(&dir.path().join("missing")), Err(AppError::Io { .. })));
}
