use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roadseg_core::nn::{count_params, estimate_flops, DualEncoderNet, ModelConfig, SegmentationModel, SingleConvBaseline, Tap};
use roadseg_core::optim::{AdamW, AdamWConfig};
use roadseg_core::train::loss_and_grads;
use roadseg_core::{Error, Graph, ParamStore, Tensor};

fn image(seed: u64, b: usize, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([b, h, w, 3], |_| rng.gen::<f64>())
}

fn road_mask(b: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_fn([b, h, w, 1], |i| f64::from((i / w) % h == h / 2 || i % w == w / 3))
}

#[test]
fn logits_match_input_extent() {
    let net = DualEncoderNet::new(ModelConfig::tiny()).unwrap();
    for (h, w) in [(64, 64), (96, 96), (128, 128), (64, 96)] {
        let out = net.predict(&image(h as u64, 1, h, w)).unwrap();
        assert_eq!(out.logits.shape(), &[1, h, w, 1]);
        assert!(out.probabilities.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }
}

#[test]
fn rejects_bad_inputs() {
    let net = DualEncoderNet::new(ModelConfig::tiny()).unwrap();
    assert!(matches!(net.predict(&image(0, 1, 48, 64)), Err(Error::Indivisible { factor: 32, .. })));
    assert!(net.predict(&Tensor::zeros([1, 32, 32, 4])).is_err());
}

#[test]
fn parameter_count_matches_enumeration() {
    for cfg in [ModelConfig::tiny(), ModelConfig::tiny().scaled_widths(2)] {
        let net = DualEncoderNet::new(cfg.clone()).unwrap();
        let enumerated: usize = net.params().iter().map(|(_, _, t)| t.numel()).sum();
        assert_eq!(count_params(&cfg), enumerated);
    }
}

#[test]
fn flop_estimate_scales_with_resolution() {
    let cfg = ModelConfig::tiny();
    let a = estimate_flops(&cfg, 64, 64).unwrap();
    let b = estimate_flops(&cfg, 128, 128).unwrap();
    // Convolutions are linear in pixel count; both attention terms are quadratic when every
    // stage pools with the same stride.
    assert_eq!(b.conv, 4 * a.conv);
    assert_eq!(b.attention, 16 * a.attention);
    assert!(a.other > 0 && b.total() > a.total());
    assert!(estimate_flops(&cfg, 50, 64).is_err());
}

#[test]
fn batch_items_are_independent() {
    let net = DualEncoderNet::new(ModelConfig { zero_init_residual: false, ..ModelConfig::tiny() }).unwrap();
    let x = image(3, 2, 64, 64);
    let both = net.predict(&x).unwrap();
    let second = net.predict(&x.batch_item(1).unwrap()).unwrap();
    let d = both.logits.batch_item(1).unwrap().max_abs_diff(&second.logits).unwrap();
    assert!(d < 1e-12, "{d}");
}

#[test]
fn every_parameter_receives_gradient_with_random_init() {
    let net = DualEncoderNet::new(ModelConfig { zero_init_residual: false, seed: 5, ..ModelConfig::tiny() }).unwrap();
    // At 128² the deepest stage is 4×4, so its low band has more than one key token; with a
    // single key the softmax is constant and the low-band key projection cannot learn.
    let (_, grads) = loss_and_grads(&net, &image(1, 1, 128, 128), &road_mask(1, 128, 128), 1.0).unwrap();
    let dead: Vec<&str> = net
        .params()
        .iter()
        .filter(|(id, _, _)| grads[id.index()].data().iter().all(|&g| g == 0.0))
        .map(|(_, p, _)| p)
        .collect();
    assert!(dead.is_empty(), "dead parameters: {dead:?}");
}

#[test]
fn zero_initialized_network_wakes_up_after_two_steps() {
    let mut net = DualEncoderNet::new(ModelConfig::tiny()).unwrap();
    let (x, m) = (image(2, 1, 128, 128), road_mask(1, 128, 128));
    let mut opt = AdamW::new(AdamWConfig { lr: 1e-3, ..Default::default() }, net.params());
    for _ in 0..2 {
        let (_, grads) = loss_and_grads(&net, &x, &m, 1.0).unwrap();
        opt.step(net.params_mut(), &grads).unwrap();
    }
    let (_, grads) = loss_and_grads(&net, &x, &m, 1.0).unwrap();
    let dead: Vec<&str> = net
        .params()
        .iter()
        .filter(|(id, _, _)| grads[id.index()].data().iter().all(|&g| g == 0.0))
        .map(|(_, p, _)| p)
        .collect();
    assert!(dead.is_empty(), "dead parameters: {dead:?}");
}

#[test]
fn trace_records_all_taps_with_stage_shapes() {
    let net = DualEncoderNet::new(ModelConfig::tiny()).unwrap();
    let mut g = Graph::new(net.params());
    let x = g.input(image(4, 1, 64, 64));
    let trace = net.trace(&mut g, x).unwrap();
    assert_eq!(trace.taps.len(), 16);
    for i in 1..=4u8 {
        let side = 64 >> (i + 1);
        let c = net.config().widths[i as usize - 1];
        for tap in [Tap::Cnn(i), Tap::Sft(i), Tap::Cffm(i)] {
            assert_eq!(g.value(trace.tap(tap).unwrap()).shape(), &[1, side, side, c]);
        }
    }
    assert_eq!(g.value(trace.tap(Tap::Decoder(4)).unwrap()).shape(), &[1, 64, 64, 32]);
}

#[test]
fn tap_selector_parsing() {
    assert_eq!(Tap::parse_selector("all").unwrap().len(), 16);
    assert_eq!(Tap::parse_selector("cffm, dec-4, cffm-2").unwrap().len(), 5);
    assert_eq!("sft-3".parse::<Tap>().unwrap(), Tap::Sft(3));
    assert_eq!(Tap::Decoder(2).to_string(), "dec-2");
    for bad in ["", "cnn-5", "foo-1", "cnn-x"] {
        assert!(matches!(Tap::parse_selector(bad), Err(Error::UnknownTap(_))), "{bad}");
    }
}

#[test]
fn from_params_reports_each_mismatched_path() {
    let cfg = ModelConfig::tiny();
    let net = DualEncoderNet::new(cfg.clone()).unwrap();
    let good = net.clone().into_params();
    assert!(DualEncoderNet::from_params(cfg.clone(), good).is_ok());

    let mut bad = ParamStore::new();
    for (_, path, t) in net.params().iter() {
        if path == "head/weight" {
            bad.insert(path, Tensor::zeros([1, 1, 32, 2]));
        } else if path != "stem/conv/bias" {
            bad.insert(path, t.clone());
        }
    }
    bad.insert("extra/weight", Tensor::zeros([1]));
    let msg = DualEncoderNet::from_params(cfg, bad).unwrap_err().to_string();
    for needle in ["`head/weight`", "missing parameter `stem/conv/bias`", "unexpected parameter `extra/weight`"] {
        assert!(msg.contains(needle), "{msg}");
    }
}

#[test]
fn config_validation_names_fields() {
    let mut cfg = ModelConfig::tiny();
    cfg.widths[2] = 0;
    assert!(cfg.validate().unwrap_err().to_string().contains("widths[2]"));
    let mut cfg = ModelConfig::tiny();
    cfg.sft[1].heads = 3;
    assert!(cfg.validate().unwrap_err().to_string().contains("sft[1]"));
}

#[test]
fn baseline_is_a_single_convolution() {
    let b = SingleConvBaseline::new(0);
    assert_eq!(b.params().num_scalars(), 3 * 3 * 3 + 1);
    assert_eq!(b.predict(&image(0, 1, 8, 8)).unwrap().logits.shape(), &[1, 8, 8, 1]);
}

#[test]
fn same_seed_same_initialization() {
    let a = DualEncoderNet::new(ModelConfig::tiny()).unwrap();
    let b = DualEncoderNet::new(ModelConfig::tiny()).unwrap();
    let c = DualEncoderNet::new(ModelConfig { seed: 1, ..ModelConfig::tiny() }).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
}
