use candle_core::{DType, Device, Tensor};
use pivdiff_core::diffusion::{DiffusionSchedule, FlowNormalizer};
use pivdiff_core::synth::{make_dataset, AnalyticFlow, GeneratorConfig};
use pivdiff_core::FlowSample;
use pivdiff_net::train::{
    batch_loss, draw_batch, gradient_check, smoothed_loss, state_path, Anneal, LogRow, TrainConfig,
};
use pivdiff_net::{l1_flow_loss, one_cycle_lr, train, DiffuserNet, ModelConfig, NetError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_cfg() -> ModelConfig {
    ModelConfig { pyramid_levels: 2, ..ModelConfig::toy() }
}

fn data(n: usize) -> Vec<FlowSample> {
    let flows = [AnalyticFlow::Uniform { u: 1.25, v: -0.5 }, AnalyticFlow::Rotation { omega: 0.04, center: None }];
    let gc = GeneratorConfig { height: 32, width: 32, rng_seed: 4, ..GeneratorConfig::default() };
    make_dataset(&flows[..n.min(2)], n.div_ceil(2), &gc).unwrap()
}

fn tcfg(steps: usize) -> TrainConfig {
    TrainConfig { total_steps: steps, batch_size: 2, crop_size: 32, peak_lr: 1e-3, eval_every: 0, ..TrainConfig::default() }
}

fn t(v: Vec<f64>, shape: (usize, usize, usize, usize)) -> Tensor {
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

#[test]
fn l1_loss_examples() {
    let pred = t(vec![1.0, -2.0, 0.5, 0.0], (1, 2, 1, 2));
    let gt = t(vec![0.0; 4], (1, 2, 1, 2));
    let l = |m: Option<&Tensor>| l1_flow_loss(&pred, &gt, m).unwrap().to_scalar::<f64>().unwrap();
    assert_eq!(l(None), 3.5 / 4.0);
    assert_eq!(l(Some(&t(vec![1.0, 0.0], (1, 1, 1, 2)))), 1.5 / 2.0);
    assert_eq!(l(Some(&t(vec![0.0, 1.0], (1, 1, 1, 2)))), 2.0 / 2.0);
    assert!(matches!(l1_flow_loss(&pred, &gt, Some(&t(vec![0.0, 0.0], (1, 1, 1, 2)))), Err(NetError::EmptyMask)));
    assert!(l1_flow_loss(&pred, &t(vec![0.0; 2], (1, 2, 1, 1)), None).is_err());
}

#[test]
fn one_cycle_shape() {
    for anneal in [Anneal::Linear, Anneal::Cosine] {
        let c = TrainConfig { total_steps: 1000, peak_lr: 1e-3, warmup_fraction: 0.1, anneal, ..TrainConfig::default() };
        assert!((one_cycle_lr(0, &c) - 1e-3 / 25.0).abs() < 1e-18);
        assert_eq!(one_cycle_lr(100, &c), 1e-3);
        assert!((one_cycle_lr(1000, &c) - 1e-7).abs() < 1e-20);
        assert_eq!(one_cycle_lr(5000, &c), one_cycle_lr(1000, &c));
        let lrs: Vec<f64> = (0..=1000).map(|s| one_cycle_lr(s, &c)).collect();
        assert!(lrs[..=100].windows(2).all(|w| w[1] >= w[0]));
        assert!(lrs[100..].windows(2).all(|w| w[1] <= w[0]));
    }
    let lin = TrainConfig { total_steps: 100, peak_lr: 1.0, warmup_fraction: 0.0, div_factor: 25.0, final_div_factor: 1e4, ..TrainConfig::default() };
    assert_eq!(one_cycle_lr(0, &lin), 1.0);
    assert!((one_cycle_lr(50, &lin) - (1.0 + 1e-4) / 2.0).abs() < 1e-12);
}

#[test]
fn config_validation() {
    assert!(TrainConfig { total_steps: 0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { peak_lr: 0.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { warmup_fraction: 1.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig::default().validate().is_ok());
    let m = DiffuserNet::new(small_cfg(), FlowNormalizer::default(), 0, DType::F32).unwrap();
    let sched = DiffusionSchedule::default_cosine();
    let big = TrainConfig { crop_size: 64, ..tcfg(1) };
    assert!(matches!(train(&m, &data(2), &[], &sched, &big, None, |_| {}), Err(NetError::Precondition(_))));
    assert!(matches!(train(&m, &[], &[], &sched, &tcfg(1), None, |_| {}), Err(NetError::Precondition(_))));
}

#[test]
fn flips_keep_flow_consistent() {
    let m = DiffuserNet::new(small_cfg(), FlowNormalizer::default(), 0, DType::F64).unwrap();
    let d = data(1);
    let sched = DiffusionSchedule::default_cosine();
    let cfg = TrainConfig { batch_size: 16, ..tcfg(1) };
    let b = draw_batch(&d, &m, &sched, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut seen = std::collections::BTreeSet::new();
    for i in 0..16 {
        let g: Vec<Vec<Vec<f64>>> = b.gt.get(i).unwrap().to_vec3().unwrap();
        let (u, v) = (g[0][0][0], g[1][0][0]);
        assert_eq!((u.abs(), v.abs()), (1.25, 0.5));
        assert!(g[0].iter().flatten().all(|&x| x == u) && g[1].iter().flatten().all(|&x| x == v));
        seen.insert(((u > 0.0), (v > 0.0)));
    }
    assert_eq!(seen.len(), 4);
    assert!(b.t.iter().all(|&t| (1..=1000).contains(&t)));
}

#[test]
fn every_parameter_receives_gradient() {
    let m = DiffuserNet::new(small_cfg(), FlowNormalizer::default(), 0, DType::F32).unwrap();
    let sched = DiffusionSchedule::default_cosine();
    let b = draw_batch(&data(2), &m, &sched, &tcfg(1), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let grads = batch_loss(&m, &b).unwrap().backward().unwrap();
    for (name, var) in m.params().iter() {
        let g = grads.get(var.as_tensor()).unwrap_or_else(|| panic!("{name} has no gradient"));
        let norm = g.sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(norm > 0.0, "{name} gradient is zero");
    }
}

#[test]
fn training_runs_and_logs_every_step() {
    let m = DiffuserNet::new(small_cfg(), FlowNormalizer::default(), 0, DType::F32).unwrap();
    let sched = DiffusionSchedule::default_cosine().with_inference_steps(2).unwrap();
    let d = data(2);
    let mut seen = Vec::new();
    let cfg = TrainConfig { eval_every: 2, ..tcfg(4) };
    let out = train(&m, &d, &d[..1], &sched, &cfg, None, |r| seen.push(r.step)).unwrap();
    assert_eq!(seen, vec![1, 2, 3, 4]);
    assert_eq!(out.log.len(), 4);
    assert!(out.log.iter().all(|r| r.loss.is_finite()));
    assert!(out.log[1].val_aee.is_some() && out.log[0].val_aee.is_none());
    assert_eq!(out.log[0].lr, one_cycle_lr(0, &cfg));
    let line = out.log[1].to_line();
    assert_eq!(LogRow::parse(&line).unwrap().step, 2);
    assert!(smoothed_loss(&out.log, 4, 2).is_some());
}

#[test]
fn resume_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let sched = DiffusionSchedule::default_cosine();
    let d = data(2);
    let fresh = || DiffuserNet::new(small_cfg(), FlowNormalizer::default(), 0, DType::F32).unwrap();

    let straight = fresh();
    let full = train(&straight, &d, &[], &sched, &tcfg(6), None, |_| {}).unwrap();

    let first = fresh();
    let cfg = TrainConfig { checkpoint_every: 3, ..tcfg(6) };
    let a = dir.path().join("a");
    std::fs::create_dir_all(&a).unwrap();
    let part = train(&first, &d, &[], &sched, &cfg, Some(&a), |_| {}).unwrap();
    assert_eq!(part.checkpoints.len(), 2);
    assert!(state_path(&part.checkpoints[0]).exists());

    let resumed = fresh();
    let cfg = TrainConfig { resume_from: Some(part.checkpoints[0].clone()), ..tcfg(6) };
    let rest = train(&resumed, &d, &[], &sched, &cfg, None, |_| {}).unwrap();

    assert_eq!(rest.log, full.log);
    for name in straight.params().names() {
        let bits = |m: &DiffuserNet| m.params().values(name).unwrap().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&straight), bits(&resumed), "{name}");
        assert_eq!(bits(&straight), bits(&first), "{name}");
    }
}

#[test]
fn non_finite_loss_names_the_batch() {
    let m = DiffuserNet::new(small_cfg(), FlowNormalizer::default(), 0, DType::F32).unwrap();
    m.params().set_element("update_block.flow_head.conv2.bias", 0, f64::NAN).unwrap();
    let sched = DiffusionSchedule::default_cosine();
    match train(&m, &data(2), &[], &sched, &tcfg(3), None, |_| {}) {
        Err(NetError::NonFiniteLoss { step, batch_ids }) => {
            assert_eq!(step, 1);
            assert_eq!(batch_ids.len(), 2);
        }
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}

#[test]
fn gradients_match_finite_differences() {
    let m = DiffuserNet::new(small_cfg(), FlowNormalizer::default(), 1, DType::F64).unwrap();
    let sched = DiffusionSchedule::default_cosine();
    let b = draw_batch(&data(2), &m, &sched, &tcfg(1), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let checks = gradient_check(&m, &b, 12, 1e-3, 7).unwrap();
    assert_eq!(checks.len(), 12);
    for c in checks.iter().filter(|c| c.analytic.abs() > 1e-6) {
        assert!(c.relative_error() < 1e-3, "{c:?}");
    }
}

