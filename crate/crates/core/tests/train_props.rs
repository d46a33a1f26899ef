use qim::data::{make_batches, BatchPlan, Dataset, Split};
use qim::models::{build_model, Backbone, InputShape, ModelSpec};
use qim::qim::QimConfig;
use qim::train::{evaluate_dataset, fit, train_step, Optimizer, OptimizerKind, TrainConfig};
use qim::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `per_class` noise images per class; with `signal` the class also lights a
/// 4×4 patch whose position encodes the label.
fn synthetic(per_class: usize, signal: bool, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut images, mut labels) = (Vec::new(), Vec::new());
    for i in 0..per_class * 10 {
        let label = i % 10;
        let mut img: Vec<u8> = (0..28 * 28).map(|_| rng.random_range(0..64)).collect();
        if signal {
            let (r0, c0) = (4 + 10 * (label / 5), 2 + 5 * (label % 5));
            for r in r0..r0 + 4 {
                for c in c0..c0 + 4 {
                    img[r * 28 + c] = 255;
                }
            }
        }
        images.extend(img);
        labels.push(label as u8);
    }
    Dataset::from_parts("synthetic", Split::Train, images, labels, (28, 28, 1), 10).unwrap()
}

fn lenet() -> ModelSpec {
    ModelSpec::new(Backbone::LeNet5, InputShape::new(28, 28, 1), 10)
}

#[test]
fn untrained_network_is_near_chance() {
    let data = synthetic(100, false, 1);
    for seed in 0..3 {
        let net = build_model::<f32>(&lenet(), seed).unwrap();
        let acc = evaluate_dataset(&net, &data, 128).unwrap();
        assert_eq!(acc.total, 1000);
        assert!((acc.percent() - 10.0).abs() <= 3.0, "seed {seed}: {acc}");
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = synthetic(4, true, 2);
    for kind in [OptimizerKind::Adam, OptimizerKind::SgdMomentum] {
        let cfg = TrainConfig { optimizer: kind, lr: 0.0, ..TrainConfig::default() };
        let mut net = build_model::<f64>(&lenet().with_qim(QimConfig::new(4, 3)), 0).unwrap();
        let before = net.params().to_vec();
        let mut opt = cfg.optimizer::<f64>();
        for batch in make_batches::<f64>(&data, BatchPlan::shuffled(8, 0)).unwrap() {
            train_step(&mut net, &batch, &mut opt).unwrap();
        }
        assert_eq!(net.params(), &before[..]);
        assert_eq!(opt.steps(), 5);
    }
}

#[test]
fn nan_parameter_is_reported_by_name() {
    let data = synthetic(1, true, 3);
    let mut net = build_model::<f64>(&lenet(), 0).unwrap();
    let target = net.params()[2].name.clone();
    let mut values = net.params()[2].value.data().to_vec();
    values[0] = f64::NAN;
    net.params_mut()[2].value = Tensor::from_vec(net.params()[2].value.shape(), values).unwrap();
    let batch = make_batches::<f64>(&data, BatchPlan::sequential(10)).unwrap().next().unwrap();
    let mut opt = Optimizer::adam(1e-3);
    match train_step(&mut net, &batch, &mut opt) {
        Err(Error::NonFiniteParam { param }) => assert_eq!(param, target),
        other => panic!("expected NonFiniteParam, got {other:?}"),
    }
}

#[test]
fn fit_is_deterministic_and_learns() {
    let train = synthetic(20, true, 4);
    let test = synthetic(5, true, 5);
    let cfg = TrainConfig { lr: 2e-3, batch_size: 16, epochs: 4, seed: 11, ..TrainConfig::default() };
    let run = || {
        let mut net = build_model::<f64>(&lenet(), 3).unwrap();
        let m = fit(&mut net, &train, &test, &cfg, |_, _| {}).unwrap();
        (m.epoch_losses, m.accuracy, net.params().to_vec())
    };
    let (losses, acc, params) = run();
    let again = run();
    assert_eq!((&losses, acc, &params), (&again.0, again.1, &again.2));
    assert!(losses.last().unwrap() < &losses[0], "{losses:?}");
    assert!(acc.percent() > 50.0, "{acc}");
}

#[test]
fn different_seeds_shuffle_differently() {
    let cfg = TrainConfig { seed: 1, ..TrainConfig::default() };
    let other = TrainConfig { seed: 2, ..TrainConfig::default() };
    assert_ne!(cfg.epoch_seed(0), cfg.epoch_seed(1));
    assert_ne!(cfg.epoch_seed(0), other.epoch_seed(0));
}
