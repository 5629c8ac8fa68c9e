use detrame::data::{gen_two_moons, Dataset, Split};
use detrame::gradsuite::two_layer_model;
use detrame::instances::gaussian;
use detrame::net::{ActivationKind, Model, Signal};
use detrame::train::{
    accuracy, loss_and_gradients, project_params, sgd_step, train_loop, History, Momentum, TrainConfig,
};
use detrame::Error;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn blobs(n_per_class: usize, seed: u64, split: Split) -> Dataset {
    let centers = [[3.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 3.0]];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = gaussian(3, 3 * n_per_class, &mut rng) * 0.5;
    let labels: Vec<usize> = (0..3 * n_per_class).map(|j| j / n_per_class).collect();
    let x = Array2::from_shape_fn((3, 3 * n_per_class), |(i, j)| centers[labels[j]][i] + noise[[i, j]]);
    Dataset::new(Signal::Flat(x), labels, 3, split, "blobs").unwrap()
}

fn config(epochs: usize, rate: f64) -> TrainConfig {
    TrainConfig {
        learning_rate: rate,
        epochs,
        batch_size: 8,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn projection_repairs_infeasible_cells_and_is_idempotent() {
    let mut model = two_layer_model(1, 3);
    for (name, mut p) in model.parameters_mut() {
        if name.ends_with("coupling") {
            p.fill(0.7);
        } else if name.ends_with("gain") {
            p.iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v = if i % 2 == 0 { 1.8 } else { -0.3 });
        } else if name.ends_with("threshold") {
            p.fill(-2.0);
        }
    }
    assert!(model.cells().all(|c| !c.is_feasible()));
    project_params(&mut model);
    for cell in model.cells() {
        assert!(cell.is_feasible());
        assert!((0..cell.dim()).all(|i| cell.coupling()[[i, i]] == 0.0));
        assert!(cell.coupling().iter().filter(|&&v| v != 0.0).all(|&v| v == 0.7));
        assert!(cell.gain().iter().all(|&h| h == 0.0 || h == 1.0));
        assert!(cell.threshold().iter().all(|&b| b == 0.0));
    }
    let once = model.clone();
    project_params(&mut model);
    assert_eq!(once, model);
}

#[test]
fn sgd_step_validates_gradients() {
    let mut model = two_layer_model(2, 3);
    let x = Signal::Flat(gaussian(4, 5, &mut ChaCha8Rng::seed_from_u64(3)));
    let (_, mut grads) = loss_and_gradients(&model, &x, &[0, 1, 2, 0, 1]).unwrap();
    for (_, g) in grads.entries_mut() {
        g.fill(f64::NAN);
    }
    let before = model.clone();
    assert!(matches!(sgd_step(&mut model, &grads, 0.1), Err(Error::NonFinite(_))));
    assert_eq!(model, before);
}

#[test]
fn full_batch_steps_decrease_convex_loss() {
    // a head-only model is softmax regression, which is convex
    let data = blobs(20, 4, Split::Train);
    let mut model = Model::mlp(
        3,
        &[],
        3,
        ActivationKind::PlainRelu,
        1,
        &mut ChaCha8Rng::seed_from_u64(5),
    )
    .unwrap();
    let mut last = f64::INFINITY;
    for _ in 0..10 {
        let (loss, grads) = loss_and_gradients(&model, data.features(), data.labels()).unwrap();
        assert!(loss < last, "{loss} >= {last}");
        last = loss;
        sgd_step(&mut model, &grads, 0.05).unwrap();
    }
}

#[test]
fn zero_rate_leaves_parameters_unchanged() {
    let train = blobs(10, 6, Split::Train);
    let test = blobs(10, 7, Split::Test);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut model = Model::mlp(3, &[6], 3, ActivationKind::QMetric, 3, &mut rng).unwrap();
    let before = model.flat_parameters();
    let history = train_loop(&mut model, &train, &test, &config(3, 0.0)).unwrap();
    assert_eq!(history.records.len(), 3);
    let after = model.flat_parameters();
    assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn separable_blobs_are_learned() {
    let train = blobs(40, 9, Split::Train);
    let test = blobs(40, 10, Split::Test);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut model = Model::mlp(3, &[8], 3, ActivationKind::QMetric, 3, &mut rng).unwrap();
    let history = train_loop(&mut model, &train, &test, &config(30, 0.1)).unwrap();
    assert!(history.last().unwrap().train_acc >= 0.99);
    assert!(accuracy(&model, &train).unwrap() >= 0.99);
    assert!(model.cells().all(|c| c.is_feasible()));
}

#[test]
fn same_seed_gives_same_history() {
    let train = gen_two_moons(40, 0.1, 1, Split::Train).unwrap();
    let test = gen_two_moons(40, 0.1, 2, Split::Test).unwrap();
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut model = Model::mlp(2, &[8, 8], 2, ActivationKind::QMetric, 3, &mut rng).unwrap();
        let h = train_loop(&mut model, &train, &test, &config(5, 0.1)).unwrap();
        (h, model)
    };
    let (ha, ma) = run();
    let (hb, mb) = run();
    assert!(ha.same_metrics(&hb));
    assert_eq!(ma, mb);

    let mut other = config(5, 0.1);
    other.seed = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut model = Model::mlp(2, &[8, 8], 2, ActivationKind::QMetric, 3, &mut rng).unwrap();
    let hc = train_loop(&mut model, &train, &test, &other).unwrap();
    assert!(!ha.same_metrics(&hc));
}

#[test]
fn momentum_zero_matches_plain_sgd() {
    let x = Signal::Flat(gaussian(4, 6, &mut ChaCha8Rng::seed_from_u64(13)));
    let labels = [0, 1, 2, 2, 1, 0];
    let mut a = two_layer_model(14, 3);
    let mut b = a.clone();
    let mut mom = Momentum::new(0.0);
    for _ in 0..3 {
        let (_, ga) = loss_and_gradients(&a, &x, &labels).unwrap();
        sgd_step(&mut a, &ga, 0.05).unwrap();
        let (_, gb) = loss_and_gradients(&b, &x, &labels).unwrap();
        mom.step(&mut b, &gb, 0.05).unwrap();
    }
    assert_eq!(a, b);
}

#[test]
fn invalid_config_is_rejected() {
    let data = blobs(2, 15, Split::Train);
    let mut model = two_layer_model(16, 3);
    for bad in [
        TrainConfig {
            epochs: 0,
            ..config(1, 0.1)
        },
        TrainConfig {
            batch_size: 0,
            ..config(1, 0.1)
        },
        TrainConfig {
            learning_rate: -1.0,
            ..config(1, 0.1)
        },
    ] {
        let failure = train_loop(&mut model, &data, &data, &bad).unwrap_err();
        assert!(matches!(failure.source, Error::Config(_)));
    }
}

#[test]
fn step_decay_schedule() {
    let cfg = TrainConfig {
        learning_rate: 0.1,
        decay: 0.5,
        decay_epochs: vec![3, 5],
        ..TrainConfig::default()
    };
    // zero-based epochs: 0..=2 full rate, 3..=4 halved, 5 onwards quartered
    let rates: Vec<f64> = (0..6).map(|e| cfg.rate_at(e)).collect();
    assert_eq!(rates, vec![0.1, 0.1, 0.1, 0.05, 0.05, 0.025]);
}

#[test]
fn metrics_csv_round_trip() {
    let train = blobs(5, 17, Split::Train);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut model = Model::mlp(3, &[4], 3, ActivationKind::QMetric, 3, &mut rng).unwrap();
    let history = train_loop(&mut model, &train, &train, &config(4, 0.05)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    history.write_csv(&path, false).unwrap();
    let back = History::read_csv(&path).unwrap();
    assert!(back.same_metrics(&history));
    assert!(back.records.iter().all(|r| r.wall_s == 0.0));
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("epoch,train_loss,train_acc,test_acc,wall_s\n"));

    history.write_csv(&path, true).unwrap();
    let timed = History::read_csv(&path).unwrap();
    assert_eq!(timed.records.last().unwrap().wall_s, history.last().unwrap().wall_s);
}

#[test]
fn two_moons_labels_are_balanced_and_reproducible() {
    let a = gen_two_moons(30, 0.1, 9, Split::Train).unwrap();
    let b = gen_two_moons(30, 0.1, 9, Split::Train).unwrap();
    assert_eq!(a.features(), b.features());
    assert_eq!(a.labels().iter().filter(|&&l| l == 1).count(), 30);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let c = gen_two_moons(30, 0.1, rng.random(), Split::Train).unwrap();
    assert_ne!(a.features(), c.features());
}
