mod common;

use layercollapse::collapse::collapse_model;
use layercollapse::io::encode_checkpoint;
use layercollapse::loss::RegConfig;
use layercollapse::nn::{init_model, ArchSpec, Layer, LayerSpec, ModelGraph};
use layercollapse::tensor::Tensor;
use layercollapse::train::{
    demo_fig1, evaluate_split, gen_blobs, gen_regression_1d, sensitivity_sweep, sequential_collapse, sgd_step, train,
    Dataset, Fig1Config, LrStep, Shape1d, Split, Targets, TrainConfig,
};
use layercollapse::Error;

fn block(hidden: usize, out: usize) -> LayerSpec {
    LayerSpec::Block {
        hidden,
        out,
        batch_norm: false,
        dropout: 0.0,
    }
}

fn spec(input: usize, layers: Vec<LayerSpec>) -> ArchSpec {
    ArchSpec {
        input: vec![input],
        layers,
    }
}

#[test]
fn sgd_hand_updates() {
    let mut w = Tensor::<f64>::from_vec(vec![1.0]);
    let mut v = Tensor::<f64>::from_vec(vec![0.0]);
    sgd_step(&mut w, &Tensor::from_vec(vec![0.5]), &mut v, 0.1, 0.9).unwrap();
    assert!((v.data()[0] - 0.5).abs() < 1e-15 && (w.data()[0] - 0.95).abs() < 1e-15);

    let mut w = Tensor::<f64>::from_vec(vec![0.0]);
    let mut v = Tensor::<f64>::from_vec(vec![0.0]);
    for _ in 0..2 {
        sgd_step(&mut w, &Tensor::from_vec(vec![1.0]), &mut v, 0.1, 0.9).unwrap();
    }
    assert!((w.data()[0] + 0.29).abs() < 1e-15);

    let mut w = Tensor::from_vec(vec![3.0]);
    sgd_step(&mut w, &Tensor::from_vec(vec![7.0]), &mut v, 0.0, 0.9).unwrap();
    assert_eq!(w.data()[0], 3.0);
}

#[test]
fn same_seed_same_run() {
    let data = gen_blobs(1, 300, 3, 0.6).unwrap().with_split(1, 0.2);
    let s = spec(
        2,
        vec![
            LayerSpec::Block {
                hidden: 8,
                out: 6,
                batch_norm: true,
                dropout: 0.2,
            },
            LayerSpec::Linear { out: 3 },
        ],
    );
    let cfg = TrainConfig {
        seed: 3,
        epochs: 4,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m: ModelGraph<f64> = init_model(&s, 3, false).unwrap();
        let log = train(&mut m, &data, &cfg, None).unwrap();
        (log, encode_checkpoint(&m).unwrap())
    };
    let (a, ca) = run();
    let (b, cb) = run();
    assert_eq!(a, b);
    assert_eq!(ca, cb);
    let other = TrainConfig { seed: 4, ..cfg.clone() };
    let mut m: ModelGraph<f64> = init_model(&s, 3, false).unwrap();
    train(&mut m, &data, &other, None).unwrap();
    assert_ne!(encode_checkpoint(&m).unwrap(), ca);
}

#[test]
fn separable_blobs_reach_99_percent() {
    let data = gen_blobs(2, 400, 2, 0.3).unwrap().with_split(2, 0.2);
    let mut m: ModelGraph<f64> = init_model(&spec(2, vec![block(16, 2)]), 2, false).unwrap();
    let cfg = TrainConfig {
        seed: 2,
        epochs: 50,
        lr: 5e-3,
        ..TrainConfig::default()
    };
    let log = train(&mut m, &data, &cfg, None).unwrap();
    assert!(log.last().unwrap().train_metric >= 0.99, "{:?}", log.last());
}

#[test]
fn tight_blobs_are_linearly_separable() {
    let data = gen_blobs(3, 200, 4, 1e-3).unwrap();
    let mut m: ModelGraph<f64> = init_model(&spec(2, vec![LayerSpec::Linear { out: 4 }]), 3, false).unwrap();
    let cfg = TrainConfig {
        seed: 3,
        epochs: 30,
        lr: 0.05,
        ..TrainConfig::default()
    };
    let log = train(&mut m, &data, &cfg, None).unwrap();
    assert_eq!(log.last().unwrap().train_metric, 1.0);
}

#[test]
fn strong_penalty_linearizes_every_regularized_block() {
    let data = gen_blobs(4, 400, 3, 0.5).unwrap().with_split(4, 0.2);
    let mut m: ModelGraph<f64> = init_model(&spec(2, vec![block(8, 8), block(8, 3)]), 4, false).unwrap();
    let cfg = TrainConfig {
        seed: 4,
        epochs: 30,
        lr: 5e-3,
        reg: RegConfig::new(5.0, 1.0).unwrap(),
        ..TrainConfig::default()
    };
    let log = train(&mut m, &data, &cfg, None).unwrap();
    for (name, a) in &log.last().unwrap().alphas {
        assert!((1.0 - a).abs() <= 0.05, "{name}: {a}");
    }
}

#[test]
fn schedule_applies_at_epoch_boundaries() {
    let data = gen_blobs(5, 100, 2, 0.5).unwrap().with_split(5, 0.2);
    let mut m: ModelGraph<f64> = init_model(&spec(2, vec![block(4, 2)]), 5, false).unwrap();
    let cfg = TrainConfig {
        seed: 5,
        epochs: 6,
        lr: 0.01,
        lr_schedule: vec![
            LrStep {
                epoch: 2,
                multiplier: 0.5,
            },
            LrStep {
                epoch: 4,
                multiplier: 0.1,
            },
        ],
        ..TrainConfig::default()
    };
    let log = train(&mut m, &data, &cfg, None).unwrap();
    let lrs: Vec<f64> = log.records.iter().map(|r| r.lr).collect();
    let expect = [0.01, 0.01, 0.005, 0.005, 0.0005, 0.0005];
    for (a, b) in lrs.iter().zip(expect) {
        assert!((a - b).abs() < 1e-15, "{lrs:?}");
    }
}

#[test]
fn divergence_restores_last_good_state() {
    let mut data = gen_regression_1d(6, 100, 0.1, Shape1d::Linear).unwrap();
    if let Targets::Values(v) = &mut data.targets {
        v.data_mut().iter_mut().for_each(|y| *y *= 1e150);
    }
    let mut m: ModelGraph<f64> = init_model(&spec(1, vec![block(4, 1)]), 6, false).unwrap();
    let before = m.clone();
    let cfg = TrainConfig {
        seed: 6,
        epochs: 5,
        lr: 0.1,
        ..TrainConfig::default()
    };
    let err = train(&mut m, &data, &cfg, None).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }), "{err}");
    assert_eq!(err.category(), "diverged");
    // the first epoch never completed, so the initial model is kept
    assert_eq!(m, before);
}

fn three_block_setup() -> (Dataset, ModelGraph<f64>) {
    let data = gen_blobs(8, 600, 3, 0.5).unwrap().with_split(8, 0.2);
    let mut m: ModelGraph<f64> =
        init_model(&spec(2, vec![block(12, 8), block(12, 8), block(12, 3)]), 8, false).unwrap();
    let cfg = TrainConfig {
        seed: 8,
        epochs: 10,
        lr: 0.01,
        reg: RegConfig::new(0.0, 1.0).unwrap(),
        ..TrainConfig::default()
    };
    train(&mut m, &data, &cfg, None).unwrap();
    (data, m)
}

#[test]
fn unit_slopes_collapse_without_training() {
    let (data, mut m) = three_block_setup();
    for name in m.block_names() {
        if let Some(Layer::Block(b)) = m.layer_mut(&name) {
            b.act.set_alpha(1.0);
        }
    }
    let out = sequential_collapse(&m, &data, &TrainConfig::default(), None).unwrap();
    assert!(out.stages.iter().all(|s| s.epochs == 0 && s.collapse.collapsed));
    assert!(out.log.records.is_empty());
    assert!(out
        .stages
        .iter()
        .all(|s| s.max_output_diff < 1e-9 && s.pathwise_bound_holds));
}

#[test]
fn zero_tolerance_collapses_nothing() {
    let (data, m) = three_block_setup();
    let cfg = TrainConfig {
        tau: 0.0,
        max_epochs_per_layer: 1,
        ..TrainConfig::default()
    };
    let out = sequential_collapse(&m, &data, &cfg, None).unwrap();
    assert!(out.stages.iter().all(|s| !s.collapse.collapsed));
    assert_eq!(out.model.param_count(), m.param_count());
}

#[test]
fn stages_respect_budgets_and_bounds() {
    let (data, m) = three_block_setup();
    let cfg = TrainConfig {
        seed: 9,
        lr: 5e-3,
        reg: RegConfig::new(1.0, 1.0).unwrap(),
        max_epochs_per_layer: 4,
        total_epoch_cap: 10,
        ..TrainConfig::default()
    };
    let out = sequential_collapse(&m, &data, &cfg, Some(&m)).unwrap();
    let epochs: Vec<usize> = out.stages.iter().map(|s| s.epochs).collect();
    assert!(
        epochs.iter().all(|&e| e <= 4) && epochs.iter().sum::<usize>() <= 10,
        "{epochs:?}"
    );
    // last block first
    let order: Vec<&str> = out.stages.iter().map(|s| s.block.as_str()).collect();
    assert_eq!(order, ["block2", "block1", "block0"]);
    let mut params = m.param_count();
    for s in &out.stages {
        assert!(s.params_after <= params);
        params = s.params_after;
        assert!(s.pathwise_bound_holds, "{s:?}");
    }
}

#[test]
fn sweep_matches_scripted_stages() {
    let (data, m) = three_block_setup();
    let cfg = TrainConfig {
        max_epochs_per_layer: 0,
        tau: 1.0,
        ..TrainConfig::default()
    };
    let rows = sensitivity_sweep(&m, &data, &cfg, None).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0].layers_collapsed, 0);
    assert_eq!(rows[0].params, m.param_count());
    // script the same thing by hand: collapse from the back, one at a time
    let mut scripted = m.clone();
    for (i, name) in ["block2", "block1", "block0"].iter().enumerate() {
        layercollapse::collapse::collapse_named(
            &mut scripted,
            name,
            &layercollapse::collapse::CollapseConfig::new(1.0).unwrap(),
        )
        .unwrap();
        let acc = evaluate_split(&scripted, &data, Split::Val).unwrap().unwrap().metric;
        assert_eq!(rows[i + 1].metric, Some(acc));
        assert_eq!(rows[i + 1].params, scripted.param_count());
        assert_eq!(rows[i + 1].layers_collapsed, i + 1);
    }
    assert!(rows.windows(2).all(|w| w[1].params <= w[0].params));
    let (c, _) = collapse_model(&m, &layercollapse::collapse::CollapseConfig::new(1.0).unwrap()).unwrap();
    assert_eq!(c.param_count(), rows[3].params);
}

#[test]
fn fig1_demo_properties() {
    let cfg = Fig1Config {
        epochs: 100,
        ..Fig1Config::default()
    };
    let out = demo_fig1(&cfg).unwrap();
    assert_eq!(out.settings.len(), 4);
    assert_eq!(out.points.len(), 48);
    assert!(out.points.iter().all(|p| p.fits.len() == 4));
    // the unit-slope fit is affine in x
    let lin = &out.models[2];
    let f = |x: f64| lin.infer(&Tensor::new(vec![1, 1], vec![x]).unwrap()).unwrap().data()[0];
    let (a, b) = (0.3, -0.7);
    assert!((f(a * 0.4 + b * -0.2) - (a * f(0.4) + b * f(-0.2) + (1.0 - a - b) * f(0.0))).abs() < 1e-6);
    assert!(out.points.windows(2).all(|w| w[0].x <= w[1].x));
}

/// Validation sets of a few dozen points are noisy, so the comparison is
/// on validation MSE summed over several seeds.
#[test]
fn linear_fit_beats_relu_on_noisy_linear_data() {
    let (mut lin, mut relu) = (0.0, 0.0);
    for seed in 0..4 {
        let cfg = Fig1Config {
            seed,
            shape: Shape1d::Linear,
            noise_std: 1.0,
            samples: 100,
            ..Fig1Config::default()
        };
        let out = demo_fig1(&cfg).unwrap();
        relu += out.settings.iter().find(|s| s.alpha == 0.0).unwrap().val_mse;
        lin += out.settings.iter().find(|s| s.alpha == 1.0).unwrap().val_mse;
    }
    assert!(lin <= relu, "{lin} vs {relu}");
}
