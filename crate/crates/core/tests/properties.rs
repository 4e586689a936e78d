mod common;

use common::{rand_block, rand_normal};
use layercollapse::autograd::{prelu, Tape, Var};
use layercollapse::bound::verify_bound;
use layercollapse::collapse::{
    collapse_model, conv_gain, count_params, dense_gain, fold_block, CollapseConfig, ConvGainQuery, GainQuery,
};
use layercollapse::io::{decode_checkpoint, encode_checkpoint};
use layercollapse::loss::{reg_loss, select_regularized_layers, RegConfig};
use layercollapse::nn::{init_model, ArchSpec, Layer, LayerSpec, ModelGraph};
use layercollapse::rng::Rng;
use layercollapse::tensor::Tensor;
use proptest::prelude::*;

fn reg_value(alphas: &[f64], lc: f64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = alphas.iter().map(|&a| tape.constant(Tensor::scalar(a))).collect();
    let l = reg_loss(&mut tape, &vars, &RegConfig::new(lc, 1.0).unwrap()).unwrap();
    tape.value(l).item().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fusion_is_exact_at_unit_slope(seed in any::<u64>(), n_in in 1usize..6, h in 1usize..10, n_out in 1usize..6, bn in any::<bool>()) {
        let mut rng = Rng::seed(seed);
        let block = rand_block(&mut rng, n_in, h, n_out, bn, 1.0);
        let x = rand_normal(&mut rng, &[16, n_in]);
        let d = fold_block(&block).unwrap().infer(&x).unwrap().max_abs_diff(&block.infer(&x).unwrap()).unwrap();
        prop_assert!(d <= 1e-10);
    }

    /// At unit slope a block is affine, BatchNorm included:
    /// f(a x + b y) = a f(x) + b f(y) + (1 - a - b) f(0).
    #[test]
    fn unit_slope_block_is_affine(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0, bn in any::<bool>()) {
        let mut rng = Rng::seed(seed);
        let block = rand_block(&mut rng, 3, 5, 2, bn, 1.0);
        let x = rand_normal(&mut rng, &[1, 3]);
        let y = rand_normal(&mut rng, &[1, 3]);
        let mix = x.scale(a).add(&y.scale(b)).unwrap();
        let f = |t: &Tensor<f64>| block.infer(t).unwrap();
        let lhs = f(&mix);
        let rhs = f(&x).scale(a).add(&f(&y).scale(b)).unwrap().add(&f(&Tensor::zeros([1, 3])).scale(1.0 - a - b)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-9);
    }

    #[test]
    fn prelu_endpoints(x in -10.0f64..10.0) {
        prop_assert_eq!(prelu(x, 1.0), x);
        prop_assert_eq!(prelu(x, 0.0), x.max(0.0));
    }

    #[test]
    fn gain_sign_law(i in 1usize..200, h in 1usize..200, o in 1usize..200) {
        let g = dense_gain(&GainQuery::new(i, h, o).unwrap());
        prop_assert_eq!(g > 0.0, h * (i + o) > i * o);
        prop_assert_eq!(g == 0.0, h * (i + o) == i * o);
    }

    #[test]
    fn conv_gain_matches_weight_counts(k1 in 1usize..6, k2 in 1usize..6, ci in 1usize..16, ch in 1usize..16, co in 1usize..16) {
        let g = conv_gain(&ConvGainQuery::new(k1, k2, ci, ch, co).unwrap());
        let k = k1 + k2 - 1;
        let before = (k1 * k1 * ci * ch + k2 * k2 * ch * co) as f64;
        let after = (k * k * ci * co) as f64;
        prop_assert!((g - (1.0 - before / after)).abs() < 1e-12);
    }

    #[test]
    fn reg_is_permutation_invariant(mut alphas in prop::collection::vec(-1.0f64..2.0, 1..8), lc in 0.0f64..2.0, seed in any::<u64>()) {
        let before = reg_value(&alphas, lc);
        Rng::seed(seed).shuffle(&mut alphas);
        let after = reg_value(&alphas, lc);
        prop_assert!((before - after).abs() <= 1e-12 * before.max(1.0));
        let direct: f64 = alphas.iter().map(|a| lc * (1.0 - a).powi(2)).sum();
        prop_assert!((after - direct).abs() <= 1e-12 * direct.max(1.0));
    }

    /// Collapsing exactly the accepted blocks removes exactly their
    /// hidden-layer parameters.
    #[test]
    fn param_count_after_collapse(seed in any::<u64>(), alphas in prop::collection::vec(0.0f64..1.0, 1..5), bn in any::<bool>()) {
        let mut rng = Rng::seed(seed);
        let mut m: ModelGraph<f64> = ModelGraph::new([3]);
        let mut expected = 0i64;
        let cfg = CollapseConfig::default();
        for (i, &a) in alphas.iter().enumerate() {
            let block = rand_block(&mut rng, 3, 4, 3, bn, if a > 0.5 { 1.0 } else { a });
            if cfg.accepts(block.alpha()) {
                expected += block.param_count() as i64 - (3 * 3 + 3);
            }
            m.push(format!("b{i}"), Layer::Block(block)).unwrap();
        }
        let (c, reports) = collapse_model(&m, &cfg).unwrap();
        prop_assert_eq!(count_params(&m) as i64 - count_params(&c) as i64, expected);
        let removed: i64 = reports.iter().map(|r| r.params_removed()).sum();
        prop_assert_eq!(removed, expected);
    }

    #[test]
    fn violation_rate_grows_with_delta(seed in any::<u64>(), alpha in 0.0f64..1.0) {
        let mut rng = Rng::seed(seed);
        let block = rand_block(&mut rng, 4, 6, 2, false, alpha);
        let xs = rand_normal(&mut rng, &[400, 4]);
        let mut last = -1.0;
        for delta in [0.01, 0.05, 0.1, 0.2, 0.5] {
            let r = verify_bound(&block, &xs, delta, seed).unwrap();
            prop_assert!(r.violation_rate >= last);
            prop_assert!((0.0..=1.0).contains(&r.violation_rate));
            prop_assert!(r.c >= 0.0 && r.sigma_max >= 0.0);
            last = r.violation_rate;
        }
    }

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), hidden in 1usize..6, bn in any::<bool>(), retrofit in any::<bool>()) {
        let spec = ArchSpec {
            input: vec![3],
            layers: vec![
                LayerSpec::Block { hidden, out: 2, batch_norm: bn, dropout: 0.25 },
                LayerSpec::Prelu,
                LayerSpec::Linear { out: 2 },
            ],
        };
        let m: ModelGraph<f64> = init_model(&spec, seed, retrofit).unwrap();
        let bytes = encode_checkpoint(&m).unwrap();
        let back: ModelGraph<f64> = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        for ((n1, a), (n2, b)) in m.named_params().into_iter().zip(back.named_params()) {
            prop_assert_eq!(n1, n2);
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert_eq!(*x as f32 as f64, *y);
            }
        }
    }

    #[test]
    fn regularized_layers_are_a_suffix(n in 1usize..8, fraction in 0.0f64..=1.0) {
        let block = LayerSpec::Block { hidden: 2, out: 2, batch_norm: false, dropout: 0.0 };
        let spec = ArchSpec { input: vec![2], layers: vec![block; n] };
        let m: ModelGraph<f64> = init_model(&spec, 0, false).unwrap();
        let picked = select_regularized_layers(&m, fraction);
        let names = m.block_names();
        prop_assert_eq!(picked.len(), (fraction * n as f64 - 1e-9).ceil().max(0.0) as usize);
        prop_assert_eq!(&picked[..], &names[n - picked.len()..]);
    }
}
