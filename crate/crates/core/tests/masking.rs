mod common;

use abcm_core::abcm::{
    apply_mask, effective_channels, gate, gate_stochastic, sparsity_term, GateConfig, GateMode, ImportanceVector, Phase,
};
use abcm_core::codec::{ChannelConfig, CodecModel, SlotId};
use abcm_core::tensor::ops;
use abcm_core::{RngState, Tensor};
use proptest::prelude::*;

fn alpha_value() -> impl Strategy<Value = f32> {
    prop_oneof![
        Just(0.0f32),
        Just(-0.0f32),
        Just(f32::MAX),
        Just(f32::MIN),
        Just(f32::MIN_POSITIVE),
        Just(-f32::MIN_POSITIVE),
        -1e30f32..1e30,
        -2.0f32..2.0,
    ]
}

fn param(v: Vec<f32>) -> Tensor {
    Tensor::param(&[v.len()], v).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn deterministic_gate_is_binary(alpha in prop::collection::vec(alpha_value(), 1..32), eps in 0.1f32..100.0) {
        let cfg = GateConfig { epsilon: eps, ..GateConfig::default() };
        let g = gate(&param(alpha.clone()), &cfg);
        for (a, m) in alpha.iter().zip(g.data()) {
            prop_assert!(*m == 0.0 || *m == 1.0);
            prop_assert_eq!(*m == 1.0, *a >= 0.0);
        }
    }

    #[test]
    fn masking_twice_equals_masking_once(
        seed in any::<u64>(),
        bits in prop::collection::vec(any::<bool>(), 1..8),
        b in 1usize..3,
        h in 1usize..6,
    ) {
        let c = bits.len();
        let mut rng = RngState::new(seed);
        let x = common::random_tensor(&[b, c, h, h], -5.0, 5.0, &mut rng);
        let m = Tensor::new(&[c], bits.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect()).unwrap();
        let once = apply_mask(&x, &m).unwrap();
        let twice = apply_mask(&once, &m).unwrap();
        prop_assert_eq!(once.data(), twice.data());
    }

    #[test]
    fn sharp_surrogate_leaves_forward_alone(alpha in prop::collection::vec(0.5f32..20.0, 1..16), signs in prop::collection::vec(any::<bool>(), 16)) {
        let a: Vec<f32> = alpha.iter().zip(&signs).map(|(v, &s)| if s { -v } else { *v }).collect();
        let sharp = GateConfig { epsilon: 50.0, ..GateConfig::default() };
        let t = param(a.clone());
        let g = gate(&t, &sharp);
        let mild = gate(&param(a), &GateConfig::default());
        prop_assert_eq!(g.data(), mild.data());
        ops::sum(&g).backward().unwrap();
        for d in t.grad().unwrap() {
            prop_assert!(d.abs() < 1e-8, "{d}");
        }
    }

    #[test]
    fn sparsity_pull_grows_with_gamma(alpha in prop::collection::vec(1e-3f32..3.0, 1..12), eps in 0.5f32..4.0) {
        let cfg = GateConfig { epsilon: eps, ..GateConfig::default() };
        let c = alpha.len();
        let mut last = vec![0.0f32; c];
        for gamma in [1e-3f32, 1e-2, 0.1, 1.0] {
            let t = param(alpha.clone());
            ops::mul_scalar(&sparsity_term(&gate(&t, &cfg)), gamma).backward().unwrap();
            let grad = t.grad().unwrap();
            for ch in 0..c {
                // the descent step -grad points down for every positive alpha
                let s = 1.0 / (1.0 + (-(eps * alpha[ch]) as f64).exp());
                let expect = gamma as f64 / c as f64 * eps as f64 * s * (1.0 - s);
                prop_assert!(grad[ch] > last[ch], "gamma {gamma} channel {ch}");
                prop_assert!((grad[ch] as f64 - expect).abs() <= 1e-5 * expect);
            }
            last = grad;
        }
    }

    #[test]
    fn deterministic_mask_ignores_phase(alpha in prop::collection::vec(-2.0f32..2.0, 1..16), seed in any::<u64>()) {
        let iv = ImportanceVector::from_param(param(alpha)).unwrap();
        let cfg = GateConfig::default();
        let train = iv.mask(&cfg, Phase::Train, &mut RngState::new(seed)).unwrap();
        let eval = iv.mask(&cfg, Phase::Eval, &mut RngState::new(seed ^ 1)).unwrap();
        prop_assert_eq!(train.data(), eval.data());
    }
}

#[test]
fn sparsity_matches_a_recount() {
    let mut rng = RngState::new(2024);
    for _ in 0..100 {
        let c = 1 + rng.below(64);
        let alpha: Vec<f32> = (0..c).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let count = alpha.iter().filter(|&&a| a >= 0.0).count();
        let s = sparsity_term(&gate(&param(alpha), &GateConfig::default()));
        assert_eq!(s.item(), count as f32 / c as f32);
    }
}

#[test]
fn confident_stochastic_gate_samples_near_one() {
    let cfg = GateConfig { mode: GateMode::Stochastic, ..GateConfig::default() };
    let logits = Tensor::new(&[2, 1], vec![0.0, 10.0]).unwrap();
    let high = (0..1000u64)
        .filter(|&seed| {
            let s = gate_stochastic(&logits, &cfg, Phase::Train, &mut RngState::new(seed)).unwrap();
            s.data()[0] >= 0.99
        })
        .count();
    assert!(high >= 990, "{high} of 1000");
}

#[test]
fn mean_ratio_is_the_mean_of_layer_ratios() {
    let mut rng = RngState::new(6);
    let mut model = CodecModel::new(ChannelConfig::desk(), Some(GateConfig::default()), &mut rng).unwrap();
    assert_eq!(effective_channels(&model).mean_ratio, 1.0);
    common::random_gates(&mut model, 0.5, &mut rng);
    let by_hand: f64 = SlotId::all()
        .iter()
        .map(|&s| {
            let a = model.masks().find(|(slot, _)| *slot == s).unwrap().1.param().data().to_vec();
            a.iter().filter(|&&v| v >= 0.0).count() as f64 / a.len() as f64
        })
        .sum::<f64>()
        / 6.0;
    assert_eq!(effective_channels(&model).mean_ratio, by_hand);

    let slot = SlotId::all()[4];
    let c = model.config().slot_width(slot);
    *model.mask_mut(slot).unwrap() = ImportanceVector::from_param(param(vec![-1.0; c])).unwrap();
    let usage = effective_channels(&model);
    assert_eq!(usage.layers.iter().find(|l| l.slot == slot).unwrap().kept, 0);
}
