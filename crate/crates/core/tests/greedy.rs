mod common;

use std::sync::OnceLock;

use abcm_core::codec::{ChannelConfig, CodecModel, Side, SlotId};
use abcm_core::greedy::{greedy_search, LayerOrder, SearchConfig, SearchResult};
use abcm_core::images::synthetic;
use abcm_core::trainer::{train, TrainConfig};
use abcm_core::{RngState, Tensor};

fn trained() -> &'static (CodecModel, Vec<Tensor>) {
    static MODEL: OnceLock<(CodecModel, Vec<Tensor>)> = OnceLock::new();
    MODEL.get_or_init(|| {
        let mut model = CodecModel::new(ChannelConfig::desk(), None, &mut RngState::new(2)).unwrap();
        let cfg = TrainConfig {
            steps: 300,
            batch_size: 2,
            patch: 32,
            ..TrainConfig::default()
        };
        train(&mut model, &synthetic(2, 8, 64), &[], &cfg).unwrap();
        (model, common::images(3, 2, 32))
    })
}

fn search(threshold_pct: f64) -> SearchResult {
    let (model, set) = trained();
    greedy_search(model, set, &SearchConfig { threshold_pct, ..SearchConfig::default() }).unwrap()
}

#[test]
fn dead_channel_goes_first() {
    let mut rng = RngState::new(9);
    let mut model = CodecModel::new(ChannelConfig::desk(), None, &mut rng).unwrap();
    common::randomize(&mut model, &mut rng);
    let dead = 2;
    let k2 = 25;
    // ga1 output filter and bias, and its input slice in every ga2 filter
    let st = &mut model.stages_mut(Side::Analysis)[0];
    let mut w = st.conv.weight.data().to_vec();
    w[dead * 3 * k2..(dead + 1) * 3 * k2].fill(0.0);
    st.conv.weight = Tensor::param(st.conv.weight.shape(), w).unwrap();
    let mut b = st.conv.bias.data().to_vec();
    b[dead] = 0.0;
    st.conv.bias = Tensor::param(&[8], b).unwrap();
    let next = &mut model.stages_mut(Side::Analysis)[1];
    let mut w = next.conv.weight.data().to_vec();
    for o in 0..8 {
        w[(o * 8 + dead) * k2..(o * 8 + dead + 1) * k2].fill(0.0);
    }
    next.conv.weight = Tensor::param(next.conv.weight.shape(), w).unwrap();

    let set = common::images(4, 2, 32);
    let cfg = SearchConfig {
        threshold_pct: 0.0,
        order: LayerOrder::DecoderFirst,
        slots: Some(vec![SlotId::new(Side::Analysis, 0)]),
    };
    let r = greedy_search(&model, &set, &cfg).unwrap();
    let step = &r.log[0];
    let dead_drop = step.candidates.iter().find(|c| c.0 == dead).unwrap().1;
    assert_eq!(dead_drop, 0.0);
    assert!(!r.plan.kept(SlotId::new(Side::Analysis, 0)).contains(&dead));
    assert!(r.curve.iter().any(|p| p.channel == dead && p.drop_pct <= 0.0));
}

#[test]
fn each_removal_is_the_cheapest_candidate() {
    let r = search(1.0);
    for step in &r.log {
        let best = step.candidates.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
        match step.removed {
            Some(c) => {
                let d = step.candidates.iter().find(|x| x.0 == c).unwrap().1;
                assert_eq!(d, best);
                let first = step.candidates.iter().find(|x| x.1 == best).unwrap().0;
                assert_eq!(c, first, "ties go to the lowest index");
                assert!(d <= 1.0);
            }
            None => assert!(best > 1.0),
        }
    }
}

#[test]
fn evaluation_count_stays_quadratic() {
    let r = search(2.0);
    let total = r.total_channels;
    let candidates: usize = r.log.iter().map(|s| s.candidates.len()).sum();
    assert_eq!(r.evaluations, 1 + candidates);
    assert!(r.log.iter().all(|s| s.candidates.len() <= total));
    assert!(r.log.iter().filter(|s| s.removed.is_some()).count() <= total);
    assert!(r.evaluations <= 1 + total * total);
    assert_eq!(r.curve.len(), r.log.iter().filter(|s| s.removed.is_some()).count());
}

#[test]
fn larger_threshold_prunes_at_least_as_much() {
    let ratios: Vec<f64> = [0.0, 0.5, 1.0, 2.0].iter().map(|&t| search(t).pruning_ratio()).collect();
    for w in ratios.windows(2) {
        assert!(w[1] >= w[0], "{ratios:?}");
    }
}

#[test]
fn curve_rows_grow_and_search_repeats() {
    let a = search(1.0);
    for w in a.curve.windows(2) {
        assert!(w[1].ratio > w[0].ratio);
    }
    for p in &a.curve {
        assert!(p.drop_pct <= 1.0);
    }
    assert_eq!(a, search(1.0));
    let kept: usize = a.plan.kept_total();
    assert_eq!(kept + a.curve.len(), a.total_channels);
}

#[test]
fn bad_inputs_are_rejected() {
    let (model, set) = trained();
    let neg = SearchConfig { threshold_pct: -1.0, ..SearchConfig::default() };
    assert!(greedy_search(model, set, &neg).is_err());
    assert!(greedy_search(model, &[], &SearchConfig::default()).is_err());
}
