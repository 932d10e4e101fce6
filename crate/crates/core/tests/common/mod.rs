#![allow(dead_code)]

use abcm_core::abcm::{GateConfig, GateMode, ImportanceVector};
use abcm_core::codec::{ChannelConfig, CodecModel, Side, SlotId, MASKED_STAGES};
use abcm_core::images::synthetic;
use abcm_core::{RngState, Tensor};

pub fn images(seed: u64, count: usize, size: usize) -> Vec<Tensor> {
    synthetic(seed, count, size)
        .iter()
        .map(|r| r.to_tensor(16).expect("large enough"))
        .collect()
}

pub fn random_tensor(shape: &[usize], lo: f32, hi: f32, rng: &mut RngState) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(shape, (0..n).map(|_| rng.uniform_in(lo, hi)).collect()).unwrap()
}

pub fn random_config(rng: &mut RngState) -> ChannelConfig {
    let mut w = || 1 + rng.below(8);
    let (a1, a2, a3, m) = (w(), w(), w(), w());
    let (s1, s2, s3) = (w(), w(), w());
    ChannelConfig::from_widths(vec![3, a1, a2, a3, m], vec![m, s1, s2, s3, 3]).unwrap()
}

/// Every parameter randomised, including biases and GDN couplings that a
/// fresh model leaves at their defaults.
pub fn randomize(model: &mut CodecModel, rng: &mut RngState) {
    for side in [Side::Analysis, Side::Synthesis] {
        for st in model.stages_mut(side).iter_mut() {
            let c = st.conv.bias.numel();
            st.conv.bias = random_tensor(&[c], -0.2, 0.2, rng);
            if let Some(g) = st.gdn.as_mut() {
                g.beta_raw = random_tensor(&[c], 0.5, 1.5, rng);
                g.gamma_raw = random_tensor(&[c, c], -0.6, 0.6, rng);
            }
        }
    }
    let m = model.entropy.channels();
    model.entropy.loc = random_tensor(&[m], -0.5, 0.5, rng);
    model.entropy.log_scale = random_tensor(&[m], -0.5, 1.0, rng);
}

/// Random importance values with roughly `off` of the channels gated off and
/// at least one channel kept per slot.
pub fn random_gates(model: &mut CodecModel, off: f32, rng: &mut RngState) {
    for slot in SlotId::all() {
        let mode = model.gate_config().mode;
        let Some(iv) = model.mask_mut(slot) else { continue };
        let c = iv.channels();
        let keep = rng.below(c);
        let mut on: Vec<bool> = (0..c).map(|i| i == keep || rng.uniform() >= off).collect();
        on[keep] = true;
        let param = match mode {
            GateMode::Deterministic => Tensor::param(
                &[c],
                on.iter().map(|&k| if k { rng.uniform_in(0.0, 1.0) } else { rng.uniform_in(-1.0, -1e-3) }).collect(),
            ),
            GateMode::Stochastic => {
                let off_logits: Vec<f32> = (0..c).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
                let mut v = off_logits.clone();
                v.extend(on.iter().zip(&off_logits).map(|(&k, &o)| if k { o + rng.uniform_in(0.0, 1.0) } else { o - rng.uniform_in(1e-3, 1.0) }));
                Tensor::param(&[2, c], v)
            }
        }
        .unwrap();
        *iv = ImportanceVector::from_param(param).unwrap();
    }
}

/// A masked model with random widths, weights and gates.
pub fn random_masked_model(seed: u64, mode: GateMode) -> CodecModel {
    let mut rng = RngState::new(seed);
    let config = random_config(&mut rng);
    let gate = GateConfig { mode, ..GateConfig::default() };
    let mut model = CodecModel::new(config, Some(gate), &mut rng).unwrap();
    randomize(&mut model, &mut rng);
    let off = rng.uniform_in(0.0, 0.8);
    random_gates(&mut model, off, &mut rng);
    model
}

pub fn masked_slot_count() -> usize {
    2 * MASKED_STAGES
}
