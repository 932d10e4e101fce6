//! Greedy post-hoc channel search on a trained model.
//!
//! Layer by layer, try zeroing each remaining channel on its own, keep the
//! removal with the smallest PSNR drop if that drop stays within the
//! threshold, and repeat; move to the next layer when nothing qualifies.
//! Channels are zeroed with temporary masks, never by editing weights.

use std::collections::BTreeMap;

use crate::abcm::Phase;
use crate::codec::{CodecModel, ForwardOptions, Side, SlotId, SlotMasks, MASKED_STAGES};
use crate::error::{Error, Result};
use crate::pruner::KeepPlan;
use crate::tensor::Tensor;
use crate::trainer::evaluate_tensors;

/// How masked layers are visited.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LayerOrder {
    /// Pairs by distance from the image, outermost pair first; the decoder
    /// layer of each pair goes first: `gs3, ga1, gs2, ga2, gs1, ga3`.
    #[default]
    DecoderFirst,
    /// Same pairing with the encoder layer first: `ga1, gs3, ga2, gs2, ga3, gs1`.
    EncoderFirst,
    /// Data-flow order: `ga1, ga2, ga3, gs1, gs2, gs3`.
    Forward,
}

impl LayerOrder {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerOrder::DecoderFirst => "decoder-first",
            LayerOrder::EncoderFirst => "encoder-first",
            LayerOrder::Forward => "forward",
        }
    }
}

impl std::str::FromStr for LayerOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decoder-first" => Ok(LayerOrder::DecoderFirst),
            "encoder-first" => Ok(LayerOrder::EncoderFirst),
            "forward" => Ok(LayerOrder::Forward),
            other => Err(Error::Config(format!("unknown layer order `{other}`"))),
        }
    }
}

/// Distance of a slot's activations from the image, 0 for the outermost.
fn depth(slot: SlotId) -> usize {
    match slot.side {
        Side::Analysis => slot.index,
        Side::Synthesis => MASKED_STAGES - 1 - slot.index,
    }
}

/// Sort `slots` into visiting order.
pub fn layer_order(slots: &[SlotId], order: LayerOrder) -> Vec<SlotId> {
    let mut out = slots.to_vec();
    out.sort();
    out.dedup();
    match order {
        LayerOrder::DecoderFirst => out.sort_by_key(|s| (depth(*s), s.side == Side::Analysis)),
        LayerOrder::EncoderFirst => out.sort_by_key(|s| (depth(*s), s.side == Side::Synthesis)),
        LayerOrder::Forward => {}
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    /// Largest tolerated PSNR drop, in percent of the baseline PSNR.
    pub threshold_pct: f64,
    pub order: LayerOrder,
    /// Layers to search; every masked position when `None`.
    pub slots: Option<Vec<SlotId>>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            threshold_pct: 1.0,
            order: LayerOrder::default(),
            slots: None,
        }
    }
}

/// One removal round: every candidate's drop and the channel taken, if any.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchStep {
    pub slot: SlotId,
    /// `(channel, cumulative drop %)` for each channel tried.
    pub candidates: Vec<(usize, f64)>,
    pub removed: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub slot: SlotId,
    pub channel: usize,
    /// Channels removed so far over all searchable channels.
    pub ratio: f64,
    pub drop_pct: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub baseline_psnr: f64,
    pub plan: KeepPlan,
    pub curve: Vec<CurvePoint>,
    pub log: Vec<SearchStep>,
    /// Forward evaluations of the whole set, baseline included.
    pub evaluations: usize,
    pub total_channels: usize,
}

impl SearchResult {
    pub fn pruning_ratio(&self) -> f64 {
        self.curve.last().map_or(0.0, |p| p.ratio)
    }

    pub fn final_drop_pct(&self) -> f64 {
        self.curve.last().map_or(0.0, |p| p.drop_pct)
    }
}

fn eval_psnr(model: &CodecModel, set: &[Tensor], masks: &SlotMasks) -> Result<f64> {
    let opts = ForwardOptions {
        phase: Phase::Eval,
        masking: true,
        extra_masks: Some(masks),
    };
    Ok(evaluate_tensors(model, set, &opts)?.psnr)
}

/// Run the search. A layer is never reduced below one channel.
pub fn greedy_search(model: &CodecModel, eval_set: &[Tensor], cfg: &SearchConfig) -> Result<SearchResult> {
    if !(cfg.threshold_pct >= 0.0) {
        return Err(Error::Config(format!("threshold must be >= 0, got {}", cfg.threshold_pct)));
    }
    if eval_set.is_empty() {
        return Err(Error::Config("greedy search needs a non-empty evaluation set".into()));
    }
    let slots = cfg.slots.clone().unwrap_or_else(SlotId::all);
    let order = layer_order(&slots, cfg.order);
    let config = model.config();
    let mut masks: SlotMasks = SlotId::all()
        .into_iter()
        .map(|s| (s, vec![1.0; config.slot_width(s)]))
        .collect();
    let total: usize = order.iter().map(|s| config.slot_width(*s)).sum();
    let baseline = eval_psnr(model, eval_set, &masks)?;
    let mut evaluations = 1;
    let drop = |p: f64| (baseline - p) / baseline * 100.0;

    let mut curve = Vec::new();
    let mut log = Vec::new();
    for &slot in &order {
        loop {
            let alive: Vec<usize> = masks[&slot]
                .iter()
                .enumerate()
                .filter_map(|(c, &m)| (m == 1.0).then_some(c))
                .collect();
            if alive.len() <= 1 {
                break;
            }
            let mut candidates = Vec::with_capacity(alive.len());
            for &c in &alive {
                masks.get_mut(&slot).expect("slot")[c] = 0.0;
                let p = eval_psnr(model, eval_set, &masks)?;
                evaluations += 1;
                masks.get_mut(&slot).expect("slot")[c] = 1.0;
                candidates.push((c, drop(p)));
            }
            // first minimum wins, so ties go to the lowest index
            let (best_c, best_d) = candidates
                .iter()
                .copied()
                .fold(None::<(usize, f64)>, |acc, (c, d)| match acc {
                    Some((_, bd)) if !(d < bd) => acc,
                    _ => Some((c, d)),
                })
                .expect("at least two candidates");
            let take = best_d <= cfg.threshold_pct;
            log.push(SearchStep {
                slot,
                candidates,
                removed: take.then_some(best_c),
            });
            if !take {
                break;
            }
            masks.get_mut(&slot).expect("slot")[best_c] = 0.0;
            curve.push(CurvePoint {
                slot,
                channel: best_c,
                ratio: (curve.len() + 1) as f64 / total as f64,
                drop_pct: best_d,
            });
        }
    }
    let keep: BTreeMap<SlotId, Vec<usize>> = masks
        .iter()
        .map(|(s, m)| (*s, m.iter().enumerate().filter_map(|(c, &v)| (v == 1.0).then_some(c)).collect()))
        .collect();
    Ok(SearchResult {
        baseline_psnr: baseline,
        plan: KeepPlan::new(config, keep)?,
        curve,
        log,
        evaluations,
        total_channels: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[SlotId]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn default_order_pairs_outside_in_decoder_first() {
        let order = layer_order(&SlotId::all(), LayerOrder::DecoderFirst);
        assert_eq!(names(&order), ["gs3", "ga1", "gs2", "ga2", "gs1", "ga3"]);
        let order = layer_order(&SlotId::all(), LayerOrder::EncoderFirst);
        assert_eq!(names(&order), ["ga1", "gs3", "ga2", "gs2", "ga3", "gs1"]);
        let order = layer_order(&SlotId::all(), LayerOrder::Forward);
        assert_eq!(names(&order), ["ga1", "ga2", "ga3", "gs1", "gs2", "gs3"]);
    }

    #[test]
    fn order_is_a_permutation() {
        let one = [SlotId::new(Side::Synthesis, 1)];
        assert_eq!(layer_order(&one, LayerOrder::DecoderFirst), one);
        let dup = [one[0], one[0], SlotId::new(Side::Analysis, 0)];
        assert_eq!(layer_order(&dup, LayerOrder::DecoderFirst).len(), 2);
    }

    #[test]
    fn order_names_parse() {
        for o in [LayerOrder::DecoderFirst, LayerOrder::EncoderFirst, LayerOrder::Forward] {
            assert_eq!(o.as_str().parse::<LayerOrder>().unwrap(), o);
        }
    }
}
