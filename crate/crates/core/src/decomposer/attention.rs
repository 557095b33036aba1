use std::collections::BTreeMap;

use crate::calibration::CalibStats;
use crate::decomposer::{factor_or_dense, whiten_and_decompose, BlockId, DecomposeOptions, WhitenedSvd};
use crate::error::{Result, SlimError};
use crate::model::{ComponentId, ComponentKind, CompressedModel, ModelWeights};

/// Components that must stay dense.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exclusions {
    /// Kinds excluded in every layer.
    pub kinds: Vec<ComponentKind>,
    /// Number of leading layers left entirely dense.
    pub leading_layers: usize,
    /// Number of trailing layers left entirely dense.
    pub trailing_layers: usize,
    /// Individually excluded components.
    pub components: Vec<ComponentId>,
}

impl Default for Exclusions {
    /// v everywhere, plus the first two and last two layers.
    fn default() -> Self {
        Exclusions {
            kinds: vec![ComponentKind::V],
            leading_layers: 2,
            trailing_layers: 2,
            components: Vec::new(),
        }
    }
}

impl Exclusions {
    pub fn none() -> Self {
        Exclusions {
            kinds: Vec::new(),
            leading_layers: 0,
            trailing_layers: 0,
            components: Vec::new(),
        }
    }

    pub fn layer_excluded(&self, layer: usize, n_layers: usize) -> bool {
        layer < self.leading_layers || layer + self.trailing_layers >= n_layers
    }

    pub fn excludes(&self, id: ComponentId, n_layers: usize) -> bool {
        self.layer_excluded(id.layer, n_layers) || self.kinds.contains(&id.kind) || self.components.contains(&id)
    }
}

/// Outcome for one attention projection.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub id: ComponentId,
    pub rank: usize,
    /// `Σ_{i≥rank} σᵢ²` of the whitened spectrum.
    pub loss_sq: f64,
    pub fallback: bool,
}

/// Whitened SVDs of every attention projection named in `ranks`.
pub fn attention_decompositions(
    weights: &ModelWeights,
    stats: &CalibStats,
    ids: impl IntoIterator<Item = ComponentId>,
    options: &DecomposeOptions,
) -> Result<BTreeMap<ComponentId, WhitenedSvd>> {
    let mut out = BTreeMap::new();
    for id in ids {
        let mut ws = whiten_and_decompose(weights.component(id), stats.gram(id), &options.damping)?;
        ws.component = Some(BlockId::whole(id.layer, id.kind));
        out.insert(id, ws);
    }
    Ok(out)
}

/// Replaces each listed, non-excluded q/k/v/o of `model` by its rank-`k`
/// whitened truncation. Components absent from `ranks` are left as they are.
pub fn decompose_attention(
    model: &mut CompressedModel,
    weights: &ModelWeights,
    stats: &CalibStats,
    ranks: &BTreeMap<ComponentId, usize>,
    exclusions: &Exclusions,
    options: &DecomposeOptions,
) -> Result<Vec<AttentionRecord>> {
    let n_layers = weights.config.n_layers;
    let ids: Vec<ComponentId> = ranks
        .keys()
        .copied()
        .filter(|id| !exclusions.excludes(*id, n_layers))
        .collect();
    for id in &ids {
        if !id.kind.is_attention() {
            return Err(SlimError::input(format!("{id} is not an attention projection")));
        }
        if id.layer >= n_layers {
            return Err(SlimError::input(format!("{id} outside the model")));
        }
    }
    let decomps = attention_decompositions(weights, stats, ids.iter().copied(), options)?;
    apply_attention_factors(model, weights, &decomps, ranks, options.dense_fallback)
}

/// Truncates precomputed decompositions into `model`.
pub(crate) fn apply_attention_factors(
    model: &mut CompressedModel,
    weights: &ModelWeights,
    decomps: &BTreeMap<ComponentId, WhitenedSvd>,
    ranks: &BTreeMap<ComponentId, usize>,
    dense_fallback: bool,
) -> Result<Vec<AttentionRecord>> {
    let mut records = Vec::new();
    for (id, ws) in decomps {
        let Some(&k) = ranks.get(id) else { continue };
        let linear = factor_or_dense(weights.component(*id), ws, k, dense_fallback)?;
        let fallback = !linear.is_factored();
        records.push(AttentionRecord {
            id: *id,
            rank: k,
            loss_sq: if fallback { 0.0 } else { ws.truncation_loss_sq(k) },
            fallback,
        });
        *model.layers[id.layer].attention_mut(id.kind) = linear;
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::collect;
    use crate::model::{forward, forward_compressed, init_weights, ModelConfig};

    fn setup() -> (ModelWeights, CalibStats) {
        let c = ModelConfig {
            vocab_size: 23,
            d_model: 8,
            d_ff: 16,
            n_layers: 5,
            n_heads: 2,
            max_seq_len: 32,
            rms_norm: true,
        };
        let w = init_weights(&c, 3).unwrap();
        let seqs: Vec<Vec<u32>> = (0..3)
            .map(|s| (0..20).map(|i| ((i * 5 + s * 7 + 1) % 23) as u32).collect())
            .collect();
        let stats = collect(&w, &seqs).unwrap();
        (w, stats)
    }

    #[test]
    fn default_exclusions() {
        let e = Exclusions::default();
        assert!(e.excludes(ComponentId::new(0, ComponentKind::Q), 6));
        assert!(e.excludes(ComponentId::new(4, ComponentKind::Q), 6));
        assert!(!e.excludes(ComponentId::new(2, ComponentKind::Q), 6));
        assert!(e.excludes(ComponentId::new(2, ComponentKind::V), 6));
    }

    #[test]
    fn everything_excluded_leaves_model_unchanged() {
        let (w, stats) = setup();
        let mut m = CompressedModel::from_dense(&w);
        let ranks: BTreeMap<ComponentId, usize> = (0..5)
            .flat_map(|l| ComponentKind::ATTENTION.map(|k| (ComponentId::new(l, k), 2)))
            .collect();
        let ex = Exclusions {
            leading_layers: 5,
            ..Exclusions::default()
        };
        let rec = decompose_attention(&mut m, &w, &stats, &ranks, &ex, &Default::default()).unwrap();
        assert!(rec.is_empty());
        assert_eq!(m, CompressedModel::from_dense(&w));
    }

    #[test]
    fn full_rank_q_is_exact() {
        let (w, stats) = setup();
        let mut m = CompressedModel::from_dense(&w);
        let ranks = BTreeMap::from([(ComponentId::new(2, ComponentKind::Q), 8)]);
        let opts = DecomposeOptions {
            dense_fallback: false,
            ..Default::default()
        };
        decompose_attention(&mut m, &w, &stats, &ranks, &Exclusions::default(), &opts).unwrap();
        assert!(m.layers[2].q.is_factored());
        let toks = [1, 2, 3, 5, 8, 13];
        let a = forward(&w, &toks, false).unwrap().0;
        let b = forward_compressed(&m, &toks, false).unwrap().0;
        assert!(a.max_abs_diff(&b) < 1e-6);
    }

    #[test]
    fn v_is_never_factored_by_default() {
        let (w, stats) = setup();
        let mut m = CompressedModel::from_dense(&w);
        let ranks = BTreeMap::from([(ComponentId::new(2, ComponentKind::V), 1)]);
        decompose_attention(&mut m, &w, &stats, &ranks, &Exclusions::default(), &Default::default()).unwrap();
        assert!(!m.layers[2].v.is_factored());
    }
}
