use crate::decomposer::{Linear, SplitFfnWeights};
use crate::linalg::Matrix;
use crate::model::{ComponentKind, ModelConfig, ModelWeights};

/// A model whose projections may be factored and whose FFNs may be split
/// into a dense prime path and a compressed marginal path.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedModel {
    pub config: ModelConfig,
    pub embedding: Matrix,
    pub layers: Vec<CompressedLayer>,
    pub final_norm: Vec<f64>,
    pub head: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedLayer {
    pub attn_norm: Vec<f64>,
    pub ffn_norm: Vec<f64>,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ffn: CompressedFfn,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CompressedFfn {
    Dense { gate: Linear, up: Linear, down: Linear },
    Split(SplitFfnWeights),
}

impl CompressedLayer {
    /// Panics for the FFN kinds, which live in `ffn`.
    pub fn attention(&self, kind: ComponentKind) -> &Linear {
        match kind {
            ComponentKind::Q => &self.q,
            ComponentKind::K => &self.k,
            ComponentKind::V => &self.v,
            ComponentKind::O => &self.o,
            other => panic!("{other} is not an attention projection"),
        }
    }

    pub fn attention_mut(&mut self, kind: ComponentKind) -> &mut Linear {
        match kind {
            ComponentKind::Q => &mut self.q,
            ComponentKind::K => &mut self.k,
            ComponentKind::V => &mut self.v,
            ComponentKind::O => &mut self.o,
            other => panic!("{other} is not an attention projection"),
        }
    }

    pub fn param_count(&self) -> usize {
        let attn: usize = ComponentKind::ATTENTION
            .iter()
            .map(|k| self.attention(*k).param_count())
            .sum();
        let ffn = match &self.ffn {
            CompressedFfn::Dense { gate, up, down } => gate.param_count() + up.param_count() + down.param_count(),
            CompressedFfn::Split(s) => s.param_count(),
        };
        attn + ffn + self.attn_norm.len() + self.ffn_norm.len()
    }
}

impl CompressedModel {
    /// Every projection dense, no FFN split; computes exactly what the
    /// source model computes.
    pub fn from_dense(w: &ModelWeights) -> Self {
        let layers = w
            .layers
            .iter()
            .map(|l| CompressedLayer {
                attn_norm: l.attn_norm.clone(),
                ffn_norm: l.ffn_norm.clone(),
                q: Linear::Dense(l.q.clone()),
                k: Linear::Dense(l.k.clone()),
                v: Linear::Dense(l.v.clone()),
                o: Linear::Dense(l.o.clone()),
                ffn: CompressedFfn::Dense {
                    gate: Linear::Dense(l.gate.clone()),
                    up: Linear::Dense(l.up.clone()),
                    down: Linear::Dense(l.down.clone()),
                },
            })
            .collect();
        CompressedModel {
            config: w.config.clone(),
            embedding: w.embedding.clone(),
            layers,
            final_norm: w.final_norm.clone(),
            head: w.head.clone(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.embedding.data().len()
            + self.head.data().len()
            + self.final_norm.len()
            + self.layers.iter().map(|l| l.param_count()).sum::<usize>()
    }
}
