//! Whitened low-rank decomposition of projection weights and the split of
//! FFN neurons into a dense prime path and a factored marginal path.

mod attention;
mod factors;
mod partition;
mod split;
mod whiten;

use std::fmt;

use crate::linalg::DampingPolicy;
use crate::model::{ComponentId, ComponentKind};

pub(crate) use attention::apply_attention_factors;
pub use attention::{attention_decompositions, decompose_attention, AttentionRecord, Exclusions};
pub use factors::{Linear, LowRankFactors};
pub use partition::{partition_neurons, NeuronPartition, SelectionRule};
pub use split::{
    assemble_split, decompose_marginal, split_ffn, FfnRanks, MarginalBlocks, MarginalDecomposition, PrimeBlocks,
    SplitFfnWeights,
};
pub use whiten::{data_weighted_loss_sq, factor_or_dense, truncate, whiten_and_decompose, WhitenedSvd};

/// Which part of a component a decomposition covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BlockTag {
    Whole,
    /// The marginal-neuron sub-block of an FFN projection.
    Marginal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockId {
    pub component: ComponentId,
    pub tag: BlockTag,
}

impl BlockId {
    pub fn whole(layer: usize, kind: ComponentKind) -> Self {
        BlockId {
            component: ComponentId::new(layer, kind),
            tag: BlockTag::Whole,
        }
    }

    pub fn marginal(layer: usize, kind: ComponentKind) -> Self {
        BlockId {
            component: ComponentId::new(layer, kind),
            tag: BlockTag::Marginal,
        }
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.tag {
            BlockTag::Whole => write!(f, "{}", self.component),
            BlockTag::Marginal => write!(f, "{}.mn", self.component),
        }
    }
}

/// Knobs shared by every decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct DecomposeOptions {
    pub damping: DampingPolicy,
    /// Keep a block dense whenever its factors would not be smaller.
    /// Disabling this forces factorization, which exactness checks use.
    pub dense_fallback: bool,
}

impl Default for DecomposeOptions {
    fn default() -> Self {
        DecomposeOptions {
            damping: DampingPolicy::default(),
            dense_fallback: true,
        }
    }
}

/// `(d_in + d_out)·k < d_in·d_out`
pub fn factoring_saves(d_in: usize, d_out: usize, k: usize) -> bool {
    (d_in + d_out) * k < d_in * d_out
}
