use crate::calibration::LayerStats;
use crate::decomposer::{
    factor_or_dense, whiten_and_decompose, BlockId, DecomposeOptions, Linear, NeuronPartition, WhitenedSvd,
};
use crate::error::{Result, SlimError};
use crate::linalg::Matrix;
use crate::model::forward::gated;
use crate::model::{ComponentKind, LayerWeights};

/// Truncation ranks of the three marginal blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FfnRanks {
    pub gate: usize,
    pub up: usize,
    pub down: usize,
}

impl FfnRanks {
    /// Gate and up at the same rank, as they read the same input.
    pub fn shared_input(k_in: usize, k_down: usize) -> Self {
        FfnRanks {
            gate: k_in,
            up: k_in,
            down: k_down,
        }
    }
}

/// Verbatim prime columns of gate/up and rows of down.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimeBlocks {
    pub gate: Matrix,
    pub up: Matrix,
    pub down: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginalBlocks {
    pub gate: Linear,
    pub up: Linear,
    pub down: Linear,
}

/// An FFN evaluated as the sum of a dense prime path and a (possibly
/// factored) marginal path.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitFfnWeights {
    pub partition: NeuronPartition,
    pub prime: Option<PrimeBlocks>,
    pub marginal: Option<MarginalBlocks>,
    pub d_model: usize,
}

impl SplitFfnWeights {
    pub fn param_count(&self) -> usize {
        let p = self
            .prime
            .as_ref()
            .map_or(0, |p| p.gate.data().len() + p.up.data().len() + p.down.data().len());
        let m = self
            .marginal
            .as_ref()
            .map_or(0, |m| m.gate.param_count() + m.up.param_count() + m.down.param_count());
        p + m
    }

    /// Whether each marginal block (gate, up, down) was kept dense.
    pub fn marginal_fallback(&self) -> Option<[bool; 3]> {
        self.marginal
            .as_ref()
            .map(|m| [!m.gate.is_factored(), !m.up.is_factored(), !m.down.is_factored()])
    }

    /// FFN output for normed input `x`; optionally the intermediate
    /// activation scattered back to the original neuron order.
    pub fn forward(&self, x: &Matrix, want_h: bool) -> Result<(Matrix, Option<Matrix>)> {
        let t = x.rows();
        let mut out = Matrix::zeros(t, self.d_model);
        let mut h_full = want_h.then(|| Matrix::zeros(t, self.partition.d_ff()));
        if let Some(p) = &self.prime {
            let h = gated(&x.matmul(&p.gate)?, &x.matmul(&p.up)?);
            out.add_assign(&h.matmul(&p.down)?)?;
            if let Some(full) = &mut h_full {
                scatter(&h, &self.partition.prime, full);
            }
        }
        if let Some(m) = &self.marginal {
            let h = gated(&m.gate.apply(x)?, &m.up.apply(x)?);
            out.add_assign(&m.down.apply(&h)?)?;
            if let Some(full) = &mut h_full {
                scatter(&h, &self.partition.marginal, full);
            }
        }
        Ok((out, h_full))
    }
}

fn scatter(src: &Matrix, idx: &[usize], dst: &mut Matrix) {
    for r in 0..src.rows() {
        let s = src.row(r);
        let d = dst.row_mut(r);
        for (v, &c) in s.iter().zip(idx) {
            d[c] = *v;
        }
    }
}

/// Whitened SVDs of the three marginal sub-blocks of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalDecomposition {
    pub gate: WhitenedSvd,
    pub up: WhitenedSvd,
    pub down: WhitenedSvd,
}

impl MarginalDecomposition {
    pub fn block(&self, kind: ComponentKind) -> &WhitenedSvd {
        match kind {
            ComponentKind::Gate => &self.gate,
            ComponentKind::Up => &self.up,
            ComponentKind::Down => &self.down,
            other => panic!("{other} is not an FFN projection"),
        }
    }
}

/// Decomposes the marginal blocks; `None` when every neuron is prime.
///
/// Gate and up are whitened by the layer-input Gram. Down is whitened by
/// the marginal principal sub-block of the intermediate Gram, factored
/// afresh.
pub fn decompose_marginal(
    layer: &LayerWeights,
    stats: &LayerStats,
    partition: &NeuronPartition,
    options: &DecomposeOptions,
) -> Result<Option<MarginalDecomposition>> {
    check_partition(layer, partition)?;
    let mn = &partition.marginal;
    if mn.is_empty() {
        return Ok(None);
    }
    let l = partition.layer;
    let gate_w = layer.gate.select_columns(mn).expect("nonempty");
    let up_w = layer.up.select_columns(mn).expect("nonempty");
    let down_w = layer.down.select_rows(mn).expect("nonempty");
    let sub_gram = stats.h_gram.select_principal(mn).expect("nonempty");

    let mut gate = whiten_and_decompose(&gate_w, &stats.ffn_gram, &options.damping)?;
    let mut up = whiten_and_decompose(&up_w, &stats.ffn_gram, &options.damping)?;
    let mut down = whiten_and_decompose(&down_w, &sub_gram, &options.damping)?;
    gate.component = Some(BlockId::marginal(l, ComponentKind::Gate));
    up.component = Some(BlockId::marginal(l, ComponentKind::Up));
    down.component = Some(BlockId::marginal(l, ComponentKind::Down));
    Ok(Some(MarginalDecomposition { gate, up, down }))
}

/// Builds the split FFN from precomputed marginal decompositions.
pub fn assemble_split(
    layer: &LayerWeights,
    partition: &NeuronPartition,
    decomposition: Option<&MarginalDecomposition>,
    ranks: FfnRanks,
    dense_fallback: bool,
) -> Result<SplitFfnWeights> {
    check_partition(layer, partition)?;
    let pn = &partition.prime;
    let mn = &partition.marginal;
    let prime = (!pn.is_empty()).then(|| PrimeBlocks {
        gate: layer.gate.select_columns(pn).expect("nonempty"),
        up: layer.up.select_columns(pn).expect("nonempty"),
        down: layer.down.select_rows(pn).expect("nonempty"),
    });
    let marginal = if mn.is_empty() {
        None
    } else {
        let d = decomposition.ok_or_else(|| {
            SlimError::input(format!(
                "layer {} has marginal neurons but no decomposition",
                partition.layer
            ))
        })?;
        let gate_w = layer.gate.select_columns(mn).expect("nonempty");
        let up_w = layer.up.select_columns(mn).expect("nonempty");
        let down_w = layer.down.select_rows(mn).expect("nonempty");
        Some(MarginalBlocks {
            gate: factor_or_dense(&gate_w, &d.gate, ranks.gate, dense_fallback)?,
            up: factor_or_dense(&up_w, &d.up, ranks.up, dense_fallback)?,
            down: factor_or_dense(&down_w, &d.down, ranks.down, dense_fallback)?,
        })
    };
    Ok(SplitFfnWeights {
        partition: partition.clone(),
        prime,
        marginal,
        d_model: layer.gate.rows(),
    })
}

/// Splits one FFN by `partition` and truncates its marginal blocks.
pub fn split_ffn(
    layer: &LayerWeights,
    stats: &LayerStats,
    partition: &NeuronPartition,
    ranks: FfnRanks,
    options: &DecomposeOptions,
) -> Result<SplitFfnWeights> {
    let d = decompose_marginal(layer, stats, partition, options)?;
    assemble_split(layer, partition, d.as_ref(), ranks, options.dense_fallback)
}

fn check_partition(layer: &LayerWeights, partition: &NeuronPartition) -> Result<()> {
    let d_ff = layer.gate.cols();
    if partition.d_ff() != d_ff {
        return Err(SlimError::shape(format!(
            "partition covers {} neurons, layer has {d_ff}",
            partition.d_ff()
        )));
    }
    Ok(())
}
