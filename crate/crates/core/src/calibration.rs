//! Activation statistics gathered by running calibration text through a
//! dense model: input Grams for whitening and per-neuron energies of the
//! FFN intermediate activation.

use crate::error::{Result, SlimError};
use crate::linalg::Matrix;
use crate::model::{forward, ComponentId, ComponentKind, ModelWeights, Token};

/// Accumulators for one block.
///
/// q, k and v read the same normed stream, as do gate and up, so their
/// Grams are stored once per input site.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    /// `Σ xᵀx` of the q/k/v input, `d_model × d_model`.
    pub attn_gram: Matrix,
    /// `Σ xᵀx` of the o input, `d_model × d_model`.
    pub o_gram: Matrix,
    /// `Σ xᵀx` of the gate/up input, `d_model × d_model`.
    pub ffn_gram: Matrix,
    /// `Σ hᵀh` of the down input, `d_ff × d_ff`.
    pub h_gram: Matrix,
    /// `Σ_t h_{t,i}²` for every intermediate neuron `i`.
    pub neuron_sq_norm: Vec<f64>,
}

impl LayerStats {
    fn zeros(d_model: usize, d_ff: usize) -> Self {
        LayerStats {
            attn_gram: Matrix::zeros(d_model, d_model),
            o_gram: Matrix::zeros(d_model, d_model),
            ffn_gram: Matrix::zeros(d_model, d_model),
            h_gram: Matrix::zeros(d_ff, d_ff),
            neuron_sq_norm: vec![0.0; d_ff],
        }
    }

    pub fn gram(&self, kind: ComponentKind) -> &Matrix {
        match kind {
            ComponentKind::Q | ComponentKind::K | ComponentKind::V => &self.attn_gram,
            ComponentKind::O => &self.o_gram,
            ComponentKind::Gate | ComponentKind::Up => &self.ffn_gram,
            ComponentKind::Down => &self.h_gram,
        }
    }

    fn grams_mut(&mut self) -> [&mut Matrix; 4] {
        [
            &mut self.attn_gram,
            &mut self.o_gram,
            &mut self.ffn_gram,
            &mut self.h_gram,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibStats {
    pub layers: Vec<LayerStats>,
    /// Calibration tokens seen; shared by every component.
    pub token_count: usize,
    /// Hash of the dense model the statistics were collected on; zero when
    /// unknown.
    pub model_hash: u64,
}

impl CalibStats {
    pub fn empty(n_layers: usize, d_model: usize, d_ff: usize) -> Self {
        CalibStats {
            layers: (0..n_layers).map(|_| LayerStats::zeros(d_model, d_ff)).collect(),
            token_count: 0,
            model_hash: 0,
        }
    }

    pub fn gram(&self, id: ComponentId) -> &Matrix {
        self.layers[id.layer].gram(id.kind)
    }

    pub fn token_count(&self, _id: ComponentId) -> usize {
        self.token_count
    }

    /// Adds `other` in place. Grams and norms are plain sums, so merging the
    /// statistics of two corpora equals collecting on their union.
    pub fn merge(&mut self, other: &CalibStats) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(SlimError::shape(format!(
                "merging stats of {} and {} layers",
                self.layers.len(),
                other.layers.len()
            )));
        }
        if self.model_hash != other.model_hash {
            return Err(SlimError::Provenance {
                expected: self.model_hash,
                found: other.model_hash,
            });
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.attn_gram.add_assign(&b.attn_gram)?;
            a.o_gram.add_assign(&b.o_gram)?;
            a.ffn_gram.add_assign(&b.ffn_gram)?;
            a.h_gram.add_assign(&b.h_gram)?;
            for (x, y) in a.neuron_sq_norm.iter_mut().zip(&b.neuron_sq_norm) {
                *x += y;
            }
        }
        self.token_count += other.token_count;
        Ok(())
    }
}

/// Runs every sequence through `weights` and accumulates the statistics.
pub fn collect(weights: &ModelWeights, sequences: &[Vec<Token>]) -> Result<CalibStats> {
    if sequences.is_empty() || sequences.iter().all(|s| s.is_empty()) {
        return Err(SlimError::input("empty calibration corpus"));
    }
    let c = &weights.config;
    let mut stats = CalibStats::empty(c.n_layers, c.d_model, c.d_ff);
    for seq in sequences {
        if seq.is_empty() {
            continue;
        }
        let (_, trace) = forward(weights, seq, true)?;
        let trace = trace.expect("trace requested");
        for (ls, lt) in stats.layers.iter_mut().zip(&trace.layers) {
            lt.attn_input.tr_matmul_acc(&lt.attn_input, &mut ls.attn_gram)?;
            lt.o_input.tr_matmul_acc(&lt.o_input, &mut ls.o_gram)?;
            lt.ffn_input.tr_matmul_acc(&lt.ffn_input, &mut ls.ffn_gram)?;
            lt.h.tr_matmul_acc(&lt.h, &mut ls.h_gram)?;
            for r in 0..lt.h.rows() {
                for (n, v) in ls.neuron_sq_norm.iter_mut().zip(lt.h.row(r)) {
                    *n += v * v;
                }
            }
        }
        stats.token_count += seq.len();
    }
    for ls in &mut stats.layers {
        for g in ls.grams_mut() {
            symmetrize(g);
        }
    }
    Ok(stats)
}

/// Replaces `g` by `(g + gᵀ)/2`, removing summation-order asymmetry.
fn symmetrize(g: &mut Matrix) {
    let n = g.rows();
    for i in 0..n {
        for j in i + 1..n {
            let m = 0.5 * (g[(i, j)] + g[(j, i)]);
            g[(i, j)] = m;
            g[(j, i)] = m;
        }
    }
}

/// Neurons of one layer in descending energy order.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyProfile {
    /// `(neuron, squared norm)`, descending; ties keep ascending index.
    pub sorted: Vec<(usize, f64)>,
    /// `cumulative[i]` is the energy fraction of the first `i + 1` entries.
    pub cumulative: Vec<f64>,
    /// Set when every norm is zero; `cumulative` is then all zeros.
    pub all_zero: bool,
}

impl EnergyProfile {
    pub fn from_norms(norms: &[f64]) -> Result<Self> {
        if norms.is_empty() {
            return Err(SlimError::input("empty neuron profile"));
        }
        if norms.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SlimError::input("neuron norms must be finite and nonnegative"));
        }
        let mut sorted: Vec<(usize, f64)> = norms.iter().cloned().enumerate().collect();
        sorted.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite").then(a.0.cmp(&b.0)));
        let total: f64 = norms.iter().sum();
        let all_zero = total == 0.0;
        let mut cumulative = Vec::with_capacity(norms.len());
        let mut acc = 0.0;
        for &(_, v) in &sorted {
            acc += v;
            cumulative.push(if all_zero { 0.0 } else { (acc / total).min(1.0) });
        }
        if !all_zero {
            *cumulative.last_mut().expect("nonempty") = 1.0;
        }
        Ok(EnergyProfile {
            sorted,
            cumulative,
            all_zero,
        })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    /// Fewest leading neurons whose cumulative fraction reaches `threshold`.
    pub fn prefix_for_energy(&self, threshold: f64) -> usize {
        if self.all_zero {
            return self.len();
        }
        self.cumulative
            .iter()
            .position(|&c| c >= threshold)
            .map_or(self.len(), |i| i + 1)
    }
}

pub fn neuron_energy_profile(stats: &CalibStats, layer: usize) -> Result<EnergyProfile> {
    let ls = stats
        .layers
        .get(layer)
        .ok_or_else(|| SlimError::input(format!("layer {layer} outside 0..{}", stats.layers.len())))?;
    EnergyProfile::from_norms(&ls.neuron_sq_norm)
}
