//! On-disk formats for dense models, calibration statistics and compressed
//! models, all carried by [`TensorFile`].

mod config;
mod manifest;
mod tensor_file;

use std::path::Path;

pub use config::{CalibrationSpec, PipelineConfig};
pub use manifest::{ComponentRecord, CompressionManifest, RecordEntry};
pub use tensor_file::{fnv1a, TensorFile, ALIGN, FORMAT_VERSION, MAGIC};

use crate::calibration::{CalibStats, LayerStats};
use crate::decomposer::{
    Linear, LowRankFactors, MarginalBlocks, NeuronPartition, PrimeBlocks, SelectionRule, SplitFfnWeights,
};
use crate::error::{Result, SlimError};
use crate::linalg::Matrix;
use crate::model::{
    ComponentKind, CompressedFfn, CompressedLayer, CompressedModel, LayerWeights, ModelConfig, ModelWeights,
};

pub const DENSE_KIND: &str = "dense-model";
pub const COMPRESSED_KIND: &str = "compressed-model";
pub const STATS_KIND: &str = "calib-stats";

/// Tolerance for the stored versus recomputed achieved ratio.
pub const RATIO_TOLERANCE: f64 = 1e-6;

fn push_config(tf: &mut TensorFile, c: &ModelConfig) {
    tf.push_meta("vocab_size", c.vocab_size);
    tf.push_meta("d_model", c.d_model);
    tf.push_meta("d_ff", c.d_ff);
    tf.push_meta("n_layers", c.n_layers);
    tf.push_meta("n_heads", c.n_heads);
    tf.push_meta("max_seq_len", c.max_seq_len);
    tf.push_meta("rms_norm", c.rms_norm);
}

fn read_config(tf: &TensorFile) -> Result<ModelConfig> {
    let c = ModelConfig {
        vocab_size: tf.parse_meta("vocab_size")?,
        d_model: tf.parse_meta("d_model")?,
        d_ff: tf.parse_meta("d_ff")?,
        n_layers: tf.parse_meta("n_layers")?,
        n_heads: tf.parse_meta("n_heads")?,
        max_seq_len: tf.parse_meta("max_seq_len")?,
        rms_norm: tf.parse_meta("rms_norm")?,
    };
    c.validate()
        .map_err(|e| SlimError::corrupt(format!("stored model config: {e}")))?;
    Ok(c)
}

fn expect_kind(tf: &TensorFile, kind: &str) -> Result<()> {
    if tf.kind != kind {
        return Err(SlimError::corrupt(format!("expected a {kind} file, found {}", tf.kind)));
    }
    Ok(())
}

fn layer_name(l: usize, what: &str) -> String {
    format!("layers.{l}.{what}")
}

/// Dense model as a tensor file; tensor order is fixed, so equal models give
/// identical bytes.
pub fn dense_tensor_file(w: &ModelWeights) -> TensorFile {
    let mut tf = TensorFile::new(DENSE_KIND);
    push_config(&mut tf, &w.config);
    tf.push_tensor("embedding", w.embedding.clone());
    for (l, layer) in w.layers.iter().enumerate() {
        tf.push_vector(layer_name(l, "attn_norm"), &layer.attn_norm);
        tf.push_vector(layer_name(l, "ffn_norm"), &layer.ffn_norm);
        for kind in ComponentKind::ALL {
            tf.push_tensor(layer_name(l, kind.as_str()), layer.component(kind).clone());
        }
    }
    tf.push_vector("final_norm", &w.final_norm);
    tf.push_tensor("head", w.head.clone());
    tf
}

/// FNV-1a of the dense payload at storage precision.
pub fn model_hash(w: &ModelWeights) -> u64 {
    fnv1a(&dense_tensor_file(w).payload_bytes())
}

pub fn dense_from_tensor_file(tf: &TensorFile) -> Result<ModelWeights> {
    expect_kind(tf, DENSE_KIND)?;
    let config = read_config(tf)?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let m = |kind: ComponentKind| tf.require_tensor(&layer_name(l, kind.as_str())).cloned();
        layers.push(LayerWeights {
            attn_norm: tf.require_vector(&layer_name(l, "attn_norm"))?,
            ffn_norm: tf.require_vector(&layer_name(l, "ffn_norm"))?,
            q: m(ComponentKind::Q)?,
            k: m(ComponentKind::K)?,
            v: m(ComponentKind::V)?,
            o: m(ComponentKind::O)?,
            gate: m(ComponentKind::Gate)?,
            up: m(ComponentKind::Up)?,
            down: m(ComponentKind::Down)?,
        });
    }
    let w = ModelWeights {
        config,
        embedding: tf.require_tensor("embedding")?.clone(),
        layers,
        final_norm: tf.require_vector("final_norm")?,
        head: tf.require_tensor("head")?.clone(),
    };
    w.validate().map_err(|e| SlimError::corrupt(e.to_string()))?;
    Ok(w)
}

pub fn save_model(w: &ModelWeights, path: &Path) -> Result<()> {
    dense_tensor_file(w).save(path)
}

pub fn load_model(path: &Path) -> Result<ModelWeights> {
    dense_from_tensor_file(&TensorFile::load(path)?)
}

fn push_linear(tf: &mut TensorFile, name: &str, lin: &Linear) {
    match lin {
        Linear::Dense(w) => tf.push_tensor(name, w.clone()),
        Linear::Factored(f) => {
            tf.push_tensor(format!("{name}.a"), f.a.clone());
            tf.push_tensor(format!("{name}.b"), f.b.clone());
        }
    }
}

fn read_linear(tf: &TensorFile, name: &str, shape: (usize, usize)) -> Result<Linear> {
    let lin = match tf.tensor(name) {
        Some(w) => Linear::Dense(w.clone()),
        None => {
            let a = tf.require_tensor(&format!("{name}.a"))?.clone();
            let b = tf.require_tensor(&format!("{name}.b"))?.clone();
            Linear::Factored(LowRankFactors::new(a, b).map_err(|e| SlimError::corrupt(format!("{name}: {e}")))?)
        }
    };
    if (lin.d_in(), lin.d_out()) != shape {
        return Err(SlimError::corrupt(format!(
            "{name}: expected {}x{}, found {}x{}",
            shape.0,
            shape.1,
            lin.d_in(),
            lin.d_out()
        )));
    }
    Ok(lin)
}

/// Compressed model plus manifest as a tensor file.
pub fn compressed_tensor_file(model: &CompressedModel, manifest: &CompressionManifest) -> TensorFile {
    let mut tf = TensorFile::new(COMPRESSED_KIND);
    push_config(&mut tf, &model.config);
    for (k, v) in manifest.to_meta() {
        tf.push_meta(k, v);
    }
    tf.push_tensor("embedding", model.embedding.clone());
    for (l, layer) in model.layers.iter().enumerate() {
        tf.push_vector(layer_name(l, "attn_norm"), &layer.attn_norm);
        tf.push_vector(layer_name(l, "ffn_norm"), &layer.ffn_norm);
        for kind in ComponentKind::ATTENTION {
            push_linear(&mut tf, &layer_name(l, kind.as_str()), layer.attention(kind));
        }
        match &layer.ffn {
            CompressedFfn::Dense { gate, up, down } => {
                push_linear(&mut tf, &layer_name(l, "gate"), gate);
                push_linear(&mut tf, &layer_name(l, "up"), up);
                push_linear(&mut tf, &layer_name(l, "down"), down);
            }
            CompressedFfn::Split(s) => {
                if let Some(p) = &s.prime {
                    tf.push_tensor(layer_name(l, "pn.gate"), p.gate.clone());
                    tf.push_tensor(layer_name(l, "pn.up"), p.up.clone());
                    tf.push_tensor(layer_name(l, "pn.down"), p.down.clone());
                }
                if let Some(m) = &s.marginal {
                    push_linear(&mut tf, &layer_name(l, "mn.gate"), &m.gate);
                    push_linear(&mut tf, &layer_name(l, "mn.up"), &m.up);
                    push_linear(&mut tf, &layer_name(l, "mn.down"), &m.down);
                }
            }
        }
    }
    tf.push_vector("final_norm", &model.final_norm);
    tf.push_tensor("head", model.head.clone());
    tf
}

/// `1 − compressed / dense` parameter counts.
pub fn achieved_ratio(model: &CompressedModel) -> f64 {
    1.0 - model.param_count() as f64 / model.config.total_params() as f64
}

pub fn compressed_from_tensor_file(tf: &TensorFile) -> Result<(CompressedModel, CompressionManifest)> {
    expect_kind(tf, COMPRESSED_KIND)?;
    let c = read_config(tf)?;
    let manifest = CompressionManifest::from_meta(tf.meta.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    let mut layers = Vec::with_capacity(c.n_layers);
    for l in 0..c.n_layers {
        let attn = |kind: ComponentKind| read_linear(tf, &layer_name(l, kind.as_str()), c.component_shape(kind));
        let ffn = match manifest.record(&layer_name(l, "ffn")) {
            Some(RecordEntry::Split { prime, .. }) => {
                let mut partition = NeuronPartition::from_prime(l, prime.clone(), c.d_ff, manifest.rule)
                    .map_err(|e| SlimError::corrupt(e.to_string()))?;
                if manifest.rule == SelectionRule::FixedFraction {
                    partition.gamma = manifest.gamma;
                }
                let (np, nm) = (partition.prime.len(), partition.marginal.len());
                let prime = if np > 0 {
                    let t = |what: &str, shape: (usize, usize)| -> Result<Matrix> {
                        let m = tf.require_tensor(&layer_name(l, what))?;
                        if m.shape() != shape {
                            return Err(SlimError::corrupt(format!("layers.{l}.{what} has the wrong shape")));
                        }
                        Ok(m.clone())
                    };
                    Some(PrimeBlocks {
                        gate: t("pn.gate", (c.d_model, np))?,
                        up: t("pn.up", (c.d_model, np))?,
                        down: t("pn.down", (np, c.d_model))?,
                    })
                } else {
                    None
                };
                let marginal = if nm > 0 {
                    Some(MarginalBlocks {
                        gate: read_linear(tf, &layer_name(l, "mn.gate"), (c.d_model, nm))?,
                        up: read_linear(tf, &layer_name(l, "mn.up"), (c.d_model, nm))?,
                        down: read_linear(tf, &layer_name(l, "mn.down"), (nm, c.d_model))?,
                    })
                } else {
                    None
                };
                CompressedFfn::Split(SplitFfnWeights {
                    partition,
                    prime,
                    marginal,
                    d_model: c.d_model,
                })
            }
            _ => CompressedFfn::Dense {
                gate: attn(ComponentKind::Gate)?,
                up: attn(ComponentKind::Up)?,
                down: attn(ComponentKind::Down)?,
            },
        };
        layers.push(CompressedLayer {
            attn_norm: norm(tf, &layer_name(l, "attn_norm"), c.d_model)?,
            ffn_norm: norm(tf, &layer_name(l, "ffn_norm"), c.d_model)?,
            q: attn(ComponentKind::Q)?,
            k: attn(ComponentKind::K)?,
            v: attn(ComponentKind::V)?,
            o: attn(ComponentKind::O)?,
            ffn,
        });
    }
    let embedding = tf.require_tensor("embedding")?.clone();
    let head = tf.require_tensor("head")?.clone();
    if embedding.shape() != (c.vocab_size, c.d_model) || head.shape() != (c.d_model, c.vocab_size) {
        return Err(SlimError::corrupt("embedding or head has the wrong shape"));
    }
    let model = CompressedModel {
        final_norm: norm(tf, "final_norm", c.d_model)?,
        config: c,
        embedding,
        layers,
        head,
    };
    let recomputed = achieved_ratio(&model);
    if (recomputed - manifest.achieved_ratio).abs() > RATIO_TOLERANCE {
        return Err(SlimError::corrupt(format!(
            "manifest achieved ratio {} disagrees with the stored tensors ({recomputed})",
            manifest.achieved_ratio
        )));
    }
    Ok((model, manifest))
}

fn norm(tf: &TensorFile, name: &str, d: usize) -> Result<Vec<f64>> {
    let v = tf.require_vector(name)?;
    if v.len() != d {
        return Err(SlimError::corrupt(format!(
            "{name} has length {}, expected {d}",
            v.len()
        )));
    }
    Ok(v)
}

pub fn save_compressed(model: &CompressedModel, manifest: &CompressionManifest, path: &Path) -> Result<()> {
    compressed_tensor_file(model, manifest).save(path)
}

pub fn load_compressed(path: &Path) -> Result<(CompressedModel, CompressionManifest)> {
    compressed_from_tensor_file(&TensorFile::load(path)?)
}

pub fn stats_tensor_file(stats: &CalibStats) -> TensorFile {
    let mut tf = TensorFile::new(STATS_KIND);
    tf.push_meta("n_layers", stats.layers.len());
    tf.push_meta("token_count", stats.token_count);
    tf.push_meta("model_hash", format!("{:016x}", stats.model_hash));
    for (l, s) in stats.layers.iter().enumerate() {
        tf.push_tensor(layer_name(l, "attn_gram"), s.attn_gram.clone());
        tf.push_tensor(layer_name(l, "o_gram"), s.o_gram.clone());
        tf.push_tensor(layer_name(l, "ffn_gram"), s.ffn_gram.clone());
        tf.push_tensor(layer_name(l, "h_gram"), s.h_gram.clone());
        tf.push_vector(layer_name(l, "neuron_sq_norm"), &s.neuron_sq_norm);
    }
    tf
}

/// Reads statistics and, when `expected_hash` is given, refuses those
/// collected on a different model.
pub fn stats_from_tensor_file(tf: &TensorFile, expected_hash: Option<u64>) -> Result<CalibStats> {
    expect_kind(tf, STATS_KIND)?;
    let n_layers: usize = tf.parse_meta("n_layers")?;
    let token_count: usize = tf.parse_meta("token_count")?;
    let model_hash = u64::from_str_radix(tf.require_meta("model_hash")?, 16)
        .map_err(|_| SlimError::corrupt("model_hash is not hex"))?;
    if let Some(expected) = expected_hash {
        if expected != model_hash {
            return Err(SlimError::Provenance {
                expected,
                found: model_hash,
            });
        }
    }
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let s = LayerStats {
            attn_gram: tf.require_tensor(&layer_name(l, "attn_gram"))?.clone(),
            o_gram: tf.require_tensor(&layer_name(l, "o_gram"))?.clone(),
            ffn_gram: tf.require_tensor(&layer_name(l, "ffn_gram"))?.clone(),
            h_gram: tf.require_tensor(&layer_name(l, "h_gram"))?.clone(),
            neuron_sq_norm: tf.require_vector(&layer_name(l, "neuron_sq_norm"))?,
        };
        let d = s.attn_gram.rows();
        let f = s.neuron_sq_norm.len();
        let square = |m: &Matrix, n: usize| m.shape() == (n, n);
        if !(square(&s.attn_gram, d) && square(&s.o_gram, d) && square(&s.ffn_gram, d) && square(&s.h_gram, f)) {
            return Err(SlimError::corrupt(format!(
                "layer {l} statistics have inconsistent shapes"
            )));
        }
        layers.push(s);
    }
    if layers.is_empty() {
        return Err(SlimError::corrupt("statistics file holds no layers"));
    }
    Ok(CalibStats {
        layers,
        token_count,
        model_hash,
    })
}

pub fn save_stats(stats: &CalibStats, path: &Path) -> Result<()> {
    stats_tensor_file(stats).save(path)
}

pub fn load_stats(path: &Path, expected_hash: Option<u64>) -> Result<CalibStats> {
    stats_from_tensor_file(&TensorFile::load(path)?, expected_hash)
}
