//! End-to-end compression of a dense model: calibration, neuron
//! partitioning, whitened decompositions, rank allocation and assembly of the
//! compressed model with its manifest.

use std::collections::BTreeMap;

use crate::allocator::{
    budget_from_ratio, greedy_allocate, levels, uniform_allocate, AllocOptions, ComponentSpectrum, ParamAccounting,
    RankAllocation, RankLevel,
};
use crate::calibration::{collect, neuron_energy_profile, CalibStats};
use crate::corpus::{encode, sample_sequences, CorpusSplits};
use crate::decomposer::{
    apply_attention_factors, assemble_split, attention_decompositions, decompose_marginal, partition_neurons, BlockId,
    FfnRanks, Linear, MarginalDecomposition, NeuronPartition, WhitenedSvd,
};
use crate::error::{Result, SlimError};
use crate::io::{
    achieved_ratio, model_hash, CalibrationSpec, ComponentRecord, CompressionManifest, PipelineConfig, RecordEntry,
};
use crate::model::{
    init_weights, perplexity, train, ComponentId, ComponentKind, CompressedFfn, CompressedModel, LanguageModel,
    ModelWeights, Token, TrainReport,
};

/// Initializes a model from `cfg`, shrinks its FFN weights by
/// `ffn_init_scale` and trains it on the training split.
pub fn train_fixture(cfg: &PipelineConfig, on_step: impl FnMut(usize, f64)) -> Result<(ModelWeights, TrainReport)> {
    cfg.validate()?;
    let mut w = init_weights(&cfg.model, cfg.init_seed)?;
    for l in &mut w.layers {
        l.gate = l.gate.scale(cfg.ffn_init_scale);
        l.up = l.up.scale(cfg.ffn_init_scale);
        l.down = l.down.scale(cfg.ffn_init_scale);
    }
    let splits = load_corpus(&cfg.calibration)?;
    let report = train(&mut w, &splits.train, &cfg.train, on_step)?;
    Ok((w, report))
}

const FFN_KINDS: [ComponentKind; 3] = [ComponentKind::Gate, ComponentKind::Up, ComponentKind::Down];

/// Train/calibration/evaluation streams named by `spec.corpus`.
pub fn load_corpus(spec: &CalibrationSpec) -> Result<CorpusSplits> {
    if spec.corpus == "bundled" {
        return Ok(CorpusSplits::bundled());
    }
    let path = std::path::Path::new(&spec.corpus);
    let text = std::fs::read_to_string(path).map_err(|e| SlimError::io(path, e))?;
    CorpusSplits::from_tokens(&encode(&text))
}

/// The part of the calibration split selected by `split`.
pub fn calibration_stream<'a>(splits: &'a CorpusSplits, split: &str) -> Result<&'a [Token]> {
    let (a, b) = splits.calib_halves();
    match split {
        "all" => Ok(&splits.calib),
        "first-half" => Ok(a),
        "second-half" => Ok(b),
        other => Err(SlimError::config(format!("unknown calibration split {other:?}"))),
    }
}

pub fn calibration_sequences(cfg: &PipelineConfig) -> Result<Vec<Vec<Token>>> {
    let c = &cfg.calibration;
    let splits = load_corpus(c)?;
    sample_sequences(calibration_stream(&splits, &c.split)?, c.n_sequences, c.seq_len, c.seed)
}

/// Collects statistics and stamps them with the model's hash.
pub fn calibrate(weights: &ModelWeights, cfg: &PipelineConfig) -> Result<CalibStats> {
    let mut stats = collect(weights, &calibration_sequences(cfg)?)?;
    stats.model_hash = model_hash(weights);
    Ok(stats)
}

/// The evaluation split, cut to `eval.tokens` when that is nonzero.
pub fn eval_tokens(cfg: &PipelineConfig) -> Result<Vec<Token>> {
    let mut eval = load_corpus(&cfg.calibration)?.eval;
    if cfg.eval_tokens > 0 {
        eval.truncate(cfg.eval_tokens);
    }
    Ok(eval)
}

pub fn evaluate<M: LanguageModel + ?Sized>(model: &M, tokens: &[Token], cfg: &PipelineConfig) -> Result<f64> {
    perplexity(model, tokens, cfg.eval_context)
}

/// Everything that does not depend on the target ratio, so sweeps can
/// share it.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub partitions: BTreeMap<usize, NeuronPartition>,
    pub marginal: BTreeMap<usize, MarginalDecomposition>,
    pub attention: BTreeMap<ComponentId, WhitenedSvd>,
    /// Decomposable blocks in allocation order.
    pub spectra: Vec<ComponentSpectrum>,
    pub accounting: ParamAccounting,
    pub alloc_options: AllocOptions,
}

fn check_provenance(weights: &ModelWeights, stats: &CalibStats) -> Result<()> {
    let expected = model_hash(weights);
    if stats.model_hash != expected {
        return Err(SlimError::Provenance {
            expected,
            found: stats.model_hash,
        });
    }
    if stats.layers.len() != weights.config.n_layers {
        return Err(SlimError::shape("statistics and model disagree on the layer count"));
    }
    Ok(())
}

/// Partitions every non-excluded FFN and decomposes every block the
/// allocator may truncate.
pub fn prepare(weights: &ModelWeights, stats: &CalibStats, cfg: &PipelineConfig) -> Result<Prepared> {
    check_provenance(weights, stats)?;
    let c = &weights.config;
    let ex = &cfg.exclusions;
    let options = cfg.decompose_options();
    let alloc_options = AllocOptions::with_step(cfg.rank_step);

    let mut partitions = BTreeMap::new();
    let mut marginal = BTreeMap::new();
    let mut spectra = Vec::new();
    let mut attention = BTreeMap::new();
    for l in 0..c.n_layers {
        if ex.layer_excluded(l, c.n_layers) {
            continue;
        }
        let ids: Vec<ComponentId> = ComponentKind::ATTENTION
            .into_iter()
            .map(|k| ComponentId::new(l, k))
            .filter(|id| !ex.excludes(*id, c.n_layers))
            .collect();
        let decomps = attention_decompositions(weights, stats, ids, &options)?;
        for (id, ws) in decomps {
            spectra.push(spectrum(&ws)?);
            attention.insert(id, ws);
        }

        let profile = neuron_energy_profile(stats, l)?;
        let part = partition_neurons(l, &profile, cfg.gamma, cfg.rule)?;
        if let Some(d) = decompose_marginal(&weights.layers[l], &stats.layers[l], &part, &options)? {
            for kind in FFN_KINDS {
                if !ex.excludes(ComponentId::new(l, kind), c.n_layers) {
                    spectra.push(spectrum(d.block(kind))?);
                }
            }
            marginal.insert(l, d);
        }
        partitions.insert(l, part);
    }

    let total = c.total_params() as u64;
    let decomposable: u64 = spectra.iter().map(|s| s.dense_params()).sum();
    let min_cost = spectra.iter().map(|s| levels(s, &alloc_options)[0].cost(s)).sum();
    Ok(Prepared {
        partitions,
        marginal,
        attention,
        spectra,
        accounting: ParamAccounting {
            total,
            retained: total - decomposable,
            min_cost,
        },
        alloc_options,
    })
}

fn spectrum(ws: &WhitenedSvd) -> Result<ComponentSpectrum> {
    let block = ws.component.expect("pipeline decompositions are tagged");
    ComponentSpectrum::new(block, ws.sigma_sq(), ws.d_in(), ws.d_out())
}

/// Budget and allocation for one target ratio.
pub fn allocate(prepared: &Prepared, allocation: &str, target_ratio: f64) -> Result<(u64, RankAllocation)> {
    let budget = budget_from_ratio(&prepared.accounting, target_ratio)?;
    let alloc = match allocation {
        "greedy" => greedy_allocate(&prepared.spectra, budget, &prepared.alloc_options)?,
        "uniform" => uniform_allocate(&prepared.spectra, budget, &prepared.alloc_options)?,
        other => return Err(SlimError::config(format!("unknown allocation {other:?}"))),
    };
    Ok((budget, alloc))
}

#[derive(Debug, Clone)]
pub struct Compressed {
    pub model: CompressedModel,
    pub manifest: CompressionManifest,
}

/// Builds the compressed model for a given allocation.
pub fn assemble(
    weights: &ModelWeights,
    prepared: &Prepared,
    alloc: &RankAllocation,
    budget: u64,
    cfg: &PipelineConfig,
    target_ratio: f64,
) -> Result<Compressed> {
    let c = &weights.config;
    let mut ranks: BTreeMap<BlockId, (usize, RankLevel)> = BTreeMap::new();
    for (spec, level) in prepared.spectra.iter().zip(&alloc.levels) {
        ranks.insert(spec.block, (level.rank(spec), *level));
    }

    let mut model = CompressedModel::from_dense(weights);
    let attn_ranks: BTreeMap<ComponentId, usize> = prepared
        .attention
        .keys()
        .map(|id| (*id, ranks[&BlockId::whole(id.layer, id.kind)].0))
        .collect();
    apply_attention_factors(
        &mut model,
        weights,
        &prepared.attention,
        &attn_ranks,
        cfg.dense_fallback,
    )?;

    let mut records = Vec::new();
    for l in 0..c.n_layers {
        for kind in ComponentKind::ATTENTION {
            let id = ComponentId::new(l, kind);
            let entry = match ranks.get(&BlockId::whole(l, kind)) {
                None => RecordEntry::Dense,
                Some(&(k, level)) => {
                    let lin = model.layers[l].attention(kind);
                    RecordEntry::Factored {
                        rank: k,
                        loss_sq: if lin.is_factored() {
                            prepared.attention[&id].truncation_loss_sq(k)
                        } else {
                            0.0
                        },
                        fallback: level == RankLevel::Dense || !lin.is_factored(),
                    }
                }
            };
            records.push(ComponentRecord {
                name: id.to_string(),
                entry,
            });
        }

        let Some(part) = prepared.partitions.get(&l) else {
            records.push(ComponentRecord {
                name: format!("layers.{l}.ffn"),
                entry: RecordEntry::Dense,
            });
            continue;
        };
        let decomp = prepared.marginal.get(&l);
        let rank_of = |kind: ComponentKind| -> usize {
            match ranks.get(&BlockId::marginal(l, kind)) {
                Some(&(k, _)) => k,
                None => decomp.map_or(0, |d| d.block(kind).full_rank),
            }
        };
        let ffn_ranks = FfnRanks {
            gate: rank_of(ComponentKind::Gate),
            up: rank_of(ComponentKind::Up),
            down: rank_of(ComponentKind::Down),
        };
        let layer = &weights.layers[l];
        let mut split = assemble_split(layer, part, decomp, ffn_ranks, cfg.dense_fallback)?;
        let mut record_ranks = None;
        let mut loss_sq = [0.0; 3];
        if let (Some(m), Some(d)) = (&mut split.marginal, decomp) {
            let mut r = [None; 3];
            for (i, kind) in FFN_KINDS.into_iter().enumerate() {
                let block = match kind {
                    ComponentKind::Gate => &mut m.gate,
                    ComponentKind::Up => &mut m.up,
                    _ => &mut m.down,
                };
                if !ranks.contains_key(&BlockId::marginal(l, kind)) {
                    // excluded blocks stay dense whatever the fallback setting
                    let mn = &part.marginal;
                    *block = Linear::Dense(match kind {
                        ComponentKind::Down => layer.down.select_rows(mn).expect("nonempty"),
                        ComponentKind::Gate => layer.gate.select_columns(mn).expect("nonempty"),
                        _ => layer.up.select_columns(mn).expect("nonempty"),
                    });
                }
                if let Some(k) = block.rank() {
                    r[i] = Some(k);
                    loss_sq[i] = d.block(kind).truncation_loss_sq(k);
                }
            }
            record_ranks = Some(r);
        }
        records.push(ComponentRecord {
            name: format!("layers.{l}.ffn"),
            entry: RecordEntry::Split {
                prime: part.prime.clone(),
                ranks: record_ranks,
                loss_sq,
            },
        });
        model.layers[l].ffn = CompressedFfn::Split(split);
    }

    let manifest = CompressionManifest {
        source_hash: model_hash(weights),
        gamma: cfg.gamma,
        rule: cfg.rule,
        target_ratio,
        exclusions: cfg.exclusions_text(),
        rank_step: cfg.rank_step,
        allocation: cfg.allocation.clone(),
        seed: cfg.calibration.seed,
        budget,
        records,
        achieved_ratio: achieved_ratio(&model),
        objective: alloc.objective,
    };
    Ok(Compressed { model, manifest })
}

/// Prepare, allocate and assemble at `cfg.target_ratio`.
pub fn compress(weights: &ModelWeights, stats: &CalibStats, cfg: &PipelineConfig) -> Result<Compressed> {
    let prepared = prepare(weights, stats, cfg)?;
    let (budget, alloc) = allocate(&prepared, &cfg.allocation, cfg.target_ratio)?;
    assemble(weights, &prepared, &alloc, budget, cfg, cfg.target_ratio)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{compressed_from_tensor_file, compressed_tensor_file};
    use crate::model::{forward, forward_compressed, init_weights};

    fn tiny() -> (ModelWeights, PipelineConfig) {
        let mut cfg = PipelineConfig::default();
        for kv in [
            "model.d_model=16",
            "model.d_ff=48",
            "model.n_layers=6",
            "model.n_heads=2",
            "model.max_seq_len=32",
            "calib.n_sequences=6",
            "calib.seq_len=32",
            "eval.context=32",
            "eval.tokens=400",
            "rank_step=2",
        ] {
            cfg.apply_override(kv).unwrap();
        }
        (init_weights(&cfg.model, 5).unwrap(), cfg)
    }

    #[test]
    fn ratio_zero_keeps_outputs() {
        let (w, mut cfg) = tiny();
        cfg.target_ratio = 0.0;
        let stats = calibrate(&w, &cfg).unwrap();
        let out = compress(&w, &stats, &cfg).unwrap();
        assert!(out.manifest.achieved_ratio.abs() < 1e-12);
        let toks: Vec<Token> = (0..20).map(|i| (i * 37 % 250) as Token).collect();
        let a = forward(&w, &toks, false).unwrap().0;
        let b = forward_compressed(&out.model, &toks, false).unwrap().0;
        assert!(a.max_abs_diff(&b) < 1e-8);
    }

    #[test]
    fn achieved_ratio_tracks_target_and_survives_serialization() {
        let (w, mut cfg) = tiny();
        cfg.target_ratio = 0.1;
        let stats = calibrate(&w, &cfg).unwrap();
        let out = compress(&w, &stats, &cfg).unwrap();
        let got = out.manifest.achieved_ratio;
        assert!((0.1 - 1e-12..0.12).contains(&got), "achieved {got}");
        let tf = compressed_tensor_file(&out.model, &out.manifest);
        let (m, man) = compressed_from_tensor_file(&tf).unwrap();
        assert_eq!(man, out.manifest);
        assert_eq!(m.param_count(), out.model.param_count());
        // excluded layers stay dense
        assert_eq!(man.record("layers.0.ffn"), Some(&RecordEntry::Dense));
        assert_eq!(man.record("layers.3.v"), Some(&RecordEntry::Dense));
    }

    #[test]
    fn foreign_statistics_are_refused() {
        let (w, cfg) = tiny();
        let other = init_weights(&cfg.model, 6).unwrap();
        let stats = calibrate(&other, &cfg).unwrap();
        assert!(matches!(compress(&w, &stats, &cfg), Err(SlimError::Provenance { .. })));
    }

    #[test]
    fn unreachable_ratio_is_a_config_error() {
        let (w, mut cfg) = tiny();
        cfg.target_ratio = 0.95;
        let stats = calibrate(&w, &cfg).unwrap();
        assert!(matches!(compress(&w, &stats, &cfg), Err(SlimError::Config(_))));
    }
}
