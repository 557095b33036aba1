mod common;

use common::{gaussian, rng};
use proptest::prelude::*;
use rand::Rng;
use slimrank_core::calibration::{collect, neuron_energy_profile, EnergyProfile, LayerStats};
use slimrank_core::decomposer::{
    partition_neurons, split_ffn, truncate, whiten_and_decompose, DecomposeOptions, FfnRanks, NeuronPartition,
    SelectionRule,
};
use slimrank_core::linalg::DampingPolicy;
use slimrank_core::model::{init_weights, silu, LayerWeights, ModelConfig};
use slimrank_core::Matrix;

/// `‖X(W − W′)‖_F²` by explicit loops.
fn weighted_loss(x: &Matrix, w: &Matrix, w2: &Matrix) -> f64 {
    let mut total = 0.0;
    for t in 0..x.rows() {
        for j in 0..w.cols() {
            let mut acc = 0.0;
            for i in 0..w.rows() {
                acc += x[(t, i)] * (w[(i, j)] - w2[(i, j)]);
            }
            total += acc * acc;
        }
    }
    total
}

/// Dense SiLU-gated FFN by explicit loops.
fn ffn_oracle(layer: &LayerWeights, x: &Matrix) -> Matrix {
    let (d, f) = (layer.gate.rows(), layer.gate.cols());
    let mut out = Matrix::zeros(x.rows(), d);
    for t in 0..x.rows() {
        for n in 0..f {
            let (mut g, mut u) = (0.0, 0.0);
            for i in 0..d {
                g += x[(t, i)] * layer.gate[(i, n)];
                u += x[(t, i)] * layer.up[(i, n)];
            }
            let h = g / (1.0 + (-g).exp()) * u;
            for j in 0..d {
                out[(t, j)] += h * layer.down[(n, j)];
            }
        }
    }
    out
}

fn random_layer(seed: u64, d: usize, f: usize, tokens: usize) -> (LayerWeights, Matrix, LayerStats) {
    let mut r = rng(seed);
    let layer = LayerWeights {
        attn_norm: vec![1.0; d],
        ffn_norm: vec![1.0; d],
        q: Matrix::identity(d),
        k: Matrix::identity(d),
        v: Matrix::identity(d),
        o: Matrix::identity(d),
        gate: gaussian(&mut r, d, f).scale(0.5),
        up: gaussian(&mut r, d, f).scale(0.5),
        down: gaussian(&mut r, f, d).scale(0.3),
    };
    let x = gaussian(&mut r, tokens, d);
    let g = x.matmul(&layer.gate).unwrap();
    let u = x.matmul(&layer.up).unwrap();
    let h = Matrix::from_fn(tokens, f, |t, n| silu(g[(t, n)]) * u[(t, n)]);
    let stats = LayerStats {
        attn_gram: x.tr_matmul(&x).unwrap(),
        o_gram: x.tr_matmul(&x).unwrap(),
        ffn_gram: x.tr_matmul(&x).unwrap(),
        h_gram: h.tr_matmul(&h).unwrap(),
        neuron_sq_norm: (0..f).map(|n| (0..tokens).map(|t| h[(t, n)].powi(2)).sum()).collect(),
    };
    (layer, x, stats)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn truncation_loss_equals_discarded_energy(seed in any::<u64>(), d_in in 2usize..=24, d_out in 2usize..=24, extra in 0usize..16) {
        let mut r = rng(seed);
        let x = gaussian(&mut r, 2 * d_in + extra, d_in).matmul(&gaussian(&mut r, d_in, d_in)).unwrap();
        let w = gaussian(&mut r, d_in, d_out);
        let ws = whiten_and_decompose(&w, &x.tr_matmul(&x).unwrap(), &DampingPolicy::none()).unwrap();
        let total = weighted_loss(&x, &w, &Matrix::zeros(d_in, d_out));
        for k in 1..=ws.full_rank {
            let loss = weighted_loss(&x, &w, &truncate(&ws, k).unwrap().to_dense());
            let expected = ws.truncation_loss_sq(k);
            prop_assert!((loss - expected).abs() <= 1e-7 * expected.max(1e-9 * total), "k={} loss={} expected={}", k, loss, expected);
        }
        prop_assert!((ws.truncation_loss_sq(0) - total).abs() <= 1e-9 * total);
    }

    #[test]
    fn truncation_beats_random_rank_k(seed in any::<u64>(), d_in in 2usize..=16, d_out in 2usize..=16) {
        let mut r = rng(seed);
        let x = gaussian(&mut r, 2 * d_in + 3, d_in);
        let w = gaussian(&mut r, d_in, d_out);
        let ws = whiten_and_decompose(&w, &x.tr_matmul(&x).unwrap(), &DampingPolicy::none()).unwrap();
        let k = r.gen_range(1..=ws.full_rank);
        let best = weighted_loss(&x, &w, &truncate(&ws, k).unwrap().to_dense());
        for _ in 0..10 {
            let alt = gaussian(&mut r, d_in, k).matmul(&gaussian(&mut r, k, d_out)).unwrap();
            prop_assert!(weighted_loss(&x, &w, &alt) >= best - 1e-9 * best.max(1.0));
        }
    }

    #[test]
    fn any_partition_splits_exactly_at_full_rank(seed in any::<u64>(), mask in proptest::collection::vec(any::<bool>(), 12)) {
        let (layer, x, stats) = random_layer(seed, 6, 12, 40);
        let prime: Vec<usize> = (0..12).filter(|&i| mask[i]).collect();
        let part = NeuronPartition::from_prime(0, prime, 12, SelectionRule::FixedFraction).unwrap();
        let mut all: Vec<usize> = part.prime.iter().chain(&part.marginal).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..12).collect::<Vec<_>>());
        let n_mn = part.marginal.len().max(1);
        let opts = DecomposeOptions { damping: DampingPolicy::default(), dense_fallback: false };
        let split = split_ffn(&layer, &stats, &part, FfnRanks::shared_input(6.min(n_mn), 6.min(n_mn)), &opts).unwrap();
        let (y, h) = split.forward(&x, true).unwrap();
        prop_assert!(y.max_abs_diff(&ffn_oracle(&layer, &x)) < 1e-9);
        let h = h.unwrap();
        let g = x.matmul(&layer.gate).unwrap();
        let u = x.matmul(&layer.up).unwrap();
        for n in &part.prime {
            prop_assert!((h[(3, *n)] - silu(g[(3, *n)]) * u[(3, *n)]).abs() < 1e-12);
        }
    }

    #[test]
    fn larger_gamma_keeps_a_superset(norms in proptest::collection::vec(0.0f64..10.0, 1..40), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let p = EnergyProfile::from_norms(&norms).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        for rule in [SelectionRule::FixedFraction, SelectionRule::EnergyThreshold] {
            let small = partition_neurons(0, &p, lo, rule).unwrap();
            let large = partition_neurons(0, &p, hi, rule).unwrap();
            prop_assert!(small.prime.iter().all(|i| large.prime.contains(i)));
            prop_assert_eq!(small.prime.len() + small.marginal.len(), norms.len());
        }
    }

    #[test]
    fn prime_neurons_outweigh_marginal(norms in proptest::collection::vec(0.0f64..10.0, 2..40), g in 0.05f64..0.95) {
        let p = EnergyProfile::from_norms(&norms).unwrap();
        let part = partition_neurons(0, &p, g, SelectionRule::FixedFraction).unwrap();
        let min_prime = part.prime.iter().map(|&i| norms[i]).fold(f64::INFINITY, f64::min);
        let max_marginal = part.marginal.iter().map(|&i| norms[i]).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min_prime >= max_marginal);
    }
}

#[test]
fn full_marginal_rank_keeps_all_marginal_energy() {
    let (layer, x, stats) = random_layer(11, 8, 20, 60);
    let profile = EnergyProfile::from_norms(&stats.neuron_sq_norm).unwrap();
    let part = partition_neurons(0, &profile, 0.25, SelectionRule::FixedFraction).unwrap();
    assert_eq!(part.prime.len(), 5);
    let opts = DecomposeOptions {
        damping: DampingPolicy::default(),
        dense_fallback: false,
    };
    let exact = split_ffn(&layer, &stats, &part, FfnRanks::shared_input(8, 8), &opts).unwrap();
    let lossy = split_ffn(&layer, &stats, &part, FfnRanks::shared_input(2, 2), &opts).unwrap();
    let dense = ffn_oracle(&layer, &x);
    let err = |s: &slimrank_core::decomposer::SplitFfnWeights| s.forward(&x, false).unwrap().0.max_abs_diff(&dense);
    assert!(err(&exact) < 1e-9);
    assert!(err(&lossy) > 1e-6);
}

#[test]
fn scaling_up_projection_leaves_its_energy_curve_unchanged() {
    let c = ModelConfig {
        vocab_size: 40,
        d_model: 8,
        d_ff: 24,
        n_layers: 3,
        n_heads: 2,
        max_seq_len: 32,
        rms_norm: true,
    };
    let w = init_weights(&c, 4).unwrap();
    let seqs: Vec<Vec<u32>> = (0..4)
        .map(|s| (0..24).map(|i| ((i * 7 + s * 3) % 40) as u32).collect())
        .collect();
    let before = collect(&w, &seqs).unwrap();
    let mut scaled = w.clone();
    scaled.layers[1].up = scaled.layers[1].up.scale(2.0);
    let after = collect(&scaled, &seqs).unwrap();
    let a = neuron_energy_profile(&before, 1).unwrap();
    let b = neuron_energy_profile(&after, 1).unwrap();
    assert_eq!(
        a.sorted.iter().map(|p| p.0).collect::<Vec<_>>(),
        b.sorted.iter().map(|p| p.0).collect::<Vec<_>>()
    );
    for (x, y) in a.cumulative.iter().zip(&b.cumulative) {
        assert!((x - y).abs() < 1e-12);
    }
    for (x, y) in before.layers[1]
        .neuron_sq_norm
        .iter()
        .zip(&after.layers[1].neuron_sq_norm)
    {
        assert!((4.0 * x - y).abs() <= 1e-9 * y.abs().max(1.0));
    }
}

#[test]
fn out_of_range_ranks_are_rejected() {
    let mut r = rng(2);
    let x = gaussian(&mut r, 20, 5);
    let w = gaussian(&mut r, 5, 7);
    let ws = whiten_and_decompose(&w, &x.tr_matmul(&x).unwrap(), &DampingPolicy::none()).unwrap();
    assert!(truncate(&ws, 0).is_err());
    assert!(truncate(&ws, 6).is_err());
    assert_eq!(truncate(&ws, 5).unwrap().rank(), 5);
}
