use proptest::prelude::*;
use slimrank_core::model::{forward, forward_compressed, init_weights, CompressedModel, ModelConfig, ModelWeights};
use slimrank_core::Matrix;

fn config(n_layers: usize, n_heads: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 30,
        d_model: 4 * n_heads,
        d_ff: 12 * n_heads,
        n_layers,
        n_heads,
        max_seq_len: 24,
        rms_norm: true,
    }
}

fn norm_rows(x: &[Vec<f64>], scale: &[f64]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|r| {
            let ms = r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64;
            let inv = 1.0 / (ms + 1e-6).sqrt();
            r.iter().zip(scale).map(|(v, s)| v * inv * s).collect()
        })
        .collect()
}

fn mul(x: &[Vec<f64>], w: &Matrix) -> Vec<Vec<f64>> {
    x.iter()
        .map(|r| {
            (0..w.cols())
                .map(|j| (0..w.rows()).map(|i| r[i] * w[(i, j)]).sum())
                .collect()
        })
        .collect()
}

/// Rotates pairs `(2i, 2i+1)` of every head at each position.
fn rotate(x: &mut [Vec<f64>], n_heads: usize) {
    let hd = x[0].len() / n_heads;
    for (pos, r) in x.iter_mut().enumerate() {
        for h in 0..n_heads {
            for i in 0..hd / 2 {
                let angle = pos as f64 * 10_000f64.powf(-2.0 * i as f64 / hd as f64);
                let a = h * hd + 2 * i;
                let (x0, x1) = (r[a], r[a + 1]);
                r[a] = x0 * angle.cos() - x1 * angle.sin();
                r[a + 1] = x0 * angle.sin() + x1 * angle.cos();
            }
        }
    }
}

/// The whole decoder written out row by row.
fn reference_logits(w: &ModelWeights, tokens: &[u32]) -> Vec<Vec<f64>> {
    let c = &w.config;
    let hd = c.d_model / c.n_heads;
    let mut x: Vec<Vec<f64>> = tokens.iter().map(|&t| w.embedding.row(t as usize).to_vec()).collect();
    for layer in &w.layers {
        let xn = norm_rows(&x, &layer.attn_norm);
        let mut q = mul(&xn, &layer.q);
        let mut k = mul(&xn, &layer.k);
        let v = mul(&xn, &layer.v);
        rotate(&mut q, c.n_heads);
        rotate(&mut k, c.n_heads);
        let mut attn = vec![vec![0.0; c.d_model]; x.len()];
        for h in 0..c.n_heads {
            let cols = h * hd..(h + 1) * hd;
            for i in 0..x.len() {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| cols.clone().map(|d| q[i][d] * k[j][d]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    for d in cols.clone() {
                        attn[i][d] += (s - max).exp() / z * v[j][d];
                    }
                }
            }
        }
        let o = mul(&attn, &layer.o);
        for (r, a) in x.iter_mut().zip(&o) {
            r.iter_mut().zip(a).for_each(|(v, d)| *v += d);
        }
        let xn = norm_rows(&x, &layer.ffn_norm);
        let g = mul(&xn, &layer.gate);
        let u = mul(&xn, &layer.up);
        let h: Vec<Vec<f64>> = g
            .iter()
            .zip(&u)
            .map(|(gr, ur)| gr.iter().zip(ur).map(|(a, b)| a / (1.0 + (-a).exp()) * b).collect())
            .collect();
        let f = mul(&h, &layer.down);
        for (r, a) in x.iter_mut().zip(&f) {
            r.iter_mut().zip(a).for_each(|(v, d)| *v += d);
        }
    }
    mul(&norm_rows(&x, &w.final_norm), &w.head)
}

fn max_diff(a: &Matrix, b: &[Vec<f64>]) -> f64 {
    b.iter()
        .enumerate()
        .flat_map(|(i, r)| r.iter().enumerate().map(move |(j, v)| (a[(i, j)] - v).abs()))
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn forward_matches_the_written_out_decoder(
        seed in any::<u64>(),
        n_layers in 1usize..=3,
        n_heads in 1usize..=3,
        tokens in proptest::collection::vec(0u32..30, 1..=24),
    ) {
        let w = init_weights(&config(n_layers, n_heads), seed).unwrap();
        let (logits, _) = forward(&w, &tokens, false).unwrap();
        prop_assert!(max_diff(&logits, &reference_logits(&w, &tokens)) < 1e-9);
    }

    #[test]
    fn logits_of_a_prefix_do_not_see_later_tokens(
        seed in any::<u64>(),
        tokens in proptest::collection::vec(0u32..30, 2..=24),
        cut in 1usize..24,
    ) {
        let cut = cut.min(tokens.len() - 1);
        let w = init_weights(&config(2, 2), seed).unwrap();
        let (full, _) = forward(&w, &tokens, false).unwrap();
        let (prefix, _) = forward(&w, &tokens[..cut], false).unwrap();
        for i in 0..cut {
            for j in 0..30 {
                prop_assert!((full[(i, j)] - prefix[(i, j)]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn uncompressed_wrapper_reproduces_the_dense_model(seed in any::<u64>(), tokens in proptest::collection::vec(0u32..30, 1..=24)) {
        let w = init_weights(&config(2, 2), seed).unwrap();
        let (a, _) = forward(&w, &tokens, false).unwrap();
        let (b, _) = forward_compressed(&CompressedModel::from_dense(&w), &tokens, false).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }
}
