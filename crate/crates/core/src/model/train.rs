//! Next-token training by plain SGD with hand-written back-propagation.
//!
//! This only exists to turn a random initialization into a fixture whose FFN
//! neurons carry differentiated activation energy; it is not part of the
//! compression method.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SlimError};
use crate::linalg::Matrix;
use crate::model::forward::{causal_attention_probs, check_tokens, gated, inv_rms, rms_norm, silu, Rope};
use crate::model::perplexity::log_softmax_at;
use crate::model::{ComponentKind, ModelWeights, Token};

/// Gradients share the layout of the weights they belong to.
pub type Gradients = ModelWeights;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub learning_rate: f64,
    /// Decoupled L2 shrinkage applied to projection matrices each step.
    pub weight_decay: f64,
    /// Global gradient-norm clip; zero disables clipping.
    pub clip_norm: f64,
    /// Weight of an L1 penalty on the FFN intermediate activations, summed
    /// over neurons and layers and averaged over tokens. Zero trains on the
    /// plain next-token loss.
    pub activation_l1: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    /// Bias-corrected Adam with decoupled weight decay.
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 400,
            batch_size: 8,
            seq_len: 64,
            learning_rate: 0.5,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            activation_l1: 0.0,
            optimizer: Optimizer::Sgd,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    /// Mean next-token NLL of every step's batch, before the update.
    pub losses: Vec<f64>,
}

/// Batch objective split into its parts, with the gradient of their sum.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub nll: f64,
    pub penalty: f64,
    pub grads: Gradients,
}

/// Runs `config.steps` optimizer steps on windows sampled from `corpus`.
///
/// `on_step` sees `(step, nll)` after every update.
pub fn train(
    weights: &mut ModelWeights,
    corpus: &[Token],
    config: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    let window = config.seq_len + 1;
    if config.seq_len == 0 || config.seq_len > weights.config.max_seq_len {
        return Err(SlimError::config(format!(
            "training seq_len {} outside 1..={}",
            config.seq_len, weights.config.max_seq_len
        )));
    }
    if corpus.len() < window {
        return Err(SlimError::input("training corpus shorter than one window"));
    }
    if config.batch_size == 0 {
        return Err(SlimError::config("batch_size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = TrainReport::default();
    let mut moments: Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = None;
    for step in 0..config.steps {
        let batch: Vec<&[Token]> = (0..config.batch_size)
            .map(|_| {
                let start = rng.gen_range(0..=corpus.len() - window);
                &corpus[start..start + window]
            })
            .collect();
        let Evaluation {
            nll: loss, mut grads, ..
        } = loss_and_gradients(weights, &batch, config.activation_l1)?;
        if config.clip_norm > 0.0 {
            let norm = grad_norm(&grads);
            if norm > config.clip_norm {
                scale_all(&mut grads, config.clip_norm / norm);
            }
        }
        update(weights, &grads, config, step, &mut moments);
        report.losses.push(loss);
        on_step(step, loss);
    }
    Ok(report)
}

struct LayerCache {
    x_in: Matrix,
    inv_attn: Vec<f64>,
    xn: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Vec<f64>>,
    attn: Matrix,
    x_mid: Matrix,
    inv_ffn: Vec<f64>,
    xn2: Matrix,
    g: Matrix,
    u: Matrix,
    h: Matrix,
}

/// Mean next-token NLL over every sequence of the batch, the activation
/// penalty, and the gradient of their sum. Each sequence predicts
/// `seq[1..]` from `seq[..len-1]`.
pub fn loss_and_gradients(w: &ModelWeights, batch: &[&[Token]], activation_l1: f64) -> Result<Evaluation> {
    let total: usize = batch.iter().map(|s| s.len().saturating_sub(1)).sum();
    if total == 0 {
        return Err(SlimError::input("batch has no prediction targets"));
    }
    let mut grads = zeros_like(w);
    let mut nll = 0.0;
    let mut penalty = 0.0;
    for seq in batch {
        if seq.len() < 2 {
            continue;
        }
        let (n, p) = sequence_backward(w, seq, total as f64, activation_l1, &mut grads)?;
        nll += n;
        penalty += p;
    }
    Ok(Evaluation {
        nll: nll / total as f64,
        penalty,
        grads,
    })
}

/// Returns the summed NLL and this sequence's share of the penalty.
fn sequence_backward(
    w: &ModelWeights,
    seq: &[Token],
    denom: f64,
    activation_l1: f64,
    grads: &mut Gradients,
) -> Result<(f64, f64)> {
    let c = &w.config;
    let inputs = &seq[..seq.len() - 1];
    let targets = &seq[1..];
    check_tokens(c, inputs)?;
    let t = inputs.len();
    let idx: Vec<usize> = inputs.iter().map(|&x| x as usize).collect();
    let rope = Rope::new(c.head_dim(), t);

    // forward, keeping what back-propagation needs
    let mut x = w.embedding.select_rows(&idx).expect("nonempty");
    let mut caches = Vec::with_capacity(c.n_layers);
    for layer in &w.layers {
        let x_in = x.clone();
        let inv_attn = row_inv_rms(&x_in, c.rms_norm);
        let xn = rms_norm(&x_in, &layer.attn_norm, c.rms_norm);
        let mut q = xn.matmul(&layer.q)?;
        let mut k = xn.matmul(&layer.k)?;
        let v = xn.matmul(&layer.v)?;
        rope.apply(&mut q, c.n_heads, false);
        rope.apply(&mut k, c.n_heads, false);
        let (attn, probs) = causal_attention_probs(&q, &k, &v, c.n_heads);
        x.add_assign(&attn.matmul(&layer.o)?)?;
        let x_mid = x.clone();
        let inv_ffn = row_inv_rms(&x_mid, c.rms_norm);
        let xn2 = rms_norm(&x_mid, &layer.ffn_norm, c.rms_norm);
        let g = xn2.matmul(&layer.gate)?;
        let u = xn2.matmul(&layer.up)?;
        let h = gated(&g, &u);
        x.add_assign(&h.matmul(&layer.down)?)?;
        caches.push(LayerCache {
            x_in,
            inv_attn,
            xn,
            q,
            k,
            v,
            probs,
            attn,
            x_mid,
            inv_ffn,
            xn2,
            g,
            u,
            h,
        });
    }
    let inv_final = row_inv_rms(&x, c.rms_norm);
    let xf = rms_norm(&x, &w.final_norm, c.rms_norm);
    let logits = xf.matmul(&w.head)?;

    let mut loss = 0.0;
    let mut penalty = 0.0;
    let mut dlogits = Matrix::zeros(t, c.vocab_size);
    for (r, &target) in targets.iter().enumerate() {
        let row = logits.row(r);
        loss -= log_softmax_at(row, target as usize);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let drow = dlogits.row_mut(r);
        for (d, v) in drow.iter_mut().zip(row) {
            *d = (v - max).exp() / z / denom;
        }
        drow[target as usize] -= 1.0 / denom;
    }

    xf.tr_matmul_acc(&dlogits, &mut grads.head)?;
    let dxf = dlogits.matmul_tr(&w.head)?;
    let mut dx = rms_norm_backward(&x, &inv_final, &w.final_norm, &dxf, &mut grads.final_norm, c.rms_norm);

    for (li, cache) in caches.iter().enumerate().rev() {
        let layer = &w.layers[li];
        let gl = &mut grads.layers[li];

        // feed-forward
        cache.h.tr_matmul_acc(&dx, &mut gl.down)?;
        let mut dh = dx.matmul_tr(&layer.down)?;
        if activation_l1 > 0.0 {
            let c = activation_l1 / denom;
            for (d, h) in dh.data_mut().iter_mut().zip(cache.h.data()) {
                penalty += c * h.abs();
                *d += c * h.signum();
            }
        }
        let mut dg = dh.clone();
        let mut du = dh;
        for i in 0..dg.data().len() {
            let gv = cache.g.data()[i];
            let uv = cache.u.data()[i];
            let sig = 1.0 / (1.0 + (-gv).exp());
            let dhv = dg.data()[i];
            dg.data_mut()[i] = dhv * uv * sig * (1.0 + gv * (1.0 - sig));
            du.data_mut()[i] = dhv * silu(gv);
        }
        cache.xn2.tr_matmul_acc(&dg, &mut gl.gate)?;
        cache.xn2.tr_matmul_acc(&du, &mut gl.up)?;
        let mut dxn2 = dg.matmul_tr(&layer.gate)?;
        dxn2.add_assign(&du.matmul_tr(&layer.up)?)?;
        dx.add_assign(&rms_norm_backward(
            &cache.x_mid,
            &cache.inv_ffn,
            &layer.ffn_norm,
            &dxn2,
            &mut gl.ffn_norm,
            c.rms_norm,
        ))?;

        // attention
        cache.attn.tr_matmul_acc(&dx, &mut gl.o)?;
        let dattn = dx.matmul_tr(&layer.o)?;
        let (mut dq, mut dk, dv) = attention_backward(cache, &dattn, c.n_heads);
        rope.apply(&mut dq, c.n_heads, true);
        rope.apply(&mut dk, c.n_heads, true);
        cache.xn.tr_matmul_acc(&dq, &mut gl.q)?;
        cache.xn.tr_matmul_acc(&dk, &mut gl.k)?;
        cache.xn.tr_matmul_acc(&dv, &mut gl.v)?;
        let mut dxn = dq.matmul_tr(&layer.q)?;
        dxn.add_assign(&dk.matmul_tr(&layer.k)?)?;
        dxn.add_assign(&dv.matmul_tr(&layer.v)?)?;
        dx.add_assign(&rms_norm_backward(
            &cache.x_in,
            &cache.inv_attn,
            &layer.attn_norm,
            &dxn,
            &mut gl.attn_norm,
            c.rms_norm,
        ))?;
    }

    for (r, &tok) in idx.iter().enumerate() {
        for (g, d) in grads.embedding.row_mut(tok).iter_mut().zip(dx.row(r)) {
            *g += d;
        }
    }
    Ok((loss, penalty))
}

fn row_inv_rms(x: &Matrix, enabled: bool) -> Vec<f64> {
    (0..x.rows())
        .map(|r| if enabled { inv_rms(x.row(r)) } else { 1.0 })
        .collect()
}

/// Gradient of `y = x·r(x)⊙s` with respect to `x`, accumulating `∂/∂s`.
fn rms_norm_backward(x: &Matrix, inv: &[f64], scale: &[f64], dy: &Matrix, dscale: &mut [f64], enabled: bool) -> Matrix {
    if !enabled {
        return dy.clone();
    }
    let d = x.cols() as f64;
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let xr = x.row(r);
        let dyr = dy.row(r);
        let rr = inv[r];
        let mut dot = 0.0;
        for j in 0..xr.len() {
            dot += dyr[j] * scale[j] * xr[j];
            dscale[j] += dyr[j] * xr[j] * rr;
        }
        let coeff = rr * rr * rr * dot / d;
        for (j, out) in dx.row_mut(r).iter_mut().enumerate() {
            *out = rr * scale[j] * dyr[j] - coeff * xr[j];
        }
    }
    dx
}

fn attention_backward(cache: &LayerCache, dout: &Matrix, n_heads: usize) -> (Matrix, Matrix, Matrix) {
    let (t, d) = cache.q.shape();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = Matrix::zeros(t, d);
    let mut dk = Matrix::zeros(t, d);
    let mut dv = Matrix::zeros(t, d);
    let mut dp = vec![0.0; t];
    for h in 0..n_heads {
        let off = h * hd;
        let probs = &cache.probs[h];
        for i in 0..t {
            let doi = &dout.row(i)[off..off + hd];
            let pi = &probs[i * t..i * t + i + 1];
            let mut weighted = 0.0;
            for j in 0..=i {
                let vj = &cache.v.row(j)[off..off + hd];
                dp[j] = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                weighted += pi[j] * dp[j];
            }
            for j in 0..=i {
                let pij = pi[j];
                for (dvv, o) in dv.row_mut(j)[off..off + hd].iter_mut().zip(doi) {
                    *dvv += pij * o;
                }
                let ds = pij * (dp[j] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                for c in 0..hd {
                    dq[(i, off + c)] += ds * cache.k[(j, off + c)];
                    dk[(j, off + c)] += ds * cache.q[(i, off + c)];
                }
            }
        }
    }
    (dq, dk, dv)
}

fn zeros_like(w: &ModelWeights) -> Gradients {
    let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
    ModelWeights {
        config: w.config.clone(),
        embedding: z(&w.embedding),
        layers: w
            .layers
            .iter()
            .map(|l| crate::model::LayerWeights {
                attn_norm: vec![0.0; l.attn_norm.len()],
                ffn_norm: vec![0.0; l.ffn_norm.len()],
                q: z(&l.q),
                k: z(&l.k),
                v: z(&l.v),
                o: z(&l.o),
                gate: z(&l.gate),
                up: z(&l.up),
                down: z(&l.down),
            })
            .collect(),
        final_norm: vec![0.0; w.final_norm.len()],
        head: z(&w.head),
    }
}

fn for_each_tensor(w: &mut ModelWeights, mut f: impl FnMut(&mut [f64], bool)) {
    f(w.embedding.data_mut(), true);
    f(w.head.data_mut(), true);
    f(&mut w.final_norm, false);
    for l in &mut w.layers {
        f(&mut l.attn_norm, false);
        f(&mut l.ffn_norm, false);
        for kind in ComponentKind::ALL {
            f(l.component_mut(kind).data_mut(), true);
        }
    }
}

fn grad_norm(g: &Gradients) -> f64 {
    let mut g = g.clone();
    let mut sum = 0.0;
    for_each_tensor(&mut g, |t, _| sum += t.iter().map(|v| v * v).sum::<f64>());
    sum.sqrt()
}

fn scale_all(g: &mut Gradients, s: f64) {
    for_each_tensor(g, |t, _| t.iter_mut().for_each(|v| *v *= s));
}

fn flatten(g: &Gradients) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    let mut g = g.clone();
    for_each_tensor(&mut g, |t, _| out.push(t.to_vec()));
    out
}

type Moments = (Vec<Vec<f64>>, Vec<Vec<f64>>);

fn update(w: &mut ModelWeights, g: &Gradients, config: &TrainConfig, step: usize, moments: &mut Option<Moments>) {
    let lr = config.learning_rate;
    let grads = flatten(g);
    let mut i = 0;
    match config.optimizer {
        Optimizer::Sgd => for_each_tensor(w, |t, is_matrix| {
            let decay = if is_matrix { 1.0 - lr * config.weight_decay } else { 1.0 };
            for (p, d) in t.iter_mut().zip(&grads[i]) {
                *p = *p * decay - lr * d;
            }
            i += 1;
        }),
        Optimizer::Adam { beta1, beta2, eps } => {
            let (m, v) = moments.get_or_insert_with(|| {
                let zeros: Vec<Vec<f64>> = grads.iter().map(|t| vec![0.0; t.len()]).collect();
                (zeros.clone(), zeros)
            });
            let n = (step + 1) as i32;
            let c1 = 1.0 - beta1.powi(n);
            let c2 = 1.0 - beta2.powi(n);
            for_each_tensor(w, |t, is_matrix| {
                let decay = if is_matrix { 1.0 - lr * config.weight_decay } else { 1.0 };
                for (j, p) in t.iter_mut().enumerate() {
                    let d = grads[i][j];
                    m[i][j] = beta1 * m[i][j] + (1.0 - beta1) * d;
                    v[i][j] = beta2 * v[i][j] + (1.0 - beta2) * d * d;
                    let step = (m[i][j] / c1) / ((v[i][j] / c2).sqrt() + eps);
                    *p = *p * decay - lr * step;
                }
                i += 1;
            });
        }
    }
}
