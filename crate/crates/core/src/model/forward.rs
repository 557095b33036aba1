use crate::error::{Result, SlimError};
use crate::linalg::Matrix;
use crate::model::{
    ComponentId, ComponentKind, CompressedFfn, CompressedLayer, CompressedModel, LayerWeights, ModelConfig,
    ModelWeights, Token, NORM_EPS, ROPE_BASE,
};

/// Activations recorded during a traced forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
    pub logits: Matrix,
}

/// Inputs seen by the projections of one block, token-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// Normed residual stream fed to q, k and v.
    pub attn_input: Matrix,
    /// Concatenated head outputs fed to o.
    pub o_input: Matrix,
    /// Normed residual stream fed to gate and up.
    pub ffn_input: Matrix,
    /// `SiLU(x·W_gate) ⊙ (x·W_up)`, the input of down.
    pub h: Matrix,
}

impl LayerTrace {
    pub fn input(&self, kind: ComponentKind) -> &Matrix {
        match kind {
            ComponentKind::Q | ComponentKind::K | ComponentKind::V => &self.attn_input,
            ComponentKind::O => &self.o_input,
            ComponentKind::Gate | ComponentKind::Up => &self.ffn_input,
            ComponentKind::Down => &self.h,
        }
    }
}

impl ForwardTrace {
    pub fn input(&self, id: ComponentId) -> &Matrix {
        self.layers[id.layer].input(id.kind)
    }
}

#[inline]
pub fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

/// Logits (`tokens × vocab`) for a dense model, optionally traced.
pub fn forward(weights: &ModelWeights, tokens: &[Token], trace: bool) -> Result<(Matrix, Option<ForwardTrace>)> {
    run(weights, tokens, trace)
}

/// Same contract as [`forward`] for a compressed model.
pub fn forward_compressed(
    model: &CompressedModel,
    tokens: &[Token],
    trace: bool,
) -> Result<(Matrix, Option<ForwardTrace>)> {
    run(model, tokens, trace)
}

/// What a forward pass needs from a stack of blocks.
pub(crate) trait Network {
    type Block: Block;
    fn config(&self) -> &ModelConfig;
    fn embedding(&self) -> &Matrix;
    fn blocks(&self) -> &[Self::Block];
    fn final_norm(&self) -> &[f64];
    fn head(&self) -> &Matrix;
}

pub(crate) trait Block {
    fn attn_norm(&self) -> &[f64];
    fn ffn_norm(&self) -> &[f64];
    /// Applies q, k, v or o.
    fn project(&self, kind: ComponentKind, x: &Matrix) -> Result<Matrix>;
    /// FFN output, plus the intermediate activation when requested.
    fn ffn(&self, x: &Matrix, want_h: bool) -> Result<(Matrix, Option<Matrix>)>;
}

impl Network for ModelWeights {
    type Block = LayerWeights;
    fn config(&self) -> &ModelConfig {
        &self.config
    }
    fn embedding(&self) -> &Matrix {
        &self.embedding
    }
    fn blocks(&self) -> &[LayerWeights] {
        &self.layers
    }
    fn final_norm(&self) -> &[f64] {
        &self.final_norm
    }
    fn head(&self) -> &Matrix {
        &self.head
    }
}

impl Block for LayerWeights {
    fn attn_norm(&self) -> &[f64] {
        &self.attn_norm
    }
    fn ffn_norm(&self) -> &[f64] {
        &self.ffn_norm
    }
    fn project(&self, kind: ComponentKind, x: &Matrix) -> Result<Matrix> {
        x.matmul(self.component(kind))
    }
    fn ffn(&self, x: &Matrix, want_h: bool) -> Result<(Matrix, Option<Matrix>)> {
        let h = gated(&x.matmul(&self.gate)?, &x.matmul(&self.up)?);
        let out = h.matmul(&self.down)?;
        Ok((out, want_h.then_some(h)))
    }
}

impl Network for CompressedModel {
    type Block = CompressedLayer;
    fn config(&self) -> &ModelConfig {
        &self.config
    }
    fn embedding(&self) -> &Matrix {
        &self.embedding
    }
    fn blocks(&self) -> &[CompressedLayer] {
        &self.layers
    }
    fn final_norm(&self) -> &[f64] {
        &self.final_norm
    }
    fn head(&self) -> &Matrix {
        &self.head
    }
}

impl Block for CompressedLayer {
    fn attn_norm(&self) -> &[f64] {
        &self.attn_norm
    }
    fn ffn_norm(&self) -> &[f64] {
        &self.ffn_norm
    }
    fn project(&self, kind: ComponentKind, x: &Matrix) -> Result<Matrix> {
        self.attention(kind).apply(x)
    }
    fn ffn(&self, x: &Matrix, want_h: bool) -> Result<(Matrix, Option<Matrix>)> {
        match &self.ffn {
            CompressedFfn::Dense { gate, up, down } => {
                let h = gated(&gate.apply(x)?, &up.apply(x)?);
                let out = down.apply(&h)?;
                Ok((out, want_h.then_some(h)))
            }
            CompressedFfn::Split(split) => split.forward(x, want_h),
        }
    }
}

/// `SiLU(g) ⊙ u`
pub(crate) fn gated(g: &Matrix, u: &Matrix) -> Matrix {
    let mut h = g.clone();
    for (hv, uv) in h.data_mut().iter_mut().zip(u.data()) {
        *hv = silu(*hv) * uv;
    }
    h
}

pub(crate) fn check_tokens(config: &ModelConfig, tokens: &[Token]) -> Result<()> {
    if tokens.is_empty() {
        return Err(SlimError::input("empty token sequence"));
    }
    if tokens.len() > config.max_seq_len {
        return Err(SlimError::input(format!(
            "sequence of {} tokens exceeds max_seq_len {}",
            tokens.len(),
            config.max_seq_len
        )));
    }
    if let Some(bad) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(SlimError::input(format!(
            "token {bad} outside vocabulary of {}",
            config.vocab_size
        )));
    }
    Ok(())
}

fn run<N: Network>(net: &N, tokens: &[Token], trace: bool) -> Result<(Matrix, Option<ForwardTrace>)> {
    let config = net.config();
    check_tokens(config, tokens)?;
    let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let mut x = net.embedding().select_rows(&idx).expect("nonempty tokens");
    let rope = Rope::new(config.head_dim(), tokens.len());
    let mut layers = Vec::new();

    for block in net.blocks() {
        let xn = rms_norm(&x, block.attn_norm(), config.rms_norm);
        let mut q = block.project(ComponentKind::Q, &xn)?;
        let mut k = block.project(ComponentKind::K, &xn)?;
        let v = block.project(ComponentKind::V, &xn)?;
        rope.apply(&mut q, config.n_heads, false);
        rope.apply(&mut k, config.n_heads, false);
        let attn = causal_attention(&q, &k, &v, config.n_heads);
        let o = block.project(ComponentKind::O, &attn)?;
        x.add_assign(&o)?;

        let xn2 = rms_norm(&x, block.ffn_norm(), config.rms_norm);
        let (out, h) = block.ffn(&xn2, trace)?;
        x.add_assign(&out)?;

        if trace {
            layers.push(LayerTrace {
                attn_input: xn,
                o_input: attn,
                ffn_input: xn2,
                h: h.expect("requested intermediate"),
            });
        }
    }

    let xf = rms_norm(&x, net.final_norm(), config.rms_norm);
    let logits = xf.matmul(net.head())?;
    if !logits.is_all_finite() {
        return Err(SlimError::NonFinite("logits"));
    }
    let trace = trace.then(|| ForwardTrace {
        layers,
        logits: logits.clone(),
    });
    Ok((logits, trace))
}

/// Row-wise `x / rms(x) ⊙ scale`; the identity when disabled.
pub(crate) fn rms_norm(x: &Matrix, scale: &[f64], enabled: bool) -> Matrix {
    if !enabled {
        return x.clone();
    }
    let mut y = x.clone();
    for r in 0..y.rows() {
        let row = y.row_mut(r);
        let inv = inv_rms(row);
        for (v, s) in row.iter_mut().zip(scale) {
            *v *= inv * s;
        }
    }
    y
}

#[inline]
pub(crate) fn inv_rms(row: &[f64]) -> f64 {
    let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
    1.0 / (ms + NORM_EPS).sqrt()
}

/// Rotary tables for positions `0..len`, pairing dimensions `(2i, 2i+1)`
/// inside each head.
pub(crate) struct Rope {
    cos: Vec<f64>,
    sin: Vec<f64>,
    half: usize,
}

impl Rope {
    pub(crate) fn new(head_dim: usize, len: usize) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(len * half);
        let mut sin = Vec::with_capacity(len * half);
        for pos in 0..len {
            for i in 0..half {
                let theta = ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64);
                let angle = pos as f64 * theta;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Rope { cos, sin, half }
    }

    /// Rotates in place; `inverse` applies the transpose rotation, which is
    /// what back-propagation needs.
    pub(crate) fn apply(&self, m: &mut Matrix, n_heads: usize, inverse: bool) {
        let head_dim = 2 * self.half;
        let sign = if inverse { -1.0 } else { 1.0 };
        for pos in 0..m.rows() {
            let row = m.row_mut(pos);
            for h in 0..n_heads {
                for i in 0..self.half {
                    let c = self.cos[pos * self.half + i];
                    let s = sign * self.sin[pos * self.half + i];
                    let a = h * head_dim + 2 * i;
                    let (x0, x1) = (row[a], row[a + 1]);
                    row[a] = x0 * c - x1 * s;
                    row[a + 1] = x0 * s + x1 * c;
                }
            }
        }
    }
}

/// Causal softmax attention per head; returns the concatenated head outputs.
pub(crate) fn causal_attention(q: &Matrix, k: &Matrix, v: &Matrix, n_heads: usize) -> Matrix {
    causal_attention_probs(q, k, v, n_heads).0
}

/// Like [`causal_attention`], also returning each head's `t × t` row-major
/// probability table (zero above the diagonal).
pub(crate) fn causal_attention_probs(q: &Matrix, k: &Matrix, v: &Matrix, n_heads: usize) -> (Matrix, Vec<Vec<f64>>) {
    let (t, d) = q.shape();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = Matrix::zeros(t, d);
    let mut tables = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let off = h * hd;
        let mut probs = vec![0.0; t * t];
        for i in 0..t {
            let qi = &q.row(i)[off..off + hd];
            let p = &mut probs[i * t..i * t + i + 1];
            let mut max = f64::NEG_INFINITY;
            for (j, pj) in p.iter_mut().enumerate() {
                let kj = &k.row(j)[off..off + hd];
                *pj = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                max = max.max(*pj);
            }
            let mut z = 0.0;
            for pj in p.iter_mut() {
                *pj = (*pj - max).exp();
                z += *pj;
            }
            let oi = &mut out.row_mut(i)[off..off + hd];
            for (j, pj) in p.iter_mut().enumerate() {
                *pj /= z;
                let vj = &v.row(j)[off..off + hd];
                for (o, x) in oi.iter_mut().zip(vj) {
                    *o += *pj * x;
                }
            }
        }
        tables.push(probs);
    }
    (out, tables)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_weights;

    fn config() -> ModelConfig {
        ModelConfig {
            vocab_size: 17,
            d_model: 8,
            d_ff: 12,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 12,
            rms_norm: true,
        }
    }

    #[test]
    fn single_token_logits_shape() {
        let w = init_weights(&config(), 3).unwrap();
        let (logits, trace) = forward(&w, &[5], false).unwrap();
        assert_eq!(logits.shape(), (1, 17));
        assert!(trace.is_none());
    }

    #[test]
    fn prefix_invariance() {
        let w = init_weights(&config(), 3).unwrap();
        let seq = [1, 4, 9, 16, 2, 0, 7, 3];
        let (full, _) = forward(&w, &seq, false).unwrap();
        for t in 0..seq.len() {
            let (prefix, _) = forward(&w, &seq[..=t], false).unwrap();
            for (a, b) in prefix.row(t).iter().zip(full.row(t)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_tokens() {
        let w = init_weights(&config(), 3).unwrap();
        assert!(matches!(forward(&w, &[17], false), Err(SlimError::Input(_))));
        assert!(matches!(forward(&w, &[], false), Err(SlimError::Input(_))));
        assert!(matches!(forward(&w, &[0; 13], false), Err(SlimError::Input(_))));
    }

    #[test]
    fn trace_replays_intermediate() {
        let w = init_weights(&config(), 5).unwrap();
        let (_, trace) = forward(&w, &[3, 1, 4, 1, 5, 9], true).unwrap();
        let trace = trace.unwrap();
        for (l, lt) in trace.layers.iter().enumerate() {
            let x = &lt.ffn_input;
            let h = gated(
                &x.matmul(&w.layers[l].gate).unwrap(),
                &x.matmul(&w.layers[l].up).unwrap(),
            );
            assert!(h.max_abs_diff(&lt.h) <= 1e-10);
        }
    }

    #[test]
    fn silu_basics() {
        assert_eq!(silu(0.0), 0.0);
        let grid: Vec<f64> = (0..200).map(|i| i as f64 * 0.05).collect();
        assert!(grid.windows(2).all(|w| silu(w[0]) < silu(w[1])));
    }

    #[test]
    fn rope_inverse_undoes_rotation() {
        let rope = Rope::new(4, 5);
        let orig = Matrix::from_fn(5, 8, |r, c| (r * 8 + c) as f64 * 0.1);
        let mut m = orig.clone();
        rope.apply(&mut m, 2, false);
        assert!(m.max_abs_diff(&orig) > 1e-3);
        rope.apply(&mut m, 2, true);
        assert!(m.max_abs_diff(&orig) < 1e-12);
    }
}
