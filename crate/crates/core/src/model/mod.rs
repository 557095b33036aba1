//! A small LLaMA-style decoder: token embedding, pre-norm blocks of rotary
//! multi-head attention and a SiLU-gated feed-forward network, a final
//! RMSNorm and an untied output head.
//!
//! Activations are token-major (`tokens × features`) and every projection is
//! applied on the right, `y = x·W`, so a component's weight has shape
//! `d_in × d_out`.

mod compressed;
pub(crate) mod forward;
mod perplexity;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, SlimError};
use crate::linalg::Matrix;

pub use compressed::{CompressedFfn, CompressedLayer, CompressedModel};
pub use forward::{forward, forward_compressed, silu, ForwardTrace, LayerTrace};
pub use perplexity::{perplexity, LanguageModel};
pub use train::{loss_and_gradients, train, Evaluation, Gradients, Optimizer, TrainConfig, TrainReport};

pub type Token = u32;

pub const NORM_EPS: f64 = 1e-6;
pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    /// Disabling RMSNorm turns every norm into the identity. Only useful for
    /// tests that need exact homogeneity.
    pub rms_norm: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(SlimError::config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(SlimError::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(SlimError::config(format!(
                "rotary embeddings need an even head dimension, got {}",
                self.head_dim()
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `(d_in, d_out)` of a component's weight.
    pub fn component_shape(&self, kind: ComponentKind) -> (usize, usize) {
        match kind {
            ComponentKind::Q | ComponentKind::K | ComponentKind::V | ComponentKind::O => (self.d_model, self.d_model),
            ComponentKind::Gate | ComponentKind::Up => (self.d_model, self.d_ff),
            ComponentKind::Down => (self.d_ff, self.d_model),
        }
    }

    pub fn layer_params(&self) -> usize {
        ComponentKind::ALL
            .iter()
            .map(|k| {
                let (i, o) = self.component_shape(*k);
                i * o
            })
            .sum::<usize>()
            + 2 * self.d_model
    }

    /// Embedding, final norm and head.
    pub fn shared_params(&self) -> usize {
        2 * self.vocab_size * self.d_model + self.d_model
    }

    pub fn total_params(&self) -> usize {
        self.n_layers * self.layer_params() + self.shared_params()
    }
}

/// The seven projection matrices of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ComponentKind {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl ComponentKind {
    pub const ALL: [ComponentKind; 7] = [
        ComponentKind::Q,
        ComponentKind::K,
        ComponentKind::V,
        ComponentKind::O,
        ComponentKind::Gate,
        ComponentKind::Up,
        ComponentKind::Down,
    ];

    pub const ATTENTION: [ComponentKind; 4] = [ComponentKind::Q, ComponentKind::K, ComponentKind::V, ComponentKind::O];

    pub fn as_str(self) -> &'static str {
        match self {
            ComponentKind::Q => "q",
            ComponentKind::K => "k",
            ComponentKind::V => "v",
            ComponentKind::O => "o",
            ComponentKind::Gate => "gate",
            ComponentKind::Up => "up",
            ComponentKind::Down => "down",
        }
    }

    pub fn is_attention(self) -> bool {
        Self::ATTENTION.contains(&self)
    }
}

impl fmt::Display for ComponentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ComponentKind {
    type Err = SlimError;

    fn from_str(s: &str) -> Result<Self> {
        ComponentKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| SlimError::config(format!("unknown component kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ComponentId {
    pub layer: usize,
    pub kind: ComponentKind,
}

impl ComponentId {
    pub fn new(layer: usize, kind: ComponentKind) -> Self {
        ComponentId { layer, kind }
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layers.{}.{}", self.layer, self.kind)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f64>,
    pub ffn_norm: Vec<f64>,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub o: Matrix,
    pub gate: Matrix,
    pub up: Matrix,
    pub down: Matrix,
}

impl LayerWeights {
    pub fn component(&self, kind: ComponentKind) -> &Matrix {
        match kind {
            ComponentKind::Q => &self.q,
            ComponentKind::K => &self.k,
            ComponentKind::V => &self.v,
            ComponentKind::O => &self.o,
            ComponentKind::Gate => &self.gate,
            ComponentKind::Up => &self.up,
            ComponentKind::Down => &self.down,
        }
    }

    pub fn component_mut(&mut self, kind: ComponentKind) -> &mut Matrix {
        match kind {
            ComponentKind::Q => &mut self.q,
            ComponentKind::K => &mut self.k,
            ComponentKind::V => &mut self.v,
            ComponentKind::O => &mut self.o,
            ComponentKind::Gate => &mut self.gate,
            ComponentKind::Up => &mut self.up,
            ComponentKind::Down => &mut self.down,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    /// `vocab × d_model`
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f64>,
    /// `d_model × vocab`
    pub head: Matrix,
}

impl ModelWeights {
    pub fn component(&self, id: ComponentId) -> &Matrix {
        self.layers[id.layer].component(id.kind)
    }

    /// Checks every tensor against the shapes implied by the config.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let expect = |what: &str, m: &Matrix, shape: (usize, usize)| {
            if m.shape() != shape {
                Err(SlimError::shape(format!(
                    "{what}: expected {}x{}, found {}x{}",
                    shape.0,
                    shape.1,
                    m.rows(),
                    m.cols()
                )))
            } else {
                Ok(())
            }
        };
        expect("embedding", &self.embedding, (c.vocab_size, c.d_model))?;
        expect("head", &self.head, (c.d_model, c.vocab_size))?;
        if self.layers.len() != c.n_layers {
            return Err(SlimError::shape(format!(
                "{} layers, config says {}",
                self.layers.len(),
                c.n_layers
            )));
        }
        let norm_ok = |v: &Vec<f64>| v.len() == c.d_model;
        if !norm_ok(&self.final_norm) {
            return Err(SlimError::shape("final norm length"));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if !norm_ok(&layer.attn_norm) || !norm_ok(&layer.ffn_norm) {
                return Err(SlimError::shape(format!("layer {i} norm length")));
            }
            for kind in ComponentKind::ALL {
                expect(
                    &ComponentId::new(i, kind).to_string(),
                    layer.component(kind),
                    c.component_shape(kind),
                )?;
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.config.total_params()
    }
}

/// Deterministic initialization: every matrix entry drawn from
/// `N(0, 1/d_model)`, norm scales at one.
pub fn init_weights(config: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0 / (config.d_model as f64).sqrt()).expect("positive std");
    let mut draw = |rows: usize, cols: usize| Matrix::from_fn(rows, cols, |_, _| normal.sample(&mut rng));
    let embedding = draw(config.vocab_size, config.d_model);
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let mut m = |kind| {
            let (i, o) = config.component_shape(kind);
            draw(i, o)
        };
        let q = m(ComponentKind::Q);
        let k = m(ComponentKind::K);
        let v = m(ComponentKind::V);
        let o = m(ComponentKind::O);
        let gate = m(ComponentKind::Gate);
        let up = m(ComponentKind::Up);
        let down = m(ComponentKind::Down);
        layers.push(LayerWeights {
            attn_norm: vec![1.0; config.d_model],
            ffn_norm: vec![1.0; config.d_model],
            q,
            k,
            v,
            o,
            gate,
            up,
            down,
        });
    }
    let head = draw(config.d_model, config.vocab_size);
    Ok(ModelWeights {
        config: config.clone(),
        embedding,
        layers,
        final_norm: vec![1.0; config.d_model],
        head,
    })
}
