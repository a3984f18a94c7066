//! The translation network: pre-net, acoustic encoder, CTC head, shrink
//! mechanism, shared semantic encoder, decoder, and the integrated text
//! translation path. One projection matrix serves as CTC classifier,
//! source embedding, and decoder output projection.

pub mod checkpoint;
mod layers;
mod net;

pub use layers::{multi_head_attention, AttentionOut, NEG_LARGE};
pub use net::{shrink_from_logits, Ctx, MtForward, ShrinkResult, StForward};

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::scalar::{c, Scalar};

/// Name under which the tied projection lives in the parameter inventory.
pub const TIED: &str = "tied_projection";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_layers_acoustic: usize,
    pub n_layers_semantic: usize,
    pub n_layers_decoder: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub d_feat: usize,
    /// |V|; the projection is d_model x (|V|+1), blank last.
    pub vocab_size: usize,
    /// Feed shrunk states through the semantic encoder (with fresh
    /// positional encodings). Off = shrunk states go straight to the decoder.
    pub use_semantic_encoder: bool,
    /// Off = every acoustic state feeds the decoder.
    pub use_shrink: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // transformer-base geometry
        ModelConfig {
            n_layers_acoustic: 6,
            n_layers_semantic: 6,
            n_layers_decoder: 6,
            d_model: 512,
            n_heads: 8,
            d_ff: 2048,
            dropout: 0.1,
            d_feat: 80,
            vocab_size: 8000,
            use_semantic_encoder: true,
            use_shrink: true,
        }
    }
}

impl ModelConfig {
    /// Desk-scale geometry: trains on one CPU core in minutes.
    pub fn desk(d_feat: usize, vocab_size: usize) -> Self {
        ModelConfig {
            n_layers_acoustic: 2,
            n_layers_semantic: 2,
            n_layers_decoder: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            dropout: 0.1,
            d_feat,
            vocab_size,
            use_semantic_encoder: true,
            use_shrink: true,
        }
    }

    pub fn width(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn blank_id(&self) -> u32 {
        self.vocab_size as u32
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.d_feat == 0 || self.vocab_size == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<F> {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<F>,
}

/// Named parameter inventory with stable iteration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<F> {
    map: IndexMap<String, Parameter<F>>,
}

impl<F> Default for ParamStore<F> {
    fn default() -> Self {
        ParamStore { map: IndexMap::new() }
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn insert(&mut self, name: impl Into<String>, rows: usize, cols: usize, values: Vec<F>) {
        assert_eq!(rows * cols, values.len());
        self.map.insert(name.into(), Parameter { rows, cols, values });
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<F>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<F>> {
        self.map.get_mut(name)
    }

    /// Existing values for `name`, or a freshly inserted zero block.
    pub fn entry_zeros(&mut self, name: &str, rows: usize, cols: usize) -> &mut Vec<F> {
        &mut self
            .map
            .entry(name.to_string())
            .or_insert_with(|| Parameter { rows, cols, values: vec![F::zero(); rows * cols] })
            .values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter<F>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Parameter<F>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

pub struct Model<F: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParamStore<F>,
}

fn uniform_init<F: Scalar>(rng: &mut RngState, rows: usize, cols: usize) -> Vec<F> {
    let bound = 1.0 / (rows as f64).sqrt();
    (0..rows * cols).map(|_| c::<F>(rng.uniform_in(-bound, bound))).collect()
}

impl<F: Scalar> Model<F> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RngState::new(seed).fork(0xF0);
        let d = cfg.d_model;
        let mut p = ParamStore::default();

        p.insert("pre_net.w", cfg.d_feat, d, uniform_init(&mut rng, cfg.d_feat, d));
        p.insert("pre_net.b", 1, d, vec![F::zero(); d]);

        // embedding-style init for the shared projection
        let emb_std = (d as f64).powf(-0.5);
        let tied: Vec<F> = (0..d * cfg.width()).map(|_| c::<F>(rng.normal() * emb_std)).collect();
        p.insert(TIED, d, cfg.width(), tied);

        let attn = |p: &mut ParamStore<F>, rng: &mut RngState, prefix: &str| {
            for w in ["wq", "wk", "wv", "wo"] {
                p.insert(format!("{prefix}.{w}"), d, d, uniform_init(rng, d, d));
            }
            for b in ["bq", "bk", "bv", "bo"] {
                p.insert(format!("{prefix}.{b}"), 1, d, vec![F::zero(); d]);
            }
        };
        let ln = |p: &mut ParamStore<F>, prefix: &str| {
            p.insert(format!("{prefix}.g"), 1, d, vec![F::one(); d]);
            p.insert(format!("{prefix}.b"), 1, d, vec![F::zero(); d]);
        };

        let stacks: [(&str, usize, bool); 3] = [
            ("acoustic", cfg.n_layers_acoustic, false),
            ("semantic", cfg.n_layers_semantic, false),
            ("decoder", cfg.n_layers_decoder, true),
        ];
        for (stack, n_layers, is_decoder) in stacks {
            for i in 0..n_layers {
                let pre = format!("{stack}.{i}");
                attn(&mut p, &mut rng, &format!("{pre}.attn"));
                ln(&mut p, &format!("{pre}.ln1"));
                if is_decoder {
                    attn(&mut p, &mut rng, &format!("{pre}.cross"));
                    ln(&mut p, &format!("{pre}.ln3"));
                }
                p.insert(format!("{pre}.ffn.w1"), d, cfg.d_ff, uniform_init(&mut rng, d, cfg.d_ff));
                p.insert(format!("{pre}.ffn.b1"), 1, cfg.d_ff, vec![F::zero(); cfg.d_ff]);
                p.insert(format!("{pre}.ffn.w2"), cfg.d_ff, d, uniform_init(&mut rng, cfg.d_ff, d));
                p.insert(format!("{pre}.ffn.b2"), 1, d, vec![F::zero(); d]);
                ln(&mut p, &format!("{pre}.ln2"));
            }
        }

        Ok(Model { cfg, params: p })
    }

    pub fn from_parts(cfg: ModelConfig, params: ParamStore<F>) -> Self {
        Model { cfg, params }
    }

    /// The single storage behind W_ctc, W_s and W_t.
    pub fn tied_projection(&self) -> &Parameter<F> {
        self.params.get(TIED).expect("tied projection always present")
    }

    pub fn tied_projection_mut(&mut self) -> &mut Parameter<F> {
        self.params.get_mut(TIED).expect("tied projection always present")
    }

    /// Parameter names for the CTC-pretraining stage: pre-net, acoustic
    /// encoder, and the tied projection (it carries W_ctc).
    pub fn acoustic_param_names(&self) -> Vec<String> {
        self.params
            .names()
            .filter(|n| n.starts_with("pre_net") || n.starts_with("acoustic") || *n == TIED)
            .cloned()
            .collect()
    }
}
