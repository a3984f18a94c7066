//! Forward passes: speech path (pre-net, acoustic encoder, CTC head,
//! shrink, semantic encoder, decoder) and the integrated text path that
//! shares the semantic encoder, decoder, and the tied projection.

use indexmap::IndexMap;

use crate::autodiff::{Tape, Tensor};
use crate::data::Features;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::scalar::{c, Scalar};

use super::layers::{decoder_layer, encoder_layer, linear, positional_encoding, NEG_LARGE};
use crate::data::vocab::BOS;

use super::{Model, ModelConfig, TIED};

/// Per-forward execution context: the tape, staged parameters, train-mode
/// dropout, and the RNG driving it.
pub struct Ctx<F: Scalar> {
    tape: Tape<F>,
    cfg: ModelConfig,
    params: IndexMap<String, Tensor<F>>,
    train: bool,
    rng: RngState,
}

impl<F: Scalar> Ctx<F> {
    pub fn tape(&self) -> &Tape<F> {
        &self.tape
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn p(&self, name: &str) -> Tensor<F> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not staged on this context"))
            .clone()
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn dropout(&mut self, t: &Tensor<F>) -> Tensor<F> {
        let rate = self.cfg.dropout;
        t.dropout(rate, self.train, &mut self.rng)
    }

    /// Gradients of every staged parameter, keyed by name. Parameters the
    /// backward sweep never reached report zeros.
    pub fn param_grads(&self) -> IndexMap<String, Vec<F>> {
        self.params
            .iter()
            .map(|(n, t)| {
                let g = t.grad().unwrap_or_else(|| vec![F::zero(); t.rows() * t.cols()]);
                (n.clone(), g)
            })
            .collect()
    }

    pub fn param_tensor(&self, name: &str) -> Option<&Tensor<F>> {
        self.params.get(name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShrinkResult {
    /// Strictly increasing frame indices that survived.
    pub kept_indices: Vec<usize>,
    /// Blank-free, repetition-collapsed argmax path.
    pub collapsed_labels: Vec<u32>,
    /// Set when every frame argmaxed to blank.
    pub degenerate: bool,
}

pub struct StForward<F: Scalar> {
    pub ctc_logits: Tensor<F>,
    pub shrink: ShrinkResult,
    /// Semantic speech representation; absent when the shrink degenerated.
    pub h_s: Option<Tensor<F>>,
    pub st_logits: Option<Tensor<F>>,
}

pub struct MtForward<F: Scalar> {
    pub h_x: Tensor<F>,
    pub mt_logits: Tensor<F>,
}

impl<F: Scalar> Model<F> {
    /// Stage parameters onto a tape. `subset` limits which parameters are
    /// available (and thus which can receive gradients); `None` stages all.
    /// Eval contexts (`train = false`) stage constants, so no gradient
    /// buffers ever appear.
    pub fn ctx(&self, tape: &Tape<F>, train: bool, rng: RngState, subset: Option<&[String]>) -> Ctx<F> {
        let wanted: Option<std::collections::HashSet<&str>> =
            subset.map(|s| s.iter().map(|x| x.as_str()).collect());
        let mut params = IndexMap::new();
        for (name, p) in self.params.iter() {
            if let Some(w) = &wanted {
                if !w.contains(name.as_str()) {
                    continue;
                }
            }
            let t = if train {
                tape.var(p.rows, p.cols, p.values.clone())
            } else {
                tape.constant(p.rows, p.cols, p.values.clone())
            };
            params.insert(name.clone(), t);
        }
        Ctx { tape: tape.clone(), cfg: self.cfg.clone(), params, train, rng }
    }

    /// Affine projection of speech features to d_model, plus sinusoidal
    /// positions and dropout.
    pub fn pre_net(&self, ctx: &mut Ctx<F>, speech: &Features) -> Result<Tensor<F>> {
        if speech.cols != self.cfg.d_feat {
            return Err(Error::Dim {
                op: "pre_net",
                lhs: vec![speech.rows, speech.cols],
                rhs: vec![self.cfg.d_feat],
            });
        }
        let vals: Vec<F> = speech.data.iter().map(|&v| c::<F>(v as f64)).collect();
        let x = ctx.tape().constant(speech.rows, speech.cols, vals);
        let projected = linear(&x, &ctx.p("pre_net.w"), &ctx.p("pre_net.b"))?;
        let pe = positional_encoding(ctx.tape(), speech.rows, self.cfg.d_model);
        let out = projected.add(&pe)?;
        Ok(ctx.dropout(&out))
    }

    pub fn encode_acoustic(&self, ctx: &mut Ctx<F>, x: &Tensor<F>, frame_mask: Option<&[bool]>) -> Result<Tensor<F>> {
        let mut h = x.clone();
        for i in 0..self.cfg.n_layers_acoustic {
            h = encoder_layer(ctx, &format!("acoustic.{i}"), &h, frame_mask)?;
        }
        Ok(h)
    }

    /// Linear map through the tied projection (W_ctc view); logits, not probs.
    pub fn ctc_logits(&self, ctx: &mut Ctx<F>, h: &Tensor<F>) -> Result<Tensor<F>> {
        h.matmul(&ctx.p(TIED))
    }

    /// Frame argmax over the CTC logits, keeping the first frame of every
    /// non-blank run. Gradients flow through kept rows of `h` only.
    pub fn shrink(
        &self,
        h: &Tensor<F>,
        ctc_logits: &Tensor<F>,
        frame_mask: Option<&[bool]>,
    ) -> Result<(ShrinkResult, Option<Tensor<F>>)> {
        let result = shrink_from_logits(&ctc_logits.value(), ctc_logits.rows(), ctc_logits.cols(), self.cfg.blank_id(), frame_mask);
        if result.degenerate {
            return Ok((result, None));
        }
        let shrunk = h.gather_rows(&result.kept_indices)?;
        Ok((result, Some(shrunk)))
    }

    /// Shared semantic encoder over shrunk speech states or embedded text.
    /// Fresh positional encodings are added first: shrinking destroyed the
    /// frame-time indexing, and the text path gets positions the same way.
    pub fn encode_semantic(&self, ctx: &mut Ctx<F>, states: &Tensor<F>, mask: Option<&[bool]>) -> Result<Tensor<F>> {
        if states.rows() == 0 {
            return Err(Error::DegenerateInput("semantic encoder got a zero-length sequence".into()));
        }
        let pe = positional_encoding(ctx.tape(), states.rows(), self.cfg.d_model);
        let mut h = states.add(&pe)?;
        h = ctx.dropout(&h);
        for i in 0..self.cfg.n_layers_semantic {
            h = encoder_layer(ctx, &format!("semantic.{i}"), &h, mask)?;
        }
        Ok(h)
    }

    /// Transpose-view lookup into the tied projection, scaled by sqrt(d_model).
    pub fn embed_source(&self, ctx: &mut Ctx<F>, ids: &[u32]) -> Result<Tensor<F>> {
        let tied = ctx.p(TIED);
        if ids.is_empty() {
            return Ok(ctx.tape().constant(0, self.cfg.d_model, Vec::new()));
        }
        for (pos, &id) in ids.iter().enumerate() {
            if id as usize >= self.cfg.vocab_size {
                return Err(Error::Index { op: "embed_source", id: id as usize, limit: self.cfg.vocab_size, position: pos });
            }
        }
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let emb = tied.embed_cols(&idx)?.scale(c::<F>((self.cfg.d_model as f64).sqrt()));
        let pe = positional_encoding(ctx.tape(), ids.len(), self.cfg.d_model);
        let out = emb.add(&pe)?;
        Ok(ctx.dropout(&out))
    }

    /// Teacher-forced decoder: causal self-attention, cross-attention to
    /// `enc_out`, projection through the tied W_t view. The blank column is
    /// pushed to -inf — blank is never a legal target token.
    pub fn decode(
        &self,
        ctx: &mut Ctx<F>,
        enc_out: &Tensor<F>,
        enc_mask: Option<&[bool]>,
        y_shifted: &[u32],
    ) -> Result<Tensor<F>> {
        if y_shifted.first() != Some(&BOS) {
            return Err(Error::Contract("decoder input must begin with <bos>".into()));
        }
        let mut x = self.embed_target(ctx, y_shifted)?;
        for i in 0..self.cfg.n_layers_decoder {
            x = decoder_layer(ctx, &format!("decoder.{i}"), &x, enc_out, enc_mask)?;
        }
        let logits = x.matmul(&ctx.p(TIED))?;
        let mut blank_row = vec![F::zero(); self.cfg.width()];
        blank_row[self.cfg.blank_id() as usize] = c::<F>(NEG_LARGE);
        let mask = ctx.tape().constant(1, self.cfg.width(), blank_row);
        logits.add_row(&mask)
    }

    fn embed_target(&self, ctx: &mut Ctx<F>, ids: &[u32]) -> Result<Tensor<F>> {
        // source and target share the vocabulary, so the same tied view
        // embeds both sides
        self.embed_source(ctx, ids)
    }

    /// Full speech path. `y_shifted` (bos-prefixed target) enables the
    /// teacher-forced decoder; without it only encoder outputs are produced.
    pub fn forward_st(&self, ctx: &mut Ctx<F>, speech: &Features, y_shifted: Option<&[u32]>) -> Result<StForward<F>> {
        let (enc, shrink, ctc) = self.encode_speech(ctx, speech)?;
        let (h_s, st_logits) = match enc {
            None => (None, None),
            Some(enc) => {
                let logits = match y_shifted {
                    Some(y) => Some(self.decode(ctx, &enc, None, y)?),
                    None => None,
                };
                (Some(enc), logits)
            }
        };
        Ok(StForward { ctc_logits: ctc, shrink, h_s, st_logits })
    }

    /// Speech-side encoder chain; returns the decoder-facing representation
    /// (None when the shrink degenerated), the shrink result, and CTC logits.
    pub fn encode_speech(&self, ctx: &mut Ctx<F>, speech: &Features) -> Result<(Option<Tensor<F>>, ShrinkResult, Tensor<F>)> {
        let pre = self.pre_net(ctx, speech)?;
        let h = self.encode_acoustic(ctx, &pre, None)?;
        let ctc = self.ctc_logits(ctx, &h)?;
        let (shrink, states) = if self.cfg.use_shrink {
            let (s, states) = self.shrink(&h, &ctc, None)?;
            (s, states)
        } else {
            // diagnostics still reflect the collapse, but every state flows on
            let s = shrink_from_logits(&ctc.value(), ctc.rows(), ctc.cols(), self.cfg.blank_id(), None);
            (s, Some(h.clone()))
        };
        let enc = match states {
            None => None,
            Some(states) => {
                if self.cfg.use_semantic_encoder {
                    Some(self.encode_semantic(ctx, &states, None)?)
                } else {
                    Some(states)
                }
            }
        };
        Ok((enc, shrink, ctc))
    }

    /// Integrated text path: embed transcription, shared semantic encoder,
    /// shared decoder.
    pub fn forward_mt(&self, ctx: &mut Ctx<F>, x_ids: &[u32], y_shifted: &[u32]) -> Result<MtForward<F>> {
        if x_ids.is_empty() {
            return Err(Error::DegenerateInput("empty source for the text path".into()));
        }
        let emb = self.embed_source(ctx, x_ids)?;
        let h_x = if self.cfg.use_semantic_encoder {
            self.encode_semantic(ctx, &emb, None)?
        } else {
            emb
        };
        let mt_logits = self.decode(ctx, &h_x, None, y_shifted)?;
        Ok(MtForward { h_x, mt_logits })
    }

    /// Text-path encoder output only (used by adaptation).
    pub fn encode_text(&self, ctx: &mut Ctx<F>, x_ids: &[u32]) -> Result<Tensor<F>> {
        let emb = self.embed_source(ctx, x_ids)?;
        if self.cfg.use_semantic_encoder {
            self.encode_semantic(ctx, &emb, None)
        } else {
            Ok(emb)
        }
    }
}

/// Collapse-by-argmax over raw logit values. Tie-break: lowest label id.
pub fn shrink_from_logits<F: Scalar>(
    values: &[F],
    rows: usize,
    cols: usize,
    blank: u32,
    frame_mask: Option<&[bool]>,
) -> ShrinkResult {
    let mut kept_indices = Vec::new();
    let mut collapsed_labels = Vec::new();
    let mut prev: Option<u32> = None;
    for t in 0..rows {
        if let Some(m) = frame_mask {
            if !m[t] {
                continue;
            }
        }
        let row = &values[t * cols..(t + 1) * cols];
        let mut best = 0usize;
        for j in 1..cols {
            if row[j] > row[best] {
                best = j;
            }
        }
        let label = best as u32;
        if label != blank && prev != Some(label) {
            kept_indices.push(t);
            collapsed_labels.push(label);
        }
        prev = Some(label);
    }
    let degenerate = kept_indices.is_empty();
    ShrinkResult { kept_indices, collapsed_labels, degenerate }
}
