//! Inference: greedy CTC collapse over the acoustic head, and
//! length-normalized beam search over the autoregressive decoder.

use crate::autodiff::{Tape, Tensor};
use crate::data::vocab::{BOS, EOS, PAD};
use crate::data::Features;
use crate::error::{Error, Result};
use crate::loss::collapse_path;
use crate::model::Model;
use crate::rng::RngState;
use crate::scalar::Scalar;

/// Argmax per frame (lowest id on ties), collapse repeats, drop blanks.
/// Independent of the shrink mechanism, but produces the same labels by
/// construction.
pub fn greedy_ctc_decode<F: Scalar>(
    ctc_logits: &Tensor<F>,
    blank: u32,
    frame_mask: Option<&[bool]>,
) -> Vec<u32> {
    let (rows, cols) = ctc_logits.shape();
    let v = ctc_logits.value();
    let mut path = Vec::with_capacity(rows);
    for t in 0..rows {
        if let Some(m) = frame_mask {
            if !m[t] {
                continue;
            }
        }
        let row = &v[t * cols..(t + 1) * cols];
        let mut best = 0usize;
        for j in 1..cols {
            if row[j] > row[best] {
                best = j;
            }
        }
        path.push(best as u32);
    }
    collapse_path(&path, blank)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub tokens: Vec<u32>,
    /// Set when the length limit cut the hypothesis before end-of-sequence.
    pub truncated: bool,
}

/// Default decoding length limit for a source of `src_len` positions.
pub fn default_max_len(src_len: usize) -> usize {
    2 * src_len + 10
}

#[derive(Clone)]
struct Hypothesis {
    tokens: Vec<u32>, // generated tokens, bos excluded
    score: f64,       // sum of token log-probs
    finished: bool,
}

impl Hypothesis {
    fn normalized(&self) -> f64 {
        if self.tokens.is_empty() {
            f64::NEG_INFINITY
        } else {
            self.score / self.tokens.len() as f64
        }
    }
}

/// Length-normalized beam search over decoder steps. Ties break toward the
/// lexicographically smaller token sequence, so decoding is deterministic.
pub fn beam_decode<F: Scalar>(
    model: &Model<F>,
    enc: &Tensor<F>,
    beam_size: usize,
    max_len: usize,
) -> Result<DecodeOutput> {
    if beam_size < 1 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    let width = model.cfg.width();
    let tape = enc.tape().clone();
    let mut ctx = model.ctx(&tape, false, RngState::new(0), None);

    let mut live = vec![Hypothesis { tokens: Vec::new(), score: 0.0, finished: false }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..max_len {
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for hyp in &live {
            let mut input = Vec::with_capacity(hyp.tokens.len() + 1);
            input.push(BOS);
            input.extend_from_slice(&hyp.tokens);
            let logits = model.decode(&mut ctx, enc, None, &input)?;
            let lp = logits.log_softmax_rows().value();
            let last = &lp[(input.len() - 1) * width..input.len() * width];
            for (tok, &logp) in last.iter().enumerate() {
                let tok = tok as u32;
                // blank is already crushed by the decoder mask, but never
                // emit pad or a fresh bos either
                if tok == PAD || tok == BOS || tok == model.cfg.blank_id() {
                    continue;
                }
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok);
                candidates.push(Hypothesis {
                    tokens,
                    score: hyp.score + logp.to_f64().unwrap(),
                    finished: tok == EOS,
                });
            }
        }
        candidates.sort_by(|a, b| {
            b.normalized()
                .partial_cmp(&a.normalized())
                .unwrap()
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        candidates.truncate(beam_size);
        live = Vec::with_capacity(beam_size);
        for cand in candidates {
            if cand.finished {
                finished.push(cand);
            } else {
                live.push(cand);
            }
        }
        if live.is_empty() {
            break;
        }
    }

    let best_live = live.into_iter().max_by(|a, b| {
        a.normalized().partial_cmp(&b.normalized()).unwrap().then_with(|| b.tokens.cmp(&a.tokens))
    });
    let best_done = finished.into_iter().max_by(|a, b| {
        a.normalized().partial_cmp(&b.normalized()).unwrap().then_with(|| b.tokens.cmp(&a.tokens))
    });
    let pick = match (best_done, best_live) {
        (Some(d), Some(l)) => {
            if l.normalized() > d.normalized() {
                l
            } else {
                d
            }
        }
        (Some(d), None) => d,
        (None, Some(l)) => l,
        (None, None) => return Ok(DecodeOutput { tokens: Vec::new(), truncated: true }),
    };
    let truncated = !pick.finished;
    let mut tokens = pick.tokens;
    if let Some(&EOS) = tokens.last() {
        tokens.pop();
    }
    Ok(DecodeOutput { tokens, truncated })
}

/// Speech-to-translation decoding. None when the shrink degenerated and no
/// decoder-facing representation exists.
pub fn translate_speech<F: Scalar>(
    model: &Model<F>,
    speech: &Features,
    beam_size: usize,
) -> Result<Option<DecodeOutput>> {
    let tape: Tape<F> = Tape::new();
    let mut ctx = model.ctx(&tape, false, RngState::new(0), None);
    let (enc, _, _) = model.encode_speech(&mut ctx, speech)?;
    match enc {
        None => Ok(None),
        Some(enc) => {
            let max_len = default_max_len(enc.rows());
            Ok(Some(beam_decode(model, &enc, beam_size, max_len)?))
        }
    }
}

/// Text-to-translation decoding through the integrated path.
pub fn translate_text<F: Scalar>(
    model: &Model<F>,
    x_ids: &[u32],
    beam_size: usize,
) -> Result<DecodeOutput> {
    let tape: Tape<F> = Tape::new();
    let mut ctx = model.ctx(&tape, false, RngState::new(0), None);
    let enc = model.encode_text(&mut ctx, x_ids)?;
    beam_decode(model, &enc, beam_size, default_max_len(x_ids.len()))
}
