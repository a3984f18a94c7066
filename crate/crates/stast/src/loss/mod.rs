//! The four training objectives and their weighted composition: CTC on the
//! acoustic encoder, cross-entropy on the speech- and text-conditioned
//! translation paths, and cross-modal adaptation.

mod adapt;
mod ctc;

pub use adapt::{adaptation_loss, AdaptationMode};
pub use ctc::{collapse_path, ctc_brute_force, ctc_loss, min_frames};

use crate::autodiff::Tensor;
use crate::data::vocab::{BOS, EOS};
use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};

/// Term weights; defaults follow the all-ones recipe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0, beta: 1.0, gamma: 1.0, eta: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma), ("eta", self.eta)] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} = {v} must be nonnegative")));
            }
        }
        Ok(())
    }
}

/// Per-step loss report. Component values are batch averages: per-utterance
/// for CTC and adaptation, per-token for the two cross-entropies.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_ctc: f64,
    pub l_st: f64,
    pub l_mt: f64,
    pub l_ad: f64,
    pub l_total: f64,
    pub n_utterances: usize,
    pub wordlevel_fallbacks: usize,
    pub degenerate_shrinks: usize,
}

impl LossBreakdown {
    pub fn compose(weights: &LossWeights, mut b: LossBreakdown) -> LossBreakdown {
        b.l_total = weights.alpha * b.l_ctc
            + weights.beta * b.l_st
            + weights.gamma * b.l_mt
            + weights.eta * b.l_ad;
        b
    }

    /// The arithmetic invariant every step must satisfy.
    pub fn consistent(&self, weights: &LossWeights) -> bool {
        let expect = weights.alpha * self.l_ctc
            + weights.beta * self.l_st
            + weights.gamma * self.l_mt
            + weights.eta * self.l_ad;
        (self.l_total - expect).abs() <= 1e-6
    }
}

/// Decoder input/gold pair for teacher forcing: input = bos + y,
/// gold = y + eos, both |y|+1 long.
pub fn teacher_forcing(y: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let mut input = Vec::with_capacity(y.len() + 1);
    input.push(BOS);
    input.extend_from_slice(y);
    let mut gold = Vec::with_capacity(y.len() + 1);
    gold.extend_from_slice(y);
    gold.push(EOS);
    (input, gold)
}

/// Cross-entropy of decoder logits against gold tokens; same call serves
/// the speech- and text-conditioned paths.
pub fn translation_loss<F: Scalar>(logits: &Tensor<F>, gold: &[u32], mask: &[bool]) -> Result<Tensor<F>> {
    let targets: Vec<usize> = gold.iter().map(|&t| t as usize).collect();
    logits.masked_cross_entropy(&targets, mask)
}

/// One utterance's contribution to the batch loss, before weighting.
pub struct UtteranceLosses<F: Scalar> {
    pub ctc: Option<Tensor<F>>,
    pub st: Option<Tensor<F>>,
    pub mt: Option<Tensor<F>>,
    pub ad: Option<Tensor<F>>,
    /// Token counts behind the two cross-entropies (for per-token batch
    /// averaging).
    pub st_tokens: usize,
    pub mt_tokens: usize,
    pub wordlevel_fallback: bool,
}

impl<F: Scalar> Default for UtteranceLosses<F> {
    fn default() -> Self {
        UtteranceLosses { ctc: None, st: None, mt: None, ad: None, st_tokens: 0, mt_tokens: 0, wordlevel_fallback: false }
    }
}

/// Weighted scalar for one utterance under batch-level averaging:
/// CTC and adaptation divide by the utterance count, cross-entropies are
/// reweighted from per-utterance means to the batch per-token mean.
pub fn utterance_total<F: Scalar>(
    u: &UtteranceLosses<F>,
    weights: &LossWeights,
    n_utterances: usize,
    st_tokens_total: usize,
    mt_tokens_total: usize,
) -> Option<Tensor<F>> {
    let mut terms: Vec<Tensor<F>> = Vec::new();
    let mut push = |t: &Option<Tensor<F>>, w: f64| {
        if let Some(t) = t {
            if w != 0.0 {
                terms.push(t.scale(c::<F>(w)));
            }
        }
    };
    push(&u.ctc, weights.alpha / n_utterances as f64);
    push(&u.st, weights.beta * u.st_tokens as f64 / st_tokens_total.max(1) as f64);
    push(&u.mt, weights.gamma * u.mt_tokens as f64 / mt_tokens_total.max(1) as f64);
    push(&u.ad, weights.eta / n_utterances as f64);
    let mut it = terms.into_iter();
    let first = it.next()?;
    Some(it.fold(first, |a, b| a.add(&b).expect("scalar terms")))
}
