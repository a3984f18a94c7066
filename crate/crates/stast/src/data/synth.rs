//! Deterministic synthetic speech-translation corpus.
//!
//! The generator reproduces the three modality gaps the model has to cope
//! with: speech is much longer than text (each token expands to several
//! frames plus optional silence), features are fixed non-trainable vectors
//! (one frozen prototype per token), and speech is noisy while text is not
//! (Gaussian noise on every frame). The translation is a token bijection
//! followed by sequence reversal, so a perfect translator exists but must
//! reorder globally.

use super::vocab::Vocabulary;
use super::{Features, Utterance};
use crate::error::{Error, Result};
use crate::rng::RngState;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    /// Total vocabulary size |V| including the three specials.
    pub vocab_size: usize,
    pub d_feat: usize,
    /// Sentence length range [min, max], inclusive.
    pub len_range: (usize, usize),
    /// Frames emitted per token, inclusive range.
    pub frames_per_token: (usize, usize),
    /// Gaussian noise added to every frame element.
    pub noise_sigma: f64,
    /// Probability of a silence block between consecutive tokens.
    pub p_silence: f64,
    /// Silence block length range, inclusive.
    pub silence_range: (usize, usize),
    /// Number of utterances.
    pub corpus_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 17,
            vocab_size: 30,
            d_feat: 16,
            len_range: (3, 10),
            frames_per_token: (2, 6),
            noise_sigma: 0.1,
            p_silence: 0.3,
            silence_range: (1, 3),
            corpus_size: 2000,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::Config(format!(
                "vocab_size must be at least 4 to fit the special tokens, got {}",
                self.vocab_size
            )));
        }
        if self.frames_per_token.0 < 1 || self.frames_per_token.0 > self.frames_per_token.1 {
            return Err(Error::Config(format!("invalid frames_per_token range {:?}", self.frames_per_token)));
        }
        if self.len_range.0 < 1 || self.len_range.0 > self.len_range.1 {
            return Err(Error::Config(format!("invalid len_range {:?}", self.len_range)));
        }
        if !(0.0..=1.0).contains(&self.p_silence) {
            return Err(Error::Config(format!("p_silence must be in [0,1], got {}", self.p_silence)));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config(format!("noise_sigma must be nonnegative, got {}", self.noise_sigma)));
        }
        if self.silence_range.0 > self.silence_range.1 {
            return Err(Error::Config(format!("invalid silence_range {:?}", self.silence_range)));
        }
        Ok(())
    }

    /// Analytic expectation of T_s / T_x, silence included.
    pub fn expected_frames_per_token(&self) -> f64 {
        let (rmin, rmax) = self.frames_per_token;
        let mean_r = (rmin + rmax) as f64 / 2.0;
        let (smin, smax) = self.silence_range;
        let mean_sil = (smin + smax) as f64 / 2.0;
        // silence slots per token: (L-1)/L, averaged over the length range
        let (lmin, lmax) = self.len_range;
        let mean_gap_ratio = (lmin..=lmax).map(|l| (l - 1) as f64 / l as f64).sum::<f64>() / (lmax - lmin + 1) as f64;
        mean_r + self.p_silence * mean_sil * mean_gap_ratio
    }
}

/// Frozen per-token feature prototypes plus the translation bijection.
/// Fully determined by the config seed.
pub struct SynthWorld {
    pub prototypes: Vec<Vec<f32>>,
    /// Content-token bijection, indexed by (id - content_base).
    pub bijection: Vec<usize>,
}

pub fn synth_world(cfg: &SynthConfig, vocab: &Vocabulary) -> SynthWorld {
    let base = RngState::new(cfg.seed);
    let mut proto_rng = base.fork(1);
    let prototypes: Vec<Vec<f32>> = (0..vocab.n_content())
        .map(|_| (0..cfg.d_feat).map(|_| proto_rng.normal() as f32).collect())
        .collect();
    let mut bij_rng = base.fork(2);
    let bijection = bij_rng.permutation(vocab.n_content());
    SynthWorld { prototypes, bijection }
}

/// Apply the synthetic translation map: token-wise bijection, then reversal.
pub fn translate_ids(x: &[u32], world: &SynthWorld, vocab: &Vocabulary) -> Vec<u32> {
    let base = vocab.content_base();
    let mut y: Vec<u32> = x
        .iter()
        .map(|&t| base + world.bijection[(t - base) as usize] as u32)
        .collect();
    y.reverse();
    y
}

pub fn generate_corpus(cfg: &SynthConfig) -> Result<(Vec<Utterance>, Vocabulary)> {
    cfg.validate()?;
    let vocab = Vocabulary::synthetic(cfg.vocab_size - 3);
    let world = synth_world(cfg, &vocab);
    let base = RngState::new(cfg.seed);
    let content_base = vocab.content_base();
    let n_content = vocab.n_content();

    let mut corpus = Vec::with_capacity(cfg.corpus_size);
    for i in 0..cfg.corpus_size {
        let mut rng = base.fork(1000 + i as u64);
        let len = rng.range(cfg.len_range.0, cfg.len_range.1);
        let x: Vec<u32> = (0..len).map(|_| content_base + rng.range(0, n_content - 1) as u32).collect();
        let y = translate_ids(&x, &world, &vocab);

        let mut frames: Vec<f32> = Vec::new();
        let mut t_s = 0usize;
        for (j, &tok) in x.iter().enumerate() {
            if j > 0 && rng.bernoulli(cfg.p_silence) {
                let sil = rng.range(cfg.silence_range.0, cfg.silence_range.1);
                for _ in 0..sil {
                    for _ in 0..cfg.d_feat {
                        frames.push((rng.normal() * cfg.noise_sigma) as f32);
                    }
                    t_s += 1;
                }
            }
            let proto = &world.prototypes[(tok - content_base) as usize];
            let reps = rng.range(cfg.frames_per_token.0, cfg.frames_per_token.1);
            for _ in 0..reps {
                for d in 0..cfg.d_feat {
                    frames.push(proto[d] + (rng.normal() * cfg.noise_sigma) as f32);
                }
                t_s += 1;
            }
        }
        corpus.push(Utterance {
            id: format!("synth-{i:06}"),
            speech: Features::new(t_s, cfg.d_feat, frames),
            transcription: x,
            translation: y,
        });
    }
    Ok((corpus, vocab))
}
