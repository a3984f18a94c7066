//! Frame-budget batching: bucket by similar speech length, pack greedily,
//! shuffle deterministically per epoch seed.

use super::vocab::PAD;
use super::Utterance;
use crate::error::{Error, Result};
use crate::rng::RngState;

/// Padded token-id block with validity mask, row-major B x T.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedIds {
    pub batch: usize,
    pub max_len: usize,
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

impl PaddedIds {
    fn build(seqs: &[&[u32]]) -> Self {
        let batch = seqs.len();
        let max_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = vec![PAD; batch * max_len];
        let mut mask = vec![false; batch * max_len];
        for (b, s) in seqs.iter().enumerate() {
            for (t, &v) in s.iter().enumerate() {
                ids[b * max_len + t] = v;
                mask[b * max_len + t] = true;
            }
        }
        PaddedIds { batch, max_len, ids, mask }
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.max_len..(b + 1) * self.max_len]
    }
}

/// Padded speech block B x T_max x d with a frame-validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedSpeech {
    pub batch: usize,
    pub max_frames: usize,
    pub d_feat: usize,
    pub frames: Vec<f32>,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// Indices into the corpus this batch was built from.
    pub utterances: Vec<usize>,
    pub speech: PaddedSpeech,
    pub transcription: PaddedIds,
    pub translation: PaddedIds,
    /// (T_s, T_x, T_y) per utterance.
    pub lengths: Vec<(usize, usize, usize)>,
}

impl Batch {
    pub fn total_frames(&self) -> usize {
        self.lengths.iter().map(|l| l.0).sum()
    }
}

fn build_batch(corpus: &[Utterance], members: &[usize]) -> Batch {
    let batch = members.len();
    let max_frames = members.iter().map(|&i| corpus[i].speech.rows).max().unwrap_or(0);
    let d_feat = corpus[members[0]].speech.cols;
    let mut frames = vec![0.0f32; batch * max_frames * d_feat];
    let mut mask = vec![false; batch * max_frames];
    for (b, &i) in members.iter().enumerate() {
        let sp = &corpus[i].speech;
        for t in 0..sp.rows {
            let dst = (b * max_frames + t) * d_feat;
            frames[dst..dst + d_feat].copy_from_slice(sp.row(t));
            mask[b * max_frames + t] = true;
        }
    }
    let xs: Vec<&[u32]> = members.iter().map(|&i| corpus[i].transcription.as_slice()).collect();
    let ys: Vec<&[u32]> = members.iter().map(|&i| corpus[i].translation.as_slice()).collect();
    Batch {
        utterances: members.to_vec(),
        speech: PaddedSpeech { batch, max_frames, d_feat, frames, mask },
        transcription: PaddedIds::build(&xs),
        translation: PaddedIds::build(&ys),
        lengths: members
            .iter()
            .map(|&i| (corpus[i].speech.rows, corpus[i].transcription.len(), corpus[i].translation.len()))
            .collect(),
    }
}

/// Partition the corpus into batches whose unpadded frame totals stay within
/// `frame_budget`. Every utterance appears exactly once.
pub fn make_batches(corpus: &[Utterance], frame_budget: usize, seed: u64) -> Result<Vec<Batch>> {
    for u in corpus {
        if u.speech.rows > frame_budget {
            return Err(Error::Config(format!(
                "utterance {} has {} frames, above the {frame_budget}-frame budget",
                u.id, u.speech.rows
            )));
        }
    }
    if corpus.is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = RngState::new(seed);
    // random tiebreak key gives a fresh within-bucket order every epoch
    let mut order: Vec<(usize, u64, usize)> = corpus
        .iter()
        .enumerate()
        .map(|(i, u)| (u.speech.rows, rng.next_u64(), i))
        .collect();
    order.sort_unstable();

    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut current_frames = 0usize;
    for &(frames, _, idx) in &order {
        if !current.is_empty() && current_frames + frames > frame_budget {
            batches.push(std::mem::take(&mut current));
            current_frames = 0;
        }
        current.push(idx);
        current_frames += frames;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    rng.shuffle(&mut batches);
    Ok(batches.iter().map(|m| build_batch(corpus, m)).collect())
}

#[cfg(test)]
mod tests {
    use super::super::synth::{generate_corpus, SynthConfig};
    use super::*;

    fn corpus(n: usize, seed: u64) -> Vec<Utterance> {
        let cfg = SynthConfig { corpus_size: n, seed, ..Default::default() };
        generate_corpus(&cfg).unwrap().0
    }

    #[test]
    fn batches_partition_the_corpus() {
        let corpus = corpus(80, 3);
        let batches = make_batches(&corpus, 200, 7).unwrap();
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.utterances.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..corpus.len()).collect::<Vec<_>>());
    }

    #[test]
    fn budget_respected_over_random_corpora() {
        for seed in 0..100 {
            let corpus = corpus(30, seed);
            let budget = 150 + (seed as usize % 100);
            for b in make_batches(&corpus, budget, seed).unwrap() {
                assert!(b.total_frames() <= budget);
            }
        }
    }

    #[test]
    fn tight_budget_gives_singleton_batches() {
        let corpus = corpus(10, 1);
        let max_frames = corpus.iter().map(|u| u.speech.rows).max().unwrap();
        let batches = make_batches(&corpus, max_frames, 5).unwrap();
        // the largest utterance is alone; everything stays within budget
        assert!(batches.iter().all(|b| b.total_frames() <= max_frames));
        assert!(batches.iter().any(|b| b.utterances.len() == 1));
    }

    #[test]
    fn oversized_utterance_is_named() {
        let corpus = corpus(5, 2);
        let err = make_batches(&corpus, 3, 0).unwrap_err().to_string();
        assert!(err.contains("synth-"), "{err}");
    }

    #[test]
    fn masks_exactly_delimit_content() {
        let corpus = corpus(40, 11);
        for b in make_batches(&corpus, 300, 1).unwrap() {
            for (bi, &(ts, tx, ty)) in b.lengths.iter().enumerate() {
                for t in 0..b.speech.max_frames {
                    assert_eq!(b.speech.mask[bi * b.speech.max_frames + t], t < ts);
                }
                for t in 0..b.transcription.max_len {
                    assert_eq!(b.transcription.mask[bi * b.transcription.max_len + t], t < tx);
                }
                for t in 0..b.translation.max_len {
                    assert_eq!(b.translation.mask[bi * b.translation.max_len + t], t < ty);
                }
            }
        }
    }

    #[test]
    fn batch_order_depends_on_seed_but_is_reproducible() {
        let corpus = corpus(60, 4);
        let a = make_batches(&corpus, 250, 1).unwrap();
        let b = make_batches(&corpus, 250, 1).unwrap();
        assert_eq!(
            a.iter().map(|x| x.utterances.clone()).collect::<Vec<_>>(),
            b.iter().map(|x| x.utterances.clone()).collect::<Vec<_>>()
        );
    }
}
