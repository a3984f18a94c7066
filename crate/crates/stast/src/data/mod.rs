//! Corpus data model, synthetic corpus generation, on-disk formats, and
//! frame-budget batching.

mod batch;
mod manifest;
mod synth;
pub mod vocab;

pub use batch::{make_batches, Batch};
pub use manifest::{load_manifest, write_asr_corpus, write_corpus, LoadedManifest};
pub use synth::{generate_corpus, SynthConfig};
pub use vocab::Vocabulary;

use crate::error::{Error, Result};

/// Frame matrix: T_s rows of d_feat feature values. Features are stored as
/// f32 on disk and in memory; the model lifts them to the active precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Features {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(rows * cols, data.len());
        Features { rows, cols, data }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// One (speech, transcription, translation) triplet.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speech: Features,
    pub transcription: Vec<u32>,
    pub translation: Vec<u32>,
}

/// Speech-transcription pair from an ASR-only corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct AsrUtterance {
    pub id: String,
    pub speech: Features,
    pub transcription: Vec<u32>,
}

impl From<Utterance> for AsrUtterance {
    fn from(u: Utterance) -> Self {
        AsrUtterance { id: u.id, speech: u.speech, transcription: u.transcription }
    }
}

/// Keep rows 0, 3, 6, ... of a frame matrix.
pub fn downsample(frames: &Features) -> Features {
    let kept: Vec<usize> = (0..frames.rows).step_by(3).collect();
    let mut data = Vec::with_capacity(kept.len() * frames.cols);
    for &r in &kept {
        data.extend_from_slice(frames.row(r));
    }
    Features::new(kept.len(), frames.cols, data)
}

fn check_token_ids(ids: &[u32], vocab_len: usize, what: &str, utt: &str) -> Result<()> {
    for &id in ids {
        if id as usize >= vocab_len {
            return Err(Error::Config(format!("{what} token id {id} out of vocabulary (size {vocab_len}) in utterance {utt}")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats(rows: usize, cols: usize) -> Features {
        Features::new(rows, cols, (0..rows * cols).map(|i| i as f32).collect())
    }

    #[test]
    fn downsample_t3_keeps_row_zero() {
        let f = feats(3, 2);
        let d = downsample(&f);
        assert_eq!(d.rows, 1);
        assert_eq!(d.row(0), f.row(0));
    }

    #[test]
    fn downsample_t7_keeps_rows_0_3_6() {
        let f = feats(7, 2);
        let d = downsample(&f);
        assert_eq!(d.rows, 3);
        assert_eq!(d.row(0), f.row(0));
        assert_eq!(d.row(1), f.row(3));
        assert_eq!(d.row(2), f.row(6));
    }

    #[test]
    fn downsample_composes_to_stride_nine() {
        let f = feats(25, 3);
        let dd = downsample(&downsample(&f));
        let expected: Vec<usize> = (0..25).step_by(9).collect();
        assert_eq!(dd.rows, expected.len());
        for (i, &r) in expected.iter().enumerate() {
            assert_eq!(dd.row(i), f.row(r));
        }
    }
}
