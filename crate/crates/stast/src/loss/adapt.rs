//! Cross-modal representation adaptation: pull the speech-side encoder
//! output toward the text-side one with an MSE penalty. The text side is
//! detached — it acts as the teacher, the constraint shapes only the
//! speech representation space.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptationMode {
    SequenceLevel,
    WordLevel,
    Off,
}

impl FromStr for AdaptationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequence" => Ok(AdaptationMode::SequenceLevel),
            "word" => Ok(AdaptationMode::WordLevel),
            "off" => Ok(AdaptationMode::Off),
            other => Err(Error::Config(format!(
                "adaptation mode {other:?} (expected sequence, word, or off)"
            ))),
        }
    }
}

impl fmt::Display for AdaptationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdaptationMode::SequenceLevel => "sequence",
            AdaptationMode::WordLevel => "word",
            AdaptationMode::Off => "off",
        })
    }
}

/// Per-utterance adaptation term. `h_s` is the speech-path representation
/// (None when the shrink degenerated — the term then contributes nothing),
/// `h_x` the text-path one. Returns the loss tensor plus a flag set when
/// word-level fell back to sequence-level on a length mismatch.
pub fn adaptation_loss<F: Scalar>(
    h_s: Option<&Tensor<F>>,
    h_x: &Tensor<F>,
    mode: AdaptationMode,
) -> Result<(Option<Tensor<F>>, bool)> {
    let h_s = match (mode, h_s) {
        (AdaptationMode::Off, _) | (_, None) => return Ok((None, false)),
        (_, Some(h)) => h,
    };
    let teacher = h_x.detach();
    match mode {
        AdaptationMode::SequenceLevel => {
            Ok((Some(sequence_mse(h_s, &teacher)?), false))
        }
        AdaptationMode::WordLevel => {
            if h_s.rows() == teacher.rows() {
                Ok((Some(h_s.mse(&teacher)?), false))
            } else {
                Ok((Some(sequence_mse(h_s, &teacher)?), true))
            }
        }
        AdaptationMode::Off => unreachable!(),
    }
}

fn sequence_mse<F: Scalar>(h_s: &Tensor<F>, teacher: &Tensor<F>) -> Result<Tensor<F>> {
    h_s.mean_rows()?.mse(&teacher.mean_rows()?)
}
