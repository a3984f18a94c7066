//! CTC loss: log-space forward dynamic program over the augmented label
//! sequence, built from tape primitives so gradients come out of the same
//! reverse sweep as everything else. A brute-force path enumerator serves
//! as the independent oracle on small instances.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};

/// Minimum frame count that can spell `target`: one frame per token plus a
/// separating blank between adjacent repeats.
pub fn min_frames(target: &[u32]) -> usize {
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    target.len() + repeats
}

fn check_target(target: &[u32], width: usize, blank: u32) -> Result<()> {
    for (pos, &t) in target.iter().enumerate() {
        if t == blank {
            return Err(Error::Contract(format!(
                "target contains the blank label at position {pos}"
            )));
        }
        if t as usize >= width {
            return Err(Error::Index { op: "ctc_loss", id: t as usize, limit: width, position: pos });
        }
    }
    Ok(())
}

/// Blank-augmented label sequence: blank, x1, blank, x2, ..., blank.
fn augment(target: &[u32], blank: u32) -> Vec<u32> {
    let mut l = Vec::with_capacity(2 * target.len() + 1);
    l.push(blank);
    for &t in target {
        l.push(t);
        l.push(blank);
    }
    l
}

/// -log p(target | log_probs) summed over all collapsing paths.
/// `log_probs` must be per-frame log-softmax rows, T x (|V|+1).
pub fn ctc_loss<F: Scalar>(log_probs: &Tensor<F>, target: &[u32], blank: u32) -> Result<Tensor<F>> {
    let (t_frames, width) = log_probs.shape();
    check_target(target, width, blank)?;
    if blank as usize >= width {
        return Err(Error::Contract(format!("blank id {blank} outside width {width}")));
    }
    let required = min_frames(target);
    if t_frames < required {
        return Err(Error::InfeasibleTarget { target_len: target.len(), frames: t_frames, required });
    }

    let tape = log_probs.tape().clone();
    let labels = augment(target, blank);
    let s = labels.len();
    let neg_inf = F::neg_infinity();

    // per-frame emissions for the augmented labels
    let emit = |t: usize| -> Result<Tensor<F>> {
        let idx: Vec<(usize, usize)> = labels.iter().map(|&l| (t, l as usize)).collect();
        log_probs.gather_elems(&idx)
    };

    // start states: first blank and first token
    let mut init = vec![neg_inf; s];
    init[0] = F::zero();
    if s > 1 {
        init[1] = F::zero();
    }
    let init = tape.constant(1, s, init);
    let mut alpha = emit(0)?.add(&init)?;

    // states where the diagonal skip over a blank is legal
    let mut skip = vec![neg_inf; s];
    for i in 2..s {
        if labels[i] != blank && labels[i] != labels[i - 2] {
            skip[i] = F::zero();
        }
    }
    let skip = tape.constant(1, s, skip);

    for t in 1..t_frames {
        let stay_or_step = alpha.lse2(&alpha.shift_cols(1))?;
        let with_skip = stay_or_step.lse2(&alpha.shift_cols(2).add(&skip)?)?;
        alpha = with_skip.add(&emit(t)?)?;
    }

    let total = if s == 1 {
        alpha
    } else {
        let ends = alpha.gather_elems(&[(0, s - 2), (0, s - 1)])?;
        ends.slice_cols(0, 1)?.lse2(&ends.slice_cols(1, 1)?)?
    };
    Ok(total.scale(c::<F>(-1.0)))
}

/// Collapse a frame-label path: drop repeats, then blanks.
pub fn collapse_path(path: &[u32], blank: u32) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev = None;
    for &l in path {
        if prev != Some(l) && l != blank {
            out.push(l);
        }
        prev = Some(l);
    }
    out
}

const ORACLE_GUARD: f64 = 1e6;

/// Exhaustive oracle: -log of the summed probability of every path that
/// collapses to `target`. Guarded to (|V|+1)^T <= 10^6.
pub fn ctc_brute_force<F: Scalar>(log_probs: &Tensor<F>, target: &[u32], blank: u32) -> Result<f64> {
    let (t_frames, width) = log_probs.shape();
    check_target(target, width, blank)?;
    if (width as f64).powi(t_frames as i32) > ORACLE_GUARD {
        return Err(Error::OracleScope(format!(
            "{width}^{t_frames} paths exceed the brute-force guard"
        )));
    }
    let lp: Vec<f64> = log_probs.value().iter().map(|v| v.to_f64().unwrap()).collect();

    let mut path = vec![0u32; t_frames];
    let mut acc = f64::NEG_INFINITY;
    enumerate(&lp, width, blank, target, &mut path, 0, 0.0, &mut acc);
    if acc == f64::NEG_INFINITY {
        // no path collapses to the target (infeasible): probability exactly 0
        return Ok(f64::INFINITY);
    }
    Ok(-acc)
}

fn enumerate(
    lp: &[f64],
    width: usize,
    blank: u32,
    target: &[u32],
    path: &mut [u32],
    depth: usize,
    logp: f64,
    acc: &mut f64,
) {
    if depth == path.len() {
        if collapse_path(path, blank) == target {
            let m = acc.max(logp);
            *acc = m + ((*acc - m).exp() + (logp - m).exp()).ln();
        }
        return;
    }
    for l in 0..width as u32 {
        path[depth] = l;
        enumerate(lp, width, blank, target, path, depth + 1, logp + lp[depth * width + l as usize], acc);
    }
}
