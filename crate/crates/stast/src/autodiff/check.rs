//! Central finite-difference gradient checking.
//!
//! Runs in 64-bit; the analytic path goes through the tape, the numeric path
//! re-evaluates the closure at perturbed inputs. Used by unit tests and the
//! acceptance suite.

use super::{Tape, Tensor};

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOL: f64 = 1e-4;
// Below this magnitude finite differences are all roundoff; compare absolutely.
const ABS_FLOOR: f64 = 1e-7;

/// Compare tape gradients of `f` against central finite differences.
///
/// `f` is handed freshly created gradient-requiring vars with the given
/// shapes and values, and must return a scalar loss on the same tape.
pub fn check_gradients<B>(shapes: &[(usize, usize)], values: &[Vec<f64>], f: B, step: f64, tol: f64) -> Result<(), String>
where
    B: Fn(&Tape<f64>, &[Tensor<f64>]) -> Tensor<f64>,
{
    assert_eq!(shapes.len(), values.len());

    let eval = |vals: &[Vec<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Tensor<f64>> = shapes
            .iter()
            .zip(vals)
            .map(|(&(r, c), v)| tape.var(r, c, v.clone()))
            .collect();
        f(&tape, &vars).item()
    };

    // Analytic gradients.
    let tape = Tape::new();
    let vars: Vec<Tensor<f64>> = shapes
        .iter()
        .zip(values)
        .map(|(&(r, c), v)| tape.var(r, c, v.clone()))
        .collect();
    let loss = f(&tape, &vars);
    loss.backward().map_err(|e| format!("backward failed: {e}"))?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| v.grad().unwrap_or_else(|| vec![0.0; v.rows() * v.cols()]))
        .collect();

    for (vi, vals) in values.iter().enumerate() {
        for ei in 0..vals.len() {
            let mut plus = values.to_vec();
            plus[vi][ei] += step;
            let mut minus = values.to_vec();
            minus[vi][ei] -= step;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let a = analytic[vi][ei];
            let err = (a - numeric).abs();
            let denom = a.abs().max(numeric.abs());
            if err > ABS_FLOOR && err > tol * denom {
                return Err(format!(
                    "gradient mismatch at input {vi} elem {ei}: analytic {a:.8e} vs numeric {numeric:.8e} (err {err:.3e})"
                ));
            }
        }
    }
    Ok(())
}
