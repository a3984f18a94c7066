//! Row-major matmul kernels.

use crate::scalar::Scalar;

/// c[ar x bc] = a[ar x ac] * b[ac x bc]
pub fn mm<F: Scalar>(a: &[F], ar: usize, ac: usize, b: &[F], bc: usize) -> Vec<F> {
    let mut c = vec![F::zero(); ar * bc];
    for i in 0..ar {
        let crow = &mut c[i * bc..(i + 1) * bc];
        for k in 0..ac {
            let aik = a[i * ac + k];
            if aik == F::zero() {
                continue;
            }
            let brow = &b[k * bc..(k + 1) * bc];
            for j in 0..bc {
                crow[j] += aik * brow[j];
            }
        }
    }
    c
}

/// c[ar x br] = a[ar x ac] * b[br x ac]^T
pub fn mm_nt<F: Scalar>(a: &[F], ar: usize, ac: usize, b: &[F], br: usize) -> Vec<F> {
    let mut c = vec![F::zero(); ar * br];
    for i in 0..ar {
        let arow = &a[i * ac..(i + 1) * ac];
        for j in 0..br {
            let brow = &b[j * ac..(j + 1) * ac];
            let mut s = F::zero();
            for k in 0..ac {
                s += arow[k] * brow[k];
            }
            c[i * br + j] = s;
        }
    }
    c
}

/// c[ac x gc] = a[ar x ac]^T * g[ar x gc]
pub fn mm_tn<F: Scalar>(a: &[F], ar: usize, ac: usize, g: &[F], gc: usize) -> Vec<F> {
    let mut c = vec![F::zero(); ac * gc];
    for k in 0..ar {
        let grow = &g[k * gc..(k + 1) * gc];
        for i in 0..ac {
            let aki = a[k * ac + i];
            if aki == F::zero() {
                continue;
            }
            let crow = &mut c[i * gc..(i + 1) * gc];
            for j in 0..gc {
                crow[j] += aki * grow[j];
            }
        }
    }
    c
}
