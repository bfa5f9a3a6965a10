//! Row-wise discrete Fourier transforms.
//!
//! Power-of-two lengths run an iterative radix-2 FFT (O(L log L)); every other
//! length falls back to the direct O(L^2) transform, evaluated as a product
//! with cached cosine/sine tables so large batches stay cheap.
//!
//! Convention: the forward transform is unnormalized; the inverse carries the
//! 1/L factor (applied by callers of the unnormalized inverse here).

use crate::kernels::matmul_flat;
use std::collections::HashMap;
use std::sync::{Arc, LazyLock, Mutex};

enum Plan {
    /// Radix-2 twiddles: w_j = e^{-2*pi*i*j/n} for j in 0..n/2.
    Pow2 { tw_re: Vec<f64>, tw_im: Vec<f64> },
    /// Symmetric n x n tables cos(2*pi*j*k/n) and sin(2*pi*j*k/n).
    Matrix { cos: Vec<f64>, sin: Vec<f64> },
}

static PLANS: LazyLock<Mutex<HashMap<usize, Arc<Plan>>>> =
    LazyLock::new(|| Mutex::new(HashMap::new()));

fn plan_for(n: usize) -> Arc<Plan> {
    let mut cache = PLANS.lock().unwrap();
    cache
        .entry(n)
        .or_insert_with(|| {
            if n.is_power_of_two() {
                let half = n / 2;
                let mut tw_re = Vec::with_capacity(half);
                let mut tw_im = Vec::with_capacity(half);
                for j in 0..half {
                    let angle = -2.0 * std::f64::consts::PI * j as f64 / n as f64;
                    tw_re.push(angle.cos());
                    tw_im.push(angle.sin());
                }
                Arc::new(Plan::Pow2 { tw_re, tw_im })
            } else {
                let mut cos = vec![0.0; n * n];
                let mut sin = vec![0.0; n * n];
                for j in 0..n {
                    for k in j..n {
                        let angle = 2.0 * std::f64::consts::PI * ((j * k) % n) as f64 / n as f64;
                        let (c, s) = (angle.cos(), angle.sin());
                        cos[j * n + k] = c;
                        cos[k * n + j] = c;
                        sin[j * n + k] = s;
                        sin[k * n + j] = s;
                    }
                }
                Arc::new(Plan::Matrix { cos, sin })
            }
        })
        .clone()
}

fn bit_reverse_permute(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
}

fn fft_pow2_inplace(re: &mut [f64], im: &mut [f64], tw_re: &[f64], tw_im: &[f64], inverse: bool) {
    let n = re.len();
    if n <= 1 {
        return;
    }
    bit_reverse_permute(re, im);
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = n / len;
        for base in (0..n).step_by(len) {
            for j in 0..half {
                let wr = tw_re[j * step];
                let wi = if inverse {
                    -tw_im[j * step]
                } else {
                    tw_im[j * step]
                };
                let (ur, ui) = (re[base + j], im[base + j]);
                let (vr, vi) = (re[base + j + half], im[base + j + half]);
                let tr = vr * wr - vi * wi;
                let ti = vr * wi + vi * wr;
                re[base + j] = ur + tr;
                im[base + j] = ui + ti;
                re[base + j + half] = ur - tr;
                im[base + j + half] = ui - ti;
            }
        }
        len <<= 1;
    }
}

/// Unnormalized complex transform of `rows` rows of length `n`.
/// `inverse` selects the e^{+i...} kernel; no 1/n factor is applied.
pub(crate) fn dft_complex_rows(
    re: &[f64],
    im: &[f64],
    rows: usize,
    n: usize,
    inverse: bool,
) -> (Vec<f64>, Vec<f64>) {
    debug_assert_eq!(re.len(), rows * n);
    debug_assert_eq!(im.len(), rows * n);
    if n == 0 || rows == 0 {
        return (Vec::new(), Vec::new());
    }
    let plan = plan_for(n);
    match &*plan {
        Plan::Pow2 { tw_re, tw_im } => {
            let mut out_re = re.to_vec();
            let mut out_im = im.to_vec();
            for r in 0..rows {
                fft_pow2_inplace(
                    &mut out_re[r * n..(r + 1) * n],
                    &mut out_im[r * n..(r + 1) * n],
                    tw_re,
                    tw_im,
                    inverse,
                );
            }
            (out_re, out_im)
        }
        Plan::Matrix { cos, sin } => {
            // forward: out = (re + i*im) * (cos - i*sin)
            // inverse: out = (re + i*im) * (cos + i*sin)
            let rc = matmul_flat(re, cos, rows, n, n);
            let rs = matmul_flat(re, sin, rows, n, n);
            let ic = matmul_flat(im, cos, rows, n, n);
            let is = matmul_flat(im, sin, rows, n, n);
            let mut out_re = Vec::with_capacity(rows * n);
            let mut out_im = Vec::with_capacity(rows * n);
            if inverse {
                for i in 0..rows * n {
                    out_re.push(rc[i] - is[i]);
                    out_im.push(ic[i] + rs[i]);
                }
            } else {
                for i in 0..rows * n {
                    out_re.push(rc[i] + is[i]);
                    out_im.push(ic[i] - rs[i]);
                }
            }
            (out_re, out_im)
        }
    }
}

/// Unnormalized forward transform of real rows.
pub(crate) fn dft_real_rows(x: &[f64], rows: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    debug_assert_eq!(x.len(), rows * n);
    if n == 0 || rows == 0 {
        return (Vec::new(), Vec::new());
    }
    let plan = plan_for(n);
    match &*plan {
        Plan::Pow2 { tw_re, tw_im } => {
            let mut out_re = x.to_vec();
            let mut out_im = vec![0.0; rows * n];
            for r in 0..rows {
                fft_pow2_inplace(
                    &mut out_re[r * n..(r + 1) * n],
                    &mut out_im[r * n..(r + 1) * n],
                    tw_re,
                    tw_im,
                    false,
                );
            }
            (out_re, out_im)
        }
        Plan::Matrix { cos, sin } => {
            let out_re = matmul_flat(x, cos, rows, n, n);
            let mut out_im = matmul_flat(x, sin, rows, n, n);
            for v in &mut out_im {
                *v = -*v;
            }
            (out_re, out_im)
        }
    }
}
