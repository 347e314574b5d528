//! Multi-head scaled dot-product attention kernels.
//!
//! Queries are `B·Nq × D`, keys and values `B·Nk × D`, laid out batch-major.
//! Head `h` owns columns `h·dh .. (h+1)·dh`.

use crate::tensor::gemm_strided;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnGeom {
    pub batch: usize,
    pub heads: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub width: usize,
}

impl AttnGeom {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }

    fn block(&self) -> usize {
        self.q_len * self.kv_len
    }
}

/// Returns `(output, probs)` where `probs` holds the row-softmaxed weights
/// for every `(batch, head)` block.
pub fn forward(g: &AttnGeom, q: &[f64], k: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (d, dh, nq, nk) = (g.width as isize, g.head_dim(), g.q_len, g.kv_len);
    let mut out = vec![0.0; g.batch * nq * g.width];
    let mut probs = vec![0.0; g.batch * g.heads * g.block()];
    for b in 0..g.batch {
        for h in 0..g.heads {
            let qo = b * nq * g.width + h * dh;
            let ko = b * nk * g.width + h * dh;
            let po = (b * g.heads + h) * g.block();
            let p = &mut probs[po..po + g.block()];
            // SAFETY: every view below stays inside its buffer: rows advance
            // by `width` within the batch block, columns stay inside the head.
            unsafe {
                gemm_strided(
                    nq,
                    dh,
                    nk,
                    g.scale(),
                    q.as_ptr().add(qo),
                    (d, 1),
                    k.as_ptr().add(ko),
                    (1, d),
                    0.0,
                    p.as_mut_ptr(),
                    (nk as isize, 1),
                );
            }
            for row in p.chunks_mut(nk) {
                softmax_in_place(row);
            }
            unsafe {
                gemm_strided(
                    nq,
                    nk,
                    dh,
                    1.0,
                    p.as_ptr(),
                    (nk as isize, 1),
                    v.as_ptr().add(ko),
                    (d, 1),
                    0.0,
                    out.as_mut_ptr().add(qo),
                    (d, 1),
                );
            }
        }
    }
    (out, probs)
}

/// Gradients `(dq, dk, dv)` given the upstream gradient of the output.
pub fn backward(
    g: &AttnGeom,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (d, dh, nq, nk) = (g.width as isize, g.head_dim(), g.q_len, g.kv_len);
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; g.block()];
    for b in 0..g.batch {
        for h in 0..g.heads {
            let qo = b * nq * g.width + h * dh;
            let ko = b * nk * g.width + h * dh;
            let po = (b * g.heads + h) * g.block();
            let p = &probs[po..po + g.block()];
            // SAFETY: same view bounds as the forward pass.
            unsafe {
                // dV = Pᵀ dO
                gemm_strided(
                    nk,
                    nq,
                    dh,
                    1.0,
                    p.as_ptr(),
                    (1, nk as isize),
                    grad_out.as_ptr().add(qo),
                    (d, 1),
                    0.0,
                    dv.as_mut_ptr().add(ko),
                    (d, 1),
                );
                // dP = dO Vᵀ
                gemm_strided(
                    nq,
                    dh,
                    nk,
                    1.0,
                    grad_out.as_ptr().add(qo),
                    (d, 1),
                    v.as_ptr().add(ko),
                    (1, d),
                    0.0,
                    dp.as_mut_ptr(),
                    (nk as isize, 1),
                );
            }
            for (dp_row, p_row) in dp.chunks_mut(nk).zip(p.chunks(nk)) {
                let dot: f64 = dp_row.iter().zip(p_row).map(|(a, b)| a * b).sum();
                for (x, &pv) in dp_row.iter_mut().zip(p_row) {
                    *x = pv * (*x - dot);
                }
            }
            unsafe {
                // dQ = scale · dS K
                gemm_strided(
                    nq,
                    nk,
                    dh,
                    g.scale(),
                    dp.as_ptr(),
                    (nk as isize, 1),
                    k.as_ptr().add(ko),
                    (d, 1),
                    0.0,
                    dq.as_mut_ptr().add(qo),
                    (d, 1),
                );
                // dK = scale · dSᵀ Q
                gemm_strided(
                    nk,
                    nq,
                    dh,
                    g.scale(),
                    dp.as_ptr(),
                    (1, nk as isize),
                    q.as_ptr().add(qo),
                    (d, 1),
                    0.0,
                    dk.as_mut_ptr().add(ko),
                    (d, 1),
                );
            }
        }
    }
    (dq, dk, dv)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}
