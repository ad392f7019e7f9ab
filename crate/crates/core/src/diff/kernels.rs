//! Dense loops behind the tape primitives.

use super::tape::AttentionSpec;

/// Dot product with eight independent accumulators; the fixed reduction
/// order keeps results bit-reproducible.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `out[m, n] += a[m, k] * b[k, n]`.
pub fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    // SAFETY: the assert bounds every access implied by the strides below.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, 1.0,
            out.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `out[m, k] += g[m, n] * b[k, n]^T`.
pub fn matmul_nt_acc(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    assert!(g.len() >= m * n && b.len() >= k * n && out.len() >= m * k);
    // SAFETY: as above; `b` is read transposed through its strides.
    unsafe {
        matrixmultiply::dgemm(
            m, n, k, 1.0, g.as_ptr(), n as isize, 1, b.as_ptr(), 1, n as isize, 1.0,
            out.as_mut_ptr(), k as isize, 1,
        );
    }
}

/// `out[k, n] += a[m, k]^T * g[m, n]`.
pub fn matmul_tn_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    assert!(a.len() >= m * k && g.len() >= m * n && out.len() >= k * n);
    // SAFETY: as above; `a` is read transposed through its strides.
    unsafe {
        matrixmultiply::dgemm(
            k, m, n, 1.0, a.as_ptr(), 1, k as isize, g.as_ptr(), n as isize, 1, 1.0,
            out.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Stable softmax over a row; returns the log-sum-exp of the input.
pub fn softmax_in_place(row: &mut [f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    max + sum.ln()
}

fn key_allowed(spec: &AttentionSpec, b: usize, i: usize, j: usize) -> bool {
    if spec.causal && j > i {
        return false;
    }
    match &spec.key_mask {
        Some(m) => m[b * spec.k_len + j],
        None => true,
    }
}

/// Returns the output rows and the attention probabilities
/// `[batch, heads, q_len, k_len]`.
pub fn attention_forward(spec: &AttentionSpec, q: &[f64], k: &[f64], v: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let (bsz, lq, lk, h) = (spec.batch, spec.q_len, spec.k_len, spec.heads);
    let dh = d / h;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; bsz * lq * d];
    let mut probs = vec![0.0; bsz * h * lq * lk];
    for b in 0..bsz {
        for head in 0..h {
            let off = head * dh;
            for i in 0..lq {
                let qrow = &q[(b * lq + i) * d + off..][..dh];
                let p = &mut probs[((b * h + head) * lq + i) * lk..][..lk];
                let mut max = f64::NEG_INFINITY;
                let mut any = false;
                for (j, pj) in p.iter_mut().enumerate() {
                    if key_allowed(spec, b, i, j) {
                        let s = dot(qrow, &k[(b * lk + j) * d + off..][..dh]) * scale;
                        *pj = s;
                        max = max.max(s);
                        any = true;
                    }
                }
                if !any {
                    p.iter_mut().for_each(|x| *x = 0.0);
                    continue;
                }
                let mut sum = 0.0;
                for (j, pj) in p.iter_mut().enumerate() {
                    if key_allowed(spec, b, i, j) {
                        *pj = (*pj - max).exp();
                        sum += *pj;
                    } else {
                        *pj = 0.0;
                    }
                }
                let orow = &mut out[(b * lq + i) * d + off..][..dh];
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj /= sum;
                    if *pj != 0.0 {
                        let vrow = &v[(b * lk + j) * d + off..][..dh];
                        for (o, vv) in orow.iter_mut().zip(vrow) {
                            *o += *pj * vv;
                        }
                    }
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    spec: &AttentionSpec,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    g: &[f64],
    d: usize,
    mut dq: Option<&mut [f64]>,
    mut dk: Option<&mut [f64]>,
    mut dv: Option<&mut [f64]>,
) {
    let (bsz, lq, lk, h) = (spec.batch, spec.q_len, spec.k_len, spec.heads);
    let dh = d / h;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dp = vec![0.0; lk];
    for b in 0..bsz {
        for head in 0..h {
            let off = head * dh;
            for i in 0..lq {
                let p = &probs[((b * h + head) * lq + i) * lk..][..lk];
                let grow = &g[(b * lq + i) * d + off..][..dh];
                let mut weighted = 0.0;
                for j in 0..lk {
                    if p[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let vrow = &v[(b * lk + j) * d + off..][..dh];
                    dp[j] = dot(grow, vrow);
                    weighted += p[j] * dp[j];
                    if let Some(dv) = dv.as_deref_mut() {
                        let dvrow = &mut dv[(b * lk + j) * d + off..][..dh];
                        for (x, gv) in dvrow.iter_mut().zip(grow) {
                            *x += p[j] * gv;
                        }
                    }
                }
                let qrow = &q[(b * lq + i) * d + off..][..dh];
                for j in 0..lk {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    if let Some(dq) = dq.as_deref_mut() {
                        let krow = &k[(b * lk + j) * d + off..][..dh];
                        let dqrow = &mut dq[(b * lq + i) * d + off..][..dh];
                        for (x, kv) in dqrow.iter_mut().zip(krow) {
                            *x += ds * kv;
                        }
                    }
                    if let Some(dk) = dk.as_deref_mut() {
                        let dkrow = &mut dk[(b * lk + j) * d + off..][..dh];
                        for (x, qv) in dkrow.iter_mut().zip(qrow) {
                            *x += ds * qv;
                        }
                    }
                }
            }
        }
    }
}
