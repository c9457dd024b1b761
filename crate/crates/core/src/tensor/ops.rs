//! Forward and backward kernels shared by the tape and the incremental decoder.
//!
//! Everything here works on raw row-major slices. Reductions run left to
//! right in index order so results are reproducible bit for bit.

use super::kernels::{gemm, Layout};
use super::{dim_err, TensorError};

/// Additive bias applied to disallowed attention positions before softmax.
pub const MASK_FILL: f32 = -1e9;

/// Softmax over one row in place. `masked(j)` marks disallowed positions,
/// which come out as exactly zero. Returns `false` if every entry is masked.
pub fn softmax_row_masked(row: &mut [f32], masked: impl Fn(usize) -> bool) -> bool {
    let mut any = false;
    for (j, v) in row.iter_mut().enumerate() {
        if masked(j) {
            *v += MASK_FILL;
        } else {
            any = true;
        }
    }
    if !any {
        return false;
    }
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for (j, v) in row.iter_mut().enumerate() {
        *v = if masked(j) { 0.0 } else { *v * inv };
    }
    true
}

/// `ds = p ⊙ (dp − ⟨dp, p⟩)` for one softmax row.
pub fn softmax_row_backward(p: &[f32], dp: &[f32], ds: &mut [f32]) {
    let mut dot = 0.0f32;
    for (a, b) in p.iter().zip(dp) {
        dot += a * b;
    }
    for ((d, &pj), &g) in ds.iter_mut().zip(p).zip(dp) {
        *d = pj * (g - dot);
    }
}

/// Per-row statistics kept by [`layer_norm_forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormSaved {
    pub xhat: Vec<f32>,
    pub rstd: Vec<f32>,
}

pub fn layer_norm_forward(
    x: &[f32],
    d: usize,
    gain: &[f32],
    bias: &[f32],
    eps: f32,
) -> (Vec<f32>, LayerNormSaved) {
    let rows = x.len() / d;
    let mut y = vec![0.0f32; x.len()];
    let mut xhat = vec![0.0f32; x.len()];
    let mut rstd = vec![0.0f32; rows];
    let inv_d = 1.0 / d as f32;
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f32>() * inv_d;
        let mut var = 0.0f32;
        for &v in xr {
            let c = v - mean;
            var += c * c;
        }
        var *= inv_d;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        let hr = &mut xhat[r * d..(r + 1) * d];
        let yr = &mut y[r * d..(r + 1) * d];
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            hr[j] = h;
            yr[j] = h * gain[j] + bias[j];
        }
    }
    (y, LayerNormSaved { xhat, rstd })
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward(
    dy: &[f32],
    d: usize,
    gain: &[f32],
    saved: &LayerNormSaved,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let rows = dy.len() / d;
    let mut dx = vec![0.0f32; dy.len()];
    let mut dgain = vec![0.0f32; d];
    let mut dbias = vec![0.0f32; d];
    let inv_d = 1.0 / d as f32;
    let mut dxhat = vec![0.0f32; d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let hr = &saved.xhat[r * d..(r + 1) * d];
        let mut sum_dxhat = 0.0f32;
        let mut sum_dxhat_h = 0.0f32;
        for j in 0..d {
            dgain[j] += dyr[j] * hr[j];
            dbias[j] += dyr[j];
            let g = dyr[j] * gain[j];
            dxhat[j] = g;
            sum_dxhat += g;
            sum_dxhat_h += g * hr[j];
        }
        let rs = saved.rstd[r];
        let dxr = &mut dx[r * d..(r + 1) * d];
        for j in 0..d {
            dxr[j] = rs * inv_d * (d as f32 * dxhat[j] - sum_dxhat - hr[j] * sum_dxhat_h);
        }
    }
    (dx, dgain, dbias)
}

const FRAC_1_SQRT_2: f32 = std::f32::consts::FRAC_1_SQRT_2;
// 1/sqrt(2π)
const INV_SQRT_2PI: f32 = 0.398_942_3;

/// Standard normal CDF.
pub fn normal_cdf(x: f32) -> f32 {
    0.5 * (1.0 + libm::erff(x * FRAC_1_SQRT_2))
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: f32) -> f32 {
    x * normal_cdf(x)
}

pub fn gelu_grad(x: f32) -> f32 {
    normal_cdf(x) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Mean token NLL over rows whose target differs from `ignore`.
/// Returns the loss, the row softmax probabilities and the number of counted rows.
pub fn cross_entropy_forward(
    logits: &[f32],
    n_classes: usize,
    targets: &[u32],
    ignore: u32,
) -> Result<(f32, Vec<f32>, usize), TensorError> {
    let rows = logits.len() / n_classes;
    if rows != targets.len() {
        return Err(dim_err(
            "cross_entropy",
            format!("{rows} logit rows but {} targets", targets.len()),
        ));
    }
    let mut probs = vec![0.0f32; logits.len()];
    let mut total = 0.0f32;
    let mut count = 0usize;
    for r in 0..rows {
        let t = targets[r];
        if t as usize >= n_classes && t != ignore {
            return Err(dim_err(
                "cross_entropy",
                format!("target {t} outside [0, {n_classes})"),
            ));
        }
        let lr = &logits[r * n_classes..(r + 1) * n_classes];
        let max = lr.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let pr = &mut probs[r * n_classes..(r + 1) * n_classes];
        let mut sum = 0.0f32;
        for (p, &l) in pr.iter_mut().zip(lr) {
            *p = (l - max).exp();
            sum += *p;
        }
        let inv = 1.0 / sum;
        for p in pr.iter_mut() {
            *p *= inv;
        }
        if t == ignore {
            continue;
        }
        total += max + sum.ln() - lr[t as usize];
        count += 1;
    }
    if count == 0 {
        return Err(TensorError::EmptyLoss);
    }
    Ok((total / count as f32, probs, count))
}

/// One attention problem: queries of a single sequence against its keys.
/// Buffers hold all heads packed along the feature axis.
#[derive(Clone, Copy, Debug)]
pub struct AttnView<'a> {
    pub q: &'a [f32],
    pub k: &'a [f32],
    pub v: &'a [f32],
    /// True at key positions that must not be attended.
    pub key_pad: Option<&'a [bool]>,
}

fn gather_head(src: &[f32], rows: usize, d: usize, h: usize, dk: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows * dk);
    for r in 0..rows {
        out.extend_from_slice(&src[r * d + h * dk..r * d + (h + 1) * dk]);
    }
    out
}

fn scatter_head_add(dst: &mut [f32], src: &[f32], rows: usize, d: usize, h: usize, dk: usize) {
    for r in 0..rows {
        let o = &mut dst[r * d + h * dk..r * d + (h + 1) * dk];
        for (a, &b) in o.iter_mut().zip(&src[r * dk..(r + 1) * dk]) {
            *a += b;
        }
    }
}

/// Scaled dot-product attention for one segment, all heads.
///
/// With `causal`, query `i` sits at absolute position `i + k_len − q_len` and
/// sees keys up to and including that position. Writes the concatenated head
/// outputs to `out` (`q_len × d`) and returns the probabilities laid out as
/// `heads × q_len × k_len`.
pub fn attend(
    view: AttnView<'_>,
    d: usize,
    n_heads: usize,
    causal: bool,
    out: &mut [f32],
) -> Result<Vec<f32>, TensorError> {
    let q_len = view.q.len() / d;
    let k_len = view.k.len() / d;
    if view.v.len() != view.k.len() || out.len() != view.q.len() {
        return Err(dim_err("attention", "q/k/v/out buffers disagree"));
    }
    if causal && q_len > k_len {
        return Err(dim_err("attention", "causal query longer than keys"));
    }
    let dk = d / n_heads;
    let scale = 1.0 / (dk as f32).sqrt();
    let offset = k_len.saturating_sub(q_len);
    let mut probs = vec![0.0f32; n_heads * q_len * k_len];
    for h in 0..n_heads {
        let qh = gather_head(view.q, q_len, d, h, dk);
        let kh = gather_head(view.k, k_len, d, h, dk);
        let vh = gather_head(view.v, k_len, d, h, dk);
        let mut s = gemm(&qh, Layout::Normal, &kh, Layout::Transposed, q_len, k_len, dk);
        for (i, row) in s.chunks_mut(k_len).enumerate() {
            for x in row.iter_mut() {
                *x *= scale;
            }
            let limit = i + offset;
            let ok = softmax_row_masked(row, |j| {
                (causal && j > limit) || view.key_pad.is_some_and(|m| m[j])
            });
            if !ok {
                return Err(TensorError::DegenerateRow { row: i });
            }
        }
        let oh = gemm(&s, Layout::Normal, &vh, Layout::Normal, q_len, dk, k_len);
        for r in 0..q_len {
            out[r * d + h * dk..r * d + (h + 1) * dk].copy_from_slice(&oh[r * dk..(r + 1) * dk]);
        }
        probs[h * q_len * k_len..(h + 1) * q_len * k_len].copy_from_slice(&s);
    }
    Ok(probs)
}

/// Backward of [`attend`]; accumulates into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn attend_backward(
    view: AttnView<'_>,
    probs: &[f32],
    d: usize,
    n_heads: usize,
    d_out: &[f32],
    dq: &mut [f32],
    dk_buf: &mut [f32],
    dv: &mut [f32],
) {
    let q_len = view.q.len() / d;
    let k_len = view.k.len() / d;
    let dk = d / n_heads;
    let scale = 1.0 / (dk as f32).sqrt();
    for h in 0..n_heads {
        let qh = gather_head(view.q, q_len, d, h, dk);
        let kh = gather_head(view.k, k_len, d, h, dk);
        let vh = gather_head(view.v, k_len, d, h, dk);
        let doh = gather_head(d_out, q_len, d, h, dk);
        let p = &probs[h * q_len * k_len..(h + 1) * q_len * k_len];
        let dp = gemm(&doh, Layout::Normal, &vh, Layout::Transposed, q_len, k_len, dk);
        let dvh = gemm(p, Layout::Transposed, &doh, Layout::Normal, k_len, dk, q_len);
        let mut ds = vec![0.0f32; q_len * k_len];
        for i in 0..q_len {
            let row = i * k_len..(i + 1) * k_len;
            softmax_row_backward(&p[row.clone()], &dp[row.clone()], &mut ds[row]);
        }
        for x in ds.iter_mut() {
            *x *= scale;
        }
        let dqh = gemm(&ds, Layout::Normal, &kh, Layout::Normal, q_len, dk, k_len);
        let dkh = gemm(&ds, Layout::Transposed, &qh, Layout::Normal, k_len, dk, q_len);
        scatter_head_add(dq, &dqh, q_len, d, h, dk);
        scatter_head_add(dk_buf, &dkh, k_len, d, h, dk);
        scatter_head_add(dv, &dvh, k_len, d, h, dk);
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn softmax_uniform_and_masked() {
        let mut r = [0.0, 0.0];
        assert!(softmax_row_masked(&mut r, |_| false));
        assert_eq!(r, [0.5, 0.5]);
        let mut r = [3.0, 7.0];
        assert!(softmax_row_masked(&mut r, |j| j == 1));
        assert_eq!(r, [1.0, 0.0]);
        let mut r = [1.0, 2.0];
        assert!(!softmax_row_masked(&mut r, |_| true));
    }

    #[test]
    fn softmax_of_logs_is_normalized_ratio() {
        let mut r = [1f32.ln(), 2f32.ln(), 3f32.ln()];
        softmax_row_masked(&mut r, |_| false);
        for (got, want) in r.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-6);
        }
    }

    #[test]
    fn layer_norm_closed_forms() {
        let (y, _) = layer_norm_forward(&[2.0, 2.0, 2.0], 3, &[1.0; 3], &[0.0; 3], 1e-5);
        assert_eq!(y, vec![0.0; 3]);
        let (y, _) = layer_norm_forward(&[1.0, -1.0], 2, &[1.0; 2], &[0.0; 2], 1e-5);
        let expect = 1.0 / (1.0f32 + 1e-5).sqrt();
        assert_abs_diff_eq!(y[0], expect, epsilon = 1e-7);
        assert_abs_diff_eq!(y[1], -expect, epsilon = 1e-7);
        let (y, _) = layer_norm_forward(&[0.3, -4.0, 9.0], 3, &[0.0; 3], &[1.5; 3], 1e-5);
        assert_eq!(y, vec![1.5; 3]);
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert_abs_diff_eq!(gelu(10.0), 10.0, epsilon = 1e-5);
        // Φ(1) from the f64 erf in libm.
        let phi1 = 0.5 * (1.0 + libm::erf(1.0 / 2f64.sqrt()));
        assert_abs_diff_eq!(gelu(1.0) as f64, phi1, epsilon = 1e-4);
        assert_abs_diff_eq!(gelu(1.0), 0.8413, epsilon = 1e-4);
    }

    #[test]
    fn cross_entropy_reference_points() {
        let (loss, _, n) = cross_entropy_forward(&vec![0.0; 86 * 2], 86, &[5, 9], 0).unwrap();
        assert_eq!(n, 2);
        assert_abs_diff_eq!(loss, 86f32.ln(), epsilon = 1e-5);
        let mut logits = vec![0.0; 86];
        logits[7] = 1e4;
        let (loss, _, _) = cross_entropy_forward(&logits, 86, &[7], 0).unwrap();
        assert!(loss.abs() < 1e-6);
        assert_eq!(
            cross_entropy_forward(&[0.0; 4], 2, &[0, 0], 0).unwrap_err(),
            TensorError::EmptyLoss
        );
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0; 5]), 0);
    }
}
