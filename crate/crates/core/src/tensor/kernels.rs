//! Dense f32 matrix product used by every projection in the model.
//!
//! Each output element is a single fused multiply-add chain over the inner
//! dimension in ascending order, starting from zero. The SIMD path and the
//! scalar fallback therefore produce bit-identical results, and both match a
//! naive triple loop written with `f32::mul_add`.

const MR: usize = 12;
const NR: usize = 32;

/// Layout of one operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// Stored as written (`m×k` for the left operand, `k×n` for the right).
    Normal,
    /// Stored transposed (`k×m` for the left operand, `n×k` for the right).
    Transposed,
}

/// `C[m×n] = op(A)·op(B)`, returned as a fresh row-major buffer.
pub fn gemm(
    a: &[f32],
    a_layout: Layout,
    b: &[f32],
    b_layout: Layout,
    m: usize,
    n: usize,
    k: usize,
) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0f32; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    let pa = pack_a(a, a_layout, m, k);
    let pb = pack_b(b, b_layout, k, n);
    let a_panels = m.div_ceil(MR);
    let b_panels = n.div_ceil(NR);
    let mut tile = [0.0f32; MR * NR];
    for ip in 0..a_panels {
        let ap = &pa[ip * MR * k..(ip + 1) * MR * k];
        let rows = MR.min(m - ip * MR);
        for jp in 0..b_panels {
            let bp = &pb[jp * NR * k..(jp + 1) * NR * k];
            let cols = NR.min(n - jp * NR);
            micro_kernel(ap, bp, k, &mut tile);
            for r in 0..rows {
                let dst = (ip * MR + r) * n + jp * NR;
                c[dst..dst + cols].copy_from_slice(&tile[r * NR..r * NR + cols]);
            }
        }
    }
    c
}

fn pack_a(a: &[f32], layout: Layout, m: usize, k: usize) -> Vec<f32> {
    let panels = m.div_ceil(MR);
    let mut out = vec![0.0f32; panels * MR * k];
    for ip in 0..panels {
        let base = ip * MR * k;
        let rows = MR.min(m - ip * MR);
        match layout {
            Layout::Normal => {
                let src = &a[ip * MR * k..(ip * MR + rows) * k];
                for p in 0..k {
                    let dst = &mut out[base + p * MR..base + p * MR + rows];
                    for (r, d) in dst.iter_mut().enumerate() {
                        *d = src[r * k + p];
                    }
                }
            }
            Layout::Transposed => {
                for p in 0..k {
                    let src = &a[p * m + ip * MR..p * m + ip * MR + rows];
                    out[base + p * MR..base + p * MR + rows].copy_from_slice(src);
                }
            }
        }
    }
    out
}

fn pack_b(b: &[f32], layout: Layout, k: usize, n: usize) -> Vec<f32> {
    let panels = n.div_ceil(NR);
    let mut out = vec![0.0f32; panels * NR * k];
    for jp in 0..panels {
        let base = jp * NR * k;
        let cols = NR.min(n - jp * NR);
        match layout {
            Layout::Normal => {
                for p in 0..k {
                    let src = &b[p * n + jp * NR..p * n + jp * NR + cols];
                    out[base + p * NR..base + p * NR + cols].copy_from_slice(src);
                }
            }
            Layout::Transposed => {
                for c in 0..cols {
                    let src = &b[(jp * NR + c) * k..(jp * NR + c + 1) * k];
                    for (p, &v) in src.iter().enumerate() {
                        out[base + p * NR + c] = v;
                    }
                }
            }
        }
    }
    out
}

#[inline]
fn micro_kernel(ap: &[f32], bp: &[f32], k: usize, tile: &mut [f32; MR * NR]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx512f") {
            // SAFETY: feature presence checked above; slices hold MR*k and NR*k values.
            unsafe { micro_kernel_avx512(ap, bp, k, tile) };
            return;
        }
    }
    micro_kernel_scalar(ap, bp, k, tile);
}

fn micro_kernel_scalar(ap: &[f32], bp: &[f32], k: usize, tile: &mut [f32; MR * NR]) {
    tile.fill(0.0);
    for p in 0..k {
        let arow = &ap[p * MR..(p + 1) * MR];
        let brow = &bp[p * NR..(p + 1) * NR];
        for r in 0..MR {
            let av = arow[r];
            let t = &mut tile[r * NR..(r + 1) * NR];
            for c in 0..NR {
                t[c] = av.mul_add(brow[c], t[c]);
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn micro_kernel_avx512(ap: &[f32], bp: &[f32], k: usize, tile: &mut [f32; MR * NR]) {
    use std::arch::x86_64::*;
    debug_assert!(ap.len() >= MR * k && bp.len() >= NR * k);
    let mut acc = [[_mm512_setzero_ps(); 2]; MR];
    let a = ap.as_ptr();
    let b = bp.as_ptr();
    for p in 0..k {
        let b0 = _mm512_loadu_ps(b.add(p * NR));
        let b1 = _mm512_loadu_ps(b.add(p * NR + 16));
        let arow = a.add(p * MR);
        for (r, row) in acc.iter_mut().enumerate() {
            let av = _mm512_set1_ps(*arow.add(r));
            row[0] = _mm512_fmadd_ps(av, b0, row[0]);
            row[1] = _mm512_fmadd_ps(av, b1, row[1]);
        }
    }
    let out = tile.as_mut_ptr();
    for (r, row) in acc.iter().enumerate() {
        _mm512_storeu_ps(out.add(r * NR), row[0]);
        _mm512_storeu_ps(out.add(r * NR + 16), row[1]);
    }
}
