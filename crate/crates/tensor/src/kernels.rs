//! Slice-level compute kernels shared by the eager ops and the tape.
//!
//! Every multiply-accumulate performed by the matrix and depthwise kernels is
//! tallied in a thread-local counter, so cost comparisons between convolution
//! variants can be measured rather than computed from formulas.

use std::cell::Cell;

use crate::tensor::Element;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

/// Multiply-accumulates executed on this thread since the last reset.
pub fn mac_count() -> u64 {
    MACS.with(|m| m.get())
}

pub fn reset_mac_count() {
    MACS.with(|m| m.set(0));
}

fn add_macs(n: usize) {
    MACS.with(|m| m.set(m.get() + n as u64));
}

/// `c (+)= a · b` with a: m×k, b: k×n, c: m×n.
pub fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if !accumulate {
        c.fill(T::zero());
    }
    tiled(m, k, n, a, k, 1, b, c);
    add_macs(m * k * n);
}

/// `c (+)= aᵀ · b` with a: r×m, b: r×n, c: m×n.
pub fn gemm_tn<T: Element>(
    r: usize,
    m: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), r * m);
    debug_assert_eq!(b.len(), r * n);
    debug_assert_eq!(c.len(), m * n);
    if !accumulate {
        c.fill(T::zero());
    }
    tiled(m, r, n, a, 1, m, b, c);
    add_macs(r * m * n);
}

const TILE_M: usize = 4;

/// `c += A · b` where `A[i][p] = a[i·rs + p·cs]`. Each output accumulates its
/// products in ascending `p`, so the result matches the naive loop bit for bit
/// whichever instruction set runs it (no fused multiply-add).
#[allow(clippy::too_many_arguments)]
fn tiled<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    rs: usize,
    cs: usize,
    b: &[T],
    c: &mut [T],
) {
    #[cfg(target_arch = "x86_64")]
    if std::any::TypeId::of::<T>() == std::any::TypeId::of::<f32>()
        && std::arch::is_x86_feature_detected!("avx")
    {
        // SAFETY: T is f32, so the casts are identity reinterpretations; the
        // feature was detected at runtime.
        unsafe {
            let a = std::slice::from_raw_parts(a.as_ptr() as *const f32, a.len());
            let b = std::slice::from_raw_parts(b.as_ptr() as *const f32, b.len());
            let c = std::slice::from_raw_parts_mut(c.as_mut_ptr() as *mut f32, c.len());
            avx::tiled_f32(m, k, n, a, rs, cs, b, c);
        }
        return;
    }
    tiled_body::<T, 8>(m, k, n, a, rs, cs, b, c);
}

#[cfg(target_arch = "x86_64")]
mod avx {
    use std::arch::x86_64::*;

    /// 4×16 register tile. Multiply and add stay separate instructions so
    /// rounding matches the portable loop.
    #[target_feature(enable = "avx")]
    #[allow(clippy::too_many_arguments)]
    pub(super) unsafe fn tiled_f32(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        rs: usize,
        cs: usize,
        b: &[f32],
        c: &mut [f32],
    ) {
        assert!(m == 0 || k == 0 || (m - 1) * rs + (k - 1) * cs < a.len());
        assert!(b.len() >= k * n && c.len() >= m * n);
        let (ap, bp, cp) = (a.as_ptr(), b.as_ptr(), c.as_mut_ptr());
        let mut i = 0;
        while i + 4 <= m {
            let mut j = 0;
            while j + 16 <= n {
                let row = |r: usize| cp.add((i + r) * n + j);
                let mut acc = [_mm256_setzero_ps(); 8];
                for r in 0..4 {
                    acc[2 * r] = _mm256_loadu_ps(row(r));
                    acc[2 * r + 1] = _mm256_loadu_ps(row(r).add(8));
                }
                for p in 0..k {
                    let b0 = _mm256_loadu_ps(bp.add(p * n + j));
                    let b1 = _mm256_loadu_ps(bp.add(p * n + j + 8));
                    for r in 0..4 {
                        let av = _mm256_set1_ps(*ap.add((i + r) * rs + p * cs));
                        acc[2 * r] = _mm256_add_ps(acc[2 * r], _mm256_mul_ps(av, b0));
                        acc[2 * r + 1] = _mm256_add_ps(acc[2 * r + 1], _mm256_mul_ps(av, b1));
                    }
                }
                for r in 0..4 {
                    _mm256_storeu_ps(row(r), acc[2 * r]);
                    _mm256_storeu_ps(row(r).add(8), acc[2 * r + 1]);
                }
                j += 16;
            }
            if j < n {
                super::edge(i, i + 4, j, k, n, a, rs, cs, b, c);
            }
            i += 4;
        }
        if i < m {
            super::edge(i, m, 0, k, n, a, rs, cs, b, c);
        }
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn tiled_body<T: Element, const TN: usize>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    rs: usize,
    cs: usize,
    b: &[T],
    c: &mut [T],
) {
    let mut i = 0;
    while i + TILE_M <= m {
        let mut j = 0;
        while j + TN <= n {
            let mut acc = [[T::zero(); TN]; TILE_M];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + TN]);
            }
            for p in 0..k {
                let bv: &[T; TN] = b[p * n + j..p * n + j + TN].try_into().unwrap();
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * rs + p * cs];
                    for q in 0..TN {
                        row[q] = row[q] + av * bv[q];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i + r) * n + j..(i + r) * n + j + TN].copy_from_slice(row);
            }
            j += TN;
        }
        if j < n {
            edge(i, i + TILE_M, j, k, n, a, rs, cs, b, c);
        }
        i += TILE_M;
    }
    if i < m {
        edge(i, m, 0, k, n, a, rs, cs, b, c);
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn edge<T: Element>(
    i0: usize,
    i1: usize,
    j0: usize,
    k: usize,
    n: usize,
    a: &[T],
    rs: usize,
    cs: usize,
    b: &[T],
    c: &mut [T],
) {
    for i in i0..i1 {
        let c_row = &mut c[i * n + j0..(i + 1) * n];
        for p in 0..k {
            let av = a[i * rs + p * cs];
            for (cv, &bv) in c_row.iter_mut().zip(&b[p * n + j0..(p + 1) * n]) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// `c (+)= a · bᵀ` with a: m×k, b: n×k, c: m×n.
pub fn gemm_nt<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    let bt = transpose(n, k, b);
    gemm(m, k, n, a, &bt, c, accumulate);
}

/// Transposes a rows×cols matrix.
pub fn transpose<T: Element>(rows: usize, cols: usize, x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

/// Resolved spatial geometry of one convolution or pooling window sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn out_pixels(&self) -> usize {
        self.out_height * self.out_width
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    #[inline]
    fn source_index(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.pad_top as isize;
        let x = (ox * self.stride + kx) as isize - self.pad_left as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

/// Unfolds one image `[C×H×W]` into columns `[(C·K·K) × (H'·W')]`.
pub fn im2col<T: Element>(geo: &ConvGeometry, image: &[T], cols: &mut [T]) {
    let k = geo.kernel;
    let hw = geo.height * geo.width;
    let px = geo.out_pixels();
    for c in 0..geo.channels {
        let plane = &image[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * px..(row + 1) * px];
                for oy in 0..geo.out_height {
                    for ox in 0..geo.out_width {
                        dst[oy * geo.out_width + ox] = match geo.source_index(oy, ox, ky, kx) {
                            Some((y, x)) => plane[y * geo.width + x],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto an image gradient.
pub fn col2im<T: Element>(geo: &ConvGeometry, cols: &[T], image_grad: &mut [T]) {
    let k = geo.kernel;
    let hw = geo.height * geo.width;
    let px = geo.out_pixels();
    for c in 0..geo.channels {
        let plane = &mut image_grad[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * px..(row + 1) * px];
                for oy in 0..geo.out_height {
                    for ox in 0..geo.out_width {
                        if let Some((y, x)) = geo.source_index(oy, ox, ky, kx) {
                            plane[y * geo.width + x] =
                                plane[y * geo.width + x] + src[oy * geo.out_width + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Per-channel spatial filtering of one image; filters `[C×K×K]`.
pub fn depthwise_forward<T: Element>(
    geo: &ConvGeometry,
    image: &[T],
    filters: &[T],
    out: &mut [T],
) {
    let k = geo.kernel;
    let hw = geo.height * geo.width;
    let px = geo.out_pixels();
    for c in 0..geo.channels {
        let plane = &image[c * hw..(c + 1) * hw];
        let filt = &filters[c * k * k..(c + 1) * k * k];
        let dst = &mut out[c * px..(c + 1) * px];
        for oy in 0..geo.out_height {
            for ox in 0..geo.out_width {
                let mut acc = T::zero();
                for ky in 0..k {
                    for kx in 0..k {
                        if let Some((y, x)) = geo.source_index(oy, ox, ky, kx) {
                            acc = acc + plane[y * geo.width + x] * filt[ky * k + kx];
                        }
                    }
                }
                dst[oy * geo.out_width + ox] = acc;
            }
        }
    }
    add_macs(geo.channels * k * k * px);
}

/// Gradients of [`depthwise_forward`] for one image, accumulated into the outputs.
pub fn depthwise_backward<T: Element>(
    geo: &ConvGeometry,
    image: &[T],
    filters: &[T],
    grad_out: &[T],
    image_grad: Option<&mut [T]>,
    filter_grad: Option<&mut [T]>,
) {
    let k = geo.kernel;
    let hw = geo.height * geo.width;
    let px = geo.out_pixels();
    let mut image_grad = image_grad;
    let mut filter_grad = filter_grad;
    for c in 0..geo.channels {
        let plane = &image[c * hw..(c + 1) * hw];
        let filt = &filters[c * k * k..(c + 1) * k * k];
        let g = &grad_out[c * px..(c + 1) * px];
        for oy in 0..geo.out_height {
            for ox in 0..geo.out_width {
                let go = g[oy * geo.out_width + ox];
                for ky in 0..k {
                    for kx in 0..k {
                        if let Some((y, x)) = geo.source_index(oy, ox, ky, kx) {
                            if let Some(ig) = image_grad.as_deref_mut() {
                                let i = c * hw + y * geo.width + x;
                                ig[i] = ig[i] + go * filt[ky * k + kx];
                            }
                            if let Some(fg) = filter_grad.as_deref_mut() {
                                let i = c * k * k + ky * k + kx;
                                fg[i] = fg[i] + go * plane[y * geo.width + x];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Non-overlapping max pooling of one image; returns argmax offsets into the image.
pub fn max_pool_forward<T: Element>(
    geo: &ConvGeometry,
    image: &[T],
    out: &mut [T],
    argmax: &mut [usize],
) {
    let k = geo.kernel;
    let hw = geo.height * geo.width;
    let px = geo.out_pixels();
    for c in 0..geo.channels {
        for oy in 0..geo.out_height {
            for ox in 0..geo.out_width {
                let mut best = T::neg_infinity();
                let mut best_idx = c * hw + oy * geo.stride * geo.width + ox * geo.stride;
                for ky in 0..k {
                    for kx in 0..k {
                        if let Some((y, x)) = geo.source_index(oy, ox, ky, kx) {
                            let idx = c * hw + y * geo.width + x;
                            if image[idx] > best {
                                best = image[idx];
                                best_idx = idx;
                            }
                        }
                    }
                }
                let o = c * px + oy * geo.out_width + ox;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2×3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3×2
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, &b, &mut c, false);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);

        let at = transpose(2, 3, &a);
        let mut c2 = [0.0; 4];
        gemm_tn(3, 2, 2, &at, &b, &mut c2, false);
        assert_eq!(c, c2);

        let bt = transpose(3, 2, &b);
        let mut c3 = [0.0; 4];
        gemm_nt(2, 3, 2, &a, &bt, &mut c3, false);
        assert_eq!(c, c3);
    }

    #[test]
    fn mac_counter_tracks_gemm() {
        reset_mac_count();
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &[0.0; 6], &[0.0; 6], &mut c, false);
        assert_eq!(mac_count(), 12);
        reset_mac_count();
        assert_eq!(mac_count(), 0);
    }
}
