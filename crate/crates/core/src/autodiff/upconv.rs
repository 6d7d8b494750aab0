//! Nearest 2× upsampling fused with a 3×3 convolution.
//!
//! Every output pixel `(2y + p, 2x + q)` of `conv3x3(upsample(x))` only reads
//! low-resolution rows `y + p - 1 ..= y + p` and columns `x + q - 1 ..= x + q`,
//! so each of the four output phases `(p, q)` is a 2×2 convolution on the
//! low-resolution map with taps summed from the 3×3 kernel. Reflect padding of
//! the upsampled map is edge replication of the low-resolution one.

use crate::tensor::Real;

use super::Padding;

/// `TAPS[p][t]`: 3×3 kernel rows (or columns) folded into 2×2 tap `t` of phase `p`.
const TAPS: [[&[usize]; 2]; 2] = [[&[0], &[1, 2]], [&[0, 1], &[2]]];

#[derive(Clone, Copy, Debug)]
pub(crate) struct UpConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    /// Low-resolution input size.
    pub h: usize,
    pub w: usize,
    pub padding: Padding,
}

impl UpConvGeom {
    fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Rows of the low-resolution column matrix: `(dy, dx, channel)` for offsets in `-1..=1`.
    pub fn col_rows(&self) -> usize {
        9 * self.in_c
    }

    /// Length of the folded kernels: `[p][q][out][ty][tx][in]`.
    fn phase_len(&self) -> usize {
        16 * self.out_c * self.in_c
    }
}

#[inline]
fn source(pos: usize, d: isize, n: usize, padding: Padding) -> Option<usize> {
    let s = pos as isize + d;
    if s >= 0 && (s as usize) < n {
        Some(s as usize)
    } else {
        match padding {
            Padding::Zero => None,
            Padding::Reflect => Some(s.clamp(0, n as isize - 1) as usize),
        }
    }
}

/// Low-resolution column matrix with one block of `in_c` rows per offset `(dy, dx)`.
pub(crate) fn im2col<T: Real>(input: &[T], g: &UpConvGeom, col: &mut [T]) {
    let (h, w, plane) = (g.h, g.w, g.plane());
    for dy in -1isize..=1 {
        for dx in -1isize..=1 {
            let block = ((dy + 1) * 3 + dx + 1) as usize;
            let lo = usize::from(dx < 0).min(w);
            let hi = if dx > 0 { w.saturating_sub(1) } else { w }.max(lo);
            for c in 0..g.in_c {
                let src = &input[c * plane..(c + 1) * plane];
                let dst = &mut col[(block * g.in_c + c) * plane..(block * g.in_c + c + 1) * plane];
                for y in 0..h {
                    let out = &mut dst[y * w..(y + 1) * w];
                    let Some(sy) = source(y, dy, h, g.padding) else {
                        out.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    };
                    let srow = &src[sy * w..(sy + 1) * w];
                    if hi > lo {
                        let s0 = (lo as isize + dx) as usize;
                        out[lo..hi].copy_from_slice(&srow[s0..s0 + hi - lo]);
                    }
                    for x in (0..lo).chain(hi..w) {
                        out[x] = source(x, dx, w, g.padding).map_or(T::zero(), |sx| srow[sx]);
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(col: &[T], g: &UpConvGeom, grad_input: &mut [T]) {
    let (h, w, plane) = (g.h, g.w, g.plane());
    for dy in -1isize..=1 {
        for dx in -1isize..=1 {
            let block = ((dy + 1) * 3 + dx + 1) as usize;
            let lo = usize::from(dx < 0).min(w);
            let hi = if dx > 0 { w.saturating_sub(1) } else { w }.max(lo);
            for c in 0..g.in_c {
                let src = &col[(block * g.in_c + c) * plane..(block * g.in_c + c + 1) * plane];
                let dst = &mut grad_input[c * plane..(c + 1) * plane];
                for y in 0..h {
                    let Some(sy) = source(y, dy, h, g.padding) else { continue };
                    let crow = &src[y * w..(y + 1) * w];
                    let drow = &mut dst[sy * w..(sy + 1) * w];
                    if hi > lo {
                        let s0 = (lo as isize + dx) as usize;
                        for (d, &v) in drow[s0..s0 + hi - lo].iter_mut().zip(&crow[lo..hi]) {
                            *d = *d + v;
                        }
                    }
                    for x in (0..lo).chain(hi..w) {
                        if let Some(sx) = source(x, dx, w, g.padding) {
                            drow[sx] = drow[sx] + crow[x];
                        }
                    }
                }
            }
        }
    }
}

/// Folds an `out × in × 3 × 3` kernel into the four phase kernels.
pub(crate) fn phase_kernels<T: Real>(kernel: &[T], g: &UpConvGeom) -> Vec<T> {
    let (oc, ic) = (g.out_c, g.in_c);
    let mut pk = vec![T::zero(); g.phase_len()];
    for p in 0..2 {
        for q in 0..2 {
            for o in 0..oc {
                for ty in 0..2 {
                    for tx in 0..2 {
                        let base = ((((p * 2 + q) * oc + o) * 2 + ty) * 2 + tx) * ic;
                        for c in 0..ic {
                            let k = &kernel[(o * ic + c) * 9..(o * ic + c + 1) * 9];
                            let mut acc = T::zero();
                            for &ky in TAPS[p][ty] {
                                for &kx in TAPS[q][tx] {
                                    acc = acc + k[ky * 3 + kx];
                                }
                            }
                            pk[base + c] = acc;
                        }
                    }
                }
            }
        }
    }
    pk
}

/// Offset of the 2·in_c rows of the column matrix used by tap row `ty` of phase `(p, q)`.
fn block_offset(p: usize, q: usize, ty: usize, g: &UpConvGeom) -> usize {
    // dy = p + ty - 1 and dx starts at q - 1, so the block index is (dy + 1)·3 + q.
    ((p + ty) * 3 + q) * g.in_c * g.plane()
}

fn kernel_offset(p: usize, q: usize, ty: usize, g: &UpConvGeom) -> usize {
    ((p * 2 + q) * g.out_c * 2 + ty) * 2 * g.in_c
}

/// Forward pass with folded kernels `pk`; `cols` receives the column matrix
/// (`col_rows × h·w`).
pub(crate) fn forward<T: Real>(input: &[T], pk: &[T], bias: Option<&[T]>, g: &UpConvGeom, cols: &mut [T]) -> Vec<T> {
    let (plane, w, oc, ic) = (g.plane(), g.w, g.out_c, g.in_c);
    im2col(input, g, cols);
    let mut phase = vec![T::zero(); oc * plane];
    let mut out = vec![T::zero(); oc * 4 * plane];
    for p in 0..2 {
        for q in 0..2 {
            for o in 0..oc {
                let b = bias.map_or(T::zero(), |b| b[o]);
                phase[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v = b);
            }
            for ty in 0..2 {
                T::gemm(
                    oc,
                    2 * ic,
                    plane,
                    T::one(),
                    &pk[kernel_offset(p, q, ty, g)..],
                    (4 * ic as isize, 1),
                    &cols[block_offset(p, q, ty, g)..],
                    (plane as isize, 1),
                    T::one(),
                    &mut phase,
                    plane,
                );
            }
            for o in 0..oc {
                let src = &phase[o * plane..(o + 1) * plane];
                let dst = &mut out[o * 4 * plane..(o + 1) * 4 * plane];
                for (y, row) in src.chunks_exact(w).enumerate() {
                    let drow = &mut dst[(2 * y + p) * 2 * w..(2 * y + p + 1) * 2 * w];
                    for (x, &v) in row.iter().enumerate() {
                        drow[2 * x + q] = v;
                    }
                }
            }
        }
    }
    out
}

/// Splits an output gradient into its four phases: `[p][q][out][h·w]`.
pub(crate) fn gather_phases<T: Real>(grad_out: &[T], g: &UpConvGeom) -> Vec<T> {
    let (plane, w, oc) = (g.plane(), g.w, g.out_c);
    let mut phases = vec![T::zero(); 4 * oc * plane];
    for p in 0..2 {
        for q in 0..2 {
            for o in 0..oc {
                let src = &grad_out[o * 4 * plane..(o + 1) * 4 * plane];
                let dst = &mut phases[((p * 2 + q) * oc + o) * plane..((p * 2 + q) * oc + o + 1) * plane];
                for (y, row) in dst.chunks_exact_mut(w).enumerate() {
                    let srow = &src[(2 * y + p) * 2 * w..(2 * y + p + 1) * 2 * w];
                    for (x, v) in row.iter_mut().enumerate() {
                        *v = srow[2 * x + q];
                    }
                }
            }
        }
    }
    phases
}

pub(crate) fn backward_input<T: Real>(phases: &[T], pk: &[T], g: &UpConvGeom, grad_input: &mut [T], scratch: &mut Vec<T>) {
    let (plane, oc, ic) = (g.plane(), g.out_c, g.in_c);
    let len = g.col_rows() * plane;
    if scratch.len() < len {
        scratch.resize(len, T::zero());
    }
    let dcol = &mut scratch[..len];
    dcol.iter_mut().for_each(|v| *v = T::zero());
    for p in 0..2 {
        for q in 0..2 {
            let gp = &phases[(p * 2 + q) * oc * plane..(p * 2 + q + 1) * oc * plane];
            for ty in 0..2 {
                T::gemm(
                    2 * ic,
                    oc,
                    plane,
                    T::one(),
                    &pk[kernel_offset(p, q, ty, g)..],
                    (1, 4 * ic as isize),
                    gp,
                    (plane as isize, 1),
                    T::one(),
                    &mut dcol[block_offset(p, q, ty, g)..],
                    plane,
                );
            }
        }
    }
    col2im_add(dcol, g, grad_input);
}

pub(crate) fn backward_kernel<T: Real>(phases: &[T], cols: &[T], g: &UpConvGeom, grad_kernel: &mut [T]) {
    let (plane, oc, ic) = (g.plane(), g.out_c, g.in_c);
    let mut dpk = vec![T::zero(); g.phase_len()];
    for p in 0..2 {
        for q in 0..2 {
            let gp = &phases[(p * 2 + q) * oc * plane..(p * 2 + q + 1) * oc * plane];
            for ty in 0..2 {
                T::gemm(
                    oc,
                    plane,
                    2 * ic,
                    T::one(),
                    gp,
                    (plane as isize, 1),
                    &cols[block_offset(p, q, ty, g)..],
                    (1, plane as isize),
                    T::one(),
                    &mut dpk[kernel_offset(p, q, ty, g)..],
                    4 * ic,
                );
            }
        }
    }
    // Unfold: every 3×3 tap collects the folded taps it contributed to.
    for p in 0..2 {
        for q in 0..2 {
            for o in 0..oc {
                for ty in 0..2 {
                    for tx in 0..2 {
                        let base = ((((p * 2 + q) * oc + o) * 2 + ty) * 2 + tx) * ic;
                        for c in 0..ic {
                            let d = dpk[base + c];
                            let k = &mut grad_kernel[(o * ic + c) * 9..(o * ic + c + 1) * 9];
                            for &ky in TAPS[p][ty] {
                                for &kx in TAPS[q][tx] {
                                    k[ky * 3 + kx] = k[ky * 3 + kx] + d;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn backward_bias<T: Real>(grad_out: &[T], g: &UpConvGeom, grad_bias: &mut [T]) {
    let n = 4 * g.plane();
    for (o, gb) in grad_bias.iter_mut().enumerate() {
        *gb = *gb + grad_out[o * n..(o + 1) * n].iter().copied().sum::<T>();
    }
}
