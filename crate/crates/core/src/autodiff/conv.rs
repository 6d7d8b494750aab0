//! im2col-based 2-D convolution kernels shared by the forward and backward passes.

use crate::tensor::{reflect_index, Real};

use super::Padding;

/// Geometry of one convolution call (stride 1, "same" padding).
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub padding: Padding,
}

impl ConvGeom {
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Rows of the column matrix: one per (input channel, ky, kx).
    pub fn patch(&self) -> usize {
        self.in_c * self.k * self.k
    }
}

/// Source index along one axis for output position `pos` and tap `tap`,
/// or `None` when it falls in zero padding.
#[inline]
fn source(pos: usize, tap: usize, pad: usize, n: usize, padding: Padding) -> Option<usize> {
    let s = pos as isize + tap as isize - pad as isize;
    if s >= 0 && (s as usize) < n {
        Some(s as usize)
    } else {
        match padding {
            Padding::Zero => None,
            Padding::Reflect => Some(reflect_index(s, n)),
        }
    }
}

/// Grows a reusable buffer; its contents are always overwritten before use.
fn grow<T: Real>(buf: &mut Vec<T>, len: usize) {
    if buf.len() < len {
        buf.resize(len, T::zero());
    }
}

/// Expands one image (`in_c × h × w`) into a `patch × plane` column matrix.
pub(crate) fn im2col<T: Real>(input: &[T], g: &ConvGeom, col: &mut [T]) {
    let (h, w, k) = (g.h, g.w, g.k);
    let pad = (k - 1) / 2;
    let plane = g.plane();
    for ci in 0..g.in_c {
        let src = &input[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                // Columns whose source lies inside the image.
                let lo = pad.saturating_sub(kx).min(w);
                let hi = (w + pad).saturating_sub(kx).min(w).max(lo);
                for y in 0..h {
                    let out = &mut dst[y * w..(y + 1) * w];
                    let Some(sy) = source(y, ky, pad, h, g.padding) else {
                        out.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    };
                    let srow = &src[sy * w..(sy + 1) * w];
                    if hi > lo {
                        out[lo..hi].copy_from_slice(&srow[lo + kx - pad..hi + kx - pad]);
                    }
                    for x in (0..lo).chain(hi..w) {
                        out[x] = match source(x, kx, pad, w, g.padding) {
                            Some(sx) => srow[sx],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column-matrix gradient back onto the image it was expanded from.
pub(crate) fn col2im_add<T: Real>(col: &[T], g: &ConvGeom, grad_input: &mut [T]) {
    let (h, w, k) = (g.h, g.w, g.k);
    let pad = (k - 1) / 2;
    let plane = g.plane();
    for ci in 0..g.in_c {
        let dst = &mut grad_input[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                let lo = pad.saturating_sub(kx).min(w);
                let hi = (w + pad).saturating_sub(kx).min(w).max(lo);
                for y in 0..h {
                    let Some(sy) = source(y, ky, pad, h, g.padding) else {
                        continue;
                    };
                    let crow = &src[y * w..(y + 1) * w];
                    let drow = &mut dst[sy * w..(sy + 1) * w];
                    for x in lo..hi {
                        let sx = x + kx - pad;
                        drow[sx] = drow[sx] + crow[x];
                    }
                    for x in (0..lo).chain(hi..w) {
                        if let Some(sx) = source(x, kx, pad, w, g.padding) {
                            drow[sx] = drow[sx] + crow[x];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. Returns the output and, when `keep_cols`, the column
/// matrices of every batch item for the kernel gradient.
pub(crate) fn forward<T: Real>(
    input: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
    keep_cols: bool,
    scratch: &mut Vec<T>,
) -> (Vec<T>, Option<Vec<T>>) {
    let plane = g.plane();
    let patch = g.patch();
    let mut out = vec![T::zero(); g.batch * g.out_c * plane];
    let mut kept = keep_cols.then(|| vec![T::zero(); g.batch * patch * plane]);
    if !keep_cols {
        grow(scratch, patch * plane);
    }
    for b in 0..g.batch {
        let src = &input[b * g.in_c * plane..(b + 1) * g.in_c * plane];
        let col: &mut [T] = match kept.as_mut() {
            Some(all) => &mut all[b * patch * plane..(b + 1) * patch * plane],
            None => &mut scratch[..patch * plane],
        };
        im2col(src, g, col);
        let dst = &mut out[b * g.out_c * plane..(b + 1) * g.out_c * plane];
        if let Some(bias) = bias {
            for (o, &bv) in bias.iter().enumerate() {
                dst[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v = bv);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            g.out_c,
            patch,
            plane,
            T::one(),
            kernel,
            (patch as isize, 1),
            col,
            (plane as isize, 1),
            beta,
            dst,
            plane,
        );
    }
    (out, kept)
}

/// Gradient of the convolution with respect to its input.
pub(crate) fn backward_input<T: Real>(
    grad_out: &[T],
    kernel: &[T],
    g: &ConvGeom,
    grad_input: &mut [T],
    scratch: &mut Vec<T>,
) {
    let plane = g.plane();
    let patch = g.patch();
    grow(scratch, patch * plane);
    let dcol = &mut scratch[..patch * plane];
    for b in 0..g.batch {
        let go = &grad_out[b * g.out_c * plane..(b + 1) * g.out_c * plane];
        // dcol = kernelᵀ · grad_out
        T::gemm(
            patch,
            g.out_c,
            plane,
            T::one(),
            kernel,
            (1, patch as isize),
            go,
            (plane as isize, 1),
            T::zero(),
            dcol,
            plane,
        );
        col2im_add(dcol, g, &mut grad_input[b * g.in_c * plane..(b + 1) * g.in_c * plane]);
    }
}

/// Accumulates the kernel gradient `grad_out · colsᵀ` over the batch.
pub(crate) fn backward_kernel<T: Real>(grad_out: &[T], cols: &[T], g: &ConvGeom, grad_kernel: &mut [T]) {
    let plane = g.plane();
    let patch = g.patch();
    for b in 0..g.batch {
        let go = &grad_out[b * g.out_c * plane..(b + 1) * g.out_c * plane];
        let col = &cols[b * patch * plane..(b + 1) * patch * plane];
        T::gemm(
            g.out_c,
            plane,
            patch,
            T::one(),
            go,
            (plane as isize, 1),
            col,
            (1, plane as isize),
            T::one(),
            grad_kernel,
            patch,
        );
    }
}

pub(crate) fn backward_bias<T: Real>(grad_out: &[T], g: &ConvGeom, grad_bias: &mut [T]) {
    let plane = g.plane();
    for b in 0..g.batch {
        for (o, gb) in grad_bias.iter_mut().enumerate() {
            let start = (b * g.out_c + o) * plane;
            *gb = *gb + grad_out[start..start + plane].iter().copied().sum::<T>();
        }
    }
}

/// Convolutions with at most this many output channels skip im2col: their
/// matrix product is too thin to pay for the column matrix.
pub(crate) const DIRECT_MAX_OUT: usize = 4;

impl ConvGeom {
    pub fn direct(&self) -> bool {
        self.out_c <= DIRECT_MAX_OUT
    }

    fn padded(&self) -> (usize, usize) {
        (self.h + self.k - 1, self.w + self.k - 1)
    }
}

/// Copies one image into padded planes of `(h + k - 1) × (w + k - 1)`.
fn pad_planes<T: Real>(input: &[T], g: &ConvGeom) -> Vec<T> {
    let (ph, pw) = g.padded();
    let pad = (g.k - 1) / 2;
    let plane = g.plane();
    let mut out = vec![T::zero(); g.in_c * ph * pw];
    for c in 0..g.in_c {
        let src = &input[c * plane..(c + 1) * plane];
        let dst = &mut out[c * ph * pw..(c + 1) * ph * pw];
        for y in 0..ph {
            let Some(sy) = source(y, 0, pad, g.h, g.padding) else { continue };
            let row = &mut dst[y * pw..(y + 1) * pw];
            row[pad..pad + g.w].copy_from_slice(&src[sy * g.w..(sy + 1) * g.w]);
            for x in (0..pad).chain(pad + g.w..pw) {
                row[x] = source(x, 0, pad, g.w, g.padding).map_or(T::zero(), |sx| src[sy * g.w + sx]);
            }
        }
    }
    out
}

pub(crate) fn direct_forward<T: Real>(input: &[T], kernel: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (ph, pw) = g.padded();
    let (plane, k, w) = (g.plane(), g.k, g.w);
    let mut out = vec![T::zero(); g.batch * g.out_c * plane];
    for b in 0..g.batch {
        let padded = pad_planes(&input[b * g.in_c * plane..(b + 1) * g.in_c * plane], g);
        for o in 0..g.out_c {
            let dst = &mut out[(b * g.out_c + o) * plane..(b * g.out_c + o + 1) * plane];
            if let Some(bias) = bias {
                dst.iter_mut().for_each(|v| *v = bias[o]);
            }
            for c in 0..g.in_c {
                let src = &padded[c * ph * pw..(c + 1) * ph * pw];
                let taps = &kernel[(o * g.in_c + c) * k * k..(o * g.in_c + c + 1) * k * k];
                for (y, drow) in dst.chunks_exact_mut(w).enumerate() {
                    for ky in 0..k {
                        let srow = &src[(y + ky) * pw..(y + ky + 1) * pw];
                        for kx in 0..k {
                            let t = taps[ky * k + kx];
                            for (d, &s) in drow.iter_mut().zip(&srow[kx..kx + w]) {
                                *d = *d + t * s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn direct_backward_input<T: Real>(grad_out: &[T], kernel: &[T], g: &ConvGeom, grad_input: &mut [T]) {
    let (ph, pw) = g.padded();
    let (plane, k, w, pad) = (g.plane(), g.k, g.w, (g.k - 1) / 2);
    let mut gp = vec![T::zero(); g.in_c * ph * pw];
    for b in 0..g.batch {
        gp.iter_mut().for_each(|v| *v = T::zero());
        for o in 0..g.out_c {
            let go = &grad_out[(b * g.out_c + o) * plane..(b * g.out_c + o + 1) * plane];
            for c in 0..g.in_c {
                let dst = &mut gp[c * ph * pw..(c + 1) * ph * pw];
                let taps = &kernel[(o * g.in_c + c) * k * k..(o * g.in_c + c + 1) * k * k];
                for (y, grow) in go.chunks_exact(w).enumerate() {
                    for ky in 0..k {
                        let drow = &mut dst[(y + ky) * pw..(y + ky + 1) * pw];
                        for kx in 0..k {
                            let t = taps[ky * k + kx];
                            for (d, &s) in drow[kx..kx + w].iter_mut().zip(grow) {
                                *d = *d + t * s;
                            }
                        }
                    }
                }
            }
        }
        // Fold the padded gradient back onto the pixels each border cell copied.
        let gi = &mut grad_input[b * g.in_c * plane..(b + 1) * g.in_c * plane];
        for c in 0..g.in_c {
            let src = &gp[c * ph * pw..(c + 1) * ph * pw];
            let dst = &mut gi[c * plane..(c + 1) * plane];
            for y in 0..ph {
                let Some(sy) = source(y, 0, pad, g.h, g.padding) else { continue };
                for x in 0..pw {
                    if let Some(sx) = source(x, 0, pad, w, g.padding) {
                        dst[sy * w + sx] = dst[sy * w + sx] + src[y * pw + x];
                    }
                }
            }
        }
    }
}

pub(crate) fn direct_backward_kernel<T: Real>(grad_out: &[T], input: &[T], g: &ConvGeom, grad_kernel: &mut [T]) {
    let (ph, pw) = g.padded();
    let (plane, k, w) = (g.plane(), g.k, g.w);
    for b in 0..g.batch {
        let padded = pad_planes(&input[b * g.in_c * plane..(b + 1) * g.in_c * plane], g);
        for o in 0..g.out_c {
            let go = &grad_out[(b * g.out_c + o) * plane..(b * g.out_c + o + 1) * plane];
            for c in 0..g.in_c {
                let src = &padded[c * ph * pw..(c + 1) * ph * pw];
                let taps = &mut grad_kernel[(o * g.in_c + c) * k * k..(o * g.in_c + c + 1) * k * k];
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = T::zero();
                        for (y, grow) in go.chunks_exact(w).enumerate() {
                            let srow = &src[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                            acc = acc + grow.iter().zip(srow).map(|(&a, &b)| a * b).sum::<T>();
                        }
                        taps[ky * k + kx] = taps[ky * k + kx] + acc;
                    }
                }
            }
        }
    }
}
