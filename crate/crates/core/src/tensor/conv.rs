//! Stride-1, zero-padded ("same") convolution over prefix sub-blocks of a
//! stored weight, lowered to im2col + GEMM.
//!
//! A weight of shape `[Wo, Wi, k, k]` evaluated with `out_ch <= Wo` and
//! `in_ch <= Wi` reads rows `0..out_ch` and, inside each row, the contiguous
//! prefix `0..in_ch*k*k`. The GEMM is given the full row stride, so no copy
//! of the sub-block is ever made.

use super::Scalar;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    /// Stored input-channel count of the weight (`Wi`).
    pub stored_in: usize,
}

impl ConvGeom {
    fn plane(&self) -> usize {
        self.height * self.width
    }

    fn taps(&self) -> usize {
        self.kernel * self.kernel
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.taps()
    }

    fn weight_row_stride(&self) -> usize {
        self.stored_in * self.taps()
    }
}

/// Output columns `[lo, hi)` whose source column `x + dx` lies inside `0..w`.
fn valid_span(w: isize, dx: isize) -> (usize, usize) {
    let lo = (-dx).clamp(0, w);
    let hi = (w - dx).clamp(lo, w);
    (lo as usize, hi as usize)
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let (h, w, k) = (g.height as isize, g.width as isize, g.kernel);
    let pad = (k / 2) as isize;
    let (wu, plane) = (g.width, g.plane());
    for c in 0..g.in_ch {
        let src = &x[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let (lo, hi) = valid_span(w, dx);
                for y in 0..h {
                    let sy = y + dy;
                    let out = &mut dst[y as usize * wu..(y as usize + 1) * wu];
                    if sy < 0 || sy >= h {
                        out.fill(T::zero());
                        continue;
                    }
                    let base = sy as usize * wu;
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    let s0 = (base as isize + lo as isize + dx) as usize;
                    out[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let (h, w, k) = (g.height as isize, g.width as isize, g.kernel);
    let pad = (k / 2) as isize;
    let (wu, plane) = (g.width, g.plane());
    for c in 0..g.in_ch {
        let dst = &mut dx[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                let oy = ky as isize - pad;
                let ox = kx as isize - pad;
                let (lo, hi) = valid_span(w, ox);
                for y in 0..h {
                    let sy = y + oy;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    let s = &src[y as usize * wu + lo..y as usize * wu + hi];
                    let d0 = (sy as usize * wu) as isize + lo as isize + ox;
                    let d = &mut dst[d0 as usize..d0 as usize + (hi - lo)];
                    for (a, &b) in d.iter_mut().zip(s) {
                        *a = *a + b;
                    }
                }
            }
        }
    }
}

/// Forward pass; `out` has shape `[B, out_ch, H, W]`.
pub(crate) fn forward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let plane = g.plane();
    let in_stride = g.in_ch * plane;
    let out_stride = g.out_ch * plane;
    let pointwise = g.kernel == 1;
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); g.col_rows() * plane]
    };
    for b in 0..g.batch {
        let xb = &x[b * in_stride..(b + 1) * in_stride];
        let ob = &mut out[b * out_stride..(b + 1) * out_stride];
        match bias {
            Some(bias) => {
                for (o, &bv) in bias.iter().take(g.out_ch).enumerate() {
                    ob[o * plane..(o + 1) * plane].fill(bv);
                }
            }
            None => ob.fill(T::zero()),
        }
        let cols: &[T] = if pointwise {
            xb
        } else {
            im2col(g, xb, &mut col);
            &col
        };
        // SAFETY: weight rows 0..out_ch each hold at least col_rows entries at
        // stride weight_row_stride; cols is col_rows x plane; ob is out_ch x plane.
        unsafe {
            T::gemm_raw(
                g.out_ch,
                g.col_rows(),
                plane,
                weight.as_ptr(),
                g.weight_row_stride() as isize,
                1,
                cols.as_ptr(),
                plane as isize,
                1,
                T::one(),
                ob.as_mut_ptr(),
                plane as isize,
                1,
            );
        }
    }
}

/// Backward pass. Gradients are accumulated into the provided buffers;
/// `dweight` is shaped like the full stored weight and only its prefix
/// sub-block is touched.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dout: &[T],
    dx: Option<&mut [T]>,
    dweight: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    let plane = g.plane();
    let in_stride = g.in_ch * plane;
    let out_stride = g.out_ch * plane;
    let rows = g.col_rows();
    let wrs = g.weight_row_stride() as isize;
    let pointwise = g.kernel == 1;

    if let Some(db) = dbias {
        for b in 0..g.batch {
            let ob = &dout[b * out_stride..(b + 1) * out_stride];
            for (o, d) in db.iter_mut().take(g.out_ch).enumerate() {
                let s: T = ob[o * plane..(o + 1) * plane].iter().copied().sum();
                *d = *d + s;
            }
        }
    }

    if let Some(dw) = dweight {
        let mut col = if pointwise {
            Vec::new()
        } else {
            vec![T::zero(); rows * plane]
        };
        for b in 0..g.batch {
            let xb = &x[b * in_stride..(b + 1) * in_stride];
            let ob = &dout[b * out_stride..(b + 1) * out_stride];
            let cols: &[T] = if pointwise {
                xb
            } else {
                im2col(g, xb, &mut col);
                &col
            };
            // SAFETY: dout is out_ch x plane, cols^T is plane x rows, dw rows are
            // strided like the stored weight.
            unsafe {
                T::gemm_raw(
                    g.out_ch,
                    plane,
                    rows,
                    ob.as_ptr(),
                    plane as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    plane as isize,
                    T::one(),
                    dw.as_mut_ptr(),
                    wrs,
                    1,
                );
            }
        }
    }

    if let Some(dx) = dx {
        let mut dcol = vec![T::zero(); rows * plane];
        for b in 0..g.batch {
            let ob = &dout[b * out_stride..(b + 1) * out_stride];
            // SAFETY: weight^T sub-block is rows x out_ch, dout is out_ch x plane.
            unsafe {
                T::gemm_raw(
                    rows,
                    g.out_ch,
                    plane,
                    weight.as_ptr(),
                    1,
                    wrs,
                    ob.as_ptr(),
                    plane as isize,
                    1,
                    T::zero(),
                    dcol.as_mut_ptr(),
                    plane as isize,
                    1,
                );
            }
            let dxb = &mut dx[b * in_stride..(b + 1) * in_stride];
            if pointwise {
                dxb.iter_mut().zip(&dcol).for_each(|(a, &v)| *a = *a + v);
            } else {
                col2im_add(g, &dcol, dxb);
            }
        }
    }
}
