//! Forward and adjoint kernels for the spatial primitives.
//!
//! Convolutions lower each sample to a column matrix and call gemm. Work is
//! split per batch sample; reductions over the batch run in sample order so
//! results do not depend on the thread count.

use super::Float;
use rayon::prelude::*;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub k: usize,
}

impl ConvGeom {
    fn pad(&self) -> isize {
        (self.k / 2) as isize
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// Unfolds one `C×H×W` sample into a `(C·k·k)×(H·W)` matrix with zero padding.
fn im2col<T: Float>(g: &ConvGeom, input: &[T], cols: &mut [T]) {
    let (h, w, k, pad) = (g.h as isize, g.w as isize, g.k, g.pad());
    let plane = g.plane();
    for ci in 0..g.c {
        let src = &input[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y + dy;
                    let out = &mut dst[(y * w) as usize..((y + 1) * w) as usize];
                    if sy < 0 || sy >= h {
                        out.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let srow = &src[(sy * w) as usize..((sy + 1) * w) as usize];
                    for x in 0..w {
                        let sx = x + dx;
                        out[x as usize] = if sx < 0 || sx >= w {
                            T::zero()
                        } else {
                            srow[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the sample.
fn col2im<T: Float>(g: &ConvGeom, cols: &[T], grad: &mut [T]) {
    let (h, w, k, pad) = (g.h as isize, g.w as isize, g.k, g.pad());
    let plane = g.plane();
    grad.iter_mut().for_each(|v| *v = T::zero());
    for ci in 0..g.c {
        let dst = &mut grad[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y + dy;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    let drow = &mut dst[(sy * w) as usize..((sy + 1) * w) as usize];
                    let srow = &src[(y * w) as usize..((y + 1) * w) as usize];
                    for x in 0..w {
                        let sx = x + dx;
                        if sx >= 0 && sx < w {
                            drow[sx as usize] += srow[x as usize];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Float>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let plane = g.plane();
    let rows = g.rows();
    let mut out = vec![T::zero(); g.n * g.f * plane];
    out.par_chunks_mut(g.f * plane)
        .zip(input.par_chunks(g.c * plane))
        .for_each_init(
            || vec![T::zero(); rows * plane],
            |cols, (o, x)| {
                im2col(g, x, cols);
                for (fi, chunk) in o.chunks_mut(plane).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = bias[fi]);
                }
                T::gemm(
                    g.f,
                    rows,
                    plane,
                    T::one(),
                    (weight, rows as isize, 1),
                    (cols, plane as isize, 1),
                    T::one(),
                    (o, plane as isize, 1),
                );
            },
        );
    out
}

/// Per-sample (weight, bias, input) gradients before reduction.
type SampleGrads<T> = (Vec<T>, Vec<T>, Option<Vec<T>>);

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) fn conv2d_backward<T: Float>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    need_input: bool,
) -> ConvGrads<T> {
    let plane = g.plane();
    let rows = g.rows();
    let per_sample: Vec<SampleGrads<T>> = (0..g.n)
        .into_par_iter()
        .map(|b| {
            let x = &input[b * g.c * plane..(b + 1) * g.c * plane];
            let dy = &grad_out[b * g.f * plane..(b + 1) * g.f * plane];
            let mut cols = vec![T::zero(); rows * plane];
            im2col(g, x, &mut cols);
            let mut dw = vec![T::zero(); g.f * rows];
            // dW = dY · colsᵀ
            T::gemm(
                g.f,
                plane,
                rows,
                T::one(),
                (dy, plane as isize, 1),
                (&cols, 1, plane as isize),
                T::zero(),
                (&mut dw, rows as isize, 1),
            );
            let db: Vec<T> = dy.chunks(plane).map(|c| c.iter().copied().sum()).collect();
            let dx = need_input.then(|| {
                // dCols = Wᵀ · dY, reusing the column buffer
                T::gemm(
                    rows,
                    g.f,
                    plane,
                    T::one(),
                    (weight, 1, rows as isize),
                    (dy, plane as isize, 1),
                    T::zero(),
                    (&mut cols, plane as isize, 1),
                );
                let mut dx = vec![T::zero(); g.c * plane];
                col2im(g, &cols, &mut dx);
                dx
            });
            (dw, db, dx)
        })
        .collect();

    let mut weight_grad = vec![T::zero(); g.f * rows];
    let mut bias_grad = vec![T::zero(); g.f];
    let mut input_grad = need_input.then(|| Vec::with_capacity(input.len()));
    for (dw, db, dx) in per_sample {
        weight_grad.iter_mut().zip(&dw).for_each(|(a, &b)| *a += b);
        bias_grad.iter_mut().zip(&db).for_each(|(a, &b)| *a += b);
        if let (Some(acc), Some(dx)) = (input_grad.as_mut(), dx) {
            acc.extend_from_slice(&dx);
        }
    }
    ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    }
}

/// 2×2/stride-2 max pooling. Returns the pooled values and, per output, the
/// flat input index of the first maximum in row-major window order.
pub(crate) fn max_pool_forward<T: Float>(
    dims: [usize; 4],
    input: &[T],
) -> (Vec<T>, Vec<usize>) {
    let [n, c, h, w] = dims;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample2x_forward<T: Float>(dims: [usize; 4], input: &[T]) -> Vec<T> {
    let [n, c, h, w] = dims;
    let ow = 2 * w;
    let mut out = vec![T::zero(); n * c * 4 * h * w];
    for plane in 0..n * c {
        let src = &input[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for y in 0..2 * h {
            for x in 0..ow {
                dst[y * ow + x] = src[(y / 2) * w + x / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Float>(dims: [usize; 4], grad_out: &[T]) -> Vec<T> {
    let [n, c, h, w] = dims;
    let ow = 2 * w;
    let mut grad = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let src = &grad_out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        let dst = &mut grad[plane * h * w..(plane + 1) * h * w];
        for y in 0..2 * h {
            for x in 0..ow {
                dst[(y / 2) * w + x / 2] += src[y * ow + x];
            }
        }
    }
    grad
}
