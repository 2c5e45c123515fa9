//! Layer kernels: 3×3/stride-1/pad-1 convolution, ReLU and 2×2/stride-2 pooling,
//! each with its input-gradient counterpart.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Upper bound on im2col buffer elements per band.
const BAND_ELEMS: usize = 1 << 20;

fn check_conv_shapes<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, bias: &[T]) -> Result<()> {
    let [k_out, k_in, kh, kw] = kernel.shape();
    if kh != 3 || kw != 3 {
        return Err(Error::shape(format!("expected a 3x3 kernel, got {kh}x{kw}")));
    }
    if k_in != input.channels() {
        return Err(Error::shape(format!(
            "input has {} channels, kernel expects {k_in}",
            input.channels()
        )));
    }
    if bias.len() != k_out {
        return Err(Error::shape(format!(
            "bias has {} entries, kernel has {k_out} output channels",
            bias.len()
        )));
    }
    Ok(())
}

/// Reference convolution by direct summation. Slow; used to validate
/// [`conv2d_forward`].
pub fn conv2d_direct<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    check_conv_shapes(input, kernel, bias)?;
    let [n, c_in, h, w] = input.shape();
    let c_out = kernel.shape()[0];
    let mut out = Tensor::zeros([n, c_out, h, w]);
    for b in 0..n {
        for co in 0..c_out {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias[co];
                    for ci in 0..c_in {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (iy, ix) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += kernel.at(co, ci, ky, kx) * input.at(b, ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    let idx = out.index(b, co, y, x);
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// 3×3 convolution with zero padding 1 and stride 1.
///
/// Rows are split into bands; each band is unfolded (im2col) and multiplied
/// against the kernel matrix. Bands run in parallel, and every output element
/// is produced by exactly one gemm call, so results do not depend on the
/// thread count.
pub fn conv2d_forward<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    check_conv_shapes(input, kernel, bias)?;
    let [n, c_in, h, w] = input.shape();
    let c_out = kernel.shape()[0];
    let depth = c_in * 9;
    let band_rows = (BAND_ELEMS / (depth * w)).clamp(1, h);
    let bands: Vec<(usize, usize)> = (0..h)
        .step_by(band_rows)
        .map(|y0| (y0, (y0 + band_rows).min(h)))
        .collect();

    let mut out = Tensor::zeros([n, c_out, h, w]);
    let plane = h * w;
    for b in 0..n {
        let src = &input.data()[b * c_in * plane..(b + 1) * c_in * plane];
        let tiles: Vec<Vec<T>> = bands
            .par_iter()
            .map(|&(y0, y1)| {
                let cols = (y1 - y0) * w;
                let mut col = vec![T::zero(); depth * cols];
                im2col_band(src, c_in, h, w, y0, y1, &mut col);
                let mut tile = vec![T::zero(); c_out * cols];
                T::gemm(c_out, depth, cols, kernel.data(), &col, &mut tile);
                for (co, row) in tile.chunks_exact_mut(cols).enumerate() {
                    row.iter_mut().for_each(|v| *v += bias[co]);
                }
                tile
            })
            .collect();
        let dst = &mut out.data_mut()[b * c_out * plane..(b + 1) * c_out * plane];
        for (&(y0, y1), tile) in bands.iter().zip(&tiles) {
            let cols = (y1 - y0) * w;
            for co in 0..c_out {
                dst[co * plane + y0 * w..co * plane + y1 * w]
                    .copy_from_slice(&tile[co * cols..(co + 1) * cols]);
            }
        }
    }
    Ok(out)
}

fn im2col_band<T: Real>(src: &[T], c_in: usize, h: usize, w: usize, y0: usize, y1: usize, col: &mut [T]) {
    let cols = (y1 - y0) * w;
    for ci in 0..c_in {
        let chan = &src[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 9) + ky * 3 + kx) * cols..][..cols];
                for y in y0..y1 {
                    let iy = y as isize + ky as isize - 1;
                    let dst = &mut row[(y - y0) * w..(y - y0 + 1) * w];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src_row = &chan[iy as usize * w..(iy as usize + 1) * w];
                    // ix = x + kx - 1
                    match kx {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&src_row[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src_row),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src_row[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Spatially flipped, channel-transposed copy of a `(out, in, 3, 3)` kernel.
pub fn transpose_flip_kernel<T: Real>(kernel: &Tensor<T>) -> Tensor<T> {
    let [c_out, c_in, _, _] = kernel.shape();
    let mut flipped = Tensor::zeros([c_in, c_out, 3, 3]);
    for co in 0..c_out {
        for ci in 0..c_in {
            for ky in 0..3 {
                for kx in 0..3 {
                    let idx = flipped.index(ci, co, 2 - ky, 2 - kx);
                    flipped.data_mut()[idx] = kernel.at(co, ci, ky, kx);
                }
            }
        }
    }
    flipped
}

/// Gradient of a conv layer with respect to its input. `kernel` is the
/// forward kernel; the result is the full correlation of `grad_out` with the
/// flipped, transposed kernel.
pub fn conv2d_backward_input<T: Real>(grad_out: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.channels() != kernel.shape()[0] {
        return Err(Error::shape(format!(
            "gradient has {} channels, kernel produces {}",
            grad_out.channels(),
            kernel.shape()[0]
        )));
    }
    conv2d_backward_input_with(grad_out, &transpose_flip_kernel(kernel))
}

/// Same as [`conv2d_backward_input`] with a kernel already passed through
/// [`transpose_flip_kernel`].
pub(crate) fn conv2d_backward_input_with<T: Real>(grad_out: &Tensor<T>, flipped: &Tensor<T>) -> Result<Tensor<T>> {
    let zero_bias = vec![T::zero(); flipped.shape()[0]];
    conv2d_forward(grad_out, flipped, &zero_bias)
}

pub fn relu_forward<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| v.max(T::zero()))
}

pub(crate) fn relu_in_place<T: Real>(t: &mut Tensor<T>) {
    t.data_mut().iter_mut().for_each(|v| {
        if !(*v > T::zero()) {
            *v = T::zero();
        }
    });
}

/// Passes gradient where `input > 0`; zero elsewhere, including at exactly 0.
/// The ReLU output may be supplied as `input` since it has the same positive
/// support.
pub fn relu_backward<T: Real>(grad_out: &Tensor<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.check_same_shape(input)?;
    let mut grad = grad_out.clone();
    for (g, &v) in grad.data_mut().iter_mut().zip(input.data()) {
        if !(v > T::zero()) {
            *g = T::zero();
        }
    }
    Ok(grad)
}

/// Winning position (0..4, row-major within the 2×2 window) per pooled element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArgmaxMap {
    input_shape: [usize; 4],
    positions: Vec<u8>,
}

impl ArgmaxMap {
    pub fn input_shape(&self) -> [usize; 4] {
        self.input_shape
    }

    pub fn positions(&self) -> &[u8] {
        &self.positions
    }
}

fn check_poolable<T: Real>(input: &Tensor<T>) -> Result<()> {
    if !input.height().is_multiple_of(2) || !input.width().is_multiple_of(2) {
        return Err(Error::shape(format!(
            "2x2 pooling needs even spatial extents, got {}x{}",
            input.height(),
            input.width()
        )));
    }
    Ok(())
}

/// 2×2/stride-2 max pooling. Ties resolve to the first position in row-major order.
pub fn maxpool_forward<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, ArgmaxMap)> {
    check_poolable(input)?;
    let [n, c, h, w] = input.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut positions = vec![0u8; n * c * oh * ow];
    out.data_mut()
        .par_chunks_mut(oh * ow)
        .zip(positions.par_chunks_mut(oh * ow))
        .zip(input.data().par_chunks(h * w))
        .for_each(|((dst, pos), src)| {
            for y in 0..oh {
                for x in 0..ow {
                    let base = 2 * y * w + 2 * x;
                    let window = [src[base], src[base + 1], src[base + w], src[base + w + 1]];
                    let mut best = 0;
                    for k in 1..4 {
                        if window[k] > window[best] {
                            best = k;
                        }
                    }
                    dst[y * ow + x] = window[best];
                    pos[y * ow + x] = best as u8;
                }
            }
        });
    Ok((
        out,
        ArgmaxMap {
            input_shape: input.shape(),
            positions,
        },
    ))
}

pub fn maxpool_backward<T: Real>(grad_out: &Tensor<T>, argmax: &ArgmaxMap) -> Result<Tensor<T>> {
    let [n, c, h, w] = argmax.input_shape;
    if grad_out.shape() != [n, c, h / 2, w / 2] {
        return Err(Error::shape(format!(
            "pool gradient shape {:?} does not match pooled shape {:?}",
            grad_out.shape(),
            [n, c, h / 2, w / 2]
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut grad_in = Tensor::zeros(argmax.input_shape);
    grad_in
        .data_mut()
        .par_chunks_mut(h * w)
        .zip(grad_out.data().par_chunks(oh * ow))
        .zip(argmax.positions.par_chunks(oh * ow))
        .for_each(|((dst, g), pos)| {
            for y in 0..oh {
                for x in 0..ow {
                    let p = pos[y * ow + x] as usize;
                    dst[(2 * y + p / 2) * w + 2 * x + p % 2] = g[y * ow + x];
                }
            }
        });
    Ok(grad_in)
}

/// 2×2/stride-2 average pooling.
pub fn avgpool_forward<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    check_poolable(input)?;
    let [n, c, h, w] = input.shape();
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    out.data_mut()
        .par_chunks_mut(oh * ow)
        .zip(input.data().par_chunks(h * w))
        .for_each(|(dst, src)| {
            for y in 0..oh {
                for x in 0..ow {
                    let base = 2 * y * w + 2 * x;
                    dst[y * ow + x] = (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]) * quarter;
                }
            }
        });
    Ok(out)
}

pub fn avgpool_backward<T: Real>(grad_out: &Tensor<T>, input_shape: [usize; 4]) -> Result<Tensor<T>> {
    let [n, c, h, w] = input_shape;
    if h % 2 != 0 || w % 2 != 0 || grad_out.shape() != [n, c, h / 2, w / 2] {
        return Err(Error::shape(format!(
            "pool gradient shape {:?} does not match input shape {input_shape:?}",
            grad_out.shape()
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut grad_in = Tensor::zeros(input_shape);
    grad_in
        .data_mut()
        .par_chunks_mut(h * w)
        .zip(grad_out.data().par_chunks(oh * ow))
        .for_each(|(dst, g)| {
            for y in 0..h {
                for x in 0..w {
                    dst[y * w + x] = g[(y / 2) * ow + x / 2] * quarter;
                }
            }
        });
    Ok(grad_in)
}
