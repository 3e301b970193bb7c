//! 2-D convolution and transposed convolution via banded im2col + GEMM.
//!
//! Output rows are processed in bands so the column buffer stays bounded at
//! full image resolution. Weight gradients are reduced over frames in a fixed
//! sequential order, which keeps them bitwise reproducible for any pool size.

use rayon::prelude::*;

use super::gemm::{gemm, MatMut, MatRef};
use super::{Scalar, Shape4, Tensor4};
use crate::error::{Error, Result};

/// Input gradient (when requested), weight gradient and bias gradient.
type RawConvGrads<S> = (Option<Tensor4<S>>, Tensor4<S>, Vec<S>);

/// Upper bound on elements held in one column buffer.
const COL_BUDGET: usize = 1 << 22;

/// Weights and bias of a convolution-type layer.
///
/// Plain convolutions store weights as `(out, in, k, k)`. Transposed
/// convolutions store `(in, out, k, k)`, so a deconvolution built from the
/// same tensor as a convolution is that convolution's exact adjoint.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<S = f32> {
    pub weight: Tensor4<S>,
    pub bias: Vec<S>,
    pub stride: usize,
    pub padding: usize,
    transposed: bool,
}

impl<S: Scalar> ConvParams<S> {
    pub fn conv(weight: Tensor4<S>, bias: Vec<S>, stride: usize, padding: usize) -> Result<Self> {
        Self::checked(weight, bias, stride, padding, false)
    }

    pub fn deconv(weight: Tensor4<S>, bias: Vec<S>, stride: usize, padding: usize) -> Result<Self> {
        Self::checked(weight, bias, stride, padding, true)
    }

    fn checked(weight: Tensor4<S>, bias: Vec<S>, stride: usize, padding: usize, transposed: bool) -> Result<Self> {
        let ws = weight.shape();
        if ws.height != ws.width {
            return Err(Error::precondition("ConvParams", format!("kernel must be square, got {ws}")));
        }
        if stride == 0 {
            return Err(Error::precondition("ConvParams", "stride must be >= 1"));
        }
        let p = ConvParams {
            weight,
            bias,
            stride,
            padding,
            transposed,
        };
        if p.bias.len() != p.out_channels() {
            return Err(Error::shape("ConvParams bias", p.out_channels(), p.bias.len()));
        }
        Ok(p)
    }

    pub fn is_transposed(&self) -> bool {
        self.transposed
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().height
    }

    pub fn in_channels(&self) -> usize {
        let s = self.weight.shape();
        if self.transposed {
            s.batch
        } else {
            s.channels
        }
    }

    pub fn out_channels(&self) -> usize {
        let s = self.weight.shape();
        if self.transposed {
            s.channels
        } else {
            s.batch
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Output shape for an input of `input` shape.
    pub fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        let op = if self.transposed { "deconv2d" } else { "conv2d" };
        if input.channels != self.in_channels() {
            return Err(Error::shape(op, input, self.weight.shape()));
        }
        let k = self.kernel();
        let (oh, ow) = if self.transposed {
            let oh = ((input.height - 1) * self.stride + k).checked_sub(2 * self.padding);
            let ow = ((input.width - 1) * self.stride + k).checked_sub(2 * self.padding);
            (oh.unwrap_or(0), ow.unwrap_or(0))
        } else {
            let span_h = (input.height + 2 * self.padding).checked_sub(k);
            let span_w = (input.width + 2 * self.padding).checked_sub(k);
            match (span_h, span_w) {
                (Some(h), Some(w)) => (h / self.stride + 1, w / self.stride + 1),
                _ => (0, 0),
            }
        };
        if oh == 0 || ow == 0 {
            return Err(Error::shape(op, input, "non-positive output size"));
        }
        Ok(Shape4::new(input.batch, self.out_channels(), oh, ow))
    }

    fn expect(&self, transposed: bool, op: &'static str) -> Result<()> {
        if self.transposed != transposed {
            return Err(Error::precondition(
                op,
                if transposed {
                    "expected transposed-convolution parameters"
                } else {
                    "expected convolution parameters"
                },
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads<S = f32> {
    pub input: Tensor4<S>,
    pub weight: Tensor4<S>,
    pub bias: Vec<S>,
}

/// Sliding-window geometry: `image` is the padded side, `grid` the window positions.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    img_h: usize,
    img_w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    grid_h: usize,
    grid_w: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    fn band_rows(&self) -> usize {
        (COL_BUDGET / (self.col_rows() * self.grid_w).max(1)).clamp(1, self.grid_h)
    }

    fn bands(&self) -> impl Iterator<Item = (usize, usize)> {
        let band = self.band_rows();
        let h = self.grid_h;
        (0..h).step_by(band).map(move |r0| (r0, band.min(h - r0)))
    }

    /// Range of grid columns whose tap `kj` lands inside the image (stride 1 only).
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kj).min(self.grid_w);
        let hi = (self.img_w + self.pad).saturating_sub(kj).min(self.grid_w);
        (lo, hi.max(lo))
    }

    fn image_row(&self, gy: usize, ki: usize) -> Option<usize> {
        let iy = (gy * self.stride + ki) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.img_h).then_some(iy as usize)
    }
}

fn im2col<S: Scalar>(img: &[S], g: &Geometry, row0: usize, rows: usize, col: &mut [S]) {
    let ncols = rows * g.grid_w;
    let plane = g.img_h * g.img_w;
    let k = g.k;
    for c in 0..g.channels {
        let src_plane = &img[c * plane..(c + 1) * plane];
        for ki in 0..k {
            for kj in 0..k {
                let r = (c * k + ki) * k + kj;
                let dst = &mut col[r * ncols..(r + 1) * ncols];
                for (rel, drow) in dst.chunks_mut(g.grid_w).enumerate() {
                    let Some(iy) = g.image_row(row0 + rel, ki) else {
                        drow.fill(S::zero());
                        continue;
                    };
                    let src = &src_plane[iy * g.img_w..(iy + 1) * g.img_w];
                    if g.stride == 1 {
                        let (lo, hi) = g.valid_cols(kj);
                        drow[..lo].fill(S::zero());
                        let s0 = lo + kj - g.pad;
                        drow[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        drow[hi..].fill(S::zero());
                    } else {
                        for (gx, d) in drow.iter_mut().enumerate() {
                            let ix = (gx * g.stride + kj) as isize - g.pad as isize;
                            *d = if ix >= 0 && (ix as usize) < g.img_w {
                                src[ix as usize]
                            } else {
                                S::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<S: Scalar>(col: &[S], g: &Geometry, row0: usize, rows: usize, img: &mut [S]) {
    let ncols = rows * g.grid_w;
    let plane = g.img_h * g.img_w;
    let k = g.k;
    for c in 0..g.channels {
        let dst_plane = &mut img[c * plane..(c + 1) * plane];
        for ki in 0..k {
            for kj in 0..k {
                let r = (c * k + ki) * k + kj;
                let src = &col[r * ncols..(r + 1) * ncols];
                for (rel, srow) in src.chunks(g.grid_w).enumerate() {
                    let Some(iy) = g.image_row(row0 + rel, ki) else {
                        continue;
                    };
                    let drow = &mut dst_plane[iy * g.img_w..(iy + 1) * g.img_w];
                    if g.stride == 1 {
                        let (lo, hi) = g.valid_cols(kj);
                        let d0 = lo + kj - g.pad;
                        for (d, &s) in drow[d0..d0 + (hi - lo)].iter_mut().zip(&srow[lo..hi]) {
                            *d += s;
                        }
                    } else {
                        for (gx, &s) in srow.iter().enumerate() {
                            let ix = (gx * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.img_w {
                                drow[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_geometry<S: Scalar>(input: Shape4, out: Shape4, p: &ConvParams<S>) -> Geometry {
    Geometry {
        channels: input.channels,
        img_h: input.height,
        img_w: input.width,
        k: p.kernel(),
        stride: p.stride,
        pad: p.padding,
        grid_h: out.height,
        grid_w: out.width,
    }
}

/// For a transposed convolution the padded image is the output and the grid is the input.
fn deconv_geometry<S: Scalar>(input: Shape4, out: Shape4, p: &ConvParams<S>) -> Geometry {
    Geometry {
        channels: out.channels,
        img_h: out.height,
        img_w: out.width,
        k: p.kernel(),
        stride: p.stride,
        pad: p.padding,
        grid_h: input.height,
        grid_w: input.width,
    }
}

fn add_bias<S: Scalar>(frame: &mut [S], bias: &[S], plane: usize) {
    for (chunk, &b) in frame.chunks_mut(plane).zip(bias) {
        if b != S::zero() {
            for v in chunk {
                *v += b;
            }
        }
    }
}

fn bias_grad<S: Scalar>(grad_out: &Tensor4<S>) -> Vec<S> {
    let s = grad_out.shape();
    let mut gb = vec![S::zero(); s.channels];
    for n in 0..s.batch {
        for (g, plane) in gb.iter_mut().zip(grad_out.frame(n).chunks(s.plane_len())) {
            *g += plane.iter().copied().sum::<S>();
        }
    }
    gb
}

/// Cross-correlation with zero padding.
pub fn conv2d_forward<S: Scalar>(input: &Tensor4<S>, params: &ConvParams<S>) -> Result<Tensor4<S>> {
    params.expect(false, "conv2d_forward")?;
    let in_shape = input.shape();
    let out_shape = params.output_shape(in_shape)?;
    let g = conv_geometry(in_shape, out_shape, params);
    let (cout, ckk) = (out_shape.channels, g.col_rows());
    let plane = out_shape.plane_len();
    let w = params.weight.data();

    let mut out = Tensor4::zeros_unchecked(out_shape);
    out.data_mut()
        .par_chunks_mut(out_shape.frame_len())
        .zip(input.data().par_chunks(in_shape.frame_len()))
        .for_each(|(o, x)| {
            let mut col = vec![S::zero(); ckk * g.band_rows() * g.grid_w];
            for (r0, rows) in g.bands() {
                let ncols = rows * g.grid_w;
                let col = &mut col[..ckk * ncols];
                im2col(x, &g, r0, rows, col);
                gemm(
                    S::one(),
                    MatRef::rows(w, cout, ckk),
                    MatRef::rows(col, ckk, ncols),
                    S::zero(),
                    MatMut {
                        data: &mut o[r0 * g.grid_w..],
                        rows: cout,
                        cols: ncols,
                        rs: plane,
                        cs: 1,
                    },
                );
            }
            add_bias(o, &params.bias, plane);
        });
    Ok(out)
}

pub fn conv2d_backward<S: Scalar>(
    grad_out: &Tensor4<S>,
    saved_input: &Tensor4<S>,
    params: &ConvParams<S>,
) -> Result<ConvGrads<S>> {
    let (input, weight, bias) = conv2d_backward_opts(grad_out, saved_input, params, true)?;
    Ok(ConvGrads {
        input: input.expect("input gradient requested"),
        weight,
        bias,
    })
}

/// Convolution backward; the input gradient is skipped when `need_input` is false.
pub(crate) fn conv2d_backward_opts<S: Scalar>(
    grad_out: &Tensor4<S>,
    saved_input: &Tensor4<S>,
    params: &ConvParams<S>,
    need_input: bool,
) -> Result<RawConvGrads<S>> {
    params.expect(false, "conv2d_backward")?;
    let in_shape = saved_input.shape();
    let out_shape = params.output_shape(in_shape)?;
    if grad_out.shape() != out_shape {
        return Err(Error::shape("conv2d_backward", grad_out.shape(), out_shape));
    }
    let g = conv_geometry(in_shape, out_shape, params);
    let (cout, ckk) = (out_shape.channels, g.col_rows());
    let plane = out_shape.plane_len();
    let w = params.weight.data();

    let mut grad_w = Tensor4::zeros_unchecked(params.weight.shape());
    let mut col = vec![S::zero(); ckk * g.band_rows() * g.grid_w];
    for n in 0..in_shape.batch {
        let x = saved_input.frame(n);
        let go = grad_out.frame(n);
        for (r0, rows) in g.bands() {
            let ncols = rows * g.grid_w;
            let col = &mut col[..ckk * ncols];
            im2col(x, &g, r0, rows, col);
            gemm(
                S::one(),
                MatRef {
                    data: &go[r0 * g.grid_w..],
                    rows: cout,
                    cols: ncols,
                    rs: plane,
                    cs: 1,
                },
                MatRef::transposed(col, ckk, ncols),
                S::one(),
                MatMut::rows(grad_w.data_mut(), cout, ckk),
            );
        }
    }

    let grad_in = need_input.then(|| {
        let mut gi = Tensor4::zeros_unchecked(in_shape);
        gi.data_mut()
            .par_chunks_mut(in_shape.frame_len())
            .zip(grad_out.data().par_chunks(out_shape.frame_len()))
            .for_each(|(gx, go)| {
                let mut gcol = vec![S::zero(); ckk * g.band_rows() * g.grid_w];
                for (r0, rows) in g.bands() {
                    let ncols = rows * g.grid_w;
                    let gcol = &mut gcol[..ckk * ncols];
                    gemm(
                        S::one(),
                        MatRef::transposed(w, cout, ckk),
                        MatRef {
                            data: &go[r0 * g.grid_w..],
                            rows: cout,
                            cols: ncols,
                            rs: plane,
                            cs: 1,
                        },
                        S::zero(),
                        MatMut::rows(gcol, ckk, ncols),
                    );
                    col2im_add(gcol, &g, r0, rows, gx);
                }
            });
        gi
    });

    Ok((grad_in, grad_w, bias_grad(grad_out)))
}

/// Transposed convolution: the adjoint of `conv2d_forward` with the same weights, plus bias.
pub fn deconv2d_forward<S: Scalar>(input: &Tensor4<S>, params: &ConvParams<S>) -> Result<Tensor4<S>> {
    params.expect(true, "deconv2d_forward")?;
    let in_shape = input.shape();
    let out_shape = params.output_shape(in_shape)?;
    let g = deconv_geometry(in_shape, out_shape, params);
    let (cin, ckk) = (in_shape.channels, g.col_rows());
    let in_plane = in_shape.plane_len();
    let w = params.weight.data();

    let mut out = Tensor4::zeros_unchecked(out_shape);
    out.data_mut()
        .par_chunks_mut(out_shape.frame_len())
        .zip(input.data().par_chunks(in_shape.frame_len()))
        .for_each(|(o, x)| {
            let mut col = vec![S::zero(); ckk * g.band_rows() * g.grid_w];
            for (r0, rows) in g.bands() {
                let ncols = rows * g.grid_w;
                let col = &mut col[..ckk * ncols];
                gemm(
                    S::one(),
                    MatRef::transposed(w, cin, ckk),
                    MatRef {
                        data: &x[r0 * g.grid_w..],
                        rows: cin,
                        cols: ncols,
                        rs: in_plane,
                        cs: 1,
                    },
                    S::zero(),
                    MatMut::rows(col, ckk, ncols),
                );
                col2im_add(col, &g, r0, rows, o);
            }
            add_bias(o, &params.bias, out_shape.plane_len());
        });
    Ok(out)
}

pub fn deconv2d_backward<S: Scalar>(
    grad_out: &Tensor4<S>,
    saved_input: &Tensor4<S>,
    params: &ConvParams<S>,
) -> Result<ConvGrads<S>> {
    let (input, weight, bias) = deconv2d_backward_opts(grad_out, saved_input, params, true)?;
    Ok(ConvGrads {
        input: input.expect("input gradient requested"),
        weight,
        bias,
    })
}

pub(crate) fn deconv2d_backward_opts<S: Scalar>(
    grad_out: &Tensor4<S>,
    saved_input: &Tensor4<S>,
    params: &ConvParams<S>,
    need_input: bool,
) -> Result<RawConvGrads<S>> {
    params.expect(true, "deconv2d_backward")?;
    let in_shape = saved_input.shape();
    let out_shape = params.output_shape(in_shape)?;
    if grad_out.shape() != out_shape {
        return Err(Error::shape("deconv2d_backward", grad_out.shape(), out_shape));
    }
    let g = deconv_geometry(in_shape, out_shape, params);
    let (cin, ckk) = (in_shape.channels, g.col_rows());
    let in_plane = in_shape.plane_len();
    let w = params.weight.data();

    let mut grad_w = Tensor4::zeros_unchecked(params.weight.shape());
    let mut gcol = vec![S::zero(); ckk * g.band_rows() * g.grid_w];
    for n in 0..in_shape.batch {
        let x = saved_input.frame(n);
        let go = grad_out.frame(n);
        for (r0, rows) in g.bands() {
            let ncols = rows * g.grid_w;
            let gcol = &mut gcol[..ckk * ncols];
            im2col(go, &g, r0, rows, gcol);
            gemm(
                S::one(),
                MatRef {
                    data: &x[r0 * g.grid_w..],
                    rows: cin,
                    cols: ncols,
                    rs: in_plane,
                    cs: 1,
                },
                MatRef::transposed(gcol, ckk, ncols),
                S::one(),
                MatMut::rows(grad_w.data_mut(), cin, ckk),
            );
        }
    }

    let grad_in = need_input.then(|| {
        let mut gi = Tensor4::zeros_unchecked(in_shape);
        gi.data_mut()
            .par_chunks_mut(in_shape.frame_len())
            .zip(grad_out.data().par_chunks(out_shape.frame_len()))
            .for_each(|(gx, go)| {
                let mut gcol = vec![S::zero(); ckk * g.band_rows() * g.grid_w];
                for (r0, rows) in g.bands() {
                    let ncols = rows * g.grid_w;
                    let gcol = &mut gcol[..ckk * ncols];
                    im2col(go, &g, r0, rows, gcol);
                    gemm(
                        S::one(),
                        MatRef::rows(w, cin, ckk),
                        MatRef::rows(gcol, ckk, ncols),
                        S::zero(),
                        MatMut {
                            data: &mut gx[r0 * g.grid_w..],
                            rows: cin,
                            cols: ncols,
                            rs: in_plane,
                            cs: 1,
                        },
                    );
                }
            });
        gi
    });

    Ok((grad_in, grad_w, bias_grad(grad_out)))
}
