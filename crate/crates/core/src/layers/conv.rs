//! 2-D convolution over `[batch, height, width, channels]` inputs.
//!
//! The training path lowers the convolution to a matrix product: each output
//! pixel's `k x k x d` receptive field becomes one row of a patch matrix
//! (im2col), so forward, filter-gradient and input-gradient are all GEMMs.
//! [`conv2d_direct`] is the plain nested-loop definition kept as a reference.

use crate::error::{Error, Result};
use crate::linalg::{gemm, Layout};
use crate::tensor::Tensor;

use super::ParamMut;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero-extend so that `out = ceil(in / stride)`; the extra row/column
    /// goes to the bottom/right when the total padding is odd.
    Same,
    /// No padding: `out = floor((in - k) / stride) + 1`.
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
    pad_top: usize,
    pad_left: usize,
}

impl Geometry {
    fn new(h: usize, w: usize, c: usize, k: usize, stride: usize, padding: Padding) -> Result<Self> {
        let axis = |n: usize| -> Result<(usize, usize)> {
            match padding {
                Padding::Same => {
                    let out = n.div_ceil(stride);
                    let total = ((out - 1) * stride + k).saturating_sub(n);
                    Ok((out, total / 2))
                }
                Padding::Valid => {
                    if k > n {
                        return Err(Error::InvalidArgument(format!(
                            "conv window {k} larger than input extent {n}"
                        )));
                    }
                    Ok(((n - k) / stride + 1, 0))
                }
            }
        };
        let (out_h, pad_top) = axis(h)?;
        let (out_w, pad_left) = axis(w)?;
        Ok(Geometry {
            h,
            w,
            c,
            k,
            stride,
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }

    fn patch_len(&self) -> usize {
        self.k * self.k * self.c
    }

    /// Input row/col for output position `o` and kernel offset `kk`, if it
    /// falls inside the unpadded input.
    #[inline]
    fn source(o: usize, kk: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        (o * stride + kk).checked_sub(pad).filter(|&i| i < extent)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2D {
    pub(super) filters: Tensor,
    pub(super) bias: Tensor,
    stride: usize,
    padding: Padding,
    filter_grad: Tensor,
    bias_grad: Tensor,
    cache: Option<ConvCache>,
    pub frozen: bool,
}

#[derive(Debug, Clone)]
struct ConvCache {
    geom: Geometry,
    batch: usize,
    cols: Vec<f64>,
}

impl Conv2D {
    /// `filters` is `[n_filters, k, k, depth]`, `bias` is `[n_filters]`.
    pub fn new(filters: Tensor, bias: Tensor, stride: usize, padding: Padding) -> Result<Self> {
        let s = filters.shape();
        if s.len() != 4 || s[1] != s[2] {
            return Err(Error::InvalidArgument(format!(
                "conv filters must be [n, k, k, d], got {s:?}"
            )));
        }
        if bias.shape() != [s[0]] {
            return Err(Error::shape("Conv2D::new", s, bias.shape()));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv stride must be positive".into()));
        }
        Ok(Conv2D {
            filter_grad: Tensor::zeros(filters.shape()),
            bias_grad: Tensor::zeros(bias.shape()),
            filters,
            bias,
            stride,
            padding,
            cache: None,
            frozen: false,
        })
    }

    pub fn n_filters(&self) -> usize {
        self.filters.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.filters.shape()[1]
    }

    pub fn depth(&self) -> usize {
        self.filters.shape()[3]
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> Padding {
        self.padding
    }

    pub fn filters(&self) -> &Tensor {
        &self.filters
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn filter_grad(&self) -> &Tensor {
        &self.filter_grad
    }

    pub fn bias_grad(&self) -> &Tensor {
        &self.bias_grad
    }

    fn geometry(&self, input: &[usize]) -> Result<Geometry> {
        let [h, w, c] = input[..] else {
            return Err(Error::InvalidArgument(format!(
                "conv expects [height, width, channels] per sample, got {input:?}"
            )));
        };
        if c != self.depth() {
            return Err(Error::shape("conv2d channels", input, self.filters.shape()));
        }
        Geometry::new(h, w, c, self.kernel(), self.stride, self.padding)
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let g = self.geometry(input)?;
        Ok(vec![g.out_h, g.out_w, self.n_filters()])
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (geom, batch) = self.check_input(x)?;
        let cols = im2col(x.data(), batch, &geom);
        let out = self.apply(&cols, batch, &geom)?;
        self.cache = Some(ConvCache { geom, batch, cols });
        Ok(out)
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let (geom, batch) = self.check_input(x)?;
        let cols = im2col(x.data(), batch, &geom);
        self.apply(&cols, batch, &geom)
    }

    fn check_input(&self, x: &Tensor) -> Result<(Geometry, usize)> {
        if x.rank() != 4 {
            return Err(Error::InvalidArgument(format!(
                "conv expects [batch, height, width, channels], got {:?}",
                x.shape()
            )));
        }
        Ok((self.geometry(&x.shape()[1..])?, x.batch()))
    }

    fn apply(&self, cols: &[f64], batch: usize, g: &Geometry) -> Result<Tensor> {
        let rows = batch * g.out_h * g.out_w;
        let kl = g.patch_len();
        let nf = self.n_filters();
        let mut out = vec![0.0; rows * nf];
        for row in out.chunks_exact_mut(nf) {
            row.copy_from_slice(self.bias.data());
        }
        // out[rows, nf] += cols[rows, kl] . filters^T
        gemm(
            rows,
            kl,
            nf,
            cols,
            Layout::row_major(kl),
            self.filters.data(),
            Layout::transposed(kl),
            1.0,
            &mut out,
        );
        Tensor::new(&[batch, g.out_h, g.out_w, nf], out)
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        Ok(self.backward_impl(upstream, true)?.expect("input grad requested"))
    }

    pub(super) fn backward_impl(
        &mut self,
        upstream: &Tensor,
        want_input_grad: bool,
    ) -> Result<Option<Tensor>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("conv backward called before forward".into()))?;
        let g = cache.geom;
        let nf = self.n_filters();
        let expect = [cache.batch, g.out_h, g.out_w, nf];
        if upstream.shape() != expect {
            return Err(Error::shape("conv2d_backward", upstream.shape(), &expect));
        }
        let rows = cache.batch * g.out_h * g.out_w;
        let kl = g.patch_len();

        if !self.frozen {
            // dF[nf, kl] = g^T[nf, rows] . cols[rows, kl]
            gemm(
                nf,
                rows,
                kl,
                upstream.data(),
                Layout::transposed(nf),
                &cache.cols,
                Layout::row_major(kl),
                0.0,
                self.filter_grad.data_mut(),
            );
            let bg = self.bias_grad.data_mut();
            bg.fill(0.0);
            for row in upstream.data().chunks_exact(nf) {
                for (b, v) in bg.iter_mut().zip(row) {
                    *b += v;
                }
            }
        }

        if !want_input_grad {
            return Ok(None);
        }
        // dcols[rows, kl] = g[rows, nf] . F[nf, kl]
        let mut dcols = vec![0.0; rows * kl];
        gemm(
            rows,
            nf,
            kl,
            upstream.data(),
            Layout::row_major(nf),
            self.filters.data(),
            Layout::row_major(kl),
            0.0,
            &mut dcols,
        );
        let dx = col2im(&dcols, cache.batch, &g);
        Tensor::new(&[cache.batch, g.h, g.w, g.c], dx).map(Some)
    }

    pub(super) fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        vec![
            ParamMut {
                role: "filters",
                value: &mut self.filters,
                grad: &self.filter_grad,
                decay: true,
            },
            ParamMut {
                role: "bias",
                value: &mut self.bias,
                grad: &self.bias_grad,
                decay: false,
            },
        ]
    }
}

/// Patch matrix `[batch * out_h * out_w, k * k * c]`, patch entries ordered
/// `(ky, kx, channel)` to match the filter layout.
fn im2col(x: &[f64], batch: usize, g: &Geometry) -> Vec<f64> {
    let kl = g.patch_len();
    let mut cols = vec![0.0; batch * g.out_h * g.out_w * kl];
    let mut row = 0;
    for b in 0..batch {
        let img = &x[b * g.h * g.w * g.c..(b + 1) * g.h * g.w * g.c];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let dst = &mut cols[row * kl..(row + 1) * kl];
                for ky in 0..g.k {
                    let Some(iy) = Geometry::source(oy, ky, g.stride, g.pad_top, g.h) else {
                        continue;
                    };
                    for kx in 0..g.k {
                        let Some(ix) = Geometry::source(ox, kx, g.stride, g.pad_left, g.w) else {
                            continue;
                        };
                        let src = (iy * g.w + ix) * g.c;
                        let at = (ky * g.k + kx) * g.c;
                        dst[at..at + g.c].copy_from_slice(&img[src..src + g.c]);
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Scatter-adds patch gradients back onto the input grid.
fn col2im(dcols: &[f64], batch: usize, g: &Geometry) -> Vec<f64> {
    let kl = g.patch_len();
    let mut dx = vec![0.0; batch * g.h * g.w * g.c];
    let mut row = 0;
    for b in 0..batch {
        let img = &mut dx[b * g.h * g.w * g.c..(b + 1) * g.h * g.w * g.c];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let src = &dcols[row * kl..(row + 1) * kl];
                for ky in 0..g.k {
                    let Some(iy) = Geometry::source(oy, ky, g.stride, g.pad_top, g.h) else {
                        continue;
                    };
                    for kx in 0..g.k {
                        let Some(ix) = Geometry::source(ox, kx, g.stride, g.pad_left, g.w) else {
                            continue;
                        };
                        let dst = (iy * g.w + ix) * g.c;
                        let at = (ky * g.k + kx) * g.c;
                        for (d, s) in img[dst..dst + g.c].iter_mut().zip(&src[at..at + g.c]) {
                            *d += s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    dx
}

/// Direct nested-loop convolution with the same semantics as [`Conv2D`].
pub fn conv2d_direct(
    x: &Tensor,
    filters: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let layer = Conv2D::new(filters.clone(), bias.clone(), stride, padding)?;
    let (g, batch) = layer.check_input(x)?;
    let nf = layer.n_filters();
    let (f, xd) = (filters.data(), x.data());
    let mut out = vec![0.0; batch * g.out_h * g.out_w * nf];
    for b in 0..batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                for i in 0..nf {
                    let mut acc = bias.data()[i];
                    for ky in 0..g.k {
                        for kx in 0..g.k {
                            // Zero padding: out-of-range taps contribute nothing.
                            let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                            let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                            if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                continue;
                            }
                            let (iy, ix) = (iy as usize, ix as usize);
                            for c in 0..g.c {
                                acc += xd[((b * g.h + iy) * g.w + ix) * g.c + c]
                                    * f[((i * g.k + ky) * g.k + kx) * g.c + c];
                            }
                        }
                    }
                    out[((b * g.out_h + oy) * g.out_w + ox) * nf + i] = acc;
                }
            }
        }
    }
    Tensor::new(&[batch, g.out_h, g.out_w, nf], out)
}
