//! Dilated 2-D convolution.
//!
//! The layer computes `(F *_l k)(p) = sum_{s + l t = p} F(s) k(t)`. Kernels are
//! stored in cross-correlation order, i.e. tap `t` of that sum is the stored
//! tap `K - 1 - t`; since kernels are learned the reflection is immaterial,
//! and the forward kernel can run as an im2col + GEMM.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Op, Real, Shape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn uniform(p: usize) -> Self {
        Padding {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        ConvGeometry {
            stride: 1,
            dilation: 1,
            padding: Padding::default(),
        }
    }
}

impl ConvGeometry {
    /// Stride 1 with zero padding that preserves spatial extent for an odd
    /// kernel of size `kernel`.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        let dilation = dilation.max(1);
        ConvGeometry {
            stride: 1,
            dilation,
            padding: Padding::uniform(dilation * (kernel.saturating_sub(1)) / 2),
        }
    }

    fn extent(
        input: usize,
        pad: usize,
        kernel: usize,
        dilation: usize,
        stride: usize,
    ) -> Result<usize> {
        let footprint = dilation * (kernel - 1) + 1;
        let padded = input + pad;
        if padded < footprint {
            return Err(Error::shape(format!(
                "dilated kernel footprint {footprint} exceeds padded input extent {padded}"
            )));
        }
        Ok((padded - footprint) / stride + 1)
    }

    /// Output (height, width) for an input extent and kernel size.
    pub fn output_size(
        &self,
        in_h: usize,
        in_w: usize,
        kh: usize,
        kw: usize,
    ) -> Result<(usize, usize)> {
        if self.stride == 0 || self.dilation == 0 {
            return Err(Error::config("stride and dilation must be positive"));
        }
        if kh == 0 || kw == 0 {
            return Err(Error::shape("empty kernel"));
        }
        let p = self.padding;
        Ok((
            Self::extent(in_h, p.top + p.bottom, kh, self.dilation, self.stride)?,
            Self::extent(in_w, p.left + p.right, kw, self.dilation, self.stride)?,
        ))
    }
}

/// Kernel `(out_ch, in_ch, kh, kw)`, optional bias `(1, out_ch, 1, 1)`.
#[derive(Clone, Debug)]
pub struct ConvSpec<T> {
    pub kernel: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub geometry: ConvGeometry,
}

/// Graph-free forward convolution.
pub fn conv2d<T: Real>(input: &Tensor<T>, spec: &ConvSpec<T>) -> Result<Tensor<T>> {
    validate(
        input.shape(),
        spec.kernel.shape(),
        spec.bias.as_ref().map(|b| b.shape()),
    )?;
    conv2d_forward(input, &spec.kernel, spec.bias.as_ref(), &spec.geometry)
}

fn validate(x: Shape, w: Shape, b: Option<Shape>) -> Result<()> {
    if x.c() != w.c() {
        return Err(Error::shape(format!(
            "conv input has {} channels, kernel expects {} ({:?})",
            x.c(),
            w.c(),
            w
        )));
    }
    if let Some(b) = b {
        if b.numel() != w.n() {
            return Err(Error::shape(format!(
                "bias {:?} for {} output channels",
                b,
                w.n()
            )));
        }
    }
    Ok(())
}

struct Layout {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl Layout {
    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Input index along one axis for output `o` and tap `k`, or `None` in the
    /// zero padding.
    #[inline]
    fn src(
        o: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        pad: usize,
        extent: usize,
    ) -> Option<usize> {
        let pos = (o * stride + k * dilation) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// True when the column matrix is the input plane itself.
fn is_pointwise(l: &Layout, g: &ConvGeometry) -> bool {
    l.kh == 1 && l.kw == 1 && g.stride == 1 && g.padding == Padding::default()
}

fn im2col<T: Real>(x: &[T], l: &Layout, g: &ConvGeometry, col: &mut [T]) {
    let cols = l.cols();
    let p = g.padding;
    for ci in 0..l.cin {
        let plane = &x[ci * l.h * l.w..(ci + 1) * l.h * l.w];
        for ky in 0..l.kh {
            for kx in 0..l.kw {
                let row = (ci * l.kh + ky) * l.kw + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..l.oh {
                    let out = &mut dst[oy * l.ow..(oy + 1) * l.ow];
                    let Some(iy) = Layout::src(oy, ky, g.stride, g.dilation, p.top, l.h) else {
                        out.fill(T::zero());
                        continue;
                    };
                    let src = &plane[iy * l.w..(iy + 1) * l.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        *o = match Layout::src(ox, kx, g.stride, g.dilation, p.left, l.w) {
                            Some(ix) => src[ix],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], l: &Layout, g: &ConvGeometry, x: &mut [T]) {
    let cols = l.cols();
    let p = g.padding;
    for ci in 0..l.cin {
        let plane = &mut x[ci * l.h * l.w..(ci + 1) * l.h * l.w];
        for ky in 0..l.kh {
            for kx in 0..l.kw {
                let row = (ci * l.kh + ky) * l.kw + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..l.oh {
                    let Some(iy) = Layout::src(oy, ky, g.stride, g.dilation, p.top, l.h) else {
                        continue;
                    };
                    let dst = &mut plane[iy * l.w..(iy + 1) * l.w];
                    for (ox, v) in src[oy * l.ow..(oy + 1) * l.ow].iter().enumerate() {
                        if let Some(ix) = Layout::src(ox, kx, g.stride, g.dilation, p.left, l.w) {
                            dst[ix] += *v;
                        }
                    }
                }
            }
        }
    }
}

fn layout(x: Shape, w: Shape, g: &ConvGeometry) -> Result<Layout> {
    let (oh, ow) = g.output_size(x.h(), x.w(), w.h(), w.w())?;
    Ok(Layout {
        cin: x.c(),
        h: x.h(),
        w: x.w(),
        kh: w.h(),
        kw: w.w(),
        oh,
        ow,
    })
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    g: &ConvGeometry,
) -> Result<Tensor<T>> {
    let l = layout(x.shape(), w.shape(), g)?;
    let (batch, cout) = (x.shape().n(), w.shape().n());
    let (rows, cols) = (l.rows(), l.cols());
    let mut out = Tensor::zeros(Shape::new(batch, cout, l.oh, l.ow));
    let pointwise = is_pointwise(&l, g);
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); rows * cols]
    };
    let in_per = l.cin * l.h * l.w;
    for n in 0..batch {
        let xs = &x.data()[n * in_per..(n + 1) * in_per];
        let cbuf: &[T] = if pointwise {
            xs
        } else {
            im2col(xs, &l, g, &mut col);
            &col
        };
        let dst = &mut out.data_mut()[n * cout * cols..(n + 1) * cout * cols];
        T::gemm(
            cout,
            rows,
            cols,
            T::one(),
            w.data(),
            false,
            cbuf,
            false,
            T::zero(),
            dst,
        );
        if let Some(b) = b {
            for (co, chunk) in dst.chunks_mut(cols).enumerate() {
                let bv = b.data()[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    g: &ConvGeometry,
    want_input: bool,
    want_kernel: bool,
    want_bias: bool,
) -> ConvGrads<T> {
    let l = layout(x.shape(), w.shape(), g).expect("geometry validated in forward");
    let (batch, cout) = (x.shape().n(), w.shape().n());
    let (rows, cols) = (l.rows(), l.cols());
    let in_per = l.cin * l.h * l.w;
    let pointwise = is_pointwise(&l, g);

    let mut gx = want_input.then(|| Tensor::zeros(x.shape()));
    let mut gw = want_kernel.then(|| Tensor::zeros(w.shape()));
    let mut gb = want_bias.then(|| Tensor::zeros(Shape::new(1, cout, 1, 1)));
    let mut col = vec![T::zero(); if pointwise { 0 } else { rows * cols }];
    let mut dcol = vec![
        T::zero();
        if want_input && !pointwise {
            rows * cols
        } else {
            0
        }
    ];

    for n in 0..batch {
        let go = &gout.data()[n * cout * cols..(n + 1) * cout * cols];
        if let Some(gb) = gb.as_mut() {
            for (co, chunk) in go.chunks(cols.max(1)).enumerate().take(cout) {
                let s: f64 = chunk.iter().map(|v| v.f64()).sum();
                gb.data_mut()[co] += T::of(s);
            }
        }
        let xs = &x.data()[n * in_per..(n + 1) * in_per];
        if let Some(gw) = gw.as_mut() {
            let cbuf: &[T] = if pointwise {
                xs
            } else {
                im2col(xs, &l, g, &mut col);
                &col
            };
            // dW += dY * col^T
            T::gemm(
                cout,
                cols,
                rows,
                T::one(),
                go,
                false,
                cbuf,
                true,
                T::one(),
                gw.data_mut(),
            );
        }
        if let Some(gx) = gx.as_mut() {
            let dst = &mut gx.data_mut()[n * in_per..(n + 1) * in_per];
            if pointwise {
                T::gemm(
                    rows,
                    cout,
                    cols,
                    T::one(),
                    w.data(),
                    true,
                    go,
                    false,
                    T::one(),
                    dst,
                );
            } else {
                T::gemm(
                    rows,
                    cout,
                    cols,
                    T::one(),
                    w.data(),
                    true,
                    go,
                    false,
                    T::zero(),
                    &mut dcol,
                );
                col2im(&dcol, &l, g, dst);
            }
        }
    }
    ConvGrads {
        input: gx,
        kernel: gw,
        bias: gb,
    }
}

impl<T: Real> Graph<T> {
    /// Records a dilated convolution. `w` is `(out_ch, in_ch, kh, kw)`, `b`
    /// is `(1, out_ch, 1, 1)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        validate(self.shape(x), self.shape(w), b.map(|b| self.shape(b)))?;
        let out = conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            &geom,
        )?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, &inputs))
    }
}
