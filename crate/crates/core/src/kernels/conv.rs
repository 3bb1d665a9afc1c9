//! Dense and transposed 2D convolution via im2col + GEMM.

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Geometry of one convolution, expressed in forward-convolution terms.
///
/// For a transposed convolution the roles flip: `h_in × w_in` is the
/// transposed op's *output* and `h_out × w_out` its input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub dil: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        c_in: usize,
        h_in: usize,
        w_in: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
        dil: usize,
    ) -> Option<Self> {
        if stride == 0 || dil == 0 || kh == 0 || kw == 0 {
            return None;
        }
        let span_h = dil * (kh - 1) + 1;
        let span_w = dil * (kw - 1) + 1;
        if h_in + 2 * pad < span_h || w_in + 2 * pad < span_w {
            return None;
        }
        Some(ConvGeom {
            c_in,
            h_in,
            w_in,
            kh,
            kw,
            stride,
            pad,
            dil,
            h_out: (h_in + 2 * pad - span_h) / stride + 1,
            w_out: (w_in + 2 * pad - span_w) / stride + 1,
        })
    }

    /// Rows of the column matrix.
    pub fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.h_out * self.w_out
    }

    pub fn in_plane(&self) -> usize {
        self.h_in * self.w_in
    }
}

/// Unfold one batch item (`c_in × h_in × w_in`) into a
/// `patch × out_plane` column matrix. Out-of-image taps read zero.
pub fn im2col<S: Real>(x: &[S], g: &ConvGeom, cols: &mut [S]) {
    let op = g.out_plane();
    debug_assert_eq!(x.len(), g.c_in * g.in_plane());
    debug_assert_eq!(cols.len(), g.patch() * op);
    for c in 0..g.c_in {
        let plane = &x[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * op..(row + 1) * op];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki * g.dil) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h_in as isize {
                        line.fill(S::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w_in..(iy as usize + 1) * g.w_in];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj * g.dil) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w_in as isize {
                            S::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image buffer.
pub fn col2im<S: Real>(cols: &[S], g: &ConvGeom, x: &mut [S]) {
    let op = g.out_plane();
    debug_assert_eq!(x.len(), g.c_in * g.in_plane());
    for c in 0..g.c_in {
        let plane = &mut x[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * op..(row + 1) * op];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki * g.dil) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h_in as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w_in..(iy as usize + 1) * g.w_in];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kj * g.dil) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w_in as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Padding, stride and dilation of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvArgs {
    pub stride: usize,
    pub pad: usize,
    pub dil: usize,
}

impl ConvArgs {
    pub const fn new(stride: usize, pad: usize, dil: usize) -> Self {
        ConvArgs { stride, pad, dil }
    }

    /// Stride 1 with "same" padding for a square kernel of side `k`.
    pub const fn same(k: usize, dil: usize) -> Self {
        ConvArgs {
            stride: 1,
            pad: dil * (k - 1) / 2,
            dil,
        }
    }
}

pub(crate) fn check_bias<S: Real>(
    op: &'static str,
    bias: Option<&Tensor<S>>,
    channels: usize,
) -> Result<()> {
    if let Some(b) = bias {
        let want = Shape::new(1, channels, 1, 1);
        if b.shape() != want {
            return Err(Error::shapes(op, want, b.shape()));
        }
    }
    Ok(())
}

/// Geometry of `conv2d(x, w)`; weight is `(c_out, c_in, kh, kw)`.
pub fn conv_geom(xs: Shape, ws: Shape, args: ConvArgs) -> Result<ConvGeom> {
    if ws.c != xs.c {
        return Err(Error::shapes("conv2d", xs, ws));
    }
    ConvGeom::new(
        xs.c,
        xs.h,
        xs.w,
        ws.h,
        ws.w,
        args.stride,
        args.pad,
        args.dil,
    )
    .ok_or_else(|| Error::shapes("conv2d", xs, ws))
}

pub fn conv2d_forward<S: Real>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    args: ConvArgs,
) -> Result<Tensor<S>> {
    let xs = x.shape();
    let ws = w.shape();
    let g = conv_geom(xs, ws, args)?;
    check_bias("conv2d", bias, ws.n)?;
    let c_out = ws.n;
    let op = g.out_plane();
    let mut out = Tensor::zeros(Shape::new(xs.n, c_out, g.h_out, g.w_out));
    let mut cols = vec![S::zero(); g.patch() * op];
    let item = c_out * op;
    for n in 0..xs.n {
        im2col(x.item(n), &g, &mut cols);
        let dst = &mut out.data_mut()[n * item..(n + 1) * item];
        S::gemm(
            c_out,
            g.patch(),
            op,
            w.data(),
            false,
            &cols,
            false,
            S::zero(),
            dst,
        );
        if let Some(b) = bias {
            add_channel_bias(dst, b.data(), op);
        }
    }
    Ok(out)
}

pub(crate) fn add_channel_bias<S: Real>(dst: &mut [S], bias: &[S], plane: usize) {
    for (c, &bv) in bias.iter().enumerate() {
        for v in &mut dst[c * plane..(c + 1) * plane] {
            *v = *v + bv;
        }
    }
}

/// Per-channel sum of `dout`, shaped like a bias.
pub(crate) fn bias_grad<S: Real>(dout: &Tensor<S>) -> Tensor<S> {
    let s = dout.shape();
    let mut acc = vec![0.0f64; s.c];
    for n in 0..s.n {
        for (c, a) in acc.iter_mut().enumerate() {
            *a += dout.plane(n, c).iter().map(|v| v.f64()).sum::<f64>();
        }
    }
    Tensor::from_vec(
        Shape::new(1, s.c, 1, 1),
        acc.into_iter().map(S::of).collect(),
    )
    .expect("bias shape")
}

#[derive(Debug)]
pub struct ConvGrads<S> {
    pub input: Option<Tensor<S>>,
    pub weight: Option<Tensor<S>>,
    pub bias: Option<Tensor<S>>,
}

/// Which gradients a backward pass must produce.
#[derive(Clone, Copy, Debug)]
pub struct Needs {
    pub input: bool,
    pub weight: bool,
    pub bias: bool,
}

pub fn conv2d_backward<S: Real>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    dout: &Tensor<S>,
    args: ConvArgs,
    needs: Needs,
) -> Result<ConvGrads<S>> {
    let xs = x.shape();
    let ws = w.shape();
    let g = conv_geom(xs, ws, args)?;
    let c_out = ws.n;
    let op = g.out_plane();
    let mut dx = needs.input.then(|| Tensor::zeros(xs));
    let mut dw = needs.weight.then(|| Tensor::zeros(ws));
    let mut cols = vec![S::zero(); g.patch() * op];
    let item = c_out * op;
    for n in 0..xs.n {
        let dy = &dout.data()[n * item..(n + 1) * item];
        if let Some(dw) = dw.as_mut() {
            im2col(x.item(n), &g, &mut cols);
            S::gemm(
                c_out,
                op,
                g.patch(),
                dy,
                false,
                &cols,
                true,
                S::one(),
                dw.data_mut(),
            );
        }
        if let Some(dx) = dx.as_mut() {
            S::gemm(
                g.patch(),
                c_out,
                op,
                w.data(),
                true,
                dy,
                false,
                S::zero(),
                &mut cols,
            );
            let len = xs.item();
            col2im(&cols, &g, &mut dx.data_mut()[n * len..(n + 1) * len]);
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: needs.bias.then(|| bias_grad(dout)),
    })
}

/// Geometry of a transposed convolution whose output is `stride ×` its input.
/// Weight is `(c_in, c_out, kh, kw)`.
pub fn deconv_geom(xs: Shape, ws: Shape, stride: usize, pad: usize) -> Result<ConvGeom> {
    if ws.n != xs.c {
        return Err(Error::shapes("deconv2d", xs, ws));
    }
    let (ho, wo) = (xs.h * stride, xs.w * stride);
    let g = ConvGeom::new(ws.c, ho, wo, ws.h, ws.w, stride, pad, 1)
        .ok_or_else(|| Error::shapes("deconv2d", xs, ws))?;
    if g.h_out != xs.h || g.w_out != xs.w {
        return Err(Error::dims(
            "deconv2d",
            format!("input {xs} with stride {stride}, padding {pad}"),
            format!("kernel {ws} cannot produce a {ho}x{wo} output"),
        ));
    }
    Ok(g)
}

pub fn deconv2d_forward<S: Real>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    let xs = x.shape();
    let ws = w.shape();
    let g = deconv_geom(xs, ws, stride, pad)?;
    check_bias("deconv2d", bias, ws.c)?;
    let c_out = ws.c;
    let mut out = Tensor::zeros(Shape::new(xs.n, c_out, g.h_in, g.w_in));
    let mut cols = vec![S::zero(); g.patch() * g.out_plane()];
    let item = c_out * g.in_plane();
    for n in 0..xs.n {
        // cols (c_out·k·k × hw_in) = Wᵀ (c_out·k·k × c_in) · x (c_in × hw_in)
        S::gemm(
            g.patch(),
            xs.c,
            g.out_plane(),
            w.data(),
            true,
            x.item(n),
            false,
            S::zero(),
            &mut cols,
        );
        let dst = &mut out.data_mut()[n * item..(n + 1) * item];
        col2im(&cols, &g, dst);
        if let Some(b) = bias {
            add_channel_bias(dst, b.data(), g.in_plane());
        }
    }
    Ok(out)
}

pub fn deconv2d_backward<S: Real>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    dout: &Tensor<S>,
    stride: usize,
    pad: usize,
    needs: Needs,
) -> Result<ConvGrads<S>> {
    let xs = x.shape();
    let ws = w.shape();
    let g = deconv_geom(xs, ws, stride, pad)?;
    let mut dx = needs.input.then(|| Tensor::zeros(xs));
    let mut dw = needs.weight.then(|| Tensor::zeros(ws));
    let mut cols = vec![S::zero(); g.patch() * g.out_plane()];
    let item = dout.shape().item();
    let hw = g.out_plane();
    for n in 0..xs.n {
        im2col(&dout.data()[n * item..(n + 1) * item], &g, &mut cols);
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx.data_mut()[n * xs.item()..(n + 1) * xs.item()];
            S::gemm(
                xs.c,
                g.patch(),
                hw,
                w.data(),
                false,
                &cols,
                false,
                S::zero(),
                dst,
            );
        }
        if let Some(dw) = dw.as_mut() {
            S::gemm(
                xs.c,
                hw,
                g.patch(),
                x.item(n),
                false,
                &cols,
                true,
                S::one(),
                dw.data_mut(),
            );
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: needs.bias.then(|| bias_grad(dout)),
    })
}
