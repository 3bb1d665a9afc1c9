//! Bilinear sampling and modulated deformable convolution.
//!
//! Offsets are laid out per tap as `(dy, dx)` channel pairs: channel `2k`
//! holds the vertical displacement of tap `k` and `2k + 1` the horizontal
//! one. Taps are numbered row-major over the kernel window. One offset set is
//! shared by every input channel.

use crate::error::{Error, Result};
use crate::kernels::conv::{add_channel_bias, bias_grad, check_bias};
use crate::tensor::{Real, Shape, Tensor};

/// The four integer neighbours of a fractional location and their weights.
///
/// Neighbours outside the plane get weight zero, which gives the zero
/// padding border rule.
#[derive(Clone, Copy, Debug)]
pub struct Corners<S> {
    pub idx: [usize; 4],
    pub valid: [bool; 4],
    pub wt: [S; 4],
    pub ly: S,
    pub lx: S,
}

impl<S: Real> Corners<S> {
    /// Corners in the order `(y0, x0)`, `(y0, x0+1)`, `(y0+1, x0)`, `(y0+1, x0+1)`.
    #[inline]
    pub fn new(h: usize, w: usize, y: S, x: S) -> Option<Self> {
        let one = S::one();
        // Entirely outside: every neighbour is padding.
        if !(y > -one && x > -one && y < S::of(h as f64) && x < S::of(w as f64)) {
            return None;
        }
        let yf = y.floor();
        let xf = x.floor();
        let ly = y - yf;
        let lx = x - xf;
        let y0 = yf.to_isize().unwrap_or(-2);
        let x0 = xf.to_isize().unwrap_or(-2);
        let mut c = Corners {
            idx: [0; 4],
            valid: [false; 4],
            wt: [S::zero(); 4],
            ly,
            lx,
        };
        let pts = [(y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)];
        let wts = [
            (one - ly) * (one - lx),
            (one - ly) * lx,
            ly * (one - lx),
            ly * lx,
        ];
        for (i, &(py, px)) in pts.iter().enumerate() {
            if py >= 0 && px >= 0 && (py as usize) < h && (px as usize) < w {
                c.idx[i] = py as usize * w + px as usize;
                c.valid[i] = true;
                c.wt[i] = wts[i];
            }
        }
        Some(c)
    }

    #[inline]
    fn gather(&self, plane: &[S]) -> [S; 4] {
        let mut v = [S::zero(); 4];
        for i in 0..4 {
            if self.valid[i] {
                v[i] = plane[self.idx[i]];
            }
        }
        v
    }

    #[inline]
    pub fn sample(&self, plane: &[S]) -> S {
        let mut acc = S::zero();
        for i in 0..4 {
            if self.valid[i] {
                acc = acc + self.wt[i] * plane[self.idx[i]];
            }
        }
        acc
    }

    /// Derivatives of the sampled value with respect to `(y, x)`.
    #[inline]
    pub fn coord_grad(&self, plane: &[S]) -> (S, S) {
        let one = S::one();
        let [v00, v01, v10, v11] = self.gather(plane);
        let dy = (one - self.lx) * (v10 - v00) + self.lx * (v11 - v01);
        let dx = (one - self.ly) * (v01 - v00) + self.ly * (v11 - v10);
        (dy, dx)
    }

    /// Scatter `g` into the neighbours with the interpolation weights.
    #[inline]
    pub fn scatter(&self, plane: &mut [S], g: S) {
        for i in 0..4 {
            if self.valid[i] {
                plane[self.idx[i]] = plane[self.idx[i]] + self.wt[i] * g;
            }
        }
    }
}

/// Bilinear interpolation of channel `c` of batch item `n` at `(y, x)`.
pub fn bilinear_sample<S: Real>(input: &Tensor<S>, y: S, x: S, n: usize, c: usize) -> S {
    let s = input.shape();
    Corners::new(s.h, s.w, y, x)
        .map(|k| k.sample(input.plane(n, c)))
        .unwrap_or_else(S::zero)
}

/// Value of [`bilinear_sample`] together with its `(d/dy, d/dx)`.
pub fn bilinear_sample_grad<S: Real>(
    input: &Tensor<S>,
    y: S,
    x: S,
    n: usize,
    c: usize,
) -> (S, S, S) {
    let s = input.shape();
    match Corners::new(s.h, s.w, y, x) {
        Some(k) => {
            let plane = input.plane(n, c);
            let (dy, dx) = k.coord_grad(plane);
            (k.sample(plane), dy, dx)
        }
        None => (S::zero(), S::zero(), S::zero()),
    }
}

#[derive(Clone, Copy, Debug)]
struct DeformGeom {
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    dil: usize,
    pad: usize,
}

impl DeformGeom {
    fn taps(&self) -> usize {
        self.kh * self.kw
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }

    fn patch(&self) -> usize {
        self.c_in * self.taps()
    }
}

fn deform_geom<S: Real>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    offsets: Option<&Tensor<S>>,
    modulation: &Tensor<S>,
    dilation: usize,
) -> Result<DeformGeom> {
    let (xs, ws) = (x.shape(), w.shape());
    if ws.c != xs.c || ws.h % 2 == 0 || ws.w % 2 == 0 || ws.h != ws.w {
        return Err(Error::shapes("deform_conv2d", xs, ws));
    }
    if dilation == 0 {
        return Err(Error::contract(
            "deform_conv2d",
            "dilation must be positive",
        ));
    }
    let taps = ws.h * ws.w;
    let want_m = Shape::new(xs.n, taps, xs.h, xs.w);
    if modulation.shape() != want_m {
        return Err(Error::shapes(
            "deform_conv2d modulation",
            want_m,
            modulation.shape(),
        ));
    }
    if let Some(o) = offsets {
        let want_o = Shape::new(xs.n, 2 * taps, xs.h, xs.w);
        if o.shape() != want_o {
            return Err(Error::shapes("deform_conv2d offsets", want_o, o.shape()));
        }
    }
    Ok(DeformGeom {
        c_in: xs.c,
        c_out: ws.n,
        h: xs.h,
        w: xs.w,
        kh: ws.h,
        kw: ws.w,
        dil: dilation,
        pad: dilation * (ws.h - 1) / 2,
    })
}

/// Sampling corners for every (tap, pixel) of batch item `n`.
fn sample_grid<S: Real>(
    g: &DeformGeom,
    offsets: Option<&Tensor<S>>,
    n: usize,
) -> Vec<Option<Corners<S>>> {
    let plane = g.plane();
    let mut out = Vec::with_capacity(g.taps() * plane);
    for ki in 0..g.kh {
        for kj in 0..g.kw {
            let k = ki * g.kw + kj;
            let (oy_map, ox_map) = match offsets {
                Some(o) => (Some(o.plane(n, 2 * k)), Some(o.plane(n, 2 * k + 1))),
                None => (None, None),
            };
            for py in 0..g.h {
                for px in 0..g.w {
                    let p = py * g.w + px;
                    let mut y = S::of((py + ki * g.dil) as f64 - g.pad as f64);
                    let mut x = S::of((px + kj * g.dil) as f64 - g.pad as f64);
                    if let (Some(dy), Some(dx)) = (oy_map, ox_map) {
                        y = y + dy[p];
                        x = x + dx[p];
                    }
                    out.push(Corners::new(g.h, g.w, y, x));
                }
            }
        }
    }
    out
}

/// Modulated, deformed column matrix `(c_in · taps) × plane` for item `n`.
fn deform_cols<S: Real>(
    x: &Tensor<S>,
    g: &DeformGeom,
    grid: &[Option<Corners<S>>],
    modulation: &Tensor<S>,
    n: usize,
    cols: &mut [S],
) {
    let plane = g.plane();
    for c in 0..g.c_in {
        let src = x.plane(n, c);
        for k in 0..g.taps() {
            let m = modulation.plane(n, k);
            let row = &mut cols[(c * g.taps() + k) * plane..(c * g.taps() + k + 1) * plane];
            let corners = &grid[k * plane..(k + 1) * plane];
            for p in 0..plane {
                row[p] = match &corners[p] {
                    Some(cr) => m[p] * cr.sample(src),
                    None => S::zero(),
                };
            }
        }
    }
}

/// `out(p) = Σ_k w_k · m_k(p) · x(p + p_k + Δp_k(p)) + b`.
///
/// Stride 1, padding `dilation · (k − 1) / 2`; `offsets = None` samples the
/// regular dilated grid (modulation still applies).
pub fn deform_conv2d_forward<S: Real>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    offsets: Option<&Tensor<S>>,
    modulation: &Tensor<S>,
    dilation: usize,
) -> Result<Tensor<S>> {
    let g = deform_geom(x, w, offsets, modulation, dilation)?;
    check_bias("deform_conv2d", bias, g.c_out)?;
    let n_items = x.shape().n;
    let plane = g.plane();
    let mut out = Tensor::zeros(Shape::new(n_items, g.c_out, g.h, g.w));
    let mut cols = vec![S::zero(); g.patch() * plane];
    let item = g.c_out * plane;
    for n in 0..n_items {
        let grid = sample_grid(&g, offsets, n);
        deform_cols(x, &g, &grid, modulation, n, &mut cols);
        let dst = &mut out.data_mut()[n * item..(n + 1) * item];
        S::gemm(
            g.c_out,
            g.patch(),
            plane,
            w.data(),
            false,
            &cols,
            false,
            S::zero(),
            dst,
        );
        if let Some(b) = bias {
            add_channel_bias(dst, b.data(), plane);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct DeformNeeds {
    pub input: bool,
    pub weight: bool,
    pub bias: bool,
    pub offsets: bool,
    pub modulation: bool,
}

#[derive(Debug, Default)]
pub struct DeformGrads<S> {
    pub input: Option<Tensor<S>>,
    pub weight: Option<Tensor<S>>,
    pub bias: Option<Tensor<S>>,
    pub offsets: Option<Tensor<S>>,
    pub modulation: Option<Tensor<S>>,
}

#[allow(clippy::too_many_arguments)]
pub fn deform_conv2d_backward<S: Real>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    offsets: Option<&Tensor<S>>,
    modulation: &Tensor<S>,
    dilation: usize,
    dout: &Tensor<S>,
    needs: DeformNeeds,
) -> Result<DeformGrads<S>> {
    let g = deform_geom(x, w, offsets, modulation, dilation)?;
    let xs = x.shape();
    let plane = g.plane();
    let taps = g.taps();
    let mut dx = needs.input.then(|| Tensor::zeros(xs));
    let mut dw = needs.weight.then(|| Tensor::zeros(w.shape()));
    let mut doff = (needs.offsets && offsets.is_some())
        .then(|| Tensor::zeros(Shape::new(xs.n, 2 * taps, g.h, g.w)));
    let mut dmod = needs.modulation.then(|| Tensor::zeros(modulation.shape()));
    let sample_side = dx.is_some() || doff.is_some() || dmod.is_some();

    let mut cols = vec![S::zero(); g.patch() * plane];
    let item = g.c_out * plane;
    for n in 0..xs.n {
        let dy = &dout.data()[n * item..(n + 1) * item];
        let grid = sample_grid(&g, offsets, n);
        if let Some(dw) = dw.as_mut() {
            deform_cols(x, &g, &grid, modulation, n, &mut cols);
            S::gemm(
                g.c_out,
                plane,
                g.patch(),
                dy,
                false,
                &cols,
                true,
                S::one(),
                dw.data_mut(),
            );
        }
        if !sample_side {
            continue;
        }
        // dcols = Wᵀ · dout
        S::gemm(
            g.patch(),
            g.c_out,
            plane,
            w.data(),
            true,
            dy,
            false,
            S::zero(),
            &mut cols,
        );
        for k in 0..taps {
            let m = modulation.plane(n, k);
            let corners = &grid[k * plane..(k + 1) * plane];
            for c in 0..g.c_in {
                let src = x.plane(n, c);
                let dcol = &cols[(c * taps + k) * plane..(c * taps + k + 1) * plane];
                for p in 0..plane {
                    let Some(cr) = &corners[p] else { continue };
                    let gcol = dcol[p];
                    if let Some(dm) = dmod.as_mut() {
                        let i = dm.index(n, k, p / g.w, p % g.w);
                        dm.data_mut()[i] = dm.data()[i] + gcol * cr.sample(src);
                    }
                    let gv = gcol * m[p];
                    if let Some(dx) = dx.as_mut() {
                        let start = dx.index(n, c, 0, 0);
                        cr.scatter(&mut dx.data_mut()[start..start + plane], gv);
                    }
                    if let Some(doff) = doff.as_mut() {
                        let (gy, gx) = cr.coord_grad(src);
                        let iy = doff.index(n, 2 * k, p / g.w, p % g.w);
                        let ix = doff.index(n, 2 * k + 1, p / g.w, p % g.w);
                        let d = doff.data_mut();
                        d[iy] = d[iy] + gv * gy;
                        d[ix] = d[ix] + gv * gx;
                    }
                }
            }
        }
    }
    Ok(DeformGrads {
        input: dx,
        weight: dw,
        bias: needs.bias.then(|| bias_grad(dout)),
        offsets: doff,
        modulation: dmod,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::conv::{conv2d_forward, ConvArgs};

    fn pseudo(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut s = seed;
        Tensor::from_fn(shape, |_, _, _, _| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn integer_locations_are_exact() {
        let t = pseudo(Shape::new(1, 2, 5, 6), 1).cast::<f32>();
        for y in 0..5 {
            for x in 0..6 {
                assert_eq!(
                    bilinear_sample(&t, y as f32, x as f32, 0, 1),
                    t.at(0, 1, y, x)
                );
            }
        }
    }

    #[test]
    fn ramp_interpolates_linearly() {
        let t = Tensor::<f64>::from_fn(Shape::new(1, 1, 3, 4), |_, _, _, x| x as f64);
        assert_eq!(bilinear_sample(&t, 1.0, 1.5, 0, 0), 1.5);
        assert_eq!(bilinear_sample(&t, 0.25, 2.75, 0, 0), 2.75);
    }

    #[test]
    fn far_outside_reads_zero() {
        let t = Tensor::<f64>::full(Shape::new(1, 1, 3, 3), 1.0);
        assert_eq!(bilinear_sample(&t, -5.0, 1.0, 0, 0), 0.0);
        assert_eq!(bilinear_sample(&t, 1.0, 1e9, 0, 0), 0.0);
        assert_eq!(bilinear_sample(&t, f64::NAN, 1.0, 0, 0), 0.0);
        // half a pixel past the border blends with zero padding
        assert_eq!(bilinear_sample(&t, -0.5, 1.0, 0, 0), 0.5);
    }

    #[test]
    fn zero_offsets_unit_modulation_is_plain_conv() {
        for dil in [1, 2, 4] {
            let x = pseudo(Shape::new(2, 3, 9, 9), dil as u64);
            let w = pseudo(Shape::new(4, 3, 3, 3), 10 + dil as u64);
            let m = Tensor::full(Shape::new(2, 9, 9, 9), 1.0);
            let off = Tensor::zeros(Shape::new(2, 18, 9, 9));
            let a = deform_conv2d_forward(&x, &w, None, Some(&off), &m, dil).unwrap();
            let b = conv2d_forward(&x, &w, None, ConvArgs::same(3, dil)).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        }
    }

    #[test]
    fn unit_column_offset_shifts_left() {
        // Delta kernel, offset (0, +1): out(y, x) = in(y, x + 1), zero past the edge.
        let x = pseudo(Shape::new(1, 1, 5, 5), 3);
        let mut w = Tensor::zeros(Shape::new(1, 1, 3, 3));
        w.data_mut()[4] = 1.0;
        let m = Tensor::full(Shape::new(1, 9, 5, 5), 1.0);
        let off = Tensor::from_fn(
            Shape::new(1, 18, 5, 5),
            |_, c, _, _| {
                if c % 2 == 1 {
                    1.0
                } else {
                    0.0
                }
            },
        );
        let y = deform_conv2d_forward(&x, &w, None, Some(&off), &m, 1).unwrap();
        let want = Tensor::from_fn(x.shape(), |_, _, r, c| {
            if c + 1 < 5 {
                x.at(0, 0, r, c + 1)
            } else {
                0.0
            }
        });
        assert!(y.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn zero_modulation_zeroes_output() {
        let x = pseudo(Shape::new(1, 2, 6, 6), 5);
        let w = pseudo(Shape::new(3, 2, 3, 3), 6);
        let off = pseudo(Shape::new(1, 18, 6, 6), 7);
        let m = Tensor::zeros(Shape::new(1, 9, 6, 6));
        let y = deform_conv2d_forward(&x, &w, None, Some(&off), &m, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_offset_channels_rejected() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 6, 6));
        let w = Tensor::<f32>::zeros(Shape::new(3, 2, 3, 3));
        let off = Tensor::<f32>::zeros(Shape::new(1, 9, 6, 6));
        let m = Tensor::<f32>::zeros(Shape::new(1, 9, 6, 6));
        assert!(matches!(
            deform_conv2d_forward(&x, &w, None, Some(&off), &m, 1),
            Err(Error::Dimension { .. })
        ));
        let m = Tensor::<f32>::zeros(Shape::new(1, 8, 6, 6));
        assert!(deform_conv2d_forward(&x, &w, None, None, &m, 1).is_err());
    }
}
