//! Per-pixel 3×3 filtering shared across channels.

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Side of the dynamic filter window.
pub const FILTER_SIZE: usize = 3;
pub const FILTER_TAPS: usize = FILTER_SIZE * FILTER_SIZE;

fn check(features: Shape, filters: Shape) -> Result<()> {
    let want = Shape::new(features.n, FILTER_TAPS, features.h, features.w);
    if filters != want {
        return Err(Error::shapes("apply_dynamic_filter", features, filters));
    }
    Ok(())
}

#[inline]
fn tap_offset(k: usize) -> (isize, isize) {
    (
        (k / FILTER_SIZE) as isize - 1,
        (k % FILTER_SIZE) as isize - 1,
    )
}

/// `out(c, p) = Σ_k F_k(p) · f(c, p + o_k)` with zero padding.
pub fn dynamic_filter_forward<S: Real>(
    features: &Tensor<S>,
    filters: &Tensor<S>,
) -> Result<Tensor<S>> {
    let fs = features.shape();
    check(fs, filters.shape())?;
    let mut out = Tensor::zeros(fs);
    let (h, w) = (fs.h as isize, fs.w as isize);
    for n in 0..fs.n {
        for k in 0..FILTER_TAPS {
            let (oy, ox) = tap_offset(k);
            let filt = filters.plane(n, k);
            for c in 0..fs.c {
                let src = features.plane(n, c);
                let start = out.index(n, c, 0, 0);
                let dst = &mut out.data_mut()[start..start + fs.plane()];
                for y in 0..h {
                    let sy = y + oy;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x + ox;
                        if sx < 0 || sx >= w {
                            continue;
                        }
                        let p = (y * w + x) as usize;
                        dst[p] = dst[p] + filt[p] * src[(sy * w + sx) as usize];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients with respect to `(features, filters)`.
pub type DynamicGrads<S> = (Option<Tensor<S>>, Option<Tensor<S>>);

pub fn dynamic_filter_backward<S: Real>(
    features: &Tensor<S>,
    filters: &Tensor<S>,
    dout: &Tensor<S>,
    need_features: bool,
    need_filters: bool,
) -> Result<DynamicGrads<S>> {
    let fs = features.shape();
    check(fs, filters.shape())?;
    let mut dfeat = need_features.then(|| Tensor::zeros(fs));
    let mut dfilt = need_filters.then(|| Tensor::zeros(filters.shape()));
    let (h, w) = (fs.h as isize, fs.w as isize);
    for n in 0..fs.n {
        for k in 0..FILTER_TAPS {
            let (oy, ox) = tap_offset(k);
            let filt = filters.plane(n, k);
            for c in 0..fs.c {
                let src = features.plane(n, c);
                let g = dout.plane(n, c);
                for y in 0..h {
                    let sy = y + oy;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x + ox;
                        if sx < 0 || sx >= w {
                            continue;
                        }
                        let p = (y * w + x) as usize;
                        let q = (sy * w + sx) as usize;
                        if let Some(df) = dfilt.as_mut() {
                            let i = df.index(n, k, 0, 0) + p;
                            df.data_mut()[i] = df.data()[i] + g[p] * src[q];
                        }
                        if let Some(dx) = dfeat.as_mut() {
                            let i = dx.index(n, c, 0, 0) + q;
                            dx.data_mut()[i] = dx.data()[i] + g[p] * filt[p];
                        }
                    }
                }
            }
        }
    }
    Ok((dfeat, dfilt))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_filters_are_identity() {
        let f = Tensor::<f32>::from_fn(Shape::new(2, 3, 4, 5), |n, c, y, x| {
            (n * 7 + c * 3 + y * 5 + x) as f32 * 0.1 - 1.0
        });
        let filt = Tensor::from_fn(
            Shape::new(2, 9, 4, 5),
            |_, k, _, _| if k == 4 { 1.0 } else { 0.0 },
        );
        assert_eq!(dynamic_filter_forward(&f, &filt).unwrap(), f);
    }

    #[test]
    fn box_filter_keeps_interior_constant() {
        let f = Tensor::<f64>::full(Shape::new(1, 2, 5, 5), 0.7);
        let filt = Tensor::full(Shape::new(1, 9, 5, 5), 1.0 / 9.0);
        let out = dynamic_filter_forward(&f, &filt).unwrap();
        for c in 0..2 {
            for y in 1..4 {
                for x in 1..4 {
                    assert!((out.at(0, c, y, x) - 0.7).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn mismatched_filter_field_rejected() {
        let f = Tensor::<f32>::zeros(Shape::new(1, 2, 5, 5));
        let filt = Tensor::<f32>::zeros(Shape::new(1, 9, 4, 5));
        assert!(dynamic_filter_forward(&f, &filt).is_err());
    }
}
