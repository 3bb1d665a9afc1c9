//! PSNR, SSIM and per-image difference statistics.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Mean squared error over all channels.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_dims(b, "mse")?;
    let n = a.data().len().max(1) as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / n)
}

/// Peak 1. Identical images give `f64::INFINITY`, printed as "inf".
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / m).log10()
    })
}

pub fn psnr_from_mse(m: f64) -> f64 {
    if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / m).log10()
    }
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of a row-major plane.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&line[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for (i, &t) in taps.iter().enumerate() {
            let line = &rows[(y + i) * ow..(y + i + 1) * ow];
            for (o, &v) in out[y * ow..(y + 1) * ow].iter_mut().zip(line) {
                *o += t * v;
            }
        }
    }
    out
}

/// Mean local SSIM of the Rec.601 luma over valid window positions.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_dims(b, "ssim")?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(
            "ssim",
            format!("image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let (la, lb) = (a.luma(), b.luma());
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
    let mu_a = filter_valid(&la, h, w, &taps);
    let mu_b = filter_valid(&lb, h, w, &taps);
    let aa = filter_valid(&prod(&la, &la), h, w, &taps);
    let bb = filter_valid(&prod(&lb, &lb), h, w, &taps);
    let ab = filter_valid(&prod(&la, &lb), h, w, &taps);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Per-pixel |a − b| averaged over channels.
pub fn difference_map(a: &Image, b: &Image) -> Result<Vec<f32>> {
    a.check_same_dims(b, "difference_map")?;
    Ok(a.data()
        .chunks_exact(3)
        .zip(b.data().chunks_exact(3))
        .map(|(p, q)| p.iter().zip(q).map(|(x, y)| (x - y).abs()).sum::<f32>() / 3.0)
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    /// Mean of |a − b| on the 0–255 scale.
    pub diff_mean: f64,
    /// Population variance of |a − b| on the 0–255 scale.
    pub diff_var: f64,
}

impl MetricRow {
    pub fn measure(name: impl Into<String>, a: &Image, b: &Image) -> Result<Self> {
        a.check_same_dims(b, "MetricRow::measure")?;
        let d: Vec<f64> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x as f64 - y as f64).abs() * 255.0)
            .collect();
        let n = d.len().max(1) as f64;
        let diff_mean = d.iter().sum::<f64>() / n;
        let diff_var = d.iter().map(|v| (v - diff_mean).powi(2)).sum::<f64>() / n;
        Ok(MetricRow {
            name: name.into(),
            psnr: psnr(a, b)?,
            ssim: ssim(a, b)?,
            diff_mean,
            diff_var,
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn push(&mut self, row: MetricRow) {
        self.rows.push(row);
    }

    /// Column means; PSNR averages to "inf" if any row is "inf".
    pub fn aggregate(&self) -> MetricRow {
        let n = self.rows.len().max(1) as f64;
        let mean = |f: fn(&MetricRow) -> f64| self.rows.iter().map(f).sum::<f64>() / n;
        MetricRow {
            name: "mean".into(),
            psnr: mean(|r| r.psnr),
            ssim: mean(|r| r.ssim),
            diff_mean: mean(|r| r.diff_mean),
            diff_var: mean(|r| r.diff_var),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("image,psnr,ssim,diff_mean,diff_var\n");
        for r in self.rows.iter().chain(std::iter::once(&self.aggregate())) {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.name, r.psnr, r.ssim, r.diff_mean, r.diff_var
            );
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, |_, _, _| rng.random::<f32>())
    }

    /// Direct 11×11 weighted window at every valid position.
    fn ssim_brute(a: &Image, b: &Image) -> f64 {
        let (h, w) = a.dims();
        let (la, lb) = (a.luma(), b.luma());
        let g = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
        let k = SSIM_WINDOW;
        let mut total = 0.0;
        let mut count = 0;
        for y in 0..=h - k {
            for x in 0..=w - k {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let wt = g[i] * g[j];
                        ma += wt * la[(y + i) * w + x + j];
                        mb += wt * lb[(y + i) * w + x + j];
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let wt = g[i] * g[j];
                        let da = la[(y + i) * w + x + j] - ma;
                        let db = lb[(y + i) * w + x + j] - mb;
                        va += wt * da * da;
                        vb += wt * db * db;
                        cov += wt * da * db;
                    }
                }
                total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                    / ((ma * ma + mb * mb + C1) * (va + vb + C2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn psnr_of_black_vs_mid_gray() {
        let a = Image::new(1, 1);
        let b = a.map(|_| 0.5);
        assert!((psnr(&a, &b).unwrap() - 6.020599913279624).abs() < 1e-9);
    }

    #[test]
    fn psnr_of_uniform_offset_is_20db() {
        let a = Image::from_fn(4, 4, |_, _, _| 0.5);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-4);
    }

    #[test]
    fn identical_images() {
        let a = random_image(16, 16, 1);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(f64::INFINITY.to_string(), "inf");
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn ssim_matches_brute_force_on_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Image::from_fn(
            17,
            14,
            |_, _, _| if rng.random::<bool>() { 1.0 } else { 0.0 },
        );
        let neg = a.map(|v| 1.0 - v);
        let fast = ssim(&a, &neg).unwrap();
        assert!((fast - ssim_brute(&a, &neg)).abs() <= 1e-6);
        assert!(fast < 0.0);
    }

    #[test]
    fn ssim_matches_brute_force_on_random_pairs() {
        for seed in 0..5 {
            let a = random_image(15, 19, seed);
            let b = random_image(15, 19, seed + 100);
            assert!((ssim(&a, &b).unwrap() - ssim_brute(&a, &b)).abs() <= 1e-6);
        }
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Image::new(10, 20);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn dim_mismatch() {
        let err = psnr(&Image::new(2, 2), &Image::new(2, 3)).unwrap_err();
        assert!(err.to_string().contains("2x3"));
    }

    #[test]
    fn report_of_identical_pair() {
        let a = random_image(12, 12, 9);
        let row = MetricRow::measure("x", &a, &a).unwrap();
        assert_eq!(
            (row.psnr, row.ssim, row.diff_mean, row.diff_var),
            (f64::INFINITY, 1.0, 0.0, 0.0)
        );
        let mut r = MetricReport::default();
        r.push(row);
        assert!(r.to_csv().ends_with("mean,inf,1,0,0\n"));
    }

    #[test]
    fn diff_statistics_on_255_scale() {
        let a = Image::from_fn(12, 12, |y, _, _| if y % 2 == 0 { 0.0 } else { 0.2 });
        let b = Image::new(12, 12);
        let row = MetricRow::measure("x", &a, &b).unwrap();
        assert!((row.diff_mean - 25.5).abs() < 1e-4);
        assert!((row.diff_var - 25.5 * 25.5).abs() < 1e-2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn ssim_is_symmetric_and_bounded(sa in 0u64..1000, sb in 0u64..1000) {
            let a = random_image(13, 13, sa);
            let b = random_image(13, 13, sb);
            let ab = ssim(&a, &b).unwrap();
            prop_assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn aggregate_is_row_mean(seeds in proptest::collection::vec(0u64..1000, 1..5)) {
            let mut r = MetricReport::default();
            for &s in &seeds {
                r.push(MetricRow::measure(s.to_string(), &random_image(12, 12, s), &random_image(12, 12, s + 1)).unwrap());
            }
            let agg = r.aggregate();
            let m = r.rows.iter().map(|x| x.ssim).sum::<f64>() / r.rows.len() as f64;
            prop_assert!((agg.ssim - m).abs() <= 1e-9);
        }
    }
}
