//! Synthetic non-uniform motion blur.
//!
//! Two blur models share one motion description. The temporal model warps a
//! sharp image along a per-pixel motion field at `T` uniform timestamps,
//! averages the frames and applies the camera response `g(x) = x^(1/γ)`. The
//! kernel model gathers each output pixel through a normalized sparse kernel
//! traced along the same motion path, plus Gaussian noise.
//!
//! The motion at pixel `p` is a displacement `v(p)` over the whole exposure;
//! frame `i` samples the sharp image at `p + t_i · v(p)` with
//! `t_i = i / (T − 1) − 0.5`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::kernels::deform::Corners;
use crate::metrics;

pub const DEFAULT_FRAMES: usize = 15;
pub const DEFAULT_MAX_MOTION: f32 = 12.0;
pub const DEFAULT_KERNEL_SAMPLES: usize = 64;
pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MotionKind {
    GlobalShake,
    ObjectMotion,
    Mixture,
}

impl MotionKind {
    pub const ALL: [MotionKind; 3] = [
        MotionKind::GlobalShake,
        MotionKind::ObjectMotion,
        MotionKind::Mixture,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MotionKind::GlobalShake => "shake",
            MotionKind::ObjectMotion => "objects",
            MotionKind::Mixture => "mixture",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown motion kind {s:?} (shake, objects, mixture)"
                ))
            })
    }
}

/// An elliptical region moving by its own displacement.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub cy: f32,
    pub cx: f32,
    pub ry: f32,
    pub rx: f32,
    pub vy: f32,
    pub vx: f32,
}

impl Region {
    fn contains(&self, y: f32, x: f32) -> bool {
        let (dy, dx) = ((y - self.cy) / self.ry, (x - self.cx) / self.rx);
        dy * dy + dx * dx <= 1.0
    }
}

/// Parameters of a motion field, independent of image size.
///
/// The background moves by `t + A · u`, where `u` is the pixel position
/// relative to the image center divided by half the larger side, and
/// `A = [[zoom, −rot], [rot, zoom]]`. Regions, in pixel coordinates,
/// override the background.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSpec {
    pub kind: MotionKind,
    pub ty: f32,
    pub tx: f32,
    pub rot: f32,
    pub zoom: f32,
    pub regions: Vec<Region>,
    pub max_magnitude: f32,
}

impl MotionSpec {
    pub fn none() -> Self {
        Self::translation(0.0, 0.0)
    }

    pub fn translation(vy: f32, vx: f32) -> Self {
        MotionSpec {
            kind: MotionKind::GlobalShake,
            ty: vy,
            tx: vx,
            rot: 0.0,
            zoom: 0.0,
            regions: Vec::new(),
            max_magnitude: f32::INFINITY,
        }
    }

    /// Random motion whose magnitude never exceeds `max_magnitude`.
    pub fn random(
        kind: MotionKind,
        height: usize,
        width: usize,
        max_magnitude: f32,
        rng: &mut impl Rng,
    ) -> Self {
        let m = max_magnitude;
        fn vec(rng: &mut impl Rng, scale: f32) -> (f32, f32) {
            let a = rng.random_range(0.0..std::f32::consts::TAU);
            let r = scale * rng.random_range(0.3f32..1.0);
            (r * a.sin(), r * a.cos())
        }
        let (ty, tx, rot, zoom) = match kind {
            MotionKind::ObjectMotion => {
                let (ty, tx) = vec(rng, 0.25 * m);
                (ty, tx, 0.0, 0.0)
            }
            _ => {
                let (ty, tx) = vec(rng, 0.6 * m);
                let (rot, zoom) = vec(rng, 0.4 * m);
                (ty, tx, rot, zoom)
            }
        };
        let n_regions = match kind {
            MotionKind::GlobalShake => 0,
            MotionKind::ObjectMotion => rng.random_range(1..=3),
            MotionKind::Mixture => rng.random_range(1..=2),
        };
        let (h, w) = (height as f32, width as f32);
        let regions = (0..n_regions)
            .map(|_| {
                let (vy, vx) = vec(rng, m);
                Region {
                    cy: rng.random_range(0.2..0.8) * h,
                    cx: rng.random_range(0.2..0.8) * w,
                    ry: rng.random_range(0.12..0.35) * h,
                    rx: rng.random_range(0.12..0.35) * w,
                    vy,
                    vx,
                }
            })
            .collect();
        MotionSpec {
            kind,
            ty,
            tx,
            rot,
            zoom,
            regions,
            max_magnitude,
        }
    }

    pub fn render(&self, height: usize, width: usize) -> MotionField {
        let (cy, cx) = ((height as f32 - 1.0) / 2.0, (width as f32 - 1.0) / 2.0);
        let r = (height.max(width) as f32 / 2.0).max(1.0);
        let mut field = MotionField::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                let (yf, xf) = (y as f32, x as f32);
                let (uy, ux) = ((yf - cy) / r, (xf - cx) / r);
                let mut v = (
                    self.ty + self.zoom * uy + self.rot * ux,
                    self.tx - self.rot * uy + self.zoom * ux,
                );
                if let Some(reg) = self.regions.iter().rev().find(|reg| reg.contains(yf, xf)) {
                    v = (reg.vy, reg.vx);
                }
                let mag = (v.0 * v.0 + v.1 * v.1).sqrt();
                if mag > self.max_magnitude {
                    let s = self.max_magnitude / mag;
                    v = (v.0 * s, v.1 * s);
                }
                field.set(y, x, v.0, v.1);
            }
        }
        field
    }
}

impl fmt::Display for MotionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "kind={} ty={:.4} tx={:.4} rot={:.4} zoom={:.4} cap={}",
            self.kind.name(),
            self.ty,
            self.tx,
            self.rot,
            self.zoom,
            self.max_magnitude
        )?;
        for r in &self.regions {
            write!(
                f,
                " region={:.2},{:.2},{:.2},{:.2},{:.4},{:.4}",
                r.cy, r.cx, r.ry, r.rx, r.vy, r.vx
            )?;
        }
        Ok(())
    }
}

/// Per-pixel displacement `(vy, vx)` in pixels over the exposure.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionField {
    height: usize,
    width: usize,
    v: Vec<(f32, f32)>,
}

impl MotionField {
    pub fn zeros(height: usize, width: usize) -> Self {
        MotionField {
            height,
            width,
            v: vec![(0.0, 0.0); height * width],
        }
    }

    pub fn uniform(height: usize, width: usize, vy: f32, vx: f32) -> Self {
        MotionField {
            height,
            width,
            v: vec![(vy, vx); height * width],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, y: usize, x: usize) -> (f32, f32) {
        self.v[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, vy: f32, vx: f32) {
        self.v[y * self.width + x] = (vy, vx);
    }

    pub fn max_magnitude(&self) -> f32 {
        self.v
            .iter()
            .map(|(a, b)| (a * a + b * b).sqrt())
            .fold(0.0, f32::max)
    }

    pub fn is_finite(&self) -> bool {
        self.v.iter().all(|(a, b)| a.is_finite() && b.is_finite())
    }
}

/// Exposure timestamps in [−0.5, 0.5].
pub fn timestamps(count: usize) -> Vec<f32> {
    match count {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..count)
            .map(|i| i as f32 / (count - 1) as f32 - 0.5)
            .collect(),
    }
}

/// Bilinear read of all channels with zero padding.
fn sample_rgb(img: &Image, y: f32, x: f32) -> [f32; CHANNELS] {
    let (h, w) = img.dims();
    let mut out = [0.0; CHANNELS];
    if let Some(k) = Corners::new(h, w, y, x) {
        for i in (0..4).filter(|&i| k.valid[i]) {
            for (c, o) in out.iter_mut().enumerate() {
                *o += k.wt[i] * img.data()[k.idx[i] * CHANNELS + c];
            }
        }
    }
    out
}

/// Frames of `sharp` warped along `field` at `count` timestamps.
pub fn warp_frames(sharp: &Image, field: &MotionField, count: usize) -> Result<Vec<Image>> {
    if sharp.dims() != field.dims() {
        return Err(Error::dims(
            "warp_frames",
            format!("{:?}", sharp.dims()),
            format!("{:?}", field.dims()),
        ));
    }
    let (h, w) = sharp.dims();
    Ok(timestamps(count)
        .into_iter()
        .map(|t| {
            let mut frame = Image::new(h, w);
            for y in 0..h {
                for x in 0..w {
                    let (vy, vx) = field.get(y, x);
                    let px = sample_rgb(sharp, y as f32 + t * vy, x as f32 + t * vx);
                    for (c, v) in px.into_iter().enumerate() {
                        frame.set(y, x, c, v);
                    }
                }
            }
            frame
        })
        .collect())
}

/// Average linear frames and apply `g(x) = x^(1/γ)`.
pub fn blur_temporal(frames: &[Image], crf_gamma: f32) -> Result<Image> {
    let first = frames
        .first()
        .ok_or_else(|| Error::contract("blur_temporal", "empty frame list"))?;
    if crf_gamma.is_nan() || crf_gamma <= 0.0 {
        return Err(Error::contract(
            "blur_temporal",
            format!("gamma must be positive, got {crf_gamma}"),
        ));
    }
    let mut acc = vec![0.0f64; first.data().len()];
    for f in frames {
        first.check_same_dims(f, "blur_temporal")?;
        for (a, &v) in acc.iter_mut().zip(f.data()) {
            *a += v as f64;
        }
    }
    let n = frames.len() as f64;
    let inv = 1.0 / crf_gamma as f64;
    let data = acc
        .into_iter()
        .map(|a| {
            let m = (a / n).max(0.0);
            (if crf_gamma == 1.0 { m } else { m.powf(inv) }) as f32
        })
        .collect();
    Image::from_vec(first.height(), first.width(), data)
}

/// Temporal blur of `sharp` along `field`.
pub fn blur_motion(
    sharp: &Image,
    field: &MotionField,
    frames: usize,
    crf_gamma: f32,
) -> Result<Image> {
    blur_temporal(&warp_frames(sharp, field, frames)?, crf_gamma)
}

/// One normalized kernel footprint per pixel, stored row by row.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseKernelMatrix {
    height: usize,
    width: usize,
    starts: Vec<usize>,
    offsets: Vec<(i32, i32)>,
    weights: Vec<f32>,
}

impl SparseKernelMatrix {
    /// `taps[p]` lists `((dy, dx), weight)` for pixel `p` in row-major order.
    /// Weights must be non-negative and sum to 1 ± 1e-6 per pixel.
    pub fn new(height: usize, width: usize, taps: Vec<Vec<((i32, i32), f32)>>) -> Result<Self> {
        if taps.len() != height * width {
            return Err(Error::dims(
                "SparseKernelMatrix::new",
                height * width,
                taps.len(),
            ));
        }
        let mut m = SparseKernelMatrix {
            height,
            width,
            starts: Vec::with_capacity(taps.len() + 1),
            offsets: Vec::new(),
            weights: Vec::new(),
        };
        m.starts.push(0);
        for (p, list) in taps.into_iter().enumerate() {
            let sum: f64 = list.iter().map(|&(_, wt)| wt as f64).sum();
            if list.iter().any(|&(_, wt)| wt.is_nan() || wt < 0.0) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::contract(
                    "SparseKernelMatrix::new",
                    format!("kernel at pixel {p} is not normalized (sum {sum})"),
                ));
            }
            for (o, wt) in list {
                m.offsets.push(o);
                m.weights.push(wt);
            }
            m.starts.push(m.offsets.len());
        }
        Ok(m)
    }

    pub fn delta(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![vec![((0, 0), 1.0)]; height * width])
            .expect("delta is normalized")
    }

    /// Uniform `(2r + 1)²` box at every pixel.
    pub fn uniform_box(height: usize, width: usize, radius: i32) -> Self {
        let side = 2 * radius + 1;
        let wt = 1.0 / (side * side) as f32;
        let taps: Vec<_> = (-radius..=radius)
            .flat_map(|dy| (-radius..=radius).map(move |dx| ((dy, dx), wt)))
            .collect();
        Self::new(height, width, vec![taps; height * width]).expect("box is normalized")
    }

    /// Linear-motion kernels: the exposure path of each pixel sampled at
    /// `samples` timestamps, each splatted with bilinear weights.
    pub fn from_motion(field: &MotionField, samples: usize) -> Result<Self> {
        if samples == 0 {
            return Err(Error::contract(
                "SparseKernelMatrix::from_motion",
                "zero samples",
            ));
        }
        let (h, w) = field.dims();
        let ts = timestamps(samples);
        let per = 1.0 / samples as f64;
        let mut taps = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (vy, vx) = field.get(y, x);
                let mut acc: BTreeMap<(i32, i32), f64> = BTreeMap::new();
                for &t in &ts {
                    let (sy, sx) = ((t * vy) as f64, (t * vx) as f64);
                    let (y0, x0) = (sy.floor(), sx.floor());
                    let (fy, fx) = (sy - y0, sx - x0);
                    let (y0, x0) = (y0 as i32, x0 as i32);
                    for (oy, ox, wt) in [
                        (y0, x0, (1.0 - fy) * (1.0 - fx)),
                        (y0, x0 + 1, (1.0 - fy) * fx),
                        (y0 + 1, x0, fy * (1.0 - fx)),
                        (y0 + 1, x0 + 1, fy * fx),
                    ] {
                        if wt > 0.0 {
                            *acc.entry((oy, ox)).or_default() += wt * per;
                        }
                    }
                }
                let sum: f64 = acc.values().sum();
                taps.push(
                    acc.into_iter()
                        .map(|(o, wt)| (o, (wt / sum) as f32))
                        .collect::<Vec<_>>(),
                );
            }
        }
        // Renormalize in f32 so rounding stays inside the tolerance.
        for list in &mut taps {
            let s: f32 = list.iter().map(|(_, wt)| wt).sum();
            for (_, wt) in list.iter_mut() {
                *wt /= s;
            }
        }
        Self::new(h, w, taps)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn taps(&self, y: usize, x: usize) -> impl Iterator<Item = ((i32, i32), f32)> + '_ {
        let p = y * self.width + x;
        let r = self.starts[p]..self.starts[p + 1];
        self.offsets[r.clone()]
            .iter()
            .copied()
            .zip(self.weights[r].iter().copied())
    }
}

/// `I_b = I_s ⊛ k + n` with `n ~ N(0, σ²)` per value, clamped to [0, 1].
/// Taps outside the image read zero.
pub fn blur_kernel_matrix(
    sharp: &Image,
    k: &SparseKernelMatrix,
    noise_sigma: f32,
    rng: &mut impl Rng,
) -> Result<Image> {
    if sharp.dims() != k.dims() {
        return Err(Error::dims(
            "blur_kernel_matrix",
            format!("{:?}", sharp.dims()),
            format!("{:?}", k.dims()),
        ));
    }
    let (h, w) = sharp.dims();
    let mut out = Image::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; CHANNELS];
            for ((dy, dx), wt) in k.taps(y, x) {
                let (sy, sx) = (y as i64 + dy as i64, x as i64 + dx as i64);
                if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                    continue;
                }
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += wt as f64 * sharp.get(sy as usize, sx as usize, c) as f64;
                }
            }
            for (c, a) in acc.into_iter().enumerate() {
                out.set(y, x, c, a as f32);
            }
        }
    }
    add_noise(&mut out, noise_sigma, rng)?;
    Ok(out.clamp())
}

pub fn add_noise(img: &mut Image, sigma: f32, rng: &mut impl Rng) -> Result<()> {
    if sigma == 0.0 {
        return Ok(());
    }
    let normal =
        Normal::new(0.0, sigma).map_err(|e| Error::contract("add_noise", e.to_string()))?;
    for v in img.data_mut() {
        *v += normal.sample(rng);
    }
    Ok(())
}

fn random_color(rng: &mut impl Rng) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn lerp(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// Even-odd point-in-polygon test.
fn inside(poly: &[(f32, f32)], y: f32, x: f32) -> bool {
    let mut hit = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (yi, xi) = poly[i];
        let (yj, xj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            hit = !hit;
        }
        j = i;
    }
    hit
}

enum Fill {
    Flat([f32; 3]),
    Stripes([f32; 3], [f32; 3], f32, f32),
    Checker([f32; 3], [f32; 3], f32),
}

impl Fill {
    fn random(rng: &mut impl Rng) -> Fill {
        let (a, b) = (random_color(rng), random_color(rng));
        match rng.random_range(0..3) {
            0 => Fill::Flat(a),
            1 => Fill::Stripes(
                a,
                b,
                rng.random_range(0.0..std::f32::consts::PI),
                rng.random_range(3.0..9.0),
            ),
            _ => Fill::Checker(a, b, rng.random_range(3.0..8.0)),
        }
    }

    fn at(&self, y: f32, x: f32) -> [f32; 3] {
        match *self {
            Fill::Flat(c) => c,
            Fill::Stripes(a, b, angle, period) => {
                let s = (y * angle.sin() + x * angle.cos()) / period;
                if s.rem_euclid(1.0) < 0.5 {
                    a
                } else {
                    b
                }
            }
            Fill::Checker(a, b, cell) => {
                if ((y / cell).floor() + (x / cell).floor()) as i64 % 2 == 0 {
                    a
                } else {
                    b
                }
            }
        }
    }
}

/// Procedural sharp image: a color gradient, textured polygons and rows of
/// glyph-like strokes, rendered with 2×2 supersampling.
pub fn procedural_image(height: usize, width: usize, rng: &mut impl Rng) -> Image {
    let (h, w) = (height as f32, width as f32);
    let (c0, c1) = (random_color(rng), random_color(rng));
    let angle = rng.random_range(0.0..std::f32::consts::TAU);
    let (gy, gx) = (angle.sin(), angle.cos());
    let span = (h * gy.abs() + w * gx.abs()).max(1.0);

    let polys: Vec<(Vec<(f32, f32)>, Fill)> = (0..rng.random_range(3..7))
        .map(|_| {
            let (cy, cx) = (rng.random_range(0.0..h), rng.random_range(0.0..w));
            let r = rng.random_range(0.1..0.35) * h.min(w);
            let n = rng.random_range(3..8);
            let phase = rng.random_range(0.0..std::f32::consts::TAU);
            let pts = (0..n)
                .map(|i| {
                    let a = phase + i as f32 * std::f32::consts::TAU / n as f32;
                    let rr = r * rng.random_range(0.5..1.0);
                    (cy + rr * a.sin(), cx + rr * a.cos())
                })
                .collect();
            (pts, Fill::random(rng))
        })
        .collect();

    // Glyphs: strokes inside a grid of 5×7 cells along a few text lines.
    let mut strokes: Vec<(f32, f32, f32, f32, [f32; 3])> = Vec::new();
    let cell = rng.random_range(5.0f32..8.0);
    for _ in 0..rng.random_range(1..3) {
        let top = rng.random_range(0.0..(h - 1.4 * cell).max(1.0));
        let ink = random_color(rng);
        let mut left = rng.random_range(0.0..(w * 0.3));
        while left + cell < w {
            for _ in 0..rng.random_range(1..4) {
                let gx = |r: &mut dyn rand::RngCore| {
                    left + r.random_range(0..3) as f32 * 0.5 * cell * 0.8
                };
                let gy = |r: &mut dyn rand::RngCore| {
                    top + r.random_range(0..3) as f32 * 0.5 * cell * 1.4
                };
                let (y0, x0) = (gy(rng), gx(rng));
                let (y1, x1) = (gy(rng), gx(rng));
                strokes.push((y0, x0, y1, x1, ink));
            }
            left += cell * rng.random_range(1.0..1.6);
        }
    }
    let thickness = 0.12 * cell;

    let shade = |y: f32, x: f32| -> [f32; 3] {
        let mut c = lerp(c0, c1, ((y * gy + x * gx) / span).rem_euclid(1.0));
        for (poly, fill) in &polys {
            if inside(poly, y, x) {
                c = fill.at(y, x);
            }
        }
        for &(y0, x0, y1, x1, ink) in &strokes {
            let (dy, dx) = (y1 - y0, x1 - x0);
            let len2 = dy * dy + dx * dx;
            let t = if len2 > 0.0 {
                (((y - y0) * dy + (x - x0) * dx) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (py, px) = (y0 + t * dy - y, x0 + t * dx - x);
            if py * py + px * px <= thickness * thickness {
                c = ink;
            }
        }
        c
    };

    let mut img = Image::new(height, width);
    for y in 0..height {
        for x in 0..width {
            let mut acc = [0.0f32; 3];
            for (sy, sx) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let c = shade(y as f32 + sy, x as f32 + sx);
                for k in 0..3 {
                    acc[k] += 0.25 * c[k];
                }
            }
            for (k, v) in acc.into_iter().enumerate() {
                img.set(y, x, k, v.clamp(0.0, 1.0));
            }
        }
    }
    img
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub count: usize,
    pub size: usize,
    pub frames: usize,
    pub crf_gamma: f32,
    pub noise_sigma: f32,
    pub max_motion: f32,
    pub kind: MotionKind,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            count: 8,
            size: 64,
            frames: DEFAULT_FRAMES,
            crf_gamma: 1.0,
            noise_sigma: 0.0,
            max_motion: DEFAULT_MAX_MOTION,
            kind: MotionKind::Mixture,
        }
    }
}

pub struct SynthPair {
    pub blurred: Image,
    pub sharp: Image,
    pub motion: MotionSpec,
}

impl SynthConfig {
    /// Border rendered around each image and cropped after blurring, so the
    /// exposure path of every kept pixel stays inside the rendered scene.
    pub fn margin(&self) -> usize {
        (self.max_motion / 2.0).ceil() as usize + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.frames == 0 {
            return Err(Error::Config(
                "synth size and frames must be positive".into(),
            ));
        }
        let bad = |v: f32| v.is_nan() || v < 0.0;
        if bad(self.crf_gamma)
            || self.crf_gamma == 0.0
            || bad(self.noise_sigma)
            || bad(self.max_motion)
        {
            return Err(Error::Config(format!(
                "invalid synth parameters: gamma {} sigma {} max_motion {}",
                self.crf_gamma, self.noise_sigma, self.max_motion
            )));
        }
        Ok(())
    }

    /// Pair `index`, from its own random stream.
    pub fn pair(&self, index: usize) -> Result<SynthPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let m = self.margin();
        let full = self.size + 2 * m;
        let big = procedural_image(full, full, &mut rng);
        let motion = MotionSpec::random(self.kind, full, full, self.max_motion, &mut rng);
        let mut blurred = blur_motion(
            &big,
            &motion.render(full, full),
            self.frames,
            self.crf_gamma,
        )?;
        add_noise(&mut blurred, self.noise_sigma, &mut rng)?;
        Ok(SynthPair {
            blurred: blurred.clamp().crop(m, m, self.size, self.size)?,
            sharp: big.crop(m, m, self.size, self.size)?,
            motion,
        })
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Write `count` pairs as blur_####.png / sharp_####.png plus a manifest.
pub fn make_corpus(dir: impl AsRef<Path>, cfg: &SynthConfig) -> Result<()> {
    cfg.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!(
        "seed = {}\ncount = {}\nsize = {}\nframes = {}\ngamma = {}\nnoise_sigma = {}\nmax_motion = {}\nkind = {}\n",
        cfg.seed,
        cfg.count,
        cfg.size,
        cfg.frames,
        cfg.crf_gamma,
        cfg.noise_sigma,
        cfg.max_motion,
        cfg.kind.name()
    );
    for i in 0..cfg.count {
        let pair = cfg.pair(i)?;
        let (b, s) = (format!("blur_{i:04}.png"), format!("sharp_{i:04}.png"));
        pair.blurred.write_png(dir.join(&b))?;
        pair.sharp.write_png(dir.join(&s))?;
        manifest.push_str(&format!("pair = {b} {s} {}\n", pair.motion));
    }
    write_file(&dir.join(MANIFEST), &manifest)
}

/// Blurred/sharp pairs read back from a corpus directory.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub dir: PathBuf,
    pub names: Vec<String>,
    pub blurred: Vec<Image>,
    pub sharp: Vec<Image>,
}

impl Corpus {
    pub fn load(dir: impl AsRef<Path>) -> Result<Corpus> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut corpus = Corpus {
            dir: dir.to_path_buf(),
            names: Vec::new(),
            blurred: Vec::new(),
            sharp: Vec::new(),
        };
        for line in text.lines() {
            let Some(rest) = line.strip_prefix("pair = ") else {
                continue;
            };
            let mut parts = rest.split_whitespace();
            let (Some(b), Some(s)) = (parts.next(), parts.next()) else {
                return Err(Error::Config(format!(
                    "{}: malformed pair line {line:?}",
                    path.display()
                )));
            };
            let blurred = Image::read_png(dir.join(b))?;
            let sharp = Image::read_png(dir.join(s))?;
            blurred.check_same_dims(&sharp, "Corpus::load")?;
            corpus.names.push(
                b.trim_end_matches(".png")
                    .trim_start_matches("blur_")
                    .to_string(),
            );
            corpus.blurred.push(blurred);
            corpus.sharp.push(sharp);
        }
        Ok(corpus)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Mean PSNR of blurred inputs against their sharp targets.
    pub fn blurred_psnr(&self) -> Result<f64> {
        let mut total = 0.0;
        for (b, s) in self.blurred.iter().zip(&self.sharp) {
            total += metrics::psnr(b, s)?;
        }
        Ok(total / self.len().max(1) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vertical_edge(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |_, x, _| if x < w / 2 { 0.1 } else { 0.9 })
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn timestamps_are_uniform_and_centered() {
        assert_eq!(timestamps(1), vec![0.0]);
        assert_eq!(timestamps(3), vec![-0.5, 0.0, 0.5]);
        let t = timestamps(DEFAULT_FRAMES);
        assert_eq!(t.len(), 15);
        assert!((t[14] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn identical_frames_average_to_the_frame() {
        let f = procedural_image(9, 11, &mut rng(1));
        let b = blur_temporal(&[f.clone(), f.clone(), f.clone()], 1.0).unwrap();
        assert!(b
            .data()
            .iter()
            .zip(f.data())
            .all(|(a, b)| (a - b).abs() < 1e-7));
    }

    #[test]
    fn black_and_white_average_to_half() {
        let b = blur_temporal(&[Image::new(2, 2), Image::new(2, 2).map(|_| 1.0)], 1.0).unwrap();
        assert!(b.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn crf_is_applied_after_averaging() {
        let b = blur_temporal(&[Image::new(1, 1), Image::new(1, 1).map(|_| 0.5)], 2.0).unwrap();
        assert!((b.get(0, 0, 0) - 0.25f32.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn empty_frames_and_bad_gamma_are_errors() {
        assert!(blur_temporal(&[], 1.0).is_err());
        assert!(blur_temporal(&[Image::new(1, 1)], 0.0).is_err());
        assert!(blur_temporal(&[Image::new(1, 1), Image::new(1, 2)], 1.0).is_err());
    }

    #[test]
    fn horizontal_motion_ramp_matches_shift_and_average() {
        let (h, w) = (8, 32);
        let sharp = vertical_edge(h, w);
        let b = blur_motion(&sharp, &MotionField::uniform(h, w, 0.0, 6.0), 7, 1.0).unwrap();
        // timestamps −0.5..0.5 over 6 px give integer shifts −3..=3
        let oracle = |y: usize, x: usize| -> f32 {
            (-3i64..=3)
                .map(|s| {
                    let sx = x as i64 + s;
                    if sx < 0 || sx >= w as i64 {
                        0.0
                    } else {
                        sharp.get(y, sx as usize, 0)
                    }
                })
                .sum::<f32>()
                / 7.0
        };
        for y in 0..h {
            for x in 0..w {
                assert!((b.get(y, x, 0) - oracle(y, x)).abs() <= 1e-5);
            }
        }
        let ramp = (4..w - 4)
            .filter(|&x| b.get(0, x, 0) > 0.1 + 1e-4 && b.get(0, x, 0) < 0.9 - 1e-4)
            .count();
        assert_eq!(ramp, 6);
    }

    #[test]
    fn zero_motion_is_identity_under_both_models() {
        let sharp = procedural_image(16, 16, &mut rng(2));
        let field = MotionSpec::none().render(16, 16);
        assert_eq!(
            blur_motion(&sharp, &field, DEFAULT_FRAMES, 1.0).unwrap(),
            sharp
        );
        let k = SparseKernelMatrix::from_motion(&field, DEFAULT_KERNEL_SAMPLES).unwrap();
        assert_eq!(
            blur_kernel_matrix(&sharp, &k, 0.0, &mut rng(0)).unwrap(),
            sharp
        );
    }

    #[test]
    fn delta_and_box_kernels() {
        let sharp = procedural_image(8, 8, &mut rng(3));
        let d =
            blur_kernel_matrix(&sharp, &SparseKernelMatrix::delta(8, 8), 0.0, &mut rng(0)).unwrap();
        assert_eq!(d, sharp);
        let flat = Image::new(8, 8).map(|_| 0.3);
        let b = blur_kernel_matrix(
            &flat,
            &SparseKernelMatrix::uniform_box(8, 8, 1),
            0.0,
            &mut rng(0),
        )
        .unwrap();
        for y in 1..7 {
            for x in 1..7 {
                assert!((b.get(y, x, 1) - 0.3).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn unnormalized_kernel_is_rejected() {
        assert!(SparseKernelMatrix::new(1, 1, vec![vec![((0, 0), 0.5)]]).is_err());
        assert!(SparseKernelMatrix::new(1, 1, vec![vec![((0, 0), 1.5), ((0, 1), -0.5)]]).is_err());
        assert!(SparseKernelMatrix::new(1, 2, vec![vec![((0, 0), 1.0)]]).is_err());
    }

    #[test]
    fn motion_kernels_are_normalized_and_nonnegative() {
        for (i, kind) in MotionKind::ALL.into_iter().enumerate() {
            let field = MotionSpec::random(kind, 24, 24, 12.0, &mut rng(i as u64)).render(24, 24);
            let k = SparseKernelMatrix::from_motion(&field, DEFAULT_KERNEL_SAMPLES).unwrap();
            for y in 0..24 {
                for x in 0..24 {
                    let s: f64 = k.taps(y, x).map(|(_, wt)| wt as f64).sum();
                    assert!((s - 1.0).abs() <= 1e-6);
                    assert!(k.taps(y, x).all(|(_, wt)| wt >= 0.0));
                }
            }
        }
    }

    #[test]
    fn random_fields_respect_the_cap() {
        for seed in 0..30 {
            for kind in MotionKind::ALL {
                let f = MotionSpec::random(kind, 40, 30, 12.0, &mut rng(seed)).render(40, 30);
                assert!(f.is_finite());
                assert!(f.max_magnitude() <= 12.0 + 1e-4);
            }
        }
    }

    #[test]
    fn noise_changes_values_with_the_right_spread() {
        let flat = Image::new(32, 32).map(|_| 0.5);
        let k = SparseKernelMatrix::delta(32, 32);
        let b = blur_kernel_matrix(&flat, &k, 0.05, &mut rng(4)).unwrap();
        let var = b
            .data()
            .iter()
            .map(|&v| (v as f64 - 0.5).powi(2))
            .sum::<f64>()
            / b.data().len() as f64;
        assert!((var.sqrt() - 0.05).abs() < 0.005);
    }

    #[test]
    fn energy_is_preserved_away_from_borders() {
        // Texture confined to the center, constant gray around it.
        let (n, border) = (48, 12);
        let tex = procedural_image(n, n, &mut rng(5));
        let sharp = Image::from_fn(n, n, |y, x, c| {
            let inner = (2 * border..n - 2 * border).contains(&y)
                && (2 * border..n - 2 * border).contains(&x);
            if inner {
                tex.get(y, x, c)
            } else {
                0.5
            }
        });
        let crop = |im: &Image| {
            im.crop(border, border, n - 2 * border, n - 2 * border)
                .unwrap()
                .mean()
        };
        let mut r = rng(6);
        for _ in 0..5 {
            let (vy, vx) = (r.random_range(-10.0..10.0), r.random_range(-10.0..10.0));
            let field = MotionField::uniform(n, n, vy, vx);
            let b = blur_motion(&sharp, &field, DEFAULT_FRAMES, 1.0).unwrap();
            assert!((crop(&b) - crop(&sharp)).abs() <= 1e-3);
            let k = SparseKernelMatrix::from_motion(&field, DEFAULT_KERNEL_SAMPLES).unwrap();
            let b = blur_kernel_matrix(&sharp, &k, 0.0, &mut r).unwrap();
            assert!((crop(&b) - crop(&sharp)).abs() <= 1e-3);
        }
    }

    #[test]
    fn corpus_pairs_are_deterministic_and_distinct() {
        let cfg = SynthConfig {
            size: 24,
            ..SynthConfig::default()
        };
        let (a, b) = (cfg.pair(3).unwrap(), cfg.pair(3).unwrap());
        assert_eq!(a.blurred, b.blurred);
        assert_eq!(a.motion, b.motion);
        assert_ne!(cfg.pair(4).unwrap().sharp, a.sharp);
        assert_eq!(a.blurred.dims(), (24, 24));
    }

    #[test]
    fn motion_kind_names_round_trip() {
        for k in MotionKind::ALL {
            assert_eq!(MotionKind::parse(k.name()).unwrap(), k);
        }
        assert!(MotionKind::parse("spin").is_err());
    }
}
