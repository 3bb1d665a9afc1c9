//! Central finite-difference gradient checks on the 64-bit path.
//!
//! Every check projects the op output onto a fixed random tensor, so the
//! scalar being differentiated touches every output element. Elements whose
//! perturbation window straddles a kink (ReLU, bilinear cell boundaries) are
//! compared against one-sided differences, then against a finer central
//! difference; a check fails if any element matches none of them or if too
//! many elements needed the fallback.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aspdc::{fuse, Afim, AspdcConfig, BranchSpec, DeformBranch};
use crate::deblur::{DeblurConfig, DeblurNet};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::conv::ConvArgs;
use crate::kernels::deform::bilinear_sample;
use crate::kernels::deform::bilinear_sample_grad;
use crate::params::{Bound, ParamStore};
use crate::reblur::{ReblurConfig, ReblurNet};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub seed: u64,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
    pub passed: bool,
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<4} {:<28} seed={:<3} max_rel_err={:.2e} checked={} skipped={}",
            if self.passed { "ok" } else { "FAIL" },
            self.name,
            self.seed,
            self.max_rel_err,
            self.checked,
            self.skipped
        )
    }
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Perturbation size.
    pub step: f64,
    /// Maximum relative error.
    pub tol: f64,
    /// Denominator floor of the relative error, so near-zero gradients are
    /// compared in absolute terms.
    pub floor: f64,
    /// Elements sampled per input tensor.
    pub max_per_input: usize,
    /// Largest tolerated fraction of elements that needed the refined step.
    pub max_skip_fraction: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-3,
            tol: 1e-3,
            floor: 1e-3,
            max_per_input: 48,
            max_skip_fraction: 0.2,
        }
    }
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn uniform(shape: Shape, rng: &mut impl Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(lo..hi))
}

impl GradCheck {
    fn verdict(&self, a: f64, f: impl Fn(f64) -> Result<f64>) -> Result<Verdict> {
        let h = self.step;
        let (f0, fp, fm) = (f(0.0)?, f(h)?, f(-h)?);
        let err = rel_err(a, (fp - fm) / (2.0 * h), self.floor);
        if err <= self.tol {
            return Ok(Verdict::Ok(err));
        }
        // A kink inside (x − h, x + h) spoils the central difference. The
        // second-order one-sided differences stay valid on the side without
        // one, and the analytic slope must match that side.
        let fwd = (-3.0 * f0 + 4.0 * fp - f(2.0 * h)?) / (2.0 * h);
        let bwd = (3.0 * f0 - 4.0 * fm + f(-2.0 * h)?) / (2.0 * h);
        let one_sided = rel_err(a, fwd, self.floor).min(rel_err(a, bwd, self.floor));
        if one_sided <= self.tol {
            return Ok(Verdict::Ok(one_sided));
        }
        // Several kinks around x. Smooth truncation error at these steps is
        // orders of magnitude below tolerance, so a mismatch that vanishes at
        // a finer step is attributed to the kinks.
        for r in [h / 10.0, h / 100.0, h / 1000.0] {
            let fine = rel_err(a, (f(r)? - f(-r)?) / (2.0 * r), self.floor);
            if fine <= self.tol {
                return Ok(Verdict::Kink(fine));
            }
        }
        Ok(Verdict::Bad(err))
    }

    /// Check `f` with respect to every input flagged in `differentiable`.
    /// `f` may return any shape; it is projected to a scalar internally.
    pub fn check<F>(
        &self,
        name: &str,
        seed: u64,
        inputs: &[Tensor<f64>],
        differentiable: &[bool],
        f: F,
    ) -> Result<CheckReport>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        assert_eq!(inputs.len(), differentiable.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0ffd);

        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(differentiable)
            .map(|(t, &d)| g.leaf(t.clone(), d))
            .collect();
        let out = f(&mut g, &vars)?;
        let projection = uniform(g.shape(out), &mut rng, -1.0, 1.0);
        let r = g.constant(projection.clone());
        let prod = g.mul(out, r)?;
        let loss = g.sum(prod)?;
        g.backward(loss)?;

        let eval = |values: &[Tensor<f64>]| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
            let out = f(&mut g, &vars)?;
            Ok(g.value(out)
                .data()
                .iter()
                .zip(projection.data())
                .map(|(a, b)| a * b)
                .sum())
        };

        let base = eval(inputs)?;
        let work = std::cell::RefCell::new(inputs.to_vec());
        let (mut max_err, mut checked, mut skipped, mut bad) = (0.0f64, 0usize, 0usize, 0usize);
        for (i, &d) in differentiable.iter().enumerate() {
            if !d {
                continue;
            }
            let analytic = g
                .grad(vars[i])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
            let n = inputs[i].numel();
            let picks: Vec<usize> = if n <= self.max_per_input {
                (0..n).collect()
            } else {
                (0..self.max_per_input)
                    .map(|_| rng.random_range(0..n))
                    .collect()
            };
            for j in picks {
                let x0 = inputs[i].data()[j];
                let verdict = self.verdict(analytic.data()[j], |d| {
                    if d == 0.0 {
                        return Ok(base);
                    }
                    let mut w = work.borrow_mut();
                    w[i].data_mut()[j] = x0 + d;
                    let v = eval(&w);
                    w[i].data_mut()[j] = x0;
                    v
                })?;
                checked += 1;
                match verdict {
                    Verdict::Ok(e) => max_err = max_err.max(e),
                    Verdict::Kink(e) => {
                        skipped += 1;
                        max_err = max_err.max(e);
                    }
                    Verdict::Bad(e) => {
                        bad += 1;
                        max_err = max_err.max(e);
                    }
                }
            }
        }
        let passed =
            bad == 0 && checked > 0 && (skipped as f64) <= self.max_skip_fraction * checked as f64;
        Ok(CheckReport {
            name: name.to_string(),
            seed,
            max_rel_err: max_err,
            checked,
            skipped,
            passed,
        })
    }
}

enum Verdict {
    Ok(f64),
    Kink(f64),
    Bad(f64),
}

/// Random value `k + u` with `u` kept away from cell boundaries.
fn off_grid(rng: &mut impl Rng, span: i32) -> f64 {
    rng.random_range(-span..=span) as f64 + rng.random_range(0.05..0.95)
}

/// Redraw every parameter as U(−s, s) with s = scale / sqrt(fan_in), so
/// zero-initialized layers carry signal and deep stacks stay O(1).
pub fn randomize(store: &mut ParamStore<f64>, rng: &mut impl Rng, scale: f64) {
    for t in store.tensors_mut() {
        let sh = t.shape();
        let fan_in = if sh.h * sh.w > 1 || sh.n > 1 {
            sh.c * sh.h * sh.w
        } else {
            1
        };
        let s = scale / (fan_in as f64).sqrt();
        for v in t.data_mut() {
            *v = rng.random_range(-s..s);
        }
    }
}

pub fn check_conv2d(gc: &GradCheck, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dil = [1, 2][(seed % 2) as usize];
    let stride = [1, 2][(seed / 2 % 2) as usize];
    let inputs = [
        uniform(Shape::new(2, 3, 8, 8), &mut rng, -1.0, 1.0),
        uniform(Shape::new(4, 3, 3, 3), &mut rng, -1.0, 1.0),
        uniform(Shape::new(1, 4, 1, 1), &mut rng, -1.0, 1.0),
    ];
    gc.check("conv2d", seed, &inputs, &[true; 3], |g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), ConvArgs::new(stride, dil, dil))
    })
}

pub fn check_deconv2d(gc: &GradCheck, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = [
        uniform(Shape::new(2, 3, 4, 5), &mut rng, -1.0, 1.0),
        uniform(Shape::new(3, 2, 3, 3), &mut rng, -1.0, 1.0),
        uniform(Shape::new(1, 2, 1, 1), &mut rng, -1.0, 1.0),
    ];
    gc.check("deconv2d", seed, &inputs, &[true; 3], |g, v| {
        g.deconv2d(v[0], v[1], Some(v[2]), 2, 1)
    })
}

pub fn check_deform_conv2d(gc: &GradCheck, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dil = [1, 2, 4][(seed % 3) as usize];
    let side = 4 + (seed % 5) as usize;
    let x = uniform(Shape::new(1, 2, side, side), &mut rng, -1.0, 1.0);
    let w = uniform(Shape::new(3, 2, 3, 3), &mut rng, -1.0, 1.0);
    let b = uniform(Shape::new(1, 3, 1, 1), &mut rng, -1.0, 1.0);
    let off = Tensor::from_fn(Shape::new(1, 18, side, side), |_, _, _, _| {
        off_grid(&mut rng, 1)
    });
    let m = uniform(Shape::new(1, 9, side, side), &mut rng, 0.0, 1.0);
    gc.check(
        "deform_conv2d",
        seed,
        &[x, w, b, off, m],
        &[true; 5],
        |g, v| g.deform_conv2d(v[0], v[1], Some(v[2]), Some(v[3]), v[4], dil),
    )
}

pub fn check_deform_zero_offset(gc: &GradCheck, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(Shape::new(2, 2, 6, 6), &mut rng, -1.0, 1.0);
    let w = uniform(Shape::new(2, 2, 3, 3), &mut rng, -1.0, 1.0);
    let m = uniform(Shape::new(2, 9, 6, 6), &mut rng, 0.0, 1.0);
    gc.check(
        "deform_conv2d(zero offsets)",
        seed,
        &[x, w, m],
        &[true; 3],
        |g, v| g.deform_conv2d(v[0], v[1], None, None, v[2], 1),
    )
}

/// Generator conv → split → sigmoid → deformable conv.
pub fn check_offset_generator(gc: &GradCheck, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = BranchSpec {
        slot: 3,
        copy: 0,
        dilation: 2,
        zero_offset: false,
    };
    let mut store = ParamStore::<f64>::new();
    let branch = DeformBranch::new(&mut store, &mut rng, "b", 3, spec);
    randomize(&mut store, &mut rng, 1.5);
    let mut inputs = vec![uniform(Shape::new(1, 3, 7, 7), &mut rng, -1.0, 1.0)];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    let diff = vec![true; inputs.len()];
    gc.check("offset generator+deform", seed, &inputs, &diff, |g, v| {
        let p = Bound::from_vars(v[1..].to_vec());
        branch.forward(g, &p, v[0])
    })
}

pub fn check_dynamic_filter(gc: &GradCheck, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = uniform(Shape::new(1, 2, 5, 5), &mut rng, -1.0, 1.0);
    let k = uniform(Shape::new(1, 9, 5, 5), &mut rng, -1.0, 1.0);
    gc.check("apply_dynamic_filter", seed, &[f, k], &[true; 2], |g, v| {
        g.apply_dynamic_filter(v[0], v[1])
    })
}

pub fn check_softmax(gc: &GradCheck, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(Shape::new(2, 4, 3, 3), &mut rng, -2.0, 2.0);
    gc.check("softmax_channels", seed, &[x], &[true], |g, v| {
        g.softmax_channels(v[0])
    })
}

pub fn check_pointwise(gc: &GradCheck, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = uniform(Shape::new(1, 3, 4, 4), &mut rng, -1.0, 1.0);
    let b = uniform(Shape::new(1, 3, 4, 4), &mut rng, -1.0, 1.0);
    let attn = uniform(Shape::new(1, 1, 4, 4), &mut rng, 0.0, 1.0);
    let t = uniform(Shape::new(1, 4, 4, 4), &mut rng, -1.0, 1.0);
    gc.check(
        "sigmoid/mul/concat/mse",
        seed,
        &[a, b, attn, t],
        &[true; 4],
        |g, v| {
            let s = g.sigmoid(v[0])?;
            let m = g.mul(s, v[1])?;
            let w = g.mul_channel(v[2], m)?;
            let d = g.sub(w, v[1])?;
            let c = g.concat_channels(&[d, v[2]])?;
            let c = g.scale(c, 0.5)?;
            g.mse(c, v[3])
        },
    )
}

/// AFIM attention followed by the weighted fusion.
pub fn check_afim(gc: &GradCheck, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (width, b) = (3, 4);
    let mut store = ParamStore::<f64>::new();
    let afim = Afim::new(&mut store, &mut rng, "afim", width, b);
    randomize(&mut store, &mut rng, 1.5);
    let mut inputs: Vec<Tensor<f64>> = (0..b)
        .map(|_| uniform(Shape::new(1, width, 5, 5), &mut rng, -1.0, 1.0))
        .collect();
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    let diff = vec![true; inputs.len()];
    gc.check("afim+fusion", seed, &inputs, &diff, |g, v| {
        let p = Bound::from_vars(v[b..].to_vec());
        let attn = afim.forward(g, &p, &v[..b])?;
        fuse(g, attn, &v[..b])
    })
}

/// Width-4 deblurring network with one ASPDC module on an 8×8 input.
pub fn check_micro_deblur(gc: &GradCheck, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = DeblurConfig {
        width: 4,
        n_modules: 1,
        aspdc: AspdcConfig::default(),
    };
    let (net, mut store) = DeblurNet::init::<f64>(&cfg, seed)?;
    randomize(&mut store, &mut rng, 1.5);
    let mut inputs = vec![uniform(Shape::new(1, 3, 8, 8), &mut rng, -1.0, 1.0)];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    let diff = vec![true; inputs.len()];
    let gc = GradCheck {
        max_per_input: 6,
        ..gc.clone()
    };
    gc.check("micro deblur net", seed, &inputs, &diff, |g, v| {
        let p = Bound::from_vars(v[1..].to_vec());
        Ok(net.forward(g, &p, v[0])?.deblurred)
    })
}

pub fn check_micro_reblur(gc: &GradCheck, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ReblurConfig {
        width: 4,
        residual: true,
    };
    let (net, mut store) = ReblurNet::init::<f64>(&cfg, seed)?;
    randomize(&mut store, &mut rng, 1.5);
    let mut inputs = vec![
        uniform(Shape::new(1, 3, 8, 8), &mut rng, -1.0, 1.0),
        uniform(Shape::new(1, 3, 8, 8), &mut rng, -1.0, 1.0),
    ];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    let diff = vec![true; inputs.len()];
    let gc = GradCheck {
        max_per_input: 6,
        ..gc.clone()
    };
    gc.check("micro reblur net", seed, &inputs, &diff, |g, v| {
        let p = Bound::from_vars(v[2..].to_vec());
        Ok(net.forward(g, &p, v[0], v[1])?.reblurred)
    })
}

/// Coordinate and value gradients of bilinear sampling at 20 random
/// fractional locations.
pub fn check_bilinear(gc: &GradCheck, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = uniform(Shape::new(1, 2, 6, 7), &mut rng, -1.0, 1.0);
    let h = gc.step;
    let (mut max_err, mut bad) = (0.0f64, 0);
    let mut checked = 0;
    for _ in 0..20 {
        let y = rng.random_range(-1..6) as f64 + rng.random_range(0.05..0.95);
        let x = rng.random_range(-1..7) as f64 + rng.random_range(0.05..0.95);
        let c = rng.random_range(0..2);
        let (_, dy, dx) = bilinear_sample_grad(&img, y, x, 0, c);
        let fy = (bilinear_sample(&img, y + h, x, 0, c) - bilinear_sample(&img, y - h, x, 0, c))
            / (2.0 * h);
        let fx = (bilinear_sample(&img, y, x + h, 0, c) - bilinear_sample(&img, y, x - h, 0, c))
            / (2.0 * h);
        for (a, n) in [(dy, fy), (dx, fx)] {
            let e = rel_err(a, n, gc.floor);
            max_err = max_err.max(e);
            checked += 1;
            if e > gc.tol {
                bad += 1;
            }
        }
    }
    // Value gradient through the deformable conv of a single delta tap.
    let base = check_deform_conv2d(gc, seed)?;
    Ok(CheckReport {
        name: "bilinear_sample".into(),
        seed,
        max_rel_err: max_err.max(base.max_rel_err),
        checked: checked + base.checked,
        skipped: base.skipped,
        passed: bad == 0 && base.passed,
    })
}

pub type CheckFn = fn(&GradCheck, u64) -> Result<CheckReport>;

/// Every check in the suite, by name.
pub const SUITE: &[(&str, CheckFn)] = &[
    ("conv2d", check_conv2d),
    ("deconv2d", check_deconv2d),
    ("bilinear_sample", check_bilinear),
    ("deform_conv2d", check_deform_conv2d),
    ("deform_conv2d_zero_offset", check_deform_zero_offset),
    ("offset_generator", check_offset_generator),
    ("apply_dynamic_filter", check_dynamic_filter),
    ("softmax_channels", check_softmax),
    ("pointwise", check_pointwise),
    ("afim", check_afim),
    ("micro_deblur", check_micro_deblur),
    ("micro_reblur", check_micro_reblur),
];

/// Run every check for every seed, reporting as each finishes.
pub fn run_suite(
    gc: &GradCheck,
    seeds: &[u64],
    mut on_report: impl FnMut(&CheckReport),
) -> Result<Vec<CheckReport>> {
    if seeds.is_empty() {
        return Err(Error::contract("gradcheck", "no seeds"));
    }
    let mut out = Vec::new();
    for (_, f) in SUITE {
        for &seed in seeds {
            let r = f(gc, seed)?;
            on_report(&r);
            out.push(r);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catches_a_wrong_gradient() {
        // d/dx of relu(x)·x is not relu(x); fake it with a detached factor.
        let gc = GradCheck::default();
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![0.3, 0.7, 1.1]).unwrap();
        let r = gc
            .check("square", 0, std::slice::from_ref(&x), &[true], |g, v| {
                let c = g.constant(g.value(v[0]).clone());
                g.mul(v[0], c)
            })
            .unwrap();
        assert!(!r.passed);
        let ok = gc
            .check("square", 0, &[x], &[true], |g, v| g.mul(v[0], v[0]))
            .unwrap();
        assert!(ok.passed, "{ok}");
    }

    #[test]
    fn relu_kink_uses_one_sided_difference() {
        let gc = GradCheck::default();
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 4), vec![0.0004, -0.5, 0.5, 1.0]).unwrap();
        let r = gc
            .check("relu", 0, &[x], &[true], |g, v| g.relu(v[0]))
            .unwrap();
        assert_eq!(r.skipped, 0);
        assert!(r.passed, "{r}");
        // kinks on both sides of x, resolved at the finer step
        let y = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![5e-5]).unwrap();
        let lenient = GradCheck {
            max_skip_fraction: 1.0,
            ..gc.clone()
        };
        let r = lenient
            .check("relu", 0, &[y], &[true], |g, v| {
                let a = g.relu(v[0])?;
                let shifted = g.constant(Tensor::full(Shape::new(1, 1, 1, 1), 0.0015));
                let b = g.sub(v[0], shifted)?;
                let b = g.relu(b)?;
                let c = g.add(v[0], shifted)?;
                let c = g.relu(c)?;
                let s = g.add(a, b)?;
                g.sub(s, c)
            })
            .unwrap();
        assert_eq!(r.skipped, 1);
        assert!(r.passed, "{r}");
    }
}
