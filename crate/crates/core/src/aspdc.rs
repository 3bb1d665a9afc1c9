//! Atrous spatial pyramid deformable convolution.
//!
//! An ASPDC module runs up to four modulated deformable branches over the
//! same feature map, each with its own dilation rate and its own offset /
//! modulation generator, then fuses them with per-pixel attention weights
//! that sum to one across branches (AFIM). Branch 1 samples the regular grid
//! (zero offsets) and only learns a modulation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::Conv;
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{Real, Shape};

pub const DEFAULT_DILATIONS: [usize; 4] = [1, 1, 2, 4];

/// Taps of the 3×3 deformable kernel.
pub const TAPS: usize = 9;

/// Replace one branch with `copies` independently parameterized copies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Duplicate {
    /// 1-based branch slot.
    pub branch: usize,
    pub copies: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AspdcConfig {
    pub branch_enabled: [bool; 4],
    pub branch_dilations: [usize; 4],
    pub duplicate: Option<Duplicate>,
    pub afim_enabled: bool,
}

impl Default for AspdcConfig {
    fn default() -> Self {
        AspdcConfig {
            branch_enabled: [true; 4],
            branch_dilations: DEFAULT_DILATIONS,
            duplicate: None,
            afim_enabled: true,
        }
    }
}

/// One instantiated branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchSpec {
    pub slot: usize,
    pub copy: usize,
    pub dilation: usize,
    pub zero_offset: bool,
}

impl AspdcConfig {
    /// Module layouts of the branch ablation: version 1 is branch 1 alone,
    /// 2–7 add subsets of branches 2–4, 8–10 triplicate one of them, 11 drops
    /// the attention fusion and 12 is the full module.
    pub fn ablation_version(version: u8) -> Result<Self> {
        let on = |b: &[usize]| {
            let mut e = [false; 4];
            for &i in b {
                e[i - 1] = true;
            }
            e
        };
        let dup = |b: usize| {
            Some(Duplicate {
                branch: b,
                copies: 3,
            })
        };
        let (enabled, duplicate, afim) = match version {
            1 => (on(&[1]), None, false),
            2 => (on(&[1, 2]), None, true),
            3 => (on(&[1, 3]), None, true),
            4 => (on(&[1, 4]), None, true),
            5 => (on(&[1, 2, 3]), None, true),
            6 => (on(&[1, 2, 4]), None, true),
            7 => (on(&[1, 3, 4]), None, true),
            8 => (on(&[1, 2]), dup(2), true),
            9 => (on(&[1, 3]), dup(3), true),
            10 => (on(&[1, 4]), dup(4), true),
            11 => (on(&[1, 2, 3, 4]), None, false),
            12 => (on(&[1, 2, 3, 4]), None, true),
            v => {
                return Err(Error::Config(format!(
                    "no ablation version {v} (expected 1..=12)"
                )))
            }
        };
        Ok(AspdcConfig {
            branch_enabled: enabled,
            branch_dilations: DEFAULT_DILATIONS,
            duplicate,
            afim_enabled: afim,
        })
    }

    pub fn branches(&self) -> Result<Vec<BranchSpec>> {
        if !self.branch_enabled.iter().any(|&e| e) {
            return Err(Error::Config(
                "at least one ASPDC branch must be enabled".into(),
            ));
        }
        if self.branch_dilations.contains(&0) {
            return Err(Error::Config("branch dilations must be positive".into()));
        }
        if let Some(d) = self.duplicate {
            if !(1..=4).contains(&d.branch) || !self.branch_enabled[d.branch - 1] || d.copies == 0 {
                return Err(Error::Config(format!(
                    "duplicate branch {} x{} must name an enabled branch with at least one copy",
                    d.branch, d.copies
                )));
            }
        }
        let mut out = Vec::new();
        for slot in 1..=4 {
            if !self.branch_enabled[slot - 1] {
                continue;
            }
            let copies = match self.duplicate {
                Some(d) if d.branch == slot => d.copies,
                _ => 1,
            };
            for copy in 0..copies {
                out.push(BranchSpec {
                    slot,
                    copy,
                    dilation: self.branch_dilations[slot - 1],
                    zero_offset: slot == 1,
                });
            }
        }
        Ok(out)
    }
}

/// Weights of one deformable branch plus its offset/modulation generator.
#[derive(Clone, Debug)]
pub struct DeformBranch {
    pub spec: BranchSpec,
    /// 3×3 conv at the branch dilation producing `2·9` offset channels
    /// followed by 9 modulation logits; the zero-offset branch produces only
    /// the 9 logits.
    pub generator: Conv,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DeformBranch {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        width: usize,
        spec: BranchSpec,
    ) -> Self {
        let gen_out = if spec.zero_offset { TAPS } else { 3 * TAPS };
        let generator = Conv::new(
            store,
            rng,
            &format!("{name}.gen"),
            width,
            gen_out,
            3,
            1,
            spec.dilation,
            Init::Zeros,
        );
        let weight = store.create(
            format!("{name}.weight"),
            Shape::new(width, width, 3, 3),
            Init::Xavier,
            rng,
        );
        let bias = store.create(
            format!("{name}.bias"),
            Shape::new(1, width, 1, 1),
            Init::Zeros,
            rng,
        );
        DeformBranch {
            spec,
            generator,
            weight,
            bias,
        }
    }

    /// Offsets (`None` for the zero-offset branch) and sigmoid modulation.
    pub fn offsets_modulation<S: Real>(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        feature: Var,
    ) -> Result<(Option<Var>, Var)> {
        let raw = self.generator.forward(g, p, feature)?;
        if self.spec.zero_offset {
            return Ok((None, g.sigmoid(raw)?));
        }
        let parts = g.split_channels(raw, &[2 * TAPS, TAPS])?;
        Ok((Some(parts[0]), g.sigmoid(parts[1])?))
    }

    pub fn forward<S: Real>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let (offsets, modulation) = self.offsets_modulation(g, p, x)?;
        let y = g.deform_conv2d(
            x,
            p[self.weight],
            Some(p[self.bias]),
            offsets,
            modulation,
            self.spec.dilation,
        )?;
        g.relu(y)
    }
}

/// Attention feature integration: concat → 1×1 conv → ReLU → 1×1 conv to
/// one logit per branch → softmax over branches.
#[derive(Clone, Debug)]
pub struct Afim {
    pub fuse: Conv,
    pub score: Conv,
}

impl Afim {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        width: usize,
        branches: usize,
    ) -> Self {
        Afim {
            fuse: Conv::new(
                store,
                rng,
                &format!("{name}.fuse"),
                branches * width,
                width,
                1,
                1,
                1,
                Init::Xavier,
            ),
            score: Conv::new(
                store,
                rng,
                &format!("{name}.score"),
                width,
                branches,
                1,
                1,
                1,
                Init::Xavier,
            ),
        }
    }

    /// Attention maps `(n, B, h, w)`; channel `i` weights branch `i`.
    pub fn forward<S: Real>(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        branch_outputs: &[Var],
    ) -> Result<Var> {
        let cat = g.concat_channels(branch_outputs)?;
        let h = self.fuse.forward(g, p, cat)?;
        let h = g.relu(h)?;
        let logits = self.score.forward(g, p, h)?;
        g.softmax_channels(logits)
    }
}

/// Output of one module.
#[derive(Clone, Debug)]
pub struct AspdcOutput {
    pub fused: Var,
    pub branches: Vec<Var>,
    /// `None` when the attention fusion is disabled.
    pub attention: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct AspdcModule {
    pub width: usize,
    pub branches: Vec<DeformBranch>,
    pub afim: Option<Afim>,
}

impl AspdcModule {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        width: usize,
        cfg: &AspdcConfig,
    ) -> Result<Self> {
        let specs = cfg.branches()?;
        let branches: Vec<_> = specs
            .iter()
            .map(|&spec| {
                let bname = if spec.copy == 0 {
                    format!("{name}.branch{}", spec.slot)
                } else {
                    format!("{name}.branch{}_{}", spec.slot, spec.copy)
                };
                DeformBranch::new(store, rng, &bname, width, spec)
            })
            .collect();
        let afim = cfg
            .afim_enabled
            .then(|| Afim::new(store, rng, &format!("{name}.afim"), width, branches.len()));
        Ok(AspdcModule {
            width,
            branches,
            afim,
        })
    }

    /// `f_o = Σ_i a_i ⊙ f_i`, or the plain mean of branch outputs without
    /// AFIM.
    pub fn forward<S: Real>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<AspdcOutput> {
        let c = g.shape(x).c;
        if c != self.width {
            return Err(Error::dims(
                "aspdc_forward",
                format!("{c} input channels"),
                format!("width {}", self.width),
            ));
        }
        let outs = self
            .branches
            .iter()
            .map(|b| b.forward(g, p, x))
            .collect::<Result<Vec<_>>>()?;
        match &self.afim {
            Some(afim) => {
                let attn = afim.forward(g, p, &outs)?;
                let fused = fuse(g, attn, &outs)?;
                Ok(AspdcOutput {
                    fused,
                    branches: outs,
                    attention: Some(attn),
                })
            }
            None => {
                let mut acc = outs[0];
                for &o in &outs[1..] {
                    acc = g.add(acc, o)?;
                }
                let fused = if outs.len() > 1 {
                    g.scale(acc, 1.0 / outs.len() as f64)?
                } else {
                    acc
                };
                Ok(AspdcOutput {
                    fused,
                    branches: outs,
                    attention: None,
                })
            }
        }
    }
}

/// Attention-weighted sum of branch outputs.
pub fn fuse<S: Real>(g: &mut Graph<S>, attention: Var, branches: &[Var]) -> Result<Var> {
    let b = g.shape(attention).c;
    if b != branches.len() {
        return Err(Error::dims(
            "afim fusion",
            format!("{b} attention maps"),
            format!("{} branches", branches.len()),
        ));
    }
    let maps = if b == 1 {
        vec![attention]
    } else {
        g.split_channels(attention, &vec![1; b])?
    };
    let mut acc = None;
    for (&a, &f) in maps.iter().zip(branches) {
        let term = g.mul_channel(a, f)?;
        acc = Some(match acc {
            None => term,
            Some(prev) => g.add(prev, term)?,
        });
    }
    Ok(acc.expect("at least one branch"))
}

/// Sequential ASPDC modules whose outputs are concatenated and reduced back
/// to the working width by a 1×1 conv.
#[derive(Clone, Debug)]
pub struct AspdcStack {
    pub modules: Vec<AspdcModule>,
    pub reduce: Conv,
}

#[derive(Clone, Debug)]
pub struct StackOutput {
    pub output: Var,
    pub modules: Vec<AspdcOutput>,
}

impl AspdcStack {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        width: usize,
        n_modules: usize,
        cfg: &AspdcConfig,
    ) -> Result<Self> {
        if n_modules == 0 {
            return Err(Error::Config(
                "the ASPDC stack needs at least one module".into(),
            ));
        }
        let modules = (0..n_modules)
            .map(|i| AspdcModule::new(store, rng, &format!("{name}.aspdc{i}"), width, cfg))
            .collect::<Result<Vec<_>>>()?;
        let reduce = Conv::new(
            store,
            rng,
            &format!("{name}.reduce"),
            n_modules * width,
            width,
            1,
            1,
            1,
            Init::Xavier,
        );
        Ok(AspdcStack { modules, reduce })
    }

    pub fn forward<S: Real>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<StackOutput> {
        let mut h = x;
        let mut outs = Vec::with_capacity(self.modules.len());
        for m in &self.modules {
            let o = m.forward(g, p, h)?;
            h = o.fused;
            outs.push(o);
        }
        let fused: Vec<Var> = outs.iter().map(|o| o.fused).collect();
        let cat = if fused.len() == 1 {
            fused[0]
        } else {
            g.concat_channels(&fused)?
        };
        let output = self.reduce.forward(g, p, cat)?;
        Ok(StackOutput {
            output,
            modules: outs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, rng: &mut impl Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    fn randomize(store: &mut ParamStore<f64>, rng: &mut impl Rng, scale: f64) {
        for t in store.tensors_mut() {
            for v in t.data_mut() {
                *v = rng.random_range(-scale..scale);
            }
        }
    }

    #[test]
    fn default_branch_layout() {
        let specs = AspdcConfig::default().branches().unwrap();
        let d: Vec<_> = specs.iter().map(|s| (s.dilation, s.zero_offset)).collect();
        assert_eq!(d, vec![(1, true), (1, false), (2, false), (4, false)]);
    }

    #[test]
    fn no_branches_is_a_config_error() {
        let cfg = AspdcConfig {
            branch_enabled: [false; 4],
            ..Default::default()
        };
        assert!(matches!(cfg.branches(), Err(Error::Config(_))));
        let cfg = AspdcConfig {
            branch_enabled: [true, false, true, true],
            duplicate: Some(Duplicate {
                branch: 2,
                copies: 3,
            }),
            ..Default::default()
        };
        assert!(cfg.branches().is_err());
    }

    #[test]
    fn single_branch_has_unit_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let cfg = AspdcConfig {
            branch_enabled: [false, false, true, false],
            ..Default::default()
        };
        let m = AspdcModule::new(&mut store, &mut rng, "m", 4, &cfg).unwrap();
        randomize(&mut store, &mut rng, 0.3);
        let mut g = Graph::new();
        let p = g.bind(&store, true);
        let x = g.constant(random(Shape::new(1, 4, 6, 6), &mut rng));
        let out = m.forward(&mut g, &p, x).unwrap();
        assert!(g
            .value(out.attention.unwrap())
            .data()
            .iter()
            .all(|&a| a == 1.0));
        assert_eq!(g.value(out.fused), g.value(out.branches[0]));
    }

    #[test]
    fn fusion_stays_in_branch_envelope() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let m = AspdcModule::new(&mut store, &mut rng, "m", 4, &AspdcConfig::default()).unwrap();
        randomize(&mut store, &mut rng, 0.3);
        let mut g = Graph::new();
        let p = g.bind(&store, true);
        let x = g.constant(random(Shape::new(2, 4, 8, 8), &mut rng));
        let out = m.forward(&mut g, &p, x).unwrap();
        let fo = g.value(out.fused).data();
        for (i, &f) in fo.iter().enumerate() {
            let vals: Vec<f64> = out.branches.iter().map(|&b| g.value(b).data()[i]).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(f >= lo - 1e-12 && f <= hi + 1e-12);
        }
        let a = g.value(out.attention.unwrap());
        for n in 0..2 {
            for y in 0..8 {
                for x in 0..8 {
                    let s: f64 = (0..4).map(|c| a.at(n, c, y, x)).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn identical_branches_fuse_to_themselves() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random(Shape::new(1, 3, 5, 5), &mut rng);
        let logits = random(Shape::new(1, 4, 5, 5), &mut rng);
        let mut g = Graph::<f64>::new();
        let fv = g.constant(f.clone());
        let l = g.constant(logits);
        let a = g.softmax_channels(l).unwrap();
        let out = fuse(&mut g, a, &[fv, fv, fv, fv]).unwrap();
        assert!(g.value(out).max_abs_diff(&f).unwrap() < 1e-12);
    }

    #[test]
    fn zero_score_layer_gives_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let m = AspdcModule::new(&mut store, &mut rng, "m", 4, &AspdcConfig::default()).unwrap();
        let afim = m.afim.clone().unwrap();
        *store.get_mut(afim.score.weight) = Tensor::zeros(store.get(afim.score.weight).shape());
        let mut g = Graph::new();
        let p = g.bind(&store, true);
        let x = g.constant(random(Shape::new(1, 4, 6, 6), &mut rng));
        let out = m.forward(&mut g, &p, x).unwrap();
        assert!(g
            .value(out.attention.unwrap())
            .data()
            .iter()
            .all(|&a| a == 0.25));
    }

    #[test]
    fn disabling_afim_keeps_branch_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::<f64>::new();
        let with = AspdcModule::new(&mut store, &mut rng, "m", 4, &AspdcConfig::default()).unwrap();
        randomize(&mut store, &mut rng, 0.3);
        let without = AspdcModule {
            afim: None,
            ..with.clone()
        };
        let x = random(Shape::new(1, 4, 6, 6), &mut rng);
        let mut g = Graph::new();
        let p = g.bind(&store, true);
        let xv = g.constant(x);
        let a = with.forward(&mut g, &p, xv).unwrap();
        let b = without.forward(&mut g, &p, xv).unwrap();
        for (&fa, &fb) in a.branches.iter().zip(&b.branches) {
            assert_eq!(g.value(fa), g.value(fb));
        }
        assert!(b.attention.is_none());
        let mean = Tensor::from_fn(g.shape(b.fused), |n, c, y, x| {
            b.branches
                .iter()
                .map(|&v| g.value(v).at(n, c, y, x))
                .sum::<f64>()
                / 4.0
        });
        assert!(g.value(b.fused).max_abs_diff(&mean).unwrap() < 1e-12);
    }

    #[test]
    fn stack_preserves_spatial_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for n_modules in [1, 2, 3] {
            let mut store = ParamStore::<f32>::new();
            let s = AspdcStack::new(
                &mut store,
                &mut rng,
                "s",
                4,
                n_modules,
                &AspdcConfig::default(),
            )
            .unwrap();
            let mut g = Graph::new();
            let p = g.bind(&store, true);
            let x = g.constant(Tensor::full(Shape::new(1, 4, 12, 8), 0.5));
            let out = s.forward(&mut g, &p, x).unwrap();
            assert_eq!(g.shape(out.output), Shape::new(1, 4, 12, 8));
            assert_eq!(out.modules.len(), n_modules);
        }
    }

    #[test]
    fn generator_starts_at_zero_offsets_half_modulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::<f32>::new();
        let spec = BranchSpec {
            slot: 4,
            copy: 0,
            dilation: 4,
            zero_offset: false,
        };
        let b = DeformBranch::new(&mut store, &mut rng, "b", 4, spec);
        let mut g = Graph::new();
        let p = g.bind(&store, true);
        let x = g.constant(Tensor::full(Shape::new(1, 4, 16, 16), 0.3));
        let (off, m) = b.offsets_modulation(&mut g, &p, x).unwrap();
        let off = off.unwrap();
        assert_eq!(g.shape(off), Shape::new(1, 18, 16, 16));
        assert!(g.value(off).data().iter().all(|&v| v == 0.0));
        assert!(g.value(m).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn ablation_topologies() {
        let width = 4;
        let count = |v: u8| {
            let cfg = AspdcConfig::ablation_version(v).unwrap();
            let mut store = ParamStore::<f32>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let m = AspdcModule::new(&mut store, &mut rng, "m", width, &cfg).unwrap();
            (m, store.num_scalars())
        };
        let conv = |ci: usize, co: usize, k: usize| co * ci * k * k + co;
        let zero_branch = conv(width, 9, 3) + conv(width, width, 3);
        let offset_branch = conv(width, 27, 3) + conv(width, width, 3);
        let afim = |b: usize| conv(b * width, width, 1) + conv(width, b, 1);

        let (m1, p1) = count(1);
        assert_eq!(m1.branches.len(), 1);
        assert!(m1.afim.is_none());
        assert_eq!(p1, zero_branch);

        let (m9, p9) = count(9);
        let dil: Vec<_> = m9.branches.iter().map(|b| b.spec.dilation).collect();
        assert_eq!(dil, vec![1, 2, 2, 2]);
        assert_eq!(p9, zero_branch + 3 * offset_branch + afim(4));

        let (m11, p11) = count(11);
        assert!(m11.afim.is_none());
        assert_eq!(p11, zero_branch + 3 * offset_branch);
        let (_, p12) = count(12);
        assert_eq!(p12, p11 + afim(4));
        assert!(AspdcConfig::ablation_version(13).is_err());
    }
}
