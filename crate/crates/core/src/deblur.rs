//! One-stage deblurring network.
//!
//! Head: 3×3 conv to the base width, two ResBlocks at full resolution, then
//! two stride-2 convs doubling the width each time. Middle: a stack of ASPDC
//! modules at 4× the base width. Tail: two stride-2 deconvs halving the width
//! and a final 3×3 conv to RGB. The network predicts a residual that is added
//! to the blurred input.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aspdc::{AspdcConfig, AspdcStack, StackOutput};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Conv, Deconv, ResBlock};
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::{Real, Tensor};

/// Spatial dims must be a multiple of this.
pub const DEBLUR_ALIGN: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeblurConfig {
    /// Channels at full resolution; the ASPDC stack runs at 4× this.
    pub width: usize,
    pub n_modules: usize,
    pub aspdc: AspdcConfig,
}

impl Default for DeblurConfig {
    /// Full-size network: base width 32, six ASPDC modules.
    fn default() -> Self {
        DeblurConfig {
            width: 32,
            n_modules: 6,
            aspdc: AspdcConfig::default(),
        }
    }
}

impl DeblurConfig {
    /// Laptop-scale network used for desk training runs.
    pub fn desk() -> Self {
        DeblurConfig {
            width: 8,
            n_modules: 2,
            aspdc: AspdcConfig::default(),
        }
    }

    pub fn bottleneck_width(&self) -> usize {
        self.width * 4
    }
}

#[derive(Clone, Debug)]
pub struct DeblurNet {
    pub cfg: DeblurConfig,
    pub head_in: Conv,
    pub head_res: [ResBlock; 2],
    pub down: [Conv; 2],
    pub stack: AspdcStack,
    pub up: [Deconv; 2],
    pub out: Conv,
}

#[derive(Clone, Debug)]
pub struct DeblurOutput {
    /// `I_b + residual`, unclamped.
    pub deblurred: Var,
    pub residual: Var,
    pub stack: StackOutput,
}

impl DeblurNet {
    pub fn build<S: Real>(
        cfg: &DeblurConfig,
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = cfg.width;
        if w == 0 {
            return Err(Error::Config("deblur width must be positive".into()));
        }
        let x = Init::Xavier;
        let head_in = Conv::new(store, rng, "deblur.head.in", 3, w, 3, 1, 1, x);
        let head_res = [
            ResBlock::new(store, rng, "deblur.head.res0", w),
            ResBlock::new(store, rng, "deblur.head.res1", w),
        ];
        let down = [
            Conv::new(store, rng, "deblur.head.down0", w, 2 * w, 3, 2, 1, x),
            Conv::new(store, rng, "deblur.head.down1", 2 * w, 4 * w, 3, 2, 1, x),
        ];
        let stack = AspdcStack::new(store, rng, "deblur.stack", 4 * w, cfg.n_modules, &cfg.aspdc)?;
        let up = [
            Deconv::new(store, rng, "deblur.tail.up0", 4 * w, 2 * w),
            Deconv::new(store, rng, "deblur.tail.up1", 2 * w, w),
        ];
        // Zero so that training starts from the identity mapping.
        let out = Conv::new(store, rng, "deblur.tail.out", w, 3, 3, 1, 1, Init::Zeros);
        Ok(DeblurNet {
            cfg: cfg.clone(),
            head_in,
            head_res,
            down,
            stack,
            up,
            out,
        })
    }

    /// Build with freshly initialized parameters.
    pub fn init<S: Real>(cfg: &DeblurConfig, seed: u64) -> Result<(Self, ParamStore<S>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Self::build(cfg, &mut store, &mut rng)?;
        Ok((net, store))
    }

    pub fn forward<S: Real>(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        blurred: Var,
    ) -> Result<DeblurOutput> {
        let s = g.shape(blurred);
        if s.c != 3
            || !s.h.is_multiple_of(DEBLUR_ALIGN)
            || !s.w.is_multiple_of(DEBLUR_ALIGN)
            || s.h == 0
            || s.w == 0
        {
            return Err(Error::contract(
                "deblur_forward",
                format!("expected RGB input with dims divisible by {DEBLUR_ALIGN}, got {s}"),
            ));
        }
        let mut h = self.head_in.forward(g, p, blurred)?;
        h = g.relu(h)?;
        for rb in &self.head_res {
            h = rb.forward(g, p, h)?;
        }
        for d in &self.down {
            h = d.forward(g, p, h)?;
            h = g.relu(h)?;
        }
        let stack = self.stack.forward(g, p, h)?;
        h = stack.output;
        for u in &self.up {
            h = u.forward(g, p, h)?;
            h = g.relu(h)?;
        }
        let residual = self.out.forward(g, p, h)?;
        let deblurred = g.add(blurred, residual)?;
        Ok(DeblurOutput {
            deblurred,
            residual,
            stack,
        })
    }

    /// Inference on a batch: returns the clamped deblurred images and the
    /// attention maps of the last ASPDC module (if it has AFIM).
    pub fn infer(
        &self,
        store: &ParamStore<f32>,
        blurred: &Tensor<f32>,
    ) -> Result<(Tensor<f32>, Option<Tensor<f32>>)> {
        let mut g = Graph::new();
        let p = g.bind(store, false);
        let x = g.constant(blurred.clone());
        let out = self.forward(&mut g, &p, x)?;
        let attn = out
            .stack
            .modules
            .last()
            .and_then(|m| m.attention)
            .map(|a| g.value(a).clone());
        Ok((g.value(out.deblurred).clamp(0.0, 1.0), attn))
    }
}

/// Mean squared error between deblurred output and sharp target.
pub fn deblurring_loss<S: Real>(g: &mut Graph<S>, deblurred: Var, sharp: Var) -> Result<Var> {
    g.mse(deblurred, sharp)
}
