//! Reblurring network with dynamic local filters.
//!
//! Two branches run the same encoder-decoder weights. The upper branch sees
//! `[blurred, sharp]`, the lower branch `[sharp, sharp]`. After each of the
//! six conv/deconv-resblock stages, a 3×3 conv on the upper features predicts
//! a per-pixel 3×3 filter that is applied to every channel of the lower
//! features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::dynamic::FILTER_TAPS;
use crate::layers::{Conv, Deconv, ResBlock};
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::{Real, Shape, Tensor};

/// Spatial dims must be a multiple of this.
pub const REBLUR_ALIGN: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReblurConfig {
    /// Channels at full resolution, doubled at each of the three downscales.
    pub width: usize,
    /// Predict a correction on top of the sharp-like input instead of the
    /// image itself.
    pub residual: bool,
}

impl Default for ReblurConfig {
    fn default() -> Self {
        ReblurConfig {
            width: 16,
            residual: true,
        }
    }
}

impl ReblurConfig {
    pub fn desk() -> Self {
        ReblurConfig {
            width: 8,
            residual: true,
        }
    }
}

#[derive(Clone, Debug)]
enum Scale {
    Down(Conv),
    Up(Deconv),
}

#[derive(Clone, Debug)]
pub struct Stage {
    scale: Scale,
    res: ResBlock,
}

impl Stage {
    fn forward<S: Real>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let h = match &self.scale {
            Scale::Down(c) => c.forward(g, p, x)?,
            Scale::Up(d) => d.forward(g, p, x)?,
        };
        let h = g.relu(h)?;
        self.res.forward(g, p, h)
    }
}

#[derive(Clone, Debug)]
pub struct ReblurNet {
    pub cfg: ReblurConfig,
    pub stem: Conv,
    pub stages: Vec<Stage>,
    pub filter_gens: Vec<Conv>,
    pub out: Conv,
}

#[derive(Clone, Debug)]
pub struct ReblurOutput {
    pub reblurred: Var,
    /// Dynamic filter fields, one per stage.
    pub filters: Vec<Var>,
}

impl ReblurNet {
    pub fn build<S: Real>(
        cfg: &ReblurConfig,
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = cfg.width;
        if w == 0 {
            return Err(Error::Config("reblur width must be positive".into()));
        }
        let stem = Conv::new(store, rng, "reblur.stem", 6, w, 3, 1, 1, Init::Xavier);
        let widths = [w, 2 * w, 4 * w, 8 * w, 4 * w, 2 * w, w];
        let mut stages = Vec::new();
        for i in 0..6 {
            let (ci, co) = (widths[i], widths[i + 1]);
            let name = format!("reblur.stage{i}");
            let scale = if i < 3 {
                Scale::Down(Conv::new(
                    store,
                    rng,
                    &format!("{name}.down"),
                    ci,
                    co,
                    3,
                    2,
                    1,
                    Init::Xavier,
                ))
            } else {
                Scale::Up(Deconv::new(store, rng, &format!("{name}.up"), ci, co))
            };
            let res = ResBlock::new(store, rng, &format!("{name}.res"), co);
            stages.push(Stage { scale, res });
        }
        let mut filter_gens = Vec::new();
        for (i, &c) in widths[1..].iter().enumerate() {
            let gen = Conv::new(
                store,
                rng,
                &format!("reblur.filter{i}"),
                c,
                FILTER_TAPS,
                3,
                1,
                1,
                Init::Zeros,
            );
            // Start from identity (delta) filters.
            let mut bias = vec![S::zero(); FILTER_TAPS];
            bias[FILTER_TAPS / 2] = S::one();
            *store.get_mut(gen.bias) = Tensor::from_vec(Shape::new(1, FILTER_TAPS, 1, 1), bias)?;
            filter_gens.push(gen);
        }
        let out_init = if cfg.residual {
            Init::Zeros
        } else {
            Init::Xavier
        };
        let out = Conv::new(store, rng, "reblur.out", w, 3, 3, 1, 1, out_init);
        Ok(ReblurNet {
            cfg: cfg.clone(),
            stem,
            stages,
            filter_gens,
            out,
        })
    }

    pub fn init<S: Real>(cfg: &ReblurConfig, seed: u64) -> Result<(Self, ParamStore<S>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Self::build(cfg, &mut store, &mut rng)?;
        Ok((net, store))
    }

    pub fn forward<S: Real>(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        sharp_like: Var,
        blurred: Var,
    ) -> Result<ReblurOutput> {
        self.forward_split(g, p, p, sharp_like, blurred)
    }

    /// Forward with separately bound weights for the upper and lower
    /// branches. With both set to the same binding this is the tied network;
    /// with two bindings of one store it is the untied equivalent.
    pub fn forward_split<S: Real>(
        &self,
        g: &mut Graph<S>,
        upper_p: &Bound,
        lower_p: &Bound,
        sharp_like: Var,
        blurred: Var,
    ) -> Result<ReblurOutput> {
        let (ss, bs) = (g.shape(sharp_like), g.shape(blurred));
        if ss != bs {
            return Err(Error::shapes("reblur_forward", ss, bs));
        }
        if ss.c != 3
            || ss.h % REBLUR_ALIGN != 0
            || ss.w % REBLUR_ALIGN != 0
            || ss.h == 0
            || ss.w == 0
        {
            return Err(Error::contract(
                "reblur_forward",
                format!("expected RGB input with dims divisible by {REBLUR_ALIGN}, got {ss}"),
            ));
        }
        let upper_in = g.concat_channels(&[blurred, sharp_like])?;
        let lower_in = g.concat_channels(&[sharp_like, sharp_like])?;
        let mut up = self.stem.forward(g, upper_p, upper_in)?;
        up = g.relu(up)?;
        let mut low = self.stem.forward(g, lower_p, lower_in)?;
        low = g.relu(low)?;
        let mut filters = Vec::with_capacity(self.stages.len());
        for (stage, gen) in self.stages.iter().zip(&self.filter_gens) {
            up = stage.forward(g, upper_p, up)?;
            low = stage.forward(g, lower_p, low)?;
            let f = gen.forward(g, upper_p, up)?;
            low = g.apply_dynamic_filter(low, f)?;
            filters.push(f);
        }
        let mut out = self.out.forward(g, lower_p, low)?;
        if self.cfg.residual {
            out = g.add(sharp_like, out)?;
        }
        Ok(ReblurOutput {
            reblurred: out,
            filters,
        })
    }

    /// Clamped inference.
    pub fn infer(
        &self,
        store: &ParamStore<f32>,
        sharp_like: &Tensor<f32>,
        blurred: &Tensor<f32>,
    ) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let p = g.bind(store, false);
        let s = g.constant(sharp_like.clone());
        let b = g.constant(blurred.clone());
        let out = self.forward(&mut g, &p, s, b)?;
        Ok(g.value(out.reblurred).clamp(0.0, 1.0))
    }
}

/// Mean squared error between reblurred output and the blurred input.
pub fn reblurring_loss<S: Real>(g: &mut Graph<S>, reblurred: Var, blurred: Var) -> Result<Var> {
    g.mse(reblurred, blurred)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(seed: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
            (((seed * 13 + c * 17 + y * 7 + x * 3) % 23) as f64) / 22.0
        })
    }

    #[test]
    fn output_shape_matches_input() {
        let (net, store) = ReblurNet::init::<f32>(&ReblurConfig::desk(), 0).unwrap();
        let s = img(1, 16, 24).cast::<f32>();
        let b = img(2, 16, 24).cast::<f32>();
        assert_eq!(net.infer(&store, &s, &b).unwrap().shape(), s.shape());
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let (net, store) = ReblurNet::init::<f32>(&ReblurConfig::desk(), 0).unwrap();
        let s = img(1, 16, 16).cast::<f32>();
        let b = img(2, 16, 24).cast::<f32>();
        assert!(matches!(
            net.infer(&store, &s, &b),
            Err(Error::Dimension { .. })
        ));
        assert!(net
            .infer(&store, &img(1, 12, 12).cast(), &img(1, 12, 12).cast())
            .is_err());
    }

    #[test]
    fn filter_generators_emit_nine_taps() {
        let (net, store) = ReblurNet::init::<f64>(&ReblurConfig::desk(), 0).unwrap();
        let mut g = Graph::new();
        let p = g.bind(&store, true);
        let s = g.constant(img(1, 16, 16));
        let b = g.constant(img(2, 16, 16));
        let out = net.forward(&mut g, &p, s, b).unwrap();
        assert_eq!(out.filters.len(), 6);
        for f in out.filters {
            assert_eq!(g.shape(f).c, 9);
            // identity filters at initialization
            let v = g.value(f);
            assert!(v.plane(0, 4).iter().all(|&x| x == 1.0));
            assert!(v.plane(0, 0).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn trunk_is_counted_once() {
        let w = 4;
        let (_, store) = ReblurNet::init::<f32>(
            &ReblurConfig {
                width: w,
                residual: true,
            },
            0,
        )
        .unwrap();
        let conv = |ci: usize, co: usize| co * ci * 9 + co;
        let widths = [w, 2 * w, 4 * w, 8 * w, 4 * w, 2 * w, w];
        let mut want = conv(6, w) + conv(w, 3);
        for i in 0..6 {
            let (ci, co) = (widths[i], widths[i + 1]);
            want += conv(ci, co) + 2 * conv(co, co) + conv(co, 9);
        }
        assert_eq!(store.num_scalars(), want);
    }
}
