//! Convolution layers shared by both networks.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::kernels::conv::ConvArgs;
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{Real, Shape};

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub args: ConvArgs,
    pub kernel: usize,
}

impl Conv {
    /// `k × k` convolution with "same" padding for the given stride/dilation.
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        init: Init,
    ) -> Self {
        let weight = store.create(
            format!("{name}.weight"),
            Shape::new(c_out, c_in, kernel, kernel),
            init,
            rng,
        );
        let bias = store.create(
            format!("{name}.bias"),
            Shape::new(1, c_out, 1, 1),
            Init::Zeros,
            rng,
        );
        Conv {
            weight,
            bias,
            args: ConvArgs::new(stride, dilation * (kernel - 1) / 2, dilation),
            kernel,
        }
    }

    pub fn forward<S: Real>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p[self.weight], Some(p[self.bias]), self.args)
    }
}

/// 3×3 stride-2 transposed convolution doubling the resolution.
#[derive(Clone, Debug)]
pub struct Deconv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Deconv {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        let weight = store.create(
            format!("{name}.weight"),
            Shape::new(c_in, c_out, 3, 3),
            Init::Xavier,
            rng,
        );
        let bias = store.create(
            format!("{name}.bias"),
            Shape::new(1, c_out, 1, 1),
            Init::Zeros,
            rng,
        );
        Deconv { weight, bias }
    }

    pub fn forward<S: Real>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        g.deconv2d(x, p[self.weight], Some(p[self.bias]), 2, 1)
    }
}

/// `x + conv(relu(conv(x)))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl ResBlock {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
    ) -> Self {
        ResBlock {
            conv1: Conv::new(
                store,
                rng,
                &format!("{name}.conv1"),
                channels,
                channels,
                3,
                1,
                1,
                Init::Xavier,
            ),
            conv2: Conv::new(
                store,
                rng,
                &format!("{name}.conv2"),
                channels,
                channels,
                3,
                1,
                1,
                Init::Xavier,
            ),
        }
    }

    pub fn forward<S: Real>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, p, x)?;
        let h = g.relu(h)?;
        let h = self.conv2.forward(g, p, h)?;
        g.add(x, h)
    }
}
