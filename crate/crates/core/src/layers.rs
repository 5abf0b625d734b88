//! Convolution and normalization layers built on the autodiff graph.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Shape, Tensor};

fn normal_tensor<T: Scalar, R: Rng>(rng: &mut R, shape: Shape, std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_, _, _, _| {
        let v: f64 = rng.sample(StandardNormal);
        T::lit(v * std)
    })
}

/// Same-padded convolution with an odd square kernel.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv {
    /// He-normal initialised convolution.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        bias: bool,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        Self::with_std(store, rng, name, in_channels, out_channels, kernel, bias, (2.0 / fan_in).sqrt())
    }

    /// 1×1 output head with a variance-preserving initialisation scaled
    /// by `gain`.
    pub fn head<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        gain: f64,
    ) -> Self {
        Self::with_std(store, rng, name, in_channels, out_channels, 1, true, gain * (1.0 / in_channels as f64).sqrt())
    }

    #[allow(clippy::too_many_arguments)]
    fn with_std<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        bias: bool,
        std: f64,
    ) -> Self {
        let weight = store.add_param(
            format!("{name}.weight"),
            normal_tensor(rng, Shape::new(out_channels, in_channels, kernel, kernel), std),
        );
        let bias = bias.then(|| store.add_param(format!("{name}.bias"), Tensor::zeros(Shape::new(out_channels, 1, 1, 1))));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let cs = Shape::new(channels, 1, 1, 1);
        Self {
            gamma: store.add_param(format!("{name}.gamma"), Tensor::full(cs, T::one())),
            beta: store.add_param(format!("{name}.beta"), Tensor::zeros(cs)),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(cs)),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(cs, T::one())),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        g.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var)
    }
}

/// 3×3 convolution, batch norm, ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub norm: BatchNorm,
}

impl ConvBnRelu {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Self {
        Self {
            conv: Conv::new(store, rng, &format!("{name}.conv"), in_channels, out_channels, 3, false),
            norm: BatchNorm::new(store, &format!("{name}.bn"), out_channels),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let y = self.conv.forward(g, x);
        let y = self.norm.forward(g, y);
        g.relu(y)
    }
}

/// Two [`ConvBnRelu`] layers: the unit of work at every resolution level.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub first: ConvBnRelu,
    pub second: ConvBnRelu,
}

impl ConvBlock {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Self {
        Self {
            first: ConvBnRelu::new(store, rng, &format!("{name}.0"), in_channels, out_channels),
            second: ConvBnRelu::new(store, rng, &format!("{name}.1"), out_channels, out_channels),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let y = self.first.forward(g, x);
        self.second.forward(g, y)
    }
}

/// Decoder stage: upsample coarse features, convolve, concatenate with a
/// same-resolution skip input, then a [`ConvBlock`].
#[derive(Debug, Clone)]
pub struct UpStage {
    pub up: ConvBnRelu,
    pub block: ConvBlock,
}

impl UpStage {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        coarse_channels: usize,
        skip_channels: usize,
        out_channels: usize,
    ) -> Self {
        Self {
            up: ConvBnRelu::new(store, rng, &format!("{name}.up"), coarse_channels, out_channels),
            block: ConvBlock::new(store, rng, &format!("{name}.block"), out_channels + skip_channels, out_channels),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, coarse: Var, skip: Var) -> Var {
        let u = g.upsample(coarse, 2);
        let u = self.up.forward(g, u);
        let cat = g.concat(&[u, skip]);
        self.block.forward(g, cat)
    }
}
