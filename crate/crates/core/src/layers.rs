//! Convolutional building blocks shared by the generator, discriminator and
//! segmentation network.

use rand::Rng;

use crate::autodiff::{ConvGeom, Var};
use crate::error::Result;
use crate::params::{BatchNormParams, Binding, ParamId, ParamStore, Session};
use crate::tensor::Tensor;

/// How a convolution kernel is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform with bound `sqrt(6 / fan_in)`.
    He,
    /// Uniform with bound `1 / sqrt(fan_in)`.
    Fan,
    Zeros,
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        geom: ConvGeom,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let shape = [cout, cin, kernel, kernel];
        let fan_in = (cin * kernel * kernel) as f64;
        let w = match init {
            Init::He => Tensor::uniform(&shape, (6.0 / fan_in).sqrt(), rng)?,
            Init::Fan => Tensor::uniform(&shape, 1.0 / fan_in.sqrt(), rng)?,
            Init::Zeros => Tensor::zeros(&shape)?,
        };
        let weight = store.add(format!("{name}.weight"), w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout]).expect("cout >= 1")));
        Ok(Conv { weight, bias, geom })
    }

    /// A stride-1 1x1 convolution.
    pub fn pointwise(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::new(store, name, cin, cout, 1, ConvGeom::new(1, 1, 0), bias, init, rng)
    }

    pub fn forward(&self, s: &mut Session, p: &Binding, x: Var) -> Result<Var> {
        let w = p.var(self.weight);
        let y = s.graph.conv2d(x, w, self.geom)?;
        match self.bias {
            Some(b) => {
                let b = p.var(b);
                s.graph.channel_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// `relu(bn(conv(x)))` with a bias-free convolution.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNormParams,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        geom: ConvGeom,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let conv = Conv::new(store, &format!("{name}.conv"), cin, cout, kernel, geom, false, Init::He, rng)?;
        let bn = BatchNormParams::new(store, &format!("{name}.bn"), cout);
        Ok(ConvBnRelu { conv, bn })
    }

    pub fn forward(&self, s: &mut Session, p: &Binding, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, p, x)?;
        let y = s.batch_norm(p, y, &self.bn)?;
        Ok(s.graph.relu(y))
    }
}
