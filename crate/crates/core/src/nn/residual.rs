use rand::Rng;

use super::conv::{Conv, ConvSpec};
use super::norm::BatchNorm;
use super::params::{Forward, ParamStore};
use crate::error::Result;
use crate::tensor::{Real, Var};

/// Convolution (no bias) followed by batch norm and ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    conv: Conv,
    bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let spec = ConvSpec::new(in_channels, out_channels, kernel).with_bias(false);
        let conv = Conv::new(store, &format!("{name}.conv"), spec, rng)?;
        let bn = BatchNorm::new(store, &format!("{name}.bn"), out_channels)?;
        Ok(ConvBnRelu { conv, bn })
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(f, x)?;
        let y = self.bn.forward(f, y)?;
        f.tape.relu(y)
    }
}

/// Two 3x3(x3) conv/BN stages with an identity or 1x1(x1) projection shortcut:
/// `relu(bn2(conv2(relu(bn1(conv1(x))))) + shortcut(x))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
    proj: Option<Conv>,
}

impl ResidualBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        spatial_rank: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let k3 = vec![3; spatial_rank];
        let conv1 = Conv::new(
            store,
            &format!("{name}.conv1"),
            ConvSpec::new(in_channels, out_channels, &k3).with_bias(false),
            rng,
        )?;
        let bn1 = BatchNorm::new(store, &format!("{name}.bn1"), out_channels)?;
        let conv2 = Conv::new(
            store,
            &format!("{name}.conv2"),
            ConvSpec::new(out_channels, out_channels, &k3).with_bias(false),
            rng,
        )?;
        let bn2 = BatchNorm::new(store, &format!("{name}.bn2"), out_channels)?;
        let proj = if in_channels != out_channels {
            let spec = ConvSpec::new(in_channels, out_channels, &vec![1; spatial_rank]);
            Some(Conv::new(store, &format!("{name}.proj"), spec, rng)?)
        } else {
            None
        };
        Ok(ResidualBlock { conv1, bn1, conv2, bn2, proj })
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(f, x)?;
        let h = self.bn1.forward(f, h)?;
        let h = f.tape.relu(h)?;
        let h = self.conv2.forward(f, h)?;
        let h = self.bn2.forward(f, h)?;
        let skip = match &self.proj {
            Some(p) => p.forward(f, x)?,
            None => x,
        };
        let s = f.tape.add(h, skip)?;
        f.tape.relu(s)
    }
}
