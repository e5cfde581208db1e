//! Segmentation objectives: (weighted) binary cross-entropy, soft Dice and
//! their convex combination.

use crate::error::{Error, Result};
use crate::tensor::{BackwardCtx, Op, Real, Tape, Tensor, Var};

/// Class weight returned when the predicted foreground mass vanishes.
pub const OMEGA_MAX: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the cross-entropy term.
    pub alpha: f64,
    /// Dice smoothing.
    pub epsilon: f64,
    /// Probabilities are clamped to `[clamp, 1 - clamp]` before logarithms.
    pub clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 0.6, epsilon: 1.0, clamp: 1e-7 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.clamp > 0.0 && self.clamp < 0.5) {
            return Err(Error::Config(format!("clamp must lie in (0, 0.5), got {}", self.clamp)));
        }
        Ok(())
    }
}

fn check_target<T: Real>(tape: &Tape<T>, p: Var, g: &Tensor<T>) -> Result<()> {
    if tape.shape(p) != g.shape() {
        return Err(Error::dim(format!(
            "prediction {:?} and target {:?} differ in shape",
            tape.shape(p),
            g.shape()
        )));
    }
    if let Some(i) = g.data().iter().position(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::contract(format!(
            "target value {} at flat index {i} is not 0 or 1",
            g.data()[i]
        )));
    }
    Ok(())
}

/// `(N - sum p) / sum p`, or [`OMEGA_MAX`] when `sum p < 1e-12`.
pub fn class_weight<T: Real>(p: &[T]) -> f64 {
    let s: f64 = p.iter().map(|v| v.as_f64()).sum();
    if s < 1e-12 {
        log::warn!("predicted foreground mass is {s:e}; class weight set to {OMEGA_MAX:e}");
        return OMEGA_MAX;
    }
    (p.len() as f64 - s) / s
}

pub fn bce_loss<T: Real>(tape: &mut Tape<T>, p: Var, g: &Tensor<T>, clamp: f64) -> Result<Var> {
    wce_loss(tape, p, g, 1.0, clamp)
}

/// `-(1/N) sum(omega g ln p + (1 - g) ln(1 - p))` with clamped `p`.
/// `omega` is a constant: no gradient flows through it.
pub fn wce_loss<T: Real>(tape: &mut Tape<T>, p: Var, g: &Tensor<T>, omega: f64, clamp: f64) -> Result<Var> {
    check_target(tape, p, g)?;
    let pd = tape.value(p).data;
    let (lo, hi) = (clamp, 1.0 - clamp);
    let mut total = 0.0f64;
    for (&pi, &gi) in pd.iter().zip(g.data()) {
        let pc = pi.as_f64().clamp(lo, hi);
        let gi = gi.as_f64();
        total += omega * gi * pc.ln() + (1.0 - gi) * (1.0 - pc).ln();
    }
    let n = pd.len() as f64;
    let value = -total / n;
    let op = WceOp { p, target: g.data().to_vec(), omega, lo, hi };
    tape.push(Tensor::scalar(T::lit(value)), Box::new(op))
}

struct WceOp<T> {
    p: Var,
    target: Vec<T>,
    omega: f64,
    lo: f64,
    hi: f64,
}

impl<T: Real> Op<T> for WceOp<T> {
    fn name(&self) -> &'static str {
        "wce_loss"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.p]
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, _: Var, grad: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let pd = ctx.value(self.p).data;
        let scale = -grad[0].as_f64() / pd.len() as f64;
        let dp = pd
            .iter()
            .zip(&self.target)
            .map(|(&pi, &gi)| {
                let (pi, gi) = (pi.as_f64(), gi.as_f64());
                if pi < self.lo || pi > self.hi {
                    return T::zero();
                }
                T::lit(scale * (self.omega * gi / pi - (1.0 - gi) / (1.0 - pi)))
            })
            .collect();
        Ok(vec![Some(dp)])
    }
}

/// `1 - (2 sum(p g) + eps) / (sum p^2 + sum g^2 + eps)`.
pub fn dice_loss<T: Real>(tape: &mut Tape<T>, p: Var, g: &Tensor<T>, epsilon: f64) -> Result<Var> {
    check_target(tape, p, g)?;
    let pd = tape.value(p).data;
    let (mut pg, mut pp, mut gg) = (0.0f64, 0.0f64, 0.0f64);
    for (&pi, &gi) in pd.iter().zip(g.data()) {
        let (pi, gi) = (pi.as_f64(), gi.as_f64());
        pg += pi * gi;
        pp += pi * pi;
        gg += gi * gi;
    }
    let num = 2.0 * pg + epsilon;
    let den = pp + gg + epsilon;
    let op = DiceOp { p, target: g.data().to_vec(), num, den };
    tape.push(Tensor::scalar(T::lit(1.0 - num / den)), Box::new(op))
}

struct DiceOp<T> {
    p: Var,
    target: Vec<T>,
    num: f64,
    den: f64,
}

impl<T: Real> Op<T> for DiceOp<T> {
    fn name(&self) -> &'static str {
        "dice_loss"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.p]
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, _: Var, grad: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let pd = ctx.value(self.p).data;
        let g0 = grad[0].as_f64();
        let d2 = self.den * self.den;
        let dp = pd
            .iter()
            .zip(&self.target)
            .map(|(&pi, &gi)| {
                let d = -(2.0 * gi.as_f64() * self.den - self.num * 2.0 * pi.as_f64()) / d2;
                T::lit(g0 * d)
            })
            .collect();
        Ok(vec![Some(dp)])
    }
}

/// `alpha * wce + (1 - alpha) * dice`, with the class weight computed from
/// this batch's predictions.
pub fn combined_loss<T: Real>(tape: &mut Tape<T>, p: Var, g: &Tensor<T>, cfg: &LossConfig) -> Result<Var> {
    let omega = class_weight(tape.value(p).data);
    combined_loss_with_omega(tape, p, g, omega, cfg)
}

/// [`combined_loss`] with a given class weight.
pub fn combined_loss_with_omega<T: Real>(
    tape: &mut Tape<T>,
    p: Var,
    g: &Tensor<T>,
    omega: f64,
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let wce = wce_loss(tape, p, g, omega, cfg.clamp)?;
    let dice = dice_loss(tape, p, g, cfg.epsilon)?;
    let a = tape.scale(wce, T::lit(cfg.alpha))?;
    let b = tape.scale(dice, T::lit(1.0 - cfg.alpha))?;
    tape.add(a, b)
}
