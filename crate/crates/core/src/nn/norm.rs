use super::params::{Forward, Mode, ParamId, ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{BackwardCtx, Op, Real, Tape, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Per-channel batch normalization over `[B, C, spatial...]`.
///
/// Train mode normalizes with the biased batch variance and folds the
/// unbiased variance into the running estimate; eval mode uses the running
/// estimates.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    channels: usize,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let c = vec![channels];
        Ok(BatchNorm {
            channels,
            gamma: store.add(format!("{name}.weight"), Tensor::full(c.clone(), T::one())?, ParamKind::Trainable)?,
            beta: store.add(format!("{name}.bias"), Tensor::zeros(c.clone())?, ParamKind::Trainable)?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(c.clone())?, ParamKind::Buffer)?,
            running_var: store.add(format!("{name}.running_var"), Tensor::full(c, T::one())?, ParamKind::Buffer)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let gamma = f.param(self.gamma);
        let beta = f.param(self.beta);
        match f.mode() {
            Mode::Train => {
                let (y, stats) = batch_norm_train(&mut f.tape, x, gamma, beta)?;
                let m = T::lit(BN_MOMENTUM);
                let rm = f.store_mut().get_mut(self.running_mean).data_mut();
                for (r, &mu) in rm.iter_mut().zip(&stats.mean) {
                    *r = (T::one() - m) * *r + m * mu;
                }
                let rv = f.store_mut().get_mut(self.running_var).data_mut();
                for (r, &v) in rv.iter_mut().zip(&stats.unbiased_var) {
                    *r = (T::one() - m) * *r + m * v;
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = f.store().get(self.running_mean).data().to_vec();
                let var = f.store().get(self.running_var).data().to_vec();
                batch_norm_eval(&mut f.tape, x, gamma, beta, &mean, &var)
            }
        }
    }
}

/// Statistics of one train-mode pass.
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Equal to the biased variance when a channel has a single element.
    pub unbiased_var: Vec<T>,
}

fn check<T: Real>(tape: &Tape<T>, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
    let d = tape.shape(x).dims();
    if d.len() < 3 {
        return Err(Error::dim(format!("batch norm expects [B, C, spatial...], got {d:?}")));
    }
    let c = d[1];
    for (v, what) in [(gamma, "scale"), (beta, "shift")] {
        if tape.shape(v).dims() != [c] {
            return Err(Error::dim(format!(
                "batch norm {what} shape {:?} for {c} channels",
                tape.shape(v).dims()
            )));
        }
    }
    Ok((d[0], c, d[2..].iter().product()))
}

pub fn batch_norm_train<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
) -> Result<(Var, BatchStats<T>)> {
    let (b, c, s) = check(tape, x, gamma, beta)?;
    let n = b * s;
    if n == 1 {
        log::warn!("batch norm over a single element per channel; variance is zero");
    }
    let xd = tape.value(x).data;
    let (g, bt) = (tape.value(gamma).data, tape.value(beta).data);
    let eps = T::lit(BN_EPS);
    let inv_n = T::one() / T::lit(n as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum = T::zero();
        for bi in 0..b {
            sum += xd[(bi * c + ch) * s..][..s].iter().copied().sum::<T>();
        }
        let mu = sum * inv_n;
        let mut sq = T::zero();
        for bi in 0..b {
            for &v in &xd[(bi * c + ch) * s..][..s] {
                sq += (v - mu) * (v - mu);
            }
        }
        mean[ch] = mu;
        var[ch] = sq * inv_n;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * s;
            for i in base..base + s {
                let h = (xd[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                out[i] = g[ch] * h + bt[ch];
            }
        }
    }
    let unbiased_var = if n > 1 {
        let f = T::lit(n as f64 / (n - 1) as f64);
        var.iter().map(|&v| v * f).collect()
    } else {
        var
    };
    let dims = tape.shape(x).dims().to_vec();
    let op = BatchNormOp { x, gamma, beta, xhat, inv_std, batch_stats: true, b, c, s };
    let y = tape.push(Tensor::from_vec(dims, out)?, Box::new(op))?;
    Ok((y, BatchStats { mean, unbiased_var }))
}

pub fn batch_norm_eval<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    mean: &[T],
    var: &[T],
) -> Result<Var> {
    let (b, c, s) = check(tape, x, gamma, beta)?;
    let xd = tape.value(x).data;
    let (g, bt) = (tape.value(gamma).data, tape.value(beta).data);
    let eps = T::lit(BN_EPS);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * s;
            for i in base..base + s {
                let h = (xd[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                out[i] = g[ch] * h + bt[ch];
            }
        }
    }
    let dims = tape.shape(x).dims().to_vec();
    let op = BatchNormOp { x, gamma, beta, xhat, inv_std, batch_stats: false, b, c, s };
    tape.push(Tensor::from_vec(dims, out)?, Box::new(op))
}

struct BatchNormOp<T> {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    /// Statistics depend on `x` (train mode).
    batch_stats: bool,
    b: usize,
    c: usize,
    s: usize,
}

impl<T: Real> Op<T> for BatchNormOp<T> {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.gamma, self.beta]
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, _: Var, grad: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let (b, c, s) = (self.b, self.c, self.s);
        let g = ctx.value(self.gamma).data;
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * s;
                for i in base..base + s {
                    dbeta[ch] += grad[i];
                    dgamma[ch] += grad[i] * self.xhat[i];
                }
            }
        }
        let dx = ctx.requires_grad(self.x).then(|| {
            let mut dx = vec![T::zero(); grad.len()];
            let inv_n = T::one() / T::lit((b * s) as f64);
            for ch in 0..c {
                let k = g[ch] * self.inv_std[ch];
                let (mb, mg) = (dbeta[ch] * inv_n, dgamma[ch] * inv_n);
                for bi in 0..b {
                    let base = (bi * c + ch) * s;
                    for i in base..base + s {
                        dx[i] = if self.batch_stats {
                            k * (grad[i] - mb - self.xhat[i] * mg)
                        } else {
                            k * grad[i]
                        };
                    }
                }
            }
            dx
        });
        Ok(vec![
            dx,
            ctx.requires_grad(self.gamma).then_some(dgamma),
            ctx.requires_grad(self.beta).then_some(dbeta),
        ])
    }
}
