//! Finite-difference checks over every layer, attention block and loss.
//!
//! Each case builds a small block with random parameters, forms the scalar
//! `sum(w * block(x))` for a random `w`, and compares tape gradients with
//! central differences for the input and a sample of every trainable
//! parameter tensor. Central differences are always taken in 64-bit
//! arithmetic at the (possibly 32-bit rounded) point under test.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{Cab2d, Cab3d, Csam, Sab2d, Sab3d, DEFAULT_POSITION_BUDGET};
use crate::error::{Error, Result};
use crate::loss::{bce_loss, class_weight, combined_loss_with_omega, dice_loss, wce_loss, LossConfig};
use crate::nn::{max_pool, BatchNorm, Conv, ConvSpec, ConvTranspose, Forward, Mode, ParamKind, ParamStore, ResidualBlock};
use crate::tensor::{relative_error, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

impl Precision {
    pub fn tolerance(self) -> f64 {
        match self {
            Precision::F64 => 1e-5,
            Precision::F32 => 1e-3,
        }
    }

}

#[derive(Clone, Debug)]
pub struct SuiteConfig {
    pub seeds: Vec<u64>,
    pub precision: Precision,
    /// Blocks to run; empty means all.
    pub only: Vec<String>,
    /// Corrupt the analytic gradient of this block (negative testing).
    pub inject_fault: Option<String>,
    /// Parameter coordinates probed per tensor; inputs are probed fully up to
    /// this many coordinates times four.
    pub coords_per_tensor: usize,
}

impl SuiteConfig {
    pub fn new(base_seed: u64, count: u64, precision: Precision) -> Self {
        SuiteConfig {
            seeds: (0..count).map(|i| base_seed.wrapping_add(i)).collect(),
            precision,
            only: Vec::new(),
            inject_fault: None,
            coords_per_tensor: 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockResult {
    pub name: &'static str,
    pub worst: f64,
    pub worst_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockResult>,
}

impl SuiteReport {
    pub fn failures(&self) -> Vec<&BlockResult> {
        self.blocks.iter().filter(|b| !(b.worst < self.tolerance)).collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

const STEP: f64 = 1e-6;

type Build<T> = Box<dyn Fn(&mut Forward<'_, T>, Var) -> Result<Var>>;

struct Case<T: Real> {
    store: ParamStore<T>,
    input: Tensor<T>,
    build: Build<T>,
}

pub const BLOCKS: [&str; 24] = [
    "conv2d",
    "conv2d_stride2",
    "conv3d",
    "conv_transpose2d",
    "conv_transpose3d",
    "batch_norm2d",
    "batch_norm3d",
    "max_pool2d",
    "max_pool3d",
    "relu",
    "sigmoid",
    "softmax",
    "residual2d",
    "residual3d",
    "sab2d",
    "cab2d",
    "sab3d",
    "cab3d",
    "csam2d",
    "csam3d",
    "loss_bce",
    "loss_wce",
    "loss_dice",
    "loss_combined",
];

fn uniform<T: Real>(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let n = dims.iter().product();
    Tensor::from_vec(dims.to_vec(), (0..n).map(|_| T::lit(rng.random_range(lo..hi))).collect()).expect("valid dims")
}

fn binary<T: Real>(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<T> {
    let n = dims.iter().product();
    Tensor::from_vec(dims.to_vec(), (0..n).map(|_| if rng.random_bool(0.4) { T::one() } else { T::zero() }).collect())
        .expect("valid dims")
}

/// Randomize every trainable parameter so zero-initialized biases and unit
/// norm scales do not hide errors.
fn jitter<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().filter(|&id| store.kind(id) == ParamKind::Trainable).collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = T::lit(v.as_f64() + rng.random_range(-0.3..0.3));
        }
    }
}

fn make_case<T: Real>(name: &str, rng: &mut ChaCha8Rng) -> Result<Case<T>> {
    let mut store = ParamStore::new();
    let s = &mut store;
    let (input, build): (Tensor<T>, Build<T>) = match name {
        "conv2d" => {
            let c = Conv::new(s, "conv", ConvSpec::new(2, 3, &[3, 3]), rng)?;
            (uniform(rng, &[2, 2, 5, 6], -1.0, 1.0), Box::new(move |f, x| c.forward(f, x)))
        }
        "conv2d_stride2" => {
            let c = Conv::new(s, "conv", ConvSpec::new(2, 2, &[3, 3]).with_stride(&[2, 2]), rng)?;
            (uniform(rng, &[1, 2, 7, 9], -1.0, 1.0), Box::new(move |f, x| c.forward(f, x)))
        }
        "conv3d" => {
            let c = Conv::new(s, "conv", ConvSpec::new(2, 2, &[3, 3, 3]), rng)?;
            (uniform(rng, &[1, 2, 4, 3, 4], -1.0, 1.0), Box::new(move |f, x| c.forward(f, x)))
        }
        "conv_transpose2d" => {
            let c = ConvTranspose::new(s, "up", ConvSpec::upsample(3, 2, 2), rng)?;
            (uniform(rng, &[2, 3, 3, 2], -1.0, 1.0), Box::new(move |f, x| c.forward(f, x)))
        }
        "conv_transpose3d" => {
            let c = ConvTranspose::new(s, "up", ConvSpec::upsample(2, 2, 3), rng)?;
            (uniform(rng, &[1, 2, 2, 2, 3], -1.0, 1.0), Box::new(move |f, x| c.forward(f, x)))
        }
        "batch_norm2d" => {
            let b = BatchNorm::new(s, "bn", 3)?;
            (uniform(rng, &[2, 3, 3, 3], -1.0, 1.0), Box::new(move |f, x| b.forward(f, x)))
        }
        "batch_norm3d" => {
            let b = BatchNorm::new(s, "bn", 2)?;
            (uniform(rng, &[2, 2, 2, 3, 2], -1.0, 1.0), Box::new(move |f, x| b.forward(f, x)))
        }
        "max_pool2d" => (uniform(rng, &[1, 2, 4, 6], -1.0, 1.0), Box::new(|f, x| max_pool(&mut f.tape, x))),
        "max_pool3d" => (uniform(rng, &[1, 2, 4, 2, 4], -1.0, 1.0), Box::new(|f, x| max_pool(&mut f.tape, x))),
        "relu" => (uniform(rng, &[3, 7], -1.0, 1.0), Box::new(|f, x| f.tape.relu(x))),
        "sigmoid" => (uniform(rng, &[3, 7], -4.0, 4.0), Box::new(|f, x| f.tape.sigmoid(x))),
        "softmax" => (uniform(rng, &[2, 3, 5], -2.0, 2.0), Box::new(|f, x| f.tape.softmax_axis(x, 1))),
        "residual2d" => {
            let r = ResidualBlock::new(s, "res", 2, 3, 2, rng)?;
            (uniform(rng, &[2, 2, 4, 4], -1.0, 1.0), Box::new(move |f, x| r.forward(f, x)))
        }
        "residual3d" => {
            let r = ResidualBlock::new(s, "res", 2, 2, 3, rng)?;
            (uniform(rng, &[2, 2, 2, 3, 2], -1.0, 1.0), Box::new(move |f, x| r.forward(f, x)))
        }
        "sab2d" => {
            let a = Sab2d::new(s, "sab", 3, rng)?;
            (uniform(rng, &[2, 3, 3, 4], -1.0, 1.0), Box::new(move |f, x| a.forward(f, x)))
        }
        "cab2d" => (uniform(rng, &[2, 3, 3, 4], -1.0, 1.0), Box::new(|f, x| Cab2d.forward(f, x))),
        "sab3d" => {
            let a = Sab3d::new(s, "sab", 2, DEFAULT_POSITION_BUDGET, rng)?;
            (uniform(rng, &[2, 2, 3, 2, 3], -1.0, 1.0), Box::new(move |f, x| a.forward(f, x)))
        }
        "cab3d" => {
            let a = Cab3d::new(s, "cab", 3, rng)?;
            (uniform(rng, &[2, 3, 2, 3, 2], -1.0, 1.0), Box::new(move |f, x| a.forward(f, x)))
        }
        "csam2d" => {
            let a = Csam::new(s, "csam", 2, 2, true, true, DEFAULT_POSITION_BUDGET, rng)?;
            (uniform(rng, &[2, 2, 3, 4], -1.0, 1.0), Box::new(move |f, x| a.forward(f, x)))
        }
        "csam3d" => {
            let a = Csam::new(s, "csam", 2, 3, true, true, DEFAULT_POSITION_BUDGET, rng)?;
            (uniform(rng, &[2, 2, 2, 3, 2], -1.0, 1.0), Box::new(move |f, x| a.forward(f, x)))
        }
        "loss_bce" | "loss_wce" | "loss_dice" | "loss_combined" => {
            let dims = [2, 1, 4, 5];
            let p: Tensor<T> = uniform(rng, &dims, 0.05, 0.95);
            let g: Tensor<T> = binary(rng, &dims);
            let cfg = LossConfig::default();
            // The class weight is a constant of the gradient, so it is fixed
            // at the base point.
            let omega = if name == "loss_wce" { rng.random_range(0.5..3.0) } else { class_weight(p.data()) };
            let build: Build<T> = match name {
                "loss_bce" => Box::new(move |f, x| bce_loss(&mut f.tape, x, &g, cfg.clamp)),
                "loss_wce" => Box::new(move |f, x| wce_loss(&mut f.tape, x, &g, omega, cfg.clamp)),
                "loss_dice" => Box::new(move |f, x| dice_loss(&mut f.tape, x, &g, cfg.epsilon)),
                _ => Box::new(move |f, x| combined_loss_with_omega(&mut f.tape, x, &g, omega, &cfg)),
            };
            (p, build)
        }
        other => return Err(Error::Config(format!("unknown gradient-check block `{other}`"))),
    };
    jitter(&mut store, rng);
    Ok(Case { store, input, build })
}

fn objective<T: Real>(y: &Tensor<T>, w: &[f64]) -> f64 {
    y.data().iter().zip(w).map(|(a, b)| a.as_f64() * b).sum()
}

fn eval<T: Real>(case: &mut Case<T>, input: &Tensor<T>, w: &[f64]) -> Result<f64> {
    let mut f = Forward::inference(&mut case.store, Mode::Train);
    let x = f.input(input.clone());
    let y = (case.build)(&mut f, x)?;
    let v = f.tape.tensor(y);
    Ok(objective(&v, w))
}

fn probe_coords(n: usize, limit: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= limit {
        (0..n).collect()
    } else {
        let mut v = sample(rng, n, limit).into_vec();
        v.sort_unstable();
        v
    }
}

/// Analytic gradients come from `case`; central differences are taken on
/// `numeric`, a 64-bit copy of the same block at the same point.
fn check_case<T: Real>(
    case: &mut Case<T>,
    numeric: &mut Case<f64>,
    cfg: &SuiteConfig,
    fault: bool,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let h = STEP;
    let case_ids: Vec<_> = case.store.ids().collect();
    // Analytic gradients.
    let (w, mut gx, grads) = {
        let mut f = Forward::new(&mut case.store, Mode::Train);
        let x = f.tape.leaf(case.input.clone(), true);
        let y = (case.build)(&mut f, x)?;
        let n = f.tape.shape(y).numel();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wv = f.tape.constant(Tensor::from_vec(f.tape.shape(y).dims().to_vec(), w.iter().map(|&v| T::lit(v)).collect())?);
        let prod = f.tape.mul(y, wv)?;
        let obj = f.tape.sum(prod)?;
        f.backward(obj)?;
        let gx: Vec<f64> = f.tape.grad(x).map_or(vec![0.0; case.input.numel()], |g| g.iter().map(|v| v.as_f64()).collect());
        let grads: Vec<(crate::nn::ParamId, Vec<f64>)> =
            f.param_grads().into_iter().map(|(id, g)| (id, g.iter().map(|v| v.as_f64()).collect())).collect();
        (w, gx, grads)
    };
    if fault {
        gx.iter_mut().for_each(|g| *g += 1.0);
    }

    let mut worst = 0.0f64;
    let case = numeric;
    let input = case.input.clone();
    let mut probe = input.clone();
    for i in probe_coords(input.numel(), cfg.coords_per_tensor * 4, rng) {
        let x0 = input.data()[i];
        let mut at = |v: f64, case: &mut Case<f64>| -> Result<(f64, f64)> {
            probe.data_mut()[i] = v;
            let r = eval(case, &probe, &w)?;
            Ok((r, probe.data()[i]))
        };
        let (fp, xp) = at(x0 + h, case)?;
        let (fm, xm) = at(x0 - h, case)?;
        probe.data_mut()[i] = input.data()[i];
        worst = worst.max(relative_error(gx[i], (fp - fm) / (xp - xm)));
    }
    let ids: Vec<_> = case.store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        if case.store.kind(id) != ParamKind::Trainable {
            continue;
        }
        let analytic = grads.iter().find(|(g, _)| *g == case_ids[k]).map(|(_, g)| g.clone());
        let n = case.store.get(id).numel();
        let analytic = analytic.unwrap_or_else(|| vec![0.0; n]);
        for i in probe_coords(n, cfg.coords_per_tensor, rng) {
            let orig = case.store.get(id).data()[i];
            let at = |v: f64, case: &mut Case<f64>| -> Result<(f64, f64)> {
                case.store.get_mut(id).data_mut()[i] = v;
                Ok((eval(case, &input, &w)?, v))
            };
            let (fp, vp) = at(orig + h, case)?;
            let (fm, vm) = at(orig - h, case)?;
            case.store.get_mut(id).data_mut()[i] = orig;
            worst = worst.max(relative_error(analytic[i], (fp - fm) / (vp - vm)));
        }
    }
    if !worst.is_finite() {
        return Err(Error::numeric("gradient check", "non-finite relative error"));
    }
    Ok(worst)
}

fn run_typed<T: Real>(cfg: &SuiteConfig) -> Result<SuiteReport> {
    let names: Vec<&'static str> = if cfg.only.is_empty() {
        BLOCKS.to_vec()
    } else {
        let mut v = Vec::new();
        for n in &cfg.only {
            let known = BLOCKS.iter().find(|b| *b == n).ok_or_else(|| Error::Config(format!("unknown gradient-check block `{n}`")))?;
            v.push(*known);
        }
        v
    };
    if let Some(f) = &cfg.inject_fault {
        if !BLOCKS.contains(&f.as_str()) {
            return Err(Error::Config(format!("unknown gradient-check block `{f}`")));
        }
    }
    let mut blocks = Vec::with_capacity(names.len());
    for (b, name) in names.iter().enumerate() {
        let mut result = BlockResult { name, worst: 0.0, worst_seed: cfg.seeds.first().copied().unwrap_or(0) };
        for &seed in &cfg.seeds {
            let rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(b as u64));
            let mut case = make_case::<T>(name, &mut rng.clone())?;
            let mut rng = rng;
            let mut numeric = make_case::<f64>(name, &mut rng)?;
            numeric.store = case.store.cast();
            numeric.input = case.input.cast();
            let fault = cfg.inject_fault.as_deref() == Some(*name);
            let err = check_case(&mut case, &mut numeric, cfg, fault, &mut rng)?;
            if err > result.worst {
                result.worst = err;
                result.worst_seed = seed;
            }
        }
        blocks.push(result);
    }
    Ok(SuiteReport { tolerance: cfg.precision.tolerance(), blocks })
}

/// Run the suite at the configured precision.
pub fn run_suite(cfg: &SuiteConfig) -> Result<SuiteReport> {
    match cfg.precision {
        Precision::F64 => run_typed::<f64>(cfg),
        Precision::F32 => run_typed::<f32>(cfg),
    }
}
