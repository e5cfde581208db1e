use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{ConvBnRelu, Forward, ParamStore};
use crate::tensor::{Real, Var};

/// Largest number of 3D positions the spatial block attends over by default.
pub const DEFAULT_POSITION_BUDGET: usize = 8192;

fn flatten<T: Real>(f: &mut Forward<'_, T>, x: Var) -> Result<(Vec<usize>, Var)> {
    let dims = f.tape.shape(x).dims().to_vec();
    let n: usize = dims[2..].iter().product();
    let flat = f.tape.view(x, vec![dims[0], dims[1], n])?;
    Ok((dims, flat))
}

/// Planar spatial attention.
///
/// With `Q`, `K`, `V` flattened to `C x N`, the similarity `Q^T K` is
/// normalized over the key position for each query position and the output
/// is `F + V S`, where each output position mixes `V` with unit-sum weights.
#[derive(Clone, Debug)]
pub struct Sab2d {
    q: ConvBnRelu,
    k: ConvBnRelu,
    pub(super) v: ConvBnRelu,
}

impl Sab2d {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Sab2d {
            q: ConvBnRelu::new(store, &format!("{name}.q"), channels, channels, &[3, 1], rng)?,
            k: ConvBnRelu::new(store, &format!("{name}.k"), channels, channels, &[1, 3], rng)?,
            v: ConvBnRelu::new(store, &format!("{name}.v"), channels, channels, &[1, 1], rng)?,
        })
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        if f.tape.shape(x).rank() != 4 {
            return Err(Error::dim(format!(
                "planar spatial attention expects [B, C, H, W], got {:?}",
                f.tape.shape(x).dims()
            )));
        }
        let q = self.q.forward(f, x)?;
        let k = self.k.forward(f, x)?;
        let v = self.v.forward(f, x)?;
        let (dims, q) = flatten(f, q)?;
        let (_, k) = flatten(f, k)?;
        let (_, v) = flatten(f, v)?;
        // a[y][x] = Q_y . K_x
        let a = f.tape.bmm(q, k, true, false)?;
        let s = f.tape.softmax_axis(a, 2)?;
        f.record_attention("spatial", s, false);
        let out = f.tape.bmm(v, s, false, true)?;
        let out = f.tape.view(out, dims)?;
        f.tape.add(x, out)
    }
}

/// Volumetric spatial attention with three oriented projections:
/// similarity `(Q^T K)(J^T K)`, normalized over the last index, then
/// `F + V S^T` as in the planar block.
#[derive(Clone, Debug)]
pub struct Sab3d {
    q: ConvBnRelu,
    k: ConvBnRelu,
    j: ConvBnRelu,
    pub(super) v: ConvBnRelu,
    budget: usize,
}

impl Sab3d {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        budget: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Sab3d {
            q: ConvBnRelu::new(store, &format!("{name}.q"), channels, channels, &[1, 3, 1], rng)?,
            k: ConvBnRelu::new(store, &format!("{name}.k"), channels, channels, &[3, 1, 1], rng)?,
            j: ConvBnRelu::new(store, &format!("{name}.j"), channels, channels, &[1, 1, 3], rng)?,
            v: ConvBnRelu::new(store, &format!("{name}.v"), channels, channels, &[1, 1, 1], rng)?,
            budget,
        })
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let dims = f.tape.shape(x).dims().to_vec();
        if dims.len() != 5 {
            return Err(Error::dim(format!(
                "volumetric spatial attention expects [B, C, H, W, D], got {dims:?}"
            )));
        }
        let n: usize = dims[2..].iter().product();
        if n > self.budget {
            return Err(Error::Resource(format!(
                "spatial attention over {n} positions exceeds the budget of {}; use a smaller crop",
                self.budget
            )));
        }
        let q = self.q.forward(f, x)?;
        let k = self.k.forward(f, x)?;
        let j = self.j.forward(f, x)?;
        let v = self.v.forward(f, x)?;
        let (_, q) = flatten(f, q)?;
        let (_, k) = flatten(f, k)?;
        let (_, j) = flatten(f, j)?;
        let (_, v) = flatten(f, v)?;
        let a = f.tape.bmm(q, k, true, false)?;
        let b = f.tape.bmm(j, k, true, false)?;
        let m = f.tape.bmm(a, b, false, false)?;
        let s = f.tape.softmax_axis(m, 2)?;
        f.record_attention("spatial", s, false);
        let out = f.tape.bmm(v, s, false, true)?;
        let out = f.tape.view(out, dims)?;
        f.tape.add(x, out)
    }
}
