use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv, ConvSpec, Forward, ParamStore};
use crate::tensor::{Real, Var};

/// Planar channel attention, computed on the features directly.
///
/// `M = F F^T` over flattened `C x N` features, normalized over its first
/// channel index; output `F + Ĉ F`. Has no parameters.
#[derive(Clone, Copy, Debug, Default)]
pub struct Cab2d;

impl Cab2d {
    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let dims = f.tape.shape(x).dims().to_vec();
        if dims.len() != 4 {
            return Err(Error::dim(format!(
                "planar channel attention expects [B, C, H, W], got {dims:?}"
            )));
        }
        let n = dims[2] * dims[3];
        let flat = f.tape.view(x, vec![dims[0], dims[1], n])?;
        let m = f.tape.bmm(flat, flat, false, true)?;
        let c = f.tape.softmax_axis(m, 1)?;
        f.record_attention("channel", c, true);
        let out = f.tape.bmm(c, flat, false, false)?;
        let out = f.tape.view(out, dims)?;
        f.tape.add(x, out)
    }
}

/// Volumetric channel attention over four pointwise projections:
/// `M = (K' Q'^T)(K' J'^T)`, normalized over its first index, output
/// `F + Ĉ^T V'`.
#[derive(Clone, Debug)]
pub struct Cab3d {
    q: Conv,
    k: Conv,
    j: Conv,
    pub(super) v: Conv,
}

impl Cab3d {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut pw = |tag: &str, rng: &mut R| {
            Conv::new(
                store,
                &format!("{name}.{tag}"),
                ConvSpec::new(channels, channels, &[1, 1, 1]),
                rng,
            )
        };
        Ok(Cab3d {
            q: pw("q", rng)?,
            k: pw("k", rng)?,
            j: pw("j", rng)?,
            v: pw("v", rng)?,
        })
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let dims = f.tape.shape(x).dims().to_vec();
        if dims.len() != 5 {
            return Err(Error::dim(format!(
                "volumetric channel attention expects [B, C, H, W, D], got {dims:?}"
            )));
        }
        let flat = vec![dims[0], dims[1], dims[2..].iter().product()];
        let q = self.q.forward(f, x)?;
        let q = f.tape.view(q, flat.clone())?;
        let k = self.k.forward(f, x)?;
        let k = f.tape.view(k, flat.clone())?;
        let j = self.j.forward(f, x)?;
        let j = f.tape.view(j, flat.clone())?;
        let v = self.v.forward(f, x)?;
        let v = f.tape.view(v, flat)?;
        let kq = f.tape.bmm(k, q, false, true)?;
        let kj = f.tape.bmm(k, j, false, true)?;
        let m = f.tape.bmm(kq, kj, false, false)?;
        let c = f.tape.softmax_axis(m, 1)?;
        f.record_attention("channel", c, true);
        let out = f.tape.bmm(c, v, true, false)?;
        let out = f.tape.view(out, dims)?;
        f.tape.add(x, out)
    }
}
