use crate::error::{Error, Result};
use crate::tensor::{BackwardCtx, Op, Real, Tape, Tensor, Var};

/// 2x max pooling on every spatial axis of `[B, C, spatial...]`.
///
/// Ties resolve to the first maximum in row-major window order, and the
/// gradient flows only to that element.
pub fn max_pool<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let dims = tape.shape(x).dims().to_vec();
    let spatial = &dims[2.min(dims.len())..];
    if !(dims.len() == 4 || dims.len() == 5) {
        return Err(Error::dim(format!("max pool expects [B, C, H, W] or [B, C, H, W, D], got {dims:?}")));
    }
    if let Some(odd) = spatial.iter().find(|&&d| d % 2 != 0) {
        return Err(Error::dim(format!(
            "max pool needs even spatial extents, got {odd} in {dims:?}"
        )));
    }
    let inp: [usize; 3] = match *spatial {
        [h, w] => [1, h, w],
        [h, w, d] => [h, w, d],
        _ => unreachable!(),
    };
    let k: [usize; 3] = if spatial.len() == 2 { [1, 2, 2] } else { [2, 2, 2] };
    let out3 = [inp[0] / k[0], inp[1] / k[1], inp[2] / k[2]];
    let planes = dims[0] * dims[1];
    let (inn, on): (usize, usize) = (inp.iter().product(), out3.iter().product());
    let xd = tape.value(x).data;
    let mut out = Vec::with_capacity(planes * on);
    let mut argmax = Vec::with_capacity(planes * on);
    for p in 0..planes {
        let plane = &xd[p * inn..(p + 1) * inn];
        for y0 in 0..out3[0] {
            for y1 in 0..out3[1] {
                for y2 in 0..out3[2] {
                    let mut best = T::neg_infinity();
                    let mut at = usize::MAX;
                    for a in 0..k[0] {
                        for b in 0..k[1] {
                            for c in 0..k[2] {
                                let i = ((y0 * k[0] + a) * inp[1] + y1 * k[1] + b) * inp[2] + y2 * k[2] + c;
                                if at == usize::MAX || plane[i] > best {
                                    best = plane[i];
                                    at = i;
                                }
                            }
                        }
                    }
                    out.push(best);
                    argmax.push((p * inn + at) as u32);
                }
            }
        }
    }
    let mut odims = dims[..2].to_vec();
    odims.extend(spatial.iter().map(|d| d / 2));
    let n_in = xd.len();
    tape.push(Tensor::from_vec(odims, out)?, Box::new(MaxPoolOp { x, argmax, n_in }))
}

struct MaxPoolOp {
    x: Var,
    argmax: Vec<u32>,
    n_in: usize,
}

impl<T: Real> Op<T> for MaxPoolOp {
    fn name(&self) -> &'static str {
        "max_pool"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, _: &BackwardCtx<'_, T>, _: Var, grad: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let mut dx = vec![T::zero(); self.n_in];
        for (&i, &g) in self.argmax.iter().zip(grad) {
            dx[i as usize] += g;
        }
        Ok(vec![Some(dx)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pools_two_by_two() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let x = tape.leaf(Tensor::from_vec(vec![1, 1, 4, 4], data).unwrap(), true);
        let y = max_pool(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data, &[5.0, 7.0, 13.0, 15.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        let g = tape.grad(x).unwrap();
        assert_eq!(g.iter().sum::<f64>(), 4.0);
        assert_eq!(g[5], 1.0);
    }

    #[test]
    fn ties_route_gradient_to_first() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(vec![1, 1, 2, 2, 2], 1.0).unwrap(), true);
        let y = max_pool(&mut tape, x).unwrap();
        assert_eq!(tape.shape(y).dims(), &[1, 1, 1, 1, 1]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn odd_extent_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 5, 4]).unwrap());
        assert!(matches!(max_pool(&mut tape, x), Err(Error::Dimension(_))));
    }
}
