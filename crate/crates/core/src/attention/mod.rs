//! Spatial and channel attention blocks and their summed composition.

mod capture;
mod channel;
mod spatial;

pub use capture::{AttentionCapture, AttentionMap};
pub use channel::{Cab2d, Cab3d};
pub use spatial::{Sab2d, Sab3d, DEFAULT_POSITION_BUDGET};

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Forward, ParamStore};
use crate::tensor::{Real, Var};

#[derive(Clone, Debug)]
pub enum SpatialAttention {
    Planar(Sab2d),
    Volumetric(Sab3d),
}

#[derive(Clone, Debug)]
pub enum ChannelAttention {
    Planar(Cab2d),
    Volumetric(Cab3d),
}

/// `F + SAB(F) + CAB(F)`, with either branch optional. Both branches off
/// is the identity.
#[derive(Clone, Debug)]
pub struct Csam {
    sab: Option<SpatialAttention>,
    cab: Option<ChannelAttention>,
}

impl Csam {
    /// Registers parameters under `{name}.sab.*` and `{name}.cab.*`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        spatial_rank: usize,
        sab: bool,
        cab: bool,
        position_budget: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let sab = match (sab, spatial_rank) {
            (false, _) => None,
            (true, 2) => Some(SpatialAttention::Planar(Sab2d::new(store, &format!("{name}.sab"), channels, rng)?)),
            (true, 3) => Some(SpatialAttention::Volumetric(Sab3d::new(
                store,
                &format!("{name}.sab"),
                channels,
                position_budget,
                rng,
            )?)),
            (true, r) => return Err(Error::Config(format!("attention needs 2 or 3 spatial axes, got {r}"))),
        };
        let cab = match (cab, spatial_rank) {
            (false, _) => None,
            (true, 2) => Some(ChannelAttention::Planar(Cab2d)),
            (true, 3) => Some(ChannelAttention::Volumetric(Cab3d::new(store, &format!("{name}.cab"), channels, rng)?)),
            (true, r) => return Err(Error::Config(format!("attention needs 2 or 3 spatial axes, got {r}"))),
        };
        Ok(Csam { sab, cab })
    }

    pub fn has_sab(&self) -> bool {
        self.sab.is_some()
    }

    pub fn has_cab(&self) -> bool {
        self.cab.is_some()
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let mut out = x;
        if let Some(sab) = &self.sab {
            let s = match sab {
                SpatialAttention::Planar(b) => b.forward(f, x)?,
                SpatialAttention::Volumetric(b) => b.forward(f, x)?,
            };
            out = f.tape.add(out, s)?;
        }
        if let Some(cab) = &self.cab {
            let c = match cab {
                ChannelAttention::Planar(b) => b.forward(f, x)?,
                ChannelAttention::Volumetric(b) => b.forward(f, x)?,
            };
            out = f.tape.add(out, c)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::tensor::{finite_diff_check, Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(dims: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        Tensor::from_vec(dims.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn zero_all(store: &mut ParamStore<f64>) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.name(id).ends_with("running_var") {
                store.get_mut(id).data_mut().fill(0.0);
            }
        }
    }

    fn run(
        store: &mut ParamStore<f64>,
        x: &Tensor<f64>,
        block: impl Fn(&mut Forward<'_, f64>, Var) -> Result<Var>,
    ) -> Tensor<f64> {
        let mut f = Forward::new(store, Mode::Train);
        let xv = f.input(x.clone());
        let y = block(&mut f, xv).unwrap();
        f.tape.tensor(y)
    }

    /// Relative error of the input gradient of `sum(w * block(x))`.
    fn grad_error(
        store: &mut ParamStore<f64>,
        x: &Tensor<f64>,
        block: impl Fn(&mut Forward<'_, f64>, Var) -> Result<Var>,
    ) -> f64 {
        let w = random(x.dims(), 99);
        finite_diff_check(
            |tape: &mut Tape<f64>, xv| {
                let t = std::mem::take(tape);
                let mut f = Forward::with_tape(store, Mode::Train, t);
                let y = block(&mut f, xv)?;
                let wv = f.tape.constant(w.clone());
                let p = f.tape.mul(y, wv)?;
                let s = f.tape.sum(p)?;
                *tape = f.into_tape();
                Ok(s)
            },
            x,
            1e-6,
        )
        .unwrap()
    }

    #[test]
    fn sab2d_zero_params_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let sab = Sab2d::new(&mut store, "sab", 2, &mut rng).unwrap();
        zero_all(&mut store);
        let x = random(&[1, 2, 4, 4], 1);
        let y = run(&mut store, &x, |f, v| sab.forward(f, v));
        assert_eq!(y.max_abs_diff(&x), 0.0);
    }

    #[test]
    fn sab2d_single_position_adds_value_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let sab = Sab2d::new(&mut store, "sab", 2, &mut rng).unwrap();
        let x = random(&[1, 2, 1, 1], 1);
        let y = run(&mut store, &x, |f, v| sab.forward(f, v));
        let vb = run(&mut store, &x, |f, v| sab.v.forward(f, v));
        for i in 0..2 {
            assert!((y.data()[i] - (x.data()[i] + vb.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn sab2d_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let sab = Sab2d::new(&mut store, "sab", 2, &mut rng).unwrap();
        let x = random(&[1, 2, 4, 4], 5);
        let err = grad_error(&mut store, &x, |f, v| sab.forward(f, v));
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn cab2d_single_channel_doubles() {
        let mut store = ParamStore::new();
        let x = random(&[2, 1, 3, 3], 2).map(|v| v * 0.3);
        let y = run(&mut store, &x, |f, v| Cab2d.forward(f, v));
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn cab2d_zero_input_and_identical_channels() {
        let mut store = ParamStore::new();
        let zero = Tensor::zeros(vec![1, 3, 2, 2]).unwrap();
        let y = run(&mut store, &zero, |f, v| Cab2d.forward(f, v));
        assert!(y.data().iter().all(|&v| v == 0.0));

        let c = random(&[1, 1, 2, 3], 3).into_data();
        let x = Tensor::from_vec(vec![1, 2, 2, 3], [c.clone(), c].concat()).unwrap();
        let y = run(&mut store, &x, |f, v| Cab2d.forward(f, v));
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn cab2d_is_permutation_equivariant() {
        let mut store = ParamStore::new();
        let x = random(&[1, 3, 2, 2], 6);
        let perm = [2usize, 0, 1];
        let px: Vec<f64> = perm.iter().flat_map(|&c| x.data()[c * 4..c * 4 + 4].to_vec()).collect();
        let px = Tensor::from_vec(vec![1, 3, 2, 2], px).unwrap();
        let y = run(&mut store, &x, |f, v| Cab2d.forward(f, v));
        let py = run(&mut store, &px, |f, v| Cab2d.forward(f, v));
        for (i, &c) in perm.iter().enumerate() {
            for s in 0..4 {
                assert!((py.data()[i * 4 + s] - y.data()[c * 4 + s]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cab2d_gradient() {
        let mut store = ParamStore::new();
        let x = random(&[1, 2, 4, 4], 7);
        let err = grad_error(&mut store, &x, |f, v| Cab2d.forward(f, v));
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn sab3d_identities_and_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let sab = Sab3d::new(&mut store, "sab", 2, 8, &mut rng).unwrap();
        let one = random(&[1, 2, 1, 1, 1], 9);
        let y = run(&mut store, &one, |f, v| sab.forward(f, v));
        let vb = run(&mut store, &one, |f, v| sab.v.forward(f, v));
        for i in 0..2 {
            assert!((y.data()[i] - (one.data()[i] + vb.data()[i])).abs() < 1e-12);
        }
        let big = random(&[1, 2, 2, 2, 4], 9);
        let mut f = Forward::new(&mut store, Mode::Train);
        let xv = f.input(big);
        assert!(matches!(sab.forward(&mut f, xv), Err(Error::Resource(_))));
        drop(f);

        zero_all(&mut store);
        let x = random(&[1, 2, 2, 2, 2], 10);
        let y = run(&mut store, &x, |f, v| sab.forward(f, v));
        assert_eq!(y.max_abs_diff(&x), 0.0);
    }

    #[test]
    fn sab3d_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let sab = Sab3d::new(&mut store, "sab", 2, 64, &mut rng).unwrap();
        let x = random(&[1, 2, 2, 2, 2], 12);
        let err = grad_error(&mut store, &x, |f, v| sab.forward(f, v));
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn cab3d_identities_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut store = ParamStore::new();
        let cab = Cab3d::new(&mut store, "cab", 1, &mut rng).unwrap();
        let x = random(&[1, 1, 2, 2, 2], 14);
        let y = run(&mut store, &x, |f, v| cab.forward(f, v));
        let vb = run(&mut store, &x, |f, v| cab.v.forward(f, v));
        for i in 0..8 {
            assert!((y.data()[i] - (x.data()[i] + vb.data()[i])).abs() < 1e-12);
        }

        let mut store = ParamStore::new();
        let cab = Cab3d::new(&mut store, "cab", 2, &mut rng).unwrap();
        let x = random(&[1, 2, 2, 2, 2], 15);
        let err = grad_error(&mut store, &x, |f, v| cab.forward(f, v));
        assert!(err < 1e-5, "{err}");
        zero_all(&mut store);
        let y = run(&mut store, &x, |f, v| cab.forward(f, v));
        assert_eq!(y.max_abs_diff(&x), 0.0);
    }

    #[test]
    fn csam_flag_combinations() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = random(&[1, 2, 2, 2, 2], 17);
        for (sab, cab, factor) in [(false, false, 1.0), (true, false, 2.0), (false, true, 2.0), (true, true, 3.0)] {
            let mut store = ParamStore::new();
            let csam = Csam::new(&mut store, "csam", 2, 3, sab, cab, 64, &mut rng).unwrap();
            if !sab && !cab {
                assert!(store.is_empty());
            }
            zero_all(&mut store);
            let y = run(&mut store, &x, |f, v| csam.forward(f, v));
            let want = x.map(|v| v * factor);
            assert!(y.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn planar_csam_sums_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut store = ParamStore::new();
        let csam = Csam::new(&mut store, "csam", 2, 2, true, true, 64, &mut rng).unwrap();
        zero_all(&mut store);
        let x = random(&[1, 2, 4, 4], 19);
        let y = run(&mut store, &x, |f, v| csam.forward(f, v));
        let c = run(&mut store, &x, |f, v| Cab2d.forward(f, v));
        let want = Tensor::from_vec(
            x.dims().to_vec(),
            x.data().iter().zip(c.data()).map(|(a, b)| 2.0 * a + b).collect(),
        )
        .unwrap();
        assert!(y.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn captured_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut store = ParamStore::new();
        let csam = Csam::new(&mut store, "csam", 3, 3, true, true, 64, &mut rng).unwrap();
        let x = random(&[1, 3, 2, 2, 4], 21);
        let mut f = Forward::new(&mut store, Mode::Train);
        f.enable_capture(5);
        let xv = f.input(x);
        csam.forward(&mut f, xv).unwrap();
        let cap = f.take_capture().unwrap();
        let maps = cap.maps();
        assert_eq!(maps.len(), 2);
        assert_eq!((maps[0].rows, maps[0].cols), (5, 16));
        assert_eq!((maps[1].rows, maps[1].cols), (3, 3));
        for m in maps {
            for r in 0..m.rows {
                assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        let pgm = maps[0].to_pgm_bytes();
        assert!(pgm.starts_with(b"P5\n16 5\n255\n"));
        assert_eq!(pgm.len(), b"P5\n16 5\n255\n".len() + 80);
    }
}
