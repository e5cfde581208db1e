//! Training-time augmentation: random crop, in-plane rotation, flips and
//! gamma contrast. The same geometric transform is applied to every plane
//! of a sample.

use rand::Rng;

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Spatial crop size; `None` keeps the full extent.
    pub crop: Option<Vec<usize>>,
    /// Rotation angle is drawn from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    /// Reverse the width axis with probability 0.5.
    pub flip_horizontal: bool,
    /// Reverse the height axis with probability 0.5.
    pub flip_vertical: bool,
    /// Reverse every spatial axis with probability 0.5.
    pub mirror: bool,
    /// Random gamma in `[0.7, 1.3]` on the input.
    pub contrast: bool,
}

pub const GAMMA_RANGE: (f64, f64) = (0.7, 1.3);

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            crop: None,
            rotation_deg: 0.0,
            flip_horizontal: false,
            flip_vertical: false,
            mirror: false,
            contrast: false,
        }
    }

    pub fn planar() -> Self {
        AugmentConfig {
            crop: Some(vec![384, 384]),
            rotation_deg: 45.0,
            flip_horizontal: true,
            flip_vertical: true,
            mirror: true,
            contrast: true,
        }
    }

    /// Center-cropped clinical-style volumes.
    pub fn volumetric_mra() -> Self {
        AugmentConfig { crop: Some(vec![224, 224, 64]), ..Self::planar() }
    }

    pub fn volumetric_synthetic() -> Self {
        AugmentConfig { crop: Some(vec![128, 128, 128]), ..Self::planar() }
    }

    pub fn with_crop(mut self, crop: Option<Vec<usize>>) -> Self {
        self.crop = crop;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rotation_deg >= 0.0 && self.rotation_deg <= 180.0) {
            return Err(Error::Config(format!("rotation range {} must lie in [0, 180]", self.rotation_deg)));
        }
        if let Some(c) = &self.crop {
            if c.is_empty() || c.contains(&0) {
                return Err(Error::Config(format!("crop {c:?} must be non-empty and positive")));
            }
        }
        Ok(())
    }
}

fn spatial(t: &Tensor<f32>) -> Vec<usize> {
    t.dims()[1..].to_vec()
}

fn planes(s: &Sample) -> usize {
    2 + s.centerline.is_some() as usize
}

fn map_planes(s: &Sample, mut f: impl FnMut(&Tensor<f32>, bool) -> Result<Tensor<f32>>) -> Result<Sample> {
    Ok(Sample {
        input: f(&s.input, false)?,
        mask: f(&s.mask, true)?,
        centerline: s.centerline.as_ref().map(|c| f(c, true)).transpose()?,
        meta: s.meta.clone(),
    })
}

/// Crop `size` starting at `offset` along every spatial axis.
pub fn crop(s: &Sample, offset: &[usize], size: &[usize]) -> Result<Sample> {
    let dims = spatial(&s.input);
    if size.len() != dims.len() || offset.len() != dims.len() {
        return Err(Error::dim(format!("crop {size:?} does not match sample extent {dims:?}")));
    }
    if dims.iter().zip(size).zip(offset).any(|((&d, &c), &o)| c + o > d) {
        return Err(Error::dim(format!("crop {size:?} at {offset:?} exceeds sample extent {dims:?}")));
    }
    let rank = dims.len();
    map_planes(s, |t, _| {
        let src = t.data();
        let mut out = Vec::with_capacity(size.iter().product());
        let mut idx = vec![0usize; rank];
        loop {
            let mut flat = 0;
            for a in 0..rank {
                flat = flat * dims[a] + idx[a] + offset[a];
            }
            // Copy a contiguous run along the last axis.
            let run = size[rank - 1];
            out.extend_from_slice(&src[flat..flat + run]);
            let mut a = rank - 1;
            loop {
                if a == 0 {
                    let mut shape = vec![1];
                    shape.extend(size);
                    return Tensor::from_vec(shape, out);
                }
                a -= 1;
                idx[a] += 1;
                if idx[a] < size[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
    })
}

/// Reverse the listed spatial axes (0 = height).
pub fn flip(s: &Sample, axes: &[usize]) -> Result<Sample> {
    let dims = spatial(&s.input);
    if let Some(&a) = axes.iter().find(|&&a| a >= dims.len()) {
        return Err(Error::dim(format!("flip axis {a} out of range for {dims:?}")));
    }
    let rank = dims.len();
    map_planes(s, |t, _| {
        let src = t.data();
        let mut out = vec![0.0f32; src.len()];
        let mut idx = vec![0usize; rank];
        for &v in src {
            let mut flat = 0;
            for a in 0..rank {
                let i = if axes.contains(&a) { dims[a] - 1 - idx[a] } else { idx[a] };
                flat = flat * dims[a] + i;
            }
            out[flat] = v;
            for a in (0..rank).rev() {
                idx[a] += 1;
                if idx[a] < dims[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        Tensor::from_vec(t.dims().to_vec(), out)
    })
}

/// Mean input intensity over mask background, or over everything when the
/// mask is full.
fn background_mean(s: &Sample) -> f32 {
    let (mut sum, mut n) = (0.0f64, 0usize);
    for (&v, &m) in s.input.data().iter().zip(s.mask.data()) {
        if m == 0.0 {
            sum += v as f64;
            n += 1;
        }
    }
    if n == 0 {
        return (s.input.data().iter().map(|&v| v as f64).sum::<f64>() / s.input.numel() as f64) as f32;
    }
    (sum / n as f64) as f32
}

/// Rotate each (height, width) plane about its center by `degrees`
/// (counter-clockwise in image coordinates). 3D samples rotate about the
/// depth axis. Inputs resample bilinearly, masks by nearest neighbor;
/// samples outside the source take the background mean (input) or 0 (masks).
pub fn rotate(s: &Sample, degrees: f64) -> Result<Sample> {
    let dims = spatial(&s.input);
    let (h, w) = (dims[0], dims[1]);
    let depth: usize = dims[2..].iter().product();
    let fill = background_mean(s);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (ci, cj) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    map_planes(s, |t, nearest| {
        let src = t.data();
        let at = |i: usize, j: usize, k: usize| src[(i * w + j) * depth + k];
        let mut out = vec![0.0f32; src.len()];
        for i in 0..h {
            for j in 0..w {
                let (di, dj) = (i as f64 - ci, j as f64 - cj);
                // Inverse map: rotate the output point back by -degrees.
                let si = cos * di + sin * dj + ci;
                let sj = -sin * di + cos * dj + cj;
                for k in 0..depth {
                    let v = if nearest {
                        let (ri, rj) = (si.round(), sj.round());
                        if ri < 0.0 || rj < 0.0 || ri > h as f64 - 1.0 || rj > w as f64 - 1.0 {
                            0.0
                        } else {
                            at(ri as usize, rj as usize, k)
                        }
                    } else if si < 0.0 || sj < 0.0 || si > h as f64 - 1.0 || sj > w as f64 - 1.0 {
                        fill
                    } else {
                        let (i0, j0) = (si.floor() as usize, sj.floor() as usize);
                        let (i1, j1) = ((i0 + 1).min(h - 1), (j0 + 1).min(w - 1));
                        let (fi, fj) = ((si - i0 as f64) as f32, (sj - j0 as f64) as f32);
                        let top = at(i0, j0, k) * (1.0 - fj) + at(i0, j1, k) * fj;
                        let bottom = at(i1, j0, k) * (1.0 - fj) + at(i1, j1, k) * fj;
                        top * (1.0 - fi) + bottom * fi
                    };
                    out[(i * w + j) * depth + k] = v;
                }
            }
        }
        Tensor::from_vec(t.dims().to_vec(), out)
    })
}

/// Random augmentation. Draw order: crop offsets, rotation angle, the three
/// flips, gamma; disabled steps draw nothing, so the identity config leaves
/// both the sample and the generator untouched.
pub fn augment<R: Rng>(s: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Result<Sample> {
    cfg.validate()?;
    let dims = spatial(&s.input);
    let mut out = s.clone();
    if let Some(size) = &cfg.crop {
        if size.len() != dims.len() || dims.iter().zip(size).any(|(&d, &c)| c > d) {
            return Err(Error::dim(format!("crop {size:?} larger than sample extent {dims:?}")));
        }
        let offset: Vec<usize> = dims.iter().zip(size).map(|(&d, &c)| rng.random_range(0..=d - c)).collect();
        out = crop(&out, &offset, size)?;
    }
    if cfg.rotation_deg > 0.0 {
        let angle = rng.random_range(-cfg.rotation_deg..=cfg.rotation_deg);
        out = rotate(&out, angle)?;
    }
    let rank = dims.len();
    if cfg.flip_horizontal && rng.random_bool(0.5) {
        out = flip(&out, &[1])?;
    }
    if cfg.flip_vertical && rng.random_bool(0.5) {
        out = flip(&out, &[0])?;
    }
    if cfg.mirror && rng.random_bool(0.5) {
        out = flip(&out, &(0..rank).collect::<Vec<_>>())?;
    }
    if cfg.contrast {
        let gamma = rng.random_range(GAMMA_RANGE.0..=GAMMA_RANGE.1) as f32;
        out.input = out.input.map(|v| v.powf(gamma));
    }
    debug_assert_eq!(planes(&out), planes(s));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_2d, synth_3d, SampleMeta, SynthConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// A sample whose three planes all encode the same coordinate grid.
    fn grid_sample(dims: &[usize]) -> Sample {
        let n: usize = dims.iter().product();
        let mut shape = vec![1];
        shape.extend(dims);
        let bits: Vec<f32> = (0..n).map(|i| ((i * 7919) % 5 < 2) as u8 as f32).collect();
        let t = Tensor::from_vec(shape, bits).unwrap();
        Sample { input: t.clone(), mask: t.clone(), centerline: Some(t), meta: SampleMeta::default() }
    }

    #[test]
    fn identity_config_is_noop() {
        let s = synth_2d(&SynthConfig::planar(32).with_seed(4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&s, &AugmentConfig::identity(), &mut rng).unwrap(), s);
        let mut fresh = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(rng.random::<u64>(), fresh.random::<u64>());
    }

    #[test]
    fn flips_are_involutions() {
        let s = synth_3d(&SynthConfig::volumetric(16).with_seed(2)).unwrap();
        for axes in [vec![0], vec![1], vec![2], vec![0, 1, 2]] {
            assert_eq!(flip(&flip(&s, &axes).unwrap(), &axes).unwrap(), s);
        }
        let g = grid_sample(&[2, 3]);
        let f = flip(&g, &[1]).unwrap();
        assert_eq!(f.input.data()[0], g.input.data()[2]);
    }

    #[test]
    fn crop_extracts_the_window() {
        let data: Vec<f32> = (0..20).map(|v| v as f32).collect();
        let t = Tensor::from_vec(vec![1, 4, 5], data).unwrap();
        let s = Sample { input: t.clone(), mask: t, centerline: None, meta: SampleMeta::default() };
        let c = crop(&s, &[1, 2], &[2, 3]).unwrap();
        assert_eq!(c.input.data(), &[7.0, 8.0, 9.0, 12.0, 13.0, 14.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let big = AugmentConfig::identity().with_crop(Some(vec![5, 5]));
        assert!(matches!(augment(&s, &big, &mut rng), Err(Error::Dimension(_))));
    }

    #[test]
    fn rotation_by_quarter_turn_permutes_exactly() {
        let g = grid_sample(&[5, 5]);
        let r = rotate(&g, 90.0).unwrap();
        let back = rotate(&r, -90.0).unwrap();
        assert_eq!(back.mask, g.mask);
        assert!(back.input.max_abs_diff(&g.input) < 1e-5);
    }

    /// IoU over the inscribed disk, the region that stays in view under
    /// any rotation, so only resampling loss is measured.
    fn disk_iou(a: &Tensor<f32>, b: &Tensor<f32>, n: usize) -> f64 {
        let c = (n as f64 - 1.0) / 2.0;
        let (mut inter, mut union) = (0usize, 0usize);
        for (idx, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
            let (i, j) = ((idx / n) as f64, (idx % n) as f64);
            if ((i - c).powi(2) + (j - c).powi(2)).sqrt() <= c {
                inter += (x == 1.0 && y == 1.0) as usize;
                union += (x == 1.0 || y == 1.0) as usize;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn rotation_round_trip_keeps_mask() {
        for seed in 0..5 {
            let cfg = SynthConfig { width: (6.0, 10.0), ..SynthConfig::planar(128).with_seed(seed) };
            let s = synth_2d(&cfg).unwrap();
            let back = rotate(&rotate(&s, 45.0).unwrap(), -45.0).unwrap();
            let score = disk_iou(&back.mask, &s.mask, 128);
            assert!(score >= 0.95, "seed {seed}: IoU {score}");
        }
    }

    #[test]
    fn all_planes_share_the_transform() {
        let g = grid_sample(&[12, 10, 6]);
        let cfg = AugmentConfig {
            crop: Some(vec![8, 8, 4]),
            rotation_deg: 0.0,
            contrast: false,
            ..AugmentConfig::planar()
        };
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = augment(&g, &cfg, &mut rng).unwrap();
            assert_eq!(a.input, a.mask);
            assert_eq!(Some(&a.mask), a.centerline.as_ref());
        }
        // Nearest-neighbour planes stay aligned under rotation too.
        let r = rotate(&g, 30.0).unwrap();
        assert_eq!(Some(&r.mask), r.centerline.as_ref());
    }

    #[test]
    fn augment_is_deterministic_per_seed() {
        let s = synth_2d(&SynthConfig::planar(64).with_seed(9)).unwrap();
        let cfg = AugmentConfig::planar().with_crop(Some(vec![48, 48]));
        let run = |seed| augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(run(3), run(3));
        let a = run(3);
        assert!(a.mask.data().iter().all(|&m| m == 0.0 || m == 1.0));
        assert!(a.input.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
