//! Samples, synthetic generators, augmentation, fold splitting and file I/O.

mod augment;
mod io;
mod noise;
mod split;
mod synth;

pub use augment::{augment, crop, flip, rotate, AugmentConfig, GAMMA_RANGE};
pub use io::{
    load_dataset, load_sample, parse_pgm, parse_volume, read_image, read_input, read_label, read_manifest,
    read_mask, read_pgm, read_volume, read_volume_mask, save_sample, write_image, write_input, write_label,
    write_manifest, write_mask, write_pgm, write_volume, write_volume_mask, ManifestEntry, VolumeDtype,
};
pub use noise::{background_variance, sample_variance, variance_bounds};
pub use split::{kfold_split, train_indices};
pub use synth::{synth_2d, synth_3d, synthesize, SynthConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Provenance of a sample.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleMeta {
    pub seed: u64,
    pub noise_variance: f64,
    /// Curves (2D) or trees (3D) drawn.
    pub structures: usize,
    pub bifurcations: usize,
}

/// An input with its ground truth, each shaped `[1, spatial...]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub centerline: Option<Tensor<f32>>,
    pub meta: SampleMeta,
}

impl Sample {
    pub fn spatial(&self) -> &[usize] {
        &self.input.dims()[1..]
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.dims().first() != Some(&1) || self.input.dims().len() < 3 {
            return Err(Error::dim(format!("sample input must be [1, spatial...], got {}", self.input.shape())));
        }
        let planes = std::iter::once(&self.mask).chain(self.centerline.as_ref());
        for p in planes {
            if p.dims() != self.input.dims() {
                return Err(Error::dim(format!("plane shape {} differs from input {}", p.shape(), self.input.shape())));
            }
            if p.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::contract("mask planes must be binary"));
            }
        }
        if let Some(c) = &self.centerline {
            if c.data().iter().zip(self.mask.data()).any(|(&c, &m)| c > m) {
                return Err(Error::contract("centerline is not contained in the mask"));
            }
        }
        Ok(())
    }
}

/// Stack samples into `[B, 1, spatial...]` input and mask tensors.
pub fn stack(samples: &[&Sample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let first = samples.first().ok_or_else(|| Error::contract("cannot stack an empty batch"))?;
    let mut shape = vec![samples.len()];
    shape.extend(first.input.dims());
    let mut input = Vec::with_capacity(shape.iter().product());
    let mut mask = Vec::with_capacity(input.capacity());
    for s in samples {
        if s.input.dims() != first.input.dims() {
            return Err(Error::dim(format!("batch mixes shapes {} and {}", first.input.shape(), s.input.shape())));
        }
        input.extend_from_slice(s.input.data());
        mask.extend_from_slice(s.mask.data());
    }
    Ok((Tensor::from_vec(shape.clone(), input)?, Tensor::from_vec(shape, mask)?))
}
