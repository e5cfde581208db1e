use crate::error::{Error, Result};
use crate::metrics::binarize;
use crate::model::Model;
use crate::tensor::Tensor;

/// Probabilities and the `p >= 0.5` mask, both `[1, spatial...]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub prob: Tensor<f32>,
    pub mask: Tensor<f32>,
}

/// Window origins along one axis: stride half the window, last window
/// flush with the end.
pub fn tile_starts(size: usize, window: usize) -> Result<Vec<usize>> {
    if window == 0 || window > size {
        return Err(Error::dim(format!("window {window} does not fit extent {size}")));
    }
    let stride = (window / 2).max(1);
    let mut starts: Vec<usize> = (0..=size - window).step_by(stride).collect();
    if *starts.last().expect("at least one start") != size - window {
        starts.push(size - window);
    }
    Ok(starts)
}

/// Row-major iteration over the blocks `offset + [0, size)` of a tensor
/// with dims `dims`, calling `f(flat_index_in_tensor, flat_index_in_block)`
/// for each contiguous run start along the last axis.
fn for_each_run(dims: &[usize], offset: &[usize], size: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = dims.len();
    let outer: usize = size[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    for block_row in 0..outer {
        let mut flat = 0;
        for a in 0..rank - 1 {
            flat = flat * dims[a] + idx[a] + offset[a];
        }
        f(flat * dims[rank - 1] + offset[rank - 1], block_row * size[rank - 1]);
        for a in (0..rank - 1).rev() {
            idx[a] += 1;
            if idx[a] < size[a] {
                break;
            }
            idx[a] = 0;
        }
    }
}

/// Tiled eval-mode prediction with 50% overlap; overlapping tiles are
/// averaged. `input` is `[C, spatial...]`.
pub fn sliding_window(model: &mut Model<f32>, input: &Tensor<f32>, window: &[usize]) -> Result<Tensor<f32>> {
    let dims = input.dims();
    let spatial = &dims[1..];
    if window.len() != spatial.len() {
        return Err(Error::dim(format!("window {window:?} does not match input {}", input.shape())));
    }
    let per_axis = spatial.iter().zip(window).map(|(&s, &w)| tile_starts(s, w)).collect::<Result<Vec<_>>>()?;
    let n: usize = spatial.iter().product();
    let mut sum = vec![0.0f64; n];
    let mut count = vec![0u32; n];
    let mut tile_dims = vec![dims[0]];
    tile_dims.extend(window);
    let mut out_dims = vec![1];
    out_dims.extend(window);
    let mut choice = vec![0usize; spatial.len()];
    loop {
        let start: Vec<usize> = choice.iter().zip(&per_axis).map(|(&c, s)| s[c]).collect();
        let mut offset = vec![0];
        offset.extend(&start);
        let mut tile = Vec::with_capacity(tile_dims.iter().product());
        for_each_run(dims, &offset, &tile_dims, |src, _| {
            tile.extend_from_slice(&input.data()[src..src + window[window.len() - 1]]);
        });
        let mut batch_dims = vec![1];
        batch_dims.extend(&tile_dims);
        let prob = model.predict(&Tensor::from_vec(batch_dims, tile)?)?;
        let mut sp_offset = vec![0];
        sp_offset.extend(&start);
        let mut full = vec![1];
        full.extend(spatial);
        for_each_run(&full, &sp_offset, &out_dims, |dst, src| {
            let run = window[window.len() - 1];
            for k in 0..run {
                sum[dst + k] += prob.data()[src + k] as f64;
                count[dst + k] += 1;
            }
        });
        let mut a = choice.len();
        loop {
            if a == 0 {
                let data = sum.iter().zip(&count).map(|(&s, &c)| (s / c as f64) as f32).collect();
                let mut shape = vec![1];
                shape.extend(spatial);
                return Tensor::from_vec(shape, data);
            }
            a -= 1;
            choice[a] += 1;
            if choice[a] < per_axis[a].len() {
                break;
            }
            choice[a] = 0;
        }
    }
}

/// Eval-mode inference on `[C, spatial...]`. With a window, inputs larger
/// than it along any axis are tiled; otherwise the whole input runs at once.
pub fn infer(model: &mut Model<f32>, input: &Tensor<f32>, window: Option<&[usize]>) -> Result<Inference> {
    let spatial = &input.dims()[1..];
    let tiled = window.is_some_and(|w| w.len() == spatial.len() && spatial.iter().zip(w).any(|(&s, &w)| s > w));
    let prob = if tiled {
        sliding_window(model, input, window.expect("checked"))?
    } else {
        let mut batch = vec![1];
        batch.extend(input.dims());
        let p = model.predict(&input.clone().reshape(batch)?)?;
        let mut shape = vec![1];
        shape.extend(spatial);
        p.reshape(shape)?
    };
    let mask = binarize(&prob, 0.5);
    Ok(Inference { prob, mask })
}
