use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::check_pair;

pub const CENTERLINE_TOLERANCE: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CenterlineScores {
    /// Fraction of ground-truth centerline pixels within tolerance of the
    /// predicted skeleton; `None` when the ground truth is empty.
    pub se: Option<f64>,
    /// Fraction of predicted skeleton pixels farther than the tolerance from
    /// the ground truth; `None` when the skeleton is empty.
    pub fdr: Option<f64>,
}

/// Zhang-Suen thinning of a binary `h x w` image. Pixels outside the image
/// count as background.
pub fn thin(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut img = mask.to_vec();
    let at = |img: &[bool], i: isize, j: isize| -> u8 {
        (i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w && img[i as usize * w + j as usize]) as u8
    };
    let mut marked = Vec::new();
    loop {
        let mut changed = false;
        for pass in 0..2 {
            marked.clear();
            for i in 0..h as isize {
                for j in 0..w as isize {
                    if !img[i as usize * w + j as usize] {
                        continue;
                    }
                    // P2..P9 clockwise from north.
                    let p = [
                        at(&img, i - 1, j),
                        at(&img, i - 1, j + 1),
                        at(&img, i, j + 1),
                        at(&img, i + 1, j + 1),
                        at(&img, i + 1, j),
                        at(&img, i + 1, j - 1),
                        at(&img, i, j - 1),
                        at(&img, i - 1, j - 1),
                    ];
                    let b: u8 = p.iter().sum();
                    let a = (0..8).filter(|&k| p[k] == 0 && p[(k + 1) % 8] == 1).count();
                    let (p2, p4, p6, p8) = (p[0], p[2], p[4], p[6]);
                    let cond = if pass == 0 {
                        p2 * p4 * p6 == 0 && p4 * p6 * p8 == 0
                    } else {
                        p2 * p4 * p8 == 0 && p2 * p6 * p8 == 0
                    };
                    if (2..=6).contains(&b) && a == 1 && cond {
                        marked.push(i as usize * w + j as usize);
                    }
                }
            }
            for &m in &marked {
                img[m] = false;
            }
            changed |= !marked.is_empty();
        }
        if !changed {
            return img;
        }
    }
}

/// Squared distance along one line, lower envelope of parabolas.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let first = match f.iter().position(|x| x.is_finite()) {
        Some(q) => q,
        None => {
            out.fill(f64::INFINITY);
            return;
        }
    };
    v.push(first);
    z.push(f64::NEG_INFINITY);
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = *v.last().expect("non-empty envelope");
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= *z.last().expect("non-empty envelope") {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < z.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every grid point to the nearest
/// seed, row-major over `dims`. Infinite everywhere when there are no seeds.
pub fn squared_distance_transform(seeds: &[bool], dims: &[usize]) -> Vec<f64> {
    let mut d: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let total = d.len();
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in 0..dims.len() {
        let n = dims[axis];
        let stride: usize = dims[axis + 1..].iter().product();
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        for base in 0..total {
            if !(base / stride).is_multiple_of(n) {
                continue;
            }
            for (q, l) in line.iter_mut().enumerate() {
                *l = d[base + q * stride];
            }
            edt_1d(&line, &mut out, &mut v, &mut z);
            for (q, o) in out.iter().enumerate() {
                d[base + q * stride] = *o;
            }
        }
    }
    d
}

fn plane(t: &Tensor<f32>) -> Result<(usize, usize)> {
    let d = t.dims();
    if d.len() < 2 || d[..d.len() - 2].iter().any(|&x| x != 1) {
        return Err(Error::dim(format!("centerline metrics need a single 2D plane, got {}", t.shape())));
    }
    Ok((d[d.len() - 2], d[d.len() - 1]))
}

/// Match a skeleton against a reference centerline on an `h x w` grid.
/// Monotone in the skeleton: adding skeleton pixels never lowers SE.
pub fn match_centerline(skeleton: &[bool], gt: &[bool], h: usize, w: usize, tolerance: f64) -> CenterlineScores {
    let tol2 = tolerance * tolerance;
    let to_gt = squared_distance_transform(gt, &[h, w]);
    let to_pred = squared_distance_transform(skeleton, &[h, w]);
    let (mut traced, mut false_hits) = (0usize, 0usize);
    let (mut gt_count, mut gt_found) = (0usize, 0usize);
    for i in 0..h * w {
        if skeleton[i] {
            traced += 1;
            false_hits += (to_gt[i] > tol2) as usize;
        }
        if gt[i] {
            gt_count += 1;
            gt_found += (to_pred[i] <= tol2) as usize;
        }
    }
    if traced == 0 {
        log::warn!("empty predicted skeleton; centerline FDR undefined");
    }
    CenterlineScores {
        se: (gt_count > 0).then(|| gt_found as f64 / gt_count as f64),
        fdr: (traced > 0).then(|| false_hits as f64 / traced as f64),
    }
}

/// Thin `pred` to a skeleton, then match it against the ground-truth
/// centerline within a Euclidean `tolerance`.
pub fn centerline_metrics(pred: &Tensor<f32>, gt_centerline: &Tensor<f32>, tolerance: f64) -> Result<CenterlineScores> {
    check_pair(pred, gt_centerline)?;
    let (h, w) = plane(pred)?;
    let bits = |t: &Tensor<f32>| t.data().iter().map(|&v| v == 1.0).collect::<Vec<_>>();
    let skeleton = thin(&bits(pred), h, w);
    Ok(match_centerline(&skeleton, &bits(gt_centerline), h, w, tolerance))
}
