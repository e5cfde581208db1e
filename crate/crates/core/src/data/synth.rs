//! Synthetic curvilinear structures: smooth 2D curves and 3D branching
//! tube trees with exact masks and centerlines.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Sample, SampleMeta};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// 2 or 3.
    pub dims: usize,
    /// `[H, W]` or `[H, W, D]`.
    pub size: Vec<usize>,
    /// Inclusive range for the number of curves (2D) or trees (3D).
    pub structures: (usize, usize),
    /// Full curve width range in pixels (2D).
    pub width: (f64, f64),
    /// Root tube radius range in voxels (3D).
    pub radius: (f64, f64),
    /// Chance that a tube segment splits in two (3D).
    pub bifurcation_prob: f64,
    /// Segments per root-to-leaf path (3D).
    pub max_depth: usize,
    /// Intensity means on the 0-255 scale.
    pub fg_mean: f64,
    pub bg_mean: f64,
    /// Variance of additive Gaussian noise on the 0-255 scale.
    pub noise_variance: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn planar(size: usize) -> Self {
        SynthConfig {
            dims: 2,
            size: vec![size, size],
            structures: (3, 6),
            width: (2.0, 5.0),
            radius: (1.0, 2.5),
            bifurcation_prob: 0.5,
            max_depth: 4,
            fg_mean: 200.0,
            bg_mean: 50.0,
            noise_variance: 0.0,
            seed: 0,
        }
    }

    pub fn volumetric(size: usize) -> Self {
        SynthConfig { dims: 3, size: vec![size; 3], structures: (1, 2), ..Self::planar(size) }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_noise(mut self, variance: f64) -> Self {
        self.noise_variance = variance;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dims != 2 && self.dims != 3 {
            return bad(format!("dims must be 2 or 3, got {}", self.dims));
        }
        if self.size.len() != self.dims || self.size.contains(&0) {
            return bad(format!("size {:?} does not describe a {}D grid", self.size, self.dims));
        }
        if self.structures.0 > self.structures.1 {
            return bad(format!("structure range {:?} is empty", self.structures));
        }
        for (name, (lo, hi)) in [("width", self.width), ("radius", self.radius)] {
            if !(lo >= 1.0 && hi >= lo) {
                return bad(format!("{name} range ({lo}, {hi}) must satisfy 1 <= min <= max"));
            }
        }
        if !(0.0..=1.0).contains(&self.bifurcation_prob) {
            return bad(format!("bifurcation_prob {} outside [0, 1]", self.bifurcation_prob));
        }
        if self.max_depth == 0 {
            return bad("max_depth must be at least 1".into());
        }
        if !(self.noise_variance >= 0.0) {
            return bad(format!("noise_variance {} must be >= 0", self.noise_variance));
        }
        Ok(())
    }
}

/// Raster accumulator on a `[H, W, D]` grid (`D = 1` for 2D).
struct Canvas {
    dims: [usize; 3],
    planar: bool,
    mask: Vec<bool>,
    weight: Vec<f32>,
    centerline: Vec<bool>,
}

impl Canvas {
    fn new(size: &[usize]) -> Self {
        let (dims, planar) = match *size {
            [h, w] => ([h, w, 1], true),
            [h, w, d] => ([h, w, d], false),
            _ => unreachable!("validated"),
        };
        let n = dims.iter().product();
        Canvas { dims, planar, mask: vec![false; n], weight: vec![0.0; n], centerline: vec![false; n] }
    }

    fn index(&self, p: [usize; 3]) -> usize {
        (p[0] * self.dims[1] + p[1]) * self.dims[2] + p[2]
    }

    fn profile(d: f64, r: f64) -> f32 {
        let s = (0.75 * r).max(0.5);
        (-0.5 * (d / s) * (d / s)).exp() as f32
    }

    /// Mark the ball (disk when planar) of radius `r` around `c`, and the
    /// grid point nearest `c` as centerline.
    fn stamp(&mut self, c: [f64; 3], r: f64) {
        let axes = if self.planar { 2 } else { 3 };
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..axes {
            let l = (c[a] - r).floor().max(0.0);
            let h = (c[a] + r).ceil().min(self.dims[a] as f64 - 1.0);
            if h < l {
                return;
            }
            lo[a] = l as usize;
            hi[a] = h as usize;
        }
        for i in lo[0]..=hi[0] {
            for j in lo[1]..=hi[1] {
                for k in lo[2]..=hi[2] {
                    let d2: f64 = (0..axes).map(|a| ([i, j, k][a] as f64 - c[a]).powi(2)).sum();
                    let d = d2.sqrt();
                    if d <= r {
                        let idx = self.index([i, j, k]);
                        self.mask[idx] = true;
                        self.weight[idx] = self.weight[idx].max(Self::profile(d, r));
                    }
                }
            }
        }
        let mut p = [0usize; 3];
        for a in 0..axes {
            let v = c[a].round();
            if v < 0.0 || v > self.dims[a] as f64 - 1.0 {
                return;
            }
            p[a] = v as usize;
        }
        let idx = self.index(p);
        let d: f64 = (0..axes).map(|a| (p[a] as f64 - c[a]).powi(2)).sum::<f64>().sqrt();
        self.centerline[idx] = true;
        self.mask[idx] = true;
        self.weight[idx] = self.weight[idx].max(Self::profile(d, r));
    }

    fn finish(self, cfg: &SynthConfig, rng: &mut ChaCha8Rng, meta: SampleMeta) -> Result<Sample> {
        let span = cfg.fg_mean - cfg.bg_mean;
        let mut values: Vec<f64> = self
            .mask
            .iter()
            .zip(&self.weight)
            .map(|(&m, &w)| if m { cfg.bg_mean + span * w as f64 } else { cfg.bg_mean })
            .collect();
        if cfg.noise_variance > 0.0 {
            let normal = Normal::new(0.0, cfg.noise_variance.sqrt())
                .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;
            for v in &mut values {
                *v += normal.sample(rng);
            }
        }
        let mut shape = vec![1];
        shape.extend(&cfg.size);
        let input = values.iter().map(|v| (v.clamp(0.0, 255.0) / 255.0) as f32).collect();
        let bin = |b: &[bool]| b.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect();
        Ok(Sample {
            input: Tensor::from_vec(shape.clone(), input)?,
            mask: Tensor::from_vec(shape.clone(), bin(&self.mask))?,
            centerline: Some(Tensor::from_vec(shape, bin(&self.centerline))?),
            meta,
        })
    }
}

fn draw_count(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> usize {
    let n = rng.random_range(cfg.structures.0..=cfg.structures.1);
    if n == 0 {
        log::warn!("synthetic sample with seed {} has no structures; foreground is empty", cfg.seed);
    }
    n
}

fn catmull_rom(p0: [f64; 2], p1: [f64; 2], p2: [f64; 2], p3: [f64; 2], t: f64) -> [f64; 2] {
    let (t2, t3) = (t * t, t * t * t);
    let mut out = [0.0; 2];
    for a in 0..2 {
        out[a] = 0.5
            * (2.0 * p1[a]
                + (-p0[a] + p2[a]) * t
                + (2.0 * p0[a] - 5.0 * p1[a] + 4.0 * p2[a] - p3[a]) * t2
                + (-p0[a] + 3.0 * p1[a] - 3.0 * p2[a] + p3[a]) * t3);
    }
    out
}

/// Smooth random curves through jittered control points, rasterized with
/// per-curve width and a Gaussian cross-section profile.
pub fn synth_2d(cfg: &SynthConfig) -> Result<Sample> {
    cfg.validate()?;
    if cfg.dims != 2 {
        return Err(Error::Config("synth_2d needs dims = 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut canvas = Canvas::new(&cfg.size);
    let (h, w) = (cfg.size[0] as f64, cfg.size[1] as f64);
    let extent = h.min(w);
    let count = draw_count(cfg, &mut rng);
    for _ in 0..count {
        let u: f64 = rng.random();
        let width = cfg.width.0 + u * (cfg.width.1 - cfg.width.0);
        let mut pts = vec![[rng.random_range(0.0..h), rng.random_range(0.0..w)]];
        let mut heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        for _ in 0..5 {
            let step = extent * rng.random_range(0.2..0.35);
            heading += rng.random_range(-0.6..0.6);
            let last = *pts.last().expect("non-empty");
            pts.push([last[0] + step * heading.sin(), last[1] + step * heading.cos()]);
        }
        let n = pts.len();
        for s in 0..n - 1 {
            let p0 = pts[s.saturating_sub(1)];
            let (p1, p2) = (pts[s], pts[s + 1]);
            let p3 = pts[(s + 2).min(n - 1)];
            let len = ((p2[0] - p1[0]).powi(2) + (p2[1] - p1[1]).powi(2)).sqrt();
            let steps = (len / 0.25).ceil().max(1.0) as usize;
            for i in 0..=steps {
                let q = catmull_rom(p0, p1, p2, p3, i as f64 / steps as f64);
                canvas.stamp([q[0], q[1], 0.0], width / 2.0);
            }
        }
    }
    let meta = SampleMeta {
        seed: cfg.seed,
        noise_variance: cfg.noise_variance,
        structures: count,
        bifurcations: 0,
    };
    canvas.finish(cfg, &mut rng, meta)
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let n2: f64 = v.iter().map(|x| x * x).sum();
        if n2 > 1e-6 && n2 <= 1.0 {
            return normalize(v);
        }
    }
}

/// Rotate `d` by `angle` towards the unit vector `toward` (orthogonalized).
fn bend(d: [f64; 3], toward: [f64; 3], angle: f64) -> [f64; 3] {
    let axis = cross(d, toward);
    let n: f64 = axis.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < 1e-9 {
        return d;
    }
    let perp = normalize(cross(axis, d));
    normalize([
        d[0] * angle.cos() + perp[0] * angle.sin(),
        d[1] * angle.cos() + perp[1] * angle.sin(),
        d[2] * angle.cos() + perp[2] * angle.sin(),
    ])
}

struct TreeGrowth<'a> {
    canvas: &'a mut Canvas,
    size: [f64; 3],
    max_depth: usize,
    p_bif: f64,
    bifurcations: usize,
}

impl TreeGrowth<'_> {
    fn inside(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= 0.0 && p[a] <= self.size[a] - 1.0)
    }

    /// Every random draw here is independent of the radius, so for a fixed
    /// seed the geometry is identical across radius settings.
    fn grow(&mut self, rng: &mut ChaCha8Rng, start: [f64; 3], dir: [f64; 3], radius: f64, depth: usize) {
        let extent = self.size.iter().copied().fold(f64::INFINITY, f64::min);
        let len = extent * rng.random_range(0.25..0.45);
        let taper = rng.random_range(0.85..1.0);
        let sway = random_unit(rng);
        let sway_amount = rng.random_range(-0.2..0.2) * len;
        let end = [start[0] + dir[0] * len, start[1] + dir[1] * len, start[2] + dir[2] * len];
        let ctrl = [
            0.5 * (start[0] + end[0]) + sway[0] * sway_amount,
            0.5 * (start[1] + end[1]) + sway[1] * sway_amount,
            0.5 * (start[2] + end[2]) + sway[2] * sway_amount,
        ];
        let steps = (len / 0.25).ceil().max(1.0) as usize;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let (a, b, c) = ((1.0 - t) * (1.0 - t), 2.0 * (1.0 - t) * t, t * t);
            let p = [
                a * start[0] + b * ctrl[0] + c * end[0],
                a * start[1] + b * ctrl[1] + c * end[1],
                a * start[2] + b * ctrl[2] + c * end[2],
            ];
            let r = radius * (1.0 + (taper - 1.0) * t);
            self.canvas.stamp(p, r);
        }
        // Tangent of the quadratic curve at its end.
        let tangent = normalize([end[0] - ctrl[0], end[1] - ctrl[1], end[2] - ctrl[2]]);
        let end_radius = radius * taper;

        let split: f64 = rng.random();
        let toward = random_unit(rng);
        let angles = [rng.random_range(0.4..0.8), rng.random_range(0.4..0.8)];
        let shrink = [rng.random_range(0.7..0.9), rng.random_range(0.7..0.9)];
        let wobble = rng.random_range(-0.3..0.3);
        if depth + 1 >= self.max_depth || !self.inside(end) {
            return;
        }
        if split < self.p_bif {
            self.bifurcations += 1;
            let neg = [-toward[0], -toward[1], -toward[2]];
            let d1 = bend(tangent, toward, angles[0]);
            let d2 = bend(tangent, neg, angles[1]);
            self.grow(rng, end, d1, end_radius * shrink[0], depth + 1);
            self.grow(rng, end, d2, end_radius * shrink[1], depth + 1);
        } else {
            let d = bend(tangent, toward, wobble);
            self.grow(rng, end, d, end_radius, depth + 1);
        }
    }
}

/// Recursive tube trees: each segment is a tapering curved tube; segments
/// split in two with the bifurcation probability until `max_depth` or until
/// they leave the volume.
pub fn synth_3d(cfg: &SynthConfig) -> Result<Sample> {
    cfg.validate()?;
    if cfg.dims != 3 {
        return Err(Error::Config("synth_3d needs dims = 3".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut canvas = Canvas::new(&cfg.size);
    let size = [cfg.size[0] as f64, cfg.size[1] as f64, cfg.size[2] as f64];
    let count = draw_count(cfg, &mut rng);
    let mut growth = TreeGrowth {
        canvas: &mut canvas,
        size,
        max_depth: cfg.max_depth,
        p_bif: cfg.bifurcation_prob,
        bifurcations: 0,
    };
    for _ in 0..count {
        let u: f64 = rng.random();
        let radius = cfg.radius.0 + u * (cfg.radius.1 - cfg.radius.0);
        let start = [
            size[0] * rng.random_range(0.15..0.85),
            size[1] * rng.random_range(0.15..0.85),
            size[2] * rng.random_range(0.15..0.85),
        ];
        let dir = random_unit(&mut rng);
        growth.grow(&mut rng, start, dir, radius, 0);
    }
    let meta = SampleMeta {
        seed: cfg.seed,
        noise_variance: cfg.noise_variance,
        structures: count,
        bifurcations: growth.bifurcations,
    };
    canvas.finish(cfg, &mut rng, meta)
}

/// Dispatch on `cfg.dims`.
pub fn synthesize(cfg: &SynthConfig) -> Result<Sample> {
    match cfg.dims {
        2 => synth_2d(cfg),
        _ => synth_3d(cfg),
    }
}
