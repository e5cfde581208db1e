//! Cross-correlation over 2 or 3 spatial axes and its stride-equals-kernel
//! transpose.
//!
//! Both 2D and 3D inputs run through one kernel: an image `[H, W]` is
//! lifted to the volume `[1, H, W]` so the innermost (contiguous) axis is
//! always the last spatial axis.

use rand::Rng;

use super::params::{Forward, ParamId, ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::kernels::gemm;
use crate::tensor::{BackwardCtx, Op, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Per spatial axis, `[H, W]` or `[H, W, D]`.
    pub kernel: Vec<usize>,
    pub stride: Vec<usize>,
    pub padding: Vec<usize>,
    pub bias: bool,
}

impl ConvSpec {
    /// Stride 1 with `k / 2` padding, which preserves spatial size for odd kernels.
    pub fn new(in_channels: usize, out_channels: usize, kernel: &[usize]) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: kernel.to_vec(),
            stride: vec![1; kernel.len()],
            padding: kernel.iter().map(|k| k / 2).collect(),
            bias: true,
        }
    }

    /// Upsampling spec for [`conv_transpose`]: kernel and stride 2 on every axis.
    pub fn upsample(in_channels: usize, out_channels: usize, spatial_rank: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: vec![2; spatial_rank],
            stride: vec![2; spatial_rank],
            padding: vec![0; spatial_rank],
            bias: true,
        }
    }

    pub fn with_stride(mut self, stride: &[usize]) -> Self {
        self.stride = stride.to_vec();
        self
    }

    pub fn with_padding(mut self, padding: &[usize]) -> Self {
        self.padding = padding.to_vec();
        self
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn spatial_rank(&self) -> usize {
        self.kernel.len()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.kernel.len();
        if r != 2 && r != 3 {
            return Err(Error::dim(format!("conv needs 2 or 3 spatial axes, got {r}")));
        }
        if self.stride.len() != r || self.padding.len() != r {
            return Err(Error::dim("conv kernel, stride and padding ranks differ"));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::dim("conv channel counts must be positive"));
        }
        if self.kernel.contains(&0) || self.stride.contains(&0) {
            return Err(Error::dim("conv kernel and stride must be positive"));
        }
        Ok(())
    }

    /// `(in + 2 pad - k) / stride + 1` per axis; must divide exactly.
    pub fn output_spatial(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        if input.len() != self.spatial_rank() {
            return Err(Error::dim(format!(
                "conv with {}D kernel applied to spatial dims {input:?}",
                self.spatial_rank()
            )));
        }
        let mut out = Vec::with_capacity(input.len());
        for a in 0..input.len() {
            let span = input[a] + 2 * self.padding[a];
            if span < self.kernel[a] || !(span - self.kernel[a]).is_multiple_of(self.stride[a]) {
                return Err(Error::dim(format!(
                    "axis {a}: input {} with kernel {}, padding {}, stride {} gives a non-integral output size",
                    input[a], self.kernel[a], self.padding[a], self.stride[a]
                )));
            }
            out.push((span - self.kernel[a]) / self.stride[a] + 1);
        }
        Ok(out)
    }

    /// Output of the transposed op: `in * k` per axis (requires kernel == stride, no padding).
    pub fn transposed_output_spatial(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        if self.kernel != self.stride || self.padding.iter().any(|&p| p != 0) {
            return Err(Error::dim(format!(
                "transposed conv supports kernel == stride without padding, got kernel {:?} stride {:?} padding {:?}",
                self.kernel, self.stride, self.padding
            )));
        }
        if input.len() != self.spatial_rank() {
            return Err(Error::dim(format!(
                "transposed conv with {}D kernel applied to spatial dims {input:?}",
                self.spatial_rank()
            )));
        }
        Ok(input.iter().zip(&self.kernel).map(|(i, k)| i * k).collect())
    }

    fn fan_in(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }
}

/// Spatial extents lifted to three axes.
#[derive(Clone, Copy, Debug)]
struct Geom {
    cin: usize,
    cout: usize,
    inp: [usize; 3],
    k: [usize; 3],
    s: [usize; 3],
    p: [usize; 3],
    out: [usize; 3],
}

fn lift(v: &[usize], fill: usize) -> [usize; 3] {
    match *v {
        [a, b] => [fill, a, b],
        [a, b, c] => [a, b, c],
        _ => unreachable!("spatial rank validated"),
    }
}

impl Geom {
    fn new(spec: &ConvSpec, inp: &[usize], out: &[usize]) -> Self {
        Geom {
            cin: spec.in_channels,
            cout: spec.out_channels,
            inp: lift(inp, 1),
            k: lift(&spec.kernel, 1),
            s: lift(&spec.stride, 1),
            p: lift(&spec.padding, 0),
            out: lift(out, 1),
        }
    }

    fn in_numel(&self) -> usize {
        self.inp.iter().product()
    }

    fn out_numel(&self) -> usize {
        self.out.iter().product()
    }

    fn taps(&self) -> usize {
        self.k.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.k == [1, 1, 1] && self.s == [1, 1, 1] && self.p == [0, 0, 0]
    }
}

#[inline]
fn source(o: usize, k: usize, s: usize, p: usize, extent: usize) -> Option<usize> {
    let z = (o * s + k) as isize - p as isize;
    (z >= 0 && (z as usize) < extent).then_some(z as usize)
}

/// Visit every (col row, output offset, input offset) triple of the
/// unfolded input. `f(dst_range_start, src_start, len)` gets contiguous
/// runs when the innermost stride is 1.
fn for_each_tap(g: &Geom, mut f: impl FnMut(usize, usize, usize, usize)) {
    let [i0, i1, i2] = g.inp;
    let [o0, o1, o2] = g.out;
    let on = g.out_numel();
    let inn = g.in_numel();
    for ci in 0..g.cin {
        for a in 0..g.k[0] {
            for b in 0..g.k[1] {
                for c in 0..g.k[2] {
                    let row = ((ci * g.k[0] + a) * g.k[1] + b) * g.k[2] + c;
                    for y0 in 0..o0 {
                        let Some(z0) = source(y0, a, g.s[0], g.p[0], i0) else { continue };
                        for y1 in 0..o1 {
                            let Some(z1) = source(y1, b, g.s[1], g.p[1], i1) else { continue };
                            let dst = row * on + (y0 * o1 + y1) * o2;
                            let src = ci * inn + (z0 * i1 + z1) * i2;
                            if g.s[2] == 1 {
                                // y2 + c - p in [0, i2)
                                let lo = g.p[2].saturating_sub(c).min(o2);
                                let hi = (i2 + g.p[2]).saturating_sub(c).min(o2);
                                if hi > lo {
                                    f(dst + lo, src + lo + c - g.p[2], hi - lo, 1);
                                }
                            } else {
                                for y2 in 0..o2 {
                                    if let Some(z2) = source(y2, c, g.s[2], g.p[2], i2) {
                                        f(dst + y2, src + z2, 1, 1);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn im2col<T: Real>(x: &[T], g: &Geom) -> Vec<T> {
    let mut col = vec![T::zero(); g.cin * g.taps() * g.out_numel()];
    for_each_tap(g, |dst, src, len, _| {
        col[dst..dst + len].copy_from_slice(&x[src..src + len]);
    });
    col
}

fn col2im<T: Real>(col: &[T], g: &Geom, dx: &mut [T]) {
    for_each_tap(g, |dst, src, len, _| {
        for (d, &c) in dx[src..src + len].iter_mut().zip(&col[dst..dst + len]) {
            *d += c;
        }
    });
}

fn check_input(tape_shape: &[usize], spec: &ConvSpec) -> Result<(usize, Vec<usize>)> {
    if tape_shape.len() != spec.spatial_rank() + 2 {
        return Err(Error::dim(format!(
            "conv expects [B, C, {} spatial axes], got {tape_shape:?}",
            spec.spatial_rank()
        )));
    }
    Ok((tape_shape[0], tape_shape[2..].to_vec()))
}

fn check_param(shape: &[usize], want: &[usize], what: &str) -> Result<()> {
    if shape != want {
        return Err(Error::dim(format!("{what} shape {shape:?}, expected {want:?}")));
    }
    Ok(())
}

/// Cross-correlation of `x: [B, Cin, spatial]` with `w: [Cout, Cin, kernel]`.
pub fn conv<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
    spec.validate()?;
    let (batch, spatial) = check_input(tape.shape(x).dims(), spec)?;
    let cin = tape.shape(x).dim(1);
    if cin != spec.in_channels {
        return Err(Error::dim(format!(
            "conv expects {} input channels, got {cin}",
            spec.in_channels
        )));
    }
    let out_spatial = spec.output_spatial(&spatial)?;
    let mut wshape = vec![spec.out_channels, spec.in_channels];
    wshape.extend(&spec.kernel);
    check_param(tape.shape(w).dims(), &wshape, "conv weight")?;
    if let Some(b) = b {
        check_param(tape.shape(b).dims(), &[spec.out_channels], "conv bias")?;
    }
    let g = Geom::new(spec, &spatial, &out_spatial);
    let (inn, on, cink) = (g.in_numel(), g.out_numel(), g.cin * g.taps());
    let mut out = vec![T::zero(); batch * g.cout * on];
    {
        let xd = tape.value(x).data;
        let wd = tape.value(w).data;
        let bd = b.map(|b| tape.value(b).data);
        for bi in 0..batch {
            let xb = &xd[bi * g.cin * inn..(bi + 1) * g.cin * inn];
            let ob = &mut out[bi * g.cout * on..(bi + 1) * g.cout * on];
            if let Some(bd) = bd {
                for (co, row) in ob.chunks_exact_mut(on).enumerate() {
                    row.fill(bd[co]);
                }
            }
            if g.is_pointwise() {
                gemm(g.cout, cink, on, wd, false, xb, false, ob);
            } else {
                let col = im2col(xb, &g);
                gemm(g.cout, cink, on, wd, false, &col, false, ob);
            }
        }
    }
    let mut dims = vec![batch, g.cout];
    dims.extend(&out_spatial);
    let op = ConvOp { x, w, b, g, batch };
    tape.push(Tensor::from_vec(dims, out)?, Box::new(op))
}

struct ConvOp {
    x: Var,
    w: Var,
    b: Option<Var>,
    g: Geom,
    batch: usize,
}

impl<T: Real> Op<T> for ConvOp {
    fn name(&self) -> &'static str {
        "conv"
    }

    fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.x, self.w];
        v.extend(self.b);
        v
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, _: Var, grad: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let g = &self.g;
        let (inn, on, cink) = (g.in_numel(), g.out_numel(), g.cin * g.taps());
        let xd = ctx.value(self.x).data;
        let wd = ctx.value(self.w).data;
        let mut dx = ctx.requires_grad(self.x).then(|| vec![T::zero(); xd.len()]);
        let mut dw = ctx.requires_grad(self.w).then(|| vec![T::zero(); wd.len()]);
        let mut db = self
            .b
            .filter(|&b| ctx.requires_grad(b))
            .map(|_| vec![T::zero(); g.cout]);
        for bi in 0..self.batch {
            let xb = &xd[bi * g.cin * inn..(bi + 1) * g.cin * inn];
            let gb = &grad[bi * g.cout * on..(bi + 1) * g.cout * on];
            if let Some(db) = db.as_mut() {
                for (co, row) in gb.chunks_exact(on).enumerate() {
                    db[co] += row.iter().copied().sum::<T>();
                }
            }
            if let Some(dw) = dw.as_mut() {
                if g.is_pointwise() {
                    gemm(g.cout, on, cink, gb, false, xb, true, dw);
                } else {
                    let col = im2col(xb, g);
                    gemm(g.cout, on, cink, gb, false, &col, true, dw);
                }
            }
            if let Some(dx) = dx.as_mut() {
                let dxb = &mut dx[bi * g.cin * inn..(bi + 1) * g.cin * inn];
                if g.is_pointwise() {
                    gemm(cink, g.cout, on, wd, true, gb, false, dxb);
                } else {
                    let mut dcol = vec![T::zero(); cink * on];
                    gemm(cink, g.cout, on, wd, true, gb, false, &mut dcol);
                    col2im(&dcol, g, dxb);
                }
            }
        }
        let mut grads = vec![dx, dw];
        if self.b.is_some() {
            grads.push(db);
        }
        Ok(grads)
    }
}

/// Transposed convolution with kernel == stride: every input element writes
/// one disjoint `kernel`-sized block of the output. `w: [Cin, Cout, kernel]`.
pub fn conv_transpose<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    spec: &ConvSpec,
) -> Result<Var> {
    let (batch, spatial) = check_input(tape.shape(x).dims(), spec)?;
    let cin = tape.shape(x).dim(1);
    if cin != spec.in_channels {
        return Err(Error::dim(format!(
            "transposed conv expects {} input channels, got {cin}",
            spec.in_channels
        )));
    }
    let out_spatial = spec.transposed_output_spatial(&spatial)?;
    let mut wshape = vec![spec.in_channels, spec.out_channels];
    wshape.extend(&spec.kernel);
    check_param(tape.shape(w).dims(), &wshape, "transposed conv weight")?;
    if let Some(b) = b {
        check_param(tape.shape(b).dims(), &[spec.out_channels], "transposed conv bias")?;
    }
    // Geometry seen from the output side: `inp` is the small grid.
    let g = Geom::new(spec, &spatial, &out_spatial);
    let (n, on, taps) = (g.in_numel(), g.out_numel(), g.taps());
    let mut out = vec![T::zero(); batch * g.cout * on];
    {
        let xd = tape.value(x).data;
        let wd = tape.value(w).data;
        let bd = b.map(|b| tape.value(b).data);
        let mut y = vec![T::zero(); g.cout * n];
        for bi in 0..batch {
            let xb = &xd[bi * g.cin * n..(bi + 1) * g.cin * n];
            let ob = &mut out[bi * g.cout * on..(bi + 1) * g.cout * on];
            for tap in 0..taps {
                let wt = tap_matrix(wd, g.cin, g.cout, taps, tap);
                y.fill(T::zero());
                gemm(g.cout, g.cin, n, &wt, true, xb, false, &mut y);
                scatter_tap(&g, tap, &y, ob);
            }
            if let Some(bd) = bd {
                for (co, row) in ob.chunks_exact_mut(on).enumerate() {
                    row.iter_mut().for_each(|v| *v += bd[co]);
                }
            }
        }
    }
    let mut dims = vec![batch, g.cout];
    dims.extend(&out_spatial);
    let op = ConvTransposeOp { x, w, b, g, batch };
    tape.push(Tensor::from_vec(dims, out)?, Box::new(op))
}

/// `[Cin, Cout]` slice of the weight for one kernel tap.
fn tap_matrix<T: Real>(w: &[T], cin: usize, cout: usize, taps: usize, tap: usize) -> Vec<T> {
    let mut m = Vec::with_capacity(cin * cout);
    for ci in 0..cin {
        for co in 0..cout {
            m.push(w[(ci * cout + co) * taps + tap]);
        }
    }
    m
}

/// Output flat offsets (within one channel) of a tap, in input order.
fn tap_positions(g: &Geom, tap: usize) -> impl Iterator<Item = usize> + '_ {
    let (a, b, c) = (tap / (g.k[1] * g.k[2]), (tap / g.k[2]) % g.k[1], tap % g.k[2]);
    let [i0, i1, i2] = g.inp;
    let [_, o1, o2] = g.out;
    (0..i0).flat_map(move |y0| {
        (0..i1).flat_map(move |y1| {
            (0..i2).map(move |y2| {
                ((y0 * g.k[0] + a) * o1 + (y1 * g.k[1] + b)) * o2 + (y2 * g.k[2] + c)
            })
        })
    })
}

fn scatter_tap<T: Real>(g: &Geom, tap: usize, y: &[T], out: &mut [T]) {
    let (n, on) = (g.in_numel(), g.out_numel());
    for co in 0..g.cout {
        let src = &y[co * n..(co + 1) * n];
        let dst = &mut out[co * on..(co + 1) * on];
        for (i, pos) in tap_positions(g, tap).enumerate() {
            dst[pos] += src[i];
        }
    }
}

fn gather_tap<T: Real>(g: &Geom, tap: usize, grad: &[T]) -> Vec<T> {
    let (n, on) = (g.in_numel(), g.out_numel());
    let mut y = vec![T::zero(); g.cout * n];
    for co in 0..g.cout {
        let src = &grad[co * on..(co + 1) * on];
        let dst = &mut y[co * n..(co + 1) * n];
        for (i, pos) in tap_positions(g, tap).enumerate() {
            dst[i] = src[pos];
        }
    }
    y
}

struct ConvTransposeOp {
    x: Var,
    w: Var,
    b: Option<Var>,
    g: Geom,
    batch: usize,
}

impl<T: Real> Op<T> for ConvTransposeOp {
    fn name(&self) -> &'static str {
        "conv_transpose"
    }

    fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.x, self.w];
        v.extend(self.b);
        v
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, _: Var, grad: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let g = &self.g;
        let (n, on, taps) = (g.in_numel(), g.out_numel(), g.taps());
        let xd = ctx.value(self.x).data;
        let wd = ctx.value(self.w).data;
        let mut dx = ctx.requires_grad(self.x).then(|| vec![T::zero(); xd.len()]);
        let mut dw = ctx.requires_grad(self.w).then(|| vec![T::zero(); wd.len()]);
        let mut db = self
            .b
            .filter(|&b| ctx.requires_grad(b))
            .map(|_| vec![T::zero(); g.cout]);
        let mut dwt = vec![T::zero(); g.cin * g.cout];
        for bi in 0..self.batch {
            let xb = &xd[bi * g.cin * n..(bi + 1) * g.cin * n];
            let gb = &grad[bi * g.cout * on..(bi + 1) * g.cout * on];
            if let Some(db) = db.as_mut() {
                for (co, row) in gb.chunks_exact(on).enumerate() {
                    db[co] += row.iter().copied().sum::<T>();
                }
            }
            for tap in 0..taps {
                let dy = gather_tap(g, tap, gb);
                if let Some(dx) = dx.as_mut() {
                    let wt = tap_matrix(wd, g.cin, g.cout, taps, tap);
                    gemm(g.cin, g.cout, n, &wt, false, &dy, false, &mut dx[bi * g.cin * n..(bi + 1) * g.cin * n]);
                }
                if let Some(dw) = dw.as_mut() {
                    dwt.fill(T::zero());
                    gemm(g.cin, n, g.cout, xb, false, &dy, true, &mut dwt);
                    for ci in 0..g.cin {
                        for co in 0..g.cout {
                            dw[(ci * g.cout + co) * taps + tap] += dwt[ci * g.cout + co];
                        }
                    }
                }
            }
        }
        let mut grads = vec![dx, dw];
        if self.b.is_some() {
            grads.push(db);
        }
        Ok(grads)
    }
}

fn kaiming_uniform<T: Real, R: Rng + ?Sized>(dims: Vec<usize>, fan_in: usize, rng: &mut R) -> Result<Tensor<T>> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
    Tensor::from_vec(dims, data)
}

/// Convolution layer: weights Kaiming-uniform over fan-in, bias zero.
#[derive(Clone, Debug)]
pub struct Conv {
    spec: ConvSpec,
    weight: ParamId,
    bias: Option<ParamId>,
}

impl Conv {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: ConvSpec,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let mut dims = vec![spec.out_channels, spec.in_channels];
        dims.extend(&spec.kernel);
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_uniform(dims, spec.fan_in(), rng)?,
            ParamKind::Trainable,
        )?;
        let bias = if spec.bias {
            Some(store.add(
                format!("{name}.bias"),
                Tensor::zeros(vec![spec.out_channels])?,
                ParamKind::Trainable,
            )?)
        } else {
            None
        };
        Ok(Conv { spec, weight, bias })
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.bias
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        let b = self.bias.map(|id| f.param(id));
        conv(&mut f.tape, x, w, b, &self.spec)
    }
}

/// Learned upsampling by a stride-2, kernel-2 transposed convolution.
#[derive(Clone, Debug)]
pub struct ConvTranspose {
    spec: ConvSpec,
    weight: ParamId,
    bias: Option<ParamId>,
}

impl ConvTranspose {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: ConvSpec,
        rng: &mut R,
    ) -> Result<Self> {
        spec.transposed_output_spatial(&vec![1; spec.spatial_rank()])?;
        let mut dims = vec![spec.in_channels, spec.out_channels];
        dims.extend(&spec.kernel);
        // Blocks do not overlap, so each output sees exactly `in_channels` inputs.
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_uniform(dims, spec.in_channels, rng)?,
            ParamKind::Trainable,
        )?;
        let bias = if spec.bias {
            Some(store.add(
                format!("{name}.bias"),
                Tensor::zeros(vec![spec.out_channels])?,
                ParamKind::Trainable,
            )?)
        } else {
            None
        };
        Ok(ConvTranspose { spec, weight, bias })
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        let b = self.bias.map(|id| f.param(id));
        conv_transpose(&mut f.tape, x, w, b, &self.spec)
    }
}
