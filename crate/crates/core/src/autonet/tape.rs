use super::conv::{col2im, im2col, slab_planes, ConvDims, ConvGeom};
use super::{matmul, matmul_ld, Real, Tensor};
use crate::error::{bail_arg, bail_shape, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
    },
    Upsample2 {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Sigmoid {
        x: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale {
        x: Var,
        c: T,
    },
    AddScalar {
        x: Var,
    },
    Square {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    MaskedMean {
        x: Var,
        mask: Vec<T>,
        denom: T,
    },
    Gather {
        table: Var,
        index: Vec<Option<u32>>,
    },
    Concat {
        parts: Vec<Var>,
    },
    SelectPerVoxel {
        x: Var,
        index: Vec<u32>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv { .. } => "conv3d",
            Op::Upsample2 { .. } => "nearest_upsample2",
            Op::MaxPool { .. } => "max_pool",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Square { .. } => "square",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::MaskedMean { .. } => "masked_mean",
            Op::Gather { .. } => "gather",
            Op::Concat { .. } => "concat",
            Op::SelectPerVoxel { .. } => "select_per_voxel",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Eager record of executed operations.
#[derive(Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    empty_masks: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    /// Gradient buffer of `v`, or `None` when no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn spatial(shape: &[usize]) -> Result<(usize, [usize; 3])> {
    match shape {
        [c, d, h, w] => Ok((*c, [*d, *h, *w])),
        _ => bail_shape!("expected a [C, D, H, W] tensor, got {shape:?}"),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
            empty_masks: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of `masked_mean` calls that saw an all-zero mask.
    pub fn empty_mask_count(&self) -> usize {
        self.empty_masks
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(Error::Backward(
                "tape already differentiated; record a new forward pass".into(),
            ));
        }
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            bail_shape!("operands {:?} and {:?} differ", self.shape(a), self.shape(b));
        }
        Ok(())
    }

    /// 3-D cross-correlation with symmetric padding.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.conv3d_geom(x, w, b, ConvGeom::new(stride, pad))
    }

    /// 3-D cross-correlation. `x: [Cin, D, H, W]`, `w: [Cout, Cin, kd, kh, kw]`,
    /// `b: [Cout]`.
    pub fn conv3d_geom(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (cin, input) = spatial(self.shape(x))?;
        let (cout, kernel) = match self.shape(w) {
            [co, ci, kd, kh, kw] if *ci == cin => (*co, [*kd, *kh, *kw]),
            s => bail_shape!("kernel {s:?} incompatible with {cin} input channels"),
        };
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                bail_shape!("bias {:?} for {cout} output channels", self.shape(b));
            }
        }
        let output = [
            geom.out_extent(input[0], kernel[0])?,
            geom.out_extent(input[1], kernel[1])?,
            geom.out_extent(input[2], kernel[2])?,
        ];
        let dims = ConvDims {
            cin,
            input,
            kernel,
            output,
            geom,
        };
        let plen = dims.out_len();
        let kdim = dims.kdim();
        let mut out = vec![T::zero(); cout * plen];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            if dims.is_pointwise() {
                matmul(cout, kdim, plen, (wv, kdim as isize, 1), (xv, plen as isize, 1), &mut out, false);
            } else {
                let plane = output[1] * output[2];
                let mut col = Vec::new();
                for zs in slabs(&dims) {
                    let n = zs.len() * plane;
                    col.resize(kdim * n, T::zero());
                    let p0 = zs.start * plane;
                    im2col(xv, &dims, zs, &mut col);
                    let (a, b) = ((wv, kdim as isize, 1), (&col[..], n as isize, 1));
                    matmul_ld(cout, kdim, n, a, b, &mut out[p0..], plen, false);
                }
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (row, &bias) in out.chunks_exact_mut(plen).zip(bv) {
                    row.iter_mut().for_each(|o| *o += bias);
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        let value = Tensor::new(vec![cout, output[0], output[1], output[2]], out)?;
        self.push(value, Op::Conv { x, w, b, dims }, rg)
    }

    /// Nearest-neighbour ×2 upsampling of the spatial axes.
    pub fn nearest_upsample2(&mut self, x: Var) -> Result<Var> {
        let (c, [d, h, w]) = spatial(self.shape(x))?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(c * 8 * d * h * w);
        for ch in 0..c {
            let base = ch * d * h * w;
            for z in 0..2 * d {
                for y in 0..2 * h {
                    let row = base + ((z / 2) * h + y / 2) * w;
                    out.extend((0..2 * w).map(|xx| src[row + xx / 2]));
                }
            }
        }
        let rg = self.rg(&[x]);
        let value = Tensor::new(vec![c, 2 * d, 2 * h, 2 * w], out)?;
        self.push(value, Op::Upsample2 { x }, rg)
    }

    /// Max over non-overlapping `factor³` blocks; the gradient is routed to
    /// the first maximal element of each block.
    pub fn max_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (c, [d, h, w]) = spatial(self.shape(x))?;
        if factor == 0 || d % factor != 0 || h % factor != 0 || w % factor != 0 {
            bail_shape!("pool factor {factor} does not divide {:?}", [d, h, w]);
        }
        let (od, oh, ow) = (d / factor, h / factor, w / factor);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(c * od * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        for ch in 0..c {
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut at = 0usize;
                        for dz in 0..factor {
                            for dy in 0..factor {
                                let row = ((ch * d + oz * factor + dz) * h + oy * factor + dy) * w
                                    + ox * factor;
                                for dx in 0..factor {
                                    if src[row + dx] > best {
                                        best = src[row + dx];
                                        at = row + dx;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(at as u32);
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        let value = Tensor::new(vec![c, od, oh, ow], out)?;
        self.push(value, Op::MaxPool { x, argmax }, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let s = T::from_f64(slope);
        let value = self.map(x, |v| if v > T::zero() { v } else { v * s });
        let rg = self.rg(&[x]);
        self.push(value, Op::LeakyRelu { x, slope: s }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, |v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        let rg = self.rg(&[x]);
        self.push(value, Op::Sigmoid { x }, rg)
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let t = self.value(x);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
            .expect("same shape")
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape(a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        let value = self.map(x, |v| v * c);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale { x, c }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        let value = self.map(x, |v| v + c);
        let rg = self.rg(&[x]);
        self.push(value, Op::AddScalar { x }, rg)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, |v| v * v);
        let rg = self.rg(&[x]);
        self.push(value, Op::Square { x }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            bail_shape!("mean of an empty tensor");
        }
        let s: T = t.data().iter().copied().sum::<T>() / T::from_f64(t.numel() as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean { x }, rg)
    }

    /// `sum(x · mask) / max(sum(mask), 1)`; an all-zero mask yields 0 and
    /// is counted in [`Tape::empty_mask_count`].
    pub fn masked_mean(&mut self, x: Var, mask: &[T]) -> Result<Var> {
        let t = self.value(x);
        if t.numel() != mask.len() {
            bail_shape!("mask of {} entries for a tensor of {}", mask.len(), t.numel());
        }
        let total: T = mask.iter().copied().sum();
        let denom = if total > T::one() { total } else { T::one() };
        let s: T = t.data().iter().zip(mask).map(|(&v, &m)| v * m).sum::<T>() / denom;
        if total == T::zero() {
            self.empty_masks += 1;
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::scalar(s),
            Op::MaskedMean {
                x,
                mask: mask.to_vec(),
                denom,
            },
            rg,
        )
    }

    /// Identity forward, zero gradient backward.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).clone();
        self.push(value, Op::Leaf, false)
    }

    /// Scatters rows of `table: [N, D]` onto positions: output `[D, ..spatial]`
    /// whose column `v` (flattened over `spatial`) is row `index[v]`, or
    /// zero when `index[v]` is `None`.
    pub fn gather_rows(&mut self, table: Var, index: Vec<Option<u32>>, spatial: &[usize]) -> Result<Var> {
        let (n, d) = match self.shape(table) {
            [n, d] => (*n, *d),
            s => bail_shape!("gather table must be [N, D], got {s:?}"),
        };
        if let Some(bad) = index.iter().flatten().find(|&&i| i as usize >= n) {
            bail_arg!("gather index {bad} out of range for {n} rows");
        }
        if spatial.iter().product::<usize>() != index.len() {
            bail_shape!("{} indices for spatial extent {spatial:?}", index.len());
        }
        let tv = self.value(table).data();
        let v = index.len();
        let mut out = vec![T::zero(); d * v];
        for (col, idx) in index.iter().enumerate() {
            if let Some(i) = idx {
                for c in 0..d {
                    out[c * v + col] = tv[*i as usize * d + c];
                }
            }
        }
        let rg = self.rg(&[table]);
        let mut shape = vec![d];
        shape.extend_from_slice(spatial);
        self.push(Tensor::new(shape, out)?, Op::Gather { table, index }, rg)
    }

    /// Concatenates along the leading axis; trailing extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            bail_shape!("concat of zero tensors");
        };
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                bail_shape!("concat of {s:?} with trailing extents {tail:?}");
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = self.rg(parts);
        self.push(Tensor::new(shape, data)?, Op::Concat { parts: parts.to_vec() }, rg)
    }

    /// For `x: [C, ...]` picks channel `index[v]` at every trailing position
    /// `v`, giving `[1, ...]`.
    pub fn select_per_voxel(&mut self, x: Var, index: Vec<u32>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some((&c, rest)) = shape.split_first() else {
            bail_shape!("select_per_voxel needs a channel axis");
        };
        let v: usize = rest.iter().product();
        if index.len() != v {
            bail_shape!("{} channel indices for {v} voxels", index.len());
        }
        if let Some(bad) = index.iter().find(|&&i| i as usize >= c) {
            bail_arg!("channel index {bad} out of range for {c} channels");
        }
        let xv = self.value(x).data();
        let out = index
            .iter()
            .enumerate()
            .map(|(p, &i)| xv[i as usize * v + p])
            .collect();
        let mut oshape = vec![1];
        oshape.extend_from_slice(rest);
        let rg = self.rg(&[x]);
        self.push(Tensor::new(oshape, out)?, Op::SelectPerVoxel { x, index }, rg)
    }

    /// Channel `c` of `x: [C, ...]` as a `[1, ...]` tensor.
    pub fn channel(&mut self, x: Var, c: usize) -> Result<Var> {
        let v: usize = self.shape(x)[1..].iter().product();
        self.select_per_voxel(x, vec![c as u32; v])
    }

    /// Reverse-mode differentiation of the scalar `loss`. May be called once
    /// per tape.
    pub fn backward(&mut self, loss: Var) -> Result<Grads<T>> {
        if self.consumed {
            return Err(Error::Backward(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            bail_shape!("backward needs a scalar loss, got {:?}", self.shape(loss));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, dims } => self.conv_backward(*x, *w, *b, dims, g, grads),
            Op::Upsample2 { x } => {
                let (c, [d, h, w]) = spatial(self.shape(*x)).expect("checked in forward");
                self.accumulate(grads, *x, |dx| {
                    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
                    for ch in 0..c {
                        for z in 0..od {
                            for y in 0..oh {
                                let orow = ((ch * od + z) * oh + y) * ow;
                                let irow = ((ch * d + z / 2) * h + y / 2) * w;
                                for xx in 0..ow {
                                    dx[irow + xx / 2] += g[orow + xx];
                                }
                            }
                        }
                    }
                });
            }
            Op::MaxPool { x, argmax } => self.accumulate(grads, *x, |dx| {
                for (&a, &gv) in argmax.iter().zip(g) {
                    dx[a as usize] += gv;
                }
            }),
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |dx| {
                    for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        *d += if v > T::zero() { gv } else { gv * *slope };
                    }
                });
            }
            Op::Sigmoid { x } => {
                let yv = node.value.data();
                self.accumulate(grads, *x, |dx| {
                    for ((d, &gv), &y) in dx.iter_mut().zip(g).zip(yv) {
                        *d += gv * y * (T::one() - y);
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d - gv));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| {
                    for ((d, &gv), &o) in d.iter_mut().zip(g).zip(bv) {
                        *d += gv * o;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((d, &gv), &o) in d.iter_mut().zip(g).zip(av) {
                        *d += gv * o;
                    }
                });
            }
            Op::Scale { x, c } => self.accumulate(grads, *x, |d| {
                for (d, &gv) in d.iter_mut().zip(g) {
                    *d += gv * *c;
                }
            }),
            Op::AddScalar { x } => self.accumulate(grads, *x, |d| add_into(d, g)),
            Op::Square { x } => {
                let xv = self.value(*x).data();
                let two = T::from_f64(2.0);
                self.accumulate(grads, *x, |d| {
                    for ((d, &gv), &v) in d.iter_mut().zip(g).zip(xv) {
                        *d += two * v * gv;
                    }
                });
            }
            Op::Sum { x } => self.accumulate(grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean { x } => {
                let n = T::from_f64(self.value(*x).numel() as f64);
                self.accumulate(grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::MaskedMean { x, mask, denom } => self.accumulate(grads, *x, |d| {
                for (d, &m) in d.iter_mut().zip(mask) {
                    *d += g[0] * m / *denom;
                }
            }),
            Op::Gather { table, index } => {
                let d = self.shape(*table)[1];
                let v = index.len();
                self.accumulate(grads, *table, |dt| {
                    for (col, idx) in index.iter().enumerate() {
                        if let Some(r) = idx {
                            for c in 0..d {
                                dt[*r as usize * d + c] += g[c * v + col];
                            }
                        }
                    }
                });
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.accumulate(grads, p, |d| add_into(d, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::SelectPerVoxel { x, index } => {
                let v = index.len();
                self.accumulate(grads, *x, |d| {
                    for (p, &c) in index.iter().enumerate() {
                        d[c as usize * v + p] += g[p];
                    }
                });
            }
        }
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: &ConvDims,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let plen = dims.out_len();
        let kdim = dims.kdim();
        let cout = g.len() / plen;
        let need_w = self.nodes[w.0].requires_grad;
        let need_x = self.nodes[x.0].requires_grad;
        if let Some(b) = b {
            self.accumulate(grads, b, |db| {
                for (d, row) in db.iter_mut().zip(g.chunks_exact(plen)) {
                    *d += row.iter().copied().sum::<T>();
                }
            });
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        if dims.is_pointwise() {
            if need_w {
                self.accumulate(grads, w, |dw| {
                    // dW[co, ci] += Σ_p g[co, p] · x[ci, p]
                    matmul(cout, plen, kdim, (g, plen as isize, 1), (xv, 1, plen as isize), dw, true);
                });
            }
            if need_x {
                self.accumulate(grads, x, |dx| {
                    matmul(kdim, cout, plen, (wv, 1, kdim as isize), (g, plen as isize, 1), dx, true);
                });
            }
            return;
        }
        let plane = dims.output[1] * dims.output[2];
        if need_w {
            self.accumulate(grads, w, |dw| {
                let mut col = Vec::new();
                for zs in slabs(dims) {
                    let n = zs.len() * plane;
                    let gs = &g[zs.start * plane..];
                    col.resize(kdim * n, T::zero());
                    im2col(xv, dims, zs, &mut col);
                    // dW[co, k] += Σ_p g[co, p] · col[k, p]
                    matmul(cout, n, kdim, (gs, plen as isize, 1), (&col, 1, n as isize), dw, true);
                }
            });
        }
        if need_x {
            debug_assert_eq!(self.value(x).numel(), dims.cin * dims.in_len());
            self.accumulate(grads, x, |dx| {
                let mut dcol = Vec::new();
                for zs in slabs(dims) {
                    let n = zs.len() * plane;
                    let gs = &g[zs.start * plane..];
                    dcol.resize(kdim * n, T::zero());
                    matmul(kdim, cout, n, (wv, 1, kdim as isize), (gs, plen as isize, 1), &mut dcol, false);
                    col2im(&dcol, dims, zs, dx);
                }
            });
        }
    }
}

/// Output-depth ranges processed one lowering buffer at a time.
fn slabs(dims: &ConvDims) -> impl Iterator<Item = std::ops::Range<usize>> {
    let step = slab_planes(dims);
    let od = dims.output[0];
    (0..od).step_by(step).map(move |z| z..(z + step).min(od))
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
