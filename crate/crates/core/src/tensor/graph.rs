use super::kernels::{self, ConvGeom, PoolGeom, Resample};
use super::linalg::{gemm, MatRef};
use super::{Element, Tensor};
use crate::error::{param_err, Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Operations are recorded for reverse-mode differentiation.
    Training,
    /// Values are computed but no history is kept.
    Inference,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BnConfig {
    /// Batch statistics (and running-stat update) when true, running statistics otherwise.
    pub training: bool,
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        Self {
            training: true,
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }
}

/// Running statistics a batch-norm call reads (inference) or updates (training).
pub struct BnStats<'a, T> {
    pub mean: &'a mut [T],
    pub var: &'a mut [T],
}

#[derive(Clone, Copy, Debug)]
struct Bcast {
    na: usize,
    nb: usize,
}

enum Op<T> {
    Add(Bcast),
    Sub(Bcast),
    Mul(Bcast),
    AddScalar,
    MulScalar(T),
    Relu,
    MatMul {
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        a_batched: bool,
        b_batched: bool,
    },
    TransposeLast2 {
        batch: usize,
        m: usize,
        n: usize,
    },
    Reshape,
    Concat {
        sizes: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    SumAll,
    MeanAll,
    Conv2d(ConvGeom),
    BatchNorm {
        xhat: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
        c: usize,
        hw: usize,
    },
    Upsample(Resample<T>),
    MaxPool {
        geom: PoolGeom,
        arg: Vec<usize>,
    },
    AvgPool(PoolGeom),
    AdaptiveAvg {
        planes: usize,
        h: usize,
        w: usize,
        bh: usize,
        bw: usize,
    },
    Softmax {
        outer: usize,
        len: usize,
        inner: usize,
    },
    CrossEntropy {
        grad: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Add(_) => "add",
            Op::Sub(_) => "sub",
            Op::Mul(_) => "mul",
            Op::AddScalar => "add_scalar",
            Op::MulScalar(_) => "mul_scalar",
            Op::Relu => "relu",
            Op::MatMul { .. } => "matmul",
            Op::TransposeLast2 { .. } => "transpose",
            Op::Reshape => "reshape",
            Op::Concat { .. } => "concat",
            Op::SumAll => "reduce_sum",
            Op::MeanAll => "reduce_mean",
            Op::Conv2d(_) => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Upsample(_) => "bilinear_upsample",
            Op::MaxPool { .. } => "max_pool",
            Op::AvgPool(_) => "avg_pool",
            Op::AdaptiveAvg { .. } => "adaptive_avg_pool",
            Op::Softmax { .. } => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<T> {
    op: Op<T>,
    inputs: Vec<Var>,
    output: Var,
}

/// Tape of values and the operations that produced them.
///
/// Nodes are appended as operations run, so their order is always topological.
/// In [`Mode::Inference`] only values are kept.
pub struct Graph<T: Element> {
    mode: Mode,
    values: Vec<Tensor<T>>,
    is_leaf: Vec<bool>,
    tags: Vec<Option<usize>>,
    nodes: Vec<Node<T>>,
}

fn broadcast(a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Bcast)> {
    let numel = |s: &[usize]| s.iter().product::<usize>();
    let (na, nb) = (numel(a), numel(b));
    let (big, small) = if (na, a.len()) >= (nb, b.len()) { (a, b) } else { (b, a) };
    let lead = small.iter().take_while(|&&d| d == 1).count();
    let core = &small[lead..];
    if core.len() > big.len() || core != &big[big.len() - core.len()..] {
        return param_err(format!(
            "shapes {a:?} and {b:?} are not broadcast-compatible (only leading singleton axes broadcast)"
        ));
    }
    Ok((big.to_vec(), Bcast { na, nb }))
}

fn reduce_to<T: Element>(g: &[T], n: usize) -> Vec<T> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![T::zero(); n];
    for (i, &v) in g.iter().enumerate() {
        out[i % n] += v;
    }
    out
}

impl<T: Element> Graph<T> {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            values: Vec::new(),
            is_leaf: Vec::new(),
            tags: Vec::new(),
            nodes: Vec::new(),
        }
    }

    pub fn training() -> Self {
        Self::new(Mode::Training)
    }

    pub fn inference() -> Self {
        Self::new(Mode::Inference)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Number of values held.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of recorded operations.
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Operation names in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    /// Accumulated gradient of a leaf, if it has received one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.values[v.0].grad()
    }

    pub fn zero_grad(&mut self) {
        self.values.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Insert a leaf; it takes part in differentiation iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(t, None)
    }

    /// Insert a leaf that never requires a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(t.with_requires_grad(false), None)
    }

    /// Insert a copy of a parameter, tagged so its gradient can be routed back.
    pub fn param(&mut self, tag: usize, t: &Tensor<T>) -> Var {
        let mut copy = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
        copy.set_requires_grad(t.requires_grad());
        self.push_leaf(copy, Some(tag))
    }

    /// Gradients of tagged leaves.
    pub fn tagged_grads(&self) -> impl Iterator<Item = (usize, &[T])> + '_ {
        self.tags
            .iter()
            .zip(&self.values)
            .filter_map(|(tag, v)| Some(((*tag)?, v.grad()?)))
    }

    /// A gradient-free copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.values[v.0].clone();
        let mut t = Tensor::new(t.shape().to_vec(), t.into_data()).expect("valid tensor");
        t.set_requires_grad(false);
        self.push_leaf(t, None)
    }

    fn push_leaf(&mut self, t: Tensor<T>, tag: Option<usize>) -> Var {
        self.values.push(t);
        self.is_leaf.push(true);
        self.tags.push(tag);
        Var(self.values.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: Vec<Var>) -> Var {
        let requires = inputs.iter().any(|v| self.values[v.0].requires_grad());
        let t = Tensor::new(shape, data)
            .expect("kernel output matches its shape")
            .with_requires_grad(requires && self.mode == Mode::Training);
        self.values.push(t);
        self.is_leaf.push(false);
        self.tags.push(None);
        let output = Var(self.values.len() - 1);
        if self.mode == Mode::Training && requires {
            self.nodes.push(Node { op, inputs, output });
        }
        output
    }

    fn dims4(&self, v: Var, what: &str) -> Result<[usize; 4]> {
        self.values[v.0]
            .dims4()
            .map_err(|_| Error::Param(format!("{what} must be N x C x H x W, got {:?}", self.shape(v))))
    }

    // ---- elementwise ------------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, kind: u8) -> Result<Var> {
        let (shape, bc) = broadcast(self.shape(a), self.shape(b))?;
        let (x, y) = (self.values[a.0].data(), self.values[b.0].data());
        let n: usize = shape.iter().product();
        let data: Vec<T> = match kind {
            0 => (0..n).map(|i| x[i % bc.na] + y[i % bc.nb]).collect(),
            1 => (0..n).map(|i| x[i % bc.na] - y[i % bc.nb]).collect(),
            _ => (0..n).map(|i| x[i % bc.na] * y[i % bc.nb]).collect(),
        };
        let op = match kind {
            0 => Op::Add(bc),
            1 => Op::Sub(bc),
            _ => Op::Mul(bc),
        };
        Ok(self.push(shape, data, op, vec![a, b]))
    }

    /// Elementwise sum; the smaller operand may carry extra leading singleton axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 1)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 2)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let t = &self.values[a.0];
        let data = t.data().iter().map(|&v| v + s).collect();
        self.push(t.shape().to_vec(), data, Op::AddScalar, vec![a])
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Var {
        let t = &self.values[a.0];
        let data = t.data().iter().map(|&v| v * s).collect();
        self.push(t.shape().to_vec(), data, Op::MulScalar(s), vec![a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = &self.values[a.0];
        let data = t.data().iter().map(|&v| v.max(T::zero())).collect();
        self.push(t.shape().to_vec(), data, Op::Relu, vec![a])
    }

    /// Batched matrix product over the last two axes. Leading axes must match, or one
    /// side may be a plain matrix shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return param_err(format!("matmul needs rank >= 2 operands, got {sa:?} and {sb:?}"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return param_err(format!("matmul inner dimensions differ: {sa:?} x {sb:?}"));
        }
        let (la, lb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let (a_batched, b_batched) = (!la.is_empty(), !lb.is_empty());
        if a_batched && b_batched && la != lb {
            return param_err(format!("matmul batch dimensions differ: {sa:?} x {sb:?}"));
        }
        let lead = if a_batched { la.to_vec() } else { lb.to_vec() };
        let batch: usize = lead.iter().product();
        let (x, y) = (self.values[a.0].data(), self.values[b.0].data());
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            let ao = if a_batched { i * m * k } else { 0 };
            let bo = if b_batched { i * k * n } else { 0 };
            gemm(
                T::one(),
                MatRef::new(&x[ao..ao + m * k], m, k),
                MatRef::new(&y[bo..bo + k * n], k, n),
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let mut shape = lead;
        shape.extend([m, n]);
        let op = Op::MatMul {
            batch,
            m,
            k,
            n,
            a_batched,
            b_batched,
        };
        Ok(self.push(shape, out, op, vec![a, b]))
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return param_err(format!("transpose needs rank >= 2, got {s:?}"));
        }
        let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = s[..s.len() - 2].iter().product::<usize>();
        let x = self.values[a.0].data();
        let mut out = Vec::with_capacity(x.len());
        for b in 0..batch {
            let blk = &x[b * m * n..(b + 1) * m * n];
            for j in 0..n {
                out.extend((0..m).map(|i| blk[i * n + j]));
            }
        }
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend([n, m]);
        Ok(self.push(shape, out, Op::TransposeLast2 { batch, m, n }, vec![a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = &self.values[a.0];
        if shape.iter().product::<usize>() != t.numel() || shape.contains(&0) {
            return param_err(format!("cannot reshape {:?} into {shape:?}", t.shape()));
        }
        let data = t.data().to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape, vec![a]))
    }

    /// Concatenate along `axis`; every other axis must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return param_err("concat of zero tensors");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return param_err(format!("concat axis {axis} out of range for {base:?}"));
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return param_err(format!(
                    "concat along axis {axis}: shape {s:?} does not match {base:?} off-axis"
                ));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &sz) in parts.iter().zip(&sizes) {
                let d = self.values[p.0].data();
                out.extend_from_slice(&d[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(shape, out, Op::Concat { sizes, outer, inner }, parts.to_vec()))
    }

    /// Concatenate two feature maps along the channel axis.
    pub fn concat_channel(&mut self, a: Var, b: Var) -> Result<Var> {
        self.concat(&[a, b], 1)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.values[a.0].data().iter().copied().sum();
        self.push(Vec::new(), vec![s], Op::SumAll, vec![a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = &self.values[a.0];
        let s = t.data().iter().copied().sum::<T>() / T::lit(t.numel() as f64);
        self.push(Vec::new(), vec![s], Op::MeanAll, vec![a])
    }

    // ---- convolution and normalization ------------------------------------

    /// 2-d convolution with zero padding.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let [n, cin, h, w] = self.dims4(x, "conv2d input")?;
        let ws = self.shape(weight).to_vec();
        let [cout, cin_g, kh, kw] = ws[..] else {
            return param_err(format!("conv2d weight must be Cout x Cin/groups x k x k, got {ws:?}"));
        };
        if kh != kw {
            return param_err(format!("conv2d kernel must be square, got {kh}x{kw}"));
        }
        let groups = spec.groups;
        if groups == 0 || cin % groups != 0 {
            return param_err(format!("input channels {cin} are not divisible by groups {groups}"));
        }
        if cout % groups != 0 {
            return param_err(format!("output channels {cout} are not divisible by groups {groups}"));
        }
        if cin_g != cin / groups {
            return param_err(format!(
                "weight dimension 1 is {cin_g} but input channels {cin} / groups {groups} = {}",
                cin / groups
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return param_err(format!("bias shape {:?} does not match Cout {cout}", self.shape(b)));
            }
        }
        let hout = kernels::window_out_extent("height", h, kh, spec.stride, spec.padding, spec.dilation)?;
        let wout = kernels::window_out_extent("width", w, kw, spec.stride, spec.padding, spec.dilation)?;
        let geom = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            k: kh,
            stride: spec.stride,
            pad: spec.padding,
            dil: spec.dilation,
            groups,
            hout,
            wout,
        };
        let out = kernels::conv2d_forward(
            self.values[x.0].data(),
            self.values[weight.0].data(),
            bias.map(|b| self.values[b.0].data()),
            &geom,
        );
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(vec![n, cout, hout, wout], out, Op::Conv2d(geom), inputs))
    }

    /// Per-channel batch normalization over the N, H, W axes.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BnStats<'_, T>,
        cfg: BnConfig,
    ) -> Result<Var> {
        let [n, c, h, w] = self.dims4(x, "batch_norm input")?;
        for (what, len) in [
            ("gamma", self.values[gamma.0].numel()),
            ("beta", self.values[beta.0].numel()),
            ("running_mean", stats.mean.len()),
            ("running_var", stats.var.len()),
        ] {
            if len != c {
                return param_err(format!("batch_norm {what} has {len} entries, input has {c} channels"));
            }
        }
        if !(cfg.epsilon > 0.0) {
            return param_err(format!("batch_norm epsilon must be > 0, got {}", cfg.epsilon));
        }
        let hw = h * w;
        let m = n * hw;
        if cfg.training && m < 2 {
            return Err(Error::DegenerateBatch(format!(
                "batch_norm needs at least 2 values per channel in training mode, got N*H*W = {m}"
            )));
        }
        let xd = self.values[x.0].data();
        let (gd, bd) = (self.values[gamma.0].data(), self.values[beta.0].data());
        let eps = T::lit(cfg.epsilon);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); c];
        let mom = T::lit(cfg.momentum);
        for ch in 0..c {
            let (mean, var) = if cfg.training {
                let inv_m = T::lit(1.0 / m as f64);
                let mut mean = T::zero();
                for b in 0..n {
                    let o = (b * c + ch) * hw;
                    mean += xd[o..o + hw].iter().copied().sum::<T>();
                }
                mean *= inv_m;
                let mut var = T::zero();
                for b in 0..n {
                    let o = (b * c + ch) * hw;
                    var += xd[o..o + hw].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
                }
                var *= inv_m;
                stats.mean[ch] = (T::one() - mom) * stats.mean[ch] + mom * mean;
                stats.var[ch] = (T::one() - mom) * stats.var[ch] + mom * var;
                (mean, var)
            } else {
                (stats.mean[ch], stats.var[ch])
            };
            let is = T::one() / (var + eps).sqrt();
            inv_std[ch] = is;
            for b in 0..n {
                let o = (b * c + ch) * hw;
                for i in o..o + hw {
                    let xh = (xd[i] - mean) * is;
                    xhat[i] = xh;
                    out[i] = gd[ch] * xh + bd[ch];
                }
            }
        }
        let op = Op::BatchNorm {
            xhat,
            inv_std,
            training: cfg.training,
            c,
            hw,
        };
        Ok(self.push(vec![n, c, h, w], out, op, vec![x, gamma, beta]))
    }

    // ---- resampling and pooling -------------------------------------------

    /// Bilinear resize of every channel plane to `out_h x out_w`.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize, align_corners: bool) -> Result<Var> {
        let [n, c, h, w] = self.dims4(x, "bilinear_upsample input")?;
        if out_h == 0 || out_w == 0 {
            return param_err(format!("upsample target {out_h}x{out_w} must be at least 1x1"));
        }
        let rs = Resample {
            rows: kernels::interp_table(h, out_h, align_corners),
            cols: kernels::interp_table(w, out_w, align_corners),
            planes: n * c,
            h,
            w,
        };
        let out = rs.forward(self.values[x.0].data());
        Ok(self.push(vec![n, c, out_h, out_w], out, Op::Upsample(rs), vec![x]))
    }

    pub fn pool2d(&mut self, x: Var, mode: PoolMode, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        self.pool2d_impl(x, mode, kernel, stride, padding, false)
    }

    /// Unpadded pooling that keeps a final partial window, so the output extent is
    /// `ceil((size - kernel) / stride) + 1` (at least 1).
    pub fn pool2d_ceil(&mut self, x: Var, mode: PoolMode, kernel: usize, stride: usize) -> Result<Var> {
        self.pool2d_impl(x, mode, kernel, stride, 0, true)
    }

    fn pool2d_impl(
        &mut self,
        x: Var,
        mode: PoolMode,
        kernel: usize,
        stride: usize,
        padding: usize,
        ceil: bool,
    ) -> Result<Var> {
        let [n, c, h, w] = self.dims4(x, "pool2d input")?;
        if kernel == 0 || stride == 0 {
            return param_err("pool kernel and stride must be >= 1");
        }
        if 2 * padding > kernel {
            return param_err(format!("pool padding {padding} exceeds half the kernel {kernel}"));
        }
        if ceil && kernel < stride {
            return param_err(format!("ceil-mode pooling needs kernel >= stride, got {kernel} < {stride}"));
        }
        let (hout, wout) = if ceil {
            let ext = |size: usize| size.saturating_sub(kernel).div_ceil(stride) + 1;
            (ext(h), ext(w))
        } else {
            (
                kernels::window_out_extent("height", h, kernel, stride, padding, 1)?,
                kernels::window_out_extent("width", w, kernel, stride, padding, 1)?,
            )
        };
        let geom = PoolGeom {
            planes: n * c,
            h,
            w,
            k: kernel,
            stride,
            pad: padding,
            hout,
            wout,
        };
        let xd = self.values[x.0].data();
        let shape = vec![n, c, hout, wout];
        Ok(match mode {
            PoolMode::Max => {
                let (out, arg) = kernels::max_pool_forward(xd, &geom);
                self.push(shape, out, Op::MaxPool { geom, arg }, vec![x])
            }
            PoolMode::Avg => {
                let out = kernels::avg_pool_forward(xd, &geom);
                self.push(shape, out, Op::AvgPool(geom), vec![x])
            }
        })
    }

    /// Mean over `bins_h x bins_w` spatial bins.
    pub fn adaptive_avg_pool(&mut self, x: Var, bins_h: usize, bins_w: usize) -> Result<Var> {
        let [n, c, h, w] = self.dims4(x, "adaptive_avg_pool input")?;
        if bins_h == 0 || bins_w == 0 || bins_h > h || bins_w > w {
            return param_err(format!(
                "adaptive pool bins {bins_h}x{bins_w} must lie within 1..=spatial extent {h}x{w}"
            ));
        }
        let out = kernels::adaptive_avg_forward(self.values[x.0].data(), n * c, h, w, bins_h, bins_w);
        let op = Op::AdaptiveAvg {
            planes: n * c,
            h,
            w,
            bh: bins_h,
            bw: bins_w,
        };
        Ok(self.push(vec![n, c, bins_h, bins_w], out, op, vec![x]))
    }

    // ---- probabilities and losses -----------------------------------------

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return param_err(format!("softmax axis {axis} out of range for {s:?}"));
        }
        let outer = s[..axis].iter().product();
        let inner = s[axis + 1..].iter().product();
        let len = s[axis];
        let out = kernels::softmax_forward(self.values[x.0].data(), outer, len, inner);
        Ok(self.push(s, out, Op::Softmax { outer, len, inner }, vec![x]))
    }

    /// Per-pixel softmax over the class channels of an N x C x H x W map.
    pub fn softmax_channel(&mut self, x: Var) -> Result<Var> {
        self.dims4(x, "softmax_channel input")?;
        self.softmax(x, 1)
    }

    /// Mean cross-entropy over pixels whose label is not `ignore_index`.
    ///
    /// `labels` is `N x H x W` in row-major order. With every pixel ignored the loss is
    /// zero and so is its gradient.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8], ignore_index: u8) -> Result<Var> {
        let [n, c, h, w] = self.dims4(logits, "cross_entropy logits")?;
        if labels.len() != n * h * w {
            return param_err(format!(
                "label map has {} pixels, logits cover {n} x {h} x {w}",
                labels.len()
            ));
        }
        let (loss, grad) =
            kernels::cross_entropy(self.values[logits.0].data(), labels, n, c, h * w, ignore_index)?;
        Ok(self.push(Vec::new(), vec![loss], Op::CrossEntropy { grad }, vec![logits]))
    }

    // ---- reverse pass -------------------------------------------------------

    /// Accumulate `d(loss)/d(leaf)` into every gradient-requiring leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return param_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        if self.mode != Mode::Training {
            return param_err("backward on an inference-mode graph");
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; self.values.len()];
        adj[loss.0] = Some(vec![T::one()]);
        for node in self.nodes.iter().rev() {
            if node.output.0 > loss.0 {
                continue;
            }
            let Some(g) = adj[node.output.0].take() else { continue };
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.values[v.0].requires_grad())
                .collect();
            let grads = self.node_backward(node, &g, &needs);
            for ((inp, gi), need) in node.inputs.iter().zip(grads).zip(needs) {
                let (Some(gi), true) = (gi, need) else { continue };
                match &mut adj[inp.0] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        for (i, g) in adj.into_iter().enumerate() {
            if let Some(g) = g {
                if self.is_leaf[i] && self.values[i].requires_grad() {
                    self.values[i].accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, node: &Node<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let val = |i: usize| self.values[node.inputs[i].0].data();
        match &node.op {
            Op::Add(bc) => vec![Some(reduce_to(g, bc.na)), Some(reduce_to(g, bc.nb))],
            Op::Sub(bc) => {
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                vec![Some(reduce_to(g, bc.na)), Some(reduce_to(&neg, bc.nb))]
            }
            Op::Mul(bc) => {
                let (a, b) = (val(0), val(1));
                let ga: Vec<T> = g.iter().enumerate().map(|(i, &v)| v * b[i % bc.nb]).collect();
                let gb: Vec<T> = g.iter().enumerate().map(|(i, &v)| v * a[i % bc.na]).collect();
                vec![Some(reduce_to(&ga, bc.na)), Some(reduce_to(&gb, bc.nb))]
            }
            Op::AddScalar | Op::Reshape => vec![Some(g.to_vec())],
            Op::MulScalar(s) => vec![Some(g.iter().map(|&v| v * *s).collect())],
            Op::Relu => {
                let out = self.values[node.output.0].data();
                vec![Some(
                    g.iter()
                        .zip(out)
                        .map(|(&d, &y)| if y > T::zero() { d } else { T::zero() })
                        .collect(),
                )]
            }
            &Op::MatMul {
                batch,
                m,
                k,
                n,
                a_batched,
                b_batched,
            } => {
                let (a, b) = (val(0), val(1));
                let mut ga = needs[0].then(|| vec![T::zero(); a.len()]);
                let mut gb = needs[1].then(|| vec![T::zero(); b.len()]);
                for i in 0..batch {
                    let ao = if a_batched { i * m * k } else { 0 };
                    let bo = if b_batched { i * k * n } else { 0 };
                    let gc = MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n);
                    if let Some(ga) = ga.as_mut() {
                        let beta = if a_batched { T::zero() } else { T::one() };
                        gemm(
                            T::one(),
                            gc,
                            MatRef::new(&b[bo..bo + k * n], k, n).t(),
                            beta,
                            &mut ga[ao..ao + m * k],
                        );
                    }
                    if let Some(gb) = gb.as_mut() {
                        let beta = if b_batched { T::zero() } else { T::one() };
                        gemm(
                            T::one(),
                            MatRef::new(&a[ao..ao + m * k], m, k).t(),
                            gc,
                            beta,
                            &mut gb[bo..bo + k * n],
                        );
                    }
                }
                vec![ga, gb]
            }
            &Op::TransposeLast2 { batch, m, n } => {
                // g is batch x n x m; map back to batch x m x n.
                let mut out = Vec::with_capacity(g.len());
                for b in 0..batch {
                    let blk = &g[b * m * n..(b + 1) * m * n];
                    for i in 0..m {
                        out.extend((0..n).map(|j| blk[j * m + i]));
                    }
                }
                vec![Some(out)]
            }
            Op::Concat { sizes, outer, inner } => {
                let total: usize = sizes.iter().sum();
                let mut parts: Vec<Vec<T>> = sizes.iter().map(|s| Vec::with_capacity(outer * s * inner)).collect();
                for o in 0..*outer {
                    let mut off = o * total * inner;
                    for (p, &sz) in parts.iter_mut().zip(sizes) {
                        p.extend_from_slice(&g[off..off + sz * inner]);
                        off += sz * inner;
                    }
                }
                parts.into_iter().map(Some).collect()
            }
            Op::SumAll => vec![Some(vec![g[0]; val(0).len()])],
            Op::MeanAll => {
                let n = val(0).len();
                vec![Some(vec![g[0] / T::lit(n as f64); n])]
            }
            Op::Conv2d(geom) => {
                let has_bias = node.inputs.len() == 3;
                let grads = kernels::conv2d_backward(
                    val(0),
                    val(1),
                    g,
                    geom,
                    [needs[0], needs[1], has_bias && needs[2]],
                );
                let mut out = vec![grads.dx, grads.dw];
                if has_bias {
                    out.push(grads.db);
                }
                out
            }
            Op::BatchNorm {
                xhat,
                inv_std,
                training,
                c,
                hw,
            } => {
                let (c, hw) = (*c, *hw);
                let n = g.len() / (c * hw);
                let gamma = val(1);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let o = (b * c + ch) * hw;
                        for i in o..o + hw {
                            dbeta[ch] += g[i];
                            dgamma[ch] += g[i] * xhat[i];
                        }
                    }
                }
                let dx = needs[0].then(|| {
                    let mut dx = vec![T::zero(); g.len()];
                    let m = T::lit((n * hw) as f64);
                    for ch in 0..c {
                        let scale = gamma[ch] * inv_std[ch];
                        for b in 0..n {
                            let o = (b * c + ch) * hw;
                            for i in o..o + hw {
                                dx[i] = if *training {
                                    scale * (g[i] - dbeta[ch] / m - xhat[i] * dgamma[ch] / m)
                                } else {
                                    scale * g[i]
                                };
                            }
                        }
                    }
                    dx
                });
                vec![dx, Some(dgamma), Some(dbeta)]
            }
            Op::Upsample(rs) => vec![Some(rs.backward(g))],
            Op::MaxPool { geom, arg } => vec![Some(kernels::max_pool_backward(g, arg, geom))],
            Op::AvgPool(geom) => vec![Some(kernels::avg_pool_backward(g, geom))],
            &Op::AdaptiveAvg { planes, h, w, bh, bw } => {
                vec![Some(kernels::adaptive_avg_backward(g, planes, h, w, bh, bw))]
            }
            &Op::Softmax { outer, len, inner } => {
                let y = self.values[node.output.0].data();
                vec![Some(kernels::softmax_backward(y, g, outer, len, inner))]
            }
            Op::CrossEntropy { grad } => vec![Some(grad.iter().map(|&v| v * g[0]).collect())],
        }
    }
}
