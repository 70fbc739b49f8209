//! Slice-level forward and backward kernels. Shapes are validated by the graph
//! layer before these run.

use super::linalg::{gemm, MatRef};
use super::Element;
use crate::error::{param_err, Error, Result};

/// Spatial extent covered by a dilated kernel: `k + (k - 1)(dilation - 1)`.
pub fn effective_kernel_extent(k: usize, dilation: usize) -> Result<usize> {
    if k == 0 || dilation == 0 {
        return param_err(format!(
            "kernel size and dilation must be positive (got k={k}, dilation={dilation})"
        ));
    }
    Ok(k + (k - 1) * (dilation - 1))
}

/// Output extent of a sliding window along one axis.
pub(crate) fn window_out_extent(
    axis: &str,
    size: usize,
    k: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Result<usize> {
    if stride == 0 {
        return param_err("stride must be >= 1");
    }
    let eff = effective_kernel_extent(k, dilation)?;
    let padded = size + 2 * padding;
    if padded < eff {
        return Err(Error::Geometry(format!(
            "{axis}: padded extent {padded} is smaller than effective kernel extent {eff}"
        )));
    }
    Ok((padded - eff) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub dil: usize,
    pub groups: usize,
    pub hout: usize,
    pub wout: usize,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn col_rows(&self) -> usize {
        self.cin_g() * self.k * self.k
    }
    fn out_plane(&self) -> usize {
        self.hout * self.wout
    }
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom, c0: usize, cols: &mut [T]) {
    let p = g.out_plane();
    let plane = g.h * g.w;
    let mut row = 0;
    for c in c0..c0 + g.cin_g() {
        let src = &x[c * plane..(c + 1) * plane];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let dst = &mut cols[row * p..(row + 1) * p];
                for oh in 0..g.hout {
                    let ih = (oh * g.stride + ki * g.dil) as isize - g.pad as isize;
                    let out_row = &mut dst[oh * g.wout..(oh + 1) * g.wout];
                    if ih < 0 || ih as usize >= g.h {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, o) in out_row.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj * g.dil) as isize - g.pad as isize;
                        *o = if iw < 0 || iw as usize >= g.w {
                            T::zero()
                        } else {
                            src_row[iw as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], g: &ConvGeom, c0: usize, dx: &mut [T]) {
    let p = g.out_plane();
    let plane = g.h * g.w;
    let mut row = 0;
    for c in c0..c0 + g.cin_g() {
        let dst = &mut dx[c * plane..(c + 1) * plane];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let src = &cols[row * p..(row + 1) * p];
                for oh in 0..g.hout {
                    let ih = (oh * g.stride + ki * g.dil) as isize - g.pad as isize;
                    if ih < 0 || ih as usize >= g.h {
                        continue;
                    }
                    let dst_row = &mut dst[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.wout {
                        let iw = (ow * g.stride + kj * g.dil) as isize - g.pad as isize;
                        if iw >= 0 && (iw as usize) < g.w {
                            dst_row[iw as usize] += src[oh * g.wout + ow];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Element>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let p = g.out_plane();
    let (cin_g, cout_g, rows) = (g.cin_g(), g.cout_g(), g.col_rows());
    let mut out = vec![T::zero(); g.n * g.cout * p];
    let mut cols = vec![T::zero(); rows * p];
    let in_sample = g.cin * g.h * g.w;
    let out_sample = g.cout * p;
    for n in 0..g.n {
        let xs = &x[n * in_sample..(n + 1) * in_sample];
        for grp in 0..g.groups {
            im2col(xs, g, grp * cin_g, &mut cols);
            let wg = &w[grp * cout_g * rows..(grp + 1) * cout_g * rows];
            let o0 = n * out_sample + grp * cout_g * p;
            gemm(
                T::one(),
                MatRef::new(wg, cout_g, rows),
                MatRef::new(&cols, rows, p),
                T::zero(),
                &mut out[o0..o0 + cout_g * p],
            );
        }
        if let Some(b) = bias {
            for (co, &bv) in b.iter().enumerate() {
                let o0 = n * out_sample + co * p;
                out[o0..o0 + p].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Element>(
    x: &[T],
    w: &[T],
    dout: &[T],
    g: &ConvGeom,
    need: [bool; 3],
) -> ConvGrads<T> {
    let p = g.out_plane();
    let (cin_g, cout_g, rows) = (g.cin_g(), g.cout_g(), g.col_rows());
    let in_sample = g.cin * g.h * g.w;
    let out_sample = g.cout * p;
    let mut dx = need[0].then(|| vec![T::zero(); x.len()]);
    let mut dw = need[1].then(|| vec![T::zero(); w.len()]);
    let db = need[2].then(|| {
        let mut db = vec![T::zero(); g.cout];
        for n in 0..g.n {
            for (co, d) in db.iter_mut().enumerate() {
                let o0 = n * out_sample + co * p;
                *d += dout[o0..o0 + p].iter().copied().sum::<T>();
            }
        }
        db
    });
    if dx.is_none() && dw.is_none() {
        return ConvGrads { dx, dw, db };
    }
    let mut cols = vec![T::zero(); rows * p];
    for n in 0..g.n {
        let xs = &x[n * in_sample..(n + 1) * in_sample];
        for grp in 0..g.groups {
            let o0 = n * out_sample + grp * cout_g * p;
            let dout_g = MatRef::new(&dout[o0..o0 + cout_g * p], cout_g, p);
            let wr = grp * cout_g * rows..(grp + 1) * cout_g * rows;
            if let Some(dw) = dw.as_mut() {
                im2col(xs, g, grp * cin_g, &mut cols);
                gemm(
                    T::one(),
                    dout_g,
                    MatRef::new(&cols, rows, p).t(),
                    T::one(),
                    &mut dw[wr.clone()],
                );
            }
            if let Some(dx) = dx.as_mut() {
                gemm(
                    T::one(),
                    MatRef::new(&w[wr], cout_g, rows).t(),
                    dout_g,
                    T::zero(),
                    &mut cols,
                );
                col2im(&cols, g, grp * cin_g, &mut dx[n * in_sample..(n + 1) * in_sample]);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Per-axis bilinear sampling table: `(lower index, upper index, upper weight)`.
pub(crate) fn interp_table<T: Element>(src: usize, dst: usize, align_corners: bool) -> Vec<(usize, usize, T)> {
    (0..dst)
        .map(|d| {
            let pos = if align_corners {
                if dst == 1 {
                    0.0
                } else {
                    d as f64 * (src - 1) as f64 / (dst - 1) as f64
                }
            } else {
                ((d as f64 + 0.5) * src as f64 / dst as f64 - 0.5).max(0.0)
            };
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let lambda = if i1 == i0 { 0.0 } else { pos - i0 as f64 };
            (i0, i1, T::lit(lambda))
        })
        .collect()
}

pub(crate) struct Resample<T> {
    pub rows: Vec<(usize, usize, T)>,
    pub cols: Vec<(usize, usize, T)>,
    pub planes: usize,
    pub h: usize,
    pub w: usize,
}

impl<T: Element> Resample<T> {
    pub fn forward(&self, x: &[T]) -> Vec<T> {
        let (oh, ow) = (self.rows.len(), self.cols.len());
        let mut out = Vec::with_capacity(self.planes * oh * ow);
        for pl in 0..self.planes {
            let src = &x[pl * self.h * self.w..(pl + 1) * self.h * self.w];
            for &(r0, r1, ly) in &self.rows {
                let top = &src[r0 * self.w..(r0 + 1) * self.w];
                let bot = &src[r1 * self.w..(r1 + 1) * self.w];
                for &(c0, c1, lx) in &self.cols {
                    let t = top[c0] + (top[c1] - top[c0]) * lx;
                    let b = bot[c0] + (bot[c1] - bot[c0]) * lx;
                    out.push(t + (b - t) * ly);
                }
            }
        }
        out
    }

    pub fn backward(&self, dout: &[T]) -> Vec<T> {
        let (oh, ow) = (self.rows.len(), self.cols.len());
        let mut dx = vec![T::zero(); self.planes * self.h * self.w];
        let one = T::one();
        for pl in 0..self.planes {
            let dst = &mut dx[pl * self.h * self.w..(pl + 1) * self.h * self.w];
            let src = &dout[pl * oh * ow..(pl + 1) * oh * ow];
            for (i, &(r0, r1, ly)) in self.rows.iter().enumerate() {
                for (j, &(c0, c1, lx)) in self.cols.iter().enumerate() {
                    let g = src[i * ow + j];
                    dst[r0 * self.w + c0] += g * (one - ly) * (one - lx);
                    dst[r0 * self.w + c1] += g * (one - ly) * lx;
                    dst[r1 * self.w + c0] += g * ly * (one - lx);
                    dst[r1 * self.w + c1] += g * ly * lx;
                }
            }
        }
        dx
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub hout: usize,
    pub wout: usize,
}

impl PoolGeom {
    /// Clipped window `[start, end)` along one axis.
    fn span(&self, o: usize, size: usize) -> (usize, usize) {
        let start = (o * self.stride) as isize - self.pad as isize;
        let end = (start + self.k as isize).min(size as isize);
        (start.max(0) as usize, end.max(0) as usize)
    }
}

/// Max pooling. Returns outputs and the flat in-plane argmax per output; ties keep the
/// first element in row-major scan order.
pub(crate) fn max_pool_forward<T: Element>(x: &[T], g: &PoolGeom) -> (Vec<T>, Vec<usize>) {
    let plane = g.h * g.w;
    let mut out = Vec::with_capacity(g.planes * g.hout * g.wout);
    let mut arg = Vec::with_capacity(out.capacity());
    for pl in 0..g.planes {
        let src = &x[pl * plane..(pl + 1) * plane];
        for oh in 0..g.hout {
            let (h0, h1) = g.span(oh, g.h);
            for ow in 0..g.wout {
                let (w0, w1) = g.span(ow, g.w);
                let mut best = h0 * g.w + w0;
                for ih in h0..h1 {
                    for iw in w0..w1 {
                        if src[ih * g.w + iw] > src[best] {
                            best = ih * g.w + iw;
                        }
                    }
                }
                out.push(src[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(crate) fn max_pool_backward<T: Element>(dout: &[T], arg: &[usize], g: &PoolGeom) -> Vec<T> {
    let plane = g.h * g.w;
    let per = g.hout * g.wout;
    let mut dx = vec![T::zero(); g.planes * plane];
    for (i, (&d, &a)) in dout.iter().zip(arg).enumerate() {
        dx[(i / per) * plane + a] += d;
    }
    dx
}

/// Average pooling over the in-bounds part of each window.
pub(crate) fn avg_pool_forward<T: Element>(x: &[T], g: &PoolGeom) -> Vec<T> {
    let plane = g.h * g.w;
    let mut out = Vec::with_capacity(g.planes * g.hout * g.wout);
    for pl in 0..g.planes {
        let src = &x[pl * plane..(pl + 1) * plane];
        for oh in 0..g.hout {
            let (h0, h1) = g.span(oh, g.h);
            for ow in 0..g.wout {
                let (w0, w1) = g.span(ow, g.w);
                let mut acc = T::zero();
                for ih in h0..h1 {
                    for iw in w0..w1 {
                        acc += src[ih * g.w + iw];
                    }
                }
                out.push(acc / T::lit(((h1 - h0) * (w1 - w0)) as f64));
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward<T: Element>(dout: &[T], g: &PoolGeom) -> Vec<T> {
    let plane = g.h * g.w;
    let mut dx = vec![T::zero(); g.planes * plane];
    let mut i = 0;
    for pl in 0..g.planes {
        let dst = &mut dx[pl * plane..(pl + 1) * plane];
        for oh in 0..g.hout {
            let (h0, h1) = g.span(oh, g.h);
            for ow in 0..g.wout {
                let (w0, w1) = g.span(ow, g.w);
                let share = dout[i] / T::lit(((h1 - h0) * (w1 - w0)) as f64);
                for ih in h0..h1 {
                    for iw in w0..w1 {
                        dst[ih * g.w + iw] += share;
                    }
                }
                i += 1;
            }
        }
    }
    dx
}

/// Bin `b` of `bins` over an axis of length `size` covers `[floor(b*size/bins), floor((b+1)*size/bins))`.
pub(crate) fn adaptive_bin(b: usize, bins: usize, size: usize) -> (usize, usize) {
    (b * size / bins, (b + 1) * size / bins)
}

pub(crate) fn adaptive_avg_forward<T: Element>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    bh: usize,
    bw: usize,
) -> Vec<T> {
    let mut out = Vec::with_capacity(planes * bh * bw);
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        for i in 0..bh {
            let (r0, r1) = adaptive_bin(i, bh, h);
            for j in 0..bw {
                let (c0, c1) = adaptive_bin(j, bw, w);
                let mut acc = T::zero();
                for r in r0..r1 {
                    acc += src[r * w + c0..r * w + c1].iter().copied().sum::<T>();
                }
                out.push(acc / T::lit(((r1 - r0) * (c1 - c0)) as f64));
            }
        }
    }
    out
}

pub(crate) fn adaptive_avg_backward<T: Element>(
    dout: &[T],
    planes: usize,
    h: usize,
    w: usize,
    bh: usize,
    bw: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); planes * h * w];
    for pl in 0..planes {
        let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
        for i in 0..bh {
            let (r0, r1) = adaptive_bin(i, bh, h);
            for j in 0..bw {
                let (c0, c1) = adaptive_bin(j, bw, w);
                let share = dout[(pl * bh + i) * bw + j] / T::lit(((r1 - r0) * (c1 - c0)) as f64);
                for r in r0..r1 {
                    dst[r * w + c0..r * w + c1].iter_mut().for_each(|v| *v += share);
                }
            }
        }
    }
    dx
}

/// Softmax along the middle axis of an `(outer, len, inner)` layout.
pub(crate) fn softmax_forward<T: Element>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let idx = |c: usize| base + c * inner + i;
            let max = (0..len).map(|c| x[idx(c)]).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for c in 0..len {
                let e = (x[idx(c)] - max).exp();
                out[idx(c)] = e;
                sum += e;
            }
            for c in 0..len {
                out[idx(c)] /= sum;
            }
        }
    }
    out
}

pub(crate) fn softmax_backward<T: Element>(y: &[T], dy: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let idx = |c: usize| base + c * inner + i;
            let dot: T = (0..len).map(|c| y[idx(c)] * dy[idx(c)]).sum();
            for c in 0..len {
                dx[idx(c)] = y[idx(c)] * (dy[idx(c)] - dot);
            }
        }
    }
    dx
}

/// Mean pixel cross-entropy over non-ignored pixels, and its gradient w.r.t. the logits.
pub(crate) fn cross_entropy<T: Element>(
    logits: &[T],
    labels: &[u8],
    n: usize,
    c: usize,
    plane: usize,
    ignore_index: u8,
) -> Result<(T, Vec<T>)> {
    let mut grad = vec![T::zero(); logits.len()];
    let mut total = 0.0f64;
    let mut count = 0usize;
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let label = labels[b * plane + p];
            if label == ignore_index {
                continue;
            }
            if label as usize >= c {
                return Err(Error::Data(format!(
                    "label {label} at pixel {} (sample {b}, offset {p}) is outside [0, {c})",
                    b * plane + p
                )));
            }
            let idx = |k: usize| base + k * plane + p;
            let max = (0..c).map(|k| logits[idx(k)]).fold(T::neg_infinity(), T::max);
            let sum: T = (0..c).map(|k| (logits[idx(k)] - max).exp()).sum();
            let log_z = max + sum.ln();
            total += (log_z - logits[idx(label as usize)]).to_f64().unwrap_or(f64::NAN);
            for k in 0..c {
                grad[idx(k)] = (logits[idx(k)] - log_z).exp();
            }
            grad[idx(label as usize)] -= T::one();
            count += 1;
        }
    }
    if count == 0 {
        return Ok((T::zero(), grad));
    }
    let inv = T::lit(1.0 / count as f64);
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((T::lit(total / count as f64), grad))
}
