//! Zero-padded 2-D cross-correlation via chunked im2col + GEMM.
//!
//! Forward, input-gradient and weight-gradient are three bilinear ops whose
//! derivatives are expressed through one another, so the family is closed
//! under differentiation.

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Upper bound on the number of elements of one im2col buffer.
const CHUNK_ELEMS: usize = 1 << 21;

/// Layers at least this wide go through im2col + GEMM; narrower ones use
/// the direct kernels.
const GEMM_MIN_CHANNELS: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Conv2dGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (&[n, c, h, w], &[co, ci, kh, kw]) = (input, weight) else {
            return Err(Error::dim(format!(
                "conv2d expects NCHW input and OIHW weight, got {input:?} / {weight:?}"
            )));
        };
        if c != ci {
            return Err(Error::dim(format!(
                "conv2d input has {c} channels but weight expects {ci}"
            )));
        }
        if stride == 0 {
            return Err(Error::arg("conv2d stride must be >= 1"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::dim(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        Ok(Conv2dGeometry {
            batch: n,
            in_channels: c,
            height: h,
            width: w,
            out_channels: co,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.batch, self.in_channels, self.height, self.width]
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_h, self.out_w]
    }

    fn rows(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn total_cols(&self) -> usize {
        self.batch * self.plane()
    }

    fn chunk_len(&self) -> usize {
        (CHUNK_ELEMS / self.rows().max(1)).max(self.out_w).max(1)
    }

    /// Output-row segments `(sample, out_row, ow_start, ow_end, col_offset)`
    /// covering columns `start..end`.
    fn segments(&self, start: usize, end: usize) -> Vec<(usize, usize, usize, usize, usize)> {
        let mut segs = Vec::new();
        let mut j = start;
        while j < end {
            let (n, p) = (j / self.plane(), j % self.plane());
            let (oh, ow) = (p / self.out_w, p % self.out_w);
            let ow_end = (ow + (end - j)).min(self.out_w);
            segs.push((n, oh, ow, ow_end, j - start));
            j += ow_end - ow;
        }
        segs
    }

    /// Output columns `lo..hi` (clipped to `ow0..ow1`) whose tap `kj` lands inside the row.
    fn valid_cols(&self, kj: usize, ow0: usize, ow1: usize) -> (usize, usize) {
        let (s, pad, w) = (self.stride, self.pad, self.width);
        let lo = pad.saturating_sub(kj).div_ceil(s);
        let hi = if w + pad > kj { (w + pad - kj - 1) / s + 1 } else { 0 };
        let lo = lo.clamp(ow0, ow1);
        (lo, hi.clamp(lo, ow1))
    }

    /// Appends the im2col matrix (rows × len) for the chunk to `col`.
    fn im2col<E: Element>(&self, x: &[E], segs: &[(usize, usize, usize, usize, usize)], len: usize, col: &mut Vec<E>) {
        let (h, w) = (self.height, self.width);
        let s = self.stride;
        col.clear();
        col.reserve(self.rows() * len);
        for ci in 0..self.in_channels {
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let (full_lo, full_hi) = self.valid_cols(kj, 0, self.out_w);
                    for &(n, oh, ow0, ow1, _) in segs {
                        let ih = (oh * s + ki) as isize - self.pad as isize;
                        if ih < 0 || ih >= h as isize {
                            col.resize(col.len() + (ow1 - ow0), E::zero());
                            continue;
                        }
                        let src = &x[((n * self.in_channels + ci) * h + ih as usize) * w..][..w];
                        let lo = full_lo.clamp(ow0, ow1);
                        let hi = full_hi.clamp(lo, ow1);
                        col.resize(col.len() + (lo - ow0), E::zero());
                        if hi > lo {
                            let first = lo * s + kj - self.pad;
                            if s == 1 {
                                col.extend_from_slice(&src[first..first + (hi - lo)]);
                            } else {
                                col.extend((0..hi - lo).map(|t| src[first + t * s]));
                            }
                        }
                        col.resize(col.len() + (ow1 - hi), E::zero());
                    }
                }
            }
        }
    }

    fn col2im<E: Element>(&self, col: &[E], segs: &[(usize, usize, usize, usize, usize)], len: usize, dx: &mut [E]) {
        let (h, w) = (self.height, self.width);
        let s = self.stride;
        for ci in 0..self.in_channels {
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let r = (ci * self.kernel_h + ki) * self.kernel_w + kj;
                    let row = &col[r * len..(r + 1) * len];
                    let (full_lo, full_hi) = self.valid_cols(kj, 0, self.out_w);
                    for &(n, oh, ow0, ow1, off) in segs {
                        let ih = (oh * s + ki) as isize - self.pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let dst = &mut dx[((n * self.in_channels + ci) * h + ih as usize) * w..][..w];
                        let lo = full_lo.clamp(ow0, ow1);
                        let hi = full_hi.clamp(lo, ow1);
                        if hi == lo {
                            continue;
                        }
                        let first = lo * s + kj - self.pad;
                        let src = &row[off + lo - ow0..off + hi - ow0];
                        if s == 1 {
                            for (d, &v) in dst[first..first + src.len()].iter_mut().zip(src) {
                                *d = *d + v;
                            }
                        } else {
                            for (t, &v) in src.iter().enumerate() {
                                let d = &mut dst[first + t * s];
                                *d = *d + v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Copies output-shaped NCHW data for the chunk into a (C_out × len) matrix.
    fn gather_out<E: Element>(&self, y: &[E], segs: &[(usize, usize, usize, usize, usize)], len: usize, m: &mut [E]) {
        let plane = self.plane();
        for co in 0..self.out_channels {
            for &(n, oh, ow0, ow1, off) in segs {
                let src = &y[(n * self.out_channels + co) * plane + oh * self.out_w..];
                m[co * len + off..co * len + off + (ow1 - ow0)].copy_from_slice(&src[ow0..ow1]);
            }
        }
    }

    fn scatter_out<E: Element>(&self, m: &[E], segs: &[(usize, usize, usize, usize, usize)], len: usize, y: &mut [E]) {
        let plane = self.plane();
        for co in 0..self.out_channels {
            for &(n, oh, ow0, ow1, off) in segs {
                let dst = &mut y[(n * self.out_channels + co) * plane + oh * self.out_w..];
                dst[ow0..ow1].copy_from_slice(&m[co * len + off..co * len + off + (ow1 - ow0)]);
            }
        }
    }

    fn chunks(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let total = self.total_cols();
        let step = self.chunk_len();
        (0..total).step_by(step).map(move |s| (s, (s + step).min(total)))
    }

    pub(crate) fn forward<E: Element>(&self, x: &[E], wt: &[E]) -> Vec<E> {
        if self.out_channels < GEMM_MIN_CHANNELS {
            self.direct_forward(x, wt)
        } else {
            self.gemm_forward(x, wt)
        }
    }

    fn gemm_forward<E: Element>(&self, x: &[E], wt: &[E]) -> Vec<E> {
        let rows = self.rows();
        let mut y = vec![E::zero(); self.batch * self.out_channels * self.plane()];
        let mut col = Vec::new();
        let mut out = Vec::new();
        for (start, end) in self.chunks() {
            let len = end - start;
            let segs = self.segments(start, end);
            out.resize(self.out_channels * len, E::zero());
            self.im2col(x, &segs, len, &mut col);
            E::gemm(
                self.out_channels,
                rows,
                len,
                E::one(),
                wt,
                rows as isize,
                1,
                &col,
                len as isize,
                1,
                E::zero(),
                &mut out,
                len as isize,
                1,
            );
            self.scatter_out(&out, &segs, len, &mut y);
        }
        y
    }

    pub(crate) fn input_grad<E: Element>(&self, g: &[E], wt: &[E]) -> Vec<E> {
        if self.out_channels < GEMM_MIN_CHANNELS {
            self.direct_input_grad(g, wt)
        } else {
            self.gemm_input_grad(g, wt)
        }
    }

    fn gemm_input_grad<E: Element>(&self, g: &[E], wt: &[E]) -> Vec<E> {
        let rows = self.rows();
        let mut dx = vec![E::zero(); self.batch * self.in_channels * self.height * self.width];
        let mut col = Vec::new();
        let mut gm = Vec::new();
        for (start, end) in self.chunks() {
            let len = end - start;
            let segs = self.segments(start, end);
            gm.resize(self.out_channels * len, E::zero());
            col.resize(rows * len, E::zero());
            self.gather_out(g, &segs, len, &mut gm);
            // col = Wᵀ · g
            E::gemm(
                rows,
                self.out_channels,
                len,
                E::one(),
                wt,
                1,
                rows as isize,
                &gm,
                len as isize,
                1,
                E::zero(),
                &mut col,
                len as isize,
                1,
            );
            self.col2im(&col, &segs, len, &mut dx);
        }
        dx
    }

    pub(crate) fn weight_grad<E: Element>(&self, x: &[E], g: &[E]) -> Vec<E> {
        if self.out_channels < GEMM_MIN_CHANNELS {
            self.direct_weight_grad(x, g)
        } else {
            self.gemm_weight_grad(x, g)
        }
    }

    fn gemm_weight_grad<E: Element>(&self, x: &[E], g: &[E]) -> Vec<E> {
        let rows = self.rows();
        let mut dw = vec![E::zero(); self.out_channels * rows];
        let mut col = Vec::new();
        let mut gm = Vec::new();
        for (start, end) in self.chunks() {
            let len = end - start;
            let segs = self.segments(start, end);
            gm.resize(self.out_channels * len, E::zero());
            self.gather_out(g, &segs, len, &mut gm);
            self.im2col(x, &segs, len, &mut col);
            // dW += g · colᵀ
            E::gemm(
                self.out_channels,
                len,
                rows,
                E::one(),
                &gm,
                len as isize,
                1,
                &col,
                1,
                len as isize,
                E::one(),
                &mut dw,
                rows as isize,
                1,
            );
        }
        dw
    }

    // Direct kernels. The zero-padded input is split into stride² phase
    // planes, phase (a, b) holding padded pixels (s·i + a, s·j + b), each
    // `hs × ws`. Output pixel (oh, ow) lives at `oh * ws + ow` of a "wide"
    // plane, and kernel tap (s·u + a, s·v + b) reads phase (a, b) at offset
    // `u * ws + v`, so every tap is one contiguous axpy (or dot). Small
    // planes of several samples are stacked vertically and handled in one
    // pass; the rows between them only ever meet zeros.

    fn phase_dims(&self) -> (usize, usize) {
        let s = self.stride;
        ((self.height + 2 * self.pad).div_ceil(s), (self.width + 2 * self.pad).div_ceil(s))
    }

    /// Samples per stacked group.
    fn group_size(&self) -> usize {
        const TARGET: usize = 1 << 13;
        let (hs, ws) = self.phase_dims();
        (TARGET / (hs * ws)).clamp(1, self.batch.max(1))
    }

    /// Length of the wide output run for a group of `k` samples.
    fn wide_len(&self, k: usize) -> usize {
        let (hs, ws) = self.phase_dims();
        ((k - 1) * hs + self.out_h - 1) * ws + self.out_w
    }

    /// Per phase, the kernel taps it serves as `(tap index, offset)`.
    fn phase_taps(&self) -> Vec<Vec<(usize, usize)>> {
        let s = self.stride;
        let ws = self.phase_dims().1;
        let mut out = vec![Vec::new(); s * s];
        for ki in 0..self.kernel_h {
            for kj in 0..self.kernel_w {
                out[(ki % s) * s + kj % s].push((ki * self.kernel_w + kj, (ki / s) * ws + kj / s));
            }
        }
        out
    }

    /// Maps padded coordinate `r` to (phase component, phase-plane index).
    fn split(&self, r: usize) -> (usize, usize) {
        (r % self.stride, r / self.stride)
    }

    /// Phase planes of samples `n0..n0 + k`, laid out `[ci][phase][k·hs][ws]`.
    fn phase_planes<E: Element>(&self, x: &[E], n0: usize, k: usize) -> Vec<E> {
        let (hs, ws) = self.phase_dims();
        let (h, w, p, s) = (self.height, self.width, self.pad, self.stride);
        let plane = k * hs * ws;
        let mut out = vec![E::zero(); self.in_channels * s * s * plane];
        for ci in 0..self.in_channels {
            let dst = &mut out[ci * s * s * plane..][..s * s * plane];
            for m in 0..k {
                let src = &x[((n0 + m) * self.in_channels + ci) * h * w..][..h * w];
                let base = m * hs * ws;
                for r in 0..h {
                    let (a, i) = self.split(r + p);
                    let row = &src[r * w..][..w];
                    if s == 1 {
                        dst[base + i * ws + p..][..w].copy_from_slice(row);
                        continue;
                    }
                    for (c, &v) in row.iter().enumerate() {
                        let (b, j) = self.split(c + p);
                        dst[(a * s + b) * plane + base + i * ws + j] = v;
                    }
                }
            }
        }
        out
    }

    /// Inverse of [`Self::phase_planes`] for one channel of sample `m` of a
    /// group of `k`, dropping the padding.
    fn unphase<E: Element>(&self, ph: &[E], k: usize, m: usize, dst: &mut [E]) {
        let (hs, ws) = self.phase_dims();
        let (w, p, s) = (self.width, self.pad, self.stride);
        let plane = k * hs * ws;
        let base = m * hs * ws;
        for (r, row) in dst.chunks_exact_mut(w).enumerate() {
            let (a, i) = self.split(r + p);
            if s == 1 {
                row.copy_from_slice(&ph[base + i * ws + p..][..w]);
                continue;
            }
            for (c, d) in row.iter_mut().enumerate() {
                let (b, j) = self.split(c + p);
                *d = ph[(a * s + b) * plane + base + i * ws + j];
            }
        }
    }

    /// Output planes of samples `n0..n0 + k` spread to the wide layout, zeros elsewhere.
    fn widen_planes<E: Element>(&self, g: &[E], n0: usize, k: usize) -> Vec<E> {
        let (hs, ws) = self.phase_dims();
        let len = self.wide_len(k);
        let (oh, ow) = (self.out_h, self.out_w);
        let mut out = vec![E::zero(); self.out_channels * len];
        for co in 0..self.out_channels {
            let dst = &mut out[co * len..][..len];
            for m in 0..k {
                let src = &g[((n0 + m) * self.out_channels + co) * oh * ow..][..oh * ow];
                for r in 0..oh {
                    dst[(m * hs + r) * ws..][..ow].copy_from_slice(&src[r * ow..][..ow]);
                }
            }
        }
        out
    }

    fn groups(&self) -> impl Iterator<Item = (usize, usize)> {
        let (total, k) = (self.batch, self.group_size());
        (0..total).step_by(k).map(move |n0| (n0, k.min(total - n0)))
    }

    fn direct_forward<E: Element>(&self, x: &[E], wt: &[E]) -> Vec<E> {
        let (hs, ws) = self.phase_dims();
        let phases = self.phase_taps();
        let offs: Vec<Vec<usize>> = phases.iter().map(|t| t.iter().map(|&(_, o)| o).collect()).collect();
        let taps = self.kernel_h * self.kernel_w;
        let np = phases.len();
        let (oh, ow) = (self.out_h, self.out_w);
        let mut y = vec![E::zero(); self.batch * self.out_channels * oh * ow];
        let mut wbuf = Vec::with_capacity(taps);
        for (n0, k) in self.groups() {
            let plane = k * hs * ws;
            let mut acc = vec![E::zero(); self.wide_len(k)];
            let xp = self.phase_planes(x, n0, k);
            for co in 0..self.out_channels {
                acc.fill(E::zero());
                for ci in 0..self.in_channels {
                    let wk = &wt[(co * self.in_channels + ci) * taps..][..taps];
                    for (ph, (tl, ol)) in phases.iter().zip(&offs).enumerate() {
                        wbuf.clear();
                        wbuf.extend(tl.iter().map(|&(t, _)| wk[t]));
                        taps_axpy(&mut acc, &wbuf, ol, &xp[(ci * np + ph) * plane..][..plane]);
                    }
                }
                for m in 0..k {
                    let dst = &mut y[((n0 + m) * self.out_channels + co) * oh * ow..][..oh * ow];
                    for r in 0..oh {
                        dst[r * ow..][..ow].copy_from_slice(&acc[(m * hs + r) * ws..][..ow]);
                    }
                }
            }
        }
        y
    }

    fn direct_input_grad<E: Element>(&self, g: &[E], wt: &[E]) -> Vec<E> {
        let (hs, ws) = self.phase_dims();
        let phases = self.phase_taps();
        let taps = self.kernel_h * self.kernel_w;
        let np = phases.len();
        let (h, w) = (self.height, self.width);
        let mut dx = vec![E::zero(); self.batch * self.in_channels * h * w];
        for (n0, k) in self.groups() {
            let (plane, len) = (k * hs * ws, self.wide_len(k));
            let mut acc = vec![E::zero(); np * plane];
            let gw = self.widen_planes(g, n0, k);
            for ci in 0..self.in_channels {
                acc.fill(E::zero());
                for co in 0..self.out_channels {
                    let gp = &gw[co * len..][..len];
                    let wk = &wt[(co * self.in_channels + ci) * taps..][..taps];
                    for (ph, tl) in phases.iter().enumerate() {
                        let dst = &mut acc[ph * plane..][..plane];
                        for &(t, off) in tl {
                            axpy(&mut dst[off..off + len], wk[t], gp);
                        }
                    }
                }
                for m in 0..k {
                    self.unphase(&acc, k, m, &mut dx[((n0 + m) * self.in_channels + ci) * h * w..][..h * w]);
                }
            }
        }
        dx
    }

    fn direct_weight_grad<E: Element>(&self, x: &[E], g: &[E]) -> Vec<E> {
        let (hs, ws) = self.phase_dims();
        let phases = self.phase_taps();
        let taps = self.kernel_h * self.kernel_w;
        let np = phases.len();
        let mut dw = vec![E::zero(); self.out_channels * self.in_channels * taps];
        for (n0, k) in self.groups() {
            let (plane, len) = (k * hs * ws, self.wide_len(k));
            let xp = self.phase_planes(x, n0, k);
            let gw = self.widen_planes(g, n0, k);
            for co in 0..self.out_channels {
                let gp = &gw[co * len..][..len];
                for ci in 0..self.in_channels {
                    let dk = &mut dw[(co * self.in_channels + ci) * taps..][..taps];
                    for (ph, tl) in phases.iter().enumerate() {
                        let src = &xp[(ci * np + ph) * plane..][..plane];
                        for &(t, off) in tl {
                            dk[t] = dk[t] + dot(gp, &src[off..off + len]);
                        }
                    }
                }
            }
        }
        dw
    }
}

/// `acc[i] += Σ_t w[t] · x[i + offs[t]]`, blocked so `acc` stays in registers.
#[inline(always)]
fn taps_axpy_impl<E: Element>(acc: &mut [E], w: &[E], offs: &[usize], x: &[E]) {
    const B: usize = 16;
    let len = acc.len();
    let full = len - len % B;
    for i0 in (0..full).step_by(B) {
        let mut r: [E; B] = acc[i0..i0 + B].try_into().expect("block");
        for (&off, &wv) in offs.iter().zip(w) {
            let xs: &[E; B] = x[i0 + off..i0 + off + B].try_into().expect("block");
            for l in 0..B {
                r[l] = r[l] + wv * xs[l];
            }
        }
        acc[i0..i0 + B].copy_from_slice(&r);
    }
    for (&off, &wv) in offs.iter().zip(w) {
        axpy_impl(&mut acc[full..], wv, &x[full + off..len + off]);
    }
}

#[inline(always)]
fn axpy_impl<E: Element>(y: &mut [E], a: E, x: &[E]) {
    for (d, &v) in y.iter_mut().zip(x) {
        *d = *d + a * v;
    }
}

#[inline(always)]
fn dot_impl<E: Element>(a: &[E], b: &[E]) -> E {
    const LANES: usize = 8;
    let mut acc = [E::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..LANES {
            acc[i] = acc[i] + x[i] * y[i];
        }
    }
    let mut tail = E::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail = tail + x * y;
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

impl<E: Element> Tensor<E> {
    /// Cross-correlation of an NCHW input with an OIHW kernel, zero padding.
    pub fn conv2d(&self, weight: &Tensor<E>, stride: usize, pad: usize) -> Result<Tensor<E>> {
        let geo = Conv2dGeometry::new(self.shape(), weight.shape(), stride, pad)?;
        let data = geo.forward(self.data(), weight.data());
        Ok(Tensor::from_op(
            "conv2d",
            data,
            geo.output_shape(),
            vec![self.clone(), weight.clone()],
            move |p, _, g| {
                let gx = if p[0].requires_grad() {
                    Some(Tensor::conv2d_input_grad(g, &p[1], &geo)?)
                } else {
                    None
                };
                let gw = if p[1].requires_grad() {
                    Some(Tensor::conv2d_weight_grad(&p[0], g, &geo)?)
                } else {
                    None
                };
                Ok(vec![gx, gw])
            },
        ))
    }

    /// Gradient of a convolution with respect to its input (a transposed
    /// convolution of `grad_out`).
    pub fn conv2d_input_grad(grad_out: &Tensor<E>, weight: &Tensor<E>, geo: &Conv2dGeometry) -> Result<Tensor<E>> {
        if grad_out.shape() != geo.output_shape().as_slice() || weight.shape() != geo.weight_shape().as_slice() {
            return Err(Error::dim(format!(
                "conv2d_input_grad: grad {:?} weight {:?} for geometry {geo:?}",
                grad_out.shape(),
                weight.shape()
            )));
        }
        let data = geo.input_grad(grad_out.data(), weight.data());
        let geo = *geo;
        Ok(Tensor::from_op(
            "conv2d_input_grad",
            data,
            geo.input_shape(),
            vec![grad_out.clone(), weight.clone()],
            move |p, _, up| {
                let gg = if p[0].requires_grad() {
                    Some(up.conv2d(&p[1], geo.stride, geo.pad)?)
                } else {
                    None
                };
                let gw = if p[1].requires_grad() {
                    Some(Tensor::conv2d_weight_grad(up, &p[0], &geo)?)
                } else {
                    None
                };
                Ok(vec![gg, gw])
            },
        ))
    }

    /// Gradient of a convolution with respect to its kernel.
    pub fn conv2d_weight_grad(input: &Tensor<E>, grad_out: &Tensor<E>, geo: &Conv2dGeometry) -> Result<Tensor<E>> {
        if input.shape() != geo.input_shape().as_slice() || grad_out.shape() != geo.output_shape().as_slice() {
            return Err(Error::dim(format!(
                "conv2d_weight_grad: input {:?} grad {:?} for geometry {geo:?}",
                input.shape(),
                grad_out.shape()
            )));
        }
        let data = geo.weight_grad(input.data(), grad_out.data());
        let geo = *geo;
        Ok(Tensor::from_op(
            "conv2d_weight_grad",
            data,
            geo.weight_shape(),
            vec![input.clone(), grad_out.clone()],
            move |p, _, up| {
                let gx = if p[0].requires_grad() {
                    Some(Tensor::conv2d_input_grad(&p[1], up, &geo)?)
                } else {
                    None
                };
                let gg = if p[1].requires_grad() {
                    Some(p[0].conv2d(up, geo.stride, geo.pad)?)
                } else {
                    None
                };
                Ok(vec![gx, gg])
            },
        ))
    }
}


// The kernels below are compiled twice: for the baseline target and with AVX2
// enabled, picked at run time. Neither build contracts mul+add into FMA, so
// both produce identical results.

macro_rules! dispatch {
    ($name:ident, $avx:ident, $imp:ident, ($($arg:ident: $ty:ty),*) -> $ret:ty) => {
        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2")]
        fn $avx<E: Element>($($arg: $ty),*) -> $ret {
            $imp($($arg),*)
        }

        fn $name<E: Element>($($arg: $ty),*) -> $ret {
            #[cfg(target_arch = "x86_64")]
            if std::is_x86_feature_detected!("avx2") {
                // SAFETY: the CPU supports AVX2.
                return unsafe { $avx($($arg),*) };
            }
            $imp($($arg),*)
        }
    };
}

dispatch!(taps_axpy, taps_axpy_avx2, taps_axpy_impl, (acc: &mut [E], w: &[E], offs: &[usize], x: &[E]) -> ());
dispatch!(axpy, axpy_avx2, axpy_impl, (y: &mut [E], a: E, x: &[E]) -> ());
dispatch!(dot, dot_avx2, dot_impl, (a: &[E], b: &[E]) -> E);

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn direct_kernels_match_gemm() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cases = [
            (3usize, 1usize, 1usize, 6usize, 5usize),
            (7, 1, 3, 8, 8),
            (1, 1, 0, 4, 3),
            (3, 1, 0, 5, 7),
            (5, 1, 4, 3, 3),
            (4, 2, 1, 8, 6),
            (4, 2, 1, 7, 9),
            (2, 2, 0, 4, 4),
            (3, 2, 1, 5, 5),
            (3, 3, 2, 10, 7),
        ];
        for &(k, st, p, h, w) in &cases {
            let geo = Conv2dGeometry::new(&[5, 3, h, w], &[4, 3, k, k], st, p).unwrap();
            let mut r = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
            let x = r(5 * 3 * h * w);
            let wt = r(4 * 3 * k * k);
            let g = r(5 * 4 * geo.out_h * geo.out_w);
            let close = |a: Vec<f64>, b: Vec<f64>| a.iter().zip(&b).all(|(u, v)| (u - v).abs() < 1e-12);
            assert!(close(geo.direct_forward(&x, &wt), geo.gemm_forward(&x, &wt)));
            assert!(close(geo.direct_input_grad(&g, &wt), geo.gemm_input_grad(&g, &wt)));
            assert!(close(geo.direct_weight_grad(&x, &g), geo.gemm_weight_grad(&x, &g)));
        }
    }
}
