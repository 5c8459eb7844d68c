use super::{numel, Element, Tensor};
use crate::error::{Error, Result};

/// Right-aligned broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::dim(format!("cannot broadcast {a:?} with {b:?}")));
            }
        };
    }
    Ok(out)
}

/// Strides of `small` (left-padded to `big`'s rank) with zeros on broadcast axes.
fn broadcast_strides(small: &[usize], big: &[usize]) -> Result<Vec<usize>> {
    let r = big.len();
    if small.len() > r {
        return Err(Error::dim(format!("cannot broadcast {small:?} to {big:?}")));
    }
    let off = r - small.len();
    let mut strides = vec![0; r];
    let mut acc = 1;
    for i in (0..r).rev() {
        let d = if i >= off { small[i - off] } else { 1 };
        if d == big[i] {
            strides[i] = if d == 1 { 0 } else { acc };
        } else if d == 1 {
            strides[i] = 0;
        } else {
            return Err(Error::dim(format!("cannot broadcast {small:?} to {big:?}")));
        }
        acc *= d;
    }
    Ok(strides)
}

/// Visits `big` in row-major order in runs of its last axis, reporting the
/// offset into the broadcast operand for each run.
fn walk_runs(big: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let r = big.len();
    if r == 0 {
        f(0, 0);
        return;
    }
    let inner = big[r - 1];
    if inner == 0 || numel(big) == 0 {
        return;
    }
    let outer = numel(big) / inner;
    let mut idx = vec![0usize; r - 1];
    let mut base = 0usize;
    for run in 0..outer {
        f(run * inner, base);
        for d in (0..r - 1).rev() {
            idx[d] += 1;
            base += strides[d];
            if idx[d] < big[d] {
                break;
            }
            base -= strides[d] * big[d];
            idx[d] = 0;
        }
    }
}

fn broadcast_data<E: Element>(src: &[E], src_shape: &[usize], dst_shape: &[usize]) -> Result<Vec<E>> {
    let strides = broadcast_strides(src_shape, dst_shape)?;
    let total = numel(dst_shape);
    let mut out = vec![E::zero(); total];
    if dst_shape.is_empty() {
        out[0] = src[0];
        return Ok(out);
    }
    let inner = dst_shape[dst_shape.len() - 1];
    let inner_stride = strides[strides.len() - 1];
    walk_runs(dst_shape, &strides, |o, s| {
        let dst = &mut out[o..o + inner];
        if inner_stride == 0 {
            dst.fill(src[s]);
        } else {
            dst.copy_from_slice(&src[s..s + inner]);
        }
    });
    Ok(out)
}

fn reduce_data<E: Element>(src: &[E], src_shape: &[usize], dst_shape: &[usize]) -> Result<Vec<E>> {
    let strides = broadcast_strides(dst_shape, src_shape)?;
    let mut out = vec![E::zero(); numel(dst_shape)];
    if src_shape.is_empty() {
        out[0] = src[0];
        return Ok(out);
    }
    let inner = src_shape[src_shape.len() - 1];
    let inner_stride = strides[strides.len() - 1];
    walk_runs(src_shape, &strides, |o, d| {
        let chunk = &src[o..o + inner];
        if inner_stride == 0 {
            let mut acc = out[d];
            for &v in chunk {
                acc = acc + v;
            }
            out[d] = acc;
        } else {
            for (dst, &v) in out[d..d + inner].iter_mut().zip(chunk) {
                *dst = *dst + v;
            }
        }
    });
    Ok(out)
}

fn map<E: Element>(x: &Tensor<E>, f: impl Fn(E) -> E) -> Vec<E> {
    x.data().iter().map(|&v| f(v)).collect()
}

fn zip_map<E: Element>(a: &Tensor<E>, b: &Tensor<E>, f: impl Fn(E, E) -> E) -> Vec<E> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn c<E: Element>(v: f64) -> E {
    E::from_f64_lossy(v)
}

impl<E: Element> Tensor<E> {
    // ----- broadcasting -------------------------------------------------

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor<E>> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let data = broadcast_data(self.data(), self.shape(), shape)?;
        let src = self.shape().to_vec();
        Ok(Tensor::from_op("broadcast_to", data, shape.to_vec(), vec![self.clone()], move |_, _, g| {
            Ok(vec![Some(g.sum_to(&src)?)])
        }))
    }

    /// Sums over broadcast axes so the result has `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor<E>> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let data = reduce_data(self.data(), self.shape(), shape)?;
        let src = self.shape().to_vec();
        Ok(Tensor::from_op("sum_to", data, shape.to_vec(), vec![self.clone()], move |_, _, g| {
            Ok(vec![Some(g.broadcast_to(&src)?)])
        }))
    }

    fn broadcast_pair(&self, other: &Tensor<E>) -> Result<(Tensor<E>, Tensor<E>)> {
        if self.shape() == other.shape() {
            return Ok((self.clone(), other.clone()));
        }
        let shape = broadcast_shape(self.shape(), other.shape())?;
        Ok((self.broadcast_to(&shape)?, other.broadcast_to(&shape)?))
    }

    // ----- binary elementwise ------------------------------------------

    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let (a, b) = self.broadcast_pair(other)?;
        let data = zip_map(&a, &b, |x, y| x + y);
        let shape = a.shape().to_vec();
        Ok(Tensor::from_op("add", data, shape, vec![a, b], |_, _, g| {
            Ok(vec![Some(g.clone()), Some(g.clone())])
        }))
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let (a, b) = self.broadcast_pair(other)?;
        let data = zip_map(&a, &b, |x, y| x - y);
        let shape = a.shape().to_vec();
        Ok(Tensor::from_op("sub", data, shape, vec![a, b], |_, _, g| {
            Ok(vec![Some(g.clone()), Some(g.neg()?)])
        }))
    }

    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let (a, b) = self.broadcast_pair(other)?;
        let data = zip_map(&a, &b, |x, y| x * y);
        let shape = a.shape().to_vec();
        Ok(Tensor::from_op("mul", data, shape, vec![a, b], |p, _, g| {
            let ga = p[0].requires_grad().then(|| g.mul(&p[1])).transpose()?;
            let gb = p[1].requires_grad().then(|| g.mul(&p[0])).transpose()?;
            Ok(vec![ga, gb])
        }))
    }

    pub fn div(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let (a, b) = self.broadcast_pair(other)?;
        let data = zip_map(&a, &b, |x, y| x / y);
        let shape = a.shape().to_vec();
        Ok(Tensor::from_op("div", data, shape, vec![a, b], |p, out, g| {
            let ga = p[0].requires_grad().then(|| g.div(&p[1])).transpose()?;
            let gb = if p[1].requires_grad() {
                Some(g.mul(out)?.div(&p[1])?.neg()?)
            } else {
                None
            };
            Ok(vec![ga, gb])
        }))
    }

    // ----- unary --------------------------------------------------------

    pub fn neg(&self) -> Result<Tensor<E>> {
        self.scale(-1.0)
    }

    pub fn scale(&self, k: f64) -> Result<Tensor<E>> {
        let kk: E = c(k);
        let data = map(self, |v| v * kk);
        Ok(Tensor::from_op("scale", data, self.shape().to_vec(), vec![self.clone()], move |_, _, g| {
            Ok(vec![Some(g.scale(k)?)])
        }))
    }

    pub fn add_scalar(&self, k: f64) -> Result<Tensor<E>> {
        let kk: E = c(k);
        let data = map(self, |v| v + kk);
        Ok(Tensor::from_op("add_scalar", data, self.shape().to_vec(), vec![self.clone()], |_, _, g| {
            Ok(vec![Some(g.clone())])
        }))
    }

    pub fn square(&self) -> Result<Tensor<E>> {
        let data = map(self, |v| v * v);
        Ok(Tensor::from_op("square", data, self.shape().to_vec(), vec![self.clone()], |p, _, g| {
            Ok(vec![Some(g.mul(&p[0])?.scale(2.0)?)])
        }))
    }

    pub fn sqrt(&self) -> Result<Tensor<E>> {
        let data = map(self, |v| v.sqrt());
        Ok(Tensor::from_op("sqrt", data, self.shape().to_vec(), vec![self.clone()], |_, out, g| {
            Ok(vec![Some(g.div(&out.scale(2.0)?)?)])
        }))
    }

    pub fn sigmoid(&self) -> Result<Tensor<E>> {
        let data = map(self, |v| E::one() / (E::one() + (-v).exp()));
        Ok(Tensor::from_op("sigmoid", data, self.shape().to_vec(), vec![self.clone()], |_, out, g| {
            let slope = out.mul(&out.neg()?.add_scalar(1.0)?)?;
            Ok(vec![Some(g.mul(&slope)?)])
        }))
    }

    pub fn tanh(&self) -> Result<Tensor<E>> {
        let data = map(self, |v| v.tanh());
        Ok(Tensor::from_op("tanh", data, self.shape().to_vec(), vec![self.clone()], |_, out, g| {
            let slope = out.square()?.neg()?.add_scalar(1.0)?;
            Ok(vec![Some(g.mul(&slope)?)])
        }))
    }

    pub fn relu(&self) -> Result<Tensor<E>> {
        self.leaky_relu(0.0)
    }

    /// `max(x, slope·x)`; the backward multiplies by a constant 0/1-style mask,
    /// so second derivatives vanish almost everywhere.
    pub fn leaky_relu(&self, slope: f64) -> Result<Tensor<E>> {
        let s: E = c(slope);
        let data = map(self, |v| if v > E::zero() { v } else { v * s });
        Ok(Tensor::from_op("leaky_relu", data, self.shape().to_vec(), vec![self.clone()], move |p, _, g| {
            let mask = map(&p[0], |v| if v > E::zero() { E::one() } else { s });
            let mask = Tensor::from_vec(mask, p[0].shape())?;
            Ok(vec![Some(g.mul(&mask)?)])
        }))
    }

    // ----- reductions ---------------------------------------------------

    pub fn sum_all(&self) -> Result<Tensor<E>> {
        self.sum_to(&[])
    }

    pub fn mean_all(&self) -> Result<Tensor<E>> {
        let n = self.numel().max(1) as f64;
        self.sum_all()?.scale(1.0 / n)
    }

    /// Sum over every axis except the leading (batch) one; shape `[N]`.
    pub fn sum_per_sample(&self) -> Result<Tensor<E>> {
        let n = self.dim(0);
        let mut keep = vec![1; self.rank()];
        keep[0] = n;
        self.sum_to(&keep)?.reshape(&[n])
    }

    // ----- shape --------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>> {
        if numel(shape) != self.numel() {
            return Err(Error::dim(format!("cannot reshape {:?} to {:?}", self.shape(), shape)));
        }
        if shape == self.shape() {
            return Ok(self.clone());
        }
        let src = self.shape().to_vec();
        Ok(Tensor::from_op("reshape", self.to_vec(), shape.to_vec(), vec![self.clone()], move |_, _, g| {
            Ok(vec![Some(g.reshape(&src)?)])
        }))
    }

    pub fn transpose2d(&self) -> Result<Tensor<E>> {
        if self.rank() != 2 {
            return Err(Error::dim(format!("transpose2d on shape {:?}", self.shape())));
        }
        let (r, cc) = (self.dim(0), self.dim(1));
        let src = self.data();
        let mut data = vec![E::zero(); r * cc];
        for i in 0..r {
            for j in 0..cc {
                data[j * r + i] = src[i * cc + j];
            }
        }
        Ok(Tensor::from_op("transpose2d", data, vec![cc, r], vec![self.clone()], |_, _, g| {
            Ok(vec![Some(g.transpose2d()?)])
        }))
    }

    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        if self.rank() != 2 || other.rank() != 2 || self.dim(1) != other.dim(0) {
            return Err(Error::dim(format!(
                "matmul {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let (m, k, n) = (self.dim(0), self.dim(1), other.dim(1));
        let mut data = vec![E::zero(); m * n];
        E::gemm(
            m,
            k,
            n,
            E::one(),
            self.data(),
            k as isize,
            1,
            other.data(),
            n as isize,
            1,
            E::zero(),
            &mut data,
            n as isize,
            1,
        );
        Ok(Tensor::from_op("matmul", data, vec![m, n], vec![self.clone(), other.clone()], |p, _, g| {
            let ga = if p[0].requires_grad() {
                Some(g.matmul(&p[1].transpose2d()?)?)
            } else {
                None
            };
            let gb = if p[1].requires_grad() {
                Some(p[0].transpose2d()?.matmul(g)?)
            } else {
                None
            };
            Ok(vec![ga, gb])
        }))
    }

    fn axis_split(&self, axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= self.rank() {
            return Err(Error::dim(format!("axis {axis} out of range for {:?}", self.shape())));
        }
        let outer = numel(&self.shape()[..axis]);
        let inner = numel(&self.shape()[axis + 1..]);
        Ok((outer, self.dim(axis), inner))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor<E>], axis: usize) -> Result<Tensor<E>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::arg("concat of zero tensors"))?;
        if parts.len() == 1 {
            return Ok(first.clone());
        }
        let mut shape = first.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("concat axis {axis} for {shape:?}")));
        }
        let mut total = 0;
        for p in parts {
            let ok = p.rank() == shape.len()
                && p.shape()
                    .iter()
                    .enumerate()
                    .all(|(i, &d)| i == axis || d == shape[i]);
            if !ok {
                return Err(Error::dim(format!(
                    "concat along {axis}: {:?} vs {:?}",
                    first.shape(),
                    p.shape()
                )));
            }
            total += p.dim(axis);
        }
        shape[axis] = total;
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let run = p.dim(axis) * inner;
                data.extend_from_slice(&p.data()[o * run..(o + 1) * run]);
            }
        }
        let sizes: Vec<usize> = parts.iter().map(|p| p.dim(axis)).collect();
        Ok(Tensor::from_op("concat", data, shape, parts.to_vec(), move |p, _, g| {
            let mut start = 0;
            let mut out = Vec::with_capacity(sizes.len());
            for (part, &len) in p.iter().zip(&sizes) {
                out.push(if part.requires_grad() {
                    Some(g.narrow(axis, start, len)?)
                } else {
                    None
                });
                start += len;
            }
            Ok(out)
        }))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<E>> {
        let (outer, d, inner) = self.axis_split(axis)?;
        if start + len > d {
            return Err(Error::dim(format!(
                "narrow {start}..{} of axis {axis} with extent {d}",
                start + len
            )));
        }
        if start == 0 && len == d {
            return Ok(self.clone());
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * d * inner + start * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op("narrow", data, shape, vec![self.clone()], move |_, _, g| {
            Ok(vec![Some(g.embed_axis(axis, start, d)?)])
        }))
    }

    /// Adjoint of [`narrow`](Self::narrow): zero tensor of extent `full` on
    /// `axis` with `self` written at `start`.
    pub fn embed_axis(&self, axis: usize, start: usize, full: usize) -> Result<Tensor<E>> {
        let (outer, len, inner) = self.axis_split(axis)?;
        if start + len > full {
            return Err(Error::dim(format!("embed {len} at {start} into {full}")));
        }
        let mut data = vec![E::zero(); outer * full * inner];
        for o in 0..outer {
            let dst = o * full * inner + start * inner;
            data[dst..dst + len * inner].copy_from_slice(&self.data()[o * len * inner..(o + 1) * len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = full;
        Ok(Tensor::from_op("embed_axis", data, shape, vec![self.clone()], move |_, _, g| {
            Ok(vec![Some(g.narrow(axis, start, len)?)])
        }))
    }

    fn nchw(&self, what: &str) -> Result<(usize, usize, usize, usize)> {
        match *self.shape() {
            [n, ch, h, w] => Ok((n, ch, h, w)),
            _ => Err(Error::dim(format!("{what} expects NCHW, got {:?}", self.shape()))),
        }
    }

    /// Nearest-neighbour ×2 upsampling of an NCHW tensor.
    pub fn upsample2(&self) -> Result<Tensor<E>> {
        let (n, ch, h, w) = self.nchw("upsample2")?;
        let (h2, w2) = (2 * h, 2 * w);
        let src = self.data();
        let mut data = vec![E::zero(); n * ch * h2 * w2];
        for plane in 0..n * ch {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut data[plane * h2 * w2..(plane + 1) * h2 * w2];
            for i in 0..h {
                let row = &s[i * w..(i + 1) * w];
                let (top, bottom) = d[2 * i * w2..(2 * i + 2) * w2].split_at_mut(w2);
                for (j, &v) in row.iter().enumerate() {
                    top[2 * j] = v;
                    top[2 * j + 1] = v;
                }
                bottom.copy_from_slice(top);
            }
        }
        Ok(Tensor::from_op("upsample2", data, vec![n, ch, h2, w2], vec![self.clone()], |_, _, g| {
            Ok(vec![Some(g.sum_pool2()?)])
        }))
    }

    /// Sum over non-overlapping 2×2 windows (adjoint of `upsample2`).
    pub fn sum_pool2(&self) -> Result<Tensor<E>> {
        let (n, ch, h, w) = self.nchw("sum_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(format!("sum_pool2 needs even extents, got {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let src = self.data();
        let mut data = vec![E::zero(); n * ch * ho * wo];
        for plane in 0..n * ch {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut data[plane * ho * wo..(plane + 1) * ho * wo];
            for i in 0..ho {
                for j in 0..wo {
                    let a = s[2 * i * w + 2 * j];
                    let b = s[2 * i * w + 2 * j + 1];
                    let cc = s[(2 * i + 1) * w + 2 * j];
                    let dd = s[(2 * i + 1) * w + 2 * j + 1];
                    d[i * wo + j] = (a + b) + (cc + dd);
                }
            }
        }
        Ok(Tensor::from_op("sum_pool2", data, vec![n, ch, ho, wo], vec![self.clone()], |_, _, g| {
            Ok(vec![Some(g.upsample2()?)])
        }))
    }

    /// Appends `ph` wrapped rows and `pw` wrapped columns (periodic extension
    /// on the bottom/right edges).
    pub fn circular_pad(&self, ph: usize, pw: usize) -> Result<Tensor<E>> {
        if ph == 0 && pw == 0 {
            return Ok(self.clone());
        }
        let (n, ch, h, w) = self.nchw("circular_pad")?;
        let (hp, wp) = (h + ph, w + pw);
        let src = self.data();
        let mut data = vec![E::zero(); n * ch * hp * wp];
        for plane in 0..n * ch {
            for i in 0..hp {
                for j in 0..wp {
                    data[plane * hp * wp + i * wp + j] = src[plane * h * w + (i % h) * w + (j % w)];
                }
            }
        }
        Ok(Tensor::from_op("circular_pad", data, vec![n, ch, hp, wp], vec![self.clone()], move |_, _, g| {
            Ok(vec![Some(g.circular_fold(h, w)?)])
        }))
    }

    /// Adjoint of [`circular_pad`](Self::circular_pad): folds a periodically
    /// extended tensor back onto an `h`×`w` grid by summation.
    pub fn circular_fold(&self, h: usize, w: usize) -> Result<Tensor<E>> {
        let (n, ch, hp, wp) = self.nchw("circular_fold")?;
        if hp < h || wp < w || h == 0 || w == 0 {
            return Err(Error::dim(format!("fold {hp}x{wp} onto {h}x{w}")));
        }
        let src = self.data();
        let mut data = vec![E::zero(); n * ch * h * w];
        for plane in 0..n * ch {
            for i in 0..hp {
                for j in 0..wp {
                    let dst = plane * h * w + (i % h) * w + (j % w);
                    data[dst] = data[dst] + src[plane * hp * wp + i * wp + j];
                }
            }
        }
        let (ph, pw) = (hp - h, wp - w);
        Ok(Tensor::from_op("circular_fold", data, vec![n, ch, h, w], vec![self.clone()], move |_, _, g| {
            Ok(vec![Some(g.circular_pad(ph, pw)?)])
        }))
    }

    /// Per-sample, per-channel normalisation over the spatial axes (no affine).
    pub fn instance_norm(&self, eps: f64) -> Result<Tensor<E>> {
        let (n, ch, h, w) = self.nchw("instance_norm")?;
        let inv = 1.0 / (h * w) as f64;
        let stat_shape = [n, ch, 1, 1];
        let mean = self.sum_to(&stat_shape)?.scale(inv)?;
        let centered = self.sub(&mean)?;
        let var = centered.square()?.sum_to(&stat_shape)?.scale(inv)?;
        let denom = var.add_scalar(eps)?.sqrt()?;
        centered.div(&denom)
    }
}
