//! Forward implementations of every tensor operation, plus the raw-slice
//! kernels the backward pass shares.

use super::{gemm_slices, Element, Op, Shape, Tensor};
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// raw kernels
// ---------------------------------------------------------------------------

/// Elementwise combine with NumPy broadcasting; `out_dims` must be the
/// broadcast of `adims` and `bdims`.
pub(crate) fn broadcast_zip<E: Element>(
    a: &[E],
    adims: &[usize],
    b: &[E],
    bdims: &[usize],
    out_dims: &[usize],
    f: impl Fn(E, E) -> E,
) -> Vec<E> {
    let numel: usize = out_dims.iter().product();
    if adims == out_dims && bdims == out_dims {
        return a.iter().zip(b.iter()).map(|(x, y)| f(*x, *y)).collect();
    }
    let rank = out_dims.len();
    if rank == 0 {
        return vec![f(a[0], b[0])];
    }
    let pa = Shape::new(adims.to_vec()).padded_to(rank);
    let pb = Shape::new(bdims.to_vec()).padded_to(rank);
    let bcast_strides = |p: &[usize]| -> Vec<usize> {
        let mut s = vec![0usize; rank];
        let mut acc = 1usize;
        for i in (0..rank).rev() {
            if p[i] != 1 {
                s[i] = acc;
            }
            acc *= p[i];
        }
        s
    };
    let sa = bcast_strides(&pa);
    let sb = bcast_strides(&pb);
    let inner = out_dims[rank - 1];
    let sa_in = sa[rank - 1];
    let sb_in = sb[rank - 1];
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank - 1];
    let mut ia = 0usize;
    let mut ib = 0usize;
    let rows = numel / inner.max(1);
    for _ in 0..rows {
        // last-dim strides are 0 or 1; specialized loops vectorize
        match (sa_in, sb_in) {
            (1, 1) => {
                let ar = &a[ia..ia + inner];
                let br = &b[ib..ib + inner];
                out.extend(ar.iter().zip(br).map(|(x, y)| f(*x, *y)));
            }
            (1, 0) => {
                let bv = b[ib];
                out.extend(a[ia..ia + inner].iter().map(|x| f(*x, bv)));
            }
            (0, 1) => {
                let av = a[ia];
                out.extend(b[ib..ib + inner].iter().map(|y| f(av, *y)));
            }
            _ => {
                let v = f(a[ia], b[ib]);
                out.extend(std::iter::repeat(v).take(inner));
            }
        }
        // odometer over leading dims
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out_dims[d] {
                break;
            }
            ia -= sa[d] * out_dims[d];
            ib -= sb[d] * out_dims[d];
            idx[d] = 0;
        }
    }
    out
}

/// `a` already has the full output shape; `b` broadcasts onto it.
pub(crate) fn zip_broadcast_raw<E: Element>(
    a: &[E],
    out_dims: &[usize],
    b: &[E],
    bdims: &[usize],
    f: impl Fn(E, E) -> E,
) -> Vec<E> {
    broadcast_zip(a, out_dims, b, bdims, out_dims, f)
}

/// Sums `g` (of shape `from`) down to `to`, undoing a broadcast.
pub(crate) fn reduce_to_shape<E: Element>(g: &[E], from: &[usize], to: &Shape) -> Vec<E> {
    if from == to.dims() {
        return g.to_vec();
    }
    let rank = from.len();
    let pt = to.padded_to(rank);
    let mut tstrides = vec![0usize; rank];
    let mut acc = 1usize;
    for i in (0..rank).rev() {
        if pt[i] != 1 {
            tstrides[i] = acc;
        }
        acc *= pt[i];
    }
    let mut out = vec![E::zero(); to.numel()];
    if rank == 0 {
        out[0] = g[0];
        return out;
    }
    let inner = from[rank - 1];
    let t_in = tstrides[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let mut it = 0usize;
    let rows = g.len() / inner.max(1);
    let mut ig = 0usize;
    for _ in 0..rows {
        if t_in == 0 {
            let mut acc = E::zero();
            for v in &g[ig..ig + inner] {
                acc += *v;
            }
            out[it] += acc;
        } else {
            for (o, v) in out[it..it + inner].iter_mut().zip(&g[ig..ig + inner]) {
                *o += *v;
            }
        }
        ig += inner;
        for d in (0..rank.saturating_sub(1)).rev() {
            idx[d] += 1;
            it += tstrides[d];
            if idx[d] < from[d] {
                break;
            }
            it -= tstrides[d] * from[d];
            idx[d] = 0;
        }
    }
    out
}

/// Splits `dims` around `axis` into (outer, len, inner) extents.
fn axis_split(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = dims[..axis].iter().product();
    let len = dims[axis];
    let inner: usize = dims[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Broadcasts a reduced-over-`axis` gradient back over the full shape,
/// scaling each copy (1 for sum, 1/len for mean). Works for both keepdim
/// layouts since only element counts matter.
pub(crate) fn tile_along_axis<E: Element>(
    g: &[E],
    target_dims: &[usize],
    axis: usize,
    scale: E,
) -> Vec<E> {
    let (outer, len, inner) = axis_split(target_dims, axis);
    debug_assert_eq!(g.len(), outer * inner);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let row = &g[o * inner..(o + 1) * inner];
        for _ in 0..len {
            out.extend(row.iter().map(|v| *v * scale));
        }
    }
    out
}

pub(crate) fn transpose_raw<E: Element>(data: &[E], dims: &[usize], a: usize, b: usize) -> Vec<E> {
    let mut out_dims = dims.to_vec();
    out_dims.swap(a, b);
    let in_strides = Shape::new(dims.to_vec()).strides();
    let mut src_strides = in_strides.clone();
    src_strides.swap(a, b);
    // walk the output linearly, reading the input through swapped strides
    let rank = dims.len();
    let numel: usize = dims.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..numel {
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_dims[d] {
                break;
            }
            src -= src_strides[d] * out_dims[d];
            idx[d] = 0;
        }
    }
    out
}

pub(crate) fn slice_raw<E: Element>(
    data: &[E],
    dims: &[usize],
    axis: usize,
    start: usize,
    len: usize,
) -> Vec<E> {
    let (outer, full, inner) = axis_split(dims, axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        out.extend_from_slice(&data[base..base + len * inner]);
    }
    out
}

pub(crate) fn unslice_raw<E: Element>(
    g: &[E],
    gdims: &[usize],
    xdims: &[usize],
    axis: usize,
    start: usize,
) -> Vec<E> {
    let (outer, full, inner) = axis_split(xdims, axis);
    let len = gdims[axis];
    let mut out = vec![E::zero(); outer * full * inner];
    for o in 0..outer {
        let src = o * len * inner;
        let dst = (o * full + start) * inner;
        out[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
    }
    out
}

pub(crate) fn softmax_backward<E: Element>(
    y: &[E],
    g: &[E],
    dims: &[usize],
    axis: usize,
) -> Vec<E> {
    let (outer, len, inner) = axis_split(dims, axis);
    let mut out = vec![E::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = E::zero();
            for l in 0..len {
                let p = base + l * inner;
                dot += g[p] * y[p];
            }
            for l in 0..len {
                let p = base + l * inner;
                out[p] = y[p] * (g[p] - dot);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layernorm_backward<E: Element>(
    x: &Tensor<E>,
    gain: &Tensor<E>,
    bias: &Tensor<E>,
    xhat: &[E],
    inv_std: &[E],
    g: &[E],
    emit: &mut dyn FnMut(&Tensor<E>, Vec<E>),
) {
    let d = *x.dims().last().unwrap();
    let rows = x.numel() / d;
    let gain_d = gain.data();

    if gain.requires_grad() {
        let mut dgain = vec![E::zero(); d];
        for r in 0..rows {
            for j in 0..d {
                dgain[j] += g[r * d + j] * xhat[r * d + j];
            }
        }
        emit(gain, dgain);
    }
    if bias.requires_grad() {
        let mut dbias = vec![E::zero(); d];
        for r in 0..rows {
            for j in 0..d {
                dbias[j] += g[r * d + j];
            }
        }
        emit(bias, dbias);
    }
    if x.requires_grad() {
        let inv_d = E::one() / E::from_f64(d as f64);
        let mut dx = vec![E::zero(); x.numel()];
        for r in 0..rows {
            let row = r * d;
            let mut m1 = E::zero();
            let mut m2 = E::zero();
            for j in 0..d {
                let dxhat = g[row + j] * gain_d[j];
                m1 += dxhat;
                m2 += dxhat * xhat[row + j];
            }
            m1 *= inv_d;
            m2 *= inv_d;
            for j in 0..d {
                let dxhat = g[row + j] * gain_d[j];
                dx[row + j] = inv_std[r] * (dxhat - m1 - xhat[row + j] * m2);
            }
        }
        emit(x, dx);
    }
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims> {
    let err = || Error::DimMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    match (a.len(), b.len()) {
        (2, 2) => {
            if a[1] != b[0] {
                return Err(err());
            }
            Ok(MatmulDims {
                batch: 1,
                m: a[0],
                k: a[1],
                n: b[1],
                a_batched: false,
                b_batched: false,
            })
        }
        (3, 3) => {
            if a[0] != b[0] || a[2] != b[1] {
                return Err(err());
            }
            Ok(MatmulDims {
                batch: a[0],
                m: a[1],
                k: a[2],
                n: b[2],
                a_batched: true,
                b_batched: true,
            })
        }
        (3, 2) => {
            if a[2] != b[0] {
                return Err(err());
            }
            Ok(MatmulDims {
                batch: a[0],
                m: a[1],
                k: a[2],
                n: b[1],
                a_batched: true,
                b_batched: false,
            })
        }
        (2, 3) => {
            if a[1] != b[1] {
                return Err(err());
            }
            Ok(MatmulDims {
                batch: b[0],
                m: a[0],
                k: a[1],
                n: b[2],
                a_batched: false,
                b_batched: true,
            })
        }
        _ => Err(err()),
    }
}

pub(crate) fn matmul_backward<E: Element>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    _out_dims: &[usize],
    g: &[E],
    emit: &mut dyn FnMut(&Tensor<E>, Vec<E>),
) {
    let d = matmul_dims(a.dims(), b.dims()).expect("recorded matmul has valid dims");
    let (m, k, n) = (d.m, d.k, d.n);
    let ad = a.data();
    let bd = b.data();
    if a.requires_grad() {
        let mut da = vec![E::zero(); a.numel()];
        for bi in 0..d.batch {
            let goff = bi * m * n;
            let boff = if d.b_batched { bi * k * n } else { 0 };
            let aoff = if d.a_batched { bi * m * k } else { 0 };
            // dA = g . B^T
            gemm_slices(
                m,
                n,
                k,
                &g[goff..goff + m * n],
                false,
                &bd[boff..boff + k * n],
                true,
                E::one(),
                &mut da[aoff..aoff + m * k],
            );
        }
        emit(a, da);
    }
    if b.requires_grad() {
        let mut db = vec![E::zero(); b.numel()];
        for bi in 0..d.batch {
            let goff = bi * m * n;
            let aoff = if d.a_batched { bi * m * k } else { 0 };
            let boff = if d.b_batched { bi * k * n } else { 0 };
            // dB = A^T . g
            gemm_slices(
                k,
                m,
                n,
                &ad[aoff..aoff + m * k],
                true,
                &g[goff..goff + m * n],
                false,
                E::one(),
                &mut db[boff..boff + k * n],
            );
        }
        emit(b, db);
    }
}

// ---------------------------------------------------------------------------
// tensor methods
// ---------------------------------------------------------------------------

impl<E: Element> Tensor<E> {
    fn binary(
        &self,
        other: &Tensor<E>,
        opname: &'static str,
        f: impl Fn(E, E) -> E,
        op: impl FnOnce(Tensor<E>, Tensor<E>) -> Op<E>,
    ) -> Result<Tensor<E>> {
        let out_shape =
            Shape::broadcast(self.shape(), other.shape()).ok_or_else(|| Error::DimMismatch {
                op: opname,
                lhs: self.dims().to_vec(),
                rhs: other.dims().to_vec(),
            })?;
        let data = broadcast_zip(
            &self.data(),
            self.dims(),
            &other.data(),
            other.dims(),
            out_shape.dims(),
            f,
        );
        Ok(Tensor::from_op(
            data,
            out_shape,
            op(self.clone(), other.clone()),
        ))
    }

    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn div(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, "div", |a, b| a / b, Op::Div)
    }

    pub fn add_scalar(&self, v: f64) -> Tensor<E> {
        let s = E::from_f64(v);
        let data = self.data().iter().map(|x| *x + s).collect();
        Tensor::from_op(data, self.shape().clone(), Op::AddScalar(self.clone()))
    }

    pub fn mul_scalar(&self, v: f64) -> Tensor<E> {
        let s = E::from_f64(v);
        let data = self.data().iter().map(|x| *x * s).collect();
        Tensor::from_op(data, self.shape().clone(), Op::MulScalar(self.clone(), s))
    }

    pub fn neg(&self) -> Tensor<E> {
        let data = self.data().iter().map(|x| -*x).collect();
        Tensor::from_op(data, self.shape().clone(), Op::Neg(self.clone()))
    }

    pub fn exp(&self) -> Tensor<E> {
        let data = self.data().iter().map(|x| x.exp()).collect();
        Tensor::from_op(data, self.shape().clone(), Op::Exp(self.clone()))
    }

    pub fn relu(&self) -> Tensor<E> {
        let data = self
            .data()
            .iter()
            .map(|x| if *x > E::zero() { *x } else { E::zero() })
            .collect();
        Tensor::from_op(data, self.shape().clone(), Op::Relu(self.clone()))
    }

    pub fn sigmoid(&self) -> Tensor<E> {
        let one = E::one();
        let data = self
            .data()
            .iter()
            .map(|x| one / (one + (-*x).exp()))
            .collect();
        Tensor::from_op(data, self.shape().clone(), Op::Sigmoid(self.clone()))
    }

    pub fn tanh(&self) -> Tensor<E> {
        let data = self.data().iter().map(|x| x.tanh()).collect();
        Tensor::from_op(data, self.shape().clone(), Op::Tanh(self.clone()))
    }

    /// Matrix product, optionally batched over a leading dimension that
    /// either side may omit (it is then broadcast).
    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let d = matmul_dims(self.dims(), other.dims())?;
        let (m, k, n) = (d.m, d.k, d.n);
        let mut out = vec![E::zero(); d.batch * m * n];
        {
            let ad = self.data();
            let bd = other.data();
            for bi in 0..d.batch {
                let aoff = if d.a_batched { bi * m * k } else { 0 };
                let boff = if d.b_batched { bi * k * n } else { 0 };
                gemm_slices(
                    m,
                    k,
                    n,
                    &ad[aoff..aoff + m * k],
                    false,
                    &bd[boff..boff + k * n],
                    false,
                    E::zero(),
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let out_shape = if d.a_batched || d.b_batched {
            Shape::new(vec![d.batch, m, n])
        } else {
            Shape::new(vec![m, n])
        };
        Ok(Tensor::from_op(
            out,
            out_shape,
            Op::Matmul {
                a: self.clone(),
                b: other.clone(),
            },
        ))
    }

    /// Softmax along `axis`, computed with per-fiber max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<E>> {
        if axis >= self.rank() {
            return Err(Error::Axis {
                op: "softmax",
                axis,
                rank: self.rank(),
            });
        }
        let dims = self.dims();
        let (outer, len, inner) = axis_split(dims, axis);
        let x = self.data();
        let mut out = vec![E::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = x[base];
                for l in 1..len {
                    let v = x[base + l * inner];
                    if v > mx {
                        mx = v;
                    }
                }
                let mut sum = E::zero();
                for l in 0..len {
                    let p = base + l * inner;
                    let e = (x[p] - mx).exp();
                    out[p] = e;
                    sum += e;
                }
                let inv = E::one() / sum;
                for l in 0..len {
                    out[base + l * inner] *= inv;
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().clone(),
            Op::Softmax {
                x: self.clone(),
                axis,
            },
        ))
    }

    /// Layer normalization over the last axis, followed by the affine
    /// transform `gain * xhat + bias`.
    pub fn layernorm(&self, gain: &Tensor<E>, bias: &Tensor<E>, eps: f64) -> Result<Tensor<E>> {
        let d = *self.dims().last().ok_or(Error::Invalid {
            op: "layernorm",
            msg: "scalar input".into(),
        })?;
        if gain.dims() != [d] || bias.dims() != [d] {
            return Err(Error::DimMismatch {
                op: "layernorm",
                lhs: vec![d],
                rhs: gain.dims().to_vec(),
            });
        }
        let rows = self.numel() / d;
        let x = self.data();
        let gd = gain.data();
        let bd = bias.data();
        let inv_d = E::one() / E::from_f64(d as f64);
        let epse = E::from_f64(eps);
        let mut out = vec![E::zero(); x.len()];
        let mut xhat = vec![E::zero(); x.len()];
        let mut inv_std = vec![E::zero(); rows];
        for r in 0..rows {
            let row = r * d;
            let mut mean = E::zero();
            for j in 0..d {
                mean += x[row + j];
            }
            mean *= inv_d;
            let mut var = E::zero();
            for j in 0..d {
                let c = x[row + j] - mean;
                var += c * c;
            }
            var *= inv_d;
            let istd = E::one() / (var + epse).sqrt();
            inv_std[r] = istd;
            for j in 0..d {
                let xh = (x[row + j] - mean) * istd;
                xhat[row + j] = xh;
                out[row + j] = xh * gd[j] + bd[j];
            }
        }
        drop(x);
        drop(gd);
        drop(bd);
        Ok(Tensor::from_op(
            out,
            self.shape().clone(),
            Op::LayerNorm {
                x: self.clone(),
                gain: gain.clone(),
                bias: bias.clone(),
                xhat,
                inv_std,
            },
        ))
    }

    /// Forwards this tensor's value bit-exactly while routing the gradient
    /// to `reference` with an identity Jacobian (summed over any leading
    /// dims `reference` lacks). No gradient flows to `self`.
    pub fn straight_through(&self, reference: &Tensor<E>) -> Result<Tensor<E>> {
        let ok = reference.dims() == self.dims()
            || (reference.rank() <= self.rank()
                && self.dims()[self.rank() - reference.rank()..] == *reference.dims());
        if !ok {
            return Err(Error::DimMismatch {
                op: "straight_through",
                lhs: self.dims().to_vec(),
                rhs: reference.dims().to_vec(),
            });
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            self.shape().clone(),
            Op::StraightThrough {
                reference: reference.clone(),
            },
        ))
    }

    pub fn sum_all(&self) -> Tensor<E> {
        let s: E = self.data().iter().copied().sum();
        Tensor::from_op(vec![s], Shape::scalar(), Op::SumAll(self.clone()))
    }

    pub fn mean_all(&self) -> Tensor<E> {
        let s: E = self.data().iter().copied().sum();
        let m = s / E::from_f64(self.numel() as f64);
        Tensor::from_op(vec![m], Shape::scalar(), Op::MeanAll(self.clone()))
    }

    fn reduce_axis(
        &self,
        axis: usize,
        keepdim: bool,
        opname: &'static str,
        mean: bool,
    ) -> Result<Tensor<E>> {
        if axis >= self.rank() {
            return Err(Error::Axis {
                op: opname,
                axis,
                rank: self.rank(),
            });
        }
        let dims = self.dims();
        let (outer, len, inner) = axis_split(dims, axis);
        let x = self.data();
        let mut out = vec![E::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                let dst = o * inner;
                for i in 0..inner {
                    out[dst + i] += x[base + i];
                }
            }
        }
        if mean {
            let inv = E::one() / E::from_f64(len as f64);
            for v in out.iter_mut() {
                *v *= inv;
            }
        }
        drop(x);
        let mut out_dims = dims.to_vec();
        if keepdim {
            out_dims[axis] = 1;
        } else {
            out_dims.remove(axis);
        }
        let op = if mean {
            Op::MeanAxis {
                x: self.clone(),
                axis,
            }
        } else {
            Op::SumAxis {
                x: self.clone(),
                axis,
            }
        };
        Ok(Tensor::from_op(out, Shape::new(out_dims), op))
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<E>> {
        self.reduce_axis(axis, keepdim, "sum_axis", false)
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<E>> {
        self.reduce_axis(axis, keepdim, "mean_axis", true)
    }

    pub fn reshape(&self, dims: impl Into<Shape>) -> Result<Tensor<E>> {
        let shape = dims.into();
        if shape.numel() != self.numel() {
            return Err(Error::Invalid {
                op: "reshape",
                msg: format!("cannot reshape {} into {}", self.shape(), shape),
            });
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape,
            Op::Reshape(self.clone()),
        ))
    }

    /// Swaps two axes (materialized copy).
    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor<E>> {
        let rank = self.rank();
        if a >= rank || b >= rank {
            return Err(Error::Axis {
                op: "transpose",
                axis: a.max(b),
                rank,
            });
        }
        let data = transpose_raw(&self.data(), self.dims(), a, b);
        let mut out_dims = self.dims().to_vec();
        out_dims.swap(a, b);
        Ok(Tensor::from_op(
            data,
            Shape::new(out_dims),
            Op::Transpose {
                x: self.clone(),
                a,
                b,
            },
        ))
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<E>> {
        if axis >= self.rank() {
            return Err(Error::Axis {
                op: "slice",
                axis,
                rank: self.rank(),
            });
        }
        if start + len > self.dims()[axis] {
            return Err(Error::Invalid {
                op: "slice",
                msg: format!(
                    "range {}..{} out of bounds for axis of extent {}",
                    start,
                    start + len,
                    self.dims()[axis]
                ),
            });
        }
        let data = slice_raw(&self.data(), self.dims(), axis, start, len);
        let mut out_dims = self.dims().to_vec();
        out_dims[axis] = len;
        Ok(Tensor::from_op(
            data,
            Shape::new(out_dims),
            Op::Slice {
                x: self.clone(),
                axis,
                start,
            },
        ))
    }

    pub fn concat(parts: &[Tensor<E>], axis: usize) -> Result<Tensor<E>> {
        let first = parts.first().ok_or(Error::Invalid {
            op: "concat",
            msg: "empty part list".into(),
        })?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::Axis {
                op: "concat",
                axis,
                rank,
            });
        }
        let mut total = 0usize;
        for p in parts {
            let mut pd = p.dims().to_vec();
            let mut fd = first.dims().to_vec();
            pd[axis] = 0;
            fd[axis] = 0;
            if pd != fd {
                return Err(Error::DimMismatch {
                    op: "concat",
                    lhs: first.dims().to_vec(),
                    rhs: p.dims().to_vec(),
                });
            }
            total += p.dims()[axis];
        }
        let mut out_dims = first.dims().to_vec();
        out_dims[axis] = total;
        let (outer, _, inner) = axis_split(&out_dims, axis);
        let mut out = vec![E::zero(); outer * total * inner];
        let mut start = 0usize;
        for p in parts {
            let len = p.dims()[axis];
            let pd = p.data();
            for o in 0..outer {
                let src = o * len * inner;
                let dst = (o * total + start) * inner;
                out[dst..dst + len * inner].copy_from_slice(&pd[src..src + len * inner]);
            }
            start += len;
        }
        Ok(Tensor::from_op(
            out,
            Shape::new(out_dims),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Materializes this tensor broadcast to `dims`.
    pub fn broadcast_to(&self, dims: impl Into<Shape>) -> Result<Tensor<E>> {
        let target = dims.into();
        let ok = Shape::broadcast(self.shape(), &target)
            .map(|s| s == target)
            .unwrap_or(false);
        if !ok {
            return Err(Error::DimMismatch {
                op: "broadcast_to",
                lhs: self.dims().to_vec(),
                rhs: target.dims().to_vec(),
            });
        }
        let zeros = vec![E::zero(); target.numel()];
        let data = broadcast_zip(
            &zeros,
            target.dims(),
            &self.data(),
            self.dims(),
            target.dims(),
            |_, b| b,
        );
        Ok(Tensor::from_op(data, target, Op::Broadcast(self.clone())))
    }

    /// Mean squared error over all elements.
    pub fn mse_loss(&self, target: &Tensor<E>) -> Result<Tensor<E>> {
        if self.dims() != target.dims() {
            return Err(Error::DimMismatch {
                op: "mse_loss",
                lhs: self.dims().to_vec(),
                rhs: target.dims().to_vec(),
            });
        }
        let diff = self.sub(target)?;
        Ok(diff.mul(&diff)?.mean_all())
    }
}
