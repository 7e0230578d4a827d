//! conv2d / conv_transpose2d and their adjoints, all expressed through one
//! gather/scatter pair plus gemm.
//!
//! `gather` collects kernel-window patches of the spatially "big" tensor
//! into a column matrix indexed by the "small" grid; `scatter` is its exact
//! transpose. conv2d forward gathers; conv_transpose2d forward scatters;
//! each one's data gradient is the other's primitive.
//!
//! Column matrices are packed across the whole batch so each layer runs a
//! single wide gemm; per-image blocks live at a column offset with row
//! stride `batch * positions`.

use super::element::scratch_vec;
use super::{gemm_slices, Element, Op, Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
pub(crate) struct Geom {
    pub channels: usize,
    pub h_big: usize,
    pub w_big: usize,
    pub h_small: usize,
    pub w_small: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

pub fn conv_out_extent(h: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = h + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Valid index range [lo, hi) such that lo*s + off >= 0 and
/// (hi-1)*s + off < limit, clamped to [0, count).
fn valid_range(off: isize, stride: usize, limit: usize, count: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 {
        0
    } else {
        ((-off + s - 1) / s) as usize
    };
    let hi_excl = if (limit as isize) <= off {
        0
    } else {
        (((limit as isize - 1 - off) / s) + 1) as usize
    };
    (lo.min(count), hi_excl.min(count))
}

/// Per-parity subgrid extents for stride-2 decomposition: output index
/// y = 2r + parity, so parity class `p` holds ceil((extent - p) / 2) rows.
fn parity_extent(extent: usize, parity: usize) -> usize {
    (extent + 1 - parity) / 2
}

/// Tap offset `a` lands on parity `a mod 2` with subgrid shift
/// (a - parity) / 2.
fn tap_split(a: isize) -> (usize, isize) {
    let parity = a.rem_euclid(2) as usize;
    (parity, (a - parity as isize) / 2)
}

/// Stride-2 scatter via parity decomposition: taps accumulate into four
/// stride-1 subgrids which are interleaved into the output once.
fn scatter_stride2<E: Element>(cols: &[E], g: Geom, big: &mut [E], row_len: usize, col_off: usize) {
    let plane = g.h_big * g.w_big;
    let rows: [usize; 2] = [parity_extent(g.h_big, 0), parity_extent(g.h_big, 1)];
    let cws: [usize; 2] = [parity_extent(g.w_big, 0), parity_extent(g.w_big, 1)];
    let mut sub = [
        vec![E::zero(); rows[0] * cws[0]],
        vec![E::zero(); rows[0] * cws[1]],
        vec![E::zero(); rows[1] * cws[0]],
        vec![E::zero(); rows[1] * cws[1]],
    ];
    for c in 0..g.channels {
        for s in sub.iter_mut() {
            s.fill(E::zero());
        }
        for u in 0..g.k {
            let (py, sy) = tap_split(u as isize - g.pad as isize);
            let i_lo = (-sy).max(0) as usize;
            let i_hi = ((rows[py] as isize - sy).max(0) as usize).min(g.h_small);
            for v in 0..g.k {
                let (px, sx) = tap_split(v as isize - g.pad as isize);
                let j_lo = (-sx).max(0) as usize;
                let j_hi = ((cws[px] as isize - sx).max(0) as usize).min(g.w_small);
                if i_lo >= i_hi || j_lo >= j_hi {
                    continue;
                }
                let row = (c * g.k + u) * g.k + v;
                let src = &cols[row * row_len + col_off..row * row_len + col_off + g.h_small * g.w_small];
                let grid = &mut sub[py * 2 + px];
                let cw = cws[px];
                for i in i_lo..i_hi {
                    let r = (i as isize + sy) as usize;
                    let q0 = (j_lo as isize + sx) as usize;
                    let drow = &mut grid[r * cw + q0..r * cw + q0 + (j_hi - j_lo)];
                    let srow = &src[i * g.w_small + j_lo..i * g.w_small + j_hi];
                    for (d, s) in drow.iter_mut().zip(srow) {
                        *d += *s;
                    }
                }
            }
        }
        // interleave the four subgrids into the channel plane
        let dst_c = c * plane;
        for y in 0..g.h_big {
            let py = y & 1;
            let r = y >> 1;
            let out_row = &mut big[dst_c + y * g.w_big..dst_c + (y + 1) * g.w_big];
            let a = &sub[py * 2][r * cws[0]..r * cws[0] + parity_extent(g.w_big, 0)];
            let b = &sub[py * 2 + 1];
            let bb = &b[r * cws[1]..r * cws[1] + parity_extent(g.w_big, 1)];
            let pairs = g.w_big / 2;
            for (chunk, (ea, eb)) in out_row
                .chunks_exact_mut(2)
                .zip(a.iter().zip(bb.iter()))
            {
                chunk[0] += *ea;
                chunk[1] += *eb;
            }
            if g.w_big % 2 == 1 {
                out_row[g.w_big - 1] += a[pairs];
            }
        }
    }
}

/// Stride-2 gather via parity decomposition: the big tensor is
/// de-interleaved once, then every tap is a contiguous row copy.
fn gather_stride2<E: Element>(big: &[E], g: Geom, cols: &mut [E], row_len: usize, col_off: usize) {
    let plane = g.h_big * g.w_big;
    let rows: [usize; 2] = [parity_extent(g.h_big, 0), parity_extent(g.h_big, 1)];
    let cws: [usize; 2] = [parity_extent(g.w_big, 0), parity_extent(g.w_big, 1)];
    let mut sub = [
        vec![E::zero(); rows[0] * cws[0]],
        vec![E::zero(); rows[0] * cws[1]],
        vec![E::zero(); rows[1] * cws[0]],
        vec![E::zero(); rows[1] * cws[1]],
    ];
    for c in 0..g.channels {
        let src_c = c * plane;
        for y in 0..g.h_big {
            let py = y & 1;
            let r = y >> 1;
            let in_row = &big[src_c + y * g.w_big..src_c + (y + 1) * g.w_big];
            let pairs = g.w_big / 2;
            let (sub_a, sub_b) = if py == 0 {
                let (l, r_) = sub.split_at_mut(1);
                (&mut l[0], &mut r_[0])
            } else {
                let (l, r_) = sub.split_at_mut(3);
                (&mut l[2], &mut r_[0])
            };
            let arow = &mut sub_a[r * cws[0]..r * cws[0] + parity_extent(g.w_big, 0)];
            let brow = &mut sub_b[r * cws[1]..r * cws[1] + parity_extent(g.w_big, 1)];
            for (chunk, (ea, eb)) in in_row
                .chunks_exact(2)
                .zip(arow.iter_mut().zip(brow.iter_mut()))
            {
                *ea = chunk[0];
                *eb = chunk[1];
            }
            if g.w_big % 2 == 1 {
                arow[pairs] = in_row[g.w_big - 1];
            }
        }
        for u in 0..g.k {
            let (py, sy) = tap_split(u as isize - g.pad as isize);
            let i_lo = (-sy).max(0) as usize;
            let i_hi = ((rows[py] as isize - sy).max(0) as usize).min(g.h_small);
            for v in 0..g.k {
                let (px, sx) = tap_split(v as isize - g.pad as isize);
                let j_lo = (-sx).max(0) as usize;
                let j_hi = ((cws[px] as isize - sx).max(0) as usize).min(g.w_small);
                let row = (c * g.k + u) * g.k + v;
                let base = row * row_len + col_off;
                let dst = &mut cols[base..base + g.h_small * g.w_small];
                if i_lo >= i_hi || j_lo >= j_hi {
                    dst.fill(E::zero());
                    continue;
                }
                dst[..i_lo * g.w_small].fill(E::zero());
                dst[i_hi * g.w_small..].fill(E::zero());
                let grid = &sub[py * 2 + px];
                let cw = cws[px];
                for i in i_lo..i_hi {
                    let r = (i as isize + sy) as usize;
                    let q0 = (j_lo as isize + sx) as usize;
                    let drow = &mut dst[i * g.w_small..(i + 1) * g.w_small];
                    drow[..j_lo].fill(E::zero());
                    drow[j_hi..].fill(E::zero());
                    drow[j_lo..j_hi].copy_from_slice(&grid[r * cw + q0..r * cw + q0 + (j_hi - j_lo)]);
                }
            }
        }
    }
}

/// cols[(c*k+u)*k+v, col_off + i*w_small+j] = big[c, i*s-p+u, j*s-p+v],
/// zero out of bounds. `row_len` is the full packed row length.
fn gather<E: Element>(big: &[E], g: Geom, cols: &mut [E], row_len: usize, col_off: usize) {
    if g.stride == 2 {
        return gather_stride2(big, g, cols, row_len, col_off);
    }
    let plane = g.h_big * g.w_big;
    let mut row = 0usize;
    for c in 0..g.channels {
        let src_c = c * plane;
        for u in 0..g.k {
            let y0 = u as isize - g.pad as isize;
            let (i_lo, i_hi) = valid_range(y0, g.stride, g.h_big, g.h_small);
            for v in 0..g.k {
                let x0 = v as isize - g.pad as isize;
                let (j_lo, j_hi) = valid_range(x0, g.stride, g.w_big, g.w_small);
                let base = row * row_len + col_off;
                let dst = &mut cols[base..base + g.h_small * g.w_small];
                row += 1;
                dst[..i_lo * g.w_small].fill(E::zero());
                dst[i_hi * g.w_small..].fill(E::zero());
                for i in i_lo..i_hi {
                    let y = (i * g.stride) as isize + y0;
                    let src_row = src_c + y as usize * g.w_big;
                    let drow = &mut dst[i * g.w_small..(i + 1) * g.w_small];
                    drow[..j_lo].fill(E::zero());
                    drow[j_hi..].fill(E::zero());
                    if g.stride == 1 {
                        let x_start = (j_lo as isize + x0) as usize;
                        drow[j_lo..j_hi]
                            .copy_from_slice(&big[src_row + x_start..src_row + x_start + (j_hi - j_lo)]);
                    } else {
                        let x_start = ((j_lo * g.stride) as isize + x0) as usize;
                        let srow = &big[src_row + x_start..src_row + g.w_big];
                        for (d, s) in drow[j_lo..j_hi]
                            .iter_mut()
                            .zip(srow.iter().step_by(g.stride))
                        {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

/// Transpose of [`gather`]: big[c, i*s-p+u, j*s-p+v] += cols[...].
fn scatter<E: Element>(cols: &[E], g: Geom, big: &mut [E], row_len: usize, col_off: usize) {
    if g.stride == 2 {
        return scatter_stride2(cols, g, big, row_len, col_off);
    }
    let plane = g.h_big * g.w_big;
    let mut row = 0usize;
    for c in 0..g.channels {
        let dst_c = c * plane;
        for u in 0..g.k {
            let y0 = u as isize - g.pad as isize;
            let (i_lo, i_hi) = valid_range(y0, g.stride, g.h_big, g.h_small);
            for v in 0..g.k {
                let x0 = v as isize - g.pad as isize;
                let (j_lo, j_hi) = valid_range(x0, g.stride, g.w_big, g.w_small);
                let base = row * row_len + col_off;
                let src = &cols[base..base + g.h_small * g.w_small];
                row += 1;
                for i in i_lo..i_hi {
                    let y = (i * g.stride) as isize + y0;
                    let dst_row = dst_c + y as usize * g.w_big;
                    let srow = &src[i * g.w_small + j_lo..i * g.w_small + j_hi];
                    if g.stride == 1 {
                        let x_start = (j_lo as isize + x0) as usize;
                        let drow = &mut big[dst_row + x_start..dst_row + x_start + srow.len()];
                        for (d, s) in drow.iter_mut().zip(srow) {
                            *d += *s;
                        }
                    } else {
                        let x_start = ((j_lo * g.stride) as isize + x0) as usize;
                        let drow = &mut big[dst_row + x_start..dst_row + g.w_big];
                        for (d, s) in drow.iter_mut().step_by(g.stride).zip(srow) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
}

/// `[B, C, N]` -> `[C, B*N]` (or back with `invert`), both contiguous.
fn pack_channels<E: Element>(src: &[E], b: usize, c: usize, n: usize, invert: bool) -> Vec<E> {
    let mut out = scratch_vec::<E>(src.len());
    for bi in 0..b {
        for ci in 0..c {
            let (from, to) = if invert {
                (ci * b * n + bi * n, (bi * c + ci) * n)
            } else {
                ((bi * c + ci) * n, ci * b * n + bi * n)
            };
            out[to..to + n].copy_from_slice(&src[from..from + n]);
        }
    }
    out
}

/// `[C, B*N]` -> `[B, C, N]` with a per-channel offset folded into the copy.
fn unpack_with_bias<E: Element>(src: &[E], b: usize, c: usize, n: usize, bias: &[E]) -> Vec<E> {
    let mut out = scratch_vec::<E>(src.len());
    for bi in 0..b {
        for ci in 0..c {
            let from = ci * b * n + bi * n;
            let to = (bi * c + ci) * n;
            let bv = bias[ci];
            for (o, s) in out[to..to + n].iter_mut().zip(&src[from..from + n]) {
                *o = *s + bv;
            }
        }
    }
    out
}

/// Per-channel sums of a `[B, C, N]` gradient; the bias gradient.
fn channel_sums<E: Element>(g: &[E], b: usize, c: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); c];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * n;
            let mut acc = E::zero();
            for v in &g[base..base + n] {
                acc += *v;
            }
            out[ci] += acc;
        }
    }
    out
}

fn check_conv_args<E: Element>(
    op: &'static str,
    x: &Tensor<E>,
    w: &Tensor<E>,
) -> Result<(usize, usize, usize, usize, usize)> {
    if x.rank() != 4 || w.rank() != 4 {
        return Err(Error::DimMismatch {
            op,
            lhs: x.dims().to_vec(),
            rhs: w.dims().to_vec(),
        });
    }
    if w.dims()[2] != w.dims()[3] {
        return Err(Error::Invalid {
            op,
            msg: format!("kernel must be square, got {}x{}", w.dims()[2], w.dims()[3]),
        });
    }
    Ok((x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3], w.dims()[2]))
}

impl<E: Element> Tensor<E> {
    /// 2d convolution: `self` is `[B, C, H, W]`, `w` is `[O, C, k, k]`.
    pub fn conv2d(&self, w: &Tensor<E>, stride: usize, pad: usize) -> Result<Tensor<E>> {
        self.conv2d_bias(w, None, stride, pad)
    }

    /// [`Tensor::conv2d`] with a per-output-channel bias folded into the
    /// same op.
    pub fn conv2d_bias(
        &self,
        w: &Tensor<E>,
        bias: Option<&Tensor<E>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<E>> {
        let (b, c, h, wid, k) = check_conv_args("conv2d", self, w)?;
        if w.dims()[1] != c {
            return Err(Error::DimMismatch {
                op: "conv2d",
                lhs: self.dims().to_vec(),
                rhs: w.dims().to_vec(),
            });
        }
        let o = w.dims()[0];
        let (h2, w2) = match (
            conv_out_extent(h, k, stride, pad),
            conv_out_extent(wid, k, stride, pad),
        ) {
            (Some(a), Some(bb)) => (a, bb),
            _ => {
                return Err(Error::Invalid {
                    op: "conv2d",
                    msg: format!(
                        "kernel {k} does not fit input {h}x{wid} with pad {pad}, stride {stride}"
                    ),
                })
            }
        };
        let geom = Geom {
            channels: c,
            h_big: h,
            w_big: wid,
            h_small: h2,
            w_small: w2,
            k,
            stride,
            pad,
        };
        let ckk = c * k * k;
        let n = h2 * w2;
        let mut cols = scratch_vec::<E>(ckk * b * n);
        let mut packed = scratch_vec::<E>(b * o * n);
        {
            let xd = self.data();
            let wd = w.data();
            for bi in 0..b {
                gather(
                    &xd[bi * c * h * wid..(bi + 1) * c * h * wid],
                    geom,
                    &mut cols,
                    b * n,
                    bi * n,
                );
            }
            gemm_slices(o, ckk, b * n, &wd, false, &cols, false, E::zero(), &mut packed);
        }
        let out = match bias {
            Some(bt) => {
                if bt.dims() != [o] {
                    return Err(Error::DimMismatch {
                        op: "conv2d",
                        lhs: vec![o],
                        rhs: bt.dims().to_vec(),
                    });
                }
                unpack_with_bias(&packed, b, o, n, &bt.data())
            }
            None => pack_channels(&packed, b, o, n, true),
        };
        // only keep the column matrix when a backward pass can use it
        if !(super::grad_enabled() && (self.requires_grad() || w.requires_grad())) {
            cols.clear();
        }
        Ok(Tensor::from_op(
            out,
            Shape::new(vec![b, o, h2, w2]),
            Op::Conv2d {
                x: self.clone(),
                w: w.clone(),
                bias: bias.cloned(),
                stride,
                pad,
                cols,
            },
        ))
    }

    /// Transposed 2d convolution (adjoint of [`Tensor::conv2d`] geometry):
    /// `self` is `[B, Cin, H, W]`, `w` is `[Cin, Cout, k, k]`. Output
    /// spatial extent is `(H-1)*stride + k - 2*pad + out_pad`.
    pub fn conv_transpose2d(
        &self,
        w: &Tensor<E>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Tensor<E>> {
        self.conv_transpose2d_bias(w, None, stride, pad, out_pad)
    }

    /// [`Tensor::conv_transpose2d`] with a fused per-channel bias.
    pub fn conv_transpose2d_bias(
        &self,
        w: &Tensor<E>,
        bias: Option<&Tensor<E>>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Tensor<E>> {
        let (b, cin, h, wid, k) = check_conv_args("conv_transpose2d", self, w)?;
        if w.dims()[0] != cin {
            return Err(Error::DimMismatch {
                op: "conv_transpose2d",
                lhs: self.dims().to_vec(),
                rhs: w.dims().to_vec(),
            });
        }
        if out_pad >= stride {
            return Err(Error::Invalid {
                op: "conv_transpose2d",
                msg: format!("out_pad {out_pad} must be < stride {stride}"),
            });
        }
        let cout = w.dims()[1];
        let base_h = (h - 1) * stride + k;
        let base_w = (wid - 1) * stride + k;
        if base_h < 2 * pad + 1 || base_w < 2 * pad + 1 {
            return Err(Error::Invalid {
                op: "conv_transpose2d",
                msg: format!("pad {pad} too large for geometry"),
            });
        }
        let h2 = base_h - 2 * pad + out_pad;
        let w2 = base_w - 2 * pad + out_pad;
        let geom = Geom {
            channels: cout,
            h_big: h2,
            w_big: w2,
            h_small: h,
            w_small: wid,
            k,
            stride,
            pad,
        };
        let ckk = cout * k * k;
        let hw = h * wid;
        let mut out = match bias {
            Some(bt) => {
                if bt.dims() != [cout] {
                    return Err(Error::DimMismatch {
                        op: "conv_transpose2d",
                        lhs: vec![cout],
                        rhs: bt.dims().to_vec(),
                    });
                }
                let bd = bt.data();
                let mut v = scratch_vec::<E>(b * cout * h2 * w2);
                let plane = h2 * w2;
                for bi in 0..b {
                    for ci in 0..cout {
                        v[(bi * cout + ci) * plane..(bi * cout + ci + 1) * plane].fill(bd[ci]);
                    }
                }
                v
            }
            None => vec![E::zero(); b * cout * h2 * w2],
        };
        {
            let xd = self.data();
            let wd = w.data();
            let x_packed = pack_channels(&xd, b, cin, hw, false);
            let mut cols = scratch_vec::<E>(ckk * b * hw);
            // cols = W^T . x, with W viewed as [Cin, Cout*k*k]
            gemm_slices(
                ckk,
                cin,
                b * hw,
                &wd,
                true,
                &x_packed,
                false,
                E::zero(),
                &mut cols,
            );
            for bi in 0..b {
                scatter(
                    &cols,
                    geom,
                    &mut out[bi * cout * h2 * w2..(bi + 1) * cout * h2 * w2],
                    b * hw,
                    bi * hw,
                );
            }
        }
        Ok(Tensor::from_op(
            out,
            Shape::new(vec![b, cout, h2, w2]),
            Op::ConvTranspose2d {
                x: self.clone(),
                w: w.clone(),
                bias: bias.cloned(),
                stride,
                pad,
            },
        ))
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    pad: usize,
    saved_cols: &[E],
    out_dims: &[usize],
    g: &[E],
    emit: &mut dyn FnMut(&Tensor<E>, Vec<E>),
) {
    if let Some(bt) = bias {
        if bt.requires_grad() {
            emit(bt, channel_sums(g, out_dims[0], out_dims[1], out_dims[2] * out_dims[3]));
        }
    }
    let (b, c, h, wid) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let (o, k) = (w.dims()[0], w.dims()[2]);
    let (h2, w2) = (out_dims[2], out_dims[3]);
    let geom = Geom {
        channels: c,
        h_big: h,
        w_big: wid,
        h_small: h2,
        w_small: w2,
        k,
        stride,
        pad,
    };
    let ckk = c * k * k;
    let n = h2 * w2;
    let g_packed = pack_channels(g, b, o, n, false);

    if w.requires_grad() {
        let mut rebuilt = Vec::new();
        let cols: &[E] = if saved_cols.len() == ckk * b * n {
            saved_cols
        } else {
            rebuilt = scratch_vec::<E>(ckk * b * n);
            let xd = x.data();
            for bi in 0..b {
                gather(
                    &xd[bi * c * h * wid..(bi + 1) * c * h * wid],
                    geom,
                    &mut rebuilt,
                    b * n,
                    bi * n,
                );
            }
            &rebuilt
        };
        // dW = g . cols^T over the whole batch
        let mut dw = vec![E::zero(); w.numel()];
        gemm_slices(o, b * n, ckk, &g_packed, false, cols, true, E::one(), &mut dw);
        emit(w, dw);
        drop(rebuilt);
    }
    if x.requires_grad() {
        let wd = w.data();
        let mut dcols = scratch_vec::<E>(ckk * b * n);
        // dcols = W^T . g
        gemm_slices(
            ckk,
            o,
            b * n,
            &wd,
            true,
            &g_packed,
            false,
            E::zero(),
            &mut dcols,
        );
        let mut dx = vec![E::zero(); x.numel()];
        for bi in 0..b {
            scatter(
                &dcols,
                geom,
                &mut dx[bi * c * h * wid..(bi + 1) * c * h * wid],
                b * n,
                bi * n,
            );
        }
        emit(x, dx);
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_backward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    pad: usize,
    out_dims: &[usize],
    g: &[E],
    emit: &mut dyn FnMut(&Tensor<E>, Vec<E>),
) {
    if let Some(bt) = bias {
        if bt.requires_grad() {
            emit(bt, channel_sums(g, out_dims[0], out_dims[1], out_dims[2] * out_dims[3]));
        }
    }
    let (b, cin, h, wid) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let (cout, k) = (w.dims()[1], w.dims()[2]);
    let (h2, w2) = (out_dims[2], out_dims[3]);
    let geom = Geom {
        channels: cout,
        h_big: h2,
        w_big: w2,
        h_small: h,
        w_small: wid,
        k,
        stride,
        pad,
    };
    let ckk = cout * k * k;
    let hw = h * wid;
    let big = cout * h2 * w2;
    let mut cols = scratch_vec::<E>(ckk * b * hw);
    for bi in 0..b {
        gather(&g[bi * big..(bi + 1) * big], geom, &mut cols, b * hw, bi * hw);
    }

    if x.requires_grad() {
        let wd = w.data();
        // dx = W . cols, with W viewed as [Cin, Cout*k*k]
        let mut dx_packed = scratch_vec::<E>(b * cin * hw);
        gemm_slices(
            cin,
            ckk,
            b * hw,
            &wd,
            false,
            &cols,
            false,
            E::zero(),
            &mut dx_packed,
        );
        emit(x, pack_channels(&dx_packed, b, cin, hw, true));
    }
    if w.requires_grad() {
        let xd = x.data();
        let x_packed = pack_channels(&xd, b, cin, hw, false);
        // dW = x . cols^T over the whole batch
        let mut dw = vec![E::zero(); w.numel()];
        gemm_slices(
            cin,
            b * hw,
            ckk,
            &x_packed,
            false,
            &cols,
            true,
            E::one(),
            &mut dw,
        );
        emit(w, dw);
    }
}
