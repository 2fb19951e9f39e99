//! Forward and backward kernels behind the tape ops.
//!
//! Everything here is a pure function on [`Tensor`] buffers; the tape layer
//! owns shape validation bookkeeping and node recording. Matrix products go
//! through one strided GEMM entry point, which also backs convolution
//! (im2col) and spatial covariance.

use super::{numel_of, Scalar, Tensor, TensorError};

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn ensure_finite<S: Scalar>(op: &'static str, t: &Tensor<S>) -> Result<(), TensorError> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

// ---------------------------------------------------------------- broadcast

/// Element strides of `rhs` aligned to `lhs`'s axes (trailing alignment,
/// size-1 axes stretch); `None` when the shapes are incompatible.
pub(crate) fn broadcast_rhs_strides(lhs: &[usize], rhs: &[usize]) -> Option<Vec<usize>> {
    if rhs.len() > lhs.len() {
        return None;
    }
    let rs = strides(rhs);
    let off = lhs.len() - rhs.len();
    let mut out = vec![0; lhs.len()];
    for (j, (&rd, &st)) in rhs.iter().zip(&rs).enumerate() {
        let ld = lhs[off + j];
        if rd == ld {
            out[off + j] = st;
        } else if rd != 1 {
            return None;
        }
    }
    Some(out)
}

/// How a broadcast rhs walks the lhs, for the hot special cases.
enum BroadcastPlan {
    /// rhs indexes a prefix of the lhs dims: constant over `inner`-long
    /// contiguous runs (conv/linear biases).
    PrefixConst { outer: usize, inner: usize },
    /// rhs indexes a suffix of the lhs dims: the whole rhs repeats `outer`
    /// times (rendering weights against channel-stacked payloads).
    SuffixCycle { outer: usize, inner: usize },
    Generic,
}

fn classify_broadcast(shape: &[usize], rstride: &[usize]) -> BroadcastPlan {
    let nd = shape.len();
    let mut j = 0;
    while j < nd && rstride[j] == 0 {
        j += 1;
    }
    let mut acc = 1usize;
    if (j..nd).rev().all(|ax| {
        let ok = rstride[ax] == acc;
        acc *= shape[ax];
        ok
    }) {
        return BroadcastPlan::SuffixCycle {
            outer: shape[..j].iter().product(),
            inner: shape[j..].iter().product(),
        };
    }
    let mut k = nd;
    while k > 0 && rstride[k - 1] == 0 {
        k -= 1;
    }
    let mut acc = 1usize;
    if (0..k).rev().all(|ax| {
        let ok = rstride[ax] == acc;
        acc *= shape[ax];
        ok
    }) {
        return BroadcastPlan::PrefixConst {
            outer: shape[..k].iter().product(),
            inner: shape[k..].iter().product(),
        };
    }
    BroadcastPlan::Generic
}

/// `f(a[i], b[i'])` with `b` broadcast against `a`'s shape.
pub(crate) fn binary_broadcast<S: Scalar>(
    op: &'static str,
    a: &Tensor<S>,
    b: &Tensor<S>,
    f: impl Fn(S, S) -> S,
) -> Result<Tensor<S>, TensorError> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::from_vec(a.shape(), data);
    }
    let rstride =
        broadcast_rhs_strides(a.shape(), b.shape()).ok_or_else(|| TensorError::shapes(op, &[a.shape(), b.shape()]))?;
    let mut data = Vec::with_capacity(a.numel());
    match classify_broadcast(a.shape(), &rstride) {
        BroadcastPlan::PrefixConst { outer, inner } => {
            for o in 0..outer {
                let bv = b.data()[o];
                data.extend(a.data()[o * inner..(o + 1) * inner].iter().map(|&av| f(av, bv)));
            }
        }
        BroadcastPlan::SuffixCycle { outer, inner } => {
            for o in 0..outer {
                let base = o * inner;
                data.extend(
                    a.data()[base..base + inner].iter().zip(b.data()).map(|(&av, &bv)| f(av, bv)),
                );
            }
        }
        BroadcastPlan::Generic => {
            for_each_broadcast(a.shape(), &rstride, |i, roff| data.push(f(a.data()[i], b.data()[roff])));
        }
    }
    Tensor::from_vec(a.shape(), data)
}

/// Walks `shape` in row-major order, tracking the broadcast offset of a
/// second operand whose per-axis strides are `rstride`.
fn for_each_broadcast(shape: &[usize], rstride: &[usize], mut f: impl FnMut(usize, usize)) {
    let n = numel_of(shape);
    let nd = shape.len();
    let mut idx = vec![0usize; nd];
    let mut roff = 0usize;
    for i in 0..n {
        f(i, roff);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            roff += rstride[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            roff -= rstride[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

/// Sums `g` (shaped like the broadcast lhs) down to `target`'s shape — the
/// VJP of broadcasting.
pub(crate) fn reduce_to_shape<S: Scalar>(g: &Tensor<S>, target: &[usize]) -> Tensor<S> {
    if g.shape() == target {
        return g.clone();
    }
    let rstride = broadcast_rhs_strides(g.shape(), target).expect("reduce_to_shape: incompatible");
    let mut out = Tensor::zeros(target);
    match classify_broadcast(g.shape(), &rstride) {
        BroadcastPlan::PrefixConst { outer, inner } => {
            for o in 0..outer {
                let s = g.data()[o * inner..(o + 1) * inner]
                    .iter()
                    .fold(S::ZERO, |acc, &v| acc.addv(v));
                out.data_mut()[o] = s;
            }
        }
        BroadcastPlan::SuffixCycle { outer, inner } => {
            for o in 0..outer {
                let base = o * inner;
                for (dst, &v) in out.data_mut().iter_mut().zip(&g.data()[base..base + inner]) {
                    *dst = dst.addv(v);
                }
            }
        }
        BroadcastPlan::Generic => {
            for_each_broadcast(g.shape(), &rstride, |i, roff| {
                let v = out.data()[roff];
                out.data_mut()[roff] = add_s(v, g.data()[i]);
            });
        }
    }
    out
}

fn add_s<S: Scalar>(a: S, b: S) -> S {
    a.addv(b)
}

/// Same-shape elementwise combine (no broadcasting).
pub(crate) fn zip<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    assert_eq!(a.shape(), b.shape(), "zip shape mismatch");
    Tensor::from_vec(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
        .expect("zip shapes checked")
}

// ------------------------------------------------------------------- gemm

/// `c ← α·op(a)·op(b) + β·c` for rank-2 tensors, transposing via strides.
pub(crate) fn gemm_into<S: Scalar>(
    alpha: f64,
    a: &Tensor<S>,
    ta: bool,
    b: &Tensor<S>,
    tb: bool,
    beta: f64,
    c: &mut Tensor<S>,
) {
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, kb, "gemm_into: inner dims {k} vs {kb}");
    assert_eq!(c.shape(), &[m, n], "gemm_into: output shape");
    let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
    unsafe {
        S::gemm(
            m,
            k,
            n,
            S::from_f64(alpha),
            a.data().as_ptr(),
            rsa,
            csa,
            b.data().as_ptr(),
            rsb,
            csb,
            S::from_f64(beta),
            c.data_mut().as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(TensorError::shapes("matmul", &[a.shape(), b.shape()]));
    }
    let mut c = Tensor::zeros(&[a.shape()[0], b.shape()[1]]);
    gemm_into(1.0, a, false, b, false, 0.0, &mut c);
    Ok(c)
}

// ------------------------------------------------------------------- conv

/// 3×3, stride-1, zero-padded convolution patches: (C,H,W) → (C·9, H·W).
pub(crate) fn im2col<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut col = Tensor::zeros(&[c * 9, h * w]);
    for ci in 0..c {
        let xplane = &x.data()[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 3 + ky) * 3 + kx;
                let dst = &mut col.data_mut()[row * h * w..(row + 1) * h * w];
                // Valid output columns for this kernel offset.
                let (xlo, xhi) = (if kx == 0 { 1 } else { 0 }, if kx == 2 { w - 1 } else { w });
                for y in 0..h {
                    let sy = y + ky;
                    if sy < 1 || sy > h {
                        continue;
                    }
                    let sy = sy - 1;
                    dst[y * w + xlo..y * w + xhi]
                        .copy_from_slice(&xplane[sy * w + xlo + kx - 1..sy * w + xhi + kx - 1]);
                }
            }
        }
    }
    col
}

/// Scatter-add of im2col's transpose: accumulates (C·9, H·W) gradients back
/// into an (C,H,W) image gradient.
pub(crate) fn col2im_add<S: Scalar>(dcol: &Tensor<S>, c: usize, h: usize, w: usize, out: &mut Tensor<S>) {
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 3 + ky) * 3 + kx;
                let src = &dcol.data()[row * h * w..(row + 1) * h * w];
                let (xlo, xhi) = (if kx == 0 { 1 } else { 0 }, if kx == 2 { w - 1 } else { w });
                for y in 0..h {
                    let sy = y + ky;
                    if sy < 1 || sy > h {
                        continue;
                    }
                    let sy = sy - 1;
                    let dst = &mut out.data_mut()[ci * h * w + sy * w..ci * h * w + (sy + 1) * w];
                    for xo in xlo..xhi {
                        dst[xo + kx - 1] = add_s(dst[xo + kx - 1], src[y * w + xo]);
                    }
                }
            }
        }
    }
}

/// x: (Cin,H,W), weight: (Cout,Cin,3,3) → (Cout,H,W).
pub(crate) fn conv2d<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
    let ok = x.shape().len() == 3
        && w.shape().len() == 4
        && w.shape()[1] == x.shape()[0]
        && w.shape()[2] == 3
        && w.shape()[3] == 3;
    if !ok {
        return Err(TensorError::shapes("conv2d", &[x.shape(), w.shape()]));
    }
    let (h, wd) = (x.shape()[1], x.shape()[2]);
    let (co, ci) = (w.shape()[0], w.shape()[1]);
    let col = im2col(x);
    let w2 = w.clone().reshaped(&[co, ci * 9])?;
    let mut y = Tensor::zeros(&[co, h * wd]);
    gemm_into(1.0, &w2, false, &col, false, 0.0, &mut y);
    y.reshaped(&[co, h, wd])
}

pub(crate) fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    g: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>) {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let co = w.shape()[0];
    let col = im2col(x);
    let g2 = g.clone().reshaped(&[co, h * wd]).expect("conv grad shape");
    let w2 = w.clone().reshaped(&[co, ci * 9]).expect("conv weight shape");
    let mut dw = Tensor::zeros(&[co, ci * 9]);
    gemm_into(1.0, &g2, false, &col, true, 0.0, &mut dw);
    let mut dcol = Tensor::zeros(&[ci * 9, h * wd]);
    gemm_into(1.0, &w2, true, &g2, false, 0.0, &mut dcol);
    let mut dx = Tensor::zeros(&[ci, h, wd]);
    col2im_add(&dcol, ci, h, wd, &mut dx);
    (dx, dw.reshaped(&[co, ci, 3, 3]).expect("dw shape"))
}

// -------------------------------------------------------------- reductions

/// Sum or mean over `axes` (all axes when empty → scalar shape []).
pub(crate) fn reduce<S: Scalar>(
    x: &Tensor<S>,
    axes: &[usize],
    mean: bool,
) -> Result<Tensor<S>, TensorError> {
    let op: &'static str = if mean { "mean" } else { "sum" };
    let nd = x.shape().len();
    let mut reduce_axis = vec![false; nd];
    if axes.is_empty() {
        reduce_axis.iter_mut().for_each(|a| *a = true);
    }
    for &ax in axes {
        if ax >= nd || reduce_axis[ax] {
            return Err(TensorError::invalid(op, format!("bad axis {ax} for shape {:?}", x.shape())));
        }
        reduce_axis[ax] = true;
    }
    let out_shape: Vec<usize> =
        x.shape().iter().zip(&reduce_axis).filter(|(_, &r)| !r).map(|(&d, _)| d).collect();
    let count: usize = x.shape().iter().zip(&reduce_axis).filter(|(_, &r)| r).map(|(&d, _)| d).product();
    let mut acc = vec![0.0f64; numel_of(&out_shape)];
    for_each_reduced(x.shape(), &reduce_axis, |i, ooff| acc[ooff] += x.data()[i].to_f64());
    let scale = if mean { 1.0 / count as f64 } else { 1.0 };
    Tensor::from_vec(&out_shape, acc.into_iter().map(|v| S::from_f64(v * scale)).collect())
}

pub(crate) fn reduce_backward<S: Scalar>(
    g: &Tensor<S>,
    in_shape: &[usize],
    axes: &[usize],
    mean: bool,
) -> Tensor<S> {
    let nd = in_shape.len();
    let mut reduce_axis = vec![false; nd];
    if axes.is_empty() {
        reduce_axis.iter_mut().for_each(|a| *a = true);
    }
    for &ax in axes {
        reduce_axis[ax] = true;
    }
    let count: usize = in_shape.iter().zip(&reduce_axis).filter(|(_, &r)| r).map(|(&d, _)| d).product();
    let scale = if mean { 1.0 / count as f64 } else { 1.0 };
    let mut dx = Tensor::zeros(in_shape);
    for_each_reduced(in_shape, &reduce_axis, |i, ooff| {
        dx.data_mut()[i] = S::from_f64(g.data()[ooff].to_f64() * scale);
    });
    dx
}

/// Walks `shape` row-major, tracking the flat offset into the reduced-shape
/// tensor (reduced axes contribute stride 0).
fn for_each_reduced(shape: &[usize], reduce_axis: &[bool], f: impl FnMut(usize, usize)) {
    let out_shape: Vec<usize> =
        shape.iter().zip(reduce_axis).filter(|(_, &r)| !r).map(|(&d, _)| d).collect();
    let ostrides_kept = strides(&out_shape);
    let mut ostride = vec![0usize; shape.len()];
    let mut kept = 0;
    for (ax, &r) in reduce_axis.iter().enumerate() {
        if !r {
            ostride[ax] = ostrides_kept[kept];
            kept += 1;
        }
    }
    for_each_broadcast(shape, &ostride, f);
}

// ------------------------------------------------------------------- pool

/// Adaptive average pool (C,H,W) → (C,oh,ow) over near-uniform bins.
pub(crate) fn adaptive_avg_pool<S: Scalar>(
    x: &Tensor<S>,
    oh: usize,
    ow: usize,
) -> Result<Tensor<S>, TensorError> {
    if x.shape().len() != 3 || oh == 0 || ow == 0 {
        return Err(TensorError::invalid(
            "adaptive-average-pool",
            format!("input {:?}, output grid {oh}×{ow}", x.shape()),
        ));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for ci in 0..c {
        for oy in 0..oh {
            let (y0, y1) = bin(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = bin(ox, w, ow);
                let mut acc = 0.0f64;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        acc += x.data()[(ci * h + y) * w + xx].to_f64();
                    }
                }
                let nbin = ((y1 - y0) * (x1 - x0)) as f64;
                out.data_mut()[(ci * oh + oy) * ow + ox] = S::from_f64(acc / nbin);
            }
        }
    }
    Ok(out)
}

fn bin(i: usize, extent: usize, bins: usize) -> (usize, usize) {
    (i * extent / bins, ((i + 1) * extent).div_ceil(bins))
}

pub(crate) fn adaptive_avg_pool_backward<S: Scalar>(g: &Tensor<S>, h: usize, w: usize) -> Tensor<S> {
    let (c, oh, ow) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let mut dx = Tensor::zeros(&[c, h, w]);
    for ci in 0..c {
        for oy in 0..oh {
            let (y0, y1) = bin(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = bin(ox, w, ow);
                let nbin = ((y1 - y0) * (x1 - x0)) as f64;
                let gv = g.data()[(ci * oh + oy) * ow + ox].to_f64() / nbin;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        let d: &mut S = &mut dx.data_mut()[(ci * h + y) * w + xx];
                        *d = S::from_f64(d.to_f64() + gv);
                    }
                }
            }
        }
    }
    dx
}

// ------------------------------------------------------------- covariance

/// Mean-centered covariance over spatial positions: (C, …) → (C, C),
/// divisor N−1. Symmetric by construction.
pub(crate) fn spatial_covariance<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
    let (c, n) = cov_dims(x)?;
    let xc = center_rows(x, c, n);
    let mut cov = Tensor::zeros(&[c, c]);
    gemm_into(1.0 / (n as f64 - 1.0), &xc, false, &xc, true, 0.0, &mut cov);
    Ok(cov)
}

pub(crate) fn spatial_covariance_backward<S: Scalar>(x: &Tensor<S>, g: &Tensor<S>) -> Tensor<S> {
    let (c, n) = cov_dims(x).expect("checked in forward");
    let xc = center_rows(x, c, n);
    // d/dXc of tr(Gᵀ·XcXcᵀ/(N−1)) = (G+Gᵀ)Xc/(N−1), then re-center rows
    // because Xc itself subtracts the row mean.
    let mut sym = Tensor::<S>::zeros(&[c, c]);
    for i in 0..c {
        for j in 0..c {
            sym.data_mut()[i * c + j] = add_s(g.data()[i * c + j], g.data()[j * c + i]);
        }
    }
    let mut dxc = Tensor::zeros(&[c, n]);
    gemm_into(1.0 / (n as f64 - 1.0), &sym, false, &xc, false, 0.0, &mut dxc);
    let dxc = center_rows(&dxc, c, n);
    dxc.reshaped(x.shape()).expect("cov input shape")
}

fn cov_dims<S: Scalar>(x: &Tensor<S>) -> Result<(usize, usize), TensorError> {
    if x.shape().len() < 2 {
        return Err(TensorError::shapes("spatial-covariance", &[x.shape()]));
    }
    let c = x.shape()[0];
    let n = x.numel() / c;
    if n < 2 {
        return Err(TensorError::invalid(
            "spatial-covariance",
            format!("needs ≥ 2 spatial positions, got {n}"),
        ));
    }
    Ok((c, n))
}

fn center_rows<S: Scalar>(x: &Tensor<S>, c: usize, n: usize) -> Tensor<S> {
    let mut out = Tensor::zeros(&[c, n]);
    for i in 0..c {
        let row = &x.data()[i * n..(i + 1) * n];
        let mu = row.iter().map(|v| v.to_f64()).sum::<f64>() / n as f64;
        for (o, &v) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(row) {
            *o = S::from_f64(v.to_f64() - mu);
        }
    }
    out
}

// --------------------------------------------------------------- bilinear

/// Bilinear interpolation of an (C,H,W) map at continuous (row, col)
/// coordinates, clamped to the image rectangle → (C, P).
pub(crate) fn bilinear_sample<S: Scalar>(
    map: &Tensor<S>,
    rows: &[f64],
    cols: &[f64],
) -> Result<Tensor<S>, TensorError> {
    if map.shape().len() != 3 || rows.len() != cols.len() || rows.is_empty() {
        return Err(TensorError::invalid(
            "bilinear-sample",
            format!("map {:?}, {} coords", map.shape(), rows.len()),
        ));
    }
    let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let mut out = Tensor::zeros(&[c, rows.len()]);
    for (p, (&r, &cc)) in rows.iter().zip(cols).enumerate() {
        let (r0, r1, fr) = lerp_cell(r, h);
        let (c0, c1, fc) = lerp_cell(cc, w);
        for ch in 0..c {
            let plane = &map.data()[ch * h * w..(ch + 1) * h * w];
            let v = plane[r0 * w + c0].to_f64() * (1.0 - fr) * (1.0 - fc)
                + plane[r0 * w + c1].to_f64() * (1.0 - fr) * fc
                + plane[r1 * w + c0].to_f64() * fr * (1.0 - fc)
                + plane[r1 * w + c1].to_f64() * fr * fc;
            out.data_mut()[ch * rows.len() + p] = S::from_f64(v);
        }
    }
    Ok(out)
}

pub(crate) fn bilinear_sample_backward<S: Scalar>(
    g: &Tensor<S>,
    h: usize,
    w: usize,
    rows: &[f64],
    cols: &[f64],
) -> Tensor<S> {
    let c = g.shape()[0];
    let mut dm = Tensor::zeros(&[c, h, w]);
    for (p, (&r, &cc)) in rows.iter().zip(cols).enumerate() {
        let (r0, r1, fr) = lerp_cell(r, h);
        let (c0, c1, fc) = lerp_cell(cc, w);
        for ch in 0..c {
            let gv = g.data()[ch * rows.len() + p].to_f64();
            let plane: &mut [S] = &mut dm.data_mut()[ch * h * w..(ch + 1) * h * w];
            for (idx, wgt) in [
                (r0 * w + c0, (1.0 - fr) * (1.0 - fc)),
                (r0 * w + c1, (1.0 - fr) * fc),
                (r1 * w + c0, fr * (1.0 - fc)),
                (r1 * w + c1, fr * fc),
            ] {
                plane[idx] = S::from_f64(plane[idx].to_f64() + gv * wgt);
            }
        }
    }
    dm
}

/// Clamped interpolation cell: lower index, upper index, fraction.
fn lerp_cell(coord: f64, extent: usize) -> (usize, usize, f64) {
    if extent == 1 {
        return (0, 0, 0.0);
    }
    let c = coord.clamp(0.0, (extent - 1) as f64);
    let lo = (c.floor() as usize).min(extent - 2);
    (lo, lo + 1, c - lo as f64)
}

// ----------------------------------------------------------------- concat

pub(crate) fn concat<S: Scalar>(parts: &[&Tensor<S>], axis: usize) -> Result<Tensor<S>, TensorError> {
    let first = parts.first().ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
    let nd = first.shape().len();
    if axis >= nd {
        return Err(TensorError::invalid("concat", format!("axis {axis} for rank {nd}")));
    }
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = 0;
    for p in parts {
        let compatible = p.shape().len() == nd
            && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(TensorError::shapes("concat", &[first.shape(), p.shape()]));
        }
        out_shape[axis] += p.shape()[axis];
    }
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let outer: usize = first.shape()[..axis].iter().product();
    let mut data = Vec::with_capacity(numel_of(&out_shape));
    for o in 0..outer {
        for p in parts {
            let block = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
        }
    }
    Tensor::from_vec(&out_shape, data)
}

/// Splits a concat gradient back into per-part gradients.
pub(crate) fn concat_split<S: Scalar>(
    g: &Tensor<S>,
    part_shapes: &[Vec<usize>],
    axis: usize,
) -> Vec<Tensor<S>> {
    let inner: usize = part_shapes[0][axis + 1..].iter().product();
    let outer: usize = part_shapes[0][..axis].iter().product();
    let mut outs: Vec<Tensor<S>> = part_shapes.iter().map(|s| Tensor::zeros(s)).collect();
    let total_block: usize = part_shapes.iter().map(|s| s[axis] * inner).sum();
    for o in 0..outer {
        let mut base = o * total_block;
        for (pi, shape) in part_shapes.iter().enumerate() {
            let block = shape[axis] * inner;
            outs[pi].data_mut()[o * block..(o + 1) * block]
                .copy_from_slice(&g.data()[base..base + block]);
            base += block;
        }
    }
    outs
}
