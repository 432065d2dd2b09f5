//! Forward kernels. All loops run in a fixed index order so evaluation is
//! bitwise deterministic for identical inputs.

use std::sync::Arc;

use super::{EngineError, ReduceKind, Result, UnaryKind};
use crate::dct::DctPlan;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) fn ew<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data)
}

pub(crate) fn unary<T: Scalar>(x: &Tensor<T>, kind: &UnaryKind) -> Tensor<T> {
    match kind {
        UnaryKind::Exp => x.map(|v| v.exp()),
        UnaryKind::Log => x.map(|v| v.ln()),
        UnaryKind::Tanh => x.map(|v| v.tanh()),
        UnaryKind::Sigmoid => x.map(|v| v.sigmoid()),
        UnaryKind::Sign => x.map(|v| v.signum_zero()),
    }
}

pub(crate) fn check_axes(op: &'static str, axes: &[usize], rank: usize) -> Result<Vec<usize>> {
    let mut out = axes.to_vec();
    out.sort_unstable();
    out.dedup();
    if out.len() != axes.len() {
        return Err(EngineError::ShapeMismatch {
            op,
            details: format!("duplicate axes in {:?}", axes),
        });
    }
    for &a in &out {
        if a >= rank {
            return Err(EngineError::InvalidAxis { op, axis: a, rank });
        }
    }
    Ok(out)
}

/// Row-major strides of `shape`.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each input axis, the flat stride it contributes in the reduced output
/// (zero for reduced axes). Walking the input row-major with these strides
/// yields the destination index.
pub(crate) fn reduce_out_strides(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let keep: Vec<usize> = (0..shape.len()).filter(|a| !axes.contains(a)).collect();
    let out_shape: Vec<usize> = keep.iter().map(|&a| shape[a]).collect();
    let out_strides_kept = strides_of(&out_shape);
    let mut per_axis = vec![0usize; shape.len()];
    for (i, &a) in keep.iter().enumerate() {
        per_axis[a] = out_strides_kept[i];
    }
    (out_shape, per_axis)
}

/// Calls `f(input_flat, output_flat)` for every element of `shape`, where
/// `output_flat` is formed from `per_axis_stride`.
pub(crate) fn for_each_mapped(shape: &[usize], per_axis_stride: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = shape.len();
    let n: usize = shape.iter().product();
    if n == 0 {
        return;
    }
    let mut coords = vec![0usize; rank];
    let mut out = 0usize;
    for flat in 0..n {
        f(flat, out);
        // odometer increment
        for ax in (0..rank).rev() {
            coords[ax] += 1;
            out += per_axis_stride[ax];
            if coords[ax] < shape[ax] {
                break;
            }
            out -= coords[ax] * per_axis_stride[ax];
            coords[ax] = 0;
        }
    }
}

pub(crate) fn reduce<T: Scalar>(
    x: &Tensor<T>,
    axes: &[usize],
    kind: ReduceKind,
) -> (Tensor<T>, Vec<usize>) {
    let (out_shape, per_axis) = reduce_out_strides(x.shape(), axes);
    let out_n: usize = out_shape.iter().product();
    let group: usize = axes.iter().map(|&a| x.shape()[a]).product();
    let group_t = T::from_usize(group.max(1));
    let xd = x.data();

    match kind {
        ReduceKind::Sum | ReduceKind::Mean => {
            let mut acc = vec![T::ZERO; out_n];
            for_each_mapped(x.shape(), &per_axis, |i, o| acc[o] += xd[i]);
            if kind == ReduceKind::Mean {
                for v in &mut acc {
                    *v /= group_t;
                }
            }
            (Tensor::from_vec(&out_shape, acc), Vec::new())
        }
        ReduceKind::Max => {
            let mut acc = vec![T::ZERO; out_n];
            let mut arg = vec![usize::MAX; out_n];
            for_each_mapped(x.shape(), &per_axis, |i, o| {
                if arg[o] == usize::MAX || xd[i] > acc[o] {
                    acc[o] = xd[i];
                    arg[o] = i;
                }
            });
            (Tensor::from_vec(&out_shape, acc), arg)
        }
        ReduceKind::Var => {
            // biased (1/N) estimator throughout
            let mut mean = vec![T::ZERO; out_n];
            for_each_mapped(x.shape(), &per_axis, |i, o| mean[o] += xd[i]);
            for v in &mut mean {
                *v /= group_t;
            }
            let mut acc = vec![T::ZERO; out_n];
            for_each_mapped(x.shape(), &per_axis, |i, o| {
                let d = xd[i] - mean[o];
                acc[o] += d * d;
            });
            for v in &mut acc {
                *v /= group_t;
            }
            (Tensor::from_vec(&out_shape, acc), Vec::new())
        }
        ReduceKind::L2 => {
            let mut acc = vec![T::ZERO; out_n];
            for_each_mapped(x.shape(), &per_axis, |i, o| acc[o] += xd[i] * xd[i]);
            for v in &mut acc {
                *v = v.sqrt();
            }
            (Tensor::from_vec(&out_shape, acc), Vec::new())
        }
    }
}

pub(crate) fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let shape = x.shape();
    let strides = strides_of(shape);
    let lane = shape[axis];
    let lane_stride = strides[axis];
    let mut out = vec![T::ZERO; x.numel()];
    let xd = x.data();

    // lane bases are all index tuples with the softmax axis coordinate at 0
    let inner = lane_stride;
    let block = lane * lane_stride;
    let pre = x.numel() / block;
    for o in 0..pre {
        for i in 0..inner {
            let base = o * block + i;
            let mut m = xd[base];
            for l in 1..lane {
                m = m.maximum(xd[base + l * lane_stride]);
            }
            let mut z = T::ZERO;
            for l in 0..lane {
                let e = (xd[base + l * lane_stride] - m).exp();
                out[base + l * lane_stride] = e;
                z += e;
            }
            for l in 0..lane {
                out[base + l * lane_stride] /= z;
            }
        }
    }
    Tensor::from_vec(shape, out)
}

/// (batch, m, k, n) dims for a batched matmul after applying transposes.
fn matmul_dims(
    a: &[usize],
    b: &[usize],
    ta: bool,
    tb: bool,
) -> Result<(Vec<usize>, usize, usize, usize)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(EngineError::ShapeMismatch {
            op: "matmul",
            details: format!("operands must be rank >= 2, got {:?} and {:?}", a, b),
        });
    }
    let (ar, ac) = (a[a.len() - 2], a[a.len() - 1]);
    let (br, bc) = (b[b.len() - 2], b[b.len() - 1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if tb { (bc, br) } else { (br, bc) };
    if k != kb {
        return Err(EngineError::ShapeMismatch {
            op: "matmul",
            details: format!("inner dims disagree: {:?} x {:?} (ta={}, tb={})", a, b, ta, tb),
        });
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    if !b_batch.is_empty() && a_batch != b_batch {
        return Err(EngineError::ShapeMismatch {
            op: "matmul",
            details: format!("batch dims disagree: {:?} vs {:?}", a_batch, b_batch),
        });
    }
    Ok((a_batch.to_vec(), m, k, n))
}

/// One `[m,k] x [k,n]` product with transpose flags, accumulating into `out`.
fn matmul_block<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) {
    for i in 0..m {
        for p in 0..k {
            let av = if ta { a[p * m + i] } else { a[i * k + p] };
            if tb {
                let row = &b[p..];
                let o = &mut out[i * n..(i + 1) * n];
                for (j, oj) in o.iter_mut().enumerate() {
                    *oj += av * row[j * k];
                }
            } else {
                let row = &b[p * n..(p + 1) * n];
                let o = &mut out[i * n..(i + 1) * n];
                for (oj, &bv) in o.iter_mut().zip(row.iter()) {
                    *oj += av * bv;
                }
            }
        }
    }
}

pub(crate) fn matmul<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    ta: bool,
    tb: bool,
) -> Result<Tensor<T>> {
    let (batch, m, k, n) = matmul_dims(a.shape(), b.shape(), ta, tb)?;
    let nb: usize = batch.iter().product();
    let shared_b = b.rank() == 2;
    let mut out = vec![T::ZERO; nb * m * n];
    let (ad, bd) = (a.data(), b.data());
    for ib in 0..nb {
        let ablock = &ad[ib * m * k..(ib + 1) * m * k];
        let bblock = if shared_b { bd } else { &bd[ib * k * n..(ib + 1) * k * n] };
        matmul_block(ablock, bblock, &mut out[ib * m * n..(ib + 1) * m * n], m, k, n, ta, tb);
    }
    let mut shape = batch;
    shape.push(m);
    shape.push(n);
    Ok(Tensor::from_vec(&shape, out))
}

pub(crate) fn channel_mix<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 5 || ws.len() != 2 || ws[1] != xs[2] {
        return Err(EngineError::ShapeMismatch {
            op: "channel_mix",
            details: format!("activations {:?} vs weights {:?} (want [O, C] with C = dim 2)", xs, ws),
        });
    }
    let (b, t, c, h, wd) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let o = ws[0];
    let hw = h * wd;
    let mut out = vec![T::ZERO; b * t * o * hw];
    let (xd, wdat) = (x.data(), w.data());
    for bi in 0..b * t {
        let x_frame = &xd[bi * c * hw..(bi + 1) * c * hw];
        let out_frame = &mut out[bi * o * hw..(bi + 1) * o * hw];
        for oi in 0..o {
            let orow = &mut out_frame[oi * hw..(oi + 1) * hw];
            for ci in 0..c {
                let wv = wdat[oi * c + ci];
                let xrow = &x_frame[ci * hw..(ci + 1) * hw];
                for (ov, &xv) in orow.iter_mut().zip(xrow.iter()) {
                    *ov += wv * xv;
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[b, t, o, h, wd], out))
}

pub(crate) fn conv3d_out_shape(
    xs: &[usize],
    ws: &[usize],
    stride: [usize; 3],
    pad: [usize; 3],
) -> Result<[usize; 5]> {
    if xs.len() != 5 || ws.len() != 5 || ws[1] != xs[2] {
        return Err(EngineError::ShapeMismatch {
            op: "conv3d",
            details: format!("activations {:?} vs kernel {:?} (want [O, C, kT, kH, kW])", xs, ws),
        });
    }
    let ext = |inp: usize, k: usize, s: usize, p: usize| -> Result<usize> {
        let padded = inp + 2 * p;
        if padded < k || s == 0 {
            return Err(EngineError::ShapeMismatch {
                op: "conv3d",
                details: format!("kernel extent {} exceeds padded input {} (stride {})", k, padded, s),
            });
        }
        Ok((padded - k) / s + 1)
    };
    Ok([
        xs[0],
        ext(xs[1], ws[2], stride[0], pad[0])?,
        ws[0],
        ext(xs[3], ws[3], stride[1], pad[1])?,
        ext(xs[4], ws[4], stride[2], pad[2])?,
    ])
}

pub(crate) fn conv3d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w.shape();
    let os = conv3d_out_shape(xs, ws, stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [ws[0]] {
            return Err(EngineError::ShapeMismatch {
                op: "conv3d",
                details: format!("bias {:?} vs out channels {}", b.shape(), ws[0]),
            });
        }
    }
    let [bn, to, oc, ho, wo] = os;
    let (t_in, c_in, h_in, w_in) = (xs[1], xs[2], xs[3], xs[4]);
    let (kt, kh, kw) = (ws[2], ws[3], ws[4]);
    let mut out = vec![T::ZERO; bn * to * oc * ho * wo];
    let (xd, wd) = (x.data(), w.data());

    let x_frame = h_in * w_in;
    let x_time = c_in * x_frame;
    let x_sample = t_in * x_time;
    let o_frame = ho * wo;
    let o_time = oc * o_frame;
    let o_sample = to * o_time;
    let w_chan = kt * kh * kw;
    let w_out = c_in * w_chan;

    for b in 0..bn {
        for ot in 0..to {
            for o in 0..oc {
                let obase = b * o_sample + ot * o_time + o * o_frame;
                if let Some(bt) = bias {
                    let bv = bt.data()[o];
                    for v in &mut out[obase..obase + o_frame] {
                        *v = bv;
                    }
                }
                for c in 0..c_in {
                    for dt in 0..kt {
                        let ti = (ot * stride[0] + dt) as isize - pad[0] as isize;
                        if ti < 0 || ti >= t_in as isize {
                            continue;
                        }
                        let xtbase = b * x_sample + ti as usize * x_time + c * x_frame;
                        let wtbase = o * w_out + c * w_chan + dt * kh * kw;
                        for dh in 0..kh {
                            for oh in 0..ho {
                                let hi = (oh * stride[1] + dh) as isize - pad[1] as isize;
                                if hi < 0 || hi >= h_in as isize {
                                    continue;
                                }
                                let xrow = xtbase + hi as usize * w_in;
                                let orow = obase + oh * wo;
                                for dw in 0..kw {
                                    let wv = wd[wtbase + dh * kw + dw];
                                    for ow in 0..wo {
                                        let wi =
                                            (ow * stride[2] + dw) as isize - pad[2] as isize;
                                        if wi < 0 || wi >= w_in as isize {
                                            continue;
                                        }
                                        out[orow + ow] += wv * xd[xrow + wi as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(&os, out))
}

pub(crate) fn check_expand(
    src: &[usize],
    target: &[usize],
    axes_map: &[usize],
) -> Result<()> {
    if axes_map.len() != src.len() {
        return Err(EngineError::ShapeMismatch {
            op: "expand",
            details: format!("axes map {:?} does not cover source rank {}", axes_map, src.len()),
        });
    }
    let mut prev: Option<usize> = None;
    for (i, &ax) in axes_map.iter().enumerate() {
        if ax >= target.len() {
            return Err(EngineError::InvalidAxis { op: "expand", axis: ax, rank: target.len() });
        }
        if let Some(p) = prev {
            if ax <= p {
                return Err(EngineError::ShapeMismatch {
                    op: "expand",
                    details: format!("axes map {:?} must be strictly increasing", axes_map),
                });
            }
        }
        prev = Some(ax);
        if target[ax] != src[i] {
            return Err(EngineError::ShapeMismatch {
                op: "expand",
                details: format!(
                    "source extent {} (axis {}) vs target extent {} (axis {})",
                    src[i], i, target[ax], ax
                ),
            });
        }
    }
    Ok(())
}

/// Per-target-axis strides into the flat source, zero for replicated axes.
pub(crate) fn expand_src_strides(
    src: &[usize],
    target_rank: usize,
    axes_map: &[usize],
) -> Vec<usize> {
    let s_strides = strides_of(src);
    let mut per_axis = vec![0usize; target_rank];
    for (i, &ax) in axes_map.iter().enumerate() {
        per_axis[ax] = s_strides[i];
    }
    per_axis
}

pub(crate) fn expand<T: Scalar>(x: &Tensor<T>, target: &[usize], axes_map: &[usize]) -> Tensor<T> {
    let per_axis = expand_src_strides(x.shape(), target.len(), axes_map);
    let mut out = vec![T::ZERO; target.iter().product()];
    let xd = x.data();
    for_each_mapped(target, &per_axis, |flat, src| out[flat] = xd[src]);
    Tensor::from_vec(target, out)
}

pub(crate) fn permute<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(EngineError::ShapeMismatch {
            op: "permute",
            details: format!("{:?} is not a permutation of rank {}", perm, rank),
        });
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let out_strides = strides_of(&out_shape);
    // walking the source row-major, axis `p` of the source is axis
    // `perm.index_of(p)` of the target
    let mut per_axis = vec![0usize; rank];
    for (oi, &p) in perm.iter().enumerate() {
        per_axis[p] = out_strides[oi];
    }
    let mut out = vec![T::ZERO; x.numel()];
    let xd = x.data();
    for_each_mapped(x.shape(), &per_axis, |src, dst| out[dst] = xd[src]);
    Ok(Tensor::from_vec(&out_shape, out))
}

pub(crate) fn slice<T: Scalar>(
    x: &Tensor<T>,
    axis: usize,
    start: usize,
    len: usize,
) -> Result<Tensor<T>> {
    let rank = x.rank();
    if axis >= rank {
        return Err(EngineError::InvalidAxis { op: "slice", axis, rank });
    }
    if start + len > x.shape()[axis] || len == 0 {
        return Err(EngineError::ShapeMismatch {
            op: "slice",
            details: format!(
                "range {}..{} out of bounds for axis {} of {:?}",
                start,
                start + len,
                axis,
                x.shape()
            ),
        });
    }
    let mut out_shape = x.shape().to_vec();
    out_shape[axis] = len;
    let strides = strides_of(x.shape());
    let inner = strides[axis];
    let outer: usize = x.shape()[..axis].iter().product();
    let block_in = x.shape()[axis] * inner;
    let block_out = len * inner;
    let mut out = vec![T::ZERO; out_shape.iter().product()];
    let xd = x.data();
    for o in 0..outer {
        let src = o * block_in + start * inner;
        out[o * block_out..(o + 1) * block_out].copy_from_slice(&xd[src..src + block_out]);
    }
    Ok(Tensor::from_vec(&out_shape, out))
}

pub(crate) fn concat<T: Scalar>(xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    if xs.is_empty() {
        return Err(EngineError::ShapeMismatch { op: "concat", details: "no inputs".into() });
    }
    let rank = xs[0].rank();
    if axis >= rank {
        return Err(EngineError::InvalidAxis { op: "concat", axis, rank });
    }
    for x in xs {
        if x.rank() != rank
            || (0..rank).any(|a| a != axis && x.shape()[a] != xs[0].shape()[a])
        {
            return Err(EngineError::ShapeMismatch {
                op: "concat",
                details: format!(
                    "shapes {:?} differ outside axis {}",
                    xs.iter().map(|x| x.shape().to_vec()).collect::<Vec<_>>(),
                    axis
                ),
            });
        }
    }
    let total: usize = xs.iter().map(|x| x.shape()[axis]).sum();
    let mut out_shape = xs[0].shape().to_vec();
    out_shape[axis] = total;
    let inner: usize = xs[0].shape()[axis + 1..].iter().product();
    let outer: usize = xs[0].shape()[..axis].iter().product();
    let mut out = vec![T::ZERO; out_shape.iter().product()];
    let out_block = total * inner;
    let mut offset = 0usize;
    for x in xs {
        let block = x.shape()[axis] * inner;
        let xd = x.data();
        for o in 0..outer {
            out[o * out_block + offset..o * out_block + offset + block]
                .copy_from_slice(&xd[o * block..(o + 1) * block]);
        }
        offset += block;
    }
    Ok(Tensor::from_vec(&out_shape, out))
}

pub(crate) fn dct_frames<T: Scalar>(
    x: &Tensor<T>,
    plan: &Arc<DctPlan<T>>,
    inverse: bool,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.len() != 5 || xs[3] != plan.height() || xs[4] != plan.width() {
        return Err(EngineError::ShapeMismatch {
            op: "dct_frames",
            details: format!(
                "input {:?} vs plan {}x{}",
                xs,
                plan.height(),
                plan.width()
            ),
        });
    }
    let (h, w) = (plan.height(), plan.width());
    let frames = x.numel() / (h * w);
    let mut out = vec![T::ZERO; x.numel()];
    for f in 0..frames {
        let src = &x.data()[f * h * w..(f + 1) * h * w];
        let dst = &mut out[f * h * w..(f + 1) * h * w];
        plan.transform_frame(src, dst, inverse);
    }
    Ok(Tensor::from_vec(xs, out))
}
