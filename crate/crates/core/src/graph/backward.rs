//! Reverse pass over the tape.

use std::collections::BTreeMap;

use super::ops;
use super::{Graph, LeafKind, NodeId, Op, ReduceKind, Result, UnaryKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn add_into<T: Scalar>(slot: &mut Option<Tensor<T>>, shape: &[usize], mut add: impl FnMut(&mut [T])) {
    let buf = slot.get_or_insert_with(|| Tensor::zeros(shape));
    add(buf.data_mut());
}

pub(crate) fn run<T: Scalar>(g: &mut Graph<T>, out: NodeId) -> Result<BTreeMap<String, Tensor<T>>> {
    g.grads = (0..g.nodes.len()).map(|_| None).collect();
    let seed_shape = g.nodes[out.0].value.shape().to_vec();
    g.grads[out.0] = Some(Tensor::full(&seed_shape, T::ONE));

    for i in (0..=out.0).rev() {
        if !g.nodes[i].needs_grad {
            continue;
        }
        let Some(dy) = g.grads[i].take() else { continue };
        step(g, i, &dy);
        g.grads[i] = Some(dy);
    }

    let mut by_param: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    for (i, node) in g.nodes.iter().enumerate() {
        if let Op::Leaf(LeafKind::Param { name }) = &node.op {
            let grad = g.grads[i]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
            match by_param.get_mut(name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(grad.data()) {
                        *a += *b;
                    }
                }
                None => {
                    by_param.insert(name.clone(), grad);
                }
            }
        }
    }
    Ok(by_param)
}

fn step<T: Scalar>(g: &mut Graph<T>, i: usize, dy: &Tensor<T>) {
    // Tape order is topological: inputs of node i have indices < i, so the
    // split between the taken dy and the slots below is alias-free.
    macro_rules! needs {
        ($id:expr) => {
            g.nodes[$id.0].needs_grad
        };
    }

    match &g.nodes[i].op {
        Op::Leaf(_) => {}
        Op::Add(a, b) => {
            let (a, b) = (*a, *b);
            if needs!(a) {
                add_into(&mut g.grads[a.0], dy.shape(), |buf| {
                    for (o, &d) in buf.iter_mut().zip(dy.data()) {
                        *o += d;
                    }
                });
            }
            if needs!(b) {
                add_into(&mut g.grads[b.0], dy.shape(), |buf| {
                    for (o, &d) in buf.iter_mut().zip(dy.data()) {
                        *o += d;
                    }
                });
            }
        }
        Op::Sub(a, b) => {
            let (a, b) = (*a, *b);
            if needs!(a) {
                add_into(&mut g.grads[a.0], dy.shape(), |buf| {
                    for (o, &d) in buf.iter_mut().zip(dy.data()) {
                        *o += d;
                    }
                });
            }
            if needs!(b) {
                add_into(&mut g.grads[b.0], dy.shape(), |buf| {
                    for (o, &d) in buf.iter_mut().zip(dy.data()) {
                        *o -= d;
                    }
                });
            }
        }
        Op::Mul(a, b) => {
            let (a, b) = (*a, *b);
            if needs!(a) {
                let bv = g.nodes[b.0].value.data().to_vec();
                add_into(&mut g.grads[a.0], dy.shape(), |buf| {
                    for ((o, &d), &v) in buf.iter_mut().zip(dy.data()).zip(bv.iter()) {
                        *o += d * v;
                    }
                });
            }
            if needs!(b) {
                let av = g.nodes[a.0].value.data().to_vec();
                add_into(&mut g.grads[b.0], dy.shape(), |buf| {
                    for ((o, &d), &v) in buf.iter_mut().zip(dy.data()).zip(av.iter()) {
                        *o += d * v;
                    }
                });
            }
        }
        Op::Div(a, b) => {
            let (a, b) = (*a, *b);
            let bv = g.nodes[b.0].value.data().to_vec();
            if needs!(a) {
                add_into(&mut g.grads[a.0], dy.shape(), |buf| {
                    for ((o, &d), &v) in buf.iter_mut().zip(dy.data()).zip(bv.iter()) {
                        *o += d / v;
                    }
                });
            }
            if needs!(b) {
                let av = g.nodes[a.0].value.data().to_vec();
                add_into(&mut g.grads[b.0], dy.shape(), |buf| {
                    for (((o, &d), &bb), &aa) in
                        buf.iter_mut().zip(dy.data()).zip(bv.iter()).zip(av.iter())
                    {
                        *o -= d * aa / (bb * bb);
                    }
                });
            }
        }
        Op::MatMul { a, b, ta, tb } => {
            let (a, b, ta, tb) = (*a, *b, *ta, *tb);
            matmul_backward(g, i, a, b, ta, tb, dy);
        }
        Op::ChannelMix { x, w } => {
            let (x, w) = (*x, *w);
            channel_mix_backward(g, x, w, dy);
        }
        Op::Conv3d { x, w, bias, stride, pad } => {
            let (x, w, bias, stride, pad) = (*x, *w, *bias, *stride, *pad);
            conv3d_backward(g, x, w, bias, stride, pad, dy);
        }
        Op::Reduce { x, axes, kind, argmax } => {
            let x = *x;
            let kind = *kind;
            let axes = axes.clone();
            let argmax = argmax.clone();
            if needs!(x) {
                reduce_backward(g, i, x, &axes, kind, &argmax, dy);
            }
        }
        Op::Unary { x, kind } => {
            let x = *x;
            let kind = kind.clone();
            if !needs!(x) {
                return;
            }
            match kind {
                UnaryKind::Exp => {
                    let yv = g.nodes[i].value.data().to_vec();
                    add_into(&mut g.grads[x.0], dy.shape(), |buf| {
                        for ((o, &d), &y) in buf.iter_mut().zip(dy.data()).zip(yv.iter()) {
                            *o += d * y;
                        }
                    });
                }
                UnaryKind::Log => {
                    let xv = g.nodes[x.0].value.data().to_vec();
                    add_into(&mut g.grads[x.0], dy.shape(), |buf| {
                        for ((o, &d), &v) in buf.iter_mut().zip(dy.data()).zip(xv.iter()) {
                            *o += d / v;
                        }
                    });
                }
                UnaryKind::Tanh => {
                    let yv = g.nodes[i].value.data().to_vec();
                    add_into(&mut g.grads[x.0], dy.shape(), |buf| {
                        for ((o, &d), &y) in buf.iter_mut().zip(dy.data()).zip(yv.iter()) {
                            *o += d * (T::ONE - y * y);
                        }
                    });
                }
                UnaryKind::Sigmoid => {
                    let yv = g.nodes[i].value.data().to_vec();
                    add_into(&mut g.grads[x.0], dy.shape(), |buf| {
                        for ((o, &d), &y) in buf.iter_mut().zip(dy.data()).zip(yv.iter()) {
                            *o += d * y * (T::ONE - y);
                        }
                    });
                }
                // piecewise constant, straight-zero convention
                UnaryKind::Sign => {}
            }
        }
        Op::Softmax { x, axis } => {
            let (x, axis) = (*x, *axis);
            if !needs!(x) {
                return;
            }
            let y = g.nodes[i].value.clone();
            let shape = y.shape().to_vec();
            let strides = ops::strides_of(&shape);
            let lane = shape[axis];
            let lane_stride = strides[axis];
            let inner = lane_stride;
            let block = lane * lane_stride;
            let pre = y.numel() / block;
            add_into(&mut g.grads[x.0], &shape, |buf| {
                let yd = y.data();
                let dyd = dy.data();
                for o in 0..pre {
                    for ii in 0..inner {
                        let base = o * block + ii;
                        let mut s = T::ZERO;
                        for l in 0..lane {
                            let p = base + l * lane_stride;
                            s += dyd[p] * yd[p];
                        }
                        for l in 0..lane {
                            let p = base + l * lane_stride;
                            buf[p] += yd[p] * (dyd[p] - s);
                        }
                    }
                }
            });
        }
        Op::AffineConst { x, mul } => {
            let (x, mul) = (*x, *mul);
            if needs!(x) {
                add_into(&mut g.grads[x.0], dy.shape(), |buf| {
                    for (o, &d) in buf.iter_mut().zip(dy.data()) {
                        *o += mul * d;
                    }
                });
            }
        }
        Op::Expand { x, axes_map } => {
            let x = *x;
            let axes_map = axes_map.clone();
            if !needs!(x) {
                return;
            }
            let src_shape = g.nodes[x.0].value.shape().to_vec();
            let target_shape = g.nodes[i].value.shape().to_vec();
            let per_axis = ops::expand_src_strides(&src_shape, target_shape.len(), &axes_map);
            add_into(&mut g.grads[x.0], &src_shape, |buf| {
                let dyd = dy.data();
                ops::for_each_mapped(&target_shape, &per_axis, |flat, src| {
                    buf[src] += dyd[flat];
                });
            });
        }
        Op::Reshape { x } => {
            let x = *x;
            if needs!(x) {
                let src_shape = g.nodes[x.0].value.shape().to_vec();
                add_into(&mut g.grads[x.0], &src_shape, |buf| {
                    for (o, &d) in buf.iter_mut().zip(dy.data()) {
                        *o += d;
                    }
                });
            }
        }
        Op::Permute { x, perm } => {
            let x = *x;
            let perm = perm.clone();
            if !needs!(x) {
                return;
            }
            let mut inv = vec![0usize; perm.len()];
            for (oi, &p) in perm.iter().enumerate() {
                inv[p] = oi;
            }
            let back = ops::permute(dy, &inv).expect("inverse permutation is valid");
            let src_shape = g.nodes[x.0].value.shape().to_vec();
            add_into(&mut g.grads[x.0], &src_shape, |buf| {
                for (o, &d) in buf.iter_mut().zip(back.data()) {
                    *o += d;
                }
            });
        }
        Op::Slice { x, axis, start } => {
            let (x, axis, start) = (*x, *axis, *start);
            if !needs!(x) {
                return;
            }
            let src_shape = g.nodes[x.0].value.shape().to_vec();
            let out_shape = g.nodes[i].value.shape().to_vec();
            let strides = ops::strides_of(&src_shape);
            let inner = strides[axis];
            let len = out_shape[axis];
            let outer: usize = src_shape[..axis].iter().product();
            let block_in = src_shape[axis] * inner;
            let block_out = len * inner;
            add_into(&mut g.grads[x.0], &src_shape, |buf| {
                let dyd = dy.data();
                for o in 0..outer {
                    let dst = o * block_in + start * inner;
                    for j in 0..block_out {
                        buf[dst + j] += dyd[o * block_out + j];
                    }
                }
            });
        }
        Op::Concat { xs, axis } => {
            let xs = xs.clone();
            let axis = *axis;
            let out_shape = g.nodes[i].value.shape().to_vec();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let outer: usize = out_shape[..axis].iter().product();
            let out_block = out_shape[axis] * inner;
            let mut offset = 0usize;
            for xid in xs {
                let src_shape = g.nodes[xid.0].value.shape().to_vec();
                let block = src_shape[axis] * inner;
                if g.nodes[xid.0].needs_grad {
                    add_into(&mut g.grads[xid.0], &src_shape, |buf| {
                        let dyd = dy.data();
                        for o in 0..outer {
                            for j in 0..block {
                                buf[o * block + j] += dyd[o * out_block + offset + j];
                            }
                        }
                    });
                }
                offset += block;
            }
        }
        Op::DctFrames { x, plan, inverse } => {
            let x = *x;
            let plan = std::sync::Arc::clone(plan);
            let inverse = *inverse;
            if !needs!(x) {
                return;
            }
            // orthonormal transform: adjoint is the opposite direction
            let back = ops::dct_frames(dy, &plan, !inverse).expect("gradient shape matches");
            let src_shape = g.nodes[x.0].value.shape().to_vec();
            add_into(&mut g.grads[x.0], &src_shape, |buf| {
                for (o, &d) in buf.iter_mut().zip(back.data()) {
                    *o += d;
                }
            });
        }
    }
}

fn reduce_backward<T: Scalar>(
    g: &mut Graph<T>,
    i: usize,
    x: NodeId,
    axes: &[usize],
    kind: ReduceKind,
    argmax: &[usize],
    dy: &Tensor<T>,
) {
    let src_shape = g.nodes[x.0].value.shape().to_vec();
    let (_, per_axis) = ops::reduce_out_strides(&src_shape, axes);
    let group: usize = axes.iter().map(|&a| src_shape[a]).product();
    let group_t = T::from_usize(group.max(1));

    match kind {
        ReduceKind::Sum => {
            let dyd = dy.data().to_vec();
            add_into(&mut g.grads[x.0], &src_shape, |buf| {
                ops::for_each_mapped(&src_shape, &per_axis, |flat, o| buf[flat] += dyd[o]);
            });
        }
        ReduceKind::Mean => {
            let dyd: Vec<T> = dy.data().iter().map(|&d| d / group_t).collect();
            add_into(&mut g.grads[x.0], &src_shape, |buf| {
                ops::for_each_mapped(&src_shape, &per_axis, |flat, o| buf[flat] += dyd[o]);
            });
        }
        ReduceKind::Max => {
            let dyd = dy.data().to_vec();
            add_into(&mut g.grads[x.0], &src_shape, |buf| {
                for (o, &src) in argmax.iter().enumerate() {
                    buf[src] += dyd[o];
                }
            });
        }
        ReduceKind::Var => {
            // recompute the per-group mean
            let (mean, _) = ops::reduce(&g.nodes[x.0].value, axes, ReduceKind::Mean);
            let xv = g.nodes[x.0].value.data().to_vec();
            let dyd = dy.data().to_vec();
            let two_over_n = (T::ONE + T::ONE) / group_t;
            let meand = mean.data().to_vec();
            add_into(&mut g.grads[x.0], &src_shape, |buf| {
                ops::for_each_mapped(&src_shape, &per_axis, |flat, o| {
                    buf[flat] += dyd[o] * two_over_n * (xv[flat] - meand[o]);
                });
            });
        }
        ReduceKind::L2 => {
            let y = g.nodes[i].value.data().to_vec();
            let xv = g.nodes[x.0].value.data().to_vec();
            let dyd = dy.data().to_vec();
            add_into(&mut g.grads[x.0], &src_shape, |buf| {
                ops::for_each_mapped(&src_shape, &per_axis, |flat, o| {
                    // zero-norm kink: define the subgradient as zero
                    if y[o] != T::ZERO {
                        buf[flat] += dyd[o] * xv[flat] / y[o];
                    }
                });
            });
        }
    }
}

fn matmul_backward<T: Scalar>(
    g: &mut Graph<T>,
    _i: usize,
    a: NodeId,
    b: NodeId,
    ta: bool,
    tb: bool,
    dy: &Tensor<T>,
) {
    let a_shape = g.nodes[a.0].value.shape().to_vec();
    let b_shape = g.nodes[b.0].value.shape().to_vec();
    let dy_shape = dy.shape().to_vec();
    let (m, n) = (dy_shape[dy_shape.len() - 2], dy_shape[dy_shape.len() - 1]);
    let k = if ta { a_shape[a_shape.len() - 2] } else { a_shape[a_shape.len() - 1] };
    let nb: usize = dy_shape[..dy_shape.len() - 2].iter().product();
    let shared_b = b_shape.len() == 2;

    if g.nodes[a.0].needs_grad {
        let bv = g.nodes[b.0].value.data().to_vec();
        add_into(&mut g.grads[a.0], &a_shape, |buf| {
            let dyd = dy.data();
            for ib in 0..nb {
                let dblock = &dyd[ib * m * n..(ib + 1) * m * n];
                let bblock = if shared_b { &bv[..] } else { &bv[ib * k * n..(ib + 1) * k * n] };
                let ablock = &mut buf[ib * m * k..(ib + 1) * m * k];
                if !ta {
                    // dA [m,k] += dY . op_b(B)^T
                    if !tb {
                        block(dblock, bblock, ablock, m, n, k, false, true);
                    } else {
                        block(dblock, bblock, ablock, m, n, k, false, false);
                    }
                } else {
                    // dA [k,m] += op_b(B) . dY^T
                    if !tb {
                        block(bblock, dblock, ablock, k, n, m, false, true);
                    } else {
                        block(bblock, dblock, ablock, k, n, m, true, true);
                    }
                }
            }
        });
    }
    if g.nodes[b.0].needs_grad {
        let av = g.nodes[a.0].value.data().to_vec();
        add_into(&mut g.grads[b.0], &b_shape, |buf| {
            let dyd = dy.data();
            for ib in 0..nb {
                let dblock = &dyd[ib * m * n..(ib + 1) * m * n];
                let ablock = &av[ib * m * k..(ib + 1) * m * k];
                let bbuf: &mut [T] =
                    if shared_b { &mut buf[..] } else { &mut buf[ib * k * n..(ib + 1) * k * n] };
                if !tb {
                    // dB [k,n] += op_a(A)^T . dY
                    if !ta {
                        block(ablock, dblock, bbuf, k, m, n, true, false);
                    } else {
                        block(ablock, dblock, bbuf, k, m, n, false, false);
                    }
                } else {
                    // dB [n,k] += dY^T . op_a(A)
                    if !ta {
                        block(dblock, ablock, bbuf, n, m, k, true, false);
                    } else {
                        block(dblock, ablock, bbuf, n, m, k, true, true);
                    }
                }
            }
        });
    }
}

/// `out[m,n] += op_a(A) . op_b(B)` where the logical product dims are
/// `m, k, n` and the physical layouts follow the transpose flags.
fn block<T: Scalar>(
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
            for j in 0..n {
                let bv = if tb { b[j * k + p] } else { b[p * n + j] };
                out[i * n + j] += av * bv;
            }
        }
    }
}

fn channel_mix_backward<T: Scalar>(g: &mut Graph<T>, x: NodeId, w: NodeId, dy: &Tensor<T>) {
    let xs = g.nodes[x.0].value.shape().to_vec();
    let ws = g.nodes[w.0].value.shape().to_vec();
    let (bt, c, hw) = (xs[0] * xs[1], xs[2], xs[3] * xs[4]);
    let o = ws[0];

    if g.nodes[x.0].needs_grad {
        let wv = g.nodes[w.0].value.data().to_vec();
        add_into(&mut g.grads[x.0], &xs, |buf| {
            let dyd = dy.data();
            for f in 0..bt {
                let d_frame = &dyd[f * o * hw..(f + 1) * o * hw];
                let x_frame = &mut buf[f * c * hw..(f + 1) * c * hw];
                for oi in 0..o {
                    let drow = &d_frame[oi * hw..(oi + 1) * hw];
                    for ci in 0..c {
                        let wvv = wv[oi * c + ci];
                        let xrow = &mut x_frame[ci * hw..(ci + 1) * hw];
                        for (xv, &dv) in xrow.iter_mut().zip(drow.iter()) {
                            *xv += wvv * dv;
                        }
                    }
                }
            }
        });
    }
    if g.nodes[w.0].needs_grad {
        let xv = g.nodes[x.0].value.data().to_vec();
        add_into(&mut g.grads[w.0], &ws, |buf| {
            let dyd = dy.data();
            for f in 0..bt {
                let d_frame = &dyd[f * o * hw..(f + 1) * o * hw];
                let x_frame = &xv[f * c * hw..(f + 1) * c * hw];
                for oi in 0..o {
                    let drow = &d_frame[oi * hw..(oi + 1) * hw];
                    for ci in 0..c {
                        let xrow = &x_frame[ci * hw..(ci + 1) * hw];
                        let mut s = T::ZERO;
                        for (&dv, &xvv) in drow.iter().zip(xrow.iter()) {
                            s += dv * xvv;
                        }
                        buf[oi * c + ci] += s;
                    }
                }
            }
        });
    }
}

#[allow(clippy::too_many_arguments)]
fn conv3d_backward<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    w: NodeId,
    bias: Option<NodeId>,
    stride: [usize; 3],
    pad: [usize; 3],
    dy: &Tensor<T>,
) {
    let xs = g.nodes[x.0].value.shape().to_vec();
    let ws = g.nodes[w.0].value.shape().to_vec();
    let os = dy.shape().to_vec();
    let (bn, to, oc, ho, wo) = (os[0], os[1], os[2], os[3], os[4]);
    let (t_in, c_in, h_in, w_in) = (xs[1], xs[2], xs[3], xs[4]);
    let (kt, kh, kw) = (ws[2], ws[3], ws[4]);

    let x_frame = h_in * w_in;
    let x_time = c_in * x_frame;
    let x_sample = t_in * x_time;
    let o_frame = ho * wo;
    let o_time = oc * o_frame;
    let o_sample = to * o_time;
    let w_chan = kt * kh * kw;
    let w_out = c_in * w_chan;

    if let Some(bid) = bias {
        if g.nodes[bid.0].needs_grad {
            add_into(&mut g.grads[bid.0], &[oc], |buf| {
                let dyd = dy.data();
                for b in 0..bn {
                    for ot in 0..to {
                        for o in 0..oc {
                            let obase = b * o_sample + ot * o_time + o * o_frame;
                            let mut s = T::ZERO;
                            for v in &dyd[obase..obase + o_frame] {
                                s += *v;
                            }
                            buf[o] += s;
                        }
                    }
                }
            });
        }
    }

    let need_x = g.nodes[x.0].needs_grad;
    let need_w = g.nodes[w.0].needs_grad;
    if !need_x && !need_w {
        return;
    }

    let xv = g.nodes[x.0].value.data().to_vec();
    let wv = g.nodes[w.0].value.data().to_vec();
    let mut dx = if need_x { vec![T::ZERO; xv.len()] } else { Vec::new() };
    let mut dw = if need_w { vec![T::ZERO; wv.len()] } else { Vec::new() };
    let dyd = dy.data();

    for b in 0..bn {
        for ot in 0..to {
            for o in 0..oc {
                let obase = b * o_sample + ot * o_time + o * o_frame;
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
                                for dwk in 0..kw {
                                    let wvv = wv[wtbase + dh * kw + dwk];
                                    let widx = wtbase + dh * kw + dwk;
                                    for ow in 0..wo {
                                        let wi =
                                            (ow * stride[2] + dwk) as isize - pad[2] as isize;
                                        if wi < 0 || wi >= w_in as isize {
                                            continue;
                                        }
                                        let d = dyd[orow + ow];
                                        if need_x {
                                            dx[xrow + wi as usize] += wvv * d;
                                        }
                                        if need_w {
                                            dw[widx] += d * xv[xrow + wi as usize];
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

    if need_x {
        add_into(&mut g.grads[x.0], &xs, |buf| {
            for (o, &d) in buf.iter_mut().zip(dx.iter()) {
                *o += d;
            }
        });
    }
    if need_w {
        add_into(&mut g.grads[w.0], &ws, |buf| {
            for (o, &d) in buf.iter_mut().zip(dw.iter()) {
                *o += d;
            }
        });
    }
}
