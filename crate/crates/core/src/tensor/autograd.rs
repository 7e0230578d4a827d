use super::conv;
use super::ops;
use super::{Element, Tensor};
use crate::error::{Error, Result};
use std::cell::Cell;
use std::collections::{HashMap, HashSet};

thread_local! {
    static NO_GRAD_DEPTH: Cell<u32> = const { Cell::new(0) };
}

/// True unless inside a [`no_grad`] scope on this thread.
pub fn grad_enabled() -> bool {
    NO_GRAD_DEPTH.with(|d| d.get() == 0)
}

/// Runs `f` with operation recording disabled: tensors produced inside are
/// leaves and carry no graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Guard;
    impl Drop for Guard {
        fn drop(&mut self) {
            NO_GRAD_DEPTH.with(|d| d.set(d.get() - 1));
        }
    }
    NO_GRAD_DEPTH.with(|d| d.set(d.get() + 1));
    let _g = Guard;
    f()
}

/// Recorded producing operation of a tensor. Each variant owns handles to
/// its parents plus whatever the backward formula needs.
pub(crate) enum Op<E: Element> {
    Leaf,
    Add(Tensor<E>, Tensor<E>),
    Sub(Tensor<E>, Tensor<E>),
    Mul(Tensor<E>, Tensor<E>),
    Div(Tensor<E>, Tensor<E>),
    AddScalar(Tensor<E>),
    MulScalar(Tensor<E>, E),
    Neg(Tensor<E>),
    Exp(Tensor<E>),
    Relu(Tensor<E>),
    Sigmoid(Tensor<E>),
    Tanh(Tensor<E>),
    Matmul {
        a: Tensor<E>,
        b: Tensor<E>,
    },
    Softmax {
        x: Tensor<E>,
        axis: usize,
    },
    LayerNorm {
        x: Tensor<E>,
        gain: Tensor<E>,
        bias: Tensor<E>,
        xhat: Vec<E>,
        inv_std: Vec<E>,
    },
    Conv2d {
        x: Tensor<E>,
        w: Tensor<E>,
        bias: Option<Tensor<E>>,
        stride: usize,
        pad: usize,
        /// im2col matrix captured at forward, reused for the weight grad
        cols: Vec<E>,
    },
    ConvTranspose2d {
        x: Tensor<E>,
        w: Tensor<E>,
        bias: Option<Tensor<E>>,
        stride: usize,
        pad: usize,
    },
    StraightThrough {
        reference: Tensor<E>,
    },
    SumAll(Tensor<E>),
    MeanAll(Tensor<E>),
    SumAxis {
        x: Tensor<E>,
        axis: usize,
    },
    MeanAxis {
        x: Tensor<E>,
        axis: usize,
    },
    Reshape(Tensor<E>),
    Transpose {
        x: Tensor<E>,
        a: usize,
        b: usize,
    },
    Concat {
        parts: Vec<Tensor<E>>,
        axis: usize,
    },
    Slice {
        x: Tensor<E>,
        axis: usize,
        start: usize,
    },
    Broadcast(Tensor<E>),
}

impl<E: Element> Op<E> {
    pub(crate) fn parents(&self) -> Vec<&Tensor<E>> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![a, b],
            AddScalar(x) | MulScalar(x, _) | Neg(x) | Exp(x) | Relu(x) | Sigmoid(x)
            | Tanh(x) => vec![x],
            Matmul { a, b } => vec![a, b],
            Softmax { x, .. } => vec![x],
            LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Conv2d { x, w, bias, .. } | ConvTranspose2d { x, w, bias, .. } => {
                let mut v = vec![x, w];
                if let Some(b) = bias {
                    v.push(b);
                }
                v
            }
            StraightThrough { reference } => vec![reference],
            SumAll(x) | MeanAll(x) => vec![x],
            SumAxis { x, .. } | MeanAxis { x, .. } => vec![x],
            Reshape(x) | Broadcast(x) => vec![x],
            Transpose { x, .. } => vec![x],
            Concat { parts, .. } => parts.iter().collect(),
            Slice { x, .. } => vec![x],
        }
    }

    pub(crate) fn any_parent_requires_grad(&self) -> bool {
        self.parents().iter().any(|p| p.requires_grad())
    }
}

/// Reverse-mode sweep from a scalar loss. Gradients accumulate additively
/// into every reachable variable leaf; each graph node is visited exactly
/// once, after all of its consumers.
pub fn backward<E: Element>(loss: &Tensor<E>) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::Autograd(format!(
            "backward requires a scalar loss, got shape {}",
            loss.shape()
        )));
    }
    if !loss.requires_grad() {
        return Err(Error::Autograd(
            "loss is not connected to any variable".into(),
        ));
    }

    // Post-order DFS; reverse finishing order puts consumers before inputs.
    enum Frame<E: Element> {
        Enter(Tensor<E>),
        Exit(Tensor<E>),
    }
    let mut topo: Vec<Tensor<E>> = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack = vec![Frame::Enter(loss.clone())];
    while let Some(frame) = stack.pop() {
        match frame {
            Frame::Enter(t) => {
                if !visited.insert(t.id()) {
                    continue;
                }
                stack.push(Frame::Exit(t.clone()));
                for p in t.op().parents() {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push(Frame::Enter(p.clone()));
                    }
                }
            }
            Frame::Exit(t) => topo.push(t),
        }
    }

    let mut grads: HashMap<u64, Vec<E>> = HashMap::new();
    grads.insert(loss.id(), vec![E::one()]);

    for t in topo.iter().rev() {
        let g = match grads.remove(&t.id()) {
            Some(g) => g,
            None => continue,
        };
        if t.is_var() {
            t.accumulate_grad(&g);
            continue;
        }
        backprop_step(t, &g, &mut |parent: &Tensor<E>, contrib: Vec<E>| {
            debug_assert_eq!(contrib.len(), parent.numel());
            grads
                .entry(parent.id())
                .and_modify(|acc| {
                    for (a, c) in acc.iter_mut().zip(&contrib) {
                        *a += *c;
                    }
                })
                .or_insert(contrib);
        });
    }
    Ok(())
}

/// Routes the upstream gradient `g` of node `t` to each parent that
/// requires grad.
fn backprop_step<E: Element>(
    t: &Tensor<E>,
    g: &[E],
    emit: &mut dyn FnMut(&Tensor<E>, Vec<E>),
) {
    use Op::*;
    match t.op() {
        Leaf => {}
        Add(a, b) => {
            if a.requires_grad() {
                emit(a, ops::reduce_to_shape(g, t.dims(), a.shape()));
            }
            if b.requires_grad() {
                emit(b, ops::reduce_to_shape(g, t.dims(), b.shape()));
            }
        }
        Sub(a, b) => {
            if a.requires_grad() {
                emit(a, ops::reduce_to_shape(g, t.dims(), a.shape()));
            }
            if b.requires_grad() {
                let neg: Vec<E> = g.iter().map(|v| -*v).collect();
                emit(b, ops::reduce_to_shape(&neg, t.dims(), b.shape()));
            }
        }
        Mul(a, b) => {
            if a.requires_grad() {
                let full = ops::zip_broadcast_raw(g, t.dims(), &b.data(), b.dims(), |g, b| g * b);
                emit(a, ops::reduce_to_shape(&full, t.dims(), a.shape()));
            }
            if b.requires_grad() {
                let full = ops::zip_broadcast_raw(g, t.dims(), &a.data(), a.dims(), |g, a| g * a);
                emit(b, ops::reduce_to_shape(&full, t.dims(), b.shape()));
            }
        }
        Div(a, b) => {
            if a.requires_grad() {
                let full =
                    ops::zip_broadcast_raw(g, t.dims(), &b.data(), b.dims(), |g, b| g / b);
                emit(a, ops::reduce_to_shape(&full, t.dims(), a.shape()));
            }
            if b.requires_grad() {
                let y = t.data();
                let gy: Vec<E> = g.iter().zip(y.iter()).map(|(g, y)| *g * *y).collect();
                let full =
                    ops::zip_broadcast_raw(&gy, t.dims(), &b.data(), b.dims(), |gy, b| -(gy / b));
                emit(b, ops::reduce_to_shape(&full, t.dims(), b.shape()));
            }
        }
        AddScalar(x) => {
            if x.requires_grad() {
                emit(x, g.to_vec());
            }
        }
        MulScalar(x, s) => {
            if x.requires_grad() {
                emit(x, g.iter().map(|v| *v * *s).collect());
            }
        }
        Neg(x) => {
            if x.requires_grad() {
                emit(x, g.iter().map(|v| -*v).collect());
            }
        }
        Exp(x) => {
            if x.requires_grad() {
                let y = t.data();
                emit(x, g.iter().zip(y.iter()).map(|(g, y)| *g * *y).collect());
            }
        }
        Relu(x) => {
            if x.requires_grad() {
                let xd = x.data();
                emit(
                    x,
                    g.iter()
                        .zip(xd.iter())
                        .map(|(g, x)| if *x > E::zero() { *g } else { E::zero() })
                        .collect(),
                );
            }
        }
        Sigmoid(x) => {
            if x.requires_grad() {
                let y = t.data();
                emit(
                    x,
                    g.iter()
                        .zip(y.iter())
                        .map(|(g, y)| *g * *y * (E::one() - *y))
                        .collect(),
                );
            }
        }
        Tanh(x) => {
            if x.requires_grad() {
                let y = t.data();
                emit(
                    x,
                    g.iter()
                        .zip(y.iter())
                        .map(|(g, y)| *g * (E::one() - *y * *y))
                        .collect(),
                );
            }
        }
        Matmul { a, b } => ops::matmul_backward(a, b, t.dims(), g, emit),
        Softmax { x, axis } => {
            if x.requires_grad() {
                let y = t.data();
                emit(x, ops::softmax_backward(&y, g, t.dims(), *axis));
            }
        }
        LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            ops::layernorm_backward(x, gain, bias, xhat, inv_std, g, emit);
        }
        Conv2d {
            x,
            w,
            bias,
            stride,
            pad,
            cols,
        } => {
            conv::conv2d_backward(x, w, bias.as_ref(), *stride, *pad, cols, t.dims(), g, emit);
        }
        ConvTranspose2d {
            x,
            w,
            bias,
            stride,
            pad,
        } => {
            conv::conv_transpose2d_backward(x, w, bias.as_ref(), *stride, *pad, t.dims(), g, emit);
        }
        StraightThrough { reference } => {
            if reference.requires_grad() {
                emit(
                    reference,
                    ops::reduce_to_shape(g, t.dims(), reference.shape()),
                );
            }
        }
        SumAll(x) => {
            if x.requires_grad() {
                emit(x, vec![g[0]; x.numel()]);
            }
        }
        MeanAll(x) => {
            if x.requires_grad() {
                let s = g[0] / E::from_f64(x.numel() as f64);
                emit(x, vec![s; x.numel()]);
            }
        }
        SumAxis { x, axis } => {
            if x.requires_grad() {
                emit(x, ops::tile_along_axis(g, x.dims(), *axis, E::one()));
            }
        }
        MeanAxis { x, axis } => {
            if x.requires_grad() {
                let inv = E::one() / E::from_f64(x.dims()[*axis] as f64);
                emit(x, ops::tile_along_axis(g, x.dims(), *axis, inv));
            }
        }
        Reshape(x) => {
            if x.requires_grad() {
                emit(x, g.to_vec());
            }
        }
        Transpose { x, a, b } => {
            if x.requires_grad() {
                emit(x, ops::transpose_raw(g, t.dims(), *a, *b));
            }
        }
        Concat { parts, axis } => {
            let mut start = 0usize;
            for p in parts {
                let len = p.dims()[*axis];
                if p.requires_grad() {
                    emit(p, ops::slice_raw(g, t.dims(), *axis, start, len));
                }
                start += len;
            }
        }
        Slice { x, axis, start } => {
            if x.requires_grad() {
                emit(x, ops::unslice_raw(g, t.dims(), x.dims(), *axis, *start));
            }
        }
        Broadcast(x) => {
            if x.requires_grad() {
                emit(x, ops::reduce_to_shape(g, t.dims(), x.shape()));
            }
        }
    }
}

/// Temporary instrumentation: like [`backward`] but prints cumulative time
/// per op variant.
pub fn backward_profiled<E: Element>(loss: &Tensor<E>) -> Result<()> {
    use std::time::Instant;
    if loss.numel() != 1 || !loss.requires_grad() {
        return Err(Error::Autograd("bad loss".into()));
    }
    enum Frame<E: Element> {
        Enter(Tensor<E>),
        Exit(Tensor<E>),
    }
    let mut topo: Vec<Tensor<E>> = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack = vec![Frame::Enter(loss.clone())];
    while let Some(frame) = stack.pop() {
        match frame {
            Frame::Enter(t) => {
                if !visited.insert(t.id()) {
                    continue;
                }
                stack.push(Frame::Exit(t.clone()));
                for p in t.op().parents() {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push(Frame::Enter(p.clone()));
                    }
                }
            }
            Frame::Exit(t) => topo.push(t),
        }
    }
    let mut grads: HashMap<u64, Vec<E>> = HashMap::new();
    grads.insert(loss.id(), vec![E::one()]);
    let mut buckets: HashMap<&'static str, (f64, usize)> = HashMap::new();
    for t in topo.iter().rev() {
        let g = match grads.remove(&t.id()) {
            Some(g) => g,
            None => continue,
        };
        if t.is_var() {
            t.accumulate_grad(&g);
            continue;
        }
        let kind = op_kind(t.op());
        let t0 = Instant::now();
        backprop_step(t, &g, &mut |parent: &Tensor<E>, contrib: Vec<E>| {
            grads
                .entry(parent.id())
                .and_modify(|acc| {
                    for (a, c) in acc.iter_mut().zip(&contrib) {
                        *a += *c;
                    }
                })
                .or_insert(contrib);
        });
        let e = buckets.entry(kind).or_insert((0.0, 0));
        e.0 += t0.elapsed().as_secs_f64() * 1000.0;
        e.1 += 1;
    }
    let mut rows: Vec<_> = buckets.into_iter().collect();
    rows.sort_by(|a, b| b.1 .0.partial_cmp(&a.1 .0).unwrap());
    for (k, (ms, n)) in rows.iter().take(14) {
        println!("  bwd {k:<18} {ms:7.3} ms over {n} nodes");
    }
    Ok(())
}

fn op_kind<E: Element>(op: &Op<E>) -> &'static str {
    use Op::*;
    match op {
        Leaf => "leaf",
        Add(..) => "add",
        Sub(..) => "sub",
        Mul(..) => "mul",
        Div(..) => "div",
        AddScalar(..) => "add_scalar",
        MulScalar(..) => "mul_scalar",
        Neg(..) => "neg",
        Exp(..) => "exp",
        Relu(..) => "relu",
        Sigmoid(..) => "sigmoid",
        Tanh(..) => "tanh",
        Matmul { .. } => "matmul",
        Softmax { .. } => "softmax",
        LayerNorm { .. } => "layernorm",
        Conv2d { .. } => "conv2d",
        ConvTranspose2d { .. } => "conv_transpose2d",
        StraightThrough { .. } => "straight_through",
        SumAll(..) => "sum_all",
        MeanAll(..) => "mean_all",
        SumAxis { .. } => "sum_axis",
        MeanAxis { .. } => "mean_axis",
        Reshape(..) => "reshape",
        Transpose { .. } => "transpose",
        Concat { .. } => "concat",
        Slice { .. } => "slice",
        Broadcast(..) => "broadcast",
    }
}
