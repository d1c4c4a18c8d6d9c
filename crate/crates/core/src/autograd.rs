//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! Every vector-Jacobian product is itself expressed with tape operations,
//! so gradients can be differentiated again (`create_graph = true`). This is
//! what second-order MAML needs. The primitive set is closed under taking
//! adjoints: gather/scatter, slice/pad, broadcast/sum and the transposed
//! matmul variants map onto each other.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Sigmoid(usize),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Reshape(usize),
    SumRows(usize),
    BroadcastRows(usize),
    SumCols(usize),
    BroadcastCols(usize),
    SumAll(usize),
    BroadcastAll(usize),
    Gather { src: usize, index: Rc<Vec<u32>> },
    ScatterAdd { src: usize, index: Rc<Vec<u32>> },
    Slice { src: usize, offset: usize },
    Pad { src: usize, offset: usize },
}

impl Op {
    fn parents(&self) -> [Option<usize>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul { a, b, .. } => {
                [Some(a), Some(b)]
            }
            Neg(a) | Scale(a, _) | AddScalar(a) | Exp(a) | Log(a) | Sqrt(a) | Sigmoid(a)
            | Reshape(a) | SumRows(a) | BroadcastRows(a) | SumCols(a) | BroadcastCols(a)
            | SumAll(a) | BroadcastAll(a) => [Some(a), None],
            Gather { src, .. } | ScatterAdd { src, .. } | Slice { src, .. } | Pad { src, .. } => {
                [Some(src), None]
            }
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation.
pub struct Tape<F> {
    nodes: RefCell<Vec<Node<F>>>,
    recording: Cell<bool>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F> {
    tape: &'t Tape<F>,
    id: usize,
}

impl<F> std::fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drop every node recorded after the first `len`.
    ///
    /// Any `Var` with an index `>= len` is invalidated; callers must not
    /// touch those handles again.
    pub(crate) fn truncate(&self, len: usize) {
        self.nodes.borrow_mut().truncate(len);
    }

    /// A differentiable input.
    pub fn var(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor<F>, op: Op, requires_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        let (op, requires_grad) = if op_is_leaf(&op) {
            (op, requires_grad)
        } else if self.recording.get() && requires_grad {
            (op, true)
        } else {
            (Op::Leaf, false)
        };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Tensor<F> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn unary(&self, a: usize, value: Tensor<F>, op: Op) -> Var<'_, F> {
        let rg = self.requires(a);
        self.push(value, op, rg)
    }

    fn binary(&self, a: usize, b: usize, value: Tensor<F>, op: Op) -> Var<'_, F> {
        let rg = self.requires(a) || self.requires(b);
        self.push(value, op, rg)
    }

    /// Gradients of `output` (seeded with ones) with respect to `wrt`.
    pub fn grad<'t>(
        &'t self,
        output: Var<'t, F>,
        wrt: &[Var<'t, F>],
        create_graph: bool,
    ) -> Vec<Var<'t, F>> {
        let seed = Tensor::full(output.value().shape(), F::one());
        self.grad_with_seed(output, seed, wrt, create_graph)
    }

    /// Vector-Jacobian product `seedᵀ ∂output/∂wrt`.
    ///
    /// With `create_graph` the returned gradients are themselves
    /// differentiable; otherwise they are constants.
    pub fn grad_with_seed<'t>(
        &'t self,
        output: Var<'t, F>,
        seed: Tensor<F>,
        wrt: &[Var<'t, F>],
        create_graph: bool,
    ) -> Vec<Var<'t, F>> {
        assert_eq!(seed.shape(), output.value().shape(), "seed shape mismatch");
        let out_id = output.id;
        let lo = wrt.iter().map(|v| v.id).min().unwrap_or(out_id).min(out_id);

        // Nodes on a path from some `wrt` to `output`.
        let mut relevant = vec![false; out_id + 1];
        {
            let nodes = self.nodes.borrow();
            for w in wrt {
                if w.id <= out_id {
                    relevant[w.id] = true;
                }
            }
            for id in lo..=out_id {
                if relevant[id] || !nodes[id].requires_grad {
                    continue;
                }
                relevant[id] = nodes[id]
                    .op
                    .parents()
                    .iter()
                    .flatten()
                    .any(|&p| p >= lo && relevant[p]);
            }
        }

        let prev = self.recording.replace(create_graph);
        let mut grads: Vec<Option<Var<'t, F>>> = vec![None; out_id + 1];
        if relevant[out_id] {
            grads[out_id] = Some(self.constant(seed));
        }
        for id in (lo..=out_id).rev() {
            if !relevant[id] {
                continue;
            }
            let Some(g) = grads[id] else { continue };
            let op = self.nodes.borrow()[id].op.clone();
            let out = Var { tape: self, id };
            for (parent, pg) in self.vjp(&op, out, g) {
                if parent < lo || !relevant[parent] {
                    continue;
                }
                grads[parent] = Some(match grads[parent] {
                    Some(acc) => acc.add(pg),
                    None => pg,
                });
            }
        }
        let result = wrt
            .iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(g) => g,
                None => self.constant(Tensor::zeros(w.value().shape())),
            })
            .collect();
        self.recording.set(prev);
        result
    }

    fn vjp<'t>(&'t self, op: &Op, out: Var<'t, F>, g: Var<'t, F>) -> Vec<(usize, Var<'t, F>)> {
        let v = |id: usize| Var { tape: self, id };
        let needs = |id: usize| self.requires(id);
        let mut res = Vec::with_capacity(2);
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                res.push((a, g));
                res.push((b, g));
            }
            Op::Sub(a, b) => {
                res.push((a, g));
                if needs(b) {
                    res.push((b, g.neg()));
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    res.push((a, g.mul(v(b))));
                }
                if needs(b) {
                    res.push((b, g.mul(v(a))));
                }
            }
            Op::Div(a, b) => {
                if needs(a) {
                    res.push((a, g.div(v(b))));
                }
                if needs(b) {
                    res.push((b, g.mul(out.div(v(b))).neg()));
                }
            }
            Op::Neg(a) => res.push((a, g.neg())),
            Op::Scale(a, c) => res.push((a, g.scale(c))),
            Op::AddScalar(a) => res.push((a, g)),
            Op::Exp(a) => res.push((a, g.mul(out))),
            Op::Log(a) => res.push((a, g.div(v(a)))),
            Op::Sqrt(a) => res.push((a, g.scale(0.5).div(out))),
            Op::Sigmoid(a) => res.push((a, g.mul(out.sub(out.mul(out))))),
            Op::MatMul { a, b, ta, tb } => {
                if needs(a) {
                    let ga = if ta {
                        v(b).matmul_t(g, tb, true)
                    } else {
                        g.matmul_t(v(b), false, !tb)
                    };
                    res.push((a, ga));
                }
                if needs(b) {
                    let gb = if tb {
                        g.matmul_t(v(a), true, ta)
                    } else {
                        v(a).matmul_t(g, !ta, false)
                    };
                    res.push((b, gb));
                }
            }
            Op::Reshape(a) => res.push((a, g.reshape(v(a).value().shape().to_vec()))),
            Op::SumRows(a) => {
                let rows = v(a).value().shape()[0];
                res.push((a, g.broadcast_rows(rows)));
            }
            Op::BroadcastRows(a) => res.push((a, g.sum_rows())),
            Op::SumCols(a) => {
                let cols = v(a).value().shape()[1];
                res.push((a, g.broadcast_cols(cols)));
            }
            Op::BroadcastCols(a) => res.push((a, g.sum_cols())),
            Op::SumAll(a) => res.push((a, g.broadcast_to(v(a).value().shape()))),
            Op::BroadcastAll(a) => res.push((a, g.sum())),
            Op::Gather { src, ref index } => {
                let shape = v(src).value().shape().to_vec();
                res.push((src, g.scatter_add_rc(Rc::clone(index), shape)));
            }
            Op::ScatterAdd { src, ref index } => {
                let shape = v(src).value().shape().to_vec();
                res.push((src, g.gather_rc(Rc::clone(index), shape)));
            }
            Op::Slice { src, offset } => {
                let total = v(src).value().len();
                res.push((src, g.pad(offset, total)));
            }
            Op::Pad { src, offset } => {
                let len = v(src).value().len();
                res.push((src, g.slice(offset, len)));
            }
        }
        res
    }
}

fn op_is_leaf(op: &Op) -> bool {
    matches!(op, Op::Leaf)
}

impl<'t, F: Real> Var<'t, F> {
    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn value(&self) -> Tensor<F> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    /// Value as a scalar in `f64`.
    pub fn item(&self) -> f64 {
        self.value().item().to_f64()
    }

    pub fn add(self, o: Var<'t, F>) -> Var<'t, F> {
        let v = self.value().zip_map(&o.value(), |a, b| a + b);
        self.tape.binary(self.id, o.id, v, Op::Add(self.id, o.id))
    }

    pub fn sub(self, o: Var<'t, F>) -> Var<'t, F> {
        let v = self.value().zip_map(&o.value(), |a, b| a - b);
        self.tape.binary(self.id, o.id, v, Op::Sub(self.id, o.id))
    }

    pub fn mul(self, o: Var<'t, F>) -> Var<'t, F> {
        let v = self.value().zip_map(&o.value(), |a, b| a * b);
        self.tape.binary(self.id, o.id, v, Op::Mul(self.id, o.id))
    }

    pub fn div(self, o: Var<'t, F>) -> Var<'t, F> {
        let v = self.value().zip_map(&o.value(), |a, b| a / b);
        self.tape.binary(self.id, o.id, v, Op::Div(self.id, o.id))
    }

    pub fn neg(self) -> Var<'t, F> {
        let v = self.value().map(|a| -a);
        self.tape.unary(self.id, v, Op::Neg(self.id))
    }

    pub fn scale(self, c: f64) -> Var<'t, F> {
        let cf = F::from_f64(c);
        let v = self.value().map(|a| a * cf);
        self.tape.unary(self.id, v, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t, F> {
        let cf = F::from_f64(c);
        let v = self.value().map(|a| a + cf);
        self.tape.unary(self.id, v, Op::AddScalar(self.id))
    }

    pub fn exp(self) -> Var<'t, F> {
        let v = self.value().map(|a| a.exp());
        self.tape.unary(self.id, v, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t, F> {
        let v = self.value().map(|a| a.ln());
        self.tape.unary(self.id, v, Op::Log(self.id))
    }

    pub fn sqrt(self) -> Var<'t, F> {
        let v = self.value().map(|a| a.sqrt());
        self.tape.unary(self.id, v, Op::Sqrt(self.id))
    }

    pub fn sigmoid(self) -> Var<'t, F> {
        let v = self.value().map(|a| {
            let x = a.to_f64();
            let s = if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            };
            F::from_f64(s)
        });
        self.tape.unary(self.id, v, Op::Sigmoid(self.id))
    }

    pub fn matmul(self, o: Var<'t, F>) -> Var<'t, F> {
        self.matmul_t(o, false, false)
    }

    /// `op(self) · op(o)` where `op` optionally transposes.
    pub fn matmul_t(self, o: Var<'t, F>, ta: bool, tb: bool) -> Var<'t, F> {
        let v = self.value().matmul(&o.value(), ta, tb);
        self.tape.binary(
            self.id,
            o.id,
            v,
            Op::MatMul {
                a: self.id,
                b: o.id,
                ta,
                tb,
            },
        )
    }

    pub fn reshape(self, shape: Vec<usize>) -> Var<'t, F> {
        let v = self.value().reshaped(shape);
        self.tape.unary(self.id, v, Op::Reshape(self.id))
    }

    /// `[R, C] -> [1, C]`
    pub fn sum_rows(self) -> Var<'t, F> {
        let v = self.value().sum_rows();
        self.tape.unary(self.id, v, Op::SumRows(self.id))
    }

    /// `[1, C] -> [rows, C]`
    pub fn broadcast_rows(self, rows: usize) -> Var<'t, F> {
        let v = self.value().broadcast_rows(rows);
        self.tape.unary(self.id, v, Op::BroadcastRows(self.id))
    }

    /// `[R, C] -> [R, 1]`
    pub fn sum_cols(self) -> Var<'t, F> {
        let v = self.value().sum_cols();
        self.tape.unary(self.id, v, Op::SumCols(self.id))
    }

    /// `[R, 1] -> [R, cols]`
    pub fn broadcast_cols(self, cols: usize) -> Var<'t, F> {
        let v = self.value().broadcast_cols(cols);
        self.tape.unary(self.id, v, Op::BroadcastCols(self.id))
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(self) -> Var<'t, F> {
        let v = Tensor::scalar(F::from_f64(self.value().sum_f64()));
        self.tape.unary(self.id, v, Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'t, F> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Broadcast a one-element tensor to `shape`.
    pub fn broadcast_to(self, shape: &[usize]) -> Var<'t, F> {
        let x = self.value().item();
        let v = Tensor::full(shape, x);
        self.tape.unary(self.id, v, Op::BroadcastAll(self.id))
    }

    pub fn gather(self, index: Vec<u32>, shape: Vec<usize>) -> Var<'t, F> {
        self.gather_rc(Rc::new(index), shape)
    }

    pub fn gather_rc(self, index: Rc<Vec<u32>>, shape: Vec<usize>) -> Var<'t, F> {
        let v = self.value().gather(&index, shape);
        self.tape.unary(
            self.id,
            v,
            Op::Gather {
                src: self.id,
                index,
            },
        )
    }

    pub fn scatter_add_rc(self, index: Rc<Vec<u32>>, shape: Vec<usize>) -> Var<'t, F> {
        let v = self.value().scatter_add(&index, shape);
        self.tape.unary(
            self.id,
            v,
            Op::ScatterAdd {
                src: self.id,
                index,
            },
        )
    }

    /// Contiguous window `[offset, offset + len)` of a flat tensor.
    pub fn slice(self, offset: usize, len: usize) -> Var<'t, F> {
        let val = self.value();
        let v = Tensor::new(vec![len], val.data()[offset..offset + len].to_vec());
        self.tape.unary(self.id, v, Op::Slice {
            src: self.id,
            offset,
        })
    }

    /// Embed a flat tensor into zeros of length `total` at `offset`.
    pub fn pad(self, offset: usize, total: usize) -> Var<'t, F> {
        let val = self.value();
        let mut out = vec![F::zero(); total];
        out[offset..offset + val.len()].copy_from_slice(val.data());
        self.tape.unary(self.id, Tensor::new(vec![total], out), Op::Pad {
            src: self.id,
            offset,
        })
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(self, c: Tensor<F>) -> Var<'t, F> {
        let k = self.tape.constant(c);
        self.mul(k)
    }
}
