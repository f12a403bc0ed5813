//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! Every operation appends a node holding its forward value. `Tape::backward`
//! walks the nodes in reverse and returns gradients for the tracked leaves.
//! A node is tracked when any of its inputs is, so constant sub-graphs (frozen
//! encoder features, fixed templates) never allocate gradient buffers.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{NamedParamSet, Tensor};

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Affine(usize, f64),
    ScaleBy(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    Square(usize),
    Powf(usize, f64),
    Clamp(usize, f64, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Sum(usize),
    MeanRows(usize),
    Softmax(usize, usize),
    NormalizeRows(usize, f64),
    Max(usize, usize),
    Stack(Vec<usize>),
    Concat(Vec<usize>),
    Gather(usize, Rc<Vec<usize>>),
    Sparse(usize, Rc<SparseMap>),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    tracked: bool,
}

/// A fixed linear map stored as per-output `(input index, weight)` lists.
#[derive(Clone, Debug)]
pub struct SparseMap {
    pub in_len: usize,
    pub out_shape: Vec<usize>,
    pub rows: Vec<Vec<(usize, f64)>>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients of tracked leaves, keyed by node.
#[derive(Debug, Default)]
pub struct Gradients {
    by_node: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.by_node.get(&var.id).map(Vec::as_slice)
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// `out (+)= op(a) * op(b)` for row-major operands, `op` optionally transposing.
/// `a` is logically m×k and `b` k×n after the optional transposes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    out: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above and the strides describe exactly
    // those row-major buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, op: Op, tracked: bool) -> Var<'_> {
        debug_assert_eq!(numel(&shape), data.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            data,
            op,
            tracked,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a tensor; it is tracked iff `requires_grad` is set.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records an untracked value.
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_raw(&self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Var<'_>> {
        let shape = shape.into();
        if numel(&shape) != data.len() || shape.is_empty() {
            return Err(Error::dim("constant", &shape, &[data.len()]));
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.push(vec![1], vec![v], Op::Leaf, false)
    }

    /// Stacks equally shaped values along a new leading axis.
    pub fn stack(&self, vars: &[Var<'_>]) -> Result<Var<'_>> {
        let first = vars
            .first()
            .ok_or_else(|| Error::Contract("stack of zero tensors".into()))?;
        let nodes = self.nodes.borrow();
        let inner = nodes[first.id].shape.clone();
        let mut data = Vec::with_capacity(numel(&inner) * vars.len());
        let mut tracked = false;
        for v in vars {
            let n = &nodes[v.id];
            if n.shape != inner {
                return Err(Error::dim("stack", &inner, &n.shape));
            }
            data.extend_from_slice(&n.data);
            tracked |= n.tracked;
        }
        drop(nodes);
        let mut shape = vec![vars.len()];
        shape.extend(inner);
        let ids = vars.iter().map(|v| v.id).collect();
        Ok(self.push(shape, data, Op::Stack(ids), tracked))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat(&self, vars: &[Var<'_>]) -> Result<Var<'_>> {
        let first = vars
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let nodes = self.nodes.borrow();
        let lead = {
            let s = &nodes[first.id].shape;
            s[..s.len() - 1].to_vec()
        };
        let rows = numel(&lead);
        let mut widths = Vec::with_capacity(vars.len());
        let mut tracked = false;
        for v in vars {
            let s = &nodes[v.id].shape;
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::dim("concat", &nodes[first.id].shape, s));
            }
            widths.push(*s.last().unwrap());
            tracked |= nodes[v.id].tracked;
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (v, &w) in vars.iter().zip(&widths) {
            let src = &nodes[v.id].data;
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        drop(nodes);
        let mut shape = lead;
        shape.push(total);
        let ids = vars.iter().map(|v| v.id).collect();
        Ok(self.push(shape, data, Op::Concat(ids), tracked))
    }

    /// Back-propagates from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_node.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        if !root_node.tracked {
            return Ok(Gradients::default());
        }
        grads[root.id] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                out.by_node.insert(id, g);
                continue;
            }
            backprop(&nodes, node, &g, &mut grads);
        }
        Ok(out)
    }
}

fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], id: usize) -> Option<&'g mut Vec<f64>> {
    let n = &nodes[id];
    if !n.tracked {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![0.0; n.data.len()]))
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let len = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    (outer, len, inner)
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let y = &node.data;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(x, d)| *x += d);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(x, d)| *x -= d);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].data, &nodes[*b].data);
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            }
        }
        Op::AddRow(x, v) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, d)| *a += d);
            }
            let width = nodes[*v].data.len();
            if let Some(gv) = slot(nodes, grads, *v) {
                for row in g.chunks(width) {
                    gv.iter_mut().zip(row).for_each(|(a, d)| *a += d);
                }
            }
        }
        Op::Affine(a, scale) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, d)| *x += scale * d);
            }
        }
        Op::ScaleBy(v, s) => {
            let sv = nodes[*s].data[0];
            let vv = &nodes[*v].data;
            if let Some(gv) = slot(nodes, grads, *v) {
                gv.iter_mut().zip(g).for_each(|(x, d)| *x += sv * d);
            }
            if let Some(gs) = slot(nodes, grads, *s) {
                gs[0] += g.iter().zip(vv).map(|(d, x)| d * x).sum::<f64>();
            }
        }
        Op::Relu(a) => {
            let av = &nodes[*a].data;
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    if av[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
        }
        Op::Tanh(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }
        }
        Op::Exp(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i];
                }
            }
        }
        Op::Ln(a) => {
            let av = &nodes[*a].data;
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] / av[i];
                }
            }
        }
        Op::Square(a) => {
            let av = &nodes[*a].data;
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += 2.0 * g[i] * av[i];
                }
            }
        }
        Op::Powf(a, p) => {
            let av = &nodes[*a].data;
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    if av[i] != 0.0 || *p >= 1.0 {
                        ga[i] += g[i] * p * av[i].powf(p - 1.0);
                    }
                }
            }
        }
        Op::Clamp(a, lo, hi) => {
            let av = &nodes[*a].data;
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    if av[i] >= *lo && av[i] <= *hi {
                        ga[i] += g[i];
                    }
                }
            }
        }
        Op::MatMul(a, b) => {
            let (sa, sb) = (&nodes[*a].shape, &nodes[*b].shape);
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let (av, bv) = (&nodes[*a].data, &nodes[*b].data);
            if let Some(ga) = slot(nodes, grads, *a) {
                gemm(m, n, k, g, false, bv, true, ga, true);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gemm(k, m, n, av, true, g, false, gb, true);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::MeanRows(a) => {
            let s = &nodes[*a].shape;
            let width = *s.last().unwrap();
            let rows = nodes[*a].data.len() / width;
            let inv = 1.0 / rows as f64;
            if let Some(ga) = slot(nodes, grads, *a) {
                for row in ga.chunks_mut(width) {
                    row.iter_mut().zip(g).for_each(|(x, d)| *x += d * inv);
                }
            }
        }
        Op::Softmax(a, axis) => {
            let (outer, len, inner) = axis_layout(&node.shape, *axis);
            if let Some(ga) = slot(nodes, grads, *a) {
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = 0.0;
                        for t in 0..len {
                            let p = base + t * inner;
                            dot += g[p] * y[p];
                        }
                        for t in 0..len {
                            let p = base + t * inner;
                            ga[p] += y[p] * (g[p] - dot);
                        }
                    }
                }
            }
        }
        Op::NormalizeRows(a, eps) => {
            let av = &nodes[*a].data;
            let width = *node.shape.last().unwrap();
            if let Some(ga) = slot(nodes, grads, *a) {
                for r in 0..av.len() / width {
                    let span = r * width..(r + 1) * width;
                    let x = &av[span.clone()];
                    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let gr = &g[span.clone()];
                    if norm > *eps {
                        let yr = &y[span.clone()];
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for j in 0..width {
                            ga[r * width + j] += (gr[j] - yr[j] * dot) / norm;
                        }
                    } else {
                        for j in 0..width {
                            ga[r * width + j] += gr[j] / eps;
                        }
                    }
                }
            }
        }
        Op::Max(a, arg) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga[*arg] += g[0];
            }
        }
        Op::Stack(ids) => {
            let chunk = g.len() / ids.len();
            for (i, id) in ids.iter().enumerate() {
                if let Some(gi) = slot(nodes, grads, *id) {
                    gi.iter_mut()
                        .zip(&g[i * chunk..(i + 1) * chunk])
                        .for_each(|(x, d)| *x += d);
                }
            }
        }
        Op::Concat(ids) => {
            let total = *node.shape.last().unwrap();
            let rows = g.len() / total;
            let mut offset = 0;
            for id in ids {
                let w = *nodes[*id].shape.last().unwrap();
                if let Some(gi) = slot(nodes, grads, *id) {
                    for r in 0..rows {
                        for j in 0..w {
                            gi[r * w + j] += g[r * total + offset + j];
                        }
                    }
                }
                offset += w;
            }
        }
        Op::Gather(a, idx) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for (o, &i) in idx.iter().enumerate() {
                    ga[i] += g[o];
                }
            }
        }
        Op::Sparse(a, map) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for (o, row) in map.rows.iter().enumerate() {
                    for &(i, w) in row {
                        ga[i] += w * g[o];
                    }
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.nodes.borrow()[self.id].tracked
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].data.clone()
    }

    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape is consistent")
    }

    /// First element; the value of a scalar.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].data[0]
    }

    fn same_tape(&self, other: &Var<'t>) {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn unary(&self, op: fn(usize) -> Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        let data = n.data.iter().map(|&x| f(x)).collect();
        let (shape, tracked) = (n.shape.clone(), n.tracked);
        drop(nodes);
        self.tape.push(shape, data, op(self.id), tracked)
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &'static str,
        op: fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(&other);
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id], &nodes[other.id]);
        if a.shape != b.shape {
            return Err(Error::dim(name, &a.shape, &b.shape));
        }
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        let (shape, tracked) = (a.shape.clone(), a.tracked || b.tracked);
        drop(nodes);
        Ok(self.tape.push(shape, data, op(self.id, other.id), tracked))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul, |a, b| a * b)
    }

    /// Adds a vector along the last axis of `self`.
    pub fn add_row(&self, v: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&v);
        let nodes = self.tape.nodes.borrow();
        let (x, b) = (&nodes[self.id], &nodes[v.id]);
        let width = *x.shape.last().unwrap();
        if b.shape != [width] {
            return Err(Error::dim("add_row", &x.shape, &b.shape));
        }
        let mut data = x.data.clone();
        for row in data.chunks_mut(width) {
            row.iter_mut().zip(&b.data).for_each(|(p, q)| *p += q);
        }
        let (shape, tracked) = (x.shape.clone(), x.tracked || b.tracked);
        drop(nodes);
        Ok(self.tape.push(shape, data, Op::AddRow(self.id, v.id), tracked))
    }

    /// `scale * self + shift`.
    pub fn affine(&self, scale: f64, shift: f64) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        let data = n.data.iter().map(|&x| scale * x + shift).collect();
        let (shape, tracked) = (n.shape.clone(), n.tracked);
        drop(nodes);
        self.tape.push(shape, data, Op::Affine(self.id, scale), tracked)
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.affine(s, 0.0)
    }

    /// Multiplies every element by the scalar value `s`.
    pub fn scale_by(&self, s: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&s);
        let nodes = self.tape.nodes.borrow();
        let (x, sn) = (&nodes[self.id], &nodes[s.id]);
        if sn.data.len() != 1 {
            return Err(Error::dim("scale_by", &x.shape, &sn.shape));
        }
        let sv = sn.data[0];
        let data = x.data.iter().map(|v| v * sv).collect();
        let (shape, tracked) = (x.shape.clone(), x.tracked || sn.tracked);
        drop(nodes);
        Ok(self.tape.push(shape, data, Op::ScaleBy(self.id, s.id), tracked))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid, |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh, f64::tanh)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(Op::Ln, f64::ln)
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(Op::Square, |x| x * x)
    }

    pub fn powf(&self, p: f64) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        let data = n.data.iter().map(|x| x.powf(p)).collect();
        let (shape, tracked) = (n.shape.clone(), n.tracked);
        drop(nodes);
        self.tape.push(shape, data, Op::Powf(self.id, p), tracked)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        let data = n.data.iter().map(|x| x.clamp(lo, hi)).collect();
        let (shape, tracked) = (n.shape.clone(), n.tracked);
        drop(nodes);
        self.tape.push(shape, data, Op::Clamp(self.id, lo, hi), tracked)
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id], &nodes[other.id]);
        if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
            return Err(Error::dim("matmul", &a.shape, &b.shape));
        }
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let mut data = vec![0.0; m * n];
        gemm(m, k, n, &a.data, false, &b.data, false, &mut data, false);
        let tracked = a.tracked || b.tracked;
        drop(nodes);
        Ok(self
            .tape
            .push(vec![m, n], data, Op::MatMul(self.id, other.id), tracked))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.id];
        if a.shape.len() != 2 {
            return Err(Error::dim("transpose", &a.shape, &[2]));
        }
        let (r, c) = (a.shape[0], a.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = a.data[i * c + j];
            }
        }
        let tracked = a.tracked;
        drop(nodes);
        Ok(self.tape.push(vec![c, r], data, Op::Transpose(self.id), tracked))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let shape = shape.into();
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.id];
        if numel(&shape) != a.data.len() || shape.is_empty() {
            return Err(Error::dim("reshape", &a.shape, &shape));
        }
        let (data, tracked) = (a.data.clone(), a.tracked);
        drop(nodes);
        Ok(self.tape.push(shape, data, Op::Reshape(self.id), tracked))
    }

    pub fn sum(&self) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.id];
        let (s, tracked) = (a.data.iter().sum(), a.tracked);
        drop(nodes);
        self.tape.push(vec![1], vec![s], Op::Sum(self.id), tracked)
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.tape.nodes.borrow()[self.id].data.len();
        self.sum().scale(1.0 / n as f64)
    }

    /// Averages over every axis but the last.
    pub fn mean_rows(&self) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.id];
        let width = *a.shape.last().unwrap();
        let rows = a.data.len() / width;
        let mut data = vec![0.0; width];
        for row in a.data.chunks(width) {
            data.iter_mut().zip(row).for_each(|(p, q)| *p += q);
        }
        data.iter_mut().for_each(|x| *x /= rows as f64);
        let tracked = a.tracked;
        drop(nodes);
        self.tape.push(vec![width], data, Op::MeanRows(self.id), tracked)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.id];
        if axis >= a.shape.len() {
            return Err(Error::dim("softmax", &a.shape, &[axis]));
        }
        if a.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("softmax input".into()));
        }
        let (outer, len, inner) = axis_layout(&a.shape, axis);
        let mut data = a.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mx = (0..len)
                    .map(|t| data[base + t * inner])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for t in 0..len {
                    let p = base + t * inner;
                    data[p] = (data[p] - mx).exp();
                    total += data[p];
                }
                for t in 0..len {
                    data[base + t * inner] /= total;
                }
            }
        }
        let (shape, tracked) = (a.shape.clone(), a.tracked);
        drop(nodes);
        Ok(self.tape.push(shape, data, Op::Softmax(self.id, axis), tracked))
    }

    /// Scales each last-axis row to unit L2 norm; norms below `eps` divide by `eps`.
    pub fn normalize_rows(&self, eps: f64) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.id];
        let width = *a.shape.last().unwrap();
        let mut data = a.data.clone();
        for row in data.chunks_mut(width) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let (shape, tracked) = (a.shape.clone(), a.tracked);
        drop(nodes);
        self.tape
            .push(shape, data, Op::NormalizeRows(self.id, eps), tracked)
    }

    /// Global maximum; the gradient goes to the first maximal element.
    pub fn max(&self) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.id];
        let mut arg = 0;
        for (i, &v) in a.data.iter().enumerate() {
            if v > a.data[arg] {
                arg = i;
            }
        }
        let (v, tracked) = (a.data[arg], a.tracked);
        drop(nodes);
        self.tape.push(vec![1], vec![v], Op::Max(self.id, arg), tracked)
    }

    /// Picks flat elements into a vector.
    pub fn gather(&self, idx: &[usize]) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.id];
        if idx.is_empty() || idx.iter().any(|&i| i >= a.data.len()) {
            return Err(Error::Contract(format!(
                "gather indices {idx:?} out of range for {:?}",
                a.shape
            )));
        }
        let data = idx.iter().map(|&i| a.data[i]).collect();
        let tracked = a.tracked;
        drop(nodes);
        Ok(self.tape.push(
            vec![idx.len()],
            data,
            Op::Gather(self.id, Rc::new(idx.to_vec())),
            tracked,
        ))
    }

    /// Row `i` of a matrix, as a vector.
    pub fn row(&self, i: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 || i >= shape[0] {
            return Err(Error::dim("row", &shape, &[i]));
        }
        let w = shape[1];
        let idx: Vec<usize> = (i * w..(i + 1) * w).collect();
        self.gather(&idx)
    }

    pub fn element(&self, i: usize) -> Result<Var<'t>> {
        self.gather(&[i])
    }

    pub fn sparse(&self, map: Rc<SparseMap>) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.id];
        if a.data.len() != map.in_len || numel(&map.out_shape) != map.rows.len() {
            return Err(Error::dim("sparse", &a.shape, &map.out_shape));
        }
        let data = map
            .rows
            .iter()
            .map(|row| row.iter().map(|&(i, w)| w * a.data[i]).sum())
            .collect();
        let tracked = a.tracked;
        drop(nodes);
        Ok(self
            .tape
            .push(map.out_shape.clone(), data, Op::Sparse(self.id, map), tracked))
    }
}

/// Parameters recorded on a tape, addressable by path.
#[derive(Debug)]
pub struct ParamVars<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> ParamVars<'t> {
    pub fn get(&self, path: &str) -> Result<Var<'t>> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| Error::Contract(format!("unknown parameter {path}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl NamedParamSet {
    /// Records every parameter as a tracked leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> ParamVars<'t> {
        ParamVars {
            vars: self.iter().map(|(k, t)| (k.to_string(), tape.leaf(t))).collect(),
        }
    }

    /// Records every parameter as a constant, for inference.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> ParamVars<'t> {
        ParamVars {
            vars: self
                .iter()
                .map(|(k, t)| (k.to_string(), tape.constant(t)))
                .collect(),
        }
    }

    /// Adds the gradients of bound parameters into their grad slots.
    pub fn accumulate(&mut self, bound: &ParamVars<'_>, grads: &Gradients) -> Result<()> {
        for (path, var) in bound.iter() {
            let Some(g) = grads.get(var) else { continue };
            let t = self
                .get_mut(path)
                .ok_or_else(|| Error::Contract(format!("unknown parameter {path}")))?;
            t.accumulate_grad(g)?;
        }
        Ok(())
    }
}

/// Runs backward from `loss` and accumulates into `params`.
pub fn backward_into(params: &mut NamedParamSet, bound: &ParamVars<'_>, loss: Var<'_>) -> Result<()> {
    let grads = loss.tape().backward(loss)?;
    params.accumulate(bound, &grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn p(shape: &[usize], data: &[f64]) -> Tensor {
        t(shape, data).with_requires_grad(true)
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let tape = Tape::new();
        let i2 = tape.constant(&Tensor::eye(2));
        assert_eq!(i2.matmul(i2).unwrap().to_vec(), vec![1.0, 0.0, 0.0, 1.0]);
        let a = tape.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(&t(&[2, 1], &[1.0, 1.0]));
        let c = a.matmul(b).unwrap();
        assert_eq!(c.shape(), vec![2, 1]);
        assert_eq!(c.to_vec(), vec![3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(&Tensor::zeros([2, 3]));
        let err = a.matmul(a).unwrap_err();
        match err {
            Error::Dimension { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn matmul_backward_is_ones_times_b_transpose() {
        let tape = Tape::new();
        let a = tape.leaf(&p(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(&p(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let loss = a.matmul(b).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        // ones(2x2) * b^T: each row is the row-sums of b.
        assert_eq!(g.get(a).unwrap(), &[11.0, 15.0, 11.0, 15.0]);
        // a^T * ones: each column holds the column-sums of a.
        assert_eq!(g.get(b).unwrap(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn softmax_cases() {
        let tape = Tape::new();
        let s = tape.constant(&Tensor::zeros([3])).softmax(0).unwrap().to_vec();
        for v in s {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = tape
            .constant(&Tensor::vector(vec![1000.0, 0.0]))
            .softmax(0)
            .unwrap()
            .to_vec();
        assert_eq!(s[0], 1.0);
        assert!(s[1] < 1e-300 && s[1].is_finite());
        let s = tape
            .constant(&Tensor::vector(vec![1f64.ln(), 2f64.ln(), 3f64.ln()]))
            .softmax(0)
            .unwrap()
            .to_vec();
        for (v, want) in s.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((v - want).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_over_middle_axis_sums_to_one() {
        let tape = Tape::new();
        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin() * 5.0).collect();
        let s = tape.constant(&t(&[2, 3, 4], &data)).softmax(1).unwrap().value();
        for o in 0..2 {
            for i in 0..4 {
                let total: f64 = (0..3).map(|k| s.at(&[o, k, i])).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
        assert!(tape
            .constant(&Tensor::vector(vec![f64::NAN, 1.0]))
            .softmax(0)
            .is_err());
        assert!(tape.constant(&Tensor::zeros([2])).softmax(1).is_err());
    }

    #[test]
    fn pointwise_definitions() {
        let tape = Tape::new();
        assert_eq!(tape.scalar(0.0).sigmoid().item(), 0.5);
        assert_eq!(tape.scalar(-3.0).relu().item(), 0.0);
        assert_eq!(tape.scalar(1.5).clamp(0.0, 1.0).item(), 1.0);
        let a = tape.constant(&Tensor::zeros([2]));
        let b = tape.constant(&Tensor::zeros([3]));
        assert!(matches!(a.add(b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let tape = Tape::new();
        let x = tape.leaf(&p(&[3], &[-1.0, 0.0, 2.0]));
        let g = tape.backward(x.relu().sum()).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let tape = Tape::new();
        let x = tape.leaf(&p(&[2], &[1.0, 2.0]));
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0]);
        let g = tape.backward(x.square().sum()).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn frozen_tensor_gets_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(&p(&[2], &[1.0, 2.0]));
        let frozen = tape.leaf(&t(&[2], &[3.0, 4.0]));
        let g = tape.backward(x.mul(frozen).unwrap().sum()).unwrap();
        assert_eq!(g.get(x).unwrap(), &[3.0, 4.0]);
        assert!(g.get(frozen).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let tape = Tape::new();
        let x = tape.leaf(&p(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn concat_stack_gather_route_gradients() {
        let tape = Tape::new();
        let a = tape.leaf(&p(&[2, 1], &[1.0, 2.0]));
        let b = tape.leaf(&p(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(c.to_vec(), vec![1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let w = tape.constant(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let g = tape.backward(c.mul(w).unwrap().sum()).unwrap();
        assert_eq!(g.get(a).unwrap(), &[1.0, 4.0]);
        assert_eq!(g.get(b).unwrap(), &[2.0, 3.0, 5.0, 6.0]);

        let s = tape.stack(&[a, a]).unwrap();
        assert_eq!(s.shape(), vec![2, 2, 1]);
        let g = tape.backward(s.gather(&[0, 3]).unwrap().sum()).unwrap();
        assert_eq!(g.get(a).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn normalize_rows_guards_zero_rows() {
        let tape = Tape::new();
        let x = tape.leaf(&p(&[2, 2], &[3.0, 4.0, 0.0, 0.0]));
        let y = x.normalize_rows(1e-12);
        assert_eq!(y.to_vec(), vec![0.6, 0.8, 0.0, 0.0]);
        let g = tape.backward(y.sum()).unwrap();
        assert!(g.get(x).unwrap().iter().all(|v| v.is_finite()));
    }
}
