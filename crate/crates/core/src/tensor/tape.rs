//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every value produced during a forward pass. A node keeps
//! its parent links only when at least one input requires a gradient;
//! everything else is stored as a constant. [`Tape::backward`] walks the
//! nodes in reverse creation order, which is a valid topological order
//! because a node can only refer to nodes created before it.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::{strides, Real, Tensor, TensorError};

type Res<T> = std::result::Result<T, TensorError>;

enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, Real),
    Shift(usize),
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    /// `out[i] = input[map[i]]`; covers permute, broadcast and narrow.
    Gather {
        a: usize,
        map: Rc<Vec<usize>>,
    },
    Reshape(usize),
    Conv2d {
        x: usize,
        w: usize,
        geom: ConvGeom,
        cols: Vec<Real>,
        cout: usize,
    },
    BiasAdd {
        x: usize,
        b: usize,
    },
    Relu(usize),
    Sigmoid(usize),
    Log(usize),
    Sqrt(usize),
    Clamp {
        a: usize,
        lo: Real,
        hi: Real,
    },
    /// `out[map[i]] += input[i] * scale`; sum and mean.
    Reduce {
        a: usize,
        map: Rc<Vec<usize>>,
        scale: Real,
    },
    Max {
        a: usize,
        map: Rc<Vec<usize>>,
        arg: Vec<usize>,
    },
    MaxPool2d {
        x: usize,
        geom: ConvGeom,
        arg: Vec<usize>,
    },
    Concat {
        inputs: Vec<usize>,
        outer: usize,
        inner: Vec<usize>,
    },
    Softmax(usize),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<Real>,
    },
    Bce {
        a: usize,
        target: Rc<Tensor>,
        lo: Real,
        hi: Real,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records differentiable operations for one forward/backward pass.
///
/// A tape is confined to the thread that created it.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<HashMap<usize, Tensor>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A trainable input; its gradient is accumulated by [`Tape::backward`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let op = if requires_grad { op } else { Op::Constant };
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        self.grads.borrow().get(&v.id).cloned()
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }

    /// Accumulates `∂root/∂leaf` into every reachable leaf.
    pub fn backward(&self, root: Var<'_>) -> Res<()> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if !root_node.value.is_scalar() {
            return Err(TensorError::NonScalarRoot(root_node.value.shape().to_vec()));
        }
        if !root_node.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<Real>>> = vec![None; root.id + 1];
        grads[root.id] = Some(vec![1.0]);
        let mut leaf_grads = self.grads.borrow_mut();
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => {
                    let entry = leaf_grads
                        .entry(id)
                        .or_insert_with(|| Tensor::zeros(node.value.shape()));
                    for (e, v) in entry.data_mut().iter_mut().zip(&g) {
                        *e += v;
                    }
                }
                Op::Constant => {}
                op => backprop(op, &nodes, id, &g, &mut grads),
            }
        }
        Ok(())
    }

    /// Smallest distance of any recorded ReLU input from zero, or of any
    /// recorded max/max-pool window from a tie. Finite-difference checks
    /// are only meaningful when this exceeds the perturbation size.
    pub fn kink_margin(&self) -> Real {
        let nodes = self.nodes.borrow();
        let mut margin = Real::INFINITY;
        for node in nodes.iter() {
            match &node.op {
                Op::Relu(a) => {
                    for &v in nodes[*a].value.data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::MaxPool2d { x, geom, .. } => {
                    margin = margin.min(kernels::maxpool_margin(nodes[*x].value.data(), geom));
                }
                Op::Max { a, map, .. } => {
                    let groups = node.value.numel();
                    let mut members: Vec<Vec<Real>> = vec![Vec::new(); groups];
                    for (i, &o) in map.iter().enumerate() {
                        members[o].push(nodes[*a].value.data()[i]);
                    }
                    for m in &members {
                        margin = margin.min(kernels::top_two_gap(m));
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat<'t>(&'t self, vars: &[Var<'t>], axis: usize) -> Res<Var<'t>> {
        let first = vars
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let shape0 = first.shape();
        if axis >= shape0.len() {
            return Err(TensorError::invalid("concat", format!("axis {axis} out of range for {shape0:?}")));
        }
        let values: Vec<Rc<Tensor>> = vars.iter().map(|v| v.value()).collect();
        for v in &values[1..] {
            let s = v.shape();
            if s.len() != shape0.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != shape0[i])
            {
                return Err(TensorError::mismatch("concat", &shape0, s));
            }
        }
        let outer: usize = shape0[..axis].iter().product();
        let tail: usize = shape0[axis + 1..].iter().product();
        let inner: Vec<usize> = values.iter().map(|v| v.shape()[axis] * tail).collect();
        let total_inner: usize = inner.iter().sum();
        let mut data = Vec::with_capacity(outer * total_inner);
        for o in 0..outer {
            for (v, &len) in values.iter().zip(&inner) {
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = shape0.clone();
        shape[axis] = values.iter().map(|v| v.shape()[axis]).sum();
        let ids: Vec<usize> = vars.iter().map(|v| v.id).collect();
        let rg = self.requires(&ids);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                inputs: ids,
                outer,
                inner,
            },
            rg,
        ))
    }
}

fn slot<'g>(
    grads: &'g mut [Option<Vec<Real>>],
    nodes: &[Node],
    id: usize,
) -> Option<&'g mut Vec<Real>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop(op: &Op, nodes: &[Node], id: usize, g: &[Real], grads: &mut [Option<Vec<Real>>]) {
    let val = |i: usize| nodes[i].value.data();
    match op {
        Op::Leaf | Op::Constant => {}
        Op::Add(a, b) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[*a].value.clone(), nodes[*b].value.clone());
            if let Some(ga) = slot(grads, nodes, *a) {
                for ((x, gy), bb) in ga.iter_mut().zip(g).zip(bv.data()) {
                    *x += gy * bb;
                }
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                for ((x, gy), aa) in gb.iter_mut().zip(g).zip(av.data()) {
                    *x += gy * aa;
                }
            }
        }
        Op::Div(a, b) => {
            let (av, bv) = (nodes[*a].value.clone(), nodes[*b].value.clone());
            if let Some(ga) = slot(grads, nodes, *a) {
                for ((x, gy), bb) in ga.iter_mut().zip(g).zip(bv.data()) {
                    *x += gy / bb;
                }
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                for (((x, gy), aa), bb) in gb.iter_mut().zip(g).zip(av.data()).zip(bv.data()) {
                    *x -= gy * aa / (bb * bb);
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }
        }
        Op::Shift(a) | Op::Reshape(a) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        &Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
        } => {
            let (av, bv) = (nodes[a].value.clone(), nodes[b].value.clone());
            if let Some(ga) = slot(grads, nodes, a) {
                // dA = dC · Bᵀ
                for t in 0..batch {
                    kernels::gemm(
                        m,
                        n,
                        k,
                        &g[t * m * n..],
                        (n as isize, 1),
                        &bv.data()[t * k * n..],
                        (1, n as isize),
                        1.0,
                        &mut ga[t * m * k..(t + 1) * m * k],
                    );
                }
            }
            if let Some(gb) = slot(grads, nodes, b) {
                // dB = Aᵀ · dC
                for t in 0..batch {
                    kernels::gemm(
                        k,
                        m,
                        n,
                        &av.data()[t * m * k..],
                        (1, k as isize),
                        &g[t * m * n..],
                        (n as isize, 1),
                        1.0,
                        &mut gb[t * k * n..(t + 1) * k * n],
                    );
                }
            }
        }
        Op::Gather { a, map } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                for (i, &src) in map.iter().enumerate() {
                    ga[src] += g[i];
                }
            }
        }
        Op::Conv2d {
            x,
            w,
            geom,
            cols,
            cout,
        } => {
            let rows = geom.rows();
            let plen = geom.patch_len();
            let wv = nodes[*w].value.clone();
            if let Some(gw) = slot(grads, nodes, *w) {
                // dW = colsᵀ · dOut
                kernels::gemm(
                    plen,
                    rows,
                    *cout,
                    cols,
                    (1, plen as isize),
                    g,
                    (*cout as isize, 1),
                    1.0,
                    gw,
                );
            }
            if nodes[*x].requires_grad {
                // dCols = dOut · Wᵀ
                let mut dcols = vec![0.0; rows * plen];
                kernels::gemm(
                    rows,
                    *cout,
                    plen,
                    g,
                    (*cout as isize, 1),
                    wv.data(),
                    (1, *cout as isize),
                    0.0,
                    &mut dcols,
                );
                if let Some(gx) = slot(grads, nodes, *x) {
                    kernels::col2im_add(&dcols, geom, gx);
                }
            }
        }
        Op::BiasAdd { x, b } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(p, q)| *p += q);
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                let c = gb.len();
                for row in g.chunks(c) {
                    gb.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                }
            }
        }
        Op::Relu(a) => {
            let av = nodes[*a].value.clone();
            if let Some(ga) = slot(grads, nodes, *a) {
                for ((x, gy), v) in ga.iter_mut().zip(g).zip(av.data()) {
                    if *v > 0.0 {
                        *x += gy;
                    }
                }
            }
        }
        Op::Sigmoid(a) => {
            let out = val(id).to_vec();
            if let Some(ga) = slot(grads, nodes, *a) {
                for ((x, gy), y) in ga.iter_mut().zip(g).zip(&out) {
                    *x += gy * y * (1.0 - y);
                }
            }
        }
        Op::Log(a) => {
            let av = nodes[*a].value.clone();
            if let Some(ga) = slot(grads, nodes, *a) {
                for ((x, gy), v) in ga.iter_mut().zip(g).zip(av.data()) {
                    *x += gy / v;
                }
            }
        }
        Op::Sqrt(a) => {
            let out = nodes[id].value.clone();
            if let Some(ga) = slot(grads, nodes, *a) {
                for ((x, gy), y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *x += gy / (2.0 * y);
                }
            }
        }
        Op::Clamp { a, lo, hi } => {
            let av = nodes[*a].value.clone();
            if let Some(ga) = slot(grads, nodes, *a) {
                for ((x, gy), v) in ga.iter_mut().zip(g).zip(av.data()) {
                    if *v >= *lo && *v <= *hi {
                        *x += gy;
                    }
                }
            }
        }
        Op::Reduce { a, map, scale } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                for (i, &o) in map.iter().enumerate() {
                    ga[i] += g[o] * scale;
                }
            }
        }
        Op::Max { a, arg, .. } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                for (o, &i) in arg.iter().enumerate() {
                    ga[i] += g[o];
                }
            }
        }
        Op::MaxPool2d { x, arg, .. } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                for (o, &i) in arg.iter().enumerate() {
                    gx[i] += g[o];
                }
            }
        }
        Op::Concat {
            inputs,
            outer,
            inner,
        } => {
            let total: usize = inner.iter().sum();
            let mut offset = 0;
            for (&input, &len) in inputs.iter().zip(inner) {
                if let Some(gi) = slot(grads, nodes, input) {
                    for o in 0..*outer {
                        let src = &g[o * total + offset..o * total + offset + len];
                        gi[o * len..(o + 1) * len]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(p, q)| *p += q);
                    }
                }
                offset += len;
            }
        }
        Op::Softmax(a) => {
            let out = nodes[id].value.clone();
            let cols = *out.shape().last().unwrap_or(&1);
            if let Some(ga) = slot(grads, nodes, *a) {
                for ((gx, gy), y) in ga
                    .chunks_mut(cols)
                    .zip(g.chunks(cols))
                    .zip(out.data().chunks(cols))
                {
                    let dot: Real = gy.iter().zip(y).map(|(p, q)| p * q).sum();
                    for j in 0..cols {
                        gx[j] += y[j] * (gy[j] - dot);
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let n = labels.len();
            let c = probs.len() / n;
            if let Some(gl) = slot(grads, nodes, *logits) {
                let s = g[0] / n as Real;
                for (i, &y) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == y { 1.0 } else { 0.0 };
                        gl[i * c + j] += s * (probs[i * c + j] - onehot);
                    }
                }
            }
        }
        Op::Bce { a, target, lo, hi } => {
            let av = nodes[*a].value.clone();
            if let Some(ga) = slot(grads, nodes, *a) {
                for (((x, gy), v), t) in ga.iter_mut().zip(g).zip(av.data()).zip(target.data()) {
                    if *v >= *lo && *v <= *hi {
                        *x += gy * (-t / v + (1.0 - t) / (1.0 - v));
                    }
                }
            }
        }
    }
}

/// Output shape and input→output index map for a reduction over `axes`.
fn reduce_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let keep: Vec<usize> = (0..shape.len()).filter(|a| !axes.contains(a)).collect();
    let out_shape: Vec<usize> = keep.iter().map(|&a| shape[a]).collect();
    let out_strides = strides(&out_shape);
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        let o: usize = keep
            .iter()
            .zip(&out_strides)
            .map(|(&a, s)| idx[a] * s)
            .sum();
        map.push(o);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out_shape, map)
}

/// Output→input index map for a gather driven by `source_offset(out_index)`.
fn gather_map(out_shape: &[usize], mut source_offset: impl FnMut(&[usize]) -> usize) -> Vec<usize> {
    let n: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..n {
        map.push(source_offset(&idx));
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}

fn check_axes(op: &'static str, shape: &[usize], axes: &[usize]) -> Res<()> {
    for (i, &a) in axes.iter().enumerate() {
        if a >= shape.len() || axes[..i].contains(&a) {
            return Err(TensorError::invalid(
                op,
                format!("bad axes {axes:?} for shape {shape:?}"),
            ));
        }
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(&[self.id])
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(Real, Real) -> Real,
        op: Op,
    ) -> Res<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(TensorError::mismatch(name, a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self
            .tape
            .push(Tensor::new(a.shape().to_vec(), data)?, op, rg))
    }

    pub fn add(self, other: Var<'t>) -> Res<Var<'t>> {
        self.binary(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Res<Var<'t>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Res<Var<'t>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'t>) -> Res<Var<'t>> {
        self.binary(other, "div", |x, y| x / y, Op::Div(self.id, other.id))
    }

    pub fn scale(self, c: Real) -> Var<'t> {
        let v = self.value().map(|x| x * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: Real) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::Shift(self.id))
    }

    /// `[m,k]·[k,n]`, or batched `[b,m,k]·[b,k,n]`.
    pub fn matmul(self, other: Var<'t>) -> Res<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        let (batch, m, k, n, out_shape) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (1, sa[0], sa[1], sb[1], vec![sa[0], sb[1]]),
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => {
                (sa[0], sa[1], sa[2], sb[2], vec![sa[0], sa[1], sb[2]])
            }
            _ => return Err(TensorError::mismatch("matmul", sa, sb)),
        };
        let mut out = vec![0.0; batch * m * n];
        for t in 0..batch {
            kernels::gemm(
                m,
                k,
                n,
                &a.data()[t * m * k..],
                (k as isize, 1),
                &b.data()[t * k * n..],
                (n as isize, 1),
                0.0,
                &mut out[t * m * n..(t + 1) * m * n],
            );
        }
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(
            Tensor::new(out_shape, out)?,
            Op::MatMul {
                a: self.id,
                b: other.id,
                batch,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    fn gather(self, out_shape: Vec<usize>, map: Vec<usize>) -> Res<Var<'t>> {
        let a = self.value();
        let data = map.iter().map(|&i| a.data()[i]).collect();
        let t = Tensor::new(out_shape, data)?;
        Ok(self.unary(
            t,
            Op::Gather {
                a: self.id,
                map: Rc::new(map),
            },
        ))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Res<Var<'t>> {
        let shape = self.shape();
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..shape.len()).collect::<Vec<_>>() {
            return Err(TensorError::invalid(
                "permute",
                format!("{perm:?} is not a permutation of the axes of {shape:?}"),
            ));
        }
        let in_strides = strides(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let map = gather_map(&out_shape, |idx| {
            idx.iter().zip(perm).map(|(i, &p)| i * in_strides[p]).sum()
        });
        self.gather(out_shape, map)
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Res<Var<'t>> {
        let nd = self.shape().len();
        if nd < 2 {
            return Err(TensorError::invalid("transpose", "needs at least two axes"));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(&perm)
    }

    /// Broadcasts trailing-aligned size-1 (or missing leading) axes up to `target`.
    pub fn broadcast_to(self, target: &[usize]) -> Res<Var<'t>> {
        let shape = self.shape();
        if shape.len() > target.len() {
            return Err(TensorError::mismatch("broadcast", &shape, target));
        }
        let lead = target.len() - shape.len();
        for (i, &d) in shape.iter().enumerate() {
            if d != 1 && d != target[lead + i] {
                return Err(TensorError::mismatch("broadcast", &shape, target));
            }
        }
        let in_strides = strides(&shape);
        let map = gather_map(target, |idx| {
            shape
                .iter()
                .enumerate()
                .map(|(i, &d)| if d == 1 { 0 } else { idx[lead + i] * in_strides[i] })
                .sum()
        });
        self.gather(target.to_vec(), map)
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Res<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::invalid(
                "narrow",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let in_strides = strides(&shape);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let map = gather_map(&out_shape, |idx| {
            idx.iter()
                .enumerate()
                .map(|(a, &i)| (if a == axis { i + start } else { i }) * in_strides[a])
                .sum()
        });
        self.gather(out_shape, map)
    }

    pub fn reshape(self, shape: &[usize]) -> Res<Var<'t>> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// 2-D cross-correlation. `self` is `[N,H,W,Cin]`, `kernel` is
    /// `[kh,kw,Cin,Cout]`; padding is zeros.
    pub fn conv2d(self, kernel: Var<'t>, stride: usize, pad: usize) -> Res<Var<'t>> {
        let (x, w) = (self.value(), kernel.value());
        let (sx, sw) = (x.shape(), w.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[3] != sw[2] {
            return Err(TensorError::mismatch("conv2d", sx, sw));
        }
        let geom = ConvGeom {
            n: sx[0],
            h: sx[1],
            w: sx[2],
            c: sx[3],
            kh: sw[0],
            kw: sw[1],
            stride,
            pad,
        };
        if !geom.valid() {
            return Err(TensorError::invalid(
                "conv2d",
                format!("kernel {sw:?} stride {stride} pad {pad} does not fit input {sx:?}"),
            ));
        }
        let cout = sw[3];
        let cols = kernels::im2col(x.data(), &geom);
        let rows = geom.rows();
        let plen = geom.patch_len();
        let mut out = vec![0.0; rows * cout];
        kernels::gemm(
            rows,
            plen,
            cout,
            &cols,
            (plen as isize, 1),
            w.data(),
            (cout as isize, 1),
            0.0,
            &mut out,
        );
        let t = Tensor::new(vec![geom.n, geom.out_h(), geom.out_w(), cout], out)?;
        let rg = self.tape.requires(&[self.id, kernel.id]);
        Ok(self.tape.push(
            t,
            Op::Conv2d {
                x: self.id,
                w: kernel.id,
                geom,
                cols: if rg { cols } else { Vec::new() },
                cout,
            },
            rg,
        ))
    }

    /// Adds a `[C]` bias along the last axis.
    pub fn bias_add(self, bias: Var<'t>) -> Res<Var<'t>> {
        let (x, b) = (self.value(), bias.value());
        let c = *x.shape().last().unwrap_or(&1);
        if b.shape() != [c] {
            return Err(TensorError::mismatch("bias_add", x.shape(), b.shape()));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(c) {
            row.iter_mut().zip(b.data()).for_each(|(p, q)| *p += q);
        }
        let rg = self.tape.requires(&[self.id, bias.id]);
        Ok(self.tape.push(
            Tensor::new(x.shape().to_vec(), data)?,
            Op::BiasAdd {
                x: self.id,
                b: bias.id,
            },
            rg,
        ))
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.value().map(|x| if x > 0.0 { x } else { 0.0 });
        self.unary(v, Op::Relu(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.value().map(sigmoid);
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn log(self) -> Var<'t> {
        let v = self.value().map(Real::ln);
        self.unary(v, Op::Log(self.id))
    }

    pub fn sqrt(self) -> Var<'t> {
        let v = self.value().map(Real::sqrt);
        self.unary(v, Op::Sqrt(self.id))
    }

    pub fn clamp(self, lo: Real, hi: Real) -> Var<'t> {
        let v = self.value().map(|x| x.clamp(lo, hi));
        self.unary(v, Op::Clamp { a: self.id, lo, hi })
    }

    fn reduce(self, name: &'static str, axes: &[usize], mean: bool) -> Res<Var<'t>> {
        let a = self.value();
        check_axes(name, a.shape(), axes)?;
        let (out_shape, map) = reduce_map(a.shape(), axes);
        let count: usize = axes.iter().map(|&ax| a.shape()[ax]).product();
        let scale = if mean { 1.0 / count as Real } else { 1.0 };
        let mut out = vec![0.0; out_shape.iter().product()];
        for (i, &o) in map.iter().enumerate() {
            out[o] += a.data()[i];
        }
        if mean {
            out.iter_mut().for_each(|v| *v *= scale);
        }
        let t = Tensor::new(out_shape, out)?;
        Ok(self.unary(
            t,
            Op::Reduce {
                a: self.id,
                map: Rc::new(map),
                scale,
            },
        ))
    }

    /// Sums over `axes`, dropping them from the shape.
    pub fn sum(self, axes: &[usize]) -> Res<Var<'t>> {
        self.reduce("sum", axes, false)
    }

    pub fn mean(self, axes: &[usize]) -> Res<Var<'t>> {
        self.reduce("mean", axes, true)
    }

    pub fn sum_all(self) -> Var<'t> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce("sum", &axes, false).expect("all axes are valid")
    }

    pub fn mean_all(self) -> Var<'t> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce("mean", &axes, true).expect("all axes are valid")
    }

    /// Maximum over `axes`; the gradient flows to the first maximiser.
    pub fn max(self, axes: &[usize]) -> Res<Var<'t>> {
        let a = self.value();
        check_axes("max", a.shape(), axes)?;
        let (out_shape, map) = reduce_map(a.shape(), axes);
        let n_out: usize = out_shape.iter().product();
        let mut out = vec![Real::NEG_INFINITY; n_out];
        let mut arg = vec![usize::MAX; n_out];
        for (i, &o) in map.iter().enumerate() {
            let v = a.data()[i];
            if arg[o] == usize::MAX || v > out[o] {
                out[o] = v;
                arg[o] = i;
            }
        }
        let t = Tensor::new(out_shape, out)?;
        Ok(self.unary(
            t,
            Op::Max {
                a: self.id,
                map: Rc::new(map),
                arg,
            },
        ))
    }

    /// Max pooling over `[N,H,W,C]` with a `k×k` window.
    pub fn maxpool2d(self, k: usize, stride: usize, pad: usize) -> Res<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 4 {
            return Err(TensorError::invalid("maxpool2d", format!("expected NHWC, got {s:?}")));
        }
        let geom = ConvGeom {
            n: s[0],
            h: s[1],
            w: s[2],
            c: s[3],
            kh: k,
            kw: k,
            stride,
            pad,
        };
        if k == 0 || pad >= k || !geom.valid() {
            return Err(TensorError::invalid(
                "maxpool2d",
                format!("kernel {k} stride {stride} pad {pad} on {s:?}"),
            ));
        }
        let (out, arg) = kernels::maxpool2d(x.data(), &geom);
        let t = Tensor::new(vec![geom.n, geom.out_h(), geom.out_w(), geom.c], out)?;
        Ok(self.unary(
            t,
            Op::MaxPool2d {
                x: self.id,
                geom,
                arg,
            },
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t> {
        let a = self.value();
        let t = softmax_rows(&a);
        self.unary(t, Op::Softmax(self.id))
    }

    /// Mean cross-entropy of `[N,C]` logits against class indices.
    pub fn cross_entropy(self, labels: &[usize]) -> Res<Var<'t>> {
        let a = self.value();
        let s = a.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(TensorError::mismatch("cross_entropy", s, &[labels.len()]));
        }
        let c = s[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(TensorError::invalid(
                "cross_entropy",
                format!("label {bad} out of range for {c} classes"),
            ));
        }
        let probs = softmax_rows(&a);
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &a.data()[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<Real>().ln();
            loss += lse - row[y];
        }
        loss /= labels.len() as Real;
        Ok(self.unary(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs: probs.into_data(),
            },
        ))
    }

    /// Elementwise binary cross-entropy `−[t·ln a + (1−t)·ln(1−a)]` with
    /// `a` clamped to `[eps, 1−eps]`.
    pub fn bce(self, target: &Tensor, eps: Real) -> Res<Var<'t>> {
        let a = self.value();
        if a.shape() != target.shape() {
            return Err(TensorError::mismatch("bce", a.shape(), target.shape()));
        }
        let (lo, hi) = (eps, 1.0 - eps);
        let data = a
            .data()
            .iter()
            .zip(target.data())
            .map(|(&v, &t)| {
                let c = v.clamp(lo, hi);
                -(t * c.ln() + (1.0 - t) * (1.0 - c).ln())
            })
            .collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.unary(
            out,
            Op::Bce {
                a: self.id,
                target: Rc::new(target.clone()),
                lo,
                hi,
            },
        ))
    }
}

pub(crate) fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_rows(a: &Tensor) -> Tensor {
    let cols = *a.shape().last().unwrap_or(&1);
    let mut data = a.data().to_vec();
    for row in data.chunks_mut(cols) {
        let m = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Tensor {
        shape: a.shape().to_vec(),
        data,
    }
}
