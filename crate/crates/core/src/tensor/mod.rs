//! A small eager tape for reverse-mode differentiation.
//!
//! Values are computed at node creation; `grad` walks the tape backwards and
//! emits the vector-Jacobian products *as new tape nodes*, so a gradient is
//! itself differentiable. That grad-of-grad capability is what the critic's
//! gradient-penalty update needs: the penalty depends on the critic's input
//! gradient, and its parameter gradient differentiates through that.
//!
//! The op set is deliberately small. Composite layers (normalization, losses)
//! are built from these primitives so their backward rules come out of the
//! tape instead of being derived by hand.

pub mod kernels;

use std::cell::RefCell;

use crate::parallel::{default_exec, Exec};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: Vec<usize>, v: f32) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![v; n] }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// (channels, height, width) view of a rank-3 tensor.
    fn chw(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected [c, h, w], got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Affine { a: usize, mul: f32 },
    Tanh(usize),
    Sqrt(usize),
    LeakyRelu { a: usize, slope: f32 },
    Clamp { a: usize, lo: f32, hi: f32 },
    SumAll(usize),
    BroadcastAll(usize),
    SumSpatial(usize),
    BroadcastChan(usize),
    Conv2d { x: usize, w: usize },
    ConvInputGrad { g: usize, w: usize },
    ConvWeightGrad { x: usize, g: usize },
    ZeroPad { a: usize, pad: usize },
    Crop { a: usize, pad: usize },
}

fn parents(op: &Op) -> Vec<usize> {
    match *op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![a, b],
        Op::Affine { a, .. }
        | Op::Tanh(a)
        | Op::Sqrt(a)
        | Op::LeakyRelu { a, .. }
        | Op::Clamp { a, .. }
        | Op::SumAll(a)
        | Op::BroadcastAll(a)
        | Op::SumSpatial(a)
        | Op::BroadcastChan(a)
        | Op::ZeroPad { a, .. }
        | Op::Crop { a, .. } => vec![a],
        Op::Conv2d { x, w } => vec![x, w],
        Op::ConvInputGrad { g, w } => vec![g, w],
        Op::ConvWeightGrad { x, g } => vec![x, g],
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    exec: Exec,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), exec: default_exec() }
    }

    pub fn with_exec(exec: Exec) -> Self {
        Tape { nodes: RefCell::new(Vec::new()), exec }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, value: Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        Var(nodes.len() - 1)
    }

    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape.to_vec()
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes.borrow()[v.0].value.numel()
    }

    pub fn scalar_value(&self, v: Var) -> f32 {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[v.0].value.numel(), 1);
        nodes[v.0].value.data[0]
    }

    fn zip_same_shape(&self, a: Var, b: Var, op: Op, f: impl Fn(f32, f32) -> f32) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(ta.shape, tb.shape, "elementwise shape mismatch");
            let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
            Tensor { shape: ta.shape.clone(), data }
        };
        self.push(op, value)
    }

    fn map(&self, a: Var, op: Op, f: impl Fn(f32) -> f32) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            Tensor { shape: ta.shape.clone(), data: ta.data.iter().map(|&x| f(x)).collect() }
        };
        self.push(op, value)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.zip_same_shape(a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.zip_same_shape(a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.zip_same_shape(a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.zip_same_shape(a, b, Op::Div(a.0, b.0), |x, y| x / y)
    }

    /// `mul * a + add`, elementwise with scalar constants.
    pub fn affine(&self, a: Var, mul: f32, add: f32) -> Var {
        self.map(a, Op::Affine { a: a.0, mul }, |x| mul * x + add)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.affine(a, -1.0, 0.0)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.map(a, Op::Tanh(a.0), f32::tanh)
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.map(a, Op::Sqrt(a.0), f32::sqrt)
    }

    pub fn leaky_relu(&self, a: Var, slope: f32) -> Var {
        self.map(a, Op::LeakyRelu { a: a.0, slope }, |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn clamp(&self, a: Var, lo: f32, hi: f32) -> Var {
        self.map(a, Op::Clamp { a: a.0, lo, hi }, |x| x.clamp(lo, hi))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let s: f64 = nodes[a.0].value.data.iter().map(|&x| x as f64).sum();
            Tensor::scalar(s as f32)
        };
        self.push(Op::SumAll(a.0), value)
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.numel(a);
        let s = self.sum_all(a);
        self.affine(s, 1.0 / n as f32, 0.0)
    }

    pub fn broadcast_all(&self, a: Var, shape: Vec<usize>) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            assert_eq!(nodes[a.0].value.numel(), 1);
            Tensor::full(shape, nodes[a.0].value.data[0])
        };
        self.push(Op::BroadcastAll(a.0), value)
    }

    /// `[c, h, w] -> [c]`, summing each plane (f64 accumulation).
    pub fn sum_spatial(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let (c, h, w) = t.chw();
            let mut out = vec![0.0f32; c];
            for ch in 0..c {
                let s: f64 =
                    t.data[ch * h * w..(ch + 1) * h * w].iter().map(|&x| x as f64).sum();
                out[ch] = s as f32;
            }
            Tensor::new(vec![c], out)
        };
        self.push(Op::SumSpatial(a.0), value)
    }

    /// `[c] -> [c, h, w]`, repeating each channel value over the plane.
    pub fn broadcast_chan(&self, a: Var, h: usize, w: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            assert_eq!(t.shape.len(), 1);
            let c = t.shape[0];
            let mut out = vec![0.0f32; c * h * w];
            for ch in 0..c {
                out[ch * h * w..(ch + 1) * h * w].fill(t.data[ch]);
            }
            Tensor::new(vec![c, h, w], out)
        };
        self.push(Op::BroadcastChan(a.0), value)
    }

    /// Valid correlation of `[ci, h, w]` with weights `[co, ci, k, k]`.
    pub fn conv2d(&self, x: Var, w: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let tw = &nodes[w.0].value;
            let (ci, h, wd) = tx.chw();
            assert_eq!(tw.shape.len(), 4);
            let (co, wci, k) = (tw.shape[0], tw.shape[1], tw.shape[2]);
            assert_eq!(tw.shape[3], k);
            assert_eq!(wci, ci, "conv channel mismatch");
            assert!(h >= k && wd >= k, "input {h}x{wd} smaller than kernel {k}");
            let out = kernels::conv2d(self.exec, &tx.data, (ci, h, wd), &tw.data, (co, k));
            Tensor::new(vec![co, h - k + 1, wd - k + 1], out)
        };
        self.push(Op::Conv2d { x: x.0, w: w.0 }, value)
    }

    /// Adjoint of `conv2d` w.r.t. its input; produces `[ci, oh+k-1, ow+k-1]`.
    pub fn conv2d_input_grad(&self, g: Var, w: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let tg = &nodes[g.0].value;
            let tw = &nodes[w.0].value;
            let (co, oh, ow) = tg.chw();
            let (wco, ci, k) = (tw.shape[0], tw.shape[1], tw.shape[2]);
            assert_eq!(wco, co);
            let out =
                kernels::conv2d_input_grad(self.exec, &tg.data, (co, oh, ow), &tw.data, (ci, k));
            Tensor::new(vec![ci, oh + k - 1, ow + k - 1], out)
        };
        self.push(Op::ConvInputGrad { g: g.0, w: w.0 }, value)
    }

    /// Adjoint of `conv2d` w.r.t. its weights; produces `[co, ci, k, k]`.
    pub fn conv2d_weight_grad(&self, x: Var, g: Var, k: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let tg = &nodes[g.0].value;
            let (ci, h, w) = tx.chw();
            let (co, oh, ow) = tg.chw();
            let out = kernels::conv2d_weight_grad(
                self.exec,
                &tx.data,
                (ci, h, w),
                &tg.data,
                (co, oh, ow),
                k,
            );
            Tensor::new(vec![co, ci, k, k], out)
        };
        self.push(Op::ConvWeightGrad { x: x.0, g: g.0 }, value)
    }

    pub fn zero_pad(&self, a: Var, pad: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let (c, h, w) = t.chw();
            Tensor::new(
                vec![c, h + 2 * pad, w + 2 * pad],
                kernels::zero_pad(&t.data, (c, h, w), pad),
            )
        };
        self.push(Op::ZeroPad { a: a.0, pad }, value)
    }

    pub fn crop(&self, a: Var, pad: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let (c, h, w) = t.chw();
            assert!(h > 2 * pad && w > 2 * pad);
            Tensor::new(
                vec![c, h - 2 * pad, w - 2 * pad],
                kernels::crop(&t.data, (c, h, w), pad),
            )
        };
        self.push(Op::Crop { a: a.0, pad }, value)
    }

    /// Mean squared error between two same-shape vars.
    pub fn mse(&self, a: Var, b: Var) -> Var {
        let n = self.numel(a);
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        let s = self.sum_all(sq);
        self.affine(s, 1.0 / n as f32, 0.0)
    }

    /// A leaf holding an elementwise derivative mask of `a` (treated as a
    /// constant w.r.t. further differentiation, which is correct almost
    /// everywhere for the piecewise-linear ops).
    fn mask_of(&self, a: usize, f: impl Fn(f32) -> f32) -> Var {
        let t = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a].value;
            Tensor { shape: ta.shape.clone(), data: ta.data.iter().map(|&x| f(x)).collect() }
        };
        self.leaf(t)
    }

    /// Gradients of a scalar `output` w.r.t. `wrt`, emitted as new tape nodes
    /// (so they can be differentiated again). Vars in `wrt` that do not feed
    /// `output` get zero gradients.
    pub fn grad(&self, output: Var, wrt: &[Var]) -> Vec<Var> {
        assert_eq!(self.numel(output), 1, "grad target must be scalar");
        let n = output.0 + 1;

        // Nodes lying on a path from some wrt var to the output.
        let mut on_path = vec![false; n];
        for v in wrt {
            if v.0 < n {
                on_path[v.0] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for (i, node) in nodes.iter().take(n).enumerate() {
                if !on_path[i] && parents(&node.op).iter().any(|&p| on_path[p]) {
                    on_path[i] = true;
                }
            }
        }

        let mut cot: Vec<Option<Var>> = vec![None; n];
        cot[output.0] = Some(self.leaf(Tensor::scalar(1.0)));

        for i in (0..n).rev() {
            let Some(g) = cot[i] else { continue };
            if !on_path[i] {
                continue;
            }
            let op = self.nodes.borrow()[i].op.clone();
            let y = Var(i);
            let mut push_grad = |tape: &Tape, parent: usize, pg: Var| {
                cot[parent] = Some(match cot[parent] {
                    None => pg,
                    Some(prev) => tape.add(prev, pg),
                });
            };
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if on_path[a] {
                        push_grad(self, a, g);
                    }
                    if on_path[b] {
                        push_grad(self, b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if on_path[a] {
                        push_grad(self, a, g);
                    }
                    if on_path[b] {
                        let ng = self.neg(g);
                        push_grad(self, b, ng);
                    }
                }
                Op::Mul(a, b) => {
                    if on_path[a] {
                        let pg = self.mul(g, Var(b));
                        push_grad(self, a, pg);
                    }
                    if on_path[b] {
                        let pg = self.mul(g, Var(a));
                        push_grad(self, b, pg);
                    }
                }
                Op::Div(a, b) => {
                    if on_path[a] {
                        let pg = self.div(g, Var(b));
                        push_grad(self, a, pg);
                    }
                    if on_path[b] {
                        let gy = self.mul(g, y);
                        let q = self.div(gy, Var(b));
                        let pg = self.neg(q);
                        push_grad(self, b, pg);
                    }
                }
                Op::Affine { a, mul } => {
                    if on_path[a] {
                        let pg = self.affine(g, mul, 0.0);
                        push_grad(self, a, pg);
                    }
                }
                Op::Tanh(a) => {
                    if on_path[a] {
                        let y2 = self.mul(y, y);
                        let d = self.affine(y2, -1.0, 1.0);
                        let pg = self.mul(g, d);
                        push_grad(self, a, pg);
                    }
                }
                Op::Sqrt(a) => {
                    if on_path[a] {
                        let gh = self.affine(g, 0.5, 0.0);
                        let pg = self.div(gh, y);
                        push_grad(self, a, pg);
                    }
                }
                Op::LeakyRelu { a, slope } => {
                    if on_path[a] {
                        let mask = self.mask_of(a, |x| if x > 0.0 { 1.0 } else { slope });
                        let pg = self.mul(g, mask);
                        push_grad(self, a, pg);
                    }
                }
                Op::Clamp { a, lo, hi } => {
                    if on_path[a] {
                        let mask =
                            self.mask_of(a, |x| if x > lo && x < hi { 1.0 } else { 0.0 });
                        let pg = self.mul(g, mask);
                        push_grad(self, a, pg);
                    }
                }
                Op::SumAll(a) => {
                    if on_path[a] {
                        let pg = self.broadcast_all(g, self.shape_of(Var(a)));
                        push_grad(self, a, pg);
                    }
                }
                Op::BroadcastAll(a) => {
                    if on_path[a] {
                        let pg = self.sum_all(g);
                        push_grad(self, a, pg);
                    }
                }
                Op::SumSpatial(a) => {
                    if on_path[a] {
                        let shape = self.shape_of(Var(a));
                        let pg = self.broadcast_chan(g, shape[1], shape[2]);
                        push_grad(self, a, pg);
                    }
                }
                Op::BroadcastChan(a) => {
                    if on_path[a] {
                        let pg = self.sum_spatial(g);
                        push_grad(self, a, pg);
                    }
                }
                Op::Conv2d { x, w } => {
                    let k = self.shape_of(Var(w))[2];
                    if on_path[x] {
                        let pg = self.conv2d_input_grad(g, Var(w));
                        push_grad(self, x, pg);
                    }
                    if on_path[w] {
                        let pg = self.conv2d_weight_grad(Var(x), g, k);
                        push_grad(self, w, pg);
                    }
                }
                Op::ConvInputGrad { g: gp, w } => {
                    let k = self.shape_of(Var(w))[2];
                    if on_path[gp] {
                        let pg = self.conv2d(g, Var(w));
                        push_grad(self, gp, pg);
                    }
                    if on_path[w] {
                        let pg = self.conv2d_weight_grad(g, Var(gp), k);
                        push_grad(self, w, pg);
                    }
                }
                Op::ConvWeightGrad { x, g: gp } => {
                    if on_path[x] {
                        let pg = self.conv2d_input_grad(Var(gp), g);
                        push_grad(self, x, pg);
                    }
                    if on_path[gp] {
                        let pg = self.conv2d(Var(x), g);
                        push_grad(self, gp, pg);
                    }
                }
                Op::ZeroPad { a, pad } => {
                    if on_path[a] {
                        let pg = self.crop(g, pad);
                        push_grad(self, a, pg);
                    }
                }
                Op::Crop { a, pad } => {
                    if on_path[a] {
                        let pg = self.zero_pad(g, pad);
                        push_grad(self, a, pg);
                    }
                }
            }
        }

        wrt.iter()
            .map(|v| {
                cot[v.0].unwrap_or_else(|| self.leaf(Tensor::zeros(self.shape_of(*v))))
            })
            .collect()
    }
}
