//! Reverse-mode automatic differentiation on a recording tape.
//!
//! The engine provides exactly the primitives the sequence model needs:
//! mat-vec/mat-mat products, elementwise arithmetic, sigmoid/tanh, concat,
//! dot, softmax, inverted dropout, masked MAE and a weighted sum used by the
//! attention layer. All values are 64-bit floats. A [`Tape`] records one
//! forward computation; [`Tape::backward`] consumes it and returns gradients
//! for every parameter leaf.

mod gradcheck;

pub use gradcheck::{grad_check, grad_check_detailed, GradCheckReport};

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{MdamError, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Tensor shapes up to rank 2; all the model requires.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            Shape::Scalar => vec![],
            Shape::Vector(n) => vec![n],
            Shape::Matrix(r, c) => vec![r, c],
        }
    }
}

/// A dense 64-bit float tensor value.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.len() != data.len() {
            return Err(MdamError::ShapeMismatch {
                op: "Tensor::new",
                lhs: shape.dims(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Shape::Scalar,
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: Shape::Vector(data.len()),
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Shape::Matrix(rows, cols), data)
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            data: vec![0.0; shape.len()],
            shape,
        }
    }

    /// Uniform init in `[-scale, scale]`.
    pub fn uniform(shape: Shape, scale: f64, rng: &mut impl Rng) -> Self {
        let data = (0..shape.len())
            .map(|_| rng.gen_range(-scale..=scale))
            .collect();
        Self { shape, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Euclidean norm of the flattened data.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape_id: u64,
    id: u32,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: u32, b: u32 },
    MatVec { w: u32, x: u32 },
    Add { a: u32, b: u32 },
    Sub { a: u32, b: u32 },
    Hadamard { a: u32, b: u32 },
    Sigmoid { x: u32 },
    Tanh { x: u32 },
    Concat { parts: Vec<u32> },
    Dot { a: u32, b: u32 },
    Softmax { x: u32 },
    Dropout { x: u32, mask: Vec<f64> },
    MaskedMae { pred: u32, target: u32, mask: Vec<bool>, count: usize },
    WeightedSum { weights: u32, parts: Vec<u32> },
    MulConst { x: u32, c: f64 },
    ApplyMask { x: u32, mask: Vec<bool> },
}

struct Node {
    shape: Shape,
    values: Vec<f64>,
    needs_grad: bool,
    is_param: bool,
    op: Op,
}

/// Gradients harvested from one backward pass, addressable by the parameter
/// leaves' [`Var`] handles.
pub struct Gradients {
    tape_id: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Result<&Tensor> {
        if v.tape_id != self.tape_id {
            return Err(MdamError::Tape("gradient lookup from a different tape".into()));
        }
        self.grads
            .get(v.id as usize)
            .and_then(|g| g.as_ref())
            .ok_or_else(|| MdamError::Tape(format!("no gradient recorded for node {}", v.id)))
    }

    /// Like [`get`](Self::get) but treats an absent entry as "no gradient
    /// path" and yields `None` instead of an error.
    pub fn try_get(&self, v: Var) -> Option<&Tensor> {
        if v.tape_id != self.tape_id {
            return None;
        }
        self.grads.get(v.id as usize).and_then(|g| g.as_ref())
    }
}

/// Recording tape for one forward pass.
pub struct Tape {
    tape_id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            tape_id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, shape: Shape, values: Vec<f64>, needs_grad: bool, is_param: bool, op: Op) -> Var {
        debug_assert_eq!(shape.len(), values.len());
        let id = self.nodes.len() as u32;
        self.nodes.push(Node {
            shape,
            values,
            needs_grad,
            is_param,
            op,
        });
        Var {
            tape_id: self.tape_id,
            id,
        }
    }

    fn check(&self, v: Var, op: &'static str) -> Result<usize> {
        if v.tape_id != self.tape_id {
            return Err(MdamError::Tape(format!("{op}: variable belongs to a different tape")));
        }
        let ix = v.id as usize;
        if ix >= self.nodes.len() {
            return Err(MdamError::Tape(format!("{op}: variable index out of range")));
        }
        Ok(ix)
    }

    /// Register a constant leaf (no gradient).
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape, t.data.clone(), false, false, Op::Leaf)
    }

    /// Register a trainable leaf; its gradient is retained by `backward`.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape, t.data.clone(), true, true, Op::Leaf)
    }

    /// Register a leaf with explicit gradient tracking.
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.push(t.shape, t.data.clone(), requires_grad, requires_grad, Op::Leaf)
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.id as usize].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.id as usize].values
    }

    pub fn value_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.id as usize];
        Tensor {
            shape: n.shape,
            data: n.values.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn needs(&self, ix: usize) -> bool {
        self.nodes[ix].needs_grad
    }

    /// Matrix product `a (m x k) · b (k x n) -> (m x n)`, or mat-vec when
    /// `b` is a vector.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ia = self.check(a, "matmul")?;
        let ib = self.check(b, "matmul")?;
        match (self.nodes[ia].shape, self.nodes[ib].shape) {
            (Shape::Matrix(m, k), Shape::Matrix(k2, n)) => {
                if k != k2 {
                    return Err(self.shape_err("matmul", ia, ib));
                }
                let mut out = vec![0.0; m * n];
                mm_nn(
                    &self.nodes[ia].values,
                    &self.nodes[ib].values,
                    &mut out,
                    m,
                    k,
                    n,
                );
                let needs = self.needs(ia) || self.needs(ib);
                Ok(self.push(
                    Shape::Matrix(m, n),
                    out,
                    needs,
                    false,
                    Op::MatMul {
                        a: a.id,
                        b: b.id,
                    },
                ))
            }
            (Shape::Matrix(m, k), Shape::Vector(k2)) => {
                if k != k2 {
                    return Err(self.shape_err("matmul", ia, ib));
                }
                let mut out = vec![0.0; m];
                matvec(&self.nodes[ia].values, &self.nodes[ib].values, &mut out, m, k);
                let needs = self.needs(ia) || self.needs(ib);
                Ok(self.push(
                    Shape::Vector(m),
                    out,
                    needs,
                    false,
                    Op::MatVec { w: a.id, x: b.id },
                ))
            }
            _ => Err(self.shape_err("matmul", ia, ib)),
        }
    }

    fn shape_err(&self, op: &'static str, ia: usize, ib: usize) -> MdamError {
        MdamError::ShapeMismatch {
            op,
            lhs: self.nodes[ia].shape.dims(),
            rhs: self.nodes[ib].shape.dims(),
        }
    }

    fn elementwise(&mut self, a: Var, b: Var, name: &'static str) -> Result<(usize, usize)> {
        let ia = self.check(a, name)?;
        let ib = self.check(b, name)?;
        if self.nodes[ia].shape != self.nodes[ib].shape {
            return Err(self.shape_err(name, ia, ib));
        }
        Ok((ia, ib))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.elementwise(a, b, "add")?;
        let out: Vec<f64> = self.nodes[ia]
            .values
            .iter()
            .zip(&self.nodes[ib].values)
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(ia) || self.needs(ib);
        Ok(self.push(
            self.nodes[ia].shape,
            out,
            needs,
            false,
            Op::Add { a: a.id, b: b.id },
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.elementwise(a, b, "sub")?;
        let out: Vec<f64> = self.nodes[ia]
            .values
            .iter()
            .zip(&self.nodes[ib].values)
            .map(|(x, y)| x - y)
            .collect();
        let needs = self.needs(ia) || self.needs(ib);
        Ok(self.push(
            self.nodes[ia].shape,
            out,
            needs,
            false,
            Op::Sub { a: a.id, b: b.id },
        ))
    }

    /// Elementwise product.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.elementwise(a, b, "hadamard")?;
        let out: Vec<f64> = self.nodes[ia]
            .values
            .iter()
            .zip(&self.nodes[ib].values)
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(ia) || self.needs(ib);
        Ok(self.push(
            self.nodes[ia].shape,
            out,
            needs,
            false,
            Op::Hadamard { a: a.id, b: b.id },
        ))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x, "sigmoid")?;
        let out: Vec<f64> = self.nodes[ix]
            .values
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let needs = self.needs(ix);
        Ok(self.push(self.nodes[ix].shape, out, needs, false, Op::Sigmoid { x: x.id }))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x, "tanh")?;
        let out: Vec<f64> = self.nodes[ix].values.iter().map(|&v| v.tanh()).collect();
        let needs = self.needs(ix);
        Ok(self.push(self.nodes[ix].shape, out, needs, false, Op::Tanh { x: x.id }))
    }

    /// Concatenate vectors along their single axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(MdamError::ShapeMismatch {
                op: "concat",
                lhs: vec![0],
                rhs: vec![],
            });
        }
        let mut total = 0;
        let mut needs = false;
        for &p in parts {
            let ip = self.check(p, "concat")?;
            match self.nodes[ip].shape {
                Shape::Vector(n) => total += n,
                Shape::Scalar => total += 1,
                s => {
                    return Err(MdamError::ShapeMismatch {
                        op: "concat",
                        lhs: s.dims(),
                        rhs: vec![],
                    })
                }
            }
            needs |= self.needs(ip);
        }
        let mut out = Vec::with_capacity(total);
        for &p in parts {
            out.extend_from_slice(&self.nodes[p.id as usize].values);
        }
        Ok(self.push(
            Shape::Vector(total),
            out,
            needs,
            false,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
            },
        ))
    }

    /// Inner product of two equal-length vectors; returns a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.elementwise(a, b, "dot")?;
        if !matches!(self.nodes[ia].shape, Shape::Vector(_)) {
            return Err(self.shape_err("dot", ia, ib));
        }
        let v = self.nodes[ia]
            .values
            .iter()
            .zip(&self.nodes[ib].values)
            .map(|(x, y)| x * y)
            .sum();
        let needs = self.needs(ia) || self.needs(ib);
        Ok(self.push(
            Shape::Scalar,
            vec![v],
            needs,
            false,
            Op::Dot { a: a.id, b: b.id },
        ))
    }

    /// Numerically stable softmax over a vector.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x, "softmax")?;
        let n = match self.nodes[ix].shape {
            Shape::Vector(n) if n >= 1 => n,
            s => {
                return Err(MdamError::ShapeMismatch {
                    op: "softmax",
                    lhs: s.dims(),
                    rhs: vec![],
                })
            }
        };
        let vals = &self.nodes[ix].values;
        let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = vals.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let out: Vec<f64> = exps.iter().map(|&e| e / sum).collect();
        let needs = self.needs(ix);
        Ok(self.push(Shape::Vector(n), out, needs, false, Op::Softmax { x: x.id }))
    }

    /// Inverted dropout. In training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1/(1-rate)`; in eval
    /// mode (or at rate 0) the input passes through unchanged.
    pub fn dropout(
        &mut self,
        x: Var,
        rate: f64,
        rng: &mut impl Rng,
        training: bool,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(MdamError::Config(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        let ix = self.check(x, "dropout")?;
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let mask: Vec<f64> = (0..self.nodes[ix].values.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let out: Vec<f64> = self.nodes[ix]
            .values
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let needs = self.needs(ix);
        Ok(self.push(
            self.nodes[ix].shape,
            out,
            needs,
            false,
            Op::Dropout { x: x.id, mask },
        ))
    }

    /// Mean absolute error over the channels where `mask` is true.
    pub fn masked_mae(&mut self, pred: Var, target: Var, mask: &[bool]) -> Result<Var> {
        let (ip, it) = self.elementwise(pred, target, "masked_mae")?;
        if self.nodes[ip].shape.len() != mask.len() {
            return Err(MdamError::ShapeMismatch {
                op: "masked_mae",
                lhs: self.nodes[ip].shape.dims(),
                rhs: vec![mask.len()],
            });
        }
        let count = mask.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(MdamError::EmptyPool("masked_mae mask is all false".into()));
        }
        let mut acc = 0.0;
        for i in 0..mask.len() {
            if mask[i] {
                acc += (self.nodes[ip].values[i] - self.nodes[it].values[i]).abs();
            }
        }
        let needs = self.needs(ip) || self.needs(it);
        Ok(self.push(
            Shape::Scalar,
            vec![acc / count as f64],
            needs,
            false,
            Op::MaskedMae {
                pred: pred.id,
                target: target.id,
                mask: mask.to_vec(),
                count,
            },
        ))
    }

    /// `sum_i weights[i] * parts[i]` for equal-length vector parts.
    pub fn weighted_sum(&mut self, weights: Var, parts: &[Var]) -> Result<Var> {
        let iw = self.check(weights, "weighted_sum")?;
        let k = match self.nodes[iw].shape {
            Shape::Vector(k) => k,
            s => {
                return Err(MdamError::ShapeMismatch {
                    op: "weighted_sum",
                    lhs: s.dims(),
                    rhs: vec![parts.len()],
                })
            }
        };
        if k != parts.len() || k == 0 {
            return Err(MdamError::ShapeMismatch {
                op: "weighted_sum",
                lhs: vec![k],
                rhs: vec![parts.len()],
            });
        }
        let mut needs = self.needs(iw);
        let dim = match self.nodes[self.check(parts[0], "weighted_sum")?].shape {
            Shape::Vector(d) => d,
            s => {
                return Err(MdamError::ShapeMismatch {
                    op: "weighted_sum",
                    lhs: s.dims(),
                    rhs: vec![],
                })
            }
        };
        for &p in parts {
            let ipp = self.check(p, "weighted_sum")?;
            if self.nodes[ipp].shape != Shape::Vector(dim) {
                return Err(self.shape_err("weighted_sum", ipp, iw));
            }
            needs |= self.needs(ipp);
        }
        let mut out = vec![0.0; dim];
        for (s, &p) in parts.iter().enumerate() {
            let w = self.nodes[iw].values[s];
            for (o, v) in out.iter_mut().zip(&self.nodes[p.id as usize].values) {
                *o += w * v;
            }
        }
        Ok(self.push(
            Shape::Vector(dim),
            out,
            needs,
            false,
            Op::WeightedSum {
                weights: weights.id,
                parts: parts.iter().map(|p| p.id).collect(),
            },
        ))
    }

    /// Multiply by a compile-time constant.
    pub fn mul_const(&mut self, x: Var, c: f64) -> Result<Var> {
        let ix = self.check(x, "mul_const")?;
        let out: Vec<f64> = self.nodes[ix].values.iter().map(|v| v * c).collect();
        let needs = self.needs(ix);
        Ok(self.push(
            self.nodes[ix].shape,
            out,
            needs,
            false,
            Op::MulConst { x: x.id, c },
        ))
    }

    /// Keep entries where `mask` is true, replace the rest with `fill`.
    /// Gradient flows only through kept entries.
    pub fn apply_mask(&mut self, x: Var, mask: &[bool], fill: f64) -> Result<Var> {
        let ix = self.check(x, "apply_mask")?;
        if self.nodes[ix].shape.len() != mask.len() {
            return Err(MdamError::ShapeMismatch {
                op: "apply_mask",
                lhs: self.nodes[ix].shape.dims(),
                rhs: vec![mask.len()],
            });
        }
        let out: Vec<f64> = self.nodes[ix]
            .values
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { v } else { fill })
            .collect();
        let needs = self.needs(ix);
        Ok(self.push(
            self.nodes[ix].shape,
            out,
            needs,
            false,
            Op::ApplyMask {
                x: x.id,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Run the backward pass from a scalar loss. Consumes the tape; gradients
    /// of all parameter leaves are returned.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if loss.tape_id != self.tape_id {
            return Err(MdamError::Tape(
                "backward: loss was produced on a different tape".into(),
            ));
        }
        let loss_ix = loss.id as usize;
        if loss_ix >= self.nodes.len() {
            return Err(MdamError::Tape("backward: loss index out of range".into()));
        }
        if self.nodes[loss_ix].shape != Shape::Scalar {
            return Err(MdamError::Tape("backward: loss is not a scalar".into()));
        }
        if !self.nodes[loss_ix].values[0].is_finite() {
            return Err(MdamError::NonFinite("loss".into()));
        }

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss_ix] = Some(vec![1.0]);

        for ix in (0..=loss_ix).rev() {
            let Some(gy) = grads[ix].take() else {
                continue;
            };
            let keep = self.nodes[ix].is_param;
            self.backprop_node(ix, &gy, &mut grads)?;
            if keep {
                grads[ix] = Some(gy);
            }
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(ix, g)| {
                g.map(|data| Tensor {
                    shape: self.nodes[ix].shape,
                    data,
                })
            })
            .collect();
        Ok(Gradients {
            tape_id: self.tape_id,
            grads,
        })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: u32,
        f: impl FnOnce(&mut [f64]),
    ) {
        let t = target as usize;
        if !self.nodes[t].needs_grad {
            return;
        }
        let buf = grads[t].get_or_insert_with(|| vec![0.0; self.nodes[t].shape.len()]);
        f(buf);
    }

    fn backprop_node(
        &self,
        ix: usize,
        gy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let node = &self.nodes[ix];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = match self.nodes[*a as usize].shape {
                    Shape::Matrix(m, k) => (m, k),
                    _ => unreachable!(),
                };
                let n = match self.nodes[*b as usize].shape {
                    Shape::Matrix(_, n) => n,
                    _ => unreachable!(),
                };
                let av = &self.nodes[*a as usize].values;
                let bv = &self.nodes[*b as usize].values;
                self.accumulate(grads, *a, |ga| mm_nt_acc(gy, bv, ga, m, n, k));
                self.accumulate(grads, *b, |gb| mm_tn_acc(av, gy, gb, m, k, n));
            }
            Op::MatVec { w, x } => {
                let (m, k) = match self.nodes[*w as usize].shape {
                    Shape::Matrix(m, k) => (m, k),
                    _ => unreachable!(),
                };
                let wv = &self.nodes[*w as usize].values;
                let xv = &self.nodes[*x as usize].values;
                self.accumulate(grads, *w, |gw| outer_acc(gy, xv, gw, m, k));
                self.accumulate(grads, *x, |gx| matvec_t_acc(wv, gy, gx, m, k));
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |g| axpy(1.0, gy, g));
                self.accumulate(grads, *b, |g| axpy(1.0, gy, g));
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, |g| axpy(1.0, gy, g));
                self.accumulate(grads, *b, |g| axpy(-1.0, gy, g));
            }
            Op::Hadamard { a, b } => {
                let av = &self.nodes[*a as usize].values;
                let bv = &self.nodes[*b as usize].values;
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * bv[i];
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * av[i];
                    }
                });
            }
            Op::Sigmoid { x } => {
                let y = &node.values;
                self.accumulate(grads, *x, |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Tanh { x } => {
                let y = &node.values;
                self.accumulate(grads, *x, |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p as usize].shape.len();
                    self.accumulate(grads, p, |g| axpy(1.0, &gy[offset..offset + len], g));
                    offset += len;
                }
            }
            Op::Dot { a, b } => {
                let g = gy[0];
                let av = &self.nodes[*a as usize].values;
                let bv = &self.nodes[*b as usize].values;
                self.accumulate(grads, *a, |ga| axpy(g, bv, ga));
                self.accumulate(grads, *b, |gb| axpy(g, av, gb));
            }
            Op::Softmax { x } => {
                let y = &node.values;
                let dot: f64 = y.iter().zip(gy).map(|(yi, gi)| yi * gi).sum();
                self.accumulate(grads, *x, |g| {
                    for i in 0..g.len() {
                        g[i] += y[i] * (gy[i] - dot);
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * mask[i];
                    }
                });
            }
            Op::MaskedMae {
                pred,
                target,
                mask,
                count,
            } => {
                let g = gy[0] / *count as f64;
                let pv = &self.nodes[*pred as usize].values;
                let tv = &self.nodes[*target as usize].values;
                let signs: Vec<f64> = pv
                    .iter()
                    .zip(tv)
                    .zip(mask)
                    .map(|((p, t), &m)| if m { (p - t).signum() } else { 0.0 })
                    .collect();
                self.accumulate(grads, *pred, |gp| axpy(g, &signs, gp));
                self.accumulate(grads, *target, |gt| axpy(-g, &signs, gt));
            }
            Op::WeightedSum { weights, parts } => {
                let wv = &self.nodes[*weights as usize].values;
                for (s, &p) in parts.iter().enumerate() {
                    let w = wv[s];
                    self.accumulate(grads, p, |g| axpy(w, gy, g));
                }
                self.accumulate(grads, *weights, |gw| {
                    for (s, &p) in parts.iter().enumerate() {
                        let pv = &self.nodes[p as usize].values;
                        gw[s] += pv.iter().zip(gy).map(|(v, gi)| v * gi).sum::<f64>();
                    }
                });
            }
            Op::MulConst { x, c } => {
                self.accumulate(grads, *x, |g| axpy(*c, gy, g));
            }
            Op::ApplyMask { x, mask, .. } => {
                self.accumulate(grads, *x, |g| {
                    for i in 0..g.len() {
                        if mask[i] {
                            g[i] += gy[i];
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

// Dense kernels. Row-major layouts; inner loops are written to vectorize.

fn mm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += dC (m x n) · B^T (n x k)` where B is `(k x n)` row-major.
fn mm_nt_acc(dc: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            *o += dcrow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out += A^T (k x m) · dC (m x n)` where A is `(m x k)` row-major.
fn mm_tn_acc(a: &[f64], dc: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let dcrow = &dc[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &dv) in orow.iter_mut().zip(dcrow) {
                *o += av * dv;
            }
        }
    }
}

fn matvec(w: &[f64], x: &[f64], out: &mut [f64], m: usize, k: usize) {
    for i in 0..m {
        let row = &w[i * k..(i + 1) * k];
        out[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

/// `dx += W^T · dy`.
fn matvec_t_acc(w: &[f64], dy: &[f64], dx: &mut [f64], m: usize, k: usize) {
    for i in 0..m {
        let row = &w[i * k..(i + 1) * k];
        let g = dy[i];
        if g != 0.0 {
            for (x, &wv) in dx.iter_mut().zip(row) {
                *x += g * wv;
            }
        }
    }
}

/// `dW += dy ⊗ x`.
fn outer_acc(dy: &[f64], x: &[f64], dw: &mut [f64], m: usize, k: usize) {
    for i in 0..m {
        let g = dy[i];
        if g != 0.0 {
            let row = &mut dw[i * k..(i + 1) * k];
            for (w, &xv) in row.iter_mut().zip(x) {
                *w += g * xv;
            }
        }
    }
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn vec_var(tape: &mut Tape, data: &[f64]) -> Var {
        tape.constant(&Tensor::vector(data.to_vec()))
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape.constant(&Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.constant(&Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = tape.matmul(eye, b).unwrap();
        assert_eq!(tape.value(c), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = tape.constant(&Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        match tape.matmul(a, b) {
            Err(MdamError::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn sigmoid_tanh_at_zero() {
        let mut tape = Tape::new();
        let x = vec_var(&mut tape, &[0.0]);
        let s = tape.sigmoid(x).unwrap();
        let t = tape.tanh(x).unwrap();
        assert_eq!(tape.value(s), &[0.5]);
        assert_eq!(tape.value(t), &[0.0]);
    }

    #[test]
    fn dot_hand_arithmetic() {
        let mut tape = Tape::new();
        let a = vec_var(&mut tape, &[1.0, 2.0, 3.0]);
        let b = vec_var(&mut tape, &[4.0, 5.0, 6.0]);
        let d = tape.dot(a, b).unwrap();
        assert_eq!(tape.value(d), &[32.0]);
    }

    #[test]
    fn softmax_uniform_and_singleton() {
        let mut tape = Tape::new();
        let x = vec_var(&mut tape, &[2.5, 2.5, 2.5]);
        let y = tape.softmax(x).unwrap();
        for v in tape.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let single = vec_var(&mut tape, &[-7.25]);
        let y1 = tape.softmax(single).unwrap();
        assert_eq!(tape.value(y1), &[1.0]);
    }

    #[test]
    fn softmax_two_logits_matches_logistic_oracle() {
        // softmax([1, 2]) = [1/(1+e), e/(1+e)]; reference values evaluated
        // with 50-digit arithmetic and rounded to nearest f64.
        let mut tape = Tape::new();
        let x = vec_var(&mut tape, &[1.0, 2.0]);
        let y = tape.softmax(x).unwrap();
        let v = tape.value(y);
        assert!((v[0] - 0.268_941_421_369_995_12).abs() < 1e-12);
        assert!((v[1] - 0.731_058_578_630_004_88).abs() < 1e-12);
        assert!((v[0] + v[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut rng = stream_rng(11, 0);
        for _ in 0..50 {
            let n = rng.gen_range(1..8);
            let base: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let shift = rng.gen_range(-100.0..100.0);
            let shifted: Vec<f64> = base.iter().map(|v| v + shift).collect();
            let mut tape = Tape::new();
            let a = vec_var(&mut tape, &base);
            let b = vec_var(&mut tape, &shifted);
            let ya = tape.softmax(a).unwrap();
            let yb = tape.softmax(b).unwrap();
            let (va, vb) = (tape.value(ya).to_vec(), tape.value(yb).to_vec());
            let sum: f64 = va.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for (x, y) in va.iter().zip(&vb) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_empty_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::vector(vec![]));
        assert!(tape.softmax(x).is_err());
    }

    #[test]
    fn dropout_eval_and_zero_rate_are_identity() {
        let mut rng = stream_rng(3, 0);
        let mut tape = Tape::new();
        let x = vec_var(&mut tape, &[1.0, -2.0, 3.0]);
        let eval = tape.dropout(x, 0.5, &mut rng, false).unwrap();
        assert_eq!(eval, x);
        let zero = tape.dropout(x, 0.0, &mut rng, true).unwrap();
        assert_eq!(zero, x);
    }

    #[test]
    fn dropout_mask_reproducible_under_seed() {
        let run = |seed: u64| {
            let mut rng = stream_rng(seed, 9);
            let mut tape = Tape::new();
            let x = vec_var(&mut tape, &[1.0; 64]);
            let y = tape.dropout(x, 0.2, &mut rng, true).unwrap();
            tape.value(y).to_vec()
        };
        assert_eq!(run(42), run(42));
        assert_ne!(run(42), run(43));
        // survivors carry the inverted-dropout scale
        for v in run(42) {
            assert!(v == 0.0 || (v - 1.25).abs() < 1e-15);
        }
    }

    #[test]
    fn dropout_bad_rate_rejected() {
        let mut rng = stream_rng(0, 0);
        let mut tape = Tape::new();
        let x = vec_var(&mut tape, &[1.0]);
        assert!(tape.dropout(x, 1.0, &mut rng, true).is_err());
        assert!(tape.dropout(x, -0.1, &mut rng, true).is_err());
    }

    #[test]
    fn masked_mae_values() {
        let mut tape = Tape::new();
        let p = vec_var(&mut tape, &[1.0, -1.0]);
        let t = vec_var(&mut tape, &[0.0, 0.0]);
        let l = tape.masked_mae(p, t, &[true, true]).unwrap();
        assert_eq!(tape.value(l), &[1.0]);

        let p2 = vec_var(&mut tape, &[1.0, 5.0]);
        let t2 = vec_var(&mut tape, &[0.0, 0.0]);
        let l2 = tape.masked_mae(p2, t2, &[true, false]).unwrap();
        assert_eq!(tape.value(l2), &[1.0]);

        let l3 = tape.masked_mae(p2, p2, &[true, true]).unwrap();
        assert_eq!(tape.value(l3), &[0.0]);

        assert!(matches!(
            tape.masked_mae(p2, t2, &[false, false]),
            Err(MdamError::EmptyPool(_))
        ));
    }

    #[test]
    fn backward_linear_grad_is_input() {
        let mut tape = Tape::new();
        let w = tape.param(&Tensor::vector(vec![0.3, -0.7, 2.0]));
        let x = vec_var(&mut tape, &[4.0, 5.0, 6.0]);
        let loss = tape.dot(w, x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data, vec![4.0, 5.0, 6.0]);
    }

    #[test]
    fn backward_sigmoid_grad_quarter_at_zero() {
        let mut tape = Tape::new();
        let w = tape.param(&Tensor::vector(vec![0.0]));
        let s = tape.sigmoid(w).unwrap();
        let one = vec_var(&mut tape, &[1.0]);
        let loss = tape.dot(s, one).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!((grads.get(w).unwrap().data[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_foreign_and_nonscalar_losses() {
        let mut other = Tape::new();
        let foreign = other.constant(&Tensor::scalar(1.0));

        let tape = Tape::new();
        assert!(matches!(tape.backward(foreign), Err(MdamError::Tape(_))));

        let mut tape = Tape::new();
        let v = tape.constant(&Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(v), Err(MdamError::Tape(_))));
    }

    #[test]
    fn backward_two_layer_net_matches_finite_differences() {
        // y = tanh(W2 · sigmoid(W1 x + b1) + b2), loss = masked MAE vs target
        let mut rng = stream_rng(17, 0);
        let w1 = Tensor::uniform(Shape::Matrix(4, 3), 0.8, &mut rng);
        let b1 = Tensor::uniform(Shape::Vector(4), 0.5, &mut rng);
        let w2 = Tensor::uniform(Shape::Matrix(2, 4), 0.8, &mut rng);
        let b2 = Tensor::uniform(Shape::Vector(2), 0.5, &mut rng);
        let x = Tensor::vector(vec![0.3, -1.2, 0.8]);
        let t = Tensor::vector(vec![0.25, -0.5]);

        let f = |tape: &mut Tape, params: &[Var]| {
            let xv = tape.constant(&x);
            let tv = tape.constant(&t);
            let h = tape.matmul(params[0], xv)?;
            let h = tape.add(h, params[1])?;
            let h = tape.sigmoid(h)?;
            let o = tape.matmul(params[2], h)?;
            let o = tape.add(o, params[3])?;
            let o = tape.tanh(o)?;
            tape.masked_mae(o, tv, &[true, true])
        };
        let err = grad_check(f, &[w1, b1, w2, b2], 1e-5).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn gradients_are_deterministic_across_identical_tapes() {
        let build = || {
            let mut rng = stream_rng(23, 5);
            let w = Tensor::uniform(Shape::Matrix(6, 6), 0.7, &mut rng);
            let x = Tensor::uniform(Shape::Vector(6), 1.0, &mut rng);
            let mut tape = Tape::new();
            let wv = tape.param(&w);
            let xv = tape.constant(&x);
            let h = tape.matmul(wv, xv).unwrap();
            let h = tape.tanh(h).unwrap();
            let mut drop_rng = stream_rng(23, 6);
            let h = tape.dropout(h, 0.2, &mut drop_rng, true).unwrap();
            let s = tape.softmax(h).unwrap();
            let loss = tape.dot(s, h).unwrap();
            let grads = tape.backward(loss).unwrap();
            grads.get(wv).unwrap().data.clone()
        };
        let a = build();
        let b = build();
        let abits: Vec<u64> = a.iter().map(|v| v.to_bits()).collect();
        let bbits: Vec<u64> = b.iter().map(|v| v.to_bits()).collect();
        assert_eq!(abits, bbits);
    }

    #[test]
    fn weighted_sum_matches_manual_accumulation() {
        let mut tape = Tape::new();
        let w = vec_var(&mut tape, &[0.25, 0.75]);
        let p1 = vec_var(&mut tape, &[1.0, 2.0]);
        let p2 = vec_var(&mut tape, &[3.0, -4.0]);
        let c = tape.weighted_sum(w, &[p1, p2]).unwrap();
        assert_eq!(tape.value(c), &[0.25 + 2.25, 0.5 - 3.0]);
    }

    #[test]
    fn concat_splits_gradient_back() {
        let mut tape = Tape::new();
        let a = tape.param(&Tensor::vector(vec![1.0, 2.0]));
        let b = tape.param(&Tensor::vector(vec![3.0]));
        let c = tape.concat(&[a, b]).unwrap();
        let weights = vec_var(&mut tape, &[10.0, 20.0, 30.0]);
        let loss = tape.dot(c, weights).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data, vec![10.0, 20.0]);
        assert_eq!(grads.get(b).unwrap().data, vec![30.0]);
    }

    #[test]
    fn per_primitive_grad_checks_on_random_shapes() {
        let mut rng = stream_rng(31, 0);
        for trial in 0..8 {
            let n = 2 + (trial % 4);
            let a = Tensor::uniform(Shape::Vector(n), 1.2, &mut rng);
            let b = Tensor::uniform(Shape::Vector(n), 1.2, &mut rng);
            let m = Tensor::uniform(Shape::Matrix(n, n), 0.8, &mut rng);
            let mask: Vec<bool> = (0..n).map(|i| i % 2 == 0 || n < 3).collect();

            let f = move |tape: &mut Tape, params: &[Var]| {
                let h = tape.matmul(params[2], params[0])?;
                let h = tape.tanh(h)?;
                let s = tape.sigmoid(params[1])?;
                let had = tape.hadamard(h, s)?;
                let sm = tape.softmax(had)?;
                let diff = tape.sub(sm, params[1])?;
                let cat = tape.concat(&[diff, h])?;
                let scaled = tape.mul_const(cat, 1.7)?;
                let zeros = Tensor::zeros(tape.shape(scaled));
                let tv = tape.constant(&zeros);
                let full_mask: Vec<bool> = mask.iter().chain(mask.iter()).copied().collect();
                tape.masked_mae(scaled, tv, &full_mask)
            };
            let err = grad_check(f, &[a, b, m], 1e-5).unwrap();
            assert!(err < 1e-4, "trial {trial}: max relative error {err}");
        }
    }
}
