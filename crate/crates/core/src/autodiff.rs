//! Reverse-mode automatic differentiation over a small fixed layer
//! vocabulary (affine, tanh, softmax, distance losses) plus gradient descent
//! with decoupled weight decay.
//!
//! Graphs are built per training step, forwarded once, and differentiated
//! backwards from a scalar loss. Teacher branches enter as constants, so
//! stop-gradient semantics hold by construction: only `Param` nodes receive
//! gradients.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::metric::{self, DistanceMetric, TeacherSide};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type NodeId = usize;

enum Op<T: Scalar> {
    Input(String),
    Param(String),
    Const(Tensor<T>),
    Add(NodeId, NodeId),
    Scale(NodeId, T),
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Tanh(NodeId),
    Softmax(NodeId),
    Dist {
        metric: DistanceMetric,
        teacher: TeacherSide<T>,
        student: NodeId,
    },
}

pub struct Graph<T: Scalar = f64> {
    ops: Vec<Op<T>>,
    params: BTreeMap<String, Tensor<T>>,
    input_names: BTreeSet<String>,
    outputs: BTreeMap<String, NodeId>,
    values: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            ops: Vec::new(),
            params: BTreeMap::new(),
            input_names: BTreeSet::new(),
            outputs: BTreeMap::new(),
            values: Vec::new(),
        }
    }

    fn push(&mut self, op: Op<T>) -> NodeId {
        self.ops.push(op);
        self.ops.len() - 1
    }

    /// Runtime input, bound at `forward`; receives no gradient.
    pub fn input(&mut self, name: &str) -> NodeId {
        self.input_names.insert(name.to_string());
        self.push(Op::Input(name.to_string()))
    }

    /// Trainable parameter with its current value.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> NodeId {
        self.params.insert(name.to_string(), value);
        self.push(Op::Param(name.to_string()))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Const(value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        self.push(Op::Scale(x, c))
    }

    /// `x·W + b` with `x: B×d`, `W: d×h`, `b: h`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Affine { x, w, b })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Tanh(x))
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Softmax(x))
    }

    /// Distance loss against frozen teacher logits.
    pub fn dist_from_logits(
        &mut self,
        metric: DistanceMetric,
        teacher_logits: &Tensor<T>,
        student: NodeId,
    ) -> NodeId {
        self.push(Op::Dist {
            metric,
            teacher: TeacherSide::from_logits(teacher_logits),
            student,
        })
    }

    /// Distance loss against an explicit target distribution (e.g. one-hot).
    pub fn dist_from_probs(
        &mut self,
        metric: DistanceMetric,
        target_probs: &Tensor<T>,
        student: NodeId,
    ) -> NodeId {
        self.push(Op::Dist {
            metric,
            teacher: TeacherSide::from_probs(target_probs),
            student,
        })
    }

    pub fn mark_output(&mut self, name: &str, node: NodeId) {
        self.outputs.insert(name.to_string(), node);
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    /// Overrides a parameter's current value (same shape required).
    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        match self.params.get(name) {
            Some(old) if old.shape() == value.shape() => {
                self.params.insert(name.to_string(), value);
                Ok(())
            }
            Some(old) => Err(Error::Shape(format!(
                "parameter '{name}' is {:?}, got {:?}",
                old.shape(),
                value.shape()
            ))),
            None => Err(Error::Graph(format!("no parameter '{name}'"))),
        }
    }

    /// Runs every node in insertion order and returns the marked outputs.
    pub fn forward(
        &mut self,
        inputs: &BTreeMap<String, Tensor<T>>,
    ) -> Result<BTreeMap<String, Tensor<T>>> {
        self.values = Vec::with_capacity(self.ops.len());
        for idx in 0..self.ops.len() {
            let value = match &self.ops[idx] {
                Op::Input(name) => inputs
                    .get(name)
                    .cloned()
                    .ok_or_else(|| Error::Graph(format!("unbound input '{name}'")))?,
                Op::Param(name) => self.params[name].clone(),
                Op::Const(t) => t.clone(),
                Op::Add(a, b) => self.val(*a)?.add(self.val(*b)?)?,
                Op::Scale(x, c) => self.val(*x)?.scale(*c),
                Op::Affine { x, w, b } => self
                    .val(*x)?
                    .matmul(self.val(*w)?)?
                    .add_row(self.val(*b)?)?,
                Op::Tanh(x) => self.val(*x)?.map(|v| v.tanh()),
                Op::Softmax(x) => self.val(*x)?.softmax(),
                Op::Dist {
                    metric,
                    teacher,
                    student,
                } => Tensor::scalar(metric::loss_forward(*metric, teacher, self.val(*student)?)?),
            };
            self.values.push(Some(value));
        }
        let mut out = BTreeMap::new();
        for (name, id) in &self.outputs {
            out.insert(name.clone(), self.val(*id)?.clone());
        }
        Ok(out)
    }

    fn val(&self, id: NodeId) -> Result<&Tensor<T>> {
        self.values
            .get(id)
            .and_then(|v| v.as_ref())
            .ok_or_else(|| Error::Graph(format!("node {id} has no forward value")))
    }

    /// Value of any node from the last forward pass.
    pub fn value(&self, id: NodeId) -> Result<&Tensor<T>> {
        self.val(id)
    }

    /// Gradient of the scalar `loss` node for every trainable parameter.
    /// Parameters the loss does not depend on get zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<BTreeMap<String, Tensor<T>>> {
        if self.values.len() != self.ops.len() {
            return Err(Error::Graph("backward before forward".into()));
        }
        let loss_val = self.val(loss)?;
        if loss_val.len() != 1 {
            return Err(Error::Graph(format!(
                "loss must be scalar, got shape {:?}",
                loss_val.shape()
            )));
        }

        let mut adj: Vec<Option<Tensor<T>>> = vec![None; self.ops.len()];
        adj[loss] = Some(Tensor::scalar(T::one()));

        for idx in (0..self.ops.len()).rev() {
            let Some(g) = adj[idx].clone() else { continue };
            match &self.ops[idx] {
                Op::Input(_) | Op::Param(_) | Op::Const(_) => {}
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone())?;
                    accumulate(&mut adj, *b, g)?;
                }
                Op::Scale(x, c) => accumulate(&mut adj, *x, g.scale(*c))?,
                Op::Affine { x, w, b } => {
                    let xv = self.val(*x)?;
                    let wv = self.val(*w)?;
                    let gx = g.matmul(&wv.transposed()?)?;
                    let gw = xv.transposed()?.matmul(&g)?;
                    let (rows, cols) = g.dims2()?;
                    let mut gb = vec![T::zero(); cols];
                    for i in 0..rows {
                        for (j, gbj) in gb.iter_mut().enumerate() {
                            *gbj = *gbj + g.data()[i * cols + j];
                        }
                    }
                    accumulate(&mut adj, *x, gx)?;
                    accumulate(&mut adj, *w, gw)?;
                    accumulate(&mut adj, *b, Tensor::from_parts(vec![cols], gb))?;
                }
                Op::Tanh(x) => {
                    let y = self.val(idx)?;
                    let gx = g.zip_map(y, |gv, yv| gv * (T::one() - yv * yv))?;
                    accumulate(&mut adj, *x, gx)?;
                }
                Op::Softmax(x) => {
                    let y = self.val(idx)?;
                    let width = *y.shape().last().expect("non-empty");
                    let rows = y.len() / width;
                    let mut gx = vec![T::zero(); y.len()];
                    for r in 0..rows {
                        let mut dot = T::zero();
                        for c in 0..width {
                            let k = r * width + c;
                            dot = dot + g.data()[k] * y.data()[k];
                        }
                        for c in 0..width {
                            let k = r * width + c;
                            gx[k] = y.data()[k] * (g.data()[k] - dot);
                        }
                    }
                    accumulate(&mut adj, *x, Tensor::from_parts(y.shape().to_vec(), gx))?;
                }
                Op::Dist {
                    metric,
                    teacher,
                    student,
                } => {
                    let upstream = g.at(0);
                    let gs = metric::loss_backward(*metric, teacher, self.val(*student)?, upstream);
                    accumulate(&mut adj, *student, gs)?;
                }
            }
        }

        let mut grads = BTreeMap::new();
        for (idx, op) in self.ops.iter().enumerate() {
            if let Op::Param(name) = op {
                let g = match adj[idx].take() {
                    Some(g) => g,
                    None => Tensor::zeros(self.params[name].shape().to_vec()),
                };
                // A parameter may be referenced through several nodes.
                match grads.remove(name) {
                    Some(prev) => {
                        let merged: Tensor<T> = g.add(&prev)?;
                        grads.insert(name.clone(), merged)
                    }
                    None => grads.insert(name.clone(), g),
                };
            }
        }
        Ok(grads)
    }
}

fn accumulate<T: Scalar>(adj: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) -> Result<()> {
    adj[id] = match adj[id].take() {
        Some(prev) => Some(prev.add(&g)?),
        None => Some(g),
    };
    Ok(())
}

// ── Optimizer ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimMode {
    /// Plain gradient descent: `p ← p − lr·(g + wd·p)`.
    Plain,
    /// Bias-corrected moment normalization before the same decoupled decay.
    Adaptive,
}

impl OptimMode {
    pub fn name(self) -> &'static str {
        match self {
            OptimMode::Plain => "sgd",
            OptimMode::Adaptive => "adaptive",
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimState<T: Scalar = f64> {
    pub lr: T,
    pub weight_decay: T,
    pub mode: OptimMode,
    step: u64,
    beta1: T,
    beta2: T,
    eps: T,
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(lr: T, weight_decay: T, mode: OptimMode) -> Self {
        Self {
            lr,
            weight_decay,
            mode,
            step: 0,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

/// One descent step over a named parameter collection.
pub fn sgd_step<T: Scalar>(
    params: &mut BTreeMap<String, Tensor<T>>,
    grads: &BTreeMap<String, Tensor<T>>,
    st: &mut OptimState<T>,
) -> Result<()> {
    st.step += 1;
    let lr = st.lr;
    let wd = st.weight_decay;
    let names: Vec<String> = params.keys().cloned().collect();
    for name in names {
        let p = params.get(&name).expect("listed").clone();
        let zero;
        let g = match grads.get(&name) {
            Some(g) => g,
            None => {
                zero = Tensor::zeros(p.shape().to_vec());
                &zero
            }
        };
        if g.shape() != p.shape() {
            return Err(Error::Shape(format!(
                "gradient {:?} vs parameter {:?} for '{name}'",
                g.shape(),
                p.shape()
            )));
        }
        let update = match st.mode {
            OptimMode::Plain => g.clone(),
            OptimMode::Adaptive => {
                let (m, v) = st.moments.entry(name.clone()).or_insert_with(|| {
                    (
                        Tensor::zeros(p.shape().to_vec()),
                        Tensor::zeros(p.shape().to_vec()),
                    )
                });
                *m = m.zip_map(g, |mv, gv| st.beta1 * mv + (T::one() - st.beta1) * gv)?;
                *v = v.zip_map(g, |vv, gv| st.beta2 * vv + (T::one() - st.beta2) * gv * gv)?;
                let c1 = T::one() - st.beta1.powi(st.step as i32);
                let c2 = T::one() - st.beta2.powi(st.step as i32);
                m.zip_map(v, |mv, vv| (mv / c1) / ((vv / c2).sqrt() + st.eps))?
            }
        };
        let next = p.zip_map(&update, |pv, uv| pv - lr * (uv + wd * pv))?;
        params.insert(name, next);
    }
    Ok(())
}
