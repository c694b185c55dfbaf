//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records each primitive as it executes, borrowing parameter
//! values from a [`ParamSet`] rather than copying them. Nodes are appended in
//! execution order, so reverse index order is a valid reverse topological
//! order for the backward sweep.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::{self, Accum, LstmCache, LstmWeights};
use super::{GradientMap, NumericsError, ParamId, ParamSet, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Embed { table: usize, ids: Vec<usize> },
    Conv1d { input: usize, filters: usize, bias: usize },
    Relu { input: usize },
    SumPool { input: usize },
    Dense { input: usize, weight: usize, bias: usize },
    Lstm { x: usize, h: usize, c: usize, w_x: usize, w_h: usize, bias: usize, cache: LstmCache },
    Slice { input: usize, start: usize },
    SoftmaxCe { logits: usize, target: usize, probs: Vec<f64> },
    Add { a: usize, b: usize },
    Mean { inputs: Vec<usize> },
    SumSquares { input: usize },
    Reshape { input: usize },
}

#[derive(Debug)]
struct Node {
    op: Op,
    /// `None` for parameter nodes, whose value lives in the parameter set.
    value: Option<Tensor>,
    /// Full-precision value for scalar reductions.
    exact: Option<f64>,
}

/// Gradient buffer for one node, accumulated in f64. Leaf buffers are
/// rounded to f32 once the sweep is done.
enum Slot {
    Empty,
    Act(Vec<f64>),
    Leaf(Vec<f64>),
}

fn add_into<A: Accum>(buf: &mut [A], g: &[f64]) {
    for (d, &v) in buf.iter_mut().zip(g) {
        d.add(v);
    }
}

/// Runs `$body` with `$buf` bound to the (lazily zeroed) gradient buffer of
/// node `$idx`, monomorphized for whichever precision the slot uses.
macro_rules! with_slot {
    ($tape:expr, $slots:expr, $idx:expr, |$buf:ident| $body:expr) => {{
        let idx = $idx;
        if matches!($slots[idx], Slot::Empty) {
            let n = $tape.value_at(idx).numel();
            $slots[idx] = if $tape.is_leaf(idx) {
                Slot::Leaf(vec![0.0f64; n])
            } else {
                Slot::Act(vec![0.0f64; n])
            };
        }
        match &mut $slots[idx] {
            Slot::Act(v) | Slot::Leaf(v) => {
                let $buf: &mut [f64] = v.as_mut_slice();
                $body
            }
            Slot::Empty => unreachable!(),
        }
    }};
}

pub struct Tape<'p> {
    id: u64,
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, usize>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.push_exact(op, value, None)
    }

    fn push_exact(&mut self, op: Op, value: Tensor, exact: Option<f64>) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
            exact,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, var: Var) -> Result<usize, NumericsError> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(NumericsError::Usage("variable belongs to a different tape".into()));
        }
        Ok(var.index)
    }

    fn value_at(&self, index: usize) -> &Tensor {
        let node = &self.nodes[index];
        match (&node.op, &node.value) {
            (_, Some(v)) => v,
            (Op::Param(id), None) => self.params.get(*id),
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    /// Value of a recorded variable.
    ///
    /// Panics if `var` was recorded on another tape.
    pub fn value(&self, var: Var) -> &Tensor {
        let index = self.check(var).expect("variable belongs to a different tape");
        self.value_at(index)
    }

    /// Scalar value of a one-element variable, at full precision when the
    /// producing op tracked it.
    pub fn scalar(&self, var: Var) -> f64 {
        let index = self.check(var).expect("variable belongs to a different tape");
        let node = &self.nodes[index];
        node.exact
            .unwrap_or_else(|| self.value_at(index).data()[0] as f64)
    }

    /// Records a constant input. Gradients with respect to it are available
    /// through [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Op::Input, value)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        assert!(id.index() < self.params.len(), "unknown parameter {id:?}");
        if let Some(&index) = self.param_nodes.get(&id) {
            return Var { tape: self.id, index };
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            exact: None,
        });
        let index = self.nodes.len() - 1;
        self.param_nodes.insert(id, index);
        Var { tape: self.id, index }
    }

    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let t = self.check(table)?;
        let out = ops::embed_lookup(self.value_at(t), ids)?;
        Ok(self.push(
            Op::Embed {
                table: t,
                ids: ids.to_vec(),
            },
            out,
        ))
    }

    pub fn conv1d(&mut self, input: Var, filters: Var, bias: Var) -> Result<Var, NumericsError> {
        let (i, f, b) = (self.check(input)?, self.check(filters)?, self.check(bias)?);
        let out = ops::conv1d(self.value_at(i), self.value_at(f), self.value_at(b))?;
        Ok(self.push(
            Op::Conv1d {
                input: i,
                filters: f,
                bias: b,
            },
            out,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var, NumericsError> {
        let i = self.check(input)?;
        let out = ops::relu(self.value_at(i));
        Ok(self.push(Op::Relu { input: i }, out))
    }

    pub fn sum_pool(&mut self, input: Var) -> Result<Var, NumericsError> {
        let i = self.check(input)?;
        let out = ops::sum_over_time_pool(self.value_at(i))?;
        Ok(self.push(Op::SumPool { input: i }, out))
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, NumericsError> {
        let (i, w, b) = (self.check(input)?, self.check(weight)?, self.check(bias)?);
        let out = ops::dense(self.value_at(i), self.value_at(w), self.value_at(b))?;
        Ok(self.push(
            Op::Dense {
                input: i,
                weight: w,
                bias: b,
            },
            out,
        ))
    }

    /// One LSTM step. Returns `(h', c')`.
    pub fn lstm_cell(
        &mut self,
        x: Var,
        h: Var,
        c: Var,
        w_x: Var,
        w_h: Var,
        bias: Var,
    ) -> Result<(Var, Var), NumericsError> {
        let idx = [x, h, c, w_x, w_h, bias]
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<Vec<_>, _>>()?;
        let weights = LstmWeights {
            input: self.value_at(idx[3]),
            recurrent: self.value_at(idx[4]),
            bias: self.value_at(idx[5]),
        };
        let (h_new, c_new, cache) = ops::lstm_forward(
            self.value_at(idx[0]),
            self.value_at(idx[1]),
            self.value_at(idx[2]),
            &weights,
        )?;
        let d_h = h_new.len();
        let mut both = h_new;
        both.extend_from_slice(&c_new);
        let value = Tensor::from_f64(vec![2 * d_h], &both, "lstm_cell")?;
        let joint = self.push(
            Op::Lstm {
                x: idx[0],
                h: idx[1],
                c: idx[2],
                w_x: idx[3],
                w_h: idx[4],
                bias: idx[5],
                cache,
            },
            value,
        );
        let h_out = self.slice(joint, 0, d_h)?;
        let c_out = self.slice(joint, d_h, d_h)?;
        Ok((h_out, c_out))
    }

    /// Contiguous sub-vector `[start, start + len)` of a flattened value.
    pub fn slice(&mut self, input: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let i = self.check(input)?;
        let src = self.value_at(i);
        if len == 0 || start + len > src.numel() {
            return Err(NumericsError::Shape(format!(
                "slice [{start}, {}) out of range for {} values",
                start + len,
                src.numel()
            )));
        }
        let out =
            Tensor::from_parts_unchecked(vec![len], src.data()[start..start + len].to_vec());
        Ok(self.push(Op::Slice { input: i, start }, out))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var, NumericsError> {
        let i = self.check(input)?;
        let out = self.value_at(i).reshape(shape)?;
        Ok(self.push(Op::Reshape { input: i }, out))
    }

    /// `-log softmax(logits)[target]` as a one-element tensor.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var, NumericsError> {
        let l = self.check(logits)?;
        let value = self.value_at(l);
        ops::expect_rank(value, 1, "logits")?;
        if target >= value.numel() {
            return Err(NumericsError::Index {
                index: target,
                bound: value.numel(),
            });
        }
        let log_probs = ops::log_softmax(value.data());
        let loss = -log_probs[target];
        let probs = log_probs.iter().map(|lp| lp.exp()).collect();
        let out = Tensor::from_f64(vec![1], &[loss], "softmax_cross_entropy")?;
        Ok(self.push_exact(
            Op::SoftmaxCe {
                logits: l,
                target,
                probs,
            },
            out,
            Some(loss),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (self.value_at(ia), self.value_at(ib));
        if va.shape() != vb.shape() {
            return Err(NumericsError::Shape(format!(
                "cannot add {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let sum: Vec<f64> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x as f64 + y as f64)
            .collect();
        let exact = (sum.len() == 1).then(|| self.scalar(a) + self.scalar(b));
        let out = Tensor::from_f64(va.shape().to_vec(), &sum, "add")?;
        Ok(self.push_exact(Op::Add { a: ia, b: ib }, out, exact))
    }

    /// Element-wise mean of equally shaped values.
    pub fn mean(&mut self, inputs: &[Var]) -> Result<Var, NumericsError> {
        if inputs.is_empty() {
            return Err(NumericsError::Shape("mean of no values".into()));
        }
        let idx = inputs
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<Vec<_>, _>>()?;
        let shape = self.value_at(idx[0]).shape().to_vec();
        let n = idx.len() as f64;
        let mut acc = vec![0.0f64; self.value_at(idx[0]).numel()];
        for &i in &idx {
            let v = self.value_at(i);
            if v.shape() != shape.as_slice() {
                return Err(NumericsError::Shape(format!(
                    "mean over mismatched shapes {:?} and {:?}",
                    shape,
                    v.shape()
                )));
            }
            if acc.len() == 1 {
                acc[0] += self.nodes[i].exact.unwrap_or(v.data()[0] as f64);
            } else {
                for (a, &x) in acc.iter_mut().zip(v.data()) {
                    *a += x as f64;
                }
            }
        }
        for a in acc.iter_mut() {
            *a /= n;
        }
        let exact = (acc.len() == 1).then(|| acc[0]);
        let out = Tensor::from_f64(shape, &acc, "mean")?;
        Ok(self.push_exact(Op::Mean { inputs: idx }, out, exact))
    }

    pub fn sum_squares(&mut self, input: Var) -> Result<Var, NumericsError> {
        let i = self.check(input)?;
        let s = self.value_at(i).squared_norm();
        let out = Tensor::from_f64(vec![1], &[s], "sum_squares")?;
        Ok(self.push_exact(Op::SumSquares { input: i }, out, Some(s)))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let root = self.check(loss)?;
        if self.value_at(root).numel() != 1 {
            return Err(NumericsError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value_at(root).shape()
            )));
        }
        let mut slots: Vec<Slot> = (0..self.nodes.len()).map(|_| Slot::Empty).collect();
        slots[root] = Slot::Act(vec![1.0]);

        for index in (0..=root).rev() {
            let upstream = match &self.nodes[index].op {
                Op::Input | Op::Param(_) => continue,
                _ => match std::mem::replace(&mut slots[index], Slot::Empty) {
                    Slot::Act(g) => g,
                    Slot::Empty => continue,
                    Slot::Leaf(_) => unreachable!("leaf slot on an op node"),
                },
            };
            self.backward_node(index, &upstream, &mut slots);
        }

        let mut params = GradientMap::empty(self.params.len());
        let mut inputs = HashMap::new();
        for (index, slot) in slots.into_iter().enumerate() {
            let Slot::Leaf(buf) = slot else { continue };
            let shape = self.value_at(index).shape().to_vec();
            let grad = Tensor::from_f64(shape, &buf, "backward")?;
            match self.nodes[index].op {
                Op::Param(id) => params.set(id, grad),
                _ => {
                    inputs.insert(index, grad);
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            params,
            param_nodes: self.param_nodes.clone(),
            inputs,
        })
    }

    fn backward_node(&self, index: usize, g: &[f64], slots: &mut [Slot]) {
        match &self.nodes[index].op {
            Op::Input | Op::Param(_) => {}
            Op::Embed { table, ids } => {
                let dim = self.value_at(*table).shape()[1];
                with_slot!(self, slots, *table, |buf| {
                    for (k, &id) in ids.iter().enumerate() {
                        let row = &mut buf[id * dim..(id + 1) * dim];
                        for (d, &gv) in row.iter_mut().zip(&g[k * dim..(k + 1) * dim]) {
                            d.add(gv);
                        }
                    }
                });
            }
            Op::Conv1d { input, filters, bias } => {
                let (x, f) = (self.value_at(*input), self.value_at(*filters));
                with_slot!(self, slots, *input, |buf| {
                    ops::conv1d_backward::<_, f64, f64>(x, f, g, Some(buf), None, None)
                });
                with_slot!(self, slots, *filters, |buf| {
                    ops::conv1d_backward::<f64, _, f64>(x, f, g, None, Some(buf), None)
                });
                with_slot!(self, slots, *bias, |buf| {
                    ops::conv1d_backward::<f64, f64, _>(x, f, g, None, None, Some(buf))
                });
            }
            Op::Relu { input } => {
                let out = self.value_at(index);
                with_slot!(self, slots, *input, |buf| {
                    for ((d, &gv), &y) in buf.iter_mut().zip(g).zip(out.data()) {
                        if y > 0.0 {
                            d.add(gv);
                        }
                    }
                });
            }
            Op::SumPool { input } => {
                let dim = g.len();
                with_slot!(self, slots, *input, |buf| {
                    for row in buf.chunks_mut(dim) {
                        for (d, &gv) in row.iter_mut().zip(g) {
                            d.add(gv);
                        }
                    }
                });
            }
            Op::Dense { input, weight, bias } => {
                let (x, w) = (self.value_at(*input), self.value_at(*weight));
                let cols = w.shape()[1];
                with_slot!(self, slots, *input, |buf| {
                    ops::matvec_t_acc(w.data(), cols, g, buf)
                });
                with_slot!(self, slots, *weight, |buf| ops::outer_acc(x.data(), g, buf));
                with_slot!(self, slots, *bias, |buf| add_into(buf, g));
            }
            Op::Lstm { x, h, c, w_x, w_h, bias, cache } => {
                let d_h = g.len() / 2;
                let (dz, d_c_prev) =
                    ops::lstm_backward_gates(self.value_at(*c), cache, &g[..d_h], &g[d_h..]);
                let (xv, hv) = (self.value_at(*x), self.value_at(*h));
                let (wxv, whv) = (self.value_at(*w_x), self.value_at(*w_h));
                with_slot!(self, slots, *x, |buf| {
                    ops::matvec_t_acc(wxv.data(), 4 * d_h, &dz, buf)
                });
                with_slot!(self, slots, *h, |buf| {
                    ops::matvec_t_acc(whv.data(), 4 * d_h, &dz, buf)
                });
                with_slot!(self, slots, *c, |buf| add_into(buf, &d_c_prev));
                with_slot!(self, slots, *w_x, |buf| ops::outer_acc(xv.data(), &dz, buf));
                with_slot!(self, slots, *w_h, |buf| ops::outer_acc(hv.data(), &dz, buf));
                with_slot!(self, slots, *bias, |buf| add_into(buf, &dz));
            }
            Op::Slice { input, start } => {
                let start = *start;
                with_slot!(self, slots, *input, |buf| {
                    add_into(&mut buf[start..start + g.len()], g)
                });
            }
            Op::SoftmaxCe { logits, target, probs } => {
                let scale = g[0];
                let target = *target;
                with_slot!(self, slots, *logits, |buf| {
                    for (k, (d, &p)) in buf.iter_mut().zip(probs).enumerate() {
                        let onehot = if k == target { 1.0 } else { 0.0 };
                        d.add(scale * (p - onehot));
                    }
                });
            }
            Op::Add { a, b } => {
                with_slot!(self, slots, *a, |buf| add_into(buf, g));
                with_slot!(self, slots, *b, |buf| add_into(buf, g));
            }
            Op::Mean { inputs } => {
                let n = inputs.len() as f64;
                let scaled: Vec<f64> = g.iter().map(|v| v / n).collect();
                for &i in inputs {
                    with_slot!(self, slots, i, |buf| add_into(buf, &scaled));
                }
            }
            Op::SumSquares { input } => {
                let x = self.value_at(*input);
                let scale = 2.0 * g[0];
                with_slot!(self, slots, *input, |buf| {
                    for (d, &v) in buf.iter_mut().zip(x.data()) {
                        d.add(scale * v as f64);
                    }
                });
            }
            Op::Reshape { input } => {
                with_slot!(self, slots, *input, |buf| add_into(buf, g));
            }
        }
    }

    fn is_leaf(&self, index: usize) -> bool {
        matches!(self.nodes[index].op, Op::Input | Op::Param(_))
    }
}


/// Result of a backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    params: GradientMap,
    param_nodes: HashMap<ParamId, usize>,
    inputs: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn params(&self) -> &GradientMap {
        &self.params
    }

    pub fn into_params(self) -> GradientMap {
        self.params
    }

    /// Gradient with respect to an input or parameter leaf. `None` when the
    /// leaf did not influence the loss or `var` is not a leaf of this tape.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        if let Some(g) = self.inputs.get(&var.index) {
            return Some(g);
        }
        self.param_nodes
            .iter()
            .find(|(_, &node)| node == var.index)
            .and_then(|(&id, _)| self.params.get(id))
    }
}
