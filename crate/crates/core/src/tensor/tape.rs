use std::cell::RefCell;

use super::{dims2, Result, Tensor, TensorError};

/// Recorded operation. Indices refer to earlier nodes on the same tape.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Softplus(usize),
    Sum(usize),
    RowSum(usize),
    AddRowBias(usize, usize),
    ConcatCols(Vec<usize>),
    SliceCols { src: usize, start: usize },
    RowDot(usize, usize),
    SoftmaxRows(usize),
    LogSumExpRows(usize),
    ScaleRows(usize, usize),
    Embed { table: usize, ids: Vec<usize> },
    GradReverse(usize, f64),
    BlendRows { new: usize, old: usize, take_new: Vec<bool> },
    /// Per-row negative log-likelihood; caches `softmax - onehot` per row.
    CrossEntropyRows { logits: usize, dlogits: Vec<f64> },
    /// Per-row Monte-Carlo NLL over noise-corrupted logits; caches both partials.
    McCrossEntropyRows {
        logits: usize,
        sigma: usize,
        dlogits: Vec<f64>,
        dsigma: Vec<f64>,
    },
    Distort(usize, f64),
    Reshape(usize),
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) needs_grad: bool,
}

/// Ordered record of differentiable operations.
///
/// Nodes are appended in execution order, so the record is topologically
/// sorted by construction. Backward sweeps never mutate the tape: the same
/// tape may be swept several times (partial sweeps via
/// [`Tape::gradients_wrt`], full sweeps via [`Tape::backward`]). Dropping the
/// tape, or calling [`Tape::clear`], is the reset.
#[derive(Debug, Default)]
pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
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

    pub fn clear(&mut self) {
        self.nodes.get_mut().clear();
    }

    /// Differentiable leaf holding a copy of `value`.
    pub fn leaf(&self, value: &Tensor) -> Var<'_> {
        self.push_node(value.clone(), Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Constant, false)
    }

    pub(crate) fn push_node(&self, mut value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        value.requires_grad = needs_grad;
        value.grad = None;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn needs_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Full reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let grads = self.sweep(loss, 0)?;
        Ok(Gradients { grads })
    }

    /// Gradients of `loss` with respect to `wrt` only; the sweep stops at the
    /// earliest requested node.
    pub fn gradients_wrt(&self, loss: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<Tensor>> {
        let stop = wrt.iter().map(|v| v.id).min().unwrap_or(loss.id);
        let mut grads = self.sweep(loss, stop)?;
        let nodes = self.nodes.borrow();
        Ok(wrt
            .iter()
            .map(|v| {
                let shape = nodes[v.id].value.shape.clone();
                match grads[v.id].take() {
                    Some(g) => Tensor::from_parts(shape, g),
                    None => Tensor::zeros(&shape),
                }
            })
            .collect())
    }

    fn sweep(&self, loss: Var<'_>, stop: usize) -> Result<Vec<Option<Vec<f64>>>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape.clone()));
        }
        if !root.needs_grad {
            return Err(TensorError::Detached);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (stop..=loss.id).rev() {
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            propagate(&nodes, id, &upstream, &mut grads);
            grads[id] = Some(upstream);
        }
        Ok(grads)
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, delta: Vec<f64>) {
    if !nodes[id].needs_grad {
        return;
    }
    match grads[id].as_mut() {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
        None => grads[id] = Some(delta),
    }
}

fn accumulate_with<F: Fn(usize) -> f64>(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    id: usize,
    f: F,
) {
    if !nodes[id].needs_grad {
        return;
    }
    let n = nodes[id].value.numel();
    match grads[id].as_mut() {
        Some(g) => g.iter_mut().enumerate().for_each(|(i, a)| *a += f(i)),
        None => grads[id] = Some((0..n).map(f).collect()),
    }
}

fn propagate(nodes: &[Node], id: usize, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value.data;
    match &nodes[id].op {
        Op::Leaf | Op::Constant => {}
        Op::MatMul(a, b) => {
            let (m, k) = dims2(&nodes[*a].value.shape);
            let (_, n) = dims2(&nodes[*b].value.shape);
            if nodes[*a].needs_grad {
                let bv = &nodes[*b].value.data;
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    let urow = &up[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bv[p * n..(p + 1) * n];
                        da[i * k + p] = urow.iter().zip(brow).map(|(u, w)| u * w).sum();
                    }
                }
                accumulate(nodes, grads, *a, da);
            }
            if nodes[*b].needs_grad {
                let av = &nodes[*a].value.data;
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    let urow = &up[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = av[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        let drow = &mut db[p * n..(p + 1) * n];
                        drow.iter_mut().zip(urow).for_each(|(d, u)| *d += aip * u);
                    }
                }
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, up.to_vec());
            accumulate(nodes, grads, *b, up.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, up.to_vec());
            accumulate_with(nodes, grads, *b, |i| -up[i]);
        }
        Op::Mul(a, b) => {
            let av = &nodes[*a].value.data;
            let bv = &nodes[*b].value.data;
            accumulate_with(nodes, grads, *a, |i| up[i] * bv[i]);
            accumulate_with(nodes, grads, *b, |i| up[i] * av[i]);
        }
        Op::Scale(a, s) => accumulate_with(nodes, grads, *a, |i| up[i] * s),
        Op::AddScalar(a) => accumulate(nodes, grads, *a, up.to_vec()),
        Op::Tanh(a) => accumulate_with(nodes, grads, *a, |i| up[i] * (1.0 - out[i] * out[i])),
        Op::Sigmoid(a) => accumulate_with(nodes, grads, *a, |i| up[i] * out[i] * (1.0 - out[i])),
        Op::Exp(a) => accumulate_with(nodes, grads, *a, |i| up[i] * out[i]),
        Op::Log(a) => {
            let av = &nodes[*a].value.data;
            accumulate_with(nodes, grads, *a, |i| up[i] / av[i]);
        }
        Op::Sqrt(a) => accumulate_with(nodes, grads, *a, |i| up[i] * 0.5 / out[i]),
        Op::Softplus(a) => {
            let av = &nodes[*a].value.data;
            accumulate_with(nodes, grads, *a, |i| up[i] * super::sigmoid(av[i]));
        }
        Op::Sum(a) => accumulate_with(nodes, grads, *a, |_| up[0]),
        Op::RowSum(a) => {
            let (_, c) = dims2(&nodes[*a].value.shape);
            accumulate_with(nodes, grads, *a, |i| up[i / c]);
        }
        Op::AddRowBias(a, b) => {
            let (r, c) = dims2(&nodes[*a].value.shape);
            accumulate(nodes, grads, *a, up.to_vec());
            if nodes[*b].needs_grad {
                let mut db = vec![0.0; c];
                for i in 0..r {
                    db.iter_mut()
                        .zip(&up[i * c..(i + 1) * c])
                        .for_each(|(d, u)| *d += u);
                }
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::ConcatCols(parts) => {
            let (r, total) = dims2(&nodes[id].value.shape);
            let mut offset = 0;
            for &p in parts {
                let (_, c) = dims2(&nodes[p].value.shape);
                accumulate_with(nodes, grads, p, |i| {
                    let (row, col) = (i / c, i % c);
                    up[row * total + offset + col]
                });
                offset += c;
            }
            debug_assert_eq!(offset, total);
            let _ = r;
        }
        Op::SliceCols { src, start } => {
            let (_, width) = dims2(&nodes[id].value.shape);
            let (_, c) = dims2(&nodes[*src].value.shape);
            let start = *start;
            accumulate_with(nodes, grads, *src, |i| {
                let (row, col) = (i / c, i % c);
                if col >= start && col < start + width {
                    up[row * width + col - start]
                } else {
                    0.0
                }
            });
        }
        Op::RowDot(a, b) => {
            let (_, c) = dims2(&nodes[*a].value.shape);
            let av = &nodes[*a].value.data;
            let bv = &nodes[*b].value.data;
            accumulate_with(nodes, grads, *a, |i| up[i / c] * bv[i]);
            accumulate_with(nodes, grads, *b, |i| up[i / c] * av[i]);
        }
        Op::SoftmaxRows(a) => {
            let (r, c) = dims2(&nodes[id].value.shape);
            let mut da = vec![0.0; r * c];
            for i in 0..r {
                let p = &out[i * c..(i + 1) * c];
                let u = &up[i * c..(i + 1) * c];
                let dot: f64 = p.iter().zip(u).map(|(pi, ui)| pi * ui).sum();
                for j in 0..c {
                    da[i * c + j] = p[j] * (u[j] - dot);
                }
            }
            accumulate(nodes, grads, *a, da);
        }
        Op::LogSumExpRows(a) => {
            let (_, c) = dims2(&nodes[*a].value.shape);
            let av = &nodes[*a].value.data;
            accumulate_with(nodes, grads, *a, |i| up[i / c] * (av[i] - out[i / c]).exp());
        }
        Op::ScaleRows(a, s) => {
            let (_, c) = dims2(&nodes[*a].value.shape);
            let av = &nodes[*a].value.data;
            let sv = &nodes[*s].value.data;
            accumulate_with(nodes, grads, *a, |i| up[i] * sv[i / c]);
            if nodes[*s].needs_grad {
                let ds: Vec<f64> = (0..sv.len())
                    .map(|row| {
                        (0..c)
                            .map(|j| up[row * c + j] * av[row * c + j])
                            .sum::<f64>()
                    })
                    .collect();
                accumulate(nodes, grads, *s, ds);
            }
        }
        Op::Embed { table, ids } => {
            if nodes[*table].needs_grad {
                let (e, v) = dims2(&nodes[*table].value.shape);
                let mut dt = vec![0.0; e * v];
                for (row, &tok) in ids.iter().enumerate() {
                    for k in 0..e {
                        dt[k * v + tok] += up[row * e + k];
                    }
                }
                accumulate(nodes, grads, *table, dt);
            }
        }
        Op::GradReverse(a, gamma) => accumulate_with(nodes, grads, *a, |i| -gamma * up[i]),
        Op::BlendRows {
            new,
            old,
            take_new,
        } => {
            let (_, c) = dims2(&nodes[id].value.shape);
            accumulate_with(nodes, grads, *new, |i| if take_new[i / c] { up[i] } else { 0.0 });
            accumulate_with(nodes, grads, *old, |i| if take_new[i / c] { 0.0 } else { up[i] });
        }
        Op::CrossEntropyRows { logits, dlogits } => {
            let (_, c) = dims2(&nodes[*logits].value.shape);
            accumulate_with(nodes, grads, *logits, |i| up[i / c] * dlogits[i]);
        }
        Op::McCrossEntropyRows {
            logits,
            sigma,
            dlogits,
            dsigma,
        } => {
            let (_, c) = dims2(&nodes[*logits].value.shape);
            accumulate_with(nodes, grads, *logits, |i| up[i / c] * dlogits[i]);
            accumulate_with(nodes, grads, *sigma, |i| up[i / c] * dsigma[i]);
        }
        Op::Reshape(a) => accumulate_with(nodes, grads, *a, |i| up[i]),
        Op::Distort(a, alpha) => {
            let av = &nodes[*a].value.data;
            accumulate_with(nodes, grads, *a, |i| {
                if av[i] < 0.0 {
                    up[i] * alpha * av[i].exp()
                } else {
                    up[i]
                }
            });
        }
    }
}

/// Result of a backward sweep: one optional gradient per tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<Tensor> {
        let g = self.grads.get(var.id)?.as_ref()?;
        Some(Tensor::from_parts(var.shape(), g.clone()))
    }

    pub fn get_raw(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id)?.as_deref()
    }

    /// Adds this sweep's gradient for `var` into `target`'s grad buffer.
    pub fn accumulate_into(&self, var: Var<'_>, target: &mut Tensor, scale: f64) -> Result<()> {
        match self.get_raw(var) {
            Some(g) => target.accumulate_grad(g, scale),
            None => Ok(()),
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape.clone()
    }

    pub fn dims2(&self) -> (usize, usize) {
        dims2(&self.tape.nodes.borrow()[self.id].value.shape)
    }

    pub fn value(&self) -> Tensor {
        let mut t = self.tape.nodes.borrow()[self.id].value.clone();
        t.requires_grad = false;
        t
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.data.clone()
    }

    pub fn item(&self) -> Option<f64> {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs_grad(self.id)
    }

    pub(crate) fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }
}
