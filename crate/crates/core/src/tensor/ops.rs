use super::tape::{Op, Var};
use super::{Result, Tensor, TensorError};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Max-shifted softmax and log-sum-exp of a single vector.
pub fn softmax_logsumexp(x: &[f64]) -> Result<(Vec<f64>, f64)> {
    if x.is_empty() {
        return Err(TensorError::Empty("softmax"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite("softmax input"));
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let probs = exps.iter().map(|e| e / total).collect();
    Ok((probs, max + total.ln()))
}

fn finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite(op))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape == b.shape {
        Ok(())
    } else {
        Err(TensorError::Shape {
            op,
            left: a.shape.clone(),
            right: b.shape.clone(),
        })
    }
}

impl<'t> Var<'t> {
    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    fn unary(
        &self,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        op: impl FnOnce(usize) -> Op,
    ) -> Result<Var<'t>> {
        let (shape, data) = self.with_value(|t| (t.shape.clone(), t.data.iter().map(|&v| f(v)).collect::<Vec<_>>()));
        finite(name, &data)?;
        Ok(self
            .tape
            .push_node(Tensor::from_parts(shape, data), op(self.id), self.requires_grad()))
    }

    fn binary(
        &self,
        other: &Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        self.same_tape(other);
        let (shape, data) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            same_shape(name, a, b)?;
            let data: Vec<f64> = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
            (a.shape.clone(), data)
        };
        finite(name, &data)?;
        let needs = self.requires_grad() || other.requires_grad();
        Ok(self
            .tape
            .push_node(Tensor::from_parts(shape, data), op(self.id, other.id), needs))
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let (m, n, data) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(TensorError::Shape {
                    op: "matmul",
                    left: a.shape.clone(),
                    right: b.shape.clone(),
                });
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            (m, n, matmul_raw(&a.data, &b.data, m, k, n))
        };
        finite("matmul", &data)?;
        let needs = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push_node(
            Tensor::from_parts(vec![m, n], data),
            Op::MatMul(self.id, other.id),
            needs,
        ))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn scale(&self, s: f64) -> Result<Var<'t>> {
        self.unary("scale", |a| a * s, |a| Op::Scale(a, s))
    }

    pub fn add_scalar(&self, s: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", |a| a + s, Op::AddScalar)
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.unary("tanh", f64::tanh, Op::Tanh)
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.unary("sigmoid", sigmoid, Op::Sigmoid)
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary("exp", f64::exp, Op::Exp)
    }

    pub fn log(&self) -> Result<Var<'t>> {
        if self.with_value(|t| t.data.iter().any(|&v| v <= 0.0)) {
            return Err(TensorError::Domain {
                op: "log",
                msg: "input must be strictly positive".into(),
            });
        }
        self.unary("log", f64::ln, Op::Log)
    }

    /// Defined on `v >= 0`; the derivative is infinite at zero, so only
    /// constants should reach it there.
    pub fn sqrt(&self) -> Result<Var<'t>> {
        if self.with_value(|t| t.data.iter().any(|&v| !(v >= 0.0))) {
            return Err(TensorError::Domain {
                op: "sqrt",
                msg: "input must be non-negative".into(),
            });
        }
        self.unary("sqrt", f64::sqrt, Op::Sqrt)
    }

    pub fn softplus(&self) -> Result<Var<'t>> {
        self.unary("softplus", softplus, Op::Softplus)
    }

    /// Sum of all entries as a `[1]` scalar.
    pub fn sum(&self) -> Result<Var<'t>> {
        let s = self.with_value(|t| t.data.iter().sum::<f64>());
        finite("sum", &[s])?;
        Ok(self.tape.push_node(
            Tensor::from_parts(vec![1], vec![s]),
            Op::Sum(self.id),
            self.requires_grad(),
        ))
    }

    /// `r × c` → `r × 1` row sums.
    pub fn row_sum(&self) -> Result<Var<'t>> {
        let (r, data) = self.with_value(|t| {
            let (r, c) = t.dims2();
            (
                r,
                (0..r)
                    .map(|i| t.data[i * c..(i + 1) * c].iter().sum())
                    .collect::<Vec<f64>>(),
            )
        });
        finite("row_sum", &data)?;
        Ok(self.tape.push_node(
            Tensor::from_parts(vec![r, 1], data),
            Op::RowSum(self.id),
            self.requires_grad(),
        ))
    }

    /// Adds a length-`c` bias to every row of an `r × c` matrix.
    pub fn add_row_bias(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(bias);
        let (shape, data) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[bias.id].value;
            let (_, c) = a.dims2();
            let (br, bc) = b.dims2();
            if br != 1 || bc != c {
                return Err(TensorError::Shape {
                    op: "add_row_bias",
                    left: a.shape.clone(),
                    right: b.shape.clone(),
                });
            }
            let data: Vec<f64> = a
                .data
                .iter()
                .enumerate()
                .map(|(i, v)| v + b.data[i % c])
                .collect();
            (a.shape.clone(), data)
        };
        finite("add_row_bias", &data)?;
        let needs = self.requires_grad() || bias.requires_grad();
        Ok(self.tape.push_node(
            Tensor::from_parts(shape, data),
            Op::AddRowBias(self.id, bias.id),
            needs,
        ))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(TensorError::Empty("concat_cols"))?;
        let tape = first.tape;
        let (r, total, data) = {
            let nodes = tape.nodes.borrow();
            let (r, _) = nodes[first.id].value.dims2();
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                first.same_tape(p);
                let (pr, pc) = nodes[p.id].value.dims2();
                if pr != r {
                    return Err(TensorError::Shape {
                        op: "concat_cols",
                        left: nodes[first.id].value.shape.clone(),
                        right: nodes[p.id].value.shape.clone(),
                    });
                }
                widths.push(pc);
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(r * total);
            for i in 0..r {
                for (p, &w) in parts.iter().zip(&widths) {
                    data.extend_from_slice(&nodes[p.id].value.data[i * w..(i + 1) * w]);
                }
            }
            (r, total, data)
        };
        let needs = parts.iter().any(Var::requires_grad);
        Ok(tape.push_node(
            Tensor::from_parts(vec![r, total], data),
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
            needs,
        ))
    }

    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Var<'t>> {
        let (r, data) = {
            let nodes = self.tape.nodes.borrow();
            let t = &nodes[self.id].value;
            let (r, c) = t.dims2();
            if width == 0 || start + width > c {
                return Err(TensorError::Shape {
                    op: "slice_cols",
                    left: t.shape.clone(),
                    right: vec![start, width],
                });
            }
            let mut data = Vec::with_capacity(r * width);
            for i in 0..r {
                data.extend_from_slice(&t.data[i * c + start..i * c + start + width]);
            }
            (r, data)
        };
        Ok(self.tape.push_node(
            Tensor::from_parts(vec![r, width], data),
            Op::SliceCols {
                src: self.id,
                start,
            },
            self.requires_grad(),
        ))
    }

    /// Per-row inner product: `r × c`, `r × c` → `r × 1`.
    pub fn row_dot(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let (r, data) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            if a.dims2() != b.dims2() {
                return Err(TensorError::Shape {
                    op: "row_dot",
                    left: a.shape.clone(),
                    right: b.shape.clone(),
                });
            }
            let (r, c) = a.dims2();
            let data: Vec<f64> = (0..r)
                .map(|i| {
                    a.data[i * c..(i + 1) * c]
                        .iter()
                        .zip(&b.data[i * c..(i + 1) * c])
                        .map(|(x, y)| x * y)
                        .sum()
                })
                .collect();
            (r, data)
        };
        finite("row_dot", &data)?;
        let needs = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push_node(
            Tensor::from_parts(vec![r, 1], data),
            Op::RowDot(self.id, other.id),
            needs,
        ))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        let (shape, data) = self.with_value(|t| -> Result<_> {
            let (r, c) = t.dims2();
            let mut data = Vec::with_capacity(r * c);
            for i in 0..r {
                let (p, _) = softmax_logsumexp(&t.data[i * c..(i + 1) * c])?;
                data.extend(p);
            }
            Ok((t.shape.clone(), data))
        })?;
        Ok(self.tape.push_node(
            Tensor::from_parts(shape, data),
            Op::SoftmaxRows(self.id),
            self.requires_grad(),
        ))
    }

    /// Row-wise log-sum-exp: `r × c` → `r × 1`.
    pub fn logsumexp_rows(&self) -> Result<Var<'t>> {
        let (r, data) = self.with_value(|t| -> Result<_> {
            let (r, c) = t.dims2();
            let mut data = Vec::with_capacity(r);
            for i in 0..r {
                data.push(softmax_logsumexp(&t.data[i * c..(i + 1) * c])?.1);
            }
            Ok((r, data))
        })?;
        Ok(self.tape.push_node(
            Tensor::from_parts(vec![r, 1], data),
            Op::LogSumExpRows(self.id),
            self.requires_grad(),
        ))
    }

    /// Multiplies row `i` of an `r × c` matrix by `s[i]` (`s` is `r × 1`).
    pub fn scale_rows(&self, s: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(s);
        let (shape, data) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let sv = &nodes[s.id].value;
            let (r, c) = a.dims2();
            if sv.numel() != r {
                return Err(TensorError::Shape {
                    op: "scale_rows",
                    left: a.shape.clone(),
                    right: sv.shape.clone(),
                });
            }
            let data: Vec<f64> = a
                .data
                .iter()
                .enumerate()
                .map(|(i, v)| v * sv.data[i / c])
                .collect();
            (a.shape.clone(), data)
        };
        finite("scale_rows", &data)?;
        let needs = self.requires_grad() || s.requires_grad();
        Ok(self.tape.push_node(
            Tensor::from_parts(shape, data),
            Op::ScaleRows(self.id, s.id),
            needs,
        ))
    }

    /// Column lookup in an `E × V` table: returns `ids.len() × E`.
    pub fn embed(&self, ids: &[usize]) -> Result<Var<'t>> {
        let (e, data) = {
            let nodes = self.tape.nodes.borrow();
            let t = &nodes[self.id].value;
            let (e, v) = t.dims2();
            if ids.is_empty() {
                return Err(TensorError::Empty("embed"));
            }
            if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
                return Err(TensorError::Domain {
                    op: "embed",
                    msg: format!("token id {bad} out of range for vocabulary of {v}"),
                });
            }
            let mut data = Vec::with_capacity(ids.len() * e);
            for &tok in ids {
                data.extend((0..e).map(|k| t.data[k * v + tok]));
            }
            (e, data)
        };
        Ok(self.tape.push_node(
            Tensor::from_parts(vec![ids.len(), e], data),
            Op::Embed {
                table: self.id,
                ids: ids.to_vec(),
            },
            self.requires_grad(),
        ))
    }

    /// Identity forward; backward multiplies the upstream gradient by `-gamma`.
    pub fn grad_reverse(&self, gamma: f64) -> Result<Var<'t>> {
        if !(gamma.is_finite() && gamma >= 0.0) {
            return Err(TensorError::Domain {
                op: "grad_reverse",
                msg: format!("scale must be finite and >= 0, got {gamma}"),
            });
        }
        self.unary("grad_reverse", |v| v, |a| Op::GradReverse(a, gamma))
    }

    /// Row `i` from `self` where `take_new[i]`, else from `old`.
    pub fn blend_rows(&self, old: &Var<'t>, take_new: &[bool]) -> Result<Var<'t>> {
        self.same_tape(old);
        let (shape, data) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[old.id].value;
            same_shape("blend_rows", a, b)?;
            let (r, c) = a.dims2();
            if take_new.len() != r {
                return Err(TensorError::Shape {
                    op: "blend_rows",
                    left: a.shape.clone(),
                    right: vec![take_new.len()],
                });
            }
            let data: Vec<f64> = (0..r * c)
                .map(|i| if take_new[i / c] { a.data[i] } else { b.data[i] })
                .collect();
            (a.shape.clone(), data)
        };
        let needs = self.requires_grad() || old.requires_grad();
        Ok(self.tape.push_node(
            Tensor::from_parts(shape, data),
            Op::BlendRows {
                new: self.id,
                old: old.id,
                take_new: take_new.to_vec(),
            },
            needs,
        ))
    }

    /// Per-row `-log softmax(logits)[target]`; rows with no target give 0.
    pub fn cross_entropy_rows(&self, targets: &[Option<usize>]) -> Result<Var<'t>> {
        let (r, losses, dlogits) = self.with_value(|t| -> Result<_> {
            let (r, c) = t.dims2();
            check_targets("cross_entropy_rows", r, c, targets)?;
            let mut losses = vec![0.0; r];
            let mut dlogits = vec![0.0; r * c];
            for i in 0..r {
                let Some(gold) = targets[i] else { continue };
                let row = &t.data[i * c..(i + 1) * c];
                let (p, lse) = softmax_logsumexp(row)?;
                losses[i] = lse - row[gold];
                for j in 0..c {
                    dlogits[i * c + j] = p[j] - if j == gold { 1.0 } else { 0.0 };
                }
            }
            Ok((r, losses, dlogits))
        })?;
        finite("cross_entropy_rows", &losses)?;
        Ok(self.tape.push_node(
            Tensor::from_parts(vec![r, 1], losses),
            Op::CrossEntropyRows {
                logits: self.id,
                dlogits,
            },
            self.requires_grad(),
        ))
    }

    /// Per-row Monte-Carlo likelihood loss over corrupted logits
    /// `ŷ_s = y + ε_s ⊙ σ`, `s = 1..T`:
    /// `-log( (1/T) Σ_s softmax(ŷ_s)[target] )`.
    ///
    /// `eps` is laid out `[T][rows][cols]`. Rows with no target give 0.
    pub fn mc_cross_entropy_rows(
        &self,
        sigma: &Var<'t>,
        eps: &[f64],
        samples: usize,
        targets: &[Option<usize>],
    ) -> Result<Var<'t>> {
        self.same_tape(sigma);
        let (r, losses, dlogits, dsigma) = {
            let nodes = self.tape.nodes.borrow();
            let y = &nodes[self.id].value;
            let s = &nodes[sigma.id].value;
            same_shape("mc_cross_entropy_rows", y, s)?;
            let (r, c) = y.dims2();
            check_targets("mc_cross_entropy_rows", r, c, targets)?;
            if samples == 0 {
                return Err(TensorError::Empty("mc_cross_entropy_rows samples"));
            }
            if eps.len() != samples * r * c {
                return Err(TensorError::Shape {
                    op: "mc_cross_entropy_rows",
                    left: vec![samples, r, c],
                    right: vec![eps.len()],
                });
            }
            if s.data.iter().any(|&v| v < 0.0) {
                return Err(TensorError::Domain {
                    op: "mc_cross_entropy_rows",
                    msg: "standard deviation must be non-negative".into(),
                });
            }
            let mut losses = vec![0.0; r];
            let mut dlogits = vec![0.0; r * c];
            let mut dsigma = vec![0.0; r * c];
            let mut corrupted = vec![0.0; c];
            let mut log_p = vec![0.0; samples];
            let mut probs = vec![0.0; samples * c];
            for i in 0..r {
                let Some(gold) = targets[i] else { continue };
                let yr = &y.data[i * c..(i + 1) * c];
                let sr = &s.data[i * c..(i + 1) * c];
                for t in 0..samples {
                    let er = &eps[(t * r + i) * c..(t * r + i + 1) * c];
                    for j in 0..c {
                        corrupted[j] = yr[j] + er[j] * sr[j];
                    }
                    let (p, lse) = softmax_logsumexp(&corrupted)?;
                    log_p[t] = corrupted[gold] - lse;
                    probs[t * c..(t + 1) * c].copy_from_slice(&p);
                }
                // weights w_t = p_t[gold] / Σ p_s[gold]; written as -m - ln(mean e^(lp-m))
                // so identical samples reduce exactly to the plain cross-entropy
                let m = log_p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = log_p.iter().map(|lp| (lp - m).exp()).collect();
                let total: f64 = w.iter().sum();
                losses[i] = -m - (total / samples as f64).ln();
                let w: Vec<f64> = w.iter().map(|x| x / total).collect();
                for t in 0..samples {
                    let er = &eps[(t * r + i) * c..(t * r + i + 1) * c];
                    for j in 0..c {
                        let g = w[t] * (probs[t * c + j] - if j == gold { 1.0 } else { 0.0 });
                        dlogits[i * c + j] += g;
                        dsigma[i * c + j] += g * er[j];
                    }
                }
            }
            (r, losses, dlogits, dsigma)
        };
        finite("mc_cross_entropy_rows", &losses)?;
        let needs = self.requires_grad() || sigma.requires_grad();
        Ok(self.tape.push_node(
            Tensor::from_parts(vec![r, 1], losses),
            Op::McCrossEntropyRows {
                logits: self.id,
                sigma: sigma.id,
                dlogits,
                dsigma,
            },
            needs,
        ))
    }

    /// Same values under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.with_value(|t| t.clone()).reshape(shape.to_vec())?;
        Ok(self.tape.push_node(value, Op::Reshape(self.id), self.requires_grad()))
    }

    /// Elementwise `α(e^x − 1)` for `x < 0`, identity otherwise.
    pub fn distort(&self, alpha: f64) -> Result<Var<'t>> {
        self.unary(
            "distort",
            |x| if x < 0.0 { alpha * (x.exp() - 1.0) } else { x },
            |a| Op::Distort(a, alpha),
        )
    }
}

fn check_targets(op: &'static str, r: usize, c: usize, targets: &[Option<usize>]) -> Result<()> {
    if targets.len() != r {
        return Err(TensorError::Shape {
            op,
            left: vec![r, c],
            right: vec![targets.len()],
        });
    }
    if let Some(bad) = targets.iter().flatten().find(|&&t| t >= c) {
        return Err(TensorError::Domain {
            op,
            msg: format!("target {bad} out of range for {c} classes"),
        });
    }
    Ok(())
}

/// `a (m×k) · b (k×n)`, i-p-j loop order.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, w)| *o += aip * w);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::{grad_check, Tape};
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let tape = Tape::new();
        let a = tape.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let i = tape.constant(Tensor::identity(2));
        assert_eq!(a.matmul(&i).unwrap().to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        let b = tape.constant(t(&[vec![5.0, 6.0], vec![7.0, 8.0]]));
        assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match a.matmul(&b) {
            Err(TensorError::Shape { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let b = t(&[vec![0.3, -1.2, 0.5], vec![2.0, 0.1, -0.7]]);
        let a0 = t(&[vec![0.4, -0.9], vec![1.5, 0.2], vec![-0.3, 0.8]]);
        let report = grad_check(
            |tape, a| {
                let bv = tape.constant(b.clone());
                a.matmul(&bv)?.sum()
            },
            &a0,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }

    #[test]
    fn elementwise_basics() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(&[1.0, 2.0, 3.0]).unwrap());
        let z = tape.constant(Tensor::zeros(&[3]));
        assert_eq!(x.mul(&z).unwrap().to_vec(), vec![0.0; 3]);
        let zero = tape.constant(Tensor::scalar(0.0).unwrap());
        assert_eq!(zero.tanh().unwrap().to_vec(), vec![0.0]);
        assert_eq!(zero.sigmoid().unwrap().to_vec(), vec![0.5]);
        let y = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(x.add(&y), Err(TensorError::Shape { .. })));
        assert!(matches!(z.log(), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn tanh_derivative_at_point_seven() {
        let x0 = Tensor::scalar(0.7).unwrap();
        let r = grad_check(|_, x| x.tanh()?.sum(), &x0, 1e-5).unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
        let tape = Tape::new();
        let x = tape.leaf(&x0);
        let g = tape.backward(x.tanh().unwrap().sum().unwrap()).unwrap();
        let expected = 1.0 - 0.7f64.tanh().powi(2);
        assert!((g.get(x).unwrap().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn softmax_fixed_points() {
        for c in [-5.0, 0.0, 3.5, 1e3] {
            let (p, _) = softmax_logsumexp(&[c, c, c]).unwrap();
            for pi in p {
                assert!((pi - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        let (p, lse) = softmax_logsumexp(&[0.0, 2f64.ln()]).unwrap();
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!((lse - 3f64.ln()).abs() < 1e-15);
        let (p, lse) = softmax_logsumexp(&[1000.0, 1000.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        assert!((lse - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!(softmax_logsumexp(&[]).is_err());
        assert!(softmax_logsumexp(&[1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let x0 = t(&[vec![0.3, -0.8, 1.1], vec![-0.4, 0.9, 0.2]]);
        let w = t(&[vec![0.5, -0.2], vec![0.1, 0.7], vec![-0.6, 0.3]]);
        let bias = Tensor::row(&[0.05, -0.1]).unwrap();
        let eps: Vec<f64> = (0..3 * 2 * 3).map(|i| ((i * 37 % 11) as f64 - 5.0) / 4.0).collect();
        let r = grad_check(
            |tape, x| {
                let wv = tape.constant(w.clone());
                let bv = tape.constant(bias.clone());
                let h = x.matmul(&wv)?.add_row_bias(&bv)?.tanh()?;
                let g = x.sigmoid()?.mul(&x.exp()?)?;
                let sp = x.softplus()?.sqrt()?.log()?;
                let cat = Var::concat_cols(&[h, x.slice_cols(1, 2)?])?;
                let sm = cat.softmax_rows()?;
                let lse = cat.logsumexp_rows()?;
                let dot = g.row_dot(&sp)?;
                let scaled = x.scale_rows(&dot.tanh()?)?;
                let ce = cat.cross_entropy_rows(&[Some(1), Some(3)])?;
                let sigma = x.softplus()?;
                let mc = x.mc_cross_entropy_rows(&sigma, &eps, 3, &[Some(0), Some(2)])?;
                let blend = x.blend_rows(&scaled, &[true, false])?;
                let dist = x.distort(1.3)?;
                let parts = [
                    sm.mul(&sm)?.sum()?,
                    lse.sum()?,
                    ce.sum()?,
                    mc.sum()?,
                    blend.mul(&blend)?.sum()?,
                    dist.row_sum()?.sum()?,
                    x.sub(&g)?.scale(0.3)?.add_scalar(1.0)?.mul(&x)?.sum()?,
                ];
                let mut total = parts[0];
                for p in &parts[1..] {
                    total = total.add(p)?;
                }
                Ok(total)
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-5, "{r:?}");
    }

    #[test]
    fn grad_reverse_negates_and_scales() {
        let x0 = Tensor::vector(&[0.2, -0.4, 1.0]).unwrap();
        for gamma in [0.0, 1.0, 2.5] {
            let tape = Tape::new();
            let x = tape.leaf(&x0);
            let y = x.grad_reverse(gamma).unwrap();
            assert_eq!(y.value(), x0);
            let loss = y.mul(&y).unwrap().sum().unwrap();
            let g = tape.backward(loss).unwrap().get(x).unwrap();
            for (gi, xi) in g.data().iter().zip(x0.data()) {
                assert_eq!(*gi, -gamma * 2.0 * xi);
            }
        }
        let tape = Tape::new();
        let x = tape.leaf(&x0);
        assert!(x.grad_reverse(-1.0).is_err());
    }

    #[test]
    fn embed_gradient_and_range() {
        let table = t(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let tape = Tape::new();
        let tv = tape.leaf(&table);
        let e = tv.embed(&[2, 0, 2]).unwrap();
        assert_eq!(e.to_vec(), vec![3.0, 6.0, 1.0, 4.0, 3.0, 6.0]);
        let g = tape.backward(e.sum().unwrap()).unwrap();
        assert_eq!(g.get(tv).unwrap().data(), &[1.0, 0.0, 2.0, 1.0, 0.0, 2.0]);
        assert!(tv.embed(&[3]).is_err());
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::vector(&[1.0, 2.0]).unwrap());
        assert_eq!(
            tape.backward(c.sum().unwrap()).unwrap_err(),
            TensorError::Detached
        );
        let x = tape.leaf(&Tensor::vector(&[1.0, 2.0]).unwrap());
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn sum_and_dot_gradients() {
        let tape = Tape::new();
        let x0 = Tensor::vector(&[0.5, -1.5, 2.0]).unwrap();
        let x = tape.leaf(&x0);
        let g = tape.backward(x.sum().unwrap()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
        let dot = x.mul(&x).unwrap().sum().unwrap();
        let g = tape.backward(dot).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, -3.0, 4.0]);
    }

    #[test]
    fn zero_sigma_mc_loss_equals_cross_entropy_bitwise() {
        let tape = Tape::new();
        let mut rng = crate::tensor::RngStream::new(21, 0);
        let y = Tensor::new(vec![3, 5], (0..15).map(|_| rng.normal() * 3.0).collect()).unwrap();
        let y = tape.leaf(&y);
        let sigma = tape.constant(Tensor::zeros(&[3, 5]));
        let targets = [Some(4), None, Some(1)];
        let ce = y.cross_entropy_rows(&targets).unwrap().to_vec();
        for t in [1, 2, 7] {
            let eps: Vec<f64> = (0..t * 15).map(|_| rng.normal()).collect();
            let mc = y.mc_cross_entropy_rows(&sigma, &eps, t, &targets).unwrap().to_vec();
            assert_eq!(mc, ce);
        }
    }
}
