use super::{Result, Tape, Tensor, TensorError, Var};

/// Denominator floor for the relative error.
const DENOM_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the tape gradient of `f` at `theta` against central differences.
///
/// Per coordinate the error is `|a - n| / max(|a|, |n|, 1e-2)`, so
/// coordinates with tiny gradients are judged on absolute error.
pub fn grad_check<F>(f: F, theta: &Tensor, h: f64) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(TensorError::Domain {
            op: "grad_check",
            msg: format!("step must be positive, got {h}"),
        });
    }
    let analytic = {
        let tape = Tape::new();
        let x = tape.leaf(theta);
        let loss = f(&tape, x)?;
        match tape.backward(loss) {
            Ok(g) => g
                .get_raw(x)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; theta.numel()]),
            Err(TensorError::Detached) => vec![0.0; theta.numel()],
            Err(e) => return Err(e),
        }
    };
    let eval = |values: Vec<f64>| -> Result<f64> {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(theta.shape().to_vec(), values)?);
        let v = f(&tape, x)?
            .item()
            .ok_or(TensorError::NonScalarLoss(theta.shape().to_vec()))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(TensorError::NonFinite("grad_check evaluation"))
        }
    };
    let mut numeric = Vec::with_capacity(theta.numel());
    let mut worst = (0.0, 0);
    for i in 0..theta.numel() {
        let mut plus = theta.data().to_vec();
        plus[i] += h;
        let mut minus = theta.data().to_vec();
        minus[i] -= h;
        let n = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic[i];
        let err = (a - n).abs() / a.abs().max(n.abs()).max(DENOM_FLOOR);
        if err > worst.0 {
            worst = (err, i);
        }
        numeric.push(n);
    }
    Ok(GradCheck {
        max_rel_error: worst.0,
        worst_index: worst.1,
        analytic,
        numeric,
    })
}
