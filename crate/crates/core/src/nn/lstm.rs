use super::{apply_mask, layer_tag, Bound, Noise, ParamStore};
use crate::tensor::{Result, RngStream, Tensor, TensorError, Var};

const GATES: [&str; 4] = ["input", "forget", "output", "cell"];

/// LSTM cell with variational (per-sequence) dropout.
///
/// Each of the four gates has its own weight matrix over the concatenated
/// `[x, h]` input and its own dropout mask over that input; a fifth mask
/// drops the emitted hidden state. All five masks are drawn once per
/// sequence and reused at every step.
#[derive(Debug, Clone)]
pub struct BayesianLstmCell {
    pub name: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

/// Per-sequence masks. `None` entries mean no dropout.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LstmMasks {
    pub gates: [Option<Tensor>; 4],
    pub output: Option<Tensor>,
}

pub struct LstmRun<'t> {
    /// Masked output at every step.
    pub outputs: Vec<Var<'t>>,
    /// Unmasked hidden state after the last step.
    pub h: Var<'t>,
    pub c: Var<'t>,
}

impl BayesianLstmCell {
    pub fn new(store: &mut ParamStore, name: &str, input_dim: usize, hidden_dim: usize, rng: &mut RngStream) -> Self {
        let fan_in = input_dim + hidden_dim;
        for gate in GATES {
            store.init_uniform(&format!("{name}.{gate}.w"), &[fan_in, hidden_dim], fan_in, rng);
            let bias = if gate == "forget" { 1.0 } else { 0.0 };
            store.init_constant(&format!("{name}.{gate}.b"), &[1, hidden_dim], bias);
        }
        Self {
            name: name.to_string(),
            input_dim,
            hidden_dim,
        }
    }

    pub fn sample_masks(&self, noise: Noise<'_>, rows: usize) -> Result<LstmMasks> {
        let width = self.input_dim + self.hidden_dim;
        let mut gates: [Option<Tensor>; 4] = Default::default();
        for (slot, gate) in gates.iter_mut().zip(GATES) {
            *slot = noise.mask(layer_tag(&format!("{}.{gate}.drop", self.name)), rows, width)?;
        }
        let output = noise.mask(layer_tag(&format!("{}.out.drop", self.name)), rows, self.hidden_dim)?;
        Ok(LstmMasks { gates, output })
    }

    pub fn zero_state<'t>(&self, p: &Bound<'t>, rows: usize) -> (Var<'t>, Var<'t>) {
        let tape = p.get(&format!("{}.input.w", self.name)).tape();
        let z = Tensor::zeros(&[rows, self.hidden_dim]);
        (tape.constant(z.clone()), tape.constant(z))
    }

    /// One recurrence step; returns `(h, c)`.
    pub fn step<'t>(
        &self,
        p: &Bound<'t>,
        x: Var<'t>,
        h: Var<'t>,
        c: Var<'t>,
        masks: &LstmMasks,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let (rows, cols) = x.dims2();
        if cols != self.input_dim {
            return Err(TensorError::Shape {
                op: "lstm_step",
                left: vec![rows, cols],
                right: vec![self.input_dim],
            });
        }
        let xh = Var::concat_cols(&[x, h])?;
        let mut pre = Vec::with_capacity(4);
        for (gate, mask) in GATES.iter().zip(&masks.gates) {
            let input = apply_mask(xh, mask.as_ref())?;
            let w = p.get(&format!("{}.{gate}.w", self.name));
            let b = p.get(&format!("{}.{gate}.b", self.name));
            pre.push(input.matmul(&w)?.add_row_bias(&b)?);
        }
        let i = pre[0].sigmoid()?;
        let f = pre[1].sigmoid()?;
        let o = pre[2].sigmoid()?;
        let g = pre[3].tanh()?;
        let c_next = f.mul(&c)?.add(&i.mul(&g)?)?;
        let h_next = o.mul(&c_next.tanh()?)?;
        Ok((h_next, c_next))
    }

    /// Runs the recurrence over `inputs`. `active[t][r] == false` freezes row
    /// `r` at step `t` (used for padded variable-length batches).
    pub fn run<'t>(
        &self,
        p: &Bound<'t>,
        inputs: &[Var<'t>],
        state: (Var<'t>, Var<'t>),
        masks: &LstmMasks,
        active: Option<&[Vec<bool>]>,
    ) -> Result<LstmRun<'t>> {
        if inputs.is_empty() {
            return Err(TensorError::Empty("lstm_sequence"));
        }
        let (mut h, mut c) = state;
        let mut outputs = Vec::with_capacity(inputs.len());
        for (t, x) in inputs.iter().enumerate() {
            let (hn, cn) = self.step(p, *x, h, c, masks)?;
            match active.map(|a| &a[t]) {
                Some(rows) if rows.iter().any(|r| !r) => {
                    h = hn.blend_rows(&h, rows)?;
                    c = cn.blend_rows(&c, rows)?;
                }
                _ => {
                    h = hn;
                    c = cn;
                }
            }
            outputs.push(apply_mask(h, masks.output.as_ref())?);
        }
        Ok(LstmRun { outputs, h, c })
    }
}
