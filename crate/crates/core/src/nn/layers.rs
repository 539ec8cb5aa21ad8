use super::{apply_mask, layer_tag, Bound, Noise, ParamStore};
use crate::tensor::{Result, RngStream, TensorError, Var};

/// `x · W + b` with `W: in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool, rng: &mut RngStream) -> Self {
        let weight = format!("{name}.w");
        store.init_glorot(&weight, [in_dim, out_dim], rng);
        let bias = bias.then(|| {
            let b = format!("{name}.b");
            store.init_constant(&b, &[1, out_dim], 0.0);
            b
        });
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(&p.get(&self.weight))?;
        match &self.bias {
            Some(b) => y.add_row_bias(&p.get(b)),
            None => Ok(y),
        }
    }
}

/// Feed-forward stack with a dropout application in front of every linear
/// layer and `tanh` after each one. Stand-in for a Bayesian CNN over
/// precomputed features.
#[derive(Debug, Clone)]
pub struct BayesianMlp {
    pub name: String,
    pub layers: Vec<Linear>,
}

impl BayesianMlp {
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut RngStream) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.l{i}"), w[0], w[1], true, rng))
            .collect();
        Self {
            name: name.to_string(),
            layers,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>, noise: Noise<'_>) -> Result<Var<'t>> {
        let (rows, cols) = x.dims2();
        if cols != self.in_dim() {
            return Err(TensorError::Shape {
                op: "mlp_forward",
                left: vec![rows, cols],
                right: vec![self.in_dim()],
            });
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let mask = noise.mask(layer_tag(&format!("{}.l{i}.drop", self.name)), rows, layer.in_dim)?;
            h = apply_mask(h, mask.as_ref())?;
            h = layer.forward(p, h)?.tanh()?;
        }
        Ok(h)
    }
}

/// Word embedding matrix of shape `E × V`; token `v` maps to column `v`.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub name: String,
    pub dim: usize,
    pub vocab: usize,
}

impl EmbeddingTable {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, vocab: usize, rng: &mut RngStream) -> Self {
        let name = format!("{name}.table");
        // fan-in of a one-hot input is 1; keep the embeddings on the unit scale
        store.init_uniform(&name, &[dim, vocab], 1, rng);
        Self { name, dim, vocab }
    }

    pub fn lookup<'t>(&self, p: &Bound<'t>, ids: &[usize]) -> Result<Var<'t>> {
        p.get(&self.name).embed(ids)
    }
}
