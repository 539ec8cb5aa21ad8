//! Bayesian building blocks: MC-dropout MLPs, variational-dropout LSTM
//! cells, embedding tables and Monte-Carlo predictive statistics.
//!
//! Layers hold parameter *names*; values live in a [`ParamStore`] and are
//! placed on a tape with [`ParamStore::bind`] for each forward pass.
//!
//! Dropout masks are drawn per batch row from that row's own [`RngStream`],
//! split by a tag derived from the layer name. A row's masks therefore do not
//! depend on which other rows share its batch, or on the order layers run in.

mod layers;
mod lstm;
mod mc;
mod params;

pub use layers::{BayesianMlp, EmbeddingTable, Linear};
pub use lstm::{BayesianLstmCell, LstmMasks, LstmRun};
pub use mc::{mc_predict, McStatistics};
pub use params::{shape_diff, Bound, CheckpointError, ParamStore};

use serde::{Deserialize, Serialize};

use crate::tensor::{sample_mask, DropoutKind, Result, RngStream, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutSpec {
    pub rate: f64,
    pub kind: DropoutKind,
}

impl DropoutSpec {
    pub fn bernoulli(rate: f64) -> Self {
        Self {
            rate,
            kind: DropoutKind::Bernoulli,
        }
    }
}

/// Where dropout masks come from for one forward pass.
#[derive(Clone, Copy)]
pub enum Noise<'a> {
    /// No dropout anywhere.
    Off,
    /// Fresh masks per row, drawn from `rows[i]`.
    Sample {
        spec: DropoutSpec,
        rows: &'a [RngStream],
    },
}

impl<'a> Noise<'a> {
    pub fn sample(spec: DropoutSpec, rows: &'a [RngStream]) -> Self {
        Noise::Sample { spec, rows }
    }

    pub fn is_active(&self) -> bool {
        matches!(self, Noise::Sample { spec, .. } if spec.rate > 0.0)
    }

    /// `rows × width` mask for the layer identified by `tag`, or `None` when inactive.
    pub fn mask(&self, tag: u64, rows: usize, width: usize) -> Result<Option<Tensor>> {
        let Noise::Sample { spec, rows: streams } = self else {
            return Ok(None);
        };
        if !(0.0..1.0).contains(&spec.rate) {
            return Err(TensorError::Domain {
                op: "dropout",
                msg: format!("rate must lie in [0, 1), got {}", spec.rate),
            });
        }
        if spec.rate == 0.0 {
            return Ok(None);
        }
        if streams.len() != rows {
            return Err(TensorError::Shape {
                op: "dropout mask",
                left: vec![rows, width],
                right: vec![streams.len()],
            });
        }
        let mut data = Vec::with_capacity(rows * width);
        for s in streams.iter() {
            let mut child = s.split(tag);
            data.extend_from_slice(sample_mask(spec.kind, spec.rate, &[width], &mut child)?.data());
        }
        Tensor::new(vec![rows, width], data).map(Some)
    }
}

/// Stable 64-bit tag for a layer name (FNV-1a).
pub fn layer_tag(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Multiplies by `mask` when present.
pub fn apply_mask<'t>(x: Var<'t>, mask: Option<&Tensor>) -> Result<Var<'t>> {
    match mask {
        Some(m) => x.mul(&x.tape().constant(m.clone())),
        None => Ok(x),
    }
}

/// Identity forward, `-gamma ×` gradient backward.
pub fn gradient_reversal<'t>(x: &Var<'t>, gamma: f64) -> Result<Var<'t>> {
    x.grad_reverse(gamma)
}
