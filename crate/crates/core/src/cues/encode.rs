use super::tags::TagSet;
use super::vocab::PAD;
use crate::nn::{BayesianLstmCell, BayesianMlp, Bound, EmbeddingTable, Noise};
use crate::tensor::{Result, Tensor, TensorError, Var};

/// Final hidden state of `cell` over each embedded sequence (one row per
/// sequence). Shorter sequences are PAD-extended and frozen once exhausted.
pub fn encode_sequences<'t>(
    cell: &BayesianLstmCell,
    emb: &EmbeddingTable,
    p: &Bound<'t>,
    seqs: &[&[usize]],
    noise: Noise<'_>,
) -> Result<Var<'t>> {
    if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
        return Err(TensorError::Empty("encode_sequences"));
    }
    let rows = seqs.len();
    let steps = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let masks = cell.sample_masks(noise, rows)?;
    let mut inputs = Vec::with_capacity(steps);
    let mut active = Vec::with_capacity(steps);
    for t in 0..steps {
        let ids: Vec<usize> = seqs.iter().map(|s| s.get(t).copied().unwrap_or(PAD)).collect();
        inputs.push(emb.lookup(p, &ids)?);
        active.push(seqs.iter().map(|s| t < s.len()).collect::<Vec<_>>());
    }
    let run = cell.run(p, &inputs, cell.zero_state(p, rows), &masks, Some(&active))?;
    Ok(run.h)
}

pub fn encode_caption<'t>(
    cell: &BayesianLstmCell,
    emb: &EmbeddingTable,
    p: &Bound<'t>,
    captions: &[&[usize]],
    noise: Noise<'_>,
) -> Result<Var<'t>> {
    encode_sequences(cell, emb, p, captions, noise)
}

/// Tag encoder: one LSTM over the joint 15-token sequence, or one LSTM per
/// category with their final states concatenated.
#[derive(Debug, Clone)]
pub enum TagEncoder {
    Joint(BayesianLstmCell),
    PerCategory([BayesianLstmCell; 3]),
}

impl TagEncoder {
    pub fn out_dim(&self) -> usize {
        match self {
            TagEncoder::Joint(c) => c.hidden_dim,
            TagEncoder::PerCategory(cs) => cs.iter().map(|c| c.hidden_dim).sum(),
        }
    }
}

pub fn encode_tags<'t>(
    encoder: &TagEncoder,
    emb: &EmbeddingTable,
    p: &Bound<'t>,
    tags: &[&TagSet],
    noise: Noise<'_>,
) -> Result<Var<'t>> {
    match encoder {
        TagEncoder::Joint(cell) => {
            let seqs: Vec<Vec<usize>> = tags.iter().map(|t| t.joint()).collect();
            let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
            encode_sequences(cell, emb, p, &refs, noise)
        }
        TagEncoder::PerCategory(cells) => {
            let mut parts = Vec::with_capacity(3);
            for (k, cell) in cells.iter().enumerate() {
                let refs: Vec<&[usize]> = tags.iter().map(|t| t.categories()[k]).collect();
                parts.push(encode_sequences(cell, emb, p, &refs, noise)?);
            }
            Var::concat_cols(&parts)
        }
    }
}

/// Stacks per-example feature vectors into a constant `rows × dim` input.
pub fn feature_rows<'t>(p: &Bound<'t>, feats: &[&[f64]], tape_anchor: &str) -> Result<Var<'t>> {
    let dim = feats.first().map_or(0, |f| f.len());
    if feats.is_empty() || dim == 0 {
        return Err(TensorError::Empty("feature_rows"));
    }
    let rows: Vec<Vec<f64>> = feats.iter().map(|f| f.to_vec()).collect();
    let t = Tensor::from_rows(&rows)?;
    Ok(p.get(tape_anchor).tape().constant(t))
}

pub fn encode_image<'t>(net: &BayesianMlp, p: &Bound<'t>, feats: &[&[f64]], noise: Noise<'_>) -> Result<Var<'t>> {
    let x = feature_rows(p, feats, &net.layers[0].weight)?;
    net.forward(p, x, noise)
}

pub fn encode_place<'t>(net: &BayesianMlp, p: &Bound<'t>, feats: &[&[f64]], noise: Noise<'_>) -> Result<Var<'t>> {
    encode_image(net, p, feats, noise)
}
