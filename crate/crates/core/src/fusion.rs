//! Per-cue fusion with the image embedding, the gating moderator that weighs
//! the fused cues, and the concatenation mixture used by the `*Mix` variants.

use serde::{Deserialize, Serialize};

use crate::nn::{apply_mask, layer_tag, BayesianMlp, Bound, Linear, Noise, ParamStore};
use crate::tensor::{Result, RngStream, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cue {
    Image,
    Place,
    Caption,
    Tag,
}

impl Cue {
    pub const ALL: [Cue; 4] = [Cue::Image, Cue::Place, Cue::Caption, Cue::Tag];

    pub fn name(self) -> &'static str {
        match self {
            Cue::Image => "image",
            Cue::Place => "place",
            Cue::Caption => "caption",
            Cue::Tag => "tag",
        }
    }
}

/// Which vectors the gate correlates with its gating embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateSource {
    /// The fused per-cue embeddings.
    #[default]
    Fused,
    /// The raw cue encoder outputs.
    Raw,
}

/// Parameters of one cue's fusion branch.
#[derive(Debug, Clone)]
pub struct FusionBranch {
    pub cue: Cue,
    pub cue_proj: Linear,
    pub bias: String,
    pub output: Linear,
}

/// `μ_B = dropout(tanh(g_i W_i ⊙ g_B W_B + b_B)) W_BB` for every non-image cue,
/// with `W_i` shared across cues.
#[derive(Debug, Clone)]
pub struct Fusion {
    pub image_proj: Linear,
    pub branches: Vec<FusionBranch>,
}

impl Fusion {
    /// `cues` lists the non-image cues with their encoder widths. With
    /// `share_tag_output` the tag branch reuses the caption branch's output
    /// projection when both are present.
    pub fn new(
        store: &mut ParamStore,
        image_dim: usize,
        cues: &[(Cue, usize)],
        hidden: usize,
        out: usize,
        share_tag_output: bool,
        rng: &mut RngStream,
    ) -> Self {
        let image_proj = Linear::new(store, "fuse.image", image_dim, hidden, false, rng);
        let mut branches: Vec<FusionBranch> = Vec::with_capacity(cues.len());
        for &(cue, dim) in cues {
            let name = format!("fuse.{}", cue.name());
            let cue_proj = Linear::new(store, &format!("{name}.in"), dim, hidden, false, rng);
            let bias = format!("{name}.b");
            store.init_constant(&bias, &[1, hidden], 0.0);
            let shared = (share_tag_output && cue == Cue::Tag)
                .then(|| branches.iter().find(|b| b.cue == Cue::Caption).map(|b| b.output.clone()))
                .flatten();
            let output = shared.unwrap_or_else(|| Linear::new(store, &format!("{name}.out"), hidden, out, false, rng));
            branches.push(FusionBranch {
                cue,
                cue_proj,
                bias,
                output,
            });
        }
        Self { image_proj, branches }
    }

    /// Fused embedding per branch, in branch order.
    pub fn fuse<'t>(&self, p: &Bound<'t>, g_image: Var<'t>, cue_embeddings: &[Var<'t>], noise: Noise<'_>) -> Result<Vec<Var<'t>>> {
        if cue_embeddings.len() != self.branches.len() {
            return Err(TensorError::Shape {
                op: "fuse",
                left: vec![self.branches.len()],
                right: vec![cue_embeddings.len()],
            });
        }
        let projected = self.image_proj.forward(p, g_image)?;
        self.branches
            .iter()
            .zip(cue_embeddings)
            .map(|(b, g)| fuse_projected(p, b, projected, *g, noise))
            .collect()
    }
}

/// One fused embedding from raw `g_i` and `g_B`.
pub fn fuse_cue<'t>(
    p: &Bound<'t>,
    image_proj: &Linear,
    branch: &FusionBranch,
    g_image: Var<'t>,
    g_cue: Var<'t>,
    noise: Noise<'_>,
) -> Result<Var<'t>> {
    let projected = image_proj.forward(p, g_image)?;
    fuse_projected(p, branch, projected, g_cue, noise)
}

fn fuse_projected<'t>(
    p: &Bound<'t>,
    branch: &FusionBranch,
    image_projected: Var<'t>,
    g_cue: Var<'t>,
    noise: Noise<'_>,
) -> Result<Var<'t>> {
    let joint = image_projected
        .mul(&branch.cue_proj.forward(p, g_cue)?)?
        .add_row_bias(&p.get(&branch.bias))?
        .tanh()?;
    let (rows, width) = joint.dims2();
    let mask = noise.mask(layer_tag(&format!("fuse.{}.drop", branch.cue.name())), rows, width)?;
    branch.output.forward(p, apply_mask(joint, mask.as_ref())?)
}

/// Gating network over raw image features plus the score temperature.
#[derive(Debug, Clone)]
pub struct Moderator {
    pub gate_net: BayesianMlp,
    pub temperature: f64,
    pub source: GateSource,
}

impl Moderator {
    pub fn new(
        store: &mut ParamStore,
        image_feat_dim: usize,
        out: usize,
        temperature: f64,
        source: GateSource,
        rng: &mut RngStream,
    ) -> Self {
        Self {
            gate_net: BayesianMlp::new(store, "gate", &[image_feat_dim, out], rng),
            temperature,
            source,
        }
    }
}

/// Scores `⟨candidate_B, g_gat⟩ / τ` per row and cue, softmax-normalised over
/// the cues: returns `rows × cues`.
pub fn moderator_gate<'t>(
    p: &Bound<'t>,
    moderator: &Moderator,
    candidates: &[Var<'t>],
    image_feat: Var<'t>,
    noise: Noise<'_>,
) -> Result<Var<'t>> {
    if candidates.is_empty() {
        return Err(TensorError::Empty("moderator_gate: no active cues"));
    }
    if !(moderator.temperature.is_finite() && moderator.temperature > 0.0) {
        return Err(TensorError::Domain {
            op: "moderator_gate",
            msg: format!("temperature must be positive, got {}", moderator.temperature),
        });
    }
    let gate = moderator.gate_net.forward(p, image_feat, noise)?;
    let scores = candidates
        .iter()
        .map(|c| c.row_dot(&gate))
        .collect::<Result<Vec<_>>>()?;
    Var::concat_cols(&scores)?
        .scale(1.0 / moderator.temperature)?
        .softmax_rows()
}

/// `Σ_B π_B μ_B` per row. Rejects weights that are not on the simplex (1e-9).
pub fn mix_encoding<'t>(weights: Var<'t>, fused: &[Var<'t>]) -> Result<Var<'t>> {
    let (rows, cols) = weights.dims2();
    if cols != fused.len() || fused.is_empty() {
        return Err(TensorError::Shape {
            op: "mix_encoding",
            left: vec![rows, cols],
            right: vec![fused.len()],
        });
    }
    let w = weights.value();
    for r in 0..rows {
        let row = w.row_slice(r);
        let total: f64 = row.iter().sum();
        if row.iter().any(|&x| x < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(TensorError::Domain {
                op: "mix_encoding",
                msg: format!("row {r} weights {row:?} are not a probability vector"),
            });
        }
    }
    let mut acc: Option<Var<'t>> = None;
    for (b, mu) in fused.iter().enumerate() {
        let term = mu.scale_rows(&weights.slice_cols(b, 1)?)?;
        acc = Some(match acc {
            Some(a) => a.add(&term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least one fused embedding"))
}

/// Concatenation followed by a learned projection; replaces the moderator.
#[derive(Debug, Clone)]
pub struct SimpleMixture {
    pub proj: Linear,
}

impl SimpleMixture {
    pub fn new(store: &mut ParamStore, in_dims: &[usize], out: usize, rng: &mut RngStream) -> Self {
        Self {
            proj: Linear::new(store, "mixture", in_dims.iter().sum(), out, true, rng),
        }
    }
}

pub fn simple_mixture<'t>(p: &Bound<'t>, mixture: &SimpleMixture, embeddings: &[Var<'t>]) -> Result<Var<'t>> {
    if embeddings.is_empty() {
        return Err(TensorError::Empty("simple_mixture"));
    }
    let joined = if embeddings.len() == 1 {
        embeddings[0]
    } else {
        Var::concat_cols(embeddings)?
    };
    mixture.proj.forward(p, joined)
}
