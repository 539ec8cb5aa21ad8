//! The assembled question generator: cue encoders, the combiner (moderator,
//! concatenation mixture, or a lone cue), and the decoder, together with the
//! two-pass training loss, Monte-Carlo generation and the encoding variance
//! probe.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cues::{
    encode_caption, encode_image, encode_place, encode_tags, feature_rows, CueBundle, TagEncoder, BOS, EOS,
};
use crate::decoder::{
    aleatoric_mc_loss_per_example, decode_teacher_forced, distorted_loss, gen_loss, gen_loss_per_example,
    generate_greedy, generate_mc_mean, mumc_refine, total_loss, Decoder, DecodeOutput, MumcConfig, QuestionSample,
};
use crate::fusion::{mix_encoding, moderator_gate, simple_mixture, Cue, Fusion, GateSource, Moderator, SimpleMixture};
use crate::nn::{BayesianLstmCell, BayesianMlp, Bound, DropoutSpec, EmbeddingTable, LstmMasks, McStatistics, Noise, ParamStore};
use crate::tensor::{DropoutKind, RngStream, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type ModelResult<T> = Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combiner {
    /// Fuse every cue with the image and weigh the results with the gate.
    #[default]
    Moderator,
    /// Concatenate the raw cue encodings and project them.
    Mixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropoutMode {
    None,
    #[default]
    Bernoulli,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DropoutConfig {
    pub rate: f64,
    pub kind: DropoutMode,
    /// Keep dropout on when generating and probing.
    pub at_inference: bool,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        Self {
            rate: 0.3,
            kind: DropoutMode::Bernoulli,
            at_inference: true,
        }
    }
}

impl DropoutConfig {
    fn spec(&self, kind: DropoutMode) -> Option<DropoutSpec> {
        let kind = match kind {
            DropoutMode::None => return None,
            DropoutMode::Bernoulli => DropoutKind::Bernoulli,
            DropoutMode::Gaussian => DropoutKind::Gaussian,
        };
        (self.rate > 0.0).then_some(DropoutSpec { rate: self.rate, kind })
    }

    pub fn training(&self) -> Option<DropoutSpec> {
        self.spec(self.kind)
    }

    pub fn inference(&self) -> Option<DropoutSpec> {
        if self.at_inference {
            self.training()
        } else {
            None
        }
    }

    /// Noise used by the variance probe. A model trained without dropout is
    /// probed with Bernoulli noise at `rate`.
    pub fn probe(&self) -> Option<DropoutSpec> {
        match self.kind {
            DropoutMode::None => self.spec(DropoutMode::Bernoulli),
            k => self.spec(k),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagEncoding {
    /// One recurrent encoder over the noun, verb and question tags in sequence.
    #[default]
    Joint,
    /// One encoder per tag category, outputs concatenated.
    PerCategory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    /// Hidden width of encoders, fusion and decoder.
    pub hidden: usize,
    pub embed_dim: usize,
    /// Optional dimension pins; must agree with the dataset when given.
    pub vocab: Option<usize>,
    pub image_dim: Option<usize>,
    pub place_dim: Option<usize>,
    pub cues: Vec<Cue>,
    pub combiner: Combiner,
    pub dropout: DropoutConfig,
    pub tag_encoder: TagEncoding,
    pub share_tag_output: bool,
    pub gate_source: GateSource,
    pub temperature: f64,
    pub mumc: MumcConfig,
    pub max_len: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden: 64,
            embed_dim: 32,
            vocab: None,
            image_dim: None,
            place_dim: None,
            cues: Cue::ALL.to_vec(),
            combiner: Combiner::Moderator,
            dropout: DropoutConfig::default(),
            tag_encoder: TagEncoding::Joint,
            share_tag_output: false,
            gate_source: GateSource::Fused,
            temperature: 1.0,
            mumc: MumcConfig::default(),
            max_len: 16,
        }
    }
}

/// Sizes fixed by the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataDims {
    pub vocab: usize,
    pub image_dim: usize,
    pub place_dim: usize,
}

impl ModelSpec {
    /// Active cues in canonical order without duplicates.
    pub fn active_cues(&self) -> Vec<Cue> {
        Cue::ALL.into_iter().filter(|c| self.cues.contains(c)).collect()
    }

    pub fn validate(&self) -> ModelResult<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.cues.is_empty() {
            return bad("cue set must not be empty".into());
        }
        let mut seen = self.cues.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.cues.len() {
            return bad(format!("duplicate cue in {:?}", self.cues));
        }
        if self.hidden == 0 || self.embed_dim == 0 {
            return bad("hidden and embed_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout.rate) {
            return bad(format!("dropout rate must lie in [0, 1), got {}", self.dropout.rate));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.max_len == 0 {
            return bad("max_len must be >= 1".into());
        }
        self.mumc.validate().map_err(ModelError::Config)?;
        let cues = self.active_cues();
        if cues.len() > 1 && self.combiner == Combiner::Moderator && !cues.contains(&Cue::Image) {
            return bad("the moderator fuses every cue with the image: add the image cue".into());
        }
        if self.gate_source == GateSource::Raw && self.tag_encoder == TagEncoding::PerCategory && cues.contains(&Cue::Tag) {
            return bad("gating on raw encodings needs equal widths: use the joint tag encoder".into());
        }
        Ok(())
    }

    fn check_dims(&self, dims: DataDims) -> ModelResult<()> {
        for (name, pinned, actual) in [
            ("V", self.vocab, dims.vocab),
            ("D_i", self.image_dim, dims.image_dim),
            ("D_p", self.place_dim, dims.place_dim),
        ] {
            if let Some(p) = pinned {
                if p != actual {
                    return Err(ModelError::Config(format!("{name} = {p} in config but {actual} in dataset")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Head {
    Single,
    Moderated { fusion: Fusion, moderator: Moderator },
    Mixture(SimpleMixture),
}

/// Encoder outputs for a batch.
pub struct Encoded<'t> {
    pub raw: Vec<(Cue, Var<'t>)>,
    /// Fused per-cue embeddings under the moderator, else the encoding itself.
    /// These drive the refinement.
    pub fused: Vec<Var<'t>>,
    /// Gate weights, `rows × cues`, under the moderator.
    pub weights: Option<Var<'t>>,
    pub g_enc: Var<'t>,
}

/// Where the refinement gradient comes from.
#[derive(Debug, Clone)]
pub enum RefineMode {
    /// Backpropagate the uncertainty loss to the encoding on the same tape.
    Computed,
    /// Use the given `rows × width` gradient unchanged.
    Fixed(Tensor),
}

pub struct StepLoss<'t> {
    pub total: Var<'t>,
    /// Token-mean cross-entropy of the decoding that feeds the total.
    pub gen: f64,
    /// Mean distorted uncertainty loss; zero when not computed.
    pub uncertainty: f64,
    /// Refinement gradient that was applied, if any.
    pub refine_grad: Option<Tensor>,
    pub g_enc: Var<'t>,
    pub refined: Option<Var<'t>>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub dims: DataDims,
    cues: Vec<Cue>,
    pub words: EmbeddingTable,
    pub image: Option<BayesianMlp>,
    pub place: Option<BayesianMlp>,
    pub caption: Option<BayesianLstmCell>,
    pub tags: Option<TagEncoder>,
    head: Head,
    pub decoder: Decoder,
}

/// Stream id for parameter initialisation.
const INIT_STREAM: u64 = 0x1417;

impl Model {
    pub fn new(spec: &ModelSpec, dims: DataDims, seed: u64) -> ModelResult<(Self, ParamStore)> {
        spec.validate()?;
        spec.check_dims(dims)?;
        let d = spec.hidden;
        let e = spec.embed_dim;
        let cues = spec.active_cues();
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(seed, INIT_STREAM);
        let words = EmbeddingTable::new(&mut store, "word", e, dims.vocab, &mut rng);
        let has = |c| cues.contains(&c);
        let image = has(Cue::Image).then(|| BayesianMlp::new(&mut store, "img", &[dims.image_dim, d, d], &mut rng));
        let place = has(Cue::Place).then(|| BayesianMlp::new(&mut store, "place", &[dims.place_dim, d, d], &mut rng));
        let caption = has(Cue::Caption).then(|| BayesianLstmCell::new(&mut store, "cap", e, d, &mut rng));
        let tags = has(Cue::Tag).then(|| match spec.tag_encoder {
            TagEncoding::Joint => TagEncoder::Joint(BayesianLstmCell::new(&mut store, "tag", e, d, &mut rng)),
            TagEncoding::PerCategory => TagEncoder::PerCategory(
                ["tag.noun", "tag.verb", "tag.question"].map(|n| BayesianLstmCell::new(&mut store, n, e, d, &mut rng)),
            ),
        });
        let width = |c: Cue| match c {
            Cue::Tag => tags.as_ref().map_or(d, TagEncoder::out_dim),
            _ => d,
        };
        let head = if cues.len() == 1 {
            Head::Single
        } else {
            match spec.combiner {
                Combiner::Moderator => {
                    let others: Vec<(Cue, usize)> =
                        cues.iter().filter(|&&c| c != Cue::Image).map(|&c| (c, width(c))).collect();
                    let fusion = Fusion::new(&mut store, d, &others, d, d, spec.share_tag_output, &mut rng);
                    let moderator = Moderator::new(&mut store, dims.image_dim, d, spec.temperature, spec.gate_source, &mut rng);
                    Head::Moderated { fusion, moderator }
                }
                Combiner::Mixture => {
                    let in_dims: Vec<usize> = cues.iter().map(|&c| width(c)).collect();
                    Head::Mixture(SimpleMixture::new(&mut store, &in_dims, d, &mut rng))
                }
            }
        };
        let enc_dim = match head {
            Head::Single => width(cues[0]),
            _ => d,
        };
        let decoder = Decoder::new(&mut store, enc_dim, e, d, dims.vocab, &mut rng);
        let model = Self {
            spec: spec.clone(),
            dims,
            cues,
            words,
            image,
            place,
            caption,
            tags,
            head,
            decoder,
        };
        Ok((model, store))
    }

    pub fn cues(&self) -> &[Cue] {
        &self.cues
    }

    pub fn uses_moderator(&self) -> bool {
        matches!(self.head, Head::Moderated { .. })
    }

    fn check_bundle(&self, b: &CueBundle) -> ModelResult<()> {
        if self.image.is_some() && b.image_feat.len() != self.dims.image_dim {
            return Err(ModelError::Config(format!(
                "example {}: image features have {} values, model expects {}",
                b.id,
                b.image_feat.len(),
                self.dims.image_dim
            )));
        }
        if self.place.is_some() && b.place_feat.len() != self.dims.place_dim {
            return Err(ModelError::Config(format!(
                "example {}: place features have {} values, model expects {}",
                b.id,
                b.place_feat.len(),
                self.dims.place_dim
            )));
        }
        Ok(())
    }

    /// Runs the active encoders and the combiner; one row per bundle.
    pub fn encode<'t>(&self, p: &Bound<'t>, bundles: &[&CueBundle], noise: Noise<'_>) -> ModelResult<Encoded<'t>> {
        if bundles.is_empty() {
            return Err(TensorError::Empty("encode: empty batch").into());
        }
        for b in bundles {
            self.check_bundle(b)?;
        }
        let mut raw = Vec::with_capacity(self.cues.len());
        for &cue in &self.cues {
            let g = match cue {
                Cue::Image => {
                    let feats: Vec<&[f64]> = bundles.iter().map(|b| b.image_feat.as_slice()).collect();
                    encode_image(self.image.as_ref().expect("image encoder"), p, &feats, noise)?
                }
                Cue::Place => {
                    let feats: Vec<&[f64]> = bundles.iter().map(|b| b.place_feat.as_slice()).collect();
                    encode_place(self.place.as_ref().expect("place encoder"), p, &feats, noise)?
                }
                Cue::Caption => {
                    let caps: Vec<&[usize]> = bundles.iter().map(|b| b.caption.as_slice()).collect();
                    encode_caption(self.caption.as_ref().expect("caption encoder"), &self.words, p, &caps, noise)?
                }
                Cue::Tag => {
                    let tags: Vec<_> = bundles.iter().map(|b| &b.tags).collect();
                    encode_tags(self.tags.as_ref().expect("tag encoder"), &self.words, p, &tags, noise)?
                }
            };
            raw.push((cue, g));
        }
        match &self.head {
            Head::Single => {
                let g = raw[0].1;
                Ok(Encoded {
                    raw,
                    fused: vec![g],
                    weights: None,
                    g_enc: g,
                })
            }
            Head::Moderated { fusion, moderator } => {
                let g_image = raw[0].1;
                let others: Vec<Var<'t>> = raw[1..].iter().map(|(_, g)| *g).collect();
                let fused = fusion.fuse(p, g_image, &others, noise)?;
                let feats: Vec<&[f64]> = bundles.iter().map(|b| b.image_feat.as_slice()).collect();
                let x_image = feature_rows(p, &feats, &moderator.gate_net.layers[0].weight)?;
                let candidates = match moderator.source {
                    GateSource::Fused => fused.clone(),
                    GateSource::Raw => others,
                };
                let weights = moderator_gate(p, moderator, &candidates, x_image, noise)?;
                let g_enc = mix_encoding(weights, &fused)?;
                Ok(Encoded {
                    raw,
                    fused,
                    weights: Some(weights),
                    g_enc,
                })
            }
            Head::Mixture(m) => {
                let parts: Vec<Var<'t>> = raw.iter().map(|(_, g)| *g).collect();
                let g_enc = simple_mixture(p, m, &parts)?;
                Ok(Encoded {
                    raw,
                    fused: vec![g_enc],
                    weights: None,
                    g_enc,
                })
            }
        }
    }

    /// Training objective for rows of `(bundle, question)`; questions end with
    /// EOS and carry no BOS. Row `r` draws all of its randomness from
    /// `streams[r]`; `noise` says whether dropout is on.
    pub fn step_loss<'t>(
        &self,
        p: &Bound<'t>,
        rows: &[(&CueBundle, &[usize])],
        streams: &[RngStream],
        dropout: Option<DropoutSpec>,
        refine: RefineMode,
    ) -> ModelResult<StepLoss<'t>> {
        if rows.len() != streams.len() {
            return Err(TensorError::Shape {
                op: "step_loss",
                left: vec![rows.len()],
                right: vec![streams.len()],
            }
            .into());
        }
        let noise = dropout.map_or(Noise::Off, |s| Noise::sample(s, streams));
        let bundles: Vec<&CueBundle> = rows.iter().map(|r| r.0).collect();
        let golds: Vec<Vec<usize>> = rows.iter().map(|r| with_bos(r.1)).collect();
        let gold_refs: Vec<&[usize]> = golds.iter().map(Vec::as_slice).collect();
        let enc = self.encode(p, &bundles, noise)?;
        let masks = self.decoder.sample_masks(noise, rows.len())?;
        let first = decode_teacher_forced(&self.decoder, &self.words, p, enc.g_enc, &gold_refs, &masks)?;
        let mumc = &self.spec.mumc;
        let need_u = mumc.lambda_u > 0.0 || mumc.enabled;
        let per_row_u = if need_u {
            Some(self.uncertainty_rows(&first, streams)?)
        } else {
            None
        };
        let mean_u = match per_row_u {
            Some(u) => u.sum()?.scale(1.0 / rows.len() as f64)?,
            None => p.get(&self.decoder.out.weight).tape().constant(Tensor::scalar(0.0)?),
        };
        let (gen, refine_grad, refined) = if mumc.enabled {
            let grad = match refine {
                RefineMode::Fixed(g) => g,
                RefineMode::Computed => {
                    let u = per_row_u.expect("uncertainty computed when refining").sum()?;
                    refine_gradient(u, enc.g_enc)?
                }
            };
            let g_ref = mumc_refine(enc.g_enc, &enc.fused, &grad, mumc.gamma)?;
            let second = decode_teacher_forced(&self.decoder, &self.words, p, g_ref, &gold_refs, &masks)?;
            (gen_loss(&second)?, Some(grad), Some(g_ref))
        } else {
            (gen_loss(&first)?, None, None)
        };
        let total = total_loss(gen, mean_u, mumc.lambda_u)?;
        Ok(StepLoss {
            total,
            gen: gen.item().unwrap_or(f64::NAN),
            uncertainty: mean_u.item().unwrap_or(f64::NAN),
            refine_grad,
            g_enc: enc.g_enc,
            refined,
        })
    }

    /// Distorted difference of plain and aleatoric losses, `rows × 1`.
    fn uncertainty_rows<'t>(&self, out: &DecodeOutput<'t>, streams: &[RngStream]) -> ModelResult<Var<'t>> {
        let plain = gen_loss_per_example(out)?;
        let aleatoric = aleatoric_mc_loss_per_example(out, self.spec.mumc.samples, streams)?;
        Ok(distorted_loss(plain, aleatoric, self.spec.mumc.alpha)?)
    }

    /// Greedy questions for each row. With refinement on, the first greedy
    /// pass supplies pseudo-targets for the uncertainty loss, the encoding is
    /// refined and decoding is repeated. `mc_mean` treats all rows as draws of
    /// one example and returns a single averaged decision. Dropout masks come
    /// from `streams`; the uncertainty loss noise comes from `lrt_streams`, so
    /// draws of one example share it.
    fn decide<'t>(
        &self,
        p: &Bound<'t>,
        bundles: &[&CueBundle],
        streams: &[RngStream],
        lrt_streams: &[RngStream],
        dropout: Option<DropoutSpec>,
        mc_mean: bool,
    ) -> ModelResult<(Vec<QuestionSample>, Var<'t>, LstmMasks)> {
        let noise = dropout.map_or(Noise::Off, |s| Noise::sample(s, streams));
        let enc = self.encode(p, bundles, noise)?;
        let masks = self.decoder.sample_masks(noise, bundles.len())?;
        let run = |g: Var<'t>| -> ModelResult<Vec<QuestionSample>> {
            if mc_mean {
                Ok(vec![generate_mc_mean(&self.decoder, &self.words, p, g, self.spec.max_len, &masks)?])
            } else {
                Ok(generate_greedy(&self.decoder, &self.words, p, g, self.spec.max_len, &masks)?)
            }
        };
        let samples = run(enc.g_enc)?;
        let mumc = &self.spec.mumc;
        if !mumc.enabled || mumc.gamma == 0.0 {
            return Ok((samples, enc.g_enc, masks));
        }
        let golds: Vec<Vec<usize>> = (0..bundles.len())
            .map(|r| pseudo_gold(&samples[if mc_mean { 0 } else { r }].tokens))
            .collect();
        let gold_refs: Vec<&[usize]> = golds.iter().map(Vec::as_slice).collect();
        let out = decode_teacher_forced(&self.decoder, &self.words, p, enc.g_enc, &gold_refs, &masks)?;
        let u = self.uncertainty_rows(&out, lrt_streams)?.sum()?;
        let grad = refine_gradient(u, enc.g_enc)?;
        let g_ref = mumc_refine(enc.g_enc, &enc.fused, &grad, mumc.gamma)?;
        Ok((run(g_ref)?, g_ref, masks))
    }

    /// Deterministic greedy question per bundle.
    pub fn generate_greedy(&self, store: &ParamStore, bundles: &[&CueBundle], seed: u64) -> ModelResult<Vec<QuestionSample>> {
        let tape = Tape::new();
        let p = store.bind(&tape);
        let streams: Vec<RngStream> = bundles.iter().map(|b| decision_stream(seed, b.id)).collect();
        Ok(self.decide(&p, bundles, &streams, &streams, None, false)?.0)
    }

    /// Greedy decision from the softmax averaged over `samples` dropout draws.
    pub fn generate_mc_mean(&self, store: &ParamStore, bundle: &CueBundle, samples: usize, seed: u64) -> ModelResult<QuestionSample> {
        if samples == 0 {
            return Err(TensorError::Empty("generate_mc_mean: sample count must be >= 1").into());
        }
        let Some(spec) = self.spec.dropout.inference() else {
            return Ok(self.generate_greedy(store, &[bundle], seed)?.remove(0));
        };
        let tape = Tape::new();
        let p = store.bind(&tape);
        let base = decision_stream(seed, bundle.id);
        let streams: Vec<RngStream> = (0..samples).map(|t| base.split(t as u64)).collect();
        let bundles = vec![bundle; samples];
        let shared = vec![base; samples];
        Ok(self.decide(&p, &bundles, &streams, &shared, Some(spec), true)?.0.remove(0))
    }

    /// `samples` independent dropout draws of one bundle, each decoded
    /// greedily, plus uncertainty of the deterministic greedy question.
    ///
    /// Epistemic: per step, the variance over draws of the logit at the
    /// deterministic token, averaged over steps. Aleatoric: the predicted
    /// variance at that token averaged over steps and draws.
    pub fn generate_mc(&self, store: &ParamStore, bundle: &CueBundle, samples: usize, seed: u64) -> ModelResult<McGeneration> {
        if samples == 0 {
            return Err(TensorError::Empty("generate_mc: sample count must be >= 1").into());
        }
        let reference = self.generate_greedy(store, &[bundle], seed)?.remove(0);
        let spec = self.spec.dropout.inference();
        let base = RngStream::new(seed, SAMPLE_STREAM).split(bundle.id as u64);
        let streams: Vec<RngStream> = (0..samples).map(|t| base.split(t as u64)).collect();
        let bundles = vec![bundle; samples];
        let tape = Tape::new();
        let p = store.bind(&tape);
        let shared = vec![decision_stream(seed, bundle.id); samples];
        let (drawn, g_used, masks) = self.decide(&p, &bundles, &streams, &shared, spec, false)?;
        let first_step: Vec<Vec<f64>> = drawn.iter().map(|s| s.logits[0].clone()).collect();
        let first_step = McStatistics::from_samples(&first_step, false)?;
        let gold = pseudo_gold(&reference.tokens);
        let golds = vec![gold.as_slice(); samples];
        let out = decode_teacher_forced(&self.decoder, &self.words, &p, g_used, &golds, &masks)?;
        let targets: Vec<usize> = gold[1..].to_vec();
        let mut at_logit = vec![Vec::with_capacity(targets.len()); samples];
        let mut aleatoric = 0.0;
        for ((y, v), &tok) in out.logits.iter().zip(&out.variances).zip(&targets) {
            let (y, v) = (y.value(), v.value());
            for (r, row) in at_logit.iter_mut().enumerate() {
                row.push(y.get2(r, tok));
                aleatoric += v.get2(r, tok);
            }
        }
        let steps = targets.len() as f64;
        aleatoric /= steps * samples as f64;
        let per_step = McStatistics::from_samples(&at_logit, false)?;
        let epistemic = per_step.variance.iter().sum::<f64>() / steps;
        Ok(McGeneration {
            id: bundle.id,
            samples: drawn,
            first_step,
            epistemic,
            aleatoric,
            predictive: epistemic + aleatoric,
        })
    }

    /// Normalised variance of the mixed encoding under the probe noise.
    pub fn variance_probe(&self, store: &ParamStore, bundle: &CueBundle, samples: usize, seed: u64) -> ModelResult<VarianceRecord> {
        if samples < 2 {
            return Err(ModelError::Config(format!("variance probe needs at least 2 samples, got {samples}")));
        }
        let tape = Tape::new();
        let p = store.bind(&tape);
        let det = self.encode(&p, &[bundle], Noise::Off)?.g_enc.to_vec();
        let base = RngStream::new(seed, PROBE_STREAM).split(bundle.id as u64);
        let streams: Vec<RngStream> = (0..samples).map(|t| base.split(t as u64)).collect();
        let draws: Vec<Vec<f64>> = match self.spec.dropout.probe() {
            Some(spec) => {
                let bundles = vec![bundle; samples];
                let g = self.encode(&p, &bundles, Noise::sample(spec, &streams))?.g_enc.value();
                (0..samples).map(|r| g.row_slice(r).to_vec()).collect()
            }
            None => vec![det.clone(); samples],
        };
        let stats = McStatistics::from_samples(&draws, false)?;
        let scale = det.iter().map(|x| x.abs()).sum::<f64>() / det.len() as f64;
        let gap = stats.mean.iter().zip(&det).map(|(m, d)| (m - d).abs()).sum::<f64>() / det.len() as f64;
        Ok(VarianceRecord {
            id: bundle.id,
            norm_variance: gap / (scale + 1e-12),
            mean: stats.mean,
            deterministic: det,
        })
    }
}

const DECISION_STREAM: u64 = 0xdec1;
const SAMPLE_STREAM: u64 = 0x5a3f;
const PROBE_STREAM: u64 = 0x9b0e;

fn decision_stream(seed: u64, id: usize) -> RngStream {
    RngStream::new(seed, DECISION_STREAM).split(id as u64)
}

fn with_bos(question: &[usize]) -> Vec<usize> {
    let mut g = Vec::with_capacity(question.len() + 1);
    g.push(BOS);
    g.extend_from_slice(question);
    g
}

/// `BOS tokens… EOS`, closing sequences that hit the length limit.
fn pseudo_gold(tokens: &[usize]) -> Vec<usize> {
    let mut g = with_bos(tokens);
    if g.last() != Some(&EOS) {
        g.push(EOS);
    }
    g
}

fn refine_gradient<'t>(loss: Var<'t>, g_enc: Var<'t>) -> ModelResult<Tensor> {
    match loss.tape().gradients_wrt(loss, &[g_enc]) {
        Ok(mut g) => Ok(g.remove(0)),
        Err(TensorError::Detached) => Ok(Tensor::zeros(&g_enc.shape())),
        Err(e) => Err(e.into()),
    }
}

/// Output of [`Model::generate_mc`].
#[derive(Debug, Clone)]
pub struct McGeneration {
    pub id: usize,
    pub samples: Vec<QuestionSample>,
    /// Statistics of the first-step logits over the draws.
    pub first_step: McStatistics,
    pub epistemic: f64,
    pub aleatoric: f64,
    pub predictive: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRecord {
    pub id: usize,
    pub norm_variance: f64,
    /// Per-dimension Monte-Carlo mean of the encoding.
    pub mean: Vec<f64>,
    /// The same encoding without dropout.
    pub deterministic: Vec<f64>,
}
