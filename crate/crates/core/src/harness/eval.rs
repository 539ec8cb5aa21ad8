use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{Decision, RunConfig};
use super::HarnessError;
use crate::cues::{CueBundle, Dataset, EOS};
use crate::metrics::{corpus_eval, EvalReport};
use crate::model::{DataDims, Model};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[default]
    Val,
    All,
}

impl Split {
    pub fn indices(self, cfg: &RunConfig, ds: &Dataset) -> Vec<usize> {
        let (train, val) = ds.split(cfg.data.val_fraction, cfg.seed);
        match self {
            Split::Train => train,
            Split::Val => val,
            Split::All => (0..ds.len()).collect(),
        }
    }
}

/// Freshly initialised model and parameters for `cfg` on `ds`.
pub fn build_model(cfg: &RunConfig, ds: &Dataset) -> Result<(Model, ParamStore), HarnessError> {
    let dims = DataDims {
        vocab: ds.vocab.len(),
        image_dim: ds.image_dim,
        place_dim: ds.place_dim,
    };
    Ok(Model::new(&cfg.model, dims, cfg.seed)?)
}

/// Model for `cfg` with parameters read from `path`; shapes must match.
pub fn load_checkpoint(cfg: &RunConfig, ds: &Dataset, path: &Path) -> Result<(Model, ParamStore), HarnessError> {
    let (model, mut store) = build_model(cfg, ds)?;
    let file = File::open(path).map_err(|e| HarnessError::CheckpointNotFound(format!("{}: {e}", path.display())))?;
    let loaded = ParamStore::load(BufReader::new(file))?;
    store.load_values_from(&loaded)?;
    Ok((model, store))
}

fn strip_eos(tokens: &[usize]) -> Vec<usize> {
    match tokens.iter().position(|&t| t == EOS) {
        Some(i) => tokens[..i].to_vec(),
        None => tokens.to_vec(),
    }
}

/// Decision question (without EOS) for each listed bundle, keyed by id.
pub fn generate_split(
    model: &Model,
    store: &ParamStore,
    ds: &Dataset,
    idx: &[usize],
    cfg: &RunConfig,
) -> Result<BTreeMap<usize, Vec<usize>>, HarnessError> {
    let mut out = BTreeMap::new();
    match cfg.eval.decision {
        Decision::Greedy => {
            for chunk in idx.chunks(cfg.eval.batch_size) {
                let bundles: Vec<&CueBundle> = chunk.iter().map(|&i| &ds.bundles[i]).collect();
                for (b, s) in bundles.iter().zip(model.generate_greedy(store, &bundles, cfg.seed)?) {
                    out.insert(b.id, strip_eos(&s.tokens));
                }
            }
        }
        Decision::McMean => {
            for &i in idx {
                let b = &ds.bundles[i];
                let s = model.generate_mc_mean(store, b, model.spec.mumc.eval_samples, cfg.seed)?;
                out.insert(b.id, strip_eos(&s.tokens));
            }
        }
    }
    Ok(out)
}

/// Generates for `idx` and scores against the reference questions.
pub fn evaluate_on(model: &Model, store: &ParamStore, ds: &Dataset, idx: &[usize], cfg: &RunConfig) -> Result<EvalReport, HarnessError> {
    let candidates = generate_split(model, store, ds, idx, cfg)?;
    let references: BTreeMap<usize, Vec<Vec<usize>>> = idx
        .iter()
        .map(|&i| {
            let b = &ds.bundles[i];
            (b.id, b.questions.iter().map(|q| strip_eos(q)).collect())
        })
        .collect();
    let words = |t: usize| ds.vocab.token(t).unwrap_or("<unk>").to_string();
    Ok(corpus_eval(&candidates, &references, &words, cfg.eval.metrics)?)
}

pub fn evaluate(cfg: &RunConfig, checkpoint: &Path, split: Split) -> Result<EvalReport, HarnessError> {
    let ds = Dataset::load(&cfg.data.path)?;
    let (model, store) = load_checkpoint(cfg, &ds, checkpoint)?;
    let idx = split.indices(cfg, &ds);
    if idx.is_empty() {
        return Err(HarnessError::Usage(format!("split {split:?} is empty")));
    }
    evaluate_on(&model, &store, &ds, &idx, cfg)
}

/// One line of a generation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationRecord {
    pub id: usize,
    pub samples: Vec<Vec<usize>>,
    pub epistemic: f64,
    pub aleatoric: f64,
    pub predictive: f64,
}

/// `samples` Monte-Carlo questions for each listed bundle.
pub fn sample_records(
    model: &Model,
    store: &ParamStore,
    ds: &Dataset,
    idx: &[usize],
    samples: usize,
    seed: u64,
) -> Result<Vec<GenerationRecord>, HarnessError> {
    idx.iter()
        .map(|&i| {
            let g = model.generate_mc(store, &ds.bundles[i], samples, seed)?;
            Ok(GenerationRecord {
                id: g.id,
                samples: g.samples.into_iter().map(|s| s.tokens).collect(),
                epistemic: g.epistemic,
                aleatoric: g.aleatoric,
                predictive: g.predictive,
            })
        })
        .collect()
}

pub fn write_samples<W: Write>(records: &[GenerationRecord], mut w: W) -> Result<(), HarnessError> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| HarnessError::Usage(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Writes `id,norm_variance` (plus per-dimension mean and deterministic
/// columns when `per_dim`) for the first `n` listed bundles using `samples`
/// dropout draws each.
#[allow(clippy::too_many_arguments)]
pub fn emit_variance_csv<W: Write>(
    model: &Model,
    store: &ParamStore,
    ds: &Dataset,
    idx: &[usize],
    n: usize,
    samples: usize,
    seed: u64,
    per_dim: bool,
    mut w: W,
) -> Result<Vec<crate::model::VarianceRecord>, HarnessError> {
    if samples < 2 {
        return Err(HarnessError::Usage(format!("variance needs at least 2 samples, got {samples}")));
    }
    let records = idx
        .iter()
        .take(n)
        .map(|&i| model.variance_probe(store, &ds.bundles[i], samples, seed))
        .collect::<Result<Vec<_>, _>>()?;
    let width = records.first().map_or(0, |r| r.mean.len());
    write!(w, "id,norm_variance")?;
    if per_dim {
        for j in 0..width {
            write!(w, ",mean_{j}")?;
        }
        for j in 0..width {
            write!(w, ",det_{j}")?;
        }
    }
    writeln!(w)?;
    for r in &records {
        write!(w, "{},{}", r.id, r.norm_variance)?;
        if per_dim {
            for v in r.mean.iter().chain(&r.deterministic) {
                write!(w, ",{v}")?;
            }
        }
        writeln!(w)?;
    }
    Ok(records)
}
