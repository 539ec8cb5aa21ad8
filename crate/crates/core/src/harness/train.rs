use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};

use serde::Serialize;

use super::config::{ReportMode, RunConfig};
use super::eval::{build_model, evaluate_on};
use super::optim::Optimizer;
use super::HarnessError;
use crate::cues::{CueBundle, Dataset};
use crate::metrics::EvalReport;
use crate::model::{Model, RefineMode};
use crate::nn::ParamStore;
use crate::tensor::{RngStream, Tape};

const TRAIN_STREAM: u64 = 0x7a1;
const SHUFFLE_STREAM: u64 = 0x5f1e;
const VAL_STREAM: u64 = 0x7a1d;

/// Per-epoch means over the training pairs, plus validation loss.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub gen_loss: f64,
    pub u_loss: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    /// Parameters at the lowest validation loss.
    pub best: ParamStore,
    /// Parameters after the last epoch.
    pub last: ParamStore,
    pub best_epoch: usize,
    pub curve: Vec<EpochLog>,
    /// Validation scores at the epochs they were computed.
    pub scores: Vec<(usize, EvalReport)>,
    /// Validation scores per the configured reporting mode.
    pub report: Option<EvalReport>,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
}

/// `(bundle index, question index)` pairs for the given bundles.
pub fn training_pairs(ds: &Dataset, idx: &[usize], max_questions: Option<usize>) -> Vec<(usize, usize)> {
    idx.iter()
        .flat_map(|&b| {
            let n = ds.bundles[b].questions.len();
            (0..max_questions.map_or(n, |m| m.min(n))).map(move |q| (b, q))
        })
        .collect()
}

fn pair_stream(base: &RngStream, b: &CueBundle, q: usize) -> RngStream {
    base.split(b.id as u64).split(q as u64)
}

struct BatchLoss {
    total: f64,
    gen: f64,
    u: f64,
}

fn grads_by_name(store: &ParamStore, p: &crate::nn::Bound<'_>, g: &crate::tensor::Gradients) -> BTreeMap<String, Vec<f64>> {
    store
        .names()
        .filter_map(|n| g.get_raw(p.get(n)).map(|v| (n.to_string(), v.to_vec())))
        .collect()
}

fn run_batch(
    model: &Model,
    store: &ParamStore,
    ds: &Dataset,
    pairs: &[(usize, usize)],
    base: &RngStream,
    train: bool,
) -> Result<(BatchLoss, Option<BTreeMap<String, Vec<f64>>>), HarnessError> {
    let rows: Vec<(&CueBundle, &[usize])> = pairs
        .iter()
        .map(|&(b, q)| (&ds.bundles[b], ds.bundles[b].questions[q].as_slice()))
        .collect();
    let streams: Vec<RngStream> = rows.iter().zip(pairs).map(|((b, _), &(_, q))| pair_stream(base, b, q)).collect();
    let tape = Tape::new();
    let p = store.bind(&tape);
    let dropout = if train { model.spec.dropout.training() } else { None };
    let loss = model.step_loss(&p, &rows, &streams, dropout, RefineMode::Computed)?;
    let value = loss.total.item().unwrap_or(f64::NAN);
    let out = BatchLoss {
        total: value,
        gen: loss.gen,
        u: loss.uncertainty,
    };
    if !train || !value.is_finite() {
        return Ok((out, None));
    }
    let g = tape.backward(loss.total)?;
    Ok((out, Some(grads_by_name(store, &p, &g))))
}

/// Row-weighted mean loss over `pairs` without dropout.
fn mean_loss(model: &Model, store: &ParamStore, ds: &Dataset, pairs: &[(usize, usize)], batch: usize, seed: u64) -> Result<f64, HarnessError> {
    let base = RngStream::new(seed, VAL_STREAM);
    let mut total = 0.0;
    for chunk in pairs.chunks(batch) {
        let (l, _) = run_batch(model, store, ds, chunk, &base, false)?;
        total += l.total * chunk.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

/// Trains on `ds` in memory; nothing is written.
pub fn train_on(cfg: &RunConfig, ds: &Dataset) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    let (model, mut store) = build_model(cfg, ds)?;
    let (train_idx, val_idx) = ds.split(cfg.data.val_fraction, cfg.seed);
    let mut pairs = training_pairs(ds, &train_idx, cfg.data.max_questions);
    let val_pairs = training_pairs(ds, &val_idx, cfg.data.max_questions);
    let mut opt = Optimizer::new(cfg.optim);
    let mut curve = Vec::with_capacity(cfg.optim.epochs);
    let mut scores = Vec::new();
    let mut best = (f64::INFINITY, store.clone(), 0);
    let batch = cfg.optim.batch_size;
    for epoch in 1..=cfg.optim.epochs {
        RngStream::new(cfg.seed, SHUFFLE_STREAM).split(epoch as u64).shuffle(&mut pairs);
        let base = RngStream::new(cfg.seed, TRAIN_STREAM).split(epoch as u64);
        let (mut sum, mut gen, mut u) = (0.0, 0.0, 0.0);
        for (bi, chunk) in pairs.chunks(batch).enumerate() {
            let (loss, grads) = run_batch(&model, &store, ds, chunk, &base, true)?;
            let grads = match grads {
                Some(g) if g.values().flatten().all(|x| x.is_finite()) => g,
                _ => {
                    return Err(HarnessError::NonFinite {
                        epoch,
                        batch: bi,
                        ids: chunk.iter().map(|&(b, _)| ds.bundles[b].id).collect(),
                    })
                }
            };
            opt.apply(&mut store, &grads);
            let w = chunk.len() as f64;
            sum += loss.total * w;
            gen += loss.gen * w;
            u += loss.u * w;
        }
        let n = pairs.len() as f64;
        let train_loss = sum / n;
        let val_loss = if val_pairs.is_empty() {
            train_loss
        } else {
            mean_loss(&model, &store, ds, &val_pairs, cfg.eval.batch_size, cfg.seed)?
        };
        curve.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            gen_loss: gen / n,
            u_loss: u / n,
        });
        if val_loss < best.0 {
            best = (val_loss, store.clone(), epoch);
        }
        if cfg.eval.score_every > 0 && epoch % cfg.eval.score_every == 0 && !val_idx.is_empty() {
            scores.push((epoch, evaluate_on(&model, &store, ds, &val_idx, cfg)?));
        }
    }
    let (_, best_store, best_epoch) = best;
    let report = if val_idx.is_empty() {
        None
    } else {
        match cfg.eval.report_mode {
            ReportMode::BestValidation => Some(evaluate_on(&model, &best_store, ds, &val_idx, cfg)?),
            ReportMode::MaxOverEpochs => max_over_epochs(&scores),
        }
    };
    Ok(TrainOutcome {
        model,
        best: best_store,
        last: store,
        best_epoch,
        curve,
        scores,
        report,
        train_idx,
        val_idx,
    })
}

/// Per-metric maxima over the scored epochs.
fn max_over_epochs(scores: &[(usize, EvalReport)]) -> Option<EvalReport> {
    let (_, first) = scores.first()?;
    let mut out = first.clone();
    for (_, r) in &scores[1..] {
        for n in 0..4 {
            out.bleu[n] = out.bleu[n].max(r.bleu[n]);
        }
        out.rouge_l = out.rouge_l.max(r.rouge_l);
        out.cider = out.cider.max(r.cider);
    }
    Some(out)
}

/// Trains and writes `checkpoint.json`, `loss_curve.csv` and
/// `train_summary.json` into the output directory.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    let ds = Dataset::load(&cfg.data.path)?;
    let outcome = train_on(cfg, &ds)?;
    fs::create_dir_all(&cfg.out_dir)?;
    outcome.best.save(BufWriter::new(File::create(cfg.out_dir.join("checkpoint.json"))?))?;
    let mut w = BufWriter::new(File::create(cfg.out_dir.join("loss_curve.csv"))?);
    writeln!(w, "epoch,train_loss,val_loss,L_gen,L_u")?;
    for e in &outcome.curve {
        writeln!(w, "{},{},{},{},{}", e.epoch, e.train_loss, e.val_loss, e.gen_loss, e.u_loss)?;
    }
    w.flush()?;
    if !outcome.scores.is_empty() {
        let mut w = BufWriter::new(File::create(cfg.out_dir.join("score_curve.csv"))?);
        writeln!(w, "epoch,bleu1,bleu2,bleu3,bleu4,rouge_l,cider")?;
        for (e, r) in &outcome.scores {
            writeln!(w, "{},{},{},{},{},{},{}", e, r.bleu[0], r.bleu[1], r.bleu[2], r.bleu[3], r.rouge_l, r.cider)?;
        }
        w.flush()?;
    }
    #[derive(Serialize)]
    struct Summary<'a> {
        best_epoch: usize,
        final_train_loss: f64,
        best_val_loss: f64,
        train_examples: usize,
        val_examples: usize,
        report_mode: ReportMode,
        bleu: Option<[f64; 4]>,
        rouge_l: Option<f64>,
        cider: Option<f64>,
        config: &'a RunConfig,
    }
    let summary = Summary {
        best_epoch: outcome.best_epoch,
        final_train_loss: outcome.curve.last().map_or(f64::NAN, |e| e.train_loss),
        best_val_loss: outcome.curve.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min),
        train_examples: outcome.train_idx.len(),
        val_examples: outcome.val_idx.len(),
        report_mode: cfg.eval.report_mode,
        bleu: outcome.report.as_ref().map(|r| r.bleu),
        rouge_l: outcome.report.as_ref().map(|r| r.rouge_l),
        cider: outcome.report.as_ref().map(|r| r.cider),
        config: cfg,
    };
    let text = serde_json::to_string_pretty(&summary).map_err(|e| HarnessError::Config(e.to_string()))?;
    fs::write(cfg.out_dir.join("train_summary.json"), text + "\n")?;
    Ok(outcome)
}
