use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ablation, RunConfig};
use super::train::train_on;
use super::HarnessError;
use crate::cues::Dataset;
use crate::fusion::Cue;
use crate::metrics::EvalReport;
use crate::model::{Combiner, DropoutMode};

/// Axes of an ablation grid; absent axes keep the base config's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepAxes {
    pub ablation: Option<Vec<String>>,
    pub cues: Option<Vec<Vec<Cue>>>,
    pub dropout: Option<Vec<DropoutMode>>,
    pub combiner: Option<Vec<Combiner>>,
    pub seed: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepManifest {
    /// Base run config, relative to the manifest.
    pub base: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub axes: SweepAxes,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub name: String,
    pub config: RunConfig,
}

fn no_duplicates<T: PartialEq + std::fmt::Debug>(axis: &str, values: &[T]) -> Result<(), HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::Config(format!("sweep axis {axis} is empty")));
    }
    for (i, v) in values.iter().enumerate() {
        if values[..i].contains(v) {
            return Err(HarnessError::Config(format!("sweep axis {axis} repeats {v:?}")));
        }
    }
    Ok(())
}

impl SweepManifest {
    pub fn load(path: &Path) -> Result<(Self, RunConfig), HarnessError> {
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::ConfigNotFound(format!("{}: {e}", path.display())))?;
        let mut m: Self = toml::from_str(&text).map_err(|e| HarnessError::Config(e.to_string()))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        if m.base.is_relative() {
            m.base = dir.join(&m.base);
        }
        if m.out_dir.is_relative() {
            m.out_dir = dir.join(&m.out_dir);
        }
        let base = RunConfig::load(&m.base)?;
        Ok((m, base))
    }

    /// Cartesian product of the declared axes, in declaration order
    /// (ablation, cues, dropout, combiner, seed; last varies fastest).
    pub fn expand(&self, base: &RunConfig) -> Result<Vec<SweepPoint>, HarnessError> {
        let a = &self.axes;
        let mut points = vec![(Vec::<String>::new(), base.clone())];
        fn extend<T: Clone + PartialEq + std::fmt::Debug>(
            points: Vec<(Vec<String>, RunConfig)>,
            axis: &str,
            values: &Option<Vec<T>>,
            label: impl Fn(&T) -> String,
            set: impl Fn(&mut RunConfig, &T) -> Result<(), HarnessError>,
        ) -> Result<Vec<(Vec<String>, RunConfig)>, HarnessError> {
            let Some(values) = values else { return Ok(points) };
            no_duplicates(axis, values)?;
            let mut out = Vec::with_capacity(points.len() * values.len());
            for (name, cfg) in points {
                for v in values {
                    let mut c = cfg.clone();
                    set(&mut c, v)?;
                    let mut n = name.clone();
                    n.push(label(v));
                    out.push((n, c));
                }
            }
            Ok(out)
        }
        points = extend(points, "ablation", &a.ablation, |s| s.clone(), |c, s| {
            let ab = ablation(s).ok_or_else(|| HarnessError::Config(format!("unknown ablation {s}")))?;
            ab.apply(&mut c.model);
            Ok(())
        })?;
        points = extend(
            points,
            "cues",
            &a.cues,
            |cs| cs.iter().map(|c| c.name()).collect::<Vec<_>>().join("+"),
            |c, cs| {
                c.model.cues = cs.clone();
                Ok(())
            },
        )?;
        points = extend(points, "dropout", &a.dropout, |d| format!("{d:?}").to_lowercase(), |c, d| {
            c.model.dropout.kind = *d;
            Ok(())
        })?;
        points = extend(points, "combiner", &a.combiner, |d| format!("{d:?}").to_lowercase(), |c, d| {
            c.model.combiner = *d;
            Ok(())
        })?;
        points = extend(points, "seed", &a.seed, |s| format!("seed{s}"), |c, s| {
            c.seed = *s;
            Ok(())
        })?;
        points
            .into_iter()
            .map(|(name, mut config)| {
                let name = if name.is_empty() { "base".to_string() } else { name.join("_") };
                config.out_dir = self.out_dir.join(&name);
                config.validate().map_err(|e| HarnessError::Config(format!("{name}: {e}")))?;
                Ok(SweepPoint { name, config })
            })
            .collect()
    }
}

/// Trains and scores every point on the validation split; writes one
/// `report.json` per point and a `summary.csv`.
pub fn run_sweep(manifest: &SweepManifest, base: &RunConfig) -> Result<Vec<(String, EvalReport)>, HarnessError> {
    let points = manifest.expand(base)?;
    let ds = Dataset::load(&base.data.path)?;
    fs::create_dir_all(&manifest.out_dir)?;
    let mut results = Vec::with_capacity(points.len());
    for p in &points {
        let outcome = train_on(&p.config, &ds)?;
        let report = outcome
            .report
            .ok_or_else(|| HarnessError::Config(format!("{}: validation split is empty", p.name)))?;
        fs::create_dir_all(&p.config.out_dir)?;
        let text = serde_json::to_string_pretty(&report).map_err(|e| HarnessError::Usage(e.to_string()))?;
        fs::write(p.config.out_dir.join("report.json"), text + "\n")?;
        results.push((p.name.clone(), report));
    }
    let mut w = BufWriter::new(File::create(manifest.out_dir.join("summary.csv"))?);
    writeln!(w, "name,bleu1,bleu2,bleu3,bleu4,rouge_l,cider")?;
    for (name, r) in &results {
        writeln!(w, "{},{},{},{},{},{},{}", name, r.bleu[0], r.bleu[1], r.bleu[2], r.bleu[3], r.rouge_l, r.cider)?;
    }
    w.flush()?;
    Ok(results)
}
