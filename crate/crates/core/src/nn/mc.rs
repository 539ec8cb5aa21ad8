use crate::tensor::{Result, RngStream, TensorError};

/// Per-coordinate Monte-Carlo mean and unbiased variance.
#[derive(Debug, Clone, PartialEq)]
pub struct McStatistics {
    pub samples: usize,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// `true` when `samples == 1`; variance is then reported as zero.
    pub degenerate: bool,
    pub raw: Option<Vec<Vec<f64>>>,
}

impl McStatistics {
    /// Statistics over equal-length sample vectors.
    ///
    /// The mean is accumulated relative to the first sample, so identical
    /// samples give exactly that sample as mean and exactly zero variance.
    pub fn from_samples(samples: &[Vec<f64>], keep_raw: bool) -> Result<Self> {
        let first = samples.first().ok_or(TensorError::Empty("mc statistics"))?;
        let dim = first.len();
        if samples.iter().any(|s| s.len() != dim) {
            return Err(TensorError::Shape {
                op: "mc statistics",
                left: vec![dim],
                right: samples.iter().map(Vec::len).collect(),
            });
        }
        let t = samples.len();
        let mut mean = first.clone();
        for j in 0..dim {
            let shift: f64 = samples.iter().map(|s| s[j] - first[j]).sum();
            mean[j] += shift / t as f64;
        }
        let variance = if t < 2 {
            vec![0.0; dim]
        } else {
            (0..dim)
                .map(|j| samples.iter().map(|s| (s[j] - mean[j]).powi(2)).sum::<f64>() / (t - 1) as f64)
                .collect()
        };
        Ok(Self {
            samples: t,
            mean,
            variance,
            degenerate: t == 1,
            raw: keep_raw.then(|| samples.to_vec()),
        })
    }
}

/// Runs `f` `count` times; sample `t` receives `rng.split(t)`, so the result
/// does not depend on evaluation order.
pub fn mc_predict<F>(mut f: F, count: usize, rng: &RngStream) -> Result<McStatistics>
where
    F: FnMut(&mut RngStream) -> Result<Vec<f64>>,
{
    if count == 0 {
        return Err(TensorError::Empty("mc_predict: sample count must be >= 1"));
    }
    let samples = (0..count)
        .map(|t| f(&mut rng.split(t as u64)))
        .collect::<Result<Vec<_>>>()?;
    McStatistics::from_samples(&samples, false)
}
