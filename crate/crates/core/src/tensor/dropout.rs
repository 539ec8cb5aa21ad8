use serde::{Deserialize, Serialize};

use super::{Result, RngStream, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropoutKind {
    /// Inverted dropout: keep with probability `1 - p`, scale kept values by `1 / (1 - p)`.
    Bernoulli,
    /// Multiplicative noise drawn from `N(1, p / (1 - p))`.
    Gaussian,
}

pub enum MaskSource<'a> {
    Stream(&'a mut RngStream),
    Fixed(&'a Tensor),
}

fn check_rate(p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(TensorError::Domain {
            op: "dropout",
            msg: format!("rate must lie in [0, 1), got {p}"),
        })
    }
}

/// Draws a multiplicative mask of the given shape.
pub fn sample_mask(kind: DropoutKind, p: f64, shape: &[usize], rng: &mut RngStream) -> Result<Tensor> {
    check_rate(p)?;
    let n: usize = shape.iter().product();
    let data: Vec<f64> = if p == 0.0 {
        vec![1.0; n]
    } else {
        match kind {
            DropoutKind::Bernoulli => {
                let keep = 1.0 - p;
                (0..n)
                    .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
                    .collect()
            }
            DropoutKind::Gaussian => {
                let sd = (p / (1.0 - p)).sqrt();
                (0..n).map(|_| 1.0 + sd * rng.normal()).collect()
            }
        }
    };
    Tensor::new(shape.to_vec(), data)
}

/// Applies dropout to `x`. A fixed mask overrides sampling.
pub fn dropout<'t>(x: &Var<'t>, p: f64, kind: DropoutKind, source: MaskSource<'_>) -> Result<Var<'t>> {
    check_rate(p)?;
    let mask = match source {
        MaskSource::Fixed(m) => m.clone(),
        MaskSource::Stream(_) if p == 0.0 => return Ok(*x),
        MaskSource::Stream(rng) => sample_mask(kind, p, &x.shape(), rng)?,
    };
    let m = x.tape().constant(mask);
    x.mul(&m)
}

#[cfg(test)]
mod tests {
    use super::super::Tape;
    use super::*;

    #[test]
    fn zero_rate_is_identity() {
        let tape = Tape::new();
        let x0 = Tensor::vector(&[1.0, -2.0, 3.5]).unwrap();
        let x = tape.constant(x0.clone());
        for kind in [DropoutKind::Bernoulli, DropoutKind::Gaussian] {
            let mut rng = RngStream::new(1, 2);
            let y = dropout(&x, 0.0, kind, MaskSource::Stream(&mut rng)).unwrap();
            assert_eq!(y.value(), x0);
        }
    }

    #[test]
    fn bernoulli_half_is_zero_or_double() {
        let tape = Tape::new();
        let x0: Vec<f64> = (0..200).map(|i| i as f64 * 0.1 - 7.0).collect();
        let x = tape.constant(Tensor::vector(&x0).unwrap());
        let mut rng = RngStream::new(3, 4);
        let y = dropout(&x, 0.5, DropoutKind::Bernoulli, MaskSource::Stream(&mut rng)).unwrap();
        for (yi, xi) in y.to_vec().iter().zip(&x0) {
            assert!(*yi == 0.0 || *yi == 2.0 * xi);
        }
    }

    #[test]
    fn rate_bounds() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(&[1.0]).unwrap());
        let mut rng = RngStream::new(0, 0);
        assert!(dropout(&x, 1.0, DropoutKind::Bernoulli, MaskSource::Stream(&mut rng)).is_err());
        assert!(dropout(&x, -0.1, DropoutKind::Gaussian, MaskSource::Stream(&mut rng)).is_err());
    }

    #[test]
    fn fixed_mask_overrides_sampling() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(&[1.0, 2.0]).unwrap());
        let mask = Tensor::vector(&[0.0, 3.0]).unwrap();
        let y = dropout(&x, 0.5, DropoutKind::Bernoulli, MaskSource::Fixed(&mask)).unwrap();
        assert_eq!(y.to_vec(), vec![0.0, 6.0]);
    }

    #[test]
    fn expectation_preserved_within_three_standard_errors() {
        let passes = 10_000;
        let p = 0.3;
        let mut rng = RngStream::new(42, 0);
        for kind in [DropoutKind::Bernoulli, DropoutKind::Gaussian] {
            let width = 4;
            let mut sums = vec![0.0; width];
            let mut sq = vec![0.0; width];
            for _ in 0..passes {
                let m = sample_mask(kind, p, &[width], &mut rng).unwrap();
                for (j, v) in m.data().iter().enumerate() {
                    let y = 2.5 * v;
                    sums[j] += y;
                    sq[j] += y * y;
                }
            }
            for j in 0..width {
                let mean = sums[j] / passes as f64;
                let var = (sq[j] - passes as f64 * mean * mean) / (passes - 1) as f64;
                let se = (var / passes as f64).sqrt();
                assert!((mean - 2.5).abs() <= 3.0 * se, "{kind:?} {mean} {se}");
            }
        }
    }
}
