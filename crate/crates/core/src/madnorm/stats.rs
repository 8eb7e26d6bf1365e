//! Monte Carlo checks of the mean-absolute-deviation scale.

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal, Uniform};

use crate::error::{Error, Result};

/// Distributions with closed-form mean and mean absolute deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampler {
    Uniform { lo: f64, hi: f64 },
    Gaussian { mean: f64, std: f64 },
    Exponential { rate: f64 },
    Constant(f64),
}

impl Sampler {
    pub fn mean(&self) -> f64 {
        match *self {
            Sampler::Uniform { lo, hi } => 0.5 * (lo + hi),
            Sampler::Gaussian { mean, .. } => mean,
            Sampler::Exponential { rate } => 1.0 / rate,
            Sampler::Constant(c) => c,
        }
    }

    /// Population scale `E|X - mu|`.
    pub fn mad(&self) -> f64 {
        match *self {
            Sampler::Uniform { lo, hi } => 0.25 * (hi - lo),
            Sampler::Gaussian { std, .. } => std * (2.0 / std::f64::consts::PI).sqrt(),
            Sampler::Exponential { rate } => 2.0 / (rate * std::f64::consts::E),
            Sampler::Constant(_) => 0.0,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            Sampler::Uniform { lo, hi } => (hi - lo).powi(2) / 12.0,
            Sampler::Gaussian { std, .. } => std * std,
            Sampler::Exponential { rate } => 1.0 / (rate * rate),
            Sampler::Constant(_) => 0.0,
        }
    }

    /// Standard error of the sample mean of `|X - mu|` over `n` draws.
    pub fn mad_std_error(&self, n: usize) -> f64 {
        let var = (self.variance() - self.mad().powi(2)).max(0.0);
        (var / n as f64).sqrt()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<Vec<f64>> {
        let bad = |e: &dyn std::fmt::Display| Error::InvalidParams(e.to_string());
        Ok(match *self {
            Sampler::Uniform { lo, hi } => {
                let d = Uniform::new(lo, hi).map_err(|e| bad(&e))?;
                d.sample_iter(rng).take(n).collect()
            }
            Sampler::Gaussian { mean, std } => {
                let d = Normal::new(mean, std).map_err(|e| bad(&e))?;
                d.sample_iter(rng).take(n).collect()
            }
            Sampler::Exponential { rate } => {
                let d = Exp::new(rate).map_err(|e| bad(&e))?;
                d.sample_iter(rng).take(n).collect()
            }
            Sampler::Constant(c) => vec![c; n],
        })
    }
}

/// `D_n = (1/n) sum |X_i - mu|` with the population mean `mu`.
pub fn scale_convergence_check<R: Rng + ?Sized>(dist: Sampler, n: usize, rng: &mut R) -> Result<f64> {
    if n == 0 {
        return Err(Error::Empty("sample"));
    }
    let mu = dist.mean();
    let xs = dist.sample(rng, n)?;
    Ok(xs.iter().map(|x| (x - mu).abs()).sum::<f64>() / n as f64)
}

/// Empirical `P(|X - mu| / sigma_tilde < k)` over `n` draws.
pub fn concentration_frequency<R: Rng + ?Sized>(
    dist: Sampler,
    k: f64,
    n: usize,
    rng: &mut R,
) -> Result<f64> {
    if k.is_nan() || k <= 1.0 {
        return Err(Error::InvalidArgument(format!("k must exceed 1, got {k}")));
    }
    if n == 0 {
        return Err(Error::Empty("sample"));
    }
    let mu = dist.mean();
    let scale = dist.mad();
    let xs = dist.sample(rng, n)?;
    let inside = xs
        .iter()
        .filter(|&&x| {
            let dev = (x - mu).abs();
            if scale == 0.0 {
                dev == 0.0
            } else {
                dev / scale < k
            }
        })
        .count();
    Ok(inside as f64 / n as f64)
}

/// Whether the empirical frequency clears `1 - 1/k` less a `3/sqrt(n)` margin.
pub fn concentration_check<R: Rng + ?Sized>(
    dist: Sampler,
    k: f64,
    n: usize,
    rng: &mut R,
) -> Result<bool> {
    let freq = concentration_frequency(dist, k, n, rng)?;
    Ok(freq >= 1.0 - 1.0 / k - 3.0 / (n as f64).sqrt())
}
