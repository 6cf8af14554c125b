use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::{Error, Result};

/// Quantile endpoint clamp: probabilities are kept inside `[EPS, 1 - EPS]`.
pub const EPS: f64 = 1e-12;

pub(crate) fn std_normal() -> Normal {
    Normal::standard()
}

/// Standard normal CDF.
pub fn phi(x: f64) -> f64 {
    std_normal().cdf(x)
}

/// Standard normal quantile, with `p` clamped to `[EPS, 1 - EPS]`.
pub fn phi_inv(p: f64) -> f64 {
    std_normal().inverse_cdf(p.clamp(EPS, 1.0 - EPS))
}

/// A one-dimensional marginal distribution from the built-in families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Marginal {
    Normal { mean: f64, sd: f64 },
    Uniform { lo: f64, hi: f64 },
    Exponential { rate: f64 },
    /// Empirical distribution of the given samples, kept sorted.
    Empirical { samples: Vec<f64> },
}

impl Marginal {
    pub fn standard_normal() -> Self {
        Marginal::Normal { mean: 0.0, sd: 1.0 }
    }

    pub fn empirical(mut samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() || samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("empirical marginal needs finite samples".into()));
        }
        samples.sort_by(f64::total_cmp);
        Ok(Marginal::Empirical { samples })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Marginal::Normal { mean, sd } => mean.is_finite() && *sd > 0.0 && sd.is_finite(),
            Marginal::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo < hi,
            Marginal::Exponential { rate } => *rate > 0.0 && rate.is_finite(),
            Marginal::Empirical { samples } => {
                !samples.is_empty() && samples.windows(2).all(|w| w[0] <= w[1]) && samples.iter().all(|v| v.is_finite())
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid marginal {self:?}")))
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match self {
            Marginal::Normal { mean, sd } => phi((x - mean) / sd),
            Marginal::Uniform { lo, hi } => ((x - lo) / (hi - lo)).clamp(0.0, 1.0),
            Marginal::Exponential { rate } => {
                if x <= 0.0 {
                    0.0
                } else {
                    1.0 - (-rate * x).exp()
                }
            }
            Marginal::Empirical { samples } => samples.partition_point(|&v| v <= x) as f64 / samples.len() as f64,
        }
    }

    /// Generalised inverse `inf { x : F(x) >= p }`, with `p` clamped to `[EPS, 1 - EPS]`.
    pub fn quantile(&self, p: f64) -> f64 {
        let p = p.clamp(EPS, 1.0 - EPS);
        match self {
            Marginal::Normal { mean, sd } => mean + sd * phi_inv(p),
            Marginal::Uniform { lo, hi } => lo + (hi - lo) * p,
            Marginal::Exponential { rate } => -(-p).ln_1p() / rate,
            Marginal::Empirical { samples } => {
                let n = samples.len();
                let k = ((p * n as f64).ceil() as usize).clamp(1, n);
                samples[k - 1]
            }
        }
    }

    /// `F^{-1}(Phi(a))`, evaluated without losing the upper tail.
    pub fn from_normal(&self, a: f64) -> f64 {
        match self {
            Marginal::Normal { mean, sd } => mean + sd * a,
            Marginal::Exponential { rate } => -phi(-a).clamp(EPS, 1.0 - EPS).ln() / rate,
            _ => self.quantile(phi(a)),
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            Marginal::Normal { mean, .. } => *mean,
            Marginal::Uniform { lo, hi } => 0.5 * (lo + hi),
            Marginal::Exponential { rate } => 1.0 / rate,
            Marginal::Empirical { samples } => samples.iter().sum::<f64>() / samples.len() as f64,
        }
    }

    pub fn variance(&self) -> f64 {
        match self {
            Marginal::Normal { sd, .. } => sd * sd,
            Marginal::Uniform { lo, hi } => (hi - lo).powi(2) / 12.0,
            Marginal::Exponential { rate } => 1.0 / (rate * rate),
            Marginal::Empirical { samples } => {
                let m = self.mean();
                samples.iter().map(|v| (v - m).powi(2)).sum::<f64>() / samples.len() as f64
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_inverts_cdf() {
        let ms = [
            Marginal::Normal { mean: 1.0, sd: 2.0 },
            Marginal::Uniform { lo: -1.0, hi: 3.0 },
            Marginal::Exponential { rate: 0.5 },
        ];
        for m in &ms {
            for p in [0.01, 0.3, 0.5, 0.9, 0.999] {
                assert!((m.cdf(m.quantile(p)) - p).abs() < 1e-9, "{m:?} {p}");
            }
            for a in [-3.0, -0.2, 0.0, 1.5, 6.0] {
                assert!((m.from_normal(a) - m.quantile(phi(a))).abs() < 1e-6 * (1.0 + m.from_normal(a).abs()));
            }
        }
        let e = Marginal::empirical(vec![3.0, 1.0, 2.0, 2.0]).unwrap();
        assert_eq!(e.cdf(2.0), 0.75);
        assert_eq!((e.quantile(0.25), e.quantile(0.26), e.quantile(1.0)), (1.0, 2.0, 3.0));
        assert!(Marginal::Uniform { lo: 1.0, hi: 1.0 }.validate().is_err());
    }

    #[test]
    fn endpoints_are_finite() {
        assert!(phi_inv(0.0).is_finite() && phi_inv(1.0).is_finite());
        assert!(Marginal::Exponential { rate: 1.0 }.from_normal(40.0).is_finite());
    }
}
