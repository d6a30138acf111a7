//! Divergence generators for f-divergences between positive measures.
//!
//! Every generator satisfies `f(1) = 0` and `f'(1) = 0` and is strictly
//! convex on `(0, ∞)`. Two families are provided:
//!
//! | family | f(r) | f''(r) |
//! |---|---|---|
//! | α-divergence | `4/(1-α²)(1 - r^((1+α)/2)) + 2/(1-α)(r - 1)` | `r^((α-3)/2)` |
//! | α = 1 (KL) | `r log r - r + 1` | `1/r` |
//! | α = -1 (reversed KL) | `-log r + r - 1` | `1/r²` |
//! | α = 3 (Pearson) | `0.5 (r - 1)²` | `1` |
//! | power ν_β | `(r^(β+1) - (β+1) r + β) / (β(β+1))` | `r^(β-1)` |
//!
//! The composition `f*(f'(r)) = r f'(r) - f(r)` of the Fenchel conjugate with
//! the derivative is exposed as [`FGen::conjugate_of_prime`]; it is the only
//! form of the conjugate the estimators need.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ratios are clamped from below to this value before evaluation.
pub const MIN_RATIO: f64 = 1e-6;

/// Half-width of the band around a removable singularity (α = ±1, β = 0, β = -1)
/// inside which the generic closed form is not evaluated.
pub const SINGULAR_BAND: f64 = 1e-3;

/// Default β for the power divergence.
pub const DEFAULT_POWER_BETA: f64 = 0.5;

/// A divergence generator `f`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "param", rename_all = "lowercase")]
pub enum FGen {
    /// α-divergence on positive measures.
    Alpha(f64),
    /// Power (β-) divergence.
    Power(f64),
}

/// Resolved evaluation branch.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Branch {
    Kl,
    ReversedKl,
    Pearson,
    Alpha(f64),
    Power(f64),
}

impl FGen {
    pub const KL: FGen = FGen::Alpha(1.0);
    pub const PEARSON: FGen = FGen::Alpha(3.0);
    pub const REVERSED_KL: FGen = FGen::Alpha(-1.0);

    pub fn alpha(a: f64) -> Result<Self> {
        let gen = FGen::Alpha(a);
        gen.branch()?;
        Ok(gen)
    }

    pub fn power(b: f64) -> Result<Self> {
        let gen = FGen::Power(b);
        gen.branch()?;
        Ok(gen)
    }

    /// Routes the generator to the closed form used for evaluation. α within
    /// [`SINGULAR_BAND`] of ±1 is routed to the KL / reversed-KL forms.
    fn branch(&self) -> Result<Branch> {
        match *self {
            FGen::Alpha(a) if !a.is_finite() => Err(Error::InvalidSpec(format!("alpha = {a}"))),
            FGen::Alpha(a) if (1.0 - a).abs() < SINGULAR_BAND => Ok(Branch::Kl),
            FGen::Alpha(a) if (1.0 + a).abs() < SINGULAR_BAND => Ok(Branch::ReversedKl),
            FGen::Alpha(a) if a == 3.0 => Ok(Branch::Pearson),
            FGen::Alpha(a) => Ok(Branch::Alpha(a)),
            FGen::Power(b) if !b.is_finite() => Err(Error::InvalidSpec(format!("beta = {b}"))),
            FGen::Power(b) if b.abs() < SINGULAR_BAND || (b + 1.0).abs() < SINGULAR_BAND => Err(
                Error::InvalidSpec(format!("power divergence needs beta away from 0 and -1, got {b}")),
            ),
            FGen::Power(b) => Ok(Branch::Power(b)),
        }
    }

    /// `f(r)`.
    pub fn value(&self, r: f64) -> Result<f64> {
        let r = admit(r)?;
        Ok(match self.branch()? {
            Branch::Kl => r * r.ln() - r + 1.0,
            Branch::ReversedKl => -r.ln() + r - 1.0,
            Branch::Pearson => 0.5 * (r - 1.0) * (r - 1.0),
            Branch::Alpha(a) => alpha_generic_value(a, r)?,
            Branch::Power(b) => (r.powf(b + 1.0) - (b + 1.0) * r + b) / (b * (b + 1.0)),
        })
    }

    /// `f'(r)`.
    pub fn prime(&self, r: f64) -> Result<f64> {
        let r = admit(r)?;
        Ok(match self.branch()? {
            Branch::Kl => r.ln(),
            Branch::ReversedKl => 1.0 - 1.0 / r,
            Branch::Pearson => r - 1.0,
            Branch::Alpha(a) => 2.0 / (1.0 - a) * (1.0 - r.powf(0.5 * (a - 1.0))),
            Branch::Power(b) => (r.powf(b) - 1.0) / b,
        })
    }

    /// `f''(r)`, strictly positive.
    pub fn second(&self, r: f64) -> Result<f64> {
        let r = admit(r)?;
        Ok(match self.branch()? {
            Branch::Kl => 1.0 / r,
            Branch::ReversedKl => 1.0 / (r * r),
            Branch::Pearson => 1.0,
            Branch::Alpha(a) => r.powf(0.5 * (a - 3.0)),
            Branch::Power(b) => r.powf(b - 1.0),
        })
    }

    /// `f*(f'(r)) = r f'(r) - f(r)`.
    pub fn conjugate_of_prime(&self, r: f64) -> Result<f64> {
        let r = admit(r)?;
        Ok(r * self.prime(r)? - self.value(r)?)
    }

    /// Pointwise Bregman divergence `f(a) - f(b) - f'(b)(a - b)` of `r_model`
    /// from `r_true`.
    pub fn bregman(&self, r_true: f64, r_model: f64) -> Result<f64> {
        let a = admit(r_true)?;
        let b = admit(r_model)?;
        Ok(self.value(a)? - self.value(b)? - self.prime(b)? * (a - b))
    }
}

fn admit(r: f64) -> Result<f64> {
    if r.is_nan() || r <= 0.0 || r == f64::INFINITY {
        return Err(Error::Domain(format!("ratio must be positive and finite, got {r}")));
    }
    Ok(r.max(MIN_RATIO))
}

fn alpha_generic_value(a: f64, r: f64) -> Result<f64> {
    if (1.0 - a).abs() < SINGULAR_BAND || (1.0 + a).abs() < SINGULAR_BAND {
        return Err(Error::Domain(format!(
            "alpha = {a} is within {SINGULAR_BAND} of a removable singularity"
        )));
    }
    Ok(4.0 / (1.0 - a * a) * (1.0 - r.powf(0.5 * (1.0 + a))) + 2.0 / (1.0 - a) * (r - 1.0))
}

impl fmt::Display for FGen {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            FGen::Alpha(a) if a == 1.0 => write!(f, "kl"),
            FGen::Alpha(a) if a == -1.0 => write!(f, "rkl"),
            FGen::Alpha(a) if a == 3.0 => write!(f, "pearson"),
            FGen::Alpha(a) => write!(f, "alpha:{a}"),
            FGen::Power(b) => write!(f, "power:{b}"),
        }
    }
}

impl FromStr for FGen {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let parse_param = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| Error::Parse(format!("bad divergence parameter in {s:?}")))
        };
        match lower.as_str() {
            "kl" => Ok(FGen::KL),
            "pearson" => Ok(FGen::PEARSON),
            "rkl" | "reversed-kl" => Ok(FGen::REVERSED_KL),
            "power" => FGen::power(DEFAULT_POWER_BETA),
            other => match other.split_once(':') {
                Some(("alpha", v)) => FGen::alpha(parse_param(v)?),
                Some(("power", v)) => FGen::power(parse_param(v)?),
                _ => Err(Error::Parse(format!(
                    "unknown divergence {s:?} (expected kl, pearson, rkl, alpha:<a>, power:<b>)"
                ))),
            },
        }
    }
}
