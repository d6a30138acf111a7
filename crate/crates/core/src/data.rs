//! Synthetic distributions with samplers and closed-form oracles.
//!
//! Densities are evaluated in log space and exponentiated only at the end, so
//! ratios stay finite far into the tails.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fgen::FGen;
use crate::net::Batch;

/// Diagonal Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Gaussian {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        let g = Gaussian { mean, std };
        g.validate()?;
        Ok(g)
    }

    pub fn isotropic(mean: Vec<f64>, std: f64) -> Result<Self> {
        let d = mean.len();
        Gaussian::new(mean, vec![std; d])
    }

    fn validate(&self) -> Result<()> {
        if self.mean.is_empty() || self.mean.len() != self.std.len() {
            return Err(Error::InvalidSpec(format!(
                "gaussian needs matching non-empty mean/std, got {} and {}",
                self.mean.len(),
                self.std.len()
            )));
        }
        if self.std.iter().any(|&s| !(s > 0.0 && s.is_finite())) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidSpec("gaussian std must be positive and finite".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((&xi, &m), &s) in x.iter().zip(&self.mean).zip(&self.std) {
            let z = (xi - m) / s;
            acc += -0.5 * z * z - s.ln() - 0.5 * (2.0 * PI).ln();
        }
        acc
    }

    fn sample_into<R: Rng + ?Sized>(&self, out: &mut [f64], rng: &mut R) {
        for ((o, &m), &s) in out.iter_mut().zip(&self.mean).zip(&self.std) {
            let n: f64 = rng.sample(StandardNormal);
            *o = m + s * n;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub gaussian: Gaussian,
}

/// A synthetic data distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DistSpec {
    Gaussian(Gaussian),
    Mixture { components: Vec<Component> },
    /// `k` equally weighted isotropic Gaussians on a circle.
    Ring { k: usize, radius: f64, std: f64 },
    UniformBox { lo: Vec<f64>, hi: Vec<f64> },
}

impl DistSpec {
    pub fn gauss1d(mu: f64, sigma: f64) -> Result<Self> {
        Ok(DistSpec::Gaussian(Gaussian::new(vec![mu], vec![sigma])?))
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DistSpec::Gaussian(g) => g.validate(),
            DistSpec::Mixture { components } => {
                let first = components
                    .first()
                    .ok_or_else(|| Error::InvalidSpec("mixture needs at least one component".into()))?;
                let dim = first.gaussian.dim();
                let mut total = 0.0;
                for c in components {
                    c.gaussian.validate()?;
                    if c.gaussian.dim() != dim {
                        return Err(Error::InvalidSpec("mixture components differ in dimension".into()));
                    }
                    if !(c.weight > 0.0) {
                        return Err(Error::InvalidSpec("mixture weights must be positive".into()));
                    }
                    total += c.weight;
                }
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidSpec(format!("mixture weights sum to {total}")));
                }
                Ok(())
            }
            DistSpec::Ring { k, radius, std } => {
                if *k == 0 || !(*radius >= 0.0) || !(*std > 0.0) || !radius.is_finite() || !std.is_finite() {
                    return Err(Error::InvalidSpec(format!("bad ring k={k} radius={radius} std={std}")));
                }
                Ok(())
            }
            DistSpec::UniformBox { lo, hi } => {
                if lo.is_empty() || lo.len() != hi.len() || lo.iter().zip(hi).any(|(l, h)| !(l < h) || !h.is_finite() || !l.is_finite()) {
                    return Err(Error::InvalidSpec("uniform box needs lo < hi in every coordinate".into()));
                }
                Ok(())
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DistSpec::Gaussian(g) => g.dim(),
            DistSpec::Mixture { components } => components.first().map_or(0, |c| c.gaussian.dim()),
            DistSpec::Ring { .. } => 2,
            DistSpec::UniformBox { lo, .. } => lo.len(),
        }
    }

    /// Centers of the ring's modes, in angular order.
    pub fn ring_centers(k: usize, radius: f64) -> Vec<Vec<f64>> {
        (0..k)
            .map(|j| {
                let theta = 2.0 * PI * j as f64 / k as f64;
                vec![radius * theta.cos(), radius * theta.sin()]
            })
            .collect()
    }

    /// Mode centers for mixtures and rings; the mean for a Gaussian.
    pub fn modes(&self) -> Vec<Vec<f64>> {
        match self {
            DistSpec::Gaussian(g) => vec![g.mean.clone()],
            DistSpec::Mixture { components } => components.iter().map(|c| c.gaussian.mean.clone()).collect(),
            DistSpec::Ring { k, radius, .. } => DistSpec::ring_centers(*k, *radius),
            DistSpec::UniformBox { lo, hi } => vec![lo.iter().zip(hi).map(|(l, h)| 0.5 * (l + h)).collect()],
        }
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::shape(format!("{} coordinates", self.dim()), x.len()));
        }
        Ok(match self {
            DistSpec::Gaussian(g) => g.log_density(x),
            DistSpec::Mixture { components } => {
                log_sum_exp(components.iter().map(|c| c.weight.ln() + c.gaussian.log_density(x)))
            }
            DistSpec::Ring { k, radius, std } => {
                let lw = -(*k as f64).ln();
                log_sum_exp(DistSpec::ring_centers(*k, *radius).into_iter().map(|c| {
                    let g = Gaussian { mean: c, std: vec![*std; 2] };
                    lw + g.log_density(x)
                }))
            }
            DistSpec::UniformBox { lo, hi } => {
                let inside = x.iter().zip(lo.iter().zip(hi)).all(|(v, (l, h))| v >= l && v <= h);
                if inside {
                    -lo.iter().zip(hi).map(|(l, h)| (h - l).ln()).sum::<f64>()
                } else {
                    f64::NEG_INFINITY
                }
            }
        })
    }

    /// `n` i.i.d. draws.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Batch> {
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        self.validate()?;
        let d = self.dim();
        let mut out = Batch::zeros(n, d);
        for i in 0..n {
            let row = out.row_mut(i);
            match self {
                DistSpec::Gaussian(g) => g.sample_into(row, rng),
                DistSpec::Mixture { components } => {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut chosen = &components[components.len() - 1];
                    for c in components {
                        acc += c.weight;
                        if u < acc {
                            chosen = c;
                            break;
                        }
                    }
                    chosen.gaussian.sample_into(row, rng);
                }
                DistSpec::Ring { k, radius, std } => {
                    let j = rng.random_range(0..*k);
                    let theta = 2.0 * PI * j as f64 / *k as f64;
                    let n0: f64 = rng.sample(StandardNormal);
                    let n1: f64 = rng.sample(StandardNormal);
                    row[0] = radius * theta.cos() + std * n0;
                    row[1] = radius * theta.sin() + std * n1;
                }
                DistSpec::UniformBox { lo, hi } => {
                    for ((o, l), h) in row.iter_mut().zip(lo).zip(hi) {
                        *o = rng.random_range(*l..*h);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Exact density ratio `p(x) / q(x)`.
pub fn analytic_ratio(p: &DistSpec, q: &DistSpec, x: &[f64]) -> Result<f64> {
    analytic_relative_ratio(p, q, 0.0, x)
}

/// Exact relative ratio `p / (a p + (1 - a) q)`; bounded by `1/a` for `a > 0`.
pub fn analytic_relative_ratio(p: &DistSpec, q: &DistSpec, a: f64, x: &[f64]) -> Result<f64> {
    if !(0.0..1.0).contains(&a) {
        return Err(Error::Domain(format!("relative alpha must lie in [0, 1), got {a}")));
    }
    let lp = p.log_density(x)?;
    let lq = q.log_density(x)?;
    if lq == f64::NEG_INFINITY {
        return Err(Error::Domain(format!("q(x) vanishes at {x:?}")));
    }
    if lp == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    let denom = if a == 0.0 { lq } else { log_sum_exp([a.ln() + lp, (1.0 - a).ln() + lq].into_iter()) };
    let r = (lp - denom).exp();
    if !r.is_finite() {
        return Err(Error::Domain(format!("density ratio overflows at {x:?}")));
    }
    Ok(r)
}

/// Closed-form `KL(p ‖ q)` for diagonal Gaussians.
pub fn analytic_kl_gaussians(p: &Gaussian, q: &Gaussian) -> Result<f64> {
    p.validate()?;
    q.validate()?;
    if p.dim() != q.dim() {
        return Err(Error::shape(p.dim(), q.dim()));
    }
    Ok((0..p.dim())
        .map(|d| {
            let (mp, sp, mq, sq) = (p.mean[d], p.std[d], q.mean[d], q.std[d]);
            (sq / sp).ln() + (sp * sp + (mp - mq) * (mp - mq)) / (2.0 * sq * sq) - 0.5
        })
        .sum())
}

/// Two strictly positive pmfs on a common finite support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretePair {
    p: Vec<f64>,
    q: Vec<f64>,
}

impl DiscretePair {
    pub fn new(p: Vec<f64>, q: Vec<f64>) -> Result<Self> {
        if p.is_empty() || p.len() != q.len() {
            return Err(Error::InvalidSpec("pmfs need equal non-zero length".into()));
        }
        for pmf in [&p, &q] {
            if pmf.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::InvalidSpec("pmf entries must be positive".into()));
            }
            let s: f64 = pmf.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidSpec(format!("pmf sums to {s}")));
            }
        }
        Ok(DiscretePair { p, q })
    }

    /// Random pair on `k` points with entries bounded away from zero.
    pub fn random<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Result<Self> {
        let mut draw = || {
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            let mut pmf: Vec<f64> = raw.iter().map(|v| v / s).collect();
            // push the rounding residue into the last entry
            let rest: f64 = pmf[..k - 1].iter().sum();
            pmf[k - 1] = 1.0 - rest;
            pmf
        };
        let p = draw();
        let q = draw();
        DiscretePair::new(p, q)
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    /// `p(x)/q(x)` for every support point.
    pub fn ratios(&self) -> Vec<f64> {
        self.p.iter().zip(&self.q).map(|(p, q)| p / q).collect()
    }

    /// Support points `0, 1, …, k-1` as a one-column batch.
    pub fn support(&self) -> Batch {
        Batch::from_raw(self.len(), 1, (0..self.len()).map(|i| i as f64).collect())
    }
}

/// `Σ_x q(x) f(p(x)/q(x))` by direct enumeration.
pub fn brute_force_divergence(pair: &DiscretePair, gen: FGen) -> Result<f64> {
    pair.p
        .iter()
        .zip(&pair.q)
        .try_fold(0.0, |acc, (p, q)| Ok(acc + q * gen.value(p / q)?))
}

/// Where training or evaluation points come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Analytic(DistSpec),
    /// A fixed point set, resampled uniformly with replacement.
    Empirical(Batch),
}

impl DataSource {
    /// Parses a dataset spec; anything that is not a spec is read as a
    /// headerless CSV path.
    pub fn resolve(text: &str) -> Result<Self> {
        match text.parse::<DistSpec>() {
            Ok(spec) => Ok(DataSource::Analytic(spec)),
            Err(spec_err) => {
                let path = Path::new(text);
                if path.exists() {
                    Ok(DataSource::Empirical(read_csv(path)?))
                } else {
                    Err(spec_err)
                }
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DataSource::Analytic(s) => s.dim(),
            DataSource::Empirical(b) => b.cols(),
        }
    }

    pub fn analytic(&self) -> Option<&DistSpec> {
        match self {
            DataSource::Analytic(s) => Some(s),
            DataSource::Empirical(_) => None,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Batch> {
        match self {
            DataSource::Analytic(s) => s.sample(n, rng),
            DataSource::Empirical(points) => {
                if n == 0 {
                    return Err(Error::EmptyBatch);
                }
                let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..points.rows())).collect();
                Ok(points.select_rows(&idx))
            }
        }
    }
}

/// Reads a headerless CSV of points, one per row.
pub fn read_csv(path: &Path) -> Result<Batch> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let row = record
            .iter()
            .map(|field| {
                field
                    .parse::<f64>()
                    .map_err(|_| Error::Parse(format!("{}:{}: bad number {field:?}", path.display(), line + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Batch::from_rows(&rows)
}

/// Writes points as headerless CSV with 17 significant digits.
pub fn write_csv<W: std::io::Write>(out: W, points: &Batch) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    for row in points.iter_rows() {
        writer
            .write_record(row.iter().map(|v| format_float(*v)))
            .map_err(|e| Error::Io(e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::Io(e.to_string()))
}

/// Lossless float formatting (17 significant digits).
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

impl FromStr for DistSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let parts: Vec<&str> = lower.split(':').collect();
        let num = |i: usize| -> Result<f64> {
            parts
                .get(i)
                .ok_or_else(|| Error::Parse(format!("missing field {i} in dataset {s:?}")))?
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("bad number in dataset {s:?}")))
        };
        let arity = |n: usize| -> Result<()> {
            if parts.len() == n {
                Ok(())
            } else {
                Err(Error::Parse(format!("dataset {s:?} expects {} fields", n - 1)))
            }
        };
        let spec = match parts[0] {
            "gauss2d" if parts.len() == 1 => DistSpec::Gaussian(Gaussian::isotropic(vec![0.0, 0.0], 1.0)?),
            "gauss2d" => {
                arity(4)?;
                DistSpec::Gaussian(Gaussian::isotropic(vec![num(1)?, num(2)?], num(3)?)?)
            }
            "gauss1d" if parts.len() == 1 => DistSpec::gauss1d(0.0, 1.0)?,
            "gauss1d" => {
                arity(3)?;
                DistSpec::gauss1d(num(1)?, num(2)?)?
            }
            "ring" => {
                arity(4)?;
                let k = num(1)?;
                if k < 1.0 || k.fract() != 0.0 {
                    return Err(Error::Parse(format!("ring needs an integer mode count in {s:?}")));
                }
                DistSpec::Ring { k: k as usize, radius: num(2)?, std: num(3)? }
            }
            "mixture8" => {
                arity(1)?;
                DistSpec::Ring { k: 8, radius: 2.0, std: 0.02 }
            }
            "uniform" => {
                arity(4)?;
                let d = num(3)?;
                if d < 1.0 || d.fract() != 0.0 {
                    return Err(Error::Parse(format!("uniform needs an integer dimension in {s:?}")));
                }
                DistSpec::UniformBox { lo: vec![num(1)?; d as usize], hi: vec![num(2)?; d as usize] }
            }
            _ => return Err(Error::Parse(format!("unknown dataset {s:?}"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for DistSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DistSpec::Gaussian(g) if g.dim() == 1 => write!(f, "gauss1d:{}:{}", g.mean[0], g.std[0]),
            DistSpec::Gaussian(g) if g.dim() == 2 && g.std[0] == g.std[1] => {
                write!(f, "gauss2d:{}:{}:{}", g.mean[0], g.mean[1], g.std[0])
            }
            DistSpec::Gaussian(g) => write!(f, "gaussian(mean={:?}, std={:?})", g.mean, g.std),
            DistSpec::Mixture { components } => write!(f, "mixture({} components)", components.len()),
            DistSpec::Ring { k, radius, std } => write!(f, "ring:{k}:{radius}:{std}"),
            DistSpec::UniformBox { lo, hi } if lo.iter().all(|v| *v == lo[0]) && hi.iter().all(|v| *v == hi[0]) => {
                write!(f, "uniform:{}:{}:{}", lo[0], hi[0], lo.len())
            }
            DistSpec::UniformBox { lo, hi } => write!(f, "uniform(lo={lo:?}, hi={hi:?})"),
        }
    }
}
