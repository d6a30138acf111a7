//! Density-ratio estimation under a Bregman divergence (the D-step).
//!
//! The ratio network `r(x)` is fitted by minimising the empirical objective
//!
//! ```text
//! BR_f(r) = mean_{x ~ q}[ r f'(r) - f(r) ] - mean_{x ~ p}[ f'(r) ]
//! ```
//!
//! whose negative is a lower bound on `D_f(p ‖ q)`, tight exactly at `r = p/q`.

use std::collections::HashMap;

use rand::Rng;

use crate::data::{analytic_relative_ratio, DistSpec};
use crate::error::{Error, Result};
use crate::fgen::{FGen, MIN_RATIO};
use crate::net::{Activation, Adam, Batch, Gradients, Mlp, Tape, DEFAULT_LEAKY_SLOPE};

/// Default scale `C` of the `C · sigmoid` output head.
pub const DEFAULT_RATIO_SCALE: f64 = 2.0;
/// Default mixing weight for the relative ratio `p / (a p + (1 - a) q)`.
pub const DEFAULT_RELATIVE_ALPHA: f64 = 0.2;
/// Ratios are kept at least this far below the head's ceiling `C`.
pub const CEILING_GAP: f64 = 1e-9;

/// Anything that can report density-ratio values at a batch of points.
pub trait DensityRatio {
    fn ratios(&self, x: &Batch) -> Result<Vec<f64>>;
}

/// The ratio network together with the divergence it is fitted under.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioModel {
    pub net: Mlp,
    pub gen: FGen,
    /// `0` fits `p/q`; `a > 0` fits `p / (a p + (1 - a) q)`.
    pub relative_alpha: f64,
}

impl RatioModel {
    pub fn new(net: Mlp, gen: FGen, relative_alpha: f64) -> Result<Self> {
        if net.output_dim() != 1 {
            return Err(Error::shape("1 ratio output", net.output_dim()));
        }
        match net.output_activation() {
            Activation::ScaledSigmoid(c) if c > MIN_RATIO + CEILING_GAP && c.is_finite() => {}
            other => {
                return Err(Error::InvalidSpec(format!("ratio head must be a scaled sigmoid, got {other:?}")));
            }
        }
        if !(0.0..1.0).contains(&relative_alpha) {
            return Err(Error::InvalidSpec(format!("relative alpha must lie in [0, 1), got {relative_alpha}")));
        }
        Ok(RatioModel { net, gen, relative_alpha })
    }

    /// Glorot-initialised ratio network with leaky-relu hidden layers.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        scale: f64,
        gen: FGen,
        relative_alpha: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let net = Mlp::init(&sizes, Activation::LeakyRelu(DEFAULT_LEAKY_SLOPE), Activation::ScaledSigmoid(scale), rng)?;
        RatioModel::new(net, gen, relative_alpha)
    }

    pub fn scale(&self) -> f64 {
        match self.net.output_activation() {
            Activation::ScaledSigmoid(c) => c,
            _ => unreachable!("checked in RatioModel::new"),
        }
    }

    fn clamp_bounds(&self) -> (f64, f64) {
        (MIN_RATIO, self.scale() - CEILING_GAP)
    }

    /// Ratio values in `(0, C)`, clamped to `[1e-6, C - 1e-9]`.
    pub fn ratio_forward(&self, x: &Batch) -> Result<Vec<f64>> {
        let (lo, hi) = self.clamp_bounds();
        Ok(self.net.predict(x)?.into_vec().into_iter().map(|r| r.clamp(lo, hi)).collect())
    }

    /// Ratio values plus the tape; clamped entries are reported in `active`
    /// as `false` and receive no gradient.
    fn forward_tape(&self, x: &Batch) -> Result<(Vec<f64>, Vec<bool>, Tape)> {
        let (out, tape) = self.net.forward(x)?;
        let (lo, hi) = self.clamp_bounds();
        let mut active = Vec::with_capacity(out.rows());
        let r = out
            .into_vec()
            .into_iter()
            .map(|r| {
                active.push(r > lo && r < hi);
                r.clamp(lo, hi)
            })
            .collect();
        Ok((r, active, tape))
    }

    /// Backpropagates `dL/dr` through the network.
    fn pullback(&self, tape: &Tape, active: &[bool], mut dr: Vec<f64>) -> Result<(Gradients, Batch)> {
        for (d, &a) in dr.iter_mut().zip(active) {
            if !a {
                *d = 0.0;
            }
        }
        let n = dr.len();
        self.net.backward(tape, &Batch::from_raw(n, 1, dr))
    }

    /// Empirical Bregman objective and its gradient with respect to the
    /// network parameters. `denominator` is the q-batch (or the mixture batch
    /// when fitting the relative ratio).
    pub fn dstep_gradients(&self, real: &Batch, denominator: &Batch) -> Result<(f64, Gradients)> {
        let (r_real, act_real, tape_real) = self.forward_tape(real)?;
        let (r_fake, act_fake, tape_fake) = self.forward_tape(denominator)?;
        let loss = dstep_loss(self.gen, &r_real, &r_fake)?;

        let nr = r_real.len() as f64;
        let nf = r_fake.len() as f64;
        let d_real = r_real
            .iter()
            .map(|&r| Ok(-self.gen.second(r)? / nr))
            .collect::<Result<Vec<f64>>>()?;
        let d_fake = r_fake
            .iter()
            .map(|&r| Ok(r * self.gen.second(r)? / nf))
            .collect::<Result<Vec<f64>>>()?;
        let (mut grads, _) = self.pullback(&tape_real, &act_real, d_real)?;
        let (g_fake, _) = self.pullback(&tape_fake, &act_fake, d_fake)?;
        grads.add_assign(&g_fake)?;
        Ok((loss, grads))
    }

    /// Ratio values at `x` and the gradient of `Σ upstream_i · r(x_i)` with
    /// respect to `x`, where `upstream = dloss(r)`; the parameters are left alone.
    pub fn input_gradients(&self, x: &Batch, dloss: impl Fn(f64) -> Result<f64>) -> Result<(Vec<f64>, Batch)> {
        let (r, active, tape) = self.forward_tape(x)?;
        let dr = r.iter().map(|&v| dloss(v)).collect::<Result<Vec<f64>>>()?;
        let (_, dx) = self.pullback(&tape, &active, dr)?;
        Ok((r, dx))
    }
}

impl DensityRatio for RatioModel {
    fn ratios(&self, x: &Batch) -> Result<Vec<f64>> {
        self.ratio_forward(x)
    }
}

/// Empirical `BR_f`: `mean_fake[r f'(r) - f(r)] - mean_real[f'(r)]`.
pub fn dstep_loss(gen: FGen, r_real: &[f64], r_fake: &[f64]) -> Result<f64> {
    if r_real.is_empty() || r_fake.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let fake = mean_of(r_fake, |r| gen.conjugate_of_prime(r))?;
    let real = mean_of(r_real, |r| gen.prime(r))?;
    Ok(fake - real)
}

/// Weighted `BR_f` with explicit sample weights (each weight vector sums to one).
pub fn dstep_loss_weighted(gen: FGen, r_real: &[f64], w_real: &[f64], r_fake: &[f64], w_fake: &[f64]) -> Result<f64> {
    let fake = weighted_sum(r_fake, w_fake, |r| gen.conjugate_of_prime(r))?;
    let real = weighted_sum(r_real, w_real, |r| gen.prime(r))?;
    Ok(fake - real)
}

fn mean_of(values: &[f64], f: impl Fn(f64) -> Result<f64>) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut acc = 0.0;
    for &v in values {
        acc += f(v)?;
    }
    Ok(acc / values.len() as f64)
}

fn weighted_sum(values: &[f64], weights: &[f64], f: impl Fn(f64) -> Result<f64>) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if values.len() != weights.len() {
        return Err(Error::shape(values.len(), weights.len()));
    }
    let mut acc = 0.0;
    for (&v, &w) in values.iter().zip(weights) {
        acc += w * f(v)?;
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DStepReport {
    /// Objective before the update.
    pub loss: f64,
    pub grad_norm: f64,
}

/// One Adam step on the Bregman objective. Non-finite losses or gradients
/// leave the model and optimizer untouched and return [`Error::NonFinite`].
pub fn dstep_update(model: &mut RatioModel, adam: &mut Adam, real: &Batch, denominator: &Batch) -> Result<DStepReport> {
    let (loss, grads) = model.dstep_gradients(real, denominator)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("D-step loss".into()));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("D-step gradients".into()));
    }
    let grad_norm = grads.norm();
    adam.step(&mut model.net, &grads)?;
    Ok(DStepReport { loss, grad_norm })
}

/// Draws `n` rows, each from the real sampler with probability `a` and from
/// the fake sampler otherwise.
pub fn relative_mixture_sample<R, P, Q>(mut real: P, mut fake: Q, a: f64, n: usize, rng: &mut R) -> Result<Batch>
where
    R: Rng + ?Sized,
    P: FnMut(usize, &mut R) -> Result<Batch>,
    Q: FnMut(usize, &mut R) -> Result<Batch>,
{
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::Domain(format!("mixture weight must lie in [0, 1], got {a}")));
    }
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let from_real: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < a).collect();
    let k = from_real.iter().filter(|&&b| b).count();
    let real_rows = if k > 0 { Some(real(k, rng)?) } else { None };
    let fake_rows = if k < n { Some(fake(n - k, rng)?) } else { None };
    let cols = real_rows.as_ref().or(fake_rows.as_ref()).map(Batch::cols).unwrap_or(0);
    if let (Some(r), Some(f)) = (&real_rows, &fake_rows) {
        if r.cols() != f.cols() {
            return Err(Error::shape(r.cols(), f.cols()));
        }
    }
    let mut out = Batch::zeros(n, cols);
    let (mut ir, mut iq) = (0, 0);
    for (i, &is_real) in from_real.iter().enumerate() {
        let src = if is_real {
            ir += 1;
            real_rows.as_ref().unwrap().row(ir - 1)
        } else {
            iq += 1;
            fake_rows.as_ref().unwrap().row(iq - 1)
        };
        out.row_mut(i).copy_from_slice(src);
    }
    Ok(out)
}

/// Plug-in estimate `mean_{x in fake} f(r(x))` of `D_f(q r ‖ q)`.
pub fn estimate_divergence_plugin<M: DensityRatio + ?Sized>(gen: FGen, model: &M, fake: &Batch) -> Result<f64> {
    let r = model.ratios(fake)?;
    mean_of(&r, |v| gen.value(v))
}

/// Plug-in estimate with explicit sample weights summing to one.
pub fn estimate_divergence_plugin_weighted<M: DensityRatio + ?Sized>(
    gen: FGen,
    model: &M,
    points: &Batch,
    weights: &[f64],
) -> Result<f64> {
    let r = model.ratios(points)?;
    weighted_sum(&r, weights, |v| gen.value(v))
}

/// Variational estimate `-BR_f(r)`, a lower bound on `D_f(p ‖ q)`.
pub fn estimate_divergence_variational<M: DensityRatio + ?Sized>(
    gen: FGen,
    model: &M,
    real: &Batch,
    fake: &Batch,
) -> Result<f64> {
    Ok(-dstep_loss(gen, &model.ratios(real)?, &model.ratios(fake)?)?)
}

/// Variational estimate with explicit sample weights.
pub fn estimate_divergence_variational_weighted<M: DensityRatio + ?Sized>(
    gen: FGen,
    model: &M,
    real: &Batch,
    w_real: &[f64],
    fake: &Batch,
    w_fake: &[f64],
) -> Result<f64> {
    Ok(-dstep_loss_weighted(gen, &model.ratios(real)?, w_real, &model.ratios(fake)?, w_fake)?)
}

/// Mean squared relative error `mean ((r_hat - r) / r)^2` of `model` against
/// the analytic (relative) ratio of `p` to `q` at `points`.
pub fn relative_mse<M: DensityRatio + ?Sized>(
    model: &M,
    p: &DistSpec,
    q: &DistSpec,
    relative_alpha: f64,
    points: &Batch,
) -> Result<f64> {
    let fitted = model.ratios(points)?;
    let mut acc = 0.0;
    for (row, r_hat) in points.iter_rows().zip(&fitted) {
        let r = analytic_relative_ratio(p, q, relative_alpha, row)?;
        if !(r > 0.0) {
            return Err(Error::Domain(format!("analytic ratio vanishes at {row:?}")));
        }
        acc += ((r_hat - r) / r).powi(2);
    }
    Ok(acc / points.rows() as f64)
}

/// Ratio lookup on a finite support, keyed by exact point coordinates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RatioTable {
    table: HashMap<Vec<u64>, f64>,
}

fn key(row: &[f64]) -> Vec<u64> {
    // +0.0 and -0.0 share a key
    row.iter().map(|v| (v + 0.0).to_bits()).collect()
}

impl RatioTable {
    pub fn new(points: &Batch, ratios: &[f64]) -> Result<Self> {
        if points.rows() != ratios.len() {
            return Err(Error::shape(points.rows(), ratios.len()));
        }
        let mut table = HashMap::new();
        for (row, &r) in points.iter_rows().zip(ratios) {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::Domain(format!("ratio {r} at {row:?}")));
            }
            table.insert(key(row), r);
        }
        Ok(RatioTable { table })
    }

    /// Exact ratio of the empirical distributions of two discrete samples.
    pub fn from_samples(p: &Batch, q: &Batch) -> Result<Self> {
        if p.cols() != q.cols() {
            return Err(Error::shape(format!("{} columns", p.cols()), q.cols()));
        }
        let count = |b: &Batch| {
            let mut m: HashMap<Vec<u64>, usize> = HashMap::new();
            for row in b.iter_rows() {
                *m.entry(key(row)).or_default() += 1;
            }
            m
        };
        let (cp, cq) = (count(p), count(q));
        let (np, nq) = (p.rows() as f64, q.rows() as f64);
        if let Some(k) = cp.keys().find(|k| !cq.contains_key(*k)) {
            let point: Vec<f64> = k.iter().map(|b| f64::from_bits(*b)).collect();
            return Err(Error::Domain(format!("point {point:?} has p > 0 but q = 0")));
        }
        let table = cq
            .iter()
            .map(|(k, &nqk)| {
                let npk = cp.get(k).copied().unwrap_or(0) as f64;
                (k.clone(), (npk / np) / (nqk as f64 / nq))
            })
            .collect();
        Ok(RatioTable { table })
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl DensityRatio for RatioTable {
    fn ratios(&self, x: &Batch) -> Result<Vec<f64>> {
        x.iter_rows()
            .map(|row| {
                self.table
                    .get(&key(row))
                    .copied()
                    .ok_or_else(|| Error::Domain(format!("point {row:?} is outside the table's support")))
            })
            .collect()
    }
}

/// Settings for fitting a ratio model to two fixed sample sets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub steps: usize,
    pub batch: usize,
}

/// Fits `model` to `p_data / q_data` (or the relative ratio) with minibatch
/// Adam steps. Returns the objective recorded at each step.
pub fn fit_ratio<R: Rng + ?Sized>(
    model: &mut RatioModel,
    adam: &mut Adam,
    p_data: &Batch,
    q_data: &Batch,
    opts: FitOptions,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if p_data.cols() != q_data.cols() {
        return Err(Error::shape(format!("{} columns in p", p_data.cols()), q_data.cols()));
    }
    if opts.batch == 0 {
        return Err(Error::EmptyBatch);
    }
    let minibatch = |data: &Batch, n: usize, rng: &mut R| -> Result<Batch> {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..data.rows())).collect();
        Ok(data.select_rows(&idx))
    };
    let mut losses = Vec::with_capacity(opts.steps);
    for _ in 0..opts.steps {
        let real = minibatch(p_data, opts.batch, rng)?;
        let denom = if model.relative_alpha > 0.0 {
            relative_mixture_sample(
                |n, r: &mut R| minibatch(p_data, n, r),
                |n, r: &mut R| minibatch(q_data, n, r),
                model.relative_alpha,
                opts.batch,
                rng,
            )?
        } else {
            minibatch(q_data, opts.batch, rng)?
        };
        losses.push(dstep_update(model, adam, &real, &denom)?.loss);
    }
    Ok(losses)
}
