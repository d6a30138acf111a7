//! Alternating D-step / G-step training of a generator against a ratio network.
//!
//! Each iteration draws a real batch and a noise batch, takes one Adam step on
//! the ratio network's Bregman objective, then one Adam step on the generator
//! to reduce the chosen G-step objective of `r(G(z))`. The generator's
//! gradient flows through the frozen ratio network's input gradient.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DataSource;
use crate::error::{Error, Result};
use crate::fgen::FGen;
use crate::net::{Activation, Adam, AdamConfig, Batch, Mlp, DEFAULT_HIDDEN, DEFAULT_LEAKY_SLOPE};
use crate::ratio::{dstep_update, estimate_divergence_plugin, relative_mixture_sample, RatioModel, DEFAULT_RATIO_SCALE};

/// Consecutive near-zero D-step gradients after which training counts as stopped.
pub const STALL_WINDOW: usize = 100;
/// D-step gradient norm below which a step counts towards a stall.
pub const STALL_GRAD_NORM: f64 = 1e-12;

/// Objective minimised by the generator, as a function of `r = r(G(z))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GStepVariant {
    /// `mean f(r)`: the plug-in divergence `D_f(q r ‖ q)`.
    #[default]
    F,
    /// `mean -f'(r)`.
    FPrime,
    /// `mean -(r f'(r) - f(r))`.
    Conjugate,
}

impl GStepVariant {
    /// Per-sample objective.
    pub fn objective(self, gen: FGen, r: f64) -> Result<f64> {
        match self {
            GStepVariant::F => gen.value(r),
            GStepVariant::FPrime => Ok(-gen.prime(r)?),
            GStepVariant::Conjugate => Ok(-gen.conjugate_of_prime(r)?),
        }
    }

    /// Derivative of the per-sample objective with respect to `r`:
    /// `f'(r)`, `-f''(r)` and `-r f''(r)` respectively.
    pub fn derivative(self, gen: FGen, r: f64) -> Result<f64> {
        match self {
            GStepVariant::F => gen.prime(r),
            GStepVariant::FPrime => Ok(-gen.second(r)?),
            GStepVariant::Conjugate => Ok(-r * gen.second(r)?),
        }
    }
}

impl fmt::Display for GStepVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GStepVariant::F => "f",
            GStepVariant::FPrime => "fprime",
            GStepVariant::Conjugate => "conjugate",
        })
    }
}

impl FromStr for GStepVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "f" => Ok(GStepVariant::F),
            "fprime" => Ok(GStepVariant::FPrime),
            "conjugate" => Ok(GStepVariant::Conjugate),
            _ => Err(Error::Parse(format!("unknown G-step variant {s:?} (expected f, fprime, conjugate)"))),
        }
    }
}

/// Mean of the chosen G-step objective over a batch of ratio values.
pub fn gstep_loss(gen: FGen, variant: GStepVariant, r: &[f64]) -> Result<f64> {
    if r.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut acc = 0.0;
    for &v in r {
        acc += variant.objective(gen, v)?;
    }
    Ok(acc / r.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorHead {
    #[default]
    Linear,
    Tanh,
}

/// Maps uniform noise on `[-1, 1]^dz` to data space.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorModel {
    pub net: Mlp,
}

impl GeneratorModel {
    pub fn new(net: Mlp) -> Self {
        GeneratorModel { net }
    }

    pub fn init<R: Rng + ?Sized>(
        noise_dim: usize,
        data_dim: usize,
        hidden: &[usize],
        head: GeneratorHead,
        rng: &mut R,
    ) -> Result<Self> {
        let mut sizes = vec![noise_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(data_dim);
        let out = match head {
            GeneratorHead::Linear => Activation::Linear,
            GeneratorHead::Tanh => Activation::Tanh,
        };
        Ok(GeneratorModel { net: Mlp::init(&sizes, Activation::LeakyRelu(DEFAULT_LEAKY_SLOPE), out, rng)? })
    }

    pub fn noise_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn data_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn sample_noise<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Batch {
        let d = self.noise_dim();
        Batch::from_raw(n, d, (0..n * d).map(|_| rng.random_range(-1.0..=1.0)).collect())
    }

    pub fn generator_forward(&self, z: &Batch) -> Result<Batch> {
        self.net.predict(z)
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Batch> {
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let z = self.sample_noise(n, rng);
        self.generator_forward(&z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GStepReport {
    /// Objective before the update.
    pub loss: f64,
    pub grad_norm: f64,
}

/// One Adam step on the generator; the ratio model is only read.
pub fn gstep_update(
    generator: &mut GeneratorModel,
    ratio: &RatioModel,
    adam: &mut Adam,
    z: &Batch,
    variant: GStepVariant,
) -> Result<GStepReport> {
    let (loss, grads) = gstep_gradients(generator, ratio, z, variant)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("G-step loss".into()));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("G-step gradients".into()));
    }
    let grad_norm = grads.norm();
    adam.step(&mut generator.net, &grads)?;
    Ok(GStepReport { loss, grad_norm })
}

/// G-step objective and its gradient with respect to the generator parameters.
pub fn gstep_gradients(
    generator: &GeneratorModel,
    ratio: &RatioModel,
    z: &Batch,
    variant: GStepVariant,
) -> Result<(f64, crate::net::Gradients)> {
    let (x, tape) = generator.net.forward(z)?;
    let n = x.rows() as f64;
    let gen = ratio.gen;
    let (r, dx) = ratio.input_gradients(&x, |r| Ok(variant.derivative(gen, r)? / n))?;
    let loss = gstep_loss(gen, variant, &r)?;
    let (grads, _) = generator.net.backward(&tape, &dx)?;
    Ok((loss, grads))
}

/// Run configuration; fully determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub divergence: FGen,
    pub gstep: GStepVariant,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub ratio_scale: f64,
    pub relative_alpha: f64,
    pub seed: u64,
    /// Dataset spec text or CSV path.
    pub dataset: String,
    pub log_every: usize,
    pub hidden: Vec<usize>,
    pub noise_dim: usize,
    pub generator_head: GeneratorHead,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            divergence: FGen::PEARSON,
            gstep: GStepVariant::F,
            steps: 40_000,
            batch: 64,
            lr: 5e-5,
            ratio_scale: DEFAULT_RATIO_SCALE,
            relative_alpha: 0.0,
            seed: 0,
            dataset: "ring:8:2.0:0.02".into(),
            log_every: 100,
            hidden: DEFAULT_HIDDEN.to_vec(),
            noise_dim: 2,
            generator_head: GeneratorHead::Linear,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.ratio_scale > 0.0 && self.ratio_scale.is_finite()) {
            return bad(format!("ratio scale must be positive, got {}", self.ratio_scale));
        }
        if !(0.0..1.0).contains(&self.relative_alpha) {
            return bad(format!("relative alpha must lie in [0, 1), got {}", self.relative_alpha));
        }
        if self.log_every == 0 {
            return bad("log period must be at least 1".into());
        }
        if self.noise_dim == 0 {
            return bad("noise dimension must be at least 1".into());
        }
        self.divergence.value(1.0)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StabilityFlag {
    #[default]
    Ok,
    /// A loss or gradient became NaN or infinite; training halted.
    Nan,
    /// The D-step gradient vanished for [`STALL_WINDOW`] consecutive steps; training halted.
    Stalled,
}

impl StabilityFlag {
    pub fn is_halt(self) -> bool {
        self != StabilityFlag::Ok
    }
}

impl fmt::Display for StabilityFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StabilityFlag::Ok => "ok",
            StabilityFlag::Nan => "nan",
            StabilityFlag::Stalled => "stalled",
        })
    }
}

/// Per-period diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub mean_r_real: f64,
    pub mean_r_fake: f64,
    pub dstep_loss: f64,
    pub gstep_loss: f64,
    /// Plug-in divergence on the step's noise batch before the G-step minus after it.
    pub div_delta: f64,
    pub flag: StabilityFlag,
}

/// Plug-in divergence on a fixed noise batch at the three points of one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeReading {
    pub before_d: f64,
    pub after_d: f64,
    pub after_g: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub records: Vec<TrainLogRecord>,
    pub halted: Option<StabilityFlag>,
}

/// Owns the models, optimizers and random stream of one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    data: DataSource,
    ratio: RatioModel,
    generator: GeneratorModel,
    d_adam: Adam,
    g_adam: Adam,
    rng: ChaCha8Rng,
    step: usize,
    stall: usize,
    halted: Option<StabilityFlag>,
}

struct StepOutcome {
    dstep: f64,
    gstep: f64,
    log: Option<TrainLogRecord>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let data = DataSource::resolve(&config.dataset)?;
        Trainer::with_data(config, data)
    }

    pub fn with_data(config: TrainConfig, data: DataSource) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let dim = data.dim();
        let ratio = RatioModel::init(dim, &config.hidden, config.ratio_scale, config.divergence, config.relative_alpha, &mut rng)?;
        let generator = GeneratorModel::init(config.noise_dim, dim, &config.hidden, config.generator_head, &mut rng)?;
        let adam = AdamConfig::with_lr(config.lr);
        let d_adam = Adam::new(adam, &ratio.net);
        let g_adam = Adam::new(adam, &generator.net);
        Ok(Trainer { config, data, ratio, generator, d_adam, g_adam, rng, step: 0, stall: 0, halted: None })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn ratio(&self) -> &RatioModel {
        &self.ratio
    }

    pub fn generator(&self) -> &GeneratorModel {
        &self.generator
    }

    pub fn data(&self) -> &DataSource {
        &self.data
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn halted(&self) -> Option<StabilityFlag> {
        self.halted
    }

    /// Generator samples drawn from a stream separate from the training one.
    pub fn sample_generator(&self, n: usize, seed: u64) -> Result<Batch> {
        self.generator.sample(n, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Draws the real and noise batches for the next iteration.
    pub fn draw_batches(&mut self) -> Result<(Batch, Batch)> {
        let real = self.data.sample(self.config.batch, &mut self.rng)?;
        let z = self.generator.sample_noise(self.config.batch, &mut self.rng);
        Ok((real, z))
    }

    /// One D-step on `real` against `G(z)`; the generator is not modified.
    pub fn d_step(&mut self, real: &Batch, z: &Batch) -> Result<crate::ratio::DStepReport> {
        let denom = if self.config.relative_alpha > 0.0 {
            let data = &self.data;
            let generator = &self.generator;
            relative_mixture_sample(
                |n, rng: &mut ChaCha8Rng| data.sample(n, rng),
                |n, rng: &mut ChaCha8Rng| generator.sample(n, rng),
                self.config.relative_alpha,
                self.config.batch,
                &mut self.rng,
            )?
        } else {
            self.generator.generator_forward(z)?
        };
        dstep_update(&mut self.ratio, &mut self.d_adam, real, &denom)
    }

    /// One G-step on `z`; the ratio model is not modified.
    pub fn g_step(&mut self, z: &Batch) -> Result<GStepReport> {
        gstep_update(&mut self.generator, &self.ratio, &mut self.g_adam, z, self.config.gstep)
    }

    /// Plug-in divergence of the current ratio model on `G(z)`.
    pub fn plugin_divergence(&self, z: &Batch) -> Result<f64> {
        let x = self.generator.generator_forward(z)?;
        estimate_divergence_plugin(self.config.divergence, &self.ratio, &x)
    }

    /// One full iteration that also measures the plug-in divergence on `probe`
    /// before the D-step, between the steps, and after the G-step.
    pub fn step_with_probe(&mut self, probe: &Batch) -> Result<ProbeReading> {
        let before_d = self.plugin_divergence(probe)?;
        let (real, z) = self.draw_batches()?;
        self.d_step(&real, &z)?;
        let after_d = self.plugin_divergence(probe)?;
        self.g_step(&z)?;
        let after_g = self.plugin_divergence(probe)?;
        self.step += 1;
        Ok(ProbeReading { before_d, after_d, after_g })
    }

    fn iterate(&mut self) -> Result<StepOutcome> {
        let (real, z) = self.draw_batches()?;
        let d = self.d_step(&real, &z)?;
        let logging = (self.step + 1) % self.config.log_every == 0;
        let mut pre = None;
        if logging {
            let fake = self.generator.generator_forward(&z)?;
            let r_real = self.ratio.ratio_forward(&real)?;
            let r_fake = self.ratio.ratio_forward(&fake)?;
            let before = estimate_divergence_plugin(self.config.divergence, &self.ratio, &fake)?;
            pre = Some((mean(&r_real), mean(&r_fake), before));
        }
        let g = self.g_step(&z)?;
        self.step += 1;
        if d.grad_norm < STALL_GRAD_NORM {
            self.stall += 1;
        } else {
            self.stall = 0;
        }
        let log = match pre {
            Some((mean_r_real, mean_r_fake, before)) => {
                let after = self.plugin_divergence(&z)?;
                Some(TrainLogRecord {
                    step: self.step,
                    mean_r_real,
                    mean_r_fake,
                    dstep_loss: d.loss,
                    gstep_loss: g.loss,
                    div_delta: before - after,
                    flag: StabilityFlag::Ok,
                })
            }
            None => None,
        };
        Ok(StepOutcome { dstep: d.loss, gstep: g.loss, log })
    }

    /// Runs the remaining configured steps, handing each record to `observer`
    /// as it is produced. A halt emits one final flagged record.
    pub fn run<F>(&mut self, mut observer: F) -> Result<TrainOutcome>
    where
        F: FnMut(&TrainLogRecord, &Trainer) -> Result<()>,
    {
        let mut records = Vec::new();
        while self.step < self.config.steps && self.halted.is_none() {
            let halt_record = |step: usize, flag: StabilityFlag, dstep: f64, gstep: f64| TrainLogRecord {
                step,
                mean_r_real: f64::NAN,
                mean_r_fake: f64::NAN,
                dstep_loss: dstep,
                gstep_loss: gstep,
                div_delta: f64::NAN,
                flag,
            };
            let record = match self.iterate() {
                Ok(out) if !(out.dstep.is_finite() && out.gstep.is_finite()) => {
                    self.halted = Some(StabilityFlag::Nan);
                    Some(halt_record(self.step, StabilityFlag::Nan, out.dstep, out.gstep))
                }
                Ok(out) => {
                    let mut log = out.log;
                    if self.stall >= STALL_WINDOW {
                        self.halted = Some(StabilityFlag::Stalled);
                        let mut rec = log.take().unwrap_or_else(|| {
                            halt_record(self.step, StabilityFlag::Stalled, out.dstep, out.gstep)
                        });
                        rec.flag = StabilityFlag::Stalled;
                        log = Some(rec);
                    } else if let Some(rec) = &log {
                        if !(rec.mean_r_real.is_finite() && rec.mean_r_fake.is_finite() && rec.div_delta.is_finite()) {
                            self.halted = Some(StabilityFlag::Nan);
                            log = log.map(|r| TrainLogRecord { flag: StabilityFlag::Nan, ..r });
                        }
                    }
                    log
                }
                Err(Error::NonFinite(_)) => {
                    self.step += 1;
                    self.halted = Some(StabilityFlag::Nan);
                    Some(halt_record(self.step, StabilityFlag::Nan, f64::NAN, f64::NAN))
                }
                Err(e) => return Err(e),
            };
            if let Some(rec) = record {
                observer(&rec, self)?;
                records.push(rec);
            }
        }
        Ok(TrainOutcome { records, halted: self.halted })
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Runs a full training run and returns its log.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(config.clone())?.run(|_, _| Ok(()))
}

/// Number of modes near which at least `min_fraction` of the samples fall
/// within `radius`.
pub fn mode_coverage(samples: &Batch, centers: &[Vec<f64>], radius: f64, min_fraction: f64) -> usize {
    let n = samples.rows() as f64;
    centers
        .iter()
        .filter(|c| {
            let hits = samples
                .iter_rows()
                .filter(|x| x.iter().zip(c.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() <= radius * radius)
                .count();
            hits as f64 >= min_fraction * n
        })
        .count()
}
