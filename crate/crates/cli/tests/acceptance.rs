//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.
//!
//! `cargo test -p ratio-forge-cli --test acceptance -- 1 4 10` runs a subset.

use std::fs;
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ratio_forge_core::data::{analytic_kl_gaussians, brute_force_divergence};
use ratio_forge_core::gan::{gstep_gradients, mode_coverage, GeneratorHead, StabilityFlag};
use ratio_forge_core::net::Gradients;
use ratio_forge_core::ratio::{
    estimate_divergence_plugin, estimate_divergence_variational, estimate_divergence_variational_weighted, fit_ratio,
    relative_mse, FitOptions,
};
use ratio_forge_core::{
    Adam, AdamConfig, Batch, DiscretePair, DistSpec, FGen, GStepVariant, GeneratorModel, Mlp, RatioModel, RatioTable,
    TrainConfig, TrainLogRecord, Trainer,
};

type Check = Result<String, String>;

fn gens() -> [FGen; 4] {
    [FGen::KL, FGen::PEARSON, FGen::REVERSED_KL, FGen::Power(0.5)]
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 1

fn variational_identity() -> Check {
    let mut r = rng(1);
    let support = Batch::column(&[0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut worst = 0.0f64;
    let mut perturbed_ok = 0;
    let mut perturbed_total = 0;
    for _ in 0..20 {
        let pair = DiscretePair::random(5, &mut r).map_err(|e| e.to_string())?;
        for gen in gens() {
            let exact = brute_force_divergence(&pair, gen).map_err(|e| e.to_string())?;
            let eval = |ratios: &[f64]| {
                let table = RatioTable::new(&support, ratios).unwrap();
                estimate_divergence_variational_weighted(gen, &table, &support, pair.p(), &support, pair.q()).unwrap()
            };
            worst = worst.max((eval(&pair.ratios()) - exact).abs());
            for _ in 0..100 {
                let tilde: Vec<f64> = pair.ratios().iter().map(|v| v * r.random_range(0.5..2.0)).collect();
                perturbed_total += 1;
                if eval(&tilde) < exact {
                    perturbed_ok += 1;
                }
            }
        }
    }
    ensure(
        worst < 1e-12 && perturbed_ok == perturbed_total,
        format!("max |variational - exact| = {worst:.2e}; perturbed strictly smaller {perturbed_ok}/{perturbed_total}"),
    )
}

// ---------------------------------------------------------------- 2

fn conjugate_identity() -> Check {
    let mut worst = 0.0f64;
    for gen in gens() {
        for i in 1..=1000 {
            let r = 0.01 * i as f64;
            let lhs = r * gen.prime(r).unwrap() - gen.value(r).unwrap();
            worst = worst.max((lhs - gen.conjugate_of_prime(r).unwrap()).abs());
        }
    }
    // the same quantity against the closed forms used in the D-step objective
    let mut table = 0.0f64;
    for i in 1..=1000 {
        let r = 0.01 * i as f64;
        table = table.max((FGen::KL.conjugate_of_prime(r).unwrap() - (r - 1.0)).abs());
        table = table.max((FGen::PEARSON.conjugate_of_prime(r).unwrap() - (0.5 * r * r - 0.5)).abs());
        table = table.max((FGen::REVERSED_KL.conjugate_of_prime(r).unwrap() - r.ln()).abs());
        table = table.max((FGen::Power(0.5).conjugate_of_prime(r).unwrap() - (r.powf(1.5) - 1.0) / 1.5).abs());
    }
    ensure(
        worst < 1e-12 && table < 1e-12,
        format!("max identity residual {worst:.2e}; max closed-form residual {table:.2e} on r in [0.01, 10]"),
    )
}

// ---------------------------------------------------------------- 3

/// Excess over the allowed band `1e-4 * max(|a|, |n|) + 1e-9`; passing values are at most 1.
fn fd_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (1e-4 * analytic.abs().max(numeric.abs()) + 1e-9)
}

fn fd_check(params: usize, analytic: &[f64], mut loss_at: impl FnMut(usize, f64) -> f64) -> f64 {
    let h = 1e-6;
    (0..params)
        .map(|i| {
            let numeric = (loss_at(i, h) - loss_at(i, -h)) / (2.0 * h);
            fd_error(analytic[i], numeric)
        })
        .fold(0.0, f64::max)
}

fn gradient_suite() -> Check {
    let mut worst_d = 0.0f64;
    let mut worst_g = 0.0f64;
    let mut checked = 0;
    for (k, gen) in gens().into_iter().enumerate() {
        let mut r = rng(30 + k as u64);
        let model = RatioModel::init(2, &[8, 8], 2.0, gen, 0.0, &mut r).unwrap();
        let real = DistSpec::gauss1d(0.0, 1.0).unwrap();
        let real = Batch::new(6, 2, real.sample(12, &mut r).unwrap().into_vec()).unwrap();
        let fake = Batch::new(6, 2, (0..12).map(|_| r.random_range(-1.5..1.5)).collect()).unwrap();
        let (_, grads) = model.dstep_gradients(&real, &fake).unwrap();
        let analytic = grads.flat();
        let err = fd_check(model.net.num_params(), &analytic, |i, h| {
            let mut m = model.clone();
            *m.net.param_mut(i) += h;
            m.dstep_gradients(&real, &fake).unwrap().0
        });
        worst_d = worst_d.max(err);
        checked += analytic.len();

        for variant in [GStepVariant::F, GStepVariant::FPrime, GStepVariant::Conjugate] {
            let generator = GeneratorModel::init(2, 2, &[8, 8], GeneratorHead::Linear, &mut r).unwrap();
            let z = generator.sample_noise(6, &mut r);
            let (_, grads) = gstep_gradients(&generator, &model, &z, variant).unwrap();
            let analytic = grads.flat();
            let err = fd_check(generator.net.num_params(), &analytic, |i, h| {
                let mut g = generator.clone();
                *g.net.param_mut(i) += h;
                gstep_gradients(&g, &model, &z, variant).unwrap().0
            });
            worst_g = worst_g.max(err);
            checked += analytic.len();
        }
    }
    ensure(
        worst_d <= 1.0 && worst_g <= 1.0,
        format!("{checked} coordinates; worst error as a fraction of the allowed band: D-step {worst_d:.3}, G-step {worst_g:.3}"),
    )
}

// ---------------------------------------------------------------- 4

/// Per-sample parameter gradients of the network output.
fn per_sample_gradients(net: &Mlp, x: &Batch) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (out, tape) = net.forward(x).unwrap();
    let n = x.rows();
    let grads = (0..n)
        .map(|i| {
            let mut onehot = vec![0.0; n];
            onehot[i] = 1.0;
            let (g, _): (Gradients, Batch) = net.backward(&tape, &Batch::column(&onehot).unwrap()).unwrap();
            g.flat()
        })
        .collect();
    (out.into_vec(), grads)
}

fn moment_matching() -> Check {
    let mut worst = 0.0f64;
    for (k, gen) in gens().into_iter().enumerate() {
        let mut r = rng(40 + k as u64);
        let model = RatioModel::init(2, &[16, 16], 2.0, gen, 0.0, &mut r).unwrap();
        let real = DistSpec::Ring { k: 8, radius: 2.0, std: 0.3 }.sample(32, &mut r).unwrap();
        let fake = Batch::new(32, 2, (0..64).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
        let (_, grads) = model.dstep_gradients(&real, &fake).unwrap();
        let analytic = grads.flat();

        let (r_fake, j_fake) = per_sample_gradients(&model.net, &fake);
        let (r_real, j_real) = per_sample_gradients(&model.net, &real);
        let mut moment = vec![0.0; analytic.len()];
        for (rv, j) in r_fake.iter().zip(&j_fake) {
            let w = gen.second(*rv).unwrap() * rv / r_fake.len() as f64;
            moment.iter_mut().zip(j).for_each(|(m, g)| *m += w * g);
        }
        for (rv, j) in r_real.iter().zip(&j_real) {
            let w = gen.second(*rv).unwrap() / r_real.len() as f64;
            moment.iter_mut().zip(j).for_each(|(m, g)| *m -= w * g);
        }
        worst = analytic.iter().zip(&moment).map(|(a, m)| (a - m).abs()).fold(worst, f64::max);
    }
    ensure(worst < 1e-8, format!("max coordinate difference {worst:.2e}"))
}

// ---------------------------------------------------------------- 5, 6

const FIT_HIDDEN: [usize; 2] = [16, 16];
const FIT_SCALE: f64 = 20.0;
const FIT_STEPS: usize = 20_000;
const FIT_BATCH: usize = 64;
const FIT_LR: f64 = 1e-3;

fn gaussian_pair() -> (DistSpec, DistSpec) {
    (DistSpec::gauss1d(1.0, 1.0).unwrap(), DistSpec::gauss1d(0.0, 1.0).unwrap())
}

fn fit_gaussian_ratio(gen: FGen, n: usize, seed: u64) -> RatioModel {
    let (p, q) = gaussian_pair();
    let mut r = rng(seed);
    let pd = p.sample(n, &mut r).unwrap();
    let qd = q.sample(n, &mut r).unwrap();
    let mut model = RatioModel::init(1, &FIT_HIDDEN, FIT_SCALE, gen, 0.0, &mut r).unwrap();
    let mut adam = Adam::new(AdamConfig::with_lr(FIT_LR), &model.net);
    fit_ratio(&mut model, &mut adam, &pd, &qd, FitOptions { steps: FIT_STEPS, batch: FIT_BATCH }, &mut r).unwrap();
    model
}

fn ratio_consistency() -> Check {
    let (p, q) = gaussian_pair();
    let grid = Batch::column(&(0..=500).map(|i| -2.0 + 5.0 * i as f64 / 500.0).collect::<Vec<_>>()).unwrap();
    let sizes = [500usize, 2000, 8000];
    let mut means = Vec::new();
    for &n in &sizes {
        let errs: Vec<f64> = (0..5u64)
            .map(|seed| relative_mse(&fit_gaussian_ratio(FGen::PEARSON, n, seed), &p, &q, 0.0, &grid).unwrap())
            .collect();
        means.push(errs.iter().sum::<f64>() / errs.len() as f64);
    }
    let monotone = means.windows(2).all(|w| w[1] < w[0]);
    ensure(
        means[2] < 0.05 && monotone,
        format!(
            "mean relative MSE on [-2, 3] over 5 seeds: n=500 {:.4}, n=2000 {:.4}, n=8000 {:.4}",
            means[0], means[1], means[2]
        ),
    )
}

fn divergence_estimation() -> Check {
    let (p, q) = gaussian_pair();
    let (DistSpec::Gaussian(gp), DistSpec::Gaussian(gq)) = (&p, &q) else { unreachable!() };
    let truth = analytic_kl_gaussians(gp, gq).unwrap();
    let (mut plug, mut var) = (0.0, 0.0);
    for seed in 0..5u64 {
        let model = fit_gaussian_ratio(FGen::KL, 8000, 100 + seed);
        let mut r = rng(200 + seed);
        let ep = p.sample(20_000, &mut r).unwrap();
        let eq = q.sample(20_000, &mut r).unwrap();
        plug += estimate_divergence_plugin(FGen::KL, &model, &eq).unwrap() / 5.0;
        var += estimate_divergence_variational(FGen::KL, &model, &ep, &eq).unwrap() / 5.0;
    }
    ensure(
        (var - truth).abs() < 0.1 && (plug - truth).abs() < 0.1,
        format!("analytic {truth:.4}; mean variational {var:.4}; mean plug-in {plug:.4}"),
    )
}

// ---------------------------------------------------------------- 7, 8, 9

const RING: &str = "ring:8:2.0:0.02";
const SHORT_RUN: usize = 20_000;
const LONG_RUN: usize = 40_000;
const COVERAGE_SAMPLES: usize = 5000;

struct GanRun {
    records: Vec<TrainLogRecord>,
    halted: Option<StabilityFlag>,
    /// Generator samples after `SHORT_RUN` steps.
    samples: Batch,
}

fn gan_run(divergence: FGen, relative_alpha: f64, seed: u64, steps: usize) -> GanRun {
    let config = TrainConfig {
        divergence,
        relative_alpha,
        seed,
        steps,
        batch: 64,
        lr: 5e-5,
        dataset: RING.into(),
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(config).unwrap();
    let mut samples = None;
    let outcome = trainer
        .run(|rec, tr| {
            if rec.step == SHORT_RUN {
                samples = Some(tr.sample_generator(COVERAGE_SAMPLES, 7_000 + seed)?);
            }
            Ok(())
        })
        .unwrap();
    let samples = samples.unwrap_or_else(|| trainer.sample_generator(1, 0).unwrap());
    GanRun { records: outcome.records, halted: outcome.halted, samples }
}

struct GanRuns {
    pearson: Vec<GanRun>,
    kl_relative: GanRun,
}

impl GanRuns {
    fn run() -> Self {
        // seed 0 runs the full length; its first SHORT_RUN steps are the short run
        let pearson = vec![
            gan_run(FGen::PEARSON, 0.0, 0, LONG_RUN),
            gan_run(FGen::PEARSON, 0.0, 1, SHORT_RUN),
            gan_run(FGen::PEARSON, 0.0, 2, SHORT_RUN),
        ];
        let kl_relative = gan_run(FGen::KL, 0.2, 0, LONG_RUN);
        GanRuns { pearson, kl_relative }
    }
}

fn positive_fraction(records: &[TrainLogRecord]) -> f64 {
    let logged: Vec<&TrainLogRecord> = records.iter().filter(|r| r.step <= SHORT_RUN).collect();
    logged.iter().filter(|r| r.div_delta > 0.0).count() as f64 / logged.len().max(1) as f64
}

fn divergence_delta(runs: &GanRuns) -> Check {
    let fractions: Vec<f64> = runs.pearson.iter().map(|r| positive_fraction(&r.records)).collect();
    ensure(
        fractions[0] > 0.6,
        format!(
            "positive div_delta in {:.1}% of logged steps (seeds 1, 2: {:.1}%, {:.1}%)",
            100.0 * fractions[0],
            100.0 * fractions[1],
            100.0 * fractions[2]
        ),
    )
}

fn stability(runs: &GanRuns) -> Check {
    let pearson = &runs.pearson[0];
    let kl = &runs.kl_relative;
    let completed = |run: &GanRun| {
        run.halted.is_none() && run.records.last().map(|r| r.step) == Some(LONG_RUN)
    };
    let pearson_clean = completed(pearson) && pearson.records.iter().all(|r| r.flag == StabilityFlag::Ok);
    ensure(
        pearson_clean && completed(kl),
        format!(
            "pearson: {} steps, halted {:?}; kl with relative alpha 0.2: {} steps, halted {:?}",
            pearson.records.last().map_or(0, |r| r.step),
            pearson.halted,
            kl.records.last().map_or(0, |r| r.step),
            kl.halted
        ),
    )
}

fn mode_coverage_check(runs: &GanRuns) -> Check {
    let centers = DistSpec::ring_centers(8, 2.0);
    let covered: Vec<usize> =
        runs.pearson.iter().map(|r| mode_coverage(&r.samples, &centers, 3.0 * 0.02, 0.02)).collect();
    let mean = covered.iter().sum::<usize>() as f64 / covered.len() as f64;
    ensure(mean >= 7.0, format!("modes covered per seed {covered:?}, mean {mean:.2} of 8"))
}

// ---------------------------------------------------------------- 10

fn cli_determinism() -> Check {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for dir in &dirs {
        let status = Command::new(env!("CARGO_BIN_EXE_ratio-forge"))
            .env_remove("RATIO_FORGE_SEED")
            .args(["train", "--divergence", "pearson", "--dataset", RING, "--steps", "2000", "--log-every", "50"])
            .args(["--seed", "17", "--out"])
            .arg(dir.path())
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(format!("train exited with {:?}", status.status.code()));
        }
    }
    let a = fs::read(dirs[0].path().join("log.csv")).map_err(|e| e.to_string())?;
    let b = fs::read(dirs[1].path().join("log.csv")).map_err(|e| e.to_string())?;
    ensure(a == b && a.len() > 100, format!("two runs, {} bytes each, identical: {}", a.len(), a == b))
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let wanted: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let selected = |id: u8| wanted.is_empty() || wanted.contains(&id);

    type Plain = fn() -> Check;
    let plain: [(u8, &str, Plain); 6] = [
        (1, "variational identity on discrete pairs", variational_identity),
        (2, "conjugate identity", conjugate_identity),
        (3, "finite-difference gradients", gradient_suite),
        (4, "moment-matching gradient", moment_matching),
        (5, "ratio consistency", ratio_consistency),
        (6, "two-step KL estimate", divergence_estimation),
    ];
    type OnRuns = fn(&GanRuns) -> Check;
    let on_runs: [(u8, &str, OnRuns); 3] = [
        (7, "paired divergence delta", divergence_delta),
        (8, "stability over 40k steps", stability),
        (9, "ring mode coverage", mode_coverage_check),
    ];

    let mut results: Vec<(u8, &str, Check, f64)> = Vec::new();
    let mut report = |id: u8, name: &'static str, check: Check, secs: f64| {
        let (tag, detail) = match &check {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {id:>2} {tag} {name} ({secs:.1}s): {detail}");
        results.push((id, name, check, secs));
    };

    for (id, name, f) in plain {
        if selected(id) {
            let t = Instant::now();
            let check = f();
            report(id, name, check, t.elapsed().as_secs_f64());
        }
    }
    if on_runs.iter().any(|(id, _, _)| selected(*id)) {
        let t = Instant::now();
        let runs = GanRuns::run();
        let secs = t.elapsed().as_secs_f64();
        println!("(training runs for criteria 7-9 took {secs:.1}s)");
        for (id, name, f) in on_runs {
            if selected(id) {
                report(id, name, f(&runs), 0.0);
            }
        }
    }
    if selected(10) {
        let t = Instant::now();
        let check = cli_determinism();
        report(10, "byte-identical train logs", check, t.elapsed().as_secs_f64());
    }

    let failed: Vec<u8> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!("acceptance: {} passed, {} failed {:?}", results.len() - failed.len(), failed.len(), failed);
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
