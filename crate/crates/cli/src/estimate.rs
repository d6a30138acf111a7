use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ratio_forge_core::data::{analytic_kl_gaussians, analytic_relative_ratio, format_float};
use ratio_forge_core::ratio::{
    estimate_divergence_plugin, estimate_divergence_variational, fit_ratio, relative_mse, FitOptions,
};
use ratio_forge_core::{
    Adam, AdamConfig, Batch, DataSource, DensityRatio, DistSpec, FGen, RatioModel, RatioTable,
};
use serde_json::{json, Value};

use crate::error::{CliError, CliResult};
use crate::Widths;

/// Held-out evaluation draws use their own stream.
const EVAL_STREAM: u64 = 0x2545_f491_4f6c_dd1d;

pub const RATIO_FILE: &str = "ratio.csv";

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    /// Numerator sample: dataset spec or headerless CSV path.
    #[arg(long)]
    pub p: String,

    /// Denominator sample: dataset spec or headerless CSV path.
    #[arg(long)]
    pub q: String,

    #[arg(long, default_value = "pearson")]
    pub divergence: FGen,

    /// Adam steps on the ratio network.
    #[arg(long, default_value_t = 20_000)]
    pub steps: usize,

    #[arg(long, default_value_t = 64)]
    pub batch: usize,

    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,

    /// Scale C of the ratio head; it must exceed the largest ratio to be represented.
    #[arg(long, default_value_t = 20.0)]
    pub ratio_scale: f64,

    #[arg(long, default_value_t = 0.0)]
    pub relative_alpha: f64,

    #[arg(long, default_value = "64,64")]
    pub hidden: Widths,

    /// Draws per side for dataset specs (CSV inputs use every row).
    #[arg(long, default_value_t = 2000)]
    pub samples: usize,

    #[arg(long, env = "RATIO_FORGE_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct RatioArgs {
    #[command(flatten)]
    pub fit: FitArgs,

    /// Directory for ratio.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Evaluate on a 1-D grid LO:HI:N instead of held-out q points.
    #[arg(long, allow_hyphen_values = true)]
    pub grid: Option<Grid>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Estimator {
    /// Fit a ratio network, then plug it in.
    Fit,
    /// Exact ratio of the empirical frequencies; needs discrete CSV inputs.
    Table,
}

#[derive(Debug, Clone, Args)]
pub struct DivergenceArgs {
    #[command(flatten)]
    pub fit: FitArgs,

    #[arg(long, value_enum, default_value_t = Estimator::Fit)]
    pub estimator: Estimator,
}

/// Uniform 1-D evaluation grid, inclusive of both ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Grid {
    pub fn points(&self) -> Batch {
        let values: Vec<f64> = if self.n == 1 {
            vec![self.lo]
        } else {
            (0..self.n).map(|i| self.lo + (self.hi - self.lo) * i as f64 / (self.n - 1) as f64).collect()
        };
        Batch::column(&values).expect("grid values are finite")
    }
}

impl FromStr for Grid {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || format!("grid must be LO:HI:N, got {s:?}");
        if parts.len() != 3 {
            return Err(bad());
        }
        let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
        let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
        let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
        if !(lo.is_finite() && hi.is_finite() && lo < hi && n >= 1) {
            return Err(bad());
        }
        Ok(Grid { lo, hi, n })
    }
}

/// A ratio network fitted to two samples, with the evaluation sets to use.
struct Fitted {
    model: RatioModel,
    p: DataSource,
    q: DataSource,
    eval_p: Batch,
    eval_q: Batch,
    final_loss: f64,
}

fn resolve_pair(args: &FitArgs) -> CliResult<(DataSource, DataSource)> {
    let load = |text: &str, which: &str| {
        DataSource::resolve(text).map_err(|e| CliError::Usage(format!("--{which} {text:?}: {e}")))
    };
    let (p, q) = (load(&args.p, "p")?, load(&args.q, "q")?);
    if p.dim() != q.dim() {
        return Err(CliError::Usage(format!("p has dimension {} but q has dimension {}", p.dim(), q.dim())));
    }
    Ok((p, q))
}

fn draw(src: &DataSource, n: usize, rng: &mut ChaCha8Rng) -> CliResult<Batch> {
    Ok(match src {
        DataSource::Analytic(spec) => spec.sample(n, rng)?,
        DataSource::Empirical(points) => points.clone(),
    })
}

fn fit(args: &FitArgs) -> CliResult<Fitted> {
    if args.samples == 0 || args.batch == 0 {
        return Err(CliError::Usage("--samples and --batch must be at least 1".into()));
    }
    if !(args.lr > 0.0 && args.lr.is_finite()) {
        return Err(CliError::Usage(format!("--lr must be positive, got {}", args.lr)));
    }
    let (p, q) = resolve_pair(args)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let p_data = draw(&p, args.samples, &mut rng)?;
    let q_data = draw(&q, args.samples, &mut rng)?;
    let mut model = RatioModel::init(p.dim(), &args.hidden.0, args.ratio_scale, args.divergence, args.relative_alpha, &mut rng)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let mut adam = Adam::new(AdamConfig::with_lr(args.lr), &model.net);
    let losses = fit_ratio(&mut model, &mut adam, &p_data, &q_data, FitOptions { steps: args.steps, batch: args.batch }, &mut rng)?;

    let mut eval_rng = ChaCha8Rng::seed_from_u64(args.seed ^ EVAL_STREAM);
    let eval_p = match &p {
        DataSource::Analytic(_) => draw(&p, args.samples, &mut eval_rng)?,
        DataSource::Empirical(_) => p_data,
    };
    let eval_q = match &q {
        DataSource::Analytic(_) => draw(&q, args.samples, &mut eval_rng)?,
        DataSource::Empirical(_) => q_data,
    };
    Ok(Fitted { model, p, q, eval_p, eval_q, final_loss: losses.last().copied().unwrap_or(f64::NAN) })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn finite_or_null(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

fn analytic_pair<'a>(p: &'a DataSource, q: &'a DataSource) -> Option<(&'a DistSpec, &'a DistSpec)> {
    Some((p.analytic()?, q.analytic()?))
}

pub fn cmd_estimate_ratio(args: &RatioArgs) -> CliResult<()> {
    let fitted = fit(&args.fit)?;
    let points = match args.grid {
        Some(grid) if fitted.p.dim() == 1 => grid.points(),
        Some(_) => return Err(CliError::Usage("--grid needs one-dimensional data".into())),
        None => fitted.eval_q.clone(),
    };
    let r_hat = fitted.model.ratios(&points)?;
    let analytic = analytic_pair(&fitted.p, &fitted.q);
    let rel_mse = match analytic {
        Some((p, q)) => Some(relative_mse(&fitted.model, p, q, args.fit.relative_alpha, &points)?),
        None => None,
    };
    let mean_ratio = mean(&fitted.model.ratios(&fitted.eval_q)?);

    let output = match &args.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let dim = points.cols();
            let mut text = String::new();
            let mut header: Vec<String> = (0..dim).map(|j| format!("x{j}")).collect();
            header.push("r_hat".into());
            if analytic.is_some() {
                header.push("r_true".into());
            }
            text.push_str(&header.join(","));
            text.push('\n');
            for (row, r) in points.iter_rows().zip(&r_hat) {
                let mut fields: Vec<String> = row.iter().map(|v| format_float(*v)).collect();
                fields.push(format_float(*r));
                if let Some((p, q)) = analytic {
                    fields.push(format_float(analytic_relative_ratio(p, q, args.fit.relative_alpha, row)?));
                }
                let _ = writeln!(text, "{}", fields.join(","));
            }
            let path = dir.join(RATIO_FILE);
            fs::write(&path, text)?;
            Some(path.display().to_string())
        }
        None => None,
    };

    let report = json!({
        "divergence": args.fit.divergence.to_string(),
        "relative_alpha": args.fit.relative_alpha,
        "mean_ratio": finite_or_null(mean_ratio),
        "relative_mse": rel_mse.map(finite_or_null),
        "eval_points": points.rows(),
        "final_loss": finite_or_null(fitted.final_loss),
        "output": output,
    });
    println!("{report}");
    Ok(())
}

pub fn cmd_estimate_divergence(args: &DivergenceArgs) -> CliResult<()> {
    let gen = args.fit.divergence;
    let (estimator_name, plugin, variational, p, q) = match args.estimator {
        Estimator::Table => {
            let (p, q) = resolve_pair(&args.fit)?;
            let (DataSource::Empirical(pd), DataSource::Empirical(qd)) = (&p, &q) else {
                return Err(CliError::Usage("--estimator table needs CSV inputs for both --p and --q".into()));
            };
            let table = RatioTable::from_samples(pd, qd).map_err(|e| CliError::Usage(e.to_string()))?;
            let plugin = estimate_divergence_plugin(gen, &table, qd)?;
            let variational = estimate_divergence_variational(gen, &table, pd, qd)?;
            ("table", plugin, variational, p, q)
        }
        Estimator::Fit => {
            let f = fit(&args.fit)?;
            let plugin = estimate_divergence_plugin(gen, &f.model, &f.eval_q)?;
            let variational = estimate_divergence_variational(gen, &f.model, &f.eval_p, &f.eval_q)?;
            ("fit", plugin, variational, f.p, f.q)
        }
    };
    let analytic = match (analytic_pair(&p, &q), gen) {
        (Some((DistSpec::Gaussian(a), DistSpec::Gaussian(b))), FGen::Alpha(alpha)) if alpha == 1.0 => {
            Some(analytic_kl_gaussians(a, b)?)
        }
        _ => None,
    };
    let report = json!({
        "divergence": gen.to_string(),
        "estimator": estimator_name,
        "plugin": finite_or_null(plugin),
        "variational": finite_or_null(variational),
        "analytic": analytic,
    });
    println!("{report}");
    Ok(())
}
