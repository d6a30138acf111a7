use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::Args;
use ratio_forge_core::data::{format_float, write_csv};
use ratio_forge_core::{Error as CoreError, FGen, GStepVariant, TrainConfig, TrainLogRecord, Trainer};

use crate::error::{CliError, CliResult};
use crate::Widths;
use crate::manifest::{run_id, Artifacts, RunManifest, RunStatus, WallClock, LOG_FILE};

pub const LOG_HEADER: &str = "step,mean_r_real,mean_r_fake,dstep_loss,gstep_loss,div_delta,flag";

/// Generator snapshots use their own stream so they never perturb training.
const SNAPSHOT_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,

    /// Start from the configuration stored in a previous run's manifest.json;
    /// flags given explicitly override it.
    #[arg(long, value_name = "MANIFEST")]
    pub from_manifest: Option<PathBuf>,

    /// kl, pearson, rkl, alpha:<a> or power:<b>.
    #[arg(long)]
    pub divergence: Option<FGen>,

    /// G-step objective: f, fprime or conjugate.
    #[arg(long)]
    pub gstep: Option<GStepVariant>,

    /// Dataset spec (gauss2d, ring:8:2.0:0.02, gauss1d:<mu>:<sigma>, ...) or CSV path.
    #[arg(long)]
    pub dataset: Option<String>,

    #[arg(long)]
    pub steps: Option<usize>,

    #[arg(long)]
    pub batch: Option<usize>,

    #[arg(long)]
    pub lr: Option<f64>,

    /// Scale C of the ratio head C * sigmoid.
    #[arg(long)]
    pub ratio_scale: Option<f64>,

    /// Mixing weight a of the relative ratio p / (a p + (1 - a) q); 0 disables it.
    #[arg(long)]
    pub relative_alpha: Option<f64>,

    #[arg(long, env = "RATIO_FORGE_SEED")]
    pub seed: Option<u64>,

    /// Steps between log records.
    #[arg(long)]
    pub log_every: Option<usize>,

    /// Hidden layer widths shared by both networks, e.g. 64,64.
    #[arg(long)]
    pub hidden: Option<Widths>,

    #[arg(long)]
    pub noise_dim: Option<usize>,

    /// Steps between generator sample snapshots; 0 keeps only the final one.
    #[arg(long)]
    pub snapshot_every: Option<usize>,

    /// Points per snapshot.
    #[arg(long)]
    pub snapshot_size: Option<usize>,
}

pub const DEFAULT_SNAPSHOT_EVERY: usize = 5000;
pub const DEFAULT_SNAPSHOT_SIZE: usize = 1000;

/// Resolved settings of a training invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub config: TrainConfig,
    pub snapshot_every: usize,
    pub snapshot_size: usize,
}

impl TrainArgs {
    pub fn resolve(&self) -> CliResult<TrainPlan> {
        let (mut config, mut snapshot_every, mut snapshot_size) = match &self.from_manifest {
            Some(path) => {
                let m = RunManifest::read(path)?;
                (m.config, m.snapshot_every, m.snapshot_size)
            }
            None => (TrainConfig::default(), DEFAULT_SNAPSHOT_EVERY, DEFAULT_SNAPSHOT_SIZE),
        };
        macro_rules! apply {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field { config.$field = v.clone(); })*
            };
        }
        apply!(divergence, gstep, dataset, steps, batch, lr, ratio_scale, relative_alpha, seed, log_every, noise_dim);
        if let Some(w) = &self.hidden {
            config.hidden = w.0.clone();
        }
        if let Some(v) = self.snapshot_every {
            snapshot_every = v;
        }
        if let Some(v) = self.snapshot_size {
            snapshot_size = v;
        }
        config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if snapshot_size == 0 {
            return Err(CliError::Usage("snapshot size must be at least 1".into()));
        }
        Ok(TrainPlan { config, snapshot_every, snapshot_size })
    }
}

/// One log.csv row.
pub fn format_record(rec: &TrainLogRecord) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        rec.step,
        format_float(rec.mean_r_real),
        format_float(rec.mean_r_fake),
        format_float(rec.dstep_loss),
        format_float(rec.gstep_loss),
        format_float(rec.div_delta),
        rec.flag
    )
}

fn now_unix() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn write_snapshot(trainer: &Trainer, dir: &Path, size: usize, step: usize) -> ratio_forge_core::Result<String> {
    let name = format!("samples_{step}.csv");
    let points = trainer.sample_generator(size, trainer.config().seed ^ SNAPSHOT_STREAM)?;
    let file = File::create(dir.join(&name)).map_err(|e| CoreError::Io(e.to_string()))?;
    write_csv(BufWriter::new(file), &points)?;
    Ok(name)
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let plan = args.resolve()?;
    let dir = &args.out;
    fs::create_dir_all(dir)?;
    let started = now_unix();
    let clock = Instant::now();

    let mut trainer = Trainer::new(plan.config.clone()).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut manifest = RunManifest {
        run_id: run_id(&plan.config)?,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config: plan.config.clone(),
        snapshot_every: plan.snapshot_every,
        snapshot_size: plan.snapshot_size,
        artifacts: Artifacts { log: LOG_FILE.into(), samples: Vec::new() },
        status: RunStatus::default(),
        wall_clock: WallClock { started, elapsed_secs: 0.0 },
    };
    manifest.write(dir)?;

    let mut log = BufWriter::new(File::create(dir.join(LOG_FILE))?);
    writeln!(log, "{LOG_HEADER}")?;
    log.flush()?;

    let io = |e: std::io::Error| CoreError::Io(e.to_string());
    let mut samples = Vec::new();
    let mut next_snapshot = plan.snapshot_every;
    let outcome = trainer.run(|rec, tr| {
        writeln!(log, "{}", format_record(rec)).map_err(io)?;
        log.flush().map_err(io)?;
        if plan.snapshot_every > 0 && rec.step >= next_snapshot && !rec.flag.is_halt() {
            samples.push(write_snapshot(tr, dir, plan.snapshot_size, rec.step)?);
            while next_snapshot <= rec.step {
                next_snapshot += plan.snapshot_every;
            }
        }
        Ok(())
    })?;
    drop(log);

    let done = trainer.steps_done();
    let last = format!("samples_{done}.csv");
    if outcome.halted.is_none() && done > 0 && !samples.contains(&last) {
        samples.push(write_snapshot(&trainer, dir, plan.snapshot_size, done)?);
    }

    manifest.artifacts.samples = samples;
    manifest.status = RunStatus { steps_done: done, finished: true, halted: outcome.halted };
    manifest.wall_clock.elapsed_secs = clock.elapsed().as_secs_f64();
    manifest.write(dir)?;

    let summary = serde_json::json!({
        "run_id": manifest.run_id,
        "out": dir.display().to_string(),
        "steps_done": done,
        "records": outcome.records.len(),
        "halted": outcome.halted.map(|f| f.to_string()),
    });
    println!("{summary}");
    match outcome.halted {
        Some(flag) => Err(CliError::Halted(format!("{flag} at step {done}; partial log in {}", dir.display()))),
        None => Ok(()),
    }
}
