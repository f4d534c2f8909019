//! `segreg`: dataset generation, training, evaluation, comparison and panels.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use segreg_core::config::ExperimentConfig;
use segreg_core::dataset::{generate_synthetic, make_split, read_dataset, write_dataset, write_split, DatasetSplit};
use segreg_core::models::{RegModel, SegModel};
use segreg_core::panel::render_iteration_panel;
use segreg_core::report::{self, MetricsReport, MetricsRow};
use segreg_core::trainer::{self, RunLog, TrainState};

#[derive(Parser)]
#[command(name = "segreg", version, about = "Joint segmentation and registration with soft pseudo-masks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (images/, masks/ and dataset.json).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Overrides the configured sample count.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
    },
    /// Train one method; writes to `<runs>/<method>_<rate>_<seed>/`.
    Train {
        #[arg(long)]
        method: Method,
        #[arg(long)]
        rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "runs")]
        runs: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue a joint run from its newest iteration checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Score a finished run on its test split; writes metrics.csv and metrics.json in the run.
    Eval {
        #[arg(long)]
        run: PathBuf,
    },
    /// Merge the metrics of several runs into one report with significance tests.
    Compare {
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the per-iteration pseudo-mask grid of one unannotated image.
    Panel {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        image: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; takes precedence over --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    preset: String,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        Ok(match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::preset(&self.preset)?,
        })
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
enum Method {
    Fs,
    Mt,
    Joint,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Fs => "fs",
            Method::Mt => "mt",
            Method::Joint => "joint",
        }
    }
}

const RUN_FILE: &str = "run.json";
const CONFIG_FILE: &str = "config.json";

#[derive(serde::Serialize, serde::Deserialize)]
struct RunInfo {
    method: Method,
    rate: f64,
    seed: u64,
    data: PathBuf,
    finished: bool,
}

fn run_dir(runs: &Path, method: Method, rate: f64, seed: u64) -> PathBuf {
    runs.join(format!("{}_{rate}_{seed}", method.name()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn load_split(cfg: &ExperimentConfig, data: &Path) -> Result<DatasetSplit> {
    let samples = read_dataset(data, cfg.data.image_size).with_context(|| format!("reading dataset {}", data.display()))?;
    Ok(make_split(&samples, cfg.annotation_rate, cfg.seed, &cfg.split)?)
}

fn gen_data(out: &Path, mut cfg: ExperimentConfig, count: Option<usize>, seed: u64) -> Result<()> {
    if let Some(c) = count {
        cfg.data.count = c;
    }
    let samples = generate_synthetic(&cfg.data, seed)?;
    write_dataset(out, &samples)?;
    write_json(&out.join("dataset.json"), &json!({ "seed": seed, "generator": cfg.data }))?;
    log::info!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

fn newest_checkpoint(dir: &Path) -> Result<Option<usize>> {
    let ck = dir.join("checkpoints");
    if !ck.exists() {
        return Ok(None);
    }
    let mut best = None;
    for e in fs::read_dir(&ck)? {
        let name = e?.file_name();
        if let Some(t) = name.to_str().and_then(|n| n.strip_prefix("iter_")).and_then(|t| t.parse::<usize>().ok()) {
            if ck.join(name).join("history.json").exists() {
                best = best.max(Some(t));
            }
        }
    }
    Ok(best)
}

fn train(method: Method, data: &Path, runs: &Path, cfg: ExperimentConfig, resume: bool) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = run_dir(runs, method, cfg.annotation_rate, cfg.seed);
    let resuming = resume && method == Method::Joint && newest_checkpoint(&dir)?.is_some();
    if resume && !resuming {
        log::warn!("nothing to resume in {}; starting fresh", dir.display());
    }
    if !resuming && dir.exists() {
        fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    if resuming {
        let saved = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
        if saved != cfg {
            bail!("config differs from the one saved in {}", dir.display());
        }
    }
    fs::create_dir_all(&dir)?;
    let split = load_split(&cfg, data)?;
    cfg.save(&dir.join(CONFIG_FILE))?;
    write_split(&dir, &split)?;
    let data = fs::canonicalize(data)?;
    let info = |finished| RunInfo { method, rate: cfg.annotation_rate, seed: cfg.seed, data: data.clone(), finished };
    write_json(&dir.join(RUN_FILE), &info(false))?;
    let mut log = RunLog::to_dir(&dir, method.name())?;
    log::info!(
        "{}: {} annotated, {} unannotated, {} validation, {} test",
        dir.display(),
        split.train_annotated.len(),
        split.train_unannotated.len(),
        split.validation.len(),
        split.test.len()
    );
    match method {
        Method::Fs => trainer::train_fully_supervised(&cfg, &split, &mut log)?.save(&dir.join("model").join("seg"), 0)?,
        Method::Mt => trainer::train_mean_teacher(&cfg, &split, &mut log)?.save(&dir.join("model").join("seg"), 0)?,
        Method::Joint => {
            let state = match newest_checkpoint(&dir)?.filter(|_| resuming) {
                Some(t) => {
                    log::info!("resuming from iteration {t}");
                    trainer::continue_joint(TrainState::load(&dir, t)?, &cfg, &split, &mut log, Some(&dir))?
                }
                None => trainer::train_joint(&cfg, &split, &mut log, Some(&dir))?,
            };
            write_json(&dir.join("history.json"), &state.history)?;
            for h in &state.history {
                if let Some(a) = &h.pseudo {
                    log::info!(
                        "iteration {}: fused pseudo DSC {:.4} (seg {:.4}, reg {:.4}), entropy {:.4}",
                        h.iteration,
                        a.fused_dsc,
                        a.seg_dsc,
                        a.reg_dsc,
                        a.mean_entropy
                    );
                }
            }
        }
    }
    write_json(&dir.join(RUN_FILE), &info(true))?;
    Ok(dir)
}

fn read_run(dir: &Path) -> Result<(RunInfo, ExperimentConfig)> {
    let path = dir.join(RUN_FILE);
    let info: RunInfo =
        serde_json::from_slice(&fs::read(&path).with_context(|| format!("reading {}", path.display()))?)?;
    if !info.finished {
        bail!("run {} did not finish", dir.display());
    }
    Ok((info, ExperimentConfig::load(&dir.join(CONFIG_FILE))?))
}

fn eval(dir: &Path) -> Result<MetricsReport> {
    let (info, cfg) = read_run(dir)?;
    let split = load_split(&cfg, &info.data)?;
    let rows = match info.method {
        Method::Fs | Method::Mt => {
            let (seg, _) = SegModel::load(&dir.join("model").join("seg"))?;
            let name = if info.method == Method::Fs { report::FS } else { report::MT };
            report::evaluate_segmentation(name, &seg, &split)?
        }
        Method::Joint => {
            let t = newest_checkpoint(dir)?.context("joint run has no checkpoints")?;
            let ck = dir.join("checkpoints").join(format!("iter_{t}"));
            let (seg, _) = SegModel::load(&ck.join("seg"))?;
            let (reg, _) = RegModel::load(&ck.join("reg"))?;
            let mut rows = report::evaluate_segmentation(report::JOINT, &seg, &split)?;
            rows.extend(report::evaluate_combined(&seg, &reg, &cfg, &split)?);
            rows
        }
    };
    let rep = MetricsReport::build(rows)?;
    rep.save(dir, "metrics")?;
    Ok(rep)
}

fn print_summary(rep: &MetricsReport) {
    println!("{:<10} {:>6} {:>4} {:>16} {:>18}", "method", "rate", "n", "DSC", "HD (px)");
    for s in &rep.summaries {
        let hd = match (s.hd_mean, s.hd_std) {
            (Some(m), Some(sd)) => format!("{m:.2} ± {sd:.2}"),
            _ => "n/a".into(),
        };
        println!("{:<10} {:>6} {:>4} {:>16} {:>18}", s.method, s.rate, s.n, format!("{:.4} ± {:.4}", s.dsc_mean, s.dsc_std), hd);
    }
    for c in &rep.comparisons {
        let star = if c.test.p_value < 0.05 { "*" } else { "" };
        println!("{} vs {} at {} ({}): p = {:.4}{star}", c.a, c.b, c.rate, c.metric, c.test.p_value);
    }
}

fn compare(runs: &[PathBuf], out: &Path) -> Result<()> {
    let mut rows: Vec<MetricsRow> = vec![];
    for dir in runs {
        let path = dir.join("metrics.csv");
        if !path.exists() {
            log::warn!("{} has no metrics.csv; reported as n/a", dir.display());
            continue;
        }
        rows.extend(report::read_rows(&path)?);
    }
    if rows.is_empty() {
        bail!("none of the runs have been evaluated");
    }
    let rep = MetricsReport::build(rows)?;
    rep.save(out, "report")?;
    print_summary(&rep);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenData { out, config, count, data_seed } => gen_data(&out, config.load()?, count, data_seed)?,
        Command::Train { method, rate, seed, data, runs, config, resume } => {
            let mut cfg = config.load()?;
            cfg.annotation_rate = rate;
            cfg.seed = seed;
            let dir = train(method, &data, &runs, cfg, resume)?;
            println!("{}", dir.display());
        }
        Command::Eval { run } => print_summary(&eval(&run)?),
        Command::Compare { runs, out } => compare(&runs, &out)?,
        Command::Panel { run, image, out } => {
            let info = render_iteration_panel(&run, &image, &out)?;
            println!(
                "{}: 3 x {} panel, {} gap marker(s)",
                out.display(),
                info.iterations.len(),
                info.missing.len()
            );
        }
    }
    Ok(())
}
