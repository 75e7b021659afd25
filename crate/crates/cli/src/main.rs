mod plot;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use groundiff::config::{git_describe, RunConfig, SEED_ENV};
use groundiff::engine::{infer, EpochLog, InferConfig, ScoredBox, SceneInput, Selection, TrajectoryStep};
use groundiff::geometry::Bbox;
use groundiff::io::write_string_atomic;
use groundiff::model::DecoderParams;
use groundiff::pipeline::{self, Axis};
use groundiff::synthetic::{gen_dataset, load_dataset, sample_rng, save_dataset, GroundingSample};

#[derive(Parser)]
#[command(name = "groundiff", version, about = "Language-guided box diffusion on synthetic grounding scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Schema,
    Ddim,
    Simloss,
    Proposals,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as JSON lines.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        /// Dataset seed; defaults to `data.seed` of the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a decoder, writing checkpoints and a loss curve into a directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the reverse process and export per-step trajectories.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        proposals: Option<usize>,
        #[arg(long, value_enum)]
        ensemble: Option<OnOff>,
        #[arg(long)]
        traj_out: PathBuf,
        /// Only the sample at this position in the file.
        #[arg(long)]
        index: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        zeta: Option<Vec<f64>>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        proposals: Option<usize>,
        #[arg(long, value_enum)]
        ensemble: Option<OnOff>,
    },
    /// Train and evaluate the arms of one ablation axis.
    Ablate {
        #[arg(long, value_enum)]
        axis: AxisArg,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Number of consecutive seeds starting at the config seed.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Draw a trajectory as an SVG, one panel per sampling step.
    Plot {
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Position of the sample in the trajectory file.
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SampleTrajectory {
    pub index: u64,
    pub phrases: Vec<usize>,
    pub gt: Vec<Vec<Bbox>>,
    /// Final boxes per phrase: top-1, or top-k at the ground-truth count for
    /// one-to-many phrases.
    pub predictions: Vec<Vec<ScoredBox>>,
    pub trajectory: Vec<TrajectoryStep>,
    pub infer_ms: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrajectoryFile {
    pub config_hash: String,
    pub seed: u64,
    pub git_describe: String,
    pub infer: InferConfig,
    pub samples: Vec<SampleTrajectory>,
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(
            v.trim().parse().with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer"))?,
        )),
        Err(_) => Ok(None),
    }
}

fn read_data(path: &Path) -> Result<Vec<GroundingSample>> {
    let data = load_dataset(path).with_context(|| format!("reading dataset {}", path.display()))?;
    if data.is_empty() {
        bail!("dataset {} is empty", path.display());
    }
    Ok(data)
}

fn checkpoint_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("final.ckpt")
    } else {
        path.to_path_buf()
    }
}

/// Load parameters and the run config stored in their metadata. A seed from
/// the environment replaces the inference seed.
fn load_checkpoint(path: &Path) -> Result<(DecoderParams, RunConfig)> {
    let file = checkpoint_file(path);
    let (params, meta) =
        DecoderParams::load(&file).with_context(|| format!("loading checkpoint {}", file.display()))?;
    let mut cfg: RunConfig = serde_json::from_value(meta.get("config").cloned().unwrap_or_default())
        .context("checkpoint metadata has no valid run config")?;
    if cfg.model != params.config {
        bail!("checkpoint config does not describe its tensors");
    }
    if let Some(seed) = env_seed()? {
        cfg.infer.seed = seed;
    }
    Ok((params, cfg))
}

fn apply_overrides(
    mut infer: InferConfig,
    steps: Option<usize>,
    proposals: Option<usize>,
    ensemble: Option<OnOff>,
) -> Result<InferConfig> {
    if let Some(s) = steps {
        if s == 0 {
            bail!("--steps must be at least 1");
        }
        infer.n_steps = s;
    }
    if let Some(n) = proposals {
        if n == 0 {
            bail!("--proposals must be at least 1");
        }
        infer.proposals = n;
    }
    if let Some(e) = ensemble {
        infer.ensemble = matches!(e, OnOff::On);
    }
    Ok(infer)
}

fn cmd_gen_data(config: &Path, out: &Path, n: usize, seed: Option<u64>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    if n == 0 {
        bail!("--n must be at least 1");
    }
    let data = gen_dataset(&cfg.data.scene, seed.unwrap_or(cfg.data.seed), n)?;
    save_dataset(out, &data)?;
    println!("wrote {n} scenes to {}", out.display());
    Ok(())
}

fn loss_csv(curve: &[EpochLog]) -> String {
    let mut s = String::from("epoch,lr,total,l1_term,giou_term,sim_term\n");
    for e in curve {
        let l = &e.loss;
        let _ = writeln!(s, "{},{},{},{},{},{}", e.epoch, e.lr, l.total, l.l1_term, l.giou_term, l.sim_term);
    }
    s
}

fn cmd_train(config: &Path, data: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let data = read_data(data)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let meta = |epoch: usize| {
        json!({
            "config": cfg,
            "config_hash": cfg.hash(),
            "seed": cfg.seed(),
            "git_describe": git_describe(),
            "epoch": epoch,
        })
    };
    let mut curve = Vec::new();
    let outcome = pipeline::train_model(&cfg, &data, |log, params| {
        curve.push(log.clone());
        eprintln!(
            "epoch {:>3}  lr {:.2e}  loss {:.4} (l1 {:.4}, giou {:.4}, sim {:.4})",
            log.epoch, log.lr, log.loss.total, log.loss.l1_term, log.loss.giou_term, log.loss.sim_term
        );
        params.save(&out.join("last.ckpt"), meta(log.epoch + 1))?;
        write_string_atomic(&out.join("loss_curve.csv"), &loss_csv(&curve))?;
        Ok(())
    })?;
    outcome.params.save(&out.join("final.ckpt"), meta(cfg.train.epochs))?;
    let summary = json!({
        "config_hash": cfg.hash(),
        "seed": cfg.seed(),
        "git_describe": git_describe(),
        "epochs": cfg.train.epochs,
        "train_scenes": data.len(),
        "final_loss": outcome.curve.last().map(|l| l.loss),
    });
    write_string_atomic(&out.join("train.json"), &to_json(&summary)?)?;
    println!("wrote {}", out.join("final.ckpt").display());
    Ok(())
}

fn predictions_for(result: &groundiff::engine::InferenceResult, sample: &GroundingSample) -> Vec<Vec<ScoredBox>> {
    sample
        .gt
        .iter()
        .enumerate()
        .map(|(i, gt)| {
            let mode = if gt.len() > 1 { Selection::TopK(gt.len()) } else { Selection::Top1 };
            result.select(i, mode)
        })
        .collect()
}

fn cmd_infer(
    ckpt: &Path,
    data: &Path,
    steps: Option<usize>,
    proposals: Option<usize>,
    ensemble: Option<OnOff>,
    traj_out: &Path,
    index: Option<usize>,
) -> Result<()> {
    let (params, cfg) = load_checkpoint(ckpt)?;
    let data = read_data(data)?;
    let chosen: Vec<&GroundingSample> = match index {
        Some(i) => vec![data
            .get(i)
            .with_context(|| format!("--index {i} is out of range for {} samples", data.len()))?],
        None => data.iter().collect(),
    };
    let owned: Vec<GroundingSample> = chosen.iter().map(|s| (*s).clone()).collect();
    pipeline::check_samples(&cfg, &owned)?;
    let infer_cfg = apply_overrides(cfg.infer.clone(), steps, proposals, ensemble)?;
    let sched = cfg.diffusion.schedule()?;
    let vocab = pipeline::vocabulary(&cfg);
    let mut samples = Vec::with_capacity(chosen.len());
    for s in chosen {
        let input = SceneInput::new(s, &vocab)?;
        let mut rng = sample_rng(infer_cfg.seed, s.index);
        let r = infer(&params, &input, &sched, &infer_cfg, &mut rng)?;
        samples.push(SampleTrajectory {
            index: s.index,
            phrases: s.phrases.clone(),
            gt: s.gt.clone(),
            predictions: predictions_for(&r, s),
            trajectory: r.trajectory,
            infer_ms: r.infer_ms,
        });
    }
    let file = TrajectoryFile {
        config_hash: cfg.hash(),
        seed: infer_cfg.seed,
        git_describe: git_describe(),
        infer: infer_cfg,
        samples,
    };
    write_string_atomic(traj_out, &to_json(&file)?)?;
    println!("wrote {} trajectories to {}", file.samples.len(), traj_out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    ckpt: &Path,
    data: &Path,
    zeta: Option<Vec<f64>>,
    report: &Path,
    steps: Option<usize>,
    proposals: Option<usize>,
    ensemble: Option<OnOff>,
) -> Result<()> {
    let (params, mut cfg) = load_checkpoint(ckpt)?;
    if let Some(z) = zeta {
        if z.is_empty() {
            bail!("--zeta needs at least one value");
        }
        cfg.eval.zetas = z;
    }
    let data = read_data(data)?;
    let infer_cfg = apply_overrides(cfg.infer.clone(), steps, proposals, ensemble)?;
    let metrics = pipeline::eval_model(&cfg, &params, &data, &infer_cfg)?;
    for &z in &cfg.eval.zetas {
        println!("acc@{z}\t{:.4}", metrics.acc_at(z).unwrap_or(f64::NAN));
    }
    if let Some(r) = metrics.one_to_many_rate {
        println!("one_to_many_rate\t{r:.4}");
    }
    println!("mean_infer_ms\t{:.3}", metrics.mean_infer_ms);
    write_string_atomic(report, &to_json(&metrics)?)?;
    Ok(())
}

fn cmd_ablate(axis: AxisArg, config: &Path, report: &Path, seeds: u64) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let axis = match axis {
        AxisArg::Schema => Axis::Schema,
        AxisArg::Ddim => Axis::Ddim,
        AxisArg::Simloss => Axis::Simloss,
        AxisArg::Proposals => Axis::Proposals,
    };
    let seed_list: Vec<u64> = (0..seeds).map(|k| cfg.seed().wrapping_add(k)).collect();
    let train = pipeline::train_set(&cfg)?;
    let test = pipeline::test_set(&cfg)?;
    let out = pipeline::run_ablation(&cfg, axis, &seed_list, &train, &test, |r| {
        eprintln!(
            "{:<20} seed {:<4} acc@0.5 {:.4}  acc@0.7 {:.4}",
            r.arm,
            r.seed,
            r.metrics.acc_at(0.5).unwrap_or(f64::NAN),
            r.metrics.acc_at(0.7).unwrap_or(f64::NAN)
        );
    })?;
    for s in &out.summary {
        println!("{}\tacc@0.5 {:.4}\tacc@0.7 {:.4}\tms {:.3}", s.arm, s.acc50, s.acc70, s.mean_infer_ms);
    }
    write_string_atomic(report, &to_json(&out)?)?;
    Ok(())
}

fn cmd_plot(traj: &Path, out: &Path, sample: usize) -> Result<()> {
    let text = std::fs::read_to_string(traj).with_context(|| format!("reading {}", traj.display()))?;
    let file: TrajectoryFile = serde_json::from_str(&text).context("malformed trajectory file")?;
    let s = file
        .samples
        .get(sample)
        .with_context(|| format!("--sample {sample} is out of range for {} samples", file.samples.len()))?;
    write_string_atomic(out, &plot::trajectory_svg(s))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, n, seed } => cmd_gen_data(&config, &out, n, seed),
        Command::Train { config, data, out } => cmd_train(&config, &data, &out),
        Command::Infer {
            ckpt,
            data,
            steps,
            proposals,
            ensemble,
            traj_out,
            index,
        } => cmd_infer(&ckpt, &data, steps, proposals, ensemble, &traj_out, index),
        Command::Eval {
            ckpt,
            data,
            zeta,
            report,
            steps,
            proposals,
            ensemble,
        } => cmd_eval(&ckpt, &data, zeta, &report, steps, proposals, ensemble),
        Command::Ablate {
            axis,
            config,
            report,
            seeds,
        } => cmd_ablate(axis, &config, &report, seeds),
        Command::Plot { traj, out, sample } => cmd_plot(&traj, &out, sample),
    }
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("{}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}
