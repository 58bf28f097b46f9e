use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use safe_mpc::config::{self, ExperimentConfig};
use safe_mpc::io;
use safe_mpc::sim::{
    episode_seed, run_episode_with, run_trials, ControllerKind, EpisodeOptions, EpisodeResult,
    TrialResult,
};

/// Samples per MPC step written by `plotdata`.
const PLOT_SAMPLES: usize = 64;

#[derive(Parser, Debug)]
#[command(
    name = "safe-mpc",
    version,
    about = "Sampling-based MPC with barrier-state safety feedback"
)]
struct Cli {
    /// Worker threads for episode and sample parallelism.
    #[arg(long, global = true, env = "SAFE_MPC_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Bundled preset name or path to a TOML config.
    #[arg(long)]
    config: String,
    /// Root seed (defaults to the config's trial seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (defaults to the config's output dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one closed-loop episode.
    Run {
        #[command(flatten)]
        common: Common,
        /// ddp, mppi or scmppi.
        #[arg(long, default_value = "scmppi")]
        controller: ControllerKind,
    },
    /// Run a randomized statistical trial.
    Trials {
        #[command(flatten)]
        common: Common,
        /// Episode count (defaults to the config's trial episodes).
        #[arg(long)]
        episodes: Option<usize>,
        /// Restrict to one controller (default: every controller in the config).
        #[arg(long)]
        controller: Option<ControllerKind>,
    },
    /// MPPI against SC-MPPI on matched seeds.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Episode count (defaults to the config's trial episodes).
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// List bundled presets.
    Presets,
    /// Emit per-step sample clouds with safe/unsafe labels.
    Plotdata {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "scmppi")]
        controller: ControllerKind,
    },
}

fn out_dir(common: &Common, cfg: &ExperimentConfig) -> PathBuf {
    common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.output.dir))
}

fn controller_dir(out: &Path, kind: ControllerKind) -> PathBuf {
    out.join(format!("{kind:?}").to_lowercase())
}

fn write_episode(
    dir: &Path,
    tag: &str,
    cfg: &ExperimentConfig,
    ep: &EpisodeResult,
    kind: ControllerKind,
) -> Result<()> {
    let episode = cfg.episode(kind, ep.stats.seed)?;
    io::export_trajectory(
        &ep.trajectory,
        &episode.model,
        &episode.field,
        &episode.barrier,
        &dir.join(format!("trajectory_{tag}.csv")),
    )?;
    io::export_diagnostics(&ep.diagnostics, &dir.join(format!("diagnostics_{tag}.csv")))?;
    Ok(())
}

fn trial(
    cfg: &ExperimentConfig,
    kind: ControllerKind,
    episodes: usize,
    seed: u64,
) -> Result<TrialResult> {
    let template = cfg.episode(kind, seed)?;
    info!("{}: {} episodes, seed {}", kind.label(), episodes, seed);
    Ok(run_trials(&template, episodes, seed)?)
}

fn write_trial(
    out: &Path,
    cfg: &ExperimentConfig,
    kind: ControllerKind,
    seed: u64,
    result: &TrialResult,
) -> Result<()> {
    let dir = controller_dir(out, kind);
    let hash = cfg.hash();
    io::export_stats(
        &result.summary,
        &cfg.name,
        seed,
        &hash,
        &dir.join("summary.json"),
    )?;
    io::export_timing(&result.summary, &dir.join("timing.json"))?;
    let stats: Vec<_> = result.episodes.iter().map(|e| e.stats.clone()).collect();
    io::export_text(&io::episodes_csv(&stats), &dir.join("episodes.csv"))?;
    for (i, ep) in result.episodes.iter().enumerate() {
        write_episode(&dir, &format!("{i:04}"), cfg, ep, kind)?;
    }
    Ok(())
}

fn fmt_metric(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::Number(n) => format!("{:.2}", n.as_f64().unwrap_or(f64::NAN)),
        serde_json::Value::Object(o) => format!(
            "{:.2} ± {:.2}",
            o["mean"].as_f64().unwrap_or(f64::NAN),
            o["std"].as_f64().unwrap_or(f64::NAN)
        ),
        _ => "-".into(),
    }
}

fn print_table(columns: &[(String, serde_json::Value)]) {
    let rows = [
        io::METRIC_VIOLATION,
        io::METRIC_COMPLETION,
        io::METRIC_COMPLETION_TIME,
        io::METRIC_RMSE,
        io::METRIC_AVG_VELOCITY,
        io::METRIC_MAX_VELOCITY,
        io::METRIC_SAFE_SAMPLES,
    ];
    let mut header = format!("{:<22}", "");
    for (name, _) in columns {
        header.push_str(&format!(" | {name:>18}"));
    }
    println!("{header}");
    for r in rows {
        let mut line = format!("{r:<22}");
        for (_, v) in columns {
            line.push_str(&format!(" | {:>18}", fmt_metric(&v["metrics"][r])));
        }
        println!("{line}");
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Presets => {
            for name in config::preset_names() {
                let cfg = config::preset(name)?;
                println!("{name:<24} {}", cfg.description);
            }
        }
        Command::Run { common, controller } => {
            let cfg = config::load_config(&common.config)?;
            let seed = common.seed.unwrap_or(cfg.trial.seed);
            let episode = cfg.episode(controller, episode_seed(seed, 0))?;
            let result = run_episode_with(&episode, &EpisodeOptions::default())?;
            let out = out_dir(&common, &cfg);
            let dir = controller_dir(&out, controller);
            write_episode(&dir, "run", &cfg, &result, controller)?;
            let stats = serde_json::to_string_pretty(&result.stats)?;
            io::export_text(&(stats.clone() + "\n"), &dir.join("episode.json"))?;
            println!("{stats}");
        }
        Command::Trials {
            common,
            episodes,
            controller,
        } => {
            let cfg = config::load_config(&common.config)?;
            let seed = common.seed.unwrap_or(cfg.trial.seed);
            let episodes = episodes.unwrap_or(cfg.trial.episodes);
            let kinds = match controller {
                Some(k) => vec![k],
                None => cfg.controllers(),
            };
            if kinds.is_empty() {
                bail!("config `{}` defines no controller", cfg.name);
            }
            let out = out_dir(&common, &cfg);
            let mut columns = Vec::new();
            for kind in kinds {
                let result = trial(&cfg, kind, episodes, seed)?;
                write_trial(&out, &cfg, kind, seed, &result)?;
                columns.push((
                    kind.label().to_string(),
                    io::summary_json(&result.summary, &cfg.name, seed, &cfg.hash()),
                ));
            }
            print_table(&columns);
        }
        Command::Compare { common, episodes } => {
            let cfg = config::load_config(&common.config)?;
            let seed = common.seed.unwrap_or(cfg.trial.seed);
            let episodes = episodes.unwrap_or(cfg.trial.episodes);
            let out = out_dir(&common, &cfg);
            let mut columns = Vec::new();
            for kind in [ControllerKind::Mppi, ControllerKind::Scmppi] {
                let result = trial(&cfg, kind, episodes, seed)?;
                write_trial(&out, &cfg, kind, seed, &result)?;
                columns.push((
                    kind.label().to_string(),
                    io::summary_json(&result.summary, &cfg.name, seed, &cfg.hash()),
                ));
            }
            let doc: serde_json::Map<_, _> = columns.iter().cloned().collect();
            io::export_text(
                &(serde_json::to_string_pretty(&doc)? + "\n"),
                &out.join("compare.json"),
            )?;
            print_table(&columns);
        }
        Command::Plotdata { common, controller } => {
            if controller == ControllerKind::Ddp {
                bail!("plotdata needs a sampling controller (mppi or scmppi)");
            }
            let cfg = config::load_config(&common.config)?;
            let seed = common.seed.unwrap_or(cfg.trial.seed);
            let episode = cfg.episode(controller, episode_seed(seed, 0))?;
            let result = run_episode_with(
                &episode,
                &EpisodeOptions {
                    cloud_samples: PLOT_SAMPLES,
                },
            )?;
            let dir = controller_dir(&out_dir(&common, &cfg), controller);
            io::export_clouds(
                &result.clouds,
                episode.model.kind(),
                &dir.join("samples.csv"),
            )?;
            write_episode(&dir, "plot", &cfg, &result, controller)?;
            println!(
                "{} steps, {} sampled rollouts written to {}",
                result.clouds.len(),
                result.clouds.iter().map(|c| c.samples.len()).sum::<usize>(),
                dir.join("samples.csv").display()
            );
        }
    }
    Ok(())
}
