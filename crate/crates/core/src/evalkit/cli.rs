use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    aggregate, aggregate_csv, collect_probe_data, evaluate_policy, iqm, saliency_map,
    train_probe_decoder,
};
use super::{ProbeConfig, RunResult, SaliencyMethod};
use crate::diffgraph::Tensor;
use crate::rssm::NoiseSource;
use crate::trainer::{load_checkpoint, model_view, ActMode, LatentPolicy, TrainConfig, Trainer};
use crate::worlds::{dump_episode, Environment, Reacher, Variant, WorldConfig, IMAGE_ID};
use crate::{Error, Result};

fn config_help() -> String {
    let mut s = String::from(
        "Config files hold `section.key = value` lines; `#` starts a comment.\nKeys:\n",
    );
    for (k, d) in TrainConfig::keys() {
        let _ = writeln!(s, "  {k:<30} {d}");
    }
    s
}

#[derive(Parser)]
#[command(
    name = "sensorlab",
    about = "Train and evaluate multi-sensor world models on the toy reacher"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured training protocol and write metrics, evaluation
    /// returns and a checkpoint to the output directory.
    #[command(after_help = config_help())]
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Extra `key=value` overrides applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Deterministic evaluation of a trained run; one return row per episode.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 20)]
        rollouts: usize,
        /// First episode seed; defaults to the run's evaluation seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// IQM and bootstrap intervals across run directories.
    Aggregate {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        resamples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pixel saliency of the latent state at one step of an evaluation episode.
    Saliency {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        episode_seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        step: usize,
        /// Use a randomized estimate with this many probes.
        #[arg(long)]
        probes: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a decoder from frozen latents to occlusion-free images.
    Probe {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 5)]
        episodes: usize,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also probe the untrained model of the same configuration.
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one random-policy episode as CSV states plus raw frames.
    DumpEnv {
        #[arg(long, default_value = "clean")]
        variant: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses and runs one command line. Returns the process exit status:
/// 0 on success, 2 for usage errors, 1 for everything else.
pub fn cli_run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                2
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if matches!(e, Error::Usage(_)) {
                2
            } else {
                1
            }
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::parse(&read_text(p)?),
        None => Ok(TrainConfig::default()),
    }
}

/// Rebuilds a trained run from `config.txt` and its checkpoint.
fn load_run(dir: &Path) -> Result<Trainer<Reacher>> {
    let config = TrainConfig::parse(&read_text(&dir.join("config.txt"))?)?;
    let env = Reacher::new(config.world.clone())?;
    let mut t = Trainer::new(config, env)?;
    load_checkpoint(
        &dir.join("checkpoint"),
        &mut t.model,
        &mut t.model_opt,
        &mut t.agent,
    )?;
    Ok(t)
}

fn write_or_print(path: Option<&Path>, text: &str, out: &mut dyn Write) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Train {
            config,
            seed,
            out: dir,
            set,
        } => {
            let mut c = load_config(config.as_deref())?;
            for kv in &set {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
                c.set(k.trim(), v)
                    .map_err(|e| Error::Config(format!("--set {kv}: {e}")))?;
            }
            if let Some(s) = seed {
                c.seed = s;
            }
            c.validate()?;
            let env = Reacher::new(c.world.clone())?;
            let mut t = Trainer::new(c, env)?;
            t.run()?;
            t.write_outputs(&dir)?;
            let last = t.evals.last().map(|e| iqm(&e.returns)).transpose()?;
            writeln!(
                out,
                "trained {} env steps, {} updates; final eval iqm {}; separation violations {}",
                t.env_steps,
                t.total_updates,
                last.map_or("n/a".into(), |v| format!("{v:.3}")),
                t.separation.violations
            )?;
        }
        Command::Eval {
            run,
            rollouts,
            seed,
            out: path,
        } => {
            let mut t = load_run(&run)?;
            let first = seed.unwrap_or(t.config.eval_seed);
            let mut policy = LatentPolicy::new(&t.model, &t.agent, ActMode::Deterministic);
            let returns = evaluate_policy(&mut t.env, &mut policy, rollouts, first)?;
            let mut s = String::from("episode,seed,return\n");
            for (k, r) in returns.iter().enumerate() {
                let _ = writeln!(s, "{k},{},{r}", first + k as u64);
            }
            write_or_print(path.as_deref(), &s, out)?;
        }
        Command::Aggregate {
            runs,
            out: path,
            resamples,
            seed,
        } => {
            let results = runs
                .iter()
                .map(|d| RunResult::load(d))
                .collect::<Result<Vec<_>>>()?;
            let rows = aggregate(&results, resamples, seed)?;
            std::fs::write(&path, aggregate_csv(&rows)?)?;
            writeln!(
                out,
                "{:<10} {:<32} {:>8} {:>9} {:>19}",
                "variant", "objective", "step", "iqm", "95% ci"
            )?;
            for r in &rows {
                writeln!(
                    out,
                    "{:<10} {:<32} {:>8} {:>9.3} [{:>8.3}, {:>8.3}]",
                    r.variant, r.objective, r.step, r.iqm, r.ci_low, r.ci_high
                )?;
            }
        }
        Command::Saliency {
            run,
            episode_seed,
            step,
            probes,
            out: path,
        } => {
            let mut t = load_run(&run)?;
            let method = match probes {
                Some(count) => SaliencyMethod::Probes { count, seed: 0 },
                None => SaliencyMethod::Exact,
            };
            let mut bundle = t.env.reset(episode_seed.unwrap_or(t.config.eval_seed));
            let mut state = t.model.initial_latent();
            let mut action = vec![0.0; t.model.config.action_dim];
            for _ in 0..step {
                let view = model_view(&t.model.config, &bundle)?;
                state = t
                    .model
                    .observe(&[state], &[action], &[view], &mut NoiseSource::Zero)?
                    .remove(0);
                action = t
                    .agent
                    .act(&Tensor::row(&state.features()), None)?
                    .into_data();
                let r = t.env.step(&action)?;
                if r.done {
                    return Err(Error::Usage(format!("episode ends before step {step}")));
                }
                bundle = r.bundle;
            }
            let map = saliency_map(&t.model, &state, &action, &bundle, IMAGE_ID, method)?;
            let mut s = String::new();
            for y in 0..map.size {
                let row: Vec<String> = (0..map.size).map(|x| map.get(y, x).to_string()).collect();
                let _ = writeln!(s, "{}", row.join(","));
            }
            std::fs::write(&path, s)?;
            let peak = map.values.iter().copied().fold(0.0, f64::max);
            writeln!(
                out,
                "saliency {}x{} written, peak {peak:.4}",
                map.size, map.size
            )?;
        }
        Command::Probe {
            run,
            episodes,
            steps,
            seed,
            baseline,
            out: dir,
        } => {
            let t = load_run(&run)?;
            let cfg = ProbeConfig {
                steps,
                seed,
                ..ProbeConfig::default()
            };
            let probe_seed = t.config.eval_seed + 10_000;
            let data = collect_probe_data(
                &t.model,
                Some(&t.agent),
                &t.config.world,
                episodes,
                probe_seed,
            )?;
            let res = train_probe_decoder(&data, &cfg)?;
            std::fs::create_dir_all(&dir)?;
            let losses: String = std::iter::once("step,loss\n".to_string())
                .chain(
                    res.losses
                        .iter()
                        .enumerate()
                        .map(|(i, l)| format!("{i},{l}\n")),
                )
                .collect();
            std::fs::write(dir.join("probe_losses.csv"), losses)?;
            let size = (res.pixel_error.len() as f64).sqrt() as usize;
            let grid: String = res
                .pixel_error
                .chunks(size)
                .map(|r| r.iter().map(f64::to_string).collect::<Vec<_>>().join(",") + "\n")
                .collect();
            std::fs::write(dir.join("probe_pixel_error.csv"), grid)?;
            let mut summary = serde_json::json!({ "mse": res.mse, "samples": data.latents.len() });
            if baseline {
                let fresh = Trainer::new(t.config.clone(), Reacher::new(t.config.world.clone())?)?;
                let data = collect_probe_data(
                    &fresh.model,
                    Some(&fresh.agent),
                    &t.config.world,
                    episodes,
                    probe_seed,
                )?;
                summary["baseline_mse"] = train_probe_decoder(&data, &cfg)?.mse.into();
            }
            let text =
                serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?;
            std::fs::write(dir.join("probe.json"), text + "\n")?;
            writeln!(out, "{summary}")?;
        }
        Command::DumpEnv {
            variant,
            seed,
            out: dir,
        } => {
            let variant = Variant::parse(&variant)
                .ok_or_else(|| Error::Usage(format!("unknown variant {variant:?}")))?;
            let world = WorldConfig {
                variant,
                ..WorldConfig::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut policy =
                |_: usize| vec![rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
            let m = dump_episode(&world, seed, &mut policy, &dir)?;
            writeln!(out, "wrote {} frames to {}", m.frames, dir.display())?;
        }
    }
    Ok(())
}
