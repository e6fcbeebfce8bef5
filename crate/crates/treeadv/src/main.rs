//! Command-line surface: train, eval, sweep, inspect-forest, plot.
//!
//! Exit codes: 0 success, 2 usage/config error, 3 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use treeadv::advantage::group_normalize;
use treeadv::config::RunConfig;
use treeadv::env;
use treeadv::forest::SegmentRef;
use treeadv::plot::{points_csv, render_line_chart, Series};
use treeadv::policy::PolicyParams;
use treeadv::sampler::{derive_seed, sample_forest};
use treeadv::trainer::{budget_sweep, evaluate, sweep_csv, train_full, TrainerError};

#[derive(Parser)]
#[command(name = "treeadv", version, about = "Desk-scale group-based RL training engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training loop from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to resume from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Output directory for metrics, checkpoints, and the resolved config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint with greedy decoding.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Number of held-out instances (defaults to eval_instances).
        #[arg(long)]
        instances: Option<usize>,
        /// Instance-generator seed (defaults to the config seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train once per tree count M and emit a combined CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Tree counts, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,16")]
        m: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample one annotated forest and write it as JSON.
    InspectForest {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        prompt_seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Optional checkpoint; defaults to untrained parameters.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Render metrics JSONL files as an SVG line chart plus a CSV sibling.
    Plot {
        #[arg(long, num_args = 1.., required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Metric field for the y axis.
        #[arg(long)]
        y: String,
        /// Field for the x axis.
        #[arg(long, default_value = "step")]
        x: String,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }
}

impl From<TrainerError> for CliError {
    fn from(err: TrainerError) -> Self {
        let code = match err {
            TrainerError::Config(_)
            | TrainerError::Task(_)
            | TrainerError::ResumeMismatch(_)
            | TrainerError::Checkpoint(_) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        };
        CliError {
            code,
            message: err.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::runtime(err.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message);
            ExitCode::from(err.code)
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    RunConfig::from_path(path).map_err(|e| CliError::config(e.to_string()))
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train {
            config,
            resume,
            out,
        } => {
            let run_config = load_config(&config)?;
            if let Some(dir) = &out {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("resolved_config.toml"), run_config.to_toml())?;
            }
            let outcome = train_full(
                &run_config,
                out.as_deref(),
                resume.as_deref(),
                &mut |_, _, _| {},
            )?;
            let last = outcome.metrics.last();
            println!(
                "finished {} steps; final mean_reward {}; best accuracy {}",
                outcome.metrics.len(),
                last.map_or(f64::NAN, |m| m.mean_reward),
                outcome.best.as_ref().map_or(f64::NAN, |b| b.accuracy),
            );
            Ok(())
        }
        Command::Eval {
            config,
            ckpt,
            instances,
            seed,
        } => {
            let run_config = load_config(&config)?;
            let params = PolicyParams::load_checkpoint(&ckpt)
                .map_err(|e| CliError::config(e.to_string()))?;
            if params.vocab_size != run_config.task.vocab_size {
                return Err(CliError::config(format!(
                    "checkpoint vocab_size {} does not match config vocab_size {}",
                    params.vocab_size, run_config.task.vocab_size
                )));
            }
            let n = instances.unwrap_or(run_config.eval_instances);
            if n == 0 {
                return Err(CliError::config("instances: must be at least 1"));
            }
            let (accuracy, mean_tokens) = evaluate(
                &params,
                &run_config.task,
                n,
                seed.unwrap_or(run_config.seed),
            );
            println!(
                "{}",
                serde_json::json!({ "accuracy": accuracy, "mean_tokens": mean_tokens })
            );
            Ok(())
        }
        Command::Sweep { config, m, out } => {
            let run_config = load_config(&config)?;
            for &m_value in &m {
                if m_value == 0 || run_config.rollout.k % m_value != 0 {
                    return Err(CliError::config(format!(
                        "m: {} does not divide k = {}",
                        m_value, run_config.rollout.k
                    )));
                }
            }
            std::fs::create_dir_all(&out)?;
            let rows = budget_sweep(&run_config, &m)?;
            std::fs::write(out.join("sweep.csv"), sweep_csv(&rows))?;
            println!("wrote {} rows to {}", rows.len(), out.join("sweep.csv").display());
            Ok(())
        }
        Command::InspectForest {
            config,
            prompt_seed,
            out,
            ckpt,
        } => {
            let run_config = load_config(&config)?;
            let document = inspect_forest(&run_config, prompt_seed, ckpt.as_deref())?;
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            std::fs::write(&out, serde_json::to_string_pretty(&document).unwrap())?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Plot { metrics, out, y, x } => plot(&metrics, &out, &y, &x),
    }
}

/// Samples one forest under a fresh snapshot, rewards the leaves, and
/// annotates every segment with its covered leaves and token advantage.
fn inspect_forest(
    config: &RunConfig,
    prompt_seed: u64,
    ckpt: Option<&Path>,
) -> Result<serde_json::Value, CliError> {
    let vocab = config.task.vocab();
    let params = match ckpt {
        Some(path) => {
            PolicyParams::load_checkpoint(path).map_err(|e| CliError::config(e.to_string()))?
        }
        None => PolicyParams::zeros(
            config.task.vocab_size,
            config.policy.window,
            config.policy.feature_kind,
            vocab.bos(),
        ),
    };
    let snapshot = params.snapshot();
    let instance = env::generate(&config.task, prompt_seed, 1)
        .map_err(|e| CliError::config(e.to_string()))?
        .remove(0);
    let forest = sample_forest(
        &instance.prompt,
        &snapshot,
        &config.branch_policy(),
        config.rollout.k,
        config.rollout.m,
        derive_seed(prompt_seed, 1),
        vocab.eos(),
        config.task.length_cap,
    )
    .map_err(|e| CliError::runtime(e.to_string()))?;
    let views = forest
        .enumerate_leaves()
        .map_err(|e| CliError::runtime(e.to_string()))?;
    let rewards: Vec<f64> = views
        .iter()
        .map(|v| env::reward(&instance, &v.tokens()))
        .collect();
    let group =
        group_normalize(&rewards, config.delta).map_err(|e| CliError::runtime(e.to_string()))?;

    let trees: Vec<serde_json::Value> = forest
        .trees
        .iter()
        .enumerate()
        .map(|(ti, tree)| {
            let segments: Vec<serde_json::Value> = tree
                .segment_ids()
                .map(|id| {
                    let seg = tree.segment(id);
                    let leaves = forest.leaves_under(SegmentRef { tree: ti, segment: id });
                    let token_advantage = leaves
                        .iter()
                        .map(|&l| group.seq_adv[l])
                        .sum::<f64>()
                        / leaves.len() as f64;
                    serde_json::json!({
                        "id": id,
                        "parent": seg.parent,
                        "children": seg.children,
                        "tokens": seg.tokens,
                        "behavior_logprobs": seg.behavior_logprobs,
                        "entropies": seg.entropies,
                        "start_offset": seg.start_offset,
                        "branch_point": seg.children.len() >= 2,
                        "is_leaf": seg.is_leaf(),
                        "leaves_under": leaves,
                        "token_advantage": token_advantage,
                    })
                })
                .collect();
            serde_json::json!({
                "root": tree.root(),
                "segments": segments,
            })
        })
        .collect();

    Ok(serde_json::json!({
        "format_version": 1,
        "prompt": instance.prompt,
        "expected_completion": instance.expected_completion(),
        "k": forest.k,
        "m": forest.m,
        "policy_hash": forest.policy_hash.to_string(),
        "rewards": rewards,
        "seq_adv": group.seq_adv,
        "mu": group.mu,
        "sigma": group.sigma,
        "trees": trees,
    }))
}

fn plot(metrics: &[PathBuf], out: &Path, y: &str, x: &str) -> Result<(), CliError> {
    let mut series = Vec::new();
    for path in metrics {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        let mut points = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: serde_json::Value = serde_json::from_str(line).map_err(|e| {
                CliError::config(format!("{}:{}: not JSON: {e}", path.display(), lineno + 1))
            })?;
            let field = |name: &str| -> Result<f64, CliError> {
                record.get(name).and_then(|v| v.as_f64()).ok_or_else(|| {
                    let valid: Vec<String> = record
                        .as_object()
                        .map(|o| o.keys().cloned().collect())
                        .unwrap_or_default();
                    CliError::config(format!(
                        "unknown field '{name}'; valid fields: {}",
                        valid.join(", ")
                    ))
                })
            };
            points.push((field(x)?, field(y)?));
        }
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        series.push(Series { label, points });
    }
    let svg = render_line_chart(&series, x, y);
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(out, svg)?;
    std::fs::write(out.with_extension("csv"), points_csv(&series))?;
    Ok(())
}
