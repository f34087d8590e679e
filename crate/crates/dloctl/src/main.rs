use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use dlo_core::data::{collect, relabel, CollectConfig, DataError, Dataset, RelabelMode};
use dlo_core::eval::{
    emit_artifacts, make_goal_sequence, run_eval, sweep_alpha, sweep_augmentation, sweep_threads, BaselineRunner,
    EvalError, EvalReport, GoalSequence, PolicyRunner, SweepConfig,
};
use dlo_core::jsonfmt;
use dlo_core::learn::{load_policy, save_policy, train_logged, LearnError, TrainConfig};
use dlo_core::mdp::Workspace;
use dlo_core::servo::{ServoConfig, ServoError};
use dlo_core::sim::{MaterialParams, SimError};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "dloctl", version, about = "Collect, augment, train and evaluate rope shape controllers")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Record random-command episodes in the simulator.
    Collect {
        #[arg(long)]
        episodes: usize,
        #[arg(long, default_value = "soft")]
        material: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Relabel goals to grow a dataset.
    Augment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "intra")]
        mode: RelabelMode,
        #[arg(long)]
        ratio: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a TD3+BC policy on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
        /// Policy file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a policy or the servoing baseline through the goal sequence.
    Eval {
        #[arg(long, conflicts_with = "baseline", required_unless_present = "baseline")]
        policy: Option<PathBuf>,
        /// Baseline settings, e.g. `k=1` or `k=1,gain=0.8`.
        #[arg(long)]
        baseline: Option<String>,
        /// Seeds the goal sequence and the evaluation simulator.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        goals: GoalArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate one policy per augmentation ratio.
    SweepAug {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,6,8")]
        ratios: Vec<usize>,
        #[command(flatten)]
        train: TrainArgs,
        /// Seeds the goal sequence and the evaluation simulator.
        #[arg(long, default_value_t = 0)]
        eval_seed: u64,
        #[command(flatten)]
        goals: GoalArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate one policy per BC weight on 8x augmented data.
    SweepAlpha {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1.0,2.5,3.0")]
        alphas: Vec<f64>,
        #[command(flatten)]
        train: TrainArgs,
        /// Seeds the goal sequence and the evaluation simulator.
        #[arg(long, default_value_t = 0)]
        eval_seed: u64,
        #[command(flatten)]
        goals: GoalArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the evaluation goal sequence.
    Goals {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "soft")]
        material: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 2.5)]
    alpha: f64,
    #[arg(long, default_value_t = 0.95)]
    gamma: f64,
    /// Update iterations.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Start from the single-core settings (narrower networks, 50,000 steps).
    #[arg(long)]
    desk: bool,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Learning rate for both actor and critics.
    #[arg(long)]
    lr: Option<f64>,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        let mut cfg = if self.desk { TrainConfig::desk() } else { TrainConfig::default() };
        cfg.alpha = self.alpha;
        cfg.gamma = self.gamma;
        cfg.seed = self.seed;
        if let Some(v) = self.steps {
            cfg.total_steps = v;
        }
        if let Some(v) = self.width {
            cfg.hidden_width = v;
        }
        if let Some(v) = self.layers {
            cfg.hidden_layers = v;
        }
        if let Some(v) = self.batch {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.actor_lr = v;
            cfg.critic_lr = v;
        }
        cfg
    }
}

#[derive(Args)]
struct GoalArgs {
    #[arg(long, default_value = "soft")]
    material: String,
    /// Read goals from a file written by `dloctl goals` instead of generating them.
    #[arg(long)]
    goals: Option<PathBuf>,
    /// Present the goals in a seeded random order.
    #[arg(long)]
    shuffle_goals: bool,
}

struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn config(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            msg: msg.into(),
        }
    }
}

fn sim_code(e: &SimError) -> u8 {
    match e {
        SimError::Diverged { .. } => EXIT_DIVERGED,
        SimError::Config(_) => EXIT_CONFIG,
        _ => EXIT_FAILURE,
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        let code = match &e {
            DataError::Sim(s) => sim_code(s),
            DataError::Config(_) | DataError::ModeInfeasible(_) | DataError::Format { .. } => EXIT_CONFIG,
            _ => EXIT_FAILURE,
        };
        Self { code, msg: e.to_string() }
    }
}

impl From<LearnError> for Failure {
    fn from(e: LearnError) -> Self {
        let code = match &e {
            LearnError::Diverged { .. } => EXIT_DIVERGED,
            LearnError::Io { .. } | LearnError::NonFinite => EXIT_FAILURE,
            _ => EXIT_CONFIG,
        };
        Self { code, msg: e.to_string() }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Data(d) => d.into(),
            EvalError::Learn(l) => l.into(),
            EvalError::Sim(ref s) => Self {
                code: sim_code(s),
                msg: e.to_string(),
            },
            EvalError::Config(_) | EvalError::Servo(ServoError::Config(_)) => Self::config(e.to_string()),
            EvalError::NonFiniteAction | EvalError::Generation(_) => Self {
                code: EXIT_DIVERGED,
                msg: e.to_string(),
            },
            _ => Self {
                code: EXIT_FAILURE,
                msg: e.to_string(),
            },
        }
    }
}

fn material(name: &str) -> Result<MaterialParams, Failure> {
    MaterialParams::preset(name).ok_or_else(|| Failure::config(format!("unknown material {name:?} (soft|elastic)")))
}

/// `k=1,gain=0.5,damping=1e-3,max_step=0.05`
fn parse_baseline(spec: &str) -> Result<ServoConfig, Failure> {
    let mut cfg = ServoConfig::default();
    for part in spec.split(',').filter(|p| !p.trim().is_empty()) {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| Failure::config(format!("baseline setting {part:?} is not key=value")))?;
        let v: f64 = value
            .trim()
            .parse()
            .map_err(|_| Failure::config(format!("baseline value {value:?} is not a number")))?;
        match key.trim() {
            "k" => cfg.k = v,
            "gain" => cfg.servo_gain = v,
            "damping" => cfg.dls_damping = v,
            "max_step" => cfg.max_step = v,
            "max_rotation_step" => cfg.max_rotation_step = v,
            other => return Err(Failure::config(format!("unknown baseline setting {other:?}"))),
        }
    }
    cfg.validate().map_err(|e| Failure::config(e.to_string()))?;
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    }
    let text = jsonfmt::to_pretty(value).map_err(|e| Failure {
        code: EXIT_FAILURE,
        msg: e.to_string(),
    })?;
    fs::write(path, text + "\n").map_err(|e| io_failure(path, e))
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: EXIT_FAILURE,
        msg: format!("{}: {e}", path.display()),
    }
}

fn goal_sequence(args: &GoalArgs, seed: u64, mat: &MaterialParams) -> Result<GoalSequence, Failure> {
    let seq = match &args.goals {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
            serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?
        }
        None => make_goal_sequence(mat, seed)?,
    };
    Ok(if args.shuffle_goals {
        seq.shuffled(seed)
    } else {
        seq
    })
}

fn finish_reports(reports: &[EvalReport], out: &Path) -> Result<(), Failure> {
    emit_artifacts(reports, out)?;
    write_json(&out.join("reports.json"), &reports)?;
    for r in reports {
        println!(
            "{:<24} mean {:.4} m  std {:.4}  range [{:.4}, {:.4}]",
            r.runner,
            r.mean(),
            r.stats.as_ref().map_or(f64::NAN, |s| s.std),
            r.stats.as_ref().map_or(f64::NAN, |s| s.min),
            r.stats.as_ref().map_or(f64::NAN, |s| s.max),
        );
    }
    if let Some(r) = reports.iter().find(|r| r.aborted.is_some()) {
        return Err(Failure {
            code: EXIT_DIVERGED,
            msg: format!("{} aborted: {}", r.runner, r.aborted.as_deref().unwrap_or("")),
        });
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Collect {
            episodes,
            material: name,
            seed,
            out,
        } => {
            let cfg = CollectConfig::new(episodes, seed, material(&name)?);
            let ds = collect(&cfg)?;
            ds.save(&out)?;
            println!(
                "{} episodes, {} transitions, mean duration {:.2} s -> {}",
                ds.len(),
                ds.transition_count(),
                ds.mean_duration(),
                out.display()
            );
        }
        Command::Augment {
            input,
            mode,
            ratio,
            seed,
            out,
        } => {
            let ds = Dataset::load(&input)?;
            let aug = relabel(&ds, mode, ratio, seed)?;
            aug.save(&out)?;
            println!("{} -> {} episodes -> {}", ds.len(), aug.len(), out.display());
        }
        Command::Train { data, train, out } => {
            let ds = Dataset::load(&data)?;
            let cfg = train.config();
            let (policy, log) = train_logged(&ds, &cfg)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
            }
            save_policy(&policy, &out)?;
            let mut log_path = out.clone().into_os_string();
            log_path.push(".log.json");
            write_json(Path::new(&log_path), &log)?;
            println!("{} steps -> {}", policy.steps_done, out.display());
        }
        Command::Eval {
            policy,
            baseline,
            seed,
            goals,
            out,
        } => {
            let mat = material(&goals.material)?;
            let seq = goal_sequence(&goals, seed, &mat)?;
            let report = match (policy, baseline) {
                (Some(path), _) => {
                    let params = load_policy(&path)?;
                    let mut runner = PolicyRunner {
                        policy: &params,
                        name: path.display().to_string(),
                    };
                    run_eval(&mut runner, &seq, &mat, seed)?
                }
                (None, Some(spec)) => {
                    let mut runner = BaselineRunner {
                        config: parse_baseline(&spec)?,
                        workspace: Workspace::default(),
                    };
                    run_eval(&mut runner, &seq, &mat, seed)?
                }
                (None, None) => return Err(Failure::config("either --policy or --baseline is required")),
            };
            finish_reports(&[report], &out)?;
        }
        Command::SweepAug {
            data,
            ratios,
            train,
            eval_seed,
            goals,
            out,
        } => {
            let ds = Dataset::load(&data)?;
            let mat = material(&goals.material)?;
            let seq = goal_sequence(&goals, eval_seed, &mat)?;
            let sweep = SweepConfig {
                train: train.config(),
                relabel_seed: train.seed,
                eval_seed,
                material: mat,
                threads: sweep_threads(),
            };
            info!("sweeping ratios {ratios:?} on {} threads", sweep.threads);
            let reports = sweep_augmentation(&ds, &ratios, &seq, &sweep)?;
            write_table(&out.join("sweep_aug.csv"), "ratio", &reports, |r| r.ratio.map(|v| v.to_string()))?;
            finish_reports(&reports, &out)?;
        }
        Command::SweepAlpha {
            data,
            alphas,
            train,
            eval_seed,
            goals,
            out,
        } => {
            let ds = Dataset::load(&data)?;
            let mat = material(&goals.material)?;
            let seq = goal_sequence(&goals, eval_seed, &mat)?;
            let sweep = SweepConfig {
                train: train.config(),
                relabel_seed: train.seed,
                eval_seed,
                material: mat,
                threads: sweep_threads(),
            };
            info!("sweeping alphas {alphas:?} on {} threads", sweep.threads);
            let reports = sweep_alpha(&ds, &alphas, &seq, &sweep)?;
            write_table(&out.join("sweep_alpha.csv"), "alpha", &reports, |r| r.alpha.map(|v| v.to_string()))?;
            finish_reports(&reports, &out)?;
        }
        Command::Goals {
            seed,
            material: name,
            out,
        } => {
            let seq = make_goal_sequence(&material(&name)?, seed)?;
            write_json(&out, &seq)?;
            let tags: Vec<&str> = seq.goals.iter().map(|g| g.tag.name()).collect();
            println!("{} -> {}", tags.join(" "), out.display());
        }
    }
    Ok(())
}

/// `(setting, shape_idx, rmse_final)` rows for a sweep.
fn write_table(
    path: &Path,
    setting: &str,
    reports: &[EvalReport],
    key: impl Fn(&EvalReport) -> Option<String>,
) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    }
    let csv_err = |e: csv::Error| Failure {
        code: EXIT_FAILURE,
        msg: format!("{}: {e}", path.display()),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record([setting, "shape_idx", "rmse_final"]).map_err(csv_err)?;
    for r in reports {
        let k = key(r).unwrap_or_default();
        for (i, s) in r.shapes.iter().enumerate() {
            w.write_record([k.clone(), i.to_string(), s.rmse_final.to_string()])
                .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| io_failure(path, e))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            warn!("exiting with code {}", f.code);
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
