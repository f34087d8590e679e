//! Closed-loop evaluation on a fixed sequence of goal shapes, parameter
//! sweeps and result files.
//!
//! Goals are produced by driving the simulator through scripted gripper
//! motions from the straight initial state, so every goal is reachable. The
//! runner is queried every 25 control ticks (2 Hz at 50 Hz) and each goal
//! gets 250 ticks.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{relabel, DataError, Dataset, RelabelMode, MAX_SEPARATION_FRACTION};
use crate::learn::{train, LearnError, PolicyParams, TrainConfig};
use crate::mdp::{clip_action, reward, Action, GripperPose, Observation, Shape, Workspace, N_POINTS};
use crate::motion::{DualArmController, MotionError, MotionParams, PdGains};
use crate::servo::{servo_step, ServoConfig, ServoError};
use crate::sim::{MaterialParams, SimConfig, SimError, SimState, Simulator};

pub const GOAL_COUNT: usize = 8;
pub const GOAL_BUDGET: f64 = 5.0;
pub const QUERY_RATE: f64 = 2.0;
pub const CONTROL_RATE: f64 = 50.0;
pub const TICKS_PER_QUERY: usize = (CONTROL_RATE / QUERY_RATE) as usize;
pub const TICKS_PER_GOAL: usize = (CONTROL_RATE * GOAL_BUDGET) as usize;
/// Where the rope starts and tracking is initialised.
pub const START_LINE_X: f64 = 0.5;
/// Bulge magnitude separating straight goals from curved ones.
pub const STRAIGHT_BULGE: f64 = 0.02;
const SCRIPT_SETTLE_TOLERANCE: f64 = 1e-3;
const SCRIPT_PHASE_TIMEOUT: f64 = 12.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Servo(#[from] ServoError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("runner returned a non-finite action")]
    NonFiniteAction,
    #[error("goal generation: {0}")]
    Generation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {msg}")]
    Output { path: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeTag {
    Straight,
    Convex,
    Concave,
}

impl ShapeTag {
    pub fn name(self) -> &'static str {
        match self {
            ShapeTag::Straight => "straight",
            ShapeTag::Convex => "convex",
            ShapeTag::Concave => "concave",
        }
    }
}

/// A goal shape with the gripper poses that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub shape: Shape,
    pub tag: ShapeTag,
    pub left: GripperPose,
    pub right: GripperPose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalSequence {
    pub goals: Vec<Goal>,
    /// Seconds per goal.
    pub budget: f64,
    pub seed: u64,
    pub material: String,
}

impl GoalSequence {
    pub fn tags(&self) -> Vec<ShapeTag> {
        self.goals.iter().map(|g| g.tag).collect()
    }

    /// `(straight, convex, concave)` counts.
    pub fn composition(&self) -> (usize, usize, usize) {
        let count = |t| self.goals.iter().filter(|g| g.tag == t).count();
        (count(ShapeTag::Straight), count(ShapeTag::Convex), count(ShapeTag::Concave))
    }

    /// Indices of goals whose predecessor has the opposite curvature.
    pub fn inversions(&self) -> Vec<usize> {
        (1..self.goals.len())
            .filter(|&i| {
                matches!(
                    (self.goals[i - 1].tag, self.goals[i].tag),
                    (ShapeTag::Convex, ShapeTag::Concave) | (ShapeTag::Concave, ShapeTag::Convex)
                )
            })
            .collect()
    }

    /// Same goals in a seeded random order.
    pub fn shuffled(&self, seed: u64) -> Self {
        let mut out = self.clone();
        out.goals.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        out
    }
}

struct Script<'a> {
    sim: &'a Simulator,
    state: SimState,
    ctrl: DualArmController,
}

impl Script<'_> {
    fn drive(&mut self, left: GripperPose, right: GripperPose) -> Result<(), EvalError> {
        let ws = self.sim.workspace;
        let action = clip_action(&Action { left, right }, &ws);
        self.ctrl.set_target(&self.state, &action, &ws)?;
        let limit = self.state.time + SCRIPT_PHASE_TIMEOUT;
        while !self.ctrl.settled(&self.state, SCRIPT_SETTLE_TOLERANCE) && self.state.time < limit {
            self.ctrl.tick(self.sim, &mut self.state)?;
        }
        // Let the rope come to rest after the grippers stop.
        for _ in 0..(CONTROL_RATE as usize / 2) {
            self.ctrl.tick(self.sim, &mut self.state)?;
        }
        Ok(())
    }

    fn record(&self, tag: ShapeTag) -> Result<Goal, EvalError> {
        let shape = self.sim.resample_shape(&self.state, N_POINTS)?;
        let bulge = shape.bulge();
        let consistent = match tag {
            ShapeTag::Straight => bulge.abs() < STRAIGHT_BULGE,
            ShapeTag::Convex => bulge > STRAIGHT_BULGE,
            ShapeTag::Concave => bulge < -STRAIGHT_BULGE,
        };
        if !consistent {
            return Err(EvalError::Generation(format!("{} goal has bulge {bulge:.4}", tag.name())));
        }
        let sep = (self.state.left.p - self.state.right.p).norm();
        if sep > MAX_SEPARATION_FRACTION * self.sim.material.rest_length + 1e-9 {
            return Err(EvalError::Generation(format!("goal endpoint separation {sep:.4}")));
        }
        Ok(Goal {
            shape,
            tag,
            left: self.state.left,
            right: self.state.right,
        })
    }
}

fn sim_config(seed: u64) -> SimConfig {
    SimConfig {
        rng_seed: seed,
        ..SimConfig::at_rate(CONTROL_RATE)
    }
}

/// Eight goals `straight, convex, concave, convex, concave, straight, convex,
/// concave`, each scripted from the state the previous one left behind.
/// Every convex/concave switch is a curvature inversion.
pub fn make_goal_sequence(material: &MaterialParams, seed: u64) -> Result<GoalSequence, EvalError> {
    let sim = Simulator::new(sim_config(seed), material.clone(), Workspace::default())?;
    let state = sim.init_straight(START_LINE_X)?;
    let ctrl = DualArmController::new(&state, MotionParams::default(), PdGains::default());
    let mut s = Script { sim: &sim, state, ctrl };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ws = sim.workspace;
    let half_taut = 0.5 * material.rest_length;
    let half_goal = 0.5 * MAX_SEPARATION_FRACTION * material.rest_length;
    let pose = GripperPose::new;
    let mut goals = Vec::with_capacity(GOAL_COUNT);

    let straight = |s: &mut Script, rng: &mut ChaCha8Rng| -> Result<Goal, EvalError> {
        let x = rng.gen_range(0.44..0.56);
        s.drive(pose(x, half_taut, 0.0), pose(x, -half_taut, 0.0))?;
        s.drive(pose(x, half_goal, 0.0), pose(x, -half_goal, 0.0))?;
        s.record(ShapeTag::Straight)
    };
    let convex = |s: &mut Script, rng: &mut ChaCha8Rng| -> Result<Goal, EvalError> {
        let x = rng.gen_range(0.33..0.38);
        let y = rng.gen_range(0.16..0.20);
        let o = rng.gen_range(0.4..0.7);
        s.drive(pose(x, y, o), pose(x, -y, -o))?;
        s.record(ShapeTag::Convex)
    };
    // Straighten at one x limit, turn the ends and sweep across.
    let invert = |s: &mut Script, rng: &mut ChaCha8Rng, to_concave: bool| -> Result<Goal, EvalError> {
        let (x_edge, sign) = if to_concave {
            (ws.x.min + rng.gen_range(0.0..0.02), -1.0)
        } else {
            (ws.x.max - rng.gen_range(0.0..0.02), 1.0)
        };
        let o = rng.gen_range(0.6..0.75);
        let x_far = x_edge - sign * rng.gen_range(0.18..0.22);
        let y = rng.gen_range(0.15..0.19);
        s.drive(pose(x_edge, half_goal, 0.0), pose(x_edge, -half_goal, 0.0))?;
        s.drive(pose(x_edge, half_goal, sign * o), pose(x_edge, -half_goal, -sign * o))?;
        s.drive(pose(x_far, y, sign * o), pose(x_far, -y, -sign * o))?;
        s.record(if to_concave { ShapeTag::Concave } else { ShapeTag::Convex })
    };

    goals.push(straight(&mut s, &mut rng)?);
    goals.push(convex(&mut s, &mut rng)?);
    goals.push(invert(&mut s, &mut rng, true)?);
    goals.push(invert(&mut s, &mut rng, false)?);
    goals.push(invert(&mut s, &mut rng, true)?);
    goals.push(straight(&mut s, &mut rng)?);
    goals.push(convex(&mut s, &mut rng)?);
    goals.push(invert(&mut s, &mut rng, true)?);
    Ok(GoalSequence {
        goals,
        budget: GOAL_BUDGET,
        seed,
        material: material.name.clone(),
    })
}

/// Something that picks gripper targets. Runners only read their inputs.
pub trait Runner {
    fn identity(&self) -> String;
    fn act(&mut self, goal: &Goal, obs: &Observation) -> Result<Action, EvalError>;
}

pub struct PolicyRunner<'a> {
    pub policy: &'a PolicyParams,
    pub name: String,
}

impl Runner for PolicyRunner<'_> {
    fn identity(&self) -> String {
        self.name.clone()
    }

    fn act(&mut self, goal: &Goal, obs: &Observation) -> Result<Action, EvalError> {
        Ok(self.policy.act(&goal.shape, obs)?)
    }
}

/// Diminishing-rigidity shape servoing.
pub struct BaselineRunner {
    pub config: ServoConfig,
    pub workspace: Workspace,
}

impl Runner for BaselineRunner {
    fn identity(&self) -> String {
        format!("baseline k={}", self.config.k)
    }

    fn act(&mut self, goal: &Goal, obs: &Observation) -> Result<Action, EvalError> {
        Ok(servo_step(&obs.shape, &goal.shape, &obs.left, &obs.right, &self.config, &self.workspace)?)
    }
}

/// Sends the grippers straight to the poses recorded with each goal.
pub struct OracleRunner;

impl Runner for OracleRunner {
    fn identity(&self) -> String {
        "oracle".into()
    }

    fn act(&mut self, goal: &Goal, _obs: &Observation) -> Result<Action, EvalError> {
        Ok(Action {
            left: goal.left,
            right: goal.right,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeResult {
    pub tag: ShapeTag,
    pub goal: Shape,
    pub final_shape: Shape,
    pub rmse_final: f64,
    /// RMSE at the end of every query period.
    pub series: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub runner: String,
    pub ratio: Option<usize>,
    pub alpha: Option<f64>,
    pub seed: u64,
    pub material: String,
    pub shapes: Vec<ShapeResult>,
    pub stats: Option<Stats>,
    /// Why the run stopped early, if it did.
    pub aborted: Option<String>,
}

impl EvalReport {
    pub fn finals(&self) -> Vec<f64> {
        self.shapes.iter().map(|s| s.rmse_final).collect()
    }

    pub fn mean(&self) -> f64 {
        self.stats.as_ref().map_or(f64::NAN, |s| s.mean)
    }
}

/// Run `runner` through `sequence` from a straight rope at `START_LINE_X`.
/// A runner failure ends the run and returns what was measured so far.
pub fn run_eval<R: Runner + ?Sized>(
    runner: &mut R,
    sequence: &GoalSequence,
    material: &MaterialParams,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    let sim = Simulator::new(sim_config(seed), material.clone(), Workspace::default())?;
    let ws = sim.workspace;
    let mut state = sim.init_straight(START_LINE_X)?;
    let mut ctrl = DualArmController::new(&state, MotionParams::default(), PdGains::default());
    let mut report = EvalReport {
        runner: runner.identity(),
        ratio: None,
        alpha: None,
        seed,
        material: material.name.clone(),
        shapes: Vec::with_capacity(sequence.goals.len()),
        stats: None,
        aborted: None,
    };
    let ticks = (sequence.budget * CONTROL_RATE).round() as usize;
    'goals: for goal in &sequence.goals {
        let mut series = Vec::with_capacity(ticks / TICKS_PER_QUERY);
        let mut shape = sim.resample_shape(&state, N_POINTS)?;
        for tick in 0..ticks {
            if tick % TICKS_PER_QUERY == 0 {
                let obs = Observation {
                    shape: shape.clone(),
                    left: state.left,
                    right: state.right,
                };
                let action = match runner.act(goal, &obs) {
                    Ok(a) if a.is_finite() => a,
                    Ok(_) => {
                        report.aborted = Some(EvalError::NonFiniteAction.to_string());
                        break 'goals;
                    }
                    Err(e) => {
                        report.aborted = Some(e.to_string());
                        break 'goals;
                    }
                };
                ctrl.set_target(&state, &clip_action(&action, &ws), &ws)?;
            }
            ctrl.tick(&sim, &mut state)?;
            if (tick + 1) % TICKS_PER_QUERY == 0 || tick + 1 == ticks {
                shape = sim.resample_shape(&state, N_POINTS)?;
                series.push(-reward(&goal.shape, &shape).expect("shapes share a size"));
            }
        }
        report.shapes.push(ShapeResult {
            tag: goal.tag,
            goal: goal.shape.clone(),
            final_shape: shape,
            rmse_final: *series.last().unwrap_or(&f64::NAN),
            series,
        });
    }
    report.stats = Stats::of(&report.finals());
    Ok(report)
}

/// Worker count for sweeps: `DLOCTL_THREADS` if set, otherwise the core count.
pub fn sweep_threads() -> usize {
    std::env::var("DLOCTL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Run `jobs` on at most `threads` workers, keeping results in job order.
fn parallel_map<T: Sync, U: Send>(jobs: &[T], threads: usize, f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let next = Mutex::new(0usize);
    let results: Mutex<Vec<Option<U>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = {
                    let mut n = next.lock().unwrap();
                    let i = *n;
                    *n += 1;
                    i
                };
                if i >= jobs.len() {
                    break;
                }
                let out = f(&jobs[i]);
                results.lock().unwrap()[i] = Some(out);
            });
        }
    });
    results.into_inner().unwrap().into_iter().map(|r| r.unwrap()).collect()
}

/// Shared settings for training-and-evaluation sweeps.
#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub train: TrainConfig,
    pub relabel_seed: u64,
    pub eval_seed: u64,
    pub material: MaterialParams,
    pub threads: usize,
}

fn train_and_eval(
    data: &Dataset,
    cfg: &TrainConfig,
    sequence: &GoalSequence,
    sweep: &SweepConfig,
    name: String,
) -> Result<EvalReport, EvalError> {
    let policy = train(data, cfg)?;
    let mut runner = PolicyRunner { policy: &policy, name };
    run_eval(&mut runner, sequence, &sweep.material, sweep.eval_seed)
}

/// One policy per ratio on intra-relabelled copies of `base`, all evaluated on `sequence`.
pub fn sweep_augmentation(
    base: &Dataset,
    ratios: &[usize],
    sequence: &GoalSequence,
    sweep: &SweepConfig,
) -> Result<Vec<EvalReport>, EvalError> {
    let results = parallel_map(ratios, sweep.threads, |&ratio| -> Result<EvalReport, EvalError> {
        let data = relabel(base, RelabelMode::Intra, ratio, sweep.relabel_seed)?;
        let mut report = train_and_eval(&data, &sweep.train, sequence, sweep, format!("policy ratio={ratio}"))?;
        report.ratio = Some(ratio);
        report.alpha = Some(sweep.train.alpha);
        Ok(report)
    });
    results.into_iter().collect()
}

/// One policy per alpha on an 8x intra-relabelled copy of `base`.
pub fn sweep_alpha(
    base: &Dataset,
    alphas: &[f64],
    sequence: &GoalSequence,
    sweep: &SweepConfig,
) -> Result<Vec<EvalReport>, EvalError> {
    let data = relabel(base, RelabelMode::Intra, 8, sweep.relabel_seed)?;
    let results = parallel_map(alphas, sweep.threads, |&alpha| -> Result<EvalReport, EvalError> {
        let cfg = TrainConfig { alpha, ..sweep.train.clone() };
        let mut report = train_and_eval(&data, &cfg, sequence, sweep, format!("policy alpha={alpha}"))?;
        report.ratio = Some(8);
        report.alpha = Some(alpha);
        Ok(report)
    });
    results.into_iter().collect()
}

/// The alpha that performed best in the original experiments; marked in summaries.
pub const HIGHLIGHT_ALPHA: f64 = 3.0;

fn output_err(path: &Path) -> impl Fn(String) -> EvalError + '_ {
    move |msg| EvalError::Output {
        path: path.display().to_string(),
        msg,
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// `metrics.csv`, `summary.csv` and eight goal-versus-final overlays per report.
pub fn emit_artifacts(reports: &[EvalReport], out_dir: &Path) -> Result<(), EvalError> {
    let err = output_err(out_dir);
    fs::create_dir_all(out_dir).map_err(|e| err(e.to_string()))?;

    let mpath = out_dir.join("metrics.csv");
    let mut w = csv::Writer::from_path(&mpath).map_err(|e| err(e.to_string()))?;
    w.write_record(["runner", "ratio", "alpha", "shape_idx", "tag", "rmse_final"])
        .map_err(|e| err(e.to_string()))?;
    for r in reports {
        for (i, s) in r.shapes.iter().enumerate() {
            w.write_record([
                r.runner.clone(),
                opt(r.ratio),
                opt(r.alpha),
                i.to_string(),
                s.tag.name().to_string(),
                s.rmse_final.to_string(),
            ])
            .map_err(|e| err(e.to_string()))?;
        }
    }
    w.flush().map_err(|e| err(e.to_string()))?;

    let spath = out_dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&spath).map_err(|e| err(e.to_string()))?;
    w.write_record(["runner", "ratio", "alpha", "seed", "mean", "std", "min", "max", "highlight"])
        .map_err(|e| err(e.to_string()))?;
    for r in reports {
        let s = r.stats.clone();
        let highlight = r.alpha == Some(HIGHLIGHT_ALPHA) && r.runner.contains("alpha=");
        w.write_record([
            r.runner.clone(),
            opt(r.ratio),
            opt(r.alpha),
            r.seed.to_string(),
            opt(s.as_ref().map(|s| s.mean)),
            opt(s.as_ref().map(|s| s.std)),
            opt(s.as_ref().map(|s| s.min)),
            opt(s.as_ref().map(|s| s.max)),
            if highlight { "default".into() } else { String::new() },
        ])
        .map_err(|e| err(e.to_string()))?;
    }
    w.flush().map_err(|e| err(e.to_string()))?;

    for (ri, r) in reports.iter().enumerate() {
        for (si, s) in r.shapes.iter().enumerate() {
            let path = out_dir.join(format!("overlay_{ri:02}_{si}.svg"));
            let title = format!("{} shape {si} ({}) rmse {:.4} m", r.runner, s.tag.name(), s.rmse_final);
            fs::write(&path, overlay_svg(&s.goal, &s.final_shape, &title)).map_err(|e| err(e.to_string()))?;
        }
    }
    Ok(())
}

/// Goal (dashed) and final shape over the workspace, +x pointing up.
pub fn overlay_svg(goal: &Shape, final_shape: &Shape, title: &str) -> String {
    let ws = Workspace::default();
    let scale = 800.0;
    let (x_lo, x_hi) = (ws.x.min - 0.15, ws.x.max + 0.1);
    let (y_lo, y_hi) = (ws.y_right.min - 0.05, ws.y_left.max + 0.05);
    let width = (y_hi - y_lo) * scale;
    let height = (x_hi - x_lo) * scale;
    let to_px = |p: &crate::mdp::Vec2| ((y_hi - p.y) * scale, (x_hi - p.x) * scale);
    let polyline = |s: &Shape| {
        s.points()
            .iter()
            .map(|p| {
                let (u, v) = to_px(p);
                format!("{u:.1},{v:.1}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<polyline points="{}" fill="none" stroke="seagreen" stroke-width="4" stroke-dasharray="10 6"/>"#,
        polyline(goal)
    );
    let _ = writeln!(
        svg,
        r#"<polyline points="{}" fill="none" stroke="crimson" stroke-width="3"/>"#,
        polyline(final_shape)
    );
    let _ = writeln!(
        svg,
        r#"<text x="10" y="24" font-family="sans-serif" font-size="16">{}</text>"#,
        title.replace('&', "&amp;").replace('<', "&lt;")
    );
    svg.push_str("</svg>\n");
    svg
}
