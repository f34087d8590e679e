//! Randomised data collection against the simulator, hindsight goal
//! relabelling, train/test splitting and the on-disk dataset format.
//!
//! A dataset directory holds `manifest.json` and `episodes.jsonl`, one
//! episode per line. Floats are written with 17 significant digits so a
//! reload is bit-exact.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonfmt;
use crate::mdp::{reward, Action, GripperPose, MdpError, Observation, Shape, Side, Vec2, Workspace, N_POINTS};
use crate::motion::{DualArmController, MotionError, MotionParams, PdGains};
use crate::sim::{MaterialParams, SimConfig, SimError, SimState, Simulator};

pub const FORMAT_VERSION: u32 = 1;
/// Simulator rate during collection; a multiple of the record rate.
pub const COLLECT_SIM_RATE: f64 = 100.0;
pub const RECORD_RATE: f64 = 20.0;
pub const STORAGE_RATE: f64 = 10.0;
/// Commanded gripper separation must stay below this fraction of the rope length.
pub const MAX_SEPARATION_FRACTION: f64 = 0.95;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error("{0}")]
    Config(String),
    #[error("relabel mode {0:?} needs at least two episodes")]
    ModeInfeasible(RelabelMode),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {file} (line {line}): {msg}")]
    Format { file: String, line: usize, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One stored sample: what was seen, what was commanded, how close it was to the goal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "StepRecord", try_from = "StepRecord")]
pub struct Step {
    pub time: f64,
    pub observation: Observation,
    pub action: Action,
    pub reward: f64,
}

#[derive(Serialize, Deserialize)]
struct StepRecord {
    t: f64,
    shape: Shape,
    p_l: [f64; 2],
    p_r: [f64; 2],
    o_l: f64,
    o_r: f64,
    action: [f64; 6],
    reward: f64,
}

impl From<Step> for StepRecord {
    fn from(s: Step) -> Self {
        let obs = s.observation;
        Self {
            t: s.time,
            p_l: [obs.left.p.x, obs.left.p.y],
            p_r: [obs.right.p.x, obs.right.p.y],
            o_l: obs.left.o,
            o_r: obs.right.o,
            shape: obs.shape,
            action: s.action.to_array(),
            reward: s.reward,
        }
    }
}

impl TryFrom<StepRecord> for Step {
    type Error = String;

    fn try_from(r: StepRecord) -> Result<Self, String> {
        if r.shape.len() != N_POINTS {
            return Err(format!("shape has {} points, expected {N_POINTS}", r.shape.len()));
        }
        Ok(Self {
            time: r.t,
            observation: Observation {
                shape: r.shape,
                left: GripperPose {
                    p: Vec2::new(r.p_l[0], r.p_l[1]),
                    o: r.o_l,
                },
                right: GripperPose {
                    p: Vec2::new(r.p_r[0], r.p_r[1]),
                    o: r.o_r,
                },
            },
            action: Action::from_array(&r.action),
            reward: r.reward,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub goal: Shape,
    pub steps: Vec<Step>,
    pub material: String,
    pub seed: u64,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.steps.len().saturating_sub(1) as f64 / STORAGE_RATE
    }

    /// Recompute every reward against the stored goal.
    pub fn recompute_rewards(&mut self) -> Result<(), MdpError> {
        for s in &mut self.steps {
            s.reward = reward(&self.goal, &s.observation.shape)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelabelMode {
    Intra,
    Inter,
    Mixed,
}

impl std::str::FromStr for RelabelMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "intra" => Ok(Self::Intra),
            "inter" => Ok(Self::Inter),
            "mixed" => Ok(Self::Mixed),
            other => Err(format!("unknown relabel mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub mode: RelabelMode,
    pub ratio: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub collection: u64,
    /// Per-episode seeds in storage order.
    pub episodes: Vec<u64>,
    /// Episodes dropped because the simulation diverged.
    pub discarded: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub simulation_hz: f64,
    pub record_hz: f64,
    pub storage_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub material: MaterialParams,
    pub seeds: Seeds,
    pub rates: Rates,
    pub workspace: Workspace,
    pub motion: MotionParams,
    pub episode_count: usize,
    pub augmentation: Option<Augmentation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn transition_count(&self) -> usize {
        self.episodes.iter().map(|e| e.len().saturating_sub(1)).sum()
    }

    pub fn mean_duration(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes.iter().map(Episode::duration).sum::<f64>() / self.episodes.len() as f64
    }

    fn with_episodes(&self, episodes: Vec<Episode>) -> Self {
        let mut manifest = self.manifest.clone();
        manifest.episode_count = episodes.len();
        manifest.seeds.episodes = episodes.iter().map(|e| e.seed).collect();
        Self { manifest, episodes }
    }

    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mpath = dir.join("manifest.json");
        let json = jsonfmt::to_pretty(&self.manifest).expect("manifest serialises");
        fs::write(&mpath, json + "\n").map_err(io_err(&mpath))?;
        let epath = dir.join("episodes.jsonl");
        let file = fs::File::create(&epath).map_err(io_err(&epath))?;
        let mut w = BufWriter::new(file);
        for ep in &self.episodes {
            let line = jsonfmt::to_line(ep).expect("episode serialises");
            writeln!(w, "{line}").map_err(io_err(&epath))?;
        }
        w.flush().map_err(io_err(&epath))
    }

    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let mpath = dir.join("manifest.json");
        let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| DataError::Format {
            file: mpath.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        if manifest.version != FORMAT_VERSION {
            return Err(DataError::Format {
                file: mpath.display().to_string(),
                line: 0,
                msg: format!("unsupported version {}", manifest.version),
            });
        }
        let epath = dir.join("episodes.jsonl");
        let file = fs::File::open(&epath).map_err(io_err(&epath))?;
        let mut episodes = Vec::with_capacity(manifest.episode_count);
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(&epath))?;
            if line.trim().is_empty() {
                continue;
            }
            let ep: Episode = serde_json::from_str(&line).map_err(|e| DataError::Format {
                file: epath.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            episodes.push(ep);
        }
        if episodes.len() != manifest.episode_count {
            return Err(DataError::Format {
                file: epath.display().to_string(),
                line: 0,
                msg: format!("{} episodes, manifest says {}", episodes.len(), manifest.episode_count),
            });
        }
        Ok(Self { manifest, episodes })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CommandKind {
    Left,
    Right,
    Both,
    Inversion,
}

/// A command for one episode: targets executed one after another.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionCommand {
    pub kind: CommandKind,
    pub waypoints: Vec<Action>,
}

/// Draws random episode commands inside the workspace.
#[derive(Debug, Clone)]
pub struct CommandSampler {
    pub workspace: Workspace,
    pub rest_length: f64,
    /// Probabilities of moving the left, right or both grippers; the remainder
    /// runs the curvature inversion sequence.
    pub p_left: f64,
    pub p_right: f64,
    pub p_both: f64,
}

const MAX_DRAWS: usize = 10_000;

impl CommandSampler {
    pub fn new(workspace: Workspace, rest_length: f64) -> Self {
        Self {
            workspace,
            rest_length,
            p_left: 0.3,
            p_right: 0.3,
            p_both: 0.3,
        }
    }

    pub fn max_separation(&self) -> f64 {
        MAX_SEPARATION_FRACTION * self.rest_length
    }

    /// Targets that would not overstretch the rope.
    pub fn admissible(&self, left: &GripperPose, right: &GripperPose) -> bool {
        (left.p - right.p).norm() < self.max_separation()
    }

    fn random_pose<R: Rng>(&self, rng: &mut R, side: Side) -> GripperPose {
        let ws = &self.workspace;
        let y = ws.y(side);
        GripperPose::new(
            rng.gen_range(ws.x.min..=ws.x.max),
            rng.gen_range(y.min..=y.max),
            rng.gen_range(ws.theta.min..=ws.theta.max),
        )
    }

    /// `bulge` is the signed curvature of the current shape (see
    /// [`Shape::bulge`]); the inversion sequence drives it to the other sign.
    pub fn sample<R: Rng>(&self, rng: &mut R, left: &GripperPose, right: &GripperPose, bulge: f64) -> MotionCommand {
        let u: f64 = rng.gen();
        let kind = if u < self.p_left {
            CommandKind::Left
        } else if u < self.p_left + self.p_right {
            CommandKind::Right
        } else if u < self.p_left + self.p_right + self.p_both {
            CommandKind::Both
        } else {
            CommandKind::Inversion
        };
        let waypoints = match kind {
            CommandKind::Inversion => self.inversion(rng, bulge),
            _ => vec![self.single_target(rng, kind, left, right)],
        };
        MotionCommand { kind, waypoints }
    }

    fn single_target<R: Rng>(&self, rng: &mut R, kind: CommandKind, left: &GripperPose, right: &GripperPose) -> Action {
        for _ in 0..MAX_DRAWS {
            let l = match kind {
                CommandKind::Left | CommandKind::Both => self.random_pose(rng, Side::Left),
                _ => *left,
            };
            let r = match kind {
                CommandKind::Right | CommandKind::Both => self.random_pose(rng, Side::Right),
                _ => *right,
            };
            if self.admissible(&l, &r) {
                return Action { left: l, right: r };
            }
        }
        // Unreachable for any workspace whose y ranges are closer than the
        // admissible separation; hold still rather than overstretch.
        Action {
            left: *left,
            right: *right,
        }
    }

    /// Straighten the rope against one x bound with the grippers spread,
    /// turn the grippers to the extreme angles of the opposite curvature,
    /// then sweep across the workspace so the middle trails behind the ends.
    fn inversion<R: Rng>(&self, rng: &mut R, bulge: f64) -> Vec<Action> {
        let ws = &self.workspace;
        // A rope bulging toward +x is straightened at x_min and dragged
        // toward +x, which leaves the middle behind: the bulge flips.
        let toward_min = bulge >= 0.0;
        let edge = rng.gen_range(0.0..0.03);
        let pull_x = if toward_min { ws.x.min + edge } else { ws.x.max - edge };
        let spread = (0.5 * self.max_separation() - 0.005).min(ws.y_left.max).min(-ws.y_right.min);
        let spread = rng.gen_range(0.9 * spread..=spread);
        let sign = if toward_min { -1.0 } else { 1.0 };
        let angle = |rng: &mut R| sign * ws.theta.max * rng.gen_range(0.8..=1.0);

        let pulled = Action {
            left: GripperPose::new(pull_x, spread, 0.0),
            right: GripperPose::new(pull_x, -spread, 0.0),
        };
        let (al, ar) = (angle(rng), -angle(rng));
        let turned = Action {
            left: GripperPose::new(pull_x, spread, al),
            right: GripperPose::new(pull_x, -spread, ar),
        };
        let mid = ws.x.mid();
        let far_x = |rng: &mut R| {
            if toward_min {
                rng.gen_range(mid..=ws.x.max)
            } else {
                rng.gen_range(ws.x.min..=mid)
            }
        };
        let (yl, yr) = (ws.y_left, ws.y_right);
        let final_pose = Action {
            left: GripperPose::new(far_x(rng), rng.gen_range(yl.min..=yl.mid()), angle(rng)),
            right: GripperPose::new(far_x(rng), rng.gen_range(yr.mid()..=yr.max), -angle(rng)),
        };
        vec![pulled, turned, final_pose]
    }
}

#[derive(Debug, Clone)]
pub struct CollectConfig {
    pub episodes: usize,
    pub seed: u64,
    pub material: MaterialParams,
    pub workspace: Workspace,
    pub motion: MotionParams,
    pub gains: PdGains,
    /// Initial rope line.
    pub x_line: f64,
    /// Gripper pose tolerance (m and rad) that ends a motion.
    pub settle_tolerance: f64,
    /// Extra time allowed beyond a trajectory's planned end.
    pub settle_timeout: f64,
}

impl CollectConfig {
    pub fn new(episodes: usize, seed: u64, material: MaterialParams) -> Self {
        Self {
            episodes,
            seed,
            material,
            workspace: Workspace::default(),
            motion: collection_motion(),
            gains: PdGains::default(),
            x_line: 0.5,
            settle_tolerance: 1e-3,
            settle_timeout: 2.0,
        }
    }
}

/// Slow point-to-point motions used while collecting, so that episodes last
/// several seconds as on the real robot.
pub fn collection_motion() -> MotionParams {
    MotionParams {
        nominal_speed: 0.02,
        nominal_angular_speed: 0.1,
        min_duration: 0.5,
        max_duration: 20.0,
    }
}

struct Record {
    observation: Observation,
    action: Action,
}

fn observe(sim: &Simulator, state: &SimState) -> Result<Observation, SimError> {
    Ok(Observation {
        shape: sim.resample_shape(state, N_POINTS)?,
        left: state.left,
        right: state.right,
    })
}

fn run_episode(
    sim: &Simulator,
    sampler: &CommandSampler,
    cfg: &CollectConfig,
    state: &mut SimState,
    ctl: &mut DualArmController,
    seed: u64,
) -> Result<Episode, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bulge = sim.resample_shape(state, N_POINTS)?.bulge();
    let cmd = sampler.sample(&mut rng, &state.left, &state.right, bulge);
    let ticks_per_record = (COLLECT_SIM_RATE / RECORD_RATE).round() as usize;

    let mut records = vec![Record {
        observation: observe(sim, state)?,
        action: cmd.waypoints[0],
    }];
    for (w, target) in cmd.waypoints.iter().enumerate() {
        ctl.set_target(state, target, &cfg.workspace)?;
        let deadline = [Side::Left, Side::Right]
            .iter()
            .map(|&s| ctl.trajectory(s).end_time())
            .fold(state.time, f64::max)
            + cfg.settle_timeout;
        loop {
            for _ in 0..ticks_per_record {
                ctl.tick(sim, state)?;
            }
            records.push(Record {
                observation: observe(sim, state)?,
                action: *target,
            });
            if ctl.settled(state, cfg.settle_tolerance) || state.time >= deadline {
                break;
            }
        }
        if let Some(next) = cmd.waypoints.get(w + 1) {
            records.last_mut().expect("non-empty").action = *next;
        }
    }
    // The stored stream keeps every second record from the first, so an odd
    // count makes the final state part of the episode.
    if records.len() % 2 == 0 {
        for _ in 0..ticks_per_record {
            ctl.tick(sim, state)?;
        }
        let action = records.last().expect("non-empty").action;
        records.push(Record {
            observation: observe(sim, state)?,
            action,
        });
    }

    let stride = (RECORD_RATE / STORAGE_RATE).round() as usize;
    let goal = records.last().expect("non-empty").observation.shape.clone();
    let mut steps = Vec::with_capacity(records.len() / stride + 1);
    for (k, rec) in records.into_iter().step_by(stride).enumerate() {
        steps.push(Step {
            time: k as f64 / STORAGE_RATE,
            reward: reward(&goal, &rec.observation.shape)?,
            observation: rec.observation,
            action: rec.action,
        });
    }
    Ok(Episode {
        goal,
        steps,
        material: cfg.material.name.clone(),
        seed,
    })
}

/// Continuous collection: each episode starts where the previous one ended.
/// Episodes whose simulation diverges are logged, recorded in the manifest
/// and replaced; the rope is then reset to the initial straight line.
pub fn collect(cfg: &CollectConfig) -> Result<Dataset, DataError> {
    if cfg.episodes == 0 {
        return Err(DataError::Config("at least one episode is required".into()));
    }
    let sim = Simulator::new(SimConfig::at_rate(COLLECT_SIM_RATE), cfg.material.clone(), cfg.workspace)?;
    let sampler = CommandSampler::new(cfg.workspace, cfg.material.rest_length);
    let mut state = sim.init_straight(cfg.x_line)?;
    let mut ctl = DualArmController::new(&state, cfg.motion, cfg.gains);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut episodes = Vec::with_capacity(cfg.episodes);
    let mut discarded = Vec::new();
    while episodes.len() < cfg.episodes {
        let seed: u64 = rng.gen();
        match run_episode(&sim, &sampler, cfg, &mut state, &mut ctl, seed) {
            Ok(ep) => episodes.push(ep),
            Err(DataError::Sim(err @ SimError::Diverged { .. })) => {
                warn!("episode seed {seed} discarded: {err}");
                discarded.push(seed);
                if discarded.len() > cfg.episodes {
                    return Err(DataError::Config("too many diverged episodes".into()));
                }
                state = sim.init_straight(cfg.x_line)?;
                ctl = DualArmController::new(&state, cfg.motion, cfg.gains);
            }
            Err(e) => return Err(e),
        }
        if episodes.len() % 100 == 0 && !episodes.is_empty() {
            info!("collected {} / {} episodes", episodes.len(), cfg.episodes);
        }
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        material: cfg.material.clone(),
        seeds: Seeds {
            collection: cfg.seed,
            episodes: episodes.iter().map(|e| e.seed).collect(),
            discarded,
        },
        rates: Rates {
            simulation_hz: COLLECT_SIM_RATE,
            record_hz: RECORD_RATE,
            storage_hz: STORAGE_RATE,
        },
        workspace: cfg.workspace,
        motion: cfg.motion,
        episode_count: episodes.len(),
        augmentation: None,
    };
    Ok(Dataset { manifest, episodes })
}

/// Episodes `from..=to` joined into one, dropping the terminal step of each
/// but the last (it repeats the next episode's first observation) and
/// retiming at the storage rate.
fn concatenate(episodes: &[Episode]) -> Vec<Step> {
    let mut steps = Vec::new();
    for (i, ep) in episodes.iter().enumerate() {
        let keep = if i + 1 < episodes.len() { ep.len().saturating_sub(1) } else { ep.len() };
        steps.extend(ep.steps[..keep].iter().cloned());
    }
    for (k, s) in steps.iter_mut().enumerate() {
        s.time = k as f64 / STORAGE_RATE;
    }
    steps
}

/// Index of the goal step: uniform over the steps after the first.
fn later_index<R: Rng>(rng: &mut R, len: usize) -> usize {
    if len < 2 {
        0
    } else {
        rng.gen_range(1..len)
    }
}

/// Whether episode `b` starts where episode `a` ended.
fn contiguous(a: &Episode, b: &Episode) -> bool {
    match (a.steps.last(), b.steps.first()) {
        (Some(x), Some(y)) => x.observation == y.observation,
        _ => false,
    }
}

const MAX_SOURCES: usize = 3;

fn relabel_one<R: Rng>(rng: &mut R, episodes: &[Episode], i: usize, mode: RelabelMode) -> Result<Episode, MdpError> {
    let src = &episodes[i];
    let mut ep = match mode {
        RelabelMode::Intra => {
            let k = later_index(rng, src.len());
            Episode {
                goal: src.steps[k].observation.shape.clone(),
                steps: src.steps[..=k].to_vec(),
                material: src.material.clone(),
                seed: src.seed,
            }
        }
        RelabelMode::Inter | RelabelMode::Mixed => {
            // Window of consecutive episodes starting at i (or just before
            // it for the last episode), up to MAX_SOURCES long.
            let start = if i + 1 < episodes.len() { i } else { i - 1 };
            let mut last = start;
            while last + 1 < episodes.len()
                && last + 1 - start < MAX_SOURCES
                && contiguous(&episodes[last], &episodes[last + 1])
            {
                last += 1;
            }
            let end = if last > start { rng.gen_range(start + 1..=last) } else { start };
            let mut steps = concatenate(&episodes[start..=end]);
            let goal = match mode {
                RelabelMode::Inter => episodes[end].goal.clone(),
                _ => {
                    let target = &episodes[end];
                    let k = later_index(rng, target.len());
                    let offset = steps.len() - target.len();
                    steps.truncate(offset + k + 1);
                    target.steps[k].observation.shape.clone()
                }
            };
            Episode {
                goal,
                steps,
                material: src.material.clone(),
                seed: src.seed,
            }
        }
    };
    ep.recompute_rewards()?;
    Ok(ep)
}

/// Hindsight relabelling: the originals followed by `ratio - 1` synthetic
/// copies of the dataset with substituted goals and recomputed rewards.
pub fn relabel(dataset: &Dataset, mode: RelabelMode, ratio: usize, seed: u64) -> Result<Dataset, DataError> {
    if ratio == 0 {
        return Err(DataError::Config("augmentation ratio must be at least 1".into()));
    }
    if dataset.is_empty() {
        return Err(DataError::Config("cannot relabel an empty dataset".into()));
    }
    if ratio == 1 {
        return Ok(dataset.clone());
    }
    if mode != RelabelMode::Intra && dataset.len() < 2 {
        return Err(DataError::ModeInfeasible(mode));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dataset.len();
    let mut episodes = Vec::with_capacity(ratio * n);
    episodes.extend(dataset.episodes.iter().cloned());
    for _ in 1..ratio {
        for i in 0..n {
            episodes.push(relabel_one(&mut rng, &dataset.episodes, i, mode)?);
        }
    }
    let mut out = dataset.with_episodes(episodes);
    out.manifest.augmentation = Some(Augmentation { mode, ratio, seed });
    Ok(out)
}

/// The last `n_test` episodes (in collection order) form the test set.
pub fn split(dataset: &Dataset, n_test: usize) -> Result<(Dataset, Dataset), DataError> {
    if n_test >= dataset.len() && n_test > 0 {
        return Err(DataError::Config(format!(
            "cannot hold out {n_test} of {} episodes",
            dataset.len()
        )));
    }
    let cut = dataset.len() - n_test;
    let train = dataset.with_episodes(dataset.episodes[..cut].to_vec());
    let test = dataset.with_episodes(dataset.episodes[cut..].to_vec());
    Ok((train, test))
}
