//! Planar rope simulator: an XPBD particle chain pinned at both ends by two
//! kinematic, oriented grippers and lying on a table with friction.
//!
//! Each step interpolates the grippers toward their commanded poses over a
//! fixed number of substeps. A substep predicts node positions from damped
//! velocities, then projects bending, end-orientation and stretch
//! constraints. Afterwards table friction is applied: nodes slower than the
//! static threshold are returned to where they started the substep, the rest
//! keep a damped velocity. A final stretch-only projection lets tension drag
//! statically held nodes, so a rope that is pulled always follows while a
//! rope that merely wants to relax its bending can stay put.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{wrap_angle, GripperPose, Shape, Side, Vec2, Workspace};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("simulation diverged at t = {time:.3} s")]
    Diverged { time: f64 },
    #[error("{side:?} gripper command outside the allowed workspace")]
    CommandOutOfBounds { side: Side },
    #[error("cannot resample {requested} points from a {nodes}-node chain")]
    Resample { requested: usize, nodes: usize },
}

/// Physical parameters of the rope or cord.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialParams {
    pub name: String,
    pub node_count: usize,
    /// Total length, m.
    pub rest_length: f64,
    /// m; only used for drawing.
    pub diameter: f64,
    /// Per-substep pull of each node toward its neighbours' midpoint, in [0, 1].
    pub bend_stiffness: f64,
    /// XPBD compliance of the segment length constraints.
    pub stretch_compliance: f64,
    /// Nodes slower than this (m/s) are held by static friction.
    pub static_friction_threshold: f64,
    /// Fraction of velocity removed per substep while sliding, in [0, 1].
    pub kinetic_damping: f64,
    /// kg
    pub node_mass: f64,
}

impl MaterialParams {
    /// Soft rope: barely resists bending, friction holds whatever shape it is left in.
    pub fn soft() -> Self {
        Self {
            name: "soft".into(),
            node_count: 30,
            rest_length: 0.55,
            diameter: 0.01,
            bend_stiffness: 0.02,
            stretch_compliance: 0.0,
            static_friction_threshold: 0.02,
            kinetic_damping: 0.5,
            node_mass: 0.002,
        }
    }

    /// Elastic cord in an inextensible sleeve: springs back toward its
    /// minimum-bending shape.
    pub fn elastic() -> Self {
        Self {
            name: "elastic".into(),
            node_count: 30,
            rest_length: 0.55,
            diameter: 0.01,
            bend_stiffness: 0.6,
            stretch_compliance: 0.0,
            static_friction_threshold: 0.005,
            kinetic_damping: 0.3,
            node_mass: 0.004,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "soft" => Some(Self::soft()),
            "elastic" => Some(Self::elastic()),
            _ => None,
        }
    }

    pub fn segment_length(&self) -> f64 {
        self.rest_length / (self.node_count - 1) as f64
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(format!("material {}: {m}", self.name)));
        if self.node_count < 2 {
            return bad("node_count must be at least 2");
        }
        if !(self.rest_length > 0.0) {
            return bad("rest_length must be positive");
        }
        if !(0.0..=1.0).contains(&self.bend_stiffness) {
            return bad("bend_stiffness outside [0, 1]");
        }
        if !(self.stretch_compliance >= 0.0) {
            return bad("stretch_compliance must be non-negative");
        }
        if !(self.static_friction_threshold >= 0.0) {
            return bad("static_friction_threshold must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.kinetic_damping) {
            return bad("kinetic_damping outside [0, 1]");
        }
        if !(self.node_mass > 0.0) {
            return bad("node_mass must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Hz
    pub step_rate: f64,
    pub substeps_per_step: usize,
    pub constraint_iterations: usize,
    pub rng_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            step_rate: 50.0,
            substeps_per_step: 4,
            constraint_iterations: 20,
            rng_seed: 0,
        }
    }
}

impl SimConfig {
    /// Same substep length as the default, stepped at `rate`.
    pub fn at_rate(rate: f64) -> Self {
        let base = Self::default();
        let substeps = ((base.substeps_per_step as f64 * base.step_rate / rate).round() as usize).max(1);
        Self {
            step_rate: rate,
            substeps_per_step: substeps,
            ..base
        }
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.step_rate
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.step_rate > 0.0) {
            return Err(SimError::Config("step_rate must be positive".into()));
        }
        if self.substeps_per_step == 0 || self.constraint_iterations == 0 {
            return Err(SimError::Config("substeps and iterations must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub nodes: Vec<Vec2>,
    pub velocities: Vec<Vec2>,
    pub left: GripperPose,
    pub right: GripperPose,
    pub time: f64,
}

impl SimState {
    pub fn max_strain(&self, segment_length: f64) -> f64 {
        self.nodes
            .windows(2)
            .map(|w| ((w[1] - w[0]).norm() / segment_length - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn polyline_length(&self) -> f64 {
        self.nodes.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
    }

    pub fn kinetic_energy(&self, node_mass: f64) -> f64 {
        0.5 * node_mass * self.velocities.iter().map(|v| v.norm_squared()).sum::<f64>()
    }

    pub fn gripper(&self, side: Side) -> GripperPose {
        match side {
            Side::Left => self.left,
            Side::Right => self.right,
        }
    }
}

/// Commanded gripper motion for one step: the pose to reach at the end of
/// the step and the twist that produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GripperCommand {
    pub pose: GripperPose,
    pub velocity: Vec2,
    pub angular_velocity: f64,
}

impl GripperCommand {
    pub fn hold(pose: GripperPose) -> Self {
        Self {
            pose,
            velocity: Vec2::zeros(),
            angular_velocity: 0.0,
        }
    }
}

const DIVERGENCE_LIMIT: f64 = 10.0;
const COMMAND_MARGIN: f64 = 0.1;
const POST_SWEEP_LIMIT: usize = 2000;
const STRETCH_TOLERANCE: f64 = 1e-3;
const BUCKLE_SEED: f64 = 1e-3;

/// Direction in which the rope leaves a gripper with orientation `o`.
/// At zero orientation the left gripper points toward -y and the right
/// toward +y, i.e. at each other along a rope laid on a line of constant x.
pub fn clamp_direction(side: Side, o: f64) -> Vec2 {
    let (s, c) = o.sin_cos();
    match side {
        Side::Left => Vec2::new(s, -c),
        Side::Right => Vec2::new(-s, c),
    }
}

#[derive(Debug, Clone)]
pub struct Simulator {
    pub config: SimConfig,
    pub material: MaterialParams,
    pub workspace: Workspace,
    segment: f64,
}

impl Simulator {
    pub fn new(config: SimConfig, material: MaterialParams, workspace: Workspace) -> Result<Self, SimError> {
        config.validate()?;
        material.validate()?;
        if !workspace.is_valid() {
            return Err(SimError::Config("workspace ranges are empty or overlap".into()));
        }
        let segment = material.segment_length();
        Ok(Self {
            config,
            material,
            workspace,
            segment,
        })
    }

    pub fn segment_length(&self) -> f64 {
        self.segment
    }

    /// Rope stretched along the line `x = x_line`, left gripper at +y.
    pub fn init_straight(&self, x_line: f64) -> Result<SimState, SimError> {
        if !self.workspace.x.contains(x_line) {
            return Err(SimError::Config(format!("x_line {x_line} outside workspace")));
        }
        let m = self.material.node_count;
        let half = 0.5 * self.material.rest_length;
        let nodes: Vec<Vec2> = (0..m)
            .map(|i| Vec2::new(x_line, half - i as f64 * self.segment))
            .collect();
        Ok(SimState {
            left: GripperPose::new(x_line, half, 0.0),
            right: GripperPose::new(x_line, -half, 0.0),
            velocities: vec![Vec2::zeros(); m],
            nodes,
            time: 0.0,
        })
    }

    /// Advance one step of `1 / step_rate` seconds.
    pub fn step(&self, state: &mut SimState, left: &GripperCommand, right: &GripperCommand) -> Result<(), SimError> {
        let bounds = self.workspace.inflated(COMMAND_MARGIN);
        for (side, cmd) in [(Side::Left, left), (Side::Right, right)] {
            let finite = cmd.pose.p.iter().all(|v| v.is_finite()) && cmd.pose.o.is_finite();
            if !finite || !bounds.contains(side, &cmd.pose) {
                return Err(SimError::CommandOutOfBounds { side });
            }
        }

        let substeps = self.config.substeps_per_step;
        let h = self.config.dt() / substeps as f64;
        let (l0, r0) = (state.left, state.right);
        let mut scratch = Scratch::new(state.nodes.len());
        let step_index = (state.time * self.config.step_rate).round() as u64;
        for s in 1..=substeps {
            let frac = s as f64 / substeps as f64;
            let lp = lerp_pose(&l0, &left.pose, frac);
            let rp = lerp_pose(&r0, &right.pose, frac);
            scratch.salt = step_index.wrapping_mul(substeps as u64).wrapping_add(s as u64);
            self.substep(state, &lp, &rp, h, &mut scratch);
        }
        state.left = left.pose;
        state.right = right.pose;
        state.time += self.config.dt();

        let bad = state
            .nodes
            .iter()
            .flat_map(|p| [p.x, p.y])
            .any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT);
        if bad {
            return Err(SimError::Diverged { time: state.time });
        }
        Ok(())
    }

    fn substep(&self, st: &mut SimState, lp: &GripperPose, rp: &GripperPose, h: f64, sc: &mut Scratch) {
        let m = st.nodes.len();
        let mat = &self.material;
        sc.prev.copy_from_slice(&st.nodes);

        for i in 1..m - 1 {
            st.nodes[i] += st.velocities[i] * h;
        }
        st.nodes[0] = lp.p;
        st.nodes[m - 1] = rp.p;

        let iters = self.config.constraint_iterations;
        // Stiffness per iteration such that the per-substep effect is
        // independent of the iteration count.
        let k_bend = 1.0 - (1.0 - mat.bend_stiffness).powf(1.0 / iters as f64);
        sc.lambda.iter_mut().for_each(|l| *l = 0.0);
        for it in 0..iters {
            if k_bend > 0.0 {
                for i in 1..m - 1 {
                    let mid = 0.5 * (st.nodes[i - 1] + st.nodes[i + 1]);
                    let cur = st.nodes[i];
                    st.nodes[i] = cur + k_bend * (mid - cur);
                }
            }
            self.project_clamps(&mut st.nodes, lp, rp);
            self.project_stretch(&mut st.nodes, &mut sc.lambda, h, it % 2 == 1);
        }

        let inv_h = 1.0 / h;
        let damp = 1.0 - mat.kinetic_damping;
        for i in 1..m - 1 {
            let v = (st.nodes[i] - sc.prev[i]) * inv_h;
            if v.norm() < mat.static_friction_threshold {
                st.nodes[i] = sc.prev[i];
                st.velocities[i] = Vec2::zeros();
            } else {
                st.velocities[i] = v * damp;
            }
        }
        st.velocities[0] = Vec2::zeros();
        st.velocities[m - 1] = Vec2::zeros();

        // Sweep until the chain is inextensible again; a long, nearly taut
        // chain can need far more sweeps than the fixed iteration count.
        sc.lambda.iter_mut().for_each(|l| *l = 0.0);
        let tol = STRETCH_TOLERANCE * self.segment;
        for it in 0..POST_SWEEP_LIMIT.max(iters) {
            self.project_clamps(&mut st.nodes, lp, rp);
            self.project_stretch(&mut st.nodes, &mut sc.lambda, h, it % 2 == 1);
            if it + 1 >= iters && self.stretch_residual(&st.nodes) < tol {
                break;
            }
            if it + 1 == 2 * iters {
                self.seed_buckling(&mut st.nodes, sc.salt);
            }
        }
        st.nodes[0] = lp.p;
        st.nodes[m - 1] = rp.p;
    }

    /// A compressed, perfectly straight chain cannot leave its line under
    /// length projections alone. Nudge the free nodes sideways by a tiny,
    /// seeded amount so that it buckles as a real rope would.
    fn seed_buckling(&self, nodes: &mut [Vec2], salt: u64) {
        let m = nodes.len();
        if m < 5 {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.rng_seed ^ salt.rotate_left(17));
        for i in 2..m - 2 {
            let d = nodes[i + 1] - nodes[i - 1];
            let n = d.norm();
            if n > 0.0 {
                let side = Vec2::new(-d.y, d.x) / n;
                nodes[i] += side * (BUCKLE_SEED * self.segment * rng.gen_range(-1.0..1.0));
            }
        }
    }

    /// Pins the end nodes and places the first interior node at each end one
    /// segment along the gripper's clamp direction.
    fn project_clamps(&self, nodes: &mut [Vec2], lp: &GripperPose, rp: &GripperPose) {
        let m = nodes.len();
        nodes[0] = lp.p;
        nodes[m - 1] = rp.p;
        if m >= 4 {
            nodes[1] = lp.p + self.segment * clamp_direction(Side::Left, lp.o);
            nodes[m - 2] = rp.p + self.segment * clamp_direction(Side::Right, rp.o);
        }
    }

    /// When the clamped nodes are at least the free chain's length apart the
    /// only admissible configuration is the straight line between them;
    /// iterative projection converges far too slowly there, so place the
    /// nodes directly (spreading any unavoidable strain evenly).
    fn straighten_if_taut(&self, nodes: &mut [Vec2]) -> bool {
        let m = nodes.len();
        if m < 5 {
            return false;
        }
        let (a, b) = (nodes[1], nodes[m - 2]);
        let span = (m - 3) as f64 * self.segment;
        if (b - a).norm() < span {
            return false;
        }
        for (k, node) in nodes.iter_mut().enumerate().take(m - 2).skip(2) {
            let t = (k - 1) as f64 / (m - 3) as f64;
            *node = a + t * (b - a);
        }
        true
    }

    fn project_stretch(&self, nodes: &mut [Vec2], lambda: &mut [f64], h: f64, reverse: bool) {
        if self.straighten_if_taut(nodes) {
            return;
        }
        let m = nodes.len();
        let w = 1.0 / self.material.node_mass;
        let alpha = self.material.stretch_compliance / (h * h);
        let inv_mass = |i: usize| if i == 0 || i == m - 1 { 0.0 } else { w };
        let mut relax = |j: usize, nodes: &mut [Vec2]| {
            let (wa, wb) = (inv_mass(j), inv_mass(j + 1));
            let denom = wa + wb + alpha;
            if denom == 0.0 {
                return;
            }
            let d = nodes[j + 1] - nodes[j];
            let len = d.norm();
            if len < 1e-12 {
                return;
            }
            let n = d / len;
            let c = len - self.segment;
            let dl = (-c - alpha * lambda[j]) / denom;
            lambda[j] += dl;
            nodes[j] -= wa * dl * n;
            nodes[j + 1] += wb * dl * n;
        };
        if reverse {
            for j in (0..m - 1).rev() {
                relax(j, nodes);
            }
        } else {
            for j in 0..m - 1 {
                relax(j, nodes);
            }
        }
    }

    fn stretch_residual(&self, nodes: &[Vec2]) -> f64 {
        nodes
            .windows(2)
            .map(|w| ((w[1] - w[0]).norm() - self.segment).abs())
            .fold(0.0, f64::max)
    }

    /// `n` points evenly spaced in arc length along the node chain.
    pub fn resample_shape(&self, state: &SimState, n: usize) -> Result<Shape, SimError> {
        resample_polyline(&state.nodes, n)
    }
}

pub fn resample_polyline(nodes: &[Vec2], n: usize) -> Result<Shape, SimError> {
    let m = nodes.len();
    if n < 2 || n > m {
        return Err(SimError::Resample { requested: n, nodes: m });
    }
    if n == m {
        return Ok(Shape::new(nodes.to_vec()).expect("finite nodes"));
    }
    let mut cum = Vec::with_capacity(m);
    cum.push(0.0);
    for w in nodes.windows(2) {
        cum.push(cum.last().unwrap() + (w[1] - w[0]).norm());
    }
    let total = cum[m - 1];
    let mut out = Vec::with_capacity(n);
    out.push(nodes[0]);
    let mut seg = 0;
    for k in 1..n - 1 {
        let s = total * k as f64 / (n - 1) as f64;
        while seg < m - 2 && cum[seg + 1] < s {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let t = if len > 0.0 { (s - cum[seg]) / len } else { 0.0 };
        out.push(nodes[seg] + t * (nodes[seg + 1] - nodes[seg]));
    }
    out.push(nodes[m - 1]);
    Shape::new(out).map_err(|_| SimError::Resample { requested: n, nodes: m })
}

fn lerp_pose(a: &GripperPose, b: &GripperPose, t: f64) -> GripperPose {
    GripperPose {
        p: a.p + t * (b.p - a.p),
        o: wrap_angle(a.o + t * wrap_angle(b.o - a.o)),
    }
}

struct Scratch {
    prev: Vec<Vec2>,
    lambda: Vec<f64>,
    salt: u64,
}

impl Scratch {
    fn new(m: usize) -> Self {
        Self {
            prev: vec![Vec2::zeros(); m],
            lambda: vec![0.0; m.saturating_sub(1)],
            salt: 0,
        }
    }
}
