//! Point-to-point task-space motion: cubic trajectories with a
//! distance-dependent timing law, PD velocity tracking, and a dual-arm
//! controller that replans from the live pose and velocity whenever a new
//! target arrives.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{wrap_angle, Action, GripperPose, Side, Vec2, Workspace};
use crate::sim::{GripperCommand, SimError, SimState, Simulator};

#[derive(Debug, Error, PartialEq)]
pub enum MotionError {
    #[error("{side:?} target outside the workspace")]
    TargetOutOfBounds { side: Side },
}

/// Planar twist: linear velocity (m/s) and angular velocity (rad/s).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist {
    pub v: Vec2,
    pub w: f64,
}

impl Twist {
    pub fn zero() -> Self {
        Self::default()
    }
}

/// Timing law: `duration = clamp(max(|dp| / nominal_speed, |do| / nominal_angular_speed), min, max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionParams {
    pub nominal_speed: f64,
    pub nominal_angular_speed: f64,
    pub min_duration: f64,
    pub max_duration: f64,
}

impl Default for MotionParams {
    fn default() -> Self {
        Self {
            nominal_speed: 0.1,
            nominal_angular_speed: 0.5,
            min_duration: 0.5,
            max_duration: 10.0,
        }
    }
}

impl MotionParams {
    pub fn duration(&self, from: &GripperPose, to: &GripperPose) -> f64 {
        let lin = (to.p - from.p).norm() / self.nominal_speed;
        let ang = wrap_angle(to.o - from.o).abs() / self.nominal_angular_speed;
        lin.max(ang).clamp(self.min_duration, self.max_duration)
    }
}

/// Cubic in time per coordinate, from a pose and velocity to a pose at rest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CubicTrajectory {
    pub start_pose: GripperPose,
    pub start_velocity: Twist,
    pub end_pose: GripperPose,
    pub duration: f64,
    pub start_time: f64,
}

impl CubicTrajectory {
    /// A trajectory that stays at `pose`.
    pub fn hold(pose: GripperPose, now: f64, params: &MotionParams) -> Self {
        Self {
            start_pose: pose,
            start_velocity: Twist::zero(),
            end_pose: pose,
            duration: params.min_duration,
            start_time: now,
        }
    }

    pub fn end_time(&self) -> f64 {
        self.start_time + self.duration
    }

    /// Pose and twist at time `t`; past the end the target at rest.
    pub fn sample(&self, t: f64) -> (GripperPose, Twist) {
        let tau = t - self.start_time;
        if tau >= self.duration {
            return (self.end_pose, Twist::zero());
        }
        let tau = tau.max(0.0);
        let big_t = self.duration;
        let cubic = |q0: f64, v0: f64, delta: f64| {
            let a2 = (3.0 * delta - 2.0 * v0 * big_t) / (big_t * big_t);
            let a3 = (-2.0 * delta + v0 * big_t) / (big_t * big_t * big_t);
            let q = q0 + v0 * tau + a2 * tau * tau + a3 * tau * tau * tau;
            let dq = v0 + 2.0 * a2 * tau + 3.0 * a3 * tau * tau;
            (q, dq)
        };
        let d = self.end_pose.p - self.start_pose.p;
        let (x, vx) = cubic(self.start_pose.p.x, self.start_velocity.v.x, d.x);
        let (y, vy) = cubic(self.start_pose.p.y, self.start_velocity.v.y, d.y);
        let dth = wrap_angle(self.end_pose.o - self.start_pose.o);
        let (th, w) = cubic(0.0, self.start_velocity.w, dth);
        (
            GripperPose {
                p: Vec2::new(x, y),
                o: wrap_angle(self.start_pose.o + th),
            },
            Twist { v: Vec2::new(vx, vy), w },
        )
    }
}

/// Plan a motion from the live pose and velocity toward `target`.
pub fn plan(
    side: Side,
    current: &GripperPose,
    velocity: &Twist,
    target: &GripperPose,
    now: f64,
    params: &MotionParams,
    workspace: &Workspace,
) -> Result<CubicTrajectory, MotionError> {
    if !workspace.contains(side, target) {
        return Err(MotionError::TargetOutOfBounds { side });
    }
    Ok(CubicTrajectory {
        start_pose: *current,
        start_velocity: *velocity,
        end_pose: *target,
        duration: params.duration(current, target),
        start_time: now,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdGains {
    /// 1/s
    pub kp: f64,
    /// Feed-forward gain on the desired velocity.
    pub kd: f64,
    pub max_speed: f64,
    pub max_angular_speed: f64,
}

impl Default for PdGains {
    fn default() -> Self {
        Self {
            kp: 10.0,
            kd: 1.0,
            max_speed: 0.5,
            max_angular_speed: 3.0,
        }
    }
}

pub fn pd_track(desired: &GripperPose, desired_velocity: &Twist, actual: &GripperPose, gains: &PdGains) -> Twist {
    let mut v = gains.kd * desired_velocity.v + gains.kp * (desired.p - actual.p);
    let speed = v.norm();
    if speed > gains.max_speed {
        v *= gains.max_speed / speed;
    }
    let w = gains.kd * desired_velocity.w + gains.kp * wrap_angle(desired.o - actual.o);
    let w = w.clamp(-gains.max_angular_speed, gains.max_angular_speed);
    Twist { v, w }
}

/// Trajectory generation plus PD tracking for both grippers.
#[derive(Debug, Clone)]
pub struct DualArmController {
    pub params: MotionParams,
    pub gains: PdGains,
    trajectories: [CubicTrajectory; 2],
    twists: [Twist; 2],
}

fn idx(side: Side) -> usize {
    match side {
        Side::Left => 0,
        Side::Right => 1,
    }
}

impl DualArmController {
    pub fn new(state: &SimState, params: MotionParams, gains: PdGains) -> Self {
        Self {
            trajectories: [
                CubicTrajectory::hold(state.left, state.time, &params),
                CubicTrajectory::hold(state.right, state.time, &params),
            ],
            twists: [Twist::zero(); 2],
            params,
            gains,
        }
    }

    pub fn target(&self) -> Action {
        Action {
            left: self.trajectories[0].end_pose,
            right: self.trajectories[1].end_pose,
        }
    }

    pub fn trajectory(&self, side: Side) -> &CubicTrajectory {
        &self.trajectories[idx(side)]
    }

    pub fn twist(&self, side: Side) -> Twist {
        self.twists[idx(side)]
    }

    /// Replan toward `action` for every gripper whose target changed.
    pub fn set_target(&mut self, state: &SimState, action: &Action, workspace: &Workspace) -> Result<(), MotionError> {
        for (side, target) in [(Side::Left, action.left), (Side::Right, action.right)] {
            let i = idx(side);
            let old = self.trajectories[i].end_pose;
            if old == target {
                continue;
            }
            self.trajectories[i] = plan(
                side,
                &state.gripper(side),
                &self.twists[i],
                &target,
                state.time,
                &self.params,
                workspace,
            )?;
        }
        Ok(())
    }

    /// One control tick: sample, track, integrate the grippers and step the simulator.
    pub fn tick(&mut self, sim: &Simulator, state: &mut SimState) -> Result<(), SimError> {
        let dt = sim.config.dt();
        let mut cmds = [GripperCommand::hold(state.left); 2];
        for side in [Side::Left, Side::Right] {
            let i = idx(side);
            let actual = state.gripper(side);
            let (pd, vd) = self.trajectories[i].sample(state.time);
            let tw = pd_track(&pd, &vd, &actual, &self.gains);
            let next = GripperPose {
                p: actual.p + tw.v * dt,
                o: wrap_angle(actual.o + tw.w * dt),
            };
            let next = sim.workspace.clip_pose(side, &next);
            self.twists[i] = Twist {
                v: (next.p - actual.p) / dt,
                w: wrap_angle(next.o - actual.o) / dt,
            };
            cmds[i] = GripperCommand {
                pose: next,
                velocity: self.twists[i].v,
                angular_velocity: self.twists[i].w,
            };
        }
        sim.step(state, &cmds[0], &cmds[1])
    }

    /// True once both trajectories have ended and the grippers are within
    /// `tol` (m, and rad) of their targets.
    pub fn settled(&self, state: &SimState, tol: f64) -> bool {
        [Side::Left, Side::Right].iter().all(|&side| {
            let tr = &self.trajectories[idx(side)];
            let pose = state.gripper(side);
            state.time >= tr.end_time()
                && (pose.p - tr.end_pose.p).norm() <= tol
                && wrap_angle(pose.o - tr.end_pose.o).abs() <= tol
        })
    }
}
