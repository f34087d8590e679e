//! Shape servoing with a diminishing-rigidity Jacobian: each gripper moves
//! the rope points as a rigid body would, attenuated by `exp(-k d)` where
//! `d` is the arc length from the point to the grasped end.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{clip_action, wrap_angle, Action, GripperPose, Shape, Vec2, Workspace, ACTION_DIM};

#[derive(Debug, Error, PartialEq)]
pub enum ServoError {
    #[error("shape sizes differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("normal matrix is singular even with damping")]
    DegenerateGeometry,
    #[error("invalid servo configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServoConfig {
    /// Rigidity decay per metre of rope.
    pub k: f64,
    /// 1/s
    pub servo_gain: f64,
    pub dls_damping: f64,
    /// Largest gripper translation per control tick, m.
    pub max_step: f64,
    /// Largest gripper rotation per control tick, rad.
    pub max_rotation_step: f64,
    /// Control period, s.
    pub tick: f64,
}

impl Default for ServoConfig {
    fn default() -> Self {
        Self {
            k: 1.0,
            servo_gain: 1.0,
            dls_damping: 1e-3,
            max_step: 0.05,
            max_rotation_step: 0.2,
            tick: 0.5,
        }
    }
}

impl ServoConfig {
    pub fn validate(&self) -> Result<(), ServoError> {
        let ok = self.k >= 0.0
            && self.dls_damping > 0.0
            && self.max_step > 0.0
            && self.max_rotation_step > 0.0
            && self.tick > 0.0
            && self.servo_gain.is_finite();
        if ok {
            Ok(())
        } else {
            Err(ServoError::Config(format!("{self:?}")))
        }
    }
}

fn perp(v: Vec2) -> Vec2 {
    Vec2::new(-v.y, v.x)
}

/// `2N x 6` Jacobian, rows `(x_i, y_i)` per point, columns in action order
/// `[p_l.x, p_l.y, p_r.x, p_r.y, o_l, o_r]`.
pub fn dr_jacobian(shape: &Shape, left: &GripperPose, right: &GripperPose, k: f64) -> DMatrix<f64> {
    let n = shape.len();
    let arc = shape.arc_lengths();
    let total = arc.last().copied().unwrap_or(0.0);
    let mut j = DMatrix::zeros(2 * n, ACTION_DIM);
    for (i, q) in shape.points().iter().enumerate() {
        let grippers = [(left, arc[i], 0usize, 4usize), (right, total - arc[i], 2, 5)];
        for (g, d, tcol, rcol) in grippers {
            let w = (-k * d).exp();
            j[(2 * i, tcol)] = w;
            j[(2 * i + 1, tcol + 1)] = w;
            let lever = w * perp(q - g.p);
            j[(2 * i, rcol)] = lever.x;
            j[(2 * i + 1, rcol)] = lever.y;
        }
    }
    j
}

/// Damped least-squares velocity `(J^T J + mu I)^-1 J^T e_dot` in action order.
pub fn dls_velocity(j: &DMatrix<f64>, rate: &DVector<f64>, damping: f64) -> Result<DVector<f64>, ServoError> {
    let jt = j.transpose();
    let normal = &jt * j + DMatrix::identity(j.ncols(), j.ncols()) * damping;
    let chol = normal.cholesky().ok_or(ServoError::DegenerateGeometry)?;
    let v = chol.solve(&(jt * rate));
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(ServoError::DegenerateGeometry)
    }
}

/// One servo tick: absolute gripper targets that move the shape toward `goal`.
pub fn servo_step(
    current: &Shape,
    goal: &Shape,
    left: &GripperPose,
    right: &GripperPose,
    config: &ServoConfig,
    workspace: &Workspace,
) -> Result<Action, ServoError> {
    if current.len() != goal.len() {
        return Err(ServoError::DimensionMismatch(current.len(), goal.len()));
    }
    config.validate()?;
    let err = DVector::from_iterator(
        2 * goal.len(),
        goal.flatten().into_iter().zip(current.flatten()).map(|(g, c)| g - c),
    );
    let j = dr_jacobian(current, left, right, config.k);
    let v = dls_velocity(&j, &(err * config.servo_gain), config.dls_damping)?;
    let step = v * config.tick;

    let advance = |pose: &GripperPose, dp: Vec2, dth: f64| {
        let n = dp.norm();
        let dp = if n > config.max_step { dp * (config.max_step / n) } else { dp };
        let dth = dth.clamp(-config.max_rotation_step, config.max_rotation_step);
        GripperPose {
            p: pose.p + dp,
            o: wrap_angle(pose.o + dth),
        }
    };
    let action = Action {
        left: advance(left, Vec2::new(step[0], step[1]), step[4]),
        right: advance(right, Vec2::new(step[2], step[3]), step[5]),
    };
    Ok(clip_action(&action, workspace))
}
