//! Goal-conditioned MDP encodings: shapes, gripper poses, the 78-dim
//! actor/critic input and the RMSE shape reward.

use std::f64::consts::{FRAC_PI_4, PI};

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec2 = Vector2<f64>;

/// Number of tracked points in a shape.
pub const N_POINTS: usize = 18;
/// Length of `goal || state`.
pub const INPUT_DIM: usize = 4 * N_POINTS + 6;
pub const ACTION_DIM: usize = 6;

#[derive(Debug, Error, PartialEq)]
pub enum MdpError {
    #[error("shape dimension mismatch: {0} vs {1} points")]
    DimensionMismatch(usize, usize),
    #[error("shape contains a non-finite coordinate")]
    NonFinite,
    #[error("input vector has length {0}, expected {INPUT_DIM}")]
    BadInputLength(usize),
}

/// Ordered planar points along the object, in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct Shape {
    points: Vec<Vec2>,
}

impl Shape {
    pub fn new(points: Vec<Vec2>) -> Result<Self, MdpError> {
        if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(MdpError::NonFinite);
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Row-major flattening `x0, y0, x1, y1, ...`.
    pub fn flatten(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y]).collect()
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self, MdpError> {
        Self::new(flat.chunks_exact(2).map(|c| Vec2::new(c[0], c[1])).collect())
    }

    pub fn translated(&self, offset: Vec2) -> Self {
        Self {
            points: self.points.iter().map(|p| p + offset).collect(),
        }
    }

    /// Cumulative arc length at every point (first entry 0).
    pub fn arc_lengths(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(self.points.len());
        for (i, p) in self.points.iter().enumerate() {
            if i > 0 {
                acc += (p - self.points[i - 1]).norm();
            }
            out.push(acc);
        }
        out
    }

    /// Signed mean deviation of the interior points from the chord joining
    /// the endpoints, measured along the chord normal that points toward +x.
    /// Positive values bulge away from the robot base (convex), negative
    /// values toward it (concave).
    pub fn bulge(&self) -> f64 {
        let (a, b) = match (self.points.first(), self.points.last()) {
            (Some(a), Some(b)) if self.points.len() > 2 => (*a, *b),
            _ => return 0.0,
        };
        let chord = b - a;
        let len = chord.norm();
        if len < 1e-12 {
            return 0.0;
        }
        let mut normal = Vec2::new(-chord.y, chord.x) / len;
        if normal.x < 0.0 {
            normal = -normal;
        }
        let interior = &self.points[1..self.points.len() - 1];
        interior.iter().map(|p| (p - a).dot(&normal)).sum::<f64>() / interior.len() as f64
    }
}

impl TryFrom<Vec<[f64; 2]>> for Shape {
    type Error = MdpError;

    fn try_from(v: Vec<[f64; 2]>) -> Result<Self, Self::Error> {
        Self::new(v.into_iter().map(|[x, y]| Vec2::new(x, y)).collect())
    }
}

impl From<Shape> for Vec<[f64; 2]> {
    fn from(s: Shape) -> Self {
        s.points.iter().map(|p| [p.x, p.y]).collect()
    }
}

/// Wrap an angle to `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    if (-PI..PI).contains(&a) {
        return a;
    }
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Planar end-effector pose: position in meters, orientation about z in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GripperPose {
    pub p: Vec2,
    pub o: f64,
}

impl GripperPose {
    pub fn new(x: f64, y: f64, o: f64) -> Self {
        Self {
            p: Vec2::new(x, y),
            o: wrap_angle(o),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub shape: Shape,
    pub left: GripperPose,
    pub right: GripperPose,
}

/// Absolute desired poses for both grippers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub left: GripperPose,
    pub right: GripperPose,
}

impl Action {
    /// `[p_l.x, p_l.y, p_r.x, p_r.y, o_l, o_r]`
    pub fn to_array(&self) -> [f64; ACTION_DIM] {
        [
            self.left.p.x,
            self.left.p.y,
            self.right.p.x,
            self.right.p.y,
            self.left.o,
            self.right.o,
        ]
    }

    pub fn from_array(a: &[f64; ACTION_DIM]) -> Self {
        Self {
            left: GripperPose {
                p: Vec2::new(a[0], a[1]),
                o: a[4],
            },
            right: GripperPose {
                p: Vec2::new(a[2], a[3]),
                o: a[5],
            },
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Closed interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.min, self.max)
    }

    pub fn width(&self) -> f64 {
        self.max - self.min
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.min + self.max)
    }

    pub fn inflated(&self, fraction: f64) -> Self {
        let m = fraction * self.width();
        Self::new(self.min - m, self.max + m)
    }
}

/// Safe workspace of the two grippers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub x: Range,
    pub y_left: Range,
    pub y_right: Range,
    pub theta: Range,
}

impl Default for Workspace {
    fn default() -> Self {
        Self {
            x: Range::new(0.3, 0.6),
            y_left: Range::new(0.1, 0.3),
            y_right: Range::new(-0.3, -0.1),
            theta: Range::new(-FRAC_PI_4, FRAC_PI_4),
        }
    }
}

impl Workspace {
    pub fn is_valid(&self) -> bool {
        let ranges = [self.x, self.y_left, self.y_right, self.theta];
        ranges.iter().all(|r| r.min < r.max)
            && (self.y_left.min > self.y_right.max || self.y_right.min > self.y_left.max)
    }

    pub fn y(&self, side: Side) -> Range {
        match side {
            Side::Left => self.y_left,
            Side::Right => self.y_right,
        }
    }

    pub fn contains(&self, side: Side, pose: &GripperPose) -> bool {
        self.x.contains(pose.p.x) && self.y(side).contains(pose.p.y) && self.theta.contains(pose.o)
    }

    pub fn clip_pose(&self, side: Side, pose: &GripperPose) -> GripperPose {
        GripperPose {
            p: Vec2::new(self.x.clamp(pose.p.x), self.y(side).clamp(pose.p.y)),
            o: self.theta.clamp(pose.o),
        }
    }

    /// Every range widened by `fraction` of its width on both sides.
    pub fn inflated(&self, fraction: f64) -> Self {
        Self {
            x: self.x.inflated(fraction),
            y_left: self.y_left.inflated(fraction),
            y_right: self.y_right.inflated(fraction),
            theta: self.theta.inflated(fraction),
        }
    }

    /// Per-component action ranges in `Action::to_array` order.
    pub fn action_ranges(&self) -> [Range; ACTION_DIM] {
        [
            self.x,
            self.y_left,
            self.x,
            self.y_right,
            self.theta,
            self.theta,
        ]
    }
}

pub fn clip_action(a: &Action, w: &Workspace) -> Action {
    Action {
        left: w.clip_pose(Side::Left, &a.left),
        right: w.clip_pose(Side::Right, &a.right),
    }
}

/// Negative RMSE between two shapes: `-sqrt(mean_j |goal_j - current_j|^2)`.
pub fn reward(goal: &Shape, current: &Shape) -> Result<f64, MdpError> {
    if goal.len() != current.len() {
        return Err(MdpError::DimensionMismatch(goal.len(), current.len()));
    }
    if goal.is_empty() {
        return Ok(0.0);
    }
    let sq: f64 = goal
        .points
        .iter()
        .zip(&current.points)
        .map(|(g, c)| (g - c).norm_squared())
        .sum();
    Ok(-(sq / goal.len() as f64).sqrt())
}

/// `[goal || shape || p_l || p_r || o_l || o_r]`, 78 entries for 18-point shapes.
pub fn encode_input(goal: &Shape, obs: &Observation) -> Vec<f64> {
    let mut v = Vec::with_capacity(INPUT_DIM);
    v.extend(goal.flatten());
    v.extend(obs.shape.flatten());
    v.extend([obs.left.p.x, obs.left.p.y, obs.right.p.x, obs.right.p.y]);
    v.extend([obs.left.o, obs.right.o]);
    v
}

pub fn decode_input(v: &[f64]) -> Result<(Shape, Observation), MdpError> {
    if v.len() != INPUT_DIM {
        return Err(MdpError::BadInputLength(v.len()));
    }
    let n2 = 2 * N_POINTS;
    let goal = Shape::from_flat(&v[..n2])?;
    let shape = Shape::from_flat(&v[n2..2 * n2])?;
    let t = &v[2 * n2..];
    let obs = Observation {
        shape,
        left: GripperPose {
            p: Vec2::new(t[0], t[1]),
            o: t[4],
        },
        right: GripperPose {
            p: Vec2::new(t[2], t[3]),
            o: t[5],
        },
    };
    Ok((goal, obs))
}
