//! Planar shape control of a deformable linear object.

pub mod data;
pub mod eval;
pub mod jsonfmt;
pub mod learn;
pub mod mdp;
pub mod motion;
pub mod nn;
pub mod servo;
pub mod sim;
