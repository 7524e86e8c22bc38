//! Grid multi-agent path finding with per-timestep action fields.
//!
//! A collision-free joint plan on a grid can be written as a sequence of
//! action fields: one action per occupied cell per time step. This crate
//! converts between agent paths and action fields, builds learning features
//! and labels from expert plans, and runs policies in closed loop.

pub mod grid;
pub mod action_field;
pub mod dataset;
pub mod expert;
pub mod features;
pub mod mapf;
pub mod metrics;
pub mod render;
pub mod sim;
