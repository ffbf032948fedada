//! Headless, deterministic urban world simulation.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod delivery;
pub mod env;
pub mod geometry;
pub mod layout;
pub mod planner;
pub mod procgen;
pub mod protocol;
pub mod render;
pub mod rng;
pub mod tasks;
pub mod traffic;
pub mod waypoints;
pub mod world_model;
