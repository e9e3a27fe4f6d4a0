//! Style-controllable generative route planning for two-vehicle
//! interactions, plus the harness that trains the generator on synthetic
//! interaction data and measures how often baseline planners collide with
//! adversaries of varying criticality.

pub mod data;
pub mod error;
pub mod geometry;
pub mod nn;
pub mod planners;
pub mod routegan;
pub mod scene;
pub mod sim;

pub use error::{Error, Result};
