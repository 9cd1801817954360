//! Weakly supervised temporal grounding by boundary adjustment: a query
//! encoder, a cross-modal evaluator and a reinforcement-learned boundary
//! planner, trained with alternating ranking and actor-critic updates.

pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod evaluator;
pub mod extractor;
pub mod gradcheck;
pub mod inference;
pub mod model;
pub mod planner;
pub mod trainer;

pub use error::{Error, Result};
