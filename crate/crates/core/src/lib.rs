//! Language-guided, collision-free grasp planning in stacked scenes.
//!
//! A describer explains the scene in a constrained sentence, a human may
//! correct it, a grounder resolves it to an object, and a knowledge-guided
//! proposal sampler plans a grasp on that object.

pub mod config;
pub mod dataset;
pub mod eval;
pub mod geometry;
pub mod grounding;
pub mod lang;
pub mod losses;
pub mod noise;
pub mod planner;
pub mod scene;
pub mod seeding;
pub mod session;
