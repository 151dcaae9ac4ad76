//! Learning rational subgoals from demonstrations and planning with them.

pub mod demo;
pub mod dependency;
pub mod env;
pub mod eval;
pub mod fsm;
pub mod learner;
pub mod model;
pub mod planner;
pub mod tl;
pub mod world;
