//! Shortfall-risk hedging in Lévy-driven markets via convex duality.
//!
//! The engine simulates a jump-diffusion market, parametrizes exponential
//! supermartingale deflators on a finite basis, minimizes the dual objective
//! by Monte Carlo sample-average approximation, recovers the candidate
//! optimal terminal wealth, and certifies results against weak-duality
//! audits and an exact finite-tree oracle.

pub mod config;
pub mod dual;
pub mod market;
pub mod report;
pub mod rng;
pub mod solver;
pub mod tree;
pub mod utility;

pub use dual::{DualElement, FeasibilityReport};
pub use market::{JumpSpec, LevyMarketSpec, PathEnsemble, Strategy, TimeFn};


pub use utility::StateUtility;
