pub mod agents;
pub mod config;
pub mod diffusion;
pub mod episodes;
pub mod eval;
pub mod floorgrid;
pub mod geometry;
pub mod nn;
pub mod planner;
pub mod policy;
pub mod seeds;
pub mod simulator;
