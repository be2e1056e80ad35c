pub mod angular;
pub mod atomic;
pub mod chronogram;
pub mod collisions;
pub mod config;
pub mod constants;
pub mod detection;
pub mod estimator;
pub mod obe;
pub mod report;
pub mod sequence;
pub mod systematics;
