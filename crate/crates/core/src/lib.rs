pub mod config;
pub mod evaluation;
pub mod factor_graph;
pub mod geometry;
pub mod keypoints;
pub mod pipeline;
mod mc_tables;
pub mod registration;
pub mod sdf_refine;
pub mod sequence;
pub mod selftest;
pub mod simulator;
pub mod tsdf;
