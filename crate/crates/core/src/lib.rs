pub mod adapter;
pub mod calibration;
pub mod evaluation;
pub mod frame;
pub mod geometry;
pub mod pipeline;
pub mod sequence;
pub mod simulator;
pub mod trackers;
