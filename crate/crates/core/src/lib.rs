//! Radar-inertial odometry: a millimetre-wave radar and IMU simulator, sparse
//! point association, NDT/ICP scan-to-map registration, an unscented Kalman
//! filter with a learned or constant-velocity motion model, and trajectory
//! evaluation.

pub mod association;
pub mod config;
pub mod eval;
pub mod exec;
pub mod fusion;
pub mod geometry;
pub mod io;
pub mod motion_model;
pub mod pipeline;
pub mod plot;
pub mod radar_sim;
pub mod registration;
