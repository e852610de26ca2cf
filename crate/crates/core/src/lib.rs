//! Edge-offloaded model predictive control testbed for a simulated quadrotor.
//!
//! A plant process integrates the vehicle kinematics and streams odometry over
//! a length-prefixed byte protocol; a controller service answers each sample
//! with a thrust/attitude command produced by a receding-horizon optimizer.
//! A configurable delay channel emulates the network between them, and the
//! harness reproduces horizon/rate latency sweeps and trajectory-tracking runs.
//!
//! The numeric core ([`dynamics`], [`mpc`], [`mission`], [`stats`]) is generic
//! over the scalar type through [`scalar::Real`]; the networked runtime and
//! wire format are pinned to `f64`.

pub mod controller;
pub mod dynamics;
pub mod link;
pub mod lockstep;
pub mod mission;
pub mod mpc;
pub mod plant;

pub mod scalar;
pub mod stats;
pub mod time;

pub use scalar::Real;

/// Concrete scalar aliases used by the networked runtime and wire format.
pub type VehicleState64 = dynamics::VehicleState<f64>;
pub type ControlInput64 = dynamics::ControlInput<f64>;
pub type ModelParams64 = dynamics::ModelParams<f64>;
pub type MpcWeights64 = mpc::MpcWeights<f64>;
pub type InputBounds64 = mpc::InputBounds<f64>;
pub type MpcConfig64 = mpc::MpcConfig<f64>;
pub type MpcSolution64 = mpc::MpcSolution<f64>;
pub type TrajectorySpec64 = mission::TrajectorySpec<f64>;
pub type BoxStats64 = stats::BoxStats<f64>;
