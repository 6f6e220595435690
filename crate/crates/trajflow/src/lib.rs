//! Flow-matching models trained with trajectory-consistency objectives.
//!
//! The crate is organised bottom-up: a small reverse-mode autodiff tape
//! ([`autodiff`]), linear probability paths and time samplers ([`flowpath`]),
//! a FiLM-conditioned MLP velocity field ([`model`]), the training losses
//! ([`losses`]), fixed-step ODE solvers with NFE accounting ([`solvers`]),
//! toy transport tasks ([`tasks`]), and an Adam training loop with
//! deterministic checkpointing ([`train`], [`checkpoint`]).
//!
//! Everything is double precision and single threaded. Determinism is part of
//! the contract: a fixed seed reproduces parameters, losses, and trajectories
//! bit for bit.

#![forbid(unsafe_code)]

pub mod autodiff;
pub mod checkpoint;
pub mod flowpath;
pub mod losses;
pub mod model;
pub mod solvers;
pub mod tasks;
pub mod train;

pub use autodiff::{grad_check, AutodiffError, NodeId, Tape, Tensor};
pub use flowpath::{PathPair, SegmentPartition, TimeSampler};
pub use model::{EmaState, ModelConfig, VelocityModel};
pub use solvers::{Method, SolverConfig, Trajectory};
pub use checkpoint::Checkpoint;
pub use tasks::{Dataset, Task, TaskSample};
pub use train::{evaluate, EvalReport, TrainConfig, Trainer};
