//! A dependable control plane for long-running training jobs.
//!
//! The platform accepts jobs over an HTTP/JSON API, persists them before
//! acknowledging, launches one run-to-completion Guardian per job, deploys
//! learners and helpers atomically with rollback, and tracks per-learner
//! status through a crash-durable coordination store. Everything runs on a
//! simulated cluster with deterministic fault injection.

pub mod api;
pub mod clock;
pub mod cluster;
pub mod guardian;
pub mod harness;
pub mod job_model;
pub mod kv;
pub mod lcm;
pub mod metadata;
pub mod objects;
pub mod platform;
pub mod runtime;
pub mod stores;
pub mod wal;
