//! Complaint-driven debugging of the training data behind SQL queries that
//! call a classifier.

pub mod bench;
pub mod complaint;
pub mod holistic;
pub mod influence;
pub mod linalg;
pub mod model;
pub mod orchestrator;
pub mod provenance;
pub mod query;
pub mod tabular;
pub mod twostep;
