//! Oral examination engine: a phase-driven examiner with code-level turn
//! guards, a multi-model grading council, reliability statistics and an
//! audit queue for human review.

pub mod backend;
pub mod cases;
pub mod council;
pub mod guard;
pub mod model;
pub mod orchestrator;
pub mod reliability;
pub mod storage;
pub mod template;
