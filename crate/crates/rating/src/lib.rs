//! Blinded rating study: raters score answer/rationale pairs, some model
//! generated and some ground truth, on five 1–5 criteria without being
//! told which is which.

pub mod aggregate;
pub mod error;
pub mod log;
pub mod server;
pub mod study;

pub use aggregate::{aggregate, AggregateReport, CriterionRow, Summary};
pub use error::{ApiError, Result};
pub use study::{PoolItem, RatingAck, RatingRecord, RatingTask, Source, Study, StudyConfig, TaskPool, CRITERIA};
