//! Open-world object detection at desk scale.
//!
//! A query-based detector whose first decoder layer learns a
//! category-agnostic objectness boundary (a Gaussian over matched query
//! embeddings queried via Mahalanobis distance) while later layers carry
//! classification and box regression. Externally supplied class-agnostic
//! auxiliary boxes are filtered into pseudo unknown labels and drive
//! soft-weighted auxiliary losses, so the detector learns to localize
//! objects it was never given labels for. Tasks arrive incrementally:
//! the class head widens per task, and a small exemplar store replays old
//! classes during fine-tuning. Evaluation reports known-class mAP split by
//! previously/currently known, unknown recall, wilderness impact, and the
//! absolute open-set error count.

pub mod asf;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod matching;
pub mod model;
pub mod data;
pub mod optim;
pub mod pipeline;
pub mod protocol;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
