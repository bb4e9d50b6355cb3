//! Open-world intent discovery on fixed-size feature vectors.
//!
//! Two stages: supervised pre-training of an encoder on labeled in-domain
//! classes with a K-nearest-neighbor contrastive loss ([`pretrain`]), then
//! contrastive clustering of unlabeled out-of-domain data with filtered hard
//! negatives ([`cluster`]). [`metrics`] scores the result.

pub mod cluster;
pub mod data_io;
pub mod error;
pub mod knn;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod pretrain;

pub use error::{KcodError, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/pretraining.md")]
    mod pretraining {}
    #[doc = include_str!("../../../book/src/clustering.md")]
    mod clustering {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
