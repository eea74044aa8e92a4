pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod federation;
pub mod geometry;
pub mod incremental;
pub mod models;
pub mod report;
pub mod seeds;
pub mod variopt;

pub use error::{Error, Result};

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/aggregation.md")]
    mod aggregation {}
    #[doc = include_str!("../../../book/src/personalization.md")]
    mod personalization {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/federation.md")]
    mod federation {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
