//! The book's chapters, pulled in as doc comments so that `cargo test`
//! compiles and runs every Rust listing in them.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/range-images.md")]
pub mod range_images {}
#[doc = include_str!("../../../book/src/synthetic-scenes.md")]
pub mod synthetic_scenes {}
#[doc = include_str!("../../../book/src/pseudo-labels.md")]
pub mod pseudo_labels {}
#[doc = include_str!("../../../book/src/filters.md")]
pub mod filters {}
#[doc = include_str!("../../../book/src/neighbours.md")]
pub mod neighbours {}
#[doc = include_str!("../../../book/src/network.md")]
pub mod network {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
