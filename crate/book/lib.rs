//! Compiles and runs every Rust listing in the guide under `src/`.

#![doc = include_str!("src/introduction.md")]

#[doc = include_str!("src/chunking.md")]
pub mod chunking {}

#[doc = include_str!("src/retrieval.md")]
pub mod retrieval {}

#[doc = include_str!("src/grounding.md")]
pub mod grounding {}

#[doc = include_str!("src/text-to-sql.md")]
pub mod text_to_sql {}

#[doc = include_str!("src/events.md")]
pub mod events {}

#[doc = include_str!("src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("src/configuration.md")]
pub mod configuration {}

#[doc = include_str!("src/service.md")]
pub mod service {}
