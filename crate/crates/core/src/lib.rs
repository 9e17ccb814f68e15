pub mod config;
pub mod evalkit;
pub mod events;
pub mod grounding;
pub mod ingest;
pub mod orchestrator;
pub mod providers;
pub mod retrieval;
pub mod t2s;
pub mod text;
