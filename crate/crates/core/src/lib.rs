pub mod approval;
pub mod config;
pub mod extract;
pub mod gateway;
pub mod generator;
pub mod harness;
pub mod orchestrator;
pub mod prompts;
pub mod registry;
pub mod retrieval;
pub mod sandbox;
pub mod schema;
pub mod solver;
pub mod stages;
pub mod trace;
pub mod vault;
