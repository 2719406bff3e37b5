pub mod cli;
pub mod datamodel;
pub mod dsl;
pub mod executor;
pub mod operators;
pub mod planner;
pub mod registry;
pub mod synth;
pub mod trace_io;
pub mod tracker;
