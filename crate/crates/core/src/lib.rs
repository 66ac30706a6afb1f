pub mod broker;
pub mod cli;
pub mod cloud;
pub mod config;
pub mod edge;
pub mod feedgen;
pub mod fog;
pub mod jsonl;
pub mod model;
pub mod pipeline;
pub mod rng;
