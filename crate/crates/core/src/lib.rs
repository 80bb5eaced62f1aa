pub mod audit;
pub mod cli;
pub mod cloud;
pub mod engine;
pub mod experiments;
pub mod ids;
pub mod linkmodel;
pub mod metrics;
pub mod middleware;
pub mod mobility;
pub mod numerics;
pub mod oracle;
pub mod rng;
pub mod trace;
