//! Censorship path-diversity measurement: probe a set of control servers from many
//! vantage points, classify what comes back, locate censors with an application-level
//! traceroute, and compare censorship across network paths.
//!
//! Everything can run against real sockets or against [`simnet`], a deterministic
//! simulated internetwork with censor and cache middleboxes.

pub mod analysis;
pub mod harness;
pub mod model;
pub mod prober;
pub mod sentinel;
pub mod simnet;
pub mod tracer;
pub mod vetting;
