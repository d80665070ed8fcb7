//! Simulation of a browser extension execution pipeline and of the
//! diff/patch monitors that isolate extensions from one another.

pub mod bench;
pub mod diff;
pub mod dom;
pub mod extension;
pub mod gen;
pub mod merge;
pub mod monitor;
pub mod oracle;
pub mod patch;
pub mod pipeline;
pub mod records;
pub mod report;
pub mod scenario;
