//! Cycle-level simulator of timed cache evictions against prefetch-protected
//! AES and constant-flow RSA, with key-recovery analysis.

pub mod cache_model;
pub mod cli;
pub mod machine;
pub mod recovery;
pub mod sniper;
pub mod victims;
