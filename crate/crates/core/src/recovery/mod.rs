//! Key recovery from attack observations.

mod aes;
mod rsa;

pub use aes::{EliminationMode, KeyHypothesisSet, Progress, ProgressRow};
pub use rsa::{align_trace, decode_verdict, rsa_decode, rsa_metrics, AlignedTrace, Alignment, BitTrace, DecodeError, Decoded, RsaMetrics, WindowObservation};
