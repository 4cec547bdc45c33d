//! Victim programs: a prefetching S-Box AES and a balanced
//! square-and-multiply exponentiation, each expressed as a script of timed
//! memory accesses, plus the request-serving process that runs them.

pub mod aes;
mod noise;
mod script;
mod server;

pub use noise::{NoiseProcess, NOISE_TAG_BASE};
pub use script::{
    aes_encrypt_script, aes_last_round_nonaccess_mc, aes_last_round_nonaccess_prob, rsa_decrypt_script, rsa_nominal_period, AesTiming,
    AesVictim, CiphertextRecord, Marker, RsaLines, RsaTiming, RsaVictim, Step, VictimError,
};
pub use server::{Arrivals, GroundTruth, ServerProcess, Workload};
