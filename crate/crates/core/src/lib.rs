//! Data-driven online fault diagnosis for boolean discrete event plants.
//!
//! A PLC-controlled plant is simulated under injected sensor and actuator
//! faults, its I/O change logs are turned into windows of timed I/O vectors,
//! and an LSTM classifier learns to map each window to one of eight classes.

pub mod cli;
pub mod acquisition;
pub mod dataset;
pub mod diagnoser;
pub mod extended;
pub mod faults;
pub mod metrics;
pub mod nn;
pub mod plant;
pub mod plot;

/// Simulated time in milliseconds.
pub type Millis = u64;

/// Independent seed for item `index` of stream `salt` under `master`
/// (splitmix64 finalizer).
pub fn derive_seed(master: u64, salt: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(salt.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add((index + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
