//! Fixtures shared by the benches.

use dsrl_core::autoencoder::generate_training_set;
use dsrl_core::{EnvConfig, Frame};

pub fn frames(count: usize) -> Vec<Frame> {
    generate_training_set(&EnvConfig::default(), count, 30, 11)
}
