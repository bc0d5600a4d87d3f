pub mod autoencoder;
pub mod dqn;
pub mod env;
pub mod error;
pub mod harness;
pub mod nn;
pub mod qlearning;
pub mod representation;
pub mod seed;
pub mod symbols;
pub mod tracker;

pub use env::{Action, Cell, EnvConfig, Frame, Glyph, StepOutcome, Variant, WorldState};
pub use error::{Error, Result};
pub use seed::SeedStream;
