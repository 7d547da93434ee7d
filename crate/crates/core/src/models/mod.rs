//! The two networks and their building blocks.

mod blocks;
mod checkpoint;
mod discriminator;
mod generator;
mod mbd;

pub use blocks::{ResidualBlock, SeBlock};
pub use checkpoint::Checkpoint;
pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use generator::{Generator, GeneratorConfig};
pub use mbd::{minibatch_discrimination, minibatch_discrimination_backward, MbdParams, MinibatchDiscrimination};
