//! Actor-critic fine-tuning of recurrent sequence generators, with a
//! bidirectional-RNN discriminator providing the terminal reward and a
//! brute-force enumeration oracle for exact checks on tiny instances.

pub mod actor;
pub mod corpus;
pub mod critic;
pub mod discriminator;
pub mod error;
pub mod numerics;
pub mod oracle;
pub mod recurrent;
pub mod selfcheck;
pub mod trainer;

pub use error::{Error, Result};
