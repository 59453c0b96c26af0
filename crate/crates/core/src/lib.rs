//! Multi-agent Double-DQN channel selection simulator.
//!
//! End devices pick one of three channels per slot and learn from ACK
//! feedback alone. The gateway only demodulates a subset of the channels,
//! so agents have to learn both which channels are receivable and how to
//! stay out of each other's way.

pub mod cli;
pub mod dqn;
pub mod env;
pub mod hil;
pub mod rng;
pub mod sim;
