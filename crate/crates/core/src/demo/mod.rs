//! Demonstration models served as plugins, plus the stdio helper they share.

pub mod accept;
pub mod epic;
pub mod plugin;
pub mod rng;

pub use accept::AcceptDemo;
pub use epic::EpicDemo;
pub use plugin::{serve_stdio, Model};
