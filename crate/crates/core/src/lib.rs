//! Core library for the prism model gateway: wire codec, plugin runtime,
//! model registry, access control, async jobs, HTTP gateway and client.

pub mod access;
pub mod client;
pub mod clock;
pub mod demo;
pub mod gateway;
pub mod jobs;
pub mod registry;
pub mod runtime;
pub mod wire;
