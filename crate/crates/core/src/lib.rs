//! Metered function-as-a-service stack on a deterministic enclave simulator.

pub mod attestation;
pub mod codec;
pub mod crypto;
pub mod kde;
pub mod sim;
pub mod metering;
pub mod vm;
pub mod runtime;
pub mod worker;
pub mod orchestrator;
pub mod experiments;
