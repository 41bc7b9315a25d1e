//! Core library for a small fault-injection research simulator: a toy ISA
//! with a fixed 4-byte encoding, a compiler-style instrumentation pass that
//! chains call-graph signatures, per-signature code encryption behind aliased
//! translation views, a fetch-decrypt-decode-execute machine, and a fault
//! campaign driver measuring how reliably cross-function control-flow
//! redirections are detected by decryption failure.
//!
//! The crate is `no_std`-compatible (`alloc` required); file formats and the
//! command-line front end live in the companion `cfisim` binary crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod asm;
pub mod config;
pub mod crypto;
pub mod fault;
pub mod instrument;
pub mod isa;
pub mod loader;
pub mod machine;
pub mod memview;
pub mod rng;

pub use config::{BuildConfig, Mode, RunConfig};
pub use isa::{Instruction, Opcode, Program, Reg};
pub use machine::{MachineState, RunResult, RunStatus, Trap};
