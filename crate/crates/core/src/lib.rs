//! Phantom name system simulator.
//!
//! A toy 32-bit RISC machine whose program counter carries a hidden phantom
//! index, together with the microarchitectural structures it touches, an
//! adversary harness for code-reuse attacks and a gadget survival analyzer.

pub mod attack;
pub mod config;
pub mod corpus;
pub mod gadgets;
pub mod image;
pub mod isa;
pub mod machine;
pub mod phantom;
pub mod uarch;
