// SPDX-License-Identifier: Apache-2.0

//! Toy MCU with TrustZone-like world isolation.

pub mod asm;
pub mod io;
pub mod isa;
pub mod machine;
pub mod memory;
pub mod nsc;

pub use asm::{assemble, assemble_str, parse, AsmError, Image, Program};
pub use io::AppIo;
pub use isa::{Cond, Instr, Reg};
pub use machine::{Event, FaultKind, Machine, NscGate, RegisterFile, SecureTimer, Trigger};
pub use memory::{Access, AccessKind, PermissionMap, World};
pub use nsc::{TrampolineId, RESET_SENTINEL};
