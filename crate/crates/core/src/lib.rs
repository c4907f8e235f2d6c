// SPDX-License-Identifier: Apache-2.0

//! Runtime control-flow auditing for a simulated TrustZone microcontroller.

pub mod cfa;
pub mod channel;
pub mod crypto;
pub mod instrument;
pub mod protocol;
pub mod resolver;
pub mod scenario;
pub mod supervisor;
pub mod verifier;
pub mod vm;
