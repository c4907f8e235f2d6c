// SPDX-License-Identifier: Apache-2.0

//! Audit context and its layout in retained memory.
//!
//! ```text
//! 0x000  magic "RTAC"
//! 0x004  chal (64)
//! 0x044  h_pmem (32)
//! 0x064  cfa status (1), flags (1), app_id (2), delta (8)
//! 0x070  pending sigma (32)
//! 0x090  remediation phase (1), action (1), reserved (2), offset (4)
//! 0x098  log length (4), log compression state (16), log capacity (4)
//! 0x400  log bytes
//! ```

use serde::{Deserialize, Serialize};

use crate::cfa::{CfLog, STATE_BYTES};
use crate::crypto::Digest;
use crate::protocol::Challenge;
use crate::resolver::RemediationPhase;

pub const LOG_OFFSET: usize = 0x400;
const MAGIC: &[u8; 4] = b"RTAC";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CfaStatus {
    Inactive,
    Active,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditContext {
    pub chal: Challenge,
    pub h_pmem: Digest,
    pub cfa_status: CfaStatus,
    pub delta: u64,
    /// MAC of the report awaiting acknowledgment; the report body is the
    /// retained log.
    pub pending_sigma: Option<[u8; 32]>,
    pub app_id: u16,
    /// False once a reset has discarded the App's volatile state.
    pub resume_possible: bool,
    /// The pending report ends the App run.
    pub final_report: bool,
    pub remediation: RemediationPhase,
}

impl Default for AuditContext {
    fn default() -> Self {
        AuditContext {
            chal: Challenge::ZERO,
            h_pmem: [0; 32],
            cfa_status: CfaStatus::Inactive,
            delta: 0,
            pending_sigma: None,
            app_id: 0,
            resume_possible: false,
            final_report: false,
            remediation: RemediationPhase::Idle,
        }
    }
}

fn word(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(b[at..at + 4].try_into().unwrap())
}

impl AuditContext {
    /// Writes the header fields, including the log's length and state.
    pub fn store(&self, log: &CfLog, mem: &mut [u8]) {
        mem[0..4].copy_from_slice(MAGIC);
        mem[0x04..0x44].copy_from_slice(&self.chal.0);
        mem[0x44..0x64].copy_from_slice(&self.h_pmem);
        mem[0x64] = (self.cfa_status == CfaStatus::Active) as u8;
        mem[0x65] = u8::from(self.pending_sigma.is_some())
            | u8::from(self.resume_possible) << 1
            | u8::from(self.final_report) << 2;
        mem[0x66..0x68].copy_from_slice(&self.app_id.to_be_bytes());
        mem[0x68..0x70].copy_from_slice(&self.delta.to_be_bytes());
        mem[0x70..0x90].copy_from_slice(&self.pending_sigma.unwrap_or([0; 32]));
        let (phase, action, offset) = self.remediation.encode();
        mem[0x90] = phase;
        mem[0x91] = action;
        mem[0x94..0x98].copy_from_slice(&offset.to_be_bytes());
        mem[0x98..0x9C].copy_from_slice(&(log.len() as u32).to_be_bytes());
        mem[0x9C..0x9C + STATE_BYTES].copy_from_slice(&log.state_bytes());
        mem[0xAC..0xB0].copy_from_slice(&(log.capacity() as u32).to_be_bytes());
    }

    /// Copies log bytes from `from` onwards into retained memory.
    pub fn store_log_tail(log: &CfLog, from: usize, mem: &mut [u8]) {
        let bytes = log.bytes();
        if from < bytes.len() {
            mem[LOG_OFFSET + from..LOG_OFFSET + bytes.len()].copy_from_slice(&bytes[from..]);
        }
    }

    /// Reads the context back; `None` on a never-provisioned device.
    pub fn load(mem: &[u8]) -> Option<(AuditContext, CfLog)> {
        if &mem[0..4] != MAGIC {
            return None;
        }
        let flags = mem[0x65];
        let ctx = AuditContext {
            chal: Challenge(mem[0x04..0x44].try_into().unwrap()),
            h_pmem: mem[0x44..0x64].try_into().unwrap(),
            cfa_status: if mem[0x64] == 1 { CfaStatus::Active } else { CfaStatus::Inactive },
            delta: u64::from_be_bytes(mem[0x68..0x70].try_into().unwrap()),
            pending_sigma: (flags & 1 != 0).then(|| mem[0x70..0x90].try_into().unwrap()),
            app_id: u16::from_be_bytes([mem[0x66], mem[0x67]]),
            resume_possible: flags & 2 != 0,
            final_report: flags & 4 != 0,
            remediation: RemediationPhase::decode(mem[0x90], mem[0x91], word(mem, 0x94)),
        };
        let len = word(mem, 0x98) as usize;
        let capacity = word(mem, 0xAC) as usize;
        let state: [u8; STATE_BYTES] = mem[0x9C..0x9C + STATE_BYTES].try_into().unwrap();
        let log = CfLog::restore(capacity, &mem[LOG_OFFSET..LOG_OFFSET + len], &state);
        Some((ctx, log))
    }
}
