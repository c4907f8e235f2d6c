// SPDX-License-Identifier: Apache-2.0

//! Remediation actions run after an authenticated Heal.

use serde::{Deserialize, Serialize};

use crate::vm::isa::Instr;
use crate::vm::memory::PMEM_BASE;
use crate::vm::Machine;

/// Bytes of program memory zeroed per cycle while wiping.
pub const WIPE_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemediationAction {
    /// Park the device in the Secure World forever.
    Freeze,
    /// Overwrite the App entry with `halt`.
    DisableApp,
    /// Zero all of program memory.
    WipeApp,
}

impl RemediationAction {
    fn code(self) -> u8 {
        match self {
            RemediationAction::Freeze => 1,
            RemediationAction::DisableApp => 2,
            RemediationAction::WipeApp => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(RemediationAction::Freeze),
            2 => Some(RemediationAction::DisableApp),
            3 => Some(RemediationAction::WipeApp),
            _ => None,
        }
    }
}

/// Persisted progress marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemediationPhase {
    Idle,
    InProgress {
        action: RemediationAction,
        offset: u32,
    },
    /// Action finished; the post-remediation report is still owed.
    AttestPending,
    Frozen,
}

impl RemediationPhase {
    pub fn encode(self) -> (u8, u8, u32) {
        match self {
            RemediationPhase::Idle => (0, 0, 0),
            RemediationPhase::InProgress { action, offset } => (1, action.code(), offset),
            RemediationPhase::AttestPending => (2, 0, 0),
            RemediationPhase::Frozen => (3, 0, 0),
        }
    }

    pub fn decode(phase: u8, action: u8, offset: u32) -> Self {
        match (phase, RemediationAction::from_code(action)) {
            (1, Some(action)) => RemediationPhase::InProgress { action, offset },
            (2, _) => RemediationPhase::AttestPending,
            (3, _) => RemediationPhase::Frozen,
            _ => RemediationPhase::Idle,
        }
    }
}

/// Performs one cycle's worth of `action`; returns the next phase.
pub fn remediate_step(m: &mut Machine, action: RemediationAction, offset: u32) -> RemediationPhase {
    match action {
        RemediationAction::Freeze => {
            m.halt();
            RemediationPhase::Frozen
        }
        RemediationAction::DisableApp => {
            let entry = (m.boot_entry() - PMEM_BASE) as usize;
            if let Some(slot) = m.pmem_mut().get_mut(entry..entry + 4) {
                slot.copy_from_slice(&Instr::Halt.encode().to_be_bytes());
            }
            RemediationPhase::AttestPending
        }
        RemediationAction::WipeApp => {
            let pmem = m.pmem_mut();
            let start = (offset as usize).min(pmem.len());
            let end = (start + WIPE_CHUNK).min(pmem.len());
            pmem[start..end].fill(0);
            if end == pmem.len() {
                RemediationPhase::AttestPending
            } else {
                RemediationPhase::InProgress { action, offset: end as u32 }
            }
        }
    }
}

/// Program memory the verifier should expect after `action`, or `None`
/// when the action leaves nothing to attest.
pub fn remediated_image(golden: &[u8], entry: u32, action: RemediationAction) -> Option<Vec<u8>> {
    match action {
        RemediationAction::Freeze => None,
        RemediationAction::WipeApp => Some(vec![0; golden.len()]),
        RemediationAction::DisableApp => {
            let mut img = golden.to_vec();
            let at = (entry - PMEM_BASE) as usize;
            if let Some(slot) = img.get_mut(at..at + 4) {
                slot.copy_from_slice(&Instr::Halt.encode().to_be_bytes());
            }
            Some(img)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wipe_runs_in_chunks_to_zero() {
        let mut m = Machine::with_image(vec![0xAB; 200], 0);
        let mut phase = RemediationPhase::InProgress { action: RemediationAction::WipeApp, offset: 0 };
        let mut steps = 0;
        while let RemediationPhase::InProgress { action, offset } = phase {
            phase = remediate_step(&mut m, action, offset);
            steps += 1;
        }
        assert_eq!(phase, RemediationPhase::AttestPending);
        assert_eq!(steps, 4);
        assert!(m.pmem().iter().all(|b| *b == 0));
    }

    #[test]
    fn disable_matches_expected_image() {
        let img = crate::vm::assemble_str("x: mov r0, #1\nmain: mov r1, #2\n halt").unwrap();
        let mut m = Machine::from_image(&img);
        remediate_step(&mut m, RemediationAction::DisableApp, 0);
        let expected = remediated_image(&img.bytes, img.entry, RemediationAction::DisableApp).unwrap();
        assert_eq!(m.pmem(), &expected[..]);
        assert_eq!(m.pmem()[4..8], Instr::Halt.encode().to_be_bytes());
    }

    #[test]
    fn freeze_halts_forever() {
        let mut m = Machine::load_program("main: b main").unwrap();
        assert_eq!(remediate_step(&mut m, RemediationAction::Freeze, 0), RemediationPhase::Frozen);
        for _ in 0..10 {
            assert_eq!(m.step(), crate::vm::Event::Halted);
        }
    }

    #[test]
    fn phase_encoding_roundtrip() {
        for p in [
            RemediationPhase::Idle,
            RemediationPhase::AttestPending,
            RemediationPhase::Frozen,
            RemediationPhase::InProgress { action: RemediationAction::DisableApp, offset: 9 },
        ] {
            let (a, b, c) = p.encode();
            assert_eq!(RemediationPhase::decode(a, b, c), p);
        }
    }
}
