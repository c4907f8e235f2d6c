// SPDX-License-Identifier: Apache-2.0

//! Non-Secure-Callable window: fixed trampoline entry points.

use super::memory::{NSC_BASE, NSC_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrampolineId {
    Cond = 0,
    ICall = 1,
    Ret = 2,
    Loop = 3,
    /// App-exit gate. Its address doubles as the end-of-App log sentinel.
    Exit = 4,
}

/// Log sentinel appended when a report is rebuilt after a reset. Not an
/// entry point: execution never reaches it.
pub const RESET_SENTINEL: u32 = NSC_BASE + 0x80;

impl TrampolineId {
    pub const ALL: [TrampolineId; 5] =
        [TrampolineId::Cond, TrampolineId::ICall, TrampolineId::Ret, TrampolineId::Loop, TrampolineId::Exit];

    pub const fn address(self) -> u32 {
        NSC_BASE + 4 * self as u32
    }

    pub fn from_address(addr: u32) -> Option<TrampolineId> {
        TrampolineId::ALL.into_iter().find(|t| t.address() == addr)
    }

    pub fn symbol(self) -> &'static str {
        match self {
            TrampolineId::Cond => "trampoline_cond",
            TrampolineId::ICall => "trampoline_icall",
            TrampolineId::Ret => "trampoline_ret",
            TrampolineId::Loop => "trampoline_loop",
            TrampolineId::Exit => "trampoline_exit",
        }
    }

    pub fn from_symbol(s: &str) -> Option<TrampolineId> {
        TrampolineId::ALL.into_iter().find(|t| t.symbol() == s)
    }
}

pub fn in_nsc_window(addr: u32) -> bool {
    (NSC_BASE..NSC_BASE + NSC_SIZE).contains(&addr)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn addresses_are_distinct_and_inside_window() {
        for t in TrampolineId::ALL {
            assert!(in_nsc_window(t.address()));
            assert_eq!(TrampolineId::from_address(t.address()), Some(t));
            assert_eq!(TrampolineId::from_symbol(t.symbol()), Some(t));
        }
        assert!(in_nsc_window(RESET_SENTINEL));
        assert_eq!(TrampolineId::from_address(RESET_SENTINEL), None);
    }
}
