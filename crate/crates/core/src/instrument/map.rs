// SPDX-License-Identifier: Apache-2.0

//! Instrumentation sidecar shared with the verifier.

use serde::{Deserialize, Serialize};

use super::loops::LoopDescriptor;
use crate::vm::nsc::TrampolineId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewriteKind {
    CondTaken,
    CondNotTaken,
    StaticLoop,
    IndirectCall,
    ReturnBxLr,
    ReturnPopPc,
    Exit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapEntry {
    /// Address of the rewritten instruction in the original program.
    pub original_addr: u32,
    pub kind: RewriteKind,
    pub trampoline: TrampolineId,
    /// Instrumented address of the instruction entering the trampoline.
    pub site_addr: u32,
    /// Instrumented destination the trampoline logs, when static.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dest_addr: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterRename {
    pub from: u8,
    pub to: u8,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstrumentationMap {
    pub entries: Vec<MapEntry>,
    pub loops: Vec<LoopDescriptor>,
    pub renames: Vec<RegisterRename>,
    /// `[original, instrumented]` address of every original instruction,
    /// plus the end-of-program address.
    pub addr_map: Vec<[u32; 2]>,
}

impl InstrumentationMap {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("map is always representable")
    }

    pub fn from_toml(s: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(s)
    }

    /// Instrumented address of the original instruction at `addr`.
    pub fn instrumented(&self, addr: u32) -> Option<u32> {
        self.addr_map.binary_search_by_key(&addr, |p| p[0]).ok().map(|i| self.addr_map[i][1])
    }

    pub fn original(&self, addr: u32) -> Option<u32> {
        self.addr_map.iter().find(|p| p[1] == addr).map(|p| p[0])
    }

    pub fn count(&self, kind: RewriteKind) -> usize {
        self.entries.iter().filter(|e| e.kind == kind).count()
    }
}
