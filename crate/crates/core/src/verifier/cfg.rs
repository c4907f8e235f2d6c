// SPDX-License-Identifier: Apache-2.0

//! Control-flow graph of an instrumented image.
//!
//! Edge destinations are the addresses the device logs for the edge, so a
//! log entry can be matched against the edges of the current site directly.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::VerifierError;
use crate::instrument::InstrumentationMap;
use crate::vm::isa::{Instr, Reg, INSTRUCTION_WIDTH};
use crate::vm::nsc::{in_nsc_window, TrampolineId};
use crate::vm::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    CondTaken,
    CondFallthrough,
    Call,
    ReturnSite,
    LoopBack,
    IndirectAny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Edge {
    /// Address of the branch instruction.
    pub src: u32,
    pub dest: u32,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Block {
    pub start: u32,
    /// Exclusive.
    pub end: u32,
}

#[derive(Debug, Clone, Default)]
pub struct Cfg {
    pub entry: u32,
    pub blocks: Vec<Block>,
    pub edges: Vec<Edge>,
    /// Functions whose address is materialized in code: the only legal
    /// indirect-call targets.
    pub address_taken: BTreeSet<u32>,
    by_src: BTreeMap<u32, Vec<Edge>>,
}

fn is_cond_call(image: &Image, addr: u32) -> bool {
    image.instr_at(addr) == Some(Instr::Bl { target: TrampolineId::Cond.address() })
}

impl Cfg {
    pub fn edges_from(&self, src: u32) -> &[Edge] {
        self.by_src.get(&src).map_or(&[], Vec::as_slice)
    }

    pub fn block_of(&self, addr: u32) -> Option<&Block> {
        self.blocks.iter().find(|b| b.start <= addr && addr < b.end)
    }

    /// Edges leaving any instruction of the block starting at `start`.
    pub fn block_edges(&self, start: u32) -> Vec<Edge> {
        let Some(b) = self.block_of(start) else { return Vec::new() };
        self.by_src.range(b.start..b.end).flat_map(|(_, e)| e.iter().copied()).collect()
    }
}

pub fn build_cfg(image: &Image, map: &InstrumentationMap) -> Result<Cfg, VerifierError> {
    let start = crate::vm::memory::PMEM_BASE;
    let end = image.end();
    let in_image = |a: u32| a >= start && a < end && a.is_multiple_of(INSTRUCTION_WIDTH);
    let mut instrs = Vec::new();
    for addr in (start..end).step_by(INSTRUCTION_WIDTH as usize) {
        let i = image.instr_at(addr).ok_or(VerifierError::MalformedImage(addr))?;
        instrs.push((addr, i));
    }
    let loop_headers: BTreeSet<u32> = map.loops.iter().filter_map(|l| map.instrumented(l.taken_dest_addr)).collect();

    let mut address_taken = BTreeSet::new();
    for &(_, i) in &instrs {
        // r10 is only written by inserted code (loop headers, call targets).
        if let Instr::MovImm { rd, imm } = i {
            if rd != Reg::RR0 && in_image(imm as u32) {
                address_taken.insert(imm as u32);
            }
        }
    }

    let mut edges = Vec::new();
    let mut leaders: BTreeSet<u32> = BTreeSet::from([start, image.entry]);
    for &(addr, i) in &instrs {
        let next = addr + INSTRUCTION_WIDTH;
        if i.is_control_transfer() || i == Instr::Halt {
            leaders.insert(next);
        }
        match i {
            Instr::BCond { target, .. } => {
                leaders.insert(target);
                let taken = if is_cond_call(image, target) {
                    Edge { src: addr, dest: target + INSTRUCTION_WIDTH, kind: EdgeKind::CondTaken }
                } else if loop_headers.contains(&target) {
                    Edge { src: addr, dest: target, kind: EdgeKind::LoopBack }
                } else {
                    return Err(VerifierError::MalformedImage(addr));
                };
                if !is_cond_call(image, next) {
                    return Err(VerifierError::MalformedImage(addr));
                }
                let fall = Edge { src: addr, dest: next + INSTRUCTION_WIDTH, kind: EdgeKind::CondFallthrough };
                edges.push(taken);
                edges.push(fall);
            }
            Instr::Bl { target } if target == TrampolineId::ICall.address() => {
                for &t in &address_taken {
                    edges.push(Edge { src: addr, dest: t, kind: EdgeKind::IndirectAny });
                }
                edges.push(Edge { src: addr, dest: next, kind: EdgeKind::ReturnSite });
            }
            Instr::Bl { target } if !in_nsc_window(target) => {
                leaders.insert(target);
                edges.push(Edge { src: addr, dest: target, kind: EdgeKind::Call });
                edges.push(Edge { src: addr, dest: next, kind: EdgeKind::ReturnSite });
            }
            Instr::B { target } if !in_nsc_window(target) => {
                leaders.insert(target);
            }
            _ => {}
        }
    }
    leaders.extend(address_taken.iter().copied());
    leaders.extend(edges.iter().map(|e| e.dest));
    let cuts: Vec<u32> = leaders.into_iter().filter(|&a| a >= start && a < end).collect();
    let blocks = cuts
        .iter()
        .enumerate()
        .map(|(k, &s)| Block { start: s, end: cuts.get(k + 1).copied().unwrap_or(end) })
        .collect();
    let mut by_src: BTreeMap<u32, Vec<Edge>> = BTreeMap::new();
    for e in &edges {
        by_src.entry(e.src).or_default().push(*e);
    }
    Ok(Cfg { entry: image.entry, blocks, edges, address_taken, by_src })
}
