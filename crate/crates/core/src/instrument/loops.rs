// SPDX-License-Identifier: Apache-2.0

//! Static loop recognition.
//!
//! A loop qualifies when it has the shape
//!
//! ```text
//!         mov ri, #0
//!         ...             ; straight-line, no write to ri
//! L:      ...             ; no branches, no write to the limit
//!         add ri, ri, #1  ; the only write to ri
//!         cmp ri, <limit>
//!         bne|blo|blt L
//! ```
//!
//! and nothing but the back edge enters `L`. The number of back-edge
//! traversals is then `max(limit, 1) - 1`, known at loop entry.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::vm::asm::{address_of_index, AsmOp, Program};
use crate::vm::isa::{Cond, Instr, Operand, Reg};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopLimit {
    Reg(u8),
    Imm(i32),
}

/// A recognized static loop, in original-program addresses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopDescriptor {
    pub backward_branch_addr: u32,
    pub taken_dest_addr: u32,
    pub counter_register: u8,
    pub limit: LoopLimit,
    pub init_instr_addr: u32,
    pub is_static: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct Found {
    pub branch: usize,
    pub header: usize,
    pub init: usize,
    pub counter: Reg,
    pub limit: LoopLimit,
}

impl Found {
    pub fn descriptor(&self) -> LoopDescriptor {
        LoopDescriptor {
            backward_branch_addr: address_of_index(self.branch),
            taken_dest_addr: address_of_index(self.header),
            counter_register: self.counter.0,
            limit: self.limit,
            init_instr_addr: address_of_index(self.init),
            is_static: true,
        }
    }
}

pub fn detect_static_loops(p: &Program) -> Vec<LoopDescriptor> {
    detect(p).iter().map(Found::descriptor).collect()
}

fn limit_ok(cond: Cond, limit: Operand) -> Option<LoopLimit> {
    match (cond, limit) {
        (Cond::Ne, Operand::Imm(k)) if k >= 1 => Some(LoopLimit::Imm(k)),
        (Cond::Lo | Cond::Lt, Operand::Imm(k)) if k >= 0 => Some(LoopLimit::Imm(k)),
        (Cond::Lo, Operand::Reg(r)) if r.is_general() => Some(LoopLimit::Reg(r.0)),
        _ => None,
    }
}

pub(crate) fn detect(p: &Program) -> Vec<Found> {
    let labels = p.label_index();
    let mut refs: HashMap<&str, usize> = HashMap::new();
    for s in &p.stmts {
        if let Some(t) = s.op.target() {
            *refs.entry(t).or_default() += 1;
        }
    }
    let entered = |i: usize, allowed: usize| {
        p.stmts[i].labels.iter().any(|l| l == "main" || refs.get(l.as_str()).copied().unwrap_or(0) > allowed)
    };
    let mut found = Vec::new();
    for (j, s) in p.stmts.iter().enumerate() {
        let AsmOp::BCond(cond, target) = &s.op else { continue };
        let Some(&header) = labels.get(target.as_str()) else { continue };
        if header >= j || j == 0 {
            continue;
        }
        let AsmOp::Plain(Instr::Cmp { rn: counter, op }) = p.stmts[j - 1].op else { continue };
        if !counter.is_general() || op == Operand::Reg(counter) {
            continue;
        }
        let Some(limit) = limit_ok(*cond, op) else { continue };
        // Only this back edge may enter the header.
        if entered(header, 1) || refs[target.as_str()] != 1 {
            continue;
        }
        let limit_reg = match limit {
            LoopLimit::Reg(r) => Some(Reg(r)),
            LoopLimit::Imm(_) => None,
        };
        let increment = Instr::Add { rd: counter, rn: counter, op: Operand::Imm(1) };
        let mut counter_writes = 0;
        let mut ok = true;
        for m in header..j {
            let op = &p.stmts[m].op;
            let shape = op.shape();
            if op.is_control_transfer() || shape == Instr::Halt || (m > header && entered(m, 0)) {
                ok = false;
                break;
            }
            let writes = shape.writes();
            if limit_reg.is_some_and(|r| writes.contains(&r)) {
                ok = false;
                break;
            }
            if writes.contains(&counter) {
                if *op != AsmOp::Plain(increment) {
                    ok = false;
                    break;
                }
                counter_writes += 1;
            }
        }
        if !ok || counter_writes != 1 {
            continue;
        }
        if let Some(init) = find_init(p, header, counter, &entered) {
            found.push(Found { branch: j, header, init, counter, limit });
        }
    }
    found
}

/// Nearest `mov counter, #0` reaching `header` along straight-line code.
fn find_init(p: &Program, header: usize, counter: Reg, entered: &impl Fn(usize, usize) -> bool) -> Option<usize> {
    for m in (0..header).rev() {
        let op = &p.stmts[m].op;
        if *op == AsmOp::Plain(Instr::MovImm { rd: counter, imm: 0 }) {
            return Some(m);
        }
        if op.is_control_transfer() || op.shape() == Instr::Halt || op.shape().writes().contains(&counter) {
            return None;
        }
        if entered(m, 0) {
            return None;
        }
    }
    None
}
