// SPDX-License-Identifier: Apache-2.0

//! Source-to-source rewriter that routes every non-deterministic transfer
//! through an NSC trampoline.
//!
//! Rewrites applied, in terms of the original source:
//!
//! * `r10`/`r11` are renamed to the lowest free general registers.
//! * `bcond L` jumps to a landing pad `bl trampoline_cond` placed right
//!   before `L`; the fall-through gets its own `bl trampoline_cond`.
//! * a static loop gets `mov r10, =L; mov r11, <limit>; bl trampoline_loop`
//!   in front of its header and keeps its back edge untouched.
//! * `blx rx` becomes `mov r10, rx; bl trampoline_icall`.
//! * `bx lr` becomes `b trampoline_ret`, `pop {.., pc}` becomes
//!   `pop {.., lr}; b trampoline_ret`.
//! * `halt` becomes `b trampoline_exit`.

mod loops;
mod map;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use thiserror::Error;

use crate::vm::asm::{self, AsmError, AsmOp, Image, Program, Stmt};
use crate::vm::isa::{reg_list, Instr, Operand, Reg};
use crate::vm::nsc::TrampolineId;

pub use loops::{detect_static_loops, LoopDescriptor, LoopLimit};
pub use map::{InstrumentationMap, MapEntry, RegisterRename, RewriteKind};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum InstrumentError {
    #[error(transparent)]
    Asm(#[from] AsmError),
    #[error("no free register to rename {0}")]
    RegisterPressure(Reg),
    #[error("line {line}: unsupported pattern: {reason}")]
    UnsupportedPattern { line: usize, reason: String },
}

/// Result of instrumenting a program.
#[derive(Debug, Clone)]
pub struct Instrumented {
    pub program: Program,
    pub image: Image,
    pub map: InstrumentationMap,
}

impl Instrumented {
    pub fn source(&self) -> String {
        self.program.to_string()
    }
}

pub fn instrument(src: &str) -> Result<Instrumented, InstrumentError> {
    instrument_program(&asm::parse(src)?)
}

fn unsupported(stmt: &Stmt, reason: impl Into<String>) -> InstrumentError {
    InstrumentError::UnsupportedPattern { line: stmt.line, reason: reason.into() }
}

fn rename_reg(r: Reg, renames: &[(Reg, Reg)]) -> Reg {
    renames.iter().find(|(from, _)| *from == r).map_or(r, |(_, to)| *to)
}

fn rename_instr(i: Instr, renames: &[(Reg, Reg)]) -> Instr {
    let r = |x: Reg| rename_reg(x, renames);
    let op = |o: Operand| match o {
        Operand::Reg(x) => Operand::Reg(r(x)),
        imm => imm,
    };
    let mask = |m: u16| reg_list(m).into_iter().fold(0u16, |acc, x| acc | 1 << r(x).0);
    match i {
        Instr::MovImm { rd, imm } => Instr::MovImm { rd: r(rd), imm },
        Instr::MovReg { rd, rs } => Instr::MovReg { rd: r(rd), rs: r(rs) },
        Instr::Ldr { rd, base, offset } => Instr::Ldr { rd: r(rd), base: r(base), offset },
        Instr::Str { rs, base, offset } => Instr::Str { rs: r(rs), base: r(base), offset },
        Instr::Add { rd, rn, op: o } => Instr::Add { rd: r(rd), rn: r(rn), op: op(o) },
        Instr::Sub { rd, rn, op: o } => Instr::Sub { rd: r(rd), rn: r(rn), op: op(o) },
        Instr::Cmp { rn, op: o } => Instr::Cmp { rn: r(rn), op: op(o) },
        Instr::Blx { rm } => Instr::Blx { rm: r(rm) },
        Instr::Push { regs } => Instr::Push { regs: mask(regs) },
        Instr::Pop { regs } => Instr::Pop { regs: mask(regs) },
        other => other,
    }
}

fn regs_used(op: &AsmOp) -> Vec<Reg> {
    let shape = op.shape();
    let mut v = shape.reads();
    v.extend(shape.writes());
    v
}

/// Renames `r10`/`r11` so the trampolines can use them as argument
/// registers.
fn free_reserved_registers(p: &Program) -> Result<(Program, Vec<(Reg, Reg)>), InstrumentError> {
    let used: HashSet<Reg> = p.stmts.iter().flat_map(|s| regs_used(&s.op)).collect();
    let mut free = (0..=12u8).map(Reg).filter(|r| !used.contains(r) && *r != Reg::RR0 && *r != Reg::RR1);
    let mut renames = Vec::new();
    for reserved in [Reg::RR0, Reg::RR1] {
        if used.contains(&reserved) {
            let to = free.next().ok_or(InstrumentError::RegisterPressure(reserved))?;
            renames.push((reserved, to));
        }
    }
    let mut out = p.clone();
    if !renames.is_empty() {
        for s in &mut out.stmts {
            s.op = match &s.op {
                AsmOp::Plain(i) => AsmOp::Plain(rename_instr(*i, &renames)),
                AsmOp::MovLabel { rd, label } => {
                    AsmOp::MovLabel { rd: rename_reg(*rd, &renames), label: label.clone() }
                }
                other => other.clone(),
            };
        }
    }
    Ok((out, renames))
}

fn falls_through(op: &AsmOp) -> bool {
    match op {
        AsmOp::B(_) => false,
        AsmOp::Plain(Instr::BxLr | Instr::Halt) => false,
        AsmOp::Plain(Instr::Pop { regs }) => regs & (1 << 15) == 0,
        _ => true,
    }
}

fn restores_lr(op: &AsmOp) -> bool {
    matches!(op, AsmOp::Plain(Instr::Pop { regs }) if regs & (1 << 14) != 0)
        || op.shape().writes().contains(&Reg::LR)
            && !matches!(op, AsmOp::Bl(_))
            && !matches!(op, AsmOp::Plain(Instr::Blx { .. }))
}

fn fresh_label(taken: &HashSet<String>, base: &str) -> String {
    let mut name = base.to_string();
    while taken.contains(&name) {
        name.push('_');
    }
    name
}

enum Pending {
    /// Landing pad placed before original statement `target`.
    Pad {
        target: usize,
    },
    /// Fall-through call right after conditional at `site`.
    Fallthrough {
        site: usize,
    },
    Loop {
        branch: usize,
    },
    Plain,
}

pub fn instrument_program(input: &Program) -> Result<Instrumented, InstrumentError> {
    for s in &input.stmts {
        if let Some(t) = s.op.target() {
            if TrampolineId::from_symbol(t).is_some() {
                return Err(unsupported(s, format!("reference to reserved symbol `{t}`")));
            }
        }
    }
    let (p, renames) = free_reserved_registers(input)?;
    let n = p.stmts.len();
    let labels = p.label_index();
    let resolve = |t: &str| labels.get(t).copied().ok_or_else(|| AsmError::LinkError(t.into()));

    let found = loops::detect(&p);
    let loop_by_branch: HashMap<usize, &loops::Found> = found.iter().map(|l| (l.branch, l)).collect();
    let loop_by_header: HashMap<usize, &loops::Found> = found.iter().map(|l| (l.header, l)).collect();

    // Conditional sites and the statements their taken edge lands on.
    let mut pads: BTreeSet<usize> = BTreeSet::new();
    for (i, s) in p.stmts.iter().enumerate() {
        if let AsmOp::BCond(_, t) = &s.op {
            if !loop_by_branch.contains_key(&i) {
                pads.insert(resolve(t)?);
            }
        }
    }
    // A conditional directly followed by a pad falls through that pad.
    let merged: HashSet<usize> =
        pads.iter().filter(|&&t| t > 0 && matches!(p.stmts[t - 1].op, AsmOp::BCond(..))).map(|&t| t - 1).collect();

    check_leaf_returns(&p, &pads, &merged, &loop_by_header, &labels)?;

    let mut taken: HashSet<String> = p.stmts.iter().flat_map(|s| s.labels.iter().cloned()).collect();
    taken.extend(p.end_labels.iter().cloned());
    let mut pad_label = BTreeMap::new();
    for &t in &pads {
        let l = fresh_label(&taken, &format!(".cfpad{t}"));
        taken.insert(l.clone());
        pad_label.insert(t, l);
    }
    let target_name = |i: usize| -> String {
        if i == n {
            p.end_labels[0].clone()
        } else {
            p.stmts[i].labels[0].clone()
        }
    };

    let mut out: Vec<Stmt> = Vec::new();
    let mut kinds: Vec<Pending> = Vec::new();
    let mut orig_to_out = vec![0usize; n + 1];
    let mut entries: Vec<(usize, RewriteKind, TrampolineId, usize)> = Vec::new();
    let push = |out: &mut Vec<Stmt>, kinds: &mut Vec<Pending>, s: Stmt, k: Pending| {
        out.push(s);
        kinds.push(k);
    };

    for i in 0..=n {
        if pads.contains(&i) {
            if i > 0 && !merged.contains(&(i - 1)) && falls_through(&p.stmts[i - 1].op) {
                push(&mut out, &mut kinds, Stmt::new(AsmOp::B(target_name(i))), Pending::Plain);
            }
            let mut pad = Stmt::new(AsmOp::Bl(TrampolineId::Cond.symbol().into()));
            pad.labels.push(pad_label[&i].clone());
            push(&mut out, &mut kinds, pad, Pending::Pad { target: i });
        }
        if let Some(l) = loop_by_header.get(&i) {
            let r0 = Stmt::new(AsmOp::MovLabel { rd: Reg::RR0, label: target_name(i) });
            let r1 = Stmt::new(AsmOp::Plain(match l.limit {
                LoopLimit::Reg(r) => Instr::MovReg { rd: Reg::RR1, rs: Reg(r) },
                LoopLimit::Imm(k) => Instr::MovImm { rd: Reg::RR1, imm: k },
            }));
            push(&mut out, &mut kinds, r0, Pending::Plain);
            push(&mut out, &mut kinds, r1, Pending::Plain);
            let call = Stmt::new(AsmOp::Bl(TrampolineId::Loop.symbol().into()));
            push(&mut out, &mut kinds, call, Pending::Loop { branch: l.branch });
        }
        if i == n {
            orig_to_out[n] = out.len();
            break;
        }
        orig_to_out[i] = out.len();
        let s = &p.stmts[i];
        let with = |op: AsmOp| Stmt { labels: s.labels.clone(), op, line: s.line };
        let tramp = |t: TrampolineId| Stmt::new(AsmOp::B(t.symbol().into()));
        match &s.op {
            AsmOp::BCond(cond, t) => {
                let fallthrough = !merged.contains(&i);
                if loop_by_branch.contains_key(&i) {
                    push(&mut out, &mut kinds, s.clone(), Pending::Plain);
                } else {
                    let target = resolve(t)?;
                    let op = AsmOp::BCond(*cond, pad_label[&target].clone());
                    push(&mut out, &mut kinds, with(op), Pending::Plain);
                }
                if fallthrough {
                    let call = Stmt::new(AsmOp::Bl(TrampolineId::Cond.symbol().into()));
                    push(&mut out, &mut kinds, call, Pending::Fallthrough { site: i });
                }
            }
            AsmOp::Plain(Instr::Blx { rm }) => {
                let mov = with(AsmOp::Plain(Instr::MovReg { rd: Reg::RR0, rs: *rm }));
                push(&mut out, &mut kinds, mov, Pending::Plain);
                let call = Stmt::new(AsmOp::Bl(TrampolineId::ICall.symbol().into()));
                entries.push((i, RewriteKind::IndirectCall, TrampolineId::ICall, out.len()));
                push(&mut out, &mut kinds, call, Pending::Plain);
            }
            AsmOp::Plain(Instr::BxLr) => {
                entries.push((i, RewriteKind::ReturnBxLr, TrampolineId::Ret, out.len()));
                let mut b = tramp(TrampolineId::Ret);
                b.labels = s.labels.clone();
                b.line = s.line;
                push(&mut out, &mut kinds, b, Pending::Plain);
            }
            AsmOp::Plain(Instr::Pop { regs }) if regs & (1 << 15) != 0 => {
                if regs & (1 << 14) != 0 {
                    return Err(unsupported(s, "pop of both lr and pc"));
                }
                let pop = with(AsmOp::Plain(Instr::Pop { regs: (regs & !(1 << 15)) | 1 << 14 }));
                push(&mut out, &mut kinds, pop, Pending::Plain);
                entries.push((i, RewriteKind::ReturnPopPc, TrampolineId::Ret, out.len()));
                push(&mut out, &mut kinds, tramp(TrampolineId::Ret), Pending::Plain);
            }
            AsmOp::Plain(Instr::Halt) => {
                entries.push((i, RewriteKind::Exit, TrampolineId::Exit, out.len()));
                let mut b = tramp(TrampolineId::Exit);
                b.labels = s.labels.clone();
                b.line = s.line;
                push(&mut out, &mut kinds, b, Pending::Plain);
            }
            _ => push(&mut out, &mut kinds, s.clone(), Pending::Plain),
        }
    }

    // Now that every position is known, resolve conditional entries.
    let mut cond_entries = Vec::new();
    for (pos, k) in kinds.iter().enumerate() {
        match *k {
            Pending::Pad { target } => {
                for (i, s) in p.stmts.iter().enumerate() {
                    if let AsmOp::BCond(_, t) = &s.op {
                        if !loop_by_branch.contains_key(&i) && labels[t.as_str()] == target {
                            cond_entries.push((i, RewriteKind::CondTaken, pos, target));
                        }
                    }
                }
                if target > 0 && merged.contains(&(target - 1)) {
                    cond_entries.push((target - 1, RewriteKind::CondNotTaken, pos, target));
                }
            }
            Pending::Fallthrough { site } => cond_entries.push((site, RewriteKind::CondNotTaken, pos, site + 1)),
            Pending::Loop { branch } => {
                let header = loop_by_branch[&branch].header;
                cond_entries.push((branch, RewriteKind::StaticLoop, pos, header))
            }
            Pending::Plain => {}
        }
    }

    let mut program = Program { stmts: out, end_labels: p.end_labels.clone() };
    let has_main = labels.contains_key("main");
    if !has_main && n > 0 {
        program.stmts[orig_to_out[0]].labels.push(fresh_label(&taken, "main"));
    }
    let image = asm::assemble(&program)?;

    let addr = asm::address_of_index;
    let mut map_entries: Vec<MapEntry> = cond_entries
        .into_iter()
        .map(|(orig, kind, pos, dest)| MapEntry {
            original_addr: addr(orig),
            kind,
            trampoline: if kind == RewriteKind::StaticLoop { TrampolineId::Loop } else { TrampolineId::Cond },
            site_addr: addr(pos),
            dest_addr: Some(addr(orig_to_out[dest])),
        })
        .collect();
    map_entries.extend(entries.into_iter().map(|(orig, kind, trampoline, pos)| MapEntry {
        original_addr: addr(orig),
        kind,
        trampoline,
        site_addr: addr(pos),
        dest_addr: None,
    }));
    map_entries.sort_by_key(|e| (e.original_addr, e.kind));

    let loops = found.iter().map(|l| l.descriptor()).collect();
    let map = InstrumentationMap {
        entries: map_entries,
        loops,
        renames: renames.iter().map(|&(from, to)| RegisterRename { from: from.0, to: to.0 }).collect(),
        addr_map: (0..=n).map(|i| [addr(i), addr(orig_to_out[i])]).collect(),
    };
    Ok(Instrumented { program, image, map })
}

/// Rejects `bx lr` returns whose `lr` may have been overwritten by an
/// inserted trampoline call.
fn check_leaf_returns(
    p: &Program,
    pads: &BTreeSet<usize>,
    merged: &HashSet<usize>,
    loop_by_header: &HashMap<usize, &loops::Found>,
    labels: &HashMap<&str, usize>,
) -> Result<(), InstrumentError> {
    let n = p.stmts.len();
    let mut starts: BTreeSet<usize> = BTreeSet::from([0, n]);
    if let Some(&m) = labels.get("main") {
        starts.insert(m);
    }
    for s in &p.stmts {
        if let AsmOp::Bl(t) | AsmOp::MovLabel { label: t, .. } = &s.op {
            if let Some(&i) = labels.get(t.as_str()) {
                starts.insert(i);
            }
        }
    }
    // Unreferenced code after a terminator can only be entered as a
    // function, e.g. one that is never called.
    let branch_targets: HashSet<&str> = p
        .stmts
        .iter()
        .filter_map(|s| match &s.op {
            AsmOp::B(t) | AsmOp::BCond(_, t) => Some(t.as_str()),
            _ => None,
        })
        .collect();
    for k in 1..n {
        let s = &p.stmts[k];
        let after_terminator = matches!(p.stmts[k - 1].op, AsmOp::B(_) | AsmOp::Plain(Instr::BxLr | Instr::Halt))
            || matches!(p.stmts[k - 1].op, AsmOp::Plain(Instr::Pop { regs }) if regs & (1 << 15) != 0);
        if after_terminator && !s.labels.is_empty() && s.labels.iter().all(|l| !branch_targets.contains(l.as_str())) {
            starts.insert(k);
        }
    }
    let clobbers = |i: usize| {
        pads.contains(&i)
            || loop_by_header.contains_key(&i)
            || matches!(p.stmts.get(i).map(|s| &s.op), Some(AsmOp::BCond(..))) && !merged.contains(&i)
    };
    for (k, s) in p.stmts.iter().enumerate() {
        if s.op != AsmOp::Plain(Instr::BxLr) {
            continue;
        }
        if pads.contains(&k) {
            return Err(unsupported(s, "bx lr is the target of a conditional branch"));
        }
        let lo = *starts.range(..=k).next_back().unwrap_or(&0);
        let hi = *starts.range(k + 1..).next().unwrap_or(&n);
        let restored = k > 0 && restores_lr(&p.stmts[k - 1].op);
        if !restored && (lo..hi).any(clobbers) {
            return Err(unsupported(s, "bx lr in a function whose lr is overwritten by inserted trampoline calls"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
