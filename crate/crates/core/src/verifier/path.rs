// SPDX-License-Identifier: Apache-2.0

//! Replays a destination stream over the golden image with a shadow stack.

use serde::{Deserialize, Serialize};

use super::cfg::{Cfg, EdgeKind};
use crate::supervisor::EXIT_SENTINEL;
use crate::vm::isa::{Instr, INSTRUCTION_WIDTH};
use crate::vm::nsc::{in_nsc_window, TrampolineId, RESET_SENTINEL};
use crate::vm::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationReason {
    /// A return went somewhere other than the matching call site.
    ShadowStackMismatch,
    /// A conditional destination that is not an edge of the site.
    IllegalEdge,
    /// An indirect call to an address that is not a function entry.
    IllegalIndirectTarget,
    /// Execution would leave the image.
    OutOfImage,
    /// An instruction that instrumentation never leaves in place.
    Uninstrumented,
    /// Entries remain but the path loops without logging.
    NonTerminatingPath,
    /// Entries after the App finished.
    TrailingEntries,
    /// The log itself does not decode.
    MalformedLog,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Violation {
    /// Index of the offending destination in the stitched stream.
    pub index: usize,
    pub reason: ViolationReason,
    /// Site being replayed when the violation was found.
    pub pc: u32,
    pub entry: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathChecker {
    pc: u32,
    shadow: Vec<u32>,
    consumed: usize,
    finished: bool,
    violation: Option<Violation>,
}

impl PathChecker {
    pub fn new(entry: u32) -> Self {
        PathChecker { pc: entry, shadow: Vec::new(), consumed: 0, finished: false, violation: None }
    }

    pub fn finished(&self) -> bool {
        self.finished
    }

    pub fn violation(&self) -> Option<Violation> {
        self.violation
    }

    pub fn consumed(&self) -> usize {
        self.consumed
    }

    pub fn shadow_depth(&self) -> usize {
        self.shadow.len()
    }

    /// Replays `entries`, continuing from where the previous call stopped.
    /// Stops at the first violation, which is sticky.
    pub fn feed(&mut self, cfg: &Cfg, image: &Image, entries: &[u32]) -> Result<(), Violation> {
        if let Some(v) = self.violation {
            return Err(v);
        }
        for &d in entries {
            if let Err(reason) = self.consume(cfg, image, d) {
                let v = Violation { index: self.consumed, reason, pc: self.pc, entry: d };
                self.violation = Some(v);
                return Err(v);
            }
            self.consumed += 1;
        }
        Ok(())
    }

    fn consume(&mut self, cfg: &Cfg, image: &Image, d: u32) -> Result<(), ViolationReason> {
        if self.finished {
            return Err(ViolationReason::TrailingEntries);
        }
        let budget = image.instruction_count() + 1;
        for _ in 0..budget {
            let pc = self.pc;
            let instr = image.instr_at(pc).ok_or(ViolationReason::OutOfImage)?;
            let next = pc + INSTRUCTION_WIDTH;
            // Every point that consumes an entry accepts the reset marker.
            let consumes = match instr {
                Instr::BCond { .. } => true,
                Instr::B { target } | Instr::Bl { target } => {
                    in_nsc_window(target) && target != TrampolineId::Loop.address()
                }
                _ => false,
            };
            if consumes && d == RESET_SENTINEL {
                self.finished = true;
                return Ok(());
            }
            match instr {
                Instr::BCond { .. } => {
                    let edge = cfg.edges_from(pc).iter().find(|e| {
                        e.dest == d
                            && matches!(e.kind, EdgeKind::CondTaken | EdgeKind::CondFallthrough | EdgeKind::LoopBack)
                    });
                    return match edge {
                        Some(e) => {
                            self.pc = e.dest;
                            Ok(())
                        }
                        None => Err(ViolationReason::IllegalEdge),
                    };
                }
                Instr::B { target } if in_nsc_window(target) => {
                    return match TrampolineId::from_address(target) {
                        Some(TrampolineId::Ret) => match self.shadow.pop() {
                            Some(top) if top == d => {
                                self.pc = d;
                                Ok(())
                            }
                            _ => Err(ViolationReason::ShadowStackMismatch),
                        },
                        Some(TrampolineId::Exit) if d == EXIT_SENTINEL => {
                            self.finished = true;
                            Ok(())
                        }
                        _ => Err(ViolationReason::IllegalEdge),
                    };
                }
                Instr::Bl { target } if in_nsc_window(target) => match TrampolineId::from_address(target) {
                    Some(TrampolineId::Loop) => self.pc = next,
                    Some(TrampolineId::Cond) => {
                        return if d == next {
                            self.pc = next;
                            Ok(())
                        } else {
                            Err(ViolationReason::IllegalEdge)
                        };
                    }
                    Some(TrampolineId::ICall) => {
                        return if cfg.address_taken.contains(&d) {
                            self.shadow.push(next);
                            self.pc = d;
                            Ok(())
                        } else {
                            Err(ViolationReason::IllegalIndirectTarget)
                        };
                    }
                    _ => return Err(ViolationReason::IllegalEdge),
                },
                Instr::B { target } => self.pc = target,
                Instr::Bl { target } => {
                    self.shadow.push(next);
                    self.pc = target;
                }
                Instr::BxLr | Instr::Blx { .. } | Instr::Halt => return Err(ViolationReason::Uninstrumented),
                Instr::Pop { regs } if regs & (1 << 15) != 0 => return Err(ViolationReason::Uninstrumented),
                _ => self.pc = next,
            }
        }
        Err(ViolationReason::NonTerminatingPath)
    }
}
