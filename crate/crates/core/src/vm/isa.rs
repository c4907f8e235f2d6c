// SPDX-License-Identifier: Apache-2.0

//! Toy instruction set with a fixed 4-byte big-endian encoding.
//!
//! ```text
//!  31        24 23    20 19    16 15                 0
//! +------------+--------+--------+--------------------+
//! |   opcode   |   a    |   b    |       imm16        |
//! +------------+--------+--------------------------- -+
//!              |   a    |           imm20 / target    |
//! ```
//!
//! Branch targets are absolute 20-bit addresses, which covers the whole
//! simulated address space.

use std::fmt;

pub const INSTRUCTION_WIDTH: u32 = 4;

/// Register index. `r13` is `sp`, `r14` is `lr`, `r15` is `pc`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Reg(pub u8);

impl Reg {
    pub const SP: Reg = Reg(13);
    pub const LR: Reg = Reg(14);
    pub const PC: Reg = Reg(15);
    /// First reserved register used by the trampolines.
    pub const RR0: Reg = Reg(10);
    /// Second reserved register used by the trampolines.
    pub const RR1: Reg = Reg(11);

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_general(self) -> bool {
        self.0 <= 12
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            13 => f.write_str("sp"),
            14 => f.write_str("lr"),
            15 => f.write_str("pc"),
            n => write!(f, "r{n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cond {
    Eq,
    Ne,
    Lt,
    Ge,
    Gt,
    Le,
    Lo,
    Hs,
    Hi,
    Ls,
}

impl Cond {
    pub const ALL: [Cond; 10] =
        [Cond::Eq, Cond::Ne, Cond::Lt, Cond::Ge, Cond::Gt, Cond::Le, Cond::Lo, Cond::Hs, Cond::Hi, Cond::Ls];

    pub fn mnemonic(self) -> &'static str {
        match self {
            Cond::Eq => "eq",
            Cond::Ne => "ne",
            Cond::Lt => "lt",
            Cond::Ge => "ge",
            Cond::Gt => "gt",
            Cond::Le => "le",
            Cond::Lo => "lo",
            Cond::Hs => "hs",
            Cond::Hi => "hi",
            Cond::Ls => "ls",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<Cond> {
        Cond::ALL.into_iter().find(|c| c.mnemonic() == s)
    }

    fn code(self) -> u32 {
        Cond::ALL.iter().position(|c| *c == self).unwrap() as u32
    }

    fn from_code(code: u32) -> Option<Cond> {
        Cond::ALL.get(code as usize).copied()
    }

    pub fn holds(self, flags: Flags) -> bool {
        let Flags { n, z, c, v } = flags;
        match self {
            Cond::Eq => z,
            Cond::Ne => !z,
            Cond::Lt => n != v,
            Cond::Ge => n == v,
            Cond::Gt => !z && n == v,
            Cond::Le => z || n != v,
            Cond::Lo => !c,
            Cond::Hs => c,
            Cond::Hi => c && !z,
            Cond::Ls => !c || z,
        }
    }
}

/// ARM-style condition flags set by `cmp`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Flags {
    pub n: bool,
    pub z: bool,
    pub c: bool,
    pub v: bool,
}

impl Flags {
    pub fn compare(a: u32, b: u32) -> Flags {
        let (res, borrow) = a.overflowing_sub(b);
        let v = ((a ^ b) & (a ^ res)) >> 31 == 1;
        Flags { n: res >> 31 == 1, z: res == 0, c: !borrow, v }
    }
}

/// Second operand of arithmetic and compare instructions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operand {
    Reg(Reg),
    Imm(i32),
}

/// Decoded machine instruction with resolved addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Instr {
    MovImm { rd: Reg, imm: i32 },
    MovReg { rd: Reg, rs: Reg },
    Ldr { rd: Reg, base: Reg, offset: i16 },
    Str { rs: Reg, base: Reg, offset: i16 },
    Add { rd: Reg, rn: Reg, op: Operand },
    Sub { rd: Reg, rn: Reg, op: Operand },
    Cmp { rn: Reg, op: Operand },
    B { target: u32 },
    BCond { cond: Cond, target: u32 },
    Bl { target: u32 },
    Blx { rm: Reg },
    BxLr,
    Push { regs: u16 },
    Pop { regs: u16 },
    NscCall { service: u16 },
    Halt,
}

pub const IMM20_MIN: i32 = -(1 << 19);
pub const IMM20_MAX: i32 = (1 << 19) - 1;
pub const TARGET_MAX: u32 = (1 << 20) - 1;

mod op {
    pub const MOV_IMM: u32 = 0x01;
    pub const MOV_REG: u32 = 0x02;
    pub const LDR: u32 = 0x03;
    pub const STR: u32 = 0x04;
    pub const ADD_IMM: u32 = 0x05;
    pub const ADD_REG: u32 = 0x06;
    pub const SUB_IMM: u32 = 0x07;
    pub const SUB_REG: u32 = 0x08;
    pub const CMP_IMM: u32 = 0x09;
    pub const CMP_REG: u32 = 0x0A;
    pub const B: u32 = 0x0B;
    pub const BCOND: u32 = 0x0C;
    pub const BL: u32 = 0x0D;
    pub const BLX: u32 = 0x0E;
    pub const BX_LR: u32 = 0x0F;
    pub const PUSH: u32 = 0x10;
    pub const POP: u32 = 0x11;
    pub const NSC_CALL: u32 = 0x12;
    pub const HALT: u32 = 0x13;
}

fn sext(value: u32, bits: u32) -> i32 {
    let shift = 32 - bits;
    ((value << shift) as i32) >> shift
}

impl Instr {
    /// Encodes to a 32-bit word. Callers guarantee operands are in range
    /// (the assembler checks this).
    pub fn encode(&self) -> u32 {
        let r = |reg: Reg, shift: u32| (reg.0 as u32 & 0xF) << shift;
        let i16f = |v: i32| (v as u32) & 0xFFFF;
        match *self {
            Instr::MovImm { rd, imm } => op::MOV_IMM << 24 | r(rd, 20) | (imm as u32 & 0xF_FFFF),
            Instr::MovReg { rd, rs } => op::MOV_REG << 24 | r(rd, 20) | r(rs, 16),
            Instr::Ldr { rd, base, offset } => op::LDR << 24 | r(rd, 20) | r(base, 16) | i16f(offset as i32),
            Instr::Str { rs, base, offset } => op::STR << 24 | r(rs, 20) | r(base, 16) | i16f(offset as i32),
            Instr::Add { rd, rn, op: Operand::Imm(i) } => op::ADD_IMM << 24 | r(rd, 20) | r(rn, 16) | i16f(i),
            Instr::Add { rd, rn, op: Operand::Reg(rm) } => op::ADD_REG << 24 | r(rd, 20) | r(rn, 16) | r(rm, 12),
            Instr::Sub { rd, rn, op: Operand::Imm(i) } => op::SUB_IMM << 24 | r(rd, 20) | r(rn, 16) | i16f(i),
            Instr::Sub { rd, rn, op: Operand::Reg(rm) } => op::SUB_REG << 24 | r(rd, 20) | r(rn, 16) | r(rm, 12),
            Instr::Cmp { rn, op: Operand::Imm(i) } => op::CMP_IMM << 24 | r(rn, 20) | i16f(i),
            Instr::Cmp { rn, op: Operand::Reg(rm) } => op::CMP_REG << 24 | r(rn, 20) | r(rm, 16),
            Instr::B { target } => op::B << 24 | (target & TARGET_MAX),
            Instr::BCond { cond, target } => op::BCOND << 24 | cond.code() << 20 | (target & TARGET_MAX),
            Instr::Bl { target } => op::BL << 24 | (target & TARGET_MAX),
            Instr::Blx { rm } => op::BLX << 24 | r(rm, 20),
            Instr::BxLr => op::BX_LR << 24,
            Instr::Push { regs } => op::PUSH << 24 | regs as u32,
            Instr::Pop { regs } => op::POP << 24 | regs as u32,
            Instr::NscCall { service } => op::NSC_CALL << 24 | service as u32,
            Instr::Halt => op::HALT << 24,
        }
    }

    /// Decodes a word; `None` for anything that is not a valid encoding,
    /// including writes to `pc` outside the control-transfer opcodes.
    pub fn decode(word: u32) -> Option<Instr> {
        let opcode = word >> 24;
        let a = Reg(((word >> 20) & 0xF) as u8);
        let b = Reg(((word >> 16) & 0xF) as u8);
        let c = Reg(((word >> 12) & 0xF) as u8);
        let imm16 = sext(word & 0xFFFF, 16);
        let target = word & TARGET_MAX;
        let instr = match opcode {
            op::MOV_IMM => Instr::MovImm { rd: a, imm: sext(word & 0xF_FFFF, 20) },
            op::MOV_REG => Instr::MovReg { rd: a, rs: b },
            op::LDR => Instr::Ldr { rd: a, base: b, offset: imm16 as i16 },
            op::STR => Instr::Str { rs: a, base: b, offset: imm16 as i16 },
            op::ADD_IMM => Instr::Add { rd: a, rn: b, op: Operand::Imm(imm16) },
            op::ADD_REG => Instr::Add { rd: a, rn: b, op: Operand::Reg(c) },
            op::SUB_IMM => Instr::Sub { rd: a, rn: b, op: Operand::Imm(imm16) },
            op::SUB_REG => Instr::Sub { rd: a, rn: b, op: Operand::Reg(c) },
            op::CMP_IMM => Instr::Cmp { rn: a, op: Operand::Imm(imm16) },
            op::CMP_REG => Instr::Cmp { rn: a, op: Operand::Reg(b) },
            op::B => Instr::B { target },
            op::BCOND => Instr::BCond { cond: Cond::from_code((word >> 20) & 0xF)?, target },
            op::BL => Instr::Bl { target },
            op::BLX => Instr::Blx { rm: a },
            op::BX_LR => Instr::BxLr,
            op::PUSH => Instr::Push { regs: word as u16 },
            op::POP => Instr::Pop { regs: word as u16 },
            op::NSC_CALL => Instr::NscCall { service: word as u16 },
            op::HALT => Instr::Halt,
            _ => return None,
        };
        if instr.encode() != word || instr.writes().contains(&Reg::PC) && !instr.is_control_transfer() {
            return None;
        }
        if let Instr::Push { regs } = instr {
            if regs == 0 || regs & (1 << 15) != 0 {
                return None;
            }
        }
        if let Instr::Pop { regs } = instr {
            if regs == 0 {
                return None;
            }
        }
        Some(instr)
    }

    /// True for every opcode that can move `pc` non-sequentially.
    pub fn is_control_transfer(&self) -> bool {
        match self {
            Instr::B { .. } | Instr::BCond { .. } | Instr::Bl { .. } | Instr::Blx { .. } | Instr::BxLr => true,
            Instr::Pop { regs } => regs & (1 << 15) != 0,
            _ => false,
        }
    }

    /// Registers written by this instruction (excluding `pc` updates made
    /// by plain branches, and flags).
    pub fn writes(&self) -> Vec<Reg> {
        match *self {
            Instr::MovImm { rd, .. }
            | Instr::MovReg { rd, .. }
            | Instr::Ldr { rd, .. }
            | Instr::Add { rd, .. }
            | Instr::Sub { rd, .. } => vec![rd],
            Instr::Bl { .. } | Instr::Blx { .. } => vec![Reg::LR],
            Instr::Push { .. } => vec![Reg::SP],
            Instr::Pop { regs } => {
                let mut v = reg_list(regs);
                v.push(Reg::SP);
                v
            }
            // Secure services return their result in r0.
            Instr::NscCall { .. } => vec![Reg(0)],
            _ => Vec::new(),
        }
    }

    /// Registers read by this instruction.
    pub fn reads(&self) -> Vec<Reg> {
        match *self {
            Instr::MovReg { rs, .. } => vec![rs],
            Instr::Ldr { base, .. } => vec![base],
            Instr::Str { rs, base, .. } => vec![rs, base],
            Instr::Add { rn, op, .. } | Instr::Sub { rn, op, .. } | Instr::Cmp { rn, op } => match op {
                Operand::Reg(rm) => vec![rn, rm],
                Operand::Imm(_) => vec![rn],
            },
            Instr::Blx { rm } => vec![rm],
            Instr::BxLr => vec![Reg::LR],
            Instr::Push { regs } => {
                let mut v = reg_list(regs);
                v.push(Reg::SP);
                v
            }
            Instr::Pop { .. } => vec![Reg::SP],
            _ => Vec::new(),
        }
    }
}

/// Expands a register bitmask into registers in ascending order.
pub fn reg_list(mask: u16) -> Vec<Reg> {
    (0..16u8).filter(|i| mask & (1 << i) != 0).map(Reg).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_samples() {
        let samples = [
            Instr::MovImm { rd: Reg(3), imm: -5 },
            Instr::MovImm { rd: Reg(0), imm: 0x3_0000 },
            Instr::Ldr { rd: Reg(1), base: Reg::SP, offset: -8 },
            Instr::Add { rd: Reg(1), rn: Reg(2), op: Operand::Reg(Reg(12)) },
            Instr::Cmp { rn: Reg(4), op: Operand::Imm(-1) },
            Instr::BCond { cond: Cond::Hi, target: 0x8010 },
            Instr::Pop { regs: 1 << 4 | 1 << 15 },
            Instr::NscCall { service: 7 },
            Instr::Halt,
        ];
        for i in samples {
            assert_eq!(Instr::decode(i.encode()), Some(i), "{i:?}");
        }
    }

    #[test]
    fn zero_word_is_invalid() {
        assert_eq!(Instr::decode(0), None);
    }

    #[test]
    fn pc_destination_rejected() {
        let w = Instr::MovImm { rd: Reg::PC, imm: 4 }.encode();
        assert_eq!(Instr::decode(w), None);
        let w = Instr::Pop { regs: 1 << 15 }.encode();
        assert!(Instr::decode(w).unwrap().is_control_transfer());
    }

    #[test]
    fn compare_flags() {
        assert!(Cond::Lt.holds(Flags::compare(-1i32 as u32, 0)));
        assert!(Cond::Hi.holds(Flags::compare(-1i32 as u32, 0)));
        assert!(Cond::Eq.holds(Flags::compare(7, 7)));
        assert!(Cond::Lo.holds(Flags::compare(1, 5)));
        assert!(Cond::Ge.holds(Flags::compare(5, 5)));
        assert!(!Cond::Gt.holds(Flags::compare(5, 5)));
    }
}
