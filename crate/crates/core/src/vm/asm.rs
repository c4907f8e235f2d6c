// SPDX-License-Identifier: Apache-2.0

//! Assembly text format.
//!
//! One instruction per line, optional `label:` prefixes, `;` comments and
//! decimal or hex immediates:
//!
//! ```text
//! main:   mov r1, #0          ; counter
//! loop:   add r1, r1, #1
//!         cmp r1, #0x5
//!         bne loop
//!         mov r3, =handler    ; address of a label
//!         blx r3
//!         halt
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use thiserror::Error;

use super::isa::{Cond, Instr, Operand, Reg, IMM20_MAX, IMM20_MIN, INSTRUCTION_WIDTH};
use super::memory::{PMEM_BASE, PMEM_CAPACITY};
use super::nsc::TrampolineId;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AsmError {
    #[error("line {line}: {msg}")]
    ParseError { line: usize, msg: String },
    #[error("unresolved label `{0}`")]
    LinkError(String),
    #[error("line {line}: duplicate label `{label}`")]
    DuplicateLabel { line: usize, label: String },
    #[error("program of {0} bytes does not fit program memory")]
    ProgramTooLarge(usize),
}

/// Source-level operation: like [`Instr`] but with symbolic targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AsmOp {
    /// Any instruction without a symbolic operand.
    Plain(Instr),
    /// `mov rd, =label`
    MovLabel {
        rd: Reg,
        label: String,
    },
    B(String),
    BCond(Cond, String),
    Bl(String),
}

impl AsmOp {
    pub fn target(&self) -> Option<&str> {
        match self {
            AsmOp::B(t) | AsmOp::BCond(_, t) | AsmOp::Bl(t) => Some(t),
            AsmOp::MovLabel { label, .. } => Some(label),
            AsmOp::Plain(_) => None,
        }
    }

    /// A stand-in [`Instr`] with targets zeroed, for register analysis.
    pub fn shape(&self) -> Instr {
        match self {
            AsmOp::Plain(i) => *i,
            AsmOp::MovLabel { rd, .. } => Instr::MovImm { rd: *rd, imm: 0 },
            AsmOp::B(_) => Instr::B { target: 0 },
            AsmOp::BCond(cond, _) => Instr::BCond { cond: *cond, target: 0 },
            AsmOp::Bl(_) => Instr::Bl { target: 0 },
        }
    }

    pub fn is_control_transfer(&self) -> bool {
        self.shape().is_control_transfer()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stmt {
    pub labels: Vec<String>,
    pub op: AsmOp,
    /// 1-based source line, 0 for synthesized statements.
    pub line: usize,
}

impl Stmt {
    pub fn new(op: AsmOp) -> Self {
        Stmt { labels: Vec::new(), op, line: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Program {
    pub stmts: Vec<Stmt>,
    /// Labels that follow the last instruction.
    pub end_labels: Vec<String>,
}

/// Assembled program-memory image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub bytes: Vec<u8>,
    pub symbols: BTreeMap<String, u32>,
    pub entry: u32,
}

impl Image {
    pub fn word_at(&self, addr: u32) -> Option<u32> {
        let off = addr.checked_sub(PMEM_BASE)? as usize;
        let b = self.bytes.get(off..off + 4)?;
        Some(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn instr_at(&self, addr: u32) -> Option<Instr> {
        self.word_at(addr).and_then(Instr::decode)
    }

    pub fn instruction_count(&self) -> usize {
        self.bytes.len() / INSTRUCTION_WIDTH as usize
    }

    pub fn end(&self) -> u32 {
        PMEM_BASE + self.bytes.len() as u32
    }
}

fn perr(line: usize, msg: impl Into<String>) -> AsmError {
    AsmError::ParseError { line, msg: msg.into() }
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

pub fn parse_reg(s: &str) -> Option<Reg> {
    let s = s.to_ascii_lowercase();
    match s.as_str() {
        "sp" => Some(Reg::SP),
        "lr" => Some(Reg::LR),
        "pc" => Some(Reg::PC),
        _ => {
            let n: u8 = s.strip_prefix('r')?.parse().ok()?;
            (n <= 15).then_some(Reg(n))
        }
    }
}

fn parse_number(s: &str) -> Option<i64> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let v = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        i64::from_str_radix(hex, 16).ok()?
    } else {
        body.parse::<i64>().ok()?
    };
    Some(if neg { -v } else { v })
}

fn parse_imm(s: &str, line: usize, min: i64, max: i64) -> Result<i32, AsmError> {
    let body = s.strip_prefix('#').ok_or_else(|| perr(line, format!("expected immediate, got `{s}`")))?;
    let v = parse_number(body).ok_or_else(|| perr(line, format!("bad number `{body}`")))?;
    if v < min || v > max {
        return Err(perr(line, format!("immediate {v} out of range [{min}, {max}]")));
    }
    Ok(v as i32)
}

/// Splits operands on commas that are not inside `[]` or `{}`.
fn split_operands(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for c in s.chars() {
        match c {
            '[' | '{' => {
                depth += 1;
                cur.push(c)
            }
            ']' | '}' => {
                depth -= 1;
                cur.push(c)
            }
            ',' if depth == 0 => out.push(std::mem::take(&mut cur).trim().to_string()),
            _ => cur.push(c),
        }
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

fn parse_reg_list(s: &str, line: usize) -> Result<u16, AsmError> {
    let inner = s
        .strip_prefix('{')
        .and_then(|s| s.strip_suffix('}'))
        .ok_or_else(|| perr(line, format!("expected register list, got `{s}`")))?;
    let mut mask = 0u16;
    for part in inner.split(',') {
        let r = parse_reg(part.trim()).ok_or_else(|| perr(line, format!("bad register `{part}`")))?;
        mask |= 1 << r.0;
    }
    if mask == 0 {
        return Err(perr(line, "empty register list"));
    }
    Ok(mask)
}

fn parse_mem(s: &str, line: usize) -> Result<(Reg, i16), AsmError> {
    let inner = s
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| perr(line, format!("expected memory operand, got `{s}`")))?;
    let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
    let base = parse_reg(parts[0]).ok_or_else(|| perr(line, format!("bad base register `{}`", parts[0])))?;
    let offset = match parts.len() {
        1 => 0,
        2 => parse_imm(parts[1], line, i16::MIN as i64, i16::MAX as i64)? as i16,
        _ => return Err(perr(line, "malformed memory operand")),
    };
    Ok((base, offset))
}

fn operand(s: &str, line: usize) -> Result<Operand, AsmError> {
    if s.starts_with('#') {
        Ok(Operand::Imm(parse_imm(s, line, i16::MIN as i64, i16::MAX as i64)?))
    } else {
        parse_reg(s).map(Operand::Reg).ok_or_else(|| perr(line, format!("bad operand `{s}`")))
    }
}

fn data_reg(s: &str, line: usize) -> Result<Reg, AsmError> {
    let r = parse_reg(s).ok_or_else(|| perr(line, format!("bad register `{s}`")))?;
    if r == Reg::PC {
        return Err(perr(line, "pc is not a valid data operand"));
    }
    Ok(r)
}

fn label_operand(s: &str, line: usize) -> Result<String, AsmError> {
    if is_ident(s) {
        Ok(s.to_string())
    } else {
        Err(perr(line, format!("bad label `{s}`")))
    }
}

fn parse_op(mnemonic: &str, ops: &[String], line: usize) -> Result<AsmOp, AsmError> {
    let want = |n: usize| -> Result<(), AsmError> {
        if ops.len() == n {
            Ok(())
        } else {
            Err(perr(line, format!("`{mnemonic}` takes {n} operand(s), got {}", ops.len())))
        }
    };
    let plain = |i: Instr| Ok(AsmOp::Plain(i));
    match mnemonic {
        "mov" => {
            want(2)?;
            let rd = data_reg(&ops[0], line)?;
            if let Some(label) = ops[1].strip_prefix('=') {
                return Ok(AsmOp::MovLabel { rd, label: label_operand(label, line)? });
            }
            if ops[1].starts_with('#') {
                let imm = parse_imm(&ops[1], line, IMM20_MIN as i64, IMM20_MAX as i64)?;
                return plain(Instr::MovImm { rd, imm });
            }
            plain(Instr::MovReg { rd, rs: data_reg(&ops[1], line)? })
        }
        "ldr" | "str" => {
            want(2)?;
            let r = data_reg(&ops[0], line)?;
            let (base, offset) = parse_mem(&ops[1], line)?;
            if mnemonic == "ldr" {
                plain(Instr::Ldr { rd: r, base, offset })
            } else {
                plain(Instr::Str { rs: r, base, offset })
            }
        }
        "add" | "sub" => {
            let (rd, rn, op) = match ops.len() {
                2 => {
                    let rd = data_reg(&ops[0], line)?;
                    (rd, rd, operand(&ops[1], line)?)
                }
                3 => (data_reg(&ops[0], line)?, data_reg(&ops[1], line)?, operand(&ops[2], line)?),
                n => return Err(perr(line, format!("`{mnemonic}` takes 2 or 3 operands, got {n}"))),
            };
            if op == Operand::Reg(Reg::PC) {
                return Err(perr(line, "pc is not a valid data operand"));
            }
            if mnemonic == "add" {
                plain(Instr::Add { rd, rn, op })
            } else {
                plain(Instr::Sub { rd, rn, op })
            }
        }
        "cmp" => {
            want(2)?;
            plain(Instr::Cmp { rn: data_reg(&ops[0], line)?, op: operand(&ops[1], line)? })
        }
        "b" => {
            want(1)?;
            Ok(AsmOp::B(label_operand(&ops[0], line)?))
        }
        "bl" => {
            want(1)?;
            Ok(AsmOp::Bl(label_operand(&ops[0], line)?))
        }
        "blx" => {
            want(1)?;
            plain(Instr::Blx { rm: data_reg(&ops[0], line)? })
        }
        "bx" => {
            want(1)?;
            if !ops[0].eq_ignore_ascii_case("lr") {
                return Err(perr(line, "only `bx lr` is supported"));
            }
            plain(Instr::BxLr)
        }
        "push" => {
            want(1)?;
            let regs = parse_reg_list(&ops[0], line)?;
            if regs & (1 << 15) != 0 {
                return Err(perr(line, "cannot push pc"));
            }
            plain(Instr::Push { regs })
        }
        "pop" => {
            want(1)?;
            plain(Instr::Pop { regs: parse_reg_list(&ops[0], line)? })
        }
        "nsc_call" => {
            want(1)?;
            let service = parse_imm(&ops[0], line, 0, u16::MAX as i64)? as u16;
            plain(Instr::NscCall { service })
        }
        "halt" => {
            want(0)?;
            plain(Instr::Halt)
        }
        m if m.len() == 3 && m.starts_with('b') => match Cond::from_mnemonic(&m[1..]) {
            Some(cond) => {
                want(1)?;
                Ok(AsmOp::BCond(cond, label_operand(&ops[0], line)?))
            }
            None => Err(perr(line, format!("unknown mnemonic `{m}`"))),
        },
        m => Err(perr(line, format!("unknown mnemonic `{m}`"))),
    }
}

pub fn parse(src: &str) -> Result<Program, AsmError> {
    let mut program = Program::default();
    let mut pending: Vec<String> = Vec::new();
    for (idx, raw) in src.lines().enumerate() {
        let line = idx + 1;
        let mut text = raw.split(';').next().unwrap_or("").trim();
        // Leading `label:` prefixes.
        while let Some(colon) = text.find(':') {
            let candidate = text[..colon].trim();
            if !is_ident(candidate) {
                break;
            }
            pending.push(candidate.to_string());
            text = text[colon + 1..].trim();
        }
        if text.is_empty() {
            continue;
        }
        let (mnemonic, rest) = match text.find(char::is_whitespace) {
            Some(i) => (&text[..i], text[i..].trim()),
            None => (text, ""),
        };
        let ops = split_operands(rest);
        let op = parse_op(&mnemonic.to_ascii_lowercase(), &ops, line)?;
        program.stmts.push(Stmt { labels: std::mem::take(&mut pending), op, line });
    }
    program.end_labels = pending;
    Ok(program)
}

impl fmt::Display for AsmOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AsmOp::MovLabel { rd, label } => write!(f, "mov {rd}, ={label}"),
            AsmOp::B(t) => write!(f, "b {t}"),
            AsmOp::BCond(c, t) => write!(f, "b{} {t}", c.mnemonic()),
            AsmOp::Bl(t) => write!(f, "bl {t}"),
            AsmOp::Plain(i) => fmt_instr(f, i),
        }
    }
}

fn fmt_operand(op: &Operand) -> String {
    match op {
        Operand::Reg(r) => r.to_string(),
        Operand::Imm(i) => format!("#{i}"),
    }
}

fn fmt_reg_list(mask: u16) -> String {
    let regs: Vec<String> = super::isa::reg_list(mask).iter().map(Reg::to_string).collect();
    format!("{{{}}}", regs.join(", "))
}

fn fmt_mem(base: Reg, offset: i16) -> String {
    if offset == 0 {
        format!("[{base}]")
    } else {
        format!("[{base}, #{offset}]")
    }
}

/// Prints a decoded instruction (targets as hex addresses).
pub fn fmt_instr(f: &mut impl fmt::Write, i: &Instr) -> fmt::Result {
    match *i {
        Instr::MovImm { rd, imm } => write!(f, "mov {rd}, #{imm}"),
        Instr::MovReg { rd, rs } => write!(f, "mov {rd}, {rs}"),
        Instr::Ldr { rd, base, offset } => write!(f, "ldr {rd}, {}", fmt_mem(base, offset)),
        Instr::Str { rs, base, offset } => write!(f, "str {rs}, {}", fmt_mem(base, offset)),
        Instr::Add { rd, rn, op } => write!(f, "add {rd}, {rn}, {}", fmt_operand(&op)),
        Instr::Sub { rd, rn, op } => write!(f, "sub {rd}, {rn}, {}", fmt_operand(&op)),
        Instr::Cmp { rn, op } => write!(f, "cmp {rn}, {}", fmt_operand(&op)),
        Instr::B { target } => write!(f, "b {target:#x}"),
        Instr::BCond { cond, target } => write!(f, "b{} {target:#x}", cond.mnemonic()),
        Instr::Bl { target } => write!(f, "bl {target:#x}"),
        Instr::Blx { rm } => write!(f, "blx {rm}"),
        Instr::BxLr => write!(f, "bx lr"),
        Instr::Push { regs } => write!(f, "push {}", fmt_reg_list(regs)),
        Instr::Pop { regs } => write!(f, "pop {}", fmt_reg_list(regs)),
        Instr::NscCall { service } => write!(f, "nsc_call #{service}"),
        Instr::Halt => write!(f, "halt"),
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for stmt in &self.stmts {
            for l in &stmt.labels {
                writeln!(f, "{l}:")?;
            }
            writeln!(f, "    {}", stmt.op)?;
        }
        for l in &self.end_labels {
            writeln!(f, "{l}:")?;
        }
        Ok(())
    }
}

impl Program {
    pub fn instruction_count(&self) -> usize {
        self.stmts.len()
    }

    /// Label → statement index (`stmts.len()` for end labels).
    pub fn label_index(&self) -> HashMap<&str, usize> {
        let mut m = HashMap::new();
        for (i, s) in self.stmts.iter().enumerate() {
            for l in &s.labels {
                m.insert(l.as_str(), i);
            }
        }
        for l in &self.end_labels {
            m.insert(l.as_str(), self.stmts.len());
        }
        m
    }
}

pub fn address_of_index(index: usize) -> u32 {
    PMEM_BASE + index as u32 * INSTRUCTION_WIDTH
}

pub fn index_of_address(addr: u32) -> usize {
    ((addr - PMEM_BASE) / INSTRUCTION_WIDTH) as usize
}

/// Resolves labels and encodes `program` into a program-memory image.
pub fn assemble(program: &Program) -> Result<Image, AsmError> {
    let size = program.stmts.len() * INSTRUCTION_WIDTH as usize;
    if size > PMEM_CAPACITY as usize {
        return Err(AsmError::ProgramTooLarge(size));
    }
    let mut symbols = BTreeMap::new();
    let mut define = |label: &str, addr: u32, line: usize| -> Result<(), AsmError> {
        if TrampolineId::from_symbol(label).is_some() || symbols.insert(label.to_string(), addr).is_some() {
            return Err(AsmError::DuplicateLabel { line, label: label.to_string() });
        }
        Ok(())
    };
    for (i, s) in program.stmts.iter().enumerate() {
        for l in &s.labels {
            define(l, address_of_index(i), s.line)?;
        }
    }
    for l in &program.end_labels {
        define(l, address_of_index(program.stmts.len()), 0)?;
    }
    let resolve = |label: &str| -> Result<u32, AsmError> {
        if let Some(t) = TrampolineId::from_symbol(label) {
            return Ok(t.address());
        }
        symbols.get(label).copied().ok_or_else(|| AsmError::LinkError(label.to_string()))
    };
    let mut bytes = Vec::with_capacity(size);
    for s in &program.stmts {
        let instr = match &s.op {
            AsmOp::Plain(i) => *i,
            AsmOp::MovLabel { rd, label } => Instr::MovImm { rd: *rd, imm: resolve(label)? as i32 },
            AsmOp::B(t) => Instr::B { target: resolve(t)? },
            AsmOp::BCond(cond, t) => Instr::BCond { cond: *cond, target: resolve(t)? },
            AsmOp::Bl(t) => Instr::Bl { target: resolve(t)? },
        };
        bytes.extend_from_slice(&instr.encode().to_be_bytes());
    }
    let entry = symbols.get("main").copied().unwrap_or(PMEM_BASE);
    Ok(Image { bytes, symbols, entry })
}

pub fn assemble_str(src: &str) -> Result<Image, AsmError> {
    assemble(&parse(src)?)
}
