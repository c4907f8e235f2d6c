// SPDX-License-Identifier: Apache-2.0

use super::asm::{self, AsmError, Image};
use super::isa::{reg_list, Flags, Instr, Operand, Reg, INSTRUCTION_WIDTH};
use super::memory::*;
use super::nsc::{in_nsc_window, TrampolineId};
use crate::crypto::{sha256, Digest};

pub type RegisterFile = [u32; 16];

/// Report-forcing trigger raised by the hardware model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Trigger {
    /// Secure timer deadline.
    T1,
    /// App completion.
    T2,
    /// Log capacity reached.
    T3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NscGate {
    Trampoline(TrampolineId),
    Service(u16),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    ReadViolation,
    WriteViolation,
    ExecViolation,
    Unmapped,
    Unaligned,
    InvalidInstruction,
    /// Entry into the NSC window at an address that is not a gate.
    NscViolation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    Executed,
    Trigger(Trigger),
    NscEntry { gate: NscGate, regs: RegisterFile },
    Fault { kind: FaultKind, addr: u32 },
    Halted,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SecureTimer {
    pub deadline: u64,
    pub elapsed: u64,
    pub active: bool,
    pub paused: bool,
}

impl SecureTimer {
    pub fn arm(&mut self, deadline: u64) {
        *self = SecureTimer { deadline, elapsed: 0, active: true, paused: false };
    }

    pub fn clear_and_pause(&mut self) {
        self.elapsed = 0;
        self.paused = true;
    }

    pub fn resume(&mut self) {
        self.paused = false;
    }

    pub fn disarm(&mut self) {
        *self = SecureTimer::default();
    }

    pub fn running(&self) -> bool {
        self.active && !self.paused
    }

    pub fn expired(&self) -> bool {
        self.running() && self.elapsed >= self.deadline
    }
}

/// One memory access attempt, recorded when auditing is enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessRecord {
    pub addr: u32,
    pub kind: AccessKind,
    pub world: World,
    pub allowed: bool,
}

#[derive(Debug, Clone)]
pub struct Machine {
    pub regs: RegisterFile,
    pub flags: Flags,
    pub cycle_count: u64,
    pub world: World,
    pub perm_map: PermissionMap,
    pub timer: SecureTimer,
    pmem: Vec<u8>,
    dmem: Vec<u8>,
    secure_mem: Vec<u8>,
    retained_mem: Vec<u8>,
    halted: bool,
    boot_entry: u32,
    audit: Option<Vec<AccessRecord>>,
}

enum Outcome {
    Next,
    Jump(u32),
    Fault(FaultKind, u32),
    Halt,
    Service(u16),
}

impl Machine {
    /// Machine with `pmem` loaded at the program-memory base.
    pub fn with_image(pmem: Vec<u8>, entry: u32) -> Machine {
        let mut m = Machine {
            regs: [0; 16],
            flags: Flags::default(),
            cycle_count: 0,
            world: World::Secure,
            perm_map: PermissionMap::new(pmem.len() as u32),
            timer: SecureTimer::default(),
            pmem,
            dmem: vec![0; DMEM_SIZE as usize],
            secure_mem: vec![0; SECURE_SIZE as usize],
            retained_mem: vec![0; RETAINED_SIZE as usize],
            halted: false,
            boot_entry: entry,
            audit: None,
        };
        m.regs[Reg::SP.index()] = STACK_TOP;
        m.regs[Reg::PC.index()] = entry;
        m
    }

    pub fn from_image(image: &Image) -> Machine {
        Machine::with_image(image.bytes.clone(), image.entry)
    }

    /// Assembles `src` and loads it.
    pub fn load_program(src: &str) -> Result<Machine, AsmError> {
        Ok(Machine::from_image(&asm::assemble_str(src)?))
    }

    pub fn pc(&self) -> u32 {
        self.regs[Reg::PC.index()]
    }

    pub fn set_pc(&mut self, pc: u32) {
        self.regs[Reg::PC.index()] = pc;
    }

    pub fn reg(&self, r: Reg) -> u32 {
        self.regs[r.index()]
    }

    pub fn set_reg(&mut self, r: Reg, v: u32) {
        self.regs[r.index()] = v;
    }

    pub fn is_halted(&self) -> bool {
        self.halted
    }

    /// Clears registers and flags and points `pc` at the entry, keeping all
    /// memory. Used to start a fresh App run.
    pub fn restart(&mut self) {
        self.regs = [0; 16];
        self.regs[Reg::SP.index()] = STACK_TOP;
        self.regs[Reg::PC.index()] = self.boot_entry;
        self.flags = Flags::default();
        self.halted = false;
    }

    /// Permanently stops execution (used by the freeze remediation).
    pub fn halt(&mut self) {
        self.halted = true;
    }

    pub fn boot_entry(&self) -> u32 {
        self.boot_entry
    }

    pub fn pmem(&self) -> &[u8] {
        &self.pmem
    }

    /// Secure-World view of program memory.
    pub fn pmem_mut(&mut self) -> &mut [u8] {
        &mut self.pmem
    }

    pub fn dmem(&self) -> &[u8] {
        &self.dmem
    }

    pub fn secure_mem(&self) -> &[u8] {
        &self.secure_mem
    }

    pub fn retained(&self) -> &[u8] {
        &self.retained_mem
    }

    pub fn retained_mut(&mut self) -> &mut [u8] {
        &mut self.retained_mem
    }

    pub fn enable_audit(&mut self) {
        self.audit = Some(Vec::new());
    }

    pub fn audit_log(&self) -> &[AccessRecord] {
        self.audit.as_deref().unwrap_or(&[])
    }

    pub fn hash_pmem(&self) -> Digest {
        sha256(&self.pmem)
    }

    pub fn lock_pmem(&mut self) -> Result<(), MemoryError> {
        if self.world != World::Secure {
            return Err(MemoryError::WorldViolation);
        }
        self.perm_map.set_flags(RegionId::Pmem, Some(false), None, World::Secure)?;
        self.perm_map.reconfigurable_by_ns = false;
        Ok(())
    }

    pub fn unlock_pmem(&mut self) -> Result<(), MemoryError> {
        if self.world != World::Secure {
            return Err(MemoryError::WorldViolation);
        }
        self.perm_map.set_flags(RegionId::Pmem, Some(true), None, World::Secure)?;
        self.perm_map.reconfigurable_by_ns = true;
        Ok(())
    }

    pub fn set_dmem_executable(&mut self, executable: bool) -> Result<(), MemoryError> {
        if self.world != World::Secure {
            return Err(MemoryError::WorldViolation);
        }
        self.perm_map.set_flags(RegionId::Dmem, None, Some(executable), World::Secure)
    }

    /// Software reset: volatile state cleared, program memory and the
    /// retained region preserved bit-exactly.
    pub fn reset(&mut self) {
        self.regs = [0; 16];
        self.regs[Reg::SP.index()] = STACK_TOP;
        self.regs[Reg::PC.index()] = self.boot_entry;
        self.flags = Flags::default();
        self.cycle_count = 0;
        self.world = World::Secure;
        self.perm_map = PermissionMap::new(self.pmem.len() as u32);
        self.timer = SecureTimer::default();
        self.dmem.fill(0);
        self.secure_mem.fill(0);
        self.halted = false;
    }

    fn record(&mut self, addr: u32, kind: AccessKind, allowed: bool) {
        let world = self.world;
        if let Some(a) = self.audit.as_mut() {
            a.push(AccessRecord { addr, kind, world, allowed });
        }
    }

    fn check(&mut self, addr: u32, kind: AccessKind) -> Result<(), (FaultKind, u32)> {
        let verdict = self.perm_map.check_access(addr, kind, self.world);
        let allowed = verdict == Ok(Access::Allowed);
        self.record(addr, kind, allowed);
        match verdict {
            Err(_) => Err((FaultKind::Unmapped, addr)),
            Ok(Access::Violation) => Err((
                match kind {
                    AccessKind::Read => FaultKind::ReadViolation,
                    AccessKind::Write => FaultKind::WriteViolation,
                    AccessKind::Execute => FaultKind::ExecViolation,
                },
                addr,
            )),
            Ok(Access::Allowed) => {
                if !addr.is_multiple_of(4) {
                    Err((FaultKind::Unaligned, addr))
                } else {
                    Ok(())
                }
            }
        }
    }

    fn backing(&mut self, addr: u32) -> Option<(&mut Vec<u8>, usize)> {
        let (mem, base) = match self.perm_map.region_of(addr)?.id {
            RegionId::Pmem => (&mut self.pmem, PMEM_BASE),
            RegionId::Dmem => (&mut self.dmem, DMEM_BASE),
            RegionId::Secure => (&mut self.secure_mem, SECURE_BASE),
            RegionId::Retained => (&mut self.retained_mem, RETAINED_BASE),
            RegionId::MpuCtrl | RegionId::Nsc => return None,
        };
        let off = (addr - base) as usize;
        (off + 4 <= mem.len()).then_some((mem, off))
    }

    fn load_word(&mut self, addr: u32) -> Result<u32, (FaultKind, u32)> {
        self.check(addr, AccessKind::Read)?;
        let (mem, off) = self.backing(addr).ok_or((FaultKind::Unmapped, addr))?;
        Ok(u32::from_be_bytes(mem[off..off + 4].try_into().unwrap()))
    }

    fn store_word(&mut self, addr: u32, value: u32) -> Result<(), (FaultKind, u32)> {
        self.check(addr, AccessKind::Write)?;
        if addr == MPU_CTRL {
            let world = self.world;
            return self
                .perm_map
                .set_flags(RegionId::Pmem, Some(value & 1 != 0), None, world)
                .and_then(|_| self.perm_map.set_flags(RegionId::Dmem, None, Some(value & 2 != 0), world))
                .map_err(|_| (FaultKind::WriteViolation, addr));
        }
        let (mem, off) = self.backing(addr).ok_or((FaultKind::Unmapped, addr))?;
        mem[off..off + 4].copy_from_slice(&value.to_be_bytes());
        Ok(())
    }

    /// Reads a word without permission checks (Secure-World helper).
    pub fn peek_word(&mut self, addr: u32) -> Option<u32> {
        let (mem, off) = self.backing(addr)?;
        Some(u32::from_be_bytes(mem[off..off + 4].try_into().unwrap()))
    }

    /// Executes one instruction or raises one trigger, gate entry or fault.
    pub fn step(&mut self) -> Event {
        self.cycle_count += 1;
        if self.halted {
            return Event::Halted;
        }
        let ns = self.world == World::NonSecure;
        if ns && self.timer.expired() {
            return Event::Trigger(Trigger::T1);
        }
        let pc = self.pc();
        if in_nsc_window(pc) {
            return match (ns, TrampolineId::from_address(pc)) {
                (true, Some(t)) => {
                    self.world = World::Secure;
                    Event::NscEntry { gate: NscGate::Trampoline(t), regs: self.regs }
                }
                _ => Event::Fault { kind: FaultKind::NscViolation, addr: pc },
            };
        }
        let word = match self.check(pc, AccessKind::Execute) {
            Ok(()) => self.peek_word(pc),
            Err((kind, addr)) => return Event::Fault { kind, addr },
        };
        let Some(instr) = word.and_then(Instr::decode) else {
            return Event::Fault { kind: FaultKind::InvalidInstruction, addr: pc };
        };
        let event = match self.execute(instr, pc) {
            Outcome::Next => {
                self.set_pc(pc + INSTRUCTION_WIDTH);
                Event::Executed
            }
            Outcome::Jump(target) => {
                self.set_pc(target);
                Event::Executed
            }
            Outcome::Fault(kind, addr) => return Event::Fault { kind, addr },
            Outcome::Halt => {
                self.halted = true;
                Event::Halted
            }
            Outcome::Service(service) => {
                self.set_pc(pc + INSTRUCTION_WIDTH);
                self.world = World::Secure;
                Event::NscEntry { gate: NscGate::Service(service), regs: self.regs }
            }
        };
        if ns && self.timer.running() {
            self.timer.elapsed += 1;
        }
        event
    }

    fn operand(&self, op: Operand) -> u32 {
        match op {
            Operand::Reg(r) => self.reg(r),
            Operand::Imm(i) => i as u32,
        }
    }

    fn execute(&mut self, instr: Instr, pc: u32) -> Outcome {
        let next = pc + INSTRUCTION_WIDTH;
        macro_rules! mem {
            ($e:expr) => {
                match $e {
                    Ok(v) => v,
                    Err((kind, addr)) => return Outcome::Fault(kind, addr),
                }
            };
        }
        match instr {
            Instr::MovImm { rd, imm } => self.set_reg(rd, imm as u32),
            Instr::MovReg { rd, rs } => self.set_reg(rd, self.reg(rs)),
            Instr::Ldr { rd, base, offset } => {
                let addr = self.reg(base).wrapping_add(offset as i32 as u32);
                let v = mem!(self.load_word(addr));
                self.set_reg(rd, v);
            }
            Instr::Str { rs, base, offset } => {
                let addr = self.reg(base).wrapping_add(offset as i32 as u32);
                mem!(self.store_word(addr, self.reg(rs)));
            }
            Instr::Add { rd, rn, op } => self.set_reg(rd, self.reg(rn).wrapping_add(self.operand(op))),
            Instr::Sub { rd, rn, op } => self.set_reg(rd, self.reg(rn).wrapping_sub(self.operand(op))),
            Instr::Cmp { rn, op } => self.flags = Flags::compare(self.reg(rn), self.operand(op)),
            Instr::B { target } => return Outcome::Jump(target),
            Instr::BCond { cond, target } => {
                if cond.holds(self.flags) {
                    return Outcome::Jump(target);
                }
            }
            Instr::Bl { target } => {
                self.set_reg(Reg::LR, next);
                return Outcome::Jump(target);
            }
            Instr::Blx { rm } => {
                let target = self.reg(rm);
                self.set_reg(Reg::LR, next);
                return Outcome::Jump(target);
            }
            Instr::BxLr => return Outcome::Jump(self.reg(Reg::LR)),
            Instr::Push { regs } => {
                let list = reg_list(regs);
                let sp = self.reg(Reg::SP).wrapping_sub(4 * list.len() as u32);
                // Validate every slot first so a fault leaves memory untouched.
                for i in 0..list.len() as u32 {
                    mem!(self.check(sp.wrapping_add(4 * i), AccessKind::Write));
                }
                for (i, r) in list.iter().enumerate() {
                    let v = self.reg(*r);
                    mem!(self.store_word(sp.wrapping_add(4 * i as u32), v));
                }
                self.set_reg(Reg::SP, sp);
            }
            Instr::Pop { regs } => {
                let list = reg_list(regs);
                let sp = self.reg(Reg::SP);
                let mut values = Vec::with_capacity(list.len());
                for i in 0..list.len() as u32 {
                    values.push(mem!(self.load_word(sp.wrapping_add(4 * i))));
                }
                self.set_reg(Reg::SP, sp.wrapping_add(4 * list.len() as u32));
                let mut jump = None;
                for (r, v) in list.into_iter().zip(values) {
                    if r == Reg::PC {
                        jump = Some(v);
                    } else {
                        self.set_reg(r, v);
                    }
                }
                if let Some(t) = jump {
                    return Outcome::Jump(t);
                }
            }
            Instr::NscCall { service } => return Outcome::Service(service),
            Instr::Halt => return Outcome::Halt,
        }
        Outcome::Next
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ns(src: &str) -> Machine {
        let mut m = Machine::load_program(src).unwrap();
        m.world = World::NonSecure;
        m
    }

    fn run(m: &mut Machine, limit: usize) -> Event {
        for _ in 0..limit {
            match m.step() {
                Event::Executed => {}
                e => return e,
            }
        }
        Event::Executed
    }

    #[test]
    fn load_post_state() {
        let m = Machine::load_program("nop_before: mov r0, #1\nmain: halt").unwrap();
        assert_eq!(m.pc(), 4);
        assert_eq!(m.reg(Reg::SP), STACK_TOP);
        assert_eq!(m.cycle_count, 0);
        assert_eq!(m.world, World::Secure);
    }

    #[test]
    fn timer_fires_at_deadline() {
        let mut m = ns("main: b main");
        m.timer.arm(10);
        m.timer.elapsed = 10;
        assert_eq!(m.step(), Event::Trigger(Trigger::T1));
    }

    #[test]
    fn timer_counts_only_ns_cycles() {
        let mut m = ns("main: b main");
        m.timer.arm(10);
        for _ in 0..10 {
            assert_eq!(m.step(), Event::Executed);
        }
        assert_eq!(m.step(), Event::Trigger(Trigger::T1));
        m.timer.arm(10);
        m.world = World::Secure;
        for _ in 0..20 {
            m.step();
        }
        assert_eq!(m.timer.elapsed, 0);
    }

    #[test]
    fn write_to_locked_pmem_faults() {
        let mut m = Machine::load_program("main: mov r1, #0\n str r0, [r1]\n halt").unwrap();
        m.lock_pmem().unwrap();
        m.world = World::NonSecure;
        assert_eq!(run(&mut m, 10), Event::Fault { kind: FaultKind::WriteViolation, addr: 0 });
    }

    #[test]
    fn lock_unlock_then_write_succeeds() {
        let mut m = Machine::load_program("main: mov r1, #0\n str r0, [r1]\n halt").unwrap();
        m.lock_pmem().unwrap();
        m.unlock_pmem().unwrap();
        m.world = World::NonSecure;
        assert_eq!(run(&mut m, 10), Event::Halted);
    }

    #[test]
    fn ns_caller_cannot_lock() {
        let mut m = ns("main: halt");
        assert_eq!(m.lock_pmem(), Err(MemoryError::WorldViolation));
    }

    #[test]
    fn ns_cannot_unlock_via_mpu_register_once_revoked() {
        let src = format!("main: mov r1, #{MPU_CTRL}\n mov r0, #1\n str r0, [r1]\n halt");
        let mut m = Machine::load_program(&src).unwrap();
        m.lock_pmem().unwrap();
        m.world = World::NonSecure;
        assert_eq!(run(&mut m, 10), Event::Fault { kind: FaultKind::WriteViolation, addr: MPU_CTRL });
        // Before revocation the same write reconfigures the map.
        let mut m = Machine::load_program(&src).unwrap();
        m.world = World::NonSecure;
        assert_eq!(run(&mut m, 10), Event::Halted);
    }

    #[test]
    fn bl_into_trampoline_yields_nsc_entry() {
        let mut m = ns("main: bl trampoline_ret\n halt");
        assert_eq!(m.step(), Event::Executed);
        match m.step() {
            Event::NscEntry { gate, regs } => {
                assert_eq!(gate, NscGate::Trampoline(TrampolineId::Ret));
                assert_eq!(regs[Reg::LR.index()], 4);
            }
            e => panic!("{e:?}"),
        }
        assert_eq!(m.world, World::Secure);
    }

    #[test]
    fn non_gate_nsc_address_faults() {
        let mut m = ns(&format!("main: mov r0, #{}\n blx r0", NSC_BASE + 0x40));
        assert_eq!(run(&mut m, 5), Event::Fault { kind: FaultKind::NscViolation, addr: NSC_BASE + 0x40 });
    }

    #[test]
    fn secure_memory_isolated() {
        let mut m = ns(&format!("main: mov r1, #{SECURE_BASE}\n ldr r0, [r1]\n halt"));
        assert_eq!(run(&mut m, 5), Event::Fault { kind: FaultKind::ReadViolation, addr: SECURE_BASE });
    }

    #[test]
    fn reset_semantics() {
        let mut m = ns("main: mov r0, #7\n str r0, [sp, #-4]\n halt");
        m.retained_mut()[..2].copy_from_slice(&[0xDE, 0xAD]);
        let pmem_before = m.pmem().to_vec();
        run(&mut m, 5);
        assert!(m.dmem().iter().any(|b| *b != 0));
        m.reset();
        assert_eq!(&m.retained()[..2], &[0xDE, 0xAD]);
        assert!(m.dmem().iter().all(|b| *b == 0));
        assert_eq!(m.cycle_count, 0);
        assert_eq!(m.world, World::Secure);
        assert_eq!(m.pmem(), &pmem_before[..]);
        assert_eq!(m.reg(Reg(0)), 0);
    }

    #[test]
    fn empty_pmem_hash() {
        let m = Machine::with_image(Vec::new(), 0);
        assert_eq!(
            crate::crypto::hex(&m.hash_pmem()),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn pmem_hash_sensitivity() {
        let a = Machine::load_program("main: mov r0, #1\n halt").unwrap();
        let b = Machine::load_program("main: mov r0, #1\n halt").unwrap();
        assert_eq!(a.hash_pmem(), b.hash_pmem());
        let mut c = b.clone();
        c.pmem_mut()[3] ^= 1;
        assert_ne!(a.hash_pmem(), c.hash_pmem());
    }

    #[test]
    fn push_pop_pc_returns() {
        let mut m = ns("main: bl f\n halt\nf: push {r4, lr}\n mov r4, #3\n pop {r4, pc}");
        assert_eq!(run(&mut m, 20), Event::Halted);
        assert_eq!(m.reg(Reg(4)), 0);
        assert_eq!(m.reg(Reg::SP), STACK_TOP);
    }

    #[test]
    fn cycle_count_strictly_increases() {
        let mut m = ns("main: halt");
        let mut last = m.cycle_count;
        for _ in 0..5 {
            m.step();
            assert!(m.cycle_count > last);
            last = m.cycle_count;
        }
    }
}
