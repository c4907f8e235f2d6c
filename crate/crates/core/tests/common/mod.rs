// SPDX-License-Identifier: Apache-2.0

//! Test oracles shared by the integration suites.
//!
//! `reference_run` executes the *uninstrumented* program on a bare machine
//! and derives the destination stream the device must log from the layout
//! rules alone: a taken branch logs the instrumented target, a fallthrough
//! logs the address after the branch's inserted trampoline call, a return
//! logs the instrumented return site of the matching call, and the App end
//! logs the exit sentinel.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rtaudit::crypto::Key;
use rtaudit::instrument::{InstrumentationMap, Instrumented};
use rtaudit::protocol::{Message, RuntimeReport};
use rtaudit::supervisor::{Prover, ProverConfig, EXIT_SENTINEL};
use rtaudit::verifier::{Phase, Verifier, VerifierConfig};
use rtaudit::vm::isa::INSTRUCTION_WIDTH;
use rtaudit::vm::{assemble_str, AppIo, Event, Image, Instr, Machine, NscGate, Reg, World};

pub const KEY: Key = Key([0x5A; 32]);
pub const DATA_BASE: u32 = 0x10100;
pub const DATA_WORDS: usize = 64;

#[derive(Debug, Clone)]
pub struct Reference {
    pub trace: Vec<u32>,
    pub regs: [u32; 16],
    pub data: Vec<u8>,
    /// How often each static loop header was entered from above.
    pub loop_entries: usize,
    pub steps: u64,
}

fn instrumented_addr(map: &InstrumentationMap, a: u32) -> u32 {
    map.instrumented(a).unwrap_or_else(|| panic!("no instrumented address for {a:#x}"))
}

/// Instrumented return address for every original return site.
fn return_sites(orig: &Image, inst: &Instrumented) -> HashMap<u32, u32> {
    let mut out = HashMap::new();
    for s in (0..orig.bytes.len() as u32).step_by(INSTRUCTION_WIDTH as usize) {
        if let Some(Instr::Bl { .. } | Instr::Blx { .. }) = orig.instr_at(s) {
            let mut at = instrumented_addr(&inst.map, s);
            while !matches!(inst.image.instr_at(at), Some(Instr::Bl { .. })) {
                at += INSTRUCTION_WIDTH;
            }
            out.insert(s + INSTRUCTION_WIDTH, at + INSTRUCTION_WIDTH);
        }
    }
    out
}

pub fn reference_run(src: &str, inst: &Instrumented, input: &[u32], seed: u64) -> Reference {
    let orig = assemble_str(src).expect("reference assembles");
    let rets = return_sites(&orig, inst);
    let map_code = |v: u32| rets.get(&v).copied().unwrap_or_else(|| instrumented_addr(&inst.map, v));
    let headers: Vec<(u32, u32)> = inst.map.loops.iter().map(|l| (l.taken_dest_addr, l.backward_branch_addr)).collect();

    let mut m = Machine::from_image(&orig);
    m.world = World::NonSecure;
    let mut io = AppIo::new(input.to_vec(), seed);
    let mut trace = Vec::new();
    let mut loop_entries = 0;
    let mut steps = 0;
    let mut prev_pc = u32::MAX;
    loop {
        steps += 1;
        assert!(steps < 20_000_000, "reference run does not terminate");
        let pc = m.pc();
        if headers.iter().any(|&(h, b)| h == pc && prev_pc != b) {
            loop_entries += 1;
        }
        let instr = orig.instr_at(pc).expect("reference pc stays in the image");
        match m.step() {
            Event::Executed => {}
            Event::NscEntry { gate: NscGate::Service(n), .. } => {
                let v = io.service(n).expect("known service");
                m.set_reg(Reg(0), v);
                m.world = World::NonSecure;
            }
            Event::Halted => {
                trace.push(EXIT_SENTINEL);
                break;
            }
            e => panic!("reference run at {pc:#x}: {e:?}"),
        }
        let next = m.pc();
        match instr {
            Instr::BCond { target, .. } => {
                if next == target {
                    trace.push(instrumented_addr(&inst.map, target));
                } else {
                    trace.push(instrumented_addr(&inst.map, pc) + 2 * INSTRUCTION_WIDTH);
                }
            }
            Instr::Blx { .. } => trace.push(instrumented_addr(&inst.map, next)),
            Instr::BxLr => trace.push(map_code(next)),
            Instr::Pop { regs } if regs & (1 << 15) != 0 => trace.push(map_code(next)),
            Instr::Halt => {
                trace.push(EXIT_SENTINEL);
                break;
            }
            _ => {}
        }
        prev_pc = pc;
    }
    let off = (DATA_BASE - 0x10000) as usize;
    Reference { trace, regs: m.regs, data: m.dmem()[off..off + DATA_WORDS * 4].to_vec(), loop_entries, steps }
}

/// Outcome of a lossless prover/verifier session.
pub struct Session {
    pub prover: Prover,
    pub verifier: Verifier,
    /// Fresh reports in arrival order.
    pub reports: Vec<RuntimeReport>,
    /// Registers at the moment the App finished.
    pub exit_regs: Option<[u32; 16]>,
}

pub fn session(inst: &Instrumented, image: &Image, input: &[u32], seed: u64, log_max: usize, delta: u64) -> Session {
    let pc = ProverConfig { log_max, ..ProverConfig::new(KEY) };
    let mut prover = Prover::new(image, AppIo::new(input.to_vec(), seed), pc);
    let mut verifier =
        Verifier::new(&inst.image, &inst.map, VerifierConfig { delta, ..VerifierConfig::new(KEY) }).unwrap();
    let mut reports = Vec::new();
    let mut exit_regs = None;
    verifier.start(0);
    for _ in 0..50_000_000u64 {
        for msg in verifier.take_outbox() {
            prover.receive(&msg);
        }
        if verifier.phase() == Phase::Finished {
            break;
        }
        let regs = prover.machine.regs;
        prover.step();
        if exit_regs.is_none() && prover.context().final_report {
            exit_regs = Some(regs);
        }
        for msg in prover.take_outbox() {
            if let Ok(Message::Report(r)) = Message::decode(&msg) {
                if reports.last() != Some(&r) {
                    reports.push(r);
                }
            }
            verifier.receive(&msg);
        }
        verifier.tick(prover.clock());
    }
    Session { prover, verifier, reports, exit_regs }
}

/// Generator of terminating programs that stay within what the rewriter
/// supports: bounded loops, acyclic calls, framed non-leaf functions.
pub struct ProgramGen {
    rng: ChaCha8Rng,
    out: Vec<String>,
    labels: usize,
    funcs: usize,
    uses_r10: bool,
}

impl ProgramGen {
    pub fn generate(seed: u64) -> (String, Vec<u32>) {
        let mut g =
            ProgramGen { rng: ChaCha8Rng::seed_from_u64(seed), out: Vec::new(), labels: 0, funcs: 0, uses_r10: false };
        g.funcs = g.rng.gen_range(0..=3);
        g.uses_r10 = g.rng.gen_bool(0.2);
        g.line("main:");
        let n = g.rng.gen_range(2..8);
        for _ in 0..n {
            g.stmt(0, g.funcs);
        }
        g.line("    halt");
        for k in 0..g.funcs {
            g.function(k);
        }
        let input = (0..8).map(|_| g.rng.gen_range(0..20)).collect();
        (g.out.join("\n") + "\n", input)
    }

    fn line(&mut self, s: &str) {
        self.out.push(s.to_string());
    }

    fn label(&mut self, stem: &str) -> String {
        self.labels += 1;
        format!("{stem}{}", self.labels)
    }

    fn data_reg(&mut self) -> String {
        if self.uses_r10 && self.rng.gen_bool(0.15) {
            return "r10".into();
        }
        format!("r{}", self.rng.gen_range(0..5))
    }

    fn arith(&mut self) {
        let rd = self.data_reg();
        let rn = self.data_reg();
        let s = match self.rng.gen_range(0..6) {
            0 => format!("    mov {rd}, #{}", self.rng.gen_range(-50..50)),
            1 => format!("    mov {rd}, {rn}"),
            2 => format!("    add {rd}, {rn}, #{}", self.rng.gen_range(-9..10)),
            3 => format!("    sub {rd}, {rd}, {rn}"),
            4 => {
                let off = 4 * self.rng.gen_range(0..DATA_WORDS);
                let v = format!("r{}", self.rng.gen_range(0..3));
                format!("    mov r3, #{DATA_BASE}\n    str {v}, [r3, #{off}]")
            }
            _ => {
                let off = 4 * self.rng.gen_range(0..DATA_WORDS);
                format!("    mov r3, #{DATA_BASE}\n    ldr r{}, [r3, #{off}]", self.rng.gen_range(0..3))
            }
        };
        self.out.push(s);
    }

    fn cond(&mut self) -> &'static str {
        ["eq", "ne", "lt", "ge", "gt", "le", "lo", "hs", "hi", "ls"][self.rng.gen_range(0..10)]
    }

    fn compare(&mut self) {
        let a = self.data_reg();
        if self.rng.gen_bool(0.5) {
            let b = self.data_reg();
            self.out.push(format!("    cmp {a}, {b}"));
        } else {
            self.out.push(format!("    cmp {a}, #{}", self.rng.gen_range(-10..10)));
        }
    }

    /// `callable` bounds which functions may be called, keeping the call
    /// graph acyclic.
    fn stmt(&mut self, depth: usize, callable: usize) {
        let choice = self.rng.gen_range(0..10);
        match choice {
            0 | 1 => self.arith(),
            2 | 3 if depth < 3 => {
                let skip = self.label("skip");
                self.compare();
                let c = self.cond();
                self.out.push(format!("    b{c} {skip}"));
                for _ in 0..self.rng.gen_range(0..3) {
                    self.stmt(depth + 1, callable);
                }
                if self.rng.gen_bool(0.3) {
                    let join = self.label("join");
                    self.out.push(format!("    b {join}"));
                    self.out.push(format!("{skip}:"));
                    self.arith();
                    self.out.push(format!("{join}:"));
                    self.arith();
                } else {
                    self.out.push(format!("{skip}:"));
                    self.arith();
                }
            }
            4 if depth < 2 => self.static_loop(depth),
            5 if depth < 2 => {
                let ctr = if depth == 0 { "r6" } else { "r7" };
                let top = self.label("dyn");
                self.out.push(format!("    mov {ctr}, #{}", self.rng.gen_range(1..5)));
                self.out.push(format!("{top}:"));
                for _ in 0..self.rng.gen_range(1..3) {
                    self.stmt(depth + 1, callable);
                }
                self.out.push(format!("    sub {ctr}, {ctr}, #1\n    cmp {ctr}, #0\n    bne {top}"));
            }
            6 if callable > 0 => {
                let f = self.rng.gen_range(0..callable);
                self.out.push(format!("    bl f{f}"));
            }
            7 if callable > 0 => {
                let f = self.rng.gen_range(0..callable);
                self.out.push(format!("    mov r5, =f{f}\n    blx r5"));
            }
            8 => self.out.push(format!("    nsc_call #{}", self.rng.gen_range(0..2))),
            _ => self.arith(),
        }
    }

    fn static_loop(&mut self, depth: usize) {
        let ctr = if depth == 0 { "r8" } else { "r9" };
        let top = self.label("count");
        let k = self.rng.gen_range(0..6);
        let (cond, limit) = match self.rng.gen_range(0..4) {
            0 => ("ne", format!("#{}", k.max(1))),
            1 => ("lt", format!("#{k}")),
            2 => {
                self.out.push(format!("    mov r4, #{k}"));
                ("lo", "r4".to_string())
            }
            _ => ("lo", format!("#{k}")),
        };
        self.out.push(format!("    mov {ctr}, #0"));
        self.out.push(format!("{top}:"));
        for _ in 0..self.rng.gen_range(1..4) {
            let rd = format!("r{}", self.rng.gen_range(0..3));
            let v = self.rng.gen_range(-5..6);
            self.out.push(format!("    add {rd}, {rd}, #{v}"));
        }
        if self.rng.gen_bool(0.2) {
            self.out.push("    nsc_call #1".into());
        }
        self.out.push(format!("    add {ctr}, {ctr}, #1\n    cmp {ctr}, {limit}\n    b{cond} {top}"));
    }

    fn function(&mut self, k: usize) {
        self.out.push(format!("f{k}:"));
        if self.rng.gen_bool(0.3) {
            for _ in 0..self.rng.gen_range(1..3) {
                self.arith();
            }
            self.line("    bx lr");
            return;
        }
        self.line("    push {r4, r6, r7, lr}");
        for _ in 0..self.rng.gen_range(1..4) {
            self.stmt(1, k);
        }
        if self.rng.gen_bool(0.4) {
            let out = self.label("ret");
            self.compare();
            let c = self.cond();
            self.out.push(format!("    b{c} {out}"));
            self.arith();
            self.out.push(format!("{out}:"));
        }
        self.line("    pop {r4, r6, r7, pc}");
    }
}

/// Count of static-loop records across `reports`.
pub fn static_records(reports: &[RuntimeReport]) -> usize {
    reports
        .iter()
        .flat_map(|r| rtaudit::cfa::entries(&r.log).unwrap())
        .filter(|e| matches!(e, rtaudit::cfa::Entry::StaticLimit(_)))
        .count()
}

pub fn stitched(reports: &[RuntimeReport]) -> Vec<u32> {
    reports.iter().flat_map(|r| rtaudit::cfa::decompress(&r.log).unwrap()).collect()
}

/// Registers the original and instrumented runs must agree on.
pub fn comparable_regs(map: &InstrumentationMap) -> Vec<(usize, usize)> {
    let renamed: BTreeMap<u8, u8> = map.renames.iter().map(|r| (r.from, r.to)).collect();
    let targets: Vec<u8> = renamed.values().copied().collect();
    (0..13u8)
        .filter(|r| !targets.contains(r))
        .map(|r| (r as usize, renamed.get(&r).copied().unwrap_or(r) as usize))
        .filter(|&(o, _)| o != 10 && o != 11 || renamed.contains_key(&(o as u8)))
        .collect()
}
