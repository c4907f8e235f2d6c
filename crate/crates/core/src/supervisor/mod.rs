// SPDX-License-Identifier: Apache-2.0

//! Secure-World controller on the device: request handling, App launch,
//! trampoline servicing, report generation and retransmission, response
//! authentication and dispatch to remediation.

mod context;

use serde::Serialize;

use crate::cfa::{AppendResult, CfLog, CfaEngine, CfaError, DEFAULT_LOG_MAX};
use crate::crypto::Key;
use crate::protocol::{encode_report, report_mac, AttestRequest, Message, VerifierResponse, VrfResult};
use crate::resolver::{remediate_step, RemediationAction, RemediationPhase};
use crate::vm::isa::Reg;
use crate::vm::machine::{Event, NscGate, Trigger};
use crate::vm::memory::{RETAINED_SIZE, STACK_TOP};
use crate::vm::{AppIo, Image, Machine, TrampolineId, World, RESET_SENTINEL};

pub use context::{AuditContext, CfaStatus, LOG_OFFSET};

/// Address logged when the App finishes.
pub const EXIT_SENTINEL: u32 = TrampolineId::Exit.address();
pub const DEFAULT_RETRANSMIT_INTERVAL: u64 = 1_000;
pub const DEFAULT_DELTA: u64 = 500_000;
/// Largest log that fits retained memory after the context header.
pub const LOG_MAX_LIMIT: usize = RETAINED_SIZE as usize - LOG_OFFSET;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum State {
    Boot,
    WaitingForVrf,
    SetupApp,
    Executing,
    GenerateReport,
    TransmitWait,
    Remediate,
    Done,
}

#[derive(Debug, Clone)]
pub struct ProverConfig {
    pub key: Key,
    pub app_id: u16,
    pub remediation: RemediationAction,
    pub log_max: usize,
    pub retransmit_interval: u64,
}

impl ProverConfig {
    pub fn new(key: Key) -> Self {
        ProverConfig {
            key,
            app_id: 1,
            remediation: RemediationAction::WipeApp,
            log_max: DEFAULT_LOG_MAX,
            retransmit_interval: DEFAULT_RETRANSMIT_INTERVAL,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ProverStats {
    pub ns_instructions: u64,
    pub reports_generated: u64,
    pub transmissions: u64,
    pub requests_accepted: u64,
    pub requests_rejected: u64,
    pub responses_accepted: u64,
    pub responses_rejected: u64,
    pub injected_resets: u64,
    pub fault_resets: u64,
    pub t1: u64,
    pub t2: u64,
    pub t3: u64,
    pub heal_received: bool,
    pub ns_after_heal: u64,
    /// NS instructions executed while a report awaited acknowledgment.
    pub gate_violations: u64,
    pub remediations_completed: u64,
    /// Longest run of NS instructions between two reports.
    pub max_window: u64,
}

pub struct Prover {
    pub machine: Machine,
    pub io: AppIo,
    config: ProverConfig,
    state: State,
    ctx: AuditContext,
    engine: CfaEngine,
    persisted_log: usize,
    clock: u64,
    next_transmit: u64,
    outbox: Vec<Vec<u8>>,
    ns_span: u64,
    pub stats: ProverStats,
    transitions: Vec<(u64, State)>,
}

impl Prover {
    /// Provisions `image` and boots.
    pub fn new(image: &Image, io: AppIo, config: ProverConfig) -> Prover {
        Prover::with_machine(Machine::from_image(image), io, config)
    }

    pub fn with_machine(machine: Machine, io: AppIo, mut config: ProverConfig) -> Prover {
        config.log_max = config.log_max.min(LOG_MAX_LIMIT);
        let mut p = Prover {
            machine,
            io,
            engine: CfaEngine::new(config.log_max),
            config,
            state: State::Boot,
            ctx: AuditContext::default(),
            persisted_log: 0,
            clock: 0,
            next_transmit: 0,
            outbox: Vec::new(),
            ns_span: 0,
            stats: ProverStats::default(),
            transitions: Vec::new(),
        };
        p.boot();
        p
    }

    pub fn state(&self) -> State {
        self.state
    }

    pub fn context(&self) -> &AuditContext {
        &self.ctx
    }

    pub fn log(&self) -> &CfLog {
        &self.engine.log
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn config(&self) -> &ProverConfig {
        &self.config
    }

    /// Every state change with the cycle it happened at.
    pub fn transitions(&self) -> &[(u64, State)] {
        &self.transitions
    }

    pub fn take_outbox(&mut self) -> Vec<Vec<u8>> {
        std::mem::take(&mut self.outbox)
    }

    /// True when the next cycles do nothing until a message arrives or a
    /// retransmission falls due.
    pub fn is_idle(&self) -> bool {
        match self.state {
            State::WaitingForVrf | State::Done => true,
            State::TransmitWait => self.clock < self.next_transmit,
            _ => false,
        }
    }

    pub fn next_wakeup(&self) -> Option<u64> {
        (self.state == State::TransmitWait).then_some(self.next_transmit)
    }

    /// Skips idle cycles up to `t`.
    pub fn advance_idle_to(&mut self, t: u64) {
        if self.is_idle() {
            let limit = self.next_wakeup().unwrap_or(u64::MAX);
            self.clock = self.clock.max(t.min(limit));
        }
    }

    fn set_state(&mut self, s: State) {
        if self.state != s || self.transitions.is_empty() {
            self.transitions.push((self.clock, s));
        }
        self.state = s;
    }

    fn persist(&mut self) {
        let mem = self.machine.retained_mut();
        self.ctx.store(&self.engine.log, mem);
        AuditContext::store_log_tail(&self.engine.log, self.persisted_log, mem);
        self.persisted_log = self.engine.log.len();
    }

    fn clear_log(&mut self) {
        self.engine.log.clear();
        self.persisted_log = 0;
    }

    /// Device reset: volatile state is lost, retained memory survives.
    pub fn reset(&mut self) {
        self.stats.injected_resets += 1;
        self.reboot();
    }

    fn reboot(&mut self) {
        self.machine.reset();
        self.io.rewind();
        self.outbox.clear();
        self.boot();
    }

    fn boot(&mut self) {
        self.set_state(State::Boot);
        match AuditContext::load(self.machine.retained()) {
            Some((ctx, log)) => {
                self.engine.active = ctx.cfa_status == CfaStatus::Active;
                self.persisted_log = log.len();
                self.engine.log = log;
                self.ctx = ctx;
            }
            None => {
                self.ctx = AuditContext { app_id: self.config.app_id, ..Default::default() };
                self.engine = CfaEngine::new(self.config.log_max);
                self.persisted_log = 0;
                self.persist();
            }
        }
        match self.ctx.remediation {
            RemediationPhase::InProgress { .. } => self.set_state(State::Remediate),
            RemediationPhase::AttestPending => self.post_remediation_report(),
            RemediationPhase::Frozen => {
                self.machine.halt();
                self.set_state(State::Done);
            }
            RemediationPhase::Idle => match (self.ctx.cfa_status, self.ctx.pending_sigma) {
                (CfaStatus::Active, Some(_)) => {
                    self.ctx.resume_possible = false;
                    self.persist();
                    self.next_transmit = self.clock;
                    self.set_state(State::TransmitWait);
                }
                (CfaStatus::Active, None) => {
                    self.ctx.resume_possible = false;
                    self.reset_marker_report();
                }
                (CfaStatus::Inactive, _) => self.set_state(State::WaitingForVrf),
            },
        }
    }

    /// Reports the log remnant, closed by the reset marker when it fits.
    fn reset_marker_report(&mut self) {
        self.set_state(State::GenerateReport);
        self.engine.active = true;
        let fits = self.engine.log.append(RESET_SENTINEL) == Ok(AppendResult::Ok);
        self.ctx.final_report = fits;
        self.generate_report();
    }

    fn post_remediation_report(&mut self) {
        self.set_state(State::GenerateReport);
        self.ctx.h_pmem = self.machine.hash_pmem();
        self.ctx.cfa_status = CfaStatus::Active;
        self.ctx.resume_possible = false;
        self.ctx.final_report = true;
        self.engine.active = true;
        self.clear_log();
        self.generate_report();
    }

    fn generate_report(&mut self) {
        self.set_state(State::GenerateReport);
        self.machine.world = World::Secure;
        self.machine.timer.clear_and_pause();
        self.engine.log.flush();
        let sigma = report_mac(&self.config.key, &self.ctx.h_pmem, self.engine.log.bytes(), &self.ctx.chal);
        self.ctx.pending_sigma = Some(sigma);
        self.persist();
        self.stats.reports_generated += 1;
        self.stats.max_window = self.stats.max_window.max(self.ns_span);
        self.ns_span = 0;
        self.next_transmit = self.clock;
        self.set_state(State::TransmitWait);
    }

    fn transmit(&mut self) {
        let Some(sigma) = self.ctx.pending_sigma else { return };
        let mem = self.machine.retained();
        let log = &mem[LOG_OFFSET..LOG_OFFSET + self.engine.log.len()];
        self.outbox.push(encode_report(&sigma, log));
        self.stats.transmissions += 1;
        self.next_transmit = self.clock + self.config.retransmit_interval.max(1);
    }

    /// Handles a message from the network.
    pub fn receive(&mut self, bytes: &[u8]) {
        match (self.state, Message::decode(bytes)) {
            (State::WaitingForVrf, Ok(Message::Request(req))) => self.handle_request(&req),
            (State::TransmitWait, Ok(Message::Response(rv))) => self.process_response(&rv),
            _ => {}
        }
    }

    fn handle_request(&mut self, req: &AttestRequest) {
        if !req.verify(&self.config.key) || req.chal <= self.ctx.chal || req.app_id != self.config.app_id {
            self.stats.requests_rejected += 1;
            return;
        }
        self.stats.requests_accepted += 1;
        self.ctx.chal = req.chal;
        self.ctx.delta = req.delta;
        self.set_state(State::SetupApp);
        self.setup_app();
    }

    fn setup_app(&mut self) {
        let m = &mut self.machine;
        m.world = World::Secure;
        m.set_dmem_executable(false).expect("secure world may reconfigure");
        m.lock_pmem().expect("secure world may lock");
        m.timer.arm(self.ctx.delta);
        self.ctx.h_pmem = m.hash_pmem();
        self.clear_log();
        self.engine.active = true;
        self.ctx.cfa_status = CfaStatus::Active;
        self.ctx.pending_sigma = None;
        self.ctx.resume_possible = true;
        self.ctx.final_report = false;
        self.persist();
        self.io.rewind();
        self.machine.restart();
        self.machine.set_reg(Reg::SP, STACK_TOP);
        self.machine.world = World::NonSecure;
        self.ns_span = 0;
        self.set_state(State::Executing);
    }

    fn process_response(&mut self, rv: &VerifierResponse) {
        if !rv.verify(&self.config.key) || rv.chal <= self.ctx.chal {
            self.stats.responses_rejected += 1;
            return;
        }
        self.stats.responses_accepted += 1;
        self.ctx.chal = rv.chal;
        self.ctx.pending_sigma = None;
        match rv.result {
            VrfResult::Heal => {
                self.stats.heal_received = true;
                self.ctx.remediation = RemediationPhase::InProgress { action: self.config.remediation, offset: 0 };
                self.persist();
                self.set_state(State::Remediate);
            }
            VrfResult::End => self.finish_run(),
            VrfResult::Exec if self.ctx.final_report => self.finish_run(),
            VrfResult::Exec if !self.ctx.resume_possible => {
                self.clear_log();
                self.reset_marker_report();
            }
            VrfResult::Exec => {
                self.clear_log();
                self.persist();
                self.machine.timer.resume();
                self.machine.world = World::NonSecure;
                self.set_state(State::Executing);
            }
        }
    }

    fn finish_run(&mut self) {
        self.ctx.cfa_status = CfaStatus::Inactive;
        self.ctx.final_report = false;
        self.ctx.remediation = RemediationPhase::Idle;
        self.engine.active = false;
        self.clear_log();
        self.machine.timer.disarm();
        self.machine.world = World::Secure;
        self.machine.unlock_pmem().expect("secure world may unlock");
        self.machine.set_dmem_executable(true).expect("secure world may reconfigure");
        self.persist();
        self.set_state(State::WaitingForVrf);
    }

    /// Advances the device by one cycle.
    pub fn step(&mut self) {
        self.clock += 1;
        match self.state {
            State::Executing => self.execute_one(),
            State::TransmitWait if self.clock >= self.next_transmit => self.transmit(),
            State::Remediate => self.remediate_one(),
            _ => {}
        }
    }

    fn remediate_one(&mut self) {
        let RemediationPhase::InProgress { action, offset } = self.ctx.remediation else {
            self.set_state(State::WaitingForVrf);
            return;
        };
        self.ctx.remediation = remediate_step(&mut self.machine, action, offset);
        self.persist();
        match self.ctx.remediation {
            RemediationPhase::Frozen => {
                self.stats.remediations_completed += 1;
                self.set_state(State::Done);
            }
            RemediationPhase::AttestPending => {
                self.stats.remediations_completed += 1;
                self.reboot();
            }
            _ => {}
        }
    }

    fn execute_one(&mut self) {
        match self.machine.step() {
            Event::Executed => {
                self.stats.ns_instructions += 1;
                self.ns_span += 1;
                if self.stats.heal_received {
                    self.stats.ns_after_heal += 1;
                }
                if self.ctx.pending_sigma.is_some() {
                    self.stats.gate_violations += 1;
                }
            }
            Event::Trigger(Trigger::T1) => {
                self.stats.t1 += 1;
                self.generate_report();
            }
            Event::Trigger(_) => unreachable!("only the timer trigger comes from the machine"),
            Event::NscEntry { gate: NscGate::Trampoline(t), regs } => self.trampoline(t, &regs),
            Event::NscEntry { gate: NscGate::Service(n), .. } => match self.io.service(n) {
                Some(v) => {
                    self.machine.set_reg(Reg(0), v);
                    self.machine.world = World::NonSecure;
                }
                None => self.fault(),
            },
            Event::Halted => {
                // A raw halt never survives instrumentation; report it as
                // the end of the App so the verifier judges the path.
                self.machine.restart();
                self.machine.set_pc(EXIT_SENTINEL);
                self.trampoline(TrampolineId::Exit, &self.machine.regs.clone());
            }
            Event::Fault { .. } => self.fault(),
        }
    }

    fn fault(&mut self) {
        self.stats.fault_resets += 1;
        self.reboot();
    }

    fn trampoline(&mut self, t: TrampolineId, regs: &[u32; 16]) {
        let lr = regs[Reg::LR.index()];
        let (result, resume): (Result<AppendResult, CfaError>, u32) = match t {
            TrampolineId::Cond | TrampolineId::Ret => (self.engine.append(lr), lr),
            TrampolineId::ICall => (self.engine.append(regs[10]), regs[10]),
            TrampolineId::Loop => (self.engine.log_static_loop(regs[10], regs[11]), lr),
            TrampolineId::Exit => (self.engine.append(EXIT_SENTINEL), 0),
        };
        match result {
            Err(_) => self.fault(),
            Ok(AppendResult::Full) => {
                // The gate is re-entered after the report is acknowledged.
                self.stats.t3 += 1;
                self.generate_report();
            }
            Ok(AppendResult::Ok) if t == TrampolineId::Exit => {
                self.stats.t2 += 1;
                self.ctx.final_report = true;
                self.generate_report();
            }
            Ok(AppendResult::Ok) => {
                self.persist();
                self.machine.set_pc(resume);
                self.machine.world = World::NonSecure;
            }
        }
    }
}

#[cfg(test)]
mod tests;
