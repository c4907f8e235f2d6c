// SPDX-License-Identifier: Apache-2.0

//! Scenario files and the driver that runs the Prover and Verifier loops
//! against each other over two seeded channels.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cfa::DEFAULT_LOG_MAX;
use crate::channel::{Channel, ChannelConfig};
use crate::crypto::{hex, sha256, Key};
use crate::instrument::{instrument, InstrumentError, Instrumented};
use crate::protocol::VrfResult;
use crate::resolver::RemediationAction;
use crate::supervisor::{Prover, ProverConfig, ProverStats, State, DEFAULT_DELTA, DEFAULT_RETRANSMIT_INTERVAL};
use crate::verifier::{
    BadMacPolicy, Phase, VerdictRecord, Verifier, VerifierConfig, VerifierError, VerifierStats, Violation,
    ViolationReason,
};
use crate::vm::AppIo;

pub const DEFAULT_MAX_CYCLES: u64 = 20_000_000;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}:{column}: {msg}")]
    Parse { path: PathBuf, line: usize, column: usize, msg: String },
    #[error("{path}: scenario needs exactly one of `program` or `source`")]
    NoProgram { path: PathBuf },
    #[error("instrumentation failed: {0}")]
    Instrument(#[from] InstrumentError),
    #[error("{0}")]
    Verifier(#[from] VerifierError),
    #[error("input refers to unknown label `{0}`")]
    UnknownLabel(String),
    #[error("input value {0} does not fit a word")]
    InputRange(i64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InputValue {
    Num(i64),
    /// `@label` resolves to the label's address in the instrumented image.
    Label(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PmemFlip {
    pub offset: usize,
    #[serde(default = "one")]
    pub mask: u8,
}

/// Flips bits of one message sent by the Prover.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tamper {
    /// Index among the Prover's transmissions.
    pub transmission: u64,
    /// Byte offset, taken modulo the message length.
    pub byte: usize,
    #[serde(default = "one")]
    pub mask: u8,
}

fn one() -> u8 {
    1
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Attack {
    pub pmem_flip: Option<PmemFlip>,
    pub reset_at: Vec<u64>,
    pub tamper: Option<Tamper>,
}

/// Checks a scenario declares about its own outcome.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Expect {
    pub final_result: Option<VrfResult>,
    pub heals: Option<usize>,
    pub violation: Option<ViolationReason>,
    pub remediation_complete: Option<bool>,
    pub min_slices: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    /// Path of the assembly file, relative to the scenario file.
    #[serde(default)]
    pub program: Option<PathBuf>,
    /// Inline assembly, instead of `program`.
    #[serde(default)]
    pub source: Option<String>,
    #[serde(default)]
    pub input: Vec<InputValue>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_delta")]
    pub delta: u64,
    #[serde(default = "default_log_max")]
    pub log_max: usize,
    #[serde(default = "default_max_cycles")]
    pub max_cycles: u64,
    #[serde(default = "default_remediation")]
    pub remediation: RemediationAction,
    #[serde(default = "default_retransmit")]
    pub retransmit_interval: u64,
    #[serde(default)]
    pub on_bad_mac: BadMacPolicy,
    #[serde(default)]
    pub channel: ChannelConfig,
    #[serde(default)]
    pub attack: Attack,
    #[serde(default)]
    pub expect: Expect,
}

fn default_delta() -> u64 {
    DEFAULT_DELTA
}
fn default_log_max() -> usize {
    DEFAULT_LOG_MAX
}
fn default_max_cycles() -> u64 {
    DEFAULT_MAX_CYCLES
}
fn default_remediation() -> RemediationAction {
    RemediationAction::WipeApp
}
fn default_retransmit() -> u64 {
    DEFAULT_RETRANSMIT_INTERVAL
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

impl Scenario {
    /// Scenario running inline `source` with every other field defaulted.
    pub fn inline(source: &str) -> Scenario {
        Scenario {
            name: String::new(),
            program: None,
            source: Some(source.to_string()),
            input: Vec::new(),
            seed: 0,
            delta: DEFAULT_DELTA,
            log_max: DEFAULT_LOG_MAX,
            max_cycles: DEFAULT_MAX_CYCLES,
            remediation: RemediationAction::WipeApp,
            retransmit_interval: DEFAULT_RETRANSMIT_INTERVAL,
            on_bad_mac: BadMacPolicy::Heal,
            channel: ChannelConfig::default(),
            attack: Attack::default(),
            expect: Expect::default(),
        }
    }

    /// Parses a scenario; a `program` path is read relative to `base` and
    /// inlined into `source`.
    pub fn parse(text: &str, path: &Path, base: &Path) -> Result<Scenario, ScenarioError> {
        let mut s: Scenario = toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((0, 0), |r| line_col(text, r.start));
            ScenarioError::Parse { path: path.to_path_buf(), line, column, msg: e.message().to_string() }
        })?;
        match (&s.program, &s.source) {
            (Some(p), None) => {
                let full = base.join(p);
                let src = std::fs::read_to_string(&full).map_err(|source| ScenarioError::Io { path: full, source })?;
                s.source = Some(src);
            }
            (None, Some(_)) => {}
            _ => return Err(ScenarioError::NoProgram { path: path.to_path_buf() }),
        }
        if s.name.is_empty() {
            s.name = path.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.to_path_buf(), source })?;
        Scenario::parse(&text, path, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn instrumented(&self) -> Result<Instrumented, ScenarioError> {
        Ok(instrument(self.source.as_deref().unwrap_or_default())?)
    }

    pub fn key(&self) -> Key {
        Key::from_seed(self.seed)
    }

    fn resolve_input(&self, inst: &Instrumented) -> Result<Vec<u32>, ScenarioError> {
        self.input
            .iter()
            .map(|v| match v {
                InputValue::Num(n) => {
                    if *n < i32::MIN as i64 || *n > u32::MAX as i64 {
                        Err(ScenarioError::InputRange(*n))
                    } else {
                        Ok(*n as u32)
                    }
                }
                InputValue::Label(l) => {
                    let name = l.strip_prefix('@').unwrap_or(l);
                    inst.image.symbols.get(name).copied().ok_or_else(|| ScenarioError::UnknownLabel(name.into()))
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ChannelStats {
    pub sent: u64,
    pub dropped: u64,
    pub delivered: u64,
}

impl From<&Channel> for ChannelStats {
    fn from(c: &Channel) -> Self {
        ChannelStats { sent: c.sent, dropped: c.dropped, delivered: c.delivered }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExpectationOutcome {
    pub name: &'static str,
    pub ok: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioResult {
    pub name: String,
    pub seed: u64,
    pub delta: u64,
    pub log_max: usize,
    pub verdicts: Vec<VerdictRecord>,
    pub final_result: Option<VrfResult>,
    pub heals: usize,
    pub violation: Option<Violation>,
    /// Fresh reports the verifier audited.
    pub slices_delivered: usize,
    /// Log bytes across authenticated slices.
    pub cflog_bytes: usize,
    pub trace_len: usize,
    pub remediation_complete: bool,
    pub ns_after_heal: u64,
    /// Longest NS-resident run between two reports, in cycles.
    pub attack_window: u64,
    pub cycles: u64,
    pub finished: bool,
    pub prover_state: State,
    pub verifier_phase: Phase,
    pub prover: ProverStats,
    pub verifier: VerifierStats,
    pub uplink: ChannelStats,
    pub downlink: ChannelStats,
    /// NS instructions executed after an injected reset before the
    /// verifier saw a report generated after it.
    pub ns_before_remnant: u64,
    /// SHA-256 of program memory when the run stopped.
    pub final_pmem_digest: String,
    /// SHA-256 over the stitched destination stream (big-endian words).
    pub trace_digest: String,
    pub expectations: Vec<ExpectationOutcome>,
    pub passed: bool,
}

/// Runs `s` to completion or to `max_cycles`.
pub fn run_scenario(s: &Scenario) -> Result<ScenarioResult, ScenarioError> {
    run_scenario_traced(s).map(|(r, _)| r)
}

/// Like [`run_scenario`], also returning the stitched destination stream the
/// verifier audited.
pub fn run_scenario_traced(s: &Scenario) -> Result<(ScenarioResult, Vec<u32>), ScenarioError> {
    let inst = s.instrumented()?;
    let input = s.resolve_input(&inst)?;
    let key = s.key();

    let mut image = inst.image.clone();
    if let Some(f) = s.attack.pmem_flip {
        if !image.bytes.is_empty() {
            let at = f.offset % image.bytes.len();
            image.bytes[at] ^= f.mask;
        }
    }
    let pcfg = ProverConfig {
        key,
        app_id: 1,
        remediation: s.remediation,
        log_max: s.log_max,
        retransmit_interval: s.retransmit_interval,
    };
    let mut prover = Prover::new(&image, AppIo::new(input, s.seed), pcfg);
    let vcfg = VerifierConfig {
        delta: s.delta,
        remediation: s.remediation,
        on_bad_mac: s.on_bad_mac,
        retransmit_interval: s.retransmit_interval,
        ..VerifierConfig::new(key)
    };
    let mut verifier = Verifier::new(&inst.image, &inst.map, vcfg)?;
    let mut up = Channel::new(ChannelConfig { seed: s.channel.seed ^ s.seed.rotate_left(1), ..s.channel });
    let mut down =
        Channel::new(ChannelConfig { seed: s.channel.seed ^ s.seed.rotate_left(1) ^ 0x5DEE_CE66D, ..s.channel });

    let mut resets: Vec<u64> = s.attack.reset_at.clone();
    resets.sort_unstable();
    resets.dedup();
    let mut next_reset = 0;
    let mut transmissions = 0u64;
    // (ns count at reset, verdicts at reset) while waiting for a post-reset report.
    let mut pending_reset: Option<(u64, usize)> = None;
    let mut ns_before_remnant = 0;

    verifier.start(0);
    let mut finished = false;
    loop {
        let now = prover.clock();
        for m in verifier.take_outbox() {
            down.send(m, now);
        }
        for m in up.poll(now) {
            verifier.receive(&m);
        }
        if let Some((ns, seen)) = pending_reset {
            if verifier.verdicts().len() > seen {
                ns_before_remnant = ns_before_remnant.max(prover.stats.ns_instructions - ns);
                pending_reset = None;
            }
        }
        verifier.tick(now);
        for m in verifier.take_outbox() {
            down.send(m, now);
        }
        for m in down.poll(now) {
            prover.receive(&m);
        }
        if verifier.phase() == Phase::Finished && up.is_empty() && down.is_empty() && prover.is_idle() {
            finished = true;
            break;
        }
        if now >= s.max_cycles {
            break;
        }
        if resets.get(next_reset) == Some(&now) {
            next_reset += 1;
            prover.reset();
            pending_reset.get_or_insert((prover.stats.ns_instructions, verifier.verdicts().len()));
        }
        prover.step();
        for mut m in prover.take_outbox() {
            if let Some(t) = s.attack.tamper {
                if t.transmission == transmissions && !m.is_empty() {
                    let at = t.byte % m.len();
                    m[at] ^= t.mask;
                }
            }
            transmissions += 1;
            up.send(m, prover.clock());
        }
        if prover.is_idle() {
            let wake = [
                up.next_delivery(),
                down.next_delivery(),
                verifier.next_wakeup(),
                prover.next_wakeup(),
                resets.get(next_reset).copied(),
                Some(s.max_cycles),
            ]
            .into_iter()
            .flatten()
            .min();
            if let Some(t) = wake {
                prover.advance_idle_to(t);
            }
        }
    }
    if let Some((ns, _)) = pending_reset {
        ns_before_remnant = ns_before_remnant.max(prover.stats.ns_instructions - ns);
    }

    let verdicts = verifier.verdicts().to_vec();
    let heals = verdicts.iter().filter(|v| v.result == Some(VrfResult::Heal)).count();
    let mut result = ScenarioResult {
        name: s.name.clone(),
        seed: s.seed,
        delta: s.delta,
        log_max: s.log_max,
        final_result: verdicts.iter().rev().find_map(|v| v.result),
        heals,
        violation: verdicts.iter().find_map(|v| v.violation),
        slices_delivered: verdicts.len(),
        cflog_bytes: verdicts.iter().filter(|v| v.mac_ok).map(|v| v.log_size).sum(),
        trace_len: verifier.trace().len(),
        remediation_complete: prover.stats.remediations_completed > 0,
        ns_after_heal: prover.stats.ns_after_heal,
        attack_window: prover.stats.max_window,
        cycles: prover.clock(),
        finished,
        prover_state: prover.state(),
        verifier_phase: verifier.phase(),
        prover: prover.stats.clone(),
        verifier: verifier.stats.clone(),
        uplink: (&up).into(),
        downlink: (&down).into(),
        ns_before_remnant,
        final_pmem_digest: hex(&prover.machine.hash_pmem()),
        trace_digest: hex(&sha256(&trace_bytes(verifier.trace()))),
        verdicts,
        expectations: Vec::new(),
        passed: true,
    };
    result.expectations = check_expectations(&s.expect, &result);
    result.passed = result.expectations.iter().all(|e| e.ok);
    Ok((result, verifier.trace().to_vec()))
}

pub fn trace_bytes(trace: &[u32]) -> Vec<u8> {
    trace.iter().flat_map(|d| d.to_be_bytes()).collect()
}

fn check_expectations(e: &Expect, r: &ScenarioResult) -> Vec<ExpectationOutcome> {
    let mut out = Vec::new();
    let mut check = |name, ok, detail: String| out.push(ExpectationOutcome { name, ok, detail });
    if let Some(want) = e.final_result {
        check("final_result", r.final_result == Some(want), format!("{:?}", r.final_result));
    }
    if let Some(want) = e.heals {
        check("heals", r.heals == want, r.heals.to_string());
    }
    if let Some(want) = e.violation {
        check("violation", r.violation.map(|v| v.reason) == Some(want), format!("{:?}", r.violation));
    }
    if let Some(want) = e.remediation_complete {
        check("remediation_complete", r.remediation_complete == want, r.remediation_complete.to_string());
    }
    if let Some(want) = e.min_slices {
        check("min_slices", r.slices_delivered >= want, r.slices_delivered.to_string());
    }
    check("finished", r.finished, format!("{} cycles", r.cycles));
    check("ns_after_heal", r.ns_after_heal == 0, r.ns_after_heal.to_string());
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct WindowPoint {
    pub capacity: usize,
    pub window: u64,
    pub reports: u64,
}

/// Longest NS-resident span for each log capacity, with the scenario's
/// other settings unchanged.
pub fn measure_attack_window(s: &Scenario, capacities: &[usize]) -> Result<Vec<WindowPoint>, ScenarioError> {
    capacities
        .iter()
        .map(|&capacity| {
            let r = run_scenario(&Scenario { log_max: capacity, ..s.clone() })?;
            Ok(WindowPoint { capacity, window: r.attack_window, reports: r.prover.reports_generated })
        })
        .collect()
}

/// Loop of three never-taken guards, each followed by `padding` plain
/// instructions, closed by a dynamic back edge. Every iteration logs four
/// distinct destinations, so the log does not compress and the logging
/// density is set by `padding` alone.
pub fn branch_dense_program(padding: usize, iterations: u16) -> String {
    let mut out = String::from("main:   mov r1, #0\n        mov r2, #0\nloop:\n");
    for k in 1..=3 {
        out.push_str(&format!("        cmp r1, #-1\n        beq s{k}\n"));
        for _ in 0..padding {
            out.push_str("        add r2, r2, #1\n");
        }
        out.push_str(&format!("s{k}:\n"));
    }
    out.push_str(&format!("        add r1, r1, #1\n        cmp r1, #{iterations}\n        bne loop\n        halt\n"));
    out
}
