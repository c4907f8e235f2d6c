// SPDX-License-Identifier: Apache-2.0

//! Remote verifier: issues the request, audits each report slice against the
//! golden CFG and answers Exec, End or Heal.

mod cfg;
mod path;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cfg::{build_cfg, Block, Cfg, Edge, EdgeKind};
pub use path::{PathChecker, Violation, ViolationReason};

use crate::cfa::decompress;
use crate::crypto::{sha256, Digest, Key};
use crate::instrument::InstrumentationMap;
use crate::protocol::{AttestRequest, Challenge, Message, RuntimeReport, VerifierResponse, VrfResult};
use crate::resolver::{remediated_image, RemediationAction};
use crate::supervisor::{DEFAULT_DELTA, DEFAULT_RETRANSMIT_INTERVAL};
use crate::vm::Image;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VerifierError {
    #[error("golden image is not a well-formed instrumented program at {0:#x}")]
    MalformedImage(u32),
}

/// What to do with a report whose MAC does not verify.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BadMacPolicy {
    #[default]
    Heal,
    /// Drop it and wait for a retransmission.
    Silent,
}

#[derive(Debug, Clone)]
pub struct VerifierConfig {
    pub key: Key,
    pub app_id: u16,
    pub delta: u64,
    /// Action the device was provisioned with; decides the digest of the
    /// post-remediation report.
    pub remediation: RemediationAction,
    pub on_bad_mac: BadMacPolicy,
    pub retransmit_interval: u64,
    /// Challenge before the first request.
    pub initial_chal: Challenge,
}

impl VerifierConfig {
    pub fn new(key: Key) -> Self {
        VerifierConfig {
            key,
            app_id: 1,
            delta: DEFAULT_DELTA,
            remediation: RemediationAction::WipeApp,
            on_bad_mac: BadMacPolicy::Heal,
            retransmit_interval: DEFAULT_RETRANSMIT_INTERVAL,
            initial_chal: Challenge::ZERO,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Idle,
    AwaitingReport,
    Auditing,
    AwaitingRemediationReport,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VerdictRecord {
    pub slice: usize,
    /// `None` when the report was dropped without an answer.
    pub result: Option<VrfResult>,
    pub mac_ok: bool,
    pub violation: Option<Violation>,
    pub log_size: usize,
    pub entries: usize,
    pub post_remediation: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct VerifierStats {
    pub requests_sent: u64,
    pub reports_received: u64,
    pub duplicates: u64,
    pub undecodable: u64,
    pub ignored: u64,
    pub responses_sent: u64,
}

#[derive(Debug, Clone)]
pub struct Verifier {
    config: VerifierConfig,
    image: Image,
    cfg: Cfg,
    expected: Digest,
    remediated: Option<Digest>,
    chal: Challenge,
    checker: PathChecker,
    phase: Phase,
    request: Vec<u8>,
    next_resend: u64,
    answered: HashMap<Digest, Vec<u8>>,
    trace: Vec<u32>,
    verdicts: Vec<VerdictRecord>,
    outbox: Vec<Vec<u8>>,
    pub stats: VerifierStats,
}

impl Verifier {
    pub fn new(golden: &Image, map: &InstrumentationMap, config: VerifierConfig) -> Result<Self, VerifierError> {
        let cfg = build_cfg(golden, map)?;
        let remediated = remediated_image(&golden.bytes, golden.entry, config.remediation).map(|b| sha256(&b));
        Ok(Verifier {
            chal: config.initial_chal,
            expected: sha256(&golden.bytes),
            remediated,
            checker: PathChecker::new(golden.entry),
            image: golden.clone(),
            cfg,
            config,
            phase: Phase::Idle,
            request: Vec::new(),
            next_resend: 0,
            answered: HashMap::new(),
            trace: Vec::new(),
            verdicts: Vec::new(),
            outbox: Vec::new(),
            stats: VerifierStats::default(),
        })
    }

    pub fn cfg(&self) -> &Cfg {
        &self.cfg
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn chal(&self) -> Challenge {
        self.chal
    }

    pub fn verdicts(&self) -> &[VerdictRecord] {
        &self.verdicts
    }

    /// Destinations of all authenticated slices, stitched in order.
    pub fn trace(&self) -> &[u32] {
        &self.trace
    }

    pub fn checker(&self) -> &PathChecker {
        &self.checker
    }

    pub fn take_outbox(&mut self) -> Vec<Vec<u8>> {
        std::mem::take(&mut self.outbox)
    }

    pub fn next_wakeup(&self) -> Option<u64> {
        (self.phase == Phase::AwaitingReport).then_some(self.next_resend)
    }

    /// Sends a fresh request and starts a new audit.
    pub fn start(&mut self, now: u64) {
        self.chal = self.chal.next();
        let req = AttestRequest::signed(&self.config.key, self.config.app_id, self.config.delta, self.chal);
        self.request = req.encode();
        self.checker = PathChecker::new(self.image.entry);
        self.trace.clear();
        self.phase = Phase::AwaitingReport;
        self.send_request(now);
    }

    fn send_request(&mut self, now: u64) {
        self.outbox.push(self.request.clone());
        self.stats.requests_sent += 1;
        self.next_resend = now + self.config.retransmit_interval;
    }

    /// Re-sends the request until the first report shows it arrived.
    pub fn tick(&mut self, now: u64) {
        if self.phase == Phase::AwaitingReport && now >= self.next_resend {
            self.send_request(now);
        }
    }

    pub fn receive(&mut self, bytes: &[u8]) {
        let Ok(Message::Report(rp)) = Message::decode(bytes) else {
            self.stats.undecodable += 1;
            return;
        };
        self.stats.reports_received += 1;
        let key = sha256(bytes);
        if let Some(resp) = self.answered.get(&key) {
            self.stats.duplicates += 1;
            self.outbox.push(resp.clone());
            self.stats.responses_sent += 1;
            return;
        }
        let record = match self.phase {
            Phase::AwaitingReport | Phase::Auditing => self.audit(&rp),
            Phase::AwaitingRemediationReport => self.check_remediation(&rp),
            Phase::Idle | Phase::Finished => {
                self.stats.ignored += 1;
                return;
            }
        };
        let result = record.result;
        self.verdicts.push(record);
        if let Some(result) = result {
            self.chal = self.chal.next();
            let resp = VerifierResponse::signed(&self.config.key, result, self.chal).encode();
            self.answered.insert(key, resp.clone());
            self.outbox.push(resp);
            self.stats.responses_sent += 1;
            self.phase = match result {
                VrfResult::Exec => Phase::Auditing,
                VrfResult::End => Phase::Finished,
                VrfResult::Heal if self.remediated.is_some() => Phase::AwaitingRemediationReport,
                VrfResult::Heal => Phase::Finished,
            };
        }
    }

    fn record(&self, rp: &RuntimeReport, mac_ok: bool, entries: usize) -> VerdictRecord {
        VerdictRecord {
            slice: self.verdicts.len(),
            result: None,
            mac_ok,
            violation: None,
            log_size: rp.log.len(),
            entries,
            post_remediation: false,
        }
    }

    fn audit(&mut self, rp: &RuntimeReport) -> VerdictRecord {
        if !rp.verify(&self.config.key, &self.expected, &self.chal) {
            let mut rec = self.record(rp, false, 0);
            rec.result = match self.config.on_bad_mac {
                BadMacPolicy::Heal => Some(VrfResult::Heal),
                BadMacPolicy::Silent => None,
            };
            return rec;
        }
        self.phase = Phase::Auditing;
        let entries = match decompress(&rp.log) {
            Ok(e) => e,
            Err(_) => {
                let mut rec = self.record(rp, true, 0);
                rec.violation =
                    Some(Violation { index: self.trace.len(), reason: ViolationReason::MalformedLog, pc: 0, entry: 0 });
                rec.result = Some(VrfResult::Heal);
                return rec;
            }
        };
        let mut rec = self.record(rp, true, entries.len());
        self.trace.extend_from_slice(&entries);
        rec.result = Some(match self.checker.feed(&self.cfg, &self.image, &entries) {
            Err(v) => {
                rec.violation = Some(v);
                VrfResult::Heal
            }
            Ok(()) if self.checker.finished() => VrfResult::End,
            Ok(()) => VrfResult::Exec,
        });
        rec
    }

    fn check_remediation(&mut self, rp: &RuntimeReport) -> VerdictRecord {
        let digest = self.remediated.unwrap_or(self.expected);
        let ok = rp.verify(&self.config.key, &digest, &self.chal);
        let mut rec = self.record(rp, ok, 0);
        rec.post_remediation = true;
        rec.result = if ok && rp.log.is_empty() {
            Some(VrfResult::End)
        } else if ok || self.config.on_bad_mac == BadMacPolicy::Heal {
            Some(VrfResult::Heal)
        } else {
            None
        };
        rec
    }
}
