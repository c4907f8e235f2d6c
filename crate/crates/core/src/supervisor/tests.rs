// SPDX-License-Identifier: Apache-2.0

use super::*;
use crate::cfa::decompress;
use crate::instrument::instrument;
use crate::protocol::{Challenge, RuntimeReport};

const KEY: Key = Key([0x42; 32]);

fn prover(src: &str, log_max: usize) -> Prover {
    let inst = instrument(src).unwrap();
    let config = ProverConfig { log_max, ..ProverConfig::new(KEY) };
    Prover::new(&inst.image, AppIo::new(vec![], 0), config)
}

fn request(p: &mut Prover, chal: u64, delta: u64) {
    let req = AttestRequest::signed(&KEY, p.config().app_id, delta, Challenge::from_u64(chal));
    p.receive(&req.encode());
}

fn run_until_report(p: &mut Prover, limit: u64) -> RuntimeReport {
    for _ in 0..limit {
        p.step();
        if let Some(msg) = p.take_outbox().pop() {
            match Message::decode(&msg).unwrap() {
                Message::Report(r) => return r,
                m => panic!("{m:?}"),
            }
        }
    }
    panic!("no report within {limit} cycles, state {:?}", p.state());
}

fn respond(p: &mut Prover, result: VrfResult, chal: u64) {
    p.receive(&VerifierResponse::signed(&KEY, result, Challenge::from_u64(chal)).encode());
}

const LOOP3: &str = "main: mov r1, #0\nl: add r1, #1\n cmp r1, #3\n bne l\n halt";

#[test]
fn fresh_device_waits() {
    let p = prover(LOOP3, 1024);
    assert_eq!(p.state(), State::WaitingForVrf);
    assert_eq!(p.context().cfa_status, CfaStatus::Inactive);
}

#[test]
fn valid_request_launches_app() {
    let mut p = prover(LOOP3, 1024);
    request(&mut p, 1, 1000);
    assert_eq!(p.state(), State::Executing);
    assert_eq!(p.machine.world, World::NonSecure);
    assert!(p.machine.timer.running());
    assert_eq!(p.context().h_pmem, p.machine.hash_pmem());
    assert!(!p.machine.perm_map.reconfigurable_by_ns);
}

#[test]
fn replayed_or_forged_request_dropped() {
    let mut p = prover(LOOP3, 1024);
    request(&mut p, 5, 1000);
    let mut q = prover(LOOP3, 1024);
    q.machine.retained_mut().copy_from_slice(p.machine.retained());
    q.reset();
    // chal 5 is not fresh for a context that already saw 5.
    assert_eq!(q.context().chal, Challenge::from_u64(5));
    let mut r = prover(LOOP3, 1024);
    let mut req = AttestRequest::signed(&KEY, 1, 1000, Challenge::from_u64(1));
    req.mac[0] ^= 1;
    r.receive(&req.encode());
    assert_eq!(r.state(), State::WaitingForVrf);
    assert_eq!(r.stats.requests_rejected, 1);
}

#[test]
fn final_report_is_authentic_and_marked() {
    let mut p = prover(LOOP3, 1024);
    request(&mut p, 1, 100_000);
    let rp = run_until_report(&mut p, 1000);
    assert!(rp.verify(&KEY, &p.context().h_pmem, &Challenge::from_u64(1)));
    let trace = decompress(&rp.log).unwrap();
    assert_eq!(*trace.last().unwrap(), EXIT_SENTINEL);
    assert_eq!(p.stats.t2, 1);
    assert!(p.context().final_report);
}

#[test]
fn timer_report_then_resume() {
    let mut p = prover("main: b main", 1024);
    request(&mut p, 1, 50);
    let rp = run_until_report(&mut p, 1000);
    assert!(rp.log.is_empty());
    assert_eq!(p.stats.t1, 1);
    assert_eq!(p.stats.ns_instructions, 50);
    // Stale challenge: ignored.
    respond(&mut p, VrfResult::Exec, 1);
    assert_eq!(p.state(), State::TransmitWait);
    assert_eq!(p.stats.responses_rejected, 1);
    respond(&mut p, VrfResult::Exec, 2);
    assert_eq!(p.state(), State::Executing);
    assert_eq!(p.context().chal, Challenge::from_u64(2));
    run_until_report(&mut p, 1000);
    assert_eq!(p.stats.ns_instructions, 100);
}

#[test]
fn retransmits_until_response() {
    let mut p = prover("main: b main", 1024);
    request(&mut p, 1, 10);
    run_until_report(&mut p, 100);
    for _ in 0..3500 {
        p.step();
    }
    assert_eq!(p.stats.transmissions, 4);
    respond(&mut p, VrfResult::End, 2);
    assert_eq!(p.state(), State::WaitingForVrf);
    assert_eq!(p.context().cfa_status, CfaStatus::Inactive);
    assert!(p.machine.perm_map.reconfigurable_by_ns);
}

#[test]
fn full_log_reports_and_reenters_gate() {
    let src = "main: mov r1, #0\nl: add r1, #1\n cmp r1, #2\n beq x\n cmp r1, #40\n bne l\nx: halt";
    let mut p = prover(src, 8);
    request(&mut p, 1, 1_000_000);
    let first = run_until_report(&mut p, 10_000);
    assert_eq!(first.log.len(), 8);
    assert_eq!(p.stats.t3, 1);
    respond(&mut p, VrfResult::Exec, 2);
    let second = run_until_report(&mut p, 10_000);
    assert!(second.log.len() <= 8);
    assert!(p.log().len() <= 8);
}

#[test]
fn reset_with_pending_report_retransmits_it() {
    let mut p = prover(LOOP3, 1024);
    request(&mut p, 1, 100_000);
    let before = run_until_report(&mut p, 1000);
    p.reset();
    assert_eq!(p.state(), State::TransmitWait);
    let after = run_until_report(&mut p, 10);
    assert_eq!(before, after);
    assert!(!p.context().resume_possible);
}

#[test]
fn reset_mid_run_reports_remnant_with_marker() {
    let mut p = prover("main: mov r1, #0\nl: add r1, #1\n cmp r1, #100\n beq x\n b l\nx: halt", 1024);
    request(&mut p, 1, 1_000_000);
    for _ in 0..40 {
        p.step();
    }
    let logged = decompress(p.log().bytes()).unwrap().len();
    p.reset();
    assert_eq!(p.state(), State::TransmitWait);
    let rp = run_until_report(&mut p, 10);
    let trace = decompress(&rp.log).unwrap();
    assert!(trace.len() > logged);
    assert_eq!(*trace.last().unwrap(), RESET_SENTINEL);
    assert_eq!(p.stats.ns_instructions, 40 - trace.len() as u64 + 1);
}

#[test]
fn heal_wipes_and_attests() {
    let mut p = prover(LOOP3, 1024);
    request(&mut p, 1, 100_000);
    run_until_report(&mut p, 1000);
    respond(&mut p, VrfResult::Heal, 2);
    assert_eq!(p.state(), State::Remediate);
    let rp = run_until_report(&mut p, 1000);
    let zero = crate::crypto::sha256(&vec![0; p.machine.pmem().len()]);
    assert!(rp.verify(&KEY, &zero, &Challenge::from_u64(2)));
    assert_eq!(p.stats.ns_after_heal, 0);
    respond(&mut p, VrfResult::End, 3);
    assert_eq!(p.state(), State::WaitingForVrf);
    assert_eq!(p.context().remediation, RemediationPhase::Idle);
}

#[test]
fn reset_mid_wipe_resumes_before_anything_else() {
    let mut p = prover(&format!("main: {}\n halt", "mov r0, #1\n".repeat(100)), 1024);
    request(&mut p, 1, 100_000);
    run_until_report(&mut p, 1000);
    respond(&mut p, VrfResult::Heal, 2);
    p.step();
    p.step();
    p.reset();
    assert_eq!(p.state(), State::Remediate);
    run_until_report(&mut p, 1000);
    assert!(p.machine.pmem().iter().all(|b| *b == 0));
    assert_eq!(p.stats.ns_after_heal, 0);
}

#[test]
fn freeze_parks_device() {
    let inst = instrument(LOOP3).unwrap();
    let config = ProverConfig { remediation: RemediationAction::Freeze, ..ProverConfig::new(KEY) };
    let mut p = Prover::new(&inst.image, AppIo::new(vec![], 0), config);
    request(&mut p, 1, 100_000);
    run_until_report(&mut p, 1000);
    respond(&mut p, VrfResult::Heal, 2);
    p.step();
    assert_eq!(p.state(), State::Done);
    p.reset();
    assert_eq!(p.state(), State::Done);
    assert!(p.machine.is_halted());
}
