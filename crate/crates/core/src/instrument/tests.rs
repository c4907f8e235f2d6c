// SPDX-License-Identifier: Apache-2.0

use super::*;
use crate::vm::{Event, Machine, NscGate, World};

fn count_calls(p: &Program, t: TrampolineId) -> usize {
    p.stmts.iter().filter(|s| matches!(&s.op, AsmOp::Bl(x) | AsmOp::B(x) if x == t.symbol())).count()
}

#[test]
fn leaf_return_becomes_branch() {
    let out = instrument("main: bl f\n halt\nf: mov r0, #1\n bx lr").unwrap();
    assert!(out.source().contains("b trampoline_ret"));
    assert!(!out.source().contains("bx lr"));
    assert_eq!(out.map.count(RewriteKind::ReturnBxLr), 1);
}

#[test]
fn pop_pc_becomes_pop_lr_and_branch() {
    let out = instrument("main: bl f\n halt\nf: push {r4, lr}\n pop {r4, pc}").unwrap();
    let s = out.source();
    assert!(s.contains("pop {r4, lr}\n    b trampoline_ret"), "{s}");
}

#[test]
fn indirect_call_goes_through_r10() {
    let out = instrument("main: mov r3, =f\n blx r3\n halt\nf: bx lr").unwrap();
    assert!(out.source().contains("mov r10, r3\n    bl trampoline_icall"));
}

#[test]
fn conditional_instrumented_in_both_places() {
    let src = "main: cmp r0, #0\n beq l1\n mov r1, #1\nl1: halt";
    let out = instrument(src).unwrap();
    assert_eq!(count_calls(&out.program, TrampolineId::Cond), 2);
    assert_eq!(out.map.count(RewriteKind::CondTaken), 1);
    assert_eq!(out.map.count(RewriteKind::CondNotTaken), 1);
}

#[test]
fn nested_conditionals_four_insertions() {
    let src = "\
main:   cmp r0, #0
        beq outer_end
        mov r1, #1
        cmp r2, #3
        bne inner_end
        mov r1, #2
inner_end:
        add r1, r1, #1
outer_end:
        mov r3, r1
        halt";
    let out = instrument(src).unwrap();
    assert_eq!(count_calls(&out.program, TrampolineId::Cond), 4);
}

#[test]
fn static_loop_detected() {
    let p = asm::parse("main: mov r1, #0\nl: add r1, #1\n cmp r1, #5\n bne l\n halt").unwrap();
    let loops = detect_static_loops(&p);
    assert_eq!(loops.len(), 1);
    assert_eq!(loops[0].limit, LoopLimit::Imm(5));
    assert_eq!(loops[0].taken_dest_addr, 4);
    assert_eq!(loops[0].counter_register, 1);
}

#[test]
fn loop_with_call_is_not_static() {
    let p = asm::parse("main: mov r1, #0\nl: bl f\n add r1, #1\n cmp r1, #5\n bne l\n halt\nf: bx lr").unwrap();
    assert!(detect_static_loops(&p).is_empty());
}

#[test]
fn empty_program_has_no_loops() {
    assert!(detect_static_loops(&Program::default()).is_empty());
}

#[test]
fn static_loop_block_is_three_instructions() {
    let src = "main: mov r4, #7\n mov r1, #0\nl: add r1, #1\n cmp r1, r4\n blo l\n halt";
    let out = instrument(src).unwrap();
    let s = out.source();
    assert!(s.contains("mov r10, =l\n    mov r11, r4\n    bl trampoline_loop\nl:"), "{s}");
    // Original 6 plus the loop block, the exit call and nothing else.
    assert_eq!(out.program.instruction_count(), 6 + 3 + 1);
}

fn run_collect(img: &Image, limit: usize) -> Vec<TrampolineId> {
    let mut m = Machine::from_image(img);
    m.world = World::NonSecure;
    let mut seen = Vec::new();
    for _ in 0..limit {
        match m.step() {
            Event::Executed => {}
            Event::NscEntry { gate: NscGate::Trampoline(t), regs } => {
                seen.push(t);
                if t == TrampolineId::Exit {
                    break;
                }
                m.world = World::NonSecure;
                let next = match t {
                    TrampolineId::ICall => regs[10],
                    _ => regs[14],
                };
                m.set_pc(next);
            }
            e => panic!("{e:?}"),
        }
    }
    seen
}

#[test]
fn five_iteration_loop_calls_loop_trampoline_once() {
    let out = instrument("main: mov r1, #0\nl: add r1, #1\n cmp r1, #5\n bne l\n halt").unwrap();
    let seen = run_collect(&out.image, 1000);
    assert_eq!(seen, vec![TrampolineId::Loop, TrampolineId::Cond, TrampolineId::Exit]);
}

#[test]
fn r10_r11_renamed_to_lowest_free() {
    let out = instrument("main: mov r10, #1\n mov r11, #2\n add r0, r10, r11\n halt").unwrap();
    assert_eq!(out.map.renames, vec![RegisterRename { from: 10, to: 1 }, RegisterRename { from: 11, to: 2 },]);
    assert!(!out.source().contains("r10"));
}

#[test]
fn register_pressure_reported() {
    let mut src = String::from("main:\n");
    for r in 0..=12 {
        src.push_str(&format!(" mov r{r}, #1\n"));
    }
    src.push_str(" halt\n");
    assert_eq!(instrument(&src).unwrap_err(), InstrumentError::RegisterPressure(Reg::RR0));
}

#[test]
fn trampoline_reference_rejected() {
    let err = instrument("main: b trampoline_cond").unwrap_err();
    assert!(matches!(err, InstrumentError::UnsupportedPattern { line: 1, .. }));
}

#[test]
fn clobbered_leaf_return_rejected() {
    let err = instrument("main: bl f\n halt\nf: cmp r0, #0\n beq x\n mov r0, #1\nx: mov r1, #2\n bx lr").unwrap_err();
    assert!(matches!(err, InstrumentError::UnsupportedPattern { .. }), "{err:?}");
}

#[test]
fn call_followed_by_branch_target() {
    let src = "main: mov r0, #1\n cmp r0, #0\n beq skip\n bl f\nskip: halt\nf: bx lr";
    let out = instrument(src).unwrap();
    let seen = run_collect(&out.image, 100);
    // Not taken, then call/return, then exit.
    assert_eq!(seen, vec![TrampolineId::Cond, TrampolineId::Ret, TrampolineId::Exit]);
}

#[test]
fn map_roundtrips_through_toml() {
    let out = instrument("main: mov r10, #0\nl: add r10, #1\n cmp r10, #3\n bne l\n blx r0\n halt").unwrap();
    let text = out.map.to_toml();
    assert_eq!(InstrumentationMap::from_toml(&text).unwrap(), out.map);
}

#[test]
fn instruction_count_grows() {
    let src = "main: cmp r0, #1\n bne a\n mov r2, #1\na: halt";
    let out = instrument(src).unwrap();
    assert!(out.program.instruction_count() > asm::parse(src).unwrap().instruction_count());
}

#[test]
fn uncalled_leaf_after_framed_function_accepted() {
    let src = "main: bl f\n halt\nf: push {lr}\n cmp r0, #0\n beq x\n mov r0, #1\nx: pop {pc}\ng: mov r0, #2\n bx lr";
    instrument(src).unwrap();
}

#[test]
fn rename_never_targets_reserved_registers() {
    let out = instrument("main: mov r10, #1\n add r10, r10, #1\n halt").unwrap();
    assert!(out.map.renames.iter().all(|r| r.to != 10 && r.to != 11));
}
