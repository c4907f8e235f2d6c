// SPDX-License-Identifier: Apache-2.0

//! Instrumented runs against the uninstrumented reference.

mod common;

use common::*;
use proptest::prelude::*;
use rtaudit::instrument::instrument;
use rtaudit::protocol::VrfResult;

fn check(seed: u64, log_max: usize, delta: u64) -> Result<(), TestCaseError> {
    let (src, input) = ProgramGen::generate(seed);
    let inst = instrument(&src).map_err(|e| TestCaseError::fail(format!("{e}\n{src}")))?;
    let reference = reference_run(&src, &inst, &input, seed);
    let s = session(&inst, &inst.image, &input, seed, log_max, delta);
    prop_assert_eq!(&stitched(&s.reports), &reference.trace, "seed {}\n{}", seed, src);
    prop_assert_eq!(static_records(&s.reports), reference.loop_entries);
    let verdicts = s.verifier.verdicts();
    prop_assert!(verdicts.iter().all(|v| v.result != Some(VrfResult::Heal)), "{:?}", verdicts);
    prop_assert_eq!(verdicts.last().and_then(|v| v.result), Some(VrfResult::End));

    let regs = s.exit_regs.expect("App reached its end");
    for (o, i) in comparable_regs(&inst.map) {
        // r5 carries code addresses for indirect calls.
        if o != 5 {
            prop_assert_eq!(reference.regs[o], regs[i], "r{} (as r{})\n{}", o, i, src);
        }
    }
    let off = (DATA_BASE - 0x10000) as usize;
    prop_assert_eq!(&s.prover.machine.dmem()[off..off + DATA_WORDS * 4], &reference.data[..]);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn single_slice_matches_reference(seed in any::<u64>()) {
        check(seed, 60 * 1024, 10_000_000)?;
    }

    #[test]
    fn sliced_runs_match_reference(seed in any::<u64>(), log_max in 8usize..64, delta in 20u64..400) {
        check(seed, log_max & !3, delta)?;
    }
}

#[test]
fn renamed_registers_keep_values() {
    let src = "main: mov r10, #7\n add r11, r10, #1\n cmp r11, #8\n beq x\n mov r0, #1\nx: halt";
    let inst = instrument(src).unwrap();
    assert_eq!(inst.map.renames.len(), 2);
    let reference = reference_run(src, &inst, &[], 0);
    let s = session(&inst, &inst.image, &[], 0, 1024, 1_000_000);
    let regs = s.exit_regs.unwrap();
    for r in &inst.map.renames {
        assert_eq!(regs[r.to as usize], reference.regs[r.from as usize]);
    }
}
