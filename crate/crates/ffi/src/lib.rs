// SPDX-License-Identifier: Apache-2.0

//! C interface to the rtaudit simulator.
//!
//! Every function returns an [`RtStatus`]. On failure a message is kept per
//! thread and can be read with [`rt_last_error`]. Strings returned through
//! out-parameters are owned by the caller and released with
//! [`rt_string_free`]. Handles are released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use rtaudit::instrument::instrument;
use rtaudit::scenario::{run_scenario, Scenario, ScenarioError};
use rtaudit::vm::{Event, Machine, Reg, World};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Scenario file or assembly could not be parsed.
    Parse = 3,
    /// Instrumentation rejected the program.
    Instrument = 4,
    Io = 5,
    /// Register index out of range.
    OutOfRange = 6,
    /// The machine faulted; see the last error for the address.
    Fault = 7,
    /// The scenario ran but at least one expectation failed.
    ExpectationFailed = 8,
    Panic = 9,
}

/// A loaded scenario.
pub struct RtScenario(Scenario);

/// A bare machine running an uninstrumented program in the non-secure world.
pub struct RtMachine(Machine);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

struct Fail(RtStatus, String);

impl From<ScenarioError> for Fail {
    fn from(e: ScenarioError) -> Self {
        let status = match e {
            ScenarioError::Io { .. } => RtStatus::Io,
            ScenarioError::Instrument(_) => RtStatus::Instrument,
            _ => RtStatus::Parse,
        };
        Fail(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> RtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RtStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            RtStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(RtStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(RtStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| Fail(RtStatus::NullPointer, format!("{what} is null")))
}

fn c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).unwrap_or_default().into_raw()
}

/// Message for the most recent failure on this thread. Valid until the next
/// call on the same thread; never null.
#[no_mangle]
pub extern "C" fn rt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn rt_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Instruments assembly source. Writes the rewritten source and the
/// instrumentation map (TOML). Either output may be null if unwanted.
///
/// # Safety
/// `src` must be a NUL-terminated string; outputs must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn rt_instrument(
    src: *const c_char,
    out_source: *mut *mut c_char,
    out_map: *mut *mut c_char,
) -> RtStatus {
    guard(|| {
        let src = str_arg(src, "src")?;
        let inst = instrument(src).map_err(|e| Fail(RtStatus::Instrument, e.to_string()))?;
        if let Some(o) = out_source.as_mut() {
            *o = c_string(inst.source());
        }
        if let Some(o) = out_map.as_mut() {
            *o = c_string(inst.map.to_toml());
        }
        Ok(())
    })
}

/// Loads a scenario file. Relative program paths resolve against the file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rt_scenario_load(path: *const c_char, out: *mut *mut RtScenario) -> RtStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let s = Scenario::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(RtScenario(s)));
        Ok(())
    })
}

/// Creates a scenario with default settings around inline assembly.
///
/// # Safety
/// `src` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rt_scenario_from_source(src: *const c_char, out: *mut *mut RtScenario) -> RtStatus {
    guard(|| {
        let src = str_arg(src, "src")?;
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(RtScenario(Scenario::inline(src))));
        Ok(())
    })
}

/// Overrides seed, timer period (NS instructions) and log capacity (bytes).
/// Zero leaves a value unchanged.
///
/// # Safety
/// `s` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn rt_scenario_configure(s: *mut RtScenario, seed: u64, delta: u64, log_max: usize) -> RtStatus {
    guard(|| {
        let s = &mut out_arg(s, "scenario")?.0;
        if seed != 0 {
            s.seed = seed;
        }
        if delta != 0 {
            s.delta = delta;
        }
        if log_max != 0 {
            s.log_max = log_max;
        }
        Ok(())
    })
}

/// Sets the App input sequence.
///
/// # Safety
/// `s` must be a live handle; `input` must point to `len` words (or be null
/// when `len` is zero).
#[no_mangle]
pub unsafe extern "C" fn rt_scenario_set_input(s: *mut RtScenario, input: *const u32, len: usize) -> RtStatus {
    guard(|| {
        let s = &mut out_arg(s, "scenario")?.0;
        let words = if len == 0 {
            &[][..]
        } else if input.is_null() {
            return Err(Fail(RtStatus::NullPointer, "input is null".into()));
        } else {
            std::slice::from_raw_parts(input, len)
        };
        s.input = words.iter().map(|&w| rtaudit::scenario::InputValue::Num(w as i64)).collect();
        Ok(())
    })
}

/// Runs a scenario and writes its result as a JSON object. The JSON is
/// produced even when an expectation fails, in which case the status is
/// `EXPECTATION_FAILED`.
///
/// # Safety
/// `s` must be a live handle and `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rt_scenario_run(s: *const RtScenario, out_json: *mut *mut c_char) -> RtStatus {
    guard(|| {
        let s = &s.as_ref().ok_or_else(|| Fail(RtStatus::NullPointer, "scenario is null".into()))?.0;
        let out = out_arg(out_json, "out_json")?;
        *out = ptr::null_mut();
        let r = run_scenario(s)?;
        *out = c_string(serde_json::to_string(&r).expect("results serialize"));
        if r.passed {
            Ok(())
        } else {
            let failed: Vec<_> = r.expectations.iter().filter(|e| !e.ok).map(|e| e.name).collect();
            Err(Fail(RtStatus::ExpectationFailed, format!("failed: {}", failed.join(", "))))
        }
    })
}

/// # Safety
/// `s` must be null or a handle that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn rt_scenario_free(s: *mut RtScenario) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Assembles a program onto a fresh machine.
///
/// # Safety
/// `src` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rt_machine_load(src: *const c_char, out: *mut *mut RtMachine) -> RtStatus {
    guard(|| {
        let src = str_arg(src, "src")?;
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let mut m = Machine::load_program(src).map_err(|e| Fail(RtStatus::Parse, e.to_string()))?;
        m.world = World::NonSecure;
        *out = Box::into_raw(Box::new(RtMachine(m)));
        Ok(())
    })
}

/// Executes up to `max_steps` instructions, stopping early at `halt`.
/// Writes the number executed and whether the machine has halted.
///
/// # Safety
/// `m` must be a live handle; outputs must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn rt_machine_run(
    m: *mut RtMachine,
    max_steps: u64,
    out_steps: *mut u64,
    out_halted: *mut bool,
) -> RtStatus {
    guard(|| {
        let m = &mut out_arg(m, "machine")?.0;
        let mut steps = 0;
        let mut result = Ok(());
        while steps < max_steps {
            match m.step() {
                Event::Executed => steps += 1,
                Event::Halted => break,
                Event::Fault { kind, addr } => {
                    result = Err(Fail(RtStatus::Fault, format!("{kind:?} at {addr:#x}")));
                    break;
                }
                e => {
                    result = Err(Fail(RtStatus::Fault, format!("unexpected {e:?} outside the secure runtime")));
                    break;
                }
            }
        }
        if let Some(o) = out_steps.as_mut() {
            *o = steps;
        }
        if let Some(o) = out_halted.as_mut() {
            *o = m.is_halted();
        }
        result
    })
}

/// Reads general register `index` (0..=15; 15 is the pc).
///
/// # Safety
/// `m` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rt_machine_reg(m: *const RtMachine, index: u8, out: *mut u32) -> RtStatus {
    guard(|| {
        let m = &m.as_ref().ok_or_else(|| Fail(RtStatus::NullPointer, "machine is null".into()))?.0;
        let out = out_arg(out, "out")?;
        if index > 15 {
            return Err(Fail(RtStatus::OutOfRange, format!("register {index}")));
        }
        *out = if index == 15 { m.pc() } else { m.reg(Reg(index)) };
        Ok(())
    })
}

/// Writes the SHA-256 of program memory into `out` (32 bytes).
///
/// # Safety
/// `m` must be a live handle and `out` must point to 32 writable bytes.
#[no_mangle]
pub unsafe extern "C" fn rt_machine_pmem_digest(m: *const RtMachine, out: *mut u8) -> RtStatus {
    guard(|| {
        let m = &m.as_ref().ok_or_else(|| Fail(RtStatus::NullPointer, "machine is null".into()))?.0;
        if out.is_null() {
            return Err(Fail(RtStatus::NullPointer, "out is null".into()));
        }
        ptr::copy_nonoverlapping(m.hash_pmem().as_ptr(), out, 32);
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a handle that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn rt_machine_free(m: *mut RtMachine) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}
