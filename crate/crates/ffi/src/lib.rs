//! C bindings for the training engine.
//!
//! Handles are opaque: the caller gets a pointer from a constructor, passes
//! it to query functions, and releases it with the matching `_free`. Every
//! fallible call returns an [`RtStatus`]; on anything but `RT_STATUS_OK` the
//! thread-local message behind [`rt_last_error`] says what went wrong.
//! Strings returned by query functions stay owned by their handle and are
//! valid until it is freed.

use ringtrain::harness::render_csv;
use ringtrain::sim::{scalability_curve, simulate_iteration, SimFileConfig};
use ringtrain::optim::{dequantize_fp16, quantize_fp16, Half16};
use ringtrain::{parse_log, run_training, RunConfig, RunSummary};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RtStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Configuration text failed to parse or validate.
    BadConfig = 3,
    /// Training failed to run (worker error, transport failure).
    TrainFailed = 4,
    /// Log text failed to parse.
    BadLog = 5,
    /// A panic was caught at the boundary; details via rt_last_error.
    Internal = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let clean = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(clean).expect("nul bytes stripped");
    });
}

fn fail(status: RtStatus, msg: &str) -> RtStatus {
    set_error(msg);
    status
}

/// Runs a closure, converting a panic into `Internal` instead of letting it
/// unwind into the caller.
fn guarded(body: impl FnOnce() -> RtStatus) -> RtStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic with non-string payload".into());
            fail(RtStatus::Internal, &msg)
        }
    }
}

unsafe fn utf8_arg<'a>(ptr: *const c_char) -> Result<&'a str, RtStatus> {
    if ptr.is_null() {
        return Err(fail(RtStatus::NullArgument, "string argument is null"));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|e| fail(RtStatus::InvalidUtf8, &e.to_string()))
}

/// Message from the most recent failing call on this thread. Empty string
/// when nothing failed yet; the pointer is invalidated by the next failure.
#[no_mangle]
pub extern "C" fn rt_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn rt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Training configuration. Build from TOML text; defaults mirror the CLI.
pub struct RtConfig {
    inner: RunConfig,
}

/// Everything a finished run exposes: metrics, the event log, and the
/// per-iteration CSV.
pub struct RtRun {
    final_accuracy: f64,
    elapsed_seconds: f64,
    updates: u64,
    diverged: bool,
    log: CString,
    csv: CString,
}

impl RtRun {
    fn from_summary(summary: &RunSummary) -> RtRun {
        let log = summary.log_text().replace('\0', " ");
        let csv = render_csv(&summary.rows).replace('\0', " ");
        RtRun {
            final_accuracy: summary.final_accuracy().unwrap_or(f64::NAN),
            elapsed_seconds: summary.elapsed_seconds,
            updates: summary.updates,
            diverged: summary.diverged,
            log: CString::new(log).expect("nul bytes stripped"),
            csv: CString::new(csv).expect("nul bytes stripped"),
        }
    }
}

/// A configuration with every field at its default.
#[no_mangle]
pub extern "C" fn rt_config_default() -> *mut RtConfig {
    Box::into_raw(Box::new(RtConfig {
        inner: RunConfig::default(),
    }))
}

/// Parses and validates TOML configuration text. Returns null on failure;
/// rt_last_error carries the reason.
#[no_mangle]
pub unsafe extern "C" fn rt_config_from_toml(text: *const c_char) -> *mut RtConfig {
    let Ok(text) = utf8_arg(text) else {
        return std::ptr::null_mut();
    };
    match RunConfig::from_toml(text).and_then(|cfg| cfg.validate().map(|_| cfg)) {
        Ok(inner) => Box::into_raw(Box::new(RtConfig { inner })),
        Err(e) => {
            set_error(&e);
            std::ptr::null_mut()
        }
    }
}

#[no_mangle]
pub unsafe extern "C" fn rt_config_free(cfg: *mut RtConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs training to completion on the calling thread (workers spawn
/// internally). A diverged run still returns `Ok` with a result handle;
/// check rt_run_diverged.
#[no_mangle]
pub unsafe extern "C" fn rt_train(cfg: *const RtConfig, out: *mut *mut RtRun) -> RtStatus {
    if cfg.is_null() || out.is_null() {
        return fail(RtStatus::NullArgument, "config and out must be non-null");
    }
    let cfg = &(*cfg).inner;
    guarded(|| match run_training(cfg) {
        Ok(summary) => {
            *out = Box::into_raw(Box::new(RtRun::from_summary(&summary)));
            RtStatus::Ok
        }
        Err(e) => fail(RtStatus::TrainFailed, &e.to_string()),
    })
}

#[no_mangle]
pub unsafe extern "C" fn rt_run_free(run: *mut RtRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Last evaluation accuracy, NaN when the run never evaluated.
#[no_mangle]
pub unsafe extern "C" fn rt_run_final_accuracy(run: *const RtRun) -> f64 {
    if run.is_null() {
        return f64::NAN;
    }
    (*run).final_accuracy
}

/// Wall-clock seconds between the run's start and final log events.
#[no_mangle]
pub unsafe extern "C" fn rt_run_elapsed_seconds(run: *const RtRun) -> f64 {
    if run.is_null() {
        return f64::NAN;
    }
    (*run).elapsed_seconds
}

/// Optimizer steps applied before the run finished or aborted.
#[no_mangle]
pub unsafe extern "C" fn rt_run_updates(run: *const RtRun) -> u64 {
    if run.is_null() {
        return 0;
    }
    (*run).updates
}

#[no_mangle]
pub unsafe extern "C" fn rt_run_diverged(run: *const RtRun) -> bool {
    if run.is_null() {
        return false;
    }
    (*run).diverged
}

/// The run's event log; owned by the handle.
#[no_mangle]
pub unsafe extern "C" fn rt_run_log(run: *const RtRun) -> *const c_char {
    if run.is_null() {
        return std::ptr::null();
    }
    (*run).log.as_ptr()
}

/// The run's per-iteration metrics as CSV; owned by the handle.
#[no_mangle]
pub unsafe extern "C" fn rt_run_csv(run: *const RtRun) -> *const c_char {
    if run.is_null() {
        return std::ptr::null();
    }
    (*run).csv.as_ptr()
}

/// Parses event-log text. `elapsed_seconds` gets run_start to run_final;
/// `final_accuracy` gets the last eval_accuracy value, NaN when the log has
/// none.
#[no_mangle]
pub unsafe extern "C" fn rt_parse_log(
    text: *const c_char,
    elapsed_seconds: *mut f64,
    final_accuracy: *mut f64,
) -> RtStatus {
    if elapsed_seconds.is_null() || final_accuracy.is_null() {
        return fail(RtStatus::NullArgument, "output pointers must be non-null");
    }
    let text = match utf8_arg(text) {
        Ok(t) => t,
        Err(status) => return status,
    };
    match parse_log(text) {
        Ok(summary) => {
            *elapsed_seconds = summary.elapsed_seconds;
            *final_accuracy = summary.final_accuracy().unwrap_or(f64::NAN);
            RtStatus::Ok
        }
        Err(e) => fail(RtStatus::BadLog, &e),
    }
}

/// Times one simulated training iteration at the given world size and
/// reports its weak-scaling efficiency against one worker. `toml` uses the
/// simulator's flat configuration; an empty string means the built-in
/// calibration numbers.
#[no_mangle]
pub unsafe extern "C" fn rt_simulate(
    toml: *const c_char,
    world: u32,
    iteration_us: *mut f64,
    efficiency: *mut f64,
) -> RtStatus {
    if iteration_us.is_null() || efficiency.is_null() {
        return fail(RtStatus::NullArgument, "output pointers must be non-null");
    }
    let text = match utf8_arg(toml) {
        Ok(t) => t,
        Err(status) => return status,
    };
    if world == 0 {
        return fail(RtStatus::BadConfig, "world size must be at least 1");
    }
    guarded(|| {
        let file = if text.trim().is_empty() {
            SimFileConfig::default()
        } else {
            match SimFileConfig::from_toml(text) {
                Ok(f) => f,
                Err(e) => return fail(RtStatus::BadConfig, &e),
            }
        };
        let mut sim = match file.to_sim_config() {
            Ok(s) => s,
            Err(e) => return fail(RtStatus::BadConfig, &e),
        };
        sim.world = world;
        *iteration_us = simulate_iteration(&sim).iteration_time_us;
        *efficiency = scalability_curve(&sim, &[world])[0].efficiency;
        RtStatus::Ok
    })
}

/// Converts `len` f32 values to round-to-nearest-even half precision bits.
#[no_mangle]
pub unsafe extern "C" fn rt_quantize_fp16(src: *const f32, len: usize, dst: *mut u16) -> RtStatus {
    if src.is_null() || dst.is_null() {
        return fail(RtStatus::NullArgument, "src and dst must be non-null");
    }
    let src = std::slice::from_raw_parts(src, len);
    let dst = std::slice::from_raw_parts_mut(dst, len);
    for (d, h) in dst.iter_mut().zip(quantize_fp16(src)) {
        *d = h.to_bits();
    }
    RtStatus::Ok
}

/// Converts `len` half precision bit patterns back to f32.
#[no_mangle]
pub unsafe extern "C" fn rt_dequantize_fp16(src: *const u16, len: usize, dst: *mut f32) -> RtStatus {
    if src.is_null() || dst.is_null() {
        return fail(RtStatus::NullArgument, "src and dst must be non-null");
    }
    let halves: Vec<Half16> = std::slice::from_raw_parts(src, len)
        .iter()
        .map(|&bits| Half16::from_bits(bits))
        .collect();
    let dst = std::slice::from_raw_parts_mut(dst, len);
    dst.copy_from_slice(&dequantize_fp16(&halves));
    RtStatus::Ok
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;

    fn c(text: &str) -> CString {
        CString::new(text).unwrap()
    }

    #[test]
    fn version_is_a_c_string() {
        let v = unsafe { CStr::from_ptr(rt_version()) };
        assert!(!v.to_str().unwrap().is_empty());
    }

    #[test]
    fn bad_toml_reports_through_last_error() {
        let text = c("world_size = \"many\"");
        let cfg = unsafe { rt_config_from_toml(text.as_ptr()) };
        assert!(cfg.is_null());
        let msg = unsafe { CStr::from_ptr(rt_last_error()) };
        assert!(!msg.to_bytes().is_empty());
    }

    #[test]
    fn null_arguments_are_rejected_not_dereferenced() {
        let cfg = unsafe { rt_config_from_toml(std::ptr::null()) };
        assert!(cfg.is_null());
        let mut out: *mut RtRun = std::ptr::null_mut();
        assert_eq!(
            unsafe { rt_train(std::ptr::null(), &mut out) },
            RtStatus::NullArgument
        );
        assert_eq!(
            unsafe { rt_parse_log(std::ptr::null(), &mut 0.0, &mut 0.0) },
            RtStatus::NullArgument
        );
    }

    #[test]
    fn train_runs_from_toml_and_reports() {
        let text = c(r#"
            layer_dims = [8, 16, 10]
            batchnorm = false
            dataset_n = 256
            eval_n = 64
            batch_per_rank = 16
            epochs = 2
            eval_period = 2
            eval_offset = 1
            base_lr = 0.05
            warmup_epochs = 1
        "#);
        let cfg = unsafe { rt_config_from_toml(text.as_ptr()) };
        assert!(!cfg.is_null());
        let mut run: *mut RtRun = std::ptr::null_mut();
        assert_eq!(unsafe { rt_train(cfg, &mut run) }, RtStatus::Ok);
        assert!(!run.is_null());

        let acc = unsafe { rt_run_final_accuracy(run) };
        assert!((0.0..=1.0).contains(&acc), "accuracy {acc}");
        assert!(!unsafe { rt_run_diverged(run) });
        assert!(unsafe { rt_run_updates(run) } > 0);

        let log = unsafe { CStr::from_ptr(rt_run_log(run)) }.to_owned();
        let mut elapsed = 0.0;
        let mut final_acc = 0.0;
        assert_eq!(
            unsafe { rt_parse_log(log.as_ptr(), &mut elapsed, &mut final_acc) },
            RtStatus::Ok
        );
        assert!(elapsed > 0.0);
        assert_eq!(final_acc, acc);

        let csv = unsafe { CStr::from_ptr(rt_run_csv(run)) };
        assert!(csv.to_str().unwrap().starts_with("epoch,iter,lr"));

        unsafe {
            rt_run_free(run);
            rt_config_free(cfg);
        }
    }

    #[test]
    fn simulate_defaults_hit_the_calibration_point() {
        let text = c("");
        let mut us = 0.0;
        let mut eff = 0.0;
        assert_eq!(
            unsafe { rt_simulate(text.as_ptr(), 2048, &mut us, &mut eff) },
            RtStatus::Ok
        );
        assert!(us > 0.0);
        assert!((eff - 0.77).abs() <= 0.01, "efficiency {eff}");
    }

    #[test]
    fn fp16_round_trip_preserves_half_values() {
        let src = [0.0f32, 1.0, -2.5, 65504.0, 1.0e-8];
        let mut bits = [0u16; 5];
        let mut back = [0.0f32; 5];
        unsafe {
            assert_eq!(
                rt_quantize_fp16(src.as_ptr(), src.len(), bits.as_mut_ptr()),
                RtStatus::Ok
            );
            assert_eq!(
                rt_dequantize_fp16(bits.as_ptr(), bits.len(), back.as_mut_ptr()),
                RtStatus::Ok
            );
        }
        assert_eq!(back[0], 0.0);
        assert_eq!(back[1], 1.0);
        assert_eq!(back[2], -2.5);
        assert_eq!(back[3], 65504.0);
        // Below the subnormal floor rounds to zero.
        assert_eq!(back[4], 0.0);
    }
}
