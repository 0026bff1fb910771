//! C ABI for the trajectory-tree toolkit.
//!
//! Other languages drive the pipeline through opaque handles and status
//! codes: parse a task record into a [`TtkTree`], pack it into a
//! [`TtkBatch`], then copy out the flattened arrays or the canonical TTK1
//! bytes. Scalar kernels (advantages, pass@K, K-fold averaging, importance
//! weights) are exposed directly.
//!
//! Conventions:
//!
//! * every function returns a [`TtkStatus`]; `TTK_STATUS_OK` is zero;
//! * out-parameters are written only on success;
//! * any failure stores a message retrievable via [`ttk_last_error`] on the
//!   same thread;
//! * handles are freed exactly once with their matching `_free` function;
//! * buffers returned by the library are freed with [`ttk_bytes_free`].
//!
//! The generated header lives at `include/ttkit.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use ttkit::batch_file;
use ttkit::mcla::{mcla_average, MclaConfig, NoiseModel};
use ttkit::objectives::{
    group_advantages, pass_at_k_filter, AdvantageMode, CurationSample, ObjectiveConfig,
};
use ttkit::packing::{dfs_flatten, NormalizationMode, PackedBatch};
use ttkit::records::parse_task_line;
use ttkit::trajectory::{build_tree, tree_stats, validate_tree, Origin, TrajectoryTree};

/// Status codes returned by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TtkStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ParseError = 3,
    InvalidTree = 4,
    PackError = 5,
    DecodeError = 6,
    InternalError = 7,
}

/// Opaque prefix-shared trajectory tree.
pub struct TtkTree {
    inner: TrajectoryTree,
}

/// Opaque flattened training batch.
pub struct TtkBatch {
    inner: PackedBatch,
}

/// Token counts of one tree and their ratio.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct TtkTreeStats {
    pub tree_tokens: u64,
    pub linear_tokens: u64,
    pub redundancy_ratio: f64,
}

/// pass@K decision for one curation sample.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct TtkPassAtK {
    pub r_hat: f64,
    pub retained: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: impl ToString) {
    let message = message.to_string().replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(message).unwrap_or_default();
    });
}

fn fail(status: TtkStatus, message: impl ToString) -> TtkStatus {
    set_error(message);
    status
}

fn guarded(f: impl FnOnce() -> TtkStatus) -> TtkStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(TtkStatus::InternalError, "internal panic"),
    }
}

/// Copy the current thread's last error message (NUL-terminated) into `buf`.
/// Returns the full message length in bytes, excluding the terminator; when
/// `buf` is null or too small the message is truncated to fit.
///
/// # Safety
/// `buf` must point to `cap` writable bytes, or be null.
#[no_mangle]
pub unsafe extern "C" fn ttk_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let msg = slot.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ttk_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Parse one task record line (the line-delimited JSON format) and build its
/// prefix-shared tree.
///
/// # Safety
/// `json` must point to `len` readable bytes; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ttk_tree_from_record_json(
    json: *const u8,
    len: usize,
    strict: bool,
    out: *mut *mut TtkTree,
) -> TtkStatus {
    guarded(|| {
        if json.is_null() || out.is_null() {
            return fail(TtkStatus::NullPointer, "json/out must not be null");
        }
        let bytes = std::slice::from_raw_parts(json, len);
        let text = match std::str::from_utf8(bytes) {
            Ok(t) => t,
            Err(e) => return fail(TtkStatus::ParseError, format!("utf-8: {e}")),
        };
        let mut warnings = Vec::new();
        let task = match parse_task_line(text.trim(), 1, strict, &mut warnings) {
            Ok(t) => t,
            Err(e) => return fail(TtkStatus::ParseError, e),
        };
        let tree = match build_tree(&task.group.trajectories) {
            Ok(t) => t,
            Err(e) => return fail(TtkStatus::InvalidTree, e),
        };
        *out = Box::into_raw(Box::new(TtkTree { inner: tree }));
        TtkStatus::Ok
    })
}

/// # Safety
/// `tree` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn ttk_tree_free(tree: *mut TtkTree) {
    if !tree.is_null() {
        drop(Box::from_raw(tree));
    }
}

/// Token accounting for a tree.
///
/// # Safety
/// `tree` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ttk_tree_stats(tree: *const TtkTree, out: *mut TtkTreeStats) -> TtkStatus {
    guarded(|| {
        if tree.is_null() || out.is_null() {
            return fail(TtkStatus::NullPointer, "tree/out must not be null");
        }
        let stats = tree_stats(&(*tree).inner);
        *out = TtkTreeStats {
            tree_tokens: stats.tree_tokens,
            linear_tokens: stats.linear_tokens,
            redundancy_ratio: stats.redundancy_ratio,
        };
        TtkStatus::Ok
    })
}

/// Number of structural violations in the tree (0 means valid).
///
/// # Safety
/// `tree` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ttk_tree_violations(tree: *const TtkTree, out: *mut usize) -> TtkStatus {
    guarded(|| {
        if tree.is_null() || out.is_null() {
            return fail(TtkStatus::NullPointer, "tree/out must not be null");
        }
        *out = validate_tree(&(*tree).inner).len();
        TtkStatus::Ok
    })
}

/// Loss-weight normalization selector: 0 path-sum, 1 path-mean.
fn mode_from_byte(mode: u8) -> Option<NormalizationMode> {
    match mode {
        0 => Some(NormalizationMode::PathSum),
        1 => Some(NormalizationMode::PathMean),
        _ => None,
    }
}

/// Flatten a tree into a packed batch.
///
/// # Safety
/// `tree` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ttk_batch_pack(
    tree: *const TtkTree,
    mode: u8,
    out: *mut *mut TtkBatch,
) -> TtkStatus {
    guarded(|| {
        if tree.is_null() || out.is_null() {
            return fail(TtkStatus::NullPointer, "tree/out must not be null");
        }
        let Some(mode) = mode_from_byte(mode) else {
            return fail(TtkStatus::InvalidArgument, format!("mode byte {mode}"));
        };
        match dfs_flatten(&(*tree).inner, mode) {
            Ok(batch) => {
                *out = Box::into_raw(Box::new(TtkBatch { inner: batch }));
                TtkStatus::Ok
            }
            Err(e) => fail(TtkStatus::PackError, e),
        }
    })
}

/// # Safety
/// `batch` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn ttk_batch_free(batch: *mut TtkBatch) {
    if !batch.is_null() {
        drop(Box::from_raw(batch));
    }
}

/// Flattened length T of the batch.
///
/// # Safety
/// `batch` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ttk_batch_len(batch: *const TtkBatch, out: *mut u64) -> TtkStatus {
    guarded(|| {
        if batch.is_null() || out.is_null() {
            return fail(TtkStatus::NullPointer, "batch/out must not be null");
        }
        *out = (*batch).inner.len() as u64;
        TtkStatus::Ok
    })
}

unsafe fn copy_array<T: Copy>(src: &[T], buf: *mut T, cap: usize) -> TtkStatus {
    if buf.is_null() {
        return fail(TtkStatus::NullPointer, "buffer must not be null");
    }
    if cap < src.len() {
        return fail(
            TtkStatus::InvalidArgument,
            format!("buffer holds {cap} entries, need {}", src.len()),
        );
    }
    std::ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len());
    TtkStatus::Ok
}

/// Copy the token ids into `buf` (capacity `cap` entries; needs at least T).
///
/// # Safety
/// `batch` must be valid; `buf` must point to `cap` writable entries.
#[no_mangle]
pub unsafe extern "C" fn ttk_batch_token_ids(
    batch: *const TtkBatch,
    buf: *mut u32,
    cap: usize,
) -> TtkStatus {
    guarded(|| {
        if batch.is_null() {
            return fail(TtkStatus::NullPointer, "batch must not be null");
        }
        copy_array(&(*batch).inner.token_ids, buf, cap)
    })
}

/// Copy the per-token position ids into `buf`.
///
/// # Safety
/// `batch` must be valid; `buf` must point to `cap` writable entries.
#[no_mangle]
pub unsafe extern "C" fn ttk_batch_position_ids(
    batch: *const TtkBatch,
    buf: *mut u32,
    cap: usize,
) -> TtkStatus {
    guarded(|| {
        if batch.is_null() {
            return fail(TtkStatus::NullPointer, "batch must not be null");
        }
        copy_array(&(*batch).inner.position_ids, buf, cap)
    })
}

/// Copy the per-token loss weights into `buf`.
///
/// # Safety
/// `batch` must be valid; `buf` must point to `cap` writable entries.
#[no_mangle]
pub unsafe extern "C" fn ttk_batch_loss_weights(
    batch: *const TtkBatch,
    buf: *mut f64,
    cap: usize,
) -> TtkStatus {
    guarded(|| {
        if batch.is_null() {
            return fail(TtkStatus::NullPointer, "batch must not be null");
        }
        copy_array(&(*batch).inner.loss_weights, buf, cap)
    })
}

/// Copy the per-token origins (0 prompt, 1 generated) into `buf`.
///
/// # Safety
/// `batch` must be valid; `buf` must point to `cap` writable entries.
#[no_mangle]
pub unsafe extern "C" fn ttk_batch_origins(
    batch: *const TtkBatch,
    buf: *mut u8,
    cap: usize,
) -> TtkStatus {
    guarded(|| {
        if batch.is_null() {
            return fail(TtkStatus::NullPointer, "batch must not be null");
        }
        let bytes: Vec<u8> = (*batch)
            .inner
            .origins
            .iter()
            .map(|o| match o {
                Origin::Prompt => 0u8,
                Origin::Generated => 1u8,
            })
            .collect();
        copy_array(&bytes, buf, cap)
    })
}

/// Whether flat token `i` may attend to flat token `j` under the tree mask.
///
/// # Safety
/// `batch` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ttk_batch_attends(
    batch: *const TtkBatch,
    i: u64,
    j: u64,
    out: *mut bool,
) -> TtkStatus {
    guarded(|| {
        if batch.is_null() || out.is_null() {
            return fail(TtkStatus::NullPointer, "batch/out must not be null");
        }
        let t = (*batch).inner.len() as u64;
        if i >= t || j >= t {
            return fail(TtkStatus::InvalidArgument, format!("indices ({i},{j}) out of {t}"));
        }
        *out = (*batch).inner.attends(i as usize, j as usize);
        TtkStatus::Ok
    })
}

/// Serialize the batch to canonical TTK1 bytes. The buffer is owned by the
/// library; release it with [`ttk_bytes_free`].
///
/// # Safety
/// `batch`, `out`, and `out_len` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ttk_batch_to_bytes(
    batch: *const TtkBatch,
    out: *mut *mut u8,
    out_len: *mut usize,
) -> TtkStatus {
    guarded(|| {
        if batch.is_null() || out.is_null() || out_len.is_null() {
            return fail(TtkStatus::NullPointer, "batch/out/out_len must not be null");
        }
        let bytes = batch_file::to_bytes(&(*batch).inner).into_boxed_slice();
        *out_len = bytes.len();
        *out = Box::into_raw(bytes) as *mut u8;
        TtkStatus::Ok
    })
}

/// Decode TTK1 bytes into a batch handle.
///
/// # Safety
/// `bytes` must point to `len` readable bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ttk_batch_from_bytes(
    bytes: *const u8,
    len: usize,
    out: *mut *mut TtkBatch,
) -> TtkStatus {
    guarded(|| {
        if bytes.is_null() || out.is_null() {
            return fail(TtkStatus::NullPointer, "bytes/out must not be null");
        }
        let slice = std::slice::from_raw_parts(bytes, len);
        match batch_file::from_bytes(slice) {
            Ok(batch) => {
                *out = Box::into_raw(Box::new(TtkBatch { inner: batch }));
                TtkStatus::Ok
            }
            Err(e) => fail(TtkStatus::DecodeError, e),
        }
    })
}

/// Free a byte buffer returned by [`ttk_batch_to_bytes`].
///
/// # Safety
/// `bytes` must be a buffer of exactly `len` bytes returned by this library,
/// not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ttk_bytes_free(bytes: *mut u8, len: usize) {
    if !bytes.is_null() {
        drop(Box::from_raw(std::ptr::slice_from_raw_parts_mut(bytes, len)));
    }
}

/// Group-relative advantages. `advantage_mode`: 0 mean/std normalized,
/// 1 mean-only. Writes `len` values into `out`.
///
/// # Safety
/// `rewards` must point to `len` readable doubles and `out` to `len`
/// writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ttk_group_advantages(
    rewards: *const f64,
    len: usize,
    advantage_mode: u8,
    std_floor: f64,
    out: *mut f64,
) -> TtkStatus {
    guarded(|| {
        if rewards.is_null() || out.is_null() {
            return fail(TtkStatus::NullPointer, "rewards/out must not be null");
        }
        let mode = match advantage_mode {
            0 => AdvantageMode::MeanStdNorm,
            1 => AdvantageMode::MeanOnly,
            m => return fail(TtkStatus::InvalidArgument, format!("advantage mode {m}")),
        };
        let cfg = ObjectiveConfig { advantage_mode: mode, std_floor, ..Default::default() };
        let values = std::slice::from_raw_parts(rewards, len);
        match group_advantages(values, &cfg) {
            Ok(adv) => {
                std::ptr::copy_nonoverlapping(adv.as_ptr(), out, adv.len());
                TtkStatus::Ok
            }
            Err(e) => fail(TtkStatus::InvalidArgument, e),
        }
    })
}

/// pass@K band filter from a correct-count: retained iff 0 < correct < k.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ttk_pass_at_k(correct: u32, k: u32, out: *mut TtkPassAtK) -> TtkStatus {
    guarded(|| {
        if out.is_null() {
            return fail(TtkStatus::NullPointer, "out must not be null");
        }
        if k == 0 || correct > k {
            return fail(TtkStatus::InvalidArgument, format!("correct {correct} of k {k}"));
        }
        let sample = CurationSample {
            answers: (0..k).map(|i| if i < correct { "g".into() } else { "x".into() }).collect(),
            gold: "g".into(),
        };
        let d = pass_at_k_filter(&sample);
        *out = TtkPassAtK { r_hat: d.r_hat, retained: d.retained };
        TtkStatus::Ok
    })
}

/// Mean of `k` seeded noisy draws of `true_lp` under zero-mean Gaussian
/// noise with standard deviation `sigma`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ttk_mcla_average(
    true_lp: f64,
    sigma: f64,
    k: u32,
    seed: u64,
    trial: u64,
    out: *mut f64,
) -> TtkStatus {
    guarded(|| {
        if out.is_null() {
            return fail(TtkStatus::NullPointer, "out must not be null");
        }
        if k == 0 || !sigma.is_finite() || sigma < 0.0 {
            return fail(TtkStatus::InvalidArgument, "k must be >= 1 and sigma finite >= 0");
        }
        let model = NoiseModel::gaussian(sigma, seed);
        let cfg = MclaConfig { k, apply_icepop: false };
        *out = mcla_average(true_lp, &model, &cfg, trial);
        TtkStatus::Ok
    })
}

/// Importance weight exp(rollout_lp - train_lp) with the shared log clamp.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ttk_importance_weight(
    rollout_lp: f64,
    train_lp: f64,
    out: *mut f64,
) -> TtkStatus {
    guarded(|| {
        if out.is_null() {
            return fail(TtkStatus::NullPointer, "out must not be null");
        }
        if !rollout_lp.is_finite() || !train_lp.is_finite() {
            return fail(TtkStatus::InvalidArgument, "log-probabilities must be finite");
        }
        *out = ttkit::mcla::importance_weight(rollout_lp, train_lp);
        TtkStatus::Ok
    })
}
