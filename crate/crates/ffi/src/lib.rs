//! C interface to `utal-core`.
//!
//! Every fallible call returns a [`UtalStatus`]; on failure a message is kept
//! per thread and can be read with [`utal_last_error`]. Handles are opaque and
//! must be released with their matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use utal_core::data::{load_dataset, tiou, Dataset, Subset};
use utal_core::detect::{evaluate, DetectConfig};
use utal_core::losses::{expected_l1, kl_l1_loss, ConditionMode, GaussianOffset};
use utal_core::model::{load_checkpoint, CheckpointMeta, Model};
use utal_core::numerics;
use utal_core::Error;

/// Number of tIoU thresholds reported by [`utal_evaluate`].
pub const UTAL_NUM_THRESHOLDS: usize = 5;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UtalStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    ShapeMismatch = 5,
    NonFinite = 6,
    Config = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UtalConditionMode {
    He = 0,
    Paper = 1,
}

/// Loaded checkpoint.
pub struct UtalModel {
    model: Model,
    meta: CheckpointMeta,
}

/// Loaded dataset.
pub struct UtalDataset {
    dataset: Dataset,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(err: &Error) -> UtalStatus {
    match err {
        Error::Config { .. } => UtalStatus::Config,
        Error::Io { .. } => UtalStatus::Io,
        Error::Format { .. } => UtalStatus::Format,
        Error::ShapeMismatch { .. } => UtalStatus::ShapeMismatch,
        Error::NonFinite { .. } => UtalStatus::NonFinite,
        Error::Domain(_) | Error::NoPositives { .. } | Error::Verification(_) => {
            UtalStatus::InvalidArgument
        }
    }
}

struct Failure(UtalStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(UtalStatus::NullArgument, format!("`{what}` is null"))
}

/// Runs `f`, converting errors and panics into a status.
fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> UtalStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => UtalStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            UtalStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| {
        Failure(
            UtalStatus::InvalidArgument,
            format!("`{what}` is not UTF-8"),
        )
    })?;
    Ok(PathBuf::from(s))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn utal_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn utal_erf(x: f64) -> f64 {
    numerics::erf(x)
}

/// Temporal IoU of `[s1, e1]` and `[s2, e2]`.
#[no_mangle]
pub extern "C" fn utal_tiou(s1: f64, e1: f64, s2: f64, e2: f64) -> f64 {
    tiou((s1, e1), (s2, e2))
}

/// `E|d − σε|` for ε ~ N(0, 1). Fails unless `sigma > 0`.
///
/// # Safety
/// `out` must be null or point to writable memory for one `double`.
#[no_mangle]
pub unsafe extern "C" fn utal_expected_l1(d: f64, sigma: f64, out: *mut f64) -> UtalStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = expected_l1(d, sigma)?.value;
        Ok(())
    })
}

/// KL-ℓ1 loss of a Gaussian prediction `(mu, alpha = log σ²)` at `target`,
/// with gradients w.r.t. `mu` and `alpha`. Gradient pointers may be null.
///
/// # Safety
/// Non-null pointers must be writable for one `double` each.
#[no_mangle]
pub unsafe extern "C" fn utal_kl_l1(
    mu: f64,
    alpha: f64,
    target: f64,
    mode: UtalConditionMode,
    out_loss: *mut f64,
    out_d_mu: *mut f64,
    out_d_alpha: *mut f64,
) -> UtalStatus {
    guard(|| {
        let loss_out = out_arg(out_loss, "out_loss")?;
        if !(mu.is_finite() && alpha.is_finite() && target.is_finite()) {
            return Err(Failure(UtalStatus::NonFinite, "non-finite input".into()));
        }
        let mode = match mode {
            UtalConditionMode::He => ConditionMode::He,
            UtalConditionMode::Paper => ConditionMode::Paper,
        };
        let l = kl_l1_loss(GaussianOffset::new(mu, alpha), target, mode);
        *loss_out = l.loss;
        if let Some(g) = out_d_mu.as_mut() {
            *g = l.d_mu;
        }
        if let Some(g) = out_d_alpha.as_mut() {
            *g = l.d_alpha;
        }
        Ok(())
    })
}

/// Loads a checkpoint and its `.json` sidecar.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn utal_model_load(
    path: *const c_char,
    out: *mut *mut UtalModel,
) -> UtalStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = path_arg(path, "path")?;
        let (model, meta) = load_checkpoint(&path)?;
        *out = Box::into_raw(Box::new(UtalModel { model, meta }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`utal_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn utal_model_free(model: *mut UtalModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Length of the pooled feature vector the model expects, 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn utal_model_input_dim(model: *const UtalModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.spec.input_dim())
}

/// Number of classes, 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn utal_model_num_classes(model: *const UtalModel) -> usize {
    model.as_ref().map_or(0, |m| m.meta.num_classes)
}

/// Length of the buffer written by [`utal_model_forward`]: `1 + 5·C`.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn utal_model_output_len(model: *const UtalModel) -> usize {
    model.as_ref().map_or(0, |m| 1 + 5 * m.meta.num_classes)
}

/// Forward pass on one pooled feature vector. Writes the actioness
/// probability, then `C` class logits, then per class the start and end
/// offsets (in proposal lengths) followed by their σ. σ is NaN for models
/// trained without uncertainty.
///
/// # Safety
/// `x` must hold `x_len` doubles and `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn utal_model_forward(
    model: *const UtalModel,
    x: *const f64,
    x_len: usize,
    out: *mut f64,
    out_len: usize,
) -> UtalStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if x.is_null() {
            return Err(null("x"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let dim = m.model.spec.input_dim();
        let c = m.meta.num_classes;
        if x_len != dim || out_len < 1 + 5 * c {
            return Err(Error::ShapeMismatch {
                what: "forward buffers".into(),
                expected: format!("x_len {dim}, out_len ≥ {}", 1 + 5 * c),
                found: format!("x_len {x_len}, out_len {out_len}"),
            }
            .into());
        }
        let x = std::slice::from_raw_parts(x, x_len);
        let out = std::slice::from_raw_parts_mut(out, out_len);
        let h = m.model.forward(x);
        out[0] = h.actioness;
        out[1..=c].copy_from_slice(&h.class_logits);
        for k in 0..c {
            let base = 1 + c + 4 * k;
            let (s, e) = h.offsets(k);
            let (ss, se) = h.boundaries[k]
                .sigmas()
                .map_or((f64::NAN, f64::NAN), |(a, b)| {
                    (a * h.offset_scale, b * h.offset_scale)
                });
            out[base..base + 4].copy_from_slice(&[s, e, ss, se]);
        }
        Ok(())
    })
}

/// Loads a dataset from its manifest.
///
/// # Safety
/// `manifest` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn utal_dataset_load(
    manifest: *const c_char,
    out: *mut *mut UtalDataset,
) -> UtalStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = path_arg(manifest, "manifest")?;
        let dataset = load_dataset(&path)?;
        *out = Box::into_raw(Box::new(UtalDataset { dataset }));
        Ok(())
    })
}

/// # Safety
/// `dataset` must come from [`utal_dataset_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn utal_dataset_free(dataset: *mut UtalDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Number of videos, 0 for null.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn utal_dataset_num_videos(dataset: *const UtalDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.dataset.videos.len())
}

/// Detects on the test subset with default settings and writes mAP at
/// tIoU 0.3, 0.4, 0.5, 0.6 and 0.7 as fractions.
///
/// # Safety
/// Handles must be live; `out_map` must hold `out_len ≥ 5` doubles.
#[no_mangle]
pub unsafe extern "C" fn utal_evaluate(
    model: *const UtalModel,
    dataset: *const UtalDataset,
    out_map: *mut f64,
    out_len: usize,
) -> UtalStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let d = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        if out_map.is_null() {
            return Err(null("out_map"));
        }
        if out_len < UTAL_NUM_THRESHOLDS {
            return Err(Failure(
                UtalStatus::InvalidArgument,
                format!("out_len {out_len} < {UTAL_NUM_THRESHOLDS}"),
            ));
        }
        if m.meta.num_classes != d.dataset.num_classes || m.model.spec.d_feat != d.dataset.d_feat {
            return Err(Error::ShapeMismatch {
                what: "checkpoint vs dataset".into(),
                expected: format!(
                    "d_feat {}, {} classes",
                    m.model.spec.d_feat, m.meta.num_classes
                ),
                found: format!(
                    "d_feat {}, {} classes",
                    d.dataset.d_feat, d.dataset.num_classes
                ),
            }
            .into());
        }
        let test = d.dataset.only(Subset::Test);
        let (report, _) = evaluate(&m.model, &test, &m.meta.proposals, &DetectConfig::default());
        let out = std::slice::from_raw_parts_mut(out_map, out_len);
        out[..UTAL_NUM_THRESHOLDS].copy_from_slice(&report.map_values());
        Ok(())
    })
}
