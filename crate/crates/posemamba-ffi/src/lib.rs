//! C ABI over the `posemamba` library.
//!
//! Models are opaque `PmModel` handles created by `pm_model_load` or
//! `pm_model_init` and released with `pm_model_free`. Every fallible call
//! returns a `PmStatus`; the message of the last failure on the calling
//! thread is available through `pm_last_error_message`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use posemamba::data::SequenceRecord;
use posemamba::eval::predict_sequence;
use posemamba::metrics::{metric_mpjpe, metric_p_mpjpe};
use posemamba::model::{load_checkpoint, save_checkpoint, ModelConfig, PoseMamba};
use posemamba::numerics::{Precision, Tensor};
use posemamba::scan_orders::Skeleton;
use posemamba::PoseError;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    BufferTooSmall = 3,
    Dimension = 10,
    Parameter = 11,
    Config = 12,
    Structure = 13,
    NonFinite = 14,
    DegenerateInput = 15,
    Alignment = 16,
    Parse = 17,
    Validation = 18,
    Checkpoint = 19,
    Io = 20,
    Panic = 99,
}

impl From<&PoseError> for PmStatus {
    fn from(e: &PoseError) -> Self {
        match e {
            PoseError::Dimension(_) => PmStatus::Dimension,
            PoseError::Parameter(_) => PmStatus::Parameter,
            PoseError::Config(_) => PmStatus::Config,
            PoseError::Structure(_) => PmStatus::Structure,
            PoseError::NonFinite(_) => PmStatus::NonFinite,
            PoseError::DegenerateInput(_) => PmStatus::DegenerateInput,
            PoseError::Alignment(_) => PmStatus::Alignment,
            PoseError::Parse { .. } => PmStatus::Parse,
            PoseError::Validation { .. } => PmStatus::Validation,
            PoseError::Checkpoint(_) => PmStatus::Checkpoint,
            PoseError::Io(_) => PmStatus::Io,
        }
    }
}

/// Opaque model handle.
pub struct PmModel {
    inner: Model,
}

enum Model {
    F32(PoseMamba<f32>),
    F64(PoseMamba<f64>),
}

impl Model {
    fn config(&self) -> &ModelConfig {
        match self {
            Model::F32(m) => m.config(),
            Model::F64(m) => m.config(),
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: PmStatus, message: impl Into<String>) -> PmStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = message.into());
    status
}

fn from_error(e: PoseError) -> PmStatus {
    let status = PmStatus::from(&e);
    let mut msg = e.to_string();
    let mut source = std::error::Error::source(&e);
    while let Some(s) = source {
        msg.push_str(": ");
        msg.push_str(&s.to_string());
        source = s.source();
    }
    fail(status, msg)
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), PmStatus>) -> PmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PmStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => fail(PmStatus::Panic, "internal panic"),
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, PmStatus>;
}

impl<T> OrStatus<T> for posemamba::Result<T> {
    fn or_status(self) -> Result<T, PmStatus> {
        self.map_err(from_error)
    }
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, PmStatus> {
    if p.is_null() {
        return Err(fail(PmStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| fail(PmStatus::InvalidUtf8, "path is not valid UTF-8"))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], PmStatus> {
    if p.is_null() {
        return Err(fail(PmStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn model_arg<'a>(m: *const PmModel) -> Result<&'a PmModel, PmStatus> {
    m.as_ref()
        .ok_or_else(|| fail(PmStatus::NullPointer, "model handle is null"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length excluding the NUL.
#[no_mangle]
pub unsafe extern "C" fn pm_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a checkpoint file. `precision` is 32 or 64, or 0 for the precision
/// stored in the checkpoint.
#[no_mangle]
pub unsafe extern "C" fn pm_model_load(path: *const c_char, precision: u32, out: *mut *mut PmModel) -> PmStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(PmStatus::NullPointer, "output handle pointer is null"));
        }
        let path = path_arg(path)?;
        let stored = load_checkpoint::<f64>(path).or_status()?;
        let precision = match precision {
            0 => stored.config().precision,
            bits => Precision::from_bits(bits).or_status()?,
        };
        let inner = match precision {
            Precision::F64 => Model::F64(stored),
            Precision::F32 => Model::F32(load_checkpoint::<f32>(path).or_status()?),
        };
        *out = Box::into_raw(Box::new(PmModel { inner }));
        Ok(())
    })
}

/// Creates a freshly initialised model on the H36M skeleton from a TOML
/// model configuration (same keys as the `[model]` table of a training
/// config).
#[no_mangle]
pub unsafe extern "C" fn pm_model_init(config_toml: *const c_char, seed: u64, out: *mut *mut PmModel) -> PmStatus {
    guard(|| {
        if out.is_null() || config_toml.is_null() {
            return Err(fail(PmStatus::NullPointer, "null argument"));
        }
        let text = CStr::from_ptr(config_toml)
            .to_str()
            .map_err(|_| fail(PmStatus::InvalidUtf8, "config is not valid UTF-8"))?;
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| fail(PmStatus::Config, e.to_string()))?;
        cfg.validate().or_status()?;
        let inner = match cfg.precision {
            Precision::F32 => Model::F32(PoseMamba::init(cfg, Skeleton::h36m(), seed).or_status()?),
            Precision::F64 => Model::F64(PoseMamba::init(cfg, Skeleton::h36m(), seed).or_status()?),
        };
        *out = Box::into_raw(Box::new(PmModel { inner }));
        Ok(())
    })
}

/// Writes the model to a checkpoint file.
#[no_mangle]
pub unsafe extern "C" fn pm_model_save(model: *const PmModel, path: *const c_char) -> PmStatus {
    guard(|| {
        let m = model_arg(model)?;
        let path = path_arg(path)?;
        match &m.inner {
            Model::F32(m) => save_checkpoint(m, path),
            Model::F64(m) => save_checkpoint(m, path),
        }
        .or_status()
    })
}

/// Releases a handle. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn pm_model_free(model: *mut PmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Window length T of the model, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn pm_model_frames(model: *const PmModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config().frames)
}

/// Joint count J of the model, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn pm_model_joints(model: *const PmModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config().joints)
}

/// Trainable parameter count, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn pm_model_parameter_count(model: *const PmModel) -> usize {
    model.as_ref().map_or(0, |m| match &m.inner {
        Model::F32(m) => m.parameter_count(),
        Model::F64(m) => m.parameter_count(),
    })
}

/// Lifts `frames × joints × 2` normalised keypoints (row-major) of a
/// sequence of any length to `frames × joints × 3` millimetres written to
/// `out` (capacity `out_len`). A non-zero `flip` averages with the mirrored
/// prediction.
#[no_mangle]
pub unsafe extern "C" fn pm_model_predict(
    model: *const PmModel,
    keypoints: *const f64,
    frames: usize,
    joints: usize,
    flip: c_int,
    out: *mut f64,
    out_len: usize,
) -> PmStatus {
    guard(|| {
        let m = model_arg(model)?;
        let input = slice_arg(keypoints, frames * joints * 2, "keypoints")?;
        if out.is_null() {
            return Err(fail(PmStatus::NullPointer, "output buffer is null"));
        }
        let need = frames * joints * 3;
        if out_len < need {
            return Err(fail(
                PmStatus::BufferTooSmall,
                format!("output needs {need} values, buffer holds {out_len}"),
            ));
        }
        let record = SequenceRecord {
            id: "ffi".into(),
            action: None,
            fps: 50.0,
            keypoints_2d: Tensor::new(&[frames, joints, 2], input.to_vec()).or_status()?,
            poses_3d: None,
            confidence: None,
        };
        let pred = match &m.inner {
            Model::F32(m) => predict_sequence(m, &record, flip != 0),
            Model::F64(m) => predict_sequence(m, &record, flip != 0),
        }
        .or_status()?;
        std::slice::from_raw_parts_mut(out, need).copy_from_slice(pred.data());
        Ok(())
    })
}

unsafe fn pose_pair(
    pred: *const f64,
    gt: *const f64,
    frames: usize,
    joints: usize,
) -> Result<(Tensor<f64>, Tensor<f64>), PmStatus> {
    let n = frames * joints * 3;
    let p = Tensor::new(&[frames, joints, 3], slice_arg(pred, n, "pred")?.to_vec()).or_status()?;
    let g = Tensor::new(&[frames, joints, 3], slice_arg(gt, n, "gt")?.to_vec()).or_status()?;
    Ok((p, g))
}

/// Root-aligned mean per-joint position error of two `frames × joints × 3`
/// sequences.
#[no_mangle]
pub unsafe extern "C" fn pm_mpjpe(
    pred: *const f64,
    gt: *const f64,
    frames: usize,
    joints: usize,
    out: *mut f64,
) -> PmStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(PmStatus::NullPointer, "out is null"));
        }
        let (p, g) = pose_pair(pred, gt, frames, joints)?;
        *out = metric_mpjpe(&p, &g).or_status()?;
        Ok(())
    })
}

/// Mean per-joint error after per-frame similarity alignment. Frames with a
/// degenerate (collinear) pose are skipped and counted in `skipped`
/// (may be null).
#[no_mangle]
pub unsafe extern "C" fn pm_p_mpjpe(
    pred: *const f64,
    gt: *const f64,
    frames: usize,
    joints: usize,
    out: *mut f64,
    skipped: *mut usize,
) -> PmStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(PmStatus::NullPointer, "out is null"));
        }
        let (p, g) = pose_pair(pred, gt, frames, joints)?;
        let r = metric_p_mpjpe(&p, &g).or_status()?;
        *out = r.value;
        if !skipped.is_null() {
            *skipped = r.skipped_frames;
        }
        Ok(())
    })
}
