//! C interface to single-image refinement sessions.
//!
//! Every fallible call returns an [`IsgStatus`]; on failure the message is
//! kept per thread and read with [`isg_last_error`]. Handles are opaque and
//! must be released with their `_free` function. A session handle must not
//! be used from two threads at once.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use interseg::acquisition::AcquisitionMethod;
use interseg::checkpoint::Checkpoint;
use interseg::experiment::RefineMode;
use interseg::raster::RasterImage;
use interseg::service::{ClickInput, ErrorCode, Session, SessionConfig};
use interseg::Error;
use ndarray::Array3;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IsgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NotFound = 3,
    ShapeMismatch = 4,
    InvalidPayload = 5,
    Busy = 6,
    NotUndoable = 7,
    Unavailable = 8,
    Diverged = 9,
    Internal = 10,
    Panic = 11,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IsgRefineMode {
    AcOnly = 0,
    Disca = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IsgUncertainty {
    Entropy = 0,
    McDropout = 1,
    Odin = 2,
    Confidnet = 3,
}

/// A loaded checkpoint.
pub struct IsgModel {
    checkpoint: Checkpoint,
}

/// One image, its click history and a private copy of the weights.
pub struct IsgSession {
    session: Session,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(error: &Error) -> IsgStatus {
    match ErrorCode::of(error) {
        ErrorCode::NotFound => IsgStatus::NotFound,
        ErrorCode::InvalidArgument => IsgStatus::InvalidArgument,
        ErrorCode::ShapeMismatch => IsgStatus::ShapeMismatch,
        ErrorCode::InvalidPayload => IsgStatus::InvalidPayload,
        ErrorCode::Busy => IsgStatus::Busy,
        ErrorCode::NotUndoable => IsgStatus::NotUndoable,
        ErrorCode::Unavailable => IsgStatus::Unavailable,
        ErrorCode::Diverged => IsgStatus::Diverged,
        ErrorCode::Internal => IsgStatus::Internal,
    }
}

struct Fail(IsgStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(IsgStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> IsgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            IsgStatus::Ok
        }
        Ok(Err(Fail(status, message))) => {
            set_error(message);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            IsgStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Fail> {
    ptr.as_ref().ok_or_else(|| null(what))
}

unsafe fn deref_mut<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    ptr.as_mut().ok_or_else(|| null(what))
}

unsafe fn out_slice<'a, T>(ptr: *mut T, len: usize, needed: usize) -> Result<&'a mut [T], Fail> {
    if ptr.is_null() {
        return Err(null("output buffer"));
    }
    if len < needed {
        return Err(Fail(
            IsgStatus::InvalidArgument,
            format!("output buffer holds {len} values, {needed} needed"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, needed))
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn isg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn isg_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => panic!("version has no interior nul"),
    };
    VERSION.as_ptr()
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn isg_model_load(path: *const c_char, out: *mut *mut IsgModel) -> IsgStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(IsgStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let checkpoint = Checkpoint::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(IsgModel { checkpoint }));
        Ok(())
    })
}

/// Decodes a checkpoint from memory.
///
/// # Safety
/// `bytes` must point to `len` readable bytes and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn isg_model_from_bytes(bytes: *const u8, len: usize, out: *mut *mut IsgModel) -> IsgStatus {
    guard(|| {
        if bytes.is_null() {
            return Err(null("bytes"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let checkpoint = Checkpoint::from_bytes(std::slice::from_raw_parts(bytes, len))?;
        *out = Box::into_raw(Box::new(IsgModel { checkpoint }));
        Ok(())
    })
}

/// Image channels and class count the model expects.
///
/// # Safety
/// `model` must come from `isg_model_load` or `isg_model_from_bytes`.
#[no_mangle]
pub unsafe extern "C" fn isg_model_shape(
    model: *const IsgModel,
    image_channels: *mut usize,
    classes: *mut usize,
) -> IsgStatus {
    guard(|| {
        let m = &deref(model, "model")?.checkpoint.model;
        *deref_mut(image_channels, "image_channels")? = m.config().image_channels;
        *deref_mut(classes, "classes")? = m.classes();
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a live model handle; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn isg_model_free(model: *mut IsgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Opens a session on a channel-major `channels x height x width` image
/// with values in [0, 1]. `config_json` may be null for defaults; otherwise
/// it is a session config object without the two id fields.
///
/// # Safety
/// `pixels` must hold `channels * height * width` floats; `config_json`
/// must be null or nul-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn isg_session_new(
    model: *const IsgModel,
    pixels: *const f32,
    channels: usize,
    height: usize,
    width: usize,
    config_json: *const c_char,
    out: *mut *mut IsgSession,
) -> IsgStatus {
    guard(|| {
        let checkpoint = &deref(model, "model")?.checkpoint;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let n = channels
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| Fail(IsgStatus::InvalidArgument, "image size overflows".into()))?;
        let data = std::slice::from_raw_parts(pixels, n).to_vec();
        let array = Array3::from_shape_vec((channels, height, width), data)
            .map_err(|e| Fail(IsgStatus::ShapeMismatch, e.to_string()))?;
        let image = RasterImage::new(array)?;
        let id = checkpoint.model.param_hash();
        let mut value = if config_json.is_null() {
            serde_json::json!({})
        } else {
            let text = CStr::from_ptr(config_json)
                .to_str()
                .map_err(|_| Fail(IsgStatus::InvalidArgument, "config is not UTF-8".into()))?;
            serde_json::from_str(text).map_err(|e| Fail(IsgStatus::InvalidArgument, format!("config: {e}")))?
        };
        let obj = value
            .as_object_mut()
            .ok_or_else(|| Fail(IsgStatus::InvalidArgument, "config must be a JSON object".into()))?;
        obj.insert("checkpoint_id".into(), id.clone().into());
        obj.insert("image_id".into(), "inline".into());
        let config: SessionConfig =
            serde_json::from_value(value).map_err(|e| Fail(IsgStatus::InvalidArgument, format!("config: {e}")))?;
        let session = Session::new(id, config, Arc::new(image), checkpoint, checkpoint.model.clone())?;
        *out = Box::into_raw(Box::new(IsgSession { session }));
        Ok(())
    })
}

/// Height, width and class count of the session image and prediction.
///
/// # Safety
/// `session` must be a live session handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn isg_session_shape(
    session: *const IsgSession,
    height: *mut usize,
    width: *mut usize,
    classes: *mut usize,
) -> IsgStatus {
    guard(|| {
        let s = &deref(session, "session")?.session;
        let p = s.prediction();
        *deref_mut(height, "height")? = p.height();
        *deref_mut(width, "width")? = p.width();
        *deref_mut(classes, "classes")? = p.class_count();
        Ok(())
    })
}

/// Records a click; it takes effect at the next refine.
///
/// # Safety
/// `session` must be a live session handle.
#[no_mangle]
pub unsafe extern "C" fn isg_session_add_click(
    session: *mut IsgSession,
    row: usize,
    col: usize,
    class_id: usize,
) -> IsgStatus {
    guard(|| {
        let s = &mut deref_mut(session, "session")?.session;
        s.submit_clicks(&[ClickInput { row, col, class_id }])?;
        Ok(())
    })
}

/// Applies pending clicks, by forward pass only or by retraining first.
///
/// # Safety
/// `session` must be a live session handle.
#[no_mangle]
pub unsafe extern "C" fn isg_session_refine(session: *mut IsgSession, mode: IsgRefineMode) -> IsgStatus {
    guard(|| {
        let s = &mut deref_mut(session, "session")?.session;
        let mode = match mode {
            IsgRefineMode::AcOnly => RefineMode::AcOnly,
            IsgRefineMode::Disca => RefineMode::Disca,
        };
        s.refine(mode)?;
        Ok(())
    })
}

/// Writes the row-major argmax labels, `height * width` bytes.
///
/// # Safety
/// `labels` must hold `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn isg_session_labels(session: *const IsgSession, labels: *mut u8, len: usize) -> IsgStatus {
    guard(|| {
        let s = &deref(session, "session")?.session;
        let argmax = s.prediction().argmax();
        let out = out_slice(labels, len, argmax.len())?;
        for (o, v) in out.iter_mut().zip(argmax.iter()) {
            *o = *v;
        }
        Ok(())
    })
}

/// Writes a row-major per-pixel uncertainty map, `height * width` floats.
///
/// # Safety
/// `scores` must hold `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn isg_session_uncertainty(
    session: *const IsgSession,
    method: IsgUncertainty,
    scores: *mut f32,
    len: usize,
) -> IsgStatus {
    guard(|| {
        let s = &deref(session, "session")?.session;
        let method = match method {
            IsgUncertainty::Entropy => AcquisitionMethod::Entropy,
            IsgUncertainty::McDropout => AcquisitionMethod::McDropout,
            IsgUncertainty::Odin => AcquisitionMethod::Odin,
            IsgUncertainty::Confidnet => AcquisitionMethod::Confidnet,
        };
        let map = s.view().uncertainty(method)?;
        let out = out_slice(scores, len, map.scores.len())?;
        for (o, v) in out.iter_mut().zip(map.scores.iter()) {
            *o = *v as f32;
        }
        Ok(())
    })
}

/// Removes the last click, restoring the weights if it was retrained on.
/// `undone` is set to false when there was nothing to undo.
///
/// # Safety
/// `session` must be a live session handle; `undone` may be null.
#[no_mangle]
pub unsafe extern "C" fn isg_session_undo(session: *mut IsgSession, undone: *mut bool) -> IsgStatus {
    guard(|| {
        let s = &mut deref_mut(session, "session")?.session;
        let outcome = s.undo_last()?;
        if let Some(u) = undone.as_mut() {
            *u = outcome.undone;
        }
        Ok(())
    })
}

/// Drops every click and restores the starting weights.
///
/// # Safety
/// `session` must be a live session handle.
#[no_mangle]
pub unsafe extern "C" fn isg_session_reset(session: *mut IsgSession) -> IsgStatus {
    guard(|| {
        deref_mut(session, "session")?.session.reset()?;
        Ok(())
    })
}

/// Number of recorded clicks.
///
/// # Safety
/// `session` must be a live session handle; `count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn isg_session_click_count(session: *const IsgSession, count: *mut usize) -> IsgStatus {
    guard(|| {
        let s = &deref(session, "session")?.session;
        *deref_mut(count, "count")? = s.clicks().len();
        Ok(())
    })
}

/// # Safety
/// `session` must be null or a live session handle; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn isg_session_free(session: *mut IsgSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}
