//! C interface to trained rating models.
//!
//! Every function returns a [`QrateStatus`]. On failure a message is kept per
//! thread and can be read with [`qrate_last_error`]. Questions are passed as
//! one JSON object in the dataset layout (`id`, `stem`, `answer`,
//! `distractors`, `explanation`). Handles are not thread-safe to free while in
//! use, but a loaded model may be shared by readers on several threads.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use qrate::checkpoint::Checkpoint;
use qrate::dataset::McqRecord;
use qrate::embeddings::GloveTable;
use qrate::features::{FeatureExtractor, EDF_LEN};
use qrate::models::{ModelInput, RatingModel};
use qrate::training::{build_examples, evaluate};
use qrate::Error;

/// Status codes; the values match the command-line exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QrateStatus {
    Ok = 0,
    Internal = 1,
    InvalidArgument = 2,
    Io = 3,
    InvalidInput = 4,
    Diverged = 5,
    Config = 6,
    NullPointer = 7,
    Panic = 8,
}

/// A loaded rating model with the word vectors it needs.
pub struct QrateModel {
    model: RatingModel,
    glove: Option<GloveTable>,
    extractor: FeatureExtractor,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> QrateStatus {
    match err {
        Error::InvalidArgument(_) => QrateStatus::InvalidArgument,
        Error::Io { .. } => QrateStatus::Io,
        Error::Parse { .. }
        | Error::Validation(_)
        | Error::EmptyDataset(_)
        | Error::Checkpoint(_)
        | Error::Json(_)
        | Error::Csv(_) => QrateStatus::InvalidInput,
        Error::Diverged { .. } => QrateStatus::Diverged,
        Error::Config(_) => QrateStatus::Config,
        _ => QrateStatus::Internal,
    }
}

struct Failure(QrateStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> QrateStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => QrateStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            QrateStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(QrateStatus::NullPointer, format!("{what} is null"))
}

unsafe fn string<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(QrateStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

fn parse_question(json: &str) -> Result<McqRecord, Failure> {
    let record: McqRecord = serde_json::from_str(json).map_err(Error::from)?;
    record.validate()?;
    Ok(record)
}

impl QrateModel {
    fn input(&self, record: &McqRecord) -> Result<ModelInput, Failure> {
        let glove = if self.model.kind().uses_embeddings() { self.glove.as_ref() } else { None };
        let mut ex = build_examples(std::slice::from_ref(record), &self.extractor, glove, self.model.config().d_em)?;
        Ok(ex.remove(0).input)
    }
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn qrate_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn qrate_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a rating-model checkpoint. `glove_path` may be null for models that
/// do not use word vectors. On success `*out` owns a handle to release with
/// [`qrate_model_free`].
///
/// # Safety
/// Pointers must be null or valid NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qrate_model_load(
    checkpoint_path: *const c_char,
    glove_path: *const c_char,
    out: *mut *mut QrateModel,
) -> QrateStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let ckpt = Checkpoint::load(Path::new(string(checkpoint_path, "checkpoint_path")?))?;
        let model = ckpt.to_model()?;
        let glove = if glove_path.is_null() {
            None
        } else {
            Some(GloveTable::load(Path::new(string(glove_path, "glove_path")?))?)
        };
        match (&glove, model.kind().uses_embeddings()) {
            (None, true) => {
                return Err(Failure(
                    QrateStatus::Config,
                    format!("{} needs word vectors", model.kind()),
                ))
            }
            (Some(g), true) if g.dim() != model.config().d_em => {
                return Err(Failure(
                    QrateStatus::Config,
                    format!("model expects {}-wide embeddings, word vectors have {}", model.config().d_em, g.dim()),
                ))
            }
            _ => {}
        }
        let handle = QrateModel {
            model,
            glove,
            extractor: FeatureExtractor::default(),
        };
        *out = Box::into_raw(Box::new(handle));
        Ok(())
    })
}

/// Release a handle from [`qrate_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must be null or a live handle not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn qrate_model_free(model: *mut QrateModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Width of the model's prediction-head input.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn qrate_model_input_width(model: *const QrateModel, out: *mut usize) -> QrateStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.model.config().input_width();
        Ok(())
    })
}

/// Predicted rating of one question given as JSON.
///
/// # Safety
/// `model` must be a live handle, `question_json` a NUL-terminated string and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn qrate_model_predict(
    model: *const QrateModel,
    question_json: *const c_char,
    out: *mut f64,
) -> QrateStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let record = parse_question(string(question_json, "question_json")?)?;
        *out = m.model.predict(&m.input(&record)?)?;
        Ok(())
    })
}

/// Row-major 7×7 component attention (rows and columns: stem, answer, D1–D4,
/// explanation) into `out[0..49]`. Fails with `QRATE_STATUS_CONFIG` for
/// models without it.
///
/// # Safety
/// As for [`qrate_model_predict`]; `out` must hold 49 doubles.
#[no_mangle]
pub unsafe extern "C" fn qrate_model_attention(
    model: *const QrateModel,
    question_json: *const c_char,
    out: *mut f64,
) -> QrateStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let record = parse_question(string(question_json, "question_json")?)?;
        let co = m
            .model
            .attention(&m.input(&record)?)?
            .ok_or_else(|| Failure(QrateStatus::Config, format!("{} has no component attention", m.model.kind())))?;
        ptr::copy_nonoverlapping(co.data().as_ptr(), out, 49);
        Ok(())
    })
}

/// The 18 explicit features of a question, unnormalised, into `out[0..18]`.
///
/// # Safety
/// `question_json` must be a NUL-terminated string and `out` hold 18 doubles.
#[no_mangle]
pub unsafe extern "C" fn qrate_extract_features(question_json: *const c_char, out: *mut f64) -> QrateStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let record = parse_question(string(question_json, "question_json")?)?;
        let edf = FeatureExtractor::default().extract(&record)?.to_array();
        ptr::copy_nonoverlapping(edf.as_ptr(), out, EDF_LEN);
        Ok(())
    })
}

/// Mean squared error and the share of predictions within 0.25 of the label.
///
/// # Safety
/// `predictions` and `labels` must hold `n` doubles; `mse` and `acc` writable.
#[no_mangle]
pub unsafe extern "C" fn qrate_evaluate(
    predictions: *const f64,
    labels: *const f64,
    n: usize,
    mse: *mut f64,
    acc: *mut f64,
) -> QrateStatus {
    guard(|| {
        if predictions.is_null() || labels.is_null() {
            return Err(null("predictions or labels"));
        }
        let (mse, acc) = (mse.as_mut().ok_or_else(|| null("mse"))?, acc.as_mut().ok_or_else(|| null("acc"))?);
        let m = evaluate(
            std::slice::from_raw_parts(predictions, n),
            std::slice::from_raw_parts(labels, n),
        )?;
        *mse = m.mse;
        *acc = m.acc;
        Ok(())
    })
}
