//! C interface to groupface.
//!
//! Objects cross the boundary as opaque pointers that the caller releases
//! with the matching `*_free`. Every fallible call returns a [`GfStatus`];
//! on failure [`gf_last_error_message`] describes the most recent error on
//! the calling thread. Strings returned through out-pointers are owned by
//! the caller and released with [`gf_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use groupface::group_margin::{group_of_age, GROUP_COUNT};
use groupface::harness::{
    evaluate, generate_synthetic_dataset, prepare, stream_rng, AgeModel, Checkpoint, Dataset, RunConfig, RunReport,
    Stream, Trainer,
};
use groupface::metrics::{aar_score, MetricsReport};
use groupface::numerics::ParamStore;
use groupface::Error;

/// Result of a call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidConfig = 3,
    InvalidArgument = 4,
    Malformed = 5,
    Io = 6,
    NonFinite = 7,
    Diverged = 8,
    BufferTooSmall = 9,
    Panic = 10,
    Internal = 11,
}

impl GfStatus {
    fn of(e: &Error) -> Self {
        match e {
            Error::Config(_) => Self::InvalidConfig,
            Error::InvalidArgument(_) | Error::Shape(_) | Error::EmptyGroup(_) | Error::UnknownParameter(_) => {
                Self::InvalidArgument
            }
            Error::Format { .. } => Self::Malformed,
            Error::Io { .. } => Self::Io,
            Error::NonFinite { .. } | Error::DegenerateAttention { .. } => Self::NonFinite,
            Error::TrainingDiverged { .. } | Error::Divergence { .. } | Error::NoConvergence { .. } => Self::Diverged,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(GfStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(GfStatus::of(&e), e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn guard(f: impl FnOnce() -> Outcome) -> GfStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GfStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("panic inside groupface");
            GfStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(GfStatus::NullPointer, format!("{what} is null"))
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn borrow_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(GfStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn put<T>(out: *mut *mut T, value: T, what: &str) -> Outcome {
    let slot = borrow_mut(out, what)?;
    *slot = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, text: String) -> Outcome {
    let slot = borrow_mut(out, "output string")?;
    let c = CString::new(text).map_err(|_| Failure(GfStatus::Internal, "string contains NUL".into()))?;
    *slot = c.into_raw();
    Ok(())
}

unsafe fn release<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Run configuration.
pub struct GfConfig(RunConfig);

/// Generated train and test splits.
pub struct GfDataset(Dataset);

/// Trained parameters together with the config that built them.
pub struct GfModel {
    checkpoint: Checkpoint,
    model: AgeModel,
    store: ParamStore,
}

/// Full training report.
pub struct GfReport(RunReport);

/// Flat evaluation summary. Empty groups have `group_mae` NaN.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct GfMetrics {
    pub mae: f64,
    pub sigma: f64,
    pub aar: f64,
    pub group_mae: [f64; GROUP_COUNT],
    pub group_counts: [usize; GROUP_COUNT],
}

impl From<&MetricsReport> for GfMetrics {
    fn from(m: &MetricsReport) -> Self {
        Self {
            mae: m.mae,
            sigma: m.sigma,
            aar: m.aar,
            group_mae: m.group_mae.map(|g| g.unwrap_or(f64::NAN)),
            group_counts: m.group_counts,
        }
    }
}

impl GfModel {
    fn new(checkpoint: Checkpoint) -> Result<Self, Failure> {
        let model = AgeModel::new(&checkpoint.config)?;
        let store = checkpoint.store()?;
        Ok(Self { checkpoint, model, store })
    }
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn gf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn gf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must be null or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn gf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// `max(0, 7 - mae) + max(0, 3 - sigma)`.
#[no_mangle]
pub extern "C" fn gf_aar_score(mae: f64, sigma: f64) -> f64 {
    aar_score(mae, sigma)
}

/// # Safety
/// `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn gf_group_of_age(age: f64, out: *mut usize) -> GfStatus {
    guard(|| {
        *borrow_mut(out, "out")? = group_of_age(age)?;
        Ok(())
    })
}

/// Default configuration. Never null.
#[no_mangle]
pub extern "C" fn gf_config_default() -> *mut GfConfig {
    Box::into_raw(Box::new(GfConfig(RunConfig::default())))
}

/// Parses and validates a JSON configuration; missing fields take defaults.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn gf_config_from_json(json: *const c_char, out: *mut *mut GfConfig) -> GfStatus {
    guard(|| {
        let text = read_str(json, "json")?;
        put(out, GfConfig(RunConfig::from_json(text)?), "out")
    })
}

/// # Safety
/// `config` must come from this library; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn gf_config_to_json(config: *const GfConfig, out: *mut *mut c_char) -> GfStatus {
    guard(|| {
        let c = borrow(config, "config")?;
        put_string(out, c.0.to_json())
    })
}

/// # Safety
/// `config` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn gf_config_set_seed(config: *mut GfConfig, seed: u64) -> GfStatus {
    guard(|| {
        borrow_mut(config, "config")?.0.seed = seed;
        Ok(())
    })
}

/// # Safety
/// `config` must be null or come from this library, and not be used after.
#[no_mangle]
pub unsafe extern "C" fn gf_config_free(config: *mut GfConfig) {
    release(config);
}

/// # Safety
/// `config` must come from this library; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn gf_dataset_generate(config: *const GfConfig, out: *mut *mut GfDataset) -> GfStatus {
    guard(|| {
        let c = &borrow(config, "config")?.0;
        c.validate()?;
        let data = generate_synthetic_dataset(&c.data, c.seed, &mut stream_rng(c.seed, Stream::Data))?;
        put(out, GfDataset(data), "out")
    })
}

/// Writes the four training-split group counts to `counts`.
///
/// # Safety
/// `dataset` must come from this library; `counts` valid for 4 writes.
#[no_mangle]
pub unsafe extern "C" fn gf_dataset_group_counts(dataset: *const GfDataset, counts: *mut usize) -> GfStatus {
    guard(|| {
        let d = &borrow(dataset, "dataset")?.0;
        if counts.is_null() {
            return Err(null("counts"));
        }
        let c = Dataset::group_counts(&d.train);
        ptr::copy_nonoverlapping(c.as_ptr(), counts, GROUP_COUNT);
        Ok(())
    })
}

/// Hex SHA-256 of the serialized dataset.
///
/// # Safety
/// `dataset` must come from this library; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn gf_dataset_digest(dataset: *const GfDataset, out: *mut *mut c_char) -> GfStatus {
    guard(|| {
        let d = &borrow(dataset, "dataset")?.0;
        put_string(out, d.digest())
    })
}

/// # Safety
/// `dataset` must be null or come from this library, and not be used after.
#[no_mangle]
pub unsafe extern "C" fn gf_dataset_free(dataset: *mut GfDataset) {
    release(dataset);
}

/// Trains on `dataset`, which must have been generated with the same data
/// settings. Either output may be null if unwanted.
///
/// # Safety
/// Inputs must come from this library; non-null outputs valid for one write.
#[no_mangle]
pub unsafe extern "C" fn gf_train(
    config: *const GfConfig,
    dataset: *const GfDataset,
    model_out: *mut *mut GfModel,
    report_out: *mut *mut GfReport,
) -> GfStatus {
    guard(|| {
        let c = &borrow(config, "config")?.0;
        let d = &borrow(dataset, "dataset")?.0;
        let outcome = Trainer::new(c.clone(), d)?.run()?;
        if !model_out.is_null() {
            put(model_out, GfModel::new(outcome.checkpoint)?, "model_out")?;
        }
        if !report_out.is_null() {
            put(report_out, GfReport(outcome.report), "report_out")?;
        }
        Ok(())
    })
}

/// # Safety
/// `json` must be a NUL-terminated string; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn gf_model_from_checkpoint(json: *const c_char, out: *mut *mut GfModel) -> GfStatus {
    guard(|| {
        let ck = Checkpoint::from_json(read_str(json, "json")?)?;
        put(out, GfModel::new(ck)?, "out")
    })
}

/// # Safety
/// `model` must come from this library; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn gf_model_to_checkpoint(model: *const GfModel, out: *mut *mut c_char) -> GfStatus {
    guard(|| {
        let m = borrow(model, "model")?;
        put_string(out, m.checkpoint.to_json())
    })
}

/// Predicted ages for the test split. With `out` null only `written` is
/// set, to the required length.
///
/// # Safety
/// Inputs must come from this library; `out` valid for `capacity` writes;
/// `written` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn gf_model_predict(
    model: *const GfModel,
    dataset: *const GfDataset,
    out: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> GfStatus {
    guard(|| {
        let m = borrow(model, "model")?;
        let d = &borrow(dataset, "dataset")?.0;
        let written = borrow_mut(written, "written")?;
        *written = d.test.len();
        if out.is_null() {
            return Ok(());
        }
        if capacity < d.test.len() {
            return Err(Failure(
                GfStatus::BufferTooSmall,
                format!("{} predictions need room, capacity is {capacity}", d.test.len()),
            ));
        }
        let test = prepare(&d.test, &m.checkpoint.config.data)?;
        let preds = m.model.predict(&m.store, &test)?;
        ptr::copy_nonoverlapping(preds.as_ptr(), out, preds.len());
        Ok(())
    })
}

/// Metrics on the test split.
///
/// # Safety
/// Inputs must come from this library; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn gf_model_evaluate(model: *const GfModel, dataset: *const GfDataset, out: *mut GfMetrics) -> GfStatus {
    guard(|| {
        let m = borrow(model, "model")?;
        let d = &borrow(dataset, "dataset")?.0;
        let slot = borrow_mut(out, "out")?;
        let test = prepare(&d.test, &m.checkpoint.config.data)?;
        *slot = GfMetrics::from(&evaluate(&m.model, &m.store, &test)?);
        Ok(())
    })
}

/// # Safety
/// `model` must be null or come from this library, and not be used after.
#[no_mangle]
pub unsafe extern "C" fn gf_model_free(model: *mut GfModel) {
    release(model);
}

/// # Safety
/// `report` must come from this library; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn gf_report_metrics(report: *const GfReport, out: *mut GfMetrics) -> GfStatus {
    guard(|| {
        let r = &borrow(report, "report")?.0;
        *borrow_mut(out, "out")? = GfMetrics::from(&r.metrics);
        Ok(())
    })
}

/// # Safety
/// `report` must come from this library; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn gf_report_to_json(report: *const GfReport, out: *mut *mut c_char) -> GfStatus {
    guard(|| {
        let r = &borrow(report, "report")?.0;
        put_string(out, r.to_json())
    })
}

/// # Safety
/// `report` must be null or come from this library, and not be used after.
#[no_mangle]
pub unsafe extern "C" fn gf_report_free(report: *mut GfReport) {
    release(report);
}
