//! C ABI over the opg-fpad toolkit.
//!
//! Every fallible function returns an [`OpgStatus`]; on failure the message
//! is available from [`opg_last_error_message`] on the same thread. Objects
//! are handed out as opaque pointers and released with their `_free`
//! function. Optional floating-point results are NaN when absent.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use opg_fpad::evaluation::{accuracy_from_ace, ace, fuse_scores, EvalReport};
use opg_fpad::ingest::{load_image, make_synthetic_fixture};
use opg_fpad::opg::generate_patches;
use opg_fpad::protocols::{run_cross_sensor, run_intra_sensor, score_image, RunOptions, TrainedSections};
use opg_fpad::{DatasetManifest, Error, RunConfig};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpgStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidString = 2,
    Io = 3,
    Decode = 4,
    Config = 5,
    Protocol = 6,
    Parse = 7,
    Checkpoint = 8,
    NoMinutiae = 9,
    Numeric = 10,
    BufferTooSmall = 11,
    OutOfRange = 12,
    Internal = 13,
}

impl From<&Error> for OpgStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } | Error::MissingRoot(_) => OpgStatus::Io,
            Error::Decode { .. } => OpgStatus::Decode,
            Error::Config(_) | Error::Unsupported(_) => OpgStatus::Config,
            Error::Protocol(_) | Error::SectionRouting { .. } => OpgStatus::Protocol,
            Error::Parse { .. } | Error::Json { .. } => OpgStatus::Parse,
            Error::Checkpoint { .. } | Error::Incompatible { .. } => OpgStatus::Checkpoint,
            Error::BlankImage | Error::NoMinutiae(_) | Error::DegenerateBbox(_) => OpgStatus::NoMinutiae,
            Error::NonFinite(_) | Error::Shape { .. } => OpgStatus::Numeric,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

struct Failure(OpgStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(OpgStatus::from(&e), e.to_string())
    }
}

type FfiResult<T> = std::result::Result<T, Failure>;

/// Run `f`, turning errors and panics into a status plus a message.
fn guard(f: impl FnOnce() -> FfiResult<()>) -> OpgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            OpgStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            OpgStatus::Internal
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(OpgStatus::NullArgument, format!("{what} is null"))
}

unsafe fn text<'a>(ptr: *const c_char, what: &str) -> FfiResult<&'a str> {
    if ptr.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Failure(OpgStatus::InvalidString, format!("{what} is not valid UTF-8")))
}

unsafe fn path(ptr: *const c_char, what: &str) -> FfiResult<PathBuf> {
    text(ptr, what).map(PathBuf::from)
}

unsafe fn borrow<'a, T>(ptr: *const T, what: &str) -> FfiResult<&'a T> {
    ptr.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut T, value: T, what: &str) -> FfiResult<()> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn put_box<T>(out: *mut *mut T, value: T) -> FfiResult<()> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    out.write(Box::into_raw(Box::new(value)));
    Ok(())
}

unsafe fn release<T>(ptr: *mut T) {
    if !ptr.is_null() {
        drop(Box::from_raw(ptr));
    }
}

/// Run configuration.
pub struct OpgConfig(RunConfig);

/// Dataset manifest.
pub struct OpgManifest(DatasetManifest);

/// Nine trained section classifiers for one sensor.
pub struct OpgModel {
    sections: TrainedSections,
    config: RunConfig,
}

/// Nine section patch generators.
pub struct OpgGenerator(opg_fpad::opg::OpgBundle);

/// Evaluation report of one protocol run.
pub struct OpgReport(EvalReport);

/// Summary metrics in percent; NaN marks an absent rate.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct OpgMetrics {
    pub apcer: f64,
    pub bpcer: f64,
    pub ace: f64,
    pub accuracy: f64,
    pub apcer_known: f64,
    pub apcer_unknown: f64,
    pub n_live: usize,
    pub n_spoof: usize,
    pub n_no_minutiae: usize,
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn opg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn opg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Default configuration.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn opg_config_default(out: *mut *mut OpgConfig) -> OpgStatus {
    guard(|| put_box(out, OpgConfig(RunConfig::default())))
}

/// Configuration from a JSON file; missing keys keep their defaults.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn opg_config_load(path_: *const c_char, out: *mut *mut OpgConfig) -> OpgStatus {
    guard(|| {
        let cfg = RunConfig::load(&path(path_, "path")?)?;
        put_box(out, OpgConfig(cfg))
    })
}

/// Configuration from a JSON string; missing keys keep their defaults.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn opg_config_from_json(json: *const c_char, out: *mut *mut OpgConfig) -> OpgStatus {
    guard(|| {
        let cfg: RunConfig = serde_json::from_str(text(json, "json")?)
            .map_err(|e| Failure(OpgStatus::Parse, format!("configuration: {e}")))?;
        cfg.validate()?;
        put_box(out, OpgConfig(cfg))
    })
}

/// # Safety
/// `cfg` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn opg_config_free(cfg: *mut OpgConfig) {
    release(cfg)
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn opg_manifest_load(path_: *const c_char, out: *mut *mut OpgManifest) -> OpgStatus {
    guard(|| {
        let m = DatasetManifest::load(&path(path_, "path")?)?;
        put_box(out, OpgManifest(m))
    })
}

/// Write a synthetic multi-sensor dataset under `out_dir` and return its
/// manifest.
///
/// # Safety
/// `out_dir` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn opg_fixture_create(
    seed: u64,
    sensors: usize,
    per_class: usize,
    out_dir: *const c_char,
    out: *mut *mut OpgManifest,
) -> OpgStatus {
    guard(|| {
        let m = make_synthetic_fixture(seed, sensors, per_class, &path(out_dir, "out_dir")?)?;
        put_box(out, OpgManifest(m))
    })
}

/// # Safety
/// `m` must be a live manifest handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn opg_manifest_sensor_count(m: *const OpgManifest, out: *mut usize) -> OpgStatus {
    guard(|| put(out, borrow(m, "manifest")?.0.sensors.len(), "out"))
}

/// Copy sensor `index`'s name into `buf` as a NUL-terminated string.
/// `required` receives the buffer size needed, terminator included.
///
/// # Safety
/// `m` must be a live manifest handle; `buf` must hold `capacity` bytes
/// (it may be null when `capacity` is 0); `required` may be null.
#[no_mangle]
pub unsafe extern "C" fn opg_manifest_sensor_name(
    m: *const OpgManifest,
    index: usize,
    buf: *mut c_char,
    capacity: usize,
    required: *mut usize,
) -> OpgStatus {
    guard(|| {
        let m = borrow(m, "manifest")?;
        let name = m.0.sensors.get(index).ok_or_else(|| {
            Failure(
                OpgStatus::OutOfRange,
                format!("sensor index {index} outside 0..{}", m.0.sensors.len()),
            )
        })?;
        let bytes = name.as_bytes();
        if !required.is_null() {
            required.write(bytes.len() + 1);
        }
        if capacity < bytes.len() + 1 || buf.is_null() {
            return Err(Failure(
                OpgStatus::BufferTooSmall,
                format!("sensor name needs {} bytes", bytes.len() + 1),
            ));
        }
        std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), bytes.len());
        buf.add(bytes.len()).write(0);
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn opg_manifest_free(m: *mut OpgManifest) {
    release(m)
}

fn options(out_dir: Option<PathBuf>) -> RunOptions {
    RunOptions {
        out: out_dir,
        ..Default::default()
    }
}

unsafe fn optional_path(ptr: *const c_char, what: &str) -> FfiResult<Option<PathBuf>> {
    if ptr.is_null() {
        Ok(None)
    } else {
        path(ptr, what).map(Some)
    }
}

/// Train and test on one sensor. When `out_dir` is not null, models and
/// reports are written under it.
///
/// # Safety
/// Handles must be live, `sensor` NUL-terminated, `out_dir` null or
/// NUL-terminated, and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn opg_run_intra_sensor(
    m: *const OpgManifest,
    sensor: *const c_char,
    cfg: *const OpgConfig,
    use_opg: bool,
    out_dir: *const c_char,
    out: *mut *mut OpgReport,
) -> OpgStatus {
    guard(|| {
        let (m, cfg) = (borrow(m, "manifest")?, borrow(cfg, "config")?);
        let opts = options(optional_path(out_dir, "out_dir")?);
        let run = run_intra_sensor(&m.0, text(sensor, "sensor")?, &cfg.0, use_opg, &opts)?;
        put_box(out, OpgReport(run.report))
    })
}

/// Train on one sensor and test on another.
///
/// # Safety
/// As for [`opg_run_intra_sensor`].
#[no_mangle]
pub unsafe extern "C" fn opg_run_cross_sensor(
    m: *const OpgManifest,
    train_sensor: *const c_char,
    test_sensor: *const c_char,
    cfg: *const OpgConfig,
    use_opg: bool,
    out_dir: *const c_char,
    out: *mut *mut OpgReport,
) -> OpgStatus {
    guard(|| {
        let (m, cfg) = (borrow(m, "manifest")?, borrow(cfg, "config")?);
        let opts = options(optional_path(out_dir, "out_dir")?);
        let run = run_cross_sensor(
            &m.0,
            text(train_sensor, "train_sensor")?,
            text(test_sensor, "test_sensor")?,
            &cfg.0,
            use_opg,
            &opts,
        )?;
        put_box(out, OpgReport(run.report))
    })
}

/// # Safety
/// `r` must be a live report handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn opg_report_metrics(r: *const OpgReport, out: *mut OpgMetrics) -> OpgStatus {
    guard(|| {
        let r = &borrow(r, "report")?.0;
        let m = &r.metrics;
        let nan = |v: Option<f64>| v.unwrap_or(f64::NAN);
        let metrics = OpgMetrics {
            apcer: nan(m.apcer),
            bpcer: nan(m.bpcer),
            ace: nan(m.ace),
            accuracy: nan(m.accuracy),
            apcer_known: nan(m.apcer_known),
            apcer_unknown: nan(m.apcer_unknown),
            n_live: m.n_live,
            n_spoof: m.n_spoof,
            n_no_minutiae: r.n_no_minutiae,
        };
        put(out, metrics, "out")
    })
}

/// Number of scored test samples in the report.
///
/// # Safety
/// `r` must be a live report handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn opg_report_sample_count(r: *const OpgReport, out: *mut usize) -> OpgStatus {
    guard(|| put(out, borrow(r, "report")?.0.per_sample_scores.len(), "out"))
}

/// Score and ground truth of sample `index`: `score` is NaN when the image
/// had no usable minutiae; `is_live` is the true label.
///
/// # Safety
/// `r` must be a live report handle; `score` and `is_live` writable.
#[no_mangle]
pub unsafe extern "C" fn opg_report_sample(
    r: *const OpgReport,
    index: usize,
    score: *mut f64,
    is_live: *mut bool,
) -> OpgStatus {
    guard(|| {
        let samples = &borrow(r, "report")?.0.per_sample_scores;
        let s = samples.get(index).ok_or_else(|| {
            Failure(
                OpgStatus::OutOfRange,
                format!("sample index {index} outside 0..{}", samples.len()),
            )
        })?;
        put(score, s.score.unwrap_or(f64::NAN), "score")?;
        put(is_live, s.label == opg_fpad::Label::Live, "is_live")
    })
}

/// # Safety
/// `r` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn opg_report_free(r: *mut OpgReport) {
    release(r)
}

/// Load the section classifiers a run saved for `sensor` under `dir`.
///
/// # Safety
/// `dir` and `sensor` must be NUL-terminated, `cfg` live, `out` a valid
/// handle slot.
#[no_mangle]
pub unsafe extern "C" fn opg_model_load(
    dir: *const c_char,
    sensor: *const c_char,
    cfg: *const OpgConfig,
    out: *mut *mut OpgModel,
) -> OpgStatus {
    guard(|| {
        let cfg = borrow(cfg, "config")?.0.clone();
        let sections = TrainedSections::load(&path(dir, "dir")?, text(sensor, "sensor")?, &cfg)?;
        put_box(out, OpgModel { sections, config: cfg })
    })
}

/// Fused liveness score of an image file. `score` is NaN when no patch
/// reached a trained section; such an image counts as spoof.
///
/// # Safety
/// `model` must be live, `image_path` NUL-terminated, `score` writable.
#[no_mangle]
pub unsafe extern "C" fn opg_model_score_image(
    model: *const OpgModel,
    image_path: *const c_char,
    score: *mut f64,
) -> OpgStatus {
    guard(|| {
        let model = borrow(model, "model")?;
        let image = load_image(Path::new(text(image_path, "image_path")?))?;
        let s = score_image(&model.sections, &image, &model.config)?;
        put(score, s.unwrap_or(f64::NAN), "score")
    })
}

/// Decision threshold the model was trained with.
///
/// # Safety
/// `model` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn opg_model_threshold(model: *const OpgModel, out: *mut f64) -> OpgStatus {
    guard(|| put(out, borrow(model, "model")?.config.score_threshold, "out"))
}

/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn opg_model_free(model: *mut OpgModel) {
    release(model)
}

/// Load a generator bundle directory.
///
/// # Safety
/// `dir` must be NUL-terminated and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn opg_generator_load(dir: *const c_char, out: *mut *mut OpgGenerator) -> OpgStatus {
    guard(|| {
        let bundle = opg_fpad::opg::OpgBundle::load(&path(dir, "dir")?, None)?;
        put_box(out, OpgGenerator(bundle))
    })
}

/// Side length of the square patches the bundle generates.
///
/// # Safety
/// `g` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn opg_generator_patch_size(g: *const OpgGenerator, out: *mut usize) -> OpgStatus {
    guard(|| put(out, borrow(g, "generator")?.0.config().patch_size, "out"))
}

/// Draw `count` patches of `section`, row-major in `[-1, 1]`, into
/// `values`, which must hold `count * patch_size * patch_size` floats.
///
/// # Safety
/// `g` must be live and `values` must point to `capacity` writable floats.
#[no_mangle]
pub unsafe extern "C" fn opg_generator_sample(
    g: *const OpgGenerator,
    section: usize,
    count: usize,
    seed: u64,
    values: *mut f32,
    capacity: usize,
) -> OpgStatus {
    guard(|| {
        let g = borrow(g, "generator")?;
        let p = g.0.config().patch_size;
        let needed = count * p * p;
        if capacity < needed {
            return Err(Failure(
                OpgStatus::BufferTooSmall,
                format!("{count} patches need {needed} floats, got {capacity}"),
            ));
        }
        if needed > 0 && values.is_null() {
            return Err(null("values"));
        }
        let patches = generate_patches(&g.0, section, count, seed)?;
        for (i, patch) in patches.iter().enumerate() {
            std::ptr::copy_nonoverlapping(patch.values().as_ptr(), values.add(i * p * p), p * p);
        }
        Ok(())
    })
}

/// # Safety
/// `g` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn opg_generator_free(g: *mut OpgGenerator) {
    release(g)
}

/// Mean of `len` patch scores.
///
/// # Safety
/// `scores` must point to `len` readable doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn opg_fuse_scores(scores: *const f64, len: usize, out: *mut f64) -> OpgStatus {
    guard(|| {
        if scores.is_null() && len > 0 {
            return Err(null("scores"));
        }
        let slice = if len == 0 { &[][..] } else { std::slice::from_raw_parts(scores, len) };
        put(out, fuse_scores(slice)?, "out")
    })
}

/// `(apcer + bpcer) / 2`.
#[no_mangle]
pub extern "C" fn opg_ace(apcer: f64, bpcer: f64) -> f64 {
    ace(apcer, bpcer)
}

/// `100 - ace`.
#[no_mangle]
pub extern "C" fn opg_accuracy_from_ace(ace: f64) -> f64 {
    accuracy_from_ace(ace)
}

/// True when `score` is strictly above `threshold`.
#[no_mangle]
pub extern "C" fn opg_is_live(score: f64, threshold: f64) -> bool {
    opg_fpad::evaluation::classify(score, threshold) == opg_fpad::Label::Live
}
