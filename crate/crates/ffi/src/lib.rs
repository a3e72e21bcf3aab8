//! C ABI over the brainstreams pipeline and metric functions.
//!
//! Every fallible call returns a `BsStatus`. On failure a message is kept
//! per thread and can be read with `bs_last_error` until the next call.
//! Strings handed out by the library must be released with
//! `bs_string_free`, experiments with `bs_experiment_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use brainstreams::data::SynthConfig;
use brainstreams::harness::{load_config, synth, Experiment, Stream};
use brainstreams::image::Image;
use brainstreams::metrics::{
    feature_distance, pixcorr_raw, ssim_raw, two_way_identification, DistanceKind, SsimParams,
};
use brainstreams::reconstruction::GuidanceFlags;
use brainstreams::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Validation = 3,
    Io = 4,
    Runtime = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BsStream {
    High = 0,
    Mid = 1,
    Low = 2,
}

pub const BS_GUIDANCE_HIGH: u32 = 1;
pub const BS_GUIDANCE_MID: u32 = 2;
pub const BS_GUIDANCE_LOW: u32 = 4;

/// Opaque handle to a loaded experiment.
pub struct BsExperiment {
    inner: Experiment,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(BsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => BsStatus::Io,
            Error::InvalidArgument(_) | Error::DimensionMismatch { .. } => {
                BsStatus::InvalidArgument
            }
            other if other.exit_code() == 2 => BsStatus::Validation,
            _ => BsStatus::Runtime,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(BsStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> BsStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BsStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            BsStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(BsStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn out_arg<T>(p: *mut T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(null(what))
    } else {
        Ok(())
    }
}

fn image(data: &[f64], height: usize, width: usize, channels: usize) -> Result<Image, Failure> {
    Ok(Image::new(height, width, channels, data.to_vec())?)
}

fn rows(data: &[f64], n: usize, d: usize) -> Vec<Vec<f64>> {
    data.chunks_exact(d.max(1))
        .take(n)
        .map(<[f64]>::to_vec)
        .collect()
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. Valid until
/// the next library call on the same thread.
#[no_mangle]
pub extern "C" fn bs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must be NULL or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bs_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Writes a synthetic dataset with default settings to `out_dir`.
///
/// # Safety
/// `out_dir` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bs_synth(out_dir: *const c_char, seed: u64) -> BsStatus {
    guard(|| {
        let out = path_arg(out_dir, "out_dir")?;
        synth(&SynthConfig::default(), seed, &out)?;
        Ok(())
    })
}

/// Loads the TOML config at `config_path` and its dataset.
///
/// # Safety
/// `config_path` must be a valid NUL-terminated string and `out` a valid
/// pointer. On success `*out` owns a handle for `bs_experiment_free`.
#[no_mangle]
pub unsafe extern "C" fn bs_experiment_open(
    config_path: *const c_char,
    out: *mut *mut BsExperiment,
) -> BsStatus {
    guard(|| {
        out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = path_arg(config_path, "config_path")?;
        let inner = Experiment::open(load_config(&path)?)?;
        *out = Box::into_raw(Box::new(BsExperiment { inner }));
        Ok(())
    })
}

/// # Safety
/// `exp` must be NULL or a handle from `bs_experiment_open`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bs_experiment_free(exp: *mut BsExperiment) {
    if !exp.is_null() {
        drop(Box::from_raw(exp));
    }
}

/// Trains one stream, writes its checkpoint and stores the validation
/// loss in `*out_val_loss` (which may be NULL).
///
/// # Safety
/// `exp` must be a live handle; `out_val_loss` NULL or valid.
#[no_mangle]
pub unsafe extern "C" fn bs_experiment_train(
    exp: *const BsExperiment,
    stream: BsStream,
    out_val_loss: *mut f64,
) -> BsStatus {
    guard(|| {
        let exp = exp.as_ref().ok_or_else(|| null("exp"))?;
        let stream = match stream {
            BsStream::High => Stream::High,
            BsStream::Mid => Stream::Mid,
            BsStream::Low => Stream::Low,
        };
        let run = exp.inner.train(stream)?;
        if !out_val_loss.is_null() {
            *out_val_loss = run.scalars["validation_loss"];
        }
        Ok(())
    })
}

/// Reconstructs the test split with the guidance levels in `flags`, a
/// bitwise OR of `BS_GUIDANCE_*`, and writes the images to the output
/// directory. `*out_count` receives the number of reconstructions.
///
/// # Safety
/// `exp` must be a live handle; `out_count` NULL or valid.
#[no_mangle]
pub unsafe extern "C" fn bs_experiment_infer(
    exp: *const BsExperiment,
    flags: u32,
    out_count: *mut usize,
) -> BsStatus {
    guard(|| {
        let exp = exp.as_ref().ok_or_else(|| null("exp"))?;
        if flags == 0 || flags & !(BS_GUIDANCE_HIGH | BS_GUIDANCE_MID | BS_GUIDANCE_LOW) != 0 {
            return Err(Failure(
                BsStatus::InvalidArgument,
                format!("invalid guidance flags {flags:#x}"),
            ));
        }
        let flags = GuidanceFlags {
            high: flags & BS_GUIDANCE_HIGH != 0,
            mid: flags & BS_GUIDANCE_MID != 0,
            low: flags & BS_GUIDANCE_LOW != 0,
        };
        let (recons, _) = exp.inner.infer(flags)?;
        if !out_count.is_null() {
            *out_count = recons.len();
        }
        Ok(())
    })
}

/// Runs the guidance ablation and returns the rows as a JSON array in
/// `*out_json`, to be released with `bs_string_free`.
///
/// # Safety
/// `exp` must be a live handle and `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bs_experiment_ablate(
    exp: *const BsExperiment,
    out_json: *mut *mut c_char,
) -> BsStatus {
    guard(|| {
        out_arg(out_json, "out_json")?;
        *out_json = ptr::null_mut();
        let exp = exp.as_ref().ok_or_else(|| null("exp"))?;
        let rows = exp.inner.ablate()?;
        let value: Vec<_> = rows
            .iter()
            .map(|(l, r)| serde_json::json!({"guidance": l, "report": r}))
            .collect();
        let text = serde_json::Value::from(value).to_string();
        *out_json = CString::new(text)
            .map_err(|e| Failure(BsStatus::Runtime, e.to_string()))?
            .into_raw();
        Ok(())
    })
}

/// Pearson correlation of two `height × width × channels` HWC images.
///
/// # Safety
/// `recon` and `gt` must each point to `height * width * channels`
/// readable doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bs_pixcorr(
    recon: *const f64,
    gt: *const f64,
    height: usize,
    width: usize,
    channels: usize,
    out: *mut f64,
) -> BsStatus {
    guard(|| {
        out_arg(out, "out")?;
        let len = height * width * channels;
        let a = image(slice_arg(recon, len, "recon")?, height, width, channels)?;
        let b = image(slice_arg(gt, len, "gt")?, height, width, channels)?;
        *out = pixcorr_raw(&a, &b)?;
        Ok(())
    })
}

/// Mean SSIM (11-tap Gaussian window, σ 1.5, data range 1) of two images
/// at their native resolution, on grayscale.
///
/// # Safety
/// As for `bs_pixcorr`.
#[no_mangle]
pub unsafe extern "C" fn bs_ssim(
    recon: *const f64,
    gt: *const f64,
    height: usize,
    width: usize,
    channels: usize,
    out: *mut f64,
) -> BsStatus {
    guard(|| {
        out_arg(out, "out")?;
        if channels != 1 && channels != 3 {
            return Err(Failure(
                BsStatus::InvalidArgument,
                "ssim needs 1 or 3 channels".into(),
            ));
        }
        let len = height * width * channels;
        let a = image(slice_arg(recon, len, "recon")?, height, width, channels)?;
        let b = image(slice_arg(gt, len, "gt")?, height, width, channels)?;
        *out = ssim_raw(&a, &b, &SsimParams::default())?;
        Ok(())
    })
}

/// Two-way identification percentage for `n` aligned rows of width `dim`.
///
/// # Safety
/// `recon` and `gt` must each point to `n * dim` readable doubles; `out`
/// must be valid.
#[no_mangle]
pub unsafe extern "C" fn bs_two_way_identification(
    recon: *const f64,
    gt: *const f64,
    n: usize,
    dim: usize,
    out: *mut f64,
) -> BsStatus {
    guard(|| {
        out_arg(out, "out")?;
        let r = rows(slice_arg(recon, n * dim, "recon")?, n, dim);
        let g = rows(slice_arg(gt, n * dim, "gt")?, n, dim);
        *out = two_way_identification(&r, &g)?;
        Ok(())
    })
}

/// Mean correlation distance between `n` aligned rows of width `dim`.
///
/// # Safety
/// As for `bs_two_way_identification`.
#[no_mangle]
pub unsafe extern "C" fn bs_feature_distance(
    recon: *const f64,
    gt: *const f64,
    n: usize,
    dim: usize,
    out: *mut f64,
) -> BsStatus {
    guard(|| {
        out_arg(out, "out")?;
        let r = rows(slice_arg(recon, n * dim, "recon")?, n, dim);
        let g = rows(slice_arg(gt, n * dim, "gt")?, n, dim);
        *out = feature_distance(&r, &g, DistanceKind::Correlation)?;
        Ok(())
    })
}
