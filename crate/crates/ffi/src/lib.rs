//! C ABI over `advsyn`: phantom and on-disk datasets, GAN image generation,
//! classifier prediction and the evaluation arithmetic.
//!
//! Every fallible function returns an [`AdvsynStatus`]; on failure the message
//! is available from [`advsyn_last_error`] on the same thread. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use advsyn::checkpoint::{restore_classifier, restore_gan, Checkpoint};
use advsyn::classifier::predict;
use advsyn::data::io::load_dataset;
use advsyn::data::{make_phantom_dataset, ImageDataset, PhantomSpec};
use advsyn::dcgan::{generate_images, GanModel};
use advsyn::eval::{classification_report, histogram_divergence, ConfusionMatrix};
use advsyn::nn::Network;
use advsyn::rng::stream;
use advsyn::{Error, Rng};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdvsynStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Io = 5,
    Format = 6,
    Checksum = 7,
    Divergence = 8,
    Shape = 9,
    Internal = 10,
}

impl From<&Error> for AdvsynStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape(_) => AdvsynStatus::Shape,
            Error::InvalidArgument(_) => AdvsynStatus::InvalidArgument,
            Error::Config(_) => AdvsynStatus::Config,
            Error::Data(_) => AdvsynStatus::Data,
            Error::Io { .. } => AdvsynStatus::Io,
            Error::Format { .. } => AdvsynStatus::Format,
            Error::Checksum { .. } => AdvsynStatus::Checksum,
            Error::Divergence { .. } => AdvsynStatus::Divergence,
            Error::Graph(_) => AdvsynStatus::Internal,
        }
    }
}

/// Images with labels, each `size x size` in `[-1, 1]`.
pub struct AdvsynDataset(ImageDataset);

/// A GAN generator restored from a checkpoint.
pub struct AdvsynGenerator(GanModel);

/// A trained classifier restored from a checkpoint.
pub struct AdvsynClassifier(Network);

/// Per-class and aggregate metrics. Undefined ratios are 0 and flagged.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AdvsynReport {
    pub precision_negative: f64,
    pub recall_negative: f64,
    pub f1_negative: f64,
    pub support_negative: u64,
    pub precision_positive: f64,
    pub recall_positive: f64,
    pub f1_positive: f64,
    pub support_positive: u64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub total: u64,
    /// Non-zero when any reported ratio had a zero denominator.
    pub any_undefined: u8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), (AdvsynStatus, String)>) -> AdvsynStatus {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AdvsynStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            AdvsynStatus::Internal
        }
    }
}

fn fail(e: Error) -> (AdvsynStatus, String) {
    (AdvsynStatus::from(&e), e.to_string())
}

fn null(what: &str) -> (AdvsynStatus, String) {
    (AdvsynStatus::NullPointer, format!("{what} is NULL"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, (AdvsynStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    // SAFETY: caller passes a NUL-terminated string.
    let s = unsafe { CStr::from_ptr(p) }.to_str().map_err(|_| {
        (
            AdvsynStatus::InvalidArgument,
            "path is not valid UTF-8".to_string(),
        )
    })?;
    Ok(PathBuf::from(s))
}

fn boxed<T>(out: *mut *mut T, value: T) {
    // SAFETY: callers check `out` for NULL before building `value`.
    unsafe { *out = Box::into_raw(Box::new(value)) };
}

/// Message for the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next call into this library.
#[no_mangle]
pub extern "C" fn advsyn_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn advsyn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Draws `n_pos` tumor then `n_neg` clean phantom images.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn advsyn_dataset_phantom(
    size: usize,
    n_pos: usize,
    n_neg: usize,
    seed: u64,
    out: *mut *mut AdvsynDataset,
) -> AdvsynStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let spec = PhantomSpec {
            image_size: size,
            seed,
            ..PhantomSpec::default()
        };
        let ds = make_phantom_dataset(&spec, n_pos, n_neg).map_err(fail)?;
        boxed(out, AdvsynDataset(ds));
        Ok(())
    })
}

/// Loads a dataset directory (`yes/`, `no/`, optional `manifest.csv`),
/// resized to `size x size`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn advsyn_dataset_load(
    path: *const c_char,
    size: usize,
    out: *mut *mut AdvsynDataset,
) -> AdvsynStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: forwarded caller contract.
        let path = unsafe { path_arg(path) }?;
        let ds = load_dataset(&path, size).map_err(fail)?;
        boxed(out, AdvsynDataset(ds));
        Ok(())
    })
}

/// Number of images, or 0 for NULL.
///
/// # Safety
/// `ds` must be NULL or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn advsyn_dataset_len(ds: *const AdvsynDataset) -> usize {
    // SAFETY: caller contract.
    unsafe { ds.as_ref() }.map_or(0, |d| d.0.len())
}

/// Side length of the (square) images, or 0 for NULL or empty datasets.
///
/// # Safety
/// `ds` must be NULL or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn advsyn_dataset_image_size(ds: *const AdvsynDataset) -> usize {
    // SAFETY: caller contract.
    unsafe { ds.as_ref() }
        .and_then(|d| d.0.image_size())
        .map_or(0, |(h, _)| h)
}

/// Copies image `index` (row-major, `size * size` values) and its label.
///
/// # Safety
/// `ds` must be a live handle; `pixels` must have room for `capacity`
/// doubles; `label` must be writable or NULL.
#[no_mangle]
pub unsafe extern "C" fn advsyn_dataset_image(
    ds: *const AdvsynDataset,
    index: usize,
    pixels: *mut f64,
    capacity: usize,
    label: *mut u8,
) -> AdvsynStatus {
    guard(|| {
        // SAFETY: caller contract.
        let ds = unsafe { ds.as_ref() }.ok_or_else(|| null("dataset"))?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        if index >= ds.0.len() {
            return Err((
                AdvsynStatus::InvalidArgument,
                format!("index {index} out of range for {} images", ds.0.len()),
            ));
        }
        let img = ds.0.image(index).data();
        if capacity < img.len() {
            return Err((
                AdvsynStatus::InvalidArgument,
                format!("buffer holds {capacity} values, image has {}", img.len()),
            ));
        }
        // SAFETY: `pixels` has room for `capacity >= img.len()` values.
        unsafe { ptr::copy_nonoverlapping(img.as_ptr(), pixels, img.len()) };
        if !label.is_null() {
            // SAFETY: non-NULL label is writable per contract.
            unsafe { *label = ds.0.labels()[index] };
        }
        Ok(())
    })
}

/// # Safety
/// `ds` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn advsyn_dataset_free(ds: *mut AdvsynDataset) {
    if !ds.is_null() {
        // SAFETY: handle came from Box::into_raw and is freed once.
        drop(unsafe { Box::from_raw(ds) });
    }
}

/// Restores the generator from a GAN checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn advsyn_generator_load(
    path: *const c_char,
    out: *mut *mut AdvsynGenerator,
) -> AdvsynStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: forwarded caller contract.
        let path = unsafe { path_arg(path) }?;
        let ck = Checkpoint::load(&path).map_err(fail)?;
        let trainer = restore_gan(&ck).map_err(fail)?;
        boxed(out, AdvsynGenerator(trainer.model));
        Ok(())
    })
}

/// Generates `n` synthetic positives from `seed`.
///
/// # Safety
/// `generator` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn advsyn_generator_generate(
    generator: *const AdvsynGenerator,
    n: usize,
    seed: u64,
    out: *mut *mut AdvsynDataset,
) -> AdvsynStatus {
    guard(|| {
        // SAFETY: caller contract.
        let g = unsafe { generator.as_ref() }.ok_or_else(|| null("generator"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let ds = generate_images(&g.0, n, &mut Rng::new(seed, stream::GENERATE)).map_err(fail)?;
        boxed(out, AdvsynDataset(ds));
        Ok(())
    })
}

/// # Safety
/// `generator` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn advsyn_generator_free(generator: *mut AdvsynGenerator) {
    if !generator.is_null() {
        // SAFETY: handle came from Box::into_raw and is freed once.
        drop(unsafe { Box::from_raw(generator) });
    }
}

/// Restores a classifier checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn advsyn_classifier_load(
    path: *const c_char,
    out: *mut *mut AdvsynClassifier,
) -> AdvsynStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: forwarded caller contract.
        let path = unsafe { path_arg(path) }?;
        let ck = Checkpoint::load(&path).map_err(fail)?;
        let (net, _) = restore_classifier(&ck).map_err(fail)?;
        boxed(out, AdvsynClassifier(net));
        Ok(())
    })
}

/// Tumor probability and 0/1 label (probability >= 0.5) for every image.
///
/// # Safety
/// Handles must be live; `probabilities` and `labels` must each hold
/// `capacity` elements; either may be NULL to skip it.
#[no_mangle]
pub unsafe extern "C" fn advsyn_classifier_predict(
    classifier: *const AdvsynClassifier,
    ds: *const AdvsynDataset,
    probabilities: *mut f64,
    labels: *mut u8,
    capacity: usize,
) -> AdvsynStatus {
    guard(|| {
        // SAFETY: caller contract.
        let clf = unsafe { classifier.as_ref() }.ok_or_else(|| null("classifier"))?;
        // SAFETY: caller contract.
        let ds = unsafe { ds.as_ref() }.ok_or_else(|| null("dataset"))?;
        if capacity < ds.0.len() {
            return Err((
                AdvsynStatus::InvalidArgument,
                format!(
                    "buffers hold {capacity} entries, dataset has {}",
                    ds.0.len()
                ),
            ));
        }
        let (p, l) = predict(&clf.0, ds.0.images()).map_err(fail)?;
        if !probabilities.is_null() {
            // SAFETY: room for capacity >= len values.
            unsafe { ptr::copy_nonoverlapping(p.as_ptr(), probabilities, p.len()) };
        }
        if !labels.is_null() {
            // SAFETY: room for capacity >= len values.
            unsafe { ptr::copy_nonoverlapping(l.as_ptr(), labels, l.len()) };
        }
        Ok(())
    })
}

/// # Safety
/// `classifier` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn advsyn_classifier_free(classifier: *mut AdvsynClassifier) {
    if !classifier.is_null() {
        // SAFETY: handle came from Box::into_raw and is freed once.
        drop(unsafe { Box::from_raw(classifier) });
    }
}

/// Metrics for a binary confusion matrix.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn advsyn_classification_report(
    tn: u64,
    fp: u64,
    fn_: u64,
    tp: u64,
    out: *mut AdvsynReport,
) -> AdvsynStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let r = classification_report(&ConfusionMatrix::new(tn, fp, fn_, tp)).map_err(fail)?;
        let undefined = [r.negative, r.positive]
            .iter()
            .any(|m| m.precision.undefined || m.recall.undefined || m.f1.undefined);
        let report = AdvsynReport {
            precision_negative: r.negative.precision.value,
            recall_negative: r.negative.recall.value,
            f1_negative: r.negative.f1.value,
            support_negative: r.negative.support,
            precision_positive: r.positive.precision.value,
            recall_positive: r.positive.recall.value,
            f1_positive: r.positive.f1.value,
            support_positive: r.positive.support,
            accuracy: r.accuracy,
            macro_f1: r.macro_avg.f1,
            weighted_f1: r.weighted_avg.f1,
            total: r.total,
            any_undefined: u8::from(undefined),
        };
        // SAFETY: checked non-NULL above.
        unsafe { *out = report };
        Ok(())
    })
}

/// Jensen-Shannon divergence (nats) of two histograms of `bins` masses.
///
/// # Safety
/// `h1` and `h2` must each point to `bins` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn advsyn_histogram_divergence(
    h1: *const f64,
    h2: *const f64,
    bins: usize,
    out: *mut f64,
) -> AdvsynStatus {
    guard(|| {
        if h1.is_null() || h2.is_null() || out.is_null() {
            return Err(null("histogram or output"));
        }
        // SAFETY: both point to `bins` doubles per contract.
        let (a, b) = unsafe {
            (
                std::slice::from_raw_parts(h1, bins),
                std::slice::from_raw_parts(h2, bins),
            )
        };
        let js = histogram_divergence(a, b).map_err(fail)?;
        // SAFETY: checked non-NULL above.
        unsafe { *out = js };
        Ok(())
    })
}
