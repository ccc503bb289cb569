//! C ABI over the vista engine.
//!
//! Objects are opaque handles created by `*_new`/`*_load`/`*_compute`
//! functions and released with the matching `*_free`. Every fallible call
//! returns a [`VistaStatus`]; on failure the message is kept per thread and
//! read with [`vista_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use vista::atlas::{run_pipeline, validate_bundle, Manifest, PipelineConfig};
use vista::metric::EuclideanPoints;
use vista::neighbors::{gain_curve, GainCurve};
use vista::VistaError;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VistaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    Io = 4,
    Numeric = 5,
    Render = 6,
    Stage = 7,
    InvalidUtf8 = 8,
    Panic = 9,
}

impl From<&VistaError> for VistaStatus {
    fn from(e: &VistaError) -> Self {
        use VistaError::*;
        match e {
            Parse { .. } | Json(_) | Bundle(_) | Image(_) => VistaStatus::Parse,
            Io { .. } => VistaStatus::Io,
            FitFailure(_) | Diverged(_) => VistaStatus::Numeric,
            Connection { .. } | Protocol { .. } | DimensionMismatch { .. } => VistaStatus::Render,
            Stage { .. } => VistaStatus::Stage,
            _ => VistaStatus::InvalidArgument,
        }
    }
}

/// Pipeline configuration.
pub struct VistaConfig(PipelineConfig);

/// Mutual-kNN gain curve.
pub struct VistaGainCurve(GainCurve);

/// Validated atlas bundle manifest.
pub struct VistaBundle(Manifest);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: VistaStatus, msg: impl Into<String>) -> VistaStatus {
    set_error(msg.into());
    status
}

fn guard(f: impl FnOnce() -> Result<(), VistaStatus>) -> VistaStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VistaStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(VistaStatus::Panic, format!("panic: {msg}"))
        }
    }
}

fn engine(e: VistaError) -> VistaStatus {
    let status = VistaStatus::from(&e);
    fail(status, e.to_string())
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, VistaStatus> {
    if p.is_null() {
        return Err(fail(VistaStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| fail(VistaStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, VistaStatus> {
    p.as_mut()
        .ok_or_else(|| fail(VistaStatus::NullPointer, format!("{name} is null")))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, VistaStatus> {
    p.as_ref()
        .ok_or_else(|| fail(VistaStatus::NullPointer, format!("{name} is null")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], VistaStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(VistaStatus::NullPointer, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn vista_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vista_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Default configuration for a corpus, latent and output directory.
///
/// # Safety
/// `corpus` and `out_dir` must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vista_config_new(
    corpus: *const c_char,
    dim: u32,
    latent_id: u32,
    out_dir: *const c_char,
    out: *mut *mut VistaConfig,
) -> VistaStatus {
    guard(|| {
        let slot = out_arg(out, "out")?;
        let cfg = PipelineConfig::new(
            path_arg(corpus, "corpus")?,
            dim,
            latent_id,
            path_arg(out_dir, "out_dir")?,
        );
        *slot = Box::into_raw(Box::new(VistaConfig(cfg)));
        Ok(())
    })
}

/// Reads a JSON configuration; relative paths resolve against its directory.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vista_config_load(path: *const c_char, out: *mut *mut VistaConfig) -> VistaStatus {
    guard(|| {
        let slot = out_arg(out, "out")?;
        let cfg = PipelineConfig::load(&path_arg(path, "path")?).map_err(engine)?;
        *slot = Box::into_raw(Box::new(VistaConfig(cfg)));
        Ok(())
    })
}

/// Sets the layout and panorama seeds.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn vista_config_set_seed(cfg: *mut VistaConfig, seed: u64) -> VistaStatus {
    guard(|| {
        let c = out_arg(cfg, "cfg")?;
        c.0 = c.0.clone().with_seed(seed);
        Ok(())
    })
}

/// Keeps the `count` most activating items.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn vista_config_set_selection_count(cfg: *mut VistaConfig, count: usize) -> VistaStatus {
    guard(|| {
        out_arg(cfg, "cfg")?.0.selection = vista::corpus::Selection::Count(count);
        Ok(())
    })
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn vista_config_validate(cfg: *const VistaConfig) -> VistaStatus {
    guard(|| handle(cfg, "cfg")?.0.validate().map_err(engine))
}

/// # Safety
/// `cfg` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vista_config_free(cfg: *mut VistaConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs the whole pipeline; the bundle lands in the configured output
/// directory.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn vista_run(cfg: *const VistaConfig) -> VistaStatus {
    guard(|| {
        run_pipeline(&handle(cfg, "cfg")?.0).map_err(engine)?;
        Ok(())
    })
}

/// Gain curve between two 2D embeddings of the same `n` points, given as
/// interleaved `x, y` arrays of length `2 n`.
///
/// # Safety
/// `a` and `b` must hold `2 * n` doubles, `fractions` `n_fractions` doubles;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vista_gain_curve_compute(
    a: *const f64,
    b: *const f64,
    n: usize,
    fractions: *const f64,
    n_fractions: usize,
    out: *mut *mut VistaGainCurve,
) -> VistaStatus {
    guard(|| {
        let slot = out_arg(out, "out")?;
        let pairs = |p: &[f64]| p.chunks_exact(2).map(|c| [c[0], c[1]]).collect::<Vec<_>>();
        let n2 = n
            .checked_mul(2)
            .ok_or_else(|| fail(VistaStatus::InvalidArgument, "n overflows"))?;
        let pa = pairs(slice_arg(a, n2, "a")?);
        let pb = pairs(slice_arg(b, n2, "b")?);
        let fr = slice_arg(fractions, n_fractions, "fractions")?;
        let curve = gain_curve(&EuclideanPoints(&pa), &EuclideanPoints(&pb), fr).map_err(engine)?;
        *slot = Box::into_raw(Box::new(VistaGainCurve(curve)));
        Ok(())
    })
}

/// Number of points on the curve; 0 for a null handle.
///
/// # Safety
/// `curve` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vista_gain_curve_len(curve: *const VistaGainCurve) -> usize {
    curve.as_ref().map_or(0, |c| c.0.points.len())
}

/// Reads point `index`. Any output pointer may be null.
///
/// # Safety
/// `curve` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn vista_gain_curve_point(
    curve: *const VistaGainCurve,
    index: usize,
    k_fraction: *mut f64,
    k: *mut usize,
    mknn: *mut f64,
    gain: *mut f64,
) -> VistaStatus {
    guard(|| {
        let c = handle(curve, "curve")?;
        let p = c.0.points.get(index).ok_or_else(|| {
            fail(
                VistaStatus::InvalidArgument,
                format!("index {index} out of {} points", c.0.points.len()),
            )
        })?;
        if let Some(o) = k_fraction.as_mut() {
            *o = p.k_fraction;
        }
        if let Some(o) = k.as_mut() {
            *o = p.k;
        }
        if let Some(o) = mknn.as_mut() {
            *o = p.mknn;
        }
        if let Some(o) = gain.as_mut() {
            *o = p.gain;
        }
        Ok(())
    })
}

/// Index of the maximal-gain point, smallest k on ties.
///
/// # Safety
/// `curve` must be a live handle; `index` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vista_gain_curve_argmax(curve: *const VistaGainCurve, index: *mut usize) -> VistaStatus {
    guard(|| {
        let c = handle(curve, "curve")?;
        let slot = out_arg(index, "index")?;
        let best =
            c.0.argmax()
                .ok_or_else(|| fail(VistaStatus::InvalidArgument, "empty curve"))?;
        *slot =
            c.0.points
                .iter()
                .position(|p| ptr::eq(p, best))
                .expect("argmax is a curve point");
        Ok(())
    })
}

/// # Safety
/// `curve` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vista_gain_curve_free(curve: *mut VistaGainCurve) {
    if !curve.is_null() {
        drop(Box::from_raw(curve));
    }
}

/// Opens and validates an atlas bundle directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vista_bundle_open(dir: *const c_char, out: *mut *mut VistaBundle) -> VistaStatus {
    guard(|| {
        let slot = out_arg(out, "out")?;
        let m = validate_bundle(&path_arg(dir, "dir")?).map_err(engine)?;
        *slot = Box::into_raw(Box::new(VistaBundle(m)));
        Ok(())
    })
}

/// # Safety
/// `bundle` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vista_bundle_item_count(bundle: *const VistaBundle) -> usize {
    bundle.as_ref().map_or(0, |b| b.0.items.len())
}

/// # Safety
/// `bundle` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vista_bundle_cluster_count(bundle: *const VistaBundle) -> usize {
    bundle.as_ref().map_or(0, |b| b.0.clusters.len())
}

/// Number of pyramid levels.
///
/// # Safety
/// `bundle` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vista_bundle_level_count(bundle: *const VistaBundle) -> usize {
    bundle.as_ref().map_or(0, |b| b.0.pyramid.levels.len())
}

/// # Safety
/// `bundle` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vista_bundle_free(bundle: *mut VistaBundle) {
    if !bundle.is_null() {
        drop(Box::from_raw(bundle));
    }
}
