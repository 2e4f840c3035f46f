//! C ABI over `rearrange-core`.
//!
//! Scenes and models cross the boundary as opaque handles. Every function
//! returns an [`RrStatus`]; on failure [`rr_last_error`] describes the error
//! on the calling thread. Strings returned to the caller are released with
//! [`rr_string_free`], handles with their `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use rearrange_core::assign::emd_to_gt;
use rearrange_core::denoiser::Denoiser;
use rearrange_core::langevin::{denoise, InferenceVariant, LangevinSchedule};
use rearrange_core::relations::{scene_relation_rate, RelationQuery};
use rearrange_core::synth::{generate_clean, perturb_bimodal, TableChairSpec, Variant};
use rearrange_core::{Error, Scene};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RrStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    InvalidInput = 4,
    Mismatch = 5,
    Io = 6,
    Checkpoint = 7,
    Panic = 8,
}

/// A scene owned by the library.
pub struct RrScene {
    scene: Scene,
}

/// A loaded denoiser.
pub struct RrModel {
    model: Denoiser,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> RrStatus {
    match e {
        Error::Io { .. } => RrStatus::Io,
        Error::Json { .. } => RrStatus::Parse,
        Error::IncompatibleCheckpoint(_) | Error::UntrainedParams(_) => RrStatus::Checkpoint,
        Error::ClassMultisetMismatch { .. } | Error::MismatchedSets(_) | Error::VariantMismatch { .. } => {
            RrStatus::Mismatch
        }
        _ => RrStatus::InvalidInput,
    }
}

struct Failure(RrStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            RrStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            RrStatus::Panic
        }
    }
}

fn null(name: &str) -> Failure {
    Failure(RrStatus::NullArgument, format!("`{name}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(RrStatus::InvalidUtf8, format!("`{name}` is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(name))
}

fn boxed_scene(scene: Scene) -> *mut RrScene {
    Box::into_raw(Box::new(RrScene { scene }))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn rr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses a scene from JSON.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn rr_scene_from_json(json: *const c_char, out: *mut *mut RrScene) -> RrStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let text = str_arg(json, "json")?;
        let scene: Scene = serde_json::from_str(text).map_err(|e| Failure(RrStatus::Parse, e.to_string()))?;
        *out = boxed_scene(scene);
        Ok(())
    })
}

/// Serializes a scene to JSON; free the result with [`rr_string_free`].
///
/// # Safety
/// `scene` must be a live handle; `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn rr_scene_to_json(scene: *const RrScene, out: *mut *mut c_char) -> RrStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let scene = ref_arg(scene, "scene")?;
        let text = serde_json::to_string(&scene.scene).map_err(|e| Failure(RrStatus::Parse, e.to_string()))?;
        *out = CString::new(text).map_err(|e| Failure(RrStatus::Parse, e.to_string()))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `scene` must be a live handle; `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn rr_scene_object_count(scene: *const RrScene, out: *mut usize) -> RrStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(scene, "scene")?.scene.len();
        Ok(())
    })
}

/// # Safety
/// `scene` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rr_scene_free(scene: *mut RrScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Generates a clean Table-Chair scene. `variant` is one of
/// `symmetry-parallelism`, `uniform-spacing`, `grouping-by-shape`.
///
/// # Safety
/// `variant` must be a NUL-terminated string; `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn rr_generate_scene(variant: *const c_char, seed: u64, out: *mut *mut RrScene) -> RrStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let variant: Variant = str_arg(variant, "variant")?.parse()?;
        *out = boxed_scene(generate_clean(&TableChairSpec::new(variant, seed))?);
        Ok(())
    })
}

/// Perturbs a scene with the two-mode Table-Chair noise kernel.
///
/// # Safety
/// `scene` must be a live handle; `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn rr_perturb_scene(scene: *const RrScene, seed: u64, out: *mut *mut RrScene) -> RrStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let scene = ref_arg(scene, "scene")?;
        *out = boxed_scene(perturb_bimodal(&scene.scene, seed));
        Ok(())
    })
}

/// Loads a denoiser checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn rr_model_load(path: *const c_char, out: *mut *mut RrModel) -> RrStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = str_arg(path, "path")?;
        let model = Denoiser::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(RrModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rr_model_free(model: *mut RrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Denoises `scene`. `schedule` names a preset (`living-room`, `bedroom`,
/// `table-chair`); `inference` is `direct`, `grad` or `grad-noise`.
/// `out_iterations` may be null.
///
/// # Safety
/// Handles must be live, strings NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rr_denoise(
    model: *const RrModel,
    scene: *const RrScene,
    schedule: *const c_char,
    inference: *const c_char,
    seed: u64,
    out: *mut *mut RrScene,
    out_iterations: *mut usize,
) -> RrStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let model = ref_arg(model, "model")?;
        let scene = ref_arg(scene, "scene")?;
        let schedule = LangevinSchedule::preset(str_arg(schedule, "schedule")?)?;
        let inference: InferenceVariant = str_arg(inference, "inference")?.parse()?;
        let traj = denoise(&model.model, &scene.scene, &schedule, inference, seed)?;
        if let Some(n) = out_iterations.as_mut() {
            *n = traj.iterations();
        }
        *out = boxed_scene(traj.final_scene().clone());
        Ok(())
    })
}

/// Mean per-object transport distance between two scenes with equal class
/// multisets.
///
/// # Safety
/// Handles must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rr_emd_to_gt(pred: *const RrScene, gt: *const RrScene, out: *mut f64) -> RrStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = emd_to_gt(&ref_arg(pred, "pred")?.scene, &ref_arg(gt, "gt")?.scene)?;
        Ok(())
    })
}

/// Fraction of sampled subsets of size `n` (2 or 3) whose coordinates admit
/// a shift-invariant integer relation with coefficients below `eta`.
///
/// # Safety
/// `scene` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rr_relation_rate(
    scene: *const RrScene,
    n: usize,
    eta: i64,
    epsilon: f64,
    samples: usize,
    seed: u64,
    out: *mut f64,
) -> RrStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let query = RelationQuery {
            n,
            eta,
            epsilon,
            samples_per_scene: samples,
            seed,
            ..RelationQuery::default()
        };
        *out = scene_relation_rate(&ref_arg(scene, "scene")?.scene, &query)?;
        Ok(())
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
