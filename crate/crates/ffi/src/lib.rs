//! C interface to fixlab.
//!
//! Models live behind opaque `FixlabModel` handles. Every fallible function
//! returns a [`FixlabStatus`]; on failure the message is kept per thread and
//! can be read with [`fixlab_last_error`]. Images are `f32` buffers in NCHW
//! order with values in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fixlab::attacks::{run_attack, AttackConfig, AttackModel};
use fixlab::autodiff::Tape;
use fixlab::retinal::{radial_warp, retinal_resample, FixationPoint, RetinalWarpConfig};
use fixlab::zoo::{BackboneSpec, Family, ModelSpec, Network};
use fixlab::{checkpoint, Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixlabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Shape = 4,
    Range = 5,
    Format = 6,
    Precondition = 7,
    NonFinite = 8,
    Counts = 9,
    Io = 10,
    Check = 11,
    /// A Rust panic was caught at the boundary.
    Internal = 12,
    /// The caller's output buffer is too small.
    BufferTooSmall = 13,
}

impl From<&Error> for FixlabStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape(_) => FixlabStatus::Shape,
            Error::Range(_) => FixlabStatus::Range,
            Error::Config(_) => FixlabStatus::Config,
            Error::Format(_) => FixlabStatus::Format,
            Error::Precondition(_) => FixlabStatus::Precondition,
            Error::NonFinite(_) => FixlabStatus::NonFinite,
            Error::Counts(_) => FixlabStatus::Counts,
            Error::Check(_) => FixlabStatus::Check,
            Error::Io(_) => FixlabStatus::Io,
        }
    }
}

/// Opaque handle to a network with `f32` parameters.
pub struct FixlabModel {
    net: Network<f32>,
}

/// Outcome of one attack.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct FixlabAttackOutcome {
    /// 1 when the returned image satisfies the criterion within the budget.
    pub success: u8,
    pub iterations: u32,
    pub l1: f64,
    pub l2: f64,
    pub linf: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(FixlabStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(FixlabStatus::from(&e), e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn guard(f: impl FnOnce() -> Outcome) -> FixlabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FixlabStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(format!("internal error: {msg}"));
            FixlabStatus::Internal
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(FixlabStatus::NullPointer, format!("{what} is null"))
}

unsafe fn string<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(FixlabStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn model_ref<'a>(m: *const FixlabModel) -> Result<&'a FixlabModel, Failure> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn image_len(net: &Network<f32>, batch: usize) -> usize {
    let s = net.spec();
    batch * s.channels * s.image_side * s.image_side
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`) and returns the full message length, or 0 when no
/// error has been recorded.
#[no_mangle]
pub unsafe extern "C" fn fixlab_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fixlab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a freshly initialized model of `family` (e.g. `"retinal"`) with a
/// desk backbone of base width `width` for `side × side` RGB images.
#[no_mangle]
pub unsafe extern "C" fn fixlab_model_new(
    family: *const c_char,
    side: usize,
    classes: usize,
    width: usize,
    seed: u64,
    out: *mut *mut FixlabModel,
) -> FixlabStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let family: Family = string(family, "family")?.parse()?;
        let spec = ModelSpec::new(family, side, classes, BackboneSpec::desk(width, side));
        let net = Network::build(&spec, seed)?;
        *out = Box::into_raw(Box::new(FixlabModel { net }));
        Ok(())
    })
}

/// Builds a model from a JSON model spec, as stored in run manifests.
#[no_mangle]
pub unsafe extern "C" fn fixlab_model_from_spec_json(json: *const c_char, seed: u64, out: *mut *mut FixlabModel) -> FixlabStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let spec: ModelSpec = serde_json::from_str(string(json, "json")?)
            .map_err(|e| Failure(FixlabStatus::Config, format!("model spec: {e}")))?;
        let net = Network::build(&spec, seed)?;
        *out = Box::into_raw(Box::new(FixlabModel { net }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn fixlab_model_free(model: *mut FixlabModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Replaces the parameters with those of a checkpoint file.
#[no_mangle]
pub unsafe extern "C" fn fixlab_model_load(model: *mut FixlabModel, path: *const c_char) -> FixlabStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        checkpoint::load_into(m.net.params_mut(), Path::new(string(path, "path")?))?;
        Ok(())
    })
}

/// Writes the parameters to a checkpoint file.
#[no_mangle]
pub unsafe extern "C" fn fixlab_model_save(model: *const FixlabModel, path: *const c_char) -> FixlabStatus {
    guard(|| {
        let m = model_ref(model)?;
        checkpoint::save(m.net.params(), Path::new(string(path, "path")?))?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn fixlab_model_classes(model: *const FixlabModel) -> usize {
    model.as_ref().map_or(0, |m| m.net.spec().classes)
}

#[no_mangle]
pub unsafe extern "C" fn fixlab_model_image_side(model: *const FixlabModel) -> usize {
    model.as_ref().map_or(0, |m| m.net.spec().image_side)
}

/// Evaluation-mode logits (fixation ensemble) for `batch` images; `logits`
/// must hold `batch × classes` values.
#[no_mangle]
pub unsafe extern "C" fn fixlab_model_predict(
    model: *const FixlabModel,
    images: *const f32,
    batch: usize,
    logits: *mut f32,
    logits_len: usize,
) -> FixlabStatus {
    guard(|| {
        let m = model_ref(model)?;
        let s = m.net.spec();
        let need = batch * s.classes;
        if logits_len < need {
            return Err(Failure(FixlabStatus::BufferTooSmall, format!("logits buffer holds {logits_len}, need {need}")));
        }
        let data = slice(images, image_len(&m.net, batch), "images")?.to_vec();
        let x = Tensor::new(&[batch, s.channels, s.image_side, s.image_side], data)?;
        let y = m.net.predict(&x)?;
        slice_mut(logits, need, "logits")?.copy_from_slice(y.data());
        Ok(())
    })
}

/// Attacks one image with an attack described as JSON, for example
/// `{"algorithm":"pgd","metric":"linf","iterations":5,"step_const":0.1,
/// "eps":0.01,"criterion":"misclassify_1"}`. `adversarial` receives the
/// attacked image on success and a copy of the input otherwise.
#[no_mangle]
pub unsafe extern "C" fn fixlab_attack(
    model: *const FixlabModel,
    config_json: *const c_char,
    image: *const f32,
    label: usize,
    seed: u64,
    adversarial: *mut f32,
    outcome: *mut FixlabAttackOutcome,
) -> FixlabStatus {
    guard(|| {
        let m = model_ref(model)?;
        let cfg: AttackConfig = serde_json::from_str(string(config_json, "config")?)
            .map_err(|e| Failure(FixlabStatus::Config, format!("attack config: {e}")))?;
        let s = m.net.spec();
        let n = image_len(&m.net, 1);
        let x = Tensor::new(&[1, s.channels, s.image_side, s.image_side], slice(image, n, "image")?.to_vec())?;
        let out = slice_mut(adversarial, n, "adversarial")?;
        let outcome = outcome.as_mut().ok_or_else(|| null("outcome"))?;
        let model: &dyn AttackModel<f32> = &m.net;
        let res = run_attack(model, None, &x, label, &cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
        out.copy_from_slice(res.adversarial.as_ref().unwrap_or(&x).data());
        *outcome = FixlabAttackOutcome {
            success: res.success as u8,
            iterations: res.iters_used as u32,
            l1: res.distances.l1,
            l2: res.distances.l2,
            linf: res.distances.linf,
        };
        Ok(())
    })
}

/// Source radius of the foveal warp for output radius `r_out`.
#[no_mangle]
pub unsafe extern "C" fn fixlab_radial_warp(r_out: f64, r_norm: f64, strength: f64, out: *mut f64) -> FixlabStatus {
    guard(|| {
        let v = radial_warp(r_out, r_norm, strength)?;
        *out.as_mut().ok_or_else(|| null("out"))? = v;
        Ok(())
    })
}

/// Foveated resampling of one `channels × height × width` image about the
/// fixation `(dx, dy)` from the center; `out` has the input's size.
#[no_mangle]
pub unsafe extern "C" fn fixlab_retinal_resample(
    image: *const f32,
    channels: usize,
    height: usize,
    width: usize,
    dx: f64,
    dy: f64,
    strength: f64,
    out: *mut f32,
) -> FixlabStatus {
    guard(|| {
        let n = channels * height * width;
        let x = Tensor::new(&[1, channels, height, width], slice(image, n, "image")?.to_vec())?;
        let cfg = RetinalWarpConfig {
            strength,
            max_offset_x: (width / 2) as f64,
            max_offset_y: (height / 2) as f64,
        };
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let y = retinal_resample(&mut tape, v, FixationPoint::new(dx, dy), &cfg)?;
        slice_mut(out, n, "out")?.copy_from_slice(tape.value(y).data());
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn last_error() -> String {
        let mut buf = vec![0 as c_char; 256];
        let n = unsafe { fixlab_last_error(buf.as_mut_ptr(), buf.len()) };
        assert!(n > 0);
        unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
    }

    fn model(family: &str) -> *mut FixlabModel {
        let name = CString::new(family).unwrap();
        let mut m = ptr::null_mut();
        assert_eq!(unsafe { fixlab_model_new(name.as_ptr(), 32, 10, 4, 1, &mut m) }, FixlabStatus::Ok);
        m
    }

    #[test]
    fn unknown_family_reports_config_error() {
        let name = CString::new("nope").unwrap();
        let mut m = ptr::null_mut();
        let st = unsafe { fixlab_model_new(name.as_ptr(), 32, 10, 4, 1, &mut m) };
        assert_eq!(st, FixlabStatus::Config);
        assert!(m.is_null());
        assert!(last_error().contains("unknown model family"));
    }

    #[test]
    fn null_arguments_are_rejected() {
        let mut v = 0.0;
        assert_eq!(unsafe { fixlab_radial_warp(1.0, 2.0, 2.5, ptr::null_mut()) }, FixlabStatus::NullPointer);
        assert_eq!(unsafe { fixlab_radial_warp(1.0, 2.0, -1.0, &mut v) }, FixlabStatus::Config);
        assert_eq!(unsafe { fixlab_model_classes(ptr::null()) }, 0);
        unsafe { fixlab_model_free(ptr::null_mut()) };
    }

    #[test]
    fn predict_matches_library_and_checks_buffer() {
        let m = model("retinal");
        let img: Vec<f32> = (0..2 * 3 * 32 * 32).map(|i| (i % 17) as f32 / 17.0).collect();
        let mut logits = vec![0f32; 20];
        let st = unsafe { fixlab_model_predict(m, img.as_ptr(), 2, logits.as_mut_ptr(), 19) };
        assert_eq!(st, FixlabStatus::BufferTooSmall);
        let st = unsafe { fixlab_model_predict(m, img.as_ptr(), 2, logits.as_mut_ptr(), 20) };
        assert_eq!(st, FixlabStatus::Ok);
        let direct = unsafe { &*m }.net.predict(&Tensor::new(&[2, 3, 32, 32], img).unwrap()).unwrap();
        assert_eq!(direct.data(), &logits[..]);
        unsafe { fixlab_model_free(m) };
    }

    #[test]
    fn checkpoint_round_trip_through_handles() {
        let a = model("cortical");
        let b = model("cortical");
        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("m.fvrb").to_str().unwrap()).unwrap();
        unsafe {
            let p = (*a).net.params_mut().get_mut(0);
            p.value = p.value.map(|v| v + 0.5);
            assert_eq!(fixlab_model_save(a, path.as_ptr()), FixlabStatus::Ok);
            assert_eq!(fixlab_model_load(b, path.as_ptr()), FixlabStatus::Ok);
            assert_eq!((*a).net.params().get(0).value.data(), (*b).net.params().get(0).value.data());
            fixlab_model_free(a);
            fixlab_model_free(b);
        }
        let missing = CString::new("/nonexistent/m.fvrb").unwrap();
        let c = model("standard");
        assert_eq!(unsafe { fixlab_model_load(c, missing.as_ptr()) }, FixlabStatus::Io);
        unsafe { fixlab_model_free(c) };
    }

    #[test]
    fn attack_stays_in_budget() {
        let m = model("standard");
        let img: Vec<f32> = (0..3 * 32 * 32).map(|i| ((i * 7) % 23) as f32 / 23.0).collect();
        let mut adv = vec![0f32; img.len()];
        let mut outcome = FixlabAttackOutcome::default();
        let cfg = CString::new(r#"{"algorithm":"pgd","metric":"linf","iterations":5,"step_const":0.1,"eps":0.5,"criterion":"misclassify_1"}"#).unwrap();
        let st = unsafe { fixlab_attack(m, cfg.as_ptr(), img.as_ptr(), 0, 3, adv.as_mut_ptr(), &mut outcome) };
        assert_eq!(st, FixlabStatus::Ok);
        let linf = img.iter().zip(&adv).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
        assert!(linf as f64 <= 0.5 + 1e-6);
        assert!(adv.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!((outcome.linf - linf as f64).abs() < 1e-6);

        let bad = CString::new(r#"{"algorithm":"pgd"}"#).unwrap();
        let st = unsafe { fixlab_attack(m, bad.as_ptr(), img.as_ptr(), 0, 3, adv.as_mut_ptr(), &mut outcome) };
        assert_eq!(st, FixlabStatus::Config);
        unsafe { fixlab_model_free(m) };
    }

    #[test]
    fn retinal_resample_center_pixel_is_kept() {
        let img: Vec<f32> = (0..25).map(|i| i as f32).collect();
        let mut out = vec![0f32; 25];
        let st = unsafe { fixlab_retinal_resample(img.as_ptr(), 1, 5, 5, 0.0, 0.0, 2.5, out.as_mut_ptr()) };
        assert_eq!(st, FixlabStatus::Ok);
        assert_eq!(out[12], 12.0);
        let st = unsafe { fixlab_retinal_resample(img.as_ptr(), 1, 5, 5, 9.0, 0.0, 2.5, out.as_mut_ptr()) };
        assert_eq!(st, FixlabStatus::Range);
    }

    #[test]
    fn version_is_nul_terminated() {
        let v = unsafe { CStr::from_ptr(fixlab_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }
}
