//! C ABI over `hrn-core`.
//!
//! Objects cross the boundary as opaque handles created by `*_new`, `*_read`
//! or `*_load` functions and released with the matching `*_free`. Every
//! fallible call returns an [`HrnStatus`]; on failure the message is
//! available from [`hrn_last_error_message`] on the same thread until the
//! next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use hrn_core::model::Model;
use hrn_core::sim::{gen_scenario, ScenarioConfig, ScenarioName, Trajectory};
use hrn_core::train::{self, Checkpoint, Episode};
use hrn_core::{io, Error};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HrnStatus {
    Ok = 0,
    InvalidArgument = 1,
    InvalidState = 2,
    Io = 3,
    Format = 4,
    Config = 5,
    Diverged = 6,
    NonFinite = 7,
    NullPointer = 8,
    Panic = 9,
}

/// A trajectory: scene header plus frames.
pub struct HrnTrajectory {
    episode: Episode,
}

/// A trained model loaded from a checkpoint directory.
pub struct HrnModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> HrnStatus {
    match e {
        Error::InvalidArgument(_) => HrnStatus::InvalidArgument,
        Error::InvalidState(_) => HrnStatus::InvalidState,
        Error::Io(_) => HrnStatus::Io,
        Error::Format { .. } => HrnStatus::Format,
        Error::Config { .. } => HrnStatus::Config,
        Error::Diverged { .. } => HrnStatus::Diverged,
        Error::NonFinite { .. } => HrnStatus::NonFinite,
    }
}

enum Fail {
    Core(Error),
    Null(&'static str),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> HrnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HrnStatus::Ok,
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer passed as `{what}`"));
            HrnStatus::NullPointer
        }
        Err(_) => {
            set_error("internal panic".into());
            HrnStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Error::InvalidArgument(format!("`{what}` is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn out_arg<'a, T>(out: *mut *mut T, what: &'static str) -> Result<&'a mut *mut T, Fail> {
    out.as_mut().ok_or(Fail::Null(what))
}

fn wrap(t: Trajectory) -> Result<*mut HrnTrajectory, Fail> {
    Ok(Box::into_raw(Box::new(HrnTrajectory {
        episode: Episode::new(t)?,
    })))
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn hrn_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hrn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Generates a trajectory of a named scenario with its default parameters.
///
/// # Safety
/// `scenario` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hrn_trajectory_generate(
    scenario: *const c_char,
    seed: u64,
    n_frames: usize,
    out: *mut *mut HrnTrajectory,
) -> HrnStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let name: ScenarioName = path_arg(scenario, "scenario")?
            .to_str()
            .unwrap_or_default()
            .parse()?;
        *out = wrap(gen_scenario(name, &ScenarioConfig::defaults(name), seed, n_frames)?)?;
        Ok(())
    })
}

/// Reads a trajectory file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hrn_trajectory_read(path: *const c_char, out: *mut *mut HrnTrajectory) -> HrnStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = wrap(io::read_trajectory(&path_arg(path, "path")?)?)?;
        Ok(())
    })
}

/// Writes a trajectory file.
///
/// # Safety
/// `t` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hrn_trajectory_write(t: *const HrnTrajectory, path: *const c_char) -> HrnStatus {
    guard(|| {
        let t = t.as_ref().ok_or(Fail::Null("t"))?;
        io::write_trajectory(&path_arg(path, "path")?, &t.episode.traj)?;
        Ok(())
    })
}

/// Releases a trajectory handle. NULL is ignored.
///
/// # Safety
/// `t` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hrn_trajectory_free(t: *mut HrnTrajectory) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Frame count, or 0 for NULL.
///
/// # Safety
/// `t` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hrn_trajectory_n_frames(t: *const HrnTrajectory) -> usize {
    t.as_ref().map_or(0, |t| t.episode.traj.n_frames())
}

/// Particle count, or 0 for NULL.
///
/// # Safety
/// `t` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hrn_trajectory_n_particles(t: *const HrnTrajectory) -> usize {
    t.as_ref().map_or(0, |t| t.episode.traj.n_particles())
}

/// Copies frame `frame`'s positions as `n_particles * 3` doubles into `buf`.
///
/// # Safety
/// `t` must be a live handle and `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn hrn_trajectory_positions(
    t: *const HrnTrajectory,
    frame: usize,
    buf: *mut f64,
    len: usize,
) -> HrnStatus {
    guard(|| {
        let t = t.as_ref().ok_or(Fail::Null("t"))?;
        if buf.is_null() {
            return Err(Fail::Null("buf"));
        }
        let traj = &t.episode.traj;
        let f = traj
            .frames
            .get(frame)
            .ok_or_else(|| Error::InvalidArgument(format!("frame {frame} out of range")))?;
        if len != traj.n_particles() * 3 {
            return Err(Error::InvalidArgument(format!("buffer holds {len} values, need {}", traj.n_particles() * 3)).into());
        }
        let dst = std::slice::from_raw_parts_mut(buf, len);
        for (d, p) in dst.chunks_exact_mut(3).zip(&f.positions) {
            d.copy_from_slice(p);
        }
        Ok(())
    })
}

/// Loads a checkpoint directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hrn_model_load(dir: *const c_char, out: *mut *mut HrnModel) -> HrnStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ck = Checkpoint::load(&path_arg(dir, "dir")?)?;
        *out = Box::into_raw(Box::new(HrnModel { model: ck.model }));
        Ok(())
    })
}

/// Releases a model handle. NULL is ignored.
///
/// # Safety
/// `m` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hrn_model_free(m: *mut HrnModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Number of input frames the model consumes, or 0 for NULL.
///
/// # Safety
/// `m` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hrn_model_history(m: *const HrnModel) -> usize {
    m.as_ref().map_or(0, |m| m.model.cfg.history)
}

/// Predicts the leaf positions following frame `frame` of `t` into `buf`
/// (`n_particles * 3` doubles).
///
/// # Safety
/// Handles must be live and `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn hrn_model_step(
    m: *const HrnModel,
    t: *const HrnTrajectory,
    frame: usize,
    buf: *mut f64,
    len: usize,
) -> HrnStatus {
    guard(|| {
        let m = m.as_ref().ok_or(Fail::Null("m"))?;
        let t = t.as_ref().ok_or(Fail::Null("t"))?;
        if buf.is_null() {
            return Err(Fail::Null("buf"));
        }
        let n = t.episode.traj.n_particles();
        if len != n * 3 {
            return Err(Error::InvalidArgument(format!("buffer holds {len} values, need {}", n * 3)).into());
        }
        let input = t.episode.input(frame, m.model.cfg.history)?;
        let next = m.model.step(&input)?.next;
        let dst = std::slice::from_raw_parts_mut(buf, len);
        for (d, p) in dst.chunks_exact_mut(3).zip(&next) {
            d.copy_from_slice(&p.position);
        }
        Ok(())
    })
}

/// Autoregressive rollout of `n_steps` from frame `start`. The result holds
/// the seed frames followed by the predictions.
///
/// # Safety
/// Handles must be live and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hrn_rollout(
    m: *const HrnModel,
    t: *const HrnTrajectory,
    start: usize,
    n_steps: usize,
    out: *mut *mut HrnTrajectory,
) -> HrnStatus {
    guard(|| {
        let m = m.as_ref().ok_or(Fail::Null("m"))?;
        let t = t.as_ref().ok_or(Fail::Null("t"))?;
        let out = out_arg(out, "out")?;
        *out = wrap(train::rollout(&m.model, &t.episode, start, n_steps)?)?;
        Ok(())
    })
}
