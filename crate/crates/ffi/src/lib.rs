//! C bindings for the trainer.
//!
//! Every function returns a [`MentorStatus`]; on failure the message is kept
//! per thread and can be copied out with [`mentor_last_error_message`].
//! Handles returned by `mentor_trainer_new` and `mentor_trainer_load` must
//! be released with [`mentor_trainer_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use mentor::env::{four_rooms_oracle_reward, goal_reward};
use mentor::high::SubgoalMode;
use mentor::trainer::{TrainConfig, Trainer};
use mentor::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MentorStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Corrupt = 5,
    Version = 6,
    Numeric = 7,
    InvalidUtf8 = 8,
    Panic = 9,
}

/// Opaque trainer handle.
pub struct MentorTrainer {
    inner: Trainer,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &Error) -> MentorStatus {
    match err {
        Error::Config(_) => MentorStatus::Config,
        Error::Io(_) => MentorStatus::Io,
        Error::Corrupt(_) => MentorStatus::Corrupt,
        Error::Version { .. } => MentorStatus::Version,
        Error::NonFinite(_) => MentorStatus::Numeric,
        _ => MentorStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (MentorStatus, String)>) -> MentorStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            MentorStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(msg);
            MentorStatus::Panic
        }
    }
}

fn lift<T>(r: mentor::Result<T>) -> Result<T, (MentorStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (MentorStatus, String) {
    (MentorStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (MentorStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (MentorStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], (MentorStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn trainer_mut<'a>(t: *mut MentorTrainer) -> Result<&'a mut MentorTrainer, (MentorStatus, String)> {
    t.as_mut().ok_or_else(|| null("trainer"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mentor_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length in
/// bytes, excluding the terminator. `buf` may be null to query the length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn mentor_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Creates a trainer from a TOML configuration; null means defaults.
///
/// # Safety
/// `config_toml` must be null or a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mentor_trainer_new(config_toml: *const c_char, out: *mut *mut MentorTrainer) -> MentorStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = if config_toml.is_null() {
            TrainConfig::default()
        } else {
            lift(TrainConfig::from_toml_str(str_arg(config_toml, "config")?))?
        };
        let inner = lift(Trainer::new(cfg))?;
        *out = Box::into_raw(Box::new(MentorTrainer { inner }));
        Ok(())
    })
}

/// Loads a trainer from a checkpoint file.
///
/// # Safety
/// `path` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mentor_trainer_load(path: *const c_char, out: *mut *mut MentorTrainer) -> MentorStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = lift(Trainer::load(Path::new(str_arg(path, "path")?)))?;
        *out = Box::into_raw(Box::new(MentorTrainer { inner }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `t` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mentor_trainer_free(t: *mut MentorTrainer) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Writes a checkpoint.
///
/// # Safety
/// `t` must be a live handle and `path` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn mentor_trainer_save(t: *mut MentorTrainer, path: *const c_char) -> MentorStatus {
    guard(|| {
        let t = trainer_mut(t)?;
        lift(t.inner.save(Path::new(str_arg(path, "path")?)))
    })
}

/// Runs `n` training episodes. `env_successes`, when not null, receives the
/// number of those episodes that touched the environment goal.
///
/// # Safety
/// `t` must be a live handle; `env_successes` null or writable.
#[no_mangle]
pub unsafe extern "C" fn mentor_trainer_run_episodes(
    t: *mut MentorTrainer,
    n: u32,
    env_successes: *mut u32,
) -> MentorStatus {
    guard(|| {
        let t = trainer_mut(t)?;
        let mut hits = 0;
        for _ in 0..n {
            hits += lift(t.inner.run_episode())?.env_success as u32;
        }
        if !env_successes.is_null() {
            *env_successes = hits;
        }
        Ok(())
    })
}

/// Number of completed training episodes.
///
/// # Safety
/// `t` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mentor_trainer_episode(t: *mut MentorTrainer, out: *mut u64) -> MentorStatus {
    guard(|| {
        let t = trainer_mut(t)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = t.inner.state().episode;
        Ok(())
    })
}

/// Greedy success rate over `episodes` evaluation rollouts.
///
/// # Safety
/// `t` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mentor_trainer_evaluate(t: *mut MentorTrainer, episodes: u32, out: *mut f64) -> MentorStatus {
    guard(|| {
        let t = trainer_mut(t)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = lift(t.inner.evaluate(episodes as usize))?;
        Ok(())
    })
}

/// Current constraint range `k` and multiplier `α`. Either pointer may be null.
///
/// # Safety
/// `t` must be a live handle; outputs null or writable.
#[no_mangle]
pub unsafe extern "C" fn mentor_trainer_curriculum(t: *mut MentorTrainer, k: *mut f64, alpha: *mut f64) -> MentorStatus {
    guard(|| {
        let t = trainer_mut(t)?;
        if !k.is_null() {
            *k = t.inner.state().curriculum.k;
        }
        if !alpha.is_null() {
            *alpha = t.inner.state().dual.alpha;
        }
        Ok(())
    })
}

/// Writes the greedy subgoal for state `s` and goal `g` into `out`.
/// Lengths must match the environment's state and goal dimensions.
///
/// # Safety
/// `t` must be a live handle; `s`, `g` readable and `out` writable for
/// their stated lengths.
#[no_mangle]
pub unsafe extern "C" fn mentor_trainer_subgoal(
    t: *mut MentorTrainer,
    s: *const f64,
    s_len: usize,
    g: *const f64,
    g_len: usize,
    out: *mut f64,
    out_len: usize,
) -> MentorStatus {
    guard(|| {
        let t = trainer_mut(t)?;
        let spec = t.inner.spec();
        if s_len != spec.state_dim || g_len != spec.goal_dim || out_len != spec.goal_dim {
            return Err((
                MentorStatus::InvalidArgument,
                format!(
                    "expected state length {} and goal lengths {}, got {s_len}, {g_len}, {out_len}",
                    spec.state_dim, spec.goal_dim
                ),
            ));
        }
        let s = slice_arg(s, s_len, "state")?;
        let g = slice_arg(g, g_len, "goal")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (sub, _) = lift(t.inner.state().high.select(s, g, SubgoalMode::Greedy, &mut rng))?;
        std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(&sub);
        Ok(())
    })
}

/// Sparse goal test: `*hit` is 1 when `‖achieved − goal‖ < epsilon`, else 0.
///
/// # Safety
/// `achieved` and `goal` must be readable for `dim` values; `hit` writable.
#[no_mangle]
pub unsafe extern "C" fn mentor_goal_reward(
    achieved: *const f64,
    goal: *const f64,
    dim: usize,
    epsilon: f64,
    hit: *mut i32,
) -> MentorStatus {
    guard(|| {
        if !(epsilon > 0.0) {
            return Err((MentorStatus::InvalidArgument, "epsilon must be positive".into()));
        }
        let a = slice_arg(achieved, dim, "achieved")?;
        let g = slice_arg(goal, dim, "goal")?;
        if hit.is_null() {
            return Err(null("hit"));
        }
        *hit = lift(goal_reward(a, g, epsilon))?.is_hit() as i32;
        Ok(())
    })
}

/// Scripted four-rooms preference score of position `(x, y)`.
#[no_mangle]
pub extern "C" fn mentor_four_rooms_oracle(x: f64, y: f64) -> f64 {
    four_rooms_oracle_reward(&[x, y])
}
