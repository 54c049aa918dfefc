//! C ABI over the safeflow model, safety filter and simulator.
//!
//! Objects are opaque handles created by `*_new`/`*_load` functions and
//! released by the matching `*_free`. Every fallible call returns a
//! [`SafeflowStatus`]; on failure the message is available from
//! [`safeflow_last_error`] on the same thread. Rotations cross the boundary
//! as unit quaternions `(w, x, y, z)`, vectors as three doubles.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use nalgebra::Vector3;
use safeflow::filter::{filter_step, FilterConfig};
use safeflow::model::Model;
use safeflow::sim::{SimConfig, SimRecord, Simulator};
use safeflow::{Error, Rotation};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SafeflowStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Numerical = 5,
    Panic = 6,
}

/// Safety-filter parameters.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafeflowFilterConfig {
    /// Barrier gain (1/s).
    pub alpha_gain: f64,
    /// Componentwise bound on the command (rad/s).
    pub u_max: f64,
    /// Control period (s); replaced by the simulator step inside a simulator.
    pub dt: f64,
    /// Barrier offset.
    pub margin: f64,
}

/// Simulator parameters.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafeflowSimConfig {
    pub dt: f64,
    pub speed_scale: f64,
    pub filter_on: bool,
    pub filter: SafeflowFilterConfig,
}

/// One simulator tick.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SafeflowStep {
    pub tick: u64,
    pub t: f64,
    pub q_ref: [f64; 4],
    pub q_exc: [f64; 4],
    pub theta: [f64; 3],
    pub h: [f64; 3],
    pub u0: [f64; 3],
    pub u_star: [f64; 3],
    pub active: [bool; 3],
    pub feasible: bool,
}

impl From<&SimRecord> for SafeflowStep {
    fn from(r: &SimRecord) -> Self {
        Self {
            tick: r.tick,
            t: r.t,
            q_ref: r.r_ref.to_quaternion_wxyz(),
            q_exc: r.r_exc.to_quaternion_wxyz(),
            theta: r.theta,
            h: r.h,
            u0: r.u0,
            u_star: r.u_star,
            active: r.active,
            feasible: r.feasible,
        }
    }
}

/// Opaque learned model.
pub struct SafeflowModel {
    inner: Model,
}

/// Opaque simulator.
pub struct SafeflowSimulator {
    inner: Simulator,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

type Failure = (SafeflowStatus, String);

fn set_error(msg: Option<String>) {
    let c = msg.map(|m| CString::new(m.replace('\0', " ")).expect("nul bytes removed"));
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SafeflowStatus {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(None);
            SafeflowStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(Some(msg));
            status
        }
        Err(_) => {
            set_error(Some("internal panic".into()));
            SafeflowStatus::Panic
        }
    }
}

fn classify(e: Error) -> Failure {
    let status = match &e {
        Error::Usage(_) => SafeflowStatus::InvalidArgument,
        Error::Io { .. } | Error::Dataset(safeflow::dataset::DatasetError::Io { .. }) => SafeflowStatus::Io,
        Error::Format(_) => SafeflowStatus::Format,
        _ => SafeflowStatus::Numerical,
    };
    (status, e.to_string())
}

fn invalid(msg: impl Into<String>) -> Failure {
    (SafeflowStatus::InvalidArgument, msg.into())
}

fn null(name: &str) -> Failure {
    (SafeflowStatus::NullPointer, format!("{name} is null"))
}

unsafe fn read<const N: usize>(p: *const f64, name: &str) -> Result<[f64; N], Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    let mut out = [0.0; N];
    out.copy_from_slice(std::slice::from_raw_parts(p, N));
    if !out.iter().all(|v| v.is_finite()) {
        return Err(invalid(format!("{name} has non-finite entries")));
    }
    Ok(out)
}

unsafe fn write<const N: usize>(p: *mut f64, value: [f64; N], name: &str) -> Result<(), Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    std::slice::from_raw_parts_mut(p, N).copy_from_slice(&value);
    Ok(())
}

unsafe fn rotation(q: *const f64, name: &str) -> Result<Rotation, Failure> {
    Rotation::from_quaternion_wxyz(read::<4>(q, name)?).map_err(|e| invalid(format!("{name}: {e}")))
}

unsafe fn str_arg<'a>(s: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if s.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| invalid(format!("{name} is not valid UTF-8")))
}

unsafe fn model_ref<'a>(m: *const SafeflowModel) -> Result<&'a Model, Failure> {
    m.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

fn filter_config(c: &SafeflowFilterConfig) -> FilterConfig {
    FilterConfig {
        alpha_gain: c.alpha_gain,
        u_max: c.u_max,
        dt: c.dt,
        margin: c.margin,
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn safeflow_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn safeflow_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn safeflow_filter_config_default() -> SafeflowFilterConfig {
    let d = FilterConfig::default();
    SafeflowFilterConfig {
        alpha_gain: d.alpha_gain,
        u_max: d.u_max,
        dt: d.dt,
        margin: d.margin,
    }
}

#[no_mangle]
pub extern "C" fn safeflow_sim_config_default() -> SafeflowSimConfig {
    SafeflowSimConfig {
        dt: FilterConfig::default().dt,
        speed_scale: 1.0,
        filter_on: true,
        filter: safeflow_filter_config_default(),
    }
}

/// Loads a model file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn safeflow_model_load(path: *const c_char, out: *mut *mut SafeflowModel) -> SafeflowStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let inner = Model::load(Path::new(path)).map_err(classify)?;
        *out = Box::into_raw(Box::new(SafeflowModel { inner }));
        Ok(())
    })
}

/// Parses a model from its JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn safeflow_model_from_json(json: *const c_char, out: *mut *mut SafeflowModel) -> SafeflowStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = str_arg(json, "json")?;
        let inner = Model::from_json(text).map_err(classify)?;
        *out = Box::into_raw(Box::new(SafeflowModel { inner }));
        Ok(())
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn safeflow_model_free(model: *mut SafeflowModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Goal frame as a quaternion.
///
/// # Safety
/// `q_out` must point to 4 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn safeflow_model_goal(model: *const SafeflowModel, q_out: *mut f64) -> SafeflowStatus {
    guard(|| write(q_out, model_ref(model)?.goal().to_quaternion_wxyz(), "q_out"))
}

/// Mean start frame of the training demonstrations.
///
/// # Safety
/// `q_out` must point to 4 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn safeflow_model_start(model: *const SafeflowModel, q_out: *mut f64) -> SafeflowStatus {
    guard(|| write(q_out, model_ref(model)?.start.to_quaternion_wxyz(), "q_out"))
}

/// Angular velocity commanded by the DS at frame `q`.
///
/// # Safety
/// `q` must point to 4 doubles and `omega_out` to 3 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn safeflow_model_evaluate(
    model: *const SafeflowModel,
    q: *const f64,
    omega_out: *mut f64,
) -> SafeflowStatus {
    guard(|| {
        let m = model_ref(model)?;
        let r = rotation(q, "q")?;
        let w = m.ds.evaluate(&r).map_err(|e| classify(e.into()))?;
        write(omega_out, w.into(), "omega_out")
    })
}

/// Cone half-angles (rad) for a reference frame.
///
/// # Safety
/// `q_ref` must point to 4 doubles and `theta_out` to 3 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn safeflow_model_cone_angles(
    model: *const SafeflowModel,
    q_ref: *const f64,
    theta_out: *mut f64,
) -> SafeflowStatus {
    guard(|| {
        let m = model_ref(model)?;
        let r = rotation(q_ref, "q_ref")?;
        write(theta_out, m.cones.angles(&r), "theta_out")
    })
}

/// One safety-filter solve. `feasible_out` may be NULL.
///
/// # Safety
/// Quaternion arguments must point to 4 doubles, vector arguments to 3;
/// `config` may be NULL for defaults.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn safeflow_filter_step(
    model: *const SafeflowModel,
    q_exc: *const f64,
    q_ref: *const f64,
    w_ref: *const f64,
    u0: *const f64,
    config: *const SafeflowFilterConfig,
    u_out: *mut f64,
    feasible_out: *mut bool,
) -> SafeflowStatus {
    guard(|| {
        let m = model_ref(model)?;
        let r_exc = rotation(q_exc, "q_exc")?;
        let r_ref = rotation(q_ref, "q_ref")?;
        let w_ref = Vector3::from(read::<3>(w_ref, "w_ref")?);
        let u0 = Vector3::from(read::<3>(u0, "u0")?);
        let cfg = config.as_ref().map_or_else(FilterConfig::default, filter_config);
        cfg.validate().map_err(invalid)?;
        let sol = filter_step(&r_exc, &r_ref, &w_ref, &u0, &m.cones, &cfg);
        write(u_out, sol.u_star.into(), "u_out")?;
        if let Some(f) = feasible_out.as_mut() {
            *f = sol.feasible;
        }
        Ok(())
    })
}

/// Creates a simulator; `config` NULL selects defaults and `q_initial` NULL
/// starts both frames at the model's start frame. The simulator does not
/// borrow the model, which may be freed afterwards.
///
/// # Safety
/// Pointers must be valid or NULL where allowed; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn safeflow_simulator_new(
    model: *const SafeflowModel,
    config: *const SafeflowSimConfig,
    q_initial: *const f64,
    out: *mut *mut SafeflowSimulator,
) -> SafeflowStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let m = model_ref(model)?;
        let c = config.as_ref().copied().unwrap_or_else(|| safeflow_sim_config_default());
        let initial = if q_initial.is_null() {
            m.start
        } else {
            rotation(q_initial, "q_initial")?
        };
        let mut cfg = SimConfig::new(initial, f64::MAX);
        cfg.dt = c.dt;
        cfg.speed_scale = c.speed_scale;
        cfg.filter_on = c.filter_on;
        cfg.filter = filter_config(&c.filter);
        let inner = Simulator::new(cfg, m.ds.clone(), m.cones.clone()).map_err(|e| invalid(e.to_string()))?;
        *out = Box::into_raw(Box::new(SafeflowSimulator { inner }));
        Ok(())
    })
}

/// Advances one tick with external input `u_ext` (NULL for zero).
///
/// # Safety
/// `sim` and `step_out` must be valid; `u_ext` NULL or 3 doubles.
#[no_mangle]
pub unsafe extern "C" fn safeflow_simulator_step(
    sim: *mut SafeflowSimulator,
    u_ext: *const f64,
    step_out: *mut SafeflowStep,
) -> SafeflowStatus {
    guard(|| {
        let s = sim.as_mut().ok_or_else(|| null("sim"))?;
        let out = step_out.as_mut().ok_or_else(|| null("step_out"))?;
        let u = if u_ext.is_null() {
            Vector3::zeros()
        } else {
            Vector3::from(read::<3>(u_ext, "u_ext")?)
        };
        let record = s.inner.step(&u).map_err(|e| (SafeflowStatus::Numerical, e.to_string()))?;
        *out = SafeflowStep::from(&record);
        Ok(())
    })
}

/// Returns both frames to their initial values and the clock to zero.
///
/// # Safety
/// `sim` must be valid.
#[no_mangle]
pub unsafe extern "C" fn safeflow_simulator_reset(sim: *mut SafeflowSimulator) -> SafeflowStatus {
    guard(|| {
        sim.as_mut().ok_or_else(|| null("sim"))?.inner.reset();
        Ok(())
    })
}

/// # Safety
/// `sim` must be valid.
#[no_mangle]
pub unsafe extern "C" fn safeflow_simulator_set_speed_scale(sim: *mut SafeflowSimulator, scale: f64) -> SafeflowStatus {
    guard(|| {
        let s = sim.as_mut().ok_or_else(|| null("sim"))?;
        s.inner.set_speed_scale(scale).map_err(|e| invalid(e.to_string()))
    })
}

/// # Safety
/// `sim` must be valid.
#[no_mangle]
pub unsafe extern "C" fn safeflow_simulator_set_filter(sim: *mut SafeflowSimulator, on: bool) -> SafeflowStatus {
    guard(|| {
        sim.as_mut().ok_or_else(|| null("sim"))?.inner.set_filter_on(on);
        Ok(())
    })
}

/// Releases a simulator. NULL is ignored.
///
/// # Safety
/// `sim` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn safeflow_simulator_free(sim: *mut SafeflowSimulator) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}
