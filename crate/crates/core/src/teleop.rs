//! Teleoperation sessions over HTTP and WebSocket.
//!
//! Every session is owned by one tick loop. Handlers talk to it through a
//! command channel and receive frames through a broadcast channel, so the
//! simulation state has a single writer. Time is logical: each tick advances
//! the simulation by exactly `dt`, and the wall clock only paces the loop.
//!
//! Operator input is held for [`ServiceConfig::hold`] seconds of simulated
//! time after it arrives and then faded linearly to zero over
//! [`ServiceConfig::fade`] seconds, both rounded to whole ticks. Everything
//! that changes the trajectory is recorded in a [`SessionLog`], and
//! [`replay`] reproduces the streamed frames bit for bit.

use std::collections::HashMap;
use std::future::Future;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, mpsc, oneshot};

use crate::filter::FilterConfig;
use crate::model::Model;
use crate::sim::{PerturbationProfile, SimConfig, SimError, SimRecord, Simulator};
use crate::so3::Rotation;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    /// Simulation step (s).
    pub dt: f64,
    /// Simulated seconds per wall-clock second.
    pub rate: f64,
    /// Input hold window (s of simulated time).
    pub hold: f64,
    /// Linear fade after the hold window (s).
    pub fade: f64,
    /// Frames buffered per subscriber before the oldest are dropped.
    pub stream_capacity: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            dt: 0.003,
            rate: 1.0,
            hold: 0.2,
            fade: 0.1,
            stream_capacity: 4096,
        }
    }
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [("dt", self.dt), ("rate", self.rate)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("hold", self.hold), ("fade", self.fade)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{name} must be nonnegative, got {v}"));
            }
        }
        if self.stream_capacity == 0 {
            return Err("stream capacity must be positive".into());
        }
        Ok(())
    }

    fn tick_period(&self) -> Duration {
        Duration::from_secs_f64(self.dt / self.rate)
    }
}

/// One streamed tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
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

impl From<&SimRecord> for Frame {
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

/// Optional overrides accepted when a session is created.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionOptions {
    pub filter_on: Option<bool>,
    pub speed_scale: Option<f64>,
    pub alpha_gain: Option<f64>,
    pub u_max: Option<f64>,
    /// Initial frame for both reference and executor; the model's start
    /// frame when absent.
    pub initial: Option<Rotation>,
}

/// Simulation config of a session; shared by the live loop and [`replay`].
pub fn session_config(model: &Model, dt: f64, opts: &SessionOptions) -> Result<SimConfig, SimError> {
    let initial = opts.initial.unwrap_or(model.start);
    let defaults = FilterConfig::default();
    let cfg = SimConfig {
        dt,
        duration: f64::MAX,
        initial_exc: initial,
        initial_ref: initial,
        perturbation: PerturbationProfile::none(),
        filter_on: opts.filter_on.unwrap_or(true),
        speed_scale: opts.speed_scale.unwrap_or(1.0),
        filter: FilterConfig {
            alpha_gain: opts.alpha_gain.unwrap_or(defaults.alpha_gain),
            u_max: opts.u_max.unwrap_or(defaults.u_max),
            ..defaults
        },
    };
    cfg.validate()?;
    Ok(cfg)
}

/// A client input as applied at a tick boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SessionEvent {
    Input {
        u_h: [f64; 3],
        speed_scale: Option<f64>,
        filter_on: Option<bool>,
    },
    Reset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedEvent {
    /// Number of frames emitted before the event took effect.
    pub step: u64,
    pub event: SessionEvent,
}

/// Everything needed to re-run a session offline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub model: String,
    pub dt: f64,
    pub hold: f64,
    pub fade: f64,
    pub options: SessionOptions,
    pub events: Vec<LoggedEvent>,
    /// Frames emitted so far.
    pub steps: u64,
}

/// Weight of an input that is `age` ticks old, given hold and fade lengths
/// in ticks.
pub fn input_weight(age: u64, hold: u64, fade: u64) -> f64 {
    if age <= hold {
        1.0
    } else if age >= hold + fade {
        0.0
    } else {
        1.0 - (age - hold) as f64 / fade as f64
    }
}

fn ticks(seconds: f64, dt: f64) -> u64 {
    (seconds / dt).round() as u64
}

/// Deterministic session state machine: events in, frames out.
#[derive(Debug, Clone)]
pub struct SessionCore {
    sim: Simulator,
    hold: f64,
    fade: f64,
    u_h: Vector3<f64>,
    input_step: u64,
    steps: u64,
}

impl SessionCore {
    pub fn new(model: &Model, dt: f64, hold: f64, fade: f64, opts: &SessionOptions) -> Result<Self, SimError> {
        let cfg = session_config(model, dt, opts)?;
        Ok(Self {
            sim: Simulator::new(cfg, model.ds.clone(), model.cones.clone())?,
            hold,
            fade,
            u_h: Vector3::zeros(),
            input_step: 0,
            steps: 0,
        })
    }

    pub fn simulator(&self) -> &Simulator {
        &self.sim
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn u_max(&self) -> f64 {
        self.sim.config().filter.u_max
    }

    /// Clamps `u_h` to the box, rejecting non-finite values.
    pub fn clamp_input(&self, u_h: [f64; 3]) -> Result<([f64; 3], bool), String> {
        if !u_h.iter().all(|v| v.is_finite()) {
            return Err("input must be finite".into());
        }
        let m = self.u_max();
        let clamped = u_h.map(|v| v.clamp(-m, m));
        Ok((clamped, clamped != u_h))
    }

    /// Applies an already validated event.
    pub fn apply(&mut self, event: &SessionEvent) -> Result<(), SimError> {
        match event {
            SessionEvent::Input {
                u_h,
                speed_scale,
                filter_on,
            } => {
                if let Some(s) = speed_scale {
                    self.sim.set_speed_scale(*s)?;
                }
                if let Some(on) = filter_on {
                    self.sim.set_filter_on(*on);
                }
                self.u_h = Vector3::from(*u_h);
                self.input_step = self.steps;
            }
            SessionEvent::Reset => {
                self.sim.reset();
                self.u_h = Vector3::zeros();
                self.input_step = self.steps;
            }
        }
        Ok(())
    }

    fn effective_input(&self) -> Vector3<f64> {
        let dt = self.sim.config().dt;
        let w = input_weight(self.steps - self.input_step, ticks(self.hold, dt), ticks(self.fade, dt));
        self.u_h * w
    }

    /// Current state without advancing.
    pub fn snapshot(&self) -> Result<Frame, SimError> {
        Ok(Frame::from(&self.sim.observe(&self.effective_input())?))
    }

    pub fn advance(&mut self) -> Result<Frame, SimError> {
        let record = self.sim.step(&self.effective_input())?;
        self.steps += 1;
        Ok(Frame::from(&record))
    }
}

/// Re-runs a logged session and returns every frame it streamed.
pub fn replay(model: &Model, log: &SessionLog) -> Result<Vec<Frame>, SimError> {
    let mut core = SessionCore::new(model, log.dt, log.hold, log.fade, &log.options)?;
    let mut events = log.events.iter().peekable();
    let mut frames = Vec::with_capacity(log.steps as usize);
    for step in 0..log.steps {
        while let Some(e) = events.next_if(|e| e.step == step) {
            core.apply(&e.event)?;
        }
        frames.push(core.advance()?);
    }
    Ok(frames)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Running,
    Paused,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRequest {
    pub u_h: [f64; 3],
    #[serde(default)]
    pub speed_scale: Option<f64>,
    #[serde(default)]
    pub filter_on: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputAck {
    /// Tick of the first frame that uses the input.
    pub tick: u64,
    pub u_h: [f64; 3],
    pub clamped: bool,
    pub speed_scale: f64,
    pub filter_on: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlAck {
    pub state: RunState,
    pub tick: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub id: String,
    pub model: String,
    pub state: RunState,
    pub dt: f64,
    pub u_max: f64,
    pub frame: Frame,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateRequest {
    #[serde(default = "default_model_id")]
    pub model: String,
    #[serde(default)]
    pub config: SessionOptions,
}

fn default_model_id() -> String {
    "default".into()
}

#[derive(Debug)]
pub enum ApiError {
    UnknownModel(String),
    UnknownSession(String),
    BadRequest(String),
    Stopped,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, msg) = match self {
            ApiError::UnknownModel(m) => (StatusCode::NOT_FOUND, format!("unknown model {m:?}")),
            ApiError::UnknownSession(s) => (StatusCode::NOT_FOUND, format!("unknown session {s:?}")),
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, m),
            ApiError::Stopped => (StatusCode::INTERNAL_SERVER_ERROR, "session loop stopped".into()),
        };
        (status, Json(serde_json::json!({ "error": msg }))).into_response()
    }
}

enum Command {
    Input(InputRequest, oneshot::Sender<Result<InputAck, String>>),
    Run(RunState, oneshot::Sender<ControlAck>),
    Reset(oneshot::Sender<ControlAck>),
    State(oneshot::Sender<Result<(RunState, Frame), String>>),
    Log(oneshot::Sender<SessionLog>),
}

struct SessionHandle {
    model: String,
    u_max: f64,
    commands: mpsc::Sender<Command>,
    frames: broadcast::Sender<Frame>,
}

struct ServiceState {
    models: HashMap<String, Model>,
    cfg: ServiceConfig,
    sessions: Mutex<HashMap<String, Arc<SessionHandle>>>,
    next_id: AtomicU64,
}

/// Shared service state; clone freely.
#[derive(Clone)]
pub struct TeleopService {
    inner: Arc<ServiceState>,
}

impl TeleopService {
    pub fn new(models: HashMap<String, Model>, cfg: ServiceConfig) -> Result<Self, String> {
        cfg.validate()?;
        Ok(Self {
            inner: Arc::new(ServiceState {
                models,
                cfg,
                sessions: Mutex::new(HashMap::new()),
                next_id: AtomicU64::new(1),
            }),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.inner.cfg
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/healthz", get(healthz))
            .route("/sessions", post(create_session))
            .route("/sessions/{id}", get(session_state))
            .route("/sessions/{id}/input", post(submit_input))
            .route("/sessions/{id}/start", post(start))
            .route("/sessions/{id}/pause", post(pause))
            .route("/sessions/{id}/reset", post(reset))
            .route("/sessions/{id}/log", get(session_log))
            .route("/sessions/{id}/stream", get(stream))
            .with_state(self.clone())
    }

    /// Serves until `shutdown` resolves.
    pub async fn serve<F>(self, listener: tokio::net::TcpListener, shutdown: F) -> std::io::Result<()>
    where
        F: Future<Output = ()> + Send + 'static,
    {
        axum::serve(listener, self.router()).with_graceful_shutdown(shutdown).await
    }

    fn session(&self, id: &str) -> Result<Arc<SessionHandle>, ApiError> {
        self.inner
            .sessions
            .lock()
            .expect("session table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::UnknownSession(id.to_string()))
    }

    fn create(&self, req: CreateRequest) -> Result<SessionState, ApiError> {
        let model = self
            .inner
            .models
            .get(&req.model)
            .ok_or_else(|| ApiError::UnknownModel(req.model.clone()))?;
        let cfg = &self.inner.cfg;
        let core = SessionCore::new(model, cfg.dt, cfg.hold, cfg.fade, &req.config)
            .map_err(|e| ApiError::BadRequest(e.to_string()))?;
        let frame = core.snapshot().map_err(|e| ApiError::BadRequest(e.to_string()))?;
        let id = format!("s{}", self.inner.next_id.fetch_add(1, Ordering::Relaxed));
        let (cmd_tx, cmd_rx) = mpsc::channel(256);
        let (frame_tx, _) = broadcast::channel(cfg.stream_capacity);
        let log = SessionLog {
            model: req.model.clone(),
            dt: cfg.dt,
            hold: cfg.hold,
            fade: cfg.fade,
            options: req.config,
            events: Vec::new(),
            steps: 0,
        };
        let u_max = core.u_max();
        tokio::spawn(tick_loop(core, log, cfg.tick_period(), cmd_rx, frame_tx.clone()));
        let handle = SessionHandle {
            model: req.model.clone(),
            u_max,
            commands: cmd_tx,
            frames: frame_tx,
        };
        self.inner
            .sessions
            .lock()
            .expect("session table poisoned")
            .insert(id.clone(), Arc::new(handle));
        log::info!("created session {id} on model {}", req.model);
        Ok(SessionState {
            id,
            model: req.model,
            state: RunState::Paused,
            dt: cfg.dt,
            u_max,
            frame,
        })
    }
}

async fn tick_loop(
    mut core: SessionCore,
    mut log: SessionLog,
    period: Duration,
    mut commands: mpsc::Receiver<Command>,
    frames: broadcast::Sender<Frame>,
) {
    let mut state = RunState::Paused;
    let mut ticker = tokio::time::interval(period);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        tokio::select! {
            biased;
            cmd = commands.recv() => {
                let Some(cmd) = cmd else { break };
                match cmd {
                    Command::Input(req, reply) => {
                        let _ = reply.send(apply_input(&mut core, &mut log, req));
                    }
                    Command::Run(next, reply) => {
                        if next == RunState::Running && state == RunState::Paused {
                            ticker.reset();
                        }
                        state = next;
                        let _ = reply.send(ControlAck { state, tick: core.simulator().tick() });
                    }
                    Command::Reset(reply) => {
                        let event = SessionEvent::Reset;
                        core.apply(&event).expect("reset cannot fail");
                        log.events.push(LoggedEvent { step: core.steps(), event });
                        let _ = reply.send(ControlAck { state, tick: core.simulator().tick() });
                    }
                    Command::State(reply) => {
                        let _ = reply.send(core.snapshot().map(|f| (state, f)).map_err(|e| e.to_string()));
                    }
                    Command::Log(reply) => {
                        let _ = reply.send(log.clone());
                    }
                }
            }
            _ = ticker.tick(), if state == RunState::Running => {
                match core.advance() {
                    Ok(frame) => {
                        log.steps = core.steps();
                        let _ = frames.send(frame);
                    }
                    Err(e) => {
                        log::error!("session stopped: {e}");
                        state = RunState::Paused;
                    }
                }
            }
        }
    }
}

fn apply_input(core: &mut SessionCore, log: &mut SessionLog, req: InputRequest) -> Result<InputAck, String> {
    let (u_h, clamped) = core.clamp_input(req.u_h)?;
    if let Some(s) = req.speed_scale {
        if !(s >= 0.0 && s.is_finite()) {
            return Err(format!("speed scale must be nonnegative, got {s}"));
        }
    }
    let event = SessionEvent::Input {
        u_h,
        speed_scale: req.speed_scale,
        filter_on: req.filter_on,
    };
    core.apply(&event).map_err(|e| e.to_string())?;
    log.events.push(LoggedEvent { step: core.steps(), event });
    let cfg = core.simulator().config();
    Ok(InputAck {
        tick: core.simulator().tick(),
        u_h,
        clamped,
        speed_scale: cfg.speed_scale,
        filter_on: cfg.filter_on,
    })
}

async fn request<T>(
    handle: &SessionHandle,
    make: impl FnOnce(oneshot::Sender<T>) -> Command,
) -> Result<T, ApiError> {
    let (tx, rx) = oneshot::channel();
    handle.commands.send(make(tx)).await.map_err(|_| ApiError::Stopped)?;
    rx.await.map_err(|_| ApiError::Stopped)
}

async fn healthz(State(svc): State<TeleopService>) -> Json<serde_json::Value> {
    let sessions = svc.inner.sessions.lock().expect("session table poisoned").len();
    Json(serde_json::json!({ "status": "ok", "sessions": sessions }))
}

async fn create_session(
    State(svc): State<TeleopService>,
    body: Option<Json<CreateRequest>>,
) -> Result<(StatusCode, Json<SessionState>), ApiError> {
    let req = body.map(|Json(r)| r).unwrap_or(CreateRequest {
        model: default_model_id(),
        config: SessionOptions::default(),
    });
    Ok((StatusCode::CREATED, Json(svc.create(req)?)))
}

async fn session_state(State(svc): State<TeleopService>, Path(id): Path<String>) -> Result<Json<SessionState>, ApiError> {
    let handle = svc.session(&id)?;
    let (state, frame) = request(&handle, Command::State).await?.map_err(ApiError::BadRequest)?;
    Ok(Json(SessionState {
        id,
        model: handle.model.clone(),
        state,
        dt: svc.inner.cfg.dt,
        u_max: handle.u_max,
        frame,
    }))
}

async fn submit_input(
    State(svc): State<TeleopService>,
    Path(id): Path<String>,
    Json(req): Json<InputRequest>,
) -> Result<Json<InputAck>, ApiError> {
    let handle = svc.session(&id)?;
    let ack = request(&handle, |tx| Command::Input(req, tx))
        .await?
        .map_err(ApiError::BadRequest)?;
    Ok(Json(ack))
}

async fn start(State(svc): State<TeleopService>, Path(id): Path<String>) -> Result<Json<ControlAck>, ApiError> {
    let handle = svc.session(&id)?;
    Ok(Json(request(&handle, |tx| Command::Run(RunState::Running, tx)).await?))
}

async fn pause(State(svc): State<TeleopService>, Path(id): Path<String>) -> Result<Json<ControlAck>, ApiError> {
    let handle = svc.session(&id)?;
    Ok(Json(request(&handle, |tx| Command::Run(RunState::Paused, tx)).await?))
}

async fn reset(State(svc): State<TeleopService>, Path(id): Path<String>) -> Result<Json<ControlAck>, ApiError> {
    let handle = svc.session(&id)?;
    Ok(Json(request(&handle, Command::Reset).await?))
}

async fn session_log(State(svc): State<TeleopService>, Path(id): Path<String>) -> Result<Json<SessionLog>, ApiError> {
    let handle = svc.session(&id)?;
    Ok(Json(request(&handle, Command::Log).await?))
}

async fn stream(
    State(svc): State<TeleopService>,
    Path(id): Path<String>,
    ws: WebSocketUpgrade,
) -> Result<Response, ApiError> {
    let handle = svc.session(&id)?;
    let rx = handle.frames.subscribe();
    Ok(ws.on_upgrade(move |socket| forward_frames(socket, rx)))
}

async fn forward_frames(mut socket: WebSocket, mut rx: broadcast::Receiver<Frame>) {
    loop {
        tokio::select! {
            frame = rx.recv() => match frame {
                Ok(frame) => {
                    let text = serde_json::to_string(&frame).expect("frame serializes");
                    if socket.send(Message::Text(text.into())).await.is_err() {
                        break;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    log::warn!("stream subscriber lagged by {n} frames");
                }
                Err(broadcast::error::RecvError::Closed) => break,
            },
            msg = socket.recv() => match msg {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => {}
            },
        }
    }
}
