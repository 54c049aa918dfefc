use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use safeflow::dataset::{self, DatasetFormat, ValidationConfig};
use safeflow::fixtures::{demonstration_set, FixtureConfig, Shape};
use safeflow::lwr::LwrConfig;
use safeflow::manifest::{write_file, RunManifest};
use safeflow::model::{learn, LearnConfig, Model};
use safeflow::sim::{axis_angles, run, PerturbationProfile, SimConfig, SimTrace};
use safeflow::teleop::{ServiceConfig, TeleopService};
use safeflow::{Error, Rotation};

#[derive(Parser)]
#[command(name = "safeflow", version, about = "Learn, constrain and simulate orientation dynamical systems")]
struct Cli {
    /// JSON object of option values keyed by flag name; a run manifest is
    /// also accepted. Flags given on the command line take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the rotational DS and the cone-angle model to demonstrations.
    Learn(LearnArgs),
    /// Roll out the reference/executor pair under the perturbation protocol.
    Simulate(SimulateArgs),
    /// Summarize traces: NACV mean ± std and per-axis angle series.
    Evaluate(EvaluateArgs),
    /// Run the teleoperation service.
    Serve(ServeArgs),
    /// Write a synthetic demonstration set (L, N or W).
    Fixture(FixtureArgs),
}

#[derive(Args)]
struct LearnArgs {
    /// Demonstration file (JSON).
    dataset: PathBuf,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    opts: LearnOptions,
}

#[derive(Args, Serialize, Deserialize, Clone, Default)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct LearnOptions {
    /// Mixture components K [default: 8]
    #[arg(long, short = 'k')]
    components: Option<usize>,
    /// Distance grid intervals M [default: 100]
    #[arg(long)]
    grid: Option<usize>,
    /// Local polynomial degree of the angle regression [default: 5]
    #[arg(long)]
    lwr_degree: Option<usize>,
    /// Kernels J of the angle regression [default: 10]
    #[arg(long)]
    lwr_kernels: Option<usize>,
    /// Cone angle floor in rad [default: 0.01]
    #[arg(long)]
    floor: Option<f64>,
    /// Mixture initialization seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

impl LearnOptions {
    fn resolved(self) -> Self {
        let d = LearnConfig::default();
        Self {
            components: self.components.or(Some(d.components)),
            grid: self.grid.or(Some(d.grid_intervals)),
            lwr_degree: self.lwr_degree.or(Some(d.lwr.degree)),
            lwr_kernels: self.lwr_kernels.or(Some(d.lwr.kernels)),
            floor: self.floor.or(Some(d.angle_floor)),
            seed: self.seed.or(Some(d.seed)),
        }
    }

    fn to_config(&self) -> Result<LearnConfig, Error> {
        let r = self.clone().resolved();
        let cfg = LearnConfig {
            components: r.components.unwrap(),
            grid_intervals: r.grid.unwrap(),
            lwr: LwrConfig {
                degree: r.lwr_degree.unwrap(),
                kernels: r.lwr_kernels.unwrap(),
                ..LwrConfig::default()
            },
            angle_floor: r.floor.unwrap(),
            seed: r.seed.unwrap(),
        };
        if cfg.components == 0 {
            return Err(Error::Usage("--components must be at least 1".into()));
        }
        if cfg.grid_intervals < 2 {
            return Err(Error::Usage("--grid must be at least 2".into()));
        }
        if cfg.lwr.kernels == 0 {
            return Err(Error::Usage("--lwr-kernels must be at least 1".into()));
        }
        if !(cfg.angle_floor > 0.0 && cfg.angle_floor < std::f64::consts::FRAC_PI_2) {
            return Err(Error::Usage("--floor must lie in (0, π/2)".into()));
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Model file.
    model: PathBuf,
    /// Output prefix; writes PREFIX.csv, PREFIX.json and PREFIX.manifest.json.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    opts: SimulateOptions,
}

#[derive(Args, Serialize, Deserialize, Clone, Default)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct SimulateOptions {
    /// Time step in s [default: 0.003]
    #[arg(long)]
    dt: Option<f64>,
    /// Duration in s [default: 12]
    #[arg(long)]
    duration: Option<f64>,
    /// Perturbation onset in s [default: 1.5]
    #[arg(long)]
    perturb_onset: Option<f64>,
    /// Perturbation rise time in s [default: 0.5]
    #[arg(long)]
    perturb_dur: Option<f64>,
    /// Perturbation amplitude "x,y,z" in rad/s [default: 0,2,0]
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    perturb_amp: Option<[f64; 3]>,
    /// Disable the safety filter.
    #[arg(long)]
    #[serde(default)]
    no_filter: bool,
    /// Barrier gain γ in 1/s [default: 10]
    #[arg(long)]
    alpha_gain: Option<f64>,
    /// Componentwise velocity bound in rad/s [default: 5]
    #[arg(long)]
    u_max: Option<f64>,
    /// Recorded in the manifest; the rollout itself is deterministic [default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

const DEFAULT_DURATION: f64 = 12.0;

impl SimulateOptions {
    fn resolved(self) -> Self {
        let p = PerturbationProfile::default();
        let f = safeflow::filter::FilterConfig::default();
        Self {
            dt: self.dt.or(Some(f.dt)),
            duration: self.duration.or(Some(DEFAULT_DURATION)),
            perturb_onset: self.perturb_onset.or(Some(p.onset)),
            perturb_dur: self.perturb_dur.or(Some(p.duration)),
            perturb_amp: self.perturb_amp.or(Some(p.amplitude)),
            no_filter: self.no_filter,
            alpha_gain: self.alpha_gain.or(Some(f.alpha_gain)),
            u_max: self.u_max.or(Some(f.u_max)),
            seed: self.seed.or(Some(0)),
        }
    }

    fn to_config(&self, start: Rotation) -> Result<SimConfig, Error> {
        let r = self.clone().resolved();
        let mut cfg = SimConfig::new(start, r.duration.unwrap());
        cfg.dt = r.dt.unwrap();
        cfg.perturbation = PerturbationProfile {
            onset: r.perturb_onset.unwrap(),
            duration: r.perturb_dur.unwrap(),
            amplitude: r.perturb_amp.unwrap(),
        };
        cfg.filter_on = !r.no_filter;
        cfg.filter.alpha_gain = r.alpha_gain.unwrap();
        cfg.filter.u_max = r.u_max.unwrap();
        cfg.validate().map_err(|e| Error::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct EvaluateArgs {
    /// Trace files written by `simulate` (PREFIX.json).
    traces: Vec<PathBuf>,
    /// Optional CSV of per-axis angles and bounds for every trace.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    /// Model file.
    model: PathBuf,
    #[command(flatten)]
    opts: ServeOptions,
}

#[derive(Args, Serialize, Deserialize, Clone, Default)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct ServeOptions {
    /// Port to listen on [default: 8080]
    #[arg(long)]
    port: Option<u16>,
    /// Address to bind [default: 127.0.0.1]
    #[arg(long)]
    host: Option<String>,
    /// Simulation step in s [default: 0.003]
    #[arg(long)]
    dt: Option<f64>,
    /// Simulated seconds per wall-clock second [default: 1]
    #[arg(long)]
    rate: Option<f64>,
}

#[derive(Args)]
struct FixtureArgs {
    /// Shape: L, N or W.
    shape: Shape,
    /// Demonstration file to write.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    opts: FixtureOptions,
}

#[derive(Args, Serialize, Deserialize, Clone, Default)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct FixtureOptions {
    /// Jitter seed [default: 7]
    #[arg(long)]
    seed: Option<u64>,
    /// Number of demonstrations [default: 5]
    #[arg(long)]
    demos: Option<usize>,
}

fn parse_vec3(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated values, got {s:?}"));
    }
    let mut out = [0.0f64; 3];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = p.parse().map_err(|e| format!("{p:?}: {e}"))?;
        if !o.is_finite() {
            return Err(format!("{p:?} is not finite"));
        }
    }
    Ok(out)
}

/// Option values from `--config`: a flat object, or the `config` field of
/// a run manifest.
fn load_config(path: Option<&Path>) -> Result<Option<Map<String, Value>>, Error> {
    let Some(path) = path else { return Ok(None) };
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let value: Value = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let obj = match value {
        Value::Object(mut m) if m.contains_key("command") && m.contains_key("config") => m.remove("config"),
        other => Some(other),
    };
    match obj {
        Some(Value::Object(m)) => Ok(Some(m)),
        _ => Err(Error::Usage(format!("{}: config must be a JSON object", path.display()))),
    }
}

/// Command-line values override file values; unset flags fall through.
fn merge<T: Serialize + DeserializeOwned>(cli: &T, file: Option<&Map<String, Value>>) -> Result<T, Error> {
    let mut merged = file.cloned().unwrap_or_default();
    if let Value::Object(m) = serde_json::to_value(cli).expect("options serialize") {
        for (k, v) in m {
            if !(v.is_null() || v == Value::Bool(false)) {
                merged.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| Error::Usage(format!("config: {e}")))
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn manifest_path(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

fn cmd_learn(args: LearnArgs, file: Option<&Map<String, Value>>) -> Result<(), Error> {
    let opts = merge(&args.opts, file)?;
    let cfg = opts.to_config()?;
    let set = dataset::load(&args.dataset, DatasetFormat::Json, &ValidationConfig::default())?;
    let model = learn(&set, &cfg)?;
    write_file(&args.out, model.to_json().as_bytes())?;

    let report = model.report.expect("fresh model has a report");
    println!("components        {} (requested {})", report.components, report.requested_components);
    println!("DS rms residual   {:.6} rad/s", report.matrices.rms_residual);
    println!("K=1 rms residual  {:.6} rad/s", report.matrices.single_matrix_rms_residual);
    println!("cone rmse         {:.6} rad", report.cones.rmse);
    println!("cone max residual {:.6} rad", report.cones.max_abs_residual);

    let resolved = opts.resolved();
    let mut manifest = RunManifest::new("learn", serde_json::to_value(&resolved).unwrap(), cfg.seed);
    manifest.input(&args.dataset)?;
    manifest.output(&args.out)?;
    manifest.write(&manifest_path(&args.out))
}

fn cmd_simulate(args: SimulateArgs, file: Option<&Map<String, Value>>) -> Result<(), Error> {
    let opts = merge(&args.opts, file)?;
    let model = Model::load(&args.model)?;
    let cfg = opts.to_config(model.start)?;
    let trace = run(&cfg, model.ds.clone(), model.cones.clone())?;

    let csv_path = with_suffix(&args.out, ".csv");
    let json_path = with_suffix(&args.out, ".json");
    let mut csv = Vec::new();
    trace.write_csv(&mut csv)?;
    write_file(&csv_path, &csv)?;
    write_file(&json_path, trace.to_json().as_bytes())?;

    let s = &trace.summary;
    println!("records          {}", s.records);
    println!("NACV             {:.6}", s.nacv);
    println!("final error      {:.3e} rad", s.final_error);
    println!("min h            {:.3e}", s.min_h);
    println!("infeasible steps {}", s.infeasible_steps);

    let resolved = opts.resolved();
    let seed = resolved.seed.unwrap();
    let mut manifest = RunManifest::new("simulate", serde_json::to_value(&resolved).unwrap(), seed);
    manifest.input(&args.model)?;
    manifest.output(&csv_path)?;
    manifest.output(&json_path)?;
    manifest.write(&with_suffix(&args.out, ".manifest.json"))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), Error> {
    if args.traces.is_empty() {
        return Err(Error::Usage("evaluate needs at least one trace".into()));
    }
    let mut traces = Vec::new();
    for path in &args.traces {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
        let trace = SimTrace::from_json(&text).map_err(|e| Error::Format(format!("{}: not a trace: {e}", path.display())))?;
        traces.push(trace);
    }

    println!("{:<32} {:>10} {:>12} {:>12} {:>10}", "trace", "NACV", "final_err", "min_h", "infeasible");
    for (path, t) in args.traces.iter().zip(&traces) {
        let s = &t.summary;
        println!(
            "{:<32} {:>10.3} {:>12.3e} {:>12.3e} {:>10}",
            path.display(),
            s.nacv,
            s.final_error,
            s.min_h,
            s.infeasible_steps
        );
    }
    let nacv: Vec<f64> = traces.iter().map(|t| t.summary.nacv).collect();
    let (mean, std) = mean_std(&nacv);
    println!("NACV {mean:.3} ± {std:.3} (n = {})", nacv.len());

    if let Some(out) = &args.out {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fmt = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(["trace", "t", "phi_1", "theta_1", "phi_2", "theta_2", "phi_3", "theta_3"])
            .map_err(fmt)?;
        for (path, t) in args.traces.iter().zip(&traces) {
            for r in &t.records {
                let phi = axis_angles(&r.r_exc, &r.r_ref);
                let mut row = vec![path.display().to_string(), r.t.to_string()];
                for i in 0..3 {
                    row.push(phi[i].to_string());
                    row.push(r.theta[i].to_string());
                }
                w.write_record(&row).map_err(fmt)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        write_file(out, &bytes)?;
        let mut manifest = RunManifest::new("evaluate", serde_json::json!({}), 0);
        for p in &args.traces {
            manifest.input(p)?;
        }
        manifest.output(out)?;
        manifest.write(&manifest_path(out))?;
    }
    Ok(())
}

fn cmd_serve(args: ServeArgs, file: Option<&Map<String, Value>>) -> Result<(), Error> {
    let opts = merge(&args.opts, file)?;
    let model = Model::load(&args.model)?;
    let defaults = ServiceConfig::default();
    let cfg = ServiceConfig {
        dt: opts.dt.unwrap_or(defaults.dt),
        rate: opts.rate.unwrap_or(defaults.rate),
        ..defaults
    };
    let mut models = HashMap::from([("default".to_string(), model.clone())]);
    if let Some(stem) = args.model.file_stem().and_then(|s| s.to_str()) {
        models.insert(stem.to_string(), model);
    }
    let service = TeleopService::new(models, cfg).map_err(Error::Usage)?;
    let addr = format!("{}:{}", opts.host.as_deref().unwrap_or("127.0.0.1"), opts.port.unwrap_or(8080));

    let runtime = tokio::runtime::Runtime::new().map_err(|e| Error::Environment(format!("runtime: {e}")))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| Error::Environment(format!("cannot listen on {addr}: {e}")))?;
        let local = listener.local_addr().map_err(|e| Error::Environment(e.to_string()))?;
        println!("listening on http://{local}");
        service
            .serve(listener, shutdown_signal())
            .await
            .map_err(|e| Error::Environment(format!("server: {e}")))
    })
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = signal(SignalKind::terminate()).expect("install SIGTERM handler");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
    log::info!("shutting down");
}

fn cmd_fixture(args: FixtureArgs, file: Option<&Map<String, Value>>) -> Result<(), Error> {
    let opts = merge(&args.opts, file)?;
    let defaults = FixtureConfig::default();
    let resolved = FixtureOptions {
        seed: opts.seed.or(Some(7)),
        demos: opts.demos.or(Some(defaults.demos)),
    };
    let cfg = FixtureConfig {
        demos: resolved.demos.unwrap(),
        ..defaults
    };
    if cfg.demos < 2 {
        return Err(Error::Usage("--demos must be at least 2".into()));
    }
    let seed = resolved.seed.unwrap();
    let set = demonstration_set(args.shape, seed, Rotation::identity(), &cfg);
    let text = serde_json::to_string(&set.to_file(true)).expect("demo file serializes");
    write_file(&args.out, text.as_bytes())?;
    let mut manifest = RunManifest::new("fixture", serde_json::to_value(&resolved).unwrap(), seed);
    manifest.output(&args.out)?;
    manifest.write(&manifest_path(&args.out))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SAFEFLOW_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = load_config(cli.config.as_deref()).and_then(|file| match cli.command {
        Command::Learn(a) => cmd_learn(a, file.as_ref()),
        Command::Simulate(a) => cmd_simulate(a, file.as_ref()),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Serve(a) => cmd_serve(a, file.as_ref()),
        Command::Fixture(a) => cmd_fixture(a, file.as_ref()),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
