//! Batch runner for transport-inequality experiments: reads a TOML config,
//! runs the coupled-pair harness and writes reports, path bundles and a
//! manifest.

pub mod config;

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use rtci_core::bundle::{BundleFile, TimeGrid};
use rtci_core::dynamics;
use rtci_core::rng::derive_seed;
use rtci_core::tci::{self, ConcentrationTable, PathFunctional, TciReport};
use rtci_core::ErrorClass;

pub use config::{ExperimentConfig, Scenario};

/// Environment variable capping the number of worker threads.
pub const WORKERS_ENV: &str = "RTCI_WORKERS";
/// Column documentation shipped next to every CSV report.
pub const REPORT_SCHEMA: &str = include_str!("../schema/report.schema.json");

pub const LOCK_FILE: &str = ".rtci.lock";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("{0}")]
    Core(#[from] rtci_core::Error),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("output directory {0} is locked by another run")]
    Locked(PathBuf),
    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl CliError {
    /// 0 success, 2 config error, 3 hypothesis violation, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config { .. } | Self::Io { .. } | Self::Locked(_) => 2,
            Self::Core(e) => match e.class() {
                ErrorClass::Input => 2,
                ErrorClass::Hypothesis => 3,
                ErrorClass::Numerical => 4,
            },
            Self::CheckFailed(_) => 4,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

/// Worker count from the environment, if set.
pub fn workers_from_env() -> Result<Option<usize>, CliError> {
    match std::env::var(WORKERS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Config { field: WORKERS_ENV.into(), message: format!("expected a positive integer, got {v:?}") }),
        },
    }
}

/// Run `f` on a pool of `workers` threads (the global pool when `None`).
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match workers {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("thread pool")
            .install(f),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Lock(PathBuf);

impl Lock {
    fn acquire(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(dir.to_path_buf())),
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ArtifactEntry {
    pub file: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub scenario: String,
    pub config_sha256: String,
    pub code_version: String,
    pub seed: u64,
    pub wall_clock_seconds: f64,
    pub artifacts: Vec<ArtifactEntry>,
}

/// Outcome of `run`.
#[derive(Debug)]
pub struct RunOutcome {
    pub output: PathBuf,
    pub report: TciReport,
    pub manifest: Manifest,
}

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_SCHEMA_FILE: &str = "report.schema.json";
pub const BUNDLE_FILE: &str = "paths.rtci";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn load_config(path: &Path) -> Result<(ExperimentConfig, Vec<u8>), CliError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| CliError::Config { field: "config".into(), message: e.to_string() })?;
    Ok((ExperimentConfig::parse(text)?, bytes))
}

/// Run the experiment in `config_path`, writing into `output` (or the
/// directory named in the config).
pub fn run(config_path: &Path, output: Option<&Path>) -> Result<RunOutcome, CliError> {
    let started = Instant::now();
    let (config, raw) = load_config(config_path)?;
    let scenario = config.build()?;
    let dir = match (output, &config.output) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(o)) => config_path.parent().unwrap_or(Path::new(".")).join(o),
        (None, None) => {
            return Err(CliError::Config { field: "output".into(), message: "no output directory given".into() })
        }
    };
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let _lock = Lock::acquire(&dir)?;

    let report = tci::verify_tci(&scenario.name, &scenario.system, &scenario.gammas, &scenario.options)?;
    let mut files: Vec<(&str, Vec<u8>)> = vec![
        (REPORT_JSON, report.to_json()?.into_bytes()),
        (REPORT_CSV, report.to_csv()?.into_bytes()),
        (REPORT_SCHEMA_FILE, REPORT_SCHEMA.as_bytes().to_vec()),
    ];
    if scenario.bundle.write && scenario.bundle.paths > 0 {
        files.push((BUNDLE_FILE, sample_bundle(&scenario)?.to_bytes()?));
    }
    let mut artifacts = Vec::new();
    for (name, bytes) in &files {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(io_err(&path))?;
        artifacts.push(ArtifactEntry { file: name.to_string(), bytes: bytes.len(), sha256: sha256_hex(bytes) });
    }
    let manifest = Manifest {
        scenario: scenario.name.clone(),
        config_sha256: sha256_hex(&raw),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: scenario.options.seed,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        artifacts,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(RunOutcome { output: dir, report, manifest })
}

/// Unperturbed sample paths of the scenario, with local time when the
/// system reflects.
fn sample_bundle(scenario: &Scenario) -> Result<BundleFile, CliError> {
    let prepared = scenario.system.prepare(scenario.options.horizon)?;
    let grid = TimeGrid::new(scenario.options.horizon, scenario.options.dt)?;
    let seed = derive_seed(scenario.options.seed, 0xB0D1E);
    let (bundle, traces) = dynamics::simulate_bundle(prepared.dynamics(), grid, scenario.bundle.paths, seed, None)?;
    let localtime = matches!(scenario.system, tci::System::Reflected(_) | tci::System::Ranked { .. })
        .then(|| traces.iter().flat_map(|t| t.localtime.iter().copied()).collect());
    Ok(BundleFile { bundle, localtime })
}

/// Human-readable summary of an RTCI file.
pub fn inspect(path: &Path) -> Result<String, CliError> {
    let mut f = File::open(path).map_err(io_err(path))?;
    let file = BundleFile::read_from(&mut f)?;
    Ok(describe(&file))
}

pub fn describe(file: &BundleFile) -> String {
    let b = &file.bundle;
    let mut s = String::new();
    let grid = b.grid();
    s.push_str(&format!("format    RTCI v{}\n", rtci_core::bundle::FORMAT_VERSION));
    s.push_str(&format!("dimension {}\n", b.dim()));
    s.push_str(&format!("steps     {}\n", b.steps()));
    s.push_str(&format!("paths     {}\n", b.num_paths()));
    s.push_str(&format!("dt        {}\n", grid.dt));
    s.push_str(&format!("horizon   {}\n", grid.horizon()));
    s.push_str(&format!("seed      {}\n", b.seed()));
    s.push_str(&format!("localtime {}\n", if file.localtime.is_some() { "yes" } else { "no" }));
    s.push_str("coord  mean_T  variance_T\n");
    for k in 0..b.dim() {
        let m = b.marginal(b.steps(), k);
        let (mean, _) = rtci_core::stats::mean_and_stderr(&m);
        s.push_str(&format!("{k}  {mean}  {}\n", rtci_core::stats::variance(&m)));
    }
    if let Some(gaps) = b.ranked_gap_minima() {
        s.push_str("ranked bundle: gap minima\n");
        for (k, g) in gaps.iter().enumerate() {
            s.push_str(&format!("gap {k}  {g}\n"));
        }
    }
    if let Some(lt) = &file.localtime {
        let n = b.steps() + 1;
        let total: f64 = lt.chunks(n).map(|c| c[n - 1]).sum();
        s.push_str(&format!("mean local time at T  {}\n", total / b.num_paths() as f64));
    }
    s
}

/// CSV table of constants: closed form against the quadrature route.
pub fn constants_table(norm_a: f64, bounds: &[f64], horizons: &[f64]) -> Result<String, CliError> {
    use rtci_core::reflect::OneSidedBound;
    use rtci_core::tci::{constant_closed_form, tci_constant_numeric, TciConstantSpec};
    let mut s = String::from("norm_a,F,T,closed_form,quadrature,abs_diff\n");
    for &f in bounds {
        for &t in horizons {
            let closed = constant_closed_form(norm_a, f, t);
            let spec = TciConstantSpec::new(norm_a, OneSidedBound::function(move |_| f), t)?;
            let numeric = tci_constant_numeric(&spec)?;
            s.push_str(&format!("{norm_a},{f},{t},{closed},{numeric},{}\n", (closed - numeric).abs()));
        }
    }
    Ok(s)
}

/// Tail table for `functional` under the unperturbed law of the config's
/// system. `r` values are multiples of `√T`.
pub fn concentration(
    config_path: &Path,
    functional: &PathFunctional,
    r_multiples: &[f64],
) -> Result<ConcentrationTable, CliError> {
    let (config, _) = load_config(config_path)?;
    let scenario = config.build()?;
    let o = &scenario.options;
    let r: Vec<f64> = r_multiples.iter().map(|m| m * o.horizon.sqrt()).collect();
    Ok(tci::concentration_tail(&scenario.system, functional, &r, o.horizon, o.dt, o.paths, o.seed)?)
}
