//! JSON configuration: schema with every default materialized, duplicate-key
//! rejection, and content hashing for reproducible run directories.

use geoflow_core::experiments::{DataSpec, ProbeNorm, ShellProfile, SweepSystem};
use geoflow_core::lp::NormRequest;
use geoflow_core::timestep::DtPolicy;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Run,
    Sweep,
    Probe,
    Norms,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    #[serde(default = "d_grid_n")]
    pub n: usize,
    #[serde(default = "d_period")]
    pub period: f64,
    #[serde(default = "d_dealias")]
    pub dealias_fraction: f64,
    /// Horizontal resolution of the 2D limit grid (defaults to `n`).
    #[serde(default)]
    pub n2: Option<usize>,
}

fn d_grid_n() -> usize {
    32
}

fn d_period() -> f64 {
    2.0 * std::f64::consts::PI
}

fn d_dealias() -> f64 {
    2.0 / 3.0
}

impl Default for GridBlock {
    fn default() -> Self {
        GridBlock { n: d_grid_n(), period: d_period(), dealias_fraction: d_dealias(), n2: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicsBlock {
    #[serde(default = "d_one")]
    pub nu: f64,
    #[serde(default = "d_one")]
    pub nu_prime: f64,
    #[serde(default = "d_froude")]
    pub froude: f64,
}

fn d_one() -> f64 {
    1.0
}

fn d_froude() -> f64 {
    2.0
}

impl Default for PhysicsBlock {
    fn default() -> Self {
        PhysicsBlock { nu: 1.0, nu_prime: 1.0, froude: d_froude() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataBlock {
    #[serde(default = "d_delta")]
    pub delta: f64,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_one")]
    pub alpha0: f64,
    #[serde(default = "d_one")]
    pub c0: f64,
    #[serde(default = "d_clow")]
    pub c_lowfreq: f64,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_shell")]
    pub shell: ShellProfile,
    #[serde(default = "d_shell_base")]
    pub shell_base: f64,
}

fn d_delta() -> f64 {
    1.0 / 6.0
}

fn d_gamma() -> f64 {
    1.0 / 24.0
}

fn d_clow() -> f64 {
    0.9
}

fn d_seed() -> u64 {
    7
}

fn d_shell() -> ShellProfile {
    ShellProfile::SingleShell
}

fn d_shell_base() -> f64 {
    0.5
}

impl Default for DataBlock {
    fn default() -> Self {
        DataBlock {
            delta: d_delta(),
            gamma: d_gamma(),
            alpha0: 1.0,
            c0: 1.0,
            c_lowfreq: d_clow(),
            seed: d_seed(),
            shell: d_shell(),
            shell_base: d_shell_base(),
        }
    }
}

impl DataBlock {
    pub fn to_spec(&self) -> DataSpec {
        DataSpec {
            delta: self.delta,
            gamma: self.gamma,
            alpha0: self.alpha0,
            c0: self.c0,
            c_lowfreq: self.c_lowfreq,
            seed: self.seed,
            shell: self.shell,
            shell_base: self.shell_base,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleBlock {
    #[serde(default = "d_t_end")]
    pub t_end: f64,
    #[serde(default = "d_dt_policy")]
    pub dt: DtPolicy,
    #[serde(default = "d_observe")]
    pub observe_every: usize,
    /// Sweep runs use `min(dt_base, eps_dt_fraction * eps)` as fixed step.
    #[serde(default = "d_dt_base")]
    pub dt_base: f64,
    #[serde(default = "d_eps_frac")]
    pub eps_dt_fraction: f64,
    #[serde(default)]
    pub snapshot_every: Option<usize>,
}

fn d_t_end() -> f64 {
    0.5
}

fn d_dt_policy() -> DtPolicy {
    DtPolicy::Cfl { c: 0.5, dt_max: 0.05 }
}

fn d_observe() -> usize {
    1
}

fn d_dt_base() -> f64 {
    5e-3
}

fn d_eps_frac() -> f64 {
    0.25
}

impl Default for ScheduleBlock {
    fn default() -> Self {
        ScheduleBlock {
            t_end: d_t_end(),
            dt: d_dt_policy(),
            observe_every: d_observe(),
            dt_base: d_dt_base(),
            eps_dt_fraction: d_eps_frac(),
            snapshot_every: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunRoute {
    PeCoupled,
    PeDirect,
    RfCoupled,
    Ns2d,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunBlock {
    pub route: RunRoute,
    #[serde(default = "d_eps")]
    pub eps: f64,
}

fn d_eps() -> f64 {
    1e-2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    pub system: SweepSystem,
    pub eps_list: Vec<f64>,
    #[serde(default = "d_s_list")]
    pub s_list: Vec<f64>,
    #[serde(default)]
    pub eta_prime: Option<f64>,
}

fn d_s_list() -> Vec<f64> {
    vec![0.5]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeBlock {
    pub system: SweepSystem,
    pub eps_list: Vec<f64>,
    #[serde(default = "d_shell_j")]
    pub shell_j: i32,
    #[serde(default = "d_samples")]
    pub num_samples: usize,
    #[serde(default)]
    pub t_max: Option<f64>,
    pub norms: Vec<ProbeNorm>,
}

fn d_shell_j() -> i32 {
    1
}

fn d_samples() -> usize {
    48
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormsBlock {
    pub snapshots: Vec<String>,
    pub requests: Vec<NormRequest>,
}

/// Complete configuration; every field is materialized before it is written
/// out as the manifest, so re-running a manifest reproduces the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub command: Command,
    #[serde(default)]
    pub grid: GridBlock,
    #[serde(default)]
    pub physics: PhysicsBlock,
    #[serde(default)]
    pub data: DataBlock,
    #[serde(default)]
    pub schedule: ScheduleBlock,
    #[serde(default)]
    pub run: Option<RunBlock>,
    #[serde(default)]
    pub sweep: Option<SweepBlock>,
    #[serde(default)]
    pub probe: Option<ProbeBlock>,
    #[serde(default)]
    pub norms: Option<NormsBlock>,
    #[serde(default)]
    pub output: Option<String>,
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Reject duplicate keys anywhere in the document (serde silently keeps the
/// last occurrence otherwise).
fn check_duplicate_keys(value: &serde_json::Value, path: &str, raw: &str) -> Result<(), ConfigError> {
    // serde_json's Map already deduplicates, so scan the raw text instead:
    // re-serialize canonically and compare key counts per object via a tiny
    // tokenizer pass.
    let _ = value;
    let mut depth_keys: Vec<Vec<String>> = Vec::new();
    let mut chars = raw.chars().peekable();
    let mut in_string = false;
    let mut escaped = false;
    let mut current = String::new();
    let mut last_string: Option<String> = None;
    let mut expecting_key = false;
    while let Some(c) = chars.next() {
        if in_string {
            if escaped {
                escaped = false;
                current.push(c);
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
                last_string = Some(current.clone());
            } else {
                current.push(c);
            }
            continue;
        }
        match c {
            '"' => {
                in_string = true;
                current.clear();
            }
            '{' => {
                depth_keys.push(Vec::new());
                expecting_key = true;
                last_string = None;
            }
            '}' => {
                depth_keys.pop();
                expecting_key = false;
                last_string = None;
            }
            '[' | ']' => {
                last_string = None;
            }
            ':' => {
                if expecting_key {
                    if let (Some(key), Some(keys)) = (last_string.take(), depth_keys.last_mut()) {
                        if keys.contains(&key) {
                            return Err(ConfigError(format!("duplicate key {key:?} in {path}")));
                        }
                        keys.push(key);
                    }
                    expecting_key = false;
                }
            }
            ',' => {
                if !depth_keys.is_empty() {
                    expecting_key = true;
                }
                last_string = None;
            }
            _ => {}
        }
    }
    Ok(())
}

/// Parse and validate a configuration from JSON text.
pub fn parse_config(text: &str) -> Result<Config, ConfigError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| ConfigError(format!("invalid JSON: {e}")))?;
    check_duplicate_keys(&value, "config", text)?;
    let cfg: Config =
        serde_json::from_value(value).map_err(|e| ConfigError(format!("schema violation: {e}")))?;
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &Config) -> Result<(), ConfigError> {
    let d = &cfg.data;
    if !(d.delta > 0.0) {
        return Err(ConfigError(format!("data.delta must be positive, got {}", d.delta)));
    }
    if !(d.gamma > 0.0 && d.gamma < 0.5 * d.delta) {
        return Err(ConfigError(format!(
            "data.gamma must satisfy 0 < gamma < delta/2 = {}, got {}",
            0.5 * d.delta,
            d.gamma
        )));
    }
    if !(d.alpha0 > 0.0) {
        return Err(ConfigError("data.alpha0 must be positive".into()));
    }
    if !(d.c0 >= 1.0) {
        return Err(ConfigError(format!("data.c0 must be at least 1, got {}", d.c0)));
    }
    if !(d.c_lowfreq > 0.0 && d.c_lowfreq < 1.0) {
        return Err(ConfigError(format!(
            "data.c_lowfreq must lie in (0, 1), got {}",
            d.c_lowfreq
        )));
    }
    if cfg.grid.n < 8 || cfg.grid.n % 2 != 0 {
        return Err(ConfigError(format!(
            "grid.n must be even and at least 8, got {}",
            cfg.grid.n
        )));
    }
    if !(cfg.grid.dealias_fraction > 0.0 && cfg.grid.dealias_fraction <= 1.0) {
        return Err(ConfigError(format!(
            "grid.dealias_fraction must lie in (0, 1], got {}",
            cfg.grid.dealias_fraction
        )));
    }
    for (name, v) in [("physics.nu", cfg.physics.nu), ("physics.nu_prime", cfg.physics.nu_prime), ("physics.froude", cfg.physics.froude)] {
        if !(v > 0.0) {
            return Err(ConfigError(format!("{name} must be positive, got {v}")));
        }
    }
    match cfg.command {
        Command::Run => {
            if cfg.run.is_none() {
                return Err(ConfigError("command \"run\" needs a run block".into()));
            }
        }
        Command::Sweep => match &cfg.sweep {
            None => return Err(ConfigError("command \"sweep\" needs a sweep block".into())),
            Some(s) if s.eps_list.len() < 3 => {
                return Err(ConfigError("sweep.eps_list needs at least 3 points".into()))
            }
            _ => {}
        },
        Command::Probe => match &cfg.probe {
            None => return Err(ConfigError("command \"probe\" needs a probe block".into())),
            Some(p) if p.eps_list.len() < 3 => {
                return Err(ConfigError("probe.eps_list needs at least 3 points".into()))
            }
            Some(p) if p.norms.is_empty() => {
                return Err(ConfigError("probe.norms must not be empty".into()))
            }
            _ => {}
        },
        Command::Norms => match &cfg.norms {
            None => return Err(ConfigError("command \"norms\" needs a norms block".into())),
            Some(n) if n.snapshots.is_empty() => {
                return Err(ConfigError("norms.snapshots must not be empty".into()))
            }
            Some(n) if n.requests.is_empty() => {
                return Err(ConfigError("norms.requests must not be empty".into()))
            }
            _ => {}
        },
    }
    Ok(())
}

/// Canonical manifest text (fixed field order, shortest-roundtrip floats).
pub fn manifest_text(cfg: &Config) -> String {
    serde_json::to_string_pretty(cfg).expect("config serializes")
}

/// Content hash of the resolved configuration; names the run directory.
pub fn content_hash(cfg: &Config) -> String {
    let mut h = Sha256::new();
    h.update(manifest_text(cfg).as_bytes());
    let digest = h.finalize();
    let mut out = String::new();
    for b in digest.iter().take(8) {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
