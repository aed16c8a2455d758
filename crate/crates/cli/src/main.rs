//! `geoflow` command line: run orchestration and artifact layout.
//!
//! One JSON config drives everything; the `command` field selects between
//! `run` (single integration), `sweep` (epsilon convergence rates), `probe`
//! (semigroup decay measurement) and `norms` (norm evaluation on snapshots).
//! Outputs land in a run directory named by the content hash of the fully
//! resolved config, so re-running a manifest reproduces the run bitwise.
//!
//! Exit codes: 0 ok, 2 config error, 3 numerical divergence, 4 i/o error.

mod config;

use clap::Parser;
use config::{Command, Config, ConfigError, RunRoute};
use geoflow_core::experiments::{
    epsilon_sweep, make_osc_data_pe, make_osc_data_rf, make_qg_data, make_ubar_data,
    strichartz_probe, ProbeConfig, SweepConfig,
};
use geoflow_core::snapshot::{read_snapshot, write_snapshot};
use geoflow_core::systems::{Grid2, SystemKind};
use geoflow_core::timestep::{
    integrate, observers, CoupledSystem, FlowState, IntegrateOpts, Observer, Role, RunOutcome,
    RunRecord,
};
use geoflow_core::{Error as CoreError, GridSpec, PhysParams, SpectralField};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "geoflow", version, about = "Pseudo-spectral rotating/stratified flow laboratory")]
struct Cli {
    /// Optional command word; must agree with the config's `command` field.
    command: Option<Command>,
    /// Path to the JSON configuration (or a manifest from a previous run).
    #[arg(long)]
    config: PathBuf,
    /// Output root (defaults to $GEOFLOW_OUT, then ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for data-parallel loops.
    #[arg(long)]
    workers: Option<usize>,
    /// Override the data seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Write field snapshots every K observations (run command).
    #[arg(long)]
    snapshot_every: Option<usize>,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_IO: u8 = 4;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut record = serde_json::json!({ "error": e.to_string() });
            let code = match e.downcast_ref::<ConfigError>() {
                Some(_) => EXIT_CONFIG,
                None => match e.downcast_ref::<CoreError>() {
                    Some(CoreError::Diverged { last_valid_t }) => {
                        record["last_valid_t"] = serde_json::json!(last_valid_t);
                        EXIT_DIVERGED
                    }
                    Some(CoreError::Io(_)) => EXIT_IO,
                    Some(CoreError::EigenFailure { .. }) => EXIT_DIVERGED,
                    Some(_) => EXIT_CONFIG,
                    None => {
                        if e.downcast_ref::<std::io::Error>().is_some() {
                            EXIT_IO
                        } else {
                            EXIT_CONFIG
                        }
                    }
                },
            };
            record["exit_code"] = serde_json::json!(code);
            eprintln!("{}", serde_json::to_string(&record).unwrap_or_default());
            ExitCode::from(code)
        }
    }
}

type AnyError = Box<dyn std::error::Error>;

fn run(cli: Cli) -> Result<(), AnyError> {
    let text = std::fs::read_to_string(&cli.config)
        .map_err(|e| ConfigError(format!("cannot read {}: {e}", cli.config.display())))?;
    let mut cfg = config::parse_config(&text)?;
    if let Some(cmd) = cli.command {
        if cmd != cfg.command {
            return Err(ConfigError(format!(
                "command word {:?} disagrees with config.command {:?}",
                cmd, cfg.command
            ))
            .into());
        }
    }
    if let Some(seed) = cli.seed {
        cfg.data.seed = seed;
    }
    if let Some(k) = cli.snapshot_every {
        cfg.schedule.snapshot_every = Some(k);
    }
    if let Some(w) = cli.workers {
        geoflow_core::set_workers(w);
    }
    let out_root = cli
        .out
        .or_else(|| cfg.output.as_ref().map(PathBuf::from))
        .or_else(|| std::env::var_os("GEOFLOW_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let hash = config::content_hash(&cfg);
    let dir = out_root.join(format!("{}-{hash}", command_name(cfg.command)));
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("manifest.json"), config::manifest_text(&cfg))?;
    match cfg.command {
        Command::Run => cmd_run(&cfg, &dir, &hash)?,
        Command::Sweep => cmd_sweep(&cfg, &dir)?,
        Command::Probe => cmd_probe(&cfg, &dir)?,
        Command::Norms => cmd_norms(&cfg, &dir)?,
    }
    println!("{}", dir.display());
    Ok(())
}

fn command_name(c: Command) -> &'static str {
    match c {
        Command::Run => "run",
        Command::Sweep => "sweep",
        Command::Probe => "probe",
        Command::Norms => "norms",
    }
}

fn grid3(cfg: &Config) -> Result<std::sync::Arc<GridSpec>, CoreError> {
    GridSpec::new([cfg.grid.n; 3], [cfg.grid.period; 3], cfg.grid.dealias_fraction)
}

fn cmd_run(cfg: &Config, dir: &Path, run_id: &str) -> Result<(), AnyError> {
    let rb = cfg.run.as_ref().expect("validated");
    let params = PhysParams::new(cfg.physics.nu, cfg.physics.nu_prime, cfg.physics.froude, rb.eps)?;
    let opts = IntegrateOpts {
        t_end: cfg.schedule.t_end,
        dt: cfg.schedule.dt,
        observe_every: cfg.schedule.observe_every,
    };
    let spec = cfg.data.to_spec();
    let (sys, state): (CoupledSystem, FlowState) = match rb.route {
        RunRoute::PeCoupled => {
            let grid = grid3(cfg)?;
            let (u0e, u0l) = make_qg_data(&grid, &spec, params.eps, params.froude)?;
            let w0 = make_osc_data_pe(&grid, &spec, params.eps, params.froude)?;
            let sys = CoupledSystem::new(
                grid.clone(),
                params,
                vec![
                    (Role::UQg, SystemKind::Qg),
                    (Role::WH, SystemKind::WH),
                    (Role::WInh, SystemKind::WInh),
                    (Role::Delta, SystemKind::DeltaPe),
                ],
            )?;
            let mut st = FlowState::new(0.0, params);
            st.insert3(Role::Delta, u0e.sub(&u0l));
            st.insert3(Role::UQg, u0l);
            st.insert3(Role::WH, w0);
            st.insert3(Role::WInh, SpectralField::zeros(grid, 4)?);
            (sys, st)
        }
        RunRoute::PeDirect => {
            let grid = grid3(cfg)?;
            let (u0e, _) = make_qg_data(&grid, &spec, params.eps, params.froude)?;
            let w0 = make_osc_data_pe(&grid, &spec, params.eps, params.froude)?;
            let sys = CoupledSystem::new(grid, params, vec![(Role::U, SystemKind::Pe)])?;
            let mut st = FlowState::new(0.0, params);
            st.insert3(Role::U, u0e.add(&w0));
            (sys, st)
        }
        RunRoute::RfCoupled => {
            let grid = grid3(cfg)?;
            let g2 = Grid2::new(
                [cfg.grid.n2.unwrap_or(cfg.grid.n); 2],
                [cfg.grid.period; 2],
                cfg.grid.dealias_fraction,
            )?;
            let ubar0 = make_ubar_data(&g2, spec.c0)?;
            let w0 = make_osc_data_rf(&grid, &spec, params.eps)?;
            let sys = CoupledSystem::new(
                grid.clone(),
                params,
                vec![
                    (Role::Ubar, SystemKind::Ns2d),
                    (Role::WRf, SystemKind::Lrf),
                    (Role::Delta, SystemKind::DeltaRf),
                ],
            )?;
            let mut st = FlowState::new(0.0, params);
            st.insert2(Role::Ubar, ubar0);
            st.insert3(Role::WRf, w0);
            st.insert3(Role::Delta, SpectralField::zeros(grid, 3)?);
            (sys, st)
        }
        RunRoute::Ns2d => {
            let g2 = Grid2::new(
                [cfg.grid.n2.unwrap_or(cfg.grid.n); 2],
                [cfg.grid.period; 2],
                cfg.grid.dealias_fraction,
            )?;
            let ubar0 = make_ubar_data(&g2, spec.c0)?;
            let grid = grid3(cfg)?;
            let sys = CoupledSystem::new(grid, params, vec![(Role::Ubar, SystemKind::Ns2d)])?;
            let mut st = FlowState::new(0.0, params);
            st.insert2(Role::Ubar, ubar0);
            (sys, st)
        }
    };
    let mut obs: Vec<Observer> = Vec::new();
    for (role, _) in sys.members() {
        match state.fields.get(role) {
            Some(geoflow_core::timestep::StateField::F3(_)) => {
                obs.push(observers::sobolev(*role, 0.5));
                obs.push(observers::sobolev(*role, 1.5));
            }
            Some(geoflow_core::timestep::StateField::F2(_)) => {
                obs.push(observers::energy_2d(*role));
                obs.push(observers::enstrophy_2d(*role));
            }
            None => {}
        }
    }
    let snap_dir = dir.join("snapshots");
    let mut sample_idx = 0usize;
    let snapshot_every = cfg.schedule.snapshot_every;
    let run_id = run_id.to_string();
    let members: Vec<Role> = sys.members().iter().map(|(r, _)| *r).collect();
    let mut on_sample = |st: &FlowState| -> Result<(), CoreError> {
        if let Some(k) = snapshot_every {
            if k > 0 && sample_idx % k == 0 {
                std::fs::create_dir_all(&snap_dir)?;
                for role in &members {
                    if let Ok(f) = st.field3(*role) {
                        let name = format!("{:?}_{:06}.snap", role, sample_idx);
                        write_snapshot(&snap_dir.join(name), f, st.t, &run_id)?;
                    }
                }
            }
        }
        sample_idx += 1;
        Ok(())
    };
    let mut rec = integrate(&sys, state, &opts, &obs, Some(&mut on_sample))?;
    rec.manifest = serde_json::from_str(&config::manifest_text(cfg))?;
    rec.write_dir(dir)?;
    let report = run_report(&rec);
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    if let RunOutcome::Diverged { last_valid_t } = rec.outcome {
        return Err(CoreError::Diverged { last_valid_t }.into());
    }
    Ok(())
}

/// Summary written next to the diagnostics: final norms and the blow-up
/// functional (running time integral of the squared `H^{3/2}` norm).
fn run_report(rec: &RunRecord) -> serde_json::Value {
    let mut finals = serde_json::Map::new();
    if let Some(last) = rec.rows.last() {
        for (c, v) in rec.columns.iter().zip(last) {
            finals.insert(c.clone(), serde_json::json!(v));
        }
    }
    let mut blowup = serde_json::Map::new();
    for col in &rec.columns {
        if let Some(role) = col.strip_prefix("hs_").and_then(|s| s.strip_suffix("_1.5")) {
            let vals = rec.column(col).unwrap();
            let mut acc = 0.0;
            for i in 0..rec.times.len().saturating_sub(1) {
                let h = rec.times[i + 1] - rec.times[i];
                acc += 0.5 * h * (vals[i] * vals[i] + vals[i + 1] * vals[i + 1]);
            }
            blowup.insert(role.to_string(), serde_json::json!(acc));
        }
    }
    serde_json::json!({
        "outcome": rec.outcome,
        "final": finals,
        "blowup_functional": blowup,
    })
}

fn cmd_sweep(cfg: &Config, dir: &Path) -> Result<(), AnyError> {
    let sb = cfg.sweep.as_ref().expect("validated");
    let sweep_cfg = SweepConfig {
        system: sb.system,
        grid_n: cfg.grid.n,
        period: cfg.grid.period,
        dealias_fraction: cfg.grid.dealias_fraction,
        nu: cfg.physics.nu,
        nu_prime: cfg.physics.nu_prime,
        froude: cfg.physics.froude,
        data: cfg.data.to_spec(),
        eps_list: sb.eps_list.clone(),
        t_end: cfg.schedule.t_end,
        s_list: sb.s_list.clone(),
        dt_base: cfg.schedule.dt_base,
        eps_dt_fraction: cfg.schedule.eps_dt_fraction,
        observe_every: cfg.schedule.observe_every,
        eta_prime: sb.eta_prime,
    };
    let report = epsilon_sweep(&sweep_cfg)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    // rows.csv: eps, diverged, then one column per recorded norm
    let mut names: Vec<String> = Vec::new();
    for row in &report.rows {
        for k in row.values.keys() {
            if !names.contains(k) {
                names.push(k.clone());
            }
        }
    }
    let mut csv = String::from("eps,diverged");
    for n in &names {
        csv.push(',');
        csv.push_str(n);
    }
    csv.push('\n');
    for row in &report.rows {
        csv.push_str(&format!("{},{}", row.eps, row.diverged));
        for n in &names {
            match row.values.get(n) {
                Some(v) => csv.push_str(&format!(",{v}")),
                None => csv.push(','),
            }
        }
        csv.push('\n');
    }
    std::fs::write(dir.join("rows.csv"), csv)?;
    Ok(())
}

fn cmd_probe(cfg: &Config, dir: &Path) -> Result<(), AnyError> {
    let pb = cfg.probe.as_ref().expect("validated");
    let probe_cfg = ProbeConfig {
        system: pb.system,
        grid_n: cfg.grid.n,
        period: cfg.grid.period,
        dealias_fraction: cfg.grid.dealias_fraction,
        nu: cfg.physics.nu,
        froude: cfg.physics.froude,
        eps_list: pb.eps_list.clone(),
        shell_j: pb.shell_j,
        seed: cfg.data.seed,
        num_samples: pb.num_samples,
        t_max: pb.t_max,
        norms: pb.norms.clone(),
    };
    let report = strichartz_probe(&probe_cfg)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    let mut names: Vec<String> = Vec::new();
    for row in &report.rows {
        for k in row.values.keys() {
            if !names.contains(k) {
                names.push(k.clone());
            }
        }
    }
    let mut csv = String::from("eps");
    for n in &names {
        csv.push(',');
        csv.push_str(n);
    }
    csv.push('\n');
    for row in &report.rows {
        csv.push_str(&format!("{}", row.eps));
        for n in &names {
            match row.values.get(n) {
                Some(v) => csv.push_str(&format!(",{v}")),
                None => csv.push(','),
            }
        }
        csv.push('\n');
    }
    std::fs::write(dir.join("rows.csv"), csv)?;
    Ok(())
}

fn cmd_norms(cfg: &Config, dir: &Path) -> Result<(), AnyError> {
    let nb = cfg.norms.as_ref().expect("validated");
    let mut series: Vec<(f64, SpectralField)> = Vec::new();
    for path in &nb.snapshots {
        let (field, header) = read_snapshot(Path::new(path))?;
        series.push((header.time, field));
    }
    series.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut csv = String::from("kind,s,p,q,value,truncation_estimate\n");
    for req in &nb.requests {
        let (value, trunc) = req.evaluate(&series)?;
        let kind = serde_json::to_value(req.kind)?.as_str().unwrap_or("?").to_string();
        let fmt_idx = |v: f64| if v.is_infinite() { "inf".to_string() } else { format!("{v}") };
        csv.push_str(&format!(
            "{kind},{},{},{},{value},{trunc}\n",
            req.s,
            fmt_idx(req.p),
            fmt_idx(req.q)
        ));
    }
    std::fs::write(dir.join("norms.csv"), csv)?;
    Ok(())
}
