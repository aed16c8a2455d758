//! Exact linear flows (semigroups) and stiff-aware explicit time stepping.
//!
//! The linear part of every system here is diagonalized exactly: diffusion is
//! a scalar Fourier multiplier and the penalized rotation term is handled by
//! the wave eigenbasis, so integrating factors remove both stiffness sources
//! from the step-size constraint. The nonlinear and forcing terms go through
//! a classical RK4 in the transformed frame (IF-RK4), which degrades to the
//! exact semigroup when the nonlinearity is switched off.

use crate::field::SpectralField;
use crate::grid::GridSpec;
use crate::lp::sobolev_norm;
use crate::ops::{
    gamma_symbol, heat_symbol, leray_project, qg_project, PhysParams, WaveBasis, WaveSystem,
};
use crate::systems::{
    convective_term, convective_term_2d, f_sum_with_conv, g_force_with_conv, g_sum_closed_form,
    lift_2d, Field2D, SystemKind,
};
use crate::{Error, Result};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;

/// Which evolved unknown a field plays in a coupled set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Full primitive / rotating-fluids state (also the perturbation in the
    /// perturbed rotating system).
    U,
    /// Quasi-geostrophic limit state.
    UQg,
    /// Homogeneous oscillating flow.
    WH,
    /// Inhomogeneous oscillating flow (forced by G).
    WInh,
    /// Error field.
    Delta,
    /// 2D limit flow.
    Ubar,
    /// Linear rotating-fluids flow.
    WRf,
}

/// A state entry: 3D spectral field or 2D limit field.
#[derive(Debug, Clone)]
pub enum StateField {
    F3(SpectralField),
    F2(Field2D),
}

impl StateField {
    pub fn as_f3(&self) -> Result<&SpectralField> {
        match self {
            StateField::F3(f) => Ok(f),
            StateField::F2(_) => Err(Error::InvalidInput("expected a 3D field".into())),
        }
    }

    pub fn as_f2(&self) -> Result<&Field2D> {
        match self {
            StateField::F2(f) => Ok(f),
            StateField::F3(_) => Err(Error::InvalidInput("expected a 2D field".into())),
        }
    }

    fn axpy(&mut self, a: f64, other: &StateField) {
        match (self, other) {
            (StateField::F3(x), StateField::F3(y)) => x.axpy(a, y),
            (StateField::F2(x), StateField::F2(y)) => x.axpy(a, y),
            _ => unreachable!("mismatched state field kinds"),
        }
    }

    fn has_non_finite(&self) -> bool {
        match self {
            StateField::F3(f) => f.has_non_finite(),
            StateField::F2(f) => f.has_non_finite(),
        }
    }
}

/// Time-stamped set of coupled fields.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub t: f64,
    pub fields: BTreeMap<Role, StateField>,
    pub params: PhysParams,
}

impl FlowState {
    pub fn new(t: f64, params: PhysParams) -> Self {
        FlowState { t, fields: BTreeMap::new(), params }
    }

    pub fn insert3(&mut self, role: Role, f: SpectralField) {
        self.fields.insert(role, StateField::F3(f));
    }

    pub fn insert2(&mut self, role: Role, f: Field2D) {
        self.fields.insert(role, StateField::F2(f));
    }

    pub fn field3(&self, role: Role) -> Result<&SpectralField> {
        self.fields
            .get(&role)
            .ok_or(Error::MissingCompanion(role_name(role)))?
            .as_f3()
    }

    pub fn field2(&self, role: Role) -> Result<&Field2D> {
        self.fields
            .get(&role)
            .ok_or(Error::MissingCompanion(role_name(role)))?
            .as_f2()
    }
}

fn role_name(role: Role) -> &'static str {
    match role {
        Role::U => "U",
        Role::UQg => "U_QG",
        Role::WH => "W_H",
        Role::WInh => "W_INH",
        Role::Delta => "DELTA",
        Role::Ubar => "UBAR",
        Role::WRf => "W_RF",
    }
}

enum LinearFlow {
    /// Diffusion and penalized rotation, both exact via the wave basis.
    RotDiff { basis: Arc<WaveBasis>, symbol: Array3<f64> },
    /// Pure scalar-multiplier diffusion (the penalized term vanishes on the
    /// quasi-geostrophic subspace).
    Diff { symbol: Array3<f64> },
    /// Horizontal heat flow for the 2D limit system.
    Heat2 { nu: f64 },
}

impl LinearFlow {
    fn apply(&self, u: &StateField, t: f64, eps: f64) -> Result<StateField> {
        match (self, u) {
            (LinearFlow::RotDiff { basis, symbol }, StateField::F3(f)) => {
                Ok(StateField::F3(basis.apply_flow(f, symbol, t, t / eps)?))
            }
            (LinearFlow::Diff { symbol }, StateField::F3(f)) => {
                let mut out = f.clone();
                for c in 0..out.components() {
                    let mut comp = out.coeffs_mut().index_axis_mut(ndarray::Axis(0), c);
                    crate::field::par_zip_indexed(&mut comp, |idx, z| {
                        *z *= (t * symbol[(idx[0], idx[1], idx[2])]).exp();
                    });
                }
                Ok(StateField::F3(out))
            }
            (LinearFlow::Heat2 { nu }, StateField::F2(f)) => {
                let mut out = f.clone();
                let grid = f.grid().clone();
                for c in 0..3 {
                    let mut comp = out.coeffs_mut().index_axis_mut(ndarray::Axis(0), c);
                    ndarray::Zip::indexed(&mut comp).for_each(|(i, j), z| {
                        let xi = grid.xi([i, j]);
                        *z *= (-nu * t * (xi[0] * xi[0] + xi[1] * xi[1])).exp();
                    });
                }
                Ok(StateField::F2(out))
            }
            _ => Err(Error::InvalidInput("linear flow applied to the wrong field kind".into())),
        }
    }
}

/// A coupled set of systems advanced in lockstep, with shared wave bases and
/// precomputed diffusion symbols.
pub struct CoupledSystem {
    pub grid: Arc<GridSpec>,
    pub params: PhysParams,
    members: Vec<(Role, SystemKind)>,
    flows: Vec<LinearFlow>,
}

impl CoupledSystem {
    pub fn new(
        grid: Arc<GridSpec>,
        params: PhysParams,
        members: Vec<(Role, SystemKind)>,
    ) -> Result<Self> {
        let mut pe_basis: Option<Arc<WaveBasis>> = None;
        let mut rf_basis: Option<Arc<WaveBasis>> = None;
        let mut get_basis = |sys: WaveSystem| -> Result<Arc<WaveBasis>> {
            let slot = match sys {
                WaveSystem::Pe => &mut pe_basis,
                WaveSystem::Rf => &mut rf_basis,
            };
            if slot.is_none() {
                *slot = Some(Arc::new(WaveBasis::new(grid.clone(), params.froude, sys)?));
            }
            Ok(slot.as_ref().unwrap().clone())
        };
        let roles: Vec<Role> = members.iter().map(|(r, _)| *r).collect();
        let require = |role: Role, what: &'static str| -> Result<()> {
            if roles.contains(&role) {
                Ok(())
            } else {
                Err(Error::MissingCompanion(what))
            }
        };
        let mut flows = Vec::new();
        for (_, kind) in &members {
            let flow = match kind {
                SystemKind::Pe | SystemKind::DeltaPe => {
                    if !params.equal_viscosities() {
                        return Err(Error::UnsupportedConfig(
                            "the exact primitive-system semigroup requires nu = nu'".into(),
                        ));
                    }
                    if *kind == SystemKind::DeltaPe {
                        require(Role::UQg, "U_QG for the error system")?;
                        require(Role::WH, "W_H for the error system")?;
                        require(Role::WInh, "W_INH for the error system")?;
                    }
                    LinearFlow::RotDiff {
                        basis: get_basis(WaveSystem::Pe)?,
                        symbol: heat_symbol(&grid, params.nu),
                    }
                }
                SystemKind::Qg => LinearFlow::Diff { symbol: gamma_symbol(&grid, &params) },
                SystemKind::WH => LinearFlow::RotDiff {
                    basis: get_basis(WaveSystem::Pe)?,
                    symbol: gamma_symbol(&grid, &params),
                },
                SystemKind::WInh => {
                    require(Role::UQg, "U_QG driving the forcing G")?;
                    LinearFlow::RotDiff {
                        basis: get_basis(WaveSystem::Pe)?,
                        symbol: gamma_symbol(&grid, &params),
                    }
                }
                SystemKind::Rf | SystemKind::Lrf => LinearFlow::RotDiff {
                    basis: get_basis(WaveSystem::Rf)?,
                    symbol: heat_symbol(&grid, params.nu),
                },
                SystemKind::Prf => {
                    require(Role::Ubar, "UBAR for the perturbed rotating system")?;
                    LinearFlow::RotDiff {
                        basis: get_basis(WaveSystem::Rf)?,
                        symbol: heat_symbol(&grid, params.nu),
                    }
                }
                SystemKind::DeltaRf => {
                    require(Role::WRf, "W_RF for the rotating error system")?;
                    require(Role::Ubar, "UBAR for the rotating error system")?;
                    LinearFlow::RotDiff {
                        basis: get_basis(WaveSystem::Rf)?,
                        symbol: heat_symbol(&grid, params.nu),
                    }
                }
                SystemKind::Ns2d => LinearFlow::Heat2 { nu: params.nu },
            };
            flows.push(flow);
        }
        Ok(CoupledSystem { grid, params, members, flows })
    }

    pub fn members(&self) -> &[(Role, SystemKind)] {
        &self.members
    }

    /// Nonlinear / forcing part of one member, evaluated on a stage state.
    /// Linear members return `None` (their stages carry no k-contributions).
    /// The cache shares per-stage bilinear terms (the quasi-geostrophic
    /// convection, the lifted 2D flow) between members.
    fn nonlinear(&self, idx: usize, stage: &FlowState, cache: &mut StageCache) -> Result<Option<StateField>> {
        let (role, kind) = self.members[idx];
        let p = &self.params;
        let out = match kind {
            SystemKind::WH | SystemKind::Lrf => None,
            SystemKind::Pe => {
                let u = stage.field3(role)?;
                let mut r = leray_project(&convective_term(u, u)?)?;
                r.scale(-1.0);
                r.zero_mean();
                Some(StateField::F3(r))
            }
            SystemKind::Qg => {
                let u = stage.field3(role)?;
                let conv = cache.qg_conv(u)?;
                Some(StateField::F3(qg_project(conv, p.froude)?.scaled(-1.0)))
            }
            SystemKind::WInh => {
                let uqg = stage.field3(Role::UQg)?;
                let conv = cache.qg_conv(uqg)?.clone();
                let g = g_force_with_conv(&conv, uqg, p)?;
                Some(StateField::F3(g.scaled(-1.0)))
            }
            SystemKind::DeltaPe => {
                let delta = stage.field3(role)?;
                let uqg = stage.field3(Role::UQg)?;
                let wh = stage.field3(Role::WH)?;
                let winh = stage.field3(Role::WInh)?;
                let conv = cache.qg_conv(uqg)?.clone();
                Some(StateField::F3(f_sum_with_conv(&conv, delta, uqg, wh, winh)?))
            }
            SystemKind::Rf => {
                let v = stage.field3(role)?;
                let mut r = leray_project(&convective_term(v, v)?)?;
                r.scale(-1.0);
                r.zero_mean();
                Some(StateField::F3(r))
            }
            SystemKind::Prf => {
                let w = stage.field3(role)?;
                let ubar = cache.ubar_lift(stage.field2(Role::Ubar)?, &self.grid)?.clone();
                let mut t = convective_term(w, w)?;
                t.axpy(1.0, &convective_term(w, &ubar)?);
                t.axpy(1.0, &convective_term(&ubar, w)?);
                let mut r = leray_project(&t)?;
                r.scale(-1.0);
                r.zero_mean();
                Some(StateField::F3(r))
            }
            SystemKind::DeltaRf => {
                let delta = stage.field3(role)?;
                let w = stage.field3(Role::WRf)?;
                let ubar = cache.ubar_lift(stage.field2(Role::Ubar)?, &self.grid)?.clone();
                Some(StateField::F3(g_sum_closed_form(delta, w, &ubar)?))
            }
            SystemKind::Ns2d => {
                let ubar = stage.field2(role)?;
                let conv = convective_term_2d(ubar, ubar)?;
                let mut projected = conv.leray_h();
                projected
                    .coeffs_mut()
                    .slice_mut(ndarray::s![2, .., ..])
                    .assign(&conv.coeffs().slice(ndarray::s![2, .., ..]));
                projected.scale(-1.0);
                Some(StateField::F2(projected))
            }
        };
        Ok(out)
    }

    fn propagate(&self, idx: usize, u: &StateField, t: f64) -> Result<StateField> {
        self.flows[idx].apply(u, t, self.params.eps)
    }

    /// Per-step cleanup: re-project against roundoff drift. The wave-basis
    /// flow already projects 3D states onto the divergence-free subspace, so
    /// only the purely diffusive members need attention.
    fn sanitize(&self, idx: usize, u: &mut StateField) -> Result<()> {
        let (_, kind) = self.members[idx];
        match (kind, u) {
            (SystemKind::Qg, StateField::F3(f)) => {
                *f = qg_project(f, self.params.froude)?;
            }
            (SystemKind::Ns2d, StateField::F2(f)) => {
                *f = f.leray_h();
            }
            _ => {}
        }
        Ok(())
    }
}

/// Per-stage memo of bilinear terms shared across coupled members. Never
/// reused across stages.
#[derive(Default)]
struct StageCache {
    qg_conv: Option<SpectralField>,
    ubar_lift: Option<SpectralField>,
}

impl StageCache {
    fn qg_conv(&mut self, uqg: &SpectralField) -> Result<&SpectralField> {
        if self.qg_conv.is_none() {
            self.qg_conv = Some(convective_term(uqg, uqg)?);
        }
        Ok(self.qg_conv.as_ref().unwrap())
    }

    fn ubar_lift(
        &mut self,
        ubar: &Field2D,
        grid: &Arc<GridSpec>,
    ) -> Result<&SpectralField> {
        if self.ubar_lift.is_none() {
            self.ubar_lift = Some(lift_2d(ubar, grid)?);
        }
        Ok(self.ubar_lift.as_ref().unwrap())
    }
}

/// One integrating-factor RK4 step of the whole coupled set.
pub fn step_ifrk4(sys: &CoupledSystem, state: &FlowState, dt: f64) -> Result<FlowState> {
    if !(dt > 0.0) {
        return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    let n = sys.members.len();
    let half = 0.5 * dt;
    let t0 = state.t;

    let get = |st: &FlowState, i: usize| -> StateField {
        st.fields[&sys.members[i].0].clone()
    };

    // k1 = N(u, t0)
    let mut cache = StageCache::default();
    let k1: Vec<Option<StateField>> =
        (0..n).map(|i| sys.nonlinear(i, state, &mut cache)).collect::<Result<_>>()?;

    // a2 = S(h/2) (u + h/2 k1)
    let mut stage = FlowState::new(t0 + half, sys.params);
    for i in 0..n {
        let mut v = get(state, i);
        if let Some(k) = &k1[i] {
            v.axpy(half, k);
        }
        stage.fields.insert(sys.members[i].0, sys.propagate(i, &v, half)?);
    }
    let mut cache = StageCache::default();
    let k2: Vec<Option<StateField>> =
        (0..n).map(|i| sys.nonlinear(i, &stage, &mut cache)).collect::<Result<_>>()?;

    // a3 = S(h/2) u + h/2 k2
    let mut stage3 = FlowState::new(t0 + half, sys.params);
    for i in 0..n {
        let mut v = sys.propagate(i, &get(state, i), half)?;
        if let Some(k) = &k2[i] {
            v.axpy(half, k);
        }
        stage3.fields.insert(sys.members[i].0, v);
    }
    let mut cache = StageCache::default();
    let k3: Vec<Option<StateField>> =
        (0..n).map(|i| sys.nonlinear(i, &stage3, &mut cache)).collect::<Result<_>>()?;

    // a4 = S(h) u + h S(h/2) k3
    let mut stage4 = FlowState::new(t0 + dt, sys.params);
    for i in 0..n {
        let mut v = sys.propagate(i, &get(state, i), dt)?;
        if let Some(k) = &k3[i] {
            v.axpy(dt, &sys.propagate(i, k, half)?);
        }
        stage4.fields.insert(sys.members[i].0, v);
    }
    let mut cache = StageCache::default();
    let k4: Vec<Option<StateField>> =
        (0..n).map(|i| sys.nonlinear(i, &stage4, &mut cache)).collect::<Result<_>>()?;

    // u' = S(h)(u + h/6 k1) + h/3 S(h/2)(k2 + k3) + h/6 k4
    let mut next = FlowState::new(t0 + dt, sys.params);
    for i in 0..n {
        let mut base = get(state, i);
        if let Some(k) = &k1[i] {
            base.axpy(dt / 6.0, k);
        }
        let mut v = sys.propagate(i, &base, dt)?;
        match (&k2[i], &k3[i]) {
            (Some(a), Some(b)) => {
                let mut mid = a.clone();
                mid.axpy(1.0, b);
                v.axpy(dt / 3.0, &sys.propagate(i, &mid, half)?);
            }
            (Some(a), None) => v.axpy(dt / 3.0, &sys.propagate(i, a, half)?),
            (None, Some(b)) => v.axpy(dt / 3.0, &sys.propagate(i, b, half)?),
            (None, None) => {}
        }
        if let Some(k) = &k4[i] {
            v.axpy(dt / 6.0, k);
        }
        sys.sanitize(i, &mut v)?;
        if v.has_non_finite() {
            return Err(Error::Diverged { last_valid_t: t0 });
        }
        next.fields.insert(sys.members[i].0, v);
    }
    Ok(next)
}

/// Step-size policy.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum DtPolicy {
    Fixed { dt: f64 },
    /// Advective CFL `dt = c * dx / max |v|`, re-evaluated every step and
    /// capped by `dt_max`.
    Cfl { c: f64, dt_max: f64 },
}

impl DtPolicy {
    fn next_dt(&self, sys: &CoupledSystem, state: &FlowState) -> f64 {
        match self {
            DtPolicy::Fixed { dt } => *dt,
            DtPolicy::Cfl { c, dt_max } => {
                let mut vmax = 0.0f64;
                let mut dx = f64::INFINITY;
                for (role, _) in &sys.members {
                    match &state.fields[role] {
                        StateField::F3(f) => {
                            vmax = vmax.max(f.max_abs_physical());
                            for a in 0..3 {
                                dx = dx.min(f.grid().dx(a));
                            }
                        }
                        StateField::F2(f) => {
                            vmax = vmax.max(f.max_abs_physical());
                            for a in 0..2 {
                                dx = dx.min(f.grid().dx(a));
                            }
                        }
                    }
                }
                if vmax > 0.0 {
                    (c * dx / vmax).min(*dt_max)
                } else {
                    *dt_max
                }
            }
        }
    }
}

/// A named scalar diagnostic evaluated on the flow state.
pub struct Observer {
    pub name: String,
    pub eval: Box<dyn Fn(&FlowState) -> f64>,
}

impl Observer {
    pub fn new(name: impl Into<String>, eval: impl Fn(&FlowState) -> f64 + 'static) -> Self {
        Observer { name: name.into(), eval: Box::new(eval) }
    }
}

/// How a run ended.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum RunOutcome {
    Completed,
    Diverged { last_valid_t: f64 },
}

/// Diagnostics time series plus the manifest that reproduces the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub manifest: serde_json::Value,
    pub columns: Vec<String>,
    pub times: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
    pub outcome: RunOutcome,
}

impl RunRecord {
    /// Column values by observer name.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[idx]).collect())
    }

    /// Write `manifest.json` and `diagnostics.csv` into a directory.
    pub fn write_dir(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(dir.join("manifest.json"), manifest)?;
        let mut csv = String::from("t");
        for c in &self.columns {
            csv.push(',');
            csv.push_str(c);
        }
        csv.push('\n');
        for (t, row) in self.times.iter().zip(&self.rows) {
            csv.push_str(&format!("{t}"));
            for v in row {
                csv.push_str(&format!(",{v}"));
            }
            csv.push('\n');
        }
        std::fs::write(dir.join("diagnostics.csv"), csv)?;
        Ok(())
    }
}

/// Integration options.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntegrateOpts {
    pub t_end: f64,
    pub dt: DtPolicy,
    /// Observer cadence in steps.
    pub observe_every: usize,
}

/// Advance all members in lockstep to `t_end`, invoking observers on a fixed
/// cadence. On numerical divergence the partial record is returned with the
/// outcome flagged.
pub fn integrate(
    sys: &CoupledSystem,
    initial: FlowState,
    opts: &IntegrateOpts,
    observers: &[Observer],
    mut on_sample: Option<&mut dyn FnMut(&FlowState) -> Result<()>>,
) -> Result<RunRecord> {
    if !(opts.t_end >= 0.0) {
        return Err(Error::InvalidInput("t_end must be nonnegative".into()));
    }
    let mut record = RunRecord {
        manifest: serde_json::Value::Null,
        columns: observers.iter().map(|o| o.name.clone()).collect(),
        times: Vec::new(),
        rows: Vec::new(),
        outcome: RunOutcome::Completed,
    };
    let mut observe = |state: &FlowState, rec: &mut RunRecord| -> Result<()> {
        rec.times.push(state.t);
        rec.rows.push(observers.iter().map(|o| (o.eval)(state)).collect());
        if let Some(cb) = on_sample.as_deref_mut() {
            cb(state)?;
        }
        Ok(())
    };
    let mut state = initial;
    observe(&state, &mut record)?;
    if opts.t_end == 0.0 {
        return Ok(record);
    }
    let mut step_idx = 0usize;
    let tiny = 1e-12 * opts.t_end.max(1.0);
    while state.t < opts.t_end - tiny {
        let mut dt = opts.dt.next_dt(sys, &state);
        if state.t + dt > opts.t_end {
            dt = opts.t_end - state.t;
        }
        match step_ifrk4(sys, &state, dt) {
            Ok(next) => state = next,
            Err(Error::Diverged { last_valid_t }) => {
                record.outcome = RunOutcome::Diverged { last_valid_t };
                return Ok(record);
            }
            Err(e) => return Err(e),
        }
        step_idx += 1;
        let done = state.t >= opts.t_end - tiny;
        if step_idx % opts.observe_every.max(1) == 0 || done {
            observe(&state, &mut record)?;
        }
    }
    Ok(record)
}

/// Exact semigroup of the linearized system: heat decay times the unitary
/// wave rotation, per mode. For the primitive system this is only available
/// with equal viscosities.
pub fn semigroup_apply(
    u: &SpectralField,
    t: f64,
    params: &PhysParams,
    system: WaveSystem,
) -> Result<SpectralField> {
    if system == WaveSystem::Pe && !params.equal_viscosities() {
        return Err(Error::UnsupportedConfig(
            "the exact primitive-system semigroup requires nu = nu'".into(),
        ));
    }
    let basis = WaveBasis::new(u.grid().clone(), params.froude, system)?;
    semigroup_apply_with(&basis, u, t, params)
}

/// Same, reusing a prebuilt wave basis.
pub fn semigroup_apply_with(
    basis: &WaveBasis,
    u: &SpectralField,
    t: f64,
    params: &PhysParams,
) -> Result<SpectralField> {
    if basis.system() == WaveSystem::Pe && !params.equal_viscosities() {
        return Err(Error::UnsupportedConfig(
            "the exact primitive-system semigroup requires nu = nu'".into(),
        ));
    }
    let heat = heat_symbol(u.grid(), params.nu);
    basis.apply_flow(u, &heat, t, t / params.eps)
}

/// Trapezoid approximation of the blow-up functional
/// `int_0^t || grad U ||_{H^{1/2}}^2`, evaluated as the running integral of
/// the squared `H^{3/2}` norm.
pub fn blowup_functional(series: &[(f64, SpectralField)]) -> f64 {
    if series.len() < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    let vals: Vec<f64> = series.iter().map(|(_, u)| sobolev_norm(u, 1.5).powi(2)).collect();
    for i in 0..series.len() - 1 {
        let h = series[i + 1].0 - series[i].0;
        acc += 0.5 * h * (vals[i] + vals[i + 1]);
    }
    acc
}

/// Convenience builders for observers used across the experiments.
pub mod observers {
    use super::*;
    use crate::lp::{fractional_derivative, lebesgue_norm};

    /// Sobolev norm of one role.
    pub fn sobolev(role: Role, s: f64) -> Observer {
        Observer::new(format!("hs_{}_{}", role_name(role), s), move |st| {
            st.field3(role).map(|f| sobolev_norm(f, s)).unwrap_or(f64::NAN)
        })
    }

    /// `L^inf` norm of `|D|^d` applied to a sum of roles.
    pub fn linf_of_sum(name: impl Into<String>, roles: Vec<Role>, d: f64) -> Observer {
        Observer::new(name, move |st| {
            let mut sum: Option<SpectralField> = None;
            for r in &roles {
                match st.field3(*r) {
                    Ok(f) => match &mut sum {
                        Some(s) => s.axpy(1.0, f),
                        None => sum = Some(f.clone()),
                    },
                    Err(_) => return f64::NAN,
                }
            }
            match sum {
                Some(s) => {
                    let g = if d == 0.0 { s } else { fractional_derivative(&s, d) };
                    lebesgue_norm(&g, f64::INFINITY)
                }
                None => f64::NAN,
            }
        })
    }

    /// Squared L2 norm of the 2D limit flow.
    pub fn energy_2d(role: Role) -> Observer {
        Observer::new("energy_2d", move |st| {
            st.field2(role).map(|f| 0.5 * f.l2_norm().powi(2)).unwrap_or(f64::NAN)
        })
    }

    /// Squared H1 seminorm of the 2D limit flow.
    pub fn enstrophy_2d(role: Role) -> Observer {
        Observer::new("h1_2d", move |st| {
            st.field2(role).map(|f| f.h1_seminorm().powi(2)).unwrap_or(f64::NAN)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::random_real_field;
    use crate::ops::osc_project;
    use crate::systems::Grid2;
    use approx::assert_relative_eq;
    use num_complex::Complex64;
    use std::f64::consts::PI;

    fn grid(n: usize) -> Arc<GridSpec> {
        GridSpec::new([n, n, n], [2.0 * PI; 3], 2.0 / 3.0).unwrap()
    }

    fn div_free(g: &Arc<GridSpec>, comps: usize, seed: u64) -> SpectralField {
        let mut u = leray_project(&random_real_field(g, comps, seed)).unwrap();
        u.dealias();
        u.zero_mean();
        u
    }

    #[test]
    fn semigroup_identity_and_group_property() {
        let g = grid(12);
        let p = PhysParams::new(0.5, 0.5, 2.0, 1e-2).unwrap();
        let u = div_free(&g, 4, 1);
        let basis = WaveBasis::new(g.clone(), p.froude, WaveSystem::Pe).unwrap();
        let id = semigroup_apply_with(&basis, &u, 0.0, &p).unwrap();
        // t = 0 acts as the projection onto the divergence-free subspace,
        // which is the identity on divergence-free data
        assert!(id.sub(&u).l2_norm() / u.l2_norm() < 1e-12);
        let (s, t) = (0.07, 0.12);
        let a = semigroup_apply_with(&basis, &semigroup_apply_with(&basis, &u, s, &p).unwrap(), t, &p)
            .unwrap();
        let b = semigroup_apply_with(&basis, &u, s + t, &p).unwrap();
        assert!(a.sub(&b).l2_norm() / b.l2_norm() < 1e-11);
    }

    #[test]
    fn semigroup_is_heat_times_unitary() {
        let g = grid(12);
        let p = PhysParams::new(0.8, 0.8, 0.5, 1e-3).unwrap();
        let u = div_free(&g, 4, 2);
        let t = 0.3;
        let evolved = semigroup_apply(&u, t, &p, WaveSystem::Pe).unwrap();
        let mut heat_only = u.clone();
        heat_only.apply_multiplier(|xi| {
            Complex64::new((-p.nu * t * (xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2])).exp(), 0.0)
        });
        assert_relative_eq!(evolved.l2_norm(), heat_only.l2_norm(), max_relative = 1e-12);
        // QG component feels only the heat flow
        let q_evolved = qg_project(&evolved, p.froude).unwrap();
        let q_heat = qg_project(&heat_only, p.froude).unwrap();
        assert!(q_evolved.sub(&q_heat).l2_norm() / q_heat.l2_norm() < 1e-11);
    }

    #[test]
    fn pe_semigroup_needs_equal_viscosities() {
        let g = grid(8);
        let p = PhysParams::new(0.5, 0.7, 2.0, 1e-2).unwrap();
        let u = div_free(&g, 4, 3);
        assert!(matches!(
            semigroup_apply(&u, 0.1, &p, WaveSystem::Pe),
            Err(Error::UnsupportedConfig(_))
        ));
        // RF flavour does not care about nu'
        assert!(semigroup_apply(&div_free(&g, 3, 4), 0.1, &p, WaveSystem::Rf).is_ok());
    }

    #[test]
    fn linear_step_matches_semigroup_and_handles_stiffness() {
        let g = grid(12);
        let p = PhysParams::new(1.0, 1.0, 2.0, 1e-6).unwrap();
        let w0 = osc_project(&div_free(&g, 4, 5), p.froude).unwrap();
        let sys = CoupledSystem::new(g.clone(), p, vec![(Role::WH, SystemKind::WH)]).unwrap();
        let mut st = FlowState::new(0.0, p);
        st.insert3(Role::WH, w0.clone());
        let dt = 0.1;
        let next = step_ifrk4(&sys, &st, dt).unwrap();
        // Gamma = nu Lap here, so the exact flow is the heat+rotation semigroup
        let exact = semigroup_apply(&w0, dt, &p, WaveSystem::Pe).unwrap();
        let got = next.field3(Role::WH).unwrap();
        let err = got.sub(&exact).l2_norm() / exact.l2_norm();
        assert!(err < 1e-12, "IF step vs semigroup: {err}");
        assert!(!got.has_non_finite());
        // amplitude matches the pure heat decay despite eps = 1e-6
        assert_relative_eq!(got.l2_norm(), {
            let mut h = w0.clone();
            h.apply_multiplier(|xi| {
                Complex64::new((-p.nu * dt * (xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2])).exp(), 0.0)
            });
            h.l2_norm()
        }, max_relative = 1e-12);
    }

    #[test]
    fn qg_step_is_fourth_order() {
        let g = grid(16);
        let p = PhysParams::new(0.05, 0.05, 2.0, 1.0).unwrap();
        let u0 = {
            let u = qg_project(&random_real_field(&g, 4, 7), p.froude).unwrap();
            let mut u = u.dealiased();
            u.zero_mean();
            u.scale(1.0 / sobolev_norm(&u, 0.5));
            u
        };
        let sys = CoupledSystem::new(g.clone(), p, vec![(Role::UQg, SystemKind::Qg)]).unwrap();
        let t_end = 0.4;
        let run = |dt: f64| -> SpectralField {
            let mut st = FlowState::new(0.0, p);
            st.insert3(Role::UQg, u0.clone());
            let steps = (t_end / dt).round() as usize;
            for _ in 0..steps {
                st = step_ifrk4(&sys, &st, dt).unwrap();
            }
            st.field3(Role::UQg).unwrap().clone()
        };
        let e1 = run(0.1).sub(&run(0.05)).l2_norm();
        let e2 = run(0.05).sub(&run(0.025)).l2_norm();
        let ratio = e1 / e2;
        assert!((10.0..=24.0).contains(&ratio), "Richardson ratio {ratio}");
    }

    #[test]
    fn integrate_basics_and_blowup_functional() {
        let g = grid(8);
        let p = PhysParams::new(1.0, 1.0, 2.0, 0.1).unwrap();
        let sys = CoupledSystem::new(g.clone(), p, vec![(Role::UQg, SystemKind::Qg)]).unwrap();
        let u0 = qg_project(&div_free(&g, 4, 8), p.froude).unwrap();
        let mut st = FlowState::new(0.0, p);
        st.insert3(Role::UQg, u0.clone());
        let obs = vec![observers::sobolev(Role::UQg, 0.5)];
        // T = 0: record with initial diagnostics only
        let rec = integrate(
            &sys,
            st.clone(),
            &IntegrateOpts { t_end: 0.0, dt: DtPolicy::Fixed { dt: 0.1 }, observe_every: 1 },
            &obs,
            None,
        )
        .unwrap();
        assert_eq!(rec.times.len(), 1);
        assert_eq!(rec.outcome, RunOutcome::Completed);

        let rec = integrate(
            &sys,
            st,
            &IntegrateOpts { t_end: 0.25, dt: DtPolicy::Cfl { c: 0.5, dt_max: 0.05 }, observe_every: 1 },
            &obs,
            None,
        )
        .unwrap();
        assert!(*rec.times.last().unwrap() > 0.2499);
        let col = rec.column("hs_U_QG_0.5").unwrap();
        assert!(col.iter().all(|v| v.is_finite()));

        // blow-up functional: heat-decayed single mode against the closed form
        let mut u = SpectralField::zeros(g.clone(), 1).unwrap();
        u.coeffs_mut()[[0, 1, 0, 0]] = Complex64::new(0.5, 0.0);
        u.coeffs_mut()[[0, 7, 0, 0]] = Complex64::new(0.5, 0.0);
        let nu = 0.8;
        let series: Vec<(f64, SpectralField)> = (0..=200)
            .map(|i| {
                let t = i as f64 * 0.005;
                (t, u.scaled((-nu * t).exp()))
            })
            .collect();
        let got = blowup_functional(&series);
        let a2 = sobolev_norm(&u, 1.5).powi(2);
        let t_end = 1.0;
        let exact = a2 * (1.0 - (-2.0 * nu * t_end).exp()) / (2.0 * nu);
        assert_relative_eq!(got, exact, max_relative = 1e-4);
        assert!(blowup_functional(&series[..1]) == 0.0);
        // monotone in t
        let shorter = blowup_functional(&series[..100]);
        assert!(shorter <= got);
    }

    #[test]
    fn divergence_is_reported_with_partial_record() {
        let g = grid(8);
        let p = PhysParams::new(1e-9, 1e-9, 2.0, 1.0).unwrap();
        let sys = CoupledSystem::new(g.clone(), p, vec![(Role::U, SystemKind::Pe)]).unwrap();
        // absurdly large data + big dt blows up the explicit nonlinearity
        let u0 = div_free(&g, 4, 9).scaled(1e8);
        let mut st = FlowState::new(0.0, p);
        st.insert3(Role::U, u0);
        let rec = integrate(
            &sys,
            st,
            &IntegrateOpts { t_end: 10.0, dt: DtPolicy::Fixed { dt: 1.0 }, observe_every: 1 },
            &[],
            None,
        )
        .unwrap();
        assert!(matches!(rec.outcome, RunOutcome::Diverged { .. }));
    }

    #[test]
    fn grid2_roles_round_trip() {
        let g2 = Grid2::new([8, 8], [2.0 * PI; 2], 2.0 / 3.0).unwrap();
        let p = PhysParams::new(0.1, 0.1, 2.0, 1.0).unwrap();
        let mut st = FlowState::new(0.0, p);
        st.insert2(Role::Ubar, Field2D::zeros(g2));
        assert!(st.field2(Role::Ubar).is_ok());
        assert!(st.field3(Role::Ubar).is_err());
        assert!(st.field3(Role::U).is_err());
    }
}
