//! Case catalog, key-value configuration, field-file ingestion, metrics
//! output, and the dense Schur condition-number oracle.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::discretization::{
    assemble_jacobian, assemble_schur_approx, weighted_residual, EqRow, ReservoirModel, Scaling,
    SourceKind, SourceTerm, State, Unknown,
};
use crate::error::{Error, Result};
use crate::grid::{build_grid, StructuredGrid};
use crate::precond::{Decouple, StageOrder, TwoStageSpec};
use crate::props::PropertyConfig;
use crate::solver::{time_loop_into, LinearSolver, NewtonConfig, Schedule, SolveStats};
use crate::sparse::csr::CsrMatrix;
use crate::sparse::matrix_market::write_matrix_market;

/// 1 millidarcy in m^2.
pub const MILLIDARCY_TO_M2: f64 = 9.869233e-16;

const DAY_SECONDS: f64 = 86400.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseKind {
    /// N x N, 50 x 50 m, six heaters (three per opposing side).
    Heater2d,
    /// N x N, isotropic permeability, three injectors / three producers.
    Well2dIso,
    /// Like `Well2dIso` with k_y = 3e-10 m^2.
    Well2dAniso,
    /// N x N x N, 50 m box, 21 injectors in the top cell layer and 21
    /// producers in the bottom layer, gravity on.
    Well3d,
    /// `Well2dIso` with the oil compressibility and thermal expansion
    /// multiplied by `coupling_factor`.
    Crosscoup2d,
    /// 60 x 120 slice driven by permeability/porosity field files.
    Spe10Slice,
    /// Homogeneous n x 2n slice with two heaters (condition-number study).
    SliceHeater,
    /// Homogeneous n x 2n slice with one injector and one producer.
    SliceWell,
}

impl CaseKind {
    pub fn parse(s: &str) -> Result<CaseKind> {
        Ok(match s {
            "heater-2d" => CaseKind::Heater2d,
            "well-2d-iso" => CaseKind::Well2dIso,
            "well-2d-aniso" => CaseKind::Well2dAniso,
            "well-3d" => CaseKind::Well3d,
            "crosscoup-2d" => CaseKind::Crosscoup2d,
            "spe10-slice" => CaseKind::Spe10Slice,
            "slice-heater" => CaseKind::SliceHeater,
            "slice-well" => CaseKind::SliceWell,
            other => {
                return Err(Error::Parse(format!("unknown case '{other}'")));
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            CaseKind::Heater2d => "heater-2d",
            CaseKind::Well2dIso => "well-2d-iso",
            CaseKind::Well2dAniso => "well-2d-aniso",
            CaseKind::Well3d => "well-3d",
            CaseKind::Crosscoup2d => "crosscoup-2d",
            CaseKind::Spe10Slice => "spe10-slice",
            CaseKind::SliceHeater => "slice-heater",
            CaseKind::SliceWell => "slice-well",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldUnit {
    M2,
    Millidarcy,
}

/// Complete description of one run: case, grid resolution, schedule,
/// preconditioner, and output destination.
#[derive(Debug, Clone)]
pub struct CaseConfig {
    pub case: CaseKind,
    /// Refinement parameter N (cells per edge; slices use n x 2n).
    pub n: usize,
    pub steps: usize,
    pub dt_days: f64,
    pub heuristics: bool,
    pub precond: String,
    pub decouple: Option<Decouple>,
    pub ilu_level: Option<usize>,
    pub subdomains: usize,
    pub order: StageOrder,
    pub scaling: bool,
    pub coupling_factor: f64,
    pub s0: f64,
    pub p0: f64,
    pub t0: f64,
    /// Per-well volumetric rate (m^3/s).
    pub rate: f64,
    pub t_inj: f64,
    pub t_heater: f64,
    /// Heater heat-transfer coefficient (W/K).
    pub heater_u: f64,
    /// Multiplies the (scalar) permeability; used for the
    /// high-permeability oracle cases.
    pub perm_scale: f64,
    pub perm_file: Option<PathBuf>,
    pub poro_file: Option<PathBuf>,
    pub perm_unit: FieldUnit,
    /// Output path prefix; writes `<out>.csv` and `<out>.json`.
    pub out: Option<PathBuf>,
}

impl CaseConfig {
    pub fn default_for(case: CaseKind) -> CaseConfig {
        let (n, steps, dt_days, s0, rate) = match case {
            CaseKind::Heater2d => (20, 2, 10.0, 0.9, 3e-7),
            CaseKind::Well2dIso | CaseKind::Well2dAniso => (20, 2, 10.0, 0.9, 1e-7),
            CaseKind::Well3d => (20, 5, 10.0, 0.99, 1e-7),
            CaseKind::Crosscoup2d => (40, 2, 2.0, 0.9, 3e-7),
            CaseKind::Spe10Slice => (60, 2, 10.0, 0.9, 3e-7),
            CaseKind::SliceHeater | CaseKind::SliceWell => (15, 1, 10.0, 0.9, 1e-5),
        };
        CaseConfig {
            case,
            n,
            steps,
            dt_days,
            heuristics: false,
            precond: "cpr-amg".into(),
            decouple: None,
            ilu_level: None,
            subdomains: 1,
            order: StageOrder::RestrictedFirst,
            scaling: true,
            coupling_factor: 1.0,
            s0,
            p0: 4.1369e7,
            t0: 288.706,
            rate,
            t_inj: 373.15,
            t_heater: 373.15,
            heater_u: 20.0,
            perm_scale: 1.0,
            perm_file: None,
            poro_file: None,
            perm_unit: FieldUnit::Millidarcy,
            out: None,
        }
    }

    /// Parses the flat `key = value` format (`#` starts a comment). The
    /// `case` key must come first so later keys override its defaults.
    pub fn from_text(text: &str) -> Result<CaseConfig> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            pairs.push((key.trim().to_string(), value.trim().to_string()));
        }
        let case_value = pairs
            .iter()
            .find(|(k, _)| k == "case")
            .map(|(_, v)| v.clone())
            .ok_or_else(|| Error::Parse("config must set 'case'".into()))?;
        let mut cfg = CaseConfig::default_for(CaseKind::parse(&case_value)?);
        for (key, value) in &pairs {
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    /// Applies one `key = value` setting; also used for CLI overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Parse(format!("{key}: invalid {what} '{value}'"));
        match key {
            "case" => self.case = CaseKind::parse(value)?,
            "n" => self.n = value.parse().map_err(|_| bad("integer"))?,
            "steps" => self.steps = value.parse().map_err(|_| bad("integer"))?,
            "dt_days" => self.dt_days = value.parse().map_err(|_| bad("number"))?,
            "heuristics" => self.heuristics = parse_switch(value)?,
            "precond" => self.precond = value.to_string(),
            "decouple" => {
                self.decouple = Some(match value {
                    "none" => Decouple::None,
                    "qi" => Decouple::QuasiImpes,
                    "ti" => Decouple::TrueImpes,
                    _ => return Err(bad("decoupling (none|qi|ti)")),
                })
            }
            "ilu_level" => self.ilu_level = Some(value.parse().map_err(|_| bad("integer"))?),
            "subdomains" => self.subdomains = value.parse().map_err(|_| bad("integer"))?,
            "order" => {
                self.order = match value {
                    "restricted-first" => StageOrder::RestrictedFirst,
                    "ilu-first" => StageOrder::IluFirst,
                    _ => return Err(bad("order (restricted-first|ilu-first)")),
                }
            }
            "scaling" => self.scaling = parse_switch(value)?,
            "coupling_factor" => {
                self.coupling_factor = value.parse().map_err(|_| bad("number"))?
            }
            "s0" => self.s0 = value.parse().map_err(|_| bad("number"))?,
            "p0" => self.p0 = value.parse().map_err(|_| bad("number"))?,
            "t0" => self.t0 = value.parse().map_err(|_| bad("number"))?,
            "rate" => self.rate = value.parse().map_err(|_| bad("number"))?,
            "t_inj" => self.t_inj = value.parse().map_err(|_| bad("number"))?,
            "t_heater" => self.t_heater = value.parse().map_err(|_| bad("number"))?,
            "heater_u" => self.heater_u = value.parse().map_err(|_| bad("number"))?,
            "perm_scale" => self.perm_scale = value.parse().map_err(|_| bad("number"))?,
            "perm_file" => self.perm_file = Some(PathBuf::from(value)),
            "poro_file" => self.poro_file = Some(PathBuf::from(value)),
            "perm_unit" => {
                self.perm_unit = match value {
                    "m2" => FieldUnit::M2,
                    "millidarcy" | "md" => FieldUnit::Millidarcy,
                    _ => return Err(bad("unit (m2|millidarcy)")),
                }
            }
            "out" => self.out = Some(PathBuf::from(value)),
            other => return Err(Error::Parse(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// The effective settings as ordered key-value strings (JSON echo).
    pub fn echo_pairs(&self) -> Vec<(String, String)> {
        let mut v: Vec<(String, String)> = vec![
            ("case".into(), self.case.name().into()),
            ("n".into(), self.n.to_string()),
            ("steps".into(), self.steps.to_string()),
            ("dt_days".into(), self.dt_days.to_string()),
            ("heuristics".into(), on_off(self.heuristics).into()),
            ("precond".into(), self.precond.clone()),
            (
                "decouple".into(),
                match self.decouple {
                    None => "default".into(),
                    Some(Decouple::None) => "none".into(),
                    Some(Decouple::QuasiImpes) => "qi".into(),
                    Some(Decouple::TrueImpes) => "ti".into(),
                },
            ),
            (
                "ilu_level".into(),
                self.ilu_level.map_or("default".into(), |k| k.to_string()),
            ),
            ("subdomains".into(), self.subdomains.to_string()),
            (
                "order".into(),
                match self.order {
                    StageOrder::RestrictedFirst => "restricted-first".into(),
                    StageOrder::IluFirst => "ilu-first".into(),
                },
            ),
            ("scaling".into(), on_off(self.scaling).into()),
            ("coupling_factor".into(), self.coupling_factor.to_string()),
            ("s0".into(), self.s0.to_string()),
            ("p0".into(), self.p0.to_string()),
            ("t0".into(), self.t0.to_string()),
            ("rate".into(), self.rate.to_string()),
            ("t_inj".into(), self.t_inj.to_string()),
            ("t_heater".into(), self.t_heater.to_string()),
            ("heater_u".into(), self.heater_u.to_string()),
            ("perm_scale".into(), self.perm_scale.to_string()),
        ];
        if let Some(p) = &self.perm_file {
            v.push(("perm_file".into(), p.display().to_string()));
        }
        if let Some(p) = &self.poro_file {
            v.push(("poro_file".into(), p.display().to_string()));
        }
        v
    }

    /// The preconditioner spec after applying overrides.
    pub fn precond_spec(&self) -> Result<TwoStageSpec> {
        let mut spec = TwoStageSpec::from_variant(&self.precond)?;
        if let Some(d) = self.decouple {
            spec.stage_one.decouple = d;
        }
        if let Some(k) = self.ilu_level {
            spec.ilu_level = k;
        }
        spec.subdomains = self.subdomains;
        spec.order = self.order;
        spec.validate(self.scaling)?;
        Ok(spec)
    }

    pub fn schedule(&self) -> Schedule {
        if self.heuristics {
            Schedule::adaptive(self.steps, self.dt_days * DAY_SECONDS)
        } else {
            Schedule::fixed(self.steps, self.dt_days * DAY_SECONDS)
        }
    }
}

fn parse_switch(value: &str) -> Result<bool> {
    match value {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        other => Err(Error::Parse(format!("expected on/off, got '{other}'"))),
    }
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

/// Cell containing the physical point at the given domain fractions;
/// stable as the grid is refined.
fn cell_at(grid: &StructuredGrid, fx: f64, fy: f64, fz: f64) -> usize {
    let clamp = |f: f64, n: usize| (((f * n as f64) as usize).min(n - 1), ());
    let (i, _) = clamp(fx, grid.nx);
    let (j, _) = clamp(fy, grid.ny);
    let (k, _) = clamp(fz, grid.nz);
    grid.cell_index(i, j, k)
}

fn point_source(grid: &StructuredGrid, kind: SourceKind, fx: f64, fy: f64, fz: f64) -> SourceTerm {
    SourceTerm {
        kind,
        cells: vec![(cell_at(grid, fx, fy, fz), 1.0)],
    }
}

/// Fractional y-positions of the three per-side 2D source terms.
const SIDE_FRACTIONS: [f64; 3] = [1.0 / 6.0, 0.5, 5.0 / 6.0];

/// Fractional (x, y) positions of the 21 quasi-uniform 3D well locations:
/// a 5 x 5 lattice at odd tenths with the four corners removed.
fn well_3d_positions() -> Vec<(f64, f64)> {
    let ticks = [0.1, 0.3, 0.5, 0.7, 0.9];
    let mut out = Vec::with_capacity(21);
    for &x in &ticks {
        for &y in &ticks {
            let corner = (x == 0.1 || x == 0.9) && (y == 0.1 || y == 0.9);
            if !corner {
                out.push((x, y));
            }
        }
    }
    out
}

fn two_d_side_sources(grid: &StructuredGrid, cfg: &CaseConfig, heaters: bool) -> Vec<SourceTerm> {
    let mut sources = Vec::new();
    for &fy in &SIDE_FRACTIONS {
        if heaters {
            for fx in [0.0, 1.0] {
                sources.push(point_source(
                    grid,
                    SourceKind::Heater {
                        u: cfg.heater_u,
                        t_heater: cfg.t_heater,
                    },
                    fx,
                    fy,
                    0.0,
                ));
            }
        } else {
            sources.push(point_source(
                grid,
                SourceKind::InjectorConstRate {
                    rate: cfg.rate,
                    t_inj: cfg.t_inj,
                },
                0.0,
                fy,
                0.0,
            ));
            sources.push(point_source(
                grid,
                SourceKind::ProducerConstRate { rate: cfg.rate },
                1.0,
                fy,
                0.0,
            ));
        }
    }
    sources
}

/// Everything needed to run one configured case.
#[derive(Debug)]
pub struct BuiltCase {
    pub model: ReservoirModel,
    pub initial: State,
    pub schedule: Schedule,
    pub spec: TwoStageSpec,
}

pub fn build_case(cfg: &CaseConfig) -> Result<BuiltCase> {
    if cfg.n < 2 {
        return Err(Error::InvalidArgument("n must be at least 2".into()));
    }
    let (grid, gravity) = match cfg.case {
        CaseKind::Heater2d
        | CaseKind::Well2dIso
        | CaseKind::Well2dAniso
        | CaseKind::Crosscoup2d => (build_grid(cfg.n, cfg.n, 1, 50.0, 50.0, 1.0)?, 0.0),
        CaseKind::Well3d => (build_grid(cfg.n, cfg.n, cfg.n, 50.0, 50.0, 50.0)?, 9.81),
        // SPE10-style slice: 20 ft x 10 ft cells, 2 ft thick.
        CaseKind::Spe10Slice => (
            build_grid(60, 120, 1, 60.0 * 6.096, 120.0 * 3.048, 0.6096)?,
            0.0,
        ),
        CaseKind::SliceHeater | CaseKind::SliceWell => {
            (build_grid(cfg.n, 2 * cfg.n, 1, 50.0, 100.0, 1.0)?, 0.0)
        }
    };
    let n_cells = grid.num_cells();

    let base_perm = 3e-13 * cfg.perm_scale;
    let (perm_x, perm_y, perm_z, phi) = match cfg.case {
        CaseKind::Spe10Slice => {
            let path = cfg.perm_file.as_ref().ok_or_else(|| {
                Error::InvalidArgument("spe10-slice requires perm_file".into())
            })?;
            let (mut kx, mut ky, mut kz) = load_perm_file(path, n_cells, cfg.perm_unit)?;
            for v in kx.iter_mut().chain(&mut ky).chain(&mut kz) {
                *v *= cfg.perm_scale;
            }
            let phi = match &cfg.poro_file {
                Some(p) => load_field_file(p, n_cells)?,
                None => vec![0.2; n_cells],
            };
            (kx, ky, kz, phi)
        }
        CaseKind::Well2dAniso => (
            vec![base_perm; n_cells],
            vec![3e-10 * cfg.perm_scale; n_cells],
            vec![base_perm; n_cells],
            vec![0.2; n_cells],
        ),
        _ => (
            vec![base_perm; n_cells],
            vec![base_perm; n_cells],
            vec![base_perm; n_cells],
            vec![0.2; n_cells],
        ),
    };

    let sources = match cfg.case {
        CaseKind::Heater2d => two_d_side_sources(&grid, cfg, true),
        CaseKind::Well2dIso | CaseKind::Well2dAniso | CaseKind::Crosscoup2d => {
            two_d_side_sources(&grid, cfg, false)
        }
        CaseKind::Well3d => {
            let mut sources = Vec::with_capacity(42);
            for (fx, fy) in well_3d_positions() {
                sources.push(point_source(
                    &grid,
                    SourceKind::InjectorConstRate {
                        rate: cfg.rate,
                        t_inj: cfg.t_inj,
                    },
                    fx,
                    fy,
                    1.0,
                ));
                sources.push(point_source(
                    &grid,
                    SourceKind::ProducerConstRate { rate: cfg.rate },
                    fx,
                    fy,
                    0.0,
                ));
            }
            sources
        }
        CaseKind::Spe10Slice | CaseKind::SliceWell => vec![
            point_source(
                &grid,
                SourceKind::InjectorConstRate {
                    rate: cfg.rate,
                    t_inj: cfg.t_inj,
                },
                0.5,
                0.25,
                0.0,
            ),
            point_source(
                &grid,
                SourceKind::ProducerConstRate { rate: cfg.rate },
                0.5,
                0.75,
                0.0,
            ),
        ],
        CaseKind::SliceHeater => [0.25, 0.75]
            .iter()
            .map(|&fy| {
                point_source(
                    &grid,
                    SourceKind::Heater {
                        u: cfg.heater_u,
                        t_heater: cfg.t_heater,
                    },
                    0.5,
                    fy,
                    0.0,
                )
            })
            .collect(),
    };

    let mut props = PropertyConfig::default();
    props.coupling_factor = cfg.coupling_factor;
    let c_ref = cfg.s0 * props.c_v_oil + (1.0 - cfg.s0) * props.c_v_water;
    let model = ReservoirModel {
        grid,
        phi,
        perm_x,
        perm_y,
        perm_z,
        props,
        sources,
        dt: cfg.dt_days * DAY_SECONDS,
        gravity,
        scaling: Scaling {
            enabled: cfg.scaling,
            t_ref: cfg.t0,
            c_ref,
        },
    };
    model.validate()?;
    Ok(BuiltCase {
        initial: State::uniform(model.grid.num_cells(), cfg.p0, cfg.t0, cfg.s0),
        schedule: cfg.schedule(),
        spec: cfg.precond_spec()?,
        model,
    })
}

/// One accepted time step, in CSV column order.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub step: usize,
    pub dt_days: f64,
    pub newton_iters: usize,
    pub total_linear_iters: usize,
    pub avg_linear_per_newton: f64,
    pub residual_pressure: f64,
    pub residual_energy: f64,
    pub residual_oil: f64,
    pub wall_seconds: f64,
}

pub fn metrics_rows(stats: &SolveStats) -> Vec<MetricsRow> {
    stats
        .steps
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let lin = s.total_linear_iters();
            MetricsRow {
                step: i + 1,
                dt_days: s.dt / DAY_SECONDS,
                newton_iters: s.newton_iters,
                total_linear_iters: lin,
                avg_linear_per_newton: if s.newton_iters == 0 {
                    0.0
                } else {
                    lin as f64 / s.newton_iters as f64
                },
                residual_pressure: s.residual_norms.0,
                residual_energy: s.residual_norms.1,
                residual_oil: s.residual_norms.2,
                wall_seconds: s.wall_seconds,
            }
        })
        .collect()
}

pub const CSV_HEADER: &str = "step,dt_days,newton_iters,total_linear_iters,\
avg_linear_per_newton,residual_pressure,residual_energy,residual_oil,wall_seconds";

pub fn csv_string(rows: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{:e},{:e},{:e},{:.6}",
            r.step,
            r.dt_days,
            r.newton_iters,
            r.total_linear_iters,
            r.avg_linear_per_newton,
            r.residual_pressure,
            r.residual_energy,
            r.residual_oil,
            r.wall_seconds
        )
        .expect("string write");
    }
    out
}

/// Result of one case run; `aborted` holds the solver diagnostic if the
/// time loop failed (metrics then cover the accepted steps only).
#[derive(Debug)]
pub struct CaseOutcome {
    pub rows: Vec<MetricsRow>,
    pub stats: SolveStats,
    pub final_state: Option<State>,
    pub aborted: Option<String>,
}

impl CaseOutcome {
    pub fn summary_json(&self, cfg: &CaseConfig) -> serde_json::Value {
        let config: serde_json::Map<String, serde_json::Value> = cfg
            .echo_pairs()
            .into_iter()
            .map(|(k, v)| (k, serde_json::Value::String(v)))
            .collect();
        serde_json::json!({
            "config": config,
            "accepted_steps": self.rows.len(),
            "total_newton_iters": self.stats.total_newton(),
            "total_linear_iters": self.stats.total_linear(),
            "avg_linear_per_newton": self.stats.avg_linear_per_newton(),
            "aborted": self.aborted,
            "steps": self.rows.iter().map(|r| serde_json::json!({
                "step": r.step,
                "dt_days": r.dt_days,
                "newton_iters": r.newton_iters,
                "total_linear_iters": r.total_linear_iters,
                "avg_linear_per_newton": r.avg_linear_per_newton,
                "residual_pressure": r.residual_pressure,
                "residual_energy": r.residual_energy,
                "residual_oil": r.residual_oil,
                "wall_seconds": r.wall_seconds,
            })).collect::<Vec<_>>(),
        })
    }
}

/// Builds and runs the configured case, writing `<out>.csv` and
/// `<out>.json` when an output prefix is set. A solver abort is recorded
/// in the outcome rather than propagated.
pub fn run_case(cfg: &CaseConfig) -> Result<CaseOutcome> {
    let built = build_case(cfg)?;
    let newton_cfg = NewtonConfig::default();
    let mut stats = SolveStats::default();
    let result = time_loop_into(
        &built.model,
        &built.initial,
        LinearSolver::TwoStage(&built.spec),
        &newton_cfg,
        &built.schedule,
        &mut stats,
    );
    let (final_state, aborted) = match result {
        Ok(state) => (Some(state), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let outcome = CaseOutcome {
        rows: metrics_rows(&stats),
        stats,
        final_state,
        aborted,
    };
    if let Some(out) = &cfg.out {
        let csv_path = out.with_extension("csv");
        let json_path = out.with_extension("json");
        std::fs::write(&csv_path, csv_string(&outcome.rows))?;
        std::fs::write(
            &json_path,
            serde_json::to_string_pretty(&outcome.summary_json(cfg)).expect("json") + "\n",
        )?;
    }
    Ok(outcome)
}

/// Parses a whitespace-separated field file, reporting the position of the
/// first bad token.
fn parse_field_tokens(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let mut values = Vec::new();
    for (idx, tok) in text.split_whitespace().enumerate() {
        let v: f64 = tok.parse().map_err(|_| {
            Error::Parse(format!(
                "{}: token {} ('{}') is not a number",
                path.display(),
                idx + 1,
                tok
            ))
        })?;
        values.push(v);
    }
    Ok(values)
}

/// Loads a scalar per-cell field (x-fastest, then y, then z) of exactly
/// `n` values.
pub fn load_field_file(path: &Path, n: usize) -> Result<Vec<f64>> {
    let values = parse_field_tokens(path)?;
    if values.len() != n {
        return Err(Error::Parse(format!(
            "{}: expected {} values, found {}",
            path.display(),
            n,
            values.len()
        )));
    }
    Ok(values)
}

/// Loads a permeability file of `n` values (isotropic) or `3n` values
/// (x, y, z fields concatenated), converting units to m^2.
pub fn load_perm_file(
    path: &Path,
    n: usize,
    unit: FieldUnit,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let mut values = parse_field_tokens(path)?;
    if unit == FieldUnit::Millidarcy {
        for v in &mut values {
            *v *= MILLIDARCY_TO_M2;
        }
    }
    match values.len() {
        len if len == n => Ok((values.clone(), values.clone(), values)),
        len if len == 3 * n => {
            let z = values.split_off(2 * n);
            let y = values.split_off(n);
            Ok((values, y, z))
        }
        len => Err(Error::Parse(format!(
            "{}: expected {} or {} values, found {}",
            path.display(),
            n,
            3 * n,
            len
        ))),
    }
}

/// 2-norm condition number via SVD; infinite when numerically singular.
fn cond2(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= f64::EPSILON * max * m.nrows() as f64 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn to_dmatrix(a: &CsrMatrix) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(a.n_rows, a.n_cols);
    for r in 0..a.n_rows {
        let (cols, vals) = a.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            m[(r, c)] = v;
        }
    }
    m
}

/// cond(S~^-1 S) for a candidate approximation; infinite if S~ is singular.
fn preconditioned_cond(stilde: &DMatrix<f64>, s_exact: &DMatrix<f64>) -> f64 {
    match stilde.clone().lu().solve(s_exact) {
        Some(prec) => cond2(&prec),
        None => f64::INFINITY,
    }
}

/// Condition numbers of the exact temperature Schur complement and of the
/// preconditioned operators for three sparse approximations.
#[derive(Debug, Clone, Copy)]
pub struct SchurConditionReport {
    /// cond(S_T) with S_T = A_TT - A_Tp A_pp^-1 A_pT.
    pub cond_schur_exact: f64,
    pub cond_a_tt: f64,
    /// cond(S~^-1 S_T) for S~ = A_TT - A_Tp diag(A_pp)^-1 A_pT.
    pub precond_diag: f64,
    /// cond(S~^-1 S_T) for S~ = A_TT.
    pub precond_att: f64,
    /// cond(S~^-1 S_T) for the sparse upwinded Schur approximation.
    pub precond_schur: f64,
}

fn condition_report_from_blocks(
    app: &DMatrix<f64>,
    a_pt: &DMatrix<f64>,
    a_tp: &DMatrix<f64>,
    att: &DMatrix<f64>,
    stilde: &DMatrix<f64>,
) -> Result<SchurConditionReport> {
    let app_inv_apt = app
        .clone()
        .lu()
        .solve(a_pt)
        .ok_or_else(|| Error::Factorization("A_pp is singular".into()))?;
    let s_exact = att - a_tp * app_inv_apt;

    let mut diag_inv_apt = a_pt.clone();
    for i in 0..app.nrows() {
        let d = app[(i, i)];
        if d == 0.0 {
            return Err(Error::Factorization("zero pressure diagonal".into()));
        }
        for j in 0..a_pt.ncols() {
            diag_inv_apt[(i, j)] /= d;
        }
    }
    let s_diag = att - a_tp * diag_inv_apt;

    Ok(SchurConditionReport {
        cond_schur_exact: cond2(&s_exact),
        cond_a_tt: cond2(att),
        precond_diag: preconditioned_cond(&s_diag, &s_exact),
        precond_att: preconditioned_cond(att, &s_exact),
        precond_schur: preconditioned_cond(stilde, &s_exact),
    })
}

/// Dense study of the temperature Schur complement at the given state.
/// Limited to small grids; everything is formed densely.
pub fn schur_condition_oracle(
    model: &ReservoirModel,
    state: &State,
) -> Result<SchurConditionReport> {
    let n = model.grid.num_cells();
    if n > 2500 {
        return Err(Error::InvalidArgument(
            "the condition-number oracle is dense; use at most 2500 cells".into(),
        ));
    }
    let sys = assemble_jacobian(model, state, state)?;
    let idx: Vec<usize> = (0..n).collect();
    let idx_t: Vec<usize> = (n..2 * n).collect();
    let a00 = sys.block(
        &[EqRow::Pressure, EqRow::Energy],
        &[Unknown::P, Unknown::T],
    );
    let app = to_dmatrix(&a00.submatrix(&idx, &idx));
    let a_pt = to_dmatrix(&a00.submatrix(&idx, &idx_t));
    let a_tp = to_dmatrix(&a00.submatrix(&idx_t, &idx));
    let att = to_dmatrix(&a00.submatrix(&idx_t, &idx_t));
    let stilde = to_dmatrix(&assemble_schur_approx(model, state)?);
    condition_report_from_blocks(&app, &a_pt, &a_tp, &att, &stilde)
}

/// Runs the case schedule up to (and excluding) `step`, then writes the
/// Jacobian and right-hand side of the first Newton linearization of that
/// step as Matrix Market files `<prefix>_step<k>_{jacobian,rhs}.mtx`.
pub fn export_matrix(cfg: &CaseConfig, step: usize, prefix: &Path) -> Result<(PathBuf, PathBuf)> {
    if step == 0 || step > cfg.steps {
        return Err(Error::InvalidArgument(format!(
            "step must be in 1..={}",
            cfg.steps
        )));
    }
    let built = build_case(cfg)?;
    let mut state = built.initial.clone();
    if step > 1 {
        let mut warmup = cfg.clone();
        warmup.steps = step - 1;
        warmup.out = None;
        let warm_built = build_case(&warmup)?;
        let mut stats = SolveStats::default();
        state = time_loop_into(
            &warm_built.model,
            &built.initial,
            LinearSolver::TwoStage(&built.spec),
            &NewtonConfig::default(),
            &warm_built.schedule,
            &mut stats,
        )?;
    }
    let sys = assemble_jacobian(&built.model, &state, &state)?;
    let raw = crate::discretization::assemble_residual(&built.model, &state, &state)?;
    let rhs: Vec<f64> = weighted_residual(&built.model, &raw)
        .iter()
        .map(|v| -v)
        .collect();
    let rhs_triplets: Vec<(usize, usize, f64)> =
        rhs.iter().enumerate().map(|(i, &v)| (i, 0, v)).collect();
    let rhs_mat = CsrMatrix::from_triplets(rhs.len(), 1, &rhs_triplets)?;

    let stem = prefix.file_name().map(|s| s.to_string_lossy().into_owned());
    let name = |suffix: &str| {
        let base = stem.clone().unwrap_or_else(|| "matrix".into());
        prefix.with_file_name(format!("{base}_step{step}_{suffix}.mtx"))
    };
    let jac_path = name("jacobian");
    let rhs_path = name("rhs");
    write_matrix_market(&jac_path, &sys.matrix)?;
    write_matrix_market(&rhs_path, &rhs_mat)?;
    Ok((jac_path, rhs_path))
}
