//! Config-driven experiment pipeline: data generation, learning sweeps,
//! spectral analysis, forecasting and CSV reports.
//!
//! Stages exchange data only through the artifact directory, so each can
//! be rerun on its own. Every file is a pure function of the config text,
//! which makes repeated runs byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::forecast::{evaluate_with, ErrorReport, BLOWUP_GUARD};
use crate::grid::{Grid, Grid1D, Grid2D};
use crate::io::{
    read_key_values, read_model, read_snapshots, write_eigen_csv, write_discs_csv,
    write_error_matrix, write_errors_csv, write_key_values, write_model, write_snapshots, write_stencil_table,
    write_summary_csv, ErrorMatrix, KeyValues, StencilRow, SummaryRow,
};
use crate::learner::{learn_model, LearnConfig, LearnedModel, Method, RidgeConfig, RidgeScaling};
use crate::qp::{QpOptions, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::refsim::{simulate, CaseKind, CaseParams, RhsSource, SnapshotSet};
use crate::spectra::{gershgorin_discs, sort_complex, stability_report_capped, DEFAULT_STABILITY_TOL, DENSE_CAP};

/// Exit status for a failed run.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Parse { .. } | Error::InvalidStencil(_) | Error::InvalidGrid(_) => 2,
        Error::SingularSystem { .. }
        | Error::Solver { .. }
        | Error::Qp(_)
        | Error::Constraint(_)
        | Error::Spectral(_)
        | Error::InsufficientData(_) => 3,
        Error::BlowUp { .. } => 4,
        _ => 1,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub dt_seconds: Option<f64>,
    pub snapshots: Option<usize>,
    /// `exact` or `finite-difference`.
    pub rhs_source: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub points: Option<usize>,
    pub length: Option<f64>,
    pub points_x: Option<usize>,
    pub points_y: Option<usize>,
    pub length_x: Option<f64>,
    pub length_y: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicsSection {
    pub velocity: Option<f64>,
    pub velocity_x: Option<f64>,
    pub velocity_y: Option<f64>,
    pub viscosity: Option<f64>,
}

/// Pulse centre and width for the 1-D linear cases; mean and standard
/// deviation of the random Burgers field.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    pub center: Option<f64>,
    pub width: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StencilSection {
    /// One list of sizes per operator block; every combination is run.
    pub sizes: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RidgeSection {
    #[serde(default = "default_beta")]
    pub beta1: Vec<f64>,
    #[serde(default = "default_beta")]
    pub beta2: Vec<f64>,
    /// `parameter` or `stencil`.
    #[serde(default = "default_scaling")]
    pub scaling: String,
}

fn default_beta() -> Vec<f64> {
    vec![1e-3]
}

fn default_scaling() -> String {
    RidgeScaling::Parameter.name().into()
}

impl Default for RidgeSection {
    fn default() -> Self {
        RidgeSection {
            beta1: default_beta(),
            beta2: default_beta(),
            scaling: default_scaling(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Dominance margin; defaults to 0 for linear and 1e-8 for linearized
    /// constraints.
    pub margin: Option<f64>,
    /// Linearization state for Burgers; defaults to the training mean.
    pub equilibrium: Option<f64>,
}

fn default_tol() -> f64 {
    DEFAULT_TOL
}

fn default_max_iter() -> usize {
    DEFAULT_MAX_ITER
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            margin: None,
            equilibrium: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    #[serde(default = "default_dense_cap")]
    pub dense_cap: usize,
    /// Points per direction of the reduced 2-D grid whose dense spectrum
    /// stands in for operators above the dense cap.
    #[serde(default = "default_reduced_points")]
    pub reduced_points: usize,
    #[serde(default = "default_stability_tol")]
    pub stability_tol: f64,
    #[serde(default = "default_guard")]
    pub blowup_guard: f64,
}

fn default_dense_cap() -> usize {
    DENSE_CAP
}

fn default_reduced_points() -> usize {
    31
}

fn default_stability_tol() -> f64 {
    DEFAULT_STABILITY_TOL
}

fn default_guard() -> f64 {
    BLOWUP_GUARD
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            dense_cap: DENSE_CAP,
            reduced_points: default_reduced_points(),
            stability_tol: DEFAULT_STABILITY_TOL,
            blowup_guard: BLOWUP_GUARD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Write the training states and right-hand sides; large 2-D runs can
    /// skip them since they are regenerated deterministically.
    #[serde(default = "default_true")]
    pub snapshot_data: bool,
}

fn default_true() -> bool {
    true
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { snapshot_data: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub case: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    /// Forecast length as a multiple of the training window.
    #[serde(default = "default_horizon")]
    pub horizon_multiplier: usize,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub physics: PhysicsSection,
    #[serde(default)]
    pub initial: InitialSection,
    pub stencils: StencilSection,
    #[serde(default)]
    pub ridge: RidgeSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub output: OutputSection,
}

fn default_methods() -> Vec<String> {
    vec![Method::Ldo.slug().into(), Method::Sldo.slug().into()]
}

fn default_horizon() -> usize {
    2
}

/// One learning run of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub method: Method,
    pub sizes: Vec<usize>,
    pub ridge: RidgeConfig,
}

impl RunSpec {
    /// Directory-safe name, e.g. `ldo_s5-5_b0.1-0.01`.
    pub fn label(&self) -> String {
        let sizes: Vec<String> = self.sizes.iter().map(|s| s.to_string()).collect();
        format!(
            "{}_s{}_b{}-{}",
            self.method.slug(),
            sizes.join("-"),
            self.ridge.beta1,
            self.ridge.beta2
        )
    }
}

/// Line of the first `key = ...` assignment inside `[section]` (or at top
/// level when `section` is empty).
fn key_line(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim().to_string();
            continue;
        }
        if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

struct Validator<'a> {
    text: &'a str,
}

impl Validator<'_> {
    fn err(&self, section: &str, key: &str, message: impl std::fmt::Display) -> Error {
        let field = if section.is_empty() {
            key.to_string()
        } else {
            format!("{section}.{key}")
        };
        let message = match key_line(self.text, section, key) {
            Some(line) => format!("line {line}: {message}"),
            None => message.to_string(),
        };
        Error::config(field, message)
    }
}

impl ExperimentConfig {
    /// Parse and validate config text; `origin` names the source in errors.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::parse(origin, e.to_string().trim_end()))?;
        cfg.validate(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok((Self::parse(&text, path)?, text))
    }

    fn validate(&self, text: &str) -> Result<()> {
        let v = Validator { text };
        let kind: CaseKind = self.case.parse().map_err(|_| {
            v.err(
                "",
                "case",
                format!(
                    "unknown case `{}`; expected one of {}",
                    self.case,
                    CaseKind::ALL.map(|k| k.name()).join(", ")
                ),
            )
        })?;
        if self.methods.is_empty() {
            return Err(v.err("", "methods", "at least one method is required"));
        }
        for m in &self.methods {
            m.parse::<Method>().map_err(|_| v.err("", "methods", format!("unknown method `{m}`")))?;
        }
        if self.horizon_multiplier < 1 {
            return Err(v.err("", "horizon_multiplier", "must be at least 1"));
        }
        if let Some(src) = &self.data.rhs_source {
            src.parse::<RhsSource>()
                .map_err(|_| v.err("data", "rhs_source", format!("unknown rhs source `{src}`")))?;
        }
        self.ridge
            .scaling
            .parse::<RidgeScaling>()
            .map_err(|_| v.err("ridge", "scaling", format!("unknown ridge scaling `{}`", self.ridge.scaling)))?;
        let case = CaseParams::canonical(kind);
        let n_blocks = case.blocks().len();
        if self.stencils.sizes.len() != n_blocks {
            return Err(v.err(
                "stencils",
                "sizes",
                format!("case `{}` has {n_blocks} operator(s) but {} size lists were given", kind, self.stencils.sizes.len()),
            ));
        }
        for list in &self.stencils.sizes {
            if list.is_empty() {
                return Err(v.err("stencils", "sizes", "size lists must be non-empty"));
            }
            if let Some(s) = list.iter().find(|&&s| s < 3 || s % 2 == 0) {
                return Err(v.err("stencils", "sizes", format!("stencil size {s} must be odd and at least 3")));
            }
        }
        for (key, grid) in [("beta1", &self.ridge.beta1), ("beta2", &self.ridge.beta2)] {
            if grid.is_empty() {
                return Err(v.err("ridge", key, "grid must be non-empty"));
            }
            if let Some(b) = grid.iter().find(|b| !(**b >= 0.0 && b.is_finite())) {
                return Err(v.err("ridge", key, format!("value {b} must be finite and >= 0")));
            }
        }
        if !(self.solver.tol > 0.0 && self.solver.tol.is_finite()) {
            return Err(v.err("solver", "tol", "must be positive"));
        }
        if self.solver.max_iter == 0 {
            return Err(v.err("solver", "max_iter", "must be positive"));
        }
        if let Some(m) = self.solver.margin {
            if !(m >= 0.0 && m.is_finite()) {
                return Err(v.err("solver", "margin", "must be finite and >= 0"));
            }
        }
        if self.analysis.reduced_points < 3 {
            return Err(v.err("analysis", "reduced_points", "must be at least 3"));
        }
        if !(self.analysis.blowup_guard > 0.0) {
            return Err(v.err("analysis", "blowup_guard", "must be positive"));
        }
        let two_d = kind == CaseKind::Advection2d;
        let (line_keys, plane_keys) = (["points", "length"], ["points_x", "points_y", "length_x", "length_y"]);
        let g = &self.grid;
        let set = |k: &str| match k {
            "points" => g.points.is_some(),
            "length" => g.length.is_some(),
            "points_x" => g.points_x.is_some(),
            "points_y" => g.points_y.is_some(),
            "length_x" => g.length_x.is_some(),
            _ => g.length_y.is_some(),
        };
        let wrong: &[&str] = if two_d { &line_keys } else { &plane_keys };
        if let Some(k) = wrong.iter().find(|k| set(k)) {
            return Err(v.err("grid", k, format!("not a grid key for case `{kind}`")));
        }
        self.case_params().map_err(|e| match e {
            Error::Config { field, message } => {
                let (section, key) = field.split_once('.').unwrap_or(("", field.as_str()));
                v.err(section, key, message)
            }
            Error::InvalidGrid(m) => v.err("grid", if two_d { "points_x" } else { "points" }, m),
            other => other,
        })?;
        Ok(())
    }

    pub fn case_kind(&self) -> CaseKind {
        self.case.parse().expect("validated case name")
    }

    pub fn case_params(&self) -> Result<CaseParams> {
        let kind: CaseKind = self.case.parse()?;
        let mut c = CaseParams::canonical(kind);
        c.seed = self.seed;
        if let Some(dt) = self.data.dt_seconds {
            c.dt = dt;
        }
        if let Some(n) = self.data.snapshots {
            c.n_snapshots = n;
        }
        if let Some(src) = &self.data.rhs_source {
            c.rhs_source = src.parse()?;
        }
        match c.grid {
            Grid::Line(g) => {
                c.grid = Grid::Line(Grid1D::new(
                    self.grid.points.unwrap_or(g.n()),
                    self.grid.length.unwrap_or(g.length()),
                )?);
            }
            Grid::Plane(g) => {
                c.grid = Grid::Plane(Grid2D::new(
                    self.grid.points_x.unwrap_or(g.nx()),
                    self.grid.points_y.unwrap_or(g.ny()),
                    self.grid.length_x.unwrap_or(g.lx()),
                    self.grid.length_y.unwrap_or(g.ly()),
                )?);
            }
        }
        let p = &self.physics;
        c.c = p.velocity.unwrap_or(c.c);
        c.cx = p.velocity_x.unwrap_or(c.cx);
        c.cy = p.velocity_y.unwrap_or(c.cy);
        c.nu = p.viscosity.unwrap_or(c.nu);
        c.ic_center = self.initial.center.unwrap_or(c.ic_center);
        c.ic_width = self.initial.width.unwrap_or(c.ic_width);
        if c.n_snapshots < 3 {
            return Err(Error::config("data.snapshots", "need at least 3 snapshots"));
        }
        c.validate()?;
        Ok(c)
    }

    /// Same case on the reduced grid used for dense spectra, when the full
    /// operator is above the dense cap.
    pub fn reduced_case(&self) -> Result<Option<CaseParams>> {
        let case = self.case_params()?;
        if case.grid.n_dofs() <= self.analysis.dense_cap {
            return Ok(None);
        }
        match case.grid {
            Grid::Plane(g) => {
                let n = self.analysis.reduced_points;
                Ok(Some(CaseParams {
                    grid: Grid::Plane(Grid2D::new(n, n, g.lx(), g.ly())?),
                    ..case
                }))
            }
            Grid::Line(_) => Err(Error::config(
                "analysis.dense_cap",
                "1-D grid exceeds the dense cap; raise the cap",
            )),
        }
    }

    pub fn methods(&self) -> Vec<Method> {
        self.methods.iter().map(|m| m.parse().expect("validated method")).collect()
    }

    fn scaling(&self) -> RidgeScaling {
        self.ridge.scaling.parse().expect("validated scaling")
    }

    /// Every run of the sweep, in a fixed order: methods as listed, size
    /// combinations in row-major order, then ridge values. Constrained
    /// runs carry no ridge; cases without a quadratic block ignore `beta2`.
    pub fn runs(&self) -> Vec<RunSpec> {
        let quadratic = self.case_kind() == CaseKind::Burgers;
        let mut combos: Vec<Vec<usize>> = vec![Vec::new()];
        for list in &self.stencils.sizes {
            combos = combos
                .into_iter()
                .flat_map(|c| {
                    list.iter().map(move |&s| {
                        let mut c = c.clone();
                        c.push(s);
                        c
                    })
                })
                .collect();
        }
        let beta2: Vec<f64> = if quadratic { self.ridge.beta2.clone() } else { vec![0.0] };
        let mut runs = Vec::new();
        for method in self.methods() {
            for sizes in &combos {
                match method {
                    Method::Ldo => {
                        for &b1 in &self.ridge.beta1 {
                            for &b2 in &beta2 {
                                runs.push(RunSpec {
                                    method,
                                    sizes: sizes.clone(),
                                    ridge: RidgeConfig {
                                        beta1: b1,
                                        beta2: b2,
                                        scaling: self.scaling(),
                                    },
                                });
                            }
                        }
                    }
                    Method::Sldo => runs.push(RunSpec {
                        method,
                        sizes: sizes.clone(),
                        ridge: RidgeConfig {
                            beta1: 0.0,
                            beta2: 0.0,
                            scaling: self.scaling(),
                        },
                    }),
                }
            }
        }
        runs
    }

    pub fn learn_config(&self, ridge: RidgeConfig) -> LearnConfig {
        LearnConfig {
            ridge,
            qp: QpOptions {
                tol: self.solver.tol,
                max_iter: self.solver.max_iter,
                trace: false,
            },
            margin: self.solver.margin,
            equilibrium: self.solver.equilibrium,
            ..LearnConfig::default()
        }
    }
}

/// Names of the bundled paper configurations.
pub const REPRO_CASES: [&str; 5] = ["diffusion", "advection", "advection-diffusion", "burgers", "advection2d"];

/// Text of a bundled configuration.
pub fn bundled_config(name: &str) -> Option<&'static str> {
    match name {
        "diffusion" => Some(include_str!("../../../configs/diffusion.cfg")),
        "advection" => Some(include_str!("../../../configs/advection.cfg")),
        "advection-diffusion" => Some(include_str!("../../../configs/advection-diffusion.cfg")),
        "burgers" => Some(include_str!("../../../configs/burgers.cfg")),
        "advection2d" => Some(include_str!("../../../configs/advection2d.cfg")),
        _ => None,
    }
}

/// A validated config bound to an output directory.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    /// Config text as given, echoed into the artifact tree.
    pub source: String,
    pub case: CaseParams,
    pub out: PathBuf,
}

impl Experiment {
    pub fn new(config: ExperimentConfig, source: String, out: impl Into<PathBuf>) -> Result<Self> {
        let case = config.case_params()?;
        Ok(Experiment {
            config,
            source,
            case,
            out: out.into(),
        })
    }

    pub fn from_text(text: &str, origin: &Path, out: impl Into<PathBuf>) -> Result<Self> {
        let cfg = ExperimentConfig::parse(text, origin)?;
        Self::new(cfg, text.to_string(), out)
    }

    pub fn load(path: &Path, out: impl Into<PathBuf>) -> Result<Self> {
        let (cfg, text) = ExperimentConfig::load(path)?;
        Self::new(cfg, text, out)
    }

    pub fn repro(name: &str, out: impl Into<PathBuf>) -> Result<Self> {
        let text = bundled_config(name)
            .ok_or_else(|| Error::config("case", format!("unknown case `{name}`; expected one of {}", REPRO_CASES.join(", "))))?;
        Self::from_text(text, Path::new(&format!("{name}.cfg")), out)
    }

    /// Replace the seed, in the config and in its echoed text.
    pub fn with_seed(mut self, seed: u64) -> Result<Self> {
        self.config.seed = seed;
        self.case.seed = seed;
        let mut doc: toml::Table = toml::from_str(&self.source).map_err(|e| Error::parse("config", e))?;
        doc.insert("seed".into(), toml::Value::Integer(seed as i64));
        self.source = toml::to_string(&doc).map_err(|e| Error::parse("config", e))?;
        Ok(self)
    }

    fn dir(&self, sub: &str) -> PathBuf {
        self.out.join(sub)
    }

    fn reference_len(&self) -> usize {
        self.config.horizon_multiplier * (self.case.n_snapshots - 1) + 1
    }

    /// Training snapshots: read back when present, otherwise simulated.
    pub fn training(&self) -> Result<SnapshotSet> {
        let dir = self.dir("snapshots");
        if dir.join("states.csv").exists() {
            let snap = read_snapshots(&dir)?;
            if snap.meta.grid == self.case.grid && snap.n_times() == self.case.n_snapshots && snap.meta.seed == self.case.seed {
                return Ok(snap);
            }
        }
        simulate_checked(&self.case, self.case.n_snapshots, self.config.analysis.blowup_guard)
    }

    /// Reference trajectory over the forecast horizon.
    pub fn reference(&self) -> Result<SnapshotSet> {
        simulate_checked(&self.case, self.reference_len(), self.config.analysis.blowup_guard)
    }

    pub fn generate(&self) -> Result<SnapshotSet> {
        let snap = simulate_checked(&self.case, self.case.n_snapshots, self.config.analysis.blowup_guard)?;
        let dir = self.dir("snapshots");
        if self.config.output.snapshot_data {
            write_snapshots(&dir, &snap)?;
        } else {
            let mut kv = KeyValues::new();
            kv.insert("case".into(), self.case.kind.to_string());
            kv.insert("snapshots".into(), snap.n_times().to_string());
            kv.insert("dofs".into(), snap.n_dofs().to_string());
            kv.insert("seed".into(), self.case.seed.to_string());
            kv.insert("rhs_source".into(), self.case.rhs_source.name().into());
            kv.insert("data".into(), "not written; regenerated from the config".into());
            write_key_values(&dir.join("meta.txt"), &kv)?;
        }
        Ok(snap)
    }

    pub fn learn_run(&self, spec: &RunSpec, train: &SnapshotSet) -> Result<LearnedModel> {
        learn_model(train, &self.case, spec.method, &spec.sizes, &self.config.learn_config(spec.ridge))
    }

    /// Learn every run and write `models/<label>/`.
    pub fn learn(&self, train: &SnapshotSet) -> Result<Vec<(RunSpec, LearnedModel)>> {
        let mut out = Vec::new();
        for spec in self.config.runs() {
            let model = self.learn_run(&spec, train)?;
            write_model(&self.dir("models").join(spec.label()), &model, &self.case)?;
            out.push((spec, model));
        }
        Ok(out)
    }

    /// Models of every run, read from `models/`.
    pub fn load_models(&self) -> Result<Vec<(RunSpec, LearnedModel)>> {
        self.config
            .runs()
            .into_iter()
            .map(|spec| {
                let (model, _) = read_model(&self.dir("models").join(spec.label()))?;
                Ok((spec, model))
            })
            .collect()
    }

    /// Spectral analysis of one model: dense spectrum when small enough,
    /// otherwise discs of the full operator plus the dense spectrum of the
    /// same run learned on the reduced grid.
    pub fn analyze_run(&self, spec: &RunSpec, model: &LearnedModel, reduced: Option<&(CaseParams, SnapshotSet)>) -> Result<Analysis> {
        let cfg = &self.config.analysis;
        let a = model.constrained_operator()?;
        let discs = gershgorin_discs(&a);
        let min_gap = discs.iter().map(|d| d.center - d.radius).fold(f64::INFINITY, f64::min);
        let (report, grid) = match reduced {
            None => (stability_report_capped(&a, cfg.stability_tol, cfg.dense_cap)?, model.grid),
            Some((rcase, rtrain)) => {
                let rmodel = learn_model(rtrain, rcase, spec.method, &spec.sizes, &self.config.learn_config(spec.ridge))?;
                let ra = rmodel.constrained_operator()?;
                (stability_report_capped(&ra, cfg.stability_tol, cfg.dense_cap)?, rcase.grid)
            }
        };
        let mut eigenvalues = report.eigenvalues;
        sort_complex(&mut eigenvalues);
        Ok(Analysis {
            eigenvalues,
            discs,
            max_real_part_neg_op: report.max_real_part_neg_op,
            stable: report.stable,
            min_gap,
            spectrum_dofs: grid.n_dofs(),
        })
    }

    /// Reduced-grid case and its training data, when needed.
    pub fn reduced(&self) -> Result<Option<(CaseParams, SnapshotSet)>> {
        match self.config.reduced_case()? {
            None => Ok(None),
            Some(rc) => {
                let snap = simulate_checked(&rc, rc.n_snapshots, self.config.analysis.blowup_guard)?;
                Ok(Some((rc, snap)))
            }
        }
    }

    pub fn analyze(&self, models: &[(RunSpec, LearnedModel)]) -> Result<Vec<Analysis>> {
        let reduced = self.reduced()?;
        let dir = self.dir("spectra");
        models
            .iter()
            .map(|(spec, model)| {
                let an = self.analyze_run(spec, model, reduced.as_ref())?;
                let label = spec.label();
                write_eigen_csv(&dir.join(format!("{label}.eigen.csv")), &an.eigenvalues)?;
                write_discs_csv(&dir.join(format!("{label}.discs.csv")), &an.discs)?;
                write_key_values(&dir.join(format!("{label}.txt")), &an.to_key_values(self.config.analysis.stability_tol))?;
                Ok(an)
            })
            .collect()
    }

    pub fn forecast(&self, train: &SnapshotSet, models: &[(RunSpec, LearnedModel)]) -> Result<Vec<ErrorReport>> {
        let reference = self.reference()?;
        let dir = self.dir("forecasts");
        models
            .iter()
            .map(|(spec, model)| {
                let (_, rep) = evaluate_with(model, &reference, train, self.config.analysis.blowup_guard)?;
                let label = spec.label();
                write_errors_csv(&dir.join(format!("{label}.errors.csv")), &rep.times, &rep.e_u)?;
                write_key_values(&dir.join(format!("{label}.txt")), &forecast_key_values(&rep))?;
                Ok(rep)
            })
            .collect()
    }

    /// `summary.csv`, stencil and error tables, and the manifest, from the
    /// per-run files written by the earlier stages.
    pub fn report(&self) -> Result<Vec<SummaryRow>> {
        let runs = self.config.runs();
        let mut rows = Vec::with_capacity(runs.len());
        let mut eps: BTreeMap<String, Option<f64>> = BTreeMap::new();
        for spec in &runs {
            let label = spec.label();
            let sp = self.dir("spectra").join(format!("{label}.txt"));
            let fc = self.dir("forecasts").join(format!("{label}.txt"));
            let skv = read_key_values(&sp)?;
            let fkv = read_key_values(&fc)?;
            let get = |kv: &KeyValues, path: &Path, key: &str| -> Result<String> {
                kv.get(key).cloned().ok_or_else(|| Error::parse(path, format!("missing key `{key}`")))
            };
            let eps_xt: f64 = get(&fkv, &fc, "eps_xt")?.parse().map_err(|_| Error::parse(&fc, "bad eps_xt"))?;
            let blowup_step = match get(&fkv, &fc, "blowup_step")?.as_str() {
                "" => None,
                s => Some(s.parse().map_err(|_| Error::parse(&fc, "bad blowup_step"))?),
            };
            let stable: bool = get(&skv, &sp, "stable")?.parse().map_err(|_| Error::parse(&sp, "bad stable flag"))?;
            eps.insert(label, (eps_xt.is_finite() && blowup_step.is_none()).then_some(eps_xt));
            rows.push(SummaryRow {
                case: self.case.kind,
                method: spec.method,
                s1: spec.sizes[0],
                s2: spec.sizes.get(1).copied(),
                beta1: spec.ridge.beta1,
                beta2: spec.ridge.beta2,
                eps_xt,
                stable,
                blowup_step,
            });
        }
        write_summary_csv(&self.out.join("summary.csv"), &rows)?;
        self.write_error_tables(&runs, &eps)?;
        if !self.case.grid.is_2d() {
            self.write_stencil_tables(&runs)?;
        }
        fs::write(self.out.join("config.toml"), &self.source).map_err(|e| Error::io(self.out.join("config.toml"), e))?;
        write_manifest(&self.out)?;
        Ok(rows)
    }

    fn write_error_tables(&self, runs: &[RunSpec], eps: &BTreeMap<String, Option<f64>>) -> Result<()> {
        let dir = self.dir("tables");
        let sizes = &self.config.stencils.sizes;
        let fmt = |v: &[f64]| v.iter().map(|b| b.to_string()).collect::<Vec<_>>();
        let labels = |v: &[usize]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let mut ridges: Vec<(Method, RidgeConfig)> = Vec::new();
        for r in runs {
            if !ridges.contains(&(r.method, r.ridge)) {
                ridges.push((r.method, r.ridge));
            }
        }
        for (method, ridge) in &ridges {
            let cell = |s: &[usize]| {
                let spec = RunSpec {
                    method: *method,
                    sizes: s.to_vec(),
                    ridge: *ridge,
                };
                eps.get(&spec.label()).copied().flatten()
            };
            let name = format!("eps_{}_b{}-{}.csv", method.slug(), ridge.beta1, ridge.beta2);
            let m = if sizes.len() == 1 {
                ErrorMatrix {
                    corner: "s".into(),
                    rows: labels(&sizes[0]),
                    cols: vec!["eps_xt".into()],
                    cells: sizes[0].iter().map(|&s| vec![cell(&[s])]).collect(),
                }
            } else {
                ErrorMatrix {
                    corner: "s1\\s2".into(),
                    rows: labels(&sizes[0]),
                    cols: labels(&sizes[1]),
                    cells: sizes[0]
                        .iter()
                        .map(|&a| sizes[1].iter().map(|&b| cell(&[a, b])).collect())
                        .collect(),
                }
            };
            write_error_matrix(&dir.join(name), &m)?;
        }
        let betas = self.config.ridge.beta1.len() > 1 || (self.case.kind == CaseKind::Burgers && self.config.ridge.beta2.len() > 1);
        if betas && self.config.methods().contains(&Method::Ldo) {
            let b2: Vec<f64> = if self.case.kind == CaseKind::Burgers {
                self.config.ridge.beta2.clone()
            } else {
                vec![0.0]
            };
            let mut seen: Vec<Vec<usize>> = Vec::new();
            for r in runs.iter().filter(|r| r.method == Method::Ldo) {
                if seen.contains(&r.sizes) {
                    continue;
                }
                seen.push(r.sizes.clone());
                let cell = |b1: f64, b2: f64| {
                    let spec = RunSpec {
                        method: Method::Ldo,
                        sizes: r.sizes.clone(),
                        ridge: RidgeConfig { beta1: b1, beta2: b2, ..r.ridge },
                    };
                    eps.get(&spec.label()).copied().flatten()
                };
                let m = ErrorMatrix {
                    corner: "beta1\\beta2".into(),
                    rows: fmt(&self.config.ridge.beta1),
                    cols: fmt(&b2),
                    cells: self
                        .config
                        .ridge
                        .beta1
                        .iter()
                        .map(|&a| b2.iter().map(|&b| cell(a, b)).collect())
                        .collect(),
                };
                let s: Vec<String> = r.sizes.iter().map(|s| s.to_string()).collect();
                write_error_matrix(&dir.join(format!("eps_ldo_beta_s{}.csv", s.join("-"))), &m)?;
            }
        }
        Ok(())
    }

    /// Spatially averaged coefficients per block, scaled by `h^order`, one
    /// row per run after the generating stencil.
    fn write_stencil_tables(&self, runs: &[RunSpec]) -> Result<()> {
        let h = match self.case.grid {
            Grid::Line(g) => g.dx(),
            Grid::Plane(_) => return Ok(()),
        };
        let blocks = self.case.blocks();
        let reference = self.case.reference_operators()?;
        for (bi, block) in blocks.iter().enumerate() {
            let unit = h.powi(block.order);
            let row = |label: String, op: &crate::grid::AssembledOperator| StencilRow {
                label,
                coeffs: op.mean_row().into_iter().map(|(o, v)| (o.x, v * unit)).collect(),
            };
            let mut table = vec![row("reference".into(), &reference[bi])];
            for spec in runs {
                let (model, _) = read_model(&self.dir("models").join(spec.label()))?;
                table.push(row(spec.label(), &model.operators[bi]));
            }
            write_stencil_table(&self.dir("tables").join(format!("stencils_{}.csv", block.name)), &table)?;
        }
        Ok(())
    }

    /// Every stage in order.
    pub fn run(&self) -> Result<Vec<SummaryRow>> {
        let train = self.generate()?;
        self.learn(&train)?;
        // downstream stages see exactly what a standalone rerun would read
        let models = self.load_models()?;
        self.analyze(&models)?;
        self.forecast(&train, &models)?;
        self.report()
    }
}

/// Spectral summary of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    /// Eigenvalues of `-A`, sorted; from the reduced grid for large 2-D runs.
    pub eigenvalues: Vec<num_complex::Complex64>,
    /// Gershgorin discs of the full constrained operator.
    pub discs: Vec<crate::spectra::Disc>,
    pub max_real_part_neg_op: f64,
    pub stable: bool,
    /// Smallest `centre - radius` over the full operator.
    pub min_gap: f64,
    /// DOFs of the operator whose spectrum was computed.
    pub spectrum_dofs: usize,
}

impl Analysis {
    fn to_key_values(&self, tol: f64) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.insert("max_real_part_neg_op".into(), self.max_real_part_neg_op.to_string());
        kv.insert("stable".into(), self.stable.to_string());
        kv.insert("tol".into(), tol.to_string());
        kv.insert("min_dominance_gap".into(), self.min_gap.to_string());
        kv.insert("spectrum_dofs".into(), self.spectrum_dofs.to_string());
        kv
    }
}

fn forecast_key_values(rep: &ErrorReport) -> KeyValues {
    let mut kv = KeyValues::new();
    kv.insert("eps_xt".into(), rep.eps_xt.to_string());
    kv.insert("e_train".into(), rep.e_train.to_string());
    kv.insert("train_end".into(), rep.train_end.to_string());
    kv.insert("growth".into(), rep.growth.to_string());
    kv.insert(
        "blowup_step".into(),
        rep.blowup_step.map(|s| s.to_string()).unwrap_or_default(),
    );
    kv
}

/// Simulate and reject trajectories that cross `guard`.
fn simulate_checked(case: &CaseParams, n_times: usize, guard: f64) -> Result<SnapshotSet> {
    let snap = simulate(case, n_times)?;
    let s = &snap.traj.states;
    if let Some(step) = (0..s.ncols()).find(|&j| s.column(j).iter().any(|v| v.abs() > guard)) {
        return Err(Error::BlowUp { step });
    }
    Ok(snap)
}

/// `manifest.csv`: `path,sha256` for every other file under `root`,
/// sorted by path.
pub fn write_manifest(root: &Path) -> Result<()> {
    let mut files = Vec::new();
    collect_files(root, root, &mut files)?;
    files.retain(|p| p != "manifest.csv");
    files.sort();
    let mut text = String::from("path,sha256\n");
    for rel in files {
        let bytes = fs::read(root.join(&rel)).map_err(|e| Error::io(root.join(&rel), e))?;
        text.push_str(&format!("{rel},{}\n", hex::encode(Sha256::digest(&bytes))));
    }
    fs::write(root.join("manifest.csv"), text).map_err(|e| Error::io(root.join("manifest.csv"), e))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("walk stays under root");
            out.push(rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"));
        }
    }
    Ok(())
}

/// Manifest entries as `(path, sha256)`.
pub fn read_manifest(root: &Path) -> Result<Vec<(String, String)>> {
    let path = root.join("manifest.csv");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("path,sha256") {
        return Err(Error::parse(&path, "expected header `path,sha256`"));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            l.rsplit_once(',')
                .map(|(p, h)| (p.to_string(), h.to_string()))
                .ok_or_else(|| Error::parse(&path, format!("line {}: expected `path,sha256`", i + 2)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: &str = r#"
case = "diffusion"
methods = ["ldo", "s-ldo"]

[data]
dt_seconds = 0.04
snapshots = 60
rhs_source = "finite-difference"

[grid]
points = 41
length = 10.0

[stencils]
sizes = [[3, 5]]

[ridge]
beta1 = [1e-5, 1e-3]
scaling = "stencil"
"#;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(text, Path::new("test.cfg"))
    }

    #[test]
    fn bundled_configs_parse() {
        for name in REPRO_CASES {
            let cfg = parse(bundled_config(name).unwrap()).unwrap();
            assert_eq!(cfg.case, name);
            assert!(!cfg.runs().is_empty());
        }
        assert!(bundled_config("nope").is_none());
    }

    #[test]
    fn run_enumeration() {
        let cfg = parse(TINY).unwrap();
        let labels: Vec<String> = cfg.runs().iter().map(RunSpec::label).collect();
        assert_eq!(
            labels,
            [
                "ldo_s3_b0.00001-0",
                "ldo_s3_b0.001-0",
                "ldo_s5_b0.00001-0",
                "ldo_s5_b0.001-0",
                "s-ldo_s3_b0-0",
                "s-ldo_s5_b0-0"
            ]
        );
        let burgers = parse(bundled_config("burgers").unwrap()).unwrap();
        assert_eq!(burgers.runs().len(), 25 * 25 + 25);
    }

    #[test]
    fn even_stencil_is_a_config_error_with_line() {
        let text = TINY.replace("[[3, 5]]", "[[3, 4]]");
        match parse(&text) {
            Err(e @ Error::Config { .. }) => {
                let msg = e.to_string();
                assert!(msg.contains("stencils.sizes") && msg.contains("line 15"), "{msg}");
                assert_eq!(exit_code(&e), 2);
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_and_unknown_keys_are_parse_errors() {
        for text in [TINY.replace("points = 41", "pointz = 41"), TINY.replace("= 41", "= ")] {
            let e = parse(&text).unwrap_err();
            assert!(matches!(e, Error::Parse { .. }), "{e}");
            assert_eq!(exit_code(&e), 2);
        }
    }

    #[test]
    fn semantic_checks() {
        let cases = [
            TINY.replace("\"diffusion\"", "\"heat\""),
            TINY.replace("[[3, 5]]", "[[3], [3]]"),
            TINY.replace("[1e-5, 1e-3]", "[-1.0]"),
            TINY.replace("points = 41", "points = 2"),
            TINY.replace("snapshots = 60", "snapshots = 1"),
            TINY.replace("\"stencil\"", "\"both\""),
            TINY.replace("[grid]", "[grid]\npoints_x = 5"),
        ];
        for text in cases {
            let e = parse(&text).unwrap_err();
            assert!(matches!(e, Error::Config { .. }), "{e}");
        }
    }

    #[test]
    fn reduced_grid_only_above_cap() {
        let cfg = parse(bundled_config("advection2d").unwrap()).unwrap();
        let rc = cfg.reduced_case().unwrap().unwrap();
        assert_eq!(rc.grid.n_dofs(), 31 * 31);
        assert!(parse(TINY).unwrap().reduced_case().unwrap().is_none());
    }

    #[test]
    fn pipeline_is_deterministic_and_stages_rerun() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ea = Experiment::from_text(TINY, Path::new("tiny.cfg"), a.path()).unwrap();
        let rows = ea.run().unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().filter(|r| r.method == Method::Sldo).all(|r| r.stable));
        Experiment::from_text(TINY, Path::new("tiny.cfg"), b.path()).unwrap().run().unwrap();
        let ma = fs::read_to_string(a.path().join("manifest.csv")).unwrap();
        let mb = fs::read_to_string(b.path().join("manifest.csv")).unwrap();
        assert_eq!(ma, mb);
        let entries = read_manifest(a.path()).unwrap();
        for rel in ["summary.csv", "config.toml", "tables/stencils_L2.csv", "tables/eps_s-ldo_b0-0.csv", "snapshots/states.csv"] {
            assert!(entries.iter().any(|(p, _)| p == rel), "{rel} missing");
        }

        // later stages alone reproduce the same report from files on disk
        let models = ea.load_models().unwrap();
        ea.analyze(&models).unwrap();
        ea.forecast(&ea.training().unwrap(), &models).unwrap();
        ea.report().unwrap();
        assert_eq!(ma, fs::read_to_string(a.path().join("manifest.csv")).unwrap());
    }

    #[test]
    fn seed_override_is_echoed() {
        let e = Experiment::from_text(TINY, Path::new("tiny.cfg"), "unused").unwrap().with_seed(9).unwrap();
        assert_eq!(e.case.seed, 9);
        assert_eq!(parse(&e.source).unwrap().seed, 9);
    }
}
