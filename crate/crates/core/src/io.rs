//! CSV and key-value artifacts. Every writer has a reader that restores
//! what it wrote; floats use Rust's shortest round-trip formatting.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::features::FeatureLayout;
use crate::grid::{AssembledOperator, Grid, Grid1D, Grid2D, LocalOperator, Offset, StencilSpec};
use crate::learner::{ConstraintMode, DofDiagnostics, LearnedModel, Method, RidgeConfig, StabilityConstraintSpec, WARM_START_BETA};
use crate::qp::TraceRow;
use crate::refsim::{CaseKind, CaseParams, RhsSource, SnapshotMeta, SnapshotSet, Trajectory};
use crate::spectra::Disc;

/// Ordered `key = value` metadata.
pub type KeyValues = BTreeMap<String, String>;

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(f))
}

fn write_rows(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(header).map_err(|e| Error::parse(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| Error::parse(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Header and records of a CSV file; the header must match `expect` when
/// given.
fn read_rows(path: &Path, expect: Option<&[&str]>) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(f);
    let mut records = r.records();
    let header: Vec<String> = match records.next() {
        Some(h) => h.map_err(|e| Error::parse(path, e))?.iter().map(str::to_string).collect(),
        None => return Err(Error::parse(path, "empty file, expected a header row")),
    };
    if let Some(exp) = expect {
        if header != exp {
            return Err(Error::parse(path, format!("header {:?}, expected {:?}", header, exp)));
        }
    }
    let mut rows = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| Error::parse(path, e))?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}

fn field<T: FromStr>(path: &Path, line: usize, name: &str, s: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::parse(path, format!("line {line}: bad `{name}` value `{s}`")))
}

fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|c| c.to_string()).collect()
}

fn opt_to_string<T: Display>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn opt_field<T: FromStr>(path: &Path, line: usize, name: &str, s: &str) -> Result<Option<T>> {
    if s.trim().is_empty() {
        Ok(None)
    } else {
        field(path, line, name, s).map(Some)
    }
}

pub fn write_key_values(path: &Path, kv: &KeyValues) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut s = String::new();
    for (k, v) in kv {
        s.push_str(&format!("{k} = {v}\n"));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_key_values(path: &Path) -> Result<KeyValues> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kv = KeyValues::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(path, format!("line {}: expected `key = value`", i + 1)))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(kv)
}

fn kv_get<T: FromStr>(path: &Path, kv: &KeyValues, key: &str) -> Result<T> {
    let v = kv
        .get(key)
        .ok_or_else(|| Error::parse(path, format!("missing key `{key}`")))?;
    v.parse()
        .map_err(|_| Error::parse(path, format!("bad value `{v}` for key `{key}`")))
}

fn grid_keys(kv: &mut KeyValues, grid: &Grid) {
    match grid {
        Grid::Line(g) => {
            kv.insert("n".into(), g.n().to_string());
            kv.insert("length".into(), g.length().to_string());
        }
        Grid::Plane(g) => {
            kv.insert("nx".into(), g.nx().to_string());
            kv.insert("ny".into(), g.ny().to_string());
            kv.insert("length_x".into(), g.lx().to_string());
            kv.insert("length_y".into(), g.ly().to_string());
        }
    }
}

fn grid_from_keys(path: &Path, kv: &KeyValues) -> Result<Grid> {
    if kv.contains_key("nx") {
        Ok(Grid::Plane(Grid2D::new(
            kv_get(path, kv, "nx")?,
            kv_get(path, kv, "ny")?,
            kv_get(path, kv, "length_x")?,
            kv_get(path, kv, "length_y")?,
        )?))
    } else {
        Ok(Grid::Line(Grid1D::new(kv_get(path, kv, "n")?, kv_get(path, kv, "length")?)?))
    }
}

/// One row per (dof, offset), dof ascending then offset ascending.
pub fn write_operator_csv(path: &Path, op: &AssembledOperator) -> Result<()> {
    let two_d = op.grid().is_2d();
    let head = if two_d {
        header(&["dof", "offset_x", "offset_y", "coeff"])
    } else {
        header(&["dof", "offset", "coeff"])
    };
    let mut rows = Vec::new();
    for row in op.rows() {
        let mut entries: Vec<(Offset, f64)> = row.stencil.offsets().iter().copied().zip(row.coeffs.iter().copied()).collect();
        entries.sort_by_key(|e| e.0);
        for (off, c) in entries {
            rows.push(if two_d {
                vec![row.dof.to_string(), off.x.to_string(), off.y.to_string(), c.to_string()]
            } else {
                vec![row.dof.to_string(), off.x.to_string(), c.to_string()]
            });
        }
    }
    write_rows(path, &head, rows)
}

pub fn read_operator_csv(path: &Path, grid: Grid) -> Result<AssembledOperator> {
    let two_d = grid.is_2d();
    let expect: &[&str] = if two_d {
        &["dof", "offset_x", "offset_y", "coeff"]
    } else {
        &["dof", "offset", "coeff"]
    };
    let (_, rows) = read_rows(path, Some(expect))?;
    let mut per_dof: BTreeMap<usize, Vec<(Offset, f64)>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        let line = i + 2;
        if r.len() != expect.len() {
            return Err(Error::parse(path, format!("line {line}: expected {} fields", expect.len())));
        }
        let dof: usize = field(path, line, "dof", &r[0])?;
        let (off, c) = if two_d {
            (
                Offset::new(field(path, line, "offset_x", &r[1])?, field(path, line, "offset_y", &r[2])?),
                field(path, line, "coeff", &r[3])?,
            )
        } else {
            (Offset::along_x(field(path, line, "offset", &r[1])?), field(path, line, "coeff", &r[2])?)
        };
        per_dof.entry(dof).or_default().push((off, c));
    }
    let mut locals = Vec::with_capacity(per_dof.len());
    for (dof, entries) in per_dof {
        let stencil = StencilSpec::new(entries.iter().map(|e| e.0).collect())?;
        let mut coeffs = vec![0.0; stencil.len()];
        for (off, c) in entries {
            coeffs[stencil.position(off).expect("offset from this list")] = c;
        }
        locals.push(LocalOperator::new(dof, stencil, coeffs)?);
    }
    AssembledOperator::assemble(grid, locals)
}

fn snapshot_meta_keys(meta: &SnapshotMeta) -> KeyValues {
    let mut kv = KeyValues::new();
    kv.insert("case".into(), meta.case.to_string());
    kv.insert("c".into(), meta.c.to_string());
    kv.insert("nu".into(), meta.nu.to_string());
    kv.insert("cx".into(), meta.cx.to_string());
    kv.insert("cy".into(), meta.cy.to_string());
    kv.insert("dt".into(), meta.dt.to_string());
    kv.insert("seed".into(), meta.seed.to_string());
    kv.insert("rhs_source".into(), meta.rhs_source.name().into());
    grid_keys(&mut kv, &meta.grid);
    kv
}

fn wide_matrix_csv(path: &Path, times: &[f64], m: &DMatrix<f64>) -> Result<()> {
    let mut head = vec!["dof".to_string()];
    head.extend(times.iter().map(|t| t.to_string()));
    let rows = (0..m.nrows()).map(|i| {
        let mut r = vec![i.to_string()];
        r.extend(m.row(i).iter().map(|v| v.to_string()));
        r
    });
    write_rows(path, &head, rows)
}

fn read_wide_matrix_csv(path: &Path) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let (head, rows) = read_rows(path, None)?;
    if head.first().map(String::as_str) != Some("dof") {
        return Err(Error::parse(path, "first header field must be `dof`"));
    }
    let times = head[1..]
        .iter()
        .map(|t| field(path, 1, "time", t))
        .collect::<Result<Vec<f64>>>()?;
    let mut m = DMatrix::zeros(rows.len(), times.len());
    for (i, r) in rows.iter().enumerate() {
        let line = i + 2;
        if r.len() != times.len() + 1 {
            return Err(Error::parse(path, format!("line {line}: expected {} fields", times.len() + 1)));
        }
        let dof: usize = field(path, line, "dof", &r[0])?;
        if dof != i {
            return Err(Error::parse(path, format!("line {line}: dof {dof} out of order")));
        }
        for (j, v) in r[1..].iter().enumerate() {
            m[(i, j)] = field(path, line, "value", v)?;
        }
    }
    Ok((times, m))
}

/// `states.csv`, `rhs.csv` (one row per DOF, one column per time) and
/// `meta.txt` in `dir`.
pub fn write_snapshots(dir: &Path, snap: &SnapshotSet) -> Result<()> {
    wide_matrix_csv(&dir.join("states.csv"), &snap.traj.times, &snap.traj.states)?;
    wide_matrix_csv(&dir.join("rhs.csv"), &snap.traj.times, &snap.traj.rhs)?;
    write_key_values(&dir.join("meta.txt"), &snapshot_meta_keys(&snap.meta))
}

pub fn read_snapshots(dir: &Path) -> Result<SnapshotSet> {
    let meta_path = dir.join("meta.txt");
    let kv = read_key_values(&meta_path)?;
    let meta = SnapshotMeta {
        case: kv_get(&meta_path, &kv, "case")?,
        c: kv_get(&meta_path, &kv, "c")?,
        nu: kv_get(&meta_path, &kv, "nu")?,
        cx: kv_get(&meta_path, &kv, "cx")?,
        cy: kv_get(&meta_path, &kv, "cy")?,
        grid: grid_from_keys(&meta_path, &kv)?,
        dt: kv_get(&meta_path, &kv, "dt")?,
        seed: kv_get(&meta_path, &kv, "seed")?,
        rhs_source: kv_get(&meta_path, &kv, "rhs_source")?,
    };
    let (times, states) = read_wide_matrix_csv(&dir.join("states.csv"))?;
    let (rtimes, rhs) = read_wide_matrix_csv(&dir.join("rhs.csv"))?;
    if times != rtimes {
        return Err(Error::parse(dir.join("rhs.csv"), "timestamps differ from states.csv"));
    }
    SnapshotSet::new(Trajectory { times, states, rhs }, meta)
}

/// Eigenvalues as `re,im` rows in the given order.
pub fn write_eigen_csv(path: &Path, eig: &[Complex64]) -> Result<()> {
    write_rows(
        path,
        &header(&["re", "im"]),
        eig.iter().map(|z| vec![z.re.to_string(), z.im.to_string()]),
    )
}

pub fn read_eigen_csv(path: &Path) -> Result<Vec<Complex64>> {
    let (_, rows) = read_rows(path, Some(&["re", "im"]))?;
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            if r.len() != 2 {
                return Err(Error::parse(path, format!("line {}: expected 2 fields", i + 2)));
            }
            Ok(Complex64::new(field(path, i + 2, "re", &r[0])?, field(path, i + 2, "im", &r[1])?))
        })
        .collect()
}

pub fn write_discs_csv(path: &Path, discs: &[Disc]) -> Result<()> {
    write_rows(
        path,
        &header(&["dof", "center", "radius"]),
        discs
            .iter()
            .enumerate()
            .map(|(i, d)| vec![i.to_string(), d.center.to_string(), d.radius.to_string()]),
    )
}

pub fn read_discs_csv(path: &Path) -> Result<Vec<Disc>> {
    let (_, rows) = read_rows(path, Some(&["dof", "center", "radius"]))?;
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            if r.len() != 3 {
                return Err(Error::parse(path, format!("line {}: expected 3 fields", i + 2)));
            }
            Ok(Disc {
                center: field(path, i + 2, "center", &r[1])?,
                radius: field(path, i + 2, "radius", &r[2])?,
            })
        })
        .collect()
}

/// `t,e_u`; times after a blow-up have an empty `e_u`.
pub fn write_errors_csv(path: &Path, times: &[f64], e_u: &[Option<f64>]) -> Result<()> {
    write_rows(
        path,
        &header(&["t", "e_u"]),
        times.iter().zip(e_u).map(|(t, e)| vec![t.to_string(), opt_to_string(*e)]),
    )
}

pub fn read_errors_csv(path: &Path) -> Result<(Vec<f64>, Vec<Option<f64>>)> {
    let (_, rows) = read_rows(path, Some(&["t", "e_u"]))?;
    let mut times = Vec::with_capacity(rows.len());
    let mut e_u = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        if r.len() != 2 {
            return Err(Error::parse(path, format!("line {}: expected 2 fields", i + 2)));
        }
        times.push(field(path, i + 2, "t", &r[0])?);
        e_u.push(opt_field(path, i + 2, "e_u", &r[1])?);
    }
    Ok((times, e_u))
}

pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<()> {
    write_rows(
        path,
        &header(&["iter", "objective", "kkt_residual"]),
        trace
            .iter()
            .map(|t| vec![t.iter.to_string(), t.objective.to_string(), t.kkt_residual.to_string()]),
    )
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRow>> {
    let (_, rows) = read_rows(path, Some(&["iter", "objective", "kkt_residual"]))?;
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            if r.len() != 3 {
                return Err(Error::parse(path, format!("line {}: expected 3 fields", i + 2)));
            }
            Ok(TraceRow {
                iter: field(path, i + 2, "iter", &r[0])?,
                objective: field(path, i + 2, "objective", &r[1])?,
                kkt_residual: field(path, i + 2, "kkt_residual", &r[2])?,
            })
        })
        .collect()
}

/// One line of `summary.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub case: CaseKind,
    pub method: Method,
    pub s1: usize,
    pub s2: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_xt: f64,
    pub stable: bool,
    pub blowup_step: Option<usize>,
}

pub const SUMMARY_HEADER: [&str; 9] = ["case", "method", "s1", "s2", "beta1", "beta2", "eps_xt", "stable", "blowup_step"];

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    write_rows(
        path,
        &header(&SUMMARY_HEADER),
        rows.iter().map(|r| {
            vec![
                r.case.to_string(),
                r.method.name().to_string(),
                r.s1.to_string(),
                opt_to_string(r.s2),
                r.beta1.to_string(),
                r.beta2.to_string(),
                r.eps_xt.to_string(),
                r.stable.to_string(),
                opt_to_string(r.blowup_step),
            ]
        }),
    )
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<SummaryRow>> {
    let (_, rows) = read_rows(path, Some(&SUMMARY_HEADER))?;
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            let line = i + 2;
            if r.len() != SUMMARY_HEADER.len() {
                return Err(Error::parse(path, format!("line {line}: expected {} fields", SUMMARY_HEADER.len())));
            }
            Ok(SummaryRow {
                case: field(path, line, "case", &r[0])?,
                method: field(path, line, "method", &r[1])?,
                s1: field(path, line, "s1", &r[2])?,
                s2: opt_field(path, line, "s2", &r[3])?,
                beta1: field(path, line, "beta1", &r[4])?,
                beta2: field(path, line, "beta2", &r[5])?,
                eps_xt: field(path, line, "eps_xt", &r[6])?,
                stable: field(path, line, "stable", &r[7])?,
                blowup_step: opt_field(path, line, "blowup_step", &r[8])?,
            })
        })
        .collect()
}

/// A labelled row of spatially averaged, grid-scaled stencil coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct StencilRow {
    pub label: String,
    /// `(offset, coefficient)` pairs.
    pub coeffs: Vec<(i32, f64)>,
}

/// Wide table: one column per offset over the union of all rows; cells a
/// row does not cover are left empty.
pub fn write_stencil_table(path: &Path, rows: &[StencilRow]) -> Result<()> {
    let mut offsets: Vec<i32> = rows.iter().flat_map(|r| r.coeffs.iter().map(|c| c.0)).collect();
    offsets.sort_unstable();
    offsets.dedup();
    let mut head = vec!["label".to_string()];
    head.extend(offsets.iter().map(|o| o.to_string()));
    write_rows(
        path,
        &head,
        rows.iter().map(|r| {
            let mut out = vec![r.label.clone()];
            for o in &offsets {
                out.push(opt_to_string(r.coeffs.iter().find(|c| c.0 == *o).map(|c| c.1)));
            }
            out
        }),
    )
}

pub fn read_stencil_table(path: &Path) -> Result<Vec<StencilRow>> {
    let (head, rows) = read_rows(path, None)?;
    if head.first().map(String::as_str) != Some("label") {
        return Err(Error::parse(path, "first header field must be `label`"));
    }
    let offsets = head[1..]
        .iter()
        .map(|o| field(path, 1, "offset", o))
        .collect::<Result<Vec<i32>>>()?;
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            let line = i + 2;
            if r.len() != head.len() {
                return Err(Error::parse(path, format!("line {line}: expected {} fields", head.len())));
            }
            let mut coeffs = Vec::new();
            for (o, cell) in offsets.iter().zip(&r[1..]) {
                if let Some(v) = opt_field(path, line, "coeff", cell)? {
                    coeffs.push((*o, v));
                }
            }
            Ok(StencilRow {
                label: r[0].clone(),
                coeffs,
            })
        })
        .collect()
}

/// Matrix of total errors with labelled rows and columns. Flagged cells
/// (blown-up or non-finite runs) are written as `flagged`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMatrix {
    pub corner: String,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub cells: Vec<Vec<Option<f64>>>,
}

pub const FLAGGED: &str = "flagged";

pub fn write_error_matrix(path: &Path, m: &ErrorMatrix) -> Result<()> {
    let mut head = vec![m.corner.clone()];
    head.extend(m.cols.iter().cloned());
    write_rows(
        path,
        &head,
        m.rows.iter().zip(&m.cells).map(|(label, row)| {
            let mut out = vec![label.clone()];
            out.extend(row.iter().map(|c| match c {
                Some(v) if v.is_finite() => v.to_string(),
                _ => FLAGGED.to_string(),
            }));
            out
        }),
    )
}

pub fn read_error_matrix(path: &Path) -> Result<ErrorMatrix> {
    let (head, rows) = read_rows(path, None)?;
    let mut m = ErrorMatrix {
        corner: head[0].clone(),
        rows: Vec::new(),
        cols: head[1..].to_vec(),
        cells: Vec::new(),
    };
    for (i, r) in rows.iter().enumerate() {
        let line = i + 2;
        if r.len() != head.len() {
            return Err(Error::parse(path, format!("line {line}: expected {} fields", head.len())));
        }
        m.rows.push(r[0].clone());
        m.cells.push(
            r[1..]
                .iter()
                .map(|c| if c == FLAGGED { Ok(None) } else { field(path, line, "eps_xt", c).map(Some) })
                .collect::<Result<_>>()?,
        );
    }
    Ok(m)
}

fn mode_name(mode: ConstraintMode) -> &'static str {
    match mode {
        ConstraintMode::LinearCombined => "linear-combined",
        ConstraintMode::BurgersLinearized => "burgers-linearized",
        ConstraintMode::Advect2dCombined => "advect2d-combined",
    }
}

/// Model directory: one operator CSV per block (`<block>.csv`, physical
/// factor excluded), `model.txt` metadata and `diagnostics.csv`.
pub fn write_model(dir: &Path, model: &LearnedModel, case: &CaseParams) -> Result<()> {
    for (b, op) in model.layout.blocks().iter().zip(&model.operators) {
        write_operator_csv(&dir.join(format!("{}.csv", b.name)), op)?;
    }
    let mut kv = KeyValues::new();
    kv.insert("case".into(), case.kind.to_string());
    kv.insert("method".into(), model.method.name().into());
    kv.insert(
        "stencil_sizes".into(),
        model.sizes.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
    );
    kv.insert("blocks".into(), model.layout.blocks().iter().map(|b| b.name.clone()).collect::<Vec<_>>().join(","));
    kv.insert("beta1".into(), model.ridge.beta1.to_string());
    kv.insert("beta2".into(), model.ridge.beta2.to_string());
    kv.insert("ridge_scaling".into(), model.ridge.scaling.name().into());
    kv.insert("tol".into(), model.tol.to_string());
    kv.insert("margin".into(), model.margin.to_string());
    kv.insert("equilibrium".into(), opt_to_string(model.equilibrium));
    kv.insert("constraint_mode".into(), mode_name(model.mode).into());
    kv.insert(
        "warm_start".into(),
        format!("ridge beta={WARM_START_BETA}, tight slacks, centre raise"),
    );
    kv.insert("c".into(), case.c.to_string());
    kv.insert("nu".into(), case.nu.to_string());
    kv.insert("cx".into(), case.cx.to_string());
    kv.insert("cy".into(), case.cy.to_string());
    kv.insert("dt".into(), case.dt.to_string());
    grid_keys(&mut kv, &case.grid);
    write_key_values(&dir.join("model.txt"), &kv)?;
    write_rows(
        &dir.join("diagnostics.csv"),
        &header(&["dof", "norm", "iterations", "kkt_residual", "max_violation", "gap"]),
        model.diagnostics.iter().map(|d| {
            vec![
                d.dof.to_string(),
                d.norm.to_string(),
                d.iterations.to_string(),
                d.kkt_residual.to_string(),
                d.max_violation.to_string(),
                d.gap.to_string(),
            ]
        }),
    )
}

/// Restore a model written by [`write_model`]. The returned case carries
/// the physical constants and grid of the model; data-generation fields
/// keep their canonical values.
pub fn read_model(dir: &Path) -> Result<(LearnedModel, CaseParams)> {
    let path = dir.join("model.txt");
    let kv = read_key_values(&path)?;
    let kind: CaseKind = kv_get(&path, &kv, "case")?;
    let mut case = CaseParams::canonical(kind);
    case.c = kv_get(&path, &kv, "c")?;
    case.nu = kv_get(&path, &kv, "nu")?;
    case.cx = kv_get(&path, &kv, "cx")?;
    case.cy = kv_get(&path, &kv, "cy")?;
    case.dt = kv_get(&path, &kv, "dt")?;
    case.grid = grid_from_keys(&path, &kv)?;
    let sizes = kv_get::<String>(&path, &kv, "stencil_sizes")?
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| Error::parse(&path, format!("bad stencil size `{s}`"))))
        .collect::<Result<Vec<_>>>()?;
    let method: Method = kv_get(&path, &kv, "method")?;
    let ridge = RidgeConfig::new(kv_get(&path, &kv, "beta1")?, kv_get(&path, &kv, "beta2")?)?
        .with_scaling(kv_get(&path, &kv, "ridge_scaling")?);
    let equilibrium = match kv.get("equilibrium").map(String::as_str) {
        None | Some("") => None,
        Some(v) => Some(v.parse().map_err(|_| Error::parse(&path, format!("bad equilibrium `{v}`")))?),
    };
    let constraint = StabilityConstraintSpec {
        mode: ConstraintMode::for_case(kind),
        equilibrium,
        margin: kv_get(&path, &kv, "margin")?,
    };
    let layout = Arc::new(FeatureLayout::for_case(&case, &sizes)?);
    let n = case.grid.n_dofs();
    let mut params = vec![DVector::zeros(layout.n_params()); n];
    for b in layout.blocks() {
        let op = read_operator_csv(&dir.join(format!("{}.csv", b.name)), case.grid)?;
        for (dof, th) in params.iter_mut().enumerate() {
            let coeffs = op.row(dof).embedded(&b.stencil)?;
            for (k, c) in coeffs.into_iter().enumerate() {
                th[b.start + k] = b.scale * c;
            }
        }
    }
    let dpath = dir.join("diagnostics.csv");
    let (_, rows) = read_rows(&dpath, Some(&["dof", "norm", "iterations", "kkt_residual", "max_violation", "gap"]))?;
    let diagnostics = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let line = i + 2;
            if r.len() != 6 {
                return Err(Error::parse(&dpath, format!("line {line}: expected 6 fields")));
            }
            Ok(DofDiagnostics {
                dof: field(&dpath, line, "dof", &r[0])?,
                norm: field(&dpath, line, "norm", &r[1])?,
                iterations: field(&dpath, line, "iterations", &r[2])?,
                kkt_residual: field(&dpath, line, "kkt_residual", &r[3])?,
                max_violation: field(&dpath, line, "max_violation", &r[4])?,
                gap: field(&dpath, line, "gap", &r[5])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let model = LearnedModel::from_params(
        kind,
        method,
        case.grid,
        layout,
        sizes,
        params,
        ridge,
        constraint,
        kv_get(&path, &kv, "tol")?,
        diagnostics,
    )?;
    Ok((model, case))
}

impl FromStr for RhsSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(RhsSource::Exact),
            "finite-difference" => Ok(RhsSource::FiniteDifference),
            _ => Err(Error::config("rhs_source", format!("unknown rhs source `{s}`"))),
        }
    }
}
