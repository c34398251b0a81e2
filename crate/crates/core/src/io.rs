//! Text formats: gridded fields, cell solutions, homogenized matrices and
//! trajectories, plus CSV and plot data of convergence studies.
//!
//! Every format starts with a header line `oscidiff-<kind> v1 key=value ...`;
//! numbers are written in shortest round-trip form so that reading a file
//! back reproduces the values bitwise.

use crate::cellsolve::{CellParameter, CellSolution, Regime};
use crate::effmat::{EffectiveTensor, TensorData};
use crate::error::{Error, Result};
use crate::fields::{CellGrid, FaceRule, GriddedField, MacroGrid, PeriodicMatrixField};
use crate::harness::ConvergenceReport;
use crate::pdesolve::{SpaceTimeField, Variable};
use crate::tensor::Tensor;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

fn parse_err(msg: impl Into<String>) -> Error {
    Error::Parse(msg.into())
}

/// Splits `oscidiff-<kind> v1 k=v ...` into its key-value pairs.
fn header<'a>(line: Option<&'a str>, kind: &str) -> Result<HashMap<&'a str, &'a str>> {
    let line = line.ok_or_else(|| parse_err("empty file"))?;
    let mut parts = line.split_whitespace();
    let magic = format!("oscidiff-{kind}");
    if parts.next() != Some(magic.as_str()) || parts.next() != Some("v1") {
        return Err(parse_err(format!("line 1: expected header \"{magic} v1 ...\"")));
    }
    parts
        .map(|kv| {
            kv.split_once('=')
                .ok_or_else(|| parse_err(format!("line 1: malformed header entry \"{kv}\"")))
        })
        .collect()
}

fn get<T: std::str::FromStr>(h: &HashMap<&str, &str>, key: &str) -> Result<T> {
    h.get(key)
        .ok_or_else(|| parse_err(format!("line 1: missing header key \"{key}\"")))?
        .parse()
        .map_err(|_| parse_err(format!("line 1: bad value for \"{key}\"")))
}

fn numbers(line: &str, lineno: usize) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| parse_err(format!("line {lineno}: not a number: \"{t}\"")))
        })
        .collect()
}

/// Non-empty, non-comment lines with their 1-based line numbers.
fn body(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .skip(1)
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn join(v: impl IntoIterator<Item = f64>) -> String {
    let mut s = String::new();
    for (i, x) in v.into_iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        write!(s, "{x:e}").expect("write to string");
    }
    s
}

// ---------------------------------------------------------------- fields

/// Parses an `oscidiff-field v1 N=<1|2> My=<int> Ms=<int>` file.
///
/// Nodes `(i/M_y, j/M_s)` are listed with `s` varying fastest, then `y₂`,
/// then `y₁`. Each node gives either the lower triangle (`a11` in 1D,
/// `a11 a21 a22` in 2D) or the full row-major matrix; whitespace and line
/// breaks are free.
pub fn parse_field(text: &str, id: &str) -> Result<PeriodicMatrixField> {
    let h = header(text.lines().next(), "field")?;
    let dim: usize = get(&h, "N")?;
    let m_y: usize = get(&h, "My")?;
    let m_s: usize = get(&h, "Ms")?;
    if dim != 1 && dim != 2 {
        return Err(parse_err(format!("line 1: N must be 1 or 2, got {dim}")));
    }
    if m_y < 2 || m_s < 1 {
        return Err(parse_err("line 1: need My ≥ 2 and Ms ≥ 1"));
    }
    let mut values = Vec::new();
    for (no, line) in body(text) {
        values.extend(numbers(line, no)?);
    }
    let n_nodes = m_y.pow(dim as u32) * m_s;
    let lower = dim * (dim + 1) / 2;
    let per_node = if values.len() == n_nodes * lower {
        lower
    } else if values.len() == n_nodes * dim * dim {
        dim * dim
    } else {
        return Err(parse_err(format!(
            "expected {} (lower triangle) or {} (full) entries for {n_nodes} nodes, got {}",
            n_nodes * lower,
            n_nodes * dim * dim,
            values.len()
        )));
    };
    let mut nodes = Vec::with_capacity(n_nodes);
    for (idx, c) in values.chunks(per_node).enumerate() {
        let t = match (dim, per_node) {
            (1, _) => Tensor::from_1d(c[0]),
            (_, 3) => Tensor::symmetric_2d(c[0], c[1], c[2]),
            _ => Tensor::from_2d(c[0], c[1], c[2], c[3]),
        };
        if t.asymmetry() > 0.0 {
            let j = idx % m_s;
            let rest = idx / m_s;
            let (i1, i2) = if dim == 1 { (rest, 0) } else { (rest / m_y, rest % m_y) };
            return Err(Error::AsymmetricCoefficient {
                y: [i1 as f64 / m_y as f64, i2 as f64 / m_y as f64],
                s: j as f64 / m_s as f64,
                defect: t.asymmetry(),
            });
        }
        nodes.push(t);
    }
    PeriodicMatrixField::gridded(GriddedField { dim, m_y, m_s, nodes }, id)
}

pub fn read_field(path: &Path) -> Result<PeriodicMatrixField> {
    let text = std::fs::read_to_string(path)?;
    parse_field(&text, &path.display().to_string())
}

/// Samples a field on the node lattice `(i/M_y, j/M_s)`.
pub fn sample_field(field: &PeriodicMatrixField, m_y: usize, m_s: usize) -> GriddedField {
    let dim = field.dim();
    let n2 = if dim == 2 { m_y } else { 1 };
    let mut nodes = Vec::with_capacity(m_y * n2 * m_s);
    for i1 in 0..m_y {
        for i2 in 0..n2 {
            for j in 0..m_s {
                let y = [i1 as f64 / m_y as f64, i2 as f64 / m_y as f64];
                nodes.push(field.eval(y, j as f64 / m_s as f64));
            }
        }
    }
    GriddedField { dim, m_y, m_s, nodes }
}

/// Writes a gridded field, lower triangle per node, one node per line.
pub fn write_field(g: &GriddedField) -> String {
    let mut s = format!("oscidiff-field v1 N={} My={} Ms={}\n", g.dim, g.m_y, g.m_s);
    for t in &g.nodes {
        let line = if g.dim == 1 {
            join([t.get(0, 0)])
        } else {
            join([t.get(0, 0), t.get(1, 0), t.get(1, 1)])
        };
        s.push_str(&line);
        s.push('\n');
    }
    s
}

// ---------------------------------------------------------------- cells

fn face_rule_name(f: FaceRule) -> &'static str {
    match f {
        FaceRule::Midpoint => "midpoint",
        FaceRule::ArithmeticMean => "arithmetic_mean",
    }
}

fn opt(x: Option<f64>) -> String {
    x.map_or("-".to_string(), |v| format!("{v:e}"))
}

/// `oscidiff-cell v1`: header with grid, regime and direction; a `phi`
/// block (one line per slice, cell-centre values); a `grad` block (one line
/// per slice, slot gradients with `N` components each); optional `psi` block.
pub fn write_cell(c: &CellSolution) -> String {
    let (p, u) = c.param.map_or((None, None), |q| (Some(q.p), Some(q.u0abs)));
    let mut s = format!(
        "oscidiff-cell v1 N={} My={} Ms={} faces={} slices={} k={} regime={} p={} u0abs={}\n",
        c.dim,
        c.grid.m_y,
        c.grid.m_s,
        face_rule_name(c.grid.face_rule),
        c.n_slices,
        c.k,
        c.regime.name(),
        opt(p),
        opt(u)
    );
    writeln!(
        s,
        "# residual={:e} mean_defect={:e} periodicity_defect={:e} sweeps={}",
        c.residual, c.mean_defect, c.periodicity_defect, c.sweeps
    )
    .expect("write to string");
    s.push_str("phi\n");
    for j in 0..c.n_slices {
        s.push_str(&join(c.slice(j).iter().copied()));
        s.push('\n');
    }
    s.push_str("grad\n");
    for j in 0..c.n_slices {
        s.push_str(&join(c.grad_slice(j).iter().flat_map(|g| g[..c.dim].to_vec())));
        s.push('\n');
    }
    if let Some(psi) = &c.psi {
        s.push_str("psi\n");
        for row in psi.chunks(c.n_space()) {
            s.push_str(&join(row.iter().copied()));
            s.push('\n');
        }
    }
    s
}

pub fn parse_cell(text: &str) -> Result<CellSolution> {
    let h = header(text.lines().next(), "cell")?;
    let dim: usize = get(&h, "N")?;
    let m_y: usize = get(&h, "My")?;
    let m_s: usize = get(&h, "Ms")?;
    let n_slices: usize = get(&h, "slices")?;
    let k: usize = get(&h, "k")?;
    let regime = Regime::parse(h.get("regime").copied().unwrap_or(""))?;
    let face_rule = match h.get("faces").copied() {
        Some("arithmetic_mean") => FaceRule::ArithmeticMean,
        _ => FaceRule::Midpoint,
    };
    let param = match (h.get("p").copied(), h.get("u0abs").copied()) {
        (Some(p), Some(u)) if p != "-" && u != "-" => {
            let p = p.parse().map_err(|_| parse_err("line 1: bad p"))?;
            let u = u.parse().map_err(|_| parse_err("line 1: bad u0abs"))?;
            Some(CellParameter::new(p, u)?)
        }
        _ => None,
    };
    let mut stats: HashMap<String, f64> = HashMap::new();
    if let Some(l) = text.lines().nth(1).filter(|l| l.starts_with('#')) {
        for kv in l.trim_start_matches('#').split_whitespace() {
            if let Some((k, v)) = kv.split_once('=') {
                if let Ok(x) = v.parse() {
                    stats.insert(k.to_string(), x);
                }
            }
        }
    }
    let grid = CellGrid { m_y, m_s, face_rule };
    let n_space = m_y.pow(dim as u32);
    let n_slots = n_space;
    let (mut phi, mut grad, mut psi) = (Vec::new(), Vec::new(), Vec::new());
    let mut block = "";
    for (no, line) in body(text) {
        match line {
            "phi" | "grad" | "psi" => {
                block = line;
                continue;
            }
            _ => {}
        }
        let v = numbers(line, no)?;
        match block {
            "phi" => phi.extend(v),
            "grad" => {
                for c in v.chunks(dim) {
                    grad.push(if dim == 1 { [c[0], 0.0] } else { [c[0], c[1]] });
                }
            }
            "psi" => psi.extend(v),
            _ => return Err(parse_err(format!("line {no}: data outside a block"))),
        }
    }
    if phi.len() != n_slices * n_space || grad.len() != n_slices * n_slots {
        return Err(parse_err(format!(
            "expected {} values and {} gradients, got {} and {}",
            n_slices * n_space,
            n_slices * n_slots,
            phi.len(),
            grad.len()
        )));
    }
    if !psi.is_empty() && psi.len() != phi.len() {
        return Err(parse_err("psi block has the wrong length"));
    }
    Ok(CellSolution {
        regime,
        dim,
        grid,
        k,
        param,
        n_slices,
        phi,
        psi: if psi.is_empty() { None } else { Some(psi) },
        grad,
        residual: stats.get("residual").copied().unwrap_or(0.0),
        mean_defect: stats.get("mean_defect").copied().unwrap_or(0.0),
        periodicity_defect: stats.get("periodicity_defect").copied().unwrap_or(0.0),
        sweeps: stats.get("sweeps").copied().unwrap_or(0.0) as usize,
    })
}

// ---------------------------------------------------------------- matrices

fn tensor_entries(t: &Tensor) -> Vec<f64> {
    if t.dim == 1 {
        vec![t.get(0, 0)]
    } else {
        vec![t.get(0, 0), t.get(0, 1), t.get(1, 0), t.get(1, 1)]
    }
}

fn tensor_from(dim: usize, v: &[f64]) -> Tensor {
    if dim == 1 {
        Tensor::from_1d(v[0])
    } else {
        Tensor::from_2d(v[0], v[1], v[2], v[3])
    }
}

/// `oscidiff-ahom v1`: a constant matrix (row-major entries on one line) or
/// a table (`key entries...` per line).
pub fn write_ahom(t: &EffectiveTensor) -> String {
    let kind = match t.data {
        TensorData::Constant { .. } => "constant",
        TensorData::Table { .. } => "table",
    };
    let mut s = format!(
        "oscidiff-ahom v1 N={} regime={} kind={} p={} My={} Ms={}\n",
        t.dim,
        t.regime.name(),
        kind,
        opt(t.p),
        t.grid.m_y,
        t.grid.m_s
    );
    writeln!(s, "# field={}", t.field_id).expect("write to string");
    match &t.data {
        TensorData::Constant { matrix } => {
            s.push_str(&join(tensor_entries(matrix)));
            s.push('\n');
        }
        TensorData::Table { keys, matrices } => {
            for (k, m) in keys.iter().zip(matrices) {
                let mut row = vec![*k];
                row.extend(tensor_entries(m));
                s.push_str(&join(row));
                s.push('\n');
            }
        }
    }
    s
}

pub fn parse_ahom(text: &str) -> Result<EffectiveTensor> {
    let h = header(text.lines().next(), "ahom")?;
    let dim: usize = get(&h, "N")?;
    let regime = Regime::parse(h.get("regime").copied().unwrap_or(""))?;
    let p = match h.get("p").copied() {
        None | Some("-") => None,
        Some(v) => Some(v.parse().map_err(|_| parse_err("line 1: bad p"))?),
    };
    let grid = CellGrid {
        m_y: get(&h, "My")?,
        m_s: get(&h, "Ms")?,
        face_rule: FaceRule::Midpoint,
    };
    let field_id = text
        .lines()
        .nth(1)
        .and_then(|l| l.strip_prefix("# field="))
        .unwrap_or("")
        .to_string();
    let rows: Vec<(usize, Vec<f64>)> = body(text)
        .map(|(no, l)| numbers(l, no).map(|v| (no, v)))
        .collect::<Result<_>>()?;
    let width = dim * dim;
    let data = match h.get("kind").copied() {
        Some("constant") => {
            let (no, v) = rows.first().ok_or_else(|| parse_err("missing matrix line"))?;
            if v.len() != width {
                return Err(parse_err(format!("line {no}: expected {width} entries")));
            }
            TensorData::Constant {
                matrix: tensor_from(dim, v),
            }
        }
        Some("table") => {
            let mut keys = Vec::new();
            let mut matrices = Vec::new();
            for (no, v) in &rows {
                if v.len() != width + 1 {
                    return Err(parse_err(format!("line {no}: expected key plus {width} entries")));
                }
                keys.push(v[0]);
                matrices.push(tensor_from(dim, &v[1..]));
            }
            TensorData::Table { keys, matrices }
        }
        _ => return Err(parse_err("line 1: kind must be constant or table")),
    };
    Ok(EffectiveTensor {
        regime,
        dim,
        p,
        field_id,
        grid,
        data,
        corrector_l2: Vec::new(),
        corrector_gram: Vec::new(),
    })
}

// ---------------------------------------------------------------- trajectories

/// `oscidiff-traj v1`: header with grid, `Δt`, variable and `p`; then one
/// line per stored level: `level t values...`.
pub fn write_traj(t: &SpaceTimeField) -> String {
    let var = match t.variable {
        Variable::U => "u",
        Variable::V => "v",
    };
    let g = &t.grid;
    let mut s = format!(
        "oscidiff-traj v1 N={} nx={} nt={} T={:e} dt={:e} variable={var} p={:e} levels={}\n",
        g.dim,
        g.n_x,
        g.n_t,
        g.t_end,
        g.dt(),
        t.p,
        t.levels.len()
    );
    for (l, vals) in t.levels.iter().zip(&t.values) {
        let mut row = vec![*l as f64, g.time(*l)];
        row.extend(vals.iter().copied());
        s.push_str(&join(row));
        s.push('\n');
    }
    s
}

/// Reads a trajectory; diagnostics are not stored in the file and come back
/// empty.
pub fn parse_traj(text: &str) -> Result<SpaceTimeField> {
    let h = header(text.lines().next(), "traj")?;
    let grid = MacroGrid::new(get(&h, "N")?, get(&h, "nx")?, get(&h, "T")?, get(&h, "nt")?)?;
    let variable = match h.get("variable").copied() {
        Some("u") => Variable::U,
        Some("v") => Variable::V,
        _ => return Err(parse_err("line 1: variable must be u or v")),
    };
    let p: f64 = get(&h, "p")?;
    let n_levels: usize = get(&h, "levels")?;
    let mut levels = Vec::new();
    let mut values = Vec::new();
    for (no, line) in body(text) {
        let v = numbers(line, no)?;
        if v.len() != grid.n_nodes() + 2 {
            return Err(parse_err(format!("line {no}: expected {} node values", grid.n_nodes())));
        }
        levels.push(v[0] as usize);
        values.push(v[2..].to_vec());
    }
    if levels.len() != n_levels {
        return Err(parse_err(format!("expected {n_levels} levels, got {}", levels.len())));
    }
    Ok(SpaceTimeField {
        grid,
        variable,
        p,
        levels,
        values,
        diagnostics: Vec::new(),
        clamped_lookups: 0,
    })
}

// ---------------------------------------------------------------- studies

/// Two-column `.dat` files (`eps value`), one per curve.
pub fn plot_curves(report: &ConvergenceReport) -> Vec<(String, String)> {
    type Column = (&'static str, fn(&crate::harness::ErrorRow) -> f64);
    let cols: [Column; 7] = [
        ("sol_err", |r| r.sol_err),
        ("sol_err_rho1", |r| r.sol_err_rho1),
        ("grad_corr_err", |r| r.grad_corr_err),
        ("flux_corr_err", |r| r.flux_corr_err),
        ("dtime_corr_err", |r| r.dtime_corr_err),
        ("grad_plain_err", |r| r.grad_plain_err),
        ("flux_plain_err", |r| r.flux_plain_err),
    ];
    cols.iter()
        .map(|(name, f)| {
            let mut s = format!("# eps {name}\n");
            for r in &report.rows {
                writeln!(s, "{:e} {:e}", r.eps, f(r)).expect("write to string");
            }
            (format!("{name}.dat"), s)
        })
        .collect()
}

/// Gnuplot script drawing every curve of [`plot_curves`] on log-log axes.
pub fn plot_script(title: &str) -> String {
    let names = [
        "sol_err",
        "sol_err_rho1",
        "grad_corr_err",
        "flux_corr_err",
        "dtime_corr_err",
        "grad_plain_err",
        "flux_plain_err",
    ];
    let mut s = String::from("set logscale xy\nset xlabel 'eps'\nset ylabel 'error'\nset key left top\n");
    writeln!(s, "set title '{title}'").expect("write to string");
    s.push_str("plot ");
    let items: Vec<String> = names
        .iter()
        .map(|n| format!("'{n}.dat' using 1:2 with linespoints title '{n}'"))
        .collect();
    s.push_str(&items.join(", \\\n     "));
    s.push('\n');
    s
}

/// Writes `name.csv`, `name.json`, the `.dat` curves and `plot.gp` into
/// `dir`; returns the written paths.
pub fn write_study(report: &ConvergenceReport, dir: &Path, name: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    let mut put = |file: String, text: String| -> Result<()> {
        let p = dir.join(file);
        std::fs::write(&p, text)?;
        out.push(p);
        Ok(())
    };
    put(format!("{name}.csv"), report.csv())?;
    put(format!("{name}.json"), serde_json::to_string_pretty(report)? + "\n")?;
    for (f, text) in plot_curves(report) {
        put(f, text)?;
    }
    put("plot.gp".into(), plot_script(name))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cellsolve::solve_cell;
    use crate::fields::FieldSpec;
    use crate::pdesolve::{solve_micro, DataSpec, MicroProblem};

    #[test]
    fn field_round_trip_is_exact() {
        let f = PeriodicMatrixField::builtin(FieldSpec::Trig2d {
            diag: 1.0,
            wave: 0.3,
            shear: 0.2,
            moving: true,
        })
        .unwrap();
        let g = sample_field(&f, 6, 4);
        let text = write_field(&g);
        let back = parse_field(&text, "t").unwrap();
        assert_eq!(sample_field(&back, 6, 4), g);
    }

    #[test]
    fn field_accepts_full_matrices_and_rejects_asymmetry() {
        let ok = "oscidiff-field v1 N=2 My=2 Ms=1\n1 0 0 1\n2 0.5 0.5 1\n1 0 0 1\n1 0 0 2\n";
        let f = parse_field(ok, "t").unwrap();
        assert!((f.eval([0.0, 0.5], 0.0).get(0, 1) - 0.5).abs() < 1e-15);
        let bad = ok.replace("2 0.5 0.5 1", "2 0.5 0.4 1");
        assert!(matches!(
            parse_field(&bad, "t"),
            Err(Error::AsymmetricCoefficient { .. })
        ));
        assert!(matches!(
            parse_field("oscidiff-field v1 N=1 My=4 Ms=1\n1 1 1\n", "t"),
            Err(Error::Parse(_))
        ));
        assert!(parse_field("oscidiff-fld v1 N=1 My=4 Ms=1\n", "t").is_err());
    }

    #[test]
    fn file_node_order_puts_s_fastest() {
        let text = "oscidiff-field v1 N=1 My=2 Ms=2\n1\n2\n3\n4\n";
        let f = parse_field(text, "t").unwrap();
        assert_eq!(f.eval([0.0, 0.0], 0.5).get(0, 0), 2.0);
        assert_eq!(f.eval([0.5, 0.0], 0.0).get(0, 0), 3.0);
    }

    #[test]
    fn cell_round_trip() {
        let f = PeriodicMatrixField::builtin(FieldSpec::trig1d_ys()).unwrap();
        let grid = CellGrid::new(16, 8).unwrap();
        let c = solve_cell(
            Regime::CriticalPme,
            &f,
            &grid,
            Some(CellParameter::new(1.5, 0.7).unwrap()),
            0,
        )
        .unwrap();
        let back = parse_cell(&write_cell(&c)).unwrap();
        assert_eq!(back.phi, c.phi);
        assert_eq!(back.grad, c.grad);
        assert_eq!(back.psi, c.psi);
        assert_eq!(back.param, c.param);
        assert_eq!(back.sweeps, c.sweeps);
    }

    #[test]
    fn ahom_round_trip() {
        let t = EffectiveTensor::constant(Regime::Classical, Tensor::symmetric_2d(1.0, 0.2, 0.7));
        let back = parse_ahom(&write_ahom(&t)).unwrap();
        assert_eq!(back.as_constant(), t.as_constant());
        let f = PeriodicMatrixField::builtin(FieldSpec::trig1d_ys()).unwrap();
        let tab = crate::effmat::tabulate_ahom_critical(&f, &CellGrid::new(8, 8).unwrap(), 0.5, &[0.0, 0.5, 1.0, 2.0])
            .unwrap();
        let back = parse_ahom(&write_ahom(&tab)).unwrap();
        assert_eq!(back.matrices(), tab.matrices());
        assert_eq!(back.keys(), tab.keys());
        assert_eq!(back.field_id, tab.field_id);
    }

    #[test]
    fn traj_round_trip() {
        let grid = MacroGrid::new(1, 15, 0.1, 6).unwrap();
        let f = PeriodicMatrixField::builtin(FieldSpec::trig1d_static()).unwrap();
        let t = solve_micro(&MicroProblem::new(f, 0.25, 1.0, 1.5, &DataSpec::default(), grid)).unwrap();
        let back = parse_traj(&write_traj(&t)).unwrap();
        assert_eq!(back.values, t.values);
        assert_eq!(back.levels, t.levels);
        assert_eq!(back.grid, t.grid);
    }
}
