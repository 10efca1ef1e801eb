//! MATPOWER version 2 case files: `mpc.baseMVA`, `mpc.bus`, `mpc.gen`,
//! `mpc.branch` and `mpc.gencost`.
//!
//! Values are kept in the file's units (MW, MVAr, degrees, per-unit
//! impedances on the system base). Columns beyond the required ones are kept
//! verbatim so that a parsed case serializes back to an equivalent file.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CaseError {
    #[error("line {line} ({table}): {msg}")]
    Parse { line: usize, table: String, msg: String },
    #[error("missing `{0}`")]
    Missing(&'static str),
    #[error("invalid case: {0}")]
    Invalid(String),
    #[error("i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BusType {
    Load,
    Generator,
    Reference,
    Isolated,
}

impl BusType {
    fn from_code(code: f64) -> Option<Self> {
        match code as i64 {
            _ if code.fract() != 0.0 => None,
            1 => Some(BusType::Load),
            2 => Some(BusType::Generator),
            3 => Some(BusType::Reference),
            4 => Some(BusType::Isolated),
            _ => None,
        }
    }

    fn code(self) -> f64 {
        match self {
            BusType::Load => 1.0,
            BusType::Generator => 2.0,
            BusType::Reference => 3.0,
            BusType::Isolated => 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: usize,
    pub kind: BusType,
    pub pd: f64,
    pub qd: f64,
    pub gs: f64,
    pub bs: f64,
    pub area: f64,
    pub vm: f64,
    /// Degrees.
    pub va: f64,
    pub base_kv: f64,
    pub zone: f64,
    pub vmax: f64,
    pub vmin: f64,
    pub extra: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub bus: usize,
    pub pg: f64,
    pub qg: f64,
    pub qmax: f64,
    pub qmin: f64,
    pub vg: f64,
    pub mbase: f64,
    pub in_service: bool,
    pub pmax: f64,
    pub pmin: f64,
    pub extra: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    /// Total line charging susceptance.
    pub b: f64,
    pub rate_a: f64,
    pub rate_b: f64,
    pub rate_c: f64,
    /// Off-nominal tap ratio; 0 means a line (ratio 1).
    pub ratio: f64,
    /// Phase shift in degrees.
    pub angle: f64,
    pub in_service: bool,
    pub extra: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenCost {
    pub model: f64,
    pub startup: f64,
    pub shutdown: f64,
    /// Polynomial coefficients, highest degree first.
    pub coeffs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerCase {
    pub name: String,
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub generators: Vec<Generator>,
    pub branches: Vec<Branch>,
    pub gencost: Vec<GenCost>,
}

/// The IEEE 57-bus case shipped with the crate.
pub const CASE57: &str = include_str!("../../data/case57.m");

const BUS_COLS: usize = 13;
const GEN_COLS: usize = 10;
const BRANCH_COLS: usize = 11;
const GENCOST_COLS: usize = 4;

fn flag(v: f64) -> bool {
    v > 0.0
}

impl PowerCase {
    pub fn case57() -> Self {
        Self::parse(CASE57).expect("bundled case57 parses")
    }

    pub fn from_file(path: &Path) -> Result<Self, CaseError> {
        let text = std::fs::read_to_string(path).map_err(|e| CaseError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn bus_index(&self) -> HashMap<usize, usize> {
        self.buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect()
    }

    pub fn parse(text: &str) -> Result<Self, CaseError> {
        let mut name = String::from("case");
        let mut base_mva = None;
        let mut tables: HashMap<String, Vec<(usize, Vec<f64>)>> = HashMap::new();
        let mut open: Option<String> = None;

        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('%').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(table) = &open {
                let rows = Self::parse_rows(table, line_no, line)?;
                tables.get_mut(table).expect("open table").extend(rows);
                if line.contains(']') {
                    open = None;
                }
                continue;
            }
            if let Some(rest) = line.strip_prefix("function") {
                if let Some((_, n)) = rest.split_once('=') {
                    name = n.trim().trim_end_matches(';').to_string();
                }
                continue;
            }
            let Some((lhs, rhs)) = line.split_once('=') else { continue };
            let Some(field) = lhs.trim().strip_prefix("mpc.") else { continue };
            let rhs = rhs.trim();
            match field {
                "baseMVA" => {
                    let v = rhs.trim_end_matches(';').trim();
                    base_mva = Some(v.parse::<f64>().map_err(|_| CaseError::Parse {
                        line: line_no,
                        table: "baseMVA".into(),
                        msg: format!("non-numeric value `{v}`"),
                    })?);
                }
                "bus" | "gen" | "branch" | "gencost" => {
                    let Some(after) = rhs.strip_prefix('[') else {
                        return Err(CaseError::Parse { line: line_no, table: field.into(), msg: "expected `[`".into() });
                    };
                    let after = after.trim();
                    // Rows may start on the opening line.
                    tables.insert(field.to_string(), Self::parse_rows(field, line_no, after)?);
                    if !after.contains(']') {
                        open = Some(field.to_string());
                    }
                }
                _ => {}
            }
        }
        if let Some(t) = open {
            return Err(CaseError::Parse { line: text.lines().count(), table: t, msg: "table not closed".into() });
        }

        let base_mva = base_mva.ok_or(CaseError::Missing("mpc.baseMVA"))?;
        let mut take = |key: &'static str| tables.remove(key).ok_or(CaseError::Missing(key));
        let (bus_rows, gen_rows, branch_rows, cost_rows) = (take("bus")?, take("gen")?, take("branch")?, take("gencost")?);

        let check = |table: &str, line: usize, row: &[f64], min: usize| -> Result<(), CaseError> {
            if row.len() < min {
                return Err(CaseError::Parse {
                    line,
                    table: table.into(),
                    msg: format!("{} columns, at least {min} required", row.len()),
                });
            }
            Ok(())
        };
        let index = |table: &str, line: usize, v: f64| -> Result<usize, CaseError> {
            if v < 1.0 || v.fract() != 0.0 {
                return Err(CaseError::Parse { line, table: table.into(), msg: format!("bad bus number {v}") });
            }
            Ok(v as usize)
        };

        let mut buses = Vec::with_capacity(bus_rows.len());
        for (line, r) in &bus_rows {
            check("bus", *line, r, BUS_COLS)?;
            let kind = BusType::from_code(r[1]).ok_or_else(|| CaseError::Parse {
                line: *line,
                table: "bus".into(),
                msg: format!("bus type {} not in 1..=4", r[1]),
            })?;
            buses.push(Bus {
                id: index("bus", *line, r[0])?,
                kind,
                pd: r[2],
                qd: r[3],
                gs: r[4],
                bs: r[5],
                area: r[6],
                vm: r[7],
                va: r[8],
                base_kv: r[9],
                zone: r[10],
                vmax: r[11],
                vmin: r[12],
                extra: r[BUS_COLS..].to_vec(),
            });
        }
        let mut generators = Vec::with_capacity(gen_rows.len());
        for (line, r) in &gen_rows {
            check("gen", *line, r, GEN_COLS)?;
            generators.push(Generator {
                bus: index("gen", *line, r[0])?,
                pg: r[1],
                qg: r[2],
                qmax: r[3],
                qmin: r[4],
                vg: r[5],
                mbase: r[6],
                in_service: flag(r[7]),
                pmax: r[8],
                pmin: r[9],
                extra: r[GEN_COLS..].to_vec(),
            });
        }
        let mut branches = Vec::with_capacity(branch_rows.len());
        for (line, r) in &branch_rows {
            check("branch", *line, r, BRANCH_COLS)?;
            branches.push(Branch {
                from: index("branch", *line, r[0])?,
                to: index("branch", *line, r[1])?,
                r: r[2],
                x: r[3],
                b: r[4],
                rate_a: r[5],
                rate_b: r[6],
                rate_c: r[7],
                ratio: r[8],
                angle: r[9],
                in_service: flag(r[10]),
                extra: r[BRANCH_COLS..].to_vec(),
            });
        }
        let mut gencost = Vec::with_capacity(cost_rows.len());
        for (line, r) in &cost_rows {
            check("gencost", *line, r, GENCOST_COLS)?;
            let n = r[3];
            if n < 0.0 || n.fract() != 0.0 {
                return Err(CaseError::Parse { line: *line, table: "gencost".into(), msg: format!("bad n = {n}") });
            }
            let want = if r[0] == 1.0 { 2 * n as usize } else { n as usize };
            if r.len() != GENCOST_COLS + want {
                return Err(CaseError::Parse {
                    line: *line,
                    table: "gencost".into(),
                    msg: format!("{} columns, {} expected for n = {n}", r.len(), GENCOST_COLS + want),
                });
            }
            gencost.push(GenCost { model: r[0], startup: r[1], shutdown: r[2], coeffs: r[GENCOST_COLS..].to_vec() });
        }

        let case = PowerCase { name, base_mva, buses, generators, branches, gencost };
        case.check()?;
        Ok(case)
    }

    fn parse_rows(table: &str, line: usize, text: &str) -> Result<Vec<(usize, Vec<f64>)>, CaseError> {
        let body = text.split(']').next().unwrap_or("");
        let mut out = Vec::new();
        for row in body.split(';') {
            let values = row
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<f64>().map_err(|_| CaseError::Parse {
                        line,
                        table: table.into(),
                        msg: format!("non-numeric field `{s}`"),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            if !values.is_empty() {
                out.push((line, values));
            }
        }
        Ok(out)
    }

    fn check(&self) -> Result<(), CaseError> {
        if !(self.base_mva > 0.0) {
            return Err(CaseError::Invalid(format!("baseMVA = {}", self.base_mva)));
        }
        let index = self.bus_index();
        if index.len() != self.buses.len() {
            return Err(CaseError::Invalid("duplicate bus numbers".into()));
        }
        if !self.buses.iter().any(|b| b.kind == BusType::Reference) {
            return Err(CaseError::Invalid("no reference bus".into()));
        }
        for g in &self.generators {
            if !index.contains_key(&g.bus) {
                return Err(CaseError::Invalid(format!("generator at unknown bus {}", g.bus)));
            }
        }
        for br in &self.branches {
            if !index.contains_key(&br.from) || !index.contains_key(&br.to) {
                return Err(CaseError::Invalid(format!("branch {}-{} references an unknown bus", br.from, br.to)));
            }
        }
        Ok(())
    }

    /// MATPOWER text that parses back to an identical case.
    pub fn to_matpower(&self) -> String {
        fn row(out: &mut String, values: impl IntoIterator<Item = f64>) {
            out.push('\t');
            let cells: Vec<String> = values.into_iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join("\t"));
            out.push_str(";\n");
        }
        let b = |v: bool| if v { 1.0 } else { 0.0 };
        let mut s = String::new();
        let _ = writeln!(s, "function mpc = {}", self.name);
        s.push_str("mpc.version = '2';\n");
        let _ = writeln!(s, "mpc.baseMVA = {};", self.base_mva);
        s.push_str("\n%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV\tzone\tVmax\tVmin\nmpc.bus = [\n");
        for x in &self.buses {
            let head = [
                x.id as f64,
                x.kind.code(),
                x.pd,
                x.qd,
                x.gs,
                x.bs,
                x.area,
                x.vm,
                x.va,
                x.base_kv,
                x.zone,
                x.vmax,
                x.vmin,
            ];
            row(&mut s, head.into_iter().chain(x.extra.iter().copied()));
        }
        s.push_str("];\n\n%\tbus\tPg\tQg\tQmax\tQmin\tVg\tmBase\tstatus\tPmax\tPmin\nmpc.gen = [\n");
        for g in &self.generators {
            let head = [g.bus as f64, g.pg, g.qg, g.qmax, g.qmin, g.vg, g.mbase, b(g.in_service), g.pmax, g.pmin];
            row(&mut s, head.into_iter().chain(g.extra.iter().copied()));
        }
        s.push_str("];\n\n%\tfbus\ttbus\tr\tx\tb\trateA\trateB\trateC\tratio\tangle\tstatus\nmpc.branch = [\n");
        for br in &self.branches {
            let head = [
                br.from as f64,
                br.to as f64,
                br.r,
                br.x,
                br.b,
                br.rate_a,
                br.rate_b,
                br.rate_c,
                br.ratio,
                br.angle,
                b(br.in_service),
            ];
            row(&mut s, head.into_iter().chain(br.extra.iter().copied()));
        }
        s.push_str("];\n\nmpc.gencost = [\n");
        for c in &self.gencost {
            let n = if c.model == 1.0 { c.coeffs.len() / 2 } else { c.coeffs.len() };
            let head = [c.model, c.startup, c.shutdown, n as f64];
            row(&mut s, head.into_iter().chain(c.coeffs.iter().copied()));
        }
        s.push_str("];\n");
        s
    }
}
