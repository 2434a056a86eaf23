//! Long-format longitudinal data: ingestion, panel validation, missingness
//! classification, and per-unit design matrices for the three variable roles
//! (fixed, time-constant random, time-varying random).

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One unit's observed rows, aligned by occasion.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitRecord {
    pub unit_id: String,
    /// Observed occasions as 0-based indices into the global time grid,
    /// strictly increasing.
    pub times: Vec<usize>,
    pub y: Vec<f64>,
    /// One row per observed occasion; columns follow
    /// `PanelDataset::covariate_names`.
    pub covariates: Vec<Vec<f64>>,
}

impl UnitRecord {
    pub fn n_obs(&self) -> usize {
        self.times.len()
    }
}

/// A validated panel of longitudinal observations.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    pub units: Vec<UnitRecord>,
    /// Sorted distinct observed time values; unit times index into this grid.
    pub time_grid: Vec<f64>,
    pub covariate_names: Vec<String>,
}

impl PanelDataset {
    /// Number of units (n).
    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    /// Total number of observed rows (N = Σ T_i).
    pub fn n_obs(&self) -> usize {
        self.units.iter().map(|u| u.n_obs()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.units.is_empty() {
            return Err(Error::Structure("panel has no units".into()));
        }
        for u in &self.units {
            if u.times.is_empty() {
                return Err(Error::Structure(format!("unit {} has no rows", u.unit_id)));
            }
            if u.times.len() != u.y.len() || u.times.len() != u.covariates.len() {
                return Err(Error::Structure(format!(
                    "unit {}: ragged times/response/covariates",
                    u.unit_id
                )));
            }
            if u.times.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Structure(format!(
                    "unit {}: occasions not strictly increasing",
                    u.unit_id
                )));
            }
            if u.times.last().copied().unwrap_or(0) >= self.time_grid.len() {
                return Err(Error::Structure(format!(
                    "unit {}: occasion index beyond the time grid",
                    u.unit_id
                )));
            }
            for row in &u.covariates {
                if row.len() != self.covariate_names.len() {
                    return Err(Error::Structure(format!(
                        "unit {}: covariate row width mismatch",
                        u.unit_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Response missingness pattern of a panel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MissingPattern {
    None,
    Monotone,
    NonMonotone,
}

impl std::fmt::Display for MissingPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MissingPattern::None => write!(f, "none"),
            MissingPattern::Monotone => write!(f, "monotone"),
            MissingPattern::NonMonotone => write!(f, "non-monotone"),
        }
    }
}

/// `none` iff every unit observes the full grid; `monotone` iff all observed
/// occasion sets are prefixes of the grid and some unit is incomplete;
/// `non-monotone` otherwise.
pub fn classify_missingness(data: &PanelDataset) -> MissingPattern {
    let t_len = data.time_grid.len();
    let mut any_incomplete = false;
    let mut all_prefix = true;
    for u in &data.units {
        if u.times.len() < t_len {
            any_incomplete = true;
        }
        if !u.times.iter().enumerate().all(|(k, &t)| t == k) {
            all_prefix = false;
        }
    }
    if !any_incomplete {
        MissingPattern::None
    } else if all_prefix {
        MissingPattern::Monotone
    } else {
        MissingPattern::NonMonotone
    }
}

/// Column-role mapping for CSV ingestion. Covariate entries may be plain
/// column names or products of named columns written `a:b`.
#[derive(Debug, Clone)]
pub struct ColSpec {
    pub unit: String,
    pub time: String,
    pub response: String,
    pub covariates: Vec<String>,
}

/// Load a long-format CSV into a validated panel.
///
/// Rows with an empty response field are treated as unobserved occasions and
/// dropped. Time values are coerced to a grid of distinct observed values by
/// rank. A covariate written `a:b` is materialized as the rowwise product of
/// columns `a` and `b` unless a literal column of that name exists.
pub fn load_csv(path: impl AsRef<Path>, colspec: &ColSpec) -> Result<PanelDataset> {
    let file = std::fs::File::open(path.as_ref())?;
    load_csv_reader(file, colspec)
}

pub fn load_csv_reader(reader: impl Read, colspec: &ColSpec) -> Result<PanelDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?
        .iter()
        .map(|s| s.to_string())
        .collect();
    if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
        return Err(Error::Parse {
            line: 1,
            msg: "empty file or missing header row".into(),
        });
    }

    let col_idx = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Name(format!("column `{name}` not found in header")))
    };
    let unit_idx = col_idx(&colspec.unit)?;
    let time_idx = col_idx(&colspec.time)?;
    let resp_idx = col_idx(&colspec.response)?;

    // A covariate resolves to a literal column or to a product of columns.
    enum Source {
        Col(usize),
        Product(Vec<usize>),
    }
    let mut sources = Vec::with_capacity(colspec.covariates.len());
    for name in &colspec.covariates {
        if let Ok(idx) = col_idx(name) {
            sources.push(Source::Col(idx));
        } else if name.contains(':') {
            let parts = name
                .split(':')
                .map(col_idx)
                .collect::<Result<Vec<usize>>>()?;
            sources.push(Source::Product(parts));
        } else {
            return Err(Error::Name(format!("column `{name}` not found in header")));
        }
    }

    struct RawRow {
        unit: String,
        time: f64,
        y: f64,
        covs: Vec<f64>,
        line: usize,
    }

    let parse_num = |field: &str, line: usize, column: &str| -> Result<f64> {
        field.parse::<f64>().map_err(|_| Error::Type {
            line,
            column: column.to_string(),
            msg: format!("`{field}` is not numeric"),
        })
    };

    let mut rows: Vec<RawRow> = Vec::new();
    for (k, record) in rdr.records().enumerate() {
        let line = k + 2; // 1-based, after the header
        let record = record.map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        let get = |idx: usize| record.get(idx).unwrap_or("");
        let resp_field = get(resp_idx);
        if resp_field.is_empty() || resp_field.eq_ignore_ascii_case("na") {
            continue; // unobserved occasion
        }
        let y = parse_num(resp_field, line, &colspec.response)?;
        let time = parse_num(get(time_idx), line, &colspec.time)?;
        let mut covs = Vec::with_capacity(sources.len());
        for (src, name) in sources.iter().zip(&colspec.covariates) {
            let value = match src {
                Source::Col(idx) => {
                    let f = get(*idx);
                    if f.is_empty() || f.eq_ignore_ascii_case("na") {
                        return Err(Error::Type {
                            line,
                            column: name.clone(),
                            msg: "missing covariate value in an observed row".into(),
                        });
                    }
                    parse_num(f, line, name)?
                }
                Source::Product(idxs) => {
                    let mut prod = 1.0;
                    for &idx in idxs {
                        let f = get(idx);
                        if f.is_empty() || f.eq_ignore_ascii_case("na") {
                            return Err(Error::Type {
                                line,
                                column: name.clone(),
                                msg: "missing covariate value in an observed row".into(),
                            });
                        }
                        prod *= parse_num(f, line, name)?;
                    }
                    prod
                }
            };
            covs.push(value);
        }
        rows.push(RawRow {
            unit: get(unit_idx).to_string(),
            time,
            y,
            covs,
            line,
        });
    }

    if rows.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "no observed rows".into(),
        });
    }

    // Distinct observed time values, sorted, define the grid.
    let mut grid: Vec<f64> = rows.iter().map(|r| r.time).collect();
    grid.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup();
    let grid_index = |t: f64| grid.partition_point(|&g| g < t);

    // Group by unit, numeric-aware ordering of unit ids for stable output.
    let mut by_unit: BTreeMap<UnitKey, Vec<&RawRow>> = BTreeMap::new();
    for row in &rows {
        by_unit.entry(UnitKey::new(&row.unit)).or_default().push(row);
    }

    let mut units = Vec::with_capacity(by_unit.len());
    for (key, mut unit_rows) in by_unit {
        unit_rows.sort_by(|a, b| a.time.partial_cmp(&b.time).unwrap());
        for w in unit_rows.windows(2) {
            if w[0].time == w[1].time {
                return Err(Error::Structure(format!(
                    "duplicate (unit, time) pair: unit {} at time {} (lines {} and {})",
                    key.raw, w[0].time, w[0].line, w[1].line
                )));
            }
        }
        units.push(UnitRecord {
            unit_id: key.raw,
            times: unit_rows.iter().map(|r| grid_index(r.time)).collect(),
            y: unit_rows.iter().map(|r| r.y).collect(),
            covariates: unit_rows.iter().map(|r| r.covs.clone()).collect(),
        });
    }

    let data = PanelDataset {
        units,
        time_grid: grid,
        covariate_names: colspec.covariates.clone(),
    };
    data.validate()?;
    Ok(data)
}

/// Unit ids sort numerically when both parse as numbers, lexically otherwise.
#[derive(Debug, Clone, PartialEq)]
struct UnitKey {
    raw: String,
    num: Option<f64>,
}

impl UnitKey {
    fn new(raw: &str) -> Self {
        Self {
            raw: raw.to_string(),
            num: raw.parse::<f64>().ok(),
        }
    }
}

impl Eq for UnitKey {}

impl Ord for UnitKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        match (self.num, other.num) {
            (Some(a), Some(b)) => a.partial_cmp(&b).unwrap().then(self.raw.cmp(&other.raw)),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => self.raw.cmp(&other.raw),
        }
    }
}

impl PartialOrd for UnitKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Write a panel back to CSV in the same layout `load_csv` reads.
pub fn write_csv(data: &PanelDataset, path: impl AsRef<Path>, colspec: &ColSpec) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path.as_ref()).map_err(io_err)?;
    let mut header = vec![
        colspec.unit.clone(),
        colspec.time.clone(),
        colspec.response.clone(),
    ];
    header.extend(data.covariate_names.iter().cloned());
    wtr.write_record(&header).map_err(io_err)?;
    for u in &data.units {
        for (k, &t) in u.times.iter().enumerate() {
            let mut rec = vec![
                u.unit_id.clone(),
                fmt_full(data.time_grid[t]),
                fmt_full(u.y[k]),
            ];
            rec.extend(u.covariates[k].iter().map(|&v| fmt_full(v)));
            wtr.write_record(&rec).map_err(io_err)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

fn fmt_full(v: f64) -> String {
    // Shortest representation that round-trips through f64.
    let mut s = format!("{v}");
    if s == "-0" {
        s = "0".into();
    }
    s
}

fn io_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// A single design term: the intercept or a (possibly product) column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Term {
    Intercept,
    Col(String),
}

impl Term {
    /// Parse a user-facing term; `1` and `intercept` denote the intercept.
    pub fn parse(s: &str) -> Term {
        let t = s.trim();
        if t == "1" || t.eq_ignore_ascii_case("intercept") || t == "(Intercept)" {
            Term::Intercept
        } else {
            Term::Col(t.to_string())
        }
    }

    pub fn display_name(&self) -> String {
        match self {
            Term::Intercept => "(Intercept)".to_string(),
            Term::Col(name) => name.clone(),
        }
    }
}

/// Variable roles requested for a model fit.
#[derive(Debug, Clone, Default)]
pub struct RoleSpec {
    pub fixed: Vec<Term>,
    pub random_tc: Vec<Term>,
    pub random_tv: Vec<Term>,
}

/// Per-unit design matrices for the three roles, with column names.
#[derive(Debug, Clone)]
pub struct DesignSet {
    pub x: Vec<DMatrix<f64>>,
    pub z: Vec<DMatrix<f64>>,
    pub w: Vec<DMatrix<f64>>,
    pub x_names: Vec<String>,
    pub z_names: Vec<String>,
    pub w_names: Vec<String>,
}

impl DesignSet {
    pub fn p(&self) -> usize {
        self.x_names.len()
    }
    pub fn r(&self) -> usize {
        self.z_names.len()
    }
    pub fn l(&self) -> usize {
        self.w_names.len()
    }
}

/// Build per-unit design matrices from variable roles.
///
/// The TC and TV random roles must not overlap; a variable named both as
/// fixed and random is assigned to the random role only.
pub fn build_design(data: &PanelDataset, roles: &RoleSpec) -> Result<DesignSet> {
    for term in roles
        .fixed
        .iter()
        .chain(&roles.random_tc)
        .chain(&roles.random_tv)
    {
        if let Term::Col(name) = term {
            if !data.covariate_names.contains(name) {
                return Err(Error::Name(format!(
                    "variable `{name}` is not among the loaded covariates"
                )));
            }
        }
    }
    for tc in &roles.random_tc {
        if roles.random_tv.contains(tc) {
            return Err(Error::Spec(format!(
                "`{}` appears in both the TC and the TV random role; the roles must be disjoint",
                tc.display_name()
            )));
        }
    }
    // Random roles win over the fixed role; duplicates within a role collapse.
    let dedup = |terms: &[Term]| {
        let mut out: Vec<Term> = Vec::new();
        for t in terms {
            if !out.contains(t) {
                out.push(t.clone());
            }
        }
        out
    };
    let random_tc = dedup(&roles.random_tc);
    let random_tv = dedup(&roles.random_tv);
    let fixed: Vec<Term> = dedup(&roles.fixed)
        .into_iter()
        .filter(|t| !random_tc.contains(t) && !random_tv.contains(t))
        .collect();

    let names = |terms: &[Term]| terms.iter().map(Term::display_name).collect::<Vec<_>>();
    let col_of = |name: &str| data.covariate_names.iter().position(|c| c == name);

    let build_role = |terms: &[Term]| -> Vec<DMatrix<f64>> {
        data.units
            .iter()
            .map(|u| {
                let t_i = u.n_obs();
                let mut m = DMatrix::zeros(t_i, terms.len());
                for (j, term) in terms.iter().enumerate() {
                    match term {
                        Term::Intercept => {
                            for k in 0..t_i {
                                m[(k, j)] = 1.0;
                            }
                        }
                        Term::Col(name) => {
                            let c = col_of(name).expect("validated above");
                            for k in 0..t_i {
                                m[(k, j)] = u.covariates[k][c];
                            }
                        }
                    }
                }
                m
            })
            .collect()
    };

    Ok(DesignSet {
        x: build_role(&fixed),
        z: build_role(&random_tc),
        w: build_role(&random_tv),
        x_names: names(&fixed),
        z_names: names(&random_tc),
        w_names: names(&random_tv),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn pain_head() -> &'static str {
        "id,meas,trt,time\n1,0.0,1,1\n1,0.0,1,2\n2,0.0,1,1\n2,0.0,1,2\n2,0.0,1,3\n2,2.5,1,4\n"
    }

    fn spec() -> ColSpec {
        ColSpec {
            unit: "id".into(),
            time: "time".into(),
            response: "meas".into(),
            covariates: vec!["trt".into(), "trt:time".into()],
        }
    }

    #[test]
    fn loads_long_format() {
        let data = load_csv_reader(Cursor::new(pain_head()), &spec()).unwrap();
        assert_eq!(data.n_units(), 2);
        assert_eq!(data.n_obs(), 6);
        assert_eq!(data.units[0].unit_id, "1");
        assert_eq!(data.units[0].times, vec![0, 1]);
        assert_eq!(data.units[0].y, vec![0.0, 0.0]);
        assert_eq!(data.time_grid, vec![1.0, 2.0, 3.0, 4.0]);
        // trt:time product materialized
        assert_eq!(data.units[1].covariates[3], vec![1.0, 4.0]);
    }

    #[test]
    fn empty_file_is_a_parse_error() {
        let err = load_csv_reader(Cursor::new(""), &spec()).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
    }

    #[test]
    fn single_row_dataset() {
        let data = load_csv_reader(
            Cursor::new("id,meas,trt,time\n5,1.25,0,3\n"),
            &spec(),
        )
        .unwrap();
        assert_eq!(data.n_units(), 1);
        assert_eq!(data.n_obs(), 1);
        assert_eq!(data.units[0].times, vec![0]);
    }

    #[test]
    fn duplicate_unit_time_rejected() {
        let text = "id,meas,trt,time\n1,0.0,1,1\n1,3.0,1,1\n";
        let err = load_csv_reader(Cursor::new(text), &spec()).unwrap_err();
        assert!(matches!(err, Error::Structure(_)), "{err}");
    }

    #[test]
    fn non_numeric_response_rejected_with_line() {
        let text = "id,meas,trt,time\n1,0.0,1,1\n1,abc,1,2\n";
        let err = load_csv_reader(Cursor::new(text), &spec()).unwrap_err();
        match err {
            Error::Type { line, column, .. } => {
                assert_eq!(line, 3);
                assert_eq!(column, "meas");
            }
            other => panic!("unexpected: {other}"),
        }
    }

    #[test]
    fn empty_response_rows_are_dropped() {
        let text = "id,meas,trt,time\n1,0.0,1,1\n1,,1,2\n1,4.0,1,3\n";
        let data = load_csv_reader(Cursor::new(text), &spec()).unwrap();
        assert_eq!(data.units[0].times, vec![0, 1]);
        assert_eq!(data.time_grid, vec![1.0, 3.0]);
    }

    #[test]
    fn missing_covariate_in_observed_row_rejected() {
        let text = "id,meas,trt,time\n1,0.0,,1\n";
        let err = load_csv_reader(Cursor::new(text), &spec()).unwrap_err();
        assert!(matches!(err, Error::Type { .. }), "{err}");
    }

    fn grid6(unit_times: &[(&str, &[usize])]) -> PanelDataset {
        PanelDataset {
            units: unit_times
                .iter()
                .map(|(id, ts)| UnitRecord {
                    unit_id: id.to_string(),
                    times: ts.to_vec(),
                    y: vec![0.0; ts.len()],
                    covariates: vec![vec![]; ts.len()],
                })
                .collect(),
            time_grid: (1..=6).map(|t| t as f64).collect(),
            covariate_names: vec![],
        }
    }

    #[test]
    fn missingness_kinds() {
        let full: Vec<usize> = (0..6).collect();
        let all = grid6(&[("1", &full), ("2", &full)]);
        assert_eq!(classify_missingness(&all), MissingPattern::None);

        let mono = grid6(&[("1", &full), ("2", &[0, 1, 2])]);
        assert_eq!(classify_missingness(&mono), MissingPattern::Monotone);

        let gap = grid6(&[("1", &full), ("2", &[0, 2])]);
        assert_eq!(classify_missingness(&gap), MissingPattern::NonMonotone);
    }

    #[test]
    fn missingness_invariant_under_unit_permutation() {
        let full: Vec<usize> = (0..6).collect();
        let a = grid6(&[("1", &full), ("2", &[0, 1]), ("3", &[0, 2])]);
        let mut b = a.clone();
        b.units.reverse();
        assert_eq!(classify_missingness(&a), classify_missingness(&b));
    }

    #[test]
    fn csv_round_trip() {
        let data = load_csv_reader(Cursor::new(pain_head()), &spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("echo.csv");
        write_csv(&data, &path, &spec()).unwrap();
        // A written product column reloads as a literal column of that name.
        let back = load_csv(&path, &spec()).unwrap();
        assert_eq!(data, back);
    }

    fn toy_with_covs() -> PanelDataset {
        let text = "id,meas,trt,time\n1,1.0,1,1\n1,2.0,1,2\n2,3.0,0,1\n2,4.0,0,2\n";
        load_csv_reader(
            Cursor::new(text),
            &ColSpec {
                unit: "id".into(),
                time: "time".into(),
                response: "meas".into(),
                covariates: vec!["trt".into(), "time".into(), "trt:time".into()],
            },
        )
        .unwrap()
    }

    #[test]
    fn design_roles_basic() {
        let data = toy_with_covs();
        let roles = RoleSpec {
            fixed: vec![
                Term::Col("time".into()),
                Term::Col("trt".into()),
                Term::Col("trt:time".into()),
            ],
            random_tc: vec![Term::Intercept],
            random_tv: vec![],
        };
        let d = build_design(&data, &roles).unwrap();
        assert_eq!((d.p(), d.r(), d.l()), (3, 1, 0));
        assert_eq!(d.z_names, vec!["(Intercept)"]);
        assert_eq!(d.z[0].column(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 1.0]);
    }

    #[test]
    fn random_role_wins_over_fixed() {
        let data = toy_with_covs();
        let roles = RoleSpec {
            fixed: vec![
                Term::Col("trt".into()),
                Term::Col("time".into()),
                Term::Col("trt:time".into()),
            ],
            random_tc: vec![Term::Col("time".into())],
            random_tv: vec![Term::Intercept],
        };
        let d = build_design(&data, &roles).unwrap();
        assert_eq!((d.p(), d.r(), d.l()), (2, 1, 1));
        assert_eq!(d.x_names, vec!["trt", "trt:time"]);
        assert_eq!(d.z_names, vec!["time"]);
        assert_eq!(d.w_names, vec!["(Intercept)"]);
    }

    #[test]
    fn overlapping_random_roles_rejected() {
        let data = toy_with_covs();
        let roles = RoleSpec {
            fixed: vec![],
            random_tc: vec![Term::Col("trt".into())],
            random_tv: vec![Term::Col("trt".into())],
        };
        assert!(matches!(
            build_design(&data, &roles).unwrap_err(),
            Error::Spec(_)
        ));
        let roles = RoleSpec {
            fixed: vec![],
            random_tc: vec![Term::Intercept],
            random_tv: vec![Term::Intercept],
        };
        assert!(matches!(
            build_design(&data, &roles).unwrap_err(),
            Error::Spec(_)
        ));
    }

    #[test]
    fn unknown_variable_rejected() {
        let data = toy_with_covs();
        let roles = RoleSpec {
            fixed: vec![Term::Col("nope".into())],
            ..Default::default()
        };
        assert!(matches!(
            build_design(&data, &roles).unwrap_err(),
            Error::Name(_)
        ));
    }

    #[test]
    fn design_columns_are_disjoint() {
        let data = toy_with_covs();
        let roles = RoleSpec {
            fixed: vec![
                Term::Intercept,
                Term::Col("trt".into()),
                Term::Col("time".into()),
            ],
            random_tc: vec![Term::Col("time".into())],
            random_tv: vec![Term::Col("trt:time".into())],
        };
        let d = build_design(&data, &roles).unwrap();
        let mut all = d.x_names.clone();
        all.extend(d.z_names.clone());
        all.extend(d.w_names.clone());
        let mut dedup = all.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(all.len(), dedup.len());
    }
}
