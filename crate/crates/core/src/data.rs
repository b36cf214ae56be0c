//! Manifest ingestion, imputation and standardization.
//!
//! A manifest is a UTF-8 CSV whose header is
//! `subject_id,volume_path,<variables in schema order>,pfs_months,pfs_event,os_months,os_event`.
//! Categorical cells hold level names, empty cells are missing values, and
//! relative volume paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{TabValue, TabularRecord, TabularSchema};
use crate::survival::{Endpoint, Outcome};

pub const OUTCOME_COLUMNS: [&str; 4] = ["pfs_months", "pfs_event", "os_months", "os_event"];

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub subject_id: String,
    pub volume_path: PathBuf,
    /// `None` marks a missing cell.
    pub values: Vec<Option<TabValue>>,
    pub pfs: Outcome,
    pub os: Outcome,
}

impl ManifestRow {
    pub fn outcome(&self, e: Endpoint) -> Outcome {
        match e {
            Endpoint::Pfs => self.pfs,
            Endpoint::Os => self.os,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub schema: TabularSchema,
    pub rows: Vec<ManifestRow>,
}

pub fn manifest_header(schema: &TabularSchema) -> Vec<String> {
    let mut h = vec!["subject_id".to_string(), "volume_path".to_string()];
    h.extend(schema.variables.iter().map(|v| v.name.clone()));
    h.extend(OUTCOME_COLUMNS.iter().map(|s| s.to_string()));
    h
}

/// Parses and validates a manifest. Volume files must exist.
pub fn load_manifest(path: &Path, schema: &TabularSchema) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let m = parse_manifest(&text, base, schema)?;
    for r in &m.rows {
        if !r.volume_path.is_file() {
            return Err(Error::io(
                &r.volume_path,
                std::io::Error::new(std::io::ErrorKind::NotFound, format!("volume for subject {}", r.subject_id)),
            ));
        }
    }
    Ok(m)
}

/// Parses manifest text without touching the file system.
pub fn parse_manifest(text: &str, base: &Path, schema: &TabularSchema) -> Result<Manifest> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let want = manifest_header(schema);
    if header != want {
        return Err(Error::Data(format!("manifest header mismatch: expected {want:?}, found {header:?}")));
    }
    let d = schema.d_vars();
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = r + 2;
        let cell = |i: usize| rec.get(i).unwrap_or("").trim();
        let id = cell(0).to_string();
        if id.is_empty() || !seen.insert(id.clone()) {
            return Err(Error::Data(format!("line {line}: subject_id {id:?} is empty or duplicated")));
        }
        let mut values = Vec::with_capacity(d);
        for (j, v) in schema.variables.iter().enumerate() {
            let s = cell(2 + j);
            if s.is_empty() {
                values.push(None);
                continue;
            }
            let val = if v.is_numerical() {
                let x: f64 = s
                    .parse()
                    .map_err(|_| Error::Data(format!("line {line}, column {}: {s:?} is not a number", v.name)))?;
                if !x.is_finite() {
                    return Err(Error::Data(format!("line {line}, column {}: non-finite value", v.name)));
                }
                TabValue::Num(x)
            } else {
                TabValue::Cat(
                    v.level_index(s)
                        .ok_or_else(|| Error::Data(format!("line {line}, column {}: unknown category {s:?}", v.name)))?,
                )
            };
            values.push(Some(val));
        }
        let outcome = |k: usize| -> Result<Outcome> {
            let tcol = OUTCOME_COLUMNS[2 * k];
            let ecol = OUTCOME_COLUMNS[2 * k + 1];
            let t: f64 = cell(2 + d + 2 * k)
                .parse()
                .map_err(|_| Error::Data(format!("line {line}, column {tcol}: not a number")))?;
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Data(format!("line {line}, column {tcol}: time must be positive")));
            }
            let event = match cell(3 + d + 2 * k) {
                "0" => false,
                "1" => true,
                other => return Err(Error::Data(format!("line {line}, column {ecol}: event must be 0 or 1, got {other:?}"))),
            };
            Ok(Outcome { time: t, event })
        };
        let vp = PathBuf::from(cell(1));
        rows.push(ManifestRow {
            subject_id: id,
            volume_path: if vp.is_absolute() { vp } else { base.join(vp) },
            values,
            pfs: outcome(0)?,
            os: outcome(1)?,
        });
    }
    Ok(Manifest {
        schema: schema.clone(),
        rows,
    })
}

/// Writes a manifest; `volume_path` values are written as given.
pub fn write_manifest(path: &Path, schema: &TabularSchema, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(manifest_header(schema))?;
    for r in rows {
        let mut rec = vec![r.subject_id.clone(), r.volume_path.to_string_lossy().into_owned()];
        for (v, val) in schema.variables.iter().zip(&r.values) {
            rec.push(match (val, &v.kind) {
                (None, _) => String::new(),
                (Some(TabValue::Num(x)), _) => format!("{x}"),
                (Some(TabValue::Cat(i)), crate::schema::VarKind::Categorical(levels)) => levels[*i].clone(),
                (Some(TabValue::Cat(i)), _) => i.to_string(),
            });
        }
        for o in [r.pfs, r.os] {
            rec.push(format!("{}", o.time));
            rec.push(if o.event { "1" } else { "0" }.into());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Imputation and z-score statistics fit on training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub names: Vec<String>,
    /// Mean and standard deviation for numerical variables.
    pub mean: Vec<Option<f64>>,
    pub std: Vec<Option<f64>>,
    /// Most frequent level for categorical variables.
    pub mode: Vec<Option<usize>>,
    pub vocab: Vec<Option<Vec<String>>>,
}

impl Preprocessor {
    /// Fits on `train` rows only. Variables with no observed training values
    /// fall back to mean 0, std 1 and level 0.
    pub fn fit(m: &Manifest, train: &[usize]) -> Self {
        let s = &m.schema;
        let d = s.d_vars();
        let mut mean = vec![None; d];
        let mut std = vec![None; d];
        let mut mode = vec![None; d];
        for (j, v) in s.variables.iter().enumerate() {
            match v.cardinality() {
                None => {
                    let xs: Vec<f64> = train
                        .iter()
                        .filter_map(|&i| match m.rows[i].values[j] {
                            Some(TabValue::Num(x)) => Some(x),
                            _ => None,
                        })
                        .collect();
                    let n = xs.len() as f64;
                    let mu = if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / n };
                    let var = if xs.is_empty() { 0.0 } else { xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n };
                    mean[j] = Some(mu);
                    std[j] = Some(if var > 1e-24 { var.sqrt() } else { 1.0 });
                }
                Some(k) => {
                    let mut counts = vec![0usize; k];
                    for &i in train {
                        if let Some(TabValue::Cat(c)) = m.rows[i].values[j] {
                            counts[c] += 1;
                        }
                    }
                    // First level wins ties.
                    let best = (0..k).fold(0, |b, c| if counts[c] > counts[b] { c } else { b });
                    mode[j] = Some(best);
                }
            }
        }
        Self {
            names: s.variables.iter().map(|v| v.name.clone()).collect(),
            mean,
            std,
            mode,
            vocab: s
                .variables
                .iter()
                .map(|v| match &v.kind {
                    crate::schema::VarKind::Categorical(l) => Some(l.clone()),
                    crate::schema::VarKind::Numerical => None,
                })
                .collect(),
        }
    }

    /// Fills missing cells with the training mean or mode, in raw units.
    pub fn impute(&self, row: &ManifestRow) -> Vec<TabValue> {
        row.values
            .iter()
            .enumerate()
            .map(|(j, v)| match v {
                Some(x) => *x,
                None => match self.mode[j] {
                    Some(c) => TabValue::Cat(c),
                    None => TabValue::Num(self.mean[j].unwrap_or(0.0)),
                },
            })
            .collect()
    }

    /// Imputes, then z-scores numerical variables.
    pub fn apply(&self, row: &ManifestRow) -> TabularRecord {
        let values = self
            .impute(row)
            .into_iter()
            .enumerate()
            .map(|(j, v)| match v {
                TabValue::Num(x) => TabValue::Num((x - self.mean[j].unwrap_or(0.0)) / self.std[j].unwrap_or(1.0)),
                c => c,
            })
            .collect();
        TabularRecord { values }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
    }
}
