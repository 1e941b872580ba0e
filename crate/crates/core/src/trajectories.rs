//! Longitudinal observational data: trajectories, datasets, and their file formats.
//!
//! A trajectory of length `T` stores, for each step `t` (0-based), the covariates
//! observed before treatment, the binary treatment, and the outcome observed after
//! that treatment. So `y[t]` is the outcome that follows `a[t]`.
//!
//! CSV layout, one row per patient-step:
//!
//! ```text
//! id,t,x_1,...,x_k,a,y[,u_true]
//! ```
//!
//! Reals are written with 17 significant digits. The split lives in a sibling
//! `<stem>.split.json` file mapping id to partition.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    /// Covariates per step; `x[t]` has `k` entries.
    pub x: Vec<Vec<f64>>,
    pub a: Vec<u8>,
    /// `y[t]` is the outcome observed after treatment `a[t]`.
    pub y: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_true: Option<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn covariate_dim(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    /// Treatment preceding step `t`, with the convention that it is 0 before the first step.
    pub fn a_prev(&self, t: usize) -> u8 {
        if t == 0 {
            0
        } else {
            self.a[t - 1]
        }
    }

    /// Checks the stored-data invariants.
    pub fn validate(&self) -> Result<()> {
        let t = self.a.len();
        if t < 2 {
            return Err(Error::invariant(
                &self.id,
                format!("length {t} is below the minimum of 2"),
            ));
        }
        if self.x.len() != t || self.y.len() != t {
            return Err(Error::invariant(
                &self.id,
                format!(
                    "field lengths disagree: x={}, a={}, y={}",
                    self.x.len(),
                    t,
                    self.y.len()
                ),
            ));
        }
        let k = self.covariate_dim();
        if k == 0 {
            return Err(Error::invariant(&self.id, "no covariates"));
        }
        for (step, ((xt, &at), &yt)) in self.x.iter().zip(&self.a).zip(&self.y).enumerate() {
            if xt.len() != k {
                return Err(Error::invariant(
                    &self.id,
                    format!("timestep {step}: {} covariates, expected {k}", xt.len()),
                ));
            }
            if at > 1 {
                return Err(Error::invariant(
                    &self.id,
                    format!("timestep {step}: treatment {at} not in {{0,1}}"),
                ));
            }
            if !yt.is_finite() || xt.iter().any(|v| !v.is_finite()) {
                return Err(Error::invariant(
                    &self.id,
                    format!("timestep {step}: non-finite value"),
                ));
            }
        }
        if let Some(u) = self.u_true {
            if !u.is_finite() {
                return Err(Error::invariant(&self.id, "non-finite u_true"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub split: BTreeMap<String, Partition>,
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn from_path(path: &Path) -> Option<Format> {
        match path.extension()?.to_str()? {
            "csv" => Some(Format::Csv),
            "json" => Some(Format::Json),
            _ => None,
        }
    }
}

impl Dataset {
    /// Builds a dataset with every trajectory in the training partition.
    pub fn new(trajectories: Vec<Trajectory>) -> Result<Dataset> {
        let split = trajectories
            .iter()
            .map(|t| (t.id.clone(), Partition::Train))
            .collect();
        let mut meta = BTreeMap::new();
        meta.insert("train_frac".to_string(), "1".to_string());
        let d = Dataset {
            trajectories,
            split,
            meta,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn covariate_dim(&self) -> usize {
        self.trajectories.first().map_or(0, Trajectory::covariate_dim)
    }

    pub fn has_u_true(&self) -> bool {
        !self.trajectories.is_empty() && self.trajectories.iter().all(|t| t.u_true.is_some())
    }

    pub fn get(&self, id: &str) -> Option<&Trajectory> {
        self.trajectories.iter().find(|t| t.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trajectories.is_empty() {
            return Err(Error::InsufficientData("no trajectories".into()));
        }
        let k = self.covariate_dim();
        let mut seen = BTreeSet::new();
        for t in &self.trajectories {
            t.validate()?;
            if t.covariate_dim() != k {
                return Err(Error::invariant(
                    &t.id,
                    format!("{} covariates, dataset has {k}", t.covariate_dim()),
                ));
            }
            if !seen.insert(t.id.as_str()) {
                return Err(Error::invariant(&t.id, "duplicate id"));
            }
            if !self.split.contains_key(&t.id) {
                return Err(Error::invariant(&t.id, "missing from split"));
            }
        }
        if self.split.len() != seen.len() {
            let extra = self
                .split
                .keys()
                .find(|id| !seen.contains(id.as_str()))
                .cloned()
                .unwrap_or_default();
            return Err(Error::invariant(extra, "split entry without trajectory"));
        }
        Ok(())
    }

    /// Trajectories assigned to `part`, as a standalone dataset.
    pub fn subset(&self, part: Partition) -> Dataset {
        let trajectories: Vec<Trajectory> = self
            .trajectories
            .iter()
            .filter(|t| self.split.get(&t.id) == Some(&part))
            .cloned()
            .collect();
        let split = trajectories.iter().map(|t| (t.id.clone(), part)).collect();
        Dataset {
            trajectories,
            split,
            meta: self.meta.clone(),
        }
    }

    pub fn partition_size(&self, part: Partition) -> usize {
        self.split.values().filter(|&&p| p == part).count()
    }

    /// Means of all covariate entries, treatments, and outcomes.
    pub fn summary(&self) -> (f64, f64, f64) {
        let (mut sx, mut nx, mut sa, mut sy, mut n) = (0.0, 0usize, 0.0, 0.0, 0usize);
        for t in &self.trajectories {
            for step in 0..t.len() {
                sx += t.x[step].iter().sum::<f64>();
                nx += t.x[step].len();
                sa += f64::from(t.a[step]);
                sy += t.y[step];
                n += 1;
            }
        }
        (sx / nx as f64, sa / n as f64, sy / n as f64)
    }
}

/// Path of the split sidecar for a data file: `d.csv` -> `d.split.json`.
pub fn split_path(path: &Path) -> PathBuf {
    path.with_extension("split.json")
}

pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn load_dataset(path: &Path, format: Format) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let trajectories = match format {
        Format::Csv => parse_csv(&text)?,
        Format::Json => parse_json(&text)?,
    };
    if trajectories.is_empty() {
        return Err(Error::InsufficientData("no trajectories".into()));
    }

    let sidecar = split_path(path);
    let split: BTreeMap<String, Partition> = if sidecar.exists() {
        let s = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        serde_json::from_str(&s)
            .map_err(|e| Error::Schema(format!("{}: {e}", sidecar.display())))?
    } else {
        trajectories
            .iter()
            .map(|t| (t.id.clone(), Partition::Train))
            .collect()
    };

    let mut meta = BTreeMap::new();
    meta.insert("source".to_string(), path.display().to_string());
    let n_train = split.values().filter(|&&p| p == Partition::Train).count();
    meta.insert(
        "train_frac".to_string(),
        format!("{}", n_train as f64 / split.len().max(1) as f64),
    );
    let d = Dataset {
        trajectories,
        split,
        meta,
    };
    d.validate()?;
    Ok(d)
}

pub fn save_dataset(d: &Dataset, path: &Path, format: Format) -> Result<()> {
    let body = match format {
        Format::Csv => to_csv(d),
        Format::Json => to_json(d)?,
    };
    fs::write(path, body).map_err(|e| Error::io(path, e))?;
    let split = serde_json::to_string_pretty(&d.split).expect("split map serializes");
    let sidecar = split_path(path);
    fs::write(&sidecar, split + "\n").map_err(|e| Error::io(sidecar, e))
}

fn to_csv(d: &Dataset) -> String {
    let k = d.covariate_dim();
    let with_u = d.has_u_true();
    let mut out = String::from("id,t");
    for j in 1..=k {
        write!(out, ",x_{j}").unwrap();
    }
    out.push_str(",a,y");
    if with_u {
        out.push_str(",u_true");
    }
    out.push('\n');
    for traj in &d.trajectories {
        for step in 0..traj.len() {
            write!(out, "{},{step}", traj.id).unwrap();
            for v in &traj.x[step] {
                write!(out, ",{}", fmt_real(*v)).unwrap();
            }
            write!(out, ",{},{}", traj.a[step], fmt_real(traj.y[step])).unwrap();
            if with_u {
                write!(out, ",{}", fmt_real(traj.u_true.unwrap_or(f64::NAN))).unwrap();
            }
            out.push('\n');
        }
    }
    out
}

fn parse_csv(text: &str) -> Result<Vec<Trajectory>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Ok(Vec::new());
    };
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let bad_header = |message: String| Error::Parse {
        line: 1,
        field: "header".into(),
        message,
    };
    if cols.len() < 5 || cols[0] != "id" || cols[1] != "t" {
        return Err(bad_header("expected `id,t,x_1,...,x_k,a,y[,u_true]`".into()));
    }
    let with_u = cols.last() == Some(&"u_true");
    let tail = if with_u { 3 } else { 2 };
    let k = cols.len() - 2 - tail;
    if k == 0 {
        return Err(bad_header("no covariate columns".into()));
    }
    for (j, c) in cols[2..2 + k].iter().enumerate() {
        if *c != format!("x_{}", j + 1) {
            return Err(bad_header(format!("column {c} should be x_{}", j + 1)));
        }
    }
    if cols[2 + k] != "a" || cols[3 + k] != "y" {
        return Err(bad_header("expected `a,y` after covariates".into()));
    }

    let mut out: Vec<Trajectory> = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(Error::Parse {
                line: lineno,
                field: "row".into(),
                message: format!("{} fields, header has {}", fields.len(), cols.len()),
            });
        }
        let real = |col: usize| -> Result<f64> {
            fields[col].parse::<f64>().map_err(|e| Error::Parse {
                line: lineno,
                field: cols[col].to_string(),
                message: e.to_string(),
            })
        };
        let int = |col: usize| -> Result<u64> {
            fields[col].parse::<u64>().map_err(|e| Error::Parse {
                line: lineno,
                field: cols[col].to_string(),
                message: e.to_string(),
            })
        };
        let id = fields[0];
        if id.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                field: "id".into(),
                message: "empty id".into(),
            });
        }
        let step = int(1)? as usize;
        let x = (2..2 + k).map(real).collect::<Result<Vec<_>>>()?;
        let a_raw = int(2 + k)?;
        let a = u8::try_from(a_raw).unwrap_or(u8::MAX);
        if a > 1 {
            return Err(Error::invariant(
                id,
                format!("timestep {step}: treatment {a_raw} not in {{0,1}}"),
            ));
        }
        let y = real(3 + k)?;
        let u = if with_u { Some(real(4 + k)?) } else { None };

        let continues = out.last().is_some_and(|t| t.id == id);
        if !continues {
            if out.iter().any(|t| t.id == id) {
                return Err(Error::invariant(id, "rows are not contiguous"));
            }
            out.push(Trajectory {
                id: id.to_string(),
                x: Vec::new(),
                a: Vec::new(),
                y: Vec::new(),
                u_true: u,
            });
        }
        let traj = out.last_mut().expect("pushed above");
        if step != traj.len() {
            return Err(Error::invariant(
                id,
                format!("line {lineno}: timestep {step}, expected {}", traj.len()),
            ));
        }
        if traj.u_true != u && !(traj.u_true.is_some_and(f64::is_nan) && u.is_some_and(f64::is_nan))
        {
            return Err(Error::invariant(
                id,
                format!("line {lineno}: u_true differs between rows"),
            ));
        }
        traj.x.push(x);
        traj.a.push(a);
        traj.y.push(y);
    }
    Ok(out)
}

fn to_json(d: &Dataset) -> Result<String> {
    serde_json::to_string_pretty(&d.trajectories)
        .map(|s| s + "\n")
        .map_err(|e| Error::Schema(e.to_string()))
}

fn parse_json(text: &str) -> Result<Vec<Trajectory>> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        field: "json".into(),
        message: e.to_string(),
    })
}

/// Assigns trajectories to train/test.
///
/// The assignment depends only on the sorted ids, `train_frac`, and `seed`. The train
/// count is `round(train_frac * n)` clamped so both partitions are nonempty.
pub fn split_dataset(d: &Dataset, train_frac: f64, seed: u64) -> Result<Dataset> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::Config(format!(
            "train_frac must lie in (0,1), got {train_frac}"
        )));
    }
    let n = d.trajectories.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "splitting needs at least 2 trajectories, got {n}"
        )));
    }
    let mut ids: Vec<&str> = d.trajectories.iter().map(|t| t.id.as_str()).collect();
    ids.sort_unstable();
    let mut rng = rng::stream(seed, rng::hash_str("split"));
    ids.shuffle(&mut rng);
    let n_train = ((train_frac * n as f64).round() as usize).clamp(1, n - 1);

    let split = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let part = if i < n_train {
                Partition::Train
            } else {
                Partition::Test
            };
            (id.to_string(), part)
        })
        .collect();
    let mut out = d.clone();
    out.split = split;
    out.meta
        .insert("train_frac".into(), format!("{}", n_train as f64 / n as f64));
    out.meta
        .insert("train_frac_requested".into(), format!("{train_frac}"));
    out.meta.insert("split_seed".into(), seed.to_string());
    Ok(out)
}
