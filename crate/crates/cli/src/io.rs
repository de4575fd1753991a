//! Matrix CSV, observation JSON and run manifests.

use std::fs;
use std::path::{Path, PathBuf};

use ctmcgen_core::reference::RATINGS;
use ctmcgen_core::simulate::fmt_f64;
use ctmcgen_core::{GeneratorMatrix, ObservationSet, TransitionMatrix};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub fn labels(h: usize) -> Vec<String> {
    if h == RATINGS.len() {
        RATINGS.iter().map(|s| s.to_string()).collect()
    } else {
        (0..h).map(|i| format!("S{i}")).collect()
    }
}

/// Square matrix from CSV; a first row that does not parse as numbers is
/// taken as a header of labels.
pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    parse_matrix(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub fn parse_matrix(text: &str) -> Result<DMatrix<f64>, String> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| e.to_string())?;
        let parsed: Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(v) => rows.push(v),
            Err(_) if k == 0 => continue,
            Err(e) => return Err(format!("row {}: {e}", k + 1)),
        }
    }
    let h = rows.len();
    if h == 0 {
        return Err("no data rows".into());
    }
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != h) {
        return Err(format!("data row {} has {} entries, expected {h}", i + 1, r.len()));
    }
    Ok(DMatrix::from_fn(h, h, |i, j| rows[i][j]))
}

pub fn matrix_csv(m: &DMatrix<f64>) -> String {
    let mut out = labels(m.ncols()).join(",");
    out.push('\n');
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|&x| fmt_f64(x)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn read_generator(path: &Path) -> Result<GeneratorMatrix, CliError> {
    GeneratorMatrix::new(read_matrix(path)?)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ObservationFile {
    pub dt: f64,
    pub obligors: Vec<u64>,
    pub tpms: Vec<Vec<Vec<f64>>>,
}

pub fn read_observations(path: &Path) -> Result<ObservationSet, CliError> {
    let bad = |e: String| CliError::Input(format!("{}: {e}", path.display()));
    let text = fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
    let file: ObservationFile = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    let mut tpms = Vec::with_capacity(file.tpms.len());
    for (u, rows) in file.tpms.iter().enumerate() {
        let h = rows.len();
        if rows.iter().any(|r| r.len() != h) {
            return Err(bad(format!("tpm {u} is not square")));
        }
        let m = DMatrix::from_fn(h, h, |i, j| rows[i][j]);
        tpms.push(TransitionMatrix::new(m, file.dt).map_err(|e| bad(format!("tpm {u}: {e}")))?);
    }
    ObservationSet::from_tpms(file.dt, tpms, &file.obligors).map_err(|e| bad(e.to_string()))
}

pub fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Estimator(e.to_string()))?;
    write(path, &(text + "\n"))
}

/// `q.csv` -> `q.<suffix>`
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

#[derive(Debug, Serialize)]
pub struct RunManifest<'a, C: Serialize> {
    pub command: &'a str,
    pub config: &'a C,
    pub seed: Option<u64>,
    pub versions: Versions,
    pub wall_time_seconds: f64,
    pub outputs: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct Versions {
    pub ctmcgen: &'static str,
    pub rustc_target: &'static str,
}

impl Versions {
    pub fn current() -> Self {
        Versions {
            ctmcgen: env!("CARGO_PKG_VERSION"),
            rustc_target: std::env::consts::ARCH,
        }
    }
}

/// Writes `<first output>.manifest.json` describing the run.
pub fn write_manifest<C: Serialize>(
    command: &str,
    config: &C,
    seed: Option<u64>,
    started: std::time::Instant,
    outputs: &[PathBuf],
) -> Result<PathBuf, CliError> {
    let target = outputs
        .first()
        .map(|p| sibling(p, "manifest.json"))
        .unwrap_or_else(|| PathBuf::from(format!("{command}.manifest.json")));
    let manifest = RunManifest {
        command,
        config,
        seed,
        versions: Versions::current(),
        wall_time_seconds: started.elapsed().as_secs_f64(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    write_json(&target, &manifest)?;
    Ok(target)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let m = DMatrix::from_fn(3, 3, |i, j| {
            if i == j {
                -0.1 / 3.0 * (i + 1) as f64
            } else {
                1e-17 * (i as f64 + 1.0) + 1.0 / 7.0 * j as f64
            }
        });
        let back = parse_matrix(&matrix_csv(&m)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn header_is_optional() {
        let a = parse_matrix("0,0\n0,0\n").unwrap();
        let b = parse_matrix("X,Y\n0,0\n0,0\n").unwrap();
        assert_eq!(a, b);
        assert!(parse_matrix("1,2\n3\n").is_err());
    }
}
