//! File formats: dataset CSV, truth, model and density JSON documents.

use std::fs;
use std::path::Path;

use clr_core::em::{Algorithm, EmConfig};
use clr_core::predict::ClusterDensityModel;
use clr_core::{ClrModel, Dataset, GroundTruth, ProblemSpec};
use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{BenchError, Result};

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| BenchError::io(dir, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| BenchError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| BenchError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| BenchError::parse(path, e))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| BenchError::parse(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> BenchError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => BenchError::io(path, io),
        other => BenchError::parse(path, format!("{other:?}")),
    }
}

/// Writes rows of serializable records under an explicit header, so empty
/// tables still carry their columns.
pub fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| BenchError::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

/// Header `x1..xp,y[,label]`; floats in shortest round-trip form.
pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let p = ds.p();
    let mut w = csv_writer(path)?;
    let mut header: Vec<String> = (1..=p).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    if ds.labels().is_some() {
        header.push("label".into());
    }
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for i in 0..ds.n() {
        let mut row: Vec<String> = (0..p).map(|j| ds.x()[(i, j)].to_string()).collect();
        row.push(ds.y()[i].to_string());
        if let Some(l) = ds.labels() {
            row.push(l[i].to_string());
        }
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| BenchError::io(path, e))
}

/// Reads a dataset CSV. `x*` columns are predictors, `y` the response and an
/// optional `label` column the true cluster ids.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let xcols: Vec<usize> = (0..header.len()).filter(|&j| is_x_column(&header[j])).collect();
    let ycol = header.iter().position(|h| h == "y");
    let lcol = header.iter().position(|h| h == "label");
    let Some(ycol) = ycol else {
        return Err(BenchError::parse(path, "missing `y` column"));
    };
    if xcols.is_empty() {
        return Err(BenchError::parse(path, "no `x` columns"));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let num = |j: usize| -> Result<f64> {
            rec[j]
                .trim()
                .parse::<f64>()
                .map_err(|_| BenchError::parse(path, format!("row {}: bad number `{}`", line + 1, &rec[j])))
        };
        for &j in &xcols {
            xs.push(num(j)?);
        }
        ys.push(num(ycol)?);
        if let Some(l) = lcol {
            labels.push(
                rec[l]
                    .trim()
                    .parse::<i32>()
                    .map_err(|_| BenchError::parse(path, format!("row {}: bad label", line + 1)))?,
            );
        }
    }
    let n = ys.len();
    if n == 0 {
        return Err(BenchError::parse(path, "no data rows"));
    }
    let x = DMatrix::from_row_slice(n, xcols.len(), &xs);
    let labels = lcol.map(|_| labels);
    Dataset::new(x, DVector::from_vec(ys), labels).map_err(|e| BenchError::parse(path, e))
}

fn is_x_column(h: &str) -> bool {
    h.strip_prefix('x').is_some_and(|r| !r.is_empty() && r.chars().all(|c| c.is_ascii_digit()))
}

/// Reads predictor rows: every `x*` column of a CSV, other columns ignored.
pub fn read_x_rows(path: &Path) -> Result<DMatrix<f64>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let xcols: Vec<usize> = (0..header.len()).filter(|&j| is_x_column(&header[j])).collect();
    if xcols.is_empty() {
        return Err(BenchError::parse(path, "no `x` columns"));
    }
    let mut xs = Vec::new();
    let mut n = 0;
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        for &j in &xcols {
            xs.push(rec[j].trim().parse::<f64>().map_err(|_| BenchError::parse(path, format!("bad number `{}`", &rec[j])))?);
        }
        n += 1;
    }
    Ok(DMatrix::from_row_slice(n, xcols.len(), &xs))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(path: &Path, what: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(BenchError::parse(path, format!("ragged `{what}` rows")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub spec: ProblemSpec,
    /// K rows of `[beta_k0, beta_k1..beta_kp]`.
    pub beta: Vec<Vec<f64>>,
    pub sigma: Vec<f64>,
    /// Cluster id per row, -1 for corrupted rows.
    pub labels: Vec<i32>,
}

impl TruthFile {
    pub fn new(spec: &ProblemSpec, gt: &GroundTruth) -> Self {
        Self {
            spec: spec.clone(),
            beta: rows(&gt.beta),
            sigma: gt.sigma.iter().copied().collect(),
            labels: gt.labels.clone(),
        }
    }

    pub fn load(path: &Path) -> Result<(Self, GroundTruth)> {
        let t: TruthFile = read_json(path)?;
        let beta = from_rows(path, "beta", &t.beta)?;
        if t.sigma.len() != beta.nrows() {
            return Err(BenchError::parse(path, "sigma length differs from beta rows"));
        }
        let gt = GroundTruth {
            beta,
            sigma: DVector::from_vec(t.sigma.clone()),
            labels: t.labels.clone(),
        };
        Ok((t, gt))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub restarts: usize,
    /// SHA-256 of the engine settings as canonical JSON.
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub k: usize,
    pub p: usize,
    /// K rows of `[beta_k0, beta_k1..beta_kp]`.
    pub beta: Vec<Vec<f64>>,
    pub sigma: Vec<f64>,
    pub mix: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<Vec<f64>>>,
    pub provenance: Provenance,
}

impl ModelFile {
    pub fn new(model: &ClrModel, provenance: Provenance, with_weights: bool) -> Self {
        Self {
            k: model.k(),
            p: model.p(),
            beta: rows(&model.beta),
            sigma: model.sigma.iter().copied().collect(),
            mix: model.mix.iter().copied().collect(),
            weights: with_weights.then(|| rows(&model.weights)),
            provenance,
        }
    }

    /// Loads the model; without stored weights the membership matrix is empty.
    pub fn load(path: &Path) -> Result<(Self, ClrModel)> {
        let f: ModelFile = read_json(path)?;
        let beta = from_rows(path, "beta", &f.beta)?;
        if beta.nrows() != f.k || beta.ncols() != f.p + 1 {
            return Err(BenchError::parse(path, format!("beta is {}x{}, expected {}x{}", beta.nrows(), beta.ncols(), f.k, f.p + 1)));
        }
        if f.sigma.len() != f.k || f.mix.len() != f.k {
            return Err(BenchError::parse(path, "sigma and mix need K entries"));
        }
        if f.sigma.iter().any(|s| !(*s > 0.0)) {
            return Err(BenchError::parse(path, "sigma entries must be positive"));
        }
        let weights = match &f.weights {
            Some(w) => {
                let m = from_rows(path, "weights", w)?;
                if m.ncols() != f.k {
                    return Err(BenchError::parse(path, "weights need K columns"));
                }
                m
            }
            None => DMatrix::zeros(0, f.k),
        };
        let model = ClrModel {
            beta,
            sigma: DVector::from_vec(f.sigma.clone()),
            weights,
            mix: DVector::from_vec(f.mix.clone()),
        };
        Ok((f, model))
    }
}

pub fn config_hash(cfg: &EmConfig) -> String {
    let json = serde_json::to_string(cfg).expect("engine settings serialize");
    hex::encode(Sha256::digest(json.as_bytes()))
}

pub fn load_density(path: &Path) -> Result<ClusterDensityModel> {
    let mut d: ClusterDensityModel = read_json(path)?;
    d.prepare().map_err(|e| BenchError::parse(path, e))?;
    Ok(d)
}
