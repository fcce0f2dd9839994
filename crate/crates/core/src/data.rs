//! CSV ingestion, standardisation, splitting and minibatching.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FawnError, Result};
use crate::tensor::Matrix;

/// Environment variable naming the directory that holds `manifest.json`.
pub const DATA_DIR_ENV: &str = "FAWN_DATA_DIR";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub targets: Matrix,
    pub feature_names: Vec<String>,
    pub source_id: String,
}

impl Dataset {
    pub fn new(features: Matrix, targets: Matrix, source_id: impl Into<String>) -> Result<Self> {
        if features.rows() != targets.rows() {
            return Err(FawnError::InvalidInput(format!(
                "{} feature rows but {} target rows",
                features.rows(),
                targets.rows()
            )));
        }
        if features.rows() < 2 {
            return Err(FawnError::InvalidInput("a dataset needs at least 2 rows".into()));
        }
        if !features.is_finite() || !targets.is_finite() {
            return Err(FawnError::InvalidInput("non-finite value in dataset".into()));
        }
        let feature_names = (0..features.cols()).map(|j| format!("x{j}")).collect();
        Ok(Self {
            features,
            targets,
            feature_names,
            source_id: source_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn num_targets(&self) -> usize {
        self.targets.cols()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(indices),
            targets: self.targets.select_rows(indices),
            feature_names: self.feature_names.clone(),
            source_id: self.source_id.clone(),
        }
    }
}

fn parse_cell(cell: &str) -> Option<f64> {
    cell.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Reads a numeric CSV; `target_columns` are zero-based column indices.
///
/// A first row in which no cell parses as a number is taken as a header.
pub fn load_csv(path: &Path, target_columns: &[usize]) -> Result<Dataset> {
    if target_columns.is_empty() {
        return Err(FawnError::InvalidInput("no target columns given".into()));
    }
    let parse_err = |line: u64, column: usize, message: String| FawnError::Parse {
        path: path.to_path_buf(),
        line,
        column,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => FawnError::Io(io),
            other => parse_err(0, 0, format!("{other:?}")),
        })?;

    let mut names: Option<Vec<String>> = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (index, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(index as u64 + 1, |p| p.line());
            parse_err(line, 0, e.to_string())
        })?;
        let line = record.position().map_or(index as u64 + 1, |p| p.line());
        if index == 0 && record.iter().all(|c| parse_cell(c).is_none()) {
            names = Some(record.iter().map(str::to_string).collect());
            width = Some(record.len());
            continue;
        }
        if record.len() == 1 && record.get(0) == Some("") {
            continue;
        }
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(parse_err(line, record.len(), format!("expected {expected} columns, found {}", record.len())));
        }
        let row = record
            .iter()
            .enumerate()
            .map(|(j, cell)| parse_cell(cell).ok_or_else(|| parse_err(line, j + 1, format!("non-numeric cell `{cell}`"))))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    let width = width.unwrap_or(0);
    if let Some(&bad) = target_columns.iter().find(|&&c| c >= width) {
        return Err(FawnError::InvalidInput(format!(
            "target column {bad} missing in {} ({width} columns)",
            path.display()
        )));
    }
    let feature_cols: Vec<usize> = (0..width).filter(|c| !target_columns.contains(c)).collect();
    let n = rows.len();
    let features = Matrix::from_fn(n, feature_cols.len(), |i, j| rows[i][feature_cols[j]]);
    let targets = Matrix::from_fn(n, target_columns.len(), |i, j| rows[i][target_columns[j]]);
    let source = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
    let mut ds = Dataset::new(features, targets, source)?;
    if let Some(names) = names {
        ds.feature_names = feature_cols.iter().map(|&c| names[c].clone()).collect();
    }
    Ok(ds)
}

/// Per-column affine maps to zero mean and unit population std.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub target_std: Vec<f64>,
    /// Feature columns that were constant (their std is recorded as 1).
    pub constant_features: Vec<usize>,
    pub constant_targets: Vec<usize>,
}

fn column_stats(m: &Matrix) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let n = m.rows() as f64;
    let mut mean = vec![0.0; m.cols()];
    let mut std = vec![0.0; m.cols()];
    let mut constant = Vec::new();
    for j in 0..m.cols() {
        let mu = (0..m.rows()).map(|i| m.get(i, j)).sum::<f64>() / n;
        let var = (0..m.rows()).map(|i| (m.get(i, j) - mu).powi(2)).sum::<f64>() / n;
        mean[j] = mu;
        std[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
        if var == 0.0 {
            constant.push(j);
        }
    }
    (mean, std, constant)
}

fn affine(m: &Matrix, mean: &[f64], std: &[f64], forward: bool) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| {
        if forward {
            (m.get(i, j) - mean[j]) / std[j]
        } else {
            m.get(i, j) * std[j] + mean[j]
        }
    })
}

impl StandardizationStats {
    pub fn fit(ds: &Dataset) -> Self {
        let (feature_mean, feature_std, constant_features) = column_stats(&ds.features);
        let (target_mean, target_std, constant_targets) = column_stats(&ds.targets);
        Self {
            feature_mean,
            feature_std,
            target_mean,
            target_std,
            constant_features,
            constant_targets,
        }
    }

    /// Statistics that leave data unchanged.
    pub fn identity(features: usize, targets: usize) -> Self {
        Self {
            feature_mean: vec![0.0; features],
            feature_std: vec![1.0; features],
            target_mean: vec![0.0; targets],
            target_std: vec![1.0; targets],
            constant_features: Vec::new(),
            constant_targets: Vec::new(),
        }
    }

    pub fn standardize_features(&self, x: &Matrix) -> Matrix {
        affine(x, &self.feature_mean, &self.feature_std, true)
    }

    pub fn standardize_targets(&self, z: &Matrix) -> Matrix {
        affine(z, &self.target_mean, &self.target_std, true)
    }

    pub fn unstandardize_features(&self, x: &Matrix) -> Matrix {
        affine(x, &self.feature_mean, &self.feature_std, false)
    }

    pub fn unstandardize_targets(&self, z: &Matrix) -> Matrix {
        affine(z, &self.target_mean, &self.target_std, false)
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        if ds.num_features() != self.feature_mean.len() || ds.num_targets() != self.target_mean.len() {
            return Err(crate::error::dim_err(
                "standardisation columns",
                format!("{}+{}", self.feature_mean.len(), self.target_mean.len()),
                format!("{}+{}", ds.num_features(), ds.num_targets()),
            ));
        }
        Ok(Dataset {
            features: self.standardize_features(&ds.features),
            targets: self.standardize_targets(&ds.targets),
            feature_names: ds.feature_names.clone(),
            source_id: ds.source_id.clone(),
        })
    }
}

/// Standardises every column of `ds` with its own statistics.
pub fn standardize(ds: &Dataset) -> (Dataset, StandardizationStats) {
    let stats = StandardizationStats::fit(ds);
    let out = stats.apply(ds).expect("stats fitted on the same dataset");
    (out, stats)
}

/// Seeded permutation split: the first `⌈0.9N⌉` permuted rows train.
pub fn split_90_10(ds: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    let n = ds.len();
    if n < 10 {
        return Err(FawnError::InvalidInput(format!("cannot split {n} rows 90/10; need at least 10")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (9 * n).div_ceil(10);
    Ok((ds.select(&perm[..n_train]), ds.select(&perm[n_train..])))
}

/// Shuffled index blocks of `batch_size`; the last block may be smaller.
pub fn minibatches(n: usize, batch_size: usize, epoch_seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    perm.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub target_columns: Vec<usize>,
}

/// Dataset name → file and target columns; paths resolve against the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(skip)]
    pub root: PathBuf,
    #[serde(flatten)]
    pub entries: BTreeMap<String, ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let mut manifest: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(manifest)
    }

    /// Manifest from `$FAWN_DATA_DIR`, falling back to `data/` in the
    /// workspace.
    pub fn discover() -> Result<Self> {
        Self::load(&data_dir().join("manifest.json"))
    }

    pub fn path_of(&self, name: &str) -> Result<PathBuf> {
        let entry = self.entry(name)?;
        Ok(self.root.join(&entry.path))
    }

    fn entry(&self, name: &str) -> Result<&ManifestEntry> {
        self.entries
            .get(name)
            .ok_or_else(|| FawnError::InvalidInput(format!("dataset `{name}` is not in the manifest")))
    }

    pub fn load_dataset(&self, name: &str) -> Result<Dataset> {
        let entry = self.entry(name)?;
        let path = self.root.join(&entry.path);
        if !path.exists() {
            return Err(FawnError::InvalidInput(format!(
                "dataset `{name}` missing: expected {}",
                path.display()
            )));
        }
        let mut ds = load_csv(&path, &entry.target_columns)?;
        ds.source_id = name.to_string();
        Ok(ds)
    }
}

pub fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

/// Loads `spec` either as a manifest name or as a CSV path whose last
/// column is the target.
pub fn resolve_dataset(spec: &str) -> Result<Dataset> {
    let path = Path::new(spec);
    if path.extension().is_some_and(|e| e == "csv") {
        let width = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(|e| FawnError::InvalidInput(format!("{}: {e}", path.display())))?
            .records()
            .next()
            .and_then(|r| r.ok())
            .map_or(0, |r| r.len());
        if width < 2 {
            return Err(FawnError::InvalidInput(format!("{} has fewer than 2 columns", path.display())));
        }
        return load_csv(path, &[width - 1]);
    }
    Manifest::discover()?.load_dataset(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::io::Write;

    fn write_tmp(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(".csv").tempfile().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn three_line_file() {
        let f = write_tmp("1,2\n3,4\n5,6\n");
        let ds = load_csv(f.path(), &[1]).unwrap();
        assert_eq!((ds.len(), ds.num_features(), ds.num_targets()), (3, 1, 1));
        assert_eq!(ds.targets.as_slice(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn header_is_detected() {
        let f = write_tmp("\"a\",\"b\",\"y\"\n1,2,3\n4,5,6\n");
        let ds = load_csv(f.path(), &[2]).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.feature_names, vec!["a", "b"]);
    }

    #[test]
    fn bad_cell_names_line_and_column() {
        let f = write_tmp("1,2\n3,abc\n");
        match load_csv(f.path(), &[1]) {
            Err(FawnError::Parse { line, column, .. }) => assert_eq!((line, column), (2, 2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_target_column() {
        let f = write_tmp("1,2\n3,4\n");
        assert!(matches!(load_csv(f.path(), &[5]), Err(FawnError::InvalidInput(_))));
    }

    #[test]
    fn standardize_examples() {
        let x = Matrix::from_rows(&[vec![1.0, 5.0], vec![2.0, 5.0], vec![3.0, 5.0]]);
        let ds = Dataset::new(x.clone(), x, "t").unwrap();
        let (out, stats) = standardize(&ds);
        assert_abs_diff_eq!(out.features.get(0, 0), -1.224_744_871_391_589, epsilon = 1e-12);
        assert_abs_diff_eq!(out.features.get(1, 0), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(stats.feature_std[0], 0.816_496_580_927_726, epsilon = 1e-12);
        assert_eq!(stats.feature_mean[0], 2.0);
        assert_eq!(stats.feature_std[1], 1.0);
        assert_eq!(stats.constant_features, vec![1]);
        assert_eq!(out.features.get(2, 1), 0.0);
        let (again, _) = standardize(&out);
        assert!(again.features.max_abs_diff(&out.features) < 1e-12);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let n = 506;
        let x = Matrix::from_fn(n, 1, |i, _| i as f64);
        let ds = Dataset::new(x.clone(), x, "t").unwrap();
        let (train, test) = split_90_10(&ds, 3).unwrap();
        assert_eq!((train.len(), test.len()), (456, 50));
        let mut all: Vec<f64> = train.features.as_slice().iter().chain(test.features.as_slice()).copied().collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..n).map(|i| i as f64).collect::<Vec<_>>());
        assert_eq!(split_90_10(&ds, 3).unwrap().0, train);
        let small = ds.select(&[0, 1, 2]);
        assert!(split_90_10(&small, 0).is_err());
    }

    #[test]
    fn minibatch_sizes() {
        let sizes: Vec<usize> = minibatches(300, 128, 1).iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![128, 128, 44]);
        assert_eq!(minibatches(50, 128, 1).len(), 1);
        assert_eq!(minibatches(300, 128, 9), minibatches(300, 128, 9));
    }
}
