//! On-disk formats: dataset directories, JSON documents, TSV tables and run manifests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use nplds::{Error, ModelIIParams, ModelIParams, Result, SpikeDataset};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;

pub const DATASET_MANIFEST: &str = "manifest.json";
pub const COUNTS_FILE: &str = "counts.bin";
pub const STIMULUS_FILE: &str = "stimulus.bin";
pub const TRUTH_FILE: &str = "truth.json";
pub const TRUE_LOG_RATES_FILE: &str = "true_log_rates.bin";
pub const RUN_MANIFEST: &str = "run.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Schema(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, to_json(value)?.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

pub fn encode_u32(values: &[u32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn encode_f64(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values.into_iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_u32(bytes: &[u8], path: &Path) -> Result<Vec<u32>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::Schema(format!("{}: length {} is not a multiple of 4", path.display(), bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
}

pub fn decode_f64(bytes: &[u8], path: &Path) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::Schema(format!("{}: length {} is not a multiple of 8", path.display(), bytes.len())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

/// Header of a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub schema_version: u32,
    pub num_trials: usize,
    pub num_bins: usize,
    pub num_neurons: usize,
    pub input_dim: usize,
    pub bin_width: f64,
    pub trial_ids: Vec<u32>,
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub counts_sha256: String,
    pub stimulus_sha256: String,
}

pub const DATASET_FORMAT: &str = "nplds-dataset";

/// Writes `manifest.json`, `counts.bin` and `stimulus.bin`; returns the manifest hash.
pub fn write_dataset(dir: &Path, ds: &SpikeDataset, preset: Option<&str>, seed: Option<u64>) -> Result<String> {
    let counts = encode_u32(ds.counts());
    let stimulus = encode_f64(ds.stimulus().iter().copied());
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        schema_version: SCHEMA_VERSION,
        num_trials: ds.num_trials(),
        num_bins: ds.num_bins(),
        num_neurons: ds.num_neurons(),
        input_dim: ds.input_dim(),
        bin_width: ds.bin_width,
        trial_ids: ds.trial_ids().to_vec(),
        preset: preset.map(str::to_owned),
        seed,
        counts_sha256: sha256_hex(&counts),
        stimulus_sha256: sha256_hex(&stimulus),
    };
    write_bytes(&dir.join(COUNTS_FILE), &counts)?;
    write_bytes(&dir.join(STIMULUS_FILE), &stimulus)?;
    let text = to_json(&manifest)?;
    write_bytes(&dir.join(DATASET_MANIFEST), text.as_bytes())?;
    Ok(sha256_hex(text.as_bytes()))
}

/// A validated dataset together with the hash of its manifest.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub dataset: SpikeDataset,
    pub manifest: DatasetManifest,
    pub manifest_sha256: String,
}

pub fn read_dataset(dir: &Path) -> Result<LoadedDataset> {
    let manifest_path = dir.join(DATASET_MANIFEST);
    let text = read_bytes(&manifest_path)?;
    let manifest: DatasetManifest =
        serde_json::from_slice(&text).map_err(|e| Error::Schema(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::Schema(format!("{}: format `{}` is not `{DATASET_FORMAT}`", manifest_path.display(), manifest.format)));
    }
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Schema(format!("unsupported dataset schema version {}", manifest.schema_version)));
    }
    let counts_path = dir.join(COUNTS_FILE);
    let counts_bytes = read_bytes(&counts_path)?;
    if sha256_hex(&counts_bytes) != manifest.counts_sha256 {
        return Err(Error::Manifest(format!("{} does not match its manifest hash", counts_path.display())));
    }
    let stim_path = dir.join(STIMULUS_FILE);
    let stim_bytes = read_bytes(&stim_path)?;
    if sha256_hex(&stim_bytes) != manifest.stimulus_sha256 {
        return Err(Error::Manifest(format!("{} does not match its manifest hash", stim_path.display())));
    }
    let counts = decode_u32(&counts_bytes, &counts_path)?;
    let stimulus = decode_f64(&stim_bytes, &stim_path)?;
    let dataset = SpikeDataset::with_trial_ids(
        counts,
        stimulus,
        manifest.num_trials,
        manifest.num_bins,
        manifest.num_neurons,
        manifest.input_dim,
        manifest.bin_width,
        manifest.trial_ids.clone(),
    )
    .map_err(|e| Error::Schema(format!("{}: {e}", dir.display())))?;
    Ok(LoadedDataset {
        dataset,
        manifest,
        manifest_sha256: sha256_hex(&text),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrueModel {
    Model1(ModelIParams),
    Model2(ModelIIParams),
}

/// Ground truth written next to a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub preset: String,
    pub seed: u64,
    /// Group label of every neuron.
    pub groups: Vec<usize>,
    pub model: TrueModel,
    /// Stationary latent correlation per trial (correlation sweep only).
    pub correlations: Option<Vec<f64>>,
}

pub fn write_truth(dir: &Path, truth: &GroundTruth, log_rates: &[DMatrix<f64>]) -> Result<()> {
    write_json(&dir.join(TRUTH_FILE), truth)?;
    write_bytes(&dir.join(TRUE_LOG_RATES_FILE), &encode_f64(row_major(log_rates)))
}

/// Row-major concatenation of `T x p` trial matrices.
pub fn row_major(trials: &[DMatrix<f64>]) -> impl Iterator<Item = f64> + '_ {
    trials.iter().flat_map(|m| (0..m.nrows()).flat_map(move |t| (0..m.ncols()).map(move |j| m[(t, j)])))
}

pub fn read_truth(dir: &Path, num_bins: usize, num_neurons: usize) -> Result<Option<(GroundTruth, Vec<DMatrix<f64>>)>> {
    let path = dir.join(TRUTH_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let truth: GroundTruth = read_json(&path)?;
    let z_path = dir.join(TRUE_LOG_RATES_FILE);
    let values = decode_f64(&read_bytes(&z_path)?, &z_path)?;
    let per_trial = num_bins * num_neurons;
    if per_trial == 0 || values.len() % per_trial != 0 {
        return Err(Error::Schema(format!("{}: length does not match the dataset shape", z_path.display())));
    }
    let trials = values
        .chunks_exact(per_trial)
        .map(|c| DMatrix::from_row_slice(num_bins, num_neurons, c))
        .collect();
    Ok(Some((truth, trials)))
}

/// Tab-separated table with a header row; numbers use shortest round-trip formatting.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.columns.len(), "row width must match the header");
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut out = self.columns.join("\t");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Schema("empty table".into()))?;
        let columns: Vec<String> = header.split('\t').map(str::to_owned).collect();
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let row: Vec<String> = line.split('\t').map(str::to_owned).collect();
            if row.len() != columns.len() {
                return Err(Error::Schema(format!("table row {} has {} fields, header has {}", n + 1, row.len(), columns.len())));
            }
            rows.push(row);
        }
        Ok(Self { columns, rows })
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Schema(format!("table has no column `{name}`")))
    }

    pub fn column_f64(&self, name: &str) -> Result<Vec<f64>> {
        let idx = self.column_index(name)?;
        self.rows
            .iter()
            .map(|r| r[idx].parse::<f64>().map_err(|e| Error::Schema(format!("column `{name}`: `{}`: {e}", r[idx]))))
            .collect()
    }

    /// Value in `column` of the first row whose `key_column` equals `key`.
    pub fn lookup(&self, key_column: &str, key: &str, column: &str) -> Result<String> {
        let k = self.column_index(key_column)?;
        let c = self.column_index(column)?;
        self.rows
            .iter()
            .find(|r| r[k] == key)
            .map(|r| r[c].clone())
            .ok_or_else(|| Error::Schema(format!("no row with {key_column} = `{key}`")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_bytes(path, self.render().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        let text = String::from_utf8(bytes).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

pub fn num(v: f64) -> String {
    format!("{v}")
}

/// Provenance record of one command run. Two runs with equal records write
/// byte-identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub schema_version: u32,
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    /// Hashes of the manifests of the inputs, by role.
    pub inputs: BTreeMap<String, String>,
    /// Hashes of every file written, by path relative to the output directory.
    pub files: BTreeMap<String, String>,
}

/// Collects written files so the run manifest can list their hashes.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    files: BTreeMap<String, String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_bytes(&self.root.join(name), bytes)?;
        self.files.insert(name.to_owned(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.write(name, to_json(value)?.as_bytes())
    }

    pub fn write_table(&mut self, name: &str, table: &Table) -> Result<()> {
        self.write(name, table.render().as_bytes())
    }

    /// Records files written by other means, hashing them from disk.
    pub fn record(&mut self, name: &str) -> Result<()> {
        let bytes = read_bytes(&self.root.join(name))?;
        self.files.insert(name.to_owned(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn finish<C: Serialize>(self, command: &str, seed: u64, config: &C, inputs: BTreeMap<String, String>) -> Result<String> {
        let manifest = RunManifest {
            format: "nplds-run".into(),
            schema_version: SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            config_sha256: sha256_hex(to_json(config)?.as_bytes()),
            inputs,
            files: self.files,
        };
        let text = to_json(&manifest)?;
        write_bytes(&self.root.join(RUN_MANIFEST), text.as_bytes())?;
        Ok(sha256_hex(text.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }

    #[test]
    fn table_round_trips() {
        let mut t = Table::new(&["metric", "value"]);
        t.push(vec!["rmse".into(), num(0.1 + 0.2)]);
        t.push(vec!["nan".into(), num(f64::NAN)]);
        let back = Table::parse(&t.render()).unwrap();
        assert_eq!(back, t);
        let v = back.column_f64("value").unwrap();
        assert_eq!(v[0], 0.1 + 0.2);
        assert!(v[1].is_nan());
        assert_eq!(back.lookup("metric", "rmse", "value").unwrap(), "0.30000000000000004");
    }

    #[test]
    fn ragged_table_is_rejected() {
        assert!(matches!(Table::parse("a\tb\n1\n"), Err(Error::Schema(_))));
    }

    #[test]
    fn dataset_round_trips_and_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let ds = SpikeDataset::with_trial_ids(vec![1, 2, 3, 4, 5, 6], vec![0.5, -1.0, 2.0], 3, 1, 2, 1, 0.05, vec![2, 5, 9]).unwrap();
        let sha = write_dataset(dir.path(), &ds, Some("fig2"), Some(7)).unwrap();
        let loaded = read_dataset(dir.path()).unwrap();
        assert_eq!(loaded.dataset, ds);
        assert_eq!(loaded.manifest_sha256, sha);
        assert_eq!(loaded.manifest.seed, Some(7));

        let counts = dir.path().join(COUNTS_FILE);
        let mut bytes = fs::read(&counts).unwrap();
        bytes[0] ^= 1;
        fs::write(&counts, bytes).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Manifest(_))));
    }

    #[test]
    fn counts_are_little_endian_u32() {
        assert_eq!(encode_u32(&[1, 256]), vec![1, 0, 0, 0, 0, 1, 0, 0]);
        assert_eq!(decode_f64(&encode_f64([1.5, -2.0]), Path::new("x")).unwrap(), vec![1.5, -2.0]);
    }
}
