//! Plain-file persistence. The workspace directory is the only state the
//! service keeps; every request reads from it.
//!
//! ```text
//! datasets/<id>/cube.hsic            immutable upload
//! datasets/<id>/meta.json
//! datasets/<id>/bags/<version>.json  one file per label update
//! datasets/<id>/bags/current         name of the live version
//! datasets/<id>/superpixels/<job>.hsim, latest
//! runs/<id>/run.json, proportions.f64, zweights.f64
//! influence/<id>/records.json, heatmap.hsic, request.json
//! jobs/<id>.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use efumi_core::io::{decode_cube, encode_cube};
use efumi_core::{BagSet, Cube, EfumiConfig, EfumiResult, Endmembers, Proportions, ResolvedParams, SuperpixelMap};
use serde::{Deserialize, Serialize};

use crate::error::{ApiError, ApiResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub rows: usize,
    pub cols: usize,
    pub bands: usize,
    pub wavelengths: Option<Vec<f64>>,
}

/// Everything about a finished run except the per-pixel arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset_id: String,
    pub bags_version: String,
    pub config: EfumiConfig,
    pub params: ResolvedParams,
    pub iterations: usize,
    pub converged: bool,
    pub vca_fallback: bool,
    pub cost_trace: Vec<f64>,
    /// Column 0 is the target signature.
    pub endmembers: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

pub fn new_id() -> String {
    uuid::Uuid::new_v4().simple().to_string()
}

// Ids come from clients; only accept what `new_id` produces.
fn check_id(id: &str) -> ApiResult<()> {
    if !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_alphanumeric()) {
        Ok(())
    } else {
        Err(ApiError::NotFound(format!("no such id {id:?}")))
    }
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().expect("workspace paths have parents");
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(".tmp-{}", new_id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

fn f64_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn f64_values(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
        .collect()
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError::Internal(e.to_string())
}

impl Workspace {
    pub fn open(root: impl Into<PathBuf>) -> std::io::Result<Self> {
        let root = root.into();
        for sub in ["datasets", "runs", "influence", "jobs"] {
            fs::create_dir_all(root.join(sub))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dataset_dir(&self, id: &str) -> ApiResult<PathBuf> {
        check_id(id)?;
        let dir = self.root.join("datasets").join(id);
        if dir.join("meta.json").is_file() {
            Ok(dir)
        } else {
            Err(ApiError::NotFound(format!("dataset {id} not found")))
        }
    }

    pub fn create_dataset(&self, cube_bytes: &[u8], cube: &Cube) -> ApiResult<String> {
        let id = new_id();
        let dir = self.root.join("datasets").join(&id);
        let meta = DatasetMeta {
            rows: cube.rows(),
            cols: cube.cols(),
            bands: cube.bands(),
            wavelengths: cube.wavelengths().map(<[f64]>::to_vec),
        };
        write_atomic(&dir.join("cube.hsic"), cube_bytes)?;
        // meta.json marks the dataset as present, so it goes last.
        write_atomic(&dir.join("meta.json"), &serde_json::to_vec_pretty(&meta)?)?;
        Ok(id)
    }

    pub fn meta(&self, id: &str) -> ApiResult<DatasetMeta> {
        let dir = self.dataset_dir(id)?;
        Ok(serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?)
    }

    pub fn cube(&self, id: &str) -> ApiResult<Cube> {
        let dir = self.dataset_dir(id)?;
        decode_cube(&fs::read(dir.join("cube.hsic"))?).map_err(internal)
    }

    /// Stores a new bag version and swaps the `current` pointer to it.
    pub fn put_bags(&self, id: &str, bags: &BagSet) -> ApiResult<String> {
        let dir = self.dataset_dir(id)?.join("bags");
        fs::create_dir_all(&dir)?;
        let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_nanos());
        let mut version = format!("{nanos:024}");
        while dir.join(format!("{version}.json")).exists() {
            version.push('0');
        }
        write_atomic(&dir.join(format!("{version}.json")), bags.to_json().map_err(internal)?.as_bytes())?;
        write_atomic(&dir.join("current"), version.as_bytes())?;
        Ok(version)
    }

    pub fn current_bags_version(&self, id: &str) -> ApiResult<Option<String>> {
        let path = self.dataset_dir(id)?.join("bags").join("current");
        match fs::read_to_string(path) {
            Ok(v) => Ok(Some(v)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn bags(&self, id: &str, version: &str, n_pixels: usize) -> ApiResult<BagSet> {
        let path = self.dataset_dir(id)?.join("bags").join(format!("{version}.json"));
        BagSet::from_json(&fs::read_to_string(path)?, n_pixels).map_err(internal)
    }

    pub fn save_superpixels(&self, id: &str, name: &str, map: &SuperpixelMap) -> ApiResult<String> {
        let dir = self.dataset_dir(id)?.join("superpixels");
        let file = format!("{name}.hsim");
        write_atomic(&dir.join(&file), &map.encode().map_err(internal)?)?;
        write_atomic(&dir.join("latest"), file.as_bytes())?;
        Ok(format!("datasets/{id}/superpixels/{file}"))
    }

    pub fn latest_superpixels(&self, id: &str) -> ApiResult<Option<Vec<u8>>> {
        let dir = self.dataset_dir(id)?.join("superpixels");
        match fs::read_to_string(dir.join("latest")) {
            Ok(file) => Ok(Some(fs::read(dir.join(file.trim()))?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Writes a finished run into `runs/<id>` in one rename, so readers never
    /// see a partial directory.
    pub fn save_run(&self, id: &str, record: &RunRecord, result: &EfumiResult<f64>) -> ApiResult<String> {
        let runs = self.root.join("runs");
        let tmp = runs.join(format!(".tmp-{id}"));
        fs::create_dir_all(&tmp)?;
        fs::write(tmp.join("run.json"), serde_json::to_vec_pretty(record)?)?;
        fs::write(tmp.join("proportions.f64"), f64_bytes(result.proportions.values()))?;
        fs::write(tmp.join("zweights.f64"), f64_bytes(&result.zweights))?;
        fs::rename(&tmp, runs.join(id))?;
        Ok(format!("runs/{id}"))
    }

    fn run_dir(&self, id: &str) -> ApiResult<PathBuf> {
        check_id(id)?;
        let dir = self.root.join("runs").join(id);
        if dir.join("run.json").is_file() {
            Ok(dir)
        } else {
            Err(ApiError::NotFound(format!("run {id} not found")))
        }
    }

    pub fn run_record(&self, id: &str) -> ApiResult<RunRecord> {
        Ok(serde_json::from_slice(&fs::read(self.run_dir(id)?.join("run.json"))?)?)
    }

    /// Rebuilds the full result so that influence reruns can warm-start.
    pub fn run_result(&self, id: &str) -> ApiResult<(RunRecord, EfumiResult<f64>)> {
        let dir = self.run_dir(id)?;
        let record = self.run_record(id)?;
        let columns = record.endmembers.len();
        let p = f64_values(&fs::read(dir.join("proportions.f64"))?);
        let z = f64_values(&fs::read(dir.join("zweights.f64"))?);
        let result = EfumiResult {
            endmembers: Endmembers::from_columns(record.endmembers.clone()).map_err(internal)?,
            proportions: Proportions::new(p, columns).map_err(internal)?,
            zweights: z,
            cost_trace: record.cost_trace.clone(),
            iterations: record.iterations,
            converged: record.converged,
            params: record.params,
            config: record.config.clone(),
            vca_fallback: record.vca_fallback,
        };
        Ok((record, result))
    }

    pub fn proportions_cube(&self, id: &str) -> ApiResult<Vec<u8>> {
        let (record, result) = self.run_result(id)?;
        let meta = self.meta(&record.dataset_id)?;
        let cube = Cube::new(meta.rows, meta.cols, result.proportions.n_cols(), result.proportions.values().to_vec())
            .map_err(internal)?;
        encode_cube(&cube).map_err(internal)
    }

    pub fn target_map(&self, id: &str) -> ApiResult<Vec<u8>> {
        let (record, result) = self.run_result(id)?;
        let meta = self.meta(&record.dataset_id)?;
        let cube = Cube::new(meta.rows, meta.cols, 1, result.proportions.target()).map_err(internal)?;
        encode_cube(&cube).map_err(internal)
    }

    pub fn influence_dir(&self, id: &str) -> PathBuf {
        self.root.join("influence").join(id)
    }

    pub fn read_influence(&self, id: &str, file: &str) -> ApiResult<Vec<u8>> {
        check_id(id)?;
        let path = self.influence_dir(id).join(file);
        fs::read(&path).map_err(|_| ApiError::NotFound(format!("influence result {id} not found")))
    }

    pub fn job_path(&self, id: &str) -> PathBuf {
        self.root.join("jobs").join(format!("{id}.json"))
    }

    pub fn read_job_bytes(&self, id: &str) -> ApiResult<Vec<u8>> {
        check_id(id)?;
        fs::read(self.job_path(id)).map_err(|_| ApiError::NotFound(format!("job {id} not found")))
    }
}
