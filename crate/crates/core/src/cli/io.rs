use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::Trajectory;
use crate::model::Emulator;
use crate::training::{Dataset, TrainingConfig};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    /// Training seed the checkpoint was created with.
    pub seed: u64,
    pub config: TrainingConfig,
    pub emulator: Emulator,
}

impl ModelCheckpoint {
    pub fn new(config: TrainingConfig, emulator: Emulator) -> Self {
        ModelCheckpoint {
            format_version: CHECKPOINT_VERSION,
            seed: config.training.seed,
            config,
            emulator,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let parse_err = |e: serde_json::Error| Error::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        };
        let value: serde_json::Value = serde_json::from_str(text).map_err(parse_err)?;
        let found = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .map(|v| v as u32)
            .unwrap_or(0);
        if found != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found,
                expected: CHECKPOINT_VERSION,
            });
        }
        let ckpt: ModelCheckpoint = serde_json::from_value(value).map_err(parse_err)?;
        ckpt.emulator.mlp.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_json())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_json(&text, &path)
    }
}

/// Provenance record written next to every set of artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub system: String,
    pub h: f64,
    pub steps: usize,
    pub seeds: BTreeMap<String, u64>,
    pub config_sha256: String,
    pub files: Vec<String>,
}

impl Manifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        write_text(&dir.join(MANIFEST_FILE), &s)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path,
            message: e.to_string(),
        })
    }
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            message: format!("{other:?}"),
        },
    }
}

/// Writes a table with a header row; `None` cells are left empty.
pub fn write_table(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<Option<f64>>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        let cells: Vec<String> = row.iter().map(|c| c.map(|v| v.to_string()).unwrap_or_default()).collect();
        w.write_record(&cells).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn state_header(dim: usize) -> Vec<String> {
    (1..=dim).map(|i| format!("x{i}")).collect()
}

/// One row per time step, one column per state coordinate.
pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<()> {
    write_table(
        path,
        &state_header(traj.dim()),
        traj.states().map(|s| s.iter().map(|&v| Some(v)).collect()),
    )
}

/// Like [`write_trajectory_csv`] with a leading time column, every `stride` steps.
pub fn write_timed_trajectory_csv(path: &Path, traj: &Trajectory, stride: usize) -> Result<()> {
    let mut header = vec!["t_s".to_string()];
    header.extend(state_header(traj.dim()));
    let stride = stride.max(1);
    write_table(
        path,
        &header,
        traj.states().enumerate().step_by(stride).map(|(k, s)| {
            std::iter::once(Some(k as f64 * traj.h))
                .chain(s.iter().map(|&v| Some(v)))
                .collect()
        }),
    )
}

pub fn read_trajectory_csv(path: &Path, h: f64, tag: &str) -> Result<Trajectory> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let dim = header.len();
    if header.iter().collect::<Vec<_>>() != state_header(dim) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            message: format!("unexpected header {:?}", header),
        });
    }
    let mut traj = Trajectory::new(dim, h, tag);
    let mut state = vec![0.0; dim];
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        for (i, cell) in rec.iter().enumerate() {
            state[i] = cell.trim().parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                message: format!("row {}: bad number {cell:?}", row + 2),
            })?;
        }
        traj.push(&state)?;
    }
    Ok(traj)
}

/// Loads a dataset directory written by `gen-data`.
pub fn read_dataset(dir: &Path) -> Result<(Dataset, Manifest)> {
    if !dir.exists() {
        return Err(Error::NotFound(dir.to_path_buf()));
    }
    let manifest = Manifest::load(dir)?;
    if manifest.kind != "dataset" {
        return Err(Error::Usage(format!("{} is not a dataset directory", dir.display())));
    }
    let trajectories = manifest
        .files
        .iter()
        .map(|f| read_trajectory_csv(&dir.join(f), manifest.h, &manifest.system))
        .collect::<Result<Vec<_>>>()?;
    Ok((Dataset::new(trajectories)?, manifest))
}

pub fn trajectory_file_name(i: usize) -> String {
    format!("traj_{i:03}.csv")
}

pub fn out_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}
