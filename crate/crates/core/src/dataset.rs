//! Dataset files: one JSON header line followed by one line per trajectory.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::TransitionSample;
use crate::model::{content_hash, ModelDescription};
use crate::multibody::{Configuration, State, Velocity};
use crate::par::Exec;
use crate::sim::{generate_dataset, Scenario, Trajectory};

pub const DATASET_SCHEMA: &str = "sysid-dataset/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub schema: String,
    pub scenario: Scenario,
    /// Hash of the scenario that produced the data.
    pub config_hash: String,
    pub dt: f64,
    /// Hash of the ground-truth model description.
    pub model_hash: String,
    pub seed: u64,
    pub n_trajectories: usize,
    pub model: ModelDescription,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryRecord {
    index: usize,
    contact_steps: usize,
    q: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn generate(scenario: &Scenario, n_tosses: usize, seed: u64, exec: Exec) -> Result<Self> {
        let trajectories = generate_dataset(scenario, n_tosses, seed, exec)?;
        let model = scenario.description();
        Ok(Self {
            header: DatasetHeader {
                schema: DATASET_SCHEMA.into(),
                scenario: scenario.clone(),
                config_hash: content_hash(scenario),
                dt: scenario.dt,
                model_hash: model.hash(),
                seed,
                n_trajectories: trajectories.len(),
                model,
            },
            trajectories,
        })
    }

    pub fn n_transitions(&self) -> usize {
        self.trajectories.iter().map(|t| t.states.len().saturating_sub(1)).sum()
    }

    pub fn contact_steps(&self) -> usize {
        self.trajectories.iter().map(|t| t.contact_steps).sum()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for (index, t) in self.trajectories.iter().enumerate() {
            let rec = TrajectoryRecord {
                index,
                contact_steps: t.contact_steps,
                q: t.states.iter().map(|s| s.q.to_flat()).collect(),
                v: t.states.iter().map(|s| s.v.to_flat()).collect(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Format("empty dataset file".into()))??;
        let header: DatasetHeader = serde_json::from_str(&first)?;
        if header.schema != DATASET_SCHEMA {
            return Err(Error::Format(format!("unsupported dataset schema '{}'", header.schema)));
        }
        if header.model.hash() != header.model_hash {
            return Err(Error::Format("model hash does not match embedded model".into()));
        }
        let n_joints = header.model.n_joints();
        let mut trajectories = Vec::with_capacity(header.n_trajectories);
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let rec: TrajectoryRecord = serde_json::from_str(&line)?;
            if rec.index != trajectories.len() {
                return Err(Error::Format(format!("trajectory index {} out of order", rec.index)));
            }
            if rec.q.len() != rec.v.len() || rec.q.len() < 2 {
                return Err(Error::Format(format!(
                    "trajectory {} has mismatched or short arrays",
                    rec.index
                )));
            }
            let mut states = Vec::with_capacity(rec.q.len());
            for (q, v) in rec.q.iter().zip(&rec.v) {
                if v.len() != 6 + n_joints {
                    return Err(Error::Format(format!(
                        "trajectory {}: velocity length {}",
                        rec.index,
                        v.len()
                    )));
                }
                let q = Configuration::from_flat(q)?;
                if q.joint_angles.len() != n_joints {
                    return Err(Error::Format(format!("trajectory {}: joint count mismatch", rec.index)));
                }
                states.push(State {
                    q,
                    v: Velocity::from_slice(v),
                });
            }
            trajectories.push(Trajectory {
                states,
                dt: header.dt,
                contact_steps: rec.contact_steps,
            });
        }
        if trajectories.len() != header.n_trajectories {
            return Err(Error::Format(format!(
                "header announces {} trajectories, file has {}",
                header.n_trajectories,
                trajectories.len()
            )));
        }
        Ok(Self { header, trajectories })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(fs::File::open(path)?))
    }
}

/// Consecutive state pairs of the given trajectories, in order.
pub fn transitions<'a, I>(trajectories: I) -> Result<Vec<TransitionSample>>
where
    I: IntoIterator<Item = &'a Trajectory>,
{
    let mut out = Vec::new();
    for t in trajectories {
        for w in t.states.windows(2) {
            out.push(TransitionSample::new(w[0].clone(), w[1].clone(), t.dt)?);
        }
    }
    Ok(out)
}

/// Writes `bytes` to a sibling temporary file and renames it into place, so
/// readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Invalid(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
