//! JSON Lines dataset files and content fingerprints.
//!
//! Line 1 is a header object, every following line one trajectory
//! `{"x": [[...]], "C": [...], "t": [...]}`.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Dataset, ModelSpec, Trajectory};
use crate::policy::GaussianMixturePolicy;

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub state_dim: usize,
    pub action_dim: usize,
    pub n_steps: usize,
    pub horizon: f64,
    pub dt: f64,
    pub seed: u64,
    pub spec_fingerprint: String,
}

/// Hex SHA-256 of the canonical JSON of the spec and behavioral policy.
pub fn fingerprint(spec: &ModelSpec, policy: &GaussianMixturePolicy) -> String {
    #[derive(Serialize)]
    struct Canonical<'a> {
        model: &'a ModelSpec,
        behavior_policy: &'a GaussianMixturePolicy,
    }
    let text = serde_json::to_string(&Canonical {
        model: spec,
        behavior_policy: policy,
    })
    .expect("spec serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl Dataset {
    pub fn header(&self) -> DatasetHeader {
        DatasetHeader {
            format_version: DATASET_FORMAT_VERSION,
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            n_steps: self.n_steps,
            horizon: self.horizon,
            dt: self.dt(),
            seed: self.seed,
            spec_fingerprint: self.spec_fingerprint.clone(),
        }
    }

    pub fn write_jsonl<W: Write>(&self, out: W) -> Result<()> {
        let mut w = BufWriter::new(out);
        serde_json::to_writer(&mut w, &self.header())?;
        w.write_all(b"\n")?;
        for tr in &self.trajectories {
            serde_json::to_writer(&mut w, tr)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: Read>(input: R) -> Result<Self> {
        let mut lines = BufReader::new(input).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Format("empty dataset file".into()))??;
        let header: DatasetHeader =
            serde_json::from_str(&first).map_err(|e| Error::Format(format!("dataset header: {e}")))?;
        if header.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset format_version {}",
                header.format_version
            )));
        }
        let mut trajectories = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let tr: Trajectory =
                serde_json::from_str(&line).map_err(|e| Error::Format(format!("trajectory line {}: {e}", i + 2)))?;
            trajectories.push(tr);
        }
        let ds = Dataset {
            spec_fingerprint: header.spec_fingerprint,
            seed: header.seed,
            state_dim: header.state_dim,
            action_dim: header.action_dim,
            n_steps: header.n_steps,
            horizon: header.horizon,
            trajectories,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_jsonl(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Dataset::read_jsonl(std::fs::File::open(path)?)
    }

    /// Per-coordinate `(min, max)` over every logged state.
    pub fn state_bounds(&self) -> Vec<(f64, f64)> {
        let mut bounds = vec![(f64::INFINITY, f64::NEG_INFINITY); self.state_dim];
        for tr in &self.trajectories {
            for x in &tr.states {
                for (b, v) in bounds.iter_mut().zip(x) {
                    b.0 = b.0.min(*v);
                    b.1 = b.1.max(*v);
                }
            }
        }
        bounds
    }
}
