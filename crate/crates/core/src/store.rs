//! On-disk study layout: one JSON document per session, posterior and
//! aggregate, CSV for time series and grids. All writes are atomic.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bcm::OptimaTriple;
use crate::bo::{SearchSpace, Session};
use crate::error::{Error, Result};
use crate::fom::Responses;
use crate::gp::{GpConfig, GpPosterior};
use crate::series::SignalRole;
use crate::TimeSeries;

/// Write `bytes` to `path` through a temporary file in the same directory
/// followed by a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Aggregate of several sessions; member posteriors are stored separately
/// and referenced by file name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateBundle {
    pub id: String,
    pub session_ids: Vec<String>,
    /// Paths relative to the store root.
    pub member_posteriors: Vec<String>,
    pub search_space: SearchSpace,
    pub gp: GpConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optima: Option<OptimaTriple>,
}

/// Directory-backed store.
#[derive(Debug, Clone)]
pub struct StudyStore {
    root: PathBuf,
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && id != "."
        && id != ".."
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(format!("bad id `{id}`")))
    }
}

impl StudyStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for sub in ["sessions", "posteriors", "aggregates", "reference"] {
            std::fs::create_dir_all(root.join(sub))?;
        }
        Ok(StudyStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn session_path(&self, id: &str) -> PathBuf {
        self.root.join("sessions").join(format!("{id}.json"))
    }

    pub fn posterior_path(&self, id: &str) -> PathBuf {
        self.root.join("posteriors").join(format!("{id}.json"))
    }

    pub fn aggregate_path(&self, id: &str) -> PathBuf {
        self.root.join("aggregates").join(format!("{id}.json"))
    }

    pub fn save_session(&self, session: &Session) -> Result<()> {
        check_id(&session.id)?;
        write_atomic(&self.session_path(&session.id), session.to_json()?.as_bytes())
    }

    pub fn load_session(&self, id: &str) -> Result<Session> {
        check_id(id)?;
        read_json(&self.session_path(id))
    }

    pub fn has_session(&self, id: &str) -> bool {
        check_id(id).is_ok() && self.session_path(id).exists()
    }

    /// Ids of all stored sessions, sorted.
    pub fn list_sessions(&self) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        for entry in std::fs::read_dir(self.root.join("sessions"))? {
            let name = entry?.file_name();
            if let Some(id) = name.to_str().and_then(|n| n.strip_suffix(".json")) {
                ids.push(id.to_string());
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn save_posterior(&self, id: &str, posterior: &GpPosterior) -> Result<()> {
        check_id(id)?;
        write_json(&self.posterior_path(id), posterior)
    }

    pub fn load_posterior(&self, id: &str) -> Result<GpPosterior> {
        check_id(id)?;
        read_json(&self.posterior_path(id))
    }

    pub fn save_aggregate(&self, bundle: &AggregateBundle) -> Result<()> {
        check_id(&bundle.id)?;
        write_json(&self.aggregate_path(&bundle.id), bundle)
    }

    pub fn load_aggregate(&self, id: &str) -> Result<AggregateBundle> {
        check_id(id)?;
        read_json(&self.aggregate_path(id))
    }

    /// Member posteriors of a bundle, resolved against the store root.
    pub fn load_members(&self, bundle: &AggregateBundle) -> Result<Vec<GpPosterior>> {
        bundle
            .member_posteriors
            .iter()
            .map(|rel| read_json(&self.root.join(rel)))
            .collect()
    }

    pub fn save_reference(&self, responses: &Responses) -> Result<()> {
        responses.relaxation.save_csv(self.root.join("reference").join("relaxation.csv"))?;
        responses.creep.save_csv(self.root.join("reference").join("creep.csv"))
    }

    pub fn load_reference(&self) -> Result<Responses> {
        Ok(Responses {
            relaxation: TimeSeries::load_csv(self.root.join("reference").join("relaxation.csv"), SignalRole::Force)?,
            creep: TimeSeries::load_csv(self.root.join("reference").join("creep.csv"), SignalRole::Displacement)?,
        })
    }
}
