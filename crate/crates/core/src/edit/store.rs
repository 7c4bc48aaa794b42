//! On-disk trajectories: `{root}/{image_id}/meta` (JSON), `eps_{k}.txf1` and
//! `z_N.txf1`. Directions are stored as f32.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EditError, Provenance, Result, Trajectory};
use crate::diffusion::SigmaSchedule;
use crate::grid::{decode_txf1, encode_txf1};

pub const STORE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    version: u32,
    schedule: SigmaSchedule,
    provenance: Provenance,
    height: usize,
    width: usize,
    channels: usize,
}

#[derive(Clone, Debug)]
pub struct TrajectoryStore {
    root: PathBuf,
}

impl TrajectoryStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, id: &str) -> Result<PathBuf> {
        let ok = !id.is_empty()
            && !id.starts_with('.')
            && id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
        if !ok {
            return Err(EditError::Store(format!("invalid image id `{id}`")));
        }
        Ok(self.root.join(id))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.dir(id)
            .map(|d| d.join("meta").is_file())
            .unwrap_or(false)
    }

    /// Writes into a staging directory and renames it into place, so readers
    /// see either the old trajectory or the complete new one.
    pub fn save(&self, id: &str, traj: &Trajectory) -> Result<()> {
        let dest = self.dir(id)?;
        let nonce = std::process::id() as u64
            ^ std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_nanos() as u64)
                .unwrap_or(0);
        let staging = self.root.join(format!(".staging-{id}-{nonce:x}"));
        fs::create_dir_all(&staging)?;
        let meta = Meta {
            version: STORE_VERSION,
            schedule: traj.schedule.clone(),
            provenance: traj.provenance,
            height: traj.z_n.height(),
            width: traj.z_n.width(),
            channels: traj.z_n.channels(),
        };
        let write = || -> Result<()> {
            for (k, e) in traj.eps_history.iter().enumerate() {
                fs::write(staging.join(format!("eps_{k}.txf1")), encode_txf1(e))?;
            }
            fs::write(staging.join("z_N.txf1"), encode_txf1(&traj.z_n))?;
            let json =
                serde_json::to_vec_pretty(&meta).map_err(|e| EditError::Store(e.to_string()))?;
            fs::write(staging.join("meta"), json)?;
            Ok(())
        };
        if let Err(e) = write() {
            let _ = fs::remove_dir_all(&staging);
            return Err(e);
        }
        if dest.exists() {
            let trash = self.root.join(format!(".trash-{id}-{nonce:x}"));
            fs::rename(&dest, &trash)?;
            fs::rename(&staging, &dest)?;
            let _ = fs::remove_dir_all(trash);
        } else {
            fs::rename(&staging, &dest)?;
        }
        Ok(())
    }

    pub fn load(&self, id: &str) -> Result<Trajectory> {
        let dir = self.dir(id)?;
        let meta_bytes = match fs::read(dir.join("meta")) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(EditError::NoTrajectory(id.to_string()))
            }
            Err(e) => return Err(e.into()),
        };
        let meta: Meta = serde_json::from_slice(&meta_bytes)
            .map_err(|e| EditError::Store(format!("bad meta for `{id}`: {e}")))?;
        if meta.version != STORE_VERSION {
            return Err(EditError::Store(format!(
                "trajectory `{id}` has version {}, expected {STORE_VERSION}",
                meta.version
            )));
        }
        meta.schedule.validate()?;
        let read = |name: String| -> Result<crate::grid::Grid> {
            let bytes = fs::read(dir.join(&name))?;
            let (g, _) = decode_txf1(&bytes)?;
            if g.shape() != (meta.height, meta.width, meta.channels) {
                return Err(EditError::Store(format!(
                    "{name} of `{id}` has shape {:?}",
                    g.shape()
                )));
            }
            Ok(g)
        };
        let eps = (0..meta.schedule.steps())
            .map(|k| read(format!("eps_{k}.txf1")))
            .collect::<Result<Vec<_>>>()?;
        let z_n = read("z_N.txf1".into())?;
        Trajectory::new(meta.schedule, eps, z_n, meta.provenance)
    }

    pub fn remove(&self, id: &str) -> Result<()> {
        let dir = self.dir(id)?;
        match fs::remove_dir_all(dir) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e.into()),
            _ => Ok(()),
        }
    }
}
