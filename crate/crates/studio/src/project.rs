//! One project directory: the index, its artifacts and stored trajectories.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use texsynth::edit::{Provenance, Trajectory, TrajectoryStore};
use texsynth::grid::{
    decode_label_png, decode_png8, decode_txf1, encode_label_png, encode_png8, encode_txf1,
};
use texsynth::{BinaryMask, Grid, LabelMap};

use crate::config::StudioConfig;
use crate::{Result, StudioError};

pub const INDEX_FILE: &str = "project.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const TRAJECTORY_DIR: &str = "trajectories";
pub const SCHEMA_VERSION: u32 = 1;
const STAGING_PREFIX: &str = ".staging-";
const GEN_PREFIX: &str = "gen-";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Detect,
    Segment,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Detect => "detect",
            Stage::Segment => "segment",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    /// Added by the user; the inputs of detect and segment.
    Source,
    Synthesized,
    Transferred,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryInfo {
    pub steps: usize,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub origin: Origin,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Path of the current TXF1 texture, relative to the project directory.
    pub texture: String,
    /// Incremented whenever the texture is replaced.
    pub revision: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<TrajectoryInfo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub seed: u64,
    /// Generation directory holding the per-image artifacts.
    pub dir: String,
    /// Source images the stage ran on, in order.
    pub images: Vec<String>,
    pub finished_unix_ms: u64,
    #[serde(default)]
    pub summary: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectIndex {
    pub schema_version: u32,
    pub id: String,
    pub images: BTreeMap<String, ImageEntry>,
    pub stages: BTreeMap<Stage, StageRecord>,
    /// Cached noise prototype for large synthesis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prototype: Option<String>,
    pub next_generation: u64,
}

impl ProjectIndex {
    fn new(id: &str) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            id: id.to_string(),
            images: BTreeMap::new(),
            stages: BTreeMap::new(),
            prototype: None,
            next_generation: 1,
        }
    }

    /// Source images in id order.
    pub fn sources(&self) -> Vec<String> {
        self.images
            .iter()
            .filter(|(_, e)| e.origin == Origin::Source)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn image(&self, id: &str) -> Result<&ImageEntry> {
        self.images
            .get(id)
            .ok_or_else(|| StudioError::not_found("image", id))
    }

    /// Drops every stage that depends on `stage`, and `stage` itself.
    pub fn invalidate_from(&mut self, stage: Stage) {
        self.stages.retain(|s, _| *s < stage);
    }

    fn referenced(&self) -> (BTreeSet<String>, BTreeSet<String>) {
        let mut files: BTreeSet<String> = self.images.values().map(|e| e.texture.clone()).collect();
        files.extend(self.prototype.clone());
        let dirs = self.stages.values().map(|r| r.dir.clone()).collect();
        (files, dirs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Texture,
    Scores,
    Mask,
    Labels,
}

impl std::str::FromStr for ArtifactKind {
    type Err = StudioError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "texture" => ArtifactKind::Texture,
            "scores" => ArtifactKind::Scores,
            "mask" => ArtifactKind::Mask,
            "labels" => ArtifactKind::Labels,
            other => return Err(StudioError::not_found("artifact kind", other)),
        })
    }
}

pub fn validate_id(what: &str, id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id.len() <= 64
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(StudioError::Invalid(format!(
            "{what} id {id:?} must be 1 to 64 characters of [A-Za-z0-9._-] not starting with '.'"
        )))
    }
}

pub(crate) fn scores_name(image: &str) -> String {
    format!("{image}.scores.txf1")
}

pub(crate) fn mask_name(image: &str) -> String {
    format!("{image}.mask.png")
}

pub(crate) fn labels_name(image: &str) -> String {
    format!("{image}.labels.png")
}

fn scores_file(dir: &str, image: &str) -> String {
    format!("{dir}/{}", scores_name(image))
}

fn mask_file(dir: &str, image: &str) -> String {
    format!("{dir}/{}", mask_name(image))
}

fn labels_file(dir: &str, image: &str) -> String {
    format!("{dir}/{}", labels_name(image))
}

pub(crate) fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

pub(crate) type IndexUpdate = Box<dyn FnOnce(&mut ProjectIndex, &str) -> Result<()> + Send>;

/// Files and index changes produced by one job, applied by [`Project::commit`].
pub(crate) struct Commit {
    /// Names relative to the new generation directory.
    pub files: Vec<(String, Vec<u8>)>,
    pub trajectories: Vec<(String, Trajectory)>,
    /// Receives the index and the generation directory name.
    pub update: IndexUpdate,
}

#[derive(Debug)]
pub struct Project {
    dir: PathBuf,
    index: ProjectIndex,
    config: StudioConfig,
    store: TrajectoryStore,
}

impl Project {
    pub fn create(dir: impl Into<PathBuf>, id: &str, config: StudioConfig) -> Result<Self> {
        validate_id("project", id)?;
        config.validate()?;
        let dir = dir.into();
        if dir.join(INDEX_FILE).exists() {
            return Err(StudioError::Conflict(format!(
                "a project already exists in {}",
                dir.display()
            )));
        }
        fs::create_dir_all(&dir).map_err(|e| StudioError::io(&dir, e))?;
        write_atomic(&dir.join(CONFIG_FILE), config.to_toml().as_bytes())?;
        let index = ProjectIndex::new(id);
        write_index(&dir, &index)?;
        let store = TrajectoryStore::open(dir.join(TRAJECTORY_DIR))?;
        Ok(Self {
            dir,
            index,
            config,
            store,
        })
    }

    /// Opens an existing project and removes whatever an interrupted job left behind.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        let path = dir.join(INDEX_FILE);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(StudioError::not_found("project", dir.display().to_string()))
            }
            Err(e) => return Err(StudioError::io(&path, e)),
        };
        let index: ProjectIndex = serde_json::from_slice(&bytes)
            .map_err(|e| StudioError::Corrupt(format!("{}: {e}", path.display())))?;
        if index.schema_version != SCHEMA_VERSION {
            return Err(StudioError::Corrupt(format!(
                "schema version {} (expected {SCHEMA_VERSION})",
                index.schema_version
            )));
        }
        let config = StudioConfig::load(&dir.join(CONFIG_FILE))?;
        let store = TrajectoryStore::open(dir.join(TRAJECTORY_DIR))?;
        let project = Self {
            dir,
            index,
            config,
            store,
        };
        project.collect_garbage()?;
        Ok(project)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn id(&self) -> &str {
        &self.index.id
    }

    pub fn index(&self) -> &ProjectIndex {
        &self.index
    }

    pub fn config(&self) -> &StudioConfig {
        &self.config
    }

    /// Replaces the configuration for this session without touching `config.toml`.
    pub fn set_session_config(&mut self, config: StudioConfig) -> Result<()> {
        config.validate()?;
        self.config = config;
        Ok(())
    }

    fn read(&self, rel: &str) -> Result<Vec<u8>> {
        let path = self.dir.join(rel);
        fs::read(&path).map_err(|e| StudioError::io(&path, e))
    }

    fn decode_grid(&self, rel: &str) -> Result<Grid> {
        Ok(decode_txf1(&self.read(rel)?)?.0)
    }

    pub fn texture(&self, image: &str) -> Result<Grid> {
        let entry = self.index.image(image)?;
        self.decode_grid(&entry.texture)
    }

    fn stage(&self, stage: Stage, image: &str) -> Result<&StageRecord> {
        self.index.image(image)?;
        let record = self.index.stages.get(&stage).ok_or_else(|| {
            StudioError::missing(
                stage.name(),
                format!(
                    "stage {} has not run; run {} first",
                    stage.name(),
                    stage.name()
                ),
            )
        })?;
        if !record.images.iter().any(|i| i == image) {
            return Err(StudioError::not_found(
                match stage {
                    Stage::Detect => "detect output for image",
                    Stage::Segment => "segment output for image",
                },
                image,
            ));
        }
        Ok(record)
    }

    pub fn scores(&self, image: &str) -> Result<Grid> {
        let r = self.stage(Stage::Detect, image)?;
        self.decode_grid(&scores_file(&r.dir, image))
    }

    pub fn mask(&self, image: &str) -> Result<BinaryMask> {
        let r = self.stage(Stage::Detect, image)?;
        let g = decode_png8(&self.read(&mask_file(&r.dir, image))?)?;
        Ok(BinaryMask::from_grid_above(&g.channel(0), 0.5))
    }

    pub fn labels(&self, image: &str) -> Result<LabelMap> {
        let r = self.stage(Stage::Segment, image)?;
        let labels = decode_label_png(&self.read(&labels_file(&r.dir, image))?)?;
        let classes = self.config.segment.classes as u8;
        Ok(if labels.num_classes() <= classes {
            labels.with_num_classes(classes)?
        } else {
            labels
        })
    }

    pub fn prototype(&self) -> Result<Option<Grid>> {
        self.index
            .prototype
            .as_deref()
            .map(|p| self.decode_grid(p))
            .transpose()
    }

    /// PNG rendering of an artifact. Score maps are scaled so the largest score is white.
    pub fn artifact_png(&self, image: &str, kind: ArtifactKind) -> Result<Vec<u8>> {
        Ok(match kind {
            ArtifactKind::Texture => encode_png8(&self.texture(image)?)?,
            ArtifactKind::Scores => {
                let s = self.scores(image)?;
                let (_, hi) = s.min_max();
                let scale = if hi > 0.0 { 1.0 / hi } else { 0.0 };
                encode_png8(&s.map(|v| v * scale))?
            }
            ArtifactKind::Mask => {
                let r = self.stage(Stage::Detect, image)?;
                self.read(&mask_file(&r.dir, image))?
            }
            ArtifactKind::Labels => {
                let r = self.stage(Stage::Segment, image)?;
                self.read(&labels_file(&r.dir, image))?
            }
        })
    }

    pub fn trajectory(&self, image: &str) -> Result<Trajectory> {
        Ok(self.store.load(image)?)
    }

    /// Adds a source image. Detection and segmentation no longer describe the
    /// image set, so both are invalidated.
    pub fn add_image(&mut self, image: &str, texture: &Grid) -> Result<()> {
        validate_id("image", image)?;
        if self.index.images.contains_key(image) {
            return Err(StudioError::Conflict(format!(
                "image {image:?} already exists"
            )));
        }
        texture.check_finite()?;
        let id = image.to_string();
        let (h, w, c) = texture.shape();
        self.commit(Commit {
            files: vec![(format!("{id}.txf1"), encode_txf1(texture))],
            trajectories: Vec::new(),
            update: Box::new(move |index, gen| {
                index.images.insert(
                    id.clone(),
                    ImageEntry {
                        origin: Origin::Source,
                        height: h,
                        width: w,
                        channels: c,
                        texture: format!("{gen}/{id}.txf1"),
                        revision: 0,
                        trajectory: None,
                    },
                );
                index.invalidate_from(Stage::Detect);
                Ok(())
            }),
        })
    }

    /// Writes the files into a staging directory, renames it to a new
    /// generation, stores trajectories, then swaps in the updated index.
    /// Files no longer referenced are deleted afterwards.
    pub(crate) fn commit(&mut self, commit: Commit) -> Result<()> {
        let serial = self.index.next_generation;
        let gen = format!("{GEN_PREFIX}{serial}");
        let mut index = self.index.clone();
        index.next_generation += 1;
        (commit.update)(&mut index, &gen)?;

        if !commit.files.is_empty() {
            let staging = self.dir.join(format!("{STAGING_PREFIX}{serial}"));
            let _ = fs::remove_dir_all(&staging);
            fs::create_dir_all(&staging).map_err(|e| StudioError::io(&staging, e))?;
            for (name, bytes) in &commit.files {
                let path = staging.join(name);
                fs::write(&path, bytes).map_err(|e| StudioError::io(&path, e))?;
            }
            sync_dir(&staging);
            let target = self.dir.join(&gen);
            // An uncommitted generation with this serial can only be debris.
            let _ = fs::remove_dir_all(&target);
            fs::rename(&staging, &target).map_err(|e| StudioError::io(&target, e))?;
        }
        for (image, traj) in &commit.trajectories {
            self.store.save(image, traj)?;
        }
        write_index(&self.dir, &index)?;
        self.index = index;
        self.collect_garbage()
    }

    /// Deletes staging leftovers, unreferenced generation files and
    /// trajectories the index does not list.
    fn collect_garbage(&self) -> Result<()> {
        let (files, dirs) = self.index.referenced();
        let entries = fs::read_dir(&self.dir).map_err(|e| StudioError::io(&self.dir, e))?;
        for entry in entries.flatten() {
            let name = entry.file_name().to_string_lossy().into_owned();
            let path = entry.path();
            if name.starts_with(STAGING_PREFIX) || name.ends_with(".tmp") {
                remove_any(&path);
            } else if name.starts_with(GEN_PREFIX) && path.is_dir() && !dirs.contains(&name) {
                let mut kept = 0;
                for f in fs::read_dir(&path)
                    .map_err(|e| StudioError::io(&path, e))?
                    .flatten()
                {
                    let rel = format!("{name}/{}", f.file_name().to_string_lossy());
                    if files.contains(&rel) {
                        kept += 1;
                    } else {
                        remove_any(&f.path());
                    }
                }
                if kept == 0 {
                    let _ = fs::remove_dir(&path);
                }
            }
        }
        let tdir = self.store.root();
        if let Ok(entries) = fs::read_dir(tdir) {
            for entry in entries.flatten() {
                let name = entry.file_name().to_string_lossy().into_owned();
                let listed = self
                    .index
                    .images
                    .get(&name)
                    .is_some_and(|e| e.trajectory.is_some());
                if !listed {
                    remove_any(&entry.path());
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn decode_image(bytes: &[u8]) -> Result<Grid> {
    if bytes.starts_with(texsynth::grid::TXF1_MAGIC) {
        let (g, used) = decode_txf1(bytes)?;
        if used != bytes.len() {
            return Err(StudioError::Invalid(
                "trailing bytes after TXF1 payload".into(),
            ));
        }
        Ok(g)
    } else {
        Ok(decode_png8(bytes)?)
    }
}

pub(crate) fn label_png(labels: &LabelMap) -> Result<Vec<u8>> {
    Ok(encode_label_png(labels)?)
}

fn remove_any(path: &Path) {
    let _ = if path.is_dir() {
        fs::remove_dir_all(path)
    } else {
        fs::remove_file(path)
    };
}

fn sync_dir(path: &Path) {
    if let Ok(d) = fs::File::open(path) {
        let _ = d.sync_all();
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        StudioError::io(path, e)
    })?;
    if let Some(parent) = path.parent() {
        sync_dir(parent);
    }
    Ok(())
}

fn write_index(dir: &Path, index: &ProjectIndex) -> Result<()> {
    let json = serde_json::to_vec_pretty(index).expect("index serializes");
    write_atomic(&dir.join(INDEX_FILE), &json)
}
