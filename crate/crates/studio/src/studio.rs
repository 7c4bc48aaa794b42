use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Arc, Condvar, Mutex, MutexGuard, RwLock, Weak};
use std::time::{Duration, Instant};

use serde::Serialize;
use serde_json::Value;
use texsynth::edit::Trajectory;
use texsynth::Grid;

use crate::config::StudioConfig;
use crate::jobs::{Job, JobKind, JobSpec, JobState};
use crate::project::{validate_id, ArtifactKind, ImageEntry, Project, ProjectIndex, INDEX_FILE};
use crate::stages;
use crate::{ErrorBody, Result, StudioError};

/// A project as reported to clients: the index plus the jobs in flight.
#[derive(Clone, Debug, Serialize)]
pub struct ProjectView {
    #[serde(flatten)]
    pub index: ProjectIndex,
    pub active_jobs: BTreeMap<JobKind, String>,
}

/// Every open project, each with one worker thread that runs its jobs in
/// submission order. Cheap to clone.
#[derive(Clone)]
pub struct Studio {
    shared: Arc<Shared>,
}

struct Shared {
    root: Option<PathBuf>,
    overrides: Vec<String>,
    state: Mutex<State>,
    changed: Condvar,
}

#[derive(Default)]
struct State {
    projects: BTreeMap<String, Slot>,
    jobs: HashMap<String, Job>,
    next_job: u64,
}

struct Slot {
    project: Arc<RwLock<Project>>,
    queue: mpsc::Sender<Queued>,
    active: BTreeMap<JobKind, String>,
}

struct Queued {
    job: String,
    seed: u64,
    spec: JobSpec,
}

impl Studio {
    /// A studio over every project directory below `root`, created if missing.
    /// `overrides` are `key=value` settings applied on top of each project's config.
    pub fn open_root(root: impl Into<PathBuf>, overrides: &[String]) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| StudioError::io(&root, e))?;
        let studio = Self::with(Some(root.clone()), overrides);
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(&root)
            .map_err(|e| StudioError::io(&root, e))?
            .flatten()
            .map(|e| e.path())
            .filter(|p| p.join(INDEX_FILE).is_file())
            .collect();
        dirs.sort();
        for d in dirs {
            studio.register(Project::open(&d)?)?;
        }
        Ok(studio)
    }

    /// A studio holding the single project stored in `dir`. `base`, when
    /// given, replaces the stored configuration for this session.
    pub fn open_project(
        dir: impl AsRef<Path>,
        base: Option<StudioConfig>,
        overrides: &[String],
    ) -> Result<Self> {
        let studio = Self::with(None, overrides);
        let mut project = Project::open(dir.as_ref())?;
        if let Some(cfg) = base {
            project.set_session_config(cfg)?;
        }
        studio.register(project)?;
        Ok(studio)
    }

    fn with(root: Option<PathBuf>, overrides: &[String]) -> Self {
        Self {
            shared: Arc::new(Shared {
                root,
                overrides: overrides.to_vec(),
                state: Mutex::new(State::default()),
                changed: Condvar::new(),
            }),
        }
    }

    fn register(&self, mut project: Project) -> Result<String> {
        let cfg = project.config().with_overrides(&self.shared.overrides)?;
        project.set_session_config(cfg)?;
        let id = project.id().to_string();
        let mut state = self.shared.lock();
        if state.projects.contains_key(&id) {
            return Err(StudioError::Conflict(format!(
                "project {id:?} is already open"
            )));
        }
        let project = Arc::new(RwLock::new(project));
        let (tx, rx) = mpsc::channel();
        let weak = Arc::downgrade(&self.shared);
        let handle = project.clone();
        std::thread::Builder::new()
            .name(format!("jobs-{id}"))
            .spawn(move || worker(weak, handle, rx))
            .map_err(|e| StudioError::io("worker thread", e))?;
        state.projects.insert(
            id.clone(),
            Slot {
                project,
                queue: tx,
                active: BTreeMap::new(),
            },
        );
        Ok(id)
    }

    /// Creates `root/<id>` with `config` (TOML; defaults when absent).
    pub fn create_project(&self, id: &str, config: Option<&str>) -> Result<ProjectView> {
        validate_id("project", id)?;
        let root =
            self.shared.root.as_ref().ok_or_else(|| {
                StudioError::Invalid("this studio serves a single project".into())
            })?;
        if self.shared.lock().projects.contains_key(id) {
            return Err(StudioError::Conflict(format!(
                "project {id:?} already exists"
            )));
        }
        let config = match config {
            Some(text) => StudioConfig::from_toml(text)?,
            None => StudioConfig::default(),
        };
        let project = Project::create(root.join(id), id, config)?;
        self.register(project)?;
        self.project(id)
    }

    pub fn project_ids(&self) -> Vec<String> {
        self.shared.lock().projects.keys().cloned().collect()
    }

    fn slot_project(&self, id: &str) -> Result<Arc<RwLock<Project>>> {
        let state = self.shared.lock();
        let slot = state
            .projects
            .get(id)
            .ok_or_else(|| StudioError::not_found("project", id))?;
        Ok(slot.project.clone())
    }

    /// Runs `f` with shared access to the project.
    pub fn with_project<R>(&self, id: &str, f: impl FnOnce(&Project) -> Result<R>) -> Result<R> {
        let project = self.slot_project(id)?;
        let guard = project.read().unwrap_or_else(|e| e.into_inner());
        f(&guard)
    }

    pub fn project(&self, id: &str) -> Result<ProjectView> {
        let state = self.shared.lock();
        let slot = state
            .projects
            .get(id)
            .ok_or_else(|| StudioError::not_found("project", id))?;
        let index = slot
            .project
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .index()
            .clone();
        Ok(ProjectView {
            index,
            active_jobs: slot.active.clone(),
        })
    }

    /// Adds a source image. Refused while the project has jobs in flight.
    pub fn add_image(&self, project: &str, image: &str, texture: &Grid) -> Result<ImageEntry> {
        let state = self.shared.lock();
        let slot = state
            .projects
            .get(project)
            .ok_or_else(|| StudioError::not_found("project", project))?;
        if let Some((kind, job)) = slot.active.iter().next() {
            return Err(StudioError::Conflict(format!(
                "cannot add images while {} job {job} is in flight",
                kind.name()
            )));
        }
        let mut p = slot.project.write().unwrap_or_else(|e| e.into_inner());
        p.add_image(image, texture)?;
        Ok(p.index().images[image].clone())
    }

    /// Validates `spec` against the project and queues it. At most one job of
    /// each kind may be queued or running per project. A detect request on a
    /// project without images yields a job that has already failed.
    pub fn submit(&self, project: &str, spec: JobSpec, seed: Option<u64>) -> Result<Job> {
        let kind = spec.kind();
        let mut guard = self.shared.lock();
        let state = &mut *guard;
        let slot = state
            .projects
            .get_mut(project)
            .ok_or_else(|| StudioError::not_found("project", project))?;
        if let Some(job) = slot.active.get(&kind) {
            return Err(StudioError::Conflict(format!(
                "a {} job ({job}) is already queued or running",
                kind.name()
            )));
        }
        let no_inputs = {
            let p = slot.project.read().unwrap_or_else(|e| e.into_inner());
            stages::check(&p, &spec)?;
            matches!(spec, JobSpec::Detect) && p.index().sources().is_empty()
        };
        state.next_job += 1;
        let serial = state.next_job;
        let id = format!("job-{serial}");
        let seed = seed.unwrap_or_else(|| fresh_seed(serial));
        let mut job = Job::new(id.clone(), project.to_string(), kind, seed);
        if no_inputs {
            job.finish(Err(StudioError::Invalid(
                "no inputs: the project has no source images".into(),
            )
            .body()));
        } else {
            slot.active.insert(kind, id.clone());
            slot.queue
                .send(Queued {
                    job: id.clone(),
                    seed,
                    spec,
                })
                .map_err(|_| {
                    StudioError::Corrupt(format!("worker of project {project:?} has stopped"))
                })?;
        }
        state.jobs.insert(id, job.clone());
        Ok(job)
    }

    pub fn job(&self, id: &str) -> Result<Job> {
        self.shared
            .lock()
            .jobs
            .get(id)
            .cloned()
            .ok_or_else(|| StudioError::not_found("job", id))
    }

    /// Blocks until the job finishes or `timeout` passes, returning its latest state.
    pub fn wait(&self, id: &str, timeout: Option<Duration>) -> Result<Job> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut state = self.shared.lock();
        loop {
            let job = state
                .jobs
                .get(id)
                .ok_or_else(|| StudioError::not_found("job", id))?;
            if job.state.is_finished() {
                return Ok(job.clone());
            }
            let wait = match deadline {
                Some(d) => match d.checked_duration_since(Instant::now()) {
                    Some(left) => left,
                    None => return Ok(job.clone()),
                },
                None => Duration::from_secs(3600),
            };
            state = self
                .shared
                .changed
                .wait_timeout(state, wait)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    pub fn artifact_png(&self, project: &str, image: &str, kind: ArtifactKind) -> Result<Vec<u8>> {
        self.with_project(project, |p| p.artifact_png(image, kind))
    }

    pub fn texture(&self, project: &str, image: &str) -> Result<Grid> {
        self.with_project(project, |p| p.texture(image))
    }
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn update(&self, job: &str, f: impl FnOnce(&mut Job)) {
        if let Some(j) = self.lock().jobs.get_mut(job) {
            f(j);
        }
        self.changed.notify_all();
    }

    fn finish(&self, project: &str, job: &str, outcome: std::result::Result<Value, ErrorBody>) {
        let mut state = self.lock();
        if let Some(slot) = state.projects.get_mut(project) {
            slot.active.retain(|_, j| j != job);
        }
        if let Some(j) = state.jobs.get_mut(job) {
            j.finish(outcome);
        }
        drop(state);
        self.changed.notify_all();
    }
}

fn worker(shared: Weak<Shared>, project: Arc<RwLock<Project>>, queue: mpsc::Receiver<Queued>) {
    let mut cache = preload(&project);
    let id = project
        .read()
        .unwrap_or_else(|e| e.into_inner())
        .id()
        .to_string();
    for q in queue {
        let Some(shared) = shared.upgrade() else {
            break;
        };
        shared.update(&q.job, |j| j.advance(JobState::Running));
        let outcome = catch_unwind(AssertUnwindSafe(|| {
            run_job(&shared, &project, &mut cache, q.seed, &q.job, q.spec)
        }))
        .unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "job panicked".into());
            Err(StudioError::Corrupt(msg))
        });
        shared.finish(&id, &q.job, outcome.map_err(|e| e.body()));
    }
}

/// Stored trajectories are loaded once so edits start without disk reads.
fn preload(project: &RwLock<Project>) -> HashMap<String, Arc<Trajectory>> {
    let p = project.read().unwrap_or_else(|e| e.into_inner());
    p.index()
        .images
        .iter()
        .filter(|(_, e)| e.trajectory.is_some())
        .filter_map(|(id, _)| p.trajectory(id).ok().map(|t| (id.clone(), Arc::new(t))))
        .collect()
}

fn run_job(
    shared: &Shared,
    project: &RwLock<Project>,
    cache: &mut HashMap<String, Arc<Trajectory>>,
    seed: u64,
    job: &str,
    spec: JobSpec,
) -> Result<Value> {
    let work = {
        let p = project.read().unwrap_or_else(|e| e.into_inner());
        stages::prepare(&p, spec, cache)?
    };
    let mut progress = |f: f64| shared.update(job, |j| j.report(f));
    let (commit, result) = work.run(seed, &mut progress)?;
    let fresh: Vec<(String, Arc<Trajectory>)> = commit
        .trajectories
        .iter()
        .map(|(id, t)| (id.clone(), Arc::new(t.clone())))
        .collect();
    project
        .write()
        .unwrap_or_else(|e| e.into_inner())
        .commit(commit)?;
    cache.extend(fresh);
    Ok(result)
}

fn fresh_seed(serial: u64) -> u64 {
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0);
    let mut z = nanos ^ serial.rotate_left(32) ^ 0x9e37_79b9_7f4a_7c15;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
