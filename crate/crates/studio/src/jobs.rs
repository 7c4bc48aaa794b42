//! Job records and requests.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use texsynth::{BinaryMask, LabelMap};

use crate::ErrorBody;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Detect,
    Segment,
    Invert,
    Edit,
    Synth,
    Tile,
    Transfer,
}

impl JobKind {
    pub fn name(self) -> &'static str {
        match self {
            JobKind::Detect => "detect",
            JobKind::Segment => "segment",
            JobKind::Invert => "invert",
            JobKind::Edit => "edit",
            JobKind::Synth => "synth",
            JobKind::Tile => "tile",
            JobKind::Transfer => "transfer",
        }
    }
}

/// Ordered: a job only ever moves to a later state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_finished(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub project: String,
    pub kind: JobKind,
    pub state: JobState,
    /// Fraction of work done, in `[0, 1]`; never decreases.
    pub progress: f64,
    /// Seed the job ran with, whether given or generated.
    pub seed: u64,
    pub created_unix_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_unix_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

impl Job {
    pub(crate) fn new(id: String, project: String, kind: JobKind, seed: u64) -> Self {
        Self {
            id,
            project,
            kind,
            state: JobState::Queued,
            progress: 0.0,
            seed,
            created_unix_ms: crate::project::now_ms(),
            finished_unix_ms: None,
            result: None,
            error: None,
        }
    }

    pub(crate) fn advance(&mut self, state: JobState) {
        if state > self.state && !self.state.is_finished() {
            self.state = state;
            if state.is_finished() {
                self.finished_unix_ms = Some(crate::project::now_ms());
            }
        }
    }

    pub(crate) fn report(&mut self, progress: f64) {
        if progress.is_finite() && self.state == JobState::Running {
            self.progress = self.progress.max(progress.clamp(0.0, 1.0));
        }
    }

    pub(crate) fn finish(&mut self, outcome: Result<Value, ErrorBody>) {
        if self.state.is_finished() {
            return;
        }
        match outcome {
            Ok(v) => {
                self.progress = 1.0;
                self.result = Some(v);
                self.advance(JobState::Done);
            }
            Err(e) => {
                self.error = Some(e);
                self.advance(JobState::Failed);
            }
        }
    }
}

/// What a job should do.
#[derive(Clone, Debug)]
pub enum JobSpec {
    Detect,
    Segment,
    /// Inverts the image's current texture and stores the trajectory.
    Invert {
        image: String,
    },
    /// Localized edit replaying the stored trajectory.
    Edit {
        image: String,
        labels: LabelMap,
        mask: BinaryMask,
        steps: Option<usize>,
    },
    /// New image conditioned on `labels` (all background when absent).
    Synth {
        height: usize,
        width: usize,
        labels: Option<LabelMap>,
        tileable: bool,
        name: Option<String>,
    },
    /// Inverts `image` and regenerates it under `labels`, as a new image.
    Transfer {
        image: String,
        labels: LabelMap,
        mask: Option<BinaryMask>,
        name: Option<String>,
    },
}

impl JobSpec {
    pub fn kind(&self) -> JobKind {
        match self {
            JobSpec::Detect => JobKind::Detect,
            JobSpec::Segment => JobKind::Segment,
            JobSpec::Invert { .. } => JobKind::Invert,
            JobSpec::Edit { .. } => JobKind::Edit,
            JobSpec::Synth {
                tileable: false, ..
            } => JobKind::Synth,
            JobSpec::Synth { tileable: true, .. } => JobKind::Tile,
            JobSpec::Transfer { .. } => JobKind::Transfer,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn err() -> ErrorBody {
        ErrorBody {
            code: "internal".into(),
            message: "x".into(),
            missing_prerequisite: None,
        }
    }

    #[test]
    fn states_only_move_forward() {
        let mut j = Job::new("j".into(), "p".into(), JobKind::Detect, 1);
        j.advance(JobState::Running);
        j.advance(JobState::Queued);
        assert_eq!(j.state, JobState::Running);
        j.finish(Err(err()));
        j.finish(Ok(Value::Null));
        assert_eq!(j.state, JobState::Failed);
        assert!(j.result.is_none());
    }

    #[test]
    fn progress_never_decreases() {
        let mut j = Job::new("j".into(), "p".into(), JobKind::Synth, 1);
        j.report(0.5);
        assert_eq!(j.progress, 0.0, "queued jobs report nothing");
        j.advance(JobState::Running);
        for p in [0.2, 0.6, 0.4, f64::NAN, 2.0] {
            let before = j.progress;
            j.report(p);
            assert!(j.progress >= before);
        }
        assert_eq!(j.progress, 1.0);
    }
}
