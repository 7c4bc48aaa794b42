use std::time::Duration;

use texsynth::diffusion::{BridgeDenoiser, Denoiser, ExemplarPatch, GaussianAnalytic};
use texsynth::{Grid, LabelMap};

use crate::config::DenoiserBinding;
use crate::project::{Project, Stage};
use crate::{Result, StudioError};

/// Exemplar pairs from the project's source images, labelled by the segment
/// stage when it has run and all background otherwise.
pub(crate) fn exemplars(project: &Project) -> Result<Vec<(Grid, LabelMap)>> {
    let sources = project.index().sources();
    if sources.is_empty() {
        return Err(StudioError::missing(
            "images",
            "the exemplar denoiser needs source images; add images first",
        ));
    }
    let segmented = project.index().stages.contains_key(&Stage::Segment);
    let classes = project.config().segment.classes as u8;
    sources
        .iter()
        .map(|id| {
            let img = project.texture(id)?;
            let labels = if segmented {
                project.labels(id)?
            } else {
                LabelMap::uniform(img.height(), img.width(), classes, 0)?
            };
            Ok((img, labels))
        })
        .collect()
}

pub(crate) enum Source {
    Analytic {
        mean: Vec<f64>,
        std: f64,
    },
    Exemplar(Vec<(Grid, LabelMap)>, texsynth::diffusion::ExemplarConfig),
    Bridge {
        endpoint: String,
        connections: usize,
        timeout: Duration,
    },
}

impl Source {
    /// Captures what building the denoiser needs while the project is locked.
    pub(crate) fn capture(project: &Project) -> Result<Self> {
        Ok(match &project.config().denoiser {
            DenoiserBinding::Analytic { mean, std } => Source::Analytic {
                mean: mean.clone(),
                std: *std,
            },
            DenoiserBinding::Exemplar { config } => Source::Exemplar(exemplars(project)?, *config),
            DenoiserBinding::Bridge {
                endpoint,
                connections,
                timeout_secs,
            } => Source::Bridge {
                endpoint: endpoint.clone(),
                connections: *connections,
                timeout: Duration::from_secs(*timeout_secs),
            },
        })
    }

    pub(crate) fn build(self, channels: usize) -> Result<Box<dyn Denoiser>> {
        Ok(match self {
            Source::Analytic { mean, std } => {
                let mean = match mean.len() {
                    n if n == channels => mean,
                    1 => vec![mean[0]; channels],
                    n => {
                        return Err(StudioError::Config(format!(
                            "analytic denoiser mean has {n} entries for {channels}-channel images"
                        )))
                    }
                };
                Box::new(GaussianAnalytic::new(mean, std))
            }
            Source::Exemplar(pairs, cfg) => Box::new(ExemplarPatch::new(&pairs, cfg)?),
            Source::Bridge {
                endpoint,
                connections,
                timeout,
            } => Box::new(
                BridgeDenoiser::connect_tcp(endpoint.as_str(), connections, timeout).map_err(
                    |e| StudioError::Pipeline(texsynth::diffusion::DiffusionError::from(e).into()),
                )?,
            ),
        })
    }

    pub(crate) fn channels(&self) -> Option<usize> {
        match self {
            Source::Exemplar(pairs, _) => pairs.first().map(|p| p.0.channels()),
            _ => None,
        }
    }
}
