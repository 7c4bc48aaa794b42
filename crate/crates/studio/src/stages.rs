//! Stage runners. [`prepare`] copies inputs out of the locked project,
//! [`Work::run`] computes without the lock and returns a [`Commit`].

use std::collections::HashMap;
use std::sync::Arc;

use serde_json::{json, Value};
use texsynth::edit::{
    invert_with_schedule, localized_edit_observed, transfer_feature_with, EditRequest, Trajectory,
};
use texsynth::grid::{encode_png8, encode_txf1, Boundary};
use texsynth::infinite::{seam_report, synthesize, MultiDiffusionConfig, SynthesisConfig};
use texsynth::pipeline::{detect, segment};
use texsynth::threshold::AnomalyScoreMap;
use texsynth::{BinaryMask, Grid, LabelMap, Rng};

use crate::config::StudioConfig;
use crate::denoiser::Source;
use crate::jobs::JobSpec;
use crate::project::{
    label_png, labels_name, mask_name, now_ms, scores_name, validate_id, Commit, ImageEntry,
    Origin, Project, ProjectIndex, Stage, StageRecord, TrajectoryInfo,
};
use crate::{Result, StudioError};

const PROTOTYPE_STREAM: u64 = 0x7072_6f74;
/// Seam test significance used in tile reports.
pub const SEAM_ALPHA: f64 = 0.01;
const MAX_SIDE: usize = 16_384;

pub(crate) type Progress<'a> = &'a mut (dyn FnMut(f64) + Send);

/// Fails fast on requests that cannot succeed, before a job is queued.
pub(crate) fn check(project: &Project, spec: &JobSpec) -> Result<()> {
    let index = project.index();
    match spec {
        JobSpec::Detect => Ok(()),
        JobSpec::Segment => require_detect(index).map(|_| ()),
        JobSpec::Invert { image } => index.image(image).map(|_| ()),
        JobSpec::Edit {
            image,
            labels,
            mask,
            steps,
        } => {
            let entry = index.image(image)?;
            let Some(info) = &entry.trajectory else {
                return Err(StudioError::missing(
                    "invert",
                    format!("image {image:?} has no stored trajectory; invert first"),
                ));
            };
            same_size(entry, labels.height(), labels.width(), "labels")?;
            same_size(entry, mask.height(), mask.width(), "mask")?;
            match steps {
                Some(s) if *s != info.steps => Err(StudioError::Invalid(format!(
                    "edit asks for {s} steps but the stored trajectory of {image:?} has {}",
                    info.steps
                ))),
                _ => Ok(()),
            }
        }
        JobSpec::Synth {
            height,
            width,
            name,
            labels,
            ..
        } => {
            if *height == 0 || *width == 0 || *height > MAX_SIDE || *width > MAX_SIDE {
                return Err(StudioError::Invalid(format!(
                    "output size {height}x{width} must lie in 1..={MAX_SIDE} on each side"
                )));
            }
            if let Some(l) = labels {
                if l.num_classes() as usize > project.config().segment.classes {
                    return Err(StudioError::Invalid(format!(
                        "labels use class {} but the project has {} classes",
                        l.num_classes(),
                        project.config().segment.classes
                    )));
                }
            }
            check_new_name(index, name.as_deref())
        }
        JobSpec::Transfer {
            image,
            labels,
            mask,
            name,
        } => {
            let entry = index.image(image)?;
            same_size(entry, labels.height(), labels.width(), "labels")?;
            if let Some(m) = mask {
                same_size(entry, m.height(), m.width(), "mask")?;
            }
            check_new_name(index, name.as_deref())
        }
    }
}

fn same_size(entry: &ImageEntry, h: usize, w: usize, what: &str) -> Result<()> {
    if (h, w) == (entry.height, entry.width) {
        Ok(())
    } else {
        Err(StudioError::Invalid(format!(
            "{what} are {h}x{w} but the image is {}x{}",
            entry.height, entry.width
        )))
    }
}

fn check_new_name(index: &ProjectIndex, name: Option<&str>) -> Result<()> {
    if let Some(n) = name {
        validate_id("image", n)?;
        if index.images.contains_key(n) {
            return Err(StudioError::Conflict(format!("image {n:?} already exists")));
        }
    }
    Ok(())
}

fn require_detect(index: &ProjectIndex) -> Result<&StageRecord> {
    index.stages.get(&Stage::Detect).ok_or_else(|| {
        StudioError::missing(
            "detect",
            "segment needs the output of detect; run detect first",
        )
    })
}

pub(crate) enum Work {
    Detect {
        cfg: StudioConfig,
        images: Vec<(String, Grid)>,
    },
    Segment {
        cfg: StudioConfig,
        detect_dir: String,
        images: Vec<(String, Grid)>,
        scores: Vec<AnomalyScoreMap>,
        masks: Vec<BinaryMask>,
    },
    Invert {
        cfg: StudioConfig,
        image: String,
        revision: u32,
        texture: Grid,
        denoiser: Source,
    },
    Edit {
        cfg: StudioConfig,
        image: String,
        revision: u32,
        texture: Grid,
        trajectory: Arc<Trajectory>,
        labels: LabelMap,
        mask: BinaryMask,
        steps: Option<usize>,
        denoiser: Source,
    },
    Synth {
        cfg: StudioConfig,
        output: String,
        height: usize,
        width: usize,
        channels: usize,
        labels: Option<LabelMap>,
        tileable: bool,
        prototype: Option<Grid>,
        denoiser: Source,
    },
    Transfer {
        cfg: StudioConfig,
        source: String,
        output: String,
        texture: Grid,
        labels: LabelMap,
        mask: Option<BinaryMask>,
        denoiser: Source,
    },
}

/// Collects the job's inputs. Unnamed outputs are numbered by the project's
/// next generation, which is unique because a project runs one job at a time.
pub(crate) fn prepare(
    project: &Project,
    spec: JobSpec,
    cache: &HashMap<String, Arc<Trajectory>>,
) -> Result<Work> {
    check(project, &spec)?;
    let index = project.index();
    let serial = index.next_generation;
    let cfg = project.config().clone();
    let sources = || -> Result<Vec<(String, Grid)>> {
        let ids = index.sources();
        if ids.is_empty() {
            return Err(StudioError::Invalid(
                "no inputs: add source images first".into(),
            ));
        }
        ids.into_iter()
            .map(|id| Ok((id.clone(), project.texture(&id)?)))
            .collect()
    };
    Ok(match spec {
        JobSpec::Detect => Work::Detect {
            cfg,
            images: sources()?,
        },
        JobSpec::Segment => {
            let record = require_detect(index)?;
            let images = sources()?;
            if images.iter().map(|(id, _)| id).ne(record.images.iter()) {
                return Err(StudioError::Corrupt(
                    "detect output does not match the source images".into(),
                ));
            }
            let mut scores = Vec::new();
            let mut masks = Vec::new();
            for (id, _) in &images {
                scores.push(AnomalyScoreMap::from_grid(project.scores(id)?, id.clone())?);
                masks.push(project.mask(id)?);
            }
            Work::Segment {
                cfg,
                detect_dir: record.dir.clone(),
                images,
                scores,
                masks,
            }
        }
        JobSpec::Invert { image } => Work::Invert {
            revision: index.image(&image)?.revision,
            texture: project.texture(&image)?,
            denoiser: Source::capture(project)?,
            image,
            cfg,
        },
        JobSpec::Edit {
            image,
            labels,
            mask,
            steps,
        } => {
            let trajectory = match cache.get(&image) {
                Some(t) => t.clone(),
                None => Arc::new(project.trajectory(&image)?),
            };
            Work::Edit {
                revision: index.image(&image)?.revision,
                texture: project.texture(&image)?,
                denoiser: Source::capture(project)?,
                trajectory,
                image,
                labels,
                mask,
                steps,
                cfg,
            }
        }
        JobSpec::Synth {
            height,
            width,
            labels,
            tileable,
            name,
        } => {
            let denoiser = Source::capture(project)?;
            let channels = denoiser
                .channels()
                .or_else(|| {
                    index
                        .images
                        .values()
                        .find(|e| e.origin == Origin::Source)
                        .map(|e| e.channels)
                })
                .unwrap_or(cfg.synthesis.channels);
            let prototype = project
                .prototype()?
                .filter(|p| p.shape() == prototype_shape(&cfg, channels));
            Work::Synth {
                output: name.unwrap_or_else(|| {
                    format!("{}-{serial}", if tileable { "tile" } else { "synth" })
                }),
                height,
                width,
                channels,
                labels,
                tileable,
                prototype,
                denoiser,
                cfg,
            }
        }
        JobSpec::Transfer {
            image,
            labels,
            mask,
            name,
        } => Work::Transfer {
            output: name.unwrap_or_else(|| format!("{image}-transfer-{serial}")),
            texture: project.texture(&image)?,
            denoiser: Source::capture(project)?,
            source: image,
            labels,
            mask,
            cfg,
        },
    })
}

fn prototype_shape(cfg: &StudioConfig, channels: usize) -> (usize, usize, usize) {
    (cfg.synthesis.window, cfg.synthesis.window, channels)
}

/// Fails the commit when the image was replaced after the job read it.
fn bump_revision<'a>(
    index: &'a mut ProjectIndex,
    image: &str,
    revision: u32,
) -> Result<&'a mut ImageEntry> {
    let entry = index
        .images
        .get_mut(image)
        .ok_or_else(|| StudioError::not_found("image", image))?;
    if entry.revision != revision {
        return Err(StudioError::Conflict(format!(
            "image {image:?} changed while the job ran"
        )));
    }
    Ok(entry)
}

fn insert_new(index: &mut ProjectIndex, id: &str, entry: ImageEntry) -> Result<()> {
    if index.images.contains_key(id) {
        return Err(StudioError::Conflict(format!(
            "image {id:?} already exists"
        )));
    }
    index.images.insert(id.to_string(), entry);
    Ok(())
}

fn step_progress(progress: Progress<'_>) -> impl FnMut(usize, usize) -> bool + Send + '_ {
    move |done, total| {
        progress(done as f64 / total.max(1) as f64);
        true
    }
}

fn edit_request(
    cfg: &StudioConfig,
    labels: LabelMap,
    mask: BinaryMask,
    steps: Option<usize>,
) -> EditRequest {
    EditRequest {
        alpha: cfg.edit.alpha,
        gamma: cfg.edit.guidance,
        steps,
        background: cfg.edit.background,
        ..EditRequest::new(labels, mask)
    }
}

fn trajectory_info(t: &Trajectory) -> TrajectoryInfo {
    TrajectoryInfo {
        steps: t.steps(),
        provenance: t.provenance,
    }
}

impl Work {
    pub(crate) fn run(self, seed: u64, progress: Progress<'_>) -> Result<(Commit, Value)> {
        match self {
            Work::Detect { cfg, images } => {
                let grids: Vec<Grid> = images.iter().map(|(_, g)| g.clone()).collect();
                let det = detect(&grids, &cfg.detect)?;
                let ids: Vec<String> = images.into_iter().map(|(id, _)| id).collect();
                let mut files = Vec::new();
                let mut per_image = serde_json::Map::new();
                for (i, id) in ids.iter().enumerate() {
                    files.push((scores_name(id), encode_txf1(det.scores[i].scores())));
                    files.push((mask_name(id), encode_png8(&det.masks[i].to_grid())?));
                    per_image.insert(
                        id.clone(),
                        json!({ "threshold": det.thresholds[i], "mask_pixels": det.masks[i].count() }),
                    );
                }
                let summary = Value::Object(per_image);
                let result = json!({ "images": summary });
                let update = Box::new(move |index: &mut ProjectIndex, gen: &str| {
                    if index.sources() != ids {
                        return Err(StudioError::Conflict(
                            "source images changed while detect ran".into(),
                        ));
                    }
                    index.invalidate_from(Stage::Detect);
                    index.stages.insert(
                        Stage::Detect,
                        StageRecord {
                            seed,
                            dir: gen.to_string(),
                            images: ids,
                            finished_unix_ms: now_ms(),
                            summary,
                        },
                    );
                    Ok(())
                });
                Ok((
                    Commit {
                        files,
                        trajectories: Vec::new(),
                        update,
                    },
                    result,
                ))
            }
            Work::Segment {
                cfg,
                detect_dir,
                images,
                scores,
                masks,
            } => {
                let grids: Vec<Grid> = images.iter().map(|(_, g)| g.clone()).collect();
                let seg = segment(&grids, &scores, &masks, &cfg.segment, &mut Rng::new(seed))?;
                let ids: Vec<String> = images.into_iter().map(|(id, _)| id).collect();
                let mut files = Vec::new();
                let mut class_pixels = vec![0usize; cfg.segment.classes + 1];
                for (id, labels) in ids.iter().zip(&seg.labels) {
                    files.push((labels_name(id), label_png(labels)?));
                    for (k, n) in labels.histogram().into_iter().enumerate() {
                        if k < class_pixels.len() {
                            class_pixels[k] += n;
                        }
                    }
                }
                let summary = json!({
                    "regions": seg.regions.len(),
                    "class_pixels": class_pixels,
                    "final_loss": seg.losses.last(),
                });
                let result = summary.clone();
                let update = Box::new(move |index: &mut ProjectIndex, gen: &str| {
                    if index.stages.get(&Stage::Detect).map(|r| r.dir.as_str())
                        != Some(detect_dir.as_str())
                    {
                        return Err(StudioError::Conflict(
                            "detect re-ran while segment ran".into(),
                        ));
                    }
                    index.stages.insert(
                        Stage::Segment,
                        StageRecord {
                            seed,
                            dir: gen.to_string(),
                            images: ids,
                            finished_unix_ms: now_ms(),
                            summary,
                        },
                    );
                    Ok(())
                });
                Ok((
                    Commit {
                        files,
                        trajectories: Vec::new(),
                        update,
                    },
                    result,
                ))
            }
            Work::Invert {
                cfg,
                image,
                revision,
                texture,
                denoiser,
            } => {
                let denoiser = denoiser.build(texture.channels())?;
                let schedule = cfg.diffusion.schedule.build(cfg.edit.steps)?;
                let traj = invert_with_schedule(
                    denoiser.as_ref(),
                    &texture,
                    &schedule,
                    cfg.edit.fp_iters,
                    &mut step_progress(progress),
                )?;
                let reconstruction = traj.reconstruct()?.mean_abs_diff(&texture)?;
                let info = trajectory_info(&traj);
                let result = json!({ "image": image, "steps": info.steps, "reconstruction_mae": reconstruction });
                let id = image.clone();
                Ok((
                    Commit {
                        files: Vec::new(),
                        trajectories: vec![(image, traj)],
                        update: Box::new(move |index, _| {
                            bump_revision(index, &id, revision)?.trajectory = Some(info);
                            Ok(())
                        }),
                    },
                    result,
                ))
            }
            Work::Edit {
                cfg,
                image,
                revision,
                texture,
                trajectory,
                labels,
                mask,
                steps,
                denoiser,
            } => {
                let denoiser = denoiser.build(texture.channels())?;
                let req = edit_request(&cfg, labels, mask, steps);
                let edit = localized_edit_observed(
                    denoiser.as_ref(),
                    &texture,
                    &trajectory,
                    &req,
                    &mut step_progress(progress),
                )?;
                let changed = edit.image.max_abs_diff(&texture)?;
                let result = json!({ "image": image, "revision": revision + 1, "patch": edit.patch, "max_change": changed });
                let id = image.clone();
                Ok((
                    Commit {
                        files: vec![(format!("{image}.txf1"), encode_txf1(&edit.image))],
                        trajectories: Vec::new(),
                        update: Box::new(move |index, gen| {
                            let e = bump_revision(index, &id, revision)?;
                            e.texture = format!("{gen}/{id}.txf1");
                            e.revision += 1;
                            Ok(())
                        }),
                    },
                    result,
                ))
            }
            Work::Synth {
                cfg,
                output,
                height,
                width,
                channels,
                labels,
                tileable,
                prototype,
                denoiser,
            } => {
                let denoiser = denoiser.build(channels)?;
                let (fresh, prototype) = match prototype {
                    Some(p) => (false, p),
                    None => {
                        let (h, w, c) = prototype_shape(&cfg, channels);
                        let p = Grid::standard_normal(
                            h,
                            w,
                            c,
                            &mut Rng::new(seed).fork(PROTOTYPE_STREAM),
                        );
                        // Stored as f32, so use the f32 value from the start.
                        (true, p.map(|v| v as f32 as f64))
                    }
                };
                let mut sc =
                    SynthesisConfig::new(height, width, channels, cfg.diffusion.steps, seed);
                sc.schedule = cfg.diffusion.schedule;
                sc.gamma = cfg.diffusion.guidance;
                sc.plan = cfg.synthesis.plan();
                sc.uniformize = cfg.synthesis.uniformize();
                sc.sampler = MultiDiffusionConfig {
                    solver: cfg.diffusion.solver,
                    concurrency: match cfg.synthesis.concurrency {
                        0 => MultiDiffusionConfig::default().concurrency,
                        n => n,
                    },
                };
                if tileable {
                    sc.plan.wrap = true;
                    sc.uniformize.boundary = Boundary::Circular;
                }
                let (out, stats) = synthesize(
                    denoiser.as_ref(),
                    labels.as_ref(),
                    &sc,
                    Some(&prototype),
                    &mut step_progress(progress),
                )?;
                let mut result = json!({
                    "image": output,
                    "height": height,
                    "width": width,
                    "stats": stats,
                });
                if tileable {
                    let seam = seam_report(&out);
                    result["seam"] = json!(seam);
                    result["seam_passes"] = json!(seam.passes(SEAM_ALPHA));
                }
                let mut files = vec![(format!("{output}.txf1"), encode_txf1(&out))];
                if fresh {
                    files.push(("prototype.txf1".into(), encode_txf1(&prototype)));
                }
                Ok((
                    Commit {
                        files,
                        trajectories: Vec::new(),
                        update: Box::new(move |index, gen| {
                            insert_new(
                                index,
                                &output,
                                ImageEntry {
                                    origin: Origin::Synthesized,
                                    height,
                                    width,
                                    channels,
                                    texture: format!("{gen}/{output}.txf1"),
                                    revision: 0,
                                    trajectory: None,
                                },
                            )?;
                            if fresh {
                                index.prototype = Some(format!("{gen}/prototype.txf1"));
                            }
                            Ok(())
                        }),
                    },
                    result,
                ))
            }
            Work::Transfer {
                cfg,
                source,
                output,
                texture,
                labels,
                mask,
                denoiser,
            } => {
                let denoiser = denoiser.build(texture.channels())?;
                let mask = mask.unwrap_or_else(|| {
                    BinaryMask::from_fn(labels.height(), labels.width(), |y, x| {
                        labels.get(y, x) != 0
                    })
                });
                let req = edit_request(&cfg, labels, mask, None);
                let schedule = cfg.diffusion.schedule.build(cfg.edit.transfer_steps)?;
                let (out, traj) = transfer_feature_with(
                    denoiser.as_ref(),
                    &texture,
                    &req,
                    &schedule,
                    cfg.edit.fp_iters,
                    &mut step_progress(progress),
                )?;
                let (h, w, c) = out.shape();
                let info = trajectory_info(&traj);
                let result = json!({ "image": output, "source": source, "steps": info.steps });
                let id = output.clone();
                Ok((
                    Commit {
                        files: vec![(format!("{output}.txf1"), encode_txf1(&out))],
                        trajectories: vec![(output, traj)],
                        update: Box::new(move |index, gen| {
                            insert_new(
                                index,
                                &id,
                                ImageEntry {
                                    origin: Origin::Transferred,
                                    height: h,
                                    width: w,
                                    channels: c,
                                    texture: format!("{gen}/{id}.txf1"),
                                    revision: 0,
                                    trajectory: Some(info),
                                },
                            )
                        }),
                    },
                    result,
                ))
            }
        }
    }
}
