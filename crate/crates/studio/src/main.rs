use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use texsynth::grid::{decode_label_png, decode_png8, write_grid, GridFormat};
use texsynth::{BinaryMask, LabelMap};
use texsynth_studio::config::DenoiserBinding;
use texsynth_studio::{
    ArtifactKind, ErrorBody, Job, JobSpec, JobState, Project, Studio, StudioConfig, StudioError,
};

/// Feature-aware texture synthesis projects: detect and segment features,
/// then synthesize, tile, edit and transfer textures.
#[derive(Parser)]
#[command(name = "texsynth", version)]
struct Cli {
    /// Project directory.
    #[arg(long, short, global = true, default_value = ".")]
    project: PathBuf,
    /// Configuration file used instead of the project's config.toml.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `key=value` override with a dotted key, e.g. `diffusion.steps=30`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Print results as JSON.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a project in the project directory.
    Init {
        /// Project id; defaults to the directory name.
        #[arg(long)]
        id: Option<String>,
        /// Add the bundled demo textures and use the exemplar denoiser.
        #[arg(long)]
        demo: bool,
    },
    /// Add source images (PNG or TXF1); ids default to the file stems.
    Add {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Anomaly scores and feature masks for every source image.
    Detect(SeedArg),
    /// Feature-type labels from the detected masks.
    Segment(SeedArg),
    /// Store an editable trajectory for an image.
    Invert {
        #[arg(long)]
        image: String,
    },
    /// Repaint the masked part of an image under new labels.
    Edit {
        #[arg(long)]
        image: String,
        /// Label map PNG (palette index or gray level is the class).
        #[arg(long)]
        labels: PathBuf,
        /// Mask PNG; white pixels may change.
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Regenerate an outside image under new labels, as a new image.
    Transfer {
        #[arg(long)]
        image: String,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        name: Option<String>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Synthesize a texture of any size.
    Synth(SynthArgs),
    /// Synthesize a texture that tiles seamlessly.
    Tile(SynthArgs),
    /// Show the project index.
    Status,
    /// Write an artifact of an image to a file.
    Export {
        #[arg(long)]
        image: String,
        /// texture, scores, mask or labels.
        #[arg(long, default_value = "texture")]
        kind: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the HTTP API for every project below a root directory.
    Serve {
        #[arg(long, default_value = ".")]
        root: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

#[derive(Args)]
struct SeedArg {
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct OutArg {
    /// Also write the resulting texture here (.png or .txf1).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    height: usize,
    #[arg(long)]
    width: usize,
    /// Label map PNG; resized to the output with nearest sampling.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    name: Option<String>,
    #[command(flatten)]
    out: OutArg,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let body = match e.downcast_ref::<StudioError>() {
                Some(se) => se.body(),
                None => ErrorBody {
                    code: "error".into(),
                    message: format!("{e:#}"),
                    missing_prerequisite: None,
                },
            };
            eprintln!(
                "{}",
                serde_json::to_string(&body).expect("error serializes")
            );
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let base = cli.config.as_deref().map(StudioConfig::load).transpose()?;
    match &cli.command {
        Command::Init { id, demo } => init(&cli, base, id.as_deref(), *demo),
        Command::Serve { root, addr } => {
            let studio = Studio::open_root(root, &cli.overrides)?;
            tokio::runtime::Runtime::new()?.block_on(texsynth_studio::api::serve(studio, *addr))?;
            Ok(ExitCode::SUCCESS)
        }
        command => {
            let studio = Studio::open_project(&cli.project, base, &cli.overrides)?;
            let id = studio.project_ids().remove(0);
            project_command(&cli, &studio, &id, command)
        }
    }
}

fn init(
    cli: &Cli,
    base: Option<StudioConfig>,
    id: Option<&str>,
    demo: bool,
) -> anyhow::Result<ExitCode> {
    let id = match id {
        Some(id) => id.to_string(),
        None => {
            let abs = std::path::absolute(&cli.project)?;
            abs.file_name()
                .and_then(|n| n.to_str())
                .map(str::to_string)
                .unwrap_or_else(|| "project".into())
        }
    };
    let mut cfg = base.unwrap_or_default().with_overrides(&cli.overrides)?;
    if demo && !cli.overrides.iter().any(|o| o.starts_with("denoiser.")) {
        cfg.denoiser = DenoiserBinding::Exemplar {
            config: Default::default(),
        };
    }
    let mut project = Project::create(&cli.project, &id, cfg)?;
    if demo {
        for (i, img) in texsynth::fixture::texture_fixture(0)
            .images
            .iter()
            .enumerate()
        {
            project.add_image(&format!("demo-{i}"), img)?;
        }
    }
    report(
        cli,
        &serde_json::to_value(project.index())?,
        &format!("created project {id} in {}", cli.project.display()),
    );
    Ok(ExitCode::SUCCESS)
}

fn read_labels(path: &Path, classes: usize) -> anyhow::Result<LabelMap> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let labels =
        decode_label_png(&bytes).with_context(|| format!("decoding {}", path.display()))?;
    if labels.num_classes() as usize > classes {
        bail!(
            "{} uses class {} but the project has {classes} classes",
            path.display(),
            labels.num_classes()
        );
    }
    Ok(labels.with_num_classes(classes as u8)?)
}

fn read_mask(path: &Path) -> anyhow::Result<BinaryMask> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let g = decode_png8(&bytes).with_context(|| format!("decoding {}", path.display()))?;
    Ok(BinaryMask::from_grid_above(&g.channel(0), 0.5))
}

fn project_command(
    cli: &Cli,
    studio: &Studio,
    id: &str,
    command: &Command,
) -> anyhow::Result<ExitCode> {
    let classes = studio.with_project(id, |p| Ok(p.config().segment.classes))?;
    let (spec, seed, out) = match command {
        Command::Add { files } => {
            for f in files {
                let image = f
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .with_context(|| format!("{} has no usable file name", f.display()))?;
                let bytes = std::fs::read(f).with_context(|| format!("reading {}", f.display()))?;
                let grid = match GridFormat::from_path(f) {
                    Some(GridFormat::TensorRaw) => texsynth::grid::decode_txf1(&bytes)?.0,
                    _ => {
                        decode_png8(&bytes).with_context(|| format!("decoding {}", f.display()))?
                    }
                };
                let entry = studio.add_image(id, image, &grid)?;
                report(
                    cli,
                    &serde_json::json!({ "image": image, "entry": entry }),
                    &format!("added {image}"),
                );
            }
            return Ok(ExitCode::SUCCESS);
        }
        Command::Status => {
            let view = studio.project(id)?;
            let text = serde_json::to_string_pretty(&view)?;
            report(cli, &serde_json::to_value(&view)?, &text);
            return Ok(ExitCode::SUCCESS);
        }
        Command::Export { image, kind, out } => {
            let kind: ArtifactKind = kind.parse()?;
            let png = studio.artifact_png(id, image, kind)?;
            std::fs::write(out, png).with_context(|| format!("writing {}", out.display()))?;
            return Ok(ExitCode::SUCCESS);
        }
        Command::Detect(s) => (JobSpec::Detect, s.seed, None),
        Command::Segment(s) => (JobSpec::Segment, s.seed, None),
        Command::Invert { image } => (
            JobSpec::Invert {
                image: image.clone(),
            },
            None,
            None,
        ),
        Command::Edit {
            image,
            labels,
            mask,
            steps,
            out,
        } => (
            JobSpec::Edit {
                image: image.clone(),
                labels: read_labels(labels, classes)?,
                mask: read_mask(mask)?,
                steps: *steps,
            },
            None,
            out.out.clone(),
        ),
        Command::Transfer {
            image,
            labels,
            mask,
            name,
            out,
        } => (
            JobSpec::Transfer {
                image: image.clone(),
                labels: read_labels(labels, classes)?,
                mask: mask.as_deref().map(read_mask).transpose()?,
                name: name.clone(),
            },
            None,
            out.out.clone(),
        ),
        Command::Synth(a) | Command::Tile(a) => (
            JobSpec::Synth {
                height: a.height,
                width: a.width,
                labels: a
                    .labels
                    .as_deref()
                    .map(|p| read_labels(p, classes))
                    .transpose()?,
                tileable: matches!(command, Command::Tile(_)),
                name: a.name.clone(),
            },
            a.seed,
            a.out.out.clone(),
        ),
        Command::Init { .. } | Command::Serve { .. } => {
            unreachable!("handled before opening the project")
        }
    };
    let job = wait(cli, studio, studio.submit(id, spec, seed)?)?;
    if job.state == JobState::Failed {
        let body = job.error.clone().expect("failed jobs carry an error");
        eprintln!("{}", serde_json::to_string(&body)?);
        return Ok(ExitCode::FAILURE);
    }
    if let Some(path) = out {
        let image = job
            .result
            .as_ref()
            .and_then(|r| r["image"].as_str())
            .context("job produced no image")?;
        let grid = studio.texture(id, image)?;
        let format = GridFormat::from_path(&path).unwrap_or(GridFormat::Png8);
        write_grid(&path, &grid, format).with_context(|| format!("writing {}", path.display()))?;
    }
    let summary = format!(
        "{} {} done (seed {}): {}",
        job.kind.name(),
        job.id,
        job.seed,
        job.result
            .as_ref()
            .map(|r| r.to_string())
            .unwrap_or_default()
    );
    report(cli, &serde_json::to_value(&job)?, &summary);
    Ok(ExitCode::SUCCESS)
}

/// Waits for the job, printing progress to stderr unless `--json` is set.
fn wait(cli: &Cli, studio: &Studio, job: Job) -> anyhow::Result<Job> {
    let started = Instant::now();
    loop {
        let now = studio.wait(&job.id, Some(Duration::from_secs(2)))?;
        if now.state.is_finished() {
            return Ok(now);
        }
        if !cli.json {
            eprintln!(
                "{} {}: {:.0}% after {:.0?}",
                now.kind.name(),
                now.id,
                now.progress * 100.0,
                started.elapsed()
            );
        }
    }
}

fn report(cli: &Cli, json: &serde_json::Value, text: &str) {
    if cli.json {
        println!("{json}");
    } else {
        println!("{text}");
    }
}
