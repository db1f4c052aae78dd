//! The `sgfield` command line.
//!
//! Exit codes: 0 success, 1 usage, 2 invalid input (graph, config, targets),
//! 3 runtime failure (IO, guidance, numerics).

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::exporter::{self, audit_decomposition, marching_cubes, silhouette_iou, write_obj};
use crate::field::AnalyticScene;
use crate::graph::{decompose_prompts, parse_graph, plan_sequence, EdgePromptStyle, SceneGraph};
use crate::guidance::{GuidanceImage, GuidanceProvider, NoisyScoreProvider, PhotometricProvider, Target};
use crate::render::{Camera, RenderTag};
use crate::space::Sphere;
use crate::trainer::{kind_label, TrainConfig, Trainer};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "sgfield", version, about = "Scene-graph guided compositional SDF fields")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PromptStyle {
    /// "<subject prompt> <relation> <object prompt>"
    Full,
    /// "<subject name> <relation> <object name>"
    Bare,
}

impl From<PromptStyle> for EdgePromptStyle {
    fn from(s: PromptStyle) -> Self {
        match s {
            PromptStyle::Full => EdgePromptStyle::Full,
            PromptStyle::Bare => EdgePromptStyle::BareNames,
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct ViewArgs {
    #[arg(long, default_value_t = 30.0)]
    pub azimuth: f64,
    #[arg(long, default_value_t = 15.0)]
    pub elevation: f64,
    #[arg(long, default_value_t = 2.5)]
    pub radius: f64,
    #[arg(long, default_value_t = 40.0)]
    pub fov: f64,
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    #[arg(long, default_value_t = 128)]
    pub height: usize,
}

impl ViewArgs {
    fn camera(&self) -> Camera {
        Camera::orbit(self.azimuth, self.elevation, self.radius, self.fov, self.width, self.height)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse and check a graph; prints object, edge and prompt counts.
    Validate {
        graph: PathBuf,
    },
    /// Emit the prompt set of a graph as JSON.
    Prompts {
        graph: PathBuf,
        #[arg(long, value_enum, default_value = "full")]
        style: PromptStyle,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the first steps of the guidance schedule.
    Plan {
        graph: PathBuf,
        #[arg(long, default_value_t = 10)]
        steps: u64,
        /// One JSON array instead of one line per step.
        #[arg(long)]
        json: bool,
    },
    /// Render an object, edge or scene image from a checkpoint.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `scene`, `object:<i>` or `edge:<a>,<b>`.
        #[arg(long, default_value = "scene", value_parser = parse_tag)]
        tag: RenderTag,
        #[command(flatten)]
        view: ViewArgs,
        /// `.png` or `.pfm`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train, or resume with `--resume`.
    Train {
        #[arg(long)]
        graph: Option<PathBuf>,
        /// TOML or JSON training config; defaults to the desk-scale preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// `photometric:<targets-dir>`, `noisy:<targets-dir>` or `remote:<url>`.
        #[arg(long)]
        provider: String,
        /// Score-noise scale of the noisy provider.
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        /// Remote request timeout in seconds.
        #[arg(long, default_value_t = 60.0)]
        timeout: f64,
        /// Continue the run saved in `--out`.
        #[arg(long)]
        resume: bool,
        /// Stop after this global step (the run stays resumable).
        #[arg(long)]
        until: Option<u64>,
        /// Print a progress line every this many steps (0 disables).
        #[arg(long, default_value_t = 50)]
        log_every: u64,
    },
    /// Extract per-object OBJ meshes from a checkpoint.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 256)]
        resolution: usize,
        /// Output directory; meshes are written as `object<i>.obj`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte-Carlo decomposition audit of a checkpoint as JSON.
    Audit {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Targets directory whose `scene.json` gives ground-truth spheres.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Orbit views for silhouette IoU against the reference.
        #[arg(long, default_value_t = 8)]
        views: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_tag(s: &str) -> Result<RenderTag, String> {
    let bad = || format!("expected scene, object:<i> or edge:<a>,<b>, got {s:?}");
    if s == "scene" {
        return Ok(RenderTag::Scene);
    }
    if let Some(i) = s.strip_prefix("object:") {
        return i.parse().map(|object| RenderTag::Object { object }).map_err(|_| bad());
    }
    if let Some(pair) = s.strip_prefix("edge:") {
        let (a, b) = pair.split_once(',').ok_or_else(bad)?;
        let (a, b) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
        if a == b {
            return Err(bad());
        }
        return Ok(RenderTag::edge(a, b));
    }
    Err(bad())
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn invalid(m: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_INVALID,
            message: m.to_string(),
        }
    }

    fn runtime(m: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: m.to_string(),
        }
    }

    fn usage(m: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_USAGE,
            message: m.to_string(),
        }
    }
}

impl From<crate::trainer::TrainError> for Failure {
    fn from(e: crate::trainer::TrainError) -> Self {
        use crate::trainer::TrainError as E;
        match e {
            E::Config(_) | E::Scene(_) | E::Checkpoint(_) => Self::invalid(e),
            _ => Self::runtime(e),
        }
    }
}

impl From<exporter::ExportError> for Failure {
    fn from(e: exporter::ExportError) -> Self {
        match e {
            exporter::ExportError::Resolution(_) => Self::usage(e),
            _ => Self::runtime(e),
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

fn load_graph(path: &Path) -> Result<SceneGraph, Failure> {
    parse_graph(&read(path)?).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))
}

fn write_out(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Failure::runtime(format!("{}: {e}", p.display()))),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

/// One ground-truth sphere of a targets directory's `scene.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceObject {
    pub center: [f64; 3],
    pub radius: f64,
    pub color: [f64; 3],
}

/// `scene.json` of a targets directory: one sphere per graph node, in order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceFile {
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    pub objects: Vec<ReferenceObject>,
}

fn default_kappa() -> f64 {
    50.0
}

impl ReferenceFile {
    pub fn scene(&self) -> AnalyticScene {
        AnalyticScene::new(
            self.objects.iter().map(|o| Sphere::new(o.center, o.radius)).collect(),
            self.objects.iter().map(|o| o.color).collect(),
            self.kappa,
        )
    }
}

fn load_reference(dir: &Path, objects: usize) -> Result<AnalyticScene, Failure> {
    let path = dir.join("scene.json");
    let file: ReferenceFile = serde_json::from_str(&read(&path)?).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))?;
    if file.objects.len() != objects {
        return Err(Failure::invalid(format!("{}: {} objects for a {objects}-node graph", path.display(), file.objects.len())));
    }
    if file.objects.iter().any(|o| !(o.radius > 0.0)) || !(file.kappa > 0.0) {
        return Err(Failure::invalid(format!("{}: radii and kappa must be positive", path.display())));
    }
    Ok(file.scene())
}

/// Reference targets for every prompt, plus an optional `fixed.json`
/// mapping prompts to PFM images (relative to the directory) that override
/// them.
fn photometric(dir: &Path, trainer: &Trainer) -> Result<PhotometricProvider, Failure> {
    let scene = load_reference(dir, trainer.graph.num_objects())?;
    let bounds = trainer.config.field.bounds;
    let mut p = PhotometricProvider::for_reference(&trainer.prompts, &scene, bounds, trainer.config.render_settings());
    let fixed = dir.join("fixed.json");
    if fixed.exists() {
        let map: std::collections::BTreeMap<String, PathBuf> =
            serde_json::from_str(&read(&fixed)?).map_err(|e| Failure::invalid(format!("{}: {e}", fixed.display())))?;
        for (prompt, file) in map {
            let (w, h, rgb) = exporter::read_pfm(&dir.join(&file))?;
            p.insert(prompt, Target::Fixed(GuidanceImage::new(h, w, rgb)));
        }
    }
    Ok(p)
}

fn provider(spec: &str, sigma: f64, timeout: f64, trainer: &Trainer) -> Result<Box<dyn GuidanceProvider>, Failure> {
    let (kind, arg) = spec.split_once(':').unwrap_or((spec, ""));
    match kind {
        "photometric" if !arg.is_empty() => Ok(Box::new(photometric(Path::new(arg), trainer)?)),
        "noisy" if !arg.is_empty() => {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(Failure::usage("--sigma must be a finite nonnegative number"));
            }
            let inner = photometric(Path::new(arg), trainer)?;
            Ok(Box::new(NoisyScoreProvider::new(inner, trainer.config.seed, sigma)))
        }
        #[cfg(feature = "remote")]
        "remote" if !arg.is_empty() => {
            if !(timeout > 0.0 && timeout.is_finite()) {
                return Err(Failure::usage("--timeout must be positive"));
            }
            Ok(Box::new(crate::guidance::RemoteProvider::new(arg, std::time::Duration::from_secs_f64(timeout))))
        }
        _ => {
            let _ = timeout;
            Err(Failure::usage(format!(
                "unknown provider {spec:?}; expected photometric:<targets-dir>, noisy:<targets-dir> or remote:<url>"
            )))
        }
    }
}

fn orbit_views(n: usize, width: usize) -> Vec<Camera> {
    (0..n).map(|k| Camera::orbit(360.0 * k as f64 / n as f64, 20.0, 2.5, 40.0, width, width)).collect()
}

pub fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Validate { graph } => {
            let g = load_graph(&graph)?;
            let p = decompose_prompts(&g, EdgePromptStyle::Full);
            println!("M={} K={} prompts={}", g.num_objects(), g.num_edges(), p.len());
        }
        Command::Prompts { graph, style, out } => {
            let g = load_graph(&graph)?;
            let p = decompose_prompts(&g, style.into());
            write_out(out.as_deref(), &serde_json::to_string_pretty(&p).expect("prompts serialize"))?;
        }
        Command::Plan { graph, steps, json } => {
            let g = load_graph(&graph)?;
            let plans = plan_sequence(&g, steps);
            if json {
                println!("{}", serde_json::to_string_pretty(&plans).expect("plans serialize"));
            } else {
                for p in plans {
                    println!("{} {}", p.step, kind_label(&p.kind));
                }
            }
        }
        Command::Render { checkpoint, tag, view, out } => {
            let t = Trainer::load(&checkpoint)?;
            let m = t.graph.num_objects();
            let in_range = match tag {
                RenderTag::Object { object } => object < m,
                RenderTag::Edge { a, b } => a < m && b < m,
                RenderTag::Scene => true,
            };
            if !in_range {
                return Err(Failure::usage(format!("{tag:?} is out of range for {m} objects")));
            }
            if view.width == 0 || view.height == 0 {
                return Err(Failure::usage("image size must be positive"));
            }
            let img = t.render(&view.camera(), &[tag]).remove(0);
            match out.extension().and_then(|e| e.to_str()) {
                Some("pfm") => exporter::write_image_pfm(&img, &out)?,
                Some("png") => exporter::write_png(&img, &out)?,
                _ => return Err(Failure::usage("--out must end in .png or .pfm")),
            }
        }
        Command::Train {
            graph,
            config,
            out,
            seed,
            provider: spec,
            sigma,
            timeout,
            resume,
            until,
            log_every,
        } => {
            let mut trainer = if resume {
                if graph.is_some() || config.is_some() || seed.is_some() {
                    return Err(Failure::usage("--resume takes the graph, config and seed from the checkpoint"));
                }
                Trainer::load(&out)?
            } else {
                let graph = graph.ok_or_else(|| Failure::usage("--graph is required unless resuming"))?;
                let g = load_graph(&graph)?;
                let mut c = match config {
                    Some(p) => TrainConfig::from_file(&p)?,
                    None => TrainConfig::desk(),
                };
                if let Some(s) = seed {
                    c.seed = s;
                }
                Trainer::new(c, g)?
            };
            let mut provider = provider(&spec, sigma, timeout, &trainer)?;
            let total = trainer.config.total_steps();
            let start = Instant::now();
            let result = trainer.run(provider.as_mut(), Some(&out), until, |rec| {
                let s = rec.row.step;
                if log_every > 0 && (s % log_every == 0 || s + 1 == total) {
                    eprintln!(
                        "step {s}/{total} {} total {:.5} penet {:.3e} eikonal {:.4} ({:.0?})",
                        rec.row.kind,
                        rec.row.total,
                        rec.row.penetration,
                        rec.row.eikonal,
                        start.elapsed()
                    );
                }
            });
            result?;
            println!("step={} checksum={:016x}", trainer.state.step, trainer.state.checksum());
        }
        Command::Extract { checkpoint, resolution, out } => {
            let t = Trainer::load(&checkpoint)?;
            fs::create_dir_all(&out).map_err(|e| Failure::runtime(format!("{}: {e}", out.display())))?;
            let bounds = t.state.field.config().bounds;
            for i in 0..t.graph.num_objects() {
                let mesh = marching_cubes(&t.state.field, i, &bounds, resolution)?;
                let path = out.join(format!("object{i}.obj"));
                write_obj(&mesh, &path)?;
                println!(
                    "object {i} ({}): {} vertices, {} triangles, watertight={}",
                    t.graph.nodes()[i].name,
                    mesh.vertices.len(),
                    mesh.triangles.len(),
                    mesh.is_watertight()
                );
            }
        }
        Command::Audit {
            checkpoint,
            samples,
            seed,
            reference,
            views,
            out,
        } => {
            if samples == 0 {
                return Err(Failure::usage("--samples must be positive"));
            }
            let t = Trainer::load(&checkpoint)?;
            let m = t.graph.num_objects();
            let bounds = t.state.field.config().bounds;
            let scene = reference.as_deref().map(|d| load_reference(d, m)).transpose()?;
            let mut report = audit_decomposition(&t.state.field, &bounds, samples, seed, scene.as_ref().map(|s| s as _));
            if let Some(s) = &scene {
                if views > 0 {
                    let cams = orbit_views(views, t.config.res_fine.min(128));
                    let iou = silhouette_iou(&t.state.field, s, m, &cams, &bounds, &t.config.render_settings());
                    for (o, v) in report.objects.iter_mut().zip(iou) {
                        o.silhouette_iou = Some(v);
                    }
                }
            }
            write_out(out.as_deref(), &report.to_json())?;
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn main_with<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}
