//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 I/O error,
//! 3 malformed or inconsistent data.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use thiserror::Error;

use crate::describe::{reconstruct, register_regions, DescriptionStack, StackError};
use crate::kb::{annotate, format_report, load_kb, AnnotateConfig, KbError};
use crate::labels::LabelMap;
use crate::pyramid::build_pyramid;
use crate::raster::{load_image, save_image, synth_scene, RasterError, RectSpec};
use crate::refine::{segment_pyramid, LevelResult, RefineConfig, SegmentConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io(_) => 2,
            CliError::Data(_) => 3,
        }
    }
}

impl From<RasterError> for CliError {
    fn from(e: RasterError) -> Self {
        match e {
            RasterError::Read { .. } | RasterError::Write { .. } => CliError::Io(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<StackError> for CliError {
    fn from(e: StackError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(
    name = "strata",
    version,
    about = "Coarse-to-fine segmentation, region descriptions and annotation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Segment an image and write per-level label maps.
    Segment {
        image: PathBuf,
        #[command(flatten)]
        opts: CommonOpts,
    },
    /// Segment an image and write its description stack.
    Describe {
        image: PathBuf,
        #[command(flatten)]
        opts: CommonOpts,
    },
    /// Rebuild a level from a description stack and its label map.
    Reconstruct {
        #[arg(long)]
        stack: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        level: usize,
        #[arg(long)]
        out: PathBuf,
        /// Original level-0 image to measure the reconstruction error against.
        #[arg(long)]
        original: Option<PathBuf>,
    },
    /// Name the regions of an image with a knowledge base.
    Annotate {
        image: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        #[command(flatten)]
        opts: CommonOpts,
    },
    /// Write a synthetic rectangle scene and its ground-truth labels.
    Synth {
        #[arg(long, default_value_t = 256)]
        width: usize,
        #[arg(long, default_value_t = 256)]
        height: usize,
        #[arg(long, default_value_t = 30.0)]
        background: f64,
        /// Rectangle as `x,y,w,h,intensity`; repeatable, later ones on top.
        #[arg(long = "rect", value_parser = parse_rect)]
        rects: Vec<RectSpec>,
        /// Uniform integer noise amplitude.
        #[arg(long, default_value_t = 0)]
        noise: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
}

#[derive(Debug, Args)]
struct CommonOpts {
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    top_target: Option<usize>,
    #[arg(long)]
    max_sweeps: Option<usize>,
    #[arg(long)]
    min_seed_size: Option<usize>,
    #[arg(long)]
    match_threshold: Option<f64>,
    #[arg(long)]
    context_threshold: Option<f64>,
    /// Refine only deviant pixels, leaving well-fitting border pixels alone.
    #[arg(long)]
    no_border_relax: bool,
    /// Do not merge adjacent regions that fit together within the tolerance.
    #[arg(long)]
    no_merge: bool,
    /// TOML file with any of the numeric settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

fn parse_rect(s: &str) -> Result<RectSpec, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [x, y, w, h, v] = parts[..] else {
        return Err(format!("expected x,y,w,h,intensity, got {s:?}"));
    };
    let int = |t: &str| {
        t.parse::<usize>()
            .map_err(|_| format!("bad integer {t:?} in {s:?}"))
    };
    let intensity = v
        .parse::<f64>()
        .map_err(|_| format!("bad intensity {v:?} in {s:?}"))?;
    Ok(RectSpec::new(int(x)?, int(y)?, int(w)?, int(h)?, intensity))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    tol: Option<f64>,
    top_target: Option<usize>,
    max_sweeps: Option<usize>,
    min_seed_size: Option<usize>,
    match_threshold: Option<f64>,
    context_threshold: Option<f64>,
    relax_borders: Option<bool>,
    merge_adjacent: Option<bool>,
}

/// Fully resolved settings of one invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub segment: SegmentConfig,
    pub annotate: AnnotateConfig,
    pub out_dir: PathBuf,
}

impl CommonOpts {
    /// Flag over config file over default.
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let file = match &self.config {
            None => ConfigFile::default(),
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
                toml::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("{}: {}", path.display(), e.message())))?
            }
        };
        let d = SegmentConfig::default();
        let a = AnnotateConfig::default();
        let segment = SegmentConfig {
            top_target: self.top_target.or(file.top_target).unwrap_or(d.top_target),
            refine: RefineConfig {
                tol: self.tol.or(file.tol).unwrap_or(d.refine.tol),
                max_sweeps: self.max_sweeps.or(file.max_sweeps).unwrap_or(d.refine.max_sweeps),
                min_seed_size: self
                    .min_seed_size
                    .or(file.min_seed_size)
                    .unwrap_or(d.refine.min_seed_size),
                relax_borders: !self.no_border_relax && file.relax_borders.unwrap_or(d.refine.relax_borders),
                merge_adjacent: !self.no_merge && file.merge_adjacent.unwrap_or(d.refine.merge_adjacent),
            },
        };
        let annotate = AnnotateConfig {
            match_threshold: self
                .match_threshold
                .or(file.match_threshold)
                .unwrap_or(a.match_threshold),
            context_threshold: self
                .context_threshold
                .or(file.context_threshold)
                .unwrap_or(a.context_threshold),
            ..a
        };
        segment.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        annotate.validate().map_err(CliError::Usage)?;
        Ok(RunConfig {
            segment,
            annotate,
            out_dir: self.out_dir.clone(),
        })
    }
}

fn prepare_out_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn labels_name(level: usize) -> String {
    format!("level_{level}.labels")
}

struct Segmented {
    pyramid: crate::pyramid::Pyramid,
    results: Vec<LevelResult>,
}

fn run_segmentation(image: &Path, cfg: &RunConfig) -> Result<Segmented, CliError> {
    let img = load_image(image)?;
    let pyramid = build_pyramid(&img, cfg.segment.top_target);
    let results =
        segment_pyramid(&pyramid, &cfg.segment.refine).map_err(|e| CliError::Data(e.to_string()))?;
    Ok(Segmented { pyramid, results })
}

fn convergence_report(results: &[LevelResult]) -> String {
    let mut out = String::new();
    for r in results {
        let history: Vec<String> = r.deviant_count_history.iter().map(|n| n.to_string()).collect();
        out.push_str(&format!(
            "level {} {}x{} regions {} converged {} deviants {}\n",
            r.level,
            r.labels.width(),
            r.labels.height(),
            r.region_count(),
            r.converged,
            history.join(",")
        ));
    }
    out
}

fn write_label_maps(dir: &Path, results: &[LevelResult], visual: bool) -> Result<(), CliError> {
    for r in results {
        write_file(&dir.join(labels_name(r.level)), r.labels.to_sidecar())?;
        if visual {
            save_image(&r.labels.to_visual(), dir.join(format!("level_{}.pgm", r.level)))?;
        }
    }
    Ok(())
}

fn cmd_segment(image: &Path, opts: &CommonOpts, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = opts.resolve()?;
    let seg = run_segmentation(image, &cfg)?;
    prepare_out_dir(&cfg.out_dir)?;
    write_label_maps(&cfg.out_dir, &seg.results, true)?;
    let report = convergence_report(&seg.results);
    write_file(&cfg.out_dir.join("report.txt"), &report)?;
    out.write_all(report.as_bytes())
        .map_err(|e| CliError::Io(e.to_string()))
}

fn describe_image(image: &Path, cfg: &RunConfig) -> Result<(DescriptionStack, Vec<LevelResult>), CliError> {
    let seg = run_segmentation(image, cfg)?;
    let stack = register_regions(&seg.results, &seg.pyramid, &cfg.segment)?;
    Ok((stack, seg.results))
}

fn cmd_describe(image: &Path, opts: &CommonOpts, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = opts.resolve()?;
    let (stack, results) = describe_image(image, &cfg)?;
    prepare_out_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join("stack.json");
    write_file(&path, stack.to_json())?;
    write_label_maps(&cfg.out_dir, &results, false)?;
    let regions: usize = stack.levels.iter().map(|l| l.regions.len()).sum();
    writeln!(
        out,
        "wrote {} ({} levels, {regions} regions)",
        path.display(),
        stack.levels.len()
    )
    .map_err(|e| CliError::Io(e.to_string()))
}

fn cmd_reconstruct(
    stack_path: &Path,
    labels_path: &Path,
    level: usize,
    out_path: &Path,
    original: Option<&Path>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let text = fs::read_to_string(stack_path).map_err(|e| io_err(stack_path, e))?;
    let stack = DescriptionStack::from_json(&text)
        .map_err(|e| CliError::Data(format!("{}: {e}", stack_path.display())))?;
    if stack.level(level).is_none() {
        return Err(CliError::Usage(format!(
            "level {level} is not in the stack (levels 0..={})",
            stack.levels.len() - 1
        )));
    }
    let label_text = fs::read_to_string(labels_path).map_err(|e| io_err(labels_path, e))?;
    let labels = LabelMap::from_sidecar(&label_text)
        .map_err(|e| CliError::Data(format!("{}: {e}", labels_path.display())))?;
    let reference = match original {
        None => None,
        Some(p) => {
            let img = load_image(p)?;
            if img.dims() != (stack.source_width, stack.source_height) {
                return Err(CliError::Data(format!(
                    "{} is {}x{}, the stack describes a {}x{} image",
                    p.display(),
                    img.width(),
                    img.height(),
                    stack.source_width,
                    stack.source_height
                )));
            }
            let pyramid = build_pyramid(&img, stack.config.top_target);
            let level_img = pyramid
                .level(level)
                .cloned()
                .ok_or_else(|| CliError::Data(format!("original has no level {level}")))?;
            Some(level_img)
        }
    };
    let rec = reconstruct(&stack, level, &labels)?;
    if let Some(parent) = out_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        prepare_out_dir(parent)?;
    }
    save_image(&rec, out_path)?;
    if let Some(reference) = reference {
        let errors: Vec<f64> = rec
            .data()
            .iter()
            .zip(reference.data())
            .map(|(a, b)| (a - b).abs())
            .collect();
        let max = errors.iter().copied().fold(0.0, f64::max);
        let mean = errors.iter().sum::<f64>() / errors.len() as f64;
        writeln!(out, "max_abs_error {max:.6}\nmean_abs_error {mean:.6}")
            .map_err(|e| CliError::Io(e.to_string()))?;
    }
    Ok(())
}

fn cmd_annotate(
    image: &Path,
    kb_path: &Path,
    opts: &CommonOpts,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let cfg = opts.resolve()?;
    let kb = load_kb(kb_path).map_err(|e| match e {
        KbError::Read { .. } => CliError::Io(e.to_string()),
        _ => CliError::Data(format!("{}:{e}", kb_path.display())),
    })?;
    let (stack, _) = describe_image(image, &cfg)?;
    let annotations = annotate(&stack, &kb, &cfg.annotate);
    let report = format_report(&annotations);
    prepare_out_dir(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join("annotations.tsv"), &report)?;
    out.write_all(report.as_bytes())
        .map_err(|e| CliError::Io(e.to_string()))
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    width: usize,
    height: usize,
    background: f64,
    rects: &[RectSpec],
    noise: u32,
    seed: u64,
    out_dir: &Path,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let (img, truth) = synth_scene(width, height, rects, background, noise, seed)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    prepare_out_dir(out_dir)?;
    save_image(&img, out_dir.join("image.pgm"))?;
    write_file(&out_dir.join("truth.labels"), truth.to_sidecar())?;
    writeln!(
        out,
        "wrote {}x{} scene with {} regions",
        width,
        height,
        truth.region_count()
    )
    .map_err(|e| CliError::Io(e.to_string()))
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Segment { image, opts } => cmd_segment(image, opts, out),
        Command::Describe { image, opts } => cmd_describe(image, opts, out),
        Command::Reconstruct {
            stack,
            labels,
            level,
            out: out_path,
            original,
        } => cmd_reconstruct(stack, labels, *level, out_path, original.as_deref(), out),
        Command::Annotate { image, kb, opts } => cmd_annotate(image, kb, opts, out),
        Command::Synth {
            width,
            height,
            background,
            rects,
            noise,
            seed,
            out_dir,
        } => cmd_synth(*width, *height, *background, rects, *noise, *seed, out_dir, out),
    }
}

/// Runs one invocation, writing normal output to `out`.
pub fn run_with<I, T>(args: I, out: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string()))?;
    dispatch(&cli, out)
}

/// Entry point for the binary: returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // --help and --version are not failures
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    match dispatch(&cli, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("strata: {e}");
            e.exit_code()
        }
    }
}
