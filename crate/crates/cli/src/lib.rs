//! Command-line front end for the lesion segmentation pipeline.
//!
//! Every subcommand reads one [`RunConfig`], validates it before touching the
//! disk and writes a full echo of it next to its outputs.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ctlesion::cyclegan::{latest_checkpoint, load_checkpoint, synthesize_healthy, train, TrainState};
use ctlesion::imgvol::{
    read_manifest, read_mask, read_volume, resample_mask_isotropic, write_manifest, write_mask,
    write_overlay_png, write_slice, BinaryMask, ManifestEntry, SliceLabel,
};
use ctlesion::metrics::{divide_regions, evaluate_cohort, region_diagnosis, summarize_regions, RegionSummary};
use ctlesion::nets::{Architecture, Network};
use ctlesion::phantom::{gen_dataset, read_dataset};
use ctlesion::pipeline::{preprocess, segment_volume, Prepared};
use ctlesion::postproc::Method;
use serde::{Deserialize, Serialize};

pub use config::{Preset, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] ctlesion::Error),
}

impl CliError {
    /// 1 for bad input, 2 for failures at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Core(e) if e.is_validation() => 1,
            CliError::Core(_) => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "ctlesion", version, about = "Unsupervised lung lesion segmentation by healthy-image synthesis")]
pub struct Cli {
    /// JSON run configuration; phantom-scale defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the resolved configuration.
    Config {
        #[arg(long, value_enum)]
        preset: Option<Preset>,
    },
    /// Generate a synthetic training and test set.
    Phantom {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Window, mask and crop one volume into a slice manifest.
    Preprocess {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Volume id; defaults to the file stem.
        #[arg(long)]
        id: Option<String>,
    },
    /// Train the translation networks on a generated dataset.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the latest checkpoint under `out`.
        #[arg(long)]
        resume: bool,
    },
    /// Segment test volumes with a trained generator.
    Segment(SegmentArgs),
    /// Overlap metrics of a segmentation run.
    Evaluate {
        #[arg(long)]
        segment: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-region lesion detection of a segmentation run.
    Regions {
        #[arg(long)]
        segment: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    /// A checkpoint directory, or a run directory to take the latest one from.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset whose test volumes are segmented.
    #[arg(long, conflicts_with = "volume")]
    pub data: Option<PathBuf>,
    /// A single volume to segment instead of a dataset.
    #[arg(long, requires = "lung")]
    pub volume: Option<PathBuf>,
    /// Lung mask for `--volume`.
    #[arg(long)]
    pub lung: Option<PathBuf>,
    /// Ground-truth lesion mask for `--volume`.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Case id for `--volume`; defaults to the file stem.
    #[arg(long)]
    pub id: Option<String>,
    /// Binarization method; overrides the configured one.
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also render contour overlays for slices with lesions.
    #[arg(long)]
    pub overlays: bool,
}

pub const CONFIG_ECHO: &str = "config.json";
pub const SEGMENT_FILE: &str = "segment.json";

/// One segmented case; `mask` is relative to the segment directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentCase {
    pub id: String,
    pub mask: String,
    pub lung: PathBuf,
    pub gt: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentRecord {
    pub method: Method,
    pub checkpoint: PathBuf,
    pub epoch: Option<usize>,
    pub cases: Vec<SegmentCase>,
}

pub fn load_config(cli: &Cli) -> Result<RunConfig> {
    let cfg = match (&cli.config, &cli.command) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Command::Config { preset: Some(p) }) => RunConfig::preset(*p),
        (None, _) => RunConfig::phantom(),
    };
    let cfg = match cli.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg.resolved(),
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Config { .. } => {
            println!("{}", cfg.to_json());
            Ok(())
        }
        Command::Phantom { out } => cmd_phantom(&cfg, out.as_deref().unwrap_or(&cfg.paths.data)),
        Command::Preprocess { volume, mask, out, id } => cmd_preprocess(&cfg, &volume, &mask, &out, id),
        Command::Train { data, out, resume } => cmd_train(
            &cfg,
            data.as_deref().unwrap_or(&cfg.paths.data),
            out.as_deref().unwrap_or(&cfg.paths.run),
            resume,
        ),
        Command::Segment(args) => cmd_segment(&cfg, args),
        Command::Evaluate { segment, out } => cmd_evaluate(
            &cfg,
            segment.as_deref().unwrap_or(&cfg.paths.segment),
            out.as_deref().unwrap_or(&cfg.paths.eval),
        ),
        Command::Regions { segment, out } => cmd_regions(
            &cfg,
            segment.as_deref().unwrap_or(&cfg.paths.segment),
            out.as_deref().unwrap_or(&cfg.paths.eval),
        ),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(ctlesion::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    write_text(&dir.join(CONFIG_ECHO), &cfg.to_json())
}

pub fn cmd_phantom(cfg: &RunConfig, out: &Path) -> Result<()> {
    let p = &cfg.phantom;
    let m = gen_dataset(&p.spec, cfg.seed, p.train_healthy, p.train_infected, p.test, &cfg.imgvol, out)?;
    echo_config(cfg, out)?;
    println!(
        "{}: {} volumes, {} healthy and {} infected training slices, {} test volumes",
        out.display(),
        m.volumes.len(),
        m.healthy_slices,
        m.infected_slices,
        m.tests().count()
    );
    Ok(())
}

pub fn cmd_preprocess(cfg: &RunConfig, volume: &Path, mask: &Path, out: &Path, id: Option<String>) -> Result<()> {
    let id = id.unwrap_or_else(|| {
        volume
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "volume".into())
    });
    let vol = read_volume(volume)?;
    let lung = read_mask(mask)?;
    let prep = preprocess(&vol, &lung, &cfg.imgvol, &id)?;
    let slices = prep.slices()?;
    let mut entries = Vec::with_capacity(slices.len());
    for s in &slices {
        let z = s.provenance.slice_index;
        let rel = format!("slices/{id}_z{z:03}.json");
        write_slice(s, out.join(&rel))?;
        entries.push(ManifestEntry {
            path: rel,
            slice_index: z,
            label: SliceLabel::Unknown,
        });
    }
    write_manifest(&entries, out.join("manifest.json"))?;
    echo_config(cfg, out)?;
    println!("{id}: {} slices -> {}", entries.len(), out.join("manifest.json").display());
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, resume: bool) -> Result<()> {
    let setup = cfg.setup();
    let dataset = read_dataset(data)?;
    let infected: Vec<_> = read_manifest(data.join(&dataset.infected_manifest))?.into_iter().map(|(_, s)| s).collect();
    let healthy: Vec<_> = read_manifest(data.join(&dataset.healthy_manifest))?.into_iter().map(|(_, s)| s).collect();
    let mut state = match latest_checkpoint(out).filter(|_| resume) {
        Some((epoch, dir)) => {
            log::info!("resuming from epoch {epoch}");
            load_checkpoint(&dir, &setup)?
        }
        None => TrainState::new(&setup)?,
    };
    echo_config(cfg, out)?;
    log::info!("training on {} infected and {} healthy slices", infected.len(), healthy.len());
    train(&setup, &infected, &healthy, &mut state, Some(out), |_| {})?;
    println!("{}: {} epochs, {} iterations", out.display(), state.epoch, state.iteration);
    Ok(())
}

/// Resolve `path` to a checkpoint directory and load its infected-to-healthy generator.
fn load_generator(cfg: &RunConfig, path: &Path) -> Result<(PathBuf, Option<usize>, Network<f32>)> {
    let (dir, epoch) = if path.join("generator_xy.json").is_file() {
        (path.to_path_buf(), path.file_name().and_then(|n| n.to_str()?.parse().ok()))
    } else {
        match latest_checkpoint(path) {
            Some((epoch, dir)) => (dir, Some(epoch)),
            None => return Err(CliError::Config(format!("no checkpoint under {}", path.display()))),
        }
    };
    let arch = Architecture::Generator(cfg.nets.generator.clone());
    let g = Network::load(dir.join("generator_xy.json"), &arch)?;
    Ok((dir, epoch, g))
}

struct Case {
    id: String,
    volume: PathBuf,
    lung: PathBuf,
    gt: Option<PathBuf>,
}

fn segment_cases(args: &SegmentArgs, cfg: &RunConfig) -> Result<Vec<Case>> {
    if let Some(volume) = &args.volume {
        let id = args.id.clone().unwrap_or_else(|| {
            volume
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "volume".into())
        });
        let lung = args.lung.clone().expect("clap requires --lung");
        return Ok(vec![Case {
            id,
            volume: volume.clone(),
            lung,
            gt: args.gt.clone(),
        }]);
    }
    let data = args.data.as_deref().unwrap_or(&cfg.paths.data);
    let dataset = read_dataset(data)?;
    let rel = |p: &Option<String>, what: &str, id: &str| {
        p.as_ref()
            .map(|p| data.join(p))
            .ok_or_else(|| CliError::Config(format!("test volume {id} has no {what} file")))
    };
    dataset
        .tests()
        .map(|t| {
            Ok(Case {
                id: t.id.clone(),
                volume: rel(&t.volume, "volume", &t.id)?,
                lung: rel(&t.lung, "lung", &t.id)?,
                gt: Some(rel(&t.lesion, "lesion", &t.id)?),
            })
        })
        .collect()
}

/// Bring a mask onto the prepared grid of the segmentation.
fn on_grid(mask: BinaryMask, like: &BinaryMask, spacing: f64) -> Result<BinaryMask> {
    let mask = if mask.grid() == like.grid() {
        mask
    } else {
        resample_mask_isotropic(&mask, spacing)?
    };
    mask.grid().ensure_same(like.grid())?;
    Ok(mask)
}

fn write_overlays(prep: &Prepared, pred: &BinaryMask, gt: Option<&BinaryMask>, dir: &Path) -> Result<()> {
    let Some(window) = &prep.window else {
        return Ok(());
    };
    for z in window.slices() {
        let p = window.crop_mask(pred, z);
        let t = gt.map(|g| window.crop_mask(g, z));
        if p.is_empty() && t.as_ref().is_none_or(|t| t.is_empty()) {
            continue;
        }
        let img = window.crop_image(&prep.normalized, &prep.lung, z)?;
        write_overlay_png(&img, &p, t.as_ref(), dir.join(format!("{}_z{z:03}.png", prep.id)))?;
    }
    Ok(())
}

pub fn cmd_segment(cfg: &RunConfig, args: SegmentArgs) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(m) = args.method {
        cfg.postproc.method = m;
    }
    let out = args.out.clone().unwrap_or_else(|| cfg.paths.segment.clone());
    let ckpt = args.checkpoint.clone().unwrap_or_else(|| cfg.paths.run.clone());
    let (ckpt_dir, epoch, g_xy) = load_generator(&cfg, &ckpt)?;
    let cases = segment_cases(&args, &cfg)?;
    let mut record = SegmentRecord {
        method: cfg.postproc.method,
        checkpoint: ckpt_dir,
        epoch,
        cases: Vec::with_capacity(cases.len()),
    };
    for case in cases {
        let vol = read_volume(&case.volume)?;
        let lung = read_mask(&case.lung)?;
        let prep = preprocess(&vol, &lung, &cfg.imgvol, &case.id)?;
        let pred = segment_volume(&prep, |s| Ok(synthesize_healthy(&g_xy, s)?), &cfg.postproc)?;
        let mask_rel = format!("{}_lesion.json", case.id);
        write_mask(&pred, out.join(&mask_rel))?;
        if args.overlays {
            let gt = match &case.gt {
                Some(p) => Some(on_grid(read_mask(p)?, &pred, cfg.imgvol.spacing)?),
                None => None,
            };
            write_overlays(&prep, &pred, gt.as_ref(), &out.join("overlays"))?;
        }
        log::info!("{}: {} lesion voxels", case.id, pred.count());
        record.cases.push(SegmentCase {
            id: case.id,
            mask: mask_rel,
            lung: case.lung,
            gt: case.gt,
        });
    }
    let json = serde_json::to_string_pretty(&record).map_err(ctlesion::Error::from)?;
    write_text(&out.join(SEGMENT_FILE), &json)?;
    echo_config(&cfg, &out)?;
    println!("{}: {} cases segmented with {}", out.display(), record.cases.len(), record.method);
    Ok(())
}

pub fn read_segment_record(dir: &Path) -> Result<SegmentRecord> {
    let path = dir.join(SEGMENT_FILE);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        CliError::Core(ctlesion::Error::Format {
            path,
            reason: e.to_string(),
        })
    })
}

/// Predicted masks with ground truth and lung on the same grid.
fn load_triples(cfg: &RunConfig, dir: &Path) -> Result<Vec<(String, BinaryMask, BinaryMask, BinaryMask)>> {
    let record = read_segment_record(dir)?;
    record
        .cases
        .iter()
        .map(|c| {
            let pred = read_mask(dir.join(&c.mask))?;
            let gt = c
                .gt
                .as_ref()
                .ok_or_else(|| CliError::Config(format!("case {} has no ground truth", c.id)))?;
            let gt = on_grid(read_mask(gt)?, &pred, cfg.imgvol.spacing)?;
            let lung = on_grid(read_mask(&c.lung)?, &pred, cfg.imgvol.spacing)?;
            Ok((c.id.clone(), pred, gt, lung))
        })
        .collect()
}

pub fn cmd_evaluate(cfg: &RunConfig, segment: &Path, out: &Path) -> Result<()> {
    let triples = load_triples(cfg, segment)?;
    let cases: Vec<_> = triples.iter().map(|(id, p, g, _)| (id.clone(), p, g)).collect();
    let report = evaluate_cohort(&cases)?;
    let json = serde_json::to_string_pretty(&report).map_err(ctlesion::Error::from)?;
    write_text(&out.join("metrics.csv"), &report.to_csv())?;
    write_text(&out.join("metrics.json"), &json)?;
    let table = report.to_table();
    write_text(&out.join("metrics.txt"), &table)?;
    echo_config(cfg, out)?;
    print!("{table}");
    Ok(())
}

fn regions_table(s: &RegionSummary) -> String {
    let rate = |r: ctlesion::metrics::Rate| {
        if r.defined {
            format!("{:.2}", r.value)
        } else {
            format!("{:.2}*", r.value)
        }
    };
    let c = &s.confusion;
    format!(
        "patients {}  regions {}  TP {} FP {} TN {} FN {}\nAccuracy Precision Sensitivity\n{:>8} {:>9} {:>11}\n",
        s.patients,
        c.total(),
        c.tp,
        c.fp,
        c.tn,
        c.fn_,
        rate(s.accuracy),
        rate(s.precision),
        rate(s.sensitivity)
    )
}

pub fn cmd_regions(cfg: &RunConfig, segment: &Path, out: &Path) -> Result<()> {
    let triples = load_triples(cfg, segment)?;
    let mut diagnoses = Vec::with_capacity(triples.len());
    for (_, pred, gt, lung) in &triples {
        let regions = divide_regions(lung, cfg.metrics.regions)?;
        diagnoses.push(region_diagnosis(pred, gt, &regions, cfg.metrics.min_voxels)?);
    }
    let summary = summarize_regions(&diagnoses);
    let json = serde_json::to_string_pretty(&summary).map_err(ctlesion::Error::from)?;
    write_text(&out.join("regions.json"), &json)?;
    let table = regions_table(&summary);
    write_text(&out.join("regions.txt"), &table)?;
    echo_config(cfg, out)?;
    print!("{table}");
    Ok(())
}
