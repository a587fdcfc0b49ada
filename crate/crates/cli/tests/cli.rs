use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ctlesion::cyclegan::LOSS_CSV_HEADER;
use ctlesion::imgvol::{read_manifest, read_mask, read_volume, write_mask, BinaryMask, Grid};
use ctlesion::metrics::TABLE_HEADER;
use ctlesion::nets::{DiscriminatorConfig, GeneratorConfig};
use ctlesion::phantom::{read_dataset, PhantomSpec};
use ctlesion::pipeline::{preprocess, segment_volume};
use ctlesion::postproc::Method;
use ctlesion_cli::{read_segment_record, CliError, RunConfig, SegmentCase, SegmentRecord, SEGMENT_FILE};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctlesion"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A configuration small enough to train in seconds.
fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::phantom();
    cfg.seed = 3;
    cfg.phantom.spec = PhantomSpec {
        size: 32,
        lesion_radius: [2.0, 4.0],
        ..PhantomSpec::default()
    };
    cfg.phantom.train_healthy = 2;
    cfg.phantom.train_infected = 2;
    cfg.phantom.test = 2;
    cfg.imgvol.crop_side = 32;
    cfg.nets.generator = GeneratorConfig {
        stages: 5,
        base_channels: 4,
        max_channels: 8,
        input_side: 32,
        ..GeneratorConfig::phantom()
    };
    cfg.nets.discriminator = DiscriminatorConfig {
        channels: vec![4, 8, 8, 8, 1],
        ..DiscriminatorConfig::phantom()
    };
    cfg.cyclegan.train.epochs = 2;
    cfg.cyclegan.train.decay_start_epoch = 1;
    cfg.cyclegan.train.crop_side = 32;
    cfg.resolved()
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let path = dir.join("run.json");
    fs::write(&path, cfg.to_json()).unwrap();
    path
}

/// Every file under `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

#[test]
fn config_round_trips_and_presets_validate() {
    let cfg = RunConfig::phantom();
    assert_eq!(RunConfig::parse(&cfg.to_json()).unwrap(), cfg);
    RunConfig::paper().validate().unwrap();
    assert_eq!(RunConfig::paper().cyclegan.weights.lambda_cycle, 10.0);
    assert_eq!(RunConfig::paper().cyclegan.weights.lambda_identity, 5.0);
    assert_eq!(RunConfig::paper().cyclegan.train.lr0, 2e-4);
    // Sections may be omitted.
    assert_eq!(RunConfig::parse("{}").unwrap(), cfg);
}

#[test]
fn seed_reaches_every_section() {
    let cfg = RunConfig::parse(r#"{"seed": 41}"#).unwrap();
    assert_eq!((cfg.cyclegan.train.seed, cfg.postproc.seed), (41, 41));
    assert_eq!(RunConfig::phantom().with_seed(9).cyclegan.train.seed, 9);
}

#[test]
fn bad_configs_are_rejected() {
    for text in [
        r#"{"colour": 1}"#,
        r#"{"postproc": {"method": "kmeans", "median_window": 4, "sigma": 1.0, "k": 2, "restarts": 10, "seed": 0, "min_contrast": 0.1}}"#,
        r#"{"imgvol": {"window": [-800, 100], "spacing": 1.0, "crop_side": 32}}"#,
    ] {
        let e = RunConfig::parse(text).unwrap_err();
        assert_eq!(e.exit_code(), 1, "{text}: {e}");
    }
    let mut cfg = RunConfig::phantom();
    cfg.phantom.spec.lesion_hu = [-720.0, -300.0];
    assert!(matches!(cfg.validate(), Err(CliError::Core(_))));
    assert_eq!(cfg.validate().unwrap_err().exit_code(), 1);
}

#[test]
fn config_subcommand_prints_the_echo() {
    let out = bin(&["config"]);
    assert_eq!(code(&out), 0);
    let cfg = RunConfig::parse(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg, RunConfig::phantom());
    let out = bin(&["config", "--preset", "paper", "--seed", "5"]);
    let cfg = RunConfig::parse(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg, RunConfig::paper().with_seed(5));
    assert_eq!(code(&bin(&["--help"])), 0);
    assert_eq!(code(&bin(&["frobnicate"])), 1);
}

#[test]
fn invalid_lesion_range_exits_before_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.phantom.spec.lesion_hu = [-300.0, -600.0];
    // Bypass validation to write the broken file.
    let path = tmp.path().join("bad.json");
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let data = tmp.path().join("data");
    let out = bin(&["--config", p(&path), "phantom", "--out", p(&data)]);
    assert_eq!(code(&out), 1);
    assert!(!data.exists());
}

#[test]
fn missing_manifest_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin(&["train", "--data", p(&tmp.path().join("nowhere")), "--out", p(&tmp.path().join("run"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn preprocess_writes_lung_slices() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let conf = write_config(tmp.path(), &cfg);
    let data = tmp.path().join("data");
    assert_eq!(code(&bin(&["--config", p(&conf), "phantom", "--out", p(&data)])), 0);
    let ds = read_dataset(&data).unwrap();
    let t = ds.tests().next().unwrap();
    let volume = data.join(t.volume.as_ref().unwrap());
    let lung_path = data.join(t.lung.as_ref().unwrap());
    let out = tmp.path().join("pre");
    let run = bin(&[
        "--config", p(&conf), "preprocess", "--volume", p(&volume), "--mask", p(&lung_path), "--out", p(&out),
    ]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let slices = read_manifest(out.join("manifest.json")).unwrap();
    let lung = read_mask(&lung_path).unwrap();
    let (lo, hi) = lung.bounding_box().unwrap();
    assert_eq!(slices.len(), hi[2] - lo[2] + 1);
    for (_, s) in &slices {
        assert_eq!((s.height, s.width), (32, 32));
        assert!(s.data.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    // A mask on another grid is refused.
    let g = Grid::new([31, 32, 32], [1.0; 3], [0.0; 3]).unwrap();
    let other = tmp.path().join("other_mask.json");
    write_mask(&BinaryMask::zeros(g).unwrap(), &other).unwrap();
    let run = bin(&["--config", p(&conf), "preprocess", "--volume", p(&volume), "--mask", p(&other), "--out", p(&out)]);
    assert_eq!(code(&run), 1);
}

#[test]
fn identical_synthesis_finds_nothing() {
    let cfg = tiny_config();
    let inf = ctlesion::phantom::gen_infected(&cfg.phantom.spec.with_seed(8)).unwrap();
    let prep = preprocess(&inf.volume, &inf.lung, &cfg.imgvol, "same").unwrap();
    let mask = segment_volume(&prep, |s| Ok(s.clone()), &cfg.postproc).unwrap();
    assert!(mask.is_empty());
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let conf = write_config(tmp.path(), &cfg);
    let c = p(&conf);
    let data = tmp.path().join("data");
    let data2 = tmp.path().join("data2");
    for d in [&data, &data2] {
        let out = bin(&["--config", c, "phantom", "--out", p(d)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(snapshot(&data), snapshot(&data2));
    let ds = read_dataset(&data).unwrap();
    let echo = RunConfig::load(&data.join("config.json")).unwrap();
    assert_eq!(echo, cfg);

    // Two epochs, checkpoint per epoch, one loss row per iteration.
    let run = tmp.path().join("run");
    let out = bin(&["--config", c, "train", "--data", p(&data), "--out", p(&run)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for e in ["1", "2"] {
        assert!(run.join("checkpoints").join(e).join("state.json").is_file());
    }
    let csv = fs::read_to_string(run.join("losses.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some(LOSS_CSV_HEADER));
    let per_epoch = ds.healthy_slices.min(ds.infected_slices);
    assert_eq!(csv.lines().count() - 1, 2 * per_epoch);

    // Stopping after one epoch and resuming matches the uninterrupted run.
    let mut half = cfg.clone();
    half.cyclegan.train.stop_epoch = Some(1);
    let half_conf = tmp.path().join("half.json");
    fs::write(&half_conf, half.to_json()).unwrap();
    let resumed = tmp.path().join("resumed");
    assert_eq!(code(&bin(&["--config", p(&half_conf), "train", "--data", p(&data), "--out", p(&resumed)])), 0);
    assert!(!resumed.join("checkpoints/2").exists());
    assert_eq!(code(&bin(&["--config", c, "train", "--data", p(&data), "--out", p(&resumed), "--resume"])), 0);
    let a = snapshot(&run.join("checkpoints/2"));
    let b = snapshot(&resumed.join("checkpoints/2"));
    assert_eq!(a, b);

    // Segment with overlays; the method lands in the record.
    let seg = tmp.path().join("seg");
    let out = bin(&[
        "--config", c, "segment", "--checkpoint", p(&run), "--data", p(&data), "--out", p(&seg), "--overlays",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rec = read_segment_record(&seg).unwrap();
    assert_eq!(rec.method, Method::Kmeans);
    assert_eq!(rec.epoch, Some(2));
    assert_eq!(rec.cases.len(), 2);
    for case in &rec.cases {
        let mask = read_mask(seg.join(&case.mask)).unwrap();
        let vol = read_volume(data.join(format!("test/{}_volume.json", case.id))).unwrap();
        assert_eq!(mask.dims(), vol.dims());
    }
    let seg_otsu = tmp.path().join("seg_otsu");
    let out = bin(&[
        "--config", c, "segment", "--checkpoint", p(&run), "--data", p(&data), "--out", p(&seg_otsu), "--method", "otsu",
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(read_segment_record(&seg_otsu).unwrap().method, Method::Otsu);
    assert!(!seg_otsu.join("overlays").exists());

    let eval = tmp.path().join("eval");
    let out = bin(&["--config", c, "evaluate", "--segment", p(&seg), "--out", p(&eval)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.lines().next().unwrap().ends_with(TABLE_HEADER));
    assert!(fs::read_to_string(eval.join("metrics.csv")).unwrap().starts_with("case,DSC(%),PSC(%),SEN(%)"));
    assert!(eval.join("metrics.json").is_file());
    let out = bin(&["--config", c, "regions", "--segment", p(&seg), "--out", p(&eval)]);
    assert_eq!(code(&out), 0);
    assert!(eval.join("regions.json").is_file());

    // Segmenting again reproduces every artifact byte for byte.
    let seg2 = tmp.path().join("seg2");
    let out = bin(&[
        "--config", c, "segment", "--checkpoint", p(&run), "--data", p(&data), "--out", p(&seg2), "--overlays",
    ]);
    assert_eq!(code(&out), 0);
    let mut s1 = snapshot(&seg);
    let mut s2 = snapshot(&seg2);
    s1.remove(Path::new(SEGMENT_FILE));
    s2.remove(Path::new(SEGMENT_FILE));
    assert_eq!(s1, s2);
}

#[test]
fn perfect_cohort_scores_one_hundred() {
    let tmp = tempfile::tempdir().unwrap();
    let g = Grid::new([6, 6, 6], [1.0; 3], [0.0; 3]).unwrap();
    let lung = BinaryMask::from_fn(g.clone(), |x, y, z| x > 0 && y > 0 && z > 0).unwrap();
    let mut cases = Vec::new();
    for k in 0..3usize {
        let gt = BinaryMask::from_fn(g.clone(), |x, y, z| x + y + z == 3 + k).unwrap();
        let gt_path = tmp.path().join(format!("gt{k}.json"));
        write_mask(&gt, &gt_path).unwrap();
        write_mask(&gt, tmp.path().join(format!("c{k}_lesion.json"))).unwrap();
        let lung_path = tmp.path().join(format!("lung{k}.json"));
        write_mask(&lung, &lung_path).unwrap();
        cases.push(SegmentCase {
            id: format!("c{k}"),
            mask: format!("c{k}_lesion.json"),
            lung: lung_path,
            gt: Some(gt_path),
        });
    }
    let rec = SegmentRecord {
        method: Method::Kmeans,
        checkpoint: "none".into(),
        epoch: None,
        cases,
    };
    fs::write(tmp.path().join(SEGMENT_FILE), serde_json::to_string(&rec).unwrap()).unwrap();
    let eval = tmp.path().join("eval");
    let out = bin(&["evaluate", "--segment", p(tmp.path()), "--out", p(&eval)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: ctlesion::metrics::CohortReport =
        serde_json::from_str(&fs::read_to_string(eval.join("metrics.json")).unwrap()).unwrap();
    for m in [report.dsc, report.psc, report.sen] {
        assert_eq!((m.mean, m.sd), (100.0, 0.0));
    }
    let out = bin(&["regions", "--segment", p(tmp.path()), "--out", p(&eval)]);
    assert_eq!(code(&out), 0);
    let summary: ctlesion::metrics::RegionSummary =
        serde_json::from_str(&fs::read_to_string(eval.join("regions.json")).unwrap()).unwrap();
    assert_eq!(summary.accuracy.value, 1.0);
}
