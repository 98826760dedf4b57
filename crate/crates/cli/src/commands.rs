//! The pipeline stages behind each subcommand. Every function here is
//! deterministic given its config (seed included) and inputs.

use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use maff_core::augment::{augment_frame, build_gt_database, load_gt_database, write_gt_database, GtSampleDatabase};
use maff_core::dataset::{image_path, load_dataset, Frame, KittiFrame, LoadOptions, VEHICLE_CLASS};
use maff_core::diffcore::{checkpoint, named_params};
use maff_core::evalkit::{evaluate, load_eval_frames, EvalReport};
use maff_core::kittio::{format_labels, load_image, GroundTruthLabel};
use maff_core::net::{infer, train_step, Adam, Detector, LossReport};
use maff_core::parallel::par_map;
use maff_core::synthetic::generate_scene;
use maff_core::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_LOG_FILE: &str = "loss.csv";
pub const LOSS_LOG_HEADER: &str = "step,total,loc,cls,dir,n_pos";
pub const REPORT_TABLE_FILE: &str = "report.txt";
pub const REPORT_MACHINE_FILE: &str = "report.machine";
/// Image size assumed for the 2D boxes of result rows when a frame has no
/// image on disk.
pub const FALLBACK_IMAGE_SIZE: (usize, usize) = (1242, 375);

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("data.{key} is not set")))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

/// Writes `cfg.synth.frames` synthetic frames in KITTI layout.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<usize> {
    for i in 0..cfg.synth.frames {
        let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        generate_scene(&cfg.synth.scene, seed, &format!("{i:06}"))?.write(out)?;
    }
    info!("wrote {} synthetic frames to {}", cfg.synth.frames, out.display());
    Ok(cfg.synth.frames)
}

/// Crops every vehicle of the training set into a database file. Colours
/// are attached whenever the set ships images.
pub fn cmd_build_db(cfg: &RunConfig, out: &Path) -> Result<GtSampleDatabase> {
    let root = require(&cfg.data.train_dir, "train_dir")?;
    let opts = LoadOptions { images: root.join("image_2").is_dir(), labels: true };
    let frames: Vec<Frame> = load_dataset(root, opts)?.into_iter().map(|k| k.frame).collect();
    let db = build_gt_database(&frames);
    write_gt_database(&db, out)?;
    println!("{} objects from {} frames -> {}", db.len(), frames.len(), out.display());
    Ok(db)
}

fn load_options(cfg: &RunConfig, labels: bool) -> LoadOptions {
    LoadOptions { images: cfg.model.fusion.uses_image(), labels }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub last: LossReport,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
}

fn csv_row(step: usize, r: &LossReport) -> String {
    format!("{step},{},{},{},{},{}", r.total, r.loc, r.cls, r.dir, r.n_pos)
}

/// Trains from scratch on `data.train_dir`, writing the loss log as it goes
/// and the checkpoint at the end. A non-finite loss stops the run; the
/// parameters from before the failing step are saved and the error is
/// returned.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    let root = require(&cfg.data.train_dir, "train_dir")?;
    let frames: Vec<Frame> = load_dataset(root, load_options(cfg, true))?.into_iter().map(|k| k.frame).collect();
    let db = match &cfg.data.gt_database {
        Some(p) if cfg.augment.enabled && cfg.augment.max_pasted > 0 => Some(load_gt_database(p)?),
        _ => None,
    };
    train_frames(cfg, &frames, db.as_ref(), out)
}

/// Training loop over in-memory frames.
pub fn train_frames(cfg: &RunConfig, frames: &[Frame], db: Option<&GtSampleDatabase>, out: &Path) -> Result<TrainSummary> {
    if frames.is_empty() {
        return Err(Error::EmptySet("no training frames".into()));
    }
    create_dir(out)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let log_path = out.join(LOSS_LOG_FILE);
    let mut log = std::io::BufWriter::new(
        std::fs::File::create(&log_path).map_err(|e| Error::Io { path: log_path.clone(), source: e })?,
    );
    let io = |e| Error::Io { path: log_path.clone(), source: e };
    writeln!(log, "{LOSS_LOG_HEADER}").map_err(io)?;

    let mut det = Detector::new(cfg.model.clone(), cfg.seed)?;
    let mut opt = Adam::new(cfg.train.optimizer);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f0d);
    let mut order: Vec<usize> = Vec::new();
    let mut last = LossReport { total: f64::NAN, loc: f64::NAN, cls: f64::NAN, dir: f64::NAN, n_pos: 0 };
    for step in 0..cfg.train.steps {
        let mut batch = Vec::with_capacity(cfg.train.batch_size);
        for k in 0..cfg.train.batch_size {
            if order.is_empty() {
                order = (0..frames.len()).collect();
                order.shuffle(&mut order_rng);
            }
            let i = order.pop().expect("refilled above");
            let aug_seed = cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add((step * cfg.train.batch_size + k) as u64);
            batch.push(augment_frame(&frames[i], db, &cfg.augment, aug_seed)?);
        }
        let good = checkpoint::state_dict(&det);
        let outcome = train_step(&mut det, &mut opt, &batch, cfg.seed.wrapping_add(step as u64)).and_then(|r| {
            match named_params(&det).iter().find(|(_, t)| t.data().iter().any(|v| !v.is_finite())) {
                Some((name, _)) => Err(Error::Numeric(format!("{name} became non-finite at step {step}"))),
                None => Ok(r),
            }
        });
        let report = match outcome {
            Ok(r) => r,
            Err(e @ Error::Numeric(_)) => {
                log.flush().map_err(io)?;
                checkpoint::load_state_dict(&mut det, &good)?;
                checkpoint::save(&det, &ckpt)?;
                warn!("stopped at step {step}; last good parameters saved to {}", ckpt.display());
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        writeln!(log, "{}", csv_row(step, &report)).map_err(io)?;
        if step % 50 == 0 || step + 1 == cfg.train.steps {
            info!("step {step} loss {:.5} (n_pos {})", report.total, report.n_pos);
        }
        last = report;
    }
    log.flush().map_err(io)?;
    checkpoint::save(&det, &ckpt)?;
    Ok(TrainSummary { steps: cfg.train.steps, last, checkpoint: ckpt, loss_log: log_path })
}

fn image_size(root: &Path, id: &str) -> Result<(usize, usize)> {
    let p = image_path(root, id);
    if p.is_file() {
        let img = load_image(&p)?;
        Ok((img.width(), img.height()))
    } else {
        Ok(FALLBACK_IMAGE_SIZE)
    }
}

/// Result rows for one frame, by descending score.
pub fn frame_results(det: &Detector, cfg: &RunConfig, kf: &KittiFrame, size: (usize, usize)) -> Result<Vec<GroundTruthLabel>> {
    Ok(infer(det, &kf.frame, &cfg.infer)?
        .iter()
        .map(|d| GroundTruthLabel::from_box3d(VEHICLE_CLASS, &d.bbox, &kf.calib, size, Some(d.score)))
        .collect())
}

/// Runs the checkpoint over every frame of `frames_dir` (default
/// `data.val_dir`) and writes `<out>/<id>.txt` per frame.
pub fn cmd_infer(cfg: &RunConfig, ckpt: &Path, frames_dir: Option<&Path>, out: &Path, workers: usize) -> Result<usize> {
    let root = match frames_dir {
        Some(p) => p,
        None => require(&cfg.data.val_dir, "val_dir")?,
    };
    let mut det = Detector::new(cfg.model.clone(), cfg.seed)?;
    checkpoint::load(&mut det, ckpt)?;
    let frames = load_dataset(root, load_options(cfg, false))?;
    create_dir(out)?;
    let rows = par_map(&frames, workers, |kf| {
        let size = image_size(root, &kf.frame.id)?;
        frame_results(&det, cfg, kf, size)
    });
    let mut total = 0;
    for (kf, r) in frames.iter().zip(rows) {
        let r = r?;
        total += r.len();
        write_file(&out.join(format!("{}.txt", kf.frame.id)), format_labels(&r).as_bytes())?;
    }
    info!("{total} detections over {} frames -> {}", frames.len(), out.display());
    Ok(frames.len())
}

/// Scores result files against label files. With `out` set, writes the
/// table and the machine-readable report there.
pub fn cmd_eval(cfg: &RunConfig, results: &Path, labels: &Path, out: Option<&Path>, workers: usize) -> Result<EvalReport> {
    let frames = load_eval_frames(results, labels)?;
    let report = evaluate(&frames, &cfg.eval, workers)?;
    if let Some(dir) = out {
        create_dir(dir)?;
        write_file(&dir.join(REPORT_TABLE_FILE), report.to_table().as_bytes())?;
        write_file(&dir.join(REPORT_MACHINE_FILE), report.to_machine().as_bytes())?;
    }
    Ok(report)
}

/// `--strict`: any recall position no precision is defined at fails.
pub fn check_strict(report: &EvalReport) -> Result<()> {
    let bad = report.unreachable();
    if bad.is_empty() {
        return Ok(());
    }
    let list: Vec<String> = bad
        .iter()
        .map(|r| format!("{} {} recall {}", r.kind.name(), r.difficulty.name(), r.recall))
        .collect();
    Err(Error::Undefined(format!("unreachable recall positions: {}", list.join("; "))))
}
