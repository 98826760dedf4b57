use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::*;
use crate::kittio::load_labels;
use crate::parallel::par_map;

/// Detections and annotations of one frame, both as label rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalFrame {
    pub id: String,
    pub detections: Vec<GroundTruthLabel>,
    pub labels: Vec<GroundTruthLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub iou_threshold: f64,
    pub recall_positions: Vec<f64>,
    /// Thresholds of the TP/FP table.
    pub score_thresholds: Vec<f64>,
    pub bg_iou_cutoff: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            recall_positions: RECALL_POSITIONS.to_vec(),
            score_thresholds: vec![0.4, 0.1],
            bg_iou_cutoff: DEFAULT_BG_IOU_CUTOFF,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Config(format!("iou_threshold {} outside (0, 1]", self.iou_threshold)));
        }
        if self.recall_positions.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return Err(Error::Config("recall positions must lie in (0, 1]".into()));
        }
        if self.score_thresholds.iter().any(|s| !s.is_finite()) || !self.bg_iou_cutoff.is_finite() {
            return Err(Error::Config("score thresholds and background cutoff must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApRow {
    pub kind: IouKind,
    pub difficulty: Difficulty,
    /// `None` when the difficulty has no ground truth.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionRow {
    pub kind: IouKind,
    pub difficulty: Difficulty,
    pub recall: f64,
    /// `None` when the recall is unreachable.
    pub precision: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FpRow {
    pub score_threshold: f64,
    pub counts: FpCounts,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub ap: Vec<ApRow>,
    pub precision: Vec<PrecisionRow>,
    pub fp: Vec<FpRow>,
    pub bg_iou_cutoff: f64,
}

/// Scores every frame at every difficulty for both IoU kinds. The TP/FP
/// table uses 3D IoU with every vehicle counted.
pub fn evaluate(frames: &[EvalFrame], opts: &EvalOptions, workers: usize) -> Result<EvalReport> {
    opts.validate()?;
    struct Prepared {
        dets: Vec<ScoredBox>,
        labels: Vec<GroundTruthLabel>,
        dont_care: Vec<Box3D>,
        objects: Vec<Box3D>,
    }
    let prepared: Vec<Prepared> = frames
        .iter()
        .map(|f| Prepared {
            dets: scored_detections(&f.detections),
            dont_care: dont_care_boxes(&f.labels),
            objects: object_boxes(&f.labels),
            labels: f.labels.clone(),
        })
        .collect();

    let mut report = EvalReport { bg_iou_cutoff: opts.bg_iou_cutoff, ..EvalReport::default() };
    for kind in IouKind::ALL {
        for d in Difficulty::ALL {
            let results = par_map(&prepared, workers, |p| {
                match_frame(&p.dets, &eval_gts(&p.labels, Some(d)), &p.dont_care, |a, b| kind.iou(a, b), opts.iou_threshold)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let curve = pr_curve(&results).ok();
            report.ap.push(ApRow { kind, difficulty: d, ap: curve.as_ref().map(ap40_curve) });
            for &r in &opts.recall_positions {
                let precision = curve.as_ref().and_then(|c| c.interpolated_precision(r));
                report.precision.push(PrecisionRow { kind, difficulty: d, recall: r, precision });
            }
        }
    }
    for &t in &opts.score_thresholds {
        let per_frame = par_map(&prepared, workers, |p| {
            fp_accounting(
                &p.dets,
                &eval_gts(&p.labels, None),
                &p.objects,
                &p.dont_care,
                t,
                opts.bg_iou_cutoff,
                IouKind::ThreeD,
                opts.iou_threshold,
            )
        });
        let mut counts = FpCounts::default();
        for c in per_frame {
            counts += c?;
        }
        report.fp.push(FpRow { score_threshold: t, counts });
    }
    Ok(report)
}

fn txt_ids(dir: &Path) -> Result<BTreeSet<String>> {
    if !dir.is_dir() {
        return Err(Error::MissingPaths(vec![dir.to_path_buf()]));
    }
    let mut ids = BTreeSet::new();
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "txt") {
            if let Some(s) = p.file_stem().and_then(|s| s.to_str()) {
                ids.insert(s.to_string());
            }
        }
    }
    Ok(ids)
}

/// Pairs `results_dir/<id>.txt` with `labels_dir/<id>.txt`. Any id present
/// on one side only is reported as the missing file on the other.
pub fn load_eval_frames(results_dir: &Path, labels_dir: &Path) -> Result<Vec<EvalFrame>> {
    let res = txt_ids(results_dir)?;
    let lab = txt_ids(labels_dir)?;
    let mut missing: Vec<PathBuf> = lab.difference(&res).map(|id| results_dir.join(format!("{id}.txt"))).collect();
    missing.extend(res.difference(&lab).map(|id| labels_dir.join(format!("{id}.txt"))));
    if !missing.is_empty() {
        return Err(Error::MissingPaths(missing));
    }
    if lab.is_empty() {
        return Err(Error::EmptySet(format!("no label files in {}", labels_dir.display())));
    }
    lab.iter()
        .map(|id| {
            Ok(EvalFrame {
                id: id.clone(),
                detections: load_labels(&results_dir.join(format!("{id}.txt")))?,
                labels: load_labels(&labels_dir.join(format!("{id}.txt")))?,
            })
        })
        .collect()
}

fn opt_value(v: Option<f64>, none: &str) -> String {
    v.map_or(none.to_string(), |x| x.to_string())
}

fn pct(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |x| format!("{:.2}", 100.0 * x))
}

impl EvalReport {
    pub fn ap(&self, kind: IouKind, d: Difficulty) -> Option<f64> {
        self.ap.iter().find(|r| r.kind == kind && r.difficulty == d).and_then(|r| r.ap)
    }

    pub fn precision_at(&self, kind: IouKind, d: Difficulty, recall: f64) -> Option<f64> {
        self.precision
            .iter()
            .find(|r| r.kind == kind && r.difficulty == d && r.recall == recall)
            .and_then(|r| r.precision)
    }

    pub fn unreachable(&self) -> Vec<PrecisionRow> {
        self.precision.iter().filter(|r| r.precision.is_none()).copied().collect()
    }

    /// One whitespace-separated record per line; values are fractions in
    /// shortest round-trip form.
    pub fn to_machine(&self) -> String {
        let mut s = String::new();
        for r in &self.ap {
            let _ = writeln!(s, "ap40 {} {} {}", r.kind.name(), r.difficulty.name(), opt_value(r.ap, "undefined"));
        }
        for r in &self.precision {
            let _ = writeln!(
                s,
                "precision_at_recall {} {} {} {}",
                r.kind.name(),
                r.difficulty.name(),
                r.recall,
                opt_value(r.precision, "unreachable")
            );
        }
        let _ = writeln!(s, "bg_iou_cutoff {}", self.bg_iou_cutoff);
        for r in &self.fp {
            let c = r.counts;
            let _ = writeln!(s, "fp_accounting {} {} {} {}", r.score_threshold, c.tp, c.fp, c.fp_bg);
        }
        s
    }

    pub fn parse_machine(text: &str, path: &Path) -> Result<Self> {
        let mut rep = EvalReport::default();
        for (i, line) in text.lines().enumerate() {
            let bad = |m: String| Error::format(path, Some(i + 1), m);
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.is_empty() || f[0].starts_with('#') {
                continue;
            }
            let num = |k: usize| -> Result<f64> {
                f.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| bad(format!("field {} is not a number", k + 1)))
            };
            let count = |k: usize| -> Result<usize> {
                f.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| bad(format!("field {} is not a count", k + 1)))
            };
            let opt = |k: usize, none: &str| -> Result<Option<f64>> {
                if f.get(k) == Some(&none) {
                    Ok(None)
                } else {
                    num(k).map(Some)
                }
            };
            let arity = |n: usize| -> Result<()> {
                if f.len() == n {
                    Ok(())
                } else {
                    Err(bad(format!("{} takes {} fields, found {}", f[0], n, f.len())))
                }
            };
            let parse_err = |e: Error| bad(e.to_string());
            match f[0] {
                "ap40" => {
                    arity(4)?;
                    rep.ap.push(ApRow {
                        kind: f[1].parse().map_err(parse_err)?,
                        difficulty: f[2].parse().map_err(parse_err)?,
                        ap: opt(3, "undefined")?,
                    });
                }
                "precision_at_recall" => {
                    arity(5)?;
                    rep.precision.push(PrecisionRow {
                        kind: f[1].parse().map_err(parse_err)?,
                        difficulty: f[2].parse().map_err(parse_err)?,
                        recall: num(3)?,
                        precision: opt(4, "unreachable")?,
                    });
                }
                "bg_iou_cutoff" => {
                    arity(2)?;
                    rep.bg_iou_cutoff = num(1)?;
                }
                "fp_accounting" => {
                    arity(5)?;
                    rep.fp.push(FpRow {
                        score_threshold: num(1)?,
                        counts: FpCounts { tp: count(2)?, fp: count(3)?, fp_bg: count(4)? },
                    });
                }
                other => return Err(bad(format!("unknown record {other:?}"))),
            }
        }
        Ok(rep)
    }

    /// Percentages laid out for reading.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "AP40 (%)        easy  moderate      hard");
        for kind in IouKind::ALL {
            let _ = write!(s, "  {:<8}", kind.name());
            for d in Difficulty::ALL {
                let _ = write!(s, "{:>10}", pct(self.ap(kind, d)));
            }
            let _ = writeln!(s);
        }
        for kind in IouKind::ALL {
            let _ = writeln!(s, "\nPrecision at recall, {} (%)", kind.name());
            let _ = writeln!(s, "  recall        easy  moderate      hard");
            let mut recalls: Vec<f64> = Vec::new();
            for r in self.precision.iter().filter(|r| r.kind == kind) {
                if !recalls.contains(&r.recall) {
                    recalls.push(r.recall);
                }
            }
            for r in recalls {
                let _ = write!(s, "  {:<8}", r);
                for d in Difficulty::ALL {
                    let _ = write!(s, "{:>10}", pct(self.precision_at(kind, d, r)));
                }
                let _ = writeln!(s);
            }
        }
        let _ = writeln!(s, "\nTP / FP / FP(BG), 3d, background = max BEV IoU <= {}", self.bg_iou_cutoff);
        let _ = writeln!(s, "  score>=        TP        FP    FP(BG)");
        for r in &self.fp {
            let c = r.counts;
            let _ = writeln!(s, "  {:<8}{:>10}{:>10}{:>10}", r.score_threshold, c.tp, c.fp, c.fp_bg);
        }
        s
    }
}
