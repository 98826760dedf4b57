use std::path::Path;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::kittio::{write_labels, CalibrationSet};

fn label(class: &str, height_px: f64, occ: i32, trunc: f64) -> GroundTruthLabel {
    GroundTruthLabel {
        class: class.into(),
        truncation: trunc,
        occlusion: occ,
        alpha: 0.0,
        bbox: [100.0, 100.0, 150.0, 100.0 + height_px],
        dims: [1.5, 1.6, 3.9],
        location: [0.0, 1.7, 20.0],
        rotation_y: 0.0,
        score: None,
    }
}

fn car_at(x: f64, z: f64, ry: f64) -> GroundTruthLabel {
    GroundTruthLabel { location: [x, 1.7, z], rotation_y: ry, ..label("Car", 60.0, 0, 0.0) }
}

fn b(cx: f64, cy: f64, yaw: f64) -> Box3D {
    Box3D::new(cx, cy, 0.0, 1.6, 3.9, 1.5, yaw).unwrap()
}

fn counted(bx: Box3D) -> EvalGt {
    EvalGt { bbox: bx, counted: true }
}

fn iou3(a: &Box3D, c: &Box3D) -> f64 {
    IouKind::ThreeD.iou(a, c)
}

#[test]
fn difficulty_levels() {
    let all = |l: &GroundTruthLabel| Difficulty::ALL.map(|d| difficulty_filter(l, d));
    assert_eq!(all(&label("Car", 50.0, 0, 0.0)), [true, true, true]);
    assert_eq!(all(&label("Car", 30.0, 1, 0.0)), [false, true, true]);
    assert_eq!(all(&label("Car", 10.0, 0, 0.0)), [false, false, false]);
    assert_eq!(all(&label("Car", 50.0, 2, 0.0)), [false, false, true]);
    assert_eq!(all(&label("Car", 50.0, 0, 0.4)), [false, false, true]);
    assert_eq!(all(&label("Car", 50.0, 3, 0.0)), [false, false, false]);
    // boundaries are inclusive
    assert_eq!(all(&label("Car", 40.0, 0, 0.15)), [true, true, true]);
    assert_eq!(all(&label("Car", 25.0, 1, 0.30)), [false, true, true]);
}

proptest! {
    #[test]
    fn difficulty_populations_nest(h in 0.0f64..100.0, occ in 0i32..4, trunc in 0.0f64..1.0) {
        let l = label("Car", h, occ, trunc);
        let [e, m, hd] = Difficulty::ALL.map(|d| difficulty_filter(&l, d));
        prop_assert!(!e || m);
        prop_assert!(!m || hd);
    }
}

#[test]
fn eval_frame_matches_lidar_frame_overlaps() {
    // overlaps are frame-independent; compare against the calibrated route
    let mut c = CalibrationSet::identity();
    c.tr_velo_to_cam = [[0.0, -1.0, 0.0, 0.0], [0.0, 0.0, -1.0, 0.0], [1.0, 0.0, 0.0, 0.0]];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let a = car_at(rng.gen_range(-2.0..2.0), rng.gen_range(10.0..14.0), rng.gen_range(-3.0..3.0));
        let mut o = car_at(a.location[0] + rng.gen_range(-1.0..1.0), a.location[2] + rng.gen_range(-1.0..1.0), rng.gen_range(-3.0..3.0));
        o.location[1] += rng.gen_range(-0.5..0.5);
        let (ea, eo) = (label_eval_box(&a).unwrap(), label_eval_box(&o).unwrap());
        let (la, lo) = (a.to_box3d(&c).unwrap(), o.to_box3d(&c).unwrap());
        for k in IouKind::ALL {
            assert!((k.iou(&ea, &eo) - k.iou(&la, &lo)).abs() < 1e-9);
        }
    }
    assert!(label_eval_box(&GroundTruthLabel { dims: [-1.0; 3], ..label("DontCare", 1.0, -1, -1.0) }).is_none());
}

#[test]
fn single_match_rule() {
    let g = [counted(b(0.0, 0.0, 0.0))];
    let one = match_frame(&[ScoredBox { bbox: g[0].bbox, score: 0.9 }], &g, &[], iou3, 0.7).unwrap();
    assert_eq!(one.dets[0].tag, MatchTag::Tp);
    assert_eq!(one.num_gt, 1);
    let d = ScoredBox { bbox: g[0].bbox, score: 0.9 };
    let two = match_frame(&[d, d], &g, &[], iou3, 0.7).unwrap();
    assert_eq!(two.dets.iter().map(|m| m.tag).collect::<Vec<_>>(), vec![MatchTag::Tp, MatchTag::Fp]);
    // the duplicate still overlaps its box fully
    assert!((two.dets[1].max_iou - 1.0).abs() < 1e-12);
    let unsorted = [ScoredBox { score: 0.1, ..d }, d];
    assert!(match_frame(&unsorted, &g, &[], iou3, 0.7).is_err());
}

#[test]
fn uncounted_boxes_absorb_and_dont_care_discards() {
    let gts = [EvalGt { bbox: b(0.0, 0.0, 0.0), counted: false }, counted(b(10.0, 0.0, 0.0))];
    let dc = [Box3D::new(20.0, 0.0, 0.0, 2.0, 4.0, 1.5, 0.0).unwrap()];
    let dets = [
        ScoredBox { bbox: b(0.0, 0.0, 0.0), score: 0.9 },
        ScoredBox { bbox: b(10.0, 0.0, 0.0), score: 0.8 },
        ScoredBox { bbox: b(20.0, 0.0, 0.0), score: 0.7 },
        ScoredBox { bbox: b(30.0, 0.0, 0.0), score: 0.6 },
    ];
    let m = match_frame(&dets, &gts, &dc, iou3, 0.7).unwrap();
    let tags: Vec<MatchTag> = m.dets.iter().map(|d| d.tag).collect();
    assert_eq!(tags, vec![MatchTag::Discarded, MatchTag::Tp, MatchTag::Discarded, MatchTag::Fp]);
    assert_eq!(m.num_gt, 1);
}

/// Independent greedy reference over a precomputed IoU matrix.
fn greedy_reference(dets: &[ScoredBox], gts: &[EvalGt], thr: f64) -> Vec<(MatchTag, Option<usize>)> {
    let iou: Vec<Vec<f64>> = dets.iter().map(|d| gts.iter().map(|g| iou3(&d.bbox, &g.bbox)).collect()).collect();
    let mut free: Vec<usize> = (0..gts.len()).collect();
    let mut out = Vec::new();
    for row in &iou {
        let mut cands: Vec<usize> = free.iter().copied().filter(|&j| row[j] >= thr).collect();
        // highest IoU, ties to the lower index
        cands.sort_by(|&a, &c| row[c].partial_cmp(&row[a]).unwrap().then(a.cmp(&c)));
        match cands.first() {
            Some(&j) => {
                free.retain(|&k| k != j);
                out.push((if gts[j].counted { MatchTag::Tp } else { MatchTag::Discarded }, Some(j)));
            }
            None => out.push((MatchTag::Fp, None)),
        }
    }
    out
}

#[test]
fn greedy_matches_reference_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..300 {
        let ng = rng.gen_range(0..6);
        let gts: Vec<EvalGt> = (0..ng)
            .map(|_| EvalGt { bbox: b(rng.gen_range(0.0..6.0), rng.gen_range(0.0..6.0), rng.gen_range(-3.0..3.0)), counted: rng.gen_bool(0.8) })
            .collect();
        let mut dets: Vec<ScoredBox> = (0..rng.gen_range(0..8))
            .map(|_| {
                let bx = if ng > 0 && rng.gen_bool(0.7) {
                    let g = gts[rng.gen_range(0..ng)].bbox;
                    b(g.cx + rng.gen_range(-0.3..0.3), g.cy + rng.gen_range(-0.3..0.3), g.yaw + rng.gen_range(-0.1..0.1))
                } else {
                    b(rng.gen_range(0.0..6.0), rng.gen_range(0.0..6.0), rng.gen_range(-3.0..3.0))
                };
                ScoredBox { bbox: bx, score: (rng.gen_range(0..5) as f64) / 4.0 }
            })
            .collect();
        dets.sort_by(|a, c| c.score.total_cmp(&a.score));
        let m = match_frame(&dets, &gts, &[], iou3, 0.7).unwrap();
        let got: Vec<(MatchTag, Option<usize>)> = m.dets.iter().map(|d| (d.tag, d.gt)).collect();
        assert_eq!(got, greedy_reference(&dets, &gts, 0.7));
        for (j, g) in gts.iter().enumerate() {
            assert!(m.dets.iter().filter(|d| d.gt == Some(j)).count() <= 1, "{g:?} matched twice");
        }
    }
}

fn random_results(rng: &mut impl Rng, max_boxes: usize) -> Vec<MatchResult> {
    (0..rng.gen_range(1..4))
        .map(|_| {
            let num_gt = rng.gen_range(0..=max_boxes / 2);
            let mut tp_left = num_gt;
            let dets = (0..rng.gen_range(0..=max_boxes))
                .map(|_| {
                    let tag = if tp_left > 0 && rng.gen_bool(0.5) {
                        tp_left -= 1;
                        MatchTag::Tp
                    } else if rng.gen_bool(0.1) {
                        MatchTag::Discarded
                    } else {
                        MatchTag::Fp
                    };
                    // coarse scores so ties occur
                    DetMatch { score: rng.gen_range(0..12) as f64 / 11.0, tag, gt: None, max_iou: 0.0 }
                })
                .collect();
            MatchResult { dets, num_gt }
        })
        .collect()
}

/// Recount at every candidate threshold and integrate directly.
fn ap40_oracle(results: &[MatchResult]) -> f64 {
    let n: usize = results.iter().map(|r| r.num_gt).sum();
    let all: Vec<&DetMatch> = results.iter().flat_map(|r| &r.dets).collect();
    let mut curve = Vec::new();
    for t in all.iter().map(|d| d.score) {
        let tp = all.iter().filter(|d| d.score >= t && d.tag == MatchTag::Tp).count();
        let fp = all.iter().filter(|d| d.score >= t && d.tag == MatchTag::Fp).count();
        curve.push((tp as f64 / n as f64, if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 }));
    }
    (1..=40)
        .map(|k| curve.iter().filter(|(r, _)| *r >= k as f64 / 40.0).map(|(_, p)| *p).fold(0.0, f64::max))
        .sum::<f64>()
        / 40.0
}

#[test]
fn ap40_reference_cases() {
    let perfect = MatchResult {
        dets: (0..5).map(|i| DetMatch { score: 1.0 - i as f64 * 0.1, tag: MatchTag::Tp, gt: Some(i), max_iou: 1.0 }).collect(),
        num_gt: 5,
    };
    assert_eq!(ap40(&[perfect.clone()]).unwrap(), 1.0);
    let curve = pr_curve(&[perfect]).unwrap();
    assert!(precision_at_recall(&curve, &RECALL_POSITIONS).iter().all(|p| *p == Some(1.0)));
    assert_eq!(ap40(&[MatchResult { dets: vec![], num_gt: 3 }]).unwrap(), 0.0);
    assert!(matches!(ap40(&[MatchResult { dets: vec![], num_gt: 0 }]), Err(Error::Undefined(_))));

    // half the boxes found, no false positives: 20 of 40 positions at 1
    let half = MatchResult {
        dets: (0..2).map(|i| DetMatch { score: 0.9, tag: MatchTag::Tp, gt: Some(i), max_iou: 1.0 }).collect(),
        num_gt: 4,
    };
    assert_eq!(ap40(&[half.clone()]).unwrap(), 0.5);
    let c = pr_curve(&[half]).unwrap();
    assert_eq!(precision_at_recall(&c, &[0.5, 0.75]), vec![Some(1.0), None]);
}

#[test]
fn ap40_matches_exhaustive_oracle_on_twenty_by_thirty() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut tags: Vec<MatchTag> = vec![MatchTag::Tp; 14];
    tags.extend(vec![MatchTag::Fp; 16]);
    for _ in 0..20 {
        let dets = tags
            .iter()
            .map(|&tag| DetMatch { score: rng.gen_range(0..15) as f64 / 14.0, tag, gt: None, max_iou: 0.0 })
            .collect();
        let r = [MatchResult { dets, num_gt: 20 }];
        assert!((ap40(&r).unwrap() - ap40_oracle(&r)).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn ap40_agrees_with_oracle_and_interpolation_is_monotone(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = random_results(&mut rng, 30);
        if r.iter().map(|m| m.num_gt).sum::<usize>() == 0 {
            prop_assert!(ap40(&r).is_err());
            return Ok(());
        }
        prop_assert!((ap40(&r).unwrap() - ap40_oracle(&r)).abs() < 1e-12);
        let c = pr_curve(&r).unwrap();
        let ps: Vec<f64> = (1..=40).map(|k| c.interpolated_precision(k as f64 / 40.0).unwrap_or(0.0)).collect();
        prop_assert!(ps.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(ps.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn turning_a_false_positive_into_a_hit_never_lowers_ap(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = random_results(&mut rng, 20);
        let n: usize = r.iter().map(|m| m.num_gt).sum();
        let tps: usize = r.iter().flat_map(|m| &m.dets).filter(|d| d.tag == MatchTag::Tp).count();
        prop_assume!(n > tps);
        let before = ap40(&r).unwrap();
        let Some(d) = r.iter_mut().flat_map(|m| m.dets.iter_mut()).find(|d| d.tag == MatchTag::Fp) else {
            return Ok(());
        };
        d.tag = MatchTag::Tp;
        prop_assert!(ap40(&r).unwrap() >= before - 1e-15);
    }
}

#[test]
fn precision_at_fixed_recall_tracks_false_positive_count() {
    // same hits at the same scores; B keeps a subset of A's false positives
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let n = 10;
        let hits: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();
        let fps: Vec<f64> = (0..15).map(|_| rng.gen_range(0.0..1.0)).collect();
        let drop: Vec<bool> = fps.iter().map(|_| rng.gen_bool(0.4)).collect();
        let mk = |keep_all: bool| {
            let mut dets: Vec<DetMatch> = hits.iter().map(|&s| DetMatch { score: s, tag: MatchTag::Tp, gt: None, max_iou: 1.0 }).collect();
            for (s, d) in fps.iter().zip(&drop) {
                if keep_all || !d {
                    dets.push(DetMatch { score: *s, tag: MatchTag::Fp, gt: None, max_iou: 0.0 });
                }
            }
            pr_curve(&[MatchResult { dets, num_gt: n }]).unwrap()
        };
        let (a, bb) = (mk(true), mk(false));
        for r in RECALL_POSITIONS {
            // direct count: fewest FPs among thresholds reaching recall r
            let need = (r * n as f64).ceil() as usize;
            let min_fp = |keep_all: bool| {
                let mut s = hits.clone();
                s.sort_by(|x, y| y.total_cmp(x));
                (need..=n)
                    .map(|k| {
                        let t = s[k - 1];
                        let fp = fps.iter().zip(&drop).filter(|(f, d)| **f >= t && (keep_all || !**d)).count();
                        k as f64 / (k + fp) as f64
                    })
                    .fold(0.0, f64::max)
            };
            let (pa, pb) = (a.interpolated_precision(r).unwrap(), bb.interpolated_precision(r).unwrap());
            assert!((pa - min_fp(true)).abs() < 1e-12 && (pb - min_fp(false)).abs() < 1e-12);
            assert!(pb >= pa);
        }
    }
}

#[test]
fn fp_accounting_cases() {
    let g = [counted(b(0.0, 0.0, 0.0))];
    let objs = [g[0].bbox];
    let near = ScoredBox { bbox: b(0.0, 0.0, 0.0), score: 0.9 };
    let far = ScoredBox { bbox: b(40.0, 40.0, 0.0), score: 0.5 };
    let grazing = ScoredBox { bbox: b(3.0, 0.0, 0.0), score: 0.3 };
    let dets = [near, far, grazing];
    let acc = |t, cut| fp_accounting(&dets, &g, &objs, &[], t, cut, IouKind::ThreeD, 0.7).unwrap();
    assert_eq!(acc(1.1, 0.1), FpCounts::default());
    assert_eq!(acc(0.4, 0.1), FpCounts { tp: 1, fp: 1, fp_bg: 1 });
    // the grazing box overlaps the car by 0.9 m of 3.9 m: IoU ≈ 0.13
    assert_eq!(acc(0.0, 0.1), FpCounts { tp: 1, fp: 2, fp_bg: 1 });
    assert_eq!(acc(0.0, 1.0), FpCounts { tp: 1, fp: 2, fp_bg: 2 });
    assert_eq!(acc(0.0, 0.0), FpCounts { tp: 1, fp: 2, fp_bg: 1 });
    // overlap with a non-vehicle object also rules out background
    let misc = [g[0].bbox, b(40.0, 40.0, 0.0)];
    let c = fp_accounting(&dets, &g, &misc, &[], 0.4, 0.1, IouKind::ThreeD, 0.7).unwrap();
    assert_eq!(c, FpCounts { tp: 1, fp: 1, fp_bg: 0 });
}

#[test]
fn reduction_percentages_from_table_counts() {
    let pp = (FpCounts { tp: 8606, fp: 4428, fp_bg: 2346 }, FpCounts { tp: 8783, fp: 26237, fp_bg: 22403 });
    let daf = (FpCounts { tp: 8627, fp: 3933, fp_bg: 1906 }, FpCounts { tp: 8811, fp: 23330, fp_bg: 19585 });
    let (fp04, bg04) = fp_reduction(pp.0, daf.0).unwrap();
    let (fp01, bg01) = fp_reduction(pp.1, daf.1).unwrap();
    assert_eq!(format_percent(fp04), "11.18%");
    assert_eq!(format_percent(fp01), "11.08%");
    assert_eq!(format_percent(bg01), "12.58%");
    // 440 / 2346 = 18.7553…%, printed in the source as 18.75
    assert_eq!(format_percent(bg04), "18.76%");
    assert!((bg04 - 18.75).abs() < 0.01);
    assert!(reduction_percent(0, 0).is_err());
}

fn write_dir(dir: &Path, frames: &[(&str, Vec<GroundTruthLabel>)]) {
    std::fs::create_dir_all(dir).unwrap();
    for (id, rows) in frames {
        write_labels(rows, &dir.join(format!("{id}.txt"))).unwrap();
    }
}

#[test]
fn perfect_results_score_one_everywhere() {
    let tmp = tempfile::tempdir().unwrap();
    let labels = vec![
        ("000000", vec![car_at(0.0, 10.0, 0.1), car_at(4.0, 20.0, -1.0), label("Misc", 60.0, 0, 0.0)]),
        ("000001", vec![car_at(-3.0, 15.0, 1.2)]),
    ];
    let results: Vec<(&str, Vec<GroundTruthLabel>)> = labels
        .iter()
        .map(|(id, rows)| {
            (*id, rows.iter().filter(|l| l.class == "Car").map(|l| GroundTruthLabel { score: Some(1.0), ..l.clone() }).collect())
        })
        .collect();
    write_dir(&tmp.path().join("label"), &labels);
    write_dir(&tmp.path().join("res"), &results);
    let frames = load_eval_frames(&tmp.path().join("res"), &tmp.path().join("label")).unwrap();
    let rep = evaluate(&frames, &EvalOptions::default(), 2).unwrap();
    for k in IouKind::ALL {
        for d in Difficulty::ALL {
            assert_eq!(rep.ap(k, d), Some(1.0));
        }
    }
    assert!(rep.unreachable().is_empty());
    assert_eq!(rep.fp[0].counts, FpCounts { tp: 3, fp: 0, fp_bg: 0 });
    let back = EvalReport::parse_machine(&rep.to_machine(), Path::new("r")).unwrap();
    assert_eq!(back, rep);
    let table = rep.to_table();
    assert!(table.contains("100.00"));
    // one row per recall position and IoU kind
    assert_eq!(table.lines().filter(|l| l.trim_start().starts_with("0.775")).count(), 2);
    assert_eq!(evaluate(&frames, &EvalOptions::default(), 1).unwrap(), rep);
}

#[test]
fn mismatched_ids_are_listed() {
    let tmp = tempfile::tempdir().unwrap();
    write_dir(&tmp.path().join("label"), &[("000000", vec![]), ("000001", vec![])]);
    write_dir(&tmp.path().join("res"), &[("000000", vec![]), ("000002", vec![])]);
    match load_eval_frames(&tmp.path().join("res"), &tmp.path().join("label")).unwrap_err() {
        Error::MissingPaths(p) => {
            assert_eq!(p, vec![tmp.path().join("res").join("000001.txt"), tmp.path().join("label").join("000002.txt")])
        }
        e => panic!("{e}"),
    }
}

#[test]
fn unreachable_and_undefined_rows_survive_the_machine_format() {
    let rep = EvalReport {
        ap: vec![ApRow { kind: IouKind::Bev, difficulty: Difficulty::Easy, ap: None }],
        precision: vec![PrecisionRow { kind: IouKind::ThreeD, difficulty: Difficulty::Hard, recall: 0.8, precision: None }],
        fp: vec![FpRow { score_threshold: 0.25, counts: FpCounts { tp: 1, fp: 2, fp_bg: 1 } }],
        bg_iou_cutoff: 0.1,
    };
    let text = rep.to_machine();
    assert!(text.contains("unreachable") && text.contains("undefined"));
    assert_eq!(EvalReport::parse_machine(&text, Path::new("r")).unwrap(), rep);
    assert!(EvalReport::parse_machine("ap40 3d easy", Path::new("r")).is_err());
    assert!(EvalReport::parse_machine("bogus 1", Path::new("r")).is_err());
}
