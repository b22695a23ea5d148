//! LSTQ evaluation: the classification score S_cls (semantic IoU averaged
//! over classes present in the ground truth), the association score
//! S_assoc (point-level track association over the whole sequence, things
//! only) and their geometric mean.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use crate::lidar_io;
use crate::types::{point_set_iou, PointKey};
use crate::{Error, Result};

/// One track for association scoring: a point set over the sequence plus
/// its semantic class (used for per-class breakdowns and thing filtering).
#[derive(Debug, Clone)]
pub struct TrackSet {
    pub class: u16,
    pub points: HashSet<PointKey>,
}

/// Per-class point IoU and their mean over classes present in the ground
/// truth. Classes absent from both streams are excluded; classes predicted
/// but absent from the ground truth appear in the map without entering the
/// mean.
pub fn s_cls(
    gt: &[u16],
    pred: &[u16],
    classes: &[u16],
) -> Result<(f64, BTreeMap<u16, f64>)> {
    if gt.len() != pred.len() {
        return Err(Error::Format(format!(
            "semantic streams differ in length: {} vs {}",
            gt.len(),
            pred.len()
        )));
    }
    let mut iou_map = BTreeMap::new();
    let mut sum = 0.0;
    let mut counted = 0usize;
    for &c in classes {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for (&g, &p) in gt.iter().zip(pred) {
            match (g == c, p == c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                _ => {}
            }
        }
        if tp + fp + fn_ == 0 {
            continue; // absent everywhere
        }
        let iou = tp as f64 / (tp + fp + fn_) as f64;
        iou_map.insert(c, iou);
        if tp + fn_ > 0 {
            sum += iou;
            counted += 1;
        }
    }
    if counted == 0 {
        return Ok((0.0, iou_map));
    }
    Ok((sum / counted as f64, iou_map))
}

/// S_assoc = (1/|GT|) sum_t (1/|t|) sum_{s : s cap t != 0} |s cap t| * IoU(s, t).
///
/// Returns (score, per-GT-class breakdown, undefined flag). With no ground
/// truth tracks the score is undefined and reported as 1.0 with the flag
/// set.
pub fn s_assoc(gt: &[TrackSet], pred: &[TrackSet]) -> (f64, BTreeMap<u16, f64>, bool) {
    if gt.is_empty() {
        return (1.0, BTreeMap::new(), true);
    }
    let mut per_class: HashMap<u16, (f64, usize)> = HashMap::new();
    let mut total = 0.0;
    for t in gt {
        let mut track_score = 0.0;
        for s in pred {
            let inter = s.points.intersection(&t.points).count();
            if inter == 0 {
                continue;
            }
            track_score += inter as f64 * point_set_iou(&s.points, &t.points);
        }
        track_score /= t.points.len() as f64;
        total += track_score;
        let entry = per_class.entry(t.class).or_insert((0.0, 0));
        entry.0 += track_score;
        entry.1 += 1;
    }
    let breakdown = per_class
        .into_iter()
        .map(|(c, (sum, n))| (c, sum / n as f64))
        .collect();
    (total / gt.len() as f64, breakdown, false)
}

/// Geometric mean of the two scores.
pub fn lstq(s_cls: f64, s_assoc: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&s_cls) && (0.0..=1.0).contains(&s_assoc));
    (s_cls * s_assoc).sqrt()
}

/// Full evaluation result with per-category breakdowns.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub s_cls: f64,
    pub s_assoc: f64,
    pub lstq: f64,
    /// Per-class semantic IoU.
    pub class_iou: BTreeMap<u16, f64>,
    /// Per-class association score; 0.00 for stuff classes by convention.
    pub class_assoc: BTreeMap<u16, f64>,
    pub num_points: usize,
    pub num_gt_tracks: usize,
    pub num_pred_tracks: usize,
    /// True when there were no ground-truth tracks to associate.
    pub assoc_undefined: bool,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,class,value\n");
        out.push_str(&format!("lstq,,{:.6}\n", self.lstq));
        out.push_str(&format!("s_assoc,,{:.6}\n", self.s_assoc));
        out.push_str(&format!("s_cls,,{:.6}\n", self.s_cls));
        for (c, v) in &self.class_assoc {
            out.push_str(&format!("s_assoc,{c},{v:.6}\n"));
        }
        for (c, v) in &self.class_iou {
            out.push_str(&format!("s_cls,{c},{v:.6}\n"));
        }
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "LSTQ {:.4}  S_assoc {:.4}  S_cls {:.4}  ({} points, {} gt tracks, {} pred tracks{})",
            self.lstq,
            self.s_assoc,
            self.s_cls,
            self.num_points,
            self.num_gt_tracks,
            self.num_pred_tracks,
            if self.assoc_undefined {
                ", association undefined"
            } else {
                ""
            }
        )?;
        writeln!(f, "{:<12} {:>8} {:>8}", "category", "S_assoc", "S_cls")?;
        let classes: BTreeSet<u16> = self
            .class_iou
            .keys()
            .chain(self.class_assoc.keys())
            .copied()
            .collect();
        for c in classes {
            writeln!(
                f,
                "{:<12} {:>8.2} {:>8.2}",
                format!("class_{c}"),
                self.class_assoc.get(&c).copied().unwrap_or(0.0),
                self.class_iou.get(&c).copied().unwrap_or(0.0),
            )?;
        }
        Ok(())
    }
}

/// Groups labeled points into tracks by instance id; the track class is the
/// modal semantic class of its points.
pub fn tracks_from_labels(labels: &[Vec<(u16, u16)>]) -> Vec<TrackSet> {
    let mut by_instance: BTreeMap<u16, (HashMap<u16, usize>, HashSet<PointKey>)> = BTreeMap::new();
    for (scan, scan_labels) in labels.iter().enumerate() {
        for (point, &(sem, inst)) in scan_labels.iter().enumerate() {
            if inst == 0 {
                continue;
            }
            let entry = by_instance.entry(inst).or_default();
            *entry.0.entry(sem).or_default() += 1;
            entry.1.insert(PointKey::new(scan as u32, point as u32));
        }
    }
    by_instance
        .into_values()
        .map(|(counts, points)| {
            let class = counts
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(&c, _)| c)
                .unwrap_or(0);
            TrackSet { class, points }
        })
        .collect()
}

/// Evaluates aligned per-scan (semantic, instance) label streams.
pub fn evaluate_labels(
    gt: &[Vec<(u16, u16)>],
    pred: &[Vec<(u16, u16)>],
    thing_classes: &[u16],
) -> Result<EvalReport> {
    if gt.len() != pred.len() {
        return Err(Error::Format(format!(
            "{} ground-truth scans vs {} prediction scans",
            gt.len(),
            pred.len()
        )));
    }
    let mut gt_sem = Vec::new();
    let mut pred_sem = Vec::new();
    for (g, p) in gt.iter().zip(pred) {
        if g.len() != p.len() {
            return Err(Error::Format(format!(
                "scan has {} ground-truth points but {} predicted",
                g.len(),
                p.len()
            )));
        }
        gt_sem.extend(g.iter().map(|&(s, _)| s));
        pred_sem.extend(p.iter().map(|&(s, _)| s));
    }

    // Classes present in the ground truth, 0 treated as unlabeled.
    let classes: Vec<u16> = gt_sem
        .iter()
        .chain(pred_sem.iter())
        .copied()
        .filter(|&c| c != 0)
        .collect::<BTreeSet<u16>>()
        .into_iter()
        .collect();
    let (cls_score, class_iou) = s_cls(&gt_sem, &pred_sem, &classes)?;

    let gt_tracks: Vec<TrackSet> = tracks_from_labels(gt)
        .into_iter()
        .filter(|t| thing_classes.contains(&t.class))
        .collect();
    let pred_tracks: Vec<TrackSet> = tracks_from_labels(pred)
        .into_iter()
        .filter(|t| thing_classes.contains(&t.class))
        .collect();
    let (assoc_score, assoc_breakdown, undefined) = s_assoc(&gt_tracks, &pred_tracks);

    // Stuff classes report 0.00 association.
    let mut class_assoc = BTreeMap::new();
    for &c in &classes {
        if thing_classes.contains(&c) {
            class_assoc.insert(c, assoc_breakdown.get(&c).copied().unwrap_or(0.0));
        } else {
            class_assoc.insert(c, 0.0);
        }
    }

    Ok(EvalReport {
        s_cls: cls_score,
        s_assoc: assoc_score,
        lstq: lstq(cls_score, assoc_score),
        class_iou,
        class_assoc,
        num_points: gt_sem.len(),
        num_gt_tracks: gt_tracks.len(),
        num_pred_tracks: pred_tracks.len(),
        assoc_undefined: undefined,
    })
}

fn label_dir(dir: &Path) -> std::path::PathBuf {
    let nested = dir.join("labels");
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

fn read_label_dir(dir: &Path) -> Result<Vec<Vec<(u16, u16)>>> {
    let dir = label_dir(dir);
    let mut paths: Vec<_> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "label").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Format(format!(
            "{}: no .label files found",
            dir.display()
        )));
    }
    paths.iter().map(|p| lidar_io::read_labels(p)).collect()
}

/// Evaluates a prediction directory against a ground-truth directory
/// (either may hold the label files directly or under `labels/`).
pub fn evaluate_dirs(gt_dir: &Path, pred_dir: &Path, thing_classes: &[u16]) -> Result<EvalReport> {
    let gt = read_label_dir(gt_dir)?;
    let pred = read_label_dir(pred_dir)?;
    evaluate_labels(&gt, &pred, thing_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    fn track(class: u16, keys: &[(u32, u32)]) -> TrackSet {
        TrackSet {
            class,
            points: keys.iter().map(|&(s, p)| PointKey::new(s, p)).collect(),
        }
    }

    #[test]
    fn s_cls_examples() {
        let gt = vec![1, 1, 2, 2];
        let (score, _) = s_cls(&gt, &gt, &[1, 2]).unwrap();
        assert_eq!(score, 1.0);

        // Class 1 perfect, class 2 half (one of two predicted wrong).
        let pred = vec![1, 1, 2, 3];
        let (score, map) = s_cls(&gt, &pred, &[1, 2, 3]).unwrap();
        assert_eq!(map[&1], 1.0);
        // class 2: tp=1 fp=0 fn=1 -> 0.5; class 3 has no gt -> excluded.
        assert_eq!(map[&2], 0.5);
        assert_eq!(score, 0.75);

        // Class absent from both is excluded entirely.
        let (score, map) = s_cls(&gt, &gt, &[1, 2, 9]).unwrap();
        assert_eq!(score, 1.0);
        assert!(!map.contains_key(&9));

        assert!(s_cls(&gt, &[1], &[1]).is_err());
    }

    #[test]
    fn s_cls_ignores_instance_ids_entirely() {
        // Operates on semantics only by construction; evaluate_labels
        // shuffles instance ids and the score must not move.
        let gt = vec![vec![(2, 1), (2, 1), (1, 0)]];
        let pred_a = vec![vec![(2, 7), (2, 7), (1, 0)]];
        let pred_b = vec![vec![(2, 4), (2, 9), (1, 0)]];
        let ra = evaluate_labels(&gt, &pred_a, &[2]).unwrap();
        let rb = evaluate_labels(&gt, &pred_b, &[2]).unwrap();
        assert_eq!(ra.s_cls, rb.s_cls);
    }

    #[test]
    fn s_assoc_examples() {
        // Perfect tracks.
        let gt = vec![track(2, &[(0, 0), (0, 1), (1, 0), (1, 1)])];
        let (score, _, undef) = s_assoc(&gt, &gt);
        assert_eq!(score, 1.0);
        assert!(!undef);

        // One pred track covering 2 of 4 gt points: (1/4) * 2 * 0.5 = 0.25.
        let pred = vec![track(2, &[(0, 0), (0, 1)])];
        let (score, _, _) = s_assoc(&gt, &pred);
        assert!((score - 0.25).abs() < 1e-12);

        // Split into two equal halves: (1/4) * (2*0.5 + 2*0.5) = 0.5.
        let pred = vec![
            track(2, &[(0, 0), (0, 1)]),
            track(2, &[(1, 0), (1, 1)]),
        ];
        let (score, _, _) = s_assoc(&gt, &pred);
        assert!((score - 0.5).abs() < 1e-12);
    }

    #[test]
    fn s_assoc_without_gt_tracks_is_flagged() {
        let (score, _, undef) = s_assoc(&[], &[track(2, &[(0, 0)])]);
        assert_eq!(score, 1.0);
        assert!(undef);
    }

    #[test]
    fn empty_predictions_score_zero_association_on_scenes_with_things() {
        let gt = vec![vec![(2, 1), (2, 1), (1, 0)], vec![(2, 1), (1, 0), (1, 0)]];
        let empty: Vec<Vec<(u16, u16)>> = gt
            .iter()
            .map(|scan| vec![(0, 0); scan.len()])
            .collect();
        let report = evaluate_labels(&gt, &empty, &[2]).unwrap();
        assert_eq!(report.s_assoc, 0.0);
        assert_eq!(report.lstq, 0.0);
        assert!(!report.assoc_undefined);
    }

    /// Literal nested-loop transcription of the association formula.
    fn s_assoc_oracle(gt: &[TrackSet], pred: &[TrackSet]) -> f64 {
        if gt.is_empty() {
            return 1.0;
        }
        let mut total = 0.0;
        for t in gt {
            let mut inner = 0.0;
            for s in pred {
                let mut inter = 0;
                for k in &s.points {
                    if t.points.contains(k) {
                        inter += 1;
                    }
                }
                if inter > 0 {
                    let union = s.points.len() + t.points.len() - inter;
                    inner += inter as f64 * (inter as f64 / union as f64);
                }
            }
            total += inner / t.points.len() as f64;
        }
        total / gt.len() as f64
    }

    #[test]
    fn s_assoc_matches_brute_force_on_random_instances() {
        let mut rng = seeded_rng(65);
        for _ in 0..50 {
            let mut gt = Vec::new();
            let mut pred = Vec::new();
            for class in 0..(1 + rng.draw_index(10)) {
                let n = 1 + rng.draw_index(50);
                gt.push(track(
                    class as u16,
                    &(0..n)
                        .map(|_| (rng.draw_index(4) as u32, rng.draw_index(60) as u32))
                        .collect::<Vec<_>>(),
                ));
            }
            for _ in 0..rng.draw_index(10) {
                let n = 1 + rng.draw_index(50);
                pred.push(track(
                    2,
                    &(0..n)
                        .map(|_| (rng.draw_index(4) as u32, rng.draw_index(60) as u32))
                        .collect::<Vec<_>>(),
                ));
            }
            let (fast, _, _) = s_assoc(&gt, &pred);
            let slow = s_assoc_oracle(&gt, &pred);
            assert!((fast - slow).abs() <= 1e-12);
        }
    }

    #[test]
    fn lstq_examples() {
        assert_eq!(lstq(1.0, 1.0), 1.0);
        assert_eq!(lstq(0.7, 0.0), 0.0);
        // sqrt(0.588 * 0.695) = 0.639.
        assert!((lstq(0.588, 0.695) - 0.639).abs() < 1e-3);
    }

    #[test]
    fn permuting_prediction_ids_changes_nothing() {
        let gt = vec![
            vec![(2, 1), (2, 1), (2, 2), (1, 0)],
            vec![(2, 1), (2, 2), (2, 2), (1, 0)],
        ];
        let pred = vec![
            vec![(2, 5), (2, 5), (2, 9), (1, 0)],
            vec![(2, 5), (2, 9), (2, 9), (1, 0)],
        ];
        // Swap ids 5 <-> 9 everywhere.
        let permuted: Vec<Vec<(u16, u16)>> = pred
            .iter()
            .map(|scan| {
                scan.iter()
                    .map(|&(s, i)| (s, match i { 5 => 9, 9 => 5, other => other }))
                    .collect()
            })
            .collect();
        let a = evaluate_labels(&gt, &pred, &[2]).unwrap();
        let b = evaluate_labels(&gt, &permuted, &[2]).unwrap();
        assert_eq!(a.s_assoc, b.s_assoc);
        assert_eq!(a.s_cls, b.s_cls);
        assert_eq!(a.lstq, b.lstq);
    }

    #[test]
    fn report_shape() {
        let gt = vec![vec![(2, 1), (1, 0)]];
        let report = evaluate_labels(&gt, &gt, &[2]).unwrap();
        assert_eq!(report.lstq, 1.0);
        assert_eq!(report.class_assoc[&1], 0.0); // stuff reports 0.00
        assert!(report.class_assoc[&2] > 0.99);
        let csv = report.to_csv();
        assert!(csv.starts_with("metric,class,value"));
        assert!(csv.contains("lstq,,1.000000"));
        let shown = format!("{report}");
        assert!(shown.contains("class_1"));
    }
}
