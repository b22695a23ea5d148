//! Stitches per-window instances into sequence-level tracklets.
//!
//! Consecutive windows share T-1 scans. A new instance is matched to an
//! active tracklet by point-set IoU on those shared scans, restricted to
//! the point keys actually present in the new window's volume (past scans
//! are subsampled, so the comparison universe is the sampled subset both
//! sides can see). Matching is greedy over descending IoU, one-to-one;
//! matches below the threshold are discarded and open new tracklets. Each
//! scan's final point assignments come from the window where that scan is
//! newest, so window t contributes exactly its scan-t points.

use std::collections::{HashMap, HashSet};

use crate::types::{point_set_iou, PointKey, Tracklet};

/// One window instance handed to the stitcher: every member point key in
/// the window's volume plus the predicted class per member.
#[derive(Debug, Clone)]
pub struct WindowInstanceKeys {
    pub keys: Vec<PointKey>,
    pub classes: Vec<u16>,
}

#[derive(Debug)]
struct TrackletState {
    id: u32,
    members: Vec<PointKey>,
    class_counts: HashMap<u16, usize>,
    last_scan: u32,
}

impl TrackletState {
    fn absorb(&mut self, instance: &WindowInstanceKeys, current_scan: u32) {
        let mut advanced = false;
        for (key, &class) in instance.keys.iter().zip(&instance.classes) {
            if key.scan == current_scan {
                self.members.push(*key);
                *self.class_counts.entry(class).or_default() += 1;
                advanced = true;
            }
        }
        if advanced {
            self.last_scan = current_scan;
        }
    }
}

/// Sequential tracklet builder; feed windows in scan order.
pub struct Stitcher {
    threshold: f64,
    next_id: u32,
    active: Vec<TrackletState>,
    retired: Vec<TrackletState>,
}

impl Stitcher {
    pub fn new(threshold: f64) -> Stitcher {
        Stitcher {
            threshold,
            next_id: 1,
            active: Vec::new(),
            retired: Vec::new(),
        }
    }

    /// Processes the window whose newest scan is `current_scan` and whose
    /// oldest scan is `window_start`. `universe` is the set of shared-scan
    /// point keys present in this window's volume.
    pub fn step(
        &mut self,
        current_scan: u32,
        window_start: u32,
        universe: &HashSet<PointKey>,
        instances: &[WindowInstanceKeys],
    ) {
        // Tracklets with no points inside the window range can never match
        // again (windows only overlap adjacent windows).
        let mut still_active = Vec::new();
        for t in self.active.drain(..) {
            if t.last_scan >= window_start {
                still_active.push(t);
            } else {
                self.retired.push(t);
            }
        }
        self.active = still_active;

        let instance_shared: Vec<HashSet<PointKey>> = instances
            .iter()
            .map(|inst| {
                inst.keys
                    .iter()
                    .filter(|k| k.scan < current_scan)
                    .copied()
                    .collect()
            })
            .collect();
        let tracklet_shared: Vec<HashSet<PointKey>> = self
            .active
            .iter()
            .map(|t| {
                t.members
                    .iter()
                    .filter(|k| universe.contains(k))
                    .copied()
                    .collect()
            })
            .collect();

        // All candidate pairs, best IoU first; ties favor the older
        // tracklet, then the lower instance index.
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (ti, ts) in tracklet_shared.iter().enumerate() {
            for (ii, is) in instance_shared.iter().enumerate() {
                let iou = point_set_iou(is, ts);
                if iou > 0.0 && iou >= self.threshold {
                    candidates.push((iou, ti, ii));
                }
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then(self.active[a.1].id.cmp(&self.active[b.1].id))
                .then(a.2.cmp(&b.2))
        });

        let mut tracklet_taken = vec![false; self.active.len()];
        let mut instance_taken = vec![false; instances.len()];
        for (_, ti, ii) in candidates {
            if tracklet_taken[ti] || instance_taken[ii] {
                continue;
            }
            tracklet_taken[ti] = true;
            instance_taken[ii] = true;
            self.active[ti].absorb(&instances[ii], current_scan);
        }

        for (ii, inst) in instances.iter().enumerate() {
            if instance_taken[ii] {
                continue;
            }
            let mut t = TrackletState {
                id: self.next_id,
                members: Vec::new(),
                class_counts: HashMap::new(),
                last_scan: current_scan,
            };
            t.absorb(inst, current_scan);
            if t.members.is_empty() {
                // Instance made only of past-scan points: those scans were
                // finalized by earlier windows.
                continue;
            }
            self.next_id += 1;
            self.active.push(t);
        }
    }

    /// Closes the sequence: every tracklet with its majority-vote class
    /// (ties to the lowest class id), members sorted, ids in creation order.
    pub fn finish(mut self) -> Vec<Tracklet> {
        self.retired.append(&mut self.active);
        let mut out: Vec<Tracklet> = self
            .retired
            .into_iter()
            .filter(|t| !t.members.is_empty())
            .map(|t| {
                let semantic = t
                    .class_counts
                    .iter()
                    .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                    .map(|(&c, _)| c)
                    .unwrap_or(0);
                let mut members = t.members;
                members.sort_unstable();
                members.dedup();
                Tracklet {
                    id: t.id,
                    members,
                    semantic,
                }
            })
            .collect();
        out.sort_by_key(|t| t.id);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keys(scan: u32, ids: std::ops::Range<u32>) -> Vec<PointKey> {
        ids.map(|i| PointKey::new(scan, i)).collect()
    }

    fn instance(keys: Vec<PointKey>, class: u16) -> WindowInstanceKeys {
        let classes = vec![class; keys.len()];
        WindowInstanceKeys { keys, classes }
    }

    fn universe_of(keys: &[PointKey]) -> HashSet<PointKey> {
        keys.iter().copied().collect()
    }

    #[test]
    fn identical_instance_across_windows_keeps_one_id() {
        let mut stitcher = Stitcher::new(0.5);
        // Window 0: scan 0 only.
        stitcher.step(0, 0, &HashSet::new(), &[instance(keys(0, 0..10), 2)]);
        // Window 1: shares scan 0; the instance covers the same points.
        let mut w1_keys = keys(0, 0..10);
        w1_keys.extend(keys(1, 0..10));
        let shared = universe_of(&keys(0, 0..10));
        stitcher.step(1, 0, &shared, &[instance(w1_keys, 2)]);
        let tracklets = stitcher.finish();
        assert_eq!(tracklets.len(), 1);
        assert_eq!(tracklets[0].id, 1);
        assert_eq!(tracklets[0].members.len(), 20);
        assert_eq!(tracklets[0].semantic, 2);
    }

    #[test]
    fn zero_overlap_opens_a_new_tracklet() {
        let mut stitcher = Stitcher::new(0.5);
        stitcher.step(0, 0, &HashSet::new(), &[instance(keys(0, 0..5), 2)]);
        // Window 1 instance shares the scan but none of the points.
        let mut w1_keys = keys(0, 10..15);
        w1_keys.extend(keys(1, 0..5));
        let shared: HashSet<PointKey> = keys(0, 0..20).into_iter().collect();
        stitcher.step(1, 0, &shared, &[instance(w1_keys, 2)]);
        let tracklets = stitcher.finish();
        assert_eq!(tracklets.len(), 2);
        assert_eq!(tracklets[0].id, 1);
        assert_eq!(tracklets[1].id, 2);
    }

    #[test]
    fn greedy_matching_resolves_the_iou_matrix_diagonally() {
        let mut stitcher = Stitcher::new(0.05);
        // Window 0 creates tracklets A = {0..10}, B = {10..20} on scan 0.
        stitcher.step(
            0,
            0,
            &HashSet::new(),
            &[instance(keys(0, 0..10), 2), instance(keys(0, 10..20), 3)],
        );
        // Window 1: X overlaps A strongly and B weakly; Y the reverse.
        let mut x = keys(0, 0..9);
        x.push(PointKey::new(0, 10));
        x.extend(keys(1, 0..9));
        let mut y = vec![PointKey::new(0, 9)];
        y.extend(keys(0, 11..20));
        y.extend(keys(1, 10..19));
        let shared: HashSet<PointKey> = keys(0, 0..20).into_iter().collect();
        stitcher.step(1, 0, &shared, &[instance(x, 2), instance(y, 3)]);
        let tracklets = stitcher.finish();
        assert_eq!(tracklets.len(), 2);
        // A picked up X's scan-1 points, B picked up Y's.
        let a = &tracklets[0];
        assert!(a.members.contains(&PointKey::new(1, 0)));
        assert!(!a.members.contains(&PointKey::new(1, 10)));
        let b = &tracklets[1];
        assert!(b.members.contains(&PointKey::new(1, 10)));
    }

    #[test]
    fn greedy_is_not_optimal_assignment() {
        // IoU matrix roughly [[0.9, 0.85], [0.8, low]]: greedy pairs the
        // 0.9 edge and leaves the second instance unmatched (below
        // threshold), instead of the Hungarian 0.85 + 0.8 pairing.
        let mut stitcher = Stitcher::new(0.5);
        stitcher.step(
            0,
            0,
            &HashSet::new(),
            &[instance(keys(0, 0..20), 2), instance(keys(0, 20..40), 2)],
        );
        let shared: HashSet<PointKey> = keys(0, 0..40).into_iter().collect();
        // X: 18 of A, 2 of B -> IoU(A) = 18/22, IoU(B) = 2/38.
        let mut x: Vec<PointKey> = keys(0, 0..18);
        x.extend(keys(0, 20..22));
        x.extend(keys(1, 0..10));
        // Y: 16 of A, 4 of B -> IoU(A) = 16/24 = 0.67, IoU(B) = 4/36 = 0.11.
        let mut y: Vec<PointKey> = keys(0, 2..18);
        y.extend(keys(0, 22..26));
        y.extend(keys(1, 10..20));
        stitcher.step(1, 0, &shared, &[instance(x, 2), instance(y, 2)]);
        let tracklets = stitcher.finish();
        // X joined tracklet 1; Y could not take tracklet 2 (IoU 0.11 < 0.5)
        // so it opened tracklet 3.
        assert_eq!(tracklets.len(), 3);
        assert!(tracklets[0].members.contains(&PointKey::new(1, 0)));
        assert!(tracklets[2].members.contains(&PointKey::new(1, 10)));
    }

    #[test]
    fn ids_are_never_reused_and_output_partitions_points() {
        let mut stitcher = Stitcher::new(0.5);
        stitcher.step(0, 0, &HashSet::new(), &[instance(keys(0, 0..4), 2)]);
        // Window 1 has nothing; the tracklet retires once out of range.
        stitcher.step(1, 1, &HashSet::new(), &[]);
        stitcher.step(2, 2, &HashSet::new(), &[instance(keys(2, 0..4), 2)]);
        let tracklets = stitcher.finish();
        assert_eq!(tracklets.len(), 2);
        assert_eq!(tracklets[0].id, 1);
        assert_eq!(tracklets[1].id, 2);
        let mut seen = HashSet::new();
        for t in &tracklets {
            for k in &t.members {
                assert!(seen.insert(*k), "{k:?} in two tracklets");
            }
        }
    }

    #[test]
    fn t1_windows_never_match() {
        let mut stitcher = Stitcher::new(0.5);
        for scan in 0..3u32 {
            stitcher.step(scan, scan, &HashSet::new(), &[instance(keys(scan, 0..5), 2)]);
        }
        assert_eq!(stitcher.finish().len(), 3);
    }

    #[test]
    fn majority_class_with_tie_to_lowest() {
        let mut stitcher = Stitcher::new(0.5);
        let inst = WindowInstanceKeys {
            keys: keys(0, 0..4),
            classes: vec![5, 3, 5, 3],
        };
        stitcher.step(0, 0, &HashSet::new(), &[inst]);
        let tracklets = stitcher.finish();
        assert_eq!(tracklets[0].semantic, 3);
    }
}
