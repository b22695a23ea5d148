//! Forms overlapping 4D volumes from consecutive world-frame scans and
//! recomputes ground-truth instance geometry over the merged window.
//!
//! All points of the newest scan are kept; each past scan contributes
//! ceil(sample_fraction * N) points drawn without replacement with
//! probability proportional to objectness plus a small floor, so stuff
//! points always retain a nonzero selection probability.

use std::collections::BTreeMap;

use crate::config::Config;
use crate::rng::SeededRng;
use crate::types::{InstanceGT4D, PointCloud4D, PointKey};

/// Selection-probability floor added to every objectness weight.
pub const OBJECTNESS_FLOOR: f64 = 1e-3;

/// One scan as seen by volume formation. `objectness` is the per-point
/// score predicted when the scan was current (or a ground-truth surrogate
/// at training time); `None` falls back to uniform weights.
pub struct ScanView<'a> {
    pub scan_id: u32,
    pub positions: &'a [[f64; 3]],
    pub remission: &'a [f32],
    pub labels: Option<&'a [(u16, u16)]>,
    pub objectness: Option<&'a [f64]>,
}

/// Weighted sampling without replacement via exponential keys: the k
/// largest values of ln(u_i)/w_i are exactly a weighted draw. Returns
/// ascending indices.
fn sample_without_replacement(
    weights: impl Iterator<Item = f64>,
    k: usize,
    rng: &mut SeededRng,
) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = weights
        .enumerate()
        .map(|(i, w)| {
            let u = rng.draw_uniform().max(1e-300);
            (u.ln() / w.max(1e-300), i)
        })
        .collect();
    if k >= keyed.len() {
        return (0..keyed.len()).collect();
    }
    keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut picked: Vec<usize> = keyed[..k].iter().map(|&(_, i)| i).collect();
    picked.sort_unstable();
    picked
}

/// Builds the 4D volume for a window of scans ordered oldest to newest
/// (the last entry is the current scan and is kept in full).
pub fn form_volume(scans: &[ScanView<'_>], cfg: &Config, rng: &mut SeededRng) -> PointCloud4D {
    assert!(!scans.is_empty(), "a volume needs at least one scan");
    let window_len = scans.len();
    let has_labels = scans.iter().all(|s| s.labels.is_some());

    let mut positions = Vec::new();
    let mut scan_index = Vec::new();
    let mut remission = Vec::new();
    let mut semantic_gt = Vec::new();
    let mut instance_gt = Vec::new();
    let mut point_origin = Vec::new();

    for (si, view) in scans.iter().enumerate() {
        let n = view.positions.len();
        let is_current = si + 1 == window_len;
        let picked: Vec<usize> = if is_current {
            (0..n).collect()
        } else {
            let k = (cfg.sample_fraction * n as f64).ceil() as usize;
            match view.objectness {
                Some(scores) => sample_without_replacement(
                    scores.iter().map(|&o| o + OBJECTNESS_FLOOR),
                    k,
                    rng,
                ),
                None => sample_without_replacement((0..n).map(|_| 1.0), k, rng),
            }
        };
        for i in picked {
            positions.push(view.positions[i]);
            scan_index.push(si as u8);
            remission.push(view.remission[i]);
            if let Some(labels) = view.labels {
                semantic_gt.push(labels[i].0);
                instance_gt.push(labels[i].1);
            }
            point_origin.push(PointKey::new(view.scan_id, i as u32));
        }
    }

    let volume = PointCloud4D {
        positions,
        scan_index,
        remission,
        semantic_gt: has_labels.then_some(semantic_gt),
        instance_gt: has_labels.then_some(instance_gt),
        point_origin,
        window_len,
        features: None,
        objectness: None,
    };
    volume.assert_consistent();
    volume
}

/// Ground-truth objectness surrogate for volume formation at training time:
/// 1 for thing points, 0 for stuff (the floor keeps stuff selectable).
pub fn gt_objectness(labels: &[(u16, u16)]) -> Vec<f64> {
    labels
        .iter()
        .map(|&(_, inst)| if inst > 0 { 1.0 } else { 0.0 })
        .collect()
}

/// Recomputes per-instance bounding boxes over the union of each
/// instance's points across every scan of the volume.
pub fn recompute_gt(volume: &PointCloud4D) -> Vec<InstanceGT4D> {
    let Some(instance) = &volume.instance_gt else {
        return Vec::new();
    };
    let mut acc: BTreeMap<u16, (Vec<usize>, [f64; 3], [f64; 3])> = BTreeMap::new();
    for (i, (&inst, p)) in instance.iter().zip(&volume.positions).enumerate() {
        if inst == 0 {
            continue;
        }
        let entry = acc
            .entry(inst)
            .or_insert_with(|| (Vec::new(), [f64::INFINITY; 3], [f64::NEG_INFINITY; 3]));
        entry.0.push(i);
        for k in 0..3 {
            entry.1[k] = entry.1[k].min(p[k]);
            entry.2[k] = entry.2[k].max(p[k]);
        }
    }
    acc.into_iter()
        .map(|(id, (members, lo, hi))| InstanceGT4D::from_bbox(id, members, lo, hi))
        .collect()
}
