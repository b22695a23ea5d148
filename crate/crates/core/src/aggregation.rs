//! Proposal aggregation: learns per-proposal geometric features (refined
//! center, radius, bounding-box size), merges proposals into window
//! instances via DBScan over those features, and hosts the NMS and
//! center-position baselines plus the Gaussian-distribution variant.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::config::{Config, FeatureSet};
use crate::grid::dist2;
use crate::proposals::Proposal;
use crate::rng::SeededRng;
use crate::tinynet::{huber, masked_max_pool, max_pool_backward, Checkpoint, Mat, Mlp, ParamRef};
use crate::types::InstanceGT4D;
use crate::Result;

/// NMS baseline suppression threshold on member-set IoU.
pub const NMS_IOU: f64 = 0.25;

/// (probability threshold, selection radius) presets for the Gaussian
/// variant comparison.
pub const GAUSSIAN_PRESETS: [(f64, f64); 3] = [(0.5, 0.0), (0.7, 0.0), (0.7, 0.6)];

/// Learned geometric description of one proposal. Channels beyond the
/// configured feature set are absent.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometricFeature {
    /// y_j + dy_j.
    pub refined_center: [f64; 3],
    pub radius: Option<f64>,
    pub bbox: Option<[f64; 3]>,
}

impl GeometricFeature {
    /// The aggregation vector fed to DBScan (width = E of the feature set).
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.refined_center.to_vec();
        if let Some(r) = self.radius {
            v.push(r);
        }
        if let Some(bb) = self.bbox {
            v.extend_from_slice(&bb);
        }
        v
    }
}

/// The two aggregation MLPs: a shared per-point net pooled into a proposal
/// feature of width D, and a head mapping that to the E geometric channels.
#[derive(Debug, Clone)]
pub struct AggregationNet {
    pub shared: Mlp,
    pub head: Mlp,
}

impl AggregationNet {
    pub fn new(cfg: &Config, rng: &mut SeededRng) -> AggregationNet {
        AggregationNet {
            shared: Mlp::new(&[cfg.feature_f + 3, 128, 128, cfg.feature_d], rng),
            head: Mlp::new(&[cfg.feature_d, 128, 128, cfg.feature_e], rng),
        }
    }

    pub fn params(&mut self) -> Vec<ParamRef<'_>> {
        let mut p = self.shared.params("agg.shared");
        p.extend(self.head.params("agg.head"));
        p
    }

    pub fn zero_grads(&mut self) {
        self.shared.zero_grads();
        self.head.zero_grads();
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint) {
        for (n, s, d) in self.shared.tensors("agg.shared") {
            ckpt.push(&n, s, d);
        }
        for (n, s, d) in self.head.tensors("agg.head") {
            ckpt.push(&n, s, d);
        }
    }

    pub fn load_from(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.shared.load_tensors("agg.shared", ckpt)?;
        self.head.load_tensors("agg.head", ckpt)
    }
}

/// Rows [f_i || (x_i - y_j)] for every member of a proposal.
pub fn proposal_rows(
    features: &[Vec<f64>],
    positions: &[[f64; 3]],
    proposal: &Proposal,
) -> Mat {
    Mat::from_rows(
        proposal
            .members
            .iter()
            .map(|&i| {
                let mut row = features[i].clone();
                row.extend_from_slice(&[
                    positions[i][0] - proposal.center[0],
                    positions[i][1] - proposal.center[1],
                    positions[i][2] - proposal.center[2],
                ]);
                row
            })
            .collect(),
    )
}

/// g_j: shared MLP over the member rows, channel-wise max pooled.
pub fn proposal_feature(net: &AggregationNet, rows: &Mat) -> Vec<f64> {
    let hidden = net.shared.forward(rows);
    let mask = vec![true; hidden.rows];
    let (pooled, _) = masked_max_pool(&hidden, &mask).expect("proposal has members");
    pooled
}

/// Decodes the raw E-vector of the geometric head for a proposal center.
pub fn decode_geometric(out: &[f64], center: &[f64; 3], set: FeatureSet) -> GeometricFeature {
    GeometricFeature {
        refined_center: [center[0] + out[0], center[1] + out[1], center[2] + out[2]],
        radius: (set != FeatureSet::Center).then(|| out[3]),
        bbox: (set == FeatureSet::Full).then(|| [out[4], out[5], out[6]]),
    }
}

/// Runs both MLPs over every proposal. Pure and parallel over proposals.
pub fn learned_features(
    net: &AggregationNet,
    features: &[Vec<f64>],
    positions: &[[f64; 3]],
    proposals: &[Proposal],
    set: FeatureSet,
) -> Vec<GeometricFeature> {
    proposals
        .par_iter()
        .map(|p| {
            let rows = proposal_rows(features, positions, p);
            let g = proposal_feature(net, &rows);
            let out = net.head.forward(&Mat::from_rows(vec![g]));
            decode_geometric(out.row(0), &p.center, set)
        })
        .collect()
}

/// Loss of one proposal against its closest ground-truth instance:
/// Huber(y + dy - c*) + Huber(r - r*) + Huber(bb - bb*) over the enabled
/// channels. Returns (loss, d loss / d raw head output).
pub fn geometric_loss_terms(
    out: &[f64],
    center: &[f64; 3],
    gt: &InstanceGT4D,
    delta: f64,
    set: FeatureSet,
) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grad = vec![0.0; out.len()];
    let res_c: Vec<f64> = (0..3)
        .map(|k| center[k] + out[k] - gt.center[k])
        .collect();
    let (lc, gc) = huber(&res_c, delta);
    loss += lc;
    grad[..3].copy_from_slice(&gc);
    if set != FeatureSet::Center {
        let (lr, gr) = huber(&[out[3] - gt.radius], delta);
        loss += lr;
        grad[3] = gr[0];
    }
    if set == FeatureSet::Full {
        let res_bb: Vec<f64> = (0..3).map(|k| out[4 + k] - gt.bbox_size[k]).collect();
        let (lb, gb) = huber(&res_bb, delta);
        loss += lb;
        grad[4..7].copy_from_slice(&gb);
    }
    (loss, grad)
}

/// Index of the ground-truth instance whose center is nearest to `center`.
pub fn closest_gt(center: &[f64; 3], gts: &[InstanceGT4D]) -> Option<usize> {
    gts.iter()
        .enumerate()
        .map(|(i, g)| (dist2(center, &g.center), i))
        .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)))
        .map(|(_, i)| i)
}

/// Forward + backward over every proposal, accumulating gradients into the
/// net. Returns the raw L_agg averaged over proposals; gradients are scaled
/// by `weight` (the schedule's gamma). Proposals are excluded when there is
/// no ground truth at all.
pub fn aggregation_backprop(
    net: &mut AggregationNet,
    features: &[Vec<f64>],
    positions: &[[f64; 3]],
    proposals: &[Proposal],
    gts: &[InstanceGT4D],
    cfg: &Config,
    weight: f64,
) -> Result<f64> {
    if gts.is_empty() || proposals.is_empty() {
        return Ok(0.0);
    }
    let scale = 1.0 / proposals.len() as f64;
    let gscale = weight * scale;
    let mut total = 0.0;
    for p in proposals {
        let rows = proposal_rows(features, positions, p);
        let (hidden, shared_cache) = net.shared.forward_cached(&rows);
        let mask = vec![true; hidden.rows];
        let (g, argmax) = masked_max_pool(&hidden, &mask)?;
        let (out, head_cache) = net.head.forward_cached(&Mat::from_rows(vec![g]));
        let gt = &gts[closest_gt(&p.center, gts).unwrap()];
        let (loss, dout) =
            geometric_loss_terms(out.row(0), &p.center, gt, cfg.huber_delta, cfg.features);
        total += loss * scale;
        if weight == 0.0 {
            continue;
        }
        let dout: Vec<f64> = dout.iter().map(|d| d * gscale).collect();
        let dg = net
            .head
            .backward(&head_cache, &Mat::from_rows(vec![dout]));
        let mut dhidden = Mat::zeros(hidden.rows, hidden.cols);
        max_pool_backward(dg.row(0), &argmax, &mut dhidden);
        net.shared.backward(&shared_cache, &dhidden);
    }
    Ok(total)
}

/// Average geometric loss without touching gradients.
pub fn aggregation_loss(
    net: &AggregationNet,
    features: &[Vec<f64>],
    positions: &[[f64; 3]],
    proposals: &[Proposal],
    gts: &[InstanceGT4D],
    cfg: &Config,
) -> f64 {
    if gts.is_empty() || proposals.is_empty() {
        return 0.0;
    }
    let total: f64 = proposals
        .par_iter()
        .map(|p| {
            let rows = proposal_rows(features, positions, p);
            let g = proposal_feature(net, &rows);
            let out = net.head.forward(&Mat::from_rows(vec![g]));
            let gt = &gts[closest_gt(&p.center, gts).unwrap()];
            geometric_loss_terms(out.row(0), &p.center, gt, cfg.huber_delta, cfg.features).0
        })
        .sum();
    total / proposals.len() as f64
}

/// Standard density clustering. With min_points = 1 every vector is a core
/// point, so clusters are exactly the connected components of the eps-graph
/// and there is no noise. Noise points (only possible when min_points > 1)
/// get label `usize::MAX`. Cluster ids are assigned in order of each
/// cluster's lowest member index.
pub fn dbscan(vectors: &[Vec<f64>], eps: f64, min_points: usize) -> Vec<usize> {
    assert!(eps > 0.0);
    const UNVISITED: usize = usize::MAX - 1;
    const NOISE: usize = usize::MAX;
    let n = vectors.len();
    let eps2 = eps * eps;
    let dist2 = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let neighbors = |i: usize| -> Vec<usize> {
        (0..n)
            .filter(|&j| dist2(&vectors[i], &vectors[j]) <= eps2)
            .collect()
    };
    let mut labels = vec![UNVISITED; n];
    let mut cluster = 0usize;
    for i in 0..n {
        if labels[i] != UNVISITED {
            continue;
        }
        let seeds = neighbors(i);
        if seeds.len() < min_points {
            labels[i] = NOISE;
            continue;
        }
        labels[i] = cluster;
        let mut queue: std::collections::VecDeque<usize> = seeds.into();
        while let Some(q) = queue.pop_front() {
            if labels[q] == NOISE {
                labels[q] = cluster; // border point
            }
            if labels[q] != UNVISITED {
                continue;
            }
            labels[q] = cluster;
            let qn = neighbors(q);
            if qn.len() >= min_points {
                queue.extend(qn);
            }
        }
        cluster += 1;
    }
    labels
}

/// A merged window instance: volume point indices plus the representative
/// center used for conflict resolution.
#[derive(Debug, Clone)]
pub struct WindowInstance {
    pub points: Vec<usize>,
    pub center: [f64; 3],
}

/// Unions the point sets of each cluster. A point claimed by two clusters
/// goes to the cluster whose center is nearest to the point's `point_pos`
/// entry (ties to the lower cluster id), so the output partitions its
/// covered points.
pub fn merge(
    proposals: &[Proposal],
    labels: &[usize],
    representatives: &[[f64; 3]],
    point_pos: &[[f64; 3]],
) -> Vec<WindowInstance> {
    assert_eq!(labels.len(), proposals.len());
    assert_eq!(representatives.len(), proposals.len());
    let num_clusters = labels
        .iter()
        .filter(|&&l| l != usize::MAX)
        .max()
        .map(|&m| m + 1)
        .unwrap_or(0);
    let mut centers = vec![[0.0f64; 3]; num_clusters];
    let mut counts = vec![0usize; num_clusters];
    for (j, &l) in labels.iter().enumerate() {
        if l == usize::MAX {
            continue;
        }
        for k in 0..3 {
            centers[l][k] += representatives[j][k];
        }
        counts[l] += 1;
    }
    for (c, &n) in centers.iter_mut().zip(&counts) {
        if n > 0 {
            for k in 0..3 {
                c[k] /= n as f64;
            }
        }
    }

    // point -> owning cluster, nearest center wins.
    let mut owner: HashMap<usize, usize> = HashMap::new();
    for (j, p) in proposals.iter().enumerate() {
        let l = labels[j];
        if l == usize::MAX {
            continue;
        }
        for &pt in &p.members {
            owner
                .entry(pt)
                .and_modify(|cur| {
                    if *cur != l {
                        let d_cur = dist2(&point_pos[pt], &centers[*cur]);
                        let d_new = dist2(&point_pos[pt], &centers[l]);
                        if d_new < d_cur || (d_new == d_cur && l < *cur) {
                            *cur = l;
                        }
                    }
                })
                .or_insert(l);
        }
    }

    let mut points_per_cluster: Vec<Vec<usize>> = vec![Vec::new(); num_clusters];
    for (&pt, &c) in &owner {
        points_per_cluster[c].push(pt);
    }
    points_per_cluster
        .into_iter()
        .enumerate()
        .filter(|(_, pts)| !pts.is_empty())
        .map(|(c, mut pts)| {
            pts.sort_unstable();
            WindowInstance {
                points: pts,
                center: centers[c],
            }
        })
        .collect()
}

fn set_iou(a: &[usize], b: &[usize]) -> f64 {
    // Both sorted ascending.
    let mut inter = 0usize;
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

/// Non-maximum suppression baseline: proposals sorted by member count are
/// kept greedily while their member-set IoU with every kept proposal stays
/// at or below [`NMS_IOU`]. Points not claimed by exactly one kept proposal
/// go to the nearest kept center.
pub fn nms_baseline(proposals: &[Proposal], point_pos: &[[f64; 3]]) -> Vec<WindowInstance> {
    if proposals.is_empty() {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| {
        proposals[b]
            .members
            .len()
            .cmp(&proposals[a].members.len())
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &j in &order {
        if kept
            .iter()
            .all(|&k| set_iou(&proposals[j].members, &proposals[k].members) <= NMS_IOU)
        {
            kept.push(j);
        }
    }

    let nearest_kept = |pt: usize| -> usize {
        kept.iter()
            .enumerate()
            .map(|(slot, &k)| (dist2(&point_pos[pt], &proposals[k].center), slot))
            .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)))
            .unwrap()
            .1
    };

    let mut membership: HashMap<usize, Vec<usize>> = HashMap::new();
    for (slot, &k) in kept.iter().enumerate() {
        for &pt in &proposals[k].members {
            membership.entry(pt).or_default().push(slot);
        }
    }
    // Points of suppressed proposals that no kept proposal covers.
    for p in proposals {
        for &pt in &p.members {
            membership.entry(pt).or_default();
        }
    }

    let mut points_per_slot: Vec<Vec<usize>> = vec![Vec::new(); kept.len()];
    for (&pt, slots) in &membership {
        let slot = match slots.len() {
            1 => slots[0],
            _ => nearest_kept(pt),
        };
        points_per_slot[slot].push(pt);
    }
    points_per_slot
        .into_iter()
        .enumerate()
        .filter(|(_, pts)| !pts.is_empty())
        .map(|(slot, mut pts)| {
            pts.sort_unstable();
            WindowInstance {
                points: pts,
                center: proposals[kept[slot]].center,
            }
        })
        .collect()
}

/// Modal semantic class over an instance's points; ties resolve to the
/// lowest class id.
pub fn majority_vote(instance_points: &[usize], semantics: &[u16]) -> u16 {
    assert!(!instance_points.is_empty());
    let mut counts: HashMap<u16, usize> = HashMap::new();
    for &p in instance_points {
        *counts.entry(semantics[p]).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .unwrap()
        .0
}

/// Gaussian membership probability of a point for a proposal center.
pub fn gaussian_probability(point: &[f64; 3], center: &[f64; 3], sigma: f64) -> f64 {
    (-dist2(point, center) / (2.0 * sigma * sigma)).exp()
}

/// The Gaussian-distribution comparison variant: every foreground point
/// with objectness at or above the threshold seeds a proposal (optionally
/// thinned by greedy highest-objectness selection within
/// `selection_radius`); membership is a Gaussian probability test; the
/// resulting proposals are aggregated by DBScan over their member-mean
/// positions. Returns an empty set when no point clears the threshold.
pub fn gaussian_variant(
    positions: &[[f64; 3]],
    objectness: &[f64],
    foreground: &[bool],
    cfg: &Config,
) -> Vec<WindowInstance> {
    let mut candidates: Vec<usize> = (0..positions.len())
        .filter(|&i| foreground[i] && objectness[i] >= cfg.objectness_threshold)
        .collect();
    if candidates.is_empty() {
        return Vec::new();
    }

    if cfg.selection_radius > 0.0 {
        candidates.sort_by(|&a, &b| {
            objectness[b]
                .partial_cmp(&objectness[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut selected: Vec<usize> = Vec::new();
        let r2 = cfg.selection_radius * cfg.selection_radius;
        for &c in &candidates {
            if selected
                .iter()
                .all(|&s| dist2(&positions[c], &positions[s]) > r2)
            {
                selected.push(c);
            }
        }
        selected.sort_unstable();
        candidates = selected;
    }

    let fg_points: Vec<usize> = (0..positions.len()).filter(|&i| foreground[i]).collect();
    let proposals: Vec<Proposal> = candidates
        .iter()
        .map(|&c| {
            let members: Vec<usize> = fg_points
                .iter()
                .copied()
                .filter(|&i| {
                    gaussian_probability(&positions[i], &positions[c], cfg.gaussian_sigma)
                        >= cfg.probability_threshold
                })
                .collect();
            Proposal {
                center: positions[c],
                members,
            }
        })
        .filter(|p| !p.members.is_empty())
        .collect();
    if proposals.is_empty() {
        return Vec::new();
    }

    // Aggregate with the cluster mean point of each proposal.
    let means: Vec<[f64; 3]> = proposals
        .iter()
        .map(|p| {
            let mut m = [0.0; 3];
            for &i in &p.members {
                for k in 0..3 {
                    m[k] += positions[i][k];
                }
            }
            for mk in &mut m {
                *mk /= p.members.len() as f64;
            }
            m
        })
        .collect();
    let mean_vecs: Vec<Vec<f64>> = means.iter().map(|m| m.to_vec()).collect();
    let labels = dbscan(&mean_vecs, cfg.dbscan_eps, cfg.dbscan_min_points);
    merge(&proposals, &labels, &means, positions)
}
