//! Per-point feature encoder plus the semantic, objectness and voting
//! heads, and the two-phase multi-task trainer.
//!
//! The encoder computes hand-crafted local descriptors per point (position
//! relative to the volume centroid, offset to the local centroid within
//! 1 m, local covariance eigenvalues, normalized neighbor count, scan-index
//! one-hot) and passes them through a trainable MLP (64, 128, F). All
//! descriptor channels are invariant under rigid translation of the volume.

use rayon::prelude::*;

use crate::aggregation::{aggregation_backprop, AggregationNet};
use crate::config::{Config, Sampling};
use crate::grid::{dist2, UniformGrid};
use crate::lidar_io::Sequence;
use crate::proposals::{apply_votes, fps, group, random_sample, Proposal, Vote};
use crate::rng::SeededRng;
use crate::synth::{self, ScanFrame};
use crate::tinynet::{
    huber, sigmoid, softmax_cross_entropy, Checkpoint, Mat, Mlp, ParamRef, SgdMomentum,
};
use crate::types::{InstanceGT4D, PointCloud4D};
use crate::volume4d::{form_volume, gt_objectness, recompute_gt, ScanView};
use crate::{Error, Result};

/// Local neighborhood radius for the descriptor statistics, meters.
const NEIGHBOR_RADIUS: f64 = 1.0;

/// Normalizer for the local point count channel.
const COUNT_NORM: f64 = 64.0;

/// Per-point vote offsets and the foreground mask they apply to.
#[derive(Debug, Clone)]
pub struct VoteField {
    pub offsets: Vec<[f64; 3]>,
    pub foreground: Vec<bool>,
}

/// Descriptor width for a window of `t` scans.
pub fn descriptor_width(t: usize) -> usize {
    10 + t
}

/// Eigenvalues of a symmetric 3x3 matrix, descending (analytic form).
fn eigvals_sym3(a: [[f64; 3]; 3]) -> [f64; 3] {
    let p1 = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
    if p1 <= 0.0 {
        let mut e = [a[0][0], a[1][1], a[2][2]];
        e.sort_by(|x, y| y.partial_cmp(x).unwrap());
        return e;
    }
    let q = (a[0][0] + a[1][1] + a[2][2]) / 3.0;
    let p2 = (a[0][0] - q).powi(2) + (a[1][1] - q).powi(2) + (a[2][2] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let mut b = a;
    for i in 0..3 {
        b[i][i] -= q;
    }
    for row in &mut b {
        for v in row {
            *v /= p;
        }
    }
    let detb = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1])
        - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
        + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
    let r = (detb / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let e1 = q + 2.0 * p * phi.cos();
    let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    [e1, 3.0 * q - e1 - e3, e3]
}

/// Hand-crafted geometric descriptors, one row per point.
pub fn compute_descriptors(volume: &PointCloud4D, cfg: &Config) -> Mat {
    let n = volume.len();
    let t = cfg.temporal_window;
    let width = descriptor_width(t);
    if n == 0 {
        return Mat::zeros(0, width);
    }
    let mut centroid = [0.0f64; 3];
    for p in &volume.positions {
        for k in 0..3 {
            centroid[k] += p[k];
        }
    }
    for c in &mut centroid {
        *c /= n.max(1) as f64;
    }
    let grid = UniformGrid::build(&volume.positions, NEIGHBOR_RADIUS);

    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let p = &volume.positions[i];
            let mut row = Vec::with_capacity(width);
            row.extend_from_slice(&[p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]]);

            let neigh = grid.within(p, NEIGHBOR_RADIUS);
            let m = neigh.len() as f64;
            let mut local = [0.0f64; 3];
            for &j in &neigh {
                for k in 0..3 {
                    local[k] += volume.positions[j][k];
                }
            }
            for l in &mut local {
                *l /= m;
            }
            row.extend_from_slice(&[local[0] - p[0], local[1] - p[1], local[2] - p[2]]);

            let mut cov = [[0.0f64; 3]; 3];
            for &j in &neigh {
                let q = &volume.positions[j];
                let d = [q[0] - local[0], q[1] - local[1], q[2] - local[2]];
                for a in 0..3 {
                    for b in 0..3 {
                        cov[a][b] += d[a] * d[b];
                    }
                }
            }
            for covrow in &mut cov {
                for v in covrow.iter_mut() {
                    *v /= m;
                }
            }
            row.extend_from_slice(&eigvals_sym3(cov));
            row.push((m / COUNT_NORM).min(1.0));

            let mut one_hot = vec![0.0; t];
            one_hot[volume.scan_index[i] as usize] = 1.0;
            row.extend(one_hot);
            row
        })
        .collect();
    Mat::from_rows(rows)
}

/// All trainable parts of the pipeline.
#[derive(Debug, Clone)]
pub struct Model {
    pub encoder: Mlp,
    pub semantic: Mlp,
    pub objectness: Mlp,
    pub voting: Mlp,
    pub aggregation: AggregationNet,
    pub temporal_window: usize,
}

impl Model {
    pub fn new(cfg: &Config) -> Model {
        let mut rng = SeededRng::substream(cfg.rng_seed, 0xB007);
        let f = cfg.feature_f;
        Model {
            encoder: Mlp::new(&[descriptor_width(cfg.temporal_window), 64, 128, f], &mut rng),
            semantic: Mlp::new(&[f, 64, cfg.num_classes], &mut rng),
            objectness: Mlp::new(&[f, 64, 1], &mut rng),
            voting: Mlp::new(&[f, 64, 3], &mut rng),
            aggregation: AggregationNet::new(cfg, &mut rng),
            temporal_window: cfg.temporal_window,
        }
    }

    /// Parameters trained in phase 1 (everything but aggregation).
    pub fn phase1_params(&mut self) -> Vec<ParamRef<'_>> {
        let mut p = self.encoder.params("encoder");
        p.extend(self.semantic.params("semantic"));
        p.extend(self.objectness.params("objectness"));
        p.extend(self.voting.params("voting"));
        p
    }

    pub fn zero_phase1_grads(&mut self) {
        self.encoder.zero_grads();
        self.semantic.zero_grads();
        self.objectness.zero_grads();
        self.voting.zero_grads();
    }

    /// Bit-exact snapshot of the phase-1 parameter tensors.
    pub fn phase1_snapshot(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for (name, _, data) in self
            .encoder
            .tensors("encoder")
            .into_iter()
            .chain(self.semantic.tensors("semantic"))
            .chain(self.objectness.tensors("objectness"))
            .chain(self.voting.tensors("voting"))
        {
            out.push((name, data));
        }
        out
    }

    pub fn to_checkpoint(&self, iteration: usize, phase: usize) -> Checkpoint {
        let mut ckpt = Checkpoint::default();
        for (n, s, d) in self
            .encoder
            .tensors("encoder")
            .into_iter()
            .chain(self.semantic.tensors("semantic"))
            .chain(self.objectness.tensors("objectness"))
            .chain(self.voting.tensors("voting"))
        {
            ckpt.push(&n, s, d);
        }
        self.aggregation.save_into(&mut ckpt);
        ckpt.push_scalar("meta.iteration", iteration as f64);
        ckpt.push_scalar("meta.phase", phase as f64);
        ckpt.push_scalar("meta.temporal_window", self.temporal_window as f64);
        ckpt
    }

    pub fn load_checkpoint(cfg: &Config, ckpt: &Checkpoint) -> Result<Model> {
        let t = ckpt.scalar("meta.temporal_window")? as usize;
        if t != cfg.temporal_window {
            return Err(Error::Config(format!(
                "checkpoint was trained with temporal_window={t}, config has {}",
                cfg.temporal_window
            )));
        }
        let mut model = Model::new(cfg);
        model.encoder.load_tensors("encoder", ckpt)?;
        model.semantic.load_tensors("semantic", ckpt)?;
        model.objectness.load_tensors("objectness", ckpt)?;
        model.voting.load_tensors("voting", ckpt)?;
        model.aggregation.load_from(ckpt)?;
        Ok(model)
    }
}

/// Per-point outputs of the encoder and heads on one volume.
pub struct HeadOutputs {
    pub features: Vec<Vec<f64>>,
    pub class_logits: Mat,
    pub classes: Vec<u16>,
    pub objectness: Vec<f64>,
    pub offsets: Vec<[f64; 3]>,
}

/// argmax with ties resolved to the lowest class id.
pub fn argmax_class(logits: &[f64]) -> u16 {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best as u16
}

/// Deterministic inference pass over one volume.
pub fn run_heads(model: &Model, volume: &PointCloud4D, cfg: &Config) -> HeadOutputs {
    let descriptors = compute_descriptors(volume, cfg);
    let features_mat = model.encoder.forward(&descriptors);
    let class_logits = model.semantic.forward(&features_mat);
    let obj_z = model.objectness.forward(&features_mat);
    let vote_out = model.voting.forward(&features_mat);

    let n = volume.len();
    let features: Vec<Vec<f64>> = (0..n).map(|i| features_mat.row(i).to_vec()).collect();
    let classes: Vec<u16> = (0..n).map(|i| argmax_class(class_logits.row(i))).collect();
    let objectness: Vec<f64> = (0..n).map(|i| sigmoid(obj_z.at(i, 0))).collect();
    let offsets: Vec<[f64; 3]> = (0..n)
        .map(|i| [vote_out.at(i, 0), vote_out.at(i, 1), vote_out.at(i, 2)])
        .collect();
    HeadOutputs {
        features,
        class_logits,
        classes,
        objectness,
        offsets,
    }
}

/// Gaussian objectness training target: proximity of a thing point to its
/// instance center, zero for stuff.
pub fn objectness_target(
    position: &[f64; 3],
    center: Option<&[f64; 3]>,
    sigma: f64,
) -> f64 {
    match center {
        Some(c) => (-dist2(position, c) / (2.0 * sigma * sigma)).exp(),
        None => 0.0,
    }
}

/// L_vot over a volume given predicted offsets: mean Huber distance between
/// x + dx and the instance center over foreground points; 0 when no point
/// is foreground.
pub fn voting_loss(
    positions: &[[f64; 3]],
    offsets: &[[f64; 3]],
    centers: &[Option<[f64; 3]>],
    delta: f64,
) -> f64 {
    let mut m = 0usize;
    let mut total = 0.0;
    for ((p, d), c) in positions.iter().zip(offsets).zip(centers) {
        if let Some(c) = c {
            let res = [
                p[0] + d[0] - c[0],
                p[1] + d[1] - c[1],
                p[2] + d[2] - c[2],
            ];
            total += huber(&res, delta).0;
            m += 1;
        }
    }
    if m == 0 {
        0.0
    } else {
        total / m as f64
    }
}

/// Per-point ground-truth instance center lookup (None for stuff points).
pub fn center_targets(volume: &PointCloud4D, gts: &[InstanceGT4D]) -> Vec<Option<[f64; 3]>> {
    let by_id: std::collections::HashMap<u16, [f64; 3]> =
        gts.iter().map(|g| (g.id, g.center)).collect();
    match &volume.instance_gt {
        Some(inst) => inst
            .iter()
            .map(|&i| if i > 0 { by_id.get(&i).copied() } else { None })
            .collect(),
        None => vec![None; volume.len()],
    }
}

/// Raw loss values of one phase-1 pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct Phase1Losses {
    pub l_sem: f64,
    pub l_vot: f64,
    pub l_obj: f64,
}

/// Forward + backward of the phase-1 multi-task objective on one volume.
/// Gradients are scaled by `w = (w_sem, w_vot, w_obj)` and accumulated into
/// the model; pass `w = (0,0,0)` for a loss-only evaluation.
pub fn phase1_backprop(
    model: &mut Model,
    volume: &PointCloud4D,
    gts: &[InstanceGT4D],
    cfg: &Config,
    w: (f64, f64, f64),
) -> Result<Phase1Losses> {
    let n = volume.len();
    let semantic_gt = volume
        .semantic_gt
        .as_ref()
        .ok_or_else(|| Error::Format("training volumes need semantic labels".into()))?;
    let centers = center_targets(volume, gts);
    let m = centers.iter().filter(|c| c.is_some()).count();

    let descriptors = compute_descriptors(volume, cfg);
    let (features, enc_cache) = model.encoder.forward_cached(&descriptors);
    let (sem_logits, sem_cache) = model.semantic.forward_cached(&features);
    let (obj_z, obj_cache) = model.objectness.forward_cached(&features);
    let (vote_out, vote_cache) = model.voting.forward_cached(&features);

    let mut losses = Phase1Losses::default();
    let mut d_sem = Mat::zeros(n, sem_logits.cols);
    let mut d_obj = Mat::zeros(n, 1);
    let mut d_vote = Mat::zeros(n, 3);

    for i in 0..n {
        let target = semantic_gt[i] as usize;
        let (l, g) = softmax_cross_entropy(sem_logits.row(i), target.min(sem_logits.cols - 1));
        losses.l_sem += l / n as f64;
        for (c, &gv) in g.iter().enumerate() {
            *d_sem.at_mut(i, c) = gv * w.0 / n as f64;
        }

        let o = sigmoid(obj_z.at(i, 0));
        let t = objectness_target(
            &volume.positions[i],
            centers[i].as_ref(),
            cfg.objectness_sigma,
        );
        let e = o - t;
        losses.l_obj += e * e / n as f64;
        *d_obj.at_mut(i, 0) = 2.0 * e * o * (1.0 - o) * w.2 / n as f64;

        if let Some(c) = &centers[i] {
            let p = &volume.positions[i];
            let res = [
                p[0] + vote_out.at(i, 0) - c[0],
                p[1] + vote_out.at(i, 1) - c[1],
                p[2] + vote_out.at(i, 2) - c[2],
            ];
            let (l, g) = huber(&res, cfg.huber_delta);
            losses.l_vot += l / m as f64;
            for (k, &gv) in g.iter().enumerate() {
                *d_vote.at_mut(i, k) = gv * w.1 / m as f64;
            }
        }
    }

    if w == (0.0, 0.0, 0.0) {
        return Ok(losses);
    }

    let mut d_features = model.semantic.backward(&sem_cache, &d_sem);
    let d_from_obj = model.objectness.backward(&obj_cache, &d_obj);
    let d_from_vote = model.voting.backward(&vote_cache, &d_vote);
    for (df, (fo, fv)) in d_features
        .data
        .iter_mut()
        .zip(d_from_obj.data.iter().zip(&d_from_vote.data))
    {
        *df += fo + fv;
    }
    model.encoder.backward(&enc_cache, &d_features);
    Ok(losses)
}

/// In-memory training data: one labeled world-frame sequence.
pub struct Dataset {
    pub scans: Vec<DatasetScan>,
}

pub struct DatasetScan {
    pub positions: Vec<[f64; 3]>,
    pub remission: Vec<f32>,
    pub labels: Vec<(u16, u16)>,
}

impl Dataset {
    pub fn from_sequence(seq: &Sequence) -> Result<Dataset> {
        let labels = seq
            .labels
            .as_ref()
            .ok_or_else(|| Error::Format("training requires a labeled sequence".into()))?;
        Ok(Dataset {
            scans: seq
                .scans
                .iter()
                .zip(labels)
                .map(|(s, l)| DatasetScan {
                    positions: s.positions.clone(),
                    remission: s.remission.clone(),
                    labels: l.clone(),
                })
                .collect(),
        })
    }

    pub fn from_frames(frames: &[ScanFrame]) -> Dataset {
        Dataset {
            scans: frames
                .iter()
                .map(|f| DatasetScan {
                    positions: f.scan.positions.clone(),
                    remission: f.scan.remission.clone(),
                    labels: f.labels.clone(),
                })
                .collect(),
        }
    }

    pub fn num_scans(&self) -> usize {
        self.scans.len()
    }

    /// Builds the training volume for window `t` with ground-truth
    /// objectness driving the importance sampling.
    pub fn volume_for(&self, t: usize, cfg: &Config, rng: &mut SeededRng) -> PointCloud4D {
        let start = (t + 1).saturating_sub(cfg.temporal_window);
        let weights: Vec<Vec<f64>> = (start..=t)
            .map(|s| gt_objectness(&self.scans[s].labels))
            .collect();
        let views: Vec<ScanView<'_>> = (start..=t)
            .enumerate()
            .map(|(wi, s)| ScanView {
                scan_id: s as u32,
                positions: &self.scans[s].positions,
                remission: &self.scans[s].remission,
                labels: Some(&self.scans[s].labels),
                objectness: Some(&weights[wi]),
            })
            .collect();
        form_volume(&views, cfg, rng)
    }
}

/// How the trainer runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainMode {
    /// Both phases on the model's own predictions.
    Full,
    /// Phase 2 only, with oracle votes perturbed by Gaussian noise of the
    /// given sigma standing in for the voting head. Used by the ablation
    /// harness to study aggregation in isolation.
    AggregationOnly { vote_noise: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct LossRow {
    pub iteration: usize,
    pub l_sem: f64,
    pub l_vot: f64,
    pub l_agg: f64,
    pub l_obj: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainSummary {
    pub initial_vote_loss: f64,
    pub final_vote_loss: f64,
    pub initial_vote_error: f64,
    pub final_vote_error: f64,
    pub phase1_iters: usize,
    pub phase2_iters: usize,
}

pub struct TrainOutput {
    pub model: Model,
    pub rows: Vec<LossRow>,
    pub summary: TrainSummary,
}

/// Mean L_vot and mean Euclidean vote-to-center error over every window of
/// the dataset, using the model's current voting head.
pub fn evaluate_votes(model: &Model, dataset: &Dataset, cfg: &Config) -> (f64, f64) {
    let mut loss_sum = 0.0;
    let mut err_sum = 0.0;
    let mut err_count = 0usize;
    for t in 0..dataset.num_scans() {
        let mut rng = SeededRng::substream(cfg.rng_seed, t as u64);
        let volume = dataset.volume_for(t, cfg, &mut rng);
        let gts = recompute_gt(&volume);
        let centers = center_targets(&volume, &gts);
        let outputs = run_heads(model, &volume, cfg);
        loss_sum += voting_loss(&volume.positions, &outputs.offsets, &centers, cfg.huber_delta);
        for (i, c) in centers.iter().enumerate() {
            if let Some(c) = c {
                let p = &volume.positions[i];
                let d = &outputs.offsets[i];
                let landed = [p[0] + d[0], p[1] + d[1], p[2] + d[2]];
                err_sum += dist2(&landed, c).sqrt();
                err_count += 1;
            }
        }
    }
    (
        loss_sum / dataset.num_scans() as f64,
        err_sum / err_count.max(1) as f64,
    )
}

fn sample_centers(
    votes: &[Vote],
    cfg: &Config,
    rng: &mut SeededRng,
) -> Vec<usize> {
    match cfg.sampling {
        Sampling::Fps => fps(votes, cfg.num_proposals),
        Sampling::Random => random_sample(votes, cfg.num_proposals, rng),
    }
}

/// One phase-2 step: proposals from the (frozen) votes, then aggregation
/// loss and gradients. Returns the raw L_agg.
fn phase2_step(
    model: &mut Model,
    volume: &PointCloud4D,
    gts: &[InstanceGT4D],
    votes: &[Vote],
    cfg: &Config,
    rng: &mut SeededRng,
    opt: &mut SgdMomentum,
) -> Result<f64> {
    if votes.is_empty() || gts.is_empty() {
        return Ok(0.0);
    }
    let centers = sample_centers(votes, cfg, rng);
    let proposals: Vec<Proposal> = group(votes, &centers, cfg.group_radius);
    let features = match &volume.features {
        Some(f) => f,
        None => return Err(Error::Numeric("phase 2 volume lacks features".into())),
    };
    model.aggregation.zero_grads();
    let l_agg = aggregation_backprop(
        &mut model.aggregation,
        features,
        &volume.positions,
        &proposals,
        gts,
        cfg,
        cfg.gamma,
    )?;
    opt.step(&mut model.aggregation.params())?;
    Ok(l_agg)
}

/// Loss values recomputed from an existing inference pass (no backward).
fn losses_from_outputs(
    outputs: &HeadOutputs,
    volume: &PointCloud4D,
    gts: &[InstanceGT4D],
    cfg: &Config,
) -> Phase1Losses {
    let n = volume.len();
    let semantic_gt = volume.semantic_gt.as_ref().expect("labeled volume");
    let centers = center_targets(volume, gts);
    let mut losses = Phase1Losses::default();
    for i in 0..n {
        let target = (semantic_gt[i] as usize).min(outputs.class_logits.cols - 1);
        losses.l_sem += softmax_cross_entropy(outputs.class_logits.row(i), target).0 / n as f64;
        let t = objectness_target(
            &volume.positions[i],
            centers[i].as_ref(),
            cfg.objectness_sigma,
        );
        let e = outputs.objectness[i] - t;
        losses.l_obj += e * e / n as f64;
    }
    losses.l_vot = voting_loss(&volume.positions, &outputs.offsets, &centers, cfg.huber_delta);
    losses
}

/// Two-phase training. Phase 1 optimizes alpha * L_sem + beta * L_vot plus
/// the objectness regression; phase 2 freezes everything but the
/// aggregation nets and optimizes gamma * L_agg.
pub fn train(dataset: &Dataset, cfg: &Config, mode: TrainMode) -> Result<TrainOutput> {
    let mut model = Model::new(cfg);
    train_from(dataset, cfg, mode, &mut model, 0)
}

/// Resumable entry point: continues at `start_iter` over the combined
/// phase-1 + phase-2 schedule.
pub fn train_from(
    dataset: &Dataset,
    cfg: &Config,
    mode: TrainMode,
    model: &mut Model,
    start_iter: usize,
) -> Result<TrainOutput> {
    let (p1, p2) = match mode {
        TrainMode::Full => (cfg.phase1_iters, cfg.phase2_iters),
        TrainMode::AggregationOnly { .. } => (0, cfg.phase2_iters),
    };
    let (initial_vote_loss, initial_vote_error) = evaluate_votes(model, dataset, cfg);
    let mut opt1 = SgdMomentum::new(cfg.learning_rate, cfg.momentum);
    let mut opt2 = SgdMomentum::new(cfg.learning_rate, cfg.momentum);
    let mut rows = Vec::with_capacity(p1 + p2);

    for iter in start_iter..(p1 + p2) {
        let mut rng = SeededRng::substream(cfg.rng_seed ^ 0x7261_696E, iter as u64);
        let t = rng.draw_index(dataset.num_scans());
        let volume = dataset.volume_for(t, cfg, &mut rng);
        let gts = recompute_gt(&volume);

        let row = if iter < p1 {
            model.zero_phase1_grads();
            let losses =
                phase1_backprop(model, &volume, &gts, cfg, (cfg.alpha, cfg.beta, 1.0))?;
            opt1.step(&mut model.phase1_params())?;
            LossRow {
                iteration: iter,
                l_sem: losses.l_sem,
                l_vot: losses.l_vot,
                l_agg: 0.0,
                l_obj: losses.l_obj,
            }
        } else {
            // Frozen forward pass; only aggregation parameters move.
            let mut volume = volume;
            let outputs = run_heads(model, &volume, cfg);
            let losses = losses_from_outputs(&outputs, &volume, &gts, cfg);
            volume.features = Some(outputs.features.clone());
            let votes = match mode {
                TrainMode::Full => {
                    let foreground: Vec<bool> = volume
                        .instance_gt
                        .as_ref()
                        .map(|inst| inst.iter().map(|&i| i > 0).collect())
                        .unwrap_or_else(|| vec![false; volume.len()]);
                    apply_votes(&volume.positions, &outputs.offsets, &foreground)
                }
                TrainMode::AggregationOnly { vote_noise } => {
                    let mut offsets = synth::oracle_votes(&volume, &gts);
                    if vote_noise > 0.0 {
                        for o in &mut offsets {
                            for c in o.iter_mut() {
                                *c += vote_noise * rng.draw_normal();
                            }
                        }
                    }
                    let foreground: Vec<bool> = volume
                        .instance_gt
                        .as_ref()
                        .map(|inst| inst.iter().map(|&i| i > 0).collect())
                        .unwrap_or_else(|| vec![false; volume.len()]);
                    apply_votes(&volume.positions, &offsets, &foreground)
                }
            };
            let l_agg = phase2_step(model, &volume, &gts, &votes, cfg, &mut rng, &mut opt2)?;
            LossRow {
                iteration: iter,
                l_sem: losses.l_sem,
                l_vot: losses.l_vot,
                l_agg,
                l_obj: losses.l_obj,
            }
        };
        if !(row.l_sem.is_finite() && row.l_vot.is_finite() && row.l_agg.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite loss at iteration {iter}: L_sem={} L_vot={} L_agg={}",
                row.l_sem, row.l_vot, row.l_agg
            )));
        }
        rows.push(row);
    }

    let (final_vote_loss, final_vote_error) = evaluate_votes(model, dataset, cfg);
    Ok(TrainOutput {
        model: model.clone(),
        rows,
        summary: TrainSummary {
            initial_vote_loss,
            final_vote_loss,
            initial_vote_error,
            final_vote_error,
            phase1_iters: p1,
            phase2_iters: p2,
        },
    })
}
