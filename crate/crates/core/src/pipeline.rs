//! End-to-end orchestration over dataset directories: synthetic data
//! generation, training, windowed inference with tracklet stitching,
//! evaluation and ablation sweeps. The CLI is a thin wrapper over these
//! functions, and the acceptance suite drives them directly.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::aggregation::{
    dbscan, gaussian_variant, learned_features, merge, nms_baseline, GeometricFeature,
    WindowInstance, GAUSSIAN_PRESETS,
};
use crate::config::{AggregateMode, Config, FeatureSet, Sampling, Variant};
use crate::encoder_heads::{
    self, objectness_target, run_heads, train_from, Dataset, LossRow, Model, TrainMode,
    TrainSummary,
};
use crate::lidar_io::{write_predictions_with, Sequence};
use crate::metrics::{evaluate_dirs, EvalReport};
use crate::proposals::{apply_votes, fps, group, random_sample, Proposal, Vote};
use crate::rng::SeededRng;
use crate::synth::{self, SceneSpec};
use crate::tinynet::Checkpoint;
use crate::tracking::{Stitcher, WindowInstanceKeys};
use crate::types::{InstanceGT4D, PointCloud4D};
use crate::volume4d::{form_volume, recompute_gt, ScanView};
use crate::{Error, Result};

/// Stream tags for deriving independent substreams from the config seed.
const STREAM_VOLUME: u64 = 0x514C;
const STREAM_NOISE: u64 = 0x4E53;
const STREAM_SAMPLE: u64 = 0x5350;

pub struct InferOptions {
    /// Replace the learned heads with ground-truth semantics, oracle votes
    /// and ground-truth-derived objectness.
    pub oracle: bool,
    /// Gaussian noise sigma added to oracle vote offsets (oracle mode only).
    pub vote_noise: f64,
    /// Trained model; required unless `oracle` is set. With `oracle` set a
    /// model still supplies the encoder + aggregation nets for the learned
    /// feature path.
    pub model: Option<Model>,
}

impl Default for InferOptions {
    fn default() -> Self {
        InferOptions {
            oracle: false,
            vote_noise: 0.0,
            model: None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct InferStats {
    pub seconds: f64,
    pub windows: usize,
}

/// Generates a synthetic dataset (default scene when no spec is given).
pub fn run_synth_gen(spec_path: Option<&Path>, out_dir: &Path) -> Result<SceneSpec> {
    let spec = match spec_path {
        Some(p) => SceneSpec::load(p)?,
        None => SceneSpec::default_scene(),
    };
    synth::write_dataset(&spec, out_dir)?;
    Ok(spec)
}

fn require_finite(name: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numeric(format!("{name} is not finite")))
    }
}

/// Oracle geometric features: the nearest ground-truth instance supplies
/// the refined center, radius and bbox exactly.
fn oracle_features(
    proposals: &[Proposal],
    gts: &[InstanceGT4D],
    set: FeatureSet,
) -> Vec<GeometricFeature> {
    proposals
        .iter()
        .map(|p| {
            let gt = crate::aggregation::closest_gt(&p.center, gts)
                .map(|i| &gts[i]);
            match gt {
                Some(gt) => GeometricFeature {
                    refined_center: gt.center,
                    radius: (set != FeatureSet::Center).then_some(gt.radius),
                    bbox: (set == FeatureSet::Full).then_some(gt.bbox_size),
                },
                None => GeometricFeature {
                    refined_center: p.center,
                    radius: (set != FeatureSet::Center).then_some(0.0),
                    bbox: (set == FeatureSet::Full).then_some([0.0; 3]),
                },
            }
        })
        .collect()
}

/// Forms proposals and merges them into window instances according to the
/// configured aggregation mode.
fn aggregate_window(
    volume: &PointCloud4D,
    votes: &[Vote],
    features: Option<&Vec<Vec<f64>>>,
    gts: &[InstanceGT4D],
    cfg: &Config,
    model: Option<&Model>,
    rng: &mut SeededRng,
) -> Result<Vec<WindowInstance>> {
    if votes.is_empty() {
        return Ok(Vec::new());
    }
    let center_indices = match cfg.sampling {
        Sampling::Fps => fps(votes, cfg.num_proposals),
        Sampling::Random => random_sample(votes, cfg.num_proposals, rng),
    };
    let proposals = group(votes, &center_indices, cfg.group_radius);

    // Conflict resolution happens in vote space: each voted point is
    // located at its vote position.
    let mut point_pos: Vec<[f64; 3]> = volume.positions.clone();
    for v in votes {
        point_pos[v.point] = v.position;
    }

    let instances = match cfg.aggregate {
        AggregateMode::Nms => nms_baseline(&proposals, &point_pos),
        AggregateMode::Centers => {
            let centers: Vec<[f64; 3]> = proposals.iter().map(|p| p.center).collect();
            let vecs: Vec<Vec<f64>> = centers.iter().map(|c| c.to_vec()).collect();
            let labels = dbscan(&vecs, cfg.dbscan_eps, cfg.dbscan_min_points);
            merge(&proposals, &labels, &centers, &point_pos)
        }
        AggregateMode::Dbscan => {
            let geo: Vec<GeometricFeature> = match (model, features) {
                (Some(m), Some(f)) => {
                    learned_features(&m.aggregation, f, &volume.positions, &proposals, cfg.features)
                }
                _ => oracle_features(&proposals, gts, cfg.features),
            };
            let vecs: Vec<Vec<f64>> = geo.iter().map(|g| g.to_vec()).collect();
            let reps: Vec<[f64; 3]> = geo.iter().map(|g| g.refined_center).collect();
            let labels = dbscan(&vecs, cfg.dbscan_eps, cfg.dbscan_min_points);
            merge(&proposals, &labels, &reps, &point_pos)
        }
    };
    Ok(instances)
}

/// Windowed inference over a sequence directory: per window, votes are
/// grouped into proposals, aggregated into instances, stitched across
/// windows, and finally written as per-scan prediction label files.
pub fn run_inference(
    data_dir: &Path,
    out_dir: &Path,
    cfg: &Config,
    opts: &InferOptions,
) -> Result<InferStats> {
    if !opts.oracle && opts.model.is_none() {
        return Err(Error::Config(
            "inference needs a trained checkpoint or oracle mode".into(),
        ));
    }
    let start = Instant::now();
    let sequence = Sequence::load(data_dir, opts.oracle)?;
    let num_scans = sequence.num_scans();
    let model = opts.model.as_ref();

    let mut stitcher = Stitcher::new(cfg.iou_stitch_threshold);
    // Objectness recorded when each scan was current, reused when the scan
    // appears as a past scan in later windows.
    let mut objectness_by_scan: Vec<Vec<f64>> = Vec::with_capacity(num_scans);
    let mut semantics_by_scan: Vec<Vec<u16>> = Vec::with_capacity(num_scans);

    for t in 0..num_scans {
        let window_start = (t + 1).saturating_sub(cfg.temporal_window);
        let views: Vec<ScanView<'_>> = (window_start..=t)
            .map(|s| ScanView {
                scan_id: s as u32,
                positions: &sequence.scans[s].positions,
                remission: &sequence.scans[s].remission,
                labels: sequence.labels.as_ref().map(|l| l[s].as_slice()),
                objectness: if s < t {
                    Some(objectness_by_scan[s].as_slice())
                } else {
                    None
                },
            })
            .collect();
        let mut rng = SeededRng::substream(cfg.rng_seed ^ STREAM_VOLUME, t as u64);
        let mut volume = form_volume(&views, cfg, &mut rng);
        let gts = if opts.oracle {
            recompute_gt(&volume)
        } else {
            Vec::new()
        };

        // Per-point semantics, votes, objectness and (optionally) features.
        let (classes, offsets, objectness, features) = if opts.oracle {
            let semantic_gt = volume.semantic_gt.clone().expect("oracle needs labels");
            let instance_gt = volume.instance_gt.clone().expect("oracle needs labels");
            let mut offsets = synth::oracle_votes(&volume, &gts);
            if opts.vote_noise > 0.0 {
                let mut nrng = SeededRng::substream(cfg.rng_seed ^ STREAM_NOISE, t as u64);
                for (o, &inst) in offsets.iter_mut().zip(&instance_gt) {
                    if inst > 0 {
                        for c in o.iter_mut() {
                            *c += opts.vote_noise * nrng.draw_normal();
                        }
                    }
                }
            }
            let centers = encoder_heads::center_targets(&volume, &gts);
            let objectness: Vec<f64> = volume
                .positions
                .iter()
                .zip(&centers)
                .map(|(p, c)| objectness_target(p, c.as_ref(), cfg.objectness_sigma))
                .collect();
            let features = model.map(|m| {
                let desc = encoder_heads::compute_descriptors(&volume, cfg);
                let f = m.encoder.forward(&desc);
                (0..volume.len()).map(|i| f.row(i).to_vec()).collect()
            });
            (semantic_gt, offsets, objectness, features)
        } else {
            let out = run_heads(model.unwrap(), &volume, cfg);
            (
                out.classes,
                out.offsets,
                out.objectness,
                Some(out.features),
            )
        };
        volume.objectness = Some(objectness.clone());

        let foreground: Vec<bool> = classes.iter().map(|c| cfg.is_thing(*c)).collect();
        let instances = match cfg.variant {
            Variant::Voting => {
                let votes = apply_votes(&volume.positions, &offsets, &foreground);
                let mut srng = SeededRng::substream(cfg.rng_seed ^ STREAM_SAMPLE, t as u64);
                aggregate_window(&volume, &votes, features.as_ref(), &gts, cfg, model, &mut srng)?
            }
            Variant::Gaussian => {
                gaussian_variant(&volume.positions, &objectness, &foreground, cfg)
            }
        };

        // Majority-vote semantic fusion per window instance.
        let keyed: Vec<WindowInstanceKeys> = instances
            .iter()
            .filter(|inst| !inst.points.is_empty())
            .map(|inst| {
                let class = crate::aggregation::majority_vote(&inst.points, &classes);
                WindowInstanceKeys {
                    keys: inst.points.iter().map(|&i| volume.point_origin[i]).collect(),
                    classes: vec![class; inst.points.len()],
                }
            })
            .collect();

        let universe: HashSet<_> = volume
            .point_origin
            .iter()
            .filter(|k| (k.scan as usize) < t)
            .copied()
            .collect();
        stitcher.step(t as u32, window_start as u32, &universe, &keyed);

        // The current scan is fully contained in the volume, in point order.
        let current_sem: Vec<u16> = volume
            .point_origin
            .iter()
            .zip(&classes)
            .filter(|(k, _)| k.scan as usize == t)
            .map(|(_, &c)| c)
            .collect();
        debug_assert_eq!(current_sem.len(), sequence.scans[t].len());
        semantics_by_scan.push(current_sem);
        let current_obj: Vec<f64> = volume
            .point_origin
            .iter()
            .zip(&objectness)
            .filter(|(k, _)| k.scan as usize == t)
            .map(|(_, &o)| o)
            .collect();
        objectness_by_scan.push(current_obj);
    }

    let tracklets = stitcher.finish();
    let counts: Vec<usize> = sequence.scans.iter().map(|s| s.len()).collect();
    write_predictions_with(&tracklets, &counts, Some(&semantics_by_scan), out_dir)?;
    Ok(InferStats {
        seconds: start.elapsed().as_secs_f64(),
        windows: num_scans,
    })
}

/// Loads a labeled sequence and runs the two-phase trainer; writes the
/// checkpoint and the loss-curve CSV.
pub fn run_training(
    data_dir: &Path,
    cfg: &Config,
    mode: TrainMode,
    resume: Option<&Path>,
    ckpt_out: &Path,
    csv_out: Option<&Path>,
) -> Result<TrainSummary> {
    let sequence = Sequence::load(data_dir, true)?;
    if sequence.num_scans() < cfg.temporal_window {
        return Err(Error::Config(format!(
            "sequence has {} scans, fewer than temporal_window={}",
            sequence.num_scans(),
            cfg.temporal_window
        )));
    }
    let dataset = Dataset::from_sequence(&sequence)?;
    let (mut model, start_iter) = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let iter = ckpt.scalar("meta.iteration")? as usize;
            (Model::load_checkpoint(cfg, &ckpt)?, iter)
        }
        None => (Model::new(cfg), 0),
    };
    let out = train_from(&dataset, cfg, mode, &mut model, start_iter)?;
    require_finite("final voting loss", out.summary.final_vote_loss)?;
    let total = out.summary.phase1_iters + out.summary.phase2_iters;
    out.model.to_checkpoint(total, 2).save(ckpt_out)?;
    if let Some(csv) = csv_out {
        write_loss_csv(&out.rows, csv)?;
    }
    Ok(out.summary)
}

pub fn write_loss_csv(rows: &[LossRow], path: &Path) -> Result<()> {
    let mut text = String::from("iteration,l_sem,l_vot,l_agg,l_obj\n");
    for r in rows {
        text.push_str(&format!(
            "{},{:.8},{:.8},{:.8},{:.8}\n",
            r.iteration, r.l_sem, r.l_vot, r.l_agg, r.l_obj
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Evaluates predictions against ground truth using the configured thing
/// classes.
pub fn run_eval(gt_dir: &Path, pred_dir: &Path, cfg: &Config) -> Result<EvalReport> {
    evaluate_dirs(gt_dir, pred_dir, &cfg.thing_classes)
}

/// Parameter grids for the sweep harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblateAxis {
    /// K in {100..600}.
    Proposals,
    /// r in {0.2..1.0}.
    Radius,
    /// FPS vs random center sampling.
    Sampling,
    /// Geometric feature toggles (E = 3 / 4 / 7).
    Features,
    /// Aggregation strategy: NMS baseline, center positions, learned.
    Components,
    /// Gaussian-variant (probability threshold, selection radius) presets.
    Gaussian,
}

impl AblateAxis {
    pub fn parse(s: &str) -> Result<AblateAxis> {
        Ok(match s {
            "proposals" => AblateAxis::Proposals,
            "radius" => AblateAxis::Radius,
            "sampling" => AblateAxis::Sampling,
            "features" => AblateAxis::Features,
            "components" => AblateAxis::Components,
            "gaussian" => AblateAxis::Gaussian,
            _ => {
                return Err(Error::Config(format!(
                    "unknown ablation axis '{s}' (expected proposals|radius|sampling|features|components|gaussian)"
                )))
            }
        })
    }
}

/// Runs one inference + evaluation per swept configuration; returns CSV.
pub fn run_ablation(
    data_dir: &Path,
    cfg: &Config,
    axis: AblateAxis,
    opts: &InferOptions,
    work_dir: &Path,
) -> Result<String> {
    let configs: Vec<(String, Config)> = match axis {
        AblateAxis::Proposals => [100usize, 200, 300, 400, 500, 600]
            .iter()
            .map(|&k| {
                let mut c = cfg.clone();
                c.num_proposals = k;
                (format!("num_proposals={k}"), c)
            })
            .collect(),
        AblateAxis::Radius => [0.2, 0.4, 0.6, 0.8, 1.0]
            .iter()
            .map(|&r| {
                let mut c = cfg.clone();
                c.group_radius = r;
                (format!("group_radius={r}"), c)
            })
            .collect(),
        AblateAxis::Sampling => vec![
            (
                "sampling=fps".to_string(),
                {
                    let mut c = cfg.clone();
                    c.sampling = Sampling::Fps;
                    c
                },
            ),
            (
                "sampling=random".to_string(),
                {
                    let mut c = cfg.clone();
                    c.sampling = Sampling::Random;
                    c
                },
            ),
        ],
        AblateAxis::Features => ["center", "center+radius", "full"]
            .iter()
            .map(|&f| {
                let mut c = cfg.clone();
                c.set("features", f).expect("known feature set");
                (format!("features={f}"), c)
            })
            .collect(),
        AblateAxis::Components => ["nms", "centers", "dbscan"]
            .iter()
            .map(|&a| {
                let mut c = cfg.clone();
                c.set("aggregate", a).expect("known aggregate mode");
                (format!("aggregate={a}"), c)
            })
            .collect(),
        AblateAxis::Gaussian => GAUSSIAN_PRESETS
            .iter()
            .map(|&(pt, r)| {
                let mut c = cfg.clone();
                c.variant = Variant::Gaussian;
                c.probability_threshold = pt;
                c.selection_radius = r;
                (format!("gaussian pt={pt} r={r}"), c)
            })
            .collect(),
    };

    let mut csv = String::from("configuration,lstq,s_assoc,s_cls\n");
    for (i, (label, sub_cfg)) in configs.iter().enumerate() {
        sub_cfg.validate()?;
        let pred_dir: PathBuf = work_dir.join(format!("ablate_{i:02}"));
        run_inference(data_dir, &pred_dir, sub_cfg, opts)?;
        let report = run_eval(data_dir, &pred_dir, sub_cfg)?;
        csv.push_str(&format!(
            "{label},{:.4},{:.4},{:.4}\n",
            report.lstq, report.s_assoc, report.s_cls
        ));
    }
    Ok(csv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn oracle_pipeline_is_near_perfect_on_the_default_scene() {
        let dir = tempdir().unwrap();
        let data = dir.path().join("data");
        let pred = dir.path().join("pred");
        run_synth_gen(None, &data).unwrap();
        let cfg = Config::default();
        let opts = InferOptions {
            oracle: true,
            ..Default::default()
        };
        run_inference(&data, &pred, &cfg, &opts).unwrap();
        let report = run_eval(&data, &pred, &cfg).unwrap();
        assert!(report.lstq > 0.99, "LSTQ = {}", report.lstq);
        assert!(report.s_assoc > 0.99, "S_assoc = {}", report.s_assoc);
    }

    #[test]
    fn inference_without_model_or_oracle_is_a_config_error() {
        let dir = tempdir().unwrap();
        let err = run_inference(
            dir.path(),
            &dir.path().join("out"),
            &Config::default(),
            &InferOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn oracle_runs_are_byte_identical() {
        let dir = tempdir().unwrap();
        let data = dir.path().join("data");
        run_synth_gen(None, &data).unwrap();
        let cfg = Config::default();
        let opts = InferOptions {
            oracle: true,
            ..Default::default()
        };
        let pred_a = dir.path().join("a");
        let pred_b = dir.path().join("b");
        run_inference(&data, &pred_a, &cfg, &opts).unwrap();
        run_inference(&data, &pred_b, &cfg, &opts).unwrap();
        for entry in std::fs::read_dir(&pred_a).unwrap() {
            let pa = entry.unwrap().path();
            let pb = pred_b.join(pa.file_name().unwrap());
            assert_eq!(
                std::fs::read(&pa).unwrap(),
                std::fs::read(&pb).unwrap(),
                "{pa:?} differs"
            );
        }
    }
}
