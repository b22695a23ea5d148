//! Deterministic synthetic LiDAR sequences with full ground truth.
//!
//! Objects are axis-aligned boxes moving at constant velocity; each scan
//! samples the box surface (the 8 corners are always included so the
//! ground-truth bounding box of the samples is exactly the analytic box),
//! plus a ground plane for the stuff class. Output uses the exact
//! [`crate::lidar_io`] directory layout, so downstream stages cannot tell
//! synthetic data from real data.

use std::path::Path;

use crate::lidar_io::{self, Pose, Scan};
use crate::rng::SeededRng;
use crate::types::{InstanceGT4D, PointCloud4D};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSpec {
    pub class: u16,
    /// Box extents along x, y, z in meters.
    pub size: [f64; 3],
    /// Meters per scan.
    pub velocity: [f64; 3],
    pub points_per_scan: usize,
    /// Isotropic Gaussian surface noise sigma, meters.
    pub noise: f64,
    /// Box center at scan 0.
    pub center: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub scans: usize,
    pub objects: Vec<ObjectSpec>,
    /// Ground plane covers [-extent, extent]^2 at z = 0.
    pub ground_extent: f64,
    pub ground_points_per_scan: usize,
    pub ground_class: u16,
    pub rng_seed: u64,
}

/// One generated scan with its labels and pose (identity: synthetic scenes
/// are authored directly in the world frame).
#[derive(Debug, Clone, PartialEq)]
pub struct ScanFrame {
    pub scan: Scan,
    pub labels: Vec<(u16, u16)>,
    pub pose: Pose,
}

impl SceneSpec {
    /// The stock scene: 20 scans, 6 well-separated moving objects in two
    /// thing classes over one stuff ground plane.
    pub fn default_scene() -> SceneSpec {
        let car = |y: f64, x: f64, vx: f64| ObjectSpec {
            class: 2,
            size: [4.2, 1.9, 1.6],
            velocity: [vx, 0.0, 0.0],
            points_per_scan: 150,
            noise: 0.0,
            center: [x, y, 0.8],
        };
        let walker = |y: f64, x: f64, vx: f64| ObjectSpec {
            class: 3,
            size: [0.6, 0.6, 1.7],
            velocity: [vx, 0.0, 0.0],
            points_per_scan: 60,
            noise: 0.0,
            center: [x, y, 0.85],
        };
        SceneSpec {
            scans: 20,
            objects: vec![
                car(-9.0, -8.0, 0.9),
                walker(-5.4, 4.0, 0.25),
                car(-1.8, -2.0, 0.5),
                walker(1.8, -6.0, 0.0),
                car(5.4, 6.0, -0.7),
                walker(9.0, 0.0, 0.35),
            ],
            ground_extent: 30.0,
            ground_points_per_scan: 600,
            ground_class: 1,
            rng_seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scans < 1 {
            return Err(Error::Config("scene needs at least one scan".into()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.size.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::Config(format!(
                    "object {i}: box sizes must be > 0, got {:?}",
                    o.size
                )));
            }
            if o.points_per_scan < 1 {
                return Err(Error::Config(format!("object {i}: points_per_scan must be >= 1")));
            }
            if o.class == 0 {
                return Err(Error::Config(format!("object {i}: class 0 is reserved")));
            }
            if o.noise < 0.0 {
                return Err(Error::Config(format!("object {i}: noise must be >= 0")));
            }
        }
        // Ambiguous ground truth is rejected up front.
        for i in 0..self.objects.len() {
            for j in (i + 1)..self.objects.len() {
                if boxes_overlap(&self.objects[i], &self.objects[j]) {
                    return Err(Error::Config(format!(
                        "objects {i} and {j} overlap at t=0"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Parses the scene file format: `key=value` lines plus one
    /// `object=class=C size=L,W,H vel=X,Y,Z points=N noise=S center=X,Y,Z`
    /// line per object (`center` optional; omitted centers are placed on a
    /// ring).
    pub fn parse(text: &str) -> Result<SceneSpec> {
        let mut spec = SceneSpec {
            scans: 20,
            objects: Vec::new(),
            ground_extent: 30.0,
            ground_points_per_scan: 600,
            ground_class: 1,
            rng_seed: 42,
        };
        let mut auto_placed = 0usize;
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "scene line {}: expected key=value, got '{raw}'",
                    ln + 1
                )));
            };
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| {
                Error::Config(format!("scene line {}: bad {what} in '{raw}'", ln + 1))
            };
            match key {
                "scans" => spec.scans = value.parse().map_err(|_| bad("scans"))?,
                "seed" => spec.rng_seed = value.parse().map_err(|_| bad("seed"))?,
                "ground_extent" => {
                    spec.ground_extent = value.parse().map_err(|_| bad("ground_extent"))?
                }
                "ground_points_per_scan" => {
                    spec.ground_points_per_scan =
                        value.parse().map_err(|_| bad("ground_points_per_scan"))?
                }
                "ground_class" => {
                    spec.ground_class = value.parse().map_err(|_| bad("ground_class"))?
                }
                "object" => {
                    let mut obj = ObjectSpec {
                        class: 2,
                        size: [1.0, 1.0, 1.0],
                        velocity: [0.0; 3],
                        points_per_scan: 100,
                        noise: 0.0,
                        center: [0.0, 0.0, 0.5],
                    };
                    let mut has_center = false;
                    for field in value.split_whitespace() {
                        let Some((fk, fv)) = field.split_once('=') else {
                            return Err(bad("object field"));
                        };
                        match fk {
                            "class" => obj.class = fv.parse().map_err(|_| bad("class"))?,
                            "size" => obj.size = parse_triple(fv).ok_or_else(|| bad("size"))?,
                            "vel" => {
                                obj.velocity = parse_triple(fv).ok_or_else(|| bad("vel"))?
                            }
                            "points" => {
                                obj.points_per_scan = fv.parse().map_err(|_| bad("points"))?
                            }
                            "noise" => obj.noise = fv.parse().map_err(|_| bad("noise"))?,
                            "center" => {
                                obj.center = parse_triple(fv).ok_or_else(|| bad("center"))?;
                                has_center = true;
                            }
                            _ => return Err(bad("object field")),
                        }
                    }
                    if !has_center {
                        // Ring placement keeps auto objects apart.
                        let angle = auto_placed as f64 * 1.1;
                        let r = 8.0 + 2.0 * auto_placed as f64;
                        obj.center = [r * angle.cos(), r * angle.sin(), obj.size[2] / 2.0];
                        auto_placed += 1;
                    }
                    spec.objects.push(obj);
                }
                _ => return Err(Error::Config(format!("scene line {}: unknown key '{key}'", ln + 1))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<SceneSpec> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SceneSpec::parse(&text)
    }
}

fn parse_triple(s: &str) -> Option<[f64; 3]> {
    let mut it = s.split(',').map(|t| t.trim().parse::<f64>().ok());
    let a = it.next()??;
    let b = it.next()??;
    let c = it.next()??;
    if it.next().is_some() {
        return None;
    }
    Some([a, b, c])
}

fn boxes_overlap(a: &ObjectSpec, b: &ObjectSpec) -> bool {
    (0..3).all(|k| (a.center[k] - b.center[k]).abs() < 0.5 * (a.size[k] + b.size[k]))
}

/// The 8 corners of a box with half-extents `h`, in a fixed order.
fn corners(h: &[f64; 3]) -> [[f64; 3]; 8] {
    let mut out = [[0.0; 3]; 8];
    for (i, c) in out.iter_mut().enumerate() {
        c[0] = if i & 1 == 0 { -h[0] } else { h[0] };
        c[1] = if i & 2 == 0 { -h[1] } else { h[1] };
        c[2] = if i & 4 == 0 { -h[2] } else { h[2] };
    }
    out
}

/// Uniform sample on the box surface (face chosen proportional to area).
fn sample_surface(h: &[f64; 3], rng: &mut SeededRng) -> [f64; 3] {
    let areas = [
        4.0 * h[1] * h[2], // -x face
        4.0 * h[1] * h[2], // +x
        4.0 * h[0] * h[2], // -y
        4.0 * h[0] * h[2], // +y
        4.0 * h[0] * h[1], // -z
        4.0 * h[0] * h[1], // +z
    ];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.draw_uniform() * total;
    let mut face = 5;
    for (i, &a) in areas.iter().enumerate() {
        if pick < a {
            face = i;
            break;
        }
        pick -= a;
    }
    let u = rng.draw_uniform() * 2.0 - 1.0;
    let v = rng.draw_uniform() * 2.0 - 1.0;
    match face {
        0 => [-h[0], u * h[1], v * h[2]],
        1 => [h[0], u * h[1], v * h[2]],
        2 => [u * h[0], -h[1], v * h[2]],
        3 => [u * h[0], h[1], v * h[2]],
        4 => [u * h[0], v * h[1], -h[2]],
        _ => [u * h[0], v * h[1], h[2]],
    }
}

/// Generates the scene: one frame per scan, identity poses, instance ids
/// 1..=num_objects stable across scans. Fully deterministic per seed.
pub fn generate(spec: &SceneSpec) -> Result<Vec<ScanFrame>> {
    spec.validate()?;
    let mut frames = Vec::with_capacity(spec.scans);
    for t in 0..spec.scans {
        // One substream per scan: frame content does not depend on how many
        // draws earlier frames consumed.
        let mut rng = SeededRng::substream(spec.rng_seed, t as u64);
        let mut positions = Vec::new();
        let mut remission = Vec::new();
        let mut labels = Vec::new();

        for (oi, obj) in spec.objects.iter().enumerate() {
            let h = [obj.size[0] / 2.0, obj.size[1] / 2.0, obj.size[2] / 2.0];
            let center = [
                obj.center[0] + t as f64 * obj.velocity[0],
                obj.center[1] + t as f64 * obj.velocity[1],
                obj.center[2] + t as f64 * obj.velocity[2],
            ];
            let corner_pts = corners(&h);
            for k in 0..obj.points_per_scan {
                let local = if k < 8 {
                    corner_pts[k]
                } else {
                    sample_surface(&h, &mut rng)
                };
                let mut p = [
                    center[0] + local[0],
                    center[1] + local[1],
                    center[2] + local[2],
                ];
                if obj.noise > 0.0 {
                    for c in &mut p {
                        *c += obj.noise * rng.draw_normal();
                    }
                }
                positions.push(p);
                remission.push(rng.draw_uniform() as f32);
                labels.push((obj.class, (oi + 1) as u16));
            }
        }

        for _ in 0..spec.ground_points_per_scan {
            let x = (rng.draw_uniform() * 2.0 - 1.0) * spec.ground_extent;
            let y = (rng.draw_uniform() * 2.0 - 1.0) * spec.ground_extent;
            positions.push([x, y, 0.0]);
            remission.push(rng.draw_uniform() as f32);
            labels.push((spec.ground_class, 0));
        }

        frames.push(ScanFrame {
            scan: Scan {
                positions,
                remission,
            },
            labels,
            pose: Pose::identity(),
        });
    }
    Ok(frames)
}

/// Generates the scene and writes it in the standard directory layout.
pub fn write_dataset(spec: &SceneSpec, dir: &Path) -> Result<()> {
    let frames = generate(spec)?;
    let velodyne = dir.join("velodyne");
    let labels = dir.join("labels");
    std::fs::create_dir_all(&velodyne).map_err(|e| Error::io(&velodyne, e))?;
    std::fs::create_dir_all(&labels).map_err(|e| Error::io(&labels, e))?;
    for (t, frame) in frames.iter().enumerate() {
        lidar_io::write_scan(&velodyne.join(format!("{t:06}.bin")), &frame.scan)?;
        lidar_io::write_labels(&labels.join(format!("{t:06}.label")), &frame.labels)?;
    }
    let poses: Vec<Pose> = frames.iter().map(|f| f.pose).collect();
    lidar_io::write_poses(&dir.join("poses.txt"), &poses)
}

/// Ground-truth vote offsets for a volume: thing points vote to their
/// instance's merged-window bbox center, stuff points vote zero.
pub fn oracle_votes(volume: &PointCloud4D, gt: &[InstanceGT4D]) -> Vec<[f64; 3]> {
    let instance = volume
        .instance_gt
        .as_ref()
        .expect("oracle votes need ground-truth labels");
    let center_of: std::collections::HashMap<u16, [f64; 3]> =
        gt.iter().map(|g| (g.id, g.center)).collect();
    volume
        .positions
        .iter()
        .zip(instance)
        .map(|(p, &inst)| match center_of.get(&inst) {
            Some(c) if inst > 0 => [c[0] - p[0], c[1] - p[1], c[2] - p[2]],
            _ => [0.0; 3],
        })
        .collect()
}
