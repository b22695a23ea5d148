//! Bit-exact readers/writers for SemanticKITTI-style sequences.
//!
//! Directory layout: `velodyne/NNNNNN.bin` (per point x, y, z, remission as
//! consecutive little-endian f32), `labels/NNNNNN.label` (per point u32,
//! lower 16 bits semantic class, upper 16 bits instance id), `poses.txt`
//! (one 12-number row-major 3x4 transform per scan) and an optional
//! `calib.txt` whose `Tr` row is composed into the poses.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::types::{PointKey, Tracklet};
use crate::{Error, Result};

pub const BYTES_PER_POINT: usize = 16;

/// One scan in its sensor (or world, after [`to_world`]) frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pub positions: Vec<[f64; 3]>,
    pub remission: Vec<f32>,
}

impl Scan {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Rigid transform mapping sensor frame to world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0, 0.0, 0.0],
        }
    }

    pub fn from_row_major(m: &[f64; 12]) -> Self {
        Pose {
            rotation: [
                [m[0], m[1], m[2]],
                [m[4], m[5], m[6]],
                [m[8], m[9], m[10]],
            ],
            translation: [m[3], m[7], m[11]],
        }
    }

    pub fn apply(&self, p: &[f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.translation[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.translation[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.translation[2],
        ]
    }

    /// self ∘ other: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        let a = &self.rotation;
        let b = &other.rotation;
        let mut rotation = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rotation[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
            }
        }
        let translation = self.apply(&other.translation);
        Pose {
            rotation,
            translation,
        }
    }

    /// Inverse of a rigid transform (rotation transposed).
    pub fn inverse(&self) -> Pose {
        let r = &self.rotation;
        let rt = [
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ];
        let t = &self.translation;
        let translation = [
            -(rt[0][0] * t[0] + rt[0][1] * t[1] + rt[0][2] * t[2]),
            -(rt[1][0] * t[0] + rt[1][1] * t[1] + rt[1][2] * t[2]),
            -(rt[2][0] * t[0] + rt[2][1] * t[1] + rt[2][2] * t[2]),
        ];
        Pose {
            rotation: rt,
            translation,
        }
    }

    /// Rejects rotation parts that are not orthonormal within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                if (dot - expected).abs() > tol {
                    return Err(Error::Format(format!(
                        "pose rotation not orthonormal: column dot ({i},{j}) = {dot:.6}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Decodes a label word into (semantic class, instance id).
pub fn decode_label(word: u32) -> (u16, u16) {
    ((word & 0xFFFF) as u16, (word >> 16) as u16)
}

/// Inverse of [`decode_label`].
pub fn encode_label(semantic: u16, instance: u16) -> u32 {
    (semantic as u32) | ((instance as u32) << 16)
}

/// Reads a `.bin` scan. Fails with the offending byte offset when the file
/// length is not a multiple of 16.
pub fn read_scan(path: &Path) -> Result<Scan> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % BYTES_PER_POINT != 0 {
        let offset = bytes.len() - bytes.len() % BYTES_PER_POINT;
        return Err(Error::Format(format!(
            "{}: length {} is not a multiple of {BYTES_PER_POINT} (trailing bytes start at offset {offset})",
            path.display(),
            bytes.len()
        )));
    }
    let n = bytes.len() / BYTES_PER_POINT;
    let mut positions = Vec::with_capacity(n);
    let mut remission = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(BYTES_PER_POINT) {
        let f = |o: usize| f32::from_le_bytes([rec[o], rec[o + 1], rec[o + 2], rec[o + 3]]);
        positions.push([f(0) as f64, f(4) as f64, f(8) as f64]);
        remission.push(f(12));
    }
    Ok(Scan {
        positions,
        remission,
    })
}

/// Writes a scan as consecutive (x, y, z, remission) f32 records.
pub fn write_scan(path: &Path, scan: &Scan) -> Result<()> {
    let mut bytes = Vec::with_capacity(scan.len() * BYTES_PER_POINT);
    for (p, &rem) in scan.positions.iter().zip(&scan.remission) {
        for &c in p {
            bytes.extend_from_slice(&(c as f32).to_le_bytes());
        }
        bytes.extend_from_slice(&rem.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a `.label` file into decoded (semantic, instance) pairs.
pub fn read_labels(path: &Path) -> Result<Vec<(u16, u16)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        let offset = bytes.len() - bytes.len() % 4;
        return Err(Error::Format(format!(
            "{}: length {} is not a multiple of 4 (trailing bytes start at offset {offset})",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|w| decode_label(u32::from_le_bytes([w[0], w[1], w[2], w[3]])))
        .collect())
}

pub fn write_labels(path: &Path, labels: &[(u16, u16)]) -> Result<()> {
    let mut bytes = Vec::with_capacity(labels.len() * 4);
    for &(sem, inst) in labels {
        bytes.extend_from_slice(&encode_label(sem, inst).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Applies a validated pose to every point; remission is untouched.
pub fn to_world(scan: &Scan, pose: &Pose) -> Result<Scan> {
    pose.validate(1e-3)?;
    Ok(Scan {
        positions: scan.positions.iter().map(|p| pose.apply(p)).collect(),
        remission: scan.remission.clone(),
    })
}

/// Parses `poses.txt`: one 12-number whitespace-separated row per scan.
pub fn read_poses(path: &Path) -> Result<Vec<Pose>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let nums: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>().map_err(|_| {
                    Error::Format(format!(
                        "{}: line {}: bad number '{t}'",
                        path.display(),
                        i + 1
                    ))
                })
            })
            .collect::<Result<_>>()?;
        if nums.len() != 12 {
            return Err(Error::Format(format!(
                "{}: line {}: expected 12 numbers, got {}",
                path.display(),
                i + 1,
                nums.len()
            )));
        }
        let mut m = [0.0; 12];
        m.copy_from_slice(&nums);
        let pose = Pose::from_row_major(&m);
        pose.validate(1e-3)?;
        poses.push(pose);
    }
    Ok(poses)
}

pub fn write_poses(path: &Path, poses: &[Pose]) -> Result<()> {
    let mut text = String::new();
    for p in poses {
        let r = &p.rotation;
        let t = &p.translation;
        text.push_str(&format!(
            "{} {} {} {} {} {} {} {} {} {} {} {}\n",
            r[0][0], r[0][1], r[0][2], t[0], r[1][0], r[1][1], r[1][2], t[1], r[2][0], r[2][1],
            r[2][2], t[2]
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses the `Tr` row of a KITTI-style `calib.txt`, when present.
pub fn read_calib(path: &Path) -> Result<Option<Pose>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("Tr:") {
            let nums: Vec<f64> = rest
                .split_whitespace()
                .filter_map(|t| t.parse().ok())
                .collect();
            if nums.len() != 12 {
                return Err(Error::Format(format!(
                    "{}: Tr row must hold 12 numbers, got {}",
                    path.display(),
                    nums.len()
                )));
            }
            let mut m = [0.0; 12];
            m.copy_from_slice(&nums);
            return Ok(Some(Pose::from_row_major(&m)));
        }
    }
    Ok(None)
}

fn numbered_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == ext).unwrap_or(false))
        .collect();
    files.sort();
    Ok(files)
}

/// A whole sequence loaded into memory, scans transformed to world frame.
pub struct Sequence {
    pub scans: Vec<Scan>,
    /// Per scan, per point (semantic, instance); present when labels exist.
    pub labels: Option<Vec<Vec<(u16, u16)>>>,
    pub poses: Vec<Pose>,
}

impl Sequence {
    /// Loads `velodyne/`, `labels/` (optional unless `require_labels`),
    /// `poses.txt` and `calib.txt` from `dir`. Scans are moved to the world
    /// frame via Tr^-1 * P * Tr when a calibration is present, P otherwise.
    pub fn load(dir: &Path, require_labels: bool) -> Result<Sequence> {
        let scan_paths = numbered_files(&dir.join("velodyne"), "bin")?;
        if scan_paths.is_empty() {
            return Err(Error::Format(format!(
                "{}: no .bin scans under velodyne/",
                dir.display()
            )));
        }
        let raw_poses = read_poses(&dir.join("poses.txt"))?;
        if raw_poses.len() != scan_paths.len() {
            return Err(Error::Format(format!(
                "{}: {} poses for {} scans",
                dir.display(),
                raw_poses.len(),
                scan_paths.len()
            )));
        }
        let calib = read_calib(&dir.join("calib.txt"))?;
        let poses: Vec<Pose> = match calib {
            Some(tr) => {
                let inv = tr.inverse();
                raw_poses
                    .iter()
                    .map(|p| inv.compose(p).compose(&tr))
                    .collect()
            }
            None => raw_poses,
        };

        let mut scans = Vec::with_capacity(scan_paths.len());
        for (path, pose) in scan_paths.iter().zip(&poses) {
            scans.push(to_world(&read_scan(path)?, pose)?);
        }

        let labels_dir = dir.join("labels");
        let labels = if labels_dir.is_dir() {
            let label_paths = numbered_files(&labels_dir, "label")?;
            if label_paths.len() != scan_paths.len() {
                return Err(Error::Format(format!(
                    "{}: {} label files for {} scans",
                    dir.display(),
                    label_paths.len(),
                    scan_paths.len()
                )));
            }
            let mut all = Vec::with_capacity(label_paths.len());
            for (lp, scan) in label_paths.iter().zip(&scans) {
                let labels = read_labels(lp)?;
                if labels.len() != scan.len() {
                    return Err(Error::Format(format!(
                        "{}: {} labels for {} points",
                        lp.display(),
                        labels.len(),
                        scan.len()
                    )));
                }
                all.push(labels);
            }
            Some(all)
        } else if require_labels {
            return Err(Error::Format(format!(
                "{}: labels/ directory required but missing",
                dir.display()
            )));
        } else {
            None
        };

        Ok(Sequence {
            scans,
            labels,
            poses,
        })
    }

    pub fn num_scans(&self) -> usize {
        self.scans.len()
    }
}

/// Writes per-scan prediction label files.
///
/// Tracklet ids are remapped to a dense 1..M range (ascending by original
/// id) to fit the 16-bit instance field; the mapping is recorded in
/// `instance_map.txt`. Points covered by no tracklet take their entry from
/// `fill_semantics` with instance 0, or (0, 0) when no fill is given.
pub fn write_predictions_with(
    tracklets: &[Tracklet],
    scan_counts: &[usize],
    fill_semantics: Option<&[Vec<u16>]>,
    out_dir: &Path,
) -> Result<()> {
    if let Some(fill) = fill_semantics {
        assert_eq!(fill.len(), scan_counts.len());
    }
    let mut ids: Vec<u32> = tracklets.iter().map(|t| t.id).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != tracklets.len() {
        return Err(Error::Format("duplicate tracklet ids".into()));
    }
    if ids.len() >= (1 << 16) {
        return Err(Error::Format(format!(
            "{} tracklets exceed the 16-bit instance id budget",
            ids.len()
        )));
    }
    let file_id: HashMap<u32, u16> = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, (i + 1) as u16))
        .collect();

    let mut words: Vec<Vec<u32>> = scan_counts
        .iter()
        .enumerate()
        .map(|(s, &n)| match fill_semantics {
            Some(fill) => {
                assert_eq!(fill[s].len(), n);
                fill[s].iter().map(|&sem| encode_label(sem, 0)).collect()
            }
            None => vec![0u32; n],
        })
        .collect();

    for t in tracklets {
        let fid = file_id[&t.id];
        for key in &t.members {
            let scan = key.scan as usize;
            let point = key.point as usize;
            if scan >= words.len() || point >= words[scan].len() {
                return Err(Error::Format(format!(
                    "tracklet {} references scan {} point {} outside the sequence",
                    t.id, key.scan, key.point
                )));
            }
            let cell = &mut words[scan][point];
            if decode_label(*cell).1 != 0 {
                return Err(Error::Format(format!(
                    "scan {} point {} covered by more than one tracklet",
                    key.scan, key.point
                )));
            }
            *cell = encode_label(t.semantic, fid);
        }
    }

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (s, scan_words) in words.iter().enumerate() {
        let mut bytes = Vec::with_capacity(scan_words.len() * 4);
        for w in scan_words {
            bytes.extend_from_slice(&w.to_le_bytes());
        }
        let path = out_dir.join(format!("{s:06}.label"));
        fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
    }

    let mut map_text = String::new();
    for (i, &id) in ids.iter().enumerate() {
        map_text.push_str(&format!("{} {}\n", i + 1, id));
    }
    let map_path = out_dir.join("instance_map.txt");
    fs::write(&map_path, map_text).map_err(|e| Error::io(map_path, e))
}

/// [`write_predictions_with`] without a semantic fill: uncovered points get
/// semantic 0 / instance 0.
pub fn write_predictions(
    tracklets: &[Tracklet],
    scan_counts: &[usize],
    out_dir: &Path,
) -> Result<()> {
    write_predictions_with(tracklets, scan_counts, None, out_dir)
}

/// Reads prediction files back into tracklets (the round-trip inverse of
/// [`write_predictions`]). Uncovered points are dropped.
pub fn read_predictions(dir: &Path) -> Result<Vec<Tracklet>> {
    let map_path = dir.join("instance_map.txt");
    let mut original_id: HashMap<u16, u32> = HashMap::new();
    if map_path.exists() {
        let text = fs::read_to_string(&map_path).map_err(|e| Error::io(&map_path, e))?;
        for line in text.lines() {
            let mut it = line.split_whitespace();
            if let (Some(fid), Some(oid)) = (it.next(), it.next()) {
                let fid: u16 = fid
                    .parse()
                    .map_err(|_| Error::Format(format!("bad instance_map row '{line}'")))?;
                let oid: u32 = oid
                    .parse()
                    .map_err(|_| Error::Format(format!("bad instance_map row '{line}'")))?;
                original_id.insert(fid, oid);
            }
        }
    }

    let mut by_id: HashMap<u32, Tracklet> = HashMap::new();
    for (s, path) in numbered_files(dir, "label")?.iter().enumerate() {
        for (p, &(sem, inst)) in read_labels(path)?.iter().enumerate() {
            if inst == 0 {
                continue;
            }
            let id = original_id.get(&inst).copied().unwrap_or(inst as u32);
            let entry = by_id.entry(id).or_insert_with(|| Tracklet {
                id,
                members: Vec::new(),
                semantic: sem,
            });
            entry.members.push(PointKey::new(s as u32, p as u32));
        }
    }
    let mut tracklets: Vec<Tracklet> = by_id.into_values().collect();
    tracklets.sort_by_key(|t| t.id);
    for t in &mut tracklets {
        t.members.sort_unstable();
    }
    Ok(tracklets)
}
