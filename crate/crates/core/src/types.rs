//! Shared domain types: 4D point volumes, ground-truth instances, tracklets.

use std::collections::HashSet;

/// Identifies one physical LiDAR return: (sequence scan id, point index
/// within that scan). Stable across sampling and window formation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PointKey {
    pub scan: u32,
    pub point: u32,
}

impl PointKey {
    pub fn new(scan: u32, point: u32) -> Self {
        PointKey { scan, point }
    }
}

/// A stacked multi-scan volume. All per-point vectors share one length; the
/// optional ones are filled in by later pipeline stages.
#[derive(Debug, Clone)]
pub struct PointCloud4D {
    /// World-frame positions, meters.
    pub positions: Vec<[f64; 3]>,
    /// Index of the originating scan within the window, 0 = oldest.
    pub scan_index: Vec<u8>,
    /// Sensor remission.
    pub remission: Vec<f32>,
    /// Ground-truth semantic class per point, when labels exist.
    pub semantic_gt: Option<Vec<u16>>,
    /// Ground-truth instance id per point (0 = stuff), when labels exist.
    pub instance_gt: Option<Vec<u16>>,
    /// Traceability back to the sequence: (scan id, original point id).
    pub point_origin: Vec<PointKey>,
    /// Number of scans merged into this volume.
    pub window_len: usize,
    /// Per-point features of width F, filled by the encoder.
    pub features: Option<Vec<Vec<f64>>>,
    /// Per-point objectness in [0, 1], filled by the objectness head.
    pub objectness: Option<Vec<f64>>,
}

impl PointCloud4D {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Panics if the per-point arrays disagree on length or a scan index is
    /// out of window range; called by constructors.
    pub fn assert_consistent(&self) {
        let n = self.positions.len();
        assert_eq!(self.scan_index.len(), n);
        assert_eq!(self.remission.len(), n);
        assert_eq!(self.point_origin.len(), n);
        if let Some(s) = &self.semantic_gt {
            assert_eq!(s.len(), n);
        }
        if let Some(i) = &self.instance_gt {
            assert_eq!(i.len(), n);
        }
        if let Some(f) = &self.features {
            assert_eq!(f.len(), n);
        }
        if let Some(o) = &self.objectness {
            assert_eq!(o.len(), n);
        }
        assert!(self
            .scan_index
            .iter()
            .all(|&s| (s as usize) < self.window_len));
    }
}

/// Ground-truth geometry of one instance inside a merged window.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceGT4D {
    pub id: u16,
    /// Indices into the volume this record was computed from.
    pub members: Vec<usize>,
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
    /// Bounding-box center.
    pub center: [f64; 3],
    /// Half the bbox diagonal length (bounding-sphere radius).
    pub radius: f64,
    /// Bounding-box extents (l, h, w).
    pub bbox_size: [f64; 3],
}

impl InstanceGT4D {
    /// Derives center, radius and size from the corner points.
    pub fn from_bbox(id: u16, members: Vec<usize>, bbox_min: [f64; 3], bbox_max: [f64; 3]) -> Self {
        let mut center = [0.0; 3];
        let mut size = [0.0; 3];
        for a in 0..3 {
            center[a] = 0.5 * (bbox_min[a] + bbox_max[a]);
            size[a] = bbox_max[a] - bbox_min[a];
        }
        let radius = 0.5 * (size[0] * size[0] + size[1] * size[1] + size[2] * size[2]).sqrt();
        InstanceGT4D {
            id,
            members,
            bbox_min,
            bbox_max,
            center,
            radius,
            bbox_size: size,
        }
    }
}

/// A sequence-level object: a set of points across scans with one id and one
/// semantic class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tracklet {
    pub id: u32,
    pub members: Vec<PointKey>,
    pub semantic: u16,
}

/// |a ∩ b| / |a ∪ b|; 0 when both sets are empty.
pub fn point_set_iou(a: &HashSet<PointKey>, b: &HashSet<PointKey>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}
