//! Pipeline configuration: defaults, validation, plain-text loading.
//!
//! A config file is `key=value` per line, `#` starts a comment. Every key can
//! also be set programmatically through [`Config::set`], which is what the
//! CLI uses to apply flag overrides of the same name.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use thiserror::Error;

/// Which geometric channels feed proposal aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSet {
    /// Refined center positions only (3 channels).
    Center,
    /// Refined center + radius estimate (4 channels).
    CenterRadius,
    /// Refined center + radius + bounding-box size (7 channels).
    Full,
}

impl FeatureSet {
    /// Width of the aggregation feature vector for this selection.
    pub fn width(self) -> usize {
        match self {
            FeatureSet::Center => 3,
            FeatureSet::CenterRadius => 4,
            FeatureSet::Full => 7,
        }
    }
}

impl fmt::Display for FeatureSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FeatureSet::Center => "center",
            FeatureSet::CenterRadius => "center+radius",
            FeatureSet::Full => "full",
        };
        f.write_str(s)
    }
}

/// How window instances are formed from proposals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregateMode {
    /// DBScan over the learned geometric features.
    Dbscan,
    /// Non-maximum suppression over proposal member sets.
    Nms,
    /// DBScan over raw proposal center positions.
    Centers,
}

impl fmt::Display for AggregateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AggregateMode::Dbscan => "dbscan",
            AggregateMode::Nms => "nms",
            AggregateMode::Centers => "centers",
        };
        f.write_str(s)
    }
}

/// Proposal generation scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Center voting + sampled proposal centers.
    Voting,
    /// Objectness-thresholded centers with Gaussian membership.
    Gaussian,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Voting => "voting",
            Variant::Gaussian => "gaussian",
        })
    }
}

/// Vote-center sampling scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    Fps,
    Random,
}

impl fmt::Display for Sampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sampling::Fps => "fps",
            Sampling::Random => "random",
        })
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("temporal_window must be >= 1, got {0}")]
    TemporalWindow(i64),
    #[error("num_proposals must be >= 1, got {0}")]
    NumProposals(i64),
    #[error("group_radius must be > 0, got {0}")]
    GroupRadius(f64),
    #[error("dbscan_eps must be > 0, got {0}")]
    DbscanEps(f64),
    #[error("dbscan_min_points must be >= 1, got {0}")]
    DbscanMinPoints(i64),
    #[error("iou_stitch_threshold must lie in [0, 1], got {0}")]
    IouStitchThreshold(f64),
    #[error("sample_fraction must lie in (0, 1], got {0}")]
    SampleFraction(f64),
    #[error("huber_delta must be > 0, got {0}")]
    HuberDelta(f64),
    #[error("objectness_sigma must be > 0, got {0}")]
    ObjectnessSigma(f64),
    #[error("gaussian_sigma must be > 0, got {0}")]
    GaussianSigma(f64),
    #[error("objectness_threshold must lie in [0, 1], got {0}")]
    ObjectnessThreshold(f64),
    #[error("probability_threshold must lie in [0, 1], got {0}")]
    ProbabilityThreshold(f64),
    #[error("selection_radius must be >= 0, got {0}")]
    SelectionRadius(f64),
    #[error("feature dims must be >= 1, got F={0} D={1} E={2}")]
    FeatureDims(i64, i64, i64),
    #[error("feature_e={got} inconsistent with features={set} (expected {expected})")]
    FeatureWidthMismatch {
        got: usize,
        set: FeatureSet,
        expected: usize,
    },
    #[error("num_classes must be >= 2, got {0}")]
    NumClasses(i64),
    #[error("thing class {0} is outside the class range 1..{1}")]
    ThingClass(u16, u16),
    #[error("learning_rate must be > 0, got {0}")]
    LearningRate(f64),
    #[error("momentum must lie in [0, 1), got {0}")]
    Momentum(f64),
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("bad value for '{key}': {value}")]
    BadValue { key: String, value: String },
    #[error("malformed config line {line}: '{text}' (expected key=value)")]
    MalformedLine { line: usize, text: String },
    #[error("cannot read config file {0}")]
    Unreadable(String),
}

/// All tunables of the pipeline. See module docs for the file format.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    /// Temporal window size T (scans per 4D volume).
    pub temporal_window: usize,
    /// Number of sampled proposal centers K.
    pub num_proposals: usize,
    /// Grouping radius r in meters around each proposal center.
    pub group_radius: f64,
    /// DBScan neighborhood radius in aggregation-feature space.
    pub dbscan_eps: f64,
    /// DBScan core-point threshold (1 keeps every proposal).
    pub dbscan_min_points: usize,
    /// Minimum IoU for stitching a window instance onto a tracklet.
    pub iou_stitch_threshold: f64,
    /// Huber loss transition point.
    pub huber_delta: f64,
    /// Multi-task loss weights (semantic, voting, aggregation).
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Fraction of each past scan kept by importance sampling.
    pub sample_fraction: f64,
    /// Width of the Gaussian objectness training target, meters.
    pub objectness_sigma: f64,
    /// Isotropic sigma of the Gaussian-variant membership function, meters.
    pub gaussian_sigma: f64,
    /// Gaussian variant: minimum objectness for a point to seed a proposal.
    pub objectness_threshold: f64,
    /// Gaussian variant: minimum membership probability.
    pub probability_threshold: f64,
    /// Gaussian variant: greedy center selection radius (0 disables).
    pub selection_radius: f64,
    /// Per-point feature width F.
    pub feature_f: usize,
    /// Proposal feature width D.
    pub feature_d: usize,
    /// Aggregation feature width E (tied to `features`).
    pub feature_e: usize,
    /// Which geometric channels are enabled.
    pub features: FeatureSet,
    /// Window-instance formation mode.
    pub aggregate: AggregateMode,
    /// Proposal generation variant.
    pub variant: Variant,
    /// Proposal center sampling scheme.
    pub sampling: Sampling,
    /// Seed for every random stream in the pipeline.
    pub rng_seed: u64,
    /// Number of semantic classes (class 0 is reserved for unlabeled).
    pub num_classes: usize,
    /// Class ids evaluated as countable objects.
    pub thing_classes: Vec<u16>,
    /// Two-phase schedule lengths.
    pub phase1_iters: usize,
    pub phase2_iters: usize,
    /// Optimizer settings.
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            temporal_window: 2,
            num_proposals: 500,
            group_radius: 0.6,
            dbscan_eps: 0.6,
            dbscan_min_points: 1,
            iou_stitch_threshold: 0.5,
            huber_delta: 1.0,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            sample_fraction: 0.10,
            objectness_sigma: 0.6,
            gaussian_sigma: 1.0,
            objectness_threshold: 0.7,
            probability_threshold: 0.5,
            selection_radius: 0.0,
            feature_f: 256,
            feature_d: 128,
            feature_e: 7,
            features: FeatureSet::Full,
            aggregate: AggregateMode::Dbscan,
            variant: Variant::Voting,
            sampling: Sampling::Fps,
            rng_seed: 42,
            num_classes: 4,
            thing_classes: vec![2, 3],
            phase1_iters: 2000,
            phase2_iters: 800,
            learning_rate: 0.01,
            momentum: 0.9,
        }
    }
}

impl Config {
    /// Checks every invariant; returns the first violation.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.temporal_window < 1 {
            return Err(ConfigError::TemporalWindow(self.temporal_window as i64));
        }
        if self.num_proposals < 1 {
            return Err(ConfigError::NumProposals(self.num_proposals as i64));
        }
        if !(self.group_radius > 0.0) {
            return Err(ConfigError::GroupRadius(self.group_radius));
        }
        if !(self.dbscan_eps > 0.0) {
            return Err(ConfigError::DbscanEps(self.dbscan_eps));
        }
        if self.dbscan_min_points < 1 {
            return Err(ConfigError::DbscanMinPoints(self.dbscan_min_points as i64));
        }
        if !(0.0..=1.0).contains(&self.iou_stitch_threshold) {
            return Err(ConfigError::IouStitchThreshold(self.iou_stitch_threshold));
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err(ConfigError::SampleFraction(self.sample_fraction));
        }
        if !(self.huber_delta > 0.0) {
            return Err(ConfigError::HuberDelta(self.huber_delta));
        }
        if !(self.objectness_sigma > 0.0) {
            return Err(ConfigError::ObjectnessSigma(self.objectness_sigma));
        }
        if !(self.gaussian_sigma > 0.0) {
            return Err(ConfigError::GaussianSigma(self.gaussian_sigma));
        }
        if !(0.0..=1.0).contains(&self.objectness_threshold) {
            return Err(ConfigError::ObjectnessThreshold(self.objectness_threshold));
        }
        if !(0.0..=1.0).contains(&self.probability_threshold) {
            return Err(ConfigError::ProbabilityThreshold(self.probability_threshold));
        }
        if self.selection_radius < 0.0 {
            return Err(ConfigError::SelectionRadius(self.selection_radius));
        }
        if self.feature_f < 1 || self.feature_d < 1 || self.feature_e < 1 {
            return Err(ConfigError::FeatureDims(
                self.feature_f as i64,
                self.feature_d as i64,
                self.feature_e as i64,
            ));
        }
        if self.feature_e != self.features.width() {
            return Err(ConfigError::FeatureWidthMismatch {
                got: self.feature_e,
                set: self.features,
                expected: self.features.width(),
            });
        }
        if self.num_classes < 2 {
            return Err(ConfigError::NumClasses(self.num_classes as i64));
        }
        for &c in &self.thing_classes {
            if c == 0 || c as usize >= self.num_classes {
                return Err(ConfigError::ThingClass(c, self.num_classes as u16));
            }
        }
        if !(self.learning_rate > 0.0) {
            return Err(ConfigError::LearningRate(self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(ConfigError::Momentum(self.momentum));
        }
        Ok(())
    }

    /// Sets one key from its textual form. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = || ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        };
        match key {
            "temporal_window" => self.temporal_window = value.parse().map_err(|_| bad())?,
            "num_proposals" => self.num_proposals = value.parse().map_err(|_| bad())?,
            "group_radius" => self.group_radius = value.parse().map_err(|_| bad())?,
            "dbscan_eps" => self.dbscan_eps = value.parse().map_err(|_| bad())?,
            "dbscan_min_points" => self.dbscan_min_points = value.parse().map_err(|_| bad())?,
            "iou_stitch_threshold" => {
                self.iou_stitch_threshold = value.parse().map_err(|_| bad())?
            }
            "huber_delta" => self.huber_delta = value.parse().map_err(|_| bad())?,
            "alpha" => self.alpha = value.parse().map_err(|_| bad())?,
            "beta" => self.beta = value.parse().map_err(|_| bad())?,
            "gamma" => self.gamma = value.parse().map_err(|_| bad())?,
            "sample_fraction" => self.sample_fraction = value.parse().map_err(|_| bad())?,
            "objectness_sigma" => self.objectness_sigma = value.parse().map_err(|_| bad())?,
            "gaussian_sigma" => self.gaussian_sigma = value.parse().map_err(|_| bad())?,
            "objectness_threshold" => {
                self.objectness_threshold = value.parse().map_err(|_| bad())?
            }
            "probability_threshold" => {
                self.probability_threshold = value.parse().map_err(|_| bad())?
            }
            "selection_radius" => self.selection_radius = value.parse().map_err(|_| bad())?,
            "feature_f" => self.feature_f = value.parse().map_err(|_| bad())?,
            "feature_d" => self.feature_d = value.parse().map_err(|_| bad())?,
            "feature_e" => self.feature_e = value.parse().map_err(|_| bad())?,
            "features" => {
                self.features = match value {
                    "center" => FeatureSet::Center,
                    "center+radius" => FeatureSet::CenterRadius,
                    "full" => FeatureSet::Full,
                    _ => return Err(bad()),
                };
                self.feature_e = self.features.width();
            }
            "aggregate" => {
                self.aggregate = match value {
                    "dbscan" => AggregateMode::Dbscan,
                    "nms" => AggregateMode::Nms,
                    "centers" => AggregateMode::Centers,
                    _ => return Err(bad()),
                }
            }
            "variant" => {
                self.variant = match value {
                    "voting" => Variant::Voting,
                    "gaussian" => Variant::Gaussian,
                    _ => return Err(bad()),
                }
            }
            "sampling" => {
                self.sampling = match value {
                    "fps" => Sampling::Fps,
                    "random" => Sampling::Random,
                    _ => return Err(bad()),
                }
            }
            "rng_seed" => self.rng_seed = value.parse().map_err(|_| bad())?,
            "num_classes" => self.num_classes = value.parse().map_err(|_| bad())?,
            "thing_classes" => {
                self.thing_classes = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| s.trim().parse::<u16>().map_err(|_| bad()))
                    .collect::<Result<Vec<_>, _>>()?;
            }
            "phase1_iters" => self.phase1_iters = value.parse().map_err(|_| bad())?,
            "phase2_iters" => self.phase2_iters = value.parse().map_err(|_| bad())?,
            "learning_rate" => self.learning_rate = value.parse().map_err(|_| bad())?,
            "momentum" => self.momentum = value.parse().map_err(|_| bad())?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order, then validates.
    pub fn with_overrides<'a>(
        mut self,
        overrides: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self, ConfigError> {
        for (k, v) in overrides {
            self.set(k, v)?;
        }
        self.validate()?;
        Ok(self)
    }

    /// Parses a config from file contents.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::MalformedLine {
                    line: i + 1,
                    text: raw.to_string(),
                });
            };
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and validates a config file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Unreadable(format!("{}: {e}", path.display())))?;
        Config::parse(&text)
    }

    /// True when `class` is a countable object class.
    pub fn is_thing(&self, class: u16) -> bool {
        self.thing_classes.contains(&class)
    }

    /// Serializes every key, suitable for reloading with [`Config::parse`].
    pub fn to_key_values(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("temporal_window", self.temporal_window.to_string());
        put("num_proposals", self.num_proposals.to_string());
        put("group_radius", self.group_radius.to_string());
        put("dbscan_eps", self.dbscan_eps.to_string());
        put("dbscan_min_points", self.dbscan_min_points.to_string());
        put("iou_stitch_threshold", self.iou_stitch_threshold.to_string());
        put("huber_delta", self.huber_delta.to_string());
        put("alpha", self.alpha.to_string());
        put("beta", self.beta.to_string());
        put("gamma", self.gamma.to_string());
        put("sample_fraction", self.sample_fraction.to_string());
        put("objectness_sigma", self.objectness_sigma.to_string());
        put("gaussian_sigma", self.gaussian_sigma.to_string());
        put("objectness_threshold", self.objectness_threshold.to_string());
        put(
            "probability_threshold",
            self.probability_threshold.to_string(),
        );
        put("selection_radius", self.selection_radius.to_string());
        put("feature_f", self.feature_f.to_string());
        put("feature_d", self.feature_d.to_string());
        put("feature_e", self.feature_e.to_string());
        put("features", self.features.to_string());
        put("aggregate", self.aggregate.to_string());
        put("variant", self.variant.to_string());
        put("sampling", self.sampling.to_string());
        put("rng_seed", self.rng_seed.to_string());
        put("num_classes", self.num_classes.to_string());
        put(
            "thing_classes",
            self.thing_classes
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        put("phase1_iters", self.phase1_iters.to_string());
        put("phase2_iters", self.phase2_iters.to_string());
        put("learning_rate", self.learning_rate.to_string());
        put("momentum", self.momentum.to_string());
        m
    }
}
