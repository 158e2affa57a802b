//! Synthetic fine-grained, long-tailed, meta-annotated datasets, plus the
//! augmentation and mixup transforms shared by all trainers.
//!
//! Geometry: meta-category centers are mutually orthogonal directions at a
//! fixed pairwise distance ([`META_CENTER_DISTANCE`]); each subclass center
//! is its meta center plus a random offset of norm `inter_subclass_gap`;
//! samples are subclass centers plus isotropic gaussian noise. Subclasses
//! of one meta-category therefore sit much closer to each other than to
//! any other meta-category, which is the fine-grained regime: small
//! separations inside a meta-category, large separations across.
//!
//! Class `c` maps to meta-category `c % num_meta_categories` and takes the
//! `c`-th entry of the geometric count schedule, so every meta-category
//! holds a spread of head and tail classes. Rare classes therefore share
//! a meta-category (and its tight geometry) with frequent ones, which is
//! the fine-grained long-tail regime: the hardest confusions for a tail
//! class are its frequent siblings.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

use crate::numerics::{Matrix, SeededRng};

/// Pairwise distance between meta-category centers. A fixed generator
/// constant so that `inter_subclass_gap >= META_CENTER_DISTANCE` is a
/// detectable infeasible geometry.
pub const META_CENTER_DISTANCE: f64 = 3.0;

/// Fraction of each class's labeled samples held out for validation.
pub const VAL_FRACTION: f64 = 0.2;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid dataset config: {0}")]
    InvalidConfig(String),
    #[error(
        "infeasible geometry: inter_subclass_gap {gap} must be smaller than \
         the meta-center distance {separation}"
    )]
    InfeasibleGeometry { gap: f64, separation: f64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset file: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Configuration for [`generate`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetConfig {
    pub num_meta_categories: usize,
    /// Total classes C = num_meta_categories * subclasses_per_meta.
    pub subclasses_per_meta: usize,
    pub feature_dim: usize,
    /// Samples in the largest class.
    pub head_count: usize,
    /// Tail/head sample ratio in (0, 1]; 1 means balanced.
    pub imbalance_ratio: f64,
    pub intra_class_noise: f64,
    pub inter_subclass_gap: f64,
    /// Probability that a sample's meta attribute matches its true
    /// meta-category; the remainder is uniformly wrong.
    pub meta_fidelity: f64,
    /// Fraction of each class diverted to the unlabeled test pool.
    pub unlabeled_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            num_meta_categories: 4,
            subclasses_per_meta: 3,
            feature_dim: 16,
            head_count: 120,
            imbalance_ratio: 0.02,
            intra_class_noise: 1.0,
            inter_subclass_gap: 1.5,
            meta_fidelity: 0.9,
            unlabeled_fraction: 0.3,
            seed: 1,
        }
    }
}

impl DatasetConfig {
    pub fn num_classes(&self) -> usize {
        self.num_meta_categories * self.subclasses_per_meta
    }

    /// The true meta-category of a class (classes interleave across
    /// meta-categories so each one spans head and tail frequencies).
    pub fn meta_of(&self, class: usize) -> usize {
        class % self.num_meta_categories
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        let fail = |msg: &str| Err(DatagenError::InvalidConfig(msg.to_string()));
        if self.num_classes() < 2 {
            return fail("need at least 2 classes");
        }
        if self.head_count < 1 {
            return fail("head_count must be at least 1");
        }
        if !(self.imbalance_ratio > 0.0 && self.imbalance_ratio <= 1.0) {
            return fail("imbalance_ratio must be in (0, 1]");
        }
        if self.intra_class_noise < 0.0 {
            return fail("intra_class_noise must be non-negative");
        }
        if self.inter_subclass_gap <= 0.0 {
            return fail("inter_subclass_gap must be positive");
        }
        if !(0.0..=1.0).contains(&self.meta_fidelity) {
            return fail("meta_fidelity must be in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.unlabeled_fraction) {
            return fail("unlabeled_fraction must be in [0, 1)");
        }
        if self.feature_dim < self.num_meta_categories {
            return fail("feature_dim must be at least num_meta_categories");
        }
        if self.inter_subclass_gap >= META_CENTER_DISTANCE {
            return Err(DatagenError::InfeasibleGeometry {
                gap: self.inter_subclass_gap,
                separation: META_CENTER_DISTANCE,
            });
        }
        Ok(())
    }
}

/// Per-sample split tag. Test samples are unlabeled from the trainers'
/// point of view; their true labels stay in the dataset for evaluation
/// only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    TestUnlabeled,
}

/// A generated dataset. `class_counts` always matches the label histogram
/// and the geometric schedule exactly.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub features: Matrix,
    pub labels: Vec<usize>,
    /// One-hot meta attribute per sample (num_meta_categories columns).
    pub meta: Matrix,
    pub split: Vec<Split>,
    pub class_counts: Vec<usize>,
    pub meta_centers: Matrix,
    pub subclass_centers: Matrix,
}

// Matrix serializes as {rows, cols, data}; derive support lives here so the
// file format stays a plain key/value tree with decimal arrays.
impl Serialize for Matrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("Matrix", 3)?;
        st.serialize_field("rows", &self.rows())?;
        st.serialize_field("cols", &self.cols())?;
        st.serialize_field("data", self.data())?;
        st.end()
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            rows: usize,
            cols: usize,
            data: Vec<f64>,
        }
        let raw = Raw::deserialize(d)?;
        Matrix::from_vec(raw.rows, raw.cols, raw.data).map_err(serde::de::Error::custom)
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_counts.len()
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    /// SHA-256 over the canonical JSON serialization, hex-encoded. Used to
    /// detect runs that silently compare different datasets.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("dataset serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hex_string(&hasher.finalize())
    }

    pub fn write_file(&self, path: &Path) -> Result<(), DatagenError> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self, DatagenError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// `class,count` CSV of the long-tail histogram.
    pub fn class_counts_csv(&self) -> String {
        let mut out = String::from("class,count\n");
        for (c, n) in self.class_counts.iter().enumerate() {
            out.push_str(&format!("{c},{n}\n"));
        }
        out
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Geometric long-tail schedule:
/// `n_c = max(1, round(head * ratio^(c / (C-1))))`, monotone
/// non-increasing, with rounding half away from zero.
pub fn class_count_schedule(
    num_classes: usize,
    head: usize,
    ratio: f64,
) -> Result<Vec<usize>, DatagenError> {
    if num_classes < 2 {
        return Err(DatagenError::InvalidConfig(
            "schedule needs at least 2 classes".into(),
        ));
    }
    if head < 1 {
        return Err(DatagenError::InvalidConfig("head must be >= 1".into()));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(DatagenError::InvalidConfig(
            "ratio must be in (0, 1]".into(),
        ));
    }
    let c_max = (num_classes - 1) as f64;
    Ok((0..num_classes)
        .map(|c| {
            let n = (head as f64) * ratio.powf(c as f64 / c_max);
            (n.round() as usize).max(1)
        })
        .collect())
}

/// Generate a dataset. Deterministic given the config (all randomness is
/// drawn from purpose-tagged sub-streams of `config.seed`).
pub fn generate(config: &DatasetConfig) -> Result<Dataset, DatagenError> {
    config.validate()?;
    let num_meta = config.num_meta_categories;
    let num_classes = config.num_classes();
    let dim = config.feature_dim;
    let root = SeededRng::new(config.seed);

    let meta_centers = draw_meta_centers(&root, num_meta, dim);

    // Subclass centers: meta center + random offset of norm gap.
    let mut offsets_rng = root.child("subclass-offsets");
    let mut subclass_centers = Matrix::zeros(num_classes, dim);
    for class in 0..num_classes {
        let meta_id = config.meta_of(class);
        let offset = random_direction(&mut offsets_rng, dim);
        for d in 0..dim {
            subclass_centers.set(
                class,
                d,
                meta_centers.get(meta_id, d) + config.inter_subclass_gap * offset[d],
            );
        }
    }

    let class_counts =
        class_count_schedule(num_classes, config.head_count, config.imbalance_ratio)?;
    let total: usize = class_counts.iter().sum();

    let mut features = Matrix::zeros(total, dim);
    let mut labels = Vec::with_capacity(total);
    let mut meta = Matrix::zeros(total, num_meta);
    let mut split = Vec::with_capacity(total);

    let mut sample = 0;
    for (class, &count) in class_counts.iter().enumerate() {
        let meta_id = config.meta_of(class);
        let mut noise_rng = root.child_indexed("samples", class as u64);
        let mut attr_rng = root.child_indexed("meta-attr", class as u64);
        let splits = split_counts(count, config.unlabeled_fraction);
        for k in 0..count {
            for d in 0..dim {
                let x = subclass_centers.get(class, d)
                    + config.intra_class_noise * noise_rng.next_gaussian();
                features.set(sample, d, x);
            }
            labels.push(class);
            let observed_meta = draw_meta_attribute(
                &mut attr_rng,
                meta_id,
                num_meta,
                config.meta_fidelity,
            );
            meta.set(sample, observed_meta, 1.0);
            split.push(splits[k]);
            sample += 1;
        }
    }

    Ok(Dataset {
        config: config.clone(),
        features,
        labels,
        meta,
        split,
        class_counts,
        meta_centers,
        subclass_centers,
    })
}

/// Mutually orthogonal meta centers at pairwise distance
/// [`META_CENTER_DISTANCE`]: Gram-Schmidt over gaussian draws, scaled to
/// norm `META_CENTER_DISTANCE / sqrt(2)`.
fn draw_meta_centers(root: &SeededRng, num_meta: usize, dim: usize) -> Matrix {
    let mut rng = root.child("meta-centers");
    let scale = META_CENTER_DISTANCE / std::f64::consts::SQRT_2;
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(num_meta);
    while basis.len() < num_meta {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.next_gaussian()).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-9 {
            continue; // numerically dependent draw; try again
        }
        for x in &mut v {
            *x /= norm;
        }
        basis.push(v);
    }
    let mut centers = Matrix::zeros(num_meta, dim);
    for (m, b) in basis.iter().enumerate() {
        for (d, x) in b.iter().enumerate() {
            centers.set(m, d, scale * x);
        }
    }
    centers
}

fn random_direction(rng: &mut SeededRng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.next_gaussian()).collect();
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn draw_meta_attribute(
    rng: &mut SeededRng,
    true_meta: usize,
    num_meta: usize,
    fidelity: f64,
) -> usize {
    if num_meta == 1 || rng.next_f64() < fidelity {
        return true_meta;
    }
    let wrong = rng.below(num_meta as u64 - 1) as usize;
    if wrong >= true_meta {
        wrong + 1
    } else {
        wrong
    }
}

/// Per-class split assignment: `round(count * unlabeled_fraction)` test
/// samples, [`VAL_FRACTION`] of the remainder for validation, at least one
/// training sample per class.
fn split_counts(count: usize, unlabeled_fraction: f64) -> Vec<Split> {
    let mut unlabeled = (count as f64 * unlabeled_fraction).round() as usize;
    let mut val = ((count - unlabeled) as f64 * VAL_FRACTION).round() as usize;
    while count - unlabeled - val < 1 {
        if val > 0 {
            val -= 1;
        } else if unlabeled > 0 {
            unlabeled -= 1;
        } else {
            break;
        }
    }
    let train = count - unlabeled - val;
    let mut tags = Vec::with_capacity(count);
    tags.extend(std::iter::repeat(Split::Train).take(train));
    tags.extend(std::iter::repeat(Split::Val).take(val));
    tags.extend(std::iter::repeat(Split::TestUnlabeled).take(unlabeled));
    tags
}

/// Augmentation policy. The identity policy `(0, 0, [1, 1], 0)` maps every
/// sample to itself bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AugmentPolicy {
    /// Std-dev of per-coordinate additive gaussian jitter.
    pub jitter_sigma: f64,
    /// Per-coordinate zeroing probability (random-erasing analog).
    pub mask_prob: f64,
    /// Multiplicative scale drawn uniformly from this range.
    pub scale_range: (f64, f64),
    /// Std-dev of a scalar offset added to every coordinate (the crop /
    /// recentering analog: a translation along the all-ones direction).
    pub crop_shift_sigma: f64,
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        AugmentPolicy {
            jitter_sigma: 0.0,
            mask_prob: 0.0,
            scale_range: (1.0, 1.0),
            crop_shift_sigma: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.jitter_sigma == 0.0
            && self.mask_prob == 0.0
            && self.scale_range == (1.0, 1.0)
            && self.crop_shift_sigma == 0.0
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        let fail = |msg: &str| Err(DatagenError::InvalidConfig(msg.to_string()));
        if self.jitter_sigma < 0.0 {
            return fail("jitter_sigma must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return fail("mask_prob must be in [0, 1]");
        }
        if !(self.scale_range.0 > 0.0 && self.scale_range.0 <= self.scale_range.1) {
            return fail("scale_range must satisfy 0 < lo <= hi");
        }
        if self.crop_shift_sigma < 0.0 {
            return fail("crop_shift_sigma must be non-negative");
        }
        Ok(())
    }
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy::identity()
    }
}

/// Apply the policy stages in the fixed order scale, jitter, mask,
/// crop-shift. A stage whose knob is at its identity value is skipped
/// entirely and consumes no randomness.
pub fn augment(x: &[f64], policy: &AugmentPolicy, rng: &mut SeededRng) -> Vec<f64> {
    let mut out = x.to_vec();
    if policy.scale_range != (1.0, 1.0) {
        let s = rng.uniform(policy.scale_range.0, policy.scale_range.1);
        for v in &mut out {
            *v *= s;
        }
    }
    if policy.jitter_sigma > 0.0 {
        for v in &mut out {
            *v += policy.jitter_sigma * rng.next_gaussian();
        }
    }
    if policy.mask_prob > 0.0 {
        for v in &mut out {
            if rng.next_f64() < policy.mask_prob {
                *v = 0.0;
            }
        }
    }
    if policy.crop_shift_sigma > 0.0 {
        let shift = policy.crop_shift_sigma * rng.next_gaussian();
        for v in &mut out {
            *v += shift;
        }
    }
    out
}

/// Deterministic recentering: remove the mean coordinate, undoing any
/// translation along the all-ones direction (the synthetic stand-in for
/// detector-based recropping).
pub fn recenter(x: &[f64]) -> Vec<f64> {
    let mean = x.iter().sum::<f64>() / x.len().max(1) as f64;
    x.iter().map(|v| v - mean).collect()
}

/// A mixed batch: convex combinations of inputs and of one-hot targets.
#[derive(Debug, Clone)]
pub struct MixupBatch {
    pub features: Matrix,
    /// Soft targets; each row is a probability distribution.
    pub targets: Matrix,
    pub lambda: f64,
}

/// Mixup with an explicit coefficient (exposed for tests and for callers
/// that schedule lambda themselves).
pub fn mixup_with_lambda(
    features_a: &Matrix,
    labels_a: &[usize],
    features_b: &Matrix,
    labels_b: &[usize],
    num_classes: usize,
    lambda: f64,
) -> MixupBatch {
    assert_eq!(features_a.rows(), features_b.rows(), "batch size mismatch");
    assert_eq!(features_a.cols(), features_b.cols(), "feature dim mismatch");
    assert_eq!(features_a.rows(), labels_a.len());
    assert_eq!(features_b.rows(), labels_b.len());
    let n = features_a.rows();
    let mut features = Matrix::zeros(n, features_a.cols());
    let mut targets = Matrix::zeros(n, num_classes);
    for i in 0..n {
        for d in 0..features_a.cols() {
            features.set(
                i,
                d,
                lambda * features_a.get(i, d) + (1.0 - lambda) * features_b.get(i, d),
            );
        }
        targets.set(i, labels_a[i], lambda);
        let t = targets.get(i, labels_b[i]) + (1.0 - lambda);
        targets.set(i, labels_b[i], t);
    }
    MixupBatch {
        features,
        targets,
        lambda,
    }
}

/// Mixup with `lambda ~ Beta(alpha, alpha)` (one draw per batch).
pub fn mixup(
    features_a: &Matrix,
    labels_a: &[usize],
    features_b: &Matrix,
    labels_b: &[usize],
    num_classes: usize,
    alpha: f64,
    rng: &mut SeededRng,
) -> MixupBatch {
    assert!(alpha > 0.0, "mixup alpha must be positive");
    let lambda = rng.next_beta(alpha, alpha);
    mixup_with_lambda(features_a, labels_a, features_b, labels_b, num_classes, lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tolerances::ANALYTIC;
    use proptest::prelude::*;

    #[test]
    fn schedule_matches_formula() {
        assert_eq!(
            class_count_schedule(4, 100, 0.01).unwrap(),
            vec![100, 22, 5, 1]
        );
        assert_eq!(class_count_schedule(2, 50, 0.02).unwrap(), vec![50, 1]);
        assert_eq!(class_count_schedule(3, 7, 1.0).unwrap(), vec![7, 7, 7]);
        assert!(class_count_schedule(4, 100, 0.0).is_err());
    }

    #[test]
    fn schedule_monotone_non_increasing() {
        let counts = class_count_schedule(12, 120, 0.02).unwrap();
        assert!(counts.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(counts[0], 120);
        assert_eq!(*counts.last().unwrap(), 2);
    }

    #[test]
    fn generate_counts_match_schedule_exactly() {
        let ds = generate(&DatasetConfig::default()).unwrap();
        let expected = class_count_schedule(12, 120, 0.02).unwrap();
        assert_eq!(ds.class_counts, expected);
        let mut histogram = vec![0usize; ds.num_classes()];
        for &l in &ds.labels {
            histogram[l] += 1;
        }
        assert_eq!(histogram, ds.class_counts);
    }

    #[test]
    fn generate_full_fidelity_meta_matches_truth() {
        let cfg = DatasetConfig {
            meta_fidelity: 1.0,
            ..DatasetConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        for i in 0..ds.len() {
            let true_meta = cfg.meta_of(ds.labels[i]);
            assert_eq!(ds.meta.get(i, true_meta), 1.0);
            assert_eq!(ds.meta.row(i).iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn generate_zero_noise_collapses_to_centers() {
        let cfg = DatasetConfig {
            intra_class_noise: 0.0,
            head_count: 5,
            ..DatasetConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        for i in 0..ds.len() {
            let c = ds.labels[i];
            for d in 0..cfg.feature_dim {
                assert_eq!(ds.features.get(i, d), ds.subclass_centers.get(c, d));
            }
        }
    }

    #[test]
    fn generate_is_deterministic() {
        let cfg = DatasetConfig::default();
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generate_rejects_infeasible_geometry() {
        let cfg = DatasetConfig {
            inter_subclass_gap: META_CENTER_DISTANCE + 0.5,
            ..DatasetConfig::default()
        };
        assert!(matches!(
            generate(&cfg),
            Err(DatagenError::InfeasibleGeometry { .. })
        ));
    }

    #[test]
    fn fine_grained_structure_on_centers() {
        // Mean center distance to same-meta siblings must be below the
        // mean distance to other-meta classes.
        let ds = generate(&DatasetConfig::default()).unwrap();
        let cfg = &ds.config;
        let dist = |a: usize, b: usize| -> f64 {
            (0..cfg.feature_dim)
                .map(|d| {
                    let diff = ds.subclass_centers.get(a, d) - ds.subclass_centers.get(b, d);
                    diff * diff
                })
                .sum::<f64>()
                .sqrt()
        };
        for a in 0..ds.num_classes() {
            let meta_a = cfg.meta_of(a);
            let (mut same, mut same_n, mut other, mut other_n) = (0.0, 0, 0.0, 0);
            for b in 0..ds.num_classes() {
                if a == b {
                    continue;
                }
                if cfg.meta_of(b) == meta_a {
                    same += dist(a, b);
                    same_n += 1;
                } else {
                    other += dist(a, b);
                    other_n += 1;
                }
            }
            assert!(same / (same_n as f64) < other / (other_n as f64), "class {a}");
        }
    }

    #[test]
    fn every_class_keeps_a_train_sample() {
        let ds = generate(&DatasetConfig::default()).unwrap();
        let mut train_per_class = vec![0usize; ds.num_classes()];
        for i in 0..ds.len() {
            if ds.split[i] == Split::Train {
                train_per_class[ds.labels[i]] += 1;
            }
        }
        assert!(train_per_class.iter().all(|&n| n >= 1));
    }

    #[test]
    fn augment_identity_is_bit_exact() {
        let x = vec![0.5, -1.25, 3.0, 0.0];
        let mut rng = SeededRng::new(3);
        let y = augment(&x, &AugmentPolicy::identity(), &mut rng);
        assert_eq!(x, y);
    }

    #[test]
    fn augment_full_mask_zeroes() {
        let x = vec![0.5, -1.25, 3.0];
        let policy = AugmentPolicy {
            mask_prob: 1.0,
            ..AugmentPolicy::identity()
        };
        let mut rng = SeededRng::new(3);
        assert_eq!(augment(&x, &policy, &mut rng), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn augment_deterministic_for_fixed_seed() {
        let x = vec![0.5, -1.25, 3.0];
        let policy = AugmentPolicy {
            jitter_sigma: 0.3,
            mask_prob: 0.2,
            scale_range: (0.8, 1.2),
            crop_shift_sigma: 0.1,
        };
        let a = augment(&x, &policy, &mut SeededRng::new(9));
        let b = augment(&x, &policy, &mut SeededRng::new(9));
        assert_eq!(a, b);
    }

    #[test]
    fn recenter_removes_uniform_shift() {
        let x = vec![1.0, 2.0, 3.0];
        let shifted: Vec<f64> = x.iter().map(|v| v + 5.0).collect();
        let a = recenter(&x);
        let b = recenter(&shifted);
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() <= ANALYTIC);
        }
    }

    #[test]
    fn mixup_endpoints_and_midpoint() {
        let a = Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Matrix::from_vec(1, 2, vec![3.0, 4.0]).unwrap();

        let full = mixup_with_lambda(&a, &[0], &b, &[1], 3, 1.0);
        assert_eq!(full.features.row(0), a.row(0));
        assert_eq!(full.targets.row(0), &[1.0, 0.0, 0.0]);

        let same = mixup_with_lambda(&a, &[2], &b, &[2], 3, 0.5);
        assert_eq!(same.targets.row(0), &[0.0, 0.0, 1.0]);

        let diff = mixup_with_lambda(&a, &[0], &b, &[1], 3, 0.5);
        assert_eq!(diff.targets.row(0), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn dataset_file_round_trip() {
        let ds = generate(&DatasetConfig {
            head_count: 10,
            ..DatasetConfig::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.json");
        ds.write_file(&path).unwrap();
        let back = Dataset::read_file(&path).unwrap();
        assert_eq!(ds, back);
        assert_eq!(ds.fingerprint(), back.fingerprint());
    }

    #[test]
    fn class_counts_csv_layout() {
        let ds = generate(&DatasetConfig {
            head_count: 10,
            ..DatasetConfig::default()
        })
        .unwrap();
        let csv = ds.class_counts_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("class,count"));
        assert_eq!(lines.count(), ds.num_classes());
    }

    proptest! {
        #[test]
        fn mixup_targets_are_distributions(
            lambda in 0.0..=1.0f64,
            la in 0usize..4,
            lb in 0usize..4,
        ) {
            let a = Matrix::from_vec(1, 2, vec![1.0, -1.0]).unwrap();
            let b = Matrix::from_vec(1, 2, vec![0.5, 0.25]).unwrap();
            let mixed = mixup_with_lambda(&a, &[la], &b, &[lb], 4, lambda);
            let sum: f64 = mixed.targets.row(0).iter().sum();
            prop_assert!((sum - 1.0).abs() <= ANALYTIC);
            prop_assert!(mixed.targets.row(0).iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn augment_identity_policy_proptest(
            vals in proptest::collection::vec(-5.0..5.0f64, 1..8),
            seed in 0u64..1000,
        ) {
            let mut rng = SeededRng::new(seed);
            let out = augment(&vals, &AugmentPolicy::identity(), &mut rng);
            prop_assert_eq!(out, vals);
        }
    }
}
