//! Class rebalancing of training splits.
//!
//! Fixed-wing and hexarotor are the minority classes and are grown by the
//! same factor; quadrotor is the majority class and is shrunk. Every method
//! takes only the training split, so held-out instances are never visible.

use ndarray::Array2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::resample::SampledInstance;
use crate::ulog::VehicleType;

pub const MINORITY: [VehicleType; 2] = [VehicleType::FixedWing, VehicleType::Hexarotor];
pub const MAJORITY: VehicleType = VehicleType::Quadrotor;

#[derive(Debug, Error, PartialEq)]
pub enum RebalanceError {
    #[error("class {0} has no training instances")]
    EmptyClass(VehicleType),
    #[error("class {class} has {size} instances, too few for {k} neighbours")]
    ClassSmallerThanK {
        class: VehicleType,
        size: usize,
        k: usize,
    },
    #[error("invalid balancing configuration: {0}")]
    InvalidConfig(String),
    #[error("test fold was modified by rebalancing: {0}")]
    ContaminatedTestFold(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceMethod {
    #[default]
    None,
    RandomOversample,
    RandomUndersample,
    Smote,
    ClusterCentroid,
    Augmentation,
}

impl BalanceMethod {
    pub fn label(self) -> &'static str {
        match self {
            BalanceMethod::None => "None",
            BalanceMethod::RandomOversample => "Random Oversampling",
            BalanceMethod::RandomUndersample => "Random Undersampling",
            BalanceMethod::Smote => "SMOTE",
            BalanceMethod::ClusterCentroid => "Cluster Centroid",
            BalanceMethod::Augmentation => "Augmentation",
        }
    }

    pub fn is_oversampling(self) -> bool {
        matches!(
            self,
            BalanceMethod::RandomOversample | BalanceMethod::Smote | BalanceMethod::Augmentation
        )
    }

    pub fn is_undersampling(self) -> bool {
        matches!(self, BalanceMethod::RandomUndersample | BalanceMethod::ClusterCentroid)
    }
}

/// Ranges for the three time-series transforms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    /// Cropped fraction is drawn from `[crop_min, crop_max]`.
    pub crop_min: f64,
    pub crop_max: f64,
    /// Drift amplitude, as a fraction of each feature's range, is drawn
    /// from `[0, drift_max]`.
    pub drift_max: f64,
    pub reverse_prob: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            crop_min: 0.7,
            crop_max: 1.0,
            drift_max: 0.1,
            reverse_prob: 0.5,
        }
    }
}

impl AugmentSpec {
    /// Transforms that leave every instance unchanged.
    pub fn identity() -> Self {
        AugmentSpec {
            crop_min: 1.0,
            crop_max: 1.0,
            drift_max: 0.0,
            reverse_prob: 0.0,
        }
    }

    fn validate(&self) -> Result<(), RebalanceError> {
        let ok = 0.0 < self.crop_min
            && self.crop_min <= self.crop_max
            && self.crop_max <= 1.0
            && (0.0..=1.0).contains(&self.drift_max)
            && (0.0..=1.0).contains(&self.reverse_prob);
        if ok {
            Ok(())
        } else {
            Err(RebalanceError::InvalidConfig(format!("augmentation ranges out of bounds: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalanceConfig {
    pub method: BalanceMethod,
    /// Final minority count is `round(original × minority_factor)`.
    pub minority_factor: f64,
    /// Final majority count is `round(original × (1 − majority_reduction))`.
    pub majority_reduction: f64,
    pub smote_k: usize,
    pub augment: AugmentSpec,
    pub seed: u64,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        BalanceConfig {
            method: BalanceMethod::None,
            minority_factor: 2.0,
            majority_reduction: 0.5,
            smote_k: 5,
            augment: AugmentSpec::default(),
            seed: 0,
        }
    }
}

impl BalanceConfig {
    pub fn oversample(method: BalanceMethod, factor: f64) -> Self {
        BalanceConfig {
            method,
            minority_factor: factor,
            ..BalanceConfig::default()
        }
    }

    pub fn undersample(method: BalanceMethod, reduction: f64) -> Self {
        BalanceConfig {
            method,
            majority_reduction: reduction,
            ..BalanceConfig::default()
        }
    }

    /// The parameter this method reads, for reports ("150%", "25%").
    pub fn parameter_label(&self) -> String {
        if self.method.is_oversampling() {
            format!("{}%", (self.minority_factor * 100.0).round())
        } else if self.method.is_undersampling() {
            format!("{}%", (self.majority_reduction * 100.0).round())
        } else {
            "-".to_string()
        }
    }

    pub fn validate(&self) -> Result<(), RebalanceError> {
        if self.method.is_oversampling() && !(self.minority_factor >= 1.0 && self.minority_factor.is_finite()) {
            return Err(RebalanceError::InvalidConfig("minority_factor must be at least 1".into()));
        }
        if self.method.is_undersampling() && !(0.0..1.0).contains(&self.majority_reduction) {
            return Err(RebalanceError::InvalidConfig("majority_reduction must lie in [0, 1)".into()));
        }
        if self.method == BalanceMethod::Smote && self.smote_k == 0 {
            return Err(RebalanceError::InvalidConfig("smote_k must be positive".into()));
        }
        if self.method == BalanceMethod::Augmentation {
            self.augment.validate()?;
        }
        Ok(())
    }
}

pub fn oversample_target(n: usize, factor: f64) -> usize {
    (n as f64 * factor).round() as usize
}

pub fn undersample_target(n: usize, reduction: f64) -> usize {
    (n as f64 * (1.0 - reduction)).round() as usize
}

/// Applies the configured method to a training split.
pub fn rebalance(train: &Dataset, config: &BalanceConfig) -> Result<Dataset, RebalanceError> {
    config.validate()?;
    let seed = config.seed;
    match config.method {
        BalanceMethod::None => Ok(train.clone()),
        BalanceMethod::RandomOversample => random_oversample(train, config.minority_factor, seed),
        BalanceMethod::RandomUndersample => random_undersample(train, config.majority_reduction, seed),
        BalanceMethod::Smote => smote_oversample(train, config.minority_factor, config.smote_k, seed),
        BalanceMethod::ClusterCentroid => {
            cluster_centroid_undersample(train, config.majority_reduction, seed)
        }
        BalanceMethod::Augmentation => {
            augment_timeseries(train, config.minority_factor, &config.augment, seed)
        }
    }
}

fn class_members(train: &Dataset, class: VehicleType) -> Vec<usize> {
    (0..train.len()).filter(|&i| train.instances[i].label == class).collect()
}

/// Shared driver for the three oversamplers: `make` produces one new
/// instance of `class` from the member list.
fn grow_minorities<F>(train: &Dataset, factor: f64, seed: u64, mut make: F) -> Result<Dataset, RebalanceError>
where
    F: FnMut(&[usize], VehicleType, &mut ChaCha8Rng) -> Result<Vec<SampledInstance>, RebalanceError>,
{
    if !(factor >= 1.0) {
        return Err(RebalanceError::InvalidConfig("minority_factor must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = train.instances.clone();
    for class in MINORITY {
        let members = class_members(train, class);
        if members.is_empty() {
            return Err(RebalanceError::EmptyClass(class));
        }
        let extra = oversample_target(members.len(), factor) - members.len();
        if extra == 0 {
            continue;
        }
        let mut made = make(&members, class, &mut rng)?;
        // generators that build a batch at once return exactly `extra`
        if made.len() > extra {
            made.truncate(extra);
        }
        while made.len() < extra {
            made.extend(make(&members, class, &mut rng)?);
        }
        made.truncate(extra);
        out.extend(made);
    }
    Ok(train.with_instances(out))
}

fn synthetic_copy(parent: &SampledInstance, tag: &str, j: usize) -> SampledInstance {
    let mut inst = parent.clone();
    inst.synthetic = true;
    inst.source_id = format!("{}~{tag}{j}", parent.source_id);
    inst
}

/// Duplicates minority instances, drawn with replacement.
pub fn random_oversample(train: &Dataset, factor: f64, seed: u64) -> Result<Dataset, RebalanceError> {
    let mut counter = 0usize;
    grow_minorities(train, factor, seed, |members, _, rng| {
        let pick = members[rng.random_range(0..members.len())];
        counter += 1;
        Ok(vec![synthetic_copy(&train.instances[pick], "dup", counter)])
    })
}

/// Drops majority instances, drawn without replacement; relative order of
/// the survivors is kept.
pub fn random_undersample(train: &Dataset, reduction: f64, seed: u64) -> Result<Dataset, RebalanceError> {
    if !(0.0..1.0).contains(&reduction) {
        return Err(RebalanceError::InvalidConfig("majority_reduction must lie in [0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let members = class_members(train, MAJORITY);
    let keep_n = undersample_target(members.len(), reduction);
    let mut keep = vec![true; train.len()];
    if keep_n < members.len() {
        members.iter().for_each(|&i| keep[i] = false);
        for k in index::sample(&mut rng, members.len(), keep_n) {
            keep[members[k]] = true;
        }
    }
    let out = train
        .instances
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(inst, _)| inst.clone())
        .collect();
    Ok(train.with_instances(out))
}

fn flat(inst: &SampledInstance) -> &[f64] {
    inst.values.as_slice().expect("instances use standard layout")
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Indices of the `k` nearest other points to `points[i]`, ties broken by
/// index.
pub fn nearest_neighbors(points: &[&[f64]], i: usize, k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = (0..points.len())
        .filter(|&j| j != i)
        .map(|j| (sq_dist(points[i], points[j]), j))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().take(k).map(|(_, j)| j).collect()
}

pub fn interpolate(x: &[f64], z: &[f64], u: f64) -> Vec<f64> {
    x.iter().zip(z).map(|(a, b)| a + u * (b - a)).collect()
}

/// One interpolated point with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SmotePoint {
    pub base: usize,
    pub neighbor: usize,
    pub u: f64,
    pub values: Vec<f64>,
}

/// Generates `count` SMOTE points from `points`. `k` is clamped to
/// `points.len() − 1`.
pub fn smote_points<R: Rng>(points: &[&[f64]], k: usize, count: usize, rng: &mut R) -> Vec<SmotePoint> {
    let k = k.min(points.len().saturating_sub(1));
    if k == 0 || count == 0 {
        return Vec::new();
    }
    let neighbors: Vec<Vec<usize>> = (0..points.len()).map(|i| nearest_neighbors(points, i, k)).collect();
    (0..count)
        .map(|_| {
            let base = rng.random_range(0..points.len());
            let neighbor = neighbors[base][rng.random_range(0..k)];
            let u: f64 = rng.random_range(0.0..1.0);
            SmotePoint {
                base,
                neighbor,
                u,
                values: interpolate(points[base], points[neighbor], u),
            }
        })
        .collect()
}

/// Interpolates minority instances with their nearest same-class neighbours
/// in flattened value space.
pub fn smote_oversample(train: &Dataset, factor: f64, k: usize, seed: u64) -> Result<Dataset, RebalanceError> {
    grow_minorities(train, factor, seed, |members, class, rng| {
        if members.len() < 2 {
            return Err(RebalanceError::ClassSmallerThanK {
                class,
                size: members.len(),
                k,
            });
        }
        let points: Vec<&[f64]> = members.iter().map(|&i| flat(&train.instances[i])).collect();
        let extra = oversample_target(members.len(), factor) - members.len();
        let made = smote_points(&points, k, extra, rng);
        Ok(made
            .into_iter()
            .enumerate()
            .map(|(j, p)| {
                let x = &train.instances[members[p.base]];
                let z = &train.instances[members[p.neighbor]];
                let mut inst = synthetic_copy(x, "smote", j + 1);
                inst.values = Array2::from_shape_vec(x.values.dim(), p.values).unwrap();
                inst.observed = &x.observed | &z.observed;
                inst
            })
            .collect())
    })
}

/// Result of a k-means run.
#[derive(Debug, Clone)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    /// Sum of squared distances after each assignment step.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

pub const KMEANS_MAX_ITER: usize = 300;
pub const KMEANS_TOL: f64 = 1e-4;

fn nearest_centroid(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cent) in centroids.iter().enumerate() {
        let d = sq_dist(p, cent);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding. A cluster that loses all its
/// points keeps its previous centroid.
pub fn kmeans<R: Rng>(points: &[&[f64]], k: usize, rng: &mut R) -> KMeans {
    assert!(k >= 1 && k <= points.len(), "k must lie in 1..=n");
    let dim = points[0].len();

    let mut centroids: Vec<Vec<f64>> = vec![points[rng.random_range(0..points.len())].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            // guard against rounding leaving us on a zero-weight point
            if d2[chosen] == 0.0 {
                chosen = d2.iter().rposition(|&w| w > 0.0).unwrap();
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[pick].to_vec();
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &c));
        }
        centroids.push(c);
    }

    let mut assignment = vec![0usize; points.len()];
    let mut objective = Vec::new();
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITER {
        iterations += 1;
        let mut obj = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest_centroid(p, &centroids);
            assignment[i] = c;
            obj += d;
        }
        objective.push(obj);

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            let c = assignment[i];
            counts[c] += 1;
            sums[c].iter_mut().zip(p.iter()).for_each(|(s, v)| *s += v);
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let n = counts[c] as f64;
            let new: Vec<f64> = sums[c].iter().map(|s| s / n).collect();
            shift = shift.max(sq_dist(&new, &centroids[c]).sqrt());
            centroids[c] = new;
        }
        if shift <= KMEANS_TOL {
            break;
        }
    }
    // final assignment against the converged centroids
    for (i, p) in points.iter().enumerate() {
        assignment[i] = nearest_centroid(p, &centroids).0;
    }
    KMeans {
        centroids,
        assignment,
        objective,
        iterations,
    }
}

/// Replaces the majority class by k-means centroids.
pub fn cluster_centroid_undersample(train: &Dataset, reduction: f64, seed: u64) -> Result<Dataset, RebalanceError> {
    if !(0.0..1.0).contains(&reduction) {
        return Err(RebalanceError::InvalidConfig("majority_reduction must lie in [0, 1)".into()));
    }
    let members = class_members(train, MAJORITY);
    let m = undersample_target(members.len(), reduction);
    if members.is_empty() || m == members.len() {
        return Ok(train.clone());
    }
    if m == 0 {
        return Err(RebalanceError::InvalidConfig("reduction leaves no majority instances".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<&[f64]> = members.iter().map(|&i| flat(&train.instances[i])).collect();
    let km = kmeans(&points, m, &mut rng);
    let shape = train.instances[members[0]].values.dim();

    let mut out: Vec<SampledInstance> = train
        .instances
        .iter()
        .filter(|inst| inst.label != MAJORITY)
        .cloned()
        .collect();
    for (c, centroid) in km.centroids.into_iter().enumerate() {
        let mut observed = Array2::from_elem(shape, false);
        let mut any = false;
        for (j, &a) in km.assignment.iter().enumerate() {
            if a == c {
                observed = &observed | &train.instances[members[j]].observed;
                any = true;
            }
        }
        if !any {
            observed.fill(true);
        }
        out.push(SampledInstance {
            values: Array2::from_shape_vec(shape, centroid).unwrap(),
            observed,
            label: MAJORITY,
            source_id: format!("centroid{}", c + 1),
            synthetic: true,
        });
    }
    Ok(train.with_instances(out))
}

/// Contiguous crop of `fraction` of the rows, stretched back to the
/// original length by linear interpolation.
pub fn crop_stretch(inst: &SampledInstance, fraction: f64, start_unit: f64) -> (Array2<f64>, Array2<bool>) {
    let (t, f) = inst.values.dim();
    let len = ((fraction * t as f64).round() as usize).clamp(2.min(t), t);
    if len == t {
        return (inst.values.clone(), inst.observed.clone());
    }
    let start = ((t - len + 1) as f64 * start_unit).floor().min((t - len) as f64) as usize;
    let mut values = Array2::zeros((t, f));
    let mut observed = Array2::from_elem((t, f), false);
    for i in 0..t {
        let pos = if t > 1 {
            i as f64 * (len - 1) as f64 / (t - 1) as f64
        } else {
            0.0
        };
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        let w = pos - lo as f64;
        for j in 0..f {
            let a = inst.values[[start + lo, j]];
            let b = inst.values[[start + hi, j]];
            values[[i, j]] = a + w * (b - a);
            observed[[i, j]] = inst.observed[[start + lo, j]] || (w > 0.0 && inst.observed[[start + hi, j]]);
        }
    }
    (values, observed)
}

/// Adds a Gaussian random walk to every column, rescaled so its largest
/// magnitude is `amplitude × column range`. Constant columns are left alone.
pub fn add_drift<R: Rng>(values: &mut Array2<f64>, amplitude: f64, rng: &mut R) {
    let t = values.nrows();
    for mut col in values.columns_mut() {
        let walk: Vec<f64> = (0..t)
            .scan(0.0, |acc, _| {
                *acc += rng.sample::<f64, _>(StandardNormal);
                Some(*acc)
            })
            .collect();
        let (lo, hi) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let range = hi - lo;
        let peak = walk.iter().fold(0.0f64, |m, w| m.max(w.abs()));
        if amplitude == 0.0 || !(range > 0.0) || peak == 0.0 {
            continue;
        }
        let scale = amplitude * range / peak;
        col.iter_mut().zip(&walk).for_each(|(v, w)| *v += w * scale);
    }
}

pub fn reverse_rows(values: &mut Array2<f64>, observed: &mut Array2<bool>) {
    values.invert_axis(ndarray::Axis(0));
    observed.invert_axis(ndarray::Axis(0));
    *values = values.as_standard_layout().into_owned();
    *observed = observed.as_standard_layout().into_owned();
}

/// One augmented copy of `inst`: crop, drift, then maybe reverse.
pub fn augment_instance<R: Rng>(inst: &SampledInstance, spec: &AugmentSpec, rng: &mut R) -> SampledInstance {
    let fraction = rng.random_range(spec.crop_min..=spec.crop_max);
    let start_unit: f64 = rng.random_range(0.0..1.0);
    let (mut values, mut observed) = crop_stretch(inst, fraction, start_unit);
    let amplitude = rng.random_range(0.0..=spec.drift_max);
    add_drift(&mut values, amplitude, rng);
    if rng.random_bool(spec.reverse_prob) {
        reverse_rows(&mut values, &mut observed);
    }
    SampledInstance {
        values,
        observed,
        label: inst.label,
        source_id: inst.source_id.clone(),
        synthetic: true,
    }
}

/// Grows the minority classes with augmented copies of random members.
pub fn augment_timeseries(
    train: &Dataset,
    factor: f64,
    spec: &AugmentSpec,
    seed: u64,
) -> Result<Dataset, RebalanceError> {
    spec.validate()?;
    let mut counter = 0usize;
    grow_minorities(train, factor, seed, |members, _, rng| {
        let parent = &train.instances[members[rng.random_range(0..members.len())]];
        counter += 1;
        let mut inst = augment_instance(parent, spec, rng);
        inst.source_id = format!("{}~aug{counter}", parent.source_id);
        Ok(vec![inst])
    })
}

/// Which split an instance belongs to when checking fold purity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Checks that the instances tagged as test are exactly `reference`, the
/// held-out fold as it was before balancing: same count, same order, same
/// values and none synthetic.
pub fn assert_test_fold_purity(
    instances: &[SampledInstance],
    splits: &[Split],
    reference: &[SampledInstance],
) -> Result<(), RebalanceError> {
    if instances.len() != splits.len() {
        return Err(RebalanceError::ContaminatedTestFold(
            "split assignment does not cover every instance".into(),
        ));
    }
    let test: Vec<&SampledInstance> = instances
        .iter()
        .zip(splits)
        .filter(|(_, &s)| s == Split::Test)
        .map(|(i, _)| i)
        .collect();
    if let Some(bad) = test.iter().find(|i| i.synthetic) {
        return Err(RebalanceError::ContaminatedTestFold(format!(
            "synthetic instance {} in test fold",
            bad.source_id
        )));
    }
    if test.len() != reference.len() {
        return Err(RebalanceError::ContaminatedTestFold(format!(
            "test fold has {} instances, expected {}",
            test.len(),
            reference.len()
        )));
    }
    if let Some((got, _)) = test.iter().zip(reference).find(|(a, b)| **a != *b) {
        return Err(RebalanceError::ContaminatedTestFold(format!(
            "instance {} differs from the held-out original",
            got.source_id
        )));
    }
    Ok(())
}

/// Seed for one fold, derived the same way by every caller.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed ^ (fold as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}
