//! Feature selection and per-flight feature assembly.
//!
//! A feature is addressed as `topic.field`, optionally with a derivation
//! suffix: `vehicle_attitude.q@roll` takes the `q[0..4]` quaternion columns of
//! `vehicle_attitude` and yields the roll angle.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ulog::{FlightLog, TopicSeries};

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("coverage requested over an empty corpus")]
    EmptyCorpus,
    #[error("coverage threshold {0} outside (0, 1]")]
    InvalidThreshold(f64),
    #[error("asked for {requested} random features but only {available} are eligible")]
    InsufficientFeatures { requested: usize, available: usize },
    #[error("quaternion has zero or non-finite norm")]
    ZeroQuaternion,
    #[error("cannot parse feature key `{0}`")]
    BadKey(String),
}

/// Quantity computed from raw columns rather than read directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Derived {
    Roll,
    Pitch,
    Yaw,
}

impl Derived {
    fn name(self) -> &'static str {
        match self {
            Derived::Roll => "roll",
            Derived::Pitch => "pitch",
            Derived::Yaw => "yaw",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FeatureKey {
    pub topic: String,
    pub field: String,
    pub derived: Option<Derived>,
}

impl FeatureKey {
    pub fn raw(topic: impl Into<String>, field: impl Into<String>) -> Self {
        FeatureKey {
            topic: topic.into(),
            field: field.into(),
            derived: None,
        }
    }

    pub fn euler(topic: impl Into<String>, quaternion_field: impl Into<String>, angle: Derived) -> Self {
        FeatureKey {
            topic: topic.into(),
            field: quaternion_field.into(),
            derived: Some(angle),
        }
    }

    /// Raw columns this key reads.
    pub fn source_columns(&self) -> Vec<String> {
        match self.derived {
            None => vec![self.field.clone()],
            Some(_) => (0..4).map(|i| format!("{}[{i}]", self.field)).collect(),
        }
    }
}

impl fmt::Display for FeatureKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.topic, self.field)?;
        if let Some(d) = self.derived {
            write!(f, "@{}", d.name())?;
        }
        Ok(())
    }
}

impl FromStr for FeatureKey {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || FeatureError::BadKey(s.to_string());
        let (body, derived) = match s.rsplit_once('@') {
            Some((body, tag)) => {
                let d = match tag {
                    "roll" => Derived::Roll,
                    "pitch" => Derived::Pitch,
                    "yaw" => Derived::Yaw,
                    _ => return Err(bad()),
                };
                (body, Some(d))
            }
            None => (s, None),
        };
        let (topic, field) = body.split_once('.').ok_or_else(bad)?;
        if topic.is_empty() || field.is_empty() {
            return Err(bad());
        }
        Ok(FeatureKey {
            topic: topic.to_string(),
            field: field.to_string(),
            derived,
        })
    }
}

impl TryFrom<String> for FeatureKey {
    type Error = FeatureError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<FeatureKey> for String {
    fn from(k: FeatureKey) -> String {
        k.to_string()
    }
}

/// Fraction of corpus logs containing each raw `(topic, field)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageTable {
    pub corpus_size: usize,
    pub counts: BTreeMap<FeatureKey, usize>,
}

impl CoverageTable {
    pub fn fraction(&self, key: &FeatureKey) -> f64 {
        let count = self.counts.get(key).copied().unwrap_or(0);
        count as f64 / self.corpus_size as f64
    }

    pub fn fractions(&self) -> impl Iterator<Item = (&FeatureKey, f64)> {
        self.counts
            .iter()
            .map(move |(k, &c)| (k, c as f64 / self.corpus_size as f64))
    }

    /// `feature,fraction` CSV, one row per key in key order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("feature,fraction\n");
        for (key, frac) in self.fractions() {
            out.push_str(&format!("{key},{frac}\n"));
        }
        out
    }
}

fn keys_in(log: &FlightLog) -> BTreeSet<FeatureKey> {
    log.topics
        .values()
        .flat_map(|s| s.columns.keys().map(move |f| FeatureKey::raw(s.topic.clone(), f.clone())))
        .collect()
}

/// Counts, for every raw feature seen in any log (any topic instance), how
/// many logs contain it.
pub fn compute_coverage(corpus: &[FlightLog]) -> Result<CoverageTable, FeatureError> {
    if corpus.is_empty() {
        return Err(FeatureError::EmptyCorpus);
    }
    let counts = corpus
        .par_iter()
        .map(|log| {
            keys_in(log)
                .into_iter()
                .map(|k| (k, 1usize))
                .collect::<HashMap<_, _>>()
        })
        .reduce(HashMap::new, |mut a, b| {
            for (k, c) in b {
                *a.entry(k).or_insert(0) += c;
            }
            a
        });
    Ok(CoverageTable {
        corpus_size: corpus.len(),
        counts: counts.into_iter().collect(),
    })
}

/// Keys whose coverage is at least `threshold`, in lexicographic order.
pub fn prune_by_coverage(table: &CoverageTable, threshold: f64) -> Result<Vec<FeatureKey>, FeatureError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(FeatureError::InvalidThreshold(threshold));
    }
    Ok(table
        .fractions()
        .filter(|&(_, f)| f >= threshold)
        .map(|(k, _)| k.clone())
        .collect())
}

/// Ordered feature list defining the columns of every instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSubset {
    pub name: String,
    pub keys: Vec<FeatureKey>,
    /// How many of `keys` were drawn at random on top of the base set.
    pub n_random: usize,
}

impl FeatureSubset {
    pub fn new(name: impl Into<String>, keys: Vec<FeatureKey>) -> Self {
        FeatureSubset {
            name: name.into(),
            keys,
            n_random: 0,
        }
    }

    /// Local x/y/z position, roll/pitch/yaw, throttle, altitude and battery
    /// temperature mapped to PX4 topics.
    pub fn baseline() -> Self {
        let keys = vec![
            FeatureKey::raw("vehicle_local_position", "x"),
            FeatureKey::raw("vehicle_local_position", "y"),
            FeatureKey::raw("vehicle_local_position", "z"),
            FeatureKey::euler("vehicle_attitude", "q", Derived::Roll),
            FeatureKey::euler("vehicle_attitude", "q", Derived::Pitch),
            FeatureKey::euler("vehicle_attitude", "q", Derived::Yaw),
            FeatureKey::raw("actuator_controls_0", "control[3]"),
            FeatureKey::raw("vehicle_global_position", "alt"),
            FeatureKey::raw("battery_status", "temperature"),
        ];
        FeatureSubset::new("baseline", keys)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn column_names(&self) -> Vec<String> {
        self.keys.iter().map(|k| k.to_string()).collect()
    }
}

/// Human-editable subset declaration (a block of the run config).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetDeclaration {
    pub name: String,
    pub base: Vec<FeatureKey>,
    #[serde(default)]
    pub exclusions: Vec<FeatureKey>,
    #[serde(default)]
    pub n_random: usize,
    #[serde(default = "one")]
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_threshold")]
    pub coverage_threshold: f64,
}

fn one() -> usize {
    1
}

fn default_threshold() -> f64 {
    0.6
}

impl Default for SubsetDeclaration {
    fn default() -> Self {
        let base = FeatureSubset::baseline();
        SubsetDeclaration {
            name: base.name,
            base: base.keys,
            exclusions: Vec::new(),
            n_random: 0,
            k: 1,
            seed: 0,
            coverage_threshold: default_threshold(),
        }
    }
}

impl SubsetDeclaration {
    pub fn base_subset(&self) -> FeatureSubset {
        FeatureSubset::new(self.name.clone(), self.base.clone())
    }
}

/// Draws `k` subsets, each the base set plus `n` distinct keys sampled
/// without replacement from `pruned` minus the base and the exclusions.
pub fn random_subsets(
    pruned: &[FeatureKey],
    base: &FeatureSubset,
    n: usize,
    k: usize,
    exclusions: &[FeatureKey],
    seed: u64,
) -> Result<Vec<FeatureSubset>, FeatureError> {
    let pool: Vec<&FeatureKey> = pruned
        .iter()
        .filter(|key| !base.keys.contains(key) && !exclusions.contains(key))
        .collect();
    if n > pool.len() {
        return Err(FeatureError::InsufficientFeatures {
            requested: n,
            available: pool.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..k)
        .map(|i| {
            let mut picked = index::sample(&mut rng, pool.len(), n).into_vec();
            picked.sort_unstable();
            let mut keys = base.keys.clone();
            keys.extend(picked.into_iter().map(|j| pool[j].clone()));
            FeatureSubset {
                name: format!("{}+{n}#{i}", base.name),
                keys,
                n_random: n,
            }
        })
        .collect())
}

/// Roll, pitch and yaw (aerospace Z-Y-X order) of a quaternion given as
/// `(w, x, y, z)`. The input is renormalised; pitch saturates at ±π/2.
pub fn quaternion_to_euler(q: [f64; 4]) -> Result<(f64, f64, f64), FeatureError> {
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() || norm < 1e-12 {
        return Err(FeatureError::ZeroQuaternion);
    }
    let [w, x, y, z] = q.map(|v| v / norm);
    let roll = (2.0 * (w * x + y * z)).atan2(1.0 - 2.0 * (x * x + y * y));
    let pitch = (2.0 * (w * y - z * x)).clamp(-1.0, 1.0).asin();
    let yaw = (2.0 * (w * z + x * y)).atan2(1.0 - 2.0 * (y * y + z * z));
    Ok((roll, pitch, yaw))
}

/// One feature's samples, on its topic's own time axis.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub timestamps: Vec<u64>,
    pub values: Vec<f64>,
}

impl RawSeries {
    pub fn new(timestamps: Vec<u64>, values: Vec<f64>) -> Self {
        debug_assert_eq!(timestamps.len(), values.len());
        RawSeries { timestamps, values }
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }
}

/// Instance 0 when it carries every needed column, otherwise the lowest
/// instance that does.
fn locate<'a>(log: &'a FlightLog, key: &FeatureKey) -> Option<&'a TopicSeries> {
    let needed = key.source_columns();
    log.topics
        .values()
        .filter(|s| s.topic == key.topic)
        .find(|s| needed.iter().all(|c| s.columns.contains_key(c)))
}

fn extract(series: &TopicSeries, key: &FeatureKey) -> RawSeries {
    match key.derived {
        None => RawSeries::new(series.timestamps.clone(), series.columns[&key.field].clone()),
        Some(angle) => {
            let cols: Vec<&Vec<f64>> = key
                .source_columns()
                .iter()
                .map(|c| &series.columns[c])
                .collect();
            let mut ts = Vec::with_capacity(series.len());
            let mut vals = Vec::with_capacity(series.len());
            for (i, &t) in series.timestamps.iter().enumerate() {
                let q = [cols[0][i], cols[1][i], cols[2][i], cols[3][i]];
                // uninitialised attitude samples (all zero) are dropped
                if let Ok((roll, pitch, yaw)) = quaternion_to_euler(q) {
                    ts.push(t);
                    vals.push(match angle {
                        Derived::Roll => roll,
                        Derived::Pitch => pitch,
                        Derived::Yaw => yaw,
                    });
                }
            }
            RawSeries::new(ts, vals)
        }
    }
}

/// One series per key in subset order, or `None` if the log lacks any key.
pub fn assemble_features(log: &FlightLog, subset: &FeatureSubset) -> Option<Vec<RawSeries>> {
    subset
        .keys
        .iter()
        .map(|key| {
            let series = locate(log, key)?;
            let raw = extract(series, key);
            (!raw.is_empty()).then_some(raw)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ulog::{TopicSeries, VehicleType};
    use std::f64::consts::FRAC_PI_2;

    fn log_with(fields: &[(&str, &str)]) -> FlightLog {
        let mut log = FlightLog::new("t", VehicleType::Quadrotor);
        for (topic, field) in fields {
            let key = crate::ulog::TopicKey::new(*topic, 0);
            let series = log
                .topics
                .entry(key)
                .or_insert_with(|| TopicSeries::new(*topic, 0, vec![0, 1_000_000]));
            series.columns.insert(field.to_string(), vec![1.0, 2.0]);
        }
        log
    }

    #[test]
    fn key_text_round_trip() {
        for text in ["vehicle_local_position.x", "vehicle_attitude.q@yaw", "a.b.c[2]"] {
            let key: FeatureKey = text.parse().unwrap();
            assert_eq!(key.to_string(), text);
        }
        assert!("nodot".parse::<FeatureKey>().is_err());
        assert!("a.b@sideways".parse::<FeatureKey>().is_err());
    }

    #[test]
    fn coverage_simple_fractions() {
        let both = vec![log_with(&[("a", "x")]), log_with(&[("a", "x")])];
        let t = compute_coverage(&both).unwrap();
        assert_eq!(t.fraction(&FeatureKey::raw("a", "x")), 1.0);

        let logs = vec![
            log_with(&[("a", "x")]),
            log_with(&[("b", "y")]),
            log_with(&[("b", "y")]),
            log_with(&[("b", "y")]),
        ];
        let t = compute_coverage(&logs).unwrap();
        assert_eq!(t.fraction(&FeatureKey::raw("a", "x")), 0.25);
        assert_eq!(compute_coverage(&[]), Err(FeatureError::EmptyCorpus));
    }

    #[test]
    fn prune_boundaries() {
        let mut counts = BTreeMap::new();
        counts.insert(FeatureKey::raw("t", "a"), 61);
        counts.insert(FeatureKey::raw("t", "b"), 59);
        counts.insert(FeatureKey::raw("t", "c"), 60);
        counts.insert(FeatureKey::raw("t", "d"), 100);
        let table = CoverageTable {
            corpus_size: 100,
            counts,
        };
        let kept = prune_by_coverage(&table, 0.6).unwrap();
        let names: Vec<String> = kept.iter().map(|k| k.to_string()).collect();
        assert_eq!(names, vec!["t.a", "t.c", "t.d"]);
        let universal = prune_by_coverage(&table, 1.0).unwrap();
        assert_eq!(universal, vec![FeatureKey::raw("t", "d")]);
        assert!(prune_by_coverage(&table, 0.0).is_err());
        assert!(prune_by_coverage(&table, 1.5).is_err());
    }

    #[test]
    fn subsets_edge_cases() {
        let base = FeatureSubset::new("b", vec![FeatureKey::raw("t", "base")]);
        let pool: Vec<FeatureKey> = (0..5).map(|i| FeatureKey::raw("t", format!("f{i}"))).collect();
        let mut pruned = pool.clone();
        pruned.push(FeatureKey::raw("t", "base"));

        let copies = random_subsets(&pruned, &base, 0, 3, &[], 1).unwrap();
        assert_eq!(copies.len(), 3);
        assert!(copies.iter().all(|s| s.keys == base.keys));

        let all = random_subsets(&pruned, &base, 5, 1, &[], 1).unwrap();
        let drawn: BTreeSet<_> = all[0].keys[1..].iter().cloned().collect();
        assert_eq!(drawn, pool.iter().cloned().collect());

        let excl = [FeatureKey::raw("t", "f0")];
        assert_eq!(
            random_subsets(&pruned, &base, 5, 1, &excl, 1),
            Err(FeatureError::InsufficientFeatures {
                requested: 5,
                available: 4
            })
        );
        let a = random_subsets(&pruned, &base, 2, 4, &excl, 9).unwrap();
        let b = random_subsets(&pruned, &base, 2, 4, &excl, 9).unwrap();
        assert_eq!(a, b);
        for s in &a {
            assert!(!s.keys.contains(&excl[0]));
            assert_eq!(s.keys.len(), 3);
        }
    }

    #[test]
    fn euler_identity_and_yaw() {
        assert_eq!(quaternion_to_euler([1.0, 0.0, 0.0, 0.0]).unwrap(), (0.0, 0.0, 0.0));
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let (r, p, y) = quaternion_to_euler([h, 0.0, 0.0, h]).unwrap();
        assert!(r.abs() < 1e-15 && p.abs() < 1e-15);
        assert!((y - FRAC_PI_2).abs() < 1e-15);
        assert_eq!(quaternion_to_euler([0.0; 4]), Err(FeatureError::ZeroQuaternion));
    }

    #[test]
    fn euler_gimbal_lock_saturates() {
        // 90 degree pitch, slightly over-normalised component
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let (_, p, _) = quaternion_to_euler([h, 0.0, h * (1.0 + 1e-12), 0.0]).unwrap();
        assert!((p - FRAC_PI_2).abs() < 1e-6);
        assert!(p <= FRAC_PI_2);
    }

    #[test]
    fn assemble_missing_and_order() {
        let subset = FeatureSubset::baseline();
        let mut fields = vec![
            ("vehicle_local_position", "x"),
            ("vehicle_local_position", "y"),
            ("vehicle_local_position", "z"),
            ("vehicle_attitude", "q[0]"),
            ("vehicle_attitude", "q[1]"),
            ("vehicle_attitude", "q[2]"),
            ("vehicle_attitude", "q[3]"),
            ("actuator_controls_0", "control[3]"),
            ("vehicle_global_position", "alt"),
        ];
        assert!(assemble_features(&log_with(&fields), &subset).is_none());
        fields.push(("battery_status", "temperature"));
        let got = assemble_features(&log_with(&fields), &subset).unwrap();
        assert_eq!(got.len(), 9);
    }

    #[test]
    fn assemble_falls_back_to_other_instance() {
        let mut log = FlightLog::new("t", VehicleType::Quadrotor);
        let mut s = TopicSeries::new("battery_status", 1, vec![5]);
        s.columns.insert("temperature".into(), vec![30.0]);
        log.insert_topic(s);
        let subset = FeatureSubset::new("b", vec![FeatureKey::raw("battery_status", "temperature")]);
        let got = assemble_features(&log, &subset).unwrap();
        assert_eq!(got[0].values, vec![30.0]);
    }
}
