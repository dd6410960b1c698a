//! Labelled fixed-length datasets built from a corpus.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::features::{assemble_features, FeatureSubset};
use crate::resample::{resample, ResampleError, SampledInstance, SamplingConfig};
use crate::ulog::{FlightLog, VehicleType};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub feature_names: Vec<String>,
    pub sampling: SamplingConfig,
    pub instances: Vec<SampledInstance>,
}

/// Per-class instance counts in model class order
/// (quadrotor, fixed-wing, hexarotor).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts(pub [usize; 3]);

impl ClassCounts {
    pub fn of<'a>(instances: impl IntoIterator<Item = &'a SampledInstance>) -> Self {
        let mut counts = [0usize; 3];
        for inst in instances {
            if let Some(c) = inst.label.class_index() {
                counts[c] += 1;
            }
        }
        ClassCounts(counts)
    }

    pub fn get(&self, label: VehicleType) -> usize {
        label.class_index().map(|c| self.0[c]).unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }
}

impl Dataset {
    pub fn new(feature_names: Vec<String>, sampling: SamplingConfig) -> Self {
        Dataset {
            feature_names,
            sampling,
            instances: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn labels(&self) -> Vec<VehicleType> {
        self.instances.iter().map(|i| i.label).collect()
    }

    pub fn class_counts(&self) -> ClassCounts {
        ClassCounts::of(&self.instances)
    }

    /// Same metadata, different instances.
    pub fn with_instances(&self, instances: Vec<SampledInstance>) -> Dataset {
        Dataset {
            feature_names: self.feature_names.clone(),
            sampling: self.sampling.clone(),
            instances,
        }
    }
}

/// A flight left out of a dataset, with the reason.
#[derive(Debug, Clone, PartialEq)]
pub struct Exclusion {
    pub source_id: String,
    pub reason: String,
}

/// Assembles and resamples every eligible flight. Flights of type `Other`,
/// flights lacking a subset feature and single-instant flights are
/// excluded. Output order follows the corpus.
pub fn build_dataset(
    corpus: &[FlightLog],
    subset: &FeatureSubset,
    sampling: &SamplingConfig,
) -> Result<(Dataset, Vec<Exclusion>), ResampleError> {
    sampling.validate()?;
    let results: Vec<Result<SampledInstance, Exclusion>> = corpus
        .par_iter()
        .map(|log| {
            let exclude = |reason: &str| Exclusion {
                source_id: log.source_id.clone(),
                reason: reason.to_string(),
            };
            if log.vehicle_type == VehicleType::Other {
                return Err(exclude("vehicle type outside the three classes"));
            }
            let series = assemble_features(log, subset).ok_or_else(|| exclude("missing feature"))?;
            match resample(&series, sampling) {
                Ok(binned) => Ok(SampledInstance::from_binned(binned, log.vehicle_type, &log.source_id)),
                Err(e) => Err(exclude(&e.to_string())),
            }
        })
        .collect();

    let mut dataset = Dataset::new(subset.column_names(), sampling.clone());
    let mut excluded = Vec::new();
    for r in results {
        match r {
            Ok(inst) => dataset.instances.push(inst),
            Err(e) => {
                log::debug!("excluded {}: {}", e.source_id, e.reason);
                excluded.push(e);
            }
        }
    }
    Ok((dataset, excluded))
}
