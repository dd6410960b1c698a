//! Single-file binary cache for parsed corpora and sampled datasets.
//!
//! ```text
//! file    := magic "UAVTCACH" | version u32 | kind u8 | payload_len u64
//!            | payload | crc32(payload) u32
//! kind    := 1 (flight logs) | 2 (sampled dataset)
//! ```
//!
//! All integers are little-endian, floats are IEEE-754 f64 bit patterns and
//! strings are a u32 byte length followed by UTF-8. The payload layouts are
//! described in `docs/cache-format.md`.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use crate::bytes::{put_f64, put_str, put_u32, put_u64, Cursor};
use crate::dataset::Dataset;
use crate::resample::{SampledInstance, SamplingConfig, SamplingMethod};
use crate::ulog::{FlightLog, MetaValue, TopicSeries, VehicleType};

pub const CACHE_MAGIC: [u8; 8] = *b"UAVTCACH";
pub const CACHE_VERSION: u32 = 1;

const KIND_FLIGHTS: u8 = 1;
const KIND_DATASET: u8 = 2;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a cache file")]
    BadMagic,
    #[error("cache format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("cache checksum mismatch")]
    ChecksumFailure,
    #[error("cache holds {found}, expected {expected}")]
    WrongKind {
        found: &'static str,
        expected: &'static str,
    },
    #[error("corrupt cache payload: {0}")]
    Corrupt(String),
    #[error("nothing to write")]
    Empty,
}

fn kind_name(kind: u8) -> &'static str {
    match kind {
        KIND_FLIGHTS => "flight logs",
        KIND_DATASET => "a sampled dataset",
        _ => "an unknown payload",
    }
}

fn frame(kind: u8, payload: Vec<u8>) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + 25);
    out.extend_from_slice(&CACHE_MAGIC);
    put_u32(&mut out, CACHE_VERSION);
    out.push(kind);
    put_u64(&mut out, payload.len() as u64);
    let crc = crc32fast::hash(&payload);
    out.extend_from_slice(&payload);
    put_u32(&mut out, crc);
    out
}

fn unframe(bytes: &[u8], expected: u8) -> Result<&[u8], CacheError> {
    let mut cur = Cursor::new(bytes);
    if cur.take(8) != Some(&CACHE_MAGIC[..]) {
        return Err(CacheError::BadMagic);
    }
    let version = cur.u32().ok_or(CacheError::BadMagic)?;
    if version != CACHE_VERSION {
        return Err(CacheError::VersionMismatch {
            found: version,
            expected: CACHE_VERSION,
        });
    }
    let kind = cur.u8().ok_or_else(|| corrupt("missing kind"))?;
    let len = cur.u64().ok_or_else(|| corrupt("missing length"))?;
    if cur.remaining() as u64 != len.saturating_add(4) {
        return Err(corrupt("payload length does not match file size"));
    }
    let payload = cur.take(len as usize).ok_or_else(|| corrupt("short payload"))?;
    let crc = cur.u32().ok_or_else(|| corrupt("missing checksum"))?;
    if crc32fast::hash(payload) != crc {
        return Err(CacheError::ChecksumFailure);
    }
    if kind != expected {
        return Err(CacheError::WrongKind {
            found: kind_name(kind),
            expected: kind_name(expected),
        });
    }
    Ok(payload)
}

fn corrupt(what: &str) -> CacheError {
    CacheError::Corrupt(what.to_string())
}

fn write_atomically(path: &Path, bytes: &[u8]) -> Result<(), CacheError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn encode_flights(logs: &[FlightLog]) -> Vec<u8> {
    let mut p = Vec::new();
    put_u32(&mut p, logs.len() as u32);
    for log in logs {
        put_str(&mut p, &log.source_id);
        p.push(log.vehicle_type.code());
        put_f64(&mut p, log.duration_s);
        put_u32(&mut p, log.metadata.len() as u32);
        for (key, value) in &log.metadata {
            put_str(&mut p, key);
            match value {
                MetaValue::Number(v) => {
                    p.push(0);
                    put_f64(&mut p, *v);
                }
                MetaValue::Text(s) => {
                    p.push(1);
                    put_str(&mut p, s);
                }
            }
        }
        put_u32(&mut p, log.topics.len() as u32);
        for series in log.topics.values() {
            put_str(&mut p, &series.topic);
            p.push(series.instance);
            p.push(series.resorted as u8);
            put_u32(&mut p, series.timestamps.len() as u32);
            for &t in &series.timestamps {
                put_u64(&mut p, t);
            }
            put_u32(&mut p, series.columns.len() as u32);
            for (name, values) in &series.columns {
                put_str(&mut p, name);
                for &v in values {
                    put_f64(&mut p, v);
                }
            }
        }
    }
    frame(KIND_FLIGHTS, p)
}

pub fn decode_flights(bytes: &[u8]) -> Result<Vec<FlightLog>, CacheError> {
    let payload = unframe(bytes, KIND_FLIGHTS)?;
    let mut c = Cursor::new(payload);
    let short = || corrupt("truncated flight record");
    let n_logs = c.u32().ok_or_else(short)?;
    let mut logs = Vec::new();
    for _ in 0..n_logs {
        let source = c.string().ok_or_else(short)?;
        let vehicle = VehicleType::from_code(c.u8().ok_or_else(short)?)
            .ok_or_else(|| corrupt("unknown vehicle code"))?;
        let duration = c.f64().ok_or_else(short)?;
        let mut log = FlightLog::new(source, vehicle);
        log.duration_s = duration;
        let n_meta = c.u32().ok_or_else(short)?;
        for _ in 0..n_meta {
            let key = c.string().ok_or_else(short)?;
            let value = match c.u8().ok_or_else(short)? {
                0 => MetaValue::Number(c.f64().ok_or_else(short)?),
                1 => MetaValue::Text(c.string().ok_or_else(short)?),
                _ => return Err(corrupt("unknown metadata tag")),
            };
            log.metadata.insert(key, value);
        }
        let n_topics = c.u32().ok_or_else(short)?;
        for _ in 0..n_topics {
            let topic = c.string().ok_or_else(short)?;
            let instance = c.u8().ok_or_else(short)?;
            let resorted = c.u8().ok_or_else(short)? != 0;
            let n = c.u32().ok_or_else(short)? as usize;
            if c.remaining() < n.saturating_mul(8) {
                return Err(short());
            }
            let timestamps: Vec<u64> = (0..n).map(|_| c.u64().unwrap()).collect();
            let n_cols = c.u32().ok_or_else(short)?;
            let mut columns = BTreeMap::new();
            for _ in 0..n_cols {
                let name = c.string().ok_or_else(short)?;
                if c.remaining() < n * 8 {
                    return Err(short());
                }
                let values: Vec<f64> = (0..n).map(|_| c.f64().unwrap()).collect();
                columns.insert(name, values);
            }
            let mut series = TopicSeries::new(topic, instance, timestamps);
            series.columns = columns;
            series.resorted = resorted;
            log.topics.insert(series.key(), series);
        }
        logs.push(log);
    }
    if c.remaining() != 0 {
        return Err(corrupt("trailing bytes after last flight"));
    }
    Ok(logs)
}

/// Writes `logs` to `path` (atomically, via a temporary sibling file).
pub fn write_cache(logs: &[FlightLog], path: &Path) -> Result<(), CacheError> {
    if logs.is_empty() {
        return Err(CacheError::Empty);
    }
    write_atomically(path, &encode_flights(logs))
}

pub fn read_cache(path: &Path) -> Result<Vec<FlightLog>, CacheError> {
    decode_flights(&std::fs::read(path)?)
}

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let mut p = Vec::new();
    let s = &ds.sampling;
    p.push(match s.method {
        SamplingMethod::Average => 0,
        SamplingMethod::FixedWindow => 1,
    });
    put_u32(&mut p, s.n_intervals as u32);
    put_f64(&mut p, s.window_s.unwrap_or(f64::NAN));
    p.push(s.standardize as u8);
    put_u32(&mut p, ds.feature_names.len() as u32);
    for name in &ds.feature_names {
        put_str(&mut p, name);
    }
    put_u32(&mut p, ds.instances.len() as u32);
    for inst in &ds.instances {
        put_str(&mut p, &inst.source_id);
        p.push(inst.label.code());
        p.push(inst.synthetic as u8);
        for &v in inst.values.iter() {
            put_f64(&mut p, v);
        }
        for &o in inst.observed.iter() {
            p.push(o as u8);
        }
    }
    frame(KIND_DATASET, p)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset, CacheError> {
    let payload = unframe(bytes, KIND_DATASET)?;
    let mut c = Cursor::new(payload);
    let short = || corrupt("truncated dataset record");
    let method = match c.u8().ok_or_else(short)? {
        0 => SamplingMethod::Average,
        1 => SamplingMethod::FixedWindow,
        _ => return Err(corrupt("unknown sampling method")),
    };
    let n_intervals = c.u32().ok_or_else(short)? as usize;
    let window = c.f64().ok_or_else(short)?;
    let standardize = c.u8().ok_or_else(short)? != 0;
    let sampling = SamplingConfig {
        method,
        n_intervals,
        window_s: (!window.is_nan()).then_some(window),
        standardize,
    };
    let n_features = c.u32().ok_or_else(short)? as usize;
    let mut names = Vec::new();
    for _ in 0..n_features {
        names.push(c.string().ok_or_else(short)?);
    }
    let cells = n_intervals
        .checked_mul(n_features)
        .ok_or_else(|| corrupt("matrix size overflow"))?;
    let n_inst = c.u32().ok_or_else(short)?;
    let mut ds = Dataset::new(names, sampling);
    for _ in 0..n_inst {
        let source = c.string().ok_or_else(short)?;
        let label = VehicleType::from_code(c.u8().ok_or_else(short)?)
            .ok_or_else(|| corrupt("unknown vehicle code"))?;
        let synthetic = c.u8().ok_or_else(short)? != 0;
        if c.remaining() < cells.saturating_mul(9) {
            return Err(short());
        }
        let values: Vec<f64> = (0..cells).map(|_| c.f64().unwrap()).collect();
        let observed: Vec<bool> = (0..cells).map(|_| c.u8().unwrap() != 0).collect();
        let shape = (n_intervals, n_features);
        ds.instances.push(SampledInstance {
            values: Array2::from_shape_vec(shape, values).map_err(|e| corrupt(&e.to_string()))?,
            observed: Array2::from_shape_vec(shape, observed).map_err(|e| corrupt(&e.to_string()))?,
            label,
            source_id: source,
            synthetic,
        });
    }
    if c.remaining() != 0 {
        return Err(corrupt("trailing bytes after last instance"));
    }
    Ok(ds)
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<(), CacheError> {
    write_atomically(path, &encode_dataset(ds))
}

pub fn read_dataset(path: &Path) -> Result<Dataset, CacheError> {
    decode_dataset(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ulog::TopicKey;

    fn sample_log(id: &str) -> FlightLog {
        let mut log = FlightLog::new(id, VehicleType::FixedWing);
        log.metadata.insert("MAV_TYPE".into(), MetaValue::Number(1.0));
        log.metadata.insert("sys_name".into(), MetaValue::Text("PX4".into()));
        let mut s = TopicSeries::new("vehicle_local_position", 0, vec![0, 200_000, 400_000]);
        s.columns.insert("x".into(), vec![0.1, -0.0, f64::MIN_POSITIVE]);
        s.columns.insert("y".into(), vec![1e300, 2.5, 3.25]);
        log.insert_topic(s);
        log
    }

    #[test]
    fn flights_round_trip() {
        let logs = vec![sample_log("a"), sample_log("b"), FlightLog::new("empty", VehicleType::Quadrotor)];
        let back = decode_flights(&encode_flights(&logs)).unwrap();
        assert_eq!(back, logs);
        assert!(back[2].topics.is_empty());
        let x = &back[0].topics[&TopicKey::new("vehicle_local_position", 0)].columns["x"];
        assert!(x[1].is_sign_negative());
    }

    #[test]
    fn flipped_checksum_byte_detected() {
        let mut bytes = encode_flights(&[sample_log("a")]);
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        assert!(matches!(decode_flights(&bytes), Err(CacheError::ChecksumFailure)));
    }

    #[test]
    fn flipped_payload_byte_detected() {
        let mut bytes = encode_flights(&[sample_log("a")]);
        bytes[40] ^= 0x80;
        assert!(matches!(decode_flights(&bytes), Err(CacheError::ChecksumFailure)));
    }

    #[test]
    fn version_and_kind_checked() {
        let mut bytes = encode_flights(&[sample_log("a")]);
        bytes[8] = 9;
        assert!(matches!(
            decode_flights(&bytes),
            Err(CacheError::VersionMismatch { found: 9, .. })
        ));
        let bytes = encode_flights(&[sample_log("a")]);
        assert!(matches!(decode_dataset(&bytes), Err(CacheError::WrongKind { .. })));
        assert!(matches!(decode_flights(b"nonsense"), Err(CacheError::BadMagic)));
    }

    #[test]
    fn empty_write_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            write_cache(&[], &dir.path().join("x.bin")),
            Err(CacheError::Empty)
        ));
    }

    #[test]
    fn dataset_round_trip_keeps_sampling_config() {
        let mut ds = Dataset::new(vec!["a.x".into(), "b.y".into()], SamplingConfig::fixed_window(3, 2.5));
        ds.instances.push(SampledInstance {
            values: Array2::from_shape_vec((3, 2), vec![1.0, 2.0, 3.0, 4.0, 5.0, -6.0]).unwrap(),
            observed: Array2::from_shape_vec((3, 2), vec![true, false, true, true, false, true]).unwrap(),
            label: VehicleType::Hexarotor,
            source_id: "f1".into(),
            synthetic: true,
        });
        let back = decode_dataset(&encode_dataset(&ds)).unwrap();
        assert_eq!(back, ds);
    }
}
