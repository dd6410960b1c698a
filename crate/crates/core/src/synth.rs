//! Synthetic labelled flights and a ULog writer.
//!
//! Multirotors fly straight legs between waypoints, stop, hover and turn
//! sharply. Fixed-wing aircraft keep a minimum airspeed and turn with a
//! bounded rate, banking into the turn. Hexarotors share the multirotor
//! model with slightly higher throttle and calmer attitude noise, drawn per
//! flight so the two overlap.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bytes::put_u64;
use crate::ulog::{FlightLog, MetaValue, TopicSeries, VehicleType, ULOG_MAGIC};

/// Mean multirotor flight length in seconds.
pub const MULTIROTOR_MEAN_DURATION_S: f64 = 5.56 * 60.0;
/// Mean fixed-wing flight length in seconds.
pub const FIXED_WING_MEAN_DURATION_S: f64 = 7.48 * 60.0;

const GRAVITY: f64 = 9.81;
/// Internal simulation step.
const SIM_DT: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic flight spec: {0}")]
    InvalidSpec(String),
    #[error("log has no topics")]
    EmptyLog,
    #[error("topic {0} has no samples")]
    EmptyTopic(String),
    #[error("cannot encode field `{0}`")]
    UnsupportedFieldKind(String),
    #[error("topic {topic} message of {size} bytes exceeds the format limit")]
    MessageTooLarge { topic: String, size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub vehicle_type: VehicleType,
    /// Drawn around the class mean when absent.
    pub duration_s: Option<f64>,
    pub sample_rate_hz: f64,
    pub waypoints: usize,
    /// Standard deviation of position noise in metres.
    pub position_noise: f64,
    /// Fixed-wing turn-rate bound in degrees per second.
    pub max_turn_rate_deg_s: f64,
    /// Fixed-wing airspeed floor in m/s.
    pub min_airspeed: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            vehicle_type: VehicleType::Quadrotor,
            duration_s: None,
            sample_rate_hz: 5.0,
            waypoints: 6,
            position_noise: 0.05,
            max_turn_rate_deg_s: 15.0,
            min_airspeed: 11.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn new(vehicle_type: VehicleType, seed: u64) -> Self {
        SynthSpec {
            vehicle_type,
            seed,
            ..SynthSpec::default()
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.into()));
        if self.vehicle_type == VehicleType::Other {
            return bad("vehicle type must be one of the three classes");
        }
        if matches!(self.duration_s, Some(d) if !(d > 0.0 && d.is_finite())) {
            return bad("duration must be positive");
        }
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz <= 1000.0) {
            return bad("sample rate must lie in (0, 1000] Hz");
        }
        if self.waypoints == 0 {
            return bad("at least one waypoint is required");
        }
        if !(self.position_noise >= 0.0) || !(self.max_turn_rate_deg_s > 0.0) || !(self.min_airspeed > 0.0) {
            return bad("noise must be non-negative, turn rate and airspeed positive");
        }
        Ok(())
    }
}

/// Kinematic state on the simulation grid.
#[derive(Debug, Clone, Default)]
struct Track {
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    roll: Vec<f64>,
    pitch: Vec<f64>,
    yaw: Vec<f64>,
    throttle: Vec<f64>,
}

impl Track {
    fn push(&mut self, s: [f64; 7]) {
        self.x.push(s[0]);
        self.y.push(s[1]);
        self.z.push(s[2]);
        self.roll.push(s[3]);
        self.pitch.push(s[4]);
        self.yaw.push(s[5]);
        self.throttle.push(s[6]);
    }

    fn len(&self) -> usize {
        self.x.len()
    }
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = (a + PI) % (2.0 * PI);
    if a < 0.0 {
        a += 2.0 * PI;
    }
    a - PI
}

/// Per-flight multirotor character.
struct RotorStyle {
    hover_throttle: f64,
    attitude_noise: f64,
}

fn multirotor_track(spec: &SynthSpec, duration: f64, rng: &mut ChaCha8Rng) -> Track {
    let style = if spec.vehicle_type == VehicleType::Hexarotor {
        RotorStyle {
            hover_throttle: Normal::new(0.53, 0.05).unwrap().sample(rng),
            attitude_noise: rng.random_range(0.008..0.022),
        }
    } else {
        RotorStyle {
            hover_throttle: Normal::new(0.50, 0.05).unwrap().sample(rng),
            attitude_noise: rng.random_range(0.010..0.026),
        }
    };
    let radius = rng.random_range(20.0..120.0);
    let waypoints: Vec<[f64; 3]> = (0..spec.waypoints)
        .map(|_| {
            [
                rng.random_range(-radius..radius),
                rng.random_range(-radius..radius),
                -rng.random_range(8.0..40.0),
            ]
        })
        .collect();
    let cruise: f64 = rng.random_range(3.0..9.0);
    let accel = rng.random_range(1.0..3.0);
    let n_steps = (duration / SIM_DT).ceil() as usize + 1;
    let attitude = Normal::new(0.0, style.attitude_noise).unwrap();
    let throttle_noise = Normal::new(0.0, 0.02).unwrap();

    let mut track = Track::default();
    let mut pos = waypoints[0];
    let mut yaw = rng.random_range(-PI..PI);
    let mut target = if waypoints.len() > 1 { 1 } else { 0 };
    let mut dwell = rng.random_range(2.0..10.0);
    let mut speed: f64 = 0.0;
    let mut prev_vz = 0.0;
    for _ in 0..n_steps {
        let goal = waypoints[target];
        let d = [goal[0] - pos[0], goal[1] - pos[1], goal[2] - pos[2]];
        let dist = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let mut accel_fwd = 0.0;
        let (mut vx, mut vy, mut vz) = (0.0, 0.0, 0.0);
        if dist < 0.3 || waypoints.len() == 1 {
            // hovering at a waypoint
            speed = 0.0;
            dwell -= SIM_DT;
            if dwell <= 0.0 && waypoints.len() > 1 {
                target = (target + 1) % waypoints.len();
                dwell = rng.random_range(2.0..10.0);
            }
        } else {
            // face the leg before flying it
            let heading = d[1].atan2(d[0]);
            let turn = wrap_angle(heading - yaw);
            let max_turn = 90f64.to_radians() * SIM_DT;
            if turn.abs() > 0.05 && speed < 0.5 {
                yaw = wrap_angle(yaw + turn.clamp(-max_turn, max_turn));
            } else {
                yaw = heading;
                let braking = (2.0 * accel * dist).sqrt();
                let wanted = cruise.min(braking);
                let new_speed = if wanted > speed {
                    (speed + accel * SIM_DT).min(wanted)
                } else {
                    wanted
                };
                accel_fwd = (new_speed - speed) / SIM_DT;
                speed = new_speed;
                let step = (speed * SIM_DT).min(dist);
                vx = d[0] / dist * step / SIM_DT;
                vy = d[1] / dist * step / SIM_DT;
                vz = d[2] / dist * step / SIM_DT;
                for k in 0..3 {
                    pos[k] += d[k] / dist * step;
                }
            }
        }
        let az = (vz - prev_vz) / SIM_DT;
        prev_vz = vz;
        let pitch = -(accel_fwd / GRAVITY).atan() - 0.02 * (vx * vx + vy * vy).sqrt() + attitude.sample(rng);
        let roll = attitude.sample(rng);
        let throttle = (style.hover_throttle - 0.03 * az + 0.004 * speed + throttle_noise.sample(rng)).clamp(0.0, 1.0);
        track.push([pos[0], pos[1], pos[2], roll, pitch, yaw + attitude.sample(rng), throttle]);
    }
    track
}

fn fixed_wing_track(spec: &SynthSpec, duration: f64, rng: &mut ChaCha8Rng) -> Track {
    let max_rate = spec.max_turn_rate_deg_s.to_radians();
    let airspeed = rng.random_range(spec.min_airspeed + 2.0..spec.min_airspeed + 12.0);
    let trim_throttle = rng.random_range(0.45..0.7);
    let area = rng.random_range(300.0..900.0);
    let n_steps = (duration / SIM_DT).ceil() as usize + 1;
    let noise = Normal::new(0.0, 0.01).unwrap();
    let throttle_noise = Normal::new(0.0, 0.02).unwrap();

    let mut track = Track::default();
    let (mut x, mut y): (f64, f64) = (0.0, 0.0);
    let mut alt: f64 = rng.random_range(40.0..120.0);
    let mut alt_target = alt;
    let mut yaw = rng.random_range(-PI..PI);
    let mut rate: f64 = 0.0;
    let mut speed: f64 = airspeed;
    let mut goal: [f64; 2] = [rng.random_range(-area..area), rng.random_range(-area..area)];
    for _ in 0..n_steps {
        if ((goal[0] - x).powi(2) + (goal[1] - y).powi(2)).sqrt() < 60.0 {
            goal = [rng.random_range(-area..area), rng.random_range(-area..area)];
            alt_target = rng.random_range(40.0..150.0);
        }
        let bearing = (goal[1] - y).atan2(goal[0] - x);
        let wanted_rate = (0.4 * wrap_angle(bearing - yaw)).clamp(-max_rate, max_rate);
        // first-order lag keeps the rate, and hence the bank, smooth
        rate += (wanted_rate - rate) * (SIM_DT / 2.0).min(1.0);
        rate = rate.clamp(-max_rate, max_rate);
        yaw = wrap_angle(yaw + rate * SIM_DT);
        speed = (speed + rng.random_range(-0.2..0.2) * SIM_DT).clamp(spec.min_airspeed, airspeed + 3.0);
        let climb = (0.1 * (alt_target - alt)).clamp(-3.0, 3.0);
        alt += climb * SIM_DT;
        x += speed * yaw.cos() * SIM_DT;
        y += speed * yaw.sin() * SIM_DT;
        let roll = (speed * rate / GRAVITY).atan() + noise.sample(rng);
        let pitch = (climb / speed).asin() + 0.05 + noise.sample(rng);
        let throttle = (trim_throttle + 0.05 * climb + throttle_noise.sample(rng)).clamp(0.0, 1.0);
        track.push([x, y, -alt, roll, pitch, yaw, throttle]);
    }
    track
}

/// ZYX Euler angles to a `[w, x, y, z]` quaternion.
pub fn euler_to_quaternion(roll: f64, pitch: f64, yaw: f64) -> [f64; 4] {
    let (sr, cr) = (roll / 2.0).sin_cos();
    let (sp, cp) = (pitch / 2.0).sin_cos();
    let (sy, cy) = (yaw / 2.0).sin_cos();
    [
        cr * cp * cy + sr * sp * sy,
        sr * cp * cy - cr * sp * sy,
        cr * sp * cy + sr * cp * sy,
        cr * cp * sy - sr * sp * cy,
    ]
}

/// Asynchronous sample times for one topic: a random phase and ±5% jitter
/// on every period.
fn topic_times(start_us: u64, duration: f64, rate: f64, rng: &mut ChaCha8Rng) -> Vec<u64> {
    let period = 1e6 / rate;
    let phase = rng.random_range(0.0..period);
    let n = ((duration * 1e6 - phase) / period).floor().max(0.0) as usize + 1;
    (0..n)
        .map(|k| {
            let jitter = rng.random_range(-0.05..0.05) * period;
            let t = (phase + k as f64 * period + jitter).clamp(0.0, duration * 1e6);
            start_us + t.round() as u64
        })
        .collect()
}

/// Linear interpolation of a simulation-grid signal at `t` seconds.
fn at(signal: &[f64], t: f64) -> f64 {
    let pos = (t / SIM_DT).clamp(0.0, (signal.len() - 1) as f64);
    let i = pos.floor() as usize;
    let j = (i + 1).min(signal.len() - 1);
    let w = pos - i as f64;
    signal[i] + w * (signal[j] - signal[i])
}

fn mav_type(vehicle: VehicleType) -> f64 {
    match vehicle {
        VehicleType::Quadrotor => 2.0,
        VehicleType::Hexarotor => 13.0,
        VehicleType::FixedWing => 1.0,
        VehicleType::Other => 0.0,
    }
}

/// Simulates one flight and samples the logged topics.
pub fn generate_flight(spec: &SynthSpec) -> Result<FlightLog, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mean = if spec.vehicle_type == VehicleType::FixedWing {
        FIXED_WING_MEAN_DURATION_S
    } else {
        MULTIROTOR_MEAN_DURATION_S
    };
    let duration = spec.duration_s.unwrap_or_else(|| mean * rng.random_range(0.6..1.4));
    let track = if spec.vehicle_type == VehicleType::FixedWing {
        fixed_wing_track(spec, duration, &mut rng)
    } else {
        multirotor_track(spec, duration, &mut rng)
    };
    debug_assert!(track.len() >= 2);

    let start_us: u64 = rng.random_range(5_000_000..30_000_000);
    let home_alt = rng.random_range(0.0..1500.0);
    let (lat0, lon0) = (rng.random_range(-60.0..60.0), rng.random_range(-180.0..180.0));
    let temp0 = rng.random_range(15.0..35.0);
    let temp_rise = rng.random_range(0.5..3.0) / 60.0;
    let pos_noise = Normal::new(0.0, spec.position_noise.max(1e-12)).unwrap();
    let small = Normal::new(0.0, 0.05).unwrap();
    let rel = |t: u64| (t - start_us) as f64 / 1e6;

    let mut log = FlightLog::new(
        format!("synth-{}-{}", spec.vehicle_type.name(), spec.seed),
        spec.vehicle_type,
    );
    log.metadata
        .insert("MAV_TYPE".into(), MetaValue::Number(mav_type(spec.vehicle_type)));
    log.metadata.insert("sys_name".into(), MetaValue::Text("PX4".into()));

    let rate = spec.sample_rate_hz;

    let ts = topic_times(start_us, duration, rate, &mut rng);
    let mut lp = TopicSeries::new("vehicle_local_position", 0, ts.clone());
    let mut cols: [Vec<f64>; 3] = Default::default();
    for &t in &ts {
        let s = rel(t);
        cols[0].push(at(&track.x, s) + pos_noise.sample(&mut rng));
        cols[1].push(at(&track.y, s) + pos_noise.sample(&mut rng));
        cols[2].push(at(&track.z, s) + pos_noise.sample(&mut rng));
    }
    for (name, col) in ["x", "y", "z"].into_iter().zip(cols) {
        lp.columns.insert(name.into(), col);
    }
    log.insert_topic(lp);

    let ts = topic_times(start_us, duration, rate, &mut rng);
    let mut att = TopicSeries::new("vehicle_attitude", 0, ts.clone());
    let mut q: [Vec<f64>; 4] = Default::default();
    for &t in &ts {
        let s = rel(t);
        // yaw is interpolated through its unwrapped neighbour to avoid the ±π seam
        let i = ((s / SIM_DT) as usize).min(track.len() - 1);
        let quat = euler_to_quaternion(at(&track.roll, s), at(&track.pitch, s), track.yaw[i]);
        for k in 0..4 {
            q[k].push(quat[k]);
        }
    }
    for (k, col) in q.into_iter().enumerate() {
        att.columns.insert(format!("q[{k}]"), col);
    }
    log.insert_topic(att);

    let ts = topic_times(start_us, duration, rate, &mut rng);
    let mut act = TopicSeries::new("actuator_controls_0", 0, ts.clone());
    let mut ctl: [Vec<f64>; 4] = Default::default();
    for &t in &ts {
        let s = rel(t);
        ctl[0].push(at(&track.roll, s) * 0.5 + 0.1 * small.sample(&mut rng));
        ctl[1].push(at(&track.pitch, s) * 0.5 + 0.1 * small.sample(&mut rng));
        ctl[2].push(0.1 * small.sample(&mut rng));
        ctl[3].push(at(&track.throttle, s));
    }
    for (k, col) in ctl.into_iter().enumerate() {
        act.columns.insert(format!("control[{k}]"), col);
    }
    log.insert_topic(act);

    let ts = topic_times(start_us, duration, rate, &mut rng);
    let mut gp = TopicSeries::new("vehicle_global_position", 0, ts.clone());
    let (mut lat, mut lon, mut alt) = (Vec::new(), Vec::new(), Vec::new());
    for &t in &ts {
        let s = rel(t);
        lat.push(lat0 + at(&track.x, s) / 111_320.0);
        lon.push(lon0 + at(&track.y, s) / (111_320.0 * f64::to_radians(lat0).cos()));
        alt.push(home_alt - at(&track.z, s) + pos_noise.sample(&mut rng));
    }
    gp.columns.insert("lat".into(), lat);
    gp.columns.insert("lon".into(), lon);
    gp.columns.insert("alt".into(), alt);
    log.insert_topic(gp);

    let ts = topic_times(start_us, duration, rate, &mut rng);
    let mut bat = TopicSeries::new("battery_status", 0, ts.clone());
    let (mut volt, mut temp) = (Vec::new(), Vec::new());
    for &t in &ts {
        let s = rel(t);
        volt.push(16.8 - 2.0 * s / duration - 0.5 * at(&track.throttle, s) + 0.02 * small.sample(&mut rng));
        temp.push(temp0 + temp_rise * s + small.sample(&mut rng));
    }
    bat.columns.insert("voltage_v".into(), volt);
    bat.columns.insert("temperature".into(), temp);
    log.insert_topic(bat);

    Ok(log)
}

/// Flight counts per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusProfile {
    pub quadrotor: usize,
    pub hexarotor: usize,
    pub fixed_wing: usize,
    pub sample_rate_hz: f64,
    pub seed: u64,
}

impl Default for CorpusProfile {
    fn default() -> Self {
        CorpusProfile {
            quadrotor: 400,
            hexarotor: 40,
            fixed_wing: 40,
            sample_rate_hz: 5.0,
            seed: 0,
        }
    }
}

/// Generates a corpus in class order (quadrotors, hexarotors, fixed-wing).
/// Every flight has its own seed derived from the profile seed.
pub fn generate_corpus(profile: &CorpusProfile) -> Result<Vec<FlightLog>, SynthError> {
    let mut specs = Vec::new();
    for (vehicle, n) in [
        (VehicleType::Quadrotor, profile.quadrotor),
        (VehicleType::Hexarotor, profile.hexarotor),
        (VehicleType::FixedWing, profile.fixed_wing),
    ] {
        for i in 0..n {
            let seed = profile
                .seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add((vehicle.code() as u64) << 32 | i as u64);
            specs.push(SynthSpec {
                vehicle_type: vehicle,
                sample_rate_hz: profile.sample_rate_hz,
                seed,
                ..SynthSpec::default()
            });
        }
    }
    let mut logs = specs
        .par_iter()
        .map(generate_flight)
        .collect::<Result<Vec<_>, _>>()?;
    for (i, log) in logs.iter_mut().enumerate() {
        log.source_id = format!("synth_{:04}_{}", i, log.vehicle_type.name());
    }
    Ok(logs)
}

fn message(out: &mut Vec<u8>, ty: u8, payload: &[u8], topic: &str) -> Result<(), SynthError> {
    let size = u16::try_from(payload.len()).map_err(|_| SynthError::MessageTooLarge {
        topic: topic.to_string(),
        size: payload.len(),
    })?;
    out.extend_from_slice(&size.to_le_bytes());
    out.push(ty);
    out.extend_from_slice(payload);
    Ok(())
}

fn key_value(key: &str, value: &[u8]) -> Result<Vec<u8>, SynthError> {
    let len = u8::try_from(key.len()).map_err(|_| SynthError::UnsupportedFieldKind(key.to_string()))?;
    let mut p = vec![len];
    p.extend_from_slice(key.as_bytes());
    p.extend_from_slice(value);
    Ok(p)
}

fn valid_name(name: &str) -> bool {
    !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// A column group of a topic: either a scalar or `name[0..n]`.
#[derive(Debug, Clone, PartialEq)]
enum Field {
    Scalar(String),
    Array(String, usize),
}

/// Groups `name[i]` columns into arrays. Any other shape is rejected.
fn fields_of(series: &TopicSeries) -> Result<(Vec<Field>, Vec<String>), SynthError> {
    let mut arrays: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut fields = Vec::new();
    for name in series.columns.keys() {
        if let Some((base, rest)) = name.split_once('[') {
            let idx = rest
                .strip_suffix(']')
                .and_then(|i| i.parse::<usize>().ok())
                .filter(|_| valid_name(base))
                .ok_or_else(|| SynthError::UnsupportedFieldKind(name.clone()))?;
            arrays.entry(base.to_string()).or_default().push(idx);
        } else if valid_name(name) && name != "timestamp" {
            fields.push(Field::Scalar(name.clone()));
        } else {
            return Err(SynthError::UnsupportedFieldKind(name.clone()));
        }
    }
    for (base, mut idx) in arrays {
        idx.sort_unstable();
        if idx.iter().enumerate().any(|(i, &v)| i != v) || series.columns.contains_key(&base) {
            return Err(SynthError::UnsupportedFieldKind(format!("{base}[..]")));
        }
        fields.push(Field::Array(base, idx.len()));
    }
    // column order in the data payload
    let mut order = Vec::new();
    for f in &fields {
        match f {
            Field::Scalar(n) => order.push(n.clone()),
            Field::Array(b, n) => order.extend((0..*n).map(|i| format!("{b}[{i}]"))),
        }
    }
    Ok((fields, order))
}

/// Serialises a flight as ULog bytes: header, format definitions with every
/// column as `double`, metadata (integral numbers as `int32_t` parameters,
/// others as `double` info, text as `char` info), subscriptions, then data
/// messages merged in timestamp order.
pub fn write_ulog(log: &FlightLog) -> Result<Vec<u8>, SynthError> {
    if log.topics.is_empty() {
        return Err(SynthError::EmptyLog);
    }
    let mut out = ULOG_MAGIC.to_vec();
    out.push(1);
    put_u64(&mut out, 0);

    let mut formats: BTreeMap<&str, Vec<Field>> = BTreeMap::new();
    let mut orders = Vec::new();
    for series in log.topics.values() {
        if series.is_empty() {
            return Err(SynthError::EmptyTopic(series.topic.clone()));
        }
        if !valid_name(&series.topic) {
            return Err(SynthError::UnsupportedFieldKind(series.topic.clone()));
        }
        let (fields, order) = fields_of(series)?;
        match formats.get(series.topic.as_str()) {
            Some(existing) if *existing != fields => {
                return Err(SynthError::UnsupportedFieldKind(format!(
                    "{}: instances disagree on columns",
                    series.topic
                )));
            }
            Some(_) => {}
            None => {
                formats.insert(&series.topic, fields);
            }
        }
        orders.push(order);
    }
    for (topic, fields) in &formats {
        let mut text = format!("{topic}:uint64_t timestamp;");
        for f in fields {
            match f {
                Field::Scalar(n) => text.push_str(&format!("double {n};")),
                Field::Array(b, n) => text.push_str(&format!("double[{n}] {b};")),
            }
        }
        message(&mut out, b'F', text.as_bytes(), topic)?;
    }

    for (name, value) in &log.metadata {
        if !valid_name(name) {
            return Err(SynthError::UnsupportedFieldKind(name.clone()));
        }
        match value {
            MetaValue::Number(v) if v.fract() == 0.0 && v.abs() <= i32::MAX as f64 => {
                let p = key_value(&format!("int32_t {name}"), &(*v as i32).to_le_bytes())?;
                message(&mut out, b'P', &p, name)?;
            }
            MetaValue::Number(v) => {
                let p = key_value(&format!("double {name}"), &v.to_le_bytes())?;
                message(&mut out, b'I', &p, name)?;
            }
            MetaValue::Text(s) => {
                let p = key_value(&format!("char[{}] {name}", s.len()), s.as_bytes())?;
                message(&mut out, b'I', &p, name)?;
            }
        }
    }

    let series: Vec<&TopicSeries> = log.topics.values().collect();
    for (id, s) in series.iter().enumerate() {
        let mut p = vec![s.instance];
        p.extend_from_slice(&(id as u16).to_le_bytes());
        p.extend_from_slice(s.topic.as_bytes());
        message(&mut out, b'A', &p, &s.topic)?;
    }

    let mut events: Vec<(u64, usize, usize)> = series
        .iter()
        .enumerate()
        .flat_map(|(id, s)| s.timestamps.iter().enumerate().map(move |(row, &t)| (t, id, row)))
        .collect();
    events.sort_unstable();
    let mut payload = Vec::new();
    for (t, id, row) in events {
        let s = series[id];
        payload.clear();
        payload.extend_from_slice(&(id as u16).to_le_bytes());
        put_u64(&mut payload, t);
        for col in &orders[id] {
            payload.extend_from_slice(&s.columns[col][row].to_le_bytes());
        }
        message(&mut out, b'D', &payload, &s.topic)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{assemble_features, FeatureSubset};
    use crate::ulog::parse_ulog_with;
    use crate::ulog::VehicleTypeTable;

    fn short(vehicle: VehicleType, seed: u64) -> SynthSpec {
        SynthSpec {
            duration_s: Some(120.0),
            ..SynthSpec::new(vehicle, seed)
        }
    }

    #[test]
    fn round_trip_through_ulog() {
        for vehicle in VehicleType::CLASSES {
            let log = generate_flight(&short(vehicle, 3)).unwrap();
            let bytes = write_ulog(&log).unwrap();
            assert_eq!(&bytes[..7], &ULOG_MAGIC);
            let back = parse_ulog_with(&bytes, &log.source_id, &VehicleTypeTable::default()).unwrap();
            assert_eq!(back, log);
        }
    }

    #[test]
    fn empty_log_rejected() {
        let log = FlightLog::new("x", VehicleType::Quadrotor);
        assert_eq!(write_ulog(&log), Err(SynthError::EmptyLog));
    }

    #[test]
    fn baseline_features_assemble() {
        let subset = FeatureSubset::baseline();
        for vehicle in VehicleType::CLASSES {
            let log = generate_flight(&short(vehicle, 1)).unwrap();
            assert!(assemble_features(&log, &subset).is_some());
        }
    }

    #[test]
    fn fixed_wing_never_hovers() {
        let log = generate_flight(&short(VehicleType::FixedWing, 9)).unwrap();
        let lp = log.topic("vehicle_local_position", 0).unwrap();
        let (x, y) = (&lp.columns["x"], &lp.columns["y"]);
        for i in 1..lp.len() {
            let dt = (lp.timestamps[i] - lp.timestamps[i - 1]) as f64 / 1e6;
            let v = ((x[i] - x[i - 1]).powi(2) + (y[i] - y[i - 1]).powi(2)).sqrt() / dt;
            assert!(v > 5.0, "speed {v} at sample {i}");
        }
    }

    #[test]
    fn single_waypoint_hovers() {
        let spec = SynthSpec {
            waypoints: 1,
            ..short(VehicleType::Quadrotor, 2)
        };
        let log = generate_flight(&spec).unwrap();
        let lp = log.topic("vehicle_local_position", 0).unwrap();
        for col in ["x", "y", "z"] {
            let v = &lp.columns[col];
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / v.len() as f64;
            assert!(var < 4.0 * spec.position_noise.powi(2));
        }
    }

    #[test]
    fn generation_is_pure() {
        let spec = short(VehicleType::Hexarotor, 5);
        assert_eq!(generate_flight(&spec).unwrap(), generate_flight(&spec).unwrap());
    }

    #[test]
    fn corpus_counts() {
        let profile = CorpusProfile {
            quadrotor: 3,
            hexarotor: 2,
            fixed_wing: 1,
            ..CorpusProfile::default()
        };
        let logs = generate_corpus(&profile).unwrap();
        let n = |v| logs.iter().filter(|l| l.vehicle_type == v).count();
        assert_eq!(
            (n(VehicleType::Quadrotor), n(VehicleType::Hexarotor), n(VehicleType::FixedWing)),
            (3, 2, 1)
        );
    }

    #[test]
    fn quaternion_inverts_euler() {
        let (r, p, y) = crate::features::quaternion_to_euler(euler_to_quaternion(0.3, -0.2, 2.5)).unwrap();
        assert!((r - 0.3).abs() < 1e-12 && (p + 0.2).abs() < 1e-12 && (y - 2.5).abs() < 1e-12);
    }

    #[test]
    fn rejects_unencodable_columns() {
        let mut log = FlightLog::new("x", VehicleType::Quadrotor);
        let mut s = TopicSeries::new("t", 0, vec![1, 2]);
        s.columns.insert("a.b".into(), vec![0.0, 1.0]);
        log.insert_topic(s);
        assert!(matches!(write_ulog(&log), Err(SynthError::UnsupportedFieldKind(_))));
    }
}
