//! PX4 ULog ingestion.
//!
//! Decodes the subset of the ULog container needed for classification:
//! format definitions, info and parameter messages, subscriptions and data
//! records. Flag-bit, logged-string, sync and dropout messages are skipped,
//! as is any message type this reader does not know.
//!
//! Every subscribed data stream becomes a [`TopicSeries`] keyed by
//! `(topic, multi_id)`. The first top-level `uint64_t timestamp` field of a
//! message supplies the time axis; every other numeric field (arrays are
//! flattened to `name[i]`, nested messages to `outer.inner`) becomes a
//! column. `char` fields and `_padding*` fields never become columns.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// First seven bytes of every ULog file.
pub const ULOG_MAGIC: [u8; 7] = [0x55, 0x4C, 0x6F, 0x67, 0x01, 0x12, 0x35];
pub const HEADER_LEN: usize = 16;

const MAX_NESTING: usize = 8;
const MAX_MESSAGE_BYTES: usize = u16::MAX as usize;

#[derive(Debug, Error)]
pub enum UlogError {
    #[error("not a ULog file (magic mismatch)")]
    BadMagic,
    /// The input ended inside a message. `partial` holds everything decoded
    /// from the complete messages before `offset`.
    #[error("message at byte {offset} overruns the input")]
    TruncatedMessage {
        offset: usize,
        partial: Box<FlightLog>,
    },
    #[error("unrecognized field type `{0}`")]
    UnknownFieldKind(String),
    #[error("malformed message at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("flight log has no topics")]
    EmptyLog,
}

/// Airframe class. Only the first three are ever emitted into a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VehicleType {
    Quadrotor,
    Hexarotor,
    FixedWing,
    Other,
}

impl VehicleType {
    /// Classes in model output order.
    pub const CLASSES: [VehicleType; 3] = [
        VehicleType::Quadrotor,
        VehicleType::FixedWing,
        VehicleType::Hexarotor,
    ];

    /// Index into the classifier output, `None` for [`VehicleType::Other`].
    pub fn class_index(self) -> Option<usize> {
        match self {
            VehicleType::Quadrotor => Some(0),
            VehicleType::FixedWing => Some(1),
            VehicleType::Hexarotor => Some(2),
            VehicleType::Other => None,
        }
    }

    pub fn from_class_index(idx: usize) -> Option<VehicleType> {
        Self::CLASSES.get(idx).copied()
    }

    pub fn code(self) -> u8 {
        match self {
            VehicleType::Quadrotor => 0,
            VehicleType::Hexarotor => 1,
            VehicleType::FixedWing => 2,
            VehicleType::Other => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<VehicleType> {
        match code {
            0 => Some(VehicleType::Quadrotor),
            1 => Some(VehicleType::Hexarotor),
            2 => Some(VehicleType::FixedWing),
            3 => Some(VehicleType::Other),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            VehicleType::Quadrotor => "quadrotor",
            VehicleType::Hexarotor => "hexarotor",
            VehicleType::FixedWing => "fixed_wing",
            VehicleType::Other => "other",
        }
    }
}

impl fmt::Display for VehicleType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Value of an info (`I`/`M`) or parameter (`P`) message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MetaValue {
    Number(f64),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TopicKey {
    pub name: String,
    pub instance: u8,
}

impl TopicKey {
    pub fn new(name: impl Into<String>, instance: u8) -> Self {
        TopicKey {
            name: name.into(),
            instance,
        }
    }
}

/// One subscribed stream: a shared time axis and its numeric columns.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicSeries {
    pub topic: String,
    pub instance: u8,
    /// Microseconds since boot, non-decreasing.
    pub timestamps: Vec<u64>,
    pub columns: BTreeMap<String, Vec<f64>>,
    /// Set when the raw stream was out of order and had to be sorted.
    pub resorted: bool,
}

impl TopicSeries {
    pub fn new(topic: impl Into<String>, instance: u8, timestamps: Vec<u64>) -> Self {
        TopicSeries {
            topic: topic.into(),
            instance,
            timestamps,
            columns: BTreeMap::new(),
            resorted: false,
        }
    }

    pub fn key(&self) -> TopicKey {
        TopicKey::new(self.topic.clone(), self.instance)
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    /// Sorts samples by timestamp (stable) if the stream is not already
    /// non-decreasing. Returns whether anything moved.
    pub fn ensure_monotone(&mut self) -> bool {
        if self.timestamps.windows(2).all(|w| w[0] <= w[1]) {
            return false;
        }
        let mut order: Vec<usize> = (0..self.timestamps.len()).collect();
        order.sort_by_key(|&i| self.timestamps[i]);
        self.timestamps = order.iter().map(|&i| self.timestamps[i]).collect();
        for col in self.columns.values_mut() {
            *col = order.iter().map(|&i| col[i]).collect();
        }
        self.resorted = true;
        true
    }
}

/// A parsed flight.
#[derive(Debug, Clone, PartialEq)]
pub struct FlightLog {
    pub topics: BTreeMap<TopicKey, TopicSeries>,
    pub vehicle_type: VehicleType,
    pub duration_s: f64,
    pub source_id: String,
    /// Info and parameter values keyed by name.
    pub metadata: BTreeMap<String, MetaValue>,
}

impl FlightLog {
    pub fn new(source_id: impl Into<String>, vehicle_type: VehicleType) -> Self {
        FlightLog {
            topics: BTreeMap::new(),
            vehicle_type,
            duration_s: 0.0,
            source_id: source_id.into(),
            metadata: BTreeMap::new(),
        }
    }

    /// Inserts a series and refreshes `duration_s`.
    pub fn insert_topic(&mut self, series: TopicSeries) {
        self.topics.insert(series.key(), series);
        self.duration_s = flight_duration(self).unwrap_or(0.0);
    }

    pub fn topic(&self, name: &str, instance: u8) -> Option<&TopicSeries> {
        self.topics.get(&TopicKey::new(name, instance))
    }
}

/// Envelope of all topic time ranges, in seconds.
pub fn flight_duration(log: &FlightLog) -> Result<f64, UlogError> {
    let mut start = u64::MAX;
    let mut end = 0u64;
    let mut any = false;
    for series in log.topics.values() {
        if let (Some(&first), Some(&last)) = (series.timestamps.first(), series.timestamps.last()) {
            start = start.min(first);
            end = end.max(last);
            any = true;
        }
    }
    if !any {
        return Err(UlogError::EmptyLog);
    }
    Ok((end - start) as f64 / 1e6)
}

/// Maps an airframe parameter to a [`VehicleType`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleTypeTable {
    /// Metadata key holding the airframe type.
    pub key: String,
    /// Parameter value → vehicle type. Unlisted values map to `Other`.
    pub map: BTreeMap<String, VehicleType>,
}

impl Default for VehicleTypeTable {
    fn default() -> Self {
        let map = [
            ("2", VehicleType::Quadrotor),
            ("13", VehicleType::Hexarotor),
            ("1", VehicleType::FixedWing),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        VehicleTypeTable {
            key: "MAV_TYPE".into(),
            map,
        }
    }
}

impl VehicleTypeTable {
    pub fn lookup(&self, value: i64) -> VehicleType {
        self.map
            .get(&value.to_string())
            .copied()
            .unwrap_or(VehicleType::Other)
    }
}

/// Reads the airframe-type key from decoded info/parameter values. A missing
/// or non-numeric key yields `Other`.
pub fn extract_vehicle_type(
    metadata: &BTreeMap<String, MetaValue>,
    table: &VehicleTypeTable,
) -> VehicleType {
    match metadata.get(&table.key) {
        Some(MetaValue::Number(v)) if v.is_finite() => table.lookup(v.round() as i64),
        Some(MetaValue::Text(s)) => s
            .trim()
            .parse::<i64>()
            .map(|v| table.lookup(v))
            .unwrap_or(VehicleType::Other),
        _ => VehicleType::Other,
    }
}

/// Primitive field types of the ULog format grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarKind {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    I64,
    U64,
    F32,
    F64,
    Bool,
    Char,
}

impl ScalarKind {
    pub fn from_token(token: &str) -> Option<ScalarKind> {
        Some(match token {
            "int8_t" => ScalarKind::I8,
            "uint8_t" => ScalarKind::U8,
            "int16_t" => ScalarKind::I16,
            "uint16_t" => ScalarKind::U16,
            "int32_t" => ScalarKind::I32,
            "uint32_t" => ScalarKind::U32,
            "int64_t" => ScalarKind::I64,
            "uint64_t" => ScalarKind::U64,
            "float" => ScalarKind::F32,
            "double" => ScalarKind::F64,
            "bool" => ScalarKind::Bool,
            "char" => ScalarKind::Char,
            _ => return None,
        })
    }

    pub fn token(self) -> &'static str {
        match self {
            ScalarKind::I8 => "int8_t",
            ScalarKind::U8 => "uint8_t",
            ScalarKind::I16 => "int16_t",
            ScalarKind::U16 => "uint16_t",
            ScalarKind::I32 => "int32_t",
            ScalarKind::U32 => "uint32_t",
            ScalarKind::I64 => "int64_t",
            ScalarKind::U64 => "uint64_t",
            ScalarKind::F32 => "float",
            ScalarKind::F64 => "double",
            ScalarKind::Bool => "bool",
            ScalarKind::Char => "char",
        }
    }

    pub fn size(self) -> usize {
        match self {
            ScalarKind::I8 | ScalarKind::U8 | ScalarKind::Bool | ScalarKind::Char => 1,
            ScalarKind::I16 | ScalarKind::U16 => 2,
            ScalarKind::I32 | ScalarKind::U32 | ScalarKind::F32 => 4,
            ScalarKind::I64 | ScalarKind::U64 | ScalarKind::F64 => 8,
        }
    }

    /// Decodes one value; `bytes` is exactly `size()` long.
    fn decode(self, b: &[u8]) -> f64 {
        match self {
            ScalarKind::I8 => b[0] as i8 as f64,
            ScalarKind::U8 | ScalarKind::Char => b[0] as f64,
            ScalarKind::Bool => (b[0] != 0) as u8 as f64,
            ScalarKind::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarKind::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarKind::I32 => i32::from_le_bytes(b.try_into().unwrap()) as f64,
            ScalarKind::U32 => u32::from_le_bytes(b.try_into().unwrap()) as f64,
            ScalarKind::I64 => i64::from_le_bytes(b.try_into().unwrap()) as f64,
            ScalarKind::U64 => u64::from_le_bytes(b.try_into().unwrap()) as f64,
            ScalarKind::F32 => f32::from_le_bytes(b.try_into().unwrap()) as f64,
            ScalarKind::F64 => f64::from_le_bytes(b.try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FieldType {
    Scalar(ScalarKind),
    /// Another format definition, by message name.
    Nested(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldDef {
    pub name: String,
    pub ty: FieldType,
    pub array_len: Option<usize>,
}

/// A parsed `F` (format) message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageSchema {
    pub message_name: String,
    pub fields: Vec<FieldDef>,
}

impl MessageSchema {
    /// Parses `name:type field;type field;...`.
    pub fn parse(text: &str) -> Result<MessageSchema, String> {
        let (name, body) = text
            .split_once(':')
            .ok_or_else(|| "format definition without ':'".to_string())?;
        if name.is_empty() {
            return Err("format definition with empty name".into());
        }
        let mut fields = Vec::new();
        for entry in body.split(';') {
            let entry = entry.trim();
            if entry.is_empty() {
                continue;
            }
            let (ty, field_name) = entry
                .split_once(' ')
                .ok_or_else(|| format!("field entry `{entry}` lacks a name"))?;
            let field_name = field_name.trim();
            if field_name.is_empty() {
                return Err(format!("field entry `{entry}` lacks a name"));
            }
            let (base, array_len) = match ty.split_once('[') {
                Some((base, rest)) => {
                    let n = rest
                        .strip_suffix(']')
                        .and_then(|n| n.parse::<usize>().ok())
                        .ok_or_else(|| format!("bad array suffix in `{ty}`"))?;
                    (base, Some(n))
                }
                None => (ty, None),
            };
            let ty = match ScalarKind::from_token(base) {
                Some(kind) => FieldType::Scalar(kind),
                None => FieldType::Nested(base.to_string()),
            };
            fields.push(FieldDef {
                name: field_name.to_string(),
                ty,
                array_len,
            });
        }
        Ok(MessageSchema {
            message_name: name.to_string(),
            fields,
        })
    }

    /// Renders the schema back into format-message text.
    pub fn render(&self) -> String {
        let mut out = format!("{}:", self.message_name);
        for f in &self.fields {
            let base = match &f.ty {
                FieldType::Scalar(k) => k.token().to_string(),
                FieldType::Nested(n) => n.clone(),
            };
            match f.array_len {
                Some(n) => out.push_str(&format!("{base}[{n}] {};", f.name)),
                None => out.push_str(&format!("{base} {};", f.name)),
            }
        }
        out
    }
}

/// One decoded scalar position inside a flattened message.
#[derive(Debug, Clone)]
struct Slot {
    column: Option<String>,
    kind: ScalarKind,
    offset: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    size: usize,
    timestamp_offset: Option<usize>,
    slots: Vec<Slot>,
}

fn is_padding(name: &str) -> bool {
    name.starts_with("_padding")
}

enum LayoutError {
    Unknown(String),
    Invalid(String),
}

#[allow(clippy::too_many_arguments)]
fn flatten(
    schemas: &HashMap<String, MessageSchema>,
    name: &str,
    prefix: &str,
    base_offset: usize,
    depth: usize,
    hidden: bool,
    out: &mut Vec<Slot>,
) -> Result<usize, LayoutError> {
    if depth > MAX_NESTING {
        return Err(LayoutError::Invalid(format!(
            "format nesting deeper than {MAX_NESTING} at `{name}`"
        )));
    }
    let schema = schemas
        .get(name)
        .ok_or_else(|| LayoutError::Unknown(name.to_string()))?;
    let mut offset = base_offset;
    for field in &schema.fields {
        let count = field.array_len.unwrap_or(1);
        let hide = hidden || is_padding(&field.name);
        for i in 0..count {
            let label = match field.array_len {
                Some(_) => format!("{prefix}{}[{i}]", field.name),
                None => format!("{prefix}{}", field.name),
            };
            match &field.ty {
                FieldType::Scalar(kind) => {
                    let column = (!hide && *kind != ScalarKind::Char).then(|| label.clone());
                    out.push(Slot {
                        column,
                        kind: *kind,
                        offset,
                    });
                    offset += kind.size();
                }
                FieldType::Nested(inner) => {
                    let inner_prefix = format!("{label}.");
                    offset = flatten(schemas, inner, &inner_prefix, offset, depth + 1, hide, out)?;
                }
            }
            if offset > MAX_MESSAGE_BYTES {
                return Err(LayoutError::Invalid(format!(
                    "format `{name}` exceeds the maximum message size"
                )));
            }
        }
    }
    Ok(offset)
}

fn build_layout(schemas: &HashMap<String, MessageSchema>, name: &str) -> Result<Layout, LayoutError> {
    if !schemas.contains_key(name) {
        return Err(LayoutError::Invalid(format!(
            "subscription to undefined format `{name}`"
        )));
    }
    let mut slots = Vec::new();
    let size = flatten(schemas, name, "", 0, 0, false, &mut slots)?;
    // the time axis is the first top-level uint64_t scalar named `timestamp`
    let mut timestamp_offset = None;
    for slot in slots.iter_mut() {
        if slot.kind == ScalarKind::U64 && slot.column.as_deref() == Some("timestamp") {
            timestamp_offset = Some(slot.offset);
            slot.column = None;
            break;
        }
    }
    Ok(Layout {
        size,
        timestamp_offset,
        slots,
    })
}

struct Stream {
    key: TopicKey,
    layout: Layout,
    timestamps: Vec<u64>,
    columns: Vec<Vec<f64>>,
}

/// Parses a ULog byte buffer with the default vehicle-type table.
pub fn parse_ulog(bytes: &[u8]) -> Result<FlightLog, UlogError> {
    parse_ulog_with(bytes, "", &VehicleTypeTable::default())
}

/// Parses a ULog byte buffer, labelling the flight via `table`.
pub fn parse_ulog_with(
    bytes: &[u8],
    source_id: &str,
    table: &VehicleTypeTable,
) -> Result<FlightLog, UlogError> {
    if bytes.len() < ULOG_MAGIC.len() || bytes[..ULOG_MAGIC.len()] != ULOG_MAGIC {
        return Err(UlogError::BadMagic);
    }
    let mut parser = Parser {
        schemas: HashMap::new(),
        subscriptions: HashMap::new(),
        streams: Vec::new(),
        stream_index: HashMap::new(),
        metadata: BTreeMap::new(),
    };
    if bytes.len() < HEADER_LEN {
        return Err(UlogError::TruncatedMessage {
            offset: 0,
            partial: Box::new(parser.finish(source_id, table)),
        });
    }
    let mut pos = HEADER_LEN;
    while pos < bytes.len() {
        if bytes.len() - pos < 3 {
            return Err(UlogError::TruncatedMessage {
                offset: pos,
                partial: Box::new(parser.finish(source_id, table)),
            });
        }
        let size = u16::from_le_bytes([bytes[pos], bytes[pos + 1]]) as usize;
        let msg_type = bytes[pos + 2];
        let start = pos + 3;
        if bytes.len() - start < size {
            return Err(UlogError::TruncatedMessage {
                offset: pos,
                partial: Box::new(parser.finish(source_id, table)),
            });
        }
        parser.handle(msg_type, &bytes[start..start + size], pos)?;
        pos = start + size;
    }
    parser.validate_formats()?;
    Ok(parser.finish(source_id, table))
}

struct Parser {
    schemas: HashMap<String, MessageSchema>,
    subscriptions: HashMap<u16, usize>,
    streams: Vec<Stream>,
    stream_index: HashMap<TopicKey, usize>,
    metadata: BTreeMap<String, MetaValue>,
}

fn malformed(offset: usize, reason: impl Into<String>) -> UlogError {
    UlogError::Malformed {
        offset,
        reason: reason.into(),
    }
}

impl Parser {
    fn handle(&mut self, msg_type: u8, payload: &[u8], offset: usize) -> Result<(), UlogError> {
        match msg_type {
            b'F' => {
                let text = std::str::from_utf8(payload)
                    .map_err(|_| malformed(offset, "format definition is not UTF-8"))?;
                let schema = MessageSchema::parse(text).map_err(|e| malformed(offset, e))?;
                self.schemas.insert(schema.message_name.clone(), schema);
            }
            b'I' => self.info(payload, offset, false)?,
            b'P' => self.info(payload, offset, true)?,
            b'M' => {
                if payload.is_empty() {
                    return Err(malformed(offset, "empty multi-info message"));
                }
                self.info(&payload[1..], offset, false)?;
            }
            b'A' => self.subscribe(payload, offset)?,
            b'D' => self.data(payload, offset)?,
            // flag bits, logged strings, sync, dropout and unknown types
            _ => {}
        }
        Ok(())
    }

    fn info(&mut self, payload: &[u8], offset: usize, is_param: bool) -> Result<(), UlogError> {
        let key_len = *payload
            .first()
            .ok_or_else(|| malformed(offset, "empty info message"))? as usize;
        if payload.len() < 1 + key_len {
            return Err(malformed(offset, "info key overruns message"));
        }
        let key = std::str::from_utf8(&payload[1..1 + key_len])
            .map_err(|_| malformed(offset, "info key is not UTF-8"))?;
        let value = &payload[1 + key_len..];
        let Some((ty, name)) = key.split_once(' ') else {
            return Err(malformed(offset, format!("info key `{key}` lacks a type")));
        };
        let base = ty.split('[').next().unwrap_or(ty);
        let parsed = match ScalarKind::from_token(base) {
            Some(ScalarKind::Char) => {
                let text = String::from_utf8_lossy(value);
                Some(MetaValue::Text(text.trim_end_matches('\0').to_string()))
            }
            Some(kind) if !ty.contains('[') && value.len() >= kind.size() => {
                Some(MetaValue::Number(kind.decode(&value[..kind.size()])))
            }
            _ => None,
        };
        if let Some(v) = parsed {
            if is_param {
                // the initial value describes the airframe; later changes are ignored
                self.metadata.entry(name.to_string()).or_insert(v);
            } else {
                self.metadata.insert(name.to_string(), v);
            }
        }
        Ok(())
    }

    fn subscribe(&mut self, payload: &[u8], offset: usize) -> Result<(), UlogError> {
        if payload.len() < 3 {
            return Err(malformed(offset, "short subscription message"));
        }
        let multi_id = payload[0];
        let msg_id = u16::from_le_bytes([payload[1], payload[2]]);
        let name = std::str::from_utf8(&payload[3..])
            .map_err(|_| malformed(offset, "subscription name is not UTF-8"))?
            .trim_end_matches('\0')
            .to_string();
        let layout = match build_layout(&self.schemas, &name) {
            Ok(layout) => layout,
            Err(LayoutError::Unknown(token)) => return Err(UlogError::UnknownFieldKind(token)),
            Err(LayoutError::Invalid(reason)) => return Err(malformed(offset, reason)),
        };
        let key = TopicKey::new(name, multi_id);
        let idx = match self.stream_index.get(&key) {
            Some(&idx) => idx,
            None => {
                let n_cols = layout.slots.iter().filter(|s| s.column.is_some()).count();
                self.streams.push(Stream {
                    key: key.clone(),
                    layout,
                    timestamps: Vec::new(),
                    columns: vec![Vec::new(); n_cols],
                });
                self.stream_index.insert(key, self.streams.len() - 1);
                self.streams.len() - 1
            }
        };
        self.subscriptions.insert(msg_id, idx);
        Ok(())
    }

    fn data(&mut self, payload: &[u8], offset: usize) -> Result<(), UlogError> {
        if payload.len() < 2 {
            return Err(malformed(offset, "short data message"));
        }
        let msg_id = u16::from_le_bytes([payload[0], payload[1]]);
        let Some(&idx) = self.subscriptions.get(&msg_id) else {
            return Ok(());
        };
        let stream = &mut self.streams[idx];
        let body = &payload[2..];
        if body.len() < stream.layout.size {
            return Err(malformed(
                offset,
                format!(
                    "data for `{}` has {} bytes, format needs {}",
                    stream.key.name,
                    body.len(),
                    stream.layout.size
                ),
            ));
        }
        let Some(ts_off) = stream.layout.timestamp_offset else {
            return Ok(());
        };
        let ts = u64::from_le_bytes(body[ts_off..ts_off + 8].try_into().unwrap());
        stream.timestamps.push(ts);
        let mut col = 0;
        for slot in &stream.layout.slots {
            if slot.column.is_some() {
                let raw = &body[slot.offset..slot.offset + slot.kind.size()];
                stream.columns[col].push(slot.kind.decode(raw));
                col += 1;
            }
        }
        Ok(())
    }

    fn validate_formats(&self) -> Result<(), UlogError> {
        for schema in self.schemas.values() {
            for field in &schema.fields {
                if let FieldType::Nested(inner) = &field.ty {
                    if !self.schemas.contains_key(inner) {
                        return Err(UlogError::UnknownFieldKind(inner.clone()));
                    }
                }
            }
        }
        Ok(())
    }

    fn finish(&mut self, source_id: &str, table: &VehicleTypeTable) -> FlightLog {
        let vehicle_type = extract_vehicle_type(&self.metadata, table);
        let mut log = FlightLog::new(source_id, vehicle_type);
        log.metadata = std::mem::take(&mut self.metadata);
        for stream in self.streams.drain(..) {
            if stream.timestamps.is_empty() {
                continue;
            }
            let names = stream.layout.slots.iter().filter_map(|s| s.column.clone());
            let mut series = TopicSeries::new(stream.key.name.clone(), stream.key.instance, stream.timestamps);
            series.columns = names.zip(stream.columns).collect();
            if series.ensure_monotone() {
                log::warn!(
                    "{}: stream {}/{} was out of order and has been sorted",
                    source_id,
                    series.topic,
                    series.instance
                );
            }
            log.topics.insert(series.key(), series);
        }
        log.duration_s = flight_duration(&log).unwrap_or(0.0);
        log
    }
}

/// Outcome of ingesting a directory of ULog files.
#[derive(Debug, Default)]
pub struct IngestReport {
    /// Accepted logs, in sorted path order.
    pub logs: Vec<FlightLog>,
    /// Rejected files with the reason.
    pub skipped: Vec<(PathBuf, String)>,
    /// Files accepted despite a truncated final message.
    pub truncated: Vec<PathBuf>,
}

impl IngestReport {
    pub fn class_counts(&self) -> BTreeMap<VehicleType, usize> {
        let mut counts = BTreeMap::new();
        for log in &self.logs {
            *counts.entry(log.vehicle_type).or_insert(0) += 1;
        }
        counts
    }
}

/// Lists `*.ulg` files under `dir` (non-recursive), sorted.
pub fn list_ulog_files(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "ulg"))
        .collect();
    files.sort();
    Ok(files)
}

/// Parses every file, skipping the ones that fail. Logs of type `Other`
/// are dropped as well. Truncated files keep their complete messages when
/// at least one topic survived.
pub fn ingest_files(paths: &[PathBuf], table: &VehicleTypeTable) -> IngestReport {
    enum Outcome {
        Ok(FlightLog),
        Truncated(FlightLog),
        Skip(String),
    }
    let outcomes: Vec<Outcome> = paths
        .par_iter()
        .map(|path| {
            let bytes = match std::fs::read(path) {
                Ok(b) => b,
                Err(e) => return Outcome::Skip(format!("read error: {e}")),
            };
            let source = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let (log, truncated) = match parse_ulog_with(&bytes, &source, table) {
                Ok(log) => (log, false),
                Err(UlogError::TruncatedMessage { partial, .. }) if !partial.topics.is_empty() => {
                    (*partial, true)
                }
                Err(e) => return Outcome::Skip(e.to_string()),
            };
            if log.vehicle_type == VehicleType::Other {
                return Outcome::Skip("vehicle type not quadrotor/hexarotor/fixed-wing".into());
            }
            if truncated {
                Outcome::Truncated(log)
            } else {
                Outcome::Ok(log)
            }
        })
        .collect();

    let mut report = IngestReport::default();
    for (path, outcome) in paths.iter().zip(outcomes) {
        match outcome {
            Outcome::Ok(log) => report.logs.push(log),
            Outcome::Truncated(log) => {
                report.truncated.push(path.clone());
                report.logs.push(log);
            }
            Outcome::Skip(reason) => {
                log::info!("skipping {}: {reason}", path.display());
                report.skipped.push((path.clone(), reason));
            }
        }
    }
    report
}
