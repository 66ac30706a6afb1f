//! Shared domain types: raw and canonical tuples, keys, packages, alarms,
//! drop reasons and report rows, plus the 17-column CSV line codec.

use std::fmt;

use chrono::{NaiveDateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// UTC seconds since the Unix epoch.
pub type Timestamp = i64;

pub const FIELD_COUNT: usize = 17;

const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

/// Parses either integer epoch seconds or `YYYY-MM-DD HH:MM:SS` (UTC).
pub fn parse_timestamp(s: &str) -> Option<Timestamp> {
    let s = s.trim();
    if s.is_empty() {
        return None;
    }
    if let Ok(secs) = s.parse::<i64>() {
        return Some(secs);
    }
    NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT).ok().map(|dt| dt.and_utc().timestamp())
}

pub fn format_timestamp(ts: Timestamp) -> String {
    match Utc.timestamp_opt(ts, 0).single() {
        Some(dt) => dt.format(TIMESTAMP_FORMAT).to_string(),
        None => ts.to_string(),
    }
}

/// Serde adapter: writes epoch seconds, reads epoch seconds or `YYYY-MM-DD HH:MM:SS`.
pub mod serde_ts {
    use serde::{de, Deserialize, Deserializer, Serializer};

    use super::{parse_timestamp, Timestamp};

    pub fn serialize<S: Serializer>(ts: &Timestamp, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_i64(*ts)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Timestamp, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Secs(i64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Secs(s) => Ok(s),
            Repr::Text(t) => parse_timestamp(&t).ok_or_else(|| de::Error::custom(format!("invalid timestamp {t:?}"))),
        }
    }
}

/// Column of the vehicle-location record, in wire order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Field {
    VlrId,
    RouteIdVlr,
    RouteName,
    RouteIdRta,
    RouteNickname,
    TripIdBr,
    TransitAuthorityServiceTimeId,
    TripIdTta,
    TripStart,
    TripFinish,
    VehicleIdYab,
    VehicleIdVlr,
    VehicleIdVlrTa,
    Bdescription,
    Lat,
    Lng,
    Timestamp,
}

impl Field {
    pub const ALL: [Field; FIELD_COUNT] = [
        Field::VlrId,
        Field::RouteIdVlr,
        Field::RouteName,
        Field::RouteIdRta,
        Field::RouteNickname,
        Field::TripIdBr,
        Field::TransitAuthorityServiceTimeId,
        Field::TripIdTta,
        Field::TripStart,
        Field::TripFinish,
        Field::VehicleIdYab,
        Field::VehicleIdVlr,
        Field::VehicleIdVlrTa,
        Field::Bdescription,
        Field::Lat,
        Field::Lng,
        Field::Timestamp,
    ];

    /// The four key components, in schema order.
    pub const KEY: [Field; 4] = [Field::RouteIdRta, Field::TripIdBr, Field::VehicleIdVlr, Field::Timestamp];

    /// Every field the fog requires to be non-empty, in schema order.
    pub const REQUIRED: [Field; 8] = [
        Field::RouteIdRta,
        Field::TripIdBr,
        Field::TripStart,
        Field::TripFinish,
        Field::VehicleIdVlr,
        Field::Lat,
        Field::Lng,
        Field::Timestamp,
    ];

    /// Columns carrying information duplicated elsewhere; projected away in the fog.
    pub const REDUNDANT: [Field; 8] = [
        Field::VlrId,
        Field::RouteIdVlr,
        Field::RouteNickname,
        Field::TransitAuthorityServiceTimeId,
        Field::TripIdTta,
        Field::VehicleIdYab,
        Field::VehicleIdVlrTa,
        Field::Bdescription,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Field::VlrId => "vlr_id",
            Field::RouteIdVlr => "route_id_vlr",
            Field::RouteName => "route_name",
            Field::RouteIdRta => "route_id_rta",
            Field::RouteNickname => "route_nickname",
            Field::TripIdBr => "trip_id_br",
            Field::TransitAuthorityServiceTimeId => "transit_authority_service_time_id",
            Field::TripIdTta => "trip_id_tta",
            Field::TripStart => "trip_start",
            Field::TripFinish => "trip_finish",
            Field::VehicleIdYab => "vehicle_id_yab",
            Field::VehicleIdVlr => "vehicle_id_vlr",
            Field::VehicleIdVlrTa => "vehicle_id_vlr_ta",
            Field::Bdescription => "bdescription",
            Field::Lat => "lat",
            Field::Lng => "lng",
            Field::Timestamp => "timestamp",
        }
    }

    pub fn from_name(name: &str) -> Option<Field> {
        Field::ALL.into_iter().find(|f| f.name() == name)
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MalformedKind {
    #[error("expected {FIELD_COUNT} fields, found {0}")]
    FieldCount(usize),
    #[error("unbalanced quoting at byte {0}")]
    Quoting(usize),
}

/// A record that could not be split into exactly 17 fields.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed record{}: {kind}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
pub struct MalformedRecord {
    pub kind: MalformedKind,
    /// 1-based line number when known.
    pub line: Option<usize>,
}

impl MalformedRecord {
    pub fn at_line(mut self, line: usize) -> Self {
        self.line = Some(line);
        self
    }
}

/// Splits one CSV line into fields using RFC 4180 quoting.
pub fn split_record(line: &str) -> Result<Vec<String>, MalformedKind> {
    let line = line.strip_suffix('\r').unwrap_or(line);
    let bytes = line.as_bytes();
    let mut fields = Vec::with_capacity(FIELD_COUNT);
    let mut pos = 0;
    loop {
        let mut field = String::new();
        if bytes.get(pos) == Some(&b'"') {
            let open = pos;
            pos += 1;
            loop {
                match line[pos..].find('"') {
                    None => return Err(MalformedKind::Quoting(open)),
                    Some(off) => {
                        field.push_str(&line[pos..pos + off]);
                        pos += off + 1;
                        if bytes.get(pos) == Some(&b'"') {
                            field.push('"');
                            pos += 1;
                        } else {
                            break;
                        }
                    }
                }
            }
            match bytes.get(pos) {
                None | Some(b',') => {}
                Some(_) => return Err(MalformedKind::Quoting(pos)),
            }
        } else {
            let end = line[pos..].find(',').map_or(line.len(), |o| pos + o);
            let raw = &line[pos..end];
            if let Some(q) = raw.find('"') {
                return Err(MalformedKind::Quoting(pos + q));
            }
            field.push_str(raw);
            pos = end;
        }
        fields.push(field);
        if pos >= line.len() {
            break;
        }
        // skip the comma
        pos += 1;
        if pos == line.len() {
            fields.push(String::new());
            break;
        }
    }
    Ok(fields)
}

fn needs_quoting(field: &str) -> bool {
    field.contains([',', '"', '\n', '\r'])
}

/// Joins fields into one CSV line (no terminator), quoting only where needed.
pub fn join_record<S: AsRef<str>>(fields: &[S]) -> String {
    let mut out = String::new();
    for (i, f) in fields.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let f = f.as_ref();
        if needs_quoting(f) {
            out.push('"');
            out.push_str(&f.replace('"', "\"\""));
            out.push('"');
        } else {
            out.push_str(f);
        }
    }
    out
}

/// One vehicle-location report as received. Empty string means missing.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct RawTuple {
    fields: [String; FIELD_COUNT],
}

impl RawTuple {
    pub fn from_fields(fields: [String; FIELD_COUNT]) -> Self {
        Self { fields }
    }

    pub fn get(&self, field: Field) -> &str {
        &self.fields[field.index()]
    }

    pub fn set(&mut self, field: Field, value: impl Into<String>) {
        self.fields[field.index()] = value.into();
    }

    pub fn fields(&self) -> &[String; FIELD_COUNT] {
        &self.fields
    }

    pub fn is_header(&self) -> bool {
        self.get(Field::VlrId) == Field::VlrId.name()
    }

    pub fn header() -> Self {
        Self { fields: Field::ALL.map(|f| f.name().to_string()) }
    }

    /// First empty field among `fields`, in the order given.
    pub fn first_missing(&self, fields: &[Field]) -> Option<Field> {
        fields.iter().copied().find(|f| self.get(*f).is_empty())
    }

    pub fn to_csv_line(&self) -> String {
        join_record(&self.fields)
    }
}

/// Parses one CSV record into a [`RawTuple`]. Typed fields are validated later.
pub fn parse_raw_record(line: &str) -> Result<RawTuple, MalformedRecord> {
    let fields = split_record(line).map_err(|kind| MalformedRecord { kind, line: None })?;
    let n = fields.len();
    let fields: [String; FIELD_COUNT] =
        fields.try_into().map_err(|_| MalformedRecord { kind: MalformedKind::FieldCount(n), line: None })?;
    Ok(RawTuple { fields })
}

/// Identity of a report; equal keys define the duplicate relation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TupleKey {
    pub vehicle_id_vlr: String,
    pub route_id_rta: String,
    pub trip_id_br: String,
    pub timestamp: Timestamp,
}

/// Extracts the key. Fails on the first empty component in schema order;
/// a present but unparsable timestamp is a wrong value.
pub fn tuple_key(t: &RawTuple) -> Result<TupleKey, DropReason> {
    if let Some(f) = t.first_missing(&Field::KEY) {
        return Err(DropReason::missing(f));
    }
    let timestamp = parse_timestamp(t.get(Field::Timestamp)).ok_or_else(|| DropReason::wrong(Field::Timestamp))?;
    Ok(TupleKey {
        vehicle_id_vlr: t.get(Field::VehicleIdVlr).to_string(),
        route_id_rta: t.get(Field::RouteIdRta).to_string(),
        trip_id_br: t.get(Field::TripIdBr).to_string(),
        timestamp,
    })
}

/// Validated, projected tuple carrying its fog-assigned ID.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalTuple {
    pub fog_id: u64,
    pub key: TupleKey,
    pub route_name: String,
    pub trip_start: Timestamp,
    pub trip_finish: Timestamp,
    pub lat: f64,
    pub lng: f64,
    #[serde(default)]
    pub late: bool,
}

impl CanonicalTuple {
    /// (route_id_rta, trip_id_br, timestamp)
    pub fn sort_key(&self) -> (&str, &str, Timestamp) {
        (&self.key.route_id_rta, &self.key.trip_id_br, self.key.timestamp)
    }
}

/// A batch of raw records collected by one edge node over one window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamPackage {
    pub edge_id: String,
    pub window_start: Timestamp,
    pub window_end: Timestamp,
    pub seq: u64,
    /// Raw CSV lines, byte-for-byte as acquired.
    pub records: Vec<String>,
}

impl StreamPackage {
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("package serializes")
    }

    pub fn from_bytes(bytes: &[u8]) -> serde_json::Result<Self> {
        serde_json::from_slice(bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AlarmKind {
    MissingTuples,
    DuplicateTuples,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct KeyScope {
    pub route_id_rta: String,
    pub trip_id_br: String,
    pub vehicle_id_vlr: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum AlarmDetail {
    MissingTuples { gap_from: Timestamp, gap_to: Timestamp, estimated_missing: u64 },
    DuplicateTuples { key: TupleKey, duplicate_count: u64 },
}

/// Local notification emitted by the fog processing block.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AlarmEvent {
    pub emitted_at: Timestamp,
    pub key_scope: KeyScope,
    pub detail: AlarmDetail,
}

impl AlarmEvent {
    pub fn kind(&self) -> AlarmKind {
        match self.detail {
            AlarmDetail::MissingTuples { .. } => AlarmKind::MissingTuples,
            AlarmDetail::DuplicateTuples { .. } => AlarmKind::DuplicateTuples,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("alarm serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DropCode {
    MissingAttributeValue,
    DuplicateTuple,
    WrongAttributeValue,
    MalformedRecord,
}

impl fmt::Display for DropCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DropCode::MissingAttributeValue => "missing_attribute_value",
            DropCode::DuplicateTuple => "duplicate_tuple",
            DropCode::WrongAttributeValue => "wrong_attribute_value",
            DropCode::MalformedRecord => "malformed_record",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DropReason {
    pub code: DropCode,
    pub field_name: Option<String>,
}

impl DropReason {
    pub fn missing(field: Field) -> Self {
        Self { code: DropCode::MissingAttributeValue, field_name: Some(field.name().to_string()) }
    }

    pub fn wrong(field: Field) -> Self {
        Self { code: DropCode::WrongAttributeValue, field_name: Some(field.name().to_string()) }
    }

    pub fn duplicate() -> Self {
        Self { code: DropCode::DuplicateTuple, field_name: None }
    }

    pub fn malformed() -> Self {
        Self { code: DropCode::MalformedRecord, field_name: None }
    }
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.field_name {
            Some(name) => write!(f, "{}({name})", self.code),
            None => write!(f, "{}", self.code),
        }
    }
}

/// Scheduled vs performed trips for one route.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripReportRow {
    pub route_id_rta: String,
    pub scheduled_trips: u64,
    pub performed_trips: u64,
    /// Percentage in hundredths, rounded half-up.
    pub percent_hundredths: u64,
}

impl TripReportRow {
    pub fn new(route_id_rta: impl Into<String>, scheduled_trips: u64, performed_trips: u64) -> Self {
        Self {
            route_id_rta: route_id_rta.into(),
            scheduled_trips,
            performed_trips,
            percent_hundredths: percent_hundredths(performed_trips, scheduled_trips),
        }
    }

    /// Two fractional digits, e.g. `6.45`.
    pub fn percent(&self) -> String {
        format!("{}.{:02}", self.percent_hundredths / 100, self.percent_hundredths % 100)
    }
}

/// round_half_up(10000 * part / whole), or 0 when `whole` is 0.
pub fn percent_hundredths(part: u64, whole: u64) -> u64 {
    if whole == 0 {
        return 0;
    }
    let (part, whole) = (part as u128, whole as u128);
    ((20_000 * part + whole) / (2 * whole)) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_fields() -> [String; FIELD_COUNT] {
        [
            "101",
            "7",
            "Main St",
            "50",
            "MS",
            "T50-1",
            "svc",
            "tta1",
            "2017-04-15 06:00:00",
            "2017-04-15 06:45:00",
            "yab1",
            "bus-50-1",
            "Bus 1",
            "Nova",
            "46.1",
            "-64.8",
            "2017-04-15 06:00:05",
        ]
        .map(String::from)
    }

    #[test]
    fn parses_seventeen_fields() {
        let line = join_record(&sample_fields());
        let t = parse_raw_record(&line).unwrap();
        assert_eq!(t.fields(), &sample_fields());
        assert_eq!(t.get(Field::TripIdBr), "T50-1");
    }

    #[test]
    fn sixteen_fields_is_malformed() {
        let f = sample_fields();
        let line = join_record(&f[..16]);
        let err = parse_raw_record(&line).unwrap_err();
        assert_eq!(err.kind, MalformedKind::FieldCount(16));
    }

    #[test]
    fn unbalanced_quote_is_malformed() {
        let mut line = join_record(&sample_fields());
        line.push_str(",\"oops");
        assert!(matches!(parse_raw_record(&line).unwrap_err().kind, MalformedKind::Quoting(_)));
        assert!(matches!(split_record("a,b\"c,d"), Err(MalformedKind::Quoting(3))));
        assert!(matches!(split_record("\"ab\"c"), Err(MalformedKind::Quoting(4))));
    }

    #[test]
    fn empty_lat_is_kept_for_later_validation() {
        let mut f = sample_fields();
        f[Field::Lat.index()].clear();
        let t = parse_raw_record(&join_record(&f)).unwrap();
        assert_eq!(t.get(Field::Lat), "");
        assert_eq!(t.first_missing(&Field::REQUIRED), Some(Field::Lat));
    }

    #[test]
    fn quoted_fields_round_trip() {
        let mut f = sample_fields();
        f[Field::RouteName.index()] = "King, \"Express\"".into();
        let line = join_record(&f);
        assert!(line.contains("\"King, \"\"Express\"\"\""));
        assert_eq!(parse_raw_record(&line).unwrap().fields(), &f);
    }

    #[test]
    fn trailing_empty_fields_count() {
        assert_eq!(split_record("a,,").unwrap(), vec!["a", "", ""]);
        assert_eq!(split_record("").unwrap(), vec![""]);
        assert_eq!(split_record("\"\",x").unwrap(), vec!["", "x"]);
    }

    #[test]
    fn key_from_complete_tuple() {
        let t = RawTuple::from_fields(sample_fields());
        let k = tuple_key(&t).unwrap();
        assert_eq!(k.route_id_rta, "50");
        assert_eq!(k.trip_id_br, "T50-1");
        assert_eq!(k.vehicle_id_vlr, "bus-50-1");
        assert_eq!(k.timestamp, 1_492_236_005);
    }

    #[test]
    fn key_reports_missing_trip() {
        let mut t = RawTuple::from_fields(sample_fields());
        t.set(Field::TripIdBr, "");
        assert_eq!(tuple_key(&t).unwrap_err(), DropReason::missing(Field::TripIdBr));
    }

    #[test]
    fn key_reports_first_missing_in_schema_order() {
        // route_id_rta is column 4, timestamp column 17
        assert!(Field::RouteIdRta.index() < Field::Timestamp.index());
        let mut t = RawTuple::from_fields(sample_fields());
        t.set(Field::Timestamp, "");
        t.set(Field::RouteIdRta, "");
        assert_eq!(tuple_key(&t).unwrap_err(), DropReason::missing(Field::RouteIdRta));
    }

    #[test]
    fn key_rejects_garbage_timestamp() {
        let mut t = RawTuple::from_fields(sample_fields());
        t.set(Field::Timestamp, "yesterday");
        assert_eq!(tuple_key(&t).unwrap_err(), DropReason::wrong(Field::Timestamp));
    }

    #[test]
    fn key_ignores_non_key_fields() {
        let a = RawTuple::from_fields(sample_fields());
        let mut b = a.clone();
        b.set(Field::VlrId, "999");
        b.set(Field::Lat, "12.0");
        b.set(Field::Bdescription, "other");
        assert_eq!(tuple_key(&a).unwrap(), tuple_key(&b).unwrap());
        let mut c = a.clone();
        c.set(Field::VehicleIdVlr, "bus-50-2");
        assert_ne!(tuple_key(&a).unwrap(), tuple_key(&c).unwrap());
    }

    #[test]
    fn timestamps_in_both_formats() {
        assert_eq!(parse_timestamp("1492214400"), Some(1_492_214_400));
        assert_eq!(parse_timestamp("2017-04-15 00:00:00"), Some(1_492_214_400));
        assert_eq!(parse_timestamp(""), None);
        assert_eq!(parse_timestamp("NULL"), None);
        assert_eq!(format_timestamp(1_492_214_400), "2017-04-15 00:00:00");
    }

    #[test]
    fn header_detection() {
        let h = RawTuple::header();
        assert!(h.is_header());
        assert!(parse_raw_record(&h.to_csv_line()).unwrap().is_header());
        assert!(!RawTuple::from_fields(sample_fields()).is_header());
    }

    #[test]
    fn drop_reason_display() {
        assert_eq!(DropReason::wrong(Field::Lat).to_string(), "wrong_attribute_value(lat)");
        assert_eq!(DropReason::malformed().to_string(), "malformed_record");
        assert!(DropReason::malformed().field_name.is_none());
    }

    #[test]
    fn percent_rendering() {
        assert_eq!(TripReportRow::new("50", 31, 2).percent(), "6.45");
        assert_eq!(TripReportRow::new("61", 32, 19).percent(), "59.38");
        assert_eq!(TripReportRow::new("x", 0, 0).percent(), "0.00");
        assert_eq!(TripReportRow::new("x", 4, 4).percent(), "100.00");
        // 1/8 = 12.5% exactly, 1/16 = 6.25%, 1/32 = 3.125% rounds half-up
        assert_eq!(TripReportRow::new("x", 32, 1).percent(), "3.13");
    }

    fn field_strategy() -> impl Strategy<Value = String> {
        proptest::string::string_regex("[a-zA-Z0-9 ,\"._:-]{0,12}").unwrap()
    }

    proptest! {
        #[test]
        fn line_round_trip(fields in proptest::collection::vec(field_strategy(), FIELD_COUNT)) {
            let line = join_record(&fields);
            let t = parse_raw_record(&line).unwrap();
            prop_assert_eq!(&t.fields()[..], &fields[..]);
            prop_assert_eq!(t.to_csv_line(), line);
        }

        #[test]
        fn normalization_is_idempotent(fields in proptest::collection::vec("[a-z,]{0,4}", 1..20)) {
            // over-quoted input normalizes to minimal quoting
            let over: Vec<String> = fields.iter().map(|f| format!("\"{f}\"")).collect();
            let parsed = split_record(&over.join(",")).unwrap();
            prop_assert_eq!(&parsed, &fields);
            let normalized = join_record(&parsed);
            prop_assert_eq!(split_record(&normalized).unwrap(), parsed);
        }
    }
}
