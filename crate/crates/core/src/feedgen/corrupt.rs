use serde::{Deserialize, Serialize};

use super::FeedError;
use crate::model::{format_timestamp, parse_timestamp, Field, RawTuple, Timestamp};
use crate::rng::SplitMix64;

/// Offset applied by wrong-timestamp injection; far outside any trip slack.
pub const WRONG_TIMESTAMP_OFFSET: i64 = 86_400;

/// Defect injection rates and order scrambling for a synthetic feed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionPlan {
    #[serde(default)]
    pub duplicate_rate: f64,
    #[serde(default)]
    pub drop_rate: f64,
    #[serde(default)]
    pub blank_field_rate: f64,
    #[serde(default)]
    pub wrong_value_rate: f64,
    /// Maximum displacement, in positions, of any tuple after scrambling.
    #[serde(default)]
    pub shuffle_window: usize,
    #[serde(default)]
    pub rng_seed: u64,
    /// Stress mode: one tuple may receive several defects.
    #[serde(default)]
    pub overlap: bool,
}

impl Default for CorruptionPlan {
    fn default() -> Self {
        Self {
            duplicate_rate: 0.0,
            drop_rate: 0.0,
            blank_field_rate: 0.0,
            wrong_value_rate: 0.0,
            shuffle_window: 0,
            rng_seed: 0,
            overlap: false,
        }
    }
}

impl CorruptionPlan {
    pub fn validate(&self) -> Result<(), FeedError> {
        let rates = [
            ("duplicate_rate", self.duplicate_rate),
            ("drop_rate", self.drop_rate),
            ("blank_field_rate", self.blank_field_rate),
            ("wrong_value_rate", self.wrong_value_rate),
        ];
        for (name, r) in rates {
            if !(0.0..=1.0).contains(&r) {
                return Err(FeedError::InvalidPlan(format!("{name} = {r} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    Drop,
    Duplicate,
    BlankField,
    WrongValue,
}

/// One injected defect, identified by the clean tuple it was applied to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefectEntry {
    pub defect: DefectKind,
    /// Position of the affected tuple in the clean feed.
    pub index: usize,
    pub route_id_rta: String,
    pub trip_id_br: String,
    pub vehicle_id_vlr: String,
    pub timestamp: Option<Timestamp>,
    /// Field blanked or rewritten, for `blank_field` and `wrong_value`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorruptedFeed {
    pub tuples: Vec<RawTuple>,
    pub ledger: Vec<DefectEntry>,
}

impl CorruptedFeed {
    pub fn count(&self, kind: DefectKind) -> usize {
        self.ledger.iter().filter(|d| d.defect == kind).count()
    }
}

fn entry(kind: DefectKind, index: usize, t: &RawTuple, field: Option<Field>) -> DefectEntry {
    DefectEntry {
        defect: kind,
        index,
        route_id_rta: t.get(Field::RouteIdRta).to_string(),
        trip_id_br: t.get(Field::TripIdBr).to_string(),
        vehicle_id_vlr: t.get(Field::VehicleIdVlr).to_string(),
        timestamp: parse_timestamp(t.get(Field::Timestamp)),
        field: field.map(|f| f.name().to_string()),
    }
}

fn make_wrong(t: &mut RawTuple, rng: &mut SplitMix64) -> Field {
    let ts_fields = (parse_timestamp(t.get(Field::TripStart)), parse_timestamp(t.get(Field::TripFinish)));
    match (rng.below(2), ts_fields) {
        (1, (Some(start), Some(finish))) => {
            let bad = if rng.chance(0.5) { finish + WRONG_TIMESTAMP_OFFSET } else { start - WRONG_TIMESTAMP_OFFSET };
            t.set(Field::Timestamp, format_timestamp(bad));
            Field::Timestamp
        }
        _ => {
            let lat = 90.5 + rng.below(900) as f64 / 100.0;
            t.set(Field::Lat, format!("{lat:.6}"));
            Field::Lat
        }
    }
}

/// Moves every element at most `window` positions from where it started.
fn scramble<T>(items: Vec<T>, window: usize, rng: &mut SplitMix64) -> Vec<T> {
    if window == 0 {
        return items;
    }
    let mut keyed: Vec<(usize, T)> =
        items.into_iter().enumerate().map(|(i, t)| (i + rng.below(window as u64 + 1) as usize, t)).collect();
    keyed.sort_by_key(|(k, _)| *k);
    keyed.into_iter().map(|(_, t)| t).collect()
}

/// Injects defects per `plan` and records each in the ledger. Outside overlap
/// mode each tuple receives at most one defect, tried in the order drop,
/// duplicate, blank, wrong value.
pub fn corrupt_feed(feed: &[RawTuple], plan: &CorruptionPlan) -> Result<CorruptedFeed, FeedError> {
    plan.validate()?;
    let mut rng = SplitMix64::new(plan.rng_seed);
    let mut tuples = Vec::with_capacity(feed.len());
    let mut ledger = Vec::new();

    for (i, original) in feed.iter().enumerate() {
        let drop = rng.chance(plan.drop_rate);
        let dup = rng.chance(plan.duplicate_rate);
        let blank = rng.chance(plan.blank_field_rate);
        let wrong = rng.chance(plan.wrong_value_rate);
        let blank_pick = rng.below(Field::REQUIRED.len() as u64) as usize;

        if drop {
            ledger.push(entry(DefectKind::Drop, i, original, None));
            continue;
        }
        let mut t = original.clone();
        let mut copy = None;
        if dup {
            ledger.push(entry(DefectKind::Duplicate, i, original, None));
            let mut c = original.clone();
            c.set(Field::VlrId, format!("{}-dup", original.get(Field::VlrId)));
            copy = Some(c);
        }
        if blank && (plan.overlap || !dup) {
            let field = Field::REQUIRED[blank_pick];
            t.set(field, "");
            ledger.push(entry(DefectKind::BlankField, i, original, Some(field)));
        }
        if wrong && (plan.overlap || !(dup || blank)) {
            let field = make_wrong(&mut t, &mut rng);
            ledger.push(entry(DefectKind::WrongValue, i, original, Some(field)));
        }
        tuples.push(t);
        if let Some(c) = copy {
            tuples.push(c);
        }
    }

    let tuples = scramble(tuples, plan.shuffle_window, &mut rng);
    Ok(CorruptedFeed { tuples, ledger })
}
