//! Safety-score categorization over the four observable crossing factors.
//!
//! [`classify`] is a total function over the 108 attribute combinations. The
//! categorization table leaves 16 combinations uncovered (no moving car,
//! pedestrian signal not visible, no crossing pedestrian seen); those map to
//! [`SafetyScore::PartiallyUnsafe`] and are tagged
//! [`RuleSource::ConservativeFallback`].

use std::fmt;
use std::io;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RulesError {
    #[error("safety level {0} out of range; valid levels are -2, -1, 0, 1, 2")]
    LevelOutOfRange(i64),
    #[error("invalid value {value:?} for {field}; expected one of {expected}")]
    InvalidValue {
        field: &'static str,
        value: String,
        expected: &'static str,
    },
    #[error("missing attribute {0}")]
    MissingAttribute(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriState {
    Yes,
    No,
    NotVisible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LightState {
    Red,
    Yellow,
    Green,
    NotVisible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalState {
    Go,
    Stop,
    NotVisible,
}

impl TriState {
    pub const ALL: [TriState; 3] = [TriState::Yes, TriState::No, TriState::NotVisible];

    pub fn as_str(self) -> &'static str {
        match self {
            TriState::Yes => "yes",
            TriState::No => "no",
            TriState::NotVisible => "not_visible",
        }
    }
}

impl LightState {
    pub const ALL: [LightState; 4] = [
        LightState::Red,
        LightState::Yellow,
        LightState::Green,
        LightState::NotVisible,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LightState::Red => "red",
            LightState::Yellow => "yellow",
            LightState::Green => "green",
            LightState::NotVisible => "not_visible",
        }
    }
}

impl SignalState {
    pub const ALL: [SignalState; 3] = [SignalState::Go, SignalState::Stop, SignalState::NotVisible];

    pub fn as_str(self) -> &'static str {
        match self {
            SignalState::Go => "go",
            SignalState::Stop => "stop",
            SignalState::NotVisible => "not_visible",
        }
    }
}

macro_rules! impl_str_enum {
    ($ty:ty, $field:literal, $expected:literal) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = RulesError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                let norm = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
                Self::ALL
                    .iter()
                    .copied()
                    .find(|v| v.as_str() == norm)
                    .ok_or_else(|| RulesError::InvalidValue {
                        field: $field,
                        value: s.to_string(),
                        expected: $expected,
                    })
            }
        }
    };
}

impl_str_enum!(TriState, "tri-state", "yes, no, not_visible");
impl_str_enum!(LightState, "light", "red, yellow, green, not_visible");
impl_str_enum!(SignalState, "signal", "go, stop, not_visible");

/// Scene-level crossing factors, one set per composed multiview image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SceneAttributes {
    pub moving_car: TriState,
    pub traffic_light: LightState,
    pub pedestrian_signal: SignalState,
    pub crossing_pedestrian: TriState,
}

impl SceneAttributes {
    pub fn new(
        moving_car: TriState,
        traffic_light: LightState,
        pedestrian_signal: SignalState,
        crossing_pedestrian: TriState,
    ) -> Self {
        Self {
            moving_car,
            traffic_light,
            pedestrian_signal,
            crossing_pedestrian,
        }
    }

    /// All 3 x 4 x 3 x 3 combinations in a fixed order.
    pub fn all() -> impl Iterator<Item = SceneAttributes> {
        TriState::ALL.into_iter().flat_map(|car| {
            LightState::ALL.into_iter().flat_map(move |light| {
                SignalState::ALL.into_iter().flat_map(move |signal| {
                    TriState::ALL
                        .into_iter()
                        .map(move |ped| SceneAttributes::new(car, light, signal, ped))
                })
            })
        })
    }

    /// Parses `car=..,light=..,signal=..,ped=..` (any order, all four required).
    pub fn parse_kv(s: &str) -> Result<Self, RulesError> {
        let mut car = None;
        let mut light = None;
        let mut signal = None;
        let mut ped = None;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part.split_once('=').ok_or_else(|| RulesError::InvalidValue {
                field: "attribute",
                value: part.to_string(),
                expected: "key=value with key in car, light, signal, ped",
            })?;
            match key.trim() {
                "car" | "moving_car" => car = Some(value.parse()?),
                "light" | "traffic_light" => light = Some(value.parse()?),
                "signal" | "pedestrian_signal" => signal = Some(value.parse()?),
                "ped" | "crossing_pedestrian" => ped = Some(value.parse()?),
                other => {
                    return Err(RulesError::InvalidValue {
                        field: "attribute",
                        value: other.to_string(),
                        expected: "car, light, signal, ped",
                    })
                }
            }
        }
        Ok(SceneAttributes::new(
            car.ok_or(RulesError::MissingAttribute("car"))?,
            light.ok_or(RulesError::MissingAttribute("light"))?,
            signal.ok_or(RulesError::MissingAttribute("signal"))?,
            ped.ok_or(RulesError::MissingAttribute("ped"))?,
        ))
    }
}

impl fmt::Display for SceneAttributes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "car={},light={},signal={},ped={}",
            self.moving_car, self.traffic_light, self.pedestrian_signal, self.crossing_pedestrian
        )
    }
}

/// Five-level ordinal safety label; higher is safer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafetyScore {
    TotallyUnsafe,
    PartiallyUnsafe,
    KeepCaution,
    PartiallySafe,
    TotallySafe,
}

impl SafetyScore {
    pub const ALL: [SafetyScore; 5] = [
        SafetyScore::TotallyUnsafe,
        SafetyScore::PartiallyUnsafe,
        SafetyScore::KeepCaution,
        SafetyScore::PartiallySafe,
        SafetyScore::TotallySafe,
    ];

    pub fn level(self) -> i8 {
        match self {
            SafetyScore::TotallyUnsafe => -2,
            SafetyScore::PartiallyUnsafe => -1,
            SafetyScore::KeepCaution => 0,
            SafetyScore::PartiallySafe => 1,
            SafetyScore::TotallySafe => 2,
        }
    }

    pub fn from_level(level: i64) -> Result<Self, RulesError> {
        match level {
            -2 => Ok(SafetyScore::TotallyUnsafe),
            -1 => Ok(SafetyScore::PartiallyUnsafe),
            0 => Ok(SafetyScore::KeepCaution),
            1 => Ok(SafetyScore::PartiallySafe),
            2 => Ok(SafetyScore::TotallySafe),
            other => Err(RulesError::LevelOutOfRange(other)),
        }
    }

    /// Index into a five-bucket histogram, 0 for -2 up to 4 for 2.
    pub fn index(self) -> usize {
        (self.level() + 2) as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SafetyScore::TotallyUnsafe => "totally_unsafe",
            SafetyScore::PartiallyUnsafe => "partially_unsafe",
            SafetyScore::KeepCaution => "keep_caution",
            SafetyScore::PartiallySafe => "partially_safe",
            SafetyScore::TotallySafe => "totally_safe",
        }
    }

    /// Human-readable name as used in the categorization table.
    pub fn title(self) -> &'static str {
        match self {
            SafetyScore::TotallyUnsafe => "Totally unsafe",
            SafetyScore::PartiallyUnsafe => "Partially unsafe",
            SafetyScore::KeepCaution => "Keep caution",
            SafetyScore::PartiallySafe => "Partially safe",
            SafetyScore::TotallySafe => "Totally safe",
        }
    }
}

impl fmt::Display for SafetyScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.title(), self.level())
    }
}

pub fn score_from_level(level: i64) -> Result<SafetyScore, RulesError> {
    SafetyScore::from_level(level)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleSource {
    TableRow,
    ConservativeFallback,
}

/// Rows of the categorization table. `PartiallySafe` spans two rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableRow {
    TotallyUnsafe,
    PartiallyUnsafe,
    KeepCaution,
    PartiallySafeNoGreen,
    PartiallySafeGreen,
    TotallySafe,
}

impl TableRow {
    pub fn as_str(self) -> &'static str {
        match self {
            TableRow::TotallyUnsafe => "totally_unsafe",
            TableRow::PartiallyUnsafe => "partially_unsafe",
            TableRow::KeepCaution => "keep_caution",
            TableRow::PartiallySafeNoGreen => "partially_safe_no_green",
            TableRow::PartiallySafeGreen => "partially_safe_green",
            TableRow::TotallySafe => "totally_safe",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RuleProvenance {
    pub source: RuleSource,
    pub matched_row: Option<TableRow>,
}

impl RuleProvenance {
    fn row(row: TableRow) -> Self {
        Self {
            source: RuleSource::TableRow,
            matched_row: Some(row),
        }
    }

    pub fn is_fallback(&self) -> bool {
        self.source == RuleSource::ConservativeFallback
    }
}

/// Classifies a scene. Rules are checked in fixed precedence: a moving car
/// dominates, then a stop signal, then the crossing-permitted rows.
pub fn classify(attrs: &SceneAttributes) -> (SafetyScore, RuleProvenance) {
    use LightState as L;
    use SignalState as S;
    use TriState as T;

    if attrs.moving_car == T::Yes {
        return (SafetyScore::TotallyUnsafe, RuleProvenance::row(TableRow::TotallyUnsafe));
    }
    if attrs.pedestrian_signal == S::Stop {
        return (
            SafetyScore::PartiallyUnsafe,
            RuleProvenance::row(TableRow::PartiallyUnsafe),
        );
    }

    let green = attrs.traffic_light == L::Green;
    let ped_crossing = attrs.crossing_pedestrian == T::Yes;
    let go = attrs.pedestrian_signal == S::Go;

    match (green, ped_crossing, go) {
        (false, false, true) => (SafetyScore::KeepCaution, RuleProvenance::row(TableRow::KeepCaution)),
        (false, true, _) => (
            SafetyScore::PartiallySafe,
            RuleProvenance::row(TableRow::PartiallySafeNoGreen),
        ),
        (true, false, true) => (
            SafetyScore::PartiallySafe,
            RuleProvenance::row(TableRow::PartiallySafeGreen),
        ),
        (true, true, _) => (SafetyScore::TotallySafe, RuleProvenance::row(TableRow::TotallySafe)),
        // signal not visible and nobody seen crossing: permission unconfirmed
        (_, false, false) => (
            SafetyScore::PartiallyUnsafe,
            RuleProvenance {
                source: RuleSource::ConservativeFallback,
                matched_row: None,
            },
        ),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageRow {
    pub attributes: SceneAttributes,
    pub score: SafetyScore,
    pub provenance: RuleProvenance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageReport {
    pub rows: Vec<CoverageRow>,
    /// Counts indexed by level, -2 first.
    pub per_score: [usize; 5],
    pub fallback_count: usize,
}

impl CoverageReport {
    pub fn total(&self) -> usize {
        self.rows.len()
    }

    pub fn count_for(&self, score: SafetyScore) -> usize {
        self.per_score[score.index()]
    }

    /// CSV with columns car, light, signal, pedestrian, score, provenance.
    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["car", "light", "signal", "pedestrian", "score", "provenance"])?;
        for row in &self.rows {
            let provenance = match row.provenance.matched_row {
                Some(r) => format!("table_row:{}", r.as_str()),
                None => "conservative_fallback".to_string(),
            };
            w.write_record([
                row.attributes.moving_car.as_str(),
                row.attributes.traffic_light.as_str(),
                row.attributes.pedestrian_signal.as_str(),
                row.attributes.crossing_pedestrian.as_str(),
                &row.score.level().to_string(),
                &provenance,
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn enumerate_rule_coverage() -> CoverageReport {
    let mut per_score = [0usize; 5];
    let mut fallback_count = 0;
    let rows: Vec<CoverageRow> = SceneAttributes::all()
        .map(|attributes| {
            let (score, provenance) = classify(&attributes);
            per_score[score.index()] += 1;
            if provenance.is_fallback() {
                fallback_count += 1;
            }
            CoverageRow {
                attributes,
                score,
                provenance,
            }
        })
        .collect();
    CoverageReport {
        rows,
        per_score,
        fallback_count,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn attrs(car: &str, light: &str, signal: &str, ped: &str) -> SceneAttributes {
        SceneAttributes::new(
            car.parse().unwrap(),
            light.parse().unwrap(),
            signal.parse().unwrap(),
            ped.parse().unwrap(),
        )
    }

    #[test]
    fn table_examples() {
        let (s, p) = classify(&attrs("yes", "green", "go", "yes"));
        assert_eq!(s.level(), -2);
        assert_eq!(p.matched_row, Some(TableRow::TotallyUnsafe));

        let (s, _) = classify(&attrs("no", "green", "go", "yes"));
        assert_eq!(s, SafetyScore::TotallySafe);

        let (s, p) = classify(&attrs("not_visible", "red", "stop", "no"));
        assert_eq!(s.level(), -1);
        assert_eq!(p.source, RuleSource::TableRow);

        let (s, p) = classify(&attrs("no", "red", "not_visible", "no"));
        assert_eq!(s.level(), -1);
        assert_eq!(p.source, RuleSource::ConservativeFallback);
        assert_eq!(p.matched_row, None);
    }

    #[test]
    fn coverage_counts() {
        let report = enumerate_rule_coverage();
        assert_eq!(report.total(), 108);
        assert_eq!(report.count_for(SafetyScore::TotallyUnsafe), 36);
        assert_eq!(report.fallback_count, 16);
        assert_eq!(report.per_score.iter().sum::<usize>(), 108);
    }

    #[test]
    fn level_round_trip_and_range() {
        assert_eq!(score_from_level(2).unwrap(), SafetyScore::TotallySafe);
        assert_eq!(score_from_level(0).unwrap(), SafetyScore::KeepCaution);
        let err = score_from_level(7).unwrap_err();
        assert!(err.to_string().contains("-2, -1, 0, 1, 2"));
        for s in SafetyScore::ALL {
            assert_eq!(SafetyScore::from_level(s.level() as i64).unwrap(), s);
        }
        assert!(SafetyScore::TotallyUnsafe < SafetyScore::TotallySafe);
    }

    #[test]
    fn json_uses_snake_case() {
        let a = attrs("not_visible", "yellow", "go", "no");
        let json = serde_json::to_string(&a).unwrap();
        assert_eq!(
            json,
            r#"{"moving_car":"not_visible","traffic_light":"yellow","pedestrian_signal":"go","crossing_pedestrian":"no"}"#
        );
        assert_eq!(serde_json::to_string(&SafetyScore::KeepCaution).unwrap(), "\"keep_caution\"");
        let back: SceneAttributes = serde_json::from_str(&json).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn parse_kv_forms() {
        let a = SceneAttributes::parse_kv("car=yes,light=green,signal=go,ped=yes").unwrap();
        assert_eq!(a, attrs("yes", "green", "go", "yes"));
        assert!(matches!(
            SceneAttributes::parse_kv("car=yes,light=green,signal=go"),
            Err(RulesError::MissingAttribute("ped"))
        ));
        assert!(SceneAttributes::parse_kv("car=maybe,light=green,signal=go,ped=no").is_err());
        assert!(SceneAttributes::parse_kv("car=no,light=blue,signal=go,ped=no").is_err());
    }

    #[test]
    fn csv_export_has_header_and_all_rows() {
        let mut buf = Vec::new();
        enumerate_rule_coverage().write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("car,light,signal,pedestrian,score,provenance"));
        assert_eq!(lines.count(), 108);
        assert!(text.contains("no,red,not_visible,no,-1,conservative_fallback"));
    }
}
