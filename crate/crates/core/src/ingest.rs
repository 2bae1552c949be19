//! Check-in parsing, per-user histories, sample generation and splits.

use std::collections::HashMap;
use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use chrono::DateTime;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphs::LatLon;
use crate::seed::mix_seed;

/// Most recent visits kept in a context.
pub const DEFAULT_MAX_SEQ_LEN: usize = 100;
/// Fraction of malformed lines above which parsing aborts.
pub const MALFORMED_LINE_THRESHOLD: f64 = 0.01;
/// Fractions accepted by [`train_fraction_slice`], in fifths.
pub const TRAIN_FRACTIONS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

const EVAL_SHUFFLE_TAG: u64 = 0x6576_616c;
const SLICE_TAG: u64 = 0x736c_6963;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: expected {expected} columns, found {found}")]
    ColumnCountMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: coordinate ({lat}, {lon}) out of range")]
    CoordinateOutOfRange { line: usize, lat: f64, lon: f64 },
    #[error("line {line}: unparsable coordinate `{value}`")]
    CoordinateUnparsable { line: usize, value: String },
    #[error("line {line}: unparsable timestamp `{value}`")]
    TimestampUnparsable { line: usize, value: String },
    #[error("{malformed} of {total} lines malformed, above the 1% threshold")]
    TooManyMalformed { malformed: usize, total: usize },
    #[error("no check-in records")]
    EmptyCorpus,
    #[error("user {user} has visited every POI; no negative candidates")]
    NoNegativeCandidates { user: usize },
    #[error("train fraction {0} not in {{0.2, 0.4, 0.6, 0.8, 1.0}}")]
    InvalidFraction(f64),
    #[error("unknown input format `{0}`")]
    UnknownFormat(String),
    #[error("line {line}: {source}")]
    Read {
        line: usize,
        #[source]
        source: std::io::Error,
    },
}

impl IngestError {
    /// True for per-line problems that count toward the malformed threshold.
    pub fn is_line_error(&self) -> bool {
        matches!(
            self,
            Self::ColumnCountMismatch { .. }
                | Self::CoordinateOutOfRange { .. }
                | Self::CoordinateUnparsable { .. }
                | Self::TimestampUnparsable { .. }
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputFormat {
    /// `user, poi, lat, lon, unix_seconds`
    NativeTsv,
    /// `user, venue, category id, category name, lat, lon, tz offset, UTC time`
    FoursquareTsv,
}

impl InputFormat {
    pub fn columns(self) -> usize {
        match self {
            Self::NativeTsv => 5,
            Self::FoursquareTsv => 8,
        }
    }
}

impl FromStr for InputFormat {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "native-tsv" => Ok(Self::NativeTsv),
            "foursquare-tsv" => Ok(Self::FoursquareTsv),
            other => Err(IngestError::UnknownFormat(other.to_string())),
        }
    }
}

impl fmt::Display for InputFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::NativeTsv => "native-tsv",
            Self::FoursquareTsv => "foursquare-tsv",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckInRecord {
    pub user_id: String,
    pub poi_id: String,
    pub location: LatLon,
    pub timestamp: i64,
}

/// Parsed records plus the malformed lines that were skipped.
#[derive(Debug, Default)]
pub struct ParseReport {
    pub records: Vec<CheckInRecord>,
    pub malformed: Vec<IngestError>,
    pub total_lines: usize,
}

fn parse_coord(line: usize, raw: &str) -> Result<f64, IngestError> {
    raw.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| IngestError::CoordinateUnparsable {
            line,
            value: raw.to_string(),
        })
}

/// Parses one non-empty line. `line` is 1-based, for error messages.
pub fn parse_line(text: &str, format: InputFormat, line: usize) -> Result<CheckInRecord, IngestError> {
    let fields: Vec<&str> = text.split('\t').collect();
    if fields.len() != format.columns() {
        return Err(IngestError::ColumnCountMismatch {
            line,
            expected: format.columns(),
            found: fields.len(),
        });
    }
    let (lat_raw, lon_raw) = match format {
        InputFormat::NativeTsv => (fields[2], fields[3]),
        InputFormat::FoursquareTsv => (fields[4], fields[5]),
    };
    let location = LatLon::new(parse_coord(line, lat_raw)?, parse_coord(line, lon_raw)?);
    if !location.in_bounds() {
        return Err(IngestError::CoordinateOutOfRange {
            line,
            lat: location.lat,
            lon: location.lon,
        });
    }
    let timestamp = match format {
        InputFormat::NativeTsv => fields[4].trim().parse::<i64>().ok(),
        InputFormat::FoursquareTsv => {
            // offset is validated but the UTC string already fixes the instant
            fields[6]
                .trim()
                .parse::<i64>()
                .ok()
                .and_then(|_| DateTime::parse_from_str(fields[7].trim(), "%a %b %d %H:%M:%S %z %Y").ok())
                .map(|t| t.timestamp())
        }
    }
    .filter(|&t| t >= 0)
    .ok_or_else(|| IngestError::TimestampUnparsable {
        line,
        value: match format {
            InputFormat::NativeTsv => fields[4].to_string(),
            InputFormat::FoursquareTsv => format!("{} (offset {})", fields[7], fields[6]),
        },
    })?;
    Ok(CheckInRecord {
        user_id: fields[0].to_string(),
        poi_id: fields[1].to_string(),
        location,
        timestamp,
    })
}

/// Parses a check-in stream in file order. Malformed lines are collected
/// in the report; if they exceed 1% of the non-empty lines the whole parse
/// fails with [`IngestError::TooManyMalformed`].
pub fn parse_checkins(reader: impl BufRead, format: InputFormat) -> Result<ParseReport, IngestError> {
    let mut report = ParseReport::default();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let text = line.map_err(|source| IngestError::Read { line: line_no, source })?;
        let text = text.strip_suffix('\r').unwrap_or(&text);
        if text.trim().is_empty() {
            continue;
        }
        report.total_lines += 1;
        match parse_line(text, format, line_no) {
            Ok(rec) => report.records.push(rec),
            Err(e) => report.malformed.push(e),
        }
    }
    let malformed = report.malformed.len();
    if malformed as f64 > MALFORMED_LINE_THRESHOLD * report.total_lines as f64 {
        return Err(IngestError::TooManyMalformed {
            malformed,
            total: report.total_lines,
        });
    }
    if !report.malformed.is_empty() {
        log::warn!("skipped {malformed} malformed lines of {}", report.total_lines);
    }
    Ok(report)
}

/// A user's chronologically sorted visits.
#[derive(Clone, Debug, PartialEq)]
pub struct UserHistory {
    pub user_index: usize,
    /// `(poi_index, timestamp)`, ascending by timestamp, stable on ties.
    pub visits: Vec<(usize, i64)>,
}

impl UserHistory {
    pub fn pois(&self) -> impl Iterator<Item = usize> + '_ {
        self.visits.iter().map(|&(p, _)| p)
    }
}

/// Output of [`build_histories`].
#[derive(Clone, Debug)]
pub struct Corpus {
    pub histories: Vec<UserHistory>,
    /// Indexed by dense POI index.
    pub poi_coords: Vec<LatLon>,
    pub poi_ids: Vec<String>,
    /// Indexed by dense user index.
    pub user_ids: Vec<String>,
    pub dropped_users: usize,
    pub coordinate_conflicts: usize,
}

/// Groups records into per-user histories.
///
/// POI indices follow first appearance over all records; user indices
/// follow first appearance among users that keep at least two visits.
pub fn build_histories(records: &[CheckInRecord]) -> Result<Corpus, IngestError> {
    if records.is_empty() {
        return Err(IngestError::EmptyCorpus);
    }
    let mut poi_index: HashMap<&str, usize> = HashMap::new();
    let mut poi_coords = Vec::new();
    let mut poi_ids = Vec::new();
    let mut coordinate_conflicts = 0;
    let mut user_order: Vec<&str> = Vec::new();
    let mut by_user: HashMap<&str, Vec<(usize, i64)>> = HashMap::new();

    for rec in records {
        let poi = *poi_index.entry(rec.poi_id.as_str()).or_insert_with(|| {
            poi_coords.push(rec.location);
            poi_ids.push(rec.poi_id.clone());
            poi_coords.len() - 1
        });
        if poi_coords[poi] != rec.location {
            coordinate_conflicts += 1;
        }
        by_user
            .entry(rec.user_id.as_str())
            .or_insert_with(|| {
                user_order.push(rec.user_id.as_str());
                Vec::new()
            })
            .push((poi, rec.timestamp));
    }
    if coordinate_conflicts > 0 {
        log::warn!("{coordinate_conflicts} records disagree with the first coordinates of their POI");
    }

    let mut histories = Vec::new();
    let mut user_ids = Vec::new();
    let mut dropped_users = 0;
    for user in user_order {
        let mut visits = by_user.remove(user).expect("grouped above");
        if visits.len() < 2 {
            dropped_users += 1;
            continue;
        }
        visits.sort_by_key(|&(_, t)| t);
        histories.push(UserHistory {
            user_index: histories.len(),
            visits,
        });
        user_ids.push(user.to_string());
    }
    Ok(Corpus {
        histories,
        poi_coords,
        poi_ids,
        user_ids,
        dropped_users,
        coordinate_conflicts,
    })
}

/// One CTR example: does the user visit `target` next after `context`?
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub user_index: usize,
    pub context: Vec<usize>,
    pub target: usize,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
    pub poi_coords: Vec<LatLon>,
    pub num_users: usize,
}

impl DatasetSplit {
    pub fn num_pois(&self) -> usize {
        self.poi_coords.len()
    }
}

/// Uniform draw from `0..num_pois` minus the sorted, deduplicated `visited`.
fn draw_unvisited(rng: &mut impl Rng, visited: &[usize], num_pois: usize) -> usize {
    let mut idx = rng.gen_range(0..num_pois - visited.len());
    for &v in visited {
        if v <= idx {
            idx += 1;
        } else {
            break;
        }
    }
    idx
}

fn truncate(prefix: &[(usize, i64)], max_seq_len: usize) -> Vec<usize> {
    let start = prefix.len().saturating_sub(max_seq_len);
    prefix[start..].iter().map(|&(p, _)| p).collect()
}

/// Emits one positive and one negative sample per prefix of every history.
///
/// The negative for prefix length `t` of user `u` is drawn uniformly from
/// the POIs `u` never visits, with a generator seeded by `(seed, u, t)`.
/// Each user's final pair goes to evaluation; evaluation pairs are shuffled
/// with `seed` and halved into test and validation.
pub fn generate_samples(
    histories: &[UserHistory],
    poi_coords: &[LatLon],
    seed: u64,
    max_seq_len: usize,
) -> Result<DatasetSplit, IngestError> {
    let num_pois = poi_coords.len();
    let max_seq_len = max_seq_len.max(1);
    let mut train = Vec::new();
    let mut eval_pairs = Vec::new();
    for h in histories {
        let mut visited: Vec<usize> = h.pois().collect();
        visited.sort_unstable();
        visited.dedup();
        if visited.len() >= num_pois {
            return Err(IngestError::NoNegativeCandidates { user: h.user_index });
        }
        let last = h.visits.len() - 1;
        for t in 1..=last {
            let context = truncate(&h.visits[..t], max_seq_len);
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, h.user_index as u64, t as u64]));
            let negative = draw_unvisited(&mut rng, &visited, num_pois);
            let pos = Sample {
                user_index: h.user_index,
                context: context.clone(),
                target: h.visits[t].0,
                label: 1,
            };
            let neg = Sample {
                user_index: h.user_index,
                context,
                target: negative,
                label: 0,
            };
            if t == last {
                eval_pairs.push([pos, neg]);
            } else {
                train.push(pos);
                train.push(neg);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, EVAL_SHUFFLE_TAG]));
    eval_pairs.shuffle(&mut rng);
    let n_test = eval_pairs.len().div_ceil(2);
    let mut test = Vec::with_capacity(2 * n_test);
    let mut validation = Vec::new();
    for (i, pair) in eval_pairs.into_iter().enumerate() {
        if i < n_test {
            test.extend(pair);
        } else {
            validation.extend(pair);
        }
    }
    Ok(DatasetSplit {
        train,
        validation,
        test,
        poi_coords: poi_coords.to_vec(),
        num_users: histories.len(),
    })
}

/// Keeps `ceil(fraction * n_u)` training samples of each user, chosen
/// without replacement; evaluation sets are untouched.
pub fn train_fraction_slice(split: &DatasetSplit, fraction: f64, seed: u64) -> Result<DatasetSplit, IngestError> {
    let fifths = TRAIN_FRACTIONS
        .iter()
        .position(|&f| (f - fraction).abs() < 1e-9)
        .map(|i| i + 1)
        .ok_or(IngestError::InvalidFraction(fraction))?;
    let mut per_user: Vec<Vec<usize>> = vec![Vec::new(); split.num_users];
    for (i, s) in split.train.iter().enumerate() {
        if s.user_index >= per_user.len() {
            per_user.resize(s.user_index + 1, Vec::new());
        }
        per_user[s.user_index].push(i);
    }
    let mut keep = vec![false; split.train.len()];
    for (user, idx) in per_user.iter().enumerate() {
        let n = idx.len();
        let k = (fifths * n).div_ceil(5);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, SLICE_TAG, user as u64]));
        for j in rand::seq::index::sample(&mut rng, n, k) {
            keep[idx[j]] = true;
        }
    }
    let train = split
        .train
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(s, _)| s.clone())
        .collect();
    Ok(DatasetSplit {
        train,
        ..split.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(user: &str, poi: &str, t: i64) -> CheckInRecord {
        CheckInRecord {
            user_id: user.into(),
            poi_id: poi.into(),
            location: LatLon::new(35.0, 139.0),
            timestamp: t,
        }
    }

    #[test]
    fn native_line_maps_fields() {
        let r = parse_line("u1\tp9\t35.6812\t139.7671\t1349870400", InputFormat::NativeTsv, 1).unwrap();
        assert_eq!(r.user_id, "u1");
        assert_eq!(r.poi_id, "p9");
        assert_eq!(r.location, LatLon::new(35.6812, 139.7671));
        assert_eq!(r.timestamp, 1349870400);
    }

    #[test]
    fn out_of_range_latitude() {
        let e = parse_line("u1\tp9\t95.0\t139.7671\t1", InputFormat::NativeTsv, 3).unwrap_err();
        assert!(matches!(e, IngestError::CoordinateOutOfRange { line: 3, .. }));
    }

    #[test]
    fn column_count_and_timestamp_errors() {
        assert!(matches!(
            parse_line("u1\tp9\t35.0", InputFormat::NativeTsv, 1),
            Err(IngestError::ColumnCountMismatch { expected: 5, found: 3, .. })
        ));
        assert!(matches!(
            parse_line("u1\tp9\t35.0\t139.0\tyesterday", InputFormat::NativeTsv, 1),
            Err(IngestError::TimestampUnparsable { .. })
        ));
        assert!(matches!(
            parse_line("u1\tp9\t35.0\t139.0\t-5", InputFormat::NativeTsv, 1),
            Err(IngestError::TimestampUnparsable { .. })
        ));
    }

    #[test]
    fn foursquare_line() {
        let line = "470\t49bbd6c0f964a520f4531fe3\t4bf58dd8d48988d127951735\tArts & Crafts Store\t40.719810375488535\t-74.00258103213994\t-240\tTue Apr 03 18:00:09 +0000 2012";
        let r = parse_line(line, InputFormat::FoursquareTsv, 1).unwrap();
        assert_eq!(r.user_id, "470");
        assert_eq!(r.timestamp, 1333476009);
        assert_eq!(r.location.lon, -74.00258103213994);
    }

    #[test]
    fn malformed_threshold() {
        let mut good: String = (0..200).map(|i| format!("u\tp{i}\t1.0\t2.0\t{i}\n")).collect();
        good.push_str("broken line\n");
        let report = parse_checkins(good.as_bytes(), InputFormat::NativeTsv).unwrap();
        assert_eq!(report.records.len(), 200);
        assert_eq!(report.malformed.len(), 1);

        let bad = "u\tp\t1.0\t2.0\t1\nnope\n";
        assert!(matches!(
            parse_checkins(bad.as_bytes(), InputFormat::NativeTsv),
            Err(IngestError::TooManyMalformed { malformed: 1, total: 2 })
        ));
    }

    #[test]
    fn histories_sort_and_filter() {
        let records = vec![
            rec("a", "pa", 3),
            rec("solo", "px", 1),
            rec("a", "pb", 1),
            rec("a", "pc", 2),
        ];
        let c = build_histories(&records).unwrap();
        assert_eq!(c.dropped_users, 1);
        assert_eq!(c.user_ids, vec!["a"]);
        // pa=0, px=1, pb=2, pc=3
        assert_eq!(c.histories[0].visits, vec![(2, 1), (3, 2), (0, 3)]);
        assert_eq!(c.poi_coords.len(), 4);
    }

    #[test]
    fn equal_timestamps_keep_file_order() {
        let records = vec![rec("a", "p1", 5), rec("a", "p2", 5), rec("a", "p0", 1)];
        let c = build_histories(&records).unwrap();
        let order: Vec<usize> = c.histories[0].pois().collect();
        assert_eq!(order, vec![2, 0, 1]);
    }

    #[test]
    fn conflicting_coordinates_counted() {
        let mut second = rec("a", "p1", 2);
        second.location = LatLon::new(1.0, 1.0);
        let c = build_histories(&[rec("a", "p1", 1), second]).unwrap();
        assert_eq!(c.coordinate_conflicts, 1);
        assert_eq!(c.poi_coords[0], LatLon::new(35.0, 139.0));
    }

    #[test]
    fn empty_corpus() {
        assert!(matches!(build_histories(&[]), Err(IngestError::EmptyCorpus)));
    }

    fn coords(n: usize) -> Vec<LatLon> {
        (0..n).map(|i| LatLon::new(0.0, i as f64 * 0.001)).collect()
    }

    #[test]
    fn three_visit_history_split() {
        let h = UserHistory {
            user_index: 0,
            visits: vec![(0, 1), (1, 2), (2, 3)],
        };
        let split = generate_samples(&[h], &coords(6), 7, DEFAULT_MAX_SEQ_LEN).unwrap();
        assert_eq!(split.train.len(), 2);
        assert_eq!(split.train[0].context, vec![0]);
        assert_eq!(split.train[0].target, 1);
        assert_eq!(split.train[0].label, 1);
        assert_eq!(split.train[1].label, 0);
        assert!(split.train[1].target >= 3);
        assert_eq!(split.test.len(), 2);
        assert!(split.validation.is_empty());
        assert_eq!(split.test[0].context, vec![0, 1]);
        assert_eq!(split.test[0].target, 2);
    }

    #[test]
    fn negative_draws_are_uniform_over_unvisited() {
        let visited = [0, 1, 2];
        let mut counts = [0usize; 6];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = 30_000;
        for _ in 0..draws {
            counts[draw_unvisited(&mut rng, &visited, 6)] += 1;
        }
        assert_eq!(&counts[..3], &[0, 0, 0]);
        for &c in &counts[3..] {
            let freq = c as f64 / draws as f64;
            assert!((freq - 1.0 / 3.0).abs() < 0.02, "{freq}");
        }
        // Pearson chi-square with 2 dof; 13.8 is the 0.001 critical value
        let expected = draws as f64 / 3.0;
        let chi2: f64 = counts[3..].iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 13.8, "{chi2}");
    }

    #[test]
    fn no_negative_candidates() {
        let h = UserHistory {
            user_index: 4,
            visits: vec![(0, 1), (1, 2)],
        };
        assert!(matches!(
            generate_samples(&[h], &coords(2), 1, 10),
            Err(IngestError::NoNegativeCandidates { user: 4 })
        ));
    }

    #[test]
    fn contexts_truncate_to_most_recent() {
        let h = UserHistory {
            user_index: 0,
            visits: (0..6).map(|i| (i, i as i64)).collect(),
        };
        let split = generate_samples(&[h], &coords(10), 1, 3).unwrap();
        let last_train = &split.train[split.train.len() - 2];
        assert_eq!(last_train.context, vec![1, 2, 3]);
        assert_eq!(last_train.target, 4);
    }

    #[test]
    fn fraction_slice() {
        let h = UserHistory {
            user_index: 0,
            visits: (0..7).map(|i| (i, i as i64)).collect(),
        };
        let split = generate_samples(&[h], &coords(20), 3, 100).unwrap();
        assert_eq!(split.train.len(), 10);
        let full = train_fraction_slice(&split, 1.0, 9).unwrap();
        assert_eq!(full, split);
        let fifth = train_fraction_slice(&split, 0.2, 9).unwrap();
        assert_eq!(fifth.train.len(), 2);
        assert_eq!(fifth.test, split.test);
        let sixty = train_fraction_slice(&split, 0.6, 9).unwrap();
        assert_eq!(sixty.train.len(), 6);
        assert!(matches!(
            train_fraction_slice(&split, 0.5, 9),
            Err(IngestError::InvalidFraction(_))
        ));
    }

    #[test]
    fn format_names_round_trip() {
        for f in [InputFormat::NativeTsv, InputFormat::FoursquareTsv] {
            assert_eq!(f.to_string().parse::<InputFormat>().unwrap(), f);
        }
        assert!("csv".parse::<InputFormat>().is_err());
    }
}
