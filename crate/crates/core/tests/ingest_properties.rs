//! Sample-generation invariants and bundle round trips.

use std::collections::HashSet;

use disenpoi::bundle::{read_bundle, write_bundle, Bundle, BundleMeta, SplitCounts, BUNDLE_FORMAT};
use disenpoi::graphs::LatLon;
use disenpoi::ingest::{build_histories, generate_samples, CheckInRecord};
use proptest::prelude::*;

fn records(visits: &[Vec<u8>], num_pois: u8) -> Vec<CheckInRecord> {
    let mut out = Vec::new();
    for (u, seq) in visits.iter().enumerate() {
        for (t, &p) in seq.iter().enumerate() {
            let p = p % num_pois;
            out.push(CheckInRecord {
                user_id: format!("u{u}"),
                poi_id: format!("p{p}"),
                location: LatLon::new(10.0 + f64::from(p) * 0.01, 20.0 - f64::from(p) * 0.003),
                timestamp: (t * 10 + u) as i64,
            });
        }
    }
    // a filler user so every user has unvisited POIs
    for p in 0..num_pois {
        out.push(CheckInRecord {
            user_id: "filler".into(),
            poi_id: format!("p{p}"),
            location: LatLon::new(10.0 + f64::from(p) * 0.01, 20.0 - f64::from(p) * 0.003),
            timestamp: 0,
        });
    }
    // a user with two POIs of their own keeps negatives possible for everyone
    for (i, id) in ["q0", "q1"].into_iter().enumerate() {
        out.push(CheckInRecord {
            user_id: "lonely".into(),
            poi_id: id.into(),
            location: LatLon::new(0.0, 0.0),
            timestamp: i as i64,
        });
    }
    out
}

fn histories() -> impl Strategy<Value = Vec<Vec<u8>>> {
    prop::collection::vec(prop::collection::vec(0u8..6, 2..9), 1..8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn negatives_unvisited_and_counts_balance(visits in histories(), seed in any::<u64>()) {
        let corpus = build_histories(&records(&visits, 8)).unwrap();
        let split = generate_samples(&corpus.histories, &corpus.poi_coords, seed, 100).unwrap();
        let all: Vec<_> = split.train.iter().chain(&split.validation).chain(&split.test).collect();
        let positives = all.iter().filter(|s| s.label == 1).count();
        let expected: usize = corpus.histories.iter().map(|h| h.visits.len() - 1).sum();
        prop_assert_eq!(positives, expected);
        prop_assert_eq!(all.len(), 2 * positives);
        for s in all.iter().filter(|s| s.label == 0) {
            let visited: HashSet<usize> = corpus.histories[s.user_index].pois().collect();
            prop_assert!(!visited.contains(&s.target));
        }
        let users: HashSet<usize> = all.iter().map(|s| s.user_index).collect();
        prop_assert_eq!(users.len(), corpus.histories.len());
        prop_assert!(users.iter().all(|&u| u < corpus.histories.len()));
        prop_assert!(all.iter().all(|s| s.target < corpus.poi_coords.len()));
        let again = generate_samples(&corpus.histories, &corpus.poi_coords, seed, 100).unwrap();
        prop_assert_eq!(again, split);
    }

    #[test]
    fn bundle_round_trip_is_exact(visits in histories(), seed in any::<u64>()) {
        let corpus = build_histories(&records(&visits, 10)).unwrap();
        let split = generate_samples(&corpus.histories, &corpus.poi_coords, seed, 4).unwrap();
        let bundle = Bundle {
            meta: BundleMeta {
                format: BUNDLE_FORMAT.into(),
                input_format: "native-tsv".into(),
                seed,
                max_seq_len: 4,
                num_users: split.num_users,
                num_pois: split.num_pois(),
                samples: SplitCounts { train: split.train.len(), valid: split.validation.len(), test: split.test.len() },
                total_lines: 0,
                malformed_lines: 0,
                dropped_users: corpus.dropped_users,
                coordinate_conflicts: 0,
            },
            split,
            poi_ids: corpus.poi_ids.clone(),
        };
        let dir = tempfile::tempdir().unwrap();
        write_bundle(dir.path(), &bundle).unwrap();
        prop_assert_eq!(read_bundle(dir.path()).unwrap(), bundle);
    }
}
