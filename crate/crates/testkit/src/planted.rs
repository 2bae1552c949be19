//! Synthetic check-ins with two planted signals.
//!
//! POIs are scattered uniformly over a square and each belongs to a hidden
//! category. Categories follow a fixed global successor chain. Every next
//! visit of a user is either a geographic hop (a POI close to the previous
//! visit) or a sequential step (a POI of the successor category near the
//! user's home).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::oracle::haversine_km;

const KM_PER_DEGREE: f64 = 111.195;

#[derive(Clone, Debug)]
pub struct PlantedConfig {
    pub num_pois: usize,
    pub num_users: usize,
    pub visits_per_user: usize,
    pub num_categories: usize,
    /// Side of the square in km.
    pub side_km: f64,
    pub center: (f64, f64),
    /// Probability that a visit is a geographic hop.
    pub geo_share: f64,
    /// Geographic hops land within this distance of the previous visit.
    pub hop_km: f64,
    /// Probability that a sequential step follows the chain rather than
    /// picking a random category.
    pub chain_prob: f64,
    /// Sequential steps land within this distance of home.
    pub home_km: f64,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            num_pois: 2000,
            num_users: 500,
            visits_per_user: 20,
            num_categories: 20,
            side_km: 20.0,
            center: (35.0, 139.0),
            geo_share: 0.5,
            hop_km: 1.0,
            chain_prob: 0.9,
            home_km: 5.0,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PlantedData {
    pub coords: Vec<(f64, f64)>,
    pub categories: Vec<usize>,
    /// `successor[c]` is the planted next category after `c`.
    pub successor: Vec<usize>,
    /// Per user, POI indices in visit order.
    pub visits: Vec<Vec<usize>>,
}

impl PlantedData {
    /// Native 5-column TSV (user, poi, lat, lon, unix seconds), one line per
    /// visit, users interleaved so file order differs from visit order.
    pub fn to_native_tsv(&self) -> String {
        let mut lines = Vec::new();
        for (u, visits) in self.visits.iter().enumerate() {
            for (t, &p) in visits.iter().enumerate() {
                let ts = 1_600_000_000 + (t as i64) * 3600 + u as i64;
                let (lat, lon) = self.coords[p];
                lines.push((t, u, format!("u{u}\tp{p}\t{lat:?}\t{lon:?}\t{ts}")));
            }
        }
        lines.sort_by_key(|&(t, u, _)| (t, u));
        let mut out = String::new();
        for (_, _, l) in lines {
            out.push_str(&l);
            out.push('\n');
        }
        out
    }
}

fn within(coords: &[(f64, f64)], from: (f64, f64), km: f64) -> Vec<usize> {
    (0..coords.len()).filter(|&i| haversine_km(coords[i], from) <= km).collect()
}

fn nearest(coords: &[(f64, f64)], from: (f64, f64), candidates: impl Iterator<Item = usize>) -> usize {
    candidates
        .min_by(|&a, &b| haversine_km(coords[a], from).total_cmp(&haversine_km(coords[b], from)))
        .expect("non-empty candidates")
}

pub fn generate(cfg: &PlantedConfig) -> PlantedData {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let half = cfg.side_km / 2.0;
    let km_per_lon = KM_PER_DEGREE * cfg.center.0.to_radians().cos();
    let coords: Vec<(f64, f64)> = (0..cfg.num_pois)
        .map(|_| {
            let dy = rng.gen_range(-half..half);
            let dx = rng.gen_range(-half..half);
            (cfg.center.0 + dy / KM_PER_DEGREE, cfg.center.1 + dx / km_per_lon)
        })
        .collect();
    let categories: Vec<usize> = (0..cfg.num_pois).map(|i| i % cfg.num_categories).collect();
    let mut cycle: Vec<usize> = (0..cfg.num_categories).collect();
    cycle.shuffle(&mut rng);
    let mut successor = vec![0; cfg.num_categories];
    for (i, &c) in cycle.iter().enumerate() {
        successor[c] = cycle[(i + 1) % cycle.len()];
    }

    let visits = (0..cfg.num_users)
        .map(|_| {
            let home = coords[rng.gen_range(0..cfg.num_pois)];
            let near_home = within(&coords, home, cfg.home_km);
            let mut seq = vec![*near_home.choose(&mut rng).expect("home is a POI")];
            while seq.len() < cfg.visits_per_user {
                let last = *seq.last().unwrap();
                let next = if rng.gen_bool(cfg.geo_share) {
                    let hops: Vec<usize> = within(&coords, coords[last], cfg.hop_km).into_iter().filter(|&p| p != last).collect();
                    match hops.choose(&mut rng) {
                        Some(&p) => p,
                        None => nearest(&coords, coords[last], (0..cfg.num_pois).filter(|&p| p != last)),
                    }
                } else {
                    let category = if rng.gen_bool(cfg.chain_prob) {
                        successor[categories[last]]
                    } else {
                        rng.gen_range(0..cfg.num_categories)
                    };
                    let options: Vec<usize> = near_home.iter().copied().filter(|&p| categories[p] == category).collect();
                    match options.choose(&mut rng) {
                        Some(&p) => p,
                        None => nearest(&coords, home, (0..cfg.num_pois).filter(|&p| categories[p] == category)),
                    }
                };
                seq.push(next);
            }
            seq
        })
        .collect();
    PlantedData {
        coords,
        categories,
        successor,
        visits,
    }
}
