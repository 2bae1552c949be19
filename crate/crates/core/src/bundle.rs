//! On-disk dataset bundle produced by `prepare`.
//!
//! ```text
//! samples.train.jsonl   one Sample per line
//! samples.valid.jsonl
//! samples.test.jsonl
//! pois.tsv              poi_index, lat, lon, original id
//! meta.json             BundleMeta
//! geo_graph.bin         optional cached geographical graph
//! ```

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphs::{build_geo_graph, GeoGraph, GraphError, LatLon};
use crate::ingest::{DatasetSplit, Sample};

pub const BUNDLE_FORMAT: &str = "disenpoi-bundle/1";
pub const TRAIN_FILE: &str = "samples.train.jsonl";
pub const VALID_FILE: &str = "samples.valid.jsonl";
pub const TEST_FILE: &str = "samples.test.jsonl";
pub const POIS_FILE: &str = "pois.tsv";
pub const META_FILE: &str = "meta.json";
pub const GEO_GRAPH_FILE: &str = "geo_graph.bin";

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {message}")]
    Invalid { path: PathBuf, line: usize, message: String },
    #[error("bundle inconsistent: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

impl BundleError {
    fn io(path: &Path) -> impl FnOnce(io::Error) -> Self + '_ {
        move |source| BundleError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, BundleError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub format: String,
    pub input_format: String,
    pub seed: u64,
    pub max_seq_len: usize,
    pub num_users: usize,
    pub num_pois: usize,
    pub samples: SplitCounts,
    pub total_lines: usize,
    pub malformed_lines: usize,
    pub dropped_users: usize,
    pub coordinate_conflicts: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub meta: BundleMeta,
    pub split: DatasetSplit,
    pub poi_ids: Vec<String>,
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic<E: From<io::Error>>(
    path: &Path,
    write: impl FnOnce(&mut File) -> std::result::Result<(), E>,
) -> std::result::Result<(), E> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut file = File::create(&tmp)?;
        write(&mut file)?;
        file.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

fn write_samples(path: &Path, samples: &[Sample]) -> Result<()> {
    write_atomic(path, |f| {
        let mut w = BufWriter::new(f);
        for s in samples {
            serde_json::to_writer(&mut w, s).map_err(io::Error::other)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    })
    .map_err(BundleError::io(path))
}

fn read_samples(path: &Path) -> Result<Vec<Sample>> {
    let file = File::open(path).map_err(BundleError::io(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(BundleError::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let s = serde_json::from_str(&line).map_err(|e| BundleError::Invalid {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(s);
    }
    Ok(out)
}

pub fn write_bundle(dir: &Path, bundle: &Bundle) -> Result<()> {
    fs::create_dir_all(dir).map_err(BundleError::io(dir))?;
    let split = &bundle.split;
    write_samples(&dir.join(TRAIN_FILE), &split.train)?;
    write_samples(&dir.join(VALID_FILE), &split.validation)?;
    write_samples(&dir.join(TEST_FILE), &split.test)?;

    let pois = dir.join(POIS_FILE);
    write_atomic(&pois, |f| {
        let mut w = BufWriter::new(f);
        for (i, c) in split.poi_coords.iter().enumerate() {
            let id = bundle.poi_ids.get(i).map_or("", String::as_str);
            writeln!(w, "{i}\t{:?}\t{:?}\t{id}", c.lat, c.lon)?;
        }
        w.flush()
    })
    .map_err(BundleError::io(&pois))?;

    let meta = dir.join(META_FILE);
    write_atomic(&meta, |f| {
        serde_json::to_writer_pretty(&mut *f, &bundle.meta).map_err(io::Error::other)?;
        f.write_all(b"\n")
    })
    .map_err(BundleError::io(&meta))
}

fn read_pois(path: &Path) -> Result<(Vec<LatLon>, Vec<String>)> {
    let file = File::open(path).map_err(BundleError::io(path))?;
    let mut coords = Vec::new();
    let mut ids = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(BundleError::io(path))?;
        if line.is_empty() {
            continue;
        }
        let invalid = |message: String| BundleError::Invalid {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(invalid(format!("expected at least 3 columns, got {}", fields.len())));
        }
        let index: usize = fields[0].parse().map_err(|e| invalid(format!("poi index: {e}")))?;
        if index != coords.len() {
            return Err(invalid(format!("expected poi index {}, got {index}", coords.len())));
        }
        let lat: f64 = fields[1].parse().map_err(|e| invalid(format!("latitude: {e}")))?;
        let lon: f64 = fields[2].parse().map_err(|e| invalid(format!("longitude: {e}")))?;
        let c = LatLon::new(lat, lon);
        if !c.in_bounds() {
            return Err(invalid(format!("coordinate ({lat}, {lon}) out of range")));
        }
        coords.push(c);
        ids.push(fields.get(3).copied().unwrap_or_default().to_string());
    }
    Ok((coords, ids))
}

pub fn read_meta(dir: &Path) -> Result<BundleMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(BundleError::io(&path))?;
    let meta: BundleMeta = serde_json::from_str(&text).map_err(|e| BundleError::Invalid {
        path: path.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if meta.format != BUNDLE_FORMAT {
        return Err(BundleError::Inconsistent(format!("unknown bundle format {:?}", meta.format)));
    }
    Ok(meta)
}

/// Reads and cross-checks a bundle.
pub fn read_bundle(dir: &Path) -> Result<Bundle> {
    let meta = read_meta(dir)?;
    let (poi_coords, poi_ids) = read_pois(&dir.join(POIS_FILE))?;
    let split = DatasetSplit {
        train: read_samples(&dir.join(TRAIN_FILE))?,
        validation: read_samples(&dir.join(VALID_FILE))?,
        test: read_samples(&dir.join(TEST_FILE))?,
        poi_coords,
        num_users: meta.num_users,
    };
    if split.num_pois() != meta.num_pois {
        return Err(BundleError::Inconsistent(format!(
            "meta lists {} POIs, {POIS_FILE} has {}",
            meta.num_pois,
            split.num_pois()
        )));
    }
    let counts = (split.train.len(), split.validation.len(), split.test.len());
    if counts != (meta.samples.train, meta.samples.valid, meta.samples.test) {
        return Err(BundleError::Inconsistent(format!("sample counts {counts:?} disagree with meta")));
    }
    for s in split.train.iter().chain(&split.validation).chain(&split.test) {
        if s.context.is_empty() || s.label > 1 {
            return Err(BundleError::Inconsistent("sample with empty context or non-binary label".into()));
        }
        if let Some(&v) = s.context.iter().chain([&s.target]).find(|&&v| v >= meta.num_pois) {
            return Err(BundleError::Inconsistent(format!("sample references POI {v}")));
        }
        if s.user_index >= meta.num_users {
            return Err(BundleError::Inconsistent(format!("sample references user {}", s.user_index)));
        }
    }
    Ok(Bundle { meta, split, poi_ids })
}

pub fn write_geo_graph(dir: &Path, graph: &GeoGraph) -> Result<()> {
    let path = dir.join(GEO_GRAPH_FILE);
    write_atomic(&path, |f| {
        let mut w = BufWriter::new(f);
        graph.write_to(&mut w)?;
        w.flush()
    })
    .map_err(BundleError::io(&path))
}

/// The cached graph when it was built with `delta_d` over the same POIs,
/// otherwise a freshly built one.
pub fn load_or_build_geo_graph(dir: &Path, coords: &[LatLon], delta_d: f64) -> Result<GeoGraph> {
    let path = dir.join(GEO_GRAPH_FILE);
    if let Ok(file) = File::open(&path) {
        match GeoGraph::read_from(BufReader::new(file)) {
            Ok(g) if g.num_nodes() == coords.len() && g.delta_d() == delta_d => return Ok(g),
            Ok(_) => log::info!("cached geo graph does not match; rebuilding"),
            Err(e) => log::warn!("ignoring unreadable {}: {e}", path.display()),
        }
    }
    Ok(build_geo_graph(coords, delta_d)?)
}
