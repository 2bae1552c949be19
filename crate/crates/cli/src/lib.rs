//! Subcommands of the `disenpoi` binary.

pub mod error;
pub mod manifest;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use disenpoi::bundle::{self, write_atomic, Bundle, BundleMeta, SplitCounts, BUNDLE_FORMAT};
use disenpoi::evaluator::{disentanglement_diagnostics, evaluate_split, mean_recommendation_distance};
use disenpoi::graphs::build_geo_graph;
use disenpoi::ingest::{self, build_histories, generate_samples, parse_checkins, InputFormat, TRAIN_FRACTIONS};
use disenpoi::model::{load_checkpoint, save_checkpoint};
use disenpoi::trainer::{fit, truncate_contexts, TrainConfig};

pub use error::{CliError, Result, Status};
use manifest::{hash_dir, hash_file, RunManifest, MANIFEST_FILE};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train.log.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.tsv";

#[derive(Debug, Parser)]
#[command(name = "disenpoi", version, about = "Dual-graph POI click-through-rate model")]
pub struct Cli {
    /// Worker threads for dense kernels; results do not depend on it.
    #[arg(long, global = true, env = "DISENPOI_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse check-ins and write a dataset bundle.
    Prepare(PrepareArgs),
    /// Train a model on a bundle.
    Train(TrainArgs),
    /// Score a split with a trained checkpoint.
    Evaluate(EvaluateArgs),
    /// Recompute the hashes recorded in a run manifest.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_parser = ["native-tsv", "foursquare-tsv"])]
    pub format: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = ingest::DEFAULT_MAX_SEQ_LEN)]
    pub max_seq_len: usize,
    /// Edge threshold in km for the cached geographical graph.
    #[arg(long, default_value_t = 1.0)]
    pub delta_d: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// JSON config; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "test", value_parser = ["test", "valid"])]
    pub split: String,
    /// Also report disentanglement cosines and recommendation distance,
    /// and export representations.
    #[arg(long)]
    pub diagnostics: bool,
    /// Tag the report with the training fraction of the checkpoint.
    #[arg(long)]
    pub train_fraction: Option<f64>,
    /// Recommendation list length for the distance diagnostic.
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    /// Output directory; defaults to the checkpoint's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Directory holding a run manifest.
    pub dir: PathBuf,
}

/// Sizes the global rayon pool. Must run before any parallel work.
pub fn init_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::validation(anyhow::anyhow!("--threads must be positive")));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(CliError::io)?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    init_threads(cli.threads)?;
    match cli.command {
        Command::Prepare(a) => prepare(&a),
        Command::Train(a) => train(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Verify(a) => verify(&a),
    }
}

struct Clock {
    started_at: String,
    start: Instant,
}

impl Clock {
    fn start() -> Self {
        Self {
            started_at: chrono::Utc::now().to_rfc3339(),
            start: Instant::now(),
        }
    }
}

struct ManifestParts<'a> {
    command: &'static str,
    config_path: Option<&'a Path>,
    data_path: Option<&'a Path>,
    output_dir: &'a Path,
    seed: u64,
    inputs: BTreeMap<String, String>,
    outputs: &'a [&'a str],
    settings: serde_json::Value,
}

fn finish(clock: Clock, parts: ManifestParts<'_>) -> Result<()> {
    let mut outputs = BTreeMap::new();
    for name in parts.outputs {
        outputs.insert(name.to_string(), hash_file(&parts.output_dir.join(name))?);
    }
    let m = RunManifest {
        command: parts.command.to_string(),
        config_path: parts.config_path.map(Path::to_path_buf),
        data_path: parts.data_path.map(Path::to_path_buf),
        output_dir: parts.output_dir.to_path_buf(),
        seed: parts.seed,
        inputs: parts.inputs,
        outputs,
        settings: parts.settings,
        started_at: clock.started_at,
        finished_at: chrono::Utc::now().to_rfc3339(),
        wall_clock_secs: clock.start.elapsed().as_secs_f64(),
    };
    m.write(parts.output_dir)
        .map_err(|e| CliError::io(e).context(format!("writing {MANIFEST_FILE}")))
}

fn input_hashes(paths: &[&Path]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for p in paths {
        out.insert(p.display().to_string(), hash_file(p).map_err(|e| CliError::io(e).context(p.display().to_string()))?);
    }
    Ok(out)
}

fn bundle_hashes(dir: &Path) -> Result<BTreeMap<String, String>> {
    let files = hash_dir(dir, &[MANIFEST_FILE]).map_err(|e| CliError::io(e).context(dir.display().to_string()))?;
    Ok(files
        .into_iter()
        .map(|(name, h)| (dir.join(name).display().to_string(), h))
        .collect())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(e).context(format!("creating {}", dir.display())))
}

pub fn prepare(a: &PrepareArgs) -> Result<()> {
    let clock = Clock::start();
    let format: InputFormat = a.format.parse()?;
    let file = File::open(&a.input).map_err(|e| CliError::io(e).context(format!("opening {}", a.input.display())))?;
    let report = parse_checkins(BufReader::new(file), format)?;
    let corpus = build_histories(&report.records)?;
    let split = generate_samples(&corpus.histories, &corpus.poi_coords, a.seed, a.max_seq_len)?;
    let graph = build_geo_graph(&split.poi_coords, a.delta_d).map_err(CliError::validation)?;
    let meta = BundleMeta {
        format: BUNDLE_FORMAT.into(),
        input_format: format.to_string(),
        seed: a.seed,
        max_seq_len: a.max_seq_len,
        num_users: split.num_users,
        num_pois: split.num_pois(),
        samples: SplitCounts {
            train: split.train.len(),
            valid: split.validation.len(),
            test: split.test.len(),
        },
        total_lines: report.total_lines,
        malformed_lines: report.malformed.len(),
        dropped_users: corpus.dropped_users,
        coordinate_conflicts: corpus.coordinate_conflicts,
    };
    log::info!(
        "{} users, {} POIs, {} train / {} valid / {} test samples, {} geo edges",
        meta.num_users,
        meta.num_pois,
        meta.samples.train,
        meta.samples.valid,
        meta.samples.test,
        graph.num_edges()
    );
    let bundle = Bundle {
        meta,
        split,
        poi_ids: corpus.poi_ids,
    };
    create_dir(&a.out)?;
    bundle::write_bundle(&a.out, &bundle)?;
    bundle::write_geo_graph(&a.out, &graph)?;
    finish(
        clock,
        ManifestParts {
            command: "prepare",
            config_path: None,
            data_path: Some(&a.input),
            output_dir: &a.out,
            seed: a.seed,
            inputs: input_hashes(&[&a.input])?,
            outputs: &[
                bundle::TRAIN_FILE,
                bundle::VALID_FILE,
                bundle::TEST_FILE,
                bundle::POIS_FILE,
                bundle::META_FILE,
                bundle::GEO_GRAPH_FILE,
            ],
            settings: json!({
                "format": format,
                "seed": a.seed,
                "max_seq_len": a.max_seq_len,
                "delta_d": a.delta_d,
            }),
        },
    )
}

pub fn read_config(path: Option<&Path>) -> Result<TrainConfig> {
    let Some(path) = path else {
        return Ok(TrainConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::io(e).context(format!("reading {}", path.display())))?;
    let config: TrainConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::validation(e).context(format!("parsing {}", path.display())))?;
    config.validate()?;
    Ok(config)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let clock = Clock::start();
    let config = read_config(a.config.as_deref())?;
    let bundle = bundle::read_bundle(&a.data)?;
    let graph = bundle::load_or_build_geo_graph(&a.data, &bundle.split.poi_coords, config.delta_d)?;
    let mut inputs = bundle_hashes(&a.data)?;
    if let Some(c) = &a.config {
        inputs.extend(input_hashes(&[c])?);
    }

    let result = fit(&config, &bundle.split, &graph, |_| {})?;
    create_dir(&a.out)?;
    let metadata = json!({
        "seed": config.seed,
        "best_epoch": result.best_epoch,
        "epochs": config.epochs,
        "train_fraction": config.train_fraction,
        "max_seq_len": config.max_seq_len,
        "bundle_seed": bundle.meta.seed,
    });
    save_checkpoint(&a.out.join(CHECKPOINT_FILE), &result.model, metadata)?;
    let log_path = a.out.join(TRAIN_LOG_FILE);
    write_atomic(&log_path, |f| {
        let mut w = BufWriter::new(f);
        for entry in &result.log {
            serde_json::to_writer(&mut w, entry).map_err(std::io::Error::other)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    })
    .map_err(|e| CliError::io(e).context(format!("writing {}", log_path.display())))?;
    if let Some(best) = result.best_epoch {
        log::info!("best epoch {best}, validation AUC {:.5}", result.log[best].val_auc);
    }
    finish(
        clock,
        ManifestParts {
            command: "train",
            config_path: a.config.as_deref(),
            data_path: Some(&a.data),
            output_dir: &a.out,
            seed: config.seed,
            inputs,
            outputs: &[CHECKPOINT_FILE, TRAIN_LOG_FILE],
            settings: serde_json::to_value(&config).map_err(CliError::io)?,
        },
    )
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let clock = Clock::start();
    if a.batch_size == 0 || a.top_k == 0 {
        return Err(CliError::validation(anyhow::anyhow!("--batch-size and --top-k must be positive")));
    }
    if let Some(f) = a.train_fraction {
        if !TRAIN_FRACTIONS.iter().any(|&v| (v - f).abs() < 1e-9) {
            return Err(ingest::IngestError::InvalidFraction(f).into());
        }
    }
    let (header, model) = load_checkpoint(&a.ckpt).map_err(|e| CliError::from(e).context(a.ckpt.display().to_string()))?;
    let bundle = bundle::read_bundle(&a.data)?;
    if bundle.meta.num_pois != model.config.num_pois {
        return Err(CliError::compatibility(anyhow::anyhow!(
            "checkpoint expects {} POIs, bundle has {}",
            model.config.num_pois,
            bundle.meta.num_pois
        )));
    }
    let trained_fraction = header.metadata.get("train_fraction").and_then(|v| v.as_f64());
    if let (Some(f), Some(t)) = (a.train_fraction, trained_fraction) {
        if (f - t).abs() > 1e-9 {
            log::warn!("report tagged with fraction {f} but the checkpoint was trained on {t}");
        }
    }
    let max_len = header
        .metadata
        .get("max_seq_len")
        .and_then(|v| v.as_u64())
        .map_or(ingest::DEFAULT_MAX_SEQ_LEN, |v| v as usize);
    let graph = bundle::load_or_build_geo_graph(&a.data, &bundle.split.poi_coords, model.config.delta_d)?;
    let samples = match a.split.as_str() {
        "valid" => &bundle.split.validation,
        _ => &bundle.split.test,
    };
    let samples = truncate_contexts(samples, max_len);

    let mut report = evaluate_split(&model, &graph, &samples, &a.split, a.batch_size)?;
    report.train_fraction = a.train_fraction;
    let out = match &a.out {
        Some(d) => d.clone(),
        None => a.ckpt.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf),
    };
    create_dir(&out)?;
    let mut outputs = vec![REPORT_FILE];
    if a.diagnostics {
        let mut tsv = Vec::new();
        let mut diag = disentanglement_diagnostics(&model, &graph, &samples, a.batch_size, Some(&mut tsv))?;
        let path = out.join(EMBEDDINGS_FILE);
        write_atomic(&path, |f| f.write_all(&tsv))
            .map_err(|e| CliError::io(e).context(format!("writing {}", path.display())))?;
        let coords = &bundle.split.poi_coords;
        diag.recommendation_distance_km =
            Some(mean_recommendation_distance(&model, &graph, coords, &samples, a.top_k, a.batch_size)?);
        diag.top_k = Some(a.top_k);
        report.diagnostics = Some(diag);
        outputs.push(EMBEDDINGS_FILE);
    }

    let report_path = out.join(REPORT_FILE);
    write_atomic(&report_path, |f| {
        serde_json::to_writer_pretty(&mut *f, &report).map_err(std::io::Error::other)?;
        f.write_all(b"\n")
    })
    .map_err(|e| CliError::io(e).context(format!("writing {}", report_path.display())))?;
    println!("AUC: {:.6}", report.auc);
    println!("Logloss: {:.6}", report.logloss);
    if let Some(d) = &report.diagnostics {
        println!("geo margin: {:.6}", d.geo_margin);
        println!("seq margin: {:.6}", d.seq_margin);
        if let Some(km) = d.recommendation_distance_km {
            println!("recommendation distance (top {}): {km:.4} km", a.top_k);
        }
    }

    let mut inputs = bundle_hashes(&a.data)?;
    inputs.extend(input_hashes(&[&a.ckpt])?);
    finish(
        clock,
        ManifestParts {
            command: "evaluate",
            config_path: None,
            data_path: Some(&a.data),
            output_dir: &out,
            seed: header.metadata.get("seed").and_then(|v| v.as_u64()).unwrap_or(0),
            inputs,
            outputs: &outputs,
            settings: json!({
                "checkpoint": a.ckpt,
                "split": a.split,
                "diagnostics": a.diagnostics,
                "train_fraction": a.train_fraction,
                "top_k": a.top_k,
                "batch_size": a.batch_size,
                "max_seq_len": max_len,
            }),
        },
    )
}

pub fn verify(a: &VerifyArgs) -> Result<()> {
    let m = RunManifest::read(&a.dir).map_err(|e| CliError::io(e).context(format!("reading {MANIFEST_FILE}")))?;
    let stale = m.stale_entries();
    if stale.is_empty() {
        println!("ok: {} inputs, {} outputs", m.inputs.len(), m.outputs.len());
        Ok(())
    } else {
        Err(CliError::compatibility(anyhow::anyhow!("hash mismatch: {}", stale.join(", "))))
    }
}
