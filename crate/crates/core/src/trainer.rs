//! Mini-batch training with Adam and a curriculum contrastive weight.

use disenpoi_autodiff::{ParamStore, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::{self, EvalError};
use crate::graphs::GeoGraph;
use crate::ingest::{train_fraction_slice, DatasetSplit, IngestError, Sample};
use crate::model::{batch_loss, forward, Batch, Model, ModelConfig, ModelError};
use crate::seed::mix_seed;

const INIT_TAG: u64 = 0x1417;
const SHUFFLE_TAG: u64 = 0x5407;
const RANDOM_BETA_TAG: u64 = 0xbe7a;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("Adam state does not match parameter {0}")]
    ShapeMismatch(String),
    #[error("training loss became non-finite at epoch {0}")]
    Diverged(usize),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurriculumMode {
    /// `beta = max(alpha, gamma * k)`.
    #[default]
    Curriculum,
    /// `beta = alpha` for every epoch.
    Fixed,
    /// `beta ~ U(0, 2 alpha)` per epoch, seeded.
    Random,
}

/// Training hyper-parameters. Every field has a default, so `{}` is a
/// complete config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub alpha: f64,
    pub gamma: f64,
    #[serde(alias = "D")]
    pub dim: usize,
    #[serde(alias = "L")]
    pub geo_layers: usize,
    #[serde(alias = "T")]
    pub ggnn_steps: usize,
    /// Hidden width of the prediction MLP; `2 * dim` when absent.
    #[serde(alias = "H")]
    pub mlp_hidden: Option<usize>,
    pub delta_d: f64,
    pub max_seq_len: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub curriculum_mode: CurriculumMode,
    pub disable_geo_graph: bool,
    pub disable_seq_graph: bool,
    /// Share of each user's training samples to keep (0.2, 0.4, ..., 1.0).
    pub train_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            batch_size: 256,
            epochs: 30,
            alpha: 0.2,
            gamma: 0.004,
            dim: 64,
            geo_layers: 2,
            ggnn_steps: 2,
            mlp_hidden: None,
            delta_d: 1.0,
            max_seq_len: 100,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            curriculum_mode: CurriculumMode::Curriculum,
            disable_geo_graph: false,
            disable_seq_graph: false,
            train_fraction: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a finite non-negative number");
        }
        if self.batch_size == 0 || self.dim == 0 || self.ggnn_steps == 0 || self.max_seq_len == 0 {
            return bad("batch_size, dim, ggnn_steps and max_seq_len must be positive");
        }
        if self.mlp_hidden == Some(0) {
            return bad("mlp_hidden must be positive");
        }
        if !(self.alpha >= 0.0 && self.gamma >= 0.0 && self.alpha.is_finite() && self.gamma.is_finite()) {
            return bad("alpha and gamma must be finite and non-negative");
        }
        if !(self.delta_d > 0.0 && self.delta_d.is_finite()) {
            return bad("delta_d must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("adam_beta1 and adam_beta2 must lie in [0, 1) and adam_eps must be positive");
        }
        Ok(())
    }

    pub fn model_config(&self, num_pois: usize) -> ModelConfig {
        ModelConfig {
            num_pois,
            dim: self.dim,
            geo_layers: self.geo_layers,
            ggnn_steps: self.ggnn_steps,
            mlp_hidden: self.mlp_hidden.unwrap_or(2 * self.dim),
            delta_d: self.delta_d,
            disable_geo_graph: self.disable_geo_graph,
            disable_seq_graph: self.disable_seq_graph,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    /// Contrastive weight for 0-based epoch `k` under the configured mode.
    pub fn beta(&self, k: usize) -> f64 {
        match self.curriculum_mode {
            CurriculumMode::Curriculum => curriculum_beta(self.alpha, self.gamma, k),
            CurriculumMode::Fixed => self.alpha,
            CurriculumMode::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.seed, RANDOM_BETA_TAG, k as u64]));
                rng.gen::<f64>() * 2.0 * self.alpha
            }
        }
    }
}

/// `max(alpha, gamma * k)`.
pub fn curriculum_beta(alpha: f64, gamma: f64, k: usize) -> f64 {
    alpha.max(gamma * k as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.tensor.rows(), p.tensor.cols())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update over every parameter, in manifest order.
pub fn adam_step(params: &mut ParamStore, grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "{} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.tensor.shape() != g.shape() || p.tensor.shape() != m.shape() {
            return Err(TrainError::ShapeMismatch(p.name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - cfg.beta1.powf(t);
    let c2 = 1.0 - cfg.beta2.powf(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let (data, m, v) = (p.tensor.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..data.len() {
            let gi = g.data()[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub beta: f64,
    /// Sample-weighted mean BCE over the epoch.
    pub rec_loss: f64,
    /// Sample-weighted mean contrastive loss over the epoch.
    pub con_loss: f64,
}

/// Training order for epoch `k`: samples sharing a context stay adjacent,
/// groups are shuffled with `(seed, k)`.
pub fn epoch_order(samples: &[Sample], seed: u64, k: usize) -> Vec<usize> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        match groups.last_mut() {
            Some(g) if samples[g[0]].context == s.context && samples[g[0]].user_index == s.user_index => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, SHUFFLE_TAG, k as u64]));
    groups.shuffle(&mut rng);
    groups.into_iter().flatten().collect()
}

/// One pass over `train`: a forward, a backward and an Adam update per batch.
pub fn train_epoch(
    model: &mut Model,
    state: &mut AdamState,
    train: &[Sample],
    graph: &GeoGraph,
    config: &TrainConfig,
    k: usize,
    beta: f64,
) -> Result<EpochStats> {
    let order = epoch_order(train, config.seed, k);
    let adam = config.adam();
    let (mut rec_sum, mut con_sum) = (0.0, 0.0);
    for chunk in order.chunks(config.batch_size) {
        let batch = Batch::from_samples(chunk.iter().map(|&i| &train[i]));
        let mut tape = Tape::new();
        let (bound, w) = model.bind(&mut tape, true)?;
        let out = forward(&mut tape, model, &w, graph, &batch)?;
        let loss = batch_loss(&mut tape, &out, &batch.labels, beta)?;
        let rec = tape.value(loss.recommendation).item();
        let con = tape.value(loss.contrastive).item();
        if !(rec.is_finite() && con.is_finite()) {
            return Err(TrainError::Diverged(k));
        }
        rec_sum += rec * batch.len() as f64;
        con_sum += con * batch.len() as f64;
        let grads = tape.backward(loss.total).map_err(ModelError::from)?;
        let grads = bound.gradients(&tape, &grads);
        drop(tape);
        adam_step(&mut model.params, &grads, state, &adam)?;
    }
    let n = train.len().max(1) as f64;
    Ok(EpochStats {
        epoch: k,
        beta,
        rec_loss: rec_sum / n,
        con_loss: con_sum / n,
    })
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub beta: f64,
    pub rec_loss: f64,
    pub con_loss: f64,
    pub val_auc: f64,
    pub val_logloss: f64,
    /// Best validation AUC so far, this epoch included.
    pub best_val_auc: f64,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Parameters of the epoch with the best validation AUC, or the
    /// initial parameters when no epoch ran.
    pub model: Model,
    pub best_epoch: Option<usize>,
    pub log: Vec<EpochLog>,
}

/// Keeps the last `max_len` visits of every context.
pub fn truncate_contexts(samples: &[Sample], max_len: usize) -> Vec<Sample> {
    samples
        .iter()
        .map(|s| {
            let start = s.context.len().saturating_sub(max_len);
            Sample {
                context: s.context[start..].to_vec(),
                ..s.clone()
            }
        })
        .collect()
}

/// Trains from scratch, evaluating on the validation split after every
/// epoch. `on_epoch` sees each log line as soon as it is produced.
pub fn fit(
    config: &TrainConfig,
    split: &DatasetSplit,
    graph: &GeoGraph,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<FitResult> {
    config.validate()?;
    let mut model = Model::new(config.model_config(split.num_pois()), mix_seed(&[config.seed, INIT_TAG]))?;
    let split = if config.train_fraction == 1.0 {
        split.clone()
    } else {
        train_fraction_slice(split, config.train_fraction, config.seed)?
    };
    let train = truncate_contexts(&split.train, config.max_seq_len);
    let validation = truncate_contexts(&split.validation, config.max_seq_len);

    let mut state = AdamState::new(&model.params);
    let mut best: Option<(f64, usize, Model)> = None;
    let mut log = Vec::with_capacity(config.epochs);
    for k in 0..config.epochs {
        let beta = config.beta(k);
        let stats = train_epoch(&mut model, &mut state, &train, graph, config, k, beta)?;
        let scores = evaluator::score_samples(&model, graph, &validation, config.batch_size)?;
        let labels: Vec<u8> = validation.iter().map(|s| s.label).collect();
        let val_auc = evaluator::auc(&scores, &labels)?;
        let val_logloss = evaluator::logloss(&scores, &labels);
        if best.as_ref().is_none_or(|(b, _, _)| val_auc > *b) {
            best = Some((val_auc, k, model.clone()));
        }
        let entry = EpochLog {
            epoch: k,
            beta: stats.beta,
            rec_loss: stats.rec_loss,
            con_loss: stats.con_loss,
            val_auc,
            val_logloss,
            best_val_auc: best.as_ref().map_or(val_auc, |b| b.0),
        };
        log::info!(
            "epoch {k}: beta {beta:.4} rec {:.5} con {:.5} val auc {val_auc:.5} logloss {val_logloss:.5}",
            stats.rec_loss,
            stats.con_loss
        );
        on_epoch(&entry);
        log.push(entry);
    }
    let (model, best_epoch) = match best {
        Some((_, k, m)) => (m, Some(k)),
        None => (model, None),
    };
    Ok(FitResult { model, best_epoch, log })
}
