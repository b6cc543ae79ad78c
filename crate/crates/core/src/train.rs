//! Loss, optimizer and the seeded training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::eval::{compute_metrics, MetricsReport};
use crate::ingest::Corpus;
use crate::lexer::{self, Vocabulary};
use crate::model::{Afpnet, Detector, MeanGradient, ModelParams};
use crate::scalar::Scalar;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside the log.
pub const PROB_EPS: f64 = 1e-7;

/// Samples per rayon task when accumulating a minibatch gradient. Fixed so the
/// reduction order, and with it the result, does not depend on thread count.
const GRAD_CHUNK: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub trials: usize,
    pub seed: u64,
    /// Weight on the positive-class term of the loss.
    pub class_weight: f64,
    /// Rescale the minibatch gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
    pub min_freq: usize,
    pub train_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            epochs: 50,
            trials: 5,
            seed: 0,
            class_weight: 1.0,
            clip_norm: None,
            min_freq: 2,
            train_fraction: 0.8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.trials == 0 {
            return bad("batch_size, epochs and trials must be at least 1");
        }
        if !(self.class_weight.is_finite() && self.class_weight > 0.0) {
            return bad("class_weight must be positive");
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return bad("clip_norm must be positive");
            }
        }
        if self.min_freq == 0 {
            return bad("min_freq must be at least 1");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie strictly between 0 and 1");
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn check_label(label: u8) -> Result<()> {
    if label > 1 {
        return Err(Error::InvalidLabel(label as i64));
    }
    Ok(())
}

/// Weighted binary cross-entropy of a probability against a 0/1 label.
pub fn loss<T: Scalar>(probability: T, label: u8, class_weight: T) -> Result<T> {
    check_label(label)?;
    let eps = T::lit(PROB_EPS);
    let p = probability.max(eps).min(T::one() - eps);
    Ok(if label == 1 {
        -class_weight * p.ln()
    } else {
        -(T::one() - p).ln()
    })
}

/// Derivative of [`loss`] with respect to the logit.
///
/// Uses the unclamped closed form, so confidently wrong samples still receive
/// a gradient.
pub fn loss_grad_logit<T: Scalar>(probability: T, label: u8, class_weight: T) -> Result<T> {
    check_label(label)?;
    Ok(if label == 1 {
        class_weight * (probability - T::one())
    } else {
        probability
    })
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub learning_rate: T,
    pub weight_decay: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: i32,
    m: ModelParams<T>,
    v: ModelParams<T>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: &TrainConfig, model: &Afpnet<T>) -> Self {
        AdamW {
            learning_rate: T::lit(cfg.learning_rate),
            weight_decay: T::lit(cfg.weight_decay),
            beta1: T::lit(cfg.beta1),
            beta2: T::lit(cfg.beta2),
            eps: T::lit(cfg.eps),
            step: 0,
            m: model.zero_grads(),
            v: model.zero_grads(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>) {
        self.step += 1;
        let one = T::one();
        let bc1 = one - self.beta1.powi(self.step);
        let bc2 = one - self.beta2.powi(self.step);
        let decay = one - self.learning_rate * self.weight_decay;
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for (((p, g), m), v) in tensors {
            for (((p, &g), m), v) in p.data.iter_mut().zip(g.data).zip(m.data.iter_mut()).zip(v.data.iter_mut()) {
                *m = self.beta1 * *m + (one - self.beta1) * g;
                *v = self.beta2 * *v + (one - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = *p * decay - self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Global L2 norm over every gradient tensor.
pub fn grad_norm<T: Scalar>(grads: &ModelParams<T>) -> T {
    grads
        .tensors()
        .iter()
        .flat_map(|t| t.data.iter())
        .fold(T::zero(), |acc, &g| acc + g * g)
        .sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub seed: u64,
    /// SHA-256 over the ordered training ids, labels and sources.
    pub train_digest: String,
    pub vocab_size: usize,
    pub epochs: Vec<EpochRecord>,
    pub final_metrics: MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub detector: Detector<T>,
    pub history: TrainHistory,
}

pub fn corpus_digest(corpus: &Corpus) -> String {
    let mut hasher = Sha256::new();
    for c in corpus {
        for part in [c.id.as_bytes(), &[c.label], c.source.as_bytes()] {
            hasher.update((part.len() as u64).to_le_bytes());
            hasher.update(part);
        }
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Tokenizes and encodes every contract, naming the one that fails.
pub fn encode_corpus(corpus: &Corpus, vocab: &Vocabulary) -> Result<Vec<Vec<usize>>> {
    corpus
        .iter()
        .map(|c| {
            let seq = lexer::tokenize(&c.source).map_err(|e| Error::Corpus(format!("contract {}: {e}", c.id)))?;
            Ok(lexer::encode(&seq, vocab))
        })
        .collect()
}

/// Hard decisions for every encoded sequence, in input order.
pub fn predict_all<T: Scalar>(model: &Afpnet<T>, encoded: &[Vec<usize>]) -> Result<Vec<u8>> {
    encoded
        .par_iter()
        .map(|ids| model.predict(ids).map(|p| p.decision))
        .collect()
}

/// Probability, decision and classifier-input features of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub probability: f64,
    pub decision: u8,
    pub features: Vec<f64>,
}

pub fn score_all<T: Scalar>(model: &Afpnet<T>, encoded: &[Vec<usize>]) -> Result<Vec<Scored>> {
    let threshold = model.config().threshold;
    encoded
        .par_iter()
        .map(|ids| {
            let pass = model.forward(ids)?;
            let probability = pass.probability.to_f64_lossy();
            Ok(Scored {
                probability,
                decision: u8::from(probability >= threshold),
                features: pass.features().iter().map(|v| v.to_f64_lossy()).collect(),
            })
        })
        .collect()
}

pub fn evaluate<T: Scalar>(model: &Afpnet<T>, encoded: &[Vec<usize>], labels: &[u8]) -> Result<MetricsReport> {
    compute_metrics(&predict_all(model, encoded)?, labels)
}

/// Mean loss and summed gradient over one minibatch.
fn batch_gradient<T: Scalar>(
    model: &Afpnet<T>,
    samples: &[(&[usize], u8)],
    class_weight: T,
) -> Result<(T, ModelParams<T>)> {
    let partials: Vec<(T, ModelParams<T>)> = samples
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grads = model.zero_grads();
            let mut total = T::zero();
            for &(ids, label) in chunk {
                let pass = model.forward(ids)?;
                total += loss(pass.probability, label, class_weight)?;
                let d_logit = loss_grad_logit(pass.probability, label, class_weight)?;
                model.backward(&pass, d_logit, &mut grads, MeanGradient::Include);
            }
            Ok((total, grads))
        })
        .collect::<Result<_>>()?;
    let mut iter = partials.into_iter();
    let (mut total, mut grads) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        total += l;
        grads.add_assign(&g);
    }
    Ok((total, grads))
}

/// Called after every epoch with the record just produced.
pub type EpochCallback<'a> = dyn FnMut(&EpochRecord) + 'a;

/// Trains one model from `seed`. The vocabulary is built from `train` only.
pub fn train_model<T: Scalar>(
    train: &Corpus,
    test: &Corpus,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: Option<&mut EpochCallback<'_>>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    model_config.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Corpus("training and test splits must both be non-empty".into()));
    }
    let vocab = lexer::build_vocab(train, cfg.min_freq)?;
    let train_ids = encode_corpus(train, &vocab)?;
    let test_ids = encode_corpus(test, &vocab)?;
    let train_labels = train.labels();
    let test_labels = test.labels();

    let mut model = Afpnet::<T>::init(model_config.clone(), vocab.len(), seed)?;
    let mut optimizer = AdamW::new(cfg, &model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class_weight = T::lit(cfg.class_weight);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<(&[usize], u8)> = idx.iter().map(|&i| (train_ids[i].as_slice(), train_labels[i])).collect();
            let (total, mut grads) = batch_gradient(&model, &samples, class_weight).map_err(|e| match e {
                Error::NonFinite(_) => Error::NonFiniteLoss { epoch, batch },
                e => e,
            })?;
            let total = total.to_f64_lossy();
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            epoch_loss += total;
            grads.scale(T::one() / T::lit(samples.len() as f64));
            if let Some(max) = cfg.clip_norm {
                let norm = grad_norm(&grads);
                if norm > T::lit(max) {
                    grads.scale(T::lit(max) / norm);
                }
            }
            optimizer.step(model.params_mut(), &grads);
        }
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            test: evaluate(&model, &test_ids, &test_labels)?,
        };
        if let Some(cb) = on_epoch.as_deref_mut() {
            cb(&record);
        }
        epochs.push(record);
    }

    let final_metrics = epochs.last().expect("at least one epoch").test.clone();
    let history = TrainHistory {
        seed,
        train_digest: corpus_digest(train),
        vocab_size: vocab.len(),
        epochs,
        final_metrics,
        checkpoint: None,
    };
    Ok(TrainOutcome {
        detector: Detector::new(model, vocab)?,
        history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trials: Vec<TrialResult>,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_f1: f64,
    pub mean_precision_pct: f64,
    pub mean_recall_pct: f64,
    pub mean_f1_pct: f64,
}

impl TrialSummary {
    pub fn from_trials(trials: Vec<TrialResult>) -> Self {
        let n = trials.len().max(1) as f64;
        let mean = |f: fn(&MetricsReport) -> f64| trials.iter().map(|t| f(&t.metrics)).sum::<f64>() / n;
        let (p, r, f) = (mean(|m| m.precision), mean(|m| m.recall), mean(|m| m.f1));
        TrialSummary {
            mean_precision: p,
            mean_recall: r,
            mean_f1: f,
            mean_precision_pct: crate::eval::percent(p),
            mean_recall_pct: crate::eval::percent(r),
            mean_f1_pct: crate::eval::percent(f),
            trials,
        }
    }
}

/// Repeats training `cfg.trials` times on the same split with seeds
/// `cfg.seed + i`. `on_trial` sees each finished model before it is dropped.
pub fn run_trials<T: Scalar, E: From<Error>>(
    train: &Corpus,
    test: &Corpus,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    mut on_trial: impl FnMut(usize, &TrainOutcome<T>) -> std::result::Result<(), E>,
) -> std::result::Result<TrialSummary, E> {
    let mut results = Vec::with_capacity(cfg.trials);
    for trial in 0..cfg.trials {
        let seed = cfg.seed.wrapping_add(trial as u64);
        let outcome = train_model::<T>(train, test, model_config, cfg, seed, None)?;
        on_trial(trial, &outcome)?;
        results.push(TrialResult {
            trial,
            seed,
            metrics: outcome.history.final_metrics.clone(),
        });
    }
    Ok(TrialSummary::from_trials(results))
}
