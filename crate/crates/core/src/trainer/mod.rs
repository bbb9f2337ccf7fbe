//! AdamW training with a per-epoch learning-rate multiplier, seeded shuffling,
//! validation-UAR model selection and early stopping.

mod adamw;
mod checkpoint;
mod schedule;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adamw::{adamw_step, AdamState, AdamWConfig};
pub use checkpoint::{Checkpoint, CheckpointMeta, RngState, MAGIC, VERSION};
pub use schedule::LrSchedule;

use crate::corpus::{segment, Corpus, Label, LabeledSegment, SegmentConfig, Split};
use crate::error::{Error, Result};
use crate::losses::{batch_loss, LossConvention};
use crate::metrics::{evaluate_probabilities, predict_split, Level};
use crate::model::{MentalPerceiver, ModelConfig};
use crate::numerics::{value_and_grad, Gradients, ParamStore, Tape};
use crate::priors::CategoryPriors;

/// Samples per gradient shard; shards are evaluated in parallel and summed in order.
const SHARD: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Smallest validation UAR gain that counts as an improvement.
    pub min_improvement: f64,
    pub schedule: LrSchedule,
    pub loss_convention: LossConvention,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-5,
            epochs: 200,
            patience: 15,
            batch_size: 16,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            min_improvement: 1e-6,
            schedule: LrSchedule::default(),
            loss_convention: LossConvention::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.min_improvement >= 0.0) {
            return Err(Error::config("eps must be positive; weight_decay and min_improvement non-negative"));
        }
        self.schedule.validate()
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Patience counter over a metric that should increase.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_improvement: f64,
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_improvement: f64) -> Self {
        Self {
            patience,
            min_improvement,
            best: None,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records one epoch's metric; returns whether it is a new best.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        let improved = match self.best {
            None => true,
            Some(b) => metric > b + self.min_improvement,
        };
        if improved {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        improved
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_uar: f64,
    pub lr_multiplier: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub log: Vec<EpochLog>,
    pub stopped_early: bool,
}

/// Mean total loss over `batch` and its parameter gradients.
pub fn batch_gradients(
    model: &MentalPerceiver,
    params: &ParamStore<f32>,
    batch: &[&LabeledSegment],
    convention: LossConvention,
) -> Result<(f64, Gradients<f32>)> {
    let scale = 1.0 / batch.len() as f32;
    let shards: Vec<Result<(f32, Gradients<f32>)>> = batch
        .par_chunks(SHARD)
        .map(|shard| {
            let labels: Vec<u8> = shard.iter().map(|s| s.label.as_u8()).collect();
            let inputs: Vec<_> = shard.iter().map(|s| &s.features).collect();
            value_and_grad(params, |tape: &mut Tape<'_, f32>| {
                let fwd = model.forward(tape, &inputs)?;
                let loss = batch_loss(tape, &fwd, &labels, convention)?;
                let sum = tape.add(loss.match_sum, loss.cls_sum)?;
                tape.scale(sum, scale)
            })
        })
        .collect();
    let mut total = 0.0f64;
    let mut acc: Option<Gradients<f32>> = None;
    for shard in shards {
        let (loss, grads) = shard?;
        total += loss as f64;
        match &mut acc {
            Some(a) => a.accumulate(&grads)?,
            None => acc = Some(grads),
        }
    }
    Ok((total, acc.ok_or_else(|| Error::data("empty batch"))?))
}

fn with_context(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Numerical { op, detail } => Error::numerical(op, format!("epoch {epoch}, batch {batch}: {detail}")),
        other => other,
    }
}

/// Validation participant-level UAR.
pub fn validation_uar(
    model: &MentalPerceiver,
    params: &ParamStore<f32>,
    corpus: &Corpus,
    seg: &SegmentConfig,
) -> Result<f64> {
    let probs = predict_split(model, params, corpus, Split::Validation, seg)?;
    let ev = evaluate_probabilities(Split::Validation, &probs, &[Level::Participant])?;
    Ok(ev.reports[0].uar)
}

fn check_splits(corpus: &Corpus) -> Result<()> {
    let train = corpus.split(Split::Train);
    let has = |l: Label| train.iter().any(|r| r.label == l);
    if !has(Label::Normal) || !has(Label::Disorder) {
        return Err(Error::data("training split must contain both classes"));
    }
    if corpus.split(Split::Validation).is_empty() {
        return Err(Error::data("validation split is empty"));
    }
    Ok(())
}

/// Trains a fresh model and returns the best-validation checkpoint.
///
/// `on_epoch` sees every epoch's log line as soon as it is complete.
pub fn train(
    corpus: &Corpus,
    priors: &CategoryPriors,
    model_config: &ModelConfig,
    config: &TrainConfig,
    seg: &SegmentConfig,
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    seg.validate()?;
    check_splits(corpus)?;
    let mut corpus = corpus.clone();
    corpus.featurize()?;

    let (model, mut params) = MentalPerceiver::build::<f32>(model_config, priors)?;
    let mut adam = AdamState::new(&params);
    let adamw = config.adamw();

    let train_segments: Vec<LabeledSegment> = corpus
        .split(Split::Train)
        .into_iter()
        .map(|r| segment(r, seg))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut stopper = EarlyStopping::new(config.patience, config.min_improvement);
    let mut log = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut order: Vec<usize> = (0..train_segments.len()).collect();

    for epoch in 0..config.epochs {
        let mult = config.schedule.multiplier(epoch, config.epochs)?;
        let lr = config.learning_rate * mult;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&LabeledSegment> = idx.iter().map(|&i| &train_segments[i]).collect();
            let (loss, grads) =
                batch_gradients(&model, &params, &batch, config.loss_convention).map_err(|e| with_context(e, epoch, b))?;
            if !loss.is_finite() {
                return Err(Error::numerical("train", format!("epoch {epoch}, batch {b}: loss is {loss}")));
            }
            adamw_step(&mut params, &grads, &mut adam, &adamw, lr).map_err(|e| with_context(e, epoch, b))?;
            loss_sum += loss * batch.len() as f64;
        }
        let val_uar = validation_uar(&model, &params, &corpus, seg)?;
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / train_segments.len() as f64,
            val_uar,
            lr_multiplier: mult,
        };
        on_epoch(&entry)?;
        log.push(entry);

        if stopper.observe(epoch, val_uar) {
            best = Some(Checkpoint {
                meta: CheckpointMeta {
                    model: model_config.clone(),
                    segment: *seg,
                    loss_convention: config.loss_convention,
                    epoch,
                    best_metric: val_uar,
                    prior_counts: priors.counts,
                    adam_step: adam.step,
                    rng: Some(RngState {
                        seed: config.seed,
                        word_pos: rng.get_word_pos().to_string(),
                    }),
                },
                model: model.clone(),
                params: params.clone(),
                adam: Some(adam.clone()),
            });
        }
        if stopper.should_stop() {
            break;
        }
    }
    let stopped_early = log.len() < config.epochs;
    Ok(TrainOutcome {
        best: best.expect("at least one epoch ran"),
        log,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SynthSpec};

    #[test]
    fn patience_trace() {
        let mut es = EarlyStopping::new(15, 1e-6);
        let mut stopped_after = None;
        for epoch in 0..200 {
            let metric = if epoch <= 3 { epoch as f64 * 0.1 } else { 0.3 };
            es.observe(epoch, metric);
            if es.should_stop() {
                stopped_after = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_after, Some(18));
        assert_eq!(es.best_epoch, 3);

        let mut es = EarlyStopping::new(15, 1e-6);
        for epoch in 0..200 {
            es.observe(epoch, epoch as f64);
            assert!(!es.should_stop());
        }
        let mut es = EarlyStopping::new(2, 1e-6);
        es.observe(0, 0.5);
        assert!(!es.observe(1, 0.5 + 1e-7));
    }

    fn tiny() -> (Corpus, ModelConfig) {
        let corpus = generate_synthetic(&SynthSpec {
            normal: 6,
            disorder: 6,
            text_width: 8,
            audio_width: 4,
            min_duration_s: 20.0,
            max_duration_s: 80.0,
            text_rows_per_s: 0.1,
            audio_rows_per_s: 0.1,
            seed: 1,
            ..SynthSpec::default()
        })
        .unwrap();
        let cfg = ModelConfig {
            input_width: 8,
            audio_width: 4,
            latent_width: 8,
            query_width: 8,
            output_width: 8,
            depth: 2,
            heads: 1,
            ..ModelConfig::default()
        };
        (corpus, cfg)
    }

    #[test]
    fn single_class_training_split_is_rejected() {
        let (mut corpus, cfg) = tiny();
        for r in &mut corpus.records {
            r.label = Label::Normal;
        }
        let priors = CategoryPriors {
            normal: vec![0.0; 8],
            disorder: vec![0.0; 8],
            counts: [1, 1],
        };
        let err = train(&corpus, &priors, &cfg, &TrainConfig::default(), &SegmentConfig::default(), |_| Ok(()));
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn runs_are_reproducible_and_priors_stay_frozen() {
        let (corpus, cfg) = tiny();
        let priors = CategoryPriors::from_corpus(&corpus).unwrap();
        let tc = TrainConfig {
            epochs: 3,
            learning_rate: 1e-3,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let seg = SegmentConfig::default();
        let a = train(&corpus, &priors, &cfg, &tc, &seg, |_| Ok(())).unwrap();
        let b = train(&corpus, &priors, &cfg, &tc, &seg, |_| Ok(())).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 3);
        let (_, fresh) = MentalPerceiver::build::<f32>(&cfg, &priors).unwrap();
        for name in [crate::priors::PRIOR_NORMAL, crate::priors::PRIOR_DISORDER] {
            assert_eq!(a.best.params.value(name).unwrap(), fresh.value(name).unwrap());
        }
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let (corpus, cfg) = tiny();
        let priors = CategoryPriors::from_corpus(&corpus).unwrap();
        let tc = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let out = train(&corpus, &priors, &cfg, &tc, &SegmentConfig::default(), |_| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("best.ckpt");
        out.best.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.params, out.best.params);
        assert_eq!(loaded.adam, out.best.adam);
        assert_eq!(loaded.meta, out.best.meta);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::CheckpointMagic)));
        bytes[0] = b'M';
        bytes[7] = b'9';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::CheckpointVersion(_))));
        bytes[7] = b'1';
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::CheckpointFormat(_))));
    }
}
