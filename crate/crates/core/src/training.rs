//! Two-stage training.
//!
//! Stage 1 fits the encoder-decoder on (question, evidence page) pairs.
//! Stage 2 freezes it and fits the page scorer on one positive and one
//! freshly sampled negative page per question, with squared error against
//! label-smoothed targets. Both stages keep the parameters of their best
//! validation epoch and stop after `early_stop_patience` epochs without
//! improvement.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{gold_page_anls, page_feature, top1_values};
use crate::model::{EncoderFeature, TokenSeq, VqaModel};
use crate::optim::{clip_global_norm, Optimizer, OptimizerConfig};
use crate::params::{GradSet, ParamSet};
use crate::render::{question_page_patches, GlyphFont, PatchGrid};
use crate::scalar::Scalar;
use crate::scorer::{PageScorer, RelevanceScore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub label_smooth_eps: f64,
    /// Global gradient-norm cap per update; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::stage1()
    }
}

impl TrainConfig {
    pub fn stage1() -> Self {
        TrainConfig {
            stage: 1,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            batch_size: 8,
            max_epochs: 80,
            early_stop_patience: 10,
            label_smooth_eps: 0.1,
            grad_clip: Some(1.0),
            seed: 0,
        }
    }

    pub fn stage2() -> Self {
        TrainConfig {
            stage: 2,
            learning_rate: 3e-4,
            max_epochs: 60,
            early_stop_patience: 20,
            ..Self::stage1()
        }
    }

    pub fn validate(&self, stage: u8) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.stage != stage {
            return fail(format!("configuration is for stage {}, not stage {stage}", self.stage));
        }
        if self.early_stop_patience == 0 {
            return fail("early_stop_patience must be at least 1".into());
        }
        if !(0.0..0.5).contains(&self.label_smooth_eps) {
            return fail(format!("label_smooth_eps {} outside [0, 0.5)", self.label_smooth_eps));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return fail("batch_size and max_epochs must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning rate {} must be positive", self.learning_rate));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return fail("grad_clip must be positive".into());
        }
        Ok(())
    }

    fn optimizer_config(&self) -> OptimizerConfig {
        match self.optimizer {
            OptimizerKind::Sgd => OptimizerConfig::Sgd { lr: self.learning_rate },
            OptimizerKind::Adam => OptimizerConfig::adam(self.learning_rate),
        }
    }
}

/// One epoch of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation ANLS (stage 1) or page accuracy in percent (stage 2).
    pub valid_metric: f64,
    pub positive_pairs: usize,
    pub negative_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub stage: u8,
    pub metric: String,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
}

/// Passed to the observer after every epoch.
#[derive(Debug)]
pub struct EpochEvent<'a, T> {
    pub record: &'a EpochRecord,
    /// Parameters after this epoch's updates.
    pub params: &'a ParamSet<T>,
    pub is_best: bool,
    pub seconds: f64,
}

/// Callback for logs and checkpoints.
pub type Observer<'o, T> = dyn FnMut(&EpochEvent<'_, T>) -> Result<()> + 'o;

/// Observer that ignores every event.
pub fn silent<T>(_: &EpochEvent<'_, T>) -> Result<()> {
    Ok(())
}

/// Counts epochs without improvement.
#[derive(Debug)]
struct EarlyStop {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStop {
    fn new(patience: usize) -> Self {
        EarlyStop {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Returns whether `metric` is a new best.
    fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        if metric > self.best {
            self.best = metric;
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    /// Stops after `patience` stale epochs, or once the metric hit `ceiling`
    /// (no later epoch could improve on it).
    fn should_stop(&self, ceiling: f64) -> bool {
        self.stale >= self.patience || self.best >= ceiling
    }
}

/// Sums per-example gradients in a fixed order and averages them.
fn mean_gradients<T: Scalar>(parts: Vec<(T, GradSet<T>)>) -> (T, GradSet<T>) {
    let n = T::lit(parts.len() as f64);
    let mut it = parts.into_iter();
    let (mut loss, mut acc) = it.next().expect("non-empty batch");
    for (l, g) in it {
        loss = loss + l;
        acc.add_assign(&g);
    }
    acc.scale(T::one() / n);
    (loss, acc)
}

fn apply_update<T: Scalar>(cfg: &TrainConfig, opt: &mut Optimizer<T>, params: &mut ParamSet<T>, mut grads: GradSet<T>) {
    if let Some(c) = cfg.grad_clip {
        clip_global_norm(&mut grads, T::lit(c));
    }
    opt.step(params, &grads);
}

// ---------------------------------------------------------------------------
// Stage 1

struct Stage1Example<T> {
    grid: PatchGrid<T>,
    target: TokenSeq,
}

fn stage1_examples<T: Scalar>(model: &VqaModel<T>, train: &Dataset) -> Result<Vec<Stage1Example<T>>> {
    let font = GlyphFont::embedded();
    train
        .samples()
        .par_iter()
        .map(|s| {
            let page = train.document_of(s).pages()[s.answer_page_idx].load()?;
            let grid = question_page_patches(&s.question, &page, &font, model.config().layout());
            let target = model.vocab().encode(&s.answers[0])?;
            Ok(Stage1Example { grid, target })
        })
        .collect()
}

/// Fits `model` on the evidence page of every training question and keeps
/// the epoch with the best validation ANLS (answers decoded from the gold
/// page, so retrieval does not enter this stage).
pub fn train_stage1<T: Scalar>(
    model: &mut VqaModel<T>,
    train: &Dataset,
    valid: &Dataset,
    cfg: &TrainConfig,
    observer: &mut Observer<'_, T>,
) -> Result<History> {
    cfg.validate(1)?;
    if train.is_empty() {
        return Err(Error::Contract("stage 1 needs at least one training question".into()));
    }
    if valid.is_empty() {
        return Err(Error::Contract("stage 1 needs at least one validation question".into()));
    }
    let examples = stage1_examples(model, train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer_config(), model.params());
    let mut stop = EarlyStop::new(cfg.early_stop_patience);
    let mut best_params = model.params().clone();
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..examples.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let frozen = &*model;
            let parts = batch
                .par_iter()
                .map(|&i| frozen.loss_and_gradients(&examples[i].grid, &examples[i].target))
                .collect::<Result<Vec<_>>>()?;
            let (loss, grads) = mean_gradients(parts);
            loss_sum += loss.as_f64();
            apply_update(cfg, &mut opt, model.params_mut(), grads);
        }
        let metric = gold_page_anls(model, valid)?;
        let is_best = stop.observe(epoch, metric);
        if is_best {
            best_params = model.params().clone();
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / examples.len() as f64,
            valid_metric: metric,
            positive_pairs: examples.len(),
            negative_pairs: 0,
        };
        observer(&EpochEvent {
            record: &record,
            params: model.params(),
            is_best,
            seconds: started.elapsed().as_secs_f64(),
        })?;
        epochs.push(record);
        if stop.should_stop(1.0) {
            break;
        }
    }
    *model.params_mut() = best_params;
    Ok(History {
        stage: 1,
        metric: "valid_anls".into(),
        epochs,
        best_epoch: stop.best_epoch,
        best_metric: stop.best,
    })
}

// ---------------------------------------------------------------------------
// Stage 2

/// Uniform draw over the pages of an `n_pages` document other than
/// `positive`; `None` when the document has a single page.
pub fn sample_negative<R: Rng + ?Sized>(n_pages: usize, positive: usize, rng: &mut R) -> Option<usize> {
    assert!(positive < n_pages, "positive page {positive} outside {n_pages} pages");
    if n_pages < 2 {
        return None;
    }
    let r = rng.random_range(0..n_pages - 1);
    Some(if r >= positive { r + 1 } else { r })
}

/// Regression target for a pair: `1 - eps` for positives, `eps` otherwise.
pub fn smoothed_target(is_positive: bool, eps: f64) -> f64 {
    if is_positive {
        1.0 - eps
    } else {
        eps
    }
}

pub fn mse_smoothed_loss(pred: RelevanceScore, is_positive: bool, eps: f64) -> f64 {
    let d = pred.value() - smoothed_target(is_positive, eps);
    d * d
}

/// Encoder features of every (question, page) pair of a dataset. The
/// encoder is frozen in stage 2, so each pair is encoded exactly once.
struct FeatureTable<T> {
    /// `features[q][p]` for question `q`, page `p`.
    features: Vec<Vec<EncoderFeature<T>>>,
    gold: Vec<usize>,
}

impl<T: Scalar> FeatureTable<T> {
    fn build(model: &VqaModel<T>, dataset: &Dataset) -> Result<Self> {
        let font = GlyphFont::embedded();
        let features = dataset
            .samples()
            .par_iter()
            .map(|s| {
                dataset
                    .document_of(s)
                    .pages()
                    .iter()
                    .map(|p| page_feature(model, &font, &s.question, &*p.load()?))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let gold = dataset.samples().iter().map(|s| s.answer_page_idx).collect();
        Ok(FeatureTable { features, gold })
    }

    fn page_accuracy(&self, scorer: &PageScorer<T>) -> Result<f64> {
        let hits = self
            .features
            .par_iter()
            .zip(&self.gold)
            .map(|(pages, &gold)| {
                let scores = pages.iter().map(|f| scorer.score(f).map(|s| s.value())).collect::<Result<Vec<_>>>()?;
                Ok(usize::from(top1_values(&scores)? == gold))
            })
            .collect::<Result<Vec<usize>>>()?;
        Ok(100.0 * hits.iter().sum::<usize>() as f64 / hits.len() as f64)
    }
}

/// Trains `scorer` on features of the frozen `model`, keeping the epoch
/// with the best validation page accuracy.
pub fn train_stage2<T: Scalar>(
    model: &VqaModel<T>,
    scorer: &mut PageScorer<T>,
    train: &Dataset,
    valid: &Dataset,
    cfg: &TrainConfig,
    observer: &mut Observer<'_, T>,
) -> Result<History> {
    cfg.validate(2)?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Contract("stage 2 needs training and validation questions".into()));
    }
    if scorer.d_model() != model.config().d_model {
        return Err(Error::Config("scorer width does not match the model".into()));
    }
    let train_f = FeatureTable::build(model, train)?;
    let valid_f = FeatureTable::build(model, valid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer_config(), scorer.params());
    let mut stop = EarlyStop::new(cfg.early_stop_patience);
    let mut best_params = scorer.params().clone();
    let mut epochs = Vec::new();
    let eps = T::lit(cfg.label_smooth_eps);
    let dropout_on = scorer.config().dropout_p > 0.0;

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        // (question, page, positive?) pairs, negatives redrawn every epoch.
        let mut pairs = Vec::with_capacity(2 * train_f.features.len());
        for (q, pages) in train_f.features.iter().enumerate() {
            let pos = train_f.gold[q];
            pairs.push((q, pos, true));
            if let Some(neg) = sample_negative(pages.len(), pos, &mut rng) {
                pairs.push((q, neg, false));
            }
        }
        let n_pos = pairs.iter().filter(|p| p.2).count();
        let n_neg = pairs.len() - n_pos;
        pairs.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for batch in pairs.chunks(cfg.batch_size) {
            let masks: Vec<_> = batch
                .iter()
                .map(|_| dropout_on.then(|| scorer.dropout_mask(&mut rng)))
                .collect();
            let frozen = &*scorer;
            let parts = batch
                .par_iter()
                .zip(masks)
                .map(|(&(q, p, positive), mask)| {
                    let target = if positive { T::one() - eps } else { eps };
                    let (loss, _, g) = frozen.loss_and_gradients(&train_f.features[q][p], target, mask)?;
                    Ok((loss, g))
                })
                .collect::<Result<Vec<_>>>()?;
            let (loss, grads) = mean_gradients(parts);
            loss_sum += loss.as_f64();
            apply_update(cfg, &mut opt, scorer.params_mut(), grads);
        }
        let metric = valid_f.page_accuracy(scorer)?;
        let is_best = stop.observe(epoch, metric);
        if is_best {
            best_params = scorer.params().clone();
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / pairs.len() as f64,
            valid_metric: metric,
            positive_pairs: n_pos,
            negative_pairs: n_neg,
        };
        observer(&EpochEvent {
            record: &record,
            params: scorer.params(),
            is_best,
            seconds: started.elapsed().as_secs_f64(),
        })?;
        epochs.push(record);
        if stop.should_stop(100.0) {
            break;
        }
    }
    *scorer.params_mut() = best_params;
    Ok(History {
        stage: 2,
        metric: "valid_page_accuracy_pct".into(),
        epochs,
        best_epoch: stop.best_epoch,
        best_metric: stop.best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SynthConfig};
    use crate::model::ModelConfig;
    use crate::scorer::ScorerConfig;

    fn tiny_model() -> VqaModel<f64> {
        VqaModel::new(ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 32,
            max_patches: 64,
            max_answer_len: 4,
            seed: 1,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn tiny_scorer() -> PageScorer<f64> {
        PageScorer::new(
            ScorerConfig {
                n_heads: 4,
                seed: 2,
                ..ScorerConfig::for_width(16)
            },
            16,
        )
        .unwrap()
    }

    fn corpus(docs: usize, pages: (usize, usize), questions: usize) -> Dataset {
        gen_synthetic(&SynthConfig {
            n_documents: docs,
            min_pages: pages.0,
            max_pages: pages.1,
            questions_per_doc: questions,
            seed: 5,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn negative_sampling_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_negative(2, 0, &mut rng), Some(1));
        assert_eq!(sample_negative(2, 1, &mut rng), Some(0));
        assert_eq!(sample_negative(1, 0, &mut rng), None);
    }

    #[test]
    fn negative_sampling_is_uniform_over_other_pages() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = [0usize; 5];
        for _ in 0..10_000 {
            counts[sample_negative(5, 2, &mut rng).unwrap()] += 1;
        }
        assert_eq!(counts[2], 0);
        for (i, &c) in counts.iter().enumerate().filter(|(i, _)| *i != 2) {
            let f = c as f64 / 10_000.0;
            assert!((f - 0.25).abs() <= 0.02, "page {i}: {f}");
        }
    }

    #[test]
    fn smoothed_loss_examples() {
        let s = |v| RelevanceScore::new(v).unwrap();
        assert!(mse_smoothed_loss(s(0.9), true, 0.1).abs() < 1e-15);
        assert!((mse_smoothed_loss(s(0.5), true, 0.1) - 0.16).abs() < 1e-15);
        assert!(mse_smoothed_loss(s(0.1), false, 0.1).abs() < 1e-15);
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig::stage1().validate(1).is_ok());
        assert!(TrainConfig::stage1().validate(2).is_err());
        for bad in [
            TrainConfig {
                early_stop_patience: 0,
                ..TrainConfig::stage1()
            },
            TrainConfig {
                label_smooth_eps: 0.5,
                ..TrainConfig::stage1()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::stage1()
            },
        ] {
            assert!(bad.validate(1).is_err());
        }
    }

    #[test]
    fn early_stop_semantics() {
        let mut s = EarlyStop::new(1);
        assert!(s.observe(1, 0.3));
        assert!(!s.should_stop(1.0));
        assert!(!s.observe(2, 0.3));
        assert!(s.should_stop(1.0));
        let mut c = EarlyStop::new(5);
        c.observe(1, 1.0);
        assert!(c.should_stop(1.0));
    }

    #[test]
    fn stage1_memorizes_one_sample() {
        let full = corpus(1, (1, 1), 1);
        let mut model = tiny_model();
        let cfg = TrainConfig {
            max_epochs: 30,
            early_stop_patience: 30,
            batch_size: 1,
            learning_rate: 5e-3,
            ..TrainConfig::stage1()
        };
        let h = train_stage1(&mut model, &full, &full, &cfg, &mut silent).unwrap();
        let first = h.epochs.first().unwrap().train_loss;
        let last = h.epochs.last().unwrap().train_loss;
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn stage1_stops_after_patience_without_improvement() {
        let full = corpus(2, (1, 2), 1);
        let mut model = tiny_model();
        // a learning rate this small cannot move greedy decoding
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 1e-12,
            early_stop_patience: 1,
            max_epochs: 10,
            ..TrainConfig::stage1()
        };
        let h = train_stage1(&mut model, &full, &full, &cfg, &mut silent).unwrap();
        assert_eq!(h.epochs.len(), 2);
        assert_eq!(h.best_epoch, 1);
        assert!(h.epochs.len() <= h.best_epoch + cfg.early_stop_patience);
    }

    #[test]
    fn stage1_rejects_empty_training_set() {
        let full = corpus(1, (1, 1), 1);
        let empty = Dataset::new("e", "train", vec![], vec![]).unwrap();
        let mut model = tiny_model();
        let r = train_stage1(&mut model, &empty, &full, &TrainConfig::stage1(), &mut silent);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn stage2_separates_a_single_pair_and_leaves_model_untouched() {
        let full = corpus(1, (2, 2), 1);
        let model = tiny_model();
        let before = model.params().clone();
        let mut scorer = tiny_scorer();
        let cfg = TrainConfig {
            max_epochs: 40,
            early_stop_patience: 40,
            batch_size: 2,
            learning_rate: 5e-3,
            ..TrainConfig::stage2()
        };
        let h = train_stage2(&model, &mut scorer, &full, &full, &cfg, &mut silent).unwrap();
        assert_eq!(model.params(), &before);
        let s = &full.samples()[0];
        let doc = full.document_of(s);
        let font = GlyphFont::embedded();
        let score = |p: usize| {
            let f = page_feature(&model, &font, &s.question, &doc.pages()[p].load().unwrap()).unwrap();
            scorer.score(&f).unwrap().value()
        };
        let pos = s.answer_page_idx;
        assert!(score(pos) > score(1 - pos), "history {:?}", h.epochs.last());
    }

    #[test]
    fn stage2_balance_and_reproducibility() {
        let full = corpus(6, (1, 3), 2);
        let multi = full.samples().iter().filter(|s| full.document_of(s).page_count() > 1).count();
        let model = tiny_model();
        let cfg = TrainConfig {
            max_epochs: 3,
            early_stop_patience: 3,
            ..TrainConfig::stage2()
        };
        let run = || {
            let mut scorer = tiny_scorer();
            let h = train_stage2(&model, &mut scorer, &full, &full, &cfg, &mut silent).unwrap();
            (h, scorer.params().clone())
        };
        let (h1, p1) = run();
        let (h2, p2) = run();
        assert_eq!(h1, h2);
        assert_eq!(p1, p2);
        for e in &h1.epochs {
            assert_eq!(e.positive_pairs, full.len());
            assert_eq!(e.negative_pairs, multi);
        }
    }

    #[test]
    fn observer_sees_every_epoch() {
        let full = corpus(2, (2, 2), 1);
        let model = tiny_model();
        let mut scorer = tiny_scorer();
        let cfg = TrainConfig {
            max_epochs: 3,
            early_stop_patience: 3,
            ..TrainConfig::stage2()
        };
        let mut seen = Vec::new();
        let mut obs = |e: &EpochEvent<'_, f64>| {
            seen.push((e.record.epoch, e.is_best));
            Ok(())
        };
        let h = train_stage2(&model, &mut scorer, &full, &full, &cfg, &mut obs).unwrap();
        assert_eq!(seen.len(), h.epochs.len());
        assert!(seen[0].1);
    }
}
