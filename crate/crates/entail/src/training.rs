//! Mini-batch training with Adam, batch-norm running-statistics updates,
//! and evaluation with per-class accuracy reporting.
//!
//! Samples inside a batch run on independent tapes. They are processed in
//! chunks sized to the thread pool; within a chunk the forwards/backwards
//! run in parallel, and the per-sample gradients are merged serially in
//! sample order so a fixed seed reproduces training bit for bit.

use rayon::prelude::*;

use crate::aggregation::Label;
use crate::batchnorm::{pool_stats, Phase};
use crate::data::{make_batches, Batch, SentencePair};
use crate::error::{Error, Result};
use crate::hashing::Fnv1a64;
use crate::model::Model;
use crate::optimizer::OptimizerState;
use crate::tape::{BatchStats, GradSet};

/// Loss/accuracy record with the Table-3-style class breakdown.
/// Class arrays are indexed by label index (entailment, neutral,
/// contradiction).
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub mean_loss: f64,
    pub accuracy: f64,
    pub per_class_accuracy: [f64; 3],
    pub per_class_counts: [usize; 3],
    pub per_class_correct: [usize; 3],
    pub samples: usize,
}

#[derive(Debug, Clone, Default)]
struct MetricsAccumulator {
    loss_sum: f64,
    counts: [usize; 3],
    correct: [usize; 3],
}

impl MetricsAccumulator {
    fn add(&mut self, loss: f64, gold: Label, predicted: Label) {
        self.loss_sum += loss;
        self.counts[gold.index()] += 1;
        if gold == predicted {
            self.correct[gold.index()] += 1;
        }
    }

    fn finish(self) -> Metrics {
        let samples: usize = self.counts.iter().sum();
        let total_correct: usize = self.correct.iter().sum();
        let mut per_class_accuracy = [0.0; 3];
        for i in 0..3 {
            per_class_accuracy[i] = if self.counts[i] > 0 {
                self.correct[i] as f64 / self.counts[i] as f64
            } else {
                0.0
            };
        }
        Metrics {
            mean_loss: if samples > 0 { self.loss_sum / samples as f64 } else { 0.0 },
            accuracy: if samples > 0 { total_correct as f64 / samples as f64 } else { 0.0 },
            per_class_accuracy,
            per_class_counts: self.counts,
            per_class_correct: self.correct,
            samples,
        }
    }
}

struct SampleResult {
    grads: GradSet,
    loss: f64,
    gold: Label,
    predicted: Label,
    bn_stats: Vec<(usize, BatchStats)>,
}

fn gold_of(pair_index: usize, gold: Option<Label>) -> Result<Label> {
    gold.ok_or_else(|| {
        Error::Argument(format!("training/evaluation pair {pair_index} has no gold label"))
    })
}

/// Forward + backward for one batch pair on its own tape.
fn train_sample(model: &Model, premise: &[String], hypothesis: &[String], gold: Label) -> Result<SampleResult> {
    let mut run = model.run(premise, hypothesis, Some(gold), Phase::Train)?;
    let loss_node = run.loss.expect("gold was provided");
    run.tape.backward(loss_node)?;
    Ok(SampleResult {
        grads: run.tape.collect_param_grads(),
        loss: run.tape.value(loss_node)[0],
        gold,
        predicted: run.distribution.predicted(),
        bn_stats: std::mem::take(&mut run.bn_stats),
    })
}

/// One optimizer step over a batch: gradients are averaged over the batch,
/// batch-norm running statistics absorb the pooled per-sample moments.
fn train_batch(
    model: &mut Model,
    optimizer: &mut OptimizerState,
    batch: &Batch,
    acc: &mut MetricsAccumulator,
) -> Result<()> {
    let chunk = rayon::current_num_threads().max(1);
    let mut batch_grads = GradSet::zeros_like(&model.params);
    let mut bn_bins: Vec<Vec<BatchStats>> = vec![Vec::new(); 2 * model.bank.operator_count()];

    for pairs in batch.pairs.chunks(chunk) {
        let results: Vec<Result<SampleResult>> = pairs
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                let gold = gold_of(p.source_index, p.gold)?;
                let _ = i;
                train_sample(model, p.premise.real_tokens(), p.hypothesis.real_tokens(), gold)
            })
            .collect();
        for result in results {
            let r = result?;
            batch_grads.accumulate(&r.grads);
            acc.add(r.loss, r.gold, r.predicted);
            for (slot, stats) in r.bn_stats {
                bn_bins[slot].push(stats);
            }
        }
    }

    // Mean loss over the batch -> mean gradient.
    batch_grads.scale(1.0 / batch.pairs.len() as f64);
    optimizer.apply(&mut model.params, &batch_grads)?;

    let mut states = model.bank.bn_states_mut();
    for (slot, stats) in bn_bins.iter().enumerate() {
        if let Some((mean, var)) = pool_stats(stats) {
            states[slot].update_running(&mean, &var);
        }
    }
    Ok(())
}

/// One shuffled pass over the dataset. The final partial batch trains
/// normally unless it has a single pair while batch norm is enabled, in
/// which case it is skipped for the train step.
pub fn train_epoch(
    model: &mut Model,
    optimizer: &mut OptimizerState,
    data: &[SentencePair],
    shuffle_seed: u64,
) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Argument("train_epoch on an empty dataset".into()));
    }
    let (batches, _truncated) = make_batches(
        data,
        model.config.batch_size,
        model.config.seq_len,
        shuffle_seed,
    );
    let mut acc = MetricsAccumulator::default();
    for batch in &batches {
        if batch.pairs.len() == 1 && model.config.batch_norm {
            continue;
        }
        train_batch(model, optimizer, batch, &mut acc)?;
    }
    Ok(acc.finish())
}

/// Metrics over a dataset without updating anything; batch norm runs in
/// eval mode against the stored running statistics.
pub fn evaluate(model: &Model, data: &[SentencePair]) -> Result<Metrics> {
    let chunk = rayon::current_num_threads().max(1);
    let mut acc = MetricsAccumulator::default();
    for pairs in data.chunks(chunk.max(1) * 8) {
        let results: Vec<Result<(f64, Label, Label)>> = pairs
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                let gold = gold_of(i, p.gold)?;
                let run = model.run(&p.premise_tokens, &p.hypothesis_tokens, Some(gold), Phase::Eval)?;
                Ok((run.loss_value().expect("gold provided"), gold, run.distribution.predicted()))
            })
            .collect();
        for r in results {
            let (loss, gold, predicted) = r?;
            acc.add(loss, gold, predicted);
        }
    }
    Ok(acc.finish())
}

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: Metrics,
    pub dev: Metrics,
}

/// Seed for epoch `e`, derived from the run seed.
pub fn epoch_seed(base: u64, epoch: usize) -> u64 {
    let mut h = Fnv1a64::new();
    h.update(&base.to_le_bytes());
    h.update(&(epoch as u64).to_le_bytes());
    h.finish()
}

/// Epoch loop with dev-set early stopping. `on_epoch` sees every epoch's
/// log and can stop the run early by returning false.
pub fn train_loop(
    model: &mut Model,
    optimizer: &mut OptimizerState,
    train_data: &[SentencePair],
    dev_data: &[SentencePair],
    mut on_epoch: impl FnMut(&EpochLog) -> bool,
) -> Result<Vec<EpochLog>> {
    let max_epochs = model.config.max_epochs;
    let patience = model.config.patience;
    let seed = model.config.seed;
    let mut logs = Vec::new();
    let mut best_dev_acc = f64::NEG_INFINITY;
    let mut epochs_since_best = 0usize;
    for epoch in 1..=max_epochs {
        let train = train_epoch(model, optimizer, train_data, epoch_seed(seed, epoch))?;
        let dev = evaluate(model, dev_data)?;
        let log = EpochLog { epoch, train, dev };
        let keep_going = on_epoch(&log);
        let dev_acc = log.dev.accuracy;
        logs.push(log);
        if !keep_going {
            break;
        }
        if dev_acc > best_dev_acc {
            best_dev_acc = dev_acc;
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= patience {
                break;
            }
        }
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::embeddings::EmbeddingTable;
    use crate::encoders::EncodingKind;

    fn tiny_model(encoder: EncodingKind, batch_size: usize) -> Model {
        let cfg = ModelConfig {
            encoder,
            word_dim: 6,
            seq_len: 12,
            bilstm_hidden: 4,
            btree_hidden: 4,
            operator_count: 2,
            operator_hidden: 4,
            operator_out: 4,
            aggregator_hidden: 4,
            batch_size,
            ..ModelConfig::default()
        };
        let embeddings = EmbeddingTable::empty(cfg.word_dim, cfg.oov_seed, cfg.effective_oov_std());
        Model::new(cfg, embeddings).unwrap()
    }

    fn pairs_fixture(n: usize) -> Vec<SentencePair> {
        (0..n)
            .map(|i| {
                SentencePair::from_texts(
                    &format!("the item {} sits on the shelf", i % 7),
                    &format!("an object {} rests somewhere", i % 5),
                    Some(Label::from_index(i % 3).unwrap()),
                )
                .unwrap()
            })
            .collect()
    }

    fn optimizer_for(model: &Model, lr: f64) -> OptimizerState {
        OptimizerState::new(
            &model.params,
            lr,
            model.config.adam_beta1,
            model.config.adam_beta2,
            model.config.adam_eps,
        )
    }

    #[test]
    fn frozen_training_is_deterministic() {
        // lr = 0 freezes parameters; identical seeds must give identical
        // metrics across epochs.
        let mut model = tiny_model(EncodingKind::Btree, 4);
        let mut opt = optimizer_for(&model, 0.0);
        let data = pairs_fixture(10);
        let a = train_epoch(&mut model, &mut opt, &data, 77).unwrap();
        let b = train_epoch(&mut model, &mut opt, &data, 77).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn per_class_accuracies_weight_to_overall() {
        let mut model = tiny_model(EncodingKind::BilstmEnhanced, 4);
        let mut opt = optimizer_for(&model, 1e-3);
        let data = pairs_fixture(11);
        let m = train_epoch(&mut model, &mut opt, &data, 5).unwrap();
        let weighted: f64 = (0..3)
            .map(|i| m.per_class_accuracy[i] * m.per_class_counts[i] as f64)
            .sum::<f64>()
            / m.samples as f64;
        assert!((weighted - m.accuracy).abs() < 1e-9);
        assert_eq!(m.samples, 11);
    }

    #[test]
    fn always_entailment_model_on_balanced_set() {
        let mut model = tiny_model(EncodingKind::Btree, 4);
        // Rig the classifier: zero weights, huge entailment bias.
        let (w_id, b_id) = {
            let mut w = None;
            let mut b = None;
            for (id, name, _) in model.params.iter() {
                if name == "aggregator.classifier.w" {
                    w = Some(id);
                }
                if name == "aggregator.classifier.b" {
                    b = Some(id);
                }
            }
            (w.unwrap(), b.unwrap())
        };
        for v in model.params.get_mut(w_id).data_mut() {
            *v = 0.0;
        }
        model.params.get_mut(b_id).data_mut().copy_from_slice(&[10.0, 0.0, 0.0]);

        let data = pairs_fixture(12); // 4 of each class
        let m = evaluate(&model, &data).unwrap();
        assert!((m.accuracy - 1.0 / 3.0).abs() < 1e-9);
        assert_eq!(m.per_class_accuracy[Label::Entailment.index()], 1.0);
        assert_eq!(m.per_class_accuracy[Label::Neutral.index()], 0.0);
        assert_eq!(m.per_class_accuracy[Label::Contradiction.index()], 0.0);
    }

    #[test]
    fn evaluation_is_pure() {
        let model = tiny_model(EncodingKind::Btree, 4);
        let data = pairs_fixture(9);
        let a = evaluate(&model, &data).unwrap();
        let b = evaluate(&model, &data).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hand_counted_ten_pair_fixture() {
        // Rig an always-entailment model, then count by hand: 4 E of 10
        // correct -> overall 0.4, E class 1.0, N/C 0.
        let mut model = tiny_model(EncodingKind::Btree, 4);
        let mut b_id = None;
        let mut w_id = None;
        for (id, name, _) in model.params.iter() {
            if name == "aggregator.classifier.b" {
                b_id = Some(id);
            }
            if name == "aggregator.classifier.w" {
                w_id = Some(id);
            }
        }
        for v in model.params.get_mut(w_id.unwrap()).data_mut() {
            *v = 0.0;
        }
        model
            .params
            .get_mut(b_id.unwrap())
            .data_mut()
            .copy_from_slice(&[10.0, 0.0, 0.0]);

        let golds = [0, 0, 0, 0, 1, 1, 1, 2, 2, 2];
        let data: Vec<SentencePair> = golds
            .iter()
            .enumerate()
            .map(|(i, &g)| {
                SentencePair::from_texts(
                    &format!("sentence number {i} here"),
                    "something short",
                    Some(Label::from_index(g).unwrap()),
                )
                .unwrap()
            })
            .collect();
        let m = evaluate(&model, &data).unwrap();
        assert!((m.accuracy - 0.4).abs() < 1e-12);
        assert_eq!(m.per_class_counts, [4, 3, 3]);
        assert_eq!(m.per_class_correct, [4, 0, 0]);
    }

    #[test]
    fn loss_decreases_on_repeated_single_sample() {
        let mut model = tiny_model(EncodingKind::BilstmEnhanced, 2);
        let mut opt = optimizer_for(&model, 1e-2);
        let pair = SentencePair::from_texts(
            "the cat sleeps on the mat",
            "an animal rests",
            Some(Label::Entailment),
        )
        .unwrap();
        // Two copies so batch norm has a real batch at the batch level.
        let data = vec![pair.clone(), pair];
        let mut losses = Vec::new();
        for e in 0..6 {
            let m = train_epoch(&mut model, &mut opt, &data, e).unwrap();
            losses.push(m.mean_loss);
        }
        assert!(
            losses.windows(2).all(|w| w[1] < w[0]),
            "loss not decreasing: {losses:?}"
        );
    }

    #[test]
    fn singleton_batch_skipped_when_batch_norm_is_on() {
        let mut model = tiny_model(EncodingKind::Btree, 4);
        assert!(model.config.batch_norm);
        let mut opt = optimizer_for(&model, 1e-3);
        let data = pairs_fixture(5); // batches of 4 + 1
        let m = train_epoch(&mut model, &mut opt, &data, 3).unwrap();
        assert_eq!(m.samples, 4, "final singleton batch should be skipped");
    }

    #[test]
    fn missing_gold_label_is_an_error() {
        let mut model = tiny_model(EncodingKind::Btree, 4);
        let mut opt = optimizer_for(&model, 1e-3);
        let mut data = pairs_fixture(3);
        data[1].gold = None;
        assert!(train_epoch(&mut model, &mut opt, &data, 1).is_err());
        assert!(evaluate(&model, &data).is_err());
    }
}
