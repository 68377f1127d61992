//! The full inference model: embedding transform, sentence encoders,
//! attention alignment, operator-bank composition, LSTM aggregation and
//! the classifier, wired over one tape per sentence pair.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{cross_entropy, AggregatorParams, Label, LabelDistribution};
use crate::attention::{attend, AttentionAlignment};
use crate::batchnorm::Phase;
use crate::composition::OperatorBank;
use crate::config::ModelConfig;
use crate::embeddings::{EmbeddingTable, TransformParams};
use crate::encoders::{
    bilstm_encode, btree_encode, enhance, BtreeLstmParams, EncodedSentence, EncodingKind,
    LstmCellParams,
};
use crate::error::{Error, Result};
use crate::tape::{BatchStats, NodeId, ParamSet, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Premise,
    Hypothesis,
}

#[derive(Debug, Clone)]
enum EncoderParams {
    Bilstm { fwd: LstmCellParams, bwd: LstmCellParams },
    Btree(BtreeLstmParams),
}

impl EncoderParams {
    fn register(params: &mut ParamSet, prefix: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        match cfg.encoder {
            EncodingKind::BilstmEnhanced => EncoderParams::Bilstm {
                fwd: LstmCellParams::register(
                    params,
                    &format!("{prefix}.fwd"),
                    cfg.word_dim,
                    cfg.bilstm_hidden,
                    cfg.forget_bias_init,
                    rng,
                ),
                bwd: LstmCellParams::register(
                    params,
                    &format!("{prefix}.bwd"),
                    cfg.word_dim,
                    cfg.bilstm_hidden,
                    cfg.forget_bias_init,
                    rng,
                ),
            },
            EncodingKind::Btree => EncoderParams::Btree(BtreeLstmParams::register(
                params,
                prefix,
                cfg.word_dim,
                cfg.btree_hidden,
                cfg.forget_bias_init,
                rng,
            )),
        }
    }
}

/// One sentence pair's forward pass: the tape plus everything read off it.
pub struct SampleRun<'p> {
    pub tape: Tape<'p>,
    pub probs: NodeId,
    pub loss: Option<NodeId>,
    pub distribution: LabelDistribution,
    pub alignment: AttentionAlignment,
    /// Gate vectors, one row of k weights per hypothesis encoding.
    pub gates: Vec<Vec<f64>>,
    /// Train-phase batch-norm statistics, keyed by bank normalization slot.
    pub bn_stats: Vec<(usize, BatchStats)>,
    pub premise: EncodedSentence,
    pub hypothesis: EncodedSentence,
}

impl SampleRun<'_> {
    pub fn loss_value(&self) -> Option<f64> {
        self.loss.map(|l| self.tape.value(l)[0])
    }
}

#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub embeddings: EmbeddingTable,
    transform: TransformParams,
    transform_hypothesis: Option<TransformParams>,
    encoder: EncoderParams,
    encoder_hypothesis: Option<EncoderParams>,
    pub bank: OperatorBank,
    aggregator: AggregatorParams,
}

impl Model {
    /// Build a freshly initialized model around a loaded embedding table.
    /// Matrix parameters start Xavier-uniform from `config.seed`, biases
    /// zero except forget gates (`forget_bias_init`).
    pub fn new(config: ModelConfig, embeddings: EmbeddingTable) -> Result<Self> {
        config.validate()?;
        if embeddings.dim() != config.word_dim {
            return Err(Error::Config(format!(
                "embedding dimension {} does not match configured word_dim {}",
                embeddings.dim(),
                config.word_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();

        let transform = TransformParams {
            w: params.register("transform.w", Tensor::xavier(config.word_dim, config.word_dim, &mut rng)),
            b: params.register("transform.b", Tensor::zeros(&[config.word_dim])),
        };
        let transform_hypothesis = (!config.share_transform).then(|| TransformParams {
            w: params.register("transform.hypothesis.w", Tensor::xavier(config.word_dim, config.word_dim, &mut rng)),
            b: params.register("transform.hypothesis.b", Tensor::zeros(&[config.word_dim])),
        });

        let encoder = EncoderParams::register(&mut params, "encoder", &config, &mut rng);
        let encoder_hypothesis = (!config.share_encoder)
            .then(|| EncoderParams::register(&mut params, "encoder.hypothesis", &config, &mut rng));

        let bank = OperatorBank::register(
            &mut params,
            "bank",
            config.operator_count,
            config.pair_dim(),
            config.operator_hidden,
            config.operator_out,
            config.batch_norm,
            config.bn_gamma_init,
            config.bn_momentum,
            config.bn_eps,
            &mut rng,
        );
        let aggregator = AggregatorParams::register(
            &mut params,
            "aggregator",
            config.operator_out,
            config.aggregator_hidden,
            config.forget_bias_init,
            &mut rng,
        );

        Ok(Model {
            config,
            params,
            embeddings,
            transform,
            transform_hypothesis,
            encoder,
            encoder_hypothesis,
            bank,
            aggregator,
        })
    }

    fn transform_for(&self, side: Side) -> &TransformParams {
        match side {
            Side::Premise => &self.transform,
            Side::Hypothesis => self.transform_hypothesis.as_ref().unwrap_or(&self.transform),
        }
    }

    fn encoder_for(&self, side: Side) -> &EncoderParams {
        match side {
            Side::Premise => &self.encoder,
            Side::Hypothesis => self.encoder_hypothesis.as_ref().unwrap_or(&self.encoder),
        }
    }

    /// Transformed word-vector nodes for a token sequence.
    fn embed(&self, tape: &mut Tape, tokens: &[String], side: Side) -> Result<Vec<NodeId>> {
        let transform = self.transform_for(side);
        tokens
            .iter()
            .map(|t| {
                let raw = tape.constant(Tensor::vector(self.embeddings.word_vector(t)));
                transform.apply(tape, raw)
            })
            .collect()
    }

    /// Encode one side's tokens into phrase encodings.
    pub fn encode(&self, tape: &mut Tape, tokens: &[String], side: Side) -> Result<EncodedSentence> {
        if tokens.is_empty() {
            return Err(Error::Argument("cannot encode an empty token sequence".into()));
        }
        let words = self.embed(tape, tokens, side)?;
        match self.encoder_for(side) {
            EncoderParams::Bilstm { fwd, bwd } => {
                let states = bilstm_encode(tape, fwd, bwd, &words)?;
                enhance(tape, &words, &states)
            }
            EncoderParams::Btree(tree) => btree_encode(tape, tree, &words),
        }
    }

    /// Full forward pass over one sentence pair.
    pub fn run(
        &self,
        premise_tokens: &[String],
        hypothesis_tokens: &[String],
        gold: Option<Label>,
        phase: Phase,
    ) -> Result<SampleRun<'_>> {
        let mut tape = Tape::new(&self.params);
        let premise = self.encode(&mut tape, premise_tokens, Side::Premise)?;
        let hypothesis = self.encode(&mut tape, hypothesis_tokens, Side::Hypothesis)?;

        let alignment = attend(&mut tape, &premise, &hypothesis, self.config.attention_mode)?;
        let pairs: Vec<NodeId> = alignment
            .align_pairs(&hypothesis)
            .into_iter()
            .map(|(t_p, h_enc)| tape.concat(&[t_p, h_enc]))
            .collect::<Result<_>>()?;

        let composed = self.bank.compose_batch(&mut tape, &pairs, phase)?;
        let aggregated = self.aggregator.aggregate(&mut tape, &composed.outputs)?;
        let probs = self.aggregator.classify(&mut tape, aggregated)?;
        let loss = match gold {
            Some(g) => Some(cross_entropy(&mut tape, probs, g)?),
            None => None,
        };
        let distribution = LabelDistribution::from_node(&tape, probs);
        Ok(SampleRun {
            tape,
            probs,
            loss,
            distribution,
            alignment,
            gates: composed.gates,
            bn_stats: composed.bn_stats,
            premise,
            hypothesis,
        })
    }

    /// Eval-phase prediction.
    pub fn predict(&self, premise: &[String], hypothesis: &[String]) -> Result<LabelDistribution> {
        Ok(self.run(premise, hypothesis, None, Phase::Eval)?.distribution)
    }

    /// Trainable-parameter accounting: per-tensor sizes plus the total.
    pub fn parameter_report(&self) -> (Vec<(String, usize)>, usize) {
        let rows: Vec<(String, usize)> = self
            .params
            .iter()
            .map(|(_, name, t)| (name.to_string(), t.numel()))
            .collect();
        let total = rows.iter().map(|(_, n)| n).sum();
        (rows, total)
    }
}
