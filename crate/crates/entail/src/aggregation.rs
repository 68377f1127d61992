//! Aggregation of per-pair operator outputs with a chain LSTM, the
//! three-way classifier, and the cross-entropy loss.

use rand_chacha::ChaCha8Rng;

use crate::encoders::LstmCellParams;
use crate::error::{Error, Result};
use crate::tape::{NodeId, ParamId, ParamSet, Tape};
use crate::tensor::Tensor;

/// Smallest probability fed to the log; keeps the loss finite.
pub const PROB_FLOOR: f64 = 1e-12;

/// Fixed label order: [entailment, neutral, contradiction].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Entailment,
    Neutral,
    Contradiction,
}

pub const LABELS: [Label; 3] = [Label::Entailment, Label::Neutral, Label::Contradiction];

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Entailment => 0,
            Label::Neutral => 1,
            Label::Contradiction => 2,
        }
    }

    pub fn from_index(index: usize) -> Result<Self> {
        match index {
            0 => Ok(Label::Entailment),
            1 => Ok(Label::Neutral),
            2 => Ok(Label::Contradiction),
            other => Err(Error::Argument(format!("label index {other} out of range"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Entailment => "entailment",
            Label::Neutral => "neutral",
            Label::Contradiction => "contradiction",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "entailment" => Some(Label::Entailment),
            "neutral" => Some(Label::Neutral),
            "contradiction" => Some(Label::Contradiction),
            _ => None,
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Class probabilities in fixed label order.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDistribution {
    pub probs: [f64; 3],
}

impl LabelDistribution {
    pub fn from_node(tape: &Tape, probs: NodeId) -> Self {
        let v = tape.value(probs);
        debug_assert_eq!(v.len(), 3);
        LabelDistribution { probs: [v[0], v[1], v[2]] }
    }

    pub fn predicted(&self) -> Label {
        let mut best = 0;
        for i in 1..3 {
            if self.probs[i] > self.probs[best] {
                best = i;
            }
        }
        Label::from_index(best).unwrap()
    }
}

/// Chain LSTM over the operator outputs plus the softmax classifier.
#[derive(Debug, Clone, Copy)]
pub struct AggregatorParams {
    pub cell: LstmCellParams,
    pub w: ParamId,
    pub b: ParamId,
}

impl AggregatorParams {
    pub fn register(
        params: &mut ParamSet,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        forget_bias: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        AggregatorParams {
            cell: LstmCellParams::register(params, &format!("{prefix}.lstm"), input_dim, hidden, forget_bias, rng),
            w: params.register(format!("{prefix}.classifier.w"), Tensor::xavier(hidden, 3, rng)),
            b: params.register(format!("{prefix}.classifier.b"), Tensor::zeros(&[3])),
        }
    }

    /// Final hidden state of a unidirectional LSTM over the outputs, run
    /// from zero initial state in the given order.
    pub fn aggregate(&self, tape: &mut Tape, outputs: &[NodeId]) -> Result<NodeId> {
        if outputs.is_empty() {
            return Err(Error::Argument("aggregate on an empty output list".into()));
        }
        let (mut h, mut c) = self.cell.zero_state(tape);
        for &o in outputs {
            let (nh, nc) = self.cell.step(tape, o, h, c)?;
            h = nh;
            c = nc;
        }
        Ok(h)
    }

    /// softmax(Wᵀ·A + b) over the three classes.
    pub fn classify(&self, tape: &mut Tape, aggregated: NodeId) -> Result<NodeId> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let logits = tape.vecmat(aggregated, w)?;
        let shifted = tape.add(logits, b)?;
        tape.softmax(shifted)
    }
}

/// Cross-entropy against the gold class: -log(probs[gold]), with the
/// probability clamped below at [`PROB_FLOOR`].
pub fn cross_entropy(tape: &mut Tape, probs: NodeId, gold: Label) -> Result<NodeId> {
    if tape.shape(probs) != [3] {
        return Err(Error::Dimension {
            op: "cross_entropy",
            lhs: tape.shape(probs).to_vec(),
            rhs: vec![3],
        });
    }
    let picked = tape.slice(probs, gold.index(), 1)?;
    let logp = tape.log_clamped(picked, PROB_FLOOR);
    Ok(tape.scale(logp, -1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck_params;
    use rand::{Rng, SeedableRng};

    fn rig(seed: u64, input_dim: usize, hidden: usize) -> (ParamSet, AggregatorParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let agg = AggregatorParams::register(&mut params, "agg", input_dim, hidden, 1.0, &mut rng);
        (params, agg)
    }

    #[test]
    fn label_round_trip() {
        for label in LABELS {
            assert_eq!(Label::from_index(label.index()).unwrap(), label);
            assert_eq!(Label::from_name(label.name()), Some(label));
        }
        assert!(Label::from_index(3).is_err());
        assert_eq!(Label::from_name("-"), None);
    }

    #[test]
    fn aggregate_single_output_is_one_step() {
        let (params, agg) = rig(1, 3, 2);
        let mut tape = Tape::new(&params);
        let o = tape.constant(Tensor::vector(vec![0.3, -0.2, 0.9]));
        let a = agg.aggregate(&mut tape, &[o]).unwrap();
        let (h0, c0) = agg.cell.zero_state(&mut tape);
        let (h, _) = agg.cell.step(&mut tape, o, h0, c0).unwrap();
        assert_eq!(tape.value(a), tape.value(h));
    }

    #[test]
    fn aggregate_zero_params_is_zero() {
        let (mut params, agg) = rig(2, 3, 2);
        for id in params.ids().collect::<Vec<_>>() {
            for v in params.get_mut(id).data_mut() {
                *v = 0.0;
            }
        }
        let mut tape = Tape::new(&params);
        let os: Vec<NodeId> = (0..3)
            .map(|i| tape.constant(Tensor::vector(vec![i as f64, 1.0, -1.0])))
            .collect();
        let a = agg.aggregate(&mut tape, &os).unwrap();
        assert_eq!(tape.value(a), &[0.0, 0.0]);
        assert!(agg.aggregate(&mut tape, &[]).is_err());
    }

    #[test]
    fn aggregate_gradcheck_over_four_outputs() {
        let (params, agg) = rig(3, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let outputs: Vec<Tensor> = (0..4)
            .map(|_| Tensor::vector((0..3).map(|_| rng.gen_range(0.0..1.0)).collect()))
            .collect();
        let check_ids: Vec<_> = params.ids().collect();
        let err = gradcheck_params(&params, &check_ids, |tape| {
            let os: Vec<NodeId> = outputs.iter().map(|o| tape.constant(o.clone())).collect();
            let a = agg.aggregate(tape, &os)?;
            let probs = agg.classify(tape, a)?;
            cross_entropy(tape, probs, Label::Neutral)
        })
        .unwrap();
        assert!(err < 1e-6, "aggregate gradcheck error {err}");
    }

    #[test]
    fn classify_zero_params_is_uniform() {
        let (mut params, agg) = rig(4, 2, 2);
        for id in [agg.w, agg.b] {
            for v in params.get_mut(id).data_mut() {
                *v = 0.0;
            }
        }
        let mut tape = Tape::new(&params);
        let a = tape.constant(Tensor::vector(vec![0.7, -0.7]));
        let probs = agg.classify(&mut tape, a).unwrap();
        for &p in tape.value(probs) {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn classify_large_bias_dominates() {
        let (mut params, agg) = rig(5, 2, 2);
        for v in params.get_mut(agg.w).data_mut() {
            *v = 0.0;
        }
        params.get_mut(agg.b).data_mut().copy_from_slice(&[10.0, 0.0, 0.0]);
        let mut tape = Tape::new(&params);
        let a = tape.constant(Tensor::vector(vec![0.1, 0.2]));
        let probs = agg.classify(&mut tape, a).unwrap();
        let dist = LabelDistribution::from_node(&tape, probs);
        assert!(dist.probs[0] > 0.9999, "p(entailment) = {}", dist.probs[0]);
        assert_eq!(dist.predicted(), Label::Entailment);
        let sum: f64 = dist.probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn loss_values() {
        let params = ParamSet::new();
        let mut tape = Tape::new(&params);
        let one_hot = tape.constant(Tensor::vector(vec![0.0, 1.0, 0.0]));
        let l = cross_entropy(&mut tape, one_hot, Label::Neutral).unwrap();
        assert_eq!(tape.value(l), &[0.0]);

        let uniform = tape.constant(Tensor::vector(vec![1.0 / 3.0; 3]));
        let l = cross_entropy(&mut tape, uniform, Label::Entailment).unwrap();
        assert!((tape.value(l)[0] - 3.0f64.ln()).abs() < 1e-12);
        assert!((tape.value(l)[0] - 1.0986122886681098).abs() < 1e-12);

        // Never negative, even on a vanishing probability.
        let tiny = tape.constant(Tensor::vector(vec![1e-300, 0.5, 0.5 - 1e-300]));
        let l = cross_entropy(&mut tape, tiny, Label::Entailment).unwrap();
        assert!(tape.value(l)[0] >= 0.0);
        assert!(tape.value(l)[0].is_finite());
    }

    #[test]
    fn prediction_invariant_to_constant_logit_shift() {
        let (params, agg) = rig(6, 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut shifted_params = params.clone();
        for v in shifted_params.get_mut(agg.b).data_mut() {
            *v += 123.0;
        }
        for _ in 0..20 {
            let a_data: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let predict = |ps: &ParamSet| {
                let mut tape = Tape::new(ps);
                let a = tape.constant(Tensor::vector(a_data.clone()));
                let probs = agg.classify(&mut tape, a).unwrap();
                LabelDistribution::from_node(&tape, probs).predicted()
            };
            assert_eq!(predict(&params), predict(&shifted_params));
        }
    }
}
