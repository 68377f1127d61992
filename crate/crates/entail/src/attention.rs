//! Attention alignment of hypothesis phrase encodings over premise phrase
//! encodings.
//!
//! For every hypothesis encoding the premise encodings are scored by dot
//! product and combined into an attention-weighted summary t_p. Two
//! normalizations are supported: `Softmax` (default, always well defined)
//! and `Literal`, which divides raw scores by their sum and therefore
//! rejects inputs whose scores cancel to nearly zero.

use crate::encoders::EncodedSentence;
use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};

pub const LITERAL_NORM_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    /// Weights = softmax(scores); every weight in (0,1).
    Softmax,
    /// Weights = scores / sum(scores); faithful raw normalization, may
    /// produce negative weights and fails on near-zero score sums.
    Literal,
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(AttentionMode::Softmax),
            "literal" => Ok(AttentionMode::Literal),
            other => Err(Error::Config(format!("unknown attention mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttentionMode::Softmax => "softmax",
            AttentionMode::Literal => "literal",
        })
    }
}

/// Result of aligning one hypothesis over one premise: a |H_e| x |P_e|
/// weight matrix (plain values, for inspection and serialization) and the
/// per-hypothesis-encoding summary nodes t_p (graph values, for training).
#[derive(Debug, Clone)]
pub struct AttentionAlignment {
    pub weights: Vec<Vec<f64>>,
    pub summaries: Vec<NodeId>,
}

impl AttentionAlignment {
    /// Ordered (t_p, H_e^p) pairs, one per hypothesis encoding.
    pub fn align_pairs(&self, hypothesis: &EncodedSentence) -> Vec<(NodeId, NodeId)> {
        self.summaries
            .iter()
            .copied()
            .zip(hypothesis.encodings.iter().copied())
            .collect()
    }
}

/// Score every premise encoding against every hypothesis encoding and
/// build the weighted premise summaries.
pub fn attend(
    tape: &mut Tape,
    premise: &EncodedSentence,
    hypothesis: &EncodedSentence,
    mode: AttentionMode,
) -> Result<AttentionAlignment> {
    if premise.encodings.is_empty() || hypothesis.encodings.is_empty() {
        return Err(Error::Argument("attend requires non-empty encodings".into()));
    }
    let p_dim = tape.shape(premise.encodings[0]).to_vec();
    let h_dim = tape.shape(hypothesis.encodings[0]).to_vec();
    if p_dim != h_dim {
        return Err(Error::Dimension { op: "attend", lhs: p_dim, rhs: h_dim });
    }

    let mut weights = Vec::with_capacity(hypothesis.encodings.len());
    let mut summaries = Vec::with_capacity(hypothesis.encodings.len());
    for &h_enc in &hypothesis.encodings {
        let scores: Vec<NodeId> = premise
            .encodings
            .iter()
            .map(|&p_enc| tape.dot(p_enc, h_enc))
            .collect::<Result<_>>()?;
        let score_vec = tape.concat(&scores)?;

        let weight_vec = match mode {
            AttentionMode::Softmax => tape.softmax(score_vec)?,
            AttentionMode::Literal => {
                let total = tape.sum(score_vec);
                let sum_abs = tape.value(total)[0].abs();
                if sum_abs < LITERAL_NORM_THRESHOLD {
                    return Err(Error::DegenerateNormalization {
                        sum_abs,
                        threshold: LITERAL_NORM_THRESHOLD,
                    });
                }
                tape.div(score_vec, total)?
            }
        };
        weights.push(tape.value(weight_vec).to_vec());

        // t_p = sum_i a_i * P_e^i
        let mut summary: Option<NodeId> = None;
        for (i, &p_enc) in premise.encodings.iter().enumerate() {
            let a_i = tape.slice(weight_vec, i, 1)?;
            let scaled = tape.mul(p_enc, a_i)?;
            summary = Some(match summary {
                Some(acc) => tape.add(acc, scaled)?,
                None => scaled,
            });
        }
        summaries.push(summary.expect("premise is non-empty"));
    }
    Ok(AttentionAlignment { weights, summaries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{EncodedSentence, EncodingKind};
    use crate::gradcheck::gradcheck;
    use crate::tape::ParamSet;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sentence(tape: &mut Tape, vectors: &[Vec<f64>]) -> EncodedSentence {
        let encodings = vectors
            .iter()
            .map(|v| tape.constant(Tensor::vector(v.clone())))
            .collect::<Vec<_>>();
        EncodedSentence {
            source_length: encodings.len(),
            encodings,
            kind: EncodingKind::BilstmEnhanced,
        }
    }

    #[test]
    fn identical_premise_encodings_give_uniform_weights() {
        for mode in [AttentionMode::Softmax, AttentionMode::Literal] {
            let params = ParamSet::new();
            let mut tape = Tape::new(&params);
            let premise = sentence(&mut tape, &vec![vec![0.5, 1.0]; 4]);
            let hypothesis = sentence(&mut tape, &[vec![1.0, 2.0]]);
            let alignment = attend(&mut tape, &premise, &hypothesis, mode).unwrap();
            for &w in &alignment.weights[0] {
                assert!((w - 0.25).abs() < 1e-9, "{mode}: weight {w}");
            }
            let t_p = tape.value(alignment.summaries[0]);
            assert!((t_p[0] - 0.5).abs() < 1e-9);
            assert!((t_p[1] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn literal_mode_hand_example() {
        // H = [1,0], premise {[2,0],[1,0],[1,0]}: scores (2,1,1), sum 4,
        // weights (0.5, 0.25, 0.25), t_p = [1.5, 0].
        let params = ParamSet::new();
        let mut tape = Tape::new(&params);
        let premise = sentence(&mut tape, &[vec![2.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]]);
        let hypothesis = sentence(&mut tape, &[vec![1.0, 0.0]]);
        let alignment = attend(&mut tape, &premise, &hypothesis, AttentionMode::Literal).unwrap();
        let w = &alignment.weights[0];
        assert!((w[0] - 0.5).abs() < 1e-12);
        assert!((w[1] - 0.25).abs() < 1e-12);
        assert!((w[2] - 0.25).abs() < 1e-12);
        let t_p = tape.value(alignment.summaries[0]);
        assert!((t_p[0] - 1.5).abs() < 1e-12);
        assert!(t_p[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_mode_two_scores() {
        // Scores (1, 0) -> weights ~ (0.7311, 0.2689).
        let params = ParamSet::new();
        let mut tape = Tape::new(&params);
        let premise = sentence(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let hypothesis = sentence(&mut tape, &[vec![1.0, 0.0]]);
        let alignment = attend(&mut tape, &premise, &hypothesis, AttentionMode::Softmax).unwrap();
        let w = &alignment.weights[0];
        assert!((w[0] - 0.73105857863).abs() < 1e-9);
        assert!((w[1] - 0.26894142137).abs() < 1e-9);
    }

    #[test]
    fn literal_mode_rejects_degenerate_normalization() {
        let params = ParamSet::new();
        let mut tape = Tape::new(&params);
        let premise = sentence(&mut tape, &[vec![0.0, 1.0], vec![0.0, -1.0]]);
        let hypothesis = sentence(&mut tape, &[vec![1.0, 0.0]]);
        let err = attend(&mut tape, &premise, &hypothesis, AttentionMode::Literal).unwrap_err();
        assert!(matches!(err, Error::DegenerateNormalization { .. }), "{err}");
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let params = ParamSet::new();
        let mut tape = Tape::new(&params);
        let premise = sentence(&mut tape, &[vec![1.0, 0.0, 0.0]]);
        let hypothesis = sentence(&mut tape, &[vec![1.0, 0.0]]);
        assert!(attend(&mut tape, &premise, &hypothesis, AttentionMode::Softmax).is_err());
    }

    #[test]
    fn rows_are_stochastic_and_softmax_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let params = ParamSet::new();
            let mut tape = Tape::new(&params);
            let n_p = rng.gen_range(1..6);
            let n_h = rng.gen_range(1..6);
            let dim = rng.gen_range(1..5);
            let rand_vecs = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Vec<f64>> {
                (0..n)
                    .map(|_| (0..dim).map(|_| rng.gen_range(0.1..1.5)).collect())
                    .collect()
            };
            let pv = rand_vecs(&mut rng, n_p);
            let premise = sentence(&mut tape, &pv);
            let hv = rand_vecs(&mut rng, n_h);
            let hypothesis = sentence(&mut tape, &hv);
            for mode in [AttentionMode::Softmax, AttentionMode::Literal] {
                let alignment = attend(&mut tape, &premise, &hypothesis, mode).unwrap();
                for (p, row) in alignment.weights.iter().enumerate() {
                    let sum: f64 = row.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-6, "{mode} row {p} sums to {sum}");
                    if mode == AttentionMode::Softmax {
                        assert!(row.iter().all(|&w| w > 0.0 && w < 1.0 || row.len() == 1));
                        // Monotone in the scores.
                        let scores: Vec<f64> = pv
                            .iter()
                            .map(|pvec| {
                                pvec.iter().zip(&hv[p]).map(|(a, b)| a * b).sum::<f64>()
                            })
                            .collect();
                        for i in 0..row.len() {
                            for j in 0..row.len() {
                                if scores[i] > scores[j] {
                                    assert!(row[i] > row[j]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn summary_stays_in_convex_hull_of_premise() {
        // 2-D toy: softmax weights are positive and sum to 1, so t_p must
        // reproduce the independently computed convex combination.
        let params = ParamSet::new();
        let mut tape = Tape::new(&params);
        let pv = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let premise = sentence(&mut tape, &pv);
        let hypothesis = sentence(&mut tape, &[vec![0.7, 0.4]]);
        let alignment = attend(&mut tape, &premise, &hypothesis, AttentionMode::Softmax).unwrap();
        let w = &alignment.weights[0];
        assert!(w.iter().all(|&x| x > 0.0));
        let expect: Vec<f64> = (0..2)
            .map(|d| w.iter().zip(&pv).map(|(wi, p)| wi * p[d]).sum())
            .collect();
        let t_p = tape.value(alignment.summaries[0]);
        for d in 0..2 {
            assert!((t_p[d] - expect[d]).abs() < 1e-12);
        }
        // Inside the bounding box of the premise encodings.
        for d in 0..2 {
            let lo = pv.iter().map(|p| p[d]).fold(f64::INFINITY, f64::min);
            let hi = pv.iter().map(|p| p[d]).fold(f64::NEG_INFINITY, f64::max);
            assert!(t_p[d] >= lo && t_p[d] <= hi);
        }
    }

    #[test]
    fn one_hot_weights_select_a_single_premise_encoding() {
        // Literal mode with scores (1, 0, 0) gives a one-hot row.
        let params = ParamSet::new();
        let mut tape = Tape::new(&params);
        let pv = vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![0.0, -1.0]];
        let premise = sentence(&mut tape, &pv);
        let hypothesis = sentence(&mut tape, &[vec![1.0, 0.0]]);
        let alignment = attend(&mut tape, &premise, &hypothesis, AttentionMode::Literal).unwrap();
        assert_eq!(alignment.weights[0], vec![1.0, 0.0, 0.0]);
        assert_eq!(tape.value(alignment.summaries[0]), &pv[0][..]);
    }

    #[test]
    fn align_pairs_preserves_order_and_identity() {
        let params = ParamSet::new();
        let mut tape = Tape::new(&params);
        let premise = sentence(&mut tape, &vec![vec![1.0, 0.5]; 3]);
        let hyp_vecs: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 1.0]).collect();
        let hypothesis = sentence(&mut tape, &hyp_vecs);
        let alignment = attend(&mut tape, &premise, &hypothesis, AttentionMode::Softmax).unwrap();
        let pairs = alignment.align_pairs(&hypothesis);
        assert_eq!(pairs.len(), 5);
        for (p, (t_p, h_enc)) in pairs.iter().enumerate() {
            assert_eq!(*h_enc, hypothesis.encodings[p]);
            assert_eq!(*t_p, alignment.summaries[p]);
        }
    }

    #[test]
    fn gradcheck_through_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let dim = 3;
        let p1 = Tensor::vector((0..dim).map(|_| rng.gen_range(-0.9..0.9)).collect());
        let p2 = Tensor::vector((0..dim).map(|_| rng.gen_range(-0.9..0.9)).collect());
        let h1 = Tensor::vector((0..dim).map(|_| rng.gen_range(-0.9..0.9)).collect());
        let err = gradcheck(&[p1, p2, h1], |tape, ids| {
            let premise = EncodedSentence {
                encodings: vec![ids[0], ids[1]],
                kind: EncodingKind::BilstmEnhanced,
                source_length: 2,
            };
            let hypothesis = EncodedSentence {
                encodings: vec![ids[2]],
                kind: EncodingKind::BilstmEnhanced,
                source_length: 1,
            };
            let alignment = attend(tape, &premise, &hypothesis, AttentionMode::Softmax)?;
            let w = tape.constant(Tensor::vector(vec![1.0, -0.5, 0.75]));
            let weighted = tape.mul(alignment.summaries[0], w)?;
            Ok(tape.sum(weighted))
        })
        .unwrap();
        assert!(err < 1e-6, "attention gradcheck error {err}");
    }
}
