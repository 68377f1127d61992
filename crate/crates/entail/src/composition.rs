//! Soft-gated bank of k two-layer feed-forward operator networks.
//!
//! Every aligned pair [t_p ; H_e^p] is pushed through all k operators
//! (two sigmoid layers each, optionally batch-normalized after each
//! affine) and through a softmax gate over the same input; the pair's
//! output O_p is the gate-weighted convex combination of the k operator
//! outputs, so each component of O_p stays inside the envelope of the
//! operator outputs.

use rand_chacha::ChaCha8Rng;

use crate::batchnorm::{BatchNormState, Phase};
use crate::error::{Error, Result};
use crate::tape::{BatchStats, NodeId, ParamId, ParamSet, Tape};
use crate::tensor::Tensor;

/// One operator: two affine layers with their normalization states.
///
/// When batch norm is enabled the affine biases are omitted: mean
/// subtraction cancels any constant row shift exactly, so a pre-norm bias
/// is a dead parameter (its gradient is identically zero) and the shift
/// role belongs to the norm's beta.
#[derive(Debug, Clone)]
pub struct OperatorNet {
    pub w1: ParamId,
    pub b1: Option<ParamId>,
    pub w2: ParamId,
    pub b2: Option<ParamId>,
    pub bn1: BatchNormState,
    pub bn2: BatchNormState,
}

#[derive(Debug, Clone)]
pub struct OperatorBank {
    pub operators: Vec<OperatorNet>,
    pub gate_w: ParamId,
    pub gate_b: ParamId,
    pub pair_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub batch_norm: bool,
}

/// Per-instance outputs of one composed batch plus the bookkeeping the
/// training loop needs (gate rows for inspection, batch-norm statistics
/// for running updates, keyed by position in [`OperatorBank::bn_states`]).
#[derive(Debug)]
pub struct ComposeOutput {
    pub outputs: Vec<NodeId>,
    pub gates: Vec<Vec<f64>>,
    pub bn_stats: Vec<(usize, BatchStats)>,
}

impl OperatorBank {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        params: &mut ParamSet,
        prefix: &str,
        k: usize,
        pair_dim: usize,
        hidden: usize,
        out_dim: usize,
        batch_norm: bool,
        bn_gamma_init: f64,
        bn_momentum: f64,
        bn_eps: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(k >= 1, "operator bank needs at least one operator");
        let operators = (0..k)
            .map(|i| OperatorNet {
                w1: params.register(format!("{prefix}.op{i}.w1"), Tensor::xavier(pair_dim, hidden, rng)),
                b1: (!batch_norm)
                    .then(|| params.register(format!("{prefix}.op{i}.b1"), Tensor::zeros(&[hidden]))),
                w2: params.register(format!("{prefix}.op{i}.w2"), Tensor::xavier(hidden, out_dim, rng)),
                b2: (!batch_norm)
                    .then(|| params.register(format!("{prefix}.op{i}.b2"), Tensor::zeros(&[out_dim]))),
                bn1: BatchNormState::register(
                    params,
                    &format!("{prefix}.op{i}.bn1"),
                    hidden,
                    bn_gamma_init,
                    bn_momentum,
                    bn_eps,
                ),
                bn2: BatchNormState::register(
                    params,
                    &format!("{prefix}.op{i}.bn2"),
                    out_dim,
                    bn_gamma_init,
                    bn_momentum,
                    bn_eps,
                ),
            })
            .collect();
        OperatorBank {
            operators,
            gate_w: params.register(format!("{prefix}.gate.w"), Tensor::xavier(pair_dim, k, rng)),
            gate_b: params.register(format!("{prefix}.gate.b"), Tensor::zeros(&[k])),
            pair_dim,
            hidden,
            out_dim,
            batch_norm,
        }
    }

    pub fn operator_count(&self) -> usize {
        self.operators.len()
    }

    /// All normalization states in a fixed order (op0.bn1, op0.bn2,
    /// op1.bn1, ...), the order `ComposeOutput::bn_stats` indexes into.
    pub fn bn_states_mut(&mut self) -> Vec<&mut BatchNormState> {
        self.operators
            .iter_mut()
            .flat_map(|op| [&mut op.bn1, &mut op.bn2])
            .collect()
    }

    pub fn bn_states(&self) -> Vec<&BatchNormState> {
        self.operators
            .iter()
            .flat_map(|op| [&op.bn1, &op.bn2])
            .collect()
    }

    /// Apply every operator and the gate to a batch of pair vectors and
    /// blend. The whole instance batch goes through each operator at once
    /// so normalization sees all instances together.
    pub fn compose_batch(
        &self,
        tape: &mut Tape,
        pairs: &[NodeId],
        phase: Phase,
    ) -> Result<ComposeOutput> {
        if pairs.is_empty() {
            return Err(Error::Argument("compose_batch on an empty pair list".into()));
        }
        for &p in pairs {
            if tape.shape(p) != [self.pair_dim] {
                return Err(Error::Dimension {
                    op: "compose_batch pair",
                    lhs: tape.shape(p).to_vec(),
                    rhs: vec![self.pair_dim],
                });
            }
        }
        let stack = tape.stack_rows(pairs)?;
        let b = pairs.len();
        let k = self.operator_count();

        // Gate: softmax over k per instance. Not normalized (the gate is
        // outside the task networks).
        let gate_w = tape.param(self.gate_w);
        let gate_b = tape.param(self.gate_b);
        let gate_lin = tape.matmul(stack, gate_w)?;
        let gate_shift = tape.add_row_broadcast(gate_lin, gate_b)?;
        let gate_rows = tape.softmax_rows(gate_shift)?;
        let gates: Vec<Vec<f64>> = (0..b)
            .map(|r| tape.value(gate_rows)[r * k..(r + 1) * k].to_vec())
            .collect();

        let mut bn_stats = Vec::new();
        let mut task_outputs = Vec::with_capacity(k);
        for (i, op) in self.operators.iter().enumerate() {
            let out = self.task_layers(tape, op, stack, phase, Some((i, &mut bn_stats)))?;
            task_outputs.push(out);
        }

        // O_p per instance: sum_i g_i * task_i.
        let mut outputs = Vec::with_capacity(b);
        for r in 0..b {
            let gate_row = tape.row(gate_rows, r)?;
            let mut acc: Option<NodeId> = None;
            for (i, &task_out) in task_outputs.iter().enumerate() {
                let g_i = tape.slice(gate_row, i, 1)?;
                let task_row = tape.row(task_out, r)?;
                let scaled = tape.mul(task_row, g_i)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, scaled)?,
                    None => scaled,
                });
            }
            outputs.push(acc.expect("bank has at least one operator"));
        }
        Ok(ComposeOutput { outputs, gates, bn_stats })
    }

    /// Both layers of one operator over a stacked `[B, pair_dim]` batch.
    fn task_layers(
        &self,
        tape: &mut Tape,
        op: &OperatorNet,
        stack: NodeId,
        phase: Phase,
        mut stats_sink: Option<(usize, &mut Vec<(usize, BatchStats)>)>,
    ) -> Result<NodeId> {
        let w1 = tape.param(op.w1);
        let mut z1 = tape.matmul(stack, w1)?;
        if let Some(b1) = op.b1 {
            let b = tape.param(b1);
            z1 = tape.add_row_broadcast(z1, b)?;
        }
        if self.batch_norm {
            z1 = op.bn1.apply(tape, z1, phase)?;
            if let Some((i, sink)) = stats_sink.as_mut() {
                if let Some(s) = tape.batch_stats(z1) {
                    sink.push((2 * *i, s));
                }
            }
        }
        let a1 = tape.sigmoid(z1);

        let w2 = tape.param(op.w2);
        let mut z2 = tape.matmul(a1, w2)?;
        if let Some(b2) = op.b2 {
            let b = tape.param(b2);
            z2 = tape.add_row_broadcast(z2, b)?;
        }
        if self.batch_norm {
            z2 = op.bn2.apply(tape, z2, phase)?;
            if let Some((i, sink)) = stats_sink.as_mut() {
                if let Some(s) = tape.batch_stats(z2) {
                    sink.push((2 * *i + 1, s));
                }
            }
        }
        Ok(tape.sigmoid(z2))
    }

    /// Single operator applied to one pair vector (normalization in
    /// running-statistics mode; a lone instance has no batch).
    pub fn task(&self, tape: &mut Tape, index: usize, pair: NodeId) -> Result<NodeId> {
        if index >= self.operator_count() {
            return Err(Error::Argument(format!(
                "operator index {index} out of range (bank has {})",
                self.operator_count()
            )));
        }
        let stack = tape.stack_rows(&[pair])?;
        let out = self.task_layers(tape, &self.operators[index], stack, Phase::Eval, None)?;
        tape.row(out, 0)
    }

    /// Gate vector for one pair: k positive weights summing to 1.
    pub fn gate(&self, tape: &mut Tape, pair: NodeId) -> Result<NodeId> {
        if tape.shape(pair) != [self.pair_dim] {
            return Err(Error::Dimension {
                op: "gate",
                lhs: tape.shape(pair).to_vec(),
                rhs: vec![self.pair_dim],
            });
        }
        let w = tape.param(self.gate_w);
        let b = tape.param(self.gate_b);
        let lin = tape.vecmat(pair, w)?;
        let shifted = tape.add(lin, b)?;
        tape.softmax(shifted)
    }

    /// O_p for a single aligned pair (t_p, H_e^p).
    pub fn compose_pair(&self, tape: &mut Tape, pair: (NodeId, NodeId)) -> Result<NodeId> {
        let joined = tape.concat(&[pair.0, pair.1])?;
        let out = self.compose_batch(tape, &[joined], Phase::Eval)?;
        Ok(out.outputs[0])
    }
}
