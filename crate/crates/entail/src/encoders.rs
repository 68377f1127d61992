//! Sentence encoders: a bi-directional LSTM with word-vector enhancement
//! and a complete binary-tree LSTM.
//!
//! Both consume transformed word vectors and produce an ordered list of
//! phrase-encoding nodes. For an n-token sentence the enhanced bi-LSTM
//! path yields n encodings of dim `word_dim + 2*hidden`; the btree path
//! yields 2n-1 encodings of dim `hidden` (leaves left to right, then each
//! level bottom-up left to right).

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{NodeId, ParamId, ParamSet, Tape};
use crate::tensor::Tensor;

/// Which encoder produced a sentence encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodingKind {
    BilstmEnhanced,
    Btree,
}

impl std::str::FromStr for EncodingKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilstm" => Ok(EncodingKind::BilstmEnhanced),
            "btree" => Ok(EncodingKind::Btree),
            other => Err(Error::Config(format!(
                "unknown encoder '{other}' (expected 'bilstm' or 'btree')"
            ))),
        }
    }
}

impl std::fmt::Display for EncodingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EncodingKind::BilstmEnhanced => "bilstm",
            EncodingKind::Btree => "btree",
        })
    }
}

/// Ordered phrase encodings of one sentence, tied to the tape that
/// produced them.
#[derive(Debug, Clone)]
pub struct EncodedSentence {
    pub encodings: Vec<NodeId>,
    pub kind: EncodingKind,
    pub source_length: usize,
}

impl EncodedSentence {
    fn new(encodings: Vec<NodeId>, kind: EncodingKind, source_length: usize) -> Self {
        match kind {
            EncodingKind::BilstmEnhanced => debug_assert_eq!(encodings.len(), source_length),
            EncodingKind::Btree => debug_assert_eq!(encodings.len(), 2 * source_length - 1),
        }
        EncodedSentence { encodings, kind, source_length }
    }
}

/// One gate's parameters: input map, recurrence, bias.
#[derive(Debug, Clone, Copy)]
pub struct LstmGate {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
}

/// Chain-LSTM cell parameters, one gate set each for input, forget,
/// output and the candidate update.
#[derive(Debug, Clone, Copy)]
pub struct LstmCellParams {
    pub input: LstmGate,
    pub forget: LstmGate,
    pub output: LstmGate,
    pub candidate: LstmGate,
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmCellParams {
    pub fn register(
        params: &mut ParamSet,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        forget_bias: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut gate = |name: &str, bias: f64| LstmGate {
            w: params.register(format!("{prefix}.{name}.w"), Tensor::xavier(input_dim, hidden, rng)),
            u: params.register(format!("{prefix}.{name}.u"), Tensor::xavier(hidden, hidden, rng)),
            b: params.register(format!("{prefix}.{name}.b"), Tensor::full(&[hidden], bias)),
        };
        LstmCellParams {
            input: gate("input", 0.0),
            forget: gate("forget", forget_bias),
            output: gate("output", 0.0),
            candidate: gate("candidate", 0.0),
            input_dim,
            hidden,
        }
    }

    fn gate_preact(&self, tape: &mut Tape, gate: &LstmGate, x: NodeId, h_prev: NodeId) -> Result<NodeId> {
        let w = tape.param(gate.w);
        let u = tape.param(gate.u);
        let b = tape.param(gate.b);
        let wx = tape.vecmat(x, w)?;
        let uh = tape.vecmat(h_prev, u)?;
        let s = tape.add(wx, uh)?;
        tape.add(s, b)
    }

    /// One step: gates i,f,o = sigma(Wx + Uh + b);
    /// c = f*c_prev + i*tanh(Wx + Uh + b); h = o*tanh(c).
    pub fn step(
        &self,
        tape: &mut Tape,
        x: NodeId,
        h_prev: NodeId,
        c_prev: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        if tape.shape(x) != [self.input_dim] {
            return Err(Error::Dimension {
                op: "lstm_step input",
                lhs: tape.shape(x).to_vec(),
                rhs: vec![self.input_dim],
            });
        }
        if tape.shape(h_prev) != [self.hidden] || tape.shape(c_prev) != [self.hidden] {
            return Err(Error::Dimension {
                op: "lstm_step state",
                lhs: tape.shape(h_prev).to_vec(),
                rhs: vec![self.hidden],
            });
        }
        let i_pre = self.gate_preact(tape, &self.input, x, h_prev)?;
        let i = tape.sigmoid(i_pre);
        let f_pre = self.gate_preact(tape, &self.forget, x, h_prev)?;
        let f = tape.sigmoid(f_pre);
        let o_pre = self.gate_preact(tape, &self.output, x, h_prev)?;
        let o = tape.sigmoid(o_pre);
        let cand_pre = self.gate_preact(tape, &self.candidate, x, h_prev)?;
        let cand = tape.tanh(cand_pre);

        let keep = tape.mul(f, c_prev)?;
        let write = tape.mul(i, cand)?;
        let c = tape.add(keep, write)?;
        let c_squashed = tape.tanh(c);
        let h = tape.mul(o, c_squashed)?;
        Ok((h, c))
    }

    pub fn zero_state(&self, tape: &mut Tape) -> (NodeId, NodeId) {
        let h = tape.constant(Tensor::zeros(&[self.hidden]));
        let c = tape.constant(Tensor::zeros(&[self.hidden]));
        (h, c)
    }
}

/// Run a forward and a backward LSTM over the words and concatenate the
/// two hidden states at each position. Initial states are zero.
pub fn bilstm_encode(
    tape: &mut Tape,
    fwd: &LstmCellParams,
    bwd: &LstmCellParams,
    words: &[NodeId],
) -> Result<Vec<NodeId>> {
    if words.is_empty() {
        return Err(Error::Argument("bilstm_encode on an empty sequence".into()));
    }
    let mut forward_states = Vec::with_capacity(words.len());
    let (mut h, mut c) = fwd.zero_state(tape);
    for &w in words {
        let (nh, nc) = fwd.step(tape, w, h, c)?;
        forward_states.push(nh);
        h = nh;
        c = nc;
    }
    // The backward pass consumes the reversed sequence; its states are
    // re-reversed so index i matches token i.
    let mut backward_states = Vec::with_capacity(words.len());
    let (mut h, mut c) = bwd.zero_state(tape);
    for &w in words.iter().rev() {
        let (nh, nc) = bwd.step(tape, w, h, c)?;
        backward_states.push(nh);
        h = nh;
        c = nc;
    }
    backward_states.reverse();

    forward_states
        .into_iter()
        .zip(backward_states)
        .map(|(f, b)| tape.concat(&[f, b]))
        .collect()
}

/// Augment each bi-LSTM state with its word vector: position i becomes
/// [word_i ; state_i]. Applies only to the bi-LSTM path.
pub fn enhance(tape: &mut Tape, words: &[NodeId], states: &[NodeId]) -> Result<EncodedSentence> {
    if words.len() != states.len() {
        return Err(Error::Dimension {
            op: "enhance",
            lhs: vec![words.len()],
            rhs: vec![states.len()],
        });
    }
    let encodings: Vec<NodeId> = words
        .iter()
        .zip(states)
        .map(|(&w, &s)| tape.concat(&[w, s]))
        .collect::<Result<_>>()?;
    Ok(EncodedSentence::new(encodings, EncodingKind::BilstmEnhanced, words.len()))
}

/// Binary-tree LSTM parameters. Leaves consume a word vector through the
/// per-gate input maps; internal nodes combine two children through
/// per-child recurrences, with one forget gate per child driven by all
/// children (four recurrence matrices).
#[derive(Debug, Clone)]
pub struct BtreeLstmParams {
    // Leaf input maps, one per gate.
    pub w_input: ParamId,
    pub w_output: ParamId,
    pub w_candidate: ParamId,
    // Per-child recurrences for input/output/candidate: [left, right].
    pub u_input: [ParamId; 2],
    pub u_output: [ParamId; 2],
    pub u_candidate: [ParamId; 2],
    // Forget recurrences indexed [gated child][source child].
    pub u_forget: [[ParamId; 2]; 2],
    pub b_input: ParamId,
    pub b_output: ParamId,
    pub b_candidate: ParamId,
    pub b_forget: [ParamId; 2],
    pub word_dim: usize,
    pub hidden: usize,
}

impl BtreeLstmParams {
    pub fn register(
        params: &mut ParamSet,
        prefix: &str,
        word_dim: usize,
        hidden: usize,
        forget_bias: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut mat = |name: String, rows: usize| params.register(name, Tensor::xavier(rows, hidden, rng));
        let w_input = mat(format!("{prefix}.leaf.input.w"), word_dim);
        let w_output = mat(format!("{prefix}.leaf.output.w"), word_dim);
        let w_candidate = mat(format!("{prefix}.leaf.candidate.w"), word_dim);
        let u_input = [
            mat(format!("{prefix}.rec.input.left"), hidden),
            mat(format!("{prefix}.rec.input.right"), hidden),
        ];
        let u_output = [
            mat(format!("{prefix}.rec.output.left"), hidden),
            mat(format!("{prefix}.rec.output.right"), hidden),
        ];
        let u_candidate = [
            mat(format!("{prefix}.rec.candidate.left"), hidden),
            mat(format!("{prefix}.rec.candidate.right"), hidden),
        ];
        let u_forget = [
            [
                mat(format!("{prefix}.rec.forget.left.left"), hidden),
                mat(format!("{prefix}.rec.forget.left.right"), hidden),
            ],
            [
                mat(format!("{prefix}.rec.forget.right.left"), hidden),
                mat(format!("{prefix}.rec.forget.right.right"), hidden),
            ],
        ];
        BtreeLstmParams {
            w_input,
            w_output,
            w_candidate,
            u_input,
            u_output,
            u_candidate,
            u_forget,
            b_input: params.register(format!("{prefix}.bias.input"), Tensor::zeros(&[hidden])),
            b_output: params.register(format!("{prefix}.bias.output"), Tensor::zeros(&[hidden])),
            b_candidate: params.register(format!("{prefix}.bias.candidate"), Tensor::zeros(&[hidden])),
            b_forget: [
                params.register(format!("{prefix}.bias.forget.left"), Tensor::full(&[hidden], forget_bias)),
                params.register(format!("{prefix}.bias.forget.right"), Tensor::full(&[hidden], forget_bias)),
            ],
            word_dim,
            hidden,
        }
    }

    /// Leaf state from a word vector: children are absent (zero states),
    /// so recurrence terms vanish and the forget gates gate nothing.
    fn leaf(&self, tape: &mut Tape, word: NodeId) -> Result<(NodeId, NodeId)> {
        if tape.shape(word) != [self.word_dim] {
            return Err(Error::Dimension {
                op: "btree leaf input",
                lhs: tape.shape(word).to_vec(),
                rhs: vec![self.word_dim],
            });
        }
        let affine = |tape: &mut Tape, w: ParamId, b: ParamId| -> Result<NodeId> {
            let wn = tape.param(w);
            let bn = tape.param(b);
            let wx = tape.vecmat(word, wn)?;
            tape.add(wx, bn)
        };
        let i_pre = affine(tape, self.w_input, self.b_input)?;
        let i = tape.sigmoid(i_pre);
        let o_pre = affine(tape, self.w_output, self.b_output)?;
        let o = tape.sigmoid(o_pre);
        let cand_pre = affine(tape, self.w_candidate, self.b_candidate)?;
        let cand = tape.tanh(cand_pre);

        let c = tape.mul(i, cand)?;
        let c_squashed = tape.tanh(c);
        let h = tape.mul(o, c_squashed)?;
        Ok((h, c))
    }

    /// Internal node over two children. The input term is zero here (no
    /// word), so only recurrences and biases contribute.
    fn combine(
        &self,
        tape: &mut Tape,
        left: (NodeId, NodeId),
        right: (NodeId, NodeId),
    ) -> Result<(NodeId, NodeId)> {
        let (h_l, c_l) = left;
        let (h_r, c_r) = right;
        let children = [h_l, h_r];

        let rec_sum = |tape: &mut Tape, us: &[ParamId; 2], b: ParamId| -> Result<NodeId> {
            let ul = tape.param(us[0]);
            let ur = tape.param(us[1]);
            let tl = tape.vecmat(h_l, ul)?;
            let tr = tape.vecmat(h_r, ur)?;
            let s = tape.add(tl, tr)?;
            let bn = tape.param(b);
            tape.add(s, bn)
        };

        let i_pre = rec_sum(tape, &self.u_input, self.b_input)?;
        let i = tape.sigmoid(i_pre);
        let o_pre = rec_sum(tape, &self.u_output, self.b_output)?;
        let o = tape.sigmoid(o_pre);
        let cand_pre = rec_sum(tape, &self.u_candidate, self.b_candidate)?;
        let cand = tape.tanh(cand_pre);

        // One forget gate per child, each seeing both children.
        let mut c = tape.mul(i, cand)?;
        for (k, &c_child) in [c_l, c_r].iter().enumerate() {
            let mut pre = {
                let u = tape.param(self.u_forget[k][0]);
                tape.vecmat(children[0], u)?
            };
            let u = tape.param(self.u_forget[k][1]);
            let t = tape.vecmat(children[1], u)?;
            pre = tape.add(pre, t)?;
            let b = tape.param(self.b_forget[k]);
            pre = tape.add(pre, b)?;
            let f_k = tape.sigmoid(pre);
            let kept = tape.mul(f_k, c_child)?;
            c = tape.add(c, kept)?;
        }
        let c_squashed = tape.tanh(c);
        let h = tape.mul(o, c_squashed)?;
        Ok((h, c))
    }
}

/// Encode a sentence over a complete binary tree built level by level:
/// adjacent nodes pair up as (1,2), (3,4), ...; an odd trailing node is
/// promoted unchanged to the next level. Emits exactly 2n-1 encodings.
pub fn btree_encode(
    tape: &mut Tape,
    params: &BtreeLstmParams,
    words: &[NodeId],
) -> Result<EncodedSentence> {
    if words.is_empty() {
        return Err(Error::Argument("btree_encode on an empty sequence".into()));
    }
    let mut encodings = Vec::with_capacity(2 * words.len() - 1);
    let mut level: Vec<(NodeId, NodeId)> = Vec::with_capacity(words.len());
    for &w in words {
        let state = params.leaf(tape, w)?;
        encodings.push(state.0);
        level.push(state);
    }
    while level.len() > 1 {
        let mut next = Vec::with_capacity(level.len() / 2 + 1);
        let mut chunks = level.chunks_exact(2);
        for pair in &mut chunks {
            let combined = params.combine(tape, pair[0], pair[1])?;
            encodings.push(combined.0);
            next.push(combined);
        }
        // A promoted node keeps its state and is not re-emitted.
        if let [odd] = chunks.remainder() {
            next.push(*odd);
        }
        level = next;
    }
    Ok(EncodedSentence::new(encodings, EncodingKind::Btree, words.len()))
}
