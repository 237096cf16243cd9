//! Attention LSTM decoder with one pointer-generator per passage.
//!
//! Parameters are shared across passages; every passage `k` keeps its own
//! recurrent state and attends over its own unified memory and over the
//! question memory. Each passage produces a gated mixture of a vocabulary
//! distribution and two copy distributions, and the final distribution over
//! the extended vocabulary is the mean of those mixtures.

use std::cmp::Ordering;

use crate::config::ModelConfig;
use crate::encoder::Mpm;
use crate::error::{Error, Result};
use crate::lstm::LstmParams;
use crate::numerics::{SeededRng, Var};
use crate::params::{glorot, ParamId, ParamStore, Session};
use crate::vocab::{TokenId, BOS, EOS, UNK};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Additive attention `e_i = tanh(w_h·m_i + w_s·s + b)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionHead {
    pub w_h: ParamId,
    pub w_s: ParamId,
    pub b: ParamId,
}

impl AttentionHead {
    fn register(
        store: &mut ParamStore,
        prefix: &str,
        memory_width: usize,
        hidden: usize,
        rng: &mut SeededRng,
    ) -> Self {
        AttentionHead {
            w_h: store.add(format!("{prefix}.w_h"), glorot(rng, &[memory_width])),
            w_s: store.add(format!("{prefix}.w_s"), glorot(rng, &[hidden])),
            b: store.add(format!("{prefix}.b"), crate::numerics::NdArray::zeros(&[1])),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderParams {
    /// Word embeddings shared with the encoder; the previous output token
    /// is fed back through this table.
    pub embedding: ParamId,
    pub cell: LstmParams,
    pub attn: AttentionHead,
    pub attn_q: AttentionHead,
    /// `F × V_out` with `F = S + |c| + |c^q|`.
    pub out_w: ParamId,
    pub out_b: ParamId,
    /// `F × 3`: vocabulary, passage-copy and question-copy gates.
    pub gate_w: ParamId,
    pub gate_b: ParamId,
    pub embed_dim: usize,
    pub passage_width: usize,
    pub question_width: usize,
    pub hidden: usize,
    /// Rows of the embedding table.
    pub input_vocab: usize,
    /// Size of the generated vocabulary (a prefix of the input vocabulary).
    pub output_vocab: usize,
}

impl DecoderParams {
    pub fn register(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        embedding: ParamId,
        input_vocab: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let d = cfg.embed_dim;
        let wu = cfg.passage_memory_width();
        let wq = cfg.mpm_width();
        let hidden = cfg.decoder_hidden;
        let output_vocab = cfg.decoder_vocab.map_or(input_vocab, |v| v.min(input_vocab));
        let cell = LstmParams::register(store, "decoder.cell", d + wu + wq, hidden, rng);
        let attn = AttentionHead::register(store, "decoder.attn", wu, hidden, rng);
        let attn_q = AttentionHead::register(store, "decoder.attn_q", wq, hidden, rng);
        let f = hidden + wu + wq;
        let out_w = store.add("decoder.out_w", glorot(rng, &[f, output_vocab]));
        let out_b = store.add(
            "decoder.out_b",
            crate::numerics::NdArray::zeros(&[output_vocab]),
        );
        let gate_w = store.add("decoder.gate_w", glorot(rng, &[f, 3]));
        let gate_b = store.add("decoder.gate_b", crate::numerics::NdArray::zeros(&[3]));
        DecoderParams {
            embedding,
            cell,
            attn,
            attn_q,
            out_w,
            out_b,
            gate_w,
            gate_b,
            embed_dim: d,
            passage_width: wu,
            question_width: wq,
            hidden,
            input_vocab,
            output_vocab,
        }
    }

    /// Embedding row fed back for a previously emitted (extended) id.
    pub fn input_id(&self, id: TokenId) -> TokenId {
        if id < self.input_vocab {
            id
        } else {
            UNK
        }
    }
}

/// One attention source: memory rows, mask, extended ids of its tokens and
/// the step-independent part of the attention energies.
#[derive(Clone, Debug)]
pub struct SourceMemory {
    pub rows: Var,
    pub valid: Vec<bool>,
    pub ids: Vec<TokenId>,
    projected: Var,
}

impl SourceMemory {
    pub fn new(s: &mut Session, head: &AttentionHead, mpm: &Mpm, ids: Vec<TokenId>) -> Result<Self> {
        if ids.len() != mpm.valid.len() {
            return Err(Error::dim("SourceMemory", &[mpm.valid.len()], &[ids.len()]));
        }
        let projected = project_memory(s, head, mpm.rows)?;
        Ok(SourceMemory {
            rows: mpm.rows,
            valid: mpm.valid.clone(),
            ids,
            projected,
        })
    }
}

/// Everything the decoder reads from the encoder for one example.
#[derive(Clone, Debug)]
pub struct DecoderMemory {
    pub passages: Vec<SourceMemory>,
    pub question: SourceMemory,
    /// `V + U` for this example.
    pub extended_size: usize,
}

impl DecoderMemory {
    pub fn new(
        s: &mut Session,
        params: &DecoderParams,
        passages: &[(Mpm, Vec<TokenId>)],
        question: (&Mpm, Vec<TokenId>),
        extended_size: usize,
    ) -> Result<Self> {
        if passages.is_empty() {
            return Err(Error::Degenerate("decoder needs at least one passage".into()));
        }
        if extended_size < params.output_vocab {
            return Err(Error::Contract(format!(
                "extended vocabulary {extended_size} smaller than output vocabulary {}",
                params.output_vocab
            )));
        }
        let passages = passages
            .iter()
            .map(|(mpm, ids)| SourceMemory::new(s, &params.attn, mpm, ids.clone()))
            .collect::<Result<Vec<_>>>()?;
        let question = SourceMemory::new(s, &params.attn_q, question.0, question.1)?;
        Ok(DecoderMemory {
            passages,
            question,
            extended_size,
        })
    }
}

/// Recurrent state and previous contexts of one passage.
#[derive(Clone, Copy, Debug)]
pub struct PassageState {
    pub h: Var,
    pub c: Var,
    pub context: Var,
    pub question_context: Var,
}

#[derive(Clone, Debug)]
pub struct DecoderState {
    pub passages: Vec<PassageState>,
}

impl DecoderState {
    /// All-zero states and contexts for `k` passages.
    pub fn initial(s: &mut Session, params: &DecoderParams, k: usize) -> Self {
        let h = s.g.zeros(&[params.hidden]);
        let context = s.g.zeros(&[params.passage_width]);
        let question_context = s.g.zeros(&[params.question_width]);
        DecoderState {
            passages: vec![
                PassageState {
                    h,
                    c: h,
                    context,
                    question_context,
                };
                k
            ],
        }
    }
}

/// Per-passage distributions feeding the final mixture.
#[derive(Clone, Copy, Debug)]
pub struct PassageDists {
    /// `[s, c, c^q]`
    pub features: Var,
    pub vocab: Var,
    pub p_attn: Var,
    pub q_attn: Var,
}

/// Everything computed for one decoding step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub alpha: Vec<Var>,
    pub alpha_q: Vec<Var>,
    pub dists: Vec<PassageDists>,
    /// Gate triple `(g_v, g_a, g_q)` per passage.
    pub gates: Vec<Var>,
    /// Gated mixture per passage.
    pub mixtures: Vec<Var>,
    pub final_dist: Var,
}

/// Advances every passage state by one step with input
/// `[a_{t−1}, c^k_{t−1}, c^{q,k}_{t−1}]`. Returns the new `(h, c)` pairs.
pub fn step_state(
    s: &mut Session,
    params: &DecoderParams,
    state: &DecoderState,
    prev_embedding: Var,
) -> Result<Vec<(Var, Var)>> {
    state
        .passages
        .iter()
        .map(|p| {
            let x = s.g.concat(&[prev_embedding, p.context, p.question_context])?;
            params.cell.step(s, x, p.h, p.c)
        })
        .collect()
}

fn project_memory(s: &mut Session, head: &AttentionHead, rows: Var) -> Result<Var> {
    let shape = s.g.shape(rows).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::Degenerate("attention over an empty memory".into()));
    }
    let w_h = s.p(head.w_h);
    let w_col = s.g.reshape(w_h, &[shape[1], 1])?;
    let e = s.g.matmul(rows, w_col)?;
    s.g.reshape(e, &[shape[0]])
}

fn attend_projected(
    s: &mut Session,
    head: &AttentionHead,
    memory: Var,
    projected: Var,
    valid: &[bool],
    state: Var,
) -> Result<(Var, Var)> {
    let w_s = s.p(head.w_s);
    let b = s.p(head.b);
    let ss = s.g.mul(w_s, state)?;
    let ss = s.g.sum(ss);
    let bias = s.g.add(ss, b)?;
    let e = s.g.add_scalar(projected, bias)?;
    let e = s.g.tanh(e);
    let alpha = s.g.softmax(e, Some(valid))?;
    let context = s.g.matmul(alpha, memory)?;
    Ok((alpha, context))
}

/// `α = softmax(tanh(w_h·m_i + w_s·s + b))` over unmasked rows and the
/// context `Σ α_i m_i`.
pub fn attend(
    s: &mut Session,
    head: &AttentionHead,
    memory: Var,
    valid: &[bool],
    state: Var,
) -> Result<(Var, Var)> {
    let projected = project_memory(s, head, memory)?;
    attend_projected(s, head, memory, projected, valid, state)
}

/// Generated distribution over the output vocabulary, zero-padded to
/// `extended_size`.
pub fn vocab_dist(
    s: &mut Session,
    params: &DecoderParams,
    features: Var,
    extended_size: usize,
) -> Result<Var> {
    let w = s.p(params.out_w);
    let b = s.p(params.out_b);
    let logits = s.g.matmul(features, w)?;
    let logits = s.g.add(logits, b)?;
    let probs = s.g.softmax(logits, None)?;
    let pad = extended_size.checked_sub(params.output_vocab).ok_or_else(|| {
        Error::Contract("extended vocabulary smaller than output vocabulary".into())
    })?;
    if pad == 0 {
        return Ok(probs);
    }
    let zeros = s.g.zeros(&[pad]);
    s.g.concat(&[probs, zeros])
}

/// Copy distributions: attention mass summed onto the extended id of each
/// source token.
pub fn copy_dists(
    s: &mut Session,
    alpha: Var,
    passage_ids: &[TokenId],
    alpha_q: Var,
    question_ids: &[TokenId],
    extended_size: usize,
) -> Result<(Var, Var)> {
    let p = s.g.scatter_add(alpha, passage_ids, extended_size)?;
    let q = s.g.scatter_add(alpha_q, question_ids, extended_size)?;
    Ok((p, q))
}

/// Gate triples and the mean over passages of the gated mixtures. Returns
/// `(gates, mixtures, final)`.
pub fn gates_and_final(
    s: &mut Session,
    params: &DecoderParams,
    dists: &[PassageDists],
) -> Result<(Vec<Var>, Vec<Var>, Var)> {
    if dists.is_empty() {
        return Err(Error::Degenerate("no passages to aggregate".into()));
    }
    let w = s.p(params.gate_w);
    let b = s.p(params.gate_b);
    let mut gates = Vec::with_capacity(dists.len());
    let mut mixtures = Vec::with_capacity(dists.len());
    for d in dists {
        let logits = s.g.matmul(d.features, w)?;
        let logits = s.g.add(logits, b)?;
        let g = s.g.softmax(logits, None)?;
        let gv = s.g.index(g, 0)?;
        let ga = s.g.index(g, 1)?;
        let gq = s.g.index(g, 2)?;
        let v = s.g.mul_scalar(d.vocab, gv)?;
        let p = s.g.mul_scalar(d.p_attn, ga)?;
        let q = s.g.mul_scalar(d.q_attn, gq)?;
        let m = s.g.add(v, p)?;
        let m = s.g.add(m, q)?;
        gates.push(g);
        mixtures.push(m);
    }
    let final_dist = s.g.mean(&mixtures)?;
    Ok((gates, mixtures, final_dist))
}

/// One decoding step after emitting `prev` (an extended id).
pub fn step(
    s: &mut Session,
    params: &DecoderParams,
    memory: &DecoderMemory,
    state: &DecoderState,
    prev: TokenId,
) -> Result<(StepOutput, DecoderState)> {
    if state.passages.len() != memory.passages.len() {
        return Err(Error::dim(
            "decoder step",
            &[state.passages.len()],
            &[memory.passages.len()],
        ));
    }
    let table = s.p(params.embedding);
    let prev_embedding = s.g.gather_rows(table, &[params.input_id(prev)])?;
    let prev_embedding = s.g.reshape(prev_embedding, &[params.embed_dim])?;
    let hc = step_state(s, params, state, prev_embedding)?;
    let k = hc.len();
    let mut out = StepOutput {
        alpha: Vec::with_capacity(k),
        alpha_q: Vec::with_capacity(k),
        dists: Vec::with_capacity(k),
        gates: Vec::new(),
        mixtures: Vec::new(),
        final_dist: hc[0].0,
    };
    let mut next = Vec::with_capacity(k);
    let q = &memory.question;
    for ((h, c), mem) in hc.into_iter().zip(&memory.passages) {
        let (alpha, context) =
            attend_projected(s, &params.attn, mem.rows, mem.projected, &mem.valid, h)?;
        let (alpha_q, question_context) =
            attend_projected(s, &params.attn_q, q.rows, q.projected, &q.valid, h)?;
        let features = s.g.concat(&[h, context, question_context])?;
        let vocab = vocab_dist(s, params, features, memory.extended_size)?;
        let (p_attn, q_attn) = copy_dists(s, alpha, &mem.ids, alpha_q, &q.ids, memory.extended_size)?;
        out.alpha.push(alpha);
        out.alpha_q.push(alpha_q);
        out.dists.push(PassageDists {
            features,
            vocab,
            p_attn,
            q_attn,
        });
        next.push(PassageState {
            h,
            c,
            context,
            question_context,
        });
    }
    let (gates, mixtures, final_dist) = gates_and_final(s, params, &out.dists)?;
    out.gates = gates;
    out.mixtures = mixtures;
    out.final_dist = final_dist;
    Ok((out, DecoderState { passages: next }))
}

/// Teacher-forced negative log-likelihood `−Σ_t log V_final[target_t]`,
/// feeding `⟨s⟩` and then each gold token.
pub fn teacher_forced_nll(
    s: &mut Session,
    params: &DecoderParams,
    memory: &DecoderMemory,
    targets: &[TokenId],
) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::Degenerate("empty target sequence".into()));
    }
    let mut state = DecoderState::initial(s, params, memory.passages.len());
    let mut prev = BOS;
    let mut terms = Vec::with_capacity(targets.len());
    for &t in targets {
        if t >= memory.extended_size {
            return Err(Error::Contract(format!(
                "target id {t} outside the extended vocabulary"
            )));
        }
        let (out, next) = step(s, params, memory, &state, prev)?;
        let p = s.g.index(out.final_dist, t)?;
        terms.push(s.g.log_clamped(p, PROB_FLOOR));
        state = next;
        prev = t;
    }
    let stacked = s.g.concat(&terms)?;
    let total = s.g.sum(stacked);
    Ok(s.g.scale(total, -1.0))
}

/// Highest-probability id; ties go to the lowest id.
pub fn argmax(dist: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > dist[best] {
            best = i;
        }
    }
    best
}

/// Greedy search over any step function. `expand(state, prefix)` returns
/// the next-token distribution and the successor state. The returned
/// sequence excludes the end token.
pub fn greedy_search<S>(
    init: S,
    max_len: usize,
    mut expand: impl FnMut(&S, &[TokenId]) -> Result<(Vec<f64>, S)>,
) -> Result<Vec<TokenId>> {
    let mut state = init;
    let mut tokens = Vec::new();
    while tokens.len() < max_len {
        let (dist, next) = expand(&state, &tokens)?;
        let tok = argmax(&dist);
        if tok == EOS {
            break;
        }
        tokens.push(tok);
        state = next;
    }
    Ok(tokens)
}

#[derive(Clone, Debug)]
pub struct Hypothesis<S = DecoderState> {
    /// Emitted ids, without the end token.
    pub tokens: Vec<TokenId>,
    /// Sum of clamped log-probabilities of every chosen token, including
    /// the end token when finished.
    pub log_prob: f64,
    pub finished: bool,
    pub state: S,
}

/// Beam search without length normalization. Hypotheses that emit the end
/// token retire to a finished pool; the search stops once the best finished
/// score is at least the best active score, since scores only decrease.
/// Returns the best finished hypothesis or, failing that, the best active
/// one at `max_len`.
pub fn beam_search<S: Clone>(
    init: S,
    beam_size: usize,
    max_len: usize,
    mut expand: impl FnMut(&S, &[TokenId]) -> Result<(Vec<f64>, S)>,
) -> Result<Hypothesis<S>> {
    if beam_size == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    let mut active = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
        state: init,
    }];
    let mut finished: Vec<Hypothesis<S>> = Vec::new();
    for _ in 0..max_len {
        // (score, hypothesis index, token)
        let mut candidates: Vec<(f64, usize, TokenId)> = Vec::new();
        let mut successors = Vec::with_capacity(active.len());
        for (hi, hyp) in active.iter().enumerate() {
            let (dist, next) = expand(&hyp.state, &hyp.tokens)?;
            let mut order: Vec<TokenId> = (0..dist.len()).collect();
            order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
            for &tok in order.iter().take(beam_size) {
                let score = hyp.log_prob + dist[tok].max(PROB_FLOOR).ln();
                candidates.push((score, hi, tok));
            }
            successors.push(next);
        }
        candidates.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next_active = Vec::with_capacity(beam_size);
        for &(score, hi, tok) in candidates.iter().take(beam_size) {
            let parent = &active[hi];
            if tok == EOS {
                finished.push(Hypothesis {
                    tokens: parent.tokens.clone(),
                    log_prob: score,
                    finished: true,
                    state: successors[hi].clone(),
                });
            } else {
                let mut tokens = parent.tokens.clone();
                tokens.push(tok);
                next_active.push(Hypothesis {
                    tokens,
                    log_prob: score,
                    finished: false,
                    state: successors[hi].clone(),
                });
            }
        }
        active = next_active;
        let best_active = active.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
        let best_finished = finished.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
        if active.is_empty() || best_finished >= best_active {
            break;
        }
    }
    let pool = if finished.is_empty() { active } else { finished };
    let mut best: Option<Hypothesis<S>> = None;
    for h in pool {
        if best.as_ref().is_none_or(|b| h.log_prob.partial_cmp(&b.log_prob) == Some(Ordering::Greater)) {
            best = Some(h);
        }
    }
    best.ok_or_else(|| Error::Degenerate("beam search produced no hypothesis".into()))
}

fn decode_step(
    s: &mut Session,
    params: &DecoderParams,
    memory: &DecoderMemory,
    state: &DecoderState,
    prefix: &[TokenId],
) -> Result<(Vec<f64>, DecoderState)> {
    let prev = prefix.last().copied().unwrap_or(BOS);
    let (out, next) = step(s, params, memory, state, prev)?;
    Ok((s.g.value(out.final_dist).data().to_vec(), next))
}

pub fn greedy_decode(
    s: &mut Session,
    params: &DecoderParams,
    memory: &DecoderMemory,
    max_len: usize,
) -> Result<Vec<TokenId>> {
    let init = DecoderState::initial(s, params, memory.passages.len());
    greedy_search(init, max_len, |st, prefix| {
        decode_step(s, params, memory, st, prefix)
    })
}

pub fn beam_decode(
    s: &mut Session,
    params: &DecoderParams,
    memory: &DecoderMemory,
    beam_size: usize,
    max_len: usize,
) -> Result<Hypothesis> {
    let init = DecoderState::initial(s, params, memory.passages.len());
    beam_search(init, beam_size, max_len, |st, prefix| {
        decode_step(s, params, memory, st, prefix)
    })
}

/// Per-token record of how an emitted token was produced.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StepTrace {
    pub token: TokenId,
    pub prob: f64,
    /// `(g_v, g_a, g_q)` per passage.
    pub gates: Vec<[f64; 3]>,
    /// Most attended passage position, per passage.
    pub attention_argmax: Vec<usize>,
    pub question_attention_argmax: Vec<usize>,
    /// Passage whose mixture gives the token the most mass.
    pub source_passage: usize,
}

/// Replays `tokens` (followed by the end token when `finished`) and records
/// a trace row per step.
pub fn trace_sequence(
    s: &mut Session,
    params: &DecoderParams,
    memory: &DecoderMemory,
    tokens: &[TokenId],
    finished: bool,
) -> Result<Vec<StepTrace>> {
    let mut state = DecoderState::initial(s, params, memory.passages.len());
    let mut prev = BOS;
    let mut rows = Vec::with_capacity(tokens.len() + 1);
    let tail = finished.then_some(EOS);
    for tok in tokens.iter().copied().chain(tail) {
        let (out, next) = step(s, params, memory, &state, prev)?;
        let gates = out
            .gates
            .iter()
            .map(|&g| {
                let v = s.g.value(g).data();
                [v[0], v[1], v[2]]
            })
            .collect();
        let attention_argmax = out.alpha.iter().map(|&a| argmax(s.g.value(a).data())).collect();
        let question_attention_argmax =
            out.alpha_q.iter().map(|&a| argmax(s.g.value(a).data())).collect();
        let contributions: Vec<f64> = out
            .mixtures
            .iter()
            .map(|&m| s.g.value(m).data()[tok])
            .collect();
        rows.push(StepTrace {
            token: tok,
            prob: s.g.value(out.final_dist).data()[tok],
            gates,
            attention_argmax,
            question_attention_argmax,
            source_passage: argmax(&contributions),
        });
        state = next;
        prev = tok;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::NdArray;

    struct Fixture {
        store: ParamStore,
        params: DecoderParams,
    }

    fn fixture(seed: u64, output_vocab: Option<usize>) -> Fixture {
        let cfg = ModelConfig {
            embed_dim: 3,
            perspectives: 1,
            pam_width: 2,
            decoder_hidden: 4,
            decoder_vocab: output_vocab,
            ..ModelConfig::desk()
        };
        let mut rng = SeededRng::new(seed);
        let mut store = ParamStore::new();
        let emb = store.add("embedding", glorot(&mut rng, &[10, 3]));
        let params = DecoderParams::register(&mut store, &cfg, emb, 10, &mut rng);
        Fixture { store, params }
    }

    fn random(rng: &mut SeededRng, r: usize, c: usize) -> NdArray {
        NdArray::new(vec![r, c], (0..r * c).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    /// Passage memories are 10 wide (2(D+Z) + L = 8 + 2), question 8 wide.
    fn memory(s: &mut Session, p: &DecoderParams, rng: &mut SeededRng, k: usize) -> DecoderMemory {
        let passages: Vec<(Mpm, Vec<TokenId>)> = (0..k)
            .map(|i| {
                let mpm = Mpm {
                    rows: s.g.constant(random(rng, 3, 10)),
                    valid: vec![true, true, i % 2 == 0],
                };
                (mpm, vec![4, 11, 5 + i])
            })
            .collect();
        let q = Mpm {
            rows: s.g.constant(random(rng, 2, 8)),
            valid: vec![true; 2],
        };
        DecoderMemory::new(s, p, &passages, (&q, vec![6, 12]), 13).unwrap()
    }

    fn sums_to_one(v: &NdArray) {
        assert!((v.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(v.data().iter().all(|x| *x >= 0.0));
    }

    #[test]
    fn zero_cell_keeps_state_zero() {
        let mut f = fixture(1, None);
        for id in [f.params.cell.w_x, f.params.cell.w_h, f.params.cell.b] {
            f.store.get_mut(id).data_mut().fill(0.0);
        }
        let mut rng = SeededRng::new(2);
        let mut s = Session::new(&f.store, false);
        let mem = memory(&mut s, &f.params, &mut rng, 2);
        let mut state = DecoderState::initial(&mut s, &f.params, 2);
        for prev in [BOS, 7, 4] {
            let (_, next) = step(&mut s, &f.params, &mem, &state, prev).unwrap();
            for p in &next.passages {
                assert!(s.g.value(p.h).data().iter().all(|v| *v == 0.0));
            }
            state = next;
        }
    }

    #[test]
    fn identical_passages_get_identical_states() {
        let f = fixture(3, None);
        let mut rng = SeededRng::new(4);
        let mut s = Session::new(&f.store, false);
        let rows = random(&mut rng, 3, 10);
        let mpm = Mpm {
            rows: s.g.constant(rows),
            valid: vec![true; 3],
        };
        let q = Mpm {
            rows: s.g.constant(random(&mut rng, 2, 8)),
            valid: vec![true; 2],
        };
        let passages = vec![(mpm.clone(), vec![4, 5, 6]), (mpm, vec![4, 5, 6])];
        let mem = DecoderMemory::new(&mut s, &f.params, &passages, (&q, vec![7, 8]), 10).unwrap();
        let mut state = DecoderState::initial(&mut s, &f.params, 2);
        for prev in [BOS, 5, 9] {
            let (_, next) = step(&mut s, &f.params, &mem, &state, prev).unwrap();
            assert_eq!(s.g.value(next.passages[0].h), s.g.value(next.passages[1].h));
            state = next;
        }
    }

    #[test]
    fn first_step_matches_scalar_cell() {
        let f = fixture(5, None);
        let mut rng = SeededRng::new(6);
        let mut s = Session::new(&f.store, false);
        let mem = memory(&mut s, &f.params, &mut rng, 1);
        let state = DecoderState::initial(&mut s, &f.params, 1);
        let (_, next) = step(&mut s, &f.params, &mem, &state, BOS).unwrap();
        let emb = f.store.get(f.params.embedding).row(BOS).to_vec();
        let mut x = emb;
        x.extend(vec![0.0; 18]);
        let (wx, b) = (f.store.get(f.params.cell.w_x), f.store.get(f.params.cell.b));
        let hd = 4;
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for k in 0..hd {
            let pre = |g: usize| -> f64 {
                b.data()[g] + x.iter().enumerate().map(|(i, xi)| xi * wx.get2(i, g)).sum::<f64>()
            };
            let c = sig(pre(k)) * pre(3 * hd + k).tanh();
            let h = sig(pre(2 * hd + k)) * c.tanh();
            assert!((s.g.value(next.passages[0].h).data()[k] - h).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_singleton_uniform_and_loop_oracle() {
        let mut f = fixture(7, None);
        let mut rng = SeededRng::new(8);
        {
            let mut s = Session::new(&f.store, false);
            let mem = s.g.constant(random(&mut rng, 3, 10));
            let st = s.g.constant(NdArray::vector(vec![0.1, -0.2, 0.3, 0.4]));
            let (a, c) = attend(&mut s, &f.params.attn, mem, &[false, true, false], st).unwrap();
            assert_eq!(s.g.value(a).data(), &[0.0, 1.0, 0.0]);
            assert_eq!(s.g.value(c).data(), s.g.value(mem).row(1));

            let (a, c) = attend(&mut s, &f.params.attn, mem, &[true; 3], st).unwrap();
            let (m, w_h, w_s, b) = (
                s.g.value(mem),
                f.store.get(f.params.attn.w_h),
                f.store.get(f.params.attn.w_s),
                f.store.get(f.params.attn.b).data()[0],
            );
            let ss: f64 = w_s.data().iter().zip(s.g.value(st).data()).map(|(x, y)| x * y).sum();
            let e: Vec<f64> = (0..3)
                .map(|i| (m.row(i).iter().zip(w_h.data()).map(|(x, y)| x * y).sum::<f64>() + ss + b).tanh())
                .collect();
            let z: f64 = e.iter().map(|v| v.exp()).sum();
            for i in 0..3 {
                assert!((s.g.value(a).data()[i] - e[i].exp() / z).abs() < 1e-12);
            }
            for col in 0..10 {
                let want: f64 = (0..3).map(|i| e[i].exp() / z * m.get2(i, col)).sum();
                assert!((s.g.value(c).data()[col] - want).abs() < 1e-12);
            }
        }
        f.store.get_mut(f.params.attn.w_h).data_mut().fill(0.0);
        let mut s = Session::new(&f.store, false);
        let rows = random(&mut rng, 3, 10);
        let mem = s.g.constant(rows.clone());
        let st = s.g.constant(NdArray::vector(vec![0.5, 0.5, -1.0, 2.0]));
        let (a, c) = attend(&mut s, &f.params.attn, mem, &[true, false, true], st).unwrap();
        assert_eq!(s.g.value(a).data(), &[0.5, 0.0, 0.5]);
        for col in 0..10 {
            let mean = (rows.get2(0, col) + rows.get2(2, col)) / 2.0;
            assert!((s.g.value(c).data()[col] - mean).abs() < 1e-15);
        }
        assert!(matches!(
            attend(&mut s, &f.params.attn, mem, &[false; 3], st),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn vocab_dist_uniform_and_padded() {
        let mut f = fixture(9, Some(6));
        assert_eq!(f.params.output_vocab, 6);
        f.store.get_mut(f.params.out_w).data_mut().fill(0.0);
        let mut s = Session::new(&f.store, false);
        let feat = s.g.constant(NdArray::vector(vec![0.3; 22]));
        let v = vocab_dist(&mut s, &f.params, feat, 13).unwrap();
        let v = s.g.value(v);
        assert_eq!(v.len(), 13);
        for i in 0..6 {
            assert!((v.data()[i] - 1.0 / 6.0).abs() < 1e-15);
        }
        assert!(v.data()[6..].iter().all(|x| *x == 0.0));
        sums_to_one(v);
    }

    #[test]
    fn copy_distribution_examples() {
        let store = ParamStore::new();
        let mut s = Session::new(&store, false);
        let alpha = s.g.constant(NdArray::vector(vec![0.3, 0.5, 0.2]));
        let alpha_q = s.g.constant(NdArray::vector(vec![0.0, 1.0]));
        // "lake" is id 7 at positions 0 and 2; position 1 is an OOV with id 12
        let (p, q) = copy_dists(&mut s, alpha, &[7, 12, 7], alpha_q, &[4, 9], 13).unwrap();
        let p = s.g.value(p);
        assert!((p.data()[7] - 0.5).abs() < 1e-15);
        assert_eq!(p.data()[12], 0.5);
        let q = s.g.value(q);
        let mut one_hot = [0.0; 13];
        one_hot[9] = 1.0;
        assert_eq!(q.data(), &one_hot[..]);
    }

    #[test]
    fn step_outputs_are_normalized() {
        let f = fixture(10, Some(8));
        let mut rng = SeededRng::new(11);
        let mut s = Session::new(&f.store, false);
        let mem = memory(&mut s, &f.params, &mut rng, 3);
        let mut state = DecoderState::initial(&mut s, &f.params, 3);
        for prev in [BOS, 11, 3, 9] {
            let (out, next) = step(&mut s, &f.params, &mem, &state, prev).unwrap();
            for k in 0..3 {
                sums_to_one(s.g.value(out.alpha[k]));
                sums_to_one(s.g.value(out.alpha_q[k]));
                sums_to_one(s.g.value(out.gates[k]));
                sums_to_one(s.g.value(out.dists[k].vocab));
                sums_to_one(s.g.value(out.dists[k].p_attn));
                sums_to_one(s.g.value(out.dists[k].q_attn));
            }
            sums_to_one(s.g.value(out.final_dist));
            // masked position 2 of passage 1 receives no attention
            assert_eq!(s.g.value(out.alpha[1]).data()[2], 0.0);
            // OOV 12 occurs in the question only; 10 occurs nowhere
            assert!(s.g.value(out.final_dist).data()[12] > 0.0);
            state = next;
        }
    }

    #[test]
    fn zero_gates_blend_equally_and_permutation_is_exact() {
        let mut f = fixture(12, None);
        f.store.get_mut(f.params.gate_w).data_mut().fill(0.0);
        let mut rng = SeededRng::new(13);
        let mut s = Session::new(&f.store, false);
        let mem = memory(&mut s, &f.params, &mut rng, 1);
        let state = DecoderState::initial(&mut s, &f.params, 1);
        let (out, _) = step(&mut s, &f.params, &mem, &state, BOS).unwrap();
        let d = out.dists[0];
        let fin = s.g.value(out.final_dist);
        for i in 0..13 {
            let want = (s.g.value(d.vocab).data()[i]
                + s.g.value(d.p_attn).data()[i]
                + s.g.value(d.q_attn).data()[i])
                / 3.0;
            assert!((fin.data()[i] - want).abs() < 1e-15);
        }

        let f = fixture(14, None);
        let mut s = Session::new(&f.store, false);
        let mem = memory(&mut s, &f.params, &mut rng, 3);
        let state = DecoderState::initial(&mut s, &f.params, 3);
        let (out, _) = step(&mut s, &f.params, &mem, &state, BOS).unwrap();
        let reversed: Vec<PassageDists> = out.dists.iter().rev().copied().collect();
        let rotated = vec![out.dists[1], out.dists[2], out.dists[0]];
        let (_, _, a) = gates_and_final(&mut s, &f.params, &reversed).unwrap();
        let (_, _, b) = gates_and_final(&mut s, &f.params, &rotated).unwrap();
        assert_eq!(s.g.value(a), s.g.value(out.final_dist));
        assert_eq!(s.g.value(b), s.g.value(out.final_dist));
    }

    #[test]
    fn greedy_boundaries_and_determinism() {
        let f = fixture(15, None);
        let mut rng = SeededRng::new(16);
        let mut s = Session::new(&f.store, false);
        let mem = memory(&mut s, &f.params, &mut rng, 2);
        assert!(greedy_decode(&mut s, &f.params, &mem, 0).unwrap().is_empty());
        let a = greedy_decode(&mut s, &f.params, &mem, 6).unwrap();
        let b = greedy_decode(&mut s, &f.params, &mem, 6).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 6 && !a.contains(&EOS));
    }

    #[test]
    fn argmax_prefers_lowest_id_on_ties() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn beam_one_equals_greedy_and_replays() {
        for seed in 0..5 {
            let f = fixture(20 + seed, None);
            let mut rng = SeededRng::new(seed);
            let mut s = Session::new(&f.store, false);
            let mem = memory(&mut s, &f.params, &mut rng, 2);
            let g = greedy_decode(&mut s, &f.params, &mem, 5).unwrap();
            let h = beam_decode(&mut s, &f.params, &mem, 1, 5).unwrap();
            assert_eq!(g, h.tokens);
            let h = beam_decode(&mut s, &f.params, &mem, 3, 5).unwrap();
            let mut targets = h.tokens.clone();
            if h.finished {
                targets.push(EOS);
            }
            if targets.is_empty() {
                continue;
            }
            let nll = teacher_forced_nll(&mut s, &f.params, &mem, &targets).unwrap();
            assert!((h.log_prob + s.g.value(nll).item()).abs() < 1e-10);
        }
    }

    #[test]
    fn beam_finds_path_greedy_misses() {
        // token 4: p=0.6 then mostly-flat continuation; token 5: p=0.4 then
        // a near-certain end. Tokens: 3 is the end token.
        let expand = |state: &u8, prefix: &[TokenId]| -> Result<(Vec<f64>, u8)> {
            let dist = match prefix {
                [] => vec![0.0, 0.0, 0.0, 0.0, 0.6, 0.4],
                [4] => vec![0.0, 0.0, 0.0, 0.3, 0.35, 0.35],
                [5] => vec![0.0, 0.0, 0.0, 0.95, 0.025, 0.025],
                _ => vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
            };
            Ok((dist, *state))
        };
        let greedy = greedy_search(0u8, 2, expand).unwrap();
        assert_eq!(greedy, vec![4, 4]);
        let best = beam_search(0u8, 2, 2, expand).unwrap();
        assert_eq!(best.tokens, vec![5]);
        assert!(best.finished);
        // enumerate every two-step path: 0.4·0.95 beats 0.6·0.35 and 0.6·0.3
        assert!((best.log_prob - (0.4f64.ln() + 0.95f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn trace_rows_cover_tokens_and_end() {
        let f = fixture(30, None);
        let mut rng = SeededRng::new(31);
        let mut s = Session::new(&f.store, false);
        let mem = memory(&mut s, &f.params, &mut rng, 2);
        let rows = trace_sequence(&mut s, &f.params, &mem, &[4, 11], true).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[2].token, EOS);
        for r in &rows {
            for g in &r.gates {
                assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            assert!(r.source_passage < 2);
        }
    }
}
