//! Question and passage encoders.
//!
//! Each token sequence goes through a shared BiLSTM. Passage tokens are then
//! matched against the max-pooled question summary from several learned
//! perspectives; with negatives enabled, each match is taken relative to
//! every token of a negative passage and the differences are aggregated by
//! attention. A second BiLSTM smooths the matching vectors, and the result
//! is concatenated with the token hiddens to form a multi-perspective memory
//! (MPM) row of width `2(D+Z)`.
//!
//! Forward hiddens are always matched against the forward-pooled summary
//! and backward hiddens against the backward-pooled one; the two `Z`-wide
//! results are concatenated.

use crate::config::{Ablation, ModelConfig};
use crate::error::{Error, Result};
use crate::lstm::LstmParams;
use crate::numerics::{SeededRng, Var};
use crate::params::{glorot, ParamId, ParamStore, Session};
use crate::vocab::TokenId;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderParams {
    pub token_fw: LstmParams,
    pub token_bw: LstmParams,
    pub smooth_fw: LstmParams,
    pub smooth_bw: LstmParams,
    /// `Z × D` perspectives for matching passage tokens.
    pub persp_passage: ParamId,
    /// `Z × D` perspectives for matching question tokens.
    pub persp_question: ParamId,
    /// Scores the positive passage summary (`2D`).
    pub w_pos: ParamId,
    /// Scores the negative passage summary (`2D`).
    pub w_neg: ParamId,
    /// Scores a matching-tensor entry (`Z`).
    pub w_match: ParamId,
    pub embed_dim: usize,
    pub perspectives: usize,
}

impl EncoderParams {
    pub fn register(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut SeededRng) -> Self {
        let (d, z) = (cfg.embed_dim, cfg.perspectives);
        EncoderParams {
            token_fw: LstmParams::register(store, "encoder.token.fw", d, d, rng),
            token_bw: LstmParams::register(store, "encoder.token.bw", d, d, rng),
            smooth_fw: LstmParams::register(store, "encoder.smooth.fw", 2 * z, z, rng),
            smooth_bw: LstmParams::register(store, "encoder.smooth.bw", 2 * z, z, rng),
            persp_passage: store.add("encoder.persp_passage", glorot(rng, &[z, d])),
            persp_question: store.add("encoder.persp_question", glorot(rng, &[z, d])),
            w_pos: store.add("encoder.w_pos", glorot(rng, &[2 * d])),
            w_neg: store.add("encoder.w_neg", glorot(rng, &[2 * d])),
            w_match: store.add("encoder.w_match", glorot(rng, &[z])),
            embed_dim: d,
            perspectives: z,
        }
    }
}

/// Per-direction max-pooled hiddens (`o_f`, `o_b`, each length `D`).
#[derive(Clone, Copy, Debug)]
pub struct PooledSummary {
    pub fw: Var,
    pub bw: Var,
}

impl PooledSummary {
    /// `[o_f, o_b]`, length `2D`.
    pub fn concat(&self, s: &mut Session) -> Result<Var> {
        s.g.concat(&[self.fw, self.bw])
    }
}

/// BiLSTM output for one token sequence.
#[derive(Clone, Debug)]
pub struct EncodedSequence {
    /// `N × D`
    pub fw: Var,
    /// `N × D`
    pub bw: Var,
    pub valid: Vec<bool>,
    pub pooled: PooledSummary,
}

/// Multi-perspective memory: one `2(D+Z)` row per token.
#[derive(Clone, Debug)]
pub struct Mpm {
    pub rows: Var,
    pub valid: Vec<bool>,
}

/// Positive-minus-negative match scores, one `(N·N⁻) × Z` array per
/// direction. Row `i·N⁻ + j` pairs positive token `i` with negative token `j`.
#[derive(Clone, Copy, Debug)]
pub struct MatchingTensor {
    pub fw: Var,
    pub bw: Var,
    pub positive_len: usize,
    pub negative_len: usize,
}

/// Forward and backward hiddens of `x` (`N × d_in`). Masked steps produce
/// zero rows and do not advance the recurrence.
pub fn bilstm_encode(
    s: &mut Session,
    x: Var,
    valid: &[bool],
    fw: &LstmParams,
    bw: &LstmParams,
) -> Result<(Var, Var)> {
    if valid.is_empty() || !valid.iter().any(|&v| v) {
        return Err(Error::Degenerate("bilstm_encode: empty sequence".into()));
    }
    if s.g.shape(x).first() != Some(&valid.len()) {
        return Err(Error::dim("bilstm_encode", s.g.shape(x), &[valid.len()]));
    }
    let f = fw.run(s, x, valid, false)?;
    let b = bw.run(s, x, valid, true)?;
    Ok((f, b))
}

pub fn pool_summary(s: &mut Session, fw: Var, bw: Var, valid: &[bool]) -> Result<PooledSummary> {
    Ok(PooledSummary {
        fw: s.g.max_over_time(fw, Some(valid))?,
        bw: s.g.max_over_time(bw, Some(valid))?,
    })
}

/// Embeds `ids`, runs the token BiLSTM, and pools.
pub fn encode_sequence(
    s: &mut Session,
    params: &EncoderParams,
    embedding: ParamId,
    ids: &[TokenId],
    valid: &[bool],
) -> Result<EncodedSequence> {
    if ids.len() != valid.len() {
        return Err(Error::dim("encode_sequence", &[ids.len()], &[valid.len()]));
    }
    let table = s.p(embedding);
    let x = s.g.gather_rows(table, ids)?;
    let (fw, bw) = bilstm_encode(s, x, valid, &params.token_fw, &params.token_bw)?;
    let pooled = pool_summary(s, fw, bw, valid)?;
    Ok(EncodedSequence {
        fw,
        bw,
        valid: valid.to_vec(),
        pooled,
    })
}

/// `m[i, z] = cos(h_i ∘ w_z, o ∘ w_z)` for every row of `h` (`n × D`).
pub fn multi_perspective_match(s: &mut Session, h: Var, o: Var, w: Var) -> Result<Var> {
    s.g.mp_cosine(h, o, w)
}

/// `m[i, j, z] = f_m(h_i, o^q; w_z) − f_m(h⁻_j, o^q; w_z)` per direction.
pub fn matching_tensor(
    s: &mut Session,
    positive: &EncodedSequence,
    negative: &EncodedSequence,
    question: &PooledSummary,
    w: Var,
) -> Result<MatchingTensor> {
    if negative.valid.is_empty() {
        return Err(Error::Degenerate("matching_tensor: empty negative passage".into()));
    }
    let mut per_direction = [positive.fw; 2];
    for (slot, (hp, hn, o)) in [
        (positive.fw, negative.fw, question.fw),
        (positive.bw, negative.bw, question.bw),
    ]
    .into_iter()
    .enumerate()
    {
        let a = multi_perspective_match(s, hp, o, w)?;
        let b = multi_perspective_match(s, hn, o, w)?;
        per_direction[slot] = s.g.pairwise_diff(a, b)?;
    }
    Ok(MatchingTensor {
        fw: per_direction[0],
        bw: per_direction[1],
        positive_len: positive.valid.len(),
        negative_len: negative.valid.len(),
    })
}

/// Attention over negative tokens:
/// `e_ij = tanh(w⁺·o + w⁻·o⁻ + wᵐ·m_ij)`, `α_i = softmax_j(e_i)`,
/// `m_i = Σ_j α_ij m_ij`. Returns `(fw, bw)`, each `N × Z`.
pub fn aggregate_negative(
    s: &mut Session,
    params: &EncoderParams,
    tensor: &MatchingTensor,
    o_pos: Var,
    o_neg: Var,
    negative_valid: &[bool],
) -> Result<(Var, Var)> {
    if negative_valid.len() != tensor.negative_len {
        return Err(Error::dim(
            "aggregate_negative",
            &[tensor.negative_len],
            &[negative_valid.len()],
        ));
    }
    let z = params.perspectives;
    let w_pos = s.p(params.w_pos);
    let w_neg = s.p(params.w_neg);
    let w_match = s.p(params.w_match);
    let sp = s.g.mul(w_pos, o_pos)?;
    let sp = s.g.sum(sp);
    let sn = s.g.mul(w_neg, o_neg)?;
    let sn = s.g.sum(sn);
    let bias = s.g.add(sp, sn)?;
    let w_col = s.g.reshape(w_match, &[z, 1])?;
    let mut out = [tensor.fw; 2];
    for (slot, t) in [tensor.fw, tensor.bw].into_iter().enumerate() {
        let e = s.g.matmul(t, w_col)?;
        let e = s.g.reshape(e, &[tensor.positive_len, tensor.negative_len])?;
        let e = s.g.add_scalar(e, bias)?;
        let e = s.g.tanh(e);
        let alpha = s.g.softmax(e, Some(negative_valid))?;
        out[slot] = s.g.row_weighted_sum(alpha, t)?;
    }
    Ok((out[0], out[1]))
}

/// Smooths `matching` (`N × 2Z`) with the second BiLSTM and concatenates
/// `[h_fw, h_bw, smooth_fw, smooth_bw]` per token.
pub fn smooth_and_fuse(
    s: &mut Session,
    params: &EncoderParams,
    tokens: &EncodedSequence,
    matching: Var,
) -> Result<Mpm> {
    let n = tokens.valid.len();
    if s.g.shape(matching) != [n, 2 * params.perspectives] {
        return Err(Error::dim(
            "smooth_and_fuse",
            s.g.shape(matching),
            &[n, 2 * params.perspectives],
        ));
    }
    let (sf, sb) = bilstm_encode(s, matching, &tokens.valid, &params.smooth_fw, &params.smooth_bw)?;
    let rows = s.g.concat_cols(&[tokens.fw, tokens.bw, sf, sb])?;
    Ok(Mpm {
        rows,
        valid: tokens.valid.clone(),
    })
}

/// MPM of one passage. `negative` is required unless the ablation drops
/// negatives.
pub fn build_passage_mpm(
    s: &mut Session,
    params: &EncoderParams,
    question: &EncodedSequence,
    passage: &EncodedSequence,
    negative: Option<&EncodedSequence>,
    ablation: Ablation,
) -> Result<Mpm> {
    let w = s.p(params.persp_passage);
    let (mf, mb) = if ablation.uses_negatives() {
        let negative = negative
            .ok_or_else(|| Error::Degenerate("passage matching needs a negative passage".into()))?;
        let tensor = matching_tensor(s, passage, negative, &question.pooled, w)?;
        let o_pos = passage.pooled.concat(s)?;
        let o_neg = negative.pooled.concat(s)?;
        aggregate_negative(s, params, &tensor, o_pos, o_neg, &negative.valid)?
    } else {
        (
            multi_perspective_match(s, passage.fw, question.pooled.fw, w)?,
            multi_perspective_match(s, passage.bw, question.pooled.bw, w)?,
        )
    };
    let matching = s.g.concat_cols(&[mf, mb])?;
    smooth_and_fuse(s, params, passage, matching)
}

/// Question MPM against passage `k`, with the passage summaries in the
/// role of the question summary.
fn question_mpm_for_passage(
    s: &mut Session,
    params: &EncoderParams,
    question: &EncodedSequence,
    passage: &PooledSummary,
    negative: Option<&PooledSummary>,
) -> Result<Mpm> {
    let w = s.p(params.persp_question);
    let mut dirs = [question.fw; 2];
    for (slot, (h, o, o_neg)) in [
        (question.fw, passage.fw, negative.map(|n| n.fw)),
        (question.bw, passage.bw, negative.map(|n| n.bw)),
    ]
    .into_iter()
    .enumerate()
    {
        let pos = multi_perspective_match(s, h, o, w)?;
        dirs[slot] = match o_neg {
            Some(o_neg) => {
                let neg = multi_perspective_match(s, h, o_neg, w)?;
                s.g.sub(pos, neg)?
            }
            None => pos,
        };
    }
    let matching = s.g.concat_cols(&dirs)?;
    smooth_and_fuse(s, params, question, matching)
}

/// Question MPM: the element-wise mean of the per-passage question MPMs.
pub fn build_question_mpm(
    s: &mut Session,
    params: &EncoderParams,
    question: &EncodedSequence,
    passages: &[EncodedSequence],
    negatives: &[EncodedSequence],
    ablation: Ablation,
) -> Result<Mpm> {
    if passages.is_empty() {
        return Err(Error::Degenerate("question MPM needs at least one passage".into()));
    }
    if ablation.uses_negatives() && negatives.len() != passages.len() {
        return Err(Error::Degenerate(format!(
            "{} passages but {} negatives",
            passages.len(),
            negatives.len()
        )));
    }
    let mut per_passage = Vec::with_capacity(passages.len());
    for (k, p) in passages.iter().enumerate() {
        let neg = ablation.uses_negatives().then(|| &negatives[k].pooled);
        per_passage.push(question_mpm_for_passage(s, params, question, &p.pooled, neg)?.rows);
    }
    let rows = if per_passage.len() == 1 {
        per_passage[0]
    } else {
        s.g.mean(&per_passage)?
    };
    Ok(Mpm {
        rows,
        valid: question.valid.clone(),
    })
}
