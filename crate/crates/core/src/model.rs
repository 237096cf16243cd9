//! The assembled model: parameter layout, example preparation, the training
//! loss and inference entry points.

use crate::config::ModelConfig;
use crate::decoder::{self, DecoderMemory, DecoderParams, Hypothesis, StepTrace};
use crate::encoder::{self, EncoderParams};
use crate::error::{Error, Result};
use crate::memory::{self, AlignmentWeights};
use crate::numerics::{SeededRng, Var};
use crate::params::{glorot, ParamId, ParamStore, Session};
use crate::vocab::{self, map_extended, ExtendedSource, TokenId, Vocabulary, EOS, UNK};

/// Parameter handles of every component.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub embedding: ParamId,
    pub encoder: EncoderParams,
    /// Absent when unified memories are ablated.
    pub alignment: Option<AlignmentWeights>,
    pub decoder: DecoderParams,
}

#[derive(Clone, Debug)]
pub struct GumMp {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub layout: Layout,
}

/// One question with its passages, ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedExample {
    pub question: Vec<TokenId>,
    pub passages: Vec<Vec<TokenId>>,
    /// One negative passage per passage; empty when negatives are unused.
    pub negatives: Vec<Vec<TokenId>>,
    /// Extended-vocabulary ids of the source tokens.
    pub source: ExtendedSource,
    /// Gold ids followed by the end token; empty without an answer.
    pub targets: Vec<TokenId>,
}

impl GumMp {
    /// Fresh model with seeded Glorot initialization and a zero padding row.
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.len() < 5 {
            return Err(Error::Config("vocabulary needs at least 5 entries".into()));
        }
        let mut rng = SeededRng::new(seed);
        let mut store = ParamStore::new();
        let mut table = glorot(&mut rng, &[vocab.len(), config.embed_dim]);
        vocab::zero_pad_row(&mut table);
        let embedding = store.add("embedding", table);
        let encoder = EncoderParams::register(&mut store, &config, &mut rng);
        let alignment = config
            .ablation
            .uses_unified_memory()
            .then(|| AlignmentWeights::register(&mut store, &config, &mut rng));
        let decoder = DecoderParams::register(&mut store, &config, embedding, vocab.len(), &mut rng);
        Ok(GumMp {
            config,
            vocab,
            store,
            layout: Layout {
                embedding,
                encoder,
                alignment,
                decoder,
            },
        })
    }

    /// Tokenized inputs to ids. Passages beyond the configured maximum and
    /// tokens beyond the configured lengths are dropped.
    pub fn prepare<S: AsRef<str>>(
        &self,
        question: &[S],
        passages: &[Vec<S>],
        answer: Option<&[S]>,
        negatives: &[Vec<S>],
    ) -> Result<PreparedExample> {
        let cfg = &self.config;
        let question: Vec<&str> = question
            .iter()
            .take(cfg.max_question_len)
            .map(AsRef::as_ref)
            .collect();
        let passages: Vec<Vec<&str>> = passages
            .iter()
            .take(cfg.max_passages)
            .map(|p| p.iter().take(cfg.max_passage_len).map(AsRef::as_ref).collect())
            .collect();
        if question.is_empty() {
            return Err(Error::Degenerate("empty question".into()));
        }
        if passages.is_empty() || passages.iter().any(Vec::is_empty) {
            return Err(Error::Degenerate("every example needs nonempty passages".into()));
        }
        let negatives: Vec<Vec<TokenId>> = if cfg.ablation.uses_negatives() {
            if negatives.len() < passages.len() {
                return Err(Error::Degenerate(format!(
                    "{} passages but {} negative passages",
                    passages.len(),
                    negatives.len()
                )));
            }
            negatives[..passages.len()]
                .iter()
                .map(|n| {
                    let ids: Vec<TokenId> = n
                        .iter()
                        .take(cfg.max_passage_len)
                        .map(|t| self.vocab.encode(t.as_ref()))
                        .collect();
                    if ids.is_empty() {
                        Err(Error::Degenerate("empty negative passage".into()))
                    } else {
                        Ok(ids)
                    }
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let source = map_extended(&passages, &question, &self.vocab);
        let targets = match answer {
            Some(a) => {
                let a: Vec<&str> = a.iter().take(cfg.max_answer_len).map(AsRef::as_ref).collect();
                self.target_ids(&a, &source)
            }
            None => Vec::new(),
        };
        Ok(PreparedExample {
            question: self.vocab.encode_all(&question),
            passages: passages.iter().map(|p| self.vocab.encode_all(p)).collect(),
            negatives,
            source,
            targets,
        })
    }

    /// Gold ids over the extended vocabulary, plus the end token. Tokens
    /// that can be neither generated nor copied become `<unk>`.
    pub fn target_ids(&self, answer: &[&str], source: &ExtendedSource) -> Vec<TokenId> {
        let output_vocab = self.layout.decoder.output_vocab;
        let in_source = |id: TokenId| {
            source.question.contains(&id) || source.passages.iter().any(|p| p.contains(&id))
        };
        let mut ids: Vec<TokenId> = answer
            .iter()
            .map(|tok| match self.vocab.get(tok) {
                Some(id) if id < output_vocab || in_source(id) => id,
                Some(_) => UNK,
                None => source.map.get(tok).unwrap_or(UNK),
            })
            .collect();
        ids.push(EOS);
        ids
    }

    /// Runs the encoder and memory layers and returns what the decoder
    /// attends over.
    pub fn encode(&self, s: &mut Session, ex: &PreparedExample) -> Result<DecoderMemory> {
        let l = &self.layout;
        let ablation = self.config.ablation;
        let all_valid = |n: usize| vec![true; n];
        let q = encoder::encode_sequence(s, &l.encoder, l.embedding, &ex.question, &all_valid(ex.question.len()))?;
        let passages = ex
            .passages
            .iter()
            .map(|p| encoder::encode_sequence(s, &l.encoder, l.embedding, p, &all_valid(p.len())))
            .collect::<Result<Vec<_>>>()?;
        let negatives = if ablation.uses_negatives() {
            ex.negatives
                .iter()
                .map(|n| encoder::encode_sequence(s, &l.encoder, l.embedding, n, &all_valid(n.len())))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let mut mpms = Vec::with_capacity(passages.len());
        for (k, p) in passages.iter().enumerate() {
            mpms.push(encoder::build_passage_mpm(s, &l.encoder, &q, p, negatives.get(k), ablation)?);
        }
        let question_mpm = encoder::build_question_mpm(s, &l.encoder, &q, &passages, &negatives, ablation)?;
        let memories = match &l.alignment {
            Some(align) => (0..mpms.len())
                .map(|k| {
                    let pam = memory::build_pam(s, k, &mpms, align)?;
                    memory::build_um(s, &mpms[k], pam)
                })
                .collect::<Result<Vec<_>>>()?,
            None => mpms,
        };
        let sources: Vec<_> = memories
            .into_iter()
            .zip(&ex.source.passages)
            .map(|(m, ids)| (m, ids.clone()))
            .collect();
        DecoderMemory::new(
            s,
            &l.decoder,
            &sources,
            (&question_mpm, ex.source.question.clone()),
            ex.source.map.size(),
        )
    }

    /// Teacher-forced negative log-likelihood of the example's answer.
    pub fn loss(&self, s: &mut Session, ex: &PreparedExample) -> Result<Var> {
        let memory = self.encode(s, ex)?;
        decoder::teacher_forced_nll(s, &self.layout.decoder, &memory, &ex.targets)
    }

    pub fn greedy(&self, ex: &PreparedExample, max_len: usize) -> Result<Vec<TokenId>> {
        let mut s = Session::new(&self.store, false);
        let memory = self.encode(&mut s, ex)?;
        decoder::greedy_decode(&mut s, &self.layout.decoder, &memory, max_len)
    }

    pub fn beam(&self, ex: &PreparedExample, beam_size: usize, max_len: usize) -> Result<Hypothesis> {
        let mut s = Session::new(&self.store, false);
        let memory = self.encode(&mut s, ex)?;
        decoder::beam_decode(&mut s, &self.layout.decoder, &memory, beam_size, max_len)
    }

    /// Beam search (greedy when `beam_size` is 1) plus a trace row per
    /// emitted token. Returns `(ids, finished, trace)`.
    pub fn generate(
        &self,
        ex: &PreparedExample,
        beam_size: usize,
        max_len: usize,
    ) -> Result<(Vec<TokenId>, bool, Vec<StepTrace>)> {
        let mut s = Session::new(&self.store, false);
        let memory = self.encode(&mut s, ex)?;
        let d = &self.layout.decoder;
        let (tokens, finished) = if beam_size == 1 {
            let t = decoder::greedy_decode(&mut s, d, &memory, max_len)?;
            let finished = t.len() < max_len;
            (t, finished)
        } else {
            let h = decoder::beam_decode(&mut s, d, &memory, beam_size, max_len)?;
            (h.tokens, h.finished)
        };
        let trace = decoder::trace_sequence(&mut s, d, &memory, &tokens, finished)?;
        Ok((tokens, finished, trace))
    }

    /// Sum of clamped log-probabilities of `ids` under teacher forcing.
    pub fn sequence_log_prob(&self, ex: &PreparedExample, ids: &[TokenId]) -> Result<f64> {
        let mut s = Session::new(&self.store, false);
        let memory = self.encode(&mut s, ex)?;
        let nll = decoder::teacher_forced_nll(&mut s, &self.layout.decoder, &memory, ids)?;
        Ok(-s.g.value(nll).item())
    }

    /// Surface tokens of extended ids.
    pub fn detokenize(&self, ex: &PreparedExample, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .map(|&id| ex.source.map.token(id, &self.vocab).to_owned())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Ablation;
    use crate::vocab::tokenize;

    fn tiny(ablation: Ablation) -> GumMp {
        let corpus = vec![tokenize("the big lake is deep and blue , where is the lake ?")];
        let vocab = Vocabulary::build(&corpus, 12).unwrap();
        let cfg = ModelConfig {
            embed_dim: 4,
            perspectives: 2,
            pam_width: 3,
            decoder_hidden: 5,
            max_passages: 3,
            max_passage_len: 6,
            decoder_vocab: Some(8),
            ablation,
            ..ModelConfig::desk()
        };
        GumMp::new(cfg, vocab, 3).unwrap()
    }

    fn example(m: &GumMp) -> PreparedExample {
        let passages = vec![tokenize("the lake is deep"), tokenize("a zorp lake is blue")];
        let negatives = vec![tokenize("where is it"), tokenize("big and blue")];
        m.prepare(
            &tokenize("where is the lake ?"),
            &passages,
            Some(&tokenize("zorp lake quux")),
            &negatives,
        )
        .unwrap()
    }

    #[test]
    fn targets_map_copyable_oov_and_unk() {
        let m = tiny(Ablation::Full);
        let ex = example(&m);
        let zorp = ex.source.map.get("zorp").unwrap();
        assert!(zorp >= m.vocab.len());
        assert_eq!(ex.targets[0], zorp);
        assert_eq!(ex.targets[2], UNK);
        assert_eq!(*ex.targets.last().unwrap(), EOS);
        assert_eq!(m.detokenize(&ex, &ex.targets[..1]), vec!["zorp".to_string()]);
    }

    #[test]
    fn every_ablation_runs_forward_and_backward() {
        for ab in Ablation::ALL {
            let m = tiny(ab);
            assert_eq!(m.layout.alignment.is_some(), ab.uses_unified_memory());
            let ex = example(&m);
            assert_eq!(ex.negatives.is_empty(), !ab.uses_negatives());
            let mut s = Session::new(&m.store, true);
            let loss = m.loss(&mut s, &ex).unwrap();
            assert!(s.g.value(loss).item() > 0.0);
            let grads = s.g.backward(loss).unwrap();
            let pg = s.param_grads(&grads);
            let unused: Vec<&str> = m
                .store
                .ids()
                .filter(|id| pg[id.index()].is_none())
                .map(|id| m.store.name(id))
                .collect();
            if ab.uses_negatives() {
                assert!(unused.is_empty(), "{unused:?}");
            } else {
                assert_eq!(unused, ["encoder.w_pos", "encoder.w_neg", "encoder.w_match"]);
            }
        }
    }

    #[test]
    fn truncation_and_passage_cap() {
        let m = tiny(Ablation::NoNeg);
        let long: Vec<String> = (0..20).map(|_| "lake".to_string()).collect();
        let passages = vec![long.clone(); 5];
        let ex = m
            .prepare(&tokenize("where ?"), &passages, Some(&long), &[])
            .unwrap();
        assert_eq!(ex.passages.len(), 3);
        assert!(ex.passages.iter().all(|p| p.len() == 6));
        assert_eq!(ex.targets.len(), m.config.max_answer_len.min(20) + 1);
    }

    #[test]
    fn generation_is_deterministic() {
        let m = tiny(Ablation::Full);
        let ex = example(&m);
        let a = m.greedy(&ex, 4).unwrap();
        assert_eq!(a, m.greedy(&ex, 4).unwrap());
        let (ids, _, trace) = m.generate(&ex, 1, 4).unwrap();
        assert_eq!(ids, a);
        assert!(trace.len() >= ids.len());
    }
}
