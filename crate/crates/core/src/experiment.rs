//! End-to-end runs: training with per-epoch evaluation, evaluation,
//! generation with traces, and the ablation comparison.

use serde::{Deserialize, Serialize};

use crate::config::{Ablation, ExperimentConfig};
use crate::data::{gen_synthetic, parse_dataset, records_to_jsonl, Example, Limits, SyntheticTaskSpec};
use crate::decoder::StepTrace;
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::model::{GumMp, PreparedExample};
use crate::numerics::SeededRng;
use crate::training::{prepare_examples, NegativeSampler, Trainer};
use crate::vocab::Vocabulary;

/// Vocabulary over questions, passages and answers.
pub fn build_vocab(examples: &[Example], max_size: usize) -> Result<Vocabulary> {
    let corpus: Vec<&Vec<String>> = examples
        .iter()
        .flat_map(|e| e.passages.iter().chain([&e.question, &e.answer]))
        .collect();
    let owned: Vec<Vec<String>> = corpus.into_iter().cloned().collect();
    Vocabulary::build(&owned, max_size)
}

fn sampler_for(model: &GumMp, examples: &[Example]) -> Result<Option<NegativeSampler>> {
    if model.config.ablation.uses_negatives() {
        NegativeSampler::new(examples).map(Some)
    } else {
        Ok(None)
    }
}

/// Prepares examples for inference. Negatives come from other questions of
/// the same dataset, drawn with `seed`.
pub fn prepare_for_inference(model: &GumMp, examples: &[Example], seed: u64) -> Result<Vec<PreparedExample>> {
    let sampler = sampler_for(model, examples)?;
    let mut rng = SeededRng::new(seed);
    prepare_examples(model, examples, sampler.as_ref(), examples, &mut rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub tokens: Vec<String>,
    pub finished: bool,
    pub trace: Vec<StepTrace>,
}

/// Decodes every example; `beam_size == 1` is greedy.
pub fn predict(
    model: &GumMp,
    examples: &[Example],
    beam_size: usize,
    max_len: usize,
    seed: u64,
) -> Result<Vec<Prediction>> {
    let prepared = prepare_for_inference(model, examples, seed)?;
    examples
        .iter()
        .zip(&prepared)
        .map(|(ex, p)| {
            let (ids, finished, trace) = model.generate(p, beam_size, max_len)?;
            Ok(Prediction {
                id: ex.id.clone(),
                tokens: model.detokenize(p, &ids),
                finished,
                trace,
            })
        })
        .collect()
}

pub fn evaluate(
    model: &GumMp,
    examples: &[Example],
    beam_size: usize,
    max_len: usize,
    seed: u64,
) -> Result<EvalReport> {
    let preds = predict(model, examples, beam_size, max_len, seed)?;
    let ids: Vec<String> = examples.iter().map(|e| e.id.clone()).collect();
    let cands: Vec<Vec<String>> = preds.into_iter().map(|p| p.tokens).collect();
    let refs: Vec<Vec<String>> = examples.iter().map(|e| e.answer.clone()).collect();
    EvalReport::new(&ids, &cands, &refs)
}

/// Fraction of examples whose decoded answer equals the reference exactly.
pub fn exact_match(model: &GumMp, examples: &[Example], max_len: usize, seed: u64) -> Result<f64> {
    let preds = predict(model, examples, 1, max_len, seed)?;
    let hits = preds
        .iter()
        .zip(examples)
        .filter(|(p, e)| p.tokens == e.answer)
        .count();
    Ok(hits as f64 / examples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub dev_bleu1: Option<f64>,
    pub dev_rouge_l: Option<f64>,
}

/// Options for [`train_model`].
#[derive(Clone, Debug)]
pub struct TrainOptions {
    /// Evaluate on the dev set every this many epochs (0 disables).
    pub eval_every: usize,
    pub max_len: usize,
    /// Stop early once the training loss falls below this value.
    pub target_loss: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            eval_every: 1,
            max_len: 50,
            target_loss: None,
        }
    }
}

/// Trains `trainer` until its epoch counter reaches the configured budget.
/// Dev evaluation uses greedy decoding.
pub fn train_model(
    trainer: &mut Trainer,
    train: &[Example],
    dev: Option<&[Example]>,
    opts: &TrainOptions,
    mut log: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    let sampler = sampler_for(&trainer.model, train)?;
    let mut logs = Vec::new();
    while trainer.epoch < trainer.train.epochs {
        let stats = trainer.run_epoch(train, sampler.as_ref())?;
        let mut entry = EpochLog {
            epoch: stats.epoch,
            loss: stats.mean_loss,
            dev_bleu1: None,
            dev_rouge_l: None,
        };
        if let Some(dev) = dev {
            if opts.eval_every > 0 && stats.epoch % opts.eval_every == 0 {
                let r = evaluate(&trainer.model, dev, 1, opts.max_len, trainer.train.seed)?;
                entry.dev_bleu1 = Some(r.bleu1);
                entry.dev_rouge_l = Some(r.rouge_l);
            }
        }
        log(&entry);
        logs.push(entry);
        if opts.target_loss.is_some_and(|t| stats.mean_loss < t) {
            break;
        }
    }
    Ok(logs)
}

/// Fresh trainer for `cfg` with the vocabulary built from `train`.
pub fn new_trainer(cfg: &ExperimentConfig, train: &[Example]) -> Result<Trainer> {
    cfg.validate()?;
    let vocab = build_vocab(train, cfg.model.max_vocab)?;
    let model = GumMp::new(cfg.model.clone(), vocab, cfg.train.seed)?;
    Trainer::new(model, cfg.train.clone())
}

/// Generates the synthetic task and splits it into train and test parts.
pub fn synthetic_split(
    spec: &SyntheticTaskSpec,
    n_train: usize,
    limits: &Limits,
) -> Result<(Vec<Example>, Vec<Example>)> {
    let records = gen_synthetic(spec)?;
    let mut all = parse_dataset(&records_to_jsonl(&records), limits)?;
    if n_train >= all.len() {
        return Err(Error::Config(format!(
            "cannot hold out a test set: {n_train} training examples of {}",
            all.len()
        )));
    }
    let test = all.split_off(n_train);
    Ok((all, test))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub seeds: Vec<u64>,
    pub bleu1: Vec<f64>,
    pub rouge_l: Vec<f64>,
}

impl AblationRow {
    pub fn mean_bleu1(&self) -> f64 {
        self.bleu1.iter().sum::<f64>() / self.bleu1.len() as f64
    }

    pub fn mean_rouge_l(&self) -> f64 {
        self.rouge_l.iter().sum::<f64>() / self.rouge_l.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, ablation: Ablation) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.ablation == ablation)
    }

    /// Plain-text table with one line per variant.
    pub fn render(&self) -> String {
        let mut out = String::from("model     BLEU-1   ROUGE-L  per-seed BLEU-1\n");
        for r in &self.rows {
            let per_seed: Vec<String> = r.bleu1.iter().map(|b| format!("{b:.3}")).collect();
            out.push_str(&format!(
                "{:<9} {:.4}   {:.4}   {}\n",
                r.ablation.label(),
                r.mean_bleu1(),
                r.mean_rouge_l(),
                per_seed.join(" ")
            ));
        }
        out
    }
}

/// Trains every variant in `ablations` for every seed and scores it on
/// `test` with `beam_size`. `progress` receives one line per finished run.
pub fn run_ablation(
    base: &ExperimentConfig,
    ablations: &[Ablation],
    seeds: &[u64],
    train: &[Example],
    test: &[Example],
    beam_size: usize,
    max_len: usize,
    mut progress: impl FnMut(&str),
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for &ablation in ablations {
        let mut row = AblationRow {
            ablation,
            seeds: seeds.to_vec(),
            bleu1: Vec::new(),
            rouge_l: Vec::new(),
        };
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.model.ablation = ablation;
            cfg.train.seed = seed;
            let mut trainer = new_trainer(&cfg, train)?;
            let opts = TrainOptions {
                eval_every: 0,
                max_len,
                target_loss: None,
            };
            let logs = train_model(&mut trainer, train, None, &opts, |_| {})?;
            let report = evaluate(&trainer.model, test, beam_size, max_len, seed)?;
            progress(&format!(
                "{} seed {seed}: final loss {:.4}, test BLEU-1 {:.4}, ROUGE-L {:.4}",
                ablation.label(),
                logs.last().map_or(f64::NAN, |l| l.loss),
                report.bleu1,
                report.rouge_l
            ));
            row.bleu1.push(report.bleu1);
            row.rouge_l.push(report.rouge_l);
        }
        rows.push(row);
    }
    Ok(AblationTable { rows })
}
