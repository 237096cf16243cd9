//! Negative sampling, gradient clipping, Adam and the epoch loop.

use crate::config::TrainConfig;
use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::{GumMp, PreparedExample};
use crate::numerics::{NdArray, SeededRng};
use crate::params::{ParamStore, Session};
use crate::vocab::PAD;

/// Draws negative passages: for a target example, passages chosen
/// uniformly among all passages of examples with a different question id.
#[derive(Clone, Debug)]
pub struct NegativeSampler {
    /// `(example, passage)` for every passage of the corpus.
    flat: Vec<(usize, usize)>,
    ids: Vec<String>,
}

impl NegativeSampler {
    pub fn new(examples: &[Example]) -> Result<Self> {
        let ids: Vec<String> = examples.iter().map(|e| e.id.clone()).collect();
        if ids.iter().all(|id| *id == ids[0]) {
            return Err(Error::Config(
                "negative sampling needs at least two distinct questions".into(),
            ));
        }
        let flat = examples
            .iter()
            .enumerate()
            .flat_map(|(i, e)| (0..e.passages.len()).map(move |p| (i, p)))
            .collect();
        Ok(NegativeSampler { flat, ids })
    }

    /// `count` draws for example `target`, by rejection from the flat pool.
    pub fn sample(&self, target: usize, count: usize, rng: &mut SeededRng) -> Vec<(usize, usize)> {
        let own = &self.ids[target];
        (0..count)
            .map(|_| loop {
                let pick = self.flat[rng.below(self.flat.len())];
                if self.ids[pick.0] != *own {
                    break pick;
                }
            })
            .collect()
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [NdArray], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_assign(scale);
        }
    }
    norm
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<NdArray>,
    pub v: Vec<NdArray>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros: Vec<NdArray> = store.iter().map(|(_, t)| NdArray::zeros(t.shape())).collect();
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[NdArray]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, g) in store.ids().zip(grads) {
            let i = id.index();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let theta = store.get_mut(id).data_mut();
            for j in 0..theta.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g.data()[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g.data()[j] * g.data()[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                theta[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Loss value and the per-parameter gradient (zeros for unused tensors).
pub fn loss_and_grads(model: &GumMp, ex: &PreparedExample) -> Result<(f64, Vec<NdArray>)> {
    let mut s = Session::new(&model.store, true);
    let loss = model.loss(&mut s, ex)?;
    let value = s.g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {value}")));
    }
    let grads = s.g.backward(loss)?;
    let per_param = s
        .param_grads(&grads)
        .into_iter()
        .zip(model.store.iter())
        .map(|(g, (_, t))| g.unwrap_or_else(|| NdArray::zeros(t.shape())))
        .collect();
    Ok((value, per_param))
}

/// One optimizer step on the mean loss of `batch`. Returns the mean loss.
pub fn train_step(
    model: &mut GumMp,
    adam: &mut Adam,
    batch: &[PreparedExample],
    clip_norm: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Degenerate("empty batch".into()));
    }
    let mut total = 0.0;
    let mut acc: Option<Vec<NdArray>> = None;
    for ex in batch {
        let (loss, grads) = loss_and_grads(model, ex)?;
        total += loss;
        match acc.as_mut() {
            None => acc = Some(grads),
            Some(a) => a.iter_mut().zip(&grads).for_each(|(x, g)| x.add_assign(g)),
        }
    }
    let mut grads = acc.expect("nonempty batch");
    let scale = 1.0 / batch.len() as f64;
    grads.iter_mut().for_each(|g| g.scale_assign(scale));
    clip_global_norm(&mut grads, clip_norm);
    adam.update(&mut model.store, &grads);
    let emb = model.layout.embedding;
    let d = model.config.embed_dim;
    model.store.get_mut(emb).data_mut()[PAD * d..(PAD + 1) * d].fill(0.0);
    Ok(total * scale)
}

/// Ties each example to freshly sampled negatives (when the ablation uses
/// them) and converts it to model ids.
pub fn prepare_examples(
    model: &GumMp,
    examples: &[Example],
    sampler: Option<&NegativeSampler>,
    negative_pool: &[Example],
    rng: &mut SeededRng,
) -> Result<Vec<PreparedExample>> {
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let k = ex.passages.len().min(model.config.max_passages);
            let negatives: Vec<Vec<String>> = match sampler {
                Some(s) if model.config.ablation.uses_negatives() => s
                    .sample(i, k, rng)
                    .into_iter()
                    .map(|(e, p)| negative_pool[e].passages[p].clone())
                    .collect(),
                _ => Vec::new(),
            };
            model.prepare(&ex.question, &ex.passages, Some(&ex.answer), &negatives)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
}

/// Owns the model and optimizer state across epochs.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: GumMp,
    pub train: TrainConfig,
    pub adam: Adam,
    pub epoch: usize,
    pub rng: SeededRng,
}

/// Stream used for negatives that stay fixed across epochs.
const FIXED_NEGATIVE_STREAM: u64 = 0x6E65_6761_7469_7665;

impl Trainer {
    pub fn new(model: GumMp, train: TrainConfig) -> Result<Self> {
        train.validate()?;
        let adam = Adam::new(&model.store, &train);
        // shift the stream away from the one used for initialization
        let rng = SeededRng::new(train.seed ^ 0x5EED_0F_7EA1);
        Ok(Trainer {
            model,
            train,
            adam,
            epoch: 0,
            rng,
        })
    }

    /// One pass over `examples` in a freshly shuffled order.
    pub fn run_epoch(&mut self, examples: &[Example], sampler: Option<&NegativeSampler>) -> Result<EpochStats> {
        let mut negatives_rng = if self.train.resample_negatives {
            self.rng.fork()
        } else {
            SeededRng::new(self.train.seed ^ FIXED_NEGATIVE_STREAM)
        };
        let prepared = prepare_examples(&self.model, examples, sampler, examples, &mut negatives_rng)?;
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        self.rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(self.train.batch_size) {
            let batch: Vec<PreparedExample> = chunk.iter().map(|&i| prepared[i].clone()).collect();
            let loss = train_step(&mut self.model, &mut self.adam, &batch, self.train.clip_norm)?;
            total += loss * chunk.len() as f64;
        }
        self.epoch += 1;
        Ok(EpochStats {
            epoch: self.epoch,
            mean_loss: total / prepared.len() as f64,
        })
    }
}
