//! Toy-scale end-to-end training and evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{QuestionType, Sample};
use crate::error::{Error, Result};
use crate::image::{image_batch, ImageInput};
use crate::model::VqaModel;
use crate::nn::{apply_batch_stats, Forward, Mode, ParamStore};
use crate::rng::{derive_seed, CounterRng};
use crate::text::{tokenize, TokenSequence, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 5e-4,
            warmup_steps: 100,
            total_steps: 1000,
            batch_size: 16,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, section: &str) -> Result<()> {
        let f = |k: &str| format!("{section}.{k}");
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config(f("base_lr"), "must be a finite non-negative number"));
        }
        if self.warmup_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(Error::config(
                f("warmup_steps"),
                "must satisfy 0 < warmup_steps < total_steps",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config(f("batch_size"), "must be >= 1"));
        }
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(f(k), "must be in [0, 1)"));
            }
        }
        if self.eps <= 0.0 {
            return Err(Error::config(f("eps"), "must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config(f("weight_decay"), "must be non-negative"));
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr` over `warmup_steps`, then half-cosine decay
/// to zero at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::Parameter(format!(
            "step {step} beyond total_steps {}",
            cfg.total_steps
        )));
    }
    if cfg.warmup_steps == 0 || cfg.warmup_steps >= cfg.total_steps {
        return Err(Error::Parameter("schedule needs 0 < warmup_steps < total_steps".into()));
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.base_lr * step as f64 / cfg.warmup_steps as f64);
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    Ok(cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Adam with decoupled weight decay, applied only to tensors flagged for
/// decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl AdamW {
    pub fn new(store: &ParamStore<f32>) -> Self {
        let zeros = || store.params().map(|(_, e)| vec![0.0; e.value.len()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// One update. `grads[i]` pairs with the `i`-th stored parameter.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Option<Vec<f32>>], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (lr, eps, wd) = (lr as f32, cfg.eps as f32, cfg.weight_decay as f32);
        for (i, (_, entry)) in store.params_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let decay = if entry.decay { wd } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in entry.value.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + eps) + decay * *p;
                *p -= lr * update;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut s = String::from("step,lr,loss\n");
    for r in trace {
        let _ = writeln!(s, "{},{},{}", r.step, r.lr, r.loss);
    }
    s
}

/// Tokenized question and image of one sample, ready for batching.
pub struct Prepared<'a> {
    pub seqs: Vec<TokenSequence>,
    pub images: Vec<&'a ImageInput>,
    pub targets: Vec<usize>,
    pub types: Vec<QuestionType>,
}

pub fn prepare<'a>(samples: &'a [Sample], vocab: &Vocab, max_len: usize) -> Result<Prepared<'a>> {
    Ok(Prepared {
        seqs: samples
            .iter()
            .map(|s| tokenize(&s.question, vocab, max_len))
            .collect::<Result<_>>()?,
        images: samples.iter().map(|s| &s.image).collect(),
        targets: samples.iter().map(|s| s.answer).collect(),
        types: samples.iter().map(|s| s.qtype).collect(),
    })
}

/// Trains `store` in place for `cfg.total_steps` steps and returns the
/// per-step loss trace. Batches are drawn from per-epoch shuffles seeded by
/// `cfg.seed`, so a seed fixes the whole run.
pub fn train(
    model: &VqaModel,
    store: &mut ParamStore<f32>,
    data: &Prepared<'_>,
    cfg: &TrainConfig,
) -> Result<Vec<TraceRow>> {
    cfg.validate("train")?;
    let n = data.seqs.len();
    if n == 0 {
        return Err(Error::Input("empty training set".into()));
    }
    let bs = cfg.batch_size.min(n);
    let mut opt = AdamW::new(store);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = n;
    let mut epoch = 0u64;
    let mut trace = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let lr = lr_at(step, cfg)?;
        let mut batch = Vec::with_capacity(bs);
        while batch.len() < bs {
            if cursor == n {
                order = (0..n).collect();
                CounterRng::new(derive_seed(cfg.seed, epoch)).shuffle(&mut order);
                epoch += 1;
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let seqs: Vec<TokenSequence> = batch.iter().map(|&i| data.seqs[i].clone()).collect();
        let imgs: Vec<&ImageInput> = batch.iter().map(|&i| data.images[i]).collect();
        let targets: Vec<usize> = batch.iter().map(|&i| data.targets[i]).collect();

        let mode = Mode::train(derive_seed(cfg.seed ^ 0x5eed, step as u64));
        let (loss, grads, stats) = {
            let mut fw = Forward::new(&*store, mode);
            let x = fw.input(image_batch(&imgs)?);
            let loss_var = model.loss(&mut fw, &seqs, x, &targets).map_err(|e| diverged(step, e))?;
            let loss = fw.tape.value(loss_var).item()? as f64;
            fw.tape.backward(loss_var).map_err(|e| diverged(step, e))?;
            let vars = fw.param_vars().clone();
            let grads: Vec<Option<Vec<f32>>> = store
                .params()
                .map(|(name, _)| vars.get(name).and_then(|&v| fw.tape.grad(v)).map(|g| g.data().to_vec()))
                .collect();
            (loss, grads, fw.take_batch_stats())
        };
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: format!("loss is {loss}"),
            });
        }
        opt.step(store, &grads, lr, cfg);
        if let Some((name, _)) = store.params().find(|(_, e)| !e.value.all_finite()) {
            return Err(Error::Diverged {
                step,
                reason: format!("parameter `{name}` became non-finite"),
            });
        }
        apply_batch_stats(store, &stats)?;
        trace.push(TraceRow { step, lr, loss });
    }
    Ok(trace)
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged {
            step,
            reason: format!("non-finite value produced by `{op}`"),
        },
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeCount {
    pub correct: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub per_type: BTreeMap<String, TypeCount>,
    pub per_type_accuracy: BTreeMap<String, f64>,
    /// Micro average: all correct over all samples.
    pub overall_accuracy: f64,
    /// Macro average: unweighted mean of the per-type accuracies.
    pub average_accuracy: f64,
}

impl EvalMetrics {
    pub fn from_counts(counts: &[(QuestionType, usize, usize)]) -> Result<Self> {
        let mut per_type = BTreeMap::new();
        let mut per_type_accuracy = BTreeMap::new();
        let (mut correct, mut total) = (0, 0);
        for &(t, c, n) in counts {
            if n == 0 {
                return Err(Error::Metric(format!(
                    "no samples of type `{t}`; average accuracy is undefined"
                )));
            }
            if c > n {
                return Err(Error::Metric(format!("{c} correct out of {n} for `{t}`")));
            }
            per_type.insert(t.name().to_string(), TypeCount { correct: c, total: n });
            per_type_accuracy.insert(t.name().to_string(), c as f64 / n as f64);
            correct += c;
            total += n;
        }
        if total == 0 {
            return Err(Error::Metric("empty evaluation set".into()));
        }
        // Mean of the per-type fractions as one exact rational over the
        // common denominator, so AA is correctly rounded (0.8 and 0.4 give
        // exactly 0.6).
        let lcm = per_type
            .values()
            .fold(1u128, |l, c| l / gcd(l, c.total as u128) * c.total as u128);
        let num: u128 = per_type
            .values()
            .map(|c| c.correct as u128 * (lcm / c.total as u128))
            .sum();
        let aa = num as f64 / (lcm * per_type.len() as u128) as f64;
        Ok(Self {
            per_type,
            per_type_accuracy,
            overall_accuracy: correct as f64 / total as f64,
            average_accuracy: aa,
        })
    }

    /// Metrics from predicted and true answer ids; every question type must
    /// occur.
    pub fn from_predictions(pred: &[usize], truth: &[usize], types: &[QuestionType]) -> Result<Self> {
        if pred.len() != truth.len() || pred.len() != types.len() {
            return Err(Error::Metric(
                "prediction, answer and type lists differ in length".into(),
            ));
        }
        let counts: Vec<(QuestionType, usize, usize)> = QuestionType::ALL
            .iter()
            .map(|&t| {
                let idx = (0..pred.len()).filter(|&i| types[i] == t);
                let total = idx.clone().count();
                let correct = idx.filter(|&i| pred[i] == truth[i]).count();
                (t, correct, total)
            })
            .collect();
        Self::from_counts(&counts)
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Eval-mode accuracy of `store` on `data`, computed in parallel chunks.
pub fn evaluate(model: &VqaModel, store: &ParamStore<f32>, data: &Prepared<'_>) -> Result<EvalMetrics> {
    if data.seqs.is_empty() {
        return Err(Error::Metric("empty evaluation set".into()));
    }
    let samples: Vec<(TokenSequence, &ImageInput)> =
        data.seqs.iter().cloned().zip(data.images.iter().copied()).collect();
    let pred = model.predict_all(store, &samples, 16)?;
    EvalMetrics::from_predictions(&pred, &data.targets, &data.types)
}
