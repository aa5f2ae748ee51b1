//! Loss, optimizer, training loop and evaluation.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::SamplePair;
use crate::error::{Error, Result};
use crate::metrics::{confusion, metrics, ConfusionCounts, Metrics};
use crate::model::{ChangeDetector, ParamStore};
use crate::tensor::Float;

/// Dice smoothing term.
pub const DICE_EPS: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ce: 1.0, dice: 1.0 }
    }
}

/// The two loss terms and their weighted total, as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub ce: Var,
    pub dice: Var,
    pub total: Var,
}

/// Cross-entropy plus soft dice on `log_probs[2×H×W]` against a binary mask.
///
/// ```text
///   ce   = −mean log p_y
///   dice = 1 − (2 Σ p₁ y + ε) / (Σ p₁ + Σ y + ε)
/// ```
pub fn loss<T: Float>(tape: &mut Tape<T>, log_probs: Var, label: &[u8], w: LossWeights) -> Result<LossTerms> {
    let s = tape.shape(log_probs).to_vec();
    if s.len() != 3 || s[0] != 2 || s[1] * s[2] != label.len() {
        return Err(Error::shape(format!(
            "log-probabilities {s:?} do not match a mask of {} pixels",
            label.len()
        )));
    }
    if let Some(&bad) = label.iter().find(|&&v| v > 1) {
        return Err(Error::Label(bad));
    }
    let n = label.len();
    let mut onehot = vec![T::zero(); 2 * n];
    for (q, &y) in label.iter().enumerate() {
        onehot[usize::from(y) * n + q] = T::one();
    }
    let onehot = tape.constant(s.clone(), onehot)?;
    let picked = tape.mul(log_probs, onehot)?;
    let picked = tape.sum(picked);
    let ce = tape.mul_scalar(picked, T::lit(-1.0 / n as f64));

    let lp1 = tape.slice(log_probs, 1, 1)?;
    let p1 = tape.exp(lp1);
    let y = tape.constant([1, s[1], s[2]], label.iter().map(|&v| T::lit(f64::from(v))).collect())?;
    let inter = tape.mul(p1, y)?;
    let inter = tape.sum(inter);
    let num = tape.mul_scalar(inter, T::lit(2.0));
    let num = tape.add_scalar(num, T::lit(DICE_EPS));
    let positives = label.iter().filter(|&&v| v == 1).count() as f64;
    let den = tape.sum(p1);
    let den = tape.add_scalar(den, T::lit(positives + DICE_EPS));
    let ratio = tape.div(num, den)?;
    let dice = tape.neg(ratio);
    let dice = tape.add_scalar(dice, T::one());

    let a = tape.mul_scalar(ce, T::lit(w.ce));
    let b = tape.mul_scalar(dice, T::lit(w.dice));
    let total = tape.add(a, b)?;
    Ok(LossTerms { ce, dice, total })
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Float>(params: &ParamStore<T>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step<T: Float>(&mut self, params: &mut ParamStore<T>, grads: &[Vec<T>]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, tensor) in params.tensors_mut().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for (i, p) in tensor.data_mut().iter_mut().enumerate() {
                let gi = g[i].as_f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                *p -= T::lit(update);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub loss_weights: LossWeights,
    pub seed: u64,
    /// Evaluate on the held-out set every this many steps (0 = only at the end).
    pub eval_every: usize,
    /// Random horizontal and vertical flips of training pairs.
    pub flips: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            steps: 2000,
            loss_weights: LossWeights::default(),
            seed: 0,
            eval_every: 250,
            flips: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        let w = self.loss_weights;
        if w.ce < 0.0 || w.dice < 0.0 || w.ce + w.dice == 0.0 {
            return Err(Error::Config("loss weights must be non-negative and not both zero".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub metrics: Option<Metrics>,
}

pub const LOG_HEADER: &str = "step,loss,oa,precision,recall,f1,iou,kc";

impl LogRow {
    pub fn csv(&self) -> String {
        match &self.metrics {
            Some(m) => format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                self.step, self.loss, m.oa, m.precision, m.recall, m.f1, m.iou, m.kc
            ),
            None => format!("{},{:.6},,,,,,", self.step, self.loss),
        }
    }
}

/// Writes rows as CSV under [`LOG_HEADER`].
pub struct CsvLog<W: Write> {
    out: W,
}

impl<W: Write> CsvLog<W> {
    pub fn new(mut out: W) -> std::io::Result<Self> {
        writeln!(out, "{LOG_HEADER}")?;
        Ok(Self { out })
    }

    pub fn write(&mut self, row: &LogRow) -> std::io::Result<()> {
        writeln!(self.out, "{}", row.csv())?;
        self.out.flush()
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub final_eval: Option<Evaluation>,
}

/// Loss and parameter gradients of one sample.
pub fn sample_grads<T: Float>(
    model: &ChangeDetector<T>,
    sample: &SamplePair,
    w: LossWeights,
) -> Result<(f64, Vec<Vec<T>>)> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, true);
    let t1 = tape.leaf(&sample.t1.cast());
    let t2 = tape.leaf(&sample.t2.cast());
    let out = model.forward(&mut tape, &p, t1, t2)?;
    let terms = loss(&mut tape, out.log_probs, &sample.label, w)?;
    let value = tape.value(terms.total)[0].as_f64();
    tape.backward(terms.total)?;
    Ok((value, model.params.grads(&tape, &p)))
}

/// Trains `model` in place. `on_row` receives every log row as it is produced.
///
/// Per-sample gradients are computed in parallel and summed in batch order, so
/// results do not depend on the thread count.
pub fn train<T: Float>(
    model: &mut ChangeDetector<T>,
    train_set: &[SamplePair],
    eval_set: Option<&[SamplePair]>,
    cfg: &TrainConfig,
    mut on_row: impl FnMut(&LogRow) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut adam = Adam::new(&model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut final_eval = None;

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = order[cursor];
            cursor += 1;
            let (fh, fv) = if cfg.flips { (rng.random_bool(0.5), rng.random_bool(0.5)) } else { (false, false) };
            batch.push((idx, fh, fv));
        }
        let results: Vec<Result<(f64, Vec<Vec<T>>)>> = batch
            .par_iter()
            .map(|&(idx, fh, fv)| {
                let s = &train_set[idx];
                if fh || fv {
                    sample_grads(model, &s.flipped(fh, fv), cfg.loss_weights)
                } else {
                    sample_grads(model, s, cfg.loss_weights)
                }
            })
            .collect();
        let mut total = 0.0;
        let mut acc: Option<Vec<Vec<T>>> = None;
        for r in results {
            let (l, g) = r.map_err(|e| match e {
                Error::Numeric(_) => Error::Diverged { step, loss: f64::NAN },
                e => e,
            })?;
            total += l;
            match &mut acc {
                None => acc = Some(g),
                Some(a) => {
                    for (a, g) in a.iter_mut().zip(&g) {
                        a.iter_mut().zip(g).for_each(|(a, &g)| *a += g);
                    }
                }
            }
        }
        let mean = total / cfg.batch_size as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged { step, loss: mean });
        }
        let mut grads = acc.expect("batch is non-empty");
        let scale = T::lit(1.0 / cfg.batch_size as f64);
        grads.iter_mut().flatten().for_each(|g| *g *= scale);
        adam.step(&mut model.params, &grads);
        losses.push(mean);

        let last = step + 1 == cfg.steps;
        let due = cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0;
        let m = match eval_set {
            Some(set) if !set.is_empty() && (due || last) => {
                let e = evaluate(model, set)?;
                let m = e.metrics;
                if last {
                    final_eval = Some(e);
                }
                Some(m)
            }
            _ => None,
        };
        on_row(&LogRow {
            step,
            loss: mean,
            metrics: m,
        })?;
    }
    Ok(TrainReport { losses, final_eval })
}

/// Per-sample and aggregate confusion counts.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub per_sample: Vec<(String, ConfusionCounts)>,
    pub total: ConfusionCounts,
    pub metrics: Metrics,
}

impl Evaluation {
    pub fn from_counts(per_sample: Vec<(String, ConfusionCounts)>) -> Self {
        let total = per_sample.iter().fold(ConfusionCounts::default(), |a, (_, c)| a + *c);
        Self {
            metrics: metrics(&total),
            per_sample,
            total,
        }
    }
}

/// Predicted masks for every sample, in order.
pub fn predict_all<T: Float>(model: &ChangeDetector<T>, samples: &[SamplePair]) -> Result<Vec<Vec<u8>>> {
    samples
        .par_iter()
        .map(|s| Ok(model.predict(&s.t1.cast(), &s.t2.cast())?.mask))
        .collect()
}

pub fn evaluate<T: Float>(model: &ChangeDetector<T>, samples: &[SamplePair]) -> Result<Evaluation> {
    let preds = predict_all(model, samples)?;
    let per_sample = samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| Ok((s.id.clone(), confusion(p, &s.label)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation::from_counts(per_sample))
}
