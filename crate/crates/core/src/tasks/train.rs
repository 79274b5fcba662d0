use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{all_problems, ArithmeticProblem, Op, ARITH_LEN, VOCAB_SIZE};
use crate::desiderata::argmax;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};
use crate::transformer::{
    final_logits, init_params, load_checkpoint_expecting, residual_stream, save_checkpoint,
    unembed, Batch, ModelConfig, ModelParams, NoHook, ParamVars,
};

const EVAL_CHUNK: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub train_loss: f32,
    pub heldout_accuracy: Option<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub ops: Vec<Op>,
    pub max_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub eval_every: usize,
    pub heldout_fraction: f64,
    pub target_accuracy: f32,
    pub failure_floor: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            // Half the width of `ModelConfig::toy`: on one core the full-width
            // model needs over 40 minutes to reach the accuracy target.
            model: ModelConfig {
                d_model: 64,
                d_mlp: 256,
                ..ModelConfig::toy(VOCAB_SIZE, ARITH_LEN)
            },
            ops: Op::ALL.to_vec(),
            max_steps: 4000,
            batch_size: 128,
            learning_rate: 3e-3,
            min_learning_rate: 3e-4,
            warmup_steps: 200,
            weight_decay: 0.01,
            grad_clip: 1.0,
            eval_every: 200,
            heldout_fraction: 0.1,
            target_accuracy: 0.95,
            failure_floor: 0.80,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.ops.is_empty() {
            return bad("training needs at least one operation");
        }
        if self.model.vocab_size != VOCAB_SIZE || self.model.max_seq_len < ARITH_LEN {
            return bad("model vocabulary or context does not fit the arithmetic task");
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return bad("batch_size and eval_every must be positive");
        }
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 1.0) {
            return bad("heldout_fraction must lie in (0, 1)");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.max_steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.min_learning_rate + (self.learning_rate - self.min_learning_rate) * cosine
    }
}

/// Problems per operation, split into training and held-out sets.
#[derive(Clone, Debug)]
pub struct ProblemSplit {
    pub train: BTreeMap<Op, Vec<ArithmeticProblem>>,
    pub heldout: BTreeMap<Op, Vec<ArithmeticProblem>>,
}

pub fn problem_split(ops: &[Op], heldout_fraction: f64, seed: u64) -> ProblemSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = BTreeMap::new();
    let mut heldout = BTreeMap::new();
    for &op in Op::ALL.iter().filter(|o| ops.contains(o)) {
        let mut all = all_problems(op);
        all.shuffle(&mut rng);
        let n_held = ((all.len() as f64) * heldout_fraction).round() as usize;
        let rest = all.split_off(n_held);
        heldout.insert(op, all);
        train.insert(op, rest);
    }
    ProblemSplit { train, heldout }
}

/// First-digit accuracy of the clean model on `problems`.
pub fn heldout_accuracy(params: &ModelParams, problems: &[ArithmeticProblem]) -> Result<f32> {
    if problems.is_empty() {
        return Err(Error::contract("accuracy over no problems"));
    }
    let mut correct = 0;
    for chunk in problems.chunks(EVAL_CHUNK) {
        let seqs: Vec<Vec<usize>> = chunk.iter().map(|p| p.tokens()).collect();
        let logits = final_logits(params, &seqs)?;
        correct += chunk
            .iter()
            .enumerate()
            .filter(|(b, p)| argmax(logits.row(*b)) == p.answer_token())
            .count();
    }
    Ok(correct as f32 / problems.len() as f32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub heldout_accuracy: f32,
    pub per_op_accuracy: BTreeMap<Op, f32>,
    pub reached_target: bool,
    pub curve: Vec<CurvePoint>,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub params: ModelParams,
    pub adam_m: ModelParams,
    pub adam_v: ModelParams,
    pub curve: Vec<CurvePoint>,
    pub loss_since_eval: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    step: usize,
    curve: Vec<CurvePoint>,
    loss_since_eval: Vec<f32>,
}

impl TrainState {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_checkpoint(&self.params, dir.join("model.ckpt"))?;
        save_checkpoint(&self.adam_m, dir.join("adam_m.ckpt"))?;
        save_checkpoint(&self.adam_v, dir.join("adam_v.ckpt"))?;
        let meta = StateMeta {
            step: self.step,
            curve: self.curve.clone(),
            loss_since_eval: self.loss_since_eval.clone(),
        };
        let path = dir.join("state.json");
        fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(path, e))
    }
}

pub fn load_training_state(dir: impl AsRef<Path>, config: &ModelConfig) -> Result<TrainState> {
    let dir = dir.as_ref();
    let path = dir.join("state.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: StateMeta = serde_json::from_str(&text)?;
    Ok(TrainState {
        step: meta.step,
        params: load_checkpoint_expecting(dir.join("model.ckpt"), config)?,
        adam_m: load_checkpoint_expecting(dir.join("adam_m.ckpt"), config)?,
        adam_v: load_checkpoint_expecting(dir.join("adam_v.ckpt"), config)?,
        curve: meta.curve,
        loss_since_eval: meta.loss_since_eval,
    })
}

fn zeros_like(params: &ModelParams) -> ModelParams {
    let mut z = params.clone();
    for t in z.tensors_mut() {
        t.data_mut().fill(0.0);
    }
    z
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    split: ProblemSplit,
    state: TrainState,
}

impl<'a> Trainer<'a> {
    fn batch(&self, step: usize) -> Vec<ArithmeticProblem> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(step as u64 + 1);
        (0..self.cfg.batch_size)
            .map(|_| {
                let op = self.cfg.ops[rng.gen_range(0..self.cfg.ops.len())];
                let pool = &self.split.train[&op];
                pool[rng.gen_range(0..pool.len())]
            })
            .collect()
    }

    fn step(&mut self) -> Result<f32> {
        let step = self.state.step;
        let problems = self.batch(step);
        let seqs: Vec<Vec<usize>> = problems.iter().map(|p| p.tokens()).collect();
        let targets: Vec<usize> = problems.iter().map(|p| p.answer_token()).collect();
        let config = &self.state.params.config;

        let mut tape = Tape::<f32>::new();
        let pv = ParamVars::load(&mut tape, &self.state.params, true);
        let batch = Batch::new(config, &seqs)?;
        let resid = residual_stream(&mut tape, &pv, config, &batch, &mut NoHook)?;
        let logits = unembed(&mut tape, &pv, resid, Some(&batch.final_rows()))?;
        let loss = tape.cross_entropy(logits, &targets)?;
        tape.backward(loss)?;
        let loss_value = tape.value(loss).data()[0];
        if !loss_value.is_finite() {
            return Err(Error::NumericalAbort {
                step,
                desideratum: "training".into(),
                last_finite_loss: self.state.curve.last().map(|c| c.train_loss),
                last_finite_step: self.state.curve.last().map(|c| c.step),
            });
        }

        let grads: Vec<Tensor> = pv
            .ordered()
            .into_iter()
            .map(|v| tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec())))
            .collect();
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|&g| (g as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        let clip = if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            self.cfg.grad_clip / norm
        } else {
            1.0
        };

        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let t = (step + 1) as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let lr = self.cfg.lr_at(step);
        let wd = self.cfg.weight_decay;
        let params = self.state.params.tensors_mut();
        let ms = self.state.adam_m.tensors_mut();
        let vs = self.state.adam_v.tensors_mut();
        for (((p, m), v), g) in params.into_iter().zip(ms).zip(vs).zip(&grads) {
            let decay = if p.shape().len() == 2 { wd } else { 0.0 };
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i] as f64 * clip;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = (mi / c1) / ((vi / c2).sqrt() + eps) + decay * p[i] as f64;
                p[i] = (p[i] as f64 - lr * update) as f32;
            }
        }
        self.state.step += 1;
        Ok(loss_value)
    }

    fn heldout(&self) -> Result<(f32, BTreeMap<Op, f32>)> {
        let mut per_op = BTreeMap::new();
        let mut all = Vec::new();
        for (&op, problems) in &self.split.heldout {
            per_op.insert(op, heldout_accuracy(&self.state.params, problems)?);
            all.extend_from_slice(problems);
        }
        Ok((heldout_accuracy(&self.state.params, &all)?, per_op))
    }

    /// Trains until the target accuracy, the step budget, or `pause_at`.
    fn run(&mut self, pause_at: Option<usize>) -> Result<Option<TrainReport>> {
        loop {
            if pause_at.is_some_and(|p| self.state.step >= p) {
                return Ok(None);
            }
            if self.state.step >= self.cfg.max_steps {
                let (acc, per_op) = self.heldout()?;
                if acc < self.cfg.failure_floor {
                    return Err(Error::TrainingFailure {
                        accuracy: acc,
                        steps: self.state.step,
                        floor: self.cfg.failure_floor,
                        curve: self.state.curve.clone(),
                    });
                }
                return Ok(Some(self.report(acc, per_op)));
            }
            let loss = self.step()?;
            self.state.loss_since_eval.push(loss);
            if self.state.step % self.cfg.eval_every == 0 {
                let (acc, per_op) = self.heldout()?;
                let n = self.state.loss_since_eval.len() as f32;
                let mean = self.state.loss_since_eval.drain(..).sum::<f32>() / n;
                self.state.curve.push(CurvePoint {
                    step: self.state.step,
                    train_loss: mean,
                    heldout_accuracy: Some(acc),
                });
                if acc >= self.cfg.target_accuracy {
                    return Ok(Some(self.report(acc, per_op)));
                }
            }
        }
    }

    fn report(&self, acc: f32, per_op: BTreeMap<Op, f32>) -> TrainReport {
        TrainReport {
            steps: self.state.step,
            heldout_accuracy: acc,
            per_op_accuracy: per_op,
            reached_target: acc >= self.cfg.target_accuracy,
            curve: self.state.curve.clone(),
        }
    }
}

/// Outcome of a training call: finished with a report, or paused with state.
pub enum TrainOutcome {
    Finished(ModelParams, TrainReport),
    Paused(TrainState),
}

/// Trains a fresh model on final-position first-digit cross-entropy.
pub fn train_toy_model(cfg: &TrainConfig) -> Result<(ModelParams, TrainReport)> {
    match train_toy_model_resume(cfg, None, None)? {
        TrainOutcome::Finished(p, r) => Ok((p, r)),
        TrainOutcome::Paused(_) => unreachable!("no pause step was requested"),
    }
}

/// Continues from `resume` (or starts fresh) and optionally pauses at a step.
pub fn train_toy_model_resume(
    cfg: &TrainConfig,
    resume: Option<TrainState>,
    pause_at: Option<usize>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let state = match resume {
        Some(s) => s,
        None => {
            let params = init_params(&cfg.model, cfg.seed)?;
            TrainState {
                step: 0,
                adam_m: zeros_like(&params),
                adam_v: zeros_like(&params),
                params,
                curve: Vec::new(),
                loss_since_eval: Vec::new(),
            }
        }
    };
    let mut trainer = Trainer {
        cfg,
        split: problem_split(&cfg.ops, cfg.heldout_fraction, cfg.seed),
        state,
    };
    Ok(match trainer.run(pause_at)? {
        Some(report) => TrainOutcome::Finished(trainer.state.params, report),
        None => TrainOutcome::Paused(trainer.state),
    })
}
