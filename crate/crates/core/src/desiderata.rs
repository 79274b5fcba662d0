//! Desiderata, their losses, and the mask optimizer.
//!
//! Every tuple contributes `logit(r) − logit(t)` at the final position of the
//! patched run. A desideratum's loss is the mean over its tuples; the sparsity
//! penalty is `λ·Σ sqrt(1 − w + ε) − λ·N·sqrt(ε)`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patching::{
    cache_alternate, masked_final_logits, masked_forward_batch, round_mask, AlternateCache,
    BinaryMask, Mask, PatchPositions,
};
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::transformer::{ModelParams, ParamVars};

/// Tuples scored per forward pass when evaluating accuracy.
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Patched output should become the alternate's answer.
    ChangeToAlternate,
    /// Patched output should stay the original's answer.
    PreserveOriginal,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesiderataTuple {
    pub orig: Vec<usize>,
    pub alt: Vec<usize>,
    pub target: usize,
    pub competing: usize,
}

impl DesiderataTuple {
    pub fn validate(&self) -> Result<()> {
        if self.orig.len() != self.alt.len() {
            return Err(Error::Alignment(format!(
                "tuple sequences have lengths {} and {}",
                self.orig.len(),
                self.alt.len()
            )));
        }
        if self.orig.last() != self.alt.last() {
            return Err(Error::Alignment("tuple sequences end in different tokens".into()));
        }
        if self.target == self.competing {
            return Err(Error::contract(format!(
                "tuple target and competing token are both {}",
                self.target
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Desideratum {
    pub name: String,
    pub direction: Direction,
    pub tuples: Vec<DesiderataTuple>,
    #[serde(default)]
    pub positions: PatchPositions,
}

impl Desideratum {
    pub fn new(name: impl Into<String>, direction: Direction, tuples: Vec<DesiderataTuple>) -> Self {
        Self {
            name: name.into(),
            direction,
            tuples,
            positions: PatchPositions::FinalToken,
        }
    }
}

/// A desideratum with its alternate caches built against one model.
#[derive(Clone, Debug)]
pub struct PreparedDesideratum {
    pub name: String,
    pub origs: Vec<Vec<usize>>,
    pub caches: Vec<AlternateCache>,
    pub targets: Vec<usize>,
    pub competing: Vec<usize>,
}

impl PreparedDesideratum {
    pub fn new(params: &ModelParams, d: &Desideratum) -> Result<Self> {
        if d.tuples.is_empty() {
            return Err(Error::contract(format!("desideratum {} has no tuples", d.name)));
        }
        let vocab = params.config.vocab_size;
        let mut caches = Vec::with_capacity(d.tuples.len());
        for t in &d.tuples {
            t.validate()?;
            for tok in [t.target, t.competing] {
                if tok >= vocab {
                    return Err(Error::Index {
                        what: "answer token",
                        index: tok,
                        bound: vocab,
                    });
                }
            }
            let positions = d.positions.resolve(t.orig.len())?;
            caches.push(cache_alternate(params, &t.orig, &t.alt, &positions)?);
        }
        Ok(Self {
            name: d.name.clone(),
            origs: d.tuples.iter().map(|t| t.orig.clone()).collect(),
            caches,
            targets: d.tuples.iter().map(|t| t.target).collect(),
            competing: d.tuples.iter().map(|t| t.competing).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.origs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origs.is_empty()
    }

    /// Mean `logit(r) − logit(t)` over the tuples, recorded on `tape`.
    fn record_loss<T: Real>(
        &self,
        tape: &mut Tape<T>,
        pv: &ParamVars,
        params: &ModelParams,
        weights: Var,
    ) -> Result<Var> {
        let caches: Vec<&AlternateCache> = self.caches.iter().collect();
        let logits = masked_final_logits(tape, pv, &params.config, &self.origs, &caches, weights)?;
        let rows = 0..self.len();
        let r: Vec<_> = rows.clone().zip(self.competing.iter().copied()).collect();
        let t: Vec<_> = rows.zip(self.targets.iter().copied()).collect();
        let lr = tape.gather(logits, &r)?;
        let lt = tape.gather(logits, &t)?;
        let diff = tape.sub(lr, lt)?;
        Ok(tape.mean(diff))
    }
}

fn record_regularizer<T: Real>(tape: &mut Tape<T>, weights: Var, lambda: f64, eps: f64) -> Var {
    let n = tape.value(weights).numel() as f64;
    let eps_t = T::from_f64(eps).unwrap();
    let shifted = tape.affine(weights, -T::one(), T::one() + eps_t);
    let roots = tape.sqrt(shifted);
    let total = tape.sum(roots);
    let lambda_t = T::from_f64(lambda).unwrap();
    let offset = T::from_f64(-lambda * n * eps.sqrt()).unwrap();
    tape.affine(total, lambda_t, offset)
}

/// `λ·Σ sqrt(1 − w_i + ε) − λ·N·sqrt(ε)`.
pub fn regularizer(mask: &Mask, lambda: f64, eps: f64) -> f64 {
    let n = mask.weights.len() as f64;
    let s: f64 = mask
        .weights
        .iter()
        .map(|&w| (1.0 - w as f64 + eps).sqrt())
        .sum();
    lambda * s - lambda * n * eps.sqrt()
}

/// `logit(r) − logit(t)` for one tuple under `mask`.
pub fn tuple_loss(
    params: &ModelParams,
    mask: &Mask,
    tuple: &DesiderataTuple,
    cache: &AlternateCache,
) -> Result<f32> {
    desideratum_loss_batch(params, mask, &[tuple], &[cache])
}

/// Mean tuple loss over a desideratum; `caches[i]` belongs to `tuples[i]`.
pub fn desideratum_loss(
    params: &ModelParams,
    mask: &Mask,
    desideratum: &Desideratum,
    caches: &[AlternateCache],
) -> Result<f32> {
    if desideratum.tuples.is_empty() {
        return Err(Error::contract(format!(
            "desideratum {} has no tuples",
            desideratum.name
        )));
    }
    let tuples: Vec<_> = desideratum.tuples.iter().collect();
    let caches: Vec<_> = caches.iter().collect();
    desideratum_loss_batch(params, mask, &tuples, &caches)
}

fn desideratum_loss_batch(
    params: &ModelParams,
    mask: &Mask,
    tuples: &[&DesiderataTuple],
    caches: &[&AlternateCache],
) -> Result<f32> {
    if tuples.len() != caches.len() {
        return Err(Error::contract(format!(
            "{} tuples but {} caches",
            tuples.len(),
            caches.len()
        )));
    }
    let vocab = params.config.vocab_size;
    for t in tuples {
        for tok in [t.target, t.competing] {
            if tok >= vocab {
                return Err(Error::Index {
                    what: "answer token",
                    index: tok,
                    bound: vocab,
                });
            }
        }
    }
    let origs: Vec<&[usize]> = tuples.iter().map(|t| t.orig.as_slice()).collect();
    let logits = masked_forward_batch(params, &origs, caches, mask)?;
    let total: f64 = tuples
        .iter()
        .enumerate()
        .map(|(b, t)| (logits.row(b)[t.competing] - logits.row(b)[t.target]) as f64)
        .sum();
    Ok((total / tuples.len() as f64) as f32)
}

/// Objective value and its gradient with respect to the mask weights.
#[derive(Clone, Debug)]
pub struct Objective<T> {
    pub value: T,
    pub grad: Vec<T>,
}

/// Evaluates `Σ_d loss_d + λ·reg` at `weights` in precision `T`, with gradients.
/// `lambda = 0` drops the penalty.
pub fn objective<T: Real>(
    params: &ModelParams,
    weights: &[T],
    desiderata: &[&PreparedDesideratum],
    lambda: f64,
    eps: f64,
) -> Result<Objective<T>> {
    let mut tape = Tape::<T>::new();
    let (value, w) = record_objective(&mut tape, params, weights, desiderata, lambda, eps)?;
    tape.backward(value)?;
    let grad = tape
        .grad(w)
        .ok_or_else(|| Error::contract("mask weights received no gradient"))?
        .into_data();
    Ok(Objective {
        value: tape.value(value).data()[0],
        grad,
    })
}

/// Objective value only, without a backward pass.
pub fn objective_value<T: Real>(
    params: &ModelParams,
    weights: &[T],
    desiderata: &[&PreparedDesideratum],
    lambda: f64,
    eps: f64,
) -> Result<T> {
    let mut tape = Tape::<T>::new();
    let (value, _) = record_objective(&mut tape, params, weights, desiderata, lambda, eps)?;
    Ok(tape.value(value).data()[0])
}

fn record_objective<T: Real>(
    tape: &mut Tape<T>,
    params: &ModelParams,
    weights: &[T],
    desiderata: &[&PreparedDesideratum],
    lambda: f64,
    eps: f64,
) -> Result<(Var, Var)> {
    if desiderata.is_empty() {
        return Err(Error::contract("objective needs at least one desideratum"));
    }
    let pv = ParamVars::load(tape, params, false);
    let w = tape.param(Tensor::from_vec(weights.to_vec()));
    let mut total = desiderata[0].record_loss(tape, &pv, params, w)?;
    for d in &desiderata[1..] {
        let l = d.record_loss(tape, &pv, params, w)?;
        total = tape.add(total, l)?;
    }
    if lambda != 0.0 {
        let reg = record_regularizer(tape, w, lambda, eps);
        total = tape.add(total, reg)?;
    }
    Ok((total, w))
}

// ---- optimizer ----------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    /// One step per desideratum in turn.
    #[default]
    Alternate,
    /// One step on the summed losses.
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscoveryConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub steps_per_desideratum: usize,
    pub rounds: usize,
    pub init_weight: f32,
    /// Initial weights are drawn from `[init_weight − init_jitter, init_weight]`.
    pub init_jitter: f32,
    pub clamp_min: f32,
    pub clamp_max: f32,
    pub reg_epsilon: f64,
    pub threshold: f32,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub combine: CombineMode,
    pub seed: u64,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            lambda: 0.03,
            learning_rate: 0.01,
            steps_per_desideratum: 1,
            rounds: 400,
            init_weight: 0.95,
            init_jitter: 0.02,
            clamp_min: 0.0,
            clamp_max: 1.0,
            reg_epsilon: 1e-6,
            threshold: 0.5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            combine: CombineMode::Alternate,
            seed: 0,
        }
    }
}

impl DiscoveryConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if !(self.init_weight > 0.0 && self.init_weight <= 1.0) {
            return bad("init_weight must lie in (0, 1]");
        }
        if !(self.init_jitter >= 0.0 && self.init_jitter < self.init_weight) {
            return bad("init_jitter must lie in [0, init_weight)");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.reg_epsilon > 0.0) {
            return bad("reg_epsilon must be positive");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0, 1)");
        }
        if !(0.0 <= self.clamp_min && self.clamp_min < self.clamp_max && self.clamp_max <= 1.0) {
            return bad("clamp bounds must satisfy 0 <= min < max <= 1");
        }
        if self.steps_per_desideratum == 0 {
            return bad("steps_per_desideratum must be at least 1");
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Self = serde_json::from_str(&text)?;
        c.validate()?;
        Ok(c)
    }
}

struct Adam {
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize, cfg: &DiscoveryConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            b1: cfg.adam_beta1,
            b2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, w: &mut [f32], grad: &[f32]) {
        self.t += 1;
        let c1 = 1.0 - self.b1.powi(self.t);
        let c2 = 1.0 - self.b2.powi(self.t);
        for i in 0..w.len() {
            let g = grad[i] as f64;
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g;
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g;
            let update = self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
            w[i] = (w[i] as f64 - update) as f32;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: usize,
    pub round: usize,
    pub desideratum: String,
    pub loss: f32,
    pub regularizer: f32,
    pub below_threshold: usize,
}

#[derive(Clone, Debug)]
pub struct DiscoveryResult {
    pub mask: Mask,
    pub binary: BinaryMask,
    pub trajectory: Vec<TrajectoryRow>,
    /// Weights at the end of every round.
    pub history: Vec<Vec<f32>>,
}

pub fn write_trajectory_csv(rows: &[TrajectoryRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{other:?}")),
    })?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Initial weights: `init_weight` minus seeded jitter, one per component.
pub fn initial_weights(n: usize, cfg: &DiscoveryConfig) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..n)
        .map(|_| {
            let j = if cfg.init_jitter > 0.0 {
                rng.gen_range(0.0..cfg.init_jitter)
            } else {
                0.0
            };
            (cfg.init_weight - j).clamp(cfg.clamp_min, cfg.clamp_max)
        })
        .collect()
}

/// Learns a mask over all components for the given desiderata.
pub fn optimize(
    params: &ModelParams,
    desiderata: &[Desideratum],
    cfg: &DiscoveryConfig,
) -> Result<DiscoveryResult> {
    let prepared = desiderata
        .iter()
        .map(|d| PreparedDesideratum::new(params, d))
        .collect::<Result<Vec<_>>>()?;
    let positions = desiderata
        .first()
        .map(|d| d.positions.clone())
        .unwrap_or_default();
    optimize_prepared(params, &prepared, positions, cfg)
}

pub fn optimize_prepared(
    params: &ModelParams,
    prepared: &[PreparedDesideratum],
    positions: PatchPositions,
    cfg: &DiscoveryConfig,
) -> Result<DiscoveryResult> {
    cfg.validate()?;
    if prepared.is_empty() {
        return Err(Error::contract("discovery needs at least one desideratum"));
    }
    let mut mask = Mask::ones(&params.config);
    mask.positions = positions;
    let n = mask.weights.len();
    mask.weights = initial_weights(n, cfg);

    let mut adam = Adam::new(n, cfg);
    let mut trajectory = Vec::new();
    let mut history = Vec::with_capacity(cfg.rounds);
    let mut last_finite: Option<(f32, usize)> = None;
    let mut step = 0;

    let groups: Vec<(String, Vec<&PreparedDesideratum>)> = match cfg.combine {
        CombineMode::Alternate => prepared.iter().map(|d| (d.name.clone(), vec![d])).collect(),
        CombineMode::Sum => vec![(
            prepared.iter().map(|d| d.name.as_str()).collect::<Vec<_>>().join("+"),
            prepared.iter().collect(),
        )],
    };

    for round in 0..cfg.rounds {
        for (name, group) in &groups {
            for _ in 0..cfg.steps_per_desideratum {
                let reg = regularizer(&mask, cfg.lambda, cfg.reg_epsilon) as f32;
                let obj = objective::<f32>(params, &mask.weights, group, cfg.lambda, cfg.reg_epsilon)?;
                let loss = obj.value - reg;
                if !obj.value.is_finite() || obj.grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::NumericalAbort {
                        step,
                        desideratum: name.clone(),
                        last_finite_loss: last_finite.map(|l| l.0),
                        last_finite_step: last_finite.map(|l| l.1),
                    });
                }
                last_finite = Some((obj.value, step));
                adam.step(&mut mask.weights, &obj.grad);
                mask.clamp(cfg.clamp_min, cfg.clamp_max);
                debug_assert!(mask.weights.iter().all(|w| (0.0..=1.0).contains(w)));
                trajectory.push(TrajectoryRow {
                    step,
                    round,
                    desideratum: name.clone(),
                    loss,
                    regularizer: reg,
                    below_threshold: mask.weights.iter().filter(|&&w| w < cfg.threshold).count(),
                });
                step += 1;
            }
        }
        history.push(mask.weights.clone());
    }
    let binary = round_mask(&mask, cfg.threshold);
    Ok(DiscoveryResult {
        mask,
        binary,
        trajectory,
        history,
    })
}

// ---- evaluation -----------------------------------------------------------------

/// Fraction of tuples whose patched argmax over the whole vocabulary is `t`.
pub fn evaluate_accuracy(
    params: &ModelParams,
    binary: &BinaryMask,
    tuples: &[DesiderataTuple],
) -> Result<f32> {
    evaluate_mask_accuracy(params, &binary.to_mask(&params.config), tuples)
}

/// [`evaluate_accuracy`] for a continuous mask.
pub fn evaluate_mask_accuracy(
    params: &ModelParams,
    mask: &Mask,
    tuples: &[DesiderataTuple],
) -> Result<f32> {
    if tuples.is_empty() {
        return Err(Error::contract("accuracy over an empty tuple set"));
    }
    let mut correct = 0usize;
    for chunk in tuples.chunks(EVAL_CHUNK) {
        let caches = chunk
            .iter()
            .map(|t| {
                t.validate()?;
                cache_alternate(params, &t.orig, &t.alt, &mask.positions.resolve(t.orig.len())?)
            })
            .collect::<Result<Vec<_>>>()?;
        let origs: Vec<&[usize]> = chunk.iter().map(|t| t.orig.as_slice()).collect();
        let refs: Vec<&AlternateCache> = caches.iter().collect();
        let logits = masked_forward_batch(params, &origs, &refs, mask)?;
        correct += chunk
            .iter()
            .enumerate()
            .filter(|(b, t)| argmax(logits.row(*b)) == t.target)
            .count();
    }
    Ok(correct as f32 / tuples.len() as f32)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
