//! Hand-wired two-layer attention-only model for the recall task.
//!
//! Residual layout (96 dims): token one-hot, position one-hot, a ten-dim
//! answer subspace read by the unembedding, and a junk subspace nobody reads.
//! Every head queries only from the final position, keyed on one fixed
//! source position. The designated head keys on `d1` and copies its digit
//! into the answer subspace; the others copy whatever sits at their source
//! position into junk, one of them reading `d1` as well.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{RecallProblem, RECALL_LEN, VOCAB_SIZE};
use crate::desiderata::argmax;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transformer::{
    enumerate_components, final_logits, ComponentId, ComponentKind, ModelConfig, ModelParams,
};

/// The only head whose removal breaks recall.
pub const PLANTED_HEAD: ComponentId = ComponentId {
    layer: 1,
    kind: ComponentKind::Head(2),
};

const N_LAYERS: usize = 2;
const N_HEADS: usize = 6;
const D_MODEL: usize = 96;
const POS: usize = VOCAB_SIZE;
const OUT: usize = POS + RECALL_LEN;
const JUNK: usize = OUT + 10;

/// Source position keyed by each head, indexed `[layer][head]`.
const SOURCES: [[usize; N_HEADS]; N_LAYERS] = [[7, 8, 2, 4, 3, 5], [0, 7, 2, 9, 8, 11]];

const QK_SCALE: f32 = 1.5;
const COPY_SCALE: f32 = 0.25;
const JUNK_SCALE: f32 = 0.01;
const READ_SCALE: f32 = 0.2;
const UNEMBED_SCALE: f32 = 2.0;
const JUNK_SEED: u64 = 0x5eed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedReport {
    pub accuracy: f32,
    pub designated_ablation_accuracy: f32,
    /// Accuracy with each other head zeroed, keyed by component name.
    pub distractor_ablation_accuracy: BTreeMap<String, f32>,
    pub n_components: usize,
}

#[derive(Clone, Debug)]
pub struct PlantedSpec {
    pub params: ModelParams,
    pub ground_truth: BTreeSet<ComponentId>,
    pub report: PlantedReport,
}

impl PlantedSpec {
    /// The recall prompts the self-checks run on.
    pub fn check_problems() -> Vec<RecallProblem> {
        check_problems()
    }
}

pub fn planted_config() -> ModelConfig {
    ModelConfig {
        n_layers: N_LAYERS,
        n_heads: N_HEADS,
        d_model: D_MODEL,
        d_mlp: 4,
        vocab_size: VOCAB_SIZE,
        max_seq_len: RECALL_LEN,
        seed: 0,
    }
}

fn set(t: &mut Tensor, r: usize, c: usize, v: f32) {
    let cols = t.cols();
    t.data_mut()[r * cols + c] = v;
}

fn wire() -> Result<ModelParams> {
    let cfg = planted_config();
    let mut p = ModelParams::zeros(&cfg)?;
    let dh = cfg.d_head();
    let final_pos = RECALL_LEN - 1;
    for i in 0..VOCAB_SIZE {
        set(&mut p.tok_emb, i, i, 1.0);
    }
    for i in 0..RECALL_LEN {
        set(&mut p.pos_emb, i, POS + i, 1.0);
    }
    for d in 0..10 {
        set(&mut p.unembed, OUT + d, d, UNEMBED_SCALE);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(JUNK_SEED);
    let junk_dims = D_MODEL - JUNK;
    for (l, layer) in p.layers.iter_mut().enumerate() {
        for h in 0..N_HEADS {
            let q = h * dh;
            let k = D_MODEL + h * dh;
            let v = 2 * D_MODEL + h * dh;
            set(&mut layer.w_qkv, POS + final_pos, q, QK_SCALE);
            set(&mut layer.w_qkv, POS + SOURCES[l][h], k, QK_SCALE);
            if (ComponentId::head(l, h)) == PLANTED_HEAD {
                for d in 0..10 {
                    set(&mut layer.w_qkv, d, v + d, 1.0);
                    set(&mut layer.w_o[h], d, OUT + d, COPY_SCALE);
                }
            } else {
                let read = Tensor::randn([VOCAB_SIZE, dh], READ_SCALE, &mut rng);
                for tok in 0..VOCAB_SIZE {
                    for j in 0..dh {
                        set(&mut layer.w_qkv, tok, v + j, read.row(tok)[j]);
                    }
                }
                let write = Tensor::randn([dh, junk_dims], JUNK_SCALE, &mut rng);
                for j in 0..dh {
                    for c in 0..junk_dims {
                        set(&mut layer.w_o[h], j, JUNK + c, write.row(j)[c]);
                    }
                }
            }
        }
    }
    Ok(p)
}

fn check_problems() -> Vec<RecallProblem> {
    let mut out = Vec::new();
    for d1 in 1..=9 {
        for d2 in 1..=9 {
            for y in (10..=99).step_by(9) {
                out.push(RecallProblem::new(d1 * 10 + d2, y).expect("two-digit operands"));
            }
        }
    }
    out
}

fn recall_accuracy(params: &ModelParams, problems: &[RecallProblem]) -> Result<f32> {
    let seqs: Vec<Vec<usize>> = problems.iter().map(|p| p.tokens()).collect();
    let logits = final_logits(params, &seqs)?;
    let correct = problems
        .iter()
        .enumerate()
        .filter(|(b, p)| argmax(logits.row(*b)) == p.answer_token())
        .count();
    Ok(correct as f32 / problems.len() as f32)
}

fn ablate(params: &ModelParams, id: ComponentId) -> ModelParams {
    let mut p = params.clone();
    let layer = &mut p.layers[id.layer];
    match id.kind {
        ComponentKind::Head(h) => layer.w_o[h].data_mut().fill(0.0),
        ComponentKind::Mlp => layer.w_down.data_mut().fill(0.0),
    }
    p
}

/// Builds the recall model and verifies it before returning.
pub fn build_planted_model() -> Result<PlantedSpec> {
    let params = wire()?;
    let problems = check_problems();
    let accuracy = recall_accuracy(&params, &problems)?;
    if accuracy < 1.0 {
        return Err(Error::Construction(format!(
            "recall accuracy {accuracy:.4} is below 100%"
        )));
    }
    let designated = recall_accuracy(&ablate(&params, PLANTED_HEAD), &problems)?;
    if designated > 0.2 {
        return Err(Error::Construction(format!(
            "ablating {PLANTED_HEAD} leaves accuracy at {designated:.4}"
        )));
    }
    let mut distractors = BTreeMap::new();
    for id in enumerate_components(&params.config) {
        if id == PLANTED_HEAD || id.kind == ComponentKind::Mlp {
            continue;
        }
        let acc = recall_accuracy(&ablate(&params, id), &problems)?;
        if acc != accuracy {
            return Err(Error::Construction(format!(
                "ablating distractor {id} changes accuracy to {acc:.4}"
            )));
        }
        distractors.insert(id.to_string(), acc);
    }
    Ok(PlantedSpec {
        ground_truth: BTreeSet::from([PLANTED_HEAD]),
        report: PlantedReport {
            accuracy,
            designated_ablation_accuracy: designated,
            distractor_ablation_accuracy: distractors,
            n_components: params.config.n_components(),
        },
        params,
    })
}
