//! Pre-norm decoder-only transformer whose residual stream is the sum of
//! per-head and per-MLP writes.
//!
//! Every attention head writes `z_h · W_O[h]` and every MLP writes its block
//! output; each write is routed through a [`WriteHook`] before it is added to
//! the residual. Tracing and activation patching are both hooks over the same
//! forward code, so plain, traced and patched runs cannot drift apart.

mod checkpoint;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, CHECKPOINT_MAGIC};

pub const RMSNORM_EPS: f32 = 1e-5;
pub const INIT_STD: f32 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// 4 layers × 8 heads, d_model 128, d_mlp 512.
    pub fn toy(vocab_size: usize, max_seq_len: usize) -> Self {
        Self {
            n_layers: 4,
            n_heads: 8,
            d_model: 128,
            d_mlp: 512,
            vocab_size,
            max_seq_len,
            seed: 0,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_components(&self) -> usize {
        self.n_layers * (self.n_heads + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Position of `id` in [`enumerate_components`] order.
    pub fn component_index(&self, id: ComponentId) -> Result<usize> {
        let bad = || Error::Index {
            what: "component",
            index: id.layer,
            bound: self.n_layers,
        };
        if id.layer >= self.n_layers {
            return Err(bad());
        }
        let within = match id.kind {
            ComponentKind::Head(h) if h < self.n_heads => h,
            ComponentKind::Head(h) => {
                return Err(Error::Index {
                    what: "head",
                    index: h,
                    bound: self.n_heads,
                })
            }
            ComponentKind::Mlp => self.n_heads,
        };
        Ok(id.layer * (self.n_heads + 1) + within)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ComponentKind {
    Head(usize),
    Mlp,
}

/// An attention head or MLP block. Orders layer-major, heads before the MLP.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ComponentId {
    pub layer: usize,
    pub kind: ComponentKind,
}

impl ComponentId {
    pub fn head(layer: usize, head: usize) -> Self {
        Self {
            layer,
            kind: ComponentKind::Head(head),
        }
    }

    pub fn mlp(layer: usize) -> Self {
        Self {
            layer,
            kind: ComponentKind::Mlp,
        }
    }

    pub fn head_index(&self) -> Option<usize> {
        match self.kind {
            ComponentKind::Head(h) => Some(h),
            ComponentKind::Mlp => None,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            ComponentKind::Head(_) => "head",
            ComponentKind::Mlp => "mlp",
        }
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ComponentKind::Head(h) => write!(f, "h{}.{}", self.layer, h),
            ComponentKind::Mlp => write!(f, "mlp{}", self.layer),
        }
    }
}

impl FromStr for ComponentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse component id {s:?}"));
        if let Some(rest) = s.strip_prefix("mlp") {
            return Ok(Self::mlp(rest.parse().map_err(|_| bad())?));
        }
        let rest = s.strip_prefix('h').ok_or_else(bad)?;
        let (l, h) = rest.split_once('.').ok_or_else(bad)?;
        Ok(Self::head(
            l.parse().map_err(|_| bad())?,
            h.parse().map_err(|_| bad())?,
        ))
    }
}

impl Serialize for ComponentId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ComponentId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// All heads and MLPs, layer-major with heads before the MLP in each layer.
pub fn enumerate_components(config: &ModelConfig) -> Vec<ComponentId> {
    (0..config.n_layers)
        .flat_map(|l| {
            (0..config.n_heads)
                .map(move |h| ComponentId::head(l, h))
                .chain(std::iter::once(ComponentId::mlp(l)))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub attn_norm: Tensor,
    /// `[d_model, 3·d_model]`, columns laid out `[q | k | v]`, heads contiguous.
    pub w_qkv: Tensor,
    /// Per-head output projection, `[d_head, d_model]`.
    pub w_o: Vec<Tensor>,
    pub mlp_norm: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_norm: Tensor,
    pub unembed: Tensor,
}

impl ModelParams {
    /// All-zero weights with unit norm gains.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d, m, dh) = (config.d_model, config.d_mlp, config.d_head());
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attn_norm: Tensor::ones([d]),
                w_qkv: Tensor::zeros([d, 3 * d]),
                w_o: (0..config.n_heads).map(|_| Tensor::zeros([dh, d])).collect(),
                mlp_norm: Tensor::ones([d]),
                w_gate: Tensor::zeros([d, m]),
                w_up: Tensor::zeros([d, m]),
                w_down: Tensor::zeros([m, d]),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tok_emb: Tensor::zeros([config.vocab_size, d]),
            pos_emb: Tensor::zeros([config.max_seq_len, d]),
            layers,
            final_norm: Tensor::ones([d]),
            unembed: Tensor::zeros([d, config.vocab_size]),
        })
    }

    /// Parameters with canonical names, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.attn_norm"), &layer.attn_norm));
            out.push((format!("layers.{l}.w_qkv"), &layer.w_qkv));
            for (h, w) in layer.w_o.iter().enumerate() {
                out.push((format!("layers.{l}.w_o.{h}"), w));
            }
            out.push((format!("layers.{l}.mlp_norm"), &layer.mlp_norm));
            out.push((format!("layers.{l}.w_gate"), &layer.w_gate));
            out.push((format!("layers.{l}.w_up"), &layer.w_up));
            out.push((format!("layers.{l}.w_down"), &layer.w_down));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    /// Same order as [`ModelParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for layer in &mut self.layers {
            out.push(&mut layer.attn_norm);
            out.push(&mut layer.w_qkv);
            out.extend(layer.w_o.iter_mut());
            out.push(&mut layer.mlp_norm);
            out.push(&mut layer.w_gate);
            out.push(&mut layer.w_up);
            out.push(&mut layer.w_down);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.unembed);
        out
    }

    /// Zeroes every head output projection and MLP down projection, so no
    /// component writes anything into the residual stream.
    pub fn zero_output_projections(&mut self) {
        for layer in &mut self.layers {
            for w in &mut layer.w_o {
                w.data_mut().fill(0.0);
            }
            layer.w_down.data_mut().fill(0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }
}

/// Scaled normal initialization: std 0.02, output projections additionally
/// scaled by `1/sqrt(2·n_layers)`, norm gains at one.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    let mut p = ModelParams::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out_std = INIT_STD / (2.0 * config.n_layers as f32).sqrt();
    let (d, m, dh, v) = (
        config.d_model,
        config.d_mlp,
        config.d_head(),
        config.vocab_size,
    );
    p.tok_emb = Tensor::randn([v, d], INIT_STD, &mut rng);
    p.pos_emb = Tensor::randn([config.max_seq_len, d], INIT_STD, &mut rng);
    for layer in &mut p.layers {
        layer.w_qkv = Tensor::randn([d, 3 * d], INIT_STD, &mut rng);
        for w in &mut layer.w_o {
            *w = Tensor::randn([dh, d], out_std, &mut rng);
        }
        layer.w_gate = Tensor::randn([d, m], INIT_STD, &mut rng);
        layer.w_up = Tensor::randn([d, m], INIT_STD, &mut rng);
        layer.w_down = Tensor::randn([m, d], out_std, &mut rng);
    }
    p.unembed = Tensor::randn([d, v], INIT_STD, &mut rng);
    p.config.seed = seed;
    Ok(p)
}

// ---- tape plumbing ----------------------------------------------------------

pub(crate) struct LayerVars {
    attn_norm: Var,
    w_qkv: Var,
    w_o: Vec<Var>,
    mlp_norm: Var,
    w_gate: Var,
    w_up: Var,
    w_down: Var,
}

/// Model parameters recorded on a tape.
pub(crate) struct ParamVars {
    tok_emb: Var,
    pos_emb: Var,
    layers: Vec<LayerVars>,
    final_norm: Var,
    unembed: Var,
}

impl ParamVars {
    pub(crate) fn load<T: Real>(tape: &mut Tape<T>, params: &ModelParams, trainable: bool) -> Self {
        let mut leaf = |t: &Tensor| tape.leaf(t.cast(), trainable);
        let tok_emb = leaf(&params.tok_emb);
        let pos_emb = leaf(&params.pos_emb);
        let layers = params
            .layers
            .iter()
            .map(|l| LayerVars {
                attn_norm: leaf(&l.attn_norm),
                w_qkv: leaf(&l.w_qkv),
                w_o: l.w_o.iter().map(&mut leaf).collect(),
                mlp_norm: leaf(&l.mlp_norm),
                w_gate: leaf(&l.w_gate),
                w_up: leaf(&l.w_up),
                w_down: leaf(&l.w_down),
            })
            .collect();
        let final_norm = leaf(&params.final_norm);
        let unembed = leaf(&params.unembed);
        Self {
            tok_emb,
            pos_emb,
            layers,
            final_norm,
            unembed,
        }
    }

    /// Vars in [`ModelParams::named_tensors`] order.
    pub(crate) fn ordered(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            out.extend([l.attn_norm, l.w_qkv]);
            out.extend(l.w_o.iter().copied());
            out.extend([l.mlp_norm, l.w_gate, l.w_up, l.w_down]);
        }
        out.extend([self.final_norm, self.unembed]);
        out
    }
}

/// Intercepts each component's residual write before it is added.
pub(crate) trait WriteHook<T: Real> {
    fn on_write(
        &mut self,
        tape: &mut Tape<T>,
        component: ComponentId,
        index: usize,
        write: Var,
    ) -> Result<Var>;
}

pub(crate) struct NoHook;

impl<T: Real> WriteHook<T> for NoHook {
    fn on_write(&mut self, _: &mut Tape<T>, _: ComponentId, _: usize, write: Var) -> Result<Var> {
        Ok(write)
    }
}

/// A batch of equal-length token sequences, flattened row-major.
pub(crate) struct Batch {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    pub(crate) fn new<S: AsRef<[usize]>>(config: &ModelConfig, seqs: &[S]) -> Result<Self> {
        let seq = seqs
            .first()
            .map(|s| s.as_ref().len())
            .ok_or_else(|| Error::contract("empty batch"))?;
        if seq == 0 {
            return Err(Error::contract("empty token sequence"));
        }
        if seq > config.max_seq_len {
            return Err(Error::Index {
                what: "sequence length",
                index: seq,
                bound: config.max_seq_len,
            });
        }
        let mut ids = Vec::with_capacity(seqs.len() * seq);
        for s in seqs {
            let s = s.as_ref();
            if s.len() != seq {
                return Err(Error::Alignment(format!(
                    "batch mixes sequence lengths {seq} and {}",
                    s.len()
                )));
            }
            if let Some(&bad) = s.iter().find(|&&t| t >= config.vocab_size) {
                return Err(Error::Index {
                    what: "token id",
                    index: bad,
                    bound: config.vocab_size,
                });
            }
            ids.extend_from_slice(s);
        }
        let positions = (0..seqs.len()).flat_map(|_| 0..seq).collect();
        Ok(Self {
            ids,
            positions,
            batch: seqs.len(),
            seq,
        })
    }

    /// Flat row of `position` in sequence `b`.
    pub(crate) fn row(&self, b: usize, position: usize) -> usize {
        b * self.seq + position
    }

    pub(crate) fn final_rows(&self) -> Vec<usize> {
        (0..self.batch).map(|b| self.row(b, self.seq - 1)).collect()
    }
}

/// Runs every layer and returns the pre-final-norm residual `[batch·seq, d]`.
pub(crate) fn residual_stream<T: Real>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    config: &ModelConfig,
    batch: &Batch,
    hook: &mut dyn WriteHook<T>,
) -> Result<Var> {
    let eps = T::cast_from_f32(RMSNORM_EPS);
    let tok = tape.embed(pv.tok_emb, &batch.ids)?;
    let pos = tape.embed(pv.pos_emb, &batch.positions)?;
    let mut resid = tape.add(tok, pos)?;
    let n_heads = config.n_heads;
    for (l, lv) in pv.layers.iter().enumerate() {
        let h = tape.rmsnorm(resid, lv.attn_norm, eps)?;
        let qkv = tape.matmul(h, lv.w_qkv)?;
        for (head, &w_o) in lv.w_o.iter().enumerate() {
            let z = tape.attention_head(qkv, head, n_heads, batch.batch, batch.seq)?;
            let write = tape.matmul(z, w_o)?;
            let id = ComponentId::head(l, head);
            let write = hook.on_write(tape, id, l * (n_heads + 1) + head, write)?;
            resid = tape.add(resid, write)?;
        }
        let h = tape.rmsnorm(resid, lv.mlp_norm, eps)?;
        let gate = tape.matmul(h, lv.w_gate)?;
        let up = tape.matmul(h, lv.w_up)?;
        let act = tape.silu(gate);
        let act = tape.mul(act, up)?;
        let write = tape.matmul(act, lv.w_down)?;
        let write = hook.on_write(tape, ComponentId::mlp(l), l * (n_heads + 1) + n_heads, write)?;
        resid = tape.add(resid, write)?;
    }
    Ok(resid)
}

/// Final norm and unembedding, optionally restricted to some rows.
pub(crate) fn unembed<T: Real>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    resid: Var,
    rows: Option<&[usize]>,
) -> Result<Var> {
    let resid = match rows {
        Some(rows) => tape.select_rows(resid, rows)?,
        None => resid,
    };
    let h = tape.rmsnorm(resid, pv.final_norm, T::cast_from_f32(RMSNORM_EPS))?;
    tape.matmul(h, pv.unembed)
}

// ---- public forward API -----------------------------------------------------

/// Logits at every position, `[seq, vocab]`.
pub fn forward(params: &ModelParams, tokens: &[usize]) -> Result<Tensor> {
    Ok(forward_traced(params, tokens, &[])?.logits)
}

/// Final-position logits for a batch of equal-length sequences, `[batch, vocab]`.
pub fn final_logits<S: AsRef<[usize]>>(params: &ModelParams, seqs: &[S]) -> Result<Tensor> {
    let batch = Batch::new(&params.config, seqs)?;
    let mut tape = Tape::<f32>::new();
    let pv = ParamVars::load(&mut tape, params, false);
    let resid = residual_stream(&mut tape, &pv, &params.config, &batch, &mut NoHook)?;
    let logits = unembed(&mut tape, &pv, resid, Some(&batch.final_rows()))?;
    Ok(tape.value(logits).clone())
}

/// Per-position record of what each component wrote into the residual stream.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub logits: Tensor,
    pub positions: Vec<usize>,
    /// Component write at each recorded position, `[positions, d_model]`.
    /// Empty when no positions were recorded.
    pub contributions: BTreeMap<ComponentId, Tensor>,
    /// Token plus positional embedding at each recorded position.
    pub embedding: Vec<Vec<f32>>,
    /// Residual entering the final norm at each recorded position.
    pub final_residual: Vec<Vec<f32>>,
}

struct Recorder {
    rows: Vec<usize>,
    out: BTreeMap<ComponentId, Tensor>,
}

impl Recorder {
    fn take_rows<T: Real>(tape: &Tape<T>, v: Var, rows: &[usize]) -> Option<Tensor> {
        if rows.is_empty() {
            return None;
        }
        let t = tape.value(v);
        let data = rows
            .iter()
            .flat_map(|&r| t.row(r).iter().map(|x| x.cast_to_f32()))
            .collect();
        Tensor::new([rows.len(), t.cols()], data).ok()
    }
}

impl WriteHook<f32> for Recorder {
    fn on_write(
        &mut self,
        tape: &mut Tape<f32>,
        component: ComponentId,
        _: usize,
        write: Var,
    ) -> Result<Var> {
        if let Some(t) = Self::take_rows(tape, write, &self.rows) {
            self.out.insert(component, t);
        }
        Ok(write)
    }
}

/// Clean forward pass recording component writes at `record_positions`.
pub fn forward_traced(
    params: &ModelParams,
    tokens: &[usize],
    record_positions: &[usize],
) -> Result<ForwardTrace> {
    let config = &params.config;
    let batch = Batch::new(config, &[tokens])?;
    if let Some(&p) = record_positions.iter().find(|&&p| p >= batch.seq) {
        return Err(Error::Index {
            what: "record position",
            index: p,
            bound: batch.seq,
        });
    }
    let mut tape = Tape::<f32>::new();
    let pv = ParamVars::load(&mut tape, params, false);
    let mut rec = Recorder {
        rows: record_positions.to_vec(),
        out: BTreeMap::new(),
    };
    let resid = residual_stream(&mut tape, &pv, config, &batch, &mut rec)?;
    let logits = unembed(&mut tape, &pv, resid, None)?;

    let embedding = record_positions
        .iter()
        .map(|&p| {
            let tok = params.tok_emb.row(tokens[p]);
            let pos = params.pos_emb.row(p);
            tok.iter().zip(pos).map(|(a, b)| a + b).collect()
        })
        .collect();
    let resid = tape.value(resid);
    let final_residual = record_positions.iter().map(|&p| resid.row(p).to_vec()).collect();
    Ok(ForwardTrace {
        logits: tape.value(logits).clone(),
        positions: record_positions.to_vec(),
        contributions: rec.out,
        embedding,
        final_residual,
    })
}
