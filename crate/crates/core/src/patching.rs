//! Activation patching with soft per-component masks.
//!
//! During a forward pass over the original sequence, every component's write
//! `v` at a patched position is replaced by `w·v + (1 − w)·v_a`, where `v_a`
//! is the same component's write on the alternate sequence. Patched writes
//! enter the residual immediately, so later components see the intervened
//! stream. The `v_a` values come from a clean alternate run cached once.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::transformer::{
    enumerate_components, forward_traced, residual_stream, unembed, Batch, ComponentId,
    ComponentKind, ModelConfig, ModelParams, ParamVars, WriteHook,
};

pub const DEFAULT_THRESHOLD: f32 = 0.5;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchPositions {
    #[default]
    FinalToken,
    Explicit(Vec<usize>),
}

impl PatchPositions {
    pub fn resolve(&self, seq_len: usize) -> Result<Vec<usize>> {
        match self {
            PatchPositions::FinalToken => Ok(vec![seq_len - 1]),
            PatchPositions::Explicit(ps) => {
                if let Some(&p) = ps.iter().find(|&&p| p >= seq_len) {
                    return Err(Error::Alignment(format!(
                        "patch position {p} outside sequence of length {seq_len}"
                    )));
                }
                let mut sorted = ps.clone();
                sorted.sort_unstable();
                sorted.dedup();
                Ok(sorted)
            }
        }
    }
}

/// Continuous mask: `w = 1` keeps a component, `w = 0` fully patches it.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub components: Vec<ComponentId>,
    pub weights: Vec<f32>,
    pub positions: PatchPositions,
}

impl Mask {
    pub fn uniform(config: &ModelConfig, weight: f32) -> Self {
        let components = enumerate_components(config);
        let weights = vec![weight; components.len()];
        Self {
            components,
            weights,
            positions: PatchPositions::FinalToken,
        }
    }

    pub fn ones(config: &ModelConfig) -> Self {
        Self::uniform(config, 1.0)
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        Self::uniform(config, 0.0)
    }

    pub fn weight(&self, id: ComponentId) -> Option<f32> {
        let i = self.components.iter().position(|&c| c == id)?;
        Some(self.weights[i])
    }

    pub fn set(&mut self, id: ComponentId, w: f32) -> Result<()> {
        let i = self
            .components
            .iter()
            .position(|&c| c == id)
            .ok_or_else(|| Error::contract(format!("mask has no component {id}")))?;
        self.weights[i] = w;
        Ok(())
    }

    pub fn clamp(&mut self, lo: f32, hi: f32) {
        for w in &mut self.weights {
            *w = w.clamp(lo, hi);
        }
    }

    /// Checks the mask covers exactly the model's components with weights in [0, 1].
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.components != enumerate_components(config) {
            return Err(Error::contract(
                "mask components differ from the model's enumerated components",
            ));
        }
        if self.weights.len() != self.components.len() {
            return Err(Error::contract("mask weight count differs from component count"));
        }
        if let Some(w) = self.weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(Error::contract(format!("mask weight {w} outside [0, 1]")));
        }
        Ok(())
    }
}

/// Set of fully patched components; every other component keeps its own write.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BinaryMask {
    pub patched: BTreeSet<ComponentId>,
    pub positions: PatchPositions,
}

impl BinaryMask {
    pub fn to_mask(&self, config: &ModelConfig) -> Mask {
        let mut m = Mask::ones(config);
        for (c, w) in m.components.iter().zip(m.weights.iter_mut()) {
            if self.patched.contains(c) {
                *w = 0.0;
            }
        }
        m.positions = self.positions.clone();
        m
    }

    pub fn len(&self) -> usize {
        self.patched.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patched.is_empty()
    }
}

/// `w < threshold` patches the component; ties stay unpatched.
pub fn round_mask(mask: &Mask, threshold: f32) -> BinaryMask {
    BinaryMask {
        patched: mask
            .components
            .iter()
            .zip(&mask.weights)
            .filter(|(_, &w)| w < threshold)
            .map(|(&c, _)| c)
            .collect(),
        positions: mask.positions.clone(),
    }
}

/// Clean alternate-run writes at the patch positions.
#[derive(Clone, Debug)]
pub struct AlternateCache {
    pub positions: Vec<usize>,
    /// Alternate tokens at `positions`, used to re-check alignment when patching.
    pub tokens_at_positions: Vec<usize>,
    pub seq_len: usize,
    /// `[positions, d_model]` per component.
    pub contributions: BTreeMap<ComponentId, Tensor>,
    pub alt_final_logits: Vec<f32>,
}

fn check_alignment(orig: &[usize], alt: &[usize], positions: &[usize]) -> Result<()> {
    if orig.len() != alt.len() {
        return Err(Error::Alignment(format!(
            "original has {} tokens, alternate has {}",
            orig.len(),
            alt.len()
        )));
    }
    for &p in positions {
        if p >= orig.len() {
            return Err(Error::Alignment(format!(
                "patch position {p} outside sequence of length {}",
                orig.len()
            )));
        }
        if orig[p] != alt[p] {
            return Err(Error::Alignment(format!(
                "original and alternate differ at patched position {p} ({} vs {})",
                orig[p], alt[p]
            )));
        }
    }
    Ok(())
}

/// Caches every component's clean write on `alt` at `positions`.
pub fn cache_alternate(
    params: &ModelParams,
    orig: &[usize],
    alt: &[usize],
    positions: &[usize],
) -> Result<AlternateCache> {
    cache_alternate_for(
        params,
        orig,
        alt,
        positions,
        &enumerate_components(&params.config),
    )
}

/// Like [`cache_alternate`] but keeps only the listed components.
pub fn cache_alternate_for(
    params: &ModelParams,
    orig: &[usize],
    alt: &[usize],
    positions: &[usize],
    components: &[ComponentId],
) -> Result<AlternateCache> {
    if positions.is_empty() {
        return Err(Error::Alignment("no patch positions".into()));
    }
    check_alignment(orig, alt, positions)?;
    let trace = forward_traced(params, alt, positions)?;
    let last = trace.logits.row(alt.len() - 1).to_vec();
    let keep: BTreeSet<_> = components.iter().collect();
    let contributions = trace
        .contributions
        .into_iter()
        .filter(|(c, _)| keep.contains(c))
        .collect();
    Ok(AlternateCache {
        positions: positions.to_vec(),
        tokens_at_positions: positions.iter().map(|&p| alt[p]).collect(),
        seq_len: alt.len(),
        contributions,
        alt_final_logits: last,
    })
}

/// Caches each `(orig, alt)` pair at the positions the mask selects.
pub fn cache_pairs(
    params: &ModelParams,
    pairs: &[(&[usize], &[usize])],
    positions: &PatchPositions,
) -> Result<Vec<AlternateCache>> {
    pairs
        .iter()
        .map(|(o, a)| cache_alternate(params, o, a, &positions.resolve(o.len())?))
        .collect()
}

struct PatchHook {
    weights: Var,
    /// Per component index: stacked alternate rows and their flat batch rows.
    alts: Vec<Option<(Var, Vec<usize>)>>,
}

impl<T: Real> WriteHook<T> for PatchHook {
    fn on_write(
        &mut self,
        tape: &mut Tape<T>,
        _: ComponentId,
        index: usize,
        write: Var,
    ) -> Result<Var> {
        match &self.alts[index] {
            Some((alt, rows)) => tape.blend(write, self.weights, index, *alt, rows),
            None => Ok(write),
        }
    }
}

/// Records a patched forward pass over a batch and returns final-position
/// logits `[batch, vocab]`. `weights` must be a tape vector with one entry per
/// enumerated component; components missing from a cache must have weight 1.
pub(crate) fn masked_final_logits<T: Real, S: AsRef<[usize]>>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    config: &ModelConfig,
    origs: &[S],
    caches: &[&AlternateCache],
    weights: Var,
) -> Result<Var> {
    if origs.len() != caches.len() {
        return Err(Error::contract(format!(
            "{} sequences but {} caches",
            origs.len(),
            caches.len()
        )));
    }
    let batch = Batch::new(config, origs)?;
    let components = enumerate_components(config);
    if tape.value(weights).numel() != components.len() {
        return Err(Error::contract(format!(
            "mask has {} weights for {} components",
            tape.value(weights).numel(),
            components.len()
        )));
    }
    for (orig, cache) in origs.iter().zip(caches) {
        let orig = orig.as_ref();
        if orig.len() != cache.seq_len {
            return Err(Error::Alignment(format!(
                "cache built for length {}, original has {}",
                cache.seq_len,
                orig.len()
            )));
        }
        for (&p, &tok) in cache.positions.iter().zip(&cache.tokens_at_positions) {
            if orig[p] != tok {
                return Err(Error::Alignment(format!(
                    "original token at patched position {p} differs from the cached alternate"
                )));
            }
        }
    }

    let d = config.d_model;
    let weight_values: Vec<f32> = tape
        .value(weights)
        .data()
        .iter()
        .map(|w| w.cast_to_f32())
        .collect();
    let mut alts = Vec::with_capacity(components.len());
    for (i, c) in components.iter().enumerate() {
        let present = caches.iter().filter(|k| k.contributions.contains_key(c)).count();
        if present == 0 && weight_values[i] == 1.0 {
            alts.push(None);
            continue;
        }
        if present != caches.len() {
            return Err(Error::contract(format!(
                "component {c} has weight {} but no cached alternate value",
                weight_values[i]
            )));
        }
        let mut rows = Vec::new();
        let mut data: Vec<T> = Vec::new();
        for (b, cache) in caches.iter().enumerate() {
            let t = &cache.contributions[c];
            data.extend(t.data().iter().map(|&v| T::cast_from_f32(v)));
            rows.extend(cache.positions.iter().map(|&p| batch.row(b, p)));
        }
        let alt = tape.constant(Tensor::new([rows.len(), d], data)?);
        alts.push(Some((alt, rows)));
    }

    let mut hook = PatchHook { weights, alts };
    let resid = residual_stream(tape, pv, config, &batch, &mut hook)?;
    unembed(tape, pv, resid, Some(&batch.final_rows()))
}

/// Final-position logits of the original sequence under `mask`.
pub fn masked_forward(
    params: &ModelParams,
    orig: &[usize],
    cache: &AlternateCache,
    mask: &Mask,
) -> Result<Vec<f32>> {
    Ok(masked_forward_batch(params, &[orig], &[cache], mask)?
        .row(0)
        .to_vec())
}

/// [`masked_forward`] over many tuples at once, `[batch, vocab]`.
pub fn masked_forward_batch<S: AsRef<[usize]>>(
    params: &ModelParams,
    origs: &[S],
    caches: &[&AlternateCache],
    mask: &Mask,
) -> Result<Tensor> {
    mask.validate(&params.config)?;
    let mut tape = Tape::<f32>::new();
    let pv = ParamVars::load(&mut tape, params, false);
    let w = tape.constant(Tensor::from_vec(mask.weights.clone()));
    let logits = masked_final_logits(&mut tape, &pv, &params.config, origs, caches, w)?;
    Ok(tape.value(logits).clone())
}

pub fn binary_forward(
    params: &ModelParams,
    orig: &[usize],
    cache: &AlternateCache,
    binary: &BinaryMask,
) -> Result<Vec<f32>> {
    masked_forward(params, orig, cache, &binary.to_mask(&params.config))
}

// ---- mask files ---------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskEntry {
    pub layer: usize,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<usize>,
    pub weight: f32,
}

/// On-disk form shared by continuous and binary masks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskFile {
    pub config_hash: String,
    pub seed: u64,
    pub threshold: f32,
    #[serde(default)]
    pub positions: PatchPositions,
    pub entries: Vec<MaskEntry>,
}

impl MaskFile {
    pub fn from_mask(mask: &Mask, config_hash: &str, seed: u64, threshold: f32) -> Self {
        let entries = mask
            .components
            .iter()
            .zip(&mask.weights)
            .map(|(c, &weight)| MaskEntry {
                layer: c.layer,
                kind: c.kind_name().to_string(),
                head: c.head_index(),
                weight,
            })
            .collect();
        Self {
            config_hash: config_hash.to_string(),
            seed,
            threshold,
            positions: mask.positions.clone(),
            entries,
        }
    }

    pub fn from_binary(
        binary: &BinaryMask,
        config: &ModelConfig,
        config_hash: &str,
        seed: u64,
        threshold: f32,
    ) -> Self {
        Self::from_mask(&binary.to_mask(config), config_hash, seed, threshold)
    }

    pub fn to_mask(&self, config: &ModelConfig) -> Result<Mask> {
        let mut mask = Mask::ones(config);
        mask.positions = self.positions.clone();
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            let kind = match (e.kind.as_str(), e.head) {
                ("head", Some(h)) => ComponentKind::Head(h),
                ("mlp", None) => ComponentKind::Mlp,
                _ => {
                    return Err(Error::Config(format!(
                        "bad mask entry kind {:?} head {:?}",
                        e.kind, e.head
                    )))
                }
            };
            let id = ComponentId {
                layer: e.layer,
                kind,
            };
            let idx = config.component_index(id)?;
            if !seen.insert(idx) {
                return Err(Error::Config(format!("mask lists {id} twice")));
            }
            mask.weights[idx] = e.weight;
        }
        if seen.len() != mask.components.len() {
            return Err(Error::Config(format!(
                "mask lists {} of {} components",
                seen.len(),
                mask.components.len()
            )));
        }
        mask.validate(config)?;
        Ok(mask)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_mlp: 8,
            vocab_size: 10,
            max_seq_len: 8,
            seed: 0,
        }
    }

    #[test]
    fn rounding_rules() {
        let c = config();
        assert!(round_mask(&Mask::ones(&c), 0.5).is_empty());

        let mut m = Mask::ones(&c);
        m.weights[0] = 0.1;
        m.weights[1] = 0.9;
        let b = round_mask(&m, 0.5);
        assert_eq!(b.patched, BTreeSet::from([ComponentId::head(0, 0)]));

        m.weights[0] = 0.5;
        assert!(round_mask(&m, 0.5).is_empty());
    }

    #[test]
    fn positions_resolve() {
        assert_eq!(PatchPositions::FinalToken.resolve(5).unwrap(), vec![4]);
        assert_eq!(
            PatchPositions::Explicit(vec![3, 1, 3]).resolve(5).unwrap(),
            vec![1, 3]
        );
        assert!(PatchPositions::Explicit(vec![5]).resolve(5).is_err());
    }

    #[test]
    fn mask_file_round_trip() {
        let c = config();
        let mut m = Mask::ones(&c);
        m.weights[2] = 0.25;
        let f = MaskFile::from_mask(&m, "abc", 7, 0.5);
        assert_eq!(f.entries[2].kind, "mlp");
        assert_eq!(f.entries[2].head, None);
        let back = f.to_mask(&c).unwrap();
        assert_eq!(back, m);

        let mut missing = f.clone();
        missing.entries.pop();
        assert!(missing.to_mask(&c).is_err());
    }

    #[test]
    fn mask_validation() {
        let c = config();
        let mut m = Mask::ones(&c);
        assert!(m.validate(&c).is_ok());
        m.weights[0] = 1.5;
        assert!(m.validate(&c).is_err());
        m.clamp(0.0, 1.0);
        assert!(m.validate(&c).is_ok());
    }
}
