//! Skilled-neuron masks over `W2`.
//!
//! Per (layer, timestep) the target scores pick the top-k% entries of each
//! output row; an entry is skilled when its target score strictly exceeds its
//! reference score and unskilled when strictly below. Masks are OR-ed over the
//! `t̂` highest-noise timesteps and, across concepts, OR-ed again.
//!
//! `.cmask` layout: magic `CMASK001`, `u32` LE header length, JSON header,
//! then per layer a row-major bitset. Each row occupies `ceil(d'/8)` bytes,
//! bit `j` of a row lives in byte `j/8` at position `j%8` (LSB first), and
//! padding bits are zero.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, LayerInfo};
use crate::error::{Error, Result};
use crate::header;
use crate::par;
use crate::scoring::{score_one, ScoreMatrix};
use crate::stats::{NormStatsArchive, PromptSet};

pub const CMASK_MAGIC: &[u8; 8] = b"CMASK001";
pub const CMASK_VERSION: u32 = 1;
const KIND: &str = "cmask";

pub const DEFAULT_K_PERCENT: f64 = 2.0;
pub const DEFAULT_T_HAT: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    pub layer_name: String,
    rows: usize,
    cols: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(layer_name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            layer_name: layer_name.into(),
            rows,
            cols,
            bits: vec![0; rows * cols.div_ceil(8)],
        }
    }

    /// Builds a mask from row-major booleans.
    pub fn from_bools(layer_name: impl Into<String>, rows: usize, cols: usize, v: &[bool]) -> Result<Self> {
        if v.len() != rows * cols {
            return Err(Error::Shape(format!("{} flags for a {rows}×{cols} mask", v.len())));
        }
        let mut m = Self::zeros(layer_name, rows, cols);
        for (idx, _) in v.iter().enumerate().filter(|(_, b)| **b) {
            m.set(idx / cols, idx % cols, true);
        }
        Ok(m)
    }

    fn stride(&self) -> usize {
        self.cols.div_ceil(8)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        assert!(row < self.rows && col < self.cols, "mask index out of range");
        self.bits[row * self.stride() + col / 8] >> (col % 8) & 1 == 1
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        assert!(row < self.rows && col < self.cols, "mask index out of range");
        let idx = row * self.stride() + col / 8;
        let byte = &mut self.bits[idx];
        if value {
            *byte |= 1 << (col % 8);
        } else {
            *byte &= !(1 << (col % 8));
        }
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.rows)
            .flat_map(|i| (0..self.cols).map(move |j| (i, j)))
            .map(|(i, j)| self.get(i, j))
            .collect()
    }

    pub fn row_count_ones(&self, row: usize) -> usize {
        let s = self.stride();
        self.bits[row * s..(row + 1) * s]
            .iter()
            .map(|b| b.count_ones() as usize)
            .sum()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|b| b.count_ones() as usize).sum()
    }

    /// Set bits over total entries; 0 for an empty shape.
    pub fn density(&self) -> f64 {
        let n = self.rows * self.cols;
        if n == 0 {
            0.0
        } else {
            self.count_ones() as f64 / n as f64
        }
    }

    fn check_same_shape(&self, other: &BinaryMask) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "mask {} is {:?}, {} is {:?}",
                self.layer_name,
                self.shape(),
                other.layer_name,
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same_shape(other)?;
        let mut out = self.clone();
        for (a, b) in out.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
        Ok(out)
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same_shape(other)?;
        let mut out = self.clone();
        for (a, b) in out.bits.iter_mut().zip(&other.bits) {
            *a &= b;
        }
        Ok(out)
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.shape() == other.shape()
            && self.bits.iter().zip(&other.bits).all(|(a, b)| a & !b == 0)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bits
    }

    fn from_bytes(layer_name: &str, rows: usize, cols: usize, bytes: &[u8]) -> Result<Self> {
        let m = Self {
            layer_name: layer_name.to_string(),
            rows,
            cols,
            bits: bytes.to_vec(),
        };
        if !cols.is_multiple_of(8) {
            let pad_mask = !0u8 << (cols % 8);
            let s = m.stride();
            if (0..rows).any(|i| m.bits[i * s + s - 1] & pad_mask != 0) {
                return Err(Error::format(KIND, format!("{layer_name}: padding bits set")));
            }
        }
        Ok(m)
    }
}

/// Entries selected per row: `max(1, ⌊k·d'/100⌋)`.
pub fn selection_count(k_percent: f64, cols: usize) -> Result<usize> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::Parameter(format!("k_percent {k_percent} outside (0, 100]")));
    }
    let n = (k_percent * cols as f64 / 100.0).floor() as usize;
    Ok(n.clamp(1, cols.max(1)))
}

/// Per-row top-k% of `s`; ties go to the lower column index.
pub fn topk_indicator(s: &ScoreMatrix, k_percent: f64) -> Result<BinaryMask> {
    let (rows, cols) = s.values.shape();
    let n_k = selection_count(k_percent, cols)?;
    let mut mask = BinaryMask::zeros(s.layer_name.clone(), rows, cols);
    let mut order: Vec<usize> = Vec::with_capacity(cols);
    for i in 0..rows {
        let row = s.values.row(i);
        order.clear();
        order.extend(0..cols);
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
        for &j in &order[..n_k] {
            mask.set(i, j, true);
        }
    }
    Ok(mask)
}

fn check_pair(indicator: &BinaryMask, target: &ScoreMatrix, reference: &ScoreMatrix) -> Result<()> {
    if target.label != PromptSet::Target || reference.label != PromptSet::Reference {
        return Err(Error::Parameter(
            "expected target scores first and reference scores second".into(),
        ));
    }
    if target.layer_name != reference.layer_name || target.timestep != reference.timestep {
        return Err(Error::Parameter(format!(
            "scores for {}@{} and {}@{} do not belong together",
            target.layer_name, target.timestep, reference.layer_name, reference.timestep
        )));
    }
    if indicator.shape() != target.values.shape() || target.values.shape() != reference.values.shape() {
        return Err(Error::Parameter(format!(
            "shapes differ: indicator {:?}, target {:?}, reference {:?}",
            indicator.shape(),
            target.values.shape(),
            reference.values.shape()
        )));
    }
    Ok(())
}

fn gated(
    indicator: &BinaryMask,
    target: &ScoreMatrix,
    reference: &ScoreMatrix,
    keep: impl Fn(f32, f32) -> bool,
) -> Result<BinaryMask> {
    check_pair(indicator, target, reference)?;
    let mut out = BinaryMask::zeros(indicator.layer_name.clone(), indicator.rows, indicator.cols);
    for i in 0..indicator.rows {
        let (st, sr) = (target.values.row(i), reference.values.row(i));
        for j in 0..indicator.cols {
            if indicator.get(i, j) && keep(st[j], sr[j]) {
                out.set(i, j, true);
            }
        }
    }
    Ok(out)
}

/// Indicator entries whose target score strictly beats the reference score.
pub fn skilled(indicator: &BinaryMask, target: &ScoreMatrix, reference: &ScoreMatrix) -> Result<BinaryMask> {
    gated(indicator, target, reference, |t, r| t > r)
}

/// Indicator entries whose target score is strictly below the reference score.
pub fn unskilled(indicator: &BinaryMask, target: &ScoreMatrix, reference: &ScoreMatrix) -> Result<BinaryMask> {
    gated(indicator, target, reference, |t, r| t < r)
}

/// OR over per-timestep masks.
pub fn aggregate(masks: &[BinaryMask]) -> Result<BinaryMask> {
    let (first, rest) = masks
        .split_first()
        .ok_or_else(|| Error::Parameter("nothing to aggregate".into()))?;
    rest.iter().try_fold(first.clone(), |acc, m| acc.or(m))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Skilled,
    Unskilled,
}

/// Where one concept's masks came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSource {
    pub concept: String,
    pub kind: MaskKind,
    pub k_percent: f64,
    pub t_hat: usize,
    pub model_fingerprint: String,
    pub target_stats: String,
    pub reference_stats: String,
    /// Aggregated timesteps, in sampling order.
    pub timesteps: Vec<usize>,
    /// Layers that received masks; the rest are left empty.
    pub selected_layers: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptMaskBundle {
    pub concept: String,
    pub k_percent: f64,
    pub t_hat: usize,
    pub layers: Vec<LayerInfo>,
    pub masks: Vec<BinaryMask>,
    pub provenance: Vec<MaskSource>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CmaskHeader {
    version: u32,
    concept: String,
    k_percent: f64,
    t_hat: usize,
    layers: Vec<LayerInfo>,
    provenance: Vec<MaskSource>,
}

/// Settings for [`build_bundle`].
#[derive(Clone, Debug, PartialEq)]
pub struct MaskParams {
    pub concept: String,
    pub k_percent: f64,
    pub t_hat: usize,
    pub kind: MaskKind,
    /// Restrict pruning to these layers; `None` selects every layer.
    pub layers: Option<Vec<String>>,
}

impl MaskParams {
    pub fn new(concept: impl Into<String>) -> Self {
        Self {
            concept: concept.into(),
            k_percent: DEFAULT_K_PERCENT,
            t_hat: DEFAULT_T_HAT,
            kind: MaskKind::Skilled,
            layers: None,
        }
    }
}

impl ConceptMaskBundle {
    pub fn mask(&self, layer: &str) -> Result<&BinaryMask> {
        self.masks
            .iter()
            .find(|m| m.layer_name == layer)
            .ok_or_else(|| Error::Compatibility(format!("bundle has no layer {layer:?}")))
    }

    /// `(layer, density)` in catalog order.
    pub fn densities(&self) -> Vec<(String, f64)> {
        self.masks.iter().map(|m| (m.layer_name.clone(), m.density())).collect()
    }

    /// Largest density any single-concept source may reach: `t̂·n_k/d'`,
    /// summed over sources for a union, capped at 1.
    pub fn density_bound(&self, layer: &LayerInfo) -> Result<f64> {
        let mut bound = 0.0;
        for src in &self.provenance {
            let n_k = selection_count(src.k_percent, layer.d_hidden)?;
            bound += src.t_hat as f64 * n_k as f64 / layer.d_hidden as f64;
        }
        Ok(bound.min(1.0))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k_percent > 0.0 && self.k_percent <= 100.0) {
            return Err(Error::Parameter(format!("k_percent {} outside (0, 100]", self.k_percent)));
        }
        if self.t_hat == 0 {
            return Err(Error::Parameter("t_hat must be at least 1".into()));
        }
        if self.masks.len() != self.layers.len() {
            return Err(Error::State(format!(
                "{} masks for {} layers",
                self.masks.len(),
                self.layers.len()
            )));
        }
        for (m, l) in self.masks.iter().zip(&self.layers) {
            if m.layer_name != l.name || m.shape() != (l.d, l.d_hidden) {
                return Err(Error::State(format!(
                    "mask {} {:?} does not fit layer {} ({}, {})",
                    m.layer_name,
                    m.shape(),
                    l.name,
                    l.d,
                    l.d_hidden
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 of the serialized bundle.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(header::sha256_hex(&self.to_bytes()?))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let head = CmaskHeader {
            version: CMASK_VERSION,
            concept: self.concept.clone(),
            k_percent: self.k_percent,
            t_hat: self.t_hat,
            layers: self.layers.clone(),
            provenance: self.provenance.clone(),
        };
        let payload: Vec<u8> = self.masks.iter().flat_map(|m| m.bits.iter().copied()).collect();
        header::encode(CMASK_MAGIC, &head, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (head, payload): (CmaskHeader, _) = header::decode(KIND, CMASK_MAGIC, bytes)?;
        if head.version != CMASK_VERSION {
            return Err(Error::format(KIND, format!("unsupported version {}", head.version)));
        }
        let expected: usize = head.layers.iter().map(|l| l.d * l.d_hidden.div_ceil(8)).sum();
        if payload.len() != expected {
            return Err(Error::format(
                KIND,
                format!("payload is {} bytes, header implies {expected}", payload.len()),
            ));
        }
        let mut masks = Vec::with_capacity(head.layers.len());
        let mut cursor = 0;
        for l in &head.layers {
            let len = l.d * l.d_hidden.div_ceil(8);
            masks.push(BinaryMask::from_bytes(
                &l.name,
                l.d,
                l.d_hidden,
                &payload[cursor..cursor + len],
            )?);
            cursor += len;
        }
        let bundle = Self {
            concept: head.concept,
            k_percent: head.k_percent,
            t_hat: head.t_hat,
            layers: head.layers,
            masks,
            provenance: head.provenance,
        };
        bundle
            .validate()
            .map_err(|e| Error::format(KIND, e.to_string()))?;
        Ok(bundle)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        header::write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&header::read_file(path.as_ref())?)
    }
}

/// Timesteps `T-1, …, T-t̂`.
pub fn earliest_timesteps(total: usize, t_hat: usize) -> Result<Vec<usize>> {
    if t_hat == 0 || t_hat > total {
        return Err(Error::Parameter(format!("t_hat {t_hat} outside [1, {total}]")));
    }
    Ok((total - t_hat..total).rev().collect())
}

/// Skilled (or unskilled) masks for one concept, aggregated over the `t̂`
/// highest-noise timesteps.
pub fn build_bundle(
    ckpt: &Checkpoint,
    target: &NormStatsArchive,
    reference: &NormStatsArchive,
    params: &MaskParams,
) -> Result<ConceptMaskBundle> {
    if target.label != PromptSet::Target || reference.label != PromptSet::Reference {
        return Err(Error::Parameter(
            "expected a target archive and a reference archive".into(),
        ));
    }
    if target.timesteps != reference.timesteps || target.n_tok != reference.n_tok {
        return Err(Error::Compatibility(
            "target and reference archives were recorded differently".into(),
        ));
    }
    selection_count(params.k_percent, 1)?;
    let timesteps = earliest_timesteps(ckpt.model.timesteps(), params.t_hat)?;
    let catalog = ckpt.layer_catalog();
    let selected: Vec<String> = match &params.layers {
        None => catalog.iter().map(|l| l.name.clone()).collect(),
        Some(names) => {
            let chosen: BTreeSet<&String> = names.iter().collect();
            if let Some(bad) = chosen.iter().find(|n| !catalog.iter().any(|l| &l.name == **n)) {
                return Err(Error::Parameter(format!("unknown layer {bad:?}")));
            }
            catalog
                .iter()
                .filter(|l| chosen.contains(&l.name))
                .map(|l| l.name.clone())
                .collect()
        }
    };

    let jobs: Vec<(&str, usize)> = selected
        .iter()
        .flat_map(|l| timesteps.iter().map(move |&t| (l.as_str(), t)))
        .collect();
    let per_step = par::try_map_indexed(jobs.len(), |i| {
        let (layer, t) = jobs[i];
        let st = score_one(ckpt, target, layer, t)?;
        let sr = score_one(ckpt, reference, layer, t)?;
        let ind = topk_indicator(&st, params.k_percent)?;
        match params.kind {
            MaskKind::Skilled => skilled(&ind, &st, &sr),
            MaskKind::Unskilled => unskilled(&ind, &st, &sr),
        }
    })?;

    let mut masks = Vec::with_capacity(catalog.len());
    for l in &catalog {
        match selected.iter().position(|s| s == &l.name) {
            Some(p) => {
                let steps = &per_step[p * timesteps.len()..(p + 1) * timesteps.len()];
                masks.push(aggregate(steps)?);
            }
            None => masks.push(BinaryMask::zeros(l.name.clone(), l.d, l.d_hidden)),
        }
    }
    let bundle = ConceptMaskBundle {
        concept: params.concept.clone(),
        k_percent: params.k_percent,
        t_hat: params.t_hat,
        layers: catalog,
        masks,
        provenance: vec![MaskSource {
            concept: params.concept.clone(),
            kind: params.kind,
            k_percent: params.k_percent,
            t_hat: params.t_hat,
            model_fingerprint: ckpt.fingerprint.clone(),
            target_stats: target.fingerprint()?,
            reference_stats: reference.fingerprint()?,
            timesteps,
            selected_layers: selected,
        }],
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Layer-wise OR of several bundles. The result is independent of input
/// order and of repeated inputs: concept names and sources are deduplicated
/// and sorted, `k` and `t̂` are the largest inputs.
pub fn union_concepts(bundles: &[ConceptMaskBundle]) -> Result<ConceptMaskBundle> {
    let (first, rest) = bundles
        .split_first()
        .ok_or_else(|| Error::Parameter("union needs at least one bundle".into()))?;
    first.validate()?;
    let mut out = first.clone();
    for b in rest {
        b.validate()?;
        if b.layers != out.layers {
            return Err(Error::Compatibility(format!(
                "bundles {:?} and {:?} cover different layer catalogs",
                out.concept, b.concept
            )));
        }
        for (acc, m) in out.masks.iter_mut().zip(&b.masks) {
            *acc = acc.or(m)?;
        }
        out.k_percent = out.k_percent.max(b.k_percent);
        out.t_hat = out.t_hat.max(b.t_hat);
        out.provenance.extend(b.provenance.iter().cloned());
    }
    let concepts: BTreeSet<&str> = bundles.iter().flat_map(|b| b.concept.split('+')).collect();
    out.concept = concepts.into_iter().collect::<Vec<_>>().join("+");
    let mut keyed: Vec<(String, MaskSource)> = out
        .provenance
        .drain(..)
        .map(|s| (serde_json::to_string(&s).expect("plain data serializes"), s))
        .collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0));
    keyed.dedup_by(|a, b| a.0 == b.0);
    out.provenance = keyed.into_iter().map(|(_, s)| s).collect();
    Ok(out)
}
