//! Calibration recording and `.nstats` archives.
//!
//! A recording pass rolls out every calibration pair under one side of the
//! pair and accumulates column sums of squares of each GEGLU hidden matrix,
//! per (layer, timestep), in `f64`. Norms are only taken at scoring time.
//!
//! `.nstats` layout: magic `NSTATS01`, `u32` LE header length, JSON header,
//! then for each layer (catalog order) and timestep (header order) `d'`
//! little-endian `f64` sums of squares followed by a `u64` row count.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, LayerInfo};
use crate::diffusion::{ActivationRecorder, Condition, Style};
use crate::error::{Error, Result};
use crate::header;
use crate::par;
use crate::tensor::{accumulate_column_sumsq, Matrix, Rng};

pub const NSTATS_MAGIC: &[u8; 8] = b"NSTATS01";
pub const NSTATS_VERSION: u32 = 1;
const KIND: &str = "nstats";

/// Which side of the calibration pairs a recording covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptSet {
    Target,
    Reference,
}

impl PromptSet {
    pub fn label(self) -> &'static str {
        match self {
            PromptSet::Target => "target",
            PromptSet::Reference => "reference",
        }
    }
}

impl std::str::FromStr for PromptSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(PromptSet::Target),
            "reference" => Ok(PromptSet::Reference),
            _ => Err(Error::Parameter(format!(
                "prompt set must be target or reference, got {s:?}"
            ))),
        }
    }
}

/// Target and reference conditions for one object, rolled out from the same
/// initial noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationPair {
    pub target: Condition,
    pub reference: Condition,
    pub shared_seed: u64,
}

impl CalibrationPair {
    /// The reference is always the plain rendering of the target's object.
    pub fn new(object_id: usize, target_style: Style, shared_seed: u64) -> Result<Self> {
        if target_style == Style::Plain {
            return Err(Error::Parameter("target style must not be plain".into()));
        }
        Ok(Self {
            target: Condition::new(object_id, target_style),
            reference: Condition::new(object_id, Style::Plain),
            shared_seed,
        })
    }

    pub fn condition(&self, which: PromptSet) -> Condition {
        match which {
            PromptSet::Target => self.target,
            PromptSet::Reference => self.reference,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.target.object_id != self.reference.object_id {
            return Err(Error::Parameter(format!(
                "pair mixes objects {} and {}",
                self.target.object_id, self.reference.object_id
            )));
        }
        if self.target.style == Style::Plain || self.reference.style != Style::Plain {
            return Err(Error::Parameter(
                "pair needs a styled target and a plain reference".into(),
            ));
        }
        Ok(())
    }

    /// Initial noise shared by both sides of the pair, `n_tok × 2`.
    pub fn initial_noise(&self, n_tok: usize) -> Matrix {
        let mut rng = Rng::new(self.shared_seed);
        Matrix::new(n_tok, 2, rng.normals(2 * n_tok)).expect("normal draws are finite")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub pairs: Vec<CalibrationPair>,
    pub n_tok: usize,
    /// Recorded timesteps, in sampling order.
    pub timesteps: Vec<usize>,
}

impl CalibrationSet {
    pub fn new(pairs: Vec<CalibrationPair>, n_tok: usize, timesteps: Vec<usize>) -> Result<Self> {
        let set = Self {
            pairs,
            n_tok,
            timesteps,
        };
        set.validate()?;
        Ok(set)
    }

    /// One pair per object with seeds `seed, seed+1, …`, recording every
    /// timestep from `T-1` down to 0.
    pub fn for_style(
        style: Style,
        n_objects: usize,
        timesteps: usize,
        n_tok: usize,
        seed: u64,
    ) -> Result<Self> {
        let pairs = (0..n_objects)
            .map(|o| CalibrationPair::new(o, style, seed.wrapping_add(o as u64)))
            .collect::<Result<_>>()?;
        Self::new(pairs, n_tok, (0..timesteps).rev().collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::Parameter("calibration set has no pairs".into()));
        }
        if self.n_tok == 0 {
            return Err(Error::Parameter("n_tok must be at least 1".into()));
        }
        if self.timesteps.is_empty() {
            return Err(Error::Parameter("no timesteps to record".into()));
        }
        let mut objects = BTreeSet::new();
        for p in &self.pairs {
            p.validate()?;
            if !objects.insert(p.target.object_id) {
                return Err(Error::Parameter(format!(
                    "object {} appears in two pairs",
                    p.target.object_id
                )));
            }
        }
        let unique: BTreeSet<_> = self.timesteps.iter().collect();
        if unique.len() != self.timesteps.len() {
            return Err(Error::Parameter("timesteps repeat".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub layer_name: String,
    pub timestep: usize,
    pub sumsq: Vec<f64>,
    pub row_count: u64,
    pub label: PromptSet,
}

impl NormStats {
    pub fn zeros(layer_name: impl Into<String>, timestep: usize, label: PromptSet, d_hidden: usize) -> Self {
        Self {
            layer_name: layer_name.into(),
            timestep,
            sumsq: vec![0.0; d_hidden],
            row_count: 0,
            label,
        }
    }

    pub fn accumulate(&mut self, hidden: &Matrix) -> Result<()> {
        if hidden.cols() != self.sumsq.len() {
            return Err(Error::Shape(format!(
                "{} expects {} hidden features, got {}",
                self.layer_name,
                self.sumsq.len(),
                hidden.cols()
            )));
        }
        if !hidden.is_finite() {
            return Err(Error::numeric(format!(
                "{} hidden activations at timestep {}",
                self.layer_name, self.timestep
            )));
        }
        accumulate_column_sumsq(hidden, &mut self.sumsq);
        self.row_count += hidden.rows() as u64;
        Ok(())
    }

    pub fn merge(&self, other: &NormStats) -> Result<NormStats> {
        if self.layer_name != other.layer_name
            || self.timestep != other.timestep
            || self.label != other.label
            || self.sumsq.len() != other.sumsq.len()
        {
            return Err(Error::Merge(format!(
                "cannot merge {}@{} ({}, {}) with {}@{} ({}, {})",
                self.layer_name,
                self.timestep,
                self.label.label(),
                self.sumsq.len(),
                other.layer_name,
                other.timestep,
                other.label.label(),
                other.sumsq.len()
            )));
        }
        Ok(NormStats {
            sumsq: self.sumsq.iter().zip(&other.sumsq).map(|(a, b)| a + b).collect(),
            row_count: self.row_count + other.row_count,
            ..self.clone()
        })
    }

    /// Column ℓ2 norms of the accumulated activations.
    pub fn norms(&self) -> Result<Vec<f32>> {
        if self.row_count == 0 {
            return Err(Error::State(format!(
                "{}@{} has no recorded rows",
                self.layer_name, self.timestep
            )));
        }
        Ok(self.sumsq.iter().map(|s| s.sqrt() as f32).collect())
    }
}

/// Accumulates hidden activations for a fixed (layer × timestep) grid.
/// Timesteps outside the grid are ignored.
pub struct StatsRecorder {
    layers: Vec<LayerInfo>,
    timesteps: Vec<usize>,
    slot: Vec<Option<usize>>,
    stats: Vec<NormStats>,
}

impl StatsRecorder {
    pub fn new(layers: &[LayerInfo], timesteps: &[usize], label: PromptSet) -> Self {
        let t_max = timesteps.iter().max().map_or(0, |t| t + 1);
        let mut slot = vec![None; t_max];
        for (i, &t) in timesteps.iter().enumerate() {
            slot[t] = Some(i);
        }
        let stats = layers
            .iter()
            .flat_map(|l| {
                timesteps
                    .iter()
                    .map(move |&t| NormStats::zeros(l.name.clone(), t, label, l.d_hidden))
            })
            .collect();
        Self {
            layers: layers.to_vec(),
            timesteps: timesteps.to_vec(),
            slot,
            stats,
        }
    }

    pub fn into_stats(self) -> Vec<NormStats> {
        self.stats
    }
}

impl ActivationRecorder for StatsRecorder {
    fn record(&mut self, block: usize, timestep: usize, hidden: &Matrix) -> Result<()> {
        if block >= self.layers.len() {
            return Err(Error::Shape(format!("block {block} is not in the layer catalog")));
        }
        let Some(&Some(i)) = self.slot.get(timestep) else {
            return Ok(());
        };
        self.stats[block * self.timesteps.len() + i].accumulate(hidden)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct NstatsHeader {
    version: u32,
    model_fingerprint: String,
    prompt_set_label: PromptSet,
    #[serde(rename = "M_prompts")]
    m_prompts: usize,
    n_tok: usize,
    layers: Vec<LayerInfo>,
    timesteps: Vec<usize>,
}

/// Complete (layer × timestep) grid of statistics for one prompt set.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStatsArchive {
    pub model_fingerprint: String,
    pub label: PromptSet,
    pub m_prompts: usize,
    pub n_tok: usize,
    pub layers: Vec<LayerInfo>,
    pub timesteps: Vec<usize>,
    /// Layer-major: `stats[l * timesteps.len() + i]`.
    pub stats: Vec<NormStats>,
}

impl NormStatsArchive {
    pub fn get(&self, layer: &str, timestep: usize) -> Result<&NormStats> {
        let l = self
            .layers
            .iter()
            .position(|x| x.name == layer)
            .ok_or_else(|| Error::Compatibility(format!("archive has no layer {layer:?}")))?;
        let i = self
            .timesteps
            .iter()
            .position(|&t| t == timestep)
            .ok_or_else(|| {
                Error::Compatibility(format!("archive has no timestep {timestep}"))
            })?;
        Ok(&self.stats[l * self.timesteps.len() + i])
    }

    /// Checks that the grid is complete and consistently keyed.
    pub fn validate(&self) -> Result<()> {
        if self.stats.len() != self.layers.len() * self.timesteps.len() {
            return Err(Error::State(format!(
                "{} stats for a {}×{} grid",
                self.stats.len(),
                self.layers.len(),
                self.timesteps.len()
            )));
        }
        let unique: BTreeSet<_> = self.timesteps.iter().collect();
        if unique.len() != self.timesteps.len() {
            return Err(Error::State("archive timesteps repeat".into()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            for (i, &t) in self.timesteps.iter().enumerate() {
                let s = &self.stats[l * self.timesteps.len() + i];
                if s.layer_name != layer.name
                    || s.timestep != t
                    || s.label != self.label
                    || s.sumsq.len() != layer.d_hidden
                {
                    return Err(Error::State(format!(
                        "grid entry ({}, {t}) holds {}@{}",
                        layer.name, s.layer_name, s.timestep
                    )));
                }
                if s.sumsq.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return Err(Error::State(format!(
                        "{}@{t} has a negative or non-finite sum of squares",
                        layer.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let head = NstatsHeader {
            version: NSTATS_VERSION,
            model_fingerprint: self.model_fingerprint.clone(),
            prompt_set_label: self.label,
            m_prompts: self.m_prompts,
            n_tok: self.n_tok,
            layers: self.layers.clone(),
            timesteps: self.timesteps.clone(),
        };
        let mut payload = Vec::new();
        for s in &self.stats {
            for v in &s.sumsq {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            payload.extend_from_slice(&s.row_count.to_le_bytes());
        }
        header::encode(NSTATS_MAGIC, &head, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (head, payload): (NstatsHeader, _) = header::decode(KIND, NSTATS_MAGIC, bytes)?;
        if head.version != NSTATS_VERSION {
            return Err(Error::format(KIND, format!("unsupported version {}", head.version)));
        }
        let expected: usize = head
            .layers
            .iter()
            .map(|l| (l.d_hidden + 1) * 8 * head.timesteps.len())
            .sum();
        if payload.len() != expected {
            return Err(Error::format(
                KIND,
                format!("payload is {} bytes, header implies {expected}", payload.len()),
            ));
        }
        let mut words = payload
            .chunks_exact(8)
            .map(|c| <[u8; 8]>::try_from(c).expect("chunks of eight"));
        let mut stats = Vec::with_capacity(head.layers.len() * head.timesteps.len());
        for layer in &head.layers {
            for &t in &head.timesteps {
                let sumsq = words
                    .by_ref()
                    .take(layer.d_hidden)
                    .map(f64::from_le_bytes)
                    .collect();
                let row_count = u64::from_le_bytes(words.next().expect("length checked"));
                stats.push(NormStats {
                    layer_name: layer.name.clone(),
                    timestep: t,
                    sumsq,
                    row_count,
                    label: head.prompt_set_label,
                });
            }
        }
        let archive = Self {
            model_fingerprint: head.model_fingerprint,
            label: head.prompt_set_label,
            m_prompts: head.m_prompts,
            n_tok: head.n_tok,
            layers: head.layers,
            timesteps: head.timesteps,
            stats,
        };
        archive
            .validate()
            .map_err(|e| Error::format(KIND, e.to_string()))?;
        Ok(archive)
    }

    /// SHA-256 of the serialized archive.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(header::sha256_hex(&self.to_bytes()?))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        header::write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&header::read_file(path.as_ref())?)
    }
}

/// Rolls out every pair under its `which` condition and accumulates the
/// hidden-activation statistics. Pairs run in parallel; their grids are
/// summed in pair order.
pub fn record(ckpt: &Checkpoint, calib: &CalibrationSet, which: PromptSet) -> Result<NormStatsArchive> {
    calib.validate()?;
    let model = &ckpt.model;
    if let Some(&t) = calib.timesteps.iter().find(|&&t| t >= model.timesteps()) {
        return Err(Error::Parameter(format!(
            "timestep {t} outside [0, {})",
            model.timesteps()
        )));
    }
    for p in &calib.pairs {
        let c = p.condition(which);
        if c.object_id >= model.config.n_objects || c.style_id() >= model.config.n_styles {
            return Err(Error::Parameter(format!("condition {c:?} unknown to the model")));
        }
    }
    let layers = ckpt.layer_catalog();
    let grids = par::try_map_indexed(calib.pairs.len(), |i| {
        let pair = &calib.pairs[i];
        let mut rec = StatsRecorder::new(&layers, &calib.timesteps, which);
        let conds = vec![pair.condition(which); calib.n_tok];
        model.rollout(pair.initial_noise(calib.n_tok), &conds, Some(&mut rec))?;
        Ok::<_, Error>(rec.into_stats())
    })?;
    let mut grids = grids.into_iter();
    let mut stats = grids.next().expect("at least one pair");
    for grid in grids {
        for (acc, s) in stats.iter_mut().zip(&grid) {
            *acc = acc.merge(s)?;
        }
    }
    let archive = NormStatsArchive {
        model_fingerprint: ckpt.fingerprint.clone(),
        label: which,
        m_prompts: calib.pairs.len(),
        n_tok: calib.n_tok,
        layers,
        timesteps: calib.timesteps.clone(),
        stats,
    };
    archive.validate()?;
    Ok(archive)
}
