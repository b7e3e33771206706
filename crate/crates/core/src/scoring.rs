//! Wanda importance of `W2` entries: `S[i,j] = |W2[i,j]| · ‖H[:,j]‖₂`.

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::par;
use crate::stats::{NormStatsArchive, PromptSet};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub layer_name: String,
    pub timestep: usize,
    pub values: Matrix,
    pub label: PromptSet,
}

/// Scores of one weight matrix against per-input-feature norms. Each entry is
/// the single product `|w| * n` in `f32`.
pub fn wanda_score(w2: &Matrix, feature_norms: &[f32]) -> Result<Matrix> {
    if feature_norms.len() != w2.cols() {
        return Err(Error::Shape(format!(
            "{} feature norms for a matrix with {} columns",
            feature_norms.len(),
            w2.cols()
        )));
    }
    if let Some(j) = feature_norms.iter().position(|n| !(*n >= 0.0 && n.is_finite())) {
        return Err(Error::Parameter(format!(
            "feature norm {j} is {}, must be finite and non-negative",
            feature_norms[j]
        )));
    }
    let mut out = Matrix::zeros(w2.rows(), w2.cols());
    for i in 0..w2.rows() {
        for ((s, w), n) in out.row_mut(i).iter_mut().zip(w2.row(i)).zip(feature_norms) {
            *s = w.abs() * n;
        }
    }
    if !out.is_finite() {
        return Err(Error::numeric("wanda score overflow"));
    }
    Ok(out)
}

fn check_lineage(ckpt: &Checkpoint, archive: &NormStatsArchive) -> Result<()> {
    if archive.model_fingerprint != ckpt.fingerprint {
        return Err(Error::Compatibility(format!(
            "statistics were recorded on model {}, checkpoint is {}",
            short(&archive.model_fingerprint),
            short(&ckpt.fingerprint)
        )));
    }
    if archive.layers != ckpt.layer_catalog() {
        return Err(Error::Compatibility(
            "layer catalog of statistics and checkpoint differ".into(),
        ));
    }
    archive.validate()
}

pub(crate) fn short(fingerprint: &str) -> &str {
    &fingerprint[..fingerprint.len().min(12)]
}

/// Score matrix for one (layer, timestep) of the archive.
pub fn score_one(
    ckpt: &Checkpoint,
    archive: &NormStatsArchive,
    layer: &str,
    timestep: usize,
) -> Result<ScoreMatrix> {
    check_lineage(ckpt, archive)?;
    let stats = archive.get(layer, timestep)?;
    Ok(ScoreMatrix {
        layer_name: layer.to_string(),
        timestep,
        values: wanda_score(ckpt.w2(layer)?, &stats.norms()?)?,
        label: archive.label,
    })
}

/// Every (layer, timestep) of the archive, layer-major in archive order.
pub fn score_all(ckpt: &Checkpoint, archive: &NormStatsArchive) -> Result<Vec<ScoreMatrix>> {
    check_lineage(ckpt, archive)?;
    par::try_map_indexed(archive.stats.len(), |i| {
        let stats = &archive.stats[i];
        Ok(ScoreMatrix {
            layer_name: stats.layer_name.clone(),
            timestep: stats.timestep,
            values: wanda_score(ckpt.w2(&stats.layer_name)?, &stats.norms()?)?,
            label: archive.label,
        })
    })
}
