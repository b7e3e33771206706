//! Hard-zeroing of masked `W2` entries in a checkpoint, and its audit.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, PruneRecord};
use crate::error::{Error, Result};
use crate::mask::ConceptMaskBundle;
use crate::scoring::short;

fn check_compatible(ckpt: &Checkpoint, bundle: &ConceptMaskBundle) -> Result<()> {
    bundle.validate()?;
    if bundle.layers != ckpt.layer_catalog() {
        return Err(Error::Compatibility(format!(
            "mask {:?} was built for a different layer catalog",
            bundle.concept
        )));
    }
    if let Some(src) = bundle
        .provenance
        .iter()
        .find(|s| s.model_fingerprint != ckpt.fingerprint)
    {
        return Err(Error::Compatibility(format!(
            "mask {:?} derives from model {}, checkpoint is {}",
            src.concept,
            short(&src.model_fingerprint),
            short(&ckpt.fingerprint)
        )));
    }
    Ok(())
}

/// Zeros `W2` wherever the bundle has a bit set and appends a provenance
/// record. `invert` only labels the record: an unskilled bundle is applied
/// exactly like a skilled one. Re-applying a bundle already recorded in the
/// checkpoint logs a warning and leaves the provenance unchanged.
pub fn apply(ckpt: &Checkpoint, bundle: &ConceptMaskBundle, invert: bool) -> Result<Checkpoint> {
    check_compatible(ckpt, bundle)?;
    let mut out = ckpt.clone();
    for (block, mask) in out.model.blocks.iter_mut().zip(&bundle.masks) {
        for i in 0..mask.rows() {
            let row = block.w2.row_mut(i);
            for (j, w) in row.iter_mut().enumerate() {
                if mask.get(i, j) {
                    *w = 0.0;
                }
            }
        }
    }
    let mask_fingerprint = bundle.fingerprint()?;
    if ckpt
        .provenance
        .iter()
        .any(|r| r.mask_fingerprint == mask_fingerprint)
    {
        warn!(
            "mask {} ({:?}) was already applied to this checkpoint",
            short(&mask_fingerprint),
            bundle.concept
        );
    } else {
        out.provenance.push(PruneRecord {
            concept: bundle.concept.clone(),
            k_percent: bundle.k_percent,
            t_hat: bundle.t_hat,
            mask_fingerprint,
            inverted: invert,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCheck {
    pub layer: String,
    pub masked: usize,
    pub total: usize,
    /// Share of `W2` entries zeroed by the mask; equals the mask density.
    pub zeroed_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub concept: String,
    pub layers: Vec<LayerCheck>,
}

/// Confirms that `pruned` equals `original` except for zeros at the bundle's
/// mask positions. The first discrepancy is reported with its location.
pub fn verify(
    pruned: &Checkpoint,
    original: &Checkpoint,
    bundle: &ConceptMaskBundle,
) -> Result<VerifyReport> {
    check_compatible(original, bundle)?;
    if pruned.fingerprint != original.fingerprint {
        return Err(Error::Compatibility(format!(
            "pruned checkpoint descends from {}, original is {}",
            short(&pruned.fingerprint),
            short(&original.fingerprint)
        )));
    }
    if pruned.model.config != original.model.config {
        return Err(Error::Compatibility("model configurations differ".into()));
    }
    let w2_names: Vec<String> = original
        .model
        .layer_names()
        .iter()
        .map(|l| format!("{l}.w2"))
        .collect();
    for ((name, a), (_, b)) in pruned
        .model
        .named_params()
        .into_iter()
        .zip(original.model.named_params())
    {
        if w2_names.contains(&name) {
            continue;
        }
        if let Some(idx) = a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .position(|(x, y)| x.to_bits() != y.to_bits())
        {
            return Err(Error::Verification {
                layer: name,
                row: idx / a.cols(),
                col: idx % a.cols(),
                message: "parameter outside W2 changed".into(),
            });
        }
    }

    let mut layers = Vec::with_capacity(bundle.masks.len());
    for (l, mask) in bundle.masks.iter().enumerate() {
        let (p, o) = (&pruned.model.blocks[l].w2, &original.model.blocks[l].w2);
        for i in 0..mask.rows() {
            for j in 0..mask.cols() {
                let (pv, ov) = (p.get(i, j), o.get(i, j));
                let message = if mask.get(i, j) {
                    (pv != 0.0).then(|| format!("masked weight is {pv}, expected 0"))
                } else {
                    (pv.to_bits() != ov.to_bits())
                        .then(|| format!("unmasked weight is {pv}, original {ov}"))
                };
                if let Some(message) = message {
                    return Err(Error::Verification {
                        layer: mask.layer_name.clone(),
                        row: i,
                        col: j,
                        message,
                    });
                }
            }
        }
        layers.push(LayerCheck {
            layer: mask.layer_name.clone(),
            masked: mask.count_ones(),
            total: mask.rows() * mask.cols(),
            zeroed_fraction: mask.density(),
        });
    }
    Ok(VerifyReport {
        concept: bundle.concept.clone(),
        layers,
    })
}
