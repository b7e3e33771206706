//! Oracle scores for toy samples and original-versus-pruned reports.
//!
//! `ring_score` counts samples inside the annulus `|‖x − c‖ − r| < 0.3·r`.
//! For the default dataset, true plain samples score about 0.006 against the
//! ring radius and true ring or halo samples score 1.0 against their own
//! radius (see the calibration tests below).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, PruneRecord};
use crate::diffusion::{sample, Condition, Style};
use crate::error::{Error, Result};
use crate::header;
use crate::par;

/// Annulus half-width as a fraction of the radius.
pub const ANNULUS: f32 = 0.3;
pub const MIN_EVAL_SAMPLES: usize = 100;

pub fn ring_score(samples: &[[f32; 2]], center: [f32; 2], radius: f32) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Parameter("ring_score needs at least one sample".into()));
    }
    let hits = samples
        .iter()
        .filter(|p| {
            let d = (p[0] - center[0]).hypot(p[1] - center[1]);
            (d - radius).abs() < ANNULUS * radius
        })
        .count();
    Ok(hits as f64 / samples.len() as f64)
}

/// Distance between the sample mean and `center`.
pub fn center_error(samples: &[[f32; 2]], center: [f32; 2]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Parameter("center_error needs at least one sample".into()));
    }
    let n = samples.len() as f64;
    let (sx, sy) = samples
        .iter()
        .fold((0f64, 0f64), |(x, y), p| (x + f64::from(p[0]), y + f64::from(p[1])));
    Ok((sx / n - f64::from(center[0])).hypot(sy / n - f64::from(center[1])))
}

/// Radius a condition is scored against: its own circle, or `r_ring` for
/// plain conditions.
pub fn score_radius(ckpt: &Checkpoint, style: Style) -> f32 {
    ckpt.dataset
        .style_radius(style)
        .unwrap_or(ckpt.dataset.ring_radius)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub ring_score: f64,
    pub center_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub object_id: usize,
    pub style: Style,
    pub radius: f32,
    pub seed: u64,
    pub original: Scores,
    pub pruned: Scores,
    pub delta_ring_score: f64,
    pub delta_center_error: f64,
}

/// Means over the objects evaluated under one style.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleSummary {
    pub style: Style,
    pub conditions: usize,
    pub original: Scores,
    pub pruned: Scores,
    pub delta_ring_score: f64,
    pub delta_center_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDensity {
    pub layer: String,
    /// Share of `W2` entries that are zero in the pruned model but not in
    /// the original.
    pub density: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetadata {
    pub model_fingerprint: String,
    pub samples_per_condition: usize,
    pub seed: u64,
    pub pruning: Vec<PruneRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: EvalMetadata,
    pub conditions: Vec<ConditionResult>,
    pub summary: Vec<StyleSummary>,
    pub densities: Vec<LayerDensity>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    object_id: usize,
    style: &'a str,
    radius: f32,
    seed: u64,
    original_ring_score: f64,
    pruned_ring_score: f64,
    delta_ring_score: f64,
    original_center_error: f64,
    pruned_center_error: f64,
    delta_center_error: f64,
}

impl EvalReport {
    pub fn style(&self, style: Style) -> Result<&StyleSummary> {
        self.summary
            .iter()
            .find(|s| s.style == style)
            .ok_or_else(|| Error::Parameter(format!("report has no {} conditions", style.name())))
    }

    /// Pretty JSON with keys sorted at every level.
    pub fn to_json(&self) -> Result<String> {
        let value = serde_json::to_value(self)
            .map_err(|e| Error::State(format!("cannot serialize report: {e}")))?;
        serde_json::to_string_pretty(&value)
            .map_err(|e| Error::State(format!("cannot serialize report: {e}")))
    }

    /// One row per condition.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for c in &self.conditions {
            w.serialize(CsvRow {
                object_id: c.object_id,
                style: c.style.name(),
                radius: c.radius,
                seed: c.seed,
                original_ring_score: c.original.ring_score,
                pruned_ring_score: c.pruned.ring_score,
                delta_ring_score: c.delta_ring_score,
                original_center_error: c.original.center_error,
                pruned_center_error: c.pruned.center_error,
                delta_center_error: c.delta_center_error,
            })
            .map_err(|e| Error::State(format!("csv: {e}")))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::State(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        header::write_atomic(path.as_ref(), self.to_json()?.as_bytes())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        header::write_atomic(path.as_ref(), self.to_csv()?.as_bytes())
    }
}

/// Every (object, style) condition the model knows, objects outermost.
pub fn all_conditions(ckpt: &Checkpoint) -> Vec<Condition> {
    let styles = ckpt.model.config.n_styles.min(Style::ALL.len());
    (0..ckpt.model.config.n_objects)
        .flat_map(|o| Style::ALL[..styles].iter().map(move |&s| Condition::new(o, s)))
        .collect()
}

fn scores(ckpt: &Checkpoint, cond: Condition, n: usize, seed: u64) -> Result<Scores> {
    let pts = sample(&ckpt.model, cond, n, seed)?;
    let center = ckpt.dataset.center(cond.object_id)?;
    Ok(Scores {
        ring_score: ring_score(&pts, center, score_radius(ckpt, cond.style))?,
        center_error: center_error(&pts, center)?,
    })
}

/// Samples both models under each condition from the same seeds. Condition
/// `i` uses seed `seed + i`.
pub fn evaluate(
    original: &Checkpoint,
    pruned: &Checkpoint,
    conditions: &[Condition],
    n: usize,
    seed: u64,
) -> Result<EvalReport> {
    if n < MIN_EVAL_SAMPLES {
        return Err(Error::Parameter(format!(
            "evaluation needs at least {MIN_EVAL_SAMPLES} samples per condition, got {n}"
        )));
    }
    if conditions.is_empty() {
        return Err(Error::Parameter("no conditions to evaluate".into()));
    }
    if original.model.config != pruned.model.config || original.dataset != pruned.dataset {
        return Err(Error::Compatibility(
            "original and pruned models differ in configuration".into(),
        ));
    }
    let results = par::try_map_indexed(conditions.len(), |i| {
        let cond = conditions[i];
        let s = seed.wrapping_add(i as u64);
        let (o, p) = (scores(original, cond, n, s)?, scores(pruned, cond, n, s)?);
        Ok::<_, Error>(ConditionResult {
            object_id: cond.object_id,
            style: cond.style,
            radius: score_radius(original, cond.style),
            seed: s,
            original: o,
            pruned: p,
            delta_ring_score: p.ring_score - o.ring_score,
            delta_center_error: p.center_error - o.center_error,
        })
    })?;

    let mut summary = Vec::new();
    for style in Style::ALL {
        let rows: Vec<&ConditionResult> = results.iter().filter(|r| r.style == style).collect();
        if rows.is_empty() {
            continue;
        }
        let k = rows.len() as f64;
        let mean = |f: &dyn Fn(&ConditionResult) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / k;
        summary.push(StyleSummary {
            style,
            conditions: rows.len(),
            original: Scores {
                ring_score: mean(&|r| r.original.ring_score),
                center_error: mean(&|r| r.original.center_error),
            },
            pruned: Scores {
                ring_score: mean(&|r| r.pruned.ring_score),
                center_error: mean(&|r| r.pruned.center_error),
            },
            delta_ring_score: mean(&|r| r.delta_ring_score),
            delta_center_error: mean(&|r| r.delta_center_error),
        });
    }

    let densities = original
        .model
        .blocks
        .iter()
        .zip(&pruned.model.blocks)
        .zip(original.model.layer_names())
        .map(|((o, p), layer)| {
            let zeroed = o
                .w2
                .as_slice()
                .iter()
                .zip(p.w2.as_slice())
                .filter(|(a, b)| **a != 0.0 && **b == 0.0)
                .count();
            LayerDensity {
                layer,
                density: zeroed as f64 / o.w2.as_slice().len() as f64,
            }
        })
        .collect();

    Ok(EvalReport {
        metadata: EvalMetadata {
            model_fingerprint: original.fingerprint.clone(),
            samples_per_condition: n,
            seed,
            pruning: pruned.provenance.clone(),
        },
        conditions: results,
        summary,
        densities,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ToyDataset;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    #[test]
    fn ring_score_examples() {
        let c = [1.0f32, -2.0];
        let on: Vec<[f32; 2]> = (0..16)
            .map(|i| {
                let a = i as f32 * 0.4;
                [c[0] + 0.5 * a.cos(), c[1] + 0.5 * a.sin()]
            })
            .collect();
        assert_eq!(ring_score(&on, c, 0.5).unwrap(), 1.0);
        assert_eq!(ring_score(&[c; 16], c, 0.5).unwrap(), 0.0);
        let half: Vec<_> = on[..8].iter().copied().chain([c; 8]).collect();
        assert_eq!(ring_score(&half, c, 0.5).unwrap(), 0.5);
        assert!(ring_score(&[], c, 0.5).is_err());
    }

    #[test]
    fn center_error_examples() {
        let c = [2.0f32, 3.0];
        let sym = [[3.0f32, 3.0], [1.0, 3.0], [2.0, 4.0], [2.0, 2.0]];
        assert!(center_error(&sym, c).unwrap() < 1e-12);
        assert!((center_error(&[[3.0, 3.0]; 5], c).unwrap() - 1.0).abs() < 1e-12);
        assert!(center_error(&[], c).is_err());
    }

    proptest! {
        #[test]
        fn radial_projection_scores_one(
            pts in prop::collection::vec((-5.0f32..5.0, -5.0f32..5.0), 1..50),
            r in 0.1f32..3.0,
        ) {
            let c = [0.5f32, -0.5];
            let onto: Vec<[f32; 2]> = pts
                .iter()
                .map(|&(x, y)| {
                    let (dx, dy) = (x - c[0], y - c[1]);
                    let d = dx.hypot(dy);
                    if d < 1e-3 { [c[0] + r, c[1]] } else { [c[0] + dx / d * r, c[1] + dy / d * r] }
                })
                .collect();
            prop_assert_eq!(ring_score(&onto, c, r).unwrap(), 1.0);
            let raw: Vec<[f32; 2]> = pts.iter().map(|&(x, y)| [x, y]).collect();
            prop_assert_eq!(ring_score(&raw, c, r).unwrap(), ring_score(&raw, c, r).unwrap());
        }
    }

    /// Brute-force check of the oracle thresholds on the true distributions.
    #[test]
    fn oracle_separates_true_distributions() {
        let ds = ToyDataset::default();
        let mut rng = Rng::new(2024);
        let n = 20_000;
        for o in 0..ds.n_objects() {
            let c = ds.center(o).unwrap();
            let plain = ds.sample_many(Condition::new(o, Style::Plain), n, &mut rng).unwrap();
            for style in [Style::Ring, Style::Halo] {
                let r = ds.style_radius(style).unwrap();
                let own = ds.sample_many(Condition::new(o, style), n, &mut rng).unwrap();
                assert!(ring_score(&own, c, r).unwrap() > 0.95, "{style:?} object {o}");
                assert!(ring_score(&plain, c, r).unwrap() < 0.05, "plain vs {style:?} object {o}");
            }
            let ring = ds.sample_many(Condition::new(o, Style::Ring), n, &mut rng).unwrap();
            let halo_r = ds.style_radius(Style::Halo).unwrap();
            assert!(ring_score(&ring, c, halo_r).unwrap() < 0.05);
        }
    }

    #[test]
    fn center_error_clt_bound() {
        let ds = ToyDataset::default();
        let mut rng = Rng::new(77);
        for o in 0..ds.n_objects() {
            let pts = ds.sample_many(Condition::new(o, Style::Plain), 10_000, &mut rng).unwrap();
            let bound = 0.01 + 3.0 * f64::from(ds.plain_std) / 100.0;
            assert!(center_error(&pts, ds.center(o).unwrap()).unwrap() <= bound);
        }
    }

    #[test]
    fn self_comparison_has_zero_deltas() {
        let ckpt = crate::testutil::tiny_ckpt();
        let conds = [Condition::new(0, Style::Plain), Condition::new(3, Style::Ring)];
        let r = evaluate(ckpt, ckpt, &conds, 100, 5).unwrap();
        assert_eq!(r.conditions.len(), 2);
        for c in &r.conditions {
            assert_eq!(c.delta_ring_score, 0.0);
            assert_eq!(c.delta_center_error, 0.0);
            assert!((0.0..=1.0).contains(&c.original.ring_score));
        }
        assert!(r.densities.iter().all(|d| d.density == 0.0));
        assert_eq!(r, evaluate(ckpt, ckpt, &conds, 100, 5).unwrap());
        assert!(evaluate(ckpt, ckpt, &conds, 99, 5).is_err());
        assert!(evaluate(ckpt, ckpt, &[], 100, 5).is_err());
    }

    #[test]
    fn report_serializations_are_stable() {
        let ckpt = crate::testutil::tiny_ckpt();
        let mut pruned = ckpt.clone();
        pruned.model.blocks[0].w2.set(0, 0, 0.0);
        let r = evaluate(ckpt, &pruned, &[Condition::new(1, Style::Ring)], 100, 0).unwrap();
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        let keys: Vec<&String> = json.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["conditions", "densities", "metadata", "summary"]);
        let back: EvalReport = serde_json::from_value(json).unwrap();
        assert_eq!(back, r);
        assert_eq!(r.densities[0].density, 1.0 / (8.0 * 16.0));
        let csv = r.to_csv().unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "object_id,style,radius,seed,original_ring_score,pruned_ring_score,delta_ring_score,original_center_error,pruned_center_error,delta_center_error"
        );
        assert!(lines.next().unwrap().starts_with("1,ring,0.5,0,"));
    }

    #[test]
    fn all_conditions_enumerates_grid() {
        let ckpt = crate::testutil::tiny_ckpt();
        let conds = all_conditions(ckpt);
        assert_eq!(conds.len(), 24);
        assert_eq!(conds[4], Condition::new(1, Style::Ring));
    }
}
