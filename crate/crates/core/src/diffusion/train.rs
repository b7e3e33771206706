use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::diffusion::data::{Condition, Style, ToyDataset};
use crate::diffusion::model::{ModelConfig, ToyDenoiser};
use crate::diffusion::schedule::noise_point;
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Rng};

/// Parameter update applied after each batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// `w -= lr · g`.
    Plain,
    /// `w -= lr · g / rms(g)` with the RMS taken over each tensor, so every
    /// tensor moves by the same RMS step regardless of its gradient scale.
    #[default]
    TensorNormalized,
}

impl UpdateRule {
    pub fn name(self) -> &'static str {
        match self {
            UpdateRule::Plain => "plain",
            UpdateRule::TensorNormalized => "tensor_normalized",
        }
    }
}

impl std::str::FromStr for UpdateRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(UpdateRule::Plain),
            "tensor_normalized" => Ok(UpdateRule::TensorNormalized),
            _ => Err(Error::Parameter(format!(
                "update rule must be plain or tensor_normalized, got {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub update_rule: UpdateRule,
    pub seed: u64,
    pub validation_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 256,
            learning_rate: 1e-3,
            update_rule: UpdateRule::TensorNormalized,
            seed: 0,
            validation_size: 4096,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_validation_mse: f64,
    pub final_validation_mse: f64,
    pub final_train_loss: f64,
    pub steps: usize,
}

impl TrainReport {
    /// Relative decrease of the validation loss, in `[−∞, 1]`.
    pub fn improvement(&self) -> f64 {
        1.0 - self.final_validation_mse / self.initial_validation_mse
    }
}

/// Noised training tuples `(x_t, condition, t, ε)`.
pub(crate) struct NoisedBatch {
    pub x: Matrix,
    pub conds: Vec<Condition>,
    pub timesteps: Vec<usize>,
    pub eps: Matrix,
}

pub(crate) fn draw_batch(
    model: &ToyDenoiser,
    dataset: &ToyDataset,
    n: usize,
    rng: &mut Rng,
) -> Result<NoisedBatch> {
    let n_styles = model.config.n_styles.min(Style::ALL.len());
    let mut x = Matrix::zeros(n, 2);
    let mut eps = Matrix::zeros(n, 2);
    let mut conds = Vec::with_capacity(n);
    let mut timesteps = Vec::with_capacity(n);
    for i in 0..n {
        let cond = Condition::new(
            rng.below(dataset.n_objects()),
            Style::from_id(rng.below(n_styles))?,
        );
        let x0 = dataset.sample(cond, rng)?;
        let t = rng.below(model.timesteps());
        let e = [rng.normal(), rng.normal()];
        let xt = noise_point(x0, model.schedule().alpha_bar()[t], e);
        x.row_mut(i).copy_from_slice(&xt);
        eps.row_mut(i).copy_from_slice(&e);
        conds.push(cond);
        timesteps.push(t);
    }
    Ok(NoisedBatch {
        x,
        conds,
        timesteps,
        eps,
    })
}

/// Mean squared ε-prediction error and its gradient with respect to ε̂.
pub(crate) fn mse_and_grad(pred: &Matrix, target: &Matrix) -> (f64, Matrix) {
    let n = pred.as_slice().len() as f64;
    let mut loss = 0f64;
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    for ((g, p), t) in grad
        .as_mut_slice()
        .iter_mut()
        .zip(pred.as_slice())
        .zip(target.as_slice())
    {
        let diff = f64::from(*p) - f64::from(*t);
        loss += diff * diff;
        *g = (2.0 * diff / n) as f32;
    }
    (loss / n, grad)
}

pub(crate) fn batch_loss(model: &ToyDenoiser, batch: &NoisedBatch) -> Result<f64> {
    let (pred, _) = model.forward_train(&batch.x, &batch.conds, &batch.timesteps)?;
    Ok(mse_and_grad(&pred, &batch.eps).0)
}

/// Trains a fresh denoiser by stochastic gradient descent. Stream 0 of `config.seed` drives
/// the batches, stream 1 the validation set and stream 2 the initial weights.
/// `data_std` and `sample_clip` of `model_config` are taken from the dataset.
pub fn train(
    dataset: &ToyDataset,
    model_config: ModelConfig,
    config: &TrainConfig,
) -> Result<(ToyDenoiser, TrainReport)> {
    dataset.validate()?;
    let model_config = ModelConfig {
        data_std: dataset.coordinate_std(),
        sample_clip: dataset.clip_bound(),
        ..model_config
    };
    if model_config.n_objects != dataset.n_objects() {
        return Err(Error::Parameter(format!(
            "model has {} objects, dataset {}",
            model_config.n_objects,
            dataset.n_objects()
        )));
    }
    if config.batch_size == 0 || config.validation_size == 0 {
        return Err(Error::Parameter("batch and validation sizes must be positive".into()));
    }
    if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
        return Err(Error::Parameter(format!(
            "learning rate {} must be positive",
            config.learning_rate
        )));
    }

    let mut model = ToyDenoiser::init(model_config, &mut Rng::with_stream(config.seed, 2))?;
    let validation = draw_batch(
        &model,
        dataset,
        config.validation_size,
        &mut Rng::with_stream(config.seed, 1),
    )?;
    let initial = batch_loss(&model, &validation)?;
    info!("initial validation mse {initial:.5}");

    let mut rng = Rng::with_stream(config.seed, 0);
    let mut last = f64::NAN;
    let mut running = 0.0;
    for step in 0..config.steps {
        let batch = draw_batch(&model, dataset, config.batch_size, &mut rng)?;
        let (pred, cache) = model.forward_train(&batch.x, &batch.conds, &batch.timesteps)?;
        let (loss, d_pred) = mse_and_grad(&pred, &batch.eps);
        if !loss.is_finite() {
            return Err(Error::Training { step, loss });
        }
        let grads = model.backward(&cache, &d_pred);
        sgd_update(&mut model, &grads, config.learning_rate, config.update_rule);
        last = loss;
        running = if step == 0 { loss } else { 0.99 * running + 0.01 * loss };
        if (step + 1) % 1000 == 0 {
            debug!("step {} loss {running:.5}", step + 1);
        }
    }
    if model.named_params().iter().any(|(_, m)| !m.is_finite()) {
        return Err(Error::Training {
            step: config.steps,
            loss: last,
        });
    }

    let final_mse = batch_loss(&model, &validation)?;
    info!("final validation mse {final_mse:.5}");
    Ok((
        model,
        TrainReport {
            initial_validation_mse: initial,
            final_validation_mse: final_mse,
            final_train_loss: last,
            steps: config.steps,
        },
    ))
}

fn sgd_update(model: &mut ToyDenoiser, grads: &ToyDenoiser, lr: f32, rule: UpdateRule) {
    let grads = grads.named_params();
    for (p, (_, g)) in model.params_mut().into_iter().zip(grads) {
        let g = g.as_slice();
        let step = match rule {
            UpdateRule::Plain => lr,
            UpdateRule::TensorNormalized => {
                let ms = g.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() / g.len() as f64;
                if ms == 0.0 {
                    continue;
                }
                (f64::from(lr) / ms.sqrt()) as f32
            }
        };
        for (w, dw) in p.as_mut_slice().iter_mut().zip(g) {
            *w -= step * dw;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (ToyDataset, ModelConfig) {
        let ds = ToyDataset::default();
        let cfg = ModelConfig {
            d_model: 8,
            d_hidden: 16,
            n_blocks: 2,
            n_objects: ds.n_objects(),
            n_styles: 3,
            timesteps: 10,
            data_std: 1.0,
            sample_clip: 10.0,
        };
        (ds, cfg)
    }

    /// Loss of `model` on `batch` with one parameter entry overwritten.
    fn perturbed_loss(model: &ToyDenoiser, batch: &NoisedBatch, p: usize, i: usize, v: f32) -> f64 {
        let mut m = model.clone();
        m.params_mut()[p].as_mut_slice()[i] = v;
        batch_loss(&m, batch).unwrap()
    }

    #[test]
    fn gradients_match_central_differences() {
        let (ds, cfg) = tiny();
        let model = ToyDenoiser::init(cfg, &mut Rng::new(11)).unwrap();
        let batch = draw_batch(&model, &ds, 64, &mut Rng::new(12)).unwrap();
        let (pred, cache) = model
            .forward_train(&batch.x, &batch.conds, &batch.timesteps)
            .unwrap();
        let (_, d_pred) = mse_and_grad(&pred, &batch.eps);
        let grads = model.backward(&cache, &d_pred);
        let grads = grads.named_params();

        // Probe set: the largest-gradient entry of ten distinct tensors, so
        // each part of the backward pass is exercised.
        let names = [
            "input.weight",
            "embed.object",
            "embed.style",
            "embed.time",
            "blocks.0.ffn.w1_value",
            "blocks.0.ffn.w1_gate",
            "blocks.0.ffn.w2",
            "blocks.1.ffn.b1_gate",
            "blocks.1.ffn.w2",
            "output.weight",
        ];
        let h = 1e-2f32;
        for name in names {
            let p = grads.iter().position(|(n, _)| n == name).unwrap();
            let g = grads[p].1.as_slice();
            let (i, &analytic) = g
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .unwrap();
            let w = model.named_params()[p].1.as_slice()[i];
            let central = |h: f32| {
                let up = perturbed_loss(&model, &batch, p, i, w + h);
                let down = perturbed_loss(&model, &batch, p, i, w - h);
                (up - down) / (2.0 * f64::from(h))
            };
            // Richardson step removes the O(h²) term of the central difference.
            let numeric = (4.0 * central(h / 2.0) - central(h)) / 3.0;
            let rel = (numeric - f64::from(analytic)).abs() / numeric.abs().max(1e-6);
            assert!(rel < 1e-3, "{name}[{i}]: analytic {analytic} numeric {numeric} rel {rel}");
        }
    }

    #[test]
    fn training_is_deterministic_and_descends() {
        let (ds, cfg) = tiny();
        let tc = TrainConfig {
            steps: 200,
            batch_size: 32,
            learning_rate: 0.05,
            update_rule: UpdateRule::Plain,
            seed: 9,
            validation_size: 256,
        };
        let (a, ra) = train(&ds, cfg, &tc).unwrap();
        let (b, rb) = train(&ds, cfg, &tc).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert!(ra.final_validation_mse < ra.initial_validation_mse, "{ra:?}");
    }

    #[test]
    fn divergence_is_reported() {
        let (ds, cfg) = tiny();
        let tc = TrainConfig {
            steps: 200,
            batch_size: 32,
            learning_rate: 1e6,
            update_rule: UpdateRule::Plain,
            seed: 9,
            validation_size: 64,
        };
        assert!(matches!(train(&ds, cfg, &tc), Err(Error::Training { .. }) | Err(Error::Numeric { .. })));
    }

    #[test]
    fn mse_gradient() {
        let p = Matrix::from_rows(&[[1.0f32, 2.0]]).unwrap();
        let t = Matrix::from_rows(&[[0.0f32, 0.0]]).unwrap();
        let (l, g) = mse_and_grad(&p, &t);
        assert_eq!(l, 2.5);
        assert_eq!(g.as_slice(), &[1.0, 2.0]);
    }
}
