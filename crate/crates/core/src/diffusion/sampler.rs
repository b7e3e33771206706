use crate::diffusion::data::Condition;
use crate::diffusion::model::ToyDenoiser;
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Matrix, Rng};

/// Trajectories rolled out together. Fixed, so chunk boundaries never depend
/// on the worker count.
pub const SAMPLE_CHUNK: usize = 256;

/// Initial noise of trajectory `index`: stream `index` of `seed`.
pub fn initial_noise(seed: u64, index: usize) -> [f32; 2] {
    let mut rng = Rng::with_stream(seed, index as u64);
    [rng.normal(), rng.normal()]
}

/// `n` independent DDIM rollouts under `cond`.
pub fn sample(model: &ToyDenoiser, cond: Condition, n: usize, seed: u64) -> Result<Vec<[f32; 2]>> {
    if n == 0 {
        return Err(Error::Parameter("sample needs n >= 1".into()));
    }
    let chunks = n.div_ceil(SAMPLE_CHUNK);
    let parts = par::try_map_indexed(chunks, |c| {
        let lo = c * SAMPLE_CHUNK;
        let hi = (lo + SAMPLE_CHUNK).min(n);
        let mut x = Matrix::zeros(hi - lo, 2);
        for (row, i) in (lo..hi).enumerate() {
            x.row_mut(row).copy_from_slice(&initial_noise(seed, i));
        }
        let conds = vec![cond; hi - lo];
        model.rollout(x, &conds, None)
    })?;
    Ok(parts
        .iter()
        .flat_map(|m| m.as_slice().chunks_exact(2).map(|p| [p[0], p[1]]))
        .collect())
}
