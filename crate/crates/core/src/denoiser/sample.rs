use ndarray::Array2;

use super::model::{DualBranchDenoiser, GenerationCondition};
use crate::diffusion::{ancestral_sample_batch, NoiseSchedule};
use crate::error::{Error, Result};
use crate::imageio::quantize_grid;
use crate::rng::seeded;

/// Generates one 8-bit-quantized sample per condition, the `k`-th seeded by
/// `seeds[k]`. Conditions are processed `batch_size` at a time; every chunk
/// must share one prompt length.
pub fn generate(
    model: &DualBranchDenoiser,
    schedule: &NoiseSchedule,
    conditions: &[GenerationCondition],
    seeds: &[u64],
    batch_size: usize,
) -> Result<Vec<Array2<f64>>> {
    if conditions.len() != seeds.len() {
        return Err(Error::Argument(format!(
            "{} seeds for {} conditions",
            seeds.len(),
            conditions.len()
        )));
    }
    if batch_size == 0 {
        return Err(Error::Argument("batch size must be positive".into()));
    }
    let mut out = Vec::with_capacity(conditions.len());
    for (conds, seeds) in conditions.chunks(batch_size).zip(seeds.chunks(batch_size)) {
        let shape = conds[0].edge.dim();
        let refs: Vec<&GenerationCondition> = conds.iter().collect();
        let mut rngs: Vec<_> = seeds.iter().map(|&s| seeded(s)).collect();
        let images = ancestral_sample_batch(model, &refs, schedule, shape, &mut rngs)?;
        out.extend(images.iter().map(quantize_grid));
    }
    Ok(out)
}
