//! Minimal channels-last network layers on top of candle tensors.

mod layers;
mod ops;
mod params;

pub use layers::{
    avg_pool2, max_pool2, softmax_last, timestep_embedding, upsample2, Attention, Conv2d,
    GroupNorm, LayerNorm, Linear,
};
pub use params::{Init, ParamBlock, ParamStore};

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;

use crate::error::{Error, Result};

/// Stacks equally shaped grids into a `(batch, h, w, 1)` tensor.
pub fn grids_to_tensor(grids: &[&Array2<f64>], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = grids
        .first()
        .ok_or_else(|| Error::Argument("empty batch".into()))?;
    let (h, w) = first.dim();
    let mut data = Vec::with_capacity(grids.len() * h * w);
    for g in grids {
        if g.dim() != (h, w) {
            return Err(Error::ShapeMismatch {
                expected: vec![h, w],
                got: g.shape().to_vec(),
            });
        }
        data.extend(g.iter().copied());
    }
    Ok(Tensor::from_vec(data, (grids.len(), h, w, 1), device)?.to_dtype(dtype)?)
}

/// Splits a `(batch, h, w, 1)` tensor back into grids.
pub fn tensor_to_grids(t: &Tensor) -> Result<Vec<Array2<f64>>> {
    let (b, h, w, c) = t.dims4()?;
    if c != 1 {
        return Err(Error::Argument(format!("expected one channel, got {c}")));
    }
    let flat = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok((0..b)
        .map(|i| Array2::from_shape_vec((h, w), flat[i * h * w..(i + 1) * h * w].to_vec()).unwrap())
        .collect())
}
