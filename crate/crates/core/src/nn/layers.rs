//! Channels-last building blocks. Activations are `(batch, height, width,
//! channels)` throughout.

use candle_core::{Tensor, D};

use super::ops::{Geometry, Im2Col};
use super::params::{Init, ParamStore};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Conv2d {
    // (out, kernel * kernel * in), columns ordered (ky, kx, channel)
    weight: Tensor,
    bias: Tensor,
    geo: Geometry,
    out_channels: usize,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let fan_in = (kernel * kernel * in_channels) as f64;
        Self::with_init(
            ps,
            name,
            in_channels,
            out_channels,
            kernel,
            stride,
            Init::Normal(1.0 / fan_in.sqrt()),
        )
    }

    /// A convolution whose weights and bias start at exactly zero.
    pub fn zeroed(
        ps: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) -> Result<Self> {
        Self::with_init(ps, name, in_channels, out_channels, kernel, 1, Init::Zeros)
    }

    fn with_init(
        ps: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        init: Init,
    ) -> Result<Self> {
        let weight = ps.add(
            &format!("{name}.weight"),
            &[out_channels, kernel * kernel * in_channels],
            init,
        )?;
        let bias = ps.add(&format!("{name}.bias"), &[out_channels], Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            geo: Geometry {
                kernel,
                stride,
                pad: kernel / 2,
            },
            out_channels,
        })
    }

    pub fn param_count(in_channels: usize, out_channels: usize, kernel: usize) -> usize {
        out_channels * (kernel * kernel * in_channels + 1)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let (ho, wo) = (self.geo.out_size(h), self.geo.out_size(w));
        let cols = if self.geo.kernel == 1 && self.geo.stride == 1 {
            x.reshape((b * h * w, c))?
        } else {
            x.contiguous()?
                .apply_op1(Im2Col(self.geo))?
                .reshape((b * ho * wo, self.geo.kernel * self.geo.kernel * c))?
        };
        let y = cols.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?;
        Ok(y.reshape((b, ho, wo, self.out_channels))?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, inputs: usize, outputs: usize) -> Result<Self> {
        let weight = ps.add(
            &format!("{name}.weight"),
            &[outputs, inputs],
            Init::Normal(1.0 / (inputs as f64).sqrt()),
        )?;
        let bias = ps.add(&format!("{name}.bias"), &[outputs], Init::Zeros)?;
        Ok(Self { weight, bias })
    }

    pub fn param_count(inputs: usize, outputs: usize) -> usize {
        outputs * (inputs + 1)
    }

    /// Applies to the last axis of any-rank input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let inputs = *dims.last().unwrap();
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x
            .reshape((rows, inputs))?
            .matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)?;
        let mut out = dims;
        *out.last_mut().unwrap() = self.weight.dim(0)?;
        Ok(y.reshape(out)?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        let groups = largest_divisor_at_most(channels, groups);
        let gamma = ps.add(&format!("{name}.gamma"), &[channels], Init::Ones)?;
        let beta = ps.add(&format!("{name}.beta"), &[channels], Init::Zeros)?;
        Ok(Self {
            gamma,
            beta,
            groups,
            eps: 1e-5,
        })
    }

    pub fn param_count(channels: usize) -> usize {
        2 * channels
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let g = self.groups;
        let xg = x.reshape((b, h * w, g, c / g))?;
        let mean = xg.mean_keepdim(3)?.mean_keepdim(1)?;
        let centered = xg.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(3)?.mean_keepdim(1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .reshape((b, h, w, c))?
            .broadcast_mul(&self.gamma)?
            .broadcast_add(&self.beta)?)
    }
}

/// Normalization over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.add(&format!("{name}.gamma"), &[dim], Init::Ones)?,
            beta: ps.add(&format!("{name}.beta"), &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        Ok(centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.gamma)?
            .broadcast_add(&self.beta)?)
    }
}

pub(crate) fn largest_divisor_at_most(n: usize, cap: usize) -> usize {
    (1..=cap.min(n).max(1)).rev().find(|d| n % d == 0).unwrap_or(1)
}

pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok((x
        .reshape((b, h / 2, 2, w / 2, 2, c))?
        .sum(4)?
        .sum(2)?
        * 0.25)?)
}

pub fn max_pool2(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x.reshape((b, h / 2, 2, w / 2, 2, c))?.max(4)?.max(2)?)
}

pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x
        .reshape((b, h, 1, w, 1, c))?
        .broadcast_as((b, h, 2, w, 2, c))?
        .reshape((b, 2 * h, 2 * w, c))?)
}

/// Single-head scaled dot-product attention from `queries` (B, N, Cq) to
/// `context` (B, L, Cc), projected back to Cq.
#[derive(Debug, Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    dim: usize,
}

impl Attention {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        query_dim: usize,
        context_dim: usize,
        dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::new(ps, &format!("{name}.q"), query_dim, dim)?,
            k: Linear::new(ps, &format!("{name}.k"), context_dim, dim)?,
            v: Linear::new(ps, &format!("{name}.v"), context_dim, dim)?,
            out: Linear::new(ps, &format!("{name}.out"), dim, query_dim)?,
            dim,
        })
    }

    pub fn param_count(query_dim: usize, context_dim: usize, dim: usize) -> usize {
        Linear::param_count(query_dim, dim)
            + 2 * Linear::param_count(context_dim, dim)
            + Linear::param_count(dim, query_dim)
    }

    pub fn forward(&self, queries: &Tensor, context: &Tensor) -> Result<Tensor> {
        let q = self.q.forward(queries)?;
        let k = self.k.forward(context)?;
        let v = self.v.forward(context)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (self.dim as f64).sqrt())?;
        let weights = softmax_last(&scores)?;
        self.out.forward(&weights.matmul(&v)?)
    }
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?;
    let e = x.broadcast_sub(&max.detach())?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?)
}

/// Sinusoidal step embedding, `(batch, dim)` with sines then cosines.
pub fn timestep_embedding(
    steps: &[usize],
    dim: usize,
    dtype: candle_core::DType,
    device: &candle_core::Device,
) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        let mut row = vec![0f64; dim];
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            row[i] = arg.sin();
            row[half + i] = arg.cos();
        }
        data.extend(row);
    }
    Ok(Tensor::from_vec(data, (steps.len(), dim), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn nhwc(values: Vec<f64>, shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_vec(values, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut ps = ParamStore::new(DType::F64, 5);
        let conv = Conv2d::new(&mut ps, "c", 2, 3, 3, 1).unwrap();
        let x: Vec<f64> = (0..2 * 4 * 5 * 2).map(|i| ((i * 7) % 11) as f64 * 0.1).collect();
        let xt = nhwc(x.clone(), (2, 4, 5, 2));
        let y = conv.forward(&xt).unwrap();
        assert_eq!(y.dims(), &[2, 4, 5, 3]);
        let w = ps.get("c.weight").unwrap().to_vec2::<f64>().unwrap();
        let y = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for b in 0..2 {
            for oy in 0..4i64 {
                for ox in 0..5i64 {
                    for o in 0..3 {
                        let mut acc = 0.0;
                        for ky in 0..3i64 {
                            for kx in 0..3i64 {
                                let (yy, xx) = (oy + ky - 1, ox + kx - 1);
                                if !(0..4).contains(&yy) || !(0..5).contains(&xx) {
                                    continue;
                                }
                                for c in 0..2 {
                                    let xi = ((b * 4 + yy as usize) * 5 + xx as usize) * 2 + c;
                                    let wi = ((ky * 3 + kx) as usize) * 2 + c;
                                    acc += x[xi] * w[o][wi];
                                }
                            }
                        }
                        let yi = ((b * 4 + oy as usize) * 5 + ox as usize) * 3 + o;
                        assert!((y[yi] - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn strided_conv_halves_resolution() {
        let mut ps = ParamStore::new(DType::F32, 1);
        let conv = Conv2d::new(&mut ps, "c", 1, 4, 3, 2).unwrap();
        let x = Tensor::zeros((1, 8, 8, 1), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(conv.forward(&x).unwrap().dims(), &[1, 4, 4, 4]);
    }

    #[test]
    fn pooling_and_upsampling_shapes() {
        let x = nhwc((0..32).map(f64::from).collect(), (1, 4, 4, 2));
        let p = avg_pool2(&x).unwrap();
        assert_eq!(p.dims(), &[1, 2, 2, 2]);
        // top-left 2x2 block of channel 0: values 0, 2, 8, 10
        let v = p.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(v[0], 5.0);
        let m = max_pool2(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(m[0], 10.0);
        let u = upsample2(&p).unwrap();
        assert_eq!(u.dims(), &[1, 4, 4, 2]);
        let u = u.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(&u[0..4], &[5.0, v[1], 5.0, v[1]]);
    }

    #[test]
    fn group_norm_normalizes() {
        let mut ps = ParamStore::new(DType::F64, 1);
        let gn = GroupNorm::new(&mut ps, "gn", 4, 2).unwrap();
        let x = nhwc((0..64).map(|i| (i as f64 * 0.3).sin() * 3.0 + 1.0).collect(), (1, 4, 4, 4));
        let y = gn.forward(&x).unwrap();
        let y = y.reshape((16, 2, 2)).unwrap();
        let mean = y.mean(2).unwrap().mean(0).unwrap().to_vec1::<f64>().unwrap();
        for m in mean {
            assert!(m.abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::from_vec(vec![1.0f64, 2.0, 3.0, -1.0, 0.0, 1000.0], (2, 3), &Device::Cpu)
            .unwrap();
        let s = softmax_last(&x).unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        for v in s {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }
}
