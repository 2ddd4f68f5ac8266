//! Patch extraction for NHWC convolutions. Convolution becomes
//! `im2col(x) @ W^T`, so both forward and backward run through the matrix
//! multiply kernels; the input gradient is folded back with [`Col2Im`].

use candle_core::{bail, CpuStorage, CustomOp1, Layout, Result, Shape, Tensor};

#[derive(Debug, Clone, Copy)]
pub(crate) struct Geometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Geometry {
    pub fn out_size(&self, size: usize) -> usize {
        (size + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

pub(crate) struct Im2Col(pub Geometry);

struct Col2Im {
    geo: Geometry,
    h: usize,
    w: usize,
    c: usize,
}

trait Elem: Copy + Default + std::ops::AddAssign {}
impl Elem for f32 {}
impl Elem for f64 {}

fn gather<T: Elem>(src: &[T], dims: (usize, usize, usize, usize), geo: Geometry) -> Vec<T> {
    let (b, h, w, c) = dims;
    let (ho, wo) = (geo.out_size(h), geo.out_size(w));
    let k = geo.kernel;
    let row_len = k * k * c;
    let mut out = vec![T::default(); b * ho * wo * row_len];
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = &mut out[((bi * ho + oy) * wo + ox) * row_len..][..row_len];
                for ky in 0..k {
                    let y = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let x = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        let s = ((bi * h + y as usize) * w + x as usize) * c;
                        let d = (ky * k + kx) * c;
                        row[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
    }
    out
}

fn scatter<T: Elem>(cols: &[T], b: usize, op: &Col2Im) -> Vec<T> {
    let Col2Im { geo, h, w, c } = *op;
    let (ho, wo) = (geo.out_size(h), geo.out_size(w));
    let k = geo.kernel;
    let row_len = k * k * c;
    let mut out = vec![T::default(); b * h * w * c];
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = &cols[((bi * ho + oy) * wo + ox) * row_len..][..row_len];
                for ky in 0..k {
                    let y = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let x = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        let d = ((bi * h + y as usize) * w + x as usize) * c;
                        let s = (ky * k + kx) * c;
                        for (o, v) in out[d..d + c].iter_mut().zip(&row[s..s + c]) {
                            *o += *v;
                        }
                    }
                }
            }
        }
    }
    out
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col-nhwc"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        if !layout.is_contiguous() {
            bail!("im2col expects a contiguous input");
        }
        let dims = layout.shape().dims4()?;
        let (b, h, w, c) = dims;
        let geo = self.0;
        if h + 2 * geo.pad < geo.kernel || w + 2 * geo.pad < geo.kernel {
            bail!("input {h}x{w} smaller than kernel {}", geo.kernel);
        }
        let shape = Shape::from((b, geo.out_size(h), geo.out_size(w), geo.kernel * geo.kernel * c));
        let off = layout.start_offset();
        let n = layout.shape().elem_count();
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(gather(&v[off..off + n], dims, geo)),
            CpuStorage::F64(v) => CpuStorage::F64(gather(&v[off..off + n], dims, geo)),
            _ => bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        let (_, h, w, c) = arg.dims4()?;
        let op = Col2Im {
            geo: self.0,
            h,
            w,
            c,
        };
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&op)?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im-nhwc"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        if !layout.is_contiguous() {
            bail!("col2im expects a contiguous input");
        }
        let (b, _, _, _) = layout.shape().dims4()?;
        let off = layout.start_offset();
        let n = layout.shape().elem_count();
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(scatter(&v[off..off + n], b, self)),
            CpuStorage::F64(v) => CpuStorage::F64(scatter(&v[off..off + n], b, self)),
            _ => bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, Shape::from((b, self.h, self.w, self.c))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for any x, y
        let dev = Device::Cpu;
        let geo = Geometry {
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let x = Tensor::arange(0f64, 2.0 * 5.0 * 6.0 * 3.0, &dev)
            .unwrap()
            .reshape((2, 5, 6, 3))
            .unwrap();
        let x = (x * 0.37).unwrap().sin().unwrap();
        let cols = x.apply_op1_no_bwd(&Im2Col(geo)).unwrap();
        let y = (cols.ones_like().unwrap() * 0.5).unwrap().cos().unwrap();
        let y = (y + cols.clone()).unwrap().sin().unwrap();
        let lhs = (cols * &y).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        let back = y
            .apply_op1_no_bwd(&Col2Im {
                geo,
                h: 5,
                w: 6,
                c: 3,
            })
            .unwrap();
        let rhs = (x * back).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn gradient_flows_through_im2col() {
        let dev = Device::Cpu;
        let x = Var::ones((1, 3, 3, 1), candle_core::DType::F64, &dev).unwrap();
        let geo = Geometry {
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let cols = x.as_tensor().apply_op1(Im2Col(geo)).unwrap();
        let g = cols.sum_all().unwrap().backward().unwrap();
        let gx = g.get(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        // each input pixel appears once per output window that covers it
        assert_eq!(gx, vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }
}
