use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::nn::{
    grids_to_tensor, max_pool2, tensor_to_grids, upsample2, Attention, Conv2d, GroupNorm, LayerNorm, Linear,
    ParamStore,
};

pub const SEGMENTATION_KIND: &str = "segmentation";
pub const MAX_PARAMETERS: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    BasicUnet,
    ResidualUnet,
    AttentionUnet,
    ResnetEncoderUnet,
    WindowedTransformerUnet,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 5] = [
        BackboneKind::BasicUnet,
        BackboneKind::ResidualUnet,
        BackboneKind::AttentionUnet,
        BackboneKind::ResnetEncoderUnet,
        BackboneKind::WindowedTransformerUnet,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            BackboneKind::BasicUnet => "basic-unet",
            BackboneKind::ResidualUnet => "residual-unet",
            BackboneKind::AttentionUnet => "attention-unet",
            BackboneKind::ResnetEncoderUnet => "resnet-encoder-unet",
            BackboneKind::WindowedTransformerUnet => "windowed-transformer-unet",
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BackboneKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown backbone {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegBackboneSpec {
    pub kind: BackboneKind,
    /// Channels at full resolution; doubled at every level.
    pub width: usize,
    /// Number of 2x down-sampling steps.
    pub depth: usize,
    /// Side of the attention windows of the transformer backbone.
    pub window: usize,
}

impl Default for SegBackboneSpec {
    fn default() -> Self {
        Self {
            kind: BackboneKind::AttentionUnet,
            width: 16,
            depth: 3,
            window: 4,
        }
    }
}

impl SegBackboneSpec {
    pub fn with_kind(kind: BackboneKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 || self.window == 0 {
            return Err(Error::InvalidConfig("backbone width, depth and window must be positive".into()));
        }
        Ok(())
    }

    fn ch(&self, level: usize) -> usize {
        self.width << level
    }

    /// Input sides must be multiples of this.
    pub fn min_side(&self) -> usize {
        1 << self.depth
    }
}

const GROUPS: usize = 8;

#[derive(Debug, Clone)]
struct ConvNorm {
    conv: Conv2d,
    norm: GroupNorm,
}

impl ConvNorm {
    fn new(ps: &mut ParamStore, name: &str, i: usize, o: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(ps, &format!("{name}.conv"), i, o, 3, stride)?,
            norm: GroupNorm::new(ps, &format!("{name}.norm"), o, GROUPS)?,
        })
    }

    /// Convolution and normalization without the activation.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.norm.forward(&self.conv.forward(x)?)
    }
}

/// Two conv-norm-relu layers, or their residual variant.
#[derive(Debug, Clone)]
struct Block {
    a: ConvNorm,
    b: ConvNorm,
    skip: Option<Conv2d>,
    residual: bool,
}

impl Block {
    fn new(ps: &mut ParamStore, name: &str, i: usize, o: usize, stride: usize, residual: bool) -> Result<Self> {
        let skip = if residual && (i != o || stride != 1) {
            Some(Conv2d::new(ps, &format!("{name}.skip"), i, o, 1, stride)?)
        } else {
            None
        };
        Ok(Self {
            a: ConvNorm::new(ps, &format!("{name}.a"), i, o, stride)?,
            b: ConvNorm::new(ps, &format!("{name}.b"), o, o, 1)?,
            skip,
            residual,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.a.forward(x)?.relu()?;
        let h = self.b.forward(&h)?;
        if !self.residual {
            return Ok(h.relu()?);
        }
        let s = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((h + s)?.relu()?)
    }
}

/// Additive attention gate on a skip connection.
#[derive(Debug, Clone)]
struct Gate {
    wx: Conv2d,
    wg: Conv2d,
    psi: Conv2d,
}

impl Gate {
    fn new(ps: &mut ParamStore, name: &str, skip: usize, gating: usize) -> Result<Self> {
        let inter = (skip / 2).max(1);
        Ok(Self {
            wx: Conv2d::new(ps, &format!("{name}.wx"), skip, inter, 1, 1)?,
            wg: Conv2d::new(ps, &format!("{name}.wg"), gating, inter, 1, 1)?,
            psi: Conv2d::new(ps, &format!("{name}.psi"), inter, 1, 1, 1)?,
        })
    }

    fn forward(&self, skip: &Tensor, gating: &Tensor) -> Result<Tensor> {
        let a = (self.wx.forward(skip)? + self.wg.forward(gating)?)?.relu()?;
        let alpha = candle_nn::ops::sigmoid(&self.psi.forward(&a)?)?;
        Ok(skip.broadcast_mul(&alpha)?)
    }
}

/// Self-attention inside non-overlapping windows followed by an MLP.
#[derive(Debug, Clone)]
struct WindowBlock {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    window: usize,
}

impl WindowBlock {
    fn new(ps: &mut ParamStore, name: &str, c: usize, window: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), c)?,
            attn: Attention::new(ps, &format!("{name}.attn"), c, c, c)?,
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), c)?,
            fc1: Linear::new(ps, &format!("{name}.fc1"), c, 2 * c)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), 2 * c, c)?,
            window,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let ws = self.window.min(h).min(w);
        if h % ws != 0 || w % ws != 0 {
            return Err(Error::Argument(format!("feature map {h}x{w} does not tile into {ws}x{ws} windows")));
        }
        let (nh, nw) = (h / ws, w / ws);
        let tokens = x
            .reshape((b, nh, ws, nw, ws, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b * nh * nw, ws * ws, c))?;
        let n = self.norm1.forward(&tokens)?;
        let t = (&tokens + self.attn.forward(&n, &n)?)?;
        let m = self.fc2.forward(&self.fc1.forward(&self.norm2.forward(&t)?)?.gelu()?)?;
        let t = (t + m)?;
        Ok(t.reshape((b, nh, nw, ws, ws, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b, h, w, c))?)
    }
}

/// Per-pixel foreground model: an encoder-decoder over one-channel input.
pub struct SegModel {
    spec: SegBackboneSpec,
    params: ParamStore,
    stem: Option<Block>,
    encoder: Vec<Block>,
    bottleneck: Block,
    transformer: Vec<WindowBlock>,
    gates: Vec<Gate>,
    decoder: Vec<Block>,
    head: Conv2d,
}

impl SegModel {
    pub fn new(spec: &SegBackboneSpec, dtype: DType, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut ps = ParamStore::new(dtype, seed);
        let d = spec.depth;
        let kind = spec.kind;
        let residual = matches!(kind, BackboneKind::ResidualUnet);
        let mut stem = None;
        let mut encoder = Vec::with_capacity(d);
        match kind {
            BackboneKind::ResnetEncoderUnet => {
                // full-resolution stem, then strided residual stages
                stem = Some(Block::new(&mut ps, "stem", 1, spec.ch(0), 1, true)?);
                encoder.push(Block::new(&mut ps, "enc0", spec.ch(0), spec.ch(0), 1, true)?);
                for l in 1..d {
                    encoder.push(Block::new(&mut ps, &format!("enc{l}"), spec.ch(l - 1), spec.ch(l), 2, true)?);
                }
            }
            _ => {
                for l in 0..d {
                    let i = if l == 0 { 1 } else { spec.ch(l - 1) };
                    encoder.push(Block::new(&mut ps, &format!("enc{l}"), i, spec.ch(l), 1, residual)?);
                }
            }
        }
        let bottleneck_stride = if kind == BackboneKind::ResnetEncoderUnet { 2 } else { 1 };
        let bottleneck = Block::new(
            &mut ps,
            "bottleneck",
            spec.ch(d - 1),
            spec.ch(d),
            bottleneck_stride,
            residual || kind == BackboneKind::ResnetEncoderUnet,
        )?;
        let transformer = if kind == BackboneKind::WindowedTransformerUnet {
            (0..2)
                .map(|i| WindowBlock::new(&mut ps, &format!("transformer{i}"), spec.ch(d), spec.window))
                .collect::<Result<_>>()?
        } else {
            vec![]
        };
        let mut gates = Vec::new();
        let mut decoder = Vec::with_capacity(d);
        for l in (0..d).rev() {
            if kind == BackboneKind::AttentionUnet {
                gates.push(Gate::new(&mut ps, &format!("gate{l}"), spec.ch(l), spec.ch(l + 1))?);
            }
            decoder.push(Block::new(
                &mut ps,
                &format!("dec{l}"),
                spec.ch(l + 1) + spec.ch(l),
                spec.ch(l),
                1,
                residual,
            )?);
        }
        let head = Conv2d::new(&mut ps, "head", spec.ch(0), 1, 1, 1)?;
        let model = Self {
            spec: *spec,
            params: ps,
            stem,
            encoder,
            bottleneck,
            transformer,
            gates,
            decoder,
            head,
        };
        if model.params.parameter_count() > MAX_PARAMETERS {
            return Err(Error::InvalidConfig(format!(
                "{} has {} parameters, limit is {MAX_PARAMETERS}",
                spec.kind,
                model.params.parameter_count()
            )));
        }
        Ok(model)
    }

    pub fn spec(&self) -> &SegBackboneSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Foreground logits, `(B, H, W, 1)` for `(B, H, W, 1)` input.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let (_, h, w, _) = x.dims4()?;
        let m = self.spec.min_side();
        if h % m != 0 || w % m != 0 {
            return Err(Error::Argument(format!("input {h}x{w} must be divisible by {m}")));
        }
        let strided = self.spec.kind == BackboneKind::ResnetEncoderUnet;
        let mut hcur = match &self.stem {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        let mut skips = Vec::with_capacity(self.encoder.len());
        for (l, block) in self.encoder.iter().enumerate() {
            if l > 0 && !strided {
                hcur = max_pool2(&hcur)?;
            }
            hcur = block.forward(&hcur)?;
            skips.push(hcur.clone());
        }
        if !strided {
            hcur = max_pool2(&hcur)?;
        }
        hcur = self.bottleneck.forward(&hcur)?;
        for t in &self.transformer {
            hcur = t.forward(&hcur)?;
        }
        for (k, block) in self.decoder.iter().enumerate() {
            let l = self.encoder.len() - 1 - k;
            let up = upsample2(&hcur)?;
            let skip = match self.gates.get(k) {
                Some(g) => g.forward(&skips[l], &up)?,
                None => skips[l].clone(),
            };
            hcur = block.forward(&Tensor::cat(&[&up, &skip], 3)?)?;
        }
        self.head.forward(&hcur)
    }

    /// Foreground probabilities in `[0, 1]` for each image.
    pub fn probabilities(&self, images: &[&Array2<f64>]) -> Result<Vec<Array2<f64>>> {
        let x = grids_to_tensor(images, self.params.dtype(), self.params.device())?;
        let p = candle_nn::ops::sigmoid(&self.logits(&x)?.detach())?;
        tensor_to_grids(&p)
    }

    pub fn to_container(&self, meta: serde_json::Value) -> Result<Container> {
        Ok(Container {
            kind: SEGMENTATION_KIND.into(),
            meta: serde_json::json!({ "spec": self.spec, "extra": meta }),
            blocks: self.params.to_blocks()?,
        })
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        self.to_container(meta)?.write(path)
    }

    pub fn load(path: &Path, dtype: DType) -> Result<Self> {
        let c = Container::read(path)?;
        if c.kind != SEGMENTATION_KIND {
            return Err(Error::Checkpoint(format!("expected a {SEGMENTATION_KIND} checkpoint, found {}", c.kind)));
        }
        let spec: SegBackboneSpec = serde_json::from_value(c.meta["spec"].clone())?;
        let mut model = Self::new(&spec, dtype, 0)?;
        model.params.load_blocks(&c.blocks)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_backbone_maps_shape_and_fits_budget() {
        let img = Array2::from_shape_fn((32, 32), |(y, x)| ((x + y) % 7) as f64 / 7.0);
        for kind in BackboneKind::ALL {
            let m = SegModel::new(&SegBackboneSpec::with_kind(kind), DType::F32, 1).unwrap();
            assert!(m.params().parameter_count() <= MAX_PARAMETERS, "{kind}");
            let p = m.probabilities(&[&img, &img]).unwrap();
            assert_eq!(p.len(), 2);
            assert_eq!(p[0].dim(), (32, 32));
            assert!(p[0].iter().all(|v| (0.0..=1.0).contains(v)), "{kind}");
        }
    }

    #[test]
    fn kinds_parse() {
        for kind in BackboneKind::ALL {
            assert_eq!(kind.as_str().parse::<BackboneKind>().unwrap(), kind);
        }
        assert!(matches!("vit".parse::<BackboneKind>(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("seg.ckpt");
        let m = SegModel::new(&SegBackboneSpec::default(), DType::F32, 9).unwrap();
        m.save(&p, serde_json::json!({ "fold": 0 })).unwrap();
        let back = SegModel::load(&p, DType::F32).unwrap();
        assert_eq!(back.params().to_blocks().unwrap(), m.params().to_blocks().unwrap());
    }
}
