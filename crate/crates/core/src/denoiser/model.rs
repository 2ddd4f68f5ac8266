use candle_core::{DType, Tensor};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::conditioning::{EdgeMap, EmbeddingTable, TextEmbedding, Vocabulary};
use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::nn::{
    avg_pool2, grids_to_tensor, tensor_to_grids, timestep_embedding, upsample2, Attention,
    Conv2d, GroupNorm, Init, Linear, ParamStore,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    /// Width of the first level; level `l` has `base_channels << l`.
    pub base_channels: usize,
    /// Number of resolution levels.
    pub depth: usize,
    pub time_embed_dim: usize,
    pub text_embed_dim: usize,
    /// Edge-branch width at each level.
    pub edge_branch_channels: Vec<usize>,
    pub attention_at_bottleneck: bool,
    /// Channels of the output head before the cross-channel average.
    pub head_channels: usize,
    pub norm_groups: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            depth: 3,
            time_embed_dim: 64,
            text_embed_dim: 64,
            edge_branch_channels: vec![8, 16, 32],
            attention_at_bottleneck: true,
            head_channels: 3,
            norm_groups: 8,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.depth < 2 {
            return bad(format!("depth must be at least 2, got {}", self.depth));
        }
        if self.edge_branch_channels.len() != self.depth {
            return bad(format!(
                "{} edge-branch widths for {} levels",
                self.edge_branch_channels.len(),
                self.depth
            ));
        }
        let dims = [
            self.base_channels,
            self.time_embed_dim,
            self.text_embed_dim,
            self.head_channels,
            self.norm_groups,
        ];
        if dims.contains(&0) || self.edge_branch_channels.contains(&0) {
            return bad("all widths must be positive".into());
        }
        if self.time_embed_dim % 2 != 0 {
            return bad("time_embed_dim must be even".into());
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Smallest spatial side the network accepts: every level halves it.
    pub fn min_side(&self) -> usize {
        1 << (self.depth - 1)
    }

    /// Parameter count from the layer formulas alone, including the
    /// embedding table for a vocabulary of `vocab_len` tokens.
    pub fn parameter_count(&self, vocab_len: usize) -> usize {
        let conv = |i: usize, o: usize, k: usize| o * (k * k * i + 1);
        let lin = |i: usize, o: usize| o * (i + 1);
        let gn = |c: usize| 2 * c;
        let t = self.time_embed_dim;
        let res = |i: usize, o: usize| {
            gn(i) + conv(i, o, 3) + lin(t, o) + gn(o) + conv(o, o, 3)
                + if i != o { conv(i, o, 1) } else { 0 }
        };
        let d = self.depth;
        let w = |l: usize| self.width(l);
        let e = &self.edge_branch_channels;
        let mut n = vocab_len * self.text_embed_dim;
        n += 2 * lin(t, t);
        n += conv(1, w(0), 3) + conv(1, e[0], 3);
        for l in 0..d {
            let input = if l == 0 { w(0) } else { w(l - 1) };
            n += res(input, w(l));
            n += conv(if l == 0 { e[0] } else { e[l - 1] }, e[l], 3);
            n += conv(e[l], w(l), 1);
        }
        let wd = w(d - 1);
        n += 2 * res(wd, wd);
        if self.attention_at_bottleneck {
            n += gn(wd);
            n += lin(wd, wd) + 2 * lin(self.text_embed_dim, wd) + lin(wd, wd);
        }
        for l in 0..d {
            let below = if l == d - 1 { wd } else { w(l + 1) };
            n += res(below + w(l), w(l));
        }
        n += gn(w(0)) + conv(w(0), self.head_channels, 3);
        n
    }
}

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(
        ps: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        time_dim: usize,
        groups: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(ps, &format!("{name}.norm1"), inputs, groups)?,
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), inputs, outputs, 3, 1)?,
            time: Linear::new(ps, &format!("{name}.time"), time_dim, outputs)?,
            norm2: GroupNorm::new(ps, &format!("{name}.norm2"), outputs, groups)?,
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), outputs, outputs, 3, 1)?,
            skip: if inputs != outputs {
                Some(Conv2d::new(ps, &format!("{name}.skip"), inputs, outputs, 1, 1)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let (b, _, _, c) = h.dims4()?;
        let t = self.time.forward(&temb.silu()?)?.reshape((b, 1, 1, c))?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

/// The conditional noise predictor: a text-conditioned encoder-decoder (main
/// branch) plus an edge encoder (auxiliary branch) whose features enter the
/// main branch through zero-initialized 1x1 projections.
pub struct DualBranchDenoiser {
    config: DenoiserConfig,
    vocab: Vocabulary,
    steps: usize,
    params: ParamStore,
    embedding: Tensor,
    time_in: Linear,
    time_out: Linear,
    in_conv: Conv2d,
    edge_in: Conv2d,
    down: Vec<ResBlock>,
    edge_convs: Vec<Conv2d>,
    fusion: Vec<Conv2d>,
    mid1: ResBlock,
    attn_norm: Option<GroupNorm>,
    attn: Option<Attention>,
    mid2: ResBlock,
    up: Vec<ResBlock>,
    head_norm: GroupNorm,
    head: Conv2d,
}

/// Conditioning for one generated sample.
#[derive(Debug, Clone)]
pub struct GenerationCondition {
    pub text: TextEmbedding,
    pub edge: EdgeMap,
}

impl DualBranchDenoiser {
    /// Fresh model with parameters drawn from `seed`. `steps` is the chain
    /// length the model will be queried with.
    pub fn new(
        config: &DenoiserConfig,
        vocab: &Vocabulary,
        steps: usize,
        dtype: DType,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new(dtype, seed);
        let g = config.norm_groups;
        let t = config.time_embed_dim;
        let e = &config.edge_branch_channels;
        let d = config.depth;
        let embedding = ps.add(
            "embedding.table",
            &[vocab.len(), config.text_embed_dim],
            Init::Normal(1.0),
        )?;
        let time_in = Linear::new(&mut ps, "time.in", t, t)?;
        let time_out = Linear::new(&mut ps, "time.out", t, t)?;
        let in_conv = Conv2d::new(&mut ps, "main.in", 1, config.width(0), 3, 1)?;
        let edge_in = Conv2d::new(&mut ps, "edge.in", 1, e[0], 3, 1)?;
        let mut down = Vec::with_capacity(d);
        let mut edge_convs = Vec::with_capacity(d);
        let mut fusion = Vec::with_capacity(d);
        for l in 0..d {
            let input = if l == 0 { config.width(0) } else { config.width(l - 1) };
            down.push(ResBlock::new(&mut ps, &format!("main.down{l}"), input, config.width(l), t, g)?);
            let e_in = if l == 0 { e[0] } else { e[l - 1] };
            edge_convs.push(Conv2d::new(&mut ps, &format!("edge.level{l}"), e_in, e[l], 3, 1)?);
            fusion.push(Conv2d::zeroed(&mut ps, &format!("fusion.level{l}"), e[l], config.width(l), 1)?);
        }
        let wd = config.width(d - 1);
        let mid1 = ResBlock::new(&mut ps, "main.mid1", wd, wd, t, g)?;
        let (attn_norm, attn) = if config.attention_at_bottleneck {
            (
                Some(GroupNorm::new(&mut ps, "main.attn_norm", wd, g)?),
                Some(Attention::new(&mut ps, "main.attn", wd, config.text_embed_dim, wd)?),
            )
        } else {
            (None, None)
        };
        let mid2 = ResBlock::new(&mut ps, "main.mid2", wd, wd, t, g)?;
        let mut up = Vec::with_capacity(d);
        for l in 0..d {
            let below = if l == d - 1 { wd } else { config.width(l + 1) };
            up.push(ResBlock::new(
                &mut ps,
                &format!("main.up{l}"),
                below + config.width(l),
                config.width(l),
                t,
                g,
            )?);
        }
        let head_norm = GroupNorm::new(&mut ps, "head.norm", config.width(0), g)?;
        let head = Conv2d::new(&mut ps, "head.conv", config.width(0), config.head_channels, 3, 1)?;
        let model = Self {
            config: config.clone(),
            vocab: vocab.clone(),
            steps,
            params: ps,
            embedding,
            time_in,
            time_out,
            in_conv,
            edge_in,
            down,
            edge_convs,
            fusion,
            mid1,
            attn_norm,
            attn,
            mid2,
            up,
            head_norm,
            head,
        };
        if !model.embedding_table()?.rows_distinct() {
            return Err(Error::InvalidConfig(
                "embedding table initialized with duplicate rows".into(),
            ));
        }
        Ok(model)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// Parameters of the edge branch and its fusion projections.
    pub fn is_edge_param(name: &str) -> bool {
        name.starts_with("edge.") || name.starts_with("fusion.")
    }

    pub fn embedding_table(&self) -> Result<EmbeddingTable> {
        let rows = self.embedding.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let (n, d) = (rows.len(), self.config.text_embed_dim);
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        EmbeddingTable::new(self.vocab.clone(), Array2::from_shape_vec((n, d), flat).unwrap())
    }

    /// Differentiable lookup of `(batch, tokens)` ids into `(batch, tokens, dim)`.
    pub fn embed_ids(&self, ids: &[Vec<usize>]) -> Result<Tensor> {
        let len = ids.first().map(|v| v.len()).unwrap_or(0);
        if ids.iter().any(|v| v.len() != len) {
            return Err(Error::Argument("prompts in a batch must have equal length".into()));
        }
        let flat: Vec<u32> = ids.iter().flatten().map(|&i| i as u32).collect();
        let idx = Tensor::from_vec(flat, ids.len() * len, self.params.device())?;
        Ok(self
            .embedding
            .index_select(&idx, 0)?
            .reshape((ids.len(), len, self.config.text_embed_dim))?)
    }

    /// Batched forward pass. `xt` and `edge` are `(B, H, W, 1)`, `text` is
    /// `(B, L, text_embed_dim)`; returns `(B, H, W, 1)`.
    pub fn forward_tensors(
        &self,
        xt: &Tensor,
        steps: &[usize],
        text: &Tensor,
        edge: &Tensor,
    ) -> Result<Tensor> {
        let (b, h, w, _) = xt.dims4()?;
        if edge.dims() != xt.dims() {
            return Err(Error::ShapeMismatch {
                expected: xt.dims().to_vec(),
                got: edge.dims().to_vec(),
            });
        }
        let min = self.config.min_side();
        if h % min != 0 || w % min != 0 {
            return Err(Error::Argument(format!(
                "spatial size {h}x{w} must be divisible by {min}"
            )));
        }
        if steps.len() != b {
            return Err(Error::Argument(format!("{} steps for batch {b}", steps.len())));
        }
        if let Some(t) = steps.iter().find(|&&t| t == 0 || t > self.steps) {
            return Err(Error::Argument(format!("step {t} outside [1, {}]", self.steps)));
        }
        let temb = timestep_embedding(steps, self.config.time_embed_dim, self.dtype(), self.params.device())?;
        let temb = self.time_out.forward(&self.time_in.forward(&temb)?.silu()?)?;

        let mut hcur = self.in_conv.forward(xt)?;
        let mut ecur = self.edge_in.forward(edge)?.silu()?;
        let mut skips = Vec::with_capacity(self.config.depth);
        for l in 0..self.config.depth {
            if l > 0 {
                hcur = avg_pool2(&hcur)?;
                ecur = avg_pool2(&ecur)?;
            }
            hcur = self.down[l].forward(&hcur, &temb)?;
            ecur = self.edge_convs[l].forward(&ecur)?.silu()?;
            hcur = (hcur + self.fusion[l].forward(&ecur)?)?;
            skips.push(hcur.clone());
        }
        hcur = self.mid1.forward(&hcur, &temb)?;
        if let (Some(norm), Some(attn)) = (&self.attn_norm, &self.attn) {
            let (bb, hh, ww, cc) = hcur.dims4()?;
            let q = norm.forward(&hcur)?.reshape((bb, hh * ww, cc))?;
            let a = attn.forward(&q, text)?.reshape((bb, hh, ww, cc))?;
            hcur = (hcur + a)?;
        }
        hcur = self.mid2.forward(&hcur, &temb)?;
        for l in (0..self.config.depth).rev() {
            hcur = Tensor::cat(&[&hcur, &skips[l]], 3)?;
            hcur = self.up[l].forward(&hcur, &temb)?;
            if l > 0 {
                hcur = upsample2(&hcur)?;
            }
        }
        let out = self.head.forward(&self.head_norm.forward(&hcur)?.silu()?)?;
        // grayscale head: average across the head's channels
        Ok(out.mean_keepdim(3)?)
    }

    /// Single-image forward on host grids.
    pub fn forward(
        &self,
        xt: &Array2<f64>,
        t: usize,
        text: &TextEmbedding,
        edge: &EdgeMap,
    ) -> Result<Array2<f64>> {
        let cond = GenerationCondition {
            text: text.clone(),
            edge: edge.clone(),
        };
        let mut out = self.predict_noise(std::slice::from_ref(xt), t, &[&cond])?;
        Ok(out.pop().unwrap())
    }

    fn text_tensor(&self, texts: &[&TextEmbedding]) -> Result<Tensor> {
        let len = texts[0].len();
        let dim = self.config.text_embed_dim;
        let mut data = Vec::with_capacity(texts.len() * len * dim);
        for t in texts {
            if t.len() != len || t.dim() != dim {
                return Err(Error::Argument(format!(
                    "text embedding {:?} in a batch of {:?}",
                    (t.len(), t.dim()),
                    (len, dim)
                )));
            }
            data.extend(t.0.iter().copied());
        }
        Ok(Tensor::from_vec(data, (texts.len(), len, dim), self.params.device())?
            .to_dtype(self.dtype())?)
    }
}

impl NoisePredictor for DualBranchDenoiser {
    type Conditioning = GenerationCondition;

    fn predict_noise(
        &self,
        xts: &[Array2<f64>],
        t: usize,
        conditioning: &[&GenerationCondition],
    ) -> Result<Vec<Array2<f64>>> {
        if xts.len() != conditioning.len() || xts.is_empty() {
            return Err(Error::Argument(format!(
                "{} inputs for {} conditionings",
                xts.len(),
                conditioning.len()
            )));
        }
        for (x, c) in xts.iter().zip(conditioning) {
            if x.dim() != c.edge.dim() {
                return Err(Error::ShapeMismatch {
                    expected: x.shape().to_vec(),
                    got: c.edge.values().shape().to_vec(),
                });
            }
        }
        let dev = self.params.device().clone();
        let x = grids_to_tensor(&xts.iter().collect::<Vec<_>>(), self.dtype(), &dev)?;
        let edges: Vec<&Array2<f64>> = conditioning.iter().map(|c| c.edge.values()).collect();
        let e = grids_to_tensor(&edges, self.dtype(), &dev)?;
        let texts: Vec<&TextEmbedding> = conditioning.iter().map(|c| &c.text).collect();
        let text = self.text_tensor(&texts)?;
        let steps = vec![t; xts.len()];
        let out = self.forward_tensors(&x, &steps, &text, &e)?.detach();
        tensor_to_grids(&out)
    }
}
