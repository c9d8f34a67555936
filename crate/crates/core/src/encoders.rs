//! Small image and instruction encoders standing in for large pretrained models.

use candle_core::{DType, Module, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::codec::{encode_tensor, latent_channels};
use crate::error::{Error, Result};
use crate::nn::{sinusoid_table, Conv2d, Init, Linear, ParamBuilder, SelfAttentionBlock};

/// Grid side of the semantic token map; tokens per image = side².
pub const SEMANTIC_GRID: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch: usize,
    pub feature_dim: usize,
    pub heads: usize,
    pub vocab_size: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let ratio = self.image_size / SEMANTIC_GRID;
        if !self.image_size.is_multiple_of(SEMANTIC_GRID) || !ratio.is_power_of_two() || ratio < 2 {
            return Err(Error::Config(format!(
                "image_size {} must be {SEMANTIC_GRID} times a power of two",
                self.image_size
            )));
        }
        if !self.image_size.is_multiple_of(self.patch) {
            return Err(Error::Config(format!("image_size {} not divisible by patch {}", self.image_size, self.patch)));
        }
        if self.heads == 0 || !self.feature_dim.is_multiple_of(self.heads) || !self.feature_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("feature_dim {} incompatible with {} heads", self.feature_dim, self.heads)));
        }
        Ok(())
    }

    pub fn num_semantic_tokens(&self) -> usize {
        SEMANTIC_GRID * SEMANTIC_GRID
    }
}

fn check_images(images: &Tensor, size: usize) -> Result<usize> {
    let (b, c, h, w) = images.dims4()?;
    if c != 3 || h != size || w != size {
        return Err(Error::Shape(format!("expected (B, 3, {size}, {size}) images, got {:?}", images.dims())));
    }
    Ok(b)
}

/// Image to `M x D` semantic tokens: strided convolutions down to a 4x4 grid, then an MLP.
#[derive(Debug, Clone)]
pub struct SemanticEncoder {
    convs: Vec<Conv2d>,
    fc1: Linear,
    fc2: Linear,
    size: usize,
}

/// Semantic tokens with their pooled mean.
#[derive(Debug, Clone)]
pub struct SemanticFeatures {
    pub tokens: Tensor,
    pub pooled: Tensor,
}

impl SemanticEncoder {
    pub fn new(pb: &ParamBuilder, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let n = (cfg.image_size / SEMANTIC_GRID).trailing_zeros() as usize;
        let mut convs = Vec::with_capacity(n);
        let mut ch = 3;
        for i in 0..n {
            let out = (16 << i).min(64);
            convs.push(Conv2d::new(&pb.pp(format!("conv.{i}")), ch, out, 3, 2, 1, Init::FanIn(1.4))?);
            ch = out;
        }
        Ok(Self {
            convs,
            fc1: Linear::new(&pb.pp("fc1"), ch, cfg.feature_dim)?,
            fc2: Linear::new(&pb.pp("fc2"), cfg.feature_dim, cfg.feature_dim)?,
            size: cfg.image_size,
        })
    }

    /// `(B, 3, S, S)` images in `[0, 1]` to `(B, M, D)` tokens and `(B, D)` pooled.
    pub fn encode(&self, images: &Tensor) -> Result<SemanticFeatures> {
        let b = check_images(images, self.size)?;
        let mut x = ((images * 2.0)? - 1.0)?;
        for conv in &self.convs {
            x = conv.forward(&x)?.silu()?;
        }
        let ch = x.dim(1)?;
        let x = x.reshape((b, ch, SEMANTIC_GRID * SEMANTIC_GRID))?.transpose(1, 2)?;
        let tokens = self.fc2.forward(&self.fc1.forward(&x)?.silu()?)?;
        let pooled = tokens.mean(1)?;
        Ok(SemanticFeatures { tokens, pooled })
    }
}

/// Deterministic stand-in for a multimodal language model: symbol embeddings
/// followed by codec patch embeddings of the reference image, then two
/// self-attention layers.
#[derive(Debug, Clone)]
pub struct InstructionEncoder {
    table: Tensor,
    patch_in: Linear,
    blocks: Vec<SelfAttentionBlock>,
    dim: usize,
    patch: usize,
    size: usize,
}

/// Instruction tokens `(B, L, D)` and pooled `(B, D)` (mean of the tokens).
#[derive(Debug, Clone)]
pub struct InstructionEmbedding {
    pub tokens: Tensor,
    pub pooled: Tensor,
}

impl InstructionEncoder {
    pub fn new(pb: &ParamBuilder, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            table: pb.get(&[cfg.vocab_size, cfg.feature_dim], "table", Init::Normal(1.0))?,
            patch_in: Linear::new(&pb.pp("patch_in"), latent_channels(cfg.patch), cfg.feature_dim)?,
            blocks: (0..2)
                .map(|i| SelfAttentionBlock::new(&pb.pp(format!("blocks.{i}")), cfg.feature_dim, cfg.heads))
                .collect::<Result<_>>()?,
            dim: cfg.feature_dim,
            patch: cfg.patch,
            size: cfg.image_size,
        })
    }

    /// Out-of-range symbol ids fall back to the `<unk>` row.
    pub fn encode(&self, symbols: &[Vec<u32>], ref_images: &Tensor) -> Result<InstructionEmbedding> {
        let b = check_images(ref_images, self.size)?;
        let len = symbols.first().map_or(0, Vec::len);
        if b != symbols.len() || len == 0 || symbols.iter().any(|s| s.len() != len) {
            return Err(Error::InvalidInput("instruction batch must be non-empty, rectangular and match the images".into()));
        }
        let vocab = self.table.dim(0)? as u32;
        let ids: Vec<u32> =
            symbols.iter().flatten().map(|&t| if t < vocab { t } else { crate::data::UNK }).collect();
        let ids = Tensor::from_vec(ids, (b * len,), self.table.device())?;
        let text = self.table.index_select(&ids, 0)?.reshape((b, len, self.dim))?;
        let patches = self.patch_in.forward(&encode_tensor(ref_images, self.patch)?)?;
        let mut x = Tensor::cat(&[&text, &patches], 1)?;
        let pe = sinusoid_table(x.dim(1)?, self.dim, x.dtype(), x.device())?;
        x = x.broadcast_add(&pe.unsqueeze(0)?)?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        let pooled = x.mean(1)?;
        Ok(InstructionEmbedding { tokens: x, pooled })
    }
}

/// Attribute heads of the identity classifier: shape, body color, trim color, accessory, motif.
pub const IDENTITY_HEADS: [usize; 5] = [
    crate::data::NUM_SHAPES,
    crate::data::NUM_COLORS,
    crate::data::NUM_COLORS,
    crate::data::NUM_ACCESSORIES,
    crate::data::NUM_MOTIFS,
];

/// Small CNN classifier over identity attributes; its L2-normalized
/// penultimate layer is the identity embedding.
#[derive(Debug, Clone)]
pub struct IdentityEncoder {
    convs: Vec<Conv2d>,
    embed: Linear,
    heads: Vec<Linear>,
    size: usize,
}

pub const IDENTITY_DIM: usize = 64;

impl IdentityEncoder {
    pub fn new(pb: &ParamBuilder, image_size: usize) -> Result<Self> {
        let ratio = image_size / SEMANTIC_GRID;
        if !image_size.is_multiple_of(SEMANTIC_GRID) || !ratio.is_power_of_two() || ratio < 2 {
            return Err(Error::Config(format!("identity encoder cannot handle image size {image_size}")));
        }
        let n = ratio.trailing_zeros() as usize;
        let mut convs = Vec::new();
        let mut ch = 3;
        for i in 0..n {
            let out = (24 << i).min(64);
            convs.push(Conv2d::new(&pb.pp(format!("conv.{i}")), ch, out, 3, 1, 1, Init::FanIn(1.4))?);
            convs.push(Conv2d::new(&pb.pp(format!("down.{i}")), out, out, 3, 2, 1, Init::FanIn(1.4))?);
            ch = out;
        }
        let flat = ch * SEMANTIC_GRID * SEMANTIC_GRID;
        Ok(Self {
            convs,
            embed: Linear::new(&pb.pp("embed"), flat, IDENTITY_DIM)?,
            heads: IDENTITY_HEADS
                .iter()
                .enumerate()
                .map(|(i, &n)| Linear::new(&pb.pp(format!("head.{i}")), IDENTITY_DIM, n))
                .collect::<Result<_>>()?,
            size: image_size,
        })
    }

    fn features(&self, images: &Tensor) -> Result<Tensor> {
        let b = check_images(images, self.size)?;
        let mut x = ((images * 2.0)? - 1.0)?;
        for conv in &self.convs {
            x = conv.forward(&x)?.silu()?;
        }
        Ok(self.embed.forward(&x.reshape((b, ()))?)?)
    }

    /// Unit-norm `(B, IDENTITY_DIM)` embeddings.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let f = self.features(images)?;
        let norm = f.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
        let min = norm.flatten_all()?.min(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if min < 1e-12 {
            return Err(Error::NonFinite("identity embedding has zero norm".into()));
        }
        Ok(f.broadcast_div(&norm)?)
    }

    /// Per-head logits `(B, n_k)`.
    pub fn logits(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let f = self.features(images)?.silu()?;
        Ok(self.heads.iter().map(|h| h.forward(&f)).collect::<candle_core::Result<_>>()?)
    }

    /// Mean cross-entropy over all attribute heads.
    pub fn loss(&self, images: &Tensor, labels: &[[u8; 5]]) -> Result<Tensor> {
        let logits = self.logits(images)?;
        let dev = images.device();
        let mut total: Option<Tensor> = None;
        for (k, lg) in logits.iter().enumerate() {
            let n = lg.dim(1)?;
            let onehot: Vec<f32> =
                labels.iter().flat_map(|l| (0..n).map(move |j| if j == l[k] as usize { 1.0 } else { 0.0 })).collect();
            let onehot = Tensor::from_vec(onehot, (labels.len(), n), dev)?.to_dtype(lg.dtype())?;
            let ce = (log_softmax(lg)? * onehot)?.sum(1)?.mean(0)?.neg()?;
            total = Some(match total {
                Some(t) => (t + ce)?,
                None => ce,
            });
        }
        Ok((total.expect("at least one head") / logits.len() as f64)?)
    }
}

fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let xc = x.broadcast_sub(&m)?;
    Ok(xc.broadcast_sub(&xc.exp()?.sum_keepdim(D::Minus1)?.log()?)?)
}

pub fn identity_labels(id: &crate::data::IdentitySpec) -> [u8; 5] {
    [id.body_shape, id.primary_color, id.secondary_color, id.accessory, id.texture_motif]
}

/// Cosine similarity of two `(D,)` or `(B, D)` row sets, reduced per row.
pub fn cosine_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dot = (a * b)?.sum(D::Minus1)?;
    let na = a.sqr()?.sum(D::Minus1)?.sqrt()?;
    let nb = b.sqr()?.sum(D::Minus1)?.sqrt()?;
    Ok(dot.div(&(na * nb)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use crate::codec::Image;
    use crate::data::{render, IdentitySpec, SceneSpec};
    use rand::SeedableRng;

    fn cfg() -> EncoderConfig {
        EncoderConfig { image_size: 32, patch: 8, feature_dim: 32, heads: 4, vocab_size: crate::data::VOCAB_SIZE }
    }

    fn images(n: u64) -> Tensor {
        let imgs: Vec<Image> = (0..n)
            .map(|i| {
                let sc = SceneSpec::random(&mut rand_chacha::ChaCha8Rng::seed_from_u64(i));
                render(&IdentitySpec::from_seed(0, i as u32), &sc, 32).unwrap().0
            })
            .collect();
        Image::batch_tensor(&imgs.iter().collect::<Vec<_>>(), &Device::Cpu).unwrap()
    }

    #[test]
    fn semantic_shapes_and_determinism() {
        let pb = ParamBuilder::new(1, DType::F32, &Device::Cpu);
        let enc = SemanticEncoder::new(&pb, &cfg()).unwrap();
        let x = images(2);
        let a = enc.encode(&x).unwrap();
        let b = enc.encode(&x).unwrap();
        assert_eq!(a.tokens.dims(), &[2, 16, 32]);
        assert_eq!(a.tokens.to_vec3::<f32>().unwrap(), b.tokens.to_vec3::<f32>().unwrap());
    }

    #[test]
    fn instruction_pooled_is_token_mean_and_order_matters() {
        let pb = ParamBuilder::new(2, DType::F64, &Device::Cpu);
        let enc = InstructionEncoder::new(&pb, &cfg()).unwrap();
        let x = images(1).to_dtype(DType::F64).unwrap();
        let e = enc.encode(&[vec![60, 3]], &x).unwrap();
        let toks = e.tokens.to_vec3::<f64>().unwrap()[0].clone();
        let pooled = e.pooled.to_vec2::<f64>().unwrap()[0].clone();
        for (j, p) in pooled.iter().enumerate() {
            let mean = toks.iter().map(|r| r[j]).sum::<f64>() / toks.len() as f64;
            assert!((mean - p).abs() < 1e-12);
        }
        let swapped = enc.encode(&[vec![3, 60]], &x).unwrap().tokens.to_vec3::<f64>().unwrap()[0].clone();
        assert_ne!(swapped[0], toks[0]);
        let unk = enc.encode(&[vec![9999, 3]], &x).unwrap().tokens.to_vec3::<f64>().unwrap();
        let unk2 = enc.encode(&[vec![crate::data::UNK, 3]], &x).unwrap().tokens.to_vec3::<f64>().unwrap();
        assert_eq!(unk, unk2);
    }

    #[test]
    fn identity_embedding_is_unit_norm() {
        let pb = ParamBuilder::new(3, DType::F32, &Device::Cpu);
        let enc = IdentityEncoder::new(&pb, 32).unwrap();
        let e = enc.embed(&images(3)).unwrap().to_vec2::<f32>().unwrap();
        for row in e {
            let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }
}
