//! Flow-matching MMDiT backbone over latent canvases.

use candle_core::{DType, Device, Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{layer_norm, sinusoid, sinusoid_table, Init, Linear, MmditBlock, ParamBuilder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub depth: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub text_dim: usize,
    pub latent_channels: usize,
    pub vocab_size: usize,
    pub max_positions: (usize, usize),
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            depth: 8,
            model_dim: 256,
            heads: 8,
            text_dim: 256,
            latent_channels: 192,
            vocab_size: crate::data::VOCAB_SIZE,
            max_positions: (64, 64),
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("backbone depth must be >= 2, got {}", self.depth)));
        }
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) || !(self.model_dim / self.heads).is_multiple_of(2) {
            return Err(Error::Config(format!(
                "model_dim {} must split into {} heads of even width",
                self.model_dim, self.heads
            )));
        }
        if !self.model_dim.is_multiple_of(4) {
            return Err(Error::Config("model_dim must be a multiple of 4 for 2-D positions".into()));
        }
        Ok(())
    }
}

/// Row/column index of every image token, in canvas token order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionGrid {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

impl PositionGrid {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn offset(&self, dr: usize, dc: usize) -> Self {
        Self {
            rows: self.rows.iter().map(|r| r + dr).collect(),
            cols: self.cols.iter().map(|c| c + dc).collect(),
        }
    }

    pub fn check_bounds(&self, max: (usize, usize)) -> Result<()> {
        let need_rows = self.rows.iter().max().map_or(0, |r| r + 1);
        let need_cols = self.cols.iter().max().map_or(0, |c| c + 1);
        if need_rows > max.0 || need_cols > max.1 {
            let i = self.rows.iter().zip(&self.cols).position(|(r, c)| *r >= max.0 || *c >= max.1).unwrap_or(0);
            return Err(Error::PositionOutOfRange {
                row: self.rows[i],
                col: self.cols[i],
                max_rows: max.0,
                max_cols: max.1,
                need_rows,
                need_cols,
            });
        }
        Ok(())
    }

    /// `(T, dim)` encoding: rows fill the first half of the features, columns the second.
    pub fn encode(&self, dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
        let half = dim / 2;
        let mut data = Vec::with_capacity(self.len() * dim);
        for (r, c) in self.rows.iter().zip(&self.cols) {
            data.extend(sinusoid(*r as f64, half, 10_000.0));
            data.extend(sinusoid(*c as f64, half, 10_000.0));
        }
        Ok(Tensor::from_vec(data, (self.len(), dim), device)?.to_dtype(dtype)?)
    }
}

/// Positions for a canvas of height `h` holding references of `ref_widths`
/// followed by an optional generated region of `target_width`.
///
/// References take rows `[0, h)` and columns `[0, sum(ref_widths))`. The
/// generated region starts at `(h, sum(ref_widths))`, diagonally past the
/// lower-right corner of the reference region, or at `(0, 0)` with no references.
pub fn assign_positions(
    h: usize,
    ref_widths: &[usize],
    target_width: Option<usize>,
    max_positions: (usize, usize),
) -> Result<PositionGrid> {
    let ref_w: usize = ref_widths.iter().sum();
    let total_w = ref_w + target_width.unwrap_or(0);
    if h == 0 || total_w == 0 {
        return Err(Error::InvalidInput("empty layout".into()));
    }
    let row_offset = if ref_w > 0 { h } else { 0 };
    let mut grid = PositionGrid { rows: Vec::with_capacity(h * total_w), cols: Vec::with_capacity(h * total_w) };
    for r in 0..h {
        for x in 0..total_w {
            grid.rows.push(if x < ref_w { r } else { row_offset + r });
            grid.cols.push(x);
        }
    }
    grid.check_bounds(max_positions)?;
    Ok(grid)
}

/// Sinusoidal timestep features; `tau` is scaled by 1000 before encoding.
pub fn timestep_features(tau: f64, dim: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidInput(format!("timestep {tau} outside [0, 1]")));
    }
    Ok(sinusoid(1000.0 * tau, dim, 10_000.0))
}

/// Sinusoidal timestep features followed by a two-layer SiLU MLP.
#[derive(Debug, Clone)]
pub struct TimestepEmbedder {
    fc1: Linear,
    fc2: Linear,
    dim: usize,
}

impl TimestepEmbedder {
    pub fn new(pb: &ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self { fc1: Linear::new(&pb.pp("fc1"), dim, dim)?, fc2: Linear::new(&pb.pp("fc2"), dim, dim)?, dim })
    }

    /// `(B, dim)` embeddings for a batch of timesteps.
    pub fn embed(&self, taus: &[f64], dtype: DType, device: &Device) -> Result<Tensor> {
        let mut data = Vec::with_capacity(taus.len() * self.dim);
        for &t in taus {
            data.extend(timestep_features(t, self.dim)?);
        }
        let feats = Tensor::from_vec(data, (taus.len(), self.dim), device)?.to_dtype(dtype)?;
        Ok(self.fc2.forward(&self.fc1.forward(&feats)?.silu()?)?)
    }
}

/// Text stream and global vector after embedding, shared by the backbone and
/// the control branch.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub txt: Tensor,
    pub vec: Tensor,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    caption_embed: Tensor,
    img_in: Linear,
    txt_in: Linear,
    pooled_in: Linear,
    time: TimestepEmbedder,
    blocks: Vec<MmditBlock>,
    final_mod: Linear,
    final_out: Linear,
    // Per-channel gate on the noisy input tokens: the velocity carries a full
    // copy of the noise, which a hidden width below the token width cannot pass.
    skip_gate: Linear,
}

impl Backbone {
    pub fn new(pb: &ParamBuilder, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        Ok(Self {
            cfg: cfg.clone(),
            caption_embed: pb.get(&[cfg.vocab_size, cfg.text_dim], "caption_embed", Init::Normal(1.0))?,
            img_in: Linear::new(&pb.pp("img_in"), cfg.latent_channels, d)?,
            txt_in: Linear::new(&pb.pp("txt_in"), cfg.text_dim, d)?,
            pooled_in: Linear::new(&pb.pp("pooled_in"), cfg.text_dim, d)?,
            time: TimestepEmbedder::new(&pb.pp("time"), d)?,
            blocks: (0..cfg.depth).map(|i| MmditBlock::new(&pb.pp(format!("blocks.{i}")), d, cfg.heads)).collect::<Result<_>>()?,
            final_mod: Linear::zeros(&pb.pp("final_mod"), d, 2 * d)?,
            final_out: Linear::with_init(&pb.pp("final_out"), d, cfg.latent_channels, Init::Zeros, true)?,
            skip_gate: Linear::zeros(&pb.pp("skip_gate"), d, cfg.latent_channels)?,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> &[MmditBlock] {
        &self.blocks
    }

    /// Caption symbols to `(B, L, text_dim)` embeddings (the frozen text-encoder analog).
    pub fn embed_captions(&self, captions: &[Vec<u32>]) -> Result<Tensor> {
        let len = captions.first().map_or(0, Vec::len);
        if captions.iter().any(|c| c.len() != len) {
            return Err(Error::Shape("captions in a batch must have equal length".into()));
        }
        let ids: Vec<u32> = captions.iter().flatten().map(|&t| t.min(self.cfg.vocab_size as u32 - 1)).collect();
        let ids = Tensor::from_vec(ids, (captions.len() * len,), self.caption_embed.device())?;
        Ok(self.caption_embed.index_select(&ids, 0)?.reshape((captions.len(), len, self.cfg.text_dim))?)
    }

    pub fn condition(&self, text: &Tensor, pooled: &Tensor, taus: &[f64]) -> Result<Conditioning> {
        let (b, l, td) = text.dims3()?;
        if td != self.cfg.text_dim || pooled.dims() != [b, td] || taus.len() != b {
            return Err(Error::Shape(format!(
                "text {:?} / pooled {:?} / {} timesteps do not agree with text_dim {}",
                text.dims(),
                pooled.dims(),
                taus.len(),
                self.cfg.text_dim
            )));
        }
        let d = self.cfg.model_dim;
        let txt = self
            .txt_in
            .forward(text)?
            .broadcast_add(&sinusoid_table(l, d, text.dtype(), text.device())?.unsqueeze(0)?)?;
        let vec = (self.time.embed(taus, text.dtype(), text.device())? + self.pooled_in.forward(pooled)?)?;
        Ok(Conditioning { txt, vec })
    }

    /// Canvas tokens `(B, T, c)` to hidden `(B, T, D)` with 2-D positions added.
    pub fn embed_image(&self, tokens: &Tensor, positions: &PositionGrid) -> Result<Tensor> {
        let (_, t, c) = tokens.dims3()?;
        if c != self.cfg.latent_channels || t != positions.len() {
            return Err(Error::Shape(format!(
                "canvas tokens {:?} vs {} positions / {} channels",
                tokens.dims(),
                positions.len(),
                self.cfg.latent_channels
            )));
        }
        positions.check_bounds(self.cfg.max_positions)?;
        let pe = positions.encode(self.cfg.model_dim, tokens.dtype(), tokens.device())?;
        Ok(self.img_in.forward(tokens)?.broadcast_add(&pe.unsqueeze(0)?)?)
    }

    /// Velocity prediction; `residuals[i % N]` is added after block `i` when given.
    pub fn forward_conditioned(
        &self,
        tokens: &Tensor,
        positions: &PositionGrid,
        cond: &Conditioning,
        residuals: Option<&[Tensor]>,
    ) -> Result<Tensor> {
        let mut img = self.embed_image(tokens, positions)?;
        let mut txt = cond.txt.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            let (ni, nt) = block.forward(&img, &txt, &cond.vec)?;
            img = ni;
            txt = nt;
            if let Some(res) = residuals.filter(|r| !r.is_empty()) {
                img = (img + &res[i % res.len()])?;
            }
        }
        let m = self.final_mod.forward(&cond.vec.silu()?)?.chunk(2, 1)?;
        let x = layer_norm(&img, 1e-6)?
            .broadcast_mul(&(m[1].unsqueeze(1)? + 1.0)?)?
            .broadcast_add(&m[0].unsqueeze(1)?)?;
        let gate = self.skip_gate.forward(&cond.vec.silu()?)?.unsqueeze(1)?;
        Ok((self.final_out.forward(&x)? + tokens.broadcast_mul(&gate)?)?)
    }

    /// Backbone-only forward: `(B, T, c)` canvas tokens to `(B, T, c)` velocity.
    pub fn forward(
        &self,
        tokens: &Tensor,
        positions: &PositionGrid,
        text: &Tensor,
        pooled: &Tensor,
        taus: &[f64],
    ) -> Result<Tensor> {
        let cond = self.condition(text, pooled, taus)?;
        self.forward_conditioned(tokens, positions, &cond, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            depth: 2,
            model_dim: 32,
            heads: 4,
            text_dim: 16,
            latent_channels: 12,
            vocab_size: 10,
            max_positions: (16, 32),
        }
    }

    #[test]
    fn positions_follow_reference_region() {
        let g = assign_positions(16, &[16, 16, 16], Some(16), (64, 128)).unwrap();
        let target: Vec<_> = (0..g.len()).filter(|&i| g.cols[i] >= 48).collect();
        let origin = target.iter().map(|&i| (g.rows[i], g.cols[i])).min().unwrap();
        assert_eq!(origin, (16, 48));

        let g = assign_positions(4, &[], Some(4), (8, 8)).unwrap();
        assert_eq!((g.rows[0], g.cols[0]), (0, 0));

        let g = assign_positions(4, &[4, 4], Some(4), (8, 12)).unwrap();
        let refs: HashSet<_> = (0..g.len()).filter(|&i| g.cols[i] < 8).map(|i| (g.rows[i], g.cols[i])).collect();
        let gen: HashSet<_> = (0..g.len()).filter(|&i| g.cols[i] >= 8).map(|i| (g.rows[i], g.cols[i])).collect();
        assert!(refs.is_disjoint(&gen));
        assert_eq!(refs.len() + gen.len(), g.len());
    }

    #[test]
    fn positions_out_of_range_give_sizing_hint() {
        let err = assign_positions(8, &[8, 8], Some(8), (8, 64)).unwrap_err();
        match err {
            Error::PositionOutOfRange { need_rows, need_cols, .. } => assert_eq!((need_rows, need_cols), (16, 24)),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn timestep_features_range_checked() {
        assert!(timestep_features(1.5, 8).is_err());
        assert!(timestep_features(-0.1, 8).is_err());
        let a = timestep_features(0.0, 64).unwrap();
        assert_eq!(a.len(), 64);
        assert_eq!(a, timestep_features(0.0, 64).unwrap());
    }

    #[test]
    fn forward_shape_and_determinism() {
        let cfg = tiny();
        let pb = ParamBuilder::new(1, DType::F64, &Device::Cpu);
        let bb = Backbone::new(&pb, &cfg).unwrap();
        pb.finish().perturb(2, 0.05).unwrap();
        let pos = assign_positions(4, &[4, 4], Some(8), cfg.max_positions).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let x = crate::nn::randn(&mut rng, &[1, 64, 12], DType::F64, &Device::Cpu).unwrap();
        let text = crate::nn::randn(&mut rng, &[1, 5, 16], DType::F64, &Device::Cpu).unwrap();
        let pooled = text.mean(1).unwrap();
        let a = bb.forward(&x, &pos, &text, &pooled, &[0.3]).unwrap();
        let b = bb.forward(&x, &pos, &text, &pooled, &[0.3]).unwrap();
        assert_eq!(a.dims(), &[1, 64, 12]);
        assert_eq!(a.to_vec3::<f64>().unwrap(), b.to_vec3::<f64>().unwrap());

        // Reversing text token order changes the output because text positions are encoded.
        let idx = Tensor::new(&[4u32, 3, 2, 1, 0], &Device::Cpu).unwrap();
        let rev = text.index_select(&idx, 1).unwrap();
        let c = bb.forward(&x, &pos, &rev, &pooled, &[0.3]).unwrap();
        let diff = (a - c).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff > 1e-9);

        let bad = assign_positions(4, &[4, 4], Some(8), (64, 64)).unwrap().offset(20, 0);
        assert!(matches!(bb.forward(&x, &bad, &text, &pooled, &[0.3]), Err(Error::PositionOutOfRange { .. })));
        assert!(bb.forward(&x, &pos, &text, &pooled, &[1.3]).is_err());
    }
}
