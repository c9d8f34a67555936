//! Pixel-level conditioning branch: dense and sparse visual encoders, zero-init
//! adapters, a global visual token and a control copy of the first backbone
//! blocks whose residuals are fused back cyclically.

use candle_core::{Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{Conditioning, PositionGrid};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, Linear, MmditBlock, ParamBuilder, ParamStore};

pub const DVE_LAYERS: usize = 6;
pub const SVE_LAYERS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlNetConfig {
    /// Control-branch block count.
    pub n_blocks: usize,
    pub alpha: f64,
    pub beta: f64,
    pub patch: usize,
    pub latent_channels: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub text_dim: usize,
    pub dve_width: usize,
    pub sve_width: usize,
}

impl Default for ControlNetConfig {
    fn default() -> Self {
        Self {
            n_blocks: 4,
            alpha: 1.0,
            beta: 1.0,
            patch: 8,
            latent_channels: 192,
            model_dim: 256,
            heads: 8,
            text_dim: 256,
            dve_width: 56,
            sve_width: 64,
        }
    }
}

impl ControlNetConfig {
    pub fn validate(&self, backbone_depth: usize) -> Result<()> {
        if self.n_blocks == 0 || self.n_blocks > backbone_depth {
            return Err(Error::Config(format!(
                "control branch needs 1 <= N <= backbone depth ({backbone_depth}), got N={}",
                self.n_blocks
            )));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config(format!("alpha and beta must be >= 0, got {} and {}", self.alpha, self.beta)));
        }
        let stride_layers = self.patch.trailing_zeros() as usize;
        if !self.patch.is_power_of_two() || stride_layers > SVE_LAYERS {
            return Err(Error::Config(format!("patch {} must be a power of two up to 2^{SVE_LAYERS}", self.patch)));
        }
        Ok(())
    }
}

/// Backbone blocks that receive control residual `i`: every block `j` with `j mod n == i`.
pub fn fusion_schedule(n: usize, depth: usize) -> Result<Vec<Vec<usize>>> {
    if n == 0 || n > depth {
        return Err(Error::InvalidInput(format!("cannot fuse {n} control blocks into depth {depth}")));
    }
    Ok((0..n).map(|i| (i..depth).step_by(n).collect()).collect())
}

/// `base + alpha * dense + beta * sparse` on a `(B, h, W, c)` grid. Dense features
/// cover the leftmost columns (the references), sparse features the rightmost
/// (the generated region); absent streams add nothing.
pub fn inject_projected(
    base: &Tensor,
    dense: Option<&Tensor>,
    sparse: Option<&Tensor>,
    alpha: f64,
    beta: f64,
) -> Result<Tensor> {
    let (b, h, w, c) = base.dims4()?;
    let place = |f: &Tensor, left: bool| -> Result<Tensor> {
        let (fb, fh, fw, fc) = f.dims4()?;
        if fb != b || fh != h || fc != c || fw > w {
            return Err(Error::Shape(format!("control features {:?} do not fit canvas {:?}", f.dims(), base.dims())));
        }
        if fw == w {
            return Ok(f.clone());
        }
        let pad = Tensor::zeros((b, h, w - fw, c), f.dtype(), f.device())?;
        Ok(if left { Tensor::cat(&[f, &pad], 2)? } else { Tensor::cat(&[&pad, f], 2)? })
    };
    let mut out = base.clone();
    if let Some(d) = dense {
        out = (out + (place(d, true)? * alpha)?)?;
    }
    if let Some(s) = sparse {
        out = (out + (place(s, false)? * beta)?)?;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct IpControlNet {
    cfg: ControlNetConfig,
    dve: Vec<Conv2d>,
    sve: Vec<Conv2d>,
    c0: Conv2d,
    c1: Conv2d,
    global: Linear,
    img_in: Linear,
    blocks: Vec<MmditBlock>,
    fusion: Vec<Linear>,
}

fn conv_stack(x: &Tensor, convs: &[Conv2d]) -> Result<Tensor> {
    let mut x = x.clone();
    for (i, conv) in convs.iter().enumerate() {
        x = conv.forward(&x)?;
        if i + 1 < convs.len() {
            x = x.silu()?;
        }
    }
    Ok(x)
}

/// `(B, h, W, c)` to `(B, c, h, W)` and back.
fn to_nchw(x: &Tensor) -> Result<Tensor> {
    Ok(x.permute((0, 3, 1, 2))?.contiguous()?)
}

fn to_nhwc(x: &Tensor) -> Result<Tensor> {
    Ok(x.permute((0, 2, 3, 1))?.contiguous()?)
}

impl IpControlNet {
    pub fn new(pb: &ParamBuilder, cfg: &ControlNetConfig, backbone_depth: usize) -> Result<Self> {
        cfg.validate(backbone_depth)?;
        let c = cfg.latent_channels;
        let dve = (0..DVE_LAYERS)
            .map(|i| {
                let cin = if i == 0 { c } else { cfg.dve_width };
                let cout = if i + 1 == DVE_LAYERS { c } else { cfg.dve_width };
                Conv2d::new(&pb.pp(format!("dve.{i}")), cin, cout, 3, 1, 1, Init::FanIn(1.0))
            })
            .collect::<Result<Vec<_>>>()?;
        let strided = cfg.patch.trailing_zeros() as usize;
        let sve = (0..SVE_LAYERS)
            .map(|i| {
                let cin = if i == 0 { 3 } else { (16 << (i - 1)).min(cfg.sve_width) };
                let cout = if i + 1 == SVE_LAYERS { cfg.sve_width } else { (16 << i).min(cfg.sve_width) };
                let stride = if i < strided { 2 } else { 1 };
                Conv2d::new(&pb.pp(format!("sve.{i}")), cin, cout, 3, stride, 1, Init::FanIn(1.0))
            })
            .collect::<Result<Vec<_>>>()?;
        let d = cfg.model_dim;
        Ok(Self {
            cfg: cfg.clone(),
            dve,
            sve,
            c0: Conv2d::new(&pb.pp("c0"), c, c, 1, 1, 0, Init::Zeros)?,
            c1: Conv2d::new(&pb.pp("c1"), cfg.sve_width, c, 1, 1, 0, Init::Zeros)?,
            global: Linear::zeros(&pb.pp("global"), cfg.text_dim, cfg.text_dim)?,
            img_in: Linear::new(&pb.pp("img_in"), c, d)?,
            blocks: (0..cfg.n_blocks).map(|i| MmditBlock::new(&pb.pp(format!("blocks.{i}")), d, cfg.heads)).collect::<Result<_>>()?,
            fusion: (0..cfg.n_blocks).map(|i| Linear::zeros(&pb.pp(format!("fusion.{i}")), d, d)).collect::<Result<_>>()?,
        })
    }

    pub fn config(&self) -> &ControlNetConfig {
        &self.cfg
    }

    pub fn dve_layer_count(&self) -> usize {
        self.dve.len()
    }

    /// Dense visual features of a `(B, h, W, c)` latent grid; same shape out.
    pub fn dve(&self, z: &Tensor) -> Result<Tensor> {
        let (_, _, _, c) = z.dims4()?;
        if c != self.cfg.latent_channels {
            return Err(Error::Shape(format!("dve expects {} channels, got {c}", self.cfg.latent_channels)));
        }
        to_nhwc(&conv_stack(&to_nchw(z)?, &self.dve)?)
    }

    /// Sparse features of raw `(B, 3, H, W)` maps: `(B, H/p, W/p, sve_width)`.
    pub fn sve(&self, x: &Tensor) -> Result<Tensor> {
        let (_, ch, hh, ww) = x.dims4()?;
        let p = self.cfg.patch;
        if ch != 3 || hh % p != 0 || ww % p != 0 {
            return Err(Error::InvalidInput(format!("sparse map {hh}x{ww}x{ch} not divisible by total stride {p}")));
        }
        to_nhwc(&conv_stack(x, &self.sve)?)
    }

    /// Applies the zero-init adapters and adds the results to `base`.
    pub fn inject(&self, base: &Tensor, dense: Option<&Tensor>, sparse: Option<&Tensor>, alpha: f64, beta: f64) -> Result<Tensor> {
        let d = dense.map(|x| to_nhwc(&self.c0.forward(&to_nchw(x)?)?)).transpose()?;
        let s = sparse.map(|x| to_nhwc(&self.c1.forward(&to_nchw(x)?)?)).transpose()?;
        inject_projected(base, d.as_ref(), s.as_ref(), alpha, beta)
    }

    /// One extra text-stream token `(B, 1, text_dim)` from a pooled image embedding.
    pub fn global_visual_embed(&self, pooled: &Tensor) -> Result<Tensor> {
        Ok(self.global.forward(pooled)?.unsqueeze(1)?)
    }

    /// Control residuals for the backbone, one per control block.
    ///
    /// `canvas` is the `(B, h, W, c)` noisy canvas; `dense_refs` the clean
    /// reference latents `(B, h, W_ref, c)`; `pose` the raw sparse map.
    #[allow(clippy::too_many_arguments)]
    pub fn control_branch_forward(
        &self,
        canvas: &Tensor,
        positions: &PositionGrid,
        cond: &Conditioning,
        dense_refs: Option<&Tensor>,
        pose: Option<&Tensor>,
        alpha: f64,
        beta: f64,
    ) -> Result<Vec<Tensor>> {
        let (b, h, w, c) = canvas.dims4()?;
        if positions.len() != h * w {
            return Err(Error::Shape(format!("{} positions for a {h}x{w} canvas", positions.len())));
        }
        let dense = dense_refs.map(|z| self.dve(z)).transpose()?;
        let sparse = pose.map(|x| self.sve(x)).transpose()?;
        let injected = self.inject(canvas, dense.as_ref(), sparse.as_ref(), alpha, beta)?.reshape((b, h * w, c))?;
        let pe = positions.encode(self.cfg.model_dim, canvas.dtype(), canvas.device())?;
        let mut x = self.img_in.forward(&injected)?.broadcast_add(&pe.unsqueeze(0)?)?;
        let mut txt = cond.txt.clone();
        let mut out = Vec::with_capacity(self.blocks.len());
        for (block, fuse) in self.blocks.iter().zip(&self.fusion) {
            let (nx, nt) = block.forward(&x, &txt, &cond.vec)?;
            x = nx;
            txt = nt;
            out.push(fuse.forward(&x)?);
        }
        Ok(out)
    }

    /// Parameter count of the dense visual encoder.
    pub fn dve_parameter_count(store: &ParamStore, prefix: &str) -> usize {
        store.num_elements_with_prefix(&format!("{prefix}dve."))
    }
}

/// Copies backbone `img_in` and the first `n` blocks into a control branch store.
pub fn init_branch_from_backbone(branch: &ParamStore, branch_prefix: &str, backbone: &ParamStore, backbone_prefix: &str, n: usize) -> Result<usize> {
    branch.copy_from(backbone, |name| {
        let rest = name.strip_prefix(backbone_prefix)?;
        if rest.starts_with("img_in.") {
            return Some(format!("{branch_prefix}{rest}"));
        }
        let idx: usize = rest.strip_prefix("blocks.")?.split('.').next()?.parse().ok()?;
        (idx < n).then(|| format!("{branch_prefix}{rest}"))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn small() -> ControlNetConfig {
        ControlNetConfig {
            n_blocks: 2,
            alpha: 1.0,
            beta: 1.0,
            patch: 4,
            latent_channels: 12,
            model_dim: 16,
            heads: 2,
            text_dim: 8,
            dve_width: 8,
            sve_width: 8,
        }
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        crate::nn::randn(&mut rng, shape, DType::F32, &Device::Cpu).unwrap()
    }

    #[test]
    fn cyclic_schedule() {
        assert_eq!(fusion_schedule(4, 8).unwrap(), vec![vec![0, 4], vec![1, 5], vec![2, 6], vec![3, 7]]);
        assert_eq!(fusion_schedule(3, 4).unwrap(), vec![vec![0, 3], vec![1], vec![2]]);
        assert!(fusion_schedule(5, 4).is_err());
    }

    #[test]
    fn dve_keeps_shape_and_maps_zero_to_zero() {
        let pb = ParamBuilder::new(0, DType::F32, &Device::Cpu);
        let net = IpControlNet::new(&pb, &small(), 2).unwrap();
        assert_eq!(net.dve_layer_count(), 6);
        let z = rand(&[1, 16, 48, 12], 1);
        assert_eq!(net.dve(&z).unwrap().dims(), &[1, 16, 48, 12]);
        let zero = net.dve(&z.zeros_like().unwrap()).unwrap();
        assert!(zero.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dve_budget_at_default_width() {
        let pb = ParamBuilder::new(0, DType::F32, &Device::Cpu);
        let cfg = ControlNetConfig { model_dim: 32, heads: 4, text_dim: 8, ..Default::default() };
        IpControlNet::new(&pb, &cfg, 4).unwrap();
        let n = IpControlNet::dve_parameter_count(&pb.finish(), "");
        assert!((250_000..350_000).contains(&n), "dve has {n} parameters");
    }

    #[test]
    fn sve_downsamples_by_patch() {
        let pb = ParamBuilder::new(0, DType::F32, &Device::Cpu);
        let cfg = ControlNetConfig { patch: 8, ..small() };
        let net = IpControlNet::new(&pb, &cfg, 2).unwrap();
        let out = net.sve(&rand(&[1, 3, 256, 256], 2)).unwrap();
        assert_eq!(out.dims(), &[1, 32, 32, 8]);
        let zero = net.sve(&Tensor::zeros((1, 3, 16, 16), DType::F32, &Device::Cpu).unwrap()).unwrap();
        assert!(zero.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| *v == 0.0));
        assert!(net.sve(&rand(&[1, 3, 12, 16], 3)).is_err());
    }

    #[test]
    fn inject_oracles() {
        let dev = Device::Cpu;
        let eps = Tensor::ones((1, 1, 1, 1), DType::F64, &dev).unwrap();
        let d = (eps.clone() * 0.5).unwrap();
        let s = (eps.clone() * 0.25).unwrap();
        let out = inject_projected(&eps, Some(&d), Some(&s), 1.0, 2.0).unwrap();
        assert_eq!(out.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![2.0]);

        let pb = ParamBuilder::new(0, DType::F32, &Device::Cpu);
        let net = IpControlNet::new(&pb, &small(), 2).unwrap();
        let base = rand(&[2, 2, 6, 12], 4);
        let dense = rand(&[2, 2, 4, 12], 5);
        let sparse = rand(&[2, 2, 2, 8], 6);
        let fresh = net.inject(&base, Some(&dense), Some(&sparse), 1.0, 1.0).unwrap();
        assert_eq!(fresh.flatten_all().unwrap().to_vec1::<f32>().unwrap(), base.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        pb.finish().perturb(9, 0.5).unwrap();
        let off = net.inject(&base, Some(&dense), Some(&sparse), 0.0, 0.0).unwrap();
        assert_eq!(off.flatten_all().unwrap().to_vec1::<f32>().unwrap(), base.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        assert!(net.inject(&base, Some(&rand(&[2, 3, 4, 12], 7)), None, 1.0, 1.0).is_err());
    }

    #[test]
    fn global_token_shape() {
        let pb = ParamBuilder::new(0, DType::F32, &Device::Cpu);
        let net = IpControlNet::new(&pb, &small(), 2).unwrap();
        assert_eq!(net.global_visual_embed(&rand(&[3, 8], 1)).unwrap().dims(), &[3, 1, 8]);
    }
}
