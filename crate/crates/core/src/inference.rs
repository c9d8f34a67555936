//! Euler sampling over the joint reference/target canvas with skip-ahead
//! noising of the references.

use std::fmt::Write as _;
use std::path::Path;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::assign_positions;
use crate::codec::{decode_tokens, encode_tensor, latent_channels, Image};
use crate::data::derive_seed;
use crate::error::{io_err, Error, Result};
use crate::models::Models;
use crate::nn::randn;
use crate::training::{pipeline_velocity, CanvasConditions};

/// `t * eps + (1 - t) * x_r`.
pub fn skip_ahead_noise(x_r: &Tensor, t: f64, eps: &Tensor) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidInput(format!("intensity {t} outside [0, 1]")));
    }
    if x_r.dims() != eps.dims() {
        return Err(Error::Shape(format!("reference {:?} vs noise {:?}", x_r.dims(), eps.dims())));
    }
    Ok(((eps * t)? + (x_r * (1.0 - t))?)?)
}

/// Decreasing timestep grid from 1 to 0 with `steps` uniform intervals, plus
/// `skip_t` when it does not already fall on the grid.
pub fn schedule(steps: usize, skip_t: f64) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::InvalidInput("steps must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&skip_t) {
        return Err(Error::InvalidInput(format!("skip_t {skip_t} outside [0, 1]")));
    }
    let mut grid: Vec<f64> = (0..=steps).map(|i| 1.0 - i as f64 / steps as f64).collect();
    *grid.last_mut().expect("non-empty") = 0.0;
    if !grid.iter().any(|&t| (t - skip_t).abs() < 1e-12) {
        let at = grid.iter().position(|&t| t < skip_t).expect("0 is below any skip_t off the grid");
        grid.insert(at, skip_t);
    }
    Ok(grid)
}

#[derive(Debug, Clone)]
pub struct ConditionBundle {
    pub dense_refs: Vec<Image>,
    pub sparse_map: Option<Image>,
    /// Prompt symbols; the connector instruction is derived from it.
    pub instruction: Vec<String>,
    pub alpha: f64,
    pub beta: f64,
    pub skip_t: f64,
    pub seed: u64,
}

impl ConditionBundle {
    pub fn validate(&self, image_size: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.skip_t) {
            return Err(Error::InvalidInput(format!("skip_t {} outside [0, 1]", self.skip_t)));
        }
        if self.dense_refs.is_empty() && self.sparse_map.is_none() && self.instruction.is_empty() {
            return Err(Error::InvalidInput("need at least one of references, a sparse map or a prompt".into()));
        }
        if !(self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(Error::InvalidInput("alpha and beta must be finite".into()));
        }
        for img in self.dense_refs.iter().chain(&self.sparse_map) {
            if img.height() != image_size || img.width() != image_size {
                return Err(Error::Shape(format!(
                    "condition image is {}x{}, expected {image_size}x{image_size}",
                    img.height(),
                    img.width()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryMeta {
    pub steps: usize,
    pub seed: u64,
    pub skip_t: f64,
    pub schedule: Vec<f64>,
    pub num_refs: usize,
    /// Canvas columns of each segment, references first.
    pub segment_cols: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct SampleResult {
    pub generated: Image,
    pub reconstructed_refs: Vec<Image>,
    pub meta: TrajectoryMeta,
}

/// Canvas noise for one sample, drawn from its own seed.
fn canvas_noise(seed: u64, shape: &[usize], models: &Models) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x5A3F1E]));
    randn(&mut rng, shape, models.dtype, &models.device)
}

pub fn sample(models: &Models, bundle: &ConditionBundle, steps: usize) -> Result<SampleResult> {
    Ok(sample_batch(models, std::slice::from_ref(bundle), steps)?.remove(0))
}

/// Samples bundles that share reference count and `skip_t` in one batch.
/// Each row draws its noise from its own seed.
pub fn sample_batch(models: &Models, bundles: &[ConditionBundle], steps: usize) -> Result<Vec<SampleResult>> {
    let cfg = &models.cfg;
    let first = bundles.first().ok_or_else(|| Error::InvalidInput("no bundles to sample".into()))?;
    for b in bundles {
        b.validate(cfg.image_size)?;
        if b.dense_refs.len() != first.dense_refs.len() || b.skip_t != first.skip_t {
            return Err(Error::InvalidInput("batched bundles need equal reference counts and skip_t".into()));
        }
        if b.sparse_map.is_some() != first.sparse_map.is_some() || b.instruction.len() != first.instruction.len() {
            return Err(Error::InvalidInput("batched bundles need the same kinds of condition".into()));
        }
        if (b.alpha, b.beta) != (first.alpha, first.beta) {
            return Err(Error::InvalidInput("batched bundles need equal alpha and beta".into()));
        }
    }
    let grid = schedule(steps, first.skip_t)?;
    let bsz = bundles.len();
    let n = first.dense_refs.len();
    let s = cfg.latent_side();
    let c = latent_channels(cfg.p);
    let w = s * (n + 1);
    let device = &models.device;
    let dt = models.dtype;

    let image_batch = |pick: &dyn Fn(&ConditionBundle) -> &Image| -> Result<Tensor> {
        let imgs: Vec<&Image> = bundles.iter().map(pick).collect();
        Ok(Image::batch_tensor(&imgs, device)?.to_dtype(dt)?)
    };
    let mut ref_lat = Vec::with_capacity(n);
    for j in 0..n {
        let imgs = image_batch(&|b| &b.dense_refs[j])?;
        ref_lat.push(encode_tensor(&imgs, cfg.p)?.reshape((bsz, s, s, c))?);
    }
    let refs = if n > 0 { Some(Tensor::cat(&ref_lat, 2)?) } else { None };
    let first_ref = if n > 0 { Some(image_batch(&|b| &b.dense_refs[0])?) } else { None };
    let poses = match first.sparse_map {
        Some(_) => Some(image_batch(&|b| b.sparse_map.as_ref().expect("checked above"))?),
        None => None,
    };
    let prompts: Vec<Vec<String>> = bundles.iter().map(|b| b.instruction.clone()).collect();
    let positions = assign_positions(s, &vec![s; n], Some(s), cfg.backbone().max_positions)?;
    let cond = CanvasConditions::new(models, &prompts, first_ref.as_ref(), refs.clone(), poses, positions, first.alpha, first.beta)?;

    let eps: Vec<Tensor> = bundles.iter().map(|b| canvas_noise(b.seed, &[1, s, w, c], models)).collect::<Result<_>>()?;
    let eps = Tensor::cat(&eps, 0)?;
    let w_ref = s * n;
    let skip_t = first.skip_t;
    let mut target = eps.narrow(2, w_ref, s)?;
    let mut ref_state = match &refs {
        Some(r) => Some(skip_ahead_noise(r, skip_t, &eps.narrow(2, 0, w_ref)?)?),
        None => None,
    };
    for win in grid.windows(2) {
        let (t, t_next) = (win[0], win[1]);
        let canvas = match &ref_state {
            Some(r) => Tensor::cat(&[r, &target], 2)?,
            None => target.clone(),
        };
        let v = pipeline_velocity(models, &canvas, &cond, &vec![t; bsz])?;
        let dt_ = t_next - t;
        target = (&target + (v.narrow(2, w_ref, s)? * dt_)?)?;
        // References join the integration once the schedule reaches their noise level.
        if let Some(r) = &ref_state {
            if t <= skip_t + 1e-12 {
                ref_state = Some((r + (v.narrow(2, 0, w_ref)? * dt_)?)?);
            }
        }
    }

    let decode = |seg: &Tensor, row: usize| -> Result<Image> {
        let tok = seg.narrow(0, row, 1)?.reshape((1, s * s, c))?;
        Image::from_tensor(&decode_tokens(&tok.to_dtype(DType::F32)?, s, s, cfg.p)?.squeeze(0)?)
    };
    let mut segment_cols: Vec<(usize, usize)> = (0..n).map(|j| (j * s, (j + 1) * s)).collect();
    segment_cols.push((w_ref, w));
    let mut out = Vec::with_capacity(bsz);
    for (row, b) in bundles.iter().enumerate() {
        let mut recon = Vec::with_capacity(n);
        if let Some(r) = &ref_state {
            for j in 0..n {
                recon.push(decode(&r.narrow(2, j * s, s)?, row)?);
            }
        }
        out.push(SampleResult {
            generated: decode(&target, row)?,
            reconstructed_refs: recon,
            meta: TrajectoryMeta {
                steps,
                seed: b.seed,
                skip_t,
                schedule: grid.clone(),
                num_refs: n,
                segment_cols: segment_cols.clone(),
            },
        });
    }
    Ok(out)
}

/// Plain-text `key=value` sidecar describing a sample.
pub fn meta_text(result: &SampleResult, bundle: &ConditionBundle) -> String {
    let m = &result.meta;
    let mut s = String::new();
    let _ = writeln!(s, "steps={}", m.steps);
    let _ = writeln!(s, "seed={}", m.seed);
    let _ = writeln!(s, "skip_t={}", m.skip_t);
    let _ = writeln!(s, "alpha={}", bundle.alpha);
    let _ = writeln!(s, "beta={}", bundle.beta);
    let _ = writeln!(s, "num_refs={}", m.num_refs);
    let _ = writeln!(s, "sparse_map={}", bundle.sparse_map.is_some());
    let _ = writeln!(s, "prompt={}", bundle.instruction.join(" "));
    let sched: Vec<String> = m.schedule.iter().map(|t| format!("{t:.6}")).collect();
    let _ = writeln!(s, "schedule={}", sched.join(","));
    let segs: Vec<String> = m.segment_cols.iter().map(|(a, b)| format!("{a}..{b}")).collect();
    let _ = writeln!(s, "segments={}", segs.join(","));
    s
}

/// Writes `generated.png`, `recon_<i>.png` and `meta.txt` into `dir`.
pub fn write_sample(dir: &Path, result: &SampleResult, bundle: &ConditionBundle) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    result.generated.save_png(&dir.join("generated.png"))?;
    for (i, r) in result.reconstructed_refs.iter().enumerate() {
        r.save_png(&dir.join(format!("recon_{i}.png")))?;
    }
    let meta = dir.join("meta.txt");
    std::fs::write(&meta, meta_text(result, bundle)).map_err(io_err(meta))
}
