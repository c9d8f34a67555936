//! Flow-matching losses, the identity objective and the staged training loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor, D};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{assign_positions, PositionGrid};
use crate::checkpoint::Checkpoint;
use crate::codec::{decode_tokens, encode_tensor, Image};
use crate::config::RunConfig;
use crate::data::{derive_seed, Dataset, IdentitySpec, Split};
use crate::encoders::identity_labels;
use crate::error::{io_err, Error, Result};
use crate::ipcn::init_branch_from_backbone;
use crate::models::{generation_instruction, scene_prompt, Group, Models};
use crate::nn::randn;
use crate::optim::{AdamW, AdamWParams};

/// `x_tau = (1 - tau) x0 + tau eps`, with one `tau` per batch row.
pub fn noise_canvas(x0: &Tensor, eps: &Tensor, taus: &[f64]) -> Result<Tensor> {
    if x0.dims() != eps.dims() {
        return Err(Error::Shape(format!("clean {:?} vs noise {:?}", x0.dims(), eps.dims())));
    }
    let t = per_row(taus, x0)?;
    Ok((x0.broadcast_mul(&(1.0 - &t)?)? + eps.broadcast_mul(&t)?)?)
}

/// `taus` as a tensor broadcastable against `like` along the batch axis.
fn per_row(taus: &[f64], like: &Tensor) -> Result<Tensor> {
    let b = like.dim(0)?;
    if taus.len() != b {
        return Err(Error::Shape(format!("{} timesteps for batch of {b}", taus.len())));
    }
    if let Some(t) = taus.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::InvalidInput(format!("timestep {t} outside [0, 1]")));
    }
    let mut shape = vec![1usize; like.rank()];
    shape[0] = b;
    Ok(Tensor::from_slice(taus, b, like.device())?.to_dtype(like.dtype())?.reshape(shape)?)
}

/// Mean squared error between `pred` and the velocity target `eps - x0`,
/// over the entries where `mask` is one (everywhere when absent).
pub fn equ_loss(pred: &Tensor, eps: &Tensor, x0: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    if pred.dims() != eps.dims() || pred.dims() != x0.dims() {
        return Err(Error::Shape(format!("pred {:?}, noise {:?}, clean {:?}", pred.dims(), eps.dims(), x0.dims())));
    }
    let sq = (pred - (eps - x0)?)?.sqr()?;
    match mask {
        None => Ok(sq.mean_all()?),
        Some(m) => {
            let m = m.broadcast_as(sq.shape())?.to_dtype(sq.dtype())?;
            let count = m.sum_all()?;
            Ok((sq * &m)?.sum_all()?.div(&count)?)
        }
    }
}

/// `1 - cos(z_gen, z_ref)` averaged over rows; zero-norm rows are rejected.
pub fn id_loss(z_gen: &Tensor, z_ref: &Tensor) -> Result<Tensor> {
    if z_gen.dims() != z_ref.dims() {
        return Err(Error::Shape(format!("z_gen {:?} vs z_ref {:?}", z_gen.dims(), z_ref.dims())));
    }
    let (z_gen, z_ref) = if z_gen.rank() == 1 { (z_gen.unsqueeze(0)?, z_ref.unsqueeze(0)?) } else { (z_gen.clone(), z_ref.clone()) };
    let ng = z_gen.sqr()?.sum(D::Minus1)?.sqrt()?;
    let nr = z_ref.sqr()?.sum(D::Minus1)?.sqrt()?;
    for (which, n) in [("generated", &ng), ("reference", &nr)] {
        let min = n.min(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !(min > 0.0) {
            return Err(Error::InvalidInput(format!("{which} identity embedding has zero norm")));
        }
    }
    let cos = (&z_gen * &z_ref)?.sum(D::Minus1)?.div(&(ng * nr)?)?;
    Ok((1.0 - cos)?.mean_all()?)
}

/// `l_equ + lambda * l_id`.
pub fn total_loss(l_equ: f64, l_id: f64, lambda: f64) -> Result<f64> {
    if !(l_equ.is_finite() && l_id.is_finite() && lambda.is_finite()) {
        return Err(Error::NonFinite(format!("l_equ={l_equ}, l_id={l_id}, lambda={lambda}")));
    }
    Ok(l_equ + lambda * l_id)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub step: usize,
    pub l_equ: f64,
    pub l_id: f64,
    pub l_total: f64,
    pub l_recon: Option<f64>,
    pub l_gen: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Pretrain,
    Identity,
    Connector,
    Warmup1to1,
    Main1toMany,
    Equivariant,
}

impl Stage {
    pub const DIFFUSION: [Stage; 3] = [Stage::Warmup1to1, Stage::Main1toMany, Stage::Equivariant];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Identity => "identity",
            Stage::Connector => "connector",
            Stage::Warmup1to1 => "warmup_1to1",
            Stage::Main1toMany => "main_1toMany",
            Stage::Equivariant => "equivariant",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [Stage::Pretrain, Stage::Identity, Stage::Connector, Stage::Warmup1to1, Stage::Main1toMany, Stage::Equivariant]
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidInput(format!("unknown stage `{s}`")))
    }

    pub fn default_iterations(&self, cfg: &RunConfig) -> usize {
        match self {
            Stage::Pretrain => cfg.pretrain_iters,
            Stage::Identity => cfg.identity_iters,
            Stage::Connector => cfg.connector_iters,
            Stage::Warmup1to1 => cfg.warmup_iters,
            Stage::Main1toMany => cfg.main_iters,
            Stage::Equivariant => cfg.equivariant_iters,
        }
    }

    /// Checkpoint the stage continues from by default.
    pub fn default_init(&self) -> Option<&'static str> {
        match self {
            Stage::Main1toMany => Some("warmup_1to1"),
            Stage::Equivariant => Some("main_1toMany"),
            _ => None,
        }
    }

    fn is_diffusion(&self) -> bool {
        Stage::DIFFUSION.contains(self)
    }
}

/// Called every `probe_every` steps with the current models; its value is logged.
pub type Probe<'a> = Box<dyn Fn(&Models) -> Result<f64> + 'a>;

pub struct TrainOptions<'a> {
    pub run_dir: PathBuf,
    pub iterations: usize,
    /// Output name for the checkpoint and curve; defaults to the stage name.
    pub tag: String,
    /// Checkpoint tag the trained group starts from.
    pub init_tag: Option<String>,
    pub resume: bool,
    /// Use the identity loss when an identity checkpoint exists and lambda > 0.
    pub use_id_loss: bool,
    pub probe: Option<Probe<'a>>,
    pub probe_every: usize,
    /// Print a progress line every this many steps; 0 disables.
    pub log_every: usize,
    /// Seeds the per-step batches; runs sharing a stream see identical data and noise.
    pub rng_stream: u64,
}

impl<'a> TrainOptions<'a> {
    pub fn new(cfg: &RunConfig, stage: Stage, run_dir: &Path) -> Self {
        Self {
            run_dir: run_dir.to_path_buf(),
            iterations: stage.default_iterations(cfg),
            tag: stage.name().to_string(),
            init_tag: stage.default_init().map(str::to_string),
            resume: true,
            use_id_loss: true,
            probe: None,
            probe_every: 0,
            log_every: 0,
            rng_stream: stage as u64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub checkpoint: PathBuf,
    pub curve_path: PathBuf,
    pub curve: Vec<LossReport>,
    pub probes: Vec<(usize, f64)>,
    /// Checksums of every loaded frozen group, before and after training.
    pub frozen_before: BTreeMap<String, String>,
    pub frozen_after: BTreeMap<String, String>,
    pub id_loss_active: bool,
}

pub fn checkpoint_path(run_dir: &Path, tag: &str) -> PathBuf {
    run_dir.join("checkpoints").join(format!("{tag}.ckpt"))
}

/// True when `tag` has a checkpoint at or past `iterations` steps.
pub fn stage_complete(run_dir: &Path, tag: &str, iterations: usize) -> bool {
    Checkpoint::load(&checkpoint_path(run_dir, tag)).is_ok_and(|ck| ck.step as usize >= iterations)
}

fn load_required(run_dir: &Path, tag: &str) -> Result<Checkpoint> {
    let path = checkpoint_path(run_dir, tag);
    if !path.exists() {
        return Err(Error::MissingCheckpoint { stage: tag.to_string(), path });
    }
    Checkpoint::load(&path)
}

/// Models for sampling and evaluation: backbone and encoders from their stage
/// checkpoints, the control branch from `ipcn_tag`, and the identity encoder when present.
pub fn load_inference_models(cfg: &RunConfig, run_dir: &Path, ipcn_tag: &str) -> Result<Models> {
    let id_path = checkpoint_path(run_dir, Stage::Identity.name());
    let mut groups: Vec<(Group, bool)> = [Group::Backbone, Group::Semantic, Group::Instruction, Group::Connector, Group::Ipcn]
        .into_iter()
        .map(|g| (g, false))
        .collect();
    if id_path.exists() {
        groups.push((Group::Identity, false));
    }
    let models = Models::build(cfg, &groups, DType::F32)?;
    let pre = load_required(run_dir, Stage::Pretrain.name())?;
    models.load_group(Group::Backbone, &pre)?;
    models.load_group(Group::Semantic, &pre)?;
    let con = load_required(run_dir, Stage::Connector.name())?;
    models.load_group(Group::Instruction, &con)?;
    models.load_group(Group::Connector, &con)?;
    models.load_group(Group::Ipcn, &load_required(run_dir, ipcn_tag)?)?;
    if id_path.exists() {
        models.load_group(Group::Identity, &Checkpoint::load(&id_path)?)?;
    }
    Ok(models)
}

/// Training data: one-to-many scenes for diffusion stages, editing triples for the connector.
pub struct StageData<'a> {
    pub scenes: &'a Dataset,
    pub edits: Option<&'a Dataset>,
}

/// Randomness of one training step, reproducible from `(seed, stream, step)`.
pub fn step_rng(seed: u64, stream: u64, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x57A6E, stream, step as u64]))
}

/// Reference and target record indices for one diffusion batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub refs: Vec<Vec<usize>>,
    pub targets: Vec<usize>,
}

/// One-to-one stages pair each image with itself; one-to-many stages draw
/// `N` in `1..=min(4, K-1)` per batch and distinct scenes of one identity.
pub fn sample_pairs(ds: &Dataset, stage: Stage, batch: usize, rng: &mut impl Rng) -> Result<PairBatch> {
    let groups = ds.groups(Split::Train);
    if groups.is_empty() {
        return Err(Error::InvalidInput("dataset has no training groups".into()));
    }
    let mut out = PairBatch { refs: Vec::new(), targets: Vec::new() };
    if stage == Stage::Warmup1to1 {
        for _ in 0..batch {
            let g = &groups[rng.random_range(0..groups.len())];
            let i = g[rng.random_range(0..g.len())];
            out.refs.push(vec![i]);
            out.targets.push(i);
        }
        return Ok(out);
    }
    let k = groups.iter().map(Vec::len).min().unwrap_or(0);
    if k < 2 {
        return Err(Error::InvalidInput("one-to-many pairs need at least two scenes per identity".into()));
    }
    let n = rng.random_range(1..=(k - 1).min(4));
    for _ in 0..batch {
        let mut g = groups[rng.random_range(0..groups.len())].clone();
        g.shuffle(rng);
        out.refs.push(g[..n].to_vec());
        out.targets.push(g[n]);
    }
    Ok(out)
}

fn stack_images(ds: &Dataset, idx: &[usize], pose: bool, models: &Models) -> Result<Tensor> {
    let imgs: Vec<&Image> = idx.iter().map(|&i| if pose { &ds.pose_maps[i] } else { &ds.images[i] }).collect();
    Ok(Image::batch_tensor(&imgs, &models.device)?.to_dtype(models.dtype)?)
}

/// `(B, h, w, c)` latents of a batch of images.
fn latent_grid(images: &Tensor, cfg: &RunConfig) -> Result<Tensor> {
    let b = images.dim(0)?;
    let s = cfg.latent_side();
    Ok(encode_tensor(images, cfg.p)?.reshape((b, s, s, crate::codec::latent_channels(cfg.p)))?)
}

struct StepLosses {
    total: Tensor,
    report: LossReport,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn pretrain_step(models: &Models, ds: &Dataset, rng: &mut ChaCha8Rng, step: usize) -> Result<StepLosses> {
    let cfg = &models.cfg;
    let groups = ds.groups(Split::Train);
    let (mut targets, mut others, mut captions) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..cfg.batch {
        let g = &groups[rng.random_range(0..groups.len())];
        let t = rng.random_range(0..g.len());
        let o = (t + rng.random_range(1..g.len())) % g.len();
        targets.push(g[t]);
        others.push(g[o]);
        let cap = &ds.records[g[t]].caption;
        captions.push(if rng.random_bool(0.5) { cap.clone() } else { scene_prompt(cap) });
    }
    let backbone = models.backbone()?;
    let sem = models.semantic()?.encode(&stack_images(ds, &others, false, models)?)?;
    // Sometimes drop the semantic tokens so captions alone also steer generation.
    let keep: Vec<f64> = (0..cfg.batch).map(|_| if rng.random_bool(0.15) { 0.0 } else { 1.0 }).collect();
    let keep = Tensor::from_vec(keep, (cfg.batch, 1, 1), &models.device)?.to_dtype(models.dtype)?;
    let sem_tokens = sem.tokens.broadcast_mul(&keep)?;
    let cap = backbone.embed_captions(&Models::tokens(&captions))?;
    let pooled = cap.mean(1)?;
    let zero = Tensor::zeros((cfg.batch, 1, cfg.text_dim), models.dtype, &models.device)?;
    let text = Tensor::cat(&[&cap, &sem_tokens, &zero], 1)?;

    // Place the generated region where later stages put it, past 0..=4 references.
    let s = cfg.latent_side();
    let k = rng.random_range(0..=4usize);
    let positions = assign_positions(s, &vec![s; k], Some(s), cfg.backbone().max_positions)?;
    let positions = target_only(&positions, k * s, s, s);

    let x0 = encode_tensor(&stack_images(ds, &targets, false, models)?, cfg.p)?;
    let eps = randn(rng, x0.dims(), models.dtype, &models.device)?;
    let taus: Vec<f64> = (0..cfg.batch).map(|_| rng.random_range(0.0..=1.0)).collect();
    let xt = noise_canvas(&x0, &eps, &taus)?;
    let pred = backbone.forward(&xt, &positions, &text, &pooled, &taus)?;
    let l = equ_loss(&pred, &eps, &x0, None)?;
    let v = scalar(&l)?;
    Ok(StepLosses {
        total: l,
        report: LossReport { step, l_equ: v, l_id: 0.0, l_total: v, l_recon: None, l_gen: Some(v) },
    })
}

/// Positions of the rightmost `w` columns of an `h`-row layout grid.
fn target_only(grid: &PositionGrid, col0: usize, h: usize, w: usize) -> PositionGrid {
    let width = grid.len() / h;
    let mut out = PositionGrid { rows: Vec::with_capacity(h * w), cols: Vec::with_capacity(h * w) };
    for r in 0..h {
        for c in col0..col0 + w {
            out.rows.push(grid.rows[r * width + c]);
            out.cols.push(grid.cols[r * width + c]);
        }
    }
    out
}

fn identity_step(models: &Models, ds: &Dataset, rng: &mut ChaCha8Rng, step: usize) -> Result<StepLosses> {
    let cfg = &models.cfg;
    let train: Vec<usize> = (0..ds.len()).filter(|&i| ds.records[i].split == Split::Train).collect();
    let idx: Vec<usize> = (0..cfg.batch).map(|_| train[rng.random_range(0..train.len())]).collect();
    let labels: Vec<[u8; 5]> =
        idx.iter().map(|&i| identity_labels(&IdentitySpec::from_seed(ds.seed, ds.records[i].identity_id))).collect();
    let images = stack_images(ds, &idx, false, models)?;
    // Mild pixel noise so the encoder also copes with imperfect generations.
    let sigma = rng.random_range(0.0..0.15);
    let noise = (randn(rng, images.dims(), models.dtype, &models.device)? * sigma)?;
    let images = (images + noise)?.clamp(0.0, 1.0)?;
    let l = models.identity()?.loss(&images, &labels)?;
    let v = scalar(&l)?;
    Ok(StepLosses { total: l, report: LossReport { step, l_equ: v, l_id: 0.0, l_total: v, l_recon: None, l_gen: None } })
}

fn connector_step(models: &Models, edits: &Dataset, rng: &mut ChaCha8Rng, step: usize) -> Result<StepLosses> {
    let triples = edits.triples(Split::Train);
    if triples.is_empty() {
        return Err(Error::InvalidInput("no editing triples in the training split".into()));
    }
    let pick: Vec<&(Vec<String>, usize, usize)> =
        (0..models.cfg.batch).map(|_| &triples[rng.random_range(0..triples.len())]).collect();
    let l = connector_batch_loss(models, edits, &pick)?;
    let v = scalar(&l)?;
    Ok(StepLosses { total: l, report: LossReport { step, l_equ: v, l_id: 0.0, l_total: v, l_recon: None, l_gen: None } })
}

fn connector_batch_loss(models: &Models, edits: &Dataset, pick: &[&(Vec<String>, usize, usize)]) -> Result<Tensor> {
    let instr: Vec<Vec<String>> = pick.iter().map(|t| t.0.clone()).collect();
    let src = stack_images(edits, &pick.iter().map(|t| t.1).collect::<Vec<_>>(), false, models)?;
    let dst = stack_images(edits, &pick.iter().map(|t| t.2).collect::<Vec<_>>(), false, models)?;
    let sem = models.semantic()?;
    let key = sem.encode(&src)?;
    let target = sem.encode(&dst)?.tokens;
    let query = models.instruction()?.encode(&Models::tokens(&instr), &src)?;
    let value = models.connector()?.connect(&query, &key)?;
    crate::connector::connector_loss(&value, &target)
}

/// Mean connector loss over the first `count` editing triples of `split`.
pub fn connector_eval_loss(models: &Models, edits: &Dataset, split: Split, count: usize) -> Result<f64> {
    let triples = edits.triples(split);
    let pick: Vec<_> = triples.iter().take(count).collect();
    if pick.is_empty() {
        return Err(Error::InvalidInput(format!("no editing triples in the {} split", split.as_str())));
    }
    let mut total = 0.0;
    for chunk in pick.chunks(models.cfg.batch.max(1)) {
        total += scalar(&connector_batch_loss(models, edits, chunk)?)? * chunk.len() as f64;
    }
    Ok(total / pick.len() as f64)
}

/// Conditioning for a canvas that does not change across timesteps.
pub struct CanvasConditions {
    pub text: Tensor,
    pub pooled: Tensor,
    /// Clean reference latents `(B, h, W_ref, c)` for the dense path.
    pub refs: Option<Tensor>,
    /// Raw sparse maps `(B, 3, S, S)`.
    pub poses: Option<Tensor>,
    pub positions: PositionGrid,
    pub alpha: f64,
    pub beta: f64,
}

impl CanvasConditions {
    /// Builds the text stream from `prompts` and the first reference image,
    /// and keeps the dense and sparse inputs the config enables.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        models: &Models,
        prompts: &[Vec<String>],
        first_ref: Option<&Tensor>,
        refs: Option<Tensor>,
        poses: Option<Tensor>,
        positions: PositionGrid,
        alpha: f64,
        beta: f64,
    ) -> Result<Self> {
        let cfg = &models.cfg;
        let instr: Vec<Vec<String>> = prompts.iter().map(|p| generation_instruction(p)).collect();
        let (text, pooled) =
            models.text_stream(&Models::tokens(prompts), first_ref, &Models::tokens(&instr), cfg.use_global)?;
        Ok(Self {
            text,
            pooled,
            refs: refs.filter(|_| cfg.use_dense),
            poses: poses.filter(|_| cfg.use_sparse),
            positions,
            alpha,
            beta,
        })
    }
}

/// Full-pipeline velocity for a `(B, h, W, c)` noisy canvas.
pub fn pipeline_velocity(models: &Models, xt: &Tensor, cond: &CanvasConditions, taus: &[f64]) -> Result<Tensor> {
    let (b, h, w, c) = xt.dims4()?;
    let backbone = models.backbone()?;
    let emb = backbone.condition(&cond.text, &cond.pooled, taus)?;
    let residuals = models.ipcn()?.control_branch_forward(
        xt,
        &cond.positions,
        &emb,
        cond.refs.as_ref(),
        cond.poses.as_ref(),
        cond.alpha,
        cond.beta,
    )?;
    let pred = backbone.forward_conditioned(&xt.reshape((b, h * w, c))?, &cond.positions, &emb, Some(&residuals))?;
    Ok(pred.reshape((b, h, w, c))?)
}

/// One diffusion training batch.
pub struct CanvasBatch {
    /// Clean canvas `(B, h, W, c)`, references first.
    pub x0: Tensor,
    /// Clean reference latents `(B, h, W_ref, c)`.
    pub refs: Tensor,
    /// One noise draw for the whole canvas.
    pub eps: Tensor,
    pub taus: Vec<f64>,
    pub ref_images: Tensor,
    pub cond: CanvasConditions,
}

pub fn build_canvas_batch(models: &Models, ds: &Dataset, pairs: &PairBatch, rng: &mut ChaCha8Rng) -> Result<CanvasBatch> {
    let cfg = &models.cfg;
    let n = pairs.refs[0].len();
    let s = cfg.latent_side();
    let mut ref_lat = Vec::with_capacity(n);
    for j in 0..n {
        let idx: Vec<usize> = pairs.refs.iter().map(|r| r[j]).collect();
        ref_lat.push(latent_grid(&stack_images(ds, &idx, false, models)?, cfg)?);
    }
    let refs = Tensor::cat(&ref_lat, 2)?;
    let target = latent_grid(&stack_images(ds, &pairs.targets, false, models)?, cfg)?;
    let x0 = Tensor::cat(&[&refs, &target], 2)?;
    let eps = randn(rng, x0.dims(), models.dtype, &models.device)?;
    let taus = (0..pairs.targets.len()).map(|_| rng.random_range(0.0..=1.0)).collect();
    let positions = assign_positions(s, &vec![s; n], Some(s), cfg.backbone().max_positions)?;
    let prompts: Vec<Vec<String>> = pairs.targets.iter().map(|&t| scene_prompt(&ds.records[t].caption)).collect();
    let first: Vec<usize> = pairs.refs.iter().map(|r| r[0]).collect();
    let ref_images = stack_images(ds, &first, false, models)?;
    let poses = stack_images(ds, &pairs.targets, true, models)?;
    let cond = CanvasConditions::new(
        models,
        &prompts,
        Some(&ref_images),
        Some(refs.clone()),
        Some(poses),
        positions,
        cfg.alpha,
        cfg.beta,
    )?;
    Ok(CanvasBatch { x0, refs, eps, taus, ref_images, cond })
}

fn diffusion_step(
    models: &Models,
    ds: &Dataset,
    stage: Stage,
    id_active: bool,
    rng: &mut ChaCha8Rng,
    step: usize,
) -> Result<StepLosses> {
    let cfg = &models.cfg;
    let pairs = sample_pairs(ds, stage, cfg.batch, rng)?;
    let batch = build_canvas_batch(models, ds, &pairs, rng)?;
    let (b, _, w, c) = batch.x0.dims4()?;
    let s = cfg.latent_side();
    let w_ref = w - s;
    let equivariant = stage == Stage::Equivariant;

    let xt = if equivariant {
        noise_canvas(&batch.x0, &batch.eps, &batch.taus)?
    } else {
        // References stay clean; only the target segment is noised.
        let tgt = noise_canvas(&batch.x0.narrow(2, w_ref, s)?, &batch.eps.narrow(2, w_ref, s)?, &batch.taus)?;
        Tensor::cat(&[&batch.refs, &tgt], 2)?
    };
    let pred = pipeline_velocity(models, &xt, &batch.cond, &batch.taus)?;

    let mut cols = vec![if equivariant { 1.0 } else { 0.0 }; w_ref];
    cols.extend(vec![1.0; s]);
    let mask = Tensor::from_vec(cols, (1, 1, w, 1), &models.device)?.to_dtype(models.dtype)?;
    let l_equ = equ_loss(&pred, &batch.eps, &batch.x0, Some(&mask))?;
    let target_cols = |t: &Tensor| t.narrow(2, w_ref, s);
    let l_gen = scalar(&equ_loss(&target_cols(&pred)?, &target_cols(&batch.eps)?, &target_cols(&batch.x0)?, None)?)?;
    let l_recon = if equivariant {
        let r = |t: &Tensor| t.narrow(2, 0, w_ref);
        Some(scalar(&equ_loss(&r(&pred)?, &r(&batch.eps)?, &r(&batch.x0)?, None)?)?)
    } else {
        None
    };

    let (total, l_id_v) = if id_active {
        let tau = per_row(&batch.taus, &xt)?;
        let x0_hat = (target_cols(&xt)? - target_cols(&pred)?.broadcast_mul(&tau)?)?;
        let images = decode_tokens(&x0_hat.reshape((b, s * s, c))?, s, s, cfg.p)?;
        let ident = models.identity()?;
        let z_gen = ident.embed(&images)?;
        let z_ref = ident.embed(&batch.ref_images)?.detach();
        let l_id = id_loss(&z_gen, &z_ref)?;
        ((&l_equ + (&l_id * cfg.lambda)?)?, scalar(&l_id)?)
    } else {
        (l_equ.clone(), 0.0)
    };
    Ok(StepLosses {
        report: LossReport {
            step,
            l_equ: scalar(&l_equ)?,
            l_id: l_id_v,
            l_total: scalar(&total)?,
            l_recon,
            l_gen: Some(l_gen),
        },
        total,
    })
}

/// Groups a stage loads, with their trainability.
fn stage_groups(stage: Stage, with_identity: bool) -> Vec<(Group, bool)> {
    match stage {
        Stage::Pretrain => vec![(Group::Backbone, true), (Group::Semantic, true)],
        Stage::Identity => vec![(Group::Identity, true)],
        // The backbone is deliberately absent: only the semantic encoder supplies targets.
        Stage::Connector => vec![(Group::Semantic, false), (Group::Instruction, true), (Group::Connector, true)],
        _ => {
            let mut g = vec![
                (Group::Backbone, false),
                (Group::Semantic, false),
                (Group::Instruction, false),
                (Group::Connector, false),
                (Group::Ipcn, true),
            ];
            if with_identity {
                g.push((Group::Identity, false));
            }
            g
        }
    }
}

fn write_curve(path: &Path, stage: Stage, curve: &[LossReport], probes: &[(usize, f64)]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut s = String::new();
    if stage.is_diffusion() || stage == Stage::Pretrain {
        s.push_str("step,l_equ,l_id,l_total,l_recon,l_gen\n");
        for r in curve {
            let opt = |v: Option<f64>| v.map(|x| format!("{x:.8}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{:.8},{:.8},{:.8},{},{}",
                r.step,
                r.l_equ,
                r.l_id,
                r.l_total,
                opt(r.l_recon),
                opt(r.l_gen)
            );
        }
    } else {
        s.push_str("step,loss\n");
        for r in curve {
            let _ = writeln!(s, "{},{:.8}", r.step, r.l_total);
        }
    }
    std::fs::write(path, s).map_err(io_err(path))?;
    if !probes.is_empty() {
        let mut p = String::from("step,probe\n");
        for (step, v) in probes {
            let _ = writeln!(p, "{step},{v:.8}");
        }
        let pp = probe_path(path);
        std::fs::write(&pp, p).map_err(io_err(&pp))?;
    }
    Ok(())
}

/// Probe values live next to the loss curve as `{tag}_probe.csv`.
pub fn probe_path(curve_path: &Path) -> PathBuf {
    let stem = curve_path.file_stem().and_then(|s| s.to_str()).unwrap_or("curve");
    curve_path.with_file_name(format!("{stem}_probe.csv"))
}

/// Probe values logged before `upto` (inclusive bound when `inclusive`).
pub fn read_probes(curve_path: &Path, upto: usize, inclusive: bool) -> Vec<(usize, f64)> {
    let Ok(text) = std::fs::read_to_string(probe_path(curve_path)) else { return Vec::new() };
    text.lines()
        .skip(1)
        .filter_map(|l| {
            let (a, b) = l.split_once(',')?;
            Some((a.parse().ok()?, b.parse().ok()?))
        })
        .filter(|&(s, _): &(usize, f64)| s < upto || (inclusive && s == upto))
        .collect()
}

/// Runs (or resumes) one training stage and writes its checkpoint and loss curve.
pub fn train_stage(cfg: &RunConfig, stage: Stage, data: &StageData, opts: &TrainOptions) -> Result<StageOutcome> {
    let run_dir = &opts.run_dir;
    let id_path = checkpoint_path(run_dir, Stage::Identity.name());
    let id_active = stage.is_diffusion() && opts.use_id_loss && cfg.lambda > 0.0 && id_path.exists();
    let models = Models::build(cfg, &stage_groups(stage, id_active), DType::F32)?;

    // Prerequisites.
    match stage {
        Stage::Pretrain | Stage::Identity => {}
        Stage::Connector => {
            if data.edits.is_none() {
                return Err(Error::InvalidInput("connector stage needs editing triples".into()));
            }
            models.load_group(Group::Semantic, &load_required(run_dir, Stage::Pretrain.name())?)?;
        }
        _ => {
            let pre = load_required(run_dir, Stage::Pretrain.name())?;
            models.load_group(Group::Backbone, &pre)?;
            models.load_group(Group::Semantic, &pre)?;
            let con = load_required(run_dir, Stage::Connector.name())?;
            models.load_group(Group::Instruction, &con)?;
            models.load_group(Group::Connector, &con)?;
            if id_active {
                models.load_group(Group::Identity, &Checkpoint::load(&id_path)?)?;
            }
            match &opts.init_tag {
                Some(tag) => models.load_group(Group::Ipcn, &load_required(run_dir, tag)?)?,
                None => {
                    init_branch_from_backbone(models.store(Group::Ipcn)?, "", models.store(Group::Backbone)?, "", cfg.n)?;
                }
            }
        }
    }

    let vars = models.trainable_vars();
    let mut opt = AdamW::new(vars, AdamWParams { lr: cfg.lr, ..Default::default() })?;
    let ck_path = checkpoint_path(run_dir, &opts.tag);
    let curve_path = run_dir.join("curves").join(format!("{}.csv", opts.tag));
    let mut curve = Vec::new();
    let mut probes = Vec::new();
    let mut start = 0usize;
    if opts.resume && ck_path.exists() {
        let ck = Checkpoint::load(&ck_path)?;
        if ck.stage != stage.name() {
            return Err(Error::Checkpoint(format!("{} holds stage `{}`, not `{}`", ck_path.display(), ck.stage, stage.name())));
        }
        for g in models.trainable_groups() {
            models.load_group(*g, &ck)?;
        }
        opt.load_state(&ck, "optim.")?;
        start = ck.step as usize;
        curve = read_curve(&curve_path, start)?;
        probes = read_probes(&curve_path, start, false);
    }

    let frozen: Vec<Group> =
        models.loaded_groups().into_iter().filter(|g| !models.trainable_groups().contains(g)).collect();
    let checksums = |models: &Models| -> Result<BTreeMap<String, String>> {
        frozen.iter().map(|g| Ok((g.name().to_string(), models.checksum(*g)?))).collect()
    };
    let frozen_before = checksums(&models)?;

    let save = |step: usize, opt: &AdamW| -> Result<()> {
        let mut ck = Checkpoint::new(stage.name(), step as u64, &cfg.to_toml());
        for g in models.trainable_groups() {
            models.save_group(*g, &mut ck)?;
        }
        opt.save_state(&mut ck, "optim.")?;
        ck.save(&ck_path)
    };

    for step in start..opts.iterations {
        if let (Some(probe), true) = (&opts.probe, opts.probe_every > 0 && step % opts.probe_every == 0) {
            probes.push((step, probe(&models)?));
        }
        let mut rng = step_rng(cfg.seed, opts.rng_stream, step);
        let out = match stage {
            Stage::Pretrain => pretrain_step(&models, data.scenes, &mut rng, step)?,
            Stage::Identity => identity_step(&models, data.scenes, &mut rng, step)?,
            Stage::Connector => connector_step(&models, data.edits.expect("checked above"), &mut rng, step)?,
            _ => diffusion_step(&models, data.scenes, stage, id_active, &mut rng, step)?,
        };
        if !out.report.l_total.is_finite() {
            return Err(Error::NonFinite(format!("{} loss at step {step}", stage.name())));
        }
        opt.step(&out.total.backward()?)?;
        if opts.log_every > 0 && (step % opts.log_every == 0 || step + 1 == opts.iterations) {
            eprintln!(
                "[{}] step {step}: l_equ {:.5} l_id {:.5} l_total {:.5}",
                opts.tag, out.report.l_equ, out.report.l_id, out.report.l_total
            );
        }
        curve.push(out.report);
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < opts.iterations {
            save(step + 1, &opt)?;
            write_curve(&curve_path, stage, &curve, &probes)?;
        }
    }
    if let (Some(probe), true) = (&opts.probe, opts.probe_every > 0) {
        probes.push((opts.iterations, probe(&models)?));
    }
    let frozen_after = checksums(&models)?;
    if frozen_after != frozen_before {
        return Err(Error::InvalidInput(format!("frozen parameters changed during stage `{}`", stage.name())));
    }
    save(opts.iterations.max(start), &opt)?;
    write_curve(&curve_path, stage, &curve, &probes)?;
    Ok(StageOutcome {
        checkpoint: ck_path,
        curve_path,
        curve,
        probes,
        frozen_before,
        frozen_after,
        id_loss_active: id_active,
    })
}

/// Reads the rows of an earlier run's curve below `upto`.
fn read_curve(path: &Path, upto: usize) -> Result<Vec<LossReport>> {
    let Ok(text) = std::fs::read_to_string(path) else { return Ok(Vec::new()) };
    let mut out = Vec::new();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let num = |i: usize| f.get(i).and_then(|v| v.parse::<f64>().ok());
        let step = num(0).unwrap_or(0.0) as usize;
        if step >= upto {
            break;
        }
        out.push(if header.len() > 2 {
            LossReport {
                step,
                l_equ: num(1).unwrap_or(f64::NAN),
                l_id: num(2).unwrap_or(0.0),
                l_total: num(3).unwrap_or(f64::NAN),
                l_recon: num(4),
                l_gen: num(5),
            }
        } else {
            let v = num(1).unwrap_or(f64::NAN);
            LossReport { step, l_equ: v, l_id: 0.0, l_total: v, l_recon: None, l_gen: None }
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_slice(v, (1, v.len()), &Device::Cpu).unwrap()
    }

    #[test]
    fn noise_canvas_oracles() {
        let x0 = t(&[0.2]);
        let eps = t(&[1.0]);
        let at = |tau: f64| noise_canvas(&x0, &eps, &[tau]).unwrap().to_vec2::<f64>().unwrap()[0][0];
        assert_eq!(at(0.0), 0.2);
        assert_eq!(at(1.0), 1.0);
        assert!((at(0.25) - 0.4).abs() < 1e-15);
        assert!(noise_canvas(&x0, &eps, &[1.5]).is_err());
        assert!(noise_canvas(&x0, &t(&[1.0, 2.0]), &[0.5]).is_err());
    }

    #[test]
    fn equ_loss_oracles() {
        let eps = t(&[1.0]);
        let zr = t(&[0.25]);
        assert_eq!(scalar(&equ_loss(&t(&[0.5]), &eps, &zr, None).unwrap()).unwrap(), 0.0625);
        let exact = (&eps - &zr).unwrap();
        assert_eq!(scalar(&equ_loss(&exact, &eps, &zr, None).unwrap()).unwrap(), 0.0);
        // With Z_r = 0 the target is the noise itself.
        let zero = t(&[0.0]);
        assert_eq!(scalar(&equ_loss(&eps, &eps, &zero, None).unwrap()).unwrap(), 0.0);
        let mask = t(&[0.0, 1.0]);
        let l = equ_loss(&t(&[9.0, 0.5]), &t(&[1.0, 1.0]), &t(&[0.0, 0.25]), Some(&mask)).unwrap();
        assert_eq!(scalar(&l).unwrap(), 0.0625);
    }

    #[test]
    fn id_loss_endpoints() {
        let e = |a: f64, b: f64| t(&[a, b]);
        assert!(scalar(&id_loss(&e(1.0, 0.0), &e(1.0, 0.0)).unwrap()).unwrap().abs() < 1e-15);
        assert_eq!(scalar(&id_loss(&e(1.0, 0.0), &e(0.0, 1.0)).unwrap()).unwrap(), 1.0);
        assert_eq!(scalar(&id_loss(&e(1.0, 0.0), &e(-1.0, 0.0)).unwrap()).unwrap(), 2.0);
        assert!(id_loss(&e(0.0, 0.0), &e(1.0, 0.0)).is_err());
    }

    #[test]
    fn total_loss_oracles() {
        assert!((total_loss(1.0, 0.5, 0.2).unwrap() - 1.1).abs() < 1e-15);
        assert_eq!(total_loss(0.7, 3.0, 0.0).unwrap(), 0.7);
        assert_eq!(total_loss(0.7, 0.0, 5.0).unwrap(), 0.7);
        assert!(total_loss(f64::NAN, 0.0, 0.2).is_err());
    }

    #[test]
    fn stage_names_round_trip() {
        for s in [Stage::Pretrain, Stage::Identity, Stage::Connector, Stage::Warmup1to1, Stage::Main1toMany, Stage::Equivariant] {
            assert_eq!(Stage::parse(s.name()).unwrap(), s);
        }
        assert!(Stage::parse("finetune").is_err());
    }

    #[test]
    fn pair_sampling_follows_the_stage() {
        let counts = crate::data::DatasetCounts { train_identities: 5, test_identities: 2, scenes_per_identity: 4, image_size: 32 };
        let ds = Dataset::generate(3, counts, crate::data::PairingMode::OneToMany).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let p = sample_pairs(&ds, Stage::Warmup1to1, 8, &mut rng).unwrap();
            for (r, t) in p.refs.iter().zip(&p.targets) {
                assert_eq!(r, &vec![*t]);
                assert_eq!(ds.records[r[0]].image_path, ds.records[*t].image_path);
            }
            let p = sample_pairs(&ds, Stage::Main1toMany, 8, &mut rng).unwrap();
            let n = p.refs[0].len();
            assert!((1..=3).contains(&n));
            for (r, t) in p.refs.iter().zip(&p.targets) {
                assert_eq!(r.len(), n);
                assert!(!r.contains(t));
                assert!(r.iter().all(|&i| ds.records[i].identity_id == ds.records[*t].identity_id));
                assert!(r.iter().all(|&i| ds.records[i].split == Split::Train));
            }
        }
    }
}
