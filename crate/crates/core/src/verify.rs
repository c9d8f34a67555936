//! Self-checks run by `remix verify` and the acceptance suite: the zero-init
//! no-op, finite-difference gradient checks and the loss identities.

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{assign_positions, Backbone, BackboneConfig};
use crate::codec::{encode_tensor, latent_channels, Image};
use crate::config::RunConfig;
use crate::connector::{connector_loss, Connector, ConnectorConfig};
use crate::data::{caption, derive_seed, render, IdentitySpec, SceneSpec};
use crate::encoders::{InstructionEmbedding, SemanticFeatures};
use crate::error::Result;
use crate::ipcn::init_branch_from_backbone;
use crate::models::{scene_prompt, Group, Models};
use crate::nn::{randn, ParamBuilder, ParamStore};
use crate::training::{equ_loss, id_loss, pipeline_velocity, total_loss, CanvasConditions};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.to_string(), passed, detail }
    }
}

/// Fresh models whose non-adapter weights are perturbed away from their own
/// zero initializations, with the control branch copied from the backbone.
fn noop_models(cfg: &RunConfig, seed: u64) -> Result<Models> {
    let groups: Vec<(Group, bool)> =
        [Group::Backbone, Group::Semantic, Group::Instruction, Group::Connector, Group::Ipcn].map(|g| (g, false)).to_vec();
    let models = Models::build(cfg, &groups, DType::F32)?;
    for (i, g) in [Group::Backbone, Group::Semantic, Group::Instruction, Group::Connector].iter().enumerate() {
        models.store(*g)?.perturb(derive_seed(&[seed, i as u64]), 0.05)?;
    }
    init_branch_from_backbone(models.store(Group::Ipcn)?, "", models.store(Group::Backbone)?, "", cfg.n)?;
    Ok(models)
}

struct NoopInput {
    canvas: Tensor,
    cond: CanvasConditions,
    taus: Vec<f64>,
}

fn noop_input(models: &Models, rng: &mut ChaCha8Rng) -> Result<NoopInput> {
    let cfg = &models.cfg;
    let (s, c) = (cfg.latent_side(), latent_channels(cfg.p));
    let b = 2;
    let n = rng.random_range(0..=4usize);
    let mut prompts = Vec::new();
    let mut refs: Vec<Vec<Image>> = vec![Vec::new(); n];
    let mut poses = Vec::new();
    for _ in 0..b {
        let ident = IdentitySpec::from_seed(rng.random(), rng.random_range(0..1000));
        let scene = SceneSpec::random(rng);
        let (_, pose, _) = render(&ident, &scene, cfg.image_size)?;
        prompts.push(scene_prompt(&caption(&ident, &scene)));
        poses.push(pose);
        for r in refs.iter_mut() {
            r.push(render(&ident, &SceneSpec::random(rng), cfg.image_size)?.0);
        }
    }
    let dev = &models.device;
    let batch = |imgs: &[Image]| -> Result<Tensor> { Image::batch_tensor(&imgs.iter().collect::<Vec<_>>(), dev) };
    let ref_lat = refs
        .iter()
        .map(|r| Ok(encode_tensor(&batch(r)?, cfg.p)?.reshape((b, s, s, c))?))
        .collect::<Result<Vec<Tensor>>>()?;
    let first = if n > 0 { Some(batch(&refs[0])?) } else { None };
    let dense = if n > 0 { Some(Tensor::cat(&ref_lat, 2)?) } else { None };
    let positions = assign_positions(s, &vec![s; n], Some(s), cfg.backbone().max_positions)?;
    let alpha = rng.random_range(0.5..2.0);
    let beta = rng.random_range(0.5..2.0);
    let cond = CanvasConditions::new(models, &prompts, first.as_ref(), dense, Some(batch(&poses)?), positions, alpha, beta)?;
    let canvas = randn(rng, &[b, s, s * (n + 1), c], DType::F32, dev)?;
    let taus = (0..b).map(|_| rng.random_range(0.0..=1.0)).collect();
    Ok(NoopInput { canvas, cond, taus })
}

fn backbone_only(models: &Models, x: &NoopInput) -> Result<Tensor> {
    let (b, h, w, c) = x.canvas.dims4()?;
    let out = models.backbone()?.forward(&x.canvas.reshape((b, h * w, c))?, &x.cond.positions, &x.cond.text, &x.cond.pooled, &x.taus)?;
    Ok(out.reshape((b, h, w, c))?)
}

fn bits(t: &Tensor) -> Result<Vec<u32>> {
    Ok(t.flatten_all()?.to_vec1::<f32>()?.iter().map(|v| v.to_bits()).collect())
}

/// Full-pipeline and backbone-only forwards agree bit for bit at adapter
/// initialization, over `trials` random canvases, conditions and timesteps.
pub fn zero_init_noop(cfg: &RunConfig, trials: usize, seed: u64) -> Result<CheckOutcome> {
    let models = noop_models(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatched = 0;
    for _ in 0..trials {
        let x = noop_input(&models, &mut rng)?;
        let full = pipeline_velocity(&models, &x.canvas, &x.cond, &x.taus)?;
        if bits(&full)? != bits(&backbone_only(&models, &x)?)? {
            mismatched += 1;
        }
    }
    // The same comparison must fail once the adapters move off zero.
    models.store(Group::Ipcn)?.perturb(seed ^ 0xADA, 0.05)?;
    let x = noop_input(&models, &mut rng)?;
    let moved = bits(&pipeline_velocity(&models, &x.canvas, &x.cond, &x.taus)?)? != bits(&backbone_only(&models, &x)?)?;
    Ok(CheckOutcome::new(
        "zero-init no-op",
        mismatched == 0 && moved,
        format!("{mismatched}/{trials} mismatched at init; perturbed adapters change the output: {moved}"),
    ))
}

/// `max |a - n| / max |n|` over the compared entries.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = numeric.iter().map(|n| n.abs()).fold(0.0, f64::max).max(1e-12);
    diff / scale
}

fn set_entry(var: &Var, i: usize, value: f64) -> Result<()> {
    let mut data = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
    data[i] = value;
    var.set(&Tensor::from_vec(data, var.dims(), var.device())?)?;
    Ok(())
}

/// Analytic versus central-difference gradients of `loss` at sampled entries of `vars`.
fn fd_check(vars: &[Var], picks: &[(usize, usize)], loss: &dyn Fn() -> Result<Tensor>) -> Result<f64> {
    let grads = loss()?.backward()?;
    let h = 1e-6;
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for &(v, i) in picks {
        let var = &vars[v];
        let g = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?[i],
            None => 0.0,
        };
        let x0 = var.as_tensor().flatten_all()?.to_vec1::<f64>()?[i];
        set_entry(var, i, x0 + h)?;
        let up = loss()?.to_scalar::<f64>()?;
        set_entry(var, i, x0 - h)?;
        let down = loss()?.to_scalar::<f64>()?;
        set_entry(var, i, x0)?;
        analytic.push(g);
        numeric.push((up - down) / (2.0 * h));
    }
    Ok(relative_error(&analytic, &numeric))
}

fn all_entries(vars: &[Var]) -> Vec<(usize, usize)> {
    vars.iter().enumerate().flat_map(|(v, var)| (0..var.elem_count()).map(move |i| (v, i))).collect()
}

/// A few entries of every parameter array.
fn sampled_entries(vars: &[Var], per_var: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    vars.iter()
        .enumerate()
        .flat_map(|(v, var)| {
            let n = var.elem_count();
            (0..per_var.min(n)).map(|_| (v, rng.random_range(0..n))).collect::<Vec<_>>()
        })
        .collect()
}

fn store_vars(store: &ParamStore) -> Vec<Var> {
    store.vars()
}

pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Finite-difference checks of the losses and the backbone in double precision.
pub fn gradient_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut record = |name: &str, err: f64| {
        out.push(CheckOutcome::new(name, err <= GRAD_TOLERANCE, format!("relative error {err:.3e}")));
    };

    // Flow-matching loss on a 2x2x3 canvas, plain and with a column mask.
    let pred = Var::from_tensor(&randn(&mut rng, &[1, 2, 2, 3], DType::F64, &dev)?)?;
    let eps = randn(&mut rng, &[1, 2, 2, 3], DType::F64, &dev)?;
    let x0 = randn(&mut rng, &[1, 2, 2, 3], DType::F64, &dev)?;
    let mask = Tensor::new(&[0.0f64, 1.0], &dev)?.reshape((1, 1, 2, 1))?;
    let vars = vec![pred.clone()];
    record("equ_loss", fd_check(&vars, &all_entries(&vars), &|| equ_loss(pred.as_tensor(), &eps, &x0, None))?);
    record("equ_loss (masked)", fd_check(&vars, &all_entries(&vars), &|| equ_loss(pred.as_tensor(), &eps, &x0, Some(&mask)))?);

    let z_gen = Var::from_tensor(&randn(&mut rng, &[3, 8], DType::F64, &dev)?)?;
    let z_ref = randn(&mut rng, &[3, 8], DType::F64, &dev)?;
    let vars = vec![z_gen.clone()];
    record("id_loss", fd_check(&vars, &all_entries(&vars), &|| id_loss(z_gen.as_tensor(), &z_ref))?);

    // Connector with one joint block and one cross layer at width 16.
    let pb = ParamBuilder::new(seed, DType::F64, &dev);
    let ccfg = ConnectorConfig { d: 1, l: 1, feature_dim: 16, heads: 2 };
    let connector = Connector::new(&pb, &ccfg)?;
    let store = pb.finish();
    store.perturb(seed ^ 1, 0.2)?;
    let q_tokens = randn(&mut rng, &[2, 3, 16], DType::F64, &dev)?;
    let query = InstructionEmbedding { pooled: q_tokens.mean(1)?, tokens: q_tokens };
    let k_tokens = randn(&mut rng, &[2, 5, 16], DType::F64, &dev)?;
    let key = SemanticFeatures { pooled: k_tokens.mean(1)?, tokens: k_tokens };
    let target = randn(&mut rng, &[2, 5, 16], DType::F64, &dev)?;
    let vars = store_vars(&store);
    let picks = sampled_entries(&vars, 3, &mut rng);
    record("connector_loss", fd_check(&vars, &picks, &|| connector_loss(&connector.connect(&query, &key)?, &target))?);

    // Backbone forward (depth 2, width 32) through a fixed random projection.
    let bcfg = BackboneConfig {
        depth: 2,
        model_dim: 32,
        heads: 4,
        text_dim: 16,
        latent_channels: 12,
        vocab_size: 8,
        max_positions: (4, 8),
    };
    let pb = ParamBuilder::new(seed ^ 2, DType::F64, &dev);
    let backbone = Backbone::new(&pb, &bcfg)?;
    let store = pb.finish();
    store.perturb(seed ^ 3, 0.2)?;
    let positions = assign_positions(2, &[2], Some(2), bcfg.max_positions)?;
    let tokens = randn(&mut rng, &[2, positions.len(), 12], DType::F64, &dev)?;
    let text = randn(&mut rng, &[2, 4, 16], DType::F64, &dev)?;
    let pooled = randn(&mut rng, &[2, 16], DType::F64, &dev)?;
    let proj = randn(&mut rng, &[2, positions.len(), 12], DType::F64, &dev)?;
    let taus = [0.3, 0.8];
    let vars = store_vars(&store);
    let picks = sampled_entries(&vars, 3, &mut rng);
    record(
        "backbone_forward",
        fd_check(&vars, &picks, &|| Ok((backbone.forward(&tokens, &positions, &text, &pooled, &taus)? * &proj)?.sum_all()?))?,
    );
    Ok(out)
}

/// Closed-form loss identities.
pub fn loss_identities(seed: u64) -> Result<Vec<CheckOutcome>> {
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (e, i, lambda) = (rng.random_range(0.0..10.0), rng.random_range(0.0..2.0), rng.random_range(0.0..1.0));
        worst = worst.max((total_loss(e, i, lambda)? - (e + lambda * i)).abs());
    }
    out.push(CheckOutcome::new("l_total = l_equ + lambda l_id", worst <= 1e-6, format!("max deviation {worst:.1e}")));

    let eps = randn(&mut rng, &[2, 3, 4, 12], DType::F64, &dev)?;
    let x0 = randn(&mut rng, &[2, 3, 4, 12], DType::F64, &dev)?;
    let exact = equ_loss(&(&eps - &x0)?, &eps, &x0, None)?.to_scalar::<f64>()?;
    out.push(CheckOutcome::new("equ_loss at the exact target", exact == 0.0, format!("loss {exact:e}")));

    let v = |a: &[f64]| Tensor::new(a, &dev).map(|t| t.unsqueeze(0)).and_then(|t| t);
    let mut ends = Vec::new();
    for (a, b) in [([1.0, 0.0], [1.0, 0.0]), ([1.0, 0.0], [0.0, 1.0]), ([1.0, 0.0], [-1.0, 0.0])] {
        ends.push(id_loss(&v(&a)?, &v(&b)?)?.to_scalar::<f64>()?);
    }
    let ok = (ends[0] - 0.0).abs() <= 1e-12 && (ends[1] - 1.0).abs() <= 1e-12 && (ends[2] - 2.0).abs() <= 1e-12;
    out.push(CheckOutcome::new("id_loss endpoints", ok, format!("equal {:.3e}, orthogonal {:.6}, antipodal {:.6}", ends[0], ends[1], ends[2])));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::default();
        c.image_size = 16;
        c.p = 4;
        c.depth = 2;
        c.model_dim = 32;
        c.heads = 4;
        c.text_dim = 16;
        c.d = 1;
        c.l = 1;
        c.n = 2;
        c
    }

    #[test]
    fn noop_holds_at_init() {
        let o = zero_init_noop(&tiny(), 5, 3).unwrap();
        assert!(o.passed, "{}", o.detail);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for o in gradient_checks(7).unwrap() {
            assert!(o.passed, "{}: {}", o.name, o.detail);
        }
    }

    #[test]
    fn identities_hold() {
        for o in loss_identities(1).unwrap() {
            assert!(o.passed, "{}: {}", o.name, o.detail);
        }
    }

    #[test]
    fn relative_error_scale() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1.1, 2.0], &[1.0, 2.0]) - 0.05).abs() < 1e-12);
    }
}
