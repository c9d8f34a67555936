//! Stage plans for the full pipeline and the ablation variants built on it.

use std::path::Path;

use crate::config::RunConfig;
use crate::data::derive_seed;
use crate::error::{Error, Result};
use crate::eval::Variant;
use crate::training::{stage_complete, train_stage, Stage, StageData, StageOutcome, TrainOptions};

/// One stage run: what to train, from where, and under which tag.
#[derive(Debug, Clone)]
pub struct StagePlan {
    pub stage: Stage,
    pub tag: String,
    pub init_tag: Option<String>,
    pub iterations: usize,
    pub use_id_loss: bool,
    pub rng_stream: u64,
    pub cfg: RunConfig,
}

impl StagePlan {
    pub fn new(cfg: &RunConfig, stage: Stage) -> Self {
        Self {
            stage,
            tag: stage.name().to_string(),
            init_tag: stage.default_init().map(str::to_string),
            iterations: stage.default_iterations(cfg),
            use_id_loss: true,
            rng_stream: stage as u64,
            cfg: cfg.clone(),
        }
    }

    /// Trains the stage unless its checkpoint already reached `iterations`.
    pub fn run(&self, run_dir: &Path, data: &StageData, log_every: usize) -> Result<Option<StageOutcome>> {
        if stage_complete(run_dir, &self.tag, self.iterations) {
            return Ok(None);
        }
        let mut o = TrainOptions::new(&self.cfg, self.stage, run_dir);
        o.tag = self.tag.clone();
        o.init_tag = self.init_tag.clone();
        o.iterations = self.iterations;
        o.use_id_loss = self.use_id_loss;
        o.rng_stream = self.rng_stream;
        o.log_every = log_every;
        train_stage(&self.cfg, self.stage, data, &o).map(Some)
    }
}

/// Pretrain, identity, connector, warm-up and one-to-many stages.
pub fn base_plans(cfg: &RunConfig) -> Vec<StagePlan> {
    [Stage::Pretrain, Stage::Identity, Stage::Connector, Stage::Warmup1to1, Stage::Main1toMany]
        .into_iter()
        .map(|s| StagePlan::new(cfg, s))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Equivariant joint denoising against vanilla one-to-many training.
    Equivariant,
    /// Without the dense reference path.
    Dve,
    /// Without the sparse pose path.
    Sve,
    /// Without the identity loss.
    IdLoss,
}

impl Axis {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "equivariant" => Ok(Axis::Equivariant),
            "dve" => Ok(Axis::Dve),
            "sve" => Ok(Axis::Sve),
            "id_loss" | "id" => Ok(Axis::IdLoss),
            _ => Err(Error::InvalidInput(format!("unknown ablation axis `{s}` (equivariant, dve, sve, id_loss)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Axis::Equivariant => "equivariant",
            Axis::Dve => "dve",
            Axis::Sve => "sve",
            Axis::IdLoss => "id_loss",
        }
    }
}

/// Tag suffix and data stream for replicate `r` of the final stage.
fn replicate(r: u64) -> (String, u64) {
    if r == 0 {
        (String::new(), 1_000)
    } else {
        (format!("_r{r}"), derive_seed(&[1_000, r]))
    }
}

/// The equivariant final stage of the full model for replicate `r`.
pub fn full_final(cfg: &RunConfig, r: u64) -> StagePlan {
    let (suffix, stream) = replicate(r);
    StagePlan {
        tag: format!("equivariant{suffix}"),
        rng_stream: stream,
        ..StagePlan::new(cfg, Stage::Equivariant)
    }
}

/// Stages a variant chain needs beyond the base plans, and the variants to
/// benchmark, for one axis and replicate. Variants compared on an axis share
/// the data stream of their final stage.
pub fn axis_plans(cfg: &RunConfig, axis: Axis, r: u64) -> (Vec<StagePlan>, Vec<Variant>) {
    let (suffix, stream) = replicate(r);
    let full = full_final(cfg, r);
    let variant = |name: &str, plan: &StagePlan| Variant { name: name.to_string(), ipcn_tag: plan.tag.clone(), cfg: plan.cfg.clone() };
    match axis {
        Axis::Equivariant => {
            // Vanilla continues one-to-many training for as many steps as the equivariant stage.
            let vanilla = StagePlan {
                tag: format!("vanilla{suffix}"),
                init_tag: Some(Stage::Main1toMany.name().to_string()),
                iterations: cfg.equivariant_iters,
                rng_stream: stream,
                ..StagePlan::new(cfg, Stage::Main1toMany)
            };
            let vs = vec![variant("vanilla", &vanilla), variant("equivariant", &full)];
            (vec![vanilla, full], vs)
        }
        Axis::Dve | Axis::Sve => {
            let (prefix, label) = if axis == Axis::Dve { ("no_dve", "w/o DVE") } else { ("no_sve", "w/o SVE") };
            let mut vcfg = cfg.clone();
            if axis == Axis::Dve {
                vcfg.use_dense = false;
            } else {
                vcfg.use_sparse = false;
            }
            let warm = StagePlan { tag: format!("{prefix}_warmup_1to1"), ..StagePlan::new(&vcfg, Stage::Warmup1to1) };
            let main = StagePlan {
                tag: format!("{prefix}_main_1toMany"),
                init_tag: Some(warm.tag.clone()),
                ..StagePlan::new(&vcfg, Stage::Main1toMany)
            };
            let fin = StagePlan {
                tag: format!("{prefix}_equivariant{suffix}"),
                init_tag: Some(main.tag.clone()),
                rng_stream: stream,
                ..StagePlan::new(&vcfg, Stage::Equivariant)
            };
            let vs = vec![variant("full", &full), variant(label, &fin)];
            (vec![full, warm, main, fin], vs)
        }
        Axis::IdLoss => {
            let no_id = StagePlan {
                tag: format!("no_id_equivariant{suffix}"),
                use_id_loss: false,
                rng_stream: stream,
                ..StagePlan::new(cfg, Stage::Equivariant)
            };
            let vs = vec![variant("full", &full), variant("w/o ID loss", &no_id)];
            (vec![full, no_id], vs)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equivariant_axis_pairs_share_a_stream() {
        let cfg = RunConfig::default();
        let (plans, variants) = axis_plans(&cfg, Axis::Equivariant, 2);
        assert_eq!(plans.len(), 2);
        assert_eq!(plans[0].rng_stream, plans[1].rng_stream);
        assert_eq!(plans[0].iterations, plans[1].iterations);
        assert_eq!(plans[0].stage, Stage::Main1toMany);
        assert_eq!(plans[1].stage, Stage::Equivariant);
        assert_eq!(plans[0].init_tag, plans[1].init_tag);
        assert_eq!(variants[0].ipcn_tag, "vanilla_r2");
        assert_ne!(axis_plans(&cfg, Axis::Equivariant, 1).0[0].rng_stream, plans[0].rng_stream);
    }

    #[test]
    fn dve_axis_disables_only_the_dense_path() {
        let cfg = RunConfig::default();
        let (plans, variants) = axis_plans(&cfg, Axis::Dve, 0);
        assert!(plans[0].cfg.use_dense);
        assert!(plans[1..].iter().all(|p| !p.cfg.use_dense && p.cfg.use_sparse));
        assert_eq!(plans[3].init_tag.as_deref(), Some("no_dve_main_1toMany"));
        assert_eq!(variants[1].ipcn_tag, "no_dve_equivariant");
        assert!(Axis::parse("bogus").is_err());
    }
}
