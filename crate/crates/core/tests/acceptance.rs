//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Trained checkpoints are cached under the cargo target tmp dir, keyed by the
//! config's run key, so reruns only retrain what is missing. Set
//! `REMIX_ACCEPTANCE_ONLY=1,4,9` to run a subset and `REMIX_ACCEPTANCE_STRICT=1`
//! to exit nonzero when any criterion fails.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::DType;
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use remix_core::ablation::{axis_plans, base_plans, full_final, Axis, StagePlan};
use remix_core::checkpoint::Checkpoint;
use remix_core::config::RunConfig;
use remix_core::data::{derive_seed, Dataset, DatasetCounts, PairingMode, Split};
use remix_core::eval::{benchmark_cases, bundle_for, identity_similarity_batch, run_benchmark, write_table, MetricsTable};
use remix_core::inference::sample_batch;
use remix_core::models::{Group, Models};
use remix_core::training::{
    checkpoint_path, connector_eval_loss, load_inference_models, read_probes, stage_complete, train_stage, LossReport, Stage, StageData, TrainOptions,
};
use remix_core::verify::{gradient_checks, loss_identities, zero_init_noop};
use remix_core::Result;

const REPLICATES: u64 = 3;

/// Desk-scale dimensions and schedule used for every trained criterion.
fn desk_config() -> RunConfig {
    RunConfig {
        seed: 17,
        image_size: 32,
        p: 8,
        depth: 4,
        model_dim: 64,
        heads: 4,
        text_dim: 64,
        d: 2,
        l: 2,
        n: 2,
        lr: 1e-3,
        batch: 8,
        steps: 12,
        seeds: vec![0, 1, 2, 3, 4],
        pretrain_iters: 4000,
        identity_iters: 1500,
        connector_iters: 2000,
        warmup_iters: 300,
        main_iters: 1200,
        equivariant_iters: 400,
        checkpoint_every: 200,
        train_identities: 256,
        test_identities: 16,
        scenes: 6,
        bench_identities: 8,
        bench_prompts: 4,
        ..RunConfig::default()
    }
}

/// Criterion 7 runs this many steps past the one-to-many checkpoint.
const DYNAMICS_ITERS: usize = 1600;
const DYNAMICS_PROBE_EVERY: usize = 100;

struct Ctx {
    cfg: RunConfig,
    dir: PathBuf,
    scenes: Dataset,
    edits: Dataset,
    trained: bool,
}

impl Ctx {
    fn new() -> Result<Self> {
        let cfg = desk_config();
        cfg.validate()?;
        let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(format!("run-{}", cfg.run_key()));
        std::fs::create_dir_all(&dir).expect("cache dir");
        let counts = DatasetCounts {
            train_identities: cfg.train_identities,
            test_identities: cfg.test_identities,
            scenes_per_identity: cfg.scenes,
            image_size: cfg.image_size,
        };
        let scenes = Dataset::generate(cfg.seed, counts, PairingMode::OneToMany)?;
        let edits = Dataset::generate(cfg.seed, counts, PairingMode::EditingTriples)?;
        Ok(Self { cfg, dir, scenes, edits, trained: false })
    }

    fn data(&self, plan: &StagePlan) -> StageData<'_> {
        if plan.stage == Stage::Connector {
            StageData { scenes: &self.edits, edits: Some(&self.edits) }
        } else {
            StageData { scenes: &self.scenes, edits: None }
        }
    }

    fn run(&self, plans: &[StagePlan]) -> Result<()> {
        for p in plans {
            let t = Instant::now();
            if let Some(o) = p.run(&self.dir, &self.data(p), 0)? {
                let last = o.curve.last().map_or(f64::NAN, |r| r.l_total);
                eprintln!("  trained {} ({} steps, {:.0}s, final loss {last:.4})", p.tag, p.iterations, t.elapsed().as_secs_f64());
            }
        }
        Ok(())
    }

    /// Pretraining through one-to-many, shared by every trained criterion.
    fn ensure_base(&mut self) -> Result<()> {
        if !self.trained {
            self.run(&base_plans(&self.cfg))?;
            self.trained = true;
        }
        Ok(())
    }
}

type Outcome = Result<(bool, String)>;

fn criterion_1(ctx: &mut Ctx) -> Outcome {
    let t = Instant::now();
    let o = zero_init_noop(&ctx.cfg, 100, 11)?;
    let secs = t.elapsed().as_secs_f64();
    Ok((o.passed && secs < 60.0, format!("{} ({secs:.1}s)", o.detail)))
}

fn read_curve(path: &Path) -> Vec<LossReport> {
    let text = std::fs::read_to_string(path).unwrap_or_default();
    text.lines()
        .skip(1)
        .filter_map(|l| {
            let f: Vec<f64> = l.split(',').map(|v| v.parse().unwrap_or(f64::NAN)).collect();
            (f.len() >= 4).then(|| LossReport { step: f[0] as usize, l_equ: f[1], l_id: f[2], l_total: f[3], l_recon: None, l_gen: None })
        })
        .collect()
}

fn criterion_2(ctx: &mut Ctx) -> Outcome {
    let t = Instant::now();
    let ids = loss_identities(5)?;
    let mut detail: Vec<String> = ids.iter().map(|c| format!("{} {}", c.name, if c.passed { "ok" } else { "FAILED" })).collect();
    let mut ok = ids.iter().all(|c| c.passed);
    // Every logged step of a short equivariant run with the identity loss on.
    ctx.ensure_base()?;
    let tmp = tempfile::tempdir().expect("tempdir");
    for stage in ["pretrain", "connector", "identity", "main_1toMany"] {
        std::fs::create_dir_all(tmp.path().join("checkpoints")).expect("mkdir");
        std::fs::copy(checkpoint_path(&ctx.dir, stage), checkpoint_path(tmp.path(), stage)).expect("copy checkpoint");
    }
    let mut o = TrainOptions::new(&ctx.cfg, Stage::Equivariant, tmp.path());
    o.iterations = 30;
    let out = train_stage(&ctx.cfg, Stage::Equivariant, &StageData { scenes: &ctx.scenes, edits: None }, &o)?;
    let logged = read_curve(&out.curve_path);
    let worst = logged.iter().map(|r| (r.l_total - (r.l_equ + ctx.cfg.lambda * r.l_id)).abs()).fold(0.0, f64::max);
    let id_seen = logged.iter().all(|r| r.l_id > 0.0);
    ok &= out.id_loss_active && id_seen && logged.len() == 30 && worst <= 1e-6;
    detail.push(format!("{} logged steps, identity loss active {}, max |l_total - (l_equ + 0.2 l_id)| = {worst:.2e}", logged.len(), out.id_loss_active));
    let secs = t.elapsed().as_secs_f64();
    Ok((ok && secs < 60.0, format!("{} ({secs:.1}s)", detail.join("; "))))
}

fn criterion_3(_: &mut Ctx) -> Outcome {
    let t = Instant::now();
    let checks = gradient_checks(3)?;
    let secs = t.elapsed().as_secs_f64();
    let detail: Vec<String> = checks.iter().map(|c| format!("{} {}", c.name, c.detail)).collect();
    Ok((checks.iter().all(|c| c.passed) && secs < 300.0, format!("{} ({secs:.1}s)", detail.join("; "))))
}

fn run_property<S: Strategy>(cases: u32, strategy: S, check: impl Fn(S::Value) -> std::result::Result<(), String>) -> std::result::Result<(), String>
where
    S::Value: std::fmt::Debug,
{
    let mut runner = TestRunner::new(PropConfig { cases, failure_persistence: None, ..PropConfig::default() });
    runner
        .run(&strategy, |v| check(v).map_err(proptest::test_runner::TestCaseError::fail))
        .map_err(|e| e.to_string())
}

fn criterion_4(_: &mut Ctx) -> Outcome {
    let t = Instant::now();
    let codec = run_property(
        250,
        (1usize..5, 1usize..5, prop::sample::select(vec![1usize, 2, 4, 8]), any::<u64>()),
        |(h, w, p, seed)| common::codec_round_trip(h, w, p, seed),
    );
    let canvas = run_property(
        250,
        (1usize..5, prop::collection::vec(1usize..5, 1..5), prop::option::of(1usize..5), 1usize..13, any::<u64>()),
        |(h, widths, target, c, seed)| common::canvas_round_trip(h, &widths, target, c, seed),
    );
    let secs = t.elapsed().as_secs_f64();
    let detail = format!(
        "codec 250 cases: {}; canvas 250 cases: {} ({secs:.1}s)",
        codec.as_ref().map_or_else(|e| e.clone(), |_| "exact".into()),
        canvas.as_ref().map_or_else(|e| e.clone(), |_| "exact".into())
    );
    Ok((codec.is_ok() && canvas.is_ok() && secs < 60.0, detail))
}

fn criterion_9(_: &mut Ctx) -> Outcome {
    let t = Instant::now();
    let r = run_property(
        300,
        (1usize..9, prop::collection::vec(1usize..9, 1..5), 1usize..9),
        |(h, widths, target)| common::positions_disjoint(h, &widths, target),
    );
    let secs = t.elapsed().as_secs_f64();
    Ok((r.is_ok() && secs < 60.0, format!("300 layouts with 1-4 references: {} ({secs:.1}s)", r.err().unwrap_or_else(|| "disjoint, origin (h, sum w_ref)".into()))))
}

fn criterion_10(ctx: &mut Ctx) -> Outcome {
    ctx.ensure_base()?;
    let backbone_sum = |dir: &Path| -> Result<String> {
        let m = Models::build(&ctx.cfg, &[(Group::Backbone, false)], DType::F32)?;
        m.load_group(Group::Backbone, &Checkpoint::load(&checkpoint_path(dir, "pretrain"))?)?;
        m.checksum(Group::Backbone)
    };
    // A fresh smoke run in a scratch directory seeded with the pretrain checkpoint.
    let tmp = tempfile::tempdir().expect("tempdir");
    std::fs::create_dir_all(tmp.path().join("checkpoints")).expect("mkdir");
    std::fs::copy(checkpoint_path(&ctx.dir, "pretrain"), checkpoint_path(tmp.path(), "pretrain")).expect("copy");
    let before = backbone_sum(tmp.path())?;
    let mut o = TrainOptions::new(&ctx.cfg, Stage::Connector, tmp.path());
    o.iterations = ctx.cfg.connector_iters;
    // Loss on fixed triples: single training batches are too noisy to compare one step with another.
    // The training-split value is the criterion; the held-out value is reported alongside.
    let edits = &ctx.edits;
    o.probe = Some(Box::new(move |m: &Models| connector_eval_loss(m, edits, Split::Train, 128)));
    o.probe_every = (o.iterations / 4).max(1);
    let untrained = Models::build(&ctx.cfg, &[(Group::Semantic, false), (Group::Instruction, false), (Group::Connector, false)], DType::F32)?;
    untrained.load_group(Group::Semantic, &Checkpoint::load(&checkpoint_path(tmp.path(), "pretrain"))?)?;
    let held_out_0 = connector_eval_loss(&untrained, edits, Split::Test, 128)?;
    let out = train_stage(&ctx.cfg, Stage::Connector, &StageData { scenes: &ctx.edits, edits: Some(&ctx.edits) }, &o)?;
    let after = backbone_sum(tmp.path())?;
    let ck = Checkpoint::load(&checkpoint_path(tmp.path(), "connector"))?;
    untrained.load_group(Group::Instruction, &ck)?;
    untrained.load_group(Group::Connector, &ck)?;
    let held_out_end = connector_eval_loss(&untrained, edits, Split::Test, 128)?;
    let (l0, l_end) = (out.probes[0].1, out.probes[out.probes.len() - 1].1);
    let drop = 1.0 - l_end / l0;
    let frozen_ok = out.frozen_before == out.frozen_after && !out.frozen_before.contains_key("backbone");
    let trace: Vec<String> = out.probes.iter().map(|(s, v)| format!("{s}:{v:.4}")).collect();
    Ok((
        before == after && frozen_ok && drop >= 0.5,
        format!(
            "backbone checksum unchanged: {}; backbone not built, frozen semantic unchanged: {frozen_ok}; connector loss on 128 fixed training triples [{}], decrease {:.1}% (held-out {held_out_0:.4} -> {held_out_end:.4}, {:.1}%)",
            before == after,
            trace.join(" "),
            100.0 * drop,
            100.0 * (1.0 - held_out_end / held_out_0)
        ),
    ))
}

fn bench_dir(ctx: &Ctx) -> PathBuf {
    ctx.dir.join("eval")
}

fn axis_tables(ctx: &mut Ctx, axis: Axis) -> Result<Vec<MetricsTable>> {
    ctx.ensure_base()?;
    let mut tables = Vec::new();
    for r in 0..REPLICATES {
        let (plans, variants) = axis_plans(&ctx.cfg, axis, r);
        ctx.run(&plans)?;
        let table = run_benchmark(&ctx.dir, &ctx.scenes, &variants, &ctx.cfg.seeds)?;
        write_table(&bench_dir(ctx), &format!("{}_r{r}", axis.name()), &table, axis.name())?;
        tables.push(table);
    }
    Ok(tables)
}

fn criterion_5(ctx: &mut Ctx) -> Outcome {
    let tables = axis_tables(ctx, Axis::Equivariant)?;
    let mut wins = 0;
    let (mut d_img, mut d_id) = (0.0, 0.0);
    let mut rows = Vec::new();
    for (r, t) in tables.iter().enumerate() {
        let (v, e) = (t.row("vanilla").expect("row"), t.row("equivariant").expect("row"));
        let win = e.img_sim > v.img_sim && e.id_sim > v.id_sim;
        wins += usize::from(win);
        d_img += e.img_sim - v.img_sim;
        d_id += e.id_sim - v.id_sim;
        rows.push(format!(
            "r{r}: img_sim {:.4} vs {:.4}, id_sim {:.4} vs {:.4}",
            e.img_sim, v.img_sim, e.id_sim, v.id_sim
        ));
    }
    let n = tables.len() as f64;
    let (d_img, d_id) = (d_img / n, d_id / n);
    Ok((
        wins >= 2 && d_img > 0.0 && d_id > 0.0,
        format!("equivariant vs vanilla, {}; wins {wins}/{}; pooled improvement img_sim {d_img:+.4}, id_sim {d_id:+.4}", rows.join("; "), tables.len()),
    ))
}

fn criterion_6(ctx: &mut Ctx) -> Outcome {
    let tables = axis_tables(ctx, Axis::Dve)?;
    let mut wins = 0;
    let mut margin = 0.0;
    let mut rows = Vec::new();
    for (r, t) in tables.iter().enumerate() {
        let (full, no) = (t.row("full").expect("row"), t.row("w/o DVE").expect("row"));
        wins += usize::from(full.img_sim > no.img_sim);
        margin += full.img_sim - no.img_sim;
        rows.push(format!("r{r}: img_sim full {:.4} vs w/o DVE {:.4}", full.img_sim, no.img_sim));
    }
    let margin = margin / tables.len() as f64;
    Ok((
        wins >= 2 && margin > 0.0,
        format!("{}; reductions {wins}/{}; pooled reduction {margin:+.4}", rows.join("; "), tables.len()),
    ))
}

/// Largest relative drop below the running peak.
fn max_drawdown(series: &[(usize, f64)]) -> f64 {
    let mut peak = f64::MIN;
    let mut worst: f64 = 0.0;
    for &(_, v) in series {
        peak = peak.max(v);
        worst = worst.max((peak - v) / peak.abs().max(1e-12));
    }
    worst
}

fn criterion_7(ctx: &mut Ctx) -> Outcome {
    ctx.ensure_base()?;
    let cfg = ctx.cfg.clone();
    let ds = &ctx.scenes;
    let cases: Vec<_> = benchmark_cases(ds, cfg.bench_identities, 2)?;
    let probe = |m: &Models| -> Result<f64> {
        let mut c = m.cfg.clone();
        c.steps = cfg.steps;
        let bundles: Vec<_> = cases.iter().enumerate().map(|(i, k)| bundle_for(ds, k, &c, derive_seed(&[77, i as u64]))).collect();
        let results = sample_batch(m, &bundles, c.steps)?;
        let gen: Vec<_> = results.iter().map(|r| &r.generated).collect();
        let refs: Vec<_> = cases.iter().map(|k| &ds.images[k.reference]).collect();
        let sims = identity_similarity_batch(m, &gen, &refs)?;
        Ok(sims.iter().sum::<f64>() / sims.len() as f64)
    };
    let mut series = Vec::new();
    for (tag, with_id) in [("dynamics_with_id", true), ("dynamics_without_id", false)] {
        // Probe through a full inference model set: the stage itself may not load the identity encoder.
        let full = load_inference_models(&cfg, &ctx.dir, "main_1toMany")?;
        let mut o = TrainOptions::new(&cfg, Stage::Equivariant, &ctx.dir);
        o.tag = tag.into();
        o.iterations = DYNAMICS_ITERS;
        o.use_id_loss = with_id;
        o.rng_stream = 7_000;
        o.probe_every = DYNAMICS_PROBE_EVERY;
        let out = if stage_complete(&ctx.dir, tag, DYNAMICS_ITERS) {
            read_probes(&ctx.dir.join("curves").join(format!("{tag}.csv")), DYNAMICS_ITERS, true)
        } else {
            o.probe = Some(Box::new(|m: &Models| {
                full.store(Group::Ipcn)?.copy_from(m.store(Group::Ipcn)?, |n| Some(n.to_string()))?;
                probe(&full)
            }));
            train_stage(&cfg, Stage::Equivariant, &StageData { scenes: ds, edits: None }, &o)?.probes
        };
        let probes: Vec<(usize, f64)> = out;
        series.push((tag, probes));
    }
    let dd_with = max_drawdown(&series[0].1);
    let dd_without = max_drawdown(&series[1].1);
    let fmt = |s: &[(usize, f64)]| s.iter().map(|(k, v)| format!("{k}:{v:.3}")).collect::<Vec<_>>().join(" ");
    Ok((
        dd_without >= 0.10 && dd_with <= 0.05,
        format!(
            "max drop below running peak: without L_id {:.1}% (need >= 10%), with L_id {:.1}% (need <= 5%); without [{}]; with [{}]",
            100.0 * dd_without,
            100.0 * dd_with,
            fmt(&series[1].1),
            fmt(&series[0].1)
        ),
    ))
}

fn criterion_8(ctx: &mut Ctx) -> Outcome {
    ctx.ensure_base()?;
    ctx.run(&[full_final(&ctx.cfg, 0)])?;
    let models = load_inference_models(&ctx.cfg, &ctx.dir, "equivariant")?;
    let cases = benchmark_cases(&ctx.scenes, 4, 1)?;
    let mut means = Vec::new();
    let mut exact = true;
    for skip_t in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let mut cfg = ctx.cfg.clone();
        cfg.skip_t = skip_t;
        let mut total = 0.0;
        let mut n = 0;
        for seed in 0..32u64 {
            let bundles: Vec<_> = cases.iter().map(|c| bundle_for(&ctx.scenes, c, &cfg, derive_seed(&[seed, 8]))).collect();
            for (res, b) in sample_batch(&models, &bundles, cfg.steps)?.iter().zip(&bundles) {
                let mse = res.reconstructed_refs[0].mse(&b.dense_refs[0])?;
                if skip_t == 0.0 && res.reconstructed_refs[0] != b.dense_refs[0] {
                    exact = false;
                }
                total += mse;
                n += 1;
            }
        }
        means.push((skip_t, total / n as f64));
    }
    let monotone = means.windows(2).all(|w| w[1].1 >= w[0].1);
    let shown: Vec<String> = means.iter().map(|(t, m)| format!("t={t}: {m:.5}")).collect();
    Ok((exact && monotone, format!("skip_t=0 exact: {exact}; mean recon MSE over 32 seeds x 4 refs: {}", shown.join(", "))))
}

fn main() {
    let only: Option<Vec<usize>> =
        std::env::var("REMIX_ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let strict = std::env::var_os("REMIX_ACCEPTANCE_STRICT").is_some();
    let mut ctx = Ctx::new().expect("acceptance setup");
    eprintln!("acceptance cache: {}", ctx.dir.display());
    type Criterion = fn(&mut Ctx) -> Outcome;
    let criteria: [(usize, &str, Criterion); 10] = [
        (1, "zero-init no-op", criterion_1),
        (4, "codec/canvas exactness", criterion_4),
        (9, "positional disjointness", criterion_9),
        (3, "gradient checks", criterion_3),
        (10, "connector stage isolation", criterion_10),
        (2, "loss identities", criterion_2),
        (8, "skip-ahead endpoints and monotonicity", criterion_8),
        (5, "equivariant ablation", criterion_5),
        (6, "DVE ablation", criterion_6),
        (7, "ID-loss dynamics", criterion_7),
    ];
    let mut results = Vec::new();
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let (ok, detail) = match f(&mut ctx) {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        println!("criterion {id:>2} {} {name}: {detail} [{:.0}s]", if ok { "PASS" } else { "FAIL" }, t.elapsed().as_secs_f64());
        results.push((id, ok));
    }
    results.sort();
    let passed = results.iter().filter(|r| r.1).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if strict && passed < results.len() {
        std::process::exit(1);
    }
}
