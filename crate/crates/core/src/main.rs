use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};

use remix_core::ablation::{axis_plans, base_plans, Axis, StagePlan};
use remix_core::checkpoint::Checkpoint;
use remix_core::codec::Image;
use remix_core::config::{load_config, RunConfig};
use remix_core::data::{token_id, vocab, Dataset, DatasetCounts, PairingMode, CAPTION_LEN, UNK};
use remix_core::eval::{line_svg, run_benchmark, write_table, Variant};
use remix_core::inference::{sample, write_sample, ConditionBundle};
use remix_core::models::{Group, Models};
use remix_core::training::{checkpoint_path, load_inference_models, Stage, StageData};
use remix_core::verify::{gradient_checks, loss_identities, zero_init_noop, CheckOutcome};
use remix_core::{Error, Result};

/// Config keys, their kebab-case flags and whether they take a list.
fn config_keys() -> Vec<(String, toml::Value)> {
    let table: toml::Table = toml::from_str(&RunConfig::default().to_toml()).expect("defaults serialize");
    table.into_iter().collect()
}

fn config_args(skip: &[&str]) -> Vec<Arg> {
    let mut args = vec![Arg::new("config").long("config").value_name("PATH").help("TOML config file; flags override it")];
    for (key, default) in config_keys() {
        if skip.contains(&key.as_str()) {
            continue;
        }
        let flag = key.replace('_', "-");
        let mut arg = Arg::new(format!("cfg.{key}"))
            .long(flag)
            .value_name(key.to_uppercase())
            .help(format!("config `{key}` (default {default})"));
        if default.is_array() {
            arg = arg.num_args(1..);
        }
        args.push(arg);
    }
    args
}

fn cli() -> Command {
    let stage_names = ["warmup_1to1", "main_1toMany", "equivariant", "all"];
    Command::new("remix")
        .about("Semantic editing connector and consistent-character control branch on a desk-scale diffusion transformer")
        .subcommand_required(true)
        .subcommand(
            Command::new("synth-data")
                .about("Render the synthetic character datasets")
                .args(config_args(&[]))
                .arg(
                    Arg::new("mode")
                        .long("mode")
                        .value_parser(["one_to_many", "editing_triples", "one_to_one", "all"])
                        .default_value("all"),
                )
                .arg(Arg::new("out").long("out").value_name("DIR").help("output root (default: data_dir)"))
                .arg(Arg::new("overwrite").long("overwrite").action(ArgAction::SetTrue)),
        )
        .subcommand(Command::new("pretrain").about("Train the backbone, semantic encoder and identity encoder").args(config_args(&[])))
        .subcommand(Command::new("train-connector").about("Train the instruction encoder and connector").args(config_args(&[])))
        .subcommand(
            Command::new("train-ipcn")
                .about("Train the control branch stages")
                .args(config_args(&[]))
                .arg(Arg::new("stage").long("stage").value_parser(stage_names).default_value("all"))
                .arg(Arg::new("tag").long("tag").help("checkpoint tag (single stage only)"))
                .arg(Arg::new("init-tag").long("init-tag").help("checkpoint the stage starts from (single stage only)"))
                .arg(Arg::new("no-id-loss").long("no-id-loss").action(ArgAction::SetTrue)),
        )
        .subcommand(
            Command::new("sample")
                .about("Generate one image from references, a pose map and a prompt")
                .args(config_args(&["seed"]))
                .arg(Arg::new("refs").long("refs").num_args(1..).value_name("PNG"))
                .arg(Arg::new("pose").long("pose").value_name("PNG"))
                .arg(Arg::new("prompt").long("prompt").help("caption symbols separated by spaces"))
                .arg(Arg::new("seed").long("seed").value_parser(clap::value_parser!(u64)).default_value("0"))
                .arg(Arg::new("run-seed").long("run-seed").value_parser(clap::value_parser!(u64)).help("config `seed` of the trained run"))
                .arg(Arg::new("ipcn-tag").long("ipcn-tag").default_value("equivariant"))
                .arg(Arg::new("out").long("out").value_name("DIR").required(true)),
        )
        .subcommand(
            Command::new("evaluate")
                .about("Benchmark trained control branches on held-out identities")
                .args(config_args(&[]))
                .arg(Arg::new("variants").long("variants").num_args(1..).value_delimiter(',').default_value("equivariant")),
        )
        .subcommand(
            Command::new("ablate")
                .about("Train and benchmark ablation variants")
                .args(config_args(&[]))
                .arg(
                    Arg::new("axes")
                        .long("axes")
                        .num_args(1..)
                        .value_delimiter(',')
                        .default_value("equivariant")
                        .help("equivariant, dve, sve, id_loss"),
                ),
        )
        .subcommand(Command::new("verify").about("Run the no-op, gradient and loss-identity checks").args(config_args(&[])))
}

fn resolve_config(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(p) => load_config(Path::new(p))?,
        None => RunConfig::default(),
    };
    for (key, default) in config_keys() {
        let Some(values) = m.try_get_many::<String>(&format!("cfg.{key}")).ok().flatten() else { continue };
        let values: Vec<&String> = values.collect();
        let text = if default.is_array() {
            format!("[{}]", values.iter().map(|v| v.as_str()).collect::<Vec<_>>().join(","))
        } else if default.is_str() {
            toml::Value::String(values[0].clone()).to_string()
        } else {
            values[0].clone()
        };
        cfg.set(&key, &text)?;
    }
    if let Some(seed) = m.try_get_one::<u64>("run-seed").ok().flatten() {
        cfg.seed = *seed;
    }
    Ok(cfg)
}

/// `$REMIX_RUN_DIR` (or `run_dir`) joined with the config's run key.
fn run_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let root = std::env::var_os("REMIX_RUN_DIR").map(PathBuf::from).unwrap_or_else(|| cfg.run_dir.clone());
    let dir = root.join(format!("run-{}", cfg.run_key()));
    std::fs::create_dir_all(&dir).map_err(|source| Error::Io { path: dir.clone(), source })?;
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml()).map_err(|source| Error::Io { path, source })?;
    Ok(dir)
}

fn counts(cfg: &RunConfig) -> DatasetCounts {
    DatasetCounts {
        train_identities: cfg.train_identities,
        test_identities: cfg.test_identities,
        scenes_per_identity: cfg.scenes,
        image_size: cfg.image_size,
    }
}

fn load_data(cfg: &RunConfig, mode: PairingMode) -> Result<Dataset> {
    let dir = cfg.data_dir.join(mode.as_str());
    if !dir.join("manifest.tsv").exists() {
        return Err(Error::InvalidInput(format!("no {} dataset at {}; run `remix synth-data` first", mode.as_str(), dir.display())));
    }
    let ds = Dataset::load(&dir)?;
    let c = counts(cfg);
    let expected = (c.train_identities + c.test_identities) * c.scenes_per_identity * if mode == PairingMode::EditingTriples { 2 } else { 1 };
    if ds.seed != cfg.seed || ds.image_size != cfg.image_size || ds.len() != expected {
        return Err(Error::InvalidInput(format!(
            "dataset at {} does not match the config (seed, image_size or counts); rerun `remix synth-data --overwrite`",
            dir.display()
        )));
    }
    Ok(ds)
}

fn log_every(iterations: usize) -> usize {
    (iterations / 20).max(1)
}

fn run_plans(plans: &[StagePlan], dir: &Path, data: &StageData) -> Result<()> {
    for p in plans {
        eprintln!("== {} ({} iterations)", p.tag, p.iterations);
        match p.run(dir, data, log_every(p.iterations))? {
            None => eprintln!("   already complete"),
            Some(o) => {
                eprintln!("   checkpoint {}", o.checkpoint.display());
                if o.id_loss_active {
                    eprintln!("   identity loss active");
                }
            }
        }
    }
    Ok(())
}

fn backbone_checksum(cfg: &RunConfig, dir: &Path) -> Result<String> {
    let models = Models::build(cfg, &[(Group::Backbone, false)], candle_core::DType::F32)?;
    models.load_group(Group::Backbone, &Checkpoint::load(&checkpoint_path(dir, Stage::Pretrain.name()))?)?;
    models.checksum(Group::Backbone)
}

fn prompt_symbols(text: Option<&String>) -> Vec<String> {
    let pad = vocab()[0].clone();
    let mut syms: Vec<String> = text.map(|t| t.split_whitespace().map(str::to_string).collect()).unwrap_or_default();
    for s in &syms {
        if token_id(s) == UNK {
            eprintln!("warning: prompt symbol `{s}` is not in the vocabulary");
        }
    }
    syms.resize(CAPTION_LEN.max(syms.len()), pad);
    syms
}

fn print_checks(checks: &[CheckOutcome]) -> bool {
    for c in checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    checks.iter().all(|c| c.passed)
}

fn run(m: &ArgMatches) -> Result<bool> {
    let (name, sub) = m.subcommand().expect("subcommand required");
    let cfg = resolve_config(sub)?;
    match name {
        "synth-data" => {
            let root = sub.get_one::<String>("out").map(PathBuf::from).unwrap_or_else(|| cfg.data_dir.clone());
            let modes = match sub.get_one::<String>("mode").map(String::as_str) {
                Some("all") | None => vec![PairingMode::OneToMany, PairingMode::EditingTriples, PairingMode::OneToOne],
                Some(m) => vec![PairingMode::parse(m)?],
            };
            for mode in modes {
                let ds = Dataset::generate(cfg.seed, counts(&cfg), mode)?;
                let path = ds.write(&root.join(mode.as_str()), sub.get_flag("overwrite"))?;
                println!("{} records -> {}", ds.len(), path.display());
            }
        }
        "pretrain" => {
            let dir = run_dir(&cfg)?;
            let ds = load_data(&cfg, PairingMode::OneToMany)?;
            let plans = &base_plans(&cfg)[..2];
            run_plans(plans, &dir, &StageData { scenes: &ds, edits: None })?;
        }
        "train-connector" => {
            let dir = run_dir(&cfg)?;
            let edits = load_data(&cfg, PairingMode::EditingTriples)?;
            let before = backbone_checksum(&cfg, &dir)?;
            run_plans(&base_plans(&cfg)[2..3], &dir, &StageData { scenes: &edits, edits: Some(&edits) })?;
            let after = backbone_checksum(&cfg, &dir)?;
            println!("backbone checksum before {before}");
            println!("backbone checksum after  {after}");
            if before != after {
                return Err(Error::InvalidInput("backbone parameters changed during connector training".into()));
            }
        }
        "train-ipcn" => {
            let dir = run_dir(&cfg)?;
            let ds = load_data(&cfg, PairingMode::OneToMany)?;
            let which = sub.get_one::<String>("stage").map(String::as_str).unwrap_or("all");
            let mut plans: Vec<StagePlan> = match which {
                "all" => Stage::DIFFUSION.iter().map(|s| StagePlan::new(&cfg, *s)).collect(),
                s => vec![StagePlan::new(&cfg, Stage::parse(s)?)],
            };
            let (tag, init) = (sub.get_one::<String>("tag"), sub.get_one::<String>("init-tag"));
            if plans.len() > 1 && (tag.is_some() || init.is_some()) {
                return Err(Error::InvalidInput("--tag and --init-tag need a single --stage".into()));
            }
            if let Some(t) = tag {
                plans[0].tag = t.clone();
            }
            if let Some(t) = init {
                plans[0].init_tag = Some(t.clone());
            }
            for p in &mut plans {
                p.use_id_loss = !sub.get_flag("no-id-loss");
            }
            run_plans(&plans, &dir, &StageData { scenes: &ds, edits: None })?;
        }
        "sample" => {
            let dir = run_dir(&cfg)?;
            let tag = sub.get_one::<String>("ipcn-tag").expect("defaulted");
            let models = load_inference_models(&cfg, &dir, tag)?;
            let refs = sub
                .get_many::<String>("refs")
                .map(|v| v.map(|p| Image::load_png(Path::new(p))).collect::<Result<Vec<_>>>())
                .transpose()?
                .unwrap_or_default();
            let pose = sub.get_one::<String>("pose").map(|p| Image::load_png(Path::new(p))).transpose()?;
            let bundle = ConditionBundle {
                dense_refs: refs,
                sparse_map: pose,
                instruction: prompt_symbols(sub.get_one::<String>("prompt")),
                alpha: cfg.alpha,
                beta: cfg.beta,
                skip_t: cfg.skip_t,
                seed: *sub.get_one::<u64>("seed").expect("defaulted"),
            };
            let result = sample(&models, &bundle, cfg.steps)?;
            let out = PathBuf::from(sub.get_one::<String>("out").expect("required"));
            write_sample(&out, &result, &bundle)?;
            println!("wrote {}", out.display());
        }
        "evaluate" => {
            let dir = run_dir(&cfg)?;
            let ds = load_data(&cfg, PairingMode::OneToMany)?;
            let variants: Vec<Variant> = sub
                .get_many::<String>("variants")
                .expect("defaulted")
                .map(|t| Variant { name: t.clone(), ipcn_tag: t.clone(), cfg: cfg.clone() })
                .collect();
            let table = run_benchmark(&dir, &ds, &variants, &cfg.seeds)?;
            let (csv, _) = write_table(&dir.join("eval"), "benchmark", &table, "held-out benchmark")?;
            write_loss_plots(&dir)?;
            print!("{}", table.to_csv());
            eprintln!("wrote {}", csv.display());
        }
        "ablate" => {
            let dir = run_dir(&cfg)?;
            let ds = load_data(&cfg, PairingMode::OneToMany)?;
            let edits = load_data(&cfg, PairingMode::EditingTriples)?;
            let plans = base_plans(&cfg);
            run_plans(&plans[..2], &dir, &StageData { scenes: &ds, edits: None })?;
            run_plans(&plans[2..3], &dir, &StageData { scenes: &edits, edits: Some(&edits) })?;
            run_plans(&plans[3..], &dir, &StageData { scenes: &ds, edits: None })?;
            for axis in sub.get_many::<String>("axes").expect("defaulted") {
                let axis = Axis::parse(axis)?;
                let (plans, variants) = axis_plans(&cfg, axis, 0);
                run_plans(&plans, &dir, &StageData { scenes: &ds, edits: None })?;
                let table = run_benchmark(&dir, &ds, &variants, &cfg.seeds)?;
                let stem = format!("ablation_{}", axis.name());
                let (csv, _) = write_table(&dir.join("eval"), &stem, &table, &format!("ablation: {}", axis.name()))?;
                print!("{}", table.to_csv());
                eprintln!("wrote {}", csv.display());
            }
            write_loss_plots(&dir)?;
        }
        "verify" => {
            let mut checks = vec![zero_init_noop(&cfg, 100, cfg.seed)?];
            checks.extend(gradient_checks(cfg.seed)?);
            checks.extend(loss_identities(cfg.seed)?);
            return Ok(print_checks(&checks));
        }
        other => unreachable!("clap rejects subcommand `{other}`"),
    }
    Ok(true)
}

/// One SVG per loss curve in `curves/`, plotting every numeric column.
fn write_loss_plots(dir: &Path) -> Result<()> {
    let curves = dir.join("curves");
    let Ok(entries) = std::fs::read_dir(&curves) else { return Ok(()) };
    for entry in entries.flatten() {
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("csv") {
            continue;
        }
        let text = std::fs::read_to_string(&path).map_err(|source| Error::Io { path: path.clone(), source })?;
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
        let rows: Vec<Vec<f64>> =
            lines.map(|l| l.split(',').map(|v| v.parse().unwrap_or(f64::NAN)).collect()).collect();
        let series: Vec<(String, Vec<(f64, f64)>)> = (1..header.len())
            .map(|k| (header[k].to_string(), rows.iter().map(|r| (r[0], r.get(k).copied().unwrap_or(f64::NAN))).collect::<Vec<_>>()))
            .filter(|(_, p): &(String, Vec<(f64, f64)>)| p.iter().any(|(_, y)| y.is_finite()))
            .collect();
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("curve");
        let svg = curves.join(format!("{stem}.svg"));
        std::fs::write(&svg, line_svg(&series, stem, "loss")).map_err(|source| Error::Io { path: svg, source })?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&matches) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
