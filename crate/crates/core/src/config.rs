//! Flat run configuration with documented defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::codec::latent_channels;
use crate::connector::ConnectorConfig;
use crate::encoders::EncoderConfig;
use crate::error::{io_err, Error, Result};
use crate::ipcn::ControlNetConfig;

/// Every key can also be given on the command line as `--kebab-case`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed for data, initialization and training.
    pub seed: u64,
    pub image_size: usize,
    /// Codec patch size.
    pub p: usize,
    pub depth: usize,
    pub model_dim: usize,
    pub heads: usize,
    /// Width of text-stream tokens (captions, semantic features, connector values).
    pub text_dim: usize,
    /// Connector joint blocks.
    pub d: usize,
    /// Connector cross-attention layers.
    pub l: usize,
    /// Control-branch blocks.
    pub n: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Identity-loss weight.
    pub lambda: f64,
    pub skip_t: f64,
    /// Sampler steps.
    pub steps: usize,
    /// Benchmark sampling seeds.
    pub seeds: Vec<u64>,
    pub lr: f64,
    pub batch: usize,
    pub pretrain_iters: usize,
    pub identity_iters: usize,
    pub connector_iters: usize,
    pub warmup_iters: usize,
    pub main_iters: usize,
    pub equivariant_iters: usize,
    pub checkpoint_every: usize,
    pub train_identities: usize,
    pub test_identities: usize,
    pub scenes: usize,
    pub bench_identities: usize,
    pub bench_prompts: usize,
    /// Dense reference path in the control branch.
    pub use_dense: bool,
    /// Sparse pose path in the control branch.
    pub use_sparse: bool,
    /// Global visual token in the text stream.
    pub use_global: bool,
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 64,
            p: 8,
            depth: 8,
            model_dim: 256,
            heads: 8,
            text_dim: 256,
            d: 4,
            l: 8,
            n: 4,
            alpha: 1.0,
            beta: 1.0,
            lambda: 0.2,
            skip_t: 0.5,
            steps: 28,
            seeds: vec![0, 1, 2, 3, 4],
            lr: 3e-4,
            batch: 16,
            pretrain_iters: 20_000,
            identity_iters: 3_000,
            connector_iters: 5_000,
            warmup_iters: 1_000,
            main_iters: 6_000,
            equivariant_iters: 1_000,
            checkpoint_every: 1_000,
            train_identities: 512,
            test_identities: 64,
            scenes: 6,
            bench_identities: 8,
            bench_prompts: 4,
            use_dense: true,
            use_sparse: true,
            use_global: true,
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Stable hex digest of the resolved configuration.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes()).iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Digest of the keys that shape trained weights; names the run directory.
    /// Sampling, benchmark, iteration-count and path keys are left out, so
    /// extending a stage or re-sampling reuses the same run.
    pub fn run_key(&self) -> String {
        let d = RunConfig::default();
        let c = RunConfig {
            skip_t: d.skip_t,
            steps: d.steps,
            seeds: d.seeds,
            pretrain_iters: d.pretrain_iters,
            identity_iters: d.identity_iters,
            connector_iters: d.connector_iters,
            warmup_iters: d.warmup_iters,
            main_iters: d.main_iters,
            equivariant_iters: d.equivariant_iters,
            checkpoint_every: d.checkpoint_every,
            bench_identities: d.bench_identities,
            bench_prompts: d.bench_prompts,
            data_dir: d.data_dir,
            run_dir: d.run_dir,
            ..self.clone()
        };
        c.hash()
    }

    /// Sets one key from its textual value, e.g. `("skip_t", "0.25")`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.replace('-', "_");
        let mut table: toml::Table = toml::from_str(&self.to_toml()).expect("own output parses");
        if !table.contains_key(&key) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        table.insert(key, parsed);
        *self = Self::from_toml(&toml::to_string(&table).expect("table serializes"))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.skip_t) {
            return err(format!("skip_t must lie in [0, 1], got {}", self.skip_t));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return err(format!("lambda must be a finite value >= 0, got {}", self.lambda));
        }
        if self.steps == 0 || self.batch == 0 {
            return err("steps and batch must be positive".into());
        }
        if !self.image_size.is_multiple_of(self.p) {
            return err(format!("image_size {} not divisible by p {}", self.image_size, self.p));
        }
        if self.scenes < 2 {
            return err("one-to-many training needs scenes >= 2".into());
        }
        self.backbone().validate()?;
        self.encoder().validate()?;
        self.connector().validate()?;
        self.controlnet().validate(self.depth)?;
        Ok(())
    }

    pub fn latent_side(&self) -> usize {
        self.image_size / self.p
    }

    pub fn backbone(&self) -> BackboneConfig {
        let s = self.latent_side();
        BackboneConfig {
            depth: self.depth,
            model_dim: self.model_dim,
            heads: self.heads,
            text_dim: self.text_dim,
            latent_channels: latent_channels(self.p),
            vocab_size: crate::data::VOCAB_SIZE,
            // Room for a generated region offset past four references.
            max_positions: (2 * s, 5 * s),
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            image_size: self.image_size,
            patch: self.p,
            feature_dim: self.text_dim,
            heads: self.heads,
            vocab_size: crate::data::VOCAB_SIZE,
        }
    }

    pub fn connector(&self) -> ConnectorConfig {
        ConnectorConfig { d: self.d, l: self.l, feature_dim: self.text_dim, heads: self.heads }
    }

    pub fn controlnet(&self) -> ControlNetConfig {
        ControlNetConfig {
            n_blocks: self.n,
            alpha: self.alpha,
            beta: self.beta,
            patch: self.p,
            latent_channels: latent_channels(self.p),
            model_dim: self.model_dim,
            heads: self.heads,
            text_dim: self.text_dim,
            ..ControlNetConfig::default()
        }
    }
}

/// Parses, defaults and validates a TOML config file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    RunConfig::from_toml(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_key_ignores_sampling_and_schedule_lengths() {
        let base = RunConfig::default();
        let mut c = base.clone();
        c.skip_t = 0.25;
        c.steps = 4;
        c.main_iters = 7;
        c.run_dir = "elsewhere".into();
        assert_eq!(c.run_key(), base.run_key());
        c.lambda = 0.0;
        assert_ne!(c.run_key(), base.run_key());
        assert_ne!(c.hash(), base.hash());
    }

    #[test]
    fn empty_file_gives_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "").unwrap();
        let cfg = load_config(&path).unwrap();
        assert_eq!((cfg.d, cfg.l, cfg.n, cfg.lambda, cfg.skip_t), (4, 8, 4, 0.2, 0.5));
        assert_eq!(cfg.hash(), load_config(&path).unwrap().hash());
    }

    #[test]
    fn rejects_duplicates_unknown_keys_and_bad_types() {
        assert!(RunConfig::from_toml("d = 2\nd = 3\n").is_err());
        let e = RunConfig::from_toml("wobble = 1\n").unwrap_err().to_string();
        assert!(e.contains("wobble"), "{e}");
        let e = RunConfig::from_toml("d = \"four\"\n").unwrap_err().to_string();
        assert!(e.contains("expected"), "{e}");
        assert!(RunConfig::from_toml("skip_t = 1.5\n").is_err());
    }

    #[test]
    fn overrides_parse_typed_values() {
        let mut cfg = RunConfig::default();
        cfg.set("skip-t", "0.25").unwrap();
        cfg.set("run_dir", "out/x").unwrap();
        cfg.set("seeds", "[1, 2]").unwrap();
        assert_eq!(cfg.skip_t, 0.25);
        assert_eq!(cfg.run_dir, PathBuf::from("out/x"));
        assert_eq!(cfg.seeds, vec![1, 2]);
        assert!(cfg.set("nope", "1").is_err());
        assert_ne!(cfg.hash(), RunConfig::default().hash());
    }
}
