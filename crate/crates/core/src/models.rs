//! Model groups, their parameter stores, and the conditioning shared by
//! training and sampling.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};

use crate::backbone::Backbone;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::connector::{compose_text_stream, Connector};
use crate::data::{derive_seed, token_id, PAD};
use crate::encoders::{IdentityEncoder, InstructionEncoder, SemanticEncoder};
use crate::error::{Error, Result};
use crate::ipcn::IpControlNet;
use crate::nn::{ParamBuilder, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    Backbone,
    Semantic,
    Instruction,
    Connector,
    Ipcn,
    Identity,
}

impl Group {
    pub const ALL: [Group; 6] =
        [Group::Backbone, Group::Semantic, Group::Instruction, Group::Connector, Group::Ipcn, Group::Identity];

    pub fn name(&self) -> &'static str {
        match self {
            Group::Backbone => "backbone",
            Group::Semantic => "semantic",
            Group::Instruction => "instruction",
            Group::Connector => "connector",
            Group::Ipcn => "ipcn",
            Group::Identity => "identity",
        }
    }

    pub fn prefix(&self) -> String {
        format!("{}.", self.name())
    }
}

/// The subset of model groups a stage needs, each trainable or frozen.
pub struct Models {
    pub cfg: RunConfig,
    pub dtype: DType,
    pub device: Device,
    pub backbone: Option<Backbone>,
    pub semantic: Option<SemanticEncoder>,
    pub instruction: Option<InstructionEncoder>,
    pub connector: Option<Connector>,
    pub ipcn: Option<IpControlNet>,
    pub identity: Option<IdentityEncoder>,
    stores: BTreeMap<Group, ParamStore>,
    trainable: Vec<Group>,
}

impl Models {
    /// Freshly initialized groups; `(group, trainable)` pairs.
    pub fn build(cfg: &RunConfig, groups: &[(Group, bool)], dtype: DType) -> Result<Self> {
        let device = Device::Cpu;
        let mut m = Models {
            cfg: cfg.clone(),
            dtype,
            device: device.clone(),
            backbone: None,
            semantic: None,
            instruction: None,
            connector: None,
            ipcn: None,
            identity: None,
            stores: BTreeMap::new(),
            trainable: Vec::new(),
        };
        for &(g, trainable) in groups {
            let pb = ParamBuilder::new(derive_seed(&[cfg.seed, 0x1417, g as u64]), dtype, &device).frozen(!trainable);
            match g {
                Group::Backbone => m.backbone = Some(Backbone::new(&pb, &cfg.backbone())?),
                Group::Semantic => m.semantic = Some(SemanticEncoder::new(&pb, &cfg.encoder())?),
                Group::Instruction => m.instruction = Some(InstructionEncoder::new(&pb, &cfg.encoder())?),
                Group::Connector => m.connector = Some(Connector::new(&pb, &cfg.connector())?),
                Group::Ipcn => m.ipcn = Some(IpControlNet::new(&pb, &cfg.controlnet(), cfg.depth)?),
                Group::Identity => m.identity = Some(IdentityEncoder::new(&pb, cfg.image_size)?),
            }
            m.stores.insert(g, pb.finish());
            if trainable {
                m.trainable.push(g);
            }
        }
        Ok(m)
    }

    pub fn has(&self, g: Group) -> bool {
        self.stores.contains_key(&g)
    }

    pub fn store(&self, g: Group) -> Result<&ParamStore> {
        self.stores.get(&g).ok_or_else(|| Error::InvalidInput(format!("model group `{}` is not loaded", g.name())))
    }

    pub fn loaded_groups(&self) -> Vec<Group> {
        self.stores.keys().copied().collect()
    }

    pub fn trainable_groups(&self) -> &[Group] {
        &self.trainable
    }

    /// Trainable vars with group-qualified names.
    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        for g in &self.trainable {
            let store = &self.stores[g];
            for name in store.names() {
                out.push((format!("{}{name}", g.prefix()), store.get(name).expect("listed name").clone()));
            }
        }
        out
    }

    pub fn load_group(&self, g: Group, ck: &Checkpoint) -> Result<()> {
        ck.load_into(&g.prefix(), self.store(g)?)
    }

    pub fn save_group(&self, g: Group, ck: &mut Checkpoint) -> Result<()> {
        ck.add_store(&g.prefix(), self.store(g)?)
    }

    pub fn checksum(&self, g: Group) -> Result<String> {
        self.store(g)?.checksum()
    }

    fn require<T>(x: &Option<T>, g: Group) -> Result<&T> {
        x.as_ref().ok_or_else(|| Error::InvalidInput(format!("model group `{}` is not loaded", g.name())))
    }

    pub fn backbone(&self) -> Result<&Backbone> {
        Self::require(&self.backbone, Group::Backbone)
    }

    pub fn semantic(&self) -> Result<&SemanticEncoder> {
        Self::require(&self.semantic, Group::Semantic)
    }

    pub fn instruction(&self) -> Result<&InstructionEncoder> {
        Self::require(&self.instruction, Group::Instruction)
    }

    pub fn connector(&self) -> Result<&Connector> {
        Self::require(&self.connector, Group::Connector)
    }

    pub fn ipcn(&self) -> Result<&IpControlNet> {
        Self::require(&self.ipcn, Group::Ipcn)
    }

    pub fn identity(&self) -> Result<&IdentityEncoder> {
        Self::require(&self.identity, Group::Identity)
    }

    /// Token ids for a batch of symbol sequences.
    pub fn tokens(symbols: &[Vec<String>]) -> Vec<Vec<u32>> {
        symbols.iter().map(|s| s.iter().map(|w| token_id(w)).collect()).collect()
    }

    /// Text stream `[caption ‖ semantic slot ‖ global token]` and the pooled caption vector.
    ///
    /// With references, the semantic slot holds the connector value computed
    /// from `instruction` and the first reference, and the global token comes
    /// from the control branch. Without references both are zeros.
    pub fn text_stream(
        &self,
        captions: &[Vec<u32>],
        reference: Option<&Tensor>,
        instruction: &[Vec<u32>],
        use_global: bool,
    ) -> Result<(Tensor, Tensor)> {
        let backbone = self.backbone()?;
        let cap = backbone.embed_captions(captions)?;
        let pooled = cap.mean(1)?;
        let b = captions.len();
        let dim = self.cfg.text_dim;
        let m = self.cfg.encoder().num_semantic_tokens();
        let (value, global) = match reference {
            Some(r) => {
                let sem = self.semantic()?.encode(r)?;
                let q = self.instruction()?.encode(instruction, r)?;
                let value = self.connector()?.connect(&q, &sem)?;
                let global = if use_global {
                    self.ipcn()?.global_visual_embed(&sem.pooled)?
                } else {
                    Tensor::zeros((b, 1, dim), self.dtype, &self.device)?
                };
                (value, global)
            }
            None => (
                Tensor::zeros((b, m, dim), self.dtype, &self.device)?,
                Tensor::zeros((b, 1, dim), self.dtype, &self.device)?,
            ),
        };
        let text = compose_text_stream(&Tensor::cat(&[&value, &global], 1)?, Some(&cap))?;
        Ok((text, pooled))
    }
}

/// Caption with the identity attributes blanked, leaving scene symbols.
pub fn scene_prompt(caption: &[String]) -> Vec<String> {
    caption
        .iter()
        .map(|s| {
            if ["shape_", "body_", "trim_", "acc_", "motif_"].iter().any(|p| s.starts_with(p)) {
                crate::data::vocab()[PAD as usize].clone()
            } else {
                s.clone()
            }
        })
        .collect()
}

/// Connector instruction for a generation prompt: restate the requested background.
pub fn generation_instruction(prompt: &[String]) -> Vec<String> {
    match prompt.iter().find(|s| s.starts_with("bg_")) {
        Some(bg) => vec!["background".to_string(), bg.clone()],
        None => vec!["keep".to_string(), crate::data::vocab()[PAD as usize].clone()],
    }
}
