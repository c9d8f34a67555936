//! Dual-stream connector mapping instruction embeddings (query) and input-image
//! semantic features (key) to refined semantic features (value) that a frozen
//! backbone consumes in its text stream.

use candle_core::{Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::encoders::{InstructionEmbedding, SemanticFeatures};
use crate::error::{Error, Result};
use crate::nn::{attention, layer_norm, sinusoid_table, Init, Linear, MmditBlock, Mlp, ParamBuilder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectorConfig {
    /// Joint MMDiT blocks over (query, key).
    pub d: usize,
    /// Cross-attention layers turning the key into the value.
    pub l: usize,
    pub feature_dim: usize,
    pub heads: usize,
}

impl Default for ConnectorConfig {
    fn default() -> Self {
        Self { d: 4, l: 8, feature_dim: 256, heads: 8 }
    }
}

impl ConnectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.l == 0 {
            return Err(Error::Config(format!("connector needs d >= 1 and l >= 1, got d={} l={}", self.d, self.l)));
        }
        if self.heads == 0 || !self.feature_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("feature_dim {} not divisible by {} heads", self.feature_dim, self.heads)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct CrossLayer {
    q: Linear,
    kv: Linear,
    mlp: Mlp,
    out_proj: Linear,
}

#[derive(Debug, Clone)]
pub struct Connector {
    cfg: ConnectorConfig,
    query_in: Mlp,
    vec_in: Mlp,
    blocks: Vec<MmditBlock>,
    cross: Vec<CrossLayer>,
}

impl Connector {
    pub fn new(pb: &ParamBuilder, cfg: &ConnectorConfig) -> Result<Self> {
        cfg.validate()?;
        let dim = cfg.feature_dim;
        Ok(Self {
            cfg: cfg.clone(),
            query_in: Mlp::new(&pb.pp("query_in"), dim, 2 * dim, dim)?,
            vec_in: Mlp::new(&pb.pp("vec_in"), dim, 2 * dim, dim)?,
            blocks: (0..cfg.d).map(|i| MmditBlock::new(&pb.pp(format!("blocks.{i}")), dim, cfg.heads)).collect::<Result<_>>()?,
            cross: (0..cfg.l)
                .map(|i| {
                    let pb = pb.pp(format!("cross.{i}"));
                    Ok(CrossLayer {
                        q: Linear::new(&pb.pp("q"), dim, dim)?,
                        kv: Linear::new(&pb.pp("kv"), dim, 2 * dim)?,
                        mlp: Mlp::new(&pb.pp("mlp"), dim, 2 * dim, dim)?,
                        // Zero start: the value begins as an exact copy of the key.
                        out_proj: Linear::with_init(&pb.pp("out_proj"), dim, dim, Init::Zeros, true)?,
                    })
                })
                .collect::<Result<_>>()?,
        })
    }

    pub fn config(&self) -> &ConnectorConfig {
        &self.cfg
    }

    /// Parameter names of the cross-attention output projections.
    pub fn output_projection_names(&self) -> Vec<String> {
        (0..self.cfg.l).flat_map(|i| ["weight", "bias"].map(|w| format!("cross.{i}.out_proj.{w}"))).collect()
    }

    /// `value = connect(query, key)`; the value has the key's shape for any query length.
    pub fn connect(&self, query: &InstructionEmbedding, key: &SemanticFeatures) -> Result<Tensor> {
        let dim = self.cfg.feature_dim;
        let (b, l, dq) = query.tokens.dims3()?;
        let (bk, _, dk) = key.tokens.dims3()?;
        if dq != dim || dk != dim || bk != b || query.pooled.dims() != [b, dim] {
            return Err(Error::Shape(format!(
                "connector expects width {dim}: query {:?}, pooled {:?}, key {:?}",
                query.tokens.dims(),
                query.pooled.dims(),
                key.tokens.dims()
            )));
        }
        let pe = sinusoid_table(l, dim, query.tokens.dtype(), query.tokens.device())?;
        let mut q = self.query_in.forward(&query.tokens)?.broadcast_add(&pe.unsqueeze(0)?)?;
        let mut k = key.tokens.clone();
        let vec = self.vec_in.forward(&query.pooled)?;
        for block in &self.blocks {
            let (nk, nq) = block.forward(&k, &q, &vec)?;
            k = nk;
            q = nq;
        }
        let ctx = Tensor::cat(&[&q, &k], 1)?;
        let mut v = key.tokens.clone();
        for layer in &self.cross {
            let kv = layer.kv.forward(&ctx)?.chunk(2, 2)?;
            let a = attention(&layer.q.forward(&layer_norm(&v, 1e-6)?)?, &kv[0], &kv[1], self.cfg.heads)?;
            let h = (&a + layer.mlp.forward(&a)?)?;
            v = (v + layer.out_proj.forward(&h)?)?;
        }
        Ok(v)
    }
}

/// Mean squared error over every entry.
pub fn connector_loss(value: &Tensor, target: &Tensor) -> Result<Tensor> {
    if value.dims() != target.dims() {
        return Err(Error::Shape(format!("value {:?} vs target {:?}", value.dims(), target.dims())));
    }
    Ok((value - target)?.sqr()?.mean_all()?)
}

/// Token-axis concatenation `[text ‖ value]`, text first.
pub fn compose_text_stream(value: &Tensor, text: Option<&Tensor>) -> Result<Tensor> {
    match text {
        None => Ok(value.clone()),
        Some(t) => {
            let (bt, _, dt) = t.dims3()?;
            let (bv, _, dv) = value.dims3()?;
            if bt != bv || dt != dv {
                return Err(Error::Shape(format!("text {:?} vs value {:?}", t.dims(), value.dims())));
            }
            if t.dim(1)? == 0 {
                return Ok(value.clone());
            }
            Ok(Tensor::cat(&[t, value], 1)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn features(b: usize, m: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        crate::nn::randn(&mut rng, &[b, m, d], DType::F64, &Device::Cpu).unwrap()
    }

    fn query(l: usize, seed: u64) -> InstructionEmbedding {
        let tokens = features(2, l, 16, seed);
        let pooled = tokens.mean(1).unwrap();
        InstructionEmbedding { tokens, pooled }
    }

    fn key() -> SemanticFeatures {
        let tokens = features(2, 5, 16, 99);
        let pooled = tokens.mean(1).unwrap();
        SemanticFeatures { tokens, pooled }
    }

    fn cfg() -> ConnectorConfig {
        ConnectorConfig { d: 1, l: 2, feature_dim: 16, heads: 2 }
    }

    #[test]
    fn output_shape_is_key_shape_for_any_query_length() {
        let pb = ParamBuilder::new(0, DType::F64, &Device::Cpu);
        let c = Connector::new(&pb, &cfg()).unwrap();
        for l in [1, 3, 9] {
            assert_eq!(c.connect(&query(l, l as u64), &key()).unwrap().dims(), &[2, 5, 16]);
        }
    }

    #[test]
    fn zero_output_projections_pass_the_key_through() {
        let pb = ParamBuilder::new(0, DType::F64, &Device::Cpu);
        let c = Connector::new(&pb, &cfg()).unwrap();
        let store = pb.finish();
        store.perturb(5, 0.3).unwrap();
        let k = key();
        assert_ne!(c.connect(&query(4, 1), &k).unwrap().to_vec3::<f64>().unwrap(), k.tokens.to_vec3::<f64>().unwrap());
        for name in c.output_projection_names() {
            let v = store.get(&name).unwrap();
            v.set(&v.zeros_like().unwrap()).unwrap();
        }
        assert_eq!(c.connect(&query(4, 1), &k).unwrap().to_vec3::<f64>().unwrap(), k.tokens.to_vec3::<f64>().unwrap());
    }

    #[test]
    fn loss_oracles() {
        let dev = Device::Cpu;
        let v = Tensor::new(&[[0.5f64, 0.0]], &dev).unwrap();
        let t = Tensor::new(&[[0.0f64, 0.0]], &dev).unwrap();
        assert_eq!(connector_loss(&v, &t).unwrap().to_scalar::<f64>().unwrap(), 0.125);
        let ones = (&t + 1.0).unwrap();
        assert_eq!(connector_loss(&ones, &t).unwrap().to_scalar::<f64>().unwrap(), 1.0);
        assert_eq!(connector_loss(&t, &t).unwrap().to_scalar::<f64>().unwrap(), 0.0);
        assert!(connector_loss(&v, &features(1, 1, 3, 0).squeeze(0).unwrap()).is_err());
    }

    #[test]
    fn compose_orders_text_first() {
        let text = features(1, 8, 4, 1);
        let value = features(1, 16, 4, 2);
        let s = compose_text_stream(&value, Some(&text)).unwrap();
        assert_eq!(s.dims(), &[1, 24, 4]);
        assert_eq!(s.narrow(1, 0, 8).unwrap().to_vec3::<f64>().unwrap(), text.to_vec3::<f64>().unwrap());
        assert_eq!(s.narrow(1, 8, 16).unwrap().to_vec3::<f64>().unwrap(), value.to_vec3::<f64>().unwrap());
        let empty = Tensor::zeros((1, 0, 4), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(compose_text_stream(&value, Some(&empty)).unwrap().dims(), &[1, 16, 4]);
        assert!(compose_text_stream(&value, Some(&features(1, 2, 5, 3))).is_err());
    }
}
