//! AdamW with exportable moments, so interrupted runs resume exactly.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::checkpoint::{Array, Checkpoint};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, clip: 1.0 }
    }
}

pub struct AdamW {
    vars: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    pub params: AdamWParams,
}

impl AdamW {
    pub fn new(vars: Vec<(String, Var)>, params: AdamWParams) -> Result<Self> {
        let m = vars.iter().map(|(_, v)| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self { vars, m, v, step: 0, params })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update; vars without a gradient are left alone. Returns the pre-clip gradient norm.
    pub fn step(&mut self, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        // Detached: gradients can carry the forward graph, which the moments would otherwise keep alive.
        let gs: Vec<Option<Tensor>> = self.vars.iter().map(|(_, v)| grads.get(v).map(Tensor::detach)).collect();
        for g in gs.iter().flatten() {
            sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm {norm}")));
        }
        let scale = if self.params.clip > 0.0 && norm > self.params.clip { self.params.clip / norm } else { 1.0 };
        self.step += 1;
        let p = self.params;
        let t = self.step as i32;
        let bc1 = 1.0 - p.beta1.powi(t);
        let bc2 = 1.0 - p.beta2.powi(t);
        for (i, g) in gs.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let g = (g * scale)?;
            let var = &self.vars[i].1;
            self.m[i] = ((&self.m[i] * p.beta1)? + (&g * (1.0 - p.beta1))?)?;
            self.v[i] = ((&self.v[i] * p.beta2)? + (g.sqr()? * (1.0 - p.beta2))?)?;
            let upd = ((&self.m[i] / bc1)? / ((&self.v[i] / bc2)?.sqrt()? + p.eps)?)?;
            let decayed = (var.as_tensor().detach() * (1.0 - p.lr * p.weight_decay))?;
            var.set(&(decayed - (upd * p.lr)?)?)?;
        }
        Ok(norm)
    }

    /// Stores moments and the step counter under `prefix`.
    pub fn save_state(&self, ck: &mut Checkpoint, prefix: &str) -> Result<()> {
        let mut push = |name: String, t: &Tensor| -> Result<()> {
            let data = t.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            ck.arrays.push(Array {
                name,
                shape: t.dims().to_vec(),
                dtype: candle_core::DType::F64,
                data: data.iter().flat_map(|x| x.to_le_bytes()).collect(),
            });
            Ok(())
        };
        for (i, (name, _)) in self.vars.iter().enumerate() {
            push(format!("{prefix}m.{name}"), &self.m[i])?;
            push(format!("{prefix}v.{name}"), &self.v[i])?;
        }
        let step = Tensor::new(&[self.step as f64], &candle_core::Device::Cpu)?;
        push(format!("{prefix}step"), &step)
    }

    pub fn load_state(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        let map: BTreeMap<&str, &Array> = ck.arrays.iter().map(|a| (a.name.as_str(), a)).collect();
        let get = |name: String, like: &Tensor| -> Result<Tensor> {
            let a = map.get(name.as_str()).ok_or_else(|| Error::Checkpoint(format!("missing optimizer array `{name}`")))?;
            if a.shape.as_slice() != like.dims() {
                return Err(Error::Checkpoint(format!("optimizer array `{name}` has shape {:?}", a.shape)));
            }
            Ok(Tensor::from_vec(a.to_f64()?, a.shape.as_slice(), like.device())?.to_dtype(like.dtype())?)
        };
        for i in 0..self.vars.len() {
            let name = self.vars[i].0.clone();
            self.m[i] = get(format!("{prefix}m.{name}"), &self.m[i])?;
            self.v[i] = get(format!("{prefix}v.{name}"), &self.v[i])?;
        }
        let step = map.get(format!("{prefix}step").as_str()).ok_or_else(|| Error::Checkpoint("missing optimizer step".into()))?;
        self.step = step.to_f64()?[0] as u64;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn minimizes_a_quadratic_and_resumes_exactly() {
        let run = |split: Option<usize>| -> Vec<f64> {
            let x = Var::from_tensor(&Tensor::new(&[3.0f64, -2.0], &Device::Cpu).unwrap()).unwrap();
            let params = AdamWParams { lr: 0.1, ..Default::default() };
            let mut opt = AdamW::new(vec![("x".into(), x.clone())], params).unwrap();
            for i in 0..50 {
                if Some(i) == split {
                    let mut ck = Checkpoint::new("t", i as u64, "");
                    opt.save_state(&mut ck, "opt.").unwrap();
                    opt = AdamW::new(vec![("x".into(), x.clone())], params).unwrap();
                    opt.load_state(&ck, "opt.").unwrap();
                }
                let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
                opt.step(&loss.backward().unwrap()).unwrap();
            }
            x.as_tensor().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()
        };
        let full = run(None);
        assert!(full.iter().all(|v| v.abs() < 0.5), "{full:?}");
        assert_eq!(full, run(Some(20)));
    }
}
