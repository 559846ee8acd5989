use std::fmt;

use serde::{Deserialize, Serialize};

use super::config::{LayerConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::kernel::Tensor;

/// Weights of one sandwich-norm block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub pre_attn_gamma: Vec<f32>,
    pub post_attn_gamma: Option<Vec<f32>>,
    pub pre_ffn_gamma: Vec<f32>,
    pub post_ffn_gamma: Option<Vec<f32>>,
    /// d × (query_heads · head_dim)
    pub wq: Tensor,
    /// d × (kv_groups · head_dim)
    pub wk: Tensor,
    /// d × (kv_groups · head_dim)
    pub wv: Tensor,
    /// (query_heads · head_dim) × d
    pub wo: Tensor,
    /// d × ffn_dim
    pub w_gate: Tensor,
    /// d × ffn_dim
    pub w_up: Tensor,
    /// ffn_dim × d
    pub w_down: Tensor,
}

/// Complete checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStore {
    pub config: ModelConfig,
    /// V × d
    pub embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_gamma: Vec<f32>,
    /// d × V
    pub output_head: Tensor,
}

/// One RMSNorm layer of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormSite {
    PreAttn(usize),
    PostAttn(usize),
    PreFfn(usize),
    PostFfn(usize),
    Final,
}

impl NormSite {
    pub fn name(&self) -> String {
        match self {
            NormSite::PreAttn(l) => format!("layers.{l}.pre_attn_norm"),
            NormSite::PostAttn(l) => format!("layers.{l}.post_attn_norm"),
            NormSite::PreFfn(l) => format!("layers.{l}.pre_ffn_norm"),
            NormSite::PostFfn(l) => format!("layers.{l}.post_ffn_norm"),
            NormSite::Final => "final_norm".to_string(),
        }
    }
}

impl fmt::Display for NormSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Borrowed view of a named parameter, vectors reported as `[len]`.
pub enum Param<'a> {
    Vector(&'a [f32]),
    Matrix(&'a Tensor),
}

impl Param<'_> {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            Param::Vector(v) => vec![v.len()],
            Param::Matrix(t) => vec![t.rows(), t.cols()],
        }
    }

    pub fn data(&self) -> &[f32] {
        match self {
            Param::Vector(v) => v,
            Param::Matrix(t) => t.data(),
        }
    }
}

pub(crate) const LAYER_MATRICES: [&str; 7] = ["wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down"];

impl LayerWeights {
    pub fn matrix(&self, name: &str) -> Option<&Tensor> {
        Some(match name {
            "wq" => &self.wq,
            "wk" => &self.wk,
            "wv" => &self.wv,
            "wo" => &self.wo,
            "w_gate" => &self.w_gate,
            "w_up" => &self.w_up,
            "w_down" => &self.w_down,
            _ => return None,
        })
    }

    pub fn matrix_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        Some(match name {
            "wq" => &mut self.wq,
            "wk" => &mut self.wk,
            "wv" => &mut self.wv,
            "wo" => &mut self.wo,
            "w_gate" => &mut self.w_gate,
            "w_up" => &mut self.w_up,
            "w_down" => &mut self.w_down,
            _ => return None,
        })
    }

    /// Expected matrix shapes for a layer of the given configuration.
    pub(crate) fn expected_shape(
        name: &str,
        d: usize,
        head_dim: usize,
        l: &LayerConfig,
    ) -> (usize, usize) {
        let q = l.query_heads * head_dim;
        let kv = l.kv_groups * head_dim;
        match name {
            "wq" => (d, q),
            "wk" | "wv" => (d, kv),
            "wo" => (q, d),
            "w_gate" | "w_up" => (d, l.ffn_dim),
            "w_down" => (l.ffn_dim, d),
            _ => unreachable!("unknown layer matrix {name}"),
        }
    }
}

impl WeightStore {
    pub fn gamma(&self, site: NormSite) -> Option<&Vec<f32>> {
        match site {
            NormSite::PreAttn(l) => self.layers.get(l).map(|w| &w.pre_attn_gamma),
            NormSite::PostAttn(l) => self.layers.get(l)?.post_attn_gamma.as_ref(),
            NormSite::PreFfn(l) => self.layers.get(l).map(|w| &w.pre_ffn_gamma),
            NormSite::PostFfn(l) => self.layers.get(l)?.post_ffn_gamma.as_ref(),
            NormSite::Final => Some(&self.final_gamma),
        }
    }

    pub fn gamma_mut(&mut self, site: NormSite) -> Option<&mut Vec<f32>> {
        match site {
            NormSite::PreAttn(l) => self.layers.get_mut(l).map(|w| &mut w.pre_attn_gamma),
            NormSite::PostAttn(l) => self.layers.get_mut(l)?.post_attn_gamma.as_mut(),
            NormSite::PreFfn(l) => self.layers.get_mut(l).map(|w| &mut w.pre_ffn_gamma),
            NormSite::PostFfn(l) => self.layers.get_mut(l)?.post_ffn_gamma.as_mut(),
            NormSite::Final => Some(&mut self.final_gamma),
        }
    }

    /// All RMSNorm layers present, in forward order.
    pub fn norm_sites(&self) -> Vec<NormSite> {
        let mut sites = Vec::with_capacity(self.config.num_norms());
        for (l, w) in self.layers.iter().enumerate() {
            sites.push(NormSite::PreAttn(l));
            if w.post_attn_gamma.is_some() {
                sites.push(NormSite::PostAttn(l));
            }
            sites.push(NormSite::PreFfn(l));
            if w.post_ffn_gamma.is_some() {
                sites.push(NormSite::PostFfn(l));
            }
        }
        sites.push(NormSite::Final);
        sites
    }

    /// Every parameter with its checkpoint name, in manifest order.
    pub fn named_params(&self) -> Vec<(String, Param<'_>)> {
        let mut out = vec![("embedding".to_string(), Param::Matrix(&self.embedding))];
        for (l, w) in self.layers.iter().enumerate() {
            out.push((
                NormSite::PreAttn(l).name(),
                Param::Vector(&w.pre_attn_gamma),
            ));
            if let Some(g) = &w.post_attn_gamma {
                out.push((NormSite::PostAttn(l).name(), Param::Vector(g)));
            }
            out.push((NormSite::PreFfn(l).name(), Param::Vector(&w.pre_ffn_gamma)));
            if let Some(g) = &w.post_ffn_gamma {
                out.push((NormSite::PostFfn(l).name(), Param::Vector(g)));
            }
            for name in LAYER_MATRICES {
                out.push((
                    format!("layers.{l}.{name}"),
                    Param::Matrix(w.matrix(name).unwrap()),
                ));
            }
        }
        out.push(("final_norm".to_string(), Param::Vector(&self.final_gamma)));
        out.push(("output_head".to_string(), Param::Matrix(&self.output_head)));
        out
    }

    /// Expected manifest (name, shape) implied by the config alone.
    pub fn expected_manifest(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let d = config.hidden;
        let mut out = vec![("embedding".to_string(), vec![config.vocab, d])];
        for (l, lc) in config.layers.iter().enumerate() {
            out.push((NormSite::PreAttn(l).name(), vec![d]));
            if lc.attn_post_norm {
                out.push((NormSite::PostAttn(l).name(), vec![d]));
            }
            out.push((NormSite::PreFfn(l).name(), vec![d]));
            if lc.ffn_post_norm {
                out.push((NormSite::PostFfn(l).name(), vec![d]));
            }
            for name in LAYER_MATRICES {
                let (r, c) = LayerWeights::expected_shape(name, d, config.head_dim, lc);
                out.push((format!("layers.{l}.{name}"), vec![r, c]));
            }
        }
        out.push(("final_norm".to_string(), vec![d]));
        out.push(("output_head".to_string(), vec![d, config.vocab]));
        out
    }

    /// Checks config validity, every tensor shape and finiteness.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.layers.len() != self.config.num_layers() {
            return Err(Error::shape(format!(
                "config declares {} layers, store holds {}",
                self.config.num_layers(),
                self.layers.len()
            )));
        }
        for (l, (w, lc)) in self.layers.iter().zip(&self.config.layers).enumerate() {
            if w.post_attn_gamma.is_some() != lc.attn_post_norm {
                return Err(Error::shape(format!(
                    "layer {l}: post-attention norm presence disagrees with config"
                )));
            }
            if w.post_ffn_gamma.is_some() != lc.ffn_post_norm {
                return Err(Error::shape(format!(
                    "layer {l}: post-FFN norm presence disagrees with config"
                )));
            }
        }
        let expected = Self::expected_manifest(&self.config);
        let actual = self.named_params();
        for ((name, shape), (_, param)) in expected.iter().zip(&actual) {
            if &param.shape() != shape {
                return Err(Error::shape(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    param.shape(),
                    shape
                )));
            }
            if let Some(index) = param.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    tensor: name.clone(),
                    index,
                });
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.named_params()
            .iter()
            .map(|(_, p)| p.data().len())
            .sum()
    }
}
