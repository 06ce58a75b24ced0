use std::collections::BTreeMap;
use std::fmt;

use super::{Layer, Slot, TransformerModel};
use crate::numerics::Matrix;

/// Names one parameter tensor of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamId {
    Embedding,
    AttnNorm(usize),
    MlpNorm(usize),
    Dense(usize, Slot),
    FactorA(usize, Slot),
    FactorB(usize, Slot),
    FinalNorm,
}

impl ParamId {
    /// Checkpoint tensor name (`3.wq`, `3.wq.a`, `3.attn_norm`, ...).
    pub fn tensor_name(&self) -> String {
        match *self {
            ParamId::Embedding => "embedding".into(),
            ParamId::FinalNorm => "final_norm".into(),
            ParamId::AttnNorm(l) => format!("{l}.attn_norm"),
            ParamId::MlpNorm(l) => format!("{l}.mlp_norm"),
            ParamId::Dense(l, s) => format!("{l}.{s}"),
            ParamId::FactorA(l, s) => format!("{l}.{s}.a"),
            ParamId::FactorB(l, s) => format!("{l}.{s}.b"),
        }
    }

    pub fn is_norm(&self) -> bool {
        matches!(self, ParamId::AttnNorm(_) | ParamId::MlpNorm(_) | ParamId::FinalNorm)
    }

    pub fn is_factor(&self) -> bool {
        matches!(self, ParamId::FactorA(..) | ParamId::FactorB(..))
    }

    pub fn layer(&self) -> Option<usize> {
        match *self {
            ParamId::Embedding | ParamId::FinalNorm => None,
            ParamId::AttnNorm(l)
            | ParamId::MlpNorm(l)
            | ParamId::Dense(l, _)
            | ParamId::FactorA(l, _)
            | ParamId::FactorB(l, _) => Some(l),
        }
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tensor_name())
    }
}

impl TransformerModel {
    /// Every parameter tensor in canonical (checkpoint) order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![ParamId::Embedding];
        for (l, layer) in self.layers.iter().enumerate() {
            ids.push(ParamId::AttnNorm(l));
            ids.push(ParamId::MlpNorm(l));
            for slot in Slot::ALL {
                match layer {
                    Layer::Dense(_) => ids.push(ParamId::Dense(l, slot)),
                    Layer::LowRank(_) => {
                        ids.push(ParamId::FactorA(l, slot));
                        ids.push(ParamId::FactorB(l, slot));
                    }
                }
            }
        }
        ids.push(ParamId::FinalNorm);
        ids
    }

    /// The matrix-valued parameters: embedding, dense slots and low-rank factors.
    pub fn matrix_ids(&self) -> Vec<ParamId> {
        self.param_ids().into_iter().filter(|id| !id.is_norm()).collect()
    }

    pub fn param(&self, id: &ParamId) -> &[f64] {
        match *id {
            ParamId::Embedding => self.embedding.as_slice(),
            ParamId::FinalNorm => &self.final_norm,
            ParamId::AttnNorm(l) => self.layers[l].attn_norm(),
            ParamId::MlpNorm(l) => self.layers[l].mlp_norm(),
            ParamId::Dense(l, s) => match &self.layers[l] {
                Layer::Dense(w) => w[s].as_slice(),
                Layer::LowRank(_) => panic!("{id} is low-rank"),
            },
            ParamId::FactorA(l, s) | ParamId::FactorB(l, s) => match &self.layers[l] {
                Layer::LowRank(w) if matches!(id, ParamId::FactorA(..)) => w[s].a.as_slice(),
                Layer::LowRank(w) => w[s].b.as_slice(),
                Layer::Dense(_) => panic!("{id} is dense"),
            },
        }
    }

    pub fn param_mut(&mut self, id: &ParamId) -> &mut [f64] {
        match *id {
            ParamId::Embedding => self.embedding.as_mut_slice(),
            ParamId::FinalNorm => &mut self.final_norm,
            ParamId::AttnNorm(l) => match &mut self.layers[l] {
                Layer::Dense(w) => &mut w.attn_norm,
                Layer::LowRank(w) => &mut w.attn_norm,
            },
            ParamId::MlpNorm(l) => match &mut self.layers[l] {
                Layer::Dense(w) => &mut w.mlp_norm,
                Layer::LowRank(w) => &mut w.mlp_norm,
            },
            ParamId::Dense(l, s) => match &mut self.layers[l] {
                Layer::Dense(w) => w[s].as_mut_slice(),
                Layer::LowRank(_) => panic!("{id} is low-rank"),
            },
            ParamId::FactorA(l, s) => match &mut self.layers[l] {
                Layer::LowRank(w) => w[s].a.as_mut_slice(),
                Layer::Dense(_) => panic!("{id} is dense"),
            },
            ParamId::FactorB(l, s) => match &mut self.layers[l] {
                Layer::LowRank(w) => w[s].b.as_mut_slice(),
                Layer::Dense(_) => panic!("{id} is dense"),
            },
        }
    }

    /// `(rows, cols)`; norm scales report as `(1, d_model)`.
    pub fn param_shape(&self, id: &ParamId) -> (usize, usize) {
        let d = self.config.d_model;
        match *id {
            ParamId::Embedding => self.embedding.shape(),
            ParamId::FinalNorm | ParamId::AttnNorm(_) | ParamId::MlpNorm(_) => (1, d),
            ParamId::Dense(_, s) => self.config.slot_shape(s),
            ParamId::FactorA(l, s) | ParamId::FactorB(l, s) => match &self.layers[l] {
                Layer::LowRank(w) if matches!(id, ParamId::FactorA(..)) => w[s].a.shape(),
                Layer::LowRank(w) => w[s].b.shape(),
                Layer::Dense(_) => panic!("{id} is dense"),
            },
        }
    }
}

/// `∂L/∂θ` for every parameter tensor of a model. Norm scales are carried as
/// `1 x d_model` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub(crate) grads: BTreeMap<ParamId, Matrix>,
}

impl GradientSet {
    pub(crate) fn zeros_like(model: &TransformerModel) -> Self {
        let grads = model
            .param_ids()
            .into_iter()
            .map(|id| {
                let (r, c) = model.param_shape(&id);
                (id, Matrix::zeros(r, c))
            })
            .collect();
        Self { grads }
    }

    pub fn get(&self, id: &ParamId) -> Option<&Matrix> {
        self.grads.get(id)
    }

    pub(crate) fn get_mut(&mut self, id: &ParamId) -> &mut Matrix {
        self.grads.get_mut(id).expect("gradient slot allocated for every parameter")
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Matrix)> {
        self.grads.iter()
    }

    /// Gradients of matrix-valued parameters only.
    pub fn matrices(&self) -> impl Iterator<Item = (&ParamId, &Matrix)> {
        self.grads.iter().filter(|(id, _)| !id.is_norm())
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(Matrix::is_finite)
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .map(|g| g.as_slice().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.grads.values_mut().for_each(|g| g.scale(s));
    }
}
