//! Small parameterised layers bound into a [`Graph`] from a [`ParamStore`].

use rand::Rng;
use skypart_tensor::{Graph, ParamGroup, ParamId, ParamKind, ParamStore, Tensor, Var};

use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / (fan_in as f64).sqrt();
        let w = store.add(format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], std, rng), ParamKind::weight(group))?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out]), ParamKind::no_decay(group))?)
        } else {
            None
        };
        Ok(Linear { w, b, fan_in, fan_out })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        Ok(g.affine(x, w, b)?)
    }
}

/// Row-wise layer norm followed by a learned per-feature scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: ParamGroup) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[1, dim]), ParamKind::no_decay(group))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[1, dim]), ParamKind::no_decay(group))?;
        Ok(LayerNorm { gamma, beta })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let n = g.layer_norm(x)?;
        let (gamma, beta) = (g.param(store, self.gamma), g.param(store, self.beta));
        let s = g.mul_row(n, gamma)?;
        Ok(g.add_row(s, beta)?)
    }
}
