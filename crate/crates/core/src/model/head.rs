//! Projection head mapping encoder tokens to prototype scores.

use super::params::{init_linear, linear, Bound, Init, Params};
use crate::error::Result;
use crate::tensor::{Graph, Var};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden: usize,
    pub bottleneck: usize,
    pub prototypes: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            bottleneck: 64,
            prototypes: 256,
        }
    }
}

/// MLP (GELU) → L2 normalization → weight-normalized prototype layer.
#[derive(Clone, Debug)]
pub struct ProtoHead {
    pub cfg: HeadConfig,
    pub prefix: String,
}

impl ProtoHead {
    pub fn new(cfg: HeadConfig, prefix: impl Into<String>) -> Self {
        Self {
            cfg,
            prefix: prefix.into(),
        }
    }

    pub fn init(&self, init: &mut Init, in_dim: usize) -> Params {
        let c = &self.cfg;
        let mut p = Params::new();
        let pre = &self.prefix;
        init_linear(&mut p, init, &format!("{pre}.fc1"), in_dim, c.hidden);
        init_linear(&mut p, init, &format!("{pre}.fc2"), c.hidden, c.hidden);
        init_linear(&mut p, init, &format!("{pre}.fc3"), c.hidden, c.bottleneck);
        p.insert(
            format!("{pre}.prototypes"),
            init.trunc_normal(&[c.prototypes, c.bottleneck], 0.02),
        );
        p
    }

    /// `[..., in_dim]` features to `[..., prototypes]` scores.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let pre = &self.prefix;
        let h = linear(g, p, &format!("{pre}.fc1"), x)?;
        let h = g.gelu(h)?;
        let h = linear(g, p, &format!("{pre}.fc2"), h)?;
        let h = g.gelu(h)?;
        let z = linear(g, p, &format!("{pre}.fc3"), h)?;
        let z = g.l2_normalize(z)?;
        let protos = g.l2_normalize(p.var(&format!("{pre}.prototypes"))?)?;
        let w = g.transpose(protos)?;
        g.matmul(z, w)
    }
}
