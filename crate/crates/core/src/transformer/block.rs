use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::Result;
use crate::nn::{LayerNorm, Linear};

/// Pre-norm block: `x + attn(ln(x))`, then `x + ff(ln(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, ff_mult: usize, rng: &mut R) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, rng),
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            ff1: Linear::new(store, &format!("{name}.ff1"), dim, ff_mult * dim, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), ff_mult * dim, dim, rng),
            heads,
            dim,
        }
    }

    /// `x` is `[batch * seq, dim]`; `mask` holds one `seq × seq` matrix per
    /// sequence.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, batch: usize, mask: &Rc<[bool]>) -> Result<Var> {
        let h = self.norm1.forward(g, store, x)?;
        let qkv = self.qkv.forward(g, store, h)?;
        let d = self.dim;
        let q = g.slice_cols(qkv, 0, d)?;
        let k = g.slice_cols(qkv, d, 2 * d)?;
        let v = g.slice_cols(qkv, 2 * d, 3 * d)?;
        let a = g.attention(q, k, v, self.heads, batch, Rc::clone(mask))?;
        let a = self.proj.forward(g, store, a)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, store, x)?;
        let h = self.ff1.forward(g, store, h)?;
        let h = g.elu(h);
        let h = self.ff2.forward(g, store, h)?;
        g.add(x, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.norm1.params(), self.qkv.params(), self.proj.params(), self.norm2.params(), self.ff1.params(), self.ff2.params()]
            .concat()
    }
}

/// Blocks followed by a final layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Stack {
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

impl Stack {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        layers: usize,
        dim: usize,
        heads: usize,
        ff_mult: usize,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..layers).map(|i| Block::new(store, &format!("{name}.{i}"), dim, heads, ff_mult, rng)).collect();
        Self { blocks, norm: LayerNorm::new(store, &format!("{name}.norm"), dim) }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var, batch: usize, mask: &Rc<[bool]>) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(g, store, x, batch, mask)?;
        }
        self.norm.forward(g, store, x)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.blocks.iter().flat_map(Block::params).collect();
        p.extend(self.norm.params());
        p
    }
}
