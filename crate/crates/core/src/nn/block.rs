use crate::error::Result;
use crate::rng::CounterRng;
use crate::tape::Var;
use crate::tensor::Scalar;

use super::attention::{ClassAttention, MultiHeadAttention, XcaAttention};
use super::{
    init_batch_norm, init_layer_norm, map_to_tokens, tokens_to_map, Activation, Conv, Forward, Linear, ParamStore,
};

/// Position-wise feed-forward: `fc2(act(fc1(x)))`, `d -> hidden -> d`.
#[derive(Debug, Clone, Copy)]
pub struct Ffn {
    pub dim: usize,
    pub hidden: usize,
    pub act: Activation,
}

impl Ffn {
    pub fn new(dim: usize, hidden: usize, act: Activation) -> Self {
        Self { dim, hidden, act }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, prefix: &str, rng: &mut CounterRng) -> Result<()> {
        Linear::new(self.dim, self.hidden).init(store, &format!("{prefix}.fc1"), rng)?;
        Linear::new(self.hidden, self.dim)
            .zeroed()
            .init(store, &format!("{prefix}.fc2"), rng)
    }

    pub fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, prefix: &str, x: Var) -> Result<Var> {
        let h = Linear::new(self.dim, self.hidden).forward(fw, &format!("{prefix}.fc1"), x)?;
        let h = self.act.apply(&mut fw.tape, h)?;
        Linear::new(self.hidden, self.dim).forward(fw, &format!("{prefix}.fc2"), h)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum BlockAttention {
    Msa(MultiHeadAttention),
    Xca(XcaAttention),
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `+ FFN(LN(.))`.
#[derive(Debug, Clone, Copy)]
pub struct TransformerBlock {
    pub attn: BlockAttention,
    pub ffn: Ffn,
}

impl TransformerBlock {
    pub fn msa(dim: usize, heads: usize, hidden_ratio: usize, act: Activation) -> Result<Self> {
        Ok(Self {
            attn: BlockAttention::Msa(MultiHeadAttention::new(dim, heads)?),
            ffn: Ffn::new(dim, dim * hidden_ratio, act),
        })
    }

    pub fn xca(dim: usize, heads: usize, hidden_ratio: usize, act: Activation) -> Result<Self> {
        Ok(Self {
            attn: BlockAttention::Xca(XcaAttention::new(dim, heads)?),
            ffn: Ffn::new(dim, dim * hidden_ratio, act),
        })
    }

    pub fn dim(&self) -> usize {
        self.ffn.dim
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, prefix: &str, rng: &mut CounterRng) -> Result<()> {
        init_layer_norm(store, &format!("{prefix}.norm1"), self.dim(), rng)?;
        match self.attn {
            BlockAttention::Msa(a) => a.init(store, &format!("{prefix}.attn"), rng)?,
            BlockAttention::Xca(a) => a.init(store, &format!("{prefix}.attn"), rng)?,
        }
        init_layer_norm(store, &format!("{prefix}.norm2"), self.dim(), rng)?;
        self.ffn.init(store, &format!("{prefix}.ffn"), rng)
    }

    /// `x: [b, t, d]`; `key_valid` masks keys for multi-head attention and
    /// is ignored by XCA.
    pub fn forward<T: Scalar>(
        &self,
        fw: &mut Forward<'_, T>,
        prefix: &str,
        x: Var,
        key_valid: Option<&[bool]>,
    ) -> Result<Var> {
        let h = fw.layer_norm(&format!("{prefix}.norm1"), x)?;
        let a = match self.attn {
            BlockAttention::Msa(att) => att.forward(fw, &format!("{prefix}.attn"), h, key_valid)?,
            BlockAttention::Xca(att) => att.forward(fw, &format!("{prefix}.attn"), h)?,
        };
        let x = fw.tape.add(x, a)?;
        let h = fw.layer_norm(&format!("{prefix}.norm2"), x)?;
        let f = self.ffn.forward(fw, &format!("{prefix}.ffn"), h)?;
        fw.tape.add(x, f)
    }
}

/// Local patch interaction: on the `h x w` token grid,
/// `x + dwconv(BN(GELU(dwconv(LN(x)))))` with two depthwise 3x3 convs.
#[derive(Debug, Clone, Copy)]
pub struct Lpi {
    pub dim: usize,
}

impl Lpi {
    fn conv(&self) -> Conv {
        Conv::depthwise(self.dim, 3, 1).with_bias()
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, prefix: &str, rng: &mut CounterRng) -> Result<()> {
        init_layer_norm(store, &format!("{prefix}.norm"), self.dim, rng)?;
        self.conv().init(store, &format!("{prefix}.conv1"), rng)?;
        init_batch_norm(store, &format!("{prefix}.bn"), self.dim, rng)?;
        self.conv().init(store, &format!("{prefix}.conv2"), rng)
    }

    /// `x: [b, h*w, d]` (no class token).
    pub fn forward<T: Scalar>(
        &self,
        fw: &mut Forward<'_, T>,
        prefix: &str,
        x: Var,
        grid: (usize, usize),
    ) -> Result<Var> {
        let h = fw.layer_norm(&format!("{prefix}.norm"), x)?;
        let m = tokens_to_map(&mut fw.tape, h, grid.0, grid.1)?;
        let m = self.conv().forward(fw, &format!("{prefix}.conv1"), m)?;
        let m = fw.tape.gelu(m)?;
        let m = fw.batch_norm(&format!("{prefix}.bn"), m)?;
        let m = self.conv().forward(fw, &format!("{prefix}.conv2"), m)?;
        let t = map_to_tokens(&mut fw.tape, m)?;
        fw.tape.add(x, t)
    }
}

/// One XCiT layer: `x + XCA(LN(x))`, then LPI, then `+ FFN(LN(.))`.
#[derive(Debug, Clone, Copy)]
pub struct XcitLayer {
    pub block: TransformerBlock,
    pub lpi: Lpi,
}

impl XcitLayer {
    pub fn new(dim: usize, heads: usize, hidden_ratio: usize) -> Result<Self> {
        Ok(Self {
            block: TransformerBlock::xca(dim, heads, hidden_ratio, Activation::Gelu)?,
            lpi: Lpi { dim },
        })
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, prefix: &str, rng: &mut CounterRng) -> Result<()> {
        self.block.init(store, prefix, rng)?;
        self.lpi.init(store, &format!("{prefix}.lpi"), rng)
    }

    pub fn forward<T: Scalar>(
        &self,
        fw: &mut Forward<'_, T>,
        prefix: &str,
        x: Var,
        grid: (usize, usize),
    ) -> Result<Var> {
        let BlockAttention::Xca(att) = self.block.attn else {
            unreachable!("XcitLayer is always built with XCA")
        };
        let h = fw.layer_norm(&format!("{prefix}.norm1"), x)?;
        let a = att.forward(fw, &format!("{prefix}.attn"), h)?;
        let x = fw.tape.add(x, a)?;
        let x = self.lpi.forward(fw, &format!("{prefix}.lpi"), x, grid)?;
        let h = fw.layer_norm(&format!("{prefix}.norm2"), x)?;
        let f = self.block.ffn.forward(fw, &format!("{prefix}.ffn"), h)?;
        fw.tape.add(x, f)
    }
}

/// Class-attention block: updates only the class token (position 0),
/// `cls + CA(LN(x))`, then `cls + FFN(LN(cls))`; patch tokens pass through.
#[derive(Debug, Clone, Copy)]
pub struct ClassAttentionBlock {
    pub attn: ClassAttention,
    pub ffn: Ffn,
}

impl ClassAttentionBlock {
    pub fn new(dim: usize, heads: usize, hidden_ratio: usize) -> Result<Self> {
        Ok(Self {
            attn: ClassAttention::new(dim, heads)?,
            ffn: Ffn::new(dim, dim * hidden_ratio, Activation::Gelu),
        })
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, prefix: &str, rng: &mut CounterRng) -> Result<()> {
        init_layer_norm(store, &format!("{prefix}.norm1"), self.ffn.dim, rng)?;
        self.attn.init(store, &format!("{prefix}.attn"), rng)?;
        init_layer_norm(store, &format!("{prefix}.norm2"), self.ffn.dim, rng)?;
        self.ffn.init(store, &format!("{prefix}.ffn"), rng)
    }

    /// `x: [b, 1 + n, d]` with the class token first.
    pub fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, prefix: &str, x: Var) -> Result<Var> {
        let n = fw.tape.shape(x)[1];
        let h = fw.layer_norm(&format!("{prefix}.norm1"), x)?;
        let a = self.attn.forward(fw, &format!("{prefix}.attn"), h)?;
        let cls = fw.tape.narrow(x, 1, 0, 1)?;
        let cls = fw.tape.add(cls, a)?;
        let h = fw.layer_norm(&format!("{prefix}.norm2"), cls)?;
        let f = self.ffn.forward(fw, &format!("{prefix}.ffn"), h)?;
        let cls = fw.tape.add(cls, f)?;
        if n == 1 {
            return Ok(cls);
        }
        let rest = fw.tape.narrow(x, 1, 1, n - 1)?;
        fw.tape.concat(&[cls, rest], 1)
    }
}
