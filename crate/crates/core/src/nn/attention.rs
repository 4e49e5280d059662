use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

use super::{Forward, Init, Linear, ParamStore};

/// Normalisation floor for the L2-normalised queries and keys in XCA.
pub const XCA_NORM_EPS: f64 = 1e-12;

/// Scaled dot-product attention over the last two axes:
/// `softmax(q kᵀ / sqrt(d_h)) v`. Returns the output and the row-stochastic
/// weight matrix `[.., t_q, t_k]`.
///
/// `key_valid`, when given, marks which keys of each leading-axis item may be
/// attended to (length `shape[0] * t_k`).
pub fn attention_with_weights<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    key_valid: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if qs.len() < 2 || ks.len() != qs.len() || vs.len() != qs.len() {
        return Err(Error::dim(format!("attention operands {qs:?}, {ks:?}, {vs:?}")));
    }
    let r = qs.len();
    if qs[r - 2] == 0 || ks[r - 2] == 0 {
        return Err(Error::dim("attention over zero tokens".to_string()));
    }
    if qs[r - 1] != ks[r - 1] || ks[r - 2] != vs[r - 2] {
        return Err(Error::dim(format!(
            "attention shapes do not conform: q {qs:?}, k {ks:?}, v {vs:?}"
        )));
    }
    let d_h = qs[r - 1];
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (d_h as f64).sqrt())?;
    let weights = match key_valid {
        Some(mask) => tape.masked_softmax(scores, mask)?,
        None => tape.softmax(scores, -1)?,
    };
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

pub fn attention<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, v: Var) -> Result<Var> {
    Ok(attention_with_weights(tape, q, k, v, None)?.0)
}

/// Cross-covariance attention on per-head `[.., t, d_h]` operands:
/// `v · softmax(k̂ᵀ q̂ / tau)`, where `q̂`, `k̂` have each channel normalised
/// to unit L2 norm over the tokens and the softmax runs over the key-channel
/// axis, so every column of the `d_h x d_h` weight matrix sums to 1.
///
/// `tau` must broadcast against `[.., d_h, d_h]`. Returns output and weights.
pub fn xca_with_weights<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, tau: Var) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if qs.len() < 2 || qs != ks || qs != vs {
        return Err(Error::dim(format!(
            "xca operands must share a shape: {qs:?}, {ks:?}, {vs:?}"
        )));
    }
    if tape.value(tau).data().iter().any(|t| *t == T::zero()) {
        return Err(Error::Parameter("xca temperature must be non-zero".into()));
    }
    let token_axis = -2;
    let qn = tape.l2_normalize(q, token_axis, XCA_NORM_EPS)?;
    let kn = tape.l2_normalize(k, token_axis, XCA_NORM_EPS)?;
    let knt = tape.transpose(kn)?;
    let logits = tape.matmul(knt, qn)?;
    let logits = tape.div(logits, tau)?;
    let weights = tape.softmax(logits, -2)?;
    let out = tape.matmul(v, weights)?;
    Ok((out, weights))
}

/// `[b, t, d]` → `[b, heads, t, d/heads]`.
pub fn split_heads<T: Scalar>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let [b, t, d] = s[..] else {
        return Err(Error::dim(format!("expected [b, t, d], got {s:?}")));
    };
    if d % heads != 0 {
        return Err(Error::config(
            "heads",
            format!("dim {d} not divisible by {heads} heads"),
        ));
    }
    let r = tape.reshape(x, &[b, t, heads, d / heads])?;
    tape.permute(r, &[0, 2, 1, 3])
}

/// `[b, heads, t, d_h]` → `[b, t, heads * d_h]`.
pub fn merge_heads<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let [b, h, t, dh] = s[..] else {
        return Err(Error::dim(format!("expected [b, h, t, d_h], got {s:?}")));
    };
    let p = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(p, &[b, t, h * dh])
}

fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::config(
            "heads",
            format!("dim {dim} not divisible by {heads} heads"),
        ));
    }
    Ok(())
}

/// Multi-head self-attention with `W_Q, W_K, W_V, W_O` (all `d x d`, biased).
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub dim: usize,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(dim: usize, heads: usize) -> Result<Self> {
        check_heads(dim, heads)?;
        Ok(Self { dim, heads })
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, prefix: &str, rng: &mut CounterRng) -> Result<()> {
        for name in ["q", "k", "v"] {
            Linear::new(self.dim, self.dim).init(store, &format!("{prefix}.{name}"), rng)?;
        }
        Linear::new(self.dim, self.dim)
            .zeroed()
            .init(store, &format!("{prefix}.proj"), rng)
    }

    /// `x: [b, t, d]`. Keys where `key_valid` is false are excluded.
    pub fn forward<T: Scalar>(
        &self,
        fw: &mut Forward<'_, T>,
        prefix: &str,
        x: Var,
        key_valid: Option<&[bool]>,
    ) -> Result<Var> {
        Ok(self.forward_with_weights(fw, prefix, x, key_valid)?.0)
    }

    pub fn forward_with_weights<T: Scalar>(
        &self,
        fw: &mut Forward<'_, T>,
        prefix: &str,
        x: Var,
        key_valid: Option<&[bool]>,
    ) -> Result<(Var, Var)> {
        let lin = Linear::new(self.dim, self.dim);
        let q = lin.forward(fw, &format!("{prefix}.q"), x)?;
        let k = lin.forward(fw, &format!("{prefix}.k"), x)?;
        let v = lin.forward(fw, &format!("{prefix}.v"), x)?;
        let tape = &mut fw.tape;
        let (q, k, v) = (
            split_heads(tape, q, self.heads)?,
            split_heads(tape, k, self.heads)?,
            split_heads(tape, v, self.heads)?,
        );
        let (o, w) = attention_with_weights(tape, q, k, v, key_valid)?;
        let o = merge_heads(tape, o)?;
        Ok((lin.forward(fw, &format!("{prefix}.proj"), o)?, w))
    }
}

/// Cross-covariance attention with a learnable per-head temperature
/// (`{prefix}.temperature`, shape `[heads, 1, 1]`, initialised to 1).
#[derive(Debug, Clone, Copy)]
pub struct XcaAttention {
    pub dim: usize,
    pub heads: usize,
}

impl XcaAttention {
    pub fn new(dim: usize, heads: usize) -> Result<Self> {
        check_heads(dim, heads)?;
        Ok(Self { dim, heads })
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, prefix: &str, rng: &mut CounterRng) -> Result<()> {
        for name in ["q", "k", "v"] {
            Linear::new(self.dim, self.dim).init(store, &format!("{prefix}.{name}"), rng)?;
        }
        Linear::new(self.dim, self.dim)
            .zeroed()
            .init(store, &format!("{prefix}.proj"), rng)?;
        store.add(
            format!("{prefix}.temperature"),
            &[self.heads, 1, 1],
            Init::Const(1.0),
            false,
            rng,
        )
    }

    pub fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, prefix: &str, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(fw, prefix, x)?.0)
    }

    pub fn forward_with_weights<T: Scalar>(&self, fw: &mut Forward<'_, T>, prefix: &str, x: Var) -> Result<(Var, Var)> {
        let lin = Linear::new(self.dim, self.dim);
        let q = lin.forward(fw, &format!("{prefix}.q"), x)?;
        let k = lin.forward(fw, &format!("{prefix}.k"), x)?;
        let v = lin.forward(fw, &format!("{prefix}.v"), x)?;
        let tau = fw.p(&format!("{prefix}.temperature"))?;
        let tape = &mut fw.tape;
        let (q, k, v) = (
            split_heads(tape, q, self.heads)?,
            split_heads(tape, k, self.heads)?,
            split_heads(tape, v, self.heads)?,
        );
        let (o, w) = xca_with_weights(tape, q, k, v, tau)?;
        let o = merge_heads(tape, o)?;
        Ok((lin.forward(fw, &format!("{prefix}.proj"), o)?, w))
    }
}

/// Class attention: only the class token (position 0) queries; keys and
/// values come from every token. Returns the `[b, 1, d]` class update.
#[derive(Debug, Clone, Copy)]
pub struct ClassAttention {
    pub dim: usize,
    pub heads: usize,
}

impl ClassAttention {
    pub fn new(dim: usize, heads: usize) -> Result<Self> {
        check_heads(dim, heads)?;
        Ok(Self { dim, heads })
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, prefix: &str, rng: &mut CounterRng) -> Result<()> {
        MultiHeadAttention {
            dim: self.dim,
            heads: self.heads,
        }
        .init(store, prefix, rng)
    }

    pub fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, prefix: &str, x: Var) -> Result<Var> {
        let lin = Linear::new(self.dim, self.dim);
        let cls = fw.tape.narrow(x, 1, 0, 1)?;
        let q = lin.forward(fw, &format!("{prefix}.q"), cls)?;
        let k = lin.forward(fw, &format!("{prefix}.k"), x)?;
        let v = lin.forward(fw, &format!("{prefix}.v"), x)?;
        let tape = &mut fw.tape;
        let (q, k, v) = (
            split_heads(tape, q, self.heads)?,
            split_heads(tape, k, self.heads)?,
            split_heads(tape, v, self.heads)?,
        );
        let o = attention(tape, q, k, v)?;
        let o = merge_heads(tape, o)?;
        lin.forward(fw, &format!("{prefix}.proj"), o)
    }
}
