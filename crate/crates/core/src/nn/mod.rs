//! Layers and blocks.
//!
//! Weights live in a [`ParamStore`] under dotted names
//! (`image.blocks.3.attn.q.weight`). A layer is a small config struct with
//! an `init` that registers its tensors under a prefix and a `forward` that
//! reads them back through a [`Forward`] context recording onto a tape.

pub mod attention;
pub mod block;
pub mod mobilevit;

use std::collections::HashMap;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::kernels::PadMode;
use crate::rng::{derive_seed, CounterRng};
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub use attention::{attention, ClassAttention, MultiHeadAttention, XcaAttention};
pub use block::{BlockAttention, ClassAttentionBlock, Ffn, Lpi, TransformerBlock, XcitLayer};
pub use mobilevit::{fold, unfold, InvertedResidual, MobileVitBlock};

pub const LN_EPS: f64 = 1e-6;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    TruncNormal(f64),
    Zeros,
    Ones,
    Const(f64),
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub value: Tensor<T>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Named learnable tensors plus non-learnable buffers (batch-norm running
/// statistics), both in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: IndexMap<String, ParamEntry<T>>,
    buffers: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
            buffers: IndexMap::new(),
        }
    }

    pub fn add(&mut self, name: String, shape: &[usize], init: Init, decay: bool, rng: &mut CounterRng) -> Result<()> {
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::Internal(format!("parameter `{name}` registered twice")));
        }
        let value = match init {
            Init::TruncNormal(std) => Tensor::from_fn(shape, |_| T::from_f64(rng.truncated_normal(std))),
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Const(c) => Tensor::full(shape, T::from_f64(c)),
        };
        self.params.insert(name, ParamEntry { value, decay });
        Ok(())
    }

    pub fn add_buffer(&mut self, name: String, value: Tensor<T>) -> Result<()> {
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::Internal(format!("buffer `{name}` registered twice")));
        }
        self.buffers.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::Internal(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::Internal(format!("unknown parameter `{name}`")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Internal(format!("unknown buffer `{name}`")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::Internal(format!("unknown buffer `{name}`")))
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Number of learnable scalars.
    pub fn num_params(&self) -> usize {
        self.params.values().map(|e| e.value.len()).sum()
    }

    pub fn num_tensors(&self) -> usize {
        self.params.len()
    }

    /// Same names and shapes, values converted to `U`.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            value: e.value.cast(),
                            decay: e.decay,
                        },
                    )
                })
                .collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Overwrites every learnable tensor with uniform noise in
    /// `[-scale, scale)`; gradient checks use this to leave the zero/one
    /// initialisation regime.
    pub fn randomize(&mut self, seed: u64, scale: f64) {
        let mut rng = CounterRng::new(seed);
        for e in self.params.values_mut() {
            for v in e.value.data_mut() {
                *v = T::from_f64((rng.next_f64() * 2.0 - 1.0) * scale);
            }
        }
    }
}

/// Training / inference switches for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Mode {
    /// Dropout active and batch-norm uses batch statistics.
    pub training: bool,
    /// Parameters are recorded as gradient-requiring leaves.
    pub grad: bool,
    /// Root seed for dropout masks.
    pub seed: u64,
}

impl Mode {
    pub fn eval() -> Self {
        Self {
            training: false,
            grad: false,
            seed: 0,
        }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            training: true,
            grad: true,
            seed,
        }
    }
}

/// One forward pass: owns the tape and maps parameter names to tape leaves.
pub struct Forward<'a, T: Scalar> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    vars: HashMap<String, Var>,
    mode: Mode,
    dropout_calls: u64,
    bn_stats: Vec<(String, BatchStats<T>)>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            store,
            vars: HashMap::new(),
            mode,
            dropout_calls: 0,
            bn_stats: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn training(&self) -> bool {
        self.mode.training
    }

    /// Tape leaf for parameter `name`, created on first use.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = self.tape.leaf(t, self.mode.grad);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        let seed = derive_seed(self.mode.seed, self.dropout_calls);
        self.dropout_calls += 1;
        self.tape.dropout(x, p, self.mode.training, seed)
    }

    /// Batch norm over axis 1 with `{prefix}.weight/.bias` and running
    /// statistics `{prefix}.running_mean/.running_var`.
    pub fn batch_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let g = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        if self.mode.training {
            let (y, stats) = self.tape.batch_norm(x, g, b, None, BN_EPS)?;
            if let Some(s) = stats {
                self.bn_stats.push((prefix.to_string(), s));
            }
            Ok(y)
        } else {
            let store = self.store;
            let mean = store.buffer(&format!("{prefix}.running_mean"))?.data();
            let var = store.buffer(&format!("{prefix}.running_var"))?.data();
            Ok(self.tape.batch_norm(x, g, b, Some((mean, var)), BN_EPS)?.0)
        }
    }

    pub fn layer_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let g = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        self.tape.layer_norm(x, g, b, LN_EPS)
    }

    /// Parameter leaves created during this pass.
    pub fn param_vars(&self) -> &HashMap<String, Var> {
        &self.vars
    }

    pub fn take_batch_stats(&mut self) -> Vec<(String, BatchStats<T>)> {
        std::mem::take(&mut self.bn_stats)
    }
}

/// Folds measured batch statistics into the running buffers:
/// `running = (1 - momentum) * running + momentum * batch`, with the
/// unbiased batch variance.
pub fn apply_batch_stats<T: Scalar>(store: &mut ParamStore<T>, stats: &[(String, BatchStats<T>)]) -> Result<()> {
    let m = T::from_f64(BN_MOMENTUM);
    let keep = T::one() - m;
    for (prefix, s) in stats {
        let n = s.count.max(2);
        let unbias = T::from_f64(n as f64 / (n as f64 - 1.0));
        let rm = store.buffer_mut(&format!("{prefix}.running_mean"))?;
        for (r, &b) in rm.data_mut().iter_mut().zip(&s.mean) {
            *r = keep * *r + m * b;
        }
        let rv = store.buffer_mut(&format!("{prefix}.running_var"))?;
        for (r, &b) in rv.data_mut().iter_mut().zip(&s.var) {
            *r = keep * *r + m * b * unbias;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Silu,
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply<T: Scalar>(self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match self {
            Activation::Gelu => tape.gelu(x),
            Activation::Silu => tape.silu(x),
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => Ok(x),
        }
    }
}

/// `y = x W + b` with `W: [d_in, d_out]`, applied over the last axis.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub d_in: usize,
    pub d_out: usize,
    pub bias: bool,
    pub zero_init: bool,
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize) -> Self {
        Self {
            d_in,
            d_out,
            bias: true,
            zero_init: false,
        }
    }

    /// Weights start at zero (residual-branch outputs).
    pub fn zeroed(mut self) -> Self {
        self.zero_init = true;
        self
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, prefix: &str, rng: &mut CounterRng) -> Result<()> {
        let init = if self.zero_init {
            Init::Zeros
        } else {
            Init::TruncNormal(INIT_STD)
        };
        store.add(format!("{prefix}.weight"), &[self.d_in, self.d_out], init, true, rng)?;
        if self.bias {
            store.add(format!("{prefix}.bias"), &[self.d_out], Init::Zeros, false, rng)?;
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, prefix: &str, x: Var) -> Result<Var> {
        let w = fw.p(&format!("{prefix}.weight"))?;
        let y = fw.tape.matmul(x, w)?;
        if self.bias {
            let b = fw.p(&format!("{prefix}.bias"))?;
            fw.tape.add(y, b)
        } else {
            Ok(y)
        }
    }
}

pub fn init_layer_norm<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    dim: usize,
    rng: &mut CounterRng,
) -> Result<()> {
    store.add(format!("{prefix}.weight"), &[dim], Init::Ones, false, rng)?;
    store.add(format!("{prefix}.bias"), &[dim], Init::Zeros, false, rng)
}

pub fn init_batch_norm<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    ch: usize,
    rng: &mut CounterRng,
) -> Result<()> {
    store.add(format!("{prefix}.weight"), &[ch], Init::Ones, false, rng)?;
    store.add(format!("{prefix}.bias"), &[ch], Init::Zeros, false, rng)?;
    store.add_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[ch]))?;
    store.add_buffer(format!("{prefix}.running_var"), Tensor::ones(&[ch]))
}

/// 2-D convolution layer; weight `[c_out, c_in/groups, k, k]`.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub bias: bool,
    pub pad_mode: PadMode,
}

impl Conv {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        Self {
            c_in,
            c_out,
            kernel,
            stride,
            groups: 1,
            bias: false,
            pad_mode: PadMode::Zeros,
        }
    }

    pub fn depthwise(ch: usize, kernel: usize, stride: usize) -> Self {
        Self {
            groups: ch,
            ..Self::new(ch, ch, kernel, stride)
        }
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    pub fn with_pad_mode(mut self, mode: PadMode) -> Self {
        self.pad_mode = mode;
        self
    }

    /// Same-size padding for odd kernels; none for patch-style convs
    /// (kernel == stride).
    pub fn padding(&self) -> usize {
        if self.kernel == self.stride {
            0
        } else {
            self.kernel / 2
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, prefix: &str, rng: &mut CounterRng) -> Result<()> {
        store.add(
            format!("{prefix}.weight"),
            &[self.c_out, self.c_in / self.groups, self.kernel, self.kernel],
            Init::TruncNormal(INIT_STD),
            true,
            rng,
        )?;
        if self.bias {
            store.add(format!("{prefix}.bias"), &[self.c_out], Init::Zeros, false, rng)?;
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, prefix: &str, x: Var) -> Result<Var> {
        let w = fw.p(&format!("{prefix}.weight"))?;
        let b = if self.bias {
            Some(fw.p(&format!("{prefix}.bias"))?)
        } else {
            None
        };
        fw.tape
            .conv2d(x, w, b, self.stride, self.padding(), self.groups, self.pad_mode)
    }
}

/// Convolution, batch norm, optional activation.
#[derive(Debug, Clone, Copy)]
pub struct ConvBn {
    pub conv: Conv,
    pub act: Activation,
}

impl ConvBn {
    pub fn new(conv: Conv, act: Activation) -> Self {
        Self { conv, act }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, prefix: &str, rng: &mut CounterRng) -> Result<()> {
        self.conv.init(store, &format!("{prefix}.conv"), rng)?;
        init_batch_norm(store, &format!("{prefix}.bn"), self.conv.c_out, rng)
    }

    pub fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, prefix: &str, x: Var) -> Result<Var> {
        let y = self.conv.forward(fw, &format!("{prefix}.conv"), x)?;
        let y = fw.batch_norm(&format!("{prefix}.bn"), y)?;
        self.act.apply(&mut fw.tape, y)
    }
}

/// `[b, t, d]` token sequence to a `[b, d, h, w]` feature map.
pub fn tokens_to_map<T: Scalar>(tape: &mut Tape<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[1] != h * w {
        return Err(Error::dim(format!("{s:?} is not a {h}x{w} token grid")));
    }
    let g = tape.reshape(x, &[s[0], h, w, s[2]])?;
    tape.permute(g, &[0, 3, 1, 2])
}

/// `[b, d, h, w]` feature map to a `[b, h*w, d]` token sequence.
pub fn map_to_tokens<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::dim(format!("expected [b, c, h, w], got {s:?}")));
    }
    let p = tape.permute(x, &[0, 2, 3, 1])?;
    tape.reshape(p, &[s[0], s[2] * s[3], s[1]])
}
