//! Closed-form parameter and FLOP accounting.
//!
//! Everything here is arithmetic on the configuration; nothing is
//! instantiated. [`verify_against_runtime`] cross-checks the parameter
//! counts against an initialised [`ParamStore`].

use std::fmt::Write as _;

use serde::Serialize;

use crate::config::ResolvedConfig;
use crate::error::Result;
use crate::fusion::FusionConfig;
use crate::image::{ImageArch, MobileVitArch, VitArch, XcitArch, BANDS};
use crate::nn::ParamStore;
use crate::tensor::Scalar;
use crate::text::TextEncoderConfig;

pub const CONVENTION: &str = "FLOPs: one multiply-accumulate = 1 FLOP; softmax, layer/batch norm, \
L2 normalisation and activations = 5 FLOPs per element; element-wise add/mul = 1 FLOP per element; \
biases, reshapes and lookups are free; one sample per forward pass";

const NONLIN: u64 = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostEntry {
    pub module: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub convention: String,
    pub input_size: usize,
    pub text_tokens: usize,
    pub entries: Vec<CostEntry>,
    pub total_params: u64,
    pub total_flops: u64,
}

impl CostReport {
    /// Sum over entries whose path is `prefix` or starts with `prefix.`.
    pub fn subtotal(&self, prefix: &str) -> (u64, u64) {
        self.entries
            .iter()
            .filter(|e| under(&e.module, prefix))
            .fold((0, 0), |(p, f), e| (p + e.params, f + e.flops))
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {}", self.convention);
        let _ = writeln!(s, "# input {0}x{0}, {1} text tokens", self.input_size, self.text_tokens);
        s.push_str("module\tparams\tflops\n");
        for e in &self.entries {
            let _ = writeln!(s, "{}\t{}\t{}", e.module, e.params, e.flops);
        }
        for m in ["text", "image", "fusion", "head"] {
            let (p, f) = self.subtotal(m);
            let _ = writeln!(s, "[{m}]\t{p}\t{f}");
        }
        let _ = writeln!(s, "total\t{}\t{}", self.total_params, self.total_flops);
        let _ = writeln!(
            s,
            "# total: {:.3} M params, {:.3} GFLOPs",
            self.total_params as f64 / 1e6,
            self.total_flops as f64 / 1e9
        );
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

fn under(name: &str, prefix: &str) -> bool {
    name == prefix || (name.starts_with(prefix) && name.as_bytes().get(prefix.len()) == Some(&b'.'))
}

/// Accumulates `(params, flops)` of one component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Cost {
    pub params: u64,
    pub flops: u64,
}

impl std::ops::Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost {
            params: self.params + o.params,
            flops: self.flops + o.flops,
        }
    }
}

impl std::ops::AddAssign for Cost {
    fn add_assign(&mut self, o: Cost) {
        *self = *self + o;
    }
}

impl std::ops::Mul<u64> for Cost {
    type Output = Cost;
    fn mul(self, k: u64) -> Cost {
        Cost {
            params: self.params * k,
            flops: self.flops * k,
        }
    }
}

fn c(params: u64, flops: u64) -> Cost {
    Cost { params, flops }
}

fn u(v: usize) -> u64 {
    v as u64
}

/// `n` vectors through a biased `d_in -> d_out` linear layer.
pub fn linear(n: usize, d_in: usize, d_out: usize) -> Cost {
    let (n, i, o) = (u(n), u(d_in), u(d_out));
    c(i * o + o, n * i * o)
}

pub fn layer_norm(n: usize, d: usize) -> Cost {
    c(2 * u(d), NONLIN * u(n) * u(d))
}

pub fn activation(elements: usize) -> Cost {
    c(0, NONLIN * u(elements))
}

pub fn elementwise(elements: usize) -> Cost {
    c(0, u(elements))
}

/// Convolution on an `h x w` input (square kernel, zero bias FLOPs).
#[allow(clippy::too_many_arguments)]
pub fn conv(h: usize, w: usize, c_in: usize, c_out: usize, k: usize, stride: usize, groups: usize, bias: bool) -> Cost {
    let pad = if k == stride { 0 } else { k / 2 };
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let per_out = u(c_in / groups) * u(k * k);
    c(
        u(c_out) * per_out + if bias { u(c_out) } else { 0 },
        u(oh * ow) * u(c_out) * per_out,
    )
}

/// Conv + batch norm (+ activation when `act`) on an `h x h` input.
pub fn conv_bn(h: usize, c_in: usize, c_out: usize, k: usize, stride: usize, groups: usize, act: bool) -> Cost {
    let pad = if k == stride { 0 } else { k / 2 };
    let oh = (h + 2 * pad - k) / stride + 1;
    let out = oh * oh * c_out;
    let mut cost = conv(h, h, c_in, c_out, k, stride, groups, false) + c(2 * u(c_out), NONLIN * u(out));
    if act {
        cost += activation(out);
    }
    cost
}

/// Token-mixing core of scaled dot-product attention over `t` tokens,
/// `heads` heads of width `d_h`: `QKᵀ`, scaling, softmax, `·V`.
pub fn attention_core(t: usize, d_h: usize, heads: usize) -> Cost {
    let scores = u(heads) * u(t) * u(t);
    c(0, 2 * scores * u(d_h) + scores + NONLIN * scores)
}

/// Channel-mixing core of cross-covariance attention: two L2
/// normalisations over tokens, `K̂ᵀQ̂`, temperature division, softmax, `V·A`.
pub fn xca_core(t: usize, d_h: usize, heads: usize) -> Cost {
    let d = u(heads) * u(d_h);
    let weights = u(heads) * u(d_h) * u(d_h);
    c(
        0,
        2 * NONLIN * u(t) * d + 2 * u(t) * d * u(d_h) + weights + NONLIN * weights,
    )
}

fn msa(t: usize, d: usize, heads: usize) -> Cost {
    linear(t, d, d) * 4 + attention_core(t, d / heads, heads)
}

fn xca(t: usize, d: usize, heads: usize) -> Cost {
    linear(t, d, d) * 4 + xca_core(t, d / heads, heads) + c(u(heads), 0)
}

fn ffn(t: usize, d: usize, ratio: usize) -> Cost {
    linear(t, d, ratio * d) + activation(t * ratio * d) + linear(t, ratio * d, d)
}

/// Pre-norm block with multi-head attention.
pub fn msa_block(t: usize, d: usize, heads: usize, ratio: usize) -> Cost {
    layer_norm(t, d) * 2 + msa(t, d, heads) + ffn(t, d, ratio) + elementwise(t * d) * 2
}

fn lpi(h: usize, w: usize, d: usize) -> Cost {
    let n = h * w;
    layer_norm(n, d)
        + conv(h, w, d, d, 3, 1, d, true) * 2
        + activation(n * d)
        + c(2 * u(d), NONLIN * u(n * d))
        + elementwise(n * d)
}

fn xcit_layer(h: usize, w: usize, d: usize, heads: usize, ratio: usize) -> Cost {
    let t = h * w;
    layer_norm(t, d) * 2 + xca(t, d, heads) + lpi(h, w, d) + ffn(t, d, ratio) + elementwise(t * d) * 2
}

/// Class-attention block over `1 + n` tokens; only the class token queries
/// and only it goes through the FFN.
fn class_block(n: usize, d: usize, heads: usize, ratio: usize) -> Cost {
    let t = n + 1;
    layer_norm(t, d)
        + linear(1, d, d)
        + linear(t, d, d) * 2
        + attention_core_rect(1, t, d / heads, heads)
        + linear(1, d, d)
        + layer_norm(1, d)
        + ffn(1, d, ratio)
        + elementwise(d) * 2
}

fn attention_core_rect(tq: usize, tk: usize, d_h: usize, heads: usize) -> Cost {
    let scores = u(heads) * u(tq) * u(tk);
    c(0, 2 * scores * u(d_h) + scores + NONLIN * scores)
}

struct Builder {
    entries: Vec<CostEntry>,
}

impl Builder {
    fn push(&mut self, module: impl Into<String>, cost: Cost) {
        self.entries.push(CostEntry {
            module: module.into(),
            params: cost.params,
            flops: cost.flops,
        });
    }
}

fn text_costs(b: &mut Builder, cfg: &TextEncoderConfig) {
    let (t, d) = (cfg.max_len, cfg.dim);
    b.push(
        "text.embed",
        c(u(cfg.vocab_size * d + cfg.max_len * d), 0) + elementwise(t * d),
    );
    for i in 0..cfg.layers {
        b.push(format!("text.blocks.{i}"), msa_block(t, d, cfg.heads, cfg.hidden_ratio));
    }
    b.push("text.norm", layer_norm(1, d));
}

fn vit_costs(b: &mut Builder, a: &VitArch, s: usize) {
    let n = (s / a.patch).pow(2);
    let t = n + 1;
    b.push("image.patch_embed", conv(s, s, BANDS, a.dim, a.patch, a.patch, 1, true));
    b.push("image.cls_token", c(u(a.dim), 0));
    b.push("image.pos_embed", c(u(t * a.dim), 0) + elementwise(t * a.dim));
    for i in 0..a.layers {
        b.push(
            format!("image.blocks.{i}"),
            msa_block(t, a.dim, a.heads, a.hidden_ratio),
        );
    }
    b.push("image.norm", layer_norm(t, a.dim));
}

fn xcit_costs(b: &mut Builder, a: &XcitArch, s: usize) {
    let stages = a.patch.trailing_zeros() as usize;
    let (mut h, mut c_in) = (s, BANDS);
    for i in 0..stages {
        let c_out = a.dim >> (stages - 1 - i);
        b.push(
            format!("image.stem.{i}"),
            conv_bn(h, c_in, c_out, 3, 2, 1, i + 1 < stages),
        );
        h = (h + 2 - 3) / 2 + 1;
        c_in = c_out;
    }
    for i in 0..a.layers {
        b.push(
            format!("image.blocks.{i}"),
            xcit_layer(h, h, a.dim, a.heads, a.hidden_ratio),
        );
    }
    b.push("image.cls_token", c(u(a.dim), 0));
    for i in 0..a.class_layers {
        b.push(
            format!("image.cls_blocks.{i}"),
            class_block(h * h, a.dim, a.heads, a.hidden_ratio),
        );
    }
    b.push("image.norm", layer_norm(1, a.dim));
}

fn inverted_residual(h: usize, c_in: usize, c_out: usize, stride: usize, expansion: usize) -> Cost {
    let hid = c_in * expansion;
    let mut cost = Cost::default();
    if expansion != 1 {
        cost += conv_bn(h, c_in, hid, 1, 1, 1, true);
    }
    cost += conv_bn(h, hid, hid, 3, stride, hid, true);
    let ho = (h + 2 - 3) / stride + 1;
    cost += conv_bn(ho, hid, c_out, 1, 1, 1, false);
    if stride == 1 && c_in == c_out {
        cost += elementwise(ho * ho * c_out);
    }
    cost
}

#[allow(clippy::too_many_arguments)]
fn mobilevit_block(h: usize, ch: usize, d: usize, depth: usize, heads: usize, ratio: usize, patch: usize) -> Cost {
    let p = patch.min(h.max(1));
    let seqs = p * p;
    let n = (h / p) * (h / p);
    // One set of block weights shared by all `seqs` pixel-position sequences.
    let blk = msa_block(n, d, heads, ratio);
    conv_bn(h, ch, ch, 3, 1, 1, true)
        + c(u(ch * d), u(h * h * ch * d))
        + c(u(depth) * blk.params, u(depth * seqs) * blk.flops)
        + c(2 * u(d), NONLIN * u(seqs * n * d))
        + conv_bn(h, d, ch, 1, 1, 1, true)
        + conv_bn(h, 2 * ch, ch, 3, 1, 1, true)
}

fn mobilevit_costs(b: &mut Builder, a: &MobileVitArch, s: usize) {
    b.push("image.stem", conv_bn(s, BANDS, a.stem, 3, 2, 1, true));
    let ch = a.channels;
    let e = a.expansion;
    let mut h = s / 2;
    b.push("image.layer1.0", inverted_residual(h, a.stem, ch[0], 1, e));
    b.push("image.layer2.0", inverted_residual(h, ch[0], ch[1], 2, e));
    h /= 2;
    b.push("image.layer2.1", inverted_residual(h, ch[1], ch[1], 1, e));
    b.push("image.layer2.2", inverted_residual(h, ch[1], ch[1], 1, e));
    for k in 0..3 {
        let stage = k + 3;
        b.push(
            format!("image.layer{stage}.0"),
            inverted_residual(h, ch[k + 1], ch[k + 2], 2, e),
        );
        h /= 2;
        b.push(
            format!("image.layer{stage}.1"),
            mobilevit_block(h, ch[k + 2], a.dims[k], a.depths[k], a.heads, a.ffn_ratio, a.patch),
        );
    }
    b.push("image.head", conv_bn(h, ch[4], a.final_channels, 1, 1, 1, true));
    b.push("image.pool", elementwise(h * h * a.final_channels));
}

fn fusion_costs(b: &mut Builder, f: &FusionConfig) {
    let act = |n| match f.activation {
        crate::fusion::FusionActivation::Tanh => activation(n),
        crate::fusion::FusionActivation::Identity => Cost::default(),
    };
    b.push("fusion.text_proj", linear(1, f.d_t, f.d_f) + act(f.d_f));
    b.push("fusion.image_proj", linear(1, f.d_v, f.d_f) + act(f.d_f));
    b.push("fusion.product", elementwise(f.d_f));
    b.push("head.fc1", linear(1, f.d_f, f.head_hidden) + activation(f.head_hidden));
    b.push("head.fc2", linear(1, f.head_hidden, f.n_answers));
}

/// Parameter and FLOP report for one forward pass on an `s x s` image
/// (`None`: the configured input size) and a `max_len`-token question.
pub fn cost_report(cfg: &ResolvedConfig, input_size: Option<usize>) -> Result<CostReport> {
    let s = input_size.unwrap_or(cfg.image.input_size());
    cfg.image.check_input(s)?;
    let mut b = Builder { entries: Vec::new() };
    text_costs(&mut b, &cfg.text);
    match &cfg.image {
        ImageArch::Vit(a) => vit_costs(&mut b, a, s),
        ImageArch::Xcit(a) => xcit_costs(&mut b, a, s),
        ImageArch::MobileVit(a) => mobilevit_costs(&mut b, a, s),
    }
    fusion_costs(&mut b, &cfg.fusion);
    let total_params = b.entries.iter().map(|e| e.params).sum();
    let total_flops = b.entries.iter().map(|e| e.flops).sum();
    Ok(CostReport {
        convention: CONVENTION.to_string(),
        input_size: s,
        text_tokens: cfg.text.max_len,
        entries: b.entries,
        total_params,
        total_flops,
    })
}

pub fn count_params(cfg: &ResolvedConfig) -> Result<CostReport> {
    cost_report(cfg, None)
}

pub fn count_flops(cfg: &ResolvedConfig, input_size: usize) -> Result<CostReport> {
    cost_report(cfg, Some(input_size))
}

/// FLOPs of the token-mixing product for `t` tokens, minus the
/// token-independent part, and the exponent fitted from `t` and `2t`.
pub fn scaling_exponent(core: impl Fn(usize) -> Cost, t: usize) -> f64 {
    let base = core(0).flops as f64;
    let f1 = core(t).flops as f64 - base;
    let f2 = core(2 * t).flops as f64 - base;
    (f2 / f1).log2()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ModuleDiff {
    pub module: String,
    pub analytic: u64,
    pub runtime: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RuntimeComparison {
    pub analytic_total: u64,
    pub runtime_total: u64,
    /// Report entries whose runtime count differs.
    pub mismatches: Vec<ModuleDiff>,
    /// Stored tensors not covered by any report entry.
    pub unaccounted: Vec<String>,
}

impl RuntimeComparison {
    pub fn matches(&self) -> bool {
        self.analytic_total == self.runtime_total && self.mismatches.is_empty() && self.unaccounted.is_empty()
    }
}

/// Compares the analytic counts with the scalars actually held by `store`.
pub fn verify_against_runtime<T: Scalar>(report: &CostReport, store: &ParamStore<T>) -> RuntimeComparison {
    let mut mismatches = Vec::new();
    for e in &report.entries {
        let runtime: u64 = store
            .params()
            .filter(|(n, _)| under(n, &e.module))
            .map(|(_, p)| p.value.len() as u64)
            .sum();
        if runtime != e.params {
            mismatches.push(ModuleDiff {
                module: e.module.clone(),
                analytic: e.params,
                runtime,
            });
        }
    }
    let unaccounted = store
        .params()
        .filter(|(n, _)| !report.entries.iter().any(|e| under(n, &e.module)))
        .map(|(n, _)| n.to_string())
        .collect();
    RuntimeComparison {
        analytic_total: report.total_params,
        runtime_total: store.num_params() as u64,
        mismatches,
        unaccounted,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_linear() {
        assert_eq!(linear(1, 3, 2), Cost { params: 8, flops: 6 });
    }

    #[test]
    fn exponents() {
        assert!((scaling_exponent(|t| attention_core(t, 16, 4), 64) - 2.0).abs() < 1e-12);
        assert!((scaling_exponent(|t| xca_core(t, 16, 4), 64) - 1.0).abs() < 1e-12);
    }
}
