//! The standard gradient-check suites: every differentiable tape op, every
//! network block, and the full model.
//!
//! Each check takes an optional backward fault (`(op name, factor)`, see
//! [`Tape::inject_backward_fault`]) so callers can confirm the suite fails
//! when a gradient is wrong.

use crate::config::ResolvedConfig;
use crate::error::Result;
use crate::fusion::{FusionActivation, FusionConfig};
use crate::image::image_batch;
use crate::kernels::PadMode;
use crate::model::VqaModel;
use crate::nn::attention::{
    attention_with_weights, xca_with_weights, ClassAttention, MultiHeadAttention, XcaAttention,
};
use crate::nn::mobilevit::{fold, unfold, InvertedResidual, MobileVitBlock};
use crate::nn::{
    Activation, ClassAttentionBlock, Conv, ConvBn, Forward, Linear, Lpi, Mode, ParamStore, TransformerBlock, XcitLayer,
};
use crate::rng::CounterRng;
use crate::synth::{generate_synthetic, SynthConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::text::{TextEncoder, TextEncoderConfig};
use crate::train::prepare;

use super::{
    check_gradients, check_store_gradients, random_projection, random_tensor, GradCheckOptions, GradCheckReport,
};

pub type Fault = Option<(&'static str, f64)>;

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: String,
    pub report: GradCheckReport,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

fn arm<T: crate::Scalar>(tape: &mut Tape<T>, fault: Fault) {
    if let Some((op, f)) = fault {
        tape.inject_backward_fault(op, f);
    }
}

/// Random values kept at least 0.1 away from zero (for kinked or singular ops).
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    random_tensor(shape, seed, 1.0).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct OpCase {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    f: OpFn,
}

fn case(
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        inputs,
        f: Box::new(f),
    }
}

fn rt(shape: &[usize], seed: u64) -> Tensor<f64> {
    random_tensor(shape, seed, 1.0)
}

fn op_cases() -> Vec<OpCase> {
    let proj = |t: &mut Tape<f64>, y: Var| random_projection(t, y, 99);
    let mask: Vec<bool> = vec![true, true, false, true, true, true, false, false];
    vec![
        case("matmul", vec![rt(&[2, 3, 4], 1), rt(&[4, 5], 2)], move |t, v| {
            let y = t.matmul(v[0], v[1])?;
            proj(t, y)
        }),
        case(
            "matmul_batched",
            vec![rt(&[2, 3, 4], 3), rt(&[2, 4, 2], 4)],
            move |t, v| {
                let y = t.matmul(v[0], v[1])?;
                proj(t, y)
            },
        ),
        case("transpose", vec![rt(&[2, 3, 4], 5)], move |t, v| {
            let y = t.transpose(v[0])?;
            proj(t, y)
        }),
        case("permute", vec![rt(&[2, 3, 4], 6)], move |t, v| {
            let y = t.permute(v[0], &[2, 0, 1])?;
            proj(t, y)
        }),
        case("reshape", vec![rt(&[2, 3, 4], 7)], move |t, v| {
            let y = t.reshape(v[0], &[6, 4])?;
            proj(t, y)
        }),
        case("narrow", vec![rt(&[2, 5, 3], 8)], move |t, v| {
            let y = t.narrow(v[0], 1, 1, 3)?;
            proj(t, y)
        }),
        case("concat", vec![rt(&[2, 2, 3], 9), rt(&[2, 1, 3], 10)], move |t, v| {
            let y = t.concat(&[v[0], v[1]], 1)?;
            proj(t, y)
        }),
        case("embedding", vec![rt(&[6, 3], 11)], move |t, v| {
            let y = t.embedding(v[0], &[0, 5, 2, 2, 1])?;
            proj(t, y)
        }),
        case("add_broadcast", vec![rt(&[2, 3], 12), rt(&[3], 13)], move |t, v| {
            let y = t.add(v[0], v[1])?;
            proj(t, y)
        }),
        case("sub_broadcast", vec![rt(&[2, 3], 14), rt(&[2, 1], 15)], move |t, v| {
            let y = t.sub(v[0], v[1])?;
            proj(t, y)
        }),
        case("mul_broadcast", vec![rt(&[2, 3], 16), rt(&[1, 3], 17)], move |t, v| {
            let y = t.mul(v[0], v[1])?;
            proj(t, y)
        }),
        case(
            "div",
            vec![rt(&[2, 3], 18), away_from_zero(&[2, 3], 19)],
            move |t, v| {
                let y = t.div(v[0], v[1])?;
                proj(t, y)
            },
        ),
        case("scale", vec![rt(&[4], 20)], move |t, v| {
            let y = t.scale(v[0], -2.5)?;
            proj(t, y)
        }),
        case("relu", vec![away_from_zero(&[3, 4], 21)], move |t, v| {
            let y = t.relu(v[0])?;
            proj(t, y)
        }),
        case("gelu", vec![rt(&[3, 4], 22)], move |t, v| {
            let y = t.gelu(v[0])?;
            proj(t, y)
        }),
        case("silu", vec![rt(&[3, 4], 23)], move |t, v| {
            let y = t.silu(v[0])?;
            proj(t, y)
        }),
        case("tanh", vec![rt(&[3, 4], 24)], move |t, v| {
            let y = t.tanh(v[0])?;
            proj(t, y)
        }),
        case("softmax_last", vec![rt(&[2, 3, 4], 25)], move |t, v| {
            let y = t.softmax(v[0], -1)?;
            proj(t, y)
        }),
        case("softmax_tokens", vec![rt(&[2, 3, 4], 26)], move |t, v| {
            let y = t.softmax(v[0], -2)?;
            proj(t, y)
        }),
        case("masked_softmax", vec![rt(&[2, 3, 4], 27)], move |t, v| {
            let y = t.masked_softmax(v[0], &mask)?;
            proj(t, y)
        }),
        case(
            "layer_norm",
            vec![rt(&[2, 3, 5], 28), rt(&[5], 29), rt(&[5], 30)],
            move |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                proj(t, y)
            },
        ),
        case(
            "batch_norm_batch",
            vec![rt(&[3, 2, 2, 2], 31), rt(&[2], 32), rt(&[2], 33)],
            move |t, v| {
                let y = t.batch_norm(v[0], v[1], v[2], None, 1e-5)?.0;
                proj(t, y)
            },
        ),
        case(
            "batch_norm_running",
            vec![rt(&[3, 2, 2, 2], 34), rt(&[2], 35), rt(&[2], 36)],
            move |t, v| {
                let (mean, var) = ([0.1, -0.2], [0.5, 2.0]);
                let y = t.batch_norm(v[0], v[1], v[2], Some((&mean, &var)), 1e-5)?.0;
                proj(t, y)
            },
        ),
        case("l2_normalize", vec![rt(&[2, 4, 3], 37)], move |t, v| {
            let y = t.l2_normalize(v[0], -2, 1e-6)?;
            proj(t, y)
        }),
        case(
            "conv2d",
            vec![rt(&[2, 3, 5, 5], 38), rt(&[4, 3, 3, 3], 39), rt(&[4], 40)],
            move |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1, 1, PadMode::Zeros)?;
                proj(t, y)
            },
        ),
        case(
            "conv2d_strided",
            vec![rt(&[2, 2, 6, 6], 41), rt(&[3, 2, 3, 3], 42)],
            move |t, v| {
                let y = t.conv2d(v[0], v[1], None, 2, 1, 1, PadMode::Zeros)?;
                proj(t, y)
            },
        ),
        case(
            "conv2d_depthwise",
            vec![rt(&[2, 4, 5, 5], 43), rt(&[4, 1, 3, 3], 44)],
            move |t, v| {
                let y = t.conv2d(v[0], v[1], None, 1, 1, 4, PadMode::Zeros)?;
                proj(t, y)
            },
        ),
        case(
            "conv2d_replicate",
            vec![rt(&[1, 2, 4, 4], 45), rt(&[2, 2, 3, 3], 46)],
            move |t, v| {
                let y = t.conv2d(v[0], v[1], None, 1, 1, 1, PadMode::Replicate)?;
                proj(t, y)
            },
        ),
        case("dropout", vec![rt(&[4, 5], 47)], move |t, v| {
            let y = t.dropout(v[0], 0.3, true, 1234)?;
            proj(t, y)
        }),
        case("sum", vec![rt(&[3, 4], 48)], move |t, v| t.sum(v[0])),
        case("mean_last", vec![rt(&[2, 3, 4], 49)], move |t, v| {
            let y = t.mean_last(v[0])?;
            proj(t, y)
        }),
        case("cross_entropy", vec![rt(&[3, 5], 50)], move |t, v| {
            t.cross_entropy(v[0], &[4, 0, 2])
        }),
        case("unfold", vec![rt(&[2, 3, 4, 4], 51)], move |t, v| {
            let y = unfold(t, v[0], (2, 2))?;
            proj(t, y)
        }),
        case("fold", vec![rt(&[2, 4, 4, 3], 52)], move |t, v| {
            let y = fold(t, v[0], (2, 2), (4, 4))?;
            proj(t, y)
        }),
        case(
            "attention",
            vec![rt(&[2, 4, 3], 53), rt(&[2, 5, 3], 54), rt(&[2, 5, 2], 55)],
            move |t, v| {
                let y = attention_with_weights(t, v[0], v[1], v[2], None)?.0;
                proj(t, y)
            },
        ),
        case(
            "attention_masked",
            vec![rt(&[2, 4, 3], 56), rt(&[2, 4, 3], 57), rt(&[2, 4, 3], 58)],
            move |t, v| {
                let valid = [true, true, true, false, true, false, true, true];
                let y = attention_with_weights(t, v[0], v[1], v[2], Some(&valid))?.0;
                proj(t, y)
            },
        ),
        case(
            "xca",
            vec![
                rt(&[2, 2, 5, 3], 59),
                rt(&[2, 2, 5, 3], 60),
                rt(&[2, 2, 5, 3], 61),
                away_from_zero(&[2, 1, 1], 62),
            ],
            move |t, v| {
                let y = xca_with_weights(t, v[0], v[1], v[2], v[3])?.0;
                proj(t, y)
            },
        ),
    ]
}

/// Finite-difference check of every differentiable tape op.
pub fn op_suite(fault: Fault, opts: &GradCheckOptions) -> Result<Vec<SuiteResult>> {
    op_cases()
        .into_iter()
        .map(|c| {
            let report = check_gradients(
                &c.inputs,
                |t, v| {
                    arm(t, fault);
                    (c.f)(t, v)
                },
                opts,
            )?;
            Ok(SuiteResult {
                name: c.name.to_string(),
                report,
            })
        })
        .collect()
}

type BlockInit = Box<dyn Fn(&mut ParamStore<f64>, &mut CounterRng) -> Result<()>>;
type BlockFwd = Box<dyn Fn(&mut Forward<'_, f64>, Var) -> Result<Var>>;

struct BlockCase {
    name: &'static str,
    input: Tensor<f64>,
    init: BlockInit,
    forward: BlockFwd,
}

fn block(
    name: &'static str,
    input: Tensor<f64>,
    init: impl Fn(&mut ParamStore<f64>, &mut CounterRng) -> Result<()> + 'static,
    forward: impl Fn(&mut Forward<'_, f64>, Var) -> Result<Var> + 'static,
) -> BlockCase {
    BlockCase {
        name,
        input,
        init: Box::new(init),
        forward: Box::new(forward),
    }
}

fn block_cases() -> Result<Vec<BlockCase>> {
    let lin = Linear::new(4, 3);
    let mha = MultiHeadAttention::new(6, 2)?;
    let xca = XcaAttention::new(6, 2)?;
    let ca = ClassAttention::new(6, 2)?;
    let msa = TransformerBlock::msa(6, 2, 2, Activation::Gelu)?;
    let xblk = TransformerBlock::xca(6, 2, 2, Activation::Gelu)?;
    let lpi = Lpi { dim: 6 };
    let xl = XcitLayer::new(6, 2, 2)?;
    let cab = ClassAttentionBlock::new(6, 2, 2)?;
    let convbn = ConvBn::new(Conv::new(3, 4, 3, 2), Activation::Silu);
    let ir = InvertedResidual {
        c_in: 4,
        c_out: 4,
        stride: 1,
        expansion: 2,
        pad_mode: PadMode::Replicate,
    };
    let mvb = MobileVitBlock {
        channels: 4,
        dim: 6,
        depth: 1,
        heads: 2,
        ffn_ratio: 2,
        patch: (2, 2),
        pad_mode: PadMode::Replicate,
    };
    let mvb2 = mvb.clone();
    let valid = vec![true, true, true, false, true, true, false, false];
    let valid2 = valid.clone();
    Ok(vec![
        block(
            "linear",
            rt(&[2, 3, 4], 70),
            move |s, r| lin.init(s, "m", r),
            move |fw, x| lin.forward(fw, "m", x),
        ),
        block(
            "multi_head_attention",
            rt(&[2, 4, 6], 71),
            move |s, r| mha.init(s, "m", r),
            move |fw, x| mha.forward(fw, "m", x, Some(&valid)),
        ),
        block(
            "xca_attention",
            rt(&[2, 5, 6], 72),
            move |s, r| xca.init(s, "m", r),
            move |fw, x| xca.forward(fw, "m", x),
        ),
        block(
            "class_attention",
            rt(&[2, 5, 6], 73),
            move |s, r| ca.init(s, "m", r),
            move |fw, x| ca.forward(fw, "m", x),
        ),
        block(
            "transformer_block",
            rt(&[2, 4, 6], 74),
            move |s, r| msa.init(s, "m", r),
            move |fw, x| msa.forward(fw, "m", x, Some(&valid2)),
        ),
        block(
            "xca_block",
            rt(&[2, 4, 6], 75),
            move |s, r| xblk.init(s, "m", r),
            move |fw, x| xblk.forward(fw, "m", x, None),
        ),
        block(
            "lpi",
            rt(&[2, 6, 6], 76),
            move |s, r| lpi.init(s, "m", r),
            move |fw, x| lpi.forward(fw, "m", x, (2, 3)),
        ),
        block(
            "xcit_layer",
            rt(&[2, 6, 6], 77),
            move |s, r| xl.init(s, "m", r),
            move |fw, x| xl.forward(fw, "m", x, (3, 2)),
        ),
        block(
            "class_attention_block",
            rt(&[2, 5, 6], 78),
            move |s, r| cab.init(s, "m", r),
            move |fw, x| cab.forward(fw, "m", x),
        ),
        block(
            "conv_bn",
            rt(&[2, 3, 5, 5], 79),
            move |s, r| convbn.init(s, "m", r),
            move |fw, x| convbn.forward(fw, "m", x),
        ),
        block(
            "inverted_residual",
            rt(&[2, 4, 4, 4], 80),
            move |s, r| ir.init(s, "m", r),
            move |fw, x| ir.forward(fw, "m", x),
        ),
        block(
            "mobilevit_block",
            rt(&[2, 4, 4, 4], 81),
            move |s, r| mvb.init(s, "m", r),
            move |fw, x| mvb2.forward(fw, "m", x),
        ),
    ])
}

/// Random-weight store check with a fixed dropout/batch-stat mode.
fn store_check(
    store: &mut ParamStore<f64>,
    seed: u64,
    fault: Fault,
    opts: &GradCheckOptions,
    f: impl Fn(&mut Forward<'_, f64>) -> Result<Var>,
) -> Result<GradCheckReport> {
    store.randomize(seed, WEIGHT_SCALE);
    check_store_gradients(
        store,
        Mode::train(seed),
        |fw| {
            arm(&mut fw.tape, fault);
            f(fw)
        },
        opts,
    )
}

/// Weight magnitude used by store checks: large enough to leave the
/// zero/one initialisation, small enough to keep activations unsaturated.
pub const WEIGHT_SCALE: f64 = 0.3;

/// Parameter gradients of every network block (training mode, so batch
/// norm uses batch statistics and dropout is active).
pub fn block_suite(fault: Fault, opts: &GradCheckOptions) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::new();
    for (i, c) in block_cases()?.into_iter().enumerate() {
        let mut store = ParamStore::new();
        (c.init)(&mut store, &mut CounterRng::new(i as u64))?;
        let report = store_check(&mut store, 100 + i as u64, fault, opts, |fw| {
            let x = fw.input(c.input.clone());
            let y = (c.forward)(fw, x)?;
            random_projection(&mut fw.tape, y, 7)
        })?;
        out.push(SuiteResult {
            name: c.name.to_string(),
            report,
        });
    }

    // Text encoder with padded questions, and the fusion/classifier head.
    let text_cfg = TextEncoderConfig {
        vocab_size: 12,
        max_len: 5,
        layers: 1,
        heads: 2,
        dim: 6,
        hidden_ratio: 2,
    };
    let enc = TextEncoder::new(text_cfg)?;
    let vocab = crate::text::Vocab::with_words(&["a", "b", "c", "d", "e", "f"])?;
    let seqs = vec![
        crate::text::tokenize("a b", &vocab, 5)?,
        crate::text::tokenize("c d e f", &vocab, 5)?,
    ];
    let mut store = ParamStore::new();
    enc.init(&mut store, "text", &mut CounterRng::new(50))?;
    let report = store_check(&mut store, 150, fault, opts, |fw| {
        let y = enc.forward(fw, "text", &seqs)?;
        random_projection(&mut fw.tape, y, 8)
    })?;
    out.push(SuiteResult {
        name: "text_encoder".into(),
        report,
    });

    let fusion = FusionConfig {
        d_t: 6,
        d_v: 5,
        d_f: 4,
        n_answers: 3,
        head_hidden: 4,
        dropout_p: 0.25,
        activation: FusionActivation::Tanh,
    };
    let mut store = ParamStore::new();
    fusion.init(&mut store, "fusion", "head", &mut CounterRng::new(51))?;
    let (t_in, v_in) = (rt(&[2, 6], 90), rt(&[2, 5], 91));
    let report = store_check(&mut store, 151, fault, opts, |fw| {
        let t = fw.input(t_in.clone());
        let v = fw.input(v_in.clone());
        let f = fusion.fuse(fw, "fusion", t, v)?;
        let logits = fusion.classify(fw, "head", f)?;
        fw.tape.cross_entropy(logits, &[2, 0])
    })?;
    out.push(SuiteResult {
        name: "fusion_classifier".into(),
        report,
    });
    Ok(out)
}

/// Cross-entropy of the whole model on three synthetic samples, checked
/// against every parameter.
pub fn end_to_end(cfg: &ResolvedConfig, fault: Fault, opts: &GradCheckOptions) -> Result<SuiteResult> {
    let model = VqaModel::new(cfg)?;
    let synth = SynthConfig {
        image_size: cfg.image.input_size(),
        ..SynthConfig::default()
    };
    let ds = generate_synthetic(3, 0, &synth, 11)?;
    let data = prepare(&ds.train, &ds.vocab, cfg.text.max_len)?;
    let images = image_batch::<f64>(&data.images)?;
    let targets: Vec<usize> = data.targets.iter().map(|&t| t % cfg.fusion.n_answers).collect();
    let mut store = model.init::<f64>(cfg.train.seed)?;
    let report = store_check(&mut store, 200, fault, opts, |fw| {
        let x = fw.input(images.clone());
        model.loss(fw, &data.seqs, x, &targets)
    })?;
    Ok(SuiteResult {
        name: "end_to_end".into(),
        report,
    })
}
