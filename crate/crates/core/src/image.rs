//! Multispectral image inputs and the four image encoders.
//!
//! Every encoder maps a `[b, 10, s, s]` batch to a pooled `[b, d_v]`
//! representation: the class token for the ViT and XCiT style encoders,
//! global average pooling for MobileViT.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::PadMode;
use crate::nn::{
    init_layer_norm, map_to_tokens, Activation, ClassAttentionBlock, Conv, ConvBn, Forward, Init, InvertedResidual,
    MobileVitBlock, ParamStore, TransformerBlock, XcitLayer, INIT_STD,
};
use crate::rng::CounterRng;
use crate::tape::Var;
use crate::tensor::{Scalar, Tensor};

/// Sentinel-2 bands at 10 m (B2, B3, B4, B8) plus 20 m (B5, B6, B7, B8A,
/// B11, B12) stacked on the 10 m grid.
pub const BANDS: usize = 10;
pub const BANDS_10M: usize = 4;
pub const BANDS_20M: usize = 6;

const IMAGE_MAGIC: &[u8; 4] = b"L4IM";
const IMAGE_VERSION: u32 = 1;

/// A square 10-band raster, band-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageInput {
    size: usize,
    data: Vec<f32>,
}

impl ImageInput {
    pub fn new(bands: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if bands != BANDS {
            return Err(Error::Input(format!("image must have {BANDS} bands, got {bands}")));
        }
        if height != width || height == 0 {
            return Err(Error::Input(format!(
                "image must be square and non-empty, got {height}x{width}"
            )));
        }
        if data.len() != bands * height * width {
            return Err(Error::Input(format!(
                "image data has {} values, expected {bands}x{height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("image contains non-finite values".into()));
        }
        Ok(Self { size: height, data })
    }

    /// Stacks four 10 m bands of `s x s` with six 20 m bands of
    /// `s/2 x s/2`, upsampling the latter by nearest neighbour.
    pub fn from_resolutions(bands_10m: &[Vec<f32>], bands_20m: &[Vec<f32>], size: usize) -> Result<Self> {
        if bands_10m.len() != BANDS_10M || bands_20m.len() != BANDS_20M {
            return Err(Error::Input(format!(
                "expected {BANDS_10M} 10 m and {BANDS_20M} 20 m bands, got {} and {}",
                bands_10m.len(),
                bands_20m.len()
            )));
        }
        let half = size.div_ceil(2);
        let mut data = Vec::with_capacity(BANDS * size * size);
        for b in bands_10m {
            if b.len() != size * size {
                return Err(Error::Input(format!("10 m band must be {size}x{size}")));
            }
            data.extend_from_slice(b);
        }
        for b in bands_20m {
            if b.len() != half * half {
                return Err(Error::Input(format!("20 m band must be {half}x{half}")));
            }
            for y in 0..size {
                for x in 0..size {
                    data.push(b[(y / 2) * half + x / 2]);
                }
            }
        }
        Self::new(BANDS, size, size, data)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Zero-pads on the bottom and right up to `size` (e.g. 120 -> 128).
    pub fn padded_to(&self, size: usize) -> Result<Self> {
        if size < self.size {
            return Err(Error::Input(format!(
                "cannot pad a {0}x{0} image down to {size}",
                self.size
            )));
        }
        let s = self.size;
        let mut data = vec![0.0f32; BANDS * size * size];
        for b in 0..BANDS {
            for y in 0..s {
                let src = &self.data[(b * s + y) * s..][..s];
                data[(b * size + y) * size..][..s].copy_from_slice(src);
            }
        }
        Ok(Self { size, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * self.data.len());
        out.extend_from_slice(IMAGE_MAGIC);
        for v in [IMAGE_VERSION, BANDS as u32, self.size as u32, self.size as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..4] != IMAGE_MAGIC {
            return Err(Error::Format("not an L4IM image (bad magic)".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        if word(0) != IMAGE_VERSION as usize {
            return Err(Error::Format(format!("unsupported image version {}", word(0))));
        }
        let (bands, h, w) = (word(1), word(2), word(3));
        let n = bands
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| Error::Format("image dimensions overflow".into()))?;
        if bytes.len() != 20 + 4 * n {
            return Err(Error::Format(format!(
                "image payload is {} bytes, header implies {}",
                bytes.len() - 20,
                4 * n
            )));
        }
        let data = bytes[20..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(bands, h, w, data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }
}

/// Stacks equally sized images into a `[b, 10, s, s]` tensor.
pub fn image_batch<T: Scalar>(images: &[&ImageInput]) -> Result<Tensor<T>> {
    let s = images
        .first()
        .ok_or_else(|| Error::Input("empty image batch".into()))?
        .size;
    if images.iter().any(|im| im.size != s) {
        return Err(Error::Input("images in a batch must share one size".into()));
    }
    let data = images
        .iter()
        .flat_map(|im| im.data.iter().map(|&v| T::from_f64(v as f64)))
        .collect();
    Tensor::new(vec![images.len(), BANDS, s, s], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageEncoderKind {
    VitTiny,
    VitBase,
    MobilevitS,
    XcitNano,
}

impl ImageEncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            ImageEncoderKind::VitTiny => "vit_tiny",
            ImageEncoderKind::VitBase => "vit_base",
            ImageEncoderKind::MobilevitS => "mobilevit_s",
            ImageEncoderKind::XcitNano => "xcit_nano",
        }
    }
}

fn default_input_size() -> usize {
    128
}

/// Encoder kind plus optional overrides of its default shape. Fields that do
/// not apply to the chosen kind are rejected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEncoderConfig {
    pub kind: ImageEncoderKind,
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    /// Patch size (ViT), stem stride (XCiT) or unfold patch (MobileViT).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_ratio: Option<usize>,
    /// XCiT: class-attention blocks after the XCA layers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_layers: Option<usize>,
    /// MobileViT: stem width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stem: Option<usize>,
    /// MobileViT: output widths of the five stages.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<Vec<usize>>,
    /// MobileViT: transformer widths of the three MobileViT blocks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<Vec<usize>>,
    /// MobileViT: transformer depth of the three MobileViT blocks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depths: Option<Vec<usize>>,
    /// MobileViT: width of the final 1x1 expansion (the output dim).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_channels: Option<usize>,
    /// MobileViT: inverted-residual expansion factor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expansion: Option<usize>,
}

impl ImageEncoderConfig {
    pub fn new(kind: ImageEncoderKind) -> Self {
        Self {
            kind,
            input_size: default_input_size(),
            patch: None,
            layers: None,
            heads: None,
            dim: None,
            hidden_ratio: None,
            class_layers: None,
            stem: None,
            channels: None,
            dims: None,
            depths: None,
            final_channels: None,
            expansion: None,
        }
    }

    /// Applies the overrides to the kind's defaults and validates the result.
    pub fn resolve(&self, section: &str) -> Result<ImageArch> {
        let f = |k: &str| format!("{section}.{k}");
        let kind = self.kind.name();
        let reject = |name: &str, set: bool| -> Result<()> {
            if set {
                Err(Error::config(f(name), format!("not used by `{kind}`")))
            } else {
                Ok(())
            }
        };
        if self.input_size == 0 {
            return Err(Error::config(f("input_size"), "must be positive"));
        }
        let positive = |name: &str, v: usize| -> Result<usize> {
            if v == 0 {
                Err(Error::config(f(name), "must be positive"))
            } else {
                Ok(v)
            }
        };
        let heads_ok = |dim: usize, heads: usize, name: &str| -> Result<()> {
            if heads == 0 || !dim.is_multiple_of(heads) {
                Err(Error::config(
                    f(name),
                    format!("dim {dim} is not divisible by heads {heads}"),
                ))
            } else {
                Ok(())
            }
        };
        match self.kind {
            ImageEncoderKind::VitTiny | ImageEncoderKind::VitBase => {
                reject("class_layers", self.class_layers.is_some())?;
                self.reject_mobilevit(&reject)?;
                let (l, a, d) = if self.kind == ImageEncoderKind::VitTiny {
                    (12, 3, 192)
                } else {
                    (12, 12, 768)
                };
                let arch = VitArch {
                    input_size: self.input_size,
                    patch: positive("patch", self.patch.unwrap_or(16))?,
                    layers: self.layers.unwrap_or(l),
                    heads: self.heads.unwrap_or(a),
                    dim: positive("dim", self.dim.unwrap_or(d))?,
                    hidden_ratio: positive("hidden_ratio", self.hidden_ratio.unwrap_or(4))?,
                };
                heads_ok(arch.dim, arch.heads, "heads")?;
                if !arch.input_size.is_multiple_of(arch.patch) {
                    return Err(Error::config(
                        f("input_size"),
                        format!("{} is not divisible by patch {}", arch.input_size, arch.patch),
                    ));
                }
                Ok(ImageArch::Vit(arch))
            }
            ImageEncoderKind::XcitNano => {
                self.reject_mobilevit(&reject)?;
                let arch = XcitArch {
                    input_size: self.input_size,
                    patch: self.patch.unwrap_or(8),
                    layers: self.layers.unwrap_or(12),
                    heads: self.heads.unwrap_or(4),
                    dim: positive("dim", self.dim.unwrap_or(128))?,
                    hidden_ratio: positive("hidden_ratio", self.hidden_ratio.unwrap_or(4))?,
                    class_layers: self.class_layers.unwrap_or(2),
                };
                heads_ok(arch.dim, arch.heads, "heads")?;
                if arch.patch < 2 || !arch.patch.is_power_of_two() {
                    return Err(Error::config(f("patch"), "stem stride must be a power of two >= 2"));
                }
                let div = arch.patch / 2;
                if !arch.dim.is_multiple_of(div) {
                    return Err(Error::config(
                        f("dim"),
                        format!("{} is not divisible by {div} (stem widths halve per stage)", arch.dim),
                    ));
                }
                if !arch.input_size.is_multiple_of(arch.patch) {
                    return Err(Error::config(
                        f("input_size"),
                        format!("{} is not divisible by the stem stride {}", arch.input_size, arch.patch),
                    ));
                }
                Ok(ImageArch::Xcit(arch))
            }
            ImageEncoderKind::MobilevitS => {
                reject("layers", self.layers.is_some())?;
                reject("dim", self.dim.is_some())?;
                reject("class_layers", self.class_layers.is_some())?;
                let list = |name: &str, v: &Option<Vec<usize>>, default: &[usize]| -> Result<Vec<usize>> {
                    let v = v.clone().unwrap_or_else(|| default.to_vec());
                    if v.len() != default.len() {
                        return Err(Error::config(
                            f(name),
                            format!("needs {} entries, got {}", default.len(), v.len()),
                        ));
                    }
                    Ok(v)
                };
                let channels = list("channels", &self.channels, &[32, 64, 96, 128, 160])?;
                let dims = list("dims", &self.dims, &[144, 192, 240])?;
                let depths = list("depths", &self.depths, &[2, 4, 3])?;
                if channels.contains(&0) {
                    return Err(Error::config(f("channels"), "widths must be positive"));
                }
                let heads = self.heads.unwrap_or(4);
                for &d in &dims {
                    heads_ok(d, heads, "heads")?;
                }
                let arch = MobileVitArch {
                    input_size: self.input_size,
                    stem: positive("stem", self.stem.unwrap_or(16))?,
                    channels: [channels[0], channels[1], channels[2], channels[3], channels[4]],
                    dims: [dims[0], dims[1], dims[2]],
                    depths: [depths[0], depths[1], depths[2]],
                    final_channels: positive("final_channels", self.final_channels.unwrap_or(640))?,
                    heads,
                    ffn_ratio: positive("hidden_ratio", self.hidden_ratio.unwrap_or(2))?,
                    expansion: positive("expansion", self.expansion.unwrap_or(4))?,
                    patch: positive("patch", self.patch.unwrap_or(2))?,
                };
                if !arch.input_size.is_multiple_of(MobileVitArch::STRIDE) {
                    return Err(Error::config(
                        f("input_size"),
                        format!(
                            "{} is not divisible by the total stride {}",
                            arch.input_size,
                            MobileVitArch::STRIDE
                        ),
                    ));
                }
                Ok(ImageArch::MobileVit(arch))
            }
        }
    }

    fn reject_mobilevit(&self, reject: &dyn Fn(&str, bool) -> Result<()>) -> Result<()> {
        reject("stem", self.stem.is_some())?;
        reject("channels", self.channels.is_some())?;
        reject("dims", self.dims.is_some())?;
        reject("depths", self.depths.is_some())?;
        reject("final_channels", self.final_channels.is_some())?;
        reject("expansion", self.expansion.is_some())
    }
}

/// A fully resolved encoder shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImageArch {
    Vit(VitArch),
    MobileVit(MobileVitArch),
    Xcit(XcitArch),
}

impl ImageArch {
    pub fn output_dim(&self) -> usize {
        match self {
            ImageArch::Vit(a) => a.dim,
            ImageArch::MobileVit(a) => a.final_channels,
            ImageArch::Xcit(a) => a.dim,
        }
    }

    pub fn input_size(&self) -> usize {
        match self {
            ImageArch::Vit(a) => a.input_size,
            ImageArch::MobileVit(a) => a.input_size,
            ImageArch::Xcit(a) => a.input_size,
        }
    }

    /// Checks that an `s x s` input can run through this encoder.
    pub fn check_input(&self, s: usize) -> Result<()> {
        let (ok, why) = match self {
            ImageArch::Vit(a) => (
                s == a.input_size,
                format!("ViT encoders need exactly {0}x{0}", a.input_size),
            ),
            ImageArch::MobileVit(_) => (
                s.is_multiple_of(MobileVitArch::STRIDE),
                format!("must be divisible by {}", MobileVitArch::STRIDE),
            ),
            ImageArch::Xcit(a) => (s.is_multiple_of(a.patch), format!("must be divisible by {}", a.patch)),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(
                "image_encoder.input_size",
                format!("input {s}x{s}: {why}"),
            ))
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, prefix: &str, rng: &mut CounterRng) -> Result<()> {
        match self {
            ImageArch::Vit(a) => a.init(store, prefix, rng),
            ImageArch::MobileVit(a) => a.init(store, prefix, rng),
            ImageArch::Xcit(a) => a.init(store, prefix, rng),
        }
    }

    /// `x: [b, 10, s, s]` -> `[b, d_v]`.
    pub fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, prefix: &str, x: Var) -> Result<Var> {
        let s = fw.tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != BANDS || s[2] != s[3] {
            return Err(Error::Input(format!(
                "image batch must be [b, {BANDS}, s, s], got {s:?}"
            )));
        }
        self.check_input(s[2])?;
        match self {
            ImageArch::Vit(a) => a.forward(fw, prefix, x),
            ImageArch::MobileVit(a) => a.forward(fw, prefix, x),
            ImageArch::Xcit(a) => a.forward(fw, prefix, x),
        }
    }
}

/// Broadcasts a `[1, 1, d]` class token to `[b, 1, d]` and prepends it.
fn prepend_class_token<T: Scalar>(fw: &mut Forward<'_, T>, name: &str, x: Var) -> Result<Var> {
    let s = fw.tape.shape(x).to_vec();
    let cls = fw.p(name)?;
    let zeros = fw.input(Tensor::zeros(&[s[0], 1, s[2]]));
    let cls = fw.tape.add(zeros, cls)?;
    fw.tape.concat(&[cls, x], 1)
}

/// DeiT/ViT: patch-embedding conv, class token, learned positions,
/// pre-norm blocks, final norm; output is the class token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VitArch {
    pub input_size: usize,
    pub patch: usize,
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub hidden_ratio: usize,
}

impl VitArch {
    pub fn tokens(&self) -> usize {
        (self.input_size / self.patch).pow(2)
    }

    fn patch_embed(&self) -> Conv {
        Conv::new(BANDS, self.dim, self.patch, self.patch).with_bias()
    }

    fn block(&self) -> Result<TransformerBlock> {
        TransformerBlock::msa(self.dim, self.heads, self.hidden_ratio, Activation::Gelu)
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, prefix: &str, rng: &mut CounterRng) -> Result<()> {
        self.patch_embed().init(store, &format!("{prefix}.patch_embed"), rng)?;
        store.add(
            format!("{prefix}.cls_token"),
            &[1, 1, self.dim],
            Init::TruncNormal(INIT_STD),
            false,
            rng,
        )?;
        store.add(
            format!("{prefix}.pos_embed"),
            &[1, self.tokens() + 1, self.dim],
            Init::TruncNormal(INIT_STD),
            false,
            rng,
        )?;
        let block = self.block()?;
        for i in 0..self.layers {
            block.init(store, &format!("{prefix}.blocks.{i}"), rng)?;
        }
        init_layer_norm(store, &format!("{prefix}.norm"), self.dim, rng)
    }

    pub fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, prefix: &str, x: Var) -> Result<Var> {
        let m = self.patch_embed().forward(fw, &format!("{prefix}.patch_embed"), x)?;
        let t = map_to_tokens(&mut fw.tape, m)?;
        let t = prepend_class_token(fw, &format!("{prefix}.cls_token"), t)?;
        let pos = fw.p(&format!("{prefix}.pos_embed"))?;
        let mut z = fw.tape.add(t, pos)?;
        let block = self.block()?;
        for i in 0..self.layers {
            z = block.forward(fw, &format!("{prefix}.blocks.{i}"), z, None)?;
        }
        let z = fw.layer_norm(&format!("{prefix}.norm"), z)?;
        let b = fw.tape.shape(z)[0];
        let cls = fw.tape.narrow(z, 1, 0, 1)?;
        fw.tape.reshape(cls, &[b, self.dim])
    }
}

/// XCiT: strided conv stem, XCA layers with local patch interaction, class
/// token appended after them and refined by class-attention blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct XcitArch {
    pub input_size: usize,
    /// Total stem stride, a power of two.
    pub patch: usize,
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub hidden_ratio: usize,
    pub class_layers: usize,
}

impl XcitArch {
    /// Stem: `log2(patch)` stride-2 3x3 conv + BN layers, widths doubling up
    /// to `dim`, GELU between them.
    pub fn stem(&self) -> Vec<ConvBn> {
        let n = self.patch.trailing_zeros() as usize;
        let mut c_in = BANDS;
        (0..n)
            .map(|i| {
                let c_out = self.dim >> (n - 1 - i);
                let act = if i + 1 < n {
                    Activation::Gelu
                } else {
                    Activation::Identity
                };
                let layer = ConvBn::new(Conv::new(c_in, c_out, 3, 2), act);
                c_in = c_out;
                layer
            })
            .collect()
    }

    pub fn layer(&self) -> Result<XcitLayer> {
        XcitLayer::new(self.dim, self.heads, self.hidden_ratio)
    }

    pub fn class_block(&self) -> Result<ClassAttentionBlock> {
        ClassAttentionBlock::new(self.dim, self.heads, self.hidden_ratio)
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, prefix: &str, rng: &mut CounterRng) -> Result<()> {
        for (i, l) in self.stem().iter().enumerate() {
            l.init(store, &format!("{prefix}.stem.{i}"), rng)?;
        }
        let layer = self.layer()?;
        for i in 0..self.layers {
            layer.init(store, &format!("{prefix}.blocks.{i}"), rng)?;
        }
        store.add(
            format!("{prefix}.cls_token"),
            &[1, 1, self.dim],
            Init::TruncNormal(INIT_STD),
            false,
            rng,
        )?;
        let cb = self.class_block()?;
        for i in 0..self.class_layers {
            cb.init(store, &format!("{prefix}.cls_blocks.{i}"), rng)?;
        }
        init_layer_norm(store, &format!("{prefix}.norm"), self.dim, rng)
    }

    pub fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, prefix: &str, x: Var) -> Result<Var> {
        let mut m = x;
        for (i, l) in self.stem().iter().enumerate() {
            m = l.forward(fw, &format!("{prefix}.stem.{i}"), m)?;
        }
        let s = fw.tape.shape(m).to_vec();
        let grid = (s[2], s[3]);
        let mut z = map_to_tokens(&mut fw.tape, m)?;
        let layer = self.layer()?;
        for i in 0..self.layers {
            z = layer.forward(fw, &format!("{prefix}.blocks.{i}"), z, grid)?;
        }
        let mut z = prepend_class_token(fw, &format!("{prefix}.cls_token"), z)?;
        let cb = self.class_block()?;
        for i in 0..self.class_layers {
            z = cb.forward(fw, &format!("{prefix}.cls_blocks.{i}"), z)?;
        }
        let b = s[0];
        let cls = fw.tape.narrow(z, 1, 0, 1)?;
        let cls = fw.tape.reshape(cls, &[b, self.dim])?;
        fw.layer_norm(&format!("{prefix}.norm"), cls)
    }
}

/// MobileViT-S: stem, five stages of inverted residuals (the last three
/// followed by a MobileViT block), 1x1 expansion, global average pool.
/// All convolutions pad by edge replication.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MobileVitArch {
    pub input_size: usize,
    pub stem: usize,
    pub channels: [usize; 5],
    pub dims: [usize; 3],
    pub depths: [usize; 3],
    pub final_channels: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub expansion: usize,
    pub patch: usize,
}

/// One unit of a MobileViT stage.
#[derive(Debug, Clone)]
pub enum MobileVitUnit {
    Ir(InvertedResidual),
    Block(MobileVitBlock),
}

impl MobileVitArch {
    pub const STRIDE: usize = 32;
    pub const PAD: PadMode = PadMode::Replicate;

    pub fn stem_layer(&self) -> ConvBn {
        ConvBn::new(
            Conv::new(BANDS, self.stem, 3, 2).with_pad_mode(Self::PAD),
            Activation::Silu,
        )
    }

    pub fn head_layer(&self) -> ConvBn {
        ConvBn::new(Conv::new(self.channels[4], self.final_channels, 1, 1), Activation::Silu)
    }

    /// Units in order with the spatial size of the map they consume, for an
    /// `s x s` input. The unfold patch shrinks to the map size when the map
    /// is smaller than the configured patch.
    pub fn units(&self, s: usize) -> Vec<(String, MobileVitUnit, usize)> {
        let ir = |c_in, c_out, stride| {
            MobileVitUnit::Ir(InvertedResidual {
                c_in,
                c_out,
                stride,
                expansion: self.expansion,
                pad_mode: Self::PAD,
            })
        };
        let c = self.channels;
        let mut units = vec![
            ("layer1.0".to_string(), ir(self.stem, c[0], 1), s / 2),
            ("layer2.0".to_string(), ir(c[0], c[1], 2), s / 2),
            ("layer2.1".to_string(), ir(c[1], c[1], 1), s / 4),
            ("layer2.2".to_string(), ir(c[1], c[1], 1), s / 4),
        ];
        for k in 0..3 {
            let stage = k + 3;
            let map_in = s >> (stage - 1);
            let map = s >> stage;
            units.push((format!("layer{stage}.0"), ir(c[stage - 2], c[stage - 1], 2), map_in));
            let p = self.patch.min(map.max(1));
            units.push((
                format!("layer{stage}.1"),
                MobileVitUnit::Block(MobileVitBlock {
                    channels: c[stage - 1],
                    dim: self.dims[k],
                    depth: self.depths[k],
                    heads: self.heads,
                    ffn_ratio: self.ffn_ratio,
                    patch: (p, p),
                    pad_mode: Self::PAD,
                }),
                map,
            ));
        }
        units
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, prefix: &str, rng: &mut CounterRng) -> Result<()> {
        self.stem_layer().init(store, &format!("{prefix}.stem"), rng)?;
        for (name, unit, _) in self.units(self.input_size) {
            let p = format!("{prefix}.{name}");
            match unit {
                MobileVitUnit::Ir(u) => u.init(store, &p, rng)?,
                MobileVitUnit::Block(u) => u.init(store, &p, rng)?,
            }
        }
        self.head_layer().init(store, &format!("{prefix}.head"), rng)
    }

    pub fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, prefix: &str, x: Var) -> Result<Var> {
        let s = fw.tape.shape(x)[2];
        let mut m = self.stem_layer().forward(fw, &format!("{prefix}.stem"), x)?;
        for (name, unit, _) in self.units(s) {
            let p = format!("{prefix}.{name}");
            m = match unit {
                MobileVitUnit::Ir(u) => u.forward(fw, &p, m)?,
                MobileVitUnit::Block(u) => u.forward(fw, &p, m)?,
            };
        }
        let m = self.head_layer().forward(fw, &format!("{prefix}.head"), m)?;
        let sh = fw.tape.shape(m).to_vec();
        let flat = fw.tape.reshape(m, &[sh[0], sh[1], sh[2] * sh[3]])?;
        fw.tape.mean_last(flat)
    }
}
